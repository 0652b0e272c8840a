use super::graph::{Graph, Var};
use super::params::{Bound, ParamSet};
use super::tensor::Tensor;
use crate::rng::SeededRng;

pub const BN_EPS: f64 = 1e-5;

/// Register a conv layer's tensors under `prefix` (He-normal weights, zero
/// bias when requested).
pub fn conv_init(
    params: &mut ParamSet,
    prefix: &str,
    oc: usize,
    ic: usize,
    k: usize,
    bias: bool,
    rng: &mut SeededRng,
) {
    let std = (2.0 / (ic * k * k) as f64).sqrt();
    let n = oc * ic * k * k;
    let w = Tensor::new(
        vec![oc, ic, k, k],
        (0..n).map(|_| rng.normal() * std).collect(),
    );
    params.insert(&format!("{prefix}.w"), w, true);
    if bias {
        params.insert(&format!("{prefix}.b"), Tensor::zeros(vec![oc]), true);
    }
}

/// Stride-s conv reading `{prefix}.w` (and `.b` when present).
pub fn conv2d_layer(g: &mut Graph, b: &Bound, params: &ParamSet, prefix: &str, x: Var, stride: usize) -> Var {
    let w = b.var(&format!("{prefix}.w"));
    let bias_name = format!("{prefix}.b");
    let bias = params.contains(&bias_name).then(|| b.var(&bias_name));
    g.conv2d(x, w, bias, stride)
}

/// Register batch-norm tensors: trainable gamma/beta plus running-mean /
/// running-var buffers and the update counter.
pub fn bn_init(params: &mut ParamSet, prefix: &str, c: usize) {
    params.insert(&format!("{prefix}.gamma"), Tensor::full(vec![c], 1.0), true);
    params.insert(&format!("{prefix}.beta"), Tensor::zeros(vec![c]), true);
    params.insert(&format!("{prefix}.rm"), Tensor::zeros(vec![c]), false);
    params.insert(&format!("{prefix}.rv"), Tensor::full(vec![c], 1.0), false);
    params.insert(&format!("{prefix}.n"), Tensor::zeros(vec![1]), false);
}

/// Deferred running-statistics update produced by a train-mode batch-norm
/// forward; applied to the owning [`ParamSet`] after the step.
#[derive(Debug, Clone)]
pub struct BnUpdate {
    pub prefix: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BnUpdate {
    /// The first update copies the batch statistics (warm start, so eval
    /// mode is calibrated from step one); afterwards
    /// running = (1 - momentum) * running + momentum * batch.
    pub fn apply(&self, params: &mut ParamSet, momentum: f64) {
        let first = {
            let n = params.get_mut(&format!("{}.n", self.prefix));
            let first = n.data[0] == 0.0;
            n.data[0] += 1.0;
            first
        };
        let m = if first { 1.0 } else { momentum };
        let rm = params.get_mut(&format!("{}.rm", self.prefix));
        for (r, &b) in rm.data.iter_mut().zip(&self.mean) {
            *r = (1.0 - m) * *r + m * b;
        }
        let rv = params.get_mut(&format!("{}.rv", self.prefix));
        for (r, &b) in rv.data.iter_mut().zip(&self.var) {
            *r = (1.0 - m) * *r + m * b;
        }
    }
}

/// Batch normalisation over an NCHW tensor. In train mode the batch
/// statistics normalise the activations (population variance) and are
/// reported through `updates`; in eval mode the stored running statistics
/// are used, which keeps the op a fixed affine map.
pub fn batch_norm(
    g: &mut Graph,
    b: &Bound,
    prefix: &str,
    x: Var,
    train: bool,
    updates: &mut Vec<BnUpdate>,
) -> Var {
    let (n, _, h, w) = g.value(x).dims4();
    let gamma = b.var(&format!("{prefix}.gamma"));
    let beta = b.var(&format!("{prefix}.beta"));
    let (xc, var) = if train {
        let mean = g.chan_mean(x);
        let mb = g.bcast_chan(mean, n, h, w);
        let xc = g.sub(x, mb);
        let sq = g.mul(xc, xc);
        let var = g.chan_mean(sq);
        updates.push(BnUpdate {
            prefix: prefix.to_string(),
            mean: g.value(mean).data.clone(),
            var: g.value(var).data.clone(),
        });
        (xc, var)
    } else {
        let rm = b.var(&format!("{prefix}.rm"));
        let rv = b.var(&format!("{prefix}.rv"));
        let mb = g.bcast_chan(rm, n, h, w);
        (g.sub(x, mb), rv)
    };
    let veps = g.add_scalar(var, BN_EPS);
    let std = g.sqrt(veps);
    let stdb = g.bcast_chan(std, n, h, w);
    let norm = g.div(xc, stdb);
    let gb = g.bcast_chan(gamma, n, h, w);
    let scaled = g.mul(norm, gb);
    let bb = g.bcast_chan(beta, n, h, w);
    g.add(scaled, bb)
}

/// Register a linear layer: weight [in, out] plus bias [out].
pub fn linear_init(params: &mut ParamSet, prefix: &str, din: usize, dout: usize, rng: &mut SeededRng) {
    let std = (2.0 / din as f64).sqrt();
    let w = Tensor::new(
        vec![din, dout],
        (0..din * dout).map(|_| rng.normal() * std).collect(),
    );
    params.insert(&format!("{prefix}.w"), w, true);
    params.insert(&format!("{prefix}.b"), Tensor::zeros(vec![dout]), true);
}

/// x[N,in] -> x.w + b.
pub fn linear_layer(g: &mut Graph, b: &Bound, prefix: &str, x: Var) -> Var {
    let w = b.var(&format!("{prefix}.w"));
    let bias = b.var(&format!("{prefix}.b"));
    let y = g.matmul(x, w);
    g.add_row_vec(y, bias)
}
