use rustfft::num_complex::Complex;

use super::tensor::Tensor;
use crate::fft::fft2_inplace;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var, f64),
    MulScalar(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Abs(Var),
    Sqrt(Var),
    Log(Var),
    Softplus(Var),
    Clamp01(Var),
    Sum(Var),
    MaxAll(Var, usize),
    GlobalAvgPool(Var),
    PatchAvgPool(Var, usize),
    ChanMean(Var),
    BcastChan(Var),
    BcastScalar(Var),
    RowSum(Var),
    BcastRow(Var),
    AddRowVec(Var, Var),
    Slice0(Var, usize),
    ConcatChan(Var, Var),
    Upsample2(Var),
    Matmul(Var, Var),
    Conv2d { x: Var, w: Var, b: Option<Var>, stride: usize },
    MulBcast(Var, Var),
    AddBcast(Var, Var),
    Fft2Re(Var),
    Fft2Im(Var),
    Ifft2Re(Var),
    Ifft2Im(Var),
}

struct Node {
    value: Tensor,
    needs: bool,
    op: Op,
}

/// Tape of eagerly evaluated operations. Build values through the op
/// methods, then call [`Graph::backward`] on a scalar output; gradients of
/// parameter leaves are then available through [`Graph::grad`].
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), grads: Vec::new() }
    }

    /// Constant input: no gradient flows into it.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, false, Op::Leaf)
    }

    /// Differentiable input.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, true, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Value of a scalar ([1]) node.
    pub fn scalar_value(&self, v: Var) -> f64 {
        let t = self.value(v);
        assert_eq!(t.numel(), 1, "expected scalar node");
        t.data[0]
    }

    /// Gradient of the last `backward` target w.r.t. `v`, if it was reached.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, value: Tensor, needs: bool, op: Op) -> Var {
        self.nodes.push(Node { value, needs, op });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs
    }

    fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value.data
    }

    // ---- elementwise ----

    fn binary_same(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "shape mismatch in elementwise op");
        let data: Vec<f64> =
            self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data);
        let needs = self.needs(a) || self.needs(b);
        self.push(value, needs, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary_same(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary_same(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary_same(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary_same(a, b, |x, y| x / y, Op::Div(a, b))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let data: Vec<f64> = self.data(a).iter().map(|&x| f(x)).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data);
        let needs = self.needs(a);
        self.push(value, needs, op)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x + c, Op::AddScalar(a, c))
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x * c, Op::MulScalar(a, c))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, f64::abs, Op::Abs(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, f64::sqrt, Op::Sqrt(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log(a))
    }

    /// Numerically stable ln(1 + e^x).
    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0) + (-x.abs()).exp().ln_1p(), Op::Softplus(a))
    }

    pub fn clamp01(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.clamp(0.0, 1.0), Op::Clamp01(a))
    }

    // ---- reductions / broadcasts ----

    /// Sum of all elements -> [1].
    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.data(a).iter().sum();
        let needs = self.needs(a);
        self.push(Tensor::scalar(s), needs, Op::Sum(a))
    }

    /// Mean of all elements -> [1].
    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.data(a).len();
        let s = self.sum(a);
        self.mul_scalar(s, 1.0 / n as f64)
    }

    /// Max over all elements -> [1]; ties break to the first occurrence.
    pub fn max_all(&mut self, a: Var) -> Var {
        let data = self.data(a);
        let mut arg = 0;
        let mut best = data[0];
        for (i, &x) in data.iter().enumerate().skip(1) {
            if x > best {
                best = x;
                arg = i;
            }
        }
        let needs = self.needs(a);
        self.push(Tensor::scalar(best), needs, Op::MaxAll(a, arg))
    }

    /// [N,C,H,W] -> [N,C] mean over each plane.
    pub fn global_avg_pool(&mut self, a: Var) -> Var {
        let (n, c, h, w) = self.nodes[a.0].value.dims4();
        let src = self.data(a);
        let hw = h * w;
        let mut out = vec![0.0; n * c];
        for i in 0..n * c {
            out[i] = src[i * hw..(i + 1) * hw].iter().sum::<f64>() / hw as f64;
        }
        let needs = self.needs(a);
        self.push(Tensor::new(vec![n, c], out), needs, Op::GlobalAvgPool(a))
    }

    /// [N,C,H,W] -> [N,C,H/p,W/p] average over non-overlapping p x p patches;
    /// remainder rows/cols are dropped.
    pub fn patch_avg_pool(&mut self, a: Var, p: usize) -> Var {
        assert!(p >= 1);
        let (n, c, h, w) = self.nodes[a.0].value.dims4();
        let (oh, ow) = (h / p, w / p);
        assert!(oh > 0 && ow > 0, "patch larger than input");
        let src = self.data(a);
        let mut out = vec![0.0; n * c * oh * ow];
        let inv = 1.0 / (p * p) as f64;
        for nc in 0..n * c {
            let plane = &src[nc * h * w..(nc + 1) * h * w];
            let dst = &mut out[nc * oh * ow..(nc + 1) * oh * ow];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = 0.0;
                    for dy in 0..p {
                        let row = (oy * p + dy) * w + ox * p;
                        s += plane[row..row + p].iter().sum::<f64>();
                    }
                    dst[oy * ow + ox] = s * inv;
                }
            }
        }
        let needs = self.needs(a);
        self.push(Tensor::new(vec![n, c, oh, ow], out), needs, Op::PatchAvgPool(a, p))
    }

    /// [N,C,H,W] -> [C] mean over batch and spatial dims.
    pub fn chan_mean(&mut self, a: Var) -> Var {
        let (n, c, h, w) = self.nodes[a.0].value.dims4();
        let src = self.data(a);
        let hw = h * w;
        let mut out = vec![0.0; c];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * hw;
                out[ci] += src[base..base + hw].iter().sum::<f64>();
            }
        }
        let denom = (n * hw) as f64;
        for v in &mut out {
            *v /= denom;
        }
        let needs = self.needs(a);
        self.push(Tensor::new(vec![c], out), needs, Op::ChanMean(a))
    }

    /// [C] -> [N,C,H,W] replicated per channel.
    pub fn bcast_chan(&mut self, a: Var, n: usize, h: usize, w: usize) -> Var {
        let c = self.shape(a)[0];
        assert_eq!(self.shape(a).len(), 1);
        let src = self.data(a).to_vec();
        let hw = h * w;
        let mut out = vec![0.0; n * c * hw];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * hw;
                out[base..base + hw].fill(src[ci]);
            }
        }
        let needs = self.needs(a);
        self.push(Tensor::new(vec![n, c, h, w], out), needs, Op::BcastChan(a))
    }

    /// [1] -> arbitrary shape.
    pub fn bcast_scalar(&mut self, a: Var, shape: Vec<usize>) -> Var {
        assert_eq!(self.data(a).len(), 1);
        let v = self.data(a)[0];
        let needs = self.needs(a);
        self.push(Tensor::full(shape, v), needs, Op::BcastScalar(a))
    }

    /// [N,D] -> [N] row sums.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let (n, d) = self.nodes[a.0].value.dims2();
        let src = self.data(a);
        let out: Vec<f64> = (0..n).map(|i| src[i * d..(i + 1) * d].iter().sum()).collect();
        let needs = self.needs(a);
        self.push(Tensor::new(vec![n], out), needs, Op::RowSum(a))
    }

    /// [N] -> [N,D] replicated along rows.
    pub fn bcast_row(&mut self, a: Var, d: usize) -> Var {
        assert_eq!(self.shape(a).len(), 1);
        let n = self.shape(a)[0];
        let src = self.data(a).to_vec();
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            out[i * d..(i + 1) * d].fill(src[i]);
        }
        let needs = self.needs(a);
        self.push(Tensor::new(vec![n, d], out), needs, Op::BcastRow(a))
    }

    /// [N,D] + [D] broadcast over rows.
    pub fn add_row_vec(&mut self, a: Var, b: Var) -> Var {
        let (n, d) = self.nodes[a.0].value.dims2();
        assert_eq!(self.shape(b), &[d]);
        let av = self.data(a);
        let bv = self.data(b);
        let mut out = Vec::with_capacity(n * d);
        for i in 0..n {
            for j in 0..d {
                out.push(av[i * d + j] + bv[j]);
            }
        }
        let needs = self.needs(a) || self.needs(b);
        self.push(Tensor::new(vec![n, d], out), needs, Op::AddRowVec(a, b))
    }

    fn slice0(&mut self, a: Var, start: usize, len: usize) -> Var {
        let shape = self.shape(a).to_vec();
        assert!(start + len <= shape[0], "dim-0 slice out of range");
        let stride: usize = shape[1..].iter().product();
        let src = self.data(a)[start * stride..(start + len) * stride].to_vec();
        let mut out_shape = shape;
        out_shape[0] = len;
        let needs = self.needs(a);
        self.push(Tensor::new(out_shape, src), needs, Op::Slice0(a, start))
    }

    /// Rows [start, start+len) of a [N,D] tensor.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        self.nodes[a.0].value.dims2();
        self.slice0(a, start, len)
    }

    /// Samples [start, start+len) of an NCHW tensor.
    pub fn slice_batch(&mut self, a: Var, start: usize, len: usize) -> Var {
        self.nodes[a.0].value.dims4();
        self.slice0(a, start, len)
    }

    /// Concatenate two NCHW tensors along the channel dim.
    pub fn concat_chan(&mut self, a: Var, b: Var) -> Var {
        let (n, ca, h, w) = self.nodes[a.0].value.dims4();
        let (nb, cb, hb, wb) = self.nodes[b.0].value.dims4();
        assert_eq!((n, h, w), (nb, hb, wb), "concat shape mismatch");
        let hw = h * w;
        let av = self.data(a);
        let bv = self.data(b);
        let mut out = Vec::with_capacity((ca + cb) * n * hw);
        for ni in 0..n {
            out.extend_from_slice(&av[ni * ca * hw..(ni + 1) * ca * hw]);
            out.extend_from_slice(&bv[ni * cb * hw..(ni + 1) * cb * hw]);
        }
        let needs = self.needs(a) || self.needs(b);
        self.push(Tensor::new(vec![n, ca + cb, h, w], out), needs, Op::ConcatChan(a, b))
    }

    /// Nearest-neighbour 2x upsampling of an NCHW tensor.
    pub fn upsample2(&mut self, a: Var) -> Var {
        let (n, c, h, w) = self.nodes[a.0].value.dims4();
        let src = self.data(a);
        let mut out = vec![0.0; n * c * 4 * h * w];
        let (oh, ow) = (2 * h, 2 * w);
        for nc in 0..n * c {
            let plane = &src[nc * h * w..(nc + 1) * h * w];
            let dst = &mut out[nc * oh * ow..(nc + 1) * oh * ow];
            for y in 0..oh {
                for x in 0..ow {
                    dst[y * ow + x] = plane[(y / 2) * w + x / 2];
                }
            }
        }
        let needs = self.needs(a);
        self.push(Tensor::new(vec![n, c, oh, ow], out), needs, Op::Upsample2(a))
    }

    /// [M,K] x [K,N] -> [M,N].
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.nodes[a.0].value.dims2();
        let (kb, n) = self.nodes[b.0].value.dims2();
        assert_eq!(k, kb, "matmul inner dims differ");
        let mut out = vec![0.0; m * n];
        matmul_nn(self.data(a), self.data(b), &mut out, m, k, n);
        let needs = self.needs(a) || self.needs(b);
        self.push(Tensor::new(vec![m, n], out), needs, Op::Matmul(a, b))
    }

    /// 2-d convolution (cross-correlation) with replicate padding of kh/2,
    /// kw/2 on each side; kernels must have odd spatial dims. `x` is
    /// [N,IC,H,W], `w` is [OC,IC,KH,KW], `b` (optional) is [OC]. Output is
    /// [N,OC,(H-1)/s+1,(W-1)/s+1].
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Var {
        let (n, ic, h, wd) = self.nodes[x.0].value.dims4();
        let ws = self.shape(w).to_vec();
        assert_eq!(ws.len(), 4, "conv weight must be 4-d");
        let (oc, wic, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        assert_eq!(ic, wic, "conv channel mismatch");
        assert!(kh % 2 == 1 && kw % 2 == 1, "conv kernels must be odd-sized");
        assert!(stride >= 1);
        let (oh, ow) = conv_out_dims(h, wd, kh, kw, stride);
        let mut cols = vec![0.0; ic * kh * kw * oh * ow];
        let mut out = vec![0.0; n * oc * oh * ow];
        let bias: Option<Vec<f64>> = b.map(|bv| {
            assert_eq!(self.shape(bv), &[oc], "conv bias shape");
            self.data(bv).to_vec()
        });
        for ni in 0..n {
            let xin = &self.data(x)[ni * ic * h * wd..(ni + 1) * ic * h * wd];
            im2col(xin, ic, h, wd, kh, kw, stride, &mut cols);
            let dst = &mut out[ni * oc * oh * ow..(ni + 1) * oc * oh * ow];
            matmul_nn(self.data(w), &cols, dst, oc, ic * kh * kw, oh * ow);
            if let Some(ref bias) = bias {
                for (ci, &bv) in bias.iter().enumerate() {
                    for v in &mut dst[ci * oh * ow..(ci + 1) * oh * ow] {
                        *v += bv;
                    }
                }
            }
        }
        let needs =
            self.needs(x) || self.needs(w) || b.map(|bv| self.needs(bv)).unwrap_or(false);
        self.push(Tensor::new(vec![n, oc, oh, ow], out), needs, Op::Conv2d { x, w, b, stride })
    }

    fn bcast_map_check(&self, x: Var, m: Var) -> (usize, usize, usize, usize, usize) {
        let (n, c, h, w) = self.nodes[x.0].value.dims4();
        let ms = self.shape(m);
        assert_eq!(ms.len(), 4, "broadcast map must be 4-d");
        assert!(ms[0] == n || ms[0] == 1, "map batch dim must be 1 or N");
        assert_eq!(ms[1], 1, "broadcast map must have one channel");
        assert_eq!((ms[2], ms[3]), (h, w), "map spatial dims must match");
        (n, c, h, w, ms[0])
    }

    /// [N,C,H,W] * map([N|1],1,H,W) broadcast over channels (and batch when
    /// the map has a single entry).
    pub fn mul_bcast(&mut self, x: Var, m: Var) -> Var {
        let (n, c, h, w, mn) = self.bcast_map_check(x, m);
        let hw = h * w;
        let xv = self.data(x);
        let mv = self.data(m);
        let mut out = vec![0.0; n * c * hw];
        for ni in 0..n {
            let mbase = if mn == 1 { 0 } else { ni * hw };
            for ci in 0..c {
                let base = (ni * c + ci) * hw;
                for i in 0..hw {
                    out[base + i] = xv[base + i] * mv[mbase + i];
                }
            }
        }
        let needs = self.needs(x) || self.needs(m);
        self.push(Tensor::new(vec![n, c, h, w], out), needs, Op::MulBcast(x, m))
    }

    /// [N,C,H,W] + map([N|1],1,H,W) broadcast over channels.
    pub fn add_bcast(&mut self, x: Var, m: Var) -> Var {
        let (n, c, h, w, mn) = self.bcast_map_check(x, m);
        let hw = h * w;
        let xv = self.data(x);
        let mv = self.data(m);
        let mut out = vec![0.0; n * c * hw];
        for ni in 0..n {
            let mbase = if mn == 1 { 0 } else { ni * hw };
            for ci in 0..c {
                let base = (ni * c + ci) * hw;
                for i in 0..hw {
                    out[base + i] = xv[base + i] + mv[mbase + i];
                }
            }
        }
        let needs = self.needs(x) || self.needs(m);
        self.push(Tensor::new(vec![n, c, h, w], out), needs, Op::AddBcast(x, m))
    }

    // ---- Fourier ops (per NCHW plane, unnormalised forward / normalised inverse) ----

    fn fft_op(&mut self, a: Var, inverse: bool, imag: bool, op: Op) -> Var {
        let (n, c, h, w) = self.nodes[a.0].value.dims4();
        let src = self.data(a);
        let mut out = vec![0.0; n * c * h * w];
        let hw = h * w;
        for nc in 0..n * c {
            let mut buf: Vec<Complex<f64>> =
                src[nc * hw..(nc + 1) * hw].iter().map(|&v| Complex::new(v, 0.0)).collect();
            fft2_inplace(&mut buf, h, w, inverse);
            let scale = if inverse { 1.0 / hw as f64 } else { 1.0 };
            let dst = &mut out[nc * hw..(nc + 1) * hw];
            for (d, z) in dst.iter_mut().zip(&buf) {
                *d = if imag { z.im } else { z.re } * scale;
            }
        }
        let needs = self.needs(a);
        self.push(Tensor::new(vec![n, c, h, w], out), needs, op)
    }

    /// Real part of the 2-d DFT of a real NCHW tensor.
    pub fn fft2_re(&mut self, a: Var) -> Var {
        self.fft_op(a, false, false, Op::Fft2Re(a))
    }

    /// Imaginary part of the 2-d DFT of a real NCHW tensor.
    pub fn fft2_im(&mut self, a: Var) -> Var {
        self.fft_op(a, false, true, Op::Fft2Im(a))
    }

    /// Real part of the normalised inverse 2-d DFT of a real NCHW tensor.
    pub fn ifft2_re(&mut self, a: Var) -> Var {
        self.fft_op(a, true, false, Op::Ifft2Re(a))
    }

    /// Imaginary part of the normalised inverse 2-d DFT of a real NCHW tensor.
    pub fn ifft2_im(&mut self, a: Var) -> Var {
        self.fft_op(a, true, true, Op::Ifft2Im(a))
    }

    // ---- backward ----

    /// Reverse-mode sweep from a scalar output. Gradients accumulate into
    /// every reachable node that transitively depends on a parameter leaf.
    pub fn backward(&mut self, out: Var) {
        assert_eq!(self.nodes[out.0].value.numel(), 1, "backward target must be scalar");
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        grads[out.0] = Some(vec![1.0]);
        for i in (0..=out.0).rev() {
            if !self.nodes[i].needs || grads[i].is_none() {
                continue;
            }
            let g = grads[i].clone().unwrap();
            self.accumulate(i, &g, &mut grads);
        }
        self.grads = grads;
    }

    fn add_grad(&self, grads: &mut [Option<Vec<f64>>], v: Var, add: impl FnOnce(&mut [f64])) {
        if !self.needs(v) {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(vec![0.0; self.nodes[v.0].value.numel()]);
        }
        add(slot.as_mut().unwrap());
    }

    fn accumulate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let op = self.nodes[i].op.clone();
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.add_grad(grads, a, |ga| axpy(ga, g, 1.0));
                self.add_grad(grads, b, |gb| axpy(gb, g, 1.0));
            }
            Op::Sub(a, b) => {
                self.add_grad(grads, a, |ga| axpy(ga, g, 1.0));
                self.add_grad(grads, b, |gb| axpy(gb, g, -1.0));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.data(a), self.data(b));
                self.add_grad(grads, a, |ga| {
                    for ((d, &gi), &y) in ga.iter_mut().zip(g).zip(bv) {
                        *d += gi * y;
                    }
                });
                self.add_grad(grads, b, |gb| {
                    for ((d, &gi), &x) in gb.iter_mut().zip(g).zip(av) {
                        *d += gi * x;
                    }
                });
            }
            Op::Div(a, b) => {
                let (av, bv) = (self.data(a), self.data(b));
                self.add_grad(grads, a, |ga| {
                    for ((d, &gi), &y) in ga.iter_mut().zip(g).zip(bv) {
                        *d += gi / y;
                    }
                });
                self.add_grad(grads, b, |gb| {
                    for i in 0..gb.len() {
                        gb[i] -= g[i] * av[i] / (bv[i] * bv[i]);
                    }
                });
            }
            Op::AddScalar(a, _) => self.add_grad(grads, a, |ga| axpy(ga, g, 1.0)),
            Op::MulScalar(a, c) => self.add_grad(grads, a, |ga| axpy(ga, g, c)),
            Op::Relu(a) => {
                let xv = self.data(a);
                self.add_grad(grads, a, |ga| {
                    for i in 0..ga.len() {
                        if xv[i] > 0.0 {
                            ga[i] += g[i];
                        }
                    }
                });
            }
            Op::Sigmoid(a) => {
                let yv = self.data(Var(i));
                self.add_grad(grads, a, |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * yv[i] * (1.0 - yv[i]);
                    }
                });
            }
            Op::Abs(a) => {
                let xv = self.data(a);
                self.add_grad(grads, a, |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * sign(xv[i]);
                    }
                });
            }
            Op::Sqrt(a) => {
                let yv = self.data(Var(i));
                self.add_grad(grads, a, |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * 0.5 / yv[i];
                    }
                });
            }
            Op::Log(a) => {
                let xv = self.data(a);
                self.add_grad(grads, a, |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] / xv[i];
                    }
                });
            }
            Op::Softplus(a) => {
                let xv = self.data(a);
                self.add_grad(grads, a, |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * sigmoid(xv[i]);
                    }
                });
            }
            Op::Clamp01(a) => {
                let xv = self.data(a);
                self.add_grad(grads, a, |ga| {
                    for i in 0..ga.len() {
                        if xv[i] > 0.0 && xv[i] < 1.0 {
                            ga[i] += g[i];
                        }
                    }
                });
            }
            Op::Sum(a) => self.add_grad(grads, a, |ga| {
                for d in ga.iter_mut() {
                    *d += g[0];
                }
            }),
            Op::MaxAll(a, arg) => self.add_grad(grads, a, |ga| ga[arg] += g[0]),
            Op::GlobalAvgPool(a) => {
                let (_, _, h, w) = self.nodes[a.0].value.dims4();
                let inv = 1.0 / (h * w) as f64;
                self.add_grad(grads, a, |ga| {
                    for (nc, &gi) in g.iter().enumerate() {
                        for d in &mut ga[nc * h * w..(nc + 1) * h * w] {
                            *d += gi * inv;
                        }
                    }
                });
            }
            Op::PatchAvgPool(a, p) => {
                let (n, c, h, w) = self.nodes[a.0].value.dims4();
                let (oh, ow) = (h / p, w / p);
                let inv = 1.0 / (p * p) as f64;
                self.add_grad(grads, a, |ga| {
                    for nc in 0..n * c {
                        let gp = &g[nc * oh * ow..(nc + 1) * oh * ow];
                        let dst = &mut ga[nc * h * w..(nc + 1) * h * w];
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let gi = gp[oy * ow + ox] * inv;
                                for dy in 0..p {
                                    let row = (oy * p + dy) * w + ox * p;
                                    for d in &mut dst[row..row + p] {
                                        *d += gi;
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::ChanMean(a) => {
                let (n, c, h, w) = self.nodes[a.0].value.dims4();
                let inv = 1.0 / (n * h * w) as f64;
                self.add_grad(grads, a, |ga| {
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * h * w;
                            for d in &mut ga[base..base + h * w] {
                                *d += g[ci] * inv;
                            }
                        }
                    }
                });
            }
            Op::BcastChan(a) => {
                let shape = self.shape(Var(i)).to_vec();
                let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
                self.add_grad(grads, a, |ga| {
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * h * w;
                            ga[ci] += g[base..base + h * w].iter().sum::<f64>();
                        }
                    }
                });
            }
            Op::BcastScalar(a) => {
                self.add_grad(grads, a, |ga| ga[0] += g.iter().sum::<f64>());
            }
            Op::RowSum(a) => {
                let (n, d) = self.nodes[a.0].value.dims2();
                self.add_grad(grads, a, |ga| {
                    for r in 0..n {
                        for j in 0..d {
                            ga[r * d + j] += g[r];
                        }
                    }
                });
            }
            Op::BcastRow(a) => {
                let shape = self.shape(Var(i)).to_vec();
                let (n, d) = (shape[0], shape[1]);
                self.add_grad(grads, a, |ga| {
                    for r in 0..n {
                        ga[r] += g[r * d..(r + 1) * d].iter().sum::<f64>();
                    }
                });
            }
            Op::AddRowVec(a, b) => {
                let (n, d) = self.nodes[a.0].value.dims2();
                self.add_grad(grads, a, |ga| axpy(ga, g, 1.0));
                self.add_grad(grads, b, |gb| {
                    for r in 0..n {
                        for j in 0..d {
                            gb[j] += g[r * d + j];
                        }
                    }
                });
            }
            Op::Slice0(a, start) => {
                let stride: usize = self.shape(a)[1..].iter().product();
                self.add_grad(grads, a, |ga| {
                    axpy(&mut ga[start * stride..start * stride + g.len()], g, 1.0);
                });
            }
            Op::ConcatChan(a, b) => {
                let (n, ca, h, w) = self.nodes[a.0].value.dims4();
                let cb = self.shape(b)[1];
                let hw = h * w;
                self.add_grad(grads, a, |ga| {
                    for ni in 0..n {
                        let src = ni * (ca + cb) * hw;
                        axpy(
                            &mut ga[ni * ca * hw..(ni + 1) * ca * hw],
                            &g[src..src + ca * hw],
                            1.0,
                        );
                    }
                });
                self.add_grad(grads, b, |gb| {
                    for ni in 0..n {
                        let src = ni * (ca + cb) * hw + ca * hw;
                        axpy(
                            &mut gb[ni * cb * hw..(ni + 1) * cb * hw],
                            &g[src..src + cb * hw],
                            1.0,
                        );
                    }
                });
            }
            Op::Upsample2(a) => {
                let (n, c, h, w) = self.nodes[a.0].value.dims4();
                let (oh, ow) = (2 * h, 2 * w);
                self.add_grad(grads, a, |ga| {
                    for nc in 0..n * c {
                        let gp = &g[nc * oh * ow..(nc + 1) * oh * ow];
                        let dst = &mut ga[nc * h * w..(nc + 1) * h * w];
                        for y in 0..oh {
                            for x in 0..ow {
                                dst[(y / 2) * w + x / 2] += gp[y * ow + x];
                            }
                        }
                    }
                });
            }
            Op::Matmul(a, b) => {
                let (m, k) = self.nodes[a.0].value.dims2();
                let (_, n) = self.nodes[b.0].value.dims2();
                let (av, bv) = (self.data(a), self.data(b));
                self.add_grad(grads, a, |ga| matmul_nt(g, bv, ga, m, n, k));
                self.add_grad(grads, b, |gb| matmul_tn(av, g, gb, m, k, n));
            }
            Op::Conv2d { x, w, b, stride } => {
                self.conv2d_backward(x, w, b, stride, Var(i), g, grads);
            }
            Op::MulBcast(x, m) => {
                let (n, c, h, w) = self.nodes[x.0].value.dims4();
                let mn = self.shape(m)[0];
                let hw = h * w;
                let (xv, mv) = (self.data(x), self.data(m));
                self.add_grad(grads, x, |gx| {
                    for ni in 0..n {
                        let mbase = if mn == 1 { 0 } else { ni * hw };
                        for ci in 0..c {
                            let base = (ni * c + ci) * hw;
                            for i in 0..hw {
                                gx[base + i] += g[base + i] * mv[mbase + i];
                            }
                        }
                    }
                });
                self.add_grad(grads, m, |gm| {
                    for ni in 0..n {
                        let mbase = if mn == 1 { 0 } else { ni * hw };
                        for ci in 0..c {
                            let base = (ni * c + ci) * hw;
                            for i in 0..hw {
                                gm[mbase + i] += g[base + i] * xv[base + i];
                            }
                        }
                    }
                });
            }
            Op::AddBcast(x, m) => {
                let (n, c, h, w) = self.nodes[x.0].value.dims4();
                let mn = self.shape(m)[0];
                let hw = h * w;
                self.add_grad(grads, x, |gx| axpy(gx, g, 1.0));
                self.add_grad(grads, m, |gm| {
                    for ni in 0..n {
                        let mbase = if mn == 1 { 0 } else { ni * hw };
                        for ci in 0..c {
                            let base = (ni * c + ci) * hw;
                            for i in 0..hw {
                                gm[mbase + i] += g[base + i];
                            }
                        }
                    }
                });
            }
            // The DFT matrix over real inputs is symmetric, so the adjoint of
            // taking Re/Im of the (i)DFT is Re/Im of the same (i)DFT of the
            // incoming gradient.
            Op::Fft2Re(a) => self.fft_adjoint(a, Var(i), g, grads, false, false),
            Op::Fft2Im(a) => self.fft_adjoint(a, Var(i), g, grads, false, true),
            Op::Ifft2Re(a) => self.fft_adjoint(a, Var(i), g, grads, true, false),
            Op::Ifft2Im(a) => self.fft_adjoint(a, Var(i), g, grads, true, true),
        }
    }

    fn fft_adjoint(
        &self,
        a: Var,
        out: Var,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        inverse: bool,
        imag: bool,
    ) {
        let (n, c, h, w) = self.nodes[out.0].value.dims4();
        let hw = h * w;
        self.add_grad(grads, a, |ga| {
            for nc in 0..n * c {
                let mut buf: Vec<Complex<f64>> =
                    g[nc * hw..(nc + 1) * hw].iter().map(|&v| Complex::new(v, 0.0)).collect();
                fft2_inplace(&mut buf, h, w, inverse);
                let scale = if inverse { 1.0 / hw as f64 } else { 1.0 };
                let dst = &mut ga[nc * hw..(nc + 1) * hw];
                for (d, z) in dst.iter_mut().zip(&buf) {
                    *d += if imag { z.im } else { z.re } * scale;
                }
            }
        });
    }

    #[allow(clippy::too_many_arguments)]
    fn conv2d_backward(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        out: Var,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (n, ic, h, wd) = self.nodes[x.0].value.dims4();
        let ws = self.shape(w);
        let (oc, kh, kw) = (ws[0], ws[2], ws[3]);
        let (_, _, oh, ow) = self.nodes[out.0].value.dims4();
        let ckk = ic * kh * kw;
        let mut cols = vec![0.0; ckk * oh * ow];
        if let Some(bv) = b {
            self.add_grad(grads, bv, |gb| {
                for ni in 0..n {
                    for ci in 0..oc {
                        let base = (ni * oc + ci) * oh * ow;
                        gb[ci] += g[base..base + oh * ow].iter().sum::<f64>();
                    }
                }
            });
        }
        if self.needs(w) {
            let xv = self.data(x);
            self.add_grad(grads, w, |gw| {
                for ni in 0..n {
                    let xin = &xv[ni * ic * h * wd..(ni + 1) * ic * h * wd];
                    im2col(xin, ic, h, wd, kh, kw, stride, &mut cols);
                    let gout = &g[ni * oc * oh * ow..(ni + 1) * oc * oh * ow];
                    matmul_nt(gout, &cols, gw, oc, oh * ow, ckk);
                }
            });
        }
        if self.needs(x) {
            let wv = self.data(w);
            let mut dcols = vec![0.0; ckk * oh * ow];
            self.add_grad(grads, x, |gx| {
                for ni in 0..n {
                    dcols.fill(0.0);
                    let gout = &g[ni * oc * oh * ow..(ni + 1) * oc * oh * ow];
                    matmul_tn(wv, gout, &mut dcols, oc, ckk, oh * ow);
                    col2im_add(
                        &dcols,
                        ic,
                        h,
                        wd,
                        kh,
                        kw,
                        stride,
                        &mut gx[ni * ic * h * wd..(ni + 1) * ic * h * wd],
                    );
                }
            });
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn axpy(dst: &mut [f64], src: &[f64], a: f64) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}

pub(crate) fn conv_out_dims(
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
) -> (usize, usize) {
    let pad_h = kh / 2;
    let pad_w = kw / 2;
    ((h + 2 * pad_h - kh) / stride + 1, (w + 2 * pad_w - kw) / stride + 1)
}

/// C += A[m,k] * B[k,n].
pub(crate) fn matmul_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// C += A[m,k] * B[n,k]^T.
pub(crate) fn matmul_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for (&av, &bv) in arow.iter().zip(brow) {
                s += av * bv;
            }
            c[i * n + j] += s;
        }
    }
}

/// C += A[k,m]^T * B[k,n].
pub(crate) fn matmul_tn(a: &[f64], b: &[f64], c: &mut [f64], k: usize, m: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// Gather replicate-padded kh x kw patches of a CHW plane stack into a
/// [C*KH*KW, OH*OW] matrix.
fn im2col(
    x: &[f64],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    cols: &mut [f64],
) {
    let (oh, ow) = conv_out_dims(h, w, kh, kw, stride);
    let pad_h = (kh / 2) as isize;
    let pad_w = (kw / 2) as isize;
    debug_assert_eq!(cols.len(), c * kh * kw * oh * ow);
    let mut row = 0;
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for dy in 0..kh {
            for dx in 0..kw {
                let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                row += 1;
                for oy in 0..oh {
                    let sy = ((oy * stride) as isize - pad_h + dy as isize)
                        .clamp(0, h as isize - 1) as usize;
                    for ox in 0..ow {
                        let sx = ((ox * stride) as isize - pad_w + dx as isize)
                            .clamp(0, w as isize - 1) as usize;
                        dst[oy * ow + ox] = plane[sy * w + sx];
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add column gradients back onto the plane
/// stack, with clamped (replicate) indices accumulating on the border.
#[allow(clippy::too_many_arguments)]
fn col2im_add(
    cols: &[f64],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    x: &mut [f64],
) {
    let (oh, ow) = conv_out_dims(h, w, kh, kw, stride);
    let pad_h = (kh / 2) as isize;
    let pad_w = (kw / 2) as isize;
    let mut row = 0;
    for ci in 0..c {
        let plane = &mut x[ci * h * w..(ci + 1) * h * w];
        for dy in 0..kh {
            for dx in 0..kw {
                let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                row += 1;
                for oy in 0..oh {
                    let sy = ((oy * stride) as isize - pad_h + dy as isize)
                        .clamp(0, h as isize - 1) as usize;
                    for ox in 0..ow {
                        let sx = ((ox * stride) as isize - pad_w + dx as isize)
                            .clamp(0, w as isize - 1) as usize;
                        plane[sy * w + sx] += src[oy * ow + ox];
                    }
                }
            }
        }
    }
}
