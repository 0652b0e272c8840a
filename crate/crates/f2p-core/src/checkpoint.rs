//! Flat binary model container: `F2PCKPT` magic, format version, a module
//! tag identifying which network the tensors belong to, then named tensors
//! (name, dtype, trainable flag, shape, little-endian f64 data, CRC32).
//! Round-trips are bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{F2pError, F2pResult};
use crate::nn::{ParamSet, Tensor};

const MAGIC: &[u8; 7] = b"F2PCKPT";
const VERSION: u32 = 1;
const DTYPE_F64: u8 = 1;

fn bad(msg: impl Into<String>) -> F2pError {
    F2pError::Checkpoint(msg.into())
}

/// Serialise a parameter set under `tag` ("fusion", "enhancer", "embedder", ...).
pub fn save_checkpoint(path: &Path, tag: &str, params: &ParamSet) -> F2pResult<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    write_str(&mut w, tag)?;
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for name in params.names() {
        let t = params.get(name);
        write_str(&mut w, name)?;
        w.write_all(&[DTYPE_F64, params.is_trainable(name) as u8])?;
        w.write_all(&(t.shape.len() as u32).to_le_bytes())?;
        for &d in &t.shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        let mut hasher = crc32fast::Hasher::new();
        for &v in &t.data {
            let b = v.to_le_bytes();
            hasher.update(&b);
            w.write_all(&b)?;
        }
        w.write_all(&hasher.finalize().to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Load a checkpoint, verifying magic, version, module tag and per-tensor
/// checksums.
pub fn load_checkpoint(path: &Path, expected_tag: &str) -> F2pResult<ParamSet> {
    let (tag, params) = load_any_checkpoint(path)?;
    if tag != expected_tag {
        return Err(bad(format!(
            "module tag mismatch: file holds {tag:?}, expected {expected_tag:?}"
        )));
    }
    Ok(params)
}

/// Load a checkpoint of any module, returning its tag alongside the tensors.
pub fn load_any_checkpoint(path: &Path) -> F2pResult<(String, ParamSet)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 7];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(bad("not a model checkpoint (bad magic)"));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(bad(format!("unsupported checkpoint version {version}")));
    }
    let tag = read_str(&mut r)?;
    let count = read_u32(&mut r)? as usize;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let name = read_str(&mut r)?;
        let mut head = [0u8; 2];
        r.read_exact(&mut head)?;
        if head[0] != DTYPE_F64 {
            return Err(bad(format!("tensor {name:?} has unsupported dtype {}", head[0])));
        }
        let trainable = head[1] != 0;
        let ndim = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            shape.push(u64::from_le_bytes(b) as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut hasher = crc32fast::Hasher::new();
        let mut b = [0u8; 8];
        for _ in 0..numel {
            r.read_exact(&mut b)?;
            hasher.update(&b);
            data.push(f64::from_le_bytes(b));
        }
        let stored = read_u32(&mut r)?;
        if hasher.finalize() != stored {
            return Err(bad(format!("tensor {name:?} failed its checksum")));
        }
        if params.contains(&name) {
            return Err(bad(format!("duplicate tensor {name:?}")));
        }
        params.insert(&name, Tensor::new(shape, data), trainable);
    }
    Ok((tag, params))
}

fn write_str(w: &mut impl Write, s: &str) -> std::io::Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())
}

fn read_u32(r: &mut impl Read) -> F2pResult<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_str(r: &mut impl Read) -> F2pResult<String> {
    let len = read_u32(r)? as usize;
    if len > 1 << 20 {
        return Err(bad("string field too long"));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| bad("string field is not UTF-8"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    fn sample_params() -> ParamSet {
        let mut rng = SeededRng::new(21);
        let mut p = ParamSet::new();
        p.insert(
            "enc.c0.w",
            Tensor::new(vec![2, 3, 3, 3], (0..54).map(|_| rng.normal()).collect()),
            true,
        );
        p.insert("enc.bn0.rm", Tensor::new(vec![2], vec![0.25, -0.5]), false);
        p.insert("head.b", Tensor::new(vec![4], vec![1e-300, -0.0, f64::MIN_POSITIVE, 3.5]), true);
        p
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = std::env::temp_dir().join("f2p_ckpt_roundtrip");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("m.ckpt");
        let p = sample_params();
        save_checkpoint(&path, "fusion", &p).unwrap();
        let q = load_checkpoint(&path, "fusion").unwrap();
        let names: Vec<&str> = q.names().collect();
        assert_eq!(names, p.names().collect::<Vec<_>>());
        for name in p.names() {
            let (a, b) = (p.get(name), q.get(name));
            assert_eq!(a.shape, b.shape);
            for (x, y) in a.data.iter().zip(&b.data) {
                assert_eq!(x.to_bits(), y.to_bits(), "{name} not bit-exact");
            }
            assert_eq!(p.is_trainable(name), q.is_trainable(name));
        }
    }

    #[test]
    fn wrong_tag_is_rejected() {
        let dir = std::env::temp_dir().join("f2p_ckpt_tag");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("m.ckpt");
        save_checkpoint(&path, "fusion", &sample_params()).unwrap();
        let err = load_checkpoint(&path, "embedder").unwrap_err();
        assert!(matches!(err, F2pError::Checkpoint(_)));
        assert!(err.to_string().contains("tag"));
    }

    #[test]
    fn corrupted_byte_fails_checksum() {
        let dir = std::env::temp_dir().join("f2p_ckpt_corrupt");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("m.ckpt");
        save_checkpoint(&path, "fusion", &sample_params()).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0xff;
        std::fs::write(&path, &bytes).unwrap();
        let err = load_checkpoint(&path, "fusion").unwrap_err();
        assert!(matches!(err, F2pError::Checkpoint(_) | F2pError::Io(_)));
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = std::env::temp_dir().join("f2p_ckpt_magic");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("m.ckpt");
        std::fs::write(&path, b"NOTACKPTxxxxxxxxxxxx").unwrap();
        let err = load_checkpoint(&path, "fusion").unwrap_err();
        assert!(err.to_string().contains("magic"));
    }
}
