//! Binary checkpoints: config snapshot, vocabulary hash, step counter,
//! parameters, running-stat buffers, and optimizer moments.
//!
//! Layout (all little-endian):
//! ```text
//! magic    8 bytes  "CAMCKPT\x01"
//! config   u32 length + TOML bytes
//! vocab    u32 length + hash bytes
//! step     u64
//! params   u32 count; each: name (u32+bytes), rank u32, dims (u64 × rank),
//!          values (f64 × numel)
//! buffers  same encoding
//! opt      u8 flag; when 1: step u64, then per parameter the first and
//!          second moment values (f64 × numel each)
//! ```
//! The encoding is deterministic, so save → load → save is byte-identical.

use crate::model::cam::CamModel;
use crate::tensor::{Scalar, Tensor};
use crate::train::optim::AdamW;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"CAMCKPT\x01";

#[derive(Debug, thiserror::Error)]
pub enum CkptError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint does not fit this model: {0}")]
    Mismatch(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_toml: String,
    pub vocab_hash: String,
    pub step: u64,
    pub params: Vec<NamedTensor>,
    pub buffers: Vec<NamedTensor>,
    pub opt: Option<OptState>,
}

fn to_named<T: Scalar>(name: &str, t: &Tensor<T>) -> NamedTensor {
    NamedTensor {
        name: name.to_string(),
        shape: t.shape.clone(),
        values: t.data.iter().map(|v| v.as_f64()).collect(),
    }
}

impl Checkpoint {
    /// Snapshot the full training state.
    pub fn capture<T: Scalar>(
        config_toml: &str, vocab_hash: &str, step: u64, model: &mut CamModel<T>,
        opt: Option<&AdamW<T>>,
    ) -> Checkpoint {
        let params: Vec<NamedTensor> =
            model.params_mut().iter().map(|p| to_named(&p.name, &p.value)).collect();
        let buffers: Vec<NamedTensor> =
            model.buffers_mut().iter().map(|(n, t)| to_named(n, t)).collect();
        let opt = opt.map(|o| OptState {
            step: o.step,
            m: o.m.iter().map(|t| t.data.iter().map(|v| v.as_f64()).collect()).collect(),
            v: o.v.iter().map(|t| t.data.iter().map(|v| v.as_f64()).collect()).collect(),
        });
        Checkpoint {
            config_toml: config_toml.to_string(),
            vocab_hash: vocab_hash.to_string(),
            step,
            params,
            buffers,
            opt,
        }
    }

    /// Load parameters and buffers into a freshly built model; names and
    /// shapes must match exactly.
    pub fn apply<T: Scalar>(&self, model: &mut CamModel<T>) -> Result<(), CkptError> {
        let mut params = model.params_mut();
        if params.len() != self.params.len() {
            return Err(CkptError::Mismatch(format!(
                "{} parameters in checkpoint, model has {}",
                self.params.len(),
                params.len()
            )));
        }
        for (p, s) in params.iter_mut().zip(self.params.iter()) {
            if p.name != s.name || p.value.shape != s.shape {
                return Err(CkptError::Mismatch(format!(
                    "expected {} {:?}, found {} {:?}",
                    p.name, p.value.shape, s.name, s.shape
                )));
            }
            for (d, &v) in p.value.data.iter_mut().zip(s.values.iter()) {
                *d = T::from_f64(v);
            }
        }
        let mut buffers = model.buffers_mut();
        if buffers.len() != self.buffers.len() {
            return Err(CkptError::Mismatch("buffer count differs".into()));
        }
        for ((name, t), s) in buffers.iter_mut().zip(self.buffers.iter()) {
            if *name != s.name || t.shape != s.shape {
                return Err(CkptError::Mismatch(format!("buffer {} vs {}", name, s.name)));
            }
            for (d, &v) in t.data.iter_mut().zip(s.values.iter()) {
                *d = T::from_f64(v);
            }
        }
        Ok(())
    }

    /// Restore optimizer moments (shapes from the live parameter list).
    pub fn apply_opt<T: Scalar>(&self, opt: &mut AdamW<T>) -> Result<(), CkptError> {
        let state = self
            .opt
            .as_ref()
            .ok_or_else(|| CkptError::Mismatch("checkpoint has no optimizer state".into()))?;
        if state.m.len() != opt.m.len() {
            return Err(CkptError::Mismatch("optimizer state size differs".into()));
        }
        opt.step = state.step;
        for (dst, src) in opt.m.iter_mut().zip(state.m.iter()) {
            if dst.len() != src.len() {
                return Err(CkptError::Mismatch("moment tensor size differs".into()));
            }
            for (d, &v) in dst.data.iter_mut().zip(src.iter()) {
                *d = T::from_f64(v);
            }
        }
        for (dst, src) in opt.v.iter_mut().zip(state.v.iter()) {
            for (d, &v) in dst.data.iter_mut().zip(src.iter()) {
                *d = T::from_f64(v);
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), CkptError> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        w.write_all(MAGIC)?;
        write_bytes(&mut w, self.config_toml.as_bytes())?;
        write_bytes(&mut w, self.vocab_hash.as_bytes())?;
        w.write_all(&self.step.to_le_bytes())?;
        write_tensors(&mut w, &self.params)?;
        write_tensors(&mut w, &self.buffers)?;
        match &self.opt {
            None => w.write_all(&[0u8])?,
            Some(o) => {
                w.write_all(&[1u8])?;
                w.write_all(&o.step.to_le_bytes())?;
                for group in [&o.m, &o.v] {
                    for vals in group {
                        write_f64s(&mut w, vals)?;
                    }
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint, CkptError> {
        let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(CkptError::Corrupt("bad magic".into()));
        }
        let config_toml = read_string(&mut r)?;
        let vocab_hash = read_string(&mut r)?;
        let step = read_u64(&mut r)?;
        let params = read_tensors(&mut r)?;
        let buffers = read_tensors(&mut r)?;
        let mut flag = [0u8; 1];
        r.read_exact(&mut flag)?;
        let opt = match flag[0] {
            0 => None,
            1 => {
                let ostep = read_u64(&mut r)?;
                let mut m = Vec::with_capacity(params.len());
                for p in &params {
                    m.push(read_f64s(&mut r, p.values.len())?);
                }
                let mut v = Vec::with_capacity(params.len());
                for p in &params {
                    v.push(read_f64s(&mut r, p.values.len())?);
                }
                Some(OptState { step: ostep, m, v })
            }
            x => return Err(CkptError::Corrupt(format!("bad optimizer flag {x}"))),
        };
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(CkptError::Corrupt(format!("{} trailing bytes", rest.len())));
        }
        Ok(Checkpoint { config_toml, vocab_hash, step, params, buffers, opt })
    }
}

fn write_bytes<W: Write>(w: &mut W, b: &[u8]) -> std::io::Result<()> {
    w.write_all(&(b.len() as u32).to_le_bytes())?;
    w.write_all(b)
}

fn write_f64s<W: Write>(w: &mut W, vals: &[f64]) -> std::io::Result<()> {
    for v in vals {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn write_tensors<W: Write>(w: &mut W, ts: &[NamedTensor]) -> std::io::Result<()> {
    w.write_all(&(ts.len() as u32).to_le_bytes())?;
    for t in ts {
        write_bytes(w, t.name.as_bytes())?;
        w.write_all(&(t.shape.len() as u32).to_le_bytes())?;
        for &d in &t.shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        write_f64s(w, &t.values)?;
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, CkptError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64, CkptError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_string<R: Read>(r: &mut R) -> Result<String, CkptError> {
    let len = read_u32(r)? as usize;
    if len > 1 << 28 {
        return Err(CkptError::Corrupt(format!("string of {len} bytes")));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| CkptError::Corrupt("non-UTF-8 string".into()))
}

fn read_f64s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>, CkptError> {
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf)?;
    Ok(buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
}

fn read_tensors<R: Read>(r: &mut R) -> Result<Vec<NamedTensor>, CkptError> {
    let count = read_u32(r)? as usize;
    if count > 1 << 20 {
        return Err(CkptError::Corrupt(format!("{count} tensors")));
    }
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let name = read_string(r)?;
        let rank = read_u32(r)? as usize;
        if rank > 8 {
            return Err(CkptError::Corrupt(format!("rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u64(r)? as usize);
        }
        let numel: usize = shape.iter().product();
        if numel > 1 << 30 {
            return Err(CkptError::Corrupt(format!("tensor of {numel} elements")));
        }
        let values = read_f64s(r, numel)?;
        out.push(NamedTensor { name, shape, values });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::align_fuse::FusionSpec;
    use crate::model::backbone::BackboneConfig;
    use crate::model::decoder::DecoderConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_model(seed: u64) -> CamModel<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        CamModel::with_configs(
            BackboneConfig { depths: [1, 1, 1, 1], dims: [8, 8, 16, 16] },
            DecoderConfig { layers: 2, dim: 16, heads: 8, t_max: 32 },
            FusionSpec::default(),
            &mut rng,
        )
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let mut model = tiny_model(3);
        let opt = {
            let refs = model.params_mut();
            AdamW::new(&refs, 0.9, 0.999, 0.05)
        };
        let ckpt = Checkpoint::capture("variant = \"toy\"", "abc123", 17, &mut model, Some(&opt));
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        ckpt.save(&p1).unwrap();
        let loaded = Checkpoint::load(&p1).unwrap();
        assert_eq!(loaded, ckpt);
        loaded.save(&p2).unwrap();
        let b1 = std::fs::read(&p1).unwrap();
        let b2 = std::fs::read(&p2).unwrap();
        assert_eq!(b1, b2, "round-trip changed the byte stream");
    }

    #[test]
    fn apply_restores_every_parameter_and_buffer() {
        let mut src = tiny_model(4);
        // make buffers non-trivial
        for (_, buf) in src.buffers_mut() {
            for (i, v) in buf.data.iter_mut().enumerate() {
                *v += (i % 5) as f32 * 0.01;
            }
        }
        let ckpt = Checkpoint::capture("", "h", 0, &mut src, None);
        let mut dst = tiny_model(99);
        ckpt.apply(&mut dst).unwrap();
        let a = src.params_mut().iter().flat_map(|p| p.value.data.clone()).collect::<Vec<_>>();
        let b = dst.params_mut().iter().flat_map(|p| p.value.data.clone()).collect::<Vec<_>>();
        assert_eq!(a, b);
        let ba: Vec<f32> = src.buffers_mut().iter().flat_map(|(_, t)| t.data.clone()).collect();
        let bb: Vec<f32> = dst.buffers_mut().iter().flat_map(|(_, t)| t.data.clone()).collect();
        assert_eq!(ba, bb);
    }

    #[test]
    fn mismatched_model_is_rejected() {
        let mut small = tiny_model(5);
        let ckpt = Checkpoint::capture("", "h", 0, &mut small, None);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut other = CamModel::<f32>::with_configs(
            BackboneConfig { depths: [1, 1, 1, 1], dims: [8, 16, 16, 24] },
            DecoderConfig { layers: 2, dim: 16, heads: 8, t_max: 32 },
            FusionSpec::default(),
            &mut rng,
        );
        assert!(matches!(ckpt.apply(&mut other), Err(CkptError::Mismatch(_))));
    }

    #[test]
    fn truncated_file_is_corrupt_not_panic() {
        let dir = tempfile::tempdir().unwrap();
        let mut model = tiny_model(7);
        let ckpt = Checkpoint::capture("", "h", 3, &mut model, None);
        let path = dir.path().join("c.ckpt");
        ckpt.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(Checkpoint::load(&path).is_err());
        std::fs::write(&path, b"NOTACKPT").unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(CkptError::Corrupt(_)) | Err(CkptError::Io(_))));
    }
}
