//! Model checkpoints.
//!
//! Parameters are computed in f64 but stored as f32. Layout, little-endian:
//!
//! ```text
//! magic       8 bytes "HGCKPT\0\0"
//! version     u32
//! config hash 32 bytes (SHA-256 of the run configuration)
//! config      u32 length + UTF-8 `key=value` lines (ModelConfig)
//! n_params    u32
//! per tensor: u32 name length, name, u32 rows, u32 cols, rows×cols f32
//! has_adam    u8
//! if set:     u64 step, f64 lr, beta1, beta2, epsilon, weight_decay,
//!             then first and second moments as f32 in tensor order
//! ```

use std::path::Path;

use ndarray::Array2;
use thiserror::Error;

use super::{GnnError, ModelConfig, ModelParams};
use crate::autodiff::{AdamState, ParamSet, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"HGCKPT\0\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated checkpoint at byte {0}")]
    Truncated(usize),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("checkpoint does not match its model config: {0}")]
    Model(#[from] GnnError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub config_hash: [u8; 32],
    pub params: ModelParams,
    pub adam: Option<AdamState>,
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_f32s(out: &mut Vec<u8>, m: &Array2<f64>) {
    for &x in m.iter() {
        out.extend_from_slice(&(x as f32).to_le_bytes());
    }
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&ckpt.config_hash);
    let cfg = ckpt.config.to_key_values();
    put_u32(&mut out, cfg.len());
    out.extend_from_slice(cfg.as_bytes());
    put_u32(&mut out, ckpt.params.set.len());
    for t in ckpt.params.set.iter() {
        put_u32(&mut out, t.name.len());
        out.extend_from_slice(t.name.as_bytes());
        put_u32(&mut out, t.value.nrows());
        put_u32(&mut out, t.value.ncols());
        put_f32s(&mut out, &t.value);
    }
    match &ckpt.adam {
        None => out.push(0),
        Some(a) => {
            out.push(1);
            out.extend_from_slice(&a.step.to_le_bytes());
            for x in [a.lr, a.beta1, a.beta2, a.epsilon, a.weight_decay] {
                out.extend_from_slice(&x.to_le_bytes());
            }
            for m in a.first_moment.iter().chain(&a.second_moment) {
                put_f32s(&mut out, m);
            }
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated(self.pos))?;
        let s = self.buf.get(self.pos..end).ok_or(CheckpointError::Truncated(self.pos))?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Result<Array2<f64>, CheckpointError> {
        let n = rows.checked_mul(cols).ok_or(CheckpointError::Truncated(self.pos))?;
        let bytes = self.take(n.checked_mul(4).ok_or(CheckpointError::Truncated(self.pos))?)?;
        let values: Vec<f64> = bytes
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
            .collect();
        if values.iter().any(|x| !x.is_finite()) {
            return Err(CheckpointError::Malformed("non-finite value".into()));
        }
        Ok(Array2::from_shape_vec((rows, cols), values).expect("length checked"))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8).map_err(|_| CheckpointError::BadMagic)? != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32()? as u32;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let config_hash: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
    let len = r.u32()?;
    let text = std::str::from_utf8(r.take(len)?).map_err(|_| CheckpointError::Malformed("config block is not UTF-8".into()))?;
    let config = ModelConfig::from_key_values(text)?;
    let n_params = r.u32()?;
    let mut set = ParamSet::new();
    for _ in 0..n_params {
        let len = r.u32()?;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| CheckpointError::Malformed("tensor name is not UTF-8".into()))?
            .to_string();
        let (rows, cols) = (r.u32()?, r.u32()?);
        let value = r.matrix(rows, cols)?;
        if set.find(&name).is_some() {
            return Err(CheckpointError::Malformed(format!("duplicate tensor `{name}`")));
        }
        set.push(Tensor::param(name, value));
    }
    let params = ModelParams::from_set(&config, set)?;
    let adam = match r.take(1)?[0] {
        0 => None,
        1 => {
            let step = r.u64()?;
            let (lr, beta1, beta2, epsilon, weight_decay) = (r.f64()?, r.f64()?, r.f64()?, r.f64()?, r.f64()?);
            let valid = lr.is_finite()
                && lr >= 0.0
                && (0.0..1.0).contains(&beta1)
                && (0.0..1.0).contains(&beta2)
                && epsilon.is_finite()
                && epsilon > 0.0
                && weight_decay.is_finite()
                && weight_decay >= 0.0;
            if !valid {
                return Err(CheckpointError::Malformed("invalid optimizer settings".into()));
            }
            let shapes: Vec<(usize, usize)> = params.set.iter().map(Tensor::shape).collect();
            let mut first_moment = Vec::with_capacity(shapes.len());
            for &(rows, cols) in &shapes {
                first_moment.push(r.matrix(rows, cols)?);
            }
            let mut second_moment = Vec::with_capacity(shapes.len());
            for &(rows, cols) in &shapes {
                second_moment.push(r.matrix(rows, cols)?);
            }
            let mut state = AdamState::with_betas(&params.set, lr, (beta1, beta2), epsilon, weight_decay);
            state.step = step;
            state.first_moment = first_moment;
            state.second_moment = second_moment;
            Some(state)
        }
        b => return Err(CheckpointError::Malformed(format!("bad optimizer flag {b}"))),
    };
    if r.pos != bytes.len() {
        return Err(CheckpointError::Malformed("trailing bytes".into()));
    }
    Ok(Checkpoint {
        config,
        config_hash,
        params,
        adam,
    })
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), CheckpointError> {
    std::fs::write(path, encode_checkpoint(ckpt))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    decode_checkpoint(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample(seed: u64, with_adam: bool) -> Checkpoint {
        let mut cfg = ModelConfig::new(5);
        cfg.hidden_dim = 6;
        let params = ModelParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let adam = with_adam.then(|| {
            let mut a = AdamState::new(&params.set, 1e-3, 1e-4);
            a.step = 17;
            for m in &mut a.first_moment {
                m.fill(0.25);
            }
            a
        });
        Checkpoint {
            config: cfg,
            config_hash: [7; 32],
            params,
            adam,
        }
    }

    fn f32_rounded(ckpt: &Checkpoint) -> Checkpoint {
        let mut out = ckpt.clone();
        for t in out.params.set.iter_mut() {
            t.value.mapv_inplace(|x| f64::from(x as f32));
        }
        out
    }

    #[test]
    fn round_trip_is_exact_after_f32_rounding() {
        for adam in [false, true] {
            let ckpt = sample(3, adam);
            let back = decode_checkpoint(&encode_checkpoint(&ckpt)).unwrap();
            let expected = f32_rounded(&ckpt);
            assert_eq!(back.config, expected.config);
            assert_eq!(back.config_hash, expected.config_hash);
            assert_eq!(back.params, expected.params);
            assert_eq!(back.adam.as_ref().map(|a| a.step), ckpt.adam.as_ref().map(|a| a.step));
            // A second pass through the codec is lossless.
            assert_eq!(encode_checkpoint(&back), encode_checkpoint(&ckpt));
        }
    }

    #[test]
    fn rejects_corruption() {
        let bytes = encode_checkpoint(&sample(1, false));
        assert!(matches!(decode_checkpoint(&bytes[..bytes.len() - 2]), Err(CheckpointError::Truncated(_))));
        let mut bad = bytes.clone();
        bad[1] = 0;
        assert!(matches!(decode_checkpoint(&bad), Err(CheckpointError::BadMagic)));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode_checkpoint(&extra).is_err());
        let mut v = bytes;
        v[8] = 9;
        assert!(matches!(decode_checkpoint(&v), Err(CheckpointError::UnsupportedVersion(9))));
    }

    proptest! {
        #[test]
        fn arbitrary_bytes_never_panic(bytes in proptest::collection::vec(any::<u8>(), 0..512)) {
            let _ = decode_checkpoint(&bytes);
        }

        #[test]
        fn bit_flips_never_panic(pos in 0usize..4096, bit in 0u8..8) {
            let mut bytes = encode_checkpoint(&sample(2, true));
            let p = pos % bytes.len();
            bytes[p] ^= 1 << bit;
            let _ = decode_checkpoint(&bytes);
        }
    }
}
