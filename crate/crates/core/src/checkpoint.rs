//! Binary checkpoints: `MSRH`, a `u32` format version, a `u64` manifest
//! length, a JSON manifest, then every tensor as little-endian `f32`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, MsrModel};
use crate::scalar::Scalar;
use crate::tensor::Params;
use crate::trainer::{Adam, TrainConfig, Trainer};

pub const MAGIC: &[u8; 4] = b"MSRH";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the payload, in elements.
    pub offset: usize,
}

/// Training randomness is a pure function of `(seed, step)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub step: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub step: u64,
    pub rng: RngState,
    pub adam_t: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub tensors: Vec<TensorEntry>,
}

/// Writes model parameters and both Adam moments. Values are stored as
/// `f32`, so the round trip is bit-exact for `f32` trainers.
pub fn save_checkpoint<T: Scalar>(path: impl AsRef<Path>, tr: &Trainer<T>) -> Result<()> {
    let named = tr.model.named_tensors();
    let mut tensors = Vec::new();
    let mut payload: Vec<u8> = Vec::new();
    let mut offset = 0;
    let mut push = |name: String, shape: Vec<usize>, data: &[T]| {
        tensors.push(TensorEntry { name, shape, offset });
        offset += data.len();
        for &v in data {
            payload.extend_from_slice(&v.as_f32().to_le_bytes());
        }
    };
    for (name, t) in &named {
        push(name.clone(), t.shape.clone(), &t.data);
    }
    for (i, (name, t)) in named.iter().enumerate() {
        push(format!("adam.m.{name}"), t.shape.clone(), &tr.adam.m[i]);
    }
    for (i, (name, t)) in named.iter().enumerate() {
        push(format!("adam.v.{name}"), t.shape.clone(), &tr.adam.v[i]);
    }
    let manifest = CheckpointManifest {
        step: tr.step,
        rng: RngState { seed: tr.cfg.seed, step: tr.step },
        adam_t: tr.adam.t,
        model: tr.model.cfg.clone(),
        train: tr.cfg.clone(),
        tensors,
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(16 + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    // Write then rename so a crash never leaves a half-written checkpoint.
    let path = path.as_ref();
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, out)?;
    fs::rename(tmp, path)?;
    Ok(())
}

fn ck(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn read_manifest(bytes: &[u8]) -> Result<(CheckpointManifest, &[u8])> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(ck("bad magic bytes"));
    }
    if bytes.len() < 16 {
        return Err(ck("truncated header"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(ck(format!("unsupported format version {version}, expected {VERSION}")));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = &bytes[16..];
    if body.len() < len {
        return Err(ck("truncated manifest"));
    }
    let manifest: CheckpointManifest = serde_json::from_slice(&body[..len]).map_err(|e| ck(format!("manifest: {e}")))?;
    Ok((manifest, &body[len..]))
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<Trainer<T>> {
    let bytes = fs::read(path)?;
    let (manifest, payload) = read_manifest(&bytes)?;
    let total: usize = manifest.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
    if payload.len() != total * 4 {
        return Err(ck(format!("payload is {} bytes, expected {}", payload.len(), total * 4)));
    }
    let read = |e: &TensorEntry| -> Vec<T> {
        let n: usize = e.shape.iter().product();
        payload[e.offset * 4..(e.offset + n) * 4].chunks_exact(4).map(|c| T::lit(f32::from_le_bytes(c.try_into().unwrap()) as f64)).collect()
    };
    let by_name: std::collections::HashMap<&str, &TensorEntry> = manifest.tensors.iter().map(|t| (t.name.as_str(), t)).collect();
    let mut model = MsrModel::<T>::new(&manifest.model, 0)?;
    let mut err = None;
    model.visit_mut("", &mut |name, t| match by_name.get(name.as_str()) {
        Some(e) if e.shape == t.shape => t.data = read(e),
        Some(e) => err = Some(ck(format!("{name}: shape {:?} ≠ expected {:?}", e.shape, t.shape))),
        None => err = Some(ck(format!("missing tensor {name}"))),
    });
    if let Some(e) = err {
        return Err(e);
    }
    let mut adam = Adam::new(&model);
    adam.t = manifest.adam_t;
    for (i, (name, _)) in model.named_tensors().iter().enumerate() {
        for (kind, dst) in [("m", &mut adam.m[i]), ("v", &mut adam.v[i])] {
            let e = by_name.get(format!("adam.{kind}.{name}").as_str()).ok_or_else(|| ck(format!("missing adam.{kind}.{name}")))?;
            *dst = read(e);
        }
    }
    let mut tr = Trainer::new(model, manifest.train)?;
    tr.adam = adam;
    tr.step = manifest.step;
    Ok(tr)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::{generate_utterance, SynthSpec};
    use crate::encoder::EncoderConfig;

    fn trainer() -> Trainer<f32> {
        let mut cfg = ModelConfig::desk(&[16_000, 22_050]).unwrap();
        cfg.plans = cfg.plans.iter().map(|p| p.clone().with_channels(8)).collect();
        cfg.encoder = EncoderConfig { input_dim: 8, num_layers: 1, dim: 16, num_heads: 2, ffn_dim: 32, ..cfg.encoder };
        let mut tr = Trainer::new(MsrModel::new(&cfg, 3).unwrap(), TrainConfig { rates: TrainConfig::uniform(&[16_000, 22_050]), ..TrainConfig::default() }).unwrap();
        tr.step = 7;
        tr.adam.t = 7;
        tr.adam.m[0][0] = 0.125;
        tr.adam.v[1][0] = 3.5e-7;
        tr
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let tr = trainer();
        save_checkpoint(dir.path().join("c.ckpt"), &tr).unwrap();
        let back = load_checkpoint::<f32>(dir.path().join("c.ckpt")).unwrap();
        assert_eq!(back.model, tr.model);
        assert_eq!(back.adam, tr.adam);
        assert_eq!(back.step, 7);
        let (w, _) = generate_utterance(&SynthSpec::new(0.5, 3, 1)).unwrap();
        let w = crate::dsp::decimate(&w, 16_000).unwrap();
        assert_eq!(back.model.hidden_states(&w).unwrap(), tr.model.hidden_states(&w).unwrap());
    }

    #[test]
    fn corrupt_files_are_checkpoint_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.ckpt");
        save_checkpoint(&p, &trainer()).unwrap();
        let good = fs::read(&p).unwrap();
        let mut bad = good.clone();
        bad[0] = b'X';
        fs::write(&p, &bad).unwrap();
        assert!(matches!(load_checkpoint::<f32>(&p), Err(Error::Checkpoint(_))));
        let mut bad = good.clone();
        bad[4] = 9;
        fs::write(&p, &bad).unwrap();
        assert!(matches!(load_checkpoint::<f32>(&p), Err(Error::Checkpoint(m)) if m.contains("version")));
        fs::write(&p, &good[..good.len() - 10]).unwrap();
        assert!(matches!(load_checkpoint::<f32>(&p), Err(Error::Checkpoint(_))));
        fs::write(&p, &good[..20]).unwrap();
        assert!(matches!(load_checkpoint::<f32>(&p), Err(Error::Checkpoint(_))));
    }
}
