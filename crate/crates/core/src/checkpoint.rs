//! Checkpoints: a directory of serialized named tensors plus meta.json with
//! the config hash, step counter, and rng state. Save -> load -> save is
//! byte-identical.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::optim::AdamW;
use crate::tensor::{load_tensor, save_tensor, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config_hash: String,
    pub step: usize,
    /// Base seed; per-step randomness derives statelessly from (seed, step).
    pub rng_state: u64,
    pub opt_step: usize,
}

pub fn save_checkpoint(
    dir: &Path,
    model: &ModelParams,
    opt: Option<&AdamW>,
    meta: &CheckpointMeta,
) -> Result<()> {
    let model_dir = dir.join("model");
    std::fs::create_dir_all(&model_dir)?;
    std::fs::write(dir.join("meta.json"), serde_json::to_string_pretty(meta)?)?;
    for (name, tensor) in model.named() {
        save_tensor(&model_dir.join(format!("{name}.bin")), &name, tensor)?;
    }
    if let Some(opt) = opt {
        let opt_dir = dir.join("opt");
        std::fs::create_dir_all(&opt_dir)?;
        for (name, moments) in opt.moments() {
            let m = Tensor::new(vec![moments.m.len()], moments.m.clone())?;
            let v = Tensor::new(vec![moments.v.len()], moments.v.clone())?;
            save_tensor(&opt_dir.join(format!("{name}.m.bin")), name, &m)?;
            save_tensor(&opt_dir.join(format!("{name}.v.bin")), name, &v)?;
        }
    }
    Ok(())
}

pub fn load_checkpoint(
    dir: &Path,
    cfg: &ModelConfig,
) -> Result<(ModelParams, CheckpointMeta, Option<AdamW>)> {
    let meta: CheckpointMeta =
        serde_json::from_str(&std::fs::read_to_string(dir.join("meta.json")).map_err(|e| {
            Error::Checkpoint(format!("{}: {e}", dir.join("meta.json").display()))
        })?)?;
    let mut model = ModelParams::init(cfg, 0)?;
    let model_dir = dir.join("model");
    for (name, tensor) in model.named_mut() {
        let path = model_dir.join(format!("{name}.bin"));
        let (stored_name, loaded) = load_tensor(&path)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        if stored_name != name {
            return Err(Error::Checkpoint(format!(
                "{}: holds tensor {stored_name:?}, expected {name:?}",
                path.display()
            )));
        }
        if loaded.shape() != tensor.shape() {
            return Err(Error::Checkpoint(format!(
                "{name}: checkpoint shape {:?} does not match model shape {:?}",
                loaded.shape(),
                tensor.shape()
            )));
        }
        *tensor = loaded;
    }
    let opt_dir = dir.join("opt");
    let opt = if opt_dir.is_dir() {
        let mut opt = AdamW::new((0.9, 0.999), 1e-8, 0.01);
        opt.step_count = meta.opt_step;
        for (name, tensor) in model.named() {
            let m_path = opt_dir.join(format!("{name}.m.bin"));
            if !m_path.exists() {
                continue;
            }
            let (_, m) = load_tensor(&m_path)?;
            let (_, v) = load_tensor(&opt_dir.join(format!("{name}.v.bin")))?;
            if m.numel() != tensor.numel() {
                return Err(Error::Checkpoint(format!(
                    "{name}: optimizer moment size {} does not match parameter {}",
                    m.numel(),
                    tensor.numel()
                )));
            }
            opt.restore_moments(&name, m.into_data(), v.into_data());
        }
        Some(opt)
    } else {
        None
    };
    Ok((model, meta, opt))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ModelConfig {
            dim: 8,
            heads: 2,
            enc_depth: 1,
            dec_depth: 2,
            patch: 4,
            bins: 4,
            mlp_ratio: 2,
            views: 2,
            cva_positions: vec![1],
            camera_gate: true,
        };
        let mut model = ModelParams::init(&cfg, 5).unwrap();
        let mut opt = AdamW::new((0.9, 0.999), 1e-8, 0.01);
        // Run one optimizer step so moments are nontrivial.
        let mut grads = BTreeMap::new();
        for (name, t) in model.named() {
            grads.insert(name, Tensor::full(t.shape(), 0.3));
        }
        opt.step(model.named_mut(), &grads, 1e-3);

        let meta = CheckpointMeta {
            config_hash: "abc".into(),
            step: 7,
            rng_state: 42,
            opt_step: opt.step_count,
        };
        let first = dir.path().join("first");
        save_checkpoint(&first, &model, Some(&opt), &meta).unwrap();
        let (model2, meta2, opt2) = load_checkpoint(&first, &cfg).unwrap();
        assert_eq!(meta, meta2);
        let second = dir.path().join("second");
        save_checkpoint(&second, &model2, opt2.as_ref(), &meta2).unwrap();

        let mut names: Vec<_> = std::fs::read_dir(first.join("model"))
            .unwrap()
            .map(|e| e.unwrap().file_name())
            .collect();
        names.sort();
        assert!(!names.is_empty());
        for sub in ["model", "opt"] {
            for entry in std::fs::read_dir(first.join(sub)).unwrap() {
                let entry = entry.unwrap();
                let rel = entry.file_name();
                let a = std::fs::read(entry.path()).unwrap();
                let b = std::fs::read(second.join(sub).join(&rel)).unwrap();
                assert_eq!(a, b, "{rel:?} differs after round trip");
            }
        }
        let a = std::fs::read(first.join("meta.json")).unwrap();
        let b = std::fs::read(second.join("meta.json")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ModelConfig {
            dim: 8,
            heads: 2,
            enc_depth: 1,
            dec_depth: 2,
            patch: 4,
            bins: 4,
            mlp_ratio: 2,
            views: 2,
            cva_positions: vec![],
            camera_gate: true,
        };
        let model = ModelParams::init(&cfg, 5).unwrap();
        let meta = CheckpointMeta {
            config_hash: "x".into(),
            step: 0,
            rng_state: 0,
            opt_step: 0,
        };
        save_checkpoint(dir.path(), &model, None, &meta).unwrap();
        let bigger = ModelConfig { dim: 16, ..cfg };
        assert!(load_checkpoint(dir.path(), &bigger).is_err());
    }
}
