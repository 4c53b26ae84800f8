//! Run configuration: sectioned key/value text, every key overridable by a
//! flag, unknown keys rejected, resolved config echoed into the run directory.

use std::path::Path;

use crate::camera::DepthBins;
use crate::dataset::DatasetSpec;
use crate::error::{Error, Result};
use crate::loss::DepthLossMode;
use crate::lss::BevGridSpec;
use crate::model::ModelConfig;
use crate::scene::SceneConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    // [data]
    pub data_views: usize,
    pub data_height: usize,
    pub data_width: usize,
    pub data_scenes: usize,
    pub data_seed: u64,
    // [scene]
    pub scene_extent: f64,
    pub scene_min_objects: usize,
    pub scene_max_objects: usize,
    pub scene_min_size: f64,
    pub scene_max_size: f64,
    pub scene_classes: usize,
    // [model]
    pub model_dim: usize,
    pub model_heads: usize,
    pub model_enc_depth: usize,
    pub model_dec_depth: usize,
    pub model_patch: usize,
    pub model_cva_positions: Vec<usize>,
    pub model_camera_gate: bool,
    // [depth]
    pub depth_min: f64,
    pub depth_max: f64,
    pub depth_bins: usize,
    // [bev]
    pub bev_extent: f64,
    pub bev_cells: usize,
    // [trainer]
    pub train_steps: usize,
    pub train_warmup: usize,
    pub train_lr: f64,
    pub train_weight_decay: f64,
    pub train_alpha: f64,
    pub train_mask_ratio: f64,
    pub train_batch: usize,
    pub train_seed: u64,
    pub train_checkpoint_interval: usize,
    pub train_depth_loss_mode: DepthLossMode,
    // [probe]
    pub probe_steps: usize,
    pub probe_lr: f64,
    pub probe_train_scenes: usize,
    pub probe_eval_scenes: usize,
    pub probe_seed: u64,
    pub probe_head_hidden: usize,
    pub probe_cells: usize,
    pub probe_batch: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data_views: 6,
            data_height: 64,
            data_width: 112,
            data_scenes: 64,
            data_seed: 0,
            scene_extent: 8.0,
            scene_min_objects: 3,
            scene_max_objects: 8,
            scene_min_size: 0.8,
            scene_max_size: 2.5,
            scene_classes: 4,
            model_dim: 64,
            model_heads: 4,
            model_enc_depth: 4,
            model_dec_depth: 8,
            model_patch: 16,
            model_cva_positions: vec![2, 6],
            model_camera_gate: true,
            depth_min: 1.0,
            depth_max: 9.0,
            depth_bins: 16,
            bev_extent: 8.0,
            bev_cells: 32,
            train_steps: 2000,
            train_warmup: 500,
            train_lr: 2e-4,
            train_weight_decay: 0.01,
            train_alpha: crate::loss::ALPHA_DEFAULT,
            train_mask_ratio: 0.5,
            train_batch: 1,
            train_seed: 0,
            train_checkpoint_interval: 0,
            train_depth_loss_mode: DepthLossMode::SoftmaxBce,
            probe_steps: 80,
            probe_lr: 1e-3,
            probe_train_scenes: 16,
            probe_eval_scenes: 16,
            probe_seed: 0,
            probe_head_hidden: 128,
            probe_cells: 16,
            probe_batch: 4,
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut section = String::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_string();
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key = value", lineno + 1))
            })?;
            cfg.set(&format!("{section}.{}", key.trim()), value.trim())?;
        }
        Ok(cfg)
    }

    /// Sets one key, addressed as `section.key`. Unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |what: &str| Error::Config(format!("key {key}: invalid value {what:?}"));
        macro_rules! parse {
            ($ty:ty) => {
                value.parse::<$ty>().map_err(|_| bad(value))?
            };
        }
        match key {
            "data.views" => self.data_views = parse!(usize),
            "data.height" => self.data_height = parse!(usize),
            "data.width" => self.data_width = parse!(usize),
            "data.scenes" => self.data_scenes = parse!(usize),
            "data.seed" => self.data_seed = parse!(u64),
            "scene.extent" => self.scene_extent = parse!(f64),
            "scene.min_objects" => self.scene_min_objects = parse!(usize),
            "scene.max_objects" => self.scene_max_objects = parse!(usize),
            "scene.min_size" => self.scene_min_size = parse!(f64),
            "scene.max_size" => self.scene_max_size = parse!(f64),
            "scene.classes" => self.scene_classes = parse!(usize),
            "model.dim" => self.model_dim = parse!(usize),
            "model.heads" => self.model_heads = parse!(usize),
            "model.enc_depth" => self.model_enc_depth = parse!(usize),
            "model.dec_depth" => self.model_dec_depth = parse!(usize),
            "model.patch" => self.model_patch = parse!(usize),
            "model.cva_positions" => {
                let mut positions = Vec::new();
                for part in value.split(',').filter(|p| !p.trim().is_empty()) {
                    positions.push(part.trim().parse::<usize>().map_err(|_| bad(value))?);
                }
                self.model_cva_positions = positions;
            }
            "model.camera_gate" => self.model_camera_gate = parse!(bool),
            "depth.min" => self.depth_min = parse!(f64),
            "depth.max" => self.depth_max = parse!(f64),
            "depth.bins" => self.depth_bins = parse!(usize),
            "bev.extent" => self.bev_extent = parse!(f64),
            "bev.cells" => self.bev_cells = parse!(usize),
            "trainer.steps" => self.train_steps = parse!(usize),
            "trainer.warmup" => self.train_warmup = parse!(usize),
            "trainer.lr" => self.train_lr = parse!(f64),
            "trainer.weight_decay" => self.train_weight_decay = parse!(f64),
            "trainer.alpha" => self.train_alpha = parse!(f64),
            "trainer.mask_ratio" => self.train_mask_ratio = parse!(f64),
            "trainer.batch" => self.train_batch = parse!(usize),
            "trainer.seed" => self.train_seed = parse!(u64),
            "trainer.checkpoint_interval" => self.train_checkpoint_interval = parse!(usize),
            "trainer.depth_loss_mode" => self.train_depth_loss_mode = parse!(DepthLossMode),
            "probe.steps" => self.probe_steps = parse!(usize),
            "probe.lr" => self.probe_lr = parse!(f64),
            "probe.train_scenes" => self.probe_train_scenes = parse!(usize),
            "probe.eval_scenes" => self.probe_eval_scenes = parse!(usize),
            "probe.seed" => self.probe_seed = parse!(u64),
            "probe.head_hidden" => self.probe_head_hidden = parse!(usize),
            "probe.cells" => self.probe_cells = parse!(usize),
            "probe.batch" => self.probe_batch = parse!(usize),
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Canonical text form; parsing it back yields an equal config.
    pub fn to_text(&self) -> String {
        let cva = self
            .model_cva_positions
            .iter()
            .map(|p| p.to_string())
            .collect::<Vec<_>>()
            .join(",");
        format!(
            "[data]\n\
             views = {}\nheight = {}\nwidth = {}\nscenes = {}\nseed = {}\n\n\
             [scene]\n\
             extent = {}\nmin_objects = {}\nmax_objects = {}\nmin_size = {}\nmax_size = {}\nclasses = {}\n\n\
             [model]\n\
             dim = {}\nheads = {}\nenc_depth = {}\ndec_depth = {}\npatch = {}\ncva_positions = {}\ncamera_gate = {}\n\n\
             [depth]\n\
             min = {}\nmax = {}\nbins = {}\n\n\
             [bev]\n\
             extent = {}\ncells = {}\n\n\
             [trainer]\n\
             steps = {}\nwarmup = {}\nlr = {}\nweight_decay = {}\nalpha = {}\nmask_ratio = {}\nbatch = {}\nseed = {}\ncheckpoint_interval = {}\ndepth_loss_mode = {}\n\n\
             [probe]\n\
             steps = {}\nlr = {}\ntrain_scenes = {}\neval_scenes = {}\nseed = {}\nhead_hidden = {}\ncells = {}\nbatch = {}\n",
            self.data_views,
            self.data_height,
            self.data_width,
            self.data_scenes,
            self.data_seed,
            self.scene_extent,
            self.scene_min_objects,
            self.scene_max_objects,
            self.scene_min_size,
            self.scene_max_size,
            self.scene_classes,
            self.model_dim,
            self.model_heads,
            self.model_enc_depth,
            self.model_dec_depth,
            self.model_patch,
            cva,
            self.model_camera_gate,
            self.depth_min,
            self.depth_max,
            self.depth_bins,
            self.bev_extent,
            self.bev_cells,
            self.train_steps,
            self.train_warmup,
            self.train_lr,
            self.train_weight_decay,
            self.train_alpha,
            self.train_mask_ratio,
            self.train_batch,
            self.train_seed,
            self.train_checkpoint_interval,
            self.train_depth_loss_mode,
            self.probe_steps,
            self.probe_lr,
            self.probe_train_scenes,
            self.probe_eval_scenes,
            self.probe_seed,
            self.probe_head_hidden,
            self.probe_cells,
            self.probe_batch,
        )
    }

    /// FNV-1a over the canonical text; stored in checkpoint metadata.
    pub fn hash(&self) -> String {
        let mut h: u64 = 0xcbf29ce484222325;
        for byte in self.to_text().bytes() {
            h ^= byte as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        format!("{h:016x}")
    }

    pub fn dataset_spec(&self) -> Result<DatasetSpec> {
        Ok(DatasetSpec {
            seed: self.data_seed,
            views: self.data_views,
            height: self.data_height,
            width: self.data_width,
            patch: self.model_patch,
            channels: self.model_dim,
            bins: DepthBins::uniform(self.depth_min, self.depth_max, self.depth_bins)?,
            bev: BevGridSpec::square(self.bev_extent, self.bev_cells),
            scene: SceneConfig {
                extent: self.scene_extent,
                min_objects: self.scene_min_objects,
                max_objects: self.scene_max_objects,
                min_size: self.scene_min_size,
                max_size: self.scene_max_size,
                num_classes: self.scene_classes,
            },
        })
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            dim: self.model_dim,
            heads: self.model_heads,
            enc_depth: self.model_enc_depth,
            dec_depth: self.model_dec_depth,
            patch: self.model_patch,
            bins: self.depth_bins,
            mlp_ratio: 4,
            views: self.data_views,
            cva_positions: self.model_cva_positions.clone(),
            camera_gate: self.model_camera_gate,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_text() {
        let cfg = RunConfig::default();
        let back = RunConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(cfg.hash(), back.hash());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::parse("[trainer]\nbogus = 1\n").is_err());
        assert!(RunConfig::parse("[nowhere]\nsteps = 1\n").is_err());
        let mut cfg = RunConfig::default();
        assert!(cfg.set("trainer.nope", "3").is_err());
    }

    #[test]
    fn overrides_win() {
        let mut cfg = RunConfig::parse("[trainer]\nsteps = 100\n").unwrap();
        assert_eq!(cfg.train_steps, 100);
        cfg.set("trainer.steps", "250").unwrap();
        assert_eq!(cfg.train_steps, 250);
        cfg.set("model.cva_positions", "2,6").unwrap();
        assert_eq!(cfg.model_cva_positions, vec![2, 6]);
    }

    #[test]
    fn comments_and_blank_lines_ignored() {
        let cfg = RunConfig::parse("# top\n[trainer]\n# note\nsteps = 5 # tail\n\n").unwrap();
        assert_eq!(cfg.train_steps, 5);
    }

    #[test]
    fn hash_distinguishes_configs() {
        let a = RunConfig::default();
        let mut b = RunConfig::default();
        b.train_seed = 1;
        assert_ne!(a.hash(), b.hash());
    }
}
