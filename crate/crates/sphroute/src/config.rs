//! Run configuration: data, model and schedule in one JSON document.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use sphroute_core::backbone::ArchConfig;
use sphroute_core::encoders::EncoderConfig;
use sphroute_core::glgf::GlgfConfig;
use sphroute_core::model::ModelConfig;
use sphroute_core::synth::{Family, ParamRanges, SynthConfig};
use sphroute_core::trainer::TrainConfig;

use crate::error::{format_err, io_err, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Directory of PNG scenes cropped for clean images instead of the
    /// procedural generator. Relative paths resolve against the working directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_images: Option<PathBuf>,
}

pub type Hash = [u8; 32];

fn sha256_json<T: Serialize>(value: &T) -> Hash {
    let bytes = serde_json::to_vec(value).expect("configs serialise");
    Sha256::digest(&bytes).into()
}

impl RunConfig {
    /// The three-family configuration used for desk-scale runs: noise at
    /// sigma 25, rain and low light on 40x40 procedural scenes.
    pub fn desk() -> Self {
        let enc = EncoderConfig::new(vec![8, 16, 32], 32);
        let mut train = TrainConfig {
            patch_size: 32,
            patches_per_epoch: 1000,
            ..TrainConfig::default()
        };
        train.stage1.batch_size = 5;
        train.stage1.lr = 1e-3;
        train.stage2.batch_size = 8;
        train.stage2.lr = 1e-3;
        Self {
            synth: SynthConfig {
                image_size: 40,
                patch_size: 32,
                families: vec![Family::Noise, Family::Rain, Family::LowLight],
                train_per_family: 100,
                test_per_family: 20,
                seed: 0,
                ranges: ParamRanges {
                    noise_sigmas: vec![25.0],
                    ..ParamRanges::default()
                },
            },
            model: ModelConfig {
                content: enc.clone(),
                degradation: enc,
                routing_dim: 32,
                temperature: 1.0,
                arch: ArchConfig {
                    widths: vec![8, 16, 16, 32],
                    blocks: vec![1, 1, 1, 1],
                    experts: 3,
                    ffn_expansion: 2,
                },
                glgf: GlgfConfig::default(),
            },
            train,
            base_images: None,
        }
    }

    /// A seconds-scale configuration for smoke tests of the pipeline.
    pub fn toy() -> Self {
        let mut cfg = Self::desk();
        cfg.synth.image_size = 16;
        cfg.synth.patch_size = 16;
        cfg.synth.train_per_family = 4;
        cfg.synth.test_per_family = 2;
        cfg.model.content = EncoderConfig::new(vec![4, 8], 8);
        cfg.model.degradation = cfg.model.content.clone();
        cfg.model.routing_dim = 8;
        cfg.model.arch.widths = vec![4, 8];
        cfg.model.arch.blocks = vec![1, 1];
        cfg.model.glgf.grid = 2;
        cfg.model.glgf.inject_sites = vec![2, 3];
        cfg.train.patch_size = 16;
        cfg.train.patches_per_epoch = 12;
        cfg.train.stage1.epochs = 2;
        cfg.train.stage1.batch_size = 6;
        cfg.train.stage2.epochs = 2;
        cfg.train.stage2.batch_size = 6;
        cfg
    }

    /// Uses `seed` for both data synthesis and training.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.synth.seed = seed;
        self.train.seed = seed;
        self
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|e| format_err(path, e))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("configs serialise");
        fs::write(path, text + "\n").map_err(io_err(path))
    }

    /// SHA-256 of the compact JSON encoding of the whole configuration.
    pub fn hash(&self) -> Hash {
        sha256_json(self)
    }

    /// SHA-256 of the model configuration alone: two runs whose parameters
    /// are interchangeable share this hash.
    pub fn arch_hash(&self) -> Hash {
        sha256_json(&self.model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_round_trip_preserves_hash() {
        let cfg = RunConfig::desk().with_seed(7);
        let text = serde_json::to_string(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn arch_hash_ignores_schedule_but_not_experts() {
        let a = RunConfig::desk();
        let mut b = a.clone();
        b.train.stage2.epochs += 1;
        assert_eq!(a.arch_hash(), b.arch_hash());
        assert_ne!(a.hash(), b.hash());
        b.model.arch.experts = 4;
        assert_ne!(a.arch_hash(), b.arch_hash());
    }

    #[test]
    fn presets_build_valid_models() {
        for cfg in [RunConfig::desk(), RunConfig::toy()] {
            sphroute_core::model::Model::build(&cfg.model, 0).unwrap();
            cfg.model.check_input(cfg.train.patch_size, cfg.train.patch_size).unwrap();
            cfg.model.check_input(cfg.synth.image_size, cfg.synth.image_size).unwrap();
        }
    }
}
