//! Plain-text `key = value` run configuration.
//!
//! Every hyperparameter of the cohort generator, preprocessing, network,
//! training loop and both GBM layers is reachable by a dotted key. Lines
//! starting with `#` are comments. `preset = desk|full` selects the
//! preprocessing and backbone sizes and is applied before any other key.

use std::path::Path;

use pfoa_core::attention::{BackboneConfig, GlobalFeatureMode, TrainConfig};
use pfoa_core::cv::{stacker_config, Fusion};
use pfoa_core::gbm::{GbmConfig, Growth};
use pfoa_core::roi::PreprocessConfig;
use pfoa_core::synth::SynthConfig;
use serde::Serialize;

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Desk,
    Full,
}

#[derive(Debug, Clone, Serialize)]
pub struct CvConfig {
    pub folds: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct StackConfig {
    pub fusion: Fusion,
    pub gbm: GbmConfig,
}

/// Fully resolved configuration, snapshotted into every manifest.
#[derive(Debug, Clone, Serialize)]
pub struct RunConfig {
    pub preset: Preset,
    pub synth: SynthConfig,
    pub preprocess: PreprocessConfig,
    pub backbone: BackboneConfig,
    pub train: TrainConfig,
    pub gbm: GbmConfig,
    pub stack: StackConfig,
    pub cv: CvConfig,
}

impl RunConfig {
    pub fn with_preset(preset: Preset) -> Self {
        let (preprocess, backbone, train) = match preset {
            Preset::Desk => (
                PreprocessConfig::desk(),
                BackboneConfig::desk(),
                TrainConfig {
                    epochs: 20,
                    lr0: 0.01,
                    ..TrainConfig::default()
                },
            ),
            Preset::Full => (PreprocessConfig::default(), BackboneConfig::full(), TrainConfig::default()),
        };
        Self {
            preset,
            synth: SynthConfig::default(),
            preprocess,
            backbone,
            train,
            gbm: GbmConfig::default(),
            stack: StackConfig {
                fusion: Fusion::Gbm,
                gbm: stacker_config(0),
            },
            cv: CvConfig { folds: 5, seed: 0 },
        }
    }

    /// Defaults (desk preset) overridden by the file at `path`, if any.
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::with_preset(Preset::Desk));
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Usage(m) => CliError::Usage(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut entries = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("line {}: expected `key = value`", n + 1)))?;
            entries.push((n + 1, k.trim().to_string(), v.trim().to_string()));
        }
        let preset = match entries.iter().rev().find(|(_, k, _)| k == "preset") {
            Some((line, _, v)) => match v.as_str() {
                "desk" => Preset::Desk,
                "full" => Preset::Full,
                _ => return Err(CliError::Usage(format!("line {line}: preset must be desk or full, got `{v}`"))),
            },
            None => Preset::Desk,
        };
        let mut cfg = Self::with_preset(preset);
        for (line, k, v) in &entries {
            if k != "preset" {
                cfg.set(k, v).map_err(|m| CliError::Usage(format!("line {line}: {m}")))?;
            }
        }
        Ok(cfg)
    }

    /// Apply one key. Errors name the key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let (section, field) = key.split_once('.').ok_or_else(|| format!("unknown key `{key}`"))?;
        let unknown = || format!("unknown key `{key}`");
        match section {
            "synth" => {
                let s = &mut self.synth;
                match field {
                    "n_subjects" => s.n_subjects = num(key, value)?,
                    "knees_per_subject" => s.knees_per_subject = num(key, value)?,
                    "target_prevalence" => s.target_prevalence = num(key, value)?,
                    "image_size" => s.image_size = num(key, value)?,
                    "effect_age" => s.effect_strengths.age = num(key, value)?,
                    "effect_sex" => s.effect_strengths.sex = num(key, value)?,
                    "effect_bmi" => s.effect_strengths.bmi = num(key, value)?,
                    "effect_womac" => s.effect_strengths.womac = num(key, value)?,
                    "effect_kl" => s.effect_strengths.kl = num(key, value)?,
                    "lesion_contrast" => s.lesion_contrast = num(key, value)?,
                    "noise_sigma" => s.noise_sigma = num(key, value)?,
                    "max_rotation_deg" => s.max_rotation_deg = num(key, value)?,
                    "n_landmarks" => s.n_landmarks = num(key, value)?,
                    "landmark_jitter" => s.landmark_jitter = num(key, value)?,
                    "seed" => s.seed = num(key, value)?,
                    _ => return Err(unknown()),
                }
            }
            "preprocess" => {
                let p = &mut self.preprocess;
                match field {
                    "margin_px" => p.margin_px = num(key, value)?,
                    "p_low" => p.p_low = num(key, value)?,
                    "p_high" => p.p_high = num(key, value)?,
                    "resize_to" => p.resize_to = num(key, value)?,
                    "crop_to" => p.crop_to = num(key, value)?,
                    _ => return Err(unknown()),
                }
            }
            "backbone" => {
                let b = &mut self.backbone;
                match field {
                    "block_channels" => b.block_channels = list(key, value)?,
                    "convs_per_block" => b.convs_per_block = list(key, value)?,
                    "input_size" => b.input_size = num(key, value)?,
                    "attention_taps" => b.attention_taps = list(key, value)?,
                    "attention_hidden" => {
                        b.attention_hidden = if value == "auto" { None } else { Some(num(key, value)?) }
                    }
                    "classifier_width" => b.classifier_width = num(key, value)?,
                    "global_feature" => {
                        b.global_feature = match value {
                            "pooled" => GlobalFeatureMode::Pooled,
                            "spatial" => GlobalFeatureMode::Spatial,
                            _ => return Err(format!("`{key}` must be pooled or spatial, got `{value}`")),
                        }
                    }
                    _ => return Err(unknown()),
                }
            }
            "train" => {
                let t = &mut self.train;
                match field {
                    "batch_size" => t.batch_size = num(key, value)?,
                    "epochs" => t.epochs = num(key, value)?,
                    "lr0" => t.lr0 = num(key, value)?,
                    "lr_decay_every" => t.lr_decay_every = num(key, value)?,
                    "lr_decay_factor" => t.lr_decay_factor = num(key, value)?,
                    "momentum" => t.momentum = num(key, value)?,
                    "weight_decay" => t.weight_decay = num(key, value)?,
                    "gamma" => t.gamma = num(key, value)?,
                    "alpha" => t.alpha = if value == "none" { None } else { Some(num(key, value)?) },
                    "augment" => t.augment = num(key, value)?,
                    "seed" => t.seed = num(key, value)?,
                    _ => return Err(unknown()),
                }
            }
            "gbm" => set_gbm(&mut self.gbm, key, field, value)?,
            "stack" => match field {
                "fusion" => {
                    self.stack.fusion = match value {
                        "gbm" => Fusion::Gbm,
                        "mean" => Fusion::Mean,
                        _ => return Err(format!("`{key}` must be gbm or mean, got `{value}`")),
                    }
                }
                _ => set_gbm(&mut self.stack.gbm, key, field, value)?,
            },
            "cv" => match field {
                "folds" => self.cv.folds = num(key, value)?,
                "seed" => self.cv.seed = num(key, value)?,
                _ => return Err(unknown()),
            },
            _ => return Err(unknown()),
        }
        Ok(())
    }
}

fn set_gbm(g: &mut GbmConfig, key: &str, field: &str, value: &str) -> Result<(), String> {
    match field {
        "n_trees" => g.n_trees = num(key, value)?,
        "learning_rate" => g.learning_rate = num(key, value)?,
        "max_leaves" => g.max_leaves = num(key, value)?,
        "min_samples_leaf" => g.min_samples_leaf = num(key, value)?,
        "n_bins" => g.n_bins = num(key, value)?,
        "lambda_l2" => g.lambda_l2 = num(key, value)?,
        "subsample" => g.subsample = num(key, value)?,
        "growth" => {
            g.growth = match value {
                "leaf_wise" => Growth::LeafWise,
                "depth_wise" => Growth::DepthWise,
                _ => return Err(format!("`{key}` must be leaf_wise or depth_wise, got `{value}`")),
            }
        }
        "seed" => g.seed = num(key, value)?,
        _ => return Err(format!("unknown key `{key}`")),
    }
    Ok(())
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, String> {
    value
        .parse()
        .map_err(|_| format!("`{key}` cannot take the value `{value}`"))
}

fn list(key: &str, value: &str) -> Result<Vec<usize>, String> {
    value.split(',').map(|v| num(key, v.trim())).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keys_override_defaults() {
        let c = RunConfig::parse(
            "# comment\nsynth.n_subjects = 40\ntrain.alpha = 0.25\nbackbone.block_channels = 8, 16, 16\n\
             gbm.growth = depth_wise\nstack.max_leaves = 3\nstack.fusion = mean\n",
        )
        .unwrap();
        assert_eq!(c.synth.n_subjects, 40);
        assert_eq!(c.train.alpha, Some(0.25));
        assert_eq!(c.backbone.block_channels, vec![8, 16, 16]);
        assert_eq!(c.gbm.growth, Growth::DepthWise);
        assert_eq!(c.stack.gbm.max_leaves, 3);
        assert_eq!(c.stack.fusion, Fusion::Mean);
    }

    #[test]
    fn preset_applies_first() {
        let c = RunConfig::parse("preprocess.crop_to = 200\npreset = full\n").unwrap();
        assert_eq!(c.preset, Preset::Full);
        assert_eq!(c.preprocess.crop_to, 200);
        assert_eq!(c.preprocess.resize_to, 256);
        assert_eq!(c.backbone.block_channels, BackboneConfig::full().block_channels);
    }

    #[test]
    fn unknown_or_malformed_entries_are_usage_errors() {
        for text in ["synth.bogus = 1", "nope = 1", "synth.n_subjects = x", "just words", "preset = big"] {
            assert!(matches!(RunConfig::parse(text), Err(CliError::Usage(_))), "{text}");
        }
        let Err(CliError::Usage(m)) = RunConfig::parse("\n\ngbm.max_depth = 3") else {
            panic!()
        };
        assert!(m.contains("line 3") && m.contains("gbm.max_depth"), "{m}");
    }
}
