//! Run configuration files (TOML).
//!
//! ```toml
//! [model]
//! preset = "cnmf_mix"        # cnn | cnmf | cnn_mix | cnmf_mix
//! width = 1                  # channel multiplier for blocks 1-3
//! groups = 1
//! nmf_iters = 75
//! nmf_epsilon = 1.0
//! linearization = "final_state"   # or "last_step"
//! grad_mode = "direct"            # or "chain"
//! nmf_backward = "approx"         # or "unrolled"
//! # [[model.blocks]] tables replace the preset topology entirely
//!
//! [train]
//! lr0 = 1e-3
//! batch_size = 64
//! [train.augment]
//! hflip = true
//! ```
//!
//! Every key is optional; unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backprop::GradMode;
use crate::error::{Error, Result};
use crate::layer::Linearization;
use crate::network::{BlockConfig, NetworkConfig, NmfBackward, Preset};
use crate::train::TrainConfig;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct ModelSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    preset: Option<Preset>,
    width: usize,
    groups: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    nmf_iters: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    nmf_epsilon: Option<f64>,
    linearization: Linearization,
    grad_mode: GradMode,
    nmf_backward: NmfBackward,
    input_shape: (usize, usize, usize),
    class_count: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    blocks: Option<Vec<BlockConfig>>,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            preset: None,
            width: 1,
            groups: 1,
            nmf_iters: None,
            nmf_epsilon: None,
            linearization: Linearization::default(),
            grad_mode: GradMode::default(),
            nmf_backward: NmfBackward::default(),
            input_shape: (3, 28, 28),
            class_count: 10,
            blocks: None,
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct FileConfig {
    model: ModelSection,
    train: TrainConfig,
}

/// Architecture plus training settings.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub network: NetworkConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        parse_config("").expect("defaults are valid")
    }
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

pub fn parse_config(text: &str) -> Result<RunConfig> {
    let file: FileConfig = toml::from_str(text).map_err(|e| Error::Parse {
        line: e.span().map_or(1, |s| line_of(text, s.start)),
        msg: e.message().to_string(),
    })?;
    let m = file.model;
    let blocks = match (m.preset, m.blocks) {
        (Some(_), Some(_)) => {
            return Err(Error::invalid("`model.preset` and `model.blocks` are mutually exclusive"))
        }
        (_, Some(blocks)) => blocks,
        (preset, None) => {
            NetworkConfig::preset(preset.unwrap_or(Preset::CnmfMix), m.width, m.groups).blocks
        }
    };
    let mut network = NetworkConfig {
        blocks,
        width_multiplier: m.width,
        input_shape: m.input_shape,
        class_count: m.class_count,
        linearization: m.linearization,
        grad_mode: m.grad_mode,
        nmf_backward: m.nmf_backward,
    };
    for b in &mut network.blocks {
        if let Some(n) = m.nmf_iters {
            b.nmf_iters = n;
        }
        if let Some(e) = m.nmf_epsilon {
            b.nmf_epsilon = e;
        }
    }
    network.specs()?;
    file.train.validate()?;
    Ok(RunConfig {
        network,
        train: file.train,
    })
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Data {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    parse_config(&text)
}

impl RunConfig {
    /// Text that parses back to the same configuration, with the topology
    /// spelled out as explicit blocks.
    pub fn to_toml(&self) -> Result<String> {
        let n = &self.network;
        let file = FileConfig {
            model: ModelSection {
                preset: None,
                width: n.width_multiplier,
                groups: 1,
                nmf_iters: None,
                nmf_epsilon: None,
                linearization: n.linearization,
                grad_mode: n.grad_mode,
                nmf_backward: n.nmf_backward,
                input_shape: n.input_shape,
                class_count: n.class_count,
                blocks: Some(n.blocks.clone()),
            },
            train: self.train.clone(),
        };
        toml::to_string(&file).map_err(|e| Error::invalid(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::BlockKind;

    #[test]
    fn empty_file_gives_defaults() {
        let c = parse_config("").unwrap();
        assert_eq!(c.network, NetworkConfig::preset(Preset::CnmfMix, 1, 1));
        assert_eq!(c.train, TrainConfig::default());
    }

    #[test]
    fn cnn_preset_topology() {
        let c = parse_config("[model]\npreset = \"cnn\"\n").unwrap();
        assert!(c.network.blocks.iter().all(|b| b.kind == BlockKind::Cnn && !b.mix_1x1));
        assert_eq!(c.network.blocks.len(), 4);
    }

    #[test]
    fn overrides_apply() {
        let text = "[model]\npreset = \"cnmf\"\nwidth = 2\ngroups = 4\nnmf_iters = 10\n\n[train]\nlr0 = 0.01\nbatch_size = 8\n[train.augment]\nhflip = false\n";
        let c = parse_config(text).unwrap();
        assert_eq!(c.network.width_multiplier, 2);
        assert_eq!(c.network.blocks[1].groups_main, 4);
        assert!(c.network.blocks.iter().all(|b| b.nmf_iters == 10));
        assert_eq!(c.train.lr0, 0.01);
        assert!(!c.train.augment.hflip);
        assert_eq!(c.train.augment.brightness, 0.1);
    }

    #[test]
    fn unknown_key_reports_its_line() {
        let err = parse_config("[model]\nwidth = 1\nwidht = 2\n").unwrap_err();
        match err {
            Error::Parse { line, msg } => {
                assert_eq!(line, 3, "{msg}");
                assert!(msg.contains("widht"));
            }
            other => panic!("unexpected {other}"),
        }
        assert!(matches!(parse_config("[train]\nlr0 = \"x\"\n"), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn semantic_errors() {
        assert!(parse_config("[model]\npreset = \"vgg\"\n").is_err());
        assert!(parse_config("[model]\ngroups = 3\n").is_err());
        assert!(parse_config("[train]\nlr_factor = 1.5\n").is_err());
    }

    #[test]
    fn round_trip_is_idempotent() {
        let text = "[model]\npreset = \"cnn_mix\"\nwidth = 2\ngroups = 2\ngrad_mode = \"chain\"\n[train]\nseed = 9\n";
        let c = parse_config(text).unwrap();
        let again = parse_config(&c.to_toml().unwrap()).unwrap();
        assert_eq!(c, again);
        assert_eq!(again.to_toml().unwrap(), c.to_toml().unwrap());
    }
}
