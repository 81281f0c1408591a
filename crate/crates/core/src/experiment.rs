//! The fixed small-subset training protocol: every preset trained from a few
//! seeds on a per-class CIFAR-10 subset, plus the locally learned NMF
//! baseline (frozen classic-NMF bases, only the remaining layers trained).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{load_cifar10_subset, Dataset};
use crate::network::{build, NetworkConfig, Preset};
use crate::train::{evaluate, fit, pretrain_nmf_local, LocalNmfConfig, TrainConfig, TrainingReport};

#[derive(Clone, Debug, PartialEq)]
pub struct Protocol {
    pub per_class: usize,
    pub epochs: usize,
    pub seeds: Vec<u64>,
    pub width: usize,
    pub groups: usize,
    /// Overrides the preset iteration count of NMF layers.
    pub nmf_iters: Option<usize>,
    pub train: TrainConfig,
    pub local: LocalNmfConfig,
}

impl Default for Protocol {
    fn default() -> Self {
        Protocol {
            per_class: 500,
            epochs: 30,
            seeds: vec![0, 1, 2],
            width: 1,
            groups: 1,
            nmf_iters: None,
            train: TrainConfig::default(),
            local: LocalNmfConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    Backprop(Preset),
    /// `cnmf_mix` with frozen locally learned NMF layers.
    Local,
}

impl std::fmt::Display for Arm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Arm::Backprop(p) => write!(f, "{p}"),
            Arm::Local => f.write_str("cnmf_mix_local"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunOutcome {
    pub arm: Arm,
    pub seed: u64,
    pub test_accuracy: f64,
    pub report: TrainingReport,
}

impl RunOutcome {
    pub fn train_losses(&self) -> Vec<f64> {
        self.report.epochs.iter().map(|e| e.train_loss).collect()
    }
}

impl Protocol {
    fn network(&self, preset: Preset) -> NetworkConfig {
        let mut cfg = NetworkConfig::preset(preset, self.width, self.groups);
        if let Some(n) = self.nmf_iters {
            cfg.set_nmf_iters(n);
        }
        cfg
    }

    fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            max_epochs: self.epochs,
            seed,
            ..self.train.clone()
        }
    }

    /// Trains one arm from one seed. `train` is split into train/validation
    /// with the seed; accuracy is measured on `test`.
    pub fn run(&self, arm: Arm, seed: u64, train: &Dataset, test: &Dataset) -> Result<RunOutcome> {
        let cfg = self.train_config(seed);
        let (tr, val) = train.stratified_split(cfg.val_fraction, seed)?;
        let preset = match arm {
            Arm::Backprop(p) => p,
            Arm::Local => Preset::CnmfMix,
        };
        let mut model = build::<f64>(&self.network(preset), seed)?;
        if arm == Arm::Local {
            let local = LocalNmfConfig {
                seed,
                ..self.local.clone()
            };
            pretrain_nmf_local(&mut model, &tr, &local)?;
        }
        let report = fit(&mut model, &tr, &val, &cfg, |_| {})?;
        let ev = evaluate(&model, test, &cfg.loss(), cfg.eval_batch_size)?;
        Ok(RunOutcome {
            arm,
            seed,
            test_accuracy: ev.accuracy,
            report,
        })
    }

    /// Runs every arm for every seed on the subset read from `dir`.
    pub fn run_all(
        &self,
        dir: &Path,
        arms: &[Arm],
        mut on_run: impl FnMut(&RunOutcome),
    ) -> Result<Vec<RunOutcome>> {
        if arms.is_empty() || self.seeds.is_empty() {
            return Err(Error::invalid("protocol needs at least one arm and one seed"));
        }
        let (train, test) = load_cifar10_subset(dir, self.per_class)?;
        let mut out = Vec::new();
        for &arm in arms {
            for &seed in &self.seeds {
                let r = self.run(arm, seed, &train, &test)?;
                on_run(&r);
                out.push(r);
            }
        }
        Ok(out)
    }
}

pub fn mean_accuracy(runs: &[RunOutcome], arm: Arm) -> Option<f64> {
    let accs: Vec<f64> = runs.iter().filter(|r| r.arm == arm).map(|r| r.test_accuracy).collect();
    (!accs.is_empty()).then(|| accs.iter().sum::<f64>() / accs.len() as f64)
}

/// Strictly decreasing over the first `k` values (fewer values fail).
pub fn decreasing_prefix(losses: &[f64], k: usize) -> bool {
    losses.len() >= k && losses[..k].windows(2).all(|w| w[1] < w[0])
}
