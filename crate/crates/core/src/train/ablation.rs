use std::fmt;

use serde::{Deserialize, Serialize};

use crate::arch::{ModelSpec, SCNetModel};
use crate::data::{Dataset, SamplingMode};
use crate::error::{Error, Result};

use super::eval::evaluate;
use super::trainer::{train, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Whole images, density maps prepared once.
    Baseline,
    /// Random crops rescaled to one fixed side.
    OnlineSampling,
    /// Random crops rescaled to a side drawn per iteration.
    OnlineMultiScale,
}

impl Variant {
    pub const ALL: [Variant; 3] = [
        Variant::Baseline,
        Variant::OnlineSampling,
        Variant::OnlineMultiScale,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Variant::Baseline => "SCNet",
            Variant::OnlineSampling => "SCNet+Online sampling",
            Variant::OnlineMultiScale => "SCNet+Online sampling+Multi-scale training",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationConfig {
    /// Budget, optimizer and seed shared by every variant.
    pub train: TrainConfig,
    /// Sample side of the single-scale online variant.
    pub single_scale: usize,
    /// Candidate sides of the multi-scale variant.
    pub scales: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub mae: f64,
    pub mse: f64,
}

pub struct AblationTable(pub Vec<AblationRow>);

impl fmt::Display for AblationTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self
            .0
            .iter()
            .map(|r| r.variant.label().len())
            .max()
            .unwrap_or(6)
            .max(6);
        writeln!(f, "{:<width$} | {:>8} | {:>8}", "Method", "MAE", "MSE")?;
        write!(f, "{}", "-".repeat(width + 22))?;
        for r in &self.0 {
            write!(f, "\n{:<width$} | {:>8.3} | {:>8.3}", r.variant.label(), r.mae, r.mse)?;
        }
        Ok(())
    }
}

/// Trains a fresh model from `spec` for each variant with identical seeds
/// and budgets and scores it on `test`.
pub fn ablation_run(
    spec: &ModelSpec,
    train_set: &Dataset,
    test: &Dataset,
    variants: &[Variant],
    cfg: &AblationConfig,
) -> Result<Vec<AblationRow>> {
    if variants.is_empty() {
        return Err(Error::Config("no ablation variants requested".into()));
    }
    variants
        .iter()
        .map(|&variant| {
            let mut tc = cfg.train.clone();
            tc.checkpoint_path = None;
            match variant {
                Variant::Baseline => tc.mode = SamplingMode::Offline,
                Variant::OnlineSampling => {
                    tc.mode = SamplingMode::Online;
                    tc.sampler.scales = vec![cfg.single_scale];
                }
                Variant::OnlineMultiScale => {
                    tc.mode = SamplingMode::Online;
                    tc.sampler.scales = cfg.scales.clone();
                }
            }
            let mut model = SCNetModel::<f32>::new(spec.clone())?;
            train(&mut model, train_set, &tc)?;
            let r = evaluate(&model, test, tc.loss_scale)?;
            log::info!("{}: MAE {:.3}, MSE {:.3}", variant.label(), r.mae, r.mse);
            Ok(AblationRow {
                variant,
                mae: r.mae,
                mse: r.mse,
            })
        })
        .collect()
}
