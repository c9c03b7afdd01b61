use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::arch::{checkpoint, SCNetModel};
use crate::data::mix64;
use crate::data::{BatchIter, Dataset, SamplerConfig, SamplingMode};
use crate::density::GaussianKernelSpec;
use crate::error::{Error, Result};
use crate::tensor::Tape;

use super::eval::{evaluate, EvalResult};
use super::loss::pixel_loss;
use super::optim::{Optimizer, OptimizerKind};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    /// Multiplier applied to target densities in the loss.
    pub loss_scale: f64,
    /// Held-out evaluation period in iterations; 0 disables it.
    pub eval_every: usize,
    /// Drives sampling; overrides `sampler.seed`.
    pub seed: u64,
    pub checkpoint_path: Option<PathBuf>,
    /// Hand back the parameters of the lowest held-out MAE evaluation
    /// instead of the last iterate. The final checkpoint is still the last
    /// iterate.
    pub keep_best: bool,
    pub sampler: SamplerConfig,
    pub mode: SamplingMode,
    pub kernel: GaussianKernelSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 2000,
            batch_size: 4,
            learning_rate: 1e-4,
            optimizer: OptimizerKind::default(),
            loss_scale: 100.0,
            eval_every: 200,
            seed: 0,
            checkpoint_path: None,
            keep_best: false,
            sampler: SamplerConfig::default(),
            mode: SamplingMode::Online,
            kernel: GaussianKernelSpec::default(),
        }
    }
}

impl TrainConfig {
    /// A zero learning rate is accepted and leaves parameters unchanged.
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be finite and >= 0, got {}",
                self.learning_rate
            )));
        }
        if !(self.loss_scale > 0.0 && self.loss_scale.is_finite()) {
            return Err(Error::Config(format!(
                "loss scale must be > 0, got {}",
                self.loss_scale
            )));
        }
        if self.mode == SamplingMode::Online {
            self.sampler.validate()?;
        }
        self.kernel.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LogRow {
    pub iteration: usize,
    pub loss: f64,
    pub eval: Option<(f64, f64)>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub log: Vec<LogRow>,
    /// Lowest held-out MAE seen and the iteration it occurred at.
    pub best: Option<(usize, f64)>,
    pub train_indices: Vec<usize>,
    pub heldout_indices: Vec<usize>,
}

impl TrainReport {
    pub fn losses(&self) -> Vec<f64> {
        self.log.iter().map(|r| r.loss).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("iteration,loss,eval_mae,eval_mse\n");
        for r in &self.log {
            match r.eval {
                Some((mae, mse)) => writeln!(s, "{},{},{},{}", r.iteration, r.loss, mae, mse),
                None => writeln!(s, "{},{},,", r.iteration, r.loss),
            }
            .expect("writing to a String");
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Deterministic 90/10 split by hashed entry index: `(train, held_out)`.
/// Datasets too small to spare a held-out image train on everything.
pub fn split_indices(len: usize) -> (Vec<usize>, Vec<usize>) {
    let (held, train): (Vec<usize>, Vec<usize>) =
        (0..len).partition(|&i| mix64(i as u64 ^ 0x5EED) % 10 == 0);
    if train.is_empty() || held.is_empty() {
        ((0..len).collect(), Vec::new())
    } else {
        (train, held)
    }
}

/// `model.scnk` becomes `model.best.scnk`.
pub fn best_checkpoint_path(path: &Path) -> PathBuf {
    let stem = path.file_stem().unwrap_or_default().to_string_lossy();
    match path.extension() {
        Some(ext) => path.with_file_name(format!("{stem}.best.{}", ext.to_string_lossy())),
        None => path.with_file_name(format!("{stem}.best")),
    }
}

/// Runs `cfg.iterations` optimizer steps on batches drawn from the
/// training split, evaluating on the held-out split every `eval_every`
/// iterations and at the end.
pub fn train(
    model: &mut SCNetModel<f32>,
    dataset: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let (train_idx, held_idx) = split_indices(dataset.len());
    let held_out = dataset.subset("held-out", &held_idx);
    let sampler = SamplerConfig {
        seed: cfg.seed,
        ..cfg.sampler.clone()
    };
    let mut batches = BatchIter::new(
        dataset,
        train_idx.clone(),
        sampler,
        cfg.mode,
        cfg.batch_size,
        cfg.kernel,
    )?;
    let mut optimizer = Optimizer::new(cfg.optimizer, model.params());
    let mut report = TrainReport {
        train_indices: train_idx,
        heldout_indices: held_idx,
        ..Default::default()
    };

    let mut best_params = None;
    for iteration in 1..=cfg.iterations {
        let batch = batches.next().expect("batch stream is infinite")?;
        let mut tape = Tape::new();
        let x = tape.constant(batch.input);
        let bound = model.params().bind(&mut tape, true);
        let trace = model.forward(&mut tape, x, &bound)?;
        let loss = pixel_loss(&mut tape, trace.output, &batch.target, cfg.loss_scale)?;
        let value = tape.value(loss).data()[0] as f64;
        if !value.is_finite() {
            return Err(Error::Numeric(format!(
                "loss became {value} at iteration {iteration} (learning rate {})",
                cfg.learning_rate
            )));
        }
        tape.backward(loss)?;
        let grads: Vec<_> = bound.iter().map(|&v| tape.take_grad(v)).collect();
        drop(tape);
        optimizer.step(model.params_mut(), &grads, cfg.learning_rate)?;

        let due = cfg.eval_every > 0 && (iteration % cfg.eval_every == 0 || iteration == cfg.iterations);
        let eval = if due && !held_out.is_empty() {
            let r: EvalResult = evaluate(&*model, &held_out, cfg.loss_scale)?;
            log::info!(
                "iteration {iteration}: loss {value:.6}, held-out MAE {:.3}, MSE {:.3}",
                r.mae,
                r.mse
            );
            if report.best.map_or(true, |(_, mae)| r.mae < mae) {
                report.best = Some((iteration, r.mae));
                if let Some(path) = &cfg.checkpoint_path {
                    checkpoint::save(model, &best_checkpoint_path(path))?;
                }
                if cfg.keep_best {
                    best_params = Some(model.params().clone());
                }
            }
            Some((r.mae, r.mse))
        } else {
            log::debug!("iteration {iteration}: loss {value:.6}");
            None
        };
        report.log.push(LogRow {
            iteration,
            loss: value,
            eval,
        });
    }
    if let Some(path) = &cfg.checkpoint_path {
        checkpoint::save(model, path)?;
    }
    if let Some(best) = best_params {
        *model.params_mut() = best;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_is_deterministic_and_about_a_tenth() {
        let (train, held) = split_indices(1000);
        assert_eq!(train.len() + held.len(), 1000);
        assert!((60..140).contains(&held.len()), "{}", held.len());
        assert_eq!(split_indices(1000), (train, held));
    }

    #[test]
    fn tiny_split_keeps_everything_for_training() {
        assert_eq!(split_indices(1), (vec![0], vec![]));
    }

    #[test]
    fn best_path_naming() {
        assert_eq!(
            best_checkpoint_path(Path::new("out/m.scnk")),
            PathBuf::from("out/m.best.scnk")
        );
        assert_eq!(best_checkpoint_path(Path::new("m")), PathBuf::from("m.best"));
    }

    #[test]
    fn csv_layout() {
        let r = TrainReport {
            log: vec![
                LogRow {
                    iteration: 1,
                    loss: 0.5,
                    eval: None,
                },
                LogRow {
                    iteration: 2,
                    loss: 0.25,
                    eval: Some((1.0, 2.0)),
                },
            ],
            ..Default::default()
        };
        assert_eq!(r.to_csv(), "iteration,loss,eval_mae,eval_mse\n1,0.5,,\n2,0.25,1,2\n");
    }

    #[test]
    fn invalid_configs() {
        let bad = |f: fn(&mut TrainConfig)| {
            let mut c = TrainConfig::default();
            f(&mut c);
            c.validate().is_err()
        };
        assert!(bad(|c| c.iterations = 0));
        assert!(bad(|c| c.learning_rate = -1.0));
        assert!(bad(|c| c.loss_scale = 0.0));
        assert!(bad(|c| c.batch_size = 0));
        assert!(!bad(|c| c.learning_rate = 0.0));
    }
}
