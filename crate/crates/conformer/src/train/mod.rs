//! Optimization loop, schedule, and evaluation.

mod adam;
mod metrics;

pub use adam::{adam_step, clip_global_norm, AdamState};
pub use metrics::{append_metrics_csv, MetricsRecord, Split};

use crate::data::{make_batches, TokenStream};
use crate::error::{Error, Result};
use crate::model::{
    argmax_lowest_tie, conformer_forward, save_checkpoint, ModelConfig, ModelParams,
};
use std::path::Path;
use std::time::Instant;
use tensorcore::{mix_seed, Graph, Mode, TensorError};

/// Piecewise-constant learning-rate phase: `lr` applies from `start_epoch`
/// until the next phase begins.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrPhase {
    pub start_epoch: usize,
    pub lr: f64,
}

/// Default schedule: 3e-4 for epochs 0-9, 1e-4 for 10-19, then 1e-5 held
/// through the final epoch.
pub fn default_lr_phases() -> Vec<LrPhase> {
    vec![
        LrPhase { start_epoch: 0, lr: 3e-4 },
        LrPhase { start_epoch: 10, lr: 1e-4 },
        LrPhase { start_epoch: 20, lr: 1e-5 },
    ]
}

/// Learning rate for `epoch` under sorted `phases`.
pub fn lr_schedule(phases: &[LrPhase], epoch: usize) -> f64 {
    let mut lr = phases.first().map(|p| p.lr).unwrap_or(0.0);
    for p in phases {
        if p.start_epoch <= epoch {
            lr = p.lr;
        }
    }
    lr
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr_phases: Vec<LrPhase>,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub grad_clip: Option<f64>,
    pub seed: u64,
    /// When set, wall-time fields are recorded as 0.0 so that metrics
    /// files from identically seeded runs are byte-identical. Numerics are
    /// deterministic either way.
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            epochs: 30,
            lr_phases: default_lr_phases(),
            batch_size: 32,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: None,
            seed: 0,
            deterministic: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.lr_phases.is_empty() || self.lr_phases[0].start_epoch != 0 {
            return Err(Error::Config(
                "lr_phases must be nonempty with the first phase at epoch 0".into(),
            ));
        }
        for w in self.lr_phases.windows(2) {
            if w[1].start_epoch <= w[0].start_epoch {
                return Err(Error::Config("lr_phases must be sorted by start_epoch".into()));
            }
        }
        if self.lr_phases.iter().any(|p| p.lr <= 0.0) {
            return Err(Error::Config("all learning rates must be positive".into()));
        }
        if let Some(c) = self.grad_clip {
            if c <= 0.0 {
                return Err(Error::Config("grad_clip must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Mean NLL (nats) and top-1 next-token accuracy over non-overlapping
/// full-context windows of `stream`, in eval mode.
///
/// Ties in the argmax go to the lowest token id. Accumulation runs in
/// window order in f64, so results do not depend on batch grouping.
/// The returned record has `split=Test`, `epoch=0`, `lr=0`,
/// `wall_seconds=0`; callers overwrite those fields as appropriate.
pub fn evaluate(
    params: &ModelParams<f32>,
    config: &ModelConfig,
    stream: &TokenStream,
) -> Result<MetricsRecord> {
    let batches = make_batches(stream, config.context, 32, config.context, false, 0)?;
    let mut nll_sum = 0.0f64;
    let mut correct = 0usize;
    let mut positions = 0usize;
    let v = config.vocab;
    for batch in batches {
        let mut g: Graph<f32> = Graph::new();
        let out = conformer_forward(&mut g, params, config, &batch.inputs, Mode::Eval, false, 0)?;
        let logits = g.value(out.logits);
        let data = logits.data();
        let rows = batch.inputs.rows() * batch.inputs.cols();
        for p in 0..rows {
            let row = &data[p * v..(p + 1) * v];
            let target = batch.targets.data()[p] as usize;
            // log-sum-exp in f64 for a stable mean.
            let m = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
            let sum: f64 = row.iter().map(|&x| (x as f64 - m).exp()).sum();
            nll_sum += m + sum.ln() - row[target] as f64;
            if argmax_lowest_tie(row) == target {
                correct += 1;
            }
            positions += 1;
        }
    }
    if positions == 0 {
        return Err(Error::Data("evaluation stream has no full window".into()));
    }
    Ok(MetricsRecord::new(
        0,
        Split::Test,
        nll_sum / positions as f64,
        correct as f64 / positions as f64,
        0.0,
        0.0,
    ))
}

/// Input streams for [`train`]. Validation is optional; when present, the
/// model is evaluated on it after every epoch and the best-validation
/// parameters are checkpointed.
#[derive(Debug, Clone)]
pub struct Streams {
    pub train: TokenStream,
    pub val: Option<TokenStream>,
}

pub struct TrainOutput {
    pub params: ModelParams<f32>,
    pub history: Vec<MetricsRecord>,
    pub best_val_nll: Option<f64>,
}

/// Run the full optimization loop: per epoch, iterate shuffled batches
/// (forward, cross-entropy, backward, optional global-norm clip, Adam with
/// the scheduled learning rate), evaluate on validation, and append one
/// metrics record per split. Checkpoints `best.cflm` (lowest validation
/// NLL) and `final.cflm` into `out_dir` when given.
pub fn train(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    streams: &Streams,
    out_dir: Option<&Path>,
) -> Result<TrainOutput> {
    model_cfg.validate()?;
    train_cfg.validate()?;
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
    }
    let metrics_path = out_dir.map(|d| d.join("metrics.csv"));

    let mut params: ModelParams<f32> = ModelParams::init(model_cfg)?;
    let tensors = params.named_tensors();
    let mut adam = AdamState::new(&tensors.iter().map(|(_, t)| *t).collect::<Vec<_>>());
    drop(tensors);

    let mut history: Vec<MetricsRecord> = Vec::new();
    let mut best_val_nll: Option<f64> = None;
    let mut step: usize = 0;

    for epoch in 0..train_cfg.epochs {
        let lr = lr_schedule(&train_cfg.lr_phases, epoch);
        let epoch_start = Instant::now();
        let mut nll_sum = 0.0f64;
        let mut correct = 0usize;
        let mut positions = 0usize;

        let batches = make_batches(
            &streams.train,
            model_cfg.context,
            train_cfg.batch_size,
            model_cfg.context,
            true,
            mix_seed(train_cfg.seed, 0x1000 + epoch as u64),
        )?;
        for batch in batches {
            let step_seed = mix_seed(train_cfg.seed, 0x2000_0000 + step as u64);
            let mut g: Graph<f32> = Graph::new();
            let fwd = conformer_forward(
                &mut g,
                &params,
                model_cfg,
                &batch.inputs,
                Mode::Train,
                true,
                step_seed,
            )
            .map_err(|e| at_step(step, e))?;
            let loss = g
                .cross_entropy_nll(fwd.logits, &batch.targets)
                .map_err(|e| at_step(step, Error::Tensor(e)))?;
            let loss_val = g.value(loss).item() as f64;
            if !loss_val.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step,
                    detail: format!("loss = {}", loss_val),
                });
            }

            let batch_positions = batch.inputs.rows() * batch.inputs.cols();
            nll_sum += loss_val * batch_positions as f64;
            positions += batch_positions;
            let v = model_cfg.vocab;
            let logits = g.value(fwd.logits).data();
            for p in 0..batch_positions {
                if argmax_lowest_tie(&logits[p * v..(p + 1) * v]) == batch.targets.data()[p] as usize {
                    correct += 1;
                }
            }

            g.backward(loss).map_err(|e| at_step(step, Error::Tensor(e)))?;
            let mut grads: Vec<Option<Vec<f32>>> = fwd
                .bound
                .ordered
                .iter()
                .map(|&id| g.grad_data(id).map(|s| s.to_vec()))
                .collect();
            drop(g);
            if let Some(max_norm) = train_cfg.grad_clip {
                clip_global_norm(&mut grads, max_norm);
            }
            adam.update(
                &mut params.tensors_mut(),
                &grads,
                lr,
                train_cfg.beta1,
                train_cfg.beta2,
                train_cfg.adam_eps,
            )?;
            step += 1;
        }

        let wall = if train_cfg.deterministic {
            0.0
        } else {
            epoch_start.elapsed().as_secs_f64()
        };
        let mut epoch_records = vec![MetricsRecord {
            epoch,
            split: Split::Train,
            nll_nats: nll_sum / positions.max(1) as f64,
            bits_per_token: nll_sum / positions.max(1) as f64 / std::f64::consts::LN_2,
            accuracy: correct as f64 / positions.max(1) as f64,
            lr,
            wall_seconds: wall,
        }];

        if let Some(val) = &streams.val {
            let eval_start = Instant::now();
            let mut record = evaluate(&params, model_cfg, val)?;
            record.epoch = epoch;
            record.split = Split::Val;
            record.lr = lr;
            record.wall_seconds = if train_cfg.deterministic {
                0.0
            } else {
                eval_start.elapsed().as_secs_f64()
            };
            let improved = best_val_nll.map_or(true, |best| record.nll_nats < best);
            if improved {
                best_val_nll = Some(record.nll_nats);
                if let Some(dir) = out_dir {
                    save_checkpoint(&dir.join("best.cflm"), model_cfg, &params, epoch + 1)?;
                }
            }
            epoch_records.push(record);
        }

        if let Some(path) = &metrics_path {
            append_metrics_csv(path, &epoch_records)?;
        }
        history.extend(epoch_records);
    }

    if let Some(dir) = out_dir {
        save_checkpoint(&dir.join("final.cflm"), model_cfg, &params, train_cfg.epochs)?;
    }
    Ok(TrainOutput {
        params,
        history,
        best_val_nll,
    })
}

fn at_step(step: usize, e: Error) -> Error {
    match e {
        Error::Tensor(TensorError::NonFinite { op }) => Error::NonFiniteLoss {
            step,
            detail: format!("non-finite value produced by {}", op),
        },
        other => other,
    }
}
