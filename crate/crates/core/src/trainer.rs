//! The optimization loop: two augmented views, online (and optionally EMA
//! twin) forward passes, the configured objective, backward, an SGD
//! momentum step, then the EMA update.
//!
//! Every random draw is derived from `(seed, epoch, batch)`, so a run
//! resumed from a checkpoint continues exactly where the uninterrupted run
//! would have been.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::checkpoint::Checkpoint;
use crate::data::{batch_iterator, for_each_batch, AugmentConfig, Unlabeled};
use crate::encoder::{init_params, mlp_architecture, EncoderState, LayerSpec, MomentumTwin};
use crate::error::{Error, Result};
use crate::eval::{collapse_metrics, EpochMonitor};
use crate::losses::{uniclr_loss, LossConfig};
use crate::matrix::DenseMatrix;

/// Column order of the metrics CSV.
pub const METRICS_HEADER: &str = "epoch,loss,ce_term,sym_term,lr,feat_std,eff_rank,knn_acc,secs";

/// Samples used for the per-epoch spread/rank diagnostics.
pub const DIAGNOSTIC_SAMPLES: usize = 512;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub loss: LossConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    pub ema_enabled: bool,
    pub ema_m: f64,
    pub seed: u64,
    /// k-NN cadence in epochs; 0 disables it. The last epoch is always
    /// evaluated when a monitor is present and this is nonzero.
    pub eval_every: usize,
    /// Scale the base rate by `batch_size / 256`.
    pub lr_batch_scaling: bool,
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
    /// Batch-standardize hidden layers before their ReLU.
    pub standardize_hidden: bool,
    pub augment: AugmentConfig,
    pub prefetch: bool,
    /// Record real per-epoch wall time; otherwise `secs` is written as 0
    /// so the metrics stream is byte-reproducible.
    pub record_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossConfig::default(),
            epochs: 30,
            batch_size: 64,
            base_lr: 0.05,
            momentum: 0.9,
            weight_decay: 1e-6,
            warmup_epochs: 0,
            ema_enabled: false,
            ema_m: 0.99,
            seed: 0,
            eval_every: 1,
            lr_batch_scaling: false,
            hidden: vec![64, 64, 64],
            embed_dim: 16,
            standardize_hidden: true,
            augment: AugmentConfig::default(),
            prefetch: false,
            record_wall_time: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        self.augment.validate()?;
        if self.batch_size < 2 {
            return Err(Error::Config(format!("batch_size must be >= 2, got {}", self.batch_size)));
        }
        if self.epochs > 0 && self.warmup_epochs >= self.epochs {
            return Err(Error::Config(format!(
                "warmup_epochs ({}) must be < epochs ({})",
                self.warmup_epochs, self.epochs
            )));
        }
        if self.epochs == 0 && self.warmup_epochs > 0 {
            return Err(Error::Config("warmup_epochs must be 0 when epochs is 0".into()));
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return Err(Error::Config(format!("base_lr must be finite and >= 0, got {}", self.base_lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!("weight_decay must be >= 0, got {}", self.weight_decay)));
        }
        if !(0.0..=1.0).contains(&self.ema_m) {
            return Err(Error::Config(format!("ema_m must be in [0, 1], got {}", self.ema_m)));
        }
        if self.embed_dim == 0 || self.hidden.contains(&0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        Ok(())
    }

    /// Encoder layer specs for `input_dim`-wide inputs.
    pub fn architecture(&self, input_dim: usize) -> Vec<LayerSpec> {
        let mut specs = mlp_architecture(input_dim, &self.hidden, self.embed_dim);
        if !self.standardize_hidden {
            for s in specs.iter_mut() {
                s.standardize = false;
            }
        }
        specs
    }

    pub fn effective_base_lr(&self) -> f64 {
        if self.lr_batch_scaling {
            self.base_lr * self.batch_size as f64 / 256.0
        } else {
            self.base_lr
        }
    }
}

/// Linear warmup from 0, then half-cosine decay to 0 at `total_steps`.
pub fn cosine_lr(step: usize, total_steps: usize, warmup_steps: usize, base_lr: f64) -> Result<f64> {
    if step > total_steps || warmup_steps >= total_steps.max(1) && warmup_steps > 0 {
        return Err(Error::Config(format!(
            "cosine_lr: need step <= total and warmup < total (step {step}, warmup {warmup_steps}, total {total_steps})"
        )));
    }
    if step < warmup_steps {
        return Ok(base_lr * step as f64 / warmup_steps as f64);
    }
    let span = (total_steps - warmup_steps) as f64;
    if span == 0.0 {
        return Ok(base_lr);
    }
    let progress = (step - warmup_steps) as f64 / span;
    Ok(base_lr * 0.5 * (1.0 + (PI * progress).cos()))
}

/// `v ← m·v + g + wd·p`, then `p ← p − lr·v`.
pub fn sgd_momentum_step(
    param: &mut DenseMatrix,
    grad: &DenseMatrix,
    velocity: &mut DenseMatrix,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if param.shape() != grad.shape() || param.shape() != velocity.shape() {
        return Err(Error::Contract(format!(
            "sgd step shapes differ: param {:?}, grad {:?}, velocity {:?}",
            param.shape(),
            grad.shape(),
            velocity.shape()
        )));
    }
    for ((p, g), v) in param
        .data_mut()
        .iter_mut()
        .zip(grad.data())
        .zip(velocity.data_mut().iter_mut())
    {
        *v = momentum * *v + g + weight_decay * *p;
        *p -= lr * *v;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub ce_term: f64,
    /// Mean unweighted symmetry term; 0 when the objective has none.
    pub sym_term: f64,
    pub lr: f64,
    pub feat_std: f64,
    pub eff_rank: f64,
    pub knn_acc: Option<f64>,
    pub secs: f64,
}

impl EpochRecord {
    pub fn csv_line(&self) -> String {
        let knn = self.knn_acc.map_or(String::new(), |a| a.to_string());
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.epoch, self.loss, self.ce_term, self.sym_term, self.lr, self.feat_std, self.eff_rank, knn, self.secs
        )
    }

    pub fn parse_csv_line(line: &str) -> std::result::Result<Self, String> {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 9 {
            return Err(format!("expected 9 fields, found {}", f.len()));
        }
        let num = |i: usize| f[i].trim().parse::<f64>().map_err(|_| format!("field {} ({:?}) is not a number", i + 1, f[i]));
        Ok(Self {
            epoch: f[0].trim().parse().map_err(|_| format!("epoch {:?} is not an integer", f[0]))?,
            loss: num(1)?,
            ce_term: num(2)?,
            sym_term: num(3)?,
            lr: num(4)?,
            feat_std: num(5)?,
            eff_rank: num(6)?,
            knn_acc: if f[7].trim().is_empty() { None } else { Some(num(7)?) },
            secs: num(8)?,
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub records: Vec<EpochRecord>,
    /// Largest gradient magnitude seen on any twin parameter.
    pub twin_grad_max_abs: f64,
}

impl RunMetrics {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(METRICS_HEADER);
        s.push('\n');
        for r in &self.records {
            let _ = writeln!(s, "{}", r.csv_line());
        }
        s
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }
}

/// Everything the loop mutates.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub encoder: EncoderState,
    pub twin: Option<MomentumTwin>,
    /// One buffer per parameter, in `EncoderState::params` order.
    pub velocity: Vec<DenseMatrix>,
    /// Completed epochs.
    pub epoch: usize,
    pub seed: u64,
}

impl TrainState {
    pub fn fresh(cfg: &TrainConfig, input_dim: usize) -> Result<Self> {
        let specs = cfg.architecture(input_dim);
        let encoder = init_params(&specs, cfg.seed)?;
        let twin = if cfg.ema_enabled {
            Some(MomentumTwin::new(&encoder, cfg.ema_m)?)
        } else {
            None
        };
        let velocity = encoder
            .params()
            .iter()
            .map(|p| DenseMatrix::zeros(p.rows(), p.cols()))
            .collect();
        Ok(Self {
            encoder,
            twin,
            velocity,
            epoch: 0,
            seed: cfg.seed,
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            encoder: self.encoder.clone(),
            twin: self.twin.clone(),
            velocity: self.velocity.clone(),
            epoch: self.epoch as u64,
            seed: self.seed,
        }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Self {
        Self {
            encoder: ck.encoder,
            twin: ck.twin,
            velocity: ck.velocity,
            epoch: ck.epoch as usize,
            seed: ck.seed,
        }
    }
}

pub struct Trainer<'a> {
    cfg: TrainConfig,
    data: Unlabeled<'a>,
    state: TrainState,
    metrics: RunMetrics,
    diag: DenseMatrix,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: TrainConfig, data: Unlabeled<'a>) -> Result<Self> {
        let state = TrainState::fresh(&cfg, data.dim())?;
        Self::with_state(cfg, data, state)
    }

    /// Continues a run from saved state; the config must be the one the
    /// state was produced with.
    pub fn resume(cfg: TrainConfig, data: Unlabeled<'a>, state: TrainState) -> Result<Self> {
        if state.seed != cfg.seed {
            return Err(Error::Config(format!(
                "checkpoint seed {} differs from config seed {}",
                state.seed, cfg.seed
            )));
        }
        if state.epoch > cfg.epochs {
            return Err(Error::Config(format!(
                "checkpoint is at epoch {} but the run has {} epochs",
                state.epoch, cfg.epochs
            )));
        }
        if state.twin.is_some() != cfg.ema_enabled {
            return Err(Error::Config("checkpoint twin presence disagrees with ema_enabled".into()));
        }
        let expected = cfg.architecture(data.dim());
        if state.encoder.specs() != expected {
            return Err(Error::Config("checkpoint architecture differs from the config".into()));
        }
        Self::with_state(cfg, data, state)
    }

    fn with_state(cfg: TrainConfig, data: Unlabeled<'a>, state: TrainState) -> Result<Self> {
        cfg.validate()?;
        if data.is_empty() {
            return Err(Error::Data("training set is empty".into()));
        }
        if data.len() < cfg.batch_size {
            return Err(Error::Config(format!(
                "batch_size {} exceeds the {} training samples",
                cfg.batch_size,
                data.len()
            )));
        }
        let n_diag = data.len().min(DIAGNOSTIC_SAMPLES);
        let diag = data.features().col_range(0, n_diag);
        Ok(Self {
            cfg,
            data,
            state,
            metrics: RunMetrics::default(),
            diag,
        })
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn metrics(&self) -> &RunMetrics {
        &self.metrics
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn into_parts(self) -> (TrainState, RunMetrics) {
        (self.state, self.metrics)
    }

    fn batches_per_epoch(&self) -> usize {
        self.data.len() / self.cfg.batch_size
    }

    /// Runs one epoch and returns its record.
    pub fn run_epoch(&mut self, monitor: Option<&mut dyn EpochMonitor>) -> Result<EpochRecord> {
        let start = Instant::now();
        let epoch = self.state.epoch;
        if epoch >= self.cfg.epochs {
            return Err(Error::Contract(format!("run already finished {} epochs", self.cfg.epochs)));
        }
        let bpe = self.batches_per_epoch();
        let total = self.cfg.epochs * bpe;
        let warmup = self.cfg.warmup_epochs * bpe;
        let base_lr = self.cfg.effective_base_lr();
        let batches = batch_iterator(self.data.len(), self.cfg.batch_size, self.cfg.seed, epoch)?;
        let aug = AugmentConfig {
            seed: self.cfg.seed,
            ..self.cfg.augment
        };

        let (mut loss_sum, mut ce_sum, mut sym_sum) = (0.0, 0.0, 0.0);
        let mut last_lr = 0.0;
        let cfg = &self.cfg;
        let state = &mut self.state;
        let twin_grad = &mut self.metrics.twin_grad_max_abs;
        for_each_batch(self.data, &batches, &aug, epoch, cfg.prefetch, |batch| {
            let step = epoch * bpe + batch.index;
            let lr = cosine_lr(step, total, warmup, base_lr)?;
            last_lr = lr;

            let mut tape = Tape::new();
            let bound = state.encoder.bind(&mut tape);
            let depth = state.encoder.layers().len();
            let x1 = tape.leaf(batch.view_a);
            let z = state.encoder.forward_bound(&mut tape, &bound, x1, depth)?;
            let (z_prime, twin_bound) = match &state.twin {
                Some(twin) => {
                    let (zp, tb) = twin.forward(&batch.view_b, &mut tape)?;
                    (zp, Some(tb))
                }
                None => {
                    let x2 = tape.leaf(batch.view_b);
                    (state.encoder.forward_bound(&mut tape, &bound, x2, depth)?, None)
                }
            };
            let out = uniclr_loss(&mut tape, z, z_prime, &cfg.loss)?;
            let loss = tape.scalar(out.total).expect("scalar loss");
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    batch: batch.index,
                    loss,
                });
            }
            loss_sum += loss;
            ce_sum += tape.scalar(out.main_term).expect("scalar term");
            sym_sum += out
                .symmetry_term
                .map_or(0.0, |s| tape.scalar(s).expect("scalar term"));

            let grads = tape.backward(out.total)?;
            if let Some(tb) = &twin_bound {
                for v in tb.params() {
                    *twin_grad = twin_grad.max(grads.wrt(v).max_abs());
                }
            }
            let handles: Vec<_> = bound.params().collect();
            for (i, ((p, v), h)) in state
                .encoder
                .params_mut()
                .into_iter()
                .zip(state.velocity.iter_mut())
                .zip(handles)
                .enumerate()
            {
                let g = grads.wrt(h);
                if !g.is_finite() {
                    return Err(Error::Divergence {
                        epoch,
                        batch: batch.index,
                        loss,
                    });
                }
                // odd positions are biases: no weight decay
                let wd = if i % 2 == 0 { cfg.weight_decay } else { 0.0 };
                sgd_momentum_step(p, &g, v, lr, cfg.momentum, wd)?;
            }
            if let Some(twin) = state.twin.as_mut() {
                twin.ema_update(&state.encoder)?;
            }
            Ok(())
        })?;

        let nb = batches.len().max(1) as f64;
        let feats = self.state.encoder.embed(&self.diag)?;
        let collapse = collapse_metrics(&feats)?;
        let is_last = epoch + 1 == self.cfg.epochs;
        let knn_acc = match monitor {
            Some(m) if self.cfg.eval_every > 0 && ((epoch + 1) % self.cfg.eval_every == 0 || is_last) => {
                Some(m.evaluate(&self.state.encoder)?)
            }
            _ => None,
        };
        self.state.epoch += 1;
        let record = EpochRecord {
            epoch,
            loss: loss_sum / nb,
            ce_term: ce_sum / nb,
            sym_term: sym_sum / nb,
            lr: last_lr,
            feat_std: collapse.mean_std,
            eff_rank: collapse.effective_rank,
            knn_acc,
            secs: if self.cfg.record_wall_time {
                start.elapsed().as_secs_f64()
            } else {
                0.0
            },
        };
        self.metrics.records.push(record.clone());
        Ok(record)
    }

    /// Runs epochs until `stop_epoch` (clamped to the configured total),
    /// calling `on_epoch` after each.
    pub fn run_until(
        &mut self,
        stop_epoch: usize,
        mut monitor: Option<&mut dyn EpochMonitor>,
        on_epoch: &mut dyn FnMut(&EpochRecord) -> Result<()>,
    ) -> Result<()> {
        let stop = stop_epoch.min(self.cfg.epochs);
        while self.state.epoch < stop {
            let rec = match monitor.as_mut() {
                Some(m) => self.run_epoch(Some(&mut **m))?,
                None => self.run_epoch(None)?,
            };
            on_epoch(&rec)?;
        }
        Ok(())
    }
}

/// Trains from a fresh initialization for `cfg.epochs` epochs.
pub fn train_run(
    cfg: &TrainConfig,
    data: Unlabeled<'_>,
    monitor: Option<&mut dyn EpochMonitor>,
) -> Result<(EncoderState, RunMetrics)> {
    let mut t = Trainer::new(cfg.clone(), data)?;
    t.run_until(cfg.epochs, monitor, &mut |_| Ok(()))?;
    let (state, metrics) = t.into_parts();
    Ok((state.encoder, metrics))
}
