//! Optimizer, learning-rate schedule and the training loop.

use std::io::Write;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::{Matrix, ParamGrads, ParamStore, Tape};
use crate::corpus::Sentence;
use crate::error::{Error, Result};
use crate::evaluation::dev_metric;
use crate::model::{Config, LossParts, Model, Prepared, Task};

/// Adam with bias correction and decoupled weight decay.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl Adam {
    pub fn new(store: &ParamStore, config: &Config) -> Self {
        let zeros = || {
            store
                .iter()
                .map(|(_, p)| Matrix::zeros(p.value.rows(), p.value.cols()))
                .collect::<Vec<_>>()
        };
        Adam {
            lr: config.lr,
            beta1: config.beta1,
            beta2: config.beta2,
            eps: config.adam_eps,
            weight_decay: config.weight_decay,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update. Decay shrinks only parameters flagged for it and is
    /// applied after the moment step.
    pub fn step(&mut self, store: &mut ParamStore, grads: &ParamGrads) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let decay = store.param(id).decay;
            let g = grads.get(id).data();
            let m = self.m[id.index()].data_mut();
            let v = self.v[id.index()].data_mut();
            let w = store.get_mut(id).data_mut();
            for i in 0..w.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                w[i] -= self.lr * mh / (vh.sqrt() + self.eps);
                if decay {
                    w[i] -= self.lr * self.weight_decay * w[i];
                }
            }
        }
    }
}

/// Reduce-on-plateau for a metric that should increase.
#[derive(Debug, Clone)]
pub struct Plateau {
    pub patience: usize,
    pub factor: f64,
    pub threshold: f64,
    best: Option<f64>,
    bad_epochs: usize,
}

impl Plateau {
    pub fn new(patience: usize, factor: f64, threshold: f64) -> Self {
        Plateau {
            patience,
            factor,
            threshold,
            best: None,
            bad_epochs: 0,
        }
    }

    pub fn from_config(config: &Config) -> Self {
        Self::new(
            config.scheduler_patience,
            config.scheduler_factor,
            config.scheduler_threshold,
        )
    }

    /// Records one epoch's metric; returns the new learning rate.
    /// `patience` consecutive epochs without beating the best by more than
    /// `threshold` trigger a reduction and reset the count.
    pub fn observe(&mut self, metric: f64, lr: f64) -> f64 {
        match self.best {
            Some(b) if metric <= b + self.threshold => self.bad_epochs += 1,
            _ => {
                self.best = Some(metric);
                self.bad_epochs = 0;
            }
        }
        if self.bad_epochs >= self.patience.max(1) {
            self.bad_epochs = 0;
            lr * self.factor
        } else {
            lr
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: LossParts,
    pub l2: f64,
    pub grad_norm: f64,
    pub dev_metric: f64,
    pub lr: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    MaxEpochs,
    EarlyStop,
    MetricReached,
    TimeLimit,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the best dev metric.
    pub model: Model,
    pub best_epoch: usize,
    pub best_metric: f64,
    pub log: Vec<EpochRecord>,
    pub stop: StopReason,
}

/// Run-time limits beyond those in the configuration.
#[derive(Debug, Clone, Copy, Default)]
pub struct TrainLimits {
    pub time: Option<Duration>,
}

pub fn write_metric_log<W: Write>(log: &[EpochRecord], mut out: W) -> Result<()> {
    writeln!(
        out,
        "epoch,loss_ti,loss_fi,loss_srl,loss_total,l2,grad_norm,dev_metric,lr,seconds"
    )?;
    for r in log {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{:.3}",
            r.epoch,
            r.loss.ti,
            r.loss.fi,
            r.loss.srl,
            r.loss.total(),
            r.l2,
            r.grad_norm,
            r.dev_metric,
            r.lr,
            r.seconds
        )?;
    }
    Ok(())
}

/// Mean loss and summed gradient of one batch. Sentences run in parallel
/// and are combined in batch order, so results do not depend on threads.
fn batch_gradients(
    model: &Model,
    batch: &[(&Prepared, u64)],
    task: Task,
) -> Result<(ParamGrads, LossParts)> {
    let dropout = model.config.dropout > 0.0;
    let per_sentence = batch
        .par_iter()
        .map(|&(sent, seed)| {
            let tape = if dropout {
                Tape::train(&model.store, seed)
            } else {
                Tape::grad(&model.store)
            };
            let (loss, parts) = model.sentence_loss(&tape, sent, task)?;
            let grads = tape.backward(loss)?;
            Ok((grads.param_grads(&model.store), parts))
        })
        .collect::<Result<Vec<_>>>()?;
    let scale = 1.0 / batch.len() as f64;
    let mut total = ParamGrads::zeros_like(&model.store);
    let mut parts = LossParts::default();
    for (g, p) in &per_sentence {
        total.add_scaled(g, scale);
        parts.ti += p.ti * scale;
        parts.fi += p.fi * scale;
        parts.srl += p.srl * scale;
    }
    Ok((total, parts))
}

/// Trains `model` on `train`, selecting on `dev` (or on `train` when `dev`
/// is empty).
pub fn train(model: Model, train: &[Sentence], dev: &[Sentence]) -> Result<TrainOutcome> {
    train_with_limits(model, train, dev, TrainLimits::default())
}

pub fn train_with_limits(
    mut model: Model,
    train: &[Sentence],
    dev: &[Sentence],
    limits: TrainLimits,
) -> Result<TrainOutcome> {
    if train.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let config = model.config.clone();
    config.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.threads.unwrap_or(0))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let prepared = train
        .iter()
        .map(|s| model.prepare(s))
        .collect::<Result<Vec<_>>>()?;
    let selection = if dev.is_empty() { train } else { dev };

    let mut adam = Adam::new(&model.store, &config);
    let mut plateau = Plateau::from_config(&config);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    let batch_size = config.batch_size.max(1);
    let start = Instant::now();

    let mut log = Vec::new();
    let mut best: Option<(usize, f64, ParamStore)> = None;
    let mut since_best = 0;
    let mut stop = StopReason::MaxEpochs;

    for epoch in 1..=config.max_epochs {
        let epoch_start = Instant::now();
        order.shuffle(&mut rng);
        let mut epoch_loss = LossParts::default();
        let mut last_norm = 0.0;
        let mut batches = 0;
        for (b, chunk) in order.chunks(batch_size).enumerate() {
            let batch: Vec<(&Prepared, u64)> =
                chunk.iter().map(|&i| (&prepared[i], rng.random())).collect();
            let (mut grads, parts) = pool.install(|| batch_gradients(&model, &batch, config.task))?;
            if !parts.total().is_finite() || !grads.is_finite() {
                return Err(Error::Diverged(format!(
                    "epoch {epoch}, batch {b}: loss {:?}, sentences {:?}",
                    parts, chunk
                )));
            }
            model.add_l2_gradient(&mut grads);
            last_norm = grads.clip_global_norm(config.grad_clip);
            adam.step(&mut model.store, &grads);
            epoch_loss.ti += parts.ti;
            epoch_loss.fi += parts.fi;
            epoch_loss.srl += parts.srl;
            batches += 1;
        }
        let n = batches as f64;
        epoch_loss.ti /= n;
        epoch_loss.fi /= n;
        epoch_loss.srl /= n;

        let metric = pool.install(|| dev_metric(&model, selection, config.task))?;
        let record = EpochRecord {
            epoch,
            loss: epoch_loss,
            l2: model.l2_penalty(),
            grad_norm: last_norm,
            dev_metric: metric,
            lr: adam.lr,
            seconds: epoch_start.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: loss {:.4} (ti {:.4} fi {:.4} srl {:.4}) dev {:.4} lr {:.2e}",
            epoch_loss.total(),
            epoch_loss.ti,
            epoch_loss.fi,
            epoch_loss.srl,
            metric,
            adam.lr
        );
        log.push(record);

        let improved = best.as_ref().is_none_or(|(_, m, _)| metric > *m);
        if improved {
            best = Some((epoch, metric, model.store.clone()));
            since_best = 0;
        } else {
            since_best += 1;
        }
        adam.lr = plateau.observe(metric, adam.lr);

        if config.stop_at_metric.is_some_and(|t| metric >= t) {
            stop = StopReason::MetricReached;
            break;
        }
        if since_best >= config.early_stop_patience {
            stop = StopReason::EarlyStop;
            break;
        }
        if limits.time.is_some_and(|t| start.elapsed() >= t) {
            stop = StopReason::TimeLimit;
            break;
        }
    }

    let (best_epoch, best_metric, store) = best.expect("at least one epoch");
    model.store = store;
    Ok(TrainOutcome {
        model,
        best_epoch,
        best_metric,
        log,
        stop,
    })
}
