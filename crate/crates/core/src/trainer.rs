//! Epoch loop: shuffled mini-batches, NAdam steps, per-epoch validation,
//! learning-rate plateaus, early stopping, history and checkpoints.

use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;
use std::time::Instant;

use crate::autodiff::Tape;
use crate::checkpoint::{ModelCheckpoint, OptimizerState};
use crate::dataio::{batch_indices, LabeledDataset};
use crate::error::{domain_err, Error, Result};
use crate::layers::{Ctx, Mode};
use crate::metrics::{self, EvalReport};
use crate::model::{predict_label, signal_probability, Model};
use crate::optim::{EarlyStopper, NAdam, PlateauScheduler, StopDecision};
use crate::seed;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// `None` disables early stopping.
    pub early_stop_patience: Option<usize>,
    pub plateau_patience: usize,
    pub plateau_factor: f64,
    pub seed: u64,
    pub checkpoint_path: Option<PathBuf>,
    pub history_path: Option<PathBuf>,
    /// Fill the `seconds` column with measured epoch time. Off makes the
    /// history file reproducible bit for bit.
    pub record_wall_time: bool,
    /// Rows per forward pass when scoring the validation set.
    pub eval_chunk: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: 100,
            batch_size: 512,
            lr: 1e-4,
            early_stop_patience: Some(10),
            plateau_patience: 5,
            plateau_factor: 0.1,
            seed: 0,
            checkpoint_path: None,
            history_path: None,
            record_wall_time: true,
            eval_chunk: 512,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.early_stop_patience == Some(0) || self.plateau_patience == 0 {
            return bad("patience values must be at least 1".into());
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor <= 1.0) {
            return bad(format!("plateau_factor must be in (0, 1], got {}", self.plateau_factor));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    /// Rate used during the epoch.
    pub lr: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
    /// Why training aborted, if it did.
    pub failure: Option<String>,
}

pub const HISTORY_HEADER: &str = "epoch,train_loss,train_acc,val_loss,val_acc,lr,seconds";

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(HISTORY_HEADER);
        s.push('\n');
        for r in &self.records {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                r.epoch,
                metrics::fmt_sig(r.train_loss, 9),
                metrics::fmt_sig(r.train_acc, 9),
                metrics::fmt_sig(r.val_loss, 9),
                metrics::fmt_sig(r.val_acc, 9),
                metrics::fmt_sig(r.lr, 9),
                metrics::fmt_sig(r.seconds, 6),
            );
        }
        if let Some(f) = &self.failure {
            let _ = writeln!(s, "# failed: {}", f.replace('\n', " "));
        }
        s
    }

    pub fn best(&self) -> Option<&EpochRecord> {
        self.records
            .iter()
            .fold(None, |best: Option<&EpochRecord>, r| match best {
                Some(b) if b.val_loss <= r.val_loss => Some(b),
                _ => Some(r),
            })
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Weights with the lowest validation loss.
    pub model: Model<f32>,
    pub checkpoint: ModelCheckpoint,
    pub history: TrainHistory,
    pub stopped_early: bool,
}

/// Eval-mode mean cross-entropy and accuracy.
pub fn loss_and_accuracy(model: &Model<f32>, data: &LabeledDataset, chunk: usize) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(domain_err!("cannot score an empty dataset"));
    }
    let logits = model.logits(&data.to_array(), chunk)?;
    let probs: Vec<[f64; 2]> = logits
        .iter()
        .map(|&[a, b]| {
            let p = signal_probability(a as f64, b as f64);
            [1.0 - p, p]
        })
        .collect();
    let loss = metrics::cross_entropy(&probs, data.labels())?;
    let correct = logits
        .iter()
        .zip(data.labels())
        .filter(|(&[a, b], &y)| predict_label(a as f64, b as f64) == y)
        .count();
    Ok((loss, correct as f64 / data.len() as f64))
}

/// Trains `model` on `train_set`, validating on `val_set` after each epoch,
/// and returns the best-validation weights with the full history.
pub fn train(
    model: Model<f32>,
    train_set: &LabeledDataset,
    val_set: &LabeledDataset,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    train_with_progress(model, train_set, val_set, config, |_| {})
}

/// [`train`] with a callback after every completed epoch.
pub fn train_with_progress(
    mut model: Model<f32>,
    train_set: &LabeledDataset,
    val_set: &LabeledDataset,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    config.validate()?;
    if config.max_epochs > 0 && (train_set.is_empty() || val_set.is_empty()) {
        return Err(domain_err!("training needs non-empty train and validation sets"));
    }
    let mut train_data = train_set.clone();
    if model.config().standardize_input {
        train_data.standardize_per_channel();
    }
    let mut opt = NAdam::<f32>::new(config.lr);
    let mut sched = PlateauScheduler::new(config.lr, config.plateau_factor, config.plateau_patience);
    let mut stopper = EarlyStopper::new(config.early_stop_patience.unwrap_or(usize::MAX));
    let mut history = TrainHistory::default();
    let shuffle_seed = seed::derive(config.seed, "shuffle");
    let mut tape = Tape::new();
    let mut stopped_early = false;

    let snapshot = |model: &Model<f32>, opt: &NAdam<f32>, epoch: usize, best: f64| ModelCheckpoint {
        optimizer: Some(OptimizerState::from_nadam(opt)),
        epoch: epoch as u64,
        best_val_loss: best,
        ..ModelCheckpoint::from_model(model)
    };
    let fail = |history: &mut TrainHistory, stopper: &EarlyStopper<ModelCheckpoint>, err: Error| {
        history.failure = Some(err.to_string());
        if let Some(p) = &config.history_path {
            let _ = fs::write(p, history.to_csv());
        }
        if let (Some(p), Some(ck)) = (&config.checkpoint_path, stopper.snapshot()) {
            let _ = ck.save(p);
        }
        err
    };

    for epoch in 1..=config.max_epochs {
        let started = Instant::now();
        let lr = sched.lr();
        opt.lr = lr;
        let (mut loss_sum, mut correct) = (0.0f64, 0usize);
        for idx in batch_indices(train_data.len(), config.batch_size, seed::indexed(shuffle_seed, epoch as u64))? {
            let (x, labels) = train_data.gather(&idx);
            tape.clear();
            let mut ctx = Ctx::new(&mut tape, Mode::Train);
            let xv = ctx.tape.constant(x);
            let step = (|| {
                let logits = model.forward(&mut ctx, xv)?;
                let probs = ctx.tape.softmax(logits)?;
                let loss = ctx.tape.cross_entropy(probs, &labels)?;
                Ok::<_, Error>((logits, loss))
            })();
            let (logits, loss) = step.map_err(|e| fail(&mut history, &stopper, e))?;
            let loss_value = ctx.tape.value(loss).item()?.into();
            if !f64::is_finite(loss_value) {
                let e = Error::Numerics(format!("non-finite training loss at epoch {epoch}"));
                return Err(fail(&mut history, &stopper, e));
            }
            ctx.tape.backward(loss)?;
            let grads = ctx.grads();
            let stats = ctx.take_batch_stats();
            correct += ctx
                .tape
                .value(logits)
                .data()
                .chunks(2)
                .zip(&labels)
                .filter(|(l, &y)| predict_label(l[0] as f64, l[1] as f64) as usize == y)
                .count();
            loss_sum += loss_value * labels.len() as f64;
            drop(ctx);
            opt.step_module(&mut model, &grads)
                .map_err(|e| fail(&mut history, &stopper, e))?;
            model.apply_batch_stats(&stats);
        }
        let (val_loss, val_acc) = loss_and_accuracy(&model, val_set, config.eval_chunk)?;
        if !val_loss.is_finite() {
            let e = Error::Numerics(format!("non-finite validation loss at epoch {epoch}"));
            return Err(fail(&mut history, &stopper, e));
        }
        sched.epoch_end(val_loss);
        let decision = stopper.check(epoch, val_loss, || snapshot(&model, &opt, epoch, val_loss));
        if stopper.best_epoch() == Some(epoch) {
            if let (Some(p), Some(ck)) = (&config.checkpoint_path, stopper.snapshot()) {
                ck.save(p)?;
            }
        }
        history.records.push(EpochRecord {
            epoch,
            train_loss: loss_sum / train_data.len() as f64,
            train_acc: correct as f64 / train_data.len() as f64,
            val_loss,
            val_acc,
            lr,
            seconds: if config.record_wall_time {
                started.elapsed().as_secs_f64()
            } else {
                0.0
            },
        });
        on_epoch(history.records.last().expect("record just pushed"));
        if config.early_stop_patience.is_some() && decision == StopDecision::Stop {
            stopped_early = true;
            break;
        }
    }

    let completed = history.records.len();
    let mut checkpoint = match stopper.into_snapshot() {
        Some(ck) => ck,
        None => snapshot(&model, &opt, 0, f64::INFINITY),
    };
    checkpoint.epoch = completed as u64;
    let best = checkpoint.to_model()?;
    if let Some(p) = &config.checkpoint_path {
        checkpoint.save(p)?;
    }
    if let Some(p) = &config.history_path {
        fs::write(p, history.to_csv())?;
    }
    Ok(TrainOutcome {
        model: best,
        checkpoint,
        history,
        stopped_early,
    })
}

/// Scores `dataset` in eval mode and builds the full report. The ROC part
/// needs both labels present.
pub fn evaluate(model: &Model<f32>, dataset: &LabeledDataset, threshold: f64) -> Result<EvalReport> {
    if dataset.is_empty() {
        return Err(domain_err!("cannot evaluate an empty dataset"));
    }
    let scores = model.predict_proba(&dataset.to_array())?;
    let mut report = EvalReport::from_scores(&scores, dataset.labels(), threshold)?;
    let probs: Vec<[f64; 2]> = scores.iter().map(|&p| [1.0 - p, p]).collect();
    report.loss = Some(metrics::cross_entropy(&probs, dataset.labels())?);
    Ok(report)
}
