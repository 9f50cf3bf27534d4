//! Scorer-only training: frozen backbone, fixed budget, AdamW with warmup +
//! cosine learning rate, and the annealed constraint weight.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, EvalSetup, Selector};
use crate::objective::{constraint_loss, task_loss, total_loss, AnnealSchedule};
use crate::optim::{AdamW, AdamWConfig, LrSchedule};
use crate::pipeline::{forward_train, full_token_accuracy, FrozenBackbone};
use crate::rng::{stream, Stream};
use crate::scorer::{init_scorer, ScorerParams};
use crate::synth::{Dataset, Sequence, TokenBatch};
use rand::seq::SliceRandom;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub budget: f64,
    pub lr_peak: f64,
    /// Fraction of all training steps spent in linear warmup.
    pub warmup_frac: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lambda_start: f64,
    pub lambda_end: f64,
    pub adamw: AdamWConfig,
    pub seed: u64,
    /// Steps between validation passes; 0 evaluates once per epoch.
    pub eval_every: u64,
    /// Scorer projection width; 0 uses half the feature dimension.
    pub proj_dim: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            budget: 0.2,
            lr_peak: 1e-3,
            warmup_frac: 0.03,
            epochs: 5,
            batch_size: 64,
            lambda_start: 0.1,
            lambda_end: 2.0,
            adamw: AdamWConfig::default(),
            seed: 0,
            eval_every: 0,
            proj_dim: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.budget > 0.0 && self.budget < 1.0) {
            return Err(Error::Config(format!(
                "budget {} outside (0, 1)",
                self.budget
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "epochs and batch_size must be positive".into(),
            ));
        }
        if !(self.lambda_start >= 0.0) {
            return Err(Error::Config("lambda_start must be non-negative".into()));
        }
        self.adamw.validate()?;
        LrSchedule::new(self.lr_peak, self.warmup_frac, 1)?;
        AnnealSchedule::new(self.lambda_start, self.lambda_end, 1)?;
        Ok(())
    }
}

/// One JSON line of the metric log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    Step {
        step: u64,
        epoch: u64,
        lambda: f64,
        lr: f64,
        loss_total: f64,
        loss_task: f64,
        loss_constraint: f64,
        soft_hard_gap: f64,
        skipped: bool,
    },
    Eval {
        step: u64,
        epoch: u64,
        val_accuracy: f64,
        retention: f64,
        recall: f64,
        soft_hard_gap: Option<f64>,
    },
}

impl LogRecord {
    pub fn to_json_line(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

/// Resumable training state over borrowed data and backbone.
pub struct Trainer<'a> {
    config: TrainConfig,
    data: &'a Dataset,
    backbone: &'a FrozenBackbone,
    pub scorer: ScorerParams,
    pub optimizer: AdamW,
    /// Number of completed steps.
    pub step: u64,
    full_accuracy: f64,
    per_epoch: u64,
    lr: LrSchedule,
    anneal: AnnealSchedule,
    order: Option<(u64, Vec<usize>)>,
}

impl<'a> Trainer<'a> {
    pub fn new(
        config: TrainConfig,
        data: &'a Dataset,
        backbone: &'a FrozenBackbone,
    ) -> Result<Self> {
        config.validate()?;
        let d = data.spec.feature_dim;
        if backbone.input_dim() != d || backbone.classes() != data.spec.classes {
            return Err(Error::Config(format!(
                "backbone expects D={} C={}, dataset has D={} C={}",
                backbone.input_dim(),
                backbone.classes(),
                d,
                data.spec.classes
            )));
        }
        if !backbone.is_frozen() {
            return Err(Error::Config(
                "backbone must be frozen before scorer training".into(),
            ));
        }
        if data.train.is_empty() || data.val.is_empty() {
            return Err(Error::Config(
                "dataset needs non-empty train and val splits".into(),
            ));
        }
        let proj = if config.proj_dim == 0 {
            (d / 2).max(1)
        } else {
            config.proj_dim
        };
        let scorer = init_scorer(d, proj, config.seed)?;
        let optimizer = AdamW::new(config.adamw, &[&scorer.w_q, &scorer.w_k]);
        let per_epoch = data.train.len().div_ceil(config.batch_size) as u64;
        let total = per_epoch * config.epochs as u64;
        Ok(Self {
            lr: LrSchedule::new(config.lr_peak, config.warmup_frac, total)?,
            anneal: AnnealSchedule::new(config.lambda_start, config.lambda_end, total)?,
            full_accuracy: full_token_accuracy(backbone, &data.val),
            config,
            data,
            backbone,
            scorer,
            optimizer,
            step: 0,
            per_epoch,
            order: None,
        })
    }

    /// Restores scorer, optimizer and step from a checkpoint written by
    /// [`Trainer::checkpoint`].
    pub fn resume(
        config: TrainConfig,
        data: &'a Dataset,
        backbone: &'a FrozenBackbone,
        ck: &Checkpoint,
    ) -> Result<Self> {
        let mut t = Self::new(config, data, backbone)?;
        let (Some(scorer), Some(opt)) = (&ck.scorer, &ck.optimizer) else {
            return Err(Error::Config(
                "checkpoint lacks scorer or optimizer state".into(),
            ));
        };
        if let Some(b) = &ck.backbone {
            if b.checksum() != backbone.checksum() {
                return Err(Error::Config(
                    "checkpoint was trained against a different backbone".into(),
                ));
            }
        }
        if scorer.w_q.shape() != t.scorer.w_q.shape() {
            return Err(Error::Config(
                "checkpoint scorer shape does not match config".into(),
            ));
        }
        if ck.step > t.total_steps() {
            return Err(Error::Config(format!(
                "checkpoint step {} beyond schedule of {} steps",
                ck.step,
                t.total_steps()
            )));
        }
        t.scorer = scorer.clone();
        t.optimizer = opt.clone();
        t.step = ck.step;
        Ok(t)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn total_steps(&self) -> u64 {
        self.per_epoch * self.config.epochs as u64
    }

    pub fn steps_per_epoch(&self) -> u64 {
        self.per_epoch
    }

    pub fn full_accuracy(&self) -> f64 {
        self.full_accuracy
    }

    pub fn done(&self) -> bool {
        self.step >= self.total_steps()
    }

    pub fn lambda_at(&self, step: u64) -> f64 {
        self.anneal.lambda_at(step)
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        self.lr.at(step)
    }

    fn batch_indices(&mut self, step: u64) -> Vec<usize> {
        let epoch = step / self.per_epoch;
        if self.order.as_ref().map(|o| o.0) != Some(epoch) {
            let mut order: Vec<usize> = (0..self.data.train.len()).collect();
            order.shuffle(&mut stream(self.config.seed, Stream::Shuffle, epoch));
            self.order = Some((epoch, order));
        }
        let order = &self.order.as_ref().expect("just set").1;
        let pos = (step % self.per_epoch) as usize * self.config.batch_size;
        order[pos..(pos + self.config.batch_size).min(order.len())].to_vec()
    }

    /// Runs one optimisation step and, when due, a validation pass.
    pub fn step_once(&mut self) -> Result<Vec<LogRecord>> {
        if self.done() {
            return Err(Error::Config("training already complete".into()));
        }
        let t = self.step;
        let idx = self.batch_indices(t);
        let seqs: Vec<&Sequence> = idx.iter().map(|&i| &self.data.train[i]).collect();
        let batch = TokenBatch::from_sequences(&seqs, self.data.spec.feature_dim)?;
        let (lambda, lr) = (self.anneal.lambda_at(t), self.lr.at(t));

        let tape = Tape::new();
        let out = forward_train(
            &tape,
            &batch,
            &self.scorer,
            self.backbone,
            self.config.budget,
        )?;
        let task = task_loss(out.logits, &batch.label)?;
        let constraint = constraint_loss(&tape, out.mask, &out.hard, &batch.valid_len)?;
        let total = total_loss(task, constraint, lambda)?;
        let grads = tape.backward(total)?;
        let g = [grads.wrt(out.w_q), grads.wrt(out.w_k)];
        let applied = {
            let ScorerParams { w_q, w_k } = &mut self.scorer;
            self.optimizer.step(&mut [w_q, w_k], &g, lr)?
        };

        let (mut gap, mut count) = (0.0, 0usize);
        let n = batch.max_len();
        for (row, &len) in batch.valid_len.iter().enumerate() {
            let soft = &out.selection.mask.data()[row * n..][..len];
            let hard = &out.hard.mask.data()[row * n..][..len];
            gap += soft
                .iter()
                .zip(hard)
                .map(|(s, h)| (s - h).abs())
                .sum::<f64>();
            count += len;
        }
        self.step += 1;
        let epoch = t / self.per_epoch;
        let mut records = vec![LogRecord::Step {
            step: t,
            epoch,
            lambda,
            lr,
            loss_total: total.value().item(),
            loss_task: task.value().item(),
            loss_constraint: constraint.value().item(),
            soft_hard_gap: gap / count as f64,
            skipped: !applied,
        }];
        let every = if self.config.eval_every == 0 {
            self.per_epoch
        } else {
            self.config.eval_every
        };
        if self.step.is_multiple_of(every) || self.done() {
            records.push(self.eval_record()?);
        }
        Ok(records)
    }

    fn eval_record(&self) -> Result<LogRecord> {
        let setup = EvalSetup {
            seqs: &self.data.val,
            backbone: self.backbone,
            scorer: Some(&self.scorer),
            seed: self.config.seed,
            full_accuracy: self.full_accuracy,
            timing: false,
        };
        let row = evaluate(&setup, Selector::Learned, self.config.budget)?;
        Ok(LogRecord::Eval {
            step: self.step,
            epoch: (self.step - 1) / self.per_epoch,
            val_accuracy: row.accuracy,
            retention: row.retention,
            recall: row.recall,
            soft_hard_gap: row.soft_hard_gap,
        })
    }

    /// Steps until `stop` (clamped to the schedule), feeding each record to
    /// `sink`.
    pub fn run_until(
        &mut self,
        stop: u64,
        sink: &mut dyn FnMut(&LogRecord) -> Result<()>,
    ) -> Result<()> {
        while self.step < stop.min(self.total_steps()) {
            for r in self.step_once()? {
                sink(&r)?;
            }
        }
        Ok(())
    }

    pub fn checkpoint(&self, config_echo: serde_json::Value) -> Checkpoint {
        Checkpoint {
            config: config_echo,
            scorer: Some(self.scorer.clone()),
            backbone: Some(self.backbone.clone()),
            optimizer: Some(self.optimizer.clone()),
            step: self.step,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub scorer: ScorerParams,
    pub optimizer: AdamW,
    pub step: u64,
    pub log: Vec<LogRecord>,
}

/// Trains a fresh scorer to completion, collecting the metric log.
pub fn train_scorer(
    config: &TrainConfig,
    data: &Dataset,
    backbone: &FrozenBackbone,
) -> Result<TrainOutcome> {
    let mut t = Trainer::new(config.clone(), data, backbone)?;
    let mut log = Vec::new();
    t.run_until(u64::MAX, &mut |r| {
        log.push(r.clone());
        Ok(())
    })?;
    Ok(TrainOutcome {
        scorer: t.scorer,
        optimizer: t.optimizer,
        step: t.step,
        log,
    })
}

/// `(first-decile mean, last-decile mean)` of the per-step soft/hard gap.
pub fn gap_deciles(log: &[LogRecord]) -> Option<(f64, f64)> {
    let gaps: Vec<f64> = log
        .iter()
        .filter_map(|r| match r {
            LogRecord::Step { soft_hard_gap, .. } => Some(*soft_hard_gap),
            _ => None,
        })
        .collect();
    let n = gaps.len() / 10;
    if n == 0 {
        return None;
    }
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    Some((mean(&gaps[..n]), mean(&gaps[gaps.len() - n..])))
}
