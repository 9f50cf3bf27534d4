//! Composite training objective: task cross-entropy plus a
//! curriculum-weighted BCE term pulling the soft mask toward the hard one.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::difftopk::HardMask;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Clamp applied to the soft mask before taking logs.
pub const BCE_EPS: f64 = 1e-7;

/// Linear ramp of the constraint weight from `start` to `end` over
/// `total_steps`, constant afterwards.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnnealSchedule {
    pub start: f64,
    pub end: f64,
    pub total_steps: u64,
}

impl AnnealSchedule {
    pub fn new(start: f64, end: f64, total_steps: u64) -> Result<Self> {
        if !(start <= end) || total_steps == 0 {
            return Err(Error::Config(format!(
                "anneal schedule needs start <= end and total_steps >= 1, got ({start}, {end}, {total_steps})"
            )));
        }
        Ok(Self {
            start,
            end,
            total_steps,
        })
    }

    pub fn lambda_at(&self, step: u64) -> f64 {
        let progress = (step as f64 / self.total_steps as f64).min(1.0);
        self.start + (self.end - self.start) * progress
    }
}

/// Mean BCE between the clamped soft mask and the (detached) hard mask over
/// valid positions.
pub fn constraint_loss<'t>(
    tape: &'t Tape,
    soft: Var<'t>,
    hard: &HardMask,
    valid_len: &[usize],
) -> Result<Var<'t>> {
    let shape = soft.shape();
    if shape != hard.mask.shape() || shape.len() != 2 || shape[0] != valid_len.len() {
        return Err(Error::dim("constraint_loss", &shape, hard.mask.shape()));
    }
    let n = shape[1];
    let mut valid = Tensor::zeros(shape.as_slice());
    for (row, &len) in valid_len.iter().enumerate() {
        valid.data_mut()[row * n..][..len].fill(1.0);
    }
    let count: usize = valid_len.iter().sum();
    let on = hard.mask.zip_map(&valid, |h, v| h * v)?;
    let off = hard.mask.zip_map(&valid, |h, v| (1.0 - h) * v)?;

    let m = soft.clamp(BCE_EPS, 1.0 - BCE_EPS);
    let log_m = m.log()?;
    let log_not_m = m.neg().add(&tape.constant(Tensor::scalar(1.0)))?.log()?;
    let ll = log_m
        .mul(&tape.constant(on))?
        .add(&log_not_m.mul(&tape.constant(off))?)?;
    Ok(ll.sum_all().scale(-1.0 / count as f64))
}

/// Mean cross-entropy of `[B, C]` logits via log-sum-exp.
pub fn task_loss<'t>(logits: Var<'t>, labels: &[usize]) -> Result<Var<'t>> {
    let shape = logits.shape();
    let classes = shape.get(1).copied().unwrap_or(0);
    if let Some(bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Input(format!("label {bad} outside [0, {classes})")));
    }
    let lse = logits.logsumexp_last()?;
    let picked = logits.gather_last(labels)?;
    Ok(lse.sub(&picked)?.mean_all())
}

pub fn total_loss<'t>(task: Var<'t>, constraint: Var<'t>, lambda: f64) -> Result<Var<'t>> {
    task.add(&constraint.scale(lambda))
}
