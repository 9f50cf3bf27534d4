//! Finite-difference gradient verification.
//!
//! The helpers only evaluate forward values, so they stay independent of
//! every backward rule they are used to check.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::difftopk::{budget_to_ks, diff_topk_forward, diff_topk_with, hard_topk, DiffTopK};
use crate::error::{Error, Result};
use crate::objective::{constraint_loss, task_loss, total_loss};
use crate::par;
use crate::pipeline::{soft_pool_logits, FrozenBackbone};
use crate::rng::{stream, Stream};
use crate::scorer::{score, score_on_tape, ScorerParams};
use crate::synth::{generate, Sequence, TaskSpec, TokenBatch};
use crate::tensor::Tensor;

/// Step used for central differences throughout the crate.
pub const FD_STEP: f64 = 1e-6;

/// Central-difference gradient of a scalar function at `x`.
pub fn central_difference(f: impl Fn(&Tensor) -> f64, x: &Tensor, h: f64) -> Tensor {
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        grad.push((up - down) / (2.0 * h));
    }
    Tensor::new(x.shape().to_vec(), grad).expect("same shape as input")
}

/// Norm-wise relative error `max|a − b| / max(max|a|, max|b|, 1e-8)`.
pub fn relative_error(a: &Tensor, b: &Tensor) -> f64 {
    let diff = a
        .data()
        .iter()
        .zip(b.data())
        .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    diff / a.max_abs().max(b.max_abs()).max(1e-8)
}

/// Tolerance for DiffTopK and scorer cases.
pub const OP_TOLERANCE: f64 = 1e-5;
/// Tolerance for the end-to-end loss case.
pub const END_TO_END_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SuiteConfig {
    /// Number of random DiffTopK configurations.
    pub cases: usize,
    pub n_min: usize,
    pub n_max: usize,
    pub seed: u64,
    /// Flip the DiffTopK backward sign; every DiffTopK-dependent case must
    /// then fail.
    #[serde(skip)]
    pub negate_difftopk: bool,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            cases: 100,
            n_min: 4,
            n_max: 64,
            seed: 0,
            negate_difftopk: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseResult {
    pub name: String,
    pub rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl CaseResult {
    fn new(name: String, rel_error: f64, tolerance: f64) -> Self {
        Self {
            name,
            passed: rel_error < tolerance,
            rel_error,
            tolerance,
        }
    }
}

fn normal_tensor(shape: &[usize], scale: f64, rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            scale * z
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("sized")
}

fn op(k: usize, n: usize, negate: bool) -> DiffTopK {
    let op = DiffTopK::new(vec![k], vec![n]);
    if negate {
        op.with_negated_gradient()
    } else {
        op
    }
}

/// `Σ wᵢ·DiffTopK(s)ᵢ` against central differences through the full
/// forward, bisection included.
fn difftopk_case(
    name: String,
    n: usize,
    k: usize,
    rng: &mut impl Rng,
    negate: bool,
) -> Result<CaseResult> {
    let s = normal_tensor(&[1, n], 1.0, rng);
    let w = normal_tensor(&[1, n], 1.0, rng);
    let tape = Tape::new();
    let sv = tape.param(s.clone());
    let (m, _) = diff_topk_with(&tape, sv, op(k, n, negate))?;
    let loss = m.mul(&tape.constant(w.clone()))?.sum_all();
    let analytic = tape.backward(loss)?.wrt(sv);
    let f = |x: &Tensor| {
        let r = diff_topk_forward(x, &[k], &[n]).expect("valid");
        r.mask.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
    };
    let fd = central_difference(f, &s, FD_STEP);
    Ok(CaseResult::new(
        name,
        relative_error(&analytic, &fd),
        OP_TOLERANCE,
    ))
}

fn scorer_case(rng: &mut impl Rng) -> Result<CaseResult> {
    let (b, n, d, p) = (2, 7, 5, 3);
    let v = normal_tensor(&[b, n, d], 1.0, rng);
    let wq = normal_tensor(&[d, p], 0.5, rng);
    let wk = normal_tensor(&[d, p], 0.5, rng);
    let r = normal_tensor(&[b, n], 1.0, rng);
    let valid = [n, n - 2];
    let mut mask = Tensor::zeros([b, n]);
    for (row, &len) in valid.iter().enumerate() {
        mask.data_mut()[row * n..][..len].fill(1.0);
    }
    let weights = r.zip_map(&mask, |a, m| a * m)?;
    let eval = |q: &Tensor, k: &Tensor| -> f64 {
        let params = ScorerParams::new(q.clone(), k.clone()).expect("shapes");
        let s = score(&v, &params, &valid).expect("valid");
        s.zip_map(&weights, |a, w| a * w).expect("same shape").sum()
    };
    let tape = Tape::new();
    let (qv, kv) = (tape.param(wq.clone()), tape.param(wk.clone()));
    let s = score_on_tape(&tape, tape.constant(v.clone()), qv, kv, &valid)?;
    let loss = s.mul(&tape.constant(weights.clone()))?.sum_all();
    let g = tape.backward(loss)?;
    let fd_q = central_difference(|x| eval(x, &wk), &wq, FD_STEP);
    let fd_k = central_difference(|x| eval(&wq, x), &wk, FD_STEP);
    let err = relative_error(&g.wrt(qv), &fd_q).max(relative_error(&g.wrt(kv), &fd_k));
    Ok(CaseResult::new("scorer".into(), err, OP_TOLERANCE))
}

/// Task loss plus weighted constraint loss through scorer, DiffTopK, soft
/// pooling and a frozen backbone, differentiated w.r.t. both projections.
fn end_to_end_case(seed: u64, negate: bool) -> Result<CaseResult> {
    let spec = TaskSpec {
        n_min: 10,
        n_max: 14,
        feature_dim: 6,
        classes: 2,
        signal_tokens: 2,
        sink_count: 1,
        seed,
        ..TaskSpec::default()
    };
    let seqs = generate(&spec, 4, 7)?;
    let refs: Vec<&Sequence> = seqs.iter().collect();
    let batch = TokenBatch::from_sequences(&refs, 6)?;
    let mut bb = FrozenBackbone::init(6, 5, 2, seed);
    bb.freeze();
    let mut rng = stream(seed, Stream::Check, u64::MAX);
    let wq = normal_tensor(&[6, 3], 0.5, &mut rng);
    let wk = normal_tensor(&[6, 3], 0.5, &mut rng);
    let (budget, lambda) = (0.3, 0.7);
    let ks = budget_to_ks(&batch.valid_len, budget)?;

    let record = |q: &Tensor,
                  k: &Tensor,
                  tape: &Tape,
                  neg: bool|
     -> Result<(f64, Option<(Tensor, Tensor)>)> {
        let v = tape.constant(batch.v.clone());
        let (qv, kv) = (tape.param(q.clone()), tape.param(k.clone()));
        let s = score_on_tape(tape, v, qv, kv, &batch.valid_len)?;
        let hard = hard_topk(&s.value(), &ks, &batch.valid_len)?;
        let mut op = DiffTopK::new(ks.clone(), batch.valid_len.clone());
        if neg {
            op = op.with_negated_gradient();
        }
        let (m, _) = diff_topk_with(tape, s, op)?;
        let logits = soft_pool_logits(tape, v, m, &bb)?;
        let task = task_loss(logits, &batch.label)?;
        let cons = constraint_loss(tape, m, &hard, &batch.valid_len)?;
        let loss = total_loss(task, cons, lambda)?;
        let value = loss.value().item();
        let g = tape.backward(loss)?;
        Ok((value, Some((g.wrt(qv), g.wrt(kv)))))
    };
    let value = |q: &Tensor, k: &Tensor| record(q, k, &Tape::new(), false).expect("valid").0;
    let (_, grads) = record(&wq, &wk, &Tape::new(), negate)?;
    let (gq, gk) = grads.expect("gradients requested");
    let fd_q = central_difference(|x| value(x, &wk), &wq, FD_STEP);
    let fd_k = central_difference(|x| value(&wq, x), &wk, FD_STEP);
    let err = relative_error(&gq, &fd_q).max(relative_error(&gk, &fd_k));
    Ok(CaseResult::new(
        "end_to_end".into(),
        err,
        END_TO_END_TOLERANCE,
    ))
}

/// Runs every gradient check: random DiffTopK rows, the minimal
/// `N = 2, k = 1` row, the scorer, and the end-to-end loss.
pub fn run_suite(cfg: &SuiteConfig) -> Result<Vec<CaseResult>> {
    if cfg.n_min < 2 || cfg.n_min > cfg.n_max {
        return Err(Error::Config(format!(
            "gradcheck sizes need 2 <= n_min <= n_max, got {}..{}",
            cfg.n_min, cfg.n_max
        )));
    }
    let neg = cfg.negate_difftopk;
    let mut out = par::map_indexed(cfg.cases, |i| {
        let mut rng = stream(cfg.seed, Stream::Check, i as u64);
        let n = rng.gen_range(cfg.n_min..=cfg.n_max);
        let k = rng.gen_range(1..n);
        difftopk_case(format!("difftopk[{i}] n={n} k={k}"), n, k, &mut rng, neg)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let mut rng = stream(cfg.seed, Stream::Check, cfg.cases as u64);
    out.push(difftopk_case(
        "difftopk minimal n=2 k=1".into(),
        2,
        1,
        &mut rng,
        neg,
    )?);
    out.push(scorer_case(&mut rng)?);
    out.push(end_to_end_case(cfg.seed, neg)?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn difference_of_quadratic() {
        let x = Tensor::new([3], vec![1.0, -2.0, 0.5]).unwrap();
        let g = central_difference(|t| t.data().iter().map(|v| v * v).sum(), &x, FD_STEP);
        for (a, b) in g.data().iter().zip(x.data()) {
            assert!((a - 2.0 * b).abs() < 1e-8);
        }
    }

    #[test]
    fn relative_error_is_scale_free() {
        let a = Tensor::new([2], vec![1e3, 2e3]).unwrap();
        let b = Tensor::new([2], vec![1e3, 2e3 + 1e-3]).unwrap();
        assert!((relative_error(&a, &b) - 5e-7).abs() < 1e-12);
        assert_eq!(
            relative_error(&Tensor::zeros([2]), &Tensor::zeros([2])),
            0.0
        );
    }

    #[test]
    fn small_suite_passes() {
        let cfg = SuiteConfig {
            cases: 12,
            ..Default::default()
        };
        let res = run_suite(&cfg).unwrap();
        assert_eq!(res.len(), 15);
        for r in &res {
            assert!(r.passed, "{r:?}");
        }
    }

    #[test]
    fn negated_backward_is_caught() {
        let cfg = SuiteConfig {
            cases: 12,
            negate_difftopk: true,
            ..Default::default()
        };
        let res = run_suite(&cfg).unwrap();
        let failed: Vec<&str> = res
            .iter()
            .filter(|r| !r.passed)
            .map(|r| r.name.as_str())
            .collect();
        assert_eq!(failed.len(), 14, "{failed:?}");
        assert!(res.iter().find(|r| r.name == "scorer").unwrap().passed);
    }

    #[test]
    fn invalid_sizes_rejected() {
        let cfg = SuiteConfig {
            n_min: 1,
            ..Default::default()
        };
        assert!(matches!(run_suite(&cfg), Err(Error::Config(_))));
    }
}
