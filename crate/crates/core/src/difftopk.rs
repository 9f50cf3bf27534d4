//! Differentiable Top-K.
//!
//! Forward: per row, bisect for the threshold `t` such that the soft mask
//! `σ(s + t)` sums to `k` over the row's valid prefix. Backward: the
//! implicit-function vector-Jacobian product
//! `v ⊙ g − (⟨v, g⟩ / Σv) · v` with `v = M ⊙ (1 − M)`, which never looks at
//! the bisection iterates. Inference uses [`hard_topk`] instead.
//!
//! Rows carry their own valid length; positions at or beyond it are
//! padding. Padding is excluded from the bracket, from the sum constraint
//! and from the gradient, and its mask entries are exactly zero.

use crate::autodiff::{CustomForward, CustomOp, Tape, Var};
use crate::error::{Error, Result};
use crate::par;
use crate::tensor::{sigmoid, Tensor};

pub const BISECTION_ITERS: usize = 64;
const BRACKET_PAD: f64 = 10.0;
const SATURATION_FLOOR: f64 = 1e-300;

#[derive(Debug, Clone, PartialEq)]
pub struct SoftMaskResult {
    pub scores: Tensor,
    pub threshold: Vec<f64>,
    pub mask: Tensor,
    pub k: Vec<usize>,
    pub valid_len: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HardMask {
    /// `[B, N]` with entries in {0, 1}.
    pub mask: Tensor,
    pub k: Vec<usize>,
    /// Selected indices per row, ascending.
    pub selected: Vec<Vec<usize>>,
}

/// Retained count for a row: `round(valid_len · b)` clamped to
/// `[1, valid_len − 1]`, rounding half away from zero.
pub fn budget_to_k(valid_len: usize, budget: f64) -> Result<usize> {
    if !(budget > 0.0 && budget < 1.0) {
        return Err(Error::Budget(format!("budget {budget} outside (0, 1)")));
    }
    if valid_len < 2 {
        return Err(Error::Budget(format!(
            "valid length {valid_len} leaves no room for a proper subset"
        )));
    }
    let k = (valid_len as f64 * budget).round() as usize;
    Ok(k.clamp(1, valid_len - 1))
}

/// Per-row k for a batch.
pub fn budget_to_ks(valid_len: &[usize], budget: f64) -> Result<Vec<usize>> {
    valid_len.iter().map(|&n| budget_to_k(n, budget)).collect()
}

fn row_dims(s: &Tensor) -> Result<(usize, usize)> {
    match s.shape() {
        &[b, n] => Ok((b, n)),
        other => Err(Error::dim("difftopk", other, &[])),
    }
}

fn validate(s: &Tensor, k: &[usize], valid_len: &[usize], soft: bool) -> Result<(usize, usize)> {
    let (b, n) = row_dims(s)?;
    if k.len() != b || valid_len.len() != b {
        return Err(Error::Input(format!(
            "batch of {b} rows with {} budgets and {} valid lengths",
            k.len(),
            valid_len.len()
        )));
    }
    for (row, (&kr, &vr)) in k.iter().zip(valid_len).enumerate() {
        if vr > n {
            return Err(Error::Input(format!(
                "row {row}: valid length {vr} exceeds {n}"
            )));
        }
        let hi = if soft { vr.saturating_sub(1) } else { vr };
        if kr < 1 || kr > hi {
            return Err(Error::Budget(format!(
                "row {row}: k = {kr} outside [1, {hi}] for valid length {vr}"
            )));
        }
        if let Some(bad) = s.data()[row * n..][..vr].iter().find(|x| !x.is_finite()) {
            return Err(Error::Input(format!("row {row}: non-finite score {bad}")));
        }
    }
    Ok((b, n))
}

/// Fixed-count bisection for one row's threshold.
pub fn find_threshold_row(scores: &[f64], k: usize) -> f64 {
    let (min, max) = scores
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| {
            (lo.min(x), hi.max(x))
        });
    let mut lower = -max - BRACKET_PAD;
    let mut upper = -min + BRACKET_PAD;
    let target = k as f64;
    for _ in 0..BISECTION_ITERS {
        let mid = 0.5 * (lower + upper);
        let mass: f64 = scores.iter().map(|&x| sigmoid(x + mid)).sum();
        if mass < target {
            lower = mid;
        } else {
            upper = mid;
        }
    }
    0.5 * (lower + upper)
}

/// Solves the threshold for every row of `s` (`[B, N]`).
pub fn find_threshold(s: &Tensor, k: &[usize], valid_len: &[usize]) -> Result<Vec<f64>> {
    let (b, n) = validate(s, k, valid_len, true)?;
    Ok(par::map_indexed(b, |row| {
        find_threshold_row(&s.data()[row * n..][..valid_len[row]], k[row])
    }))
}

/// Soft mask `σ(s + t)` with padding zeroed. Records nothing on any tape.
pub fn diff_topk_forward(s: &Tensor, k: &[usize], valid_len: &[usize]) -> Result<SoftMaskResult> {
    let threshold = find_threshold(s, k, valid_len)?;
    let n = s.shape()[1];
    let mut mask = Tensor::zeros(s.shape());
    par::for_each_row_mut(mask.data_mut(), n, |row, out| {
        let src = &s.data()[row * n..][..valid_len[row]];
        for (o, &x) in out.iter_mut().zip(src) {
            *o = sigmoid(x + threshold[row]);
        }
    });
    Ok(SoftMaskResult {
        scores: s.clone(),
        threshold,
        mask,
        k: k.to_vec(),
        valid_len: valid_len.to_vec(),
    })
}

/// Implicit-differentiation VJP for a soft mask produced by
/// [`diff_topk_forward`].
pub fn diff_topk_backward(mask: &Tensor, valid_len: &[usize], upstream: &Tensor) -> Result<Tensor> {
    let (b, n) = row_dims(mask)?;
    if upstream.shape() != mask.shape() {
        return Err(Error::dim(
            "diff_topk_backward",
            mask.shape(),
            upstream.shape(),
        ));
    }
    if valid_len.len() != b {
        return Err(Error::Input(
            "valid length count does not match batch".into(),
        ));
    }
    let mut grad = Tensor::zeros(mask.shape());
    par::for_each_row_mut(grad.data_mut(), n, |row, out| {
        let len = valid_len[row];
        let m = &mask.data()[row * n..][..len];
        let g = &upstream.data()[row * n..][..len];
        let (mut v_sum, mut vg_sum) = (0.0, 0.0);
        for (&mi, &gi) in m.iter().zip(g) {
            let v = mi * (1.0 - mi);
            v_sum += v;
            vg_sum += v * gi;
        }
        if v_sum < SATURATION_FLOOR {
            log::warn!("difftopk row {row}: mask saturated, gradient set to zero");
            return;
        }
        let ratio = vg_sum / v_sum;
        for ((o, &mi), &gi) in out.iter_mut().zip(m).zip(g) {
            let v = mi * (1.0 - mi);
            *o = v * gi - ratio * v;
        }
    });
    Ok(grad)
}

/// Binary mask over the k largest valid scores per row; ties go to the
/// lower index.
pub fn hard_topk(s: &Tensor, k: &[usize], valid_len: &[usize]) -> Result<HardMask> {
    let (b, n) = validate(s, k, valid_len, false)?;
    let selected = par::map_indexed(b, |row| {
        top_indices(&s.data()[row * n..][..valid_len[row]], k[row])
    });
    let mut mask = Tensor::zeros(s.shape());
    for (row, sel) in selected.iter().enumerate() {
        for &i in sel {
            mask.data_mut()[row * n + i] = 1.0;
        }
    }
    Ok(HardMask {
        mask,
        k: k.to_vec(),
        selected,
    })
}

/// Indices of the `k` largest entries, returned in ascending index order.
pub fn top_indices(scores: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(k);
    order.sort_unstable();
    order
}

/// Tape operator wrapping the forward/backward pair.
pub struct DiffTopK {
    k: Vec<usize>,
    valid_len: Vec<usize>,
    negate_gradient: bool,
}

impl DiffTopK {
    pub fn new(k: Vec<usize>, valid_len: Vec<usize>) -> Self {
        Self {
            k,
            valid_len,
            negate_gradient: false,
        }
    }

    /// Flips the sign of the backward rule. Exists only so gradient checks
    /// can prove they catch a broken operator.
    #[doc(hidden)]
    pub fn with_negated_gradient(mut self) -> Self {
        self.negate_gradient = true;
        self
    }
}

impl CustomOp for DiffTopK {
    fn name(&self) -> &'static str {
        "diff_topk"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<CustomForward> {
        let r = diff_topk_forward(inputs[0], &self.k, &self.valid_len)?;
        let threshold = Tensor::new([r.threshold.len()], r.threshold)?;
        Ok(CustomForward {
            output: r.mask.clone(),
            saved: vec![r.mask, threshold],
        })
    }

    fn backward(&self, saved: &[Tensor], upstream: &Tensor) -> Vec<Option<Tensor>> {
        let mut g = diff_topk_backward(&saved[0], &self.valid_len, upstream)
            .expect("saved mask matches upstream shape");
        if self.negate_gradient {
            g = g.map(|x| -x);
        }
        vec![Some(g)]
    }
}

/// Applies DiffTopK to a recorded score tensor, returning the mask handle
/// together with the full forward result.
pub fn diff_topk<'t>(
    tape: &'t Tape,
    scores: Var<'t>,
    k: &[usize],
    valid_len: &[usize],
) -> Result<(Var<'t>, SoftMaskResult)> {
    diff_topk_with(tape, scores, DiffTopK::new(k.to_vec(), valid_len.to_vec()))
}

pub fn diff_topk_with<'t>(
    tape: &'t Tape,
    scores: Var<'t>,
    op: DiffTopK,
) -> Result<(Var<'t>, SoftMaskResult)> {
    let (k, valid_len) = (op.k.clone(), op.valid_len.clone());
    let id = tape.register_custom_op(op);
    let (mask, saved) = tape.apply_custom(id, &[scores])?;
    let result = SoftMaskResult {
        scores: (*scores.value()).clone(),
        threshold: saved[1].data().to_vec(),
        mask: saved[0].clone(),
        k,
        valid_len,
    };
    Ok((mask, result))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_difference, relative_error};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn row(s: &[f64]) -> Tensor {
        Tensor::new([1, s.len()], s.to_vec()).unwrap()
    }

    /// Independent scalar root finder: Brent-style bracketing on
    /// f(t) = Σσ(s + t) − k, iterated until the bracket is below `tol`.
    fn oracle_threshold(s: &[f64], k: f64, tol: f64) -> f64 {
        let f = |t: f64| {
            s.iter()
                .map(|&x| 1.0 / (1.0 + (-(x + t)).exp()))
                .sum::<f64>()
                - k
        };
        let (mut a, mut b) = (-100.0, 100.0);
        let (mut fa, mut fb) = (f(a), f(b));
        assert!(fa < 0.0 && fb > 0.0);
        while b - a > tol {
            // secant step, falling back to bisection when it leaves the bracket
            let mut c = b - fb * (b - a) / (fb - fa);
            if !(c > a && c < b) || (c - a).min(b - c) < 0.1 * (b - a) {
                c = 0.5 * (a + b);
            }
            let fc = f(c);
            if fc < 0.0 {
                a = c;
                fa = fc;
            } else {
                b = c;
                fb = fc;
            }
        }
        0.5 * (a + b)
    }

    #[test]
    fn uniform_scores_split_evenly() {
        let r = diff_topk_forward(&row(&[0.0; 4]), &[2], &[4]).unwrap();
        assert!(r.threshold[0].abs() < 1e-12);
        for &m in r.mask.data() {
            assert!((m - 0.5).abs() < 1e-12);
        }
        let r = diff_topk_forward(&row(&[1.3; 10]), &[3], &[10]).unwrap();
        for &m in r.mask.data() {
            assert!((m - 0.3).abs() < 1e-12);
        }
    }

    #[test]
    fn threshold_matches_root_finder_oracle() {
        let s = [2.0, -1.0, 0.5];
        let t = find_threshold(&row(&s), &[1], &[3]).unwrap()[0];
        let expected = oracle_threshold(&s, 1.0, 1e-12);
        assert!((t - expected).abs() < 1e-10, "{t} vs {expected}");
        let r = diff_topk_forward(&row(&s), &[1], &[3]).unwrap();
        for (m, x) in r.mask.data().iter().zip(s) {
            assert!((m - sigmoid(x + expected)).abs() < 1e-10);
        }
        assert!((r.mask.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn uniform_shift_moves_threshold_only() {
        let s = [0.3, -1.2, 2.2, 0.9, -0.4];
        let shifted: Vec<f64> = s.iter().map(|x| x + 7.3).collect();
        let a = diff_topk_forward(&row(&s), &[2], &[5]).unwrap();
        let b = diff_topk_forward(&row(&shifted), &[2], &[5]).unwrap();
        assert!((b.threshold[0] - (a.threshold[0] - 7.3)).abs() < 1e-9);
        for (x, y) in a.mask.data().iter().zip(b.mask.data()) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn saturated_scores_approach_hard_mask() {
        let s: Vec<f64> = [5.0, 4.0, 3.0, 2.0, 1.0].iter().map(|x| x * 10.0).collect();
        let r = diff_topk_forward(&row(&s), &[2], &[5]).unwrap();
        // gaps of 10 put the k-th and (k+1)-th entries at σ(±5), so the
        // distance to the hard mask is σ(−5) ≈ 6.7e-3
        let t = oracle_threshold(&s, 2.0, 1e-12);
        assert!((t + 35.0).abs() < 1e-8);
        for (m, x) in r.mask.data().iter().zip(&s) {
            assert!((m - sigmoid(x + t)).abs() < 1e-12);
        }
        for (m, h) in r.mask.data().iter().zip([1.0, 1.0, 0.0, 0.0, 0.0]) {
            assert!((m - h).abs() < 1e-2);
        }
    }

    #[test]
    fn padding_is_zero_and_unconstrained() {
        let s = Tensor::new([1, 5], vec![0.2, 1.0, -0.5, 9.0, 9.0]).unwrap();
        let r = diff_topk_forward(&s, &[1], &[3]).unwrap();
        assert_eq!(&r.mask.data()[3..], &[0.0, 0.0]);
        assert!((r.mask.data()[..3].iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let g = diff_topk_backward(&r.mask, &[3], &Tensor::ones([1, 5])).unwrap();
        assert_eq!(&g.data()[3..], &[0.0, 0.0]);
    }

    #[test]
    fn budget_errors() {
        let s = row(&[0.0, 1.0, 2.0]);
        assert!(matches!(
            find_threshold(&s, &[3], &[3]),
            Err(Error::Budget(_))
        ));
        assert!(matches!(
            find_threshold(&s, &[0], &[3]),
            Err(Error::Budget(_))
        ));
        assert!(matches!(hard_topk(&s, &[4], &[3]), Err(Error::Budget(_))));
        let bad = row(&[0.0, f64::NAN, 2.0]);
        assert!(matches!(
            find_threshold(&bad, &[1], &[3]),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn symmetric_upstream_is_in_null_space() {
        let m = row(&[0.5, 0.5]);
        let g = diff_topk_backward(&m, &[2], &Tensor::ones([1, 2])).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0]);
    }

    #[test]
    fn saturated_row_yields_zero_gradient() {
        let m = row(&[1.0, 0.0, 0.0]);
        let g = diff_topk_backward(&m, &[3], &row(&[1.0, 2.0, 3.0])).unwrap();
        assert_eq!(g.data(), &[0.0; 3]);
    }

    #[test]
    fn implicit_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let s = Tensor::new([1, 16], (0..16).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
        let g = Tensor::new([1, 16], (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let loss = |x: &Tensor| {
            let r = diff_topk_forward(x, &[5], &[16]).unwrap();
            r.mask
                .data()
                .iter()
                .zip(g.data())
                .map(|(a, b)| a * b)
                .sum::<f64>()
        };
        let r = diff_topk_forward(&s, &[5], &[16]).unwrap();
        let analytic = diff_topk_backward(&r.mask, &[16], &g).unwrap();
        let numeric = central_difference(loss, &s, 1e-6);
        let err = relative_error(&analytic, &numeric);
        assert!(err < 1e-5, "rel err {err:e}");
    }

    #[test]
    fn tape_records_a_single_node() {
        let tape = Tape::new();
        let s =
            tape.param(Tensor::new([2, 6], (0..12).map(|i| (i as f64).sin()).collect()).unwrap());
        let before = tape.len();
        let (m, r) = diff_topk(&tape, s, &[2, 3], &[6, 5]).unwrap();
        assert_eq!(tape.len(), before + 1);
        assert_eq!(tape.labels().last(), Some(&"diff_topk"));
        assert_eq!(*m.value(), r.mask);
        assert_eq!(r.threshold.len(), 2);
    }

    #[test]
    fn budget_rounding_and_clamping() {
        assert_eq!(budget_to_k(100, 0.2).unwrap(), 20);
        assert_eq!(budget_to_k(3, 0.05).unwrap(), 1);
        assert_eq!(budget_to_k(10, 0.25).unwrap(), 3);
        assert_eq!(budget_to_k(48, 0.05).unwrap(), 2);
        assert_eq!(budget_to_k(4, 0.99).unwrap(), 3);
        assert!(budget_to_k(10, 0.0).is_err());
        assert!(budget_to_k(10, 1.0).is_err());
        assert!(budget_to_k(1, 0.5).is_err());
    }

    #[test]
    fn hard_topk_examples() {
        let h = hard_topk(&row(&[1.0, 1.0, 0.0]), &[1], &[3]).unwrap();
        assert_eq!(h.mask.data(), &[1.0, 0.0, 0.0]);
        let h = hard_topk(&row(&[2.0, -1.0, 0.5]), &[2], &[3]).unwrap();
        assert_eq!(h.mask.data(), &[1.0, 0.0, 1.0]);
        assert_eq!(h.selected, vec![vec![0, 2]]);
    }

    fn arb_row() -> impl Strategy<Value = (Vec<f64>, usize)> {
        (4usize..40).prop_flat_map(|n| (prop::collection::vec(-5.0f64..5.0, n), 1..n))
    }

    proptest! {
        #[test]
        fn mass_matches_k((s, k) in arb_row()) {
            let n = s.len();
            let r = diff_topk_forward(&row(&s), &[k], &[n]).unwrap();
            prop_assert!((r.mask.sum() - k as f64).abs() <= 1e-3);
        }

        #[test]
        fn mask_order_follows_score_order((s, k) in arb_row()) {
            let n = s.len();
            let r = diff_topk_forward(&row(&s), &[k], &[n]).unwrap();
            let m = r.mask.data();
            for i in 0..n {
                for j in 0..n {
                    if s[i] > s[j] {
                        prop_assert!(m[i] >= m[j]);
                    }
                }
            }
        }

        #[test]
        fn hard_selection_is_top_of_soft_mask((s, k) in arb_row()) {
            let n = s.len();
            let soft = diff_topk_forward(&row(&s), &[k], &[n]).unwrap();
            let hard = hard_topk(&row(&s), &[k], &[n]).unwrap();
            prop_assert_eq!(&hard.selected[0], &top_indices(soft.mask.data(), k));
        }

        #[test]
        fn jacobian_annihilates_ones((s, k) in arb_row()) {
            let n = s.len();
            let r = diff_topk_forward(&row(&s), &[k], &[n]).unwrap();
            let g = diff_topk_backward(&r.mask, &[n], &Tensor::ones([1, n])).unwrap();
            prop_assert!(g.max_abs() < 1e-12);
        }
    }
}
