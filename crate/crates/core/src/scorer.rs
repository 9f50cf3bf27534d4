//! Learnable importance scorer.
//!
//! Two bias-free projections `Q = V·W_q`, `K = V·W_k`, an interaction
//! matrix `A = Q·Kᵀ/√d`, and a per-token score equal to the row mean of `A`
//! over the valid tokens (self-interaction included). Padded positions get
//! [`PAD_SCORE`] so they never win a selection.

use rand_distr::{Distribution, Normal};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::{self, Stream};
use crate::tensor::Tensor;

pub const INIT_STD: f64 = 1e-4;
pub const PAD_SCORE: f64 = -1e9;

#[derive(Debug, Clone, PartialEq)]
pub struct ScorerParams {
    pub w_q: Tensor,
    pub w_k: Tensor,
}

impl ScorerParams {
    pub fn new(w_q: Tensor, w_k: Tensor) -> Result<Self> {
        if w_q.rank() != 2 || w_q.shape() != w_k.shape() {
            return Err(Error::dim("ScorerParams", w_q.shape(), w_k.shape()));
        }
        Ok(Self { w_q, w_k })
    }

    pub fn input_dim(&self) -> usize {
        self.w_q.shape()[0]
    }

    pub fn proj_dim(&self) -> usize {
        self.w_q.shape()[1]
    }

    pub fn param_count(&self) -> usize {
        self.w_q.numel() + self.w_k.numel()
    }
}

pub fn param_count(input_dim: usize, proj_dim: usize) -> usize {
    2 * input_dim * proj_dim
}

/// Near-zero Gaussian initialisation, `N(0, INIT_STD²)`.
pub fn init_scorer(input_dim: usize, proj_dim: usize, seed: u64) -> Result<ScorerParams> {
    if input_dim == 0 || proj_dim == 0 {
        return Err(Error::Config("scorer dimensions must be positive".into()));
    }
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    let mut rng = rng::stream(seed, Stream::Init, 0);
    let mut draw = || {
        let data = (0..input_dim * proj_dim)
            .map(|_| normal.sample(&mut rng))
            .collect();
        Tensor::new([input_dim, proj_dim], data).expect("sized buffer")
    };
    let w_q = draw();
    let w_k = draw();
    ScorerParams::new(w_q, w_k)
}

/// Constant tensors that implement the valid-region averaging.
struct Masks {
    /// `[B, N, N]`: 1 where column j is valid.
    columns: Tensor,
    /// `[B, N]`: 1/n_valid on valid rows, 0 on padding.
    inv_count: Tensor,
    /// `[B, N]`: 0 on valid rows, PAD_SCORE on padding.
    pad: Tensor,
}

fn masks(batch: usize, n: usize, valid_len: &[usize]) -> Result<Masks> {
    if valid_len.len() != batch {
        return Err(Error::Input(format!(
            "{} valid lengths for batch of {batch}",
            valid_len.len()
        )));
    }
    let mut columns = vec![0.0; batch * n * n];
    let mut inv_count = vec![0.0; batch * n];
    let mut pad = vec![PAD_SCORE; batch * n];
    for (b, &len) in valid_len.iter().enumerate() {
        if len == 0 || len > n {
            return Err(Error::Input(format!(
                "row {b}: valid length {len} not in [1, {n}]"
            )));
        }
        for i in 0..n {
            columns[(b * n + i) * n..][..len].fill(1.0);
        }
        inv_count[b * n..][..len].fill(1.0 / len as f64);
        pad[b * n..][..len].fill(0.0);
    }
    Ok(Masks {
        columns: Tensor::new([batch, n, n], columns)?,
        inv_count: Tensor::new([batch, n], inv_count)?,
        pad: Tensor::new([batch, n], pad)?,
    })
}

fn check_input(v: &[usize], params_dim: usize) -> Result<(usize, usize)> {
    match v {
        &[b, n, d] if d == params_dim => Ok((b, n)),
        _ => Err(Error::dim("score", v, &[params_dim])),
    }
}

/// Scores `[B, N]` for tokens `V: [B, N, D]` without recording a tape.
pub fn score(v: &Tensor, params: &ScorerParams, valid_len: &[usize]) -> Result<Tensor> {
    let (b, n) = check_input(v.shape(), params.input_dim())?;
    let masks = masks(b, n, valid_len)?;
    let scale = 1.0 / (params.proj_dim() as f64).sqrt();
    let q = v.matmul(&params.w_q)?;
    let k = v.matmul(&params.w_k)?;
    let a = q.matmul(&k.transpose_last2()?)?.map(|x| x * scale);
    let s = a
        .zip_map(&masks.columns, |x, m| x * m)?
        .sum_axis(2)?
        .zip_map(&masks.inv_count, |x, c| x * c)?
        .zip_map(&masks.pad, |x, p| x + p)?;
    Ok(s)
}

/// Same scores as [`score`] in `O(N·D·d)`: the row mean of `QKᵀ` equals
/// `qᵢ · k̄` where `k̄` is the mean key over valid tokens.
pub fn score_fast(v: &Tensor, params: &ScorerParams, valid_len: &[usize]) -> Result<Tensor> {
    let (b, n) = check_input(v.shape(), params.input_dim())?;
    if valid_len.len() != b {
        return Err(Error::Input(format!(
            "{} valid lengths for batch of {b}",
            valid_len.len()
        )));
    }
    let p = params.proj_dim();
    let scale = 1.0 / (p as f64).sqrt();
    let q = v.matmul(&params.w_q)?;
    let k = v.matmul(&params.w_k)?;
    let mut out = vec![PAD_SCORE; b * n];
    for (row, &len) in valid_len.iter().enumerate() {
        if len == 0 || len > n {
            return Err(Error::Input(format!(
                "row {row}: valid length {len} not in [1, {n}]"
            )));
        }
        let mut kbar = vec![0.0; p];
        for j in 0..len {
            for (acc, x) in kbar.iter_mut().zip(&k.data()[(row * n + j) * p..][..p]) {
                *acc += x;
            }
        }
        for i in 0..len {
            let qi = &q.data()[(row * n + i) * p..][..p];
            let dot: f64 = qi.iter().zip(&kbar).map(|(a, c)| a * c).sum();
            out[row * n + i] = dot * scale / len as f64;
        }
    }
    Tensor::new([b, n], out)
}

/// Recorded version of [`score`]; bitwise-identical values.
pub fn score_on_tape<'t>(
    tape: &'t Tape,
    v: Var<'t>,
    w_q: Var<'t>,
    w_k: Var<'t>,
    valid_len: &[usize],
) -> Result<Var<'t>> {
    let d = w_q.shape();
    let (b, n) = check_input(&v.shape(), d[0])?;
    let masks = masks(b, n, valid_len)?;
    let scale = 1.0 / (d[1] as f64).sqrt();
    let q = v.matmul(&w_q)?;
    let k = v.matmul(&w_k)?;
    let a = q.matmul(&k.transpose_last2()?)?.scale(scale);
    a.mul(&tape.constant(masks.columns))?
        .sum_axis(2)?
        .mul(&tape.constant(masks.inv_count))?
        .add(&tape.constant(masks.pad))
}
