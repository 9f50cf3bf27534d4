//! Selection pipeline: score tokens, mask them softly during training or
//! gather the hard top-k at inference, then classify with a frozen
//! mean-pool + MLP backbone.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Tape, Var};
use crate::difftopk::{budget_to_ks, diff_topk, hard_topk, HardMask, SoftMaskResult};
use crate::error::{Error, Result};
use crate::objective::task_loss;
use crate::optim::{AdamW, AdamWConfig, LrSchedule};
use crate::par;
use crate::rng::{stream, Stream};
use crate::scorer::{score, score_on_tape, ScorerParams};
use crate::synth::{Dataset, Sequence, TokenBatch};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};

/// Multiply-accumulate counter for the inference path.
///
/// Pooling is computed as `Σ (1/k)·x`, one MAC per retained feature, so the
/// tally equals `k·D + D·H + H·C` exactly. Bias adds, the ReLU and argmax
/// are not counted.
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct MacTally {
    pub macs: u64,
}

impl MacTally {
    pub fn flops(&self) -> u64 {
        2 * self.macs
    }
}

/// Stand-in for the downstream model: mask-weighted mean pool followed by
/// `relu(x W1 + b1) W2 + b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenBackbone {
    /// `[D, H]`
    pub w1: Tensor,
    /// `[H]`
    pub b1: Tensor,
    /// `[H, C]`
    pub w2: Tensor,
    /// `[C]`
    pub b2: Tensor,
    frozen: bool,
}

impl FrozenBackbone {
    pub fn new(w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor, frozen: bool) -> Result<Self> {
        let ok = w1.rank() == 2
            && w2.rank() == 2
            && b1.shape() == [w1.shape()[1]]
            && w2.shape()[0] == w1.shape()[1]
            && b2.shape() == [w2.shape()[1]];
        if !ok {
            return Err(Error::dim("FrozenBackbone::new", w1.shape(), w2.shape()));
        }
        Ok(Self {
            w1,
            b1,
            w2,
            b2,
            frozen,
        })
    }

    /// He-initialised, unfrozen backbone.
    pub fn init(input_dim: usize, hidden: usize, classes: usize, seed: u64) -> Self {
        let mut rng = stream(seed, Stream::Pretrain, 0);
        let mut normal = |rows: usize, cols: usize| {
            let std = (2.0 / rows as f64).sqrt();
            let data = (0..rows * cols)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    z * std
                })
                .collect();
            Tensor::new([rows, cols], data).expect("sized")
        };
        let w1 = normal(input_dim, hidden);
        let w2 = normal(hidden, classes);
        Self {
            w1,
            b1: Tensor::zeros([hidden]),
            w2,
            b2: Tensor::zeros([classes]),
            frozen: false,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.shape()[0]
    }

    pub fn hidden(&self) -> usize {
        self.w1.shape()[1]
    }

    pub fn classes(&self) -> usize {
        self.w2.shape()[1]
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn params(&self) -> [&Tensor; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    /// Hex SHA-256 over the little-endian parameter bytes.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for p in self.params() {
            for x in p.data() {
                h.update(x.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Logits `[B, C]` for pooled features `[B, D]`.
    pub fn logits(&self, pooled: &Tensor) -> Result<Tensor> {
        let h = pooled.matmul(&self.w1)?;
        let h = add_bias(&h, &self.b1).map(|x| x.max(0.0));
        Ok(add_bias(&h.matmul(&self.w2)?, &self.b2))
    }

    /// Recorded MLP. Weights enter as constants unless `trainable`, in which
    /// case the returned handles can be differentiated.
    pub fn on_tape<'t>(
        &self,
        tape: &'t Tape,
        pooled: Var<'t>,
        trainable: bool,
    ) -> Result<(Var<'t>, [Var<'t>; 4])> {
        let leaf = |t: &Tensor| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        let vars = [
            leaf(&self.w1),
            leaf(&self.b1),
            leaf(&self.w2),
            leaf(&self.b2),
        ];
        let h = pooled.matmul(&vars[0])?.add_bias(&vars[1])?.relu();
        let logits = h.matmul(&vars[2])?.add_bias(&vars[3])?;
        Ok((logits, vars))
    }

    /// Logits for the plain mean of the tokens at `idx` in a row-major
    /// `len × D` feature block; the sequence is physically reduced to
    /// `idx.len()` tokens before anything else runs.
    pub fn classify_tokens(
        &self,
        features: &[f64],
        idx: &[usize],
        tally: &mut MacTally,
    ) -> Vec<f64> {
        let d = self.input_dim();
        let (hn, cn) = (self.hidden(), self.classes());
        let inv = 1.0 / idx.len() as f64;
        let mut pooled = vec![0.0; d];
        for &i in idx {
            for (p, x) in pooled.iter_mut().zip(&features[i * d..][..d]) {
                *p += inv * x;
            }
        }
        let mut hidden = vec![0.0; hn];
        for (l, &p) in pooled.iter().enumerate() {
            for (h, w) in hidden.iter_mut().zip(&self.w1.data()[l * hn..][..hn]) {
                *h += p * w;
            }
        }
        for (h, b) in hidden.iter_mut().zip(self.b1.data()) {
            *h = (*h + b).max(0.0);
        }
        let mut logits = vec![0.0; cn];
        for (l, &h) in hidden.iter().enumerate() {
            for (o, w) in logits.iter_mut().zip(&self.w2.data()[l * cn..][..cn]) {
                *o += h * w;
            }
        }
        for (o, b) in logits.iter_mut().zip(self.b2.data()) {
            *o += b;
        }
        tally.macs += (idx.len() * d + d * hn + hn * cn) as u64;
        logits
    }

    /// Logits using every token of the sequence.
    pub fn classify_full(&self, seq: &Sequence) -> Vec<f64> {
        let idx: Vec<usize> = (0..seq.len(self.input_dim())).collect();
        self.classify_tokens(&seq.features, &idx, &mut MacTally::default())
    }
}

fn add_bias(x: &Tensor, b: &Tensor) -> Tensor {
    let width = b.numel();
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(width) {
        for (o, bv) in row.iter_mut().zip(b.data()) {
            *o += bv;
        }
    }
    out
}

pub fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| {
            if v > bv {
                (i, v)
            } else {
                (bi, bv)
            }
        })
        .0
}

/// Recorded training-path forward.
pub struct TrainForward<'t> {
    pub logits: Var<'t>,
    pub mask: Var<'t>,
    pub w_q: Var<'t>,
    pub w_k: Var<'t>,
    pub selection: SoftMaskResult,
    pub hard: HardMask,
}

fn check_backbone(batch: &TokenBatch, backbone: &FrozenBackbone) -> Result<()> {
    if !backbone.is_frozen() {
        return Err(Error::Config(
            "backbone must be frozen before scorer training".into(),
        ));
    }
    if batch.feature_dim() != backbone.input_dim() {
        return Err(Error::dim("pipeline", batch.v.shape(), backbone.w1.shape()));
    }
    Ok(())
}

/// Soft-mask forward: scores → DiffTopK → mask-weighted mean pool → MLP.
/// Only the scorer projections are tape parameters.
pub fn forward_train<'t>(
    tape: &'t Tape,
    batch: &TokenBatch,
    scorer: &ScorerParams,
    backbone: &FrozenBackbone,
    budget: f64,
) -> Result<TrainForward<'t>> {
    check_backbone(batch, backbone)?;
    let ks = budget_to_ks(&batch.valid_len, budget)?;
    let v = tape.constant(batch.v.clone());
    let w_q = tape.param(scorer.w_q.clone());
    let w_k = tape.param(scorer.w_k.clone());
    let s = score_on_tape(tape, v, w_q, w_k, &batch.valid_len)?;
    let hard = hard_topk(&s.value(), &ks, &batch.valid_len)?;
    let (mask, selection) = diff_topk(tape, s, &ks, &batch.valid_len)?;
    let logits = soft_pool_logits(tape, v, mask, backbone)?;
    Ok(TrainForward {
        logits,
        mask,
        w_q,
        w_k,
        selection,
        hard,
    })
}

/// `Σ_i M_i V_i / Σ_i M_i` through the frozen MLP.
pub fn soft_pool_logits<'t>(
    tape: &'t Tape,
    v: Var<'t>,
    mask: Var<'t>,
    backbone: &FrozenBackbone,
) -> Result<Var<'t>> {
    let (b, n, d) = match v.shape()[..] {
        [b, n, d] => (b, n, d),
        _ => return Err(Error::dim("soft_pool", &v.shape(), &[])),
    };
    let weighted = mask.reshape([b, 1, n])?.matmul(&v)?.reshape([b, d])?;
    let pooled = weighted.div_rows(&mask.sum_axis(1)?)?;
    Ok(backbone.on_tape(tape, pooled, false)?.0)
}

/// Tape-free inference output.
#[derive(Debug, Clone)]
pub struct InferOutput {
    /// `[B, C]`
    pub logits: Tensor,
    pub scores: Tensor,
    pub hard: HardMask,
    pub tally: MacTally,
}

/// Hard-mask forward: scores → top-k → gather k tokens → plain mean → MLP.
pub fn forward_infer(
    batch: &TokenBatch,
    scorer: &ScorerParams,
    backbone: &FrozenBackbone,
    budget: f64,
) -> Result<InferOutput> {
    check_backbone(batch, backbone)?;
    let ks = budget_to_ks(&batch.valid_len, budget)?;
    let scores = score(&batch.v, scorer, &batch.valid_len)?;
    let hard = hard_topk(&scores, &ks, &batch.valid_len)?;
    let (logits, tally) = classify_selected(batch, &hard.selected, backbone)?;
    Ok(InferOutput {
        logits,
        scores,
        hard,
        tally,
    })
}

/// Runs the backbone on an arbitrary per-row selection of a batch.
pub fn classify_selected(
    batch: &TokenBatch,
    selected: &[Vec<usize>],
    backbone: &FrozenBackbone,
) -> Result<(Tensor, MacTally)> {
    if selected.len() != batch.batch_size() {
        return Err(Error::Input(format!(
            "{} selections for a batch of {}",
            selected.len(),
            batch.batch_size()
        )));
    }
    let (n, d) = (batch.max_len(), batch.feature_dim());
    let rows = par::map_slice(selected, |b, idx| {
        let mut tally = MacTally::default();
        let row = &batch.v.data()[b * n * d..][..n * d];
        (backbone.classify_tokens(row, idx, &mut tally), tally.macs)
    });
    let macs = rows.iter().map(|r| r.1).sum();
    let data = rows.into_iter().flat_map(|r| r.0).collect();
    Ok((
        Tensor::new([selected.len(), backbone.classes()], data)?,
        MacTally { macs },
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub hidden: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub min_accuracy: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            hidden: 64,
            batch_size: 64,
            lr: 5e-3,
            min_accuracy: 0.95,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.batch_size == 0 || !(self.lr > 0.0) {
            return Err(Error::Config(format!("invalid pretrain config {self:?}")));
        }
        if !(0.0..=1.0).contains(&self.min_accuracy) {
            return Err(Error::Config("min_accuracy must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub val_accuracy: f64,
    pub final_loss: f64,
    pub steps: u64,
}

fn mean_pooled(seqs: &[Sequence], d: usize) -> Result<Tensor> {
    let rows = par::map_slice(seqs, |_, s| {
        let n = s.len(d);
        let mut p = vec![0.0; d];
        for t in s.features.chunks(d) {
            for (a, x) in p.iter_mut().zip(t) {
                *a += x;
            }
        }
        p.iter_mut().for_each(|a| *a /= n as f64);
        p
    });
    Tensor::new([seqs.len(), d], rows.concat())
}

/// Full-token accuracy of `backbone` on `seqs`.
pub fn full_token_accuracy(backbone: &FrozenBackbone, seqs: &[Sequence]) -> f64 {
    if seqs.is_empty() {
        return 0.0;
    }
    let hits = par::map_slice(seqs, |_, s| argmax(&backbone.classify_full(s)) == s.label);
    hits.iter().filter(|&&h| h).count() as f64 / seqs.len() as f64
}

/// Trains the backbone on full-token means of the training split, checks
/// validation accuracy against `min_accuracy`, and freezes it.
pub fn pretrain_backbone(
    data: &Dataset,
    cfg: &PretrainConfig,
) -> Result<(FrozenBackbone, PretrainReport)> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(Error::Input("empty training split".into()));
    }
    let d = data.spec.feature_dim;
    let mut bb = FrozenBackbone::init(d, cfg.hidden, data.spec.classes, cfg.seed);
    let pooled = mean_pooled(&data.train, d)?;
    let labels: Vec<usize> = data.train.iter().map(|s| s.label).collect();

    let n = data.train.len();
    let per_epoch = n.div_ceil(cfg.batch_size) as u64;
    let total = (per_epoch * cfg.epochs as u64).max(1);
    let sched = LrSchedule::new(cfg.lr, 0.0, total)?;
    let mut opt = AdamW::new(AdamWConfig::default(), &bb.params());
    let mut order: Vec<usize> = (0..n).collect();
    let (mut step, mut last_loss) = (0u64, f64::NAN);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut stream(cfg.seed, Stream::Pretrain, 1 + epoch as u64));
        for chunk in order.chunks(cfg.batch_size) {
            let x: Vec<f64> = chunk
                .iter()
                .flat_map(|&i| pooled.data()[i * d..][..d].iter().copied())
                .collect();
            let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let tape = Tape::new();
            let xv = tape.constant(Tensor::new([chunk.len(), d], x)?);
            let (logits, vars) = bb.on_tape(&tape, xv, true)?;
            let loss = task_loss(logits, &y)?;
            last_loss = loss.value().item();
            let grads = tape.backward(loss)?;
            let g: Vec<Tensor> = vars.iter().map(|&v| grads.wrt(v)).collect();
            let FrozenBackbone { w1, b1, w2, b2, .. } = &mut bb;
            opt.step(&mut [w1, b1, w2, b2], &g, sched.at(step))?;
            step += 1;
        }
        log::debug!("pretrain epoch {epoch}: loss {last_loss:.4}");
    }
    let val_accuracy = full_token_accuracy(&bb, &data.val);
    log::info!("pretrained backbone: val accuracy {val_accuracy:.4}");
    if val_accuracy < cfg.min_accuracy {
        return Err(Error::Pretrain {
            accuracy: val_accuracy,
            required: cfg.min_accuracy,
        });
    }
    bb.freeze();
    Ok((
        bb,
        PretrainReport {
            val_accuracy,
            final_loss: last_loss,
            steps: step,
        },
    ))
}
