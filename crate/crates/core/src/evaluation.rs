//! Selector evaluation, budget sweeps, the FLOP model, wall-clock
//! benchmarking and score dumps.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::difftopk::{budget_to_k, diff_topk_forward, top_indices};
use crate::error::{Error, Result};
use crate::par;
use crate::pipeline::{argmax, full_token_accuracy, FrozenBackbone, MacTally};
use crate::rng::{stream, Stream};
use crate::scorer::{score, score_fast, ScorerParams};
use crate::synth::{generate, oracle_indices, Sequence, TaskSpec, TokenBatch};
use crate::tensor::Tensor;

pub const DEFAULT_BUDGETS: [f64; 4] = [0.05, 0.1, 0.2, 0.3];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Selector {
    Learned,
    Random,
    Norm,
    Oracle,
}

impl Selector {
    pub const ALL: [Selector; 4] = [Self::Learned, Self::Random, Self::Norm, Self::Oracle];

    pub fn name(self) -> &'static str {
        match self {
            Self::Learned => "learned",
            Self::Random => "random",
            Self::Norm => "norm",
            Self::Oracle => "oracle",
        }
    }
}

impl fmt::Display for Selector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Selector {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown selector {s:?}")))
    }
}

/// Analytic inference FLOPs for one sequence: pooling `2·n_kept·D` plus the
/// MLP `2·(D·H + H·C)`. Bias adds and activations are not counted.
pub fn flop_count(n_kept: usize, input_dim: usize, hidden: usize, classes: usize) -> u64 {
    2 * (n_kept * input_dim + input_dim * hidden + hidden * classes) as u64
}

/// One (selector, budget) cell of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub selector: Selector,
    pub budget: f64,
    pub accuracy: f64,
    pub retention: f64,
    pub recall: f64,
    pub precision: f64,
    /// Mean |soft − hard| over valid positions; learned selector only.
    pub soft_hard_gap: Option<f64>,
    pub tokens_kept: u64,
    pub flops: u64,
    pub flops_measured: u64,
    /// Wall-clock for the whole cell; only filled when timing is enabled.
    pub forward_ms: Option<f64>,
}

/// Everything an evaluation cell reads.
pub struct EvalSetup<'a> {
    pub seqs: &'a [Sequence],
    pub backbone: &'a FrozenBackbone,
    pub scorer: Option<&'a ScorerParams>,
    pub seed: u64,
    pub full_accuracy: f64,
    pub timing: bool,
}

impl<'a> EvalSetup<'a> {
    pub fn new(
        seqs: &'a [Sequence],
        backbone: &'a FrozenBackbone,
        scorer: Option<&'a ScorerParams>,
        seed: u64,
    ) -> Self {
        Self {
            seqs,
            backbone,
            scorer,
            seed,
            full_accuracy: full_token_accuracy(backbone, seqs),
            timing: false,
        }
    }
}

struct SeqResult {
    correct: bool,
    hits: usize,
    k: usize,
    m: usize,
    macs: u64,
    gap: Option<(f64, usize)>,
}

fn budget_key(budget: f64) -> u64 {
    (budget * 1e9).round() as u64
}

/// Selected indices (ascending) and, for the learned selector, the summed
/// soft/hard gap with its position count.
type Selection = (Vec<usize>, Option<(f64, usize)>);

fn select(
    setup: &EvalSetup<'_>,
    selector: Selector,
    budget: f64,
    index: usize,
    seq: &Sequence,
    k: usize,
) -> Result<Selection> {
    let d = setup.backbone.input_dim();
    let n = seq.len(d);
    Ok(match selector {
        Selector::Learned => {
            let scorer = setup.scorer.expect("checked by caller");
            let batch = TokenBatch::from_sequences(&[seq], d)?;
            let s = score(&batch.v, scorer, &batch.valid_len)?;
            let sel = top_indices(s.data(), k);
            let gap = if k < n {
                let soft = diff_topk_forward(&s, &[k], &[n])?;
                let mut gap = 0.0;
                for (i, m) in soft.mask.data().iter().enumerate() {
                    let h = if sel.binary_search(&i).is_ok() {
                        1.0
                    } else {
                        0.0
                    };
                    gap += (m - h).abs();
                }
                Some((gap, n))
            } else {
                None
            };
            (sel, gap)
        }
        Selector::Random => {
            let mut rng = stream(
                setup.seed,
                Stream::Eval,
                (budget_key(budget) << 24) ^ index as u64,
            );
            let mut sel = sample(&mut rng, n, k).into_vec();
            sel.sort_unstable();
            (sel, None)
        }
        Selector::Norm => {
            let norms: Vec<f64> = seq
                .features
                .chunks(d)
                .map(|t| t.iter().map(|x| x * x).sum::<f64>().sqrt())
                .collect();
            (top_indices(&norms, k), None)
        }
        Selector::Oracle => (oracle_indices(&seq.signal_idx, n, k), None),
    })
}

/// Hard-selection accuracy and selection quality of one selector at one
/// budget over `setup.seqs`.
pub fn evaluate(setup: &EvalSetup<'_>, selector: Selector, budget: f64) -> Result<EvalRow> {
    if selector == Selector::Learned && setup.scorer.is_none() {
        return Err(Error::Config(
            "learned selector needs a trained scorer".into(),
        ));
    }
    if setup.seqs.is_empty() {
        return Err(Error::Input("no sequences to evaluate".into()));
    }
    let d = setup.backbone.input_dim();
    let start = Instant::now();
    let results = par::map_slice(setup.seqs, |i, seq| -> Result<SeqResult> {
        let n = seq.len(d);
        let k = budget_to_k(n, budget)?;
        let (sel, gap) = select(setup, selector, budget, i, seq, k)?;
        let mut tally = MacTally::default();
        let logits = setup
            .backbone
            .classify_tokens(&seq.features, &sel, &mut tally);
        let hits = sel.iter().filter(|i| seq.signal_idx.contains(i)).count();
        Ok(SeqResult {
            correct: argmax(&logits) == seq.label,
            hits,
            k,
            m: seq.signal_idx.len(),
            macs: tally.macs,
            gap,
        })
    });
    let elapsed = start.elapsed();
    let results = results.into_iter().collect::<Result<Vec<_>>>()?;

    let count = results.len() as f64;
    let accuracy = results.iter().filter(|r| r.correct).count() as f64 / count;
    let recall = results
        .iter()
        .map(|r| r.hits as f64 / r.m.min(r.k).max(1) as f64)
        .sum::<f64>()
        / count;
    let precision = results
        .iter()
        .map(|r| r.hits as f64 / r.k as f64)
        .sum::<f64>()
        / count;
    let gaps: Vec<(f64, usize)> = results.iter().filter_map(|r| r.gap).collect();
    let soft_hard_gap = (!gaps.is_empty()).then(|| {
        gaps.iter().map(|g| g.0).sum::<f64>() / gaps.iter().map(|g| g.1).sum::<usize>() as f64
    });
    let bb = setup.backbone;
    Ok(EvalRow {
        selector,
        budget,
        accuracy,
        retention: if setup.full_accuracy > 0.0 {
            accuracy / setup.full_accuracy
        } else {
            0.0
        },
        recall,
        precision,
        soft_hard_gap,
        tokens_kept: results.iter().map(|r| r.k as u64).sum(),
        flops: results
            .iter()
            .map(|r| flop_count(r.k, d, bb.hidden(), bb.classes()))
            .sum(),
        flops_measured: 2 * results.iter().map(|r| r.macs).sum::<u64>(),
        forward_ms: setup.timing.then_some(elapsed.as_secs_f64() * 1e3),
    })
}

/// Full sweep report with the full-token reference accuracy and an echo
/// of the configuration that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub full_accuracy: f64,
    pub rows: Vec<EvalRow>,
    #[serde(default)]
    pub config: serde_json::Value,
}

impl SweepReport {
    pub fn row(&self, selector: Selector, budget: f64) -> Option<&EvalRow> {
        self.rows
            .iter()
            .find(|r| r.selector == selector && budget_key(r.budget) == budget_key(budget))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in &self.rows {
            w.serialize(row)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Input(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    /// Writes `<stem>.json` and `<stem>.csv`.
    pub fn save(&self, stem: &Path) -> Result<()> {
        let json = stem.with_extension("json");
        std::fs::write(&json, self.to_json()?).map_err(|e| Error::io(&json, e))?;
        let csv = stem.with_extension("csv");
        std::fs::write(&csv, self.to_csv()?).map_err(|e| Error::io(&csv, e))
    }
}

/// Evaluates every selector at every budget. Cells run in parallel.
pub fn budget_sweep(
    setup: &EvalSetup<'_>,
    selectors: &[Selector],
    budgets: &[f64],
) -> Result<SweepReport> {
    if let Some(b) = budgets.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
        return Err(Error::Budget(format!("sweep budget {b} outside (0, 1)")));
    }
    let cells: Vec<(Selector, f64)> = selectors
        .iter()
        .flat_map(|&s| budgets.iter().map(move |&b| (s, b)))
        .collect();
    let rows = par::map_slice(&cells, |_, &(s, b)| evaluate(setup, s, b));
    Ok(SweepReport {
        full_accuracy: setup.full_accuracy,
        rows: rows.into_iter().collect::<Result<_>>()?,
        config: serde_json::Value::Null,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimingStats {
    pub median_ms: f64,
    pub iqr_ms: f64,
}

impl TimingStats {
    pub fn from_samples(samples: &[f64]) -> Self {
        let mut s = samples.to_vec();
        s.sort_by(f64::total_cmp);
        let q = |p: f64| {
            let pos = p * (s.len() - 1) as f64;
            let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
            s[lo] + (s[hi] - s[lo]) * (pos - lo as f64)
        };
        Self {
            median_ms: q(0.5),
            iqr_ms: q(0.75) - q(0.25),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub seq_len: usize,
    pub kept: usize,
    pub sequences: usize,
    pub repeats: usize,
    /// Backbone on every token.
    pub full: TimingStats,
    /// Backbone on the gathered `kept` tokens.
    pub pruned: TimingStats,
    /// Scoring plus top-k, reported separately from the backbone.
    pub selection: TimingStats,
    pub speedup: f64,
    pub end_to_end_speedup: f64,
    pub flops_full: u64,
    pub flops_pruned: u64,
    pub token_flop_ratio: f64,
}

/// Bench task: every sequence has exactly `seq_len` tokens.
pub fn bench_spec(seq_len: usize, feature_dim: usize, classes: usize) -> TaskSpec {
    TaskSpec {
        n_min: seq_len,
        n_max: seq_len,
        feature_dim,
        classes,
        ..TaskSpec::default()
    }
}

fn time_ms(f: impl FnOnce()) -> f64 {
    let start = Instant::now();
    f();
    start.elapsed().as_secs_f64() * 1e3
}

/// Times the inference path on `sequences` sequences of `seq_len` tokens:
/// backbone over all tokens vs over the hard-selected `k`, plus the
/// selection step on its own. Runs sequentially so the numbers measure
/// work, not scheduling.
pub fn bench_forward(
    backbone: &FrozenBackbone,
    scorer: &ScorerParams,
    budget: f64,
    seq_len: usize,
    sequences: usize,
    repeats: usize,
    seed: u64,
) -> Result<BenchReport> {
    if repeats < 10 {
        return Err(Error::Config(format!(
            "bench needs at least 10 repeats, got {repeats}"
        )));
    }
    let d = backbone.input_dim();
    let spec = bench_spec(seq_len, d, backbone.classes());
    let seqs = generate(&spec, sequences, seed)?;
    let k = budget_to_k(seq_len, budget)?;
    let all: Vec<usize> = (0..seq_len).collect();

    let batches: Vec<TokenBatch> = seqs
        .iter()
        .map(|s| TokenBatch::from_sequences(&[s], d))
        .collect::<Result<_>>()?;
    let run_select = || -> Result<Vec<Vec<usize>>> {
        batches
            .iter()
            .map(|b| {
                Ok(top_indices(
                    score_fast(&b.v, scorer, &b.valid_len)?.data(),
                    k,
                ))
            })
            .collect()
    };
    let selected = par::with_mode(par::ExecMode::Sequential, run_select)?;
    let run_backbone = |pick: &dyn Fn(usize) -> Vec<usize>| {
        let mut sink = 0.0;
        let mut tally = MacTally::default();
        for (i, s) in seqs.iter().enumerate() {
            let idx = pick(i);
            let gathered: Vec<f64> = idx
                .iter()
                .flat_map(|&t| s.token(t, d).iter().copied())
                .collect();
            let local: Vec<usize> = (0..idx.len()).collect();
            sink += backbone.classify_tokens(&gathered, &local, &mut tally)[0];
        }
        std::hint::black_box(sink);
    };

    let (mut full, mut pruned, mut selection) = (Vec::new(), Vec::new(), Vec::new());
    par::with_mode(par::ExecMode::Sequential, || -> Result<()> {
        for _ in 0..repeats {
            full.push(time_ms(|| run_backbone(&|_| all.clone())));
            pruned.push(time_ms(|| run_backbone(&|i| selected[i].clone())));
            let mut out = Ok(Vec::new());
            selection.push(time_ms(|| out = run_select()));
            std::hint::black_box(out?);
        }
        Ok(())
    })?;
    let (full, pruned, selection) = (
        TimingStats::from_samples(&full),
        TimingStats::from_samples(&pruned),
        TimingStats::from_samples(&selection),
    );
    let (h, c) = (backbone.hidden(), backbone.classes());
    Ok(BenchReport {
        seq_len,
        kept: k,
        sequences,
        repeats,
        full,
        pruned,
        selection,
        speedup: full.median_ms / pruned.median_ms,
        end_to_end_speedup: full.median_ms / (pruned.median_ms + selection.median_ms),
        flops_full: flop_count(seq_len, d, h, c),
        flops_pruned: flop_count(k, d, h, c),
        token_flop_ratio: (2 * k * d) as f64 / (2 * seq_len * d) as f64,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub seq_id: usize,
    pub token_index: usize,
    pub score: f64,
    pub soft_mask: f64,
    pub hard_selected: u8,
    pub is_signal: u8,
}

/// Per-token scores, soft mask and hard selection at `budget`.
pub fn score_records(
    scorer: &ScorerParams,
    seqs: &[Sequence],
    budget: f64,
) -> Result<Vec<ScoreRecord>> {
    let d = scorer.input_dim();
    let per_seq = par::map_slice(seqs, |id, seq| -> Result<Vec<ScoreRecord>> {
        let b = TokenBatch::from_sequences(&[seq], d)?;
        let n = b.valid_len[0];
        let k = budget_to_k(n, budget)?;
        let s = score(&b.v, scorer, &b.valid_len)?;
        let soft = diff_topk_forward(&s, &[k], &[n])?;
        let sel = top_indices(s.data(), k);
        Ok((0..n)
            .map(|i| ScoreRecord {
                seq_id: id,
                token_index: i,
                score: s.data()[i],
                soft_mask: soft.mask.data()[i],
                hard_selected: u8::from(sel.binary_search(&i).is_ok()),
                is_signal: u8::from(seq.signal_idx.contains(&i)),
            })
            .collect())
    });
    Ok(per_seq.into_iter().collect::<Result<Vec<_>>>()?.concat())
}

pub fn dump_scores(
    scorer: &ScorerParams,
    seqs: &[Sequence],
    budget: f64,
    path: &Path,
) -> Result<()> {
    let records = score_records(scorer, seqs, budget)?;
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    for r in &records {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_scores(path: &Path) -> Result<Vec<ScoreRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// Mean score of signal tokens minus mean score of the rest.
pub fn signal_score_margin(records: &[ScoreRecord]) -> f64 {
    let mean = |sig: u8| {
        let v: Vec<f64> = records
            .iter()
            .filter(|r| r.is_signal == sig)
            .map(|r| r.score)
            .collect();
        v.iter().sum::<f64>() / v.len().max(1) as f64
    };
    mean(1) - mean(0)
}

/// Convenience: scores as a `[1, n]` tensor for one sequence.
pub fn sequence_scores(scorer: &ScorerParams, seq: &Sequence) -> Result<Tensor> {
    let b = TokenBatch::from_sequences(&[seq], scorer.input_dim())?;
    score(&b.v, scorer, &b.valid_len)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::par::{with_mode, ExecMode};
    use crate::scorer::init_scorer;
    use crate::synth::Dataset;

    fn fixture() -> (Dataset, FrozenBackbone) {
        let spec = TaskSpec {
            n_min: 20,
            n_max: 30,
            feature_dim: 8,
            classes: 3,
            signal_tokens: 4,
            sink_count: 3,
            ..TaskSpec::default()
        };
        let data = Dataset::generate(&spec, 8, 400).unwrap();
        let mut bb = FrozenBackbone::init(8, 6, 3, 2);
        bb.freeze();
        (data, bb)
    }

    #[test]
    fn flop_model() {
        assert_eq!(flop_count(10, 4, 3, 2), 2 * (40 + 12 + 6));
        let pool = |n| flop_count(n, 32, 64, 4) - flop_count(0, 32, 64, 4);
        assert_eq!(pool(100), 2 * pool(50));
        let (data, bb) = fixture();
        let setup = EvalSetup::new(&data.val, &bb, None, 0);
        for b in [0.1, 0.5, 0.9] {
            let row = evaluate(&setup, Selector::Random, b).unwrap();
            assert_eq!(row.flops, row.flops_measured);
        }
    }

    #[test]
    fn oracle_recall_is_one_when_k_covers_signal() {
        let (data, bb) = fixture();
        let setup = EvalSetup::new(&data.val, &bb, None, 0);
        let row = evaluate(&setup, Selector::Oracle, 0.3).unwrap();
        assert_eq!(row.recall, 1.0);
        let low = evaluate(&setup, Selector::Oracle, 0.05).unwrap();
        assert_eq!(low.recall, 1.0);
        assert_eq!(low.precision, 1.0);
    }

    #[test]
    fn random_recall_is_binomial() {
        let (data, bb) = fixture();
        let setup = EvalSetup::new(&data.val, &bb, None, 3);
        let b = 0.5;
        let row = evaluate(&setup, Selector::Random, b).unwrap();
        // Per sequence, hits ~ hypergeometric(n, m, k) with k >= m; recall
        // is hits / m, expectation k / n.
        let mut mean = 0.0;
        let mut var = 0.0;
        for s in &data.val {
            let n = s.len(8) as f64;
            let k = budget_to_k(s.len(8), b).unwrap() as f64;
            let m = s.signal_idx.len() as f64;
            let p = k / n;
            mean += p;
            var += m * p * (1.0 - p) * (n - k) / (n - 1.0) / (m * m);
        }
        let count = data.val.len() as f64;
        let (mean, sd) = (mean / count, var.sqrt() / count);
        assert!(
            (row.recall - mean).abs() <= 3.0 * sd,
            "{} vs {mean} ± {sd}",
            row.recall
        );
    }

    #[test]
    fn learned_requires_scorer() {
        let (data, bb) = fixture();
        let setup = EvalSetup::new(&data.val, &bb, None, 0);
        assert!(matches!(
            evaluate(&setup, Selector::Learned, 0.2),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn sweep_is_reproducible_across_modes() {
        let (data, bb) = fixture();
        let sc = init_scorer(8, 4, 1).unwrap();
        let setup = EvalSetup::new(&data.val, &bb, Some(&sc), 5);
        let run = || budget_sweep(&setup, &Selector::ALL, &DEFAULT_BUDGETS).unwrap();
        let a = with_mode(ExecMode::Parallel, run);
        let b = with_mode(ExecMode::Sequential, run);
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
        assert_eq!(a.to_csv().unwrap(), b.to_csv().unwrap());
        assert_eq!(a.rows.len(), 16);
        assert!(a
            .row(Selector::Learned, 0.2)
            .unwrap()
            .soft_hard_gap
            .is_some());
        assert!(a.row(Selector::Norm, 0.2).unwrap().soft_hard_gap.is_none());
        assert!(budget_sweep(&setup, &[Selector::Random], &[1.0]).is_err());
    }

    #[test]
    fn norm_selector_picks_sinks_first() {
        let (data, bb) = fixture();
        let setup = EvalSetup::new(&data.val, &bb, None, 0);
        // k = round(n * 0.1) <= 3 = sink count, so the norm selector keeps
        // only sink tokens.
        let row = evaluate(&setup, Selector::Norm, 0.1).unwrap();
        assert_eq!(row.recall, 0.0);
    }

    #[test]
    fn score_dump_round_trips() {
        let (data, _) = fixture();
        let sc = init_scorer(8, 4, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scores.csv");
        dump_scores(&sc, &data.val, 0.2, &path).unwrap();
        let back = load_scores(&path).unwrap();
        assert_eq!(back, score_records(&sc, &data.val, 0.2).unwrap());
        for (id, s) in data.val.iter().enumerate() {
            let kept = back
                .iter()
                .filter(|r| r.seq_id == id && r.hard_selected == 1)
                .count();
            assert_eq!(kept, budget_to_k(s.len(8), 0.2).unwrap());
        }
        let bad = dir.path().join("missing").join("x.csv");
        assert!(matches!(
            dump_scores(&sc, &data.val, 0.2, &bad),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn timing_stats() {
        let s = TimingStats::from_samples(&[5.0, 1.0, 3.0, 2.0, 4.0]);
        assert_eq!(s.median_ms, 3.0);
        assert_eq!(s.iqr_ms, 2.0);
    }

    #[test]
    fn bench_reports_exact_flop_ratio() {
        let mut bb = FrozenBackbone::init(8, 6, 3, 2);
        bb.freeze();
        let sc = init_scorer(8, 4, 1).unwrap();
        let r = bench_forward(&bb, &sc, 0.25, 64, 2, 10, 0).unwrap();
        assert_eq!(r.kept, 16);
        assert_eq!(r.token_flop_ratio, 0.25);
        assert_eq!(r.flops_full - r.flops_pruned, 2 * 48 * 8);
        assert!(bench_forward(&bb, &sc, 0.25, 64, 2, 9, 0).is_err());
    }

    #[test]
    fn selector_names_round_trip() {
        for s in Selector::ALL {
            assert_eq!(s.to_string().parse::<Selector>().unwrap(), s);
        }
        assert!("best".parse::<Selector>().is_err());
    }
}
