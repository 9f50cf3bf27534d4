//! Planted-signal token task.
//!
//! Each sequence carries a class label. `signal_tokens` tokens sit near the
//! class direction `μ_c`; `sink_count` tokens are large-norm copies of one
//! class-independent direction `u` (the attention-sink trap); the rest is
//! isotropic noise, a fraction of which are verbatim duplicates of other
//! noise tokens. Token order is shuffled and every sequence is reproducible
//! from `(seed, split, index)` alone.
//!
//! Features are rounded to `f32` at generation time so a dataset read back
//! from disk is bitwise-identical to the generated one.
//!
//! # File format (`DTKS`, version 1, little-endian)
//!
//! ```text
//! magic        4 bytes  "DTKS"
//! version      u32
//! spec         u32 n_min, n_max, feature_dim, classes, signal_tokens,
//!              sink_count; f64 sink_scale, noise_std, duplicate_frac;
//!              u64 seed
//! counts       u32 train, u32 val
//! records      train records then val records, each:
//!              u32 valid_len, u32 label, u32 m, m × u32 signal index,
//!              valid_len × feature_dim × f32 features (row-major)
//! ```

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::binio::{read_file, write_file, ByteReader, ByteWriter};
use crate::difftopk::{budget_to_ks, HardMask};
use crate::error::{Error, Result};
use crate::par;
use crate::rng::{self, Stream};
use crate::tensor::Tensor;

pub const DATASET_MAGIC: &[u8; 4] = b"DTKS";
pub const DATASET_VERSION: u32 = 1;

/// Sink tokens get this fraction of `noise_std` as jitter.
const SINK_JITTER: f64 = 0.1;
const TRAIN_SPLIT: u64 = 1;
const VAL_SPLIT: u64 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSpec {
    pub n_min: usize,
    pub n_max: usize,
    pub feature_dim: usize,
    pub classes: usize,
    pub signal_tokens: usize,
    pub sink_count: usize,
    pub sink_scale: f64,
    /// Root-mean-square norm of a pure-noise token; each coordinate gets
    /// standard deviation `noise_std / sqrt(feature_dim)`.
    pub noise_std: f64,
    pub duplicate_frac: f64,
    pub seed: u64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            n_min: 48,
            n_max: 64,
            feature_dim: 32,
            classes: 4,
            signal_tokens: 6,
            sink_count: 4,
            sink_scale: 8.0,
            noise_std: 0.5,
            duplicate_frac: 0.2,
            seed: 0,
        }
    }
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Spec(msg));
        if self.n_min < 2 || self.n_min > self.n_max {
            return fail(format!(
                "token range [{}, {}] invalid",
                self.n_min, self.n_max
            ));
        }
        if self.signal_tokens + self.sink_count > self.n_min {
            return fail(format!(
                "signal_tokens + sink_count = {} exceeds n_min = {}",
                self.signal_tokens + self.sink_count,
                self.n_min
            ));
        }
        if self.classes < 2 {
            return fail(format!("need at least 2 classes, got {}", self.classes));
        }
        if self.feature_dim < self.classes + 1 {
            return fail(format!(
                "feature_dim {} too small for {} class directions plus the sink direction",
                self.feature_dim, self.classes
            ));
        }
        if !(self.noise_std >= 0.0 && self.sink_scale >= 0.0) {
            return fail("noise_std and sink_scale must be non-negative".into());
        }
        if !(0.0..1.0).contains(&self.duplicate_frac) {
            return fail(format!(
                "duplicate_frac {} outside [0, 1)",
                self.duplicate_frac
            ));
        }
        Ok(())
    }

    /// Orthonormal class directions `μ_0..μ_{C−1}` followed by the sink
    /// direction `u`.
    pub fn directions(&self) -> Vec<Vec<f64>> {
        let d = self.feature_dim;
        let mut rng = rng::stream(self.seed, Stream::Data, u64::MAX);
        let mut basis: Vec<Vec<f64>> = Vec::with_capacity(self.classes + 1);
        while basis.len() < self.classes + 1 {
            let mut v: Vec<f64> = (0..d)
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect();
            for b in &basis {
                let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-6 {
                basis.push(v.into_iter().map(|x| x / norm).collect());
            }
        }
        basis
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    /// `valid_len × feature_dim`, row-major.
    pub features: Vec<f64>,
    pub label: usize,
    /// Ascending positions of the planted signal tokens.
    pub signal_idx: Vec<usize>,
}

impl Sequence {
    pub fn len(&self, feature_dim: usize) -> usize {
        self.features.len() / feature_dim
    }

    pub fn token(&self, i: usize, feature_dim: usize) -> &[f64] {
        &self.features[i * feature_dim..][..feature_dim]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: TaskSpec,
    pub train: Vec<Sequence>,
    pub val: Vec<Sequence>,
}

/// Padded batch view over a run of sequences.
#[derive(Debug, Clone)]
pub struct TokenBatch {
    /// `[B, N_max, D]`, zero-filled past each row's valid length.
    pub v: Tensor,
    pub valid_len: Vec<usize>,
    pub label: Vec<usize>,
    pub signal_idx: Vec<Vec<usize>>,
}

impl TokenBatch {
    pub fn from_sequences(seqs: &[&Sequence], feature_dim: usize) -> Result<Self> {
        if seqs.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        let valid_len: Vec<usize> = seqs.iter().map(|s| s.len(feature_dim)).collect();
        let n = *valid_len.iter().max().expect("non-empty");
        let mut data = vec![0.0; seqs.len() * n * feature_dim];
        for (b, s) in seqs.iter().enumerate() {
            data[b * n * feature_dim..][..s.features.len()].copy_from_slice(&s.features);
        }
        Ok(Self {
            v: Tensor::new([seqs.len(), n, feature_dim], data)?,
            valid_len,
            label: seqs.iter().map(|s| s.label).collect(),
            signal_idx: seqs.iter().map(|s| s.signal_idx.clone()).collect(),
        })
    }

    pub fn batch_size(&self) -> usize {
        self.valid_len.len()
    }

    pub fn max_len(&self) -> usize {
        self.v.shape()[1]
    }

    pub fn feature_dim(&self) -> usize {
        self.v.shape()[2]
    }
}

fn f32_round(x: f64) -> f64 {
    x as f32 as f64
}

fn generate_one(spec: &TaskSpec, dirs: &[Vec<f64>], split: u64, index: usize) -> Sequence {
    let d = spec.feature_dim;
    let mut rng = rng::stream(spec.seed, Stream::Data, (split << 40) | index as u64);
    let n = rng.gen_range(spec.n_min..=spec.n_max);
    let label = index % spec.classes;
    let sink_dir = &dirs[spec.classes];
    let coord_std = spec.noise_std / (d as f64).sqrt();
    let noise = |rng: &mut rand_chacha::ChaCha8Rng, std: f64| -> Vec<f64> {
        (0..d)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                std * z
            })
            .collect::<Vec<f64>>()
    };

    let mut tokens: Vec<(Vec<f64>, bool)> = Vec::with_capacity(n);
    for _ in 0..spec.signal_tokens {
        let mut t = noise(&mut rng, coord_std);
        t.iter_mut().zip(&dirs[label]).for_each(|(x, m)| *x += m);
        tokens.push((t, true));
    }
    for _ in 0..spec.sink_count {
        let mut t = noise(&mut rng, SINK_JITTER * coord_std);
        t.iter_mut()
            .zip(sink_dir)
            .for_each(|(x, u)| *x += spec.sink_scale * u);
        tokens.push((t, false));
    }
    let n_noise = n - spec.signal_tokens - spec.sink_count;
    let mut n_dup = (spec.duplicate_frac * n_noise as f64).round() as usize;
    if n_dup >= n_noise {
        n_dup = n_noise.saturating_sub(1);
    }
    let first_noise = tokens.len();
    for _ in 0..n_noise - n_dup {
        tokens.push((noise(&mut rng, coord_std), false));
    }
    for _ in 0..n_dup {
        let src = first_noise + rng.gen_range(0..n_noise - n_dup);
        let copy = tokens[src].0.clone();
        tokens.push((copy, false));
    }
    tokens.shuffle(&mut rng);

    let mut features = Vec::with_capacity(n * d);
    let mut signal_idx = Vec::with_capacity(spec.signal_tokens);
    for (i, (t, is_signal)) in tokens.into_iter().enumerate() {
        features.extend(t.into_iter().map(f32_round));
        if is_signal {
            signal_idx.push(i);
        }
    }
    Sequence {
        features,
        label,
        signal_idx,
    }
}

fn generate_split(spec: &TaskSpec, count: usize, split: u64) -> Vec<Sequence> {
    let dirs = spec.directions();
    par::map_indexed(count, |i| generate_one(spec, &dirs, split, i))
}

/// Generates `count` sequences for an arbitrary split id.
pub fn generate(spec: &TaskSpec, count: usize, split_seed: u64) -> Result<Vec<Sequence>> {
    spec.validate()?;
    Ok(generate_split(spec, count, split_seed))
}

impl Dataset {
    pub fn generate(spec: &TaskSpec, train: usize, val: usize) -> Result<Self> {
        spec.validate()?;
        Ok(Self {
            spec: spec.clone(),
            train: generate_split(spec, train, TRAIN_SPLIT),
            val: generate_split(spec, val, VAL_SPLIT),
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let s = &self.spec;
        let mut w = ByteWriter::default();
        w.bytes(DATASET_MAGIC);
        w.u32(DATASET_VERSION);
        for v in [
            s.n_min,
            s.n_max,
            s.feature_dim,
            s.classes,
            s.signal_tokens,
            s.sink_count,
        ] {
            w.usize32(v);
        }
        w.f64(s.sink_scale);
        w.f64(s.noise_std);
        w.f64(s.duplicate_frac);
        w.u64(s.seed);
        w.usize32(self.train.len());
        w.usize32(self.val.len());
        for seq in self.train.iter().chain(&self.val) {
            w.usize32(seq.len(s.feature_dim));
            w.usize32(seq.label);
            w.usize32(seq.signal_idx.len());
            seq.signal_idx.iter().for_each(|&i| w.usize32(i));
            seq.features.iter().for_each(|&x| w.f32(x as f32));
        }
        w.buf
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_file(path)?;
        Self::from_bytes(&bytes, path)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = ByteReader::new(bytes, path);
        if r.take(4)? != DATASET_MAGIC {
            return Err(r.err("bad magic, expected DTKS"));
        }
        let version = r.u32()?;
        if version != DATASET_VERSION {
            return Err(r.err(format!("unsupported version {version}")));
        }
        let spec = TaskSpec {
            n_min: r.usize32()?,
            n_max: r.usize32()?,
            feature_dim: r.usize32()?,
            classes: r.usize32()?,
            signal_tokens: r.usize32()?,
            sink_count: r.usize32()?,
            sink_scale: r.f64()?,
            noise_std: r.f64()?,
            duplicate_frac: r.f64()?,
            seed: r.u64()?,
        };
        spec.validate().map_err(|e| r.err(e.to_string()))?;
        let (n_train, n_val) = (r.usize32()?, r.usize32()?);
        let d = spec.feature_dim;
        let read_seq = |r: &mut ByteReader| -> Result<Sequence> {
            let len = r.usize32()?;
            let label = r.usize32()?;
            let m = r.usize32()?;
            if label >= spec.classes || len > spec.n_max {
                return Err(r.err(format!("record with label {label}, length {len}")));
            }
            let signal_idx = (0..m).map(|_| r.usize32()).collect::<Result<Vec<_>>>()?;
            if signal_idx.iter().any(|&i| i >= len) {
                return Err(r.err("signal index beyond valid length"));
            }
            let features = (0..len * d)
                .map(|_| r.f32().map(f64::from))
                .collect::<Result<Vec<_>>>()?;
            Ok(Sequence {
                features,
                label,
                signal_idx,
            })
        };
        let train = (0..n_train)
            .map(|_| read_seq(&mut r))
            .collect::<Result<Vec<_>>>()?;
        let val = (0..n_val)
            .map(|_| read_seq(&mut r))
            .collect::<Result<Vec<_>>>()?;
        if !r.finished() {
            return Err(r.err("trailing bytes after last record"));
        }
        Ok(Self { spec, train, val })
    }
}

/// Upper-bound selector: every signal token first, then the lowest-index
/// remaining tokens until `k` are kept.
pub fn oracle_mask(batch: &TokenBatch, budget: f64) -> Result<HardMask> {
    let k = budget_to_ks(&batch.valid_len, budget)?;
    let n = batch.max_len();
    let mut mask = Tensor::zeros([batch.batch_size(), n]);
    let mut selected = Vec::with_capacity(k.len());
    for (row, (&kr, signal)) in k.iter().zip(&batch.signal_idx).enumerate() {
        let sel = oracle_indices(signal, batch.valid_len[row], kr);
        for &i in &sel {
            mask.data_mut()[row * n + i] = 1.0;
        }
        selected.push(sel);
    }
    Ok(HardMask { mask, k, selected })
}

pub(crate) fn oracle_indices(signal: &[usize], valid_len: usize, k: usize) -> Vec<usize> {
    let mut sel: Vec<usize> = signal.iter().copied().take(k).collect();
    let mut i = 0;
    while sel.len() < k && i < valid_len {
        if !signal.contains(&i) {
            sel.push(i);
        }
        i += 1;
    }
    sel.sort_unstable();
    sel
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> TaskSpec {
        TaskSpec {
            seed: 3,
            ..TaskSpec::default()
        }
    }

    fn norm(x: &[f64]) -> f64 {
        x.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = Dataset::generate(&small(), 40, 10).unwrap();
        let b = Dataset::generate(&small(), 40, 10).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        let other = Dataset::generate(&TaskSpec { seed: 4, ..small() }, 40, 10).unwrap();
        assert_ne!(a.to_bytes(), other.to_bytes());
    }

    #[test]
    fn file_round_trip() {
        let ds = Dataset::generate(&small(), 12, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.bin");
        ds.save(&path).unwrap();
        assert_eq!(&std::fs::read(&path).unwrap()[..4], b"DTKS");
        assert_eq!(Dataset::load(&path).unwrap(), ds);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let ds = Dataset::generate(&small(), 3, 1).unwrap();
        let mut bytes = ds.to_bytes();
        let p = Path::new("mem");
        assert!(Dataset::from_bytes(&bytes[..bytes.len() - 1], p).is_err());
        bytes[0] = b'X';
        assert!(matches!(
            Dataset::from_bytes(&bytes, p),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn spec_violations() {
        let bad = TaskSpec {
            signal_tokens: 40,
            sink_count: 10,
            ..small()
        };
        assert!(matches!(Dataset::generate(&bad, 1, 1), Err(Error::Spec(_))));
        assert!(TaskSpec {
            classes: 1,
            ..small()
        }
        .validate()
        .is_err());
        assert!(TaskSpec {
            duplicate_frac: 1.0,
            ..small()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn directions_are_orthonormal() {
        let dirs = small().directions();
        for (i, a) in dirs.iter().enumerate() {
            for (j, b) in dirs.iter().enumerate() {
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn structure_of_a_sequence() {
        let spec = small();
        let ds = Dataset::generate(&spec, 200, 0).unwrap();
        let d = spec.feature_dim;
        let u = &spec.directions()[spec.classes];
        let (mut sink_norm, mut sig_norm, mut n_sink, mut n_sig) = (0.0, 0.0, 0, 0);
        for seq in &ds.train {
            let n = seq.len(d);
            assert!((spec.n_min..=spec.n_max).contains(&n));
            assert_eq!(seq.signal_idx.len(), spec.signal_tokens);
            assert!(seq.signal_idx.windows(2).all(|w| w[0] < w[1]));
            for i in 0..n {
                let t = seq.token(i, d);
                let along_u: f64 = t.iter().zip(u).map(|(a, b)| a * b).sum();
                if along_u > spec.sink_scale / 2.0 {
                    sink_norm += norm(t);
                    n_sink += 1;
                } else if seq.signal_idx.contains(&i) {
                    sig_norm += norm(t);
                    n_sig += 1;
                }
            }
        }
        assert_eq!(n_sink, 200 * spec.sink_count);
        let ratio = (sink_norm / n_sink as f64) / (sig_norm / n_sig as f64);
        assert!(ratio >= 4.0, "sink/signal norm ratio {ratio}");
    }

    #[test]
    fn duplicates_are_verbatim() {
        let spec = small();
        let seq = &generate(&spec, 1, 9).unwrap()[0];
        let d = spec.feature_dim;
        let n = seq.len(d);
        let mut dup = 0;
        for i in 0..n {
            if (0..i).any(|j| seq.token(j, d) == seq.token(i, d)) {
                dup += 1;
            }
        }
        let n_noise = n - spec.signal_tokens - spec.sink_count;
        assert!(dup >= 1 && dup <= (spec.duplicate_frac * n_noise as f64).round() as usize);
    }

    #[test]
    fn classes_are_balanced() {
        let spec = small();
        let ds = Dataset::generate(&spec, 1000, 0).unwrap();
        let mut counts = vec![0usize; spec.classes];
        ds.train.iter().for_each(|s| counts[s.label] += 1);
        let expect = 1000.0 / spec.classes as f64;
        assert!(counts
            .iter()
            .all(|&c| (c as f64 - expect).abs() <= 0.05 * expect));
    }

    #[test]
    fn batches_pad_with_zeros() {
        let spec = small();
        let seqs = generate(&spec, 3, 1).unwrap();
        let refs: Vec<&Sequence> = seqs.iter().collect();
        let b = TokenBatch::from_sequences(&refs, spec.feature_dim).unwrap();
        let n = b.max_len();
        let d = spec.feature_dim;
        for (row, &len) in b.valid_len.iter().enumerate() {
            assert!(b.v.data()[(row * n + len) * d..(row + 1) * n * d]
                .iter()
                .all(|&x| x == 0.0));
        }
    }

    #[test]
    fn oracle_selection() {
        let spec = small();
        let seqs = generate(&spec, 4, 1).unwrap();
        let refs: Vec<&Sequence> = seqs.iter().collect();
        let b = TokenBatch::from_sequences(&refs, spec.feature_dim).unwrap();
        let h = oracle_mask(&b, 0.2).unwrap();
        for (row, sel) in h.selected.iter().enumerate() {
            assert_eq!(sel.len(), h.k[row]);
            assert!(b.signal_idx[row].iter().all(|i| sel.contains(i)));
        }
        assert_eq!(oracle_indices(&[2, 5], 10, 2), vec![2, 5]);
        assert_eq!(oracle_indices(&[2, 5], 10, 9).len(), 9);
        assert_eq!(oracle_indices(&[2, 5], 10, 3), vec![0, 2, 5]);
    }
}
