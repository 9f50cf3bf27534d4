//! `DTKC` checkpoint files.
//!
//! Layout, little-endian:
//!
//! ```text
//! magic "DTKC" | u32 version | u32 section count
//! section table: count × (4-byte tag, u64 offset, u64 length)
//! section payloads
//! 32-byte SHA-256 over every preceding byte
//! ```
//!
//! Sections, each optional:
//!
//! - `CONF` UTF-8 JSON echo of the producing configuration
//! - `SCOR` scorer `W_q`, `W_k`
//! - `BKBN` u32 frozen flag, then backbone `W1`, `b1`, `W2`, `b2`
//! - `OPTM` β1, β2, ε, weight decay (f64), u64 steps, u64 skipped, u32
//!   tensor count, first moments, second moments
//! - `STEP` u64 training step
//!
//! Tensors are stored as u32 rank, u32 dims, f64 data.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::binio::{read_file, write_file, ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::optim::{AdamW, AdamWConfig};
use crate::pipeline::FrozenBackbone;
use crate::scorer::ScorerParams;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DTKC";
pub const CHECKPOINT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub config: serde_json::Value,
    pub scorer: Option<ScorerParams>,
    pub backbone: Option<FrozenBackbone>,
    pub optimizer: Option<AdamW>,
    pub step: u64,
}

fn put_tensor(w: &mut ByteWriter, t: &Tensor) {
    w.usize32(t.rank());
    for &d in t.shape() {
        w.usize32(d);
    }
    for &x in t.data() {
        w.f64(x);
    }
}

fn get_tensor(r: &mut ByteReader<'_>) -> Result<Tensor> {
    let rank = r.usize32()?;
    if rank > 8 {
        return Err(r.err(format!("tensor rank {rank} too large")));
    }
    let shape = (0..rank).map(|_| r.usize32()).collect::<Result<Vec<_>>>()?;
    let numel = shape
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| r.err("tensor size overflows"))?;
    let bytes = r.take(
        numel
            .checked_mul(8)
            .ok_or_else(|| r.err("tensor size overflows"))?,
    )?;
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Tensor::new(shape, data)
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut sections: Vec<(&[u8; 4], Vec<u8>)> = Vec::new();
        sections.push((b"CONF", serde_json::to_vec(&self.config)?));
        if let Some(s) = &self.scorer {
            let mut w = ByteWriter::default();
            put_tensor(&mut w, &s.w_q);
            put_tensor(&mut w, &s.w_k);
            sections.push((b"SCOR", w.buf));
        }
        if let Some(b) = &self.backbone {
            let mut w = ByteWriter::default();
            w.u32(u32::from(b.is_frozen()));
            for p in b.params() {
                put_tensor(&mut w, p);
            }
            sections.push((b"BKBN", w.buf));
        }
        if let Some(o) = &self.optimizer {
            let mut w = ByteWriter::default();
            let c = o.config;
            for x in [c.beta1, c.beta2, c.eps, c.weight_decay] {
                w.f64(x);
            }
            w.u64(o.steps);
            w.u64(o.skipped);
            w.usize32(o.m.len());
            for t in o.m.iter().chain(&o.v) {
                put_tensor(&mut w, t);
            }
            sections.push((b"OPTM", w.buf));
        }
        let mut w = ByteWriter::default();
        w.u64(self.step);
        sections.push((b"STEP", w.buf));

        let mut out = ByteWriter::default();
        out.bytes(CHECKPOINT_MAGIC);
        out.u32(CHECKPOINT_VERSION);
        out.usize32(sections.len());
        let mut offset = (12 + sections.len() * 20) as u64;
        for (tag, body) in &sections {
            out.bytes(*tag);
            out.u64(offset);
            out.u64(body.len() as u64);
            offset += body.len() as u64;
        }
        for (_, body) in &sections {
            out.bytes(body);
        }
        let digest = Sha256::digest(&out.buf);
        out.bytes(&digest);
        Ok(out.buf)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < 12 + DIGEST_LEN || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(Error::format(path, "not a DTKC checkpoint"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Integrity {
                path: path.to_path_buf(),
            });
        }
        let mut r = ByteReader::new(body, path);
        r.take(4)?;
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(r.err(format!("unsupported checkpoint version {version}")));
        }
        let count = r.usize32()?;
        let mut table = Vec::with_capacity(count.min(16));
        for _ in 0..count {
            let tag: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
            let (offset, len) = (r.u64()? as usize, r.u64()? as usize);
            let end = offset.checked_add(len).filter(|&e| e <= body.len());
            let Some(end) = end else {
                return Err(r.err(format!(
                    "section {:?} out of bounds",
                    String::from_utf8_lossy(&tag)
                )));
            };
            table.push((tag, &body[offset..end]));
        }

        let mut ck = Checkpoint::default();
        let mut seen_step = false;
        for (tag, data) in table {
            let mut s = ByteReader::new(data, path);
            match &tag {
                b"CONF" => ck.config = serde_json::from_slice(s.take(data.len())?)?,
                b"SCOR" => {
                    let (q, k) = (get_tensor(&mut s)?, get_tensor(&mut s)?);
                    ck.scorer = Some(ScorerParams::new(q, k)?);
                }
                b"BKBN" => {
                    let frozen = s.u32()? != 0;
                    let p = (0..4)
                        .map(|_| get_tensor(&mut s))
                        .collect::<Result<Vec<_>>>()?;
                    let [w1, b1, w2, b2]: [Tensor; 4] = p.try_into().expect("four tensors");
                    ck.backbone = Some(FrozenBackbone::new(w1, b1, w2, b2, frozen)?);
                }
                b"OPTM" => {
                    let config = AdamWConfig {
                        beta1: s.f64()?,
                        beta2: s.f64()?,
                        eps: s.f64()?,
                        weight_decay: s.f64()?,
                    };
                    let (steps, skipped) = (s.u64()?, s.u64()?);
                    let n = s.usize32()?;
                    if n > 64 {
                        return Err(s.err("too many optimizer tensors"));
                    }
                    let m = (0..n).map(|_| get_tensor(&mut s)).collect::<Result<_>>()?;
                    let v = (0..n).map(|_| get_tensor(&mut s)).collect::<Result<_>>()?;
                    ck.optimizer = Some(AdamW {
                        config,
                        m,
                        v,
                        steps,
                        skipped,
                    });
                }
                b"STEP" => {
                    ck.step = s.u64()?;
                    seen_step = true;
                }
                other => {
                    return Err(s.err(format!(
                        "unknown section {:?}",
                        String::from_utf8_lossy(other)
                    )));
                }
            }
            if !s.finished() {
                return Err(s.err(format!(
                    "trailing bytes in section {:?}",
                    String::from_utf8_lossy(&tag)
                )));
            }
        }
        if !seen_step {
            return Err(Error::format(path, "missing STEP section"));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scorer::init_scorer;

    fn sample() -> Checkpoint {
        let sc = init_scorer(6, 3, 1).unwrap();
        let mut bb = FrozenBackbone::init(6, 5, 3, 2);
        bb.freeze();
        let mut opt = AdamW::new(AdamWConfig::default(), &[&sc.w_q, &sc.w_k]);
        opt.m[0].data_mut()[4] = 0.25;
        opt.v[1].data_mut()[2] = f64::MIN_POSITIVE;
        opt.steps = 17;
        opt.skipped = 2;
        Checkpoint {
            config: serde_json::json!({"train": {"budget": 0.2}, "seed": 7}),
            scorer: Some(sc),
            backbone: Some(bb),
            optimizer: Some(opt),
            step: 17,
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let ck = sample();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.dtkc");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), ck.to_bytes().unwrap());
        assert_eq!(&std::fs::read(&path).unwrap()[..4], b"DTKC");
    }

    #[test]
    fn backbone_only_file() {
        let ck = Checkpoint {
            backbone: sample().backbone,
            ..Default::default()
        };
        let p = Path::new("mem");
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap(), p).unwrap();
        assert!(back.scorer.is_none() && back.optimizer.is_none());
        assert!(back.backbone.unwrap().is_frozen());
    }

    #[test]
    fn flipped_byte_fails_integrity() {
        let bytes = sample().to_bytes().unwrap();
        let p = Path::new("mem");
        for pos in [20, bytes.len() / 2, bytes.len() - 40, bytes.len() - 1] {
            let mut bad = bytes.clone();
            bad[pos] ^= 0x01;
            assert!(
                matches!(
                    Checkpoint::from_bytes(&bad, p),
                    Err(Error::Integrity { .. })
                ),
                "byte {pos}"
            );
        }
    }

    #[test]
    fn truncated_or_foreign_files_are_rejected() {
        let bytes = sample().to_bytes().unwrap();
        let p = Path::new("mem");
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..10], p),
            Err(Error::Format { .. })
        ));
        let mut foreign = bytes.clone();
        foreign[..4].copy_from_slice(b"DTKS");
        assert!(matches!(
            Checkpoint::from_bytes(&foreign, p),
            Err(Error::Format { .. })
        ));
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 1], p),
            Err(Error::Integrity { .. })
        ));
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = Checkpoint::load(Path::new("/nonexistent/ck.dtkc")).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
        assert!(err.to_string().contains("/nonexistent/ck.dtkc"));
    }
}
