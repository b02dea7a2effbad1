//! Support-set expansion from a pool of generated-image candidates.
//!
//! Each candidate carries a quality score (its CLIP image embedding's cosine
//! similarity to the class text embedding). Per class, the best `k'`
//! candidates are kept and appended to the real support set.
//!
//! Scores live in a sidecar MKSC file:
//!
//! ```text
//! "MKSC" | version u32 = 1 | rows u64 | rows * binary32
//! ```

use std::fs;
use std::path::Path;

use crate::adapter::ZeroShotHead;
use crate::databank::{check_paired, one_hot, EmbeddingBank, OneHotLabels, FORMAT_VERSION};
use crate::error::{Error, Result};
use crate::matrix::dot;

pub const SCORE_MAGIC: [u8; 4] = *b"MKSC";
const SCORE_HEADER_LEN: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct CandidatePool {
    clip: EmbeddingBank,
    dino: EmbeddingBank,
    scores: Vec<f64>,
}

impl CandidatePool {
    pub fn new(clip: EmbeddingBank, dino: EmbeddingBank, scores: Vec<f64>) -> Result<Self> {
        clip.require_labels()?;
        check_paired(&clip, &dino)?;
        if scores.len() != clip.rows() {
            return Err(Error::Shape(format!(
                "{} scores for {} candidates",
                scores.len(),
                clip.rows()
            )));
        }
        if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
            return Err(Error::NonFinite { row: i, col: 0 });
        }
        Ok(Self { clip, dino, scores })
    }

    /// Builds a pool whose scores are recomputed against the text head.
    pub fn scored_by_head(
        clip: EmbeddingBank,
        dino: EmbeddingBank,
        head: &ZeroShotHead,
    ) -> Result<Self> {
        let scores = text_scores(&clip, head)?;
        Self::new(clip, dino, scores)
    }

    pub fn clip(&self) -> &EmbeddingBank {
        &self.clip
    }

    pub fn dino(&self) -> &EmbeddingBank {
        &self.dino
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn labels(&self) -> &[usize] {
        // Checked at construction.
        self.clip.labels().unwrap()
    }

    pub fn rows(&self) -> usize {
        self.scores.len()
    }

    fn select(&self, idx: &[usize]) -> Self {
        Self {
            clip: self.clip.select(idx),
            dino: self.dino.select(idx),
            scores: idx.iter().map(|&i| self.scores[i]).collect(),
        }
    }
}

/// Cosine similarity of each candidate to its own class's text embedding.
pub fn text_scores(clip: &EmbeddingBank, head: &ZeroShotHead) -> Result<Vec<f64>> {
    let labels = clip.require_labels()?;
    if clip.dim() != head.dim() {
        return Err(Error::Shape(format!(
            "candidate dim {} vs text head dim {}",
            clip.dim(),
            head.dim()
        )));
    }
    labels
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            if c >= head.classes() {
                return Err(Error::LabelOutOfRange {
                    label: c,
                    classes: head.classes(),
                });
            }
            Ok(dot(clip.features().row(i), head.text().row(c)))
        })
        .collect()
}

/// Row indices of the top-`k_prime` scores in each class present in the pool.
///
/// Ties go to the lower row index. Classes appear in ascending order and the
/// rows of each class keep their pool order.
pub fn top_k_indices(labels: &[usize], scores: &[f64], k_prime: usize) -> Result<Vec<usize>> {
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &c) in labels.iter().enumerate() {
        by_class[c].push(i);
    }
    let mut picked = Vec::new();
    for (class, mut members) in by_class.into_iter().enumerate() {
        if members.is_empty() {
            continue;
        }
        if members.len() < k_prime {
            return Err(Error::InsufficientCandidates {
                class,
                available: members.len(),
                requested: k_prime,
            });
        }
        members.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        members.truncate(k_prime);
        members.sort_unstable();
        picked.extend(members);
    }
    Ok(picked)
}

pub fn filter_top_k(pool: &CandidatePool, k_prime: usize) -> Result<CandidatePool> {
    let idx = top_k_indices(pool.labels(), &pool.scores, k_prime)?;
    Ok(pool.select(&idx))
}

/// Real support rows followed by the filtered synthetic rows, with fresh
/// one-hot values. The real support may be empty (zero-shot expansion).
pub fn expand_support(
    support_clip: &EmbeddingBank,
    support_dino: &EmbeddingBank,
    filtered: &CandidatePool,
    classes: usize,
) -> Result<(EmbeddingBank, EmbeddingBank, OneHotLabels)> {
    check_paired(support_clip, support_dino)?;
    let real_labels = if support_clip.rows() == 0 {
        &[][..]
    } else {
        support_clip.require_labels()?
    };
    for (name, real, synth) in [
        ("clip", support_clip, &filtered.clip),
        ("dino", support_dino, &filtered.dino),
    ] {
        if real.rows() > 0 && synth.rows() > 0 && real.dim() != synth.dim() {
            return Err(Error::Shape(format!(
                "{name} support dim {} vs candidate dim {}",
                real.dim(),
                synth.dim()
            )));
        }
    }

    let labels: Vec<usize> = real_labels
        .iter()
        .chain(filtered.labels())
        .copied()
        .collect();
    let values = one_hot(&labels, classes)?;
    let clip = EmbeddingBank::labeled(
        support_clip.features().vstack(filtered.clip.features())?,
        labels.clone(),
    )?;
    let dino = EmbeddingBank::labeled(
        support_dino.features().vstack(filtered.dino.features())?,
        labels,
    )?;
    Ok((clip, dino, values))
}

pub fn encode_scores(scores: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(SCORE_HEADER_LEN + 4 * scores.len());
    out.extend_from_slice(&SCORE_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(scores.len() as u64).to_le_bytes());
    for &s in scores {
        out.extend_from_slice(&(s as f32).to_le_bytes());
    }
    out
}

pub fn decode_scores(bytes: &[u8]) -> Result<Vec<f64>> {
    if bytes.len() < SCORE_HEADER_LEN {
        return Err(Error::Truncated {
            expected: SCORE_HEADER_LEN,
            actual: bytes.len(),
        });
    }
    let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
    if magic != SCORE_MAGIC {
        return Err(Error::BadMagic {
            expected: SCORE_MAGIC,
            found: magic,
        });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let rows = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let expected = rows
        .checked_mul(4)
        .and_then(|n| n.checked_add(SCORE_HEADER_LEN))
        .ok_or_else(|| Error::MalformedHeader("score count overflows".into()))?;
    if bytes.len() < expected {
        return Err(Error::Truncated {
            expected,
            actual: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(Error::MalformedHeader(format!(
            "header declares {expected} bytes but file holds {}",
            bytes.len()
        )));
    }
    bytes[SCORE_HEADER_LEN..]
        .chunks_exact(4)
        .enumerate()
        .map(|(i, c)| {
            let v = f32::from_le_bytes(c.try_into().unwrap());
            if v.is_finite() {
                Ok(f64::from(v))
            } else {
                Err(Error::NonFinite { row: i, col: 0 })
            }
        })
        .collect()
}

pub fn write_scores(path: impl AsRef<Path>, scores: &[f64]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_scores(scores)).map_err(|e| Error::io(path, e))
}

pub fn load_scores(path: impl AsRef<Path>) -> Result<Vec<f64>> {
    let path = path.as_ref();
    decode_scores(&fs::read(path).map_err(|e| Error::io(path, e))?)
}
