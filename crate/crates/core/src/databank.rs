//! Embedding banks, the dataset manifest, support sampling and one-hot values.
//!
//! Banks are stored on disk in the MKEB format (all integers little-endian):
//!
//! ```text
//! "MKEB" | version u32 = 1 | rows u64 | dim u32 | has_labels u8 | 3 zero bytes
//! rows * dim binary32, row-major
//! rows * u32 labels            (only when has_labels = 1)
//! ```
//!
//! Values are widened to `f64` on load; writing narrows them back to `f32`,
//! so a bank loaded without normalization round-trips bit-exactly.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{norm, Matrix};

pub const BANK_MAGIC: [u8; 4] = *b"MKEB";
pub const FORMAT_VERSION: u32 = 1;
const BANK_HEADER_LEN: usize = 4 + 4 + 8 + 4 + 1 + 3;

/// A set of feature vectors, one per row, with optional class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBank {
    features: Matrix,
    labels: Option<Vec<usize>>,
}

impl EmbeddingBank {
    pub fn new(features: Matrix, labels: Option<Vec<usize>>) -> Result<Self> {
        if let Some(l) = &labels {
            if l.len() != features.rows() {
                return Err(Error::Shape(format!(
                    "{} labels for {} rows",
                    l.len(),
                    features.rows()
                )));
            }
        }
        Ok(Self { features, labels })
    }

    pub fn labeled(features: Matrix, labels: Vec<usize>) -> Result<Self> {
        Self::new(features, Some(labels))
    }

    pub fn rows(&self) -> usize {
        self.features.rows()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn into_features(self) -> Matrix {
        self.features
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn require_labels(&self) -> Result<&[usize]> {
        self.labels.as_deref().ok_or(Error::MissingLabels)
    }

    /// Number of classes implied by the labels (`max + 1`), or 0 when unlabeled.
    pub fn implied_classes(&self) -> usize {
        self.labels
            .as_ref()
            .and_then(|l| l.iter().max())
            .map_or(0, |m| m + 1)
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            features: self.features.select_rows(indices),
            labels: self
                .labels
                .as_ref()
                .map(|l| indices.iter().map(|&i| l[i]).collect()),
        }
    }

    /// Scales every row to unit L2 norm. Zero rows are rejected.
    pub fn normalize(&mut self) -> Result<()> {
        for i in 0..self.features.rows() {
            let row = self.features.row_mut(i);
            let n = norm(row);
            if n == 0.0 {
                return Err(Error::ZeroRow(i));
            }
            row.iter_mut().for_each(|v| *v /= n);
        }
        Ok(())
    }

    pub fn normalized(mut self) -> Result<Self> {
        self.normalize()?;
        Ok(self)
    }

    /// Checks that every label is below `classes`.
    pub fn check_labels(&self, classes: usize) -> Result<()> {
        if let Some(l) = &self.labels {
            if let Some(&bad) = l.iter().find(|&&c| c >= classes) {
                return Err(Error::LabelOutOfRange {
                    label: bad,
                    classes,
                });
            }
        }
        Ok(())
    }

    /// Appends the MKEB encoding of this bank to `out`.
    pub fn encode(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&BANK_MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.rows() as u64).to_le_bytes());
        out.extend_from_slice(&(self.dim() as u32).to_le_bytes());
        out.push(u8::from(self.labels.is_some()));
        out.extend_from_slice(&[0u8; 3]);
        for &v in self.features.as_slice() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        if let Some(l) = &self.labels {
            for &c in l {
                out.extend_from_slice(&(c as u32).to_le_bytes());
            }
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.encode(&mut out);
        out
    }

    /// Decodes one MKEB block from the front of `bytes`, returning the bank
    /// and the number of bytes consumed.
    pub fn decode(bytes: &[u8]) -> Result<(Self, usize)> {
        if bytes.len() < BANK_HEADER_LEN {
            return Err(Error::Truncated {
                expected: BANK_HEADER_LEN,
                actual: bytes.len(),
            });
        }
        let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
        if magic != BANK_MAGIC {
            return Err(Error::BadMagic {
                expected: BANK_MAGIC,
                found: magic,
            });
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let rows = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let dim = u32::from_le_bytes(bytes[16..20].try_into().unwrap()) as usize;
        let flag = bytes[20];
        if rows == 0 || dim == 0 {
            return Err(Error::MalformedHeader(format!(
                "rows={rows}, dim={dim}; both must be positive"
            )));
        }
        if flag > 1 {
            return Err(Error::MalformedHeader(format!("label flag {flag}")));
        }
        let rows = usize::try_from(rows)
            .map_err(|_| Error::MalformedHeader(format!("rows={rows} too large")))?;
        let has_labels = flag == 1;
        let payload = rows
            .checked_mul(dim)
            .and_then(|n| n.checked_mul(4))
            .and_then(|n| n.checked_add(if has_labels { rows * 4 } else { 0 }))
            .ok_or_else(|| Error::MalformedHeader("payload size overflows".into()))?;
        let total = BANK_HEADER_LEN + payload;
        if bytes.len() < total {
            return Err(Error::Truncated {
                expected: total,
                actual: bytes.len(),
            });
        }

        let body = &bytes[BANK_HEADER_LEN..];
        let mut data = Vec::with_capacity(rows * dim);
        for (k, chunk) in body[..rows * dim * 4].chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes(chunk.try_into().unwrap());
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    row: k / dim,
                    col: k % dim,
                });
            }
            data.push(f64::from(v));
        }
        let labels = has_labels.then(|| {
            body[rows * dim * 4..rows * dim * 4 + rows * 4]
                .chunks_exact(4)
                .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
                .collect()
        });
        let bank = Self {
            features: Matrix::from_vec(rows, dim, data)?,
            labels,
        };
        Ok((bank, total))
    }

    /// Decodes a buffer that must hold exactly one MKEB block.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (bank, used) = Self::decode(bytes)?;
        if used != bytes.len() {
            return Err(Error::MalformedHeader(format!(
                "header declares {used} bytes but file holds {}",
                bytes.len()
            )));
        }
        Ok(bank)
    }
}

/// Reads an MKEB file, optionally L2-normalizing each row.
pub fn load_bank(path: impl AsRef<Path>, normalize: bool) -> Result<EmbeddingBank> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut bank = EmbeddingBank::from_bytes(&bytes)?;
    if normalize {
        bank.normalize()?;
    }
    Ok(bank)
}

pub fn write_bank(path: impl AsRef<Path>, bank: &EmbeddingBank) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, bank.to_bytes()).map_err(|e| Error::io(path, e))
}

/// One-hot label matrix used as the cache values.
#[derive(Debug, Clone, PartialEq)]
pub struct OneHotLabels {
    labels: Vec<usize>,
    classes: usize,
}

impl OneHotLabels {
    pub fn rows(&self) -> usize {
        self.labels.len()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn to_matrix(&self) -> Matrix {
        let mut m = Matrix::zeros(self.labels.len(), self.classes);
        for (i, &c) in self.labels.iter().enumerate() {
            m.set(i, c, 1.0);
        }
        m
    }

    /// Number of rows carrying each class.
    pub fn column_sums(&self) -> Vec<usize> {
        let mut sums = vec![0; self.classes];
        for &c in &self.labels {
            sums[c] += 1;
        }
        sums
    }
}

pub fn one_hot(labels: &[usize], classes: usize) -> Result<OneHotLabels> {
    if let Some(&bad) = labels.iter().find(|&&c| c >= classes) {
        return Err(Error::LabelOutOfRange {
            label: bad,
            classes,
        });
    }
    Ok(OneHotLabels {
        labels: labels.to_vec(),
        classes,
    })
}

/// Row indices of a seeded K-per-class draw without replacement.
///
/// Classes are visited in ascending order and the chosen rows of each class
/// keep their original file order.
pub fn sample_support_indices(labels: &[usize], shots: usize, seed: u64) -> Result<Vec<usize>> {
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &c) in labels.iter().enumerate() {
        by_class[c].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = Vec::with_capacity(classes * shots);
    for (class, mut members) in by_class.into_iter().enumerate() {
        if members.len() < shots {
            return Err(Error::InsufficientShots {
                class: class.to_string(),
                available: members.len(),
                requested: shots,
            });
        }
        members.shuffle(&mut rng);
        members.truncate(shots);
        members.sort_unstable();
        picked.extend(members);
    }
    Ok(picked)
}

pub fn sample_support(bank: &EmbeddingBank, shots: usize, seed: u64) -> Result<EmbeddingBank> {
    let idx = sample_support_indices(bank.require_labels()?, shots, seed)?;
    Ok(bank.select(&idx))
}

/// Names under which the manifest refers to bank files.
pub mod bank_names {
    pub const CLIP_SUPPORT: &str = "clip_support";
    pub const DINO_SUPPORT: &str = "dino_support";
    pub const CLIP_QUERY: &str = "clip_query";
    pub const DINO_QUERY: &str = "dino_query";
    pub const TEXT_HEAD: &str = "text_head";
    pub const CLIP_CANDIDATES: &str = "clip_candidates";
    pub const DINO_CANDIDATES: &str = "dino_candidates";
    pub const CANDIDATE_SCORES: &str = "candidate_scores";
}

/// Dataset description: class names, shot count, seed and bank file paths
/// relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub class_names: Vec<String>,
    pub shots: usize,
    pub seed: u64,
    pub banks: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic_k: Option<usize>,
    #[serde(skip)]
    pub root: PathBuf,
}

impl Manifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::Manifest(e.to_string()))?;
        m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text =
            serde_json::to_string_pretty(self).map_err(|e| Error::Manifest(e.to_string()))?;
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        if self.class_names.len() < 2 {
            return Err(Error::Manifest(format!(
                "need at least 2 classes, found {}",
                self.class_names.len()
            )));
        }
        Ok(())
    }

    pub fn classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn has_bank(&self, name: &str) -> bool {
        self.banks.contains_key(name)
    }

    pub fn bank_path(&self, name: &str) -> Result<PathBuf> {
        self.banks
            .get(name)
            .map(|rel| self.root.join(rel))
            .ok_or_else(|| Error::Manifest(format!("no bank named {name:?}")))
    }

    /// Loads and normalizes a named bank, checking labels against the class count.
    pub fn load_bank(&self, name: &str) -> Result<EmbeddingBank> {
        let bank = load_bank(self.bank_path(name)?, true)?;
        bank.check_labels(self.classes())?;
        Ok(bank)
    }
}

/// Checks that two banks describe the same samples in the same order.
pub fn check_paired(a: &EmbeddingBank, b: &EmbeddingBank) -> Result<()> {
    if a.rows() != b.rows() {
        return Err(Error::Shape(format!(
            "paired banks have {} and {} rows",
            a.rows(),
            b.rows()
        )));
    }
    if a.labels() != b.labels() {
        return Err(Error::Shape("paired banks disagree on labels".into()));
    }
    Ok(())
}
