//! The dual-key cache adapter.
//!
//! Two key matrices (one per encoder) share a single one-hot value matrix.
//! A query retrieves from each key set through the sharpness modulator
//! `phi(x) = exp(-beta * (1 - x))`, giving one logit vector per encoder; the
//! text head supplies the zero-shot logits.

use std::fs;
use std::path::Path;

use crate::databank::{one_hot, EmbeddingBank, OneHotLabels, FORMAT_VERSION};
use crate::ensemble::LogitBundle;
use crate::error::{Error, Result};
use crate::matrix::{norm, Matrix};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"MKCP";
pub const DEFAULT_BETA: f64 = 0.6;
const UNIT_NORM_TOL: f64 = 1e-5;

/// Sharpness modulator applied to a raw affinity.
#[inline]
pub fn phi(x: f64, beta: f64) -> f64 {
    (-beta * (1.0 - x)).exp()
}

/// Class text embeddings, one unit-norm row per class.
#[derive(Debug, Clone, PartialEq)]
pub struct ZeroShotHead {
    text: Matrix,
}

impl ZeroShotHead {
    pub fn new(text: Matrix) -> Result<Self> {
        check_unit_rows(&text, "text head")?;
        Ok(Self { text })
    }

    pub fn from_bank(bank: EmbeddingBank) -> Result<Self> {
        Self::new(bank.into_features())
    }

    pub fn text(&self) -> &Matrix {
        &self.text
    }

    pub fn classes(&self) -> usize {
        self.text.rows()
    }

    pub fn dim(&self) -> usize {
        self.text.cols()
    }
}

fn check_unit_rows(m: &Matrix, what: &str) -> Result<()> {
    for (i, row) in m.iter_rows().enumerate() {
        let n = norm(row);
        if (n - 1.0).abs() > UNIT_NORM_TOL {
            return Err(Error::Shape(format!(
                "{what} row {i} has norm {n}, expected unit norm"
            )));
        }
    }
    Ok(())
}

/// `queries · textᵀ`.
pub fn zero_shot_logits(queries: &Matrix, head: &ZeroShotHead) -> Result<Matrix> {
    queries.matmul_t(&head.text)
}

/// Per-class sums of modulated affinities: `phi(queries · keysᵀ) · values`.
pub fn branch_logits(
    queries: &Matrix,
    keys: &Matrix,
    values: &OneHotLabels,
    beta: f64,
) -> Result<Matrix> {
    if keys.rows() != values.rows() {
        return Err(Error::Shape(format!(
            "{} keys but {} values",
            keys.rows(),
            values.rows()
        )));
    }
    let affinity = queries.matmul_t(keys)?;
    let mut out = Matrix::zeros(queries.rows(), values.classes());
    for b in 0..queries.rows() {
        let aff = affinity.row(b);
        let row = out.row_mut(b);
        for (j, &class) in values.labels().iter().enumerate() {
            row[class] += phi(aff[j], beta);
        }
    }
    Ok(out)
}

/// Learnable CLIP and DINO keys over frozen one-hot values.
#[derive(Debug, Clone, PartialEq)]
pub struct CacheModel {
    keys_clip: Matrix,
    keys_dino: Matrix,
    values: OneHotLabels,
    beta: f64,
}

impl CacheModel {
    /// Builds a fresh cache from normalized support banks. Key rows must be
    /// unit-norm here; trained caches come from [`CacheModel::from_parts`].
    pub fn build(
        support_clip: &EmbeddingBank,
        support_dino: &EmbeddingBank,
        values: OneHotLabels,
        beta: f64,
    ) -> Result<Self> {
        check_unit_rows(support_clip.features(), "clip key")?;
        check_unit_rows(support_dino.features(), "dino key")?;
        Self::from_parts(
            support_clip.features().clone(),
            support_dino.features().clone(),
            values,
            beta,
        )
    }

    pub fn from_parts(
        keys_clip: Matrix,
        keys_dino: Matrix,
        values: OneHotLabels,
        beta: f64,
    ) -> Result<Self> {
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(Error::Config(format!("beta must be positive, got {beta}")));
        }
        if keys_clip.rows() != values.rows() || keys_dino.rows() != values.rows() {
            return Err(Error::Shape(format!(
                "key rows ({}, {}) must equal value rows {}",
                keys_clip.rows(),
                keys_dino.rows(),
                values.rows()
            )));
        }
        if values.rows() == 0 {
            return Err(Error::Shape("cache has no entries".into()));
        }
        if !keys_clip.all_finite() || !keys_dino.all_finite() {
            return Err(Error::Shape("cache keys contain non-finite values".into()));
        }
        Ok(Self {
            keys_clip,
            keys_dino,
            values,
            beta,
        })
    }

    pub fn keys_clip(&self) -> &Matrix {
        &self.keys_clip
    }

    pub fn keys_dino(&self) -> &Matrix {
        &self.keys_dino
    }

    pub(crate) fn keys_mut(&mut self) -> (&mut Matrix, &mut Matrix) {
        (&mut self.keys_clip, &mut self.keys_dino)
    }

    pub fn values(&self) -> &OneHotLabels {
        &self.values
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn with_beta(mut self, beta: f64) -> Result<Self> {
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(Error::Config(format!("beta must be positive, got {beta}")));
        }
        self.beta = beta;
        Ok(self)
    }

    pub fn classes(&self) -> usize {
        self.values.classes()
    }

    /// The three raw logit matrices for a batch of paired queries.
    pub fn logits(
        &self,
        head: &ZeroShotHead,
        queries_clip: &Matrix,
        queries_dino: &Matrix,
    ) -> Result<LogitBundle> {
        if head.classes() != self.classes() {
            return Err(Error::Shape(format!(
                "text head has {} classes, cache has {}",
                head.classes(),
                self.classes()
            )));
        }
        if queries_clip.rows() != queries_dino.rows() {
            return Err(Error::Shape("query banks are not paired".into()));
        }
        LogitBundle::new(
            zero_shot_logits(queries_clip, head)?,
            branch_logits(queries_clip, &self.keys_clip, &self.values, self.beta)?,
            branch_logits(queries_dino, &self.keys_dino, &self.values, self.beta)?,
        )
    }

    /// MKCP encoding: magic, version, beta (f64), then the clip keys, dino
    /// keys and one-hot values as three MKEB blocks carrying the labels.
    pub fn to_bytes(&self) -> Vec<u8> {
        let labels = self.values.labels().to_vec();
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.beta.to_le_bytes());
        for m in [&self.keys_clip, &self.keys_dino, &self.values.to_matrix()] {
            // Shapes were validated at construction.
            EmbeddingBank::labeled(m.clone(), labels.clone())
                .unwrap()
                .encode(&mut out);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 {
            return Err(Error::Truncated {
                expected: 16,
                actual: bytes.len(),
            });
        }
        let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::BadMagic {
                expected: CHECKPOINT_MAGIC,
                found: magic,
            });
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let beta = f64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let mut rest = &bytes[16..];
        let mut blocks = Vec::with_capacity(3);
        for _ in 0..3 {
            let (bank, used) = EmbeddingBank::decode(rest)?;
            blocks.push(bank);
            rest = &rest[used..];
        }
        if !rest.is_empty() {
            return Err(Error::MalformedHeader(format!(
                "{} trailing bytes after checkpoint",
                rest.len()
            )));
        }
        let values_bank = blocks.pop().unwrap();
        let labels = values_bank.require_labels()?.to_vec();
        let values = one_hot(&labels, values_bank.dim())?;
        if &values.to_matrix() != values_bank.features() {
            return Err(Error::MalformedHeader(
                "value block is not the one-hot encoding of its labels".into(),
            ));
        }
        let keys_dino = blocks.pop().unwrap().into_features();
        let keys_clip = blocks.pop().unwrap().into_features();
        Self::from_parts(keys_clip, keys_dino, values, beta)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(v: &[f64]) -> Vec<f64> {
        let n = norm(v);
        v.iter().map(|x| x / n).collect()
    }

    #[test]
    fn phi_values() {
        assert_eq!(phi(1.0, 0.6), 1.0);
        assert_eq!(phi(1.0, 17.0), 1.0);
        assert!((phi(0.0, 0.6) - 0.548812).abs() < 5e-7);
        assert!((phi(0.5, 0.6) - 0.740818).abs() < 5e-7);
    }

    #[test]
    fn phi_is_increasing() {
        let xs: Vec<f64> = (-10..=10).map(|i| i as f64 / 10.0).collect();
        for w in xs.windows(2) {
            assert!(phi(w[0], 0.6) < phi(w[1], 0.6));
            assert!(phi(w[1], 0.6) <= 1.0 && phi(w[0], 0.6) > 0.0);
        }
    }

    #[test]
    fn zero_shot_self_similarity_and_orthogonality() {
        let head = ZeroShotHead::new(
            Matrix::from_rows(&[
                [1.0, 0.0, 0.0, 0.0],
                [0.0, 1.0, 0.0, 0.0],
                [0.0, 0.0, 1.0, 0.0],
            ])
            .unwrap(),
        )
        .unwrap();
        let q = Matrix::from_rows(&[[0.0, 0.0, 1.0, 0.0], [0.0, 0.0, 0.0, 1.0]]).unwrap();
        let z = zero_shot_logits(&q, &head).unwrap();
        assert_eq!(z.row(0), &[0.0, 0.0, 1.0]);
        assert_eq!(z.row(1), &[0.0, 0.0, 0.0]);
        assert!(zero_shot_logits(&Matrix::zeros(1, 3), &head).is_err());
    }

    #[test]
    fn self_match_dominates() {
        let keys = Matrix::from_rows(&[unit(&[1.0, 0.2, 0.0]), unit(&[0.1, 1.0, 0.3])]).unwrap();
        let values = one_hot(&[0, 1], 2).unwrap();
        let q = Matrix::from_rows(&[keys.row(0).to_vec()]).unwrap();
        let p = branch_logits(&q, &keys, &values, 0.6).unwrap();
        assert!((p.get(0, 0) - 1.0).abs() < 1e-15);
        assert!(p.get(0, 1) < 1.0);
    }

    #[test]
    fn orthogonal_query_gets_base_weight() {
        let keys = Matrix::from_rows(&[
            [1.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [0.0, 1.0, 0.0],
        ])
        .unwrap();
        let values = one_hot(&[0, 0, 1, 1], 2).unwrap();
        let q = Matrix::from_rows(&[[0.0, 0.0, 1.0]]).unwrap();
        let p = branch_logits(&q, &keys, &values, 0.6).unwrap();
        for c in 0..2 {
            assert!((p.get(0, c) - 2.0 * 0.548812).abs() < 1e-6);
        }
    }

    #[test]
    fn branch_shape_errors() {
        let values = one_hot(&[0, 1], 2).unwrap();
        assert!(branch_logits(&Matrix::zeros(1, 3), &Matrix::zeros(3, 3), &values, 0.6).is_err());
        assert!(branch_logits(&Matrix::zeros(1, 2), &Matrix::zeros(2, 3), &values, 0.6).is_err());
    }

    #[test]
    fn rejects_non_positive_beta() {
        let values = one_hot(&[0, 1], 2).unwrap();
        assert!(
            CacheModel::from_parts(Matrix::zeros(2, 2), Matrix::zeros(2, 2), values, 0.0).is_err()
        );
    }

    #[test]
    fn checkpoint_round_trip() {
        let values = one_hot(&[0, 1, 1], 2).unwrap();
        let cache = CacheModel::from_parts(
            Matrix::from_vec(3, 2, vec![0.5, -0.25, 1.0, 0.0, 0.125, 2.0]).unwrap(),
            Matrix::from_vec(3, 1, vec![1.0, -1.0, 0.75]).unwrap(),
            values,
            0.6,
        )
        .unwrap();
        let bytes = cache.to_bytes();
        let back = CacheModel::from_bytes(&bytes).unwrap();
        assert_eq!(back, cache);
        assert_eq!(back.to_bytes(), bytes);
        assert!(CacheModel::from_bytes(&bytes[..bytes.len() - 2]).is_err());
    }
}
