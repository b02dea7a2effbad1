//! Accuracy, negative log-likelihood and area under the risk-coverage curve.

use std::fmt;

use crate::error::{Error, Result};
use crate::matrix::{argmax, log_sum_exp, Matrix};

fn check_batch(logits: &Matrix, labels: &[usize]) -> Result<()> {
    if logits.rows() == 0 {
        return Err(Error::EmptyBatch);
    }
    if logits.rows() != labels.len() {
        return Err(Error::Shape(format!(
            "{} logit rows for {} labels",
            logits.rows(),
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= logits.cols()) {
        return Err(Error::LabelOutOfRange {
            label: bad,
            classes: logits.cols(),
        });
    }
    Ok(())
}

/// Fraction of rows whose argmax (lowest index on ties) equals the label.
pub fn accuracy(logits: &Matrix, labels: &[usize]) -> Result<f64> {
    Ok(correct_count(logits, labels)? as f64 / labels.len() as f64)
}

pub fn correct_count(logits: &Matrix, labels: &[usize]) -> Result<usize> {
    check_batch(logits, labels)?;
    Ok(logits
        .iter_rows()
        .zip(labels)
        .filter(|(row, &l)| argmax(row) == l)
        .count())
}

/// Mean `-log softmax(row)[label]`.
pub fn nll(logits: &Matrix, labels: &[usize]) -> Result<f64> {
    check_batch(logits, labels)?;
    let total: f64 = logits
        .iter_rows()
        .zip(labels)
        .map(|(row, &l)| log_sum_exp(row) - row[l])
        .sum();
    Ok(total / labels.len() as f64)
}

/// Maximum softmax probability of a row.
pub fn confidence(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (m - log_sum_exp(row)).exp()
}

/// Selective risk at each coverage level `k / batch`, with samples ranked by
/// descending confidence (ties by original index).
pub fn risk_coverage(logits: &Matrix, labels: &[usize]) -> Result<Vec<f64>> {
    check_batch(logits, labels)?;
    let conf: Vec<f64> = logits.iter_rows().map(confidence).collect();
    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.sort_by(|&a, &b| conf[b].total_cmp(&conf[a]).then(a.cmp(&b)));
    let mut errors = 0usize;
    Ok(order
        .iter()
        .enumerate()
        .map(|(k, &i)| {
            if argmax(logits.row(i)) != labels[i] {
                errors += 1;
            }
            errors as f64 / (k + 1) as f64
        })
        .collect())
}

/// Unweighted mean of the selective risks over all coverage levels.
pub fn aurc(logits: &Matrix, labels: &[usize]) -> Result<f64> {
    let risks = risk_coverage(logits, labels)?;
    Ok(risks.iter().sum::<f64>() / risks.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalReport {
    pub accuracy: f64,
    pub nll: f64,
    pub aurc: f64,
    pub n_samples: usize,
}

impl EvalReport {
    pub fn compute(logits: &Matrix, labels: &[usize]) -> Result<Self> {
        Ok(Self {
            accuracy: accuracy(logits, labels)?,
            nll: nll(logits, labels)?,
            aurc: aurc(logits, labels)?,
            n_samples: labels.len(),
        })
    }

    pub fn aurc_x1000(&self) -> f64 {
        self.aurc * 1000.0
    }

    pub const TSV_HEADER: &'static str = "accuracy\tnll\taurc_x1000\tn_samples";
}

/// `accuracy \t nll \t aurc_x1000 \t n_samples`.
impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:.6}\t{:.6}\t{:.4}\t{}",
            self.accuracy,
            self.nll,
            self.aurc_x1000(),
            self.n_samples
        )
    }
}
