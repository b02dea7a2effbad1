//! Adaptive fusion of the zero-shot, CLIP-cache and DINO-cache logits.
//!
//! Every logit vector is first z-scored across classes (per sample,
//! population standard deviation). In the adaptive modes each cache branch
//! is weighted by the softmax of its dot product with a base vector, and the
//! result is added to the normalized zero-shot logits.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::matrix::{dot, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EnsembleMode {
    /// Weights from similarity to the zero-shot logits.
    AdaptiveZsBase,
    AdaptiveClipBase,
    AdaptiveDinoBase,
    Average,
    Maximum,
    ClipOnly,
    DinoOnly,
}

impl EnsembleMode {
    pub const ALL: [EnsembleMode; 7] = [
        EnsembleMode::ClipOnly,
        EnsembleMode::DinoOnly,
        EnsembleMode::Average,
        EnsembleMode::Maximum,
        EnsembleMode::AdaptiveClipBase,
        EnsembleMode::AdaptiveDinoBase,
        EnsembleMode::AdaptiveZsBase,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EnsembleMode::AdaptiveZsBase => "adaptive_zs_base",
            EnsembleMode::AdaptiveClipBase => "adaptive_clip_base",
            EnsembleMode::AdaptiveDinoBase => "adaptive_dino_base",
            EnsembleMode::Average => "average",
            EnsembleMode::Maximum => "maximum",
            EnsembleMode::ClipOnly => "clip_only",
            EnsembleMode::DinoOnly => "dino_only",
        }
    }

    pub fn is_adaptive(self) -> bool {
        matches!(
            self,
            EnsembleMode::AdaptiveZsBase
                | EnsembleMode::AdaptiveClipBase
                | EnsembleMode::AdaptiveDinoBase
        )
    }
}

impl Default for EnsembleMode {
    fn default() -> Self {
        EnsembleMode::AdaptiveZsBase
    }
}

impl fmt::Display for EnsembleMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EnsembleMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EnsembleMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ensemble mode {s:?}")))
    }
}

/// Z-scored vector together with the standard deviation it was divided by.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalized {
    pub z: Vec<f64>,
    pub std: f64,
}

/// Mean-centres and divides by the population standard deviation.
pub fn z_normalize_parts(logits: &[f64]) -> Result<Normalized> {
    let n = logits.len() as f64;
    if logits.len() < 2 {
        return Err(Error::Shape(format!(
            "need at least 2 classes to normalize, got {}",
            logits.len()
        )));
    }
    let mean = logits.iter().sum::<f64>() / n;
    let var = logits.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    let scale = logits.iter().fold(1.0f64, |m, x| m.max(x.abs()));
    if !(std > 1e-12 * scale) {
        return Err(Error::DegenerateLogits { sample: 0 });
    }
    Ok(Normalized {
        z: logits.iter().map(|x| (x - mean) / std).collect(),
        std,
    })
}

pub fn z_normalize(logits: &[f64]) -> Result<Vec<f64>> {
    z_normalize_parts(logits).map(|n| n.z)
}

/// Distribution similarity of each normalized branch to the normalized base.
pub fn similarity_weights(clip_n: &[f64], dino_n: &[f64], base_n: &[f64]) -> (f64, f64) {
    (dot(clip_n, base_n), dot(dino_n, base_n))
}

/// Two-way softmax with max subtraction.
pub fn softmax_pair(a: f64, b: f64) -> (f64, f64) {
    let m = a.max(b);
    let ea = (a - m).exp();
    let eb = (b - m).exp();
    let s = ea + eb;
    (ea / s, eb / s)
}

/// `zs + a_clip * clip + a_dino * dino`.
pub fn combine(zs: &[f64], clip: &[f64], dino: &[f64], a_clip: f64, a_dino: f64) -> Vec<f64> {
    zs.iter()
        .zip(clip)
        .zip(dino)
        .map(|((z, c), d)| z + a_clip * c + a_dino * d)
        .collect()
}

/// Fusion result for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleFusion {
    pub fused: Vec<f64>,
    /// Raw similarity weights, present for adaptive modes.
    pub weights: Option<(f64, f64)>,
}

/// Fuses already-normalized logits of one sample.
pub fn fuse_normalized(zs: &[f64], clip: &[f64], dino: &[f64], mode: EnsembleMode) -> SampleFusion {
    let adaptive = |base: &[f64]| {
        let (w_clip, w_dino) = similarity_weights(clip, dino, base);
        let (a_clip, a_dino) = softmax_pair(w_clip, w_dino);
        SampleFusion {
            fused: combine(zs, clip, dino, a_clip, a_dino),
            weights: Some((w_clip, w_dino)),
        }
    };
    let fixed = |fused| SampleFusion {
        fused,
        weights: None,
    };
    match mode {
        EnsembleMode::AdaptiveZsBase => adaptive(zs),
        EnsembleMode::AdaptiveClipBase => adaptive(clip),
        EnsembleMode::AdaptiveDinoBase => adaptive(dino),
        EnsembleMode::Average => fixed(combine(zs, clip, dino, 0.5, 0.5)),
        EnsembleMode::Maximum => fixed(
            zs.iter()
                .zip(clip)
                .zip(dino)
                .map(|((z, c), d)| z + c.max(*d))
                .collect(),
        ),
        EnsembleMode::ClipOnly => fixed(zs.iter().zip(clip).map(|(z, c)| z + c).collect()),
        EnsembleMode::DinoOnly => fixed(zs.iter().zip(dino).map(|(z, d)| z + d).collect()),
    }
}

/// Normalizes and fuses the raw logits of one sample.
pub fn fuse_sample(
    zs: &[f64],
    clip: &[f64],
    dino: &[f64],
    mode: EnsembleMode,
) -> Result<SampleFusion> {
    Ok(fuse_normalized(
        &z_normalize(zs)?,
        &z_normalize(clip)?,
        &z_normalize(dino)?,
        mode,
    ))
}

/// Raw zero-shot and cache logits for a batch of queries.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitBundle {
    pub p_zs: Matrix,
    pub p_clip: Matrix,
    pub p_dino: Matrix,
}

/// Fused logits plus the per-sample similarity weights (empty for
/// non-adaptive modes).
#[derive(Debug, Clone, PartialEq)]
pub struct Fused {
    pub logits: Matrix,
    pub w_clip: Vec<f64>,
    pub w_dino: Vec<f64>,
}

impl LogitBundle {
    pub fn new(p_zs: Matrix, p_clip: Matrix, p_dino: Matrix) -> Result<Self> {
        let shape = (p_zs.rows(), p_zs.cols());
        for m in [&p_clip, &p_dino] {
            if (m.rows(), m.cols()) != shape {
                return Err(Error::Shape(format!(
                    "branch logits {}x{} vs zero-shot {}x{}",
                    m.rows(),
                    m.cols(),
                    shape.0,
                    shape.1
                )));
            }
        }
        for m in [&p_zs, &p_clip, &p_dino] {
            if !m.all_finite() {
                return Err(Error::Shape("logits contain non-finite values".into()));
            }
        }
        Ok(Self {
            p_zs,
            p_clip,
            p_dino,
        })
    }

    pub fn batch(&self) -> usize {
        self.p_zs.rows()
    }

    pub fn classes(&self) -> usize {
        self.p_zs.cols()
    }

    pub fn fuse(&self, mode: EnsembleMode) -> Result<Fused> {
        let mut logits = Matrix::zeros(self.batch(), self.classes());
        let mut w_clip = Vec::new();
        let mut w_dino = Vec::new();
        for b in 0..self.batch() {
            let s = fuse_sample(
                self.p_zs.row(b),
                self.p_clip.row(b),
                self.p_dino.row(b),
                mode,
            )
            .map_err(|e| match e {
                Error::DegenerateLogits { .. } => Error::DegenerateLogits { sample: b },
                other => other,
            })?;
            logits.row_mut(b).copy_from_slice(&s.fused);
            if let Some((wc, wd)) = s.weights {
                w_clip.push(wc);
                w_dino.push(wd);
            }
        }
        Ok(Fused {
            logits,
            w_clip,
            w_dino,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn z_normalize_examples() {
        let z = z_normalize(&[1.0, 2.0, 3.0]).unwrap();
        assert!(close(&z, &[-1.224745, 0.0, 1.224745], 1e-6));
        assert_eq!(
            z_normalize(&[5.0, 5.0, 9.0, 9.0]).unwrap(),
            vec![-1.0, -1.0, 1.0, 1.0]
        );
        let p = [0.3, -1.2, 2.5, 0.01];
        let q: Vec<f64> = p.iter().map(|x| 3.0 * x + 7.0).collect();
        assert!(close(
            &z_normalize(&p).unwrap(),
            &z_normalize(&q).unwrap(),
            1e-12
        ));
    }

    #[test]
    fn z_normalize_moments() {
        let z = z_normalize(&[0.7, -0.1, 0.4, 2.0, 1.1]).unwrap();
        let n = z.len() as f64;
        assert!(z.iter().sum::<f64>().abs() < 1e-12);
        assert!((dot(&z, &z) - n).abs() < 1e-12);
    }

    #[test]
    fn constant_logits_are_degenerate() {
        assert!(matches!(
            z_normalize(&[0.1, 0.1, 0.1]),
            Err(Error::DegenerateLogits { .. })
        ));
        assert!(z_normalize(&[1.0]).is_err());
    }

    #[test]
    fn self_and_anti_similarity() {
        let base = z_normalize(&[0.2, 0.9, -0.4]).unwrap();
        let neg: Vec<f64> = base.iter().map(|x| -x).collect();
        let (w_self, w_neg) = similarity_weights(&base, &neg, &base);
        assert!((w_self - 3.0).abs() < 1e-12);
        assert!((w_neg + 3.0).abs() < 1e-12);
    }

    #[test]
    fn identical_branches_reduce_to_average() {
        let zs = [0.1, 0.5, 0.2];
        let br = [1.0, 2.0, 0.5];
        let adaptive = fuse_sample(&zs, &br, &br, EnsembleMode::AdaptiveZsBase).unwrap();
        let average = fuse_sample(&zs, &br, &br, EnsembleMode::Average).unwrap();
        let (wc, wd) = adaptive.weights.unwrap();
        assert_eq!(softmax_pair(wc, wd), (0.5, 0.5));
        assert_eq!(adaptive.fused, average.fused);
    }

    #[test]
    fn saturated_weights() {
        let (a, b) = softmax_pair(20.0, 0.0);
        assert!((a - 0.999999998).abs() < 1e-9);
        assert!((a + b - 1.0).abs() < 1e-15);
        // N = 10: clip equals the base (w = 10), dino opposes it (w = -10).
        let zs: Vec<f64> = (0..10).map(|i| ((i * 7) % 10) as f64).collect();
        let dino: Vec<f64> = zs.iter().map(|x| -x).collect();
        let s = fuse_sample(&zs, &zs, &dino, EnsembleMode::AdaptiveZsBase).unwrap();
        let (wc, wd) = s.weights.unwrap();
        assert!((wc - wd - 20.0).abs() < 1e-9);
        let zn = z_normalize(&zs).unwrap();
        let expect: Vec<f64> = zn.iter().map(|x| 2.0 * x).collect();
        assert!(close(&s.fused, &expect, 1e-7));
    }

    #[test]
    fn mode_names_round_trip() {
        for m in EnsembleMode::ALL {
            assert_eq!(m.name().parse::<EnsembleMode>().unwrap(), m);
        }
        assert!("median".parse::<EnsembleMode>().is_err());
    }

    #[test]
    fn degenerate_error_names_sample() {
        let zs = Matrix::from_rows(&[[0.1, 0.2], [0.3, 0.4]]).unwrap();
        let clip = Matrix::from_rows(&[[1.0, 2.0], [1.0, 1.0]]).unwrap();
        let bundle = LogitBundle::new(zs, clip.clone(), clip).unwrap();
        assert!(matches!(
            bundle.fuse(EnsembleMode::Average),
            Err(Error::DegenerateLogits { sample: 1 })
        ));
    }
}
