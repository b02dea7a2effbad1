//! Straight-line reference implementations and random instances for tests.
//! The reference functions never call into the library's numeric code;
//! `fd` differentiates the library's own loss.
#![allow(dead_code)]

pub mod fd;

use mkcache::{one_hot, CacheModel, Matrix, ZeroShotHead};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_unit_rows(rows: usize, dim: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|_| {
            let v: Vec<f64> = (0..dim)
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / n).collect()
        })
        .collect()
}

/// A small random cache problem.
pub struct Instance {
    pub classes: usize,
    pub per_class: usize,
    pub beta: f64,
    pub keys_clip: Vec<Vec<f64>>,
    pub keys_dino: Vec<Vec<f64>>,
    pub key_labels: Vec<usize>,
    pub text: Vec<Vec<f64>>,
    pub q_clip: Vec<Vec<f64>>,
    pub q_dino: Vec<Vec<f64>>,
    pub q_labels: Vec<usize>,
}

impl Instance {
    pub fn random(
        seed: u64,
        classes: usize,
        per_class: usize,
        clip_dim: usize,
        dino_dim: usize,
        batch: usize,
    ) -> Self {
        let mut r = rng(seed);
        let m = classes * per_class;
        let key_labels = (0..m).map(|j| j / per_class).collect();
        let beta = r.gen_range(0.3..2.0);
        Self {
            classes,
            per_class,
            beta,
            keys_clip: random_unit_rows(m, clip_dim, &mut r),
            keys_dino: random_unit_rows(m, dino_dim, &mut r),
            key_labels,
            text: random_unit_rows(classes, clip_dim, &mut r),
            q_clip: random_unit_rows(batch, clip_dim, &mut r),
            q_dino: random_unit_rows(batch, dino_dim, &mut r),
            q_labels: (0..batch).map(|_| r.gen_range(0..classes)).collect(),
        }
    }

    /// Random sizes within `N <= 5`, `K + K' <= 4`, `C <= 8`.
    pub fn random_small(seed: u64) -> Self {
        let mut r = rng(seed ^ 0x5eed);
        let classes = r.gen_range(2..=5);
        let per_class = r.gen_range(1..=4);
        let clip_dim = r.gen_range(2..=8);
        let dino_dim = r.gen_range(2..=8);
        let batch = r.gen_range(1..=6);
        Self::random(seed, classes, per_class, clip_dim, dino_dim, batch)
    }

    pub fn cache(&self) -> CacheModel {
        CacheModel::from_parts(
            Matrix::from_rows(&self.keys_clip).unwrap(),
            Matrix::from_rows(&self.keys_dino).unwrap(),
            one_hot(&self.key_labels, self.classes).unwrap(),
            self.beta,
        )
        .unwrap()
    }

    pub fn head(&self) -> ZeroShotHead {
        ZeroShotHead::new(Matrix::from_rows(&self.text).unwrap()).unwrap()
    }

    pub fn queries(&self) -> (Matrix, Matrix) {
        (
            Matrix::from_rows(&self.q_clip).unwrap(),
            Matrix::from_rows(&self.q_dino).unwrap(),
        )
    }

    /// Reference fused logits for every query.
    pub fn reference_fused(&self, mode: &str) -> Vec<Vec<f64>> {
        (0..self.q_clip.len())
            .map(|b| {
                let mut zs = vec![0.0; self.classes];
                for n in 0..self.classes {
                    for d in 0..self.text[n].len() {
                        zs[n] += self.q_clip[b][d] * self.text[n][d];
                    }
                }
                let clip = reference_branch(
                    &self.q_clip[b],
                    &self.keys_clip,
                    &self.key_labels,
                    self.classes,
                    self.beta,
                );
                let dino = reference_branch(
                    &self.q_dino[b],
                    &self.keys_dino,
                    &self.key_labels,
                    self.classes,
                    self.beta,
                );
                reference_fuse(&zs, &clip, &dino, mode)
            })
            .collect()
    }
}

/// `sum over keys j of class n of exp(-beta (1 - q.k_j))`, by explicit loops.
pub fn reference_branch(
    q: &[f64],
    keys: &[Vec<f64>],
    labels: &[usize],
    classes: usize,
    beta: f64,
) -> Vec<f64> {
    let mut out = vec![0.0; classes];
    for n in 0..classes {
        for j in 0..keys.len() {
            if labels[j] != n {
                continue;
            }
            let mut s = 0.0;
            for d in 0..q.len() {
                s += q[d] * keys[j][d];
            }
            out[n] += (-beta * (1.0 - s)).exp();
        }
    }
    out
}

pub fn reference_z(p: &[f64]) -> Vec<f64> {
    let n = p.len() as f64;
    let mut mean = 0.0;
    for x in p {
        mean += x;
    }
    mean /= n;
    let mut var = 0.0;
    for x in p {
        var += (x - mean) * (x - mean);
    }
    let sd = (var / n).sqrt();
    p.iter().map(|x| (x - mean) / sd).collect()
}

pub fn reference_fuse(zs: &[f64], clip: &[f64], dino: &[f64], mode: &str) -> Vec<f64> {
    let z0 = reference_z(zs);
    let zc = reference_z(clip);
    let zd = reference_z(dino);
    let n = z0.len();
    let mut out = vec![0.0; n];
    let weights = |base: &[f64]| {
        let mut wc = 0.0;
        let mut wd = 0.0;
        for i in 0..n {
            wc += zc[i] * base[i];
            wd += zd[i] * base[i];
        }
        let ac = 1.0 / (1.0 + (wd - wc).exp());
        (ac, 1.0 - ac)
    };
    let (ac, ad) = match mode {
        "adaptive_zs_base" => weights(&z0),
        "adaptive_clip_base" => weights(&zc),
        "adaptive_dino_base" => weights(&zd),
        "average" => (0.5, 0.5),
        "clip_only" => (1.0, 0.0),
        "dino_only" => (0.0, 1.0),
        "maximum" => {
            for i in 0..n {
                out[i] = z0[i] + if zc[i] > zd[i] { zc[i] } else { zd[i] };
            }
            return out;
        }
        other => panic!("unknown mode {other}"),
    };
    for i in 0..n {
        out[i] = z0[i] + ac * zc[i] + ad * zd[i];
    }
    out
}

/// Mean `-log softmax(row)[label]` computed without the max shift.
pub fn reference_nll(rows: &[Vec<f64>], labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for (row, &l) in rows.iter().zip(labels) {
        let mut s = 0.0;
        for x in row {
            s += x.exp();
        }
        total += -(row[l].exp() / s).ln();
    }
    total / labels.len() as f64
}

/// AURC by its definition: rank by max softmax probability (stable), average
/// the error rate of every prefix.
pub fn reference_aurc(rows: &[Vec<f64>], labels: &[usize]) -> f64 {
    let conf: Vec<f64> = rows
        .iter()
        .map(|r| {
            let s: f64 = r.iter().map(|x| x.exp()).sum();
            r.iter().map(|x| x.exp() / s).fold(f64::MIN, f64::max)
        })
        .collect();
    let wrong: Vec<bool> = rows
        .iter()
        .zip(labels)
        .map(|(r, &l)| {
            let mut best = 0;
            for i in 1..r.len() {
                if r[i] > r[best] {
                    best = i;
                }
            }
            best != l
        })
        .collect();
    let mut order: Vec<usize> = (0..rows.len()).collect();
    // Insertion sort: descending confidence, ascending index on ties.
    for i in 1..order.len() {
        let mut j = i;
        while j > 0 && conf[order[j]] > conf[order[j - 1]] {
            order.swap(j, j - 1);
            j -= 1;
        }
    }
    let mut sum = 0.0;
    for k in 1..=order.len() {
        let errs = order[..k].iter().filter(|&&i| wrong[i]).count();
        sum += errs as f64 / k as f64;
    }
    sum / order.len() as f64
}

pub fn to_rows(m: &Matrix) -> Vec<Vec<f64>> {
    m.iter_rows().map(|r| r.to_vec()).collect()
}
