//! Deterministic synthetic datasets written in the on-disk formats.
//!
//! * [`complementary_views`]: three classes where the CLIP view separates
//!   classes 0 and 1 but embeds class-2 queries like class 0, the DINO view
//!   separates 1 and 2 but embeds class-0 queries like class 1, and the text
//!   head is only weakly informative.
//! * [`gaussian_clusters`]: isotropic clusters around random unit means in
//!   both views, with a noisy text head built from the CLIP means.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::adapter::ZeroShotHead;
use crate::databank::{bank_names as names, write_bank, EmbeddingBank, Manifest};
use crate::error::{Error, Result};
use crate::expansion::{text_scores, write_scores};
use crate::matrix::{norm, Matrix};

/// A complete dataset held in memory.
#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub class_names: Vec<String>,
    pub shots: usize,
    pub synthetic_k: Option<usize>,
    pub seed: u64,
    pub support_clip: EmbeddingBank,
    pub support_dino: EmbeddingBank,
    pub query_clip: EmbeddingBank,
    pub query_dino: EmbeddingBank,
    pub text_head: EmbeddingBank,
    /// Paired CLIP and DINO candidate banks.
    pub candidates: Option<(EmbeddingBank, EmbeddingBank)>,
}

impl SyntheticDataset {
    /// Writes every bank plus `manifest.json` into `dir`, returning the manifest path.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut banks = BTreeMap::new();
        let mut put = |name: &str, bank: &EmbeddingBank| -> Result<()> {
            let file = format!("{name}.mkeb");
            write_bank(dir.join(&file), bank)?;
            banks.insert(name.to_string(), file);
            Ok(())
        };
        put(names::CLIP_SUPPORT, &self.support_clip)?;
        put(names::DINO_SUPPORT, &self.support_dino)?;
        put(names::CLIP_QUERY, &self.query_clip)?;
        put(names::DINO_QUERY, &self.query_dino)?;
        put(names::TEXT_HEAD, &self.text_head)?;
        if let Some((clip, dino)) = &self.candidates {
            put(names::CLIP_CANDIDATES, clip)?;
            put(names::DINO_CANDIDATES, dino)?;
            let head = ZeroShotHead::from_bank(self.text_head.clone().normalized()?)?;
            let scores = text_scores(&clip.clone().normalized()?, &head)?;
            let file = "candidate_scores.mksc".to_string();
            write_scores(dir.join(&file), &scores)?;
            banks.insert(names::CANDIDATE_SCORES.to_string(), file);
        }
        let manifest = Manifest {
            class_names: self.class_names.clone(),
            shots: self.shots,
            seed: self.seed,
            banks,
            synthetic_k: self.synthetic_k,
            root: dir.to_path_buf(),
        };
        let path = dir.join("manifest.json");
        manifest.save(&path)?;
        Ok(path)
    }
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Rounds through `f32` so in-memory banks equal their on-disk form.
fn unit_f32(v: &mut [f64]) {
    let n = norm(v);
    v.iter_mut().for_each(|x| *x = f64::from((*x / n) as f32));
}

fn bank(rows: Vec<Vec<f64>>, labels: Option<Vec<usize>>) -> EmbeddingBank {
    // Rows are generated with a fixed width.
    EmbeddingBank::new(Matrix::from_rows(&rows).unwrap(), labels).unwrap()
}

const NOISE: f64 = 0.1;
const TEXT_SIGNAL: f64 = 0.08;
const TEXT_NOISE: f64 = 0.08;
const CLIP_DIM: usize = 8;
const DINO_DIM: usize = 6;

/// Prototype axis of a class in the CLIP view. Support samples sit on their
/// own axis; class-2 queries land on class 0's axis.
fn clip_axis(class: usize, query: bool) -> usize {
    if query && class == 2 {
        0
    } else {
        class
    }
}

/// Prototype axis in the DINO view; class-0 queries land on class 1's axis.
fn dino_axis(class: usize, query: bool) -> usize {
    if query && class == 0 {
        1
    } else {
        class
    }
}

/// CLIP layout: 3 prototype dims, 3 text dims, 2 free dims.
fn clip_sample(class: usize, query: bool, text_signal: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut v = vec![0.0; CLIP_DIM];
    v[clip_axis(class, query)] = 1.0;
    for d in [0, 1, 2, 6, 7] {
        v[d] += NOISE * gaussian(rng);
    }
    v[3 + class] += text_signal;
    for d in 3..6 {
        v[d] += TEXT_NOISE * gaussian(rng);
    }
    unit_f32(&mut v);
    v
}

/// DINO layout: 3 prototype dims, 3 free dims.
fn dino_sample(class: usize, query: bool, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut v = vec![0.0; DINO_DIM];
    v[dino_axis(class, query)] = 1.0;
    for x in v.iter_mut() {
        *x += NOISE * gaussian(rng);
    }
    unit_f32(&mut v);
    v
}

/// The three-class complementary-views dataset.
///
/// 4 support and 30 query samples per class, plus 16 candidates per class
/// whose text alignment varies so that filtering has something to rank.
pub fn complementary_views(seed: u64) -> SyntheticDataset {
    const SHOTS: usize = 4;
    const QUERIES: usize = 30;
    const CANDIDATES: usize = 16;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut draw = |per_class: usize, query: bool, text: &mut dyn FnMut(&mut ChaCha8Rng) -> f64| {
        let (mut clip, mut dino, mut labels) = (Vec::new(), Vec::new(), Vec::new());
        for class in 0..3 {
            for _ in 0..per_class {
                let t = text(&mut rng);
                clip.push(clip_sample(class, query, t, &mut rng));
                dino.push(dino_sample(class, query, &mut rng));
                labels.push(class);
            }
        }
        (bank(clip, Some(labels.clone())), bank(dino, Some(labels)))
    };
    let (support_clip, support_dino) = draw(SHOTS, false, &mut |_| TEXT_SIGNAL);
    let (query_clip, query_dino) = draw(QUERIES, true, &mut |_| TEXT_SIGNAL);
    let (cand_clip, cand_dino) = draw(CANDIDATES, false, &mut |r| {
        4.0 * TEXT_SIGNAL * r.gen::<f64>()
    });

    let text_rows = (0..3)
        .map(|c| {
            let mut row = vec![0.0; CLIP_DIM];
            row[3 + c] = 1.0;
            row
        })
        .collect();

    SyntheticDataset {
        class_names: vec!["alpha".into(), "beta".into(), "gamma".into()],
        shots: SHOTS,
        synthetic_k: Some(2),
        seed,
        support_clip,
        support_dino,
        query_clip,
        query_dino,
        text_head: bank(text_rows, None),
        candidates: Some((cand_clip, cand_dino)),
    }
}

/// Parameters of the Gaussian-cluster benchmark.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClusterSpec {
    pub classes: usize,
    pub dim: usize,
    pub shots: usize,
    pub queries: usize,
    pub candidates: usize,
    /// Per-dimension standard deviation of samples around their mean.
    pub noise: f64,
    /// Per-dimension noise added to the CLIP means to form the text head.
    pub text_noise: f64,
    pub seed: u64,
}

impl Default for ClusterSpec {
    fn default() -> Self {
        Self {
            classes: 10,
            dim: 16,
            shots: 16,
            queries: 20,
            candidates: 8,
            noise: 0.3,
            text_noise: 0.35,
            seed: 7,
        }
    }
}

fn random_unit(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut v: Vec<f64> = (0..dim).map(|_| gaussian(rng)).collect();
    unit_f32(&mut v);
    v
}

fn around(mean: &[f64], noise: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut v: Vec<f64> = mean.iter().map(|m| m + noise * gaussian(rng)).collect();
    unit_f32(&mut v);
    v
}

/// Isotropic clusters in two independent views.
pub fn gaussian_clusters(spec: ClusterSpec) -> SyntheticDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let clip_means: Vec<Vec<f64>> = (0..spec.classes)
        .map(|_| random_unit(spec.dim, &mut rng))
        .collect();
    let dino_means: Vec<Vec<f64>> = (0..spec.classes)
        .map(|_| random_unit(spec.dim, &mut rng))
        .collect();
    let text_rows = clip_means
        .iter()
        .map(|m| around(m, spec.text_noise, &mut rng))
        .collect();

    let mut draw = |per_class: usize, noise: f64| {
        let (mut clip, mut dino, mut labels) = (Vec::new(), Vec::new(), Vec::new());
        for class in 0..spec.classes {
            for _ in 0..per_class {
                clip.push(around(&clip_means[class], noise, &mut rng));
                dino.push(around(&dino_means[class], noise, &mut rng));
                labels.push(class);
            }
        }
        (bank(clip, Some(labels.clone())), bank(dino, Some(labels)))
    };
    let (support_clip, support_dino) = draw(spec.shots, spec.noise);
    let (query_clip, query_dino) = draw(spec.queries, spec.noise);
    let candidates = (spec.candidates > 0).then(|| draw(spec.candidates, 1.5 * spec.noise));

    SyntheticDataset {
        class_names: (0..spec.classes).map(|c| format!("class_{c:02}")).collect(),
        shots: spec.shots,
        synthetic_k: candidates
            .as_ref()
            .map(|_| spec.candidates.min(spec.shots) / 2),
        seed: spec.seed,
        support_clip,
        support_dino,
        query_clip,
        query_dino,
        text_head: bank(text_rows, None),
        candidates,
    }
}
