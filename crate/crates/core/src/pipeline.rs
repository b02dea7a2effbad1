//! Dataset loading and the build/evaluate glue shared by the CLI and examples.

use std::path::Path;

use crate::adapter::{CacheModel, ZeroShotHead};
use crate::databank::{
    bank_names as names, check_paired, one_hot, sample_support_indices, EmbeddingBank, Manifest,
    OneHotLabels,
};
use crate::ensemble::EnsembleMode;
use crate::error::{Error, Result};
use crate::expansion::{expand_support, filter_top_k, load_scores, CandidatePool};
use crate::matrix::Matrix;
use crate::metrics::EvalReport;
use crate::trainer::{train, TrainConfig, TrainOutcome};

/// All banks referenced by a manifest, loaded, normalized and cross-checked.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: Manifest,
    pub support_clip: EmbeddingBank,
    pub support_dino: EmbeddingBank,
    pub query_clip: EmbeddingBank,
    pub query_dino: EmbeddingBank,
    pub head: ZeroShotHead,
    pub candidates: Option<CandidatePool>,
}

/// A support set ready to become a cache: paired banks plus one-hot values.
#[derive(Debug, Clone)]
pub struct Support {
    pub clip: EmbeddingBank,
    pub dino: EmbeddingBank,
    pub values: OneHotLabels,
}

impl Dataset {
    pub fn load(manifest_path: impl AsRef<Path>) -> Result<Self> {
        let manifest = Manifest::load(manifest_path)?;
        let classes = manifest.classes();

        let support_clip = manifest.load_bank(names::CLIP_SUPPORT)?;
        let support_dino = manifest.load_bank(names::DINO_SUPPORT)?;
        let query_clip = manifest.load_bank(names::CLIP_QUERY)?;
        let query_dino = manifest.load_bank(names::DINO_QUERY)?;
        for (a, b, what) in [
            (&support_clip, &support_dino, "support"),
            (&query_clip, &query_dino, "query"),
        ] {
            a.require_labels()
                .map_err(|_| Error::Manifest(format!("{what} banks need labels")))?;
            check_paired(a, b)?;
        }
        if support_clip.dim() != query_clip.dim() || support_dino.dim() != query_dino.dim() {
            return Err(Error::Shape("support and query widths differ".into()));
        }

        let head = ZeroShotHead::from_bank(manifest.load_bank(names::TEXT_HEAD)?)?;
        if head.classes() != classes {
            return Err(Error::Manifest(format!(
                "text head has {} rows for {classes} classes",
                head.classes()
            )));
        }
        if head.dim() != support_clip.dim() {
            return Err(Error::Shape(format!(
                "text head width {} vs clip width {}",
                head.dim(),
                support_clip.dim()
            )));
        }

        let candidates = if manifest.has_bank(names::CLIP_CANDIDATES) {
            let clip = manifest.load_bank(names::CLIP_CANDIDATES)?;
            let dino = manifest.load_bank(names::DINO_CANDIDATES)?;
            let pool = if manifest.has_bank(names::CANDIDATE_SCORES) {
                let scores = load_scores(manifest.bank_path(names::CANDIDATE_SCORES)?)?;
                CandidatePool::new(clip, dino, scores)?
            } else {
                CandidatePool::scored_by_head(clip, dino, &head)?
            };
            Some(pool)
        } else {
            None
        };

        Ok(Self {
            manifest,
            support_clip,
            support_dino,
            query_clip,
            query_dino,
            head,
            candidates,
        })
    }

    pub fn classes(&self) -> usize {
        self.manifest.classes()
    }

    /// Samples `shots` real rows per class and appends the top `k_prime`
    /// candidates per class. `shots = 0` gives a purely synthetic support.
    pub fn support(&self, shots: usize, k_prime: usize, seed: u64) -> Result<Support> {
        let classes = self.classes();
        let (clip, dino) = if shots == 0 {
            (
                EmbeddingBank::labeled(Matrix::zeros(0, self.support_clip.dim()), vec![])?,
                EmbeddingBank::labeled(Matrix::zeros(0, self.support_dino.dim()), vec![])?,
            )
        } else {
            let idx = sample_support_indices(self.support_clip.require_labels()?, shots, seed)
                .map_err(|e| self.name_class(e))?;
            (
                self.support_clip.select(&idx),
                self.support_dino.select(&idx),
            )
        };
        if shots > 0 && clip.implied_classes() < classes {
            // Labels are below `classes`, so the first absent class is `implied_classes`.
            return Err(Error::InsufficientShots {
                class: self.manifest.class_names[clip.implied_classes()].clone(),
                available: 0,
                requested: shots,
            });
        }

        if k_prime == 0 {
            if clip.rows() == 0 {
                return Err(Error::Config(
                    "empty support: need shots > 0 or a synthetic count > 0".into(),
                ));
            }
            let values = one_hot(clip.require_labels()?, classes)?;
            return Ok(Support { clip, dino, values });
        }
        let pool = self.candidates.as_ref().ok_or_else(|| {
            Error::Manifest("synthetic expansion requested but no candidate banks listed".into())
        })?;
        let filtered = filter_top_k(pool, k_prime)?;
        let (clip, dino, values) = expand_support(&clip, &dino, &filtered, classes)?;
        if values.column_sums().iter().any(|&c| c != shots + k_prime) {
            return Err(Error::Shape(format!(
                "unbalanced expanded support: per-class counts {:?}",
                values.column_sums()
            )));
        }
        Ok(Support { clip, dino, values })
    }

    fn name_class(&self, e: Error) -> Error {
        match e {
            Error::InsufficientShots {
                class,
                available,
                requested,
            } => {
                let name = class
                    .parse::<usize>()
                    .ok()
                    .and_then(|i| self.manifest.class_names.get(i).cloned())
                    .unwrap_or(class);
                Error::InsufficientShots {
                    class: name,
                    available,
                    requested,
                }
            }
            other => other,
        }
    }

    pub fn query_labels(&self) -> &[usize] {
        // Checked in `load`.
        self.query_clip.labels().unwrap()
    }

    pub fn evaluate(&self, cache: &CacheModel, mode: EnsembleMode) -> Result<EvalReport> {
        evaluate(cache, &self.head, &self.query_clip, &self.query_dino, mode)
    }
}

impl Support {
    pub fn build_cache(&self, beta: f64) -> Result<CacheModel> {
        CacheModel::build(&self.clip, &self.dino, self.values.clone(), beta)
    }

    pub fn train(
        &self,
        cache: &CacheModel,
        head: &ZeroShotHead,
        cfg: &TrainConfig,
    ) -> Result<TrainOutcome> {
        train(cache, head, &self.clip, &self.dino, cfg)
    }
}

/// Fuses the cache's logits on a labeled query set and scores them.
pub fn evaluate(
    cache: &CacheModel,
    head: &ZeroShotHead,
    query_clip: &EmbeddingBank,
    query_dino: &EmbeddingBank,
    mode: EnsembleMode,
) -> Result<EvalReport> {
    let labels = query_clip.require_labels()?;
    let bundle = cache.logits(head, query_clip.features(), query_dino.features())?;
    EvalReport::compute(&bundle.fuse(mode)?.logits, labels)
}
