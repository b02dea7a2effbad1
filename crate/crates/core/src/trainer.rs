//! Fine-tuning of the cache keys.
//!
//! The loss is the cross-entropy of the fused logits on the (expanded)
//! support set, used as its own query set. Gradients are derived by hand
//! through the modulator, the per-sample z-scoring, the similarity weights
//! and the two-way softmax. Only the two key matrices are updated; the text
//! head, the one-hot values and the query features stay frozen.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adapter::{phi, CacheModel, ZeroShotHead, DEFAULT_BETA};
use crate::databank::{check_paired, EmbeddingBank};
use crate::ensemble::{softmax_pair, z_normalize_parts, EnsembleMode, Normalized};
use crate::error::{Error, Result};
use crate::matrix::{dot, log_sum_exp, softmax, Matrix};

/// Which logits the training loss is computed on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LossTarget {
    /// Cross-entropy of the fused ensemble output.
    #[default]
    Fused,
    /// Mean of the cross-entropies of `zs + clip` and `zs + dino`, all
    /// normalized; no adaptive weights involved.
    Branches,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// Sharpness used when a cache is built for training.
    pub beta_sharpness: f64,
    pub mode: EnsembleMode,
    /// Stop the gradient at the adaptive ensemble weights.
    pub detach_weights: bool,
    pub loss_target: LossTarget,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 64,
            lr0: 1e-4,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            beta_sharpness: DEFAULT_BETA,
            mode: EnsembleMode::AdaptiveZsBase,
            detach_weights: false,
            loss_target: LossTarget::Fused,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.lr0
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("optimizer betas must lie in [0, 1)".into()));
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config(
                "eps must be positive and weight decay non-negative".into(),
            ));
        }
        if !(self.beta_sharpness > 0.0) {
            return Err(Error::Config("sharpness must be positive".into()));
        }
        Ok(())
    }

    fn grad_options(&self) -> GradOptions {
        GradOptions {
            mode: self.mode,
            detach_weights: self.detach_weights,
            loss_target: self.loss_target,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct GradOptions {
    pub mode: EnsembleMode,
    pub detach_weights: bool,
    pub loss_target: LossTarget,
}

/// Mean cross-entropy `-log softmax(row)[label]` over the batch.
pub fn ce_loss(logits: &Matrix, labels: &[usize]) -> f64 {
    let total: f64 = logits
        .iter_rows()
        .zip(labels)
        .map(|(row, &l)| log_sum_exp(row) - row[l])
        .sum();
    total / labels.len() as f64
}

/// Gradient of a z-scored vector w.r.t. its raw input.
fn z_backward(norm: &Normalized, grad_z: &[f64]) -> Vec<f64> {
    let n = grad_z.len() as f64;
    let mean_g = grad_z.iter().sum::<f64>() / n;
    let mean_gz = dot(grad_z, &norm.z) / n;
    grad_z
        .iter()
        .zip(&norm.z)
        .map(|(g, z)| (g - mean_g - z * mean_gz) / norm.std)
        .collect()
}

/// Softmax cross-entropy gradient `(softmax(row) - onehot) * scale`; returns the loss too.
fn ce_grad(row: &[f64], label: usize, scale: f64) -> (f64, Vec<f64>) {
    let loss = log_sum_exp(row) - row[label];
    let mut g = softmax(row);
    g[label] -= 1.0;
    g.iter_mut().for_each(|v| *v *= scale);
    (loss, g)
}

struct BranchForward {
    modulated: Vec<f64>,
    norm: Normalized,
}

fn branch_forward(
    query: &[f64],
    keys: &Matrix,
    labels: &[usize],
    classes: usize,
    beta: f64,
) -> Result<BranchForward> {
    let mut logits = vec![0.0; classes];
    let modulated: Vec<f64> = (0..keys.rows())
        .map(|j| phi(dot(query, keys.row(j)), beta))
        .collect();
    for (e, &c) in modulated.iter().zip(labels) {
        logits[c] += e;
    }
    Ok(BranchForward {
        modulated,
        norm: z_normalize_parts(&logits)?,
    })
}

/// Accumulates `dL/dkeys` for one branch given `dL/dz` of its normalized logits.
fn branch_backward(
    fwd: &BranchForward,
    grad_z: &[f64],
    query: &[f64],
    labels: &[usize],
    beta: f64,
    grad_keys: &mut Matrix,
) {
    let grad_logits = z_backward(&fwd.norm, grad_z);
    for (j, (&c, &e)) in labels.iter().zip(&fwd.modulated).enumerate() {
        let g_aff = grad_logits[c] * e * beta;
        if g_aff != 0.0 {
            for (gk, q) in grad_keys.row_mut(j).iter_mut().zip(query) {
                *gk += g_aff * q;
            }
        }
    }
}

/// Mean batch loss and its gradients with respect to both key matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct KeyGradients {
    pub loss: f64,
    pub clip: Matrix,
    pub dino: Matrix,
}

impl KeyGradients {
    pub fn max_abs(&self) -> f64 {
        self.clip
            .as_slice()
            .iter()
            .chain(self.dino.as_slice())
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

/// Reverse-mode gradient of the mean training loss w.r.t. the cache keys.
pub fn grad_keys(
    cache: &CacheModel,
    head: &ZeroShotHead,
    queries_clip: &Matrix,
    queries_dino: &Matrix,
    labels: &[usize],
    opts: GradOptions,
) -> Result<KeyGradients> {
    let batch = labels.len();
    if batch == 0 {
        return Err(Error::EmptyBatch);
    }
    if queries_clip.rows() != batch || queries_dino.rows() != batch {
        return Err(Error::Shape("queries and labels disagree in length".into()));
    }
    if queries_clip.cols() != cache.keys_clip().cols()
        || queries_dino.cols() != cache.keys_dino().cols()
        || head.dim() != cache.keys_clip().cols()
    {
        return Err(Error::Shape("query, key and text widths disagree".into()));
    }
    let classes = cache.classes();
    if head.classes() != classes {
        return Err(Error::Shape(
            "text head and cache disagree on classes".into(),
        ));
    }
    let value_labels = cache.values().labels();
    let beta = cache.beta();
    let scale = 1.0 / batch as f64;

    let mut grad_clip = Matrix::zeros(cache.keys_clip().rows(), cache.keys_clip().cols());
    let mut grad_dino = Matrix::zeros(cache.keys_dino().rows(), cache.keys_dino().cols());
    let mut loss = 0.0;

    for b in 0..batch {
        let with_sample = |e: Error| match e {
            Error::DegenerateLogits { .. } => Error::DegenerateLogits { sample: b },
            other => other,
        };
        let q_clip = queries_clip.row(b);
        let q_dino = queries_dino.row(b);
        let label = labels[b];
        if label >= classes {
            return Err(Error::LabelOutOfRange { label, classes });
        }

        let zs_raw: Vec<f64> = head.text().iter_rows().map(|t| dot(q_clip, t)).collect();
        let zs = z_normalize_parts(&zs_raw).map_err(with_sample)?.z;
        let clip = branch_forward(q_clip, cache.keys_clip(), value_labels, classes, beta)
            .map_err(with_sample)?;
        let dino = branch_forward(q_dino, cache.keys_dino(), value_labels, classes, beta)
            .map_err(with_sample)?;
        let (zc, zd) = (&clip.norm.z, &dino.norm.z);

        let (gz_clip, gz_dino) = match opts.loss_target {
            LossTarget::Branches => {
                let fc: Vec<f64> = zs.iter().zip(zc).map(|(a, b)| a + b).collect();
                let fd: Vec<f64> = zs.iter().zip(zd).map(|(a, b)| a + b).collect();
                let (lc, gc) = ce_grad(&fc, label, 0.5 * scale);
                let (ld, gd) = ce_grad(&fd, label, 0.5 * scale);
                loss += 0.5 * (lc + ld);
                (gc, gd)
            }
            LossTarget::Fused => {
                let (fused, weights) = fused_forward(&zs, zc, zd, opts.mode);
                let (l, g) = ce_grad(&fused, label, scale);
                loss += l;
                fused_backward(&g, &zs, zc, zd, opts.mode, weights, opts.detach_weights)
            }
        };

        branch_backward(&clip, &gz_clip, q_clip, value_labels, beta, &mut grad_clip);
        branch_backward(&dino, &gz_dino, q_dino, value_labels, beta, &mut grad_dino);
    }

    Ok(KeyGradients {
        loss: loss * scale,
        clip: grad_clip,
        dino: grad_dino,
    })
}

fn fused_forward(zs: &[f64], zc: &[f64], zd: &[f64], mode: EnsembleMode) -> (Vec<f64>, (f64, f64)) {
    let out = crate::ensemble::fuse_normalized(zs, zc, zd, mode);
    let a = match out.weights {
        Some((wc, wd)) => softmax_pair(wc, wd),
        None => (0.5, 0.5),
    };
    (out.fused, a)
}

/// `dL/dz_clip`, `dL/dz_dino` from `dL/dfused`. The zero-shot path carries no
/// parameters, so its gradient is dropped.
fn fused_backward(
    g: &[f64],
    zs: &[f64],
    zc: &[f64],
    zd: &[f64],
    mode: EnsembleMode,
    (a_clip, a_dino): (f64, f64),
    detach: bool,
) -> (Vec<f64>, Vec<f64>) {
    let n = g.len();
    match mode {
        EnsembleMode::ClipOnly => (g.to_vec(), vec![0.0; n]),
        EnsembleMode::DinoOnly => (vec![0.0; n], g.to_vec()),
        EnsembleMode::Average => {
            let half: Vec<f64> = g.iter().map(|v| 0.5 * v).collect();
            (half.clone(), half)
        }
        EnsembleMode::Maximum => {
            let mut gc = vec![0.0; n];
            let mut gd = vec![0.0; n];
            for i in 0..n {
                if zc[i] >= zd[i] {
                    gc[i] = g[i];
                } else {
                    gd[i] = g[i];
                }
            }
            (gc, gd)
        }
        EnsembleMode::AdaptiveZsBase
        | EnsembleMode::AdaptiveClipBase
        | EnsembleMode::AdaptiveDinoBase => {
            let mut gc: Vec<f64> = g.iter().map(|v| a_clip * v).collect();
            let mut gd: Vec<f64> = g.iter().map(|v| a_dino * v).collect();
            if detach {
                return (gc, gd);
            }
            let ga_clip = dot(g, zc);
            let ga_dino = dot(g, zd);
            let mix = a_clip * ga_clip + a_dino * ga_dino;
            let gw_clip = a_clip * (ga_clip - mix);
            let gw_dino = a_dino * (ga_dino - mix);
            let base = match mode {
                EnsembleMode::AdaptiveZsBase => zs,
                EnsembleMode::AdaptiveClipBase => zc,
                _ => zd,
            };
            let grad_base: Vec<f64> = zc
                .iter()
                .zip(zd)
                .map(|(c, d)| gw_clip * c + gw_dino * d)
                .collect();
            for i in 0..n {
                gc[i] += gw_clip * base[i];
                gd[i] += gw_dino * base[i];
            }
            match mode {
                EnsembleMode::AdaptiveClipBase => {
                    gc.iter_mut().zip(&grad_base).for_each(|(x, y)| *x += y)
                }
                EnsembleMode::AdaptiveDinoBase => {
                    gd.iter_mut().zip(&grad_base).for_each(|(x, y)| *x += y)
                }
                _ => {}
            }
            (gc, gd)
        }
    }
}

/// Loss of the same forward pass [`grad_keys`] differentiates, without gradients.
pub fn batch_loss(
    cache: &CacheModel,
    head: &ZeroShotHead,
    queries_clip: &Matrix,
    queries_dino: &Matrix,
    labels: &[usize],
    opts: GradOptions,
) -> Result<f64> {
    let bundle = cache.logits(head, queries_clip, queries_dino)?;
    match opts.loss_target {
        LossTarget::Fused => Ok(ce_loss(&bundle.fuse(opts.mode)?.logits, labels)),
        LossTarget::Branches => {
            let clip_only = bundle.fuse(EnsembleMode::ClipOnly)?.logits;
            let dino_only = bundle.fuse(EnsembleMode::DinoOnly)?.logits;
            Ok(0.5 * (ce_loss(&clip_only, labels) + ce_loss(&dino_only, labels)))
        }
    }
}

/// First and second moment accumulators for one parameter matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }
}

/// One AdamW update: decay the parameters by `lr * wd` first, then apply the
/// bias-corrected adaptive step.
pub fn adamw_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut OptimizerState,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Shape(format!(
            "params {}, grads {}, state {}",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= lr * cfg.weight_decay * params[i];
        params[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}

/// Cosine annealing from `lr0` at step 0 to zero at step `total`.
pub fn cosine_lr(step: usize, total: usize, lr0: f64) -> Result<f64> {
    if total == 0 {
        return Err(Error::Config(
            "cosine schedule needs at least one step".into(),
        ));
    }
    if step > total {
        return Err(Error::Config(format!(
            "step {step} beyond schedule length {total}"
        )));
    }
    let progress = step as f64 / total as f64;
    Ok(0.5 * lr0 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub cache: CacheModel,
    /// Mean training loss of each epoch, measured before each update.
    pub loss_trace: Vec<f64>,
}

/// Trains the cache keys on the support set, which also serves as queries.
pub fn train(
    cache: &CacheModel,
    head: &ZeroShotHead,
    support_clip: &EmbeddingBank,
    support_dino: &EmbeddingBank,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_paired(support_clip, support_dino)?;
    let labels = support_clip.require_labels()?;
    let n = labels.len();
    if n == 0 {
        return Err(Error::EmptyBatch);
    }

    let mut cache = cache.clone();
    let opts = cfg.grad_options();
    let batches_per_epoch = n.div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * batches_per_epoch;
    let mut clip_state = OptimizerState::new(cache.keys_clip().as_slice().len());
    let mut dino_state = OptimizerState::new(cache.keys_dino().as_slice().len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut step = 0;

    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let qc = support_clip.features().select_rows(chunk);
            let qd = support_dino.features().select_rows(chunk);
            let batch_labels: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let grads = grad_keys(&cache, head, &qc, &qd, &batch_labels, opts)?;
            epoch_loss += grads.loss * chunk.len() as f64;

            let lr = cosine_lr(step, total_steps, cfg.lr0)?;
            let (keys_clip, keys_dino) = cache.keys_mut();
            adamw_step(
                keys_clip.as_mut_slice(),
                grads.clip.as_slice(),
                &mut clip_state,
                lr,
                cfg,
            )?;
            adamw_step(
                keys_dino.as_mut_slice(),
                grads.dino.as_slice(),
                &mut dino_state,
                lr,
                cfg,
            )?;
            step += 1;
        }
        trace.push(epoch_loss / n as f64);
    }

    Ok(TrainOutcome {
        cache,
        loss_trace: trace,
    })
}
