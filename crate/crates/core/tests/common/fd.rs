//! Central-difference check of the analytic key gradients.

use mkcache::ensemble::z_normalize;
use mkcache::trainer::{batch_loss, grad_keys, GradOptions};
use mkcache::CacheModel;

use super::Instance;

const H: f64 = 1e-5;
/// Entries whose gradient is below this are compared in absolute terms.
const REL_FLOOR: f64 = 1e-6;

/// Central differences over every key entry; returns the worst relative error.
pub fn fd_check(inst: &Instance, opts: GradOptions) -> f64 {
    let cache = inst.cache();
    let head = inst.head();
    let (qc, qd) = inst.queries();
    let grads = grad_keys(&cache, &head, &qc, &qd, &inst.q_labels, opts).unwrap();
    let loss = |c: &CacheModel| batch_loss(c, &head, &qc, &qd, &inst.q_labels, opts).unwrap();
    assert!((grads.loss - loss(&cache)).abs() < 1e-12);

    let mut worst: f64 = 0.0;
    for which in 0..2 {
        let base = if which == 0 {
            cache.keys_clip()
        } else {
            cache.keys_dino()
        };
        let analytic = if which == 0 { &grads.clip } else { &grads.dino };
        for idx in 0..base.as_slice().len() {
            let shifted = |delta: f64| {
                let mut m = base.clone();
                m.as_mut_slice()[idx] += delta;
                let (kc, kd) = if which == 0 {
                    (m, cache.keys_dino().clone())
                } else {
                    (cache.keys_clip().clone(), m)
                };
                CacheModel::from_parts(kc, kd, cache.values().clone(), cache.beta()).unwrap()
            };
            let fd = (loss(&shifted(H)) - loss(&shifted(-H))) / (2.0 * H);
            let a = analytic.as_slice()[idx];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(REL_FLOOR);
            worst = worst.max(rel);
        }
    }
    worst
}

/// Smallest gap between the normalized branch logits; the maximum mode is
/// not differentiable where they cross.
pub fn min_branch_gap(inst: &Instance) -> f64 {
    let bundle = inst
        .cache()
        .logits(&inst.head(), &inst.queries().0, &inst.queries().1)
        .unwrap();
    let mut gap = f64::INFINITY;
    for b in 0..bundle.batch() {
        let zc = z_normalize(bundle.p_clip.row(b)).unwrap();
        let zd = z_normalize(bundle.p_dino.row(b)).unwrap();
        for (c, d) in zc.iter().zip(&zd) {
            gap = gap.min((c - d).abs());
        }
    }
    gap
}
