//! Builds a dual-key cache from a few labeled support rows and prints the
//! raw zero-shot and per-branch cache logits for one query.
//!
//! cargo run --example cache_logits

use mkcache::{one_hot, phi, CacheModel, EmbeddingBank, Matrix, ZeroShotHead};

fn unit(v: [f64; 2]) -> Vec<f64> {
    let n = (v[0] * v[0] + v[1] * v[1]).sqrt();
    vec![v[0] / n, v[1] / n]
}

fn main() -> mkcache::Result<()> {
    let labels = vec![0, 0, 1, 1];
    let clip = EmbeddingBank::labeled(
        Matrix::from_rows(&[
            unit([1.0, 0.1]),
            unit([1.0, -0.2]),
            unit([0.1, 1.0]),
            unit([-0.3, 1.0]),
        ])?,
        labels.clone(),
    )?;
    let dino = EmbeddingBank::labeled(
        Matrix::from_rows(&[
            unit([1.0, 1.0]),
            unit([1.0, 0.8]),
            unit([1.0, -1.0]),
            unit([0.7, -1.0]),
        ])?,
        labels.clone(),
    )?;
    let cache = CacheModel::build(&clip, &dino, one_hot(&labels, 2)?, 0.6)?;
    let head = ZeroShotHead::new(Matrix::from_rows(&[unit([1.0, 0.3]), unit([0.3, 1.0])])?)?;

    let qc = Matrix::from_rows(&[unit([0.9, 0.4])])?;
    let qd = Matrix::from_rows(&[unit([1.0, 0.6])])?;
    let bundle = cache.logits(&head, &qc, &qd)?;
    println!("p_zs   {:?}", bundle.p_zs.row(0));
    println!("p_clip {:?}", bundle.p_clip.row(0));
    println!("p_dino {:?}", bundle.p_dino.row(0));

    for beta in [0.5, 1.0, 5.0] {
        println!("phi at affinity 0.8, beta {beta}: {:.4}", phi(0.8, beta));
    }
    Ok(())
}
