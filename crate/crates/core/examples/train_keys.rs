//! Trains both key matrices with AdamW and a cosine schedule on a
//! Gaussian-cluster benchmark, then compares against the untrained cache.
//!
//! cargo run --release --example train_keys

use mkcache::fixtures::{gaussian_clusters, ClusterSpec};
use mkcache::pipeline::Dataset;
use mkcache::TrainConfig;

fn main() -> mkcache::Result<()> {
    let dir = std::env::temp_dir().join("mkcache_train_keys");
    let manifest = gaussian_clusters(ClusterSpec::default()).write(&dir)?;
    let data = Dataset::load(&manifest)?;
    let cfg = TrainConfig {
        seed: data.manifest.seed,
        ..TrainConfig::default()
    };

    let support = data.support(data.manifest.shots, 0, cfg.seed)?;
    let cache = support.build_cache(cfg.beta_sharpness)?;
    println!("untrained  {}", data.evaluate(&cache, cfg.mode)?);

    let out = support.train(&cache, &data.head, &cfg)?;
    for (epoch, loss) in out.loss_trace.iter().enumerate().step_by(5) {
        println!("epoch {:>2} loss {loss:.6}", epoch + 1);
    }
    println!("trained    {}", data.evaluate(&out.cache, cfg.mode)?);

    let path = dir.join("cache.mkcp");
    out.cache.save(&path)?;
    println!("checkpoint {}", path.display());
    Ok(())
}
