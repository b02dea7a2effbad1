//! Filters synthetic candidates by text similarity and builds a cache with
//! no real support at all, then evaluates it.
//!
//! cargo run --example zero_shot_expansion

use mkcache::fixtures::complementary_views;
use mkcache::pipeline::Dataset;
use mkcache::EnsembleMode;

fn main() -> mkcache::Result<()> {
    let dir = std::env::temp_dir().join("mkcache_zero_shot");
    let manifest = complementary_views(0).write(&dir)?;
    let data = Dataset::load(&manifest)?;
    let pool = data.candidates.as_ref().expect("fixture ships candidates");
    println!("{} candidates over {} classes", pool.rows(), data.classes());

    for k_prime in [1, 2, 4, 8] {
        let support = data.support(0, k_prime, 0)?;
        let cache = support.build_cache(0.6)?;
        let report = data.evaluate(&cache, EnsembleMode::AdaptiveZsBase)?;
        println!(
            "K'={k_prime:<2} cache rows {:<3} {report}",
            support.clip.rows()
        );
    }
    let few_shot = data.support(4, 2, 0)?;
    let report = data.evaluate(&few_shot.build_cache(0.6)?, EnsembleMode::AdaptiveZsBase)?;
    println!("4 real + 2 synthetic per class: {report}");
    Ok(())
}
