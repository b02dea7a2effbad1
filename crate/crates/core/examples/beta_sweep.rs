//! Sweeps the sharpness of the affinity modulator and compares ensemble
//! modes on the complementary-views fixture, without training.
//!
//! cargo run --example beta_sweep

use mkcache::cli::BETA_GRID;
use mkcache::fixtures::complementary_views;
use mkcache::pipeline::Dataset;
use mkcache::EnsembleMode;

fn main() -> mkcache::Result<()> {
    let dir = std::env::temp_dir().join("mkcache_beta_sweep");
    let data = Dataset::load(complementary_views(0).write(&dir)?)?;
    let support = data.support(4, 0, 0)?;

    let modes = [
        EnsembleMode::ClipOnly,
        EnsembleMode::DinoOnly,
        EnsembleMode::Average,
        EnsembleMode::AdaptiveZsBase,
    ];
    print!("beta");
    for m in modes {
        print!("\t{m}");
    }
    println!();
    for beta in BETA_GRID {
        let cache = support.build_cache(beta)?;
        print!("{beta}");
        for m in modes {
            print!("\t{:.3}", data.evaluate(&cache, m)?.accuracy);
        }
        println!();
    }
    Ok(())
}
