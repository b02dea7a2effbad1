//! Fuses one sample's zero-shot and cache logits under every ensemble mode.
//!
//! cargo run --example adaptive_ensemble

use mkcache::ensemble::{fuse_sample, softmax_pair};
use mkcache::matrix::argmax;
use mkcache::EnsembleMode;

fn main() -> mkcache::Result<()> {
    // The zero-shot head leans to class 2, the CLIP cache agrees, the DINO
    // cache prefers class 0.
    let zs = [0.24, 0.22, 0.25, 0.20];
    let clip = [0.4, 0.6, 1.9, 0.3];
    let dino = [3.0, 0.5, 0.7, 0.4];

    for mode in EnsembleMode::ALL {
        let f = fuse_sample(&zs, &clip, &dino, mode)?;
        let weights = match f.weights {
            Some((wc, wd)) => {
                let (ac, ad) = softmax_pair(wc, wd);
                format!("a_clip {ac:.3} a_dino {ad:.3}")
            }
            None => String::new(),
        };
        let fused: Vec<String> = f.fused.iter().map(|x| format!("{x:6.3}")).collect();
        println!(
            "{:<20} [{}] -> class {} {weights}",
            mode.name(),
            fused.join(" "),
            argmax(&f.fused)
        );
    }
    Ok(())
}
