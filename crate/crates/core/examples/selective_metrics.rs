//! Accuracy, NLL and the risk-coverage curve of a small batch.
//!
//! cargo run --example selective_metrics

use mkcache::metrics::{risk_coverage, EvalReport};
use mkcache::Matrix;

fn main() -> mkcache::Result<()> {
    let logits = Matrix::from_rows(&[
        vec![4.0, 0.0, 0.0],
        vec![0.0, 2.5, 0.5],
        vec![1.0, 1.2, 0.0],
        vec![0.3, 0.0, 0.2],
        vec![0.0, 0.0, 3.0],
    ])?;
    let labels = [0, 1, 0, 2, 2];

    let risks = risk_coverage(&logits, &labels)?;
    for (k, r) in risks.iter().enumerate() {
        println!("coverage {}/{} risk {r:.3}", k + 1, labels.len());
    }
    let report = EvalReport::compute(&logits, &labels)?;
    println!("{}", EvalReport::TSV_HEADER);
    println!("{report}");
    Ok(())
}
