//! Writes a labeled embedding bank to disk, reads it back and normalizes it.
//!
//! cargo run --example bank_io

use mkcache::{load_bank, write_bank, EmbeddingBank, Matrix};

fn main() -> mkcache::Result<()> {
    let features = Matrix::from_rows(&[
        vec![3.0, 4.0, 0.0],
        vec![0.0, 0.5, 0.5],
        vec![1.0, 0.0, 0.0],
    ])?;
    let bank = EmbeddingBank::labeled(features, vec![0, 1, 1])?;

    let path = std::env::temp_dir().join("mkcache_bank_io.mkeb");
    write_bank(&path, &bank)?;
    let bytes = std::fs::metadata(&path).map(|m| m.len()).unwrap_or(0);
    println!(
        "wrote {} ({bytes} bytes: 24-byte header, f32 rows, u32 labels)",
        path.display()
    );

    let raw = load_bank(&path, false)?;
    assert_eq!(raw, bank);
    let unit = load_bank(&path, true)?;
    for (i, row) in unit.features().iter_rows().enumerate() {
        println!("row {i} label {} -> {row:?}", unit.labels().unwrap()[i]);
    }

    // Zero rows cannot be normalized.
    let zero = EmbeddingBank::new(Matrix::zeros(1, 3), None)?;
    println!("normalizing a zero row: {}", zero.normalized().unwrap_err());
    Ok(())
}
