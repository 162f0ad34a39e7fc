//! Regenerates the bundled corpus under `crates/core/data/corpus/`.

use crashlens::corpus::{generate, BUNDLED_CASES, BUNDLED_SEED};

fn main() -> std::io::Result<()> {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("data/corpus");
    generate(BUNDLED_CASES, BUNDLED_SEED).write_dir(&dir)?;
    println!("wrote {}", dir.display());
    Ok(())
}
