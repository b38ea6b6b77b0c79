//! Regenerates `assets/codebook_v1.bin` from the default world.
//!
//! cargo run -p duotts --example build_codebook

use std::path::PathBuf;

use duotts::toy_world::{gen_corpus, Codebook, Renderer, WorldConfig};

fn main() -> duotts::Result<()> {
    let cfg = WorldConfig::default();
    let book = Codebook::fit(&cfg)?;
    let renderer = Renderer::new(&cfg)?;
    let margin = book.margin(&renderer, &gen_corpus(1, &cfg, 2000)?)?;
    println!("{margin:?}");
    if !margin.holds() {
        eprintln!("warning: margin does not hold");
    }
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("assets/codebook_v1.bin");
    std::fs::write(&path, book.to_bytes())?;
    println!("wrote {} centroids to {}", book.size(), path.display());
    Ok(())
}
