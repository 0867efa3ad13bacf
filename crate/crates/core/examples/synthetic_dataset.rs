//! Generate a synthetic CT-like dataset, write it as a manifest directory
//! and load it back.
//!
//! cargo run --release -p regal --example synthetic_dataset -- [out_dir]

use std::path::PathBuf;

use regal::ingestion::{generate_synthetic, load_manifest, write_dataset, SyntheticConfig};

fn main() -> regal::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("regal-synthetic"));
    let cfg = SyntheticConfig {
        n_images: 40,
        distractors: 1.0,
        seed: 7,
        ..SyntheticConfig::default()
    };
    let ds = generate_synthetic(&cfg)?;
    let manifest = write_dataset(&ds, &out)?;
    let (m, back) = load_manifest(&manifest)?;
    assert_eq!(back, ds);

    let infected: Vec<usize> = ds.entries.iter().map(|e| e.mask.as_ref().map_or(0, |m| m.infected_pixels())).collect();
    let empty = infected.iter().filter(|&&n| n == 0).count();
    let px = (cfg.size.0 * cfg.size.1) as f64;
    println!("wrote {} slices in {} scans to {}", m.slices.len(), ds.scans().len(), manifest.display());
    println!(
        "{empty} background-only slices, mean infected fraction {:.4}",
        infected.iter().sum::<usize>() as f64 / (px * ds.len() as f64)
    );
    Ok(())
}
