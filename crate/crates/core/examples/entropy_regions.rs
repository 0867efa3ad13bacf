//! Train briefly on point labels, then compute MC-dropout entropy for one
//! image, score its regions and write the heatmap.
//!
//! cargo run --release -p regal --example entropy_regions

use regal::acquisition::{score_regions, Aggregation};
use regal::data_model::{build_grid, RegionRef, RegionState};
use regal::ingestion::{generate_synthetic, SyntheticConfig};
use regal::oracle::{annotate_point, Stamp};
use regal::predictor::{train_cycle, Example, LossKind, NetSpec, PredictorParams, TrainConfig};
use regal::uncertainty::image_entropy;

fn main() -> regal::Result<()> {
    let ds = generate_synthetic(&SyntheticConfig {
        n_images: 12,
        seed: 3,
        ..SyntheticConfig::default()
    })?;
    let grid = build_grid(64, 64, 16)?;

    // label every region of the first eight images with simulated clicks
    let mut labels = Vec::new();
    for e in &ds.entries[..8] {
        let gt = e.mask.as_ref().expect("synthetic masks");
        let mut partial = regal::data_model::PartialLabelMask::unlabeled(&e.image.id, 64, 64);
        for r in 0..grid.len() {
            let ann = annotate_point(&RegionRef::unlabeled(&e.image.id, r), &grid, gt, r as u64, Stamp::default())?;
            partial.merge(&ann.delta)?;
        }
        labels.push(partial);
    }
    let examples: Vec<Example> = ds.entries[..8]
        .iter()
        .zip(&labels)
        .map(|(e, l)| Example {
            image: &e.image,
            labels: l,
            loss: LossKind::Point,
        })
        .collect();
    let cfg = TrainConfig {
        max_epochs: 15,
        ..TrainConfig::default()
    };
    let rep = train_cycle(PredictorParams::init(&NetSpec::default(), 0)?, None, &examples, &[], &cfg)?;

    let target = &ds.entries[10].image;
    let ent = image_entropy(&rep.params, target, 8, 42)?;
    let states = vec![RegionState::Unlabeled; grid.len()];
    let mut scores = score_regions(&ent, &grid, &states, Aggregation::Max)?;
    scores.sort_by(|a, b| b.score.total_cmp(&a.score));
    for s in scores.iter().take(5) {
        println!("region {:>2}  max entropy {:.4}", s.region.region_index, s.score);
    }
    let path = std::env::temp_dir().join("regal-entropy.png");
    std::fs::write(&path, ent.to_png(2)?).map_err(|source| regal::Error::Io { path: path.clone(), source })?;
    println!("heatmap: {}", path.display());
    Ok(())
}
