//! Price one slice under each labeling scheme: point clicks per region,
//! polygon vertices per region, and a whole slice by an expert.
//!
//! cargo run --release -p regal --example annotation_costs

use regal::contour::polygon_vertex_count;
use regal::data_model::{build_grid, RegionRef};
use regal::ingestion::{generate_synthetic, SyntheticConfig};
use regal::oracle::{annotate_full_image, annotate_full_region, annotate_point, CostModel, Stamp};

fn main() -> regal::Result<()> {
    let ds = generate_synthetic(&SyntheticConfig {
        n_images: 10,
        background_fraction: 0.0,
        seed: 1,
        ..SyntheticConfig::default()
    })?;
    let gt = ds.entries[0].mask.as_ref().expect("synthetic masks");
    println!("whole-mask polygon vertices: {}", polygon_vertex_count(gt.classes(), 1.0)?);

    for k in [16, 64] {
        let grid = build_grid(64, 64, k)?;
        let (mut point, mut pixel) = (0.0, 0.0);
        for r in 0..grid.len() {
            let region = RegionRef::unlabeled(&gt.image_id, r);
            let seconds = |a: &regal::oracle::Annotation| a.actions.iter().map(|x| x.cost_seconds()).sum::<f64>();
            point += seconds(&annotate_point(&region, &grid, gt, 0, Stamp::default())?);
            pixel += seconds(&annotate_full_region(&region, &grid, gt, Stamp::default())?);
        }
        println!("K={k:<3} point labels {point:>6.0} s   per-pixel polygons {pixel:>6.0} s");
    }
    for model in [CostModel::Polygon, CostModel::ExpertSlice] {
        let ann = annotate_full_image(gt, model, Stamp::default())?;
        let total: f64 = ann.actions.iter().map(|a| a.cost_seconds()).sum();
        println!("full slice, {model:?}: {total:.0} s");
    }
    Ok(())
}
