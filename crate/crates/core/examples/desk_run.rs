//! One desk-scale active-learning run; prints the curve.
//!
//! cargo run --release -p regal --example desk_run -- [seed] [random|entropy] [point|per_pixel]

use regal::acquisition::Heuristic;
use regal::orchestrator::{run, RunConfig};
use regal::predictor::Supervision;

fn main() -> regal::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let seed = args.first().and_then(|s| s.parse().ok()).unwrap_or(0);
    let mut cfg = RunConfig::desk_preset(seed);
    if args.get(1).map(String::as_str) == Some("random") {
        cfg.heuristic = Heuristic::Random;
    }
    if args.get(2).map(String::as_str) == Some("per_pixel") {
        cfg.supervision = Supervision::PerPixel;
    }
    cfg.output_dir = std::env::temp_dir().join("regal-desk");
    cfg.run_id = format!("desk-{}-{seed}", cfg.heuristic);
    let t0 = std::time::Instant::now();
    let out = run(&cfg)?;
    for (r, c) in out.rows.iter().zip(&out.cycles) {
        println!(
            "cycle {:>3}  cost {:>7.0}s  regions {:>4}  dice {:.4}  spec {:.4}  epochs {:>2}",
            r.cycle, r.cost_seconds, r.regions_labeled, r.dice, r.specificity, c.epochs_run
        );
    }
    println!("curve: {}  ({:.1?})", out.curve_path.display(), t0.elapsed());
    Ok(())
}
