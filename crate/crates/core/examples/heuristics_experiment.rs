//! Entropy vs random acquisition on the desk preset, with a per-seed
//! summary table. Pass seeds as arguments (default: 0).
//!
//! cargo run --release -p regal --example heuristics_experiment -- 0 1 2

use regal::orchestrator::{experiment_heuristics, RunConfig};

fn main() -> regal::Result<()> {
    let seeds: Vec<u64> = std::env::args().skip(1).filter_map(|s| s.parse().ok()).collect();
    let seeds = if seeds.is_empty() { vec![0] } else { seeds };
    let mut base = RunConfig::desk_preset(0);
    base.run_id = "heuristics".into();
    base.output_dir = std::env::temp_dir().join("regal-heuristics");
    let exp = experiment_heuristics(&base, &seeds)?;
    println!("seed  auc_random  auc_entropy  dice_random  dice_entropy");
    for r in &exp.summary {
        println!(
            "{:>4}  {:>10.2}  {:>11.2}  {:>11.4}  {:>12.4}",
            r.seed, r.auc_random, r.auc_entropy, r.final_dice_random, r.final_dice_entropy
        );
    }
    println!("summary: {}", exp.summary_path.display());
    Ok(())
}
