//! Run a short experiment, then rebuild its labels and ledger from the
//! selection log alone.
//!
//! cargo run --release -p regal --example replay_run

use regal::orchestrator::{replay, run, RunConfig};

fn main() -> regal::Result<()> {
    let mut cfg = RunConfig::desk_preset(0);
    cfg.cycles = 3;
    cfg.run_id = "replay-demo".into();
    cfg.output_dir = std::env::temp_dir().join("regal-replay");
    let out = run(&cfg)?;
    let log = out.run_dir.join("selection.jsonl");
    let rep = replay(&log)?;
    println!("run: {} selections, {:.0} s of labeling", out.selections.len(), out.state.ledger.total_seconds());
    println!(
        "replay: ledger matches {:?}, label state identical {}",
        rep.ledger_matches,
        rep.state == out.state
    );
    Ok(())
}
