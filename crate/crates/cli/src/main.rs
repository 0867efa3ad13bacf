use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use regal::acquisition::Heuristic;
use regal::ingestion::{generate_synthetic, write_dataset, SyntheticConfig};
use regal::orchestrator::{experiment_heuristics, experiment_region_size, experiment_supervision, replay, run, RunConfig};

#[derive(Parser)]
#[command(name = "regal", version, about = "Region-based active learning with point supervision")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// JSON run config; without it the desk preset is used.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for the desk preset.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    heuristic: Option<HeuristicArg>,
    #[arg(long)]
    cycles: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl ConfigArgs {
    fn load(&self) -> regal::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::desk_preset(self.seed),
        };
        if let Some(h) = self.heuristic {
            cfg.heuristic = h.into();
        }
        if let Some(t) = self.cycles {
            cfg.cycles = t;
        }
        if let Some(o) = &self.out {
            cfg.output_dir = o.clone();
        }
        Ok(cfg)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum HeuristicArg {
    Random,
    Entropy,
}

impl From<HeuristicArg> for Heuristic {
    fn from(h: HeuristicArg) -> Self {
        match h {
            HeuristicArg::Random => Heuristic::Random,
            HeuristicArg::Entropy => Heuristic::Entropy,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Experiment {
    Heuristics,
    RegionSize,
    Supervision,
}

#[derive(Subcommand)]
enum Command {
    /// One active-learning run; writes the curve and the run logs.
    Run(ConfigArgs),
    /// A comparison experiment over several seeds.
    Experiment {
        which: Experiment,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        /// Region counts for the region-size experiment.
        #[arg(long, value_delimiter = ',', default_value = "16,64")]
        ks: Vec<usize>,
        /// Seed-phase budget in seconds for the region-size experiment.
        #[arg(long, default_value_t = 240)]
        seed_budget: u64,
    },
    /// Rebuild the label state from a run's selection log and check its ledger.
    Replay { selection_log: PathBuf },
    /// Write a synthetic dataset (PNG slices + manifest.json).
    Synth {
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 200)]
        images: usize,
    },
    /// Serve the annotation HTTP API.
    Serve {
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "regal-data")]
        data_dir: PathBuf,
    },
}

fn main() -> ExitCode {
    tracing_subscriber::fmt().with_writer(std::io::stderr).init();
    match dispatch(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cmd: Command) -> Result<(), Box<dyn std::error::Error>> {
    match cmd {
        Command::Run(args) => {
            let out = run(&args.load()?)?;
            for r in &out.rows {
                println!("{:>3} {:>8.0}s {:>5} regions  dice {:.4}", r.cycle, r.cost_seconds, r.regions_labeled, r.dice);
            }
            println!("curve written to {}", out.curve_path.display());
        }
        Command::Experiment {
            which,
            cfg,
            seeds,
            ks,
            seed_budget,
        } => {
            let base = cfg.load()?;
            let path = match which {
                Experiment::Heuristics => {
                    let e = experiment_heuristics(&base, &seeds)?;
                    for r in &e.summary {
                        println!(
                            "seed {}: auc random {:.2} entropy {:.2}  final dice random {:.4} entropy {:.4}",
                            r.seed, r.auc_random, r.auc_entropy, r.final_dice_random, r.final_dice_entropy
                        );
                    }
                    e.summary_path
                }
                Experiment::RegionSize => {
                    let e = experiment_region_size(&base, &ks, &seeds, seed_budget)?;
                    for r in &e.summary {
                        println!("seed {} K={}: {} seed images, final dice {:.4}", r.seed, r.k, r.seed_images, r.final_dice);
                    }
                    e.summary_path
                }
                Experiment::Supervision => experiment_supervision(&base, &seeds)?.comparison_path,
            };
            println!("summary written to {}", path.display());
        }
        Command::Replay { selection_log } => {
            let rep = replay(&selection_log)?;
            println!(
                "{} regions labeled, {:.0} s spent",
                rep.state.regions_labeled(),
                rep.state.ledger.total_seconds()
            );
            match rep.ledger_matches {
                Some(true) => println!("ledger matches"),
                Some(false) => return Err("replayed ledger differs from the stored one".into()),
                None => println!("no stored ledger to compare"),
            }
        }
        Command::Synth { out, seed, images } => {
            let ds = generate_synthetic(&SyntheticConfig {
                n_images: images,
                seed,
                ..RunConfig::desk_preset(seed).synthetic().cloned().unwrap_or_default()
            })?;
            println!("{}", write_dataset(&ds, &out)?.display());
        }
        Command::Serve { host, port, data_dir } => {
            let addr: SocketAddr = format!("{host}:{port}").parse()?;
            tokio::runtime::Runtime::new()?.block_on(regal_service::serve(addr, &data_dir))?;
        }
    }
    Ok(())
}
