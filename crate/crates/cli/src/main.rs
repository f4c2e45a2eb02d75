//! `stgformer` command-line interface.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use stgformer::analysis::PairAggregation;
use stgformer::commands::{self, AnalyzeOptions};
use stgformer::config::{RunConfig, DATA_ROOT_ENV};
use stgformer::eval::BestOf;
use stgformer::stg::Provenance;
use stgformer::synth::{ScenarioKind, ScenarioSpec};
use stgformer::{Error, Result};

#[derive(Parser)]
#[command(name = "stgformer", version, about = "Multi-agent trajectory forecasting with latent interaction graphs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct RunArgs {
    /// Run configuration (TOML).
    #[arg(long, short)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Enable an ablation; repeatable.
    #[arg(long = "ablation", value_name = "NAME")]
    ablations: Vec<String>,
    /// Output directory, overriding `out_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Data root for relative scene paths.
    #[arg(long, env = DATA_ROOT_ENV)]
    data_root: Option<PathBuf>,
}

impl RunArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(root) = &self.data_root {
            cfg.data.root.get_or_insert_with(|| root.clone());
        }
        if let Some(out) = &self.out {
            cfg.out_dir = std::path::absolute(out)?;
        }
        cfg.apply_overrides(self.seed, &self.ablations)?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on `data.train`.
    Train {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Sample futures for `data.test` and write CSV dumps.
    Predict {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        deterministic: bool,
        #[arg(long)]
        share_warmup: bool,
    },
    /// Best-of-K ADE/FDE of a prediction dump.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        ground_truth: PathBuf,
        /// Select one sample per scene instead of per agent.
        #[arg(long)]
        joint: bool,
    },
    /// Edge statistics of a prediction run's dumps.
    Analyze {
        /// Directory holding predictions.csv, ground_truth.csv and graphs.csv.
        #[arg(long)]
        dumps: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        bins: usize,
        #[arg(long, default_value_t = 10.0)]
        max_distance: f64,
        #[arg(long, value_parser = parse_provenance)]
        provenance: Option<Provenance>,
        /// Count only the edge from the previous step per pair.
        #[arg(long)]
        latest_step: bool,
        #[arg(long)]
        include_self: bool,
    },
    /// Write synthetic scenes in the four-column text format.
    Synth {
        #[arg(long)]
        scenario: String,
        #[arg(long, default_value_t = 2)]
        agents: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long)]
        noise: Option<f64>,
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate per split of a scene directory.
    Benchmark {
        #[command(flatten)]
        run: RunArgs,
        /// Directory of scenes (one file per scene).
        #[arg(long)]
        root: PathBuf,
    },
    /// Render a report as a table.
    Table {
        #[arg(long)]
        report: PathBuf,
        /// Bundled reference rows: `sdd` or `ethucy`.
        #[arg(long)]
        reference: Option<String>,
    },
}

fn parse_provenance(s: &str) -> std::result::Result<Provenance, String> {
    match s {
        "prior" => Ok(Provenance::Prior),
        "posterior" => Ok(Provenance::Posterior),
        _ => Err(format!("unknown provenance `{s}` (prior, posterior)")),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { run } => {
            let cfg = run.load()?;
            let out = commands::cmd_train(&cfg)?;
            if let Some(last) = out.epochs.last() {
                println!("epoch {} total {:.6} mse {:.6} kl {:.6}", last.epoch, last.total, last.l_mse, last.l_kl);
            }
            println!("{}", out.checkpoint.display());
        }
        Command::Predict {
            run,
            checkpoint,
            k,
            deterministic,
            share_warmup,
        } => {
            let mut cfg = run.load()?;
            if let Some(k) = k {
                cfg.predict.k = k;
            }
            cfg.predict.deterministic |= deterministic;
            cfg.predict.share_warmup |= share_warmup;
            cfg.apply_overrides(None, &[])?;
            let out = commands::cmd_predict(&cfg, &checkpoint)?;
            println!("{} windows -> {}", out.windows, out.predictions.display());
        }
        Command::Eval {
            run,
            predictions,
            ground_truth,
            joint,
        } => {
            let mut cfg = run.load()?;
            if joint {
                cfg.eval.mode = BestOf::JointScene;
            }
            let report = commands::cmd_eval(&cfg, &predictions, &ground_truth)?;
            print!("{}", commands::cmd_table(&report, None));
        }
        Command::Analyze {
            dumps,
            out,
            bins,
            max_distance,
            provenance,
            latest_step,
            include_self,
        } => {
            let opts = AnalyzeOptions {
                bins,
                max_distance,
                provenance,
                aggregation: if latest_step {
                    PairAggregation::LatestStep
                } else {
                    PairAggregation::AnyStep
                },
                include_self,
            };
            let s = commands::cmd_analyze(&dumps, &out, &opts)?;
            println!(
                "{} graphs, {}/{} active edges, {} flips",
                s.graphs, s.active_edges, s.candidate_edges, s.flip_events
            );
        }
        Command::Synth {
            scenario,
            agents,
            seed,
            count,
            noise,
            frames,
            out,
        } => {
            let kind: ScenarioKind = scenario.parse()?;
            let mut spec = ScenarioSpec::new(kind, agents);
            if let Some(n) = noise {
                spec.noise = n;
            }
            if let Some(f) = frames {
                spec.frames = f;
            }
            for p in commands::cmd_synth(&spec, seed, count, &out)? {
                println!("{}", p.display());
            }
        }
        Command::Benchmark { run, root } => {
            let cfg = run.load()?;
            let root = if root.is_absolute() { root } else { cfg.resolve(&root) };
            let (_, table) = commands::cmd_benchmark(&cfg, &root)?;
            print!("{table}");
        }
        Command::Table { report, reference } => {
            let r = commands::read_report(Path::new(&report))?;
            print!("{}", commands::cmd_table(&r, reference.as_deref()));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            report(&e);
            ExitCode::from(exit_code(&e))
        }
    }
}

fn report(e: &Error) {
    eprintln!("error[{}]: {e}", e.category());
    if let Error::Config(problems) = e {
        for p in problems {
            eprintln!("  - {p}");
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e.category() {
        "config" => 2,
        "data" | "scenario" | "dataset" | "dump" => 3,
        "shape" => 4,
        "checkpoint" => 5,
        "divergence" => 6,
        _ => 1,
    }
}
