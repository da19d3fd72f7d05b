use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mbj::train::Variant;
use mbj::Result;
use mbj_cli::compare::compare;
use mbj_cli::config::ExperimentConfig;
use mbj_cli::run::{self, JitterRow, Observe, SummaryRow};

#[derive(Parser)]
#[command(name = "mbj", version, about = "Memory-based jitter experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Config file plus the overrides every run accepts.
#[derive(Args)]
struct RunArgs {
    /// Experiment configuration (TOML).
    #[arg(short, long)]
    config: PathBuf,
    /// Training seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory.
    #[arg(short, long)]
    output: Option<PathBuf>,
}

impl RunArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut config = ExperimentConfig::load(&self.config)?;
        if let Some(seed) = self.seed {
            config.schedule.seed = seed;
        }
        if let Some(out) = &self.output {
            config.output = out.clone();
        }
        Ok(config)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write the configured dataset splits to <output>/data.
    SynthData(RunArgs),
    /// Phase 1, then phase 2 with the configured variant.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Phase-2 variant (baseline, mbj, rr, fr, fr+rj, mbj-w, mbj-f, mbj-wf).
        #[arg(long)]
        variant: Option<Variant>,
    },
    /// Re-evaluate a checkpoint of a finished run.
    Eval {
        run_dir: PathBuf,
        /// final or phase1.
        #[arg(long, default_value = "final")]
        checkpoint: String,
    },
    /// One phase-1 model, several phase-2 variants.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_delimiter = ',', default_value = "baseline,rr,fr,fr+rj,mbj")]
        variants: Vec<Variant>,
    },
    /// Angular-variance curves and plateau statistics of recorded traces.
    JitterStats {
        run_dir: PathBuf,
        /// Record a new observation of this many epochs from phase1.ckpt.
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long = "sample")]
        samples: Vec<usize>,
        #[arg(long = "prototype")]
        prototypes: Vec<usize>,
    },
    /// Dump embeddings and head weights of a checkpoint.
    ExportEmbeddings {
        run_dir: PathBuf,
        #[arg(long, default_value = "final")]
        checkpoint: String,
        /// train, test, query or gallery.
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Final metrics of several runs, with deltas against the first.
    Compare {
        #[arg(required = true, num_args = 2..)]
        runs: Vec<PathBuf>,
        /// Also write the table as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

fn pct(v: Option<f64>) -> String {
    v.map_or("-".into(), |x| format!("{:.2}", 100.0 * x))
}

fn print_rows(rows: &[SummaryRow]) {
    println!("{:12} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8}", "model", "top1", "many", "medium", "few", "mAP", "rank1");
    for r in rows {
        println!(
            "{:12} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8}",
            r.model,
            pct(r.top1),
            pct(r.many),
            pct(r.medium),
            pct(r.few),
            pct(r.map),
            pct(r.rank1)
        );
    }
}

fn print_jitter(rows: &[JitterRow]) {
    println!("{:8} {:20} {:>7} {:>12} {:>12}", "source", "subject", "points", "final deg^2", "slope ratio");
    for r in rows {
        let ratio = r.slope_ratio.map_or("-".into(), |x| format!("{x:.4}"));
        println!("{:8} {:20} {:>7} {:>12.4} {:>12}", r.source, r.subject, r.points, r.final_variance, ratio);
    }
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::SynthData(args) => {
            let dir = run::synth_data(&args.load()?)?;
            println!("{}", dir.display());
        }
        Command::Train { run: args, variant } => {
            let mut config = args.load()?;
            if let Some(v) = variant {
                config.variant = v;
            }
            print_rows(&run::train(&config)?);
        }
        Command::Eval { run_dir, checkpoint } => print_rows(&[run::eval(&run_dir, &checkpoint)?]),
        Command::Ablate { run: args, variants } => print_rows(&run::ablate(&args.load()?, &variants)?),
        Command::JitterStats {
            run_dir,
            epochs,
            samples,
            prototypes,
        } => {
            let observe = epochs.map(|epochs| Observe {
                epochs,
                samples,
                prototypes,
            });
            print_jitter(&run::jitter_stats(&run_dir, observe.as_ref())?);
        }
        Command::ExportEmbeddings {
            run_dir,
            checkpoint,
            split,
            out,
        } => {
            let path = run::export(&run_dir, &checkpoint, &split, out.as_deref())?;
            println!("{}", path.display());
        }
        Command::Compare { runs, csv } => {
            let c = compare(&runs)?;
            if let Some(path) = csv.as_deref() {
                c.write_csv(path)?;
            }
            print!("{}", c.table());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(mbj_cli::exit_code(&e))
        }
    }
}

