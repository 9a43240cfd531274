use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use fairmi::train::Variant;
use fairmi_cli::{cmd_ablate, cmd_evaluate, cmd_train, oracle_cli, plot, RunConfig};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "fairmi",
    version,
    about = "Train tabular classifiers under an intersectional-fairness penalty, evaluate them, and verify the underlying information identities"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Overrides {
    /// JSON run config (dataset, schema, output_dir, train settings)
    #[arg(long)]
    config: PathBuf,
    /// Comma-separated seed list, e.g. 0,1,2,3,4
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Fairness regularization weight
    #[arg(long)]
    alpha: Option<f64>,
    /// Objective variant
    #[arg(long, value_parser = parse_variant)]
    variant: Option<Variant>,
    /// Comma-separated sensitive attributes to debias jointly
    #[arg(long, value_delimiter = ',')]
    sensitive: Option<Vec<String>>,
    /// Output directory (overrides the config's output_dir)
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    serde_json::from_value(serde_json::Value::String(s.to_ascii_lowercase()))
        .map_err(|_| format!("unknown variant '{s}' (expected tsd, ts, td, vanilla or eo)"))
}

impl Overrides {
    fn apply(&self) -> Result<RunConfig> {
        let mut config = RunConfig::from_file(&self.config)?;
        if let Some(seeds) = &self.seeds {
            config.train.seeds = seeds.clone();
        }
        if let Some(alpha) = self.alpha {
            config.train.alpha = alpha;
        }
        if let Some(variant) = self.variant {
            config.train.variant = variant;
        }
        if let Some(sensitive) = &self.sensitive {
            config.sensitive = sensitive.clone();
        }
        if let Some(out) = &self.out {
            config.output_dir = out.clone();
        }
        Ok(config)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train every seed in the config and write a structured result file
    Train(Overrides),
    /// Re-evaluate a checkpoint on its test split, optionally on a subset of
    /// the trained sensitive attributes, without retraining
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Run config naming the dataset and schema
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated subset of the trained sensitive attributes
        #[arg(long, value_delimiter = ',')]
        sensitive: Option<Vec<String>>,
    },
    /// Run the full objective and both single-term ablations with one shared
    /// protocol and vanilla reference
    Ablate(Overrides),
    /// Verify the discrete information identities (or a user-supplied table)
    Oracle {
        /// RNG seed for the randomized suites
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Plain-text joint table: "A B" header line, then A rows of B probabilities
        #[arg(long)]
        joint: Option<PathBuf>,
        /// Plain-text conditional table q(group|outcome), same layout
        #[arg(long)]
        q: Option<PathBuf>,
    },
    /// Scatter micro F1 against imparity for one or more result files
    Plot {
        /// Result files produced by train/ablate
        #[arg(required = true)]
        results: Vec<PathBuf>,
        #[arg(long, default_value = "plot")]
        out: PathBuf,
    },
}

fn run() -> Result<()> {
    match Cli::parse().command {
        Command::Train(overrides) => {
            let config = overrides.apply()?;
            let record = cmd_train(&config)?;
            println!(
                "variant {} over {} seeds: micro F1 {:.4}, imparity {:.4}{}",
                record.variant,
                record.per_seed.len(),
                record.aggregate.micro_f1,
                record.aggregate.imparity,
                record
                    .aggregate
                    .reduction
                    .map_or(String::new(), |r| format!(", reduction {:.2}%", r * 100.0))
            );
            println!(
                "result written to {}",
                config.output_dir.join("result.json").display()
            );
        }
        Command::Evaluate {
            checkpoint,
            config,
            sensitive,
        } => {
            let run_config = RunConfig::from_file(&config)?;
            let report = cmd_evaluate(
                &checkpoint,
                &run_config.dataset,
                &run_config.schema,
                &sensitive.unwrap_or_default(),
            )?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Ablate(overrides) => {
            let config = overrides.apply()?;
            let records = cmd_ablate(&config)?;
            for record in &records {
                println!(
                    "{}: micro F1 {:.4}, imparity {:.4}{}",
                    record.variant,
                    record.aggregate.micro_f1,
                    record.aggregate.imparity,
                    record
                        .aggregate
                        .reduction
                        .map_or(String::new(), |r| format!(", reduction {:.2}%", r * 100.0))
                );
            }
        }
        Command::Oracle { seed, joint, q } => {
            let lines = oracle_cli::cmd_oracle(seed, joint.as_deref(), q.as_deref())?;
            for line in lines {
                println!("{line}");
            }
        }
        Command::Plot { results, out } => {
            let plot = plot::cmd_plot(&results, &out)?;
            println!(
                "plotted {} runs to {} (+ csv)",
                plot.points.len(),
                out.join("tradeoff.svg").display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            // Single-line diagnostic; chained causes joined inline.
            let chain: Vec<String> = err.chain().map(ToString::to_string).collect();
            eprintln!("error: {}", chain.join(": "));
            ExitCode::FAILURE
        }
    }
}
