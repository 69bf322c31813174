use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mygram::kgdata::{generate_synthetic, load_dataset, save_dataset, IngestOptions, SynthSpec};
use mygram::pipeline::selftest::run_self_checks;
use mygram::pipeline::{
    ablate, evaluate, seed_sweep, train, ModelParams, PipelineError, PreparedData, RankingReport,
    TrainConfig, Variant,
};

#[derive(Parser)]
#[command(name = "mygram", about = "Multi-modal knowledge-graph entity alignment")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write a checkpoint.
    Train {
        /// Dataset directory.
        #[arg(long)]
        data: PathBuf,
        /// Flat JSON config with dotted keys.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Checkpoint output path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on the test alignment pairs.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Checkpoint to load.
        #[arg(long)]
        ckpt: PathBuf,
        /// Emit the report as JSON instead of a table.
        #[arg(long)]
        json: bool,
    },
    /// Train and evaluate one ablation variant.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// One of: full, no_relation, no_attribute, no_image, no_mgd, no_gram.
        #[arg(long)]
        variant: String,
        #[arg(long)]
        json: bool,
    },
    /// Retrain at several seed ratios and report each.
    Sweep {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated ratios, e.g. 0.05,0.1,0.2,0.3.
        #[arg(long)]
        ratios: String,
        #[arg(long)]
        json: bool,
    },
    /// Generate a synthetic benchmark dataset.
    Synth {
        /// JSON generator spec; defaults apply when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 17)]
        seed: u64,
    },
    /// Run the invariant/gradient self-test suite.
    Check,
}

fn load_config(path: &Option<PathBuf>) -> Result<TrainConfig, PipelineError> {
    match path {
        None => Ok(TrainConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| PipelineError::Io {
                path: p.display().to_string(),
                source: e,
            })?;
            TrainConfig::from_dotted_json(&text)
        }
    }
}

fn load_data(dir: &Path, cfg: &TrainConfig) -> Result<PreparedData, PipelineError> {
    let opts = IngestOptions {
        visual_dim: cfg.visual_dim,
        visual_seed: cfg.seed,
        train_ratio: cfg.train_ratio,
        split_seed: cfg.seed,
        ..Default::default()
    };
    let (kg1, kg2, seeds) = load_dataset(dir, &opts)?;
    PreparedData::new(kg1, kg2, seeds)
}

fn print_report(label: &str, report: &RankingReport, json: bool) {
    if json {
        println!("{}", serde_json::to_string(report).unwrap());
    } else {
        println!(
            "{label}: hits@1 {:.4}  hits@10 {:.4}  mrr {:.4}  ({} queries)",
            report.hits1,
            report.hits10,
            report.mrr,
            report.per_query_rank.len()
        );
    }
}

fn run() -> Result<bool, PipelineError> {
    match Cli::parse().command {
        Command::Train { data, config, out } => {
            let cfg = load_config(&config)?;
            let prepared = load_data(&data, &cfg)?;
            let model = train(&prepared, &cfg, Variant::Full)?;
            model.params.save(&out)?;
            println!(
                "trained {} epochs, final loss {:.6}, checkpoint written to {}",
                model.loss_history.len(),
                model.loss_history.last().copied().unwrap_or(f64::NAN),
                out.display()
            );
            Ok(true)
        }
        Command::Eval {
            data,
            config,
            ckpt,
            json,
        } => {
            let cfg = load_config(&config)?;
            let prepared = load_data(&data, &cfg)?;
            let params = ModelParams::load(&ckpt)?;
            let report = evaluate(&params, &prepared, &cfg, Variant::Full)?;
            print_report("eval", &report, json);
            Ok(true)
        }
        Command::Ablate {
            data,
            config,
            variant,
            json,
        } => {
            let cfg = load_config(&config)?;
            let variant: Variant = variant.parse()?;
            let prepared = load_data(&data, &cfg)?;
            let (_, report) = ablate(&prepared, &cfg, variant)?;
            print_report(variant.name(), &report, json);
            Ok(true)
        }
        Command::Sweep {
            data,
            config,
            ratios,
            json,
        } => {
            let cfg = load_config(&config)?;
            let ratios: Vec<f64> = ratios
                .split(',')
                .filter(|s| !s.is_empty())
                .map(|s| {
                    s.trim()
                        .parse::<f64>()
                        .map_err(|_| PipelineError::Invalid(format!("bad ratio {s:?}")))
                })
                .collect::<Result<_, _>>()?;
            let prepared = load_data(&data, &cfg)?;
            for (ratio, report) in seed_sweep(&prepared, &cfg, &ratios)? {
                print_report(&format!("ratio {ratio}"), &report, json);
            }
            Ok(true)
        }
        Command::Synth { spec, out, seed } => {
            let spec: SynthSpec = match spec {
                None => SynthSpec::default(),
                Some(p) => {
                    let text = std::fs::read_to_string(&p).map_err(|e| PipelineError::Io {
                        path: p.display().to_string(),
                        source: e,
                    })?;
                    serde_json::from_str(&text)
                        .map_err(|e| PipelineError::Invalid(format!("bad generator spec: {e}")))?
                }
            };
            let (kg1, kg2, seeds) = generate_synthetic(&spec, seed)?;
            save_dataset(&out, &kg1, &kg2, &seeds)?;
            println!(
                "wrote {} + {} entities, {} alignment pairs to {}",
                kg1.entity_count,
                kg2.entity_count,
                seeds.pairs.len(),
                out.display()
            );
            Ok(true)
        }
        Command::Check => {
            let mut all_passed = true;
            for check in run_self_checks() {
                let status = if check.passed { "pass" } else { "FAIL" };
                println!("[{status}] {}: {}", check.name, check.detail);
                all_passed &= check.passed;
            }
            Ok(all_passed)
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
