//! `unlearn`: feature selection, steering, evaluation, sweeps, RMU and
//! suffix attacks from the command line.
//!
//! Exit codes: 0 success, 2 input error, 3 empty result, 4 internal failure.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sae_unlearn::feature_selection::CountMode;
use sae_unlearn::steering::{HookAction, RefusalTrigger};

use commands::*;
use config::RunConfig;
use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "unlearn", version, about = "Conditional unlearning with sparse-autoencoder feature steering")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Global {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every stochastic step; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for parallel evaluation and search.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    /// Never contact remote description services.
    #[arg(long, global = true)]
    offline: bool,
}

/// Overrides for the `[selection]` and `[steering]` sections.
#[derive(Debug, Args, Default)]
struct SteeringFlags {
    #[arg(long)]
    top_k: Option<usize>,
    #[arg(long)]
    retain_threshold: Option<f64>,
    #[arg(long, value_parser = parse_action)]
    action: Option<HookAction>,
    #[arg(long, allow_hyphen_values = true)]
    coefficient: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    clamp_value: Option<f64>,
    #[arg(long)]
    refusal_id: Option<usize>,
    /// Fire the refusal latent at every position once any monitored latent fires.
    #[arg(long)]
    sequence_global_refusal: bool,
    /// Directory of `{latent_idx}.json` description payloads.
    #[arg(long)]
    descriptions: Option<PathBuf>,
}

fn parse_action(s: &str) -> Result<HookAction, String> {
    s.parse().map_err(|e: sae_unlearn::Error| e.to_string())
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Per-latent activation frequencies over the forget and retain corpora.
    Frequencies {
        #[arg(long)]
        per_document: bool,
        #[arg(long, allow_hyphen_values = true)]
        activity_threshold: Option<f64>,
    },
    /// Top-k forget latents under the retain threshold, as a steering CSV.
    Select {
        #[command(flatten)]
        steering: SteeringFlags,
        #[arg(long)]
        forget_table: Option<PathBuf>,
        #[arg(long)]
        retain_table: Option<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Greedy continuations with and without steering.
    SteerGenerate {
        #[arg(long)]
        steering: Option<PathBuf>,
        #[arg(long)]
        prompt: String,
        #[arg(long, default_value_t = 4)]
        max_new_tokens: usize,
        #[arg(long)]
        sequence_global_refusal: bool,
    },
    /// Accuracy, retention and alignment of a steered model.
    Eval {
        #[arg(long)]
        steering: Option<PathBuf>,
        #[arg(long)]
        sequence_global_refusal: bool,
        /// Compute metrics from the four accuracies below; no model is loaded.
        #[arg(long, requires_all = ["acc_forget", "acc_retain", "orig_forget", "orig_retain"])]
        metric_only: bool,
        #[arg(long)]
        acc_forget: Option<f64>,
        #[arg(long)]
        acc_retain: Option<f64>,
        #[arg(long)]
        orig_forget: Option<f64>,
        #[arg(long)]
        orig_retain: Option<f64>,
    },
    /// Grid sweep over top-k, coefficient and threshold.
    Sweep {
        #[command(flatten)]
        steering: SteeringFlags,
    },
    /// Pareto frontiers of one or more sweep files.
    Pareto {
        inputs: Vec<PathBuf>,
    },
    /// Suffix attack on the plain model and optionally on steered and RMU models.
    Attack {
        #[arg(long)]
        target: Option<PathBuf>,
        #[arg(long)]
        steering: Option<PathBuf>,
        #[arg(long)]
        rmu_model: Option<PathBuf>,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        suffix_length: Option<usize>,
        #[arg(long)]
        patience: Option<usize>,
    },
    /// RMU fine-tuning of the toy model.
    RmuTrain {
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
        #[arg(long)]
        retain_weight: Option<f64>,
        #[arg(long)]
        target_layer: Option<usize>,
    },
    /// Results table from eval reports, with a top-k significance test on a sweep.
    Report {
        reports: Vec<PathBuf>,
        #[arg(long)]
        sweep: Option<PathBuf>,
        #[arg(long)]
        split_top_k: Option<f64>,
    },
    /// Write the toy model, SAE, corpora, questions and a config to a directory.
    ToyFixture {
        dir: PathBuf,
    },
}

impl SteeringFlags {
    fn apply(&self, cfg: &mut RunConfig) {
        let (sel, st) = (&mut cfg.selection, &mut cfg.steering);
        if let Some(v) = self.top_k {
            sel.top_k = v;
        }
        if let Some(v) = self.retain_threshold {
            sel.retain_threshold = v;
        }
        if let Some(v) = self.action {
            st.action = v;
        }
        if let Some(v) = self.coefficient {
            st.coefficient = v;
        }
        if self.clamp_value.is_some() {
            st.clamp_value = self.clamp_value;
        }
        if self.refusal_id.is_some() {
            st.refusal_id = self.refusal_id;
        }
        if self.sequence_global_refusal {
            st.refusal_trigger = RefusalTrigger::SequenceGlobal;
        }
        if self.descriptions.is_some() {
            st.descriptions = self.descriptions.clone();
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Command::ToyFixture { dir } = &cli.command {
        return cmd_toy_fixture(dir);
    }
    if let Some(jobs) = cli.global.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs.max(1))
            .build_global()
            .map_err(|e| CliError::Internal(e.to_string()))?;
    }
    let mut config = match &cli.global.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.global.seed {
        config.seed = seed;
    }
    if let Some(dir) = &cli.global.output_dir {
        config.output_dir = Some(dir.clone());
    }
    let output_dir = config.output_dir.clone().unwrap_or_else(|| PathBuf::from("out"));
    let mut ctx = Context {
        config,
        output_dir,
        offline: cli.global.offline,
    };
    let cfg = &mut ctx.config;
    match cli.command {
        Command::Frequencies {
            per_document,
            activity_threshold,
        } => {
            if per_document {
                cfg.selection.mode = CountMode::PerDocument;
            }
            if let Some(t) = activity_threshold {
                cfg.selection.activity_threshold = t;
            }
            cmd_frequencies(&ctx)
        }
        Command::Select {
            steering,
            forget_table,
            retain_table,
            output,
        } => {
            steering.apply(cfg);
            cmd_select(
                &ctx,
                &SelectArgs {
                    forget_table,
                    retain_table,
                    output,
                },
            )
        }
        Command::SteerGenerate {
            steering,
            prompt,
            max_new_tokens,
            sequence_global_refusal,
        } => {
            if sequence_global_refusal {
                cfg.steering.refusal_trigger = RefusalTrigger::SequenceGlobal;
            }
            cmd_steer_generate(&ctx, steering, &prompt, max_new_tokens)
        }
        Command::Eval {
            steering,
            sequence_global_refusal,
            metric_only,
            acc_forget,
            acc_retain,
            orig_forget,
            orig_retain,
        } => {
            if sequence_global_refusal {
                cfg.steering.refusal_trigger = RefusalTrigger::SequenceGlobal;
            }
            let metrics = match (metric_only, acc_forget, acc_retain, orig_forget, orig_retain) {
                (true, Some(acc_forget), Some(acc_retain), Some(orig_forget), Some(orig_retain)) => Some(MetricInputs {
                    acc_forget,
                    acc_retain,
                    orig_forget,
                    orig_retain,
                }),
                (false, None, None, None, None) => None,
                _ => {
                    return Err(CliError::Input(
                        "usage error: accuracies are only accepted together with --metric-only".into(),
                    ))
                }
            };
            cmd_eval(&ctx, steering, metrics)
        }
        Command::Sweep { steering } => {
            steering.apply(cfg);
            cmd_sweep(&ctx)
        }
        Command::Pareto { inputs } => cmd_pareto(&ctx, &inputs),
        Command::Attack {
            target,
            steering,
            rmu_model,
            iterations,
            suffix_length,
            patience,
        } => {
            if let Some(v) = iterations {
                cfg.attack.iterations = v;
            }
            if let Some(v) = suffix_length {
                cfg.attack.suffix_length = v;
            }
            if patience.is_some() {
                cfg.attack.patience = patience;
            }
            cmd_attack(
                &ctx,
                &AttackArgs {
                    target,
                    steering,
                    rmu_model,
                },
            )
        }
        Command::RmuTrain {
            steps,
            learning_rate,
            retain_weight,
            target_layer,
        } => {
            if let Some(v) = steps {
                cfg.rmu.steps = v;
            }
            if let Some(v) = learning_rate {
                cfg.rmu.learning_rate = v;
            }
            if let Some(v) = retain_weight {
                cfg.rmu.retain_weight = v;
            }
            if let Some(v) = target_layer {
                cfg.rmu.target_layer = v;
            }
            cmd_rmu_train(&ctx)
        }
        Command::Report {
            reports,
            sweep,
            split_top_k,
        } => cmd_report(
            &ctx,
            &ReportArgs {
                reports,
                sweep,
                split_top_k,
            },
        ),
        Command::ToyFixture { .. } => unreachable!("handled above"),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
