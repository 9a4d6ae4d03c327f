//! `mats` command-line interface.
//!
//! Subcommands compose through the artifact directory: every stage loads
//! what an earlier stage wrote and recomputes anything missing. Exit codes:
//! 0 success, 1 usage error, 2 runtime error.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use mats_core::checkpoint::Checkpoint;
use mats_core::mlp::evaluate;
use mats_core::synth::Split;
use mats_core::{MatsError, Result};
use mats_harness::config::{default_lambda_grid, ExperimentConfig, MethodConfig, Scenario};
use mats_harness::flops::{flops_estimate, format_flops, FlopsMethod, FlopsModelSpec};
use mats_harness::pipeline;
use mats_harness::report;

#[derive(Parser)]
#[command(
    name = "mats",
    about = "Desk-scale model merging: train task models, collect curvature statistics, merge with closed forms or conjugate gradient, and report",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonOpts {
    /// Experiment config (JSON). Defaults to the built-in desk suite.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Override the config's output directory.
    #[arg(long)]
    out_dir: Option<PathBuf>,

    /// Operate on a single seed instead of every configured seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl CommonOpts {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut config = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::desk_default(),
        };
        if let Some(dir) = &self.out_dir {
            config.out_dir = dir.clone();
        }
        if let Some(seed) = self.seed {
            config.seeds = vec![seed];
        }
        config.validate()?;
        Ok(config)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic task datasets.
    GenData(CommonOpts),

    /// Train the pretrained, per-task, and multitask models.
    Train(CommonOpts),

    /// Collect Fisher/Gram statistics for every task model.
    Stats {
        #[command(flatten)]
        common: CommonOpts,
        /// Override the config's Fisher mode (empirical | true).
        #[arg(long)]
        fisher_mode: Option<String>,
        /// Override the statistics split (train | validation).
        #[arg(long)]
        split: Option<String>,
    },

    /// Run one merge method over its grid and save the selected checkpoint.
    Merge {
        #[command(flatten)]
        common: CommonOpts,
        /// Method: simple_average | task_arithmetic | ties | diag_fisher |
        /// regmean | mats | mats_multi_round (or any label from the config).
        #[arg(long)]
        method: String,
        /// CG objective for mats (average | diag_fisher | regmean |
        /// block_fisher_kfac | exact_fisher_vector).
        #[arg(long)]
        objective: Option<String>,
        /// CG initialization for mats (average | task_arithmetic | ties |
        /// diag_fisher | regmean | pretrained | zero).
        #[arg(long)]
        init: Option<String>,
        /// Fix the CG iteration count instead of tuning over the grid.
        #[arg(long)]
        cg_iters: Option<usize>,
    },

    /// Evaluate a merged or trained checkpoint on every task.
    Eval {
        #[command(flatten)]
        common: CommonOpts,
        /// Artifact name: a merge label (e.g. mats) or a checkpoint name
        /// (pretrained, task0, multitask).
        #[arg(long)]
        method: String,
        /// Split to evaluate (train | validation | test). Default: test.
        #[arg(long)]
        split: Option<String>,
    },

    /// Print the FLOP estimate for a merging method.
    Flops {
        /// averaging | task_arithmetic | ties | diag_fisher | regmean | mats.
        #[arg(long)]
        method: String,
        /// Number of models merged (M).
        #[arg(long)]
        models: u64,
        /// Parameters per model (p).
        #[arg(long)]
        params: u64,
        /// CG iteration count (mats only).
        #[arg(long)]
        cg_iters: Option<u64>,
        /// Linear-layer shapes as "DxK:count,..." (e.g. 1024x1024:288), or
        /// "reference-full" for the built-in 783M-parameter shape list.
        #[arg(long)]
        layers: Option<String>,
    },

    /// Run the full scenario: data, training, statistics, merges, report.
    Run(CommonOpts),

    /// Re-emit report.md / report.csv from stored results.
    Report(CommonOpts),
}

fn main() {
    std::process::exit(run());
}

fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    print!("{e}");
                    0
                }
                _ => {
                    eprint!("{e}");
                    1
                }
            };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::GenData(common) => {
            let config = common.load()?;
            for &seed in &config.seeds {
                let tasks = pipeline::ensure_datasets(&config, seed)?;
                println!(
                    "seed {seed}: {} tasks in {}",
                    tasks.len(),
                    config.seed_dir(seed).join("datasets").display()
                );
            }
            Ok(())
        }
        Command::Train(common) => {
            let config = common.load()?;
            for &seed in &config.seeds {
                let tasks = pipeline::ensure_datasets(&config, seed)?;
                let trained = pipeline::ensure_models(&config, seed, &tasks)?;
                println!(
                    "seed {seed}: pretrained + {} task models{}",
                    trained.task_models.len(),
                    if trained.multitask.is_some() { " + multitask" } else { "" }
                );
            }
            Ok(())
        }
        Command::Stats { common, fisher_mode, split } => {
            let mut config = common.load()?;
            if let Some(mode) = fisher_mode {
                config.stats.fisher_mode = mode;
            }
            if let Some(split) = split {
                config.stats.split = split;
            }
            config.validate()?;
            for &seed in &config.seeds {
                let tasks = pipeline::ensure_datasets(&config, seed)?;
                let trained = pipeline::ensure_models(&config, seed, &tasks)?;
                let stats = pipeline::ensure_stats(&config, seed, &tasks, &trained.task_models)?;
                println!(
                    "seed {seed}: {} stats bundles ({} Fisher on {})",
                    stats.len(),
                    config.stats.fisher_mode,
                    config.stats.split
                );
            }
            Ok(())
        }
        Command::Merge { common, method, objective, init, cg_iters } => {
            let mut config = common.load()?;
            let method_config = resolve_method(&config, &method, objective, init, cg_iters)?;
            config.methods = vec![method_config];
            for &seed in &config.seeds {
                let results = match config.scenario {
                    Scenario::Multitask => pipeline::run_seed_multitask(&config, seed)?,
                    Scenario::IntermediateTask => pipeline::run_seed_intermediate(&config, seed)?,
                };
                for row in &results.rows {
                    println!(
                        "seed {seed}: {} [{}] test average {:.4}",
                        row.label, row.selected, row.average
                    );
                }
            }
            Ok(())
        }
        Command::Eval { common, method, split } => {
            let config = common.load()?;
            let split = match split.as_deref() {
                None => Split::Test,
                Some(s) => Split::parse(s)
                    .ok_or_else(|| MatsError::Config(format!("unknown split `{s}`")))?,
            };
            for &seed in &config.seeds {
                let tasks = pipeline::ensure_datasets(&config, seed)?;
                let ckpt = find_checkpoint(&config, seed, &method)?;
                let spec = config.mlp_spec();
                let mut total = 0.0;
                for task in &tasks {
                    let acc = evaluate(&spec, &ckpt, task.split(split))?;
                    println!("seed {seed}: {} {} {} {:.4}", method, task.name, split, acc.value);
                    total += acc.value;
                }
                println!(
                    "seed {seed}: {} {} average {:.4}",
                    method,
                    split,
                    total / tasks.len() as f64
                );
            }
            Ok(())
        }
        Command::Flops { method, models, params, cg_iters, layers } => {
            let method = FlopsMethod::parse(&method)
                .ok_or_else(|| MatsError::Config(format!("unknown method `{method}`")))?;
            let layer_list = match layers.as_deref() {
                None => Vec::new(),
                Some("reference-full") => {
                    mats_harness::flops::reference_full_model(models, cg_iters.unwrap_or(100)).layers
                }
                Some(spec) => parse_layers(spec)?,
            };
            let spec = FlopsModelSpec {
                models,
                params,
                layers: layer_list,
                cg_iters: cg_iters.unwrap_or(0),
            };
            println!("{}", format_flops(flops_estimate(method, &spec)?));
            Ok(())
        }
        Command::Run(common) => {
            let config = common.load()?;
            let bundle = pipeline::run_scenario(&config)?;
            report::write_reports(&config, &bundle)?;
            println!(
                "report written to {} ({} methods x {} columns, {} seeds)",
                config.out_dir.join("report.md").display(),
                bundle.aggregate.len(),
                bundle.columns.len(),
                bundle.seeds.len()
            );
            Ok(())
        }
        Command::Report(common) => {
            let config = common.load()?;
            let path = config.out_dir.join("results.json");
            let text = std::fs::read_to_string(&path).map_err(|e| {
                MatsError::Config(format!(
                    "{}: {e} (run `mats run` first)",
                    path.display()
                ))
            })?;
            let bundle: pipeline::ReportBundle = serde_json::from_str(&text)
                .map_err(|e| MatsError::Config(format!("{}: {e}", path.display())))?;
            report::write_reports(&config, &bundle)?;
            println!("report written to {}", config.out_dir.join("report.md").display());
            Ok(())
        }
    }
}

/// Picks the method entry from the config by label, or builds a default one;
/// mats accepts objective/init/iteration overrides.
fn resolve_method(
    config: &ExperimentConfig,
    name: &str,
    objective: Option<String>,
    init: Option<String>,
    cg_iters: Option<usize>,
) -> Result<MethodConfig> {
    let base = config
        .methods
        .iter()
        .find(|m| m.label() == name)
        .cloned()
        .map(Ok)
        .unwrap_or_else(|| default_method(name))?;
    let method = match base {
        MethodConfig::Mats {
            objective: o,
            init: i,
            cg_iters_grid,
            init_lambda_grid,
            extra_rounds,
        } => MethodConfig::Mats {
            objective: objective.unwrap_or(o),
            init: init.unwrap_or(i),
            cg_iters_grid: cg_iters.map(|n| vec![n]).unwrap_or(cg_iters_grid),
            init_lambda_grid,
            extra_rounds,
        },
        other => {
            if objective.is_some() || init.is_some() || cg_iters.is_some() {
                return Err(MatsError::Config(
                    "--objective/--init/--cg-iters only apply to the mats method".into(),
                ));
            }
            other
        }
    };
    method.validate()?;
    Ok(method)
}

fn default_method(name: &str) -> Result<MethodConfig> {
    match name {
        "simple_average" => Ok(MethodConfig::SimpleAverage),
        "task_arithmetic" => Ok(MethodConfig::TaskArithmetic {
            lambda_grid: default_lambda_grid(),
        }),
        "ties" => Ok(MethodConfig::Ties {
            lambda_grid: default_lambda_grid(),
            trim_fraction: 0.8,
        }),
        "diag_fisher" => Ok(MethodConfig::DiagFisher),
        "regmean" => Ok(MethodConfig::Regmean { gamma: 0.9 }),
        "mats" => Ok(MethodConfig::Mats {
            objective: "regmean".into(),
            init: "task_arithmetic".into(),
            cg_iters_grid: (1..=10).map(|i| i * 10).collect(),
            init_lambda_grid: default_lambda_grid(),
            extra_rounds: Vec::new(),
        }),
        other => Err(MatsError::Config(format!("unknown method `{other}`"))),
    }
}

fn find_checkpoint(config: &ExperimentConfig, seed: u64, name: &str) -> Result<Checkpoint> {
    let seed_dir = config.seed_dir(seed);
    for dir in ["merged", "checkpoints"] {
        let path = seed_dir.join(dir).join(format!("{name}.mats"));
        if path.exists() {
            return Checkpoint::load(&path);
        }
    }
    Err(MatsError::Config(format!(
        "no artifact named `{name}` under {} (run merge or train first)",
        seed_dir.display()
    )))
}

fn parse_layers(spec: &str) -> Result<Vec<(u64, u64)>> {
    let mut layers = Vec::new();
    for part in spec.split(',') {
        let bad = || MatsError::Config(format!("bad layer spec `{part}` (want DxK:count)"));
        let (shape, count) = part.split_once(':').ok_or_else(bad)?;
        let (d, k) = shape.split_once('x').ok_or_else(bad)?;
        let d: u64 = d.parse().map_err(|_| bad())?;
        let k: u64 = k.parse().map_err(|_| bad())?;
        let count: usize = count.parse().map_err(|_| bad())?;
        layers.extend(std::iter::repeat_n((d, k), count));
    }
    Ok(layers)
}
