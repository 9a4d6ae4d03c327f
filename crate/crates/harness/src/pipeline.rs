//! End-to-end pipeline: generate tasks, train the pretrained/per-task/
//! multitask models, collect statistics, run every merge method over its
//! hyperparameter grid with validation-based selection, and evaluate on the
//! test split. Every stage persists its artifacts under the seed directory
//! and reuses them when present, so the subcommands compose.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use mats_core::checkpoint::{Checkpoint, Param, StatsBundle};
use mats_core::fisher::collect_stats;
use mats_core::merge::{
    default_fisher_epsilon, diagonal_fisher_merge, regmean_closed_form, simple_average,
    task_arithmetic, ties_merge,
};
use mats_core::mlp::{evaluate, train, Accuracy, MlpSpec, TrainConfig};
use mats_core::rng::SeedRng;
use mats_core::solver::{mats_merge, CgConfig, CgTrace, InitSpec};
use mats_core::synth::{gen_synthetic_tasks, Split, TaskData, TaskDataset};
use mats_core::tensor::Matrix;
use mats_core::{MatsError, Result};
use serde::{Deserialize, Serialize};

use crate::config::{parse_objective, ExperimentConfig, MethodConfig, Scenario};

fn stage<T>(name: &str, result: Result<T>) -> Result<T> {
    result.map_err(|e| MatsError::Stage {
        stage: name.to_string(),
        source: Box::new(e),
    })
}

// ── dataset persistence ─────────────────────────────────────────────────────

/// Writes one task (all splits plus generating centers) as a checkpoint-kind
/// container.
pub fn save_task_data(task: &TaskData, path: &Path) -> Result<()> {
    let mut ckpt = Checkpoint::new();
    ckpt.insert("centers", Param::weight(task.centers.clone()));
    for split in [Split::Train, Split::Validation, Split::Test] {
        let ds = task.split(split);
        ckpt.insert(
            format!("{split}/inputs"),
            Param::weight(ds.inputs.clone()),
        );
        ckpt.insert(
            format!("{split}/labels"),
            Param::vector(ds.labels.iter().map(|&y| y as f64).collect()),
        );
    }
    ckpt.provenance.insert("task".into(), task.name.clone());
    ckpt.provenance
        .insert("noise_sigma".into(), task.noise_sigma.to_string());
    ckpt.save(path)
}

pub fn load_task_data(path: &Path) -> Result<TaskData> {
    let ckpt = Checkpoint::load(path)?;
    let name = ckpt
        .provenance
        .get("task")
        .cloned()
        .ok_or_else(|| MatsError::Format {
            offset: 0,
            reason: format!("{}: dataset container has no task name", path.display()),
        })?;
    let noise_sigma: f64 = ckpt
        .provenance
        .get("noise_sigma")
        .and_then(|s| s.parse().ok())
        .unwrap_or(1.0);
    let centers = ckpt
        .get("centers")
        .ok_or_else(|| MatsError::Format {
            offset: 0,
            reason: "dataset container is missing centers".into(),
        })?
        .as_matrix()?;
    let classes = centers.rows();
    let read_split = |split: Split| -> Result<TaskDataset> {
        let inputs = ckpt
            .get(&format!("{split}/inputs"))
            .ok_or_else(|| MatsError::Format {
                offset: 0,
                reason: format!("dataset container is missing {split}/inputs"),
            })?
            .as_matrix()?;
        let labels: Vec<usize> = ckpt
            .get(&format!("{split}/labels"))
            .ok_or_else(|| MatsError::Format {
                offset: 0,
                reason: format!("dataset container is missing {split}/labels"),
            })?
            .values
            .iter()
            .map(|&v| v as usize)
            .collect();
        if labels.len() != inputs.rows() || labels.iter().any(|&y| y >= classes) {
            return Err(MatsError::Format {
                offset: 0,
                reason: format!("dataset container has inconsistent {split} labels"),
            });
        }
        Ok(TaskDataset {
            inputs,
            labels,
            split,
            task_name: name.clone(),
        })
    };
    Ok(TaskData {
        name: name.clone(),
        train: read_split(Split::Train)?,
        validation: read_split(Split::Validation)?,
        test: read_split(Split::Test)?,
        centers,
        noise_sigma,
    })
}

// ── stage: datasets ─────────────────────────────────────────────────────────

/// Generates (or loads) the task suite for one experiment seed. In the
/// intermediate-task scenario, task 0 is the data-poor target: its train
/// split is truncated to the configured size before anything is written.
pub fn ensure_datasets(config: &ExperimentConfig, seed: u64) -> Result<Vec<TaskData>> {
    stage("gen-data", ensure_datasets_inner(config, seed))
}

fn ensure_datasets_inner(config: &ExperimentConfig, seed: u64) -> Result<Vec<TaskData>> {
    let dir = config.seed_dir(seed).join("datasets");
    let paths: Vec<PathBuf> = (0..config.suite.num_tasks)
        .map(|i| dir.join(format!("task{i}.mats")))
        .collect();
    if paths.iter().all(|p| p.exists()) {
        return paths.iter().map(|p| load_task_data(p)).collect();
    }
    std::fs::create_dir_all(&dir)?;
    let mut tasks = gen_synthetic_tasks(&config.suite_config(seed))?;
    if config.scenario == Scenario::IntermediateTask {
        let keep = config
            .intermediate
            .as_ref()
            .expect("validated")
            .target_train_size
            .min(tasks[0].train.len());
        let target = &mut tasks[0];
        target.train.inputs = Matrix::from_fn(keep, target.train.inputs.cols(), |i, j| {
            target.train.inputs.get(i, j)
        });
        target.train.labels.truncate(keep);
    }
    for (task, path) in tasks.iter().zip(&paths) {
        save_task_data(task, path)?;
    }
    Ok(tasks)
}

// ── stage: training ─────────────────────────────────────────────────────────

/// Uniform sample over the concatenated train splits. Tasks in the desk
/// suite share split sizes, so uniform sampling is task-balanced.
fn mixture_dataset(tasks: &[TaskData]) -> TaskDataset {
    let total: usize = tasks.iter().map(|t| t.train.len()).sum();
    let dim = tasks[0].train.inputs.cols();
    let mut inputs = Matrix::zeros(total, dim);
    let mut labels = Vec::with_capacity(total);
    let mut row = 0;
    for task in tasks {
        for i in 0..task.train.len() {
            for j in 0..dim {
                inputs.set(row, j, task.train.inputs.get(i, j));
            }
            labels.push(task.train.labels[i]);
            row += 1;
        }
    }
    TaskDataset {
        inputs,
        labels,
        split: Split::Train,
        task_name: "mixture".into(),
    }
}

pub struct TrainedModels {
    pub pretrained: Checkpoint,
    pub task_models: Vec<Checkpoint>,
    /// Joint model over all tasks (multitask scenario only).
    pub multitask: Option<Checkpoint>,
}

pub fn ensure_models(
    config: &ExperimentConfig,
    seed: u64,
    tasks: &[TaskData],
) -> Result<TrainedModels> {
    stage("train", ensure_models_inner(config, seed, tasks))
}

fn ensure_models_inner(
    config: &ExperimentConfig,
    seed: u64,
    tasks: &[TaskData],
) -> Result<TrainedModels> {
    let dir = config.seed_dir(seed).join("checkpoints");
    std::fs::create_dir_all(&dir)?;
    let spec = config.mlp_spec();
    let mixture = mixture_dataset(tasks);

    let pre_path = dir.join("pretrained.mats");
    let pretrained = if pre_path.exists() {
        Checkpoint::load(&pre_path)?
    } else {
        let mut rng = SeedRng::new(seed).split("init");
        let cfg = TrainConfig {
            steps: config.training.pretrain_steps,
            ..config.train_config(seed, "pretrain")
        };
        // Pretraining always trains the weights. In the scaling
        // (parameter-efficient) mode those weights are then frozen and unit
        // scale vectors become the per-task trainable parameters.
        let weight_spec = MlpSpec {
            use_scaling: false,
            ..spec.clone()
        };
        let init = weight_spec.init_params(&mut rng);
        let mut model = train(&weight_spec, &init, &mixture, &cfg)?;
        if spec.use_scaling {
            for l in 0..spec.num_layers() {
                let (_, k) = spec.weight_shape(l);
                model.insert(MlpSpec::scale_name(l), Param::vector(vec![1.0; k]));
            }
        }
        model.provenance.insert("task".into(), "pretrained".into());
        model.save(&pre_path)?;
        model
    };

    let mut task_models = Vec::with_capacity(tasks.len());
    for (i, task) in tasks.iter().enumerate() {
        let path = dir.join(format!("task{i}.mats"));
        let model = if path.exists() {
            Checkpoint::load(&path)?
        } else {
            let cfg = config.train_config(seed, &format!("train/{}", task.name));
            let model = train(&spec, &pretrained, &task.train, &cfg)?;
            model.save(&path)?;
            model
        };
        task_models.push(model);
    }

    let multitask = if config.scenario == Scenario::Multitask {
        let path = dir.join("multitask.mats");
        Some(if path.exists() {
            Checkpoint::load(&path)?
        } else {
            let cfg = TrainConfig {
                steps: config.training.multitask_steps,
                ..config.train_config(seed, "multitask")
            };
            let mut model = train(&spec, &pretrained, &mixture, &cfg)?;
            model.provenance.insert("task".into(), "multitask".into());
            model.save(&path)?;
            model
        })
    } else {
        None
    };

    Ok(TrainedModels {
        pretrained,
        task_models,
        multitask,
    })
}

// ── stage: statistics ───────────────────────────────────────────────────────

pub fn ensure_stats(
    config: &ExperimentConfig,
    seed: u64,
    tasks: &[TaskData],
    task_models: &[Checkpoint],
) -> Result<Vec<StatsBundle>> {
    stage("stats", ensure_stats_inner(config, seed, tasks, task_models))
}

fn ensure_stats_inner(
    config: &ExperimentConfig,
    seed: u64,
    tasks: &[TaskData],
    task_models: &[Checkpoint],
) -> Result<Vec<StatsBundle>> {
    let dir = config.seed_dir(seed).join("stats");
    std::fs::create_dir_all(&dir)?;
    let spec = config.mlp_spec();
    let stats_cfg = config.stats_config(seed);
    let mut out = Vec::with_capacity(tasks.len());
    for (i, (task, model)) in tasks.iter().zip(task_models).enumerate() {
        let path = dir.join(format!("task{i}.mats"));
        let bundle = if path.exists() {
            StatsBundle::load(&path)?
        } else {
            let bundle = collect_stats(&spec, model, task, &stats_cfg)?;
            bundle.save(&path)?;
            bundle
        };
        out.push(bundle);
    }
    Ok(out)
}

// ── merging and selection ───────────────────────────────────────────────────

/// One grid point's output.
pub struct Candidate {
    pub desc: String,
    pub checkpoint: Checkpoint,
    pub traces: Option<BTreeMap<String, CgTrace>>,
}

struct MergeContext<'a> {
    spec: &'a MlpSpec,
    /// Tasks whose validation splits drive hyperparameter selection.
    selection_tasks: &'a [TaskData],
    models: &'a [Checkpoint],
    stats: &'a [StatsBundle],
    pretrained: &'a Checkpoint,
}

/// Mean accuracy over the selection tasks; refuses anything that is not
/// validation-tagged so selection can never touch test data.
fn selection_score(spec: &MlpSpec, ckpt: &Checkpoint, tasks: &[TaskData]) -> Result<f64> {
    let accs: Vec<Accuracy> = tasks
        .iter()
        .map(|t| evaluate(spec, ckpt, &t.validation))
        .collect::<Result<_>>()?;
    mean_validation_accuracy(&accs)
}

/// The selection gate: accepts only validation-tagged accuracies.
pub fn mean_validation_accuracy(accs: &[Accuracy]) -> Result<f64> {
    if accs.is_empty() {
        return Err(MatsError::Config("no accuracies to select on".into()));
    }
    if let Some(bad) = accs.iter().find(|a| a.split != Split::Validation) {
        return Err(MatsError::Config(format!(
            "hyperparameter selection requires validation-split results, got {}",
            bad.split
        )));
    }
    Ok(accs.iter().map(|a| a.value).sum::<f64>() / accs.len() as f64)
}

fn format_f64(v: f64) -> String {
    // Grid values are short decimals; plain formatting keeps them readable.
    format!("{v}")
}

fn tune_lambda<F>(ctx: &MergeContext<'_>, grid: &[f64], merge: F) -> Result<(f64, Checkpoint)>
where
    F: Fn(f64) -> Result<Checkpoint>,
{
    let mut best: Option<(f64, f64, Checkpoint)> = None;
    for &lambda in grid {
        let merged = merge(lambda)?;
        let score = selection_score(ctx.spec, &merged, ctx.selection_tasks)?;
        let better = match &best {
            None => true,
            Some((_, best_score, _)) => score > *best_score,
        };
        if better {
            best = Some((lambda, score, merged));
        }
    }
    let (lambda, _, merged) = best.expect("nonempty grid");
    Ok((lambda, merged))
}

fn init_for_mats<'a>(
    ctx: &'a MergeContext<'a>,
    init_name: &str,
    lambda_grid: &[f64],
) -> Result<(InitSpec<'a>, String)> {
    match init_name {
        "average" => Ok((InitSpec::Average, String::new())),
        "task_arithmetic" => {
            let (lambda, _) = tune_lambda(ctx, lambda_grid, |l| {
                task_arithmetic(ctx.models, ctx.pretrained, l)
            })?;
            Ok((
                InitSpec::TaskArithmetic {
                    pretrained: ctx.pretrained,
                    lambda,
                },
                format!("lambda={},", format_f64(lambda)),
            ))
        }
        "ties" => {
            let trim = mats_core::merge::MergeHyperparams::default().ties_trim_fraction;
            let (lambda, _) = tune_lambda(ctx, lambda_grid, |l| {
                ties_merge(ctx.models, ctx.pretrained, l, trim)
            })?;
            Ok((
                InitSpec::Ties {
                    pretrained: ctx.pretrained,
                    lambda,
                    trim_fraction: trim,
                },
                format!("lambda={},", format_f64(lambda)),
            ))
        }
        "diag_fisher" => Ok((InitSpec::DiagFisher { epsilon: None }, String::new())),
        "regmean" => Ok((InitSpec::RegMean { gamma: 0.9 }, String::new())),
        "pretrained" => Ok((InitSpec::Pretrained(ctx.pretrained), String::new())),
        "zero" => Ok((InitSpec::Zero, String::new())),
        other => Err(MatsError::Config(format!("unknown init `{other}`"))),
    }
}

/// One CG round over the iteration grid.
fn mats_round(
    ctx: &MergeContext<'_>,
    objective: mats_core::solver::MergeObjective,
    init: &InitSpec<'_>,
    cg_iters_grid: &[usize],
    desc_prefix: &str,
) -> Result<Vec<Candidate>> {
    cg_iters_grid
        .iter()
        .map(|&iters| {
            let cg = CgConfig::with_iters(iters);
            let (checkpoint, traces) = mats_merge(ctx.models, ctx.stats, objective, init, &cg)?;
            Ok(Candidate {
                desc: format!("{desc_prefix}iters={iters}"),
                checkpoint,
                traces: Some(traces),
            })
        })
        .collect()
}

/// Picks the candidate with the best validation mean (earliest grid point on
/// ties).
fn select_candidate(ctx: &MergeContext<'_>, candidates: Vec<Candidate>) -> Result<Candidate> {
    let mut best: Option<(f64, Candidate)> = None;
    for candidate in candidates {
        let score = selection_score(ctx.spec, &candidate.checkpoint, ctx.selection_tasks)?;
        let better = match &best {
            None => true,
            Some((best_score, _)) => score > *best_score,
        };
        if better {
            best = Some((score, candidate));
        }
    }
    Ok(best.expect("nonempty candidate list").1)
}

fn method_candidates(ctx: &MergeContext<'_>, method: &MethodConfig) -> Result<Vec<Candidate>> {
    match method {
        MethodConfig::SimpleAverage => Ok(vec![Candidate {
            desc: "-".into(),
            checkpoint: simple_average(ctx.models)?,
            traces: None,
        }]),
        MethodConfig::TaskArithmetic { lambda_grid } => lambda_grid
            .iter()
            .map(|&lambda| {
                Ok(Candidate {
                    desc: format!("lambda={}", format_f64(lambda)),
                    checkpoint: task_arithmetic(ctx.models, ctx.pretrained, lambda)?,
                    traces: None,
                })
            })
            .collect(),
        MethodConfig::Ties {
            lambda_grid,
            trim_fraction,
        } => lambda_grid
            .iter()
            .map(|&lambda| {
                Ok(Candidate {
                    desc: format!("lambda={}", format_f64(lambda)),
                    checkpoint: ties_merge(ctx.models, ctx.pretrained, lambda, *trim_fraction)?,
                    traces: None,
                })
            })
            .collect(),
        MethodConfig::DiagFisher => {
            let eps = default_fisher_epsilon(ctx.stats);
            Ok(vec![Candidate {
                desc: "-".into(),
                checkpoint: diagonal_fisher_merge(ctx.models, ctx.stats, eps)?,
                traces: None,
            }])
        }
        MethodConfig::Regmean { gamma } => Ok(vec![Candidate {
            desc: format!("gamma={}", format_f64(*gamma)),
            checkpoint: regmean_closed_form(ctx.models, ctx.stats, *gamma)?,
            traces: None,
        }]),
        MethodConfig::Mats {
            objective,
            init,
            cg_iters_grid,
            init_lambda_grid,
            extra_rounds,
        } => {
            let objective = parse_objective(objective)?;
            let (init_spec, init_desc) = init_for_mats(ctx, init, init_lambda_grid)?;
            let first = mats_round(ctx, objective, &init_spec, cg_iters_grid, &init_desc)?;
            if extra_rounds.is_empty() {
                return Ok(first);
            }
            // Additional rounds are tuned greedily: each round's iteration
            // count is selected on validation before the next round starts
            // from its output. The final round's grid goes to the caller.
            let mut current = select_candidate(ctx, first)?;
            for (idx, extra) in extra_rounds.iter().enumerate() {
                let round_objective = parse_objective(extra)?;
                let desc_prefix = format!("{};", current.desc);
                let round = mats_round(
                    ctx,
                    round_objective,
                    &InitSpec::Provided(&current.checkpoint),
                    cg_iters_grid,
                    &desc_prefix,
                )?;
                if idx + 1 == extra_rounds.len() {
                    return Ok(round);
                }
                current = select_candidate(ctx, round)?;
            }
            unreachable!("loop returns on the last round");
        }
    }
}

// ── results ─────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MethodOutcome {
    pub label: String,
    /// Hyperparameters picked by validation, `-` when there are none.
    pub selected: String,
    /// Test accuracy per report column.
    pub per_column: Vec<f64>,
    pub average: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SeedResults {
    pub seed: u64,
    pub columns: Vec<String>,
    pub rows: Vec<MethodOutcome>,
}

/// Aggregate over seeds plus everything needed to re-emit reports.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ReportBundle {
    pub scenario: Scenario,
    pub columns: Vec<String>,
    pub seeds: Vec<u64>,
    pub per_seed: Vec<SeedResults>,
    /// Rows averaged over seeds; `selected` joins the per-seed choices.
    pub aggregate: Vec<MethodOutcome>,
}

fn test_row(spec: &MlpSpec, ckpt: &Checkpoint, tasks: &[TaskData]) -> Result<Vec<f64>> {
    tasks
        .iter()
        .map(|t| Ok(evaluate(spec, ckpt, &t.test)?.value))
        .collect()
}

fn outcome(label: &str, selected: &str, per_column: Vec<f64>) -> MethodOutcome {
    let average = per_column.iter().sum::<f64>() / per_column.len().max(1) as f64;
    MethodOutcome {
        label: label.into(),
        selected: selected.into(),
        per_column,
        average,
    }
}

fn save_selected(
    config: &ExperimentConfig,
    seed: u64,
    label: &str,
    candidate: &Candidate,
) -> Result<()> {
    let merged_dir = config.seed_dir(seed).join("merged");
    std::fs::create_dir_all(&merged_dir)?;
    candidate.checkpoint.save(merged_dir.join(format!("{label}.mats")))?;
    if let Some(traces) = &candidate.traces {
        let traces_dir = config.seed_dir(seed).join("traces");
        std::fs::create_dir_all(&traces_dir)?;
        let json = trace_sidecar_json(traces);
        std::fs::write(traces_dir.join(format!("{label}.json")), json)?;
    }
    Ok(())
}

/// Per-parameter CG summary: iterations, stop reason, final residual, and
/// the recorded residual/objective series.
pub fn trace_sidecar_json(traces: &BTreeMap<String, CgTrace>) -> String {
    #[derive(Serialize)]
    struct Entry {
        final_residual: f64,
        iterations: usize,
        objective: Vec<f64>,
        residual: Vec<f64>,
        stop: String,
    }
    let map: BTreeMap<&String, Entry> = traces
        .iter()
        .map(|(name, t)| {
            (
                name,
                Entry {
                    final_residual: t.final_residual(),
                    iterations: t.steps(),
                    objective: t.iterations.iter().map(|i| i.objective).collect(),
                    residual: t.iterations.iter().map(|i| i.residual_norm).collect(),
                    stop: t.stop.to_string(),
                },
            )
        })
        .collect();
    serde_json::to_string_pretty(&map).expect("serializable") + "\n"
}

/// Runs every configured method for one seed of the multitask scenario.
pub fn run_seed_multitask(config: &ExperimentConfig, seed: u64) -> Result<SeedResults> {
    let tasks = ensure_datasets(config, seed)?;
    let trained = ensure_models(config, seed, &tasks)?;
    let stats = ensure_stats(config, seed, &tasks, &trained.task_models)?;
    let spec = config.mlp_spec();
    stage("merge", run_seed_multitask_inner(config, seed, &spec, &tasks, &trained, &stats))
}

fn run_seed_multitask_inner(
    config: &ExperimentConfig,
    seed: u64,
    spec: &MlpSpec,
    tasks: &[TaskData],
    trained: &TrainedModels,
    stats: &[StatsBundle],
) -> Result<SeedResults> {
    let columns: Vec<String> = tasks.iter().map(|t| t.name.clone()).collect();
    let ctx = MergeContext {
        spec,
        selection_tasks: tasks,
        models: &trained.task_models,
        stats,
        pretrained: &trained.pretrained,
    };

    let mut rows = Vec::new();
    for method in &config.methods {
        let label = method.label();
        let candidates = method_candidates(&ctx, method)?;
        let mut scored = Vec::with_capacity(candidates.len());
        for candidate in candidates {
            let score = selection_score(spec, &candidate.checkpoint, tasks)?;
            scored.push((score, candidate));
        }
        // Best validation mean; ties keep the earliest grid point.
        let best = scored
            .iter()
            .enumerate()
            .max_by(|(ia, (sa, _)), (ib, (sb, _))| {
                sa.partial_cmp(sb).expect("finite scores").then(ib.cmp(ia))
            })
            .map(|(i, _)| i)
            .expect("nonempty candidates");
        let (_, winner) = &scored[best];
        save_selected(config, seed, &label, winner)?;
        rows.push(outcome(&label, &winner.desc, test_row(spec, &winner.checkpoint, tasks)?));
    }

    // Reference rows: the pretrained model, each task's own fine-tuned model
    // on its own test set, and the jointly trained multitask model.
    rows.push(outcome(
        "pretrained",
        "-",
        test_row(spec, &trained.pretrained, tasks)?,
    ));
    let ceilings: Vec<f64> = tasks
        .iter()
        .zip(&trained.task_models)
        .map(|(t, m)| Ok(evaluate(spec, m, &t.test)?.value))
        .collect::<Result<_>>()?;
    rows.push(outcome("finetuned_per_task", "-", ceilings));
    if let Some(multitask) = &trained.multitask {
        rows.push(outcome(
            "multitask_joint",
            "-",
            test_row(spec, multitask, tasks)?,
        ));
    }

    Ok(SeedResults {
        seed,
        columns,
        rows,
    })
}

/// Intermediate-task scenario: task 0 is the data-poor target; each other
/// task is a candidate intermediate. Every method merges the pair
/// (target, intermediate) and reports target-task test accuracy, with
/// hyperparameters selected on the target's validation split.
pub fn run_seed_intermediate(config: &ExperimentConfig, seed: u64) -> Result<SeedResults> {
    let tasks = ensure_datasets(config, seed)?;
    let trained = ensure_models(config, seed, &tasks)?;
    let stats = ensure_stats(config, seed, &tasks, &trained.task_models)?;
    let spec = config.mlp_spec();
    stage("merge", run_seed_intermediate_inner(config, seed, &spec, &tasks, &trained, &stats))
}

fn run_seed_intermediate_inner(
    config: &ExperimentConfig,
    seed: u64,
    spec: &MlpSpec,
    tasks: &[TaskData],
    trained: &TrainedModels,
    stats: &[StatsBundle],
) -> Result<SeedResults> {
    let target_task = std::slice::from_ref(&tasks[0]);
    let columns: Vec<String> = tasks[1..].iter().map(|t| t.name.clone()).collect();
    let mut rows: Vec<MethodOutcome> = Vec::new();

    let target_baseline = evaluate(spec, &trained.task_models[0], &tasks[0].test)?.value;
    rows.push(outcome(
        "target_only",
        "-",
        vec![target_baseline; columns.len()],
    ));

    for method in &config.methods {
        let label = method.label();
        let mut per_column = Vec::with_capacity(columns.len());
        let mut selections = Vec::with_capacity(columns.len());
        for i in 1..tasks.len() {
            let pair_models = vec![trained.task_models[0].clone(), trained.task_models[i].clone()];
            let pair_stats = vec![stats[0].clone(), stats[i].clone()];
            let ctx = MergeContext {
                spec,
                selection_tasks: target_task,
                models: &pair_models,
                stats: &pair_stats,
                pretrained: &trained.pretrained,
            };
            let candidates = method_candidates(&ctx, method)?;
            let mut scored = Vec::with_capacity(candidates.len());
            for candidate in candidates {
                let score = selection_score(spec, &candidate.checkpoint, target_task)?;
                scored.push((score, candidate));
            }
            let best = scored
                .iter()
                .enumerate()
                .max_by(|(ia, (sa, _)), (ib, (sb, _))| {
                    sa.partial_cmp(sb).expect("finite scores").then(ib.cmp(ia))
                })
                .map(|(i, _)| i)
                .expect("nonempty candidates");
            let (_, winner) = &scored[best];
            save_selected(config, seed, &format!("{label}_with_{}", tasks[i].name), winner)?;
            per_column.push(evaluate(spec, &winner.checkpoint, &tasks[0].test)?.value);
            selections.push(winner.desc.clone());
        }
        rows.push(outcome(&label, &selections.join("/"), per_column));
    }

    Ok(SeedResults {
        seed,
        columns,
        rows,
    })
}

/// Runs the configured scenario for every seed and aggregates.
pub fn run_scenario(config: &ExperimentConfig) -> Result<ReportBundle> {
    let mut per_seed = Vec::with_capacity(config.seeds.len());
    for &seed in &config.seeds {
        let results = match config.scenario {
            Scenario::Multitask => run_seed_multitask(config, seed)?,
            Scenario::IntermediateTask => run_seed_intermediate(config, seed)?,
        };
        let json = serde_json::to_string_pretty(&results).expect("serializable") + "\n";
        std::fs::write(config.seed_dir(seed).join("results.json"), json)?;
        per_seed.push(results);
    }
    let columns = per_seed[0].columns.clone();
    let labels: Vec<String> = per_seed[0].rows.iter().map(|r| r.label.clone()).collect();

    let mut aggregate = Vec::with_capacity(labels.len());
    for (row_idx, label) in labels.iter().enumerate() {
        let mut per_column = vec![0.0; columns.len()];
        let mut selections = Vec::with_capacity(per_seed.len());
        for results in &per_seed {
            let row = &results.rows[row_idx];
            for (acc, v) in per_column.iter_mut().zip(&row.per_column) {
                *acc += v / per_seed.len() as f64;
            }
            selections.push(row.selected.clone());
        }
        selections.dedup();
        aggregate.push(outcome(label, &selections.join("; "), per_column));
    }
    Ok(ReportBundle {
        scenario: config.scenario,
        columns,
        seeds: config.seeds.clone(),
        per_seed,
        aggregate,
    })
}
