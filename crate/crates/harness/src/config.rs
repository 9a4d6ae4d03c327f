//! Experiment configuration: a single JSON file describes the task suite,
//! model, training, statistics, method grids, scenario, and seeds.

use std::path::{Path, PathBuf};

use mats_core::fisher::{FisherMode, StatsConfig};
use mats_core::mlp::{MlpSpec, TrainConfig};
use mats_core::synth::{Split, SuiteConfig};
use mats_core::{MatsError, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    /// Merge all task models into one multitask model.
    Multitask,
    /// Merge a data-poor target model pairwise with each candidate
    /// intermediate-task model and report target accuracy.
    IntermediateTask,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteSection {
    pub num_tasks: usize,
    pub classes: usize,
    pub input_dim: usize,
    pub train_size: usize,
    pub val_size: usize,
    pub test_size: usize,
    pub noise_sigma: f64,
    pub prototype_scale: f64,
    pub offset_scale: f64,
    pub rotation_angle: f64,
    pub rotation_planes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSection {
    pub hidden: Vec<usize>,
    pub use_bias: bool,
    pub use_scaling: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSection {
    pub lr: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub pretrain_steps: usize,
    pub multitask_steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsSection {
    /// "empirical" or "true".
    pub fisher_mode: String,
    /// "train" or "validation".
    pub split: String,
    pub exact_fisher_cap: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum MethodConfig {
    SimpleAverage,
    TaskArithmetic {
        lambda_grid: Vec<f64>,
    },
    Ties {
        lambda_grid: Vec<f64>,
        trim_fraction: f64,
    },
    DiagFisher,
    Regmean {
        gamma: f64,
    },
    Mats {
        objective: String,
        init: String,
        cg_iters_grid: Vec<usize>,
        #[serde(default = "default_lambda_grid")]
        init_lambda_grid: Vec<f64>,
        /// Objectives for additional CG rounds chained after the first, each
        /// initialized at the previous round's output.
        #[serde(default)]
        extra_rounds: Vec<String>,
    },
}

pub fn default_lambda_grid() -> Vec<f64> {
    (1..=10).map(|i| i as f64 / 10.0).collect()
}

impl MethodConfig {
    /// Row label in reports and artifact file names.
    pub fn label(&self) -> String {
        match self {
            MethodConfig::SimpleAverage => "simple_average".into(),
            MethodConfig::TaskArithmetic { .. } => "task_arithmetic".into(),
            MethodConfig::Ties { .. } => "ties".into(),
            MethodConfig::DiagFisher => "diag_fisher".into(),
            MethodConfig::Regmean { .. } => "regmean".into(),
            MethodConfig::Mats { extra_rounds, .. } if !extra_rounds.is_empty() => {
                "mats_multi_round".into()
            }
            MethodConfig::Mats { .. } => "mats".into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let nonempty = |grid: &[f64], what: &str| -> Result<()> {
            if grid.is_empty() {
                Err(MatsError::Config(format!("{what} grid is empty")))
            } else {
                Ok(())
            }
        };
        match self {
            MethodConfig::TaskArithmetic { lambda_grid } => nonempty(lambda_grid, "lambda"),
            MethodConfig::Ties { lambda_grid, trim_fraction } => {
                nonempty(lambda_grid, "lambda")?;
                if !(*trim_fraction > 0.0 && *trim_fraction < 1.0) {
                    return Err(MatsError::Config(format!(
                        "trim_fraction must be in (0,1), got {trim_fraction}"
                    )));
                }
                Ok(())
            }
            MethodConfig::Regmean { gamma } => {
                if !(*gamma > 0.0 && *gamma <= 1.0) {
                    return Err(MatsError::Config(format!("gamma must be in (0,1], got {gamma}")));
                }
                Ok(())
            }
            MethodConfig::Mats { objective, init, cg_iters_grid, init_lambda_grid, extra_rounds } => {
                if cg_iters_grid.is_empty() {
                    return Err(MatsError::Config("cg_iters grid is empty".into()));
                }
                if cg_iters_grid.contains(&0) {
                    return Err(MatsError::Config("cg_iters must be at least 1".into()));
                }
                nonempty(init_lambda_grid, "init lambda")?;
                parse_objective(objective)?;
                for extra in extra_rounds {
                    parse_objective(extra)?;
                }
                match init.as_str() {
                    "average" | "task_arithmetic" | "ties" | "diag_fisher" | "regmean"
                    | "pretrained" | "zero" => Ok(()),
                    other => Err(MatsError::Config(format!("unknown init `{other}`"))),
                }
            }
            MethodConfig::SimpleAverage | MethodConfig::DiagFisher => Ok(()),
        }
    }
}

pub fn parse_objective(name: &str) -> Result<mats_core::solver::MergeObjective> {
    mats_core::solver::MergeObjective::parse(name)
        .ok_or_else(|| MatsError::Config(format!("unknown objective `{name}`")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntermediateSection {
    /// Training examples kept for the data-poor target task (task 0).
    pub target_train_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub scenario: Scenario,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    pub suite: SuiteSection,
    pub model: ModelSection,
    pub training: TrainingSection,
    pub stats: StatsSection,
    pub methods: Vec<MethodConfig>,
    #[serde(default)]
    pub intermediate: Option<IntermediateSection>,
}

impl ExperimentConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path.as_ref())?;
        let config: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|e| MatsError::Config(format!("{}: {e}", path.as_ref().display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(MatsError::Config("seeds must be explicit and nonempty".into()));
        }
        if self.methods.is_empty() {
            return Err(MatsError::Config("method list is empty".into()));
        }
        for method in &self.methods {
            method.validate()?;
        }
        self.suite_config(0).validate()?;
        self.mlp_spec().validate()?;
        if self.fisher_mode().is_none() {
            return Err(MatsError::Config(format!(
                "unknown fisher_mode `{}`",
                self.stats.fisher_mode
            )));
        }
        match Split::parse(&self.stats.split) {
            Some(Split::Train | Split::Validation) => {}
            _ => {
                return Err(MatsError::Config(format!(
                    "stats split must be train or validation, got `{}`",
                    self.stats.split
                )))
            }
        }
        if self.scenario == Scenario::IntermediateTask {
            let section = self.intermediate.as_ref().ok_or_else(|| {
                MatsError::Config("intermediate_task scenario needs an `intermediate` section".into())
            })?;
            if section.target_train_size == 0 {
                return Err(MatsError::Config("target_train_size must be positive".into()));
            }
            if self.suite.num_tasks < 2 {
                return Err(MatsError::Config(
                    "intermediate_task scenario needs at least 2 tasks".into(),
                ));
            }
        }
        Ok(())
    }

    /// Suite configuration for one experiment seed; the generator seed is
    /// derived so different experiment seeds draw different tasks.
    pub fn suite_config(&self, seed: u64) -> SuiteConfig {
        SuiteConfig {
            num_tasks: self.suite.num_tasks,
            classes: self.suite.classes,
            input_dim: self.suite.input_dim,
            train_size: self.suite.train_size,
            val_size: self.suite.val_size,
            test_size: self.suite.test_size,
            noise_sigma: self.suite.noise_sigma,
            prototype_scale: self.suite.prototype_scale,
            offset_scale: self.suite.offset_scale,
            rotation_angle: self.suite.rotation_angle,
            rotation_planes: self.suite.rotation_planes,
            seed: mats_core::rng::SeedRng::new(seed).split("suite").seed(),
        }
    }

    pub fn mlp_spec(&self) -> MlpSpec {
        MlpSpec::new(
            self.suite.input_dim,
            &self.model.hidden,
            self.suite.classes,
            self.model.use_bias,
            self.model.use_scaling,
        )
    }

    pub fn train_config(&self, seed: u64, label: &str) -> TrainConfig {
        TrainConfig {
            lr: self.training.lr,
            batch_size: self.training.batch_size,
            steps: self.training.steps,
            seed: mats_core::rng::SeedRng::new(seed).split(label).seed(),
        }
    }

    pub fn fisher_mode(&self) -> Option<FisherMode> {
        FisherMode::parse(&self.stats.fisher_mode)
    }

    pub fn stats_config(&self, seed: u64) -> StatsConfig {
        StatsConfig {
            mode: self.fisher_mode().expect("validated"),
            split: Split::parse(&self.stats.split).expect("validated"),
            exact_fisher_cap: self.stats.exact_fisher_cap,
            seed: mats_core::rng::SeedRng::new(seed).split("stats").seed(),
        }
    }

    /// Directory holding one seed's artifacts.
    pub fn seed_dir(&self, seed: u64) -> PathBuf {
        self.out_dir.join(format!("seed_{seed}"))
    }

    /// The default desk-scale multitask experiment: 8 related 4-class tasks
    /// over 16 input dimensions, a 16→32→32→4 MLP, and every merge method
    /// over its grid. Sized so a full run takes minutes on one CPU core.
    pub fn desk_default() -> ExperimentConfig {
        ExperimentConfig {
            scenario: Scenario::Multitask,
            seeds: vec![0, 1, 2, 3, 4],
            out_dir: PathBuf::from("runs/desk"),
            suite: SuiteSection {
                num_tasks: 8,
                classes: 4,
                input_dim: 16,
                train_size: 2000,
                val_size: 500,
                test_size: 500,
                noise_sigma: 1.0,
                prototype_scale: 4.0,
                offset_scale: 0.5,
                rotation_angle: 1.2,
                rotation_planes: 16,
            },
            model: ModelSection {
                hidden: vec![32, 32],
                use_bias: true,
                use_scaling: false,
            },
            training: TrainingSection {
                lr: 0.2,
                batch_size: 32,
                steps: 2000,
                pretrain_steps: 100,
                multitask_steps: 2000,
            },
            stats: StatsSection {
                fisher_mode: "empirical".into(),
                split: "validation".into(),
                exact_fisher_cap: 4096,
            },
            methods: vec![
                MethodConfig::SimpleAverage,
                MethodConfig::TaskArithmetic {
                    lambda_grid: default_lambda_grid(),
                },
                MethodConfig::Ties {
                    lambda_grid: default_lambda_grid(),
                    trim_fraction: 0.8,
                },
                MethodConfig::DiagFisher,
                MethodConfig::Regmean { gamma: 0.9 },
                MethodConfig::Mats {
                    objective: "regmean".into(),
                    init: "task_arithmetic".into(),
                    cg_iters_grid: (1..=10).map(|i| i * 10).collect(),
                    init_lambda_grid: default_lambda_grid(),
                    extra_rounds: Vec::new(),
                },
                MethodConfig::Mats {
                    objective: "regmean".into(),
                    init: "task_arithmetic".into(),
                    cg_iters_grid: (1..=10).map(|i| i * 10).collect(),
                    init_lambda_grid: default_lambda_grid(),
                    extra_rounds: vec!["block_fisher_kfac".into()],
                },
            ],
            intermediate: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_default_validates() {
        ExperimentConfig::desk_default().validate().unwrap();
    }

    #[test]
    fn json_round_trip() {
        let config = ExperimentConfig::desk_default();
        let text = serde_json::to_string_pretty(&config).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, config);
    }

    #[test]
    fn empty_seeds_rejected() {
        let mut config = ExperimentConfig::desk_default();
        config.seeds.clear();
        assert!(config.validate().is_err());
    }

    #[test]
    fn unknown_objective_rejected() {
        let mut config = ExperimentConfig::desk_default();
        config.methods.push(MethodConfig::Mats {
            objective: "bogus".into(),
            init: "average".into(),
            cg_iters_grid: vec![10],
            init_lambda_grid: default_lambda_grid(),
            extra_rounds: Vec::new(),
        });
        assert!(config.validate().is_err());
    }

    #[test]
    fn intermediate_scenario_needs_section() {
        let mut config = ExperimentConfig::desk_default();
        config.scenario = Scenario::IntermediateTask;
        assert!(config.validate().is_err());
        config.intermediate = Some(IntermediateSection { target_train_size: 200 });
        config.validate().unwrap();
    }
}
