//! Closed-form FLOP estimates for each merging method.
//!
//! Formulas (M models, p parameters per model, natural log):
//! - averaging:        `M·p`
//! - task arithmetic:  `2·M·p + p`
//! - diagonal Fisher:  `3·M·p − p`
//! - TIES:             `9.8·M·p + M·p·ln(p) − 2·p`
//! - RegMean:          `Σ_l (M−1)·d² + ⅔·d³ + M·d²·k + (M−1)·d·k + d²·k`
//! - CG merging:       `Σ_l (M−1)·d² + M·d²·k + (M−1)·d·k + N·(d²·k + 12·d·k)`
//!
//! The per-layer formulas need the linear-layer shape list; the others only
//! need `M` and `p`. The estimator evaluates the formulas verbatim — no
//! constants are tuned to match externally quoted totals.

use std::fmt;

use mats_core::{MatsError, Result};
use serde::{Deserialize, Serialize};

/// Model-shape description feeding the cost formulas.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlopsModelSpec {
    /// Number of models merged (M).
    pub models: u64,
    /// Total parameter count per model (p).
    pub params: u64,
    /// Linear-layer shapes `(d, k)`, needed by the per-layer formulas.
    #[serde(default)]
    pub layers: Vec<(u64, u64)>,
    /// CG iteration count (N), needed by the CG-merging formula.
    #[serde(default)]
    pub cg_iters: u64,
}

impl FlopsModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.models == 0 {
            return Err(MatsError::Config("models must be at least 1".into()));
        }
        if self.params == 0 {
            return Err(MatsError::Config("params must be positive".into()));
        }
        Ok(())
    }
}

/// Reference full-model shape: 783M parameters across 288 square 1024
/// layers, 96 of 1024×2816, and 48 of 2816×38.
pub fn reference_full_model(models: u64, cg_iters: u64) -> FlopsModelSpec {
    let mut layers = Vec::new();
    layers.extend(std::iter::repeat_n((1024, 1024), 288));
    layers.extend(std::iter::repeat_n((1024, 2816), 96));
    layers.extend(std::iter::repeat_n((2816, 38), 48));
    FlopsModelSpec {
        models,
        params: 783_000_000,
        layers,
        cg_iters,
    }
}

/// Reference parameter-efficient shape: 282K parameters held in per-layer
/// vectors (no linear-layer list, so per-layer formulas do not apply).
pub fn reference_param_efficient(models: u64, cg_iters: u64) -> FlopsModelSpec {
    FlopsModelSpec {
        models,
        params: 282_000,
        layers: Vec::new(),
        cg_iters,
    }
}

/// Methods the estimator covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlopsMethod {
    Averaging,
    TaskArithmetic,
    Ties,
    DiagFisher,
    RegMean,
    CgMerge,
}

impl FlopsMethod {
    pub fn parse(s: &str) -> Option<FlopsMethod> {
        match s {
            "averaging" | "simple_average" => Some(FlopsMethod::Averaging),
            "task_arithmetic" => Some(FlopsMethod::TaskArithmetic),
            "ties" => Some(FlopsMethod::Ties),
            "diag_fisher" => Some(FlopsMethod::DiagFisher),
            "regmean" => Some(FlopsMethod::RegMean),
            "mats" | "cg_merge" => Some(FlopsMethod::CgMerge),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            FlopsMethod::Averaging => "averaging",
            FlopsMethod::TaskArithmetic => "task_arithmetic",
            FlopsMethod::Ties => "ties",
            FlopsMethod::DiagFisher => "diag_fisher",
            FlopsMethod::RegMean => "regmean",
            FlopsMethod::CgMerge => "cg_merge",
        }
    }
}

impl fmt::Display for FlopsMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Evaluates the cost formula for `method` under `spec`.
pub fn flops_estimate(method: FlopsMethod, spec: &FlopsModelSpec) -> Result<f64> {
    spec.validate()?;
    let m = spec.models as f64;
    let p = spec.params as f64;
    let per_layer = |f: &dyn Fn(f64, f64) -> f64| -> Result<f64> {
        if spec.layers.is_empty() {
            return Err(MatsError::Config(format!(
                "{method} needs the linear-layer shape list"
            )));
        }
        Ok(spec.layers.iter().map(|&(d, k)| f(d as f64, k as f64)).sum())
    };
    match method {
        FlopsMethod::Averaging => Ok(m * p),
        FlopsMethod::TaskArithmetic => Ok(2.0 * m * p + p),
        FlopsMethod::DiagFisher => Ok(3.0 * m * p - p),
        FlopsMethod::Ties => Ok(9.8 * m * p + m * p * p.ln() - 2.0 * p),
        FlopsMethod::RegMean => per_layer(&|d, k| {
            (m - 1.0) * d * d + (2.0 / 3.0) * d * d * d + m * d * d * k + (m - 1.0) * d * k + d * d * k
        }),
        FlopsMethod::CgMerge => {
            if spec.cg_iters == 0 {
                return Err(MatsError::Config("cg_merge needs cg_iters >= 1".into()));
            }
            let n = spec.cg_iters as f64;
            per_layer(&|d, k| {
                (m - 1.0) * d * d + m * d * d * k + (m - 1.0) * d * k + n * (d * d * k + 12.0 * d * k)
            })
        }
    }
}

/// Rounds to two significant figures (the precision used for cross-checks).
pub fn two_significant_figures(v: f64) -> f64 {
    if v == 0.0 || !v.is_finite() {
        return v;
    }
    let exp = v.abs().log10().floor();
    let scale = 10f64.powf(exp - 1.0);
    (v / scale).round() * scale
}

/// Prints a FLOP count the way the CLI reports it: integers exactly,
/// non-integers in scientific notation.
pub fn format_flops(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 9e15 {
        format!("{}", v as i64)
    } else {
        format!("{v:.4e}")
    }
}
