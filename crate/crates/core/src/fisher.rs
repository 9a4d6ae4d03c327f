//! Curvature statistics consumed by the merge objectives: diagonal Fisher
//! (empirical or true), per-layer input/output-gradient Gram matrices (the
//! K-FAC factors), and exact dense Fishers for small vector parameters.
//!
//! The per-example gradient of a linear layer factors as `z o′ᵀ`, so the
//! empirical diagonal Fisher of a weight block is `(1/N) (Z∘Z)ᵀ (O′∘O′)` and
//! the K-FAC factors are `ZᵀZ/N` and `O′ᵀO′/N` — everything here is derived
//! from the captures produced by [`crate::mlp::backward`].

use std::collections::BTreeMap;
use std::fmt;

use crate::checkpoint::{Checkpoint, ParamRole, StatsBundle};
use crate::error::{MatsError, Result};
use crate::mlp::{backward, forward, softmax_rows, CaptureRecord, MlpSpec};
use crate::rng::SeedRng;
use crate::synth::{Split, TaskData};
use crate::tensor::{gram, matmul, sym_eig, Matrix};

/// Which label distribution the Fisher expectation uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FisherMode {
    /// Ground-truth labels.
    Empirical,
    /// The model's own predictive distribution: exact class enumeration for
    /// diagonal Fishers, one sampled label per example for K-FAC factors.
    True,
}

impl FisherMode {
    pub fn parse(s: &str) -> Option<FisherMode> {
        match s {
            "empirical" => Some(FisherMode::Empirical),
            "true" => Some(FisherMode::True),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            FisherMode::Empirical => "empirical",
            FisherMode::True => "true",
        }
    }
}

impl fmt::Display for FisherMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Statistics bundle for one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerStats {
    pub role: ParamRole,
    /// Elementwise Fisher, shaped like the parameter (row-major).
    pub diag_fisher: Vec<f64>,
    /// `ZᵀZ/N` (linear weights only).
    pub input_gram: Option<Matrix>,
    /// `O′ᵀO′/N` (linear weights only).
    pub outgrad_gram: Option<Matrix>,
    /// Dense `n×n` Fisher (vector parameters only).
    pub exact_fisher: Option<Matrix>,
    pub n_examples: u64,
}

impl LayerStats {
    /// Checks the documented invariants: nonnegative diagonal Fisher,
    /// symmetric PSD Gram/Fisher matrices (within 1e-8), and agreement of the
    /// exact Fisher's diagonal with the diagonal Fisher when both exist.
    pub fn validate(&self) -> Result<()> {
        if self.n_examples == 0 {
            return Err(MatsError::Contract("stats with zero examples".into()));
        }
        if self.diag_fisher.iter().any(|&f| f < 0.0 || !f.is_finite()) {
            return Err(MatsError::Contract("negative diagonal Fisher entry".into()));
        }
        let check_psd = |m: &Matrix, what: &str| -> Result<()> {
            let (_, lambda) = sym_eig(m)?;
            let scale = lambda.first().copied().unwrap_or(0.0).abs().max(1.0);
            if lambda.iter().any(|&l| l < -1e-8 * scale) {
                return Err(MatsError::Contract(format!(
                    "{what} is not PSD (min eigenvalue {:e})",
                    lambda.last().copied().unwrap_or(0.0)
                )));
            }
            Ok(())
        };
        if let Some(g) = &self.input_gram {
            check_psd(g, "input_gram")?;
        }
        if let Some(g) = &self.outgrad_gram {
            check_psd(g, "outgrad_gram")?;
        }
        if let Some(f) = &self.exact_fisher {
            check_psd(f, "exact_fisher")?;
            for (i, df) in self.diag_fisher.iter().enumerate() {
                let scale = df.abs().max(1.0);
                if (f.get(i, i) - df).abs() > 1e-8 * scale {
                    return Err(MatsError::Contract(format!(
                        "exact_fisher diagonal disagrees with diag_fisher at index {i}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Configuration for [`collect_stats`].
#[derive(Debug, Clone, PartialEq)]
pub struct StatsConfig {
    pub mode: FisherMode,
    /// Which split the statistics are computed on (train or validation).
    pub split: Split,
    /// Largest vector length for which the exact dense Fisher is stored.
    pub exact_fisher_cap: usize,
    /// Seed for label sampling in true-mode K-FAC factors.
    pub seed: u64,
}

impl Default for StatsConfig {
    fn default() -> Self {
        StatsConfig {
            mode: FisherMode::Empirical,
            split: Split::Validation,
            exact_fisher_cap: 4096,
            seed: 0,
        }
    }
}

fn square_entries(m: &Matrix) -> Matrix {
    Matrix::from_fn(m.rows(), m.cols(), |i, j| {
        let v = m.get(i, j);
        v * v
    })
}

fn scale_rows(m: &Matrix, weights: &[f64]) -> Matrix {
    Matrix::from_fn(m.rows(), m.cols(), |i, j| m.get(i, j) * weights[i])
}

/// Accumulates diagonal-Fisher contributions from one capture, with one
/// weight per example (all-ones for the empirical Fisher, `p(y=c|x)` columns
/// for the true Fisher's class enumeration).
fn accumulate_diag(
    spec: &MlpSpec,
    capture: &CaptureRecord,
    example_weights: Option<&[f64]>,
    acc: &mut BTreeMap<String, Vec<f64>>,
) -> Result<()> {
    let n = capture.layers[0].input.rows();
    let inv_n = 1.0 / n as f64;
    for (l, cap) in capture.layers.iter().enumerate() {
        let z2 = square_entries(&cap.input);
        let mut o2 = square_entries(&cap.outgrad);
        if let Some(w) = example_weights {
            o2 = scale_rows(&o2, w);
        }
        let fw = matmul(&z2.transpose(), &o2)?.scale(inv_n);
        acc.entry(MlpSpec::weight_name(l))
            .or_insert_with(|| vec![0.0; fw.data().len()])
            .iter_mut()
            .zip(fw.data())
            .for_each(|(a, v)| *a += v);
        if spec.use_scaling {
            let rows = cap
                .scale_grad_rows
                .as_ref()
                .expect("scaling model captures scale gradients");
            let mut s2 = square_entries(rows);
            if let Some(w) = example_weights {
                s2 = scale_rows(&s2, w);
            }
            let fs: Vec<f64> = (0..s2.cols())
                .map(|j| (0..n).map(|i| s2.get(i, j)).sum::<f64>() * inv_n)
                .collect();
            acc.entry(MlpSpec::scale_name(l))
                .or_insert_with(|| vec![0.0; fs.len()])
                .iter_mut()
                .zip(&fs)
                .for_each(|(a, v)| *a += v);
        }
    }
    Ok(())
}

/// Diagonal Fisher for every parameter.
///
/// Empirical mode averages the squared per-example gradients at the
/// ground-truth labels; true mode enumerates classes exactly, weighting each
/// class's squared gradient by the model's predictive probability.
pub fn diagonal_fisher(
    spec: &MlpSpec,
    params: &Checkpoint,
    inputs: &Matrix,
    labels: &[usize],
    mode: FisherMode,
) -> Result<BTreeMap<String, Vec<f64>>> {
    if inputs.rows() == 0 {
        return Err(MatsError::Config("empty dataset".into()));
    }
    let mut acc = BTreeMap::new();
    match mode {
        FisherMode::Empirical => {
            let (_, capture) = backward(spec, params, inputs, labels)?;
            accumulate_diag(spec, &capture, None, &mut acc)?;
        }
        FisherMode::True => {
            let (logits, _) = forward(spec, params, inputs)?;
            let probs = softmax_rows(&logits);
            for c in 0..spec.classes() {
                let class_labels = vec![c; inputs.rows()];
                let (_, capture) = backward(spec, params, inputs, &class_labels)?;
                let weights: Vec<f64> = (0..inputs.rows()).map(|i| probs.get(i, c)).collect();
                accumulate_diag(spec, &capture, Some(&weights), &mut acc)?;
            }
        }
    }
    Ok(acc)
}

/// K-FAC factors `(ZᵀZ/N, O′ᵀO′/N)` per linear layer, keyed by weight name.
///
/// True mode replaces the ground-truth labels with one label per example
/// sampled from the model's predictive distribution using `rng`.
pub fn kfac_factors(
    spec: &MlpSpec,
    params: &Checkpoint,
    inputs: &Matrix,
    labels: &[usize],
    mode: FisherMode,
    rng: &mut SeedRng,
) -> Result<BTreeMap<String, (Matrix, Matrix)>> {
    if inputs.rows() == 0 {
        return Err(MatsError::Config("empty dataset".into()));
    }
    let effective_labels: Vec<usize> = match mode {
        FisherMode::Empirical => labels.to_vec(),
        FisherMode::True => {
            let (logits, _) = forward(spec, params, inputs)?;
            let probs = softmax_rows(&logits);
            (0..inputs.rows())
                .map(|i| rng.categorical(probs.row(i)))
                .collect()
        }
    };
    let (_, capture) = backward(spec, params, inputs, &effective_labels)?;
    let inv_n = 1.0 / inputs.rows() as f64;
    let mut out = BTreeMap::new();
    for (l, cap) in capture.layers.iter().enumerate() {
        let input_gram = gram(&cap.input).scale(inv_n);
        let outgrad_gram = gram(&cap.outgrad).scale(inv_n);
        out.insert(MlpSpec::weight_name(l), (input_gram, outgrad_gram));
    }
    Ok(out)
}

/// Exact dense Fisher of one vector parameter: the mean over examples (and
/// over labels, per mode) of `outer(g, g)` for the per-example gradient `g`.
pub fn exact_fisher_vector(
    spec: &MlpSpec,
    params: &Checkpoint,
    inputs: &Matrix,
    labels: &[usize],
    param_name: &str,
    mode: FisherMode,
    cap: usize,
) -> Result<Matrix> {
    let Some(layer) = spec.scale_layer(param_name) else {
        return Err(MatsError::Contract(format!(
            "`{param_name}` is not a vector parameter of this spec"
        )));
    };
    let n_param = spec.layer_dims[layer].1;
    if n_param > cap {
        return Err(MatsError::Capacity(format!(
            "exact Fisher for `{param_name}` would be {n_param}x{n_param}, cap is {cap}"
        )));
    }
    if inputs.rows() == 0 {
        return Err(MatsError::Config("empty dataset".into()));
    }
    let n = inputs.rows();
    let inv_n = 1.0 / n as f64;
    let grad_rows = |labels: &[usize]| -> Result<Matrix> {
        let (_, capture) = backward(spec, params, inputs, labels)?;
        Ok(capture.layers[layer]
            .scale_grad_rows
            .clone()
            .expect("scaling model captures scale gradients"))
    };
    match mode {
        FisherMode::Empirical => {
            let rows = grad_rows(labels)?;
            Ok(gram(&rows).scale(inv_n))
        }
        FisherMode::True => {
            let (logits, _) = forward(spec, params, inputs)?;
            let probs = softmax_rows(&logits);
            let mut acc = Matrix::zeros(n_param, n_param);
            for c in 0..spec.classes() {
                let rows = grad_rows(&vec![c; n])?;
                let sqrt_p: Vec<f64> = (0..n).map(|i| probs.get(i, c).sqrt()).collect();
                let weighted = scale_rows(&rows, &sqrt_p);
                acc = acc.add(&gram(&weighted).scale(inv_n))?;
            }
            Ok(acc)
        }
    }
}

/// Computes the full statistics bundle for every parameter on the configured
/// split of `task`: the diagonal Fisher always, K-FAC factors for linear
/// weights, and the exact dense Fisher for vector parameters within the cap.
pub fn collect_stats(
    spec: &MlpSpec,
    params: &Checkpoint,
    task: &TaskData,
    config: &StatsConfig,
) -> Result<StatsBundle> {
    let dataset = match config.split {
        Split::Train => &task.train,
        Split::Validation => &task.validation,
        Split::Test => {
            return Err(MatsError::Config(
                "statistics are collected on train or validation, not test".into(),
            ))
        }
    };
    let inputs = &dataset.inputs;
    let labels = &dataset.labels;
    let n = dataset.len() as u64;

    let diag = diagonal_fisher(spec, params, inputs, labels, config.mode)?;
    let mut rng = SeedRng::new(config.seed).split("kfac_labels");
    let mut kfac = kfac_factors(spec, params, inputs, labels, config.mode, &mut rng)?;

    let mut layers = BTreeMap::new();
    for (name, param) in &params.entries {
        let diag_fisher = diag
            .get(name)
            .cloned()
            .ok_or_else(|| MatsError::MissingStat {
                param: name.clone(),
                stat: "diag_fisher".into(),
            })?;
        let (input_gram, outgrad_gram) = match param.role {
            ParamRole::LinearWeight { .. } => {
                let (a, g) = kfac.remove(name).ok_or_else(|| MatsError::MissingStat {
                    param: name.clone(),
                    stat: "input_gram".into(),
                })?;
                (Some(a), Some(g))
            }
            ParamRole::Vector { .. } => (None, None),
        };
        let exact_fisher = match param.role {
            ParamRole::Vector { n: len } if len <= config.exact_fisher_cap => Some(
                exact_fisher_vector(spec, params, inputs, labels, name, config.mode, config.exact_fisher_cap)?,
            ),
            _ => None,
        };
        layers.insert(
            name.clone(),
            LayerStats {
                role: param.role,
                diag_fisher,
                input_gram,
                outgrad_gram,
                exact_fisher,
                n_examples: n,
            },
        );
    }

    let mut provenance = BTreeMap::new();
    provenance.insert("task".into(), task.name.clone());
    provenance.insert("mode".into(), config.mode.to_string());
    provenance.insert("split".into(), config.split.to_string());
    provenance.insert("seed".into(), config.seed.to_string());
    Ok(StatsBundle {
        layers,
        fisher_mode: config.mode,
        data_split: config.split,
        example_count: n,
        provenance,
    })
}
