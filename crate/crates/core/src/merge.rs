//! Closed-form and heuristic merging baselines: simple averaging, task
//! arithmetic, TIES, diagonal Fisher merging, the RegMean closed form, and
//! the task-subspace diagnostic decomposition.
//!
//! All methods sum over models in a canonical order (sorted by provenance
//! task name, ties by input position) so outputs are bitwise invariant to
//! permutations of the input list.

use std::collections::BTreeMap;

use crate::checkpoint::{assert_mergeable, Checkpoint, Param, ParamRole, StatsBundle};
use crate::error::{MatsError, Result};
use crate::tensor::{chol_solve_ridged, matmul, sym_eig, Matrix};

/// Hyperparameters shared by the baseline merge methods.
#[derive(Debug, Clone, PartialEq)]
pub struct MergeHyperparams {
    /// Task-vector rescaling λ for task arithmetic and TIES.
    pub lambda_scale: f64,
    /// Fraction of each task vector zeroed by TIES trimming, in (0, 1).
    pub ties_trim_fraction: f64,
    /// Off-diagonal Gram scaling γ for the RegMean closed form, in (0, 1].
    pub regmean_offdiag_scale: f64,
    /// Ridge added to Fisher denominators; blends dead coordinates toward
    /// the plain mean.
    pub epsilon: f64,
}

impl Default for MergeHyperparams {
    fn default() -> Self {
        MergeHyperparams {
            lambda_scale: 0.5,
            ties_trim_fraction: 0.8,
            regmean_offdiag_scale: 0.9,
            epsilon: 0.0,
        }
    }
}

impl MergeHyperparams {
    pub fn validate(&self) -> Result<()> {
        if !(self.ties_trim_fraction > 0.0 && self.ties_trim_fraction < 1.0) {
            return Err(MatsError::Config(format!(
                "ties_trim_fraction must be in (0,1), got {}",
                self.ties_trim_fraction
            )));
        }
        if !(self.regmean_offdiag_scale > 0.0 && self.regmean_offdiag_scale <= 1.0) {
            return Err(MatsError::Config(format!(
                "regmean_offdiag_scale must be in (0,1], got {}",
                self.regmean_offdiag_scale
            )));
        }
        if self.epsilon < 0.0 {
            return Err(MatsError::Config("epsilon must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Canonical model order: sorted by provenance task name, stable in the
/// original position for ties or missing names.
pub fn canonical_order(models: &[Checkpoint]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..models.len()).collect();
    idx.sort_by(|&a, &b| {
        let name = |i: usize| models[i].provenance.get("task").map(String::as_str).unwrap_or("");
        name(a).cmp(name(b)).then(a.cmp(&b))
    });
    idx
}

fn check_stats_alignment(models: &[Checkpoint], stats: &[StatsBundle]) -> Result<()> {
    if stats.len() != models.len() {
        return Err(MatsError::Config(format!(
            "{} stats bundles for {} models",
            stats.len(),
            models.len()
        )));
    }
    Ok(())
}

/// Elementwise mean of all parameters.
pub fn simple_average(models: &[Checkpoint]) -> Result<Checkpoint> {
    assert_mergeable(models)?;
    let order = canonical_order(models);
    let inv_m = 1.0 / models.len() as f64;
    let mut out = Checkpoint::new();
    for (name, first) in &models[0].entries {
        let mut acc = vec![0.0; first.values.len()];
        for &i in &order {
            for (a, v) in acc.iter_mut().zip(&models[i].entries[name].values) {
                *a += v;
            }
        }
        acc.iter_mut().for_each(|a| *a *= inv_m);
        out.insert(name.clone(), Param { role: first.role, values: acc });
    }
    out.provenance.insert("merge_method".into(), "simple_average".into());
    Ok(out)
}

/// `θ* = θ_pre + λ · Σ_m (θ_m − θ_pre)`.
pub fn task_arithmetic(models: &[Checkpoint], pretrained: &Checkpoint, lambda: f64) -> Result<Checkpoint> {
    let mut all = models.to_vec();
    all.push(pretrained.clone());
    assert_mergeable(&all)?;
    let order = canonical_order(models);
    let mut out = Checkpoint::new();
    for (name, pre) in &pretrained.entries {
        let mut acc = pre.values.clone();
        for &i in &order {
            for (a, (v, p)) in acc
                .iter_mut()
                .zip(models[i].entries[name].values.iter().zip(&pre.values))
            {
                *a += lambda * (v - p);
            }
        }
        out.insert(name.clone(), Param { role: pre.role, values: acc });
    }
    out.provenance.insert("merge_method".into(), "task_arithmetic".into());
    out.provenance.insert("lambda".into(), lambda.to_string());
    Ok(out)
}

/// TIES merging: per model, flatten all parameters into one task vector and
/// zero the bottom `trim_fraction` by magnitude (ties by index); per
/// coordinate, elect the sign with the larger summed magnitude among
/// survivors (tie → positive); average the sign-matching survivors; finally
/// rescale by λ and add back the pretrained parameters.
pub fn ties_merge(
    models: &[Checkpoint],
    pretrained: &Checkpoint,
    lambda: f64,
    trim_fraction: f64,
) -> Result<Checkpoint> {
    if !(trim_fraction > 0.0 && trim_fraction < 1.0) {
        return Err(MatsError::Config(format!(
            "trim_fraction must be in (0,1), got {trim_fraction}"
        )));
    }
    let mut all = models.to_vec();
    all.push(pretrained.clone());
    assert_mergeable(&all)?;
    let order = canonical_order(models);

    // Flatten in sorted-name order; spans are identical across models.
    let (pre_flat, spans) = flatten(pretrained);
    let total = pre_flat.len();
    let trimmed: Vec<Vec<f64>> = order
        .iter()
        .map(|&i| {
            let (mut tv, _) = flatten(&models[i]);
            for (t, p) in tv.iter_mut().zip(&pre_flat) {
                *t -= p;
            }
            trim_task_vector(&mut tv, trim_fraction);
            tv
        })
        .collect();

    let mut merged = vec![0.0; total];
    for (coord, m) in merged.iter_mut().enumerate() {
        let mut positive_mass = 0.0;
        let mut negative_mass = 0.0;
        for tv in &trimmed {
            let v = tv[coord];
            if v > 0.0 {
                positive_mass += v;
            } else if v < 0.0 {
                negative_mass += -v;
            }
        }
        let keep_positive = positive_mass >= negative_mass;
        let mut sum = 0.0;
        let mut count = 0usize;
        for tv in &trimmed {
            let v = tv[coord];
            let matches = if keep_positive { v > 0.0 } else { v < 0.0 };
            if matches {
                sum += v;
                count += 1;
            }
        }
        *m = if count > 0 { sum / count as f64 } else { 0.0 };
    }

    let mut out = Checkpoint::new();
    for (name, (start, len)) in &spans {
        let role = pretrained.entries[name].role;
        let values: Vec<f64> = (0..*len)
            .map(|i| pre_flat[start + i] + lambda * merged[start + i])
            .collect();
        out.insert(name.clone(), Param { role, values });
    }
    out.provenance.insert("merge_method".into(), "ties".into());
    out.provenance.insert("lambda".into(), lambda.to_string());
    out.provenance.insert("trim_fraction".into(), trim_fraction.to_string());
    Ok(out)
}

fn flatten(ckpt: &Checkpoint) -> (Vec<f64>, BTreeMap<String, (usize, usize)>) {
    let mut flat = Vec::new();
    let mut spans = BTreeMap::new();
    for (name, param) in &ckpt.entries {
        spans.insert(name.clone(), (flat.len(), param.values.len()));
        flat.extend_from_slice(&param.values);
    }
    (flat, spans)
}

/// Zeroes the `floor(trim_fraction · len)` smallest-magnitude coordinates,
/// breaking magnitude ties by index.
fn trim_task_vector(tv: &mut [f64], trim_fraction: f64) {
    let zeroed = (trim_fraction * tv.len() as f64).floor() as usize;
    if zeroed == 0 {
        return;
    }
    let mut idx: Vec<usize> = (0..tv.len()).collect();
    idx.sort_by(|&a, &b| {
        tv[a]
            .abs()
            .partial_cmp(&tv[b].abs())
            .expect("finite values")
            .then(a.cmp(&b))
    });
    for &i in idx.iter().take(zeroed) {
        tv[i] = 0.0;
    }
}

/// Default ridge for Fisher denominators: `1e-12` times the mean Fisher
/// magnitude over all bundles, so the guard scales with the statistics.
pub fn default_fisher_epsilon(stats: &[StatsBundle]) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for bundle in stats {
        for layer in bundle.layers.values() {
            for f in &layer.diag_fisher {
                total += f.abs();
                count += 1;
            }
        }
    }
    if count == 0 {
        0.0
    } else {
        1e-12 * total / count as f64
    }
}

/// Diagonal Fisher merging: elementwise
/// `(Σ_m f_m θ_m + ε θ̄) / (Σ_m f_m + ε)` with `θ̄` the plain mean. A zero
/// denominator (all Fishers zero and ε = 0) falls back to `θ̄`, the ε → 0
/// limit.
pub fn diagonal_fisher_merge(
    models: &[Checkpoint],
    stats: &[StatsBundle],
    epsilon: f64,
) -> Result<Checkpoint> {
    assert_mergeable(models)?;
    check_stats_alignment(models, stats)?;
    let order = canonical_order(models);
    let inv_m = 1.0 / models.len() as f64;
    let mut out = Checkpoint::new();
    for (name, first) in &models[0].entries {
        let len = first.values.len();
        let mut weighted = vec![0.0; len];
        let mut weight_sum = vec![0.0; len];
        let mut mean = vec![0.0; len];
        for &i in &order {
            let theta = &models[i].entries[name].values;
            let fisher = &stats[i]
                .get(name)
                .ok_or_else(|| MatsError::MissingStat {
                    param: name.clone(),
                    stat: "diag_fisher".into(),
                })?
                .diag_fisher;
            if fisher.len() != len {
                return Err(MatsError::Shape(format!(
                    "diag_fisher for `{name}` has {} entries, expected {len}",
                    fisher.len()
                )));
            }
            for j in 0..len {
                weighted[j] += fisher[j] * theta[j];
                weight_sum[j] += fisher[j];
                mean[j] += theta[j] * inv_m;
            }
        }
        let values: Vec<f64> = (0..len)
            .map(|j| {
                let denom = weight_sum[j] + epsilon;
                if denom == 0.0 {
                    mean[j]
                } else {
                    (weighted[j] + epsilon * mean[j]) / denom
                }
            })
            .collect();
        out.insert(name.clone(), Param { role: first.role, values });
    }
    out.provenance.insert("merge_method".into(), "diag_fisher".into());
    out.provenance.insert("epsilon".into(), epsilon.to_string());
    Ok(out)
}

/// Scales the off-diagonal entries of a Gram matrix by γ.
fn scale_offdiag(gram: &Matrix, gamma: f64) -> Matrix {
    Matrix::from_fn(gram.rows(), gram.cols(), |i, j| {
        if i == j {
            gram.get(i, j)
        } else {
            gamma * gram.get(i, j)
        }
    })
}

/// RegMean closed form: per linear weight,
/// `W* = (Σ_m G̃_m)⁻¹ (Σ_m G̃_m W_m)` with `G̃_m` the input Gram, off-diagonal
/// entries scaled by γ on both sides. Vector parameters fall back to diagonal
/// Fisher merging with the default ε. Solves go through the ridged Cholesky;
/// an unrecoverable singular system names the layer.
pub fn regmean_closed_form(
    models: &[Checkpoint],
    stats: &[StatsBundle],
    gamma: f64,
) -> Result<Checkpoint> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(MatsError::Config(format!("gamma must be in (0,1], got {gamma}")));
    }
    assert_mergeable(models)?;
    check_stats_alignment(models, stats)?;
    let order = canonical_order(models);

    let mut fallback: Option<Checkpoint> = None;
    let mut out = Checkpoint::new();
    for (name, first) in &models[0].entries {
        match first.role {
            ParamRole::LinearWeight { d, k } => {
                let mut gram_sum = Matrix::zeros(d, d);
                let mut rhs = Matrix::zeros(d, k);
                for &i in &order {
                    let gram = stats[i]
                        .get(name)
                        .and_then(|s| s.input_gram.as_ref())
                        .ok_or_else(|| MatsError::MissingStat {
                            param: name.clone(),
                            stat: "input_gram".into(),
                        })?;
                    let scaled = scale_offdiag(gram, gamma);
                    gram_sum = gram_sum.add(&scaled)?;
                    let w = models[i].entries[name].as_matrix()?;
                    rhs = rhs.add(&matmul(&scaled, &w)?)?;
                }
                let solved = chol_solve_ridged(&gram_sum, &rhs).map_err(|e| match e {
                    MatsError::Singular(msg) => {
                        MatsError::Singular(format!("layer `{name}`: {msg}"))
                    }
                    other => other,
                })?;
                out.insert(name.clone(), Param::weight(solved));
            }
            ParamRole::Vector { .. } => {
                if fallback.is_none() {
                    let eps = default_fisher_epsilon(stats);
                    fallback = Some(diagonal_fisher_merge(models, stats, eps)?);
                }
                let fb = fallback.as_ref().expect("just set");
                out.insert(name.clone(), fb.entries[name].clone());
            }
        }
    }
    out.provenance.insert("merge_method".into(), "regmean".into());
    out.provenance.insert("gamma".into(), gamma.to_string());
    Ok(out)
}

/// Input to the task-subspace decomposition: either a covariance matrix or
/// raw data `P` from which `C = PᵀP` is formed.
pub enum SubspaceInput<'a> {
    Covariance(&'a Matrix),
    Data(&'a Matrix),
}

/// Eigendecomposition `C = Q Λ Qᵀ` of a method's covariance matrix: the
/// basis `Q` spans the task subspace and `Λ` carries the per-direction
/// importances. When built from data, `Λ` equals the squared singular values
/// of `P`.
pub fn task_subspace(input: SubspaceInput<'_>) -> Result<(Matrix, Vec<f64>)> {
    match input {
        SubspaceInput::Covariance(c) => sym_eig(c),
        SubspaceInput::Data(p) => sym_eig(&crate::tensor::gram(p)),
    }
}
