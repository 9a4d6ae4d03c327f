//! Conjugate-gradient merging: expresses each merging objective as a linear
//! system `(Σ_m C_m) x = Σ_m C_m θ_m` over one parameter's flattened space
//! and solves it iteratively from a chosen initialization.
//!
//! The system matrix is never materialized — each objective supplies a
//! matrix-vector product. For the block-diagonal Fisher objective the K-FAC
//! matvec is `Σ_m (Zᵀ_mZ_m/N_m) · W · (O′ᵀ_mO′_m/N_m)`; the sum of Kronecker
//! products behind it has no tractable closed form, which is the case CG
//! exists to cover.

use std::collections::BTreeMap;
use std::fmt;

use crate::checkpoint::{assert_mergeable, Checkpoint, Param, ParamRole, StatsBundle};
use crate::error::{MatsError, Result};
use crate::merge::{
    canonical_order, default_fisher_epsilon, diagonal_fisher_merge, regmean_closed_form,
    simple_average, task_arithmetic, ties_merge,
};
use crate::rng::SeedRng;
use crate::tensor::{matmul, Matrix};

type MatVec<'a> = Box<dyn Fn(&[f64]) -> Vec<f64> + 'a>;

/// Matrix-free linear system over one parameter's flattened space.
pub struct LinearSystem<'a> {
    apply_fn: MatVec<'a>,
    /// `b = Σ_m C_m θ_m`.
    pub rhs: Vec<f64>,
}

impl<'a> LinearSystem<'a> {
    pub fn new(rhs: Vec<f64>, apply_fn: impl Fn(&[f64]) -> Vec<f64> + 'a) -> Self {
        LinearSystem {
            apply_fn: Box::new(apply_fn),
            rhs,
        }
    }

    pub fn dim(&self) -> usize {
        self.rhs.len()
    }

    /// The matvec `A x = Σ_m C_m x`.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.dim());
        (self.apply_fn)(x)
    }

    /// Probes the operator on random vectors: linearity, self-adjointness
    /// (`⟨u, Av⟩ = ⟨Au, v⟩` within 1e-8 relative), and positive
    /// semi-definiteness (`⟨v, Av⟩ ≥ −1e-8·‖v‖²·scale`).
    pub fn validate(&self, rng: &mut SeedRng, probes: usize) -> Result<()> {
        let dim = self.dim();
        let draw = |rng: &mut SeedRng| -> Vec<f64> {
            (0..dim).map(|_| rng.normal(0.0, 1.0)).collect()
        };
        for probe in 0..probes {
            let u = draw(rng);
            let v = draw(rng);
            let au = self.apply(&u);
            let av = self.apply(&v);

            // Linearity on this pair.
            let combo: Vec<f64> = u.iter().zip(&v).map(|(a, b)| 0.3 * a - 1.7 * b).collect();
            let a_combo = self.apply(&combo);
            let expect: Vec<f64> = au.iter().zip(&av).map(|(a, b)| 0.3 * a - 1.7 * b).collect();
            let scale = norm(&expect).max(1.0);
            let diff: f64 = a_combo
                .iter()
                .zip(&expect)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            if diff > 1e-8 * scale {
                return Err(MatsError::Contract(format!(
                    "operator is not linear (probe {probe}, deviation {diff:e})"
                )));
            }

            // Self-adjointness.
            let left = dot(&u, &av);
            let right = dot(&au, &v);
            let denom = left.abs().max(right.abs()).max(norm(&u) * norm(&av)).max(1e-300);
            if (left - right).abs() > 1e-8 * denom {
                return Err(MatsError::Contract(format!(
                    "operator is not self-adjoint (probe {probe}: {left} vs {right})"
                )));
            }

            // PSD.
            let quad = dot(&v, &av);
            let bound = 1e-8 * dot(&v, &v) * operator_scale(&av, &v);
            if quad < -bound {
                return Err(MatsError::Contract(format!(
                    "operator is not PSD (probe {probe}: vᵀAv = {quad:e})"
                )));
            }
        }
        Ok(())
    }
}

fn operator_scale(av: &[f64], v: &[f64]) -> f64 {
    let nv = norm(v);
    if nv == 0.0 {
        1.0
    } else {
        (norm(av) / nv).max(1.0)
    }
}

impl fmt::Debug for LinearSystem<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LinearSystem").field("dim", &self.dim()).finish()
    }
}

/// Which covariance `C_m` defines the merging objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MergeObjective {
    /// `C_m = I`: the simple-averaging objective.
    Average,
    /// `C_m = diag(F̂_m)`.
    DiagFisher,
    /// `C_m` acts per linear weight as the input Gram `Zᵀ_mZ_m/N_m`
    /// (γ = 1, no off-diagonal scaling — CG never inverts).
    RegMean,
    /// Block-diagonal Fisher via K-FAC factors (linear weights).
    BlockFisherKfac,
    /// Dense exact Fisher (vector parameters).
    ExactFisherVector,
}

impl MergeObjective {
    pub fn parse(s: &str) -> Option<MergeObjective> {
        match s {
            "average" => Some(MergeObjective::Average),
            "diag_fisher" => Some(MergeObjective::DiagFisher),
            "regmean" => Some(MergeObjective::RegMean),
            "block_fisher_kfac" => Some(MergeObjective::BlockFisherKfac),
            "exact_fisher_vector" => Some(MergeObjective::ExactFisherVector),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            MergeObjective::Average => "average",
            MergeObjective::DiagFisher => "diag_fisher",
            MergeObjective::RegMean => "regmean",
            MergeObjective::BlockFisherKfac => "block_fisher_kfac",
            MergeObjective::ExactFisherVector => "exact_fisher_vector",
        }
    }

    /// Whether this objective's statistics cover the given parameter.
    pub fn covers(&self, role: ParamRole, name: &str, stats: &[StatsBundle]) -> bool {
        let every = |f: &dyn Fn(&crate::fisher::LayerStats) -> bool| {
            !stats.is_empty() && stats.iter().all(|s| s.get(name).is_some_and(f))
        };
        match self {
            MergeObjective::Average => true,
            MergeObjective::DiagFisher => every(&|s| s.diag_fisher.len() == role.len()),
            MergeObjective::RegMean => {
                matches!(role, ParamRole::LinearWeight { .. }) && every(&|s| s.input_gram.is_some())
            }
            MergeObjective::BlockFisherKfac => {
                matches!(role, ParamRole::LinearWeight { .. })
                    && every(&|s| s.input_gram.is_some() && s.outgrad_gram.is_some())
            }
            MergeObjective::ExactFisherVector => {
                matches!(role, ParamRole::Vector { .. }) && every(&|s| s.exact_fisher.is_some())
            }
        }
    }
}

impl fmt::Display for MergeObjective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Builds the linear system for one parameter under the given objective.
pub fn build_system<'a>(
    objective: MergeObjective,
    param_name: &str,
    models: &'a [Checkpoint],
    stats: &'a [StatsBundle],
) -> Result<LinearSystem<'a>> {
    if models.is_empty() {
        return Err(MatsError::Config("no models to merge".into()));
    }
    let param = models[0]
        .get(param_name)
        .ok_or_else(|| MatsError::Shape(format!("unknown parameter `{param_name}`")))?;
    let role = param.role;
    let order = canonical_order(models);
    let missing = |stat: &str| MatsError::MissingStat {
        param: param_name.to_string(),
        stat: stat.to_string(),
    };

    match objective {
        MergeObjective::Average => {
            let m = models.len() as f64;
            let mut rhs = vec![0.0; role.len()];
            for &i in &order {
                for (r, v) in rhs.iter_mut().zip(&models[i].entries[param_name].values) {
                    *r += v;
                }
            }
            Ok(LinearSystem::new(rhs, move |x| {
                x.iter().map(|v| m * v).collect()
            }))
        }
        MergeObjective::DiagFisher => {
            if stats.len() != models.len() {
                return Err(missing("diag_fisher"));
            }
            let mut fisher_sum = vec![0.0; role.len()];
            let mut rhs = vec![0.0; role.len()];
            for &i in &order {
                let f = &stats[i].get(param_name).ok_or_else(|| missing("diag_fisher"))?.diag_fisher;
                if f.len() != role.len() {
                    return Err(missing("diag_fisher"));
                }
                let theta = &models[i].entries[param_name].values;
                for j in 0..role.len() {
                    fisher_sum[j] += f[j];
                    rhs[j] += f[j] * theta[j];
                }
            }
            Ok(LinearSystem::new(rhs, move |x| {
                x.iter().zip(&fisher_sum).map(|(v, f)| f * v).collect()
            }))
        }
        MergeObjective::RegMean => {
            let ParamRole::LinearWeight { d, k } = role else {
                return Err(missing("input_gram"));
            };
            if stats.len() != models.len() {
                return Err(missing("input_gram"));
            }
            let mut grams: Vec<&Matrix> = Vec::with_capacity(order.len());
            let mut rhs = Matrix::zeros(d, k);
            for &i in &order {
                let gram = stats[i]
                    .get(param_name)
                    .and_then(|s| s.input_gram.as_ref())
                    .ok_or_else(|| missing("input_gram"))?;
                let w = models[i].entries[param_name].as_matrix()?;
                rhs = rhs.add(&matmul(gram, &w)?)?;
                grams.push(gram);
            }
            Ok(LinearSystem::new(rhs.into_data(), move |x| {
                let w = Matrix::from_vec(d, k, x.to_vec()).expect("dim checked");
                let mut acc = Matrix::zeros(d, k);
                for gram in &grams {
                    acc = acc.add(&matmul(gram, &w).expect("shapes fixed")).expect("shapes fixed");
                }
                acc.into_data()
            }))
        }
        MergeObjective::BlockFisherKfac => {
            let ParamRole::LinearWeight { d, k } = role else {
                return Err(missing("input_gram/outgrad_gram"));
            };
            if stats.len() != models.len() {
                return Err(missing("input_gram/outgrad_gram"));
            }
            let mut factors: Vec<(&Matrix, &Matrix)> = Vec::with_capacity(order.len());
            let mut rhs = Matrix::zeros(d, k);
            for &i in &order {
                let layer = stats[i].get(param_name).ok_or_else(|| missing("input_gram"))?;
                let a = layer.input_gram.as_ref().ok_or_else(|| missing("input_gram"))?;
                let g = layer.outgrad_gram.as_ref().ok_or_else(|| missing("outgrad_gram"))?;
                let w = models[i].entries[param_name].as_matrix()?;
                rhs = rhs.add(&matmul(&matmul(a, &w)?, g)?)?;
                factors.push((a, g));
            }
            Ok(LinearSystem::new(rhs.into_data(), move |x| {
                let w = Matrix::from_vec(d, k, x.to_vec()).expect("dim checked");
                let mut acc = Matrix::zeros(d, k);
                for (a, g) in &factors {
                    let awg = matmul(&matmul(a, &w).expect("shapes fixed"), g).expect("shapes fixed");
                    acc = acc.add(&awg).expect("shapes fixed");
                }
                acc.into_data()
            }))
        }
        MergeObjective::ExactFisherVector => {
            let ParamRole::Vector { n } = role else {
                return Err(missing("exact_fisher"));
            };
            if stats.len() != models.len() {
                return Err(missing("exact_fisher"));
            }
            let mut fishers: Vec<&Matrix> = Vec::with_capacity(order.len());
            let mut rhs = vec![0.0; n];
            for &i in &order {
                let fisher = stats[i]
                    .get(param_name)
                    .and_then(|s| s.exact_fisher.as_ref())
                    .ok_or_else(|| missing("exact_fisher"))?;
                let theta = Matrix::from_vec(n, 1, models[i].entries[param_name].values.clone())?;
                let ft = matmul(fisher, &theta)?;
                for (r, v) in rhs.iter_mut().zip(ft.data()) {
                    *r += v;
                }
                fishers.push(fisher);
            }
            Ok(LinearSystem::new(rhs, move |x| {
                let v = Matrix::from_vec(n, 1, x.to_vec()).expect("dim checked");
                let mut acc = vec![0.0; n];
                for fisher in &fishers {
                    let fv = matmul(fisher, &v).expect("shapes fixed");
                    for (a, w) in acc.iter_mut().zip(fv.data()) {
                        *a += w;
                    }
                }
                acc
            }))
        }
    }
}

/// Conjugate-gradient configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct CgConfig {
    pub max_iters: usize,
    pub rel_residual_tol: f64,
    /// Degenerate-curvature guard: stop when `pᵀAp ≤ guard·‖p‖²`. Singular
    /// systems are expected (rank-deficient Grams); CG then returns the best
    /// iterate, which stays in `x₀ + range(A)`.
    pub curvature_guard: f64,
    /// Keep the full iterate history in the trace (tests only; memory grows
    /// with `dim × iterations`).
    pub record_iterates: bool,
}

impl Default for CgConfig {
    fn default() -> Self {
        CgConfig {
            max_iters: 100,
            rel_residual_tol: 1e-10,
            curvature_guard: 1e-14,
            record_iterates: false,
        }
    }
}

impl CgConfig {
    pub fn with_iters(max_iters: usize) -> Self {
        CgConfig {
            max_iters,
            ..CgConfig::default()
        }
    }
}

/// Why the solve stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CgStop {
    Converged,
    MaxIterations,
    CurvatureBreakdown,
}

impl fmt::Display for CgStop {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            CgStop::Converged => "converged",
            CgStop::MaxIterations => "max_iterations",
            CgStop::CurvatureBreakdown => "curvature_breakdown",
        };
        f.write_str(s)
    }
}

/// Per-iteration measurements; index 0 describes the initialization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CgIteration {
    pub residual_norm: f64,
    /// `φ(x) = ½ xᵀA x − xᵀ b`, recomputed exactly at each iterate.
    pub objective: f64,
}

/// Record of one conjugate-gradient solve.
#[derive(Debug, Clone, PartialEq)]
pub struct CgTrace {
    pub iterations: Vec<CgIteration>,
    pub stop: CgStop,
    /// Iterate history, present when requested in the config.
    pub iterates: Option<Vec<Vec<f64>>>,
}

impl CgTrace {
    /// Number of CG steps taken (excludes the initial record).
    pub fn steps(&self) -> usize {
        self.iterations.len().saturating_sub(1)
    }

    pub fn final_residual(&self) -> f64 {
        self.iterations.last().map_or(f64::NAN, |r| r.residual_norm)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `φ(x) = ½ xᵀAx − xᵀb`, computed with one matvec.
pub fn quadratic_objective_value(system: &LinearSystem<'_>, x: &[f64]) -> f64 {
    let ax = system.apply(x);
    0.5 * dot(x, &ax) - dot(x, &system.rhs)
}

/// Standard conjugate gradient from `x0`.
///
/// Stops at `max_iters`, at `‖r‖/‖b‖ ≤ tol`, or when the curvature guard
/// trips on a degenerate direction (returning the current iterate). The
/// trace records the residual norm and exact quadratic objective at the
/// initialization and after every step.
pub fn cg_solve(
    system: &LinearSystem<'_>,
    x0: &[f64],
    config: &CgConfig,
) -> Result<(Vec<f64>, CgTrace)> {
    let dim = system.dim();
    if x0.len() != dim {
        return Err(MatsError::Shape(format!(
            "x0 has {} entries for a {dim}-dimensional system",
            x0.len()
        )));
    }
    if config.max_iters == 0 {
        return Err(MatsError::Config("max_iters must be at least 1".into()));
    }
    let b = &system.rhs;
    let b_norm = norm(b);

    let mut x = x0.to_vec();
    let ax0 = system.apply(&x);
    let mut r: Vec<f64> = b.iter().zip(&ax0).map(|(bv, av)| bv - av).collect();
    let mut rr = dot(&r, &r);
    let mut p = r.clone();

    let mut trace = CgTrace {
        iterations: vec![CgIteration {
            residual_norm: rr.sqrt(),
            objective: quadratic_objective_value(system, &x),
        }],
        stop: CgStop::MaxIterations,
        iterates: config.record_iterates.then(|| vec![x.clone()]),
    };

    let mut steps = 0usize;
    loop {
        let rel = if b_norm > 0.0 { rr.sqrt() / b_norm } else { rr.sqrt() };
        if rel <= config.rel_residual_tol {
            trace.stop = CgStop::Converged;
            break;
        }
        if steps >= config.max_iters {
            trace.stop = CgStop::MaxIterations;
            break;
        }
        let ap = system.apply(&p);
        let p_ap = dot(&p, &ap);
        if p_ap <= config.curvature_guard * dot(&p, &p) {
            trace.stop = CgStop::CurvatureBreakdown;
            break;
        }
        let alpha = rr / p_ap;
        for ((xv, pv), (rv, av)) in x.iter_mut().zip(&p).zip(r.iter_mut().zip(&ap)) {
            *xv += alpha * pv;
            *rv -= alpha * av;
        }
        if x.iter().any(|v| !v.is_finite()) || r.iter().any(|v| !v.is_finite()) {
            return Err(MatsError::Numerical(format!(
                "non-finite CG iterate at iteration {}",
                steps + 1
            )));
        }
        steps += 1;
        trace.iterations.push(CgIteration {
            residual_norm: norm(&r),
            objective: quadratic_objective_value(system, &x),
        });
        if let Some(hist) = &mut trace.iterates {
            hist.push(x.clone());
        }
        let rr_new = dot(&r, &r);
        let beta = rr_new / rr;
        rr = rr_new;
        for (pv, rv) in p.iter_mut().zip(&r) {
            *pv = rv + beta * *pv;
        }
    }
    Ok((x, trace))
}

/// RegMean objective `Σ_m (1/N_m) ‖O_m − Z_m W‖²_F` evaluated exactly from
/// captured activations (diagnostic path).
pub fn regmean_objective_value(models_data: &[(Matrix, Matrix)], w: &Matrix) -> Result<f64> {
    let mut total = 0.0;
    for (z, o) in models_data {
        if z.rows() != o.rows() {
            return Err(MatsError::Shape(format!(
                "Z has {} rows but O has {}",
                z.rows(),
                o.rows()
            )));
        }
        let pred = matmul(z, w)?;
        let diff = pred.sub(o)?;
        total += diff.data().iter().map(|v| v * v).sum::<f64>() / z.rows() as f64;
    }
    Ok(total)
}

/// Initialization for the CG merge.
#[derive(Debug, Clone)]
pub enum InitSpec<'a> {
    Average,
    TaskArithmetic { pretrained: &'a Checkpoint, lambda: f64 },
    Ties { pretrained: &'a Checkpoint, lambda: f64, trim_fraction: f64 },
    DiagFisher { epsilon: Option<f64> },
    RegMean { gamma: f64 },
    Pretrained(&'a Checkpoint),
    Zero,
    Provided(&'a Checkpoint),
}

impl InitSpec<'_> {
    pub fn describe(&self) -> String {
        match self {
            InitSpec::Average => "average".into(),
            InitSpec::TaskArithmetic { lambda, .. } => format!("task_arithmetic(lambda={lambda})"),
            InitSpec::Ties { lambda, trim_fraction, .. } => {
                format!("ties(lambda={lambda},trim={trim_fraction})")
            }
            InitSpec::DiagFisher { .. } => "diag_fisher".into(),
            InitSpec::RegMean { gamma } => format!("regmean(gamma={gamma})"),
            InitSpec::Pretrained(_) => "pretrained".into(),
            InitSpec::Zero => "zero".into(),
            InitSpec::Provided(_) => "provided".into(),
        }
    }
}

/// Materializes the initialization checkpoint for a merge.
pub fn compute_init(
    models: &[Checkpoint],
    stats: &[StatsBundle],
    init: &InitSpec<'_>,
) -> Result<Checkpoint> {
    match init {
        InitSpec::Average => simple_average(models),
        InitSpec::TaskArithmetic { pretrained, lambda } => {
            task_arithmetic(models, pretrained, *lambda)
        }
        InitSpec::Ties { pretrained, lambda, trim_fraction } => {
            ties_merge(models, pretrained, *lambda, *trim_fraction)
        }
        InitSpec::DiagFisher { epsilon } => {
            let eps = epsilon.unwrap_or_else(|| default_fisher_epsilon(stats));
            diagonal_fisher_merge(models, stats, eps)
        }
        InitSpec::RegMean { gamma } => regmean_closed_form(models, stats, *gamma),
        InitSpec::Pretrained(ckpt) | InitSpec::Provided(ckpt) => Ok((*ckpt).clone()),
        InitSpec::Zero => {
            let mut out = models[0].clone();
            out.provenance.clear();
            for param in out.entries.values_mut() {
                param.values.iter_mut().for_each(|v| *v = 0.0);
            }
            Ok(out)
        }
    }
}

/// Full-model CG merge: per parameter, builds the objective's linear system
/// and runs CG from the initialization's value. Parameters the objective does
/// not cover are merged by diagonal Fisher merging (recorded in provenance).
pub fn mats_merge(
    models: &[Checkpoint],
    stats: &[StatsBundle],
    objective: MergeObjective,
    init: &InitSpec<'_>,
    config: &CgConfig,
) -> Result<(Checkpoint, BTreeMap<String, CgTrace>)> {
    assert_mergeable(models)?;
    let init_ckpt = compute_init(models, stats, init)?;
    let mut fallback: Option<Checkpoint> = None;
    let mut fallback_params: Vec<String> = Vec::new();
    let mut merged = Checkpoint::new();
    let mut traces = BTreeMap::new();
    let mut total_steps = 0usize;

    let names: Vec<String> = models[0].entries.keys().cloned().collect();
    for name in &names {
        let role = models[0].entries[name].role;
        if objective.covers(role, name, stats) {
            let system = build_system(objective, name, models, stats)?;
            let x0 = &init_ckpt
                .get(name)
                .ok_or_else(|| MatsError::Shape(format!("init is missing `{name}`")))?
                .values;
            let (x, trace) = cg_solve(&system, x0, config)?;
            total_steps += trace.steps();
            traces.insert(name.clone(), trace);
            merged.insert(name.clone(), Param { role, values: x });
        } else {
            if fallback.is_none() {
                let eps = default_fisher_epsilon(stats);
                fallback = Some(diagonal_fisher_merge(models, stats, eps)?);
            }
            let fb = fallback.as_ref().expect("just set");
            merged.insert(name.clone(), fb.entries[name].clone());
            fallback_params.push(name.clone());
        }
    }

    merged.provenance.insert("merge_method".into(), "mats".into());
    merged.provenance.insert("objective".into(), objective.to_string());
    merged.provenance.insert("init".into(), init.describe());
    merged
        .provenance
        .insert("cg_max_iters".into(), config.max_iters.to_string());
    merged
        .provenance
        .insert("cg_total_steps".into(), total_steps.to_string());
    if !fallback_params.is_empty() {
        merged
            .provenance
            .insert("fallback_diag_fisher".into(), fallback_params.join(","));
    }
    Ok((merged, traces))
}

/// Chains CG merges: each round after the first is initialized at the
/// previous round's output.
pub fn multi_round(
    models: &[Checkpoint],
    stats: &[StatsBundle],
    first_init: &InitSpec<'_>,
    rounds: &[(MergeObjective, CgConfig)],
) -> Result<(Checkpoint, Vec<BTreeMap<String, CgTrace>>)> {
    if rounds.is_empty() {
        return Err(MatsError::Config("multi-round recipe is empty".into()));
    }
    let mut current: Option<Checkpoint> = None;
    let mut all_traces = Vec::with_capacity(rounds.len());
    for (objective, config) in rounds {
        let (out, traces) = match &current {
            None => mats_merge(models, stats, *objective, first_init, config)?,
            Some(prev) => {
                mats_merge(models, stats, *objective, &InitSpec::Provided(prev), config)?
            }
        };
        current = Some(out);
        all_traces.push(traces);
    }
    Ok((current.expect("at least one round"), all_traces))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint::Param;
    use crate::fisher::{FisherMode, LayerStats};
    use crate::synth::Split;
    use crate::tensor::{chol_solve, gram, kron_dense};

    fn vector_model(name: &str, values: Vec<f64>) -> Checkpoint {
        let mut c = Checkpoint::new();
        c.insert("theta", Param::vector(values));
        c.provenance.insert("task".into(), name.into());
        c
    }

    fn stats_for(name: &str, layer: LayerStats) -> StatsBundle {
        let mut layers = BTreeMap::new();
        layers.insert(name.to_string(), layer);
        StatsBundle {
            layers,
            fisher_mode: FisherMode::Empirical,
            data_split: Split::Validation,
            example_count: 1,
            provenance: BTreeMap::new(),
        }
    }

    fn diag_stats(fisher: Vec<f64>) -> StatsBundle {
        let n = fisher.len();
        stats_for(
            "theta",
            LayerStats {
                role: ParamRole::Vector { n },
                diag_fisher: fisher,
                input_gram: None,
                outgrad_gram: None,
                exact_fisher: None,
                n_examples: 1,
            },
        )
    }

    #[test]
    fn average_system_is_m_times_identity() {
        let models = vec![
            vector_model("a", vec![1.0, 2.0]),
            vector_model("b", vec![3.0, 6.0]),
        ];
        let system = build_system(MergeObjective::Average, "theta", &models, &[]).unwrap();
        assert_eq!(system.rhs, vec![4.0, 8.0]);
        assert_eq!(system.apply(&[1.0, -2.0]), vec![2.0, -4.0]);
    }

    #[test]
    fn diag_fisher_system_is_elementwise() {
        let models = vec![
            vector_model("a", vec![1.0, 2.0]),
            vector_model("b", vec![3.0, 6.0]),
        ];
        let stats = vec![diag_stats(vec![1.0, 3.0]), diag_stats(vec![2.0, 1.0])];
        let system = build_system(MergeObjective::DiagFisher, "theta", &models, &stats).unwrap();
        // A = diag(3, 4); b = [1*1+2*3, 3*2+1*6] = [7, 12].
        assert_eq!(system.apply(&[1.0, 1.0]), vec![3.0, 4.0]);
        assert_eq!(system.rhs, vec![7.0, 12.0]);
    }

    fn random_sym(rng: &mut SeedRng, n: usize) -> Matrix {
        let a = Matrix::from_fn(n + 1, n, |_, _| rng.normal(0.0, 1.0));
        gram(&a).scale(1.0 / (n + 1) as f64)
    }

    fn kfac_weight_models(
        rng: &mut SeedRng,
        m_count: usize,
        d: usize,
        k: usize,
    ) -> (Vec<Checkpoint>, Vec<StatsBundle>) {
        let mut models = Vec::new();
        let mut stats = Vec::new();
        for m in 0..m_count {
            let mut ckpt = Checkpoint::new();
            ckpt.insert(
                "layer0.weight",
                Param::weight(Matrix::from_fn(d, k, |_, _| rng.normal(0.0, 1.0))),
            );
            ckpt.provenance.insert("task".into(), format!("t{m}"));
            models.push(ckpt);
            stats.push(stats_for(
                "layer0.weight",
                LayerStats {
                    role: ParamRole::LinearWeight { d, k },
                    diag_fisher: vec![1.0; d * k],
                    input_gram: Some(random_sym(rng, d)),
                    outgrad_gram: Some(random_sym(rng, k)),
                    exact_fisher: None,
                    n_examples: 1,
                },
            ));
        }
        (models, stats)
    }

    #[test]
    fn kfac_matvec_matches_dense_kronecker_sum() {
        let mut rng = SeedRng::new(80);
        for &(d, k) in &[(3usize, 2usize), (4, 4), (2, 5)] {
            let (models, stats) = kfac_weight_models(&mut rng, 3, d, k);
            let system =
                build_system(MergeObjective::BlockFisherKfac, "layer0.weight", &models, &stats)
                    .unwrap();
            let mut dense = Matrix::zeros(d * k, d * k);
            for s in &stats {
                let layer = s.get("layer0.weight").unwrap();
                let kr = kron_dense(
                    layer.input_gram.as_ref().unwrap(),
                    layer.outgrad_gram.as_ref().unwrap(),
                    1 << 22,
                )
                .unwrap();
                dense = dense.add(&kr).unwrap();
            }
            for _ in 0..5 {
                let x: Vec<f64> = (0..d * k).map(|_| rng.normal(0.0, 1.0)).collect();
                let via_op = system.apply(&x);
                let xm = Matrix::from_vec(d * k, 1, x).unwrap();
                let via_dense = matmul(&dense, &xm).unwrap();
                let denom = via_dense.frob_norm().max(1e-300);
                let diff: f64 = via_op
                    .iter()
                    .zip(via_dense.data())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                assert!(diff / denom < 1e-10);
            }
        }
    }

    #[test]
    fn built_systems_pass_operator_probes() {
        let mut rng = SeedRng::new(81);
        let (models, stats) = kfac_weight_models(&mut rng, 3, 4, 3);
        for objective in [
            MergeObjective::Average,
            MergeObjective::DiagFisher,
            MergeObjective::RegMean,
            MergeObjective::BlockFisherKfac,
        ] {
            let system = build_system(objective, "layer0.weight", &models, &stats).unwrap();
            let mut prng = SeedRng::new(82);
            system.validate(&mut prng, 10).unwrap();
        }
    }

    #[test]
    fn missing_statistics_are_reported_with_names() {
        let models = vec![
            vector_model("a", vec![1.0, 2.0]),
            vector_model("b", vec![3.0, 6.0]),
        ];
        let stats = vec![diag_stats(vec![1.0, 1.0]), diag_stats(vec![1.0, 1.0])];
        let err = build_system(MergeObjective::ExactFisherVector, "theta", &models, &stats)
            .map(|_| ())
            .unwrap_err();
        match err {
            MatsError::MissingStat { param, stat } => {
                assert_eq!(param, "theta");
                assert_eq!(stat, "exact_fisher");
            }
            other => panic!("expected MissingStat, got {other:?}"),
        }
    }

    #[test]
    fn scaled_identity_converges_in_one_iteration() {
        let system = LinearSystem::new(vec![2.0, 4.0], |x| x.iter().map(|v| 2.0 * v).collect());
        let (x, trace) = cg_solve(&system, &[0.0, 0.0], &CgConfig::default()).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-14);
        assert!((x[1] - 2.0).abs() < 1e-14);
        assert_eq!(trace.steps(), 1);
        assert_eq!(trace.stop, CgStop::Converged);
    }

    #[test]
    fn hand_2x2_system_converges_in_two_iterations() {
        let a = Matrix::from_rows(&[vec![4.0, 1.0], vec![1.0, 3.0]]).unwrap();
        let system = LinearSystem::new(vec![1.0, 2.0], |x| {
            let xm = Matrix::from_vec(2, 1, x.to_vec()).unwrap();
            matmul(&a, &xm).unwrap().into_data()
        });
        let (x, trace) = cg_solve(&system, &[0.0, 0.0], &CgConfig::with_iters(2)).unwrap();
        assert!((x[0] - 1.0 / 11.0).abs() < 1e-12);
        assert!((x[1] - 7.0 / 11.0).abs() < 1e-12);
        assert!(trace.steps() <= 2);
        assert!(trace.final_residual() < 1e-12);
    }

    /// Random SPD matrix with eigenvalues drawn from `[lam_lo, lam_hi]`,
    /// built by conjugating a diagonal spectrum with random Givens rotations.
    /// Controlled conditioning keeps floating-point CG close to its exact
    /// n-step termination property.
    pub(crate) fn rotation_spd(rng: &mut SeedRng, n: usize, lam_lo: f64, lam_hi: f64) -> Matrix {
        let mut a = Matrix::zeros(n, n);
        for i in 0..n {
            a.set(i, i, lam_lo + (lam_hi - lam_lo) * rng.uniform());
        }
        for _ in 0..4 * n {
            let i = rng.below(n);
            let j = loop {
                let j = rng.below(n);
                if j != i {
                    break j;
                }
            };
            let (s, c) = (std::f64::consts::PI * (2.0 * rng.uniform() - 1.0)).sin_cos();
            // a ← G a Gᵀ for the Givens rotation G in plane (i, j).
            for col in 0..n {
                let vi = a.get(i, col);
                let vj = a.get(j, col);
                a.set(i, col, c * vi - s * vj);
                a.set(j, col, s * vi + c * vj);
            }
            for row in 0..n {
                let vi = a.get(row, i);
                let vj = a.get(row, j);
                a.set(row, i, c * vi - s * vj);
                a.set(row, j, s * vi + c * vj);
            }
        }
        // Exact symmetry for downstream contracts.
        for i in 0..n {
            for j in (i + 1)..n {
                let v = 0.5 * (a.get(i, j) + a.get(j, i));
                a.set(i, j, v);
                a.set(j, i, v);
            }
        }
        a
    }

    #[test]
    fn random_spd_matches_cholesky_within_n_iterations() {
        let mut rng = SeedRng::new(83);
        let n = 20;
        let a = rotation_spd(&mut rng, n, 0.5, 20.0);
        let b: Vec<f64> = (0..n).map(|_| rng.normal(0.0, 1.0)).collect();
        let system = LinearSystem::new(b.clone(), |x| {
            let xm = Matrix::from_vec(n, 1, x.to_vec()).unwrap();
            matmul(&a, &xm).unwrap().into_data()
        });
        let config = CgConfig {
            max_iters: n,
            rel_residual_tol: 1e-12,
            ..CgConfig::default()
        };
        let (x, trace) = cg_solve(&system, &vec![0.0; n], &config).unwrap();
        let bm = Matrix::from_vec(n, 1, b).unwrap();
        let want = chol_solve(&a, &bm).unwrap();
        for (got, want) in x.iter().zip(want.data()) {
            assert!(
                (got - want).abs() < 1e-8 * want.abs().max(1.0),
                "got {got}, want {want}, stop {:?} after {} steps, final residual {:e}",
                trace.stop,
                trace.steps(),
                trace.final_residual()
            );
        }
        assert!(trace.steps() <= n);
    }

    #[test]
    fn objective_is_nonincreasing_and_matches_recomputation() {
        let mut rng = SeedRng::new(84);
        let n = 16;
        let a = {
            let m = Matrix::from_fn(n + 2, n, |_, _| rng.normal(0.0, 1.0));
            gram(&m)
        };
        let b: Vec<f64> = (0..n).map(|_| rng.normal(0.0, 1.0)).collect();
        let system = LinearSystem::new(b, |x| {
            let xm = Matrix::from_vec(n, 1, x.to_vec()).unwrap();
            matmul(&a, &xm).unwrap().into_data()
        });
        let config = CgConfig {
            max_iters: n,
            record_iterates: true,
            ..CgConfig::default()
        };
        let x0: Vec<f64> = (0..n).map(|_| rng.normal(0.0, 1.0)).collect();
        let (_, trace) = cg_solve(&system, &x0, &config).unwrap();
        let iterates = trace.iterates.as_ref().unwrap();
        assert_eq!(iterates.len(), trace.iterations.len());
        for (record, x) in trace.iterations.iter().zip(iterates) {
            let phi = quadratic_objective_value(&system, x);
            assert!((record.objective - phi).abs() <= 1e-10 * phi.abs().max(1.0));
        }
        for w in trace.iterations.windows(2) {
            let slack = 1e-8 * w[0].objective.abs().max(1.0);
            assert!(
                w[1].objective <= w[0].objective + slack,
                "objective increased: {} -> {}",
                w[0].objective,
                w[1].objective
            );
        }
    }

    #[test]
    fn quadratic_value_identities() {
        let system = LinearSystem::new(vec![0.0, 0.0, 0.0], |x| x.to_vec());
        let x = [1.0, 2.0, -2.0];
        assert!((quadratic_objective_value(&system, &x) - 4.5).abs() < 1e-14);

        // At an exact solution, φ = −½ xᵀ b.
        let system = LinearSystem::new(vec![2.0, 6.0], |x| x.iter().map(|v| 2.0 * v).collect());
        let solution = [1.0, 3.0];
        let phi = quadratic_objective_value(&system, &solution);
        assert!((phi - (-0.5 * (2.0 + 18.0))).abs() < 1e-14);
    }

    #[test]
    fn curvature_guard_returns_current_iterate() {
        // A = 0: every direction is degenerate.
        let system = LinearSystem::new(vec![1.0, 1.0], |x| vec![0.0; x.len()]);
        let (x, trace) = cg_solve(&system, &[0.5, -0.5], &CgConfig::default()).unwrap();
        assert_eq!(x, vec![0.5, -0.5]);
        assert_eq!(trace.stop, CgStop::CurvatureBreakdown);
    }

    #[test]
    fn mats_average_objective_equals_simple_average() {
        let models = vec![
            vector_model("a", vec![1.0, 5.0, 2.0]),
            vector_model("b", vec![3.0, -1.0, 4.0]),
            vector_model("c", vec![2.0, 2.0, 0.0]),
        ];
        let (merged, traces) = mats_merge(
            &models,
            &[],
            MergeObjective::Average,
            &InitSpec::Zero,
            &CgConfig::default(),
        )
        .unwrap();
        let avg = simple_average(&models).unwrap();
        for (got, want) in merged.entries["theta"]
            .values
            .iter()
            .zip(&avg.entries["theta"].values)
        {
            assert!((got - want).abs() < 1e-10);
        }
        assert_eq!(traces["theta"].steps(), 1);
    }

    #[test]
    fn identical_models_have_zero_residual_at_init() {
        let m = vector_model("a", vec![1.5, -2.5]);
        let models = vec![m.clone(), m.clone(), m.clone()];
        let stats: Vec<StatsBundle> = (0..3).map(|_| diag_stats(vec![0.5, 2.0])).collect();
        for objective in [MergeObjective::Average, MergeObjective::DiagFisher] {
            let (merged, traces) = mats_merge(
                &models,
                &stats,
                objective,
                &InitSpec::Provided(&m),
                &CgConfig::default(),
            )
            .unwrap();
            assert_eq!(traces["theta"].steps(), 0);
            assert_eq!(traces["theta"].stop, CgStop::Converged);
            assert_eq!(merged.entries["theta"].values, m.entries["theta"].values);
        }
    }

    #[test]
    fn exact_fisher_vector_solve_closes_residual() {
        let mut rng = SeedRng::new(85);
        let n = 6;
        let mut models = Vec::new();
        let mut stats = Vec::new();
        for m in 0..3 {
            models.push(vector_model(
                &format!("t{m}"),
                (0..n).map(|_| rng.normal(0.0, 1.0)).collect(),
            ));
            let f = {
                let a = Matrix::from_fn(n + 2, n, |_, _| rng.normal(0.0, 1.0));
                gram(&a).scale(1.0 / (n + 2) as f64)
            };
            stats.push(stats_for(
                "theta",
                LayerStats {
                    role: ParamRole::Vector { n },
                    diag_fisher: (0..n).map(|i| f.get(i, i)).collect(),
                    input_gram: None,
                    outgrad_gram: None,
                    exact_fisher: Some(f),
                    n_examples: 1,
                },
            ));
        }
        let system =
            build_system(MergeObjective::ExactFisherVector, "theta", &models, &stats).unwrap();
        let config = CgConfig {
            max_iters: 4 * n,
            rel_residual_tol: 1e-12,
            ..CgConfig::default()
        };
        let (x, _) = cg_solve(&system, &vec![0.0; n], &config).unwrap();
        let ax = system.apply(&x);
        let resid: f64 = ax
            .iter()
            .zip(&system.rhs)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let b_norm: f64 = system.rhs.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(resid / b_norm < 1e-8);
    }

    #[test]
    fn sum_of_kroneckers_is_not_kronecker_of_sums() {
        // The reason CG is needed at all: kron(A1+A2, G1+G2) differs
        // materially from kron(A1,G1) + kron(A2,G2).
        let a1 = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.1]]).unwrap();
        let a2 = Matrix::from_rows(&[vec![0.1, 0.0], vec![0.0, 1.0]]).unwrap();
        let g1 = Matrix::from_rows(&[vec![1.0, 0.2], vec![0.2, 0.3]]).unwrap();
        let g2 = Matrix::from_rows(&[vec![0.3, -0.2], vec![-0.2, 1.0]]).unwrap();
        let sum_of_krons = kron_dense(&a1, &g1, 1 << 10)
            .unwrap()
            .add(&kron_dense(&a2, &g2, 1 << 10).unwrap())
            .unwrap();
        let kron_of_sums =
            kron_dense(&a1.add(&a2).unwrap(), &g1.add(&g2).unwrap(), 1 << 10).unwrap();
        let rel = sum_of_krons
            .sub(&kron_of_sums)
            .unwrap()
            .frob_norm()
            / sum_of_krons.frob_norm();
        assert!(rel > 0.1, "relative Frobenius gap {rel}");
    }

    #[test]
    fn multi_round_single_round_matches_mats_merge() {
        let models = vec![
            vector_model("a", vec![1.0, 5.0]),
            vector_model("b", vec![3.0, -1.0]),
        ];
        let stats = vec![diag_stats(vec![1.0, 2.0]), diag_stats(vec![2.0, 1.0])];
        let config = CgConfig::default();
        let (direct, _) = mats_merge(
            &models,
            &stats,
            MergeObjective::DiagFisher,
            &InitSpec::Average,
            &config,
        )
        .unwrap();
        let (chained, traces) = multi_round(
            &models,
            &stats,
            &InitSpec::Average,
            &[(MergeObjective::DiagFisher, config)],
        )
        .unwrap();
        assert_eq!(chained.entries, direct.entries);
        assert_eq!(traces.len(), 1);
    }

    #[test]
    fn multi_round_average_final_round_lands_on_simple_average() {
        let models = vec![
            vector_model("a", vec![1.0, 5.0]),
            vector_model("b", vec![3.0, -1.0]),
        ];
        let stats = vec![diag_stats(vec![1.0, 2.0]), diag_stats(vec![2.0, 1.0])];
        let config = CgConfig::default();
        let (out, _) = multi_round(
            &models,
            &stats,
            &InitSpec::Zero,
            &[
                (MergeObjective::DiagFisher, config.clone()),
                (MergeObjective::Average, config),
            ],
        )
        .unwrap();
        let avg = simple_average(&models).unwrap();
        for (got, want) in out.entries["theta"].values.iter().zip(&avg.entries["theta"].values) {
            assert!((got - want).abs() < 1e-10);
        }
    }

    #[test]
    fn empty_recipe_is_rejected() {
        let models = vec![vector_model("a", vec![1.0])];
        assert!(matches!(
            multi_round(&models, &[], &InitSpec::Zero, &[]),
            Err(MatsError::Config(_))
        ));
    }

    #[test]
    fn regmean_objective_value_basics() {
        let mut rng = SeedRng::new(86);
        let z = Matrix::from_fn(8, 3, |_, _| rng.normal(0.0, 1.0));
        let w = Matrix::from_fn(3, 2, |_, _| rng.normal(0.0, 1.0));
        let o = matmul(&z, &w).unwrap();
        // Exact fit has zero objective.
        let value = regmean_objective_value(&[(z.clone(), o.clone())], &w).unwrap();
        assert!(value.abs() < 1e-20);
        // Any perturbation strictly increases it.
        let mut w2 = w.clone();
        w2.set(0, 0, w2.get(0, 0) + 0.1);
        assert!(regmean_objective_value(&[(z, o)], &w2).unwrap() > 1e-6);
    }
}
