//! Minimal MLP classifier with exact forward/backward under cross-entropy.
//!
//! Layers are plain linear maps with tanh between them and identity at the
//! output. When biases are enabled they live inside the weight matrix: each
//! layer consumes its input augmented with a constant 1, so every trainable
//! value is covered uniformly by Gram and K-FAC statistics. An optional
//! per-layer output scaling vector (`o = zW ⊙ s`) provides a small vector
//! parameter that can be trained with the weights frozen — a
//! parameter-efficient variant whose exact per-layer Fisher fits in memory.
//!
//! `backward` returns gradients of the mean log-probability of the target
//! labels (the ascent direction); per-layer the weight gradient is
//! `(1/N)·Zᵀ O′` where `O′` holds per-example gradients with respect to the
//! layer's linear output `o = zW`.

use std::collections::BTreeMap;

use crate::checkpoint::{Checkpoint, Param, ParamRole};
use crate::error::{MatsError, Result};
use crate::rng::SeedRng;
use crate::synth::{Split, TaskDataset};
use crate::tensor::{matmul, Matrix};

/// Architecture of the classifier.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MlpSpec {
    /// `(d_in, k_out)` per linear layer, before bias augmentation.
    pub layer_dims: Vec<(usize, usize)>,
    pub use_bias: bool,
    /// When set, each layer's output is multiplied elementwise by a trainable
    /// vector and the weights stay frozen during training.
    pub use_scaling: bool,
}

impl MlpSpec {
    pub fn new(input_dim: usize, hidden: &[usize], classes: usize, use_bias: bool, use_scaling: bool) -> Self {
        let mut dims = Vec::with_capacity(hidden.len() + 1);
        let mut d = input_dim;
        for &h in hidden {
            dims.push((d, h));
            d = h;
        }
        dims.push((d, classes));
        MlpSpec {
            layer_dims: dims,
            use_bias,
            use_scaling,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_dims.is_empty() {
            return Err(MatsError::Config("spec has no layers".into()));
        }
        for w in self.layer_dims.windows(2) {
            if w[0].1 != w[1].0 {
                return Err(MatsError::Config(format!(
                    "layer dims do not chain: {:?} then {:?}",
                    w[0], w[1]
                )));
            }
        }
        if self.layer_dims.iter().any(|&(d, k)| d == 0 || k == 0) {
            return Err(MatsError::Config("zero-sized layer".into()));
        }
        Ok(())
    }

    pub fn num_layers(&self) -> usize {
        self.layer_dims.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0].0
    }

    pub fn classes(&self) -> usize {
        self.layer_dims[self.layer_dims.len() - 1].1
    }

    /// Weight shape of layer `l` including the bias row when enabled.
    pub fn weight_shape(&self, l: usize) -> (usize, usize) {
        let (d, k) = self.layer_dims[l];
        (d + usize::from(self.use_bias), k)
    }

    pub fn weight_name(l: usize) -> String {
        format!("layer{l}.weight")
    }

    pub fn scale_name(l: usize) -> String {
        format!("layer{l}.scale")
    }

    /// Layer index of a scale-vector parameter name, if it is one.
    pub fn scale_layer(&self, name: &str) -> Option<usize> {
        (0..self.num_layers()).find(|&l| Self::scale_name(l) == name)
    }

    /// Fresh parameters: weights ~ N(0, 1/√d_in), scales at 1.
    pub fn init_params(&self, rng: &mut SeedRng) -> Checkpoint {
        let mut ckpt = Checkpoint::new();
        for l in 0..self.num_layers() {
            let (d, k) = self.weight_shape(l);
            let std = 1.0 / (d as f64).sqrt();
            let w = Matrix::from_fn(d, k, |_, _| rng.normal(0.0, std));
            ckpt.insert(Self::weight_name(l), Param::weight(w));
            if self.use_scaling {
                ckpt.insert(Self::scale_name(l), Param::vector(vec![1.0; k]));
            }
        }
        ckpt
    }

    pub fn check_params(&self, params: &Checkpoint) -> Result<()> {
        self.validate()?;
        for l in 0..self.num_layers() {
            let (d, k) = self.weight_shape(l);
            let name = Self::weight_name(l);
            match params.get(&name) {
                Some(p) if p.role == (ParamRole::LinearWeight { d, k }) => {}
                Some(p) => {
                    return Err(MatsError::Shape(format!(
                        "parameter `{name}` has role {}, expected linear_weight({d},{k})",
                        p.role
                    )))
                }
                None => return Err(MatsError::Shape(format!("missing parameter `{name}`"))),
            }
            if self.use_scaling {
                let name = Self::scale_name(l);
                match params.get(&name) {
                    Some(p) if p.role == (ParamRole::Vector { n: k }) => {}
                    Some(p) => {
                        return Err(MatsError::Shape(format!(
                            "parameter `{name}` has role {}, expected vector({k})",
                            p.role
                        )))
                    }
                    None => return Err(MatsError::Shape(format!("missing parameter `{name}`"))),
                }
            }
        }
        Ok(())
    }
}

/// Per-layer tensors cached during the forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Augmented input `Z` per layer, N×d_aug.
    pub layer_inputs: Vec<Matrix>,
    /// Linear output `o = zW` per layer (before any scaling), N×k.
    pub linear_outputs: Vec<Matrix>,
}

/// Per-layer activation records from one backward pass.
#[derive(Debug, Clone)]
pub struct LayerCapture {
    /// Input activations `Z`, N×d_aug.
    pub input: Matrix,
    /// Per-example gradients of the target log-probability with respect to
    /// the layer's linear output `o = zW`, N×k.
    pub outgrad: Matrix,
    /// Per-example gradients of the scale vector, N×k (scaling models only).
    pub scale_grad_rows: Option<Matrix>,
}

#[derive(Debug, Clone)]
pub struct CaptureRecord {
    pub layers: Vec<LayerCapture>,
}

fn augment(inputs: &Matrix, use_bias: bool) -> Matrix {
    if !use_bias {
        return inputs.clone();
    }
    let (n, d) = (inputs.rows(), inputs.cols());
    Matrix::from_fn(n, d + 1, |i, j| if j == d { 1.0 } else { inputs.get(i, j) })
}

fn scale_columns(m: &Matrix, s: &[f64]) -> Matrix {
    Matrix::from_fn(m.rows(), m.cols(), |i, j| m.get(i, j) * s[j])
}

/// Forward pass; returns N×classes logits and the per-layer input cache.
pub fn forward(spec: &MlpSpec, params: &Checkpoint, inputs: &Matrix) -> Result<(Matrix, ForwardCache)> {
    spec.check_params(params)?;
    if inputs.cols() != spec.input_dim() {
        return Err(MatsError::Shape(format!(
            "inputs have {} columns, spec expects {}",
            inputs.cols(),
            spec.input_dim()
        )));
    }
    let mut cache = ForwardCache {
        layer_inputs: Vec::with_capacity(spec.num_layers()),
        linear_outputs: Vec::with_capacity(spec.num_layers()),
    };
    let mut act = inputs.clone();
    for l in 0..spec.num_layers() {
        let z = augment(&act, spec.use_bias);
        let w = params.get(&MlpSpec::weight_name(l)).expect("checked").as_matrix()?;
        let o = matmul(&z, &w)?;
        cache.layer_inputs.push(z);
        cache.linear_outputs.push(o.clone());
        let h = if spec.use_scaling {
            let s = &params.get(&MlpSpec::scale_name(l)).expect("checked").values;
            scale_columns(&o, s)
        } else {
            o
        };
        act = if l + 1 < spec.num_layers() {
            Matrix::from_fn(h.rows(), h.cols(), |i, j| h.get(i, j).tanh())
        } else {
            h
        };
    }
    Ok((act, cache))
}

/// Row-wise softmax.
pub fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(logits.rows(), logits.cols());
    for i in 0..logits.rows() {
        let row = logits.row(i);
        let max = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut sum = 0.0;
        for j in 0..logits.cols() {
            let e = (row[j] - max).exp();
            out.set(i, j, e);
            sum += e;
        }
        for j in 0..logits.cols() {
            out.set(i, j, out.get(i, j) / sum);
        }
    }
    out
}

/// Mean log-probability of the target labels (≤ 0).
pub fn mean_log_prob(spec: &MlpSpec, params: &Checkpoint, inputs: &Matrix, labels: &[usize]) -> Result<f64> {
    let (logits, _) = forward(spec, params, inputs)?;
    Ok(mean_log_prob_of_logits(&logits, labels))
}

fn mean_log_prob_of_logits(logits: &Matrix, labels: &[usize]) -> f64 {
    let n = logits.rows();
    let mut total = 0.0;
    for i in 0..n {
        let row = logits.row(i);
        let max = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += row[labels[i]] - lse;
    }
    total / n as f64
}

/// Backward pass for the mean log-probability of `target_labels`.
///
/// Returns checkpoint-shaped gradients (ascent direction) together with the
/// per-layer capture of `Z` and `O′` used by the statistics collectors.
pub fn backward(
    spec: &MlpSpec,
    params: &Checkpoint,
    inputs: &Matrix,
    target_labels: &[usize],
) -> Result<(Checkpoint, CaptureRecord)> {
    let (_, grads, capture) = backward_with_log_prob(spec, params, inputs, target_labels)?;
    Ok((grads, capture))
}

fn backward_with_log_prob(
    spec: &MlpSpec,
    params: &Checkpoint,
    inputs: &Matrix,
    labels: &[usize],
) -> Result<(f64, Checkpoint, CaptureRecord)> {
    if labels.len() != inputs.rows() {
        return Err(MatsError::Shape(format!(
            "{} labels for {} inputs",
            labels.len(),
            inputs.rows()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= spec.classes()) {
        return Err(MatsError::Shape(format!(
            "label {bad} out of range for {} classes",
            spec.classes()
        )));
    }
    let (logits, cache) = forward(spec, params, inputs)?;
    let log_prob = mean_log_prob_of_logits(&logits, labels);
    let probs = softmax_rows(&logits);
    let n = inputs.rows();
    let inv_n = 1.0 / n as f64;
    let layers = spec.num_layers();

    // ∂ logp / ∂ (post-scaling output) of the last layer: e_y − p per row.
    let mut delta_h = Matrix::from_fn(n, spec.classes(), |i, j| {
        f64::from(labels[i] == j) - probs.get(i, j)
    });

    let mut grads = Checkpoint::new();
    let mut captured: Vec<LayerCapture> = Vec::with_capacity(layers);
    for l in (0..layers).rev() {
        let w = params.get(&MlpSpec::weight_name(l)).expect("checked").as_matrix()?;
        let z = &cache.layer_inputs[l];
        let o = &cache.linear_outputs[l];

        let (delta_o, scale_grad_rows) = if spec.use_scaling {
            let s = &params.get(&MlpSpec::scale_name(l)).expect("checked").values;
            let delta_o = scale_columns(&delta_h, s);
            // ∂ logp / ∂ s = o ⊙ ∂ logp / ∂ (o ⊙ s), per example.
            let rows = Matrix::from_fn(n, o.cols(), |i, j| o.get(i, j) * delta_h.get(i, j));
            (delta_o, Some(rows))
        } else {
            (delta_h.clone(), None)
        };

        let gw = matmul(&z.transpose(), &delta_o)?.scale(inv_n);
        grads.insert(MlpSpec::weight_name(l), Param::weight(gw));
        if let Some(rows) = &scale_grad_rows {
            let gs: Vec<f64> = (0..rows.cols())
                .map(|j| (0..n).map(|i| rows.get(i, j)).sum::<f64>() * inv_n)
                .collect();
            grads.insert(MlpSpec::scale_name(l), Param::vector(gs));
        }

        if l > 0 {
            // Through the weights, dropping the bias column, then tanh'.
            let da_aug = matmul(&delta_o, &w.transpose())?;
            let d_prev = spec.layer_dims[l].0;
            let prev_act = &cache.layer_inputs[l]; // augmented tanh outputs
            delta_h = Matrix::from_fn(n, d_prev, |i, j| {
                let a = prev_act.get(i, j);
                da_aug.get(i, j) * (1.0 - a * a)
            });
        }

        captured.push(LayerCapture {
            input: z.clone(),
            outgrad: delta_o,
            scale_grad_rows,
        });
    }
    captured.reverse();
    Ok((log_prob, grads, CaptureRecord { layers: captured }))
}

/// Plain SGD training configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
}

/// Trains with minibatch SGD on the cross-entropy loss (gradient ascent on
/// the mean log-probability). Scaling models train only the scale vectors;
/// otherwise only the weights train. Identical inputs give bit-identical
/// checkpoints.
pub fn train(
    spec: &MlpSpec,
    init: &Checkpoint,
    dataset: &TaskDataset,
    config: &TrainConfig,
) -> Result<Checkpoint> {
    spec.check_params(init)?;
    if dataset.is_empty() {
        return Err(MatsError::Config("empty training dataset".into()));
    }
    if config.batch_size == 0 {
        return Err(MatsError::Config("batch_size must be positive".into()));
    }
    let mut params = init.clone();
    let mut rng = SeedRng::new(config.seed);
    let n = dataset.len();
    for step in 0..config.steps {
        let idx: Vec<usize> = (0..config.batch_size).map(|_| rng.below(n)).collect();
        let batch = Matrix::from_fn(idx.len(), dataset.inputs.cols(), |i, j| {
            dataset.inputs.get(idx[i], j)
        });
        let labels: Vec<usize> = idx.iter().map(|&i| dataset.labels[i]).collect();
        let (log_prob, grads, _) = backward_with_log_prob(spec, &params, &batch, &labels)?;
        if !log_prob.is_finite() {
            return Err(MatsError::Divergence(format!(
                "non-finite loss at step {step} of task `{}`",
                dataset.task_name
            )));
        }
        for (name, grad) in &grads.entries {
            let trainable = if spec.use_scaling {
                spec.scale_layer(name).is_some()
            } else {
                name.ends_with(".weight")
            };
            if !trainable {
                continue;
            }
            let values = &mut params.entries.get_mut(name).expect("checked").values;
            for (v, g) in values.iter_mut().zip(&grad.values) {
                *v += config.lr * g;
            }
        }
    }
    params.provenance.insert("task".into(), dataset.task_name.clone());
    params.provenance.insert("seed".into(), config.seed.to_string());
    params.provenance.insert("steps".into(), config.steps.to_string());
    params.provenance.insert("lr".into(), config.lr.to_string());
    params.provenance.insert(
        "trained".into(),
        if spec.use_scaling { "scales" } else { "weights" }.to_string(),
    );
    Ok(params)
}

/// Split-tagged accuracy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Accuracy {
    pub split: Split,
    pub value: f64,
}

/// Fraction of argmax-correct predictions; prediction ties resolve to the
/// lowest class index.
pub fn evaluate(spec: &MlpSpec, params: &Checkpoint, dataset: &TaskDataset) -> Result<Accuracy> {
    let (logits, _) = forward(spec, params, &dataset.inputs)?;
    let mut correct = 0usize;
    for i in 0..dataset.len() {
        let row = logits.row(i);
        let mut best = 0usize;
        for j in 1..row.len() {
            if row[j] > row[best] {
                best = j;
            }
        }
        if best == dataset.labels[i] {
            correct += 1;
        }
    }
    Ok(Accuracy {
        split: dataset.split,
        value: correct as f64 / dataset.len() as f64,
    })
}

/// Flattens checkpoint-shaped gradients into one vector keyed by sorted
/// parameter name (finite-difference checks and TIES use this layout).
pub fn flatten_params(ckpt: &Checkpoint) -> (Vec<f64>, BTreeMap<String, (usize, usize)>) {
    let mut flat = Vec::new();
    let mut spans = BTreeMap::new();
    for (name, param) in &ckpt.entries {
        let start = flat.len();
        flat.extend_from_slice(&param.values);
        spans.insert(name.clone(), (start, param.values.len()));
    }
    (flat, spans)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zero_params(spec: &MlpSpec) -> Checkpoint {
        let mut rng = SeedRng::new(0);
        let mut p = spec.init_params(&mut rng);
        for param in p.entries.values_mut() {
            if param.role.shape().len() == 2 {
                param.values.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        p
    }

    #[test]
    fn zero_network_gives_uniform_softmax() {
        let spec = MlpSpec::new(3, &[4], 5, true, false);
        let params = zero_params(&spec);
        let inputs = Matrix::from_fn(6, 3, |i, j| (i + j) as f64 * 0.1);
        let (logits, _) = forward(&spec, &params, &inputs).unwrap();
        assert!(logits.max_abs() == 0.0);
        let probs = softmax_rows(&logits);
        for i in 0..6 {
            for j in 0..5 {
                assert!((probs.get(i, j) - 0.2).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn identity_layer_passes_through() {
        let spec = MlpSpec::new(3, &[], 3, false, false);
        let mut params = Checkpoint::new();
        params.insert(MlpSpec::weight_name(0), Param::weight(Matrix::identity(3)));
        let e1 = Matrix::from_rows(&[vec![1.0, 0.0, 0.0]]).unwrap();
        let (logits, _) = forward(&spec, &params, &e1).unwrap();
        assert_eq!(logits, e1);
    }

    #[test]
    fn hand_softmax_gradient_single_example() {
        // 1 linear layer, W = 0, 2 classes, x = [1,0], label 0:
        // O' = [0.5, -0.5], grad = x·O'ᵀ structure.
        let spec = MlpSpec::new(2, &[], 2, false, false);
        let mut params = Checkpoint::new();
        params.insert(MlpSpec::weight_name(0), Param::weight(Matrix::zeros(2, 2)));
        let x = Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let (grads, capture) = backward(&spec, &params, &x, &[0]).unwrap();
        let og = &capture.layers[0].outgrad;
        assert!((og.get(0, 0) - 0.5).abs() < 1e-15);
        assert!((og.get(0, 1) + 0.5).abs() < 1e-15);
        let gw = grads.get("layer0.weight").unwrap().as_matrix().unwrap();
        let want = Matrix::from_rows(&[vec![0.5, -0.5], vec![0.0, 0.0]]).unwrap();
        assert!(gw.sub(&want).unwrap().max_abs() < 1e-15);
    }

    #[test]
    fn per_example_gradient_is_outer_product() {
        let spec = MlpSpec::new(3, &[4], 2, true, false);
        let mut rng = SeedRng::new(21);
        let params = spec.init_params(&mut rng);
        let x = Matrix::from_fn(1, 3, |_, j| 0.3 * (j as f64 + 1.0));
        let (grads, capture) = backward(&spec, &params, &x, &[1]).unwrap();
        for l in 0..spec.num_layers() {
            let cap = &capture.layers[l];
            let gw = grads
                .get(&MlpSpec::weight_name(l))
                .unwrap()
                .as_matrix()
                .unwrap();
            for i in 0..gw.rows() {
                for j in 0..gw.cols() {
                    let outer = cap.input.get(0, i) * cap.outgrad.get(0, j);
                    assert_eq!(gw.get(i, j), outer);
                }
            }
        }
    }

    fn finite_difference_check(spec: &MlpSpec, seed: u64) {
        let mut rng = SeedRng::new(seed);
        let params = spec.init_params(&mut rng);
        let n = 8;
        let inputs = Matrix::from_fn(n, spec.input_dim(), |_, _| rng.normal(0.0, 1.0));
        let labels: Vec<usize> = (0..n).map(|i| i % spec.classes()).collect();
        let (grads, _) = backward(spec, &params, &inputs, &labels).unwrap();

        let h = 1e-6;
        let names: Vec<String> = params.entries.keys().cloned().collect();
        let mut max_rel: f64 = 0.0;
        for name in &names {
            let len = params.get(name).unwrap().values.len();
            for idx in 0..len {
                let mut plus = params.clone();
                plus.entries.get_mut(name).unwrap().values[idx] += h;
                let mut minus = params.clone();
                minus.entries.get_mut(name).unwrap().values[idx] -= h;
                let fd = (mean_log_prob(spec, &plus, &inputs, &labels).unwrap()
                    - mean_log_prob(spec, &minus, &inputs, &labels).unwrap())
                    / (2.0 * h);
                let an = grads.get(name).unwrap().values[idx];
                let denom = an.abs().max(fd.abs()).max(1e-4);
                max_rel = max_rel.max((an - fd).abs() / denom);
            }
        }
        assert!(max_rel < 1e-6, "max relative gradient error {max_rel}");
    }

    #[test]
    fn gradients_match_central_differences() {
        finite_difference_check(&MlpSpec::new(4, &[5], 3, true, false), 40);
        finite_difference_check(&MlpSpec::new(3, &[6, 4], 2, true, false), 41);
        finite_difference_check(&MlpSpec::new(5, &[], 4, false, false), 42);
    }

    #[test]
    fn gradients_match_central_differences_with_scaling() {
        finite_difference_check(&MlpSpec::new(4, &[5], 3, true, true), 43);
        finite_difference_check(&MlpSpec::new(3, &[4, 4], 2, false, true), 44);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_log_probs_nonpositive() {
        let mut rng = SeedRng::new(22);
        let logits = Matrix::from_fn(10, 4, |_, _| rng.normal(0.0, 5.0));
        let probs = softmax_rows(&logits);
        for i in 0..10 {
            let sum: f64 = probs.row(i).iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
        let labels: Vec<usize> = (0..10).map(|i| i % 4).collect();
        let spec = MlpSpec::new(4, &[], 4, false, false);
        let mut params = Checkpoint::new();
        params.insert(MlpSpec::weight_name(0), Param::weight(Matrix::identity(4)));
        let inputs = Matrix::from_fn(10, 4, |_, _| rng.normal(0.0, 2.0));
        assert!(mean_log_prob(&spec, &params, &inputs, &labels).unwrap() <= 0.0);
    }

    fn blob_task(seed: u64, n: usize) -> TaskDataset {
        let mut rng = SeedRng::new(seed);
        let mut inputs = Matrix::zeros(n, 2);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let label = i % 2;
            labels.push(label);
            let center = if label == 0 { -2.0 } else { 2.0 };
            inputs.set(i, 0, center + rng.normal(0.0, 0.5));
            inputs.set(i, 1, rng.normal(0.0, 0.5));
        }
        TaskDataset {
            inputs,
            labels,
            split: Split::Train,
            task_name: "blobs".into(),
        }
    }

    #[test]
    fn zero_steps_returns_init_unchanged() {
        let spec = MlpSpec::new(2, &[4], 2, true, false);
        let mut rng = SeedRng::new(30);
        let init = spec.init_params(&mut rng);
        let data = blob_task(31, 40);
        let cfg = TrainConfig {
            lr: 0.1,
            batch_size: 8,
            steps: 0,
            seed: 5,
        };
        let out = train(&spec, &init, &data, &cfg).unwrap();
        assert_eq!(out.entries, init.entries);
    }

    #[test]
    fn separable_blobs_reach_95_percent() {
        let spec = MlpSpec::new(2, &[8], 2, true, false);
        let mut rng = SeedRng::new(32);
        let init = spec.init_params(&mut rng);
        let data = blob_task(33, 200);
        let cfg = TrainConfig {
            lr: 0.5,
            batch_size: 16,
            steps: 500,
            seed: 6,
        };
        let model = train(&spec, &init, &data, &cfg).unwrap();
        let acc = evaluate(&spec, &model, &data).unwrap();
        assert!(acc.value >= 0.95, "train accuracy {}", acc.value);
    }

    #[test]
    fn training_is_deterministic() {
        let spec = MlpSpec::new(2, &[4], 2, true, false);
        let mut rng = SeedRng::new(34);
        let init = spec.init_params(&mut rng);
        let data = blob_task(35, 64);
        let cfg = TrainConfig {
            lr: 0.2,
            batch_size: 8,
            steps: 50,
            seed: 7,
        };
        let a = train(&spec, &init, &data, &cfg).unwrap();
        let b = train(&spec, &init, &data, &cfg).unwrap();
        assert_eq!(a, b);
        let bits = |c: &Checkpoint| -> Vec<u64> {
            c.entries
                .values()
                .flat_map(|p| p.values.iter().map(|v| v.to_bits()))
                .collect()
        };
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn uniform_model_accuracy_equals_class0_frequency() {
        let spec = MlpSpec::new(2, &[], 2, false, false);
        let mut params = Checkpoint::new();
        params.insert(MlpSpec::weight_name(0), Param::weight(Matrix::zeros(2, 2)));
        let data = blob_task(36, 50);
        let freq0 = data.labels.iter().filter(|&&y| y == 0).count() as f64 / 50.0;
        let acc = evaluate(&spec, &params, &data).unwrap();
        assert_eq!(acc.value, freq0);
        assert_eq!(acc.split, Split::Train);
    }

    #[test]
    fn perfect_model_scores_one() {
        // Identity layer on one-hot inputs reproduces the label exactly.
        let spec = MlpSpec::new(3, &[], 3, false, false);
        let mut params = Checkpoint::new();
        params.insert(MlpSpec::weight_name(0), Param::weight(Matrix::identity(3)));
        let labels: Vec<usize> = vec![0, 2, 1, 1, 0, 2];
        let inputs = Matrix::from_fn(6, 3, |i, j| f64::from(labels[i] == j));
        let data = TaskDataset {
            inputs,
            labels,
            split: Split::Train,
            task_name: "memorized".into(),
        };
        assert_eq!(evaluate(&spec, &params, &data).unwrap().value, 1.0);
    }

    #[test]
    fn evaluate_matches_scalar_loop_reference() {
        let spec = MlpSpec::new(2, &[6], 3, true, false);
        let mut rng = SeedRng::new(37);
        let params = spec.init_params(&mut rng);
        let mut data = blob_task(38, 30);
        data.labels = (0..30).map(|i| i % 3).collect();
        let acc = evaluate(&spec, &params, &data).unwrap();

        // Scalar reference: score each example independently.
        let mut correct = 0usize;
        for i in 0..30 {
            let x = Matrix::from_fn(1, 2, |_, j| data.inputs.get(i, j));
            let (logits, _) = forward(&spec, &params, &x).unwrap();
            let row = logits.row(0);
            let mut best = 0;
            for j in 1..3 {
                if row[j] > row[best] {
                    best = j;
                }
            }
            if best == data.labels[i] {
                correct += 1;
            }
        }
        assert_eq!(acc.value, correct as f64 / 30.0);
    }
}
