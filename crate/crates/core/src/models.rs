//! Small dense classifiers trained from scratch: softmax regression and a
//! one-hidden-layer ReLU network. Parameters live in a single flat vector so
//! that aggregation can treat every model as one row of a matrix.
//!
//! Layout per layer: weights (`outputs x inputs`, row-major) followed by the
//! biases. Layers are stored in order.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::{BackdoorPattern, Dataset};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    /// Raw logits; only valid on the output layer, where softmax is applied
    /// by the loss.
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub inputs: usize,
    pub outputs: usize,
    pub activation: Activation,
}

impl LayerShape {
    pub fn param_count(&self) -> usize {
        self.inputs * self.outputs + self.outputs
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    layers: Vec<LayerShape>,
}

impl Architecture {
    pub fn new(layers: Vec<LayerShape>) -> Result<Self> {
        let Some(last) = layers.last() else {
            return Err(Error::invalid("architecture needs at least one layer"));
        };
        if last.activation != Activation::Identity {
            return Err(Error::invalid("output layer must emit raw logits"));
        }
        if layers[..layers.len() - 1]
            .iter()
            .any(|l| l.activation != Activation::Relu)
        {
            return Err(Error::invalid("hidden layers must use ReLU"));
        }
        if last.outputs < 2 {
            return Err(Error::invalid("classifier needs at least 2 outputs"));
        }
        for pair in layers.windows(2) {
            if pair[0].outputs != pair[1].inputs {
                return Err(Error::DimensionMismatch {
                    expected: pair[0].outputs,
                    found: pair[1].inputs,
                });
            }
        }
        if layers.iter().any(|l| l.inputs == 0 || l.outputs == 0) {
            return Err(Error::invalid("layer widths must be positive"));
        }
        Ok(Self { layers })
    }

    pub fn softmax_regression(inputs: usize, classes: usize) -> Result<Self> {
        Self::new(vec![LayerShape {
            inputs,
            outputs: classes,
            activation: Activation::Identity,
        }])
    }

    pub fn mlp(inputs: usize, hidden: usize, classes: usize) -> Result<Self> {
        Self::new(vec![
            LayerShape {
                inputs,
                outputs: hidden,
                activation: Activation::Relu,
            },
            LayerShape {
                inputs: hidden,
                outputs: classes,
                activation: Activation::Identity,
            },
        ])
    }

    pub fn layers(&self) -> &[LayerShape] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(LayerShape::param_count).sum()
    }

    fn max_width(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.outputs.max(l.inputs))
            .max()
            .unwrap_or(0)
    }
}

/// One dense layer in structured form.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub shape: LayerShape,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Flat parameter vector plus the architecture that gives it meaning.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatModel {
    arch: Architecture,
    params: Vec<f64>,
}

impl FlatModel {
    pub fn new(arch: Architecture, params: Vec<f64>) -> Result<Self> {
        if params.len() != arch.param_count() {
            return Err(Error::DimensionMismatch {
                expected: arch.param_count(),
                found: params.len(),
            });
        }
        Ok(Self { arch, params })
    }

    pub fn zeros(arch: Architecture) -> Self {
        let params = vec![0.0; arch.param_count()];
        Self { arch, params }
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn into_params(self) -> Vec<f64> {
        self.params
    }

    /// Same architecture, new parameters.
    pub fn with_params(&self, params: Vec<f64>) -> Result<Self> {
        Self::new(self.arch.clone(), params)
    }

    pub fn same_shape(&self, other: &FlatModel) -> Result<()> {
        if self.arch != other.arch {
            return Err(Error::invalid("models have different architectures"));
        }
        Ok(())
    }

    pub fn to_layers(&self) -> Vec<DenseLayer> {
        let mut offset = 0;
        self.arch
            .layers
            .iter()
            .map(|&shape| {
                let nw = shape.inputs * shape.outputs;
                let weights = self.params[offset..offset + nw].to_vec();
                let bias = self.params[offset + nw..offset + nw + shape.outputs].to_vec();
                offset += shape.param_count();
                DenseLayer {
                    shape,
                    weights,
                    bias,
                }
            })
            .collect()
    }

    pub fn from_layers(layers: &[DenseLayer]) -> Result<Self> {
        let arch = Architecture::new(layers.iter().map(|l| l.shape).collect())?;
        let mut params = Vec::with_capacity(arch.param_count());
        for layer in layers {
            if layer.weights.len() != layer.shape.inputs * layer.shape.outputs
                || layer.bias.len() != layer.shape.outputs
            {
                return Err(Error::invalid("layer buffers do not match their shape"));
            }
            params.extend_from_slice(&layer.weights);
            params.extend_from_slice(&layer.bias);
        }
        Self::new(arch, params)
    }
}

/// Glorot-uniform weights, zero biases.
pub fn init_model(arch: &Architecture, seed: u64) -> FlatModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Vec::with_capacity(arch.param_count());
    for layer in &arch.layers {
        let s = (6.0 / (layer.inputs + layer.outputs) as f64).sqrt();
        params.extend((0..layer.inputs * layer.outputs).map(|_| rng.random_range(-s..=s)));
        params.extend(std::iter::repeat_n(0.0, layer.outputs));
    }
    FlatModel {
        arch: arch.clone(),
        params,
    }
}

/// Scratch buffers for forward and backward passes over one batch.
#[derive(Debug, Default)]
struct Workspace {
    /// Per layer input activations, `batch x inputs`; the last entry holds logits.
    acts: Vec<Vec<f64>>,
    delta: Vec<f64>,
    delta_prev: Vec<f64>,
}

fn forward(params: &[f64], arch: &Architecture, x: &[f64], batch: usize, ws: &mut Workspace) {
    let n_layers = arch.layers.len();
    ws.acts.resize_with(n_layers + 1, Vec::new);
    ws.acts[0].clear();
    ws.acts[0].extend_from_slice(x);
    let mut offset = 0;
    for (l, shape) in arch.layers.iter().enumerate() {
        let nw = shape.inputs * shape.outputs;
        let w = &params[offset..offset + nw];
        let b = &params[offset + nw..offset + nw + shape.outputs];
        offset += shape.param_count();
        let (done, rest) = ws.acts.split_at_mut(l + 1);
        let input = &done[l];
        let out = &mut rest[0];
        out.clear();
        out.resize(batch * shape.outputs, 0.0);
        for s in 0..batch {
            let a = &input[s * shape.inputs..(s + 1) * shape.inputs];
            let z = &mut out[s * shape.outputs..(s + 1) * shape.outputs];
            for (o, zo) in z.iter_mut().enumerate() {
                let row = &w[o * shape.inputs..(o + 1) * shape.inputs];
                let mut acc = b[o];
                for (wi, ai) in row.iter().zip(a) {
                    acc += wi * ai;
                }
                *zo = match shape.activation {
                    Activation::Relu => acc.max(0.0),
                    Activation::Identity => acc,
                };
            }
        }
    }
}

/// Turns logits in place into softmax probabilities and returns the summed
/// cross-entropy against `labels`.
fn softmax_cross_entropy(logits: &mut [f64], labels: &[usize], classes: usize) -> f64 {
    let mut loss = 0.0;
    for (s, &label) in labels.iter().enumerate() {
        let row = &mut logits[s * classes..(s + 1) * classes];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
        loss -= row[label].max(f64::MIN_POSITIVE).ln();
    }
    loss
}

/// Mean loss over the batch; `grad` receives the mean gradient.
fn batch_loss_grad(
    params: &[f64],
    arch: &Architecture,
    x: &[f64],
    labels: &[usize],
    ws: &mut Workspace,
    grad: &mut [f64],
) -> f64 {
    let batch = labels.len();
    let classes = arch.output_dim();
    forward(params, arch, x, batch, ws);
    let n_layers = arch.layers.len();
    let loss = softmax_cross_entropy(&mut ws.acts[n_layers], labels, classes);

    let inv = 1.0 / batch as f64;
    ws.delta.clear();
    ws.delta.extend_from_slice(&ws.acts[n_layers]);
    for (s, &label) in labels.iter().enumerate() {
        ws.delta[s * classes + label] -= 1.0;
    }
    ws.delta.iter_mut().for_each(|d| *d *= inv);

    grad.iter_mut().for_each(|g| *g = 0.0);
    let mut offsets = Vec::with_capacity(n_layers);
    let mut offset = 0;
    for shape in &arch.layers {
        offsets.push(offset);
        offset += shape.param_count();
    }
    ws.delta_prev.reserve(batch * arch.max_width());
    for l in (0..n_layers).rev() {
        let shape = arch.layers[l];
        let off = offsets[l];
        let nw = shape.inputs * shape.outputs;
        let input = &ws.acts[l];
        {
            let (gw, gb) = grad[off..off + shape.param_count()].split_at_mut(nw);
            for s in 0..batch {
                let d = &ws.delta[s * shape.outputs..(s + 1) * shape.outputs];
                let a = &input[s * shape.inputs..(s + 1) * shape.inputs];
                for (o, &dv) in d.iter().enumerate() {
                    if dv == 0.0 {
                        continue;
                    }
                    gb[o] += dv;
                    let row = &mut gw[o * shape.inputs..(o + 1) * shape.inputs];
                    for (g, &ai) in row.iter_mut().zip(a) {
                        *g += dv * ai;
                    }
                }
            }
        }
        if l == 0 {
            break;
        }
        let w = &params[off..off + nw];
        ws.delta_prev.clear();
        ws.delta_prev.resize(batch * shape.inputs, 0.0);
        for s in 0..batch {
            let d = &ws.delta[s * shape.outputs..(s + 1) * shape.outputs];
            let dp = &mut ws.delta_prev[s * shape.inputs..(s + 1) * shape.inputs];
            for (o, &dv) in d.iter().enumerate() {
                if dv == 0.0 {
                    continue;
                }
                for (p, &wi) in dp.iter_mut().zip(&w[o * shape.inputs..(o + 1) * shape.inputs]) {
                    *p += dv * wi;
                }
            }
            // ReLU mask from the previous layer's output.
            let prev_out = &input[s * shape.inputs..(s + 1) * shape.inputs];
            for (p, &a) in dp.iter_mut().zip(prev_out) {
                if a <= 0.0 {
                    *p = 0.0;
                }
            }
        }
        std::mem::swap(&mut ws.delta, &mut ws.delta_prev);
    }
    loss * inv
}

fn check_batch(model: &FlatModel, features: &[f64], labels: &[usize]) -> Result<()> {
    let d = model.arch.input_dim();
    if features.len() != labels.len() * d {
        return Err(Error::DimensionMismatch {
            expected: labels.len() * d,
            found: features.len(),
        });
    }
    if labels.is_empty() {
        return Err(Error::invalid("batch is empty"));
    }
    let classes = model.arch.output_dim();
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::invalid(format!("label {bad} out of range for {classes} classes")));
    }
    Ok(())
}

/// Mean cross-entropy of a batch and its exact gradient.
///
/// `features` is row-major, one sample per row.
pub fn loss_and_grad(model: &FlatModel, features: &[f64], labels: &[usize]) -> Result<(f64, Vec<f64>)> {
    check_batch(model, features, labels)?;
    let mut grad = vec![0.0; model.params.len()];
    let loss = batch_loss_grad(
        &model.params,
        &model.arch,
        features,
        labels,
        &mut Workspace::default(),
        &mut grad,
    );
    Ok((loss, grad))
}

/// Mean cross-entropy without the gradient.
pub fn loss(model: &FlatModel, features: &[f64], labels: &[usize]) -> Result<f64> {
    check_batch(model, features, labels)?;
    let mut ws = Workspace::default();
    forward(&model.params, &model.arch, features, labels.len(), &mut ws);
    let n = model.arch.layers.len();
    let total = softmax_cross_entropy(&mut ws.acts[n], labels, model.arch.output_dim());
    Ok(total / labels.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            lr: 0.01,
            batch_size: 64,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("learning rate must be non-negative, got {}", self.lr)));
        }
        Ok(())
    }
}

/// Rewrites training batches in place before each gradient step; used for
/// data poisoning.
pub trait BatchTransform: Sync {
    fn apply(&self, features: &mut [f64], labels: &mut [usize], dim: usize);
}

/// Minibatch SGD with a fresh seeded shuffle every epoch.
pub fn sgd_train(model: &FlatModel, data: &Dataset, cfg: &TrainConfig) -> Result<FlatModel> {
    sgd_train_with(model, data, cfg, None)
}

pub fn sgd_train_with(
    model: &FlatModel,
    data: &Dataset,
    cfg: &TrainConfig,
    transform: Option<&dyn BatchTransform>,
) -> Result<FlatModel> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("training data is empty"));
    }
    let d = model.arch.input_dim();
    if data.dim() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            found: data.dim(),
        });
    }
    if data.classes() > model.arch.output_dim() {
        return Err(Error::invalid("dataset has more classes than the model outputs"));
    }
    let mut out = model.clone();
    if cfg.epochs == 0 || cfg.lr == 0.0 {
        return Ok(out);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut ws = Workspace::default();
    let mut grad = vec![0.0; out.params.len()];
    let mut xb = Vec::with_capacity(cfg.batch_size * d);
    let mut yb = Vec::with_capacity(cfg.batch_size);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            xb.clear();
            yb.clear();
            for &i in chunk {
                xb.extend_from_slice(data.row(i));
                yb.push(data.labels()[i]);
            }
            if let Some(t) = transform {
                t.apply(&mut xb, &mut yb, d);
            }
            batch_loss_grad(&out.params, &out.arch, &xb, &yb, &mut ws, &mut grad);
            for (p, g) in out.params.iter_mut().zip(&grad) {
                *p -= cfg.lr * g;
            }
        }
    }
    Ok(out)
}

const EVAL_CHUNK: usize = 256;

/// Predicted class of every sample, optionally after rewriting each row.
fn predict_with(model: &FlatModel, data: &Dataset, rewrite: Option<&BackdoorPattern>) -> Result<Vec<usize>> {
    let d = model.arch.input_dim();
    if data.dim() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            found: data.dim(),
        });
    }
    let classes = model.arch.output_dim();
    let mut ws = Workspace::default();
    let mut preds = Vec::with_capacity(data.len());
    let mut xb = Vec::with_capacity(EVAL_CHUNK * d);
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(EVAL_CHUNK) {
        xb.clear();
        for &i in chunk {
            let start = xb.len();
            xb.extend_from_slice(data.row(i));
            if let Some(p) = rewrite {
                p.embed(&mut xb[start..])?;
            }
        }
        forward(&model.params, &model.arch, &xb, chunk.len(), &mut ws);
        let logits = &ws.acts[model.arch.layers.len()];
        preds.extend(logits.chunks(classes).map(argmax));
    }
    Ok(preds)
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn predict(model: &FlatModel, data: &Dataset) -> Result<Vec<usize>> {
    predict_with(model, data, None)
}

/// Fraction of samples classified correctly.
pub fn evaluate(model: &FlatModel, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::invalid("evaluation data is empty"));
    }
    let preds = predict(model, data)?;
    let correct = preds
        .iter()
        .zip(data.labels())
        .filter(|(p, l)| p == l)
        .count();
    Ok(correct as f64 / data.len() as f64)
}

/// Fraction of test samples outside the target class that the model assigns
/// to the target class once the pattern is embedded.
pub fn attack_success_rate(model: &FlatModel, data: &Dataset, pattern: &BackdoorPattern) -> Result<f64> {
    let target = pattern.target_label();
    let eligible: Vec<usize> = (0..data.len())
        .filter(|&i| data.labels()[i] != target)
        .collect();
    if eligible.is_empty() {
        return Err(Error::invalid("no test samples outside the backdoor target class"));
    }
    let subset = data.subset(&eligible);
    let preds = predict_with(model, &subset, Some(pattern))?;
    Ok(preds.iter().filter(|&&p| p == target).count() as f64 / preds.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalResult {
    pub accuracy: f64,
    pub attack_success_rate: Option<f64>,
}

pub fn evaluate_all(model: &FlatModel, data: &Dataset, pattern: Option<&BackdoorPattern>) -> Result<EvalResult> {
    Ok(EvalResult {
        accuracy: evaluate(model, data)?,
        attack_success_rate: pattern
            .map(|p| attack_success_rate(model, data, p))
            .transpose()?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::synth_blobs;

    #[test]
    fn init_is_deterministic() {
        let arch = Architecture::mlp(6, 5, 3).unwrap();
        let a = init_model(&arch, 7);
        assert_eq!(a, init_model(&arch, 7));
        assert_ne!(a, init_model(&arch, 8));
        for layer in a.to_layers() {
            assert!(layer.bias.iter().all(|&b| b == 0.0));
            let s = (6.0 / (layer.shape.inputs + layer.shape.outputs) as f64).sqrt();
            assert!(layer.weights.iter().all(|w| w.abs() <= s));
        }
    }

    #[test]
    fn layers_round_trip() {
        let m = init_model(&Architecture::mlp(4, 3, 2).unwrap(), 1);
        assert_eq!(FlatModel::from_layers(&m.to_layers()).unwrap(), m);
        assert_eq!(m.params().len(), 4 * 3 + 3 + 3 * 2 + 2);
    }

    #[test]
    fn architecture_validation() {
        assert!(Architecture::new(vec![]).is_err());
        let bad = vec![LayerShape {
            inputs: 3,
            outputs: 2,
            activation: Activation::Relu,
        }];
        assert!(Architecture::new(bad).is_err());
        let mismatched = vec![
            LayerShape { inputs: 3, outputs: 4, activation: Activation::Relu },
            LayerShape { inputs: 5, outputs: 2, activation: Activation::Identity },
        ];
        assert!(Architecture::new(mismatched).is_err());
    }

    #[test]
    fn zero_weights_give_log_c_loss() {
        let m = FlatModel::zeros(Architecture::softmax_regression(3, 4).unwrap());
        let (loss, _) = loss_and_grad(&m, &[0.1, 0.2, 0.3, -1.0, 2.0, 0.5], &[0, 3]).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn duplicated_batch_is_invariant() {
        let m = init_model(&Architecture::mlp(3, 4, 3).unwrap(), 3);
        let x = [0.1, -0.4, 0.9, 1.2, 0.3, -0.7];
        let y = [2, 0];
        let (l1, g1) = loss_and_grad(&m, &x, &y).unwrap();
        let x2: Vec<f64> = x.iter().chain(&x).copied().collect();
        let (l2, g2) = loss_and_grad(&m, &x2, &[2, 0, 2, 0]).unwrap();
        assert!((l1 - l2).abs() < 1e-12);
        for (a, b) in g1.iter().zip(&g2) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let m = init_model(&Architecture::softmax_regression(3, 2).unwrap(), 0);
        assert!(matches!(
            loss_and_grad(&m, &[1.0, 2.0], &[0]),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(loss_and_grad(&m, &[1.0, 2.0, 3.0], &[5]).is_err());
    }

    #[test]
    fn zero_epochs_or_zero_lr_is_identity() {
        let data = synth_blobs(2, 2, 10, 0.1, 0).unwrap();
        let m = init_model(&Architecture::softmax_regression(2, 2).unwrap(), 0);
        let cfg = TrainConfig { epochs: 0, ..TrainConfig::default() };
        assert_eq!(sgd_train(&m, &data, &cfg).unwrap(), m);
        let cfg = TrainConfig { lr: 0.0, ..TrainConfig::default() };
        assert_eq!(sgd_train(&m, &data, &cfg).unwrap(), m);
    }

    #[test]
    fn separable_blobs_are_learned() {
        let data = synth_blobs(2, 2, 100, 0.2, 11).unwrap();
        let m = init_model(&Architecture::softmax_regression(2, 2).unwrap(), 5);
        let cfg = TrainConfig { epochs: 20, lr: 0.1, batch_size: 16, seed: 1 };
        let trained = sgd_train(&m, &data, &cfg).unwrap();
        assert!(evaluate(&trained, &data).unwrap() > 0.95);
        assert_eq!(trained, sgd_train(&m, &data, &cfg).unwrap());
    }

    #[test]
    fn constant_model_has_full_attack_success() {
        let data = synth_blobs(3, 4, 5, 0.5, 2).unwrap();
        let mut m = FlatModel::zeros(Architecture::softmax_regression(4, 3).unwrap());
        // Bias of class 1 dominates every prediction.
        let n = m.params().len();
        m.params_mut()[n - 2] = 10.0;
        let pattern = BackdoorPattern::new(vec![(0, 1.0)], 1).unwrap();
        assert_eq!(attack_success_rate(&m, &data, &pattern).unwrap(), 1.0);
        assert!((evaluate(&m, &data).unwrap() - 1.0 / 3.0).abs() < 1e-12);
    }
}
