//! The local learner: a fully connected network with `tanh` hidden layers,
//! temperature-scaled label-smoothing cross-entropy, hand-written
//! backpropagation and mini-batch SGD with momentum.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::partition::ClientShard;
use crate::rng::RngStream;

/// `(in_dim, out_dim)` per dense layer, input to output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    layers: Vec<(usize, usize)>,
}

impl Layout {
    /// Layout for consecutive widths, e.g. `[16, 32, 10]`.
    pub fn from_widths(widths: &[usize]) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::config(
                "model.hidden",
                format!("invalid layer widths {widths:?}"),
            ));
        }
        Ok(Self {
            layers: widths.windows(2).map(|w| (w[0], w[1])).collect(),
        })
    }

    /// One hidden layer of width `hidden`.
    pub fn mlp(input: usize, hidden: usize, classes: usize) -> Result<Self> {
        Self::from_widths(&[input, hidden, classes])
    }

    pub fn layers(&self) -> &[(usize, usize)] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].0
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].1
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|(i, o)| i * o + o).sum()
    }

    fn offsets(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        self.layers.iter().scan(0, |off, &(i, o)| {
            let start = *off;
            *off += i * o + o;
            Some((start, i, o))
        })
    }
}

/// Flat parameter vector. Each layer stores its `in × out` weights row-major
/// followed by its `out` biases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    pub values: Vec<f64>,
    pub layout: Layout,
}

impl ParamVector {
    pub fn zeros(layout: &Layout) -> Self {
        Self {
            values: vec![0.0; layout.num_params()],
            layout: layout.clone(),
        }
    }

    pub fn from_values(layout: &Layout, values: Vec<f64>) -> Result<Self> {
        if values.len() != layout.num_params() {
            return Err(Error::Shape {
                expected: layout.num_params(),
                actual: values.len(),
            });
        }
        Ok(Self {
            values,
            layout: layout.clone(),
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub(crate) fn check_same_layout(&self, other: &ParamVector) -> Result<()> {
        if self.values.len() != other.values.len() {
            return Err(Error::Shape {
                expected: self.values.len(),
                actual: other.values.len(),
            });
        }
        Ok(())
    }

    pub fn squared_distance(&self, other: &ParamVector) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Logits are divided by this before the softmax.
    pub temperature: f64,
    /// Target is `(1 − s)·one_hot + s/K`.
    pub smoothing: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            temperature: 10.0,
            smoothing: 0.1,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::config("loss.temperature", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.smoothing) {
            return Err(Error::config("loss.smoothing", "must be in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Strength of the proximal pull towards the round's global model.
    /// Zero disables it.
    pub prox_mu: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 0.03,
            momentum: 0.9,
            weight_decay: 0.0,
            epochs: 10,
            batch_size: 10,
            prox_mu: 0.0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        // lr = 0 is accepted so that a no-op update can be expressed.
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config("opt.lr", "must be nonnegative"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("opt.momentum", "must be in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("opt.weight_decay", "must be nonnegative"));
        }
        if self.epochs == 0 {
            return Err(Error::config("opt.epochs", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("opt.batch", "must be at least 1"));
        }
        if !(self.prox_mu >= 0.0 && self.prox_mu.is_finite()) {
            return Err(Error::config("opt.prox_mu", "must be nonnegative"));
        }
        Ok(())
    }

    /// Optimizer steps taken on `n` samples: `E · ⌈n / B⌉`.
    pub fn steps_for(&self, n: usize) -> usize {
        self.epochs * n.div_ceil(self.batch_size)
    }
}

/// Fan-in scaled uniform weights `U(−1/√in, 1/√in)`, zero biases.
pub fn init_params(layout: &Layout, rng: &mut RngStream) -> ParamVector {
    let mut params = ParamVector::zeros(layout);
    for (start, fan_in, fan_out) in layout.offsets() {
        let bound = 1.0 / (fan_in as f64).sqrt();
        for w in &mut params.values[start..start + fan_in * fan_out] {
            *w = (2.0 * rng.uniform_f64() - 1.0) * bound;
        }
    }
    params
}

/// Per-layer activations for a batch; `acts[0]` is the input and the last
/// entry holds the logits.
fn forward_all(params: &ParamVector, features: &[f64]) -> Result<(usize, Vec<Vec<f64>>)> {
    let layout = &params.layout;
    let in_dim = layout.input_dim();
    if !features.len().is_multiple_of(in_dim) {
        return Err(Error::Shape {
            expected: in_dim,
            actual: features.len() % in_dim,
        });
    }
    let batch = features.len() / in_dim;
    let n_layers = layout.layers().len();
    let mut acts = Vec::with_capacity(n_layers + 1);
    acts.push(features.to_vec());

    for (l, (start, fan_in, fan_out)) in layout.offsets().enumerate() {
        let w = &params.values[start..start + fan_in * fan_out];
        let b = &params.values[start + fan_in * fan_out..start + fan_in * fan_out + fan_out];
        let input = &acts[l];
        let mut out = Vec::with_capacity(batch * fan_out);
        for r in 0..batch {
            let x = &input[r * fan_in..(r + 1) * fan_in];
            let mut z = b.to_vec();
            for (i, &xi) in x.iter().enumerate() {
                if xi == 0.0 {
                    continue;
                }
                let row = &w[i * fan_out..(i + 1) * fan_out];
                for (zj, &wij) in z.iter_mut().zip(row) {
                    *zj += xi * wij;
                }
            }
            out.extend(z);
        }
        if l + 1 < n_layers {
            out.iter_mut().for_each(|v| *v = v.tanh());
        }
        acts.push(out);
    }
    Ok((batch, acts))
}

/// Logits for a row-major batch of feature vectors, `batch × K`.
pub fn forward(params: &ParamVector, features: &[f64]) -> Result<Vec<f64>> {
    let (_, mut acts) = forward_all(params, features)?;
    Ok(acts.pop().unwrap_or_default())
}

/// Mean label-smoothing cross-entropy on `logits / temperature`, plus
/// `(prox_mu / 2)·‖θ − anchor‖²` when an anchor is given, and its exact
/// gradient with respect to every parameter.
pub fn loss_and_grad(
    params: &ParamVector,
    features: &[f64],
    labels: &[usize],
    loss_cfg: &LossConfig,
    prox_anchor: Option<&ParamVector>,
    prox_mu: f64,
) -> Result<(f64, ParamVector)> {
    if labels.is_empty() {
        return Err(Error::Data("loss on an empty batch".into()));
    }
    let (batch, acts) = forward_all(params, features)?;
    if batch != labels.len() {
        return Err(Error::Shape {
            expected: labels.len(),
            actual: batch,
        });
    }
    let layout = &params.layout;
    let k = layout.output_dim();
    let t = loss_cfg.temperature;
    let s = loss_cfg.smoothing;
    let inv_batch = 1.0 / batch as f64;

    // dL/dlogits, already divided by batch size.
    let logits = &acts[acts.len() - 1];
    let mut delta = vec![0.0; batch * k];
    let mut loss = 0.0;
    for r in 0..batch {
        let y = labels[r];
        if y >= k {
            return Err(Error::Data(format!("label {y} out of range for {k} classes")));
        }
        let z = &logits[r * k..(r + 1) * k];
        let max = z.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v / t));
        let log_norm = z.iter().map(|&v| (v / t - max).exp()).sum::<f64>().ln() + max;
        for j in 0..k {
            let log_p = z[j] / t - log_norm;
            let target = s / k as f64 + if j == y { 1.0 - s } else { 0.0 };
            loss -= target * log_p;
            delta[r * k + j] = (log_p.exp() - target) / t * inv_batch;
        }
    }
    loss *= inv_batch;

    let mut grad = ParamVector::zeros(layout);
    let offsets: Vec<_> = layout.offsets().collect();
    for (l, &(start, fan_in, fan_out)) in offsets.iter().enumerate().rev() {
        let input = &acts[l];
        let w_end = start + fan_in * fan_out;
        {
            let (gw, gb) = grad.values[start..w_end + fan_out].split_at_mut(fan_in * fan_out);
            for r in 0..batch {
                let d = &delta[r * fan_out..(r + 1) * fan_out];
                let x = &input[r * fan_in..(r + 1) * fan_in];
                for (i, &xi) in x.iter().enumerate() {
                    let row = &mut gw[i * fan_out..(i + 1) * fan_out];
                    for (g, &dj) in row.iter_mut().zip(d) {
                        *g += xi * dj;
                    }
                }
                for (g, &dj) in gb.iter_mut().zip(d) {
                    *g += dj;
                }
            }
        }
        if l == 0 {
            break;
        }
        // Back through the weights and the tanh of the previous layer.
        let w = &params.values[start..w_end];
        let mut prev = vec![0.0; batch * fan_in];
        for r in 0..batch {
            let d = &delta[r * fan_out..(r + 1) * fan_out];
            for i in 0..fan_in {
                let row = &w[i * fan_out..(i + 1) * fan_out];
                let back: f64 = row.iter().zip(d).map(|(a, b)| a * b).sum();
                let a = input[r * fan_in + i];
                prev[r * fan_in + i] = back * (1.0 - a * a);
            }
        }
        delta = prev;
    }

    if let Some(anchor) = prox_anchor {
        params.check_same_layout(anchor)?;
        if prox_mu > 0.0 {
            loss += 0.5 * prox_mu * params.squared_distance(anchor);
            for ((g, &p), &a) in grad.values.iter_mut().zip(&params.values).zip(&anchor.values) {
                *g += prox_mu * (p - a);
            }
        }
    }
    Ok((loss, grad))
}

/// Result of one client's local training.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalUpdate {
    pub params: ParamVector,
    /// Optimizer steps taken, `E · ⌈|D_k| / B⌉`.
    pub steps: usize,
}

/// `E` epochs of mini-batch SGD with momentum on the shard, starting from
/// `global`. Features come from `dataset` by index, labels from the shard.
/// With `opt.prox_mu > 0` every step also pulls towards `global`.
pub fn local_update(
    global: &ParamVector,
    shard: &ClientShard,
    dataset: &Dataset,
    opt: &OptimizerConfig,
    loss_cfg: &LossConfig,
    rng: &mut RngStream,
) -> Result<LocalUpdate> {
    if shard.is_empty() {
        return Err(Error::EmptyShard(shard.client_id));
    }
    let dim = dataset.feature_dim();
    let local_features = dataset.gather_features(&shard.indices);
    let mut params = global.clone();
    let mut velocity = vec![0.0; params.len()];
    let anchor = (opt.prox_mu > 0.0).then_some(global);

    let mut order: Vec<usize> = (0..shard.len()).collect();
    let mut batch_x = Vec::with_capacity(opt.batch_size * dim);
    let mut batch_y = Vec::with_capacity(opt.batch_size);
    let mut steps = 0;
    for _ in 0..opt.epochs {
        rng.shuffle(&mut order);
        for chunk in order.chunks(opt.batch_size) {
            batch_x.clear();
            batch_y.clear();
            for &i in chunk {
                batch_x.extend_from_slice(&local_features[i * dim..(i + 1) * dim]);
                batch_y.push(shard.labels[i]);
            }
            let (_, grad) = loss_and_grad(&params, &batch_x, &batch_y, loss_cfg, anchor, opt.prox_mu)?;
            for ((p, v), g) in params.values.iter_mut().zip(&mut velocity).zip(&grad.values) {
                let g = g + opt.weight_decay * *p;
                *v = opt.momentum * *v + g;
                *p -= opt.lr * *v;
            }
            steps += 1;
        }
    }
    if !params.is_finite() {
        return Err(Error::Data(format!(
            "local training of client {} produced non-finite parameters",
            shard.client_id
        )));
    }
    Ok(LocalUpdate { params, steps })
}

/// Index of the largest logit, lowest index on ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Fraction of samples whose arg-max logit equals the label.
pub fn evaluate(params: &ParamVector, data: &Dataset) -> Result<f64> {
    if data.n_samples() == 0 {
        return Err(Error::Evaluation("cannot evaluate on an empty dataset".into()));
    }
    let logits = forward(params, data.features())?;
    let k = params.layout.output_dim();
    let correct = logits
        .chunks(k)
        .zip(data.labels())
        .filter(|(row, &y)| argmax(row) == y)
        .count();
    Ok(correct as f64 / data.n_samples() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_stream;

    fn toy_layout() -> Layout {
        Layout::mlp(3, 4, 3).unwrap()
    }

    #[test]
    fn layout_param_count() {
        let layout = Layout::from_widths(&[16, 32, 10]).unwrap();
        assert_eq!(layout.num_params(), 874);
        assert_eq!(init_params(&layout, &mut derive_stream(1, "init")).len(), 874);
    }

    #[test]
    fn init_is_reproducible_and_stream_dependent() {
        let layout = toy_layout();
        let a = init_params(&layout, &mut derive_stream(1, "init"));
        let b = init_params(&layout, &mut derive_stream(1, "init"));
        let c = init_params(&layout, &mut derive_stream(2, "init"));
        assert_eq!(a, b);
        assert_ne!(a, c);
        // Biases start at zero.
        assert!(a.values[12..16].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_weights_give_zero_logits() {
        let p = ParamVector::zeros(&toy_layout());
        let logits = forward(&p, &[1.0, -2.0, 3.0, 0.5, 0.5, 0.5]).unwrap();
        assert_eq!(logits, vec![0.0; 6]);
    }

    #[test]
    fn batching_is_consistent() {
        let p = init_params(&toy_layout(), &mut derive_stream(4, "init"));
        let x = [0.1, 0.2, 0.3, -1.0, 0.0, 2.0, 5.0, -3.0, 0.25];
        let all = forward(&p, &x).unwrap();
        for r in 0..3 {
            let one = forward(&p, &x[r * 3..(r + 1) * 3]).unwrap();
            assert_eq!(one, all[r * 3..(r + 1) * 3]);
        }
        assert!(all.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn forward_rejects_bad_width() {
        let p = ParamVector::zeros(&toy_layout());
        assert!(matches!(forward(&p, &[1.0, 2.0]), Err(Error::Shape { .. })));
    }

    #[test]
    fn uniform_logits_loss_is_log_k() {
        let layout = Layout::mlp(4, 5, 10).unwrap();
        let p = ParamVector::zeros(&layout);
        let cfg = LossConfig {
            temperature: 1.0,
            smoothing: 0.0,
        };
        let (loss, _) = loss_and_grad(&p, &[0.3; 8], &[2, 7], &cfg, None, 0.0).unwrap();
        assert!((loss - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn prox_term_vanishes_at_anchor() {
        let p = init_params(&toy_layout(), &mut derive_stream(5, "init"));
        let cfg = LossConfig::default();
        let x = [0.2, -0.4, 1.0];
        let (plain, g0) = loss_and_grad(&p, &x, &[1], &cfg, None, 0.0).unwrap();
        let (prox, g1) = loss_and_grad(&p, &x, &[1], &cfg, Some(&p), 0.001).unwrap();
        assert_eq!(plain, prox);
        assert_eq!(g0, g1);
    }

    #[test]
    fn zero_lr_is_identity() {
        let layout = toy_layout();
        let global = init_params(&layout, &mut derive_stream(6, "init"));
        let ds = Dataset::new(vec![0.5; 12], vec![0, 1, 2, 1], 3, 3).unwrap();
        let shard = ClientShard {
            client_id: 0,
            indices: vec![0, 1, 2, 3],
            labels: vec![0, 1, 2, 1],
        };
        let opt = OptimizerConfig {
            lr: 0.0,
            ..Default::default()
        };
        let out = local_update(&global, &shard, &ds, &opt, &LossConfig::default(), &mut derive_stream(1, "t")).unwrap();
        assert_eq!(out.params, global);
        assert_eq!(out.steps, 10);
    }

    #[test]
    fn step_count_counts_short_batches() {
        let opt = OptimizerConfig {
            epochs: 3,
            batch_size: 10,
            ..Default::default()
        };
        assert_eq!(opt.steps_for(25), 9);
        assert_eq!(opt.steps_for(10), 3);
    }

    #[test]
    fn empty_shard_is_signalled() {
        let layout = toy_layout();
        let ds = Dataset::new(vec![], vec![], 3, 3).unwrap();
        let shard = ClientShard {
            client_id: 4,
            indices: vec![],
            labels: vec![],
        };
        let err = local_update(
            &ParamVector::zeros(&layout),
            &shard,
            &ds,
            &OptimizerConfig::default(),
            &LossConfig::default(),
            &mut derive_stream(1, "t"),
        )
        .unwrap_err();
        assert!(matches!(err, Error::EmptyShard(4)));
    }

    #[test]
    fn evaluate_tie_rule_and_perfect_fit() {
        let layout = Layout::mlp(2, 2, 4).unwrap();
        let zero = ParamVector::zeros(&layout);
        let ds = Dataset::new(vec![1.0; 8 * 2], vec![0, 1, 2, 3, 0, 0, 3, 2], 2, 4).unwrap();
        // Zero logits everywhere: every prediction is class 0.
        assert!((evaluate(&zero, &ds).unwrap() - 3.0 / 8.0).abs() < 1e-15);

        // Single linear layer that reads class off one-hot features.
        let linear = Layout::from_widths(&[4, 4]).unwrap();
        let mut values = vec![0.0; linear.num_params()];
        for i in 0..4 {
            values[i * 4 + i] = 1.0;
        }
        let p = ParamVector::from_values(&linear, values).unwrap();
        let mut feats = vec![0.0; 16];
        for i in 0..4 {
            feats[i * 4 + i] = 1.0;
        }
        let ds = Dataset::new(feats, vec![0, 1, 2, 3], 4, 4).unwrap();
        assert_eq!(evaluate(&p, &ds).unwrap(), 1.0);

        let empty = Dataset::new(vec![], vec![], 4, 4).unwrap();
        assert!(matches!(evaluate(&p, &empty), Err(Error::Evaluation(_))));
    }
}
