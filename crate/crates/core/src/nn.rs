//! Minimal feed-forward network over flat parameter vectors.
//!
//! Models are MLPs with ReLU hidden activations and a linear output layer;
//! the training loss is mean softmax cross-entropy. All parameters of a
//! model live in a single flat `f64` vector so that aggregation rules,
//! attacks, and mask training can treat a model as one point in R^V.
//!
//! Everything here is a pure function of its inputs: identical inputs give
//! bit-identical outputs, and nothing holds shared mutable state.

use std::ops::Range;
use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng;

/// Shapes of the dense layers of one model, plus offsets into the flat
/// parameter vector.
///
/// Layer `i` maps `in_dim` features to `out_dim` activations and occupies
/// `[offsets[i], offsets[i+1])` of the vector: first the row-major
/// `out_dim x in_dim` weight matrix, then `out_dim` biases. The offsets
/// partition `[0, total)` exactly.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerLayout {
    pairs: Vec<(usize, usize)>,
    offsets: Vec<usize>,
}

impl LayerLayout {
    /// Build a layout from `(in_dim, out_dim)` pairs.
    ///
    /// Consecutive layers must chain: `pairs[i].1 == pairs[i+1].0`.
    pub fn new(pairs: Vec<(usize, usize)>) -> Result<Arc<Self>> {
        if pairs.is_empty() {
            return Err(Error::Config("layout needs at least one layer".into()));
        }
        for (i, &(_, out)) in pairs.iter().enumerate() {
            if out == 0 {
                return Err(Error::Config(format!("layer {i} has output_dim 0")));
            }
        }
        for i in 1..pairs.len() {
            if pairs[i - 1].1 != pairs[i].0 {
                return Err(Error::Config(format!(
                    "layer {} input_dim {} does not match layer {} output_dim {}",
                    i,
                    pairs[i].0,
                    i - 1,
                    pairs[i - 1].1
                )));
            }
        }
        let mut offsets = Vec::with_capacity(pairs.len() + 1);
        let mut total = 0usize;
        offsets.push(0);
        for &(ind, outd) in &pairs {
            total += ind * outd + outd;
            offsets.push(total);
        }
        Ok(Arc::new(LayerLayout { pairs, offsets }))
    }

    /// Convenience constructor for an MLP `input -> hidden... -> classes`.
    pub fn mlp(input: usize, hidden: &[usize], classes: usize) -> Result<Arc<Self>> {
        let mut pairs = Vec::with_capacity(hidden.len() + 1);
        let mut prev = input;
        for &h in hidden {
            pairs.push((prev, h));
            prev = h;
        }
        pairs.push((prev, classes));
        Self::new(pairs)
    }

    /// Total number of parameters.
    pub fn total(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.pairs.len()
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    /// Flat-vector range of layer `i` (weights followed by biases).
    pub fn layer_range(&self, i: usize) -> Range<usize> {
        self.offsets[i]..self.offsets[i + 1]
    }

    /// Feature dimension expected by the first layer.
    pub fn input_dim(&self) -> usize {
        self.pairs[0].0
    }

    /// Number of output classes.
    pub fn output_dim(&self) -> usize {
        self.pairs.last().unwrap().1
    }
}

/// A flat parameter vector tied to a layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
    layout: Arc<LayerLayout>,
}

impl ParamVector {
    /// Wrap `values` for `layout`, checking length and finiteness.
    pub fn new(values: Vec<f64>, layout: Arc<LayerLayout>) -> Result<Self> {
        if values.len() != layout.total() {
            return Err(Error::Config(format!(
                "parameter vector has {} values, layout expects {}",
                values.len(),
                layout.total()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Config(format!(
                "parameter vector has non-finite value at index {i}"
            )));
        }
        Ok(ParamVector { values, layout })
    }

    pub fn zeros(layout: Arc<LayerLayout>) -> Self {
        ParamVector {
            values: vec![0.0; layout.total()],
            layout,
        }
    }

    pub(crate) fn from_raw(values: Vec<f64>, layout: Arc<LayerLayout>) -> Self {
        debug_assert_eq!(values.len(), layout.total());
        ParamVector { values, layout }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn layout(&self) -> &Arc<LayerLayout> {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Elementwise `self - other`.
    pub fn sub(&self, other: &ParamVector) -> Result<ParamVector> {
        check_layouts(self, other)?;
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a - b)
            .collect();
        Ok(ParamVector::from_raw(values, self.layout.clone()))
    }

    /// Elementwise `self + scale * other`.
    pub fn add_scaled(&self, other: &ParamVector, scale: f64) -> Result<ParamVector> {
        check_layouts(self, other)?;
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a + scale * b)
            .collect();
        Ok(ParamVector::from_raw(values, self.layout.clone()))
    }

    pub fn scale(&self, factor: f64) -> ParamVector {
        let values = self.values.iter().map(|v| v * factor).collect();
        ParamVector::from_raw(values, self.layout.clone())
    }

    pub fn dot(&self, other: &ParamVector) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a * b)
            .sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    /// Cosine similarity; 0 when either vector has zero norm.
    pub fn cosine(&self, other: &ParamVector) -> f64 {
        let na = self.norm();
        let nb = other.norm();
        if na == 0.0 || nb == 0.0 {
            0.0
        } else {
            self.dot(other) / (na * nb)
        }
    }
}

pub(crate) fn check_layouts(a: &ParamVector, b: &ParamVector) -> Result<()> {
    if a.layout != b.layout {
        return Err(Error::Config("parameter vectors have different layouts".into()));
    }
    Ok(())
}

/// Coordinate-wise mean of a nonempty set of vectors sharing a layout.
pub fn mean_vector(vectors: &[ParamVector]) -> Result<ParamVector> {
    let first = vectors
        .first()
        .ok_or_else(|| Error::Usage("mean of empty vector set".into()))?;
    let mut acc = vec![0.0; first.len()];
    for v in vectors {
        check_layouts(first, v)?;
        for (a, x) in acc.iter_mut().zip(v.values()) {
            *a += x;
        }
    }
    let n = vectors.len() as f64;
    for a in &mut acc {
        *a /= n;
    }
    Ok(ParamVector::from_raw(acc, first.layout.clone()))
}

/// A batch of feature rows with class labels.
#[derive(Debug, Clone)]
pub struct Batch {
    features: Vec<Vec<f64>>,
    labels: Vec<usize>,
}

impl Batch {
    pub fn new(features: Vec<Vec<f64>>, labels: Vec<usize>) -> Result<Self> {
        if features.is_empty() {
            return Err(Error::Usage("batch must hold at least one sample".into()));
        }
        if features.len() != labels.len() {
            return Err(Error::Config(format!(
                "batch has {} feature rows but {} labels",
                features.len(),
                labels.len()
            )));
        }
        let dim = features[0].len();
        if features.iter().any(|f| f.len() != dim) {
            return Err(Error::Config("batch feature rows have mixed dimensions".into()));
        }
        Ok(Batch { features, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.features[0].len()
    }

    pub fn features(&self) -> &[Vec<f64>] {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }
}

/// Initialize parameters with the uniform fan-in rule.
///
/// Weights and biases of a layer are drawn from
/// `U(-1/sqrt(in_dim), +1/sqrt(in_dim))`; a layer with `in_dim == 0`
/// (bias-only) uses limit 1.0.
pub fn init_params(layout: &Arc<LayerLayout>, seed: u64) -> ParamVector {
    let mut rng = rng::stream(seed, "nn/init");
    let mut values = vec![0.0; layout.total()];
    for (i, &(ind, _)) in layout.pairs().iter().enumerate() {
        let limit = if ind == 0 { 1.0 } else { 1.0 / (ind as f64).sqrt() };
        for v in &mut values[layout.layer_range(i)] {
            *v = rng.random_range(-limit..limit);
        }
    }
    ParamVector::from_raw(values, layout.clone())
}

fn check_batch(params: &ParamVector, batch: &Batch) -> Result<()> {
    if batch.feature_dim() != params.layout().input_dim() {
        return Err(Error::Config(format!(
            "batch feature dim {} does not match model input dim {}",
            batch.feature_dim(),
            params.layout().input_dim()
        )));
    }
    Ok(())
}

/// Activations of every layer for one sample; `acts[0]` is the input row,
/// `acts[L]` holds the logits.
fn forward_sample(params: &ParamVector, input: &[f64]) -> Vec<Vec<f64>> {
    let layout = params.layout();
    let values = params.values();
    let num_layers = layout.num_layers();
    let mut acts = Vec::with_capacity(num_layers + 1);
    acts.push(input.to_vec());
    for l in 0..num_layers {
        let (ind, outd) = layout.pairs()[l];
        let base = layout.layer_range(l).start;
        let bias_base = base + ind * outd;
        let prev = &acts[l];
        let mut out = vec![0.0; outd];
        for (o, out_v) in out.iter_mut().enumerate() {
            let mut sum = values[bias_base + o];
            let row = base + o * ind;
            for (j, &x) in prev.iter().enumerate() {
                sum = values[row + j].mul_add(x, sum);
            }
            // Hidden layers are ReLU; the last layer stays linear.
            *out_v = if l + 1 < num_layers { sum.max(0.0) } else { sum };
        }
        acts.push(out);
    }
    acts
}

/// Run the model over a batch, returning one logit row per sample.
pub fn forward(params: &ParamVector, batch: &Batch) -> Result<Vec<Vec<f64>>> {
    check_batch(params, batch)?;
    Ok(batch
        .features()
        .iter()
        .map(|row| forward_sample(params, row).pop().unwrap())
        .collect())
}

/// Numerically stable log-softmax pieces: (softmax probabilities, logsumexp).
fn softmax_parts(logits: &[f64]) -> (Vec<f64>, f64) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let probs = exps.iter().map(|e| e / sum).collect();
    (probs, max + sum.ln())
}

/// Mean softmax cross-entropy over the batch and its exact gradient.
pub fn loss_and_grad(params: &ParamVector, batch: &Batch) -> Result<(f64, ParamVector)> {
    check_batch(params, batch)?;
    let layout = params.layout().clone();
    let values = params.values();
    let classes = layout.output_dim();
    let num_layers = layout.num_layers();
    let inv_batch = 1.0 / batch.len() as f64;

    let mut grad = vec![0.0; layout.total()];
    let mut loss = 0.0;

    for (row, &label) in batch.features().iter().zip(batch.labels()) {
        if label >= classes {
            return Err(Error::Usage(format!(
                "label {label} out of range for {classes} classes"
            )));
        }
        let acts = forward_sample(params, row);
        for (l, act) in acts.iter().enumerate().skip(1) {
            if act.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric {
                    layer: l - 1,
                    message: "non-finite activation during forward pass".into(),
                });
            }
        }
        let logits = acts.last().unwrap();
        let (probs, logsumexp) = softmax_parts(logits);
        loss += (logsumexp - logits[label]) * inv_batch;

        // d(loss)/d(logits), already scaled by 1/batch.
        let mut d_out: Vec<f64> = probs.iter().map(|p| p * inv_batch).collect();
        d_out[label] -= inv_batch;

        for l in (0..num_layers).rev() {
            let (ind, outd) = layout.pairs()[l];
            let base = layout.layer_range(l).start;
            let bias_base = base + ind * outd;
            let input = &acts[l];
            let mut d_in = vec![0.0; ind];
            for o in 0..outd {
                let dz = d_out[o];
                if dz == 0.0 {
                    continue;
                }
                grad[bias_base + o] += dz;
                let row_base = base + o * ind;
                for (j, &x) in input.iter().enumerate() {
                    grad[row_base + j] += dz * x;
                    d_in[j] = values[row_base + j].mul_add(dz, d_in[j]);
                }
            }
            if l > 0 {
                // ReLU gate: zero where the activation was clamped.
                for (d, &a) in d_in.iter_mut().zip(acts[l].iter()) {
                    if a <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            d_out = d_in;
        }
    }

    if !loss.is_finite() {
        return Err(Error::Numeric {
            layer: num_layers - 1,
            message: "non-finite loss".into(),
        });
    }
    Ok((loss, ParamVector::from_raw(grad, layout)))
}

/// One SGD update: `params - lr * grad`, as a new vector.
pub fn sgd_step(params: &ParamVector, grad: &ParamVector, lr: f64) -> Result<ParamVector> {
    check_layouts(params, grad)?;
    params.add_scaled(grad, -lr)
}

/// Fraction of argmax-correct predictions; ties resolve to the lowest class.
pub fn evaluate(params: &ParamVector, dataset: &Batch) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::Usage("cannot evaluate on an empty dataset".into()));
    }
    let logits = forward(params, dataset)?;
    let correct = logits
        .iter()
        .zip(dataset.labels())
        .filter(|(row, &label)| argmax(row) == label)
        .count();
    Ok(correct as f64 / dataset.len() as f64)
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_batch(dim: usize, classes: usize, n: usize, seed: u64) -> Batch {
        let mut rng = rng::stream(seed, "test/batch");
        let features = (0..n)
            .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let labels = (0..n).map(|_| rng.random_range(0..classes)).collect();
        Batch::new(features, labels).unwrap()
    }

    #[test]
    fn zero_weights_give_zero_logits() {
        let layout = LayerLayout::mlp(3, &[4], 2).unwrap();
        let params = ParamVector::zeros(layout);
        let batch = small_batch(3, 2, 5, 0);
        for row in forward(&params, &batch).unwrap() {
            assert!(row.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let layout = LayerLayout::new(vec![(3, 3)]).unwrap();
        let mut values = vec![0.0; layout.total()];
        for i in 0..3 {
            values[i * 3 + i] = 1.0;
        }
        let params = ParamVector::new(values, layout).unwrap();
        let batch = Batch::new(vec![vec![0.5, -1.25, 2.0]], vec![0]).unwrap();
        let logits = forward(&params, &batch).unwrap();
        assert_eq!(logits[0], vec![0.5, -1.25, 2.0]);
    }

    /// Independent reference: plain dense matmul chain with explicit loops,
    /// kept free of the layout/offset machinery used by `forward`.
    fn reference_forward(
        pairs: &[(usize, usize)],
        values: &[f64],
        input: &[f64],
    ) -> Vec<f64> {
        let mut x = input.to_vec();
        let mut off = 0;
        for (li, &(ind, outd)) in pairs.iter().enumerate() {
            let w = &values[off..off + ind * outd];
            let b = &values[off + ind * outd..off + ind * outd + outd];
            off += ind * outd + outd;
            let mut y = vec![0.0; outd];
            for o in 0..outd {
                let mut s = b[o];
                for j in 0..ind {
                    s += w[o * ind + j] * x[j];
                }
                y[o] = if li + 1 < pairs.len() { s.max(0.0) } else { s };
            }
            x = y;
        }
        x
    }

    #[test]
    fn forward_matches_dense_matmul_reference() {
        let layout = LayerLayout::mlp(2, &[4], 3).unwrap();
        let params = init_params(&layout, 99);
        let batch = small_batch(2, 3, 6, 1);
        let logits = forward(&params, &batch).unwrap();
        for (row, expect) in batch.features().iter().zip(&logits) {
            let reference = reference_forward(layout.pairs(), params.values(), row);
            for (a, b) in expect.iter().zip(&reference) {
                assert!((a - b).abs() < 1e-12, "forward {a} vs reference {b}");
            }
        }
    }

    #[test]
    fn uniform_logits_loss_is_ln_c() {
        // Zero weights make all logits equal, so the loss is ln(C).
        for classes in [2usize, 3, 7] {
            let layout = LayerLayout::mlp(4, &[], classes).unwrap();
            let params = ParamVector::zeros(layout);
            let batch = small_batch(4, classes, 9, 3);
            let (loss, _) = loss_and_grad(&params, &batch).unwrap();
            assert!((loss - (classes as f64).ln()).abs() < 1e-12);
        }
    }

    fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
        analytic
            .iter()
            .zip(numeric)
            .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-6))
            .fold(0.0, f64::max)
    }

    #[test]
    fn gradient_matches_central_differences() {
        let layout = LayerLayout::mlp(2, &[4], 3).unwrap();
        let params = init_params(&layout, 7);
        let batch = small_batch(2, 3, 8, 11);
        let (_, grad) = loss_and_grad(&params, &batch).unwrap();

        let eps = 1e-5;
        let mut numeric = vec![0.0; params.len()];
        for i in 0..params.len() {
            let mut plus = params.values().to_vec();
            plus[i] += eps;
            let mut minus = params.values().to_vec();
            minus[i] -= eps;
            let lp = loss_and_grad(
                &ParamVector::new(plus, layout.clone()).unwrap(),
                &batch,
            )
            .unwrap()
            .0;
            let lm = loss_and_grad(
                &ParamVector::new(minus, layout.clone()).unwrap(),
                &batch,
            )
            .unwrap()
            .0;
            numeric[i] = (lp - lm) / (2.0 * eps);
        }
        let err = max_relative_error(grad.values(), &numeric);
        assert!(err <= 1e-5, "max relative error {err}");
    }

    #[test]
    fn duplicating_batch_leaves_loss_and_grad_unchanged() {
        let layout = LayerLayout::mlp(3, &[5], 2).unwrap();
        let params = init_params(&layout, 21);
        let batch = small_batch(3, 2, 4, 5);
        let doubled = Batch::new(
            [batch.features(), batch.features()].concat(),
            [batch.labels(), batch.labels()].concat(),
        )
        .unwrap();
        let (l1, g1) = loss_and_grad(&params, &batch).unwrap();
        let (l2, g2) = loss_and_grad(&params, &doubled).unwrap();
        assert!((l1 - l2).abs() < 1e-12);
        for (a, b) in g1.values().iter().zip(g2.values()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_is_positive_for_finite_logits() {
        for seed in 0..10 {
            let layout = LayerLayout::mlp(3, &[4], 3).unwrap();
            let params = init_params(&layout, seed);
            let batch = small_batch(3, 3, 6, seed + 100);
            let (loss, _) = loss_and_grad(&params, &batch).unwrap();
            assert!(loss > 0.0);
        }
    }

    #[test]
    fn sgd_step_basics() {
        let layout = LayerLayout::mlp(2, &[], 2).unwrap();
        let params = init_params(&layout, 1);
        let grad = init_params(&layout, 2);

        let unchanged = sgd_step(&params, &grad, 0.0).unwrap();
        assert_eq!(unchanged, params);

        let zero = ParamVector::zeros(layout.clone());
        let negated = sgd_step(&zero, &grad, 1.0).unwrap();
        for (a, g) in negated.values().iter().zip(grad.values()) {
            assert_eq!(*a, -g);
        }
    }

    #[test]
    fn two_sgd_steps_compose_additively() {
        let layout = LayerLayout::mlp(2, &[3], 2).unwrap();
        let params = init_params(&layout, 5);
        let g1 = init_params(&layout, 6);
        let g2 = init_params(&layout, 7);
        let lr = 0.3;

        let stepped = sgd_step(&sgd_step(&params, &g1, lr).unwrap(), &g2, lr).unwrap();
        let combined = sgd_step(&params, &g1.add_scaled(&g2, 1.0).unwrap(), lr).unwrap();
        for (a, b) in stepped.values().iter().zip(combined.values()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn evaluate_constant_predictor() {
        // Bias-only model that always predicts class 1.
        let layout = LayerLayout::mlp(2, &[], 3).unwrap();
        let mut values = vec![0.0; layout.total()];
        values[layout.total() - 2] = 5.0; // bias of class 1
        let params = ParamVector::new(values, layout).unwrap();

        let all_ones = Batch::new(vec![vec![0.0, 0.0]; 4], vec![1; 4]).unwrap();
        assert_eq!(evaluate(&params, &all_ones).unwrap(), 1.0);

        let none = Batch::new(vec![vec![0.0, 0.0]; 4], vec![2; 4]).unwrap();
        assert_eq!(evaluate(&params, &none).unwrap(), 0.0);
    }

    #[test]
    fn evaluate_rejects_empty_dataset() {
        let layout = LayerLayout::mlp(2, &[], 2).unwrap();
        let params = ParamVector::zeros(layout);
        assert!(Batch::new(vec![], vec![]).is_err());
        let _ = params;
    }

    #[test]
    fn random_model_near_chance_on_balanced_data() {
        // 3 balanced classes, random features and random model: exact
        // binomial tails at p=1/3 put 100-sample accuracy inside
        // [0.15, 0.55] with overwhelming probability per seed.
        let layout = LayerLayout::mlp(4, &[8], 3).unwrap();
        let mut labels = Vec::new();
        for c in 0..3 {
            labels.extend(std::iter::repeat_n(c, 34));
        }
        labels.truncate(100);
        for seed in 0..20u64 {
            let params = init_params(&layout, seed);
            let mut rng = rng::stream(seed, "test/eval");
            let features = (0..100)
                .map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect();
            let batch = Batch::new(features, labels.clone()).unwrap();
            let acc = evaluate(&params, &batch).unwrap();
            assert!((0.15..=0.55).contains(&acc), "seed {seed} accuracy {acc}");
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let layout = LayerLayout::mlp(3, &[6], 4).unwrap();
        let params = init_params(&layout, 13);
        let batch = small_batch(3, 4, 5, 17);
        let a = forward(&params, &batch).unwrap();
        let b = forward(&params, &batch).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn shape_mismatch_is_config_error() {
        let layout = LayerLayout::mlp(3, &[4], 2).unwrap();
        let params = ParamVector::zeros(layout);
        let batch = small_batch(5, 2, 2, 0);
        assert!(matches!(forward(&params, &batch), Err(Error::Config(_))));
    }

    #[test]
    fn out_of_range_label_is_usage_error() {
        let layout = LayerLayout::mlp(2, &[], 2).unwrap();
        let params = ParamVector::zeros(layout);
        let batch = Batch::new(vec![vec![0.0, 0.0]], vec![5]).unwrap();
        assert!(matches!(loss_and_grad(&params, &batch), Err(Error::Usage(_))));
    }
}
