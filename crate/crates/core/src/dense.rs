//! The dense tower: a ReLU feed-forward network with a logistic output,
//! mean binary cross-entropy loss, AUC, optimizers and a central-difference
//! gradient checker.
//!
//! Everything is generic over the float type so the same forward/backward
//! code runs in `f32` for training and in `f64` for gradient checks.
//! Reductions over samples run in an explicit, caller-visible order so
//! replicas and permuted batches can be compared bit-for-bit.

use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Clamp applied to probabilities inside the loss.
pub const BCE_EPS: f64 = 1e-7;

/// Row-major matrix, one row per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Float> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Config("ragged rows".into()));
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data: rows.iter().flatten().copied().collect(),
        })
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn cast<U: Float>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| U::from(v).unwrap()).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer<T> {
    /// `out x in`, row-major.
    pub weight: Vec<T>,
    pub bias: Vec<T>,
    pub fan_in: usize,
    pub fan_out: usize,
}

/// Feed-forward network `dims[0] -> ... -> 1`; ReLU on hidden layers,
/// logistic on the output.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseModel<T> {
    pub layers: Vec<Layer<T>>,
    /// Bumped by every parameter update; forward caches remember it.
    pub version: u64,
}

/// Shape-compatible parameter gradients of a [`DenseModel`].
#[derive(Clone, Debug, PartialEq)]
pub struct DenseGrads<T> {
    pub layers: Vec<Layer<T>>,
}

/// Result of a backward pass: parameter gradients and the per-sample
/// gradient of the mean loss with respect to the network input.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientBundle<T> {
    pub dense: DenseGrads<T>,
    pub input: Matrix<T>,
}

/// Activations kept from the forward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache<T> {
    /// `activations[0]` is the input; `activations[l + 1]` the output of
    /// layer `l` after its nonlinearity (the last one holds probabilities).
    pub activations: Vec<Matrix<T>>,
    model_version: u64,
    dims: Vec<usize>,
}

impl<T: Float> DenseModel<T> {
    /// Uniform Glorot initialization from a seed.
    pub fn new(dims: &[usize], seed: u64) -> Result<Self> {
        validate_dims(dims)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = dims
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                Layer {
                    weight: (0..fan_in * fan_out)
                        .map(|_| T::from(rng.gen_range(-bound..bound)).unwrap())
                        .collect(),
                    bias: vec![T::zero(); fan_out],
                    fan_in,
                    fan_out,
                }
            })
            .collect();
        Ok(Self { layers, version: 0 })
    }

    pub fn zeros(dims: &[usize]) -> Result<Self> {
        validate_dims(dims)?;
        Ok(Self {
            layers: dims
                .windows(2)
                .map(|w| Layer {
                    weight: vec![T::zero(); w[0] * w[1]],
                    bias: vec![T::zero(); w[1]],
                    fan_in: w[0],
                    fan_out: w[1],
                })
                .collect(),
            version: 0,
        })
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut dims = vec![self.layers[0].fan_in];
        dims.extend(self.layers.iter().map(|l| l.fan_out));
        dims
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn cast<U: Float>(&self) -> DenseModel<U> {
        DenseModel {
            layers: self.layers.iter().map(cast_layer).collect(),
            version: self.version,
        }
    }

    /// Parameters flattened layer by layer as `weight ++ bias`.
    pub fn flatten(&self) -> Vec<T> {
        flatten_layers(&self.layers)
    }

    pub fn load_flat(&mut self, flat: &[T]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::Config(format!(
                "flat parameter length {} != {}",
                flat.len(),
                self.param_count()
            )));
        }
        unflatten_into(&mut self.layers, flat);
        self.version += 1;
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().chain(&l.bias).all(|v| v.is_finite()))
    }

    pub fn forward(&self, input: &Matrix<T>) -> Result<(Vec<T>, ForwardCache<T>)> {
        if input.cols != self.input_dim() {
            return Err(Error::Config(format!(
                "batch width {} does not match model input dim {}",
                input.cols,
                self.input_dim()
            )));
        }
        let last = self.layers.len() - 1;
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(input.clone());
        for (l, layer) in self.layers.iter().enumerate() {
            let prev = activations.last().unwrap();
            let mut out = Matrix::zeros(prev.rows, layer.fan_out);
            for i in 0..prev.rows {
                let a = prev.row(i);
                let o_row = out.row_mut(i);
                for (o, dst) in o_row.iter_mut().enumerate() {
                    let w = &layer.weight[o * layer.fan_in..(o + 1) * layer.fan_in];
                    let mut acc = layer.bias[o];
                    for (&wk, &ak) in w.iter().zip(a) {
                        acc = acc + wk * ak;
                    }
                    *dst = if l == last {
                        logistic(acc)
                    } else {
                        acc.max(T::zero())
                    };
                }
            }
            activations.push(out);
        }
        let predictions = activations.last().unwrap().data.clone();
        Ok((
            predictions,
            ForwardCache {
                activations,
                model_version: self.version,
                dims: self.dims(),
            },
        ))
    }

    /// Gradient of the mean BCE loss; samples accumulate in row order.
    pub fn backward(&self, cache: &ForwardCache<T>, labels: &[T]) -> Result<GradientBundle<T>> {
        let rows = cache.activations.first().map_or(0, |a| a.rows);
        let order: Vec<usize> = (0..rows).collect();
        self.backward_ordered(cache, labels, &order)
    }

    /// Like [`Self::backward`] but accumulating parameter gradients over
    /// samples in `order`, which must be a permutation of the rows.
    pub fn backward_ordered(
        &self,
        cache: &ForwardCache<T>,
        labels: &[T],
        order: &[usize],
    ) -> Result<GradientBundle<T>> {
        self.backward_with(cache, labels, order, |_, _| {})
    }

    /// Backward pass that hands each layer's gradient to `on_layer` as soon
    /// as it is final (last layer first), so communication can overlap the
    /// remaining computation.
    pub fn backward_with(
        &self,
        cache: &ForwardCache<T>,
        labels: &[T],
        order: &[usize],
        mut on_layer: impl FnMut(usize, &Layer<T>),
    ) -> Result<GradientBundle<T>> {
        if cache.model_version != self.version || cache.dims != self.dims() {
            return Err(Error::Internal(
                "forward cache was produced by a different model state".into(),
            ));
        }
        let rows = cache.activations[0].rows;
        if labels.len() != rows || order.len() != rows {
            return Err(Error::Internal(format!(
                "cache holds {rows} samples but got {} labels / {} order entries",
                labels.len(),
                order.len()
            )));
        }
        if rows == 0 {
            return Err(Error::precondition("backward on an empty batch"));
        }
        let scale = T::one() / T::from(rows).unwrap();
        let probs = cache.activations.last().unwrap();
        // dL/dz at the output: (p - y) / b
        let mut delta = Matrix::zeros(rows, 1);
        for i in 0..rows {
            delta.data[i] = (probs.data[i] - labels[i]) * scale;
        }
        let mut grads: Vec<Layer<T>> = Vec::with_capacity(self.layers.len());
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let a_in = &cache.activations[l];
            let mut g = Layer {
                weight: vec![T::zero(); layer.weight.len()],
                bias: vec![T::zero(); layer.fan_out],
                fan_in: layer.fan_in,
                fan_out: layer.fan_out,
            };
            for &i in order {
                let d = delta.row(i);
                let a = a_in.row(i);
                for (o, &dv) in d.iter().enumerate() {
                    g.bias[o] = g.bias[o] + dv;
                    let gw = &mut g.weight[o * layer.fan_in..(o + 1) * layer.fan_in];
                    for (gk, &ak) in gw.iter_mut().zip(a) {
                        *gk = *gk + dv * ak;
                    }
                }
            }
            let mut prev = Matrix::zeros(rows, layer.fan_in);
            for i in 0..rows {
                let d = delta.row(i);
                let p = prev.row_mut(i);
                for (o, &dv) in d.iter().enumerate() {
                    let w = &layer.weight[o * layer.fan_in..(o + 1) * layer.fan_in];
                    for (pk, &wk) in p.iter_mut().zip(w) {
                        *pk = *pk + dv * wk;
                    }
                }
                if l > 0 {
                    // ReLU derivative on the layer input (post-activation of l - 1).
                    for (pk, &ak) in p.iter_mut().zip(a_in.row(i)) {
                        if ak <= T::zero() {
                            *pk = T::zero();
                        }
                    }
                }
            }
            on_layer(l, &g);
            grads.push(g);
            delta = prev;
        }
        grads.reverse();
        Ok(GradientBundle {
            dense: DenseGrads { layers: grads },
            input: delta,
        })
    }
}

impl<T: Float> DenseGrads<T> {
    pub fn zeros_like(model: &DenseModel<T>) -> Self {
        let z = DenseModel::<T>::zeros(&model.dims()).expect("dims already validated");
        Self { layers: z.layers }
    }

    pub fn flatten(&self) -> Vec<T> {
        flatten_layers(&self.layers)
    }

    pub fn load_flat(&mut self, flat: &[T]) {
        unflatten_into(&mut self.layers, flat);
    }

    pub fn all_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().chain(&l.bias).all(|v| v.is_finite()))
    }
}

fn validate_dims(dims: &[usize]) -> Result<()> {
    if dims.len() < 2 || dims.contains(&0) || *dims.last().unwrap() != 1 {
        return Err(Error::Config(format!(
            "network dims {dims:?} must be positive and end in a single output"
        )));
    }
    Ok(())
}

fn cast_layer<T: Float, U: Float>(l: &Layer<T>) -> Layer<U> {
    Layer {
        weight: l.weight.iter().map(|&v| U::from(v).unwrap()).collect(),
        bias: l.bias.iter().map(|&v| U::from(v).unwrap()).collect(),
        fan_in: l.fan_in,
        fan_out: l.fan_out,
    }
}

fn flatten_layers<T: Float>(layers: &[Layer<T>]) -> Vec<T> {
    let mut out = Vec::new();
    for l in layers {
        out.extend_from_slice(&l.weight);
        out.extend_from_slice(&l.bias);
    }
    out
}

fn unflatten_into<T: Float>(layers: &mut [Layer<T>], flat: &[T]) {
    let mut off = 0;
    for l in layers {
        let n = l.weight.len();
        l.weight.copy_from_slice(&flat[off..off + n]);
        off += n;
        let n = l.bias.len();
        l.bias.copy_from_slice(&flat[off..off + n]);
        off += n;
    }
}

#[inline]
pub fn logistic<T: Float>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

/// Mean binary cross-entropy with probabilities clamped to
/// `[BCE_EPS, 1 - BCE_EPS]`.
pub fn bce_loss<T: Float>(predictions: &[T], labels: &[T]) -> Result<T> {
    if predictions.is_empty() {
        return Err(Error::precondition("loss of an empty batch"));
    }
    if predictions.len() != labels.len() {
        return Err(Error::precondition(format!(
            "{} predictions vs {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let eps = T::from(BCE_EPS).unwrap();
    let one = T::one();
    let mut total = T::zero();
    for (&p, &y) in predictions.iter().zip(labels) {
        let p = p.max(eps).min(one - eps);
        total = total - (y * p.ln() + (one - y) * (one - p).ln());
    }
    Ok(total / T::from(predictions.len()).unwrap())
}

/// Area under the ROC curve via the rank-sum statistic; tied scores
/// contribute one half.
pub fn auc<T: Float>(predictions: &[T], labels: &[T]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::precondition("auc: length mismatch"));
    }
    let positives = labels.iter().filter(|&&y| y > T::from(0.5).unwrap()).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::UndefinedMetric(
            "auc needs at least one positive and one negative label".into(),
        ));
    }
    let mut idx: Vec<usize> = (0..predictions.len()).collect();
    idx.sort_by(|&a, &b| {
        predictions[a]
            .partial_cmp(&predictions[b])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    // Sum of (1-based, tie-averaged) ranks of the positives.
    let mut rank_sum = 0.0f64;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && predictions[idx[j + 1]] == predictions[idx[i]] {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            if labels[k] > T::from(0.5).unwrap() {
                rank_sum += avg_rank;
            }
        }
        i = j + 1;
    }
    let p = positives as f64;
    let n = negatives as f64;
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

pub fn sgd_step<T: Float>(model: &mut DenseModel<T>, grads: &DenseGrads<T>, lr: T) -> Result<()> {
    if !(lr >= T::zero()) {
        return Err(Error::precondition("learning rate must be nonnegative"));
    }
    check_grads(model, grads)?;
    for (layer, g) in model.layers.iter_mut().zip(&grads.layers) {
        for (w, &gw) in layer.weight.iter_mut().zip(&g.weight) {
            *w = *w - lr * gw;
        }
        for (b, &gb) in layer.bias.iter_mut().zip(&g.bias) {
            *b = *b - lr * gb;
        }
    }
    model.version += 1;
    Ok(())
}

fn check_grads<T: Float>(model: &DenseModel<T>, grads: &DenseGrads<T>) -> Result<()> {
    if grads.layers.len() != model.layers.len()
        || grads
            .layers
            .iter()
            .zip(&model.layers)
            .any(|(g, l)| g.weight.len() != l.weight.len() || g.bias.len() != l.bias.len())
    {
        return Err(Error::Config("gradient shape does not match model".into()));
    }
    if !grads.all_finite() {
        return Err(Error::Divergence("non-finite dense gradient".into()));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DenseOptimizerKind {
    #[default]
    Sgd,
    Adam,
}

/// Optimizer state for the dense tower.
#[derive(Clone, Debug)]
pub enum DenseOptimizer {
    Sgd,
    Adam {
        beta1: f32,
        beta2: f32,
        eps: f32,
        step: i32,
        m: Vec<f32>,
        v: Vec<f32>,
    },
}

impl DenseOptimizer {
    pub fn new(kind: DenseOptimizerKind, param_count: usize) -> Self {
        match kind {
            DenseOptimizerKind::Sgd => DenseOptimizer::Sgd,
            DenseOptimizerKind::Adam => DenseOptimizer::Adam {
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
                step: 0,
                m: vec![0.0; param_count],
                v: vec![0.0; param_count],
            },
        }
    }

    pub fn step(&mut self, model: &mut DenseModel<f32>, grads: &DenseGrads<f32>, lr: f32) -> Result<()> {
        match self {
            DenseOptimizer::Sgd => sgd_step(model, grads, lr),
            DenseOptimizer::Adam {
                beta1,
                beta2,
                eps,
                step,
                m,
                v,
            } => {
                check_grads(model, grads)?;
                *step += 1;
                let g = grads.flatten();
                let mut w = model.flatten();
                let c1 = 1.0 - beta1.powi(*step);
                let c2 = 1.0 - beta2.powi(*step);
                for i in 0..w.len() {
                    m[i] = *beta1 * m[i] + (1.0 - *beta1) * g[i];
                    v[i] = *beta2 * v[i] + (1.0 - *beta2) * g[i] * g[i];
                    w[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + *eps);
                }
                model.load_flat(&w)
            }
        }
    }
}

/// Maximum over every dense parameter and every input entry of
/// `|analytic - central difference| / max(1, |analytic|)`, in `f64`.
pub fn grad_check(model: &DenseModel<f64>, input: &Matrix<f64>, labels: &[f64], eps: f64) -> Result<f64> {
    if !(1e-6..=1e-3).contains(&eps) {
        return Err(Error::precondition(format!("grad_check step {eps} outside [1e-6, 1e-3]")));
    }
    let (_, cache) = model.forward(input)?;
    let analytic = model.backward(&cache, labels)?;
    let loss_at = |m: &DenseModel<f64>, x: &Matrix<f64>| -> Result<f64> {
        let (p, _) = m.forward(x)?;
        bce_loss(&p, labels)
    };
    let rel = |a: f64, fd: f64| (a - fd).abs() / a.abs().max(1.0);
    let mut worst = 0.0f64;

    let mut probe = model.clone();
    let flat = model.flatten();
    let g_flat = analytic.dense.flatten();
    for k in 0..flat.len() {
        let mut p = flat.clone();
        p[k] = flat[k] + eps;
        probe.load_flat(&p)?;
        let up = loss_at(&probe, input)?;
        p[k] = flat[k] - eps;
        probe.load_flat(&p)?;
        let down = loss_at(&probe, input)?;
        worst = worst.max(rel(g_flat[k], (up - down) / (2.0 * eps)));
    }
    let mut x = input.clone();
    for k in 0..x.data.len() {
        let orig = x.data[k];
        x.data[k] = orig + eps;
        let up = loss_at(model, &x)?;
        x.data[k] = orig - eps;
        let down = loss_at(model, &x)?;
        x.data[k] = orig;
        worst = worst.max(rel(analytic.input.data[k], (up - down) / (2.0 * eps)));
    }
    Ok(worst)
}
