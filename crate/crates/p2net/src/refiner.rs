//! The refinement network: a shared per-point MLP with layer sizes
//! ((q+5)K + q + 1, 128, 1024, 512, 256, 128, q), batch normalization and
//! ReLU on every layer except the last, and a softmax head emitting
//! per-class probabilities.
//!
//! Production arithmetic is f32; the same code runs in f64 for gradient
//! verification. Batch statistics use the biased (1/n) variance both for
//! normalization and for the running-average update.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use num_traits::Float;
use rand::distributions::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::frame_io::LabelArray;
use crate::fusion::{feature_width, FusedFrame, ScoreMatrix};
use crate::seeds;

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;
pub const MODEL_MAGIC: &[u8; 4] = b"P2NM";
pub const MODEL_VERSION: u32 = 1;

/// Scalar type the network runs in.
pub trait Real:
    Float
    + num_traits::FromPrimitive
    + ndarray::LinalgScalar
    + ndarray::ScalarOperand
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::fmt::Debug
    + Send
    + Sync
    + 'static
{
}
impl Real for f32 {}
impl Real for f64 {}

fn t<T: Real>(v: f64) -> T {
    T::from(v).unwrap()
}

#[derive(Debug, Clone, PartialEq)]
struct BatchNorm<T> {
    gamma: Array1<T>,
    beta: Array1<T>,
    running_mean: Array1<T>,
    running_var: Array1<T>,
}

impl<T: Real> BatchNorm<T> {
    fn identity(width: usize) -> Self {
        BatchNorm {
            gamma: Array1::ones(width),
            beta: Array1::zeros(width),
            running_mean: Array1::zeros(width),
            running_var: Array1::ones(width),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Layer<T> {
    weight: Array2<T>, // out x in
    bias: Array1<T>,
    norm: Option<BatchNorm<T>>,
}

/// Network weights, biases, batch-norm parameters and metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<T> {
    layers: Vec<Layer<T>>,
    sizes: Vec<usize>,
    q: u16,
    history: u16,
    epochs: u32,
    seed: u64,
}

pub type MlpModel = Mlp<f32>;

/// Layer-size chain for `q` classes and `k` history frames.
pub fn layer_sizes(q: u16, k: u16) -> Vec<usize> {
    vec![feature_width(q, k), 128, 1024, 512, 256, 128, q as usize]
}

/// Forward-pass mode: batch statistics vs. frozen running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

impl<T: Real> Mlp<T> {
    /// He-style fan-in init over an arbitrary size chain; biases zero,
    /// batch-norm at identity. Deterministic under `seed`.
    pub fn with_layer_sizes(sizes: &[usize], seed: u64) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::InvalidConfig {
                detail: format!("bad layer size chain {sizes:?}"),
            });
        }
        let q = *sizes.last().unwrap();
        if q < 2 || q > u16::MAX as usize {
            return Err(Error::InvalidConfig {
                detail: format!("output width {q} must be in [2, 65535]"),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seeds::mix(&[seeds::stream::INIT, seed]));
        let normal = StandardNormal;
        let mut layers = Vec::with_capacity(sizes.len() - 1);
        for l in 0..sizes.len() - 1 {
            let (fan_in, fan_out) = (sizes[l], sizes[l + 1]);
            let scale = (2.0 / fan_in as f64).sqrt();
            let weight = Array2::from_shape_fn((fan_out, fan_in), |_| {
                let g: f64 = normal.sample(&mut rng);
                t::<T>(g * scale)
            });
            let norm = (l + 2 < sizes.len()).then(|| BatchNorm::identity(fan_out));
            layers.push(Layer {
                weight,
                bias: Array1::zeros(fan_out),
                norm,
            });
        }
        Ok(Mlp {
            layers,
            sizes: sizes.to_vec(),
            q: q as u16,
            history: 0,
            epochs: 0,
            seed,
        })
    }

    pub fn input_width(&self) -> usize {
        self.sizes[0]
    }

    pub fn num_classes(&self) -> u16 {
        self.q
    }

    pub fn history(&self) -> u16 {
        self.history
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn epochs(&self) -> u32 {
        self.epochs
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Number of trainable scalars, counted in declared order: per layer the
    /// row-major weight matrix, the bias, then gamma and beta when present.
    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| {
                let mut n = l.weight.len() + l.bias.len();
                if let Some(norm) = &l.norm {
                    n += norm.gamma.len() + norm.beta.len();
                }
                n
            })
            .sum()
    }

    /// Adds `delta` to the parameter at `index` in the declared order above.
    /// Supports external perturbation-based verification of the gradients.
    pub fn nudge_parameter(&mut self, index: usize, delta: T) {
        let mut at = index;
        for layer in &mut self.layers {
            let w = layer.weight.len();
            if at < w {
                let cols = layer.weight.ncols();
                layer.weight[(at / cols, at % cols)] += delta;
                return;
            }
            at -= w;
            let b = layer.bias.len();
            if at < b {
                layer.bias[at] += delta;
                return;
            }
            at -= b;
            if let Some(norm) = layer.norm.as_mut() {
                let g = norm.gamma.len();
                if at < g {
                    norm.gamma[at] += delta;
                    return;
                }
                at -= g;
                if at < norm.beta.len() {
                    norm.beta[at] += delta;
                    return;
                }
                at -= norm.beta.len();
            }
        }
        panic!("parameter index {index} out of range");
    }

    fn check_width(&self, cols: usize) -> Result<()> {
        if cols != self.input_width() {
            return Err(Error::ShapeError {
                detail: format!(
                    "features have width {cols} but the model expects {}",
                    self.input_width()
                ),
            });
        }
        Ok(())
    }

    /// Forward pass. Train mode normalizes with batch statistics and folds
    /// them into the running averages; infer mode uses the frozen running
    /// statistics and leaves the model untouched.
    pub fn forward_array(&mut self, x: ArrayView2<T>, mode: Mode) -> Result<Array2<T>> {
        self.check_width(x.ncols())?;
        if x.nrows() == 0 {
            return Err(Error::EmptyInput);
        }
        match mode {
            Mode::Infer => Ok(self.forward_infer(&x)),
            Mode::Train => {
                let (probs, cache) = self.forward_train(x.to_owned());
                self.commit_batch_stats(&cache);
                Ok(probs)
            }
        }
    }

    fn forward_infer(&self, x: &ArrayView2<T>) -> Array2<T> {
        let mut act = x.to_owned();
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = act.dot(&layer.weight.t());
            z += &layer.bias;
            if let Some(norm) = &layer.norm {
                // fold the frozen statistics into one per-feature affine
                let scale: Array1<T> = Zip::from(&norm.gamma)
                    .and(&norm.running_var)
                    .map_collect(|&g, &v| g / (v + t::<T>(BN_EPS)).sqrt());
                let shift: Array1<T> = Zip::from(&norm.beta)
                    .and(&norm.running_mean)
                    .and(&scale)
                    .map_collect(|&b, &m, &s| b - m * s);
                for mut row in z.rows_mut() {
                    Zip::from(&mut row)
                        .and(&scale)
                        .and(&shift)
                        .for_each(|v, &s, &c| *v = (*v * s + c).max(T::zero()));
                }
            } else {
                debug_assert_eq!(l, last);
            }
            act = z;
        }
        softmax_rows(&mut act);
        act
    }

    fn forward_train(&self, x: Array2<T>) -> (Array2<T>, ForwardCache<T>) {
        let n = x.nrows();
        let mut cache = ForwardCache {
            acts: Vec::with_capacity(self.layers.len() + 1),
            xhat: Vec::with_capacity(self.layers.len()),
            inv_std: Vec::with_capacity(self.layers.len()),
            batch_mean: Vec::with_capacity(self.layers.len()),
            batch_var: Vec::with_capacity(self.layers.len()),
        };
        cache.acts.push(x);
        for layer in &self.layers {
            let mut z = cache.acts.last().unwrap().dot(&layer.weight.t());
            z += &layer.bias;
            match &layer.norm {
                Some(norm) => {
                    let mean = z.mean_axis(Axis(0)).unwrap();
                    let mut centered = z;
                    centered -= &mean;
                    let var = centered.map(|v| *v * *v).mean_axis(Axis(0)).unwrap();
                    let inv_std = var.map(|&v| T::one() / (v + t::<T>(BN_EPS)).sqrt());
                    let mut xhat = centered;
                    xhat *= &inv_std;
                    let mut out = &xhat * &norm.gamma;
                    out += &norm.beta;
                    out.mapv_inplace(|v| v.max(T::zero()));
                    cache.xhat.push(Some(xhat));
                    cache.inv_std.push(Some(inv_std));
                    cache.batch_mean.push(Some(mean));
                    cache.batch_var.push(Some(var));
                    cache.acts.push(out);
                }
                None => {
                    cache.xhat.push(None);
                    cache.inv_std.push(None);
                    cache.batch_mean.push(None);
                    cache.batch_var.push(None);
                    cache.acts.push(z);
                }
            }
        }
        let mut probs = cache.acts.last().unwrap().clone();
        softmax_rows(&mut probs);
        debug_assert_eq!(probs.nrows(), n);
        (probs, cache)
    }

    fn commit_batch_stats(&mut self, cache: &ForwardCache<T>) {
        let m = t::<T>(BN_MOMENTUM);
        let keep = T::one() - m;
        for (layer, (mean, var)) in self
            .layers
            .iter_mut()
            .zip(cache.batch_mean.iter().zip(&cache.batch_var))
        {
            if let (Some(norm), Some(mean), Some(var)) = (layer.norm.as_mut(), mean, var) {
                Zip::from(&mut norm.running_mean)
                    .and(mean)
                    .for_each(|r, &b| *r = *r * keep + b * m);
                Zip::from(&mut norm.running_var)
                    .and(var)
                    .for_each(|r, &b| *r = *r * keep + b * m);
            }
        }
    }

    /// Mean masked cross-entropy over the batch plus gradients for every
    /// parameter. Uses train-mode (batch) statistics; the model itself is
    /// not mutated.
    pub fn loss_and_grad_array(
        &self,
        x: ArrayView2<T>,
        labels: &[u16],
        ignore: &BTreeSet<u16>,
    ) -> Result<(f64, Gradients<T>)> {
        let (loss, grads, _) = self.train_step(x, labels, ignore)?;
        Ok((loss, grads))
    }

    fn train_step(
        &self,
        x: ArrayView2<T>,
        labels: &[u16],
        ignore: &BTreeSet<u16>,
    ) -> Result<(f64, Gradients<T>, ForwardCache<T>)> {
        self.check_width(x.ncols())?;
        if labels.len() != x.nrows() {
            return Err(Error::ShapeError {
                detail: format!("{} labels for {} feature rows", labels.len(), x.nrows()),
            });
        }
        let included: Vec<bool> = labels.iter().map(|l| !ignore.contains(l)).collect();
        let m = included.iter().filter(|&&i| i).count();
        if m == 0 {
            return Err(Error::DegenerateBatch);
        }
        let (probs, cache) = self.forward_train(x.to_owned());
        let logits = cache.acts.last().unwrap();

        // loss from logits via log-sum-exp; masked points contribute nothing
        let mut loss = 0.0f64;
        for (i, row) in logits.rows().into_iter().enumerate() {
            if !included[i] {
                continue;
            }
            let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
            let sum: T = row.iter().map(|&v| (v - max).exp()).fold(T::zero(), |a, b| a + b);
            let lse = max + sum.ln();
            loss += (lse - row[labels[i] as usize]).to_f64().unwrap();
        }
        loss /= m as f64;

        // d loss / d logits = (softmax - onehot) / m on included rows
        let inv_m = t::<T>(1.0 / m as f64);
        let mut delta = probs;
        for (i, mut row) in delta.rows_mut().into_iter().enumerate() {
            if included[i] {
                row[labels[i] as usize] -= T::one();
                row.mapv_inplace(|v| v * inv_m);
            } else {
                row.fill(T::zero());
            }
        }

        let grads = self.backward(delta, &cache);
        Ok((loss, grads, cache))
    }

    fn backward(&self, mut delta: Array2<T>, cache: &ForwardCache<T>) -> Gradients<T> {
        let n = cache.acts[0].nrows();
        let n_t = t::<T>(n as f64);
        let mut layers: Vec<LayerGrads<T>> = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate().rev() {
            // delta enters as dL/d(output of layer l)
            let (dgamma, dbeta) = if let Some(norm) = &layer.norm {
                let post = &cache.acts[l + 1];
                // ReLU: zero where the activation was clamped
                Zip::from(&mut delta).and(post).for_each(|d, &a| {
                    if a <= T::zero() {
                        *d = T::zero();
                    }
                });
                let xhat = cache.xhat[l].as_ref().unwrap();
                let inv_std = cache.inv_std[l].as_ref().unwrap();
                let dgamma = (&delta * xhat).sum_axis(Axis(0));
                let dbeta = delta.sum_axis(Axis(0));
                // through the batch statistics:
                // dz = inv_std/n * (n*dxhat - sum(dxhat) - xhat * sum(dxhat*xhat))
                let mut dxhat = delta;
                dxhat *= &norm.gamma;
                let sum_dxhat = dxhat.sum_axis(Axis(0));
                let sum_dxhat_xhat = (&dxhat * xhat).sum_axis(Axis(0));
                let mut dz = dxhat;
                dz *= n_t;
                dz -= &sum_dxhat;
                dz -= &(xhat * &sum_dxhat_xhat);
                dz *= &inv_std.map(|&v| v / n_t);
                delta = dz;
                (Some(dgamma), Some(dbeta))
            } else {
                (None, None)
            };
            let input = &cache.acts[l];
            let dw = delta.t().dot(input);
            let db = delta.sum_axis(Axis(0));
            if l > 0 {
                delta = delta.dot(&layer.weight);
            }
            layers.push(LayerGrads {
                weight: dw,
                bias: db,
                gamma: dgamma,
                beta: dbeta,
            });
        }
        layers.reverse();
        Gradients { layers }
    }

}

impl MlpModel {
    /// Infer-mode forward plus per-point argmax labels (ties to the lowest
    /// class id).
    pub fn refine(&self, features: &FusedFrame) -> Result<(ScoreMatrix, Vec<u16>)> {
        self.check_width(features.width())?;
        let x = features_view(features);
        let probs = self.forward_infer(&x);
        let scores = scores_from_probs(&probs)?;
        let labels = scores.argmax_labels();
        Ok((scores, labels))
    }

    /// Forward pass over fused features, emitting a probability matrix.
    pub fn forward(&mut self, features: &FusedFrame, mode: Mode) -> Result<ScoreMatrix> {
        self.check_width(features.width())?;
        let x = features_view(features);
        let probs = self.forward_array(x, mode)?;
        scores_from_probs(&probs)
    }

    /// Cross-entropy loss and gradients over fused features.
    pub fn loss_and_grad(
        &self,
        features: &FusedFrame,
        labels: &LabelArray,
        ignore: &BTreeSet<u16>,
    ) -> Result<(f64, Gradients<f32>)> {
        let x = features_view(features);
        self.loss_and_grad_array(x, &labels.labels, ignore)
    }

    /// The production refiner for `q` classes and `k` history frames.
    pub fn init(q: u16, k: u16, seed: u64) -> Result<MlpModel> {
        if q < 2 {
            return Err(Error::InvalidConfig {
                detail: format!("class count {q} must be at least 2"),
            });
        }
        if k == 0 {
            return Err(Error::InvalidConfig {
                detail: "history depth K must be at least 1".into(),
            });
        }
        let mut model = Mlp::<f32>::with_layer_sizes(&layer_sizes(q, k), seed)?;
        model.history = k;
        Ok(model)
    }

    /// Same parameters widened to f64, for gradient verification.
    pub fn to_f64(&self) -> Mlp<f64> {
        Mlp {
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    weight: l.weight.map(|&v| v as f64),
                    bias: l.bias.map(|&v| v as f64),
                    norm: l.norm.as_ref().map(|n| BatchNorm {
                        gamma: n.gamma.map(|&v| v as f64),
                        beta: n.beta.map(|&v| v as f64),
                        running_mean: n.running_mean.map(|&v| v as f64),
                        running_var: n.running_var.map(|&v| v as f64),
                    }),
                })
                .collect(),
            sizes: self.sizes.clone(),
            q: self.q,
            history: self.history,
            epochs: self.epochs,
            seed: self.seed,
        }
    }
}

fn features_view(features: &FusedFrame) -> ArrayView2<'_, f32> {
    ArrayView2::from_shape((features.rows(), features.width()), features.values())
        .expect("fused frame buffer matches its declared shape")
}

fn scores_from_probs<T: Real>(probs: &Array2<T>) -> Result<ScoreMatrix> {
    let data: Vec<f32> = probs.iter().map(|&v| v.to_f64().unwrap() as f32).collect();
    ScoreMatrix::new(probs.nrows(), probs.ncols() as u16, data)
}

fn softmax_rows<T: Real>(z: &mut Array2<T>) {
    for mut row in z.rows_mut() {
        let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        row.mapv_inplace(|v| {
            let e = (v - max).exp();
            sum += e;
            e
        });
        row.mapv_inplace(|v| v / sum);
    }
}

struct ForwardCache<T> {
    /// acts[0] is the input; acts[l+1] the output of layer l (final = logits).
    acts: Vec<Array2<T>>,
    xhat: Vec<Option<Array2<T>>>,
    inv_std: Vec<Option<Array1<T>>>,
    batch_mean: Vec<Option<Array1<T>>>,
    batch_var: Vec<Option<Array1<T>>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads<T> {
    pub weight: Array2<T>,
    pub bias: Array1<T>,
    pub gamma: Option<Array1<T>>,
    pub beta: Option<Array1<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub layers: Vec<LayerGrads<T>>,
}

impl<T: Real> Gradients<T> {
    /// All gradient scalars flattened in the same declared order as
    /// [`Mlp::nudge_parameter`].
    pub fn flat(&self) -> Vec<T> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend(l.weight.iter().copied());
            out.extend(l.bias.iter().copied());
            if let Some(g) = &l.gamma {
                out.extend(g.iter().copied());
            }
            if let Some(b) = &l.beta {
                out.extend(b.iter().copied());
            }
        }
        out
    }
}

/// Adam moment accumulators, shaped like the model parameters.
#[derive(Debug, Clone)]
pub struct OptimizerState<T> {
    m: Gradients<T>,
    v: Gradients<T>,
    step: u64,
    params: AdamParams,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl<T: Real> OptimizerState<T> {
    pub fn new(model: &Mlp<T>, params: AdamParams) -> Self {
        let zeros = Gradients {
            layers: model
                .layers
                .iter()
                .map(|l| LayerGrads {
                    weight: Array2::zeros(l.weight.dim()),
                    bias: Array1::zeros(l.bias.dim()),
                    gamma: l.norm.as_ref().map(|n| Array1::zeros(n.gamma.dim())),
                    beta: l.norm.as_ref().map(|n| Array1::zeros(n.beta.dim())),
                })
                .collect(),
        };
        OptimizerState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
            params,
        }
    }

    pub fn apply(&mut self, model: &mut Mlp<T>, grads: &Gradients<T>, lr: f64) {
        self.step += 1;
        let b1 = t::<T>(self.params.beta1);
        let b2 = t::<T>(self.params.beta2);
        let eps = t::<T>(self.params.epsilon);
        let c1 = t::<T>(1.0 - self.params.beta1.powi(self.step as i32));
        let c2 = t::<T>(1.0 - self.params.beta2.powi(self.step as i32));
        let lr = t::<T>(lr);
        for ((layer, g), (m, v)) in model
            .layers
            .iter_mut()
            .zip(&grads.layers)
            .zip(self.m.layers.iter_mut().zip(self.v.layers.iter_mut()))
        {
            adam_update(&mut layer.weight, &g.weight, &mut m.weight, &mut v.weight, b1, b2, eps, c1, c2, lr);
            adam_update(&mut layer.bias, &g.bias, &mut m.bias, &mut v.bias, b1, b2, eps, c1, c2, lr);
            if let Some(norm) = layer.norm.as_mut() {
                adam_update(
                    &mut norm.gamma,
                    g.gamma.as_ref().unwrap(),
                    m.gamma.as_mut().unwrap(),
                    v.gamma.as_mut().unwrap(),
                    b1, b2, eps, c1, c2, lr,
                );
                adam_update(
                    &mut norm.beta,
                    g.beta.as_ref().unwrap(),
                    m.beta.as_mut().unwrap(),
                    v.beta.as_mut().unwrap(),
                    b1, b2, eps, c1, c2, lr,
                );
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn adam_update<T: Real, D: ndarray::Dimension>(
    param: &mut ndarray::Array<T, D>,
    grad: &ndarray::Array<T, D>,
    m: &mut ndarray::Array<T, D>,
    v: &mut ndarray::Array<T, D>,
    b1: T,
    b2: T,
    eps: T,
    c1: T,
    c2: T,
    lr: T,
) {
    Zip::from(param)
        .and(grad)
        .and(m)
        .and(v)
        .for_each(|p, &g, m, v| {
            *m = b1 * *m + (T::one() - b1) * g;
            *v = b2 * *v + (T::one() - b2) * g * g;
            let mhat = *m / c1;
            let vhat = *v / c2;
            *p = *p - lr * mhat / (vhat.sqrt() + eps);
        });
}

/// Training hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub lr_decay: f64,
    pub epochs: u32,
    pub points_per_frame: usize,
    pub seed: u64,
    pub adam: AdamParams,
    pub ignore_classes: BTreeSet<u16>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: 0.01,
            lr_decay: 0.9,
            epochs: 43,
            points_per_frame: 75_000,
            seed: 0,
            adam: AdamParams::default(),
            ignore_classes: BTreeSet::from([0]),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.base_lr.is_finite() || self.base_lr <= 0.0 {
            return Err(Error::InvalidConfig {
                detail: format!("base learning rate {} must be positive", self.base_lr),
            });
        }
        if !self.lr_decay.is_finite() || self.lr_decay <= 0.0 || self.lr_decay > 1.0 {
            return Err(Error::InvalidConfig {
                detail: format!("lr decay {} must be in (0, 1]", self.lr_decay),
            });
        }
        if self.points_per_frame == 0 {
            return Err(Error::InvalidConfig {
                detail: "points per frame must be at least 1".into(),
            });
        }
        Ok(())
    }

    /// lr(e) = base_lr * decay^e, with no warmup or floor.
    pub fn learning_rate(&self, epoch: u32) -> f64 {
        self.base_lr * self.lr_decay.powi(epoch as i32)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: u32,
    pub lr: f64,
    pub mean_loss: f64,
}

/// Trains a fresh model over the dataset: one Adam step per (subsampled)
/// frame per epoch, deterministic under the config seed.
pub fn train(
    config: &TrainConfig,
    dataset: &[(FusedFrame, LabelArray)],
) -> Result<(MlpModel, Vec<EpochStats>)> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptyInput);
    }
    let q = dataset[0].0.classes();
    let k = dataset[0].0.history();
    for (i, (fused, labels)) in dataset.iter().enumerate() {
        if fused.classes() != q || fused.history() != k {
            return Err(Error::ShapeError {
                detail: format!("frame {i} has q={}, K={}, expected q={q}, K={k}",
                    fused.classes(), fused.history()),
            });
        }
        if labels.len() != fused.rows() {
            return Err(Error::ShapeError {
                detail: format!(
                    "frame {i} has {} labels for {} feature rows",
                    labels.len(),
                    fused.rows()
                ),
            });
        }
    }

    let mut model = MlpModel::init(q, k, config.seed)?;
    let mut opt = OptimizerState::new(&model, config.adam);
    let mut history = Vec::with_capacity(config.epochs as usize);
    let width = model.input_width();
    for epoch in 0..config.epochs {
        let lr = config.learning_rate(epoch);
        let mut loss_sum = 0.0;
        for (fi, (fused, labels)) in dataset.iter().enumerate() {
            let (batch, batch_labels) = subsample(fused, labels, config, epoch, fi, width);
            let (loss, grads, cache) =
                model.train_step(batch.view(), &batch_labels, &config.ignore_classes)?;
            opt.apply(&mut model, &grads, lr);
            model.commit_batch_stats(&cache);
            loss_sum += loss;
        }
        history.push(EpochStats {
            epoch,
            lr,
            mean_loss: loss_sum / dataset.len() as f64,
        });
    }
    model.epochs = config.epochs;
    Ok((model, history))
}

/// Uniform subsample without replacement, reseeded per (epoch, frame).
fn subsample(
    fused: &FusedFrame,
    labels: &LabelArray,
    config: &TrainConfig,
    epoch: u32,
    frame: usize,
    width: usize,
) -> (Array2<f32>, Vec<u16>) {
    let n = fused.rows();
    let take = config.points_per_frame.min(n);
    let rows: Vec<usize> = if take == n {
        (0..n).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seeds::mix(&[
            seeds::stream::SUBSAMPLE,
            config.seed,
            epoch as u64,
            frame as u64,
        ]));
        let mut idx = rand::seq::index::sample(&mut rng, n, take).into_vec();
        idx.sort_unstable();
        idx
    };
    let mut batch = Array2::zeros((rows.len(), width));
    let mut batch_labels = Vec::with_capacity(rows.len());
    for (bi, &ri) in rows.iter().enumerate() {
        batch
            .row_mut(bi)
            .assign(&ndarray::ArrayView1::from(fused.row(ri)));
        batch_labels.push(labels.labels[ri]);
    }
    (batch, batch_labels)
}

/// Serializes magic, version, metadata, then per-layer parameter blobs in
/// declared order; bit-exact round trip.
pub fn save_model(model: &MlpModel, path: &Path) -> Result<()> {
    let mut bytes = Vec::new();
    bytes.extend_from_slice(MODEL_MAGIC);
    bytes.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(model.q as u32).to_le_bytes());
    bytes.extend_from_slice(&(model.history as u32).to_le_bytes());
    bytes.extend_from_slice(&model.epochs.to_le_bytes());
    bytes.extend_from_slice(&model.seed.to_le_bytes());
    bytes.extend_from_slice(&(model.sizes.len() as u32).to_le_bytes());
    for &s in &model.sizes {
        bytes.extend_from_slice(&(s as u32).to_le_bytes());
    }
    let mut push = |arr: &[f32]| {
        for v in arr {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    };
    for layer in &model.layers {
        push(layer.weight.as_slice().unwrap());
        push(layer.bias.as_slice().unwrap());
        if let Some(norm) = &layer.norm {
            push(norm.gamma.as_slice().unwrap());
            push(norm.beta.as_slice().unwrap());
            push(norm.running_mean.as_slice().unwrap());
            push(norm.running_var.as_slice().unwrap());
        }
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<MlpModel> {
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::NotFound {
            path: path.to_path_buf(),
        },
        _ => Error::Io(e),
    })?;
    let bad = |detail: &str| Error::IncompatibleModel {
        detail: format!("{}: {detail}", path.display()),
    };
    struct Cursor<'a> {
        bytes: &'a [u8],
        at: usize,
        path: &'a Path,
    }
    impl<'a> Cursor<'a> {
        fn take(&mut self, len: usize) -> Result<&'a [u8]> {
            if self.at + len > self.bytes.len() {
                return Err(Error::IncompatibleModel {
                    detail: format!("{}: truncated", self.path.display()),
                });
            }
            let s = &self.bytes[self.at..self.at + len];
            self.at += len;
            Ok(s)
        }
        fn u32(&mut self) -> Result<u32> {
            Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
        }
        fn floats(&mut self, len: usize) -> Result<Vec<f32>> {
            Ok(self
                .take(len * 4)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect())
        }
    }
    let mut cur = Cursor {
        bytes: &bytes,
        at: 0,
        path,
    };
    if cur.take(4)? != MODEL_MAGIC {
        return Err(bad("wrong magic"));
    }
    let version = cur.u32()?;
    if version != MODEL_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let q = cur.u32()?;
    let history = cur.u32()?;
    let epochs = cur.u32()?;
    let seed = u64::from_le_bytes(cur.take(8)?.try_into().unwrap());
    let n_sizes = cur.u32()? as usize;
    if !(2..=64).contains(&n_sizes) {
        return Err(bad(&format!("implausible layer count {n_sizes}")));
    }
    let mut sizes = Vec::with_capacity(n_sizes);
    for _ in 0..n_sizes {
        sizes.push(cur.u32()? as usize);
    }
    if sizes.iter().any(|&s| s == 0) || *sizes.last().unwrap() != q as usize {
        return Err(bad("size chain disagrees with metadata"));
    }
    let mut layers = Vec::with_capacity(n_sizes - 1);
    for l in 0..n_sizes - 1 {
        let (fan_in, fan_out) = (sizes[l], sizes[l + 1]);
        let weight = Array2::from_shape_vec((fan_out, fan_in), cur.floats(fan_out * fan_in)?)
            .map_err(|_| bad("weight shape"))?;
        let bias = Array1::from_vec(cur.floats(fan_out)?);
        let norm = if l + 2 < n_sizes {
            Some(BatchNorm {
                gamma: Array1::from_vec(cur.floats(fan_out)?),
                beta: Array1::from_vec(cur.floats(fan_out)?),
                running_mean: Array1::from_vec(cur.floats(fan_out)?),
                running_var: Array1::from_vec(cur.floats(fan_out)?),
            })
        } else {
            None
        };
        layers.push(Layer { weight, bias, norm });
    }
    if cur.at != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    let model = Mlp {
        layers,
        sizes,
        q: q as u16,
        history: history as u16,
        epochs,
        seed,
    };
    for layer in &model.layers {
        let finite = layer.weight.iter().all(|v| v.is_finite())
            && layer.bias.iter().all(|v| v.is_finite());
        let norm_ok = layer
            .norm
            .as_ref()
            .is_none_or(|n| n.running_var.iter().all(|&v| v.is_finite() && v > 0.0));
        if !finite || !norm_ok {
            return Err(bad("non-finite parameters"));
        }
    }
    Ok(model)
}
