//! Three-layer fully connected rating-regression head.
//!
//! `x -> relu(W1 x + b1) -> relu(W2 a1 + b2) = e -> W3 e + b3 = y`
//!
//! `e` is the 10-D embedding, `y` the 5-D rating prediction on the
//! normalized scale (linear, clamped only for reporting).

mod optim;
mod train;

pub use optim::{Adam, AdamConfig};
pub use train::{embed_all, train, TrainReport};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Width of the embedding (second-to-last) layer.
pub const EMBED_DIM: usize = 10;
/// One output per rating characteristic.
pub const OUTPUT_DIM: usize = 5;

pub const DEFAULT_HIDDEN: usize = 64;
pub const DEFAULT_LEARNING_RATE: f64 = 1e-3;
pub const DEFAULT_EPOCHS: usize = 200;
pub const DEFAULT_BATCH: usize = 32;

/// Which activation of the second layer is reported as the embedding.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingTap {
    /// After the ReLU; embeddings are non-negative.
    #[default]
    PostActivation,
    PreActivation,
}

impl EmbeddingTap {
    pub fn name(self) -> &'static str {
        match self {
            EmbeddingTap::PostActivation => "post_activation",
            EmbeddingTap::PreActivation => "pre_activation",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "post_activation" => Some(EmbeddingTap::PostActivation),
            "pre_activation" => Some(EmbeddingTap::PreActivation),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub embedding_tap: EmbeddingTap,
}

impl HeadConfig {
    pub fn new(input_dim: usize) -> Self {
        Self {
            input_dim,
            hidden_dim: DEFAULT_HIDDEN,
            learning_rate: DEFAULT_LEARNING_RATE,
            epochs: DEFAULT_EPOCHS,
            batch_size: DEFAULT_BATCH,
            seed: crate::DEFAULT_SEED,
            embedding_tap: EmbeddingTap::default(),
        }
    }

    pub fn embed_dim(&self) -> usize {
        EMBED_DIM
    }

    pub fn output_dim(&self) -> usize {
        OUTPUT_DIM
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::Config("head dimensions must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::Config(format!(
                "learning rate {} must be finite and >= 0",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

/// Dense layer, weights stored row-major as `out_dim x in_dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense<T> {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> Dense<T> {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            weights: vec![T::zero(); in_dim * out_dim],
            bias: vec![T::zero(); out_dim],
        }
    }

    /// Weights and biases drawn from `U(-1/sqrt(in_dim), 1/sqrt(in_dim))`.
    fn uniform<R: Rng>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let mut draw = || T::of(rng.random_range(-bound..=bound));
        let weights = (0..in_dim * out_dim).map(|_| draw()).collect();
        let bias = (0..out_dim).map(|_| draw()).collect();
        Self {
            in_dim,
            out_dim,
            weights,
            bias,
        }
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.weights[i * self.in_dim..(i + 1) * self.in_dim]
    }

    fn apply(&self, x: &[T], out: &mut [T]) {
        for (i, (o, &b)) in out.iter_mut().zip(&self.bias).enumerate() {
            *o = b + crate::scalar::dot(self.row(i), x);
        }
    }

    fn check(&self) -> Result<()> {
        if self.weights.len() != self.in_dim * self.out_dim || self.bias.len() != self.out_dim {
            return Err(Error::Shape(format!(
                "layer {}x{} has {} weights and {} biases",
                self.out_dim,
                self.in_dim,
                self.weights.len(),
                self.bias.len()
            )));
        }
        if self.weights.iter().chain(&self.bias).any(|v| !v.is_finite()) {
            return Err(Error::Domain("non-finite layer parameter".into()));
        }
        Ok(())
    }
}

#[inline]
fn relu<T: Scalar>(z: T) -> T {
    if z > T::zero() {
        z
    } else {
        T::zero()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadModel<T> {
    config: HeadConfig,
    layers: [Dense<T>; 3],
}

/// Output of a forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Forward<T> {
    pub embedding: Vec<T>,
    /// Linear output on the normalized scale, unclamped.
    pub prediction: [T; OUTPUT_DIM],
}

impl<T: Scalar> Forward<T> {
    /// Prediction clamped into `[0, 1]`.
    pub fn clamped(&self) -> [T; OUTPUT_DIM] {
        self.prediction.map(|v| v.max(T::zero()).min(T::one()))
    }
}

/// Intermediate activations kept for backpropagation.
struct Trace<T> {
    z1: Vec<T>,
    a1: Vec<T>,
    z2: Vec<T>,
    a2: Vec<T>,
    y: [T; OUTPUT_DIM],
}

/// Gradient of the mean batch loss, shaped like the model parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T> {
    pub loss: T,
    pub layers: [Dense<T>; 3],
}

impl<T: Scalar> Gradients<T> {
    pub fn param_slices(&self) -> [&[T]; 6] {
        let [l1, l2, l3] = &self.layers;
        [&l1.weights, &l1.bias, &l2.weights, &l2.bias, &l3.weights, &l3.bias]
    }
}

/// One training example: features and normalized target.
#[derive(Clone, Copy, Debug)]
pub struct Sample<'a, T> {
    pub feature: &'a [T],
    pub target: [T; OUTPUT_DIM],
}

impl<T: Scalar> HeadModel<T> {
    /// Model with every parameter zero.
    pub fn zeros(config: HeadConfig) -> Result<Self> {
        config.validate()?;
        let layers = [
            Dense::zeros(config.input_dim, config.hidden_dim),
            Dense::zeros(config.hidden_dim, EMBED_DIM),
            Dense::zeros(EMBED_DIM, OUTPUT_DIM),
        ];
        Ok(Self { config, layers })
    }

    /// Fan-in scaled uniform initialization from `config.seed`.
    pub fn initialize(config: HeadConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = crate::seeded_rng(config.seed);
        Ok(Self::initialize_with(config, &mut rng))
    }

    fn initialize_with<R: Rng>(config: HeadConfig, rng: &mut R) -> Self {
        let l1 = Dense::uniform(config.input_dim, config.hidden_dim, rng);
        let l2 = Dense::uniform(config.hidden_dim, EMBED_DIM, rng);
        let l3 = Dense::uniform(EMBED_DIM, OUTPUT_DIM, rng);
        Self {
            config,
            layers: [l1, l2, l3],
        }
    }

    /// Assembles a model from explicit layers, checking shapes against `config`.
    pub fn from_layers(config: HeadConfig, layers: [Dense<T>; 3]) -> Result<Self> {
        config.validate()?;
        let expected = [
            (config.input_dim, config.hidden_dim),
            (config.hidden_dim, EMBED_DIM),
            (EMBED_DIM, OUTPUT_DIM),
        ];
        for (i, (layer, (inp, out))) in layers.iter().zip(expected).enumerate() {
            if layer.in_dim != inp || layer.out_dim != out {
                return Err(Error::Shape(format!(
                    "layer {} is {}x{}, expected {out}x{inp}",
                    i + 1,
                    layer.out_dim,
                    layer.in_dim
                )));
            }
            layer.check()?;
        }
        Ok(Self { config, layers })
    }

    pub fn config(&self) -> &HeadConfig {
        &self.config
    }

    pub fn layers(&self) -> &[Dense<T>; 3] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense<T>; 3] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.config.input_dim
    }

    pub fn embedding_tap(&self) -> EmbeddingTap {
        self.config.embedding_tap
    }

    pub fn set_embedding_tap(&mut self, tap: EmbeddingTap) {
        self.config.embedding_tap = tap;
    }

    pub fn param_slices_mut(&mut self) -> [&mut [T]; 6] {
        let [l1, l2, l3] = &mut self.layers;
        [
            &mut l1.weights,
            &mut l1.bias,
            &mut l2.weights,
            &mut l2.bias,
            &mut l3.weights,
            &mut l3.bias,
        ]
    }

    pub fn param_slices(&self) -> [&[T]; 6] {
        let [l1, l2, l3] = &self.layers;
        [&l1.weights, &l1.bias, &l2.weights, &l2.bias, &l3.weights, &l3.bias]
    }

    pub fn n_params(&self) -> usize {
        self.param_slices().iter().map(|s| s.len()).sum()
    }

    fn check_input(&self, x: &[T]) -> Result<()> {
        if x.len() != self.config.input_dim {
            return Err(Error::Shape(format!(
                "feature has {} values, model expects {}",
                x.len(),
                self.config.input_dim
            )));
        }
        Ok(())
    }

    fn trace(&self, x: &[T]) -> Trace<T> {
        let [l1, l2, l3] = &self.layers;
        let mut z1 = vec![T::zero(); l1.out_dim];
        l1.apply(x, &mut z1);
        let a1: Vec<T> = z1.iter().map(|&z| relu(z)).collect();
        let mut z2 = vec![T::zero(); EMBED_DIM];
        l2.apply(&a1, &mut z2);
        let a2: Vec<T> = z2.iter().map(|&z| relu(z)).collect();
        let mut y = [T::zero(); OUTPUT_DIM];
        l3.apply(&a2, &mut y);
        Trace { z1, a1, z2, a2, y }
    }

    pub fn forward(&self, x: &[T]) -> Result<Forward<T>> {
        self.check_input(x)?;
        let t = self.trace(x);
        let embedding = match self.config.embedding_tap {
            EmbeddingTap::PostActivation => t.a2,
            EmbeddingTap::PreActivation => t.z2,
        };
        Ok(Forward {
            embedding,
            prediction: t.y,
        })
    }

    /// Mean MSE over a batch.
    pub fn batch_loss(&self, batch: &[Sample<'_, T>]) -> Result<T> {
        if batch.is_empty() {
            return Err(Error::Argument("loss of an empty batch".into()));
        }
        let mut total = T::zero();
        for s in batch {
            self.check_input(s.feature)?;
            total += mse_loss(&self.trace(s.feature).y, &s.target);
        }
        Ok(total / T::of_usize(batch.len()))
    }

    /// Exact gradient of the mean batch MSE by backpropagation.
    /// The ReLU derivative at 0 is taken as 0.
    pub fn gradients(&self, batch: &[Sample<'_, T>]) -> Result<Gradients<T>> {
        if batch.is_empty() {
            return Err(Error::Argument("gradient of an empty batch".into()));
        }
        let [l1, l2, l3] = &self.layers;
        let mut g = [
            Dense::zeros(l1.in_dim, l1.out_dim),
            Dense::zeros(l2.in_dim, l2.out_dim),
            Dense::zeros(l3.in_dim, l3.out_dim),
        ];
        let scale = T::of(2.0) / T::of_usize(OUTPUT_DIM * batch.len());
        let mut loss = T::zero();
        let mut d_a2 = vec![T::zero(); EMBED_DIM];
        let mut d_a1 = vec![T::zero(); l1.out_dim];

        for s in batch {
            self.check_input(s.feature)?;
            let t = self.trace(s.feature);
            loss += mse_loss(&t.y, &s.target);

            let d_y: [T; OUTPUT_DIM] = std::array::from_fn(|i| scale * (t.y[i] - s.target[i]));
            backprop_dense(l3, &mut g[2], &t.a2, &d_y, Some(&mut d_a2));

            let d_z2: Vec<T> = d_a2
                .iter()
                .zip(&t.z2)
                .map(|(&d, &z)| if z > T::zero() { d } else { T::zero() })
                .collect();
            backprop_dense(l2, &mut g[1], &t.a1, &d_z2, Some(&mut d_a1));

            let d_z1: Vec<T> = d_a1
                .iter()
                .zip(&t.z1)
                .map(|(&d, &z)| if z > T::zero() { d } else { T::zero() })
                .collect();
            backprop_dense(l1, &mut g[0], s.feature, &d_z1, None);
        }
        Ok(Gradients {
            loss: loss / T::of_usize(batch.len()),
            layers: g,
        })
    }
}

/// Accumulates `d_out ⊗ input` into `grad` and optionally writes `Wᵀ d_out`
/// into `d_input`.
fn backprop_dense<T: Scalar>(
    layer: &Dense<T>,
    grad: &mut Dense<T>,
    input: &[T],
    d_out: &[T],
    d_input: Option<&mut Vec<T>>,
) {
    for (i, &d) in d_out.iter().enumerate() {
        grad.bias[i] += d;
        let row = &mut grad.weights[i * layer.in_dim..(i + 1) * layer.in_dim];
        for (w, &x) in row.iter_mut().zip(input) {
            *w += d * x;
        }
    }
    if let Some(d_input) = d_input {
        d_input.iter_mut().for_each(|v| *v = T::zero());
        for (i, &d) in d_out.iter().enumerate() {
            for (acc, &w) in d_input.iter_mut().zip(layer.row(i)) {
                *acc += w * d;
            }
        }
    }
}

/// Mean over components of the squared difference.
pub fn mse_loss<T: Scalar>(prediction: &[T], target: &[T]) -> T {
    debug_assert_eq!(prediction.len(), target.len());
    let n = T::of_usize(prediction.len());
    prediction
        .iter()
        .zip(target)
        .map(|(&p, &t)| (p - t) * (p - t))
        .sum::<T>()
        / n
}

/// Semantic-space point for one nodule.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding<T> {
    pub nodule_id: String,
    pub values: Vec<T>,
}

#[cfg(test)]
mod tests;
