//! Contrastive relation encoder.
//!
//! A two-layer perceptron maps a relation-change pair `[r(t-1); r(t)]` to a
//! unit-norm relation token. Training minimizes the triplet hinge
//! `max(0, d(a, p) - d(a, n) + margin)` over anchor/positive pairs drawn from
//! positive samples and semi-hard negatives mined from a pool, using Adam
//! with a step-decayed learning rate. Gradients are derived by hand.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, VaderError};
use crate::volatility::{Label, RelationChangePair};

/// Pre-normalization norms below this are rejected.
pub const MIN_TOKEN_NORM: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderParams {
    pub input_dim: usize,
    pub hidden: usize,
    pub token_dim: usize,
    /// `hidden x input_dim`, row-major.
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    /// `token_dim x hidden`, row-major.
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl EncoderParams {
    pub fn zeros(input_dim: usize, hidden: usize, token_dim: usize) -> Self {
        Self {
            input_dim,
            hidden,
            token_dim,
            w1: vec![0.0; hidden * input_dim],
            b1: vec![0.0; hidden],
            w2: vec![0.0; token_dim * hidden],
            b2: vec![0.0; token_dim],
        }
    }

    /// Uniform `±sqrt(6 / (fan_in + fan_out))` weights, zero biases.
    pub fn init<R: Rng>(input_dim: usize, hidden: usize, token_dim: usize, rng: &mut R) -> Self {
        let mut p = Self::zeros(input_dim, hidden, token_dim);
        let l1 = (6.0 / (input_dim + hidden) as f64).sqrt();
        for w in &mut p.w1 {
            *w = rng.random_range(-l1..l1);
        }
        let l2 = (6.0 / (hidden + token_dim) as f64).sqrt();
        for w in &mut p.w2 {
            *w = rng.random_range(-l2..l2);
        }
        p
    }

    pub fn validate(&self) -> Result<()> {
        let shapes = [
            ("w1", self.w1.len(), self.hidden * self.input_dim),
            ("b1", self.b1.len(), self.hidden),
            ("w2", self.w2.len(), self.token_dim * self.hidden),
            ("b2", self.b2.len(), self.token_dim),
        ];
        for (name, got, want) in shapes {
            if got != want {
                return Err(VaderError::SchemaViolation(format!(
                    "encoder {name} has {got} entries, expected {want}"
                )));
            }
        }
        if self.params().any(|v| !v.is_finite()) {
            return Err(VaderError::ValueOutOfRange("encoder parameters must be finite".into()));
        }
        Ok(())
    }

    fn params(&self) -> impl Iterator<Item = &f64> {
        self.w1.iter().chain(&self.b1).chain(&self.w2).chain(&self.b2)
    }

    fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.w1
            .iter_mut()
            .chain(self.b1.iter_mut())
            .chain(self.w2.iter_mut())
            .chain(self.b2.iter_mut())
    }

    /// Every parameter as one flat vector (w1, b1, w2, b2 order).
    pub fn flatten(&self) -> Vec<f64> {
        self.params().copied().collect()
    }

    pub fn num_params(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    /// Mutable access to the `k`-th flat parameter.
    pub fn param_mut(&mut self, k: usize) -> &mut f64 {
        self.params_mut().nth(k).expect("parameter index in range")
    }

    fn add_scaled(&mut self, other: &Self, scale: f64) {
        for (a, b) in self.params_mut().zip(other.params()) {
            *a += scale * b;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationToken {
    pub vec: Vec<f64>,
}

/// Intermediate values of one forward pass, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct Forward {
    pub input: Vec<f64>,
    pub pre_activation: Vec<f64>,
    pub hidden: Vec<f64>,
    pub norm: f64,
    pub token: Vec<f64>,
}

pub fn forward(params: &EncoderParams, input: &[f64]) -> Result<Forward> {
    if input.len() != params.input_dim {
        return Err(VaderError::SchemaViolation(format!(
            "encoder input has length {}, expected {}",
            input.len(),
            params.input_dim
        )));
    }
    let d = params.input_dim;
    let pre: Vec<f64> = (0..params.hidden)
        .map(|r| {
            let row = &params.w1[r * d..(r + 1) * d];
            params.b1[r] + row.iter().zip(input).map(|(w, x)| w * x).sum::<f64>()
        })
        .collect();
    let hidden: Vec<f64> = pre.iter().map(|&a| a.max(0.0)).collect();
    let h = params.hidden;
    let z: Vec<f64> = (0..params.token_dim)
        .map(|r| {
            let row = &params.w2[r * h..(r + 1) * h];
            params.b2[r] + row.iter().zip(&hidden).map(|(w, x)| w * x).sum::<f64>()
        })
        .collect();
    let norm = z.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(norm >= MIN_TOKEN_NORM) {
        return Err(VaderError::DegenerateToken(norm));
    }
    Ok(Forward {
        input: input.to_vec(),
        pre_activation: pre,
        hidden,
        norm,
        token: z.into_iter().map(|v| v / norm).collect(),
    })
}

/// `normalize(W2 relu(W1 x + b1) + b2)`.
pub fn encode(params: &EncoderParams, pair: &[f64]) -> Result<RelationToken> {
    forward(params, pair).map(|f| RelationToken { vec: f.token })
}

/// Accumulates `d loss / d params` into `grads` given `d loss / d token`.
fn backward(params: &EncoderParams, fwd: &Forward, grad_token: &[f64], grads: &mut EncoderParams) {
    let f = &fwd.token;
    let proj: f64 = f.iter().zip(grad_token).map(|(a, b)| a * b).sum();
    let gz: Vec<f64> = f
        .iter()
        .zip(grad_token)
        .map(|(fi, gi)| (gi - fi * proj) / fwd.norm)
        .collect();
    let h = params.hidden;
    let mut gh = vec![0.0; h];
    for (r, &g) in gz.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        grads.b2[r] += g;
        let row = r * h;
        for k in 0..h {
            grads.w2[row + k] += g * fwd.hidden[k];
            gh[k] += g * params.w2[row + k];
        }
    }
    let d = params.input_dim;
    for k in 0..h {
        if fwd.pre_activation[k] <= 0.0 {
            continue;
        }
        let g = gh[k];
        grads.b1[k] += g;
        let row = k * d;
        for (c, x) in fwd.input.iter().enumerate() {
            grads.w1[row + c] += g * x;
        }
    }
}

pub fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// `max(0, d(a, p) - d(a, n) + margin)` with Euclidean `d`.
pub fn triplet_loss(anchor: &[f64], positive: &[f64], negative: &[f64], margin: f64) -> f64 {
    (distance(anchor, positive) - distance(anchor, negative) + margin).max(0.0)
}

/// Picks the negative with `d(a,p) < d(a,n) < d(a,p) + margin` closest to the
/// anchor; when none qualifies, the farthest negative. Ties keep the earliest.
///
/// Panics on an empty pool.
pub fn semi_hard_mine<T: AsRef<[f64]>>(anchor: &[f64], positive: &[f64], pool: &[T], margin: f64) -> usize {
    assert!(!pool.is_empty(), "negative pool must not be empty");
    let dap = distance(anchor, positive);
    let dists: Vec<f64> = pool.iter().map(|n| distance(anchor, n.as_ref())).collect();
    let mut band: Option<usize> = None;
    for (i, &d) in dists.iter().enumerate() {
        if d > dap && d < dap + margin && band.is_none_or(|b| d < dists[b]) {
            band = Some(i);
        }
    }
    band.unwrap_or_else(|| {
        let mut far = 0;
        for (i, &d) in dists.iter().enumerate() {
            if d > dists[far] {
                far = i;
            }
        }
        far
    })
}

/// Loss and gradient contributions from three already-computed forward passes.
fn triplet_backward(
    params: &EncoderParams,
    a: &Forward,
    p: &Forward,
    n: &Forward,
    margin: f64,
    grads: &mut EncoderParams,
) -> f64 {
    let dap = distance(&a.token, &p.token);
    let dan = distance(&a.token, &n.token);
    let loss = dap - dan + margin;
    if loss <= 0.0 {
        return 0.0;
    }
    let dim = a.token.len();
    let mut ga = vec![0.0; dim];
    let mut gp = vec![0.0; dim];
    let mut gn = vec![0.0; dim];
    if dap > 0.0 {
        for k in 0..dim {
            let u = (a.token[k] - p.token[k]) / dap;
            ga[k] += u;
            gp[k] -= u;
        }
    }
    if dan > 0.0 {
        for k in 0..dim {
            let u = (a.token[k] - n.token[k]) / dan;
            ga[k] -= u;
            gn[k] += u;
        }
    }
    backward(params, a, &ga, grads);
    backward(params, p, &gp, grads);
    backward(params, n, &gn, grads);
    loss
}

/// Triplet loss and its exact gradient with respect to every parameter.
/// The hinge is treated as flat at its kink.
pub fn loss_gradients(
    params: &EncoderParams,
    anchor: &[f64],
    positive: &[f64],
    negative: &[f64],
    margin: f64,
) -> Result<(f64, EncoderParams)> {
    let a = forward(params, anchor)?;
    let p = forward(params, positive)?;
    let n = forward(params, negative)?;
    let mut grads = EncoderParams::zeros(params.input_dim, params.hidden, params.token_dim);
    let loss = triplet_backward(params, &a, &p, &n, margin, &mut grads);
    Ok((loss, grads))
}

/// Summed loss and gradient over a batch of `(anchor, positive, negative)` inputs.
pub fn batch_gradients(
    params: &EncoderParams,
    triplets: &[(&[f64], &[f64], &[f64])],
    margin: f64,
) -> Result<(f64, EncoderParams)> {
    let mut grads = EncoderParams::zeros(params.input_dim, params.hidden, params.token_dim);
    let mut total = 0.0;
    for (a, p, n) in triplets {
        let (fa, fp, fnn) = (forward(params, a)?, forward(params, p)?, forward(params, n)?);
        total += triplet_backward(params, &fa, &fp, &fnn, margin, &mut grads);
    }
    Ok((total, grads))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub margin: f64,
    pub pool_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub lr_step: usize,
    pub lr_gamma: f64,
    pub batch_size: usize,
    pub hidden: usize,
    pub token_dim: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            margin: 0.5,
            pool_size: 30,
            learning_rate: 1e-4,
            epochs: 50,
            lr_step: 20,
            lr_gamma: 0.5,
            batch_size: 64,
            hidden: 256,
            token_dim: 128,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(VaderError::InvalidConfig(m));
        if !(self.margin > 0.0) {
            return bad(format!("margin {} must be positive", self.margin));
        }
        if self.pool_size == 0 || self.batch_size == 0 || self.lr_step == 0 {
            return bad("pool_size, batch_size and lr_step must be at least 1".into());
        }
        if !(self.learning_rate > 0.0) || !(self.lr_gamma > 0.0) {
            return bad("learning_rate and lr_gamma must be positive".into());
        }
        if self.hidden == 0 || self.token_dim == 0 {
            return bad("hidden and token_dim must be at least 1".into());
        }
        Ok(())
    }

    /// Step-decayed rate for a 0-based epoch.
    pub fn rate_at(&self, epoch: usize) -> f64 {
        self.learning_rate * self.lr_gamma.powi((epoch / self.lr_step) as i32)
    }
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    step: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }

    fn update(&mut self, params: &mut EncoderParams, grads: &EncoderParams, lr: f64) {
        self.step += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.step);
        let c2 = 1.0 - Self::BETA2.powi(self.step);
        for (((w, g), m), v) in params
            .params_mut()
            .zip(grads.params())
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            *m = Self::BETA1 * *m + (1.0 - Self::BETA1) * g;
            *v = Self::BETA2 * *v + (1.0 - Self::BETA2) * g * g;
            *w -= lr * (*m / c1) / ((*v / c2).sqrt() + Self::EPS);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub params: EncoderParams,
    /// Mean triplet loss per epoch, measured before each update.
    pub history: Vec<f64>,
}

/// Trains the encoder on labeled relation-change pairs. Deterministic given
/// the samples and `config` (including its seed).
pub fn train(samples: &[RelationChangePair], config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let positives: Vec<&[f64]> = samples
        .iter()
        .filter(|s| s.label == Label::Positive)
        .map(|s| s.vec.as_slice())
        .collect();
    let negatives: Vec<&[f64]> = samples
        .iter()
        .filter(|s| s.label == Label::Negative)
        .map(|s| s.vec.as_slice())
        .collect();
    if positives.is_empty() {
        return Err(VaderError::EmptyMiningResult("no positive samples to train on".into()));
    }
    if negatives.is_empty() {
        return Err(VaderError::EmptyMiningResult("no negative samples to train on".into()));
    }
    let input_dim = positives[0].len();
    if let Some(bad) = samples.iter().find(|s| s.vec.len() != input_dim) {
        return Err(VaderError::SchemaViolation(format!(
            "sample from {} has length {}, expected {input_dim}",
            bad.source.video_id,
            bad.vec.len()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = EncoderParams::init(input_dim, config.hidden, config.token_dim, &mut rng);
    let mut history = Vec::with_capacity(config.epochs);
    if config.epochs == 0 {
        return Ok(TrainOutcome { params, history });
    }
    let mut adam = Adam::new(params.num_params());
    let steps_per_epoch = samples.len().div_ceil(config.batch_size).max(1);
    let pool_len = config.pool_size.min(negatives.len());

    for epoch in 0..config.epochs {
        let lr = config.rate_at(epoch);
        let mut epoch_loss = 0.0;
        let mut epoch_count = 0usize;
        for _ in 0..steps_per_epoch {
            let pos_fwd = positives
                .iter()
                .map(|x| forward(&params, x))
                .collect::<Result<Vec<_>>>()?;
            let neg_fwd = negatives
                .iter()
                .map(|x| forward(&params, x))
                .collect::<Result<Vec<_>>>()?;
            let mut grads = EncoderParams::zeros(input_dim, config.hidden, config.token_dim);
            for _ in 0..config.batch_size {
                let (ai, pi) = if positives.len() >= 2 {
                    let pick = index::sample(&mut rng, positives.len(), 2);
                    (pick.index(0), pick.index(1))
                } else {
                    (0, 0)
                };
                let pool = index::sample(&mut rng, negatives.len(), pool_len).into_vec();
                let pool_tokens: Vec<&[f64]> = pool.iter().map(|&i| neg_fwd[i].token.as_slice()).collect();
                let chosen = pool[semi_hard_mine(&pos_fwd[ai].token, &pos_fwd[pi].token, &pool_tokens, config.margin)];
                epoch_loss += triplet_backward(
                    &params,
                    &pos_fwd[ai],
                    &pos_fwd[pi],
                    &neg_fwd[chosen],
                    config.margin,
                    &mut grads,
                );
                epoch_count += 1;
            }
            let mut mean = EncoderParams::zeros(input_dim, config.hidden, config.token_dim);
            mean.add_scaled(&grads, 1.0 / config.batch_size as f64);
            adam.update(&mut params, &mean, lr);
        }
        history.push(epoch_loss / epoch_count as f64);
    }
    Ok(TrainOutcome { params, history })
}
