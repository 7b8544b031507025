//! Small frame-level MLP with temporal average pooling and manual backprop.
//!
//! Each frame goes through `relu(W1·x + b1)`, the hidden activations are
//! averaged over time, and `W2·h̄ + b2` is the utterance embedding.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::Matrix;
use crate::sampling::SpeakerId;

/// Stabiliser added to the per-feature variance in [`instance_normalize`].
pub const MVN_EPSILON: f64 = 1e-5;

/// `T×F` frame features of one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    frames: Vec<f64>,
    num_frames: usize,
    feature_dim: usize,
    pub speaker: SpeakerId,
}

impl Utterance {
    pub fn new(frames: Vec<f64>, num_frames: usize, feature_dim: usize, speaker: SpeakerId) -> Result<Self> {
        if num_frames == 0 || feature_dim == 0 {
            return Err(Error::domain("Utterance::new", "need T >= 1 and F >= 1"));
        }
        if frames.len() != num_frames * feature_dim {
            return Err(Error::DimensionMismatch {
                op: "Utterance::new",
                expected: num_frames * feature_dim,
                got: frames.len(),
            });
        }
        if frames.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain("Utterance::new", "non-finite frame value"));
        }
        Ok(Self {
            frames,
            num_frames,
            feature_dim,
            speaker,
        })
    }

    pub fn num_frames(&self) -> usize {
        self.num_frames
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        &self.frames[t * self.feature_dim..(t + 1) * self.feature_dim]
    }

    pub fn frames(&self) -> &[f64] {
        &self.frames
    }

    /// Frames `start..start + len`, clipped to the utterance.
    pub fn crop(&self, start: usize, len: usize) -> Utterance {
        let start = start.min(self.num_frames - 1);
        let end = (start + len.max(1)).min(self.num_frames);
        Utterance {
            frames: self.frames[start * self.feature_dim..end * self.feature_dim].to_vec(),
            num_frames: end - start,
            feature_dim: self.feature_dim,
            speaker: self.speaker,
        }
    }

    /// Per-feature temporal mean.
    pub fn temporal_mean(&self) -> Vec<f64> {
        let mut mean = vec![0.0; self.feature_dim];
        for t in 0..self.num_frames {
            for (m, v) in mean.iter_mut().zip(self.frame(t)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= self.num_frames as f64);
        mean
    }
}

/// Mean and variance normalisation over time, independently per feature.
pub fn instance_normalize(u: &Utterance) -> Utterance {
    let (t_len, f_len) = (u.num_frames, u.feature_dim);
    let mean = u.temporal_mean();
    let mut var = vec![0.0; f_len];
    for t in 0..t_len {
        for ((v, x), m) in var.iter_mut().zip(u.frame(t)).zip(&mean) {
            *v += (x - m) * (x - m);
        }
    }
    let inv_std: Vec<f64> = var
        .iter()
        .map(|v| 1.0 / (v / t_len as f64 + MVN_EPSILON).sqrt())
        .collect();
    let mut frames = Vec::with_capacity(t_len * f_len);
    for t in 0..t_len {
        for (d, x) in u.frame(t).iter().enumerate() {
            frames.push((x - mean[d]) * inv_std[d]);
        }
    }
    Utterance {
        frames,
        num_frames: t_len,
        feature_dim: f_len,
        speaker: u.speaker,
    }
}

/// Input normalisation applied before the embedder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputNorm {
    /// Raw features.
    #[default]
    None,
    /// Per-utterance instance normalisation ([`instance_normalize`]).
    Mvn,
}

impl InputNorm {
    pub fn apply(self, u: &Utterance) -> Utterance {
        match self {
            InputNorm::None => u.clone(),
            InputNorm::Mvn => instance_normalize(u),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbedderConfig {
    pub input_dim: usize,
    pub hidden: usize,
    pub dim: usize,
    pub input_norm: InputNorm,
}

impl EmbedderConfig {
    pub fn new(input_dim: usize, hidden: usize, dim: usize) -> Self {
        Self {
            input_dim,
            hidden,
            dim,
            input_norm: InputNorm::None,
        }
    }

    pub fn param_count(&self) -> usize {
        self.hidden * self.input_dim + self.hidden + self.dim * self.hidden + self.dim
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbedderParams {
    config: EmbedderConfig,
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
    version: u64,
}

fn glorot<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Matrix {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-a..a))
}

impl EmbedderParams {
    /// Glorot-uniform weights, zero biases.
    pub fn init<R: Rng + ?Sized>(config: EmbedderConfig, rng: &mut R) -> Self {
        let w1 = glorot(config.hidden, config.input_dim, rng);
        let w2 = glorot(config.dim, config.hidden, rng);
        Self {
            config,
            w1,
            b1: vec![0.0; config.hidden],
            w2,
            b2: vec![0.0; config.dim],
            version: 0,
        }
    }

    pub fn from_parts(config: EmbedderConfig, w1: Matrix, b1: Vec<f64>, w2: Matrix, b2: Vec<f64>) -> Result<Self> {
        let shapes = [
            (w1.rows(), config.hidden),
            (w1.cols(), config.input_dim),
            (b1.len(), config.hidden),
            (w2.rows(), config.dim),
            (w2.cols(), config.hidden),
            (b2.len(), config.dim),
        ];
        for (got, expected) in shapes {
            if got != expected {
                return Err(Error::DimensionMismatch {
                    op: "EmbedderParams::from_parts",
                    expected,
                    got,
                });
            }
        }
        Ok(Self {
            config,
            w1,
            b1,
            w2,
            b2,
            version: 0,
        })
    }

    pub fn config(&self) -> &EmbedderConfig {
        &self.config
    }

    /// Bumped on every in-place update so stale caches can be detected.
    pub fn version(&self) -> u64 {
        self.version
    }

    /// Applies the configured input normalisation.
    pub fn prepare(&self, u: &Utterance) -> Utterance {
        self.config.input_norm.apply(u)
    }

    /// Parameters in the order `w1, b1, w2, b2`.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.config.param_count());
        out.extend_from_slice(self.w1.as_slice());
        out.extend_from_slice(&self.b1);
        out.extend_from_slice(self.w2.as_slice());
        out.extend_from_slice(&self.b2);
        out
    }

    pub fn load_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.config.param_count() {
            return Err(Error::DimensionMismatch {
                op: "EmbedderParams::load_flat",
                expected: self.config.param_count(),
                got: flat.len(),
            });
        }
        let mut rest = flat;
        for dst in [
            self.w1.as_mut_slice(),
            self.b1.as_mut_slice(),
            self.w2.as_mut_slice(),
            self.b2.as_mut_slice(),
        ] {
            let (head, tail) = rest.split_at(dst.len());
            dst.copy_from_slice(head);
            rest = tail;
        }
        self.version += 1;
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.w1.is_finite()
            && self.w2.is_finite()
            && self.b1.iter().chain(&self.b2).all(|v| v.is_finite())
    }
}

/// Activations kept from [`embed`] for [`backward`].
#[derive(Debug, Clone)]
pub struct EmbedCache {
    version: u64,
    num_frames: usize,
    input: Vec<f64>,
    active: Vec<bool>,
    mean_hidden: Vec<f64>,
}

pub fn embed(u: &Utterance, p: &EmbedderParams) -> Result<(Vec<f64>, EmbedCache)> {
    let cfg = p.config;
    if u.feature_dim != cfg.input_dim {
        return Err(Error::DimensionMismatch {
            op: "embed",
            expected: cfg.input_dim,
            got: u.feature_dim,
        });
    }
    let t_len = u.num_frames;
    let mut pre = vec![0.0; cfg.hidden];
    let mut active = Vec::with_capacity(t_len * cfg.hidden);
    let mut mean_hidden = vec![0.0; cfg.hidden];
    for t in 0..t_len {
        p.w1.mul_vec(u.frame(t), &mut pre);
        for ((h, &z), b) in mean_hidden.iter_mut().zip(&pre).zip(&p.b1) {
            let z = z + b;
            active.push(z > 0.0);
            if z > 0.0 {
                *h += z;
            }
        }
    }
    mean_hidden.iter_mut().for_each(|h| *h /= t_len as f64);

    let mut out = vec![0.0; cfg.dim];
    p.w2.mul_vec(&mean_hidden, &mut out);
    for (o, b) in out.iter_mut().zip(&p.b2) {
        *o += b;
    }
    let cache = EmbedCache {
        version: p.version,
        num_frames: t_len,
        input: u.frames.clone(),
        active,
        mean_hidden,
    };
    Ok((out, cache))
}

/// Gradients of a scalar objective w.r.t. the embedder parameters, and
/// optionally the (normalised) input frames.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbedderGrads {
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
    pub input: Option<Vec<f64>>,
}

impl EmbedderGrads {
    pub fn zeros(cfg: &EmbedderConfig) -> Self {
        Self {
            w1: Matrix::zeros(cfg.hidden, cfg.input_dim),
            b1: vec![0.0; cfg.hidden],
            w2: Matrix::zeros(cfg.dim, cfg.hidden),
            b2: vec![0.0; cfg.dim],
            input: None,
        }
    }

    /// Same layout as [`EmbedderParams::flatten`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        out.extend_from_slice(self.w1.as_slice());
        out.extend_from_slice(&self.b1);
        out.extend_from_slice(self.w2.as_slice());
        out.extend_from_slice(&self.b2);
        out
    }
}

/// Reverse pass of [`embed`]; parameter gradients are added into `grads`.
/// The input gradient is returned when `want_input` is set.
pub fn backward_into(
    grads: &mut EmbedderGrads,
    grad_embedding: &[f64],
    cache: &EmbedCache,
    p: &EmbedderParams,
    want_input: bool,
) -> Result<Option<Vec<f64>>> {
    let cfg = p.config;
    if cache.version != p.version {
        return Err(Error::domain(
            "backward",
            format!("stale cache: built for parameter version {}, now {}", cache.version, p.version),
        ));
    }
    if grad_embedding.len() != cfg.dim {
        return Err(Error::DimensionMismatch {
            op: "backward",
            expected: cfg.dim,
            got: grad_embedding.len(),
        });
    }
    grads.w2.add_outer(1.0, grad_embedding, &cache.mean_hidden);
    for (b, g) in grads.b2.iter_mut().zip(grad_embedding) {
        *b += g;
    }
    // ∂/∂h̄, then spread evenly over frames through the ReLU mask
    let mut grad_mean = vec![0.0; cfg.hidden];
    p.w2.mul_vec_transposed_acc(grad_embedding, &mut grad_mean);
    let t_len = cache.num_frames;
    grad_mean.iter_mut().for_each(|g| *g /= t_len as f64);

    let mut input_grad = want_input.then(|| vec![0.0; t_len * cfg.input_dim]);
    let mut gz = vec![0.0; cfg.hidden];
    for t in 0..t_len {
        let mask = &cache.active[t * cfg.hidden..(t + 1) * cfg.hidden];
        for ((z, &g), &on) in gz.iter_mut().zip(&grad_mean).zip(mask) {
            *z = if on { g } else { 0.0 };
        }
        let x = &cache.input[t * cfg.input_dim..(t + 1) * cfg.input_dim];
        grads.w1.add_outer(1.0, &gz, x);
        for (b, g) in grads.b1.iter_mut().zip(&gz) {
            *b += g;
        }
        if let Some(ig) = input_grad.as_mut() {
            p.w1
                .mul_vec_transposed_acc(&gz, &mut ig[t * cfg.input_dim..(t + 1) * cfg.input_dim]);
        }
    }
    Ok(input_grad)
}

pub fn backward(grad_embedding: &[f64], cache: &EmbedCache, p: &EmbedderParams) -> Result<EmbedderGrads> {
    let mut grads = EmbedderGrads::zeros(&p.config);
    grads.input = backward_into(&mut grads, grad_embedding, cache, p, true)?;
    Ok(grads)
}
