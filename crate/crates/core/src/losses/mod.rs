//! Forward values and hand-derived gradients for the training objectives.
//!
//! Classification objectives (softmax, NSL, AM-Softmax, AAM-Softmax) treat
//! the `N×M` batch as `N·M` independent labelled utterances. Metric-learning
//! objectives (triplet, prototypical, GE2E, angular prototypical) consume the
//! batch as an episode of `M` utterances from each of `N` speakers.
//!
//! Every loss is mean-reduced over its queries.

mod classification;
mod ge2e;
mod prototypical;
mod triplet;

pub use classification::{aam_softmax_loss, am_softmax_loss, nsl_loss, softmax_loss};
pub use ge2e::{exclusive_centroid, ge2e_loss};
pub use prototypical::{angular_prototypical_loss, prototypical_loss};
pub use triplet::{mine_negatives, triplet_loss};

use std::collections::HashSet;

use rand::Rng;

use crate::error::{Error, Result};
use crate::math::Matrix;
use crate::sampling::SpeakerId;

/// `N×M` grid of `D`-dimensional vectors, speaker-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    n: usize,
    m: usize,
    dim: usize,
    data: Vec<f64>,
}

impl Grid {
    pub fn zeros(n: usize, m: usize, dim: usize) -> Self {
        Self {
            n,
            m,
            dim,
            data: vec![0.0; n * m * dim],
        }
    }

    pub fn from_vec(n: usize, m: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if n == 0 || m == 0 || dim == 0 {
            return Err(Error::domain("Grid::from_vec", "N, M and D must be positive"));
        }
        if data.len() != n * m * dim {
            return Err(Error::DimensionMismatch {
                op: "Grid::from_vec",
                expected: n * m * dim,
                got: data.len(),
            });
        }
        Ok(Self { n, m, dim, data })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn offset(&self, j: usize, i: usize) -> usize {
        debug_assert!(j < self.n && i < self.m);
        (j * self.m + i) * self.dim
    }

    pub fn get(&self, j: usize, i: usize) -> &[f64] {
        let o = self.offset(j, i);
        &self.data[o..o + self.dim]
    }

    pub fn get_mut(&mut self, j: usize, i: usize) -> &mut [f64] {
        let o = self.offset(j, i);
        &mut self.data[o..o + self.dim]
    }

    /// Vector number `r` in speaker-major order (`r = j·M + i`).
    pub fn flat(&self, r: usize) -> &[f64] {
        &self.data[r * self.dim..(r + 1) * self.dim]
    }

    pub fn flat_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.dim..(r + 1) * self.dim]
    }

    pub fn len(&self) -> usize {
        self.n * self.m
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// An episodic batch: `M` embeddings from each of `N` distinct speakers.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch {
    embeddings: Grid,
    speakers: Vec<SpeakerId>,
}

impl EmbeddingBatch {
    pub fn new(embeddings: Grid, speakers: Vec<SpeakerId>) -> Result<Self> {
        if speakers.len() != embeddings.n() {
            return Err(Error::DimensionMismatch {
                op: "EmbeddingBatch::new",
                expected: embeddings.n(),
                got: speakers.len(),
            });
        }
        let distinct: HashSet<_> = speakers.iter().collect();
        if distinct.len() != speakers.len() {
            return Err(Error::domain(
                "EmbeddingBatch::new",
                "speaker ids must be distinct within a batch",
            ));
        }
        if !embeddings.is_finite() {
            return Err(Error::domain("EmbeddingBatch::new", "non-finite embedding"));
        }
        Ok(Self {
            embeddings,
            speakers,
        })
    }

    /// Batch with speakers labelled `0..N`.
    pub fn from_grid(embeddings: Grid) -> Result<Self> {
        let speakers = (0..embeddings.n() as u32).map(SpeakerId).collect();
        Self::new(embeddings, speakers)
    }

    pub fn embeddings(&self) -> &Grid {
        &self.embeddings
    }

    pub fn speakers(&self) -> &[SpeakerId] {
        &self.speakers
    }

    pub fn n(&self) -> usize {
        self.embeddings.n()
    }

    pub fn m(&self) -> usize {
        self.embeddings.m()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.dim()
    }

    pub fn get(&self, j: usize, i: usize) -> &[f64] {
        self.embeddings.get(j, i)
    }
}

/// Final-layer weights (`C×D`) and bias (`C`) for classification objectives.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

impl ClassifierHead {
    pub fn zeros(classes: usize, dim: usize) -> Self {
        Self {
            weights: Matrix::zeros(classes, dim),
            bias: vec![0.0; classes],
        }
    }

    /// Glorot-uniform weights, zero bias.
    pub fn init<R: Rng + ?Sized>(classes: usize, dim: usize, rng: &mut R) -> Self {
        let a = (6.0 / (classes + dim) as f64).sqrt();
        Self {
            weights: Matrix::from_fn(classes, dim, |_, _| rng.random_range(-a..a)),
            bias: vec![0.0; classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.weights.rows()
    }

    pub fn dim(&self) -> usize {
        self.weights.cols()
    }
}

/// Scale `s` and margin `m` of the margin-penalised softmax objectives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarginConfig {
    pub margin: f64,
    pub scale: f64,
}

impl MarginConfig {
    pub fn new(margin: f64, scale: f64) -> Result<Self> {
        let cfg = Self { margin, scale };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.margin >= 0.0) || !self.margin.is_finite() {
            return Err(Error::domain("MarginConfig", format!("margin {} must be >= 0", self.margin)));
        }
        if !(self.scale > 0.0) || !self.scale.is_finite() {
            return Err(Error::domain("MarginConfig", format!("scale {} must be > 0", self.scale)));
        }
        Ok(())
    }
}

/// Learnable scale and bias applied to cosine similarities (`w·cos + b`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineSimilarityParams {
    pub w: f64,
    pub b: f64,
}

impl AffineSimilarityParams {
    pub const MIN_SCALE: f64 = 1e-6;

    /// Keeps the scale strictly positive after an optimizer update.
    pub fn project(&mut self) {
        self.w = self.w.max(Self::MIN_SCALE);
    }
}

impl Default for AffineSimilarityParams {
    fn default() -> Self {
        Self { w: 10.0, b: -5.0 }
    }
}

/// Loss value plus gradients w.r.t. the embeddings and any learnable loss parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LossResult {
    pub loss: f64,
    pub grad_embeddings: Grid,
    pub grad_head: Option<ClassifierHead>,
    pub grad_w: Option<f64>,
    pub grad_b: Option<f64>,
}

impl LossResult {
    pub fn is_finite(&self) -> bool {
        self.loss.is_finite()
            && self.grad_embeddings.is_finite()
            && self
                .grad_head
                .as_ref()
                .is_none_or(|h| h.weights.is_finite() && h.bias.iter().all(|v| v.is_finite()))
            && self.grad_w.is_none_or(f64::is_finite)
            && self.grad_b.is_none_or(f64::is_finite)
    }
}

fn require_labels(op: &'static str, batch: &EmbeddingBatch, labels: &[usize], classes: usize) -> Result<()> {
    if labels.len() != batch.embeddings().len() {
        return Err(Error::DimensionMismatch {
            op,
            expected: batch.embeddings().len(),
            got: labels.len(),
        });
    }
    if let Some(bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::domain(op, format!("label {bad} out of range for {classes} classes")));
    }
    Ok(())
}

fn require_head_dim(op: &'static str, batch: &EmbeddingBatch, head: &ClassifierHead) -> Result<()> {
    if head.dim() != batch.dim() {
        return Err(Error::DimensionMismatch {
            op,
            expected: batch.dim(),
            got: head.dim(),
        });
    }
    if head.bias.len() != head.classes() {
        return Err(Error::DimensionMismatch {
            op,
            expected: head.classes(),
            got: head.bias.len(),
        });
    }
    Ok(())
}
