#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use spkmetric::losses::{ClassifierHead, EmbeddingBatch, Grid};
use spkmetric::math::Matrix;
use spkmetric::sampling::SpeakerId;

pub const FD_STEP: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn random_grid(rng: &mut impl Rng, n: usize, m: usize, d: usize) -> Grid {
    let data = (0..n * m * d).map(|_| normal(rng)).collect();
    Grid::from_vec(n, m, d, data).unwrap()
}

pub fn batch_of(grid: Grid) -> EmbeddingBatch {
    EmbeddingBatch::from_grid(grid).unwrap()
}

pub fn random_batch(rng: &mut impl Rng, n: usize, m: usize, d: usize) -> EmbeddingBatch {
    batch_of(random_grid(rng, n, m, d))
}

pub fn random_head(rng: &mut impl Rng, c: usize, d: usize) -> ClassifierHead {
    ClassifierHead {
        weights: Matrix::from_fn(c, d, |_, _| normal(rng)),
        bias: (0..c).map(|_| normal(rng)).collect(),
    }
}

/// Relative error with an absolute floor of 1e-3 on the magnitude.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

/// Central difference of `f` along every coordinate of `x`.
pub fn central_differences(x: &[f64], f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|k| {
            p[k] = x[k] + FD_STEP;
            let up = f(&p);
            p[k] = x[k] - FD_STEP;
            let down = f(&p);
            p[k] = x[k];
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &b)| rel_err(a, b))
        .fold(0.0, f64::max)
}

/// Rebuilds a batch with the same shape and speakers around new values.
pub fn with_values(batch: &EmbeddingBatch, values: &[f64]) -> EmbeddingBatch {
    let g = batch.embeddings();
    let grid = Grid::from_vec(g.n(), g.m(), g.dim(), values.to_vec()).unwrap();
    EmbeddingBatch::new(grid, batch.speakers().to_vec()).unwrap()
}

/// Speaker-major batch whose speaker rows are taken in `perm` order.
pub fn permute_speakers(batch: &EmbeddingBatch, perm: &[usize]) -> EmbeddingBatch {
    let (n, m, d) = (batch.n(), batch.m(), batch.dim());
    let mut data = Vec::with_capacity(n * m * d);
    for &j in perm {
        for i in 0..m {
            data.extend_from_slice(batch.get(j, i));
        }
    }
    let speakers: Vec<SpeakerId> = perm.iter().map(|&j| batch.speakers()[j]).collect();
    EmbeddingBatch::new(Grid::from_vec(n, m, d, data).unwrap(), speakers).unwrap()
}

/// Same permutation applied to the rows of a gradient grid.
pub fn permute_grid(g: &Grid, perm: &[usize]) -> Vec<f64> {
    let mut out = Vec::with_capacity(g.len());
    for &j in perm {
        for i in 0..g.m() {
            out.extend_from_slice(g.get(j, i));
        }
    }
    out
}

pub fn random_permutation(rng: &mut impl Rng, n: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(rng);
    p
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
