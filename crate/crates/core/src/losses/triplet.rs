use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{EmbeddingBatch, Grid, LossResult};
use crate::error::{Error, Result};
use crate::math::{l2_normalize, squared_euclidean, unnormalize_grad};
use crate::sampling::{select_negative, MiningPolicy};

struct Normalized {
    units: Vec<Vec<f64>>,
    norms: Vec<f64>,
}

fn normalize_batch(batch: &EmbeddingBatch) -> Result<Normalized> {
    let emb = batch.embeddings();
    let mut units = Vec::with_capacity(emb.len());
    let mut norms = Vec::with_capacity(emb.len());
    for r in 0..emb.len() {
        let (u, n) = l2_normalize("triplet_loss", emb.flat(r))?;
        units.push(u);
        norms.push(n);
    }
    Ok(Normalized { units, norms })
}

fn check_shape(batch: &EmbeddingBatch) -> Result<()> {
    if batch.m() != 2 {
        return Err(Error::domain(
            "triplet_loss",
            format!("requires exactly 2 utterances per speaker, got {}", batch.m()),
        ));
    }
    if batch.n() < 2 {
        return Err(Error::domain("triplet_loss", "at least two speakers are needed for a negative"));
    }
    Ok(())
}

fn mine(batch: &EmbeddingBatch, unit: &Normalized, policy: &MiningPolicy, epoch: usize, seed: u64) -> Result<Vec<usize>> {
    policy.validate()?;
    let n = batch.n();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut negatives = Vec::with_capacity(n);
    for j in 0..n {
        let anchor = &unit.units[2 * j];
        let candidates = (0..n)
            .filter(|&k| k != j)
            .map(|k| squared_euclidean(anchor, &unit.units[2 * k + 1]))
            .collect::<Result<Vec<_>>>()?;
        negatives.push(select_negative(j, &candidates, policy, epoch, &mut rng));
    }
    Ok(negatives)
}

/// Negative speaker chosen for each anchor under `policy`.
///
/// Candidates for anchor `x_{j,0}` are the second utterances `x_{k,1}`,
/// `k ≠ j`, ranked by squared distance on the unit sphere.
pub fn mine_negatives(batch: &EmbeddingBatch, policy: &MiningPolicy, epoch: usize, seed: u64) -> Result<Vec<usize>> {
    check_shape(batch)?;
    let unit = normalize_batch(batch)?;
    mine(batch, &unit, policy, epoch, seed)
}

/// Hinge triplet loss on L2-normalised embeddings.
///
/// Anchor `x_{j,0}`, positive `x_{j,1}`, negative `x_{k,1}` chosen by the
/// mining policy. Inactive hinges (including exactly zero) contribute no gradient.
pub fn triplet_loss(
    batch: &EmbeddingBatch,
    margin: f64,
    policy: &MiningPolicy,
    epoch: usize,
    seed: u64,
) -> Result<LossResult> {
    check_shape(batch)?;
    if !(margin >= 0.0) {
        return Err(Error::domain("triplet_loss", format!("margin {margin} must be >= 0")));
    }
    let unit = normalize_batch(batch)?;
    let negatives = mine(batch, &unit, policy, epoch, seed)?;

    let n = batch.n();
    let dim = batch.dim();
    let mut grad_unit = vec![vec![0.0; dim]; 2 * n];
    let mut loss = 0.0;
    for (j, &k) in negatives.iter().enumerate() {
        let a = &unit.units[2 * j];
        let p = &unit.units[2 * j + 1];
        let neg = &unit.units[2 * k + 1];
        let violation = squared_euclidean(a, p)? - squared_euclidean(a, neg)? + margin;
        if violation <= 0.0 {
            continue;
        }
        loss += violation;
        let scale = 2.0 / n as f64;
        for d in 0..dim {
            grad_unit[2 * j][d] += scale * (neg[d] - p[d]);
            grad_unit[2 * j + 1][d] += scale * (p[d] - a[d]);
            grad_unit[2 * k + 1][d] += scale * (a[d] - neg[d]);
        }
    }

    let mut grad = Grid::zeros(n, 2, dim);
    for (r, g) in grad_unit.iter().enumerate() {
        unnormalize_grad(&unit.units[r], unit.norms[r], g, grad.flat_mut(r));
    }
    Ok(LossResult {
        loss: loss / n as f64,
        grad_embeddings: grad,
        grad_head: None,
        grad_w: None,
        grad_b: None,
    })
}
