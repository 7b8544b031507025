use super::{AffineSimilarityParams, EmbeddingBatch, Grid, LossResult};
use crate::error::{Error, Result};
use crate::math::{axpy, cosine_grad_acc, dot, l2_normalize, softmax_cross_entropy};

/// Centroid of speaker `j` leaving out utterance `skip`, summed directly so
/// that it does not depend on the excluded embedding at all.
pub fn exclusive_centroid(batch: &EmbeddingBatch, j: usize, skip: usize) -> Vec<f64> {
    let mut c = vec![0.0; batch.dim()];
    for i in (0..batch.m()).filter(|&i| i != skip) {
        axpy(1.0, batch.get(j, i), &mut c);
    }
    let count = (batch.m() - 1) as f64;
    c.iter_mut().for_each(|v| *v /= count);
    c
}

/// Generalised end-to-end loss.
///
/// Every utterance is a query. Its own-speaker logit uses the centroid that
/// excludes it; other speakers use their full centroids. Logits are
/// `w·cos + b`, and the cross-entropy is averaged over all `N·M` queries.
pub fn ge2e_loss(batch: &EmbeddingBatch, params: &AffineSimilarityParams) -> Result<LossResult> {
    const OP: &str = "ge2e_loss";
    let (n, m, dim) = (batch.n(), batch.m(), batch.dim());
    if n < 2 {
        return Err(Error::domain(OP, "needs at least two speakers"));
    }
    if m < 2 {
        return Err(Error::domain(OP, format!("needs M >= 2, got {m}")));
    }

    let mut full = Vec::with_capacity(n);
    for k in 0..n {
        let mut c = vec![0.0; dim];
        for i in 0..m {
            axpy(1.0, batch.get(k, i), &mut c);
        }
        c.iter_mut().for_each(|v| *v /= m as f64);
        full.push(l2_normalize(OP, &c).map_err(|_| Error::domain(OP, format!("centroid {k} has zero norm")))?);
    }

    let queries = (n * m) as f64;
    let mut grad = Grid::zeros(n, m, dim);
    let mut full_grads = vec![vec![0.0; dim]; n];
    let mut excl_grad = vec![0.0; dim];
    let (mut grad_w, mut grad_b) = (0.0, 0.0);
    let mut cosines = vec![0.0; n];
    let mut logits = vec![0.0; n];
    let mut loss = 0.0;

    for j in 0..n {
        for i in 0..m {
            let (ux, nx) = l2_normalize(OP, batch.get(j, i))
                .map_err(|_| Error::domain(OP, format!("embedding ({j}, {i}) has zero norm")))?;
            let (u_excl, n_excl) = l2_normalize(OP, &exclusive_centroid(batch, j, i))
                .map_err(|_| Error::domain(OP, format!("exclusive centroid ({j}, {i}) has zero norm")))?;
            for k in 0..n {
                let uc = if k == j { &u_excl } else { &full[k].0 };
                cosines[k] = dot(&ux, uc).clamp(-1.0, 1.0);
                logits[k] = params.w * cosines[k] + params.b;
            }
            let (l, g) = softmax_cross_entropy(&logits, j)?;
            loss += l;

            excl_grad.fill(0.0);
            let mut gx = vec![0.0; dim];
            for k in 0..n {
                let gk = g[k] / queries;
                grad_w += gk * cosines[k];
                grad_b += gk;
                let (uc, nc, target) = if k == j {
                    (&u_excl, n_excl, &mut excl_grad)
                } else {
                    (&full[k].0, full[k].1, &mut full_grads[k])
                };
                cosine_grad_acc(&ux, nx, uc, nc, cosines[k], gk * params.w, Some(&mut gx), Some(target));
            }
            axpy(1.0, &gx, grad.get_mut(j, i));
            let share = 1.0 / (m - 1) as f64;
            for other in (0..m).filter(|&o| o != i) {
                axpy(share, &excl_grad, grad.get_mut(j, other));
            }
        }
    }
    for (k, gc) in full_grads.iter().enumerate() {
        for i in 0..m {
            axpy(1.0 / m as f64, gc, grad.get_mut(k, i));
        }
    }

    Ok(LossResult {
        loss: loss / queries,
        grad_embeddings: grad,
        grad_head: None,
        grad_w: Some(grad_w),
        grad_b: Some(grad_b),
    })
}
