use super::{AffineSimilarityParams, EmbeddingBatch, Grid, LossResult};
use crate::error::{Error, Result};
use crate::math::{axpy, cosine_grad_acc, dot, l2_normalize, softmax_cross_entropy, squared_euclidean};

/// Centroids of the support utterances `0..M−1` of every speaker; the last
/// utterance of each speaker is the query.
fn support_centroids(op: &'static str, batch: &EmbeddingBatch) -> Result<Vec<Vec<f64>>> {
    let m = batch.m();
    if m < 2 {
        return Err(Error::domain(op, format!("needs M >= 2 (support + query), got {m}")));
    }
    let support = (m - 1) as f64;
    Ok((0..batch.n())
        .map(|k| {
            let mut c = vec![0.0; batch.dim()];
            for i in 0..m - 1 {
                axpy(1.0, batch.get(k, i), &mut c);
            }
            c.iter_mut().for_each(|v| *v /= support);
            c
        })
        .collect())
}

/// Spreads centroid gradients back onto the support utterances.
fn scatter_centroid_grads(grad: &mut Grid, centroid_grads: &[Vec<f64>]) {
    let m = grad.m();
    let share = 1.0 / (m - 1) as f64;
    for (k, gc) in centroid_grads.iter().enumerate() {
        for i in 0..m - 1 {
            axpy(share, gc, grad.get_mut(k, i));
        }
    }
}

/// Softmax over negative squared distances from each query to every centroid.
pub fn prototypical_loss(batch: &EmbeddingBatch) -> Result<LossResult> {
    const OP: &str = "prototypical_loss";
    let centroids = support_centroids(OP, batch)?;
    let (n, m, dim) = (batch.n(), batch.m(), batch.dim());
    let q = m - 1;

    let mut grad = Grid::zeros(n, m, dim);
    let mut centroid_grads = vec![vec![0.0; dim]; n];
    let mut logits = vec![0.0; n];
    let mut loss = 0.0;
    for j in 0..n {
        let query = batch.get(j, q);
        for (k, c) in centroids.iter().enumerate() {
            logits[k] = -squared_euclidean(query, c)?;
        }
        let (l, g) = softmax_cross_entropy(&logits, j)?;
        loss += l;
        for (k, c) in centroids.iter().enumerate() {
            let gk = g[k] / n as f64;
            if gk == 0.0 {
                continue;
            }
            // ∂(−‖q − c‖²)/∂q = −2(q − c), ∂/∂c = 2(q − c)
            let gq = grad.get_mut(j, q);
            for d in 0..dim {
                let diff = query[d] - c[d];
                gq[d] -= 2.0 * gk * diff;
                centroid_grads[k][d] += 2.0 * gk * diff;
            }
        }
    }
    scatter_centroid_grads(&mut grad, &centroid_grads);
    Ok(LossResult {
        loss: loss / n as f64,
        grad_embeddings: grad,
        grad_head: None,
        grad_w: None,
        grad_b: None,
    })
}

/// Prototypical batch formation with scaled cosine logits `w·cos(q_j, c_k) + b`.
pub fn angular_prototypical_loss(batch: &EmbeddingBatch, params: &AffineSimilarityParams) -> Result<LossResult> {
    const OP: &str = "angular_prototypical_loss";
    if batch.n() < 2 {
        return Err(Error::domain(OP, "needs at least two speakers"));
    }
    let centroids = support_centroids(OP, batch)?;
    let (n, m, dim) = (batch.n(), batch.m(), batch.dim());
    let q = m - 1;

    let mut unit_c = Vec::with_capacity(n);
    for (k, c) in centroids.iter().enumerate() {
        unit_c.push(l2_normalize(OP, c).map_err(|_| Error::domain(OP, format!("centroid {k} has zero norm")))?);
    }

    let mut grad = Grid::zeros(n, m, dim);
    let mut centroid_grads = vec![vec![0.0; dim]; n];
    let (mut grad_w, mut grad_b) = (0.0, 0.0);
    let mut cosines = vec![0.0; n];
    let mut logits = vec![0.0; n];
    let mut loss = 0.0;
    for j in 0..n {
        let (uq, nq) =
            l2_normalize(OP, batch.get(j, q)).map_err(|_| Error::domain(OP, format!("query {j} has zero norm")))?;
        for k in 0..n {
            cosines[k] = dot(&uq, &unit_c[k].0).clamp(-1.0, 1.0);
            logits[k] = params.w * cosines[k] + params.b;
        }
        let (l, g) = softmax_cross_entropy(&logits, j)?;
        loss += l;
        for k in 0..n {
            let gk = g[k] / n as f64;
            grad_w += gk * cosines[k];
            grad_b += gk;
            let (uc, nc) = &unit_c[k];
            cosine_grad_acc(
                &uq,
                nq,
                uc,
                *nc,
                cosines[k],
                gk * params.w,
                Some(grad.get_mut(j, q)),
                Some(&mut centroid_grads[k]),
            );
        }
    }
    scatter_centroid_grads(&mut grad, &centroid_grads);
    Ok(LossResult {
        loss: loss / n as f64,
        grad_embeddings: grad,
        grad_head: None,
        grad_w: Some(grad_w),
        grad_b: Some(grad_b),
    })
}
