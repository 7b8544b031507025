use std::f64::consts::PI;

use super::{require_head_dim, require_labels, ClassifierHead, EmbeddingBatch, Grid, LossResult, MarginConfig};
use crate::error::{Error, Result};
use crate::math::{axpy, dot, l2_normalize, softmax_cross_entropy, Matrix};

/// Cross-entropy over unnormalised logits `W x + b`.
pub fn softmax_loss(batch: &EmbeddingBatch, labels: &[usize], head: &ClassifierHead) -> Result<LossResult> {
    const OP: &str = "softmax_loss";
    require_head_dim(OP, batch, head)?;
    require_labels(OP, batch, labels, head.classes())?;

    let emb = batch.embeddings();
    let count = emb.len() as f64;
    let classes = head.classes();
    let mut grad_x = Grid::zeros(emb.n(), emb.m(), emb.dim());
    let mut grad_head = ClassifierHead::zeros(classes, head.dim());
    let mut logits = vec![0.0; classes];
    let mut loss = 0.0;

    for (r, &y) in labels.iter().enumerate() {
        let x = emb.flat(r);
        head.weights.mul_vec(x, &mut logits);
        for (z, b) in logits.iter_mut().zip(&head.bias) {
            *z += b;
        }
        let (l, g) = softmax_cross_entropy(&logits, y)?;
        loss += l;
        let gx = grad_x.flat_mut(r);
        for (c, &gc) in g.iter().enumerate() {
            let gc = gc / count;
            if gc == 0.0 {
                continue;
            }
            axpy(gc, head.weights.row(c), gx);
            axpy(gc, x, grad_head.weights.row_mut(c));
            grad_head.bias[c] += gc;
        }
    }

    Ok(LossResult {
        loss: loss / count,
        grad_embeddings: grad_x,
        grad_head: Some(grad_head),
        grad_w: None,
        grad_b: None,
    })
}

/// Normalised softmax: logits are plain cosines between embeddings and class weights.
pub fn nsl_loss(batch: &EmbeddingBatch, labels: &[usize], head: &ClassifierHead) -> Result<LossResult> {
    cosine_softmax("nsl_loss", batch, labels, head, 1.0, |c| (c, 1.0))
}

/// Additive cosine margin: target logit `s·(cosθ − m)`, others `s·cosθ`.
pub fn am_softmax_loss(
    batch: &EmbeddingBatch,
    labels: &[usize],
    head: &ClassifierHead,
    cfg: MarginConfig,
) -> Result<LossResult> {
    cfg.validate()?;
    let m = cfg.margin;
    cosine_softmax("am_softmax_loss", batch, labels, head, cfg.scale, move |c| (c - m, 1.0))
}

/// Additive angular margin: target logit `s·cos(θ + m)`.
///
/// When `θ + m > π` the target logit falls back to `s·(cosθ − m·sin m)`,
/// which keeps it monotone in θ.
pub fn aam_softmax_loss(
    batch: &EmbeddingBatch,
    labels: &[usize],
    head: &ClassifierHead,
    cfg: MarginConfig,
) -> Result<LossResult> {
    cfg.validate()?;
    if cfg.margin >= PI / 2.0 {
        return Err(Error::domain(
            "aam_softmax_loss",
            format!("angular margin {} must be below pi/2", cfg.margin),
        ));
    }
    let (cos_m, sin_m) = (cfg.margin.cos(), cfg.margin.sin());
    // cos(θ) < cos(π − m) ⇔ θ + m > π
    let threshold = (PI - cfg.margin).cos();
    let fallback_shift = cfg.margin * sin_m;
    cosine_softmax("aam_softmax_loss", batch, labels, head, cfg.scale, move |c| {
        if c < threshold {
            return (c - fallback_shift, 1.0);
        }
        let sin_theta = (1.0 - c * c).max(0.0).sqrt();
        let value = c * cos_m - sin_theta * sin_m;
        let slope = if sin_m == 0.0 {
            cos_m
        } else {
            cos_m + c * sin_m / sin_theta.max(1e-12)
        };
        (value, slope)
    })
}

/// Shared kernel for the normalised classification objectives.
///
/// `target` maps the target-class cosine to `(φ(cos), φ'(cos))`; the target
/// logit is `scale·φ(cos)` and every other logit is `scale·cos`.
fn cosine_softmax(
    op: &'static str,
    batch: &EmbeddingBatch,
    labels: &[usize],
    head: &ClassifierHead,
    scale: f64,
    target: impl Fn(f64) -> (f64, f64),
) -> Result<LossResult> {
    require_head_dim(op, batch, head)?;
    let classes = head.classes();
    if classes < 2 {
        return Err(Error::domain(op, "at least two classes are required"));
    }
    require_labels(op, batch, labels, classes)?;

    let mut unit_w = Matrix::zeros(classes, head.dim());
    let mut norm_w = vec![0.0; classes];
    for c in 0..classes {
        let (u, n) = l2_normalize(op, head.weights.row(c))
            .map_err(|_| Error::domain(op, format!("weight row {c} has zero norm")))?;
        unit_w.row_mut(c).copy_from_slice(&u);
        norm_w[c] = n;
    }

    let emb = batch.embeddings();
    let count = emb.len() as f64;
    let mut grad_x = Grid::zeros(emb.n(), emb.m(), emb.dim());
    let mut grad_head = ClassifierHead::zeros(classes, head.dim());
    let mut cosines = vec![0.0; classes];
    let mut logits = vec![0.0; classes];
    let mut loss = 0.0;

    for (r, &y) in labels.iter().enumerate() {
        let (ux, nx) = l2_normalize(op, emb.flat(r))
            .map_err(|_| Error::domain(op, format!("embedding {r} has zero norm")))?;
        for c in 0..classes {
            cosines[c] = dot(&ux, unit_w.row(c)).clamp(-1.0, 1.0);
            logits[c] = scale * cosines[c];
        }
        let (phi, slope) = target(cosines[y]);
        logits[y] = scale * phi;

        let (l, g) = softmax_cross_entropy(&logits, y)?;
        loss += l;

        let gx = grad_x.flat_mut(r);
        for c in 0..classes {
            // ∂L/∂cos_c
            let mut gc = g[c] * scale / count;
            if c == y {
                gc *= slope;
            }
            if gc == 0.0 {
                continue;
            }
            let cos = cosines[c];
            let wu = unit_w.row(c);
            let sx = gc / nx;
            for ((o, &w), &x) in gx.iter_mut().zip(wu).zip(&ux) {
                *o += sx * (w - cos * x);
            }
            let sw = gc / norm_w[c];
            for ((o, &x), &w) in grad_head.weights.row_mut(c).iter_mut().zip(&ux).zip(wu) {
                *o += sw * (x - cos * w);
            }
        }
    }

    Ok(LossResult {
        loss: loss / count,
        grad_embeddings: grad_x,
        grad_head: Some(grad_head),
        grad_w: None,
        grad_b: None,
    })
}
