//! Cross-entropy plus soft Dice over the foreground classes.

use crate::numkit::{softmax_in_place, Tensor};

/// Smoothing term of the soft Dice ratio.
pub const DICE_EPS: f64 = 1e-5;

/// Loss value and its gradient w.r.t. the logits.
#[derive(Clone, Debug)]
pub struct LossEval {
    pub value: f64,
    pub d_logits: Tensor,
}

fn probabilities(logits: &Tensor) -> Vec<f64> {
    let nc = logits.cols();
    let mut p = logits.values().to_vec();
    for row in p.chunks_mut(nc) {
        softmax_in_place(row);
    }
    p
}

/// `mean_t CE(t) + 1 − mean_{c ≥ 1} dice_c`, with `labels` one class per pixel.
pub fn segmentation_loss(logits: &Tensor, labels: &[usize]) -> LossEval {
    let (t, nc) = (logits.rows(), logits.cols());
    debug_assert_eq!(t, labels.len());
    let p = probabilities(logits);
    let tf = t as f64;

    let mut ce = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        ce -= p[i * nc + y].max(f64::MIN_POSITIVE).ln();
    }
    ce /= tf;

    let fg = nc - 1;
    let mut inter = vec![0.0; nc];
    let mut psum = vec![0.0; nc];
    let mut ysum = vec![0.0; nc];
    for (i, &y) in labels.iter().enumerate() {
        for c in 1..nc {
            psum[c] += p[i * nc + c];
        }
        if y >= 1 {
            inter[y] += p[i * nc + y];
            ysum[y] += 1.0;
        }
    }
    let mut dice_mean = 0.0;
    for c in 1..nc {
        dice_mean += (2.0 * inter[c] + DICE_EPS) / (psum[c] + ysum[c] + DICE_EPS);
    }
    dice_mean /= fg as f64;
    let value = ce + 1.0 - dice_mean;

    // ∂L/∂p, then through the softmax.
    let mut d_logits = vec![0.0; t * nc];
    let mut g = vec![0.0; nc];
    for (i, &y) in labels.iter().enumerate() {
        let pi = &p[i * nc..(i + 1) * nc];
        g.fill(0.0);
        g[y] -= 1.0 / (tf * pi[y].max(f64::MIN_POSITIVE));
        for c in 1..nc {
            let s = psum[c] + ysum[c] + DICE_EPS;
            let num = 2.0 * inter[c] + DICE_EPS;
            let yc = if y == c { 1.0 } else { 0.0 };
            g[c] -= (2.0 * yc * s - num) / (s * s) / fg as f64;
        }
        let dot: f64 = pi.iter().zip(&g).map(|(a, b)| a * b).sum();
        for c in 0..nc {
            d_logits[i * nc + c] = pi[c] * (g[c] - dot);
        }
    }

    LossEval {
        value,
        d_logits: Tensor::from_parts(vec![t, nc], d_logits),
    }
}
