//! Localized adaptive calibration via cross-attention.
//!
//! A level's features (`T × C`) act as queries; the anchor bank rows at the
//! same level (`N × C`) supply keys and values. Channels are split into
//! `n_heads` contiguous blocks, each attending with scale `1/√(C/n_heads)`.
//! Projection weights are stored `out × in`, so a projection is `X · Wᵀ`.

use crate::error::{dim_err, param_err, Result};
use crate::numkit::{mul_nn, mul_nt, mul_tn, softmax_in_place, Tensor};

/// Everything `calibrate_backward` needs from the forward pass.
#[derive(Clone, Debug)]
pub struct CalibrationCache {
    pub features: Tensor,
    pub anchors: Tensor,
    pub n_heads: usize,
    /// Projected queries `T × C`.
    pub queries: Vec<f64>,
    /// Projected keys `N × C`.
    pub keys: Vec<f64>,
    /// Projected values `N × C`.
    pub vals: Vec<f64>,
    /// Pre-softmax scaled scores, one `T × N` block per head.
    pub scores: Vec<Vec<f64>>,
    /// Attention weights, one `T × N` block per head.
    pub weights: Vec<Vec<f64>>,
}

impl CalibrationCache {
    pub fn attention(&self, head: usize) -> Tensor {
        Tensor::from_parts(
            vec![self.features.rows(), self.anchors.rows()],
            self.weights[head].clone(),
        )
    }

    pub fn scores(&self, head: usize) -> Tensor {
        Tensor::from_parts(
            vec![self.features.rows(), self.anchors.rows()],
            self.scores[head].clone(),
        )
    }
}

#[derive(Clone, Debug)]
pub struct CalibrationGrads {
    pub features: Tensor,
    pub query: Tensor,
    pub key: Tensor,
    pub value: Tensor,
    /// Computed for completeness; anchors are not trained by gradient descent.
    pub anchors: Tensor,
}

fn head_block(src: &[f64], rows: usize, c: usize, h: usize, dh: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows * dh);
    for r in 0..rows {
        out.extend_from_slice(&src[r * c + h * dh..r * c + (h + 1) * dh]);
    }
    out
}

fn scatter_head(dst: &mut [f64], block: &[f64], rows: usize, c: usize, h: usize, dh: usize) {
    for r in 0..rows {
        for (d, s) in dst[r * c + h * dh..r * c + (h + 1) * dh]
            .iter_mut()
            .zip(&block[r * dh..(r + 1) * dh])
        {
            *d += s;
        }
    }
}

/// Calibrated features `T × C` for queries `features` against `anchors`.
pub fn calibrate(
    features: &Tensor,
    anchors: &Tensor,
    w_query: &Tensor,
    w_key: &Tensor,
    w_value: &Tensor,
    n_heads: usize,
) -> Result<(Tensor, CalibrationCache)> {
    let (t, c) = (features.rows(), features.cols());
    let n = anchors.rows();
    if features.rank() != 2 || anchors.rank() != 2 || anchors.cols() != c {
        return dim_err(format!(
            "features {:?} and anchors {:?} must share channel width",
            features.shape(),
            anchors.shape()
        ));
    }
    for w in [w_query, w_key, w_value] {
        if w.shape() != [c, c] {
            return dim_err(format!("projection {:?} must be {c}x{c}", w.shape()));
        }
    }
    if n_heads == 0 || c % n_heads != 0 {
        return param_err(format!("{c} channels cannot be split into {n_heads} heads"));
    }
    if n == 0 {
        return dim_err("calibration needs at least one anchor");
    }
    let dh = c / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let queries = mul_nt(features.values(), w_query.values(), t, c, c);
    let keys = mul_nt(anchors.values(), w_key.values(), n, c, c);
    let vals = mul_nt(anchors.values(), w_value.values(), n, c, c);

    let mut out = vec![0.0; t * c];
    let mut all_scores = Vec::with_capacity(n_heads);
    let mut all_weights = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = head_block(&queries, t, c, h, dh);
        let kh = head_block(&keys, n, c, h, dh);
        let vh = head_block(&vals, n, c, h, dh);
        let mut scores = mul_nt(&qh, &kh, t, dh, n);
        scores.iter_mut().for_each(|s| *s *= scale);
        let mut weights = scores.clone();
        for r in 0..t {
            softmax_in_place(&mut weights[r * n..(r + 1) * n]);
        }
        let oh = mul_nn(&weights, &vh, t, n, dh);
        scatter_head(&mut out, &oh, t, c, h, dh);
        all_scores.push(scores);
        all_weights.push(weights);
    }

    let cache = CalibrationCache {
        features: features.clone(),
        anchors: anchors.clone(),
        n_heads,
        queries,
        keys,
        vals,
        scores: all_scores,
        weights: all_weights,
    };
    Ok((Tensor::from_parts(vec![t, c], out), cache))
}

/// Reverse-mode gradients of a scalar through [`calibrate`], given `∂L/∂output`.
pub fn calibrate_backward(
    cache: &CalibrationCache,
    w_query: &Tensor,
    w_key: &Tensor,
    w_value: &Tensor,
    upstream: &Tensor,
) -> CalibrationGrads {
    let (t, c) = (cache.features.rows(), cache.features.cols());
    let n = cache.anchors.rows();
    let dh = c / cache.n_heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let mut d_queries = vec![0.0; t * c];
    let mut d_keys = vec![0.0; n * c];
    let mut d_vals = vec![0.0; n * c];

    for h in 0..cache.n_heads {
        let d_out = head_block(upstream.values(), t, c, h, dh);
        let qh = head_block(&cache.queries, t, c, h, dh);
        let kh = head_block(&cache.keys, n, c, h, dh);
        let vh = head_block(&cache.vals, n, c, h, dh);
        let p = &cache.weights[h];

        // out_h = P · V_h
        let d_vh = mul_tn(p, &d_out, n, t, dh);
        let d_p = mul_nt(&d_out, &vh, t, dh, n);
        // softmax Jacobian, row by row
        let mut d_s = vec![0.0; t * n];
        for r in 0..t {
            let pr = &p[r * n..(r + 1) * n];
            let gr = &d_p[r * n..(r + 1) * n];
            let dot: f64 = pr.iter().zip(gr).map(|(a, b)| a * b).sum();
            for j in 0..n {
                d_s[r * n + j] = pr[j] * (gr[j] - dot) * scale;
            }
        }
        let d_qh = mul_nn(&d_s, &kh, t, n, dh);
        let d_kh = mul_tn(&d_s, &qh, n, t, dh);

        scatter_head(&mut d_queries, &d_qh, t, c, h, dh);
        scatter_head(&mut d_keys, &d_kh, n, c, h, dh);
        scatter_head(&mut d_vals, &d_vh, n, c, h, dh);
    }

    let feats = cache.features.values();
    let anchors = cache.anchors.values();
    let d_features = mul_nn(&d_queries, w_query.values(), t, c, c);
    let d_wq = mul_tn(&d_queries, feats, c, t, c);
    let d_wk = mul_tn(&d_keys, anchors, c, n, c);
    let d_wv = mul_tn(&d_vals, anchors, c, n, c);
    let mut d_anchors = mul_nn(&d_keys, w_key.values(), n, c, c);
    for (a, b) in d_anchors
        .iter_mut()
        .zip(mul_nn(&d_vals, w_value.values(), n, c, c))
    {
        *a += b;
    }

    CalibrationGrads {
        features: Tensor::from_parts(vec![t, c], d_features),
        query: Tensor::from_parts(vec![c, c], d_wq),
        key: Tensor::from_parts(vec![c, c], d_wk),
        value: Tensor::from_parts(vec![c, c], d_wv),
        anchors: Tensor::from_parts(vec![n, c], d_anchors),
    }
}
