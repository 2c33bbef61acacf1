//! Forward and reverse passes of the desk-scale segmentation network.
//!
//! Level `l` lives on a `(H >> (l-1)) × (W >> (l-1))` grid. Each encoder
//! stage is a per-pixel linear map followed by ReLU; stage 1 reads a 3×3
//! patch of the image, later stages read the previous level and are
//! mean-pooled 2×2. Present modalities are fused by an elementwise mean.
//! The decoder walks from the deepest level up: its level-`l` input is the
//! fused skip plus the upsampled output of level `l+1`, optionally
//! calibrated against the anchors (residual), then a linear map + ReLU.
//! A per-pixel classifier produces the logits.

use std::collections::BTreeMap;

use super::params::{Arch, ModelParams, PATCH};
use crate::anchorbank::AnchorBank;
use crate::error::{contract_err, Result};
use crate::lacca::{calibrate, calibrate_backward, CalibrationCache};
use crate::numkit::{mul_nn, mul_nt, mul_tn, Tensor};
use crate::synthdata::{ModalityId, Sample};

/// Grid extents of every level for an `h × w` input.
pub fn level_grids(h: usize, w: usize, levels: usize) -> Vec<(usize, usize)> {
    (0..levels).map(|i| (h >> i, w >> i)).collect()
}

/// Extracts zero-padded 3×3 patches: `(h·w) × 9`.
pub fn im2col(img: &Tensor) -> Vec<f64> {
    let (h, w) = (img.shape()[0], img.shape()[1]);
    let v = img.values();
    let r = (PATCH / 2) as isize;
    let mut out = Vec::with_capacity(h * w * PATCH * PATCH);
    for y in 0..h as isize {
        for x in 0..w as isize {
            for dy in -r..=r {
                for dx in -r..=r {
                    let (yy, xx) = (y + dy, x + dx);
                    let inside = yy >= 0 && xx >= 0 && yy < h as isize && xx < w as isize;
                    out.push(if inside { v[(yy * w as isize + xx) as usize] } else { 0.0 });
                }
            }
        }
    }
    out
}

fn linear(x: &[f64], t: usize, weight: &Tensor, bias: Option<&Tensor>) -> Vec<f64> {
    let (out, inp) = (weight.rows(), weight.cols());
    let mut y = mul_nt(x, weight.values(), t, inp, out);
    if let Some(b) = bias {
        for row in y.chunks_mut(out) {
            for (v, bv) in row.iter_mut().zip(b.values()) {
                *v += bv;
            }
        }
    }
    y
}

fn relu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| v.max(0.0)).collect()
}

/// 2×2 mean pool of a `(h·w) × c` map.
fn pool2(x: &[f64], h: usize, w: usize, c: usize) -> Vec<f64> {
    let (h2, w2) = (h / 2, w / 2);
    let mut out = vec![0.0; h2 * w2 * c];
    for y in 0..h2 * 2 {
        for xx in 0..w2 * 2 {
            let dst = ((y / 2) * w2 + xx / 2) * c;
            let src = (y * w + xx) * c;
            for k in 0..c {
                out[dst + k] += 0.25 * x[src + k];
            }
        }
    }
    out
}

fn pool2_backward(g: &[f64], h: usize, w: usize, c: usize) -> Vec<f64> {
    let (h2, w2) = (h / 2, w / 2);
    let mut out = vec![0.0; h * w * c];
    for y in 0..h2 * 2 {
        for xx in 0..w2 * 2 {
            let src = ((y / 2) * w2 + xx / 2) * c;
            let dst = (y * w + xx) * c;
            for k in 0..c {
                out[dst + k] = 0.25 * g[src + k];
            }
        }
    }
    out
}

/// Nearest-neighbour 2× upsample from `(h/2)·(w/2)` to `h·w`.
fn up2(x: &[f64], h: usize, w: usize, c: usize) -> Vec<f64> {
    let w2 = w / 2;
    let mut out = vec![0.0; h * w * c];
    for y in 0..h {
        for xx in 0..w {
            let src = ((y / 2).min(h / 2 - 1) * w2 + (xx / 2).min(w2 - 1)) * c;
            out[(y * w + xx) * c..(y * w + xx + 1) * c].copy_from_slice(&x[src..src + c]);
        }
    }
    out
}

fn up2_backward(g: &[f64], h: usize, w: usize, c: usize) -> Vec<f64> {
    let (h2, w2) = (h / 2, w / 2);
    let mut out = vec![0.0; h2 * w2 * c];
    for y in 0..h {
        for xx in 0..w {
            let dst = ((y / 2).min(h2 - 1) * w2 + (xx / 2).min(w2 - 1)) * c;
            for k in 0..c {
                out[dst + k] += g[(y * w + xx) * c + k];
            }
        }
    }
    out
}

fn col_sums(x: &[f64], c: usize) -> Vec<f64> {
    let mut s = vec![0.0; c];
    for row in x.chunks(c) {
        for (a, b) in s.iter_mut().zip(row) {
            *a += b;
        }
    }
    s
}

fn relu_mask(grad: &mut [f64], pre: &[f64]) {
    for (g, p) in grad.iter_mut().zip(pre) {
        if *p <= 0.0 {
            *g = 0.0;
        }
    }
}

#[derive(Clone, Debug)]
struct EncoderTrace {
    /// Stage-1 input patches.
    patches: Vec<f64>,
    /// Pre-activations per level (pre-pooling grid for levels ≥ 2).
    pre: Vec<Vec<f64>>,
    /// Output features per level, on the level grid.
    out: Vec<Vec<f64>>,
}

#[derive(Clone, Debug)]
struct DecoderLevel {
    /// Input to the level after calibration (what the linear layer reads).
    calibrated: Vec<f64>,
    calibration: Option<CalibrationCache>,
    pre: Vec<f64>,
    out: Vec<f64>,
}

/// Cached forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub height: usize,
    pub width: usize,
    grids: Vec<(usize, usize)>,
    modalities: Vec<ModalityId>,
    encoders: BTreeMap<ModalityId, EncoderTrace>,
    /// Decoder input `F_l` per level (fused skip plus upsampled deeper output), `T_l × C_l`.
    pub level_inputs: Vec<Tensor>,
    /// Modality-mean encoder features per level.
    pub fused: Vec<Tensor>,
    decoder: Vec<Option<DecoderLevel>>,
    /// `T_1 × N_c` per-pixel logits.
    pub logits: Tensor,
}

impl ForwardTrace {
    pub fn levels(&self) -> usize {
        self.grids.len()
    }

    pub fn grid(&self, level: usize) -> (usize, usize) {
        self.grids[level - 1]
    }

    pub fn uses_calibration(&self) -> bool {
        self.decoder
            .iter()
            .flatten()
            .any(|d| d.calibration.is_some())
    }

    /// Argmax class per pixel.
    pub fn predict(&self) -> Vec<usize> {
        let nc = self.logits.cols();
        self.logits
            .values()
            .chunks(nc)
            .map(|row| {
                let mut best = 0;
                for (k, v) in row.iter().enumerate() {
                    if *v > row[best] {
                        best = k;
                    }
                }
                best
            })
            .collect()
    }
}

/// Runs the network on the images of `modalities`, which must be exactly the
/// model's encoder set. `anchors` enables calibration at every level.
pub fn forward(
    arch: &Arch,
    params: &ModelParams,
    sample: &Sample,
    modalities: &[ModalityId],
    anchors: Option<&AnchorBank>,
) -> Result<ForwardTrace> {
    let have: Vec<ModalityId> = params.encoders.keys().copied().collect();
    let mut want = modalities.to_vec();
    want.sort();
    if have != want {
        return contract_err(format!(
            "input modalities {want:?} do not match the model's encoders {have:?}"
        ));
    }
    if let Some(bank) = anchors {
        if bank.levels.len() != arch.levels() {
            return contract_err(format!(
                "anchor bank has {} levels, network has {}",
                bank.levels.len(),
                arch.levels()
            ));
        }
    }
    let (h, w) = (sample.height(), sample.width());
    let levels = arch.levels();
    if h % (1 << (levels - 1)) != 0 || w % (1 << (levels - 1)) != 0 {
        return contract_err(format!("{h}x{w} input cannot be pooled {} times", levels - 1));
    }
    let grids = level_grids(h, w, levels);

    let mut encoders = BTreeMap::new();
    for &m in &want {
        let enc = &params.encoders[&m];
        let patches = im2col(sample.image(m));
        let mut pre = Vec::with_capacity(levels);
        let mut out: Vec<Vec<f64>> = Vec::with_capacity(levels);
        for l in 1..=levels {
            let layer = &enc.layers[l - 1];
            let (src, rows) = if l == 1 {
                (&patches, grids[0].0 * grids[0].1)
            } else {
                (&out[l - 2], grids[l - 2].0 * grids[l - 2].1)
            };
            let z = linear(src, rows, &layer.weight, layer.bias.as_ref());
            let a = relu(&z);
            let feat = if l == 1 {
                a
            } else {
                let (ph, pw) = grids[l - 2];
                pool2(&a, ph, pw, layer.out_dim())
            };
            pre.push(z);
            out.push(feat);
        }
        encoders.insert(m, EncoderTrace { patches, pre, out });
    }

    let inv = 1.0 / want.len() as f64;
    let fused: Vec<Tensor> = (1..=levels)
        .map(|l| {
            let (gh, gw) = grids[l - 1];
            let c = arch.channels_at(l);
            let mut acc = vec![0.0; gh * gw * c];
            for e in encoders.values() {
                for (a, v) in acc.iter_mut().zip(&e.out[l - 1]) {
                    *a += v;
                }
            }
            acc.iter_mut().for_each(|v| *v *= inv);
            Tensor::from_parts(vec![gh * gw, c], acc)
        })
        .collect();

    let mut decoder: Vec<Option<DecoderLevel>> = vec![None; levels];
    let mut level_inputs: Vec<Option<Tensor>> = vec![None; levels];
    for l in (1..=levels).rev() {
        let (gh, gw) = grids[l - 1];
        let t = gh * gw;
        let c = arch.channels_at(l);
        let mut input = fused[l - 1].values().to_vec();
        if l < levels {
            let deeper = decoder[l].as_ref().expect("deeper level computed first");
            let up = up2(&deeper.out, gh, gw, c);
            for (a, b) in input.iter_mut().zip(&up) {
                *a += b;
            }
        }
        let input_t = Tensor::from_parts(vec![t, c], input);
        let (calibrated, calibration) = match anchors {
            Some(bank) => {
                let base = 3 * (l - 1);
                let lp = &params.lacca.layers;
                let (cal, cache) = calibrate(
                    &input_t,
                    &bank.levels[l - 1],
                    &lp[base].weight,
                    &lp[base + 1].weight,
                    &lp[base + 2].weight,
                    arch.n_heads,
                )?;
                let sum = input_t
                    .values()
                    .iter()
                    .zip(cal.values())
                    .map(|(a, b)| a + b)
                    .collect();
                (sum, Some(cache))
            }
            None => (input_t.values().to_vec(), None),
        };
        let layer = &params.decoder.layers[levels - l];
        let pre = linear(&calibrated, t, &layer.weight, layer.bias.as_ref());
        let out = relu(&pre);
        level_inputs[l - 1] = Some(input_t);
        decoder[l - 1] = Some(DecoderLevel {
            calibrated,
            calibration,
            pre,
            out,
        });
    }

    let cls = params.decoder.layers.last().expect("classifier layer");
    let t1 = grids[0].0 * grids[0].1;
    let d1 = &decoder[0].as_ref().expect("level 1").out;
    let logits = linear(d1, t1, &cls.weight, cls.bias.as_ref());

    Ok(ForwardTrace {
        height: h,
        width: w,
        grids,
        modalities: want,
        encoders,
        level_inputs: level_inputs.into_iter().map(|t| t.expect("filled")).collect(),
        fused,
        decoder,
        logits: Tensor::from_parts(vec![t1, arch.n_classes], logits),
    })
}

/// Gradients of the loss w.r.t. every parameter, given `∂L/∂logits`.
/// Anchor gradients are discarded.
pub fn backward(
    arch: &Arch,
    params: &ModelParams,
    trace: &ForwardTrace,
    d_logits: &Tensor,
) -> ModelParams {
    let mut grads = params.zeros_like();
    let levels = arch.levels();
    let grids = &trace.grids;
    let nc = arch.n_classes;

    // classifier
    let t1 = grids[0].0 * grids[0].1;
    let cls_idx = params.decoder.layers.len() - 1;
    let cls = &params.decoder.layers[cls_idx];
    let d1 = &trace.decoder[0].as_ref().expect("level 1").out;
    let width1 = cls.in_dim();
    {
        let g = &mut grads.decoder.layers[cls_idx];
        g.weight
            .values_mut()
            .copy_from_slice(&mul_tn(d_logits.values(), d1, nc, t1, width1));
        if let Some(b) = &mut g.bias {
            b.values_mut().copy_from_slice(&col_sums(d_logits.values(), nc));
        }
    }
    let mut d_out = mul_nn(d_logits.values(), cls.weight.values(), t1, nc, width1);

    let mut d_fused: Vec<Vec<f64>> = vec![Vec::new(); levels];
    for l in 1..=levels {
        let (gh, gw) = grids[l - 1];
        let t = gh * gw;
        let c = arch.channels_at(l);
        let dl = trace.decoder[l - 1].as_ref().expect("decoder level");
        let li = levels - l;
        let layer = &params.decoder.layers[li];
        let width = layer.out_dim();

        let mut d_pre = d_out;
        relu_mask(&mut d_pre, &dl.pre);
        {
            let g = &mut grads.decoder.layers[li];
            g.weight
                .values_mut()
                .copy_from_slice(&mul_tn(&d_pre, &dl.calibrated, width, t, c));
            if let Some(b) = &mut g.bias {
                b.values_mut().copy_from_slice(&col_sums(&d_pre, width));
            }
        }
        let d_cal = mul_nn(&d_pre, layer.weight.values(), t, width, c);

        let d_input = match &dl.calibration {
            Some(cache) => {
                let base = 3 * (l - 1);
                let lp = &params.lacca.layers;
                let upstream = Tensor::from_parts(vec![t, c], d_cal.clone());
                let cg = calibrate_backward(
                    cache,
                    &lp[base].weight,
                    &lp[base + 1].weight,
                    &lp[base + 2].weight,
                    &upstream,
                );
                let gl = &mut grads.lacca.layers;
                gl[base].weight = cg.query;
                gl[base + 1].weight = cg.key;
                gl[base + 2].weight = cg.value;
                d_cal
                    .iter()
                    .zip(cg.features.values())
                    .map(|(a, b)| a + b)
                    .collect()
            }
            None => d_cal,
        };

        if l < levels {
            d_out = up2_backward(&d_input, gh, gw, c);
        } else {
            d_out = Vec::new();
        }
        d_fused[l - 1] = d_input;
    }

    let inv = 1.0 / trace.modalities.len() as f64;
    for (m, et) in &trace.encoders {
        let enc = &params.encoders[m];
        let genc = grads.encoders.get_mut(m).expect("encoder grads");
        let mut d_feat: Vec<f64> = d_fused[levels - 1].iter().map(|v| v * inv).collect();
        for l in (1..=levels).rev() {
            let layer = &enc.layers[l - 1];
            let out_c = layer.out_dim();
            let in_c = layer.in_dim();
            let (rows, d_act) = if l == 1 {
                (grids[0].0 * grids[0].1, d_feat)
            } else {
                let (ph, pw) = grids[l - 2];
                (ph * pw, pool2_backward(&d_feat, ph, pw, out_c))
            };
            let mut d_pre = d_act;
            relu_mask(&mut d_pre, &et.pre[l - 1]);
            let src = if l == 1 { &et.patches } else { &et.out[l - 2] };
            let g = &mut genc.layers[l - 1];
            g.weight
                .values_mut()
                .copy_from_slice(&mul_tn(&d_pre, src, out_c, rows, in_c));
            if let Some(b) = &mut g.bias {
                b.values_mut().copy_from_slice(&col_sums(&d_pre, out_c));
            }
            if l > 1 {
                let mut below = mul_nn(&d_pre, layer.weight.values(), rows, out_c, in_c);
                for (a, f) in below.iter_mut().zip(&d_fused[l - 2]) {
                    *a += f * inv;
                }
                d_feat = below;
            } else {
                d_feat = Vec::new();
            }
        }
    }
    grads
}

/// Smallest |pre-activation| over every ReLU in the trace.
pub fn min_abs_preactivation(trace: &ForwardTrace) -> f64 {
    let enc = trace
        .encoders
        .values()
        .flat_map(|e| e.pre.iter().flatten());
    let dec = trace.decoder.iter().flatten().flat_map(|d| d.pre.iter());
    enc.chain(dec).fold(f64::INFINITY, |m, v| m.min(v.abs()))
}
