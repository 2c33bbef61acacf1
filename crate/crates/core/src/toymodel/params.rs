use std::collections::BTreeMap;

use crate::error::{contract_err, Result};
use crate::numkit::{Rng, Tensor};
use crate::synthdata::ModalityId;

/// Which part of a site model a parameter set belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Encoder(ModalityId),
    Decoder,
    Lacca,
}

/// One weight matrix (`out × in`) with an optional bias vector (`out`).
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub name: String,
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Layer {
    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    /// Elements in one filter: a weight row plus its bias element.
    pub fn filter_len(&self) -> usize {
        self.in_dim() + usize::from(self.bias.is_some())
    }

    fn uniform(name: String, out: usize, inp: usize, bias: bool, rng: &mut Rng) -> Self {
        let bound = (6.0 / inp as f64).sqrt() * 0.5;
        let w = (0..out * inp).map(|_| rng.uniform(-bound, bound)).collect();
        Self {
            name,
            weight: Tensor::from_parts(vec![out, inp], w),
            bias: bias.then(|| Tensor::zeros(vec![out])),
        }
    }
}

/// Location of a filter inside a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FilterSlot {
    pub layer: usize,
    pub row: usize,
    pub len: usize,
}

/// An ordered collection of layers. Filters are enumerated layer by layer,
/// row by row; every element belongs to exactly one filter.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet {
    pub role: Role,
    pub layers: Vec<Layer>,
}

impl ParamSet {
    pub fn filter_count(&self) -> usize {
        self.layers.iter().map(Layer::out_dim).sum()
    }

    pub fn filter_slots(&self) -> Vec<FilterSlot> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(li, l)| {
                (0..l.out_dim()).map(move |row| FilterSlot {
                    layer: li,
                    row,
                    len: l.filter_len(),
                })
            })
            .collect()
    }

    /// Element count of each filter, in filter order.
    pub fn filter_sizes(&self) -> Vec<usize> {
        self.filter_slots().iter().map(|s| s.len).collect()
    }

    pub fn filter(&self, slot: FilterSlot) -> Vec<f64> {
        let l = &self.layers[slot.layer];
        let mut v = l.weight.row(slot.row).to_vec();
        if let Some(b) = &l.bias {
            v.push(b.values()[slot.row]);
        }
        v
    }

    pub fn set_filter(&mut self, slot: FilterSlot, values: &[f64]) {
        let l = &mut self.layers[slot.layer];
        let n = l.in_dim();
        l.weight.row_mut(slot.row).copy_from_slice(&values[..n]);
        if let Some(b) = &mut l.bias {
            b.values_mut()[slot.row] = values[n];
        }
    }

    pub fn element_count(&self) -> usize {
        self.tensors().map(Tensor::len).sum()
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.layers
            .iter()
            .flat_map(|l| std::iter::once(&l.weight).chain(l.bias.as_ref()))
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| std::iter::once(&mut l.weight).chain(l.bias.as_mut()))
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.values_mut().fill(0.0);
        }
        z
    }

    /// Same layer names and tensor shapes.
    pub fn same_structure(&self, other: &ParamSet) -> bool {
        self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| {
                a.name == b.name
                    && a.weight.shape() == b.weight.shape()
                    && a.bias.as_ref().map(Tensor::shape) == b.bias.as_ref().map(Tensor::shape)
            })
    }

    pub fn ensure_same_structure(&self, other: &ParamSet) -> Result<()> {
        if self.same_structure(other) {
            Ok(())
        } else {
            contract_err(format!(
                "parameter sets differ in structure ({:?} vs {:?})",
                self.role, other.role
            ))
        }
    }

    /// Elementwise `self - other`.
    pub fn sub(&self, other: &ParamSet) -> Result<ParamSet> {
        self.ensure_same_structure(other)?;
        let mut out = self.clone();
        for (o, b) in out.tensors_mut().zip(other.tensors()) {
            for (x, y) in o.values_mut().iter_mut().zip(b.values()) {
                *x -= y;
            }
        }
        Ok(out)
    }

    pub fn flat(&self) -> Vec<f64> {
        self.tensors().flat_map(|t| t.values().iter().copied()).collect()
    }
}

/// Layer widths of the desk-scale network.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Arch {
    pub n_modalities: usize,
    pub n_classes: usize,
    /// Feature channels `C_l` for levels `1..=L`.
    pub channels: Vec<usize>,
    pub n_heads: usize,
}

/// Encoder stage 1 sees a 3×3 neighbourhood of each pixel.
pub const PATCH: usize = 3;

impl Arch {
    pub fn levels(&self) -> usize {
        self.channels.len()
    }

    /// `C_l` for a 1-based level.
    pub fn channels_at(&self, level: usize) -> usize {
        self.channels[level - 1]
    }

    /// Output width of decoder level `l`: it must match the skip input of level `l - 1`.
    pub fn decoder_width(&self, level: usize) -> usize {
        if level >= 2 {
            self.channels_at(level - 1)
        } else {
            self.channels_at(1)
        }
    }

    pub fn init_encoder(&self, m: ModalityId, rng: &mut Rng) -> ParamSet {
        let mut inp = PATCH * PATCH;
        let layers = (1..=self.levels())
            .map(|l| {
                let out = self.channels_at(l);
                let layer = Layer::uniform(format!("enc{m}.l{l}"), out, inp, true, rng);
                inp = out;
                layer
            })
            .collect();
        ParamSet {
            role: Role::Encoder(m),
            layers,
        }
    }

    pub fn init_decoder(&self, rng: &mut Rng) -> ParamSet {
        let mut layers: Vec<Layer> = (1..=self.levels())
            .rev()
            .map(|l| {
                Layer::uniform(
                    format!("dec.l{l}"),
                    self.decoder_width(l),
                    self.channels_at(l),
                    true,
                    rng,
                )
            })
            .collect();
        layers.push(Layer::uniform(
            "dec.cls".into(),
            self.n_classes,
            self.decoder_width(1),
            true,
            rng,
        ));
        ParamSet {
            role: Role::Decoder,
            layers,
        }
    }

    /// Query, key and value projections for every level (no biases).
    pub fn init_lacca(&self, rng: &mut Rng) -> ParamSet {
        let mut layers = Vec::new();
        for l in 1..=self.levels() {
            let c = self.channels_at(l);
            for proj in ["q", "k", "v"] {
                layers.push(Layer::uniform(format!("lacca.l{l}.{proj}"), c, c, false, rng));
            }
        }
        ParamSet {
            role: Role::Lacca,
            layers,
        }
    }
}

/// Every trainable tensor of one site.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub encoders: BTreeMap<ModalityId, ParamSet>,
    pub decoder: ParamSet,
    pub lacca: ParamSet,
}

impl ModelParams {
    pub fn sets(&self) -> impl Iterator<Item = &ParamSet> {
        self.encoders
            .values()
            .chain(std::iter::once(&self.decoder))
            .chain(std::iter::once(&self.lacca))
    }

    pub fn sets_mut(&mut self) -> impl Iterator<Item = &mut ParamSet> {
        self.encoders
            .values_mut()
            .chain(std::iter::once(&mut self.decoder))
            .chain(std::iter::once(&mut self.lacca))
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.sets().flat_map(ParamSet::tensors)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.sets_mut().flat_map(ParamSet::tensors_mut)
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            encoders: self
                .encoders
                .iter()
                .map(|(m, p)| (*m, p.zeros_like()))
                .collect(),
            decoder: self.decoder.zeros_like(),
            lacca: self.lacca.zeros_like(),
        }
    }

    pub fn scale(&mut self, k: f64) {
        for t in self.tensors_mut() {
            for v in t.values_mut() {
                *v *= k;
            }
        }
    }

    pub fn add_assign(&mut self, other: &ModelParams) {
        for (a, b) in self.tensors_mut().zip(other.tensors()) {
            for (x, y) in a.values_mut().iter_mut().zip(b.values()) {
                *x += y;
            }
        }
    }

    pub fn l2_norm(&self) -> f64 {
        self.tensors()
            .flat_map(|t| t.values())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}
