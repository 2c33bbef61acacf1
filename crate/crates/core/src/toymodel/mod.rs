//! Desk-scale multimodal segmentation network: modality-specific encoders,
//! a filter-structured fusion decoder, Dice + cross-entropy loss, Adam, mDSC.

mod adam;
mod loss;
mod metrics;
mod network;
mod params;

pub use adam::{adam_step, AdamState};
pub use loss::{segmentation_loss, LossEval, DICE_EPS};
pub use metrics::mdsc;
pub use network::{im2col, level_grids, min_abs_preactivation, ForwardTrace};
pub use params::{Arch, FilterSlot, Layer, ModelParams, ParamSet, Role, PATCH};

use crate::anchorbank::AnchorBank;
use crate::error::Result;
use crate::numkit::Rng;
use crate::synthdata::{ModalityId, Sample};

/// One participant's model: encoders for its modalities, decoder, calibration
/// projections and optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct SiteModel {
    pub arch: Arch,
    pub params: ModelParams,
    pub adam: AdamState,
}

impl SiteModel {
    pub fn new(arch: Arch, params: ModelParams) -> Self {
        let adam = AdamState::new(&params);
        Self { arch, params, adam }
    }

    /// Fresh random model holding encoders for `modalities`.
    pub fn init(arch: &Arch, modalities: &[ModalityId], rng: &mut Rng) -> Self {
        let encoders = modalities
            .iter()
            .map(|&m| (m, arch.init_encoder(m, rng)))
            .collect();
        let decoder = arch.init_decoder(rng);
        let lacca = arch.init_lacca(rng);
        Self::new(
            arch.clone(),
            ModelParams {
                encoders,
                decoder,
                lacca,
            },
        )
    }

    pub fn modalities(&self) -> Vec<ModalityId> {
        self.params.encoders.keys().copied().collect()
    }

    pub fn forward(&self, sample: &Sample, anchors: Option<&AnchorBank>) -> Result<ForwardTrace> {
        network::forward(&self.arch, &self.params, sample, &self.modalities(), anchors)
    }

    /// Forward on an explicit modality list; errors unless it matches the encoders.
    pub fn forward_with(
        &self,
        sample: &Sample,
        modalities: &[ModalityId],
        anchors: Option<&AnchorBank>,
    ) -> Result<ForwardTrace> {
        network::forward(&self.arch, &self.params, sample, modalities, anchors)
    }

    pub fn backward(&self, trace: &ForwardTrace, d_logits: &crate::numkit::Tensor) -> ModelParams {
        network::backward(&self.arch, &self.params, trace, d_logits)
    }

    /// Loss and full parameter gradient for one sample.
    pub fn loss_and_grad(
        &self,
        sample: &Sample,
        anchors: Option<&AnchorBank>,
    ) -> Result<(f64, ModelParams)> {
        let trace = self.forward(sample, anchors)?;
        let eval = loss(&trace, sample);
        let grads = self.backward(&trace, &eval.d_logits);
        Ok((eval.value, grads))
    }

    pub fn adam_step(&mut self, grads: &ModelParams, lr: f64, weight_decay: f64) {
        adam_step(&mut self.params, &mut self.adam, grads, lr, weight_decay);
    }

    /// One pass over `samples` in an `rng`-shuffled order, one Adam step per sample.
    /// Returns the mean training loss.
    pub fn train_epoch(
        &mut self,
        samples: &[Sample],
        anchors: Option<&AnchorBank>,
        lr: f64,
        weight_decay: f64,
        rng: &mut Rng,
    ) -> Result<f64> {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        rng.shuffle(&mut order);
        let mut total = 0.0;
        for i in order {
            let (l, g) = self.loss_and_grad(&samples[i], anchors)?;
            self.adam_step(&g, lr, weight_decay);
            total += l;
        }
        Ok(total / samples.len().max(1) as f64)
    }

    /// Mean per-sample mDSC over foreground classes and mean loss.
    pub fn evaluate(&self, samples: &[Sample], anchors: Option<&AnchorBank>) -> Result<(f64, f64)> {
        if samples.is_empty() {
            return Ok((f64::NAN, f64::NAN));
        }
        let fg: Vec<usize> = (1..self.arch.n_classes).collect();
        let mut dice = 0.0;
        let mut lsum = 0.0;
        for s in samples {
            let trace = self.forward(s, anchors)?;
            dice += mdsc(&trace.predict(), &s.classes(), &fg);
            lsum += loss(&trace, s).value;
        }
        let n = samples.len() as f64;
        Ok((dice / n, lsum / n))
    }
}

/// Loss of a forward trace against the sample's ground truth.
pub fn loss(trace: &ForwardTrace, sample: &Sample) -> LossEval {
    segmentation_loss(&trace.logits, &sample.classes())
}
