use super::message::{Broadcast, Report};
use crate::anchorbank::AnchorBank;
use crate::error::{Error, Result};
use crate::fedcore::build_client_decoder;
use crate::numkit::Rng;
use crate::synthdata::SiteData;
use crate::toymodel::{ModelParams, ParamSet, SiteModel};

/// Decoder parameters that take part in the mask machinery, optionally with
/// the calibration projections appended.
pub fn shared_params(params: &ModelParams, include_lacca: bool) -> ParamSet {
    let mut set = params.decoder.clone();
    if include_lacca {
        set.layers.extend(params.lacca.layers.iter().cloned());
    }
    set
}

/// Inverse of [`shared_params`].
pub fn install_shared(params: &mut ModelParams, shared: &ParamSet, include_lacca: bool) -> Result<()> {
    shared_params(params, include_lacca).ensure_same_structure(shared)?;
    let n = params.decoder.layers.len();
    let mut layers = shared.layers.clone();
    if include_lacca {
        params.lacca.layers = layers.split_off(n);
    }
    params.decoder.layers = layers;
    Ok(())
}

/// What a client needs to know about the run.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClientSettings {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub use_lacca: bool,
    pub lacca_federated: bool,
}

/// One client: its data, model, random stream and protocol position.
#[derive(Clone, Debug)]
pub struct ClientSite {
    pub site_id: usize,
    pub data: SiteData,
    pub model: SiteModel,
    pub rng: Rng,
    /// Round number the next broadcast must carry.
    pub expected_round: u64,
    /// Anchors from the most recent broadcast, used for calibration at test time.
    pub anchors: AnchorBank,
}

impl ClientSite {
    fn train(&mut self, s: &ClientSettings) -> Result<()> {
        let anchors = (s.use_lacca && !self.anchors.is_empty()).then_some(&self.anchors);
        for _ in 0..s.epochs {
            self.model
                .train_epoch(&self.data.train, anchors, s.lr, s.weight_decay, &mut self.rng)?;
        }
        Ok(())
    }

    /// Test-split mDSC and loss, calibrated with the latest anchors when enabled.
    pub fn evaluate(&self, use_lacca: bool) -> Result<(f64, f64)> {
        let anchors = (use_lacca && !self.anchors.is_empty()).then_some(&self.anchors);
        self.model.evaluate(&self.data.test, anchors)
    }
}

/// Takes the server's parameters, assembles the decoder from the mask, trains
/// locally and returns the encoded report.
pub fn client_update(site: &mut ClientSite, broadcast: &[u8], s: &ClientSettings) -> Result<Vec<u8>> {
    let b = Broadcast::decode(broadcast)?;
    if b.recipient as usize != site.site_id {
        return Err(Error::Protocol(format!(
            "site {} received a broadcast for site {}",
            site.site_id, b.recipient
        )));
    }
    if b.round != site.expected_round {
        return Err(Error::Protocol(format!(
            "site {} expected round {}, broadcast carries round {}",
            site.site_id, site.expected_round, b.round
        )));
    }
    let held = site.model.modalities();
    for m in &held {
        let Some(enc) = b.encoders.get(m) else {
            return Err(Error::Protocol(format!("broadcast lacks encoder {m} for site {}", site.site_id)));
        };
        site.model.params.encoders.get(m).expect("held").ensure_same_structure(enc)?;
    }
    for m in &held {
        site.model.params.encoders.insert(*m, b.encoders[m].clone());
    }
    let local = shared_params(&site.model.params, s.lacca_federated);
    let aggregated = build_client_decoder(&local, &b.decoder, &b.mask)?;
    install_shared(&mut site.model.params, &aggregated, s.lacca_federated)?;
    site.anchors = b.anchors;

    site.train(s)?;
    site.expected_round += 1;

    let report = Report {
        round: b.round,
        site_id: site.site_id as u32,
        encoders: site.model.params.encoders.clone(),
        decoder: shared_params(&site.model.params, s.lacca_federated),
    };
    Ok(report.encode())
}

/// A round without communication.
pub fn local_update(site: &mut ClientSite, s: &ClientSettings) -> Result<()> {
    site.train(s)?;
    site.expected_round += 1;
    Ok(())
}
