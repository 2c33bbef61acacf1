use std::collections::BTreeMap;

use super::mask::{MaskRow, PersonalizationMask};
use crate::error::{contract_err, Result};
use crate::numkit::cosine;
use crate::synthdata::ModalityId;
use crate::toymodel::ParamSet;

/// Guards the inverse-norm weights against zero client updates.
pub const ETA_EPS: f64 = 1e-8;

/// Default server-side EMA weight when a filter still has federating clients.
pub const DEFAULT_LAMBDA: f64 = 0.3;

/// Elementwise mean of each modality's client encoders. Modalities nobody
/// reported keep the server's current parameters. `reports` must be in
/// ascending client order.
pub fn aggregate_encoders(
    server: &BTreeMap<ModalityId, ParamSet>,
    reports: &[&BTreeMap<ModalityId, ParamSet>],
) -> Result<BTreeMap<ModalityId, ParamSet>> {
    let mut out = server.clone();
    for (m, current) in out.iter_mut() {
        let held: Vec<&ParamSet> = reports.iter().filter_map(|r| r.get(m)).collect();
        if held.is_empty() {
            continue;
        }
        for p in &held {
            current.ensure_same_structure(p)?;
        }
        let inv = 1.0 / held.len() as f64;
        let tensors: Vec<_> = current.tensors_mut().collect();
        for (ti, t) in tensors.into_iter().enumerate() {
            let vals = t.values_mut();
            vals.fill(0.0);
            for p in &held {
                let src = p.tensors().nth(ti).expect("same structure");
                for (d, s) in vals.iter_mut().zip(src.values()) {
                    *d += s;
                }
            }
            vals.iter_mut().for_each(|v| *v *= inv);
        }
    }
    for r in reports {
        if let Some(m) = r.keys().find(|m| !server.contains_key(m)) {
            return contract_err(format!("report holds unknown modality {m}"));
        }
    }
    Ok(out)
}

/// Client-side decoder assembly: filter `j` comes from the server when the
/// client's bit is 1, otherwise from the client's own previous decoder.
pub fn build_client_decoder(local: &ParamSet, server: &ParamSet, mask: &MaskRow) -> Result<ParamSet> {
    local.ensure_same_structure(server)?;
    let slots = local.filter_slots();
    if slots.len() != mask.bits.len() {
        return contract_err(format!(
            "mask has {} bits for {} filters",
            mask.bits.len(),
            slots.len()
        ));
    }
    let mut out = local.clone();
    for (j, slot) in slots.into_iter().enumerate() {
        if mask.federated(j) {
            out.set_filter(slot, &server.filter(slot));
        }
    }
    Ok(out)
}

/// Decoder states of one round.
#[derive(Clone, Debug)]
pub struct DecoderSnapshot {
    pub round: u64,
    /// Server decoder at the end of the previous round.
    pub server_prev: ParamSet,
    /// Server decoder after this round's aggregation and training.
    pub server_now: ParamSet,
    /// Per client (ascending order): decoder after local aggregation, before training.
    pub client_agg: Vec<ParamSet>,
    /// Per client: decoder after local training.
    pub client_trained: Vec<ParamSet>,
}

/// Round-wise updates of the server and of each client.
pub fn compute_deltas(snapshot: &DecoderSnapshot) -> Result<(ParamSet, Vec<ParamSet>)> {
    let server = snapshot.server_now.sub(&snapshot.server_prev)?;
    let clients = snapshot
        .client_trained
        .iter()
        .zip(&snapshot.client_agg)
        .map(|(t, a)| t.sub(a))
        .collect::<Result<Vec<_>>>()?;
    Ok((server, clients))
}

/// Per-filter cosine between server and client updates.
pub fn filter_consistency(server_delta: &ParamSet, client_delta: &ParamSet) -> Result<Vec<f64>> {
    server_delta.ensure_same_structure(client_delta)?;
    server_delta
        .filter_slots()
        .into_iter()
        .map(|s| cosine(&server_delta.filter(s), &client_delta.filter(s)))
        .collect()
}

/// δ for every client/filter the client still federates; `None` elsewhere.
pub fn consistency_matrix(
    server_delta: &ParamSet,
    client_deltas: &[ParamSet],
    mask: &PersonalizationMask,
) -> Result<Vec<Vec<Option<f64>>>> {
    client_deltas
        .iter()
        .zip(&mask.rows)
        .map(|(cd, row)| {
            let d = filter_consistency(server_delta, cd)?;
            Ok(d.into_iter()
                .zip(&row.bits)
                .map(|(v, &b)| (b == 1).then_some(v))
                .collect())
        })
        .collect()
}

/// How federating clients are weighted in the server aggregate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EtaRule {
    /// Inversely proportional to the client's update norm on the filter.
    InverseNorm,
    /// Plain mean over federating clients.
    Uniform,
}

/// Simplex weights from the update norms of the federating clients.
pub fn eta_weights(norms: &[f64]) -> Result<Vec<f64>> {
    if norms.is_empty() {
        return contract_err("no federating client for this filter");
    }
    let inv: Vec<f64> = norms.iter().map(|n| 1.0 / (n + ETA_EPS)).collect();
    let total: f64 = inv.iter().sum();
    Ok(inv.into_iter().map(|v| v / total).collect())
}

/// Server-side decoder aggregation. For each filter: if no client federates
/// it the server value is kept (λ = 1); otherwise
/// `λ·server_prev + (1−λ)·Σ η_i·client_i` over federating clients.
pub fn aggregate_server_decoder(
    server_prev: &ParamSet,
    client_trained: &[ParamSet],
    client_agg: &[ParamSet],
    mask: &PersonalizationMask,
    rule: EtaRule,
    lambda_base: f64,
) -> Result<ParamSet> {
    if client_trained.len() != mask.n_clients() || client_agg.len() != mask.n_clients() {
        return contract_err("client decoder count differs from mask rows");
    }
    for p in client_trained.iter().chain(client_agg) {
        server_prev.ensure_same_structure(p)?;
    }
    let slots = server_prev.filter_slots();
    if slots.len() != mask.n_filters() {
        return contract_err("mask filter count differs from decoder");
    }
    let mut out = server_prev.clone();
    for (j, slot) in slots.into_iter().enumerate() {
        let fed = mask.federating(j);
        if fed.is_empty() {
            continue;
        }
        let eta = match rule {
            EtaRule::Uniform => vec![1.0 / fed.len() as f64; fed.len()],
            EtaRule::InverseNorm => {
                let norms: Vec<f64> = fed
                    .iter()
                    .map(|&i| {
                        let t = client_trained[i].filter(slot);
                        let a = client_agg[i].filter(slot);
                        t.iter().zip(&a).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
                    })
                    .collect();
                eta_weights(&norms)?
            }
        };
        let prev = server_prev.filter(slot);
        let mut mixed = vec![0.0; prev.len()];
        for (&i, e) in fed.iter().zip(&eta) {
            for (m, v) in mixed.iter_mut().zip(client_trained[i].filter(slot)) {
                *m += e * v;
            }
        }
        let value: Vec<f64> = prev
            .iter()
            .zip(&mixed)
            .map(|(p, m)| lambda_base * p + (1.0 - lambda_base) * m)
            .collect();
        out.set_filter(slot, &value);
    }
    Ok(out)
}
