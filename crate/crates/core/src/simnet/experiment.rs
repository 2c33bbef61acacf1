use super::codec::{decode_as, encode_frame, DecodeError, Kind, Reader, Writer};
use super::message::{Broadcast, Report};
use super::metrics::MetricsRow;
use super::site::{client_update, install_shared, local_update, shared_params, ClientSettings, ClientSite};
use crate::anchorbank::{build_bank_from_model, ema_update, AnchorBank};
use crate::config::{ExperimentConfig, ModeSettings};
use crate::error::{contract_err, Error, Result};
use crate::fedcore::{
    aggregate_encoders, aggregate_server_decoder, build_client_decoder, consistency_matrix,
    PersonalizationMask,
};
use crate::numkit::Rng;
use crate::synthdata::{generate, make_topology, materialize, pool_size_for, ModalityId, SiteData};
use crate::toymodel::{ModelParams, ParamSet, SiteModel};

const STREAM_INIT: u64 = 0xA11C;
const STREAM_SERVER: u64 = 0x5E4F;
const STREAM_CLIENT: u64 = 0xC11E_0000;

/// Builds every site's data from the config: index 0 is the server.
pub fn build_sites(config: &ExperimentConfig) -> Result<Vec<SiteData>> {
    let plan = config.site_plan();
    let params = config.data_params();
    let pool = generate(config.seed, pool_size_for(&plan), &params)?;
    let specs = make_topology(config.seed, pool.len(), params.n_modalities(), &plan)?;
    Ok(specs
        .iter()
        .map(|s| materialize(config.seed, &pool, s, config.data.site_jitter))
        .collect())
}

fn modality_label(ms: &[ModalityId]) -> String {
    ms.iter().map(|m| m.name()).collect::<Vec<_>>().join("+")
}

fn indexed(data: &SiteData) -> Vec<(usize, &crate::synthdata::Sample)> {
    data.spec.train.iter().copied().zip(&data.train).collect()
}

/// Everything needed to continue a run bit-identically.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_text: String,
    pub digest: [u8; 32],
    pub round: u64,
    pub server: SiteModel,
    pub server_rng: u64,
    pub clients: Vec<SiteModel>,
    pub client_rngs: Vec<u64>,
    pub mask: PersonalizationMask,
    pub anchors: AnchorBank,
    pub metrics: Vec<MetricsRow>,
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.str(&self.config_text);
        w.buf.extend_from_slice(&self.digest);
        w.u64(self.round);
        w.site_model(&self.server);
        w.u64(self.server_rng);
        w.len(self.clients.len());
        for (m, r) in self.clients.iter().zip(&self.client_rngs) {
            w.site_model(m);
            w.u64(*r);
        }
        w.mask(&self.mask);
        w.anchors(&self.anchors);
        w.len(self.metrics.len());
        for row in &self.metrics {
            row.write(&mut w);
        }
        encode_frame(Kind::Checkpoint, &w.buf)
    }

    pub fn decode(bytes: &[u8]) -> std::result::Result<Self, DecodeError> {
        decode_as(bytes, Kind::Checkpoint, |r: &mut Reader<'_>| {
            let config_text = r.str()?;
            let mut digest = [0u8; 32];
            for d in digest.iter_mut() {
                *d = r.u8()?;
            }
            let round = r.u64()?;
            let server = r.site_model()?;
            let server_rng = r.u64()?;
            let n = r.len()?;
            let mut clients = Vec::with_capacity(n.min(1024));
            let mut client_rngs = Vec::with_capacity(n.min(1024));
            for _ in 0..n {
                clients.push(r.site_model()?);
                client_rngs.push(r.u64()?);
            }
            let mask = r.mask()?;
            let anchors = r.anchors()?;
            let rows = r.len()?;
            let mut metrics = Vec::with_capacity(rows.min(1 << 16));
            for _ in 0..rows {
                metrics.push(MetricsRow::read(r)?);
            }
            Ok(Self {
                config_text,
                digest,
                round,
                server,
                server_rng,
                clients,
                client_rngs,
                mask,
                anchors,
                metrics,
            })
        })
    }

    pub fn config(&self) -> Result<ExperimentConfig> {
        ExperimentConfig::parse(&self.config_text)
    }

    /// Element counts of the masked filters.
    pub fn filter_sizes(&self) -> Result<Vec<usize>> {
        let cfg = self.config()?;
        Ok(shared_params(&self.server.params, cfg.lacca_federated).filter_sizes())
    }
}

/// A running simulation: one server and its clients.
#[derive(Debug)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub settings: ModeSettings,
    pub server: SiteModel,
    pub server_data: SiteData,
    server_rng: Rng,
    pub clients: Vec<ClientSite>,
    pub mask: PersonalizationMask,
    pub anchors: AnchorBank,
    pub round: u64,
    pub metrics: Vec<MetricsRow>,
}

impl Experiment {
    /// Generates data, initializes every model, trains the server for the
    /// initial epochs and clusters the first anchors.
    pub fn new(config: &ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let mut sites = build_sites(config)?.into_iter();
        let server_data = sites.next().expect("validated plan has a server");
        let arch = config.arch();
        let mut init_rng = Rng::derive(config.seed, STREAM_INIT);
        let all: Vec<ModalityId> = server_data.spec.modalities.clone();
        let server = SiteModel::init(&arch, &all, &mut init_rng);

        let clients: Vec<ClientSite> = sites
            .map(|data| {
                let params = ModelParams {
                    encoders: data
                        .spec
                        .modalities
                        .iter()
                        .map(|m| (*m, server.params.encoders[m].clone()))
                        .collect(),
                    decoder: server.params.decoder.clone(),
                    lacca: server.params.lacca.clone(),
                };
                let id = data.spec.site_id;
                ClientSite {
                    site_id: id,
                    data,
                    model: SiteModel::new(arch.clone(), params),
                    rng: Rng::derive(config.seed, STREAM_CLIENT + id as u64),
                    expected_round: 1,
                    anchors: AnchorBank::empty(),
                }
            })
            .collect();

        let settings = config.settings();
        let n_filters = shared_params(&server.params, config.lacca_federated).filter_count();
        let mask = if settings.initial_mask_bit == 1 {
            PersonalizationMask::new(clients.len(), n_filters, settings.patience)
        } else {
            PersonalizationMask::personalized(clients.len(), n_filters, settings.patience)
        };

        let mut exp = Self {
            config: config.clone(),
            settings,
            server,
            server_data,
            server_rng: Rng::derive(config.seed, STREAM_SERVER),
            clients,
            mask,
            anchors: AnchorBank::empty(),
            round: 0,
            metrics: Vec::new(),
        };
        for _ in 0..config.initial_server_epochs {
            exp.train_server()?;
        }
        if exp.settings.use_lacca {
            exp.anchors = build_bank_from_model(
                &exp.server,
                &indexed(&exp.server_data),
                config.anchors_per_class,
                config.membership(),
                &mut exp.server_rng,
            )?;
        }
        Ok(exp)
    }

    fn train_server(&mut self) -> Result<f64> {
        self.server.train_epoch(
            &self.server_data.train,
            None,
            self.config.lr,
            self.config.weight_decay,
            &mut self.server_rng,
        )
    }

    fn client_settings(&self) -> ClientSettings {
        ClientSettings {
            epochs: self.config.epochs_per_round,
            lr: self.config.lr,
            weight_decay: self.config.weight_decay,
            use_lacca: self.settings.use_lacca,
            lacca_federated: self.config.lacca_federated,
        }
    }

    pub fn shared_server_params(&self) -> ParamSet {
        shared_params(&self.server.params, self.config.lacca_federated)
    }

    pub fn filter_sizes(&self) -> Vec<usize> {
        self.shared_server_params().filter_sizes()
    }

    /// Encoded broadcasts for the next round, one per client in site order.
    pub fn broadcasts(&self) -> Vec<Vec<u8>> {
        let round = self.round + 1;
        let decoder = self.shared_server_params();
        self.clients
            .iter()
            .zip(&self.mask.rows)
            .map(|(c, row)| {
                Broadcast {
                    round,
                    recipient: c.site_id as u32,
                    encoders: c
                        .model
                        .params
                        .encoders
                        .keys()
                        .map(|m| (*m, self.server.params.encoders[m].clone()))
                        .collect(),
                    decoder: decoder.clone(),
                    anchors: self.anchors.clone(),
                    mask: row.clone(),
                }
                .encode()
            })
            .collect()
    }

    /// Runs every client's update, concurrently when configured.
    pub fn run_clients(&mut self, broadcasts: &[Vec<u8>], parallel: bool) -> Result<Vec<Vec<u8>>> {
        if broadcasts.len() != self.clients.len() {
            return contract_err("one broadcast per client required");
        }
        let s = self.client_settings();
        if parallel {
            std::thread::scope(|scope| {
                let handles: Vec<_> = self
                    .clients
                    .iter_mut()
                    .zip(broadcasts)
                    .map(|(c, b)| scope.spawn(move || client_update(c, b, &s)))
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("client thread panicked"))
                    .collect()
            })
        } else {
            self.clients
                .iter_mut()
                .zip(broadcasts)
                .map(|(c, b)| client_update(c, b, &s))
                .collect()
        }
    }

    /// Server half of a round, in order: encoder aggregation, decoder
    /// aggregation, server training, anchor update, mask update.
    pub fn server_round(&mut self, reports: &[Vec<u8>]) -> Result<()> {
        let round = self.round + 1;
        let mut decoded = reports
            .iter()
            .map(|b| Report::decode(b).map_err(Error::from))
            .collect::<Result<Vec<_>>>()?;
        decoded.sort_by_key(|r| r.site_id);
        for (c, r) in self.clients.iter().zip(&decoded) {
            if r.site_id as usize != c.site_id {
                return Err(Error::Protocol(format!("missing or duplicate report for site {}", c.site_id)));
            }
            if r.round != round {
                return Err(Error::Protocol(format!(
                    "site {} reported round {}, expected {round}",
                    r.site_id, r.round
                )));
            }
        }
        if decoded.len() != self.clients.len() {
            return Err(Error::Protocol(format!(
                "{} reports for {} clients",
                decoded.len(),
                self.clients.len()
            )));
        }

        let prev = self.shared_server_params();
        let enc_refs: Vec<_> = decoded.iter().map(|r| &r.encoders).collect();
        let encoders = aggregate_encoders(&self.server.params.encoders, &enc_refs)?;

        let trained: Vec<ParamSet> = decoded.into_iter().map(|r| r.decoder).collect();
        // The client's post-aggregation decoder: federated filters came from
        // the previous server decoder, personalized ones are not compared.
        let agg = trained
            .iter()
            .zip(&self.mask.rows)
            .map(|(t, row)| build_client_decoder(t, &prev, row))
            .collect::<Result<Vec<_>>>()?;
        let s = self.settings;
        let new_shared = aggregate_server_decoder(&prev, &trained, &agg, &self.mask, s.eta, s.lambda_base)?;

        self.server.params.encoders = encoders;
        install_shared(&mut self.server.params, &new_shared, self.config.lacca_federated)?;
        for _ in 0..self.config.epochs_per_round {
            self.train_server()?;
        }

        if s.use_lacca {
            let fresh = build_bank_from_model(
                &self.server,
                &indexed(&self.server_data),
                self.config.anchors_per_class,
                self.config.membership(),
                &mut self.server_rng,
            )?;
            self.anchors = if self.anchors.is_empty() {
                fresh
            } else {
                ema_update(
                    &self.anchors,
                    &fresh,
                    self.config.omega,
                    self.config.membership(),
                    self.config.anchor_matching,
                )?
            };
        }

        if s.update_mask {
            let server_delta = self.shared_server_params().sub(&prev)?;
            let client_deltas = trained
                .iter()
                .zip(&agg)
                .map(|(t, a)| t.sub(a))
                .collect::<Result<Vec<_>>>()?;
            let deltas = consistency_matrix(&server_delta, &client_deltas, &self.mask)?;
            self.mask.update(&deltas)?;
        }
        self.round = round;
        Ok(())
    }

    /// One full round followed by evaluation of every site.
    pub fn step_round(&mut self) -> Result<()> {
        if self.settings.communicate {
            let broadcasts = self.broadcasts();
            let reports = self.run_clients(&broadcasts, self.config.parallel)?;
            self.server_round(&reports)?;
        } else {
            let s = self.client_settings();
            for c in &mut self.clients {
                local_update(c, &s)?;
            }
            for _ in 0..self.config.epochs_per_round {
                self.train_server()?;
            }
            self.round += 1;
        }
        let rows = self.evaluate()?;
        self.metrics.extend(rows);
        Ok(())
    }

    pub fn run_to(&mut self, round: u64) -> Result<()> {
        while self.round < round {
            self.step_round()?;
        }
        Ok(())
    }

    /// Test-split metrics for the server, each client and the client average.
    pub fn evaluate(&self) -> Result<Vec<MetricsRow>> {
        let sizes = self.filter_sizes();
        let (sd, sl) = self.server.evaluate(&self.server_data.test, None)?;
        let mut rows = vec![MetricsRow {
            round: self.round,
            site: self.server_data.spec.site_id.to_string(),
            modalities: modality_label(&self.server_data.spec.modalities),
            mdsc: sd,
            loss: sl,
            fed_ratio: None,
        }];
        let (mut dsum, mut lsum) = (0.0, 0.0);
        for (i, c) in self.clients.iter().enumerate() {
            let (d, l) = c.evaluate(self.settings.use_lacca)?;
            dsum += d;
            lsum += l;
            rows.push(MetricsRow {
                round: self.round,
                site: c.site_id.to_string(),
                modalities: modality_label(&c.data.spec.modalities),
                mdsc: d,
                loss: l,
                fed_ratio: Some(self.mask.client_ratio(i, &sizes)),
            });
        }
        let n = self.clients.len() as f64;
        rows.push(MetricsRow {
            round: self.round,
            site: "all".into(),
            modalities: String::new(),
            mdsc: dsum / n,
            loss: lsum / n,
            fed_ratio: Some(self.mask.federated_ratio(&sizes)),
        });
        Ok(rows)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config_text: self.config.to_text(),
            digest: self.config.digest(),
            round: self.round,
            server: self.server.clone(),
            server_rng: self.server_rng.state(),
            clients: self.clients.iter().map(|c| c.model.clone()).collect(),
            client_rngs: self.clients.iter().map(|c| c.rng.state()).collect(),
            mask: self.mask.clone(),
            anchors: self.anchors.clone(),
            metrics: self.metrics.clone(),
        }
    }

    /// Rebuilds a run from a checkpoint; continuing it matches the uninterrupted run.
    pub fn restore(ckpt: &Checkpoint) -> Result<Self> {
        let config = ckpt.config()?;
        if config.digest() != ckpt.digest {
            return contract_err("checkpoint config digest does not match its config text");
        }
        let mut sites = build_sites(&config)?.into_iter();
        let server_data = sites.next().expect("validated plan has a server");
        let arch = config.arch();
        if ckpt.server.arch != arch {
            return contract_err("checkpoint server architecture differs from its config");
        }
        let sites: Vec<SiteData> = sites.collect();
        if sites.len() != ckpt.clients.len() || ckpt.client_rngs.len() != ckpt.clients.len() {
            return contract_err(format!(
                "checkpoint holds {} clients, config describes {}",
                ckpt.clients.len(),
                sites.len()
            ));
        }
        let n_filters = shared_params(&ckpt.server.params, config.lacca_federated).filter_count();
        if ckpt.mask.n_clients() != sites.len() || ckpt.mask.n_filters() != n_filters {
            return contract_err("checkpoint mask does not fit the model");
        }
        let mut clients = Vec::with_capacity(sites.len());
        for ((data, model), &rng) in sites.into_iter().zip(&ckpt.clients).zip(&ckpt.client_rngs) {
            if model.arch != arch || model.modalities() != data.spec.modalities {
                return contract_err(format!("checkpoint model for site {} does not fit", data.spec.site_id));
            }
            clients.push(ClientSite {
                site_id: data.spec.site_id,
                data,
                model: model.clone(),
                rng: Rng::from_state(rng),
                expected_round: ckpt.round + 1,
                anchors: AnchorBank::empty(),
            });
        }
        Ok(Self {
            settings: config.settings(),
            config,
            server: ckpt.server.clone(),
            server_data,
            server_rng: Rng::from_state(ckpt.server_rng),
            clients,
            mask: ckpt.mask.clone(),
            anchors: ckpt.anchors.clone(),
            round: ckpt.round,
            metrics: ckpt.metrics.clone(),
        })
    }
}

/// Output of a complete run.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub metrics: Vec<MetricsRow>,
    pub checkpoint: Checkpoint,
}

/// Initial server training, anchor initialization and `config.rounds` rounds.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunOutput> {
    let mut exp = Experiment::new(config)?;
    exp.run_to(config.rounds)?;
    Ok(RunOutput {
        metrics: exp.metrics.clone(),
        checkpoint: exp.checkpoint(),
    })
}
