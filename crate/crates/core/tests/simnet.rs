use fedmepd::fedcore::PersonalizationMask;
use fedmepd::simnet::{
    client_update, metrics_csv, rows_for, run_experiment, shared_params, Broadcast, ClientSettings, Experiment,
    Report,
};
use fedmepd::{Error, ExperimentConfig, Mode};

fn small(rounds: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::desk();
    cfg.rounds = rounds;
    cfg.data.samples_per_site = 5;
    cfg
}

fn settings(exp: &Experiment, epochs: usize) -> ClientSettings {
    ClientSettings {
        epochs,
        lr: exp.config.lr,
        weight_decay: exp.config.weight_decay,
        use_lacca: true,
        lacca_federated: false,
    }
}

#[test]
fn zero_epochs_report_equals_aggregate() {
    let mut exp = Experiment::new(&small(1)).unwrap();
    let broadcasts = exp.broadcasts();
    let b = Broadcast::decode(&broadcasts[0]).unwrap();
    let s = settings(&exp, 0);
    let report = client_update(&mut exp.clients[0], &broadcasts[0], &s).unwrap();
    let r = Report::decode(&report).unwrap();
    // all-ones mask: client decoder is the server decoder
    assert_eq!(r.decoder, b.decoder);
    assert_eq!(r.encoders, b.encoders);
    assert_eq!(shared_params(&exp.clients[0].model.params, false), b.decoder);
}

#[test]
fn partial_mask_mixes_filters() {
    let mut exp = Experiment::new(&small(1)).unwrap();
    let local = exp.clients[1].model.params.decoder.clone();
    // make the local decoder distinguishable
    let mut marked = local.clone();
    for t in marked.tensors_mut() {
        t.values_mut().iter_mut().for_each(|v| *v = 42.0);
    }
    exp.clients[1].model.params.decoder = marked.clone();
    exp.mask.rows[1].bits[0] = 0;
    let broadcasts = exp.broadcasts();
    let b = Broadcast::decode(&broadcasts[1]).unwrap();
    let s = settings(&exp, 0);
    client_update(&mut exp.clients[1], &broadcasts[1], &s).unwrap();
    let got = &exp.clients[1].model.params.decoder;
    let slots = got.filter_slots();
    assert_eq!(got.filter(slots[0]), marked.filter(slots[0]));
    for &s in &slots[1..] {
        assert_eq!(got.filter(s), b.decoder.filter(s));
    }
}

#[test]
fn protocol_errors() {
    let mut exp = Experiment::new(&small(1)).unwrap();
    let s = settings(&exp, 0);
    let broadcasts = exp.broadcasts();
    // wrong recipient
    let err = client_update(&mut exp.clients[1], &broadcasts[0], &s).unwrap_err();
    assert!(matches!(err, Error::Protocol(_)), "{err}");
    // stale round
    let mut b = Broadcast::decode(&broadcasts[0]).unwrap();
    b.round = 7;
    let err = client_update(&mut exp.clients[0], &b.encode(), &s).unwrap_err();
    assert!(matches!(err, Error::Protocol(_)), "{err}");
    // corrupted bytes surface as decode errors
    let mut bad = broadcasts[0].clone();
    bad[0] = 0;
    assert!(matches!(client_update(&mut exp.clients[0], &bad, &s), Err(Error::Decode(_))));

    // missing report
    let reports = exp.run_clients(&broadcasts, false).unwrap();
    let err = exp.server_round(&reports[1..]).unwrap_err();
    assert!(matches!(err, Error::Protocol(_)), "{err}");
    // duplicate report
    let mut dup = reports.clone();
    dup[1] = dup[0].clone();
    assert!(matches!(exp.server_round(&dup), Err(Error::Protocol(_))));
    // reports are order independent
    let mut rev = reports.clone();
    rev.reverse();
    exp.server_round(&rev).unwrap();
    assert_eq!(exp.round, 1);
}

#[test]
fn zero_learning_rate_keeps_mask() {
    let mut cfg = small(3);
    cfg.lr = 0.0;
    cfg.weight_decay = 0.0;
    cfg.patience = 1;
    let mut exp = Experiment::new(&cfg).unwrap();
    let before = exp.mask.clone();
    exp.run_to(3).unwrap();
    assert_eq!(exp.mask, before);
}

#[test]
fn fedavg_server_decoder_is_client_mean() {
    let mut cfg = small(1);
    cfg.mode = Mode::Fedavg;
    cfg.epochs_per_round = 0;
    let mut exp = Experiment::new(&cfg).unwrap();
    // give clients distinct decoders so the mean is informative
    for (i, c) in exp.clients.iter_mut().enumerate() {
        for t in c.model.params.decoder.tensors_mut() {
            t.values_mut().iter_mut().for_each(|v| *v += i as f64);
        }
    }
    exp.mask = PersonalizationMask::personalized(exp.clients.len(), exp.mask.n_filters(), 10);
    let broadcasts = exp.broadcasts();
    // all-zero mask on the way out keeps the client's own decoder
    let reports = exp.run_clients(&broadcasts, false).unwrap();
    let decs: Vec<_> = reports.iter().map(|r| Report::decode(r).unwrap().decoder.flat()).collect();
    exp.mask = PersonalizationMask::new(exp.clients.len(), exp.mask.n_filters(), 10);
    exp.server_round(&reports).unwrap();
    let got = exp.server.params.decoder.flat();
    for (e, v) in got.iter().enumerate() {
        let mean = decs.iter().map(|d| d[e]).sum::<f64>() / decs.len() as f64;
        assert!((v - mean).abs() < 1e-12);
    }
}

#[test]
fn fully_personalized_equals_patience_zero() {
    let mut a = small(4);
    a.mode = Mode::FullyPersonalized;
    let mut b = small(4);
    b.patience = 0;
    let ra = run_experiment(&a).unwrap();
    let rb = run_experiment(&b).unwrap();
    assert_eq!(metrics_csv(&ra.metrics), metrics_csv(&rb.metrics));
    let last = rows_for(&ra.metrics, 4, "all").next().unwrap();
    assert_eq!(last.fed_ratio, Some(0.0));
}

#[test]
fn local_mode_never_federates() {
    let mut cfg = small(3);
    cfg.mode = Mode::Local;
    let out = run_experiment(&cfg).unwrap();
    for r in out.metrics.iter().filter(|r| r.site != "0") {
        assert_eq!(r.fed_ratio, Some(0.0));
    }
    assert!(out.checkpoint.anchors.is_empty());
}

#[test]
fn fedavg_ratio_stays_one() {
    let mut cfg = small(3);
    cfg.mode = Mode::Fedavg;
    let out = run_experiment(&cfg).unwrap();
    for r in out.metrics.iter().filter(|r| r.site == "all") {
        assert_eq!(r.fed_ratio, Some(1.0));
    }
}

#[test]
fn metrics_layout() {
    let cfg = small(2);
    let out = run_experiment(&cfg).unwrap();
    let csv = metrics_csv(&out.metrics);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "round,site_id,modalities,mdsc,loss,fed_ratio");
    // server + 8 clients + summary, per round
    assert_eq!(lines.len(), 1 + 2 * 10);
    assert!(lines[1].starts_with("1,0,T1+T1c+T2+FLAIR,"));
    assert!(lines[1].ends_with(','));
    assert!(lines[10].starts_with("1,all,,"));
}

#[test]
fn resume_mid_run_matches() {
    let cfg = small(6);
    let full = run_experiment(&cfg).unwrap();
    let mut exp = Experiment::new(&cfg).unwrap();
    exp.run_to(2).unwrap();
    let ck = fedmepd::simnet::Checkpoint::decode(&exp.checkpoint().encode()).unwrap();
    let mut resumed = Experiment::restore(&ck).unwrap();
    resumed.run_to(6).unwrap();
    assert_eq!(resumed.metrics, full.metrics);
    assert_eq!(resumed.checkpoint(), full.checkpoint);
}

#[test]
fn lacca_federated_switch() {
    let mut cfg = small(2);
    cfg.lacca_federated = true;
    let exp = Experiment::new(&cfg).unwrap();
    let plain = small(2);
    let base = Experiment::new(&plain).unwrap();
    assert!(exp.mask.n_filters() > base.mask.n_filters());
    let out = run_experiment(&cfg).unwrap();
    assert_eq!(out.checkpoint.round, 2);
}

#[test]
fn invalid_config_rejected_before_work() {
    let mut cfg = small(1);
    cfg.omega = 1.0;
    assert!(matches!(Experiment::new(&cfg), Err(Error::Config(_))));
}

#[test]
fn same_seed_same_data_across_modes() {
    let a = small(1);
    let mut b = small(1);
    b.mode = Mode::Local;
    let sa = fedmepd::simnet::build_sites(&a).unwrap();
    let sb = fedmepd::simnet::build_sites(&b).unwrap();
    for (x, y) in sa.iter().zip(&sb) {
        assert_eq!(x.train, y.train);
        assert_eq!(x.test, y.test);
    }
}
