//! Acceptance suite. Runs without the libtest harness so every criterion
//! prints exactly one PASS/FAIL line; exits non-zero if any criterion fails.

use std::collections::{BTreeMap, HashMap};
use std::time::{Duration, Instant};

use fedmepd::anchorbank::{ema_update, AnchorBank, AnchorMatching};
use fedmepd::fedcore::{aggregate_server_decoder, EtaRule, MaskRow, PersonalizationMask};
use fedmepd::lacca::calibrate;
use fedmepd::numkit::{kmeans, Rng, Tensor};
use fedmepd::simnet::codec::{decode_frame, DecodeError};
use fedmepd::simnet::{metrics_csv, rows_for, run_experiment, Broadcast, Checkpoint, Experiment, Report, RoundMessage};
use fedmepd::synthdata::{generate, DataParams, ModalityId};
use fedmepd::toymodel::{loss, min_abs_preactivation, Arch, Layer, ParamSet, Role, SiteModel};
use fedmepd::{ExperimentConfig, Mode};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

// ---------------------------------------------------------------- 1

fn random_bank(rng: &mut Rng, arch: &Arch, per_class: usize) -> AnchorBank {
    let rows = arch.n_classes * per_class;
    let levels = arch
        .channels
        .iter()
        .map(|&c| {
            let v = (0..rows * c).map(|_| rng.uniform(0.0, 1.0)).collect();
            Tensor::new(vec![rows, c], v).unwrap()
        })
        .collect();
    AnchorBank {
        levels,
        n_classes: arch.n_classes,
        per_class,
        stale: vec![false; arch.n_classes],
    }
}

fn gradient_check() -> Outcome {
    const H: f64 = 1e-5;
    const TOL: f64 = 1e-4;
    let mut rng = Rng::seed_from(0x6AD);
    let mut done = 0;
    let mut skipped = 0;
    let mut worst: f64 = 0.0;
    let mut checked = 0usize;
    while done < 20 {
        let n_classes = 2 + rng.below(3);
        let arch = Arch {
            n_modalities: 4,
            n_classes,
            channels: vec![2, 4],
            n_heads: 2,
        };
        let mut mods: Vec<ModalityId> = (0..4u8).map(ModalityId).collect();
        rng.shuffle(&mut mods);
        mods.truncate(1 + rng.below(4));
        mods.sort();
        let mut model = SiteModel::init(&arch, &mods, &mut rng);
        let data = DataParams {
            height: 8,
            width: 8,
            n_classes,
            contrast: fedmepd::synthdata::default_contrast()
                .into_iter()
                .map(|row| row[..n_classes].to_vec())
                .collect(),
            ..DataParams::default()
        };
        let sample = generate(rng.next_f64().to_bits(), 1, &data).unwrap().remove(0);
        let per_class = 1 + rng.below(3);
        let bank = random_bank(&mut rng, &arch, per_class);

        let trace = model.forward(&sample, Some(&bank)).unwrap();
        if min_abs_preactivation(&trace) < 10.0 * H {
            skipped += 1;
            continue;
        }
        let (_, grads) = model.loss_and_grad(&sample, Some(&bank)).unwrap();
        let analytic: Vec<f64> = grads.tensors().flat_map(|t| t.values().to_vec()).collect();
        let n_params = analytic.len();
        let mut k = 0;
        for ti in 0..model.params.tensors().count() {
            let len = model.params.tensors().nth(ti).unwrap().len();
            for e in 0..len {
                let mut eval = |delta: f64| {
                    let t = model.params.tensors_mut().nth(ti).unwrap();
                    t.values_mut()[e] += delta;
                    let tr = model.forward(&sample, Some(&bank)).unwrap();
                    let l = loss(&tr, &sample).value;
                    let t = model.params.tensors_mut().nth(ti).unwrap();
                    t.values_mut()[e] -= delta;
                    l
                };
                let numeric = (eval(H) - eval(-H)) / (2.0 * H);
                let a = analytic[k];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                worst = worst.max(rel);
                k += 1;
            }
        }
        assert_eq!(k, n_params);
        checked += n_params;
        done += 1;
    }
    outcome(
        worst <= TOL,
        format!("20 instances, {checked} parameters, worst relative error {worst:.2e} (tol {TOL:.0e}), {skipped} kink draws redrawn"),
    )
}

// ---------------------------------------------------------------- 2

/// Independent patience-rule reference on one filter's δ stream.
fn reference_bit(stream: &[f64], patience: u32) -> (Vec<u8>, u32) {
    let mut bit = 1u8;
    let mut count = 0u32;
    let mut bits = Vec::new();
    for &d in stream {
        if bit == 1 {
            if patience == 0 {
                bit = 0;
            } else if d < 0.0 {
                count += 1;
                if count >= patience {
                    bit = 0;
                }
            } else {
                count = 0;
            }
        }
        bits.push(bit);
    }
    (bits, count)
}

fn run_mask(streams: &[Vec<Vec<f64>>], patience: u32) -> Vec<PersonalizationMask> {
    let clients = streams.len();
    let filters = streams[0].len();
    let rounds = streams[0][0].len();
    let mut m = PersonalizationMask::new(clients, filters, patience);
    let mut history = Vec::new();
    for r in 0..rounds {
        let deltas: Vec<Vec<Option<f64>>> = (0..clients)
            .map(|i| {
                (0..filters)
                    .map(|j| m.rows[i].federated(j).then_some(streams[i][j][r]))
                    .collect()
            })
            .collect();
        m.update(&deltas).unwrap();
        history.push(m.clone());
    }
    history
}

fn mask_dynamics() -> Outcome {
    let mut rng = Rng::seed_from(0x3A5C);
    let mut failures = Vec::new();
    for case in 0..1000 {
        let clients = 1 + rng.below(4);
        let filters = 1 + rng.below(6);
        let rounds = 1 + rng.below(30);
        let bias = rng.uniform(-0.5, 0.5);
        let streams: Vec<Vec<Vec<f64>>> = (0..clients)
            .map(|_| {
                (0..filters)
                    .map(|_| {
                        (0..rounds)
                            .map(|_| match rng.below(10) {
                                0 => 0.0,
                                _ => (rng.uniform(-1.0, 1.0) + bias).clamp(-1.0, 1.0),
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect();
        let p = rng.below(8) as u32;
        let p2 = p + 1 + rng.below(5) as u32;
        let hist = run_mask(&streams, p);
        let hist2 = run_mask(&streams, p2);

        for i in 0..clients {
            for j in 0..filters {
                let (ref_bits, ref_count) = reference_bit(&streams[i][j], p);
                let got: Vec<u8> = hist.iter().map(|m| m.rows[i].bits[j]).collect();
                if got != ref_bits || hist.last().unwrap().rows[i].counters[j] != ref_count {
                    failures.push(format!("case {case}: counter/reset semantics differ"));
                }
                if got.windows(2).any(|w| w[0] == 0 && w[1] == 1) {
                    failures.push(format!("case {case}: bit returned to 1"));
                }
                if p == 0 && got[0] != 0 {
                    failures.push(format!("case {case}: P=0 did not personalize at once"));
                }
                for (a, b) in hist.iter().zip(&hist2) {
                    if b.rows[i].bits[j] == 0 && a.rows[i].bits[j] != 0 {
                        failures.push(format!("case {case}: P={p2} personalized more than P={p}"));
                    }
                }
            }
        }
    }
    failures.dedup();
    outcome(
        failures.is_empty(),
        if failures.is_empty() {
            "1000 streams: monotone, reset semantics, P=0, P-ordering all hold".to_string()
        } else {
            format!("{} violations, first: {}", failures.len(), failures[0])
        },
    )
}

// ---------------------------------------------------------------- 3, 4

fn random_decoder(rng: &mut Rng, dims: &[(usize, usize, bool)]) -> ParamSet {
    let layers = dims
        .iter()
        .enumerate()
        .map(|(i, &(out, inp, bias))| Layer {
            name: format!("dec.r{i}"),
            weight: Tensor::new(vec![out, inp], (0..out * inp).map(|_| rng.uniform(-3.0, 3.0)).collect())
                .unwrap(),
            bias: bias.then(|| Tensor::vector((0..out).map(|_| rng.uniform(-3.0, 3.0)).collect())),
        })
        .collect();
    ParamSet {
        role: Role::Decoder,
        layers,
    }
}

struct Snapshot {
    prev: ParamSet,
    trained: Vec<ParamSet>,
    agg: Vec<ParamSet>,
}

fn random_snapshot(rng: &mut Rng) -> Snapshot {
    let n_layers = 1 + rng.below(3);
    let dims: Vec<_> = (0..n_layers)
        .map(|_| (1 + rng.below(5), 1 + rng.below(5), rng.below(2) == 0))
        .collect();
    let clients = 1 + rng.below(6);
    Snapshot {
        prev: random_decoder(rng, &dims),
        trained: (0..clients).map(|_| random_decoder(rng, &dims)).collect(),
        agg: (0..clients).map(|_| random_decoder(rng, &dims)).collect(),
    }
}

/// Filter values as (weights row, bias) flattened, by independent indexing.
fn filters_of(p: &ParamSet) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    for l in &p.layers {
        let inp = l.weight.cols();
        for r in 0..l.weight.rows() {
            let mut f = l.weight.values()[r * inp..(r + 1) * inp].to_vec();
            if let Some(b) = &l.bias {
                f.push(b.values()[r]);
            }
            out.push(f);
        }
    }
    out
}

fn fedavg_reduction() -> Outcome {
    let mut rng = Rng::seed_from(0xFEDA);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let s = random_snapshot(&mut rng);
        let n = s.trained.len();
        let mask = PersonalizationMask::new(n, s.prev.filter_count(), 10);
        let out = aggregate_server_decoder(&s.prev, &s.trained, &s.agg, &mask, EtaRule::Uniform, 0.0).unwrap();
        let got = filters_of(&out);
        let clients: Vec<_> = s.trained.iter().map(filters_of).collect();
        for (j, f) in got.iter().enumerate() {
            for (e, v) in f.iter().enumerate() {
                let mean = clients.iter().map(|c| c[j][e]).sum::<f64>() / n as f64;
                worst = worst.max((v - mean).abs());
            }
        }
    }
    outcome(worst <= 1e-12, format!("100 snapshots, max |server − client mean| = {worst:.1e}"))
}

fn convex_hull() -> Outcome {
    let mut rng = Rng::seed_from(0xC0DE);
    let mut worst: f64 = 0.0;
    let mut frozen_ok = true;
    for _ in 0..100 {
        let s = random_snapshot(&mut rng);
        let n = s.trained.len();
        let nf = s.prev.filter_count();
        let mut mask = PersonalizationMask::new(n, nf, 10);
        for row in &mut mask.rows {
            for b in &mut row.bits {
                *b = u8::from(rng.below(3) != 0);
            }
        }
        let lambda = rng.next_f64();
        let rule = if rng.below(2) == 0 { EtaRule::InverseNorm } else { EtaRule::Uniform };
        let out = aggregate_server_decoder(&s.prev, &s.trained, &s.agg, &mask, rule, lambda).unwrap();
        let got = filters_of(&out);
        let prev = filters_of(&s.prev);
        let clients: Vec<_> = s.trained.iter().map(filters_of).collect();
        for j in 0..nf {
            let fed: Vec<usize> = (0..n).filter(|&i| mask.rows[i].bits[j] == 1).collect();
            if fed.is_empty() && got[j] != prev[j] {
                frozen_ok = false;
            }
            for e in 0..got[j].len() {
                let pts = std::iter::once(prev[j][e]).chain(fed.iter().map(|&i| clients[i][j][e]));
                let (lo, hi) = pts.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
                let v = got[j][e];
                worst = worst.max(lo - v).max(v - hi);
            }
        }
    }
    outcome(
        worst <= 1e-12 && frozen_ok,
        format!("100 snapshots, max hull excursion {:.1e}, fully personalized filters frozen: {frozen_ok}", worst.max(0.0)),
    )
}

// ---------------------------------------------------------------- 5

fn bank_gap(a: &AnchorBank, b: &AnchorBank) -> f64 {
    a.levels
        .iter()
        .zip(&b.levels)
        .flat_map(|(x, y)| x.values().iter().zip(y.values()).map(|(p, q)| (p - q) * (p - q)))
        .sum::<f64>()
        .sqrt()
}

fn anchor_contraction() -> Outcome {
    let mut rng = Rng::seed_from(0xE3A);
    let arch = Arch {
        n_modalities: 4,
        n_classes: 3,
        channels: vec![4, 6],
        n_heads: 2,
    };
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let omega = rng.uniform(0.5, 0.999);
        let mut bank = random_bank(&mut rng, &arch, 1);
        let target = random_bank(&mut rng, &arch, 1);
        let g0 = bank_gap(&bank, &target);
        for t in 1..=50 {
            bank = ema_update(&bank, &target, omega, 2, AnchorMatching::Nearest).unwrap();
            let expect = omega.powi(t) * g0;
            worst = worst.max((bank_gap(&bank, &target) - expect).abs());
        }
    }
    let bank = random_bank(&mut rng, &arch, 1);
    let target = random_bank(&mut rng, &arch, 1);
    let one = ema_update(&bank, &target, 0.999, 2, AnchorMatching::Nearest).unwrap();
    let moved = 1.0 - bank_gap(&one, &target) / bank_gap(&bank, &target);
    let step_ok = (moved - 0.001).abs() < 1e-9;
    outcome(
        worst <= 1e-9 && step_ok,
        format!("max |gap − ω^t·gap0| = {worst:.1e}; ω=0.999 single step closes {:.6}% of the gap", moved * 100.0),
    )
}

// ---------------------------------------------------------------- 6

fn brute_force_sse(points: &[Vec<f64>], k: usize) -> f64 {
    let n = points.len();
    let d = points[0].len();
    let mut best = f64::INFINITY;
    let total = k.pow(n as u32);
    for code in 0..total {
        let mut c = code;
        let mut assign = vec![0; n];
        for a in assign.iter_mut() {
            *a = c % k;
            c /= k;
        }
        let mut sse = 0.0;
        for g in 0..k {
            let members: Vec<&Vec<f64>> = (0..n).filter(|&i| assign[i] == g).map(|i| &points[i]).collect();
            if members.is_empty() {
                continue;
            }
            for dim in 0..d {
                let mean = members.iter().map(|p| p[dim]).sum::<f64>() / members.len() as f64;
                sse += members.iter().map(|p| (p[dim] - mean).powi(2)).sum::<f64>();
            }
        }
        best = best.min(sse);
    }
    best
}

fn kmeans_oracle() -> Outcome {
    let mut rng = Rng::seed_from(0x4EA5);
    let mut hits = 0;
    for _ in 0..50 {
        let n = 1 + rng.below(8);
        let k = 1 + rng.below(3);
        let d = 1 + rng.below(3);
        let pts: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.uniform(-5.0, 5.0)).collect()).collect();
        let t = Tensor::new(vec![n, d], pts.concat()).unwrap();
        let km = kmeans(&t, k, &mut rng, 100).unwrap();
        let got = km.sse(&t);
        let best = brute_force_sse(&pts, k);
        if got <= best + 1e-9 * best.max(1.0) {
            hits += 1;
        }
    }
    outcome(hits * 100 >= 95 * 50, format!("optimal SSE on {hits}/50 instances (need 95%)"))
}

// ---------------------------------------------------------------- 7

fn rand_tensor(rng: &mut Rng, r: usize, c: usize) -> Tensor {
    Tensor::new(vec![r, c], (0..r * c).map(|_| rng.uniform(-1.5, 1.5)).collect()).unwrap()
}

/// X·Wᵀ with plain loops.
fn project(x: &Tensor, w: &Tensor) -> Vec<Vec<f64>> {
    (0..x.rows())
        .map(|i| {
            (0..w.rows())
                .map(|o| (0..x.cols()).map(|c| x.values()[i * x.cols() + c] * w.values()[o * w.cols() + c]).sum())
                .collect()
        })
        .collect()
}

fn lacca_contract() -> Outcome {
    let mut rng = Rng::seed_from(0x1ACC);
    let mut row_err: f64 = 0.0;
    let mut single_err: f64 = 0.0;
    let mut literal_err: f64 = 0.0;
    for _ in 0..50 {
        let heads = [1, 2, 4][rng.below(3)];
        let c = heads * (1 + rng.below(3));
        let t = 1 + rng.below(12);
        let n = 1 + rng.below(8);
        let (x, a) = (rand_tensor(&mut rng, t, c), rand_tensor(&mut rng, n, c));
        let (wq, wk, wv) = (rand_tensor(&mut rng, c, c), rand_tensor(&mut rng, c, c), rand_tensor(&mut rng, c, c));
        let (_, cache) = calibrate(&x, &a, &wq, &wk, &wv, heads).unwrap();
        for h in 0..heads {
            let att = cache.attention(h);
            for r in 0..att.rows() {
                row_err = row_err.max((att.row(r).iter().sum::<f64>() - 1.0).abs());
            }
        }

        let one = rand_tensor(&mut rng, 1, c);
        let (out, _) = calibrate(&x, &one, &wq, &wk, &wv, heads).unwrap();
        let v = &project(&one, &wv)[0];
        for r in 0..t {
            for (o, e) in out.row(r).iter().zip(v) {
                single_err = single_err.max((o - e).abs());
            }
        }

        let (out1, _) = calibrate(&x, &a, &wq, &wk, &wv, 1).unwrap();
        let q = project(&x, &wq);
        let k = project(&a, &wk);
        let vv = project(&a, &wv);
        for i in 0..t {
            let s: Vec<f64> = (0..n)
                .map(|j| (0..c).map(|z| q[i][z] * k[j][z]).sum::<f64>() / (c as f64).sqrt())
                .collect();
            let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = s.iter().map(|v| (v - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for col in 0..c {
                let want: f64 = (0..n).map(|j| e[j] / z * vv[j][col]).sum();
                literal_err = literal_err.max((out1.row(i)[col] - want).abs());
            }
        }
    }
    outcome(
        row_err <= 1e-12 && single_err <= 1e-10 && literal_err <= 1e-10,
        format!("row sums ±{row_err:.1e}, single anchor {single_err:.1e}, one head vs literal {literal_err:.1e}"),
    )
}

// ---------------------------------------------------------------- 8

fn determinism_resume() -> Outcome {
    let cfg = ExperimentConfig::desk();
    let a = metrics_csv(&run_experiment(&cfg).unwrap().metrics);
    let b = metrics_csv(&run_experiment(&cfg).unwrap().metrics);

    let mut first = Experiment::new(&cfg).unwrap();
    first.run_to(30).unwrap();
    let bytes = first.checkpoint().encode();
    drop(first);
    let mut resumed = Experiment::restore(&Checkpoint::decode(&bytes).unwrap()).unwrap();
    resumed.run_to(cfg.rounds).unwrap();
    let c = metrics_csv(&resumed.metrics);

    let mut seq = cfg.clone();
    seq.parallel = !cfg.parallel;
    let d = metrics_csv(&run_experiment(&seq).unwrap().metrics);

    let rows = a.lines().count() - 1;
    outcome(
        a == b && a == c && a == d,
        format!(
            "{rows} rows; repeat identical: {}, resume@30 identical: {}, threaded vs sequential identical: {}",
            a == b,
            a == c,
            a == d
        ),
    )
}

// ---------------------------------------------------------------- 9, 10, 11

#[derive(Clone, Copy)]
struct RunSummary {
    client_mdsc: f64,
    fed_ratio: f64,
    mono_ratio: f64,
    full_ratio: f64,
}

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

fn desk_run(mode: Mode, patience: u32, seed: u64, cache: &mut HashMap<(String, u32, u64), RunSummary>) -> RunSummary {
    *cache.entry((mode.to_string(), patience, seed)).or_insert_with(|| {
        let mut cfg = ExperimentConfig::desk();
        cfg.mode = mode;
        cfg.patience = patience;
        cfg.seed = seed;
        let out = run_experiment(&cfg).unwrap();
        let last = cfg.rounds;
        let all = rows_for(&out.metrics, last, "all").next().unwrap();
        let mut by_count: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        for row in out.metrics.iter().filter(|r| r.round == last && r.site != "all") {
            if let Some(fr) = row.fed_ratio {
                by_count.entry(row.modalities.split('+').count()).or_default().push(fr);
            }
        }
        let mean = |v: &Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
        RunSummary {
            client_mdsc: all.mdsc,
            fed_ratio: all.fed_ratio.unwrap(),
            mono_ratio: mean(&by_count[&1]),
            full_ratio: mean(&by_count[&4]),
        }
    })
}

fn ratio_vs_patience(cache: &mut HashMap<(String, u32, u64), RunSummary>) -> Outcome {
    let med: Vec<f64> = [2, 6, 10]
        .iter()
        .map(|&p| median(SEEDS.iter().map(|&s| desk_run(Mode::Fedmepd, p, s, cache).fed_ratio).collect()))
        .collect();
    outcome(
        med[0] <= med[1] && med[1] <= med[2],
        format!("median final federated ratio P=2: {:.3}, P=6: {:.3}, P=10: {:.3}", med[0], med[1], med[2]),
    )
}

fn ratio_vs_modalities(cache: &mut HashMap<(String, u32, u64), RunSummary>) -> Outcome {
    let mono = median(SEEDS.iter().map(|&s| desk_run(Mode::Fedmepd, 10, s, cache).mono_ratio).collect());
    let full = median(SEEDS.iter().map(|&s| desk_run(Mode::Fedmepd, 10, s, cache).full_ratio).collect());
    outcome(mono <= full, format!("median federated ratio mono-modal {mono:.3}, full-modal {full:.3}"))
}

fn ablation_ordering(cache: &mut HashMap<(String, u32, u64), RunSummary>) -> Outcome {
    let base = ExperimentConfig::desk().patience;
    let med = |m: Mode, cache: &mut HashMap<_, _>| {
        median(SEEDS.iter().map(|&s| desk_run(m, base, s, cache).client_mdsc).collect())
    };
    let ours = med(Mode::Fedmepd, cache);
    let others = [Mode::FullyPersonalized, Mode::Fedavg, Mode::Local].map(|m| (m, med(m, cache)));
    let pass = others.iter().all(|(_, v)| ours - v >= 0.01);
    let detail = others
        .iter()
        .map(|(m, v)| format!("{m} {v:.3} (margin {:+.3})", ours - v))
        .collect::<Vec<_>>()
        .join(", ");
    outcome(pass, format!("median client mDSC fedmepd {ours:.3}; {detail}"))
}

// ---------------------------------------------------------------- 12

fn random_param_set(rng: &mut Rng, role: Role) -> ParamSet {
    let layers = (0..rng.below(4))
        .map(|i| {
            let (o, n) = (rng.below(4), rng.below(4));
            Layer {
                name: format!("l{i}.{}", rng.below(1000)),
                weight: Tensor::new(vec![o, n], (0..o * n).map(|_| rng.normal() * 1e3).collect()).unwrap(),
                bias: (rng.below(2) == 0).then(|| Tensor::vector((0..o).map(|_| rng.normal()).collect())),
            }
        })
        .collect();
    ParamSet { role, layers }
}

fn random_encoders(rng: &mut Rng) -> BTreeMap<ModalityId, ParamSet> {
    let mut out = BTreeMap::new();
    for m in 0..4u8 {
        if rng.below(2) == 0 {
            out.insert(ModalityId(m), random_param_set(rng, Role::Encoder(ModalityId(m))));
        }
    }
    out
}

fn random_message(rng: &mut Rng) -> RoundMessage {
    if rng.below(2) == 0 {
        let anchors = if rng.below(4) == 0 {
            AnchorBank::empty()
        } else {
            let nc = 1 + rng.below(4);
            let nk = 1 + rng.below(3);
            AnchorBank {
                levels: (0..1 + rng.below(3))
                    .map(|_| {
                        let width = rng.below(5);
                        rand_tensor(rng, nc * nk, width)
                    })
                    .collect(),
                n_classes: nc,
                per_class: nk,
                stale: (0..nc).map(|_| rng.below(2) == 0).collect(),
            }
        };
        let nf = rng.below(20);
        RoundMessage::Broadcast(Broadcast {
            round: rng.next_f64().to_bits(),
            recipient: rng.below(1 << 20) as u32,
            encoders: random_encoders(rng),
            decoder: random_param_set(rng, Role::Decoder),
            anchors,
            mask: MaskRow {
                bits: (0..nf).map(|_| rng.below(2) as u8).collect(),
                counters: vec![0; nf],
            },
        })
    } else {
        RoundMessage::Report(Report {
            round: rng.next_f64().to_bits(),
            site_id: rng.below(1 << 20) as u32,
            encoders: random_encoders(rng),
            decoder: random_param_set(rng, Role::Decoder),
        })
    }
}

fn codec() -> Outcome {
    let mut rng = Rng::seed_from(0xC0DEC);
    let mut mismatches = 0;
    let mut sample = Vec::new();
    for i in 0..10_000 {
        let m = random_message(&mut rng);
        let bytes = m.encode();
        if RoundMessage::decode(&bytes).as_ref() != Ok(&m) {
            mismatches += 1;
        }
        if i == 0 {
            sample = bytes;
        }
    }
    let mut checks = Vec::new();
    let mut corrupt = |name: &str, f: &dyn Fn(&mut Vec<u8>), ok: &dyn Fn(&DecodeError) -> bool| {
        let mut b = sample.clone();
        f(&mut b);
        let got = RoundMessage::decode(&b);
        checks.push((name.to_string(), matches!(&got, Err(e) if ok(e))));
    };
    corrupt("magic", &|b| b[1] ^= 0x20, &|e| matches!(e, DecodeError::BadMagic(_)));
    corrupt("version", &|b| b[4] = 7, &|e| matches!(e, DecodeError::UnsupportedVersion(7)));
    corrupt("kind", &|b| b[6] = 99, &|e| matches!(e, DecodeError::UnknownKind(99)));
    corrupt(
        "crc",
        &|b| {
            let i = b.len() - 5;
            b[i] ^= 1
        },
        &|e| matches!(e, DecodeError::ChecksumMismatch { .. }),
    );
    corrupt("truncation", &|b| b.truncate(b.len() - 3), &|e| matches!(e, DecodeError::Truncated { .. }));
    corrupt("length prefix", &|b| b[14] = 0x7f, &|e| matches!(e, DecodeError::Truncated { .. }));
    corrupt("trailing", &|b| b.push(0), &|e| matches!(e, DecodeError::TrailingBytes(1)));
    let frame_ok = decode_frame(&sample).is_ok();
    let bad: Vec<&str> = checks.iter().filter(|(_, ok)| !ok).map(|(n, _)| n.as_str()).collect();
    outcome(
        mismatches == 0 && bad.is_empty() && frame_ok,
        format!(
            "10000 random messages, {mismatches} round-trip mismatches; corruption cases with wrong error: {}",
            if bad.is_empty() { "none".to_string() } else { bad.join(", ") }
        ),
    )
}

// ----------------------------------------------------------------

fn main() {
    let mut cache = HashMap::new();
    type Check<'a> = Box<dyn FnMut() -> Outcome + 'a>;
    let mut failed = 0;
    let criteria: Vec<(&str, Duration, Check<'_>)> = vec![
        ("gradient correctness", Duration::from_secs(60), Box::new(gradient_check)),
        ("mask dynamics", Duration::from_secs(30), Box::new(mask_dynamics)),
        ("fedavg reduction", Duration::from_secs(30), Box::new(fedavg_reduction)),
        ("convex-hull aggregation", Duration::from_secs(30), Box::new(convex_hull)),
        ("anchor EMA contraction", Duration::from_secs(30), Box::new(anchor_contraction)),
        ("k-means oracle", Duration::from_secs(30), Box::new(kmeans_oracle)),
        ("LACCA contract", Duration::from_secs(30), Box::new(lacca_contract)),
        ("determinism and resume", Duration::from_secs(600), Box::new(determinism_resume)),
        ("federated ratio vs patience", Duration::from_secs(600), Box::new(|| ratio_vs_patience(&mut cache))),
    ];
    let mut run = |idx: usize, name: &str, budget: Duration, f: &mut dyn FnMut() -> Outcome| {
        let t = Instant::now();
        let o = f();
        let dt = t.elapsed();
        let in_time = dt <= budget;
        let pass = o.pass && in_time;
        if !pass {
            failed += 1;
        }
        println!(
            "criterion {idx:>2} {} {name}: {} [{:.1}s{}]",
            if pass { "PASS" } else { "FAIL" },
            o.detail,
            dt.as_secs_f64(),
            if in_time { String::new() } else { format!(", over {}s budget", budget.as_secs()) }
        );
    };
    for (i, (name, budget, mut f)) in criteria.into_iter().enumerate() {
        run(i + 1, name, budget, &mut *f);
    }
    // The remaining desk criteria reuse runs cached above.
    let mut cache2 = HashMap::new();
    std::mem::swap(&mut cache2, &mut cache);
    run(10, "federated ratio vs modalities", Duration::from_secs(600), &mut || {
        ratio_vs_modalities(&mut cache2)
    });
    run(11, "ablation ordering", Duration::from_secs(1200), &mut || ablation_ordering(&mut cache2));
    run(12, "codec", Duration::from_secs(60), &mut codec);
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
    println!("all 12 acceptance criteria passed");
}
