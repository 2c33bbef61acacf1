//! Multi-anchor class prototypes extracted from the server's fused features.
//!
//! Per-(sample, class) vectors come from masked average pooling of each
//! decoder-level input. K-means runs on the membership level only; the
//! resulting membership defines the anchors at every level. The bank is then
//! maintained by an exponential moving average toward freshly clustered
//! centroids.

use perm::permutations;

use crate::error::{contract_err, param_err, Result};
use crate::numkit::{kmeans, Rng, Tensor};
use crate::synthdata::Sample;
use crate::toymodel::{ForwardTrace, SiteModel};

pub const DEFAULT_OMEGA: f64 = 0.999;

/// How memory anchors pick the fresh centroid they move toward.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum AnchorMatching {
    /// Nearest fresh centroid of the same class; several anchors may share one.
    #[default]
    Nearest,
    /// Minimum-cost one-to-one assignment within each class.
    OneToOne,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnchorBank {
    /// `A_l`, shape `(N_k·N_c) × C_l`, rows grouped by class.
    pub levels: Vec<Tensor>,
    pub n_classes: usize,
    pub per_class: usize,
    /// Classes that had no pooled features when the bank was built.
    pub stale: Vec<bool>,
}

impl AnchorBank {
    pub fn empty() -> Self {
        Self {
            levels: Vec::new(),
            n_classes: 0,
            per_class: 0,
            stale: Vec::new(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn class_of(&self, anchor: usize) -> usize {
        anchor / self.per_class
    }

    pub fn anchor_count(&self) -> usize {
        self.n_classes * self.per_class
    }

    fn same_layout(&self, other: &AnchorBank) -> bool {
        self.n_classes == other.n_classes
            && self.per_class == other.per_class
            && self.levels.len() == other.levels.len()
            && self
                .levels
                .iter()
                .zip(&other.levels)
                .all(|(a, b)| a.shape() == b.shape())
    }

    /// L2 norm of every anchor row, level by level.
    pub fn anchor_norms(&self) -> Vec<Vec<f64>> {
        self.levels
            .iter()
            .map(|a| {
                (0..a.rows())
                    .map(|r| a.row(r).iter().map(|v| v * v).sum::<f64>().sqrt())
                    .collect()
            })
            .collect()
    }
}

/// Mean of the feature rows whose label equals `class`; `None` if there are none.
pub fn masked_average_pool(features: &Tensor, labels: &[usize], class: usize) -> Option<Vec<f64>> {
    let c = features.cols();
    let mut acc = vec![0.0; c];
    let mut n = 0usize;
    for (i, &y) in labels.iter().enumerate() {
        if y == class {
            n += 1;
            for (a, v) in acc.iter_mut().zip(features.row(i)) {
                *a += v;
            }
        }
    }
    (n > 0).then(|| {
        acc.iter_mut().for_each(|v| *v /= n as f64);
        acc
    })
}

/// Nearest-neighbour downsampling of an `h × w` label map by `factor`.
pub fn downsample_labels(labels: &[usize], h: usize, w: usize, factor: usize) -> Vec<usize> {
    let (hh, ww) = (h / factor, w / factor);
    let mut out = Vec::with_capacity(hh * ww);
    for y in 0..hh {
        for x in 0..ww {
            out.push(labels[(y * factor) * w + x * factor]);
        }
    }
    out
}

/// One pooled class vector.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassFeature {
    pub sample_id: usize,
    pub class: usize,
    pub vector: Vec<f64>,
}

/// Pooled class vectors per level, sharing one (sample, class) key set.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ClassFeatureSet {
    pub levels: Vec<Vec<ClassFeature>>,
}

impl ClassFeatureSet {
    /// Adds the pooled vectors of one forward pass. A class enters only if it
    /// survives downsampling to every level, so all levels share keys.
    pub fn push_trace(&mut self, sample_id: usize, trace: &ForwardTrace, labels: &[usize], n_classes: usize) {
        let levels = trace.levels();
        if self.levels.is_empty() {
            self.levels = vec![Vec::new(); levels];
        }
        let per_level: Vec<Vec<usize>> = (1..=levels)
            .map(|l| downsample_labels(labels, trace.height, trace.width, 1 << (l - 1)))
            .collect();
        for class in 0..n_classes {
            let pooled: Option<Vec<Vec<f64>>> = (0..levels)
                .map(|i| masked_average_pool(&trace.level_inputs[i], &per_level[i], class))
                .collect();
            if let Some(vectors) = pooled {
                for (i, vector) in vectors.into_iter().enumerate() {
                    self.levels[i].push(ClassFeature {
                        sample_id,
                        class,
                        vector,
                    });
                }
            }
        }
    }

    fn sort(&mut self) {
        for level in &mut self.levels {
            level.sort_by_key(|f| (f.sample_id, f.class));
        }
    }
}

/// Runs the (uncalibrated) model over `samples` and pools class features.
pub fn extract_class_features(model: &SiteModel, samples: &[(usize, &Sample)]) -> Result<ClassFeatureSet> {
    let mut set = ClassFeatureSet::default();
    for (id, s) in samples {
        let trace = model.forward(s, None)?;
        set.push_trace(*id, &trace, &s.classes(), model.arch.n_classes);
    }
    Ok(set)
}

const KMEANS_ITERS: usize = 100;

/// Clusters each class at `membership_level` (1-based) into `per_class`
/// groups and averages every level under that membership.
pub fn build_bank(
    features: &ClassFeatureSet,
    n_classes: usize,
    per_class: usize,
    membership_level: usize,
    rng: &mut Rng,
) -> Result<AnchorBank> {
    if per_class == 0 {
        return param_err("need at least one anchor per class");
    }
    let levels = features.levels.len();
    if membership_level == 0 || membership_level > levels {
        return param_err(format!(
            "membership level {membership_level} outside 1..={levels}"
        ));
    }
    let mut features = features.clone();
    features.sort();
    let widths: Vec<usize> = features
        .levels
        .iter()
        .map(|l| l.first().map_or(0, |f| f.vector.len()))
        .collect();
    let mut banks: Vec<Tensor> = widths
        .iter()
        .map(|&c| Tensor::zeros(vec![n_classes * per_class, c]))
        .collect();
    let mut stale = vec![false; n_classes];
    // Per-class streams keep clustering independent of other classes' draws.
    let class_seed = rng.next_f64().to_bits();

    for class in 0..n_classes {
        let rows: Vec<usize> = features.levels[membership_level - 1]
            .iter()
            .enumerate()
            .filter(|(_, f)| f.class == class)
            .map(|(i, _)| i)
            .collect();
        if rows.is_empty() {
            stale[class] = true;
            continue;
        }
        let c = widths[membership_level - 1];
        let mut pts = Vec::with_capacity(rows.len() * c);
        for &r in &rows {
            pts.extend_from_slice(&features.levels[membership_level - 1][r].vector);
        }
        let pts = Tensor::new(vec![rows.len(), c], pts)?;
        let mut class_rng = Rng::derive(class_seed, class as u64);
        let km = kmeans(&pts, per_class, &mut class_rng, KMEANS_ITERS)?;

        for (li, level) in features.levels.iter().enumerate() {
            let cl = widths[li];
            for k in 0..per_class {
                let members: Vec<usize> = (0..rows.len()).filter(|&p| km.membership[p] == k).collect();
                let dst = banks[li].row_mut(class * per_class + k);
                if members.is_empty() {
                    // Duplicate centroid: reuse the cluster it copies.
                    let twin = k % rows.len();
                    dst.copy_from_slice(&level[rows[twin]].vector);
                    continue;
                }
                let mut acc = vec![0.0; cl];
                for &p in &members {
                    for (a, v) in acc.iter_mut().zip(&level[rows[p]].vector) {
                        *a += v;
                    }
                }
                for (d, a) in dst.iter_mut().zip(acc) {
                    *d = a / members.len() as f64;
                }
            }
        }
    }
    Ok(AnchorBank {
        levels: banks,
        n_classes,
        per_class,
        stale,
    })
}

/// Convenience: pool features of `samples` through `model` and build a bank.
pub fn build_bank_from_model(
    model: &SiteModel,
    samples: &[(usize, &Sample)],
    per_class: usize,
    membership_level: usize,
    rng: &mut Rng,
) -> Result<AnchorBank> {
    let features = extract_class_features(model, samples)?;
    build_bank(&features, model.arch.n_classes, per_class, membership_level, rng)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Moves every memory anchor toward its matched fresh centroid:
/// `ā ← ω·ā + (1−ω)·a`. Matching uses `membership_level` distances and the
/// match is applied at all levels. Stale fresh classes leave memory untouched.
pub fn ema_update(
    bank: &AnchorBank,
    fresh: &AnchorBank,
    omega: f64,
    membership_level: usize,
    matching: AnchorMatching,
) -> Result<AnchorBank> {
    if !bank.same_layout(fresh) {
        return contract_err("memory and fresh anchor banks differ in layout");
    }
    if !(omega > 0.0 && omega < 1.0) {
        return param_err(format!("omega must lie in (0, 1), got {omega}"));
    }
    if bank.is_empty() {
        return Ok(bank.clone());
    }
    let ml = membership_level - 1;
    let nk = bank.per_class;
    let mut out = bank.clone();
    for class in 0..bank.n_classes {
        if fresh.stale[class] {
            continue;
        }
        let base = class * nk;
        let cost = |i: usize, j: usize| {
            sq_dist(bank.levels[ml].row(base + i), fresh.levels[ml].row(base + j))
        };
        let assignment: Vec<usize> = match matching {
            AnchorMatching::Nearest => (0..nk)
                .map(|i| {
                    (0..nk)
                        .min_by(|&a, &b| cost(i, a).total_cmp(&cost(i, b)))
                        .expect("nk >= 1")
                })
                .collect(),
            AnchorMatching::OneToOne => best_permutation(nk, &cost),
        };
        for (li, level) in out.levels.iter_mut().enumerate() {
            for (i, &j) in assignment.iter().enumerate() {
                let target = fresh.levels[li].row(base + j);
                for (a, t) in level.row_mut(base + i).iter_mut().zip(target) {
                    *a = omega * *a + (1.0 - omega) * t;
                }
            }
        }
        out.stale[class] = false;
    }
    Ok(out)
}

fn best_permutation(n: usize, cost: &dyn Fn(usize, usize) -> f64) -> Vec<usize> {
    let mut best: Option<(f64, Vec<usize>)> = None;
    for perm in permutations(n) {
        let c: f64 = perm.iter().enumerate().map(|(i, &j)| cost(i, j)).sum();
        if best.as_ref().is_none_or(|b| c < b.0) {
            best = Some((c, perm));
        }
    }
    best.expect("at least one permutation").1
}

/// Largest anchors-per-class the one-to-one matcher accepts (it enumerates permutations).
pub const MAX_ONE_TO_ONE: usize = 8;

mod perm {
    /// All permutations of `0..n` in lexicographic order.
    pub fn permutations(n: usize) -> Vec<Vec<usize>> {
        let mut out = Vec::new();
        let mut cur: Vec<usize> = (0..n).collect();
        loop {
            out.push(cur.clone());
            // next lexicographic permutation
            let Some(i) = (1..n).rev().find(|&i| cur[i - 1] < cur[i]) else {
                break;
            };
            let j = (i..n).rev().find(|&j| cur[j] > cur[i - 1]).expect("pivot");
            cur.swap(i - 1, j);
            cur[i..].reverse();
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn feature_set(entries: &[(usize, usize, Vec<f64>, Vec<f64>)]) -> ClassFeatureSet {
        let mut set = ClassFeatureSet {
            levels: vec![Vec::new(), Vec::new()],
        };
        for (s, c, l1, l2) in entries {
            set.levels[0].push(ClassFeature { sample_id: *s, class: *c, vector: l1.clone() });
            set.levels[1].push(ClassFeature { sample_id: *s, class: *c, vector: l2.clone() });
        }
        set
    }

    #[test]
    fn pooling_examples() {
        let f = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(masked_average_pool(&f, &[1, 0], 1), Some(vec![1.0, 2.0]));
        assert_eq!(masked_average_pool(&f, &[1, 1], 1), Some(vec![2.0, 3.0]));
        assert_eq!(masked_average_pool(&f, &[0, 0], 1), None);
    }

    #[test]
    fn downsample_takes_top_left() {
        let labels = [1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15, 16];
        assert_eq!(downsample_labels(&labels, 4, 4, 2), vec![1, 3, 9, 11]);
    }

    #[test]
    fn single_anchor_is_class_mean_everywhere() {
        let set = feature_set(&[
            (0, 0, vec![1.0], vec![2.0, 0.0]),
            (1, 0, vec![3.0], vec![4.0, 2.0]),
            (0, 1, vec![5.0], vec![6.0, 6.0]),
        ]);
        let bank = build_bank(&set, 2, 1, 2, &mut Rng::seed_from(0)).unwrap();
        assert_eq!(bank.levels[0].values(), &[2.0, 5.0]);
        assert_eq!(bank.levels[1].values(), &[3.0, 1.0, 6.0, 6.0]);
        assert_eq!(bank.stale, vec![false, false]);
    }

    #[test]
    fn membership_at_deep_level_drives_all_levels() {
        // Level 2 separates {0,1} from {2,3}; level 1 values are arbitrary.
        let set = feature_set(&[
            (0, 0, vec![10.0], vec![0.0, 0.0]),
            (1, 0, vec![20.0], vec![0.1, 0.0]),
            (2, 0, vec![30.0], vec![9.0, 9.0]),
            (3, 0, vec![50.0], vec![9.1, 9.0]),
        ]);
        let bank = build_bank(&set, 1, 2, 2, &mut Rng::seed_from(4)).unwrap();
        let mut l1: Vec<f64> = bank.levels[0].values().to_vec();
        l1.sort_by(f64::total_cmp);
        assert_eq!(l1, vec![15.0, 40.0]);
        let mut l2: Vec<Vec<f64>> = (0..2).map(|r| bank.levels[1].row(r).to_vec()).collect();
        l2.sort_by(|a, b| a[0].total_cmp(&b[0]));
        assert!((l2[0][0] - 0.05).abs() < 1e-12 && (l2[1][0] - 9.05).abs() < 1e-12);
    }

    #[test]
    fn absent_class_is_stale_zeros() {
        let set = feature_set(&[(0, 0, vec![1.0], vec![1.0, 1.0])]);
        let bank = build_bank(&set, 3, 2, 2, &mut Rng::seed_from(0)).unwrap();
        assert_eq!(bank.stale, vec![false, true, true]);
        assert!(bank.levels[1].row(2).iter().all(|&v| v == 0.0));
        assert_eq!(bank.levels[1].rows(), 6);
    }

    #[test]
    fn too_few_samples_duplicate_anchors() {
        let set = feature_set(&[(0, 0, vec![1.0], vec![1.0, 0.0]), (1, 0, vec![2.0], vec![0.0, 1.0])]);
        let bank = build_bank(&set, 1, 4, 2, &mut Rng::seed_from(0)).unwrap();
        assert_eq!(bank.levels[0].values(), &[1.0, 2.0, 1.0, 2.0]);
    }

    #[test]
    fn build_is_order_invariant() {
        let entries = vec![
            (0, 0, vec![1.0], vec![0.0, 0.3]),
            (1, 0, vec![2.0], vec![5.0, 0.1]),
            (2, 0, vec![3.0], vec![0.2, 4.0]),
            (3, 0, vec![4.0], vec![5.5, 5.0]),
            (0, 1, vec![7.0], vec![1.0, 1.0]),
            (2, 1, vec![8.0], vec![2.0, 1.5]),
        ];
        let mut reversed = entries.clone();
        reversed.reverse();
        let a = build_bank(&feature_set(&entries), 2, 2, 2, &mut Rng::seed_from(9)).unwrap();
        let b = build_bank(&feature_set(&reversed), 2, 2, 2, &mut Rng::seed_from(9)).unwrap();
        assert_eq!(a, b);
    }

    fn bank(values_l1: Vec<f64>, values_l2: Vec<f64>, nk: usize) -> AnchorBank {
        let n = values_l1.len();
        AnchorBank {
            levels: vec![
                Tensor::new(vec![n, 1], values_l1).unwrap(),
                Tensor::new(vec![n, 1], values_l2).unwrap(),
            ],
            n_classes: n / nk,
            per_class: nk,
            stale: vec![false; n / nk],
        }
    }

    #[test]
    fn ema_fixed_point_and_step() {
        let b = bank(vec![1.0, 2.0], vec![3.0, 4.0], 2);
        assert_eq!(ema_update(&b, &b, 0.999, 2, AnchorMatching::Nearest).unwrap(), b);
        let zero = bank(vec![0.0, 0.0], vec![0.0, 0.0], 2);
        let one = bank(vec![1.0, 1.0], vec![1.0, 1.0], 2);
        let next = ema_update(&zero, &one, 0.999, 2, AnchorMatching::Nearest).unwrap();
        for v in next.levels.iter().flat_map(|l| l.values()) {
            assert!((v - 0.001).abs() < 1e-15);
        }
    }

    #[test]
    fn nearest_vs_one_to_one() {
        // Both memory anchors sit closest to fresh centroid 0.
        let mem = bank(vec![0.0, 0.0], vec![0.0, 0.2], 2);
        let fresh = bank(vec![1.0, 1.0], vec![0.1, 10.0], 2);
        let near = ema_update(&mem, &fresh, 0.5, 2, AnchorMatching::Nearest).unwrap();
        assert_eq!(near.levels[1].values(), &[0.05, 0.15000000000000002]);
        let one = ema_update(&mem, &fresh, 0.5, 2, AnchorMatching::OneToOne).unwrap();
        let v = one.levels[1].values();
        // Total cost is lower with memory 0 → fresh 0 and memory 1 → fresh 1.
        assert_eq!(v, &[0.05, 5.1]);
    }

    #[test]
    fn permutations_enumerated() {
        assert_eq!(perm::permutations(3).len(), 6);
        assert_eq!(perm::permutations(1), vec![vec![0]]);
    }

    #[test]
    fn bad_omega_rejected() {
        let b = bank(vec![1.0], vec![1.0], 1);
        assert!(ema_update(&b, &b, 1.0, 2, AnchorMatching::Nearest).is_err());
    }
}
