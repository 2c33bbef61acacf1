//! Lloyd's k-means with greedy k-means++ seeding.

use super::{Rng, Tensor};
use crate::error::{dim_err, param_err, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct KMeans {
    /// `k × C` centroids.
    pub centroids: Tensor,
    /// Cluster index of each input point.
    pub membership: Vec<usize>,
    /// Within-cluster SSE after every centroid update.
    pub sse_history: Vec<f64>,
}

impl KMeans {
    pub fn sse(&self, points: &Tensor) -> f64 {
        sse(points, &self.centroids, &self.membership)
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn sse(points: &Tensor, centroids: &Tensor, membership: &[usize]) -> f64 {
    membership
        .iter()
        .enumerate()
        .map(|(i, &c)| sq_dist(points.row(i), centroids.row(c)))
        .sum()
}

/// Clusters the rows of `points` into `k` groups.
///
/// With fewer points than clusters every point becomes its own centroid and
/// the surplus centroids repeat points cyclically. Empty clusters are
/// re-seeded to the point farthest from its current centroid. The best of
/// [`RESTARTS`] seeded runs is returned.
pub fn kmeans(points: &Tensor, k: usize, rng: &mut Rng, max_iters: usize) -> Result<KMeans> {
    if k == 0 {
        return param_err("kmeans needs k >= 1");
    }
    if points.rank() != 2 || points.rows() == 0 {
        return dim_err(format!(
            "kmeans needs a non-empty P×C matrix, got {:?}",
            points.shape()
        ));
    }
    let (p, c) = (points.rows(), points.cols());

    if p <= k {
        let mut centroids = Tensor::zeros(vec![k, c]);
        for j in 0..k {
            centroids.row_mut(j).copy_from_slice(points.row(j % p));
        }
        let membership: Vec<usize> = (0..p).collect();
        return Ok(KMeans {
            centroids,
            membership,
            sse_history: vec![0.0],
        });
    }

    let mut best: Option<(f64, KMeans)> = None;
    for _ in 0..RESTARTS {
        let run = lloyd(points, k, rng, max_iters);
        let cost = run.sse(points);
        if best.as_ref().is_none_or(|(b, _)| cost < *b) {
            best = Some((cost, run));
        }
    }
    Ok(best.expect("at least one restart").1)
}

/// Independent k-means++ starts per call; the lowest-SSE run wins.
pub const RESTARTS: usize = 10;

fn lloyd(points: &Tensor, k: usize, rng: &mut Rng, max_iters: usize) -> KMeans {
    let mut centroids = seed_plus_plus(points, k, rng);
    let mut membership = assign(points, &centroids);
    let mut sse_history = Vec::new();

    for _ in 0..max_iters.max(1) {
        update(points, &mut centroids, &mut membership);
        sse_history.push(sse(points, &centroids, &membership));
        let next = assign(points, &centroids);
        if next == membership {
            break;
        }
        membership = next;
    }
    // Ensure membership is the nearest-centroid assignment for the returned centroids.
    membership = assign(points, &centroids);

    KMeans {
        centroids,
        membership,
        sse_history,
    }
}

fn assign(points: &Tensor, centroids: &Tensor) -> Vec<usize> {
    (0..points.rows())
        .map(|i| {
            let x = points.row(i);
            let mut best = (f64::INFINITY, 0);
            for j in 0..centroids.rows() {
                let d = sq_dist(x, centroids.row(j));
                if d < best.0 {
                    best = (d, j);
                }
            }
            best.1
        })
        .collect()
}

/// Recomputes centroids as member means; empty clusters take the worst-fit points.
fn update(points: &Tensor, centroids: &mut Tensor, membership: &mut [usize]) {
    let (k, c) = (centroids.rows(), centroids.cols());
    let mut sums = vec![0.0; k * c];
    let mut counts = vec![0usize; k];
    for (i, &m) in membership.iter().enumerate() {
        counts[m] += 1;
        for (s, v) in sums[m * c..(m + 1) * c].iter_mut().zip(points.row(i)) {
            *s += v;
        }
    }
    for j in 0..k {
        if counts[j] > 0 {
            let n = counts[j] as f64;
            for (dst, s) in centroids.row_mut(j).iter_mut().zip(&sums[j * c..(j + 1) * c]) {
                *dst = s / n;
            }
        }
    }
    for j in 0..k {
        if counts[j] > 0 {
            continue;
        }
        // Farthest point from its own centroid, never stealing a cluster's last member.
        let far = (0..points.rows())
            .filter(|&i| counts[membership[i]] > 1)
            .map(|i| (sq_dist(points.row(i), centroids.row(membership[i])), i))
            .fold(None, |best: Option<(f64, usize)>, cand| match best {
                Some(b) if b.0 >= cand.0 => Some(b),
                _ => Some(cand),
            });
        if let Some((_, i)) = far {
            counts[membership[i]] -= 1;
            membership[i] = j;
            counts[j] = 1;
            let row = points.row(i).to_vec();
            centroids.row_mut(j).copy_from_slice(&row);
        }
    }
}

/// Greedy k-means++: each new centre is the best of a few D²-weighted candidates.
fn seed_plus_plus(points: &Tensor, k: usize, rng: &mut Rng) -> Tensor {
    let (p, c) = (points.rows(), points.cols());
    let trials = 2 + (k as f64).ln().floor() as usize;
    let mut centroids = Tensor::zeros(vec![k, c]);
    let first = rng.below(p);
    centroids.row_mut(0).copy_from_slice(points.row(first));
    let mut closest: Vec<f64> = (0..p)
        .map(|i| sq_dist(points.row(i), points.row(first)))
        .collect();

    for j in 1..k {
        let total: f64 = closest.iter().sum();
        let mut best: Option<(f64, usize, Vec<f64>)> = None;
        for _ in 0..trials {
            let cand = if total <= 0.0 {
                rng.below(p)
            } else {
                let mut target = rng.next_f64() * total;
                let mut pick = p - 1;
                for (i, d) in closest.iter().enumerate() {
                    if target < *d {
                        pick = i;
                        break;
                    }
                    target -= d;
                }
                pick
            };
            let updated: Vec<f64> = (0..p)
                .map(|i| closest[i].min(sq_dist(points.row(i), points.row(cand))))
                .collect();
            let potential: f64 = updated.iter().sum();
            if best.as_ref().is_none_or(|b| potential < b.0) {
                best = Some((potential, cand, updated));
            }
        }
        let (_, cand, updated) = best.expect("at least one trial");
        centroids.row_mut(j).copy_from_slice(points.row(cand));
        closest = updated;
    }
    centroids
}

#[cfg(test)]
mod tests {
    use super::*;

    fn column(values: &[f64]) -> Tensor {
        Tensor::new(vec![values.len(), 1], values.to_vec()).unwrap()
    }

    #[test]
    fn two_obvious_groups() {
        let pts = column(&[0.0, 0.1, 10.0, 10.1]);
        let mut rng = Rng::seed_from(1);
        let km = kmeans(&pts, 2, &mut rng, 100).unwrap();
        let m = &km.membership;
        assert_eq!(m[0], m[1]);
        assert_eq!(m[2], m[3]);
        assert_ne!(m[0], m[2]);
        assert!((km.centroids.row(m[0])[0] - 0.05).abs() < 1e-12);
        assert!((km.centroids.row(m[2])[0] - 10.05).abs() < 1e-12);
    }

    #[test]
    fn single_point_single_cluster() {
        let pts = Tensor::from_rows(&[&[3.0, -1.0]]);
        let km = kmeans(&pts, 1, &mut Rng::seed_from(0), 10).unwrap();
        assert_eq!(km.centroids.row(0), &[3.0, -1.0]);
        assert_eq!(km.membership, vec![0]);
    }

    #[test]
    fn fewer_points_than_clusters() {
        let pts = column(&[1.0, 2.0, 3.0]);
        let km = kmeans(&pts, 4, &mut Rng::seed_from(0), 10).unwrap();
        assert_eq!(km.membership, vec![0, 1, 2]);
        assert_eq!(km.centroids.values(), &[1.0, 2.0, 3.0, 1.0]);
    }

    #[test]
    fn zero_k_is_rejected() {
        let pts = column(&[1.0]);
        assert!(matches!(
            kmeans(&pts, 0, &mut Rng::seed_from(0), 10),
            Err(crate::Error::Parameter(_))
        ));
    }

    #[test]
    fn identical_points_do_not_panic() {
        let pts = column(&[2.0; 6]);
        let km = kmeans(&pts, 3, &mut Rng::seed_from(4), 10).unwrap();
        assert_eq!(km.membership.len(), 6);
        assert_eq!(km.sse(&pts), 0.0);
    }

    #[test]
    fn sse_never_increases() {
        let mut rng = Rng::seed_from(77);
        for trial in 0..50 {
            let p = 20 + trial % 7;
            let vals: Vec<f64> = (0..p * 3).map(|_| rng.uniform(-5.0, 5.0)).collect();
            let pts = Tensor::new(vec![p, 3], vals).unwrap();
            let km = kmeans(&pts, 4, &mut rng, 50).unwrap();
            for w in km.sse_history.windows(2) {
                assert!(w[1] <= w[0] + 1e-12, "{:?}", km.sse_history);
            }
        }
    }
}
