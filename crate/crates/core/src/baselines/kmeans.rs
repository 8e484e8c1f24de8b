//! Lloyd's k-means with k-means++ seeding and restarts.

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KMeansConfig {
    pub n_clusters: usize,
    pub n_init: usize,
    pub max_iter: usize,
    /// Relative tolerance on the squared center shift, scaled by the mean
    /// per-feature variance of the data.
    pub tol: f64,
    pub seed: u64,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            n_clusters: 5,
            n_init: 10,
            max_iter: 300,
            tol: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansResult {
    pub labels: Vec<usize>,
    pub centers: Tensor<f64>,
    pub inertia: f64,
    pub iterations: usize,
    /// Inertia after each assignment step of the returned run.
    pub inertia_history: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(x: &[f64], centers: &Tensor<f64>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for c in 0..centers.rows() {
        let d = sq_dist(x, centers.row(c));
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn plus_plus(data: &Tensor<f64>, k: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let (n, d) = (data.rows(), data.cols());
    let mut centers = Tensor::zeros(&[k, d]);
    let first = rng.gen_range(0..n);
    centers.row_mut(0).copy_from_slice(data.row(first));
    let mut closest: Vec<f64> = (0..n).map(|i| sq_dist(data.row(i), data.row(first))).collect();
    for c in 1..k {
        let pick = match WeightedIndex::new(&closest) {
            Ok(w) => w.sample(rng),
            // every point already coincides with a center
            Err(_) => rng.gen_range(0..n),
        };
        centers.row_mut(c).copy_from_slice(data.row(pick));
        for (i, best) in closest.iter_mut().enumerate() {
            *best = best.min(sq_dist(data.row(i), data.row(pick)));
        }
    }
    centers
}

fn lloyd(data: &Tensor<f64>, mut centers: Tensor<f64>, cfg: &KMeansConfig, tol: f64) -> KMeansResult {
    let (n, d, k) = (data.rows(), data.cols(), centers.rows());
    let mut labels = vec![0; n];
    let mut history = Vec::new();
    let mut iterations = 0;
    for _ in 0..cfg.max_iter {
        iterations += 1;
        let mut inertia = 0.0;
        let mut dists = vec![0.0; n];
        for i in 0..n {
            let (c, dist) = nearest(data.row(i), &centers);
            labels[i] = c;
            dists[i] = dist;
            inertia += dist;
        }
        history.push(inertia);

        let mut sums = Tensor::zeros(&[k, d]);
        let mut counts = vec![0usize; k];
        for i in 0..n {
            counts[labels[i]] += 1;
            for (s, &v) in sums.row_mut(labels[i]).iter_mut().zip(data.row(i)) {
                *s += v;
            }
        }
        // empty clusters take the points farthest from their centers
        let mut far: Vec<usize> = (0..n).collect();
        far.sort_by(|&a, &b| dists[b].total_cmp(&dists[a]).then(a.cmp(&b)));
        let mut far = far.into_iter();
        for c in 0..k {
            if counts[c] == 0 {
                if let Some(p) = far.next() {
                    sums.row_mut(c).copy_from_slice(data.row(p));
                    counts[c] = 1;
                }
            }
        }
        let mut shift = 0.0;
        for c in 0..k {
            let inv = 1.0 / counts[c].max(1) as f64;
            for j in 0..d {
                let v = sums.get(c, j) * inv;
                shift += (v - centers.get(c, j)).powi(2);
                centers.set(c, j, v);
            }
        }
        if shift <= tol {
            break;
        }
    }
    let mut inertia = 0.0;
    for i in 0..n {
        let (c, dist) = nearest(data.row(i), &centers);
        labels[i] = c;
        inertia += dist;
    }
    KMeansResult {
        labels,
        centers,
        inertia,
        iterations,
        inertia_history: history,
    }
}

/// Best of `n_init` seeded runs by final inertia (first run wins ties).
pub fn kmeans(data: &Tensor<f64>, cfg: &KMeansConfig) -> Result<KMeansResult> {
    let (n, d) = (data.rows(), data.cols());
    if cfg.n_clusters == 0 || cfg.n_init == 0 {
        return Err(Error::Config("k-means needs n_clusters and n_init >= 1".into()));
    }
    if n < cfg.n_clusters {
        return Err(Error::Empty(format!("{n} points cannot form {} clusters", cfg.n_clusters)));
    }
    if !data.is_finite() {
        return Err(Error::Config("k-means input contains non-finite values".into()));
    }
    let mut var_sum = 0.0;
    for j in 0..d {
        let mean = (0..n).map(|i| data.get(i, j)).sum::<f64>() / n as f64;
        var_sum += (0..n).map(|i| (data.get(i, j) - mean).powi(2)).sum::<f64>() / n as f64;
    }
    let tol = cfg.tol * if d > 0 { var_sum / d as f64 } else { 0.0 };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<KMeansResult> = None;
    for _ in 0..cfg.n_init {
        let init = plus_plus(data, cfg.n_clusters, &mut rng);
        let run = lloyd(data, init, cfg, tol);
        if best.as_ref().map_or(true, |b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    Ok(best.unwrap())
}
