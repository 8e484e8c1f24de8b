//! Affinity propagation (message passing between exemplar candidates).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::assignment::COSINE_EPS;
use crate::error::{Error, Result};
use crate::tensor::{kernels, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffinityPropagationConfig {
    pub damping: f64,
    pub preference: f64,
    pub max_iter: usize,
    /// Iterations the exemplar set must stay fixed to count as converged.
    pub convergence_iter: usize,
    pub seed: u64,
}

impl Default for AffinityPropagationConfig {
    fn default() -> Self {
        Self {
            damping: 0.5,
            preference: -2.0,
            max_iter: 200,
            convergence_iter: 15,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AffinityPropagationResult {
    pub labels: Vec<usize>,
    pub exemplars: Vec<usize>,
    pub converged: bool,
    pub iterations: usize,
}

/// `−‖x̂_i − x̂_j‖²` on L2-normalized rows.
pub fn negative_sq_distances(x: &Tensor<f64>) -> Result<Tensor<f64>> {
    let (u, _) = kernels::l2_normalize_rows(x, COSINE_EPS)?;
    let n = u.rows();
    Ok(Tensor::from_fn(n, n, |i, j| {
        -u.row(i).iter().zip(u.row(j)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
    }))
}

fn argmax_col(s: &Tensor<f64>, row: usize, cols: &[usize]) -> usize {
    let mut best = 0;
    for (k, &c) in cols.iter().enumerate() {
        if s.get(row, c) > s.get(row, cols[best]) {
            best = k;
        }
    }
    best
}

/// Clusters with the given similarity matrix; the diagonal is replaced by
/// the preference. A tiny seeded perturbation breaks exact ties. When the
/// exemplar set never settles, or no exemplar emerges, every point lands
/// in one cluster and `converged` is false.
pub fn affinity_propagation_similarity(sim: &Tensor<f64>, cfg: &AffinityPropagationConfig) -> Result<AffinityPropagationResult> {
    let n = sim.rows();
    if sim.shape() != [n, n] || n == 0 {
        return Err(Error::Dimension(format!("similarity of shape {:?}", sim.shape())));
    }
    if !(0.5..1.0).contains(&cfg.damping) {
        return Err(Error::Config(format!("damping {} outside [0.5, 1)", cfg.damping)));
    }
    if n == 1 {
        return Ok(AffinityPropagationResult {
            labels: vec![0],
            exemplars: vec![0],
            converged: true,
            iterations: 0,
        });
    }
    let mut s = sim.clone();
    for i in 0..n {
        s.set(i, i, cfg.preference);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for v in s.data_mut() {
        let z: f64 = StandardNormal.sample(&mut rng);
        *v += (f64::EPSILON * *v + f64::MIN_POSITIVE * 100.0) * z;
    }
    let mut a: Tensor<f64> = Tensor::zeros(&[n, n]);
    let mut r: Tensor<f64> = Tensor::zeros(&[n, n]);
    let conv = cfg.convergence_iter.max(1);
    let mut history = vec![vec![false; n]; conv];
    let mut converged = false;
    let mut iterations = 0;
    let damp = cfg.damping;
    let mut exemplar = vec![false; n];
    for it in 0..cfg.max_iter {
        iterations = it + 1;
        for i in 0..n {
            let (mut first, mut second, mut arg) = (f64::NEG_INFINITY, f64::NEG_INFINITY, 0);
            for k in 0..n {
                let v = a.get(i, k) + s.get(i, k);
                if v > first {
                    second = first;
                    first = v;
                    arg = k;
                } else if v > second {
                    second = v;
                }
            }
            for k in 0..n {
                let best = if k == arg { second } else { first };
                let fresh = s.get(i, k) - best;
                r.set(i, k, damp * r.get(i, k) + (1.0 - damp) * fresh);
            }
        }
        for k in 0..n {
            let mut pos_sum = r.get(k, k);
            for i in 0..n {
                if i != k {
                    pos_sum += r.get(i, k).max(0.0);
                }
            }
            for i in 0..n {
                let fresh = if i == k {
                    pos_sum - r.get(k, k)
                } else {
                    (pos_sum - r.get(i, k).max(0.0)).min(0.0)
                };
                a.set(i, k, damp * a.get(i, k) + (1.0 - damp) * fresh);
            }
        }
        for k in 0..n {
            exemplar[k] = a.get(k, k) + r.get(k, k) > 0.0;
        }
        history[it % conv].clone_from(&exemplar);
        if it + 1 >= conv {
            let stable = (0..n).all(|k| {
                let hits = history.iter().filter(|h| h[k]).count();
                hits == 0 || hits == conv
            });
            if stable && exemplar.iter().any(|&e| e) {
                converged = true;
                break;
            }
        }
    }
    let mut centers: Vec<usize> = (0..n).filter(|&k| exemplar[k]).collect();
    if !converged || centers.is_empty() {
        log::warn!("affinity propagation did not converge after {iterations} iterations; one cluster");
        return Ok(AffinityPropagationResult {
            labels: vec![0; n],
            exemplars: vec![],
            converged: false,
            iterations,
        });
    }
    let assign = |centers: &[usize]| -> Vec<usize> {
        (0..n)
            .map(|i| match centers.iter().position(|&c| c == i) {
                Some(k) => k,
                None => argmax_col(&s, i, centers),
            })
            .collect()
    };
    // refine each exemplar to the member with the largest in-cluster similarity
    let c = assign(&centers);
    for (k, center) in centers.iter_mut().enumerate() {
        let members: Vec<usize> = (0..n).filter(|&i| c[i] == k).collect();
        let mut best = (members[0], f64::NEG_INFINITY);
        for &j in &members {
            let total: f64 = members.iter().map(|&i| s.get(i, j)).sum();
            if total > best.1 {
                best = (j, total);
            }
        }
        *center = best.0;
    }
    let c = assign(&centers);
    let mut chosen: Vec<usize> = c.iter().map(|&k| centers[k]).collect();
    let mut unique = chosen.clone();
    unique.sort_unstable();
    unique.dedup();
    for l in &mut chosen {
        *l = unique.binary_search(l).unwrap();
    }
    Ok(AffinityPropagationResult {
        labels: chosen,
        exemplars: unique,
        converged: true,
        iterations,
    })
}

pub fn affinity_propagation(x: &Tensor<f64>, cfg: &AffinityPropagationConfig) -> Result<AffinityPropagationResult> {
    affinity_propagation_similarity(&negative_sq_distances(x)?, cfg)
}
