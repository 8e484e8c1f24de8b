//! Average-linkage agglomerative clustering on cosine distance.

use serde::{Deserialize, Serialize};

use crate::assignment::COSINE_EPS;
use crate::error::{Error, Result};
use crate::tensor::{kernels, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgglomerativeConfig {
    /// Clusters closer than this are merged.
    pub distance_threshold: Option<f64>,
    /// Stop at this many clusters instead.
    pub n_clusters: Option<usize>,
}

impl Default for AgglomerativeConfig {
    fn default() -> Self {
        Self {
            distance_threshold: Some(0.65),
            n_clusters: None,
        }
    }
}

/// `1 − cos` between rows.
pub fn cosine_distances(x: &Tensor<f64>) -> Result<Tensor<f64>> {
    let (u, _) = kernels::l2_normalize_rows(x, COSINE_EPS)?;
    Ok(kernels::matmul_nt(&u, &u)?.map(|c| 1.0 - c))
}

/// Labels numbered by first appearance in row order.
pub fn agglomerative_distances(dist: &Tensor<f64>, cfg: &AgglomerativeConfig) -> Result<Vec<usize>> {
    let n = dist.rows();
    if dist.shape() != [n, n] || n == 0 {
        return Err(Error::Dimension(format!("distance matrix of shape {:?}", dist.shape())));
    }
    let target = match (cfg.distance_threshold, cfg.n_clusters) {
        (Some(_), None) => 1,
        (None, Some(k)) if k >= 1 && k <= n => k,
        (None, Some(k)) => return Err(Error::Config(format!("{k} clusters for {n} points"))),
        _ => return Err(Error::Config("set exactly one of distance threshold and cluster count".into())),
    };
    let threshold = cfg.distance_threshold.unwrap_or(f64::INFINITY);
    let mut d = dist.clone();
    let mut size = vec![1usize; n];
    let mut alive = vec![true; n];
    let mut owner: Vec<usize> = (0..n).collect();
    let mut count = n;
    while count > target {
        let mut best = (usize::MAX, usize::MAX, f64::INFINITY);
        for i in 0..n {
            if !alive[i] {
                continue;
            }
            for j in i + 1..n {
                if alive[j] && d.get(i, j) < best.2 {
                    best = (i, j, d.get(i, j));
                }
            }
        }
        let (i, j, dij) = best;
        if i == usize::MAX || dij >= threshold {
            break;
        }
        let (si, sj) = (size[i] as f64, size[j] as f64);
        for k in 0..n {
            if alive[k] && k != i && k != j {
                let v = (si * d.get(k, i) + sj * d.get(k, j)) / (si + sj);
                d.set(k, i, v);
                d.set(i, k, v);
            }
        }
        size[i] += size[j];
        alive[j] = false;
        for o in owner.iter_mut() {
            if *o == j {
                *o = i;
            }
        }
        count -= 1;
    }
    let mut seen: Vec<usize> = Vec::new();
    Ok(owner
        .iter()
        .map(|o| match seen.iter().position(|s| s == o) {
            Some(p) => p,
            None => {
                seen.push(*o);
                seen.len() - 1
            }
        })
        .collect())
}

pub fn agglomerative(x: &Tensor<f64>, cfg: &AgglomerativeConfig) -> Result<Vec<usize>> {
    agglomerative_distances(&cosine_distances(x)?, cfg)
}
