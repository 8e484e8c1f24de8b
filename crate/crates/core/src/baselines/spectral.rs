//! Spectral clustering with the symmetric normalized Laplacian.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use super::kmeans::{kmeans, KMeansConfig};
use crate::assignment::COSINE_EPS;
use crate::error::{Error, Result};
use crate::tensor::{kernels, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SpectralAffinity {
    /// `max(0, cos)` between rows.
    Cosine,
    /// `exp(−γ‖x_i − x_j‖²)`.
    Rbf { gamma: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectralConfig {
    pub n_clusters: usize,
    pub n_components: usize,
    pub affinity: SpectralAffinity,
    pub n_init: usize,
    pub seed: u64,
}

impl Default for SpectralConfig {
    fn default() -> Self {
        Self {
            n_clusters: 5,
            n_components: 5,
            affinity: SpectralAffinity::Cosine,
            n_init: 10,
            seed: 0,
        }
    }
}

pub fn affinity_matrix(x: &Tensor<f64>, kind: SpectralAffinity) -> Result<Tensor<f64>> {
    let n = x.rows();
    Ok(match kind {
        SpectralAffinity::Cosine => {
            let (u, _) = kernels::l2_normalize_rows(x, COSINE_EPS)?;
            kernels::matmul_nt(&u, &u)?.map(|v| v.clamp(0.0, 1.0))
        }
        SpectralAffinity::Rbf { gamma } => Tensor::from_fn(n, n, |i, j| {
            let d: f64 = x.row(i).iter().zip(x.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
            (-gamma * d).exp()
        }),
    })
}

/// Eigenvectors of the `n_components` smallest eigenvalues of
/// `I − D^{-1/2} A D^{-1/2}`, each divided by `√deg` row-wise and
/// sign-fixed so its largest-magnitude entry is positive. Isolated
/// vertices get zero rows.
pub fn spectral_embedding(affinity: &Tensor<f64>, n_components: usize) -> Result<Tensor<f64>> {
    let n = affinity.rows();
    if affinity.shape() != [n, n] || n == 0 {
        return Err(Error::Dimension(format!("affinity of shape {:?}", affinity.shape())));
    }
    if n_components == 0 || n_components > n {
        return Err(Error::Config(format!("{n_components} components for {n} vertices")));
    }
    let inv_sqrt: Vec<f64> = (0..n)
        .map(|i| {
            let d: f64 = affinity.row(i).iter().sum();
            if d > 0.0 {
                1.0 / d.sqrt()
            } else {
                0.0
            }
        })
        .collect();
    let lap = DMatrix::from_fn(n, n, |i, j| {
        let eye = if i == j && inv_sqrt[i] > 0.0 { 1.0 } else { 0.0 };
        eye - inv_sqrt[i] * affinity.get(i, j) * inv_sqrt[j]
    });
    let eig = SymmetricEigen::new(lap);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]).then(a.cmp(&b)));
    let mut out = Tensor::zeros(&[n, n_components]);
    for (c, &e) in order.iter().take(n_components).enumerate() {
        let col = eig.eigenvectors.column(e);
        let mut peak = 0;
        for i in 1..n {
            if col[i].abs() > col[peak].abs() {
                peak = i;
            }
        }
        let sign = if col[peak] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..n {
            out.set(i, c, sign * col[i] * inv_sqrt[i]);
        }
    }
    Ok(out)
}

pub fn spectral_cluster_affinity(affinity: &Tensor<f64>, cfg: &SpectralConfig) -> Result<Vec<usize>> {
    let n = affinity.rows();
    if n < cfg.n_clusters {
        return Err(Error::Empty(format!("{n} points cannot form {} clusters", cfg.n_clusters)));
    }
    let emb = spectral_embedding(affinity, cfg.n_components.min(n))?;
    let km = KMeansConfig {
        n_clusters: cfg.n_clusters,
        n_init: cfg.n_init,
        seed: cfg.seed,
        ..KMeansConfig::default()
    };
    Ok(kmeans(&emb, &km)?.labels)
}

pub fn spectral_cluster(x: &Tensor<f64>, cfg: &SpectralConfig) -> Result<Vec<usize>> {
    spectral_cluster_affinity(&affinity_matrix(x, cfg.affinity)?, cfg)
}
