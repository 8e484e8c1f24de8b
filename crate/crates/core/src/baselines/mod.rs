//! Training-free clustering baselines over per-image pixel features.

pub mod affinity_propagation;
pub mod agglomerative;
pub mod kmeans;
pub mod spectral;

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::tensor::Tensor;
use affinity_propagation::{affinity_propagation, AffinityPropagationConfig};
use agglomerative::{agglomerative, AgglomerativeConfig};
use kmeans::{kmeans, KMeansConfig};
use spectral::{spectral_cluster, SpectralConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaselineMethod {
    Kmeans,
    Spectral,
    AffinityPropagation,
    Agglomerative,
}

impl BaselineMethod {
    pub const ALL: [Self; 4] = [Self::Kmeans, Self::Spectral, Self::AffinityPropagation, Self::Agglomerative];

    pub fn name(self) -> &'static str {
        match self {
            Self::Kmeans => "kmeans",
            Self::Spectral => "spectral",
            Self::AffinityPropagation => "affinity-propagation",
            Self::Agglomerative => "agglomerative",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineConfig {
    pub method: BaselineMethod,
    pub kmeans: KMeansConfig,
    pub spectral: SpectralConfig,
    pub affinity_propagation: AffinityPropagationConfig,
    pub agglomerative: AgglomerativeConfig,
}

impl BaselineConfig {
    pub fn new(method: BaselineMethod) -> Self {
        Self {
            method,
            kmeans: KMeansConfig::default(),
            spectral: SpectralConfig::default(),
            affinity_propagation: AffinityPropagationConfig::default(),
            agglomerative: AgglomerativeConfig::default(),
        }
    }

    /// Seeds every randomized method.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.kmeans.seed = seed;
        self.spectral.seed = seed;
        self.affinity_propagation.seed = seed;
        self
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BaselineOutcome {
    pub labels: Vec<usize>,
    /// False when affinity propagation fell back to a single cluster.
    pub converged: bool,
}

/// Per-pixel cluster labels for one image's `n×d` features.
pub fn cluster_image(x: &Tensor<f64>, cfg: &BaselineConfig) -> Result<BaselineOutcome> {
    let labels = match cfg.method {
        BaselineMethod::Kmeans => kmeans(x, &cfg.kmeans)?.labels,
        BaselineMethod::Spectral => spectral_cluster(x, &cfg.spectral)?,
        BaselineMethod::Agglomerative => agglomerative(x, &cfg.agglomerative)?,
        BaselineMethod::AffinityPropagation => {
            let r = affinity_propagation(x, &cfg.affinity_propagation)?;
            return Ok(BaselineOutcome {
                labels: r.labels,
                converged: r.converged,
            });
        }
    };
    Ok(BaselineOutcome { labels, converged: true })
}

/// Runs `work` once per image index and returns images per second.
pub fn images_per_second(images: usize, mut work: impl FnMut(usize) -> Result<()>) -> Result<f64> {
    let start = Instant::now();
    for i in 0..images {
        work(i)?;
    }
    let secs = start.elapsed().as_secs_f64();
    Ok(if secs > 0.0 { images as f64 / secs } else { f64::INFINITY })
}
