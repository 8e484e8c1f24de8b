//! Synthetic feature maps with known clusters.
//!
//! Each image draws its own cluster count and its own unit-norm cluster
//! centers (pairwise cosine below a bound), splits the grid into contiguous
//! Voronoi blobs, and adds isotropic Gaussian noise to the center of each
//! pixel's blob. Image `i` is generated from its own random stream, so any
//! image can be regenerated without the ones before it. Values are rounded
//! to f32 so a feature file written from a synthetic map reads back equal.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{FeatureMap, LabelMap};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub images: usize,
    /// Inclusive range of clusters per image.
    pub clusters: (usize, usize),
    pub dim: usize,
    pub grid: (usize, usize),
    /// Upper bound on the cosine between two centers of one image.
    pub max_center_cosine: f64,
    /// Lower bound on the same cosine.
    pub min_center_cosine: f64,
    pub noise_std: f64,
    /// Smallest blob, as a fraction of `pixels / clusters`.
    pub min_blob_fraction: f64,
    /// Attach a one-head attention map that is low on cluster 0.
    pub attention: bool,
    pub max_retries: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            images: 64,
            clusters: (2, 4),
            dim: 32,
            grid: (14, 14),
            max_center_cosine: 0.3,
            min_center_cosine: -1.0,
            noise_std: 0.01,
            min_blob_fraction: 0.4,
            attention: false,
            max_retries: 1000,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.clusters;
        if lo == 0 || lo > hi {
            return Err(Error::Config(format!("cluster range {lo}..{hi} is empty")));
        }
        if self.dim == 0 || self.grid.0 == 0 || self.grid.1 == 0 {
            return Err(Error::Config("dim and grid must be positive".into()));
        }
        if hi > self.grid.0 * self.grid.1 {
            return Err(Error::Config(format!("{hi} clusters do not fit a {}x{} grid", self.grid.0, self.grid.1)));
        }
        if !(self.noise_std >= 0.0) || !self.noise_std.is_finite() {
            return Err(Error::Config("noise std must be finite and non-negative".into()));
        }
        if !(-1.0..=1.0).contains(&self.max_center_cosine) || !(-1.0..=1.0).contains(&self.min_center_cosine) {
            return Err(Error::Config("center cosine bounds must lie in [-1, 1]".into()));
        }
        if self.min_center_cosine >= self.max_center_cosine {
            return Err(Error::Config("min center cosine must be below the max".into()));
        }
        Ok(())
    }

    /// Distance between two unit centers at the cosine bound over the
    /// expected noise norm. Larger means easier.
    pub fn separation_ratio(&self) -> f64 {
        let sep = (2.0 * (1.0 - self.max_center_cosine)).sqrt();
        let noise = self.noise_std * (self.dim as f64).sqrt();
        if noise == 0.0 {
            f64::INFINITY
        } else {
            sep / noise
        }
    }
}

fn unit_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-8 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Unit centers with pairwise cosine in `[cos.0, cos.1)`.
pub fn sample_centers(rng: &mut ChaCha8Rng, count: usize, dim: usize, cos: (f64, f64), max_retries: usize) -> Result<Vec<Vec<f64>>> {
    for _ in 0..max_retries.max(1) {
        let mut centers: Vec<Vec<f64>> = Vec::with_capacity(count);
        let mut attempts = 0;
        while centers.len() < count && attempts < 100 * count {
            attempts += 1;
            let c = unit_vector(rng, dim);
            let ok = centers.iter().all(|o| {
                let v = o.iter().zip(&c).map(|(a, b)| a * b).sum::<f64>();
                v >= cos.0 && v < cos.1
            });
            if ok {
                centers.push(c);
            }
        }
        if centers.len() == count {
            return Ok(centers);
        }
    }
    Err(Error::Config(format!(
        "could not place {count} centers in {dim} dimensions with cosine in [{}, {})",
        cos.0, cos.1
    )))
}

/// Nearest-seed partition of the grid; ties go to the lower seed.
fn voronoi(grid: (usize, usize), seeds: &[(f64, f64)]) -> Vec<usize> {
    let mut labels = Vec::with_capacity(grid.0 * grid.1);
    for r in 0..grid.0 {
        for c in 0..grid.1 {
            let (y, x) = (r as f64 + 0.5, c as f64 + 0.5);
            let mut best = (0, f64::INFINITY);
            for (i, &(sy, sx)) in seeds.iter().enumerate() {
                let d = (y - sy).powi(2) + (x - sx).powi(2);
                if d < best.1 {
                    best = (i, d);
                }
            }
            labels.push(best.0);
        }
    }
    labels
}

fn blob_labels(rng: &mut ChaCha8Rng, spec: &SyntheticSpec, count: usize) -> Result<Vec<usize>> {
    let n = spec.grid.0 * spec.grid.1;
    let min_size = ((n as f64 / count as f64) * spec.min_blob_fraction).floor() as usize;
    for _ in 0..spec.max_retries.max(1) {
        let seeds: Vec<(f64, f64)> = (0..count)
            .map(|_| (rng.gen_range(0.0..spec.grid.0 as f64), rng.gen_range(0.0..spec.grid.1 as f64)))
            .collect();
        let labels = voronoi(spec.grid, &seeds);
        let mut sizes = vec![0; count];
        for &l in &labels {
            sizes[l] += 1;
        }
        if sizes.iter().all(|&s| s >= min_size.max(1)) {
            return Ok(labels);
        }
    }
    Err(Error::Config(format!(
        "could not split a {}x{} grid into {count} blobs of at least {min_size} pixels",
        spec.grid.0, spec.grid.1
    )))
}

/// Generates image `index` of the suite.
pub fn generate_image(spec: &SyntheticSpec, index: usize) -> Result<FeatureMap> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);
    let count = rng.gen_range(spec.clusters.0..=spec.clusters.1);
    let centers = sample_centers(
        &mut rng,
        count,
        spec.dim,
        (spec.min_center_cosine, spec.max_center_cosine),
        spec.max_retries,
    )?;
    let labels = blob_labels(&mut rng, spec, count)?;
    let noise = Normal::new(0.0, spec.noise_std).map_err(|e| Error::Config(e.to_string()))?;
    let n = labels.len();
    let mut data = Vec::with_capacity(n * spec.dim);
    for &l in &labels {
        for &c in &centers[l] {
            let v = if spec.noise_std > 0.0 { c + noise.sample(&mut rng) } else { c };
            data.push(v as f32 as f64);
        }
    }
    let features = Tensor::from_rows(n, spec.dim, data)?;
    let mut map = FeatureMap::new(format!("synth-{index:05}"), spec.grid, features);
    map.labels = Some(LabelMap::from_indices(spec.grid.0, spec.grid.1, &labels)?);
    if spec.attention {
        let raw: Vec<f64> = labels.iter().map(|&l| if l == 0 { 0.05 } else { 1.0 }).collect();
        let total: f64 = raw.iter().sum();
        let attn: Vec<f64> = raw.iter().map(|v| (0.9 * v / total) as f32 as f64).collect();
        map.attention = Some(Tensor::from_rows(1, n, attn)?);
    }
    Ok(map)
}

/// All images of the suite, in index order.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Vec<FeatureMap>> {
    (0..spec.images).map(|i| generate_image(spec, i)).collect()
}

/// Two antipodal clusters split left/right on the grid.
pub fn antipodal_pair(grid: (usize, usize), dim: usize, seed: u64) -> Result<FeatureMap> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = unit_vector(&mut rng, dim);
    let mut labels: Vec<usize> = Vec::with_capacity(grid.0 * grid.1);
    for _ in 0..grid.0 {
        for col in 0..grid.1 {
            labels.push(usize::from(col >= grid.1 / 2));
        }
    }
    let data: Vec<f64> = labels
        .iter()
        .flat_map(|&l| c.iter().map(move |&v| if l == 0 { v } else { -v }))
        .collect();
    let mut map = FeatureMap::new("antipodal", grid, Tensor::from_rows(labels.len(), dim, data)?);
    map.labels = Some(LabelMap::from_indices(grid.0, grid.1, &labels)?);
    Ok(map)
}

/// Shuffles `0..n` with `rng`.
pub(crate) fn permutation(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut v: Vec<usize> = (0..n).collect();
    v.shuffle(rng);
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn images_are_reproducible_and_independent() {
        let spec = SyntheticSpec {
            images: 3,
            ..Default::default()
        };
        let all = generate_synthetic(&spec).unwrap();
        assert_eq!(generate_image(&spec, 2).unwrap(), all[2]);
        assert_ne!(all[0].features, all[1].features);
    }

    #[test]
    fn cluster_counts_and_sizes_respect_spec() {
        let spec = SyntheticSpec {
            images: 20,
            ..Default::default()
        };
        for m in generate_synthetic(&spec).unwrap() {
            let labels = &m.labels.as_ref().unwrap().data;
            let c = *labels.iter().max().unwrap() as usize + 1;
            assert!((2..=4).contains(&c));
            for l in 0..c {
                assert!(labels.iter().filter(|&&x| x as usize == l).count() >= 19);
            }
        }
    }

    #[test]
    fn impossible_separation_is_an_error() {
        let spec = SyntheticSpec {
            clusters: (4, 4),
            dim: 2,
            max_center_cosine: -0.9,
            max_retries: 3,
            ..Default::default()
        };
        assert!(generate_image(&spec, 0).is_err());
    }

    #[test]
    fn ratio_grows_with_less_noise() {
        let a = SyntheticSpec::default();
        let b = SyntheticSpec {
            noise_std: 0.002,
            ..Default::default()
        };
        assert!(b.separation_ratio() > a.separation_ratio());
    }

    #[test]
    fn center_cosines_respect_both_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let c = sample_centers(&mut rng, 4, 32, (0.05, 0.3), 1000).unwrap();
        for i in 0..4 {
            for j in i + 1..4 {
                let v: f64 = c[i].iter().zip(&c[j]).map(|(a, b)| a * b).sum();
                assert!((0.05..0.3).contains(&v), "{v}");
            }
        }
    }
}
