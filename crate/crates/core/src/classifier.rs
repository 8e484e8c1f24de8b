//! Concept classification.
//!
//! Regions (active concepts) are first split into background and
//! foreground using the backbone's class-token attention: each pixel
//! contributes the minimum of its attention over heads, a region's score
//! is the sum over its pixels, and a two-cluster 1-D k-means over region
//! scores sends the low cluster to background. Foreground regions are then
//! labelled by k-means over region embeddings, by a similarity-weighted
//! k-NN vote against a labelled bank, or by nearest class-text embedding.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::assignment::COSINE_EPS;
use crate::baselines::kmeans::{kmeans, KMeansConfig};
use crate::error::{Error, Result};
use crate::io::LabelMap;
use crate::tensor::{kernels, Tensor};

/// How a region embedding was produced by the extractor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RegionSource {
    /// Masked crop re-encoded by the self-supervised backbone.
    VitMatting,
    /// Mean of the region's pixel features.
    PixelAverage,
}

impl RegionSource {
    pub fn code(self) -> u32 {
        match self {
            Self::VitMatting => 1,
            Self::PixelAverage => 2,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        match code {
            1 => Some(Self::VitMatting),
            2 => Some(Self::PixelAverage),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionEmbedding {
    pub concept: usize,
    pub embedding: Vec<f64>,
    pub source: RegionSource,
    pub pixel_count: usize,
    pub foreground_score: Option<f64>,
}

/// Region score aggregation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreMode {
    /// Sum over the region's pixels; larger regions score higher.
    #[default]
    Sum,
    /// Sum divided by pixel count.
    Mean,
}

/// Validates a `heads×n` attention map: non-negative, each head summing to
/// at most one (plus rounding).
pub fn check_attention(attn: &Tensor<f64>) -> Result<()> {
    if attn.data().iter().any(|&v| v < 0.0 || !v.is_finite()) {
        return Err(Error::Config("attention values must be finite and non-negative".into()));
    }
    for h in 0..attn.rows() {
        let s: f64 = attn.row(h).iter().sum();
        if s > 1.0 + 1e-4 {
            return Err(Error::Config(format!("attention head {h} sums to {s} > 1")));
        }
    }
    Ok(())
}

/// Per-pixel foreground evidence: minimum over heads.
pub fn pixel_attention(attn: &Tensor<f64>) -> Vec<f64> {
    (0..attn.cols())
        .map(|i| (0..attn.rows()).map(|h| attn.get(h, i)).fold(f64::INFINITY, f64::min))
        .collect()
}

/// Score of each region in `regions` given per-pixel concept labels on the
/// attention grid.
pub fn foreground_scores(labels: &[usize], regions: &[usize], attn: &Tensor<f64>, mode: ScoreMode) -> Result<Vec<f64>> {
    if attn.cols() != labels.len() {
        return Err(Error::Dimension(format!(
            "attention covers {} pixels, assignment has {}",
            attn.cols(),
            labels.len()
        )));
    }
    let per_pixel = pixel_attention(attn);
    let mut sums: BTreeMap<usize, (f64, usize)> = regions.iter().map(|&r| (r, (0.0, 0))).collect();
    for (&l, &v) in labels.iter().zip(&per_pixel) {
        if let Some(e) = sums.get_mut(&l) {
            e.0 += v;
            e.1 += 1;
        }
    }
    Ok(regions
        .iter()
        .map(|r| {
            let (s, c) = sums[r];
            match mode {
                ScoreMode::Sum => s,
                ScoreMode::Mean if c > 0 => s / c as f64,
                ScoreMode::Mean => 0.0,
            }
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BackgroundSplit {
    /// Indices into the score list.
    pub background: Vec<usize>,
    pub foreground: Vec<usize>,
    /// True when no split was possible (fewer than two regions or all
    /// scores equal).
    pub degenerate: bool,
}

/// Two-means on scalar scores, centers seeded at the min and max score.
/// A score equidistant from both centers stays foreground.
pub fn split_background(scores: &[f64]) -> BackgroundSplit {
    let all_fg = |degenerate| BackgroundSplit {
        background: vec![],
        foreground: (0..scores.len()).collect(),
        degenerate,
    };
    if scores.len() < 2 {
        return all_fg(true);
    }
    let lo0 = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let hi0 = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if lo0 == hi0 {
        log::warn!("all {} region scores are equal; no background split", scores.len());
        return all_fg(true);
    }
    let (mut lo, mut hi) = (lo0, hi0);
    let mut low: Vec<bool> = vec![false; scores.len()];
    for _ in 0..100 {
        let next: Vec<bool> = scores.iter().map(|&s| (s - lo).abs() < (s - hi).abs()).collect();
        let changed = next != low;
        low = next;
        let mean = |want: bool| {
            let sel: Vec<f64> = scores.iter().zip(&low).filter(|(_, &l)| l == want).map(|(&s, _)| s).collect();
            (!sel.is_empty()).then(|| sel.iter().sum::<f64>() / sel.len() as f64)
        };
        if let Some(m) = mean(true) {
            lo = m;
        }
        if let Some(m) = mean(false) {
            hi = m;
        }
        if !changed {
            break;
        }
    }
    BackgroundSplit {
        background: (0..scores.len()).filter(|&i| low[i]).collect(),
        foreground: (0..scores.len()).filter(|&i| !low[i]).collect(),
        degenerate: false,
    }
}

/// Concept → class mapping for one image.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassPrediction {
    pub concept_classes: BTreeMap<usize, usize>,
}

impl ClassPrediction {
    /// Per-pixel classes from per-pixel concepts. Pixels whose concept has
    /// no class get `fallback`.
    pub fn broadcast(&self, labels: &[usize], fallback: usize) -> Vec<usize> {
        labels
            .iter()
            .map(|l| self.concept_classes.get(l).copied().unwrap_or(fallback))
            .collect()
    }
}

fn stack(rows: &[&[f64]]) -> Result<Tensor<f64>> {
    let Some(first) = rows.first() else {
        return Err(Error::Empty("no region embeddings".into()));
    };
    let d = first.len();
    if rows.iter().any(|r| r.len() != d) {
        return Err(Error::Dimension("region embeddings of different widths".into()));
    }
    Ok(Tensor::from_rows(rows.len(), d, rows.iter().flat_map(|r| r.iter().copied()).collect())?)
}

/// Stacks region embeddings into an `r×e` matrix.
pub fn embedding_matrix(regions: &[RegionEmbedding]) -> Result<Tensor<f64>> {
    let rows: Vec<&[f64]> = regions.iter().map(|r| r.embedding.as_slice()).collect();
    stack(&rows)
}

/// Mean pixel feature of every active concept.
pub fn average_region_embeddings(features: &Tensor<f64>, labels: &[usize]) -> Result<Vec<RegionEmbedding>> {
    if features.rows() != labels.len() {
        return Err(Error::Dimension(format!(
            "{} feature rows for {} labels",
            features.rows(),
            labels.len()
        )));
    }
    let mut acc: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        let e = acc.entry(l).or_insert_with(|| (vec![0.0; features.cols()], 0));
        for (a, &v) in e.0.iter_mut().zip(features.row(i)) {
            *a += v;
        }
        e.1 += 1;
    }
    Ok(acc
        .into_iter()
        .map(|(concept, (sum, count))| RegionEmbedding {
            concept,
            embedding: sum.into_iter().map(|v| v / count as f64).collect(),
            source: RegionSource::PixelAverage,
            pixel_count: count,
            foreground_score: None,
        })
        .collect())
}

/// Cluster ids for region embeddings (`r×e`), one k-means run.
pub fn kmeans_classify(embeddings: &Tensor<f64>, num_classes: usize, seed: u64) -> Result<Vec<usize>> {
    if num_classes == 0 {
        return Err(Error::Config("need at least one class".into()));
    }
    if embeddings.rows() < num_classes {
        return Err(Error::Empty(format!(
            "{} regions cannot form {num_classes} clusters",
            embeddings.rows()
        )));
    }
    let cfg = KMeansConfig {
        n_clusters: num_classes,
        seed,
        ..KMeansConfig::default()
    };
    Ok(kmeans(embeddings, &cfg)?.labels)
}

/// Independent k-means runs with seeds `seed, seed + 1, …`.
pub fn kmeans_classify_runs(embeddings: &Tensor<f64>, num_classes: usize, runs: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    (0..runs as u64).map(|r| kmeans_classify(embeddings, num_classes, seed + r)).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct KnnPrediction {
    pub classes: Vec<usize>,
    /// `q×C` similarity-weighted label averages.
    pub soft_labels: Tensor<f64>,
    /// Neighbour count actually used.
    pub k: usize,
}

fn cosine_matrix(a: &Tensor<f64>, b: &Tensor<f64>) -> Result<Tensor<f64>> {
    if a.cols() != b.cols() {
        return Err(Error::Dimension(format!("embedding widths {} and {}", a.cols(), b.cols())));
    }
    let (an, _) = kernels::l2_normalize_rows(a, COSINE_EPS)?;
    let (bn, _) = kernels::l2_normalize_rows(b, COSINE_EPS)?;
    Ok(kernels::matmul_nt(&an, &bn)?)
}

/// Weighted k-NN vote: the soft label of a query is the mean of the one-hot
/// labels of its `k` most cosine-similar bank entries, weighted by
/// similarity. Similarity ties prefer the lower bank index; class ties
/// prefer the lower class index.
pub fn knn_classify(
    queries: &Tensor<f64>,
    bank: &Tensor<f64>,
    bank_labels: &[usize],
    num_classes: usize,
    k: usize,
) -> Result<KnnPrediction> {
    if bank.rows() == 0 {
        return Err(Error::Empty("k-NN bank is empty".into()));
    }
    if bank.rows() != bank_labels.len() {
        return Err(Error::Dimension(format!(
            "{} bank rows, {} labels",
            bank.rows(),
            bank_labels.len()
        )));
    }
    if let Some(&bad) = bank_labels.iter().find(|&&l| l >= num_classes) {
        return Err(Error::Config(format!("bank label {bad} outside {num_classes} classes")));
    }
    let k_used = if k > bank.rows() {
        log::warn!("k = {k} exceeds bank size {}; clamped", bank.rows());
        bank.rows()
    } else {
        k.max(1)
    };
    let sims = cosine_matrix(queries, bank)?;
    let mut soft = Tensor::zeros(&[queries.rows(), num_classes]);
    let mut classes = Vec::with_capacity(queries.rows());
    for q in 0..queries.rows() {
        let row = sims.row(q);
        let mut order: Vec<usize> = (0..row.len()).collect();
        order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
        let top = &order[..k_used];
        let total: f64 = top.iter().map(|&j| row[j]).sum();
        let out = soft.row_mut(q);
        for &j in top {
            out[bank_labels[j]] += row[j];
        }
        if total > 0.0 {
            for v in out.iter_mut() {
                *v /= total;
            }
        }
        classes.push(kernels::argmax(out));
    }
    Ok(KnnPrediction {
        classes,
        soft_labels: soft,
        k: k_used,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TextPrediction {
    pub classes: Vec<usize>,
    /// True where the best and runner-up class had equal cosine.
    pub ties: Vec<bool>,
    pub similarities: Tensor<f64>,
}

/// Nearest class-text embedding by cosine.
pub fn text_classify(regions: &Tensor<f64>, class_embeddings: &Tensor<f64>) -> Result<TextPrediction> {
    if class_embeddings.rows() == 0 {
        return Err(Error::Empty("no class embeddings".into()));
    }
    let sims = cosine_matrix(regions, class_embeddings)?;
    let mut classes = Vec::with_capacity(regions.rows());
    let mut ties = Vec::with_capacity(regions.rows());
    for r in 0..sims.rows() {
        let row = sims.row(r);
        let best = kernels::argmax(row);
        let tied = row.iter().enumerate().any(|(j, &v)| j != best && (v - row[best]).abs() <= 1e-12);
        if tied {
            log::warn!("region {r} is equidistant from several classes; picked {best}");
        }
        classes.push(best);
        ties.push(tied);
    }
    Ok(TextPrediction {
        classes,
        ties,
        similarities: sims,
    })
}

/// Label of the ground-truth class covering most of each concept's pixels
/// (ignored pixels excluded). Concepts covering only ignored pixels get no
/// label.
pub fn majority_labels(concepts: &[usize], gt: &LabelMap, ignore: Option<u8>) -> Result<BTreeMap<usize, u8>> {
    if concepts.len() != gt.data.len() {
        return Err(Error::Dimension(format!(
            "{} assigned pixels, {} ground-truth pixels",
            concepts.len(),
            gt.data.len()
        )));
    }
    let mut counts: BTreeMap<usize, BTreeMap<u8, usize>> = BTreeMap::new();
    for (&c, &g) in concepts.iter().zip(&gt.data) {
        if Some(g) == ignore {
            continue;
        }
        *counts.entry(c).or_default().entry(g).or_default() += 1;
    }
    Ok(counts
        .into_iter()
        .filter_map(|(c, hist)| {
            // largest count, lowest label on ties
            let best = hist.iter().fold(None, |best: Option<(u8, usize)>, (&l, &n)| match best {
                Some((_, bn)) if bn >= n => best,
                _ => Some((l, n)),
            });
            best.map(|(l, _)| (c, l))
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn min_over_heads() {
        let attn = Tensor::from_nested(&[&[0.9, 0.05], &[0.1, 0.05]]);
        let s = foreground_scores(&[0, 1], &[0, 1], &attn, ScoreMode::Sum).unwrap();
        assert_eq!(s, vec![0.1, 0.05]);
    }

    #[test]
    fn single_region_single_head_sums_everything() {
        let attn = Tensor::from_nested(&[&[0.1, 0.2, 0.3]]);
        let s = foreground_scores(&[4, 4, 4], &[4], &attn, ScoreMode::Sum).unwrap();
        assert!((s[0] - 0.6).abs() < 1e-15);
        let m = foreground_scores(&[4, 4, 4], &[4], &attn, ScoreMode::Mean).unwrap();
        assert!((m[0] - 0.2).abs() < 1e-15);
    }

    #[test]
    fn misaligned_attention_is_an_error() {
        let attn = Tensor::from_nested(&[&[0.1, 0.2]]);
        assert!(foreground_scores(&[0, 0, 0], &[0], &attn, ScoreMode::Sum).is_err());
    }

    #[test]
    fn attention_checks() {
        assert!(check_attention(&Tensor::from_nested(&[&[0.5, 0.4]])).is_ok());
        assert!(check_attention(&Tensor::from_nested(&[&[0.7, 0.4]])).is_err());
        assert!(check_attention(&Tensor::from_nested(&[&[-0.1, 0.4]])).is_err());
    }

    #[test]
    fn background_split_examples() {
        let s = split_background(&[10.0, 0.1]);
        assert_eq!(s.background, vec![1]);
        assert_eq!(s.foreground, vec![0]);
        let s = split_background(&[5.0, 5.0, 5.0]);
        assert!(s.degenerate && s.background.is_empty());
        let s = split_background(&[3.0]);
        assert_eq!(s.foreground, vec![0]);
    }

    #[test]
    fn knn_weighted_vote() {
        let bank = Tensor::from_nested(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let q = Tensor::from_nested(&[&[0.9, 0.1]]);
        let p = knn_classify(&q, &bank, &[1, 0], 2, 1).unwrap();
        assert_eq!(p.classes, vec![1]);
        let p = knn_classify(&q, &bank, &[1, 0], 2, 5).unwrap();
        assert_eq!(p.k, 2);
        assert!(knn_classify(&q, &Tensor::zeros(&[0, 2]), &[], 2, 1).is_err());
    }

    #[test]
    fn text_classifier_exact_and_tie() {
        let classes = Tensor::from_nested(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let regions = Tensor::from_nested(&[&[0.0, 3.0], &[1.0, 1.0]]);
        let p = text_classify(&regions, &classes).unwrap();
        assert_eq!(p.classes, vec![1, 0]);
        assert_eq!(p.ties, vec![false, true]);
        assert!(text_classify(&Tensor::zeros(&[1, 3]), &classes).is_err());
    }

    #[test]
    fn averages_and_majorities() {
        let f = Tensor::from_nested(&[&[1.0, 0.0], &[3.0, 2.0], &[5.0, 5.0]]);
        let regs = average_region_embeddings(&f, &[2, 2, 0]).unwrap();
        assert_eq!(regs.len(), 2);
        assert_eq!(regs[0].concept, 0);
        assert_eq!(regs[1].embedding, vec![2.0, 1.0]);
        assert_eq!(regs[1].pixel_count, 2);
        let gt = LabelMap::new(1, 3, vec![4, 255, 7]).unwrap();
        let m = majority_labels(&[2, 2, 0], &gt, Some(255)).unwrap();
        assert_eq!(m[&2], 4);
        assert_eq!(m[&0], 7);
    }

    #[test]
    fn kmeans_classify_needs_enough_regions() {
        let e = Tensor::from_nested(&[&[1.0, 0.0]]);
        assert!(kmeans_classify(&e, 2, 0).is_err());
        assert_eq!(kmeans_classify(&e, 1, 0).unwrap(), vec![0]);
    }
}
