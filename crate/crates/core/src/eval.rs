//! Matching, mIoU and pixel accuracy.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::classifier::{knn_classify, ClassPrediction};
use crate::error::{Error, FormatError, Result};
use crate::tensor::Tensor;

/// Minimum-cost assignment on a rectangular cost matrix. Returns
/// `(row, col)` pairs, one per row when rows ≤ cols and one per column
/// otherwise, sorted by row.
pub fn linear_sum_assignment(cost: &Tensor<f64>) -> Result<Vec<(usize, usize)>> {
    if cost.shape().len() != 2 || cost.rows() == 0 || cost.cols() == 0 {
        return Err(Error::Empty(format!("cost matrix of shape {:?}", cost.shape())));
    }
    if !cost.is_finite() {
        return Err(Error::Config("cost matrix has non-finite entries".into()));
    }
    if cost.rows() > cost.cols() {
        let t = crate::tensor::kernels::transpose(cost)?;
        let mut pairs: Vec<(usize, usize)> = shortest_augmenting(&t).into_iter().map(|(c, r)| (r, c)).collect();
        pairs.sort_unstable();
        return Ok(pairs);
    }
    Ok(shortest_augmenting(cost))
}

/// Potentials-based Hungarian method for `n ≤ m`.
fn shortest_augmenting(a: &Tensor<f64>) -> Vec<(usize, usize)> {
    let (n, m) = (a.rows(), a.cols());
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    // p[j]: 1-based row matched to column j; column 0 is a sentinel
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = a.get(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut pairs: Vec<(usize, usize)> = (1..=m).filter(|&j| p[j] != 0).map(|j| (p[j] - 1, j - 1)).collect();
    pairs.sort_unstable();
    pairs
}

/// One-to-one matching maximizing total overlap; `overlap` is
/// predicted × ground truth.
pub fn hungarian_match(overlap: &Tensor<f64>) -> Result<Vec<(usize, usize)>> {
    linear_sum_assignment(&overlap.map(|v| -v))
}

/// Pixel counts, predicted cluster (rows) × ground-truth class (columns).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub predicted: usize,
    pub classes: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(predicted: usize, classes: usize) -> Self {
        Self {
            predicted,
            classes,
            counts: vec![0; predicted * classes],
        }
    }

    pub fn get(&self, p: usize, g: usize) -> u64 {
        self.counts[p * self.classes + g]
    }

    /// Adds one image; pixels whose ground truth equals `ignore` are
    /// skipped.
    pub fn add(&mut self, pred: &[usize], gt: &[usize], ignore: Option<usize>) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::Dimension(format!("{} predicted pixels, {} ground-truth pixels", pred.len(), gt.len())));
        }
        for (&p, &g) in pred.iter().zip(gt) {
            if Some(g) == ignore {
                continue;
            }
            if p >= self.predicted || g >= self.classes {
                return Err(Error::Config(format!(
                    "label pair ({p}, {g}) outside a {}x{} confusion matrix",
                    self.predicted, self.classes
                )));
            }
            self.counts[p * self.classes + g] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &Self) -> Result<()> {
        if (self.predicted, self.classes) != (other.predicted, other.classes) {
            return Err(Error::Dimension("confusion matrices of different sizes".into()));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn as_tensor(&self) -> Tensor<f64> {
        Tensor::from_fn(self.predicted, self.classes, |p, g| self.get(p, g) as f64)
    }

    /// Scores when row `p` predicts class `mapping[p]` (`None`: a class of
    /// its own that matches nothing).
    pub fn scores_with_mapping(&self, mapping: &[Option<usize>]) -> SegmentationScores {
        let mut tp = vec![0u64; self.classes];
        let mut fp = vec![0u64; self.classes];
        let mut gt_total = vec![0u64; self.classes];
        for p in 0..self.predicted {
            for g in 0..self.classes {
                let n = self.get(p, g);
                gt_total[g] += n;
                match mapping.get(p).copied().flatten() {
                    Some(c) if c == g => tp[c] += n,
                    Some(c) => fp[c] += n,
                    None => {}
                }
            }
        }
        let total = self.total();
        let mut per_class = BTreeMap::new();
        for c in 0..self.classes {
            let union = gt_total[c] + fp[c];
            if union > 0 {
                per_class.insert(c, tp[c] as f64 / union as f64);
            }
        }
        SegmentationScores::new(per_class, tp.iter().sum::<u64>(), total)
    }

    /// Scores when predicted and ground-truth labels share one space.
    pub fn scores(&self) -> SegmentationScores {
        let mapping: Vec<Option<usize>> = (0..self.predicted).map(|p| (p < self.classes).then_some(p)).collect();
        self.scores_with_mapping(&mapping)
    }

    /// Hungarian mapping from clusters to classes on this matrix. Pairs
    /// with zero overlap stay unmatched, so the result does not depend on
    /// how ties among them are broken.
    pub fn hungarian_mapping(&self) -> Result<Vec<Option<usize>>> {
        let mut mapping = vec![None; self.predicted];
        for (p, g) in hungarian_match(&self.as_tensor())? {
            if self.get(p, g) > 0 {
                mapping[p] = Some(g);
            }
        }
        Ok(mapping)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentationScores {
    /// IoU of every class present in the ground truth or the prediction.
    pub per_class_iou: BTreeMap<usize, f64>,
    pub miou: f64,
    pub pixel_accuracy: f64,
    pub pixels: u64,
}

impl SegmentationScores {
    fn new(per_class_iou: BTreeMap<usize, f64>, correct: u64, pixels: u64) -> Self {
        let miou = if per_class_iou.is_empty() {
            0.0
        } else {
            per_class_iou.values().sum::<f64>() / per_class_iou.len() as f64
        };
        let pixel_accuracy = if pixels == 0 { 0.0 } else { correct as f64 / pixels as f64 };
        Self {
            per_class_iou,
            miou,
            pixel_accuracy,
            pixels,
        }
    }
}

fn label_space(labels: &[usize]) -> usize {
    labels.iter().max().map_or(0, |&m| m + 1)
}

/// mIoU and accuracy of `pred` against `gt` in the same label space.
pub fn miou(pred: &[usize], gt: &[usize], ignore: Option<usize>) -> Result<SegmentationScores> {
    if pred.len() != gt.len() {
        return Err(Error::Dimension(format!("{} predicted pixels, {} ground-truth pixels", pred.len(), gt.len())));
    }
    let keep = |g: &usize| Some(*g) != ignore;
    let classes = label_space(&gt.iter().copied().filter(keep).collect::<Vec<_>>()).max(label_space(pred));
    let mut cm = ConfusionMatrix::new(classes, classes);
    cm.add(pred, gt, ignore)?;
    Ok(cm.scores())
}

/// Scores after matching predicted clusters to ground-truth labels one to
/// one within a single image.
pub fn matched_scores(pred: &[usize], gt: &[usize], ignore: Option<usize>) -> Result<SegmentationScores> {
    if pred.is_empty() {
        return Err(Error::Empty("no pixels".into()));
    }
    let kept: Vec<usize> = gt.iter().copied().filter(|&g| Some(g) != ignore).collect();
    let mut cm = ConfusionMatrix::new(label_space(pred), label_space(&kept).max(1));
    cm.add(pred, gt, ignore)?;
    Ok(cm.scores_with_mapping(&cm.hungarian_mapping()?))
}

pub fn matched_pixel_accuracy(pred: &[usize], gt: &[usize]) -> Result<f64> {
    Ok(matched_scores(pred, gt, None)?.pixel_accuracy)
}

/// Dataset-level clustering evaluation: confusion is accumulated over all
/// images in order, clusters are matched to classes once, then scored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterEvaluation {
    pub mapping: Vec<Option<usize>>,
    pub scores: SegmentationScores,
}

pub fn evaluate_clusters(
    images: &[(Vec<usize>, Vec<usize>)],
    clusters: usize,
    classes: usize,
    ignore: Option<usize>,
) -> Result<ClusterEvaluation> {
    let mut cm = ConfusionMatrix::new(clusters, classes);
    for (pred, gt) in images {
        cm.add(pred, gt, ignore)?;
    }
    let mapping = cm.hungarian_mapping()?;
    let scores = cm.scores_with_mapping(&mapping);
    Ok(ClusterEvaluation { mapping, scores })
}

/// One validation image for the retrieval protocol.
#[derive(Clone, Debug)]
pub struct RetrievalImage {
    /// Concept id per pixel.
    pub concepts: Vec<usize>,
    pub gt: Vec<usize>,
    /// `(concept, embedding)` for every active concept.
    pub regions: Vec<(usize, Vec<f64>)>,
}

/// Labels every region by weighted k-NN against the bank, paints the
/// labels onto pixels and scores against the ground truth.
pub fn retrieval_protocol(
    bank: &Tensor<f64>,
    bank_labels: &[usize],
    images: &[RetrievalImage],
    num_classes: usize,
    k: usize,
    ignore: Option<usize>,
) -> Result<SegmentationScores> {
    let mut cm = ConfusionMatrix::new(num_classes, num_classes);
    for img in images {
        if img.regions.is_empty() {
            return Err(Error::Empty("validation image without regions".into()));
        }
        let width = img.regions[0].1.len();
        let flat: Vec<f64> = img.regions.iter().flat_map(|(_, e)| e.iter().copied()).collect();
        let queries = Tensor::from_rows(img.regions.len(), width, flat)?;
        let pred = knn_classify(&queries, bank, bank_labels, num_classes, k)?;
        let prediction = ClassPrediction {
            concept_classes: img.regions.iter().map(|(c, _)| *c).zip(pred.classes).collect(),
        };
        // concepts without a region embedding cannot be labelled
        let painted = prediction.broadcast(&img.concepts, usize::MAX);
        let (p, g): (Vec<usize>, Vec<usize>) = painted
            .into_iter()
            .zip(&img.gt)
            .filter(|(p, g)| *p != usize::MAX && Some(**g) != ignore)
            .map(|(p, &g)| (p, g))
            .unzip();
        cm.add(&p, &g, None)?;
    }
    Ok(cm.scores())
}

/// Mean and population standard deviation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub runs: usize,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len().max(1) as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self {
            mean,
            std: var.sqrt(),
            runs: values.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassRow {
    pub class: usize,
    pub name: String,
    pub iou: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub miou: f64,
    pub pixel_accuracy: f64,
    pub pixels: u64,
    pub images: usize,
    pub per_class: Vec<ClassRow>,
    /// Spread over repeated runs, when the protocol repeats.
    pub miou_runs: Option<MeanStd>,
    pub accuracy_runs: Option<MeanStd>,
}

impl EvalReport {
    pub fn new(scores: &SegmentationScores, images: usize, names: &BTreeMap<u32, String>) -> Self {
        let per_class = scores
            .per_class_iou
            .iter()
            .map(|(&class, &iou)| ClassRow {
                class,
                name: names.get(&(class as u32)).cloned().unwrap_or_else(|| format!("class{class}")),
                iou,
            })
            .collect();
        Self {
            miou: scores.miou,
            pixel_accuracy: scores.pixel_accuracy,
            pixels: scores.pixels,
            images,
            per_class,
            miou_runs: None,
            accuracy_runs: None,
        }
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).map_err(|e| FormatError::malformed("report", e.to_string()))?;
        std::fs::write(path, text + "\n").map_err(|e| FormatError::io(path, e))?;
        Ok(())
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path).map_err(|e| FormatError::malformed("report", e.to_string()))?;
        for row in &self.per_class {
            w.serialize(row).map_err(|e| FormatError::malformed("report", e.to_string()))?;
        }
        w.flush().map_err(|e| FormatError::io(path, e))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonal_dominant_is_identity() {
        let m = Tensor::from_nested(&[&[9.0, 1.0, 0.0], &[2.0, 8.0, 1.0], &[0.0, 3.0, 7.0]]);
        assert_eq!(hungarian_match(&m).unwrap(), vec![(0, 0), (1, 1), (2, 2)]);
    }

    #[test]
    fn rectangular_both_ways() {
        let wide = Tensor::from_nested(&[&[4.0, 1.0, 3.0], &[2.0, 0.0, 5.0]]);
        assert_eq!(linear_sum_assignment(&wide).unwrap(), vec![(0, 1), (1, 0)]);
        let tall = crate::tensor::kernels::transpose(&wide).unwrap();
        assert_eq!(linear_sum_assignment(&tall).unwrap(), vec![(0, 1), (1, 0)]);
        assert!(linear_sum_assignment(&Tensor::zeros(&[0, 3])).is_err());
    }

    #[test]
    fn toy_iou_is_three_sevenths() {
        // prediction paints class 1 on six pixels, ground truth has four with three shared
        let pred = [1, 1, 1, 1, 1, 1, 0, 0, 0];
        let gt = [1, 1, 1, 0, 0, 0, 1, 0, 0];
        let s = miou(&pred, &gt, None).unwrap();
        assert!((s.per_class_iou[&1] - 3.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn identical_and_disjoint_masks() {
        let s = miou(&[0, 1, 2], &[0, 1, 2], None).unwrap();
        assert_eq!((s.miou, s.pixel_accuracy), (1.0, 1.0));
        let s = miou(&[1, 1], &[0, 0], None).unwrap();
        assert_eq!(s.per_class_iou[&0], 0.0);
        assert_eq!(s.per_class_iou[&1], 0.0);
    }

    #[test]
    fn ignore_pixels_are_dropped() {
        let s = miou(&[0, 1, 1], &[0, 1, 255], Some(255)).unwrap();
        assert_eq!(s.pixels, 2);
        assert_eq!(s.miou, 1.0);
    }

    #[test]
    fn matched_accuracy_permutes_labels() {
        assert_eq!(matched_pixel_accuracy(&[2, 2, 0, 0], &[0, 0, 1, 1]).unwrap(), 1.0);
        assert_eq!(matched_pixel_accuracy(&[0, 0, 0, 0], &[0, 0, 1, 1]).unwrap(), 0.5);
    }

    #[test]
    fn mean_std() {
        let m = MeanStd::of(&[1.0, 3.0]);
        assert_eq!((m.mean, m.std, m.runs), (2.0, 1.0, 2));
    }
}
