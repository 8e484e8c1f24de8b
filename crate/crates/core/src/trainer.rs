//! Training loop and inference path.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::acg::{acg_forward, AcgConfig, AcgParams, ParamKind, PROTOTYPE_INIT_STD, RESIDUAL_INIT_SCALE};
use crate::assignment::{assign, soft_assign_on_tape, AssignmentMatrix, COSINE_EPS};
use crate::error::{Error, FormatError, Result};
use crate::io::{FeatureMap, FeatureSource};
use crate::modularity::{build_affinity, loss_weights, modularity_loss_on_tape, BatchReduction, LossOptions};
use crate::optim::{AdamW, AdamWConfig};
use crate::synth::permutation;
use crate::tensor::{kernels, Element, Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub iterations: usize,
    pub batch_size: usize,
    pub num_prototypes: usize,
    pub num_steps: usize,
    /// Side the images were resized to before feature extraction. Recorded
    /// for provenance; features arrive already extracted.
    pub image_side: usize,
    pub seed: u64,
    /// Attention heads; `None` picks the default for the feature width.
    pub num_heads: Option<usize>,
    pub prototype_init_std: f64,
    pub residual_init_scale: f64,
    pub loss: LossOptions,
    /// Decay every tensor, not just projection and feed-forward weights.
    pub decay_all: bool,
    /// Compute per-image gradients on the rayon pool. Reduction order is
    /// fixed either way.
    pub parallel: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            weight_decay: 0.01,
            iterations: 2500,
            batch_size: 32,
            num_prototypes: 5,
            num_steps: 6,
            image_side: 224,
            seed: 0,
            num_heads: None,
            prototype_init_std: PROTOTYPE_INIT_STD,
            residual_init_scale: RESIDUAL_INIT_SCALE,
            loss: LossOptions::default(),
            decay_all: false,
            parallel: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be finite and >= 0", self.learning_rate)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!("weight decay {} must be finite and >= 0", self.weight_decay)));
        }
        if self.batch_size == 0 || self.num_prototypes == 0 || self.num_steps == 0 || self.image_side == 0 {
            return Err(Error::Config(
                "batch size, prototypes, steps and image side must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn acg_config(&self, embed_dim: usize) -> AcgConfig {
        let mut c = AcgConfig::new(self.num_prototypes, embed_dim, self.num_steps).with_seed(self.seed);
        c.prototype_init_std = self.prototype_init_std;
        c.residual_init_scale = self.residual_init_scale;
        match self.num_heads {
            Some(h) => c.with_heads(h),
            None => c,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: usize,
    pub loss: f64,
    pub images: usize,
    pub skipped: usize,
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub params: AcgParams,
    pub optimizer: AdamW,
    pub history: Vec<LossRecord>,
    pub skipped_images: usize,
}

/// Loss of one image and the gradient for every parameter tensor, in
/// canonical order. `None` when the image's affinity graph has no weight.
pub fn image_loss_grad(
    params: &AcgParams,
    pixels: &Tensor<f64>,
    opts: &LossOptions,
) -> Result<Option<(f64, Vec<Tensor<f64>>)>> {
    let graph = build_affinity(pixels)?;
    if !(graph.two_m > 0.0) {
        return Ok(None);
    }
    let weights = loss_weights(&graph, opts)?;
    let (unit, _) = kernels::l2_normalize_rows(pixels, COSINE_EPS)?;
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, true);
    let x = tape.constant_ref(pixels);
    let xu = tape.constant(unit);
    let w = tape.constant(weights);
    let c = acg_forward(&mut tape, &params.config, &bound, x)?;
    let s = soft_assign_on_tape(&mut tape, xu, c)?;
    let l = modularity_loss_on_tape(&mut tape, w, graph.two_m, s)?;
    let loss = tape.value(l).item();
    let mut grads = tape.backward(l)?;
    Ok(Some((loss, bound.vars.iter().map(|&v| grads.take(v)).collect())))
}

/// Forward-only loss of one image.
pub fn image_loss(params: &AcgParams, pixels: &Tensor<f64>, opts: &LossOptions) -> Result<Option<f64>> {
    let graph = build_affinity(pixels)?;
    if !(graph.two_m > 0.0) {
        return Ok(None);
    }
    let weights = loss_weights(&graph, opts)?;
    let (unit, _) = kernels::l2_normalize_rows(pixels, COSINE_EPS)?;
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let x = tape.constant_ref(pixels);
    let xu = tape.constant(unit);
    let w = tape.constant(weights);
    let c = acg_forward(&mut tape, &params.config, &bound, x)?;
    let s = soft_assign_on_tape(&mut tape, xu, c)?;
    let l = modularity_loss_on_tape(&mut tape, w, graph.two_m, s)?;
    Ok(Some(tape.value(l).item()))
}

fn non_finite(iteration: usize, image: &str, e: Error) -> Error {
    match e {
        Error::Tensor(t) => Error::NonFiniteLoss {
            iteration,
            image: image.to_string(),
            detail: t.to_string(),
        },
        other => other,
    }
}

/// Batch order: the dataset is shuffled once per epoch and consumed in
/// order, wrapping into the next epoch mid-batch when needed.
struct Sampler {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    pos: usize,
    len: usize,
}

impl Sampler {
    fn new(len: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        Self {
            rng,
            order: Vec::new(),
            pos: 0,
            len,
        }
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        (0..size)
            .map(|_| {
                if self.pos == self.order.len() {
                    self.order = permutation(self.len, &mut self.rng);
                    self.pos = 0;
                }
                self.pos += 1;
                self.order[self.pos - 1]
            })
            .collect()
    }
}

pub fn decay_mask(params: &AcgParams, decay_all: bool) -> Vec<bool> {
    params
        .names()
        .into_iter()
        .map(|(_, kind)| decay_all || kind == ParamKind::Weight)
        .collect()
}

/// Trains a fresh generator on `data`.
pub fn train(data: &dyn FeatureSource, cfg: &TrainConfig) -> Result<TrainOutput> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("training set is empty".into()));
    }
    let dim = data.load(0)?.dim();
    let params = AcgParams::init(cfg.acg_config(dim))?;
    train_from(data, cfg, params)
}

/// Trains starting from `params`.
pub fn train_from(data: &dyn FeatureSource, cfg: &TrainConfig, mut params: AcgParams) -> Result<TrainOutput> {
    cfg.validate()?;
    params.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("training set is empty".into()));
    }
    let dim = params.config.embed_dim;
    let shapes: Vec<Vec<usize>> = params.tensors().iter().map(|t| t.shape().to_vec()).collect();
    let shape_refs: Vec<&[usize]> = shapes.iter().map(Vec::as_slice).collect();
    let mut optimizer = AdamW::new(
        AdamWConfig {
            learning_rate: cfg.learning_rate,
            weight_decay: cfg.weight_decay,
            ..AdamWConfig::default()
        },
        &shape_refs,
        decay_mask(&params, cfg.decay_all),
    )?;
    let mut sampler = Sampler::new(data.len(), cfg.seed);
    let mut history = Vec::with_capacity(cfg.iterations);
    let mut skipped_images = 0;

    for iteration in 0..cfg.iterations {
        let batch = sampler.next_batch(cfg.batch_size);
        let work = |&idx: &usize| -> Result<Option<(f64, Vec<Tensor<f64>>)>> {
            let map = data.load(idx)?;
            if map.dim() != dim {
                return Err(Error::Dimension(format!(
                    "image {} has feature width {}, model expects {dim}",
                    map.id,
                    map.dim()
                )));
            }
            image_loss_grad(&params, &map.features, &cfg.loss).map_err(|e| non_finite(iteration, &map.id, e))
        };
        let results: Vec<Result<Option<(f64, Vec<Tensor<f64>>)>>> = if cfg.parallel {
            batch.par_iter().map(work).collect()
        } else {
            batch.iter().map(work).collect()
        };

        let mut total = 0.0;
        let mut counted = 0;
        let mut skipped = 0;
        let mut grads: Vec<Tensor<f64>> = shapes.iter().map(|s| Tensor::zeros(s)).collect();
        for r in results {
            match r? {
                Some((loss, g)) => {
                    total += loss;
                    counted += 1;
                    for (acc, gi) in grads.iter_mut().zip(&g) {
                        acc.add_assign(gi);
                    }
                }
                None => skipped += 1,
            }
        }
        if skipped > 0 {
            log::warn!("iteration {iteration}: skipped {skipped} images with an empty affinity graph");
        }
        skipped_images += skipped;
        if counted == 0 {
            history.push(LossRecord {
                iteration,
                loss: 0.0,
                images: 0,
                skipped,
            });
            continue;
        }
        let scale = match cfg.loss.batch_reduction {
            BatchReduction::Mean => 1.0 / counted as f64,
            BatchReduction::Sum => 1.0,
        };
        let loss = total * scale;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                iteration,
                image: "batch".into(),
                detail: format!("batch loss {loss}"),
            });
        }
        for g in &mut grads {
            g.scale_in_place(scale);
        }
        optimizer.step(params.tensors_mut(), &grads)?;
        history.push(LossRecord {
            iteration,
            loss,
            images: counted,
            skipped,
        });
        if (iteration + 1) % 100 == 0 {
            log::info!("iteration {}: loss {loss:.6}", iteration + 1);
        }
    }
    Ok(TrainOutput {
        params,
        optimizer,
        history,
        skipped_images,
    })
}

pub fn write_loss_csv(path: impl AsRef<Path>, history: &[LossRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| FormatError::malformed("loss log", e.to_string()))?;
    for r in history {
        w.serialize(r).map_err(|e| FormatError::malformed("loss log", e.to_string()))?;
    }
    w.flush().map_err(|e| FormatError::io(path, e))?;
    Ok(())
}

/// Concepts and assignment for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct Segmentation<T: Element = f64> {
    pub id: String,
    pub concepts: Tensor<T>,
    pub assignment: AssignmentMatrix<T>,
}

impl<T: Element> Segmentation<T> {
    pub fn labels(&self) -> &[usize] {
        &self.assignment.hard.labels
    }

    pub fn active_count(&self) -> usize {
        self.assignment.hard.region_count()
    }
}

/// Inference-only copy of the parameters at precision `T`.
#[derive(Clone, Debug)]
pub struct Segmenter<T: Element = f64> {
    pub params: AcgParams<T>,
}

impl<T: Element> Segmenter<T> {
    pub fn new(params: &AcgParams<f64>) -> Self {
        Self { params: params.cast() }
    }

    /// Generator, cosine assignment, upsampling to the map's target size,
    /// then argmax.
    pub fn segment(&self, map: &FeatureMap) -> Result<Segmentation<T>> {
        if map.dim() != self.params.config.embed_dim {
            return Err(Error::Dimension(format!(
                "image {} has feature width {}, model expects {}",
                map.id,
                map.dim(),
                self.params.config.embed_dim
            )));
        }
        let x: Tensor<T> = map.features.cast();
        let concepts = self.params.forward(&x)?.concepts;
        let assignment = assign(&x, &concepts, map.grid, map.target_size())?;
        Ok(Segmentation {
            id: map.id.clone(),
            concepts,
            assignment,
        })
    }

    /// Segments every image of `data` in order.
    pub fn segment_all(&self, data: &dyn FeatureSource) -> Result<Vec<Segmentation<T>>> {
        (0..data.len()).map(|i| self.segment(&*data.load(i)?)).collect()
    }
}

/// Full-precision inference on one image.
pub fn infer(params: &AcgParams, map: &FeatureMap) -> Result<Segmentation> {
    Segmenter { params: params.clone() }.segment(map)
}
