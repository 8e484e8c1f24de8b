//! Adaptive Concept Generator.
//!
//! A stack of update steps maps `k` learnable prototypes to `k` concepts
//! for one image. Each step runs, in order,
//!
//! 1. cross-attention with the prototypes as queries and the image's pixel
//!    embeddings as keys and values,
//! 2. self-attention among the prototypes,
//! 3. a two-layer rectifier feed-forward block,
//!
//! and each of the three is wrapped as `LayerNorm(C + f(C)) · γ + β`
//! (post-norm residual). Attention is multi-head: queries, keys and values
//! are split column-wise into `heads` blocks of width `d / heads`, each
//! block uses `softmax(Q Kᵀ / √(d / heads)) V`, and the blocks are
//! concatenated before the output projection.
//!
//! Parameters are not shared between steps.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tape, Tensor, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const PROTOTYPE_INIT_STD: f64 = 0.02;
/// Multiplier on the Xavier init of attention output projections and the
/// second feed-forward layer. At 1.0 the shared attention update swamps
/// the prototypes and six steps leave every concept nearly parallel.
pub const RESIDUAL_INIT_SCALE: f64 = 0.1;

/// Head count used when none is configured: one head per 64 channels,
/// and a single head for widths that are not a multiple of 64.
pub fn default_head_count(embed_dim: usize) -> usize {
    if embed_dim >= 64 && embed_dim % 64 == 0 {
        embed_dim / 64
    } else {
        1
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AcgConfig {
    pub num_prototypes: usize,
    pub embed_dim: usize,
    pub num_steps: usize,
    pub num_heads: usize,
    pub ffn_expansion: usize,
    pub layer_norm_eps: f64,
    pub prototype_init_std: f64,
    pub residual_init_scale: f64,
    pub init_seed: u64,
}

impl AcgConfig {
    pub fn new(num_prototypes: usize, embed_dim: usize, num_steps: usize) -> Self {
        Self {
            num_prototypes,
            embed_dim,
            num_steps,
            num_heads: default_head_count(embed_dim),
            ffn_expansion: 4,
            layer_norm_eps: LAYER_NORM_EPS,
            prototype_init_std: PROTOTYPE_INIT_STD,
            residual_init_scale: RESIDUAL_INIT_SCALE,
            init_seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.init_seed = seed;
        self
    }

    pub fn with_heads(mut self, heads: usize) -> Self {
        self.num_heads = heads;
        self
    }

    /// Structural checks. Degenerate sizes (`k = 1`, zero steps) are
    /// allowed here; training applies the stricter `k ≥ 2, N ≥ 1`.
    pub fn validate(&self) -> Result<()> {
        if self.num_prototypes == 0 || self.embed_dim == 0 {
            return Err(Error::Config("prototype count and embedding width must be positive".into()));
        }
        if self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "embedding width {} is not divisible by {} heads",
                self.embed_dim, self.num_heads
            )));
        }
        if self.ffn_expansion == 0 {
            return Err(Error::Config("ffn expansion must be positive".into()));
        }
        if !(self.layer_norm_eps > 0.0) {
            return Err(Error::Config("layer norm epsilon must be positive".into()));
        }
        for (name, v) in [("prototype init std", self.prototype_init_std), ("residual init scale", self.residual_init_scale)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be finite and non-negative")));
            }
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }
}

/// What a parameter tensor is, for optimizer policy.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Prototypes,
    /// Attention projections and feed-forward weights.
    Weight,
    /// Layer-norm scale and shift.
    Norm,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams<T: Element = f64> {
    pub w_q: Tensor<T>,
    pub w_k: Tensor<T>,
    pub w_v: Tensor<T>,
    pub w_o: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormParams<T: Element = f64> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeedForwardParams<T: Element = f64> {
    pub w_in: Tensor<T>,
    pub w_out: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UpdateStepParams<T: Element = f64> {
    pub cross_attn: AttentionParams<T>,
    pub cross_norm: LayerNormParams<T>,
    pub self_attn: AttentionParams<T>,
    pub self_norm: LayerNormParams<T>,
    pub ffn: FeedForwardParams<T>,
    pub ffn_norm: LayerNormParams<T>,
}

const TENSORS_PER_STEP: usize = 16;

/// Learnable state of the generator: the initial prototypes and one
/// parameter block per update step.
#[derive(Clone, Debug, PartialEq)]
pub struct AcgParams<T: Element = f64> {
    pub config: AcgConfig,
    pub prototypes: Tensor<T>,
    pub steps: Vec<UpdateStepParams<T>>,
}

/// Concepts generated for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct ConceptSet<T: Element = f64> {
    pub concepts: Tensor<T>,
    pub source_id: Option<String>,
}

fn normal_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Tensor<f64> {
    let dist = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(rows, cols, |_, _| dist.sample(rng))
}

fn xavier(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor<f64> {
    normal_tensor(rng, fan_in, fan_out, (2.0 / (fan_in + fan_out) as f64).sqrt())
}

impl AttentionParams<f64> {
    fn init(rng: &mut ChaCha8Rng, d: usize, out_scale: f64) -> Self {
        Self {
            w_q: xavier(rng, d, d),
            w_k: xavier(rng, d, d),
            w_v: xavier(rng, d, d),
            w_o: xavier(rng, d, d).map(|v| v * out_scale),
        }
    }
}

impl<T: Element> LayerNormParams<T> {
    pub fn identity(d: usize) -> Self {
        Self {
            gamma: Tensor::filled(&[1, d], T::one()),
            beta: Tensor::zeros(&[1, d]),
        }
    }
}

impl AcgParams<f64> {
    /// Gaussian prototypes (`prototype_init_std`), Xavier-normal
    /// projections with the residual outputs scaled by
    /// `residual_init_scale`, identity layer norms; seeded by
    /// `config.init_seed`.
    pub fn init(config: AcgConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let (k, d) = (config.num_prototypes, config.embed_dim);
        let hidden = d * config.ffn_expansion;
        let rs = config.residual_init_scale;
        let prototypes = normal_tensor(&mut rng, k, d, config.prototype_init_std);
        let steps = (0..config.num_steps)
            .map(|_| UpdateStepParams {
                cross_attn: AttentionParams::init(&mut rng, d, rs),
                cross_norm: LayerNormParams::identity(d),
                self_attn: AttentionParams::init(&mut rng, d, rs),
                self_norm: LayerNormParams::identity(d),
                ffn: FeedForwardParams {
                    w_in: xavier(&mut rng, d, hidden),
                    w_out: xavier(&mut rng, hidden, d).map(|v| v * rs),
                },
                ffn_norm: LayerNormParams::identity(d),
            })
            .collect();
        Ok(Self {
            config,
            prototypes,
            steps,
        })
    }
}

fn step_names(i: usize) -> [(String, ParamKind); TENSORS_PER_STEP] {
    let n = |s: &str| format!("step{i}.{s}");
    use ParamKind::*;
    [
        (n("cross_attn.w_q"), Weight),
        (n("cross_attn.w_k"), Weight),
        (n("cross_attn.w_v"), Weight),
        (n("cross_attn.w_o"), Weight),
        (n("cross_norm.gamma"), Norm),
        (n("cross_norm.beta"), Norm),
        (n("self_attn.w_q"), Weight),
        (n("self_attn.w_k"), Weight),
        (n("self_attn.w_v"), Weight),
        (n("self_attn.w_o"), Weight),
        (n("self_norm.gamma"), Norm),
        (n("self_norm.beta"), Norm),
        (n("ffn.w_in"), Weight),
        (n("ffn.w_out"), Weight),
        (n("ffn_norm.gamma"), Norm),
        (n("ffn_norm.beta"), Norm),
    ]
}

impl<T: Element> UpdateStepParams<T> {
    fn tensors(&self) -> [&Tensor<T>; TENSORS_PER_STEP] {
        [
            &self.cross_attn.w_q,
            &self.cross_attn.w_k,
            &self.cross_attn.w_v,
            &self.cross_attn.w_o,
            &self.cross_norm.gamma,
            &self.cross_norm.beta,
            &self.self_attn.w_q,
            &self.self_attn.w_k,
            &self.self_attn.w_v,
            &self.self_attn.w_o,
            &self.self_norm.gamma,
            &self.self_norm.beta,
            &self.ffn.w_in,
            &self.ffn.w_out,
            &self.ffn_norm.gamma,
            &self.ffn_norm.beta,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor<T>; TENSORS_PER_STEP] {
        [
            &mut self.cross_attn.w_q,
            &mut self.cross_attn.w_k,
            &mut self.cross_attn.w_v,
            &mut self.cross_attn.w_o,
            &mut self.cross_norm.gamma,
            &mut self.cross_norm.beta,
            &mut self.self_attn.w_q,
            &mut self.self_attn.w_k,
            &mut self.self_attn.w_v,
            &mut self.self_attn.w_o,
            &mut self.self_norm.gamma,
            &mut self.self_norm.beta,
            &mut self.ffn.w_in,
            &mut self.ffn.w_out,
            &mut self.ffn_norm.gamma,
            &mut self.ffn_norm.beta,
        ]
    }
}

impl<T: Element> AcgParams<T> {
    /// Parameter names and kinds in canonical order (the order used by
    /// [`Self::tensors`], the optimizer and the checkpoint format).
    pub fn names(&self) -> Vec<(String, ParamKind)> {
        let mut out = vec![("prototypes".to_string(), ParamKind::Prototypes)];
        for i in 0..self.steps.len() {
            out.extend(step_names(i));
        }
        out
    }

    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        let mut out = vec![&self.prototypes];
        for s in &self.steps {
            out.extend(s.tensors());
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = vec![&mut self.prototypes];
        for s in &mut self.steps {
            out.extend(s.tensors_mut());
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn cast<U: Element>(&self) -> AcgParams<U> {
        let mut it = self.tensors().into_iter().map(|t| t.cast::<U>());
        let prototypes = it.next().expect("prototypes");
        let steps = self
            .steps
            .iter()
            .map(|_| {
                let mut next = || it.next().expect("step tensor");
                UpdateStepParams {
                    cross_attn: AttentionParams {
                        w_q: next(),
                        w_k: next(),
                        w_v: next(),
                        w_o: next(),
                    },
                    cross_norm: LayerNormParams {
                        gamma: next(),
                        beta: next(),
                    },
                    self_attn: AttentionParams {
                        w_q: next(),
                        w_k: next(),
                        w_v: next(),
                        w_o: next(),
                    },
                    self_norm: LayerNormParams {
                        gamma: next(),
                        beta: next(),
                    },
                    ffn: FeedForwardParams {
                        w_in: next(),
                        w_out: next(),
                    },
                    ffn_norm: LayerNormParams {
                        gamma: next(),
                        beta: next(),
                    },
                }
            })
            .collect();
        AcgParams {
            config: self.config.clone(),
            prototypes,
            steps,
        }
    }

    /// Records every parameter on `tape`, tracked or as constants.
    pub fn bind<'a>(&'a self, tape: &mut Tape<'a, T>, tracked: bool) -> BoundParams {
        let vars: Vec<Var> = self
            .tensors()
            .into_iter()
            .map(|t| if tracked { tape.leaf_ref(t) } else { tape.constant_ref(t) })
            .collect();
        BoundParams::from_vars(vars)
    }

    /// Shape checks against the config.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let (k, d) = (self.config.num_prototypes, self.config.embed_dim);
        let h = d * self.config.ffn_expansion;
        if self.steps.len() != self.config.num_steps {
            return Err(Error::Config(format!(
                "{} step blocks for {} configured steps",
                self.steps.len(),
                self.config.num_steps
            )));
        }
        let expect = |t: &Tensor<T>, shape: [usize; 2], name: &str| -> Result<()> {
            if t.shape() != shape {
                return Err(Error::Dimension(format!("{name}: shape {:?}, expected {shape:?}", t.shape())));
            }
            Ok(())
        };
        expect(&self.prototypes, [k, d], "prototypes")?;
        for (i, s) in self.steps.iter().enumerate() {
            let shapes = [
                [d, d], [d, d], [d, d], [d, d], [1, d], [1, d],
                [d, d], [d, d], [d, d], [d, d], [1, d], [1, d],
                [d, h], [h, d], [1, d], [1, d],
            ];
            for ((t, shape), (name, _)) in s.tensors().into_iter().zip(shapes).zip(step_names(i)) {
                expect(t, shape, &name)?;
            }
        }
        Ok(())
    }

    /// Runs all update steps on one image's pixel embeddings (`n×d`).
    pub fn forward(&self, pixels: &Tensor<T>) -> Result<ConceptSet<T>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let x = tape.constant_ref(pixels);
        let out = acg_forward(&mut tape, &self.config, &bound, x)?;
        Ok(ConceptSet {
            concepts: tape.value(out).clone(),
            source_id: None,
        })
    }
}

/// Tape handles for one [`AttentionParams`].
#[derive(Clone, Copy, Debug)]
pub struct BoundAttention {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_o: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct BoundNorm {
    pub gamma: Var,
    pub beta: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct BoundStep {
    pub cross_attn: BoundAttention,
    pub cross_norm: BoundNorm,
    pub self_attn: BoundAttention,
    pub self_norm: BoundNorm,
    pub ffn_in: Var,
    pub ffn_out: Var,
    pub ffn_norm: BoundNorm,
}

/// [`AcgParams`] recorded on a tape. `vars` keeps canonical order so
/// gradients can be read back in the order of [`AcgParams::tensors`].
#[derive(Clone, Debug)]
pub struct BoundParams {
    pub prototypes: Var,
    pub steps: Vec<BoundStep>,
    pub vars: Vec<Var>,
}

impl BoundParams {
    fn from_vars(vars: Vec<Var>) -> Self {
        let prototypes = vars[0];
        let steps = vars[1..]
            .chunks_exact(TENSORS_PER_STEP)
            .map(|c| BoundStep {
                cross_attn: BoundAttention {
                    w_q: c[0],
                    w_k: c[1],
                    w_v: c[2],
                    w_o: c[3],
                },
                cross_norm: BoundNorm {
                    gamma: c[4],
                    beta: c[5],
                },
                self_attn: BoundAttention {
                    w_q: c[6],
                    w_k: c[7],
                    w_v: c[8],
                    w_o: c[9],
                },
                self_norm: BoundNorm {
                    gamma: c[10],
                    beta: c[11],
                },
                ffn_in: c[12],
                ffn_out: c[13],
                ffn_norm: BoundNorm {
                    gamma: c[14],
                    beta: c[15],
                },
            })
            .collect();
        Self {
            prototypes,
            steps,
            vars,
        }
    }
}

fn dim_check<T: Element>(tape: &Tape<'_, T>, q: Var, kv: Var) -> Result<()> {
    let (qd, kd) = (tape.value(q).cols(), tape.value(kv).cols());
    if qd != kd {
        return Err(Error::Dimension(format!("query width {qd} vs key/value width {kd}")));
    }
    if tape.value(kv).rows() == 0 {
        return Err(Error::Empty("attention over zero keys".into()));
    }
    Ok(())
}

/// `query + MultiHead(query, key_value) · W_o`, before normalization.
pub fn attention_residual<T: Element>(
    tape: &mut Tape<'_, T>,
    query: Var,
    key_value: Var,
    p: &BoundAttention,
    heads: usize,
) -> Result<Var> {
    dim_check(tape, query, key_value)?;
    let d = tape.value(query).cols();
    let dh = d / heads;
    let inv_sqrt = T::from_f64(1.0 / (dh as f64).sqrt());
    // Long key sets are never projected: Q·(X·W_k)ᵀ = (Q·W_kᵀ)·Xᵀ and
    // A·(X·W_v) = (A·X)·W_v.
    let reassociate = tape.value(key_value).rows() > d;
    let q = tape.matmul(query, p.w_q)?;
    let (k, v) = if reassociate {
        (p.w_k, p.w_v)
    } else {
        (tape.matmul(key_value, p.w_k)?, tape.matmul(key_value, p.w_v)?)
    };
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            let (a, b) = (h * dh, (h + 1) * dh);
            (tape.select_cols(q, a, b)?, tape.select_cols(k, a, b)?, tape.select_cols(v, a, b)?)
        };
        let logits = if reassociate {
            let qk = tape.matmul_nt(qh, kh)?;
            tape.matmul_nt(qk, key_value)?
        } else {
            tape.matmul_nt(qh, kh)?
        };
        let logits = tape.scale(logits, inv_sqrt)?;
        let weights = tape.softmax_rows(logits)?;
        outs.push(if reassociate {
            let pooled = tape.matmul(weights, key_value)?;
            tape.matmul(pooled, vh)?
        } else {
            tape.matmul(weights, vh)?
        });
    }
    let merged = if heads == 1 { outs[0] } else { tape.concat_cols(&outs)? };
    let update = tape.matmul(merged, p.w_o)?;
    Ok(tape.add(query, update)?)
}

pub fn norm_affine<T: Element>(tape: &mut Tape<'_, T>, x: Var, p: &BoundNorm, eps: f64) -> Result<Var> {
    let y = tape.layer_norm(x, T::from_f64(eps))?;
    let y = tape.mul_row(y, p.gamma)?;
    Ok(tape.add_row(y, p.beta)?)
}

/// `C + ReLU(C · W_in) · W_out`, before normalization.
pub fn ffn_residual<T: Element>(tape: &mut Tape<'_, T>, c: Var, w_in: Var, w_out: Var) -> Result<Var> {
    let h = tape.matmul(c, w_in)?;
    let h = tape.relu(h)?;
    let o = tape.matmul(h, w_out)?;
    Ok(tape.add(c, o)?)
}

/// One cross-attention sub-step: `LN(C + Attn(C, X) W_o)`.
pub fn cross_attention_step<T: Element>(
    tape: &mut Tape<'_, T>,
    config: &AcgConfig,
    step: &BoundStep,
    concepts: Var,
    pixels: Var,
) -> Result<Var> {
    let r = attention_residual(tape, concepts, pixels, &step.cross_attn, config.num_heads)?;
    norm_affine(tape, r, &step.cross_norm, config.layer_norm_eps)
}

/// One self-attention sub-step: `LN(C + Attn(C, C) W_o)`.
pub fn self_attention_step<T: Element>(
    tape: &mut Tape<'_, T>,
    config: &AcgConfig,
    step: &BoundStep,
    concepts: Var,
) -> Result<Var> {
    let r = attention_residual(tape, concepts, concepts, &step.self_attn, config.num_heads)?;
    norm_affine(tape, r, &step.self_norm, config.layer_norm_eps)
}

pub fn ffn_step<T: Element>(tape: &mut Tape<'_, T>, config: &AcgConfig, step: &BoundStep, concepts: Var) -> Result<Var> {
    let r = ffn_residual(tape, concepts, step.ffn_in, step.ffn_out)?;
    norm_affine(tape, r, &step.ffn_norm, config.layer_norm_eps)
}

/// Full generator on the tape; returns the `k×d` concepts.
pub fn acg_forward<T: Element>(
    tape: &mut Tape<'_, T>,
    config: &AcgConfig,
    params: &BoundParams,
    pixels: Var,
) -> Result<Var> {
    let x = tape.value(pixels);
    if x.shape().len() != 2 || x.cols() != config.embed_dim {
        return Err(Error::Dimension(format!(
            "pixel embeddings have shape {:?}, generator expects width {}",
            x.shape(),
            config.embed_dim
        )));
    }
    if !x.is_finite() {
        return Err(crate::error::TensorError::NonFinite { op: "acg input" }.into());
    }
    let mut c = params.prototypes;
    for step in &params.steps {
        c = cross_attention_step(tape, config, step, c, pixels)?;
        c = self_attention_step(tape, config, step, c)?;
        c = ffn_step(tape, config, step, c)?;
    }
    Ok(c)
}
