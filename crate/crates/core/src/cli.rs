//! Command-line front end.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::json;

use acseg::baselines::{cluster_image, BaselineConfig, BaselineMethod};
use acseg::checkpoint::{read_checkpoint, write_checkpoint, Checkpoint};
use acseg::classifier::{
    average_region_embeddings, embedding_matrix, foreground_scores, kmeans_classify_runs, knn_classify, majority_labels,
    split_background, text_classify, ClassPrediction, RegionEmbedding, ScoreMode,
};
use acseg::eval::{evaluate_clusters, matched_scores, ConfusionMatrix, EvalReport, MeanStd, SegmentationScores};
use acseg::io::{write_feature_file, FeatureMap, FeatureSource, LabelMap, Manifest, ManifestDataset};
use acseg::modularity::{BatchReduction, LossOptions};
use acseg::synth::{generate_image, SyntheticSpec};
use acseg::trainer::{train, write_loss_csv, Segmenter, TrainConfig};
use acseg::Tensor;

pub const CONFIG_FILE: &str = "config.json";

#[derive(Parser, Debug)]
#[command(name = "acseg", version, about = "Adaptive concept segmentation on pre-extracted ViT features")]
pub struct Cli {
    /// Worker threads (1 runs everything on the calling thread).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Command {
    /// Generate a synthetic feature corpus with known clusters.
    Synth(SynthArgs),
    /// Train the concept generator.
    Train(TrainArgs),
    /// Segment feature maps with a trained checkpoint.
    Infer(InferArgs),
    /// Segment feature maps with a classical clustering method.
    Baseline(BaselineArgs),
    /// Score label maps against ground truth.
    Eval(EvalArgs),
    /// Classify concepts by clustering their region embeddings.
    ClassifyKmeans(ClassifyKmeansArgs),
    /// Classify concepts by weighted k-NN against a labelled bank.
    ClassifyKnn(ClassifyKnnArgs),
    /// Classify concepts against class text embeddings.
    ClassifyText(ClassifyTextArgs),
    /// Train and score one model per prototype count.
    SweepPrototypes(SweepArgs),
    /// Re-run the command recorded in a config snapshot.
    Replay(ReplayArgs),
}

impl Command {
    fn out_dir(&self) -> Option<&Path> {
        Some(match self {
            Command::Synth(a) => &a.out,
            Command::Train(a) => &a.out,
            Command::Infer(a) => &a.out,
            Command::Baseline(a) => &a.out,
            Command::Eval(a) => &a.out,
            Command::ClassifyKmeans(a) => &a.common.out,
            Command::ClassifyKnn(a) => &a.common.out,
            Command::ClassifyText(a) => &a.common.out,
            Command::SweepPrototypes(a) => &a.out,
            Command::Replay(_) => return None,
        })
    }

    fn set_out_dir(&mut self, dir: PathBuf) {
        match self {
            Command::Synth(a) => a.out = dir,
            Command::Train(a) => a.out = dir,
            Command::Infer(a) => a.out = dir,
            Command::Baseline(a) => a.out = dir,
            Command::Eval(a) => a.out = dir,
            Command::ClassifyKmeans(a) => a.common.out = dir,
            Command::ClassifyKnn(a) => a.common.out = dir,
            Command::ClassifyText(a) => a.common.out = dir,
            Command::SweepPrototypes(a) => a.out = dir,
            Command::Replay(_) => {}
        }
    }
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 64)]
    pub images: usize,
    /// Inclusive cluster-count range, `lo..hi` or a single number.
    #[arg(long, default_value = "2..4", value_parser = parse_range)]
    pub clusters: (usize, usize),
    #[arg(long, default_value_t = 32)]
    pub dim: usize,
    /// Grid as `HxW`.
    #[arg(long, default_value = "14x14", value_parser = parse_grid)]
    pub grid: (usize, usize),
    #[arg(long, default_value_t = 0.01)]
    pub noise: f64,
    #[arg(long, default_value_t = 0.3)]
    pub max_center_cosine: f64,
    #[arg(long, default_value_t = -1.0, allow_hyphen_values = true)]
    pub min_center_cosine: f64,
    /// Also write a one-head attention map.
    #[arg(long)]
    pub attention: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

impl SynthArgs {
    pub fn spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            images: self.images,
            clusters: self.clusters,
            dim: self.dim,
            grid: self.grid,
            max_center_cosine: self.max_center_cosine,
            min_center_cosine: self.min_center_cosine,
            noise_std: self.noise,
            attention: self.attention,
            seed: self.seed,
            ..SyntheticSpec::default()
        }
    }
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct TrainArgs {
    /// Dataset manifest.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Prototype count.
    #[arg(long, default_value_t = 5)]
    pub k: usize,
    /// Generator update steps.
    #[arg(long, default_value_t = 6)]
    pub steps: usize,
    #[arg(long, default_value_t = 2500)]
    pub iters: usize,
    #[arg(long, default_value_t = 32)]
    pub batch: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.01)]
    pub wd: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long, default_value_t = 224)]
    pub image_side: usize,
    #[arg(long, default_value_t = acseg::acg::PROTOTYPE_INIT_STD)]
    pub prototype_std: f64,
    #[arg(long, default_value_t = acseg::acg::RESIDUAL_INIT_SCALE)]
    pub residual_scale: f64,
    /// Leave self-pairs out of the loss.
    #[arg(long)]
    pub exclude_diagonal: bool,
    /// Sum per-image losses instead of averaging them.
    #[arg(long)]
    pub sum_batch: bool,
    /// Apply weight decay to every tensor.
    #[arg(long)]
    pub decay_all: bool,
    /// Compute per-image gradients on the calling thread.
    #[arg(long)]
    pub serial: bool,
}

impl TrainArgs {
    pub fn config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.lr,
            weight_decay: self.wd,
            iterations: self.iters,
            batch_size: self.batch,
            num_prototypes: self.k,
            num_steps: self.steps,
            image_side: self.image_side,
            seed: self.seed,
            num_heads: self.heads,
            prototype_init_std: self.prototype_std,
            residual_init_scale: self.residual_scale,
            loss: LossOptions {
                include_diagonal: !self.exclude_diagonal,
                batch_reduction: if self.sum_batch { BatchReduction::Sum } else { BatchReduction::Mean },
            },
            decay_all: self.decay_all,
            parallel: !self.serial,
        }
    }
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Run the generator in single precision.
    #[arg(long)]
    pub f32: bool,
    /// Also export every label map as PNG.
    #[arg(long)]
    pub png: bool,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MethodArg {
    Kmeans,
    Spectral,
    AffinityPropagation,
    Agglomerative,
}

impl From<MethodArg> for BaselineMethod {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Kmeans => BaselineMethod::Kmeans,
            MethodArg::Spectral => BaselineMethod::Spectral,
            MethodArg::AffinityPropagation => BaselineMethod::AffinityPropagation,
            MethodArg::Agglomerative => BaselineMethod::Agglomerative,
        }
    }
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct BaselineArgs {
    #[arg(long, value_enum)]
    pub method: MethodArg,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Cluster count for k-means and spectral clustering.
    #[arg(long, default_value_t = 5)]
    pub clusters: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Affinity propagation damping.
    #[arg(long, default_value_t = 0.5)]
    pub damping: f64,
    /// Affinity propagation preference.
    #[arg(long, default_value_t = -2.0, allow_hyphen_values = true)]
    pub preference: f64,
    /// Agglomerative merge threshold on cosine distance.
    #[arg(long, default_value_t = 0.65)]
    pub distance_threshold: f64,
    #[arg(long)]
    pub png: bool,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MatchArg {
    /// One cluster-to-class matching over the whole dataset.
    Dataset,
    /// A separate matching per image.
    Image,
    /// Predicted labels are already class ids.
    None,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct EvalArgs {
    /// Directory of predicted label maps named `<id>.lbl`.
    #[arg(long)]
    pub pred: PathBuf,
    /// Manifest whose feature files carry labels, or a directory of
    /// `<id>.lbl` / `<id>.png` ground-truth maps.
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long = "match", value_enum, default_value_t = MatchArg::Dataset)]
    pub matching: MatchArg,
    /// Manifest supplying class names, ignore index and remap table.
    #[arg(long)]
    pub label_table: Option<PathBuf>,
    #[arg(long)]
    pub ignore: Option<u8>,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct ClassifyCommon {
    /// Dataset manifest.
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory of `infer` for the same dataset.
    #[arg(long)]
    pub segments: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Reserve class 0 for concepts split off as background by attention.
    #[arg(long)]
    pub background: bool,
    /// Average attention over a region instead of summing it.
    #[arg(long)]
    pub mean_score: bool,
    #[arg(long)]
    pub ignore: Option<u8>,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct ClassifyKmeansArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: ClassifyCommon,
    /// Foreground cluster count.
    #[arg(long, default_value_t = 20)]
    pub classes: usize,
    #[arg(long, default_value_t = 10)]
    pub runs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct ClassifyKnnArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: ClassifyCommon,
    /// Labelled bank dataset manifest.
    #[arg(long)]
    pub bank_data: PathBuf,
    /// `infer` output for the bank dataset.
    #[arg(long)]
    pub bank_segments: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub k: usize,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct ClassifyTextArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: ClassifyCommon,
    /// Feature file carrying the class embedding section; defaults to the
    /// first dataset file that has one.
    #[arg(long)]
    pub class_embeddings: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct SweepArgs {
    /// Training manifest.
    #[arg(long)]
    pub data: PathBuf,
    /// Held-out manifest with labels; defaults to the training set.
    #[arg(long)]
    pub eval_data: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "2,5,7,10,15")]
    pub ks: Vec<usize>,
    #[arg(long, default_value_t = 6)]
    pub steps: usize,
    #[arg(long, default_value_t = 2500)]
    pub iters: usize,
    #[arg(long, default_value_t = 32)]
    pub batch: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.01)]
    pub wd: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct ReplayArgs {
    /// A `config.json` written by an earlier run.
    pub config: PathBuf,
    /// Write outputs here instead of the recorded directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_range(s: &str) -> std::result::Result<(usize, usize), String> {
    let parse = |t: &str| t.trim().parse::<usize>().map_err(|e| format!("'{t}': {e}"));
    match s.split_once("..") {
        Some((a, b)) => Ok((parse(a)?, parse(b.trim_start_matches('='))?)),
        None => parse(s).map(|v| (v, v)),
    }
}

fn parse_grid(s: &str) -> std::result::Result<(usize, usize), String> {
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected HxW, got '{s}'"))?;
    let parse = |t: &str| t.trim().parse::<usize>().map_err(|e| format!("'{t}': {e}"));
    Ok((parse(h)?, parse(w)?))
}

#[derive(Serialize, Deserialize)]
struct Snapshot {
    tool: String,
    version: String,
    threads: Option<usize>,
    #[serde(flatten)]
    command: Command,
}

pub fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .context("configuring the thread pool")?;
    }
    execute(cli.command, cli.threads)
}

fn execute(command: Command, threads: Option<usize>) -> Result<()> {
    if let Command::Replay(r) = &command {
        let text = fs::read_to_string(&r.config).with_context(|| format!("reading {}", r.config.display()))?;
        let snap: Snapshot = serde_json::from_str(&text).with_context(|| format!("parsing {}", r.config.display()))?;
        let mut recorded = snap.command;
        if matches!(recorded, Command::Replay(_)) {
            bail!("a snapshot cannot record a replay");
        }
        if let Some(out) = &r.out {
            recorded.set_out_dir(out.clone());
        }
        return execute(recorded, threads);
    }
    let out = command.out_dir().expect("every command but replay has an output directory").to_path_buf();
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let snap = Snapshot {
        tool: "acseg".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        threads,
        command: command.clone(),
    };
    write_json(&out.join(CONFIG_FILE), &snap)?;
    match command {
        Command::Synth(a) => synth(&a),
        Command::Train(a) => train_cmd(&a),
        Command::Infer(a) => infer_cmd(&a),
        Command::Baseline(a) => baseline_cmd(&a),
        Command::Eval(a) => eval_cmd(&a),
        Command::ClassifyKmeans(a) => classify_kmeans(&a),
        Command::ClassifyKnn(a) => classify_knn(&a),
        Command::ClassifyText(a) => classify_text(&a),
        Command::SweepPrototypes(a) => sweep(&a),
        Command::Replay(_) => unreachable!(),
    }
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

/// File stem for an image id.
fn stem(id: &str) -> String {
    id.chars().map(|c| if matches!(c, '/' | '\\' | ':') { '_' } else { c }).collect()
}

fn open_dataset(path: &Path) -> Result<ManifestDataset> {
    ManifestDataset::open(path).with_context(|| format!("opening manifest {}", path.display()))
}

fn write_labels(dir: &Path, name: &str, map: &LabelMap, png: bool) -> Result<()> {
    map.write(dir.join(format!("{name}.lbl")))?;
    if png {
        map.write_png(dir.join(format!("{name}.png")))?;
    }
    Ok(())
}

fn synth(a: &SynthArgs) -> Result<()> {
    let spec = a.spec();
    spec.validate()?;
    let mut manifest = Manifest::default();
    for c in 0..spec.clusters.1 {
        manifest.classes.insert(c as u32, format!("cluster{c}"));
    }
    for i in 0..spec.images {
        let map = generate_image(&spec, i)?;
        let name = format!("{}.acft", stem(&map.id));
        write_feature_file(a.out.join(&name), &map)?;
        manifest.files.push(PathBuf::from(name));
    }
    manifest.write(a.out.join("manifest.txt"))?;
    write_json(
        &a.out.join("spec.json"),
        &json!({ "spec": spec, "separation_ratio": spec.separation_ratio() }),
    )?;
    log::info!("wrote {} synthetic images to {}", spec.images, a.out.display());
    Ok(())
}

fn train_cmd(a: &TrainArgs) -> Result<()> {
    let data = open_dataset(&a.data)?;
    let cfg = a.config();
    let start = Instant::now();
    let out = train(&data, &cfg)?;
    let secs = start.elapsed().as_secs_f64();
    write_checkpoint(
        a.out.join("checkpoint.acgp"),
        &Checkpoint {
            params: out.params,
            optimizer: Some(out.optimizer),
        },
    )?;
    write_loss_csv(a.out.join("loss.csv"), &out.history)?;
    write_json(
        &a.out.join("summary.json"),
        &json!({
            "iterations": out.history.len(),
            "final_loss": out.history.last().map(|r| r.loss),
            "skipped_images": out.skipped_images,
        }),
    )?;
    write_json(&a.out.join("timing.json"), &json!({ "train_seconds": secs }))?;
    Ok(())
}

#[derive(Serialize)]
struct SegmentRecord {
    id: String,
    active: usize,
    concepts: Vec<usize>,
}

fn infer_cmd(a: &InferArgs) -> Result<()> {
    let ckpt = read_checkpoint(&a.checkpoint)?;
    let data = open_dataset(&a.data)?;
    let mut records = Vec::with_capacity(data.len());
    let start = Instant::now();
    let single = Segmenter::<f32>::new(&ckpt.params);
    let double = Segmenter::<f64>::new(&ckpt.params);
    for i in 0..data.len() {
        let map = data.load(i)?;
        let (labels, active) = if a.f32 {
            let s = single.segment(&map)?;
            (s.labels().to_vec(), s.assignment.hard.active.clone())
        } else {
            let s = double.segment(&map)?;
            (s.labels().to_vec(), s.assignment.hard.active.clone())
        };
        let name = stem(&map.id);
        let (h, w) = map.target_size();
        write_labels(&a.out, &name, &LabelMap::from_indices(h, w, &labels)?, a.png)?;
        if (h, w) != map.grid {
            let grid = grid_labels(&ckpt.params, &map)?;
            write_labels(&a.out, &format!("{name}.grid"), &LabelMap::from_indices(map.grid.0, map.grid.1, &grid)?, false)?;
        }
        records.push(SegmentRecord {
            id: map.id.clone(),
            active: active.len(),
            concepts: active,
        });
    }
    let secs = start.elapsed().as_secs_f64();
    write_json(&a.out.join("segments.json"), &records)?;
    write_json(
        &a.out.join("timing.json"),
        &json!({ "images": records.len(), "seconds": secs, "images_per_second": records.len() as f64 / secs.max(1e-12) }),
    )?;
    Ok(())
}

/// Concept labels on the feature grid, without upsampling.
fn grid_labels(params: &acseg::acg::AcgParams, map: &FeatureMap) -> Result<Vec<usize>> {
    let mut grid_only = map.clone();
    grid_only.original_size = None;
    Ok(Segmenter::<f64>::new(params).segment(&grid_only)?.labels().to_vec())
}

fn baseline_cmd(a: &BaselineArgs) -> Result<()> {
    let data = open_dataset(&a.data)?;
    let mut cfg = BaselineConfig::new(a.method.into()).with_seed(a.seed);
    cfg.kmeans.n_clusters = a.clusters;
    cfg.spectral.n_clusters = a.clusters;
    cfg.spectral.n_components = a.clusters;
    cfg.affinity_propagation.damping = a.damping;
    cfg.affinity_propagation.preference = a.preference;
    cfg.agglomerative.distance_threshold = Some(a.distance_threshold);
    let mut fallbacks = Vec::new();
    let mut records = Vec::with_capacity(data.len());
    let start = Instant::now();
    for i in 0..data.len() {
        let map = data.load(i)?;
        let outcome = cluster_image(&map.features, &cfg)?;
        if !outcome.converged {
            fallbacks.push(map.id.clone());
        }
        let name = stem(&map.id);
        write_labels(&a.out, &name, &LabelMap::from_indices(map.grid.0, map.grid.1, &outcome.labels)?, a.png)?;
        let active = outcome.labels.iter().max().map_or(0, |m| m + 1);
        records.push(json!({ "id": map.id, "clusters": active }));
    }
    let secs = start.elapsed().as_secs_f64();
    write_json(
        &a.out.join("summary.json"),
        &json!({ "method": BaselineMethod::from(a.method).name(), "images": records, "not_converged": fallbacks }),
    )?;
    write_json(
        &a.out.join("timing.json"),
        &json!({ "seconds": secs, "images_per_second": data.len() as f64 / secs.max(1e-12) }),
    )?;
    Ok(())
}

/// Ground truth keyed by image id.
struct GroundTruth {
    maps: Vec<(String, LabelMap)>,
    table: Manifest,
}

fn load_ground_truth(path: &Path, table: Option<&Path>) -> Result<GroundTruth> {
    let mut maps = Vec::new();
    let mut manifest = None;
    if path.is_dir() {
        let mut entries: Vec<PathBuf> = fs::read_dir(path)?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()?;
        entries.sort();
        for p in entries {
            let ext = p.extension().and_then(|e| e.to_str()).unwrap_or("");
            let name = p.file_stem().and_then(|s| s.to_str()).unwrap_or("");
            if (ext == "lbl" || ext == "png") && !name.ends_with(".grid") && !maps.iter().any(|(n, _)| n == name) {
                maps.push((name.to_string(), LabelMap::read_any(&p)?));
            }
        }
    } else {
        let data = open_dataset(path)?;
        for i in 0..data.len() {
            let map = data.load(i)?;
            let labels = map
                .labels
                .clone()
                .ok_or_else(|| anyhow!("{} has no label section", data.path(i).display()))?;
            maps.push((stem(&map.id), labels));
        }
        manifest = Some(data.manifest);
    }
    let table = match table {
        Some(t) => Manifest::read(t)?,
        None => manifest.unwrap_or_default(),
    };
    for (_, m) in &mut maps {
        for v in &mut m.data {
            *v = table.remap_label(*v);
        }
    }
    if maps.is_empty() {
        bail!("no ground truth found at {}", path.display());
    }
    Ok(GroundTruth { maps, table })
}

fn read_prediction(dir: &Path, name: &str, shape: (usize, usize)) -> Result<LabelMap> {
    for candidate in [format!("{name}.lbl"), format!("{name}.grid.lbl"), format!("{name}.png")] {
        let p = dir.join(&candidate);
        if p.exists() {
            let m = LabelMap::read_any(&p)?;
            if (m.height, m.width) == shape {
                return Ok(m);
            }
        }
    }
    bail!("no {}x{} prediction for '{name}' in {}", shape.0, shape.1, dir.display())
}

fn to_usize(m: &LabelMap) -> Vec<usize> {
    m.data.iter().map(|&v| v as usize).collect()
}

/// Scores prediction/ground-truth pairs under the chosen matching.
fn score_pairs(pairs: &[(Vec<usize>, Vec<usize>)], matching: MatchArg, ignore: Option<usize>) -> Result<SegmentationScores> {
    let space = |f: &dyn Fn(&(Vec<usize>, Vec<usize>)) -> &Vec<usize>| {
        pairs
            .iter()
            .flat_map(|p| f(p).iter().copied())
            .filter(|&v| Some(v) != ignore)
            .max()
            .map_or(1, |m| m + 1)
    };
    let classes = space(&|p| &p.1);
    let predicted = space(&|p| &p.0);
    Ok(match matching {
        MatchArg::Dataset => evaluate_clusters(pairs, predicted, classes, ignore)?.scores,
        MatchArg::None => {
            let n = classes.max(predicted);
            let mut cm = ConfusionMatrix::new(n, n);
            for (p, g) in pairs {
                cm.add(p, g, ignore)?;
            }
            cm.scores()
        }
        MatchArg::Image => {
            // row `classes` collects pixels of clusters left unmatched
            let mut cm = ConfusionMatrix::new(classes + 1, classes);
            for (p, g) in pairs {
                let mut local = ConfusionMatrix::new(p.iter().max().map_or(1, |m| m + 1), classes);
                local.add(p, g, ignore)?;
                let mapping = local.hungarian_mapping()?;
                let mapped: Vec<usize> = p.iter().map(|&c| mapping[c].unwrap_or(classes)).collect();
                cm.add(&mapped, g, ignore)?;
            }
            let mapping: Vec<Option<usize>> = (0..=classes).map(|c| (c < classes).then_some(c)).collect();
            cm.scores_with_mapping(&mapping)
        }
    })
}

fn eval_cmd(a: &EvalArgs) -> Result<()> {
    let gt = load_ground_truth(&a.gt, a.label_table.as_deref())?;
    let ignore = a.ignore.or(gt.table.ignore_index).map(usize::from);
    let mut pairs = Vec::with_capacity(gt.maps.len());
    for (name, g) in &gt.maps {
        let p = read_prediction(&a.pred, name, (g.height, g.width))?;
        pairs.push((to_usize(&p), to_usize(g)));
    }
    let scores = score_pairs(&pairs, a.matching, ignore)?;
    let report = EvalReport::new(&scores, pairs.len(), &gt.table.classes);
    report.write_json(a.out.join("report.json"))?;
    report.write_csv(a.out.join("report.csv"))?;
    println!("mIoU {:.4}  pixel accuracy {:.4}  images {}", report.miou, report.pixel_accuracy, report.images);
    Ok(())
}

/// One image prepared for concept classification.
struct ClassifyImage {
    id: String,
    /// Concept per pixel at evaluation resolution.
    concepts: LabelMap,
    regions: Vec<RegionEmbedding>,
    background: Vec<usize>,
    gt: Option<LabelMap>,
}

fn prepare_images(data_path: &Path, segments: &Path, background: bool, mode: ScoreMode) -> Result<(Vec<ClassifyImage>, Manifest)> {
    let data = open_dataset(data_path)?;
    let mut out = Vec::with_capacity(data.len());
    let mut degenerate = 0;
    for i in 0..data.len() {
        let map = data.load(i)?;
        let name = stem(&map.id);
        let grid = read_prediction(segments, &name, map.grid)?;
        let (h, w) = map.target_size();
        let concepts = if (h, w) == map.grid { grid.clone() } else { read_prediction(segments, &name, (h, w))? };
        let grid_concepts = to_usize(&grid);
        let regions = if map.regions.is_empty() {
            average_region_embeddings(&map.features, &grid_concepts)?
        } else {
            map.regions.clone()
        };
        let mut bg = Vec::new();
        if background {
            let attn = map
                .attention
                .as_ref()
                .ok_or_else(|| anyhow!("background split needs attention, {} has none", map.id))?;
            let ids: Vec<usize> = regions.iter().map(|r| r.concept).collect();
            let scores = foreground_scores(&grid_concepts, &ids, attn, mode)?;
            let split = split_background(&scores);
            degenerate += usize::from(split.degenerate);
            bg = split.background.iter().map(|&r| ids[r]).collect();
        }
        let gt = map.labels.clone().map(|mut g| {
            for v in &mut g.data {
                *v = data.manifest.remap_label(*v);
            }
            g
        });
        out.push(ClassifyImage {
            id: map.id.clone(),
            concepts,
            regions,
            background: bg,
            gt,
        });
    }
    if degenerate > 0 {
        log::warn!("{degenerate} images had no background split");
    }
    Ok((out, data.manifest))
}

fn foreground(img: &ClassifyImage) -> impl Iterator<Item = &RegionEmbedding> {
    img.regions.iter().filter(|r| !img.background.contains(&r.concept))
}

/// Paints concept classes and collects evaluation pairs.
fn paint(
    images: &[ClassifyImage],
    classes: &[BTreeMap<usize, usize>],
    out: Option<&Path>,
    ignore: Option<u8>,
) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    let mut pairs = Vec::new();
    for (img, concept_classes) in images.iter().zip(classes) {
        let pred = ClassPrediction {
            concept_classes: concept_classes.clone(),
        };
        let fallback = usize::from(ignore.unwrap_or(acseg::io::DEFAULT_IGNORE));
        let painted = pred.broadcast(&to_usize(&img.concepts), fallback);
        if let Some(dir) = out {
            let map = LabelMap::from_indices(img.concepts.height, img.concepts.width, &painted)?;
            map.write(dir.join(format!("{}.lbl", stem(&img.id))))?;
        }
        if let Some(g) = &img.gt {
            if (g.height, g.width) == (img.concepts.height, img.concepts.width) {
                pairs.push((painted, to_usize(g)));
            }
        }
    }
    Ok(pairs)
}

fn finish_report(dir: &Path, scores: &[SegmentationScores], images: usize, names: &BTreeMap<u32, String>) -> Result<()> {
    let Some(first) = scores.first() else {
        log::warn!("no ground truth at prediction resolution; report skipped");
        return Ok(());
    };
    let mut report = EvalReport::new(first, images, names);
    if scores.len() > 1 {
        report.miou_runs = Some(MeanStd::of(&scores.iter().map(|s| s.miou).collect::<Vec<_>>()));
        report.accuracy_runs = Some(MeanStd::of(&scores.iter().map(|s| s.pixel_accuracy).collect::<Vec<_>>()));
    }
    report.write_json(dir.join("report.json"))?;
    report.write_csv(dir.join("report.csv"))?;
    match &report.miou_runs {
        Some(m) => println!("mIoU {:.4} ± {:.4} over {} runs", m.mean, m.std, m.runs),
        None => println!("mIoU {:.4}  pixel accuracy {:.4}", report.miou, report.pixel_accuracy),
    }
    Ok(())
}

fn score_mode(mean: bool) -> ScoreMode {
    if mean {
        ScoreMode::Mean
    } else {
        ScoreMode::Sum
    }
}

fn classify_kmeans(a: &ClassifyKmeansArgs) -> Result<()> {
    let c = &a.common;
    let (images, manifest) = prepare_images(&c.data, &c.segments, c.background, score_mode(c.mean_score))?;
    let owners: Vec<(usize, usize)> = images
        .iter()
        .enumerate()
        .flat_map(|(i, img)| foreground(img).map(move |r| (i, r.concept)))
        .collect();
    let fg: Vec<RegionEmbedding> = images.iter().flat_map(|img| foreground(img).cloned()).collect();
    if fg.len() < a.classes {
        bail!("{} foreground regions cannot form {} clusters", fg.len(), a.classes);
    }
    let runs = kmeans_classify_runs(&embedding_matrix(&fg)?, a.classes, a.runs.max(1), a.seed)?;
    let offset = usize::from(c.background);
    let mut all_scores = Vec::new();
    let mut images_scored = 0;
    for (r, labels) in runs.iter().enumerate() {
        let mut classes: Vec<BTreeMap<usize, usize>> = images
            .iter()
            .map(|img| img.background.iter().map(|&b| (b, 0)).collect())
            .collect();
        for (&(img, concept), &cluster) in owners.iter().zip(labels) {
            classes[img].insert(concept, cluster + offset);
        }
        let pairs = paint(&images, &classes, (r == 0).then_some(c.out.as_path()), c.ignore)?;
        images_scored = pairs.len();
        if !pairs.is_empty() {
            all_scores.push(score_pairs(&pairs, MatchArg::Dataset, c.ignore.or(manifest.ignore_index).map(usize::from))?);
        }
    }
    write_json(&c.out.join("clusters.json"), &json!({ "regions": fg.len(), "runs": runs }))?;
    finish_report(&c.out, &all_scores, images_scored, &manifest.classes)
}

/// Region embeddings of every image, each labelled by its majority
/// ground-truth class.
fn labelled_bank(images: &[ClassifyImage], ignore: Option<u8>) -> Result<(Tensor<f64>, Vec<usize>)> {
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for img in images {
        let gt = img.gt.as_ref().ok_or_else(|| anyhow!("bank image {} has no labels", img.id))?;
        if (gt.height, gt.width) != (img.concepts.height, img.concepts.width) {
            bail!("bank image {}: labels and segments differ in size", img.id);
        }
        let majority = majority_labels(&to_usize(&img.concepts), gt, ignore)?;
        for r in &img.regions {
            if let Some(&l) = majority.get(&r.concept) {
                rows.push(r.clone());
                labels.push(l as usize);
            }
        }
    }
    if rows.is_empty() {
        bail!("bank has no labelled regions");
    }
    Ok((embedding_matrix(&rows)?, labels))
}

fn classify_knn(a: &ClassifyKnnArgs) -> Result<()> {
    let c = &a.common;
    let mode = score_mode(c.mean_score);
    let (bank_images, bank_manifest) = prepare_images(&a.bank_data, &a.bank_segments, false, mode)?;
    let ignore = c.ignore.or(bank_manifest.ignore_index);
    let (bank, bank_labels) = labelled_bank(&bank_images, ignore)?;
    let num_classes = bank_labels.iter().max().map_or(1, |m| m + 1);
    let (images, manifest) = prepare_images(&c.data, &c.segments, c.background, mode)?;
    let mut classes = Vec::with_capacity(images.len());
    for img in &images {
        let mut map: BTreeMap<usize, usize> = img.background.iter().map(|&b| (b, 0)).collect();
        let fg: Vec<RegionEmbedding> = foreground(img).cloned().collect();
        if !fg.is_empty() {
            let pred = knn_classify(&embedding_matrix(&fg)?, &bank, &bank_labels, num_classes, a.k)?;
            for (r, cls) in fg.iter().zip(pred.classes) {
                map.insert(r.concept, cls);
            }
        }
        classes.push(map);
    }
    let pairs = paint(&images, &classes, Some(&c.out), c.ignore)?;
    let scores = if pairs.is_empty() {
        vec![]
    } else {
        vec![score_pairs(&pairs, MatchArg::None, ignore.map(usize::from))?]
    };
    let names = if manifest.classes.is_empty() { bank_manifest.classes } else { manifest.classes };
    finish_report(&c.out, &scores, pairs.len(), &names)
}

fn classify_text(a: &ClassifyTextArgs) -> Result<()> {
    let c = &a.common;
    let (images, manifest) = prepare_images(&c.data, &c.segments, c.background, score_mode(c.mean_score))?;
    let class_emb = match &a.class_embeddings {
        Some(p) => acseg::io::read_feature_file(p)?
            .class_embeddings
            .ok_or_else(|| anyhow!("{} has no class embedding section", p.display()))?,
        None => {
            let data = open_dataset(&c.data)?;
            let mut found = None;
            for i in 0..data.len() {
                if let Some(e) = data.load(i)?.class_embeddings.clone() {
                    found = Some(e);
                    break;
                }
            }
            found.ok_or_else(|| anyhow!("no dataset file carries class embeddings; pass --class-embeddings"))?
        }
    };
    let offset = usize::from(c.background);
    let mut classes = Vec::with_capacity(images.len());
    let mut ties = 0;
    for img in &images {
        let mut map: BTreeMap<usize, usize> = img.background.iter().map(|&b| (b, 0)).collect();
        let fg: Vec<RegionEmbedding> = foreground(img).cloned().collect();
        if !fg.is_empty() {
            let pred = text_classify(&embedding_matrix(&fg)?, &class_emb)?;
            ties += pred.ties.iter().filter(|&&t| t).count();
            for (r, cls) in fg.iter().zip(pred.classes) {
                map.insert(r.concept, cls + offset);
            }
        }
        classes.push(map);
    }
    if ties > 0 {
        log::warn!("{ties} regions tied between classes");
    }
    let pairs = paint(&images, &classes, Some(&c.out), c.ignore)?;
    let scores = if pairs.is_empty() {
        vec![]
    } else {
        vec![score_pairs(&pairs, MatchArg::None, c.ignore.or(manifest.ignore_index).map(usize::from))?]
    };
    finish_report(&c.out, &scores, pairs.len(), &manifest.classes)
}

#[derive(Serialize)]
struct SweepRow {
    k: usize,
    final_loss: Option<f64>,
    /// Per-image matched accuracy, averaged.
    accuracy: f64,
    /// Per-image matched mIoU, averaged.
    miou: f64,
    /// Share of images whose active concept count equals the label count.
    count_agreement: f64,
    mean_active: f64,
}

fn sweep(a: &SweepArgs) -> Result<()> {
    let data = open_dataset(&a.data)?;
    let eval = match &a.eval_data {
        Some(p) => open_dataset(p)?,
        None => data.clone(),
    };
    let mut rows = Vec::new();
    for &k in &a.ks {
        let cfg = TrainConfig {
            learning_rate: a.lr,
            weight_decay: a.wd,
            iterations: a.iters,
            batch_size: a.batch,
            num_prototypes: k,
            num_steps: a.steps,
            seed: a.seed,
            ..TrainConfig::default()
        };
        let out = train(&data, &cfg)?;
        let seg = Segmenter::<f64>::new(&out.params);
        let (mut acc, mut miou, mut agree, mut active) = (0.0, 0.0, 0usize, 0usize);
        for i in 0..eval.len() {
            let map = eval.load(i)?;
            let mut grid_only = map.clone().into_owned();
            grid_only.original_size = None;
            let s = seg.segment(&grid_only)?;
            let gt = map.labels.as_ref().ok_or_else(|| anyhow!("{} has no labels", map.id))?;
            let gt = to_usize(gt);
            let scores = matched_scores(s.labels(), &gt, None)?;
            acc += scores.pixel_accuracy;
            miou += scores.miou;
            let truth = gt.iter().collect::<std::collections::BTreeSet<_>>().len();
            agree += usize::from(truth == s.active_count());
            active += s.active_count();
        }
        let n = eval.len().max(1) as f64;
        let row = SweepRow {
            k,
            final_loss: out.history.last().map(|r| r.loss),
            accuracy: acc / n,
            miou: miou / n,
            count_agreement: agree as f64 / n,
            mean_active: active as f64 / n,
        };
        println!("k={k:<3} accuracy {:.4}  mIoU {:.4}  count agreement {:.3}", row.accuracy, row.miou, row.count_agreement);
        rows.push(row);
    }
    write_json(&a.out.join("sweep.json"), &rows)?;
    let mut w = csv::Writer::from_path(a.out.join("sweep.csv"))?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
