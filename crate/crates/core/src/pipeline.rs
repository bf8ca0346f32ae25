//! Directory-level stages (generate, train, extract, evaluate, fuse, demo)
//! driven by one [`PipelineConfig`].
//!
//! Output layout under `paths.output`:
//!
//! ```text
//! manifest.jsonl            kept renders, paths relative to the output dir
//! hashes.csv                every render's perceptual hash
//! dedup.csv                 per-model near-duplicate counts
//! renders/<class>/<model>/<frame>_depth.png
//! net/weights.bin, net/curve.csv, net/meta.json, net/split.json
//! features/<layer>_<preproc>.bin
//! reports/*.csv, reports/*.json
//! final_report.csv          demo only
//! ```

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::{AugmentError, AugmentPolicy};
use crate::config_sampler::{
    dedup, perceptual_hash, sample_configs, write_dedup_csv, DedupRow, Hash64, SamplerError,
};
use crate::convnet::{write_named_arrays, NamedArray};
use crate::convnet::{extract_batch, train_images, write_curve_csv, CurvePoint, Net, NetError, NetSpec, Preproc, TrainConfig};
use crate::dataset_store::{
    load_manifest, make_splits, read_split_file, DatasetError, Modality, SampleRecord, Split, SplitProtocol, SplitSpec,
};
use crate::depth_render::{depth_to_image, render_depth, DepthImage, RenderError};
use crate::eval_harness::{
    evaluate, run_ablation, run_fusion_eval, svm_predict, write_reports_csv, AblationGrid, EvalConfig, EvalError,
    EvalReport, Fingerprint, FusionReport,
};
use crate::kernel_fusion::FusionError;
use crate::mesh_io::{load_mesh, morph_mesh, normalize_mesh, save_mesh, MeshError, MorphParams, MAX_MORPH};
use crate::primitives::{self, PRIMITIVE_CLASSES};
use crate::rng;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error("mesh_io: {0}")]
    Mesh(#[from] MeshError),
    #[error("depth_render: {0}")]
    Render(#[from] RenderError),
    #[error("config_sampler: {0}")]
    Sampler(#[from] SamplerError),
    #[error("augment: {0}")]
    Augment(#[from] AugmentError),
    #[error("dataset_store: {0}")]
    Dataset(#[from] DatasetError),
    #[error("convnet: {0}")]
    Net(#[from] NetError),
    #[error("kernel_fusion: {0}")]
    Fusion(#[from] FusionError),
    #[error("eval_harness: {0}")]
    Eval(#[from] EvalError),
    #[error("i/o error on {path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("worker pool: {0}")]
    Pool(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |e| PipelineError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    /// Holds `<class>/<model>.obj`.
    pub models: PathBuf,
    pub output: PathBuf,
}

impl Default for PathsSection {
    fn default() -> Self {
        PathsSection {
            models: "models".into(),
            output: "out".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderSection {
    pub resolution: usize,
    /// Configurations sampled per model.
    pub count: usize,
    pub dedup_threshold: u32,
}

impl Default for RenderSection {
    fn default() -> Self {
        RenderSection {
            resolution: 128,
            count: 60,
            dedup_threshold: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetSection {
    pub spec: String,
}

impl Default for NetSection {
    fn default() -> Self {
        NetSection {
            spec: "mini_depth_net".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub base_lr: f64,
    pub gamma: f64,
    pub first_step_epochs: usize,
    pub total_epochs: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub preproc: Preproc,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            base_lr: t.base_lr,
            gamma: t.gamma,
            first_step_epochs: 10,
            total_epochs: t.total_epochs,
            momentum: t.momentum,
            weight_decay: t.weight_decay,
            batch_size: t.batch_size,
            preproc: t.preproc,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSection {
    pub protocol: SplitProtocol,
    pub subsample_stride: u32,
    /// `class,model_id` lines naming the test instances.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub split_file: Option<PathBuf>,
}

impl Default for SplitSection {
    fn default() -> Self {
        SplitSection {
            protocol: SplitProtocol::LeaveInstanceOut,
            subsample_stride: 5,
            split_file: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub layer: String,
    pub preproc: Preproc,
    pub ablation_layers: Vec<String>,
    pub ablation_preprocs: Vec<Preproc>,
    pub c_grid: Vec<f64>,
    pub p_grid: Vec<f64>,
    pub cv_folds: usize,
    pub online_iters: usize,
    pub batch_iters: usize,
    /// Feature sources for `fuse`, written `layer:preproc`.
    pub fuse_first: String,
    pub fuse_second: String,
}

impl Default for EvalSection {
    fn default() -> Self {
        let e = EvalConfig::default();
        EvalSection {
            layer: "pool_last".into(),
            preproc: Preproc::Raw,
            ablation_layers: vec!["pool_last".into(), "fc6".into(), "fc7".into()],
            ablation_preprocs: vec![Preproc::Raw, Preproc::MinMax],
            c_grid: e.c_grid,
            p_grid: e.p_grid,
            cv_folds: e.cv_folds,
            online_iters: e.online_iters,
            batch_iters: e.batch_iters,
            fuse_first: "pool_last:raw".into(),
            fuse_second: "pool_last:minmax".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    #[serde(default)]
    pub paths: PathsSection,
    #[serde(default)]
    pub render: RenderSection,
    #[serde(default)]
    pub augment: AugmentPolicy,
    #[serde(default)]
    pub net: NetSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub split: SplitSection,
    #[serde(default)]
    pub eval: EvalSection,
}

impl PipelineConfig {
    pub fn with_seed(seed: u64) -> Self {
        PipelineConfig {
            seed,
            paths: PathsSection::default(),
            render: RenderSection::default(),
            augment: AugmentPolicy::default(),
            net: NetSection::default(),
            train: TrainSection::default(),
            split: SplitSection::default(),
            eval: EvalSection::default(),
        }
    }

    pub fn parse(text: &str) -> Result<Self, PipelineError> {
        let cfg: PipelineConfig = toml::from_str(text).map_err(|e| PipelineError::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> Result<String, PipelineError> {
        toml::to_string(self).map_err(|e| PipelineError::Config(e.to_string()))
    }

    /// Parses `path`; relative paths inside are taken relative to its directory.
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let rebase = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        rebase(&mut cfg.paths.models);
        rebase(&mut cfg.paths.output);
        if let Some(p) = cfg.split.split_file.as_mut() {
            rebase(p);
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |field: &str, why: &str| Err(PipelineError::Config(format!("{field}: {why}")));
        if self.render.resolution < 9 {
            return bad("render.resolution", "must be at least 9");
        }
        if self.render.count == 0 {
            return bad("render.count", "must be at least 1");
        }
        if self.render.dedup_threshold > 64 {
            return bad("render.dedup_threshold", "must be at most 64");
        }
        if NetSpec::by_name(&self.net.spec, 2).is_none() {
            return bad("net.spec", &format!("unknown spec `{}`", self.net.spec));
        }
        if self.eval.c_grid.is_empty() || self.eval.c_grid.iter().any(|&c| !(c > 0.0)) {
            return bad("eval.c_grid", "needs positive values");
        }
        if self.eval.p_grid.is_empty() || self.eval.p_grid.iter().any(|&p| !(p >= 1.0)) {
            return bad("eval.p_grid", "needs values >= 1");
        }
        if self.eval.cv_folds < 2 {
            return bad("eval.cv_folds", "must be at least 2");
        }
        if self.split.subsample_stride == 0 {
            return bad("split.subsample_stride", "must be at least 1");
        }
        parse_source(&self.eval.fuse_first)?;
        parse_source(&self.eval.fuse_second)?;
        self.augment.validate()?;
        self.train_config().validate()?;
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            base_lr: t.base_lr,
            gamma: t.gamma,
            first_step_epochs: t.first_step_epochs,
            total_epochs: t.total_epochs,
            momentum: t.momentum,
            weight_decay: t.weight_decay,
            batch_size: t.batch_size,
            seed: rng::derive_seed(&[self.seed, rng::hash_str("train")]),
            policy: self.augment.clone(),
            preproc: t.preproc,
        }
    }

    pub fn eval_config(&self) -> EvalConfig {
        let e = &self.eval;
        EvalConfig {
            c_grid: e.c_grid.clone(),
            p_grid: e.p_grid.clone(),
            cv_folds: e.cv_folds,
            seed: rng::derive_seed(&[self.seed, rng::hash_str("eval")]),
            online_iters: e.online_iters,
            batch_iters: e.batch_iters,
        }
    }

    fn out(&self, rel: &str) -> PathBuf {
        self.paths.output.join(rel)
    }
}

fn parse_source(s: &str) -> Result<(String, Preproc), PipelineError> {
    let (layer, pre) = s
        .split_once(':')
        .ok_or_else(|| PipelineError::Config(format!("feature source `{s}`: expected layer:preproc")))?;
    let pre = pre.parse::<Preproc>().map_err(PipelineError::Config)?;
    Ok((layer.to_string(), pre))
}

/// Runs `f` on a dedicated pool of `jobs` workers (0 = one per core).
pub fn with_jobs<R: Send>(jobs: usize, f: impl FnOnce() -> R + Send) -> Result<R, PipelineError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| PipelineError::Pool(e.to_string()))?;
    Ok(pool.install(f))
}

fn create_dir(path: &Path) -> Result<(), PipelineError> {
    fs::create_dir_all(path).map_err(io_err(path))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), PipelineError> {
    if let Some(parent) = path.parent() {
        create_dir(parent)?;
    }
    fs::write(path, bytes).map_err(io_err(path))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| PipelineError::Config(e.to_string()))?;
    text.push('\n');
    write_file(path, text.as_bytes())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, PipelineError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| PipelineError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn csv_bytes(f: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>) -> Vec<u8> {
    let mut buf = Vec::new();
    f(&mut buf).expect("writing to memory");
    buf
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelEntry {
    pub class_label: String,
    pub model_id: String,
    pub path: PathBuf,
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>, PipelineError> {
    let mut out = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .map(|e| e.map(|e| e.path()).map_err(io_err(dir)))
        .collect::<Result<Vec<_>, _>>()?;
    out.sort();
    Ok(out)
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Every `<class>/<model>.obj` under `dir`, sorted by class then model.
pub fn discover_models(dir: &Path) -> Result<Vec<ModelEntry>, PipelineError> {
    if !dir.is_dir() {
        return Err(PipelineError::Config(format!("paths.models: {} is not a directory", dir.display())));
    }
    let mut out = Vec::new();
    for class_dir in sorted_entries(dir)? {
        if !class_dir.is_dir() {
            continue;
        }
        for path in sorted_entries(&class_dir)? {
            if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("obj")) && path.is_file() {
                out.push(ModelEntry {
                    class_label: file_name(&class_dir),
                    model_id: path.file_stem().unwrap().to_string_lossy().into_owned(),
                    path,
                });
            }
        }
    }
    if out.is_empty() {
        return Err(PipelineError::Config(format!(
            "paths.models: no <class>/<model>.obj files under {}",
            dir.display()
        )));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenSummary {
    pub rows: Vec<DedupRow>,
    pub rendered: usize,
    pub kept: usize,
}

fn frame_path(class: &str, model: &str, frame: usize) -> PathBuf {
    Path::new("renders")
        .join(class)
        .join(model)
        .join(format!("{frame:04}_depth.png"))
}

fn manifest_path(cfg: &PipelineConfig) -> PathBuf {
    cfg.out("manifest.jsonl")
}

/// Renders every model over its sampled configurations, drops near-duplicates
/// and writes the kept images plus the manifest.
pub fn gen(cfg: &PipelineConfig) -> Result<GenSummary, PipelineError> {
    cfg.validate()?;
    let models = discover_models(&cfg.paths.models)?;
    let out = &cfg.paths.output;
    let renders = out.join("renders");
    if renders.exists() {
        fs::remove_dir_all(&renders).map_err(io_err(&renders))?;
    }
    let res = cfg.render.resolution;
    let mut records = Vec::new();
    let mut rows = Vec::new();
    let mut hash_lines = String::from("class,model_id,frame,hash\n");
    for entry in &models {
        let mesh = normalize_mesh(&load_mesh(&entry.path)?)?;
        let key = format!("{}/{}", entry.class_label, entry.model_id);
        let plan = sample_configs(&key, cfg.render.count, cfg.seed)?;
        let rendered: Vec<(DepthImage, Hash64)> = plan
            .configs
            .par_iter()
            .map(|c| -> Result<_, PipelineError> {
                let img = depth_to_image(&render_depth(&mesh, c, res, res)?)?;
                let h = perceptual_hash(&img)?;
                Ok((img, h))
            })
            .collect::<Result<_, _>>()?;
        let hashes: Vec<Hash64> = rendered.iter().map(|r| r.1).collect();
        for (i, h) in hashes.iter().enumerate() {
            hash_lines.push_str(&format!("{},{},{i},{:016x}\n", entry.class_label, entry.model_id, h.0));
        }
        let result = dedup(&hashes, cfg.render.dedup_threshold);
        let dir = out.join(frame_path(&entry.class_label, &entry.model_id, 0)).parent().unwrap().to_path_buf();
        create_dir(&dir)?;
        result.kept.par_iter().try_for_each(|&i| {
            rendered[i]
                .0
                .save_png(&out.join(frame_path(&entry.class_label, &entry.model_id, i)))
        })?;
        for &i in &result.kept {
            records.push(SampleRecord {
                path: frame_path(&entry.class_label, &entry.model_id, i),
                class_label: entry.class_label.clone(),
                model_id: entry.model_id.clone(),
                frame_index: i as u32,
                modality: Modality::Depth,
                config: Some(plan.configs[i]),
            });
        }
        log::info!(
            "{key}: kept {}/{} ({:.1}% near-duplicates)",
            result.kept.len(),
            hashes.len(),
            100.0 * result.near_duplicate_fraction
        );
        rows.push(DedupRow {
            model_id: key,
            total: hashes.len(),
            kept: result.kept.len(),
            near_duplicate_fraction: result.near_duplicate_fraction,
        });
    }
    let mut manifest = String::new();
    for r in &records {
        manifest.push_str(&serde_json::to_string(r).map_err(|e| PipelineError::Config(e.to_string()))?);
        manifest.push('\n');
    }
    write_file(&manifest_path(cfg), manifest.as_bytes())?;
    write_file(&cfg.out("hashes.csv"), hash_lines.as_bytes())?;
    write_file(&cfg.out("dedup.csv"), &csv_bytes(|w| write_dedup_csv(&rows, w)))?;
    Ok(GenSummary {
        rendered: rows.iter().map(|r| r.total).sum(),
        kept: records.len(),
        rows,
    })
}

/// Re-runs deduplication over the hashes recorded by [`gen`] at `threshold`.
pub fn dedup_report(cfg: &PipelineConfig, threshold: u32) -> Result<Vec<DedupRow>, PipelineError> {
    let path = cfg.out("hashes.csv");
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let mut groups: Vec<(String, Vec<Hash64>)> = Vec::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        let bad = || PipelineError::Io {
            path: path.clone(),
            message: format!("line {}: expected class,model_id,frame,hash", n + 1),
        };
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 4 {
            return Err(bad());
        }
        let key = format!("{}/{}", parts[0], parts[1]);
        let h = u64::from_str_radix(parts[3], 16).map_err(|_| bad())?;
        match groups.last_mut() {
            Some((k, v)) if *k == key => v.push(Hash64(h)),
            _ => groups.push((key, vec![Hash64(h)])),
        }
    }
    let rows: Vec<DedupRow> = groups
        .into_iter()
        .map(|(model_id, hashes)| {
            let r = dedup(&hashes, threshold);
            DedupRow {
                model_id,
                total: hashes.len(),
                kept: r.kept.len(),
                near_duplicate_fraction: r.near_duplicate_fraction,
            }
        })
        .collect();
    write_file(&cfg.out("reports/dedup_report.csv"), &csv_bytes(|w| write_dedup_csv(&rows, w)))?;
    Ok(rows)
}

/// Manifest rows with their decoded images and class indices.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub records: Vec<SampleRecord>,
    pub images: Vec<DepthImage>,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
}

impl Dataset {
    /// Rows at `idx` with class indices remapped onto `class_names`.
    pub fn subset(&self, idx: &[usize], class_names: &[String]) -> Result<(Vec<DepthImage>, Vec<usize>), PipelineError> {
        let mut images = Vec::with_capacity(idx.len());
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            let name = &self.records[i].class_label;
            let k = class_names
                .iter()
                .position(|c| c == name)
                .ok_or_else(|| NetError::LabelUnknown(name.clone()))?;
            images.push(self.images[i].clone());
            labels.push(k);
        }
        Ok((images, labels))
    }
}

pub fn load_dataset(cfg: &PipelineConfig) -> Result<Dataset, PipelineError> {
    let mut records = load_manifest(&manifest_path(cfg))?;
    for r in &mut records {
        r.path = cfg.paths.output.join(&r.path);
    }
    if records.is_empty() {
        return Err(NetError::EmptyDataset.into());
    }
    let class_names: Vec<String> = records
        .iter()
        .map(|r| r.class_label.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let labels = records
        .iter()
        .map(|r| class_names.iter().position(|c| c == &r.class_label).unwrap())
        .collect();
    let images = records
        .par_iter()
        .map(|r| DepthImage::load(&r.path))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Dataset {
        records,
        images,
        labels,
        class_names,
    })
}

pub fn make_split(cfg: &PipelineConfig, records: &[SampleRecord]) -> Result<Split, PipelineError> {
    let test_instances = match &cfg.split.split_file {
        Some(p) => read_split_file(p)?,
        None => Vec::new(),
    };
    let spec = SplitSpec {
        protocol: cfg.split.protocol,
        test_instances,
        subsample_stride: cfg.split.subsample_stride,
        seed: rng::derive_seed(&[cfg.seed, rng::hash_str("split")]),
    };
    Ok(make_splits(records, &spec)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetMeta {
    pub spec: String,
    pub classes: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub curve: Vec<CurvePoint>,
    pub train_samples: usize,
    pub test_samples: usize,
}

/// Trains a fresh net on `idx` rows of `data` restricted to `class_names`.
pub fn train_on(
    spec_name: &str,
    data: &Dataset,
    idx: &[usize],
    class_names: &[String],
    tc: &TrainConfig,
    init_seed: u64,
) -> Result<(Net<f32>, Vec<CurvePoint>), PipelineError> {
    let spec = NetSpec::by_name(spec_name, class_names.len())
        .ok_or_else(|| PipelineError::Config(format!("net.spec: unknown spec `{spec_name}`")))?;
    let mut net = Net::<f32>::build(&spec, init_seed)?;
    let (images, labels) = data.subset(idx, class_names)?;
    let curve = train_images(&mut net, &images, &labels, tc)?;
    Ok((net, curve))
}

pub fn train(cfg: &PipelineConfig) -> Result<TrainSummary, PipelineError> {
    cfg.validate()?;
    let data = load_dataset(cfg)?;
    let split = make_split(cfg, &data.records)?;
    let tc = cfg.train_config();
    let init = rng::derive_seed(&[cfg.seed, rng::hash_str("init")]);
    let (net, curve) = train_on(&cfg.net.spec, &data, &split.train, &data.class_names, &tc, init)?;
    let dir = cfg.out("net");
    create_dir(&dir)?;
    net.save(&dir.join("weights.bin"))?;
    write_file(&dir.join("curve.csv"), &csv_bytes(|w| write_curve_csv(&curve, w)))?;
    write_json(
        &dir.join("meta.json"),
        &NetMeta {
            spec: cfg.net.spec.clone(),
            classes: data.class_names.clone(),
        },
    )?;
    write_json(&dir.join("split.json"), &split)?;
    Ok(TrainSummary {
        curve,
        train_samples: split.train.len(),
        test_samples: split.test.len(),
    })
}

/// The net written by [`train`] and its class list.
pub fn load_trained(cfg: &PipelineConfig) -> Result<(Net<f32>, NetMeta), PipelineError> {
    let dir = cfg.out("net");
    let meta: NetMeta = read_json(&dir.join("meta.json"))?;
    let spec = NetSpec::by_name(&meta.spec, meta.classes.len())
        .ok_or_else(|| PipelineError::Config(format!("net.spec: unknown spec `{}`", meta.spec)))?;
    Ok((Net::load(&spec, &dir.join("weights.bin"))?, meta))
}

pub fn features(net: &Net<f32>, images: &[DepthImage], layer: &str, pre: Preproc) -> Result<Vec<Vec<f64>>, PipelineError> {
    Ok(extract_batch(net, images, layer, pre)?
        .into_iter()
        .map(|f| f.values.into_iter().map(f64::from).collect())
        .collect())
}

fn check_classes(meta: &NetMeta, data: &Dataset) -> Result<(), PipelineError> {
    if meta.classes != data.class_names {
        return Err(PipelineError::Config(format!(
            "manifest classes {:?} differ from the trained net's {:?}",
            data.class_names, meta.classes
        )));
    }
    Ok(())
}

/// Writes `features/<layer>_<preproc>.bin` holding `features` (n × dim) and
/// `labels` (n) arrays.
pub fn extract(cfg: &PipelineConfig, layer: &str, pre: Preproc) -> Result<PathBuf, PipelineError> {
    let (net, _) = load_trained(cfg)?;
    let data = load_dataset(cfg)?;
    let feats = extract_batch(&net, &data.images, layer, pre)?;
    let dim = feats.first().map_or(0, |f| f.dim);
    let arrays = [
        NamedArray {
            name: "features".into(),
            shape: vec![feats.len(), dim],
            data: feats.into_iter().flat_map(|f| f.values).collect(),
        },
        NamedArray {
            name: "labels".into(),
            shape: vec![data.labels.len()],
            data: data.labels.iter().map(|&l| l as f32).collect(),
        },
    ];
    let path = cfg.out(&format!("features/{layer}_{}.bin", pre.name()));
    create_dir(path.parent().unwrap())?;
    let file = fs::File::create(&path).map_err(io_err(&path))?;
    write_named_arrays(BufWriter::new(file), &arrays)?;
    Ok(path)
}

/// Linear SVM on the configured layer, scored on the test split.
pub fn eval(cfg: &PipelineConfig) -> Result<EvalReport, PipelineError> {
    cfg.validate()?;
    let (net, meta) = load_trained(cfg)?;
    let data = load_dataset(cfg)?;
    check_classes(&meta, &data)?;
    let split = make_split(cfg, &data.records)?;
    let ec = cfg.eval_config();
    let layer = &cfg.eval.layer;
    let feats = features(&net, &data.images, layer, cfg.eval.preproc)?;
    let (pred, c) = svm_predict(&feats, &data.labels, &split, &ec)?;
    let test_labels: Vec<usize> = split.test.iter().map(|&i| data.labels[i]).collect();
    let mut report = evaluate(&pred, &test_labels, &data.class_names)?;
    report.fingerprint = Fingerprint {
        layer: Some(layer.clone()),
        preprocessing: Some(cfg.eval.preproc.name().into()),
        modalities: vec!["depth".into()],
        seeds: vec![cfg.seed],
        split: split.fingerprint(),
        note: format!("single split, C = {c}"),
    };
    log::info!("eval {layer}: accuracy {:.4} (C = {c})", report.overall_accuracy);
    write_file(&cfg.out("reports/eval.csv"), &csv_bytes(|w| write_reports_csv(&[&report], w)))?;
    write_json(&cfg.out("reports/eval.json"), &report)?;
    Ok(report)
}

pub fn ablate(cfg: &PipelineConfig) -> Result<AblationGrid, PipelineError> {
    cfg.validate()?;
    let (net, meta) = load_trained(cfg)?;
    let data = load_dataset(cfg)?;
    check_classes(&meta, &data)?;
    let split = make_split(cfg, &data.records)?;
    let grid = run_ablation(
        &net,
        &data.images,
        &data.labels,
        &data.class_names,
        &split,
        &cfg.eval.ablation_layers,
        &cfg.eval.ablation_preprocs,
        &cfg.eval_config(),
    )?;
    let reports: Vec<&EvalReport> = grid.cells.iter().map(|c| &c.report).collect();
    write_file(&cfg.out("reports/ablation.csv"), &csv_bytes(|w| write_reports_csv(&reports, w)))?;
    write_json(&cfg.out("reports/ablation.json"), &grid)?;
    Ok(grid)
}

/// MKL fusion of the two configured feature sources. Fixed `p` and `c`
/// replace the cross-validated grids.
pub fn fuse(cfg: &PipelineConfig, p: Option<f64>, c: Option<f64>) -> Result<FusionReport, PipelineError> {
    cfg.validate()?;
    let mut ec = cfg.eval_config();
    if let Some(p) = p {
        if !(p >= 1.0) {
            return Err(FusionError::BadHyperparam(format!("p = {p}")).into());
        }
        ec.p_grid = vec![p];
    }
    if let Some(c) = c {
        if !(c > 0.0) {
            return Err(FusionError::BadC(c).into());
        }
        ec.c_grid = vec![c];
    }
    let (net, meta) = load_trained(cfg)?;
    let data = load_dataset(cfg)?;
    check_classes(&meta, &data)?;
    let split = make_split(cfg, &data.records)?;
    let (l1, p1) = parse_source(&cfg.eval.fuse_first)?;
    let (l2, p2) = parse_source(&cfg.eval.fuse_second)?;
    let first = features(&net, &data.images, &l1, p1)?;
    let second = features(&net, &data.images, &l2, p2)?;
    let mut report = run_fusion_eval(&first, &second, &data.labels, &data.class_names, &split, &ec)?;
    let names = [cfg.eval.fuse_first.clone(), cfg.eval.fuse_second.clone()];
    report.first.fingerprint.modalities = vec![names[0].clone()];
    report.second.fingerprint.modalities = vec![names[1].clone()];
    report.fused.fingerprint.modalities = names.to_vec();
    log::info!(
        "fusion: {:.4} / {:.4} -> {:.4} (beta {:?})",
        report.first.overall_accuracy,
        report.second.overall_accuracy,
        report.fused.overall_accuracy,
        report.beta
    );
    let reports = [&report.first, &report.second, &report.fused];
    write_file(&cfg.out("reports/fusion.csv"), &csv_bytes(|w| write_reports_csv(&reports, w)))?;
    write_json(&cfg.out("reports/fusion.json"), &report)?;
    Ok(report)
}

/// Writes `per_class` morphed instances of every primitive class as
/// `<dir>/<class>/<class>_<k>.obj`.
pub fn write_primitive_models(dir: &Path, per_class: usize, seed: u64) -> Result<Vec<ModelEntry>, PipelineError> {
    let mut out = Vec::new();
    for class in PRIMITIVE_CLASSES {
        let base = primitives::by_name(class).expect("known primitive");
        let class_dir = dir.join(class);
        create_dir(&class_dir)?;
        let mut rng = rng::rng_from(&[seed, rng::hash_str(class), 0x696e7374]);
        for k in 0..per_class {
            let scales = [0; 3].map(|_| 1.0 + rng.random_range(-MAX_MORPH..=MAX_MORPH));
            let mesh = morph_mesh(&base, &MorphParams::new(scales)?)?;
            let path = class_dir.join(format!("{class}_{k}.obj"));
            save_mesh(&mesh, &path)?;
            out.push(ModelEntry {
                class_label: class.to_string(),
                model_id: format!("{class}_{k}"),
                path,
            });
        }
    }
    Ok(out)
}

pub const DEMO_INSTANCES: usize = 8;

#[derive(Debug, Clone)]
pub struct DemoSummary {
    pub gen: GenSummary,
    pub train: TrainSummary,
    pub report: EvalReport,
}

/// The toy benchmark from scratch: primitive models, renders, training and a
/// linear SVM on the configured layer. Models go to `<output>/models`.
pub fn demo(cfg: &PipelineConfig) -> Result<DemoSummary, PipelineError> {
    let mut cfg = cfg.clone();
    cfg.paths.models = cfg.out("models");
    if cfg.paths.models.exists() {
        fs::remove_dir_all(&cfg.paths.models).map_err(io_err(&cfg.paths.models))?;
    }
    write_primitive_models(&cfg.paths.models, DEMO_INSTANCES, cfg.seed)?;
    let gen_summary = gen(&cfg)?;
    let train_summary = train(&cfg)?;
    let report = eval(&cfg)?;
    write_file(
        &cfg.out("final_report.csv"),
        final_report(&cfg, &gen_summary, &train_summary, &report).as_bytes(),
    )?;
    Ok(DemoSummary {
        gen: gen_summary,
        train: train_summary,
        report,
    })
}

fn final_report(cfg: &PipelineConfig, g: &GenSummary, t: &TrainSummary, r: &EvalReport) -> String {
    let mut rows: Vec<(String, String)> = vec![
        ("seed".into(), cfg.seed.to_string()),
        ("classes".into(), r.class_names.len().to_string()),
        ("models".into(), g.rows.len().to_string()),
        ("configs_per_model".into(), cfg.render.count.to_string()),
        ("rendered".into(), g.rendered.to_string()),
        ("kept".into(), g.kept.to_string()),
        (
            "near_duplicate_fraction".into(),
            format!("{:.6}", 1.0 - g.kept as f64 / g.rendered.max(1) as f64),
        ),
        ("train_samples".into(), t.train_samples.to_string()),
        ("test_samples".into(), t.test_samples.to_string()),
        ("epochs".into(), t.curve.len().to_string()),
    ];
    if let Some(last) = t.curve.last() {
        rows.push(("final_train_loss".into(), format!("{:.6}", last.loss)));
        rows.push(("final_train_accuracy".into(), format!("{:.6}", last.train_acc)));
    }
    rows.push(("layer".into(), cfg.eval.layer.clone()));
    rows.push(("test_accuracy".into(), format!("{:.6}", r.overall_accuracy)));
    if let Some(m) = r.mean_class_accuracy() {
        rows.push(("mean_class_accuracy".into(), format!("{m:.6}")));
    }
    for (name, acc) in r.class_names.iter().zip(&r.per_class_accuracy) {
        let v = acc.map_or("".into(), |a| format!("{a:.6}"));
        rows.push((format!("accuracy_{name}"), v));
    }
    let mut s = String::from("metric,value\n");
    for (k, v) in rows {
        s.push_str(&format!("{k},{v}\n"));
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferResult {
    pub held_out: String,
    pub layer_accuracy: Vec<(String, f64)>,
}

impl TransferResult {
    pub fn accuracy(&self, layer: &str) -> Option<f64> {
        self.layer_accuracy.iter().find(|(l, _)| l == layer).map(|x| x.1)
    }
}

#[allow(clippy::too_many_arguments)]
/// Trains on every class but `held_out`, then scores a held-out-vs-rest
/// linear SVM on each layer's features over the same split.
pub fn transfer_ablation(
    spec_name: &str,
    data: &Dataset,
    split: &Split,
    held_out: &str,
    layers: &[String],
    tc: &TrainConfig,
    ec: &EvalConfig,
    init_seed: u64,
) -> Result<TransferResult, PipelineError> {
    if !data.class_names.iter().any(|c| c == held_out) {
        return Err(NetError::LabelUnknown(held_out.to_string()).into());
    }
    let seen: Vec<String> = data.class_names.iter().filter(|c| *c != held_out).cloned().collect();
    let train_idx: Vec<usize> = split
        .train
        .iter()
        .copied()
        .filter(|&i| data.records[i].class_label != held_out)
        .collect();
    let (net, _) = train_on(spec_name, data, &train_idx, &seen, tc, init_seed)?;
    let binary: Vec<usize> = data
        .records
        .iter()
        .map(|r| usize::from(r.class_label == held_out))
        .collect();
    let names = vec!["rest".to_string(), held_out.to_string()];
    let test_labels: Vec<usize> = split.test.iter().map(|&i| binary[i]).collect();
    let mut layer_accuracy = Vec::new();
    for layer in layers {
        let feats = features(&net, &data.images, layer, tc.preproc)?;
        let (pred, _) = svm_predict(&feats, &binary, split, ec)?;
        let acc = evaluate(&pred, &test_labels, &names)?.overall_accuracy;
        log::info!("transfer {held_out} {layer}: {acc:.4}");
        layer_accuracy.push((layer.clone(), acc));
    }
    Ok(TransferResult {
        held_out: held_out.to_string(),
        layer_accuracy,
    })
}

pub fn write_text(path: &Path, text: &str) -> Result<(), PipelineError> {
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(text.as_bytes()).map_err(io_err(path))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trip() {
        let mut cfg = PipelineConfig::with_seed(7);
        cfg.split.split_file = Some("split.txt".into());
        cfg.eval.c_grid = vec![0.1, 3.5];
        cfg.augment.z_alpha_range = (0.9, 1.1);
        let text = cfg.to_text().unwrap();
        let back = PipelineConfig::parse(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_text().unwrap(), text);
    }

    #[test]
    fn seed_is_mandatory() {
        let err = PipelineConfig::parse("[render]\ncount = 3\n").unwrap_err();
        assert!(err.to_string().contains("seed"), "{err}");
        let cfg = PipelineConfig::parse("seed = 3\n").unwrap();
        assert_eq!(cfg, PipelineConfig::with_seed(3));
    }

    #[test]
    fn config_errors_name_field() {
        for (text, field) in [
            ("seed = 1\n[render]\ncount = 0\n", "render.count"),
            ("seed = 1\n[net]\nspec = \"alexnet\"\n", "net.spec"),
            ("seed = 1\n[eval]\nfuse_first = \"pool_last\"\n", "pool_last"),
            ("seed = 1\n[render]\nresolutoin = 3\n", "resolutoin"),
        ] {
            let err = PipelineConfig::parse(text).unwrap_err();
            assert!(matches!(err, PipelineError::Config(_)), "{err}");
            assert!(err.to_string().contains(field), "{err}");
        }
    }

    #[test]
    fn relative_paths_follow_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        write_text(&path, "seed = 2\n[paths]\nmodels = \"m\"\noutput = \"/abs/out\"\n").unwrap();
        let cfg = PipelineConfig::load(&path).unwrap();
        assert_eq!(cfg.paths.models, dir.path().join("m"));
        assert_eq!(cfg.paths.output, PathBuf::from("/abs/out"));
    }

    fn small_config(root: &Path) -> PipelineConfig {
        let mut cfg = PipelineConfig::with_seed(11);
        cfg.paths.models = root.join("models");
        cfg.paths.output = root.join("out");
        cfg.render.resolution = 64;
        cfg.render.count = 6;
        cfg.train.total_epochs = 1;
        cfg.train.first_step_epochs = 1;
        cfg.eval.c_grid = vec![1.0];
        cfg.eval.cv_folds = 2;
        cfg
    }

    #[test]
    fn discover_sorted_and_filtered() {
        let dir = tempfile::tempdir().unwrap();
        assert!(discover_models(dir.path()).is_err());
        let entries = write_primitive_models(dir.path(), 2, 5).unwrap();
        write_text(&dir.path().join("box/readme.txt"), "x").unwrap();
        let found = discover_models(dir.path()).unwrap();
        let mut sorted = entries.clone();
        sorted.sort_by(|a, b| (&a.class_label, &a.model_id).cmp(&(&b.class_label, &b.model_id)));
        assert_eq!(found, sorted);
        assert_eq!(found[0].class_label, "box");
    }

    #[test]
    fn gen_then_dedup_report() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_config(dir.path());
        write_primitive_models(&cfg.paths.models, 1, 3).unwrap();
        let summary = gen(&cfg).unwrap();
        assert_eq!(summary.rendered, 5 * 6);
        let manifest = load_manifest(&manifest_path(&cfg)).unwrap();
        assert_eq!(manifest.len(), summary.kept);
        assert_eq!(summary.kept, summary.rows.iter().map(|r| r.kept).sum::<usize>());
        for r in &manifest {
            assert!(r.path.is_relative());
            assert!(cfg.paths.output.join(&r.path).is_file());
        }
        let again = dedup_report(&cfg, cfg.render.dedup_threshold).unwrap();
        assert_eq!(again, summary.rows);
        let none = dedup_report(&cfg, 0).unwrap();
        assert!(none.iter().zip(&again).all(|(a, b)| a.kept >= b.kept));
        let all = dedup_report(&cfg, 64).unwrap();
        assert!(all.iter().all(|r| r.kept == 1));
    }

    #[test]
    fn stages_chain() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_config(dir.path());
        write_primitive_models(&cfg.paths.models, 2, 3).unwrap();
        gen(&cfg).unwrap();
        assert!(matches!(eval(&cfg), Err(PipelineError::Io { .. })));
        let t = train(&cfg).unwrap();
        assert_eq!(t.curve.len(), 1);
        let (net, meta) = load_trained(&cfg).unwrap();
        assert_eq!(meta.classes.len(), 5);
        assert_eq!(net.num_classes(), 5);
        let path = extract(&cfg, "fc6", Preproc::MinMax).unwrap();
        assert!(path.ends_with("features/fc6_minmax.bin"));
        let err = extract(&cfg, "fc9", Preproc::Raw).unwrap_err();
        assert!(matches!(err, PipelineError::Net(NetError::UnknownLayer(_))));
        assert_eq!(err.to_string(), "convnet: unknown layer `fc9`");
        let report = eval(&cfg).unwrap();
        assert_eq!(report.support.iter().sum::<usize>(), t.test_samples);
        assert!(cfg.out("reports/eval.csv").is_file());
        let fused = fuse(&cfg, Some(2.0), Some(1.0)).unwrap();
        assert_eq!(fused.mkl_p, 2.0);
        assert!(fuse(&cfg, Some(0.5), None).is_err());
    }
}
