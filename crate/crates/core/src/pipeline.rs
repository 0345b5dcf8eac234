//! End-to-end stages over one output directory. Each stage reads what the
//! previous ones wrote and leaves artifacts plus `<stage>.json`, a summary
//! carrying the resolved configuration.
//!
//! Layout under the root:
//!
//! ```text
//! data/{train,test}/   images, masks, parts, saliency, manifest.json
//! model/               checkpoint
//! maps/{cam,adv}/      image-resolution maps, <item>_c<class>.atns
//! seeds/{cam,adv}/     label PNGs; seeds/pseudo/ with saliency
//! viz/                 figures
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::atns;
use crate::attribution::{AttributionMap, Resolution};
use crate::classifier::{argmax, Architecture, ClassifierModel, LabeledImage, TrainConfig};
use crate::climb::{run_climb, saliency_background, ClimbConfig, ClimbTrace, Direction, Task};
use crate::diagnostics::{loss_landscape, pixel_amplification, Amplification, ClassificationLoss};
use crate::error::{Error, Result};
use crate::eval::{max_box_acc_v2, proportion_of_noise, top1_localization, BBox, BoxAccuracy, ConfusionCounts};
use crate::eval::{MiouReport, NoiseCounts, PrfReport, DEFAULT_IOU_THRESHOLDS};
use crate::graph::LossMode;
use crate::imageio::{self, load_dataset, load_labels, load_saliency, load_seed, save_dataset, save_seed, write_json, Dataset};
use crate::seeds::{best_threshold_sweep, default_theta_grid, pseudo_gt_with_saliency, seed_from_maps, SeedMask};
use crate::synth::{generate, SynthConfig};
use crate::tensor::{Grid, Tensor};
use crate::viz;

pub const SUMMARY_SCHEMA: u32 = 1;

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "ADVCAM_OUT";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Multi-object scenes, multi-label model, segmentation seeds.
    #[default]
    Seg,
    /// One object per scene, single-label model, boxes.
    Loc,
}

impl Mode {
    pub fn task(self) -> Task {
        match self {
            Mode::Seg => Task::Segmentation,
            Mode::Loc => Task::Localization,
        }
    }

    pub fn loss_mode(self) -> LossMode {
        match self {
            Mode::Seg => LossMode::MultiLabel,
            Mode::Loc => LossMode::SingleLabel,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub channels: Vec<usize>,
    pub kernel: usize,
    pub pool: usize,
    pub input_mean: f64,
    pub input_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let a = Architecture::new(1, 2);
        ModelConfig {
            channels: a.channels,
            kernel: a.kernel,
            pool: a.pool,
            input_mean: a.input_mean,
            input_std: a.input_std,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClimbSettings {
    pub steps: usize,
    pub xi: f64,
    /// Unset means the default of the mode.
    pub lambda: Option<f64>,
    pub tau: f64,
    pub suppress_others: bool,
    pub direction: Direction,
}

impl Default for ClimbSettings {
    fn default() -> Self {
        let c = ClimbConfig::default();
        ClimbSettings {
            steps: c.steps,
            xi: c.step_size,
            lambda: None,
            tau: c.tau,
            suppress_others: c.suppress_other_classes,
            direction: c.direction,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeedSettings {
    pub theta_grid: Vec<f64>,
    /// Fixed seed threshold; skips the sweep.
    pub threshold: Option<f64>,
}

impl Default for SeedSettings {
    fn default() -> Self {
        SeedSettings {
            theta_grid: default_theta_grid(),
            threshold: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VizSettings {
    pub images: usize,
    pub scale: usize,
    pub landscape_grid: usize,
    pub landscape_radius: f64,
    pub histogram_bins: usize,
}

impl Default for VizSettings {
    fn default() -> Self {
        VizSettings {
            images: 4,
            scale: 4,
            landscape_grid: 21,
            landscape_radius: 2.0,
            histogram_bins: 40,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub mode: Mode,
    /// Master seed; overrides the generator and training seeds.
    pub seed: u64,
    pub train_images: usize,
    pub test_images: usize,
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub climb: ClimbSettings,
    pub seeds: SeedSettings,
    /// Directory of saliency PNGs named like the test images.
    pub saliency: Option<PathBuf>,
    pub iou_thresholds: Vec<f64>,
    pub viz: VizSettings,
    /// Size of the worker pool; unset uses rayon's default.
    pub workers: Option<usize>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            mode: Mode::Seg,
            seed: 0,
            train_images: 200,
            test_images: 50,
            synth: SynthConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            climb: ClimbSettings::default(),
            seeds: SeedSettings::default(),
            saliency: None,
            iou_thresholds: DEFAULT_IOU_THRESHOLDS.to_vec(),
            viz: VizSettings::default(),
            workers: None,
        }
    }
}

impl PipelineConfig {
    /// Fills mode-dependent defaults and propagates the master seed.
    pub fn resolved(&self) -> PipelineConfig {
        let mut c = self.clone();
        c.synth.seed = c.seed;
        c.train.seed = c.seed;
        if c.mode == Mode::Loc {
            c.synth = c.synth.single_object();
        }
        if c.climb.lambda.is_none() {
            c.climb.lambda = Some(ClimbConfig::for_task(c.mode.task()).lambda);
        }
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.climb_config().validate()?;
        if self.train_images == 0 || self.test_images == 0 {
            return Err(Error::Config("image counts must be positive".into()));
        }
        let grid = &self.seeds.theta_grid;
        if grid.is_empty() || grid.iter().any(|t| !(*t > 0.0 && *t < 1.0)) {
            return Err(Error::Config("theta grid values must lie in (0, 1)".into()));
        }
        if let Some(t) = self.seeds.threshold {
            if !(t > 0.0 && t < 1.0) {
                return Err(Error::Config("seed threshold must lie in (0, 1)".into()));
            }
        }
        if self.iou_thresholds.iter().any(|d| !(*d > 0.0 && *d <= 1.0)) {
            return Err(Error::Config("IoU thresholds must lie in (0, 1]".into()));
        }
        if self.workers == Some(0) {
            return Err(Error::Config("worker count must be positive".into()));
        }
        Ok(())
    }

    pub fn architecture(&self) -> Architecture {
        let mut a = Architecture::new(self.synth.channels, self.synth.classes);
        a.channels = self.model.channels.clone();
        a.kernel = self.model.kernel;
        a.pool = self.model.pool;
        a.input_mean = self.model.input_mean;
        a.input_std = self.model.input_std;
        a
    }

    /// Climbing hyperparameters without a saliency mask.
    pub fn climb_config(&self) -> ClimbConfig {
        let mut c = ClimbConfig::for_task(self.mode.task());
        c.steps = self.climb.steps;
        c.step_size = self.climb.xi;
        if let Some(l) = self.climb.lambda {
            c.lambda = l;
        }
        c.tau = self.climb.tau;
        c.suppress_other_classes = self.climb.suppress_others;
        c.direction = self.climb.direction;
        c
    }

    fn theta_grid(&self) -> Vec<f64> {
        match self.seeds.threshold {
            Some(t) => vec![t],
            None => self.seeds.theta_grid.clone(),
        }
    }
}

/// Paths of every artifact under an output root.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Layout { root: root.into() }
    }

    /// `ADVCAM_OUT` when set, else `./advcam-out`.
    pub fn from_env() -> Self {
        Layout::new(std::env::var_os(OUT_ENV).map(PathBuf::from).unwrap_or_else(|| "advcam-out".into()))
    }

    pub fn manifest(&self, split: &str) -> PathBuf {
        self.root.join("data").join(split).join("manifest.json")
    }

    pub fn model(&self) -> PathBuf {
        self.root.join("model")
    }

    pub fn map(&self, kind: &str, item: usize, class: usize) -> PathBuf {
        self.root.join("maps").join(kind).join(format!("{item:05}_c{class}.atns"))
    }

    pub fn seeds(&self, kind: &str) -> PathBuf {
        self.root.join("seeds").join(kind)
    }

    pub fn viz(&self) -> PathBuf {
        self.root.join("viz")
    }

    /// `path` relative to the root when it lies below it, so summaries do
    /// not depend on where the root is.
    pub fn relative(&self, path: &Path) -> PathBuf {
        path.strip_prefix(&self.root).map(Path::to_path_buf).unwrap_or_else(|_| path.to_path_buf())
    }

    pub fn summary(&self, stage: &str) -> PathBuf {
        self.root.join(format!("{stage}.json"))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Summary<T> {
    pub schema: u32,
    pub stage: String,
    pub config: PipelineConfig,
    pub result: T,
}

fn finish<T: Serialize>(layout: &Layout, stage: &str, cfg: &PipelineConfig, result: T) -> Result<Summary<T>> {
    let s = Summary {
        schema: SUMMARY_SCHEMA,
        stage: stage.to_string(),
        config: cfg.clone(),
        result,
    };
    write_json(&s, &layout.summary(stage))?;
    Ok(s)
}

/// Runs `f` on a pool of `workers` threads, or on the global pool.
pub fn with_workers<T: Send>(workers: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match workers {
        None => Ok(f()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

fn split_config(cfg: &PipelineConfig, split: &str) -> SynthConfig {
    let mut s = cfg.synth.clone();
    if split == "test" {
        s.seed ^= 1 << 32;
    }
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenResult {
    pub train_images: usize,
    pub test_images: usize,
    pub train_manifest: PathBuf,
    pub test_manifest: PathBuf,
}

pub fn gen_data(cfg: &PipelineConfig, layout: &Layout) -> Result<Summary<GenResult>> {
    for (split, count) in [("train", cfg.train_images), ("test", cfg.test_images)] {
        let synth = split_config(cfg, split);
        let scenes = generate(&synth, count)?;
        let dir = layout.manifest(split).parent().expect("manifest has a parent").to_path_buf();
        save_dataset(&dir, split, &synth, &scenes)?;
    }
    let result = GenResult {
        train_images: cfg.train_images,
        test_images: cfg.test_images,
        train_manifest: layout.relative(&layout.manifest("train")),
        test_manifest: layout.relative(&layout.manifest("test")),
    };
    finish(layout, "gen-data", cfg, result)
}

fn labeled(ds: &Dataset) -> Vec<LabeledImage> {
    ds.scenes
        .iter()
        .map(|s| LabeledImage {
            image: s.image.clone(),
            labels: s.labels.clone(),
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainResult {
    pub loss_curve: Vec<f64>,
    pub train_accuracy: f64,
    pub test_accuracy: Option<f64>,
    pub parameters: usize,
}

pub fn train(cfg: &PipelineConfig, layout: &Layout) -> Result<Summary<TrainResult>> {
    let train_set = load_dataset(&layout.manifest("train"))?;
    check_classes(cfg, &train_set)?;
    let names = train_set.manifest.class_names.clone();
    let mut model = ClassifierModel::init(cfg.architecture(), cfg.mode.loss_mode(), names, cfg.seed)?;
    let report = model.train(&labeled(&train_set), &cfg.train)?;
    model.save(&layout.model())?;
    let test_accuracy = match layout.manifest("test").exists() {
        true => Some(model.accuracy(&labeled(&load_dataset(&layout.manifest("test"))?))?),
        false => None,
    };
    let result = TrainResult {
        loss_curve: report.loss_curve,
        train_accuracy: report.train_accuracy,
        test_accuracy,
        parameters: model.arch.parameter_count(),
    };
    finish(layout, "train", cfg, result)
}

fn check_classes(cfg: &PipelineConfig, ds: &Dataset) -> Result<()> {
    if ds.classes() != cfg.synth.classes {
        return Err(Error::Config(format!(
            "dataset has {} classes but the configuration has {}",
            ds.classes(),
            cfg.synth.classes
        )));
    }
    if cfg.mode == Mode::Loc && ds.scenes.iter().any(|s| s.labels.len() != 1) {
        return Err(Error::Config("localization mode needs one object per image".into()));
    }
    Ok(())
}

/// Loads the checkpoint and rejects one trained for the other mode.
pub fn load_model(cfg: &PipelineConfig, layout: &Layout) -> Result<ClassifierModel> {
    let model = ClassifierModel::load(&layout.model())?;
    if model.mode != cfg.mode.loss_mode() {
        return Err(Error::Config(format!(
            "{:?} mode needs a {:?} model but the checkpoint is {:?}",
            cfg.mode,
            cfg.mode.loss_mode(),
            model.mode
        )));
    }
    if model.classes() != cfg.synth.classes {
        return Err(Error::Config(format!(
            "checkpoint has {} classes but the configuration has {}",
            model.classes(),
            cfg.synth.classes
        )));
    }
    Ok(model)
}

fn saliency_for(cfg: &PipelineConfig, ds: &Dataset, item: usize) -> Result<Option<Grid<bool>>> {
    let Some(dir) = &cfg.saliency else { return Ok(None) };
    let name = ds.manifest.items[item]
        .saliency
        .file_name()
        .ok_or_else(|| Error::Config("saliency entry without a file name".into()))?;
    load_saliency(&dir.join(name)).map(Some)
}

/// Climbs every labeled class of one image; the saliency mask, if any, is
/// at image resolution.
pub fn climb_image(
    model: &ClassifierModel,
    image: &Tensor,
    classes: &[usize],
    config: &ClimbConfig,
    saliency: Option<&Grid<bool>>,
) -> Result<Vec<ClimbTrace>> {
    let (_, _, h, w) = image.dims4()?;
    let mut config = config.clone();
    if let Some(fg) = saliency {
        let (fh, fw) = model.arch.feature_extent(h, w);
        config.saliency_background = Some(saliency_background(fg, fh, fw)?);
    }
    classes.iter().map(|&c| run_climb(model, image, c, &config)).collect()
}

/// Image-resolution normalized maps for seeding and boxes.
pub fn seed_maps(trace: &ClimbTrace, height: usize, width: usize) -> Result<(AttributionMap, AttributionMap)> {
    let cam = trace.initial_map().upsample(height, width)?.normalize();
    let adv = trace.final_map.upsample(height, width)?.normalize();
    Ok((cam, adv))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClimbRecord {
    pub item: usize,
    pub class: usize,
    pub initial_logit: f64,
    pub final_logit: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClimbResult {
    pub steps: usize,
    pub maps: usize,
    pub saliency: bool,
    pub records: Vec<ClimbRecord>,
}

pub fn climb(cfg: &PipelineConfig, layout: &Layout) -> Result<Summary<ClimbResult>> {
    let model = load_model(cfg, layout)?;
    let test = load_dataset(&layout.manifest("test"))?;
    check_classes(cfg, &test)?;
    let config = cfg.climb_config();
    let n = cfg.synth.image_size;
    let records = with_workers(cfg.workers, || {
        (0..test.scenes.len())
            .into_par_iter()
            .map(|i| {
                let s = &test.scenes[i];
                let sal = saliency_for(cfg, &test, i)?;
                let traces = climb_image(&model, &s.image, &s.labels, &config, sal.as_ref())?;
                let mut out = Vec::with_capacity(traces.len());
                for tr in &traces {
                    let (cam, adv) = seed_maps(tr, n, n)?;
                    atns::save(&map_tensor(&cam), &layout.map("cam", i, tr.class))?;
                    atns::save(&map_tensor(&adv), &layout.map("adv", i, tr.class))?;
                    out.push(ClimbRecord {
                        item: i,
                        class: tr.class,
                        initial_logit: tr.steps[0].logits[tr.class],
                        final_logit: tr.steps.last().expect("trace has steps").logits[tr.class],
                    });
                }
                Ok(out)
            })
            .collect::<Result<Vec<_>>>()
    })??;
    let records: Vec<ClimbRecord> = records.into_iter().flatten().collect();
    let result = ClimbResult {
        steps: config.steps,
        maps: records.len(),
        saliency: cfg.saliency.is_some(),
        records,
    };
    finish(layout, "climb", cfg, result)
}

fn map_tensor(m: &AttributionMap) -> Tensor {
    Tensor::from_fn(&[m.values.height, m.values.width], |i| m.values.data[i])
}

fn read_map(path: &Path, class: usize) -> Result<AttributionMap> {
    let t = atns::load(path)?;
    let shape = t.shape().to_vec();
    if shape.len() != 2 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: 0,
            msg: format!("expected a 2-D map, found shape {shape:?}"),
        });
    }
    Ok(AttributionMap {
        class,
        step: 0,
        values: Grid::from_vec(shape[0], shape[1], t.data().to_vec())?,
        normalized: true,
        resolution: Resolution::Image,
    })
}

/// Per-image maps of kind `cam` or `adv` as written by `climb`.
pub fn load_maps(layout: &Layout, ds: &Dataset, kind: &str) -> Result<Vec<Vec<AttributionMap>>> {
    ds.scenes
        .iter()
        .enumerate()
        .map(|(i, s)| s.labels.iter().map(|&c| read_map(&layout.map(kind, i, c), c)).collect())
        .collect()
}

fn gt_seeds(ds: &Dataset) -> Vec<SeedMask> {
    ds.scenes.iter().map(|s| SeedMask::new(s.mask.clone())).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub best_theta: f64,
    pub best_miou: f64,
    pub curve: Vec<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub cam: SweepRecord,
    pub adv: SweepRecord,
    pub pseudo_labels: bool,
}

pub fn seed(cfg: &PipelineConfig, layout: &Layout) -> Result<Summary<SeedResult>> {
    let test = load_dataset(&layout.manifest("test"))?;
    check_classes(cfg, &test)?;
    let gt = gt_seeds(&test);
    let grid = cfg.theta_grid();
    let mut records = Vec::new();
    for kind in ["cam", "adv"] {
        let maps = load_maps(layout, &test, kind)?;
        let sweep = best_threshold_sweep(&maps, &gt, cfg.synth.classes, &grid)?;
        let dir = layout.seeds(kind);
        with_workers(cfg.workers, || {
            maps.par_iter()
                .enumerate()
                .map(|(i, m)| -> Result<()> {
                    let seed = seed_or_background(m, sweep.best_theta, gt[i].dims())?;
                    save_seed(&seed, &dir.join(format!("{i:05}.png")))?;
                    if kind == "adv" {
                        if let Some(fg) = saliency_for(cfg, &test, i)? {
                            let pseudo = pseudo_gt_with_saliency(&seed, &fg)?;
                            save_seed(&pseudo, &layout.seeds("pseudo").join(format!("{i:05}.png")))?;
                        }
                    }
                    Ok(())
                })
                .collect::<Result<()>>()
        })??;
        records.push(SweepRecord {
            best_theta: sweep.best_theta,
            best_miou: sweep.best_miou,
            curve: sweep.curve,
        });
    }
    let adv = records.pop().expect("two sweeps");
    let cam = records.pop().expect("two sweeps");
    let result = SeedResult {
        cam,
        adv,
        pseudo_labels: cfg.saliency.is_some(),
    };
    finish(layout, "seed", cfg, result)
}

fn seed_or_background(maps: &[AttributionMap], theta: f64, dims: (usize, usize)) -> Result<SeedMask> {
    if maps.is_empty() {
        return Ok(SeedMask::new(Grid::filled(dims.0, dims.1, crate::seeds::BACKGROUND)));
    }
    seed_from_maps(maps, theta)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegEntry {
    pub name: String,
    pub pred: PathBuf,
    pub images: usize,
    pub miou: MiouReport,
    pub prf: PrfReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSegResult {
    pub gt: PathBuf,
    pub entries: Vec<SegEntry>,
    /// Newly localized pixels of the adversarial seeds relative to the CAM
    /// seeds, when both were evaluated.
    pub noise: Option<NoiseCounts>,
}

/// Label PNGs of `pred` scored against same-named files in `gt`. Without
/// `pred`, both seed directories are scored against the test masks.
pub fn eval_seg(
    cfg: &PipelineConfig,
    layout: &Layout,
    pred: Option<&Path>,
    gt: Option<&Path>,
) -> Result<Summary<EvalSegResult>> {
    let gt_dir = match gt {
        Some(d) => d.to_path_buf(),
        None => layout.manifest("test").with_file_name("masks"),
    };
    let preds: Vec<(String, PathBuf)> = match pred {
        Some(p) => vec![("pred".into(), p.to_path_buf())],
        None => vec![("cam".into(), layout.seeds("cam")), ("adv".into(), layout.seeds("adv"))],
    };
    let mut entries = Vec::new();
    let mut loaded = Vec::new();
    for (name, dir) in preds {
        let (p, g) = load_pairs(&dir, &gt_dir)?;
        let mut counts = ConfusionCounts::new(cfg.synth.classes);
        for (a, b) in p.iter().zip(&g) {
            counts.add(a, b)?;
        }
        entries.push(SegEntry {
            name,
            pred: layout.relative(&dir),
            images: p.len(),
            miou: counts.miou(),
            prf: counts.precision_recall_f1(),
        });
        loaded.push((p, g));
    }
    let noise = match loaded.as_slice() {
        [(cam, g), (adv, _)] => {
            let mut total = NoiseCounts::default();
            for ((c, a), g) in cam.iter().zip(adv).zip(g) {
                let per = proportion_of_noise(&[c.clone(), a.clone()], g)?;
                total.add(per[per.len() - 1]);
            }
            Some(total)
        }
        _ => None,
    };
    let result = EvalSegResult {
        gt: layout.relative(&gt_dir),
        entries,
        noise,
    };
    finish(layout, "eval-seg", cfg, result)
}

fn png_names(dir: &Path) -> Result<Vec<String>> {
    let mut names: Vec<String> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".png"))
        .collect();
    names.sort();
    Ok(names)
}

fn load_pairs(pred: &Path, gt: &Path) -> Result<(Vec<SeedMask>, Vec<SeedMask>)> {
    let names = png_names(pred)?;
    if names.is_empty() {
        return Err(Error::Config(format!("{}: no label PNGs to evaluate", pred.display())));
    }
    let mut p = Vec::with_capacity(names.len());
    let mut g = Vec::with_capacity(names.len());
    for n in &names {
        p.push(load_seed(&pred.join(n))?);
        g.push(SeedMask::new(load_labels(&gt.join(n))?));
    }
    Ok((p, g))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocEntry {
    pub name: String,
    pub max_box_acc_v2: BoxAccuracy,
    pub gt_known: f64,
    pub top1: f64,
    /// Threshold used for `gt_known` and `top1`.
    pub theta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalLocResult {
    pub classification_accuracy: f64,
    pub entries: Vec<LocEntry>,
}

pub fn eval_loc(cfg: &PipelineConfig, layout: &Layout) -> Result<Summary<EvalLocResult>> {
    if cfg.mode != Mode::Loc {
        return Err(Error::Config("eval-loc needs localization mode".into()));
    }
    let model = load_model(cfg, layout)?;
    let test = load_dataset(&layout.manifest("test"))?;
    check_classes(cfg, &test)?;
    let truth: Vec<usize> = test.scenes.iter().map(|s| s.labels[0]).collect();
    let predicted = with_workers(cfg.workers, || {
        test.scenes
            .par_iter()
            .map(|s| model.logits(&s.image).map(|z| argmax(&z)))
            .collect::<Result<Vec<_>>>()
    })??;
    let boxes: Vec<BBox> = test
        .manifest
        .items
        .iter()
        .map(|it| imageio::item_boxes(it)[0])
        .collect();
    let grid = cfg.theta_grid();
    let mut entries = Vec::new();
    for kind in ["cam", "adv"] {
        let maps: Vec<Grid<f64>> = load_maps(layout, &test, kind)?
            .into_iter()
            .map(|mut m| m.remove(0).values)
            .collect();
        let acc = max_box_acc_v2(&maps, &boxes, &cfg.iou_thresholds, &grid)?;
        let (gt_known, theta) = match acc.per_threshold.iter().find(|d| d.iou_threshold == 0.5) {
            Some(d) => (d.accuracy, d.best_theta),
            None => {
                let a = max_box_acc_v2(&maps, &boxes, &[0.5], &grid)?;
                (a.per_threshold[0].accuracy, a.per_threshold[0].best_theta)
            }
        };
        let top1 = top1_localization(&predicted, &truth, &maps, &boxes, 0.5, theta)?;
        entries.push(LocEntry {
            name: kind.into(),
            max_box_acc_v2: acc,
            gt_known,
            top1,
            theta,
        });
    }
    let hits = predicted.iter().zip(&truth).filter(|(p, t)| p == t).count();
    let result = EvalLocResult {
        classification_accuracy: hits as f64 / truth.len().max(1) as f64,
        entries,
    };
    finish(layout, "eval-loc", cfg, result)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VizResult {
    pub files: Vec<PathBuf>,
    pub median_amplification_discriminative: Option<f64>,
    pub median_amplification_non_discriminative: Option<f64>,
}

pub fn visualize(cfg: &PipelineConfig, layout: &Layout) -> Result<Summary<VizResult>> {
    let model = load_model(cfg, layout)?;
    let test = load_dataset(&layout.manifest("test"))?;
    let config = cfg.climb_config();
    let dir = layout.viz();
    let n = cfg.synth.image_size;
    let count = cfg.viz.images.min(test.scenes.len());
    let s = cfg.viz.scale;
    let mut files = Vec::new();
    let mut amp = Amplification::default();
    for i in 0..count {
        let scene = &test.scenes[i];
        let sal = saliency_for(cfg, &test, i)?;
        let class = scene.labels[0];
        let trace = &climb_image(&model, &scene.image, &[class], &config, sal.as_ref())?[0];
        let (_, adv) = seed_maps(trace, n, n)?;
        let stem = format!("{i:05}_c{class}");
        let overlay = dir.join(format!("{stem}_advcam.png"));
        viz::save_overlay(&scene.image, &adv.values, &overlay)?;
        let strip = dir.join(format!("{stem}_steps.png"));
        let cams: Vec<Grid<f64>> = trace.steps.iter().map(|st| st.normalized_cam()).collect();
        viz::save_strip(&cams, s, &strip)?;
        files.extend([overlay, strip]);
        amp.extend(pixel_amplification(trace, trace.steps.len() - 1)?);
        if i == 0 {
            let labels = scene.labels.clone();
            let loss = ClassificationLoss {
                model: &model,
                labels: &labels,
            };
            let last = &trace.steps[trace.steps.len() - 1].image;
            for (name, x) in [("initial", &scene.image), ("climbed", last)] {
                let l = loss_landscape(&loss, x, cfg.viz.landscape_grid, cfg.viz.landscape_radius, cfg.seed)?;
                let csv = dir.join(format!("landscape_{name}.csv"));
                let png = dir.join(format!("landscape_{name}.png"));
                viz::save_landscape_csv(&l, &csv)?;
                viz::save_landscape_png(&l, s, &png)?;
                files.extend([csv, png]);
            }
        }
    }
    let series: [(&str, &[f64]); 2] = [
        ("discriminative", &amp.discriminative),
        ("non_discriminative", &amp.non_discriminative),
    ];
    let hi = amp
        .discriminative
        .iter()
        .chain(&amp.non_discriminative)
        .copied()
        .filter(|v| v.is_finite())
        .fold(1.0, f64::max);
    let bins = cfg.viz.histogram_bins;
    let csv = dir.join("amplification.csv");
    let png = dir.join("amplification.png");
    viz::save_histogram_csv(&series, bins, 0.0, hi, &csv)?;
    viz::save_histogram_png(&series, bins, 0.0, hi, &png)?;
    files.extend([csv, png]);
    let result = VizResult {
        files: files.iter().map(|f| layout.relative(f)).collect(),
        median_amplification_discriminative: amp.median_discriminative(),
        median_amplification_non_discriminative: amp.median_non_discriminative(),
    };
    finish(layout, "viz", cfg, result)
}
