use std::path::{Path, PathBuf};
use std::process::ExitCode;

use advcam::climb::Direction;
use advcam::pipeline::{self, Layout, Mode, PipelineConfig};
use advcam::Error;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

/// Anti-adversarial climbing for class activation maps on synthetic data.
///
/// Configuration is layered: built-in defaults, then `--config`, then flags.
#[derive(Debug, Parser)]
#[command(name = "advcam", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    #[command(flatten)]
    opts: Overrides,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic train and test splits.
    GenData,
    /// Train the classifier on the train split.
    Train,
    /// Climb every labeled class of the test images and store the maps.
    Climb,
    /// Threshold the maps into seeds, sweeping the threshold grid.
    Seed,
    /// Score label PNGs against ground truth.
    EvalSeg {
        /// Directory of predicted label PNGs; defaults to both seed sets.
        #[arg(long)]
        pred: Option<PathBuf>,
        /// Directory of ground-truth label PNGs; defaults to the test masks.
        #[arg(long)]
        gt: Option<PathBuf>,
    },
    /// Box accuracy of the maps (localization mode).
    EvalLoc,
    /// Heatmaps, step strips, amplification histograms and loss landscapes.
    Viz,
    /// Every stage in order.
    Run,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Seg,
    Loc,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum DirectionArg {
    Climb,
    Attack,
}

#[derive(Debug, Args)]
struct Overrides {
    /// JSON configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output root [default: $ADVCAM_OUT or ./advcam-out].
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Progress messages on stderr.
    #[arg(short, long, global = true)]
    verbose: bool,

    /// Climbing steps T.
    #[arg(long, global = true)]
    steps: Option<usize>,
    /// Step size.
    #[arg(long, global = true)]
    xi: Option<f64>,
    /// Weight of the restricting-mask penalty.
    #[arg(long, global = true)]
    lambda: Option<f64>,
    /// Threshold of the restricting mask.
    #[arg(long, global = true)]
    tau: Option<f64>,
    #[arg(long, global = true, value_enum)]
    suppress_others: Option<Switch>,
    #[arg(long, global = true, value_enum)]
    direction: Option<DirectionArg>,
    /// Directory of saliency PNGs named like the test images.
    #[arg(long, global = true)]
    saliency: Option<PathBuf>,
    /// Fixed seed threshold instead of a sweep.
    #[arg(long, global = true)]
    mask_threshold: Option<f64>,
    /// Comma-separated seed thresholds to sweep.
    #[arg(long, global = true, value_delimiter = ',')]
    theta_grid: Option<Vec<f64>>,
    /// Comma-separated IoU thresholds for box accuracy.
    #[arg(long, global = true, value_delimiter = ',')]
    iou_thresholds: Option<Vec<f64>>,

    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[arg(long, global = true)]
    batch_size: Option<usize>,
    #[arg(long, global = true)]
    learning_rate: Option<f64>,
    /// Comma-separated conv block widths.
    #[arg(long, global = true, value_delimiter = ',')]
    model_channels: Option<Vec<usize>>,
    #[arg(long, global = true)]
    input_std: Option<f64>,

    #[arg(long, global = true)]
    train_images: Option<usize>,
    #[arg(long, global = true)]
    test_images: Option<usize>,
    #[arg(long, global = true)]
    classes: Option<usize>,
    #[arg(long, global = true)]
    image_size: Option<usize>,
    /// Image channels, 1 or 3.
    #[arg(long, global = true)]
    channels: Option<usize>,
    #[arg(long, global = true)]
    min_objects: Option<usize>,
    #[arg(long, global = true)]
    max_objects: Option<usize>,
    #[arg(long, global = true)]
    head_radius: Option<f64>,
    #[arg(long, global = true)]
    body_length: Option<f64>,
    #[arg(long, global = true)]
    body_width: Option<f64>,
    #[arg(long, global = true)]
    head_contrast: Option<f64>,
    #[arg(long, global = true)]
    body_contrast: Option<f64>,
    #[arg(long, global = true)]
    stripe_period: Option<f64>,
    #[arg(long, global = true)]
    noise: Option<f64>,
    #[arg(long, global = true)]
    background_variation: Option<f64>,
    #[arg(long, global = true)]
    distractors: Option<usize>,
    #[arg(long, global = true)]
    spacing: Option<usize>,

    /// Number of test images drawn by `viz`.
    #[arg(long, global = true)]
    viz_images: Option<usize>,
}

macro_rules! set {
    ($($src:expr => $dst:expr),* $(,)?) => {
        $(if let Some(v) = $src.clone() { $dst = v.into(); })*
    };
}

impl Overrides {
    fn apply(&self, c: &mut PipelineConfig) {
        set! {
            self.seed => c.seed,
            self.steps => c.climb.steps,
            self.xi => c.climb.xi,
            self.tau => c.climb.tau,
            self.theta_grid => c.seeds.theta_grid,
            self.iou_thresholds => c.iou_thresholds,
            self.epochs => c.train.epochs,
            self.batch_size => c.train.batch_size,
            self.learning_rate => c.train.learning_rate,
            self.model_channels => c.model.channels,
            self.input_std => c.model.input_std,
            self.train_images => c.train_images,
            self.test_images => c.test_images,
            self.classes => c.synth.classes,
            self.image_size => c.synth.image_size,
            self.channels => c.synth.channels,
            self.min_objects => c.synth.min_objects,
            self.max_objects => c.synth.max_objects,
            self.head_radius => c.synth.head_radius,
            self.body_length => c.synth.body_length,
            self.body_width => c.synth.body_width,
            self.head_contrast => c.synth.head_contrast,
            self.body_contrast => c.synth.body_contrast,
            self.stripe_period => c.synth.stripe_period,
            self.noise => c.synth.noise,
            self.background_variation => c.synth.background_variation,
            self.distractors => c.synth.distractors,
            self.spacing => c.synth.spacing,
            self.viz_images => c.viz.images,
        }
        if let Some(l) = self.lambda {
            c.climb.lambda = Some(l);
        }
        if let Some(t) = self.mask_threshold {
            c.seeds.threshold = Some(t);
        }
        if let Some(p) = &self.saliency {
            c.saliency = Some(p.clone());
        }
        if let Some(w) = self.workers {
            c.workers = Some(w);
        }
        if let Some(m) = self.mode {
            c.mode = match m {
                ModeArg::Seg => Mode::Seg,
                ModeArg::Loc => Mode::Loc,
            };
        }
        if let Some(s) = self.suppress_others {
            c.climb.suppress_others = matches!(s, Switch::On);
        }
        if let Some(d) = self.direction {
            c.climb.direction = match d {
                DirectionArg::Climb => Direction::Climb,
                DirectionArg::Attack => Direction::Attack,
            };
        }
    }
}

/// A failure with its exit code and a stable kind tag.
#[derive(Debug, Serialize)]
struct Failure {
    kind: &'static str,
    exit_code: u8,
    message: String,
}

impl Failure {
    fn usage(message: String) -> Self {
        Failure {
            kind: "usage",
            exit_code: 2,
            message,
        }
    }

    fn config(message: String) -> Self {
        Failure {
            kind: "config",
            exit_code: 4,
            message,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let (kind, exit_code) = match &e {
            Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => ("missing_file", 3),
            Error::Io { .. } => ("io", 3),
            Error::Config(_) => ("config", 4),
            Error::Format { .. } | Error::Image { .. } | Error::Json { .. } => ("malformed_input", 5),
            Error::InvalidArgument { .. } | Error::ShapeMismatch { .. } => ("invalid_argument", 6),
            Error::Placement { .. } => ("placement", 6),
            Error::NonFiniteGradient { .. } | Error::Divergence { .. } => ("numerical", 7),
            Error::NotInGraph => ("internal", 1),
        };
        Failure {
            kind,
            exit_code,
            message: e.to_string(),
        }
    }
}

fn load_config(opts: &Overrides) -> Result<PipelineConfig, Failure> {
    let mut c = match &opts.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Failure::from(Error::Io {
                path: path.clone(),
                source: e,
            }))?;
            serde_json::from_str(&text).map_err(|e| Failure::config(format!("{}: {e}", path.display())))?
        }
        None => PipelineConfig::default(),
    };
    opts.apply(&mut c);
    let c = c.resolved();
    c.validate().map_err(|e| Failure::config(e.to_string()))?;
    Ok(c)
}

fn run(cli: &Cli) -> Result<Vec<PathBuf>, Failure> {
    let cfg = load_config(&cli.opts)?;
    let layout = match &cli.opts.out {
        Some(p) => Layout::new(p),
        None => Layout::from_env(),
    };
    let stages: Vec<&str> = match &cli.command {
        Command::GenData => vec!["gen-data"],
        Command::Train => vec!["train"],
        Command::Climb => vec!["climb"],
        Command::Seed => vec!["seed"],
        Command::EvalSeg { .. } => vec!["eval-seg"],
        Command::EvalLoc => vec!["eval-loc"],
        Command::Viz => vec!["viz"],
        Command::Run => match cfg.mode {
            Mode::Seg => vec!["gen-data", "train", "climb", "seed", "eval-seg", "viz"],
            Mode::Loc => vec!["gen-data", "train", "climb", "seed", "eval-seg", "eval-loc", "viz"],
        },
    };
    let mut written = Vec::new();
    for stage in stages {
        if cli.opts.verbose {
            eprintln!("advcam: {stage}");
        }
        match stage {
            "gen-data" => drop(pipeline::gen_data(&cfg, &layout)?),
            "train" => drop(pipeline::train(&cfg, &layout)?),
            "climb" => drop(pipeline::climb(&cfg, &layout)?),
            "seed" => drop(pipeline::seed(&cfg, &layout)?),
            "eval-seg" => {
                let (pred, gt) = match &cli.command {
                    Command::EvalSeg { pred, gt } => (pred.as_deref(), gt.as_deref()),
                    _ => (None, None),
                };
                drop(pipeline::eval_seg(&cfg, &layout, pred, gt)?)
            }
            "eval-loc" => drop(pipeline::eval_loc(&cfg, &layout)?),
            "viz" => drop(pipeline::visualize(&cfg, &layout)?),
            _ => unreachable!("stage list is fixed"),
        }
        written.push(layout.summary(stage));
    }
    Ok(written)
}

fn report(f: &Failure) -> ExitCode {
    let record = serde_json::json!({ "error": f });
    eprintln!("{record}");
    ExitCode::from(f.exit_code)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => return report(&Failure::usage(e.to_string().trim_end().to_string())),
    };
    match run(&cli) {
        Ok(paths) => {
            for p in paths {
                println!("{}", display(&p));
            }
            ExitCode::SUCCESS
        }
        Err(f) => report(&f),
    }
}

fn display(p: &Path) -> String {
    p.display().to_string()
}
