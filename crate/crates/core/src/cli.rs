//! The `siamnet` command line: split, train, eval, gradcheck, filters, plus
//! synthetic data generation and replay of an echoed run configuration.
//!
//! Every run writes `<subcommand>_config.json` into `--out-dir` holding all
//! effective argument values; `siamnet replay <file>` re-runs it.

use std::path::{Path, PathBuf};

use clap::{ArgAction, Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::dataio::{self, synthetic, ImageGeometry, PartGeometry, Protocol, Split, SplitSpec, SPLIT_REPEATS};
use crate::error::{Error, Result};
use crate::eval;
use crate::filters;
use crate::gradcheck::{self, Module};
use crate::scnn::{NetworkConfig, NetworkParams, SharingMode};
use crate::trainer::{self, CostKind, TrainConfig};

#[derive(Debug, Clone, PartialEq, Parser, Serialize, Deserialize)]
#[command(name = "siamnet", version, about = "Part-based siamese CNN for person re-identification")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct GlobalArgs {
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads for feature extraction and batch processing.
    #[arg(long, global = true, env = "SIAMNET_THREADS")]
    pub threads: Option<usize>,
    #[arg(long, global = true, default_value = ".")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Subcommand, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    /// Render a synthetic two-camera dataset (PNG files plus manifest.csv).
    Synth(SynthArgs),
    /// Write split files for a manifest.
    Split(SplitArgs),
    /// Train a network on the training subjects of a split.
    Train(TrainArgs),
    /// Score probe against gallery and write the mean CMC curve.
    Eval(EvalArgs),
    /// Run finite-difference gradient checks.
    Gradcheck(GradcheckArgs),
    /// Render the first-layer filters of a model.
    Filters(FiltersArgs),
    /// Re-run a command from its config echo file.
    Replay(ReplayArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Synth(_) => "synth",
            Command::Split(_) => "split",
            Command::Train(_) => "train",
            Command::Eval(_) => "eval",
            Command::Gradcheck(_) => "gradcheck",
            Command::Filters(_) => "filters",
            Command::Replay(_) => "replay",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Args, Serialize, Deserialize)]
pub struct GeometryArgs {
    /// Image height after resizing.
    #[arg(long, default_value_t = 128)]
    pub height: usize,
    /// Image width after resizing.
    #[arg(long, default_value_t = 48)]
    pub width: usize,
}

impl GeometryArgs {
    pub fn image(&self) -> ImageGeometry {
        ImageGeometry {
            height: self.height,
            width: self.width,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 40)]
    pub subjects: usize,
    #[arg(long, default_value_t = 1)]
    pub images_per_camera: usize,
    #[arg(long, default_value_t = 48)]
    pub height: usize,
    #[arg(long, default_value_t = 16)]
    pub width: usize,
    /// Pixel noise standard deviation in 0..255 units.
    #[arg(long, default_value_t = 12.0)]
    pub noise: f64,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct SplitArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, value_enum, default_value_t = Protocol::ViperStyle)]
    pub protocol: Protocol,
    #[arg(long, default_value_t = SPLIT_REPEATS)]
    pub repeats: usize,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub split: PathBuf,
    #[arg(long, value_enum, default_value_t = CostKind::Deviance)]
    pub cost: CostKind,
    #[arg(long, value_enum, default_value_t = SharingMode::General)]
    pub mode: SharingMode,
    #[arg(long, default_value_t = 2.0)]
    pub neg_cost: f64,
    #[arg(long, default_value_t = 2.0)]
    pub alpha: f64,
    #[arg(long, default_value_t = 0.5)]
    pub beta: f64,
    #[arg(long, default_value_t = 180)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.01)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    #[arg(long, default_value_t = 5e-4)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = 128)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 64)]
    pub c1_channels: usize,
    #[arg(long, default_value_t = 64)]
    pub c3_channels: usize,
    #[arg(long, default_value_t = 500)]
    pub feature_dim: usize,
    #[command(flatten)]
    pub geometry: GeometryArgs,
    /// Add horizontally mirrored copies of the training images.
    #[arg(long, action = ArgAction::Set, default_value_t = true)]
    pub mirror_augment: bool,
    /// Record the cost on the split's test images after every epoch.
    #[arg(long)]
    pub dev: bool,
    /// Update only the fully connected layers.
    #[arg(long)]
    pub freeze_convolutions: bool,
    #[arg(long, default_value = "model.snet")]
    pub model_out: PathBuf,
    #[arg(long, default_value = "epochs.csv")]
    pub log_out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct EvalArgs {
    /// Comma-separated model files; scores are summed across models.
    #[arg(long, value_delimiter = ',', required = true)]
    pub models: Vec<PathBuf>,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Comma-separated split files; the CMC curve is averaged across them.
    #[arg(long, alias = "splits", value_delimiter = ',', required = true)]
    pub split: Vec<PathBuf>,
    #[arg(long, action = ArgAction::Set, default_value_t = true)]
    pub mirror_fusion: bool,
    #[command(flatten)]
    pub geometry: GeometryArgs,
    #[arg(long, default_value = "cmc.csv")]
    pub cmc_out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct GradcheckArgs {
    #[arg(long, value_enum)]
    pub module: Module,
    #[arg(long, default_value_t = 20)]
    pub trials: usize,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct FiltersArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value = "filters.png")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct ReplayArgs {
    /// A `<subcommand>_config.json` written by an earlier run.
    pub config: PathBuf,
}

fn output(global: &GlobalArgs, path: &Path) -> PathBuf {
    global.out_dir.join(path)
}

fn write_echo(cli: &Cli) -> Result<PathBuf> {
    let path = cli.global.out_dir.join(format!("{}_config.json", cli.command.name()));
    let json = serde_json::to_string_pretty(cli).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

pub fn read_echo(path: &Path) -> Result<Cli> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Executes a parsed command line; returns the text to print on success.
pub fn run(cli: &Cli) -> Result<String> {
    if let Command::Replay(r) = &cli.command {
        let echoed = read_echo(&r.config)?;
        if matches!(echoed.command, Command::Replay(_)) {
            return Err(Error::Usage("cannot replay a replay".into()));
        }
        return run(&echoed);
    }
    std::fs::create_dir_all(&cli.global.out_dir).map_err(|e| Error::io(&cli.global.out_dir, e))?;
    write_echo(cli)?;
    let g = &cli.global;
    let work = || match &cli.command {
        Command::Synth(a) => cmd_synth(g, a),
        Command::Split(a) => cmd_split(g, a),
        Command::Train(a) => cmd_train(g, a),
        Command::Eval(a) => cmd_eval(g, a),
        Command::Gradcheck(a) => cmd_gradcheck(g, a),
        Command::Filters(a) => cmd_filters(g, a),
        Command::Replay(_) => unreachable!("handled above"),
    };
    match g.threads {
        Some(0) => Err(Error::Usage("--threads must be at least 1".into())),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Usage(e.to_string()))?
            .install(work),
        None => work(),
    }
}

pub fn cmd_synth(g: &GlobalArgs, a: &SynthArgs) -> Result<String> {
    let cfg = synthetic::SyntheticConfig {
        subjects: a.subjects,
        images_per_camera: a.images_per_camera,
        geometry: ImageGeometry {
            height: a.height,
            width: a.width,
        },
        noise_std: a.noise,
        seed: g.seed,
        ..Default::default()
    };
    let manifest = synthetic::write_dataset(&g.out_dir, &cfg)?;
    Ok(format!("wrote {}", manifest.display()))
}

/// Name of the split file for a repeat index.
pub fn split_file_name(repeat: usize) -> String {
    format!("split_{repeat:02}.csv")
}

pub fn cmd_split(g: &GlobalArgs, a: &SplitArgs) -> Result<String> {
    if a.repeats == 0 {
        return Err(Error::Usage("--repeats must be at least 1".into()));
    }
    let dataset = dataio::load_manifest(&a.manifest, ImageGeometry::default())?;
    let mut lines = Vec::new();
    for repeat in 0..a.repeats {
        let split = dataio::make_split(
            &dataset,
            &SplitSpec {
                protocol: a.protocol,
                repeat,
                seed: g.seed,
            },
        )?;
        let path = g.out_dir.join(split_file_name(repeat));
        split.write_csv(&path)?;
        lines.push(format!(
            "{}: train {} probe {} gallery {}",
            path.display(),
            split.train.len(),
            split.probe.len(),
            split.gallery.len()
        ));
    }
    Ok(lines.join("\n"))
}

/// Training hyperparameters implied by the command-line arguments.
pub fn train_config(g: &GlobalArgs, a: &TrainArgs) -> TrainConfig {
    TrainConfig {
        alpha: a.alpha,
        beta: a.beta,
        negative_cost: a.neg_cost,
        batch_size: a.batch_size,
        epochs: a.epochs,
        learning_rate: a.lr,
        momentum: a.momentum,
        weight_decay: a.weight_decay,
        seed: g.seed,
        cost_kind: a.cost,
        mode: a.mode,
        freeze_convolutions: a.freeze_convolutions,
    }
}

pub fn cmd_train(g: &GlobalArgs, a: &TrainArgs) -> Result<String> {
    let config = train_config(g, a);
    config.validate()?;
    let parts = PartGeometry::for_height(a.geometry.height)?;
    let network = NetworkConfig {
        part_height: parts.band_height,
        part_width: a.geometry.width,
        c1_channels: a.c1_channels,
        c3_channels: a.c3_channels,
        feature_dim: a.feature_dim,
        ..NetworkConfig::default()
    };
    network.validate()?;
    let dataset = dataio::load_manifest(&a.manifest, a.geometry.image())?;
    let sets = Split::read_csv(&a.split)?.apply(&dataset)?;
    let train_images = if a.mirror_augment {
        dataio::augment_with_mirrors(&sets.train)
    } else {
        sets.train
    };
    let train_samples = trainer::prepare_samples(&train_images, &parts)?;
    let dev_samples = if a.dev {
        let mut held_out = sets.probe;
        held_out.extend(sets.gallery);
        Some(trainer::prepare_samples(&held_out, &parts)?)
    } else {
        None
    };
    let params = NetworkParams::init(network, config.mode, config.seed)?;
    let outcome = trainer::train_from(&config, params, &train_samples, dev_samples.as_deref(), |r| {
        eprintln!(
            "epoch {:>4} train {:.6}{} ({:.1}s)",
            r.epoch,
            r.train_cost,
            r.dev_cost.map(|d| format!(" dev {d:.6}")).unwrap_or_default(),
            r.seconds
        );
    })?;
    let model_path = output(g, &a.model_out);
    outcome.params.save(&model_path)?;
    let log_path = output(g, &a.log_out);
    trainer::write_epoch_csv(&log_path, &outcome.history)?;
    Ok(format!(
        "trained {} epochs on {} images; model {}; log {}",
        outcome.history.len(),
        train_samples.len(),
        model_path.display(),
        log_path.display()
    ))
}

pub fn cmd_eval(g: &GlobalArgs, a: &EvalArgs) -> Result<String> {
    let models = a
        .models
        .iter()
        .map(|p| NetworkParams::load(p))
        .collect::<Result<Vec<_>>>()?;
    let parts = PartGeometry::for_height(a.geometry.height)?;
    for (m, path) in models.iter().zip(&a.models) {
        let c = m.config();
        if c.part_height != parts.band_height || c.part_width != a.geometry.width {
            return Err(Error::Format(format!(
                "{} expects {}x{} parts but --height {} --width {} gives {}x{}",
                path.display(),
                c.part_height,
                c.part_width,
                a.geometry.height,
                a.geometry.width,
                parts.band_height,
                a.geometry.width
            )));
        }
    }
    let dataset = dataio::load_manifest(&a.manifest, a.geometry.image())?;
    let mut curves = Vec::new();
    for split_path in &a.split {
        let sets = Split::read_csv(split_path)?.apply(&dataset)?;
        let table = eval::score_set(&models, &sets.probe, &sets.gallery, &parts, a.mirror_fusion)?;
        curves.push(eval::cmc(&table)?);
    }
    let curve = eval::aggregate_splits(&curves)?;
    let path = output(g, &a.cmc_out);
    curve.write_csv(&path)?;
    let mut summary: Vec<String> = [1, 5, 10, 20]
        .into_iter()
        .filter(|&k| k <= curve.ranks())
        .map(|k| format!("rank-{k} {:.2}%", 100.0 * curve.rate(k)))
        .collect();
    summary.push(format!("over {} split(s); {}", curves.len(), path.display()));
    Ok(summary.join("  "))
}

pub fn cmd_gradcheck(g: &GlobalArgs, a: &GradcheckArgs) -> Result<String> {
    if a.trials == 0 {
        return Err(Error::Usage("--trials must be at least 1".into()));
    }
    let report = gradcheck::run(a.module, a.trials, g.seed)?;
    let text = report.to_string();
    let path = g.out_dir.join("gradcheck_report.txt");
    std::fs::write(&path, &text).map_err(|e| Error::io(&path, e))?;
    print!("{text}");
    report.into_result()?;
    Ok(format!("all targets under threshold; {}", path.display()))
}

pub fn cmd_filters(g: &GlobalArgs, a: &FiltersArgs) -> Result<String> {
    let params = NetworkParams::load(&a.model)?;
    let path = output(g, &a.out);
    let grid = filters::write_filter_grid(&params, &path)?;
    Ok(format!(
        "{}x{} grid of {} filters ({}x{} px) written to {}",
        grid.columns,
        grid.rows,
        grid.order.len(),
        grid.width,
        grid.height,
        path.display()
    ))
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(&cli) {
        Ok(msg) => {
            println!("{msg}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
