use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use tubeseg::augment::NormalizationStats;
use tubeseg::data::{
    generate_dataset, kfold_split, write_image, write_instances, DatasetManifest, Palette, SyntheticSceneSpec,
};
use tubeseg::pipeline::{
    checkpoint_precision, cross_validate, eval_manifests, infer_files, load_samples, overlay, train, InferOptions,
    Sample, TrainConfig, Trainer,
};
use tubeseg::postprocess::{read_seeds, split_touching, SeedParams};
use tubeseg::{Error, Precision, Real};

#[derive(Parser)]
#[command(name = "tubeseg", version, about = "Tubule epithelium segmentation")]
struct Cli {
    /// Log more (-v: debug, -vv: trace).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset and its manifest.
    Generate(GenerateArgs),
    /// Compute per-channel normalization statistics of a dataset.
    Stats(StatsArgs),
    /// Train one model.
    Train(TrainArgs),
    /// k-fold cross-validation with per-fold and aggregate metrics.
    CrossValidate(CrossValidateArgs),
    /// Segment images with a trained checkpoint.
    Infer(InferArgs),
    /// Score a prediction manifest against a ground-truth manifest.
    Eval(EvalArgs),
    /// Split a class mask into instances with the seeded watershed.
    Postprocess(PostprocessArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum OnOff {
    On,
    Off,
}

impl OnOff {
    fn as_bool(self) -> bool {
        matches!(self, OnOff::On)
    }
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 40)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// pas | he
    #[arg(long, default_value = "pas")]
    palette: Palette,
    #[arg(long, default_value_t = 128)]
    width: usize,
    #[arg(long, default_value_t = 128)]
    height: usize,
    /// Probability that a tubule is placed touching another one.
    #[arg(long)]
    touching: Option<f64>,
    /// Minimum and maximum tubule count per scene.
    #[arg(long, num_args = 2, value_names = ["MIN", "MAX"])]
    tubules: Option<Vec<usize>>,
    /// Minimum and maximum outer tubule radius, in pixels.
    #[arg(long, num_args = 2, value_names = ["MIN", "MAX"])]
    radius: Option<Vec<f64>>,
    /// Split tag written to every record.
    #[arg(long, default_value = "all")]
    split: String,
}

#[derive(Args)]
struct StatsArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Only records with this split tag.
    #[arg(long)]
    split: Option<String>,
}

/// Settings shared by `train` and `cross-validate`. Later sources win:
/// preset, then `--config`, then `--set`, then the dedicated flags.
#[derive(Args)]
struct ConfigArgs {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Start from the full-size network and 60-epoch schedule.
    #[arg(long)]
    paper_scale: bool,
    /// Override one setting, e.g. `--set network.base_width=8`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// none | low | high
    #[arg(long)]
    augment: Option<String>,
    #[arg(long)]
    tta: Option<OnOff>,
    /// 2 or 3
    #[arg(long)]
    classes: Option<usize>,
    /// dice_wce | tversky
    #[arg(long)]
    loss: Option<String>,
    /// f32 | f64
    #[arg(long)]
    precision: Option<String>,
}

impl ConfigArgs {
    fn build(&self) -> Result<TrainConfig, Error> {
        let mut c = if self.paper_scale { TrainConfig::paper() } else { TrainConfig::desk() };
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            c.apply_text(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        }
        for kv in &self.set {
            let (k, v) =
                kv.split_once('=').ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
            c.set(k.trim(), v)?;
        }
        let flags = [
            ("epochs", self.epochs.map(|v| v.to_string())),
            ("learning_rate", self.lr.map(|v| v.to_string())),
            ("seed", self.seed.map(|v| v.to_string())),
            ("augmentation", self.augment.clone()),
            ("tta", self.tta.map(|v| v.as_bool().to_string())),
            ("num_classes", self.classes.map(|v| v.to_string())),
            ("loss", self.loss.clone()),
            ("precision", self.precision.clone()),
        ];
        for (k, v) in flags {
            if let Some(v) = v {
                c.set(k, &v)?;
            }
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Output directory for the log, checkpoints and the effective config.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    /// Hold out this fold for validation (with `--folds`). Without it,
    /// records tagged `val` validate and all others train.
    #[arg(long, requires = "folds")]
    fold: Option<usize>,
    #[arg(long)]
    folds: Option<usize>,
    /// Normalization statistics file from `stats`, instead of computing them.
    #[arg(long)]
    stats: Option<PathBuf>,
    /// Continue from a checkpoint; its stored configuration is used.
    #[arg(long, conflicts_with_all = ["config", "paper_scale", "set", "stats"])]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct CrossValidateArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 5)]
    folds: usize,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct SeedArgs {
    /// Minimum distance between automatic seeds, in pixels.
    #[arg(long)]
    min_distance: Option<f64>,
    /// Minimum depth of the dip separating two automatic seeds.
    #[arg(long)]
    min_dynamic: Option<f64>,
}

impl SeedArgs {
    fn params(&self) -> SeedParams {
        let d = SeedParams::default();
        SeedParams {
            min_distance: self.min_distance.unwrap_or(d.min_distance),
            min_dynamic: self.min_dynamic.unwrap_or(d.min_dynamic),
        }
    }
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// An image or a directory of images.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Defaults to the checkpoint's setting.
    #[arg(long)]
    tta: Option<OnOff>,
    #[command(flatten)]
    seeds: SeedArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    /// Metrics CSV to write; printed to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 2)]
    classes: usize,
}

#[derive(Args)]
struct PostprocessArgs {
    /// Class mask PNG (0 background, 1 epithelium, 2 border).
    #[arg(long)]
    mask: PathBuf,
    /// Instance map PNG to write.
    #[arg(long)]
    out: PathBuf,
    /// Seed file with one `x y` pair per line.
    #[arg(long, conflicts_with = "auto_seeds")]
    seeds: Option<PathBuf>,
    /// Place seeds at distance-transform maxima (the default).
    #[arg(long)]
    auto_seeds: bool,
    #[command(flatten)]
    seed_params: SeedArgs,
    /// Also write an overlay of the instance outlines on this image.
    #[arg(long, requires = "overlay_out")]
    image: Option<PathBuf>,
    #[arg(long)]
    overlay_out: Option<PathBuf>,
}

fn create_dir(dir: &Path) -> Result<(), Error> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn generate(a: GenerateArgs) -> Result<(), Error> {
    let d = SyntheticSceneSpec::default();
    let spec = SyntheticSceneSpec {
        width: a.width,
        height: a.height,
        palette: a.palette,
        touching_probability: a.touching.unwrap_or(d.touching_probability),
        tubules: a.tubules.map_or(d.tubules, |t| (t[0], t[1])),
        outer_radius: a.radius.map_or(d.outer_radius, |r| (r[0], r[1])),
        ..d
    };
    spec.validate()?;
    create_dir(&a.out)?;
    let m = generate_dataset(&a.out, a.count, a.seed, &spec, &a.split)?;
    println!("wrote {} records to {}", m.len(), a.out.join("manifest.tsv").display());
    Ok(())
}

fn stats(a: StatsArgs) -> Result<(), Error> {
    let mut m = DatasetManifest::load(&a.manifest)?;
    if let Some(split) = &a.split {
        m = m.with_split(split);
    }
    let images = (0..m.len()).map(|i| m.read_image(i)).collect::<Result<Vec<_>, _>>()?;
    let s = NormalizationStats::from_images(&images)?;
    s.save(&a.out)?;
    println!("mean {:?} std {:?} over {} images", s.mean, s.std, images.len());
    Ok(())
}

fn train_run<T: Real>(a: &TrainArgs, config: Option<TrainConfig>) -> Result<(), Error> {
    let manifest = DatasetManifest::load(&a.manifest)?;
    manifest.validate()?;
    let classes = match &config {
        Some(c) => c.num_classes(),
        None => Trainer::<T>::load(a.resume.as_ref().expect("resume path"))?.config.num_classes(),
    };
    let (train_ids, val_ids): (Vec<usize>, Vec<usize>) = match (a.fold, a.folds) {
        (Some(f), Some(k)) => {
            let seed = config.as_ref().map_or(0, |c| c.seed);
            let split = kfold_split(manifest.len(), k, seed)?;
            if f >= k {
                return Err(Error::Config(format!("fold {f} out of range for {k} folds")));
            }
            (split.training(f), split.validation(f).to_vec())
        }
        _ => (0..manifest.len()).partition(|&i| !matches!(manifest.records[i].split.as_str(), "val" | "validation")),
    };
    let train_set: Vec<Sample> = load_samples(&manifest, &train_ids, classes)?;
    let val_set: Vec<Sample> = load_samples(&manifest, &val_ids, classes)?;
    let trainer = match config {
        Some(c) => {
            let mut t = Trainer::<T>::new(c, &train_set)?;
            if let Some(p) = &a.stats {
                t.stats = NormalizationStats::load(p)?;
            }
            t
        }
        None => Trainer::<T>::load(a.resume.as_ref().expect("resume path"))?,
    };
    create_dir(&a.out)?;
    tubeseg::data::write_atomic(&a.out.join("config.txt"), trainer.config.to_text().as_bytes())?;
    log::info!("training on {} records, validating on {}", train_set.len(), val_set.len());
    let done = train(trainer, &train_set, &val_set, Some(&a.out))?;
    match done.best {
        Some((e, f)) => println!("finished {} epochs; best validation F-score {f:.4} at epoch {e}", done.epoch),
        None => println!("finished {} epochs", done.epoch),
    }
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<(), Error> {
    if let Some(ckpt) = &a.resume {
        return match checkpoint_precision(ckpt)? {
            Precision::F32 => train_run::<f32>(&a, None),
            Precision::F64 => train_run::<f64>(&a, None),
        };
    }
    let config = a.config.build()?;
    match config.precision {
        Precision::F32 => train_run::<f32>(&a, Some(config)),
        Precision::F64 => train_run::<f64>(&a, Some(config)),
    }
}

fn cross_validate_cmd(a: CrossValidateArgs) -> Result<(), Error> {
    let config = a.config.build()?;
    let manifest = DatasetManifest::load(&a.manifest)?;
    manifest.validate()?;
    let samples = load_samples(&manifest, &(0..manifest.len()).collect::<Vec<_>>(), config.num_classes())?;
    create_dir(&a.out)?;
    tubeseg::data::write_atomic(&a.out.join("config.txt"), config.to_text().as_bytes())?;
    let cv = match config.precision {
        Precision::F32 => cross_validate::<f32>(&samples, &config, a.folds, Some(&a.out))?,
        Precision::F64 => cross_validate::<f64>(&samples, &config, a.folds, Some(&a.out))?,
    };
    for (f, s) in &cv.report.folds {
        println!("fold {f}: IoU {:.4} F {:.4} AJI {:.4}", s.iou, s.fscore, s.aji);
    }
    let (m, ci) = (cv.report.mean, cv.report.ci95.expect("at least two folds"));
    println!(
        "mean: IoU {:.4} +/- {:.4}  F {:.4} +/- {:.4}  AJI {:.4} +/- {:.4}",
        m.iou, ci.iou, m.fscore, ci.fscore, m.aji, ci.aji
    );
    println!("metrics written to {}", a.out.join("metrics.csv").display());
    Ok(())
}

fn infer_cmd(a: InferArgs) -> Result<(), Error> {
    let tta = match a.tta {
        Some(t) => t.as_bool(),
        None => {
            let text = std::fs::read(&a.checkpoint).map_err(|e| Error::io(&a.checkpoint, e))?;
            // the header is plain text; the setting is read without loading tensors
            let header = String::from_utf8_lossy(&text[..text.len().min(1 << 16)]).into_owned();
            !header.lines().any(|l| l == "config.tta false")
        }
    };
    let opts = InferOptions { tta, seeds: a.seeds.params() };
    create_dir(&a.out)?;
    let m = match checkpoint_precision(&a.checkpoint)? {
        Precision::F32 => infer_files::<f32>(&a.checkpoint, &a.input, &a.out, opts)?,
        Precision::F64 => infer_files::<f64>(&a.checkpoint, &a.input, &a.out, opts)?,
    };
    println!("segmented {} images into {}", m.len(), a.out.display());
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> Result<(), Error> {
    let pred = DatasetManifest::load(&a.pred)?;
    let gt = DatasetManifest::load(&a.gt)?;
    let report = eval_manifests(&pred, &gt, a.classes)?;
    match &a.out {
        Some(path) => {
            report.save_csv(path)?;
            println!(
                "IoU {:.4} F {:.4} AJI {:.4} over {} images",
                report.mean.iou,
                report.mean.fscore,
                report.mean.aji,
                report.images.len()
            );
        }
        None => report.write_csv(std::io::stdout().lock())?,
    }
    Ok(())
}

fn postprocess_cmd(a: PostprocessArgs) -> Result<(), Error> {
    let mask = tubeseg::data::read_mask(&a.mask)?;
    let seeds = a.seeds.as_deref().map(read_seeds).transpose()?;
    let instances = split_touching(&mask, seeds.as_deref(), a.seed_params.params())?;
    write_instances(&a.out, &instances)?;
    if let (Some(img), Some(out)) = (&a.image, &a.overlay_out) {
        let image = tubeseg::data::read_image(img)?;
        if image.dimensions() != (mask.width() as u32, mask.height() as u32) {
            return Err(Error::Invalid(format!("{} does not match the mask extent", img.display())));
        }
        write_image(out, &overlay(&image, &mask, &instances))?;
    }
    println!("{} instances", instances.count());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match cli.command {
        Command::Generate(a) => generate(a),
        Command::Stats(a) => stats(a),
        Command::Train(a) => train_cmd(a),
        Command::CrossValidate(a) => cross_validate_cmd(a),
        Command::Infer(a) => infer_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Postprocess(a) => postprocess_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ Error::Config(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
