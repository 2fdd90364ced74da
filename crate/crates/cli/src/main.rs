use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use codephys::codec::{train_stage1, Codec, CodecConfig};
use codephys::dataset::{self, GenConfig, LoadOptions, Sample};
use codephys::hr::{self, DEFAULT_BAND};
use codephys::report::{self, ReportOptions};
use codephys::stage2::{train_stage2, Stage2Config, Stage2Model, StepLog};
use codephys::synth::{degrade, DegradeKind, DegradeSpec};
use codephys::video::Rect;

const SEED_ENV: &str = "CODEPHYS_SEED";

#[derive(Parser)]
#[command(
    name = "codephys",
    version,
    about = "Codebook-based remote PPG from video"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic train/test dataset.
    GenData(GenArgs),
    /// Train the PPG codec and codebook on ground-truth signals.
    TrainStage1(Stage1Args),
    /// Train the video encoder against a frozen Stage I codebook.
    TrainStage2(Stage2Args),
    /// Evaluate a Stage II checkpoint on a split and write a report.
    Eval(EvalArgs),
    /// Predict the pulse signal and heart rate of one sample.
    Infer(InferArgs),
    /// Write a degraded copy of a dataset.
    Degrade(DegradeArgs),
}

#[derive(Args)]
struct Common {
    /// TOML file with settings for this command; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GenArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    frames: Option<usize>,
}

#[derive(Args)]
struct Stage1Args {
    #[command(flatten)]
    common: Common,
    /// Dataset root (its `train` split is used) or a split directory.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Narrow latent width suited to 32x32 toy clips.
    #[arg(long)]
    toy: bool,
}

#[derive(Args)]
struct Stage2Args {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data: PathBuf,
    /// Stage I checkpoint file or the directory holding `stage1.ckpt`.
    #[arg(long)]
    stage1: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Small frontend and faster schedule for 32x32 toy clips.
    #[arg(long)]
    toy: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    /// Stage II checkpoint file or the directory holding `stage2.ckpt`.
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Average heart rates over non-overlapping windows of this many seconds.
    #[arg(long)]
    clip_seconds: Option<f64>,
    #[arg(long)]
    plots: bool,
}

#[derive(Args)]
struct InferArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    ckpt: PathBuf,
    /// Sample directory with `frames/` and `meta`, or a bare frames directory.
    #[arg(long)]
    input: PathBuf,
    /// Frame rate when the input has no `meta` file.
    #[arg(long)]
    fps: Option<f64>,
}

#[derive(Args)]
struct DegradeArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data: PathBuf,
    /// blur, noise, resolution, occlusion, brightness or none.
    #[arg(long)]
    kind: Option<String>,
    /// Draw one parameter set per clip instead of one per frame.
    #[arg(long)]
    per_clip: bool,
}

#[derive(Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct GenSettings {
    seed: u64,
    n: usize,
    size: usize,
    frames: usize,
    hr_range: [f64; 2],
    test_fraction: f64,
}

impl Default for GenSettings {
    fn default() -> Self {
        let g = GenConfig::default();
        GenSettings {
            seed: g.seed,
            n: g.n,
            size: g.size,
            frames: g.t,
            hr_range: g.hr_range,
            test_fraction: g.test_fraction,
        }
    }
}

#[derive(Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct Stage1Settings {
    seed: u64,
    codec: CodecConfig,
}

#[derive(Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct Stage2Settings {
    seed: u64,
    stage2: Stage2Config,
}

#[derive(Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct EvalSettings {
    seed: u64,
    band: [f64; 2],
    clip_seconds: Option<f64>,
    plots: bool,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            seed: 0,
            band: DEFAULT_BAND,
            clip_seconds: None,
            plots: false,
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct DegradeSettings {
    seed: u64,
    kind: String,
    per_frame: bool,
}

impl Default for DegradeSettings {
    fn default() -> Self {
        DegradeSettings {
            seed: 0,
            kind: "none".into(),
            per_frame: true,
        }
    }
}

/// Settings from the config file (or defaults), then the seed override from
/// the environment; flags are applied by the caller afterwards.
fn base_settings<T: DeserializeOwned + Default>(
    common: &Common,
    seed: impl FnOnce(&mut T, u64),
) -> Result<T> {
    let mut settings = match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => T::default(),
    };
    let env_seed = match std::env::var(SEED_ENV) {
        Ok(v) => Some(
            v.parse::<u64>()
                .with_context(|| format!("{SEED_ENV}={v} is not an integer"))?,
        ),
        Err(_) => None,
    };
    if let Some(s) = common.seed.or(env_seed) {
        seed(&mut settings, s);
    }
    Ok(settings)
}

fn echo_config<T: Serialize>(out: &Path, command: &str, settings: &T) -> Result<()> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let body = toml::to_string(settings).context("serializing the effective config")?;
    let path = out.join("run_config.txt");
    std::fs::write(&path, format!("# codephys {command}\n{body}"))
        .with_context(|| format!("writing {}", path.display()))
}

/// A dataset root's `train` split, or the directory itself.
fn train_dir(data: &Path) -> PathBuf {
    let train = dataset::split_dir(data, dataset::Split::Train);
    if train.is_dir() {
        train
    } else {
        data.to_path_buf()
    }
}

fn resolve(path: &Path, file: &str) -> PathBuf {
    if path.is_dir() {
        path.join(file)
    } else {
        path.to_path_buf()
    }
}

fn load_samples(dir: &Path) -> Result<Vec<Sample>> {
    Ok(dataset::load_dataset_with(dir, &LoadOptions::default())?)
}

fn gen_data(args: GenArgs) -> Result<()> {
    let mut s: GenSettings = base_settings(&args.common, |s: &mut GenSettings, v| s.seed = v)?;
    if let Some(n) = args.n {
        s.n = n;
    }
    if let Some(size) = args.size {
        s.size = size;
    }
    if let Some(t) = args.frames {
        s.frames = t;
    }
    let out = &args.common.out;
    echo_config(out, "gen-data", &s)?;
    let cfg = GenConfig {
        n: s.n,
        size: s.size,
        t: s.frames,
        hr_range: s.hr_range,
        test_fraction: s.test_fraction,
        seed: s.seed,
    };
    let dirs = dataset::generate(out, &cfg)?;
    println!("wrote {} samples to {}", dirs.len(), out.display());
    Ok(())
}

fn run_stage1(args: Stage1Args) -> Result<()> {
    let mut s: Stage1Settings =
        base_settings(&args.common, |s: &mut Stage1Settings, v| s.seed = v)?;
    if args.toy {
        s.codec = CodecConfig {
            epochs: s.codec.epochs,
            ..CodecConfig::toy()
        };
    }
    if let Some(e) = args.epochs {
        s.codec.epochs = e;
    }
    if let Some(lr) = args.lr {
        s.codec.lr = lr;
    }
    let out = &args.common.out;
    echo_config(out, "train-stage1", &s)?;
    let samples = load_samples(&train_dir(&args.data))?;
    let signals = dataset::signal_windows(&samples, s.codec.t)?;
    log::info!(
        "stage 1: {} windows of {} samples",
        signals.len(),
        s.codec.t
    );
    let (codec, log) = train_stage1(&signals, &s.codec, s.seed)?;
    codec.save(&out.join("stage1.ckpt"))?;
    let mut csv = String::from("epoch,L_total,L_rec,L_feat\n");
    for (i, ((l, r), f)) in log
        .epoch_loss
        .iter()
        .zip(&log.epoch_rec)
        .zip(&log.epoch_feat)
        .enumerate()
    {
        csv.push_str(&format!("{i},{l},{r},{f}\n"));
    }
    std::fs::write(out.join("train_log.csv"), csv)?;
    println!("stage 1 checkpoint: {}", out.join("stage1.ckpt").display());
    Ok(())
}

fn run_stage2(args: Stage2Args) -> Result<()> {
    let stage1_path = resolve(&args.stage1, "stage1.ckpt");
    let stage1 = Codec::load(&stage1_path)?;
    let mut s: Stage2Settings =
        base_settings(&args.common, |s: &mut Stage2Settings, v| s.seed = v)?;
    if args.toy {
        s.stage2 = Stage2Config::toy(stage1.config.d);
    }
    if let Some(e) = args.epochs {
        s.stage2.epochs = e;
    }
    if let Some(lr) = args.lr {
        s.stage2.lr = lr;
    }
    let out = &args.common.out;
    echo_config(out, "train-stage2", &s)?;
    let bytes = std::fs::read(&stage1_path)?;
    let sha = codephys::checkpoint::sha256_hex(&bytes);
    let samples = load_samples(&train_dir(&args.data))?;
    let pairs = dataset::clip_windows(&samples, stage1.config.t);
    log::info!(
        "stage 2: {} clips of {} frames",
        pairs.len(),
        stage1.config.t
    );
    let (model, log) = train_stage2(&pairs, &stage1, sha, &s.stage2, s.seed)?;
    model.save(&out.join("stage2.ckpt"))?;
    let mut csv = format!("{}\n", StepLog::CSV_HEADER);
    for step in &log.steps {
        csv.push_str(&step.csv_row());
        csv.push('\n');
    }
    std::fs::write(out.join("train_log.csv"), csv)?;
    println!(
        "stage 2 checkpoint: {} ({} trainable parameters)",
        out.join("stage2.ckpt").display(),
        model.trainable_param_count()
    );
    Ok(())
}

fn run_eval(args: EvalArgs) -> Result<()> {
    let mut s: EvalSettings = base_settings(&args.common, |s: &mut EvalSettings, v| s.seed = v)?;
    if args.clip_seconds.is_some() {
        s.clip_seconds = args.clip_seconds;
    }
    s.plots |= args.plots;
    let out = &args.common.out;
    echo_config(out, "eval", &s)?;
    let model = Stage2Model::load(&resolve(&args.ckpt, "stage2.ckpt"))?;
    let samples = load_samples(&args.data)?;
    let results = report::evaluate(&model, &samples, s.band, s.clip_seconds)?;
    let params = model.inference_param_count();
    let opts = ReportOptions {
        plots: s.plots,
        band: Some(s.band),
        summary: vec![
            ("param_count".into(), params.to_string()),
            (
                "trainable_param_count".into(),
                model.trainable_param_count().to_string(),
            ),
        ],
    };
    let m = report::emit_report(&results, out, &opts)?;
    println!(
        "n={} mae={} rmse={} sd={} r={} params={}",
        results.len(),
        report::fmt_num(m.mae),
        report::fmt_num(m.rmse),
        report::fmt_num(m.sd),
        report::fmt_num(m.pearson_r),
        params
    );
    Ok(())
}

fn run_infer(args: InferArgs) -> Result<()> {
    let out = &args.common.out;
    echo_config(out, "infer", &EvalSettings::default())?;
    let model = Stage2Model::load(&resolve(&args.ckpt, "stage2.ckpt"))?;
    let meta = args.input.join("meta");
    let fps = match (args.fps, meta.exists()) {
        (Some(f), _) => f,
        (None, true) => dataset::read_meta(&meta)?,
        (None, false) => 30.0,
    };
    let frames = if args.input.join("frames").is_dir() {
        args.input.join("frames")
    } else {
        args.input.clone()
    };
    let clip = codephys::video::VideoClip::read_frames(&frames, fps)?;
    let t = clip.t() - clip.t() % 4;
    let s_pred = model.predict_long(&clip.truncate(t))?;
    s_pred.write_csv(&out.join("signal.csv"))?;
    let bpm = hr::estimate_hr(&s_pred, model.config.psd_band)?;
    std::fs::write(out.join("hr.txt"), format!("hr_bpm={bpm}\n"))?;
    println!("hr_bpm={bpm:.2}");
    Ok(())
}

fn run_degrade(args: DegradeArgs) -> Result<()> {
    let mut s: DegradeSettings =
        base_settings(&args.common, |s: &mut DegradeSettings, v| s.seed = v)?;
    if let Some(k) = args.kind {
        s.kind = k;
    }
    s.per_frame &= !args.per_clip;
    let kind: DegradeKind = s.kind.parse()?;
    let out = &args.common.out;
    echo_config(out, "degrade", &s)?;
    let splits: Vec<(PathBuf, PathBuf)> = ["train", "val", "test"]
        .iter()
        .map(|n| (args.data.join(n), out.join(n)))
        .filter(|(src, _)| src.is_dir())
        .collect();
    let jobs = if splits.is_empty() {
        vec![(args.data.clone(), out.clone())]
    } else {
        splits
    };
    let mut count = 0u64;
    for (src, dst) in jobs {
        for sample in load_samples(&src)? {
            let v = &sample.video;
            let spec = DegradeSpec {
                occlusion_area: Some(Rect::centered(v.h(), v.w(), 0.5)),
                per_frame: s.per_frame,
                ..DegradeSpec::new(kind, s.seed.wrapping_add(count))
            };
            let degraded = degrade(v, &spec)?;
            dataset::write_sample(&dst.join(&sample.id), &degraded, &sample.signal)?;
            count += 1;
        }
    }
    if count == 0 {
        bail!("no samples under {}", args.data.display());
    }
    println!("wrote {count} {} samples to {}", kind.name(), out.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::TrainStage1(a) => run_stage1(a),
        Command::TrainStage2(a) => run_stage2(a),
        Command::Eval(a) => run_eval(a),
        Command::Infer(a) => run_infer(a),
        Command::Degrade(a) => run_degrade(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
