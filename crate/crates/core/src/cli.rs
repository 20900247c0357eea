//! Command line front end.
//!
//! Settings are layered: built-in defaults, then the TOML file given with
//! `--config`, then explicit flags.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Deserialize;

use crate::dataio::{
    build_manifest, list_pngs, load_checkpoint, load_image, load_pairs, pair_dirs, save_checkpoint, save_image,
    SplitRatios,
};
use crate::degrade::{add_gaussian_noise, synth_rain, synth_underwater, RainParams, UnderwaterParams};
use crate::denoiser::{Denoiser, DenoiserConfig};
use crate::error::{Error, Result};
use crate::metrics::MetricReport;
use crate::sampler::{restore, RestoreConfig};
use crate::schedule::{NoiseSchedule, ScheduleConfig};
use crate::trainer::{TrainConfig, Trainer, LOG_HEADER};

#[derive(Debug, Parser)]
#[command(name = "diffrestore", version, about = "Conditional diffusion image restoration")]
struct Cli {
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// TOML file with [schedule], [model], [train], [restore] and [degrade] sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Print or save the noise schedule as CSV.
    Schedule(ScheduleArgs),
    /// Synthesise clean/degraded pairs from clean images.
    Degrade(DegradeArgs),
    /// Train the denoiser on `<data>/clean` and `<data>/degraded`.
    Train(TrainArgs),
    /// Restore degraded images with a trained checkpoint.
    Restore(RestoreArgs),
    /// Score images against references (PSNR, SSIM, UIQM, UCIQE).
    Eval(EvalArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ScheduleAction {
    Inspect,
}

#[derive(Debug, Args, Default)]
struct ScheduleFlags {
    /// Number of diffusion steps.
    #[arg(long = "T", id = "diffusion_steps")]
    steps: Option<usize>,
    #[arg(long)]
    beta_start: Option<f64>,
    #[arg(long)]
    beta_end: Option<f64>,
}

#[derive(Debug, Args)]
struct ScheduleArgs {
    /// `inspect` (the default) writes the per-step table.
    #[arg(value_enum)]
    action: Option<ScheduleAction>,
    #[command(flatten)]
    schedule: ScheduleFlags,
    /// Output CSV (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Task {
    Noise,
    Rain,
    Underwater,
}

#[derive(Debug, Args)]
struct DegradeArgs {
    #[arg(long, value_enum)]
    task: Task,
    /// A PNG file or a directory of PNGs.
    #[arg(long)]
    input: PathBuf,
    /// Output root; pairs go to `<out>/clean` and `<out>/degraded`.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Gaussian noise standard deviation on the 0..255 scale.
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    streaks: Option<usize>,
    #[arg(long)]
    angle: Option<f64>,
    #[arg(long)]
    length: Option<usize>,
    #[arg(long)]
    intensity: Option<f64>,
    /// Per-channel transmission `r,g,b`.
    #[arg(long, value_parser = parse_triple)]
    attenuation: Option<[f64; 3]>,
    /// Veil colour `r,g,b` in [0, 1].
    #[arg(long, value_parser = parse_triple)]
    veil: Option<[f64; 3]>,
    #[arg(long)]
    veil_strength: Option<f64>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Dataset root with `clean/` and `degraded/` subdirectories.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Checkpoint path (`.tdir`), rewritten periodically and at the end.
    #[arg(long)]
    out: PathBuf,
    /// Total number of optimisation steps.
    #[arg(long)]
    steps: Option<u64>,
    /// Continue from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Training log CSV.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Write 0 in the wall_ms log column (byte-reproducible logs).
    #[arg(long)]
    no_wall_clock: bool,
    /// Copy encoder weights from this checkpoint.
    #[arg(long)]
    encoder_weights: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    patch_size: Option<usize>,
    #[arg(long)]
    checkpoint_every: Option<u64>,
    /// Freeze encoder tensors (true/false).
    #[arg(long)]
    freeze_encoder: Option<bool>,
    /// Small 8-channel model for quick experiments.
    #[arg(long)]
    tiny: bool,
    #[arg(long)]
    base_channels: Option<usize>,
    #[command(flatten)]
    schedule: ScheduleFlags,
}

#[derive(Debug, Args)]
struct RestoreArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// A PNG file or a directory of PNGs.
    #[arg(long)]
    input: PathBuf,
    /// Output directory; file names are kept.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    tile: Option<usize>,
    #[arg(long)]
    overlap: Option<usize>,
    /// Only visit every n-th timestep.
    #[arg(long)]
    stride: Option<usize>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Root with `clean/` (reference) and `degraded/` (evaluated) images.
    #[arg(long, conflicts_with_all = ["reference", "restored"])]
    pairs: Option<PathBuf>,
    #[arg(long, requires = "restored")]
    reference: Option<PathBuf>,
    #[arg(long, requires = "reference")]
    restored: Option<PathBuf>,
    /// Output CSV (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FileSchedule {
    steps: Option<usize>,
    beta_start: Option<f64>,
    beta_end: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FileDegrade {
    sigma: f64,
    seed: u64,
    rain: RainParams,
    underwater: UnderwaterParams,
}

impl Default for FileDegrade {
    fn default() -> Self {
        Self {
            sigma: 25.0,
            seed: 0,
            rain: RainParams::default(),
            underwater: UnderwaterParams::default(),
        }
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    schedule: FileSchedule,
    model: Option<DenoiserConfig>,
    train: TrainConfig,
    restore: RestoreConfig,
    degrade: FileDegrade,
}

fn parse_triple(s: &str) -> std::result::Result<[f64; 3], String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    <[f64; 3]>::try_from(v).map_err(|v| format!("expected 3 comma-separated values, got {}", v.len()))
}

fn load_config(path: Option<&Path>) -> Result<FileConfig> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("read config {}", path.display()), e))?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {}", path.display(), e.message())))
}

/// Flags over file over defaults. Unset beta bounds follow
/// [`ScheduleConfig::scaled_for`] the chosen step count.
fn resolve_schedule(file: &FileSchedule, flags: &ScheduleFlags) -> ScheduleConfig {
    let steps = flags.steps.or(file.steps).unwrap_or(ScheduleConfig::default().steps);
    let scaled = ScheduleConfig::scaled_for(steps);
    ScheduleConfig {
        steps,
        beta_start: flags.beta_start.or(file.beta_start).unwrap_or(scaled.beta_start),
        beta_end: flags.beta_end.or(file.beta_end).unwrap_or(scaled.beta_end),
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code. Failures print one `error[kind]: message` line.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp(None)
        .try_init();
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid usage");
            eprintln!("error[usage]: {}", first.trim_start_matches("error: "));
            return 2;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            let kind = match e.exit_code() {
                2 => "usage",
                3 => "io",
                _ => "numeric",
            };
            eprintln!("error[{kind}]: {}", e.to_string().replace('\n', " "));
            e.exit_code()
        }
    }
}

fn execute(cli: Cli) -> Result<()> {
    let file = load_config(cli.config.as_deref())?;
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::InvalidArgument("--threads must be at least 1".into()));
        }
        pool = pool.num_threads(n);
    }
    let pool = pool
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    pool.install(|| match cli.command {
        Command::Schedule(a) => cmd_schedule(&file, a),
        Command::Degrade(a) => cmd_degrade(&file, a),
        Command::Train(a) => cmd_train(file, a),
        Command::Restore(a) => cmd_restore(&file, a),
        Command::Eval(a) => cmd_eval(a),
    })
}

fn write_output(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).map_err(|e| Error::io(format!("write {}", p.display()), e)),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout
                .write_all(text.as_bytes())
                .map_err(|e| Error::io("write stdout", e))
        }
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("create {}", dir.display()), e))
}

/// Sorted `(file name, path)` of a PNG file or all PNGs in a directory.
fn input_images(input: &Path) -> Result<Vec<(String, PathBuf)>> {
    if input.is_dir() {
        let names = list_pngs(input)?;
        if names.is_empty() {
            return Err(Error::InvalidArgument(format!("no PNG files in {}", input.display())));
        }
        Ok(names.into_iter().map(|n| (n.clone(), input.join(n))).collect())
    } else {
        let name = input
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| Error::InvalidArgument(format!("bad input path {}", input.display())))?;
        Ok(vec![(name.to_string(), input.to_path_buf())])
    }
}

fn cmd_schedule(file: &FileConfig, a: ScheduleArgs) -> Result<()> {
    let _ = a.action;
    let sched = resolve_schedule(&file.schedule, &a.schedule).build()?;
    write_output(a.out.as_deref(), &sched.to_csv())
}

fn cmd_degrade(file: &FileConfig, a: DegradeArgs) -> Result<()> {
    let d = &file.degrade;
    let seed = a.seed.unwrap_or(d.seed);
    let sigma = a.sigma.unwrap_or(d.sigma);
    let rain = RainParams {
        streak_count: a.streaks.unwrap_or(d.rain.streak_count),
        angle_deg: a.angle.unwrap_or(d.rain.angle_deg),
        length_px: a.length.unwrap_or(d.rain.length_px),
        intensity: a.intensity.unwrap_or(d.rain.intensity),
    };
    let underwater = UnderwaterParams {
        attenuation: a.attenuation.unwrap_or(d.underwater.attenuation),
        veil_color: a.veil.unwrap_or(d.underwater.veil_color),
        veil_strength: a.veil_strength.unwrap_or(d.underwater.veil_strength),
    };

    let inputs = input_images(&a.input)?;
    let (clean_dir, degraded_dir) = pair_dirs(&a.out);
    create_dir(&clean_dir)?;
    create_dir(&degraded_dir)?;
    inputs
        .par_iter()
        .enumerate()
        .map(|(i, (name, path))| {
            let img = load_image(path)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let degraded = match a.task {
                Task::Noise => add_gaussian_noise(&img, sigma, &mut rng)?,
                Task::Rain => synth_rain(&img, &rain, &mut rng)?,
                Task::Underwater => synth_underwater(&img.to_rgb()?, &underwater)?,
            };
            let clean = if degraded.channels() == img.channels() {
                img
            } else {
                img.to_rgb()?
            };
            save_image(&clean, clean_dir.join(name))?;
            save_image(&degraded, degraded_dir.join(name))
        })
        .collect::<Result<Vec<()>>>()?;
    Ok(())
}

fn cmd_train(file: FileConfig, a: TrainArgs) -> Result<()> {
    let mut trainer = if let Some(resume) = &a.resume {
        let mut ckpt = load_checkpoint(resume)?;
        if let Some(steps) = a.steps {
            ckpt.train.total_steps = steps;
        }
        if let Some(every) = a.checkpoint_every {
            ckpt.train.checkpoint_every = every;
        }
        let data = match &a.data {
            Some(root) => load_training_pairs(root)?,
            None => Vec::new(),
        };
        Trainer::from_checkpoint(ckpt, data)?
    } else {
        let mut model = if a.tiny {
            DenoiserConfig::tiny()
        } else {
            file.model.clone().unwrap_or_default()
        };
        if let Some(c) = a.base_channels {
            let ratio = c as f64 / model.base_channels as f64;
            model.base_channels = c;
            for p in &mut model.prompt_channels {
                *p = ((*p as f64 * ratio).round() as usize).max(1);
            }
        }
        let mut cfg = file.train.clone();
        if let Some(v) = a.steps {
            cfg.total_steps = v;
        }
        if let Some(v) = a.seed {
            cfg.seed = v;
        }
        if let Some(v) = a.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = a.lr {
            cfg.learning_rate = v;
        }
        if let Some(v) = a.patch_size {
            cfg.patch_size = v;
        }
        if let Some(v) = a.checkpoint_every {
            cfg.checkpoint_every = v;
        }
        if let Some(v) = a.freeze_encoder {
            cfg.freeze_encoder = v;
        }
        let schedule = resolve_schedule(&file.schedule, &a.schedule);
        let data = match &a.data {
            Some(root) => load_training_pairs(root)?,
            None => Vec::new(),
        };
        let mut trainer = Trainer::new(model, schedule, cfg, data)?;
        match &a.encoder_weights {
            Some(path) => {
                let src = load_checkpoint(path)?;
                let n = trainer.import_encoder(&src.params)?;
                log::info!("imported {n} encoder tensors from {}", path.display());
            }
            None if trainer.config().freeze_encoder => {
                log::warn!("encoder is frozen but no --encoder-weights were given; it stays at its initialisation");
            }
            None => {}
        }
        trainer
    };

    if let Some(dir) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    let total = trainer.config().total_steps;
    if trainer.step_count() >= total {
        return save_checkpoint(&trainer.checkpoint(), &a.out);
    }
    if a.data.is_none() {
        return Err(Error::InvalidArgument("--data is required when training steps remain".into()));
    }

    let mut log_text = String::new();
    let mut log_file = match &a.log {
        Some(path) => {
            let append = a.resume.is_some() && path.exists();
            let f = std::fs::OpenOptions::new()
                .create(true)
                .append(append)
                .write(true)
                .truncate(!append)
                .open(path)
                .map_err(|e| Error::io(format!("open {}", path.display()), e))?;
            if !append {
                log_text.push_str(LOG_HEADER);
                log_text.push('\n');
            }
            Some((path.clone(), f))
        }
        None => None,
    };
    let every = trainer.config().checkpoint_every;
    while trainer.step_count() < total {
        let mut rec = trainer.step()?;
        if a.no_wall_clock {
            rec.wall_ms = 0;
        }
        log::info!("step {} loss {:.6}", rec.step, rec.loss);
        let _ = writeln!(log_text, "{}", rec.csv_row());
        if every > 0 && rec.step % every == 0 && rec.step < total {
            flush_log(&mut log_file, &mut log_text)?;
            save_checkpoint(&trainer.checkpoint(), &a.out)?;
        }
    }
    flush_log(&mut log_file, &mut log_text)?;
    save_checkpoint(&trainer.checkpoint(), &a.out)
}

fn flush_log(file: &mut Option<(PathBuf, std::fs::File)>, text: &mut String) -> Result<()> {
    if let Some((path, f)) = file {
        f.write_all(text.as_bytes())
            .map_err(|e| Error::io(format!("write {}", path.display()), e))?;
    }
    text.clear();
    Ok(())
}

fn load_training_pairs(root: &Path) -> Result<Vec<crate::dataio::ImagePair>> {
    let (clean, degraded) = pair_dirs(root);
    let manifest = build_manifest(&clean, &degraded, SplitRatios::all_train())?;
    load_pairs(&manifest, None)
}

fn cmd_restore(file: &FileConfig, a: RestoreArgs) -> Result<()> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let model = Denoiser::new(ckpt.denoiser.clone())?;
    let sched: NoiseSchedule = ckpt.schedule.build()?;
    let rc = RestoreConfig {
        tile: a.tile.unwrap_or(file.restore.tile),
        overlap: a.overlap.unwrap_or(file.restore.overlap),
        seed: a.seed.unwrap_or(file.restore.seed),
        stride: a.stride.or(file.restore.stride),
    };
    let inputs = input_images(&a.input)?;
    create_dir(&a.out)?;
    for (name, path) in inputs {
        let img = load_image(&path)?;
        let img = if ckpt.denoiser.image_channels == 3 {
            img.to_rgb()?
        } else {
            img
        };
        let restored = restore(&img, &model, &ckpt.params, &sched, &rc)?;
        save_image(&restored, a.out.join(&name))?;
    }
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let (reference, evaluated) = match (&a.pairs, &a.reference, &a.restored) {
        (Some(root), _, _) => pair_dirs(root),
        (None, Some(r), Some(t)) => (r.clone(), t.clone()),
        _ => return Err(Error::InvalidArgument("give --pairs or both --reference and --restored".into())),
    };
    let manifest = build_manifest(&reference, &evaluated, SplitRatios::all_train())?;
    let reports: Vec<(String, MetricReport)> = manifest
        .entries
        .par_iter()
        .map(|e| {
            let r = load_image(&e.clean)?;
            let t = load_image(&e.degraded)?;
            Ok((e.name.clone(), MetricReport::compute(&t, &r)?))
        })
        .collect::<Result<_>>()?;
    let mut csv = String::from(MetricReport::CSV_HEADER);
    csv.push('\n');
    for (name, r) in &reports {
        let _ = writeln!(csv, "{name},{}", r.csv_fields());
    }
    let all: Vec<MetricReport> = reports.iter().map(|(_, r)| *r).collect();
    if let Some(mean) = MetricReport::mean(&all) {
        let _ = writeln!(csv, "mean,{}", mean.csv_fields());
    }
    write_output(a.out.as_deref(), &csv)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argument_definitions_are_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }

    #[test]
    fn colour_triples_parse_from_comma_lists() {
        assert_eq!(parse_triple("0.4, 0.8,0.9").unwrap(), [0.4, 0.8, 0.9]);
        assert!(parse_triple("0.4,0.8").is_err());
        assert!(parse_triple("a,b,c").is_err());
    }

    #[test]
    fn schedule_defaults_follow_step_count() {
        let flags = ScheduleFlags {
            steps: Some(50),
            ..ScheduleFlags::default()
        };
        assert_eq!(resolve_schedule(&FileSchedule::default(), &flags), ScheduleConfig::scaled_for(50));
        let none = ScheduleFlags::default();
        assert_eq!(resolve_schedule(&FileSchedule::default(), &none), ScheduleConfig::default());
    }

    #[test]
    fn flags_override_file() {
        let file = FileSchedule {
            steps: Some(10),
            beta_start: Some(0.01),
            beta_end: Some(0.2),
        };
        let flags = ScheduleFlags {
            beta_end: Some(0.3),
            ..ScheduleFlags::default()
        };
        let s = resolve_schedule(&file, &flags);
        assert_eq!((s.steps, s.beta_start, s.beta_end), (10, 0.01, 0.3));
    }

    #[test]
    fn config_file_parses_sections() {
        let cfg: FileConfig = toml::from_str(
            "[schedule]\nsteps = 20\n[train]\nbatch_size = 4\n[restore]\ntile = 64\n[degrade]\nsigma = 15.0\n",
        )
        .unwrap();
        assert_eq!(cfg.schedule.steps, Some(20));
        assert_eq!(cfg.train.batch_size, 4);
        assert_eq!(cfg.train.learning_rate, 2e-4);
        assert_eq!(cfg.restore.tile, 64);
        assert_eq!(cfg.degrade.sigma, 15.0);
        assert!(toml::from_str::<FileConfig>("[bogus]\nx = 1\n").is_err());
    }

    #[test]
    fn usage_errors_exit_2() {
        assert_eq!(run(["diffrestore", "frobnicate"]), 2);
        assert_eq!(run(["diffrestore", "schedule", "--bogus"]), 2);
        assert_eq!(run(["diffrestore", "--version"]), 0);
    }
}
