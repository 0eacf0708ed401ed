//! Command-line front end: `onestep-sr <command> [flags]`.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::datagen::{
    generate_dataset, parse_glyphs, read_dataset, read_ppm, vocab, write_dataset, write_ppm, DegradationConfig,
    PromptTemplate, SceneConfig, FACTOR,
};
use crate::error::{Error, Result};
use crate::generator::{restore, Stage};
use crate::metrics::{
    bilinear_baseline, fidelity_sweep, noise_study, MetricReport, NoiseStudyConfig, PromptMode, SweepConfig,
};
use crate::numerics::{DType, Real};
use crate::scheduler::{FidelityWeight, NoiseSchedule};
use crate::trainer::{checkpoint_dtype, load_checkpoint, save_checkpoint, write_loss_csv, TrainConfig, Trainer};

/// Environment variable supplying the default `--seed`.
pub const SEED_ENV: &str = "ONESTEP_SR_SEED";

pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NO_CHECKPOINT: i32 = 3;

#[derive(Parser, Debug)]
#[command(name = "onestep-sr", version, about = "Desk-scale one-step super-resolution on glyph scenes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Training config (TOML); missing keys take defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Random seed; defaults to $ONESTEP_SR_SEED, then 0.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Checkpoint directory to read.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render glyph scenes and their degraded inputs.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 80)]
        count: usize,
    },
    /// Stage 1: flow-matching pretraining of the generator.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long, value_enum, default_value_t = Precision::F32)]
        precision: Precision,
        /// Print a loss line every N iterations (0 = never).
        #[arg(long, default_value_t = 100)]
        log_every: usize,
    },
    /// Stage 2: fidelity-aware adversarial finetuning from a stage-1 checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long, default_value_t = 100)]
        log_every: usize,
    },
    /// Restore LQ images (PPM) with a single model call each.
    Infer {
        #[command(flatten)]
        common: Common,
        /// LQ input images.
        #[arg(long, required = true, num_args = 1..)]
        input: Vec<PathBuf>,
        #[arg(long, default_value_t = 1.0)]
        fidelity: f64,
        /// Caption text; empty means no prompt.
        #[arg(long, default_value = "")]
        prompt: String,
    },
    /// Held-out metrics at one fidelity weight, with the bilinear baseline.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        fidelity: f64,
        #[arg(long, value_enum, default_value_t = PromptArg::Both)]
        prompt_mode: PromptArg,
    },
    /// Noise a clean input to t_s and denoise it with the pretrained prior.
    NoiseStudy {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0.90,0.29")]
        ts: Vec<f64>,
        #[arg(long, default_value_t = 10)]
        steps: usize,
        #[arg(long, value_enum, default_value_t = PromptArg::Both)]
        prompt_mode: PromptArg,
    },
    /// One-step restoration over a list of fidelity weights.
    SweepFidelity {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1.0,0.5,0.0")]
        f: Vec<f64>,
        #[arg(long, value_enum, default_value_t = PromptArg::Both)]
        prompt_mode: PromptArg,
    },
    /// Run the built-in invariant checks.
    Selftest,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum PromptArg {
    With,
    Without,
    Both,
}

impl From<PromptArg> for PromptMode {
    fn from(p: PromptArg) -> Self {
        match p {
            PromptArg::With => PromptMode::With,
            PromptArg::Without => PromptMode::Without,
            PromptArg::Both => PromptMode::Both,
        }
    }
}

/// Parses `argv`, runs the command and returns the process exit code.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(Failure::NoCheckpoint(p)) => {
            eprintln!("error: no checkpoint at {}", p.display());
            EXIT_NO_CHECKPOINT
        }
        Err(Failure::Other(e)) => {
            eprintln!("error: {e}");
            EXIT_FAILURE
        }
    }
}

enum Failure {
    NoCheckpoint(PathBuf),
    Other(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Other(e)
    }
}

fn seed(common: &Common) -> u64 {
    common
        .seed
        .or_else(|| std::env::var(SEED_ENV).ok().and_then(|s| s.parse().ok()))
        .unwrap_or(0)
}

fn load_config(common: &Common) -> Result<TrainConfig> {
    match &common.config {
        Some(p) => TrainConfig::load(p),
        None => Ok(TrainConfig::default()),
    }
}

fn checkpoint_dir(common: &Common) -> std::result::Result<PathBuf, Failure> {
    match &common.checkpoint {
        Some(p) if p.join("manifest.json").is_file() => Ok(p.clone()),
        Some(p) => Err(Failure::NoCheckpoint(p.clone())),
        None => Err(Failure::NoCheckpoint(PathBuf::from("<none given>"))),
    }
}

fn dispatch(cmd: Command) -> std::result::Result<i32, Failure> {
    match cmd {
        Command::GenData { common, count } => {
            let ds = generate_dataset(seed(&common), count, &SceneConfig::default(), &DegradationConfig::default())?;
            write_dataset(&ds, &common.out)?;
            println!("wrote {count} items to {}", common.out.display());
        }
        Command::Pretrain {
            common,
            data,
            iterations,
            precision,
            log_every,
        } => {
            let mut cfg = load_config(&common)?;
            cfg.stage = Stage::Pretrain;
            if let Some(s) = common.seed {
                cfg.seed = s;
            }
            if let Some(n) = iterations {
                cfg.iterations = n;
            }
            match precision {
                Precision::F32 => pretrain::<f32>(cfg, &data, &common.out, log_every)?,
                Precision::F64 => pretrain::<f64>(cfg, &data, &common.out, log_every)?,
            }
        }
        Command::Train {
            common,
            data,
            iterations,
            log_every,
        } => {
            let dir = checkpoint_dir(&common)?;
            let mut cfg = load_config(&common)?;
            cfg.stage = Stage::Faa;
            if let Some(s) = common.seed {
                cfg.seed = s;
            }
            if let Some(n) = iterations {
                cfg.iterations = n;
            }
            match checkpoint_dtype(&dir)? {
                DType::F32 => train::<f32>(cfg, &dir, &data, &common.out, log_every)?,
                DType::F64 => train::<f64>(cfg, &dir, &data, &common.out, log_every)?,
            }
        }
        Command::Infer {
            common,
            input,
            fidelity,
            prompt,
        } => {
            let dir = checkpoint_dir(&common)?;
            let f = FidelityWeight::new(fidelity)?;
            let glyphs = parse_glyphs(&prompt)?;
            let s = seed(&common);
            match checkpoint_dtype(&dir)? {
                DType::F32 => infer::<f32>(&dir, &input, f, &glyphs, s, &common.out)?,
                DType::F64 => infer::<f64>(&dir, &input, f, &glyphs, s, &common.out)?,
            }
        }
        Command::Eval {
            common,
            data,
            fidelity,
            prompt_mode,
        } => {
            let dir = checkpoint_dir(&common)?;
            let cfg = SweepConfig {
                f: vec![fidelity],
                prompt: prompt_mode.into(),
                seed: seed(&common),
            };
            let mut report = with_model(&dir, &data, |m| m.sweep(&cfg))?;
            for r in &mut report.rows {
                r.study = "eval".into();
            }
            let ds = read_dataset(&data)?;
            report.extend(bilinear_baseline(&ds.items, &ds.manifest.scene_config.lattice())?);
            finish(&report, &common.out, "eval")?;
        }
        Command::NoiseStudy {
            common,
            data,
            ts,
            steps,
            prompt_mode,
        } => {
            let dir = checkpoint_dir(&common)?;
            let cfg = NoiseStudyConfig {
                t_s: ts,
                n_steps: steps,
                prompt: prompt_mode.into(),
                seed: seed(&common),
            };
            let report = with_model(&dir, &data, |m| m.noise(&cfg))?;
            finish(&report, &common.out, "noise_study")?;
        }
        Command::SweepFidelity {
            common,
            data,
            f,
            prompt_mode,
        } => {
            let dir = checkpoint_dir(&common)?;
            let cfg = SweepConfig {
                f,
                prompt: prompt_mode.into(),
                seed: seed(&common),
            };
            let report = with_model(&dir, &data, |m| m.sweep(&cfg))?;
            finish(&report, &common.out, "sweep")?;
        }
        Command::Selftest => {
            let failed = crate::selftest::run_all(std::io::stdout());
            return Ok(if failed == 0 { 0 } else { EXIT_FAILURE });
        }
    }
    Ok(0)
}

fn log_line(rec: &crate::trainer::LossRecord, every: usize) {
    if every == 0 || rec.iteration % every as u64 != 0 {
        return;
    }
    let fmt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.5}"));
    eprintln!(
        "iter {:>6}  flow {}  mse {}  adv_g {}  adv_d {}  reg {}",
        rec.iteration,
        fmt(rec.flow),
        fmt(rec.mse),
        fmt(rec.adv_g),
        fmt(rec.adv_d),
        fmt(rec.reg)
    );
}

fn pretrain<T: Real>(cfg: TrainConfig, data: &Path, out: &Path, every: usize) -> Result<()> {
    let ds = read_dataset(data)?;
    let mut tr = Trainer::<T>::new_pretrain(cfg)?;
    tr.run(&ds.items, |r| log_line(r, every))?;
    save_run(&tr, out)
}

fn train<T: Real>(cfg: TrainConfig, ck: &Path, data: &Path, out: &Path, every: usize) -> Result<()> {
    let ds = read_dataset(data)?;
    let mut tr = Trainer::<T>::new_faa(cfg, load_checkpoint(ck)?)?;
    tr.run(&ds.items, |r| log_line(r, every))?;
    save_run(&tr, out)
}

fn save_run<T: Real>(tr: &Trainer<T>, out: &Path) -> Result<()> {
    save_checkpoint(&tr.checkpoint()?, &out.join("checkpoint"))?;
    write_loss_csv(&tr.state.history, &out.join("loss.csv"))?;
    println!("saved {}", out.join("checkpoint").display());
    Ok(())
}

fn infer<T: Real>(
    ck: &Path,
    inputs: &[PathBuf],
    f: FidelityWeight,
    glyphs: &[usize],
    seed: u64,
    out: &Path,
) -> Result<()> {
    let ck = load_checkpoint::<T>(ck)?;
    let schedule = NoiseSchedule::fitted(ck.config.prior_timestep)?;
    let max_len = ck.gen.config.max_caption_len;
    let caption = if glyphs.is_empty() {
        vocab::empty(max_len)
    } else {
        vocab::encode(glyphs, PromptTemplate::Terse, max_len)?
    };
    std::fs::create_dir_all(out)?;
    for path in inputs {
        let lq = read_ppm(path)?;
        let sr = restore(&ck.gen, &schedule, &lq, FACTOR, f, &caption, seed)?;
        let name = path.file_name().map(PathBuf::from).unwrap_or_else(|| "out.ppm".into());
        write_ppm(&out.join(&name), &sr)?;
        println!("{} -> {}", path.display(), out.join(name).display());
    }
    Ok(())
}

/// A loaded generator of either precision, paired with its dataset.
enum Model {
    F32(crate::generator::Generator<f32>, NoiseSchedule),
    F64(crate::generator::Generator<f64>, NoiseSchedule),
}

struct Bound<'a> {
    model: Model,
    ds: &'a crate::datagen::Dataset,
}

impl Bound<'_> {
    fn sweep(&self, cfg: &SweepConfig) -> Result<MetricReport> {
        let lat = self.ds.manifest.scene_config.lattice();
        match &self.model {
            Model::F32(g, s) => fidelity_sweep(g, s, &self.ds.items, &lat, cfg),
            Model::F64(g, s) => fidelity_sweep(g, s, &self.ds.items, &lat, cfg),
        }
    }

    fn noise(&self, cfg: &NoiseStudyConfig) -> Result<MetricReport> {
        let lat = self.ds.manifest.scene_config.lattice();
        match &self.model {
            Model::F32(g, s) => noise_study(g, s, &self.ds.items, &lat, cfg),
            Model::F64(g, s) => noise_study(g, s, &self.ds.items, &lat, cfg),
        }
    }
}

fn with_model(ck: &Path, data: &Path, f: impl FnOnce(&Bound) -> Result<MetricReport>) -> Result<MetricReport> {
    let ds = read_dataset(data)?;
    let model = match checkpoint_dtype(ck)? {
        DType::F32 => {
            let c = load_checkpoint::<f32>(ck)?;
            Model::F32(c.gen, NoiseSchedule::fitted(c.config.prior_timestep)?)
        }
        DType::F64 => {
            let c = load_checkpoint::<f64>(ck)?;
            Model::F64(c.gen, NoiseSchedule::fitted(c.config.prior_timestep)?)
        }
    };
    f(&Bound { model, ds: &ds })
}

fn finish(report: &MetricReport, out: &Path, stem: &str) -> Result<()> {
    report.write(out, stem)?;
    for a in report.aggregates() {
        let tag = [
            a.f.map(|f| format!("f={f}")),
            a.t_s.map(|t| format!("t_s={t}")),
            a.variant.clone(),
        ]
        .into_iter()
        .flatten()
        .collect::<Vec<_>>()
        .join(" ");
        println!(
            "{:<8} {:<16} prompt={:<5} n={:<3} psnr {:.3}  ssim {:.4}  ned {:.4}{}",
            a.study,
            tag,
            a.prompt,
            a.count,
            a.psnr,
            a.ssim,
            a.ned,
            a.mse_to_lq.map_or(String::new(), |m| format!("  mse_lq {m:.5}"))
        );
    }
    println!("wrote {}", out.join(format!("{stem}.csv")).display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_and_missing_checkpoint_codes() {
        assert_eq!(run(["onestep-sr", "--bogus"]), EXIT_USAGE);
        assert_eq!(run(["onestep-sr", "infer", "--out", "/tmp/x", "--input", "a.ppm", "--nope"]), EXIT_USAGE);
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("nothing");
        let code = run([
            "onestep-sr",
            "infer",
            "--out",
            dir.path().to_str().unwrap(),
            "--checkpoint",
            missing.to_str().unwrap(),
            "--input",
            "a.ppm",
        ]);
        assert_eq!(code, EXIT_NO_CHECKPOINT);
    }

    #[test]
    fn noise_study_flag_parses_list() {
        let cli = Cli::try_parse_from(["x", "noise-study", "--out", "o", "--data", "d", "--ts", "0.90,0.29"]).unwrap();
        match cli.command {
            Command::NoiseStudy { ts, .. } => assert_eq!(ts, vec![0.90, 0.29]),
            _ => unreachable!(),
        }
    }
}
