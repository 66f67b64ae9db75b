use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use pgma_core::corrupt::apply_mode;
use pgma_core::episode::TaskMode;
use pgma_core::eval::Scorer;
use pgma_core::metrics::threshold;
use pgma_core::prior::textual_prior_at;
use pgma_core::synth::SynthWorld;
use pgma_core::Tensor;

use pgma::checkpoint::Checkpoint;
use pgma::config::RunConfig;
use pgma::dataset::{write_synthetic, Source};
use pgma::pgme::{load_episode_with, Supports};
use pgma::raster::{save_mask, save_overlay};
use pgma::report::{ablation_table, variant_name, EvalReport, BASELINE_VARIANT};
use pgma::runner::{self, EvalSpec};

/// Prior-guided any-shot segmentation experiments.
#[derive(Parser)]
#[command(version, about)]
struct Cli {
    /// Worker threads (defaults to the number of CPUs).
    #[arg(long, global = true, env = "PGMA_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic PGME dataset.
    Synth(SynthArgs),
    /// Train a model and write checkpoints plus a loss log.
    Train(TrainArgs),
    /// Score a checkpoint (or the text-prior baseline) under one task mode.
    Eval(EvalArgs),
    /// Predict masks for individual episode files.
    Infer(InferArgs),
    /// Build the ablation table from evaluation reports.
    Report(ReportArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset root; episodes go to <out>/train and <out>/val.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1000)]
    train: usize,
    #[arg(long, default_value_t = 500)]
    val: usize,
    #[arg(long, default_value_t = 1)]
    shots: usize,
    /// Novel fold (overrides the config).
    #[arg(long)]
    fold: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for checkpoints and logs.
    #[arg(long)]
    out: PathBuf,
    /// Train from a PGME dataset instead of generating episodes.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Continue from a checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    steps: Option<u64>,
    /// Novel fold to hold out (overrides the config).
    #[arg(long)]
    fold: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint to score; not needed with `--mode baseline`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Config for the baseline or to override the checkpoint's own.
    #[arg(long)]
    config: Option<PathBuf>,
    /// PGME dataset root; its val split is scored.
    #[arg(long)]
    data: Option<PathBuf>,
    /// fss, zss, bbox, coseg, corrupt-mask:N, corrupt-image:N or baseline.
    #[arg(long, default_value = "fss")]
    mode: String,
    #[arg(long)]
    fold: Option<usize>,
    #[arg(long)]
    shots: Option<usize>,
    #[arg(long)]
    episodes: Option<u64>,
    /// Write the JSON report here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "fss")]
    mode: TaskMode,
    /// Directory for `<episode>.mask.pgm` (and overlays).
    #[arg(long)]
    out: PathBuf,
    /// Also write `<episode>.overlay.ppm`.
    #[arg(long)]
    overlay: bool,
    #[arg(long, default_value_t = 1)]
    shots: usize,
    #[arg(required = true)]
    episodes: Vec<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Write the table here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// JSON reports written by `eval --out`.
    #[arg(required = true)]
    reports: Vec<PathBuf>,
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    let pool = runner::thread_pool(cli.threads.unwrap_or(0))?;
    pool.install(|| match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Infer(a) => infer(a),
        Command::Report(a) => report(a),
    })
}

fn log_config(cfg: &RunConfig) {
    eprintln!("resolved config (hash {}):\n{}", cfg.hash(), cfg.to_toml());
}

fn synth(a: SynthArgs) -> Result<()> {
    let mut cfg = RunConfig::resolve(a.config.as_deref())?;
    if let Some(f) = a.fold {
        cfg.synth.novel_fold = f;
    }
    cfg.validate()?;
    log_config(&cfg);
    let world = SynthWorld::new(&cfg.synth)?;
    write_synthetic(&world, &a.out, a.train, a.val, a.shots, cfg.synth.seed)?;
    std::fs::write(a.out.join("config.toml"), cfg.to_toml())?;
    eprintln!("wrote {} training and {} validation episodes to {}", a.train, a.val, a.out.display());
    Ok(())
}

fn source_for(cfg: &RunConfig, data: Option<&Path>) -> Result<Source> {
    match data {
        Some(root) => Source::open_dir(root),
        None => Ok(SynthWorld::new(&cfg.synth)?.into()),
    }
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = match (&a.resume, &a.config) {
        (Some(ck), None) => {
            let mut c = Checkpoint::load(ck).with_context(|| format!("loading {}", ck.display()))?.meta.run;
            if let Ok(v) = std::env::var(pgma::config::SEED_ENV) {
                c.set_seed(v.trim().parse().context("parsing PGMA_SEED")?);
            }
            c
        }
        _ => RunConfig::resolve(a.config.as_deref())?,
    };
    if let Some(s) = a.steps {
        cfg.train.steps = s;
    }
    if let Some(f) = a.fold {
        cfg.synth.novel_fold = f;
    }
    cfg.validate()?;
    log_config(&cfg);
    let source = source_for(&cfg, a.data.as_deref())?;
    let trainer = match &a.resume {
        Some(ck) => runner::resume_trainer(&cfg, &Checkpoint::load(ck)?)?,
        None => runner::new_trainer(&cfg, &source)?,
    };
    eprintln!("{} parameters", trainer.model.params.numel());
    let every = (cfg.train.steps / 20).max(1);
    let out = runner::train(&cfg, &source, trainer, &a.out, |l| {
        if (l.step + 1) % every == 0 {
            eprintln!("step {:>6}  loss {:.4}  dice {:.4}  ce {:.4}", l.step + 1, l.total, l.dice, l.ce);
        }
    })?;
    eprintln!("final checkpoint {}", out.last_checkpoint.display());
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let scorer = runner::parse_scorer(&a.mode)?;
    let ckpt = match (&a.checkpoint, scorer) {
        (Some(p), _) => Some(Checkpoint::load(p).with_context(|| format!("loading {}", p.display()))?),
        (None, Scorer::Baseline) => None,
        (None, Scorer::Model(_)) => bail!("--checkpoint is required for mode {}", a.mode),
    };
    let mut cfg = match (&a.config, &ckpt) {
        (None, Some(c)) => c.meta.run.clone(),
        (path, _) => RunConfig::resolve(path.as_deref())?,
    };
    if let Some(f) = a.fold {
        cfg.synth.novel_fold = f;
    }
    if let Some(k) = a.shots {
        cfg.eval.shots = k;
    }
    if let Some(n) = a.episodes {
        cfg.eval.episodes = n;
    }
    cfg.validate()?;
    log_config(&cfg);
    let model = ckpt.as_ref().map(Checkpoint::model).transpose()?;
    let source = source_for(&cfg, a.data.as_deref())?;
    let spec = EvalSpec { scorer, episodes: cfg.eval.episodes, shots: cfg.eval.shots, seed: cfg.eval.seed };
    let acc = runner::evaluate(model.as_ref(), &source, spec)?;
    let variant = match &ckpt {
        Some(c) => variant_name(&c.meta.run.model, &c.meta.run.train),
        None => BASELINE_VARIANT.to_string(),
    };
    // The baseline ignores supports, so it lines up with the FSS column.
    let mode = if matches!(scorer, Scorer::Baseline) { "fss" } else { a.mode.as_str() };
    let report = EvalReport::new(&variant, cfg.synth.novel_fold, mode, cfg.eval.shots, &acc, cfg.eval.seed, &cfg.hash());
    print!("{}", report.to_text());
    if let Some(out) = &a.out {
        report.save_json(out)?;
    }
    Ok(())
}

fn infer(a: InferArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let model = ckpt.model()?;
    std::fs::create_dir_all(&a.out)?;
    let shots = if a.mode.uses_supports() { a.shots } else { 0 };
    for path in &a.episodes {
        let ep = load_episode_with(path, Supports::First(shots)).with_context(|| format!("loading {}", path.display()))?;
        let seen = apply_mode(&ep, a.mode, 0)?;
        let pred = threshold(&model.predict(&seen, a.mode)?)?;
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("episode");
        save_mask(a.out.join(format!("{stem}.mask.pgm")), &pred)?;
        if a.overlay {
            let (h, w) = ep.query.image_size;
            let text: Vec<f32> = ep.text_embed.clone();
            let backdrop: Tensor<f32> = textual_prior_at(&ep.query.clip, &text, h, w)?;
            save_overlay(a.out.join(format!("{stem}.overlay.ppm")), &backdrop, &pred, ep.query_mask.as_ref())?;
        }
        eprintln!("{}: {} foreground pixels", path.display(), pred.area());
    }
    Ok(())
}

fn report(a: ReportArgs) -> Result<()> {
    let reports = a.reports.iter().map(EvalReport::load_json).collect::<Result<Vec<_>>>()?;
    let table = ablation_table(&reports);
    match &a.out {
        Some(p) => std::fs::write(p, &table)?,
        None => print!("{table}"),
    }
    Ok(())
}
