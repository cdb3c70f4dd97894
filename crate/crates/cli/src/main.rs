mod plot;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use egohoi::checkpoint;
use egohoi::dataset::{read_dataset, to_line, write_dataset};
use egohoi::evaluation::evaluate;
use egohoi::geometry::Side;
use egohoi::inference::predict;
use egohoi::model::Model;
use egohoi::synthgen::{render_dataset, ObservationSequence};
use egohoi::training::{prepare_examples, train, TrainLogEntry, TrainState};
use egohoi::{Error, RunConfig};
use log::info;
use serde::Serialize;

/// Hand-trajectory and contact-affordance forecasting.
///
/// Settings come from built-in defaults, overridden by the `--config` TOML
/// file, overridden in turn by command-line flags.
#[derive(Parser, Debug)]
#[command(name = "egohoi", version)]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic episode file.
    Gen(GenArgs),
    /// Train a model and write a checkpoint directory.
    Train(TrainArgs),
    /// Score a checkpoint and the baselines on an episode file.
    Eval(EvalArgs),
    /// Forecast one episode.
    Predict(PredictArgs),
    /// Draw one episode, optionally with a forecast, as SVG.
    Plot(PlotArgs),
}

#[derive(Args, Debug)]
struct GenArgs {
    /// Number of episodes.
    #[arg(long)]
    n: usize,
    #[arg(long)]
    out: PathBuf,
    /// Seed of the first episode.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint directory to write.
    #[arg(long)]
    out: PathBuf,
    /// Continue from this checkpoint; its model and training settings win.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Train until this step count.
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Loss log, JSON Lines; defaults to `train_log.jsonl` in the checkpoint.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Also write a checkpoint every this many steps.
    #[arg(long)]
    checkpoint_every: Option<u64>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// JSON report path.
    #[arg(long)]
    report: PathBuf,
    #[command(flatten)]
    predict: PredictFlags,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Zero-based episode index in the file.
    #[arg(long)]
    episode: usize,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    predict: PredictFlags,
}

#[derive(Args, Debug)]
struct PredictFlags {
    #[arg(long)]
    candidates: Option<usize>,
    #[arg(long)]
    ddim_steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct PlotArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    episode: usize,
    /// Output of `predict` for the same episode.
    #[arg(long)]
    prediction: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

/// Envelope for JSON artifacts: the effective configuration plus the payload.
#[derive(Serialize)]
struct Artifact<'a, T: Serialize> {
    config: &'a RunConfig,
    #[serde(flatten)]
    body: T,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if let Some(err) = cause.downcast_ref::<Error>() {
            return match err {
                Error::Io(_) => 3,
                Error::Numeric(_) => 4,
                _ => 2,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 3;
        }
    }
    2
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path).with_context(|| format!("reading {}", path.display()))?,
        None => RunConfig::default(),
    };
    match cli.command {
        Command::Gen(a) => {
            if let Some(s) = a.seed {
                cfg.seeds.dataset = s;
            }
            cfg.validate()?;
            gen(&cfg, a.n, &cfg.out_path(&a.out))
        }
        Command::Train(a) => {
            apply_train_flags(&mut cfg, &a);
            cfg.validate()?;
            cmd_train(&cfg, &a)
        }
        Command::Eval(a) => {
            apply_predict_flags(&mut cfg, &a.predict);
            let model = load_model(&a.checkpoint, &mut cfg)?;
            cfg.validate()?;
            cmd_eval(&cfg, &model, &a.data, &cfg.out_path(&a.report))
        }
        Command::Predict(a) => {
            apply_predict_flags(&mut cfg, &a.predict);
            let model = load_model(&a.checkpoint, &mut cfg)?;
            cfg.validate()?;
            cmd_predict(&cfg, &model, &a.data, a.episode, &cfg.out_path(&a.out))
        }
        Command::Plot(a) => {
            cfg.validate()?;
            cmd_plot(&cfg, &a, &cfg.out_path(&a.out))
        }
    }
}

fn apply_train_flags(cfg: &mut RunConfig, a: &TrainArgs) {
    if let Some(v) = a.steps {
        cfg.train.steps = v;
    }
    if let Some(v) = a.seed {
        cfg.train.seed = v;
    }
    if let Some(v) = a.batch_size {
        cfg.train.batch_size = v;
    }
    if let Some(v) = a.learning_rate {
        cfg.train.learning_rate = v;
    }
}

fn apply_predict_flags(cfg: &mut RunConfig, f: &PredictFlags) {
    if let Some(v) = f.candidates {
        cfg.eval.predict.n_candidates = v;
    }
    if let Some(v) = f.ddim_steps {
        cfg.eval.predict.ddim_steps = v;
    }
    if let Some(v) = f.seed {
        cfg.eval.seed = v;
    }
}

/// Loads checkpoint weights; the checkpoint's architecture replaces the configured one.
fn load_model(dir: &Path, cfg: &mut RunConfig) -> Result<Model<f32>> {
    let model = checkpoint::load_model::<f32>(dir).with_context(|| format!("loading checkpoint {}", dir.display()))?;
    cfg.model = model.config;
    Ok(model)
}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(Error::from)?;
    }
    Ok(())
}

fn write_json<T: Serialize>(cfg: &RunConfig, body: T, path: &Path) -> Result<()> {
    create_parent(path)?;
    let text = serde_json::to_string_pretty(&Artifact { config: cfg, body })?;
    fs::write(path, text + "\n").map_err(Error::from)?;
    Ok(())
}

/// The configuration next to an artifact whose own format has no room for it.
fn sidecar(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".config.toml");
    path.with_file_name(name)
}

fn read_episodes(path: &Path) -> Result<Vec<ObservationSequence>> {
    read_dataset(path).with_context(|| format!("reading {}", path.display()))
}

fn gen(cfg: &RunConfig, n: usize, out: &Path) -> Result<()> {
    let t0 = Instant::now();
    let episodes = render_dataset(cfg.seeds.dataset, n, &cfg.model.spec, &cfg.difficulty)?;
    create_parent(out)?;
    write_dataset(&episodes, out)?;
    fs::write(sidecar(out), cfg.to_toml()?).map_err(Error::from)?;
    let frames = (n * cfg.model.spec.n_past).max(1) as f64;
    let visible = |side: Side| {
        episodes
            .iter()
            .flat_map(|e| &e.frames)
            .filter(|f| f.valid(side))
            .count() as f64
            / frames
    };
    let both = episodes
        .iter()
        .filter(|e| e.gt.right.is_some() && e.gt.left.is_some())
        .count();
    println!("episodes: {n}");
    println!("first seed: {}", cfg.seeds.dataset);
    println!("right visible: {:.3} of past frames", visible(Side::Right));
    println!("left visible: {:.3} of past frames", visible(Side::Left));
    println!("two-handed episodes: {both}");
    println!("wrote {} in {:.2?}", out.display(), t0.elapsed());
    Ok(())
}

fn cmd_train(cfg: &RunConfig, a: &TrainArgs) -> Result<()> {
    let episodes = read_episodes(&a.data)?;
    let out = cfg.out_path(&a.out);
    let mut state = match &a.resume {
        Some(dir) => {
            let mut s = checkpoint::load::<f32>(dir).with_context(|| format!("loading checkpoint {}", dir.display()))?;
            s.config.steps = cfg.train.steps;
            s
        }
        None => TrainState::new(Model::new(cfg.model, cfg.seeds.init)?, cfg.train)?,
    };
    let mut effective = cfg.clone();
    effective.model = state.model.config;
    effective.train = state.config;

    let examples = prepare_examples(&episodes, &state.model, &state.config.ransac)?;
    let degraded = examples.iter().filter(|e| e.degraded).count();
    info!("{} training episodes ({degraded} with identity egomotion)", examples.len());

    let log_path = a.log.as_ref().map(|p| cfg.out_path(p)).unwrap_or_else(|| out.join("train_log.jsonl"));
    create_parent(&log_path)?;
    fs::create_dir_all(&out).map_err(Error::from)?;
    let append = a.resume.is_some() && log_path.exists();
    let file = fs::OpenOptions::new()
        .create(true)
        .append(append)
        .write(true)
        .truncate(!append)
        .open(&log_path)
        .map_err(Error::from)?;
    let mut log = BufWriter::new(file);
    if !append {
        writeln!(log, "{}", serde_json::to_string(&serde_json::json!({ "config": &effective }))?).map_err(Error::from)?;
    }

    let until = effective.train.steps;
    let every = a.checkpoint_every.unwrap_or(0);
    let t0 = Instant::now();
    while state.step < until {
        let stop = if every > 0 { (state.step / every + 1) * every } else { until }.min(until);
        let mut entries = Vec::new();
        let result = train(&mut state, &examples, stop, |b| {
            if b.step % 100 == 0 {
                info!("step {} total {:.4}", b.step, b.total);
            }
            entries.push(TrainLogEntry {
                step: b.step,
                breakdown: b.clone(),
                wall_ms: t0.elapsed().as_millis() as u64,
            });
        });
        for e in &entries {
            writeln!(log, "{}", to_line(e)?).map_err(Error::from)?;
        }
        log.flush().map_err(Error::from)?;
        if let Err(e) = result {
            if matches!(e, Error::Numeric(_)) {
                let snap = out.join("diverged");
                checkpoint::save(&state, &snap)?;
                eprintln!("saved the last finite state to {}", snap.display());
            }
            return Err(e.into());
        }
        checkpoint::save(&state, &out)?;
    }
    fs::write(out.join("run.toml"), effective.to_toml()?).map_err(Error::from)?;
    info!("checkpoint at step {} written to {}", state.step, out.display());
    Ok(())
}

fn cmd_eval(cfg: &RunConfig, model: &Model<f32>, data: &Path, report: &Path) -> Result<()> {
    let episodes = read_episodes(data)?;
    let r = evaluate(&episodes, model, &cfg.eval)?;
    println!("{}", r.table());
    write_json(cfg, serde_json::json!({ "report": r }), report)
}

fn episode_at(episodes: Vec<ObservationSequence>, index: usize) -> Result<ObservationSequence> {
    let n = episodes.len();
    episodes
        .into_iter()
        .nth(index)
        .ok_or_else(|| Error::Validation(format!("episode {index} out of range; the file holds {n}")).into())
}

fn cmd_predict(cfg: &RunConfig, model: &Model<f32>, data: &Path, index: usize, out: &Path) -> Result<()> {
    let ep = episode_at(read_episodes(data)?, index)?;
    let p = predict(&ep, model, &cfg.eval.predict, cfg.eval.seed)?;
    write_json(cfg, serde_json::json!({ "episode": index, "prediction": p }), out)
}

#[derive(serde::Deserialize)]
struct PredictionFile {
    prediction: egohoi::inference::Prediction,
}

fn cmd_plot(cfg: &RunConfig, a: &PlotArgs, out: &Path) -> Result<()> {
    let ep = episode_at(read_episodes(&a.data)?, a.episode)?;
    let prediction = match &a.prediction {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(Error::from)
                .with_context(|| format!("reading {}", path.display()))?;
            let f: PredictionFile = serde_json::from_str(&text).map_err(|e| Error::Validation(format!("prediction file: {e}")))?;
            if f.prediction.episode_seed != ep.seed {
                return Err(Error::Validation(format!(
                    "prediction is for episode seed {}, not {}",
                    f.prediction.episode_seed, ep.seed
                ))
                .into());
            }
            Some(f.prediction)
        }
        None => None,
    };
    let svg = plot::render(&ep, prediction.as_ref(), cfg)?;
    create_parent(out)?;
    let mut f = File::create(out).map_err(Error::from)?;
    f.write_all(svg.as_bytes()).map_err(Error::from)?;
    Ok(())
}
