//! Batch commands behind the `slfc` binary.

mod config;

pub use config::{PolicyKind, RunConfig, SweepConfig, TaskRef};

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;

use crate::baselines::{BcObjective, BcParams, MdnObjective, MdnParams, KIND_BC, KIND_MDN};
use crate::elbo::LossWeights;
use crate::error::{Error, Result};
use crate::eval::{
    curve_csv, dataset_segmentation_accuracy, frechet_csv, frechet_noise_sweep, robustness_curve, run_episodes,
    segment, skills_csv, stability_csv, success_rate, summary_csv, EvalReport, FrechetRow,
};
use crate::fmt::sig9;
use crate::model::checkpoint::{Checkpoint, KIND_MODEL};
use crate::model::{ModelConfig, ModelParams, ParamTree, Variant};
use crate::simenv::{
    generate_dataset, observation_std, read_jsonl, write_jsonl, HybridTaskSpec, Policy, RolloutMode, RolloutOptions,
    Trajectory,
};
use crate::train::{check_dataset, fit, run, AdamState, ElboObjective, FitSession, Objective, TrainConfig, TrainLog};

/// Environment variable that overrides the config file's seed.
pub const SEED_ENV: &str = "SLFC_SEED";

#[derive(Debug, Parser)]
#[command(name = "slfc", version, about = "Learn switching latent feedback controllers from demonstrations")]
pub struct Cli {
    /// Cap on worker threads.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate demonstrations of a synthetic task.
    Gen(GenArgs),
    /// Fit a policy to a dataset.
    Train(TrainArgs),
    /// Closed-loop metrics of a trained policy.
    Eval(EvalArgs),
    /// Per-step skill labels of a dataset.
    Segment(SegmentArgs),
    /// Train and score every model variant over several seeds.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[command(flatten)]
    pub common: Common,
    /// Preset task name.
    #[arg(long)]
    pub task: Option<String>,
    #[arg(long)]
    pub n_demos: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint path.
    #[arg(long)]
    pub out: PathBuf,
    /// Per-epoch loss CSV; defaults to the checkpoint path with a
    /// `.trainlog.csv` suffix.
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub policy: Option<PolicyKind>,
    #[arg(long)]
    pub variant: Option<Variant>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// Continue from a checkpoint's optimizer state.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Training data, for the observation std and reference paths.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub episodes: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SegmentArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub episodes: Option<usize>,
}

/// Process exit status for an error: 2 for bad input, 3 for numerical
/// failure, 4 for I/O.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Io { .. } => 4,
        Error::NonFinite(_) | Error::Degenerate(_) | Error::Domain(_) => 3,
        Error::Config(_) | Error::Parse(_) | Error::Shape(_) | Error::Index { .. } | Error::Contract(_) => 2,
    }
}

/// Parses `args`, runs the command and returns the exit status.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn execute(cli: Cli) -> Result<()> {
    match cli.threads {
        Some(0) => Err(Error::config("--threads must be at least 1")),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::config(format!("thread pool: {e}")))?
            .install(|| dispatch(cli.command)),
        None => dispatch(cli.command),
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Gen(a) => cmd_gen(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Segment(a) => cmd_segment(a),
        Command::Sweep(a) => cmd_sweep(a),
    }
}

/// Defaults, then the file, then `SLFC_SEED`, then `flag_seed`.
fn load_config(common: &Common, edit: impl FnOnce(&mut RunConfig)) -> Result<(RunConfig, HybridTaskSpec)> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Ok(v) = std::env::var(SEED_ENV) {
        cfg.seed = v
            .trim()
            .parse()
            .map_err(|_| Error::config(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    edit(&mut cfg);
    let spec = cfg.finalize()?;
    Ok((cfg, spec))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_data(path: &Path) -> Result<Vec<Trajectory>> {
    let data = read_jsonl(path)?;
    if data.is_empty() {
        return Err(Error::config(format!("{} holds no trajectories", path.display())));
    }
    Ok(data)
}

fn cmd_gen(a: GenArgs) -> Result<()> {
    let (cfg, spec) = load_config(&a.common, |c| {
        if let Some(t) = &a.task {
            c.task = TaskRef::Preset(t.clone());
        }
        if let Some(n) = a.n_demos {
            c.n_demos = n;
        }
    })?;
    let data = generate_dataset(&spec, cfg.n_demos, cfg.seed)?;
    write_jsonl(&a.out, &data)?;
    let mean_len = data.iter().map(|t| t.len()).sum::<usize>() as f64 / data.len() as f64;
    println!("demos {} mean_length {:.3} -> {}", data.len(), mean_len, a.out.display());
    Ok(())
}

/// Parameters the CLI can train, save and resume.
trait Trainable: ParamTree + Clone + Sized {
    fn save_checkpoint(&self) -> Result<Checkpoint>;
}

impl Trainable for ModelParams {
    fn save_checkpoint(&self) -> Result<Checkpoint> {
        self.to_checkpoint()
    }
}

impl Trainable for BcParams {
    fn save_checkpoint(&self) -> Result<Checkpoint> {
        self.to_checkpoint()
    }
}

impl Trainable for MdnParams {
    fn save_checkpoint(&self) -> Result<Checkpoint> {
        self.to_checkpoint()
    }
}

/// Trains from `init` or from the optimizer state of `resume`, writing a
/// resumable checkpoint to `out` on every interval and at the end.
fn train_to<O>(
    objective: &O,
    init: O::Params,
    resume: Option<(Checkpoint, O::Params)>,
    data: &[Trajectory],
    model_cfg: &ModelConfig,
    train: &TrainConfig,
    out: &Path,
) -> Result<TrainLog>
where
    O: Objective,
    O::Params: Trainable,
{
    let (obs, act) = check_dataset(data, model_cfg)?;
    let mut session = match resume {
        None => FitSession::fresh(init),
        Some((ck, params)) => {
            let state = ck
                .train_state
                .as_ref()
                .ok_or_else(|| Error::config("resume checkpoint has no optimizer state"))?;
            if state.seed != train.seed {
                return Err(Error::config(format!(
                    "resume checkpoint was trained with seed {}, run seed is {}",
                    state.seed, train.seed
                )));
            }
            FitSession {
                adam: AdamState::from_train_state(&params, state)?,
                params,
                epochs_done: state.epoch,
                on_checkpoint: None,
            }
        }
    };
    let mut save = |p: &O::Params, adam: &AdamState, done: u64| -> Result<()> {
        let mut ck = p.save_checkpoint()?;
        ck.train_state = Some(adam.to_train_state(p, train.seed, done));
        ck.save(out)
    };
    session.on_checkpoint = Some(&mut save);
    let (_, _, log) = run(objective, session, &obs, &act, train)?;
    Ok(log)
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let (cfg, _) = load_config(&a.common, |c| {
        if let Some(p) = a.policy {
            c.policy = p;
        }
        if let Some(v) = a.variant {
            c.model = c.model.clone().with_variant(v);
        }
        if let Some(e) = a.epochs {
            c.train.epochs = e;
        }
        if let Some(b) = a.batch_size {
            c.train.batch_size = b;
        }
        if let Some(lr) = a.learning_rate {
            c.train.learning_rate = lr;
        }
    })?;
    let data = read_data(&a.data)?;
    let resume = a.resume.as_deref().map(Checkpoint::load).transpose()?;
    let mut rng = cfg.train.init_rng();
    let log = match cfg.policy {
        PolicyKind::Slfc => {
            let init = ModelParams::init(&cfg.model, &mut rng)?;
            let resume = resume
                .map(|ck| {
                    let p = ModelParams::from_checkpoint(&ck)?;
                    if p.config != cfg.model {
                        return Err(Error::config("resume checkpoint has a different model configuration"));
                    }
                    Ok((ck, p))
                })
                .transpose()?;
            let objective = ElboObjective {
                weights: LossWeights::for_model(&init),
            };
            train_to(&objective, init, resume, &data, &cfg.model, &cfg.train, &a.out)?
        }
        PolicyKind::Bc => {
            let init = BcParams::init(&cfg.bc, &mut rng)?;
            let resume = resume.map(|ck| Ok::<_, Error>((BcParams::from_checkpoint(&ck)?, ck))).transpose()?;
            let resume = resume.map(|(p, ck)| (ck, p));
            train_to(&BcObjective, init, resume, &data, &cfg.model, &cfg.train, &a.out)?
        }
        PolicyKind::Mdn => {
            let init = MdnParams::init(&cfg.mdn, &mut rng)?;
            let resume = resume.map(|ck| Ok::<_, Error>((MdnParams::from_checkpoint(&ck)?, ck))).transpose()?;
            let resume = resume.map(|(p, ck)| (ck, p));
            train_to(&MdnObjective, init, resume, &data, &cfg.model, &cfg.train, &a.out)?
        }
    };
    let log_path = a.log.unwrap_or_else(|| {
        let mut s = a.out.clone().into_os_string();
        s.push(".trainlog.csv");
        PathBuf::from(s)
    });
    write_text(&log_path, &log.to_csv())?;
    match log.epochs.last() {
        Some(r) => println!("epochs {} final_loss {} -> {}", r.epoch, sig9(r.loss), a.out.display()),
        None => println!("no epochs run -> {}", a.out.display()),
    }
    Ok(())
}

/// A checkpoint of any trainable policy.
#[allow(clippy::large_enum_variant)]
pub enum LoadedPolicy {
    Slfc(ModelParams),
    Bc(BcParams),
    Mdn(MdnParams),
}

impl LoadedPolicy {
    pub fn load(path: &Path) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        match ck.kind.as_str() {
            KIND_MODEL => Ok(LoadedPolicy::Slfc(ModelParams::from_checkpoint(&ck)?)),
            KIND_BC => Ok(LoadedPolicy::Bc(BcParams::from_checkpoint(&ck)?)),
            KIND_MDN => Ok(LoadedPolicy::Mdn(MdnParams::from_checkpoint(&ck)?)),
            other => Err(Error::Parse(format!("unknown checkpoint kind {other:?}"))),
        }
    }

    pub fn as_policy(&self) -> &dyn Policy {
        match self {
            LoadedPolicy::Slfc(p) => p,
            LoadedPolicy::Bc(p) => p,
            LoadedPolicy::Mdn(p) => p,
        }
    }
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let (cfg, spec) = load_config(&a.common, |c| {
        if let Some(e) = a.episodes {
            c.eval.episodes = e;
        }
    })?;
    let data = read_data(&a.data)?;
    let policy = LoadedPolicy::load(&a.ckpt)?;
    std::fs::create_dir_all(&a.out_dir).map_err(|e| Error::io(&a.out_dir, e))?;
    let dir = &a.out_dir;
    let (rate, auc) = match &policy {
        LoadedPolicy::Slfc(p) => {
            let report = EvalReport::evaluate(p, &spec, &data, &cfg.eval)?;
            write_text(&dir.join("curve.csv"), &curve_csv(&report.curve))?;
            write_text(&dir.join("skills.csv"), &skills_csv(&report.skills))?;
            write_text(&dir.join("stability.csv"), &stability_csv(&report.stability))?;
            write_text(&dir.join("frechet.csv"), &frechet_csv(&report.frechet))?;
            write_text(&dir.join("summary.csv"), &summary_csv(&report))?;
            (report.success_rate, report.curve.auc)
        }
        other => {
            // Baselines have no latent skills; only the closed-loop metrics apply.
            let p = other.as_policy();
            let std = observation_std(&data)?;
            let curve = robustness_curve(p, &spec, &cfg.eval.noise_scales, cfg.eval.episodes, cfg.seed, &std)?;
            let runs = run_episodes(p, &spec, &RolloutOptions::new(RolloutMode::Mean), cfg.eval.episodes, cfg.seed)
                .into_iter()
                .collect::<Result<Vec<_>>>()?;
            let rate = success_rate(&runs)?;
            write_text(&dir.join("curve.csv"), &curve_csv(&curve))?;
            write_text(
                &dir.join("summary.csv"),
                &format!("metric,value\nsuccess_rate,{}\nauc,{}\n", sig9(rate), sig9(curve.auc)),
            )?;
            (rate, curve.auc)
        }
    };
    println!("success_rate {} auc {} -> {}", sig9(rate), sig9(auc), dir.display());
    Ok(())
}

#[derive(Serialize)]
struct SegmentLine<'a> {
    task_id: &'a str,
    skills: Vec<usize>,
}

fn cmd_segment(a: SegmentArgs) -> Result<()> {
    let params = ModelParams::load(&a.ckpt)?;
    let data = read_data(&a.data)?;
    let mut text = String::new();
    for t in &data {
        if t.obs.first().is_some_and(|o| o.len() != params.config.obs_dim) {
            return Err(Error::config(format!(
                "trajectory {} has O={}, model expects O={}",
                t.task_id,
                t.obs[0].len(),
                params.config.obs_dim
            )));
        }
        let line = SegmentLine {
            task_id: &t.task_id,
            skills: segment(&params, t)?,
        };
        text.push_str(&serde_json::to_string(&line).map_err(|e| Error::Parse(e.to_string()))?);
        text.push('\n');
    }
    write_text(&a.out, &text)?;
    match dataset_segmentation_accuracy(&params, &data)? {
        Some(acc) => println!("segmentation_accuracy {}", sig9(acc)),
        None => println!("segmented {} trajectories (no labels)", data.len()),
    }
    Ok(())
}

/// Robustness of one trained variant.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub variant: Variant,
    pub seed: u64,
    pub success_rate: f64,
    pub auc: f64,
}

/// Trains every variant once per seed and scores its robustness curve.
/// Also returns the trained models, ordered like the rows.
pub fn ablation_sweep(
    data: &[Trajectory],
    spec: &HybridTaskSpec,
    model: &ModelConfig,
    train: &TrainConfig,
    cfg: &RunConfig,
    seeds: &[u64],
) -> Result<Vec<(SweepRow, ModelParams)>> {
    let std = observation_std(data)?;
    let jobs: Vec<(Variant, u64)> = Variant::ALL
        .iter()
        .flat_map(|v| seeds.iter().map(move |s| (*v, *s)))
        .collect();
    jobs.par_iter()
        .map(|&(variant, seed)| {
            let tc = TrainConfig { seed, ..train.clone() };
            let (params, _) = fit(data, &model.clone().with_variant(variant), &tc)?;
            let curve = robustness_curve(&params, spec, &cfg.eval.noise_scales, cfg.eval.episodes, seed, &std)?;
            let row = SweepRow {
                variant,
                seed,
                success_rate: curve.success_rates[0],
                auc: curve.auc,
            };
            Ok((row, params))
        })
        .collect()
}

fn cmd_sweep(a: SweepArgs) -> Result<()> {
    let (cfg, spec) = load_config(&a.common, |c| {
        if let Some(e) = a.epochs {
            c.train.epochs = e;
        }
        if let Some(e) = a.episodes {
            c.eval.episodes = e;
        }
    })?;
    if cfg.sweep.seeds.is_empty() {
        return Err(Error::config("sweep needs at least one seed"));
    }
    let data = read_data(&a.data)?;
    let results = ablation_sweep(&data, &spec, &cfg.model, &cfg.train, &cfg, &cfg.sweep.seeds)?;
    std::fs::create_dir_all(&a.out_dir).map_err(|e| Error::io(&a.out_dir, e))?;

    let mut rows = String::from("variant,seed,success_rate,auc\n");
    for (r, _) in &results {
        rows.push_str(&format!("{},{},{},{}\n", r.variant, r.seed, sig9(r.success_rate), sig9(r.auc)));
    }
    write_text(&a.out_dir.join("sweep.csv"), &rows)?;

    let mut summary = String::from("variant,mean_auc,mean_success_rate\n");
    for v in Variant::ALL {
        let mine: Vec<&SweepRow> = results.iter().map(|(r, _)| r).filter(|r| r.variant == v).collect();
        let n = mine.len() as f64;
        let auc = mine.iter().map(|r| r.auc).sum::<f64>() / n;
        let sr = mine.iter().map(|r| r.success_rate).sum::<f64>() / n;
        summary.push_str(&format!("{v},{},{}\n", sig9(auc), sig9(sr)));
        println!("{v} mean_auc {} mean_success_rate {}", sig9(auc), sig9(sr));
    }
    write_text(&a.out_dir.join("sweep_summary.csv"), &summary)?;

    // Latent deviation of each variant trained with the first seed.
    let first = cfg.sweep.seeds[0];
    let variants: Vec<(String, &ModelParams)> = results
        .iter()
        .filter(|(r, _)| r.seed == first)
        .map(|(r, p)| (r.variant.to_string(), p))
        .collect();
    let frechet: Vec<FrechetRow> =
        frechet_noise_sweep(&variants, &data, &spec, &cfg.eval.frechet_levels, cfg.eval.episodes, first)?;
    write_text(&a.out_dir.join("frechet.csv"), &frechet_csv(&frechet))?;
    Ok(())
}
