mod config;

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use robad_core::data::{encode_users, gen_synthetic, load_corpus, write_corpus};
use robad_core::train::{
    ablate, ablation_table, cross_validate, evaluate, load_checkpoint, prepare_folds, relative_drop, robustness_eval,
    save_checkpoint, sweep, sweep_table, FoldMetrics, Knob, MetricsReport, ParamGrid,
};
use robad_core::{AttackKind, AttackSpec, Error, Model, RawUser, Vocab};

use config::RunConfigFile;

const RUN_RECORD: &str = "run.toml";
const METRICS_FILE: &str = "metrics.json";

/// Error with the process exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        CliError {
            code: 2,
            message: message.into(),
        }
    }

    fn data(e: Error) -> Self {
        let code = if matches!(e, Error::Config(_)) { 2 } else { 3 };
        CliError {
            code,
            message: e.to_string(),
        }
    }

    fn artifact(e: Error) -> Self {
        let code = match e {
            Error::Io { .. } | Error::Format(_) | Error::Compatibility(_) => 4,
            Error::Config(_) => 2,
            _ => 1,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) => 2,
            Error::Parse { .. } | Error::Contract(_) => 3,
            _ => 1,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

type CliResult<T> = Result<T, CliError>;

#[derive(Parser)]
#[command(name = "robad", version, about = "Adversary-aware bad-actor sequence classifier")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic two-topic corpus.
    GenSynth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        users: usize,
        #[arg(long, default_value_t = 0.9)]
        sep: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Cross-validate and write per-fold checkpoints, vocabularies, logs and metrics.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-evaluate the checkpoints of a training run on their test folds.
    Eval {
        #[command(flatten)]
        saved: SavedRun,
    },
    /// Evaluate the checkpoints of a training run under one next-post attack.
    AttackEval {
        #[command(flatten)]
        saved: SavedRun,
        /// copy, foreign, ngram or identity.
        #[arg(long)]
        attack: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Cross-validate the full model and its two ablations on shared folds.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Cross-validate every point of a hyperparameter grid.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        /// TOML file mapping hyperparameters to value arrays.
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Config file plus the flags that override its keys.
#[derive(Args)]
struct RunArgs {
    /// Flat TOML run config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Corpus file, one JSON user record per line.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    w_contrastive: Option<f64>,
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Folds trained in parallel.
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Args)]
struct SavedRun {
    /// Output directory of a `train` run.
    #[arg(long)]
    run: PathBuf,
    /// Corpus; defaults to the one recorded by the run.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Also write the metrics to this file.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    jobs: Option<usize>,
}

impl RunArgs {
    fn settings(&self, out: Option<PathBuf>) -> CliResult<RunConfigFile> {
        let base = match &self.config {
            Some(p) => RunConfigFile::load(p)?,
            None => RunConfigFile::default(),
        };
        Ok(base.merge(RunConfigFile {
            data: self.data.clone(),
            out,
            seed: self.seed,
            epochs: self.epochs,
            variant: self.variant.clone(),
            w_contrastive: self.w_contrastive,
            learning_rate: self.learning_rate,
            jobs: self.jobs,
            ..Default::default()
        }))
    }
}

fn required(path: Option<PathBuf>, what: &str) -> CliResult<PathBuf> {
    path.ok_or_else(|| CliError::config(format!("no {what} given (flag or config key `{what}`)")))
}

fn read_corpus(path: &Path) -> CliResult<Vec<RawUser>> {
    let users = load_corpus(path).map_err(CliError::data)?;
    eprintln!("loaded {} users from {}", users.len(), path.display());
    Ok(users)
}

fn write_file(path: &Path, contents: &str) -> CliResult<()> {
    fs::write(path, contents).map_err(|e| CliError {
        code: 1,
        message: format!("cannot write {}: {e}", path.display()),
    })
}

fn create_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(|e| CliError {
        code: 1,
        message: format!("cannot create {}: {e}", path.display()),
    })
}

fn gen_synth(out: &Path, users: usize, sep: f64, seed: u64) -> CliResult<()> {
    let corpus = gen_synthetic(users, sep, seed)?;
    write_corpus(&corpus, out).map_err(CliError::artifact)?;
    eprintln!("wrote {} users to {}", corpus.len(), out.display());
    Ok(())
}

fn train(run: &RunArgs, out: Option<PathBuf>) -> CliResult<()> {
    let settings = run.settings(out)?;
    let cv = settings.resolve()?;
    let data = required(settings.data.clone(), "data")?;
    let out = required(settings.out.clone(), "out")?;
    let raw = read_corpus(&data)?;
    let result = cross_validate(&cv, &raw)?;
    create_dir(&out)?;
    let record = RunConfigFile::from_resolved(&cv, Some(data), Some(out.clone()));
    write_file(&out.join(RUN_RECORD), &record.to_toml())?;
    for f in &result.folds {
        let i = f.fold;
        save_checkpoint(&f.model.params, &f.model.config, out.join(format!("fold{i}.ckpt")))
            .map_err(CliError::artifact)?;
        f.vocab
            .save(out.join(format!("fold{i}.vocab")))
            .map_err(CliError::artifact)?;
        write_file(&out.join(format!("fold{i}.log")), &f.training.log_text())?;
        eprintln!(
            "fold {i}: f1 {:.4}, best epoch {} of {}",
            f.metrics.f1,
            f.training.best_epoch,
            f.training.epochs.len()
        );
    }
    write_file(&out.join(METRICS_FILE), &result.report.to_json())?;
    print!("{}", result.report.to_csv());
    Ok(())
}

/// Re-derives the folds of a saved run and scores each fold checkpoint on
/// its test users under `attacks`, or the run's own attacks if `None`.
fn evaluate_saved(saved: &SavedRun, attacks: Option<&[AttackSpec]>) -> CliResult<MetricsReport> {
    let record_path = saved.run.join(RUN_RECORD);
    if !record_path.exists() {
        return Err(CliError {
            code: 4,
            message: format!("missing run record {}", record_path.display()),
        });
    }
    let mut record = RunConfigFile::load(&record_path)?;
    if saved.jobs.is_some() {
        record.jobs = saved.jobs;
    }
    let cv = record.resolve()?;
    let attacks = attacks.unwrap_or(&cv.eval_attacks);
    let data = required(saved.data.clone().or(record.data.clone()), "data")?;
    let raw = read_corpus(&data)?;
    let (users, folds) = prepare_folds(&cv, &raw)?;
    let d = cv.train.model.tokens_per_post;
    let mut per_fold = Vec::with_capacity(folds.len());
    for (i, fold) in folds.iter().enumerate() {
        let vocab = Vocab::load(saved.run.join(format!("fold{i}.vocab"))).map_err(CliError::artifact)?;
        let mut mc = cv.train.model.clone();
        mc.vocab_size = vocab.len();
        let params = load_checkpoint(saved.run.join(format!("fold{i}.ckpt")), &mc).map_err(CliError::artifact)?;
        let model = Model::from_params(mc, params)?;
        let pick = |idx: &[usize]| idx.iter().map(|&j| users[j].clone()).collect::<Vec<_>>();
        let test = encode_users(&pick(&fold.test), &vocab, d);
        let source = encode_users(&pick(&fold.train), &vocab, d);
        let scores = evaluate(&model, &test)?;
        let after = robustness_eval(&model, &test, &source, attacks)?;
        eprintln!("fold {i}: f1 {:.4}", scores.f1);
        per_fold.push(FoldMetrics::new(i, scores, after));
    }
    Ok(MetricsReport::from_folds(per_fold)?)
}

fn emit_report(report: &MetricsReport, out: Option<&Path>) -> CliResult<()> {
    let json = report.to_json();
    if let Some(p) = out {
        write_file(p, &json)?;
    }
    print!("{json}");
    Ok(())
}

fn eval(saved: &SavedRun) -> CliResult<()> {
    let report = evaluate_saved(saved, None)?;
    emit_report(&report, saved.out.as_deref())
}

fn attack_eval(saved: &SavedRun, attack: &str, seed: u64) -> CliResult<()> {
    let kind: AttackKind = attack
        .parse()
        .map_err(|_| CliError::config(format!("unknown attack `{attack}`")))?;
    let report = evaluate_saved(saved, Some(&[AttackSpec::new(kind, seed)]))?;
    if let Some(p) = &saved.out {
        write_file(p, &report.to_json())?;
    }
    let key = kind.as_str();
    let after = report.f1_after_attack[key];
    println!("f1 {:.6}", report.f1);
    println!("f1_after_{key} {after:.6}");
    println!("relative drop {:.3}%", relative_drop(report.f1, after));
    Ok(())
}

fn ablate_cmd(run: &RunArgs, out: Option<PathBuf>) -> CliResult<()> {
    let settings = run.settings(out)?;
    let cv = settings.resolve()?;
    let raw = read_corpus(&required(settings.data.clone(), "data")?)?;
    let rows = ablate(&cv, &raw)?;
    let table = ablation_table(&rows);
    if let Some(out) = &settings.out {
        create_dir(out)?;
        write_file(&out.join("ablation.csv"), &table)?;
        for r in &rows {
            write_file(
                &out.join(format!("{}.metrics.json", r.variant)),
                &r.result.report.to_json(),
            )?;
        }
    }
    print!("{table}");
    Ok(())
}

/// Reads a sweep grid: one TOML key per hyperparameter, each an array of
/// values, e.g. `w_contrastive = [0.0, 0.1]`.
fn load_grid(path: &Path) -> CliResult<ParamGrid> {
    let text =
        fs::read_to_string(path).map_err(|e| CliError::config(format!("cannot read grid {}: {e}", path.display())))?;
    let table: BTreeMap<String, toml::Value> = toml::from_str(&text)
        .map_err(|e: toml::de::Error| CliError::config(format!("{}: {}", path.display(), e.message())))?;
    let mut axes = Vec::new();
    for key in Knob::KEYS {
        let Some(value) = table.get(key) else { continue };
        let values = value
            .as_array()
            .ok_or_else(|| CliError::config(format!("grid key `{key}` must be an array")))?;
        let axis = values
            .iter()
            .map(|v| {
                let x = v
                    .as_float()
                    .or_else(|| v.as_integer().map(|i| i as f64))
                    .ok_or_else(|| CliError::config(format!("grid key `{key}` holds a non-number")))?;
                Ok(Knob::parse(key, x)?)
            })
            .collect::<CliResult<Vec<Knob>>>()?;
        axes.push(axis);
    }
    if let Some(unknown) = table.keys().find(|k| !Knob::KEYS.contains(&k.as_str())) {
        return Err(CliError::config(format!(
            "unknown grid key `{unknown}` (expected one of {})",
            Knob::KEYS.join(", ")
        )));
    }
    let grid = ParamGrid::cartesian(&axes);
    if grid.is_empty() {
        return Err(CliError::config(format!("grid {} has no points", path.display())));
    }
    Ok(grid)
}

fn sweep_cmd(run: &RunArgs, grid: &Path, out: Option<PathBuf>) -> CliResult<()> {
    let settings = run.settings(out)?;
    let cv = settings.resolve()?;
    let grid = load_grid(grid)?;
    let raw = read_corpus(&required(settings.data.clone(), "data")?)?;
    let rows = sweep(&cv, &grid, &raw)?;
    let table = sweep_table(&rows);
    if let Some(out) = &settings.out {
        create_dir(out)?;
        write_file(&out.join("sweep.csv"), &table)?;
    }
    print!("{table}");
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::GenSynth { out, users, sep, seed } => gen_synth(&out, users, sep, seed),
        Command::Train { run, out } => train(&run, out),
        Command::Eval { saved } => eval(&saved),
        Command::AttackEval { saved, attack, seed } => attack_eval(&saved, &attack, seed),
        Command::Ablate { run, out } => ablate_cmd(&run, out),
        Command::Sweep { run, grid, out } => sweep_cmd(&run, &grid, out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code)
        }
    }
}
