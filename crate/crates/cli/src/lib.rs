//! `sefoss` command-line front end.
//!
//! Exit codes: 0 success, 1 check failure, 2 config error, 3 artifact error.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use sefoss_core::checkpoint::Archive;
use sefoss_core::config::{parse_override, Mode, RunConfig};
use sefoss_core::data::{generate_gaussian_openset, load_dataset, ood_samples, save_dataset, OodKind};
use sefoss_core::energy::write_score_dump;
use sefoss_core::rng::tag;
use sefoss_core::selftest::{check_term, Term, TOLERANCE};
use sefoss_core::tape::Primitive;
use sefoss_core::trainer::{evaluate, run_experiment, score_records, EvalResult, Run};
use sefoss_core::Error as CoreError;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_ARTIFACT: i32 = 3;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("check failed: {0}")]
    Check(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("artifact error: {0}")]
    Artifact(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Check(_) => EXIT_CHECK,
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Artifact(_) => EXIT_ARTIFACT,
        }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::Config(m) => CliError::Config(m),
            e @ (CoreError::Checkpoint(_)
            | CoreError::CheckpointVersion { .. }
            | CoreError::Format(_)
            | CoreError::Io(_)
            | CoreError::Csv(_)
            | CoreError::Json(_)) => CliError::Artifact(e.to_string()),
            e => CliError::Check(e.to_string()),
        }
    }
}

fn artifact(e: impl std::fmt::Display) -> CliError {
    CliError::Artifact(e.to_string())
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "sefoss", version, about = "Open-set semi-supervised training on synthetic data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one model and write metrics.csv, summary.json and checkpoint.bin.
    Train(TrainArgs),
    /// Train one model per (OOD fraction, mode) pair and aggregate sweep.csv.
    Sweep(SweepArgs),
    /// Evaluate a checkpoint's EMA parameters, optionally on unseen OOD data.
    Eval(EvalArgs),
    /// Finite-difference check of every loss term.
    Gradcheck(GradcheckArgs),
    /// Print the configuration key reference (CONFIG.md).
    ConfigDoc {
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Debug, Clone)]
struct ConfigArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides applied after the file, e.g. `--set K=10 K_p=5`.
    #[arg(long = "set", value_name = "KEY=VALUE", num_args = 1..)]
    set: Vec<String>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    mode: Option<String>,
    /// Also write `checkpoint_<step>.bin` every N steps.
    #[arg(long, value_name = "N")]
    checkpoint_every: Option<usize>,
    /// Continue from a checkpoint written by this configuration.
    #[arg(long, value_name = "PATH")]
    resume: Option<PathBuf>,
    /// Also write the generated dataset as `dataset.csv` (plus `dataset.csv.hidden`).
    #[arg(long)]
    save_data: bool,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Comma-separated OOD fractions in [0, 1].
    #[arg(long, default_value = "0,0.25,0.5,0.75,1")]
    fractions: String,
    /// Comma-separated modes.
    #[arg(long, default_value = "sefoss,fixmatch_baseline")]
    modes: String,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset CSV written by an earlier run.
    #[arg(long, conflicts_with = "gen")]
    data: Option<PathBuf>,
    /// Config whose synthetic dataset is regenerated for evaluation.
    #[arg(long)]
    gen: Option<PathBuf>,
    /// Also score a freshly generated OOD distribution of this kind.
    #[arg(long, value_name = "KIND")]
    unseen_ood: Option<String>,
    #[arg(long = "set", value_name = "KEY=VALUE", num_args = 1..)]
    set: Vec<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 100)]
    trials: u64,
    #[arg(long, default_value_t = 1e-5)]
    eps: f64,
    /// First instance seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Test hook: scale one primitive's adjoint, as `name` or `name:factor`.
    #[arg(long, hide = true)]
    corrupt: Option<String>,
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::ConfigDoc { out } => cmd_config_doc(out),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Reads the config file (which may also name `out`) and applies overrides.
fn load_config(args: &ConfigArgs) -> CliResult<(RunConfig, Option<PathBuf>)> {
    let mut cfg = RunConfig::default();
    let mut out = None;
    if let Some(path) = &args.config {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        // `out` belongs to the CLI; blank it so line numbers stay intact.
        let mut kept = Vec::new();
        for line in text.lines() {
            let body = line.split('#').next().unwrap_or("");
            match body.split_once('=') {
                Some((k, v)) if k.trim() == "out" => {
                    out = Some(PathBuf::from(v.trim()));
                    kept.push("");
                }
                _ => kept.push(line),
            }
        }
        cfg.apply_text(&kept.join("\n"))?;
    }
    for s in &args.set {
        let (k, v) = parse_override(s)?;
        if k == "out" {
            out = Some(PathBuf::from(v));
        } else {
            cfg.set(&k, &v)?;
        }
    }
    Ok((cfg, out))
}

fn cmd_train(args: TrainArgs) -> CliResult<()> {
    let start = Instant::now();
    let (mut cfg, file_out) = load_config(&args.cfg)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(mode) = &args.mode {
        cfg.mode = mode.parse::<Mode>()?;
    }
    cfg.validate()?;
    let out = args
        .out
        .or(file_out)
        .ok_or_else(|| CliError::Config("no output directory (use --out or `out = DIR`)".into()))?;
    std::fs::create_dir_all(&out).map_err(artifact)?;

    let data = generate_gaussian_openset(cfg.seed, &cfg.data)?;
    if args.save_data {
        save_dataset(&out.join("dataset.csv"), &data)?;
    }
    let mut run = match &args.resume {
        Some(path) => Run::resume(cfg.clone(), data, &Archive::load(path)?)?,
        None => Run::new(cfg.clone(), data)?,
    };
    while !run.is_done() {
        run.step()?;
        let k = run.state().step;
        if args.checkpoint_every.is_some_and(|n| n > 0 && k % n == 0) {
            run.checkpoint().save(&out.join(format!("checkpoint_{k}.bin")))?;
        }
    }
    let artifacts = run.finish();
    artifacts.write_to_dir(&out, start.elapsed().as_secs_f64())?;
    let f = artifacts.final_eval;
    println!(
        "mode={} seed={} acc_id={} auroc_energy={} auroc_confidence={}",
        cfg.mode, cfg.seed, f.acc_id, f.auroc_energy, f.auroc_confidence
    );
    Ok(())
}

fn parse_list<T, F>(s: &str, what: &str, parse: F) -> CliResult<Vec<T>>
where
    F: Fn(&str) -> Option<T>,
{
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| parse(t).ok_or_else(|| CliError::Config(format!("invalid {what} `{t}`"))))
        .collect()
}

fn sweep_threads() -> usize {
    std::env::var("SEFOSS_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

fn cmd_sweep(args: SweepArgs) -> CliResult<()> {
    let (base, file_out) = load_config(&args.cfg)?;
    let fractions = parse_list(&args.fractions, "fraction", |t| {
        t.parse::<f64>().ok().filter(|f| (0.0..=1.0).contains(f))
    })?;
    let modes = parse_list(&args.modes, "mode", |t| t.parse::<Mode>().ok())?;
    let out = args
        .out
        .or(file_out)
        .ok_or_else(|| CliError::Config("no output directory (use --out or `out = DIR`)".into()))?;

    let mut jobs = Vec::new();
    for &f in &fractions {
        for &m in &modes {
            let mut cfg = base.clone();
            cfg.data.ood_fraction = f;
            cfg.mode = m;
            cfg.validate()?;
            jobs.push((f, m, cfg));
        }
    }
    std::fs::create_dir_all(&out).map_err(artifact)?;

    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<CliResult<EvalResult>>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
    let threads = sweep_threads().min(jobs.len().max(1));
    std::thread::scope(|s| {
        for _ in 0..threads {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some((f, m, cfg)) = jobs.get(i) else { break };
                let dir = out.join(format!("{}_f{}", m, f));
                let r = run_experiment(cfg, Some(&dir)).map(|a| a.final_eval).map_err(CliError::from);
                results.lock().expect("no poisoned workers")[i] = Some(r);
            });
        }
    });

    let mut csv = String::from("fraction,mode,acc,auroc\n");
    for ((f, m, _), r) in jobs.iter().zip(results.into_inner().expect("no poisoned workers")) {
        let e = r.expect("every job ran")?;
        csv.push_str(&format!("{f},{m},{},{}\n", e.acc_id, e.auroc_energy));
        println!("fraction={f} mode={m} acc={} auroc={}", e.acc_id, e.auroc_energy);
    }
    std::fs::write(out.join("sweep.csv"), csv).map_err(artifact)?;
    Ok(())
}

fn eval_row(split: &str, e: &EvalResult) -> String {
    format!("{split},{},{},{}\n", e.acc_id, e.auroc_energy, e.auroc_confidence)
}

fn cmd_eval(args: EvalArgs) -> CliResult<()> {
    let archive = Archive::load(&args.checkpoint)?;
    let params = archive.params("ema")?;
    let dims = params.dims();

    let mut cfg = RunConfig::default();
    cfg.data.input_dim = dims.input_dim;
    cfg.data.num_classes = dims.num_classes;
    if let Some(path) = &args.gen {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let kept: Vec<&str> = text
            .lines()
            .map(|l| match l.split('#').next().unwrap_or("").split_once('=') {
                Some((k, _)) if k.trim() == "out" => "",
                _ => l,
            })
            .collect();
        cfg.apply_text(&kept.join("\n"))?;
    }
    for s in &args.set {
        let (k, v) = parse_override(s)?;
        cfg.set(&k, &v)?;
    }
    cfg.validate()?;
    if cfg.data.input_dim != dims.input_dim || cfg.data.num_classes != dims.num_classes {
        return Err(CliError::Config(format!(
            "config has D={} C={}, checkpoint has D={} C={}",
            cfg.data.input_dim, cfg.data.num_classes, dims.input_dim, dims.num_classes
        )));
    }
    let unseen_kind = args.unseen_ood.as_deref().map(str::parse::<OodKind>).transpose()?;

    let data = match &args.data {
        Some(path) => load_dataset(path, dims.num_classes)?,
        None => generate_gaussian_openset(cfg.seed, &cfg.data)?,
    };
    if data.input_dim() != dims.input_dim {
        return Err(CliError::Artifact(format!(
            "dataset has D={}, checkpoint has D={}",
            data.input_dim(),
            dims.input_dim
        )));
    }
    let beta = cfg.energy.beta;
    std::fs::create_dir_all(&args.out).map_err(artifact)?;

    let test = evaluate(&params, &data.test_id_x, &data.test_id_y, &data.test_ood_x, beta)?;
    let mut table = String::from("split,acc_id,auroc_energy,auroc_confidence\n");
    table.push_str(&eval_row("test", &test));
    println!(
        "test acc_id={} auroc_energy={} auroc_confidence={}",
        test.acc_id, test.auroc_energy, test.auroc_confidence
    );

    let mut records = score_records(&params, "test_id", &data.test_id_x, false, beta)?;
    records.extend(score_records(&params, "test_ood", &data.test_ood_x, true, beta)?);

    let unseen = match unseen_kind {
        Some(kind) => Some(ood_samples(&cfg.data, kind, cfg.seed, tag::UNSEEN_OOD, cfg.data.n_test_ood)?),
        None => data.unseen_ood_x.clone(),
    };
    if let Some(u) = unseen {
        let e = evaluate(&params, &data.test_id_x, &data.test_id_y, &u, beta)?;
        table.push_str(&eval_row("unseen", &e));
        println!(
            "unseen acc_id={} auroc_energy={} auroc_confidence={}",
            e.acc_id, e.auroc_energy, e.auroc_confidence
        );
        records.extend(score_records(&params, "unseen_ood", &u, true, beta)?);
    }
    std::fs::write(args.out.join("eval.csv"), table).map_err(artifact)?;
    write_score_dump(std::fs::File::create(args.out.join("scores.csv")).map_err(artifact)?, &records)?;
    Ok(())
}

fn parse_corrupt(s: &str) -> CliResult<(Primitive, f64)> {
    let (name, factor) = match s.split_once(':') {
        Some((n, f)) => (n, f.parse().map_err(|_| CliError::Config(format!("invalid factor `{f}`")))?),
        None => (s, 1.5),
    };
    let p = Primitive::from_name(name).ok_or_else(|| CliError::Config(format!("unknown primitive `{name}`")))?;
    Ok((p, factor))
}

fn cmd_gradcheck(args: GradcheckArgs) -> CliResult<()> {
    if !(args.eps > 0.0) {
        return Err(CliError::Config(format!("eps must be positive, got {}", args.eps)));
    }
    let fault = args.corrupt.as_deref().map(parse_corrupt).transpose()?;
    let start = Instant::now();
    let mut failing = Vec::new();
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    for term in Term::ALL {
        let mut worst = 0.0f64;
        let mut worst_seed = args.seed;
        for seed in args.seed..args.seed + args.trials {
            let r = check_term(seed, term, args.eps, fault)?;
            if r.max_relative_error > worst || r.max_relative_error.is_nan() {
                worst = r.max_relative_error;
                worst_seed = seed;
            }
        }
        let pass = worst < TOLERANCE;
        let _ = writeln!(
            out,
            "{:<6} worst_rel_err={:.3e} seed={} {}",
            term.name(),
            worst,
            worst_seed,
            if pass { "PASS" } else { "FAIL" }
        );
        if !pass {
            failing.push(term.name());
        }
    }
    let _ = writeln!(out, "trials={} eps={} elapsed_s={:.2}", args.trials, args.eps, start.elapsed().as_secs_f64());
    if failing.is_empty() {
        Ok(())
    } else {
        Err(CliError::Check(format!(
            "relative error >= {TOLERANCE} for {}",
            failing.join(", ")
        )))
    }
}

fn cmd_config_doc(out: Option<PathBuf>) -> CliResult<()> {
    let md = RunConfig::reference_markdown();
    match out {
        Some(p) => write_file(&p, &md),
        None => {
            print!("{md}");
            Ok(())
        }
    }
}

fn write_file(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text).map_err(artifact)
}
