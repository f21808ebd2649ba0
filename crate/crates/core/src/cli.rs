//! The `scopeformer` command line. Exit codes: 0 success, 1 usage,
//! 2 invalid configuration, 3 runtime failure.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::config::{fnv1a64, ConfigError, RunConfig};
use crate::data::{read_manifest, synth_generate};
use crate::gradcheck_suite::{run_case, CASES, DEFAULT_H};
use crate::model::{plan, Scopeformer};
use crate::train::{evaluate, Checkpoint, Trainer};
use crate::{Error, Result};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_INVALID: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

/// Environment variable capping worker threads.
pub const THREADS_ENV: &str = "SCOPEFORMER_THREADS";

#[derive(Debug, Parser)]
#[command(name = "scopeformer", version, about = "n-CNN-ViT training and tooling")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic head-CT corpus with a manifest.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        count: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train from a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Load a checkpoint even if its config digest differs.
        #[arg(long)]
        force: bool,
        /// Validate and print the shape plan without allocating weights.
        #[arg(long)]
        dry_run: bool,
    },
    /// Evaluate a checkpoint on a manifest.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// Manifest to evaluate; defaults to the config's validation source.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        /// Case name, or `all`.
        #[arg(long, default_value = "all")]
        op: String,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_H)]
        h: f64,
    },
    /// Print a checkpoint's digest and arrays.
    Inspect {
        #[arg(long)]
        ckpt: PathBuf,
    },
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if e.use_stderr() {
                write!(err, "{text}")
            } else {
                write!(out, "{text}")
            };
            return code;
        }
    };
    if let Err(msg) = configure_threads() {
        let _ = writeln!(err, "error: {msg}");
        return EXIT_INVALID;
    }
    match dispatch(cli.command, out) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => EXIT_INVALID,
        _ => EXIT_RUNTIME,
    }
}

/// Applies `SCOPEFORMER_THREADS` to the global pool (first call wins).
pub fn configure_threads() -> std::result::Result<(), String> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n >= 1)
        .ok_or_else(|| format!("{THREADS_ENV} must be an integer >= 1, got `{raw}`"))?;
    // Fails only if the pool already exists, in which case it is kept.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

/// FNV-1a over every file's relative path and bytes, in sorted path order.
pub fn dir_digest(root: &Path) -> Result<u64> {
    fn walk(dir: &Path, files: &mut Vec<PathBuf>) -> std::io::Result<()> {
        for entry in std::fs::read_dir(dir)? {
            let p = entry?.path();
            if p.is_dir() {
                walk(&p, files)?;
            } else {
                files.push(p);
            }
        }
        Ok(())
    }
    let mut files = Vec::new();
    walk(root, &mut files).map_err(|e| Error::io(root, e))?;
    files.sort();
    let mut buf = Vec::new();
    for f in files {
        let rel = f.strip_prefix(root).unwrap_or(&f);
        buf.extend_from_slice(rel.to_string_lossy().as_bytes());
        buf.push(0);
        buf.extend_from_slice(&std::fs::read(&f).map_err(|e| Error::io(&f, e))?);
    }
    Ok(fnv1a64(&buf))
}

fn load_config(path: &Path) -> Result<RunConfig> {
    Ok(RunConfig::load(path)?)
}

fn io(e: std::io::Error) -> Error {
    Error::io("<stdout>", e)
}

fn dispatch(cmd: Command, out: &mut dyn Write) -> Result<i32> {
    match cmd {
        Command::Synth { out: dir, count, size, seed } => {
            if count == 0 || size < 16 {
                return Err(ConfigError::Invalid {
                    field: if count == 0 { "count".into() } else { "size".into() },
                    msg: "count must be >= 1 and size >= 16".into(),
                }
                .into());
            }
            let m = synth_generate(count, size, seed, &dir)?;
            writeln!(out, "wrote {} samples to {}", m.len(), dir.display()).map_err(io)?;
            writeln!(out, "digest={:016x}", dir_digest(&dir)?).map_err(io)?;
        }
        Command::Train { config, resume, force, dry_run } => {
            let cfg = load_config(&config)?;
            if dry_run {
                write!(out, "{}", plan(&cfg.model)?.render()).map_err(io)?;
                writeln!(out, "digest={:016x}", cfg.model.digest()).map_err(io)?;
                return Ok(EXIT_OK);
            }
            let mut trainer = match resume {
                Some(ckpt) => Trainer::resume(cfg, &ckpt, force)?,
                None => Trainer::new(cfg)?,
            };
            let records = trainer.run()?;
            if let Some(last) = records.last() {
                writeln!(out, "step={} train_loss={:.8} train_accuracy={:.6}", last.step, last.report.loss, last.report.accuracy)
                    .map_err(io)?;
            }
            if let Some(report) = trainer.evaluate()? {
                write!(out, "{}", report.to_kv_block()).map_err(io)?;
            }
            writeln!(out, "checkpoint={}", trainer.latest_path().display()).map_err(io)?;
        }
        Command::Eval { config, ckpt, data, force } => {
            let cfg = load_config(&config)?;
            let mut model = Scopeformer::new(cfg.model.clone())?;
            let c = Checkpoint::load(&ckpt, Some(model.config.digest()), force)?;
            for (name, p) in model.params.iter_mut() {
                p.value = c.get_shaped(&format!("param/{name}"), p.value.shape())?.clone();
            }
            let manifest = match data {
                Some(path) => read_manifest(&path)?,
                None => crate::train::open_source(cfg.data.val_manifest.as_deref(), cfg.data.val_synth.as_ref())?
                    .ok_or_else(|| ConfigError::Invalid {
                        field: "data.val_manifest".into(),
                        msg: "no --data given and the config has no validation source".into(),
                    })?,
            };
            let weights = cfg.loss.label_weights(model.num_labels())?;
            let report = evaluate(&model, &manifest, cfg.train.batch_size, &weights, cfg.loss.eps, cfg.loss.accuracy)?;
            write!(out, "{}", report.to_kv_block()).map_err(io)?;
        }
        Command::Gradcheck { op, tol, seed, h } => {
            let names: Vec<&str> = if op == "all" {
                CASES.to_vec()
            } else if let Some(&n) = CASES.iter().find(|&&n| n == op) {
                vec![n]
            } else {
                return Err(ConfigError::Invalid {
                    field: "op".into(),
                    msg: format!("unknown case `{op}`; known: all, {}", CASES.join(", ")),
                }
                .into());
            };
            let mut failed = 0;
            for name in names {
                let r = run_case(name, seed, h, tol)?;
                failed += usize::from(!r.pass);
                writeln!(
                    out,
                    "{name:<30} max_rel_err={:.3e} checked={:<4} {}",
                    r.max_rel_err,
                    r.checked,
                    if r.pass { "ok" } else { "FAIL" }
                )
                .map_err(io)?;
            }
            if failed > 0 {
                writeln!(out, "{failed} case(s) above tolerance {tol:e}").map_err(io)?;
                return Ok(EXIT_RUNTIME);
            }
        }
        Command::Inspect { ckpt } => {
            let c = Checkpoint::load(&ckpt, None, false)?;
            writeln!(out, "digest={:016x}", c.digest).map_err(io)?;
            writeln!(out, "arrays={}", c.arrays.len()).map_err(io)?;
            for (name, t) in &c.arrays {
                writeln!(out, "{name} {:?}", t.shape()).map_err(io)?;
            }
        }
    }
    Ok(EXIT_OK)
}
