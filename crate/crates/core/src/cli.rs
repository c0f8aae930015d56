//! The `sil-lab` command line: train, verify, evaluate, export.
//!
//! Exit codes: 0 success, 1 verification or aggregation failure (and runtime
//! errors), 2 configuration error.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::Command;

use clap::{Parser, Subcommand, ValueEnum};

use crate::config::{TrainConfig, Variant};
use crate::error::{Error, Result};
use crate::losses::set_clip_fault;
use crate::oracle::suite::{run_suite, SuiteOptions};
use crate::trainer::{evaluate, load_checkpoint, save_checkpoint, EvalMode, MetricsRow, Trainer, CSV_HEADER};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

pub const MANIFEST: &str = "manifest.txt";
pub const CONFIG_SNAPSHOT: &str = "config.cfg";
pub const THREADS_ENV: &str = "SIL_LAB_THREADS";

#[derive(Debug, Parser)]
#[command(name = "sil-lab", version, about = "A2C with self-imitation learning on key/door gridworlds")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Cmd,
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Train one or more seeds and write per-seed CSVs, checkpoints and a manifest.
    Train(TrainArgs),
    /// Run the tabular and gradient verification suite.
    Verify(VerifyArgs),
    /// Play episodes with a saved checkpoint.
    Evaluate(EvaluateArgs),
    /// Merge the per-seed CSVs of one or more runs into a long-format table.
    Export(ExportArgs),
    /// Internal: train a single seed into an existing run directory.
    #[command(hide = true)]
    TrainSeed(TrainSeedArgs),
}

#[derive(Debug, clap::Args)]
pub struct ConfigArgs {
    /// Config file; built-in defaults when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Agent variant (a2c, sil, exp, sil+exp), applied on top of the config.
    #[arg(long)]
    pub variant: Option<Variant>,
    /// Extra `section.key=value` overrides, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<TrainConfig> {
        let mut config = match &self.config {
            Some(p) => TrainConfig::load(p)?,
            None => TrainConfig::default(),
        };
        if let Some(v) = self.variant {
            config.apply_variant(v);
        }
        for kv in &self.overrides {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{kv}` is not of the form section.key=value")))?;
            config.set(k.trim(), v.trim())?;
        }
        config.validate()?;
        config.env.load_spec()?;
        Ok(config)
    }
}

#[derive(Debug, clap::Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Number of seeds, counted up from the config seed.
    #[arg(long, default_value_t = 1)]
    pub seeds: u64,
    /// Output directory (must not already hold a run).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Run name recorded in the manifest and exports; defaults to the variant.
    #[arg(long)]
    pub name: Option<String>,
    /// Train this many seeds at once in child processes.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Print every metrics row.
    #[arg(long)]
    pub verbose: bool,
}

#[derive(Debug, clap::Args)]
pub struct TrainSeedArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum InjectedBug {
    /// Flip the sign of the SIL advantage clip.
    Clip,
}

#[derive(Debug, clap::Args)]
pub struct VerifyArgs {
    /// Reduced sweep sizes.
    #[arg(long)]
    pub quick: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, hide = true)]
    pub inject_bug: Option<InjectedBug>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Sample,
    Argmax,
}

#[derive(Debug, clap::Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long, default_value_t = 100)]
    pub episodes: usize,
    #[arg(long, value_enum, default_value_t = ModeArg::Sample)]
    pub mode: ModeArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, clap::Args)]
pub struct ExportArgs {
    /// Run directories (each holding a manifest).
    #[arg(long = "run", required = true)]
    pub runs: Vec<PathBuf>,
    /// Output CSV path.
    #[arg(long)]
    pub out: PathBuf,
}

/// Parses arguments and runs the command, returning the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
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
    run(cli)
}

pub fn run(cli: Cli) -> i32 {
    match cli.command {
        Cmd::Train(a) => cmd_train(&a),
        Cmd::TrainSeed(a) => cmd_train_seed(&a),
        Cmd::Verify(a) => cmd_verify(&a),
        Cmd::Evaluate(a) => cmd_evaluate(&a),
        Cmd::Export(a) => cmd_export(&a),
    }
}

fn config_error(e: &Error) -> i32 {
    eprintln!("sil-lab: {e}");
    EXIT_CONFIG
}

fn failure(e: &Error) -> i32 {
    eprintln!("sil-lab: {e}");
    EXIT_FAILURE
}

/// Stable 64-bit FNV-1a digest, used for run ids.
fn fnv1a(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

pub fn run_id(config_text: &str, seeds: &[u64]) -> String {
    let mut text = config_text.to_string();
    for s in seeds {
        text.push_str(&format!("\nseed {s}"));
    }
    format!("{:012x}", fnv1a(text.as_bytes()) & 0xffff_ffff_ffff)
}

/// Contents of `manifest.txt`.
#[derive(Clone, Debug, PartialEq)]
pub struct RunManifest {
    pub run_id: String,
    pub name: String,
    pub variant: Variant,
    pub out_dir: PathBuf,
    pub config: String,
    pub seeds: Vec<u64>,
}

impl RunManifest {
    pub fn csv_name(seed: u64) -> String {
        format!("seed_{seed}.csv")
    }

    pub fn checkpoint_name(seed: u64) -> String {
        format!("seed_{seed}.ckpt")
    }

    pub fn csv_paths(&self) -> Vec<(u64, PathBuf)> {
        self.seeds.iter().map(|&s| (s, self.out_dir.join(Self::csv_name(s)))).collect()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("run_id = {}\n", self.run_id));
        s.push_str(&format!("name = {}\n", self.name));
        s.push_str(&format!("variant = {}\n", self.variant));
        s.push_str(&format!("out_dir = {}\n", self.out_dir.display()));
        s.push_str(&format!("config = {}\n", self.config));
        let seeds: Vec<String> = self.seeds.iter().map(|s| s.to_string()).collect();
        s.push_str(&format!("seeds = {}\n", seeds.join(",")));
        for &seed in &self.seeds {
            s.push_str(&format!("csv.{seed} = {}\n", Self::csv_name(seed)));
            s.push_str(&format!("checkpoint.{seed} = {}\n", Self::checkpoint_name(seed)));
        }
        s
    }

    /// Reads a manifest; `out_dir` is taken from the directory it lives in.
    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let bad = |reason: String| Error::Format {
            path: path.clone(),
            reason,
        };
        let mut fields = BTreeMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line.split_once('=').ok_or_else(|| bad(format!("line `{line}` has no `=`")))?;
            fields.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |k: &str| fields.get(k).cloned().ok_or_else(|| bad(format!("missing `{k}`")));
        let seeds = get("seeds")?
            .split(',')
            .filter(|s| !s.is_empty())
            .map(|s| s.trim().parse::<u64>().map_err(|_| bad(format!("bad seed `{s}`"))))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            run_id: get("run_id")?,
            name: get("name")?,
            variant: get("variant")?.parse()?,
            out_dir: dir.to_path_buf(),
            config: get("config")?,
            seeds,
        })
    }
}

fn threads_from_env() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

/// Trains one seed, streaming metrics rows into `<dir>/seed_<s>.csv` and
/// saving the final parameters next to it.
pub fn train_seed_into(config: &TrainConfig, seed: u64, dir: &Path, verbose: bool) -> Result<Option<MetricsRow>> {
    let mut cfg = config.clone();
    cfg.seed = seed;
    let mut trainer = Trainer::new(cfg)?;
    trainer.set_rollout_threads(threads_from_env());
    let csv_path = dir.join(RunManifest::csv_name(seed));
    let file = fs::File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
    let mut w = BufWriter::new(file);
    writeln!(w, "{CSV_HEADER}").map_err(|e| Error::io(&csv_path, e))?;
    let mut io_err = None;
    let metrics = trainer.run(|row| {
        if io_err.is_none() {
            if let Err(e) = writeln!(w, "{}", row.to_csv_line()) {
                io_err = Some(e);
            }
        }
        if verbose {
            eprintln!(
                "seed {seed} steps {:>8} mean_return {:>7.3} best {:>5.2} entropy {:.3} buffer {}",
                row.env_steps, row.mean_return, row.best_return, row.entropy, row.buffer_size
            );
        }
    })?;
    if let Some(e) = io_err {
        return Err(Error::io(&csv_path, e));
    }
    w.flush().map_err(|e| Error::io(&csv_path, e))?;
    save_checkpoint(trainer.params(), dir.join(RunManifest::checkpoint_name(seed)))?;
    Ok(metrics.rows.last().cloned())
}

pub fn cmd_train(args: &TrainArgs) -> i32 {
    let config = match args.config.resolve() {
        Ok(c) => c,
        Err(e) => return config_error(&e),
    };
    if args.seeds == 0 {
        return config_error(&Error::Config("--seeds must be at least 1".into()));
    }
    let seeds: Vec<u64> = (0..args.seeds).map(|i| config.seed + i).collect();
    let snapshot = config.to_text();
    let id = run_id(&snapshot, &seeds);
    let out = args.out.clone().unwrap_or_else(|| PathBuf::from("runs").join(&id));
    if out.join(MANIFEST).exists() {
        return config_error(&Error::Config(format!("{} already holds a run", out.display())));
    }
    if let Err(e) = fs::create_dir_all(&out) {
        return failure(&Error::io(&out, e));
    }
    let snapshot_path = out.join(CONFIG_SNAPSHOT);
    if let Err(e) = fs::write(&snapshot_path, &snapshot) {
        return failure(&Error::io(&snapshot_path, e));
    }

    let result = if args.jobs > 1 && seeds.len() > 1 {
        train_in_children(&snapshot_path, &seeds, &out, args.jobs)
    } else {
        seeds.iter().try_for_each(|&seed| {
            let last = train_seed_into(&config, seed, &out, args.verbose)?;
            if let Some(r) = last {
                eprintln!(
                    "seed {seed}: {} steps, final mean return {:.3}, best {:.2}",
                    r.env_steps, r.mean_return, r.best_return
                );
            }
            Ok(())
        })
    };
    if let Err(e) = result {
        return failure(&e);
    }

    let manifest = RunManifest {
        run_id: id,
        name: args.name.clone().unwrap_or_else(|| config.variant().to_string()),
        variant: config.variant(),
        out_dir: out.canonicalize().unwrap_or(out.clone()),
        config: CONFIG_SNAPSHOT.into(),
        seeds,
    };
    let path = out.join(MANIFEST);
    if let Err(e) = fs::write(&path, manifest.to_text()) {
        return failure(&Error::io(&path, e));
    }
    println!("{}", out.display());
    EXIT_OK
}

fn train_in_children(snapshot: &Path, seeds: &[u64], out: &Path, jobs: usize) -> Result<()> {
    let exe = std::env::current_exe().map_err(|e| Error::io("current executable", e))?;
    for chunk in seeds.chunks(jobs) {
        let children = chunk
            .iter()
            .map(|&seed| {
                Command::new(&exe)
                    .arg("train-seed")
                    .arg("--config")
                    .arg(snapshot)
                    .arg("--seed")
                    .arg(seed.to_string())
                    .arg("--out")
                    .arg(out)
                    .spawn()
                    .map(|c| (seed, c))
                    .map_err(|e| Error::io(&exe, e))
            })
            .collect::<Result<Vec<_>>>()?;
        for (seed, mut child) in children {
            let status = child.wait().map_err(|e| Error::io(&exe, e))?;
            if !status.success() {
                return Err(Error::Usage(format!("training seed {seed} failed ({status})")));
            }
        }
    }
    Ok(())
}

pub fn cmd_train_seed(args: &TrainSeedArgs) -> i32 {
    let config = match TrainConfig::load(&args.config) {
        Ok(c) => c,
        Err(e) => return config_error(&e),
    };
    match train_seed_into(&config, args.seed, &args.out, false) {
        Ok(_) => EXIT_OK,
        Err(e) => failure(&e),
    }
}

pub fn cmd_verify(args: &VerifyArgs) -> i32 {
    if args.inject_bug == Some(InjectedBug::Clip) {
        set_clip_fault(true);
    }
    let opts = if args.quick {
        SuiteOptions::quick(args.seed)
    } else {
        SuiteOptions::full(args.seed)
    };
    match run_suite(&opts) {
        Ok(report) => {
            print!("{}", report.render());
            if report.passed() {
                EXIT_OK
            } else {
                EXIT_FAILURE
            }
        }
        Err(e) => failure(&e),
    }
}

pub fn cmd_evaluate(args: &EvaluateArgs) -> i32 {
    let config = match args.config.resolve() {
        Ok(c) => c,
        Err(e) => return config_error(&e),
    };
    let spec = match config.env.load_spec() {
        Ok(s) => s,
        Err(e) => return config_error(&e),
    };
    let params = match load_checkpoint(&args.checkpoint) {
        Ok(p) => p,
        Err(e) => return failure(&e),
    };
    if params.input_dim() != spec.obs_dim() {
        return config_error(&Error::Config(format!(
            "checkpoint expects {} inputs but the configured map encodes {}",
            params.input_dim(),
            spec.obs_dim()
        )));
    }
    let mode = match args.mode {
        ModeArg::Sample => EvalMode::Sample,
        ModeArg::Argmax => EvalMode::Argmax,
    };
    match evaluate(&params, spec, args.episodes, mode, args.seed) {
        Ok(stats) => {
            println!(
                "episodes {} mean {:.4} std {:.4} max {:.4}",
                stats.returns.len(),
                stats.mean,
                stats.std,
                stats.max
            );
            EXIT_OK
        }
        Err(e) => failure(&e),
    }
}

/// Metric columns of the per-seed CSVs (everything except the step keys).
pub fn metric_columns() -> Vec<&'static str> {
    CSV_HEADER.split(',').filter(|c| *c != "iteration" && *c != "env_steps").collect()
}

/// Builds the long-format table `run,seed,env_steps,metric,value`.
pub fn export_runs(runs: &[PathBuf]) -> Result<String> {
    let mut out = String::from("run,seed,env_steps,metric,value\n");
    let columns: Vec<&str> = CSV_HEADER.split(',').collect();
    let metrics = metric_columns();
    let mut rows = 0;
    for dir in runs {
        let manifest = RunManifest::read(dir)?;
        if manifest.seeds.is_empty() {
            return Err(Error::Format {
                path: dir.join(MANIFEST),
                reason: "run lists no seeds".into(),
            });
        }
        for (seed, path) in manifest.csv_paths() {
            let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            let mut lines = text.lines();
            if lines.next().map(str::trim) != Some(CSV_HEADER) {
                return Err(Error::Format {
                    path,
                    reason: "header does not match the metrics schema".into(),
                });
            }
            for line in lines.filter(|l| !l.trim().is_empty()) {
                let row = MetricsRow::parse_csv_line(line).map_err(|e| Error::Format {
                    path: path.clone(),
                    reason: e.to_string(),
                })?;
                let fields: Vec<&str> = line.split(',').collect();
                for m in &metrics {
                    let idx = columns.iter().position(|c| c == m).unwrap();
                    out.push_str(&format!("{},{seed},{},{m},{}\n", manifest.name, row.env_steps, fields[idx].trim()));
                }
                rows += 1;
            }
        }
    }
    if rows == 0 {
        return Err(Error::Usage("no metric rows found".into()));
    }
    Ok(out)
}

pub fn cmd_export(args: &ExportArgs) -> i32 {
    match export_runs(&args.runs) {
        Ok(text) => match fs::write(&args.out, text) {
            Ok(()) => EXIT_OK,
            Err(e) => failure(&Error::io(&args.out, e)),
        },
        Err(e) => failure(&e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn run_id_is_stable_and_seed_sensitive() {
        assert_eq!(run_id("a = 1\n", &[0, 1]), run_id("a = 1\n", &[0, 1]));
        assert_ne!(run_id("a = 1\n", &[0, 1]), run_id("a = 1\n", &[0, 2]));
        assert_eq!(run_id("x", &[]).len(), 12);
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = RunManifest {
            run_id: "abc".into(),
            name: "sil".into(),
            variant: Variant::Sil,
            out_dir: dir.path().to_path_buf(),
            config: CONFIG_SNAPSHOT.into(),
            seeds: vec![3, 4],
        };
        fs::write(dir.path().join(MANIFEST), m.to_text()).unwrap();
        assert_eq!(RunManifest::read(dir.path()).unwrap(), m);
    }

    #[test]
    fn parse_errors_are_config_errors() {
        assert_eq!(main_with_args(["sil-lab", "train", "--variant", "nope"]), EXIT_CONFIG);
        assert_eq!(main_with_args(["sil-lab", "bogus"]), EXIT_CONFIG);
    }

    #[test]
    fn metric_columns_exclude_keys() {
        let m = metric_columns();
        assert_eq!(m.len(), 9);
        assert!(!m.contains(&"env_steps"));
    }
}
