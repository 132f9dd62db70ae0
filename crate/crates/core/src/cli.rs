//! Command implementations behind the `sprlab` binary.
//!
//! Exit codes: 0 success, 1 bad input, 2 training aborted on a non-finite
//! loss, 3 at least one sweep cell failed.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::agent::{networks_from_checkpoint, probe_batch, run_training, RunStatus, TrainingOutcome, VariantConfig};
use crate::diagnostics::{probe_reports, DormancyReport, RankReport};
use crate::error::{Error, Result};
use crate::metrics::{aggregate_report, BaselineTable, ScoreTable, Statistic};
use crate::tensor::{load_checkpoint, save_checkpoint};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 1;
pub const EXIT_ABORTED: i32 = 2;
pub const EXIT_SWEEP_FAILED: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "sprlab", version, about = "Self-predictive representation learning lab")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one variant.
    Train {
        /// JSON config; a "preset" key selects the base it overrides.
        #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
        config: Option<PathBuf>,
        #[arg(long)]
        preset: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the number of environment steps.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Train every (preset, seed) cell and collect final returns.
    Sweep {
        /// Comma-separated preset names or JSON config paths.
        #[arg(long, value_delimiter = ',')]
        presets: Vec<String>,
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Aggregate a score table against baselines.
    Aggregate {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        baselines: PathBuf,
        /// `all` or one of mean, median, iqm, optimality_gap.
        #[arg(long, default_value = "all")]
        stat: String,
        #[arg(long, default_value_t = 2000)]
        replicates: usize,
        #[arg(long, default_value_t = 0.95)]
        confidence: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Report path; defaults to `<out root>/aggregate/<scores stem>.json`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Rank and dormancy reports for a checkpoint.
    Diagnose {
        /// Checkpoint manifest (`checkpoint.json`).
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0)]
        probe: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// `$SPRLAB_OUT`, or `runs` in the working directory.
pub fn output_root() -> PathBuf {
    std::env::var_os("SPRLAB_OUT").map_or_else(|| PathBuf::from("runs"), PathBuf::from)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub seed: u64,
    pub preset: String,
    pub output_dir: PathBuf,
    pub artifacts: Vec<String>,
    #[serde(flatten)]
    pub status: RunStatus,
    pub final_return: f64,
}

/// SHA-256 of the resolved config's JSON.
pub fn config_hash(cfg: &VariantConfig) -> Result<String> {
    let bytes = serde_json::to_vec(cfg)?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

/// A preset name, or a path to a JSON config when it ends in `.json` or
/// names an existing file.
pub fn resolve_config(spec: &str) -> Result<VariantConfig> {
    let path = Path::new(spec);
    if spec.ends_with(".json") || path.is_file() {
        let text = fs::read_to_string(path)?;
        let value: serde_json::Value = serde_json::from_str(&text)?;
        VariantConfig::from_json_value(value)
    } else {
        VariantConfig::preset(spec)
    }
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut f, item)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct DiagnosticLine<'a> {
    run: u64,
    step: usize,
    layer: crate::diagnostics::LayerTag,
    #[serde(flatten)]
    report: DiagnosticKind<'a>,
}

#[derive(Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum DiagnosticKind<'a> {
    Rank(&'a RankReport),
    Dormancy(&'a DormancyReport),
}

/// Writes every artifact of a finished (or aborted) run into `dir`.
pub fn write_run(dir: &Path, cfg: &VariantConfig, seed: u64, outcome: &TrainingOutcome) -> Result<RunManifest> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.json"), serde_json::to_string_pretty(cfg)?)?;
    write_jsonl(&dir.join("logs.jsonl"), &outcome.logs)?;

    let mut w = csv::Writer::from_path(dir.join("returns.csv")).map_err(csv_io)?;
    w.write_record(["run", "step", "eval_return"]).map_err(csv_io)?;
    for p in &outcome.curve {
        w.write_record([seed.to_string(), p.step.to_string(), p.eval_return.to_string()])
            .map_err(csv_io)?;
    }
    w.flush()?;

    let mut diag = Vec::new();
    for r in &outcome.ranks {
        diag.push(DiagnosticLine {
            run: seed,
            step: r.step,
            layer: r.layer,
            report: DiagnosticKind::Rank(r),
        });
    }
    for d in &outcome.dormancy {
        diag.push(DiagnosticLine {
            run: seed,
            step: d.step,
            layer: d.layer,
            report: DiagnosticKind::Dormancy(d),
        });
    }
    write_jsonl(&dir.join("diagnostics.jsonl"), &diag)?;

    let last_step = outcome.curve.last().map_or(0, |p| p.step);
    let metadata = serde_json::json!({ "config": cfg, "seed": seed, "step": last_step });
    save_checkpoint(&dir.join("checkpoint"), &outcome.networks.store.named(), metadata)?;

    let manifest = RunManifest {
        config_hash: config_hash(cfg)?,
        seed,
        preset: cfg.name.clone(),
        output_dir: dir.to_path_buf(),
        artifacts: [
            "config.json",
            "logs.jsonl",
            "returns.csv",
            "diagnostics.jsonl",
            "checkpoint.json",
            "checkpoint.bin",
            "manifest.json",
        ]
        .map(String::from)
        .to_vec(),
        status: outcome.status.clone(),
        final_return: outcome.final_return(),
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

fn csv_io(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

fn apply_steps(mut cfg: VariantConfig, steps: Option<usize>) -> VariantConfig {
    if let Some(s) = steps {
        cfg.total_steps = s;
    }
    cfg
}

fn train_one(cfg: &VariantConfig, seed: u64, dir: &Path) -> Result<RunManifest> {
    for w in cfg.validate()? {
        eprintln!("warning: {w}");
    }
    let outcome = run_training(cfg, seed)?;
    write_run(dir, cfg, seed, &outcome)
}

pub fn cmd_train(
    config: Option<&Path>,
    preset: Option<&str>,
    seed: u64,
    out: Option<&Path>,
    steps: Option<usize>,
) -> Result<i32> {
    let cfg = match (config, preset) {
        (Some(path), None) => resolve_config(&path.to_string_lossy())?,
        (None, Some(name)) => VariantConfig::preset(name)?,
        _ => return Err(Error::Config("give exactly one of --config or --preset".into())),
    };
    let cfg = apply_steps(cfg, steps);
    let dir = out.map_or_else(|| output_root().join(format!("{}-seed{seed}", cfg.name)), Path::to_path_buf);
    let manifest = train_one(&cfg, seed, &dir)?;
    println!("{}", serde_json::to_string_pretty(&manifest)?);
    Ok(match manifest.status {
        RunStatus::Completed => EXIT_OK,
        RunStatus::Aborted { .. } => EXIT_ABORTED,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepFailure {
    pub preset: String,
    pub seed: u64,
    pub reason: String,
}

pub fn cmd_sweep(presets: &[String], seeds: u64, out: Option<&Path>, steps: Option<usize>) -> Result<i32> {
    let presets: Vec<&String> = presets.iter().filter(|p| !p.trim().is_empty()).collect();
    if presets.is_empty() {
        return Err(Error::Config("--presets needs at least one entry".into()));
    }
    if seeds == 0 {
        return Err(Error::Config("--seeds must be at least 1".into()));
    }
    let root = out.map_or_else(|| output_root().join("sweep"), Path::to_path_buf);
    fs::create_dir_all(&root)?;
    let mut combined = csv::Writer::from_path(root.join("scores.csv")).map_err(csv_io)?;
    combined.write_record(["game", "run", "score", "variant"]).map_err(csv_io)?;
    let mut failures = Vec::new();
    for entry in presets {
        let cfg = match resolve_config(entry) {
            Ok(cfg) => apply_steps(cfg, steps),
            Err(e) => {
                for seed in 0..seeds {
                    failures.push(SweepFailure {
                        preset: entry.clone(),
                        seed,
                        reason: e.to_string(),
                    });
                }
                continue;
            }
        };
        let game = cfg.env.label();
        let mut per_variant = csv::Writer::from_path(root.join(format!("scores-{}.csv", cfg.name))).map_err(csv_io)?;
        per_variant.write_record(["game", "run", "score"]).map_err(csv_io)?;
        for seed in 0..seeds {
            eprintln!("sweep: {} seed {seed}", cfg.name);
            let dir = root.join(&cfg.name).join(format!("seed{seed}"));
            match train_one(&cfg, seed, &dir) {
                Ok(m) if m.status == RunStatus::Completed => {
                    let score = m.final_return.to_string();
                    combined
                        .write_record([game.as_str(), &seed.to_string(), &score, &cfg.name])
                        .map_err(csv_io)?;
                    per_variant
                        .write_record([game.as_str(), &seed.to_string(), &score])
                        .map_err(csv_io)?;
                }
                Ok(m) => failures.push(SweepFailure {
                    preset: cfg.name.clone(),
                    seed,
                    reason: match m.status {
                        RunStatus::Aborted { step, reason } => format!("aborted at step {step}: {reason}"),
                        RunStatus::Completed => unreachable!(),
                    },
                }),
                Err(e) => failures.push(SweepFailure {
                    preset: cfg.name.clone(),
                    seed,
                    reason: e.to_string(),
                }),
            }
        }
        per_variant.flush()?;
    }
    combined.flush()?;
    fs::write(root.join("failures.json"), serde_json::to_string_pretty(&failures)?)?;
    for f in &failures {
        eprintln!("sweep: {} seed {} failed: {}", f.preset, f.seed, f.reason);
    }
    Ok(if failures.is_empty() { EXIT_OK } else { EXIT_SWEEP_FAILED })
}

pub fn cmd_aggregate(
    scores: &Path,
    baselines: &Path,
    stat: &str,
    replicates: usize,
    confidence: f64,
    seed: u64,
    out: Option<&Path>,
) -> Result<i32> {
    let statistics: Vec<Statistic> = if stat == "all" {
        Statistic::ALL.to_vec()
    } else {
        vec![stat.parse()?]
    };
    let table = ScoreTable::from_csv(scores)?;
    let baselines = BaselineTable::from_csv(baselines)?;
    let report = aggregate_report(&table, &baselines, &statistics, replicates, confidence, seed)?;
    let json = serde_json::to_string_pretty(&report)?;
    let path = out.map_or_else(
        || {
            let stem = scores.file_stem().map_or("scores".into(), |s| s.to_string_lossy().into_owned());
            output_root().join("aggregate").join(format!("{stem}.json"))
        },
        Path::to_path_buf,
    );
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(&path, &json)?;
    println!("{json}");
    Ok(EXIT_OK)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnoseReport {
    pub checkpoint: PathBuf,
    pub probe_seed: u64,
    pub ranks: Vec<RankReport>,
    pub dormancy: Vec<DormancyReport>,
}

pub fn diagnose_checkpoint(checkpoint: &Path, probe: u64) -> Result<DiagnoseReport> {
    let (manifest, entries) = load_checkpoint(checkpoint)?;
    let cfg_value = manifest
        .metadata
        .get("config")
        .cloned()
        .ok_or_else(|| Error::Config("checkpoint metadata has no config".into()))?;
    let cfg: VariantConfig = serde_json::from_value(cfg_value)?;
    let step = manifest.metadata.get("step").and_then(|s| s.as_u64()).unwrap_or(0) as usize;
    let nets = networks_from_checkpoint(&cfg, &entries)?;
    let spec = cfg.env.resolve()?;
    let probe_obs = probe_batch(&spec, cfg.probe_size, probe)?;
    let (ranks, dormancy) = probe_reports(&nets, &probe_obs, step, cfg.srank_delta, cfg.dormant_tau)?;
    Ok(DiagnoseReport {
        checkpoint: checkpoint.to_path_buf(),
        probe_seed: probe,
        ranks,
        dormancy,
    })
}

pub fn cmd_diagnose(checkpoint: &Path, probe: u64, out: Option<&Path>) -> Result<i32> {
    let report = diagnose_checkpoint(checkpoint, probe)?;
    let json = serde_json::to_string_pretty(&report)?;
    let path = out.map_or_else(
        || checkpoint.with_file_name(format!("diagnose-probe{probe}.json")),
        Path::to_path_buf,
    );
    fs::write(&path, &json)?;
    println!("{json}");
    Ok(EXIT_OK)
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
        }
    };
    let result = match &cli.command {
        Command::Train {
            config,
            preset,
            seed,
            out,
            steps,
        } => cmd_train(config.as_deref(), preset.as_deref(), *seed, out.as_deref(), *steps),
        Command::Sweep {
            presets,
            seeds,
            out,
            steps,
        } => cmd_sweep(presets, *seeds, out.as_deref(), *steps),
        Command::Aggregate {
            scores,
            baselines,
            stat,
            replicates,
            confidence,
            seed,
            out,
        } => cmd_aggregate(scores, baselines, stat, *replicates, *confidence, *seed, out.as_deref()),
        Command::Diagnose { checkpoint, probe, out } => cmd_diagnose(checkpoint, *probe, out.as_deref()),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_INPUT
        }
    }
}
