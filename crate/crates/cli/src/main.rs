use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use mrn_core::config::ExperimentConfig;
use mrn_core::datastore::{self, GenStatus};
use mrn_core::formats;
use mrn_core::report::{self, AblationRow, Axis, Summary};
use mrn_core::router::VotingMode;
use mrn_core::trainer::{run_mode, ModelCache, RunArtifacts, RunMode, RunReport};
use mrn_core::verify;

#[derive(Parser)]
#[command(name = "mrn", version, about = "Incremental multilingual text recognition with routed recognizer branches")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the dataset caches and print the class-coverage table.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Directory for the dataset caches.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one schedule and write results.csv, summary.json, predictions.jsonl and checkpoints.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "mrn")]
        mode: ModeArg,
        #[arg(long)]
        voting: Option<VotingArg>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        dirs: Dirs,
        /// Skip writing model checkpoints.
        #[arg(long)]
        no_checkpoints: bool,
    },
    /// Sweep one setting and write a combined CSV and chart.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        axis: AxisArg,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        dirs: Dirs,
    },
    /// Compare finished runs: markdown table and SVG curves.
    Report {
        /// Run directories or summary.json files.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the gradient, oracle and protocol invariant suite.
    Verify {
        /// Config for the training checks; the smoke preset when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Print a preset configuration as TOML.
    Config {
        #[arg(long, default_value = "default")]
        preset: Preset,
    },
}

#[derive(Args)]
struct Common {
    /// TOML experiment config; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed and MRN_SEED.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct Dirs {
    /// Dataset cache directory, generated when missing; defaults to <out>/data.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Reuse trained branches from this directory across invocations.
    #[arg(long)]
    cache: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Mrn,
    Baseline,
    Bound,
}

impl From<ModeArg> for RunMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Mrn => RunMode::Mrn,
            ModeArg::Baseline => RunMode::Baseline,
            ModeArg::Bound => RunMode::Bound,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum VotingArg {
    Soft,
    Hard,
}

impl From<VotingArg> for VotingMode {
    fn from(v: VotingArg) -> Self {
        match v {
            VotingArg::Soft => VotingMode::Soft,
            VotingArg::Hard => VotingMode::Hard,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
enum AxisArg {
    RehearsalSize,
    Sampling,
    Alpha,
    Depth,
    Order,
    Voting,
}

impl From<AxisArg> for Axis {
    fn from(a: AxisArg) -> Self {
        match a {
            AxisArg::RehearsalSize => Axis::RehearsalSize,
            AxisArg::Sampling => Axis::Sampling,
            AxisArg::Alpha => Axis::Alpha,
            AxisArg::Depth => Axis::Depth,
            AxisArg::Order => Axis::Order,
            AxisArg::Voting => Axis::Voting,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Default,
    Smoke,
}

fn load_config(path: Option<&Path>, seed: Option<u64>, fallback: fn() -> ExperimentConfig) -> Result<ExperimentConfig> {
    let mut cfg = match path {
        Some(p) => ExperimentConfig::load(p)?,
        None => fallback(),
    };
    cfg.apply_env()?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Loads (generating if needed) the on-disk datasets into a model cache.
fn prepared_cache(cfg: &ExperimentConfig, out: &Path, dirs: &Dirs) -> Result<ModelCache> {
    let data = dirs.data.clone().unwrap_or_else(|| out.join("data"));
    let (status, _) = datastore::gen_data(cfg, &data)?;
    if status == GenStatus::Written {
        eprintln!("generated dataset caches in {}", data.display());
    }
    let mut cache = match &dirs.cache {
        Some(d) => ModelCache::with_dir(d),
        None => ModelCache::new(),
    };
    cache.insert_datasets(cfg, datastore::load_data(cfg, &data)?);
    Ok(cache)
}

fn write_checkpoints(dir: &Path, cfg: &ExperimentConfig, art: &RunArtifacts) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    for (k, b) in art.branches.iter().enumerate() {
        formats::write_branch(&dir.join(format!("branch-{}-script{}.mrnw", k + 1, b.language_id)), b)?;
    }
    // step 1 routes trivially, so only trained routers are stored
    for (k, r) in art.routers.iter().enumerate().skip(1) {
        formats::write_router(&dir.join(format!("router-step{}.mrnr", k + 1)), r)?;
    }
    if let Some(mem) = &art.rehearsal {
        let entries: Vec<_> = mem.entries().collect();
        formats::write_rehearsal(&dir.join("rehearsal.mrnb"), &entries, cfg.model.frame.height)?;
    }
    let union = serde_json::to_string_pretty(&art.union)?;
    std::fs::write(dir.join("union.json"), union)?;
    let audit = serde_json::to_string_pretty(&art.audit)?;
    std::fs::write(dir.join("audit.json"), audit)?;
    Ok(())
}

/// Problems that make a finished run count as failed.
fn audit_problems(report: &RunReport) -> Vec<String> {
    let mut out = Vec::new();
    if report.audit_violations > 0 {
        out.push(format!("{} protocol data-access violations", report.audit_violations));
    }
    let check = verify::frozen_audit(report);
    if !check.passed {
        out.push(check.detail);
    }
    out
}

fn print_summary(label: &str, report: &RunReport) {
    let acc: Vec<String> = report.matrix.acc.iter().map(|a| format!("{a:.4}")).collect();
    println!("{label}: Avg {:.4}  Last {:.4}  per-step [{}]", report.avg, report.last, acc.join(", "));
}

fn cmd_gen_data(common: Common, out: PathBuf) -> Result<bool> {
    let cfg = load_config(common.config.as_deref(), common.seed, ExperimentConfig::default)?;
    let (status, manifest) = datastore::gen_data(&cfg, &out)?;
    match status {
        GenStatus::Written => println!("wrote {} dataset caches and {} to {}", manifest.tasks.len(), datastore::MANIFEST, out.display()),
        GenStatus::UpToDate => println!("{} is up to date (checksums match), skipped", out.display()),
    }
    let (_, datasets) = datastore::load_data(&cfg, &out)?;
    print!("{}", datastore::format_coverage(&datastore::coverage_table(&cfg, &datasets)?));
    Ok(true)
}

fn cmd_run(common: Common, mode: ModeArg, voting: Option<VotingArg>, out: PathBuf, dirs: Dirs, no_checkpoints: bool) -> Result<bool> {
    let mut cfg = load_config(common.config.as_deref(), common.seed, ExperimentConfig::default)?;
    if let Some(v) = voting {
        cfg.voting = v.into();
    }
    let mut cache = prepared_cache(&cfg, &out, &dirs)?;
    let (report, art) = run_mode(mode.into(), &cfg, &mut cache)?;
    report::write_run(&out, &report)?;
    if !no_checkpoints {
        write_checkpoints(&out.join("checkpoints"), &cfg, &art)?;
    }
    print_summary(&report.mode.to_string(), &report);
    let problems = audit_problems(&report);
    for p in &problems {
        eprintln!("audit failure: {p}");
    }
    Ok(problems.is_empty())
}

fn cmd_ablate(common: Common, axis: Axis, out: PathBuf, dirs: Dirs) -> Result<bool> {
    let base = load_config(common.config.as_deref(), common.seed, ExperimentConfig::default)?;
    let mut rows = Vec::new();
    let mut ok = true;
    let mut shared: Option<ModelCache> = None;
    for (value, cfg) in report::grid(axis, &base) {
        // the order axis changes the task sequence, so each point loads its own datasets
        let mut cache = match shared.take() {
            Some(mut c) => {
                let data = dirs.data.clone().unwrap_or_else(|| out.join("data"));
                c.insert_datasets(&cfg, datastore::load_data(&cfg, &data)?);
                c
            }
            None => prepared_cache(&cfg, &out, &dirs)?,
        };
        let (rep, _) = run_mode(RunMode::Mrn, &cfg, &mut cache)?;
        shared = Some(cache);
        let dir = out.join(format!("{axis}-{value}"));
        report::write_run(&dir, &rep)?;
        print_summary(&format!("{axis}={value}"), &rep);
        let problems = audit_problems(&rep);
        for p in &problems {
            eprintln!("audit failure at {axis}={value}: {p}");
        }
        ok &= problems.is_empty();
        rows.push(AblationRow::new(axis, value, &Summary::of(&rep)));
    }
    report::write_ablation_csv(&out.join(format!("ablation-{axis}.csv")), &rows)?;
    std::fs::write(out.join(format!("ablation-{axis}.svg")), report::ablation_svg(axis, &rows))?;
    let md = report::ablation_markdown(axis, &rows);
    std::fs::write(out.join(format!("ablation-{axis}.md")), &md)?;
    print!("{md}");
    let bad = report::monotone_violations(&rows);
    if !bad.is_empty() {
        eprintln!("warning: Avg is not monotone along {axis}; decreases at {}", bad.join(", "));
    }
    Ok(ok)
}

fn cmd_report(runs: Vec<PathBuf>, out: PathBuf) -> Result<bool> {
    let mut loaded = Vec::new();
    for path in runs {
        let file = if path.is_dir() { path.join(report::SUMMARY) } else { path.clone() };
        let summary = report::read_summary(&file)?;
        let name = file
            .parent()
            .and_then(|p| p.file_name())
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| file.display().to_string());
        loaded.push((name, summary));
    }
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let md = report::comparison_markdown(&loaded);
    std::fs::write(out.join("comparison.md"), &md)?;
    std::fs::write(out.join("accuracy.svg"), report::accuracy_svg(&loaded))?;
    std::fs::write(out.join("task1.svg"), report::first_task_svg(&loaded))?;
    print!("{md}");
    Ok(true)
}

fn cmd_verify(config: Option<PathBuf>, seed: Option<u64>) -> Result<bool> {
    let cfg = load_config(config.as_deref(), seed, ExperimentConfig::smoke)?;
    let checks = verify::run_all(&cfg, &mut ModelCache::new())?;
    for c in &checks {
        println!("{c}");
    }
    Ok(checks.iter().all(|c| c.passed))
}

fn cmd_config(preset: Preset) -> Result<bool> {
    let cfg = match preset {
        Preset::Default => ExperimentConfig::default(),
        Preset::Smoke => ExperimentConfig::smoke(),
    };
    print!("{}", cfg.to_toml()?);
    Ok(true)
}

fn dispatch(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::GenData { common, out } => cmd_gen_data(common, out),
        Command::Run {
            common,
            mode,
            voting,
            out,
            dirs,
            no_checkpoints,
        } => cmd_run(common, mode, voting, out, dirs, no_checkpoints),
        Command::Ablate { common, axis, out, dirs } => cmd_ablate(common, axis.into(), out, dirs),
        Command::Report { runs, out } => cmd_report(runs, out),
        Command::Verify { config, seed } => cmd_verify(config, seed),
        Command::Config { preset } => cmd_config(preset),
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            let causes: Vec<String> = e.chain().skip(1).map(|c| c.to_string()).collect();
            eprintln!("{}", serde_json::json!({ "error": e.to_string(), "causes": causes }));
            ExitCode::FAILURE
        }
    }
}
