//! Acceptance suite on the default benchmark. Prints one line per criterion
//! and exits nonzero when any fails.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use mrn_core::config::ExperimentConfig;
use mrn_core::datastore;
use mrn_core::rehearsal::Strategy;
use mrn_core::report::{self, Summary};
use mrn_core::router::{RouterKind, VotingMode};
use mrn_core::trainer::{run_mode, ModelCache, RunMode, RunReport};
use mrn_core::verify::{self, Check};

type Res<T> = Result<T, Box<dyn std::error::Error>>;

#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
enum Variant {
    Mrn,
    Baseline,
    Bound,
    Hard,
    Capacity(usize),
    Confidence,
    Mlp,
}

impl Variant {
    fn setup(self, seed: u64) -> (RunMode, ExperimentConfig) {
        let mut cfg = ExperimentConfig::default();
        cfg.seed = seed;
        let mode = match self {
            Variant::Baseline => RunMode::Baseline,
            Variant::Bound => RunMode::Bound,
            _ => RunMode::Mrn,
        };
        match self {
            Variant::Hard => cfg.voting = VotingMode::Hard,
            Variant::Capacity(n) => cfg.rehearsal.capacity = n,
            Variant::Confidence => cfg.rehearsal.strategy = Strategy::Confidence,
            Variant::Mlp => cfg.router.kind = RouterKind::Mlp,
            _ => {}
        }
        (mode, cfg)
    }
}

/// Runs variants on demand and keeps their reports.
struct Lab {
    cache: ModelCache,
    data: PathBuf,
    done: HashMap<(Variant, u64), RunReport>,
}

impl Lab {
    fn get(&mut self, v: Variant, seed: u64) -> Res<&RunReport> {
        if !self.done.contains_key(&(v, seed)) {
            let (mode, cfg) = v.setup(seed);
            let started = Instant::now();
            let data = datastore::load_data(&cfg, &self.data)?;
            self.cache.insert_datasets(&cfg, data);
            let (r, _) = run_mode(mode, &cfg, &mut self.cache)?;
            eprintln!("  ran {v:?} seed {seed}: Avg {:.4} Last {:.4} ({:.0}s)", r.avg, r.last, started.elapsed().as_secs_f64());
            self.done.insert((v, seed), r);
        }
        Ok(&self.done[&(v, seed)])
    }

    fn summary(&mut self, v: Variant, seed: u64) -> Res<Summary> {
        Ok(Summary::of(self.get(v, seed)?))
    }
}

/// An ordering evaluated at seed 0 and, only if that fails, once more at seed 1.
fn ordering(lab: &mut Lab, name: &str, test: impl Fn(&mut Lab, u64) -> Res<(bool, String)>) -> Res<Check> {
    let started = Instant::now();
    let (mut passed, mut detail) = test(lab, 0)?;
    if !passed {
        let (again, d) = test(lab, 1)?;
        detail = format!("seed 0: {detail}; re-run seed 1: {d}");
        passed = again;
    }
    Ok(Check {
        name: name.into(),
        passed,
        detail,
        seconds: started.elapsed().as_secs_f64(),
    })
}

fn cli_run(out: &Path, data: &Path, cache: Option<&Path>) -> Res<()> {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_mrn"));
    cmd.args(["run", "--seed", "0", "--out"]).arg(out).arg("--data").arg(data).env_remove("MRN_SEED");
    if let Some(c) = cache {
        cmd.arg("--cache").arg(c);
    }
    let status = cmd.status()?;
    if !status.success() {
        return Err(format!("mrn run into {} exited with {status}", out.display()).into());
    }
    Ok(())
}

fn report_line(checks: &mut Vec<Check>, c: Check) {
    println!("{c}");
    checks.push(c);
}

fn suite(checks: &mut Vec<Check>) -> Res<()> {
    let work = tempfile::tempdir()?;
    let data = work.path().join("data");
    let branches = work.path().join("branches");
    let cfg = ExperimentConfig::default();

    let mut c = verify::gradient_suite(100)?;
    c.passed &= c.seconds < 120.0;
    report_line(checks, c);
    let mut c = verify::ctc_oracle(500, 0xc7c)?;
    c.passed &= c.seconds < 60.0;
    report_line(checks, c);
    report_line(checks, verify::fusion_algebra(200, 17)?);

    // Determinism: the first run also fills the branch cache the rest reuses.
    let started = Instant::now();
    let (first, second) = (work.path().join("run-a"), work.path().join("run-b"));
    datastore::gen_data(&cfg, &data)?;
    cli_run(&first, &data, Some(&branches))?;
    cli_run(&second, &data, None)?;
    let (a, b) = (std::fs::read(first.join(report::RESULTS))?, std::fs::read(second.join(report::RESULTS))?);
    report_line(
        checks,
        Check {
            name: "determinism".into(),
            passed: a == b && !a.is_empty(),
            detail: format!("two independent `mrn run --seed 0` results.csv files, {} vs {} bytes, identical: {}", a.len(), b.len(), a == b),
            seconds: started.elapsed().as_secs_f64(),
        },
    );

    let mut lab = Lab {
        cache: ModelCache::with_dir(&branches),
        data: data.clone(),
        done: HashMap::new(),
    };

    report_line(checks, verify::degenerate_protocol(&cfg, &mut lab.cache)?);

    let mrn = lab.get(Variant::Mrn, 0)?.clone();
    let cli_summary = report::read_summary(&first.join(report::SUMMARY))?;
    report_line(checks, verify::frozen_audit(&mrn));

    let started = Instant::now();
    let cov = mrn.steps.last().and_then(|s| s.coverage.clone()).ok_or("no coverage report")?;
    let hits = report::uncovered_hits(&mrn);
    let example = hits.first().map(|p| format!(", e.g. task {} truth {:?}", p.task, p.truth)).unwrap_or_default();
    report_line(
        checks,
        Check {
            name: "rehearsal imbalance".into(),
            passed: cov.covered < cov.union_size && !cov.missing_old.is_empty() && !hits.is_empty(),
            detail: format!(
                "memory covers {}/{} classes ({:.1}%), {} old-task classes absent; {} final-step test lines with an absent class decoded correctly{example}",
                cov.covered,
                cov.union_size,
                100.0 * cov.covered as f64 / cov.union_size as f64,
                cov.missing_old.len(),
                hits.len()
            ),
            seconds: started.elapsed().as_secs_f64(),
        },
    );
    eprintln!("  in-process MRN Avg {:.4} vs CLI {:.4}", mrn.avg, cli_summary.avg);

    let c = ordering(&mut lab, "MRN Avg >= Baseline Avg + 0.10", |lab, s| {
        let (m, b) = (lab.summary(Variant::Mrn, s)?.avg, lab.summary(Variant::Baseline, s)?.avg);
        Ok((m - b >= 0.10, format!("MRN {m:.4}, Baseline {b:.4}, gap {:.4}", m - b)))
    })?;
    report_line(checks, c);

    let c = ordering(&mut lab, "soft voting >= hard voting", |lab, s| {
        let (soft, hard) = (lab.summary(Variant::Mrn, s)?.avg, lab.summary(Variant::Hard, s)?.avg);
        Ok((soft >= hard, format!("soft {soft:.4}, hard {hard:.4}")))
    })?;
    report_line(checks, c);

    let c = ordering(&mut lab, "Avg nondecreasing in rehearsal capacity", |lab, s| {
        let a = lab.summary(Variant::Capacity(100), s)?.avg;
        let b = lab.summary(Variant::Capacity(150), s)?.avg;
        let c = lab.summary(Variant::Mrn, s)?.avg;
        Ok((a <= b && b <= c, format!("100: {a:.4}, 150: {b:.4}, 200: {c:.4}")))
    })?;
    report_line(checks, c);

    let c = ordering(&mut lab, "Random sampling >= Confidence sampling", |lab, s| {
        let (r, k) = (lab.summary(Variant::Mrn, s)?.avg, lab.summary(Variant::Confidence, s)?.avg);
        Ok((r >= k, format!("random {r:.4}, confidence {k:.4}")))
    })?;
    report_line(checks, c);

    let c = ordering(&mut lab, "DM router domain accuracy >= MLP router", |lab, s| {
        let dm = lab.summary(Variant::Mrn, s)?.final_domain_accuracy().ok_or("no domain accuracy")?;
        let mlp = lab.summary(Variant::Mlp, s)?.final_domain_accuracy().ok_or("no domain accuracy")?;
        Ok((dm >= mlp, format!("DM {dm:.4}, MLP {mlp:.4} at the final step")))
    })?;
    report_line(checks, c);

    let c = ordering(&mut lab, "Bound Avg >= MRN Avg", |lab, s| {
        let (b, m) = (lab.summary(Variant::Bound, s)?.avg, lab.summary(Variant::Mrn, s)?.avg);
        Ok((b >= m, format!("Bound {b:.4}, MRN {m:.4}")))
    })?;
    report_line(checks, c);
    Ok(())
}

fn main() {
    // `cargo test -- --list` and filters come through here too
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    if args.iter().any(|a| !a.starts_with('-') && !"acceptance".contains(a.as_str())) {
        return;
    }
    let started = Instant::now();
    let mut checks = Vec::new();
    let outcome = suite(&mut checks);
    let failed = checks.iter().filter(|c| !c.passed).count();
    println!(
        "acceptance: {} passed, {failed} failed, total {:.1} min",
        checks.len() - failed,
        started.elapsed().as_secs_f64() / 60.0
    );
    if let Err(e) = outcome {
        println!("[FAIL] acceptance suite aborted: {e}");
        std::process::exit(1);
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
