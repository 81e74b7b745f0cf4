//! On-disk dataset cache: one `MRNB` file per script holding its train
//! records followed by its test records, plus a `registry.json` sidecar with
//! the charset registry, split sizes and file checksums.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{contract, io_err, MrnError, Result};
use crate::formats::{decode_dataset, encode_dataset, sha256_hex, write_file};
use crate::glyphgen::{build_task_dataset, CharsetRegistry, GlobalId, ScriptSpec, TaskDataset, GLYPH_SIZE};
use crate::rehearsal::{char_frequencies, RehearsalSet, ScoreContext, Strategy};

pub const MANIFEST: &str = "registry.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CachedTask {
    pub script_id: u8,
    pub name: String,
    pub file: String,
    pub n_train: usize,
    pub n_test: usize,
    pub sha256: String,
    pub charset: Vec<GlobalId>,
    pub absent_from_train: Vec<GlobalId>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    /// Hash of the settings the data depends on.
    pub key: String,
    pub registry: CharsetRegistry,
    pub tasks: Vec<CachedTask>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GenStatus {
    Written,
    /// Every file already matched its recorded checksum.
    UpToDate,
}

pub fn data_key(scripts: &[ScriptSpec], shared: usize) -> String {
    sha256_hex(serde_json::json!([scripts, shared]).to_string().as_bytes())
}

fn task_file(script_id: u8) -> String {
    format!("script-{script_id}.mrnb")
}

fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
    serde_json::from_str(&text).map_err(|e| MrnError::Format {
        path,
        reason: e.to_string(),
    })
}

fn file_matches(dir: &Path, t: &CachedTask) -> bool {
    std::fs::read(dir.join(&t.file)).map(|b| sha256_hex(&b) == t.sha256).unwrap_or(false)
}

/// Whether `dir` already holds an intact cache for `cfg`.
pub fn is_current(cfg: &ExperimentConfig, dir: &Path) -> bool {
    match read_manifest(dir) {
        Ok(m) => m.key == data_key(&cfg.scripts, cfg.shared_categories) && m.tasks.len() == cfg.scripts.len() && m.tasks.iter().all(|t| file_matches(dir, t)),
        Err(_) => false,
    }
}

/// Writes every script of `cfg` under `dir` unless an identical cache is there.
pub fn gen_data(cfg: &ExperimentConfig, dir: &Path) -> Result<(GenStatus, Manifest)> {
    cfg.validate()?;
    if is_current(cfg, dir) {
        return Ok((GenStatus::UpToDate, read_manifest(dir)?));
    }
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let registry = CharsetRegistry::new(&cfg.scripts, cfg.shared_categories)?;
    let mut tasks = Vec::new();
    for spec in &cfg.scripts {
        let ds = build_task_dataset(spec, &registry)?;
        let mut all = ds.train.clone();
        all.extend(ds.test.iter().cloned());
        let bytes = encode_dataset(&all, GLYPH_SIZE)?;
        let file = task_file(spec.script_id);
        write_file(&dir.join(&file), &bytes)?;
        tasks.push(CachedTask {
            script_id: spec.script_id,
            name: spec.name.clone(),
            file,
            n_train: ds.train.len(),
            n_test: ds.test.len(),
            sha256: sha256_hex(&bytes),
            charset: ds.charset,
            absent_from_train: ds.absent_from_train,
        });
    }
    let manifest = Manifest {
        key: data_key(&cfg.scripts, cfg.shared_categories),
        registry,
        tasks,
    };
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write_file(&path, text.as_bytes())?;
    Ok((GenStatus::Written, manifest))
}

/// Registry and task datasets in schedule order, checked against the sidecar.
pub fn load_data(cfg: &ExperimentConfig, dir: &Path) -> Result<(CharsetRegistry, Vec<TaskDataset>)> {
    cfg.validate()?;
    let m = read_manifest(dir)?;
    if m.key != data_key(&cfg.scripts, cfg.shared_categories) {
        return Err(contract(format!("{}: cache was generated for different script settings", dir.display())));
    }
    let mut out = Vec::new();
    for &id in &cfg.order {
        let t = m
            .tasks
            .iter()
            .find(|t| t.script_id == id)
            .ok_or_else(|| MrnError::Registry(format!("script {id} missing from {}", dir.display())))?;
        let path: PathBuf = dir.join(&t.file);
        let bytes = std::fs::read(&path).map_err(io_err(&path))?;
        if sha256_hex(&bytes) != t.sha256 {
            return Err(MrnError::Format {
                path,
                reason: "checksum does not match the registry sidecar".into(),
            });
        }
        let mut all = decode_dataset(&bytes).map_err(|reason| MrnError::Format { path: path.clone(), reason })?;
        if all.len() != t.n_train + t.n_test {
            return Err(MrnError::Format {
                path,
                reason: format!("{} records, sidecar says {}", all.len(), t.n_train + t.n_test),
            });
        }
        let test = all.split_off(t.n_train);
        out.push(TaskDataset {
            script_id: id,
            train: all,
            test,
            charset: t.charset.clone(),
            absent_from_train: t.absent_from_train.clone(),
        });
    }
    Ok((m.registry, out))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoverageRow {
    pub script_id: u8,
    pub name: String,
    pub charset: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub in_train: usize,
    /// Instances this task keeps in the memory after the last update, if the
    /// strategy can be simulated without a trained branch.
    pub in_memory: Option<usize>,
    pub covered_by_memory: Option<usize>,
}

/// Per-task character coverage of the train split and of the rehearsal
/// memory as it stands once every task but the last has been admitted.
pub fn coverage_table(cfg: &ExperimentConfig, datasets: &[TaskDataset]) -> Result<Vec<CoverageRow>> {
    let simulate = cfg.rehearsal.strategy != Strategy::Confidence && datasets.len() > 1;
    let mut memory = RehearsalSet::new(cfg.rehearsal.capacity, cfg.rehearsal.strategy, crate::rng::mix(cfg.seed, crate::rng::label("rehearsal")))?;
    if simulate {
        for (k, ds) in datasets[..datasets.len() - 1].iter().enumerate() {
            let freq = char_frequencies(&ds.train);
            let ctx = ScoreContext {
                frequencies: Some(&freq),
                ..Default::default()
            };
            memory.update(k + 1, &ds.train, &ctx)?;
        }
    }
    let counts = memory.per_task_counts();
    let mut rows = Vec::new();
    for (k, ds) in datasets.iter().enumerate() {
        let spec = cfg.scripts.iter().find(|s| s.script_id == ds.script_id);
        let held: std::collections::BTreeSet<GlobalId> = memory
            .entries()
            .filter(|e| e.origin_step == k + 1)
            .flat_map(|e| e.instance.labels.iter().copied())
            .collect();
        let remembered = simulate && k + 1 < datasets.len();
        rows.push(CoverageRow {
            script_id: ds.script_id,
            name: spec.map(|s| s.name.clone()).unwrap_or_default(),
            charset: ds.charset.len(),
            n_train: ds.train.len(),
            n_test: ds.test.len(),
            in_train: ds.charset.len() - ds.absent_from_train.len(),
            in_memory: remembered.then(|| counts.get(k).copied().unwrap_or(0)),
            covered_by_memory: remembered.then(|| held.len()),
        });
    }
    Ok(rows)
}

/// Fixed-width rendering of [`coverage_table`].
pub fn format_coverage(rows: &[CoverageRow]) -> String {
    let opt = |v: Option<usize>| v.map(|x| x.to_string()).unwrap_or_else(|| "-".into());
    let mut s = format!(
        "{:<6} {:<14} {:>7} {:>7} {:>6} {:>9} {:>8} {:>10}\n",
        "script", "name", "charset", "train", "test", "in train", "memory", "in memory"
    );
    for r in rows {
        s += &format!(
            "{:<6} {:<14} {:>7} {:>7} {:>6} {:>9} {:>8} {:>10}\n",
            r.script_id,
            r.name,
            r.charset,
            r.n_train,
            r.n_test,
            r.in_train,
            opt(r.in_memory),
            opt(r.covered_by_memory)
        );
    }
    s
}
