//! Incremental protocol: stage-I branch training, stage-II routing on new data
//! plus rehearsal memory, evaluation over all seen tasks, and the sequential
//! fine-tuning and joint-training reference systems.

mod eval;
mod vault;

use std::collections::HashMap;
use std::path::PathBuf;
use std::time::Instant;

use mrn_autograd::{Graph, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::error::{contract, MrnError, Result};
use crate::glyphgen::{build_task_dataset, CharsetRegistry, TaskDataset, TextInstance};
use crate::recognizer::{
    ctc_batch, fit, pad_to_union, train_branch_on, RecognizerBranch, TrainReport, UnionCharset,
};
use crate::rehearsal::{char_frequencies, CoverageReport, RehearsalSet, ScoreContext};
use crate::router::{fuse_var, train_router, LossReport, Router, RouterReport, RouterSample, VotingMode};
use crate::rng;

pub use eval::{evaluate, evaluate_single, macro_mean, pooled, EvalOutcome, Prediction, Scorer, TaskScore};
pub use vault::{AuditEvent, DataVault, Split};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    #[default]
    Mrn,
    Baseline,
    Bound,
}

impl std::str::FromStr for RunMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "mrn" => Ok(RunMode::Mrn),
            "baseline" => Ok(RunMode::Baseline),
            "bound" => Ok(RunMode::Bound),
            other => Err(format!("unknown mode {other:?} (expected mrn, baseline or bound)")),
        }
    }
}

impl std::fmt::Display for RunMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            RunMode::Mrn => "mrn",
            RunMode::Baseline => "baseline",
            RunMode::Bound => "bound",
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    /// Pooled accuracy over tasks `1..=i` at step `i`.
    pub acc: Vec<f64>,
    pub per_task: Vec<Vec<TaskScore>>,
}

impl AccuracyMatrix {
    pub fn push(&mut self, scores: Vec<TaskScore>) {
        self.acc.push(pooled(&scores));
        self.per_task.push(scores);
    }

    pub fn avg(&self) -> f64 {
        if self.acc.is_empty() {
            return 0.0;
        }
        self.acc.iter().sum::<f64>() / self.acc.len() as f64
    }

    pub fn last(&self) -> f64 {
        self.acc.last().copied().unwrap_or(0.0)
    }

    pub fn macro_rows(&self) -> Vec<f64> {
        self.per_task.iter().map(|r| macro_mean(r)).collect()
    }

    /// Accuracy on `task` at every step where it was evaluated.
    pub fn task_curve(&self, task: u8) -> Vec<f64> {
        self.per_task
            .iter()
            .filter_map(|row| row.iter().find(|s| s.task == task).map(TaskScore::accuracy))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageOneLog {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub infeasible: usize,
    pub checksum: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageTwoLog {
    pub samples: usize,
    pub rehearsal_samples: usize,
    pub skipped: usize,
    pub final_loss: Option<LossReport>,
    /// Every branch checksum matched before and after router training.
    pub branches_unchanged: bool,
    /// Sum of |gradient| reaching branch parameters in a probe batch.
    pub frozen_gradient_mass: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub task: u8,
    pub union_size: usize,
    pub stage1: Option<StageOneLog>,
    pub stage2: Option<StageTwoLog>,
    pub domain_accuracy: Option<f64>,
    pub coverage: Option<CoverageReport>,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub mode: RunMode,
    pub voting: VotingMode,
    pub order: Vec<u8>,
    pub matrix: AccuracyMatrix,
    pub avg: f64,
    pub last: f64,
    pub macro_acc: Vec<f64>,
    pub steps: Vec<StepLog>,
    pub audit_violations: usize,
    #[serde(skip)]
    pub predictions: Vec<Prediction>,
    pub config: ExperimentConfig,
}

/// Trained state at the end of a run.
#[derive(Clone, Debug)]
pub struct RunArtifacts {
    pub union: UnionCharset,
    pub branches: Vec<RecognizerBranch>,
    /// Router of each step; step 1's is the untrained single-domain router.
    pub routers: Vec<Router>,
    pub rehearsal: Option<RehearsalSet>,
    pub audit: Vec<AuditEvent>,
}

fn key_of(parts: serde_json::Value) -> String {
    let mut h = Sha256::new();
    h.update(parts.to_string().as_bytes());
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// In-memory reuse of datasets, branches and routers across runs that share
/// the settings they depend on.
#[derive(Default)]
pub struct ModelCache {
    datasets: HashMap<String, (CharsetRegistry, Vec<TaskDataset>)>,
    branches: HashMap<String, (RecognizerBranch, TrainReport)>,
    routers: HashMap<String, (Router, RouterReport)>,
    dir: Option<PathBuf>,
}

impl ModelCache {
    pub fn new() -> Self {
        Self::default()
    }

    /// Also persists trained branches under `dir` and reuses them from there.
    pub fn with_dir(dir: impl Into<PathBuf>) -> Self {
        ModelCache {
            dir: Some(dir.into()),
            ..Self::default()
        }
    }

    fn branch(&mut self, key: &str, train: impl FnOnce() -> Result<(RecognizerBranch, TrainReport)>) -> Result<(RecognizerBranch, TrainReport)> {
        if let Some(hit) = self.branches.get(key) {
            return Ok(hit.clone());
        }
        let paths = self.dir.as_ref().map(|d| {
            (d.join(format!("branch-{}.mrnw", &key[..16])), d.join(format!("branch-{}.json", &key[..16])))
        });
        let loaded = match &paths {
            Some((w, j)) if w.exists() && j.exists() => {
                let b = crate::formats::read_branch(w)?;
                let text = std::fs::read_to_string(j).map_err(crate::error::io_err(j))?;
                let rep: TrainReport = serde_json::from_str(&text).map_err(|e| MrnError::Format {
                    path: j.clone(),
                    reason: e.to_string(),
                })?;
                Some((b, rep))
            }
            _ => None,
        };
        let out = match loaded {
            Some(v) => v,
            None => {
                let v = train()?;
                if let Some((w, j)) = &paths {
                    crate::formats::write_branch(w, &v.0)?;
                    let text = serde_json::to_string(&v.1).expect("report serializes");
                    std::fs::write(j, text).map_err(crate::error::io_err(j))?;
                }
                v
            }
        };
        self.branches.insert(key.to_string(), out.clone());
        Ok(out)
    }

    /// Registry and datasets in task order.
    pub fn datasets(&mut self, cfg: &ExperimentConfig) -> Result<(CharsetRegistry, Vec<TaskDataset>)> {
        let key = dataset_key(cfg);
        if let Some(v) = self.datasets.get(&key) {
            return Ok(v.clone());
        }
        let v = generate(cfg)?;
        self.datasets.insert(key, v.clone());
        Ok(v)
    }

    /// Supplies the datasets of `cfg`, e.g. loaded from an on-disk cache.
    pub fn insert_datasets(&mut self, cfg: &ExperimentConfig, data: (CharsetRegistry, Vec<TaskDataset>)) {
        self.datasets.insert(dataset_key(cfg), data);
    }
}

fn dataset_key(cfg: &ExperimentConfig) -> String {
    key_of(serde_json::json!([cfg.scripts, cfg.shared_categories, cfg.order]))
}

/// Builds the registry and every task dataset, in schedule order.
pub fn generate(cfg: &ExperimentConfig) -> Result<(CharsetRegistry, Vec<TaskDataset>)> {
    cfg.validate()?;
    let registry = CharsetRegistry::new(&cfg.scripts, cfg.shared_categories)?;
    let datasets = cfg
        .ordered_scripts()
        .into_iter()
        .map(|s| build_task_dataset(s, &registry))
        .collect::<Result<Vec<_>>>()?;
    Ok((registry, datasets))
}

fn encode_samples<'a>(union: &UnionCharset, instances: impl Iterator<Item = &'a TextInstance>) -> Result<Vec<(&'a crate::glyphgen::GrayImage, Vec<usize>)>> {
    instances.map(|i| Ok((&i.image, union.encode(&i.labels)?))).collect()
}

/// Stage I of step `step`: trains and freezes the branch of the step's task
/// over the already extended `union`.
pub fn run_stage1(
    cfg: &ExperimentConfig,
    vault: &DataVault,
    step: usize,
    union: &UnionCharset,
    cache: &mut ModelCache,
) -> Result<(RecognizerBranch, TrainReport)> {
    let lang = vault.script_id(step);
    let train = vault.train(step, step, "stage1")?;
    let key = key_of(serde_json::json!(["branch", cfg.seed, cfg.scripts, cfg.shared_categories, cfg.order[..step], cfg.training, cfg.model]));
    cache.branch(&key, || train_branch_on(lang, train, union, cfg.model, &cfg.training.train_config(cfg.seed)))
}

/// Sum of absolute gradients that a stage-II loss sends into the branches
/// when their parameters are placed on the graph as trainable.
pub fn frozen_gradient_mass(
    branches: &[RecognizerBranch],
    router: &Router,
    union: &UnionCharset,
    samples: &[RouterSample],
    alpha: f64,
) -> Result<f64> {
    let take = samples.len().min(4);
    let samples = &samples[..take];
    let mut g = Graph::new();
    let frames = router.patches;
    let images: Vec<_> = samples.iter().map(|s| s.image).collect();
    let mut branch_vars = Vec::new();
    let mut feats = Vec::new();
    let mut padded = Vec::new();
    for b in branches {
        let v = b.register(&mut g, true);
        let x = g.constant(b.frames_of(&images)?);
        let f = b.features_var(&mut g, &v, x)?;
        let p = b.classify_masked(&mut g, &v, f, &b.own_mask(union)?)?;
        let k = b.classes();
        for (i, chunk) in g.value(p).data().chunks(frames * k).enumerate() {
            let sp = crate::recognizer::SequenceProbs::new(frames, k, chunk.to_vec())?;
            padded.push((i, pad_to_union(&sp, b.snapshot(), union)?));
        }
        feats.push(f);
        branch_vars.push(v);
    }
    // cubic (B, P, D, C) from the per-branch (B·P, C) feature nodes
    let (b, d, c) = (take, branches.len(), router.channels);
    let stacked = {
        let parts: Vec<_> = feats
            .iter()
            .map(|&f| g.reshape(f, &[b * frames, 1, c]))
            .collect::<mrn_autograd::Result<Vec<_>>>()?;
        let cat = g.concat(&parts, 1)?;
        g.reshape(cat, &[b, frames, d, c])?
    };
    let rv = router.register(&mut g, true);
    let scores = router.forward_var(&mut g, &rv, stacked)?;
    let width = union.width();
    let mut flat = vec![0.0; b * d * frames * width];
    for (k, chunk) in padded.chunks(take).enumerate() {
        for (i, sp) in chunk {
            let at = (i * d + k) * frames * width;
            flat[at..at + frames * width].copy_from_slice(sp.data());
        }
    }
    let fused = fuse_var(&mut g, scores, Tensor::new([b * d, frames * width], flat)?, frames)?;
    let labels: Vec<Vec<usize>> = samples.iter().map(|s| s.targets.clone()).collect();
    let domains: Vec<usize> = samples.iter().map(|s| s.domain).collect();
    let ctc = ctc_batch(&mut g, fused, frames, &labels)?;
    let dom = g.cross_entropy(scores, &domains)?;
    let dom = g.scale(dom, alpha)?;
    let loss = match ctc.loss {
        Some(l) => g.add(l, dom)?,
        None => dom,
    };
    let grads = g.backward(loss)?;
    let mass = branch_vars
        .iter()
        .flat_map(|v| v.0.iter())
        .map(|&var| grads.get(var).data().iter().map(|x| x.abs()).sum::<f64>())
        .sum();
    Ok(mass)
}

/// Stage II of step `step ≥ 2`: a fresh router trained on the new task's data
/// plus the rehearsal memory, with the branches verified unchanged.
pub fn run_stage2(
    cfg: &ExperimentConfig,
    vault: &DataVault,
    step: usize,
    branches: &[RecognizerBranch],
    union: &UnionCharset,
    memory: &RehearsalSet,
    cache: &mut ModelCache,
) -> Result<(Router, StageTwoLog)> {
    if step < 2 {
        return Err(contract("stage II starts at step 2"));
    }
    let langs: Vec<u8> = branches.iter().map(|b| b.language_id).collect();
    let domain_of = |l: u8| {
        langs
            .iter()
            .position(|&x| x == l)
            .ok_or_else(|| contract(format!("no branch for language {l}")))
    };
    let current = vault.train(step, step, "stage2")?;
    let mut samples = Vec::with_capacity(current.len() + memory.len());
    for inst in current.iter().chain(memory.entries().map(|e| &e.instance)) {
        samples.push(RouterSample {
            image: &inst.image,
            targets: union.encode(&inst.labels)?,
            domain: domain_of(inst.language_id)?,
        });
    }
    let before: Vec<String> = branches.iter().map(RecognizerBranch::checksum).collect();
    let key = key_of(serde_json::json!(["router", cfg.seed, cfg.scripts, cfg.shared_categories, cfg.order[..step], cfg.training, cfg.model, cfg.router, cfg.rehearsal]));
    let (router, report) = match cache.routers.get(&key) {
        Some(hit) => hit.clone(),
        None => {
            let r = &cfg.router;
            let seed = rng::mix(cfg.seed, rng::label("router") ^ step as u64);
            let mut router = Router::new(r.kind, cfg.model.frame.frames, step, cfg.model.channels, r.depth, r.hidden, seed)?;
            let report = train_router(&mut router, branches, union, &samples, r, seed)?;
            cache.routers.insert(key, (router.clone(), report.clone()));
            (router, report)
        }
    };
    let after: Vec<String> = branches.iter().map(RecognizerBranch::checksum).collect();
    let mass = frozen_gradient_mass(branches, &router, union, &samples, cfg.router.alpha)?;
    let log = StageTwoLog {
        samples: samples.len(),
        rehearsal_samples: memory.len(),
        skipped: report.skipped,
        final_loss: report.losses.last().copied(),
        branches_unchanged: before == after,
        frozen_gradient_mass: mass,
    };
    if !log.branches_unchanged || mass != 0.0 {
        return Err(MrnError::Audit(format!("step {step}: branch parameters changed or received gradient")));
    }
    Ok((router, log))
}

fn test_sets(vault: &DataVault, step: usize) -> Result<Vec<(u8, &[TextInstance])>> {
    (1..=step).map(|k| Ok((vault.script_id(k), vault.test(step, k)?))).collect()
}

fn finish(mode: RunMode, cfg: &ExperimentConfig, matrix: AccuracyMatrix, steps: Vec<StepLog>, predictions: Vec<Prediction>, vault: &DataVault) -> RunReport {
    RunReport {
        mode,
        voting: cfg.voting,
        order: cfg.order.clone(),
        avg: matrix.avg(),
        last: matrix.last(),
        macro_acc: matrix.macro_rows(),
        matrix,
        steps,
        audit_violations: vault.violations(),
        predictions,
        config: cfg.clone(),
    }
}

/// The full MRN schedule.
pub fn run_schedule(cfg: &ExperimentConfig, cache: &mut ModelCache) -> Result<(RunReport, RunArtifacts)> {
    let (_, datasets) = cache.datasets(cfg)?;
    let vault = DataVault::new(datasets);
    let mut union = UnionCharset::new();
    let mut branches: Vec<RecognizerBranch> = Vec::new();
    let mut routers = Vec::new();
    let mut memory = RehearsalSet::new(cfg.rehearsal.capacity, cfg.rehearsal.strategy, rng::mix(cfg.seed, rng::label("rehearsal")))?;
    let mut matrix = AccuracyMatrix::default();
    let mut steps = Vec::new();
    let mut predictions = Vec::new();
    for step in 1..=vault.len() {
        let started = Instant::now();
        let lang = vault.script_id(step);
        union.extend(lang, vault.charset(step))?;

        let (branch, rep) = run_stage1(cfg, &vault, step, &union, cache)?;
        let stage1 = StageOneLog {
            initial_loss: rep.initial_loss(),
            final_loss: rep.final_loss(),
            infeasible: rep.infeasible,
            checksum: branch.checksum(),
        };
        branches.push(branch);

        let coverage = memory.coverage(step, &union);
        let (router, stage2) = if step == 1 {
            let r = &cfg.router;
            (Router::new(r.kind, cfg.model.frame.frames, 1, cfg.model.channels, r.depth, r.hidden, cfg.seed)?, None)
        } else {
            let (router, log) = run_stage2(cfg, &vault, step, &branches, &union, &memory, cache)?;
            (router, Some(log))
        };

        let tests = test_sets(&vault, step)?;
        let outcome = evaluate(step, &branches, Scorer::Router(&router), &union, &tests, cfg.voting)?;
        matrix.push(outcome.scores.clone());
        predictions.extend(outcome.predictions.iter().cloned());

        let train = vault.train(step, step, "rehearsal")?;
        let freq = char_frequencies(train);
        let newest = &branches[step - 1];
        let mask = newest.own_mask(&union)?;
        let ctx = ScoreContext {
            branch: Some((newest, &mask)),
            frequencies: Some(&freq),
            draw: None,
        };
        memory.update(step, train, &ctx)?;
        routers.push(router);
        steps.push(StepLog {
            step,
            task: lang,
            union_size: union.entries().len(),
            stage1: Some(stage1),
            stage2,
            domain_accuracy: (step > 1).then(|| outcome.domain_accuracy()),
            coverage: Some(coverage),
            seconds: started.elapsed().as_secs_f64(),
        });
    }
    let report = finish(RunMode::Mrn, cfg, matrix, steps, predictions, &vault);
    let artifacts = RunArtifacts {
        union,
        branches,
        routers,
        rehearsal: Some(memory),
        audit: vault.log(),
    };
    Ok((report, artifacts))
}

/// One recognizer over the growing union, fine-tuned at each step on the new
/// task plus the rehearsal memory.
pub fn run_baseline_sequential(cfg: &ExperimentConfig, cache: &mut ModelCache) -> Result<(RunReport, RunArtifacts)> {
    let (_, datasets) = cache.datasets(cfg)?;
    let vault = DataVault::new(datasets);
    let mut union = UnionCharset::new();
    let mut memory = RehearsalSet::new(cfg.rehearsal.capacity, cfg.rehearsal.strategy, rng::mix(cfg.seed, rng::label("rehearsal")))?;
    let mut model: Option<RecognizerBranch> = None;
    let mut matrix = AccuracyMatrix::default();
    let mut steps = Vec::new();
    let mut predictions = Vec::new();
    for step in 1..=vault.len() {
        let started = Instant::now();
        let lang = vault.script_id(step);
        union.extend(lang, vault.charset(step))?;
        let coverage = memory.coverage(step, &union);
        let rep = match model.as_mut() {
            None => {
                // step 1 is the stage-I recipe, so it shares the cached branch
                let (b, rep) = run_stage1(cfg, &vault, step, &union, cache)?;
                let params = b.params().clone();
                model = Some(RecognizerBranch::from_parts(b.language_id, b.shape, params, b.snapshot().to_vec(), false)?);
                rep
            }
            Some(m) => {
                m.widen(&union)?;
                let train = vault.train(step, step, "baseline")?;
                let samples = encode_samples(&union, train.iter().chain(memory.entries().map(|e| &e.instance)))?;
                let tc = cfg.training.train_config(rng::mix(cfg.seed, rng::label("baseline") ^ step as u64));
                fit(m, &samples, &union.full_mask(), &tc, "baseline")?
            }
        };
        let m = model.as_ref().expect("set above");
        let tests = test_sets(&vault, step)?;
        let outcome = evaluate_single(step, m, &union, &tests)?;
        matrix.push(outcome.scores.clone());
        predictions.extend(outcome.predictions);

        let train = vault.train(step, step, "rehearsal")?;
        let freq = char_frequencies(train);
        let mask = union.full_mask();
        let ctx = ScoreContext {
            branch: Some((m, &mask)),
            frequencies: Some(&freq),
            draw: None,
        };
        memory.update(step, train, &ctx)?;
        steps.push(StepLog {
            step,
            task: lang,
            union_size: union.entries().len(),
            stage1: Some(StageOneLog {
                initial_loss: rep.initial_loss(),
                final_loss: rep.final_loss(),
                infeasible: rep.infeasible,
                checksum: m.checksum(),
            }),
            stage2: None,
            domain_accuracy: None,
            coverage: Some(coverage),
            seconds: started.elapsed().as_secs_f64(),
        });
    }
    let report = finish(RunMode::Baseline, cfg, matrix, steps, predictions, &vault);
    let artifacts = RunArtifacts {
        union,
        branches: model.into_iter().collect(),
        routers: Vec::new(),
        rehearsal: Some(memory),
        audit: vault.log(),
    };
    Ok((report, artifacts))
}

/// One recognizer trained on every task's data at once. Rehearsal settings
/// play no part.
pub fn run_bound_joint(cfg: &ExperimentConfig, cache: &mut ModelCache) -> Result<(RunReport, RunArtifacts)> {
    let started = Instant::now();
    let (_, datasets) = cache.datasets(cfg)?;
    let vault = DataVault::new(datasets);
    let n = vault.len();
    let mut union = UnionCharset::new();
    for k in 1..=n {
        union.extend(vault.script_id(k), vault.charset(k))?;
    }
    let all = vault.train_joint("bound");
    let samples = encode_samples(&union, all.iter().flat_map(|s| s.iter()))?;
    let seed = rng::mix(cfg.seed, rng::label("bound"));
    let mask = union.full_mask();
    let mut model = RecognizerBranch::new(vault.script_id(1), cfg.model, &union, &mask, seed)?;
    let tc = crate::recognizer::TrainConfig {
        iterations: cfg.training.bound_iterations,
        ..cfg.training.train_config(seed)
    };
    let rep = fit(&mut model, &samples, &mask, &tc, "bound")?;
    model.freeze();
    let tests = test_sets(&vault, n)?;
    let outcome = evaluate_single(n, &model, &union, &tests)?;
    let mut matrix = AccuracyMatrix::default();
    matrix.push(outcome.scores.clone());
    let steps = vec![StepLog {
        step: n,
        task: vault.script_id(n),
        union_size: union.entries().len(),
        stage1: Some(StageOneLog {
            initial_loss: rep.initial_loss(),
            final_loss: rep.final_loss(),
            infeasible: rep.infeasible,
            checksum: model.checksum(),
        }),
        stage2: None,
        domain_accuracy: None,
        coverage: None,
        seconds: started.elapsed().as_secs_f64(),
    }];
    let report = finish(RunMode::Bound, cfg, matrix, steps, outcome.predictions, &vault);
    let artifacts = RunArtifacts {
        union,
        branches: vec![model],
        routers: Vec::new(),
        rehearsal: None,
        audit: vault.log(),
    };
    Ok((report, artifacts))
}

pub fn run_mode(mode: RunMode, cfg: &ExperimentConfig, cache: &mut ModelCache) -> Result<(RunReport, RunArtifacts)> {
    match mode {
        RunMode::Mrn => run_schedule(cfg, cache),
        RunMode::Baseline => run_baseline_sequential(cfg, cache),
        RunMode::Bound => run_bound_joint(cfg, cache),
    }
}
