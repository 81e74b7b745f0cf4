//! Fixed-capacity rehearsal memory with equal per-task quotas.

use std::collections::{BTreeSet, HashMap};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::glyphgen::{GlobalId, TextInstance};
use crate::recognizer::{RecognizerBranch, UnionCharset};
use crate::rng;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    #[default]
    Random,
    Confidence,
    Length,
    Frequency,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::Random, Strategy::Confidence, Strategy::Length, Strategy::Frequency];
}

impl std::str::FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "random" => Ok(Strategy::Random),
            "confidence" => Ok(Strategy::Confidence),
            "length" => Ok(Strategy::Length),
            "frequency" => Ok(Strategy::Frequency),
            other => Err(format!("unknown sampling strategy {other:?}")),
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Strategy::Random => "random",
            Strategy::Confidence => "confidence",
            Strategy::Length => "length",
            Strategy::Frequency => "frequency",
        })
    }
}

/// Normalized character histogram of one task's training split.
pub fn char_frequencies<'a>(instances: impl IntoIterator<Item = &'a TextInstance>) -> HashMap<GlobalId, f64> {
    let mut counts: HashMap<GlobalId, f64> = HashMap::new();
    let mut total = 0.0;
    for inst in instances {
        for &c in &inst.labels {
            *counts.entry(c).or_default() += 1.0;
            total += 1.0;
        }
    }
    counts.values_mut().for_each(|v| *v /= total);
    counts
}

/// Inputs a strategy may need.
#[derive(Clone, Copy, Default)]
pub struct ScoreContext<'a> {
    /// Scoring model with the mask its predictions use.
    pub branch: Option<(&'a RecognizerBranch, &'a [bool])>,
    pub frequencies: Option<&'a HashMap<GlobalId, f64>>,
    /// Seed and position for the random draw.
    pub draw: Option<(u64, u64)>,
}

pub fn score_instance(strategy: Strategy, instance: &TextInstance, ctx: &ScoreContext) -> Result<f64> {
    match strategy {
        Strategy::Length => Ok(instance.labels.len() as f64),
        Strategy::Frequency => {
            let freq = ctx.frequencies.ok_or_else(|| contract("frequency scoring needs corpus statistics"))?;
            if instance.labels.is_empty() {
                return Ok(0.0);
            }
            let total: f64 = instance.labels.iter().map(|c| freq.get(c).copied().unwrap_or(0.0)).sum();
            Ok(total / instance.labels.len() as f64)
        }
        Strategy::Confidence => {
            let (branch, mask) = ctx.branch.ok_or_else(|| contract("confidence scoring needs a trained branch"))?;
            let probs = branch.predict_batch(&[&instance.image], mask)?;
            Ok(probs[0].mean_max())
        }
        Strategy::Random => {
            let (seed, pos) = ctx.draw.ok_or_else(|| contract("random scoring needs a seed"))?;
            Ok(rng::stream(seed, pos).gen::<f64>())
        }
    }
}

/// `floor(capacity / tasks)` each, remainder to the earliest tasks.
pub fn quotas(capacity: usize, tasks: usize) -> Vec<usize> {
    if tasks == 0 {
        return Vec::new();
    }
    let (q, r) = (capacity / tasks, capacity % tasks);
    (0..tasks).map(|k| q + usize::from(k < r)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RehearsalEntry {
    pub instance: TextInstance,
    pub origin_step: usize,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RehearsalSet {
    pub capacity: usize,
    pub strategy: Strategy,
    pub seed: u64,
    /// Entries of each admitted task, in admission order, sorted by rank.
    tasks: Vec<Vec<RehearsalEntry>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub step: usize,
    /// Union ids present in the memory.
    pub covered: usize,
    /// Size of the union the memory is measured against.
    pub union_size: usize,
    /// Characters of already-memorized tasks that the memory lacks.
    pub missing_old: Vec<GlobalId>,
    /// Size of the union of memorized tasks' charsets.
    pub old_size: usize,
}

impl CoverageReport {
    pub fn fraction(&self) -> f64 {
        self.covered as f64 / self.union_size.max(1) as f64
    }
}

fn rank(mut scored: Vec<(usize, f64)>) -> Vec<(usize, f64)> {
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored
}

impl RehearsalSet {
    pub fn new(capacity: usize, strategy: Strategy, seed: u64) -> Result<Self> {
        if capacity == 0 {
            return Err(contract("rehearsal capacity must be at least 1"));
        }
        Ok(RehearsalSet {
            capacity,
            strategy,
            seed,
            tasks: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.tasks.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn task_count(&self) -> usize {
        self.tasks.len()
    }

    pub fn per_task_counts(&self) -> Vec<usize> {
        self.tasks.iter().map(Vec::len).collect()
    }

    pub fn entries(&self) -> impl Iterator<Item = &RehearsalEntry> {
        self.tasks.iter().flatten()
    }

    /// Admits the finished task `step` (1-based) and shrinks older tasks to
    /// the new quotas by their stored ranking.
    pub fn update(&mut self, step: usize, instances: &[TextInstance], ctx: &ScoreContext) -> Result<()> {
        if step != self.tasks.len() + 1 {
            return Err(contract(format!(
                "rehearsal update for step {step} after {} admitted tasks",
                self.tasks.len()
            )));
        }
        let q = quotas(self.capacity, step);
        for (task, &quota) in self.tasks.iter_mut().zip(&q) {
            task.truncate(quota);
        }
        let draw_seed = rng::mix(self.seed, step as u64);
        let scored = instances
            .iter()
            .enumerate()
            .map(|(i, inst)| {
                let c = ScoreContext {
                    draw: Some((draw_seed, i as u64)),
                    ..*ctx
                };
                Ok((i, score_instance(self.strategy, inst, &c)?))
            })
            .collect::<Result<Vec<_>>>()?;
        let admitted = rank(scored)
            .into_iter()
            .take(q[step - 1])
            .map(|(i, score)| RehearsalEntry {
                instance: instances[i].clone(),
                origin_step: step,
                score,
            })
            .collect();
        self.tasks.push(admitted);
        Ok(())
    }

    pub fn coverage(&self, step: usize, union: &UnionCharset) -> CoverageReport {
        let present: BTreeSet<GlobalId> = self.entries().flat_map(|e| e.instance.labels.iter().copied()).collect();
        let langs: BTreeSet<u8> = self.entries().map(|e| e.instance.language_id).collect();
        let old: BTreeSet<GlobalId> = langs
            .iter()
            .filter_map(|&l| union.charset_of(l))
            .flat_map(|s| s.iter().copied())
            .collect();
        CoverageReport {
            step,
            covered: present.len(),
            union_size: union.entries().len(),
            missing_old: old.iter().copied().filter(|c| !present.contains(c)).collect(),
            old_size: old.len(),
        }
    }
}
