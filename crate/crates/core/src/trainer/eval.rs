use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::glyphgen::{GlobalId, GrayImage, TextInstance};
use crate::recognizer::{RecognizerBranch, UnionCharset};
use crate::router::{branch_outputs, fuse, quantize, DomainScores, Router, VotingMode};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskScore {
    pub task: u8,
    pub correct: usize,
    pub total: usize,
}

impl TaskScore {
    pub fn accuracy(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }
}

/// Pooled accuracy over several task scores.
pub fn pooled(scores: &[TaskScore]) -> f64 {
    let (c, t) = scores.iter().fold((0, 0), |(c, t), s| (c + s.correct, t + s.total));
    if t == 0 {
        0.0
    } else {
        c as f64 / t as f64
    }
}

/// Mean of per-task accuracies.
pub fn macro_mean(scores: &[TaskScore]) -> f64 {
    if scores.is_empty() {
        return 0.0;
    }
    scores.iter().map(TaskScore::accuracy).sum::<f64>() / scores.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub step: usize,
    pub task: u8,
    pub index: usize,
    pub truth: Vec<GlobalId>,
    pub predicted: Vec<GlobalId>,
    pub correct: bool,
    /// Domain scores before quantization; empty for single-model systems.
    pub scores: Vec<f64>,
}

/// Source of domain weights during evaluation.
#[derive(Clone, Copy, Debug)]
pub enum Scorer<'a> {
    Router(&'a Router),
    /// One-hot on the instance's true language.
    Oracle,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalOutcome {
    pub scores: Vec<TaskScore>,
    pub predictions: Vec<Prediction>,
    pub domain_correct: usize,
    pub domain_total: usize,
}

impl EvalOutcome {
    pub fn domain_accuracy(&self) -> f64 {
        self.domain_correct as f64 / self.domain_total.max(1) as f64
    }
}

const CHUNK: usize = 64;

/// Routed, fused and greedily decoded predictions of the branch ensemble on
/// each `(task, instances)` test set.
pub fn evaluate(
    step: usize,
    branches: &[RecognizerBranch],
    scorer: Scorer,
    union: &UnionCharset,
    tests: &[(u8, &[TextInstance])],
    mode: VotingMode,
) -> Result<EvalOutcome> {
    if branches.is_empty() {
        return Err(contract("evaluation needs at least one branch"));
    }
    let langs: Vec<u8> = branches.iter().map(|b| b.language_id).collect();
    let mut out = EvalOutcome::default();
    for &(task, instances) in tests {
        let domain = langs
            .iter()
            .position(|&l| l == task)
            .ok_or_else(|| contract(format!("no branch for task {task}")))?;
        let chunks: Vec<(Vec<Prediction>, usize)> = instances
            .par_chunks(CHUNK)
            .enumerate()
            .map(|(ci, chunk)| {
                let images: Vec<&GrayImage> = chunk.iter().map(|i| &i.image).collect();
                let (cubics, probs) = branch_outputs(branches, union, &images)?;
                let scores = match scorer {
                    Scorer::Router(r) => r.scores(&cubics)?,
                    Scorer::Oracle => (0..chunk.len())
                        .map(|_| DomainScores((0..langs.len()).map(|k| if k == domain { 1.0 } else { 0.0 }).collect()))
                        .collect(),
                };
                let mut preds = Vec::with_capacity(chunk.len());
                let mut dom_hits = 0;
                for (j, inst) in chunk.iter().enumerate() {
                    let w = quantize(&scores[j], mode);
                    let fused = fuse(&w, &probs[j])?;
                    let predicted = union.decode(&fused.decode())?;
                    dom_hits += usize::from(scores[j].argmax() == domain);
                    preds.push(Prediction {
                        step,
                        task,
                        index: ci * CHUNK + j,
                        correct: predicted == inst.labels,
                        truth: inst.labels.clone(),
                        predicted,
                        scores: scores[j].0.clone(),
                    });
                }
                Ok((preds, dom_hits))
            })
            .collect::<Result<_>>()?;
        let mut score = TaskScore {
            task,
            correct: 0,
            total: instances.len(),
        };
        for (preds, hits) in chunks {
            out.domain_correct += hits;
            score.correct += preds.iter().filter(|p| p.correct).count();
            out.predictions.extend(preds);
        }
        out.domain_total += instances.len();
        out.scores.push(score);
    }
    Ok(out)
}

/// Predictions of a single model over the whole union.
pub fn evaluate_single(
    step: usize,
    model: &RecognizerBranch,
    union: &UnionCharset,
    tests: &[(u8, &[TextInstance])],
) -> Result<EvalOutcome> {
    let mask = vec![true; model.classes()];
    let mut out = EvalOutcome::default();
    for &(task, instances) in tests {
        let images: Vec<&GrayImage> = instances.iter().map(|i| &i.image).collect();
        let probs = model.predict_union(&images, &mask, union)?;
        let mut score = TaskScore {
            task,
            correct: 0,
            total: instances.len(),
        };
        for (index, (inst, p)) in instances.iter().zip(&probs).enumerate() {
            let predicted = union.decode(&p.decode())?;
            let correct = predicted == inst.labels;
            score.correct += usize::from(correct);
            out.predictions.push(Prediction {
                step,
                task,
                index,
                truth: inst.labels.clone(),
                predicted,
                correct,
                scores: Vec::new(),
            });
        }
        out.scores.push(score);
    }
    Ok(out)
}
