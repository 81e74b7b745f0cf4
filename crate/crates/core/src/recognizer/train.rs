use mrn_autograd::{Adam, Graph, OneCycle};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::branch::{BranchShape, RecognizerBranch};
use super::charset::UnionCharset;
use super::ctc::{check_feasible, ctc_batch};
use crate::error::{contract, MrnError, Result};
use crate::glyphgen::{GrayImage, TaskDataset, TextInstance};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch: usize,
    pub max_lr: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 2000,
            batch: 32,
            max_lr: 5e-4,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean batch loss per iteration.
    pub losses: Vec<f64>,
    /// Training instances whose target cannot fit in the frame count.
    pub infeasible: usize,
}

impl TrainReport {
    fn window_mean(xs: &[f64]) -> f64 {
        xs.iter().sum::<f64>() / xs.len().max(1) as f64
    }

    /// Mean over the first 20 iterations.
    pub fn initial_loss(&self) -> f64 {
        Self::window_mean(&self.losses[..self.losses.len().min(20)])
    }

    /// Mean over the last 20 iterations.
    pub fn final_loss(&self) -> f64 {
        Self::window_mean(&self.losses[self.losses.len().saturating_sub(20)..])
    }
}

/// Trains every unfrozen parameter of `branch` on `(image, union targets)`
/// pairs with CTC under `mask`. Batches come from reshuffled epochs keyed by
/// `cfg.seed` and `stream`.
pub fn fit(
    branch: &mut RecognizerBranch,
    samples: &[(&GrayImage, Vec<usize>)],
    mask: &[bool],
    cfg: &TrainConfig,
    stream: &str,
) -> Result<TrainReport> {
    if cfg.batch == 0 {
        return Err(contract("batch size must be positive"));
    }
    let frames = branch.shape.frame.frames;
    let feasible: Vec<usize> = (0..samples.len())
        .filter(|&i| check_feasible(frames, &samples[i].1).is_ok())
        .collect();
    let mut report = TrainReport {
        losses: Vec::with_capacity(cfg.iterations),
        infeasible: samples.len() - feasible.len(),
    };
    if feasible.is_empty() {
        return Err(MrnError::TrainingImpossible(format!(
            "all {} training instances are CTC-infeasible at {frames} frames",
            samples.len()
        )));
    }
    let mut rng = rng::stream(cfg.seed, rng::label(stream));
    let mut order = feasible.clone();
    let mut cursor = order.len();
    let schedule = OneCycle::new(cfg.max_lr, cfg.iterations);
    let mut adam = Adam::new(branch.params());
    for it in 0..cfg.iterations {
        let mut idx = Vec::with_capacity(cfg.batch);
        while idx.len() < cfg.batch.min(feasible.len()) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            idx.push(order[cursor]);
            cursor += 1;
        }
        let images: Vec<&GrayImage> = idx.iter().map(|&i| samples[i].0).collect();
        let labels: Vec<Vec<usize>> = idx.iter().map(|&i| samples[i].1.clone()).collect();

        let mut g = Graph::new();
        let v = branch.register(&mut g, true);
        let x = g.constant(branch.frames_of(&images)?);
        let f = branch.features_var(&mut g, &v, x)?;
        let p = branch.classify_masked(&mut g, &v, f, mask)?;
        let loss = ctc_batch(&mut g, p, frames, &labels)?
            .loss
            .expect("batch holds only feasible targets");
        report.losses.push(g.value(loss).item());
        let mut grads = g.backward(loss)?;
        let grads: Vec<_> = v.0.iter().map(|&var| grads.take(var)).collect();
        adam.step(branch.params_mut()?, &grads, schedule.lr(it));
    }
    Ok(report)
}

/// Stage-I training of one language: a fresh branch over the current union,
/// classifier restricted to the language's charset, frozen on return.
pub fn train_branch(
    dataset: &TaskDataset,
    union: &UnionCharset,
    shape: BranchShape,
    cfg: &TrainConfig,
) -> Result<(RecognizerBranch, TrainReport)> {
    train_branch_on(dataset.script_id, &dataset.train, union, shape, cfg)
}

/// [`train_branch`] over an explicit instance list of language `lang`.
pub fn train_branch_on(
    lang: u8,
    train: &[TextInstance],
    union: &UnionCharset,
    shape: BranchShape,
    cfg: &TrainConfig,
) -> Result<(RecognizerBranch, TrainReport)> {
    if train.is_empty() {
        return Err(MrnError::TrainingImpossible(format!("script {lang} has no training data")));
    }
    let mask = union.mask(lang)?;
    let seed = rng::mix(cfg.seed, lang as u64);
    let mut branch = RecognizerBranch::new(lang, shape, union, &mask, seed)?;
    let samples = train
        .iter()
        .map(|inst| Ok((&inst.image, union.encode(&inst.labels)?)))
        .collect::<Result<Vec<_>>>()?;
    let cfg = TrainConfig { seed, ..cfg.clone() };
    let report = fit(&mut branch, &samples, &mask, &cfg, "stage1")?;
    branch.freeze();
    Ok((branch, report))
}

/// Fraction of exact sequence matches.
pub fn word_accuracy<T: PartialEq>(predicted: &[Vec<T>], truth: &[Vec<T>]) -> f64 {
    if predicted.is_empty() {
        return 0.0;
    }
    let hits = predicted.iter().zip(truth).filter(|(p, t)| p == t).count();
    hits as f64 / predicted.len() as f64
}
