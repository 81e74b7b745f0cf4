use mrn_autograd::{Adam, CustomOp, Graph, OneCycle, Tensor, Var};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::net::{Router, RouterKind};
use super::{FeatureCubic, LossReport};
use crate::error::{contract, Result};
use crate::glyphgen::GrayImage;
use crate::recognizer::{ctc_batch, pad_to_union, RecognizerBranch, SequenceProbs, UnionCharset};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RouterConfig {
    pub kind: RouterKind,
    pub depth: usize,
    pub alpha: f64,
    pub iterations: usize,
    pub batch: usize,
    pub max_lr: f64,
    /// Hidden width of the MLP router.
    pub hidden: usize,
    /// Draw every batch slot from a uniformly chosen domain instead of
    /// uniformly over samples.
    #[serde(default = "default_true")]
    pub balanced: bool,
    /// Roll each training cubic along the patch axis by a random offset.
    #[serde(default = "default_true")]
    pub shift_augment: bool,
}

fn default_true() -> bool {
    true
}

impl Default for RouterConfig {
    fn default() -> Self {
        RouterConfig {
            kind: RouterKind::Dm,
            depth: 1,
            alpha: 15.0,
            iterations: 800,
            batch: 32,
            max_lr: 1e-2,
            hidden: 64,
            balanced: true,
            shift_augment: true,
        }
    }
}

/// One stage-II training example.
#[derive(Clone, Debug)]
pub struct RouterSample<'a> {
    pub image: &'a GrayImage,
    /// Union indices of the label sequence.
    pub targets: Vec<usize>,
    /// Position of the instance's language among the branches.
    pub domain: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RouterReport {
    pub losses: Vec<LossReport>,
    /// CTC-infeasible targets skipped over all batches.
    pub skipped: usize,
}

/// Features stacked into cubics and union-padded probabilities of every
/// branch, per image. Branches are evaluated without recording gradients.
pub fn branch_outputs(
    branches: &[RecognizerBranch],
    union: &UnionCharset,
    images: &[&GrayImage],
) -> Result<(Vec<FeatureCubic>, Vec<Vec<SequenceProbs>>)> {
    let mut feats: Vec<Vec<Tensor>> = vec![Vec::with_capacity(branches.len()); images.len()];
    let mut probs: Vec<Vec<SequenceProbs>> = vec![Vec::with_capacity(branches.len()); images.len()];
    for b in branches {
        let (f, p) = b.forward_batch(images, &b.own_mask(union)?)?;
        for (i, (fi, pi)) in f.into_iter().zip(p).enumerate() {
            feats[i].push(fi);
            probs[i].push(pad_to_union(&pi, b.snapshot(), union)?);
        }
    }
    let cubics = feats.iter().map(|f| super::stack_features(f)).collect::<Result<Vec<_>>>()?;
    Ok((cubics, probs))
}

/// Soft fusion node holding the constant probabilities.
#[derive(Debug)]
struct Fuse {
    probs: Tensor,
}

impl CustomOp for Fuse {
    fn name(&self) -> &'static str {
        "fuse"
    }

    fn backward(&self, grad_output: &Tensor, inputs: &[&Tensor], _output: &Tensor) -> mrn_autograd::Result<Vec<Option<Tensor>>> {
        let shape = inputs[0].shape().to_vec();
        let (b, d) = (shape[0], shape[1]);
        let tk = self.probs.len() / (b * d);
        let (go, p) = (grad_output.data(), self.probs.data());
        let mut grad = vec![0.0; b * d];
        for i in 0..b {
            let gi = &go[i * tk..(i + 1) * tk];
            for k in 0..d {
                let pk = &p[(i * d + k) * tk..(i * d + k + 1) * tk];
                grad[i * d + k] = gi.iter().zip(pk).map(|(x, y)| x * y).sum();
            }
        }
        Ok(vec![Some(Tensor::new(shape, grad)?)])
    }
}

/// Differentiable soft fusion: `weights (B×D)` against constant probabilities
/// laid out `(B·D) × (T·K)`, returning `(B·T) × K`.
pub fn fuse_var(g: &mut Graph, weights: Var, probs: Tensor, frames: usize) -> Result<Var> {
    let (b, d) = (g.shape(weights)[0], g.shape(weights)[1]);
    let tk = probs.len() / (b * d);
    if probs.shape() != [b * d, tk] || tk % frames != 0 {
        return Err(contract(format!(
            "fuse_var: probabilities {:?} do not match {b}×{d} weights",
            probs.shape()
        )));
    }
    let w = g.value(weights).data().to_vec();
    let p = probs.data();
    let mut out = vec![0.0; b * tk];
    for i in 0..b {
        let oi = &mut out[i * tk..(i + 1) * tk];
        for k in 0..d {
            let wk = w[i * d + k];
            if wk == 0.0 {
                continue;
            }
            for (o, x) in oi.iter_mut().zip(&p[(i * d + k) * tk..(i * d + k + 1) * tk]) {
                *o += wk * x;
            }
        }
    }
    let out = Tensor::new([b * frames, tk / frames], out)?;
    Ok(g.custom(Box::new(Fuse { probs }), &[weights], out)?)
}

/// `CTC(fused) + α·CE(scores)`, both averaged over the batch. `None` when every
/// target is infeasible.
pub fn stage2_loss_var(
    g: &mut Graph,
    fused: Var,
    frames: usize,
    labels: &[Vec<usize>],
    scores: Var,
    domains: &[usize],
    alpha: f64,
) -> Result<(Option<(Var, LossReport)>, usize)> {
    if alpha < 0.0 {
        return Err(contract(format!("alpha must be non-negative, got {alpha}")));
    }
    let ctc = ctc_batch(g, fused, frames, labels)?;
    let Some(clf) = ctc.loss else {
        return Ok((None, ctc.skipped));
    };
    let dom = g.cross_entropy(scores, domains)?;
    let weighted = g.scale(dom, alpha)?;
    let total = g.add(clf, weighted)?;
    let report = LossReport {
        l_clf: g.value(clf).item(),
        l_domain: g.value(dom).item(),
        l_total: g.value(total).item(),
    };
    Ok((Some((total, report)), ctc.skipped))
}

/// Fits `router` on the samples with the branches held fixed.
pub fn train_router(
    router: &mut Router,
    branches: &[RecognizerBranch],
    union: &UnionCharset,
    samples: &[RouterSample],
    cfg: &RouterConfig,
    seed: u64,
) -> Result<RouterReport> {
    if samples.is_empty() {
        return Err(contract("router training needs at least one sample"));
    }
    if branches.len() != router.domains {
        return Err(contract(format!(
            "{} branches for a router over {} domains",
            branches.len(),
            router.domains
        )));
    }
    let frames = router.patches;
    let width = union.width();
    let mut rng = rng::stream(seed, rng::label("stage2"));
    let mut pools = if cfg.balanced {
        let mut by_domain = vec![Vec::new(); router.domains];
        for (i, s) in samples.iter().enumerate() {
            if s.domain >= router.domains {
                return Err(contract(format!("sample domain {} out of range", s.domain)));
            }
            by_domain[s.domain].push(i);
        }
        by_domain.retain(|p| !p.is_empty());
        by_domain
    } else {
        vec![(0..samples.len()).collect::<Vec<usize>>()]
    };
    let mut cursors: Vec<usize> = pools.iter().map(|p| p.len()).collect();
    let schedule = OneCycle::new(cfg.max_lr, cfg.iterations);
    let mut adam = Adam::new(router.params());
    let mut report = RouterReport::default();
    let mut outputs: Vec<Option<(FeatureCubic, Vec<SequenceProbs>)>> = vec![None; samples.len()];
    for it in 0..cfg.iterations {
        let mut idx = Vec::with_capacity(cfg.batch);
        while idx.len() < cfg.batch.min(samples.len()) {
            let k = if pools.len() == 1 { 0 } else { rng.gen_range(0..pools.len()) };
            if cursors[k] == pools[k].len() {
                pools[k].shuffle(&mut rng);
                cursors[k] = 0;
            }
            idx.push(pools[k][cursors[k]]);
            cursors[k] += 1;
        }
        // branches are frozen, so outputs are computed once per sample
        let missing: Vec<usize> = idx.iter().copied().filter(|&i| outputs[i].is_none()).collect();
        if !missing.is_empty() {
            let images: Vec<&GrayImage> = missing.iter().map(|&i| samples[i].image).collect();
            let (cubics, probs) = branch_outputs(branches, union, &images)?;
            for ((i, c), p) in missing.iter().zip(cubics).zip(probs) {
                outputs[*i] = Some((c, p));
            }
        }
        let cubics: Vec<&FeatureCubic> = idx.iter().map(|&i| &outputs[i].as_ref().expect("filled above").0).collect();
        let probs: Vec<&Vec<SequenceProbs>> = idx.iter().map(|&i| &outputs[i].as_ref().expect("filled above").1).collect();
        let b = idx.len();
        let d = router.domains;
        let mut cube: Vec<f64> = Vec::with_capacity(cubics.len() * cubics[0].data.len());
        for c in cubics.iter() {
            let k = if cfg.shift_augment { rng.gen_range(0..c.patches) } else { 0 };
            let row = c.domains * c.channels;
            cube.extend_from_slice(&c.data[k * row..]);
            cube.extend_from_slice(&c.data[..k * row]);
        }
        let flat: Vec<f64> = probs.iter().copied().flatten().flat_map(|p| p.data().iter().copied()).collect();

        let mut g = Graph::new();
        let v = router.register(&mut g, true);
        let x = g.constant(Tensor::new([b, router.patches, d, router.channels], cube)?);
        let scores = router.forward_var(&mut g, &v, x)?;
        let fused = fuse_var(&mut g, scores, Tensor::new([b * d, frames * width], flat)?, frames)?;
        let labels: Vec<Vec<usize>> = idx.iter().map(|&i| samples[i].targets.clone()).collect();
        let domains: Vec<usize> = idx.iter().map(|&i| samples[i].domain).collect();
        let (loss, skipped) = stage2_loss_var(&mut g, fused, frames, &labels, scores, &domains, cfg.alpha)?;
        report.skipped += skipped;
        let Some((loss, values)) = loss else { continue };
        report.losses.push(values);
        let mut grads = g.backward(loss)?;
        let grads: Vec<_> = v.iter().map(|&var| grads.take(var)).collect();
        adam.step(router.params_mut(), &grads, schedule.lr(it));
    }
    Ok(report)
}
