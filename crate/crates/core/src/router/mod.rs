//! Language-domain routing over stacked branch features and probability fusion.

mod net;
mod train;

use mrn_autograd::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::recognizer::{ctc_loss_and_grad, SequenceProbs};

pub use net::{Router, RouterKind};
pub use train::{branch_outputs, fuse_var, stage2_loss_var, train_router, RouterConfig, RouterReport, RouterSample};

/// `P × D × C` stack of per-branch frame features.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureCubic {
    pub patches: usize,
    pub domains: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

/// Stacks D feature matrices of identical `T × C` shape; patch `p`, domain
/// `d`, channel `c` holds branch `d`'s frame `p`, channel `c`.
pub fn stack_features(per_branch: &[Tensor]) -> Result<FeatureCubic> {
    let first = per_branch.first().ok_or_else(|| contract("stack_features: no branches"))?;
    if first.rank() != 2 {
        return Err(contract(format!("stack_features: expected T×C matrices, got {:?}", first.shape())));
    }
    let (p, c, d) = (first.shape()[0], first.shape()[1], per_branch.len());
    if let Some(bad) = per_branch.iter().find(|t| t.shape() != first.shape()) {
        return Err(contract(format!(
            "stack_features: shape {:?} differs from {:?}",
            bad.shape(),
            first.shape()
        )));
    }
    let mut data = vec![0.0; p * d * c];
    for (k, t) in per_branch.iter().enumerate() {
        for row in 0..p {
            data[(row * d + k) * c..(row * d + k + 1) * c].copy_from_slice(t.row(row));
        }
    }
    Ok(FeatureCubic {
        patches: p,
        domains: d,
        channels: c,
        data,
    })
}

impl FeatureCubic {
    pub fn shape(&self) -> [usize; 3] {
        [self.patches, self.domains, self.channels]
    }

    /// Branch `d`'s `P × C` matrix.
    pub fn domain(&self, d: usize) -> Tensor {
        let (p, dd, c) = (self.patches, self.domains, self.channels);
        let mut out = Vec::with_capacity(p * c);
        for row in 0..p {
            out.extend_from_slice(&self.data[(row * dd + d) * c..(row * dd + d + 1) * c]);
        }
        Tensor::new([p, c], out).expect("shape matches data")
    }
}

/// Point on the D-simplex.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainScores(pub Vec<f64>);

impl DomainScores {
    /// Index of the largest score, lowest index on ties.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (k, &v) in self.0.iter().enumerate() {
            if v > self.0[best] {
                best = k;
            }
        }
        best
    }

    pub fn is_simplex(&self, tol: f64) -> bool {
        self.0.iter().all(|&v| v >= 0.0) && (self.0.iter().sum::<f64>() - 1.0).abs() <= tol
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VotingMode {
    #[default]
    Soft,
    Hard,
}

impl std::str::FromStr for VotingMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "soft" => Ok(VotingMode::Soft),
            "hard" => Ok(VotingMode::Hard),
            other => Err(format!("unknown voting mode {other:?} (expected soft or hard)")),
        }
    }
}

impl std::fmt::Display for VotingMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            VotingMode::Soft => "soft",
            VotingMode::Hard => "hard",
        })
    }
}

pub fn quantize(scores: &DomainScores, mode: VotingMode) -> Vec<f64> {
    match mode {
        VotingMode::Soft => scores.0.clone(),
        VotingMode::Hard => {
            let k = scores.argmax();
            (0..scores.0.len()).map(|j| if j == k { 1.0 } else { 0.0 }).collect()
        }
    }
}

/// `Σ_k w_k · probs_k`, element-wise over identically shaped union rows.
pub fn fuse(weights: &[f64], probs: &[SequenceProbs]) -> Result<SequenceProbs> {
    let first = probs.first().ok_or_else(|| contract("fuse: no branches"))?;
    if weights.len() != probs.len() {
        return Err(contract(format!("fuse: {} weights for {} branches", weights.len(), probs.len())));
    }
    let (t, k) = (first.frames(), first.classes());
    if let Some(bad) = probs.iter().find(|p| p.frames() != t || p.classes() != k) {
        return Err(contract(format!(
            "fuse: {}×{} probabilities do not match {t}×{k}",
            bad.frames(),
            bad.classes()
        )));
    }
    let mut data = vec![0.0; t * k];
    for (w, p) in weights.iter().zip(probs) {
        if *w == 0.0 {
            continue;
        }
        for (o, v) in data.iter_mut().zip(p.data()) {
            *o += w * v;
        }
    }
    SequenceProbs::new(t, k, data)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_clf: f64,
    pub l_domain: f64,
    pub l_total: f64,
}

/// Value of the stage-II objective for one instance.
pub fn stage2_loss(fused: &SequenceProbs, labels: &[usize], scores: &DomainScores, true_domain: usize, alpha: f64) -> Result<LossReport> {
    if alpha < 0.0 {
        return Err(contract(format!("alpha must be non-negative, got {alpha}")));
    }
    let p = *scores
        .0
        .get(true_domain)
        .ok_or_else(|| contract(format!("domain {true_domain} outside {} scores", scores.0.len())))?;
    let (l_clf, _) = ctc_loss_and_grad(fused.data(), fused.classes(), labels)?;
    let l_domain = -p.ln();
    Ok(LossReport {
        l_clf,
        l_domain,
        l_total: l_clf + alpha * l_domain,
    })
}
