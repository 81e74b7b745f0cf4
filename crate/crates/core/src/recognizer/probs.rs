use serde::{Deserialize, Serialize};

use super::charset::UnionCharset;
use super::ctc::ctc_greedy_decode;
use crate::error::{contract, MrnError, Result};
use crate::glyphgen::GlobalId;

/// `frames × classes` row-stochastic matrix, blank in column 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceProbs {
    frames: usize,
    classes: usize,
    data: Vec<f64>,
}

impl SequenceProbs {
    pub fn new(frames: usize, classes: usize, data: Vec<f64>) -> Result<Self> {
        if frames == 0 || classes == 0 || data.len() != frames * classes {
            return Err(contract(format!(
                "sequence probabilities: {} values for {frames}×{classes}",
                data.len()
            )));
        }
        Ok(SequenceProbs { frames, classes, data })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.classes..(t + 1) * self.classes]
    }

    /// Greedy CTC decode to union indices.
    pub fn decode(&self) -> Vec<usize> {
        ctc_greedy_decode(&self.data, self.classes)
    }

    /// Largest deviation of a row sum from 1.
    pub fn max_row_error(&self) -> f64 {
        self.data
            .chunks(self.classes)
            .map(|r| (r.iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// Mean over frames of the per-frame maximum probability.
    pub fn mean_max(&self) -> f64 {
        let total: f64 = self.data.chunks(self.classes).map(|r| r.iter().copied().fold(0.0, f64::max)).sum();
        total / self.frames as f64
    }
}

/// Scatters probabilities over `[blank] ++ source` into union positions; every
/// other union column is exactly zero.
pub fn pad_to_union(probs: &SequenceProbs, source: &[GlobalId], union: &UnionCharset) -> Result<SequenceProbs> {
    if probs.classes != source.len() + 1 {
        return Err(contract(format!(
            "pad_to_union: {} columns but {} source entries plus blank",
            probs.classes,
            source.len()
        )));
    }
    let mut target = Vec::with_capacity(probs.classes);
    target.push(0);
    for &id in source {
        let j = union
            .index_of(id)
            .ok_or_else(|| MrnError::Registry(format!("character {id} missing from the union")))?;
        target.push(j);
    }
    let width = union.width();
    let mut data = vec![0.0; probs.frames * width];
    for t in 0..probs.frames {
        let src = probs.row(t);
        let dst = &mut data[t * width..(t + 1) * width];
        for (k, &j) in target.iter().enumerate() {
            dst[j] += src[k];
        }
    }
    SequenceProbs::new(probs.frames, width, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scatter_into_wider_union() {
        let mut u = UnionCharset::new();
        u.extend(0, &[10, 11]).unwrap();
        u.extend(1, &[12, 13]).unwrap();
        let p = SequenceProbs::new(1, 3, vec![0.5, 0.3, 0.2]).unwrap();
        let q = pad_to_union(&p, &[10, 11], &u).unwrap();
        assert_eq!(q.data(), &[0.5, 0.3, 0.2, 0.0, 0.0]);
        let same = pad_to_union(&q, u.entries(), &u).unwrap();
        assert_eq!(same, q);
        assert!(pad_to_union(&p, &[10, 99], &u).is_err());
    }
}
