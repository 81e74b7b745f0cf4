use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;

use super::ScriptSpec;

/// Probability of each local category: rank `r = index + 1` has mass
/// proportional to `r^(-s)`.
pub fn zipf_probabilities(n: usize, s: f64) -> Vec<f64> {
    let w: Vec<f64> = (1..=n).map(|r| (r as f64).powf(-s)).collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|x| x / total).collect()
}

/// Sampler over local category indices.
#[derive(Clone, Debug)]
pub struct Zipf {
    probs: Vec<f64>,
    index: WeightedIndex<f64>,
}

impl Zipf {
    pub fn new(n: usize, s: f64) -> Self {
        let probs = zipf_probabilities(n, s);
        let index = WeightedIndex::new(&probs).expect("zipf weights are positive and finite");
        Zipf { probs, index }
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.probs
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        self.index.sample(rng)
    }
}

/// Length uniform in `[1, max_len]`, characters i.i.d. Zipf over the charset.
pub fn sample_label_sequence<R: Rng + ?Sized>(spec: &ScriptSpec, zipf: &Zipf, rng: &mut R) -> Vec<usize> {
    let len = rng.gen_range(1..=spec.max_len);
    (0..len).map(|_| zipf.sample(rng)).collect()
}
