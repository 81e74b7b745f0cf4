//! Procedural multilingual glyph data.
//!
//! A "script" is a charset of seeded random glyph prototypes drawn in one of a
//! few stroke styles. Text instances are left-to-right strips of prototypes
//! with jitter, contrast scaling and Gaussian pixel noise. Character
//! frequencies follow a Zipf law over the local charset so that small
//! subsamples miss rare categories.

mod benchmark;
mod dataset;
mod glyph;
mod registry;
mod render;
mod zipf;

use serde::{Deserialize, Serialize};

pub use benchmark::{default_benchmark, scaled_counts, MLT17_TEST, MLT17_TRAIN};
pub use dataset::{build_task_dataset, TaskDataset};
pub use glyph::{make_script, GlyphPrototype, SHARED_GLYPH_SEED};
pub use registry::{CharsetRegistry, GlobalId};
pub use render::{render_instance, GrayImage, TextInstance};
pub use zipf::{sample_label_sequence, zipf_probabilities, Zipf};

/// Glyph box side and image height in pixels.
pub const GLYPH_SIZE: usize = 16;
/// Horizontal distance between consecutive glyph origins.
pub const GLYPH_ADVANCE: usize = 16;
pub const DEFAULT_MAX_LEN: usize = 25;
/// Widest possible instance: `GLYPH_ADVANCE * DEFAULT_MAX_LEN`.
pub const MAX_WIDTH: usize = GLYPH_ADVANCE * DEFAULT_MAX_LEN;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrokeStyle {
    Angular,
    Curved,
    Dotted,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    /// Standard deviation of additive pixel noise.
    pub sigma: f64,
    /// Max absolute per-glyph offset in pixels, both axes.
    pub jitter: i32,
    /// Lower bound of the per-instance contrast factor (upper bound is 1).
    pub contrast_min: f64,
    /// Background intensity; ink is drawn towards 1.
    pub background: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig {
            sigma: 0.05,
            jitter: 1,
            contrast_min: 0.7,
            background: 0.2,
        }
    }
}

impl NoiseConfig {
    /// Noise-free rendering that reproduces prototypes exactly.
    pub fn clean() -> Self {
        NoiseConfig {
            sigma: 0.0,
            jitter: 0,
            contrast_min: 1.0,
            background: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptSpec {
    pub script_id: u8,
    #[serde(default)]
    pub name: String,
    pub charset_size: usize,
    /// Inclusive `[min, max]` strokes per glyph.
    pub stroke_count: [u32; 2],
    pub stroke_style: StrokeStyle,
    pub zipf_s: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
    #[serde(default = "default_max_len")]
    pub max_len: usize,
    #[serde(default)]
    pub noise: NoiseConfig,
}

fn default_max_len() -> usize {
    DEFAULT_MAX_LEN
}

impl ScriptSpec {
    pub fn validate(&self) -> crate::Result<()> {
        use crate::error::contract;
        if self.charset_size < 2 {
            return Err(contract(format!(
                "script {}: charset_size must be at least 2, got {}",
                self.script_id, self.charset_size
            )));
        }
        let [lo, hi] = self.stroke_count;
        if lo == 0 || lo > hi {
            return Err(contract(format!(
                "script {}: invalid stroke_count range [{lo}, {hi}]",
                self.script_id
            )));
        }
        if !(self.zipf_s >= 0.0 && self.zipf_s.is_finite()) {
            return Err(contract(format!("script {}: zipf_s must be >= 0", self.script_id)));
        }
        if self.max_len == 0 || self.max_len > DEFAULT_MAX_LEN {
            return Err(contract(format!(
                "script {}: max_len must be in 1..={DEFAULT_MAX_LEN}",
                self.script_id
            )));
        }
        let n = &self.noise;
        if n.sigma < 0.0 || n.jitter < 0 || !(0.0..=1.0).contains(&n.contrast_min) || !(0.0..1.0).contains(&n.background) {
            return Err(contract(format!("script {}: invalid noise config", self.script_id)));
        }
        Ok(())
    }
}
