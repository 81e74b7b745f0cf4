use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{GlobalId, GlyphPrototype, NoiseConfig, GLYPH_ADVANCE, GLYPH_SIZE};
use crate::error::{contract, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrayImage {
    pub height: usize,
    pub width: usize,
    /// Row-major, `height × width`.
    pub pixels: Vec<f32>,
}

impl GrayImage {
    pub fn at(&self, row: usize, col: usize) -> f32 {
        self.pixels[row * self.width + col]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextInstance {
    pub image: GrayImage,
    pub labels: Vec<GlobalId>,
    pub language_id: u8,
}

impl TextInstance {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Draws `labels` (local indices into `prototypes`) left to right. Width is
/// exactly `labels.len() * GLYPH_ADVANCE`; glyphs shifted by jitter are
/// clipped at the border.
pub fn render_instance<R: Rng + ?Sized>(
    prototypes: &[GlyphPrototype],
    labels: &[usize],
    noise: &NoiseConfig,
    rng: &mut R,
) -> Result<GrayImage> {
    if labels.is_empty() {
        return Err(contract("render_instance: empty label sequence"));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= prototypes.len()) {
        return Err(contract(format!(
            "render_instance: label {bad} outside a charset of {}",
            prototypes.len()
        )));
    }
    let (h, w) = (GLYPH_SIZE, labels.len() * GLYPH_ADVANCE);
    let mut ink = vec![0.0f64; h * w];
    for (i, &l) in labels.iter().enumerate() {
        let (dx, dy) = if noise.jitter > 0 {
            (
                rng.gen_range(-noise.jitter..=noise.jitter),
                rng.gen_range(-noise.jitter..=noise.jitter),
            )
        } else {
            (0, 0)
        };
        let x0 = (i * GLYPH_ADVANCE) as i64 + dx as i64;
        let proto = &prototypes[l];
        for r in 0..GLYPH_SIZE {
            let y = r as i64 + dy as i64;
            if !(0..h as i64).contains(&y) {
                continue;
            }
            for c in 0..GLYPH_SIZE {
                let x = x0 + c as i64;
                if !(0..w as i64).contains(&x) {
                    continue;
                }
                let px = &mut ink[y as usize * w + x as usize];
                *px = px.max(proto.at(r, c) as f64);
            }
        }
    }
    let contrast = if noise.contrast_min < 1.0 {
        rng.gen_range(noise.contrast_min..=1.0)
    } else {
        1.0
    };
    let gain = contrast * (1.0 - noise.background);
    let normal = (noise.sigma > 0.0).then(|| Normal::new(0.0, noise.sigma).expect("sigma is finite"));
    let pixels = ink
        .into_iter()
        .map(|v| {
            let clean = noise.background + gain * v;
            let n = normal.map_or(0.0, |d| d.sample(rng));
            (clean + n).clamp(0.0, 1.0) as f32
        })
        .collect();
    Ok(GrayImage {
        height: h,
        width: w,
        pixels,
    })
}
