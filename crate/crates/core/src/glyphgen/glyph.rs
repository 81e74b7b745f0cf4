use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ScriptSpec, StrokeStyle, GLYPH_SIZE};
use crate::rng;

/// Seed for the categories every script shares, so an aliased character
/// looks the same whichever script it appears in.
pub const SHARED_GLYPH_SEED: u64 = 0x5EED_0F_C0FFEE;

const MARGIN: f64 = 2.5;
const HALF_WIDTH: f64 = 0.55;
const MAX_ATTEMPTS: u64 = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlyphPrototype {
    pub category_index: usize,
    /// `GLYPH_SIZE × GLYPH_SIZE` row-major intensities in `[0, 1]`.
    pub bitmap: Vec<f32>,
}

impl GlyphPrototype {
    pub fn at(&self, row: usize, col: usize) -> f32 {
        self.bitmap[row * GLYPH_SIZE + col]
    }

    fn distinct_from(&self, other: &GlyphPrototype) -> bool {
        self.bitmap.iter().zip(&other.bitmap).any(|(a, b)| (a - b).abs() > 0.1)
    }
}

struct Canvas(Vec<f64>);

impl Canvas {
    fn new() -> Self {
        Canvas(vec![0.0; GLYPH_SIZE * GLYPH_SIZE])
    }

    /// Anti-aliased stamp: coverage falls off linearly one pixel beyond `radius`.
    fn stamp_with(&mut self, dist: impl Fn(f64, f64) -> f64, radius: f64) {
        for r in 0..GLYPH_SIZE {
            for c in 0..GLYPH_SIZE {
                let d = dist(c as f64 + 0.5, r as f64 + 0.5);
                let v = (radius + 0.5 - d).clamp(0.0, 1.0);
                let px = &mut self.0[r * GLYPH_SIZE + c];
                *px = px.max(v);
            }
        }
    }

    fn segment(&mut self, a: (f64, f64), b: (f64, f64)) {
        self.stamp_with(|x, y| segment_distance((x, y), a, b), HALF_WIDTH);
    }

    fn dot(&mut self, p: (f64, f64), radius: f64) {
        self.stamp_with(|x, y| ((x - p.0).powi(2) + (y - p.1).powi(2)).sqrt(), radius);
    }

    fn into_bitmap(self) -> Vec<f32> {
        self.0.into_iter().map(|v| v as f32).collect()
    }
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (cx, cy) = (a.0 + t * dx, a.1 + t * dy);
    ((p.0 - cx).powi(2) + (p.1 - cy).powi(2)).sqrt()
}

fn point(rng: &mut ChaCha8Rng) -> (f64, f64) {
    let hi = GLYPH_SIZE as f64 - MARGIN;
    (rng.gen_range(MARGIN..hi), rng.gen_range(MARGIN..hi))
}

fn bezier(p0: (f64, f64), p1: (f64, f64), p2: (f64, f64), t: f64) -> (f64, f64) {
    let u = 1.0 - t;
    (
        u * u * p0.0 + 2.0 * u * t * p1.0 + t * t * p2.0,
        u * u * p0.1 + 2.0 * u * t * p1.1 + t * t * p2.1,
    )
}

fn draw_stroke(canvas: &mut Canvas, style: StrokeStyle, rng: &mut ChaCha8Rng) {
    match style {
        StrokeStyle::Angular => {
            // polyline with one or two sharp corners
            let n = rng.gen_range(2..=3);
            let pts: Vec<_> = (0..=n).map(|_| point(rng)).collect();
            for w in pts.windows(2) {
                canvas.segment(w[0], w[1]);
            }
        }
        StrokeStyle::Curved => {
            let (p0, p1, p2) = (point(rng), point(rng), point(rng));
            let pts: Vec<_> = (0..=16).map(|i| bezier(p0, p1, p2, i as f64 / 16.0)).collect();
            for w in pts.windows(2) {
                canvas.segment(w[0], w[1]);
            }
        }
        StrokeStyle::Dotted => {
            let (p0, p1, p2) = (point(rng), point(rng), point(rng));
            let dots = rng.gen_range(3..=5);
            for i in 0..dots {
                let t = i as f64 / (dots - 1) as f64;
                canvas.dot(bezier(p0, p1, p2, t), 1.0);
            }
        }
    }
}

fn draw_glyph(style: StrokeStyle, strokes: [u32; 2], seed: u64) -> Vec<f32> {
    let mut rng = rng::stream(seed, 0);
    let n = rng.gen_range(strokes[0]..=strokes[1]);
    let mut canvas = Canvas::new();
    for _ in 0..n {
        draw_stroke(&mut canvas, style, &mut rng);
    }
    canvas.into_bitmap()
}

/// Renders the charset of `spec`. The first `shared` categories come from
/// [`SHARED_GLYPH_SEED`] in the angular style; the rest are keyed by
/// `spec.seed` and the category index.
pub fn make_script(spec: &ScriptSpec, shared: usize) -> crate::Result<Vec<GlyphPrototype>> {
    spec.validate()?;
    let mut out: Vec<GlyphPrototype> = Vec::with_capacity(spec.charset_size);
    for k in 0..spec.charset_size {
        let (base, style, strokes) = if k < shared {
            (SHARED_GLYPH_SEED, StrokeStyle::Angular, [2, 3])
        } else {
            (spec.seed, spec.stroke_style, spec.stroke_count)
        };
        let mut accepted = None;
        for attempt in 0..MAX_ATTEMPTS {
            let seed = rng::mix(rng::mix(base, k as u64), attempt);
            let glyph = GlyphPrototype {
                category_index: k,
                bitmap: draw_glyph(style, strokes, seed),
            };
            let inked = glyph.bitmap.iter().any(|&v| v > 0.5);
            if inked && out.iter().all(|p| glyph.distinct_from(p)) {
                accepted = Some(glyph);
                break;
            }
        }
        let glyph = accepted.ok_or_else(|| {
            crate::error::contract(format!(
                "script {}: could not draw a distinct glyph for category {k}",
                spec.script_id
            ))
        })?;
        out.push(glyph);
    }
    Ok(out)
}
