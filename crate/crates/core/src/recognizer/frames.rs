use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::glyphgen::{GrayImage, GLYPH_SIZE, MAX_WIDTH};

/// Layout of the sliding-window frames cut from a padded image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameConfig {
    pub height: usize,
    pub max_width: usize,
    pub frames: usize,
    pub stride: usize,
    pub window: usize,
    /// Adjacent columns averaged together inside a window.
    pub pool: usize,
}

impl Default for FrameConfig {
    fn default() -> Self {
        FrameConfig {
            height: GLYPH_SIZE,
            max_width: MAX_WIDTH,
            frames: 50,
            stride: 8,
            window: 16,
            pool: 2,
        }
    }
}

impl FrameConfig {
    pub fn features(&self) -> usize {
        self.height * (self.window / self.pool)
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.frames == 0 || self.stride == 0 || self.pool == 0 {
            return Err(contract("frame config: zero dimension"));
        }
        if self.window % self.pool != 0 {
            return Err(contract(format!(
                "frame config: window {} not divisible by pool {}",
                self.window, self.pool
            )));
        }
        Ok(())
    }

    /// Writes the `frames × features` matrix of `image` into `out`. Columns
    /// past the image's right edge read as 0.
    pub fn extract_into(&self, image: &GrayImage, out: &mut [f64]) -> Result<()> {
        if image.height != self.height {
            return Err(contract(format!(
                "image height {} does not match configured height {}",
                image.height, self.height
            )));
        }
        if image.width > self.max_width {
            return Err(contract(format!(
                "image width {} exceeds maximum {}",
                image.width, self.max_width
            )));
        }
        let f = self.features();
        if out.len() != self.frames * f {
            return Err(contract("frame buffer has the wrong length"));
        }
        let cols = self.window / self.pool;
        let norm = 1.0 / self.pool as f64;
        for t in 0..self.frames {
            let row_out = &mut out[t * f..(t + 1) * f];
            for r in 0..self.height {
                for c in 0..cols {
                    let mut acc = 0.0;
                    for q in 0..self.pool {
                        let x = t * self.stride + c * self.pool + q;
                        if x < image.width {
                            acc += image.pixels[r * image.width + x] as f64;
                        }
                    }
                    row_out[r * cols + c] = acc * norm;
                }
            }
        }
        Ok(())
    }

    pub fn extract(&self, image: &GrayImage) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.frames * self.features()];
        self.extract_into(image, &mut out)?;
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pools_and_pads() {
        let cfg = FrameConfig {
            height: 1,
            max_width: 8,
            frames: 3,
            stride: 2,
            window: 4,
            pool: 2,
        };
        let img = GrayImage {
            height: 1,
            width: 5,
            pixels: vec![1.0, 3.0, 5.0, 7.0, 9.0],
        };
        assert_eq!(cfg.extract(&img).unwrap(), vec![2.0, 6.0, 6.0, 4.5, 4.5, 0.0]);
    }

    #[test]
    fn rejects_wrong_height() {
        let img = GrayImage {
            height: 8,
            width: 16,
            pixels: vec![0.0; 128],
        };
        assert!(FrameConfig::default().extract(&img).is_err());
    }
}
