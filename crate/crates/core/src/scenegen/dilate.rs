use diffmath::Tensor;

use crate::error::{Error, Result};

/// Sparse 3-channel measurements on the image plane.
///
/// Channel values are meaningful only where `valid` is set.
#[derive(Debug, Clone, PartialEq)]
pub struct PointImage {
    pub height: usize,
    pub width: usize,
    /// `[3][H*W]` row-major planes.
    pub channels: [Vec<f64>; 3],
    pub valid: Vec<bool>,
}

impl PointImage {
    pub fn empty(height: usize, width: usize) -> Self {
        let n = height * width;
        Self {
            height,
            width,
            channels: [vec![0.0; n], vec![0.0; n], vec![0.0; n]],
            valid: vec![false; n],
        }
    }

    pub fn set(&mut self, y: usize, x: usize, values: [f64; 3]) {
        let i = y * self.width + x;
        for (c, v) in values.into_iter().enumerate() {
            self.channels[c][i] = v;
        }
        self.valid[i] = true;
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }
}

/// Morphological max-dilation with a `k x k` square element, per channel,
/// over valid pixels only. Output channel 2 is the dilated validity mask;
/// invalid output pixels are all-zero.
pub fn project_and_dilate(points: &PointImage, k: usize) -> Result<Tensor> {
    if k == 0 || k % 2 == 0 {
        return Err(Error::Contract(format!(
            "dilation kernel {k} must be odd and >= 1"
        )));
    }
    let (h, w) = (points.height, points.width);
    let r = (k / 2) as isize;
    let mut out = vec![0.0; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let mut best = [f64::NEG_INFINITY; 2];
            let mut any = false;
            for dy in -r..=r {
                let yy = y as isize + dy;
                if yy < 0 || yy >= h as isize {
                    continue;
                }
                for dx in -r..=r {
                    let xx = x as isize + dx;
                    if xx < 0 || xx >= w as isize {
                        continue;
                    }
                    let i = yy as usize * w + xx as usize;
                    if !points.valid[i] {
                        continue;
                    }
                    any = true;
                    for (c, b) in best.iter_mut().enumerate() {
                        *b = b.max(points.channels[c][i]);
                    }
                }
            }
            if any {
                let i = y * w + x;
                out[i] = best[0];
                out[h * w + i] = best[1];
                out[2 * h * w + i] = 1.0;
            }
        }
    }
    Ok(Tensor::new(vec![3, h, w], out)?)
}
