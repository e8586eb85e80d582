use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DegradeConfig {
    pub downscale_factor: usize,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for DegradeConfig {
    fn default() -> Self {
        Self {
            downscale_factor: 4,
            noise_std: 0.05,
            seed: 0,
        }
    }
}

/// Simulate a low-resolution capture of an `h × w × 3` face.
///
/// Box-average down by `downscale_factor`, nearest-neighbor back up to
/// `h × w`, then add seeded Gaussian noise and clip to `[0, 1]`.
pub fn degrade_face(face: &[f64], h: usize, w: usize, cfg: &DegradeConfig) -> Result<Vec<f64>> {
    if face.len() != h * w * 3 {
        return Err(Error::Shape(format!("face buffer has {} values, expected {h}x{w}x3", face.len())));
    }
    if cfg.downscale_factor < 2 {
        return Err(Error::Config("downscale_factor must be at least 2".into()));
    }
    if cfg.downscale_factor > h || cfg.downscale_factor > w {
        return Err(Error::Config(format!(
            "downscale_factor {} exceeds face dims {h}x{w}",
            cfg.downscale_factor
        )));
    }
    if !(cfg.noise_std >= 0.0) {
        return Err(Error::Config("noise_std must be non-negative".into()));
    }
    let dh = h / cfg.downscale_factor;
    let dw = w / cfg.downscale_factor;
    let mut small = vec![0.0; dh * dw * 3];
    for i in 0..dh {
        let (r0, r1) = (i * h / dh, (i + 1) * h / dh);
        for j in 0..dw {
            let (c0, c1) = (j * w / dw, (j + 1) * w / dw);
            let count = ((r1 - r0) * (c1 - c0)) as f64;
            for k in 0..3 {
                let mut acc = 0.0;
                for r in r0..r1 {
                    for c in c0..c1 {
                        acc += face[(r * w + c) * 3 + k];
                    }
                }
                small[(i * dw + j) * 3 + k] = acc / count;
            }
        }
    }
    let mut out = vec![0.0; h * w * 3];
    for r in 0..h {
        let i = (r * dh / h).min(dh - 1);
        for c in 0..w {
            let j = (c * dw / w).min(dw - 1);
            for k in 0..3 {
                out[(r * w + c) * 3 + k] = small[(i * dw + j) * 3 + k];
            }
        }
    }
    if cfg.noise_std > 0.0 {
        let mut rng = seed::rng(cfg.seed, &[seed::DEGRADE]);
        let dist = Normal::new(0.0, cfg.noise_std).map_err(|e| Error::Config(e.to_string()))?;
        for v in &mut out {
            *v = (*v + dist.sample(&mut rng)).clamp(0.0, 1.0);
        }
    }
    Ok(out)
}
