//! Seeded synthetic dataset: a textured ellipse on a background whose
//! texture has a different spatial frequency but the same mean colour.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::io;
use crate::nn::seeded_rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub count: usize,
    pub size: usize,
    pub seed: u64,
    /// Lattice spacing of the background value noise, in pixels.
    pub background_cell: f64,
    /// Lattice spacing of the object value noise, in pixels.
    pub object_cell: f64,
    /// Peak-to-peak texture amplitude.
    pub amplitude: f64,
    /// Semi-axis range as a fraction of the image side.
    pub min_axis: f64,
    pub max_axis: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            count: 8,
            size: 64,
            seed: 7,
            background_cell: 16.0,
            object_cell: 5.0,
            amplitude: 0.5,
            min_axis: 0.15,
            max_axis: 0.3,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Sample {
    /// `[3, S, S]` in `[0, 1]`.
    pub image: Tensor,
    /// `[1, S, S]` with values in `{0, 1}`.
    pub mask: Tensor,
}

/// Smooth value noise on a random lattice, values in `[0, 1]`.
struct ValueNoise {
    cell: f64,
    cols: usize,
    lattice: Vec<f64>,
}

impl ValueNoise {
    fn new(size: usize, cell: f64, rng: &mut impl Rng) -> Self {
        let cols = (size as f64 / cell).ceil() as usize + 2;
        let lattice = (0..cols * cols).map(|_| rng.random::<f64>()).collect();
        Self { cell, cols, lattice }
    }

    fn at(&self, y: f64, x: f64) -> f64 {
        let (fy, fx) = (y / self.cell, x / self.cell);
        let (iy, ix) = (fy.floor() as usize, fx.floor() as usize);
        let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
        let (ty, tx) = (smooth(fy - iy as f64), smooth(fx - ix as f64));
        let l = |r: usize, c: usize| self.lattice[r * self.cols + c];
        let top = l(iy, ix) + tx * (l(iy, ix + 1) - l(iy, ix));
        let bot = l(iy + 1, ix) + tx * (l(iy + 1, ix + 1) - l(iy + 1, ix));
        top + ty * (bot - top)
    }
}

fn sample_one(cfg: &SynthConfig, rng: &mut impl Rng) -> Sample {
    let s = cfg.size;
    let sf = s as f64;
    let cy = rng.random_range(0.35..0.65) * sf;
    let cx = rng.random_range(0.35..0.65) * sf;
    let ay = rng.random_range(cfg.min_axis..cfg.max_axis) * sf;
    let ax = rng.random_range(cfg.min_axis..cfg.max_axis) * sf;
    let angle = rng.random_range(0.0..std::f64::consts::PI);
    let (sin, cos) = angle.sin_cos();
    let base: Vec<f64> = (0..3).map(|_| rng.random_range(0.35..0.65)).collect();
    let bg: Vec<ValueNoise> = (0..3).map(|_| ValueNoise::new(s, cfg.background_cell, rng)).collect();
    let fg: Vec<ValueNoise> = (0..3).map(|_| ValueNoise::new(s, cfg.object_cell, rng)).collect();

    let mut mask = vec![0.0; s * s];
    for (i, m) in mask.iter_mut().enumerate() {
        let (y, x) = ((i / s) as f64 + 0.5 - cy, (i % s) as f64 + 0.5 - cx);
        let u = x * cos + y * sin;
        let v = -x * sin + y * cos;
        if (u / ax).powi(2) + (v / ay).powi(2) <= 1.0 {
            *m = 1.0;
        }
    }
    let mut image = vec![0.0; 3 * s * s];
    for c in 0..3 {
        for i in 0..s * s {
            let (y, x) = ((i / s) as f64, (i % s) as f64);
            let noise = if mask[i] > 0.5 { &fg[c] } else { &bg[c] };
            let v = base[c] + cfg.amplitude * (noise.at(y, x) - 0.5);
            image[c * s * s + i] = v.clamp(0.0, 1.0);
        }
    }
    Sample {
        image: Tensor::from_vec(&[3, s, s], image).expect("consistent size"),
        mask: Tensor::from_vec(&[1, s, s], mask).expect("consistent size"),
    }
}

pub fn generate(cfg: &SynthConfig) -> Result<Vec<Sample>> {
    if cfg.size == 0 || cfg.count == 0 {
        return Err(invalid("synth", "count and size must be positive"));
    }
    if !(0.0 < cfg.min_axis && cfg.min_axis < cfg.max_axis && cfg.max_axis <= 0.5) {
        return Err(invalid("synth", "axis range must satisfy 0 < min < max <= 0.5"));
    }
    if cfg.background_cell <= 0.0 || cfg.object_cell <= 0.0 {
        return Err(invalid("synth", "noise cells must be positive"));
    }
    let mut rng = seeded_rng(cfg.seed);
    Ok((0..cfg.count).map(|_| sample_one(cfg, &mut rng)).collect())
}

/// Stacks samples into `([B,3,S,S], [B,1,S,S])`.
pub fn stack(samples: &[Sample]) -> Result<(Tensor, Tensor)> {
    let first = samples.first().ok_or_else(|| invalid("stack", "no samples"))?;
    let imgs: Vec<Tensor> = samples.iter().map(|s| s.image.reshape(&[1, 3, first.image.shape()[1], first.image.shape()[2]])).collect::<Result<_>>()?;
    let masks: Vec<Tensor> = samples.iter().map(|s| s.mask.reshape(&[1, 1, first.mask.shape()[1], first.mask.shape()[2]])).collect::<Result<_>>()?;
    Ok((Tensor::concat(&imgs.iter().collect::<Vec<_>>(), 0)?, Tensor::concat(&masks.iter().collect::<Vec<_>>(), 0)?))
}

pub fn sample_name(i: usize) -> String {
    format!("{i:04}")
}

/// Writes `images/NNNN.ppm` and `masks/NNNN.pgm` under `dir`.
pub fn write_dataset(dir: &Path, samples: &[Sample]) -> Result<()> {
    let (img_dir, mask_dir) = (dir.join("images"), dir.join("masks"));
    std::fs::create_dir_all(&img_dir)?;
    std::fs::create_dir_all(&mask_dir)?;
    for (i, s) in samples.iter().enumerate() {
        io::write_ppm(&img_dir.join(format!("{}.ppm", sample_name(i))), &s.image)?;
        io::write_pgm(&mask_dir.join(format!("{}.pgm", sample_name(i))), &s.mask)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_nontrivial() {
        let cfg = SynthConfig { count: 2, ..Default::default() };
        let a = generate(&cfg).unwrap();
        let b = generate(&cfg).unwrap();
        assert_eq!(a[1].image, b[1].image);
        assert_eq!(a[1].mask, b[1].mask);
        for s in &a {
            let frac = s.mask.mean();
            assert!(frac > 0.02 && frac < 0.5, "{frac}");
        }
    }

    #[test]
    fn object_and_background_share_mean_colour() {
        let cfg = SynthConfig { count: 4, size: 96, ..Default::default() };
        for s in generate(&cfg).unwrap() {
            let n = 96 * 96;
            let m = s.mask.data();
            for c in 0..3 {
                let px = &s.image.data()[c * n..(c + 1) * n];
                let (mut fi, mut ni, mut fo, mut no) = (0.0, 0.0, 0.0, 0.0);
                for (v, &k) in px.iter().zip(m) {
                    if k > 0.5 { fi += v; ni += 1.0 } else { fo += v; no += 1.0 }
                }
                assert!((fi / ni - fo / no).abs() < 0.12);
            }
        }
    }
}
