//! 2-D discrete Fourier transforms over the two trailing axes.
//!
//! Forward transforms are unnormalized; inverse transforms scale by
//! `1/(H·W)`. Power-of-two line lengths use an iterative radix-2
//! Cooley-Tukey pass, anything else falls back to the direct O(n²) sum.

use std::f64::consts::PI;

use crate::error::{invalid, Result};
use crate::par;
use crate::tensor::{ComplexTensor, Tensor};

struct LinePlan {
    n: usize,
    cos: Vec<f64>,
    sin: Vec<f64>,
    bitrev: Vec<usize>,
}

impl LinePlan {
    fn new(n: usize) -> Self {
        let pow2 = n.is_power_of_two();
        let tw = if pow2 { n / 2 } else { n };
        let cos = (0..tw).map(|k| (2.0 * PI * k as f64 / n as f64).cos()).collect();
        let sin = (0..tw).map(|k| (2.0 * PI * k as f64 / n as f64).sin()).collect();
        let bitrev = if pow2 && n > 1 {
            let bits = n.trailing_zeros();
            (0..n).map(|i| i.reverse_bits() >> (usize::BITS - bits)).collect()
        } else {
            Vec::new()
        };
        Self { n, cos, sin, bitrev }
    }

    /// In-place transform; `sign = -1` forward, `+1` inverse (unscaled).
    fn run(&self, re: &mut [f64], im: &mut [f64], sign: f64, scratch: &mut (Vec<f64>, Vec<f64>)) {
        let n = self.n;
        if n <= 1 {
            return;
        }
        if !self.bitrev.is_empty() {
            for i in 0..n {
                let j = self.bitrev[i];
                if j > i {
                    re.swap(i, j);
                    im.swap(i, j);
                }
            }
            let mut len = 2;
            while len <= n {
                let half = len / 2;
                let step = n / len;
                for start in (0..n).step_by(len) {
                    for k in 0..half {
                        let wr = self.cos[k * step];
                        let wi = sign * self.sin[k * step];
                        let a = start + k;
                        let b = a + half;
                        let tr = re[b] * wr - im[b] * wi;
                        let ti = re[b] * wi + im[b] * wr;
                        re[b] = re[a] - tr;
                        im[b] = im[a] - ti;
                        re[a] += tr;
                        im[a] += ti;
                    }
                }
                len *= 2;
            }
        } else {
            let (sr, si) = scratch;
            sr.clear();
            si.clear();
            for k in 0..n {
                let (mut ar, mut ai) = (0.0, 0.0);
                for t in 0..n {
                    let idx = (k * t) % n;
                    let wr = self.cos[idx];
                    let wi = sign * self.sin[idx];
                    ar += re[t] * wr - im[t] * wi;
                    ai += re[t] * wi + im[t] * wr;
                }
                sr.push(ar);
                si.push(ai);
            }
            re.copy_from_slice(sr);
            im.copy_from_slice(si);
        }
    }
}

fn plane_dims(shape: &[usize], op: &'static str) -> Result<(usize, usize)> {
    if shape.len() < 2 {
        return Err(invalid(op, format!("need at least 2 axes, got shape {shape:?}")));
    }
    let h = shape[shape.len() - 2];
    let w = shape[shape.len() - 1];
    if h == 0 || w == 0 {
        return Err(invalid(op, format!("empty plane in shape {shape:?}")));
    }
    Ok((h, w))
}

fn transform(x: &ComplexTensor, sign: f64, scale: f64, op: &'static str) -> Result<ComplexTensor> {
    let (h, w) = plane_dims(x.shape(), op)?;
    let plane = h * w;
    let row_plan = LinePlan::new(w);
    let col_plan = LinePlan::new(h);
    let mut out = x.clone();
    let (re, im) = out.parts_mut();
    // interleave so every chunk owns one (re, im) plane pair
    let mut buf: Vec<f64> = Vec::with_capacity(re.len() * 2);
    for (pr, pi) in re.chunks(plane).zip(im.chunks(plane)) {
        buf.extend_from_slice(pr);
        buf.extend_from_slice(pi);
    }
    par::for_each_chunk_mut(&mut buf, 2 * plane, |_, chunk| {
        let (pr, pi) = chunk.split_at_mut(plane);
        let mut scratch = (Vec::new(), Vec::new());
        for r in 0..h {
            row_plan.run(&mut pr[r * w..(r + 1) * w], &mut pi[r * w..(r + 1) * w], sign, &mut scratch);
        }
        let mut cr = vec![0.0; h];
        let mut ci = vec![0.0; h];
        for c in 0..w {
            for r in 0..h {
                cr[r] = pr[r * w + c];
                ci[r] = pi[r * w + c];
            }
            col_plan.run(&mut cr, &mut ci, sign, &mut scratch);
            for r in 0..h {
                pr[r * w + c] = cr[r] * scale;
                pi[r * w + c] = ci[r] * scale;
            }
        }
    });
    for (k, chunk) in buf.chunks(2 * plane).enumerate() {
        re[k * plane..(k + 1) * plane].copy_from_slice(&chunk[..plane]);
        im[k * plane..(k + 1) * plane].copy_from_slice(&chunk[plane..]);
    }
    Ok(out)
}

/// Unnormalized forward DFT of every trailing `H×W` plane.
pub fn fft2(x: &ComplexTensor) -> Result<ComplexTensor> {
    transform(x, -1.0, 1.0, "fft2")
}

pub fn fft2_real(x: &Tensor) -> Result<ComplexTensor> {
    fft2(&ComplexTensor::from_real(x.clone()))
}

/// Inverse DFT with `1/(H·W)` normalization.
pub fn ifft2(x: &ComplexTensor) -> Result<ComplexTensor> {
    let (h, w) = plane_dims(x.shape(), "ifft2")?;
    transform(x, 1.0, 1.0 / (h * w) as f64, "ifft2")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zeros_map_to_zeros() {
        let z = fft2_real(&Tensor::zeros(&[3, 4, 4])).unwrap();
        assert_eq!(z.re().max_abs(), 0.0);
        assert_eq!(z.im().max_abs(), 0.0);
    }

    #[test]
    fn impulse_has_flat_spectrum() {
        let x = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let s = fft2_real(&x).unwrap();
        assert!(s.re().data().iter().all(|&v| v == 1.0));
        assert!(s.im().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constant_plane_is_pure_dc() {
        let (h, w, c) = (4, 8, 2.5);
        let s = fft2_real(&Tensor::full(&[h, w], c)).unwrap();
        assert!((s.re().data()[0] - c * (h * w) as f64).abs() < 1e-12);
        let rest = s.re().data()[1..].iter().chain(s.im().data()).fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(rest < 1e-12);
        let back = ifft2(&s).unwrap();
        assert!(back.re().data().iter().all(|v| (v - c).abs() < 1e-12));
    }

    #[test]
    fn odd_sizes_use_direct_path_and_invert() {
        let x = Tensor::from_vec(&[3, 5], (0..15).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let back = ifft2(&fft2_real(&x).unwrap()).unwrap();
        assert!(back.re().max_abs_diff(&x) < 1e-12);
        assert!(back.im().max_abs() < 1e-12);
    }

    #[test]
    fn rejects_rank_one() {
        assert!(fft2_real(&Tensor::zeros(&[4])).is_err());
    }
}
