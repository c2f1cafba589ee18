//! Bilinear resampling with half-pixel centers and edge clamping.

use crate::error::{invalid, shape_err, Result};
use crate::par;
use crate::tensor::Tensor;

/// Source taps for one output coordinate: `(i0, i1, frac)`.
pub(crate) fn source_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

fn dims(shape: &[usize], out_h: usize, out_w: usize) -> Result<(usize, usize, usize)> {
    if shape.len() != 4 {
        return Err(shape_err("bilinear_resize", "rank-4 [B,C,H,W]", format!("{shape:?}")));
    }
    if out_h == 0 || out_w == 0 || shape[2] == 0 || shape[3] == 0 {
        return Err(invalid("bilinear_resize", "extents must be positive"));
    }
    Ok((shape[0] * shape[1], shape[2], shape[3]))
}

pub fn bilinear_forward(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (planes, h, w) = dims(x.shape(), out_h, out_w)?;
    let ty = source_taps(h, out_h);
    let tx = source_taps(w, out_w);
    let xd = x.data();
    let mut out = vec![0.0; planes * out_h * out_w];
    par::for_each_chunk_mut(&mut out, out_h * out_w, |p, o| {
        let src = &xd[p * h * w..(p + 1) * h * w];
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let a = src[y0 * w + x0];
                let b = src[y0 * w + x1];
                let c = src[y1 * w + x0];
                let d = src[y1 * w + x1];
                let top = a + lx * (b - a);
                let bot = c + lx * (d - c);
                o[oy * out_w + ox] = top + ly * (bot - top);
            }
        }
    });
    let s = x.shape();
    Tensor::from_vec(&[s[0], s[1], out_h, out_w], out)
}

pub fn bilinear_backward(in_shape: &[usize], gout: &Tensor) -> Result<Tensor> {
    let gs = gout.shape();
    let (planes, h, w) = dims(in_shape, gs[2], gs[3])?;
    let (out_h, out_w) = (gs[2], gs[3]);
    let ty = source_taps(h, out_h);
    let tx = source_taps(w, out_w);
    let gd = gout.data();
    let mut gx = vec![0.0; planes * h * w];
    par::for_each_chunk_mut(&mut gx, h * w, |p, gp| {
        let go = &gd[p * out_h * out_w..(p + 1) * out_h * out_w];
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let g = go[oy * out_w + ox];
                gp[y0 * w + x0] += g * (1.0 - lx) * (1.0 - ly);
                gp[y0 * w + x1] += g * lx * (1.0 - ly);
                gp[y1 * w + x0] += g * (1.0 - lx) * ly;
                gp[y1 * w + x1] += g * lx * ly;
            }
        }
    });
    Tensor::from_vec(in_shape, gx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_plane_stays_constant() {
        let y = bilinear_forward(&Tensor::full(&[1, 2, 4, 4], 3.0), 7, 7).unwrap();
        assert!(y.data().iter().all(|&v| v == 3.0));
    }

    #[test]
    fn single_pixel_fills() {
        let x = Tensor::from_vec(&[1, 1, 1, 1], vec![0.7]).unwrap();
        let y = bilinear_forward(&x, 5, 3).unwrap();
        assert_eq!(y.shape(), &[1, 1, 5, 3]);
        assert!(y.data().iter().all(|&v| v == 0.7));
    }

    #[test]
    fn identity_size_is_exact() {
        let x = Tensor::from_vec(&[1, 1, 2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(bilinear_forward(&x, 2, 3).unwrap(), x);
    }
}
