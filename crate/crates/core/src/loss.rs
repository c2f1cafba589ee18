//! Boundary-weighted BCE and IoU losses and their five-level pyramid sum.

use crate::autodiff::Var;
use crate::error::{invalid, shape_err, Result};
use crate::tensor::Tensor;

/// Side of the averaging window for the boundary weight map.
pub const WEIGHT_WINDOW: usize = 31;
/// Smoothing term of the IoU ratio.
pub const IOU_EPS: f64 = 1e-8;
pub const PYRAMID_WEIGHTS: [f64; 5] = [1.0, 0.5, 0.25, 0.125, 0.0625];

/// Zero-padded `k × k` mean filter per plane of `[B,C,H,W]`, always
/// divided by `k²`.
pub fn avg_pool_same(x: &Tensor, k: usize) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(shape_err("avg_pool_same", "[B,C,H,W]", format!("{s:?}")));
    }
    if k % 2 == 0 {
        return Err(invalid("avg_pool_same", format!("window {k} must be odd")));
    }
    let (h, w) = (s[2], s[3]);
    let r = (k / 2) as isize;
    let norm = (k * k) as f64;
    let mut out = vec![0.0; x.numel()];
    for (plane, dst) in x.data().chunks(h * w.max(1)).zip(out.chunks_mut(h * w.max(1))) {
        // Row sums over the horizontal window, then vertical.
        let mut rows = vec![0.0; h * w];
        for i in 0..h {
            for j in 0..w {
                let lo = (j as isize - r).max(0) as usize;
                let hi = ((j as isize + r) as usize).min(w - 1);
                rows[i * w + j] = plane[i * w + lo..=i * w + hi].iter().sum();
            }
        }
        for i in 0..h {
            let lo = (i as isize - r).max(0) as usize;
            let hi = ((i as isize + r) as usize).min(h - 1);
            for j in 0..w {
                dst[i * w + j] = (lo..=hi).map(|ii| rows[ii * w + j]).sum::<f64>() / norm;
            }
        }
    }
    Tensor::from_vec(s, out)
}

/// `w = 1 + 5·|avgpool₃₁(gt) − gt|`.
pub fn boundary_weights(gt: &Tensor) -> Result<Tensor> {
    let pooled = avg_pool_same(gt, WEIGHT_WINDOW)?;
    pooled.zip_map(gt, |p, g| 1.0 + 5.0 * (p - g).abs())
}

fn check(op: &'static str, logits: &Var<'_>, gt: &Tensor) -> Result<()> {
    let s = logits.shape();
    if s.as_slice() != gt.shape() || s.len() != 4 || s[1] != 1 {
        return Err(shape_err(op, format!("logits and gt [B,1,H,W] of {:?}", gt.shape()), format!("{s:?}")));
    }
    Ok(())
}

/// `Σ w·bce(σ(x), gt) / Σ w` over every pixel of the batch.
pub fn weighted_bce<'t>(logits: Var<'t>, gt: &Tensor, weights: &Tensor) -> Result<Var<'t>> {
    check("weighted_bce", &logits, gt)?;
    let w = logits.tape().constant(weights.clone());
    Ok(logits.bce_with_logits(gt)?.mul(w)?.sum().scale(1.0 / weights.sum()))
}

/// `1 − (Σ w·p·gt + ε) / (Σ w·(p + gt − p·gt) + ε)` with `p = σ(x)`.
pub fn weighted_iou<'t>(logits: Var<'t>, gt: &Tensor, weights: &Tensor) -> Result<Var<'t>> {
    check("weighted_iou", &logits, gt)?;
    let tape = logits.tape();
    let p = logits.sigmoid();
    let g = tape.constant(gt.clone());
    let w = tape.constant(weights.clone());
    let pg = p.mul(g)?;
    let inter = pg.mul(w)?.sum();
    let union = p.add(g)?.sub(pg)?.mul(w)?.sum();
    Ok(inter.offset(IOU_EPS).div(union.offset(IOU_EPS))?.rsub_scalar(1.0))
}

#[derive(Clone, Debug)]
pub struct LossTerms<'t> {
    pub bce: Vec<Var<'t>>,
    pub iou: Vec<Var<'t>>,
    pub total: Var<'t>,
}

impl LossTerms<'_> {
    /// `(bce_i, iou_i)` values per level.
    pub fn level_values(&self) -> Vec<(f64, f64)> {
        self.bce.iter().zip(&self.iou).map(|(b, i)| (b.value().item(), i.value().item())).collect()
    }
}

/// `Σ_i 2^{1−i}(bce_i + iou_i)` over exactly five logit maps.
pub fn pyramid_loss<'t>(logits: &[Var<'t>], gt: &Tensor) -> Result<LossTerms<'t>> {
    if logits.len() != PYRAMID_WEIGHTS.len() {
        return Err(invalid("pyramid_loss", format!("expected {} levels, got {}", PYRAMID_WEIGHTS.len(), logits.len())));
    }
    let weights = boundary_weights(gt)?;
    let mut bce = Vec::new();
    let mut iou = Vec::new();
    let mut total: Option<Var<'t>> = None;
    for (&l, &lw) in logits.iter().zip(&PYRAMID_WEIGHTS) {
        let b = weighted_bce(l, gt, &weights)?;
        let i = weighted_iou(l, gt, &weights)?;
        let term = b.add(i)?.scale(lw);
        total = Some(match total {
            Some(t) => t.add(term)?,
            None => term,
        });
        bce.push(b);
        iou.push(i);
    }
    Ok(LossTerms { bce, iou, total: total.expect("five levels") })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;

    fn disk(n: usize) -> Tensor {
        let c = (n as f64 - 1.0) / 2.0;
        let data = (0..n * n)
            .map(|i| {
                let (y, x) = ((i / n) as f64 - c, (i % n) as f64 - c);
                if x * x + y * y < (n as f64 / 3.0).powi(2) { 1.0 } else { 0.0 }
            })
            .collect();
        Tensor::from_vec(&[1, 1, n, n], data).unwrap()
    }

    #[test]
    fn saturated_logits_give_zero_loss() {
        let gt = disk(8);
        let w = boundary_weights(&gt).unwrap();
        let tape = Tape::new();
        let x = tape.constant(gt.map(|g| if g > 0.5 { 50.0 } else { -50.0 }));
        assert!(weighted_bce(x, &gt, &w).unwrap().value().item() < 1e-12);
        assert!(weighted_iou(x, &gt, &w).unwrap().value().item() < 1e-6);
    }

    #[test]
    fn zero_logits_give_ln2() {
        let gt = disk(8);
        let w = boundary_weights(&gt).unwrap();
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 1, 8, 8]));
        let v = weighted_bce(x, &gt, &w).unwrap().value().item();
        assert!((v - std::f64::consts::LN_2).abs() < 1e-14);
    }

    #[test]
    fn empty_mask_and_prediction_give_zero_iou() {
        let gt = Tensor::zeros(&[1, 1, 4, 4]);
        let w = boundary_weights(&gt).unwrap();
        let tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1, 1, 4, 4], -800.0));
        assert_eq!(weighted_iou(x, &gt, &w).unwrap().value().item(), 0.0);
    }

    #[test]
    fn wrong_level_count_rejected() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 1, 4, 4]));
        assert!(pyramid_loss(&[x; 4], &Tensor::zeros(&[1, 1, 4, 4])).is_err());
    }

    #[test]
    fn constant_mask_has_unit_weights_in_the_interior() {
        let w = boundary_weights(&Tensor::ones(&[1, 1, 40, 40])).unwrap();
        assert_eq!(w.at(&[0, 0, 20, 20]), 1.0);
        assert!(w.at(&[0, 0, 0, 0]) > 1.0);
    }
}
