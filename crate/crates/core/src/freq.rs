//! Frequency-domain attention: channel transpose attention over 2-D
//! spectra with separate real/imaginary softmax, and the spectral weight
//! module that gates an FFT spectrum with a learned real map.

use crate::autodiff::{CVar, Var};
use crate::error::{invalid, shape_err, Result};
use crate::kernels::softmax_lastdim;
use crate::nn::{ConvSpec, Conv2d, Ctx, Init, Norm, NormKind};
use crate::tensor::{ComplexTensor, Tensor};

/// Result of [`complex_softmax`]: row softmax of the real part and of the
/// imaginary part, each over the last axis of a `[.., C, C]` map.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexAttentionMap {
    pub re: Tensor,
    pub im: Tensor,
}

impl ComplexAttentionMap {
    pub fn to_complex(&self) -> ComplexTensor {
        ComplexTensor::new(self.re.clone(), self.im.clone()).expect("parts share a shape")
    }

    /// Largest `|row sum − 1|` across both parts.
    pub fn max_row_sum_error(&self) -> f64 {
        let c = *self.re.shape().last().unwrap_or(&1);
        let mut worst: f64 = 0.0;
        for part in [&self.re, &self.im] {
            for row in part.data().chunks(c.max(1)) {
                worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
            }
        }
        worst
    }
}

fn check_square(shape: &[usize]) -> Result<()> {
    let r = shape.len();
    if r < 2 || shape[r - 1] != shape[r - 2] {
        return Err(shape_err("complex_softmax", "[.., C, C]", format!("{shape:?}")));
    }
    Ok(())
}

pub fn complex_softmax(a: &ComplexTensor) -> Result<ComplexAttentionMap> {
    check_square(a.shape())?;
    Ok(ComplexAttentionMap {
        re: softmax_lastdim(a.re())?,
        im: softmax_lastdim(a.im())?,
    })
}

/// Tape form of [`complex_softmax`], recombined into a complex map.
pub fn complex_softmax_var(a: CVar<'_>) -> Result<CVar<'_>> {
    check_square(&a.shape())?;
    CVar::from_parts(a.re().softmax()?, a.im().softmax()?)
}

/// Optional per-stream 1×1 projections applied before the transform.
#[derive(Clone, Debug)]
pub struct QkvProjection {
    pub q: Conv2d,
    pub k: Conv2d,
    pub v: Conv2d,
}

/// Channel transpose attention in the frequency domain. Without
/// projections `Q = K = V = fft2(x)`.
#[derive(Clone, Debug, Default)]
pub struct FreqAttention {
    pub proj: Option<QkvProjection>,
}

impl FreqAttention {
    pub fn new(init: &mut Init<'_>, channels: usize, project: bool) -> Result<Self> {
        let proj = if project {
            let spec = ConvSpec::new(channels, channels, 1).no_bias();
            Some(QkvProjection {
                q: Conv2d::new(&mut init.sub("q"), spec)?,
                k: Conv2d::new(&mut init.sub("k"), spec)?,
                v: Conv2d::new(&mut init.sub("v"), spec)?,
            })
        } else {
            None
        };
        Ok(Self { proj })
    }

    pub fn num_params(channels: usize, project: bool) -> usize {
        if project {
            3 * ConvSpec::new(channels, channels, 1).no_bias().num_params()
        } else {
            0
        }
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        match &self.proj {
            None => freq_transpose_attention(x),
            Some(p) => transpose_attention_streams(p.q.forward(ctx, x)?, p.k.forward(ctx, x)?, p.v.forward(ctx, x)?),
        }
    }
}

/// `|ifft2(complex_softmax(Q̃ K̃ᵀ) Ṽ)|` with `Q = K = V = fft2(x)` and
/// `Q̃` the spectrum flattened to `[B, C, H·W]`.
pub fn freq_transpose_attention(x: Var<'_>) -> Result<Var<'_>> {
    transpose_attention_streams(x, x, x)
}

fn transpose_attention_streams<'t>(q: Var<'t>, k: Var<'t>, v: Var<'t>) -> Result<Var<'t>> {
    let s = q.shape();
    if s.len() != 4 {
        return Err(shape_err("freq_transpose_attention", "[B,C,H,W]", format!("{s:?}")));
    }
    let flat = [s[0], s[1], s[2] * s[3]];
    let spec = |t: Var<'t>| -> Result<CVar<'t>> { t.fft2()?.reshape(&flat) };
    let (qf, kf, vf) = (spec(q)?, spec(k)?, spec(v)?);
    let logits = qf.matmul(kf.transpose_last()?)?;
    let att = complex_softmax_var(logits)?;
    Ok(att.matmul(vf)?.reshape(&s)?.ifft2()?.abs())
}

/// `|ifft2(weights ⊙ fft2(x))|` for a real weight map broadcastable to `x`.
pub fn spectral_gate<'t>(x: Var<'t>, weights: Var<'t>) -> Result<Var<'t>> {
    Ok(x.fft2()?.mul_real(weights)?.ifft2()?.abs())
}

/// Frequency weight module. The weight map is
/// `sigmoid(conv₁(GELU(BN(conv₁(|fft2 x|)))))`.
#[derive(Clone, Debug)]
pub struct Fwm {
    pub conv1: Conv2d,
    pub norm: Norm,
    pub conv2: Conv2d,
}

impl Fwm {
    pub fn new(init: &mut Init<'_>, channels: usize) -> Result<Self> {
        Ok(Self {
            conv1: Conv2d::new(&mut init.sub("conv1"), ConvSpec::new(channels, channels, 1))?,
            norm: Norm::new(&mut init.sub("bn"), NormKind::Batch, channels),
            conv2: Conv2d::new(&mut init.sub("conv2"), ConvSpec::new(channels, channels, 1))?,
        })
    }

    pub fn num_params(channels: usize) -> usize {
        2 * ConvSpec::new(channels, channels, 1).num_params() + 2 * channels
    }

    pub fn weights<'t>(&self, ctx: &Ctx<'t>, magnitude: Var<'t>) -> Result<Var<'t>> {
        let h = self.conv1.forward(ctx, magnitude)?;
        let h = self.norm.forward(ctx, h)?.gelu();
        Ok(self.conv2.forward(ctx, h)?.sigmoid())
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let s = x.shape();
        if s.len() != 4 {
            return Err(shape_err("Fwm", "[B,C,H,W]", format!("{s:?}")));
        }
        if s[2] * s[3] == 0 {
            return Err(invalid("Fwm", "empty spatial plane"));
        }
        let spectrum = x.fft2()?;
        let w = self.weights(ctx, spectrum.abs())?;
        Ok(spectrum.mul_real(w)?.ifft2()?.abs())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::nn::{random_tensor, seeded_rng, ParamStore};

    #[test]
    fn singleton_map_is_one_plus_i() {
        let a = ComplexTensor::new(Tensor::full(&[1, 1], 3.7), Tensor::full(&[1, 1], -2.0)).unwrap();
        let m = complex_softmax(&a).unwrap();
        assert_eq!(m.re.data(), &[1.0]);
        assert_eq!(m.im.data(), &[1.0]);
    }

    #[test]
    fn real_map_has_uniform_imaginary_rows() {
        let mut rng = seeded_rng(1);
        let a = ComplexTensor::from_real(random_tensor(&[2, 3, 3], &mut rng));
        let m = complex_softmax(&a).unwrap();
        assert!(m.im.data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
        assert!(m.max_row_sum_error() < 1e-12);
    }

    #[test]
    fn non_square_rejected() {
        assert!(complex_softmax(&ComplexTensor::zeros(&[2, 3])).is_err());
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 3, 4, 4]));
        let y = freq_transpose_attention(x).unwrap().value();
        assert_eq!(y.max_abs(), 0.0);
        let mut store = ParamStore::new();
        let mut rng = seeded_rng(2);
        let fwm = Fwm::new(&mut Init::new(&mut store, &mut rng), 3).unwrap();
        let ctx = store.bind(&tape, false);
        assert_eq!(fwm.forward(&ctx, x).unwrap().value().max_abs(), 0.0);
    }

    #[test]
    fn unit_gate_returns_magnitude() {
        let tape = Tape::new();
        let mut rng = seeded_rng(3);
        let xt = random_tensor(&[1, 2, 4, 4], &mut rng);
        let y = spectral_gate(tape.constant(xt.clone()), tape.constant(Tensor::ones(&[1, 2, 4, 4]))).unwrap();
        assert!(y.value().max_abs_diff(&xt.map(f64::abs)) < 1e-12);
    }
}
