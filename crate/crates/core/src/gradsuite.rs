//! The gradient suite: finite-difference checks of every differentiable
//! primitive, each composite block, the losses, and a sampled full model.

use serde::Serialize;

use crate::attention::{linear_attention, linear_attention_numerator, softmax_attention, Cpe, FeatureMap, Lepe, Mlla};
use crate::autodiff::{CVar, Unary, Var};
use crate::blocks::{Frd, Head, Mfm, MfmConfig, Pfae, PfaeConfig};
use crate::conv::Conv2dParams;
use crate::data::{generate, stack, SynthConfig};
use crate::error::{invalid, Result};
use crate::freq::{complex_softmax_var, freq_transpose_attention, spectral_gate, FreqAttention, Fwm};
use crate::gradcheck::{check, random_projection, GradCheckOptions, GradCheckReport};
use crate::kernels::ScoreGate;
use crate::loss::{boundary_weights, pyramid_loss, weighted_bce, weighted_iou};
use crate::model::{Encoder, FmNet, ModelConfig};
use crate::nn::{normalize, seeded_rng, Init, NormKind, ParamStore, NORM_EPS};
use crate::tensor::Tensor;

pub const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
pub const TOLERANCE: f64 = 1e-3;
/// Depth compounds rounding, so the sampled full-model check is looser.
pub const MODEL_TOLERANCE: f64 = 1e-2;
pub const MODEL_SAMPLE: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Primitive,
    Block,
    Loss,
    Model,
}

impl Group {
    pub fn name(self) -> &'static str {
        match self {
            Group::Primitive => "primitive",
            Group::Block => "block",
            Group::Loss => "loss",
            Group::Model => "model",
        }
    }
}

pub struct GradCase {
    pub name: &'static str,
    pub group: Group,
    run: fn(&'static str, u64) -> Result<GradCheckReport>,
}

impl GradCase {
    pub fn run(&self, seed: u64) -> Result<GradCheckReport> {
        (self.run)(self.name, seed)
    }
}

/// Random inputs with magnitudes in `[0.1, 1.1)`, keeping kinked ops
/// (relu, abs) away from their non-differentiable points.
fn inputs(seed: u64, shapes: &[&[usize]]) -> Vec<Tensor> {
    inputs_at(seed, 0, shapes)
}

fn inputs_at(seed: u64, attempt: u64, shapes: &[&[usize]]) -> Vec<Tensor> {
    let mut rng = seeded_rng(seed.wrapping_mul(7919).wrapping_add(11).wrapping_add(attempt << 32));
    shapes
        .iter()
        .map(|s| Tensor::uniform(s, -1.0, 1.0, &mut rng).map(|x| x.signum() * (0.1 + x.abs())))
        .collect()
}

fn opts(seed: u64) -> GradCheckOptions {
    GradCheckOptions { seed, ..Default::default() }
}

fn proj(out: Var<'_>, seed: u64) -> Result<Var<'_>> {
    random_projection(out, seed.wrapping_add(101))
}

fn cproj(out: CVar<'_>, seed: u64) -> Result<Var<'_>> {
    proj(out.re(), seed)?.add(proj(out.im(), seed.wrapping_add(1))?)
}

macro_rules! prim {
    ($fn:ident, [$($shape:expr),*], |$v:ident, $seed:ident| $body:expr) => {
        fn $fn(name: &'static str, seed: u64) -> Result<GradCheckReport> {
            let x = inputs(seed, &[$(&$shape[..]),*]);
            let $seed = seed;
            check(name, &ParamStore::new(), &x, &opts(seed), |_, $v| $body)
        }
    };
}

prim!(p_add, [[2, 3, 4], [1, 3, 1]], |v, s| proj(v[0].add(v[1])?, s));
prim!(p_sub, [[2, 3], [2, 3]], |v, s| proj(v[0].sub(v[1])?, s));
prim!(p_mul, [[2, 1, 4], [1, 3, 1]], |v, s| proj(v[0].mul(v[1])?, s));
prim!(p_div, [[3, 4], [1, 4]], |v, s| proj(v[0].div(v[1])?, s));
prim!(p_affine, [[8]], |v, s| proj(v[0].scale(1.7).offset(0.3).neg().rsub_scalar(2.0), s));
prim!(p_sigmoid, [[16]], |v, s| proj(v[0].unary(Unary::Sigmoid), s));
prim!(p_gelu, [[16]], |v, s| proj(v[0].unary(Unary::Gelu), s));
prim!(p_silu, [[16]], |v, s| proj(v[0].unary(Unary::Silu), s));
prim!(p_relu, [[16]], |v, s| proj(v[0].unary(Unary::Relu), s));
prim!(p_elu_plus_one, [[16]], |v, s| proj(v[0].unary(Unary::EluPlusOne), s));
prim!(p_exp, [[16]], |v, s| proj(v[0].unary(Unary::Exp), s));
prim!(p_ln, [[16]], |v, s| proj(v[0].mul(v[0])?.offset(0.5).unary(Unary::Ln), s));
prim!(p_tanh, [[16]], |v, s| proj(v[0].unary(Unary::Tanh), s));
prim!(p_powf, [[12]], |v, s| proj(v[0].mul(v[0])?.offset(0.2).powf(-0.5).add(v[0].powf(3.0))?, s));
prim!(p_sum_axes, [[2, 3, 4]], |v, s| proj(v[0].sum_axes(&[0, 2])?, s));
prim!(p_mean_axes, [[2, 3, 4]], |v, s| proj(v[0].mean_axes(&[1])?, s));
prim!(p_sum_mean, [[3, 4]], |v, _s| v[0].sum().add(v[0].mul(v[0])?.mean()));
prim!(p_reshape_permute, [[2, 3, 4]], |v, s| proj(v[0].reshape(&[6, 4])?.reshape(&[2, 3, 4])?.permute(&[2, 0, 1])?, s));
prim!(p_transpose_last, [[2, 3, 4]], |v, s| proj(v[0].transpose_last()?, s));
prim!(p_narrow, [[3, 5]], |v, s| proj(v[0].narrow(1, 1, 3)?, s));
prim!(p_concat, [[2, 3], [2, 2]], |v, s| proj(Var::concat(&[v[0], v[1]], 1)?, s));
prim!(p_matmul, [[2, 3, 4], [2, 4, 2]], |v, s| proj(v[0].matmul(v[1])?, s));
prim!(p_softmax, [[3, 5]], |v, s| proj(v[0].scale(2.0).softmax()?, s));
prim!(p_cumsum, [[3, 4]], |v, s| proj(v[0].cumsum(1)?.cumsum(0)?, s));
prim!(p_conv2d_strided, [[1, 2, 5, 5], [2, 2, 3, 3], [2]], |v, s| {
    let p = Conv2dParams { stride: 2, padding: 1, dilation: 1, groups: 1 };
    proj(v[0].conv2d(v[1], Some(v[2]), p)?, s)
});
prim!(p_conv2d_dilated_grouped, [[1, 2, 5, 5], [2, 1, 3, 3]], |v, s| {
    let p = Conv2dParams { stride: 1, padding: 2, dilation: 2, groups: 2 };
    proj(v[0].conv2d(v[1], None, p)?, s)
});
prim!(p_resize_up, [[1, 2, 3, 3]], |v, s| proj(v[0].resize_bilinear(5, 7)?, s));
prim!(p_resize_down, [[1, 2, 5, 4]], |v, s| proj(v[0].resize_bilinear(2, 3)?, s));
prim!(p_rope, [[1, 4, 8]], |v, s| proj(v[0].rope(10.0)?, s));
prim!(p_softmax_attention, [[1, 4, 8], [1, 4, 8], [1, 4, 8]], |v, s| proj(softmax_attention(v[0], v[1], v[2], 2, ScoreGate::Softmax)?, s));
prim!(p_sigmoid_attention, [[1, 4, 8], [1, 4, 8], [1, 4, 8]], |v, s| proj(softmax_attention(v[0], v[1], v[2], 2, ScoreGate::Sigmoid)?, s));
prim!(p_linear_attention, [[1, 4, 8], [1, 4, 8], [1, 4, 8]], |v, s| proj(linear_attention(v[0], v[1], v[2], 2, FeatureMap::EluPlusOne, false)?, s));
prim!(p_linear_attention_causal, [[1, 4, 8], [1, 4, 8], [1, 4, 8]], |v, s| proj(linear_attention(v[0], v[1], v[2], 2, FeatureMap::EluPlusOne, true)?, s));
prim!(p_linear_numerator, [[1, 4, 8], [1, 4, 8], [1, 4, 6]], |v, s| proj(linear_attention_numerator(v[0], v[1], v[2], 1, FeatureMap::Identity, true)?, s));
prim!(p_fft2, [[1, 2, 4, 4]], |v, s| cproj(v[0].fft2()?, s));
prim!(p_ifft2, [[1, 2, 4, 4], [1, 2, 4, 4]], |v, s| cproj(CVar::from_parts(v[0], v[1])?.ifft2()?, s));
prim!(p_complex_abs, [[2, 4], [2, 4]], |v, s| proj(CVar::from_parts(v[0], v[1])?.abs(), s));
prim!(p_complex_matmul, [[2, 3], [2, 3], [3, 2], [3, 2]], |v, s| cproj(CVar::from_parts(v[0], v[1])?.matmul(CVar::from_parts(v[2], v[3])?)?, s));
prim!(p_complex_mul_real, [[2, 4], [2, 4], [1, 4]], |v, s| cproj(CVar::from_parts(v[0], v[1])?.mul_real(v[2])?.transpose_last()?, s));
prim!(p_complex_softmax, [[3, 3], [3, 3]], |v, s| cproj(complex_softmax_var(CVar::from_parts(v[0], v[1])?)?, s));
prim!(p_layer_norm, [[2, 3, 2, 2], [3], [3]], |v, s| proj(normalize(v[0], NormKind::Layer, v[1], v[2], NORM_EPS)?, s));
prim!(p_batch_norm, [[2, 3, 2, 2], [3], [3]], |v, s| proj(normalize(v[0], NormKind::Batch, v[1], v[2], NORM_EPS)?, s));
prim!(p_freq_transpose_attention, [[1, 2, 4, 4]], |v, s| proj(freq_transpose_attention(v[0])?, s));
prim!(p_spectral_gate, [[1, 2, 4, 4], [1, 2, 4, 4]], |v, s| proj(spectral_gate(v[0], v[1])?, s));

fn bce_case(name: &'static str, seed: u64) -> Result<GradCheckReport> {
    let x = inputs(seed, &[&[1, 1, 4, 4]]);
    let target = Tensor::uniform(&[1, 1, 4, 4], 0.0, 1.0, &mut seeded_rng(seed));
    check(name, &ParamStore::new(), &x, &opts(seed), |_, v| proj(v[0].bce_with_logits(&target)?, seed))
}

/// Smallest output magnitude accepted for blocks that end in `|·|`;
/// inputs are redrawn until the output clears it.
pub const MAGNITUDE_MARGIN: f64 = 1e-2;
const MAX_DRAWS: u64 = 64;

/// Builds a block from a fresh store and checks it on `shapes` inputs.
/// With a `margin`, inputs are redrawn until every output entry has at
/// least that magnitude.
fn block_case<B>(
    name: &'static str,
    seed: u64,
    shapes: &[&[usize]],
    margin: Option<f64>,
    make: impl FnOnce(&mut Init<'_>) -> Result<B>,
    f: impl for<'t> Fn(&B, &crate::nn::Ctx<'t>, &[Var<'t>]) -> Result<Var<'t>>,
) -> Result<GradCheckReport> {
    let mut store = ParamStore::new();
    let mut rng = seeded_rng(seed.wrapping_add(500));
    let block = make(&mut Init::new(&mut store, &mut rng))?;
    let mut x = inputs(seed, shapes);
    if let Some(m) = margin {
        let clears = |x: &[Tensor]| -> Result<bool> {
            let tape = crate::autodiff::Tape::new();
            let ctx = store.bind(&tape, false);
            let vars: Vec<Var<'_>> = x.iter().map(|t| tape.constant(t.clone())).collect();
            Ok(f(&block, &ctx, &vars)?.value().data().iter().all(|v| v.abs() >= m))
        };
        let mut attempt = 0;
        while !clears(&x)? {
            attempt += 1;
            if attempt == MAX_DRAWS {
                return Err(invalid("gradsuite", format!("{name}: no input draw clears the magnitude margin")));
            }
            x = inputs_at(seed, attempt, shapes);
        }
    }
    check(name, &store, &x, &opts(seed), |ctx, v| proj(f(&block, ctx, v)?, seed))
}

fn b_cpe(name: &'static str, seed: u64) -> Result<GradCheckReport> {
    block_case(name, seed, &[&[1, 2, 4, 4]], None, |i| Cpe::new(i, 2), |b, c, v| b.forward(c, v[0]))
}

fn b_lepe(name: &'static str, seed: u64) -> Result<GradCheckReport> {
    block_case(name, seed, &[&[1, 2, 4, 4]], None, |i| Lepe::new(i, 2), |b, c, v| b.forward(c, v[0]))
}

fn b_mlla(name: &'static str, seed: u64) -> Result<GradCheckReport> {
    block_case(name, seed, &[&[1, 4, 4, 4]], None, |i| Mlla::new(i, 4, 2), |b, c, v| b.forward(c, v[0]))
}

fn b_freq_attention(name: &'static str, seed: u64) -> Result<GradCheckReport> {
    block_case(name, seed, &[&[1, 2, 4, 4]], Some(MAGNITUDE_MARGIN), |i| FreqAttention::new(i, 2, true), |b, c, v| b.forward(c, v[0]))
}

fn b_fwm(name: &'static str, seed: u64) -> Result<GradCheckReport> {
    block_case(name, seed, &[&[1, 2, 4, 4]], Some(MAGNITUDE_MARGIN), |i| Fwm::new(i, 2), |b, c, v| b.forward(c, v[0]))
}

fn b_pfae(name: &'static str, seed: u64) -> Result<GradCheckReport> {
    let cfg = PfaeConfig {
        in_channels: 4,
        reduced_channels: 4,
        dilations: vec![1, 2],
        project_qkv: false,
    };
    block_case(name, seed, &[&[1, 4, 4, 4]], None, |i| Pfae::new(i, cfg), |b, c, v| b.forward(c, v[0]))
}

fn b_mfm(name: &'static str, seed: u64) -> Result<GradCheckReport> {
    block_case(name, seed, &[&[1, 8, 8, 8]], None, |i| Mfm::new(i, MfmConfig::with_channels(8)), |b, c, v| b.forward(c, v[0]))
}

fn b_frd(name: &'static str, seed: u64) -> Result<GradCheckReport> {
    block_case(
        name,
        seed,
        &[&[1, 4, 8, 8], &[1, 4, 4, 4], &[1, 6, 2, 2]],
        None,
        |i| Frd::new(i, 4, &[4, 6]),
        |b, c, v| b.forward(c, v[0], &v[1..]),
    )
}

fn b_head(name: &'static str, seed: u64) -> Result<GradCheckReport> {
    block_case(name, seed, &[&[1, 4, 4, 4]], None, |i| Head::new(i, 4), |b, c, v| b.forward(c, v[0], 8, 8))
}

fn b_encoder_stage1(name: &'static str, seed: u64) -> Result<GradCheckReport> {
    block_case(name, seed, &[&[1, 3, 32, 32]], None, |i| Encoder::new(i, &[4]), |b, c, v| b.forward_stage(c, 0, v[0]))
}

fn mask(seed: u64, size: usize) -> Result<Tensor> {
    let cfg = SynthConfig { count: 1, size, seed, ..Default::default() };
    Ok(stack(&generate(&cfg)?)?.1)
}

fn l_weighted_bce(name: &'static str, seed: u64) -> Result<GradCheckReport> {
    let gt = mask(seed, 8)?;
    let w = boundary_weights(&gt)?;
    check(name, &ParamStore::new(), &inputs(seed, &[&[1, 1, 8, 8]]), &opts(seed), |_, v| weighted_bce(v[0], &gt, &w))
}

fn l_weighted_iou(name: &'static str, seed: u64) -> Result<GradCheckReport> {
    let gt = mask(seed, 8)?;
    let w = boundary_weights(&gt)?;
    check(name, &ParamStore::new(), &inputs(seed, &[&[1, 1, 8, 8]]), &opts(seed), |_, v| weighted_iou(v[0], &gt, &w))
}

fn l_pyramid(name: &'static str, seed: u64) -> Result<GradCheckReport> {
    let gt = mask(seed, 8)?;
    let shapes: Vec<&[usize]> = vec![&[1, 1, 8, 8]; 5];
    check(name, &ParamStore::new(), &inputs(seed, &shapes), &opts(seed), |_, v| Ok(pyramid_loss(v, &gt)?.total))
}

/// Reduced-width network at 64×64 used by the sampled full-model check.
pub fn model_check_config(seed: u64) -> ModelConfig {
    ModelConfig {
        encoder_channels: vec![4, 4, 8, 8],
        pfae_channels: 8,
        seed,
        ..Default::default()
    }
}

fn m_full(name: &'static str, seed: u64) -> Result<GradCheckReport> {
    let cfg = model_check_config(seed);
    let (net, store) = FmNet::build(cfg.clone())?;
    let data = SynthConfig { count: 1, size: cfg.input_size, seed, ..Default::default() };
    let (img, gt) = stack(&generate(&data)?)?;
    let o = GradCheckOptions {
        tolerance: MODEL_TOLERANCE,
        sample_total: Some(MODEL_SAMPLE),
        ..opts(seed)
    };
    check(name, &store, &[], &o, |ctx, _| {
        let pyr = net.forward(ctx, ctx.input(img.clone()))?;
        Ok(pyramid_loss(&pyr.logits, &gt)?.total)
    })
}

macro_rules! cases {
    ($($group:ident $name:literal => $f:ident),* $(,)?) => {
        &[$(GradCase { name: $name, group: Group::$group, run: $f }),*]
    };
}

pub fn cases() -> &'static [GradCase] {
    cases![
        Primitive "add" => p_add,
        Primitive "sub" => p_sub,
        Primitive "mul" => p_mul,
        Primitive "div" => p_div,
        Primitive "affine" => p_affine,
        Primitive "sigmoid" => p_sigmoid,
        Primitive "gelu" => p_gelu,
        Primitive "silu" => p_silu,
        Primitive "relu" => p_relu,
        Primitive "elu_plus_one" => p_elu_plus_one,
        Primitive "exp" => p_exp,
        Primitive "ln" => p_ln,
        Primitive "tanh" => p_tanh,
        Primitive "powf" => p_powf,
        Primitive "sum_axes" => p_sum_axes,
        Primitive "mean_axes" => p_mean_axes,
        Primitive "sum_mean" => p_sum_mean,
        Primitive "reshape_permute" => p_reshape_permute,
        Primitive "transpose_last" => p_transpose_last,
        Primitive "narrow" => p_narrow,
        Primitive "concat" => p_concat,
        Primitive "matmul" => p_matmul,
        Primitive "softmax" => p_softmax,
        Primitive "cumsum" => p_cumsum,
        Primitive "conv2d_strided" => p_conv2d_strided,
        Primitive "conv2d_dilated_grouped" => p_conv2d_dilated_grouped,
        Primitive "resize_up" => p_resize_up,
        Primitive "resize_down" => p_resize_down,
        Primitive "bce_with_logits" => bce_case,
        Primitive "rope" => p_rope,
        Primitive "softmax_attention" => p_softmax_attention,
        Primitive "sigmoid_attention" => p_sigmoid_attention,
        Primitive "linear_attention" => p_linear_attention,
        Primitive "linear_attention_causal" => p_linear_attention_causal,
        Primitive "linear_numerator" => p_linear_numerator,
        Primitive "fft2" => p_fft2,
        Primitive "ifft2" => p_ifft2,
        Primitive "complex_abs" => p_complex_abs,
        Primitive "complex_matmul" => p_complex_matmul,
        Primitive "complex_mul_real" => p_complex_mul_real,
        Primitive "complex_softmax" => p_complex_softmax,
        Primitive "layer_norm" => p_layer_norm,
        Primitive "batch_norm" => p_batch_norm,
        Primitive "freq_transpose_attention" => p_freq_transpose_attention,
        Primitive "spectral_gate" => p_spectral_gate,
        Block "cpe" => b_cpe,
        Block "lepe" => b_lepe,
        Block "mlla" => b_mlla,
        Block "freq_attention" => b_freq_attention,
        Block "fwm" => b_fwm,
        Block "pfae" => b_pfae,
        Block "mfm" => b_mfm,
        Block "frd" => b_frd,
        Block "head" => b_head,
        Block "encoder_stage1" => b_encoder_stage1,
        Loss "weighted_bce" => l_weighted_bce,
        Loss "weighted_iou" => l_weighted_iou,
        Loss "pyramid" => l_pyramid,
        Model "full_model_sample" => m_full,
    ]
}

/// Cases whose name or group equals `filter` (all when `None`).
pub fn select(filter: Option<&str>) -> Result<Vec<&'static GradCase>> {
    let picked: Vec<_> = cases()
        .iter()
        .filter(|c| filter.is_none_or(|f| f == c.name || f == c.group.name()))
        .collect();
    if picked.is_empty() {
        return Err(invalid("gradsuite", format!("no case or group named {:?}", filter.unwrap_or_default())));
    }
    Ok(picked)
}

pub fn run(filter: Option<&str>, seeds: &[u64]) -> Result<Vec<GradCheckReport>> {
    let mut out = Vec::new();
    for case in select(filter)? {
        for &seed in seeds {
            out.push(case.run(seed)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_unique_and_selectable() {
        let mut names: Vec<_> = cases().iter().map(|c| c.name).collect();
        names.sort_unstable();
        names.dedup();
        assert_eq!(names.len(), cases().len());
        assert_eq!(select(Some("loss")).unwrap().len(), 3);
        assert!(select(Some("nope")).is_err());
    }

    #[test]
    fn primitives_pass_on_seed_zero() {
        for r in run(Some("primitive"), &[0]).unwrap() {
            assert!(r.passed, "{r:?}");
        }
    }
}
