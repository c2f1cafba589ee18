//! Parameters, their binding onto a tape, and the small layer set the
//! blocks are assembled from.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Gradients, Tape, Var};
use crate::conv::{same_padding, Conv2dParams};
use crate::error::{invalid, shape_err, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

/// Flat, ordered collection of named parameters.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            value,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    /// Total scalar count.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Overwrites values from `(name, tensor)` pairs; names and shapes must match exactly.
    pub fn load(&mut self, values: Vec<(String, Tensor)>) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(invalid("ParamStore::load", format!("{} tensors for {} parameters", values.len(), self.params.len())));
        }
        for (p, (name, t)) in self.params.iter_mut().zip(values) {
            if p.name != name || p.value.shape() != t.shape() {
                return Err(shape_err(
                    "ParamStore::load",
                    format!("{} {:?}", p.name, p.value.shape()),
                    format!("{name} {:?}", t.shape()),
                ));
            }
            p.value = t;
        }
        Ok(())
    }

    /// Places every parameter onto `tape`, tracked or as constants.
    pub fn bind<'t>(&self, tape: &'t Tape, track: bool) -> Ctx<'t> {
        let vars = self
            .params
            .iter()
            .map(|p| if track { tape.leaf(p.value.clone()) } else { tape.constant(p.value.clone()) })
            .collect();
        Ctx { tape, vars }
    }
}

/// Parameters bound to a tape for one forward pass.
pub struct Ctx<'t> {
    tape: &'t Tape,
    vars: Vec<Var<'t>>,
}

impl<'t> Ctx<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn p(&self, id: ParamId) -> Var<'t> {
        self.vars[id.0]
    }

    pub fn input(&self, t: Tensor) -> Var<'t> {
        self.tape.constant(t)
    }

    /// Gradient of every parameter in store order (zeros where unreached).
    pub fn param_grads(&self, grads: &Gradients) -> Vec<Tensor> {
        self.vars.iter().map(|&v| grads.get_or_zeros(v)).collect()
    }
}

/// Seeded initializer that namespaces parameter names.
pub struct Init<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a> Init<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
        }
    }

    pub fn sub(&mut self, name: &str) -> Init<'_> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        Init {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> ParamId {
        let t = Tensor::uniform(shape, -bound, bound, self.rng);
        let n = self.full_name(name);
        self.store.add(n, t)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> ParamId {
        let n = self.full_name(name);
        self.store.add(n, Tensor::full(shape, value))
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        self.rng
    }
}

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, rng)
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub params: Conv2dParams,
}

#[derive(Clone, Copy, Debug)]
pub struct ConvSpec {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
    pub groups: usize,
    pub bias: bool,
}

impl ConvSpec {
    pub fn new(cin: usize, cout: usize, kernel: usize) -> Self {
        Self {
            cin,
            cout,
            kernel,
            stride: 1,
            dilation: 1,
            groups: 1,
            bias: true,
        }
    }

    pub fn stride(mut self, s: usize) -> Self {
        self.stride = s;
        self
    }

    pub fn dilation(mut self, d: usize) -> Self {
        self.dilation = d;
        self
    }

    pub fn depthwise(mut self) -> Self {
        self.groups = self.cin;
        self
    }

    pub fn no_bias(mut self) -> Self {
        self.bias = false;
        self
    }

    pub fn num_params(&self) -> usize {
        self.cout * (self.cin / self.groups) * self.kernel * self.kernel + if self.bias { self.cout } else { 0 }
    }
}

impl Conv2d {
    /// Same-padded convolution; weights `U(±1/√fan_in)`, biases zero.
    pub fn new(init: &mut Init<'_>, spec: ConvSpec) -> Result<Self> {
        if spec.cin % spec.groups != 0 || spec.cout % spec.groups != 0 {
            return Err(invalid("Conv2d::new", format!("{}->{} not divisible by groups {}", spec.cin, spec.cout, spec.groups)));
        }
        let padding = same_padding(spec.kernel, spec.dilation)?;
        let cin_g = spec.cin / spec.groups;
        let fan_in = (cin_g * spec.kernel * spec.kernel) as f64;
        let weight = init.uniform("weight", &[spec.cout, cin_g, spec.kernel, spec.kernel], 1.0 / fan_in.sqrt());
        let bias = spec.bias.then(|| init.constant("bias", &[spec.cout], 0.0));
        Ok(Self {
            weight,
            bias,
            params: Conv2dParams {
                stride: spec.stride,
                padding,
                dilation: spec.dilation,
                groups: spec.groups,
            },
        })
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.conv2d(ctx.p(self.weight), self.bias.map(|b| ctx.p(b)), self.params)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormKind {
    /// Over the channel axis at each position.
    Layer,
    /// Over batch and spatial axes for each channel, using the current batch.
    Batch,
}

pub const NORM_EPS: f64 = 1e-5;

/// `gamma · (x − μ)/√(σ² + eps) + beta` on `[B,C,H,W]`, with `gamma` and
/// `beta` of shape `[C]`.
pub fn normalize<'t>(x: Var<'t>, kind: NormKind, gamma: Var<'t>, beta: Var<'t>, eps: f64) -> Result<Var<'t>> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(shape_err("normalize", "[B,C,H,W]", format!("{s:?}")));
    }
    if eps <= 0.0 {
        return Err(invalid("normalize", "eps must be positive"));
    }
    let axes: &[usize] = match kind {
        NormKind::Layer => &[1],
        NormKind::Batch => &[0, 2, 3],
    };
    if axes.iter().any(|&a| s[a] == 0) {
        return Err(invalid("normalize", format!("zero-size normalization axis in {s:?}")));
    }
    let c = s[1];
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(shape_err("normalize", format!("gamma/beta [{c}]"), format!("{:?} / {:?}", gamma.shape(), beta.shape())));
    }
    let mu = x.mean_axes(axes)?;
    let centered = x.sub(mu)?;
    let var = centered.mul(centered)?.mean_axes(axes)?;
    let inv = var.offset(eps).powf(-0.5);
    let xhat = centered.mul(inv)?;
    let g = gamma.reshape(&[1, c, 1, 1])?;
    let b = beta.reshape(&[1, c, 1, 1])?;
    xhat.mul(g)?.add(b)
}

#[derive(Clone, Debug)]
pub struct Norm {
    pub kind: NormKind,
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl Norm {
    pub fn new(init: &mut Init<'_>, kind: NormKind, channels: usize) -> Self {
        Self {
            kind,
            gamma: init.constant("gamma", &[channels], 1.0),
            beta: init.constant("beta", &[channels], 0.0),
        }
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        normalize(x, self.kind, ctx.p(self.gamma), ctx.p(self.beta), NORM_EPS)
    }
}

/// `[B,C,H,W]` → `[B,H·W,C]` token layout.
pub fn to_tokens(x: Var<'_>) -> Result<Var<'_>> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(shape_err("to_tokens", "[B,C,H,W]", format!("{s:?}")));
    }
    x.reshape(&[s[0], s[1], s[2] * s[3]])?.permute(&[0, 2, 1])
}

/// `[B,H·W,C]` → `[B,C,H,W]`.
pub fn from_tokens(x: Var<'_>, h: usize, w: usize) -> Result<Var<'_>> {
    let s = x.shape();
    if s.len() != 3 || s[1] != h * w {
        return Err(shape_err("from_tokens", format!("[B,{},C]", h * w), format!("{s:?}")));
    }
    x.permute(&[0, 2, 1])?.reshape(&[s[0], s[2], h, w])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn norm_of(x: Tensor, kind: NormKind, gamma: f64, beta: f64) -> Tensor {
        let tape = Tape::new();
        let c = x.shape()[1];
        let xv = tape.constant(x);
        let g = tape.constant(Tensor::full(&[c], gamma));
        let b = tape.constant(Tensor::full(&[c], beta));
        normalize(xv, kind, g, b, NORM_EPS).unwrap().value()
    }

    #[test]
    fn constant_input_normalizes_to_zero() {
        let y = norm_of(Tensor::full(&[2, 3, 4, 4], 7.0), NormKind::Layer, 1.0, 0.0);
        assert!(y.max_abs() == 0.0);
        let y = norm_of(Tensor::full(&[2, 3, 4, 4], 7.0), NormKind::Batch, 1.0, 0.0);
        assert!(y.max_abs() == 0.0);
    }

    #[test]
    fn zero_gamma_gives_beta() {
        let mut rng = seeded_rng(3);
        let y = norm_of(random_tensor(&[1, 4, 3, 3], &mut rng), NormKind::Layer, 0.0, 0.25);
        assert!(y.data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn layer_norm_statistics() {
        let mut rng = seeded_rng(11);
        let x = random_tensor(&[2, 16, 3, 3], &mut rng).map(|v| 3.0 * v + 1.5);
        let y = norm_of(x, NormKind::Layer, 1.0, 0.0);
        for b in 0..2 {
            for p in 0..9 {
                let vals: Vec<f64> = (0..16).map(|c| y.at(&[b, c, p / 3, p % 3])).collect();
                let mu = vals.iter().sum::<f64>() / 16.0;
                let var = vals.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / 16.0;
                assert!(mu.abs() < 1e-10);
                // eps shrinks the variance slightly below one
                assert!((var - 1.0).abs() < 1e-4, "var {var}");
            }
        }
    }

    #[test]
    fn empty_axis_rejected() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[0, 2, 2, 2]));
        let g = tape.constant(Tensor::ones(&[2]));
        let b = tape.constant(Tensor::zeros(&[2]));
        assert!(normalize(x, NormKind::Batch, g, b, NORM_EPS).is_err());
    }

    #[test]
    fn tokens_round_trip() {
        let mut rng = seeded_rng(5);
        let tape = Tape::new();
        let t = random_tensor(&[2, 3, 4, 5], &mut rng);
        let x = tape.constant(t.clone());
        let tok = to_tokens(x).unwrap();
        assert_eq!(tok.shape(), vec![2, 20, 3]);
        assert_eq!(tok.value().at(&[1, 7, 2]), t.at(&[1, 2, 1, 2]));
        assert_eq!(from_tokens(tok, 4, 5).unwrap().value(), t);
    }
}
