//! Attention kernels: scaled dot-product attention, kernelized linear
//! attention (full-sum, causal prefix-sum and recurrent forms), the
//! selective state-space scan, and the positional encodings used by the
//! Mamba-like linear attention layer.
//!
//! Tape-level functions take token tensors `[B, N, D]`; heads split `D`
//! into `heads` contiguous slices of `D/heads`.

use crate::autodiff::{Tape, Var};
use crate::error::{invalid, shape_err, Result};
use crate::nn::{from_tokens, to_tokens, ConvSpec, Conv2d, Ctx, Init};
use crate::tensor::Tensor;

pub use crate::kernels::ScoreGate;

/// Positive feature map applied to queries and keys.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMap {
    /// `elu(x) + 1`, strictly positive.
    EluPlusOne,
    /// No map. Only valid for the unnormalized numerator or for inputs
    /// that are already positive.
    Identity,
}

impl FeatureMap {
    fn apply(self, x: Var<'_>) -> Var<'_> {
        match self {
            FeatureMap::EluPlusOne => x.elu_plus_one(),
            FeatureMap::Identity => x,
        }
    }

    fn apply_scalar(self, x: f64) -> f64 {
        match self {
            FeatureMap::EluPlusOne => crate::autodiff::Unary::EluPlusOne.apply(x),
            FeatureMap::Identity => x,
        }
    }
}

/// Query/key/value triple for a single sequence, each `[N, D]`.
#[derive(Clone, Debug)]
pub struct AttentionInput {
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
}

impl AttentionInput {
    pub fn new(q: Tensor, k: Tensor, v: Tensor) -> Result<Self> {
        let (qs, ks, vs) = (q.shape(), k.shape(), v.shape());
        if qs.len() != 2 || ks != qs || vs.len() != 2 || vs[0] != qs[0] {
            return Err(shape_err("AttentionInput", format!("q=k=[N,D], v=[N,Dv] from q {qs:?}"), format!("k {ks:?}, v {vs:?}")));
        }
        Ok(Self { q, k, v })
    }

    pub fn tokens(&self) -> usize {
        self.q.shape()[0]
    }

    fn batched<'t>(&self, tape: &'t Tape) -> Result<(Var<'t>, Var<'t>, Var<'t>)> {
        let lift = |t: &Tensor| {
            let s = t.shape();
            tape.constant(t.clone()).reshape(&[1, s[0], s[1]])
        };
        Ok((lift(&self.q)?, lift(&self.k)?, lift(&self.v)?))
    }

    fn unbatch(out: Var<'_>) -> Result<Tensor> {
        let s = out.shape();
        out.value().reshape(&s[1..])
    }

    pub fn softmax_attention(&self, heads: usize, gate: ScoreGate) -> Result<Tensor> {
        let tape = Tape::new();
        let (q, k, v) = self.batched(&tape)?;
        Self::unbatch(softmax_attention(q, k, v, heads, gate)?)
    }

    pub fn linear_attention(&self, heads: usize, map: FeatureMap, causal: bool) -> Result<Tensor> {
        let tape = Tape::new();
        let (q, k, v) = self.batched(&tape)?;
        Self::unbatch(linear_attention(q, k, v, heads, map, causal)?)
    }

    pub fn linear_attention_numerator(&self, heads: usize, map: FeatureMap, causal: bool) -> Result<Tensor> {
        let tape = Tape::new();
        let (q, k, v) = self.batched(&tape)?;
        Self::unbatch(linear_attention_numerator(q, k, v, heads, map, causal)?)
    }
}

/// Multi-head attention `gate(Q Kᵀ/√D_h) V` with `gate` the row softmax
/// (or elementwise sigmoid). Time O(N²·D), memory O(N) per query row.
pub fn softmax_attention<'t>(q: Var<'t>, k: Var<'t>, v: Var<'t>, heads: usize, gate: ScoreGate) -> Result<Var<'t>> {
    Var::fused_attention(q, k, v, heads, gate)
}

fn check_qkv(q: &[usize], k: &[usize], v: &[usize], heads: usize) -> Result<(usize, usize, usize, usize)> {
    if q.len() != 3 || k != q || v.len() != 3 || v[..2] != q[..2] {
        return Err(shape_err("linear_attention", format!("q=k=[B,N,D], v=[B,N,Dv] from q {q:?}"), format!("k {k:?}, v {v:?}")));
    }
    if q[1] == 0 {
        return Err(invalid("linear_attention", "token count N = 0"));
    }
    if heads == 0 || q[2] % heads != 0 || v[2] % heads != 0 {
        return Err(invalid("linear_attention", format!("dims {}/{} not divisible by {heads} heads", q[2], v[2])));
    }
    Ok((q[0], q[1], q[2] / heads, v[2] / heads))
}

fn split_heads(x: Var<'_>, heads: usize) -> Result<Var<'_>> {
    let s = x.shape();
    x.reshape(&[s[0], s[1], heads, s[2] / heads])?.permute(&[0, 2, 1, 3])
}

fn merge_heads(x: Var<'_>) -> Result<Var<'_>> {
    let s = x.shape();
    x.permute(&[0, 2, 1, 3])?.reshape(&[s[0], s[2], s[1] * s[3]])
}

/// Numerator and denominator of kernelized attention, per head:
/// `num_j = φ(q_j)·S`, `den_j = φ(q_j)·Z` with `S = Σ φ(k_i)ᵀ v_i`,
/// `Z = Σ φ(k_i)ᵀ`, summed over all `i` or over `i ≤ j` when `causal`.
fn linear_parts<'t>(
    q: Var<'t>,
    k: Var<'t>,
    v: Var<'t>,
    heads: usize,
    map: FeatureMap,
    causal: bool,
    want_den: bool,
) -> Result<(Var<'t>, Option<Var<'t>>)> {
    let (b, n, dh, dv) = check_qkv(&q.shape(), &k.shape(), &v.shape(), heads)?;
    let qf = split_heads(map.apply(q), heads)?;
    let kf = split_heads(map.apply(k), heads)?;
    let vv = split_heads(v, heads)?;
    if want_den {
        let positive = |x: &Var<'_>| x.value().data().iter().all(|&e| e > 0.0);
        if !positive(&qf) || !positive(&kf) {
            return Err(invalid("linear_attention", "feature map produced non-positive entries"));
        }
    }
    if !causal {
        let kv = kf.transpose_last()?.matmul(vv)?;
        let num = qf.matmul(kv)?;
        let den = if want_den {
            Some(qf.mul(kf.sum_axes(&[2])?)?.sum_axes(&[3])?)
        } else {
            None
        };
        return Ok((num, den));
    }
    let outer = kf.reshape(&[b, heads, n, dh, 1])?.mul(vv.reshape(&[b, heads, n, 1, dv])?)?;
    let s = outer.cumsum(2)?;
    let num = qf
        .reshape(&[b, heads, n, dh, 1])?
        .mul(s)?
        .sum_axes(&[3])?
        .reshape(&[b, heads, n, dv])?;
    let den = if want_den {
        Some(qf.mul(kf.cumsum(2)?)?.sum_axes(&[3])?)
    } else {
        None
    };
    Ok((num, den))
}

/// Kernelized linear attention `φ(Q)(φ(K)ᵀV) / φ(Q)(φ(K)ᵀ1)`.
///
/// `causal = false` sums over every key (O(N·D·D_h)); `causal = true`
/// uses inclusive prefix sums so token `j` only sees keys `≤ j`.
pub fn linear_attention<'t>(q: Var<'t>, k: Var<'t>, v: Var<'t>, heads: usize, map: FeatureMap, causal: bool) -> Result<Var<'t>> {
    let (num, den) = linear_parts(q, k, v, heads, map, causal, true)?;
    merge_heads(num.div(den.expect("requested"))?)
}

/// Unnormalized numerator `φ(Q)·S` of [`linear_attention`].
pub fn linear_attention_numerator<'t>(q: Var<'t>, k: Var<'t>, v: Var<'t>, heads: usize, map: FeatureMap, causal: bool) -> Result<Var<'t>> {
    let (num, _) = linear_parts(q, k, v, heads, map, causal, false)?;
    merge_heads(num)
}

/// Causal linear attention as an explicit left-to-right scan with running
/// state `S_j = S_{j−1} + φ(k_j)ᵀ v_j`, `Z_j = Z_{j−1} + φ(k_j)ᵀ`,
/// `y_j = φ(q_j) S_j / φ(q_j) Z_j`, starting from `S_0 = 0`, `Z_0 = 0`.
pub fn linear_attention_recurrent(inp: &AttentionInput, heads: usize, map: FeatureMap) -> Result<Tensor> {
    let (n, d) = (inp.q.shape()[0], inp.q.shape()[1]);
    let dv_total = inp.v.shape()[1];
    if n == 0 {
        return Err(invalid("linear_attention_recurrent", "token count N = 0"));
    }
    if heads == 0 || d % heads != 0 || dv_total % heads != 0 {
        return Err(invalid("linear_attention_recurrent", format!("dims not divisible by {heads} heads")));
    }
    let (dh, dv) = (d / heads, dv_total / heads);
    let (qd, kd, vd) = (inp.q.data(), inp.k.data(), inp.v.data());
    let mut out = vec![0.0; n * dv_total];
    for h in 0..heads {
        let mut s = vec![0.0; dh * dv];
        let mut z = vec![0.0; dh];
        for j in 0..n {
            let kj: Vec<f64> = (0..dh).map(|a| map.apply_scalar(kd[j * d + h * dh + a])).collect();
            let qj: Vec<f64> = (0..dh).map(|a| map.apply_scalar(qd[j * d + h * dh + a])).collect();
            if qj.iter().chain(&kj).any(|&x| x <= 0.0) {
                return Err(invalid("linear_attention_recurrent", "feature map produced non-positive entries"));
            }
            let vj = &vd[j * dv_total + h * dv..][..dv];
            for a in 0..dh {
                z[a] += kj[a];
                for c in 0..dv {
                    s[a * dv + c] += kj[a] * vj[c];
                }
            }
            let den: f64 = qj.iter().zip(&z).map(|(x, y)| x * y).sum();
            for c in 0..dv {
                let num: f64 = (0..dh).map(|a| qj[a] * s[a * dv + c]).sum();
                out[j * dv_total + h * dv + c] = num / den;
            }
        }
    }
    Tensor::from_vec(&[n, dv_total], out)
}

/// Inputs of the selective state-space recurrence
/// `h_j = Ã_j ⊙ h_{j−1} + B_j (Δ_j ⊙ x_j)`, `y_j = C_j h_j + D ⊙ x_j`
/// with hidden state `h_j` of shape `d × C`.
#[derive(Clone, Debug)]
pub struct SsmParams {
    /// Forget gate `[N, d]`, broadcast across the `C` columns of `h_j`.
    pub a_tilde: Tensor,
    /// `[N, d]`
    pub b: Tensor,
    /// `[N, d]`
    pub c: Tensor,
    /// `[N, C]`
    pub delta: Tensor,
    /// `[C]`
    pub d_skip: Tensor,
    /// `[N, C]`
    pub x: Tensor,
}

/// Sequential scan from `h_0 = 0`, returning `y` as `[N, C]`.
pub fn ssm_scan(p: &SsmParams) -> Result<Tensor> {
    let xs = p.x.shape();
    if xs.len() != 2 {
        return Err(shape_err("ssm_scan", "x [N, C]", format!("{xs:?}")));
    }
    let (n, c) = (xs[0], xs[1]);
    let ds = p.b.shape();
    if ds.len() != 2 || ds[0] != n {
        return Err(shape_err("ssm_scan", format!("B [{n}, d]"), format!("{ds:?}")));
    }
    let d = ds[1];
    for (name, t, want) in [
        ("a_tilde", &p.a_tilde, [n, d]),
        ("c", &p.c, [n, d]),
        ("delta", &p.delta, [n, c]),
    ] {
        if t.shape() != want {
            return Err(shape_err("ssm_scan", format!("{name} {want:?}"), format!("{:?}", t.shape())));
        }
    }
    if p.d_skip.shape() != [c] {
        return Err(shape_err("ssm_scan", format!("d_skip [{c}]"), format!("{:?}", p.d_skip.shape())));
    }
    let (a, bm, cm, dl, ds, x) = (p.a_tilde.data(), p.b.data(), p.c.data(), p.delta.data(), p.d_skip.data(), p.x.data());
    let mut h = vec![0.0; d * c];
    let mut y = vec![0.0; n * c];
    for j in 0..n {
        for r in 0..d {
            let (aj, bj) = (a[j * d + r], bm[j * d + r]);
            for col in 0..c {
                let u = dl[j * c + col] * x[j * c + col];
                h[r * c + col] = aj * h[r * c + col] + bj * u;
            }
        }
        for col in 0..c {
            let mut acc = 0.0;
            for r in 0..d {
                acc += cm[j * d + r] * h[r * c + col];
            }
            y[j * c + col] = acc + ds[col] * x[j * c + col];
        }
    }
    Tensor::from_vec(&[n, c], y)
}

/// Rotary encoding settings. Angles are `θ_i = base^(−2i/dim)`.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RopeConfig {
    pub dim: usize,
    pub base: f64,
}

impl RopeConfig {
    pub fn new(dim: usize, base: f64) -> Result<Self> {
        if dim == 0 || dim % 2 != 0 {
            return Err(invalid("RopeConfig", format!("dimension {dim} must be even and positive")));
        }
        Ok(Self { dim, base })
    }

    pub fn with_default_base(dim: usize) -> Result<Self> {
        Self::new(dim, 10000.0)
    }

    pub fn thetas(&self) -> Vec<f64> {
        (0..self.dim / 2).map(|i| self.base.powf(-2.0 * i as f64 / self.dim as f64)).collect()
    }
}

/// Rotates each `(x_{2i}, x_{2i+1})` pair of token `m` by `m·θ_i`.
pub fn rope_encode<'t>(x: Var<'t>, cfg: &RopeConfig) -> Result<Var<'t>> {
    let s = x.shape();
    if s.last() != Some(&cfg.dim) {
        return Err(shape_err("rope_encode", format!("last dim {}", cfg.dim), format!("{s:?}")));
    }
    x.rope(cfg.base)
}

/// Locally-enhanced positional encoding `v + W_L(DWConv₃(v))` on `[B,C,H,W]`.
#[derive(Clone, Debug)]
pub struct Lepe {
    pub dw: Conv2d,
    pub proj: Conv2d,
}

impl Lepe {
    pub fn new(init: &mut Init<'_>, channels: usize) -> Result<Self> {
        Ok(Self {
            dw: Conv2d::new(&mut init.sub("dw"), ConvSpec::new(channels, channels, 3).depthwise().no_bias())?,
            proj: Conv2d::new(&mut init.sub("proj"), ConvSpec::new(channels, channels, 1).no_bias())?,
        })
    }

    pub fn num_params(channels: usize) -> usize {
        ConvSpec::new(channels, channels, 3).depthwise().no_bias().num_params() + ConvSpec::new(channels, channels, 1).no_bias().num_params()
    }

    /// The local term `W_L(DWConv₃(v))` alone.
    pub fn local<'t>(&self, ctx: &Ctx<'t>, v: Var<'t>) -> Result<Var<'t>> {
        self.proj.forward(ctx, self.dw.forward(ctx, v)?)
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, v: Var<'t>) -> Result<Var<'t>> {
        v.add(self.local(ctx, v)?)
    }
}

/// Conditional positional encoding `x + DWConv₃(x)`.
#[derive(Clone, Debug)]
pub struct Cpe {
    pub dw: Conv2d,
}

impl Cpe {
    pub fn new(init: &mut Init<'_>, channels: usize) -> Result<Self> {
        Ok(Self {
            dw: Conv2d::new(&mut init.sub("dw"), ConvSpec::new(channels, channels, 3).depthwise())?,
        })
    }

    pub fn num_params(channels: usize) -> usize {
        ConvSpec::new(channels, channels, 3).depthwise().num_params()
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.add(self.dw.forward(ctx, x)?)
    }
}

/// `Att(RoPE(Q), RoPE(K), V) + W_L(DWConv₃(V))`: full-sum linear attention
/// on rotary-encoded queries and keys plus the LePE local term of the
/// values, which are given as tokens of an `h × w` grid.
#[allow(clippy::too_many_arguments)]
pub fn mlla_attention<'t>(
    ctx: &Ctx<'t>,
    q: Var<'t>,
    k: Var<'t>,
    v: Var<'t>,
    grid: (usize, usize),
    heads: usize,
    rope: &RopeConfig,
    lepe: &Lepe,
) -> Result<Var<'t>> {
    let att = linear_attention(rope_encode(q, rope)?, rope_encode(k, rope)?, v, heads, FeatureMap::EluPlusOne, false)?;
    let local = to_tokens(lepe.local(ctx, from_tokens(v, grid.0, grid.1)?)?)?;
    att.add(local)
}

/// Mamba-like linear attention layer on `[B,C,H,W]`: a 1×1 projection
/// produces queries and keys, the input itself is the value stream.
#[derive(Clone, Debug)]
pub struct Mlla {
    pub qk: Conv2d,
    pub lepe: Lepe,
    pub rope: RopeConfig,
    pub heads: usize,
}

impl Mlla {
    pub fn new(init: &mut Init<'_>, channels: usize, heads: usize) -> Result<Self> {
        if heads == 0 || channels % heads != 0 {
            return Err(invalid("Mlla::new", format!("{channels} channels not divisible by {heads} heads")));
        }
        Ok(Self {
            qk: Conv2d::new(&mut init.sub("qk"), ConvSpec::new(channels, 2 * channels, 1))?,
            lepe: Lepe::new(&mut init.sub("lepe"), channels)?,
            rope: RopeConfig::with_default_base(channels)?,
            heads,
        })
    }

    pub fn num_params(channels: usize) -> usize {
        ConvSpec::new(channels, 2 * channels, 1).num_params() + Lepe::num_params(channels)
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let s = x.shape();
        let c = s[1];
        let qk = to_tokens(self.qk.forward(ctx, x)?)?;
        let q = qk.narrow(2, 0, c)?;
        let k = qk.narrow(2, c, c)?;
        let v = to_tokens(x)?;
        let out = mlla_attention(ctx, q, k, v, (s[2], s[3]), self.heads, &self.rope, &self.lepe)?;
        from_tokens(out, s[2], s[3])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{random_tensor, seeded_rng};

    fn input(n: usize, d: usize, seed: u64) -> AttentionInput {
        let mut rng = seeded_rng(seed);
        AttentionInput::new(
            random_tensor(&[n, d], &mut rng),
            random_tensor(&[n, d], &mut rng),
            random_tensor(&[n, d], &mut rng),
        )
        .unwrap()
    }

    #[test]
    fn single_token_returns_value() {
        let inp = input(1, 4, 1);
        let s = inp.softmax_attention(2, ScoreGate::Softmax).unwrap();
        assert!(s.max_abs_diff(&inp.v) < 1e-15);
        let l = inp.linear_attention(2, FeatureMap::EluPlusOne, false).unwrap();
        assert!(l.max_abs_diff(&inp.v) < 1e-15);
        let r = linear_attention_recurrent(&inp, 2, FeatureMap::EluPlusOne).unwrap();
        assert!(r.max_abs_diff(&inp.v) < 1e-15);
    }

    #[test]
    fn zero_query_averages_values() {
        let mut inp = input(5, 4, 2);
        inp.q = Tensor::zeros(&[5, 4]);
        let out = inp.softmax_attention(1, ScoreGate::Softmax).unwrap();
        for c in 0..4 {
            let mean = (0..5).map(|j| inp.v.at(&[j, c])).sum::<f64>() / 5.0;
            for i in 0..5 {
                assert!((out.at(&[i, c]) - mean).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn constant_values_pass_through_linear_attention() {
        let mut inp = input(7, 4, 3);
        let row = [0.3, -1.2, 2.0, 0.5];
        inp.v = Tensor::from_vec(&[7, 4], row.iter().cycle().take(28).cloned().collect()).unwrap();
        let out = inp.linear_attention(2, FeatureMap::EluPlusOne, false).unwrap();
        for i in 0..7 {
            for c in 0..4 {
                assert!((out.at(&[i, c]) - row[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identity_map_with_negative_inputs_is_rejected() {
        let inp = input(4, 2, 4);
        assert!(inp.linear_attention(1, FeatureMap::Identity, false).is_err());
        assert!(linear_attention_recurrent(&inp, 1, FeatureMap::Identity).is_err());
        assert!(inp.linear_attention_numerator(1, FeatureMap::Identity, false).is_ok());
    }

    #[test]
    fn empty_sequence_rejected() {
        let tape = Tape::new();
        let z = tape.constant(Tensor::zeros(&[1, 0, 4]));
        assert!(softmax_attention(z, z, z, 1, ScoreGate::Softmax).is_err());
    }

    #[test]
    fn last_causal_row_equals_full_sum() {
        let inp = input(9, 4, 5);
        let full = inp.linear_attention(2, FeatureMap::EluPlusOne, false).unwrap();
        let rec = linear_attention_recurrent(&inp, 2, FeatureMap::EluPlusOne).unwrap();
        for c in 0..4 {
            assert!((full.at(&[8, c]) - rec.at(&[8, c])).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_forget_gate_is_memoryless() {
        let mut rng = seeded_rng(6);
        let (n, d, c) = (6, 3, 2);
        let p = SsmParams {
            a_tilde: Tensor::zeros(&[n, d]),
            b: random_tensor(&[n, d], &mut rng),
            c: random_tensor(&[n, d], &mut rng),
            delta: random_tensor(&[n, c], &mut rng),
            d_skip: random_tensor(&[c], &mut rng),
            x: random_tensor(&[n, c], &mut rng),
        };
        let y = ssm_scan(&p).unwrap();
        for j in 0..n {
            for col in 0..c {
                let u = p.delta.at(&[j, col]) * p.x.at(&[j, col]);
                let cb: f64 = (0..d).map(|r| p.c.at(&[j, r]) * p.b.at(&[j, r])).sum();
                let want = cb * u + p.d_skip.at(&[col]) * p.x.at(&[j, col]);
                assert!((y.at(&[j, col]) - want).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn ssm_length_mismatch_rejected() {
        let p = SsmParams {
            a_tilde: Tensor::zeros(&[3, 2]),
            b: Tensor::zeros(&[3, 2]),
            c: Tensor::zeros(&[4, 2]),
            delta: Tensor::zeros(&[3, 1]),
            d_skip: Tensor::zeros(&[1]),
            x: Tensor::zeros(&[3, 1]),
        };
        assert!(ssm_scan(&p).is_err());
    }

    #[test]
    fn rope_identity_at_position_zero_and_odd_dim_rejected() {
        assert!(RopeConfig::new(5, 10000.0).is_err());
        let cfg = RopeConfig::with_default_base(4).unwrap();
        let th = cfg.thetas();
        assert!(th.windows(2).all(|w| w[1] < w[0]));
        let tape = Tape::new();
        let x = Tensor::from_vec(&[1, 4], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let y = rope_encode(tape.constant(x.clone()), &cfg).unwrap().value();
        assert_eq!(y, x);
    }
}
