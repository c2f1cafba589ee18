//! Composite network blocks: the pyramidal frequency attention extractor,
//! the multi-scale frequency-assisted linear attention block, the
//! frequency reverse decoder and the per-level prediction head.

use serde::{Deserialize, Serialize};

use crate::attention::{Cpe, Mlla};
use crate::autodiff::Var;
use crate::error::{invalid, shape_err, Result};
use crate::freq::{FreqAttention, Fwm};
use crate::nn::{from_tokens, to_tokens, ConvSpec, Conv2d, Ctx, Init, Norm, NormKind};

/// Smallest spatial extent accepted by the pyramid extractor.
pub const PFAE_MIN_EXTENT: usize = 2;

fn dims4(op: &'static str, x: &Var<'_>) -> Result<[usize; 4]> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(shape_err(op, "[B,C,H,W]", format!("{s:?}")));
    }
    Ok([s[0], s[1], s[2], s[3]])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PfaeConfig {
    pub in_channels: usize,
    pub reduced_channels: usize,
    pub dilations: Vec<usize>,
    /// Per-stream 1×1 projections before the spectral attention.
    pub project_qkv: bool,
}

impl Default for PfaeConfig {
    fn default() -> Self {
        Self {
            in_channels: 128,
            reduced_channels: 128,
            dilations: vec![1, 3, 5, 7],
            project_qkv: false,
        }
    }
}

impl PfaeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.reduced_channels == 0 {
            return Err(invalid("PfaeConfig", "channel counts must be positive"));
        }
        if self.dilations.is_empty() || self.dilations.contains(&0) {
            return Err(invalid("PfaeConfig", "dilations must be nonempty and positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct PfaeBranch {
    pub dilated: Conv2d,
    pub post: Conv2d,
    pub attn: FreqAttention,
    pub fwm: Fwm,
    pub fuse: Conv2d,
}

impl PfaeBranch {
    fn new(init: &mut Init<'_>, c: usize, dilation: usize, project: bool) -> Result<Self> {
        Ok(Self {
            dilated: Conv2d::new(&mut init.sub("dilated"), ConvSpec::new(c, c, 3).dilation(dilation))?,
            post: Conv2d::new(&mut init.sub("post"), ConvSpec::new(c, c, 1))?,
            attn: FreqAttention::new(&mut init.sub("attn"), c, project)?,
            fwm: Fwm::new(&mut init.sub("fwm"), c)?,
            fuse: Conv2d::new(&mut init.sub("fuse"), ConvSpec::new(2 * c, c, 1))?,
        })
    }

    fn num_params(c: usize, project: bool) -> usize {
        ConvSpec::new(c, c, 3).num_params()
            + ConvSpec::new(c, c, 1).num_params()
            + FreqAttention::num_params(c, project)
            + Fwm::num_params(c)
            + ConvSpec::new(2 * c, c, 1).num_params()
    }

    /// `C₁(GELU(C_z(u)))`, the spatial path ahead of the transform.
    pub fn pre_attention<'t>(&self, ctx: &Ctx<'t>, u: Var<'t>) -> Result<Var<'t>> {
        self.post.forward(ctx, self.dilated.forward(ctx, u)?.gelu())
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, u: Var<'t>) -> Result<Var<'t>> {
        let pre = self.pre_attention(ctx, u)?;
        let freq = self.attn.forward(ctx, pre)?;
        let weighted = self.fwm.forward(ctx, u)?;
        self.fuse.forward(ctx, Var::concat(&[freq, weighted], 1)?)?.add(pre)
    }
}

/// Pyramidal frequency attention extraction. Branch `n` consumes
/// `Ê + I_{n−1}` (with `I_0 = 0`) and the branch outputs are merged by a
/// 1×1 conv, added to `Ê` and refined by a 3×3 conv.
#[derive(Clone, Debug)]
pub struct Pfae {
    pub config: PfaeConfig,
    pub reduce: Conv2d,
    pub branches: Vec<PfaeBranch>,
    pub merge: Conv2d,
    pub out: Conv2d,
}

impl Pfae {
    pub fn new(init: &mut Init<'_>, config: PfaeConfig) -> Result<Self> {
        config.validate()?;
        let c = config.reduced_channels;
        let reduce = Conv2d::new(&mut init.sub("reduce"), ConvSpec::new(config.in_channels, c, 1))?;
        let mut branches = Vec::with_capacity(config.dilations.len());
        for (n, &z) in config.dilations.iter().enumerate() {
            branches.push(PfaeBranch::new(&mut init.sub(&format!("branch{}", n + 1)), c, z, config.project_qkv)?);
        }
        let merge = Conv2d::new(&mut init.sub("merge"), ConvSpec::new(c * config.dilations.len(), c, 1))?;
        let out = Conv2d::new(&mut init.sub("out"), ConvSpec::new(c, c, 3))?;
        Ok(Self { config, reduce, branches, merge, out })
    }

    pub fn num_params(config: &PfaeConfig) -> usize {
        let c = config.reduced_channels;
        let n = config.dilations.len();
        ConvSpec::new(config.in_channels, c, 1).num_params()
            + n * PfaeBranch::num_params(c, config.project_qkv)
            + ConvSpec::new(c * n, c, 1).num_params()
            + ConvSpec::new(c, c, 3).num_params()
    }

    fn check_input(&self, x: &Var<'_>) -> Result<()> {
        let [_, c, h, w] = dims4("Pfae", x)?;
        if c != self.config.in_channels {
            return Err(shape_err("Pfae", format!("{} channels", self.config.in_channels), format!("{c}")));
        }
        if h < PFAE_MIN_EXTENT || w < PFAE_MIN_EXTENT {
            return Err(invalid("Pfae", format!("spatial extent {h}x{w} below {PFAE_MIN_EXTENT}")));
        }
        Ok(())
    }

    pub fn reduced<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        self.check_input(&x)?;
        self.reduce.forward(ctx, x)
    }

    /// Branch outputs `I_1..I_n` with their inputs chained.
    pub fn branch_outputs<'t>(&self, ctx: &Ctx<'t>, e_hat: Var<'t>) -> Result<Vec<Var<'t>>> {
        let mut outs: Vec<Var<'t>> = Vec::with_capacity(self.branches.len());
        for b in &self.branches {
            let u = match outs.last() {
                Some(&prev) => e_hat.add(prev)?,
                None => e_hat,
            };
            outs.push(b.forward(ctx, u)?);
        }
        Ok(outs)
    }

    /// Pre-attention output of branch `index` (0-based) given the previous
    /// branch output.
    pub fn branch_pre_attention<'t>(&self, ctx: &Ctx<'t>, e_hat: Var<'t>, prev: Option<Var<'t>>, index: usize) -> Result<Var<'t>> {
        let b = self
            .branches
            .get(index)
            .ok_or_else(|| invalid("Pfae", format!("branch {index} out of range")))?;
        let u = match prev {
            Some(p) => e_hat.add(p)?,
            None => e_hat,
        };
        b.pre_attention(ctx, u)
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let e_hat = self.reduced(ctx, x)?;
        let outs = self.branch_outputs(ctx, e_hat)?;
        let merged = self.merge.forward(ctx, Var::concat(&outs, 1)?)?;
        self.out.forward(ctx, merged.add(e_hat)?)
    }
}

/// Gate activation of the multi-scale block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateAct {
    Silu,
    Sigmoid,
}

impl GateAct {
    fn apply(self, x: Var<'_>) -> Var<'_> {
        match self {
            GateAct::Silu => x.silu(),
            GateAct::Sigmoid => x.sigmoid(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MfmConfig {
    pub channels: usize,
    pub heads: usize,
    /// Depthwise kernel per channel-split branch.
    pub kernels: Vec<usize>,
    pub mlp_ratio: usize,
    pub gate: GateAct,
}

impl Default for MfmConfig {
    fn default() -> Self {
        Self {
            channels: 16,
            heads: 2,
            kernels: vec![3, 5],
            mlp_ratio: 4,
            gate: GateAct::Silu,
        }
    }
}

impl MfmConfig {
    pub fn with_channels(channels: usize) -> Self {
        Self { channels, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.kernels.len();
        if n == 0 || self.kernels.iter().any(|k| k % 2 == 0) {
            return Err(invalid("MfmConfig", "kernels must be nonempty and odd"));
        }
        if self.channels == 0 || self.channels % n != 0 {
            return Err(invalid("MfmConfig", format!("{} channels cannot be split into {n} parts", self.channels)));
        }
        let part = self.channels / n;
        if part % 2 != 0 {
            return Err(invalid("MfmConfig", format!("split width {part} must be even")));
        }
        if self.heads == 0 || part % self.heads != 0 {
            return Err(invalid("MfmConfig", format!("split width {part} not divisible by {} heads", self.heads)));
        }
        if self.mlp_ratio == 0 {
            return Err(invalid("MfmConfig", "mlp_ratio must be positive"));
        }
        Ok(())
    }

    fn part(&self) -> usize {
        self.channels / self.kernels.len()
    }
}

#[derive(Clone, Debug)]
pub struct MfmScale {
    pub proj: Conv2d,
    pub dw: Conv2d,
    pub attn: Mlla,
}

/// Multi-scale frequency-assisted linear attention block.
#[derive(Clone, Debug)]
pub struct Mfm {
    pub config: MfmConfig,
    pub cpe_in: Cpe,
    pub norm_in: Norm,
    pub scales: Vec<MfmScale>,
    pub gate: Conv2d,
    pub linear: Conv2d,
    pub fwm_in: Fwm,
    pub cpe_mid: Cpe,
    pub mlp_up: Conv2d,
    pub mlp_down: Conv2d,
    pub norm_out: Norm,
    pub fwm_out: Fwm,
}

impl Mfm {
    pub fn new(init: &mut Init<'_>, config: MfmConfig) -> Result<Self> {
        config.validate()?;
        let c = config.channels;
        let part = config.part();
        let mut scales = Vec::new();
        for &k in &config.kernels {
            let mut sub = init.sub(&format!("scale{k}"));
            scales.push(MfmScale {
                proj: Conv2d::new(&mut sub.sub("proj"), ConvSpec::new(part, part, 1))?,
                dw: Conv2d::new(&mut sub.sub("dw"), ConvSpec::new(part, part, k).depthwise())?,
                attn: Mlla::new(&mut sub.sub("mlla"), part, config.heads)?,
            });
        }
        let hidden = c * config.mlp_ratio;
        Ok(Self {
            cpe_in: Cpe::new(&mut init.sub("cpe_in"), c)?,
            norm_in: Norm::new(&mut init.sub("norm_in"), NormKind::Layer, c),
            scales,
            gate: Conv2d::new(&mut init.sub("gate"), ConvSpec::new(c, c, 1))?,
            linear: Conv2d::new(&mut init.sub("linear"), ConvSpec::new(c, c, 1))?,
            fwm_in: Fwm::new(&mut init.sub("fwm_in"), c)?,
            cpe_mid: Cpe::new(&mut init.sub("cpe_mid"), c)?,
            mlp_up: Conv2d::new(&mut init.sub("mlp_up"), ConvSpec::new(c, hidden, 1))?,
            mlp_down: Conv2d::new(&mut init.sub("mlp_down"), ConvSpec::new(hidden, c, 1))?,
            norm_out: Norm::new(&mut init.sub("norm_out"), NormKind::Layer, c),
            fwm_out: Fwm::new(&mut init.sub("fwm_out"), c)?,
            config,
        })
    }

    pub fn num_params(config: &MfmConfig) -> usize {
        let c = config.channels;
        let part = config.part();
        let hidden = c * config.mlp_ratio;
        let scales: usize = config
            .kernels
            .iter()
            .map(|&k| ConvSpec::new(part, part, 1).num_params() + ConvSpec::new(part, part, k).depthwise().num_params() + Mlla::num_params(part))
            .sum();
        2 * Cpe::num_params(c)
            + 2 * 2 * c
            + scales
            + 2 * ConvSpec::new(c, c, 1).num_params()
            + 2 * Fwm::num_params(c)
            + ConvSpec::new(c, hidden, 1).num_params()
            + ConvSpec::new(hidden, c, 1).num_params()
    }

    /// First-stage output `L(A ⊙ gate(C₁(Ẽ)))` as a feature map.
    pub fn attention_stage<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let [_, c, h, w] = dims4("Mfm", &x)?;
        if c != self.config.channels {
            return Err(shape_err("Mfm", format!("{} channels", self.config.channels), format!("{c}")));
        }
        let e = self.norm_in.forward(ctx, self.cpe_in.forward(ctx, x)?)?;
        let part = self.config.part();
        let mut outs = Vec::with_capacity(self.scales.len());
        for (i, s) in self.scales.iter().enumerate() {
            let slice = e.narrow(1, i * part, part)?;
            let u = self.config.gate.apply(s.dw.forward(ctx, s.proj.forward(ctx, slice)?)?);
            outs.push(s.attn.forward(ctx, u)?);
        }
        let a = Var::concat(&outs, 1)?;
        let g = self.config.gate.apply(self.gate.forward(ctx, e)?);
        let gated = from_tokens(to_tokens(a)?.mul(to_tokens(g)?)?, h, w)?;
        self.linear.forward(ctx, gated)
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let f1 = self.attention_stage(ctx, x)?;
        let f2 = self.cpe_mid.forward(ctx, f1.add(self.fwm_in.forward(ctx, x)?)?.add(x)?)?;
        let mlp = self.mlp_down.forward(ctx, self.mlp_up.forward(ctx, f2)?.gelu())?;
        f2.add(self.norm_out.forward(ctx, mlp)?)?.add(self.fwm_out.forward(ctx, f2)?)
    }
}

/// Extends an auxiliary map to the decoder level: resize, then 1×1 conv.
#[derive(Clone, Debug)]
pub struct Expand {
    pub conv: Conv2d,
}

impl Expand {
    pub fn forward<'t>(&self, ctx: &Ctx<'t>, a: Var<'t>, h: usize, w: usize) -> Result<Var<'t>> {
        self.conv.forward(ctx, a.resize_bilinear(h, w)?)
    }
}

/// Frequency reverse decoder for one level.
#[derive(Clone, Debug)]
pub struct Frd {
    pub channels: usize,
    pub aux_channels: Vec<usize>,
    pub expand: Vec<Expand>,
    pub con: Conv2d,
    pub con_norm: Norm,
    pub out: Conv2d,
}

impl Frd {
    pub fn new(init: &mut Init<'_>, channels: usize, aux_channels: &[usize]) -> Result<Self> {
        if aux_channels.is_empty() {
            return Err(invalid("Frd::new", "at least one auxiliary input is required"));
        }
        let mut expand = Vec::new();
        for (i, &ac) in aux_channels.iter().enumerate() {
            expand.push(Expand {
                conv: Conv2d::new(&mut init.sub(&format!("ex{i}")), ConvSpec::new(ac, channels, 1))?,
            });
        }
        let cat = channels * (aux_channels.len() + 2);
        Ok(Self {
            channels,
            aux_channels: aux_channels.to_vec(),
            expand,
            con: Conv2d::new(&mut init.sub("con"), ConvSpec::new(channels, channels, 3))?,
            con_norm: Norm::new(&mut init.sub("con_bn"), NormKind::Batch, channels),
            out: Conv2d::new(&mut init.sub("out"), ConvSpec::new(cat, channels, 3))?,
        })
    }

    pub fn num_params(channels: usize, aux_channels: &[usize]) -> usize {
        let ex: usize = aux_channels.iter().map(|&ac| ConvSpec::new(ac, channels, 1).num_params()).sum();
        ex + ConvSpec::new(channels, channels, 3).num_params()
            + 2 * channels
            + ConvSpec::new(channels * (aux_channels.len() + 2), channels, 3).num_params()
    }

    fn expanded<'t>(&self, ctx: &Ctx<'t>, f: &Var<'t>, aux: &[Var<'t>]) -> Result<Vec<Var<'t>>> {
        let [_, c, h, w] = dims4("Frd", f)?;
        if c != self.channels {
            return Err(shape_err("Frd", format!("{} channels", self.channels), format!("{c}")));
        }
        if aux.is_empty() {
            return Err(invalid("Frd", "empty auxiliary set"));
        }
        if aux.len() != self.expand.len() {
            return Err(invalid("Frd", format!("expected {} auxiliaries, got {}", self.expand.len(), aux.len())));
        }
        aux.iter().zip(&self.expand).map(|(&a, ex)| ex.forward(ctx, a, h, w)).collect()
    }

    /// `RA = Σ_a (1 − σ(a)) + (1 − σ(|fft2 a|))` over expanded auxiliaries.
    pub fn reverse_attention<'t>(expanded: &[Var<'t>]) -> Result<Var<'t>> {
        let mut ra: Option<Var<'t>> = None;
        for &a in expanded {
            let term = a.sigmoid().rsub_scalar(1.0).add(a.fft2()?.abs().sigmoid().rsub_scalar(1.0))?;
            ra = Some(match ra {
                Some(r) => r.add(term)?,
                None => term,
            });
        }
        ra.ok_or_else(|| invalid("Frd", "empty auxiliary set"))
    }

    pub fn reverse_map<'t>(&self, ctx: &Ctx<'t>, f: Var<'t>, aux: &[Var<'t>]) -> Result<Var<'t>> {
        Self::reverse_attention(&self.expanded(ctx, &f, aux)?)
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, f: Var<'t>, aux: &[Var<'t>]) -> Result<Var<'t>> {
        let ex = self.expanded(ctx, &f, aux)?;
        let mut parts = vec![f];
        parts.extend(ex.iter().copied());
        let g1 = Var::concat(&parts, 1)?;
        let g2 = Self::reverse_attention(&ex)?.mul(f)?;
        let con = self.con_norm.forward(ctx, self.con.forward(ctx, g2)?)?.relu();
        self.out.forward(ctx, Var::concat(&[g1, con], 1)?)?.add(f)
    }
}

/// 1×1 conv to a single logit channel, resized to the output size.
#[derive(Clone, Debug)]
pub struct Head {
    pub conv: Conv2d,
}

impl Head {
    pub fn new(init: &mut Init<'_>, channels: usize) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(init, ConvSpec::new(channels, 1, 1))?,
        })
    }

    pub fn num_params(channels: usize) -> usize {
        ConvSpec::new(channels, 1, 1).num_params()
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, g: Var<'t>, out_h: usize, out_w: usize) -> Result<Var<'t>> {
        self.conv.forward(ctx, g)?.resize_bilinear(out_h, out_w)
    }
}
