//! Toy convolutional pyramid encoder and the full network assembly.

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::blocks::{Frd, GateAct, Head, Mfm, MfmConfig, Pfae, PfaeConfig};
use crate::error::{invalid, shape_err, Result};
use crate::nn::{seeded_rng, ConvSpec, Conv2d, Ctx, Init, Norm, NormKind, ParamStore};

/// Total downsampling of the deepest encoder level.
pub const MAX_STRIDE: usize = 32;
pub const LEVELS: usize = 4;

/// Which decoded levels feed the reverse decoder of a shallower level.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Cascade {
    /// Every deeper decoded level plus the extractor output.
    All,
    /// Only the next deeper decoded level (the deepest uses the extractor output).
    Immediate,
}

/// Hyperparameters shared by every multi-scale block; channels come from
/// the encoder widths.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MfmSettings {
    pub heads: usize,
    pub kernels: Vec<usize>,
    pub mlp_ratio: usize,
    pub gate: GateAct,
}

impl Default for MfmSettings {
    fn default() -> Self {
        let d = MfmConfig::default();
        Self {
            heads: d.heads,
            kernels: d.kernels,
            mlp_ratio: d.mlp_ratio,
            gate: d.gate,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub input_size: usize,
    pub encoder_channels: Vec<usize>,
    pub pfae_channels: usize,
    pub dilations: Vec<usize>,
    pub project_qkv: bool,
    pub mfm: MfmSettings,
    pub cascade: Cascade,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_size: 64,
            encoder_channels: vec![16, 32, 64, 128],
            pfae_channels: 128,
            dilations: vec![1, 3, 5, 7],
            project_qkv: false,
            mfm: MfmSettings::default(),
            cascade: Cascade::All,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.encoder_channels.len() != LEVELS || self.encoder_channels.contains(&0) {
            return Err(invalid("ModelConfig", format!("need {LEVELS} positive encoder widths")));
        }
        if self.input_size == 0 || self.input_size % MAX_STRIDE != 0 {
            return Err(invalid("ModelConfig", format!("input size {} not divisible by {MAX_STRIDE}", self.input_size)));
        }
        self.pfae().validate()?;
        for cfg in self.mfm_configs() {
            cfg.validate()?;
        }
        Ok(())
    }

    pub fn pfae(&self) -> PfaeConfig {
        PfaeConfig {
            in_channels: self.encoder_channels[LEVELS - 1],
            reduced_channels: self.pfae_channels,
            dilations: self.dilations.clone(),
            project_qkv: self.project_qkv,
        }
    }

    pub fn mfm_configs(&self) -> Vec<MfmConfig> {
        self.encoder_channels
            .iter()
            .map(|&channels| MfmConfig {
                channels,
                heads: self.mfm.heads,
                kernels: self.mfm.kernels.clone(),
                mlp_ratio: self.mfm.mlp_ratio,
                gate: self.mfm.gate,
            })
            .collect()
    }

    /// Channel widths of the auxiliary inputs of the decoder at `level`
    /// (0-based), deepest first among the decoded levels, extractor last.
    pub fn frd_aux_channels(&self, level: usize) -> Vec<usize> {
        let mut aux: Vec<usize> = match self.cascade {
            Cascade::All => self.encoder_channels[level + 1..].to_vec(),
            Cascade::Immediate => self.encoder_channels.get(level + 1).into_iter().copied().collect(),
        };
        if self.cascade == Cascade::All || level == LEVELS - 1 {
            aux.push(self.pfae_channels);
        }
        aux
    }
}

/// Conv + batch norm + GELU.
#[derive(Clone, Debug)]
pub struct ConvBnAct {
    pub conv: Conv2d,
    pub norm: Norm,
}

impl ConvBnAct {
    fn new(init: &mut Init<'_>, cin: usize, cout: usize, stride: usize) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(&mut init.sub("conv"), ConvSpec::new(cin, cout, 3).stride(stride))?,
            norm: Norm::new(&mut init.sub("bn"), NormKind::Batch, cout),
        })
    }

    fn num_params(cin: usize, cout: usize) -> usize {
        ConvSpec::new(cin, cout, 3).num_params() + 2 * cout
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        Ok(self.norm.forward(ctx, self.conv.forward(ctx, x)?)?.gelu())
    }
}

/// Four stages at strides 4, 8, 16 and 32, two conv layers each.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub stages: Vec<[ConvBnAct; 2]>,
}

impl Encoder {
    pub fn new(init: &mut Init<'_>, widths: &[usize]) -> Result<Self> {
        let mut stages = Vec::new();
        let mut cin = 3;
        for (i, &c) in widths.iter().enumerate() {
            let mut s = init.sub(&format!("stage{}", i + 1));
            let second_stride = if i == 0 { 2 } else { 1 };
            stages.push([ConvBnAct::new(&mut s.sub("a"), cin, c, 2)?, ConvBnAct::new(&mut s.sub("b"), c, c, second_stride)?]);
            cin = c;
        }
        Ok(Self { stages })
    }

    pub fn num_params(widths: &[usize]) -> usize {
        let mut cin = 3;
        let mut n = 0;
        for &c in widths {
            n += ConvBnAct::num_params(cin, c) + ConvBnAct::num_params(c, c);
            cin = c;
        }
        n
    }

    pub fn forward_stage<'t>(&self, ctx: &Ctx<'t>, stage: usize, x: Var<'t>) -> Result<Var<'t>> {
        let [a, b] = &self.stages[stage];
        b.forward(ctx, a.forward(ctx, x)?)
    }

    /// `E_1..E_4` for an image batch `[B,3,H,W]`.
    pub fn forward<'t>(&self, ctx: &Ctx<'t>, img: Var<'t>) -> Result<Vec<Var<'t>>> {
        let s = img.shape();
        if s.len() != 4 || s[1] != 3 {
            return Err(shape_err("Encoder", "[B,3,H,W]", format!("{s:?}")));
        }
        if s[2] == 0 || s[3] == 0 || s[2] % MAX_STRIDE != 0 || s[3] % MAX_STRIDE != 0 {
            return Err(invalid("Encoder", format!("input {}x{} not divisible by {MAX_STRIDE}", s[2], s[3])));
        }
        let mut out = Vec::with_capacity(self.stages.len());
        let mut x = img;
        for i in 0..self.stages.len() {
            x = self.forward_stage(ctx, i, x)?;
            out.push(x);
        }
        Ok(out)
    }
}

/// Every named intermediate of one forward pass. Indices are 0-based:
/// `e[i]` is `E_{i+1}`.
#[derive(Clone, Debug)]
pub struct FeaturePyramid<'t> {
    /// `E_1..E_5`
    pub e: Vec<Var<'t>>,
    /// `F_1..F_5`, with `F_5 = E_5`.
    pub f: Vec<Var<'t>>,
    /// `G_1..G_4`
    pub g: Vec<Var<'t>>,
    /// Five logit maps at input resolution.
    pub logits: Vec<Var<'t>>,
}

#[derive(Clone, Debug)]
pub struct FmNet {
    pub config: ModelConfig,
    pub encoder: Encoder,
    pub pfae: Pfae,
    pub mfm: Vec<Mfm>,
    pub frd: Vec<Frd>,
    pub heads: Vec<Head>,
}

impl FmNet {
    /// Builds the network and its parameters from `config.seed`.
    pub fn build(config: ModelConfig) -> Result<(Self, ParamStore)> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = seeded_rng(config.seed);
        let mut init = Init::new(&mut store, &mut rng);
        let encoder = Encoder::new(&mut init.sub("encoder"), &config.encoder_channels)?;
        let pfae = Pfae::new(&mut init.sub("pfae"), config.pfae())?;
        let mut mfm = Vec::new();
        for (i, cfg) in config.mfm_configs().into_iter().enumerate() {
            mfm.push(Mfm::new(&mut init.sub(&format!("mfm{}", i + 1)), cfg)?);
        }
        let mut frd = Vec::new();
        for i in 0..LEVELS {
            frd.push(Frd::new(&mut init.sub(&format!("frd{}", i + 1)), config.encoder_channels[i], &config.frd_aux_channels(i))?);
        }
        let mut heads = Vec::new();
        for i in 0..=LEVELS {
            let c = config.encoder_channels.get(i).copied().unwrap_or(config.pfae_channels);
            heads.push(Head::new(&mut init.sub(&format!("head{}", i + 1)), c)?);
        }
        Ok((Self { config, encoder, pfae, mfm, frd, heads }, store))
    }

    pub fn num_params(config: &ModelConfig) -> usize {
        let mut n = Encoder::num_params(&config.encoder_channels) + Pfae::num_params(&config.pfae());
        n += config.mfm_configs().iter().map(Mfm::num_params).sum::<usize>();
        for i in 0..LEVELS {
            n += Frd::num_params(config.encoder_channels[i], &config.frd_aux_channels(i));
        }
        n + config.encoder_channels.iter().map(|&c| Head::num_params(c)).sum::<usize>() + Head::num_params(config.pfae_channels)
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, img: Var<'t>) -> Result<FeaturePyramid<'t>> {
        let s = img.shape();
        if s.len() != 4 || s[1] != 3 {
            return Err(shape_err("FmNet", "[B,3,H,W]", format!("{s:?}")));
        }
        let (h, w) = (s[2], s[3]);
        if h == 0 || w == 0 || h % MAX_STRIDE != 0 || w % MAX_STRIDE != 0 {
            return Err(invalid("FmNet", format!("input {h}x{w} not divisible by {MAX_STRIDE}")));
        }
        let mut e = self.encoder.forward(ctx, img)?;
        let e5 = self.pfae.forward(ctx, e[LEVELS - 1])?;
        let mut f = Vec::with_capacity(LEVELS + 1);
        for (m, &x) in self.mfm.iter().zip(&e) {
            f.push(m.forward(ctx, x)?);
        }
        e.push(e5);
        f.push(e5);
        let mut g: Vec<Option<Var<'t>>> = vec![None; LEVELS];
        for i in (0..LEVELS).rev() {
            let mut aux: Vec<Var<'t>> = match self.config.cascade {
                Cascade::All => g[i + 1..].iter().map(|v| v.expect("decoded deeper level")).collect(),
                Cascade::Immediate => g.get(i + 1).map(|v| v.expect("decoded deeper level")).into_iter().collect(),
            };
            if self.config.cascade == Cascade::All || i == LEVELS - 1 {
                aux.push(e5);
            }
            g[i] = Some(self.frd[i].forward(ctx, f[i], &aux)?);
        }
        let g: Vec<Var<'t>> = g.into_iter().map(|v| v.expect("all levels decoded")).collect();
        let mut logits = Vec::with_capacity(LEVELS + 1);
        for (head, &feat) in self.heads.iter().zip(g.iter().chain(std::iter::once(&e5))) {
            logits.push(head.forward(ctx, feat, h, w)?);
        }
        Ok(FeaturePyramid { e, f, g, logits })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn aux_channels_follow_cascade() {
        let cfg = ModelConfig::default();
        assert_eq!(cfg.frd_aux_channels(3), vec![128]);
        assert_eq!(cfg.frd_aux_channels(0), vec![32, 64, 128, 128]);
        let imm = ModelConfig { cascade: Cascade::Immediate, ..cfg };
        assert_eq!(imm.frd_aux_channels(0), vec![32]);
        assert_eq!(imm.frd_aux_channels(3), vec![128]);
    }

    #[test]
    fn bad_input_size_rejected() {
        assert!(ModelConfig { input_size: 48, ..Default::default() }.validate().is_err());
        assert!(ModelConfig { encoder_channels: vec![8, 8], ..Default::default() }.validate().is_err());
    }

    #[test]
    fn counted_params_match_build() {
        let cfg = ModelConfig {
            encoder_channels: vec![4, 8, 8, 12],
            pfae_channels: 8,
            ..Default::default()
        };
        let (_, store) = FmNet::build(cfg.clone()).unwrap();
        assert_eq!(store.num_scalars(), FmNet::num_params(&cfg));
    }
}
