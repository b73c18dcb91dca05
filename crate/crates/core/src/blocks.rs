//! DC-Hydra backbone blocks.
//!
//! One block is `FFW → mixer → dilated depthwise conv → FFW`, each wrapped in
//! a unit-weight residual, followed by a LayerNorm on the block output. The
//! mixer is pluggable (Hydra, Bi-Mamba, FAVOR+ or softmax attention).
//! Stacks double the conv dilation every `dilation_period` blocks.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView1};

use crate::attention::{
    draw_orthogonal_features, multi_head_attention, AttentionKind, AttentionWeights,
    MultiHeadConfig, DEFAULT_ROPE_BASE,
};
use crate::error::{MixError, Result};
use crate::mixer::FeatureSequence;
use crate::rng::MixRng;
use crate::ssm::{bimamba_channelwise, hydra_channelwise, BiMambaWeights, HydraWeights};

pub const DEFAULT_KERNEL_SIZE: usize = 7;
pub const DEFAULT_DILATION_PERIOD: usize = 4;
pub const DEFAULT_FFW_MULT: usize = 4;
pub const DEFAULT_NUM_HEADS: usize = 4;
pub const DEFAULT_NUM_FEATURES: usize = 64;
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Sigmoid-weighted linear unit.
pub fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn check_width(x: &FeatureSequence, d: usize, context: &'static str) -> Result<()> {
    if x.width() == d {
        Ok(())
    } else {
        Err(MixError::shape(context, format!("width {d}"), format!("width {}", x.width())))
    }
}

/// Position-wise feed-forward weights, applied as `silu(x W1 + b1) W2 + b2`.
#[derive(Clone, Debug, PartialEq)]
pub struct FfwWeights {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

impl FfwWeights {
    pub fn new(w1: Array2<f64>, b1: Array1<f64>, w2: Array2<f64>, b2: Array1<f64>) -> Result<Self> {
        let (d, h) = w1.dim();
        if b1.len() != h || w2.dim() != (h, d) || b2.len() != d {
            return Err(MixError::shape(
                "FfwWeights",
                format!("w1 {d}x{h}, b1[{h}], w2 {h}x{d}, b2[{d}]"),
                format!("b1[{}], w2 {:?}, b2[{}]", b1.len(), w2.dim(), b2.len()),
            ));
        }
        Ok(Self { w1, b1, w2, b2 })
    }

    pub fn random(d: usize, mult: usize, rng: &mut MixRng) -> Self {
        let h = d * mult;
        Self {
            w1: rng.normal_matrix(d, h, (d as f64).powf(-0.5)),
            b1: Array1::zeros(h),
            w2: rng.normal_matrix(h, d, (h as f64).powf(-0.5)),
            b2: Array1::zeros(d),
        }
    }

    pub fn zeros(d: usize, mult: usize) -> Self {
        let h = d * mult;
        Self { w1: Array2::zeros((d, h)), b1: Array1::zeros(h), w2: Array2::zeros((h, d)), b2: Array1::zeros(d) }
    }

    pub fn width(&self) -> usize {
        self.w1.nrows()
    }

    fn zero_output(&mut self) {
        self.w2.fill(0.0);
        self.b2.fill(0.0);
    }
}

pub fn ffw_apply(x: &FeatureSequence, w: &FfwWeights) -> Result<FeatureSequence> {
    check_width(x, w.width(), "ffw_apply")?;
    let mut hidden = x.view().dot(&w.w1);
    hidden += &w.b1;
    hidden.mapv_inplace(silu);
    let mut out = hidden.dot(&w.w2);
    out += &w.b2;
    FeatureSequence::new(out)
}

/// One k-tap filter per channel with taps `dilation` frames apart.
#[derive(Clone, Debug, PartialEq)]
pub struct DilatedConvWeights {
    kernel: Array2<f64>,
    dilation: usize,
    bias: Array1<f64>,
}

impl DilatedConvWeights {
    /// `kernel` is d×k.
    pub fn new(kernel: Array2<f64>, dilation: usize, bias: Array1<f64>) -> Result<Self> {
        let (d, k) = kernel.dim();
        if d == 0 || k == 0 || dilation == 0 {
            return Err(MixError::InvalidArgument(format!(
                "conv needs d >= 1, k >= 1, dilation >= 1 (got d={d}, k={k}, dilation={dilation})"
            )));
        }
        if bias.len() != d {
            return Err(MixError::shape("DilatedConvWeights bias", format!("length {d}"), format!("length {}", bias.len())));
        }
        Ok(Self { kernel, dilation, bias })
    }

    pub fn random(d: usize, k: usize, dilation: usize, rng: &mut MixRng) -> Result<Self> {
        Self::new(rng.normal_matrix(d, k, (k as f64).powf(-0.5)), dilation, Array1::zeros(d))
    }

    pub fn kernel(&self) -> &Array2<f64> {
        &self.kernel
    }

    pub fn bias(&self) -> &Array1<f64> {
        &self.bias
    }

    pub fn dilation(&self) -> usize {
        self.dilation
    }

    pub fn kernel_size(&self) -> usize {
        self.kernel.ncols()
    }

    pub fn width(&self) -> usize {
        self.kernel.nrows()
    }

    pub fn receptive_field(&self) -> usize {
        receptive_field(self.kernel_size(), self.dilation)
    }

    fn zero(&mut self) {
        self.kernel.fill(0.0);
        self.bias.fill(0.0);
    }
}

/// Frames seen by one output of a k-tap conv: `(k − 1)·dilation + 1`.
pub fn receptive_field(kernel_size: usize, dilation: usize) -> usize {
    (kernel_size - 1) * dilation + 1
}

/// Depthwise dilated convolution (cross-correlation) with "same" zero
/// padding: `y[t, c] = bias[c] + Σ_j kernel[c, j] · x[t + (j − (k−1)/2)·dilation, c]`.
/// For even k the extra tap sits on the right.
pub fn dilated_dw_conv(x: &FeatureSequence, w: &DilatedConvWeights) -> Result<FeatureSequence> {
    check_width(x, w.width(), "dilated_dw_conv")?;
    let (t_len, d) = (x.len(), x.width());
    let k = w.kernel_size();
    let left = ((k - 1) * w.dilation / 2) as isize;
    let xv = x.view();
    let mut out = Array2::<f64>::zeros((t_len, d));
    for t in 0..t_len {
        for c in 0..d {
            let mut acc = w.bias[c];
            for j in 0..k {
                let src = t as isize + (j * w.dilation) as isize - left;
                if src >= 0 && (src as usize) < t_len {
                    acc += w.kernel[[c, j]] * xv[[src as usize, c]];
                }
            }
            out[[t, c]] = acc;
        }
    }
    FeatureSequence::new(out)
}

/// Dilation of block `index` (0-based): doubles every `period` blocks.
pub fn dilation_for_block(index: usize, period: usize) -> Result<usize> {
    if period == 0 {
        return Err(MixError::InvalidArgument("dilation period must be >= 1".into()));
    }
    let exponent = u32::try_from(index / period)
        .ok()
        .filter(|&e| e < usize::BITS)
        .ok_or_else(|| MixError::NumericRange(format!("dilation for block {index} overflows")))?;
    Ok(1usize << exponent)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormParams {
    pub scale: Array1<f64>,
    pub shift: Array1<f64>,
}

impl LayerNormParams {
    pub fn identity(d: usize) -> Self {
        Self { scale: Array1::ones(d), shift: Array1::zeros(d) }
    }
}

/// Per-frame normalization over channels, `(x − mean) / sqrt(var + ε)`, then
/// `scale ⊙ · + shift`. Variance is the biased (population) estimate.
pub fn layer_norm_apply(x: &FeatureSequence, scale: ArrayView1<'_, f64>, shift: ArrayView1<'_, f64>) -> Result<FeatureSequence> {
    let d = x.width();
    if scale.len() != d || shift.len() != d {
        return Err(MixError::shape("layer_norm_apply", format!("scale/shift length {d}"), format!("{}/{}", scale.len(), shift.len())));
    }
    let mut out = x.view().to_owned();
    for mut row in out.rows_mut() {
        let mean = row.sum() / d as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        let inv = (var + LAYER_NORM_EPS).sqrt().recip();
        for ((v, &g), &b) in row.iter_mut().zip(scale.iter()).zip(shift.iter()) {
            *v = (*v - mean) * inv * g + b;
        }
    }
    FeatureSequence::new(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MixerKind {
    Hydra,
    BiMamba,
    Favor,
    Softmax,
}

impl MixerKind {
    pub const ALL: [MixerKind; 4] = [MixerKind::Hydra, MixerKind::BiMamba, MixerKind::Favor, MixerKind::Softmax];

    pub fn as_str(&self) -> &'static str {
        match self {
            MixerKind::Hydra => "hydra",
            MixerKind::BiMamba => "bimamba",
            MixerKind::Favor => "favor",
            MixerKind::Softmax => "softmax",
        }
    }
}

impl fmt::Display for MixerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MixerKind {
    type Err = MixError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "hydra" => Ok(MixerKind::Hydra),
            "bimamba" | "bi-mamba" => Ok(MixerKind::BiMamba),
            "favor" | "favor+" => Ok(MixerKind::Favor),
            "softmax" => Ok(MixerKind::Softmax),
            other => Err(MixError::InvalidArgument(format!("unknown mixer kind '{other}'"))),
        }
    }
}

/// The sequence-mixing stage of a block. Every variant ends in a d×d output
/// projection (`out_proj`, or `wo` for attention).
#[derive(Clone, Debug, PartialEq)]
pub enum MixerWeights {
    Hydra { weights: HydraWeights, out_proj: Array2<f64> },
    BiMamba { weights: BiMambaWeights, out_proj: Array2<f64> },
    Attention { weights: AttentionWeights, cfg: MultiHeadConfig, kind: AttentionKind },
}

impl MixerWeights {
    pub fn kind(&self) -> MixerKind {
        match self {
            MixerWeights::Hydra { .. } => MixerKind::Hydra,
            MixerWeights::BiMamba { .. } => MixerKind::BiMamba,
            MixerWeights::Attention { kind: AttentionKind::Softmax, .. } => MixerKind::Softmax,
            MixerWeights::Attention { kind: AttentionKind::Favor(_), .. } => MixerKind::Favor,
        }
    }

    fn zero_output(&mut self) {
        match self {
            MixerWeights::Hydra { out_proj, .. } | MixerWeights::BiMamba { out_proj, .. } => out_proj.fill(0.0),
            MixerWeights::Attention { weights, .. } => weights.wo.fill(0.0),
        }
    }
}

pub fn mixer_apply(x: &FeatureSequence, mixer: &MixerWeights) -> Result<FeatureSequence> {
    match mixer {
        MixerWeights::Hydra { weights, out_proj } => {
            let y = hydra_channelwise(x, weights)?;
            project(&y, out_proj)
        }
        MixerWeights::BiMamba { weights, out_proj } => {
            let y = bimamba_channelwise(x, weights)?;
            project(&y, out_proj)
        }
        MixerWeights::Attention { weights, cfg, kind } => multi_head_attention(x, weights, cfg, kind),
    }
}

fn project(x: &FeatureSequence, w: &Array2<f64>) -> Result<FeatureSequence> {
    if w.dim() != (x.width(), x.width()) {
        return Err(MixError::shape("mixer output projection", format!("{0}x{0}", x.width()), format!("{:?}", w.dim())));
    }
    FeatureSequence::new(x.view().dot(w))
}

/// One DC-Hydra block.
#[derive(Clone, Debug, PartialEq)]
pub struct DcHydraBlock {
    pub ffw_in: FfwWeights,
    pub mixer: MixerWeights,
    pub conv: DilatedConvWeights,
    pub ffw_out: FfwWeights,
    pub norm: LayerNormParams,
}

impl DcHydraBlock {
    pub fn width(&self) -> usize {
        self.ffw_in.width()
    }

    /// Zeroes the last projection of every submodule, leaving only the
    /// residual path: the block then computes `layer_norm(x)`.
    pub fn zero_projections(&mut self) {
        self.ffw_in.zero_output();
        self.mixer.zero_output();
        self.conv.zero();
        self.ffw_out.zero_output();
    }
}

/// Output of each stage of [`block_forward`].
#[derive(Clone, Debug)]
pub struct BlockTrace {
    pub after_ffw_in: FeatureSequence,
    pub after_mixer: FeatureSequence,
    pub after_conv: FeatureSequence,
    pub after_ffw_out: FeatureSequence,
    pub output: FeatureSequence,
}

fn residual(x: &FeatureSequence, delta: FeatureSequence) -> Result<FeatureSequence> {
    FeatureSequence::new(&x.view() + &delta.view())
}

/// The conv stage: `silu(dilated_dw_conv(x))`.
pub fn conv_stage(x: &FeatureSequence, w: &DilatedConvWeights) -> Result<FeatureSequence> {
    let y = dilated_dw_conv(x, w)?;
    FeatureSequence::new(y.into_inner().mapv(silu))
}

pub fn block_forward_trace(x: &FeatureSequence, block: &DcHydraBlock) -> Result<BlockTrace> {
    check_width(x, block.width(), "block_forward")?;
    let after_ffw_in = residual(x, ffw_apply(x, &block.ffw_in)?)?;
    let after_mixer = residual(&after_ffw_in, mixer_apply(&after_ffw_in, &block.mixer)?)?;
    let after_conv = residual(&after_mixer, conv_stage(&after_mixer, &block.conv)?)?;
    let after_ffw_out = residual(&after_conv, ffw_apply(&after_conv, &block.ffw_out)?)?;
    let output = layer_norm_apply(&after_ffw_out, block.norm.scale.view(), block.norm.shift.view())?;
    Ok(BlockTrace { after_ffw_in, after_mixer, after_conv, after_ffw_out, output })
}

pub fn block_forward(x: &FeatureSequence, block: &DcHydraBlock) -> Result<FeatureSequence> {
    Ok(block_forward_trace(x, block)?.output)
}

/// Shape and hyperparameters of a block stack.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockStackConfig {
    pub d_model: usize,
    pub num_blocks: usize,
    pub dilation_period: usize,
    pub kernel_size: usize,
    pub mixer: MixerKind,
    pub num_heads: usize,
    pub num_features: usize,
    pub state_size: usize,
    pub ffw_mult: usize,
    pub rope_base: Option<f64>,
}

impl BlockStackConfig {
    pub fn new(d_model: usize, num_blocks: usize, mixer: MixerKind) -> Self {
        Self {
            d_model,
            num_blocks,
            dilation_period: DEFAULT_DILATION_PERIOD,
            kernel_size: DEFAULT_KERNEL_SIZE,
            mixer,
            num_heads: DEFAULT_NUM_HEADS,
            num_features: DEFAULT_NUM_FEATURES,
            state_size: crate::ssm::DEFAULT_STATE_SIZE,
            ffw_mult: DEFAULT_FFW_MULT,
            rope_base: Some(DEFAULT_ROPE_BASE),
        }
    }

    /// Latent-denoiser shape: 8 blocks at 256 channels.
    pub fn latent_denoiser(mixer: MixerKind) -> Self {
        Self::new(256, 8, mixer)
    }

    /// Token-generator shape: 12 blocks at 512 channels.
    pub fn token_generator(mixer: MixerKind) -> Self {
        Self::new(512, 12, mixer)
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("d_model", self.d_model),
            ("num_blocks", self.num_blocks),
            ("dilation_period", self.dilation_period),
            ("kernel_size", self.kernel_size),
            ("num_heads", self.num_heads),
            ("num_features", self.num_features),
            ("state_size", self.state_size),
            ("ffw_mult", self.ffw_mult),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(MixError::InvalidArgument(format!("{name} must be >= 1")));
        }
        if matches!(self.mixer, MixerKind::Favor | MixerKind::Softmax) {
            let cfg = MultiHeadConfig::new(self.num_heads, self.d_model)?;
            if let Some(base) = self.rope_base {
                cfg.with_rope(base)?;
            }
        }
        Ok(())
    }

    pub fn dilations(&self) -> Result<Vec<usize>> {
        (0..self.num_blocks).map(|i| dilation_for_block(i, self.dilation_period)).collect()
    }

    fn attention_config(&self) -> Result<MultiHeadConfig> {
        let cfg = MultiHeadConfig::new(self.num_heads, self.d_model)?;
        match self.rope_base {
            Some(base) => cfg.with_rope(base),
            None => Ok(cfg),
        }
    }

    /// Randomly initialized block `index`.
    pub fn random_block(&self, index: usize, rng: &mut MixRng) -> Result<DcHydraBlock> {
        let d = self.d_model;
        let dilation = dilation_for_block(index, self.dilation_period)?;
        let ffw_in = FfwWeights::random(d, self.ffw_mult, rng);
        let out_std = (d as f64).powf(-0.5);
        let mixer = match self.mixer {
            MixerKind::Hydra => MixerWeights::Hydra {
                weights: HydraWeights::random(d, self.state_size, rng),
                out_proj: rng.normal_matrix(d, d, out_std),
            },
            MixerKind::BiMamba => MixerWeights::BiMamba {
                weights: BiMambaWeights::random(d, self.state_size, rng),
                out_proj: rng.normal_matrix(d, d, out_std),
            },
            MixerKind::Softmax => MixerWeights::Attention {
                weights: AttentionWeights::random(d, rng),
                cfg: self.attention_config()?,
                kind: AttentionKind::Softmax,
            },
            MixerKind::Favor => {
                let cfg = self.attention_config()?;
                let seed = (rng.uniform(0.0, 1.0) * u64::MAX as f64) as u64;
                MixerWeights::Attention {
                    weights: AttentionWeights::random(d, rng),
                    kind: AttentionKind::Favor(draw_orthogonal_features(cfg.d_head(), self.num_features, seed)?),
                    cfg,
                }
            }
        };
        let conv = DilatedConvWeights::random(d, self.kernel_size, dilation, rng)?;
        let ffw_out = FfwWeights::random(d, self.ffw_mult, rng);
        Ok(DcHydraBlock { ffw_in, mixer, conv, ffw_out, norm: LayerNormParams::identity(d) })
    }
}

/// A validated stack: block `i` convolves with `dilation_for_block(i, period)`.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockStack {
    cfg: BlockStackConfig,
    blocks: Vec<DcHydraBlock>,
}

impl BlockStack {
    pub fn new(cfg: BlockStackConfig, blocks: Vec<DcHydraBlock>) -> Result<Self> {
        cfg.validate()?;
        if blocks.len() != cfg.num_blocks {
            return Err(MixError::shape("BlockStack", format!("{} blocks", cfg.num_blocks), format!("{} blocks", blocks.len())));
        }
        for (i, block) in blocks.iter().enumerate() {
            let expected = dilation_for_block(i, cfg.dilation_period)?;
            if block.conv.dilation() != expected {
                return Err(MixError::InvalidArgument(format!(
                    "block {i} has dilation {}, schedule requires {expected}",
                    block.conv.dilation()
                )));
            }
            if block.width() != cfg.d_model || block.conv.kernel_size() != cfg.kernel_size {
                return Err(MixError::shape("BlockStack block", format!("d={}, k={}", cfg.d_model, cfg.kernel_size), format!("d={}, k={}", block.width(), block.conv.kernel_size())));
            }
            if block.mixer.kind() != cfg.mixer {
                return Err(MixError::InvalidArgument(format!("block {i} mixer is {}, config says {}", block.mixer.kind(), cfg.mixer)));
            }
        }
        Ok(Self { cfg, blocks })
    }

    pub fn random(cfg: BlockStackConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let blocks = (0..cfg.num_blocks)
            .map(|i| cfg.random_block(i, &mut MixRng::stream(seed, i as u64)))
            .collect::<Result<Vec<_>>>()?;
        Self::new(cfg, blocks)
    }

    pub fn config(&self) -> &BlockStackConfig {
        &self.cfg
    }

    pub fn blocks(&self) -> &[DcHydraBlock] {
        &self.blocks
    }

    pub fn zero_projections(&mut self) {
        self.blocks.iter_mut().for_each(DcHydraBlock::zero_projections);
    }
}

/// Block outputs of [`stack_forward`], one per block.
pub fn stack_forward_trace(x: &FeatureSequence, stack: &BlockStack) -> Result<Vec<FeatureSequence>> {
    let mut outputs = Vec::with_capacity(stack.blocks.len());
    let mut current = x.clone();
    for block in &stack.blocks {
        current = block_forward(&current, block)?;
        outputs.push(current.clone());
    }
    Ok(outputs)
}

pub fn stack_forward(x: &FeatureSequence, stack: &BlockStack) -> Result<FeatureSequence> {
    let mut current = x.clone();
    for block in &stack.blocks {
        current = block_forward(&current, block)?;
    }
    Ok(current)
}
