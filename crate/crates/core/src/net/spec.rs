//! Declarative network description and the two builders.

use serde::{Deserialize, Serialize};

use crate::io::volume::NUM_CLASSES;
use crate::plan::{level_stride, PlanConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Unet,
    Raspp,
    Custom,
}

impl std::str::FromStr for ModelKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> crate::Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "unet" => Ok(ModelKind::Unet),
            "raspp" => Ok(ModelKind::Raspp),
            _ => Err(crate::Error::Config(format!("unknown model `{s}` (unet|raspp)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    Instance,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    LeakyRelu { negative_slope: f64 },
}

/// Bare convolution with bias; padding keeps "same" extent at stride 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub dilation: [usize; 3],
}

impl ConvSpec {
    pub fn new(name: impl Into<String>, in_channels: usize, out_channels: usize, kernel: [usize; 3]) -> Self {
        ConvSpec {
            name: name.into(),
            in_channels,
            out_channels,
            kernel,
            stride: [1; 3],
            dilation: [1; 3],
        }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        vec![
            self.out_channels,
            self.in_channels,
            self.kernel[2],
            self.kernel[1],
            self.kernel[0],
        ]
    }

    pub fn fan_in(&self) -> usize {
        self.in_channels * self.kernel.iter().product::<usize>()
    }

    fn params(&self, out: &mut Vec<(String, Vec<usize>)>) {
        out.push((self.weight_name(), self.weight_shape()));
        out.push((self.bias_name(), vec![self.out_channels]));
    }
}

/// conv -> instance norm -> leaky ReLU.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvBlockSpec {
    pub name: String,
    pub conv: ConvSpec,
    pub normalization: Normalization,
    pub activation: Activation,
}

impl ConvBlockSpec {
    pub fn new(name: impl Into<String>, in_channels: usize, out_channels: usize, kernel: [usize; 3]) -> Self {
        let name = name.into();
        ConvBlockSpec {
            conv: ConvSpec::new(format!("{name}.conv"), in_channels, out_channels, kernel),
            name,
            normalization: Normalization::Instance,
            activation: Activation::LeakyRelu {
                negative_slope: crate::net::ops::LEAKY_SLOPE,
            },
        }
    }

    pub fn with_stride(mut self, stride: [usize; 3]) -> Self {
        self.conv.stride = stride;
        self
    }

    pub fn with_dilation(mut self, dilation: [usize; 3]) -> Self {
        self.conv.dilation = dilation;
        self
    }

    pub fn scale_name(&self) -> String {
        format!("{}.norm.scale", self.name)
    }

    pub fn shift_name(&self) -> String {
        format!("{}.norm.shift", self.name)
    }

    fn params(&self, out: &mut Vec<(String, Vec<usize>)>) {
        self.conv.params(out);
        out.push((self.scale_name(), vec![self.conv.out_channels]));
        out.push((self.shift_name(), vec![self.conv.out_channels]));
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Skip {
    Identity,
    Projection(ConvSpec),
}

/// `out = body(x) + skip(x)` where body is two conv blocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualBlockSpec {
    pub name: String,
    pub body: Vec<ConvBlockSpec>,
    pub skip: Skip,
}

impl ResidualBlockSpec {
    pub fn new(name: impl Into<String>, in_ch: usize, out_ch: usize, kernel: [usize; 3], stride: [usize; 3]) -> Self {
        let name = name.into();
        let body = vec![
            ConvBlockSpec::new(format!("{name}.body.0"), in_ch, out_ch, kernel).with_stride(stride),
            ConvBlockSpec::new(format!("{name}.body.1"), out_ch, out_ch, kernel),
        ];
        let skip = if in_ch == out_ch && stride == [1; 3] {
            Skip::Identity
        } else {
            let mut proj = ConvSpec::new(format!("{name}.skip"), in_ch, out_ch, [1; 3]);
            proj.stride = stride;
            Skip::Projection(proj)
        };
        ResidualBlockSpec { name, body, skip }
    }
}

/// One resolution stage: two conv blocks, either plain or residual-wrapped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageBlock {
    Plain(Vec<ConvBlockSpec>),
    Residual(ResidualBlockSpec),
}

impl StageBlock {
    fn build(residual: bool, name: &str, in_ch: usize, out_ch: usize, kernel: [usize; 3], stride: [usize; 3]) -> Self {
        if residual {
            StageBlock::Residual(ResidualBlockSpec::new(name, in_ch, out_ch, kernel, stride))
        } else {
            StageBlock::Plain(vec![
                ConvBlockSpec::new(format!("{name}.0"), in_ch, out_ch, kernel).with_stride(stride),
                ConvBlockSpec::new(format!("{name}.1"), out_ch, out_ch, kernel),
            ])
        }
    }

    pub fn out_channels(&self) -> usize {
        match self {
            StageBlock::Plain(blocks) => blocks.last().map_or(0, |b| b.conv.out_channels),
            StageBlock::Residual(r) => r.body.last().map_or(0, |b| b.conv.out_channels),
        }
    }

    pub fn is_residual(&self) -> bool {
        matches!(self, StageBlock::Residual(_))
    }

    fn params(&self, out: &mut Vec<(String, Vec<usize>)>) {
        match self {
            StageBlock::Plain(blocks) => blocks.iter().for_each(|b| b.params(out)),
            StageBlock::Residual(r) => {
                r.body.iter().for_each(|b| b.params(out));
                if let Skip::Projection(p) = &r.skip {
                    p.params(out);
                }
            }
        }
    }
}

/// Parallel dilated branches fused by a pointwise conv block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AsppSpec {
    pub name: String,
    pub rates: Vec<usize>,
    pub branch_channels: usize,
    pub branches: Vec<ConvBlockSpec>,
    pub fuse: ConvBlockSpec,
}

impl AsppSpec {
    pub fn new(name: impl Into<String>, channels: usize, branch_channels: usize, rates: &[usize], kernel: [usize; 3]) -> Self {
        let name = name.into();
        let branches = rates
            .iter()
            .map(|&r| {
                let dilation = kernel.map(|k| if k > 1 { r } else { 1 });
                ConvBlockSpec::new(format!("{name}.branch_r{r}"), channels, branch_channels, kernel)
                    .with_dilation(dilation)
            })
            .collect();
        let fuse = ConvBlockSpec::new(format!("{name}.fuse"), branch_channels * rates.len(), channels, [1; 3]);
        AsppSpec {
            name,
            rates: rates.to_vec(),
            branch_channels,
            branches,
            fuse,
        }
    }
}

/// Transposed conv with kernel equal to stride.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpsampleSpec {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: [usize; 3],
}

impl UpsampleSpec {
    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        vec![
            self.in_channels,
            self.out_channels,
            self.stride[2],
            self.stride[1],
            self.stride[0],
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderStage {
    pub level: usize,
    pub upsample: UpsampleSpec,
    pub block: StageBlock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub kind: ModelKind,
    pub in_channels: usize,
    pub num_classes: usize,
    pub pools_per_axis: [usize; 3],
    pub stem: Option<ConvBlockSpec>,
    pub aspp: Option<AsppSpec>,
    /// Encoder stages above the bottleneck, shallowest first.
    pub encoder: Vec<StageBlock>,
    pub bottleneck: Option<StageBlock>,
    /// Decoder stages, deepest first; stage for level `s` consumes encoder stage `s`.
    pub decoder: Vec<DecoderStage>,
    pub head: Option<ConvSpec>,
}

impl NetworkSpec {
    pub fn empty() -> Self {
        NetworkSpec {
            kind: ModelKind::Custom,
            in_channels: 1,
            num_classes: NUM_CLASSES,
            pools_per_axis: [0; 3],
            stem: None,
            aspp: None,
            encoder: Vec::new(),
            bottleneck: None,
            decoder: Vec::new(),
            head: None,
        }
    }

    /// Output widths of the encoder stages followed by the bottleneck.
    pub fn stage_widths(&self) -> Vec<usize> {
        self.encoder
            .iter()
            .chain(self.bottleneck.iter())
            .map(StageBlock::out_channels)
            .collect()
    }

    pub fn num_stages(&self) -> usize {
        self.encoder.len() + usize::from(self.bottleneck.is_some())
    }

    /// All conv stages (encoder, bottleneck, decoder).
    pub fn conv_stages(&self) -> impl Iterator<Item = &StageBlock> {
        self.encoder
            .iter()
            .chain(self.bottleneck.iter())
            .chain(self.decoder.iter().map(|d| &d.block))
    }

    /// Every trainable tensor name and shape, in execution order.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        if let Some(s) = &self.stem {
            s.params(&mut out);
        }
        if let Some(a) = &self.aspp {
            a.branches.iter().for_each(|b| b.params(&mut out));
            a.fuse.params(&mut out);
        }
        for s in self.encoder.iter().chain(self.bottleneck.iter()) {
            s.params(&mut out);
        }
        for d in &self.decoder {
            out.push((d.upsample.weight_name(), d.upsample.weight_shape()));
            out.push((d.upsample.bias_name(), vec![d.upsample.out_channels]));
            d.block.params(&mut out);
        }
        if let Some(h) = &self.head {
            h.params(&mut out);
        }
        out
    }

    pub fn to_json(&self) -> crate::Result<String> {
        let mut s = serde_json::to_string_pretty(self).map_err(|e| crate::Error::json("network spec", e))?;
        s.push('\n');
        Ok(s)
    }
}

pub fn param_count(spec: &NetworkSpec) -> usize {
    spec.parameter_shapes()
        .iter()
        .map(|(_, shape)| shape.iter().product::<usize>())
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkOptions {
    pub in_channels: usize,
    pub num_classes: usize,
    pub aspp_rates: Vec<usize>,
    /// Defaults to the base feature width.
    pub aspp_branch_channels: Option<usize>,
    pub residual_bottleneck: bool,
}

impl Default for NetworkOptions {
    fn default() -> Self {
        NetworkOptions {
            in_channels: 1,
            num_classes: NUM_CLASSES,
            aspp_rates: vec![1, 2, 4, 8],
            aspp_branch_channels: None,
            residual_bottleneck: true,
        }
    }
}

fn kernel_for(plan: &PlanConfig) -> [usize; 3] {
    if plan.dimensionality == 2 {
        [3, 3, 1]
    } else {
        [3, 3, 3]
    }
}

/// Shrinks rates whose dilated 3-tap footprint exceeds the smallest patch
/// extent, keeping at least two distinct rates.
pub fn fit_aspp_rates(rates: &[usize], patch: [usize; 3], kernel: [usize; 3]) -> Vec<usize> {
    let extent = (0..3)
        .filter(|&a| kernel[a] > 1)
        .map(|a| patch[a])
        .min()
        .unwrap_or(1);
    let mut out: Vec<usize> = Vec::new();
    for &r in rates {
        let mut r = r.max(1);
        while r > 1 && 2 * r + 1 > extent {
            r /= 2;
        }
        if !out.contains(&r) {
            out.push(r);
        }
    }
    if out.len() < 2 {
        out = vec![1, 2];
    }
    out
}

fn build(plan: &PlanConfig, options: &NetworkOptions, residual: bool) -> NetworkSpec {
    let kernel = kernel_for(plan);
    let depth = plan.num_stages() - 1;
    let widths: Vec<usize> = (0..=depth).map(|l| plan.width_at(l)).collect();

    let (stem, aspp, mut in_ch) = if residual {
        let base = widths[0];
        let rates = fit_aspp_rates(&options.aspp_rates, plan.patch_size, kernel);
        let branch = options.aspp_branch_channels.unwrap_or(base);
        (
            Some(ConvBlockSpec::new("stem", options.in_channels, base, kernel)),
            Some(AsppSpec::new("aspp", base, branch, &rates, kernel)),
            base,
        )
    } else {
        (None, None, options.in_channels)
    };

    let mut encoder = Vec::new();
    for (level, &w) in widths.iter().enumerate().take(depth) {
        encoder.push(StageBlock::build(
            residual,
            &format!("encoder.{level}"),
            in_ch,
            w,
            kernel,
            level_stride(plan.pools_per_axis, level),
        ));
        in_ch = w;
    }
    let bottleneck = StageBlock::build(
        residual && options.residual_bottleneck,
        "bottleneck",
        in_ch,
        widths[depth],
        kernel,
        level_stride(plan.pools_per_axis, depth),
    );

    let mut decoder = Vec::new();
    for level in (0..depth).rev() {
        let below = widths[level + 1];
        let w = widths[level];
        decoder.push(DecoderStage {
            level,
            upsample: UpsampleSpec {
                name: format!("decoder.{level}.up"),
                in_channels: below,
                out_channels: w,
                stride: level_stride(plan.pools_per_axis, level + 1),
            },
            block: StageBlock::build(residual, &format!("decoder.{level}.block"), 2 * w, w, kernel, [1; 3]),
        });
    }

    NetworkSpec {
        kind: if residual { ModelKind::Raspp } else { ModelKind::Unet },
        in_channels: options.in_channels,
        num_classes: options.num_classes,
        pools_per_axis: plan.pools_per_axis,
        stem,
        aspp,
        encoder,
        bottleneck: Some(bottleneck),
        decoder,
        head: Some(ConvSpec::new("head", widths[0], options.num_classes, [1; 3])),
    }
}

/// Plain encoder/decoder U-Net.
pub fn build_unet(plan: &PlanConfig) -> NetworkSpec {
    build_unet_with(plan, &NetworkOptions::default())
}

pub fn build_unet_with(plan: &PlanConfig, options: &NetworkOptions) -> NetworkSpec {
    build(plan, options, false)
}

/// Residual-wrapped stages plus an ASPP block after the stem conv.
pub fn build_raspp(plan: &PlanConfig) -> NetworkSpec {
    build_raspp_with(plan, &NetworkOptions::default())
}

pub fn build_raspp_with(plan: &PlanConfig, options: &NetworkOptions) -> NetworkSpec {
    build(plan, options, true)
}

pub fn build_model(kind: ModelKind, plan: &PlanConfig, options: &NetworkOptions) -> NetworkSpec {
    match kind {
        ModelKind::Raspp => build_raspp_with(plan, options),
        _ => build_unet_with(plan, options),
    }
}
