use std::fmt;
use std::str::FromStr;

use super::NetworkError;
use crate::tensor::BatchNormOptions;

/// Architecture family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    SiamUnetAttnDiff,
    SiamUnetAttnConc,
    /// Early fusion: both frames concatenated into a single U-Net.
    FcEf,
    FcSiamDiff,
    FcSiamConc,
}

/// How the two encoder streams are merged on the damage path.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fusion {
    Diff,
    Conc,
}

/// Differencing rule for [`Fusion::Diff`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Differencing {
    Absolute,
    Signed,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::SiamUnetAttnDiff,
        Variant::SiamUnetAttnConc,
        Variant::FcEf,
        Variant::FcSiamDiff,
        Variant::FcSiamConc,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::SiamUnetAttnDiff => "siam-unet-attn-diff",
            Variant::SiamUnetAttnConc => "siam-unet-attn-conc",
            Variant::FcEf => "fc-ef",
            Variant::FcSiamDiff => "fc-siam-diff",
            Variant::FcSiamConc => "fc-siam-conc",
        }
    }

    pub fn fusion(self) -> Option<Fusion> {
        match self {
            Variant::SiamUnetAttnDiff | Variant::FcSiamDiff => Some(Fusion::Diff),
            Variant::SiamUnetAttnConc | Variant::FcSiamConc => Some(Fusion::Conc),
            Variant::FcEf => None,
        }
    }

    /// Owns the building-segmentation decoder and the attention block.
    pub fn is_siam_unet_attn(self) -> bool {
        matches!(self, Variant::SiamUnetAttnDiff | Variant::SiamUnetAttnConc)
    }

    pub fn has_attention(self) -> bool {
        self.is_siam_unet_attn()
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = NetworkError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| NetworkError::UnknownVariant(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    pub variant: Variant,
    /// Number of down (and up) blocks.
    pub depth: usize,
    /// Square input patch side in pixels.
    pub input_size: usize,
    /// Output channels of each encoder block, shallowest first.
    pub channel_widths: Vec<usize>,
    /// Side of the fused feature map the attention block is applied to.
    pub attention_resolution: usize,
    pub num_damage_classes: usize,
    pub seg_channels: usize,
    pub differencing: Differencing,
    pub batch_norm: BatchNormOptions,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            variant: Variant::SiamUnetAttnConc,
            depth: 8,
            input_size: 256,
            channel_widths: vec![16, 32, 64, 128, 128, 128, 128, 128],
            attention_resolution: 32,
            num_damage_classes: 5,
            seg_channels: 1,
            differencing: Differencing::Absolute,
            batch_norm: BatchNormOptions::default(),
        }
    }
}

impl NetworkConfig {
    /// Small configuration for CPU-scale experiments: depth 4 on 64×64
    /// patches with attention at 8×8.
    pub fn desk(variant: Variant) -> Self {
        Self {
            variant,
            depth: 4,
            input_size: 64,
            channel_widths: vec![8, 16, 32, 32],
            attention_resolution: 8,
            ..Self::default()
        }
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self
    }

    /// Spatial side at encoder level `i` (`0` = input, `depth` = bottleneck).
    pub fn resolution(&self, level: usize) -> usize {
        self.input_size >> level
    }

    /// Level at which the attention block sits.
    pub fn attention_level(&self) -> Option<usize> {
        (0..=self.depth).find(|&l| self.resolution(l) == self.attention_resolution)
    }

    pub fn validate(&self) -> Result<(), NetworkError> {
        let bad = |m: String| Err(NetworkError::InvalidConfig(m));
        if self.depth == 0 {
            return bad("depth must be at least 1".into());
        }
        if self.channel_widths.len() != self.depth {
            return bad(format!(
                "channel_widths has {} entries for depth {}",
                self.channel_widths.len(),
                self.depth
            ));
        }
        if self.channel_widths.contains(&0) {
            return bad("channel widths must be positive".into());
        }
        if self.depth >= usize::BITS as usize || !self.input_size.is_multiple_of(1usize << self.depth) || self.input_size == 0 {
            return bad(format!(
                "input_size {} is not divisible by 2^{}",
                self.input_size, self.depth
            ));
        }
        if self.variant.has_attention() && self.attention_level().is_none() {
            return bad(format!(
                "attention_resolution {} is not an encoder resolution of a {}-pixel input",
                self.attention_resolution, self.input_size
            ));
        }
        if self.num_damage_classes < 2 {
            return bad("num_damage_classes must be at least 2".into());
        }
        if self.seg_channels != 1 {
            return bad("seg_channels must be 1 (sigmoid building mask)".into());
        }
        Ok(())
    }

    /// `key=value` lines in a fixed order.
    pub fn to_kv(&self) -> Vec<(String, String)> {
        let widths = self
            .channel_widths
            .iter()
            .map(usize::to_string)
            .collect::<Vec<_>>()
            .join(",");
        vec![
            ("variant".into(), self.variant.name().into()),
            ("depth".into(), self.depth.to_string()),
            ("input_size".into(), self.input_size.to_string()),
            ("channel_widths".into(), widths),
            ("attention_resolution".into(), self.attention_resolution.to_string()),
            ("num_damage_classes".into(), self.num_damage_classes.to_string()),
            ("seg_channels".into(), self.seg_channels.to_string()),
            (
                "differencing".into(),
                match self.differencing {
                    Differencing::Absolute => "absolute",
                    Differencing::Signed => "signed",
                }
                .into(),
            ),
            ("bn_epsilon".into(), self.batch_norm.epsilon.to_string()),
            ("bn_momentum".into(), self.batch_norm.momentum.to_string()),
        ]
    }

    /// Applies one `key=value` setting. Returns `false` for keys this type
    /// does not own.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool, NetworkError> {
        let parse_err = |what: &str| NetworkError::InvalidConfig(format!("{key}: invalid {what} '{value}'"));
        let num = |v: &str| v.trim().parse::<usize>().map_err(|_| parse_err("integer"));
        let real = |v: &str| v.trim().parse::<f64>().map_err(|_| parse_err("number"));
        match key {
            "variant" => self.variant = value.trim().parse()?,
            "depth" => self.depth = num(value)?,
            "input_size" => self.input_size = num(value)?,
            "channel_widths" => {
                self.channel_widths = value.split(',').map(num).collect::<Result<_, _>>()?;
            }
            "attention_resolution" => self.attention_resolution = num(value)?,
            "num_damage_classes" => self.num_damage_classes = num(value)?,
            "seg_channels" => self.seg_channels = num(value)?,
            "differencing" => {
                self.differencing = match value.trim() {
                    "absolute" => Differencing::Absolute,
                    "signed" => Differencing::Signed,
                    _ => return Err(parse_err("differencing")),
                }
            }
            "bn_epsilon" => self.batch_norm.epsilon = real(value)?,
            "bn_momentum" => self.batch_norm.momentum = real(value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Parses `key=value` pairs; unknown keys are rejected.
    pub fn from_kv<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self, NetworkError> {
        let mut cfg = Self::default();
        for (k, v) in pairs {
            if !cfg.set(k, v)? {
                return Err(NetworkError::InvalidConfig(format!("unknown key '{k}'")));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}
