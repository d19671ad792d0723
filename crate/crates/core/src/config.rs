//! Model architecture configuration and named presets.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::nn::ResampleKind;
use crate::schedule::{NoiseSchedule, ScheduleKind, TimeEmbeddingKind};

/// Stride-2 stages in the cross decoder at full scale.
pub const DECODER_STAGES: usize = 6;

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub preset: String,
    pub image_side: usize,
    pub patch: usize,
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl EncoderConfig {
    /// Named capacity presets. `wide1024` and `input1024` are the two readings
    /// of the "1024" ablation column (channel width vs. input side).
    pub fn preset(name: &str) -> Result<Self> {
        let (image_side, patch, width, depth, heads) = match name {
            "desk" => (64, 8, 64, 2, 4),
            "base448" => (448, 16, 768, 12, 12),
            "wide1024" => (448, 16, 1024, 24, 16),
            "input1024" => (1024, 16, 768, 12, 12),
            other => return Err(Error::Config(format!("unknown encoder preset '{other}'"))),
        };
        Ok(EncoderConfig {
            preset: name.to_string(),
            image_side,
            patch,
            width,
            depth,
            heads,
            mlp_ratio: 4,
        })
    }

    pub fn grid_side(&self) -> usize {
        self.image_side / self.patch
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleConfig {
    pub kind: ScheduleKind,
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            kind: ScheduleKind::Linear,
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        match self.kind {
            ScheduleKind::Linear => NoiseSchedule::linear(self.steps, self.beta_start, self.beta_end),
        }
    }
}

/// Full architecture description of a CrossDiff model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub preset: String,
    pub encoder: EncoderConfig,
    /// Side of the noisy mask fed to the diffusion UNet.
    pub diffusion_side: usize,
    /// Channel width of each down/up stage; the last is the bottleneck width.
    pub unet_widths: Vec<usize>,
    pub groups: usize,
    pub attention_heads: usize,
    pub time_kind: TimeEmbeddingKind,
    pub time_dim: usize,
    pub temb_dim: usize,
    pub neck_resample: ResampleKind,
    /// Stride-2 transposed-conv stages; the decoder input is `image_side >> decoder_stages`.
    pub decoder_stages: usize,
    /// Residual blocks after each stride-2 decoder stage.
    pub decoder_blocks_per_stage: usize,
    pub decoder_min_channels: usize,
    /// GroupNorm before every decoder ReLU.
    pub decoder_norm: bool,
    pub schedule: ScheduleConfig,
}

impl ModelConfig {
    pub fn desk() -> Self {
        ModelConfig {
            preset: "desk".into(),
            encoder: EncoderConfig::preset("desk").expect("builtin preset"),
            diffusion_side: 32,
            unet_widths: vec![16, 32],
            groups: 8,
            attention_heads: 4,
            time_kind: TimeEmbeddingKind::Learned,
            time_dim: 128,
            temb_dim: 64,
            neck_resample: ResampleKind::Bilinear,
            decoder_stages: 3,
            decoder_blocks_per_stage: 1,
            decoder_min_channels: 16,
            decoder_norm: true,
            schedule: ScheduleConfig::default(),
        }
    }

    pub fn full() -> Self {
        ModelConfig {
            preset: "full".into(),
            encoder: EncoderConfig::preset("base448").expect("builtin preset"),
            diffusion_side: 128,
            unet_widths: vec![64, 128, 256, 512],
            groups: 8,
            attention_heads: 8,
            time_kind: TimeEmbeddingKind::Learned,
            time_dim: 128,
            temb_dim: 256,
            neck_resample: ResampleKind::Bilinear,
            decoder_stages: DECODER_STAGES,
            decoder_blocks_per_stage: 1,
            decoder_min_channels: 16,
            decoder_norm: true,
            schedule: ScheduleConfig::default(),
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "full" => Ok(Self::full()),
            other => Err(Error::Config(format!("unknown preset '{other}' (expected desk|full)"))),
        }
    }

    pub fn image_side(&self) -> usize {
        self.encoder.image_side
    }

    pub fn bottleneck_side(&self) -> usize {
        self.diffusion_side >> self.unet_widths.len()
    }

    pub fn bottleneck_channels(&self) -> usize {
        *self.unet_widths.last().expect("at least one stage")
    }

    /// Side of the fused grid handed to the cross decoder.
    pub fn decoder_input_side(&self) -> usize {
        self.image_side() >> self.decoder_stages
    }

    pub fn validate(&self) -> Result<()> {
        let e = &self.encoder;
        let bad = |m: String| Err(Error::Config(m));
        if self.unet_widths.is_empty() {
            return bad("unet needs at least one stage".into());
        }
        if e.patch == 0 || !e.image_side.is_multiple_of(e.patch) {
            return bad(format!("image side {} not divisible by patch {}", e.image_side, e.patch));
        }
        if e.heads == 0 || !e.width.is_multiple_of(e.heads) {
            return bad(format!("encoder width {} not divisible by {} heads", e.width, e.heads));
        }
        if !self.diffusion_side.is_multiple_of(1 << self.unet_widths.len()) {
            return bad(format!(
                "diffusion side {} not divisible by 2^{}",
                self.diffusion_side,
                self.unet_widths.len()
            ));
        }
        if self.bottleneck_side() > e.grid_side() {
            return bad(format!(
                "bottleneck side {} exceeds encoder grid {}",
                self.bottleneck_side(),
                e.grid_side()
            ));
        }
        if self.decoder_stages == 0 || self.decoder_stages > 10 || !self.image_side().is_multiple_of(1 << self.decoder_stages) {
            return bad(format!(
                "image side {} must be a multiple of 2^{} for the cross decoder",
                self.image_side(),
                self.decoder_stages
            ));
        }
        for &w in &self.unet_widths {
            if w % self.groups != 0 {
                return bad(format!("unet width {w} not divisible by {} groups", self.groups));
            }
        }
        if !self.bottleneck_channels().is_multiple_of(self.attention_heads) {
            return bad("bottleneck width not divisible by attention heads".into());
        }
        if self.decoder_blocks_per_stage == 0 {
            return bad("decoder needs at least one residual block per stage".into());
        }
        self.schedule.build()?;
        Ok(())
    }

    /// Flat `key=value` form, as recorded in checkpoints and run logs.
    pub fn to_map(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        let widths: Vec<String> = self.unet_widths.iter().map(|w| w.to_string()).collect();
        let e = &self.encoder;
        let entries: [(&str, String); 22] = [
            ("model.preset", self.preset.clone()),
            ("model.encoder_preset", e.preset.clone()),
            ("model.image_side", e.image_side.to_string()),
            ("model.patch", e.patch.to_string()),
            ("model.encoder_width", e.width.to_string()),
            ("model.encoder_depth", e.depth.to_string()),
            ("model.encoder_heads", e.heads.to_string()),
            ("model.diffusion_side", self.diffusion_side.to_string()),
            ("model.unet_widths", widths.join(",")),
            ("model.groups", self.groups.to_string()),
            ("model.attention_heads", self.attention_heads.to_string()),
            ("model.time_embedding", self.time_kind.as_str().into()),
            ("model.time_dim", self.time_dim.to_string()),
            ("model.temb_dim", self.temb_dim.to_string()),
            ("model.neck_resample", self.neck_resample.as_str().into()),
            ("model.decoder_stages", self.decoder_stages.to_string()),
            ("model.decoder_blocks_per_stage", self.decoder_blocks_per_stage.to_string()),
            ("model.decoder_min_channels", self.decoder_min_channels.to_string()),
            ("model.decoder_norm", self.decoder_norm.to_string()),
            ("model.encoder_mlp_ratio", e.mlp_ratio.to_string()),
            ("schedule.kind", self.schedule.kind.as_str().into()),
            ("schedule.steps", self.schedule.steps.to_string()),
        ];
        for (k, v) in entries {
            m.insert(k.to_string(), v);
        }
        m.insert("schedule.beta_start".into(), format!("{:e}", self.schedule.beta_start));
        m.insert("schedule.beta_end".into(), format!("{:e}", self.schedule.beta_end));
        m
    }

    /// Inverse of [`ModelConfig::to_map`]. Keys absent from `m` keep the
    /// value of the `model.preset` named there (default `desk`).
    pub fn from_map(m: &BTreeMap<String, String>) -> Result<Self> {
        let preset = m.get("model.preset").map(String::as_str).unwrap_or("desk");
        let mut c = Self::preset(preset)?;
        if let Some(p) = m.get("model.encoder_preset") {
            c.encoder = EncoderConfig::preset(p)?;
        }
        let num = |k: &str, cur: usize| -> Result<usize> {
            match m.get(k) {
                Some(v) => v
                    .parse()
                    .map_err(|_| Error::Config(format!("{k}: '{v}' is not an integer"))),
                None => Ok(cur),
            }
        };
        let real = |k: &str, cur: f64| -> Result<f64> {
            match m.get(k) {
                Some(v) => v
                    .parse()
                    .map_err(|_| Error::Config(format!("{k}: '{v}' is not a number"))),
                None => Ok(cur),
            }
        };
        c.encoder.image_side = num("model.image_side", c.encoder.image_side)?;
        c.encoder.patch = num("model.patch", c.encoder.patch)?;
        c.encoder.width = num("model.encoder_width", c.encoder.width)?;
        c.encoder.depth = num("model.encoder_depth", c.encoder.depth)?;
        c.encoder.heads = num("model.encoder_heads", c.encoder.heads)?;
        c.encoder.mlp_ratio = num("model.encoder_mlp_ratio", c.encoder.mlp_ratio)?;
        c.diffusion_side = num("model.diffusion_side", c.diffusion_side)?;
        if let Some(v) = m.get("model.unet_widths") {
            c.unet_widths = v
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse()
                        .map_err(|_| Error::Config(format!("model.unet_widths: bad entry '{s}'")))
                })
                .collect::<Result<_>>()?;
        }
        c.groups = num("model.groups", c.groups)?;
        c.attention_heads = num("model.attention_heads", c.attention_heads)?;
        if let Some(v) = m.get("model.time_embedding") {
            c.time_kind = TimeEmbeddingKind::parse(v)?;
        }
        c.time_dim = num("model.time_dim", c.time_dim)?;
        c.temb_dim = num("model.temb_dim", c.temb_dim)?;
        if let Some(v) = m.get("model.neck_resample") {
            c.neck_resample = ResampleKind::parse(v)?;
        }
        c.decoder_stages = num("model.decoder_stages", c.decoder_stages)?;
        c.decoder_blocks_per_stage = num("model.decoder_blocks_per_stage", c.decoder_blocks_per_stage)?;
        c.decoder_min_channels = num("model.decoder_min_channels", c.decoder_min_channels)?;
        if let Some(v) = m.get("model.decoder_norm") {
            c.decoder_norm = v
                .parse()
                .map_err(|_| Error::Config(format!("model.decoder_norm: '{v}' is not true/false")))?;
        }
        if let Some(v) = m.get("schedule.kind") {
            c.schedule.kind = ScheduleKind::parse(v)?;
        }
        c.schedule.steps = num("schedule.steps", c.schedule.steps)?;
        c.schedule.beta_start = real("schedule.beta_start", c.schedule.beta_start)?;
        c.schedule.beta_end = real("schedule.beta_end", c.schedule.beta_end)?;
        c.validate()?;
        Ok(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        ModelConfig::desk().validate().unwrap();
        ModelConfig::full().validate().unwrap();
        let mut c = ModelConfig::full();
        c.encoder = EncoderConfig::preset("input1024").unwrap();
        c.validate().unwrap();
    }

    #[test]
    fn derived_dims() {
        let d = ModelConfig::desk();
        assert_eq!(d.bottleneck_side(), 8);
        assert_eq!(d.encoder.grid_side(), 8);
        assert_eq!(d.decoder_input_side(), 8);
        let f = ModelConfig::full();
        assert_eq!(f.encoder.grid_side(), 28);
        assert_eq!(f.bottleneck_side(), 8);
        assert_eq!(f.decoder_input_side(), 7);
    }

    #[test]
    fn map_round_trip() {
        let mut c = ModelConfig::desk();
        c.schedule.steps = 250;
        c.decoder_blocks_per_stage = 2;
        let back = ModelConfig::from_map(&c.to_map()).unwrap();
        assert_eq!(back, c);
    }
}
