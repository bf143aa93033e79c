//! The harmonization network.
//!
//! A U-Net style backbone turns a composite image plus its foreground mask
//! into a harmonized image. Alongside it, per-channel Lab encoders compress
//! the composite's L, a and b planes into control codes, and control modules
//! after each decoder stage re-style the decoder features with dynamic
//! (modulated + demodulated) convolutions driven by those codes. A family of
//! ablation modes switches individual pieces of that pipeline on and off.
//!
//! All shapes derive from [`DucoNetConfig`]. Spatial sizes follow one rule:
//! the encoder has four stages, the first at full resolution and the next
//! three each halving it, so `input_size` must be divisible by 8; the three
//! decoder stages mirror the halvings back up.

mod checkpoint;
mod forward;
mod params;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use forward::{
    backbone_forward, demodulate_kernel, downsample_mask, duconet_forward,
    duconet_forward_with_maps, encode_channel, fuse_weight_maps, lab_cm_apply, loss_and_gradients,
    modulate_kernel, style_block_apply, FusionMode,
};
pub use params::{init_params, CmStage, ConvLayer, Encoder, FcLayer, Model, ModelParams, StyleBlock};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Which parts of the model are active; mirrors the ablation table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationMode {
    /// U-Net backbone alone, RGB in / RGB out.
    BackboneOnly,
    /// Backbone alone operating on normalized Lab planes; the output is
    /// converted back to RGB (differentiably) before any loss.
    BackboneLab,
    /// One control encoder over the whole Lab image, one style block per
    /// decoder stage.
    WholeLabCm,
    /// Like [`AblationMode::WholeLabCm`] but the encoder sees RGB channels.
    WholeRgbCm,
    /// No control modules; Lab encoder features join the decoder through
    /// skip connections instead.
    SkipConnectionLab,
    /// Only the L channel encoder and its style block.
    SingleL,
    /// Only the a channel encoder and its style block.
    SingleA,
    /// Only the b channel encoder and its style block.
    SingleB,
    /// All three channels, styled features fused by plain averaging.
    CmAvg,
    /// The full model: pixel-wise softmax weight maps fuse the three styled
    /// features.
    CmPix,
}

impl AblationMode {
    pub const ALL: [AblationMode; 10] = [
        AblationMode::BackboneOnly,
        AblationMode::BackboneLab,
        AblationMode::WholeLabCm,
        AblationMode::WholeRgbCm,
        AblationMode::SkipConnectionLab,
        AblationMode::SingleL,
        AblationMode::SingleA,
        AblationMode::SingleB,
        AblationMode::CmAvg,
        AblationMode::CmPix,
    ];

    /// Kebab-case name, the same spelling serde and the CLI use.
    pub fn name(self) -> &'static str {
        match self {
            AblationMode::BackboneOnly => "backbone-only",
            AblationMode::BackboneLab => "backbone-lab",
            AblationMode::WholeLabCm => "whole-lab-cm",
            AblationMode::WholeRgbCm => "whole-rgb-cm",
            AblationMode::SkipConnectionLab => "skip-connection-lab",
            AblationMode::SingleL => "single-l",
            AblationMode::SingleA => "single-a",
            AblationMode::SingleB => "single-b",
            AblationMode::CmAvg => "cm-avg",
            AblationMode::CmPix => "cm-pix",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown ablation mode {:?}", s)))
    }

    /// Number of control encoders (with pooled code heads) this mode owns.
    pub(crate) fn n_code_encoders(self) -> usize {
        match self {
            AblationMode::BackboneOnly
            | AblationMode::BackboneLab
            | AblationMode::SkipConnectionLab => 0,
            AblationMode::WholeLabCm
            | AblationMode::WholeRgbCm
            | AblationMode::SingleL
            | AblationMode::SingleA
            | AblationMode::SingleB => 1,
            AblationMode::CmAvg | AblationMode::CmPix => 3,
        }
    }

    /// Input channels of each control encoder: channel plane + mask, or the
    /// whole 3-plane image + mask.
    pub(crate) fn code_encoder_in_channels(self) -> usize {
        match self {
            AblationMode::WholeLabCm | AblationMode::WholeRgbCm => 4,
            _ => 2,
        }
    }

    /// Style blocks per control-module stage (0 disables the modules).
    pub(crate) fn blocks_per_stage(self) -> usize {
        match self {
            AblationMode::BackboneOnly
            | AblationMode::BackboneLab
            | AblationMode::SkipConnectionLab => 0,
            AblationMode::WholeLabCm
            | AblationMode::WholeRgbCm
            | AblationMode::SingleL
            | AblationMode::SingleA
            | AblationMode::SingleB => 1,
            AblationMode::CmAvg | AblationMode::CmPix => 3,
        }
    }

    pub(crate) fn has_fusion_head(self) -> bool {
        matches!(self, AblationMode::CmPix)
    }

    pub(crate) fn has_lab_skips(self) -> bool {
        matches!(self, AblationMode::SkipConnectionLab)
    }
}

/// Model hyperparameters; every tensor shape in [`ModelParams`] follows from
/// these.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DucoNetConfig {
    /// Square input resolution; must be divisible by 8.
    pub input_size: usize,
    /// Widths of the four encoder stages.
    pub encoder_widths: [usize; 4],
    /// Widths of the three decoder stages, bottleneck outward.
    pub decoder_widths: [usize; 3],
    /// Length of each control code.
    pub code_dim: usize,
    /// Channel count styled at each decoder stage; must equal
    /// `decoder_widths`.
    pub style_block_widths: [usize; 3],
    /// Demodulation guard constant.
    pub epsilon: f64,
    pub ablation_mode: AblationMode,
    /// Negative-side slope of every leaky ReLU.
    pub leaky_slope: f64,
    /// Seed for parameter initialization.
    pub seed: u64,
}

impl DucoNetConfig {
    /// Small configuration that trains in minutes on one core.
    pub fn desk(mode: AblationMode, seed: u64) -> Self {
        Self {
            input_size: 64,
            encoder_widths: [16, 32, 64, 128],
            decoder_widths: [64, 32, 16],
            code_dim: 64,
            style_block_widths: [64, 32, 16],
            epsilon: 1e-8,
            ablation_mode: mode,
            leaky_slope: 0.2,
            seed,
        }
    }

    /// Full-scale configuration (256px, 256-dim codes, 128/64/32 stages).
    pub fn full_scale(mode: AblationMode, seed: u64) -> Self {
        Self {
            input_size: 256,
            encoder_widths: [32, 64, 128, 256],
            decoder_widths: [128, 64, 32],
            code_dim: 256,
            style_block_widths: [128, 64, 32],
            epsilon: 1e-8,
            ablation_mode: mode,
            leaky_slope: 0.2,
            seed,
        }
    }

    /// Minimal configuration for gradient checks: 8x8 input, widths <= 8.
    pub fn tiny(mode: AblationMode, seed: u64) -> Self {
        Self {
            input_size: 8,
            encoder_widths: [4, 4, 8, 8],
            decoder_widths: [8, 6, 4],
            code_dim: 4,
            style_block_widths: [8, 6, 4],
            epsilon: 1e-8,
            ablation_mode: mode,
            leaky_slope: 0.2,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 || self.input_size % 8 != 0 {
            return Err(Error::InvalidConfig(format!(
                "input_size {} must be a positive multiple of 8",
                self.input_size
            )));
        }
        if self.encoder_widths.iter().any(|&w| w == 0)
            || self.decoder_widths.iter().any(|&w| w == 0)
        {
            return Err(Error::InvalidConfig("zero channel width".into()));
        }
        if self.style_block_widths != self.decoder_widths {
            return Err(Error::InvalidConfig(format!(
                "style_block_widths {:?} must equal decoder_widths {:?}",
                self.style_block_widths, self.decoder_widths
            )));
        }
        if self.code_dim == 0 {
            return Err(Error::InvalidConfig("code_dim must be positive".into()));
        }
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(Error::InvalidConfig(format!("epsilon {} must be positive", self.epsilon)));
        }
        if !(0.0..1.0).contains(&self.leaky_slope) {
            return Err(Error::InvalidConfig(format!(
                "leaky_slope {} must lie in [0, 1)",
                self.leaky_slope
            )));
        }
        Ok(())
    }

    /// Spatial side length of decoder stage `t` (0-based): S/4, S/2, S.
    pub(crate) fn stage_size(&self, t: usize) -> usize {
        self.input_size >> (2 - t)
    }
}

/// Per-channel control codes for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct ControlCodes {
    pub s_l: Vec<f64>,
    pub s_a: Vec<f64>,
    pub s_b: Vec<f64>,
}

impl ControlCodes {
    pub fn validate(&self, code_dim: usize) -> Result<()> {
        for (name, v) in [("s_l", &self.s_l), ("s_a", &self.s_a), ("s_b", &self.s_b)] {
            if v.len() != code_dim {
                return Err(Error::ShapeMismatch {
                    op: "ControlCodes",
                    detail: format!("{} has length {}, expected {}", name, v.len(), code_dim),
                });
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::InvalidConfig(format!("{} contains non-finite values", name)));
            }
        }
        Ok(())
    }
}
