use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Nested dilated layers per residual fusion module.
pub const RFM_LAYERS: usize = 4;
/// Nested layers spanned by each shortcut.
pub const SHORTCUT_SPAN: usize = 2;
/// Total downsampling of the encoder (four 2x poolings).
pub const ENCODER_STRIDE: usize = 16;

/// Declarative architecture description. Everything needed to rebuild a
/// model with identical parameter names and shapes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSpec {
    pub in_channels: usize,
    /// Output channels of RFM1..RFM4; the last one is `c_f`.
    pub stage_channels: Vec<usize>,
    /// Dilation groups `K` inside every nested layer; group k uses 2^(k-1).
    pub dilation_groups: usize,
    /// Pyramid pooling levels.
    pub ppm_levels: usize,
    /// Sub-pixel rearrangement factor `r`.
    pub spcm_factor: usize,
    pub bilinear_factor: usize,
    pub init_seed: u64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            in_channels: 3,
            stage_channels: vec![32, 64, 128, 128],
            dilation_groups: 4,
            ppm_levels: 4,
            spcm_factor: 4,
            bilinear_factor: 4,
            init_seed: 0,
        }
    }
}

impl ModelSpec {
    /// Same layout as the default with every stage width replaced.
    pub fn with_widths(widths: [usize; 4]) -> Self {
        ModelSpec {
            stage_channels: widths.to_vec(),
            ..Default::default()
        }
    }

    pub fn feature_channels(&self) -> usize {
        *self.stage_channels.last().unwrap_or(&0)
    }

    pub fn rfm_specs(&self) -> Vec<RfmSpec> {
        let mut inputs = vec![self.in_channels];
        inputs.extend(&self.stage_channels[..self.stage_channels.len().saturating_sub(1)]);
        inputs
            .into_iter()
            .zip(&self.stage_channels)
            .map(|(i, &o)| RfmSpec {
                in_channels: i,
                out_channels: o,
                dilation_groups: self.dilation_groups,
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 {
            return Err(Error::Config("in_channels must be >= 1".into()));
        }
        if self.stage_channels.len() != 4 {
            return Err(Error::Config(format!(
                "expected 4 RFM stages, got {}",
                self.stage_channels.len()
            )));
        }
        for spec in self.rfm_specs() {
            spec.validate()?;
        }
        if self.ppm_levels == 0 {
            return Err(Error::Config("ppm_levels must be >= 1".into()));
        }
        if self.spcm_factor == 0 || self.spcm_factor * self.bilinear_factor != ENCODER_STRIDE {
            return Err(Error::Config(format!(
                "spcm factor {} x bilinear factor {} must equal {ENCODER_STRIDE}",
                self.spcm_factor, self.bilinear_factor
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RfmSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub dilation_groups: usize,
}

impl RfmSpec {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 || self.dilation_groups == 0 {
            return Err(Error::Config(format!("degenerate RFM {self:?}")));
        }
        if self.out_channels % self.dilation_groups != 0 {
            return Err(Error::Config(format!(
                "RFM out_channels {} not divisible by {} dilation groups",
                self.out_channels, self.dilation_groups
            )));
        }
        Ok(())
    }

    /// Dilation of group `k` (0-based).
    pub fn dilation(&self, k: usize) -> usize {
        1 << k
    }

    pub fn group_width(&self) -> usize {
        self.out_channels / self.dilation_groups
    }
}

/// Pooling kernel of pyramid level `k` (0-based) on an `extent`-long axis:
/// `ceil(extent / 2^k)`, at least 1.
pub fn ppm_kernel(extent: usize, k: usize) -> usize {
    extent.div_ceil(1 << k).max(1)
}
