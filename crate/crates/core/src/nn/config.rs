use serde::{Deserialize, Serialize};

use crate::autodiff::ConvSpec;
use crate::error::{Error, Result};

/// Multi-head self-attention: `n_heads` heads of width `model_dim / n_heads`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SaConfig {
    pub n_heads: usize,
    pub model_dim: usize,
}

impl SaConfig {
    pub fn new(n_heads: usize, model_dim: usize) -> Result<Self> {
        let cfg = SaConfig { n_heads, model_dim };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.model_dim == 0 || !self.model_dim.is_multiple_of(self.n_heads) {
            return Err(Error::invalid(format!(
                "model_dim {} must be a positive multiple of n_heads {}",
                self.model_dim, self.n_heads
            )));
        }
        Ok(())
    }

    /// Per-head width `c`.
    pub fn key_dim(&self) -> usize {
        self.model_dim / self.n_heads
    }
}

impl Default for SaConfig {
    /// 12 heads of width 3.
    fn default() -> Self {
        SaConfig {
            n_heads: 12,
            model_dim: 36,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvLayer {
    pub filters: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvLayer {
    pub fn spec(&self) -> ConvSpec {
        ConvSpec {
            stride: self.stride,
            padding: self.padding,
        }
    }

    fn out_size(&self, n: usize) -> Option<usize> {
        (n + 2 * self.padding)
            .checked_sub(self.kernel)
            .map(|v| v / self.stride + 1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractorConfig {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub conv: Vec<ConvLayer>,
    /// Attention over the spatial positions of the last conv map; its output
    /// is concatenated to the conv features before the dense layer.
    pub sa: Option<SaConfig>,
    pub output_dim: usize,
}

impl ExtractorConfig {
    /// Three stride-2 6x6 conv layers with 32 filters, 12-head attention and a
    /// 128-wide output, for a `2 x height x width` input.
    pub fn reference(height: usize, width: usize) -> Self {
        let layer = ConvLayer {
            filters: 32,
            kernel: 6,
            stride: 2,
            padding: 2,
        };
        ExtractorConfig {
            in_channels: 2,
            height,
            width,
            conv: vec![layer; 3],
            sa: Some(SaConfig::default()),
            output_dim: 128,
        }
    }

    /// Spatial size after each conv layer (index 0 is the input).
    pub fn spatial_sizes(&self) -> Result<Vec<(usize, usize)>> {
        let mut sizes = vec![(self.height, self.width)];
        for (i, l) in self.conv.iter().enumerate() {
            if l.stride == 0 || l.filters == 0 || l.kernel == 0 {
                return Err(Error::invalid(format!("conv layer {i} has a zero size")));
            }
            let (h, w) = *sizes.last().expect("non-empty");
            match (l.out_size(h), l.out_size(w)) {
                (Some(oh), Some(ow)) if oh >= 1 && ow >= 1 => sizes.push((oh, ow)),
                _ => return Err(Error::invalid(format!("conv layer {i} does not fit a {h}x{w} input"))),
            }
        }
        Ok(sizes)
    }

    pub fn validate(&self) -> Result<()> {
        if self.output_dim == 0 || self.in_channels == 0 || self.conv.is_empty() {
            return Err(Error::invalid(
                "extractor needs inputs, at least one conv layer and B >= 1",
            ));
        }
        self.spatial_sizes()?;
        if let Some(sa) = &self.sa {
            sa.validate()?;
        }
        Ok(())
    }

    pub fn last_channels(&self) -> usize {
        self.conv.last().map_or(self.in_channels, |l| l.filters)
    }

    /// Number of spatial positions (attention tokens) after the conv stack.
    pub fn n_tokens(&self) -> Result<usize> {
        let (h, w) = *self.spatial_sizes()?.last().expect("non-empty");
        Ok(h * w)
    }

    /// Width of the flattened vector entering the dense layer.
    pub fn flat_dim(&self) -> Result<usize> {
        let per_token = self.last_channels() + self.sa.map_or(0, |s| s.model_dim);
        Ok(self.n_tokens()? * per_token)
    }

    /// Checks that transposed convolutions retrace the conv sizes exactly, so
    /// the decoder reproduces the input shape.
    pub fn validate_mirror(&self) -> Result<()> {
        let sizes = self.spatial_sizes()?;
        for (i, l) in self.conv.iter().enumerate() {
            let (h, w) = sizes[i];
            let (oh, ow) = sizes[i + 1];
            let back = |o: usize| ((o - 1) * l.stride + l.kernel).checked_sub(2 * l.padding);
            if back(oh) != Some(h) || back(ow) != Some(w) {
                return Err(Error::invalid(format!(
                    "conv layer {i} ({h}x{w} -> {oh}x{ow}) cannot be mirrored by a transposed convolution"
                )));
            }
        }
        Ok(())
    }
}

/// Dense head layout shared by the location estimator and domain classifier.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EstimatorConfig {
    pub input_dim: usize,
    pub widths: Vec<usize>,
}

impl EstimatorConfig {
    /// Layers of 128, 64 and 2 units on a `input_dim`-wide feature.
    pub fn reference(input_dim: usize) -> Self {
        EstimatorConfig {
            input_dim,
            widths: vec![128, 64, 2],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.widths.contains(&0) {
            return Err(Error::invalid("dense layers need positive widths"));
        }
        if self.widths.last() != Some(&2) {
            return Err(Error::invalid("the last dense layer must have 2 units"));
        }
        Ok(())
    }
}

/// Everything needed to rebuild a model's graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub extractor: ExtractorConfig,
    pub head: EstimatorConfig,
}

impl Architecture {
    pub fn reference(n_antennas: usize, n_subcarriers: usize) -> Self {
        let extractor = ExtractorConfig::reference(n_antennas, n_subcarriers);
        let head = EstimatorConfig::reference(extractor.output_dim);
        Architecture { extractor, head }
    }

    pub fn validate(&self) -> Result<()> {
        self.extractor.validate()?;
        self.head.validate()?;
        if self.head.input_dim != self.extractor.output_dim {
            return Err(Error::invalid("head input must match the extractor output"));
        }
        Ok(())
    }
}
