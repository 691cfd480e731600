//! Architecture hyperparameters. Everything lives in one serializable
//! struct so a weights file fully describes its network.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Leaky-rectifier slope used everywhere.
pub const LEAKY_SLOPE: f64 = 0.01;

/// Kernel sizes are fixed by the architecture; channel counts are not.
pub const GA_KERNEL: usize = 5;
pub const HA_KERNEL_1: usize = 3;
pub const HA_KERNEL_2: usize = 5;
pub const HS_KERNEL_1: usize = 5;
pub const HS_KERNEL_2: usize = 3;
pub const GS_KERNEL: usize = 5;
pub const CTX_KERNEL: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Mixture components K per pixel-channel.
    pub mixture_components: usize,
    /// Bit-depth embedding width E.
    pub embed_dim: usize,
    /// Channels of the two hidden analysis stages.
    pub ga_channels: [usize; 2],
    /// Latent channels M.
    pub latent_channels: usize,
    /// Hyper-latent channels N.
    pub hyper_channels: usize,
    /// Prior-feature channels F produced by synthesis.
    pub prior_features: usize,
    /// Causal context feature channels.
    pub context_channels: usize,
    /// Hidden width of the pointwise entropy head.
    pub head_hidden: usize,
    /// Quantized latents are clamped to [-L, L].
    pub latent_bound: i32,
    /// Mixture scale floor.
    pub scale_floor: f64,
    /// Gaussian sigma floor.
    pub sigma_floor: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            mixture_components: 5,
            embed_dim: 16,
            ga_channels: [32, 48],
            latent_channels: 64,
            hyper_channels: 32,
            prior_features: 32,
            context_channels: 32,
            head_hidden: 64,
            latent_bound: 64,
            scale_floor: crate::entropy::S_MIN,
            sigma_floor: 1e-6,
        }
    }
}

impl ModelConfig {
    /// Small profile for fast CPU training and tests.
    pub fn desk() -> Self {
        Self {
            mixture_components: 3,
            embed_dim: 8,
            ga_channels: [12, 16],
            latent_channels: 16,
            hyper_channels: 8,
            prior_features: 16,
            context_channels: 12,
            head_hidden: 32,
            latent_bound: 32,
            ..Self::default()
        }
    }

    /// Minimal profile for fuzzing and round-trip suites.
    pub fn tiny() -> Self {
        Self {
            mixture_components: 2,
            embed_dim: 4,
            ga_channels: [6, 8],
            latent_channels: 8,
            hyper_channels: 4,
            prior_features: 8,
            context_channels: 8,
            head_hidden: 16,
            latent_bound: 16,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=10).contains(&self.mixture_components) {
            return Err(Error::Config(format!(
                "mixture components must be in [1,10], got {}",
                self.mixture_components
            )));
        }
        let positive = [
            self.embed_dim,
            self.ga_channels[0],
            self.ga_channels[1],
            self.latent_channels,
            self.hyper_channels,
            self.prior_features,
            self.context_channels,
            self.head_hidden,
        ];
        if positive.iter().any(|&v| v == 0) {
            return Err(Error::Config("all channel counts must be positive".into()));
        }
        if self.latent_bound < 1 || self.latent_bound > 32767 {
            return Err(Error::Config(format!(
                "latent bound must be in [1, 32767], got {}",
                self.latent_bound
            )));
        }
        if self.scale_floor <= 0.0 || self.sigma_floor <= 0.0 {
            return Err(Error::Config("floors must be positive".into()));
        }
        Ok(())
    }

    /// Bins of the hyper-latent histogram prior.
    pub fn prior_bins(&self) -> usize {
        2 * self.latent_bound as usize + 1
    }

    /// Channels emitted by the entropy head: {pi, mu, s, beta} x 4 channels
    /// x K components.
    pub fn head_out_channels(&self) -> usize {
        16 * self.mixture_components
    }

    /// Spatial sizes along the analysis downsampling path for a patch of
    /// side `p`: [input, after ga1, after ga2, after ga3].
    pub fn down_sizes(p: usize) -> [usize; 4] {
        let d1 = p.div_ceil(2);
        let d2 = d1.div_ceil(2);
        let d3 = d2.div_ceil(2);
        [p, d1, d2, d3]
    }
}
