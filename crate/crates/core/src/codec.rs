//! Per-patch entropy coding: three sub-streams (hyper latent, latent,
//! pixels) and the bit-depth plumbing that ties the model to the coder.
//!
//! The decoder is the canonical algorithm; the encoder runs the same loop
//! with the symbols known, so every network evaluation that feeds a CDF is
//! bit-identical on both sides. Pixel coding order is raster over pixels,
//! channels (r, g1, g2, b) within a pixel, each decoded channel feeding the
//! next channel's mean shift. Replicated padding is never coded; the
//! decoder reconstructs it by edge replication as it goes.

use crate::bitdepth::BitDepthMap;
use crate::coder::{RangeDecoder, RangeEncoder};
use crate::entropy::{self, LazyMixtureCdf};
use crate::error::{Error, Result};
use crate::nn::model::{gaussian_cdf_table, round_quantize_clamped, PatchConditioning, PatchPipeline};
use crate::nn::{ModelConfig, ModelWeights, Tensor};
use crate::raw::RggbPatch;

/// How patch bit depths drive the entropy model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DepthMode {
    /// Model conditioned and evaluated at each patch's own depth.
    Adaptive,
    /// Every patch conditioned and coded at a constant depth.
    Fixed(u8),
    /// Model conditioned at a constant depth, PMF masked and renormalized
    /// to each patch's true support.
    Masked(u8),
}

impl DepthMode {
    pub fn code(self) -> (u8, u8) {
        match self {
            DepthMode::Adaptive => (0, 0),
            DepthMode::Fixed(d) => (1, d),
            DepthMode::Masked(d) => (2, d),
        }
    }

    pub fn from_code(mode: u8, depth: u8) -> Result<Self> {
        match mode {
            0 => Ok(DepthMode::Adaptive),
            1 => Ok(DepthMode::Fixed(depth)),
            2 => Ok(DepthMode::Masked(depth)),
            other => Err(Error::Parse(format!("unknown depth mode {other}"))),
        }
    }

    /// (normalization/conditioning depths, coded alphabet depths).
    fn resolve(self, true_depths: [u8; 4]) -> ([u8; 4], [u8; 4]) {
        match self {
            DepthMode::Adaptive => (true_depths, true_depths),
            DepthMode::Fixed(d) => ([d; 4], [d; 4]),
            DepthMode::Masked(d) => ([d; 4], true_depths),
        }
    }
}

/// Entropy-coded representation of one patch.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PatchStreams {
    pub z: Vec<u8>,
    pub y: Vec<u8>,
    pub pixels: Vec<u8>,
    pub crc: u32,
}

impl PatchStreams {
    pub fn byte_len(&self) -> usize {
        self.z.len() + self.y.len() + self.pixels.len()
    }
}

/// CRC-32 (IEEE) over the patch samples, channel-major. Catches stream
/// corruption that still decodes to structurally valid symbols.
pub fn patch_crc(channels: &[&[u16]]) -> u32 {
    let mut crc = !0u32;
    for ch in channels {
        for &v in *ch {
            for b in v.to_le_bytes() {
                crc ^= u32::from(b);
                for _ in 0..8 {
                    crc = if crc & 1 != 0 {
                        (crc >> 1) ^ 0xEDB8_8320
                    } else {
                        crc >> 1
                    };
                }
            }
        }
    }
    !crc
}

fn latent_sizes(patch_size: usize) -> (usize, usize) {
    let d3 = ModelConfig::down_sizes(patch_size)[3];
    let d4 = d3.div_ceil(2);
    (d3, d4)
}

fn coded_alphabet_max(coded: [u8; 4]) -> u8 {
    coded.into_iter().max().unwrap()
}

pub fn encode_patch(
    weights: &ModelWeights,
    patch: &RggbPatch,
    true_depths: [u8; 4],
    mode: DepthMode,
) -> Result<PatchStreams> {
    let (declared, coded) = mode.resolve(true_depths);
    for c in 0..4 {
        if true_depths[c] > declared[c] {
            return Err(Error::Support(format!(
                "declared depth {} below patch depth {} in channel {c}",
                declared[c], true_depths[c]
            )));
        }
    }
    let crc = patch_crc(&[
        patch.channel(0),
        patch.channel(1),
        patch.channel(2),
        patch.channel(3),
    ]);
    if coded_alphabet_max(coded) == 0 {
        // All-zero patch: header entry only.
        return Ok(PatchStreams {
            crc,
            ..PatchStreams::default()
        });
    }

    let p = patch.patch_size();
    let cond = PatchConditioning::build(weights, patch, declared)?;
    let bound = weights.config.latent_bound;

    let y = weights.analysis(&cond.xnorm, &cond.cond);
    let (yq, _) = round_quantize_clamped(&y, bound);
    let z = weights.hyper_analysis(&yq);
    let (zq, _) = round_quantize_clamped(&z, bound);

    // Hyper latent stream under the per-channel histogram prior.
    let prior_tables = weights.prior_cdf_tables()?;
    let mut z_enc = RangeEncoder::new();
    {
        let (n, zh, zw) = zq.chw();
        for c in 0..n {
            for i in 0..zh * zw {
                let v = zq.data()[c * zh * zw + i] as i32;
                z_enc.encode((v + bound) as u32, &prior_tables[c]);
            }
        }
    }

    // Latent stream under the hyper-synthesized Gaussians.
    let (d3, _) = latent_sizes(p);
    let (mu, sigma) = weights.hyper_synthesis(&zq, (d3, d3));
    let mut y_enc = RangeEncoder::new();
    for i in 0..yq.len() {
        let table = gaussian_cdf_table(mu.data()[i], sigma.data()[i], bound)?;
        let v = yq.data()[i] as i32;
        y_enc.encode((v + bound) as u32, &table);
    }

    // Pixel stream.
    let mut pipeline = PatchPipeline::new(weights, &yq, cond.cond.clone(), p);
    let mut px_enc = RangeEncoder::new();
    for row in 0..p {
        for col in 0..p {
            if patch.is_padded(row, col) {
                continue;
            }
            let j = row * p + col;
            let params = pipeline.pixel_params(&cond.xnorm, row, col);
            let mut observed = [0.0f64; 3];
            for c in 0..4 {
                let v = patch.channel(c)[j];
                if coded[c] > 0 {
                    if u32::from(v) >= 1u32 << coded[c] {
                        return Err(Error::Support(format!(
                            "sample {v} exceeds coded depth {} in channel {c}",
                            coded[c]
                        )));
                    }
                    let mu_hat = params.shifted_mu(c, observed);
                    let cdf = LazyMixtureCdf::new(
                        params.pi(c).to_vec(),
                        mu_hat,
                        params.s(c).to_vec(),
                        declared[c],
                        coded[c],
                    )?;
                    px_enc.encode(u32::from(v), &cdf);
                }
                if c < 3 {
                    observed[c] = entropy::normalize_sample(v, declared[c]);
                }
            }
        }
    }

    Ok(PatchStreams {
        z: z_enc.finish(),
        y: y_enc.finish(),
        pixels: px_enc.finish(),
        crc,
    })
}

/// Geometry of a patch being decoded, all derivable from the container
/// header.
#[derive(Debug, Clone, Copy)]
pub struct PatchGeometry {
    pub patch_size: usize,
    pub origin: (usize, usize),
    pub valid_rows: usize,
    pub valid_cols: usize,
    pub container_bit_depth: u8,
}

impl PatchGeometry {
    fn pad_mask(&self) -> Vec<bool> {
        let p = self.patch_size;
        let mut mask = vec![false; p * p];
        for r in 0..p {
            for c in 0..p {
                mask[r * p + c] = r >= self.valid_rows || c >= self.valid_cols;
            }
        }
        mask
    }
}

pub fn decode_patch(
    weights: &ModelWeights,
    geometry: PatchGeometry,
    true_depths: [u8; 4],
    mode: DepthMode,
    streams: &PatchStreams,
    patch_index: usize,
) -> Result<RggbPatch> {
    let (declared, coded) = mode.resolve(true_depths);
    let p = geometry.patch_size;
    let n = p * p;
    let mask = geometry.pad_mask();

    let fail = |reason: String| Error::Decode {
        patch: patch_index,
        reason,
    };

    if coded_alphabet_max(coded) == 0 {
        let channels: [Vec<u16>; 4] = std::array::from_fn(|_| vec![0u16; n]);
        let crc = patch_crc(&[&channels[0], &channels[1], &channels[2], &channels[3]]);
        if crc != streams.crc {
            return Err(fail("checksum mismatch on zero-depth patch".into()));
        }
        return RggbPatch::new(
            p,
            geometry.origin,
            geometry.container_bit_depth,
            channels,
            mask,
        );
    }

    let bound = weights.config.latent_bound;
    let (d3, d4) = latent_sizes(p);
    let cfg = &weights.config;

    // Hyper latents.
    let prior_tables = weights.prior_cdf_tables()?;
    let mut z_dec = RangeDecoder::new(&streams.z).map_err(|e| fail(e.to_string()))?;
    let mut zq = Tensor::zeros(&[cfg.hyper_channels, d4, d4]);
    for c in 0..cfg.hyper_channels {
        for i in 0..d4 * d4 {
            let sym = z_dec
                .decode(&prior_tables[c])
                .map_err(|e| fail(e.to_string()))?;
            zq.data_mut()[c * d4 * d4 + i] = f64::from(sym as i32 - bound);
        }
    }

    // Latents.
    let (mu, sigma) = weights.hyper_synthesis(&zq, (d3, d3));
    let mut y_dec = RangeDecoder::new(&streams.y).map_err(|e| fail(e.to_string()))?;
    let mut yq = Tensor::zeros(&[cfg.latent_channels, d3, d3]);
    for i in 0..yq.len() {
        let table = gaussian_cdf_table(mu.data()[i], sigma.data()[i], bound)?;
        let sym = y_dec.decode(&table).map_err(|e| fail(e.to_string()))?;
        yq.data_mut()[i] = f64::from(sym as i32 - bound);
    }

    // Pixels, raster order, channels (r, g1, g2, b) within each pixel.
    let cond_vec = weights
        .bit_depth_embedding()
        .condition(declared)
        .map_err(|e| fail(e.to_string()))?;
    let mut pipeline = PatchPipeline::new(weights, &yq, cond_vec, p);
    let mut xnorm = Tensor::zeros(&[4, p, p]);
    let mut channels: [Vec<u16>; 4] = std::array::from_fn(|_| vec![0u16; n]);
    let mut px_dec = if streams.pixels.is_empty() {
        None
    } else {
        Some(RangeDecoder::new(&streams.pixels).map_err(|e| fail(e.to_string()))?)
    };
    for row in 0..p {
        for col in 0..p {
            let j = row * p + col;
            if mask[j] {
                // Edge replication from already-decoded pixels.
                let src_r = row.min(geometry.valid_rows - 1);
                let src_c = col.min(geometry.valid_cols - 1);
                let src = src_r * p + src_c;
                for c in 0..4 {
                    let v = channels[c][src];
                    channels[c][j] = v;
                    xnorm.data_mut()[c * n + j] = entropy::normalize_sample(v, declared[c]);
                }
                continue;
            }
            let params = pipeline.pixel_params(&xnorm, row, col);
            let mut observed = [0.0f64; 3];
            for c in 0..4 {
                let v = if coded[c] > 0 {
                    let mu_hat = params.shifted_mu(c, observed);
                    let cdf = LazyMixtureCdf::new(
                        params.pi(c).to_vec(),
                        mu_hat,
                        params.s(c).to_vec(),
                        declared[c],
                        coded[c],
                    )?;
                    let dec = px_dec
                        .as_mut()
                        .ok_or_else(|| fail("missing pixel stream".into()))?;
                    dec.decode(&cdf).map_err(|e| fail(e.to_string()))? as u16
                } else {
                    0
                };
                channels[c][j] = v;
                let vn = entropy::normalize_sample(v, declared[c]);
                xnorm.data_mut()[c * n + j] = vn;
                if c < 3 {
                    observed[c] = vn;
                }
            }
        }
    }

    let crc = patch_crc(&[&channels[0], &channels[1], &channels[2], &channels[3]]);
    if crc != streams.crc {
        return Err(fail("patch checksum mismatch".into()));
    }
    RggbPatch::new(
        p,
        geometry.origin,
        geometry.container_bit_depth,
        channels,
        mask,
    )
}

/// True model cost of a patch in bits (pixel term plus both latent terms),
/// computed without the coder. Used by rate reports and oracle tests.
pub fn patch_model_bits(
    weights: &ModelWeights,
    patch: &RggbPatch,
    true_depths: [u8; 4],
    mode: DepthMode,
) -> Result<(f64, f64)> {
    let (declared, coded) = mode.resolve(true_depths);
    if coded_alphabet_max(coded) == 0 {
        return Ok((0.0, 0.0));
    }
    let p = patch.patch_size();
    let cond = PatchConditioning::build(weights, patch, declared)?;
    let bound = weights.config.latent_bound;
    let y = weights.analysis(&cond.xnorm, &cond.cond);
    let (yq, _) = round_quantize_clamped(&y, bound);
    let z = weights.hyper_analysis(&yq);
    let (zq, _) = round_quantize_clamped(&z, bound);
    let (d3, _) = latent_sizes(p);
    let (mu, sigma) = weights.hyper_synthesis(&zq, (d3, d3));
    let y_bits =
        crate::nn::model::gaussian_latent_bits(&yq, &mu, &sigma, bound)?;
    let pmfs = weights.prior_pmfs();
    let mut z_bits = 0.0;
    {
        let (nch, zh, zw) = zq.chw();
        for c in 0..nch {
            for i in 0..zh * zw {
                let v = zq.data()[c * zh * zw + i] as i32;
                let idx = (v + bound) as usize;
                z_bits -= pmfs[c][idx].max(f64::MIN_POSITIVE).log2();
            }
        }
    }

    let mut pipeline = PatchPipeline::new(weights, &yq, cond.cond.clone(), p);
    let mut pixel_bits = 0.0;
    for row in 0..p {
        for col in 0..p {
            if patch.is_padded(row, col) {
                continue;
            }
            let j = row * p + col;
            let params = pipeline.pixel_params(&cond.xnorm, row, col);
            let mut observed = [0.0f64; 3];
            for c in 0..4 {
                let v = patch.channel(c)[j];
                if coded[c] > 0 {
                    let mu_hat = params.shifted_mu(c, observed);
                    let base = entropy::logistic_mixture_pmf(
                        u32::from(v),
                        declared[c],
                        params.pi(c),
                        &mu_hat,
                        params.s(c),
                    );
                    let prob = if coded[c] == declared[c] {
                        base
                    } else {
                        let mass = entropy::mixture_lower_cdf(
                            1u32 << coded[c],
                            declared[c],
                            params.pi(c),
                            &mu_hat,
                            params.s(c),
                        );
                        if mass > 0.0 {
                            base / mass
                        } else {
                            base
                        }
                    };
                    pixel_bits -= prob.max(f64::MIN_POSITIVE).log2();
                }
                if c < 3 {
                    observed[c] = entropy::normalize_sample(v, declared[c]);
                }
            }
        }
    }
    Ok((pixel_bits, y_bits + z_bits))
}

/// Resolve a patch's depth row from the transmitted map.
pub fn depths_for_patch(map: &BitDepthMap, index: usize) -> [u8; 4] {
    map.channel_depths(index)
}
