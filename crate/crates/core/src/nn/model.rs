//! Model evaluation: the deterministic inference path that drives the coder
//! and the tape graph used for training.
//!
//! Decode reconstructs pixels one at a time, so the per-pixel path
//! (causal context + pointwise head) is the canonical implementation; the
//! encoder literally runs the decoder's loop with the symbols known. The
//! training graph reuses the same kernels on whole patches.

use std::sync::Arc;

use rand::Rng;

use super::config::{
    ModelConfig, CTX_KERNEL, GA_KERNEL, GS_KERNEL, HA_KERNEL_1, HA_KERNEL_2, HS_KERNEL_1,
    HS_KERNEL_2, LEAKY_SLOPE,
};
use super::kernels;
use super::tape::{Tape, VarId};
use super::tensor::Tensor;
use super::weights::ModelWeights;
use crate::entropy::{self, CdfTable, MixtureParams};
use crate::error::{Error, Result};
use crate::raw::RggbPatch;

fn lrelu_tensor(mut t: Tensor) -> Tensor {
    for v in t.data_mut() {
        *v = kernels::leaky_relu(*v, LEAKY_SLOPE);
    }
    t
}

/// Normalized patch planes with the conditioning embedding attached.
#[derive(Debug, Clone)]
pub struct PatchConditioning {
    /// [4, P, P] planes scaled to [0, 1] by each channel's bin width.
    pub xnorm: Tensor,
    /// Embedding vector (length E).
    pub cond: Vec<f64>,
    /// Depths used for normalization and conditioning.
    pub declared_depths: [u8; 4],
}

impl PatchConditioning {
    pub fn build(
        weights: &ModelWeights,
        patch: &RggbPatch,
        declared_depths: [u8; 4],
    ) -> Result<Self> {
        let p = patch.patch_size();
        let mut data = vec![0.0; 4 * p * p];
        for c in 0..4 {
            let b = declared_depths[c];
            for (i, &v) in patch.channel(c).iter().enumerate() {
                if u32::from(v) >= 1u32 << b {
                    return Err(Error::Support(format!(
                        "sample {v} exceeds declared depth {b} in channel {c}"
                    )));
                }
                data[c * p * p + i] = entropy::normalize_sample(v, b);
            }
        }
        let cond = weights.bit_depth_embedding().condition(declared_depths)?;
        Ok(Self {
            xnorm: Tensor::from_vec(&[4, p, p], data),
            cond,
            declared_depths,
        })
    }
}

impl ModelWeights {
    /// y = g_a(x, e): embedding broadcast-concatenated to every spatial
    /// position, then three stride-2 convolutions.
    pub fn analysis(&self, xnorm: &Tensor, cond: &[f64]) -> Tensor {
        let (_, h, w) = xnorm.chw();
        let e = self.config.embed_dim;
        debug_assert_eq!(cond.len(), e);
        let mut data = Vec::with_capacity((4 + e) * h * w);
        data.extend_from_slice(xnorm.data());
        for &c in cond {
            data.extend(std::iter::repeat(c).take(h * w));
        }
        let input = Tensor::from_vec(&[4 + e, h, w], data);
        let a1 = lrelu_tensor(kernels::conv2d_forward(
            &input,
            &self.ga[0].weight,
            &self.ga[0].bias,
            2,
            GA_KERNEL / 2,
        ));
        let a2 = lrelu_tensor(kernels::conv2d_forward(
            &a1,
            &self.ga[1].weight,
            &self.ga[1].bias,
            2,
            GA_KERNEL / 2,
        ));
        kernels::conv2d_forward(&a2, &self.ga[2].weight, &self.ga[2].bias, 2, GA_KERNEL / 2)
    }

    /// z = h_a(y_hat).
    pub fn hyper_analysis(&self, yq: &Tensor) -> Tensor {
        let h1 = lrelu_tensor(kernels::conv2d_forward(
            yq,
            &self.ha[0].weight,
            &self.ha[0].bias,
            1,
            HA_KERNEL_1 / 2,
        ));
        kernels::conv2d_forward(&h1, &self.ha[1].weight, &self.ha[1].bias, 2, HA_KERNEL_2 / 2)
    }

    /// (mu, sigma) = h_s(z_hat), sigma through softplus with a floor.
    pub fn hyper_synthesis(&self, zq: &Tensor, target: (usize, usize)) -> (Tensor, Tensor) {
        let up = lrelu_tensor(kernels::deconv2d_forward(
            zq,
            &self.hs[0].weight,
            &self.hs[0].bias,
            2,
            HS_KERNEL_1 / 2,
            target.0,
            target.1,
        ));
        let out = kernels::conv2d_forward(&up, &self.hs[1].weight, &self.hs[1].bias, 1, HS_KERNEL_2 / 2);
        let m = self.config.latent_channels;
        let (_, h, w) = out.chw();
        let plane = h * w;
        let mu = Tensor::from_vec(&[m, h, w], out.data()[..m * plane].to_vec());
        let sigma = Tensor::from_vec(
            &[m, h, w],
            out.data()[m * plane..]
                .iter()
                .map(|&v| kernels::softplus(v) + self.config.sigma_floor)
                .collect(),
        );
        (mu, sigma)
    }

    /// f = g_s(y_hat): three stride-2 transposed convolutions back to the
    /// patch resolution, cropping to the recorded downsampling sizes.
    pub fn synthesis(&self, yq: &Tensor, sizes: &[usize; 4]) -> Tensor {
        let u1 = lrelu_tensor(kernels::deconv2d_forward(
            yq,
            &self.gs[0].weight,
            &self.gs[0].bias,
            2,
            GS_KERNEL / 2,
            sizes[2],
            sizes[2],
        ));
        let u2 = lrelu_tensor(kernels::deconv2d_forward(
            &u1,
            &self.gs[1].weight,
            &self.gs[1].bias,
            2,
            GS_KERNEL / 2,
            sizes[1],
            sizes[1],
        ));
        kernels::deconv2d_forward(
            &u2,
            &self.gs[2].weight,
            &self.gs[2].bias,
            2,
            GS_KERNEL / 2,
            sizes[0],
            sizes[0],
        )
    }

    /// Per-channel PMFs of the hyper-latent histogram prior.
    pub fn prior_pmfs(&self) -> Vec<Vec<f64>> {
        let bins = self.config.prior_bins();
        let n = self.config.hyper_channels;
        let logits = self.prior_logits.data();
        (0..n)
            .map(|c| {
                let mut max = f64::NEG_INFINITY;
                for j in 0..bins {
                    max = max.max(logits[j * n + c]);
                }
                let mut pmf: Vec<f64> = (0..bins).map(|j| (logits[j * n + c] - max).exp()).collect();
                let z: f64 = pmf.iter().sum();
                for p in &mut pmf {
                    *p /= z;
                }
                pmf
            })
            .collect()
    }

    pub fn prior_cdf_tables(&self) -> Result<Vec<CdfTable>> {
        self.prior_pmfs()
            .iter()
            .map(|pmf| entropy::build_cdf_table(pmf, entropy::CDF_PRECISION))
            .collect()
    }
}

/// Round half away from zero and clamp to [-bound, bound]. Returns the
/// number of clamped elements; latents are side information, so saturating
/// them preserves losslessness of the pixels.
pub fn round_quantize_clamped(t: &Tensor, bound: i32) -> (Tensor, usize) {
    let mut clamped = 0;
    let data = t
        .data()
        .iter()
        .map(|&v| {
            let r = super::round_half_away(v);
            let c = r.clamp(-f64::from(bound), f64::from(bound));
            if c != r {
                clamped += 1;
            }
            c
        })
        .collect();
    (Tensor::from_vec(t.dims(), data), clamped)
}

/// Training surrogate for rounding: additive U(-1/2, 1/2) noise.
pub fn noise_quantize<R: Rng>(t: &Tensor, rng: &mut R) -> Tensor {
    Tensor::from_vec(
        t.dims(),
        t.data().iter().map(|&v| v + rng.gen_range(-0.5..0.5)).collect(),
    )
}

/// Bounded-support Gaussian PMF over [-bound, bound] with the tails folded
/// into the extreme symbols.
pub fn gaussian_pmf(mu: f64, sigma: f64, bound: i32) -> Vec<f64> {
    let n = (2 * bound + 1) as usize;
    let mut pmf = Vec::with_capacity(n);
    for k in -bound..=bound {
        let p = if k == -bound {
            super::normal_cdf((f64::from(k) + 0.5 - mu) / sigma)
        } else if k == bound {
            1.0 - super::normal_cdf((f64::from(k) - 0.5 - mu) / sigma)
        } else {
            super::normal_cdf((f64::from(k) + 0.5 - mu) / sigma)
                - super::normal_cdf((f64::from(k) - 0.5 - mu) / sigma)
        };
        pmf.push(p.max(0.0));
    }
    pmf
}

pub fn gaussian_cdf_table(mu: f64, sigma: f64, bound: i32) -> Result<CdfTable> {
    entropy::build_cdf_table(&gaussian_pmf(mu, sigma, bound), entropy::CDF_PRECISION)
}

/// Model cost in bits of quantized latents under their Gaussian.
pub fn gaussian_latent_bits(yq: &Tensor, mu: &Tensor, sigma: &Tensor, bound: i32) -> Result<f64> {
    let mut bits = 0.0;
    for i in 0..yq.len() {
        let v = yq.data()[i];
        if v.abs() > f64::from(bound) {
            return Err(Error::Support(format!("latent {v} outside [-{bound}, {bound}]")));
        }
        let k = v as i32;
        let m = mu.data()[i];
        let s = sigma.data()[i];
        let p = if k == -bound {
            super::normal_cdf((f64::from(k) + 0.5 - m) / s)
        } else if k == bound {
            1.0 - super::normal_cdf((f64::from(k) - 0.5 - m) / s)
        } else {
            super::normal_cdf((f64::from(k) + 0.5 - m) / s)
                - super::normal_cdf((f64::from(k) - 0.5 - m) / s)
        };
        bits -= p.max(f64::MIN_POSITIVE).log2();
    }
    Ok(bits)
}

/// Per-pixel mixture parameters in coding layout.
#[derive(Debug, Clone)]
pub struct PixelParams {
    pub components: usize,
    pub pi: Vec<f64>,
    pub mu: Vec<f64>,
    pub s: Vec<f64>,
    pub beta: Vec<f64>,
}

impl PixelParams {
    pub fn pi(&self, c: usize) -> &[f64] {
        &self.pi[c * self.components..(c + 1) * self.components]
    }

    pub fn mu(&self, c: usize) -> &[f64] {
        &self.mu[c * self.components..(c + 1) * self.components]
    }

    pub fn s(&self, c: usize) -> &[f64] {
        &self.s[c * self.components..(c + 1) * self.components]
    }

    pub fn couplings(&self) -> entropy::PixelCouplings<'_> {
        let k = self.components;
        entropy::PixelCouplings {
            r: &self.beta[0..k],
            g1: &self.beta[k..2 * k],
            g2: &self.beta[2 * k..3 * k],
            b: &self.beta[3 * k..4 * k],
        }
    }

    /// Means for `channel` shifted by the decoded earlier channels.
    pub fn shifted_mu(&self, channel: usize, observed: [f64; 3]) -> Vec<f64> {
        entropy::autoregressive_means(channel, self.mu(channel), &self.couplings(), observed)
    }
}

/// Per-patch coding state: prior features, conditioning, and scratch
/// buffers for the per-pixel context/head evaluation.
pub struct PatchPipeline<'w> {
    weights: &'w ModelWeights,
    pub cond: Vec<f64>,
    pub f: Tensor,
    pub size: usize,
    ctx_a: Vec<f64>,
    ctx_b: Vec<f64>,
    head_in: Vec<f64>,
    head_mid: Vec<f64>,
    head_out: Vec<f64>,
}

impl<'w> PatchPipeline<'w> {
    pub fn new(weights: &'w ModelWeights, yq: &Tensor, cond: Vec<f64>, size: usize) -> Self {
        let sizes = ModelConfig::down_sizes(size);
        let f = weights.synthesis(yq, &sizes);
        let cc = weights.config.context_channels;
        let head_in_len = cc + weights.config.prior_features + weights.config.embed_dim;
        Self {
            weights,
            cond,
            f,
            size,
            ctx_a: vec![0.0; cc],
            ctx_b: vec![0.0; cc],
            head_in: vec![0.0; head_in_len],
            head_mid: vec![0.0; weights.config.head_hidden],
            head_out: vec![0.0; weights.config.head_out_channels()],
        }
    }

    /// Causal context features at (y, x): masked conv, then two pointwise
    /// layers; leaky rectifier after the first two stages.
    pub fn context_at(&mut self, xnorm: &Tensor, y: usize, x: usize) -> &[f64] {
        let w = self.weights;
        kernels::masked_conv2d_at(
            xnorm,
            &w.ctx_masked.weight,
            &w.ctx_masked.bias,
            y,
            x,
            &mut self.ctx_a,
        );
        for v in &mut self.ctx_a {
            *v = kernels::leaky_relu(*v, LEAKY_SLOPE);
        }
        kernels::pointwise_at(&self.ctx_a, &w.ctx_pw[0].weight, &w.ctx_pw[0].bias, &mut self.ctx_b);
        for v in &mut self.ctx_b {
            *v = kernels::leaky_relu(*v, LEAKY_SLOPE);
        }
        kernels::pointwise_at(&self.ctx_b, &w.ctx_pw[1].weight, &w.ctx_pw[1].bias, &mut self.ctx_a);
        &self.ctx_a
    }

    /// Entropy head at (y, x); the decoder calls this with the partially
    /// reconstructed patch and gets exactly the encoder's parameters.
    pub fn pixel_params(&mut self, xnorm: &Tensor, y: usize, x: usize) -> PixelParams {
        let cfg = &self.weights.config;
        let k = cfg.mixture_components;
        let cc = cfg.context_channels;
        let fch = cfg.prior_features;
        self.context_at(xnorm, y, x);
        self.head_in[..cc].copy_from_slice(&self.ctx_a);
        let (_, fh, fw) = self.f.chw();
        debug_assert_eq!((fh, fw), (self.size, self.size));
        for c in 0..fch {
            self.head_in[cc + c] = self.f.data()[(c * fh + y) * fw + x];
        }
        self.head_in[cc + fch..].copy_from_slice(&self.cond);
        kernels::pointwise_at(
            &self.head_in,
            &self.weights.head[0].weight,
            &self.weights.head[0].bias,
            &mut self.head_mid,
        );
        for v in &mut self.head_mid {
            *v = kernels::leaky_relu(*v, LEAKY_SLOPE);
        }
        kernels::pointwise_at(
            &self.head_mid,
            &self.weights.head[1].weight,
            &self.weights.head[1].bias,
            &mut self.head_out,
        );

        let mut pi = vec![0.0; 4 * k];
        let mut mu = vec![0.0; 4 * k];
        let mut s = vec![0.0; 4 * k];
        let mut beta = vec![0.0; 4 * k];
        for c in 0..4 {
            let logits = &self.head_out[c * k..(c + 1) * k];
            let mut max = f64::NEG_INFINITY;
            for &l in logits {
                max = max.max(l);
            }
            let mut z = 0.0;
            for (kk, &l) in logits.iter().enumerate() {
                let e = (l - max).exp();
                pi[c * k + kk] = e;
                z += e;
            }
            for kk in 0..k {
                pi[c * k + kk] /= z;
            }
            for kk in 0..k {
                mu[c * k + kk] = self.head_out[4 * k + c * k + kk];
                s[c * k + kk] =
                    kernels::softplus(self.head_out[8 * k + c * k + kk]) + cfg.scale_floor;
                beta[c * k + kk] = self.head_out[12 * k + c * k + kk];
            }
        }
        PixelParams {
            components: k,
            pi,
            mu,
            s,
            beta,
        }
    }

    /// Full-patch parameter extraction (encode side / reporting).
    pub fn all_pixel_params(&mut self, xnorm: &Tensor) -> MixtureParams {
        let p = self.size;
        let k = self.weights.config.mixture_components;
        let n = p * p;
        let mut pi = vec![0.0; n * 4 * k];
        let mut mu = vec![0.0; n * 4 * k];
        let mut s = vec![0.0; n * 4 * k];
        let mut beta = vec![0.0; n * 4 * k];
        for y in 0..p {
            for x in 0..p {
                let params = self.pixel_params(xnorm, y, x);
                let j = y * p + x;
                let dst = j * 4 * k..(j + 1) * 4 * k;
                pi[dst.clone()].copy_from_slice(&params.pi);
                mu[dst.clone()].copy_from_slice(&params.mu);
                s[dst.clone()].copy_from_slice(&params.s);
                beta[dst].copy_from_slice(&params.beta);
            }
        }
        MixtureParams::new(k, n, pi, mu, s, beta).expect("head output satisfies invariants")
    }
}

/// How the training graph treats quantization of the latents.
pub enum LatentMode {
    /// Additive uniform noise drawn outside the graph.
    Noise { y: Tensor, z: Tensor },
    /// Straight-through rounding: forward rounds (and clamps), gradients
    /// pass through. Makes the graph agree with the inference path.
    Round,
}

pub struct LossGraph {
    pub tape: Tape,
    pub loss: VarId,
    pub pixel_bits: VarId,
    pub y_bits: VarId,
    pub z_bits: VarId,
    /// Leaf var per weight tensor, in `for_each_param` order.
    pub param_vars: Vec<(&'static str, VarId)>,
    /// Bayer-pixel denominator used to scale the loss.
    pub denominator: f64,
}

/// Build the rate graph for one patch: R = R_latent + R_pixel in bits per
/// Bayer pixel. Padded pixels are excluded from both the pixel term and
/// the denominator.
pub fn build_loss_graph(
    weights: &ModelWeights,
    patch: &RggbPatch,
    depths: [u8; 4],
    mode: LatentMode,
) -> Result<LossGraph> {
    let cfg = &weights.config;
    let k = cfg.mixture_components;
    let e = cfg.embed_dim;
    let p = patch.patch_size();
    let n = p * p;
    let sizes = ModelConfig::down_sizes(p);
    let d3 = sizes[3];

    let mut tape = Tape::new();
    let mut param_vars = Vec::new();
    weights.for_each_param(|name, t| {
        param_vars.push((name, 0usize));
        let _ = t;
    });
    // Leaves must be created through &mut tape, so enumerate again.
    let mut params = Vec::new();
    weights.for_each_param(|name, t| params.push((name, t.clone())));
    for (i, (name, t)) in params.into_iter().enumerate() {
        let id = tape.leaf(t, true);
        param_vars[i] = (name, id);
    }
    let by_name: std::collections::HashMap<&str, VarId> =
        param_vars.iter().map(|&(n, v)| (n, v)).collect();
    let var = |name: &str| -> VarId { *by_name.get(name).unwrap() };

    // Normalized input planes (constants).
    let mut xnorm_data = vec![0.0; 4 * n];
    for c in 0..4 {
        for (i, &v) in patch.channel(c).iter().enumerate() {
            if u32::from(v) >= 1u32 << depths[c] {
                return Err(Error::Support(format!(
                    "sample {v} exceeds depth {} in channel {c}",
                    depths[c]
                )));
            }
            xnorm_data[c * n + i] = entropy::normalize_sample(v, depths[c]);
        }
    }
    let xnorm = tape.constant(Tensor::from_vec(&[4, p, p], xnorm_data.clone()));

    // Conditioning embedding: mean of the four per-channel rows.
    let embed_var = var("embed");
    let row_map: Vec<usize> = depths
        .iter()
        .flat_map(|&d| (0..e).map(move |j| d as usize * e + j))
        .collect();
    let rows = tape.gather_map(embed_var, Arc::new(row_map), &[4, e]);
    let summed = tape.sum_axis0(rows);
    let quarter = tape.constant(Tensor::from_vec(&[e], vec![0.25; e]));
    let cond = tape.mul(summed, quarter);
    let bcast_map: Vec<usize> = (0..e).flat_map(|j| std::iter::repeat(j).take(n)).collect();
    let cond_bcast = tape.gather_map(cond, Arc::new(bcast_map), &[e, p, p]);

    // Analysis transform.
    let ga_in = tape.concat_axis0(&[xnorm, cond_bcast]);
    let a1 = tape.conv2d(ga_in, var("ga0.w"), var("ga0.b"), 2, GA_KERNEL / 2);
    let a1 = tape.leaky_relu(a1, LEAKY_SLOPE);
    let a2 = tape.conv2d(a1, var("ga1.w"), var("ga1.b"), 2, GA_KERNEL / 2);
    let a2 = tape.leaky_relu(a2, LEAKY_SLOPE);
    let y = tape.conv2d(a2, var("ga2.w"), var("ga2.b"), 2, GA_KERNEL / 2);

    // Quantization surrogate for y.
    let y_tilde = match &mode {
        LatentMode::Noise { y: ny, .. } => {
            let noise = tape.constant(ny.clone());
            tape.add(y, noise)
        }
        LatentMode::Round => {
            let (rounded, _) = round_quantize_clamped(tape.value(y), cfg.latent_bound);
            let offset = Tensor::from_vec(
                rounded.dims(),
                rounded
                    .data()
                    .iter()
                    .zip(tape.value(y).data())
                    .map(|(&r, &v)| r - v)
                    .collect(),
            );
            let off = tape.constant(offset);
            tape.add(y, off)
        }
    };

    // Hyper branch.
    let h1 = tape.conv2d(y_tilde, var("ha0.w"), var("ha0.b"), 1, HA_KERNEL_1 / 2);
    let h1 = tape.leaky_relu(h1, LEAKY_SLOPE);
    let z = tape.conv2d(h1, var("ha1.w"), var("ha1.b"), 2, HA_KERNEL_2 / 2);
    let z_tilde = match &mode {
        LatentMode::Noise { z: nz, .. } => {
            let noise = tape.constant(nz.clone());
            tape.add(z, noise)
        }
        LatentMode::Round => {
            let (rounded, _) = round_quantize_clamped(tape.value(z), cfg.latent_bound);
            let offset = Tensor::from_vec(
                rounded.dims(),
                rounded
                    .data()
                    .iter()
                    .zip(tape.value(z).data())
                    .map(|(&r, &v)| r - v)
                    .collect(),
            );
            let off = tape.constant(offset);
            tape.add(z, off)
        }
    };

    let up = tape.deconv2d(z_tilde, var("hs0.w"), var("hs0.b"), 2, HS_KERNEL_1 / 2, d3, d3);
    let up = tape.leaky_relu(up, LEAKY_SLOPE);
    let musig = tape.conv2d(up, var("hs1.w"), var("hs1.b"), 1, HS_KERNEL_2 / 2);
    let m = cfg.latent_channels;
    let plane3 = d3 * d3;
    let mu_map: Vec<usize> = (0..m * plane3).collect();
    let sig_map: Vec<usize> = (m * plane3..2 * m * plane3).collect();
    let mu_y = tape.gather_map(musig, Arc::new(mu_map), &[m, d3, d3]);
    let sig_raw = tape.gather_map(musig, Arc::new(sig_map), &[m, d3, d3]);
    let sig_sp = tape.softplus(sig_raw);
    let sig_floor = tape.constant(Tensor::from_vec(
        &[m, d3, d3],
        vec![cfg.sigma_floor; m * plane3],
    ));
    let sigma_y = tape.add(sig_sp, sig_floor);

    // R_latent for y: interval mass of the noisy latent under N(mu, sigma).
    let half = tape.constant(Tensor::from_vec(&[m, d3, d3], vec![0.5; m * plane3]));
    let upper = {
        let shifted = tape.add(y_tilde, half);
        let centered = tape.sub(shifted, mu_y);
        let scaled = tape.div(centered, sigma_y);
        tape.normal_cdf(scaled)
    };
    let lower = {
        let shifted = tape.sub(y_tilde, half);
        let centered = tape.sub(shifted, mu_y);
        let scaled = tape.div(centered, sigma_y);
        tape.normal_cdf(scaled)
    };
    let p_y = tape.sub(upper, lower);
    let log_py = tape.log2_clamped(p_y, 1e-30);
    let y_bits_sum = tape.sum_all(log_py);
    let neg1 = tape.constant(Tensor::scalar(-1.0));
    let y_bits = tape.mul(y_bits_sum, neg1);

    // R_latent for z under the histogram prior.
    let prior = var("prior_logits");
    let prior_pmf = tape.softmax_axis0(prior);
    let p_z = tape.hist_interp(prior_pmf, z_tilde, cfg.latent_bound);
    let log_pz = tape.log2_clamped(p_z, 1e-30);
    let z_bits_sum = tape.sum_all(log_pz);
    let neg1b = tape.constant(Tensor::scalar(-1.0));
    let z_bits = tape.mul(z_bits_sum, neg1b);

    // Prior features and causal context.
    let f_feats = {
        let u1 = tape.deconv2d(y_tilde, var("gs0.w"), var("gs0.b"), 2, GS_KERNEL / 2, sizes[2], sizes[2]);
        let u1 = tape.leaky_relu(u1, LEAKY_SLOPE);
        let u2 = tape.deconv2d(u1, var("gs1.w"), var("gs1.b"), 2, GS_KERNEL / 2, sizes[1], sizes[1]);
        let u2 = tape.leaky_relu(u2, LEAKY_SLOPE);
        tape.deconv2d(u2, var("gs2.w"), var("gs2.b"), 2, GS_KERNEL / 2, sizes[0], sizes[0])
    };
    let _ = CTX_KERNEL;
    let ctx = {
        let c1 = tape.masked_conv2d(xnorm, var("ctx_masked.w"), var("ctx_masked.b"));
        let c1 = tape.leaky_relu(c1, LEAKY_SLOPE);
        let c2 = tape.conv2d(c1, var("ctx_pw0.w"), var("ctx_pw0.b"), 1, 0);
        let c2 = tape.leaky_relu(c2, LEAKY_SLOPE);
        tape.conv2d(c2, var("ctx_pw1.w"), var("ctx_pw1.b"), 1, 0)
    };
    let head_in = tape.concat_axis0(&[ctx, f_feats, cond_bcast]);
    let hmid = tape.conv2d(head_in, var("head0.w"), var("head0.b"), 1, 0);
    let hmid = tape.leaky_relu(hmid, LEAKY_SLOPE);
    let head_out = tape.conv2d(hmid, var("head1.w"), var("head1.b"), 1, 0); // [16K, p, p]

    // Pixel rate: channel-autoregressive mixture likelihood of the true
    // samples under the head's parameters.
    let valid: Vec<f64> = patch.pad_mask().iter().map(|&m| if m { 0.0 } else { 1.0 }).collect();
    let valid_count: f64 = valid.iter().sum();
    let valid_const = tape.constant(Tensor::from_vec(&[p, p], valid));

    let block_map = |block: usize, c: usize| -> Arc<Vec<usize>> {
        let base = (block * 4 + c) * k;
        Arc::new(
            (0..k)
                .flat_map(|kk| (0..n).map(move |j| (base + kk) * n + j))
                .collect(),
        )
    };

    let mut pixel_bits_terms: Vec<VarId> = Vec::new();
    for c in 0..4 {
        let b = depths[c];
        if b == 0 {
            continue;
        }
        let delta = entropy::bin_width(b);
        let pi_logits = tape.gather_map(head_out, block_map(0, c), &[k, p, p]);
        let pi = tape.softmax_axis0(pi_logits);
        let mu_base = tape.gather_map(head_out, block_map(1, c), &[k, p, p]);
        let s_raw = tape.gather_map(head_out, block_map(2, c), &[k, p, p]);
        let s_sp = tape.softplus(s_raw);
        let s_floor = tape.constant(Tensor::from_vec(&[k, p, p], vec![cfg.scale_floor; k * n]));
        let s = tape.add(s_sp, s_floor);

        // Autoregressive mean shifts from the true earlier channels.
        let bcast_plane = |vals: &[f64]| -> Tensor {
            let mut data = Vec::with_capacity(k * n);
            for _ in 0..k {
                data.extend_from_slice(vals);
            }
            Tensor::from_vec(&[k, p, p], data)
        };
        let xn = |cc: usize| -> &[f64] { &xnorm_data[cc * n..(cc + 1) * n] };
        let mu_hat = match c {
            0 => mu_base,
            1 => {
                let beta_r = tape.gather_map(head_out, block_map(3, 0), &[k, p, p]);
                let xr = tape.constant(bcast_plane(xn(0)));
                let shift = tape.mul(beta_r, xr);
                tape.add(mu_base, shift)
            }
            2 => {
                let beta_g1 = tape.gather_map(head_out, block_map(3, 1), &[k, p, p]);
                let xg1 = tape.constant(bcast_plane(xn(1)));
                let shift = tape.mul(beta_g1, xg1);
                tape.add(mu_base, shift)
            }
            3 => {
                let beta_g2 = tape.gather_map(head_out, block_map(3, 2), &[k, p, p]);
                let beta_b = tape.gather_map(head_out, block_map(3, 3), &[k, p, p]);
                let xr = tape.constant(bcast_plane(xn(0)));
                let greens: Vec<f64> = xn(1)
                    .iter()
                    .zip(xn(2))
                    .map(|(&a, &b)| (a + b) / 2.0)
                    .collect();
                let xg = tape.constant(bcast_plane(&greens));
                let shift_r = tape.mul(beta_g2, xr);
                let shift_g = tape.mul(beta_b, xg);
                let mu1 = tape.add(mu_base, shift_r);
                tape.add(mu1, shift_g)
            }
            _ => unreachable!(),
        };

        // Bin-edge arguments and tail masks.
        let samples = patch.channel(c);
        let mut lo_edge = Vec::with_capacity(k * n);
        let mut hi_edge = Vec::with_capacity(k * n);
        let mut lower_clip = Vec::with_capacity(k * n);
        let mut upper_clip = Vec::with_capacity(k * n);
        let top = (1u32 << b) - 1;
        for _kk in 0..k {
            for &v in samples.iter() {
                let xv = entropy::normalize_sample(v, b);
                lo_edge.push(xv - delta / 2.0);
                hi_edge.push(xv + delta / 2.0);
                lower_clip.push(u32::from(v) == 0);
                upper_clip.push(u32::from(v) == top);
            }
        }
        let lo_c = tape.constant(Tensor::from_vec(&[k, p, p], lo_edge));
        let hi_c = tape.constant(Tensor::from_vec(&[k, p, p], hi_edge));
        let lo_arg = {
            let d = tape.sub(lo_c, mu_hat);
            tape.div(d, s)
        };
        let hi_arg = {
            let d = tape.sub(hi_c, mu_hat);
            tape.div(d, s)
        };
        let comp = tape.edge_sigmoid_diff(lo_arg, hi_arg, Arc::new(lower_clip), Arc::new(upper_clip));
        let weighted = tape.mul(pi, comp);
        let prob = tape.sum_axis0(weighted);
        let logp = tape.log2_clamped(prob, 1e-30);
        let masked = tape.mul(logp, valid_const);
        let total = tape.sum_all(masked);
        pixel_bits_terms.push(total);
    }

    let pixel_bits = if pixel_bits_terms.is_empty() {
        tape.constant(Tensor::scalar(0.0))
    } else {
        let mut acc = pixel_bits_terms[0];
        for &t in &pixel_bits_terms[1..] {
            acc = tape.add(acc, t);
        }
        let neg = tape.constant(Tensor::scalar(-1.0));
        tape.mul(acc, neg)
    };

    let denominator = 4.0 * valid_count;
    let latent = tape.add(y_bits, z_bits);
    let total_bits = tape.add(latent, pixel_bits);
    let scale = tape.constant(Tensor::scalar(1.0 / denominator));
    let loss = tape.mul(total_bits, scale);

    Ok(LossGraph {
        tape,
        loss,
        pixel_bits,
        y_bits,
        z_bits,
        param_vars,
        denominator,
    })
}
