//! Model parameters, their binary file format, and the content hash the
//! container verifies at decode time.
//!
//! Values are stored as little-endian f32 and widened to f64 in memory;
//! every in-memory weight is kept exactly f32-representable so the encoder,
//! the decoder, and a freshly loaded file always evaluate identically.

use sha2::{Digest, Sha256};

use super::config::{
    ModelConfig, CTX_KERNEL, GA_KERNEL, GS_KERNEL, HA_KERNEL_1, HA_KERNEL_2, HS_KERNEL_1,
    HS_KERNEL_2,
};
use super::tensor::Tensor;
use crate::bitdepth::{BitDepthEmbedding, DEPTH_TABLE_ROWS};
use crate::error::{Error, Result};

pub const WEIGHTS_MAGIC: [u8; 4] = *b"RWWT";
pub const WEIGHTS_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl ConvLayer {
    fn init<R: rand::Rng>(dims: &[usize], fan_in: usize, rng: &mut R) -> Self {
        let std = (2.0 / fan_in as f64).sqrt();
        let weight = Tensor::from_vec(
            dims,
            (0..dims.iter().product())
                .map(|_| super::sample_standard_normal(rng) * std)
                .collect(),
        );
        // bias channel count: conv weights are [Cout, Cin, k, k], deconv
        // weights are [Cin, Cout, k, k]; callers pass bias length explicitly
        // via init_with_bias.
        let bias = Tensor::zeros(&[dims[0]]);
        Self { weight, bias }
    }

    fn init_deconv<R: rand::Rng>(dims: &[usize], fan_in: usize, rng: &mut R) -> Self {
        let mut layer = Self::init(dims, fan_in, rng);
        layer.bias = Tensor::zeros(&[dims[1]]);
        layer
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub config: ModelConfig,
    /// Bit-depth embedding table [17, E].
    pub embed: Tensor,
    pub ga: [ConvLayer; 3],
    pub ha: [ConvLayer; 2],
    /// hs[0] is a transposed conv.
    pub hs: [ConvLayer; 2],
    /// All three are transposed convs.
    pub gs: [ConvLayer; 3],
    pub ctx_masked: ConvLayer,
    pub ctx_pw: [ConvLayer; 2],
    pub head: [ConvLayer; 2],
    /// Hyper-latent histogram prior logits [bins, N].
    pub prior_logits: Tensor,
}

impl ModelWeights {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = super::seeded_rng(seed);
        let e = config.embed_dim;
        let [c1, c2] = config.ga_channels;
        let m = config.latent_channels;
        let n = config.hyper_channels;
        let f = config.prior_features;
        let cc = config.context_channels;
        let hh = config.head_hidden;
        let k = GA_KERNEL;

        let embed_scale = 1.0 / (e as f64).sqrt();
        let embed = Tensor::from_vec(
            &[DEPTH_TABLE_ROWS, e],
            (0..DEPTH_TABLE_ROWS * e)
                .map(|_| super::sample_standard_normal(&mut rng) * embed_scale)
                .collect(),
        );

        let ga = [
            ConvLayer::init(&[c1, 4 + e, k, k], (4 + e) * k * k, &mut rng),
            ConvLayer::init(&[c2, c1, k, k], c1 * k * k, &mut rng),
            ConvLayer::init(&[m, c2, k, k], c2 * k * k, &mut rng),
        ];
        let ha = [
            ConvLayer::init(
                &[n, m, HA_KERNEL_1, HA_KERNEL_1],
                m * HA_KERNEL_1 * HA_KERNEL_1,
                &mut rng,
            ),
            ConvLayer::init(
                &[n, n, HA_KERNEL_2, HA_KERNEL_2],
                n * HA_KERNEL_2 * HA_KERNEL_2,
                &mut rng,
            ),
        ];
        let hs = [
            ConvLayer::init_deconv(
                &[n, n, HS_KERNEL_1, HS_KERNEL_1],
                n * HS_KERNEL_1 * HS_KERNEL_1,
                &mut rng,
            ),
            ConvLayer::init(
                &[2 * m, n, HS_KERNEL_2, HS_KERNEL_2],
                n * HS_KERNEL_2 * HS_KERNEL_2,
                &mut rng,
            ),
        ];
        let gs = [
            ConvLayer::init_deconv(&[m, c2, GS_KERNEL, GS_KERNEL], m * GS_KERNEL * GS_KERNEL, &mut rng),
            ConvLayer::init_deconv(&[c2, c1, GS_KERNEL, GS_KERNEL], c2 * GS_KERNEL * GS_KERNEL, &mut rng),
            ConvLayer::init_deconv(&[c1, f, GS_KERNEL, GS_KERNEL], c1 * GS_KERNEL * GS_KERNEL, &mut rng),
        ];
        let ctx_masked = ConvLayer::init(
            &[cc, 4, CTX_KERNEL, CTX_KERNEL],
            4 * CTX_KERNEL * CTX_KERNEL,
            &mut rng,
        );
        let ctx_pw = [
            ConvLayer::init(&[cc, cc, 1, 1], cc, &mut rng),
            ConvLayer::init(&[cc, cc, 1, 1], cc, &mut rng),
        ];
        let head_in = cc + f + e;
        let mut head_out = ConvLayer::init(&[config.head_out_channels(), hh, 1, 1], hh, &mut rng);
        // Start the head near zero so the initial mixtures are broad.
        for v in head_out.weight.data_mut() {
            *v *= 0.1;
        }
        let head = [
            ConvLayer::init(&[hh, head_in, 1, 1], head_in, &mut rng),
            head_out,
        ];
        let prior_logits = Tensor::zeros(&[config.prior_bins(), n]);

        let mut weights = Self {
            config,
            embed,
            ga,
            ha,
            hs,
            gs,
            ctx_masked,
            ctx_pw,
            head,
            prior_logits,
        };
        weights.canonicalize();
        Ok(weights)
    }

    /// Visit every parameter tensor in the fixed serialization order.
    pub fn for_each_param(&self, mut f: impl FnMut(&'static str, &Tensor)) {
        f("embed", &self.embed);
        for (i, l) in self.ga.iter().enumerate() {
            f(GA_NAMES[i].0, &l.weight);
            f(GA_NAMES[i].1, &l.bias);
        }
        for (i, l) in self.ha.iter().enumerate() {
            f(HA_NAMES[i].0, &l.weight);
            f(HA_NAMES[i].1, &l.bias);
        }
        for (i, l) in self.hs.iter().enumerate() {
            f(HS_NAMES[i].0, &l.weight);
            f(HS_NAMES[i].1, &l.bias);
        }
        for (i, l) in self.gs.iter().enumerate() {
            f(GS_NAMES[i].0, &l.weight);
            f(GS_NAMES[i].1, &l.bias);
        }
        f("ctx_masked.w", &self.ctx_masked.weight);
        f("ctx_masked.b", &self.ctx_masked.bias);
        for (i, l) in self.ctx_pw.iter().enumerate() {
            f(CTX_PW_NAMES[i].0, &l.weight);
            f(CTX_PW_NAMES[i].1, &l.bias);
        }
        for (i, l) in self.head.iter().enumerate() {
            f(HEAD_NAMES[i].0, &l.weight);
            f(HEAD_NAMES[i].1, &l.bias);
        }
        f("prior_logits", &self.prior_logits);
    }

    pub fn for_each_param_mut(&mut self, mut f: impl FnMut(&'static str, &mut Tensor)) {
        f("embed", &mut self.embed);
        for (i, l) in self.ga.iter_mut().enumerate() {
            f(GA_NAMES[i].0, &mut l.weight);
            f(GA_NAMES[i].1, &mut l.bias);
        }
        for (i, l) in self.ha.iter_mut().enumerate() {
            f(HA_NAMES[i].0, &mut l.weight);
            f(HA_NAMES[i].1, &mut l.bias);
        }
        for (i, l) in self.hs.iter_mut().enumerate() {
            f(HS_NAMES[i].0, &mut l.weight);
            f(HS_NAMES[i].1, &mut l.bias);
        }
        for (i, l) in self.gs.iter_mut().enumerate() {
            f(GS_NAMES[i].0, &mut l.weight);
            f(GS_NAMES[i].1, &mut l.bias);
        }
        f("ctx_masked.w", &mut self.ctx_masked.weight);
        f("ctx_masked.b", &mut self.ctx_masked.bias);
        for (i, l) in self.ctx_pw.iter_mut().enumerate() {
            f(CTX_PW_NAMES[i].0, &mut l.weight);
            f(CTX_PW_NAMES[i].1, &mut l.bias);
        }
        for (i, l) in self.head.iter_mut().enumerate() {
            f(HEAD_NAMES[i].0, &mut l.weight);
            f(HEAD_NAMES[i].1, &mut l.bias);
        }
        f("prior_logits", &mut self.prior_logits);
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.for_each_param(|_, t| n += t.len());
        n
    }

    /// Clamp every value to its f32 representation.
    pub fn canonicalize(&mut self) {
        self.for_each_param_mut(|_, t| {
            for v in t.data_mut() {
                *v = f64::from(*v as f32);
            }
        });
    }

    /// View of the embedding table as the lookup type used at inference.
    pub fn bit_depth_embedding(&self) -> BitDepthEmbedding {
        BitDepthEmbedding::new(self.config.embed_dim, self.embed.data().to_vec())
            .expect("embedding tensor shape is validated at construction")
    }

    /// Serialized form without the trailing hash.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&WEIGHTS_MAGIC);
        out.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
        let cfg = &self.config;
        for v in [
            cfg.mixture_components,
            cfg.embed_dim,
            cfg.ga_channels[0],
            cfg.ga_channels[1],
            cfg.latent_channels,
            cfg.hyper_channels,
            cfg.prior_features,
            cfg.context_channels,
            cfg.head_hidden,
        ] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend_from_slice(&cfg.latent_bound.to_le_bytes());
        out.extend_from_slice(&cfg.scale_floor.to_le_bytes());
        out.extend_from_slice(&cfg.sigma_floor.to_le_bytes());
        self.for_each_param(|_, t| {
            out.extend_from_slice(&(t.dims().len() as u32).to_le_bytes());
            for &d in t.dims() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        });
        out
    }

    pub fn content_hash(&self) -> [u8; 32] {
        let digest = Sha256::digest(self.canonical_bytes());
        digest.into()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut bytes = self.canonical_bytes();
        let hash = Sha256::digest(&bytes);
        bytes.extend_from_slice(&hash);
        bytes
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 + 2 + 9 * 4 + 4 + 16 + 32 {
            return Err(Error::Truncated("weights file too short".into()));
        }
        if bytes[0..4] != WEIGHTS_MAGIC {
            return Err(Error::Parse("bad weights magic".into()));
        }
        let (body, stored_hash) = bytes.split_at(bytes.len() - 32);
        let hash = Sha256::digest(body);
        if hash.as_slice() != stored_hash {
            return Err(Error::Parse("weights file hash mismatch".into()));
        }
        let mut cur = Cursor {
            body,
            pos: 4,
        };
        let version = u16::from_le_bytes(cur.take(2)?.try_into().unwrap());
        if version != WEIGHTS_VERSION {
            return Err(Error::Parse(format!("unsupported weights version {version}")));
        }
        let mixture_components = cur.next_u32()? as usize;
        let embed_dim = cur.next_u32()? as usize;
        let ga0 = cur.next_u32()? as usize;
        let ga1 = cur.next_u32()? as usize;
        let latent_channels = cur.next_u32()? as usize;
        let hyper_channels = cur.next_u32()? as usize;
        let prior_features = cur.next_u32()? as usize;
        let context_channels = cur.next_u32()? as usize;
        let head_hidden = cur.next_u32()? as usize;
        let latent_bound = i32::from_le_bytes(cur.take(4)?.try_into().unwrap());
        let scale_floor = f64::from_le_bytes(cur.take(8)?.try_into().unwrap());
        let sigma_floor = f64::from_le_bytes(cur.take(8)?.try_into().unwrap());
        let config = ModelConfig {
            mixture_components,
            embed_dim,
            ga_channels: [ga0, ga1],
            latent_channels,
            hyper_channels,
            prior_features,
            context_channels,
            head_hidden,
            latent_bound,
            scale_floor,
            sigma_floor,
        };
        config.validate()?;

        // Template instance defines the expected tensor shapes.
        let mut weights = ModelWeights::init(config, 0)?;
        let mut err = None;
        weights.for_each_param_mut(|name, t| {
            if err.is_some() {
                return;
            }
            if let Err(e) = cur.read_tensor(name, t) {
                err = Some(e);
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        if cur.pos != body.len() {
            return Err(Error::Parse("trailing bytes in weights file".into()));
        }
        Ok(weights)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes)
    }
}

struct Cursor<'a> {
    body: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.body.len() {
            return Err(Error::Truncated("weights file body".into()));
        }
        let s = &self.body[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn next_u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn read_tensor(&mut self, name: &str, t: &mut Tensor) -> Result<()> {
        let ndims = self.next_u32()? as usize;
        if ndims != t.dims().len() {
            return Err(Error::Parse(format!("tensor {name} rank mismatch")));
        }
        for &expect in t.dims().to_vec().iter() {
            let d = self.next_u32()? as usize;
            if d != expect {
                return Err(Error::Parse(format!("tensor {name} shape mismatch")));
            }
        }
        for v in t.data_mut() {
            *v = f64::from(f32::from_le_bytes(self.take(4)?.try_into().unwrap()));
        }
        Ok(())
    }
}

const GA_NAMES: [(&str, &str); 3] = [("ga0.w", "ga0.b"), ("ga1.w", "ga1.b"), ("ga2.w", "ga2.b")];
const HA_NAMES: [(&str, &str); 2] = [("ha0.w", "ha0.b"), ("ha1.w", "ha1.b")];
const HS_NAMES: [(&str, &str); 2] = [("hs0.w", "hs0.b"), ("hs1.w", "hs1.b")];
const GS_NAMES: [(&str, &str); 3] = [("gs0.w", "gs0.b"), ("gs1.w", "gs1.b"), ("gs2.w", "gs2.b")];
const CTX_PW_NAMES: [(&str, &str); 2] = [("ctx_pw0.w", "ctx_pw0.b"), ("ctx_pw1.w", "ctx_pw1.b")];
const HEAD_NAMES: [(&str, &str); 2] = [("head0.w", "head0.b"), ("head1.w", "head1.b")];
