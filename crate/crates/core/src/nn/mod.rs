//! Desk-scale learned transforms: tensors, reverse-mode autodiff, the
//! convolutional model, and weight serialization.

pub mod config;
pub mod kernels;
pub mod model;
pub mod tape;
pub mod tensor;
pub mod weights;

pub use config::ModelConfig;
pub use model::{PatchConditioning, PatchPipeline, PixelParams};
pub use tape::{Tape, VarId};
pub use tensor::Tensor;
pub use weights::{ConvLayer, ModelWeights};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

pub fn seeded_rng(seed: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(seed)
}

/// Box-Muller draw; one value per call so streams stay reproducible.
pub fn sample_standard_normal<R: Rng>(rng: &mut R) -> f64 {
    loop {
        let u: f64 = rng.gen();
        if u > f64::MIN_POSITIVE {
            let v: f64 = rng.gen();
            return (-2.0 * u.ln()).sqrt() * (2.0 * std::f64::consts::PI * v).cos();
        }
    }
}

/// Round half away from zero, elementwise contract of the quantizer.
pub fn round_half_away(v: f64) -> f64 {
    v.round()
}

/// Standard normal CDF, stable in both tails.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// Standard normal density.
pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}
