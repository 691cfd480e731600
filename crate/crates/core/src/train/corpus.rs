//! Seeded synthetic corpora standing in for real raw datasets, plus the
//! directory ingestion hook for raw-container files.

use rand::Rng;

use crate::error::Result;
use crate::raw::{
    pack_bayer, read_raw_container, split_patches, unpack_bayer, BayerImage, BayerPattern,
    RggbImage, RggbPatch,
};

/// What a synthetic image looks like statistically.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SyntheticKind {
    /// Every sample equals `value`.
    Constant { value: u16 },
    /// I.i.d. uniform noise over [0, 2^bit_depth): incompressible.
    UniformNoise { bit_depth: u8 },
    /// Smooth 2-D field spanning the full range plus Poisson-like shot
    /// noise whose variance scales with the signal.
    SmoothGradient { bit_depth: u8, shot_noise: f64 },
    /// Smooth red field with g1 = r + noise couplings to exercise the
    /// inter-channel mean shifts. `coupling` = 0 gives independent fields.
    Correlated { bit_depth: u8, coupling: f64, noise: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorpusSpec {
    pub kind: SyntheticKind,
    pub count: usize,
    /// Bayer-domain dimensions (even).
    pub width: usize,
    pub height: usize,
}

fn smooth_field(hw: usize, hh: usize, top: f64, rng: &mut impl Rng) -> Vec<f64> {
    let fx = rng.gen_range(0.5..2.5);
    let fy = rng.gen_range(0.5..2.5);
    let px = rng.gen_range(0.0..std::f64::consts::TAU);
    let py = rng.gen_range(0.0..std::f64::consts::TAU);
    let ramp = rng.gen_range(-0.4..0.4);
    let mut out = Vec::with_capacity(hw * hh);
    for y in 0..hh {
        for x in 0..hw {
            let u = x as f64 / hw.max(1) as f64;
            let v = y as f64 / hh.max(1) as f64;
            let s = 0.5
                + 0.35 * (std::f64::consts::TAU * fx * u + px).sin()
                    * (std::f64::consts::TAU * fy * v + py).sin()
                + ramp * (u - 0.5);
            out.push((s.clamp(0.0, 1.0)) * top);
        }
    }
    out
}

fn clamp_to(v: f64, top: f64) -> u16 {
    v.round().clamp(0.0, top) as u16
}

fn generate_one(kind: SyntheticKind, width: usize, height: usize, pattern: BayerPattern, rng: &mut impl Rng) -> BayerImage {
    let hw = width / 2;
    let hh = height / 2;
    match kind {
        SyntheticKind::Constant { value } => {
            let depth = crate::bitdepth::pixel_bit_depth(value).max(1);
            BayerImage::new(width, height, pattern, depth, vec![value; width * height]).unwrap()
        }
        SyntheticKind::UniformNoise { bit_depth } => {
            let samples = (0..width * height)
                .map(|_| rng.gen_range(0..(1u32 << bit_depth)) as u16)
                .collect();
            BayerImage::new(width, height, pattern, bit_depth, samples).unwrap()
        }
        SyntheticKind::SmoothGradient { bit_depth, shot_noise } => {
            let top = f64::from((1u32 << bit_depth) - 1);
            let mut channels: [Vec<u16>; 4] = std::array::from_fn(|_| Vec::new());
            let base = smooth_field(hw, hh, top, rng);
            for (c, chan) in channels.iter_mut().enumerate() {
                let gain = 1.0 - 0.08 * c as f64;
                *chan = base
                    .iter()
                    .map(|&b| {
                        let mean = b * gain;
                        let std = shot_noise * mean.max(1.0).sqrt();
                        clamp_to(mean + std * crate::nn::sample_standard_normal(rng), top)
                    })
                    .collect();
            }
            // Pin the declared depth: one full-scale sample.
            channels[0][0] = top as u16;
            let rggb = RggbImage::new(hw, hh, bit_depth, channels).unwrap();
            unpack_bayer(&rggb, pattern)
        }
        SyntheticKind::Correlated { bit_depth, coupling, noise } => {
            let top = f64::from((1u32 << bit_depth) - 1);
            let r = smooth_field(hw, hh, top, rng);
            let indep: [Vec<f64>; 3] =
                std::array::from_fn(|_| smooth_field(hw, hh, top, rng));
            let mut channels: [Vec<u16>; 4] = std::array::from_fn(|_| vec![0; hw * hh]);
            for i in 0..hw * hh {
                let eps = || -> f64 { 0.0 };
                let _ = eps;
                channels[0][i] = clamp_to(r[i], top);
                for c in 1..4 {
                    let mixed = coupling * r[i] + (1.0 - coupling) * indep[c - 1][i]
                        + noise * top * crate::nn::sample_standard_normal(rng);
                    channels[c][i] = clamp_to(mixed, top);
                }
            }
            channels[0][0] = top as u16;
            let rggb = RggbImage::new(hw, hh, bit_depth, channels).unwrap();
            unpack_bayer(&rggb, pattern)
        }
    }
}

/// Generate a seeded corpus of Bayer images. Patterns rotate through all
/// four layouts.
pub fn make_synthetic_corpus(specs: &[CorpusSpec], seed: u64) -> Vec<BayerImage> {
    let mut out = Vec::new();
    let mut index = 0u64;
    for spec in specs {
        for _ in 0..spec.count {
            let mut rng = crate::nn::seeded_rng(
                seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
                    .wrapping_add(index.wrapping_mul(0xD134_2543_DE82_EF95)),
            );
            let pattern = BayerPattern::ALL[(index % 4) as usize];
            out.push(generate_one(spec.kind, spec.width, spec.height, pattern, &mut rng));
            index += 1;
        }
    }
    out
}

/// Split every image of a corpus into patches.
pub fn images_to_patches(images: &[BayerImage], patch_size: usize) -> Result<Vec<RggbPatch>> {
    let mut out = Vec::new();
    for img in images {
        out.extend(split_patches(&pack_bayer(img), patch_size)?);
    }
    Ok(out)
}

/// Read every `.braw` raw-container file in a directory, sorted by name.
pub fn load_corpus_dir(dir: &std::path::Path) -> Result<Vec<BayerImage>> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "braw"))
        .collect();
    paths.sort();
    paths.iter().map(|p| read_raw_container(p)).collect()
}
