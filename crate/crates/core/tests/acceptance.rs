//! Acceptance suite: one test per criterion, each printing a PASS/FAIL
//! line with the measured numbers. Run with `cargo test --test acceptance
//! -- --nocapture` to see the lines.

mod common;

use std::time::Instant;

use rand::Rng;
use rwic_core::bitdepth::BitDepthMap;
use rwic_core::coder::{RangeDecoder, RangeEncoder, SymbolCdf};
use rwic_core::codec::DepthMode;
use rwic_core::container::{compress_image, decompress_image, CompressOptions};
use rwic_core::entropy::{
    self, build_cdf_table, mixture_pmf_vec, renormalize_pmf, MixtureParams,
};
use rwic_core::nn::{ModelConfig, ModelWeights};
use rwic_core::raw::{pack_bayer, raw_container_bytes, split_patches, BayerImage, BayerPattern};
use rwic_core::train::corpus::{images_to_patches, make_synthetic_corpus, CorpusSpec, SyntheticKind};
use rwic_core::train::{evaluate_bpp, train, EvalMode, TrainConfig};

fn pass(criterion: u32, details: &str) {
    println!("criterion {criterion}: PASS  ({details})");
}

fn random_mixture(rng: &mut impl Rng, k: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let raw: Vec<f64> = (0..k).map(|_| rng.gen_range(0.05..1.0)).collect();
    let sum: f64 = raw.iter().sum();
    let pi: Vec<f64> = raw.iter().map(|&w| w / sum).collect();
    let mu: Vec<f64> = (0..k).map(|_| rng.gen_range(-0.5..1.5)).collect();
    let s: Vec<f64> = (0..k)
        .map(|_| 10f64.powf(rng.gen_range(-3.0..0.3)))
        .collect();
    (pi, mu, s)
}

/// Criterion 1: 1,000 fuzzed images across bit depths 0-16, all four
/// patterns, sizes 2x2 to 512x512; compress -> decompress byte-identical.
#[test]
fn criterion_1_losslessness_fuzz() {
    let start = Instant::now();
    let weights = ModelWeights::init(ModelConfig::tiny(), 0xACCE17).unwrap();
    let mut rng = rwic_core::nn::seeded_rng(0xF022);
    let mut checked = 0usize;
    let mut pixels = 0u64;
    for i in 0..1000usize {
        // Size distribution: mostly small shapes for edge coverage, a tail
        // of large ones; always even, spanning 2..=512.
        let dim = |rng: &mut rand_chacha::ChaCha12Rng| -> usize {
            let class = rng.gen_range(0..100);
            let half = if class < 85 {
                rng.gen_range(1..=32)
            } else if class < 97 {
                rng.gen_range(33..=128)
            } else {
                rng.gen_range(129..=256)
            };
            half * 2
        };
        let width = dim(&mut rng);
        let height = dim(&mut rng);
        let pattern = BayerPattern::ALL[i % 4];
        let depth = rng.gen_range(1..=16u8);
        let all_zero = i % 37 == 0; // exercise patch depth 0
        let samples: Vec<u16> = (0..width * height)
            .map(|_| {
                if all_zero {
                    0
                } else {
                    rng.gen_range(0..(1u32 << depth)) as u16
                }
            })
            .collect();
        let img = BayerImage::new(width, height, pattern, depth, samples).unwrap();

        let patch_size = [8usize, 16, 32, 64][rng.gen_range(0..4)];
        let mode = match i % 10 {
            8 => DepthMode::Fixed(depth),
            9 => DepthMode::Masked(depth),
            _ => DepthMode::Adaptive,
        };
        let opts = CompressOptions {
            patch_size,
            mode,
            per_channel_depths: i % 7 == 0,
        };
        let compressed = compress_image(&img, &weights, &opts).unwrap();
        let back = decompress_image(&compressed.bytes, &weights).unwrap();
        assert_eq!(
            raw_container_bytes(&back),
            raw_container_bytes(&img),
            "image {i} ({width}x{height} {pattern:?} depth {depth} P={patch_size} {mode:?})"
        );
        checked += 1;
        pixels += img.pixel_count() as u64;
    }
    let elapsed = start.elapsed();
    assert_eq!(checked, 1000);
    assert!(
        elapsed.as_secs_f64() < 300.0,
        "fuzz suite took {elapsed:?}, expected under 5 minutes"
    );
    pass(
        1,
        &format!("1000 images, {pixels} Bayer pixels, byte-identical, {elapsed:.1?}"),
    );
}

/// Criterion 2: PMF normalization within 1e-9 for 1e4 random draws across
/// b in {1, 2, 4, 8, 12, 14}.
#[test]
fn criterion_2_pmf_normalization() {
    let depths = [1u8, 2, 4, 8, 12, 14];
    let mut rng = rwic_core::nn::seeded_rng(0x2014);
    let mut worst: f64 = 0.0;
    for draw in 0..10_000usize {
        let b = depths[draw % depths.len()];
        let k = rng.gen_range(1..=5);
        let (pi, mu, s) = random_mixture(&mut rng, k);
        let sum: f64 = mixture_pmf_vec(b, &pi, &mu, &s).iter().sum();
        let err = (sum - 1.0).abs();
        worst = worst.max(err);
        assert!(err <= 1e-9, "draw {draw}: b={b} sum={sum}");
    }
    pass(2, &format!("10000 draws, worst |sum - 1| = {worst:.2e}"));
}

/// Criterion 3: renormalize_pmf matches a brute-force mask-and-divide
/// oracle elementwise to 1e-12 for base alphabets up to 2^12.
#[test]
fn criterion_3_renormalization_oracle() {
    let mut rng = rwic_core::nn::seeded_rng(0x0EAC1E);
    let mut worst: f64 = 0.0;
    for trial in 0..500usize {
        let big = rng.gen_range(1..=12u8);
        let b = rng.gen_range(1..=big);
        let base: Vec<f64> = if trial % 2 == 0 {
            let k = rng.gen_range(1..=5);
            let (pi, mu, s) = random_mixture(&mut rng, k);
            mixture_pmf_vec(big, &pi, &mu, &s)
        } else {
            let raw: Vec<f64> = (0..1usize << big)
                .map(|_| rng.gen_range(0.0..1.0f64).powi(2))
                .collect();
            let sum: f64 = raw.iter().sum();
            raw.iter().map(|&p| p / sum).collect()
        };
        // Independent oracle: mask then divide.
        let n = 1usize << b;
        let mass: f64 = base[..n].iter().sum();
        if mass <= 0.0 {
            // Extreme mixtures can underflow all surviving mass; the
            // implementation must refuse rather than emit NaNs.
            assert!(matches!(
                renormalize_pmf(&base, b).unwrap_err(),
                rwic_core::error::Error::DegenerateSupport
            ));
            continue;
        }
        let got = renormalize_pmf(&base, b).unwrap();
        for (x, &p) in got.probs().iter().enumerate() {
            let oracle = base[x] / mass;
            let err = (p - oracle).abs();
            worst = worst.max(err);
            assert!(err <= 1e-12, "trial {trial} x={x}: {p} vs {oracle}");
        }
        assert_eq!(got.alphabet_size(), n);
    }
    pass(3, &format!("500 random PMFs, worst |diff| = {worst:.2e}"));
}

/// Criterion 4: every differentiable op and the end-to-end loss pass
/// central finite differences (eps = 1e-3, f64, rtol 1e-4) on 20 seeds.
/// End-to-end coordinates where a rectifier kink falls inside the FD
/// interval are classified as edge points and excluded, as are
/// sub-noise-floor gradients.
#[test]
fn criterion_4_gradient_suite() {
    let mut worst_op: f64 = 0.0;
    let mut worst_e2e: f64 = 0.0;
    for seed in 100..120u64 {
        for check in common::check_primitive_ops(seed) {
            worst_op = worst_op.max(check.max_rel);
            assert!(
                check.max_rel <= common::FD_RTOL,
                "seed {seed} op {}: rel {}",
                check.name,
                check.max_rel
            );
        }
        let e2e = common::check_end_to_end(seed, 1);
        worst_e2e = worst_e2e.max(e2e.max_rel);
        assert!(
            e2e.max_rel <= common::FD_RTOL,
            "seed {seed} end-to-end rel {}",
            e2e.max_rel
        );
    }
    pass(
        4,
        &format!("20 seeds, worst op rel {worst_op:.2e}, worst end-to-end rel {worst_e2e:.2e}"),
    );
}

/// Criterion 5: coder optimality over 1e5 symbols from random CDFs:
/// realized bits <= 1.01 x Shannon bits + 256, in under 30 s.
#[test]
fn criterion_5_coder_optimality() {
    let start = Instant::now();
    let mut rng = rwic_core::nn::seeded_rng(0xC0DE);
    // A pool of tables spanning alphabet sizes and skews.
    let mut tables = Vec::new();
    for t in 0..50 {
        let n = rng.gen_range(2..=1024usize);
        let raw: Vec<f64> = (0..n)
            .map(|_| {
                let u: f64 = rng.gen_range(0.0..1.0);
                if t % 3 == 0 {
                    u.powi(8) + 1e-9 // heavy skew
                } else {
                    u + 0.01
                }
            })
            .collect();
        let sum: f64 = raw.iter().sum();
        let pmf: Vec<f64> = raw.iter().map(|&p| p / sum).collect();
        tables.push(build_cdf_table(&pmf, 16).unwrap());
    }

    // Draw symbols from each table's own distribution.
    let count = 100_000usize;
    let mut plan: Vec<(usize, u32)> = Vec::with_capacity(count);
    let mut shannon = 0.0;
    for _ in 0..count {
        let ti = rng.gen_range(0..tables.len());
        let table = &tables[ti];
        let value = rng.gen_range(0..table.total());
        let symbol = SymbolCdf::find(table, value);
        let (lo, hi) = SymbolCdf::bounds(table, symbol);
        shannon += -(f64::from(hi - lo) / f64::from(table.total())).log2();
        plan.push((ti, symbol));
    }
    let mut enc = RangeEncoder::new();
    for &(ti, s) in &plan {
        enc.encode(s, &tables[ti]);
    }
    let bytes = enc.finish();
    let realized = bytes.len() as f64 * 8.0;
    let mut dec = RangeDecoder::new(&bytes).unwrap();
    for &(ti, s) in &plan {
        assert_eq!(dec.decode(&tables[ti]).unwrap(), s, "round trip");
    }
    let elapsed = start.elapsed();
    assert!(
        realized <= 1.01 * shannon + 256.0,
        "realized {realized} bits vs Shannon {shannon}"
    );
    assert!(elapsed.as_secs_f64() < 30.0, "took {elapsed:?}");
    pass(
        5,
        &format!(
            "1e5 symbols: realized {realized:.0} bits, Shannon {shannon:.0}, overhead {:.3}%, {elapsed:.1?}",
            100.0 * (realized - shannon) / shannon
        ),
    );
}

/// Criterion 6: joint probability of a 2x2 patch at b=1 matches exhaustive
/// enumeration of all 2^16 outcomes.
#[test]
fn criterion_6_joint_probability_enumeration() {
    let mut rng = rwic_core::nn::seeded_rng(0x10117);
    for trial in 0..3 {
        let k = rng.gen_range(1..=3usize);
        let pixels = 4usize;
        let mut pi = Vec::new();
        let mut mu = Vec::new();
        let mut s = Vec::new();
        let mut beta = Vec::new();
        for _ in 0..pixels * 4 {
            let (pp, mm, ss) = random_mixture(&mut rng, k);
            pi.extend(pp);
            mu.extend(mm);
            s.extend(ss.iter().map(|&v| v.max(0.05)));
            beta.extend((0..k).map(|_| rng.gen_range(-1.0..1.0)));
        }
        let params = MixtureParams::new(k, pixels, pi, mu, s, beta).unwrap();

        // Independent scalar oracle, written directly from the formulas.
        let sigmoid = |x: f64| 1.0 / (1.0 + (-x).exp());
        let oracle_prob = |outcome: u16| -> f64 {
            let mut prob = 1.0;
            for j in 0..pixels {
                let bits: [u32; 4] =
                    std::array::from_fn(|c| u32::from(outcome >> (j * 4 + c)) & 1);
                let x_r = f64::from(bits[0]);
                let x_g1 = f64::from(bits[1]);
                let x_g2 = f64::from(bits[2]);
                for c in 0..4 {
                    let couplings = params.couplings(j);
                    for (kk, &m) in params.mu(j, c).iter().enumerate() {
                        let _ = (kk, m);
                    }
                    let mu_hat: Vec<f64> = params
                        .mu(j, c)
                        .iter()
                        .enumerate()
                        .map(|(kk, &m)| match c {
                            0 => m,
                            1 => m + couplings.r[kk] * x_r,
                            2 => m + couplings.g1[kk] * x_g1,
                            3 => m + couplings.g2[kk] * x_r + couplings.b[kk] * (x_g1 + x_g2) / 2.0,
                            _ => unreachable!(),
                        })
                        .collect();
                    // b=1: delta = 1, alphabet {0,1}; p(0) = sigma((0.5-mu)/s)
                    // and p(1) = sigma((mu-0.5)/s), the algebraic mirror.
                    let mut p_sym = 0.0;
                    for kk in 0..k {
                        let arg = (0.5 - mu_hat[kk]) / params.s(j, c)[kk];
                        let arg = if bits[c] == 0 { arg } else { -arg };
                        p_sym += params.pi(j, c)[kk] * sigmoid(arg);
                    }
                    prob *= p_sym;
                }
            }
            prob
        };

        let mut total = 0.0;
        for outcome in 0..=u16::MAX {
            total += oracle_prob(outcome);
        }
        assert!(
            (total - 1.0).abs() <= 1e-9,
            "trial {trial}: outcomes sum to {total}"
        );

        // Realized outcome: compare the implementation's joint logprob.
        let outcome: u16 = rng.gen();
        let channels: [Vec<u16>; 4] = std::array::from_fn(|c| {
            (0..pixels).map(|j| (outcome >> (j * 4 + c)) & 1).collect()
        });
        let patch =
            rwic_core::raw::RggbPatch::new(2, (0, 0), 1, channels, vec![false; 4]).unwrap();
        let lp = entropy::joint_pixel_logprob(&patch, &params, [1; 4]).unwrap();
        let oracle_lp = oracle_prob(outcome).log2();
        assert!(
            (lp - oracle_lp).abs() <= 1e-10,
            "trial {trial}: {lp} vs oracle {oracle_lp}"
        );
    }
    pass(6, "3 trials x 65536 outcomes: sums within 1e-9, realized within 1e-10");
}

fn mixed_depth_corpus(count_each: usize, seed: u64) -> Vec<BayerImage> {
    make_synthetic_corpus(
        &[
            CorpusSpec {
                kind: SyntheticKind::SmoothGradient {
                    bit_depth: 8,
                    shot_noise: 0.4,
                },
                count: count_each,
                width: 64,
                height: 64,
            },
            CorpusSpec {
                kind: SyntheticKind::SmoothGradient {
                    bit_depth: 14,
                    shot_noise: 0.4,
                },
                count: count_each,
                width: 64,
                height: 64,
            },
        ],
        seed,
    )
}

/// Criterion 7: on the mixed-depth corpus the trained adaptive model beats
/// the fixed-max-depth evaluation by at least 10%; and structurally,
/// masking can never lose against fixed for any weights.
#[test]
fn criterion_7_ablation_direction() {
    let start = Instant::now();
    let images = mixed_depth_corpus(14, 0xAB1A);
    let patches = images_to_patches(&images, 16).unwrap();
    let cfg = TrainConfig {
        epochs: 30,
        batch_size: 16,
        learning_rate: 2e-3,
        crop_size: 16,
        seed: 7,
        ..TrainConfig::default()
    };
    let out = train(&patches, &cfg, ModelConfig::tiny()).unwrap();
    let adaptive = evaluate_bpp(&images, &out.weights, 16, EvalMode::Adaptive).unwrap();
    let fixed = evaluate_bpp(&images, &out.weights, 16, EvalMode::FixedMax).unwrap();
    let gap = 1.0 - adaptive.bpp() / fixed.bpp();
    assert!(
        gap >= 0.10,
        "trained adaptive {:.4} bpp vs fixed {:.4} bpp: gap {:.1}% < 10%",
        adaptive.bpp(),
        fixed.bpp(),
        100.0 * gap
    );

    // Structural bound: masked evaluation never exceeds fixed, for any
    // weights, on every image. Same conditioning, so latent streams are
    // identical and masking only shrinks pixel streams.
    for seed in [1u64, 2, 3] {
        let random_weights = ModelWeights::init(ModelConfig::tiny(), seed).unwrap();
        let probe = mixed_depth_corpus(3, seed ^ 0x51DE);
        let fixed = evaluate_bpp(&probe, &random_weights, 16, EvalMode::FixedMax).unwrap();
        let masked = evaluate_bpp(&probe, &random_weights, 16, EvalMode::MaskedMax).unwrap();
        for (f, m) in fixed.rows.iter().zip(&masked.rows) {
            assert!(
                m.breakdown.total_bits() <= f.breakdown.total_bits(),
                "seed {seed}: masked {} > fixed {} on {}",
                m.breakdown.total_bits(),
                f.breakdown.total_bits(),
                f.label
            );
        }
        assert!(masked.bpp() <= fixed.bpp());
    }
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 1800.0, "took {elapsed:?}");
    pass(
        7,
        &format!(
            "adaptive {:.3} vs fixed {:.3} bpp ({:.1}% gap); structural bound holds on 3 random-weight corpora; {elapsed:.0?}",
            adaptive.bpp(),
            fixed.bpp(),
            100.0 * gap
        ),
    );
}

/// Criterion 8: trained bpp on the smooth-gradient corpus is at most 0.7 x
/// the mean patch bit depth.
#[test]
fn criterion_8_beats_naive_packing() {
    let start = Instant::now();
    let images = make_synthetic_corpus(
        &[CorpusSpec {
            kind: SyntheticKind::SmoothGradient {
                bit_depth: 12,
                shot_noise: 0.4,
            },
            count: 24,
            width: 64,
            height: 64,
        }],
        0x5A00,
    );
    let patches = images_to_patches(&images, 16).unwrap();
    let cfg = TrainConfig {
        epochs: 100,
        batch_size: 16,
        learning_rate: 2e-3,
        crop_size: 16,
        seed: 4,
        ..TrainConfig::default()
    };
    let out = train(&patches, &cfg, ModelConfig::desk()).unwrap();
    let report = evaluate_bpp(&images, &out.weights, 16, EvalMode::Adaptive).unwrap();
    let target = 0.7 * report.mean_patch_depth;
    let elapsed = start.elapsed();
    assert!(
        report.bpp() <= target,
        "bpp {:.4} above 0.7 x mean depth = {target:.4}",
        report.bpp()
    );
    pass(
        8,
        &format!(
            "trained bpp {:.3} <= 0.7 x mean depth {:.2} = {target:.3}; {elapsed:.0?}",
            report.bpp(),
            report.mean_patch_depth
        ),
    );
}

/// Criterion 9: published full-scale bitrates are documentation-only
/// reference points; the docs must record them as such.
#[test]
fn criterion_9_reference_numbers_documented() {
    let readme = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../README.md"))
        .expect("README.md present");
    assert!(
        readme.contains("6.79") && readme.contains("7.29"),
        "README must record the published reference bitrates"
    );
    assert!(
        readme.to_lowercase().contains("not reproducible")
            || readme.to_lowercase().contains("not a target"),
        "README must state the reference numbers are not a desk-scale target"
    );
    pass(9, "reference bitrates recorded as documentation, not targets");
}

/// Side condition shared by several criteria: the per-patch depth map is
/// tight on every fuzzed image.
#[test]
fn depth_maps_are_tight_bounds() {
    let mut rng = rwic_core::nn::seeded_rng(0x71D);
    for _ in 0..50 {
        let depth = rng.gen_range(1..=16u8);
        let hw = rng.gen_range(4..=24usize);
        let hh = rng.gen_range(4..=24usize);
        let samples: Vec<u16> = (0..4 * hw * hh)
            .map(|_| rng.gen_range(0..(1u32 << depth)) as u16)
            .collect();
        let img = BayerImage::new(2 * hw, 2 * hh, BayerPattern::Rggb, depth, samples).unwrap();
        let patches = split_patches(&pack_bayer(&img), 8).unwrap();
        let map = BitDepthMap::from_patches(&patches, false);
        for (i, patch) in patches.iter().enumerate() {
            let b = map.patch_depth(i);
            let mask = patch.pad_mask();
            let max = (0..4)
                .flat_map(|c| {
                    patch
                        .channel(c)
                        .iter()
                        .enumerate()
                        .filter(|&(j, _)| !mask[j])
                        .map(|(_, &v)| v)
                })
                .max()
                .unwrap_or(0);
            assert!(u32::from(max) < 1u32 << b, "not an upper bound");
            if b > 0 {
                assert!(
                    u32::from(max) >= 1u32 << (b - 1),
                    "depth {b} not tight for max {max}"
                );
            }
        }
    }
}
