//! Trainer behavior on analytically understood sources: constant patches
//! (zero entropy), incompressible uniform noise (Shannon bound), and the
//! inter-channel coupling experiment.

mod common;

use rwic_core::bitdepth::patch_bit_depth;
use rwic_core::codec::{patch_model_bits, DepthMode};
use rwic_core::nn::model::{build_loss_graph, LatentMode};
use rwic_core::nn::{ModelConfig, ModelWeights};
use rwic_core::raw::RggbPatch;
use rwic_core::train::corpus::{images_to_patches, make_synthetic_corpus, CorpusSpec, SyntheticKind};
use rwic_core::train::{train, TrainConfig};

fn quick_config(epochs: usize, seed: u64, lr: f64) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 8,
        learning_rate: lr,
        crop_size: 8,
        seed,
        ..TrainConfig::default()
    }
}

fn pixel_bits_per_pixel(weights: &ModelWeights, patches: &[RggbPatch]) -> f64 {
    let mut bits = 0.0;
    let mut px = 0.0;
    for patch in patches {
        let depths = patch_bit_depth(patch);
        let graph = build_loss_graph(weights, patch, depths, LatentMode::Round).unwrap();
        bits += graph.tape.value(graph.pixel_bits).item();
        px += graph.denominator;
    }
    bits / px
}

#[test]
fn constant_corpus_approaches_latent_overhead_within_20_epochs() {
    let spec = [CorpusSpec {
        kind: SyntheticKind::Constant { value: 9 },
        count: 96,
        width: 16,
        height: 16,
    }];
    let images = make_synthetic_corpus(&spec, 21);
    let patches = images_to_patches(&images, 8).unwrap();
    let out = train(&patches, &quick_config(20, 1, 1e-2), ModelConfig::tiny()).unwrap();
    let first = out.val_history[0];
    let last = *out.val_history.last().unwrap();
    // Entropy of a constant source is zero; what remains is latent
    // overhead plus the not-yet-converged pixel term.
    assert!(last < 0.6, "constant-source val loss stuck at {last}");
    assert!(last < first * 0.25, "no convergence: {first} -> {last}");
    let val_patches: Vec<RggbPatch> = patches.iter().take(4).cloned().collect();
    let pixel_bpp = pixel_bits_per_pixel(&out.weights, &val_patches);
    assert!(pixel_bpp < 0.4, "pixel term should collapse, got {pixel_bpp}");
}

#[test]
fn uniform_noise_cannot_beat_its_entropy() {
    let depth = 6u8;
    let spec = [CorpusSpec {
        kind: SyntheticKind::UniformNoise { bit_depth: depth },
        count: 24,
        width: 16,
        height: 16,
    }];
    let images = make_synthetic_corpus(&spec, 22);
    let patches = images_to_patches(&images, 8).unwrap();
    let out = train(&patches, &quick_config(20, 2, 1e-2), ModelConfig::tiny()).unwrap();
    // Fresh noise the model never saw: the Shannon bound applies cleanly.
    let probe_spec = [CorpusSpec {
        kind: SyntheticKind::UniformNoise { bit_depth: depth },
        count: 4,
        width: 16,
        height: 16,
    }];
    let probe = images_to_patches(&make_synthetic_corpus(&probe_spec, 777), 8).unwrap();
    let pixel_bpp = pixel_bits_per_pixel(&out.weights, &probe);
    let b = f64::from(depth);
    assert!(
        pixel_bpp >= b - 0.05,
        "pixel bpp {pixel_bpp} beats the entropy bound {b}"
    );
    assert!(
        pixel_bpp <= b + 0.8,
        "pixel bpp {pixel_bpp} far above the incompressible source"
    );
}

#[test]
fn fixed_seed_reproduces_loss_history() {
    let spec = [CorpusSpec {
        kind: SyntheticKind::SmoothGradient {
            bit_depth: 8,
            shot_noise: 0.5,
        },
        count: 8,
        width: 16,
        height: 16,
    }];
    let images = make_synthetic_corpus(&spec, 23);
    let patches = images_to_patches(&images, 8).unwrap();
    let cfg = quick_config(3, 7, 2e-3);
    let a = train(&patches, &cfg, ModelConfig::tiny()).unwrap();
    let b = train(&patches, &cfg, ModelConfig::tiny()).unwrap();
    assert_eq!(a.train_history, b.train_history);
    assert_eq!(a.val_history, b.val_history);
    assert_eq!(a.weights.content_hash(), b.weights.content_hash());
}

/// Trained couplings pick up a planted r -> g1 dependency; an independent
/// control stays near zero.
#[test]
fn coupling_coefficients_track_planted_correlation() {
    let train_one = |kind: SyntheticKind, seed: u64| -> (ModelWeights, Vec<RggbPatch>) {
        let spec = [CorpusSpec {
            kind,
            count: 24,
            width: 16,
            height: 16,
        }];
        let images = make_synthetic_corpus(&spec, seed);
        let patches = images_to_patches(&images, 8).unwrap();
        let out = train(&patches, &quick_config(30, 5, 5e-3), ModelConfig::tiny()).unwrap();
        (out.weights, patches)
    };
    let correlated = SyntheticKind::Correlated {
        bit_depth: 8,
        coupling: 1.0,
        noise: 0.01,
    };
    let control = SyntheticKind::Correlated {
        bit_depth: 8,
        coupling: 0.0,
        noise: 0.01,
    };
    let (w_corr, p_corr) = train_one(correlated, 31);
    let (w_ctrl, p_ctrl) = train_one(control, 31);

    let mean_beta_r = |weights: &ModelWeights, patches: &[RggbPatch]| -> f64 {
        let mut acc = 0.0;
        let mut n = 0.0;
        for patch in patches.iter().take(3) {
            let depths = patch_bit_depth(patch);
            let cond = rwic_core::nn::model::PatchConditioning::build(weights, patch, depths)
                .unwrap();
            let y = weights.analysis(&cond.xnorm, &cond.cond);
            let (yq, _) =
                rwic_core::nn::model::round_quantize_clamped(&y, weights.config.latent_bound);
            let mut pipeline = rwic_core::nn::model::PatchPipeline::new(
                weights,
                &yq,
                cond.cond.clone(),
                patch.patch_size(),
            );
            let params = pipeline.all_pixel_params(&cond.xnorm);
            for j in 0..params.pixels() {
                for (kk, (&pi, &beta)) in params
                    .pi(j, rwic_core::entropy::CH_G1)
                    .iter()
                    .zip(params.beta(j, rwic_core::entropy::CH_R))
                    .enumerate()
                {
                    let _ = kk;
                    acc += pi * beta.abs();
                    n += 1.0;
                }
            }
        }
        acc / n * params_k(weights) as f64
    };
    fn params_k(w: &ModelWeights) -> usize {
        w.config.mixture_components
    }

    let beta_corr = mean_beta_r(&w_corr, &p_corr);
    let beta_ctrl = mean_beta_r(&w_ctrl, &p_ctrl);
    assert!(
        beta_corr > 2.0 * beta_ctrl,
        "planted coupling not learned: corr {beta_corr} vs control {beta_ctrl}"
    );
    assert!(beta_corr > 0.1, "coupling magnitude too small: {beta_corr}");
}

/// The tape loss and the inference-path model cost are two independent
/// routes to the same number.
#[test]
fn training_loss_equals_model_bits_at_evaluation_points() {
    let weights = ModelWeights::init(ModelConfig::tiny(), 17).unwrap();
    for seed in 0..5u64 {
        let patch = common::random_test_patch(8, 7, seed);
        let depths = patch_bit_depth(&patch);
        let graph = build_loss_graph(&weights, &patch, depths, LatentMode::Round).unwrap();
        let graph_bits = graph.tape.value(graph.pixel_bits).item()
            + graph.tape.value(graph.y_bits).item()
            + graph.tape.value(graph.z_bits).item();
        let (pixel_bits, latent_bits) =
            patch_model_bits(&weights, &patch, depths, DepthMode::Adaptive).unwrap();
        let model_bits = pixel_bits + latent_bits;
        assert!(
            (graph_bits - model_bits).abs() < 1e-9 * model_bits.max(1.0),
            "seed {seed}: graph {graph_bits} vs model {model_bits}"
        );
    }
}
