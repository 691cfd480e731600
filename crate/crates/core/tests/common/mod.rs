//! Shared helpers for integration suites: central finite-difference
//! gradient checks and corpus fixtures.

#![allow(dead_code)]

use std::sync::Arc;

use rand::Rng;
use rwic_core::bitdepth::patch_bit_depth;
use rwic_core::nn::model::{build_loss_graph, LatentMode};
use rwic_core::nn::{ModelConfig, ModelWeights, Tape, Tensor, VarId};
use rwic_core::raw::RggbPatch;

pub const FD_EPS: f64 = 1e-3;
pub const FD_RTOL: f64 = 1e-4;

pub fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < 1e-7 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

#[derive(Debug)]
pub struct OpCheck {
    pub name: &'static str,
    pub max_rel: f64,
    pub coords: usize,
}

/// Central finite differences on every input coordinate of a scalar-valued
/// graph builder, against the tape's analytic gradients.
fn fd_check(
    name: &'static str,
    inputs: &[Tensor],
    build: &dyn Fn(&mut Tape, &[VarId]) -> VarId,
) -> OpCheck {
    let eval = |tensors: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<VarId> = tensors.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let root = build(&mut tape, &vars);
        tape.value(root).item()
    };
    let mut tape = Tape::new();
    let vars: Vec<VarId> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let root = build(&mut tape, &vars);
    let grads = tape.backward(root);

    let mut max_rel: f64 = 0.0;
    let mut coords = 0;
    for (ti, t) in inputs.iter().enumerate() {
        let analytic = grads[vars[ti]]
            .as_ref()
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(t.dims()));
        for i in 0..t.len() {
            let mut plus = inputs.to_vec();
            plus[ti].data_mut()[i] += FD_EPS;
            let mut minus = inputs.to_vec();
            minus[ti].data_mut()[i] -= FD_EPS;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_EPS);
            max_rel = max_rel.max(rel_err(numeric, analytic.data()[i]));
            coords += 1;
        }
    }
    OpCheck {
        name,
        max_rel,
        coords,
    }
}

fn rand_tensor(dims: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor {
    Tensor::from_vec(
        dims,
        (0..dims.iter().product())
            .map(|_| rng.gen_range(lo..hi))
            .collect(),
    )
}

/// Random tensor whose values stay away from activation kinks at zero.
fn rand_tensor_off_kink(dims: &[usize], rng: &mut impl Rng) -> Tensor {
    Tensor::from_vec(
        dims,
        (0..dims.iter().product())
            .map(|_| {
                let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                sign * rng.gen_range(0.05..1.5)
            })
            .collect(),
    )
}

/// FD-check every differentiable tape primitive with one random draw.
pub fn check_primitive_ops(seed: u64) -> Vec<OpCheck> {
    let mut rng = rwic_core::nn::seeded_rng(seed);
    let mut out = Vec::new();

    let a = rand_tensor(&[3, 4], -1.5, 1.5, &mut rng);
    let b = rand_tensor(&[3, 4], 0.5, 2.0, &mut rng);
    out.push(fd_check("add", &[a.clone(), b.clone()], &|t, v| {
        let y = t.add(v[0], v[1]);
        t.sum_all(y)
    }));
    out.push(fd_check("sub", &[a.clone(), b.clone()], &|t, v| {
        let y = t.sub(v[0], v[1]);
        t.sum_all(y)
    }));
    out.push(fd_check("mul", &[a.clone(), b.clone()], &|t, v| {
        let y = t.mul(v[0], v[1]);
        t.sum_all(y)
    }));
    out.push(fd_check("div", &[a.clone(), b.clone()], &|t, v| {
        let y = t.div(v[0], v[1]);
        t.sum_all(y)
    }));

    let w = rand_tensor(&[4, 6], -1.0, 1.0, &mut rng);
    let mix = rand_tensor(&[6], -1.0, 1.0, &mut rng);
    out.push(fd_check("sum_axis0", &[w.clone(), mix.clone()], &|t, v| {
        let s = t.sum_axis0(v[0]);
        let y = t.mul(s, v[1]);
        t.sum_all(y)
    }));
    out.push(fd_check("softmax_axis0", std::slice::from_ref(&w), &{
        let mix = mix.clone();
        move |t: &mut Tape, v: &[VarId]| {
            let s = t.softmax_axis0(v[0]);
            let m = t.constant(Tensor::from_vec(
                &[4, 6],
                (0..4).flat_map(|_| mix.data().to_vec()).collect(),
            ));
            let y = t.mul(s, m);
            t.sum_all(y)
        }
    }));

    let x = rand_tensor_off_kink(&[2, 3, 3], &mut rng);
    out.push(fd_check("softplus", std::slice::from_ref(&x), &|t, v| {
        let y = t.softplus(v[0]);
        t.sum_all(y)
    }));
    out.push(fd_check("leaky_relu", std::slice::from_ref(&x), &|t, v| {
        let y = t.leaky_relu(v[0], 0.01);
        t.sum_all(y)
    }));
    let pos = rand_tensor(&[5], 0.1, 3.0, &mut rng);
    out.push(fd_check("log2_clamped", &[pos], &|t, v| {
        let y = t.log2_clamped(v[0], 1e-30);
        t.sum_all(y)
    }));
    out.push(fd_check("normal_cdf", &[rand_tensor(&[7], -3.0, 3.0, &mut rng)], &|t, v| {
        let y = t.normal_cdf(v[0]);
        t.sum_all(y)
    }));

    // edge_sigmoid_diff with random tail clips
    let n = 12;
    let lo = rand_tensor(&[n], -4.0, 2.0, &mut rng);
    let hi = Tensor::from_vec(
        &[n],
        lo.data().iter().map(|&v| v + rng.gen_range(0.2..2.0)).collect(),
    );
    let lower_clip: Arc<Vec<bool>> = Arc::new((0..n).map(|_| rng.gen_bool(0.25)).collect());
    let upper_clip: Arc<Vec<bool>> = Arc::new((0..n).map(|_| rng.gen_bool(0.25)).collect());
    out.push(fd_check("edge_sigmoid_diff", &[lo, hi], &{
        let lc = Arc::clone(&lower_clip);
        let uc = Arc::clone(&upper_clip);
        move |t: &mut Tape, v: &[VarId]| {
            let y = t.edge_sigmoid_diff(v[0], v[1], Arc::clone(&lc), Arc::clone(&uc));
            t.sum_all(y)
        }
    }));

    let src = rand_tensor(&[10], -1.0, 1.0, &mut rng);
    let map: Arc<Vec<usize>> = Arc::new((0..16).map(|_| rng.gen_range(0..10)).collect());
    out.push(fd_check("gather_map", &[src], &{
        let map = Arc::clone(&map);
        move |t: &mut Tape, v: &[VarId]| {
            let y = t.gather_map(v[0], Arc::clone(&map), &[16]);
            t.sum_all(y)
        }
    }));

    let c1 = rand_tensor(&[2, 2, 2], -1.0, 1.0, &mut rng);
    let c2 = rand_tensor(&[3, 2, 2], -1.0, 1.0, &mut rng);
    out.push(fd_check("concat_axis0", &[c1, c2], &|t, v| {
        let y = t.concat_axis0(&[v[0], v[1]]);
        t.sum_all(y)
    }));

    for &stride in &[1usize, 2] {
        let input = rand_tensor(&[2, 5, 6], -1.0, 1.0, &mut rng);
        let weight = rand_tensor(&[3, 2, 3, 3], -0.7, 0.7, &mut rng);
        let bias = rand_tensor(&[3], -0.5, 0.5, &mut rng);
        let name: &'static str = if stride == 1 { "conv2d_s1" } else { "conv2d_s2" };
        let oh = (5 + 2 - 3) / stride + 1;
        let ow = (6 + 2 - 3) / stride + 1;
        let mixer = rand_tensor(&[3, oh, ow], -1.0, 1.0, &mut rng);
        out.push(fd_check(name, &[input, weight, bias], &{
            let mixer = mixer.clone();
            move |t: &mut Tape, v: &[VarId]| {
                let y = t.conv2d(v[0], v[1], v[2], stride, 1);
                let m = t.constant(mixer.clone());
                let y = t.mul(y, m);
                t.sum_all(y)
            }
        }));
    }

    {
        let input = rand_tensor(&[2, 3, 3], -1.0, 1.0, &mut rng);
        let weight = rand_tensor(&[2, 3, 3, 3], -0.7, 0.7, &mut rng);
        let bias = rand_tensor(&[3], -0.5, 0.5, &mut rng);
        let mixer = rand_tensor(&[3, 6, 6], -1.0, 1.0, &mut rng);
        out.push(fd_check("deconv2d", &[input, weight, bias], &{
            let mixer = mixer.clone();
            move |t: &mut Tape, v: &[VarId]| {
                let y = t.deconv2d(v[0], v[1], v[2], 2, 1, 6, 6);
                let m = t.constant(mixer.clone());
                let y = t.mul(y, m);
                t.sum_all(y)
            }
        }));
    }

    {
        let input = rand_tensor(&[2, 5, 5], -1.0, 1.0, &mut rng);
        let weight = rand_tensor(&[3, 2, 5, 5], -0.7, 0.7, &mut rng);
        let bias = rand_tensor(&[3], -0.5, 0.5, &mut rng);
        let mixer = rand_tensor(&[3, 5, 5], -1.0, 1.0, &mut rng);
        out.push(fd_check("masked_conv2d", &[input, weight, bias], &{
            let mixer = mixer.clone();
            move |t: &mut Tape, v: &[VarId]| {
                let y = t.masked_conv2d(v[0], v[1], v[2]);
                let m = t.constant(mixer.clone());
                let y = t.mul(y, m);
                t.sum_all(y)
            }
        }));
    }

    {
        // pmf is positive; z values stay away from integer-bin kinks
        let pmf = rand_tensor(&[9, 2], 0.05, 1.0, &mut rng);
        let z = Tensor::from_vec(
            &[2, 2, 2],
            (0..8)
                .map(|_| {
                    let k = rng.gen_range(-3i32..3) as f64;
                    k + rng.gen_range(0.15..0.85)
                })
                .collect(),
        );
        out.push(fd_check("hist_interp", &[pmf, z], &|t, v| {
            let y = t.hist_interp(v[0], v[1], 4);
            t.sum_all(y)
        }));
    }

    out
}

pub fn random_test_patch(p: usize, depth: u8, seed: u64) -> RggbPatch {
    let mut rng = rwic_core::nn::seeded_rng(seed);
    let n = p * p;
    let channels: [Vec<u16>; 4] = std::array::from_fn(|_| {
        (0..n)
            .map(|_| {
                if depth == 0 {
                    0
                } else {
                    rng.gen_range(0..(1u32 << depth)) as u16
                }
            })
            .collect()
    });
    RggbPatch::new(p, (0, 0), depth.max(1), channels, vec![false; n]).unwrap()
}

/// FD check of the end-to-end training loss against backward, on a random
/// subset of weight coordinates.
pub fn check_end_to_end(seed: u64, coords_per_tensor: usize) -> OpCheck {
    let mut rng = rwic_core::nn::seeded_rng(seed ^ 0xE2E0);
    let mut weights = ModelWeights::init(ModelConfig::tiny(), seed).unwrap();
    // Move to a generic point: freshly initialized biases are exactly zero,
    // which parks bias-only activations (e.g. the first pixel's context)
    // right on the rectifier kink where central differences are undefined.
    {
        let mut jrng = rwic_core::nn::seeded_rng(seed ^ 0x4A17);
        weights.for_each_param_mut(|_, t| {
            for v in t.data_mut() {
                *v += 0.03 * rwic_core::nn::sample_standard_normal(&mut jrng);
            }
        });
    }
    let weights = weights;
    let patch = random_test_patch(8, 6, seed ^ 0x77);
    let depths = patch_bit_depth(&patch);

    // Fixed noise so the loss is a deterministic function of the weights.
    let sizes = ModelConfig::down_sizes(8);
    let d3 = sizes[3];
    let d4 = d3.div_ceil(2);
    let cfg = &weights.config;
    let noise_y = {
        let mut nrng = rwic_core::nn::seeded_rng(seed ^ 0x1111);
        rwic_core::nn::model::noise_quantize(
            &Tensor::zeros(&[cfg.latent_channels, d3, d3]),
            &mut nrng,
        )
    };
    let noise_z = {
        let mut nrng = rwic_core::nn::seeded_rng(seed ^ 0x2222);
        rwic_core::nn::model::noise_quantize(
            &Tensor::zeros(&[cfg.hyper_channels, d4, d4]),
            &mut nrng,
        )
    };
    let loss_of = |w: &ModelWeights| -> f64 {
        let graph = build_loss_graph(
            w,
            &patch,
            depths,
            LatentMode::Noise {
                y: noise_y.clone(),
                z: noise_z.clone(),
            },
        )
        .unwrap();
        graph.tape.value(graph.loss).item()
    };

    let graph = build_loss_graph(
        &weights,
        &patch,
        depths,
        LatentMode::Noise {
            y: noise_y.clone(),
            z: noise_z.clone(),
        },
    )
    .unwrap();
    let grads = graph.tape.backward(graph.loss);

    let mut max_rel: f64 = 0.0;
    let mut coords = 0;
    let mut skipped = 0;
    let mut names = Vec::new();
    weights.for_each_param(|name, t| names.push((name, t.len())));
    for (pi, &(name, len)) in names.iter().enumerate() {
        let analytic = grads[graph.param_vars[pi].1]
            .as_ref()
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&[len]));
        debug_assert_eq!(graph.param_vars[pi].0, name);
        for _ in 0..coords_per_tensor.min(len) {
            let i = rng.gen_range(0..len);
            let eval_at = |delta: f64| -> f64 {
                let mut w = weights.clone();
                let mut k = 0;
                w.for_each_param_mut(|_, t| {
                    if k == pi {
                        t.data_mut()[i] += delta;
                    }
                    k += 1;
                });
                loss_of(&w)
            };
            let est = (eval_at(FD_EPS) - eval_at(-FD_EPS)) / (2.0 * FD_EPS);
            // Central differences at this step size are only valid at
            // non-edge points: a rectifier kink inside (or essentially at)
            // the interval biases the estimate by a constant. Classify the
            // point by comparing against a much smaller step; the actual
            // check below still uses the nominal step.
            let probe = (eval_at(1e-6) - eval_at(-1e-6)) / 2e-6;
            if rel_err(est, probe) > 5e-5 {
                skipped += 1;
                continue;
            }
            let a = analytic.data()[i];
            // Tiny gradients drown in f64 evaluation noise.
            if est.abs().max(a.abs()) > 1e-5 {
                max_rel = max_rel.max(rel_err(est, a));
            }
            coords += 1;
        }
    }
    assert!(
        skipped * 2 < (coords + skipped).max(1),
        "too many edge points skipped ({skipped} of {})",
        coords + skipped
    );
    OpCheck {
        name: "end_to_end_loss",
        max_rel,
        coords,
    }
}
