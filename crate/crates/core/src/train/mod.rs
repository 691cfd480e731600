//! Rate-objective training and true-bitrate evaluation.
//!
//! The loss is exactly the rate: mean bits per Bayer pixel of the latent
//! and pixel streams under the model, with rounding replaced by uniform
//! noise. Evaluation compresses for real through the coder and audits
//! losslessness on every image.

pub mod corpus;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bitdepth::{patch_bit_depth, BitDepthMap};
use crate::codec::DepthMode;
use crate::container::{compress_image, decompress_image, Breakdown, CompressOptions};
use crate::error::{Error, Result};
use crate::nn::model::{build_loss_graph, LatentMode, LossGraph};
use crate::nn::{ModelConfig, ModelWeights, Tensor};
use crate::raw::{BayerImage, RggbPatch};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_decay: f64,
    pub plateau_epochs: usize,
    pub crop_size: usize,
    pub flip_probability: f64,
    pub seed: u64,
    /// Rough per-step tape budget in bytes; the batch halves (down to 8)
    /// until a step fits.
    pub batch_memory_budget: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 128,
            learning_rate: 1e-4,
            lr_decay: 0.1,
            plateau_epochs: 10,
            crop_size: 64,
            flip_probability: 0.5,
            seed: 0,
            batch_memory_budget: 2 << 30,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.crop_size == 0 {
            return Err(Error::Config("epochs, batch and crop must be positive".into()));
        }
        if self.learning_rate <= 0.0 || self.lr_decay <= 0.0 || self.lr_decay >= 1.0 {
            return Err(Error::Config("learning rate and decay must be positive (decay < 1)".into()));
        }
        if self.plateau_epochs == 0 {
            return Err(Error::Config("plateau patience must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.flip_probability) {
            return Err(Error::Config("flip probability must be in [0,1]".into()));
        }
        Ok(())
    }
}

/// Adam with bias correction (beta1 = 0.9, beta2 = 0.999, eps = 1e-8).
pub struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(weights: &ModelWeights) -> Self {
        let mut shapes = Vec::new();
        weights.for_each_param(|_, t| shapes.push(t.len()));
        Self {
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step(&mut self, weights: &mut ModelWeights, grads: &[Tensor], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let mut idx = 0;
        weights.for_each_param_mut(|_, param| {
            let g = grads[idx].data();
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            for (i, p) in param.data_mut().iter_mut().enumerate() {
                m[i] = 0.9 * m[i] + 0.1 * g[i];
                v[i] = 0.999 * v[i] + 0.001 * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                *p -= lr * mh / (vh.sqrt() + self.eps);
            }
            idx += 1;
        });
    }
}

/// Validation-plateau learning-rate decay: after `patience` consecutive
/// epochs without improvement the rate is multiplied by `factor`.
pub struct PlateauScheduler {
    best: f64,
    stale: usize,
    patience: usize,
    factor: f64,
    pub lr: f64,
}

impl PlateauScheduler {
    pub fn new(lr: f64, patience: usize, factor: f64) -> Self {
        Self {
            best: f64::INFINITY,
            stale: 0,
            patience,
            factor,
            lr,
        }
    }

    /// Feed one validation loss; returns true when the rate decays.
    pub fn observe(&mut self, val_loss: f64) -> bool {
        if val_loss < self.best {
            self.best = val_loss;
            self.stale = 0;
            return false;
        }
        self.stale += 1;
        if self.stale >= self.patience {
            self.lr *= self.factor;
            self.stale = 0;
            true
        } else {
            false
        }
    }
}

fn flip_plane<T: Copy>(data: &[T], p: usize, horizontal: bool, vertical: bool) -> Vec<T> {
    let mut out = Vec::with_capacity(data.len());
    for r in 0..p {
        let sr = if vertical { p - 1 - r } else { r };
        for c in 0..p {
            let sc = if horizontal { p - 1 - c } else { c };
            out.push(data[sr * p + sc]);
        }
    }
    out
}

/// Flip and crop augmentation; the bit depth of the result is recomputed
/// by the caller since a crop can lower the maximum sample.
pub fn augment_patch(
    patch: &RggbPatch,
    crop: usize,
    rng: &mut impl rand::Rng,
    flip_probability: f64,
) -> RggbPatch {
    let p = patch.patch_size();
    let crop = crop.min(p);
    let horizontal = rng.gen_bool(flip_probability);
    let vertical = rng.gen_bool(flip_probability);
    let max_off = p - crop;
    let r0 = if max_off > 0 { rng.gen_range(0..=max_off) } else { 0 };
    let c0 = if max_off > 0 { rng.gen_range(0..=max_off) } else { 0 };
    let channels: [Vec<u16>; 4] = std::array::from_fn(|c| {
        let flipped = flip_plane(patch.channel(c), p, horizontal, vertical);
        let mut out = Vec::with_capacity(crop * crop);
        for r in 0..crop {
            out.extend_from_slice(&flipped[(r0 + r) * p + c0..(r0 + r) * p + c0 + crop]);
        }
        out
    });
    let mask_full = flip_plane(patch.pad_mask(), p, horizontal, vertical);
    let mut mask = Vec::with_capacity(crop * crop);
    for r in 0..crop {
        mask.extend_from_slice(&mask_full[(r0 + r) * p + c0..(r0 + r) * p + c0 + crop]);
    }
    RggbPatch::new(crop, (0, 0), patch.container_bit_depth(), channels, mask)
        .expect("crop geometry is valid")
}

fn sample_rng(seed: u64, epoch: usize, index: usize) -> rand_chacha::ChaCha12Rng {
    // splitmix-style combine keeps streams independent of thread schedule
    let mut s = seed
        .wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(1 + epoch as u64))
        .wrapping_add(0xBF58_476D_1CE4_E5B9u64.wrapping_mul(1 + index as u64));
    s ^= s >> 30;
    s = s.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    s ^= s >> 27;
    crate::nn::seeded_rng(s)
}

fn sample_loss(
    weights: &ModelWeights,
    patch: &RggbPatch,
    seed: u64,
    epoch: usize,
    index: usize,
    crop: usize,
    flip_probability: f64,
) -> Result<(f64, Vec<Tensor>)> {
    let mut rng = sample_rng(seed, epoch, index);
    let sample = augment_patch(patch, crop, &mut rng, flip_probability);
    let depths = patch_bit_depth(&sample);
    let p = sample.patch_size();
    let sizes = ModelConfig::down_sizes(p);
    let d3 = sizes[3];
    let d4 = d3.div_ceil(2);
    let cfg = &weights.config;
    let noise_y = crate::nn::model::noise_quantize(
        &Tensor::zeros(&[cfg.latent_channels, d3, d3]),
        &mut rng,
    );
    let noise_z = crate::nn::model::noise_quantize(
        &Tensor::zeros(&[cfg.hyper_channels, d4, d4]),
        &mut rng,
    );
    let graph = build_loss_graph(weights, &sample, depths, LatentMode::Noise {
        y: noise_y,
        z: noise_z,
    })?;
    let loss = graph.tape.value(graph.loss).item();
    if !loss.is_finite() {
        return Err(Error::Diverged(format!(
            "non-finite loss at epoch {epoch} sample {index}"
        )));
    }
    let grads = graph.tape.backward(graph.loss);
    let mut out = Vec::with_capacity(graph.param_vars.len());
    for &(_, var) in &graph.param_vars {
        let g = grads[var]
            .as_ref()
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(graph.tape.value(var).dims()));
        out.push(g);
    }
    Ok((loss, out))
}

/// Deterministic validation loss: straight-through rounding, no noise.
pub fn validation_loss(weights: &ModelWeights, patches: &[&RggbPatch]) -> Result<f64> {
    let mut total = 0.0;
    let losses: Vec<Result<f64>> = patches
        .par_iter()
        .map(|patch| {
            let depths = patch_bit_depth(patch);
            let graph: LossGraph = build_loss_graph(weights, patch, depths, LatentMode::Round)?;
            Ok(graph.tape.value(graph.loss).item())
        })
        .collect();
    for l in losses {
        total += l?;
    }
    Ok(total / patches.len() as f64)
}

pub struct TrainOutcome {
    pub weights: ModelWeights,
    pub train_history: Vec<f64>,
    pub val_history: Vec<f64>,
    pub lr_history: Vec<f64>,
    pub effective_batch: usize,
}

/// Optimize the rate objective on a patch corpus. The corpus is split
/// 80/10/10 (train/validation/test) with the config seed; weights with the
/// best validation loss are returned.
pub fn train(
    corpus: &[RggbPatch],
    config: &TrainConfig,
    model_config: ModelConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    model_config.validate()?;
    if corpus.len() < 4 {
        return Err(Error::Config("corpus too small to split".into()));
    }
    if let Some(p) = corpus.iter().find(|p| config.crop_size > p.patch_size()) {
        return Err(Error::Config(format!(
            "crop {} exceeds patch size {}",
            config.crop_size,
            p.patch_size()
        )));
    }

    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut split_rng = crate::nn::seeded_rng(config.seed ^ 0xC0FF_EE00);
    order.shuffle(&mut split_rng);
    let n_train = (corpus.len() * 8).div_ceil(10).max(1);
    let n_val = ((corpus.len() - n_train) / 2).max(1);
    let train_idx: Vec<usize> = order[..n_train].to_vec();
    let val_idx: Vec<usize> = order[n_train..n_train + n_val].to_vec();

    let mut weights = ModelWeights::init(model_config, config.seed)?;
    let mut adam = Adam::new(&weights);
    let mut scheduler = PlateauScheduler::new(
        config.learning_rate,
        config.plateau_epochs,
        config.lr_decay,
    );

    // Halve the batch until a step's tape fits the budget.
    let probe = build_loss_graph(
        &weights,
        &augment_patch(
            &corpus[train_idx[0]],
            config.crop_size,
            &mut sample_rng(config.seed, 0, 0),
            0.0,
        ),
        patch_bit_depth(&corpus[train_idx[0]]),
        LatentMode::Round,
    )?;
    let mut tape_bytes = 0usize;
    for i in 0..probe.tape.len() {
        tape_bytes += probe.tape.value(i).len() * 8;
    }
    let sample_bytes = tape_bytes * 3; // values, grads, transient backward buffers
    let mut batch = config.batch_size;
    while batch > 8 && batch * sample_bytes > config.batch_memory_budget {
        batch /= 2;
    }
    drop(probe);

    let mut train_history = Vec::with_capacity(config.epochs);
    let mut val_history = Vec::with_capacity(config.epochs);
    let mut lr_history = Vec::with_capacity(config.epochs);
    let mut best_val = f64::INFINITY;
    let mut best_weights = weights.clone();

    for epoch in 0..config.epochs {
        let mut epoch_order = train_idx.clone();
        let mut epoch_rng = crate::nn::seeded_rng(config.seed ^ (epoch as u64).wrapping_mul(0x9E37));
        epoch_order.shuffle(&mut epoch_rng);

        let mut epoch_loss = 0.0;
        let mut seen = 0usize;
        for chunk in epoch_order.chunks(batch) {
            let results: Vec<Result<(f64, Vec<Tensor>)>> = chunk
                .par_iter()
                .enumerate()
                .map(|(in_batch, &pi)| {
                    sample_loss(
                        &weights,
                        &corpus[pi],
                        config.seed,
                        epoch,
                        seen + in_batch,
                        config.crop_size,
                        config.flip_probability,
                    )
                })
                .collect();
            let mut grad_acc: Option<Vec<Tensor>> = None;
            let mut batch_loss = 0.0;
            for r in results {
                let (loss, grads) = r?;
                batch_loss += loss;
                match &mut grad_acc {
                    None => grad_acc = Some(grads),
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(&grads) {
                            for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                                *x += y;
                            }
                        }
                    }
                }
            }
            let count = chunk.len() as f64;
            let mut grads = grad_acc.unwrap();
            for g in &mut grads {
                for v in g.data_mut() {
                    *v /= count;
                }
            }
            adam.step(&mut weights, &grads, scheduler.lr);
            epoch_loss += batch_loss;
            seen += chunk.len();
        }
        let train_loss = epoch_loss / seen as f64;

        let val_patches: Vec<&RggbPatch> = val_idx.iter().map(|&i| &corpus[i]).collect();
        let val_loss = validation_loss(&weights, &val_patches)?;
        if !val_loss.is_finite() {
            return Err(Error::Diverged(format!("non-finite validation loss at epoch {epoch}")));
        }
        if val_loss < best_val {
            best_val = val_loss;
            best_weights = weights.clone();
        }
        lr_history.push(scheduler.lr);
        scheduler.observe(val_loss);
        train_history.push(train_loss);
        val_history.push(val_loss);
    }

    best_weights.canonicalize();
    Ok(TrainOutcome {
        weights: best_weights,
        train_history,
        val_history,
        lr_history,
        effective_batch: batch,
    })
}

/// Bit-depth handling during evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalMode {
    /// Per-patch depths (production path).
    Adaptive,
    /// Every patch forced to the corpus maximum depth.
    FixedMax,
    /// Conditioned at the corpus maximum, masked to each patch's support.
    MaskedMax,
}

#[derive(Debug, Clone)]
pub struct RateRow {
    pub label: String,
    pub breakdown: Breakdown,
}

#[derive(Debug, Clone)]
pub struct RateReport {
    pub mode: EvalMode,
    pub rows: Vec<RateRow>,
    pub totals: Breakdown,
    /// Mean per-patch bit depth across the corpus (tight, adaptive map).
    pub mean_patch_depth: f64,
}

impl RateReport {
    pub fn bpp(&self) -> f64 {
        self.totals.bpp()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "label,pixels,pixel_bits,latent_bits,side_info_bits,header_bits,total_bits,bpp\n",
        );
        for row in self.rows.iter().chain(std::iter::once(&RateRow {
            label: "TOTAL".into(),
            breakdown: self.totals,
        })) {
            let b = &row.breakdown;
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{:.6}\n",
                row.label,
                b.pixel_count,
                b.pixel_bits,
                b.latent_bits,
                b.side_info_bits,
                b.header_bits,
                b.total_bits(),
                b.bpp()
            ));
        }
        out
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<24} {:>10} {:>10} {:>10} {:>9} {:>9} {:>8}\n",
            "image", "pixels", "pixel_b", "latent_b", "side_b", "hdr_b", "bpp"
        ));
        for row in self.rows.iter().chain(std::iter::once(&RateRow {
            label: "TOTAL".into(),
            breakdown: self.totals,
        })) {
            let b = &row.breakdown;
            out.push_str(&format!(
                "{:<24} {:>10} {:>10} {:>10} {:>9} {:>9} {:>8.4}\n",
                row.label,
                b.pixel_count,
                b.pixel_bits,
                b.latent_bits,
                b.side_info_bits,
                b.header_bits,
                b.bpp()
            ));
        }
        out
    }
}

/// Largest tight patch depth over a set of images.
pub fn corpus_max_depth(images: &[BayerImage], patch_size: usize) -> Result<u8> {
    let mut max = 0u8;
    for img in images {
        let rggb = crate::raw::pack_bayer(img);
        let patches = crate::raw::split_patches(&rggb, patch_size)?;
        let map = BitDepthMap::from_patches(&patches, false);
        max = max.max(map.max_depth());
    }
    Ok(max)
}

/// True compressed sizes through the coder, including headers and side
/// info. Every image is decompressed and compared, so evaluation doubles
/// as a lossless audit.
pub fn evaluate_bpp(
    images: &[BayerImage],
    weights: &ModelWeights,
    patch_size: usize,
    mode: EvalMode,
) -> Result<RateReport> {
    if images.is_empty() {
        return Err(Error::Config("empty evaluation corpus".into()));
    }
    let max_depth = corpus_max_depth(images, patch_size)?;
    let depth_mode = match mode {
        EvalMode::Adaptive => DepthMode::Adaptive,
        EvalMode::FixedMax => DepthMode::Fixed(max_depth),
        EvalMode::MaskedMax => DepthMode::Masked(max_depth),
    };
    let opts = CompressOptions {
        patch_size,
        mode: depth_mode,
        per_channel_depths: false,
    };

    let mut rows = Vec::with_capacity(images.len());
    let mut totals = Breakdown::default();
    let mut depth_sum = 0.0;
    let mut depth_count = 0usize;
    for (i, img) in images.iter().enumerate() {
        let compressed = compress_image(img, weights, &opts)?;
        let back = decompress_image(&compressed.bytes, weights)?;
        if &back != img {
            return Err(Error::Decode {
                patch: usize::MAX,
                reason: format!("lossless audit failed on image {i}"),
            });
        }
        let rggb = crate::raw::pack_bayer(img);
        let patches = crate::raw::split_patches(&rggb, patch_size)?;
        let map = BitDepthMap::from_patches(&patches, false);
        for pi in 0..map.patch_count() {
            depth_sum += f64::from(map.patch_depth(pi));
            depth_count += 1;
        }
        totals.accumulate(&compressed.breakdown);
        rows.push(RateRow {
            label: format!("image_{i:04}"),
            breakdown: compressed.breakdown,
        });
    }
    Ok(RateReport {
        mode,
        rows,
        totals,
        mean_patch_depth: depth_sum / depth_count as f64,
    })
}
