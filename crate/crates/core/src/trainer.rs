//! Optimisation of the field against a ray bank: photometric, visual-hull
//! and geometry losses, the depth-threshold schedule, warm-up phasing, Adam,
//! per-step loss logs and per-epoch checkpoints.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Ray, Vec3};
use crate::neuralfield::{
    save_checkpoint, Checkpoint, Field, FieldConfig, FieldError, OptimizerState, ParamSet, Pass, Real, WarpMode,
};
use crate::parallel;
use crate::raybank::{clip_to_bbox, BBox, RayBank, RestoredRay};
use crate::renderer::{estimate_depth, integrate_backward, sample_coarse, sample_fine, RaySampleSet};
use crate::simulator::MirrorArrayTemplate;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("ray bank does not match the mirror table: {0}")]
    Mismatch(String),
    #[error("no trainable rays: every ray misses the bounding box")]
    NoRays,
    #[error("training diverged in epoch {epoch}: mean photometric loss {mean:.6} exceeds {factor}x the first epoch's {reference:.6}")]
    Diverged {
        epoch: usize,
        mean: f64,
        reference: f64,
        factor: f64,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Training hyper-parameters. Defaults are the desk-scale setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Weight of both regularisers.
    pub lambda: f64,
    pub learning_rate: f64,
    pub batch_rays: usize,
    pub n_coarse: usize,
    pub n_fine: usize,
    /// Epochs during which only the radiance network trains.
    pub warmup_epochs: usize,
    pub tau_max: f64,
    /// Epochs for the threshold to climb from 0 to `tau_max` after warm-up.
    pub tau_ramp_epochs: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Void samples per foreground ray for the geometry loss.
    pub void_per_ray: usize,
    /// Rays per work unit; fixes the reduction order.
    pub chunk_rays: usize,
    /// `false` keeps the warp bypassed for the whole run.
    pub warp: bool,
    /// Learning-rate factor for the warp network and the latent codes.
    pub warp_lr_scale: f64,
    /// Colour composited behind the field.
    pub background: [f64; 3],
    /// Abort when an epoch's mean photometric loss exceeds this multiple of
    /// the first epoch's.
    pub divergence_factor: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 1e-2,
            learning_rate: 5e-4,
            batch_rays: 1024,
            n_coarse: 64,
            n_fine: 32,
            warmup_epochs: 3,
            tau_max: 20.0,
            tau_ramp_epochs: 5,
            epochs: 30,
            seed: 0,
            void_per_ray: 1,
            chunk_rays: 64,
            warp: true,
            warp_lr_scale: 1.0,
            background: [0.0, 0.6, 0.2],
            divergence_factor: 10.0,
        }
    }
}

impl TrainConfig {
    /// Full-scale setting: learning rate 1e-4, 4000 rays per batch.
    pub fn full() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_rays: 4000,
            n_coarse: 96,
            n_fine: 32,
            ..Self::default()
        }
    }

    /// Single-core setting for the tiny field: small batches, a larger step
    /// and a slower warp.
    pub fn desk() -> Self {
        Self {
            learning_rate: 5e-3,
            batch_rays: 32,
            n_coarse: 32,
            n_fine: 16,
            warp_lr_scale: 0.1,
            ..Self::default()
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "full" => Some(Self::full()),
            "desk" => Some(Self::desk()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |m: &str| Err(TrainError::Config(m.into()));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return fail("lambda must be finite and non-negative");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return fail("learning_rate must be finite and non-negative");
        }
        if !(self.warp_lr_scale >= 0.0 && self.warp_lr_scale.is_finite()) {
            return fail("warp_lr_scale must be finite and non-negative");
        }
        if self.batch_rays == 0 || self.chunk_rays == 0 {
            return fail("batch_rays and chunk_rays must be at least 1");
        }
        if self.n_coarse < 2 {
            return fail("n_coarse must be at least 2");
        }
        if !(self.tau_max >= 0.0) {
            return fail("tau_max must be non-negative");
        }
        if !(self.divergence_factor > 1.0) {
            return fail("divergence_factor must exceed 1");
        }
        Ok(())
    }

    /// Density threshold for a (possibly fractional) epoch.
    pub fn tau(&self, epoch: f64) -> f64 {
        tau_schedule(epoch, self.warmup_epochs, self.tau_max, self.tau_ramp_epochs)
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            ..AdamConfig::default()
        }
    }
}

/// Zero through warm-up, then a linear climb to `tau_max` over `ramp` epochs.
pub fn tau_schedule(epoch: f64, warmup: usize, tau_max: f64, ramp: usize) -> f64 {
    let since = epoch - warmup as f64;
    if since <= 0.0 {
        return 0.0;
    }
    if ramp == 0 {
        return tau_max;
    }
    tau_max * (since / ramp as f64).min(1.0)
}

/// Loss values of one step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_c: f64,
    pub l_v: f64,
    pub l_g: f64,
    pub l_total: f64,
}

/// One row of the loss log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub epoch: usize,
    pub step: usize,
    pub l_c: f64,
    pub l_v: f64,
    pub l_g: f64,
    pub l_total: f64,
    pub tau: f64,
}

pub fn write_loss_csv<W: Write>(mut w: W, records: &[LossRecord]) -> std::io::Result<()> {
    writeln!(w, "epoch,step,l_c,l_v,l_g,l_total,tau")?;
    for r in records {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            r.epoch, r.step, r.l_c, r.l_v, r.l_g, r.l_total, r.tau
        )?;
    }
    Ok(())
}

/// Mean squared error of the coarse and the fine render, summed, averaged
/// over rays. Each render's error is the mean over colour channels.
pub fn loss_photometric(coarse: &[[f64; 3]], fine: &[[f64; 3]], targets: &[[f64; 3]]) -> f64 {
    assert!(coarse.len() == targets.len() && fine.len() == targets.len());
    if targets.is_empty() {
        return 0.0;
    }
    let mse = |a: &[f64; 3], b: &[f64; 3]| (0..3).map(|k| (a[k] - b[k]).powi(2)).sum::<f64>() / 3.0;
    let total: f64 = targets
        .iter()
        .enumerate()
        .map(|(i, t)| mse(&coarse[i], t) + mse(&fine[i], t))
        .sum();
    total / targets.len() as f64
}

/// Mean squared density over samples on background rays.
pub fn loss_visual_hull(sigma: &[f64]) -> f64 {
    if sigma.is_empty() {
        debug!("visual hull loss: no background samples in batch");
        return 0.0;
    }
    sigma.iter().map(|s| s * s).sum::<f64>() / sigma.len() as f64
}

/// Mean squared density at void points sampled in front of each foreground
/// ray's thresholded depth. Background rays are ignored.
pub fn loss_geometry<T: Real>(
    field: &Field<T>,
    rays: &[TrainRay],
    mode: WarpMode,
    settings: &BatchSettings,
    seed: u64,
) -> Result<f64, TrainError> {
    let fg: Vec<TrainRay> = rays.iter().filter(|r| r.foreground).copied().collect();
    if fg.is_empty() {
        return Ok(0.0);
    }
    Ok(
        batch_gradients(field, &fg, mode, settings, PlanSource::Random { seed })?
            .losses
            .l_g,
    )
}

/// A bank ray prepared for training, with its box interval.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainRay {
    pub ray: Ray,
    pub color: [f64; 3],
    pub mirror: u16,
    pub foreground: bool,
    pub t_near: f64,
    pub t_far: f64,
}

impl TrainRay {
    /// `None` when the ray misses the box.
    pub fn from_restored(r: &RestoredRay, bbox: &BBox) -> Option<Self> {
        let ray = r.ray();
        let (t_near, t_far) = clip_to_bbox(&ray, bbox)?;
        Some(Self {
            ray,
            color: r.color.map(f64::from),
            mirror: r.mirror,
            foreground: r.foreground,
            t_near,
            t_far,
        })
    }
}

/// Rays of the bank that cross its box.
pub fn training_rays(bank: &RayBank) -> Vec<TrainRay> {
    bank.rays
        .iter()
        .filter_map(|r| TrainRay::from_restored(r, &bank.bbox))
        .collect()
}

/// Sample positions used for one ray in one step.
#[derive(Debug, Clone, PartialEq)]
pub struct RayPlan {
    pub coarse: Vec<f64>,
    /// Coarse and fine samples merged and sorted.
    pub fine: Vec<f64>,
    pub void: Vec<f64>,
}

/// Random plans from a seed, or plans fixed in advance (which makes the
/// loss a smooth function of the parameters).
#[derive(Debug, Clone, Copy)]
pub enum PlanSource<'a> {
    Random { seed: u64 },
    Fixed(&'a [RayPlan]),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub photometric: f64,
    pub visual_hull: f64,
    pub geometry: f64,
}

impl LossWeights {
    pub fn standard(lambda: f64) -> Self {
        Self {
            photometric: 1.0,
            visual_hull: lambda,
            geometry: lambda,
        }
    }
}

/// Per-step settings for [`batch_gradients`].
#[derive(Debug, Clone, PartialEq)]
pub struct BatchSettings {
    pub n_coarse: usize,
    pub n_fine: usize,
    pub void_per_ray: usize,
    pub tau: f64,
    pub weights: LossWeights,
    pub background: [f64; 3],
    pub chunk_rays: usize,
}

impl BatchSettings {
    pub fn from_config(config: &TrainConfig, tau: f64) -> Self {
        Self {
            n_coarse: config.n_coarse,
            n_fine: config.n_fine,
            void_per_ray: config.void_per_ray,
            tau,
            weights: LossWeights::standard(config.lambda),
            background: config.background,
            chunk_rays: config.chunk_rays,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BatchResult<T> {
    pub losses: LossBreakdown,
    pub grads: ParamSet<T>,
    pub plans: Vec<RayPlan>,
}

enum Sampler<'a> {
    Random(Box<ChaCha8Rng>),
    Fixed(&'a [RayPlan]),
}

impl Sampler<'_> {
    fn coarse(&mut self, i: usize, r: &TrainRay, n: usize) -> Vec<f64> {
        match self {
            Sampler::Random(rng) => sample_coarse(r.t_near, r.t_far, n, Some(rng)),
            Sampler::Fixed(p) => p[i].coarse.clone(),
        }
    }

    fn fine(&mut self, i: usize, r: &TrainRay, coarse: &[f64], weights: &[f64], n: usize) -> Vec<f64> {
        match self {
            Sampler::Random(rng) => sample_fine(coarse, weights, r.t_near, r.t_far, n, Some(rng)),
            Sampler::Fixed(p) => p[i].fine.clone(),
        }
    }

    fn void(&mut self, i: usize, r: &TrainRay, depth: f64, n: usize) -> Vec<f64> {
        match self {
            Sampler::Random(rng) if depth > r.t_near => (0..n).map(|_| rng.random_range(r.t_near..depth)).collect(),
            Sampler::Random(_) => Vec::new(),
            Sampler::Fixed(p) => p[i].void.clone(),
        }
    }
}

struct ChunkOutput<T> {
    grads: ParamSet<T>,
    void_grads: ParamSet<T>,
    sum_c: f64,
    sum_v: f64,
    sum_g: f64,
    count_g: usize,
    plans: Vec<RayPlan>,
}

fn gather(rays: &[TrainRay], ts: &[Vec<f64>]) -> (Vec<Vec3>, Vec<Vec3>, Vec<u16>) {
    let total = ts.iter().map(Vec::len).sum();
    let mut pos = Vec::with_capacity(total);
    let mut dir = Vec::with_capacity(total);
    let mut mir = Vec::with_capacity(total);
    for (r, t) in rays.iter().zip(ts) {
        for &tk in t {
            pos.push(r.ray.at(tk));
            dir.push(r.ray.direction);
            mir.push(r.mirror);
        }
    }
    (pos, dir, mir)
}

fn to_f64<T: Real>(v: &[T]) -> Vec<f64> {
    v.iter().map(|x| x.f64()).collect()
}

fn rgb_rows<T: Real>(v: &[T]) -> Vec<[f64; 3]> {
    v.chunks_exact(3)
        .map(|c| [c[0].f64(), c[1].f64(), c[2].f64()])
        .collect()
}

fn from_f64<T: Real>(v: &[f64]) -> Vec<T> {
    v.iter().map(|&x| T::of(x)).collect()
}

/// Scales shared by every chunk of a batch: photometric `w_c / N_rays` and
/// visual hull `w_v / N_background_samples`.
struct Scales {
    photometric: f64,
    visual_hull: f64,
}

/// Composites each ray's samples and returns the colour error gradients,
/// adding the photometric loss to `sum`.
#[allow(clippy::too_many_arguments)]
fn photometric_pass(
    rays: &[TrainRay],
    ts: &[Vec<f64>],
    sigma: &[f64],
    rgb: &[[f64; 3]],
    unit: f64,
    background: [f64; 3],
    scale: f64,
    sum: &mut f64,
    mut per_ray: impl FnMut(usize, &RaySampleSet, &[f64], &mut [f64]),
) -> (Vec<f64>, Vec<f64>) {
    let mut d_sigma = vec![0.0; sigma.len()];
    let mut d_rgb = vec![0.0; 3 * sigma.len()];
    let mut off = 0;
    for (i, (r, t)) in rays.iter().zip(ts).enumerate() {
        let k = t.len();
        let set = RaySampleSet::new(
            t.clone(),
            r.t_far,
            sigma[off..off + k].to_vec(),
            rgb[off..off + k].to_vec(),
            unit,
        );
        let gaps = set.optical_gaps();
        let integ = set.integrate();
        let pred = integ.composite(background);
        let err = [0, 1, 2].map(|c| pred[c] - r.color[c]);
        *sum += err.iter().map(|e| e * e).sum::<f64>() / 3.0;
        let g = err.map(|e| e * 2.0 / 3.0 * scale);
        let (ds, dc) = integrate_backward(&set.color, &gaps, &integ, g, background);
        d_sigma[off..off + k].copy_from_slice(&ds);
        for (j, c) in dc.iter().enumerate() {
            d_rgb[3 * (off + j)..3 * (off + j) + 3].copy_from_slice(c);
        }
        per_ray(i, &set, &integ.weights, &mut d_sigma[off..off + k]);
        off += k;
    }
    (d_sigma, d_rgb)
}

fn process_chunk<T: Real>(
    field: &Field<T>,
    rays: &[TrainRay],
    mode: WarpMode,
    s: &BatchSettings,
    scales: &Scales,
    mut sampler: Sampler,
) -> Result<ChunkOutput<T>, FieldError> {
    let unit = field.config.density_unit_mm;
    let mut grads = field.params.zeros_like();
    let mut void_grads = field.params.zeros_like();
    let (mut sum_c, mut sum_v, mut sum_g) = (0.0, 0.0, 0.0);

    let coarse_t: Vec<Vec<f64>> = rays
        .iter()
        .enumerate()
        .map(|(i, r)| sampler.coarse(i, r, s.n_coarse))
        .collect();
    let (pos, dir, mir) = gather(rays, &coarse_t);
    let coarse = field.forward(Pass::Coarse, &pos, &dir, &mir, mode)?;
    let mut fine_t = Vec::with_capacity(rays.len());
    let mut void_t = Vec::with_capacity(rays.len());
    let (ds, dc) = photometric_pass(
        rays,
        &coarse_t,
        &to_f64(coarse.sigma()),
        &rgb_rows(coarse.rgb()),
        unit,
        s.background,
        scales.photometric,
        &mut sum_c,
        |i, set, weights, d_sigma| {
            let r = &rays[i];
            if !r.foreground {
                for (d, &sg) in d_sigma.iter_mut().zip(&set.sigma) {
                    sum_v += sg * sg;
                    *d += scales.visual_hull * 2.0 * sg;
                }
            }
            fine_t.push(sampler.fine(i, r, &set.t, weights, s.n_fine));
            let depth = estimate_depth(set, s.tau);
            void_t.push(if r.foreground {
                sampler.void(i, r, depth, s.void_per_ray)
            } else {
                Vec::new()
            });
        },
    );
    field.backward(&coarse, &from_f64(&ds), &from_f64(&dc), &mut grads);
    drop(coarse);

    let (pos, dir, mir) = gather(rays, &fine_t);
    let fine = field.forward(Pass::Fine, &pos, &dir, &mir, mode)?;
    let (ds, dc) = photometric_pass(
        rays,
        &fine_t,
        &to_f64(fine.sigma()),
        &rgb_rows(fine.rgb()),
        unit,
        s.background,
        scales.photometric,
        &mut sum_c,
        |_, _, _, _| {},
    );
    field.backward(&fine, &from_f64(&ds), &from_f64(&dc), &mut grads);
    drop(fine);

    let (pos, dir, mir) = gather(rays, &void_t);
    let count_g = pos.len();
    if count_g > 0 {
        let void = field.forward(Pass::Coarse, &pos, &dir, &mir, mode)?;
        let sigma = to_f64(void.sigma());
        sum_g = sigma.iter().map(|x| x * x).sum();
        if s.weights.geometry > 0.0 {
            let d: Vec<f64> = sigma.iter().map(|x| 2.0 * x).collect();
            field.backward(&void, &from_f64(&d), &vec![T::zero(); 3 * count_g], &mut void_grads);
        }
    }
    let plans = coarse_t
        .into_iter()
        .zip(fine_t)
        .zip(void_t)
        .map(|((coarse, fine), void)| RayPlan { coarse, fine, void })
        .collect();
    Ok(ChunkOutput {
        grads,
        void_grads,
        sum_c,
        sum_v,
        sum_g,
        count_g,
        plans,
    })
}

/// Stable 64-bit mix of several seeds.
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut h = 0x9e37_79b9_7f4a_7c15u64;
    for &p in parts {
        h ^= p
            .wrapping_add(0x9e37_79b9_7f4a_7c15)
            .wrapping_add(h << 6)
            .wrapping_add(h >> 2);
        // splitmix64 finaliser
        h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h ^= h >> 31;
    }
    h
}

/// Losses and parameter gradients of one batch:
/// `w_c L_c + w_v L_v + w_g L_g`. Chunks run in parallel and are reduced in
/// order, so the result does not depend on the thread count.
pub fn batch_gradients<T: Real>(
    field: &Field<T>,
    rays: &[TrainRay],
    mode: WarpMode,
    s: &BatchSettings,
    plans: PlanSource,
) -> Result<BatchResult<T>, TrainError> {
    if let PlanSource::Fixed(p) = plans {
        if p.len() != rays.len() {
            return Err(TrainError::Config(format!("{} plans for {} rays", p.len(), rays.len())));
        }
    }
    let n = rays.len();
    let background_samples: usize = match plans {
        PlanSource::Random { .. } => rays.iter().filter(|r| !r.foreground).count() * s.n_coarse,
        PlanSource::Fixed(p) => rays
            .iter()
            .zip(p)
            .filter(|(r, _)| !r.foreground)
            .map(|(_, p)| p.coarse.len())
            .sum(),
    };
    let scales = Scales {
        photometric: if n > 0 { s.weights.photometric / n as f64 } else { 0.0 },
        visual_hull: if background_samples > 0 {
            s.weights.visual_hull / background_samples as f64
        } else {
            0.0
        },
    };
    let chunk = s.chunk_rays.max(1);
    let chunks = n.div_ceil(chunk);
    let outputs = parallel::map_indexed(chunks, |c| {
        let range = c * chunk..((c + 1) * chunk).min(n);
        let sampler = match plans {
            PlanSource::Random { seed } => {
                Sampler::Random(Box::new(ChaCha8Rng::seed_from_u64(mix_seed(&[seed, c as u64]))))
            }
            PlanSource::Fixed(p) => Sampler::Fixed(&p[range.clone()]),
        };
        process_chunk(field, &rays[range], mode, s, &scales, sampler)
    });
    let mut grads = field.params.zeros_like();
    let mut void_grads = field.params.zeros_like();
    let (mut sum_c, mut sum_v, mut sum_g, mut count_g) = (0.0, 0.0, 0.0, 0);
    let mut all_plans = Vec::with_capacity(n);
    for out in outputs {
        let out = out?;
        grads.add_scaled(&out.grads, T::one());
        void_grads.add_scaled(&out.void_grads, T::one());
        sum_c += out.sum_c;
        sum_v += out.sum_v;
        sum_g += out.sum_g;
        count_g += out.count_g;
        all_plans.extend(out.plans);
    }
    if count_g > 0 {
        grads.add_scaled(&void_grads, T::of(s.weights.geometry / count_g as f64));
    }
    if let Some(group) = grads.first_non_finite() {
        return Err(FieldError::NonFinite {
            group,
            what: "gradient",
        }
        .into());
    }
    let l_c = if n > 0 { sum_c / n as f64 } else { 0.0 };
    let l_v = if background_samples > 0 {
        sum_v / background_samples as f64
    } else {
        0.0
    };
    let l_g = if count_g > 0 { sum_g / count_g as f64 } else { 0.0 };
    if !(l_c + l_v + l_g).is_finite() {
        return Err(FieldError::NonFinite {
            group: "loss",
            what: "value",
        }
        .into());
    }
    let w = s.weights;
    Ok(BatchResult {
        losses: LossBreakdown {
            l_c,
            l_v,
            l_g,
            l_total: w.photometric * l_c + w.visual_hull * l_v + w.geometry * l_g,
        },
        grads,
        plans: all_plans,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// One bias-corrected Adam update; `step` counts updates including this one.
pub fn adam_update<T: Real>(p: &mut [T], g: &[T], m: &mut [T], v: &mut [T], step: u64, c: &AdamConfig) {
    let bc1 = 1.0 - c.beta1.powf(step as f64);
    let bc2 = 1.0 - c.beta2.powf(step as f64);
    for i in 0..p.len() {
        let gi = g[i].f64();
        let mi = c.beta1 * m[i].f64() + (1.0 - c.beta1) * gi;
        let vi = c.beta2 * v[i].f64() + (1.0 - c.beta2) * gi * gi;
        m[i] = T::of(mi);
        v[i] = T::of(vi);
        let update = c.learning_rate * (mi / bc1) / ((vi / bc2).sqrt() + c.epsilon);
        p[i] = T::of(p[i].f64() - update);
    }
}

/// Adam over every parameter group except those named in `frozen`, which
/// keep their values, moments and step counts. Groups listed in `scaled`
/// use the learning rate times their factor. Non-finite gradients abort
/// before anything changes.
pub fn adam_step<T: Real>(
    params: &mut ParamSet<T>,
    grads: &ParamSet<T>,
    state: &mut OptimizerState<T>,
    config: &AdamConfig,
    frozen: &[&str],
    scaled: &[(&str, f64)],
) -> Result<(), FieldError> {
    if let Some(group) = grads.first_non_finite() {
        return Err(FieldError::NonFinite {
            group,
            what: "gradient",
        });
    }
    let g = grads.groups();
    let ms = state.m.groups_mut();
    let vs = state.v.groups_mut();
    for (k, (((name, p), (_, m)), (_, v))) in params.groups_mut().into_iter().zip(ms).zip(vs).enumerate() {
        if frozen.contains(&name) {
            continue;
        }
        state.steps[k] += 1;
        let c = match scaled.iter().find(|(n, _)| *n == name) {
            Some(&(_, f)) => AdamConfig {
                learning_rate: config.learning_rate * f,
                ..*config
            },
            None => *config,
        };
        adam_update(p, g[k].1, m, v, state.steps[k], &c);
    }
    Ok(())
}

/// Summary of one epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochSummary {
    pub epoch: usize,
    pub steps: usize,
    pub mean: LossBreakdown,
    pub tau: f64,
    pub warp_active: bool,
}

/// Training state: the field, its optimiser and the loss log.
#[derive(Debug, Clone)]
pub struct Trainer<T: Real = f32> {
    pub field: Field<T>,
    pub optimizer: OptimizerState<T>,
    pub config: TrainConfig,
    /// Completed epochs.
    pub epoch: usize,
    pub log: Vec<LossRecord>,
    rays: Vec<TrainRay>,
    reference_lc: Option<f64>,
}

impl<T: Real> Trainer<T> {
    pub fn new(field: Field<T>, bank: &RayBank, config: TrainConfig) -> Result<Self, TrainError> {
        config.validate()?;
        if let Some(r) = bank.rays.iter().find(|r| r.mirror as usize >= field.mirrors) {
            return Err(TrainError::Mismatch(format!(
                "ray from mirror {} but the field has {} latent codes",
                r.mirror, field.mirrors
            )));
        }
        let rays = training_rays(bank);
        if rays.is_empty() {
            return Err(TrainError::NoRays);
        }
        debug!("{} of {} rays cross the box", rays.len(), bank.len());
        let optimizer = OptimizerState::new(&field.params);
        Ok(Self {
            field,
            optimizer,
            config,
            epoch: 0,
            log: Vec::new(),
            rays,
            reference_lc: None,
        })
    }

    /// Continues from saved optimiser state after `epoch` completed epochs.
    pub fn resume(mut self, optimizer: OptimizerState<T>, epoch: usize) -> Self {
        self.optimizer = optimizer;
        self.epoch = epoch;
        self
    }

    pub fn rays(&self) -> &[TrainRay] {
        &self.rays
    }

    pub fn warp_active(&self) -> bool {
        self.config.warp && self.epoch >= self.config.warmup_epochs
    }

    pub fn warp_mode(&self) -> WarpMode {
        if self.warp_active() {
            WarpMode::Active
        } else {
            WarpMode::Bypass
        }
    }

    pub fn frozen_groups(&self) -> &'static [&'static str] {
        if self.warp_active() {
            &[]
        } else {
            &["warp", "latents"]
        }
    }

    /// One full pass over the shuffled rays.
    pub fn run_epoch(&mut self) -> Result<EpochSummary, TrainError> {
        let epoch = self.epoch;
        let tau = self.config.tau(epoch as f64);
        let settings = BatchSettings::from_config(&self.config, tau);
        let mode = self.warp_mode();
        let frozen = self.frozen_groups();
        let f = self.config.warp_lr_scale;
        let scaled = [("warp", f), ("latents", f)];
        let adam = self.config.adam();
        let mut order: Vec<usize> = (0..self.rays.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(&[
            self.config.seed,
            epoch as u64,
        ])));
        let mut total = LossBreakdown::default();
        let mut steps = 0;
        for (step, idx) in order.chunks(self.config.batch_rays).enumerate() {
            let batch: Vec<TrainRay> = idx.iter().map(|&i| self.rays[i]).collect();
            let seed = mix_seed(&[self.config.seed, epoch as u64, step as u64, 1]);
            let res = batch_gradients(&self.field, &batch, mode, &settings, PlanSource::Random { seed })?;
            adam_step(
                &mut self.field.params,
                &res.grads,
                &mut self.optimizer,
                &adam,
                frozen,
                &scaled,
            )?;
            let l = res.losses;
            self.log.push(LossRecord {
                epoch,
                step,
                l_c: l.l_c,
                l_v: l.l_v,
                l_g: l.l_g,
                l_total: l.l_total,
                tau,
            });
            total.l_c += l.l_c;
            total.l_v += l.l_v;
            total.l_g += l.l_g;
            total.l_total += l.l_total;
            steps += 1;
        }
        let k = steps as f64;
        let mean = LossBreakdown {
            l_c: total.l_c / k,
            l_v: total.l_v / k,
            l_g: total.l_g / k,
            l_total: total.l_total / k,
        };
        let summary = EpochSummary {
            epoch,
            steps,
            mean,
            tau,
            warp_active: mode == WarpMode::Active,
        };
        info!(
            "epoch {epoch}: L_c {:.5} L_v {:.5} L_g {:.5} total {:.5} tau {tau}",
            mean.l_c, mean.l_v, mean.l_g, mean.l_total
        );
        self.epoch += 1;
        match self.reference_lc {
            None => self.reference_lc = Some(mean.l_c),
            Some(reference) if mean.l_c > self.config.divergence_factor * reference => {
                return Err(TrainError::Diverged {
                    epoch,
                    mean: mean.l_c,
                    reference,
                    factor: self.config.divergence_factor,
                })
            }
            Some(_) => {}
        }
        Ok(summary)
    }

    /// Runs the remaining epochs, calling `on_epoch` after each.
    pub fn train(
        &mut self,
        mut on_epoch: impl FnMut(&Self, &EpochSummary) -> Result<(), TrainError>,
    ) -> Result<Vec<EpochSummary>, TrainError> {
        let mut out = Vec::new();
        while self.epoch < self.config.epochs {
            let s = self.run_epoch()?;
            on_epoch(self, &s)?;
            out.push(s);
        }
        Ok(out)
    }
}

impl Trainer<f32> {
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            field: self.field.clone(),
            optimizer: Some(self.optimizer.clone()),
            epoch: self.epoch,
        }
    }
}

/// Trained field with its logs.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub field: Field<f32>,
    pub log: Vec<LossRecord>,
    pub epochs: Vec<EpochSummary>,
}

/// Trains a fresh field on `bank`. With `out_dir`, a checkpoint
/// `epoch-NNN.ckpt` and the running `loss.csv` are written after each epoch.
pub fn train(
    bank: &RayBank,
    template: &MirrorArrayTemplate,
    field_config: FieldConfig,
    config: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome, TrainError> {
    if bank.per_mirror.len() != template.len() {
        return Err(TrainError::Mismatch(format!(
            "bank covers {} mirrors, template has {}",
            bank.per_mirror.len(),
            template.len()
        )));
    }
    let field = Field::<f32>::new(field_config, bank.bbox, template.len(), template.anchor, config.seed)?;
    let mut trainer = Trainer::new(field, bank, config.clone())?;
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
    }
    let epochs = trainer.train(|t, s| {
        if let Some(dir) = out_dir {
            let f = File::create(dir.join(format!("epoch-{:03}.ckpt", s.epoch)))?;
            save_checkpoint(BufWriter::new(f), &t.checkpoint())?;
            write_loss_csv(BufWriter::new(File::create(dir.join("loss.csv"))?), &t.log)?;
        }
        Ok(())
    })?;
    Ok(TrainOutcome {
        field: trainer.field,
        log: trainer.log,
        epochs,
    })
}
