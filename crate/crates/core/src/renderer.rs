//! Sampling along rays, volume integration and the thresholded depth
//! estimate, plus whole-image rendering of a trained field.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::geometry::{PinholeCamera, Ray};
use crate::imageio::RgbImage;
use crate::neuralfield::{Field, FieldError, Pass, Real, WarpMode};
use crate::parallel;
use crate::raybank::clip_to_bbox;

/// `n` samples on `[t_near, t_far]`, one per equal stratum: uniformly
/// jittered with an RNG, at stratum midpoints without one.
pub fn sample_coarse(t_near: f64, t_far: f64, n: usize, rng: Option<&mut dyn RngCore>) -> Vec<f64> {
    let step = (t_far - t_near) / n as f64;
    match rng {
        Some(rng) => (0..n)
            .map(|i| t_near + step * (i as f64 + rng.random::<f64>()))
            .collect(),
        None => (0..n).map(|i| t_near + step * (i as f64 + 0.5)).collect(),
    }
}

/// Piecewise-constant density on `edges`, sampled by CDF inversion.
#[derive(Debug, Clone, PartialEq)]
pub struct PiecewiseConstant1D {
    pub edges: Vec<f64>,
    /// `cdf[0] = 0`, `cdf[n] = 1`.
    pub cdf: Vec<f64>,
}

impl PiecewiseConstant1D {
    /// Bin masses proportional to `weights` (negatives count as zero); all
    /// zero weights give a uniform distribution.
    pub fn new(edges: Vec<f64>, weights: &[f64]) -> Self {
        assert_eq!(edges.len(), weights.len() + 1, "one weight per bin");
        let clean: Vec<f64> = weights.iter().map(|&w| if w > 0.0 { w } else { 0.0 }).collect();
        let total: f64 = clean.iter().sum();
        let n = clean.len();
        let mut cdf = Vec::with_capacity(n + 1);
        cdf.push(0.0);
        let mut acc = 0.0;
        for (i, w) in clean.iter().enumerate() {
            acc += if total > 0.0 { w / total } else { 1.0 / n as f64 };
            cdf.push(if i + 1 == n { 1.0 } else { acc });
        }
        Self { edges, cdf }
    }

    /// Inverse CDF at `u ∈ [0, 1)`.
    pub fn sample(&self, u: f64) -> f64 {
        let n = self.cdf.len() - 1;
        // first bin whose upper cdf exceeds u, skipping empty bins
        let i = self.cdf[1..].partition_point(|&c| c <= u).min(n - 1);
        let (c0, c1) = (self.cdf[i], self.cdf[i + 1]);
        let f = if c1 > c0 {
            ((u - c0) / (c1 - c0)).clamp(0.0, 1.0)
        } else {
            0.5
        };
        self.edges[i] + f * (self.edges[i + 1] - self.edges[i])
    }
}

/// Bin edges owned by each coarse sample: midpoints between neighbours,
/// closed by the interval ends.
pub fn coarse_bin_edges(coarse: &[f64], t_near: f64, t_far: f64) -> Vec<f64> {
    let mut edges = Vec::with_capacity(coarse.len() + 1);
    edges.push(t_near);
    edges.extend(coarse.windows(2).map(|w| 0.5 * (w[0] + w[1])));
    edges.push(t_far);
    edges
}

/// Draws `n_fine` samples proportional to the coarse weights and merges them
/// with the coarse samples. Without an RNG the quantiles `(k + ½)/n` are used.
pub fn sample_fine(
    coarse: &[f64],
    weights: &[f64],
    t_near: f64,
    t_far: f64,
    n_fine: usize,
    rng: Option<&mut dyn RngCore>,
) -> Vec<f64> {
    let pdf = PiecewiseConstant1D::new(coarse_bin_edges(coarse, t_near, t_far), weights);
    let mut out = coarse.to_vec();
    match rng {
        Some(rng) => out.extend((0..n_fine).map(|_| pdf.sample(rng.random::<f64>()))),
        None => out.extend((0..n_fine).map(|k| pdf.sample((k as f64 + 0.5) / n_fine as f64))),
    }
    out.sort_by(f64::total_cmp);
    out
}

/// Gaps between consecutive samples, the last one closed by `t_far`.
pub fn sample_gaps(t: &[f64], t_far: f64) -> Vec<f64> {
    let n = t.len();
    (0..n)
        .map(|i| if i + 1 < n { t[i + 1] - t[i] } else { t_far - t[i] })
        .collect()
}

/// Samples along one ray with their field values. Densities are per
/// `unit_mm` of path length; `t` and gaps are in millimetres.
#[derive(Debug, Clone, PartialEq)]
pub struct RaySampleSet {
    pub t: Vec<f64>,
    pub delta: Vec<f64>,
    pub sigma: Vec<f64>,
    pub color: Vec<[f64; 3]>,
    pub unit_mm: f64,
}

impl RaySampleSet {
    pub fn new(t: Vec<f64>, t_far: f64, sigma: Vec<f64>, color: Vec<[f64; 3]>, unit_mm: f64) -> Self {
        assert!(t.len() == sigma.len() && t.len() == color.len());
        debug_assert!(t.windows(2).all(|w| w[0] <= w[1]), "samples must be sorted");
        let delta = sample_gaps(&t, t_far);
        Self {
            t,
            delta,
            sigma,
            color,
            unit_mm,
        }
    }

    pub fn integrate(&self) -> Integration {
        integrate(&self.sigma, &self.color, &self.optical_gaps())
    }

    /// Gaps in density units.
    pub fn optical_gaps(&self) -> Vec<f64> {
        self.delta.iter().map(|d| d / self.unit_mm).collect()
    }
}

/// Result of compositing one ray.
#[derive(Debug, Clone, PartialEq)]
pub struct Integration {
    /// `Σ wᵢ cᵢ`, without any background.
    pub color: [f64; 3],
    pub opacity: f64,
    pub weights: Vec<f64>,
    /// Transmittance before each sample, plus the final one (`n + 1` values).
    pub transmittance: Vec<f64>,
}

impl Integration {
    pub fn composite(&self, background: [f64; 3]) -> [f64; 3] {
        [0, 1, 2].map(|k| self.color[k] + (1.0 - self.opacity) * background[k])
    }
}

/// `wᵢ = Tᵢ (1 − e^{−σᵢδᵢ})`, `Tᵢ = e^{−Σ_{j<i} σⱼδⱼ}`, `δ` in density units.
pub fn integrate(sigma: &[f64], color: &[[f64; 3]], delta: &[f64]) -> Integration {
    let n = sigma.len();
    let mut transmittance = Vec::with_capacity(n + 1);
    let mut weights = Vec::with_capacity(n);
    let mut acc_depth = 0.0f64;
    let mut rgb = [0.0; 3];
    transmittance.push(1.0);
    for i in 0..n {
        let t = (-acc_depth).exp();
        let tau = sigma[i] * delta[i];
        let w = t * -(-tau).exp_m1();
        acc_depth += tau;
        weights.push(w);
        transmittance.push((-acc_depth).exp());
        for k in 0..3 {
            rgb[k] += w * color[i][k];
        }
    }
    let opacity = weights.iter().sum();
    Integration {
        color: rgb,
        opacity,
        weights,
        transmittance,
    }
}

/// Gradients of `g · composite(background)` with respect to densities and
/// colours, where `g` is the upstream gradient of the pixel colour.
pub fn integrate_backward(
    color: &[[f64; 3]],
    delta: &[f64],
    integ: &Integration,
    g: [f64; 3],
    background: [f64; 3],
) -> (Vec<f64>, Vec<[f64; 3]>) {
    let n = color.len();
    let v: Vec<f64> = (0..n)
        .map(|i| (0..3).map(|k| g[k] * (color[i][k] - background[k])).sum())
        .collect();
    let mut d_sigma = vec![0.0; n];
    let mut tail = 0.0; // Σ_{k>i} w_k v_k
    for i in (0..n).rev() {
        d_sigma[i] = delta[i] * (integ.transmittance[i + 1] * v[i] - tail);
        tail += integ.weights[i] * v[i];
    }
    let d_color = integ.weights.iter().map(|&w| g.map(|gk| w * gk)).collect();
    (d_sigma, d_color)
}

/// `0` for `x ≤ τ`, else `x`.
pub fn h_filter(x: f64, tau: f64) -> f64 {
    if x <= tau {
        0.0
    } else {
        x
    }
}

/// Expected termination distance using thresholded densities for both the
/// opacity and the transmittance. Carries no gradient.
pub fn estimate_depth(samples: &RaySampleSet, tau: f64) -> f64 {
    let filtered: Vec<f64> = samples.sigma.iter().map(|&s| h_filter(s, tau)).collect();
    let gaps = samples.optical_gaps();
    let mut acc = 0.0f64;
    let mut depth = 0.0;
    for i in 0..filtered.len() {
        let tau_i = filtered[i] * gaps[i];
        depth += (-acc).exp() * -(-tau_i).exp_m1() * samples.t[i];
        acc += tau_i;
    }
    depth
}

/// Sampling and output settings for inference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RenderConfig {
    pub n_coarse: usize,
    pub n_fine: usize,
    pub width: u32,
    pub height: u32,
    /// Colour shown where the field leaves the ray transparent.
    pub background: [f64; 3],
    /// Threshold applied to densities for the depth output.
    pub depth_tau: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            n_coarse: 64,
            n_fine: 32,
            width: 160,
            height: 120,
            background: [0.0, 0.6, 0.2],
            depth_tau: 0.0,
        }
    }
}

impl RenderConfig {
    /// Full-resolution setting: 96 + 32 samples at 1200×900.
    pub fn full() -> Self {
        Self {
            n_coarse: 96,
            n_fine: 32,
            width: 1200,
            height: 900,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.n_coarse < 2 {
            return Err(format!("n_coarse must be at least 2, got {}", self.n_coarse));
        }
        if self.width == 0 || self.height == 0 {
            return Err("image size must be positive".into());
        }
        Ok(())
    }
}

/// Outcome of rendering one ray.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RayRender {
    pub color: [f64; 3],
    pub opacity: f64,
    /// Thresholded depth from the fine pass, `0` when the ray misses the box.
    pub depth: f64,
}

/// Renders rays through the field with deterministic sampling and the warp
/// bypassed.
pub fn render_rays<T: Real>(
    field: &Field<T>,
    rays: &[Ray],
    config: &RenderConfig,
) -> Result<Vec<RayRender>, FieldError> {
    let unit = field.config.density_unit_mm;
    let anchor = field.anchor as u16;
    let mut out = vec![
        RayRender {
            color: config.background,
            opacity: 0.0,
            depth: 0.0,
        };
        rays.len()
    ];
    let hits: Vec<(usize, f64, f64)> = rays
        .iter()
        .enumerate()
        .filter_map(|(i, r)| clip_to_bbox(r, &field.bbox).map(|(a, b)| (i, a, b)))
        .collect();
    if hits.is_empty() {
        return Ok(out);
    }
    let evaluate = |pass: Pass, ts: &[Vec<f64>]| -> Result<(Vec<f64>, Vec<[f64; 3]>), FieldError> {
        let mut pos = Vec::new();
        let mut dir = Vec::new();
        for (&(i, _, _), t) in hits.iter().zip(ts) {
            for &tk in t {
                pos.push(rays[i].at(tk));
                dir.push(rays[i].direction);
            }
        }
        let mirrors = vec![anchor; pos.len()];
        let tape = field.forward(pass, &pos, &dir, &mirrors, WarpMode::Bypass)?;
        let sigma = tape.sigma().iter().map(|s| s.f64()).collect();
        let rgb = tape
            .rgb()
            .chunks_exact(3)
            .map(|c| [c[0].f64(), c[1].f64(), c[2].f64()])
            .collect();
        Ok((sigma, rgb))
    };
    let coarse_t: Vec<Vec<f64>> = hits
        .iter()
        .map(|&(_, a, b)| sample_coarse(a, b, config.n_coarse, None))
        .collect();
    let (cs, cc) = evaluate(Pass::Coarse, &coarse_t)?;
    let mut fine_t = Vec::with_capacity(hits.len());
    let nc = config.n_coarse;
    for (r, &(_, a, b)) in hits.iter().enumerate() {
        let span = r * nc..(r + 1) * nc;
        let gaps: Vec<f64> = sample_gaps(&coarse_t[r], b).iter().map(|d| d / unit).collect();
        let integ = integrate(&cs[span.clone()], &cc[span], &gaps);
        fine_t.push(sample_fine(&coarse_t[r], &integ.weights, a, b, config.n_fine, None));
    }
    let (fs, fc) = evaluate(Pass::Fine, &fine_t)?;
    let m = nc + config.n_fine;
    for (r, &(i, _, b)) in hits.iter().enumerate() {
        let span = r * m..(r + 1) * m;
        let set = RaySampleSet::new(fine_t[r].clone(), b, fs[span.clone()].to_vec(), fc[span].to_vec(), unit);
        let integ = set.integrate();
        out[i] = RayRender {
            color: integ.composite(config.background),
            opacity: integ.opacity,
            depth: estimate_depth(&set, config.depth_tau),
        };
    }
    Ok(out)
}

/// Rendered image with per-pixel opacity and depth.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedView {
    pub image: RgbImage,
    pub opacity: Vec<f64>,
    pub depth: Vec<f64>,
}

/// Renders the camera's full image. Rows are processed in parallel.
pub fn render_view<T: Real>(
    field: &Field<T>,
    camera: &PinholeCamera,
    config: &RenderConfig,
) -> Result<RenderedView, FieldError> {
    let k = camera.intrinsics;
    let rows = parallel::map_indexed(k.height as usize, |y| {
        let rays: Vec<Ray> = (0..k.width).map(|x| camera.ray(x as f64, y as f64)).collect();
        render_rays(field, &rays, config)
    });
    let mut pixels = Vec::with_capacity((k.width * k.height) as usize);
    let mut opacity = Vec::with_capacity(pixels.capacity());
    let mut depth = Vec::with_capacity(pixels.capacity());
    for row in rows {
        for r in row? {
            pixels.push(r.color.map(|c| c as f32));
            opacity.push(r.opacity);
            depth.push(r.depth);
        }
    }
    Ok(RenderedView {
        image: RgbImage::from_pixels(k.width, k.height, pixels),
        opacity,
        depth,
    })
}
