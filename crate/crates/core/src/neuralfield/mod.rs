//! Radiance field with a per-mirror warping field and exact reverse-mode
//! gradients.
//!
//! Positions enter the networks normalised to `[-1, 1]³` by the bounding
//! box. Displacements are produced in those normalised units; the public
//! single-point API converts them to millimetres. Densities are expressed
//! per `density_unit_mm` of path length.

mod checkpoint;
mod encoding;
mod mlp;
mod real;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, OptimizerState, CHECKPOINT_MAGIC};
pub use encoding::{encode_backward, encode_vec, encoded_dim, positional_encode};
pub use mlp::DensityActivation;
pub use real::Real;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Vec3;
use crate::raybank::BBox;
use mlp::{RadianceNet, RadianceTape, WarpNet, WarpTape};

#[derive(Debug, Error)]
pub enum FieldError {
    #[error("mirror index {index} out of range for {mirrors} mirrors")]
    UnknownMirror { index: usize, mirrors: usize },
    #[error("invalid field configuration: {0}")]
    Config(String),
    #[error("non-finite {what} in {group}")]
    NonFinite { group: &'static str, what: &'static str },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Network sizes and encodings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FieldConfig {
    pub radiance_width: usize,
    pub radiance_depth: usize,
    /// Trunk layer after which the encoded position is concatenated again.
    pub skip_after: Option<usize>,
    pub warp_width: usize,
    /// Number of affine layers in the warp network.
    pub warp_depth: usize,
    pub latent_dim: usize,
    pub position_octaves: usize,
    pub direction_octaves: usize,
    pub warp_octaves: usize,
    pub density_activation: DensityActivation,
    /// Use a second radiance network for the fine pass.
    pub separate_fine: bool,
    /// Path length, in millimetres, of one density unit.
    pub density_unit_mm: f64,
    pub latent_init_std: f64,
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self::full()
    }
}

impl FieldConfig {
    /// Full-size networks: 8×256 radiance trunk, 5×128 warp.
    pub fn full() -> Self {
        Self {
            radiance_width: 256,
            radiance_depth: 8,
            skip_after: Some(4),
            warp_width: 128,
            warp_depth: 5,
            latent_dim: 16,
            position_octaves: 10,
            direction_octaves: 4,
            warp_octaves: 6,
            density_activation: DensityActivation::Softplus,
            separate_fine: false,
            density_unit_mm: 100.0,
            latent_init_std: 0.01,
        }
    }

    /// Half-width networks for desktop runs.
    pub fn desk() -> Self {
        Self {
            radiance_width: 128,
            warp_width: 64,
            ..Self::full()
        }
    }

    /// Small networks for single-core experiments and tests.
    pub fn tiny() -> Self {
        Self {
            radiance_width: 64,
            radiance_depth: 4,
            skip_after: Some(1),
            warp_width: 32,
            position_octaves: 4,
            ..Self::full()
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "full" => Some(Self::full()),
            "desk" => Some(Self::desk()),
            "tiny" => Some(Self::tiny()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<(), FieldError> {
        let bad = |m: &str| Err(FieldError::Config(m.to_string()));
        if self.radiance_width < 2 || self.radiance_depth == 0 {
            return bad("radiance network needs width ≥ 2 and depth ≥ 1");
        }
        if self.warp_width == 0 || self.warp_depth == 0 {
            return bad("warp network needs width and depth ≥ 1");
        }
        if !(self.density_unit_mm > 0.0) || !(self.latent_init_std >= 0.0) {
            return bad("density unit must be positive and latent std non-negative");
        }
        Ok(())
    }

    fn radiance_net(&self) -> RadianceNet {
        RadianceNet::new(
            encoded_dim(3, self.position_octaves),
            encoded_dim(3, self.direction_octaves),
            self.radiance_width,
            self.radiance_depth,
            self.skip_after,
            self.density_activation,
        )
    }

    fn warp_net(&self) -> WarpNet {
        WarpNet::new(
            encoded_dim(3, self.warp_octaves) + self.latent_dim,
            self.warp_width,
            self.warp_depth,
        )
    }
}

/// All trainable tensors; also used for gradients and optimizer moments.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T> {
    pub radiance: Vec<T>,
    pub radiance_fine: Option<Vec<T>>,
    pub warp: Vec<T>,
    /// One code per mirror, `mirrors × latent_dim`, row-major.
    pub latents: Vec<T>,
}

impl<T: Real> ParamSet<T> {
    pub fn zeros_like(&self) -> Self {
        Self {
            radiance: vec![T::zero(); self.radiance.len()],
            radiance_fine: self.radiance_fine.as_ref().map(|f| vec![T::zero(); f.len()]),
            warp: vec![T::zero(); self.warp.len()],
            latents: vec![T::zero(); self.latents.len()],
        }
    }

    pub fn groups(&self) -> Vec<(&'static str, &[T])> {
        let mut g = vec![("radiance", self.radiance.as_slice())];
        if let Some(f) = &self.radiance_fine {
            g.push(("radiance_fine", f.as_slice()));
        }
        g.push(("warp", self.warp.as_slice()));
        g.push(("latents", self.latents.as_slice()));
        g
    }

    pub fn groups_mut(&mut self) -> Vec<(&'static str, &mut Vec<T>)> {
        let mut g = vec![("radiance", &mut self.radiance)];
        if let Some(f) = &mut self.radiance_fine {
            g.push(("radiance_fine", f));
        }
        g.push(("warp", &mut self.warp));
        g.push(("latents", &mut self.latents));
        g
    }

    pub fn len(&self) -> usize {
        self.groups().iter().map(|(_, g)| g.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `self += scale · other`.
    pub fn add_scaled(&mut self, other: &Self, scale: T) {
        for ((_, a), (_, b)) in self.groups_mut().into_iter().zip(other.groups()) {
            for (x, &y) in a.iter_mut().zip(b) {
                *x += scale * y;
            }
        }
    }

    /// First group holding a non-finite value.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        self.groups()
            .into_iter()
            .find(|(_, g)| g.iter().any(|x| !x.is_finite()))
            .map(|(name, _)| name)
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        let c = |v: &Vec<T>| v.iter().map(|&x| U::of(x.f64())).collect::<Vec<U>>();
        ParamSet {
            radiance: c(&self.radiance),
            radiance_fine: self.radiance_fine.as_ref().map(c),
            warp: c(&self.warp),
            latents: c(&self.latents),
        }
    }
}

/// Which radiance network evaluates a batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pass {
    Coarse,
    Fine,
}

/// Whether sample positions of non-anchor mirrors go through the warp.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WarpMode {
    Bypass,
    Active,
}

/// Model: configuration, volume, mirror table and parameters.
#[derive(Debug)]
pub struct Field<T> {
    pub config: FieldConfig,
    pub bbox: BBox,
    pub mirrors: usize,
    pub anchor: usize,
    pub params: ParamSet<T>,
    radiance_net: RadianceNet,
    warp_net: WarpNet,
    warp_evals: Arc<AtomicUsize>,
}

impl<T: Real> Clone for Field<T> {
    /// Clones get their own warp-evaluation counter, starting at zero.
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            bbox: self.bbox,
            mirrors: self.mirrors,
            anchor: self.anchor,
            params: self.params.clone(),
            radiance_net: self.radiance_net.clone(),
            warp_net: self.warp_net.clone(),
            warp_evals: Arc::new(AtomicUsize::new(0)),
        }
    }
}

/// Forward record of one batch, consumed by [`Field::backward`].
pub struct FieldTape<T> {
    pass: Pass,
    /// Points routed through the warp and their mirror indices.
    warped_rows: Vec<(usize, usize)>,
    warp: Option<WarpTape<T>>,
    /// Normalised positions after warping, `n × 3`.
    warped: Vec<T>,
    radiance: RadianceTape<T>,
}

impl<T: Real> FieldTape<T> {
    pub fn len(&self) -> usize {
        self.radiance.n
    }

    pub fn is_empty(&self) -> bool {
        self.radiance.n == 0
    }

    /// Densities per unit path length.
    pub fn sigma(&self) -> &[T] {
        &self.radiance.sigma
    }

    /// Colours, `n × 3`.
    pub fn rgb(&self) -> &[T] {
        &self.radiance.rgb
    }

    /// Normalised sample positions fed to the radiance network, `n × 3`.
    pub fn warped_positions(&self) -> &[T] {
        &self.warped
    }
}

impl<T: Real> Field<T> {
    /// Initialises all parameters from `seed`. Weights are drawn in double
    /// precision, so fields of different scalar types agree up to rounding.
    pub fn new(config: FieldConfig, bbox: BBox, mirrors: usize, anchor: usize, seed: u64) -> Result<Self, FieldError> {
        config.validate()?;
        bbox.validate().map_err(|e| FieldError::Config(e.to_string()))?;
        if anchor >= mirrors {
            return Err(FieldError::UnknownMirror { index: anchor, mirrors });
        }
        let radiance_net = config.radiance_net();
        let warp_net = config.warp_net();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut radiance = vec![0.0; radiance_net.len];
        radiance_net.init(&mut radiance, &mut rng);
        let radiance_fine = config.separate_fine.then(|| {
            let mut f = vec![0.0; radiance_net.len];
            radiance_net.init(&mut f, &mut rng);
            f
        });
        let mut warp = vec![0.0; warp_net.len];
        warp_net.init(&mut warp, &mut rng);
        let normal = Normal::new(0.0, config.latent_init_std).expect("validated std");
        let latents: Vec<f64> = (0..mirrors * config.latent_dim)
            .map(|_| normal.sample(&mut rng))
            .collect();
        let params = ParamSet {
            radiance,
            radiance_fine,
            warp,
            latents,
        }
        .cast();
        Ok(Self {
            config,
            bbox,
            mirrors,
            anchor,
            params,
            radiance_net,
            warp_net,
            warp_evals: Arc::new(AtomicUsize::new(0)),
        })
    }

    /// Rebuilds a field around existing parameters, checking their shapes.
    pub fn from_params(
        config: FieldConfig,
        bbox: BBox,
        mirrors: usize,
        anchor: usize,
        params: ParamSet<T>,
    ) -> Result<Self, FieldError> {
        let mut f = Self::new(config, bbox, mirrors, anchor, 0)?;
        let expected: Vec<usize> = f.params.groups().iter().map(|(_, g)| g.len()).collect();
        let got: Vec<usize> = params.groups().iter().map(|(_, g)| g.len()).collect();
        if expected != got {
            return Err(FieldError::Config(format!(
                "parameter shapes {got:?} do not match configuration {expected:?}"
            )));
        }
        f.params = params;
        Ok(f)
    }

    pub fn cast<U: Real>(&self) -> Field<U> {
        Field {
            config: self.config.clone(),
            bbox: self.bbox,
            mirrors: self.mirrors,
            anchor: self.anchor,
            params: self.params.cast(),
            radiance_net: self.radiance_net.clone(),
            warp_net: self.warp_net.clone(),
            warp_evals: Arc::new(AtomicUsize::new(0)),
        }
    }

    /// Index of the density output bias within a radiance parameter group.
    pub fn density_bias_index(&self) -> usize {
        let d = &self.radiance_net.density;
        d.offset + d.out * d.inp
    }

    /// Number of sample points evaluated by the warp network so far.
    pub fn warp_evaluations(&self) -> usize {
        self.warp_evals.load(Ordering::Relaxed)
    }

    fn radiance_params(&self, pass: Pass) -> &[T] {
        match (pass, &self.params.radiance_fine) {
            (Pass::Fine, Some(f)) => f,
            _ => &self.params.radiance,
        }
    }

    fn check_mirror(&self, m: usize) -> Result<(), FieldError> {
        if m < self.mirrors {
            Ok(())
        } else {
            Err(FieldError::UnknownMirror {
                index: m,
                mirrors: self.mirrors,
            })
        }
    }

    fn normalized(&self, p: &Vec3) -> [T; 3] {
        let q = self.bbox.normalize(p);
        [T::of(q.x), T::of(q.y), T::of(q.z)]
    }

    fn warp_input(&self, x: &[T; 3], mirror: usize, out: &mut Vec<T>) {
        let ew = encoded_dim(3, self.config.warp_octaves);
        let start = out.len();
        out.resize(start + ew, T::zero());
        positional_encode(x, self.config.warp_octaves, &mut out[start..]);
        let l = self.config.latent_dim;
        out.extend_from_slice(&self.params.latents[mirror * l..(mirror + 1) * l]);
    }

    /// Evaluates a batch of sample points. `positions` are in millimetres,
    /// `directions` unit vectors, `mirrors` the source mirror of each point.
    pub fn forward(
        &self,
        pass: Pass,
        positions: &[Vec3],
        directions: &[Vec3],
        mirrors: &[u16],
        mode: WarpMode,
    ) -> Result<FieldTape<T>, FieldError> {
        let n = positions.len();
        assert!(
            directions.len() == n && mirrors.len() == n,
            "batch arrays differ in length"
        );
        let mut warped = Vec::with_capacity(3 * n);
        for p in positions {
            warped.extend_from_slice(&self.normalized(p));
        }
        let mut warped_rows = Vec::new();
        let mut warp = None;
        if mode == WarpMode::Active {
            let mut input = Vec::new();
            for (i, &m) in mirrors.iter().enumerate() {
                let m = m as usize;
                self.check_mirror(m)?;
                if m != self.anchor {
                    let x = [warped[3 * i], warped[3 * i + 1], warped[3 * i + 2]];
                    self.warp_input(&x, m, &mut input);
                    warped_rows.push((i, m));
                }
            }
            if !warped_rows.is_empty() {
                let k = warped_rows.len();
                self.warp_evals.fetch_add(k, Ordering::Relaxed);
                let tape = self.warp_net.forward(&self.params.warp, input, k);
                for (r, &(i, _)) in warped_rows.iter().enumerate() {
                    for c in 0..3 {
                        warped[3 * i + c] += tape.output[3 * r + c];
                    }
                }
                warp = Some(tape);
            }
        } else {
            for &m in mirrors {
                self.check_mirror(m as usize)?;
            }
        }
        let px = encoded_dim(3, self.config.position_octaves);
        let pd = encoded_dim(3, self.config.direction_octaves);
        let mut enc_x = vec![T::zero(); n * px];
        let mut enc_d = vec![T::zero(); n * pd];
        for i in 0..n {
            positional_encode(
                &warped[3 * i..3 * i + 3],
                self.config.position_octaves,
                &mut enc_x[i * px..(i + 1) * px],
            );
            let d = directions[i];
            let d = [T::of(d.x), T::of(d.y), T::of(d.z)];
            positional_encode(&d, self.config.direction_octaves, &mut enc_d[i * pd..(i + 1) * pd]);
        }
        let radiance = self.radiance_net.forward(self.radiance_params(pass), enc_x, enc_d, n);
        Ok(FieldTape {
            pass,
            warped_rows,
            warp,
            warped,
            radiance,
        })
    }

    /// Accumulates parameter gradients for upstream gradients of the
    /// densities (`n`) and colours (`n × 3`).
    pub fn backward(&self, tape: &FieldTape<T>, d_sigma: &[T], d_rgb: &[T], grads: &mut ParamSet<T>) {
        let g_rad = match (tape.pass, &mut grads.radiance_fine) {
            (Pass::Fine, Some(f)) => f,
            _ => &mut grads.radiance,
        };
        let want_input = tape.warp.is_some();
        let d_enc = self.radiance_net.backward(
            self.radiance_params(tape.pass),
            &tape.radiance,
            d_sigma,
            d_rgb,
            g_rad,
            want_input,
        );
        let (Some(warp), Some(d_enc)) = (&tape.warp, d_enc) else {
            return;
        };
        let px = encoded_dim(3, self.config.position_octaves);
        let mut d_delta = vec![T::zero(); 3 * tape.warped_rows.len()];
        for (r, &(i, _)) in tape.warped_rows.iter().enumerate() {
            encode_backward(
                &tape.warped[3 * i..3 * i + 3],
                self.config.position_octaves,
                &d_enc[i * px..(i + 1) * px],
                &mut d_delta[3 * r..3 * r + 3],
            );
        }
        let d_in = self
            .warp_net
            .backward(&self.params.warp, warp, &d_delta, &mut grads.warp);
        let ew = encoded_dim(3, self.config.warp_octaves);
        let l = self.config.latent_dim;
        let width = ew + l;
        for (r, &(_, m)) in tape.warped_rows.iter().enumerate() {
            for c in 0..l {
                grads.latents[m * l + c] += d_in[r * width + ew + c];
            }
        }
    }

    /// Displacement in millimetres for one point of one mirror. The anchor
    /// mirror returns zero without evaluating the warp network.
    pub fn eval_warp(&self, x: &Vec3, mirror: usize) -> Result<Vec3, FieldError> {
        self.check_mirror(mirror)?;
        if mirror == self.anchor {
            return Ok(Vec3::zeros());
        }
        self.warp_evals.fetch_add(1, Ordering::Relaxed);
        let mut input = Vec::new();
        self.warp_input(&self.normalized(x), mirror, &mut input);
        let out = self.warp_net.forward(&self.params.warp, input, 1).output;
        let h = self.bbox.half_extent();
        Ok(Vec3::new(out[0].f64() * h.x, out[1].f64() * h.y, out[2].f64() * h.z))
    }

    /// Vector-Jacobian product of [`Field::eval_warp`]: given a cotangent of
    /// the displacement (mm), returns the cotangent of the position (mm) and
    /// of the mirror's latent code.
    pub fn warp_vjp(&self, x: &Vec3, mirror: usize, d_delta: &Vec3) -> Result<(Vec3, Vec<f64>), FieldError> {
        self.check_mirror(mirror)?;
        let l = self.config.latent_dim;
        if mirror == self.anchor {
            return Ok((Vec3::zeros(), vec![0.0; l]));
        }
        let xn = self.normalized(x);
        let mut input = Vec::new();
        self.warp_input(&xn, mirror, &mut input);
        let tape = self.warp_net.forward(&self.params.warp, input, 1);
        let h = self.bbox.half_extent();
        let dn = [T::of(d_delta.x * h.x), T::of(d_delta.y * h.y), T::of(d_delta.z * h.z)];
        let mut scratch = vec![T::zero(); self.params.warp.len()];
        let d_in = self.warp_net.backward(&self.params.warp, &tape, &dn, &mut scratch);
        let ew = encoded_dim(3, self.config.warp_octaves);
        let mut dx = [T::zero(); 3];
        encode_backward(&xn, self.config.warp_octaves, &d_in[..ew], &mut dx);
        let dx = Vec3::new(dx[0].f64() / h.x, dx[1].f64() / h.y, dx[2].f64() / h.z);
        Ok((dx, d_in[ew..].iter().map(|v| v.f64()).collect()))
    }

    /// Colour and density at an already-warped position (mm).
    pub fn eval_radiance(&self, x_warped: &Vec3, d: &Vec3) -> ([f64; 3], f64) {
        let tape = self
            .forward(Pass::Fine, &[*x_warped], &[*d], &[self.anchor as u16], WarpMode::Bypass)
            .expect("anchor is a valid mirror");
        let c = tape.rgb();
        ([c[0].f64(), c[1].f64(), c[2].f64()], tape.sigma()[0].f64())
    }
}

/// Runs a forward pass, lets `loss` turn densities and colours into a scalar
/// with its upstream gradients, and back-propagates. Non-finite losses or
/// gradients are reported with the offending parameter group.
pub fn forward_backward<T: Real>(
    field: &Field<T>,
    pass: Pass,
    positions: &[Vec3],
    directions: &[Vec3],
    mirrors: &[u16],
    mode: WarpMode,
    loss: impl FnOnce(&[T], &[T]) -> (f64, Vec<T>, Vec<T>),
) -> Result<(f64, ParamSet<T>), FieldError> {
    let tape = field.forward(pass, positions, directions, mirrors, mode)?;
    let (value, d_sigma, d_rgb) = loss(tape.sigma(), tape.rgb());
    if !value.is_finite() {
        return Err(FieldError::NonFinite {
            group: "loss",
            what: "value",
        });
    }
    let mut grads = field.params.zeros_like();
    field.backward(&tape, &d_sigma, &d_rgb, &mut grads);
    if let Some(group) = grads.first_non_finite() {
        return Err(FieldError::NonFinite {
            group,
            what: "gradient",
        });
    }
    Ok((value, grads))
}

#[cfg(test)]
#[allow(clippy::needless_range_loop)]
mod tests {
    use super::*;
    use rand::Rng;

    fn bbox() -> BBox {
        BBox::new([-50.0, -40.0, 100.0], [50.0, 60.0, 200.0]).unwrap()
    }

    fn small_config() -> FieldConfig {
        FieldConfig {
            radiance_width: 8,
            radiance_depth: 3,
            skip_after: Some(0),
            warp_width: 6,
            warp_depth: 3,
            latent_dim: 4,
            position_octaves: 3,
            direction_octaves: 2,
            warp_octaves: 2,
            ..FieldConfig::full()
        }
    }

    /// Field with every parameter random so no gradient is structurally zero.
    fn random_field(config: FieldConfig, mirrors: usize, seed: u64) -> Field<f64> {
        let mut f = Field::<f64>::new(config, bbox(), mirrors, 0, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        for (_, g) in f.params.groups_mut() {
            for x in g.iter_mut() {
                *x = rng.random_range(-0.6..0.6);
            }
        }
        f
    }

    fn random_points(n: usize, mirrors: usize, seed: u64) -> (Vec<Vec3>, Vec<Vec3>, Vec<u16>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pos = (0..n)
            .map(|_| {
                Vec3::new(
                    rng.random_range(-45.0..45.0),
                    rng.random_range(-35.0..55.0),
                    rng.random_range(105.0..195.0),
                )
            })
            .collect();
        let dir = (0..n)
            .map(|_| Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 1.0).normalize())
            .collect();
        let mir = (0..n).map(|i| (i % mirrors) as u16).collect();
        (pos, dir, mir)
    }

    #[test]
    fn parameter_counts() {
        let f = Field::<f32>::new(FieldConfig::full(), bbox(), 25, 0, 0).unwrap();
        // 63-dim position, 27-dim direction, width 256, skip into layer 5
        let trunk = 256 * 64 + 6 * 256 * 257 + 256 * (256 + 63 + 1);
        let heads = 257 + 256 * 257 + 128 * (256 + 27 + 1) + 3 * 129;
        assert_eq!(f.params.radiance.len(), trunk + heads);
        let warp = 128 * (39 + 16 + 1) + 3 * 128 * 129 + 3 * 129;
        assert_eq!(f.params.warp.len(), warp);
        assert_eq!(f.params.latents.len(), 25 * 16);
        assert!(f.params.radiance_fine.is_none());
        let desk = Field::<f32>::new(FieldConfig::desk(), bbox(), 7, 0, 0).unwrap();
        assert!(desk.params.len() < f.params.len() / 3);
    }

    #[test]
    fn anchor_and_zero_warp() {
        let f = random_field(small_config(), 3, 1);
        let x = Vec3::new(1.0, 2.0, 150.0);
        let before = f.warp_evaluations();
        assert_eq!(f.eval_warp(&x, 0).unwrap(), Vec3::zeros());
        assert_eq!(f.warp_evaluations(), before);
        assert_ne!(f.eval_warp(&x, 1).unwrap(), Vec3::zeros());
        assert!(matches!(
            f.eval_warp(&x, 3),
            Err(FieldError::UnknownMirror { index: 3, .. })
        ));
        let mut z = f.clone();
        for x in z.params.warp.iter_mut() {
            *x = 0.0;
        }
        for m in 0..3 {
            assert_eq!(z.eval_warp(&x, m).unwrap(), Vec3::zeros());
        }
        // freshly initialised warp is the identity
        let fresh = Field::<f64>::new(small_config(), bbox(), 3, 0, 5).unwrap();
        assert_eq!(fresh.eval_warp(&x, 2).unwrap(), Vec3::zeros());
    }

    #[test]
    fn warp_jacobian_matches_finite_differences() {
        let f = random_field(small_config(), 3, 2);
        let x = Vec3::new(5.0, -3.0, 140.0);
        let m = 2;
        let l = f.config.latent_dim;
        for k in 0..3 {
            let mut e = Vec3::zeros();
            e[k] = 1.0;
            let (dx, dw) = f.warp_vjp(&x, m, &e).unwrap();
            let scale = 100.0;
            let h = 1e-5 * scale;
            for j in 0..3 {
                let mut a = x;
                let mut b = x;
                a[j] += h;
                b[j] -= h;
                let fd = (f.eval_warp(&a, m).unwrap()[k] - f.eval_warp(&b, m).unwrap()[k]) / (2.0 * h);
                assert!(
                    (fd - dx[j]).abs() <= 1e-4 * fd.abs().max(1e-3),
                    "x {k} {j}: {fd} vs {}",
                    dx[j]
                );
            }
            for c in 0..l {
                let h = 1e-5;
                let mut a = f.clone();
                let mut b = f.clone();
                a.params.latents[m * l + c] += h;
                b.params.latents[m * l + c] -= h;
                let fd = (a.eval_warp(&x, m).unwrap()[k] - b.eval_warp(&x, m).unwrap()[k]) / (2.0 * h);
                assert!(
                    (fd - dw[c]).abs() <= 1e-4 * fd.abs().max(1e-3),
                    "w {k} {c}: {fd} vs {}",
                    dw[c]
                );
            }
        }
    }

    #[test]
    fn zero_network_is_constant() {
        let mut f = Field::<f64>::new(small_config(), bbox(), 2, 0, 3).unwrap();
        for x in f.params.radiance.iter_mut() {
            *x = 0.0;
        }
        let a = f.eval_radiance(&Vec3::new(0.0, 0.0, 120.0), &Vec3::z());
        let b = f.eval_radiance(&Vec3::new(30.0, -10.0, 180.0), &Vec3::new(0.6, 0.0, 0.8));
        assert_eq!(a, b);
        assert_eq!(a.0, [0.5; 3]);
        assert!((a.1 - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn density_independent_of_direction_and_mirror() {
        let f = random_field(small_config(), 3, 4);
        let x = Vec3::new(3.0, 4.0, 150.0);
        let (_, s1) = f.eval_radiance(&x, &Vec3::z());
        let (_, s2) = f.eval_radiance(&x, &Vec3::new(0.0, 0.6, 0.8));
        assert_eq!(s1, s2);
        // the radiance network sees only the warped position, whatever the mirror
        let t = f
            .forward(
                Pass::Coarse,
                &[x, x],
                &[Vec3::z(), Vec3::z()],
                &[0, 2],
                WarpMode::Bypass,
            )
            .unwrap();
        assert_eq!(t.sigma()[0], t.sigma()[1]);
        assert_eq!(t.rgb()[..3], t.rgb()[3..]);
    }

    fn weighted_loss<'a>(ws: &'a [f64], wc: &'a [f64]) -> impl Fn(&[f64], &[f64]) -> (f64, Vec<f64>, Vec<f64>) + 'a {
        move |s: &[f64], c: &[f64]| {
            let v =
                s.iter().zip(ws).map(|(a, b)| a * b).sum::<f64>() + c.iter().zip(wc).map(|(a, b)| a * b).sum::<f64>();
            (v, ws.to_vec(), wc.to_vec())
        }
    }

    #[test]
    fn gradients_per_group_match_finite_differences() {
        for separate in [false, true] {
            let config = FieldConfig {
                separate_fine: separate,
                ..small_config()
            };
            let f = random_field(config, 3, 7);
            let n = 9;
            let (pos, dir, mir) = random_points(n, 3, 8);
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let ws: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let wc: Vec<f64> = (0..3 * n).map(|_| rng.random_range(-1.0..1.0)).collect();
            for pass in [Pass::Coarse, Pass::Fine] {
                let (_, g) =
                    forward_backward(&f, pass, &pos, &dir, &mir, WarpMode::Active, weighted_loss(&ws, &wc)).unwrap();
                let eval = |f: &Field<f64>| {
                    let t = f.forward(pass, &pos, &dir, &mir, WarpMode::Active).unwrap();
                    weighted_loss(&ws, &wc)(t.sigma(), t.rgb()).0
                };
                let groups: Vec<&str> = g.groups().iter().map(|(n, _)| *n).collect();
                for (gi, name) in groups.iter().enumerate() {
                    let analytic = g.groups()[gi].1.to_vec();
                    let (mut num, mut den) = (0.0f64, 0.0f64);
                    for i in (0..analytic.len()).step_by(3) {
                        let h = 1e-6;
                        let mut a = f.clone();
                        let mut b = f.clone();
                        a.params.groups_mut()[gi].1[i] += h;
                        b.params.groups_mut()[gi].1[i] -= h;
                        let fd = (eval(&a) - eval(&b)) / (2.0 * h);
                        num += (fd - analytic[i]).powi(2);
                        den += fd.powi(2);
                    }
                    let used = match (*name, pass, separate) {
                        ("radiance", Pass::Fine, true) | ("radiance_fine", Pass::Coarse, _) => false,
                        ("latents", _, _) => true,
                        _ => true,
                    };
                    if used {
                        assert!(den > 0.0, "{name} has no gradient");
                        assert!(
                            (num / den).sqrt() < 1e-4,
                            "{name} {pass:?}: rel err {}",
                            (num / den).sqrt()
                        );
                    } else {
                        assert_eq!(num, 0.0, "{name} should be untouched in {pass:?}");
                    }
                }
            }
        }
    }

    #[test]
    fn anchor_only_batch_has_no_warp_gradient() {
        let f = random_field(small_config(), 3, 10);
        let (pos, dir, _) = random_points(6, 1, 11);
        let mir = vec![0u16; 6];
        let ws = vec![1.0; 6];
        let wc = vec![1.0; 18];
        let before = f.warp_evaluations();
        let (_, g) = forward_backward(
            &f,
            Pass::Coarse,
            &pos,
            &dir,
            &mir,
            WarpMode::Active,
            weighted_loss(&ws, &wc),
        )
        .unwrap();
        assert_eq!(f.warp_evaluations(), before);
        assert!(g.warp.iter().all(|&x| x == 0.0));
        assert!(g.latents.iter().all(|&x| x == 0.0));
        assert!(g.radiance.iter().any(|&x| x != 0.0));
    }

    #[test]
    fn non_finite_loss_is_reported() {
        let f = random_field(small_config(), 2, 12);
        let (pos, dir, mir) = random_points(2, 2, 13);
        let r = forward_backward(&f, Pass::Coarse, &pos, &dir, &mir, WarpMode::Bypass, |_, _| {
            (f64::NAN, vec![0.0; 2], vec![0.0; 6])
        });
        assert!(matches!(r, Err(FieldError::NonFinite { group: "loss", .. })));
        let r = forward_backward(&f, Pass::Coarse, &pos, &dir, &mir, WarpMode::Bypass, |_, _| {
            (1.0, vec![f64::INFINITY; 2], vec![0.0; 6])
        });
        assert!(matches!(r, Err(FieldError::NonFinite { group: "radiance", .. })));
    }

    #[test]
    fn f32_and_f64_agree() {
        let f64f = random_field(small_config(), 2, 14);
        let f32f: Field<f32> = f64f.cast();
        let (pos, dir, mir) = random_points(5, 2, 15);
        let a = f64f.forward(Pass::Coarse, &pos, &dir, &mir, WarpMode::Active).unwrap();
        let b = f32f.forward(Pass::Coarse, &pos, &dir, &mir, WarpMode::Active).unwrap();
        for (x, y) in a.rgb().iter().zip(b.rgb()) {
            assert!((x - *y as f64).abs() < 1e-4);
        }
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = Field::<f32>::new(FieldConfig::tiny(), bbox(), 5, 0, 42).unwrap();
        let b = Field::<f32>::new(FieldConfig::tiny(), bbox(), 5, 0, 42).unwrap();
        let c = Field::<f32>::new(FieldConfig::tiny(), bbox(), 5, 0, 43).unwrap();
        assert_eq!(a.params, b.params);
        assert_ne!(a.params, c.params);
        let std =
            (a.params.latents.iter().map(|&x| (x as f64).powi(2)).sum::<f64>() / a.params.latents.len() as f64).sqrt();
        assert!(std > 0.005 && std < 0.02);
    }
}
