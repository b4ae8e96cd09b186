//! Honeycomb mirror-array layouts.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::SphereMirror;

pub const DEFAULT_MIRROR_DIAMETER_MM: f64 = 50.0;
pub const DEFAULT_PITCH_MM: f64 = 54.0;
pub const DEFAULT_MIRROR_COUNT: usize = 25;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LayoutError {
    #[error("mirror diameter and pitch must be positive (diameter {diameter}, pitch {pitch})")]
    NonPositive { diameter: f64, pitch: f64 },
    #[error("mirrors of diameter {diameter} overlap at pitch {pitch}")]
    Overlap { diameter: f64, pitch: f64 },
    #[error("layout has no central cell: {0}")]
    NoCenter(String),
    #[error("no preset layout for {0} mirrors (known: 1, 5, 7, 13, 19, 25)")]
    UnknownCount(usize),
    #[error("perturbation sigma must be non-negative, got {0}")]
    NegativeSigma(f64),
}

/// Arrangement of hexagonal cells. Cell centres are expressed in pitch
/// units on a lattice whose rows are `√3/2` pitches apart.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Layout {
    /// A named preset by mirror count.
    Count(usize),
    /// Rows centred on the vertical axis, listed top to bottom. Adjacent rows
    /// must differ in parity and the middle row must be odd.
    Rows(Vec<usize>),
    /// `[cols, rows]` grid with every other row shifted by half a pitch.
    OffsetGrid([usize; 2]),
    /// Centre cell plus `n` full rings.
    Hexagonal(usize),
}

impl Default for Layout {
    fn default() -> Self {
        Layout::Count(DEFAULT_MIRROR_COUNT)
    }
}

const ROW_STEP: f64 = 0.866_025_403_784_438_6; // √3/2

impl Layout {
    /// Cell centres in pitch units; the first entry is the central cell.
    fn cells(&self) -> Result<Vec<(f64, f64)>, LayoutError> {
        let mut cells = match self {
            Layout::Count(n) => return Self::preset(*n)?.cells(),
            Layout::Rows(counts) => {
                if counts.len() % 2 == 0 || counts[counts.len() / 2] % 2 == 0 {
                    return Err(LayoutError::NoCenter(format!("rows {counts:?}")));
                }
                if counts.windows(2).any(|w| w[0] % 2 == w[1] % 2) {
                    return Err(LayoutError::NoCenter(format!(
                        "rows {counts:?}: adjacent rows must alternate parity"
                    )));
                }
                let mid = (counts.len() / 2) as f64;
                let mut out = Vec::new();
                for (r, &n) in counts.iter().enumerate() {
                    let y = (mid - r as f64) * ROW_STEP;
                    for k in 0..n {
                        out.push((k as f64 - (n as f64 - 1.0) / 2.0, y));
                    }
                }
                out
            }
            Layout::OffsetGrid([cols, rows]) => {
                if cols % 2 == 0 || rows % 2 == 0 {
                    return Err(LayoutError::NoCenter(format!("grid {cols}x{rows}")));
                }
                let (hc, hr) = ((cols / 2) as i64, (rows / 2) as i64);
                let mut out = Vec::new();
                for r in -hr..=hr {
                    let shift = if r.rem_euclid(2) == 1 { 0.5 } else { 0.0 };
                    for c in -hc..=hc {
                        out.push((c as f64 + shift, r as f64 * ROW_STEP));
                    }
                }
                out
            }
            Layout::Hexagonal(rings) => {
                let n = *rings as i64;
                let mut out = Vec::new();
                for q in -n..=n {
                    for r in (-n).max(-q - n)..=n.min(-q + n) {
                        out.push((q as f64 + r as f64 / 2.0, r as f64 * ROW_STEP));
                    }
                }
                out
            }
        };
        let center = cells
            .iter()
            .position(|&(x, y)| x.abs() < 1e-12 && y.abs() < 1e-12)
            .ok_or_else(|| LayoutError::NoCenter(format!("{self:?}")))?;
        cells.swap(0, center);
        Ok(cells)
    }

    fn preset(n: usize) -> Result<Layout, LayoutError> {
        Ok(match n {
            1 => Layout::Hexagonal(0),
            5 => Layout::Rows(vec![2, 1, 2]),
            7 => Layout::Hexagonal(1),
            13 => Layout::Rows(vec![3, 2, 3, 2, 3]),
            19 => Layout::Hexagonal(2),
            25 => Layout::OffsetGrid([5, 5]),
            other => return Err(LayoutError::UnknownCount(other)),
        })
    }
}

/// Idealised mirror array: sphere mirrors centred on the `z = 0` plane and
/// the hexagon corner markers drawn around them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MirrorArrayTemplate {
    pub mirrors: Vec<SphereMirror>,
    pub radius: f64,
    pub pitch: f64,
    /// Hexagon corners, deduplicated, on `z = 0`.
    pub corners: Vec<[f64; 3]>,
    pub anchor: usize,
}

impl MirrorArrayTemplate {
    pub fn len(&self) -> usize {
        self.mirrors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mirrors.is_empty()
    }

    pub fn mirror(&self, index: usize) -> Option<&SphereMirror> {
        self.mirrors.get(index)
    }

    /// Keeps only the listed mirrors (re-indexed in the given order). The
    /// anchor must be among them.
    pub fn subset(&self, keep: &[usize]) -> Option<Self> {
        let anchor = keep.iter().position(|&i| i == self.anchor)?;
        let mirrors = keep
            .iter()
            .enumerate()
            .map(|(new, &old)| SphereMirror {
                index: new,
                ..self.mirrors[old]
            })
            .collect();
        Some(Self {
            mirrors,
            anchor,
            ..self.clone()
        })
    }

    /// Indices of the `n` mirrors closest to the anchor (ties by index).
    pub fn nearest_to_anchor(&self, n: usize) -> Vec<usize> {
        let a = self.mirrors[self.anchor].center();
        let mut idx: Vec<usize> = (0..self.mirrors.len()).collect();
        idx.sort_by(|&i, &j| {
            let di = (self.mirrors[i].center() - a).norm();
            let dj = (self.mirrors[j].center() - a).norm();
            if (di - dj).abs() < 1e-9 {
                i.cmp(&j)
            } else {
                di.total_cmp(&dj)
            }
        });
        idx.truncate(n);
        idx
    }
}

/// Builds the honeycomb template. Mirror 0 is the central (anchor) mirror.
pub fn build_array_template(
    layout: &Layout,
    mirror_diameter_mm: f64,
    pitch_mm: f64,
) -> Result<MirrorArrayTemplate, LayoutError> {
    if !(mirror_diameter_mm > 0.0 && pitch_mm > 0.0) {
        return Err(LayoutError::NonPositive {
            diameter: mirror_diameter_mm,
            pitch: pitch_mm,
        });
    }
    if mirror_diameter_mm > pitch_mm {
        return Err(LayoutError::Overlap {
            diameter: mirror_diameter_mm,
            pitch: pitch_mm,
        });
    }
    let cells = layout.cells()?;
    let radius = mirror_diameter_mm / 2.0;
    let mirrors = cells
        .iter()
        .enumerate()
        .map(|(i, &(x, y))| SphereMirror {
            center: [x * pitch_mm, y * pitch_mm, 0.0],
            radius,
            index: i,
        })
        .collect::<Vec<_>>();

    // pointy-top hexagons: neighbours lie along the x axis
    let circumradius = pitch_mm / 3f64.sqrt();
    let mut corners: Vec<[f64; 3]> = Vec::new();
    for m in &mirrors {
        for k in 0..6 {
            let a = std::f64::consts::FRAC_PI_6 + k as f64 * std::f64::consts::FRAC_PI_3;
            let c = [
                m.center[0] + circumradius * a.cos(),
                m.center[1] + circumradius * a.sin(),
                0.0,
            ];
            if !corners
                .iter()
                .any(|o| (o[0] - c[0]).abs() < 1e-6 && (o[1] - c[1]).abs() < 1e-6)
            {
                corners.push(c);
            }
        }
    }
    Ok(MirrorArrayTemplate {
        mirrors,
        radius,
        pitch: pitch_mm,
        corners,
        anchor: 0,
    })
}

/// Displaces mirror centres by iid Gaussian noise within the array plane.
/// The anchor moves only when `perturb_anchor` is set. Marker corners are
/// drawn on the paper and never move.
pub fn perturb_template(
    template: &MirrorArrayTemplate,
    sigma_mm: f64,
    seed: u64,
    perturb_anchor: bool,
) -> Result<MirrorArrayTemplate, LayoutError> {
    if !(sigma_mm >= 0.0) {
        return Err(LayoutError::NegativeSigma(sigma_mm));
    }
    let mut out = template.clone();
    if sigma_mm == 0.0 {
        return Ok(out);
    }
    let normal = Normal::new(0.0, sigma_mm).expect("finite sigma");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for m in out.mirrors.iter_mut() {
        let dx = normal.sample(&mut rng);
        let dy = normal.sample(&mut rng);
        if m.index == template.anchor && !perturb_anchor {
            continue;
        }
        m.center[0] += dx;
        m.center[1] += dy;
    }
    Ok(out)
}
