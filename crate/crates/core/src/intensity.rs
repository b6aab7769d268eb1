//! First-order analysis: kernel intensity surfaces, type probabilities,
//! segregation testing, spatial log relative risk, and mark smoothing.
//!
//! All estimators use an isotropic Gaussian kernel truncated per axis at
//! 4.5 sigma (truncated mass < 1e-4) and the window edge factor
//! `e(u) = ∫_W k(u - u') du'`, evaluated by midpoint quadrature over the
//! in-window grid cells at the field resolution.

use crate::field::{GridSpec, ScalarField};
use crate::geometry::{Point2, Window};
use crate::pattern::MultitypePattern;
use crate::rng;
use crate::secondorder::PairCountIndex;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::Serialize;
use std::f64::consts::PI;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IntensityError {
    #[error("pattern has no points")]
    EmptyPattern,
    #[error("operation needs at least {needed} points, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("all points coincide; bandwidth rule is undefined")]
    DegenerateSpread,
    #[error("pilot intensity vanishes at a data point")]
    PilotZero,
    #[error("summed intensity is zero everywhere; probabilities undefined")]
    AllZeroDenominator,
    #[error("type '{0}' has no points")]
    MissingType(String),
    #[error("{got} simulations are too few (need at least {min})")]
    TooFewSimulations { got: usize, min: usize },
    #[error("no points carry mark '{0}'")]
    NoMarkedPoints(String),
    #[error("patterns must share a common window")]
    MismatchedWindows,
}

/// Truncation radius of the Gaussian kernel, in units of the bandwidth.
const CUTOFF: f64 = 4.5;

/// 1-D Gaussian density with bandwidth `eps`, truncated at `CUTOFF` sigma.
#[inline]
fn g1(t: f64, eps: f64) -> f64 {
    if t.abs() > CUTOFF * eps {
        0.0
    } else {
        (-(t * t) / (2.0 * eps * eps)).exp() / ((2.0 * PI).sqrt() * eps)
    }
}

/// Separable 2-D kernel value.
#[inline]
pub(crate) fn kernel2(dx: f64, dy: f64, eps: f64) -> f64 {
    g1(dx, eps) * g1(dy, eps)
}

/// Smoothing configuration for operations that accept either a fixed or an
/// adaptive kernel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum KernelConfig {
    Fixed { bandwidth: f64 },
    Adaptive { global_bandwidth: f64 },
}

/// Bandwidth bookkeeping attached to an adaptive estimate.
#[derive(Debug, Clone)]
pub struct KernelSpec {
    pub global_bandwidth: f64,
    pub adaptive: bool,
    /// Geometric-mean normaliser of the per-point scale factors.
    pub gamma: f64,
    pub point_bandwidths: Vec<f64>,
    pub pilot: Option<ScalarField>,
}

/// Scott's isotropic rule: `n^(-1/6) * sqrt((var x + var y) / 2)`.
pub fn scott_global_bandwidth(points: &[Point2]) -> Result<f64, IntensityError> {
    pooled_sd(points).map(|(sd, n)| sd * (n as f64).powf(-1.0 / 6.0))
}

/// Oversmoothing alternative: `1.144 * sd * n^(-1/6)`.
pub fn terrell_global_bandwidth(points: &[Point2]) -> Result<f64, IntensityError> {
    pooled_sd(points).map(|(sd, n)| 1.144 * sd * (n as f64).powf(-1.0 / 6.0))
}

fn pooled_sd(points: &[Point2]) -> Result<(f64, usize), IntensityError> {
    let n = points.len();
    if n < 2 {
        return Err(IntensityError::TooFewPoints { needed: 2, got: n });
    }
    let mean_x = points.iter().map(|p| p.x).sum::<f64>() / n as f64;
    let mean_y = points.iter().map(|p| p.y).sum::<f64>() / n as f64;
    let var_x = points.iter().map(|p| (p.x - mean_x).powi(2)).sum::<f64>() / (n as f64 - 1.0);
    let var_y = points.iter().map(|p| (p.y - mean_y).powi(2)).sum::<f64>() / (n as f64 - 1.0);
    let sd = ((var_x + var_y) / 2.0).sqrt();
    if sd <= 0.0 {
        return Err(IntensityError::DegenerateSpread);
    }
    Ok((sd, n))
}

/// Adds `weight * k_eps(cell - point)` for every source into `raw`
/// (row-major over the full bounding-box grid).
fn scatter_kernels(
    raw: &mut [f64],
    grid: &ScalarField,
    sources: &[(Point2, f64, f64)], // (location, bandwidth, weight)
) {
    let nx = grid.nx();
    let dx = grid.cell_width();
    let dy = grid.cell_height();
    let x0 = grid.cell_center(0, 0).x;
    let y0 = grid.cell_center(0, 0).y;
    raw.par_chunks_mut(nx).enumerate().for_each(|(iy, row)| {
        let cy = y0 + iy as f64 * dy;
        for &(p, eps, w) in sources {
            let r = CUTOFF * eps;
            let dyp = cy - p.y;
            if dyp.abs() > r {
                continue;
            }
            let gy = g1(dyp, eps) * w;
            if gy == 0.0 {
                continue;
            }
            let ix_lo = (((p.x - r) - x0) / dx).ceil().max(0.0) as usize;
            let ix_hi = ((((p.x + r) - x0) / dx).floor() as isize).min(nx as isize - 1);
            if ix_hi < 0 {
                continue;
            }
            for (ix, cell) in row.iter_mut().enumerate().take(ix_hi as usize + 1).skip(ix_lo) {
                let cx = x0 + ix as f64 * dx;
                *cell += gy * g1(cx - p.x, eps);
            }
        }
    });
}

/// Edge factor over the whole grid for a fixed bandwidth, via separable
/// convolution of the in-window mask.
fn edge_field_fixed(grid: &ScalarField, eps: f64) -> Vec<f64> {
    let nx = grid.nx();
    let ny = grid.ny();
    let dx = grid.cell_width();
    let dy = grid.cell_height();
    let w_x = (CUTOFF * eps / dx).ceil() as isize;
    let w_y = (CUTOFF * eps / dy).ceil() as isize;
    // Pass 1: convolve mask rows.
    let mut tmp = vec![0.0; nx * ny];
    tmp.par_chunks_mut(nx).enumerate().for_each(|(iy, row)| {
        for (ix, cell) in row.iter_mut().enumerate() {
            let mut s = 0.0;
            let lo = (ix as isize - w_x).max(0) as usize;
            let hi = ((ix as isize + w_x) as usize).min(nx - 1);
            for jx in lo..=hi {
                if grid.get(jx, iy).is_some() {
                    s += g1((ix as f64 - jx as f64) * dx, eps);
                }
            }
            *cell = s * dx;
        }
    });
    // Pass 2: convolve columns.
    let mut e = vec![0.0; nx * ny];
    e.par_chunks_mut(nx).enumerate().for_each(|(iy, row)| {
        let lo = (iy as isize - w_y).max(0) as usize;
        let hi = ((iy as isize + w_y) as usize).min(ny - 1);
        for ix in 0..nx {
            let mut s = 0.0;
            for jy in lo..=hi {
                s += tmp[jy * nx + ix] * g1((iy as f64 - jy as f64) * dy, eps);
            }
            row[ix] = s * dy;
        }
    });
    e
}

/// Edge factor at one location by midpoint quadrature: the bandwidth varies
/// with the integration variable, supplied per-cell by `eps_at`.
fn edge_at_point(grid: &ScalarField, p: Point2, eps_at: &dyn Fn(usize, usize) -> f64, eps_max: f64) -> f64 {
    let dx = grid.cell_width();
    let dy = grid.cell_height();
    let x0 = grid.cell_center(0, 0).x;
    let y0 = grid.cell_center(0, 0).y;
    let r = CUTOFF * eps_max;
    let ix_lo = ((p.x - r - x0) / dx).ceil().max(0.0) as usize;
    let ix_hi = (((p.x + r - x0) / dx).floor() as isize).min(grid.nx() as isize - 1);
    let iy_lo = ((p.y - r - y0) / dy).ceil().max(0.0) as usize;
    let iy_hi = (((p.y + r - y0) / dy).floor() as isize).min(grid.ny() as isize - 1);
    if ix_hi < 0 || iy_hi < 0 {
        return 0.0;
    }
    let mut s = 0.0;
    for iy in iy_lo..=(iy_hi as usize) {
        let cy = y0 + iy as f64 * dy;
        for ix in ix_lo..=(ix_hi as usize) {
            if grid.get(ix, iy).is_none() {
                continue;
            }
            let cx = x0 + ix as f64 * dx;
            s += kernel2(p.x - cx, p.y - cy, eps_at(ix, iy));
        }
    }
    s * dx * dy
}

/// Fixed-bandwidth kernel intensity surface.
pub fn fixed_kernel_intensity(
    points: &[Point2],
    window: &Window,
    eps: f64,
    grid: GridSpec,
) -> Result<ScalarField, IntensityError> {
    if points.is_empty() {
        return Err(IntensityError::EmptyPattern);
    }
    assert!(eps > 0.0, "bandwidth must be positive");
    let mut field = ScalarField::absent(window, grid);
    let sources: Vec<(Point2, f64, f64)> = points.iter().map(|&p| (p, eps, 1.0)).collect();
    let mut raw = vec![0.0; field.nx() * field.ny()];
    scatter_kernels(&mut raw, &field, &sources);
    let e = edge_field_fixed(&field, eps);
    let nx = field.nx();
    for iy in 0..field.ny() {
        for ix in 0..nx {
            if field.get(ix, iy).is_some() {
                let idx = iy * nx + ix;
                field.set(ix, iy, raw[idx] / e[idx]);
            }
        }
    }
    Ok(field)
}

/// Fixed-bandwidth intensity evaluated directly at arbitrary locations
/// (same estimator as the surface, without grid interpolation). With
/// `leave_one_out`, location `k` of `at` is assumed to be data point `k`
/// and its own kernel contribution is removed.
pub fn fixed_intensity_at(
    points: &[Point2],
    window: &Window,
    eps: f64,
    grid: GridSpec,
    at: &[Point2],
    leave_one_out: bool,
) -> Vec<f64> {
    let mask = ScalarField::absent(window, grid);
    let eps_at = |_: usize, _: usize| eps;
    at.par_iter()
        .enumerate()
        .map(|(k, &u)| {
            let mut s = 0.0;
            for (i, &p) in points.iter().enumerate() {
                if leave_one_out && i == k {
                    continue;
                }
                s += kernel2(u.x - p.x, u.y - p.y, eps);
            }
            let e = edge_at_point(&mask, u, &eps_at, eps);
            if e > 0.0 {
                s / e
            } else {
                0.0
            }
        })
        .collect()
}

/// Adaptive-bandwidth intensity: a fixed-bandwidth pilot at the global
/// bandwidth sets per-point bandwidths
/// `eps_i = (eps_star / gamma) * sqrt(n / pilot(u_i))`, normalised by the
/// geometric mean `gamma` of the square-root factors over the data points.
pub fn adaptive_kernel_intensity(
    points: &[Point2],
    window: &Window,
    eps_star: f64,
    grid: GridSpec,
) -> Result<(ScalarField, KernelSpec), IntensityError> {
    let pilot = fixed_kernel_intensity(points, window, eps_star, grid)?;
    let pilot_at = fixed_intensity_at(points, window, eps_star, grid, points, false);
    adaptive_with_pilot(points, window, eps_star, grid, &pilot, &pilot_at)
}

/// Adaptive estimate with an externally supplied pilot (shared-pilot risk
/// surfaces and the constant-pilot reduction both go through here).
pub fn adaptive_with_pilot(
    points: &[Point2],
    window: &Window,
    eps_star: f64,
    grid: GridSpec,
    pilot: &ScalarField,
    pilot_at_points: &[f64],
) -> Result<(ScalarField, KernelSpec), IntensityError> {
    let n = points.len();
    if n == 0 {
        return Err(IntensityError::EmptyPattern);
    }
    if n < 2 {
        return Err(IntensityError::TooFewPoints { needed: 2, got: n });
    }
    assert!(eps_star > 0.0, "global bandwidth must be positive");
    if pilot_at_points.iter().any(|&v| v.is_nan() || v <= 0.0) {
        return Err(IntensityError::PilotZero);
    }
    // Scale factors at the data points and their geometric mean. Bandwidths
    // are capped at the window diagonal: in pilot-truncation shadows the
    // raw factor can explode while the capped kernel's contribution stays
    // negligible.
    let cap = window.bbox().diagonal();
    let factors: Vec<f64> = pilot_at_points
        .iter()
        .map(|&lam| (n as f64 / lam).sqrt())
        .collect();
    let gamma = (factors.iter().map(|f| f.ln()).sum::<f64>() / n as f64).exp();
    let bandwidths: Vec<f64> = factors
        .iter()
        .map(|&f| (eps_star * f / gamma).min(cap))
        .collect();

    let mut field = ScalarField::absent(window, grid);
    let sources: Vec<(Point2, f64, f64)> = points
        .iter()
        .zip(bandwidths.iter())
        .map(|(&p, &b)| (p, b, 1.0))
        .collect();
    let mut raw = vec![0.0; field.nx() * field.ny()];
    scatter_kernels(&mut raw, &field, &sources);

    // Edge factor: integrate a kernel whose bandwidth follows the pilot at
    // the integration variable. Cells where the pilot is missing or zero use
    // the global bandwidth.
    let cell_eps: Vec<(Point2, f64, f64)> = field
        .iter_inside()
        .map(|(ix, iy, _)| {
            let lam = pilot.get(ix, iy).unwrap_or(0.0);
            let eps = if lam > 0.0 {
                (eps_star * (n as f64 / lam).sqrt() / gamma).min(cap)
            } else {
                eps_star
            };
            (field.cell_center(ix, iy), eps, field.cell_area())
        })
        .collect();
    let mut e = vec![0.0; field.nx() * field.ny()];
    scatter_kernels(&mut e, &field, &cell_eps);

    let nx = field.nx();
    for iy in 0..field.ny() {
        for ix in 0..nx {
            if field.get(ix, iy).is_some() {
                let idx = iy * nx + ix;
                let denom = e[idx].max(f64::MIN_POSITIVE);
                field.set(ix, iy, raw[idx] / denom);
            }
        }
    }
    let spec = KernelSpec {
        global_bandwidth: eps_star,
        adaptive: true,
        gamma,
        point_bandwidths: bandwidths,
        pilot: Some(pilot.clone()),
    };
    Ok((field, spec))
}

/// Adaptive intensity evaluated at the data points with the leave-one-out
/// convention (own kernel contribution removed); used as the plug-in for
/// second-order estimators.
pub fn adaptive_intensity_at_points_loo(
    points: &[Point2],
    window: &Window,
    eps_star: f64,
    grid: GridSpec,
) -> Result<Vec<f64>, IntensityError> {
    let pilot_at = fixed_intensity_at(points, window, eps_star, grid, points, false);
    let n = points.len();
    if n < 2 {
        return Err(IntensityError::TooFewPoints { needed: 2, got: n });
    }
    if pilot_at.iter().any(|&v| v.is_nan() || v <= 0.0) {
        return Err(IntensityError::PilotZero);
    }
    let cap = window.bbox().diagonal();
    let factors: Vec<f64> = pilot_at.iter().map(|&lam| (n as f64 / lam).sqrt()).collect();
    let gamma = (factors.iter().map(|f| f.ln()).sum::<f64>() / n as f64).exp();
    let bandwidths: Vec<f64> = factors
        .iter()
        .map(|&f| (eps_star * f / gamma).min(cap))
        .collect();
    let pilot = fixed_kernel_intensity(points, window, eps_star, grid)?;
    let mask = ScalarField::absent(window, grid);
    let eps_at = |ix: usize, iy: usize| {
        let lam = pilot.get(ix, iy).unwrap_or(0.0);
        if lam > 0.0 {
            (eps_star * (n as f64 / lam).sqrt() / gamma).min(cap)
        } else {
            eps_star
        }
    };
    // The integration box must reach as far as the widest cell kernel, not
    // just the widest point kernel.
    let eps_max = mask
        .iter_inside()
        .map(|(ix, iy, _)| eps_at(ix, iy))
        .fold(eps_star, f64::max);
    Ok(points
        .par_iter()
        .enumerate()
        .map(|(k, &u)| {
            let mut s = 0.0;
            for (i, &p) in points.iter().enumerate() {
                if i == k {
                    continue;
                }
                s += kernel2(u.x - p.x, u.y - p.y, bandwidths[i]);
            }
            let e = edge_at_point(&mask, u, &eps_at, eps_max);
            if e > 0.0 {
                s / e
            } else {
                0.0
            }
        })
        .collect())
}

/// Per-type conditional probability surfaces and the dominant-type map.
pub struct TypeProbabilities {
    pub types: Vec<String>,
    pub surfaces: Vec<ScalarField>,
    /// Index of the most probable type per cell (as f64; absent outside).
    pub dominant: ScalarField,
}

/// `p(m|u) = lambda_m(u) / sum_k lambda_k(u)` for every type level, plus an
/// argmax map over the grid.
pub fn type_probability_surfaces(
    pattern: &MultitypePattern,
    config: KernelConfig,
    grid: GridSpec,
) -> Result<TypeProbabilities, IntensityError> {
    let m = pattern.type_names().len();
    if m < 2 {
        return Err(IntensityError::TooFewPoints { needed: 2, got: m });
    }
    if pattern.n() == 0 {
        return Err(IntensityError::EmptyPattern);
    }
    let window = pattern.window();
    let mut fields = Vec::with_capacity(m);
    for t in 0..m {
        let idx = pattern.indices_of_type(t as u32);
        // A level with no points contributes a zero surface, so a pattern
        // restricted to a single type yields p = 1 for that type.
        if idx.is_empty() {
            fields.push(ScalarField::absent(window, grid));
            continue;
        }
        let pts: Vec<Point2> = idx.iter().map(|&i| pattern.points()[i]).collect();
        let field = match config {
            KernelConfig::Fixed { bandwidth } => {
                fixed_kernel_intensity(&pts, window, bandwidth, grid)?
            }
            KernelConfig::Adaptive { global_bandwidth } => {
                if pts.len() < 2 {
                    fixed_kernel_intensity(&pts, window, global_bandwidth, grid)?
                } else {
                    adaptive_kernel_intensity(&pts, window, global_bandwidth, grid)?.0
                }
            }
        };
        fields.push(field);
    }
    let mut surfaces: Vec<ScalarField> = fields.clone();
    let mut dominant = ScalarField::absent(window, grid);
    let mut any_defined = false;
    for iy in 0..dominant.ny() {
        for ix in 0..dominant.nx() {
            if dominant.get(ix, iy).is_none() {
                continue;
            }
            let total: f64 = fields.iter().filter_map(|f| f.get(ix, iy)).sum();
            if total <= 1e-300 {
                for s in surfaces.iter_mut() {
                    let idx = iy * s.nx() + ix;
                    s.values_mut()[idx] = f64::NAN;
                }
                let idx = iy * dominant.nx() + ix;
                dominant.values_mut()[idx] = f64::NAN;
                continue;
            }
            any_defined = true;
            let mut best = (0usize, f64::NEG_INFINITY);
            for (t, f) in fields.iter().enumerate() {
                let p = f.get(ix, iy).unwrap_or(0.0) / total;
                surfaces[t].set(ix, iy, p);
                if p > best.1 {
                    best = (t, p);
                }
            }
            dominant.set(ix, iy, best.0 as f64);
        }
    }
    if !any_defined {
        return Err(IntensityError::AllZeroDenominator);
    }
    Ok(TypeProbabilities {
        types: pattern.type_names().to_vec(),
        surfaces,
        dominant,
    })
}

/// Result of the Monte Carlo segregation test.
#[derive(Debug, Clone, Serialize)]
pub struct SegregationResult {
    /// Observed statistic: summed squared departure of the leave-one-out
    /// type probabilities at the data points from the global type shares.
    pub statistic: f64,
    pub null_statistics: Vec<f64>,
    pub p_value: f64,
    /// `min(1, group_size * p)`.
    pub p_bonferroni: f64,
}

/// Monte Carlo test for spatial segregation of types.
///
/// The statistic compares leave-one-out kernel estimates of `p(type|point)`
/// with the constant shares `n_m / n`; the null distribution comes from
/// random label permutations with fixed locations.
pub fn segregation_test(
    pattern: &MultitypePattern,
    nsim: usize,
    seed: u64,
    group_size: usize,
) -> Result<SegregationResult, IntensityError> {
    let n = pattern.n();
    let m = pattern.type_names().len();
    if m < 2 {
        return Err(IntensityError::MissingType("need at least 2 types".into()));
    }
    let counts = pattern.type_counts();
    for (t, &c) in counts.iter().enumerate() {
        if c == 0 {
            return Err(IntensityError::MissingType(pattern.type_names()[t].clone()));
        }
    }
    if nsim < 19 {
        return Err(IntensityError::TooFewSimulations { got: nsim, min: 19 });
    }
    let eps = scott_global_bandwidth(pattern.points())?;

    // Kernel neighbour rows; the edge factor cancels in the probability
    // ratio so plain kernel weights suffice.
    let index = PairCountIndex::build(pattern.points());
    // The separable kernel's support square reaches sqrt(2) past the cutoff.
    let query_radius = CUTOFF * eps * std::f64::consts::SQRT_2;
    let rows: Vec<Vec<(u32, f64)>> = (0..n)
        .into_par_iter()
        .map(|k| {
            let u = pattern.points()[k];
            let mut row = Vec::new();
            index.for_each_within(u, query_radius, |i, _d2| {
                if i != k {
                    let p = pattern.points()[i];
                    let w = kernel2(u.x - p.x, u.y - p.y, eps);
                    if w > 0.0 {
                        row.push((i as u32, w));
                    }
                }
            });
            row
        })
        .collect();

    let shares: Vec<f64> = counts.iter().map(|&c| c as f64 / n as f64).collect();
    let statistic_for = |labels: &[u32]| -> f64 {
        let mut t_sum = 0.0;
        let mut nums = vec![0.0; m];
        for row in rows.iter() {
            if row.is_empty() {
                continue;
            }
            nums.iter_mut().for_each(|v| *v = 0.0);
            let mut denom = 0.0;
            for &(i, w) in row {
                nums[labels[i as usize] as usize] += w;
                denom += w;
            }
            if denom <= 0.0 {
                continue;
            }
            for t in 0..m {
                let d = nums[t] / denom - shares[t];
                t_sum += d * d;
            }
        }
        t_sum
    };

    let observed = statistic_for(pattern.type_labels());
    let null_statistics: Vec<f64> = (0..nsim)
        .into_par_iter()
        .map(|r| {
            let mut rng = rng::replicate(seed, r as u64);
            let mut labels = pattern.type_labels().to_vec();
            labels.shuffle(&mut rng);
            statistic_for(&labels)
        })
        .collect();
    let exceed = null_statistics.iter().filter(|&&t| t >= observed).count();
    let p_value = (1 + exceed) as f64 / (nsim + 1) as f64;
    Ok(SegregationResult {
        statistic: observed,
        null_statistics,
        p_value,
        p_bonferroni: bonferroni(p_value, group_size),
    })
}

/// Bonferroni adjustment for `g` parallel tests.
pub fn bonferroni(p: f64, g: usize) -> f64 {
    (p * g as f64).min(1.0)
}

/// Spatial log relative risk with pointwise Monte Carlo tolerance.
#[derive(Debug, Clone, Serialize)]
pub struct RiskSurface {
    /// `log(lambda_i / lambda_j) + log(n_j / n_i)`; absent where either
    /// intensity falls below 1e-12.
    pub log_risk: ScalarField,
    /// Pointwise two-sided Monte Carlo p-values under random relabelling of
    /// the pooled pattern; absent where the observed ratio is absent.
    pub tolerance: ScalarField,
    pub contour_level: f64,
}

/// Log relative risk of two point sets sharing one window. Both intensities
/// are adaptive with a single global bandwidth and a single pilot estimated
/// from the pooled points; the geometric-mean normaliser is recomputed per
/// component.
pub fn relative_risk(
    points_i: &[Point2],
    points_j: &[Point2],
    window: &Window,
    grid: GridSpec,
    nsim: usize,
    seed: u64,
) -> Result<RiskSurface, IntensityError> {
    let (n_i, n_j) = (points_i.len(), points_j.len());
    if n_i < 2 || n_j < 2 {
        return Err(IntensityError::TooFewPoints {
            needed: 2,
            got: n_i.min(n_j),
        });
    }
    // Canonical pooled order, so that swapping the arguments reproduces the
    // same bandwidth, pilot and component fields bit for bit (the log-risk
    // antisymmetry is exact, not just approximate).
    let mut tagged: Vec<(Point2, bool)> = points_i
        .iter()
        .map(|&p| (p, false))
        .chain(points_j.iter().map(|&p| (p, true)))
        .collect();
    tagged.sort_by(|a, b| {
        (a.0.x, a.0.y, a.1)
            .partial_cmp(&(b.0.x, b.0.y, b.1))
            .unwrap()
    });
    let pooled: Vec<Point2> = tagged.iter().map(|t| t.0).collect();
    let eps_star = scott_global_bandwidth(&pooled)?;
    let pilot = fixed_kernel_intensity(&pooled, window, eps_star, grid)?;
    let pilot_at = fixed_intensity_at(&pooled, window, eps_star, grid, &pooled, false);

    let field_for = |idx: &[usize]| -> Result<ScalarField, IntensityError> {
        let pts: Vec<Point2> = idx.iter().map(|&k| pooled[k]).collect();
        let pat: Vec<f64> = idx.iter().map(|&k| pilot_at[k]).collect();
        Ok(adaptive_with_pilot(&pts, window, eps_star, grid, &pilot, &pat)?.0)
    };
    let log_ratio = |fi: &ScalarField, fj: &ScalarField| -> ScalarField {
        let shift = (n_j as f64).ln() - (n_i as f64).ln();
        let mut out = fi.clone();
        for iy in 0..out.ny() {
            for ix in 0..out.nx() {
                let idx = iy * out.nx() + ix;
                if out.values()[idx].is_nan() {
                    continue;
                }
                let a = fi.get(ix, iy).unwrap_or(0.0);
                let b = fj.get(ix, iy).unwrap_or(0.0);
                out.values_mut()[idx] = if a >= 1e-12 && b >= 1e-12 {
                    (a.ln() - b.ln()) + shift
                } else {
                    f64::NAN
                };
            }
        }
        out
    };

    let obs_i: Vec<usize> = tagged
        .iter()
        .enumerate()
        .filter(|(_, t)| !t.1)
        .map(|(k, _)| k)
        .collect();
    let obs_j: Vec<usize> = tagged
        .iter()
        .enumerate()
        .filter(|(_, t)| t.1)
        .map(|(k, _)| k)
        .collect();
    let rho = log_ratio(&field_for(&obs_i)?, &field_for(&obs_j)?);

    let cells = rho.values().len();
    let (le, ge, valid) = (0..nsim)
        .into_par_iter()
        .map(|r| {
            let mut rng = rng::replicate(seed, r as u64);
            let mut membership: Vec<usize> = (0..n_i + n_j).collect();
            membership.shuffle(&mut rng);
            let sim_i = &membership[..n_i];
            let sim_j = &membership[n_i..];
            let fi = field_for(sim_i).expect("relabelled field");
            let fj = field_for(sim_j).expect("relabelled field");
            let rho_s = log_ratio(&fi, &fj);
            let mut le = vec![0u32; cells];
            let mut ge = vec![0u32; cells];
            let mut valid = vec![0u32; cells];
            for c in 0..cells {
                let obs = rho.values()[c];
                let sim = rho_s.values()[c];
                if obs.is_nan() || sim.is_nan() {
                    continue;
                }
                valid[c] = 1;
                if sim <= obs {
                    le[c] = 1;
                }
                if sim >= obs {
                    ge[c] = 1;
                }
            }
            (le, ge, valid)
        })
        .reduce(
            || (vec![0u32; cells], vec![0u32; cells], vec![0u32; cells]),
            |(mut a, mut b, mut c), (x, y, z)| {
                for i in 0..cells {
                    a[i] += x[i];
                    b[i] += y[i];
                    c[i] += z[i];
                }
                (a, b, c)
            },
        );

    let mut tolerance = rho.clone();
    for cidx in 0..cells {
        let v = tolerance.values()[cidx];
        if v.is_nan() {
            continue;
        }
        let p = if nsim == 0 || valid[cidx] == 0 {
            f64::NAN
        } else {
            let denom = (valid[cidx] + 1) as f64;
            let p_lo = (1 + le[cidx]) as f64 / denom;
            let p_hi = (1 + ge[cidx]) as f64 / denom;
            (2.0 * p_lo.min(p_hi)).min(1.0)
        };
        tolerance.values_mut()[cidx] = p;
    }
    Ok(RiskSurface {
        log_risk: rho,
        tolerance,
        contour_level: 0.05,
    })
}

/// Nadaraya-Watson smoothing of a continuous mark over the window, using
/// reciprocal edge factors at the data points as weights. Defined on the
/// whole window (the nearest points dominate far from the data).
pub fn nadaraya_watson(
    pattern: &MultitypePattern,
    mark: &str,
    eps: f64,
    grid: GridSpec,
) -> Result<ScalarField, IntensityError> {
    let values = pattern
        .mark(mark)
        .ok_or_else(|| IntensityError::NoMarkedPoints(mark.to_string()))?;
    let data: Vec<(Point2, f64)> = pattern
        .points()
        .iter()
        .zip(values.iter())
        .filter_map(|(&p, v)| v.map(|m| (p, m)))
        .collect();
    if data.is_empty() {
        return Err(IntensityError::NoMarkedPoints(mark.to_string()));
    }
    assert!(eps > 0.0, "bandwidth must be positive");
    let mask = ScalarField::absent(pattern.window(), grid);
    let pts: Vec<Point2> = data.iter().map(|(p, _)| *p).collect();
    let marks: Vec<f64> = data.iter().map(|(_, m)| *m).collect();
    let eps_at = |_: usize, _: usize| eps;
    let weights: Vec<f64> = pts
        .par_iter()
        .map(|&p| {
            let e = edge_at_point(&mask, p, &eps_at, eps);
            if e > 0.0 {
                1.0 / e
            } else {
                1.0
            }
        })
        .collect();
    Ok(nw_smooth(&pts, &marks, &weights, eps, pattern.window(), grid))
}

/// Weighted Nadaraya-Watson core: exponent-shifted so the ratio stays
/// defined arbitrarily far from the data.
pub(crate) fn nw_smooth(
    points: &[Point2],
    marks: &[f64],
    weights: &[f64],
    eps: f64,
    window: &Window,
    grid: GridSpec,
) -> ScalarField {
    let mut field = ScalarField::absent(window, grid);
    let nx = field.nx();
    let centers: Vec<Point2> = (0..field.ny() * nx)
        .map(|i| field.cell_center(i % nx, i / nx))
        .collect();
    let out: Vec<f64> = centers
        .par_iter()
        .enumerate()
        .map(|(i, &u)| {
            if field.values()[i].is_nan() {
                return f64::NAN;
            }
            let mut d2_min = f64::INFINITY;
            for p in points {
                d2_min = d2_min.min(u.dist_sq(*p));
            }
            let mut num = 0.0;
            let mut den = 0.0;
            for ((p, &m), &w) in points.iter().zip(marks).zip(weights) {
                let q = (d2_min - u.dist_sq(*p)) / (2.0 * eps * eps);
                let k = q.exp() * w;
                num += m * k;
                den += k;
            }
            num / den
        })
        .collect();
    field.values_mut().copy_from_slice(&out);
    field
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pattern::MultitypePattern;
    use approx::assert_relative_eq;

    fn unit_window() -> Window {
        Window::rectangle(0.0, 0.0, 1.0, 1.0).unwrap()
    }

    fn pattern_of(points: Vec<Point2>, labels: Vec<u32>, names: Vec<&str>, w: Window) -> MultitypePattern {
        MultitypePattern::new(
            "p",
            points,
            names.into_iter().map(String::from).collect(),
            labels,
            w,
        )
        .unwrap()
    }

    #[test]
    fn scott_rule_analytic_case() {
        // 64 points, sample sd exactly 1 in x and y: eps = 64^(-1/6) = 0.5.
        let c = (63.0_f64 / 64.0).sqrt();
        let mut pts = Vec::new();
        for i in 0..64 {
            let sx = if i % 2 == 0 { c } else { -c };
            let sy = if (i / 2) % 2 == 0 { c } else { -c };
            pts.push(Point2::new(sx, sy));
        }
        let eps = scott_global_bandwidth(&pts).unwrap();
        assert_relative_eq!(eps, 0.5, epsilon = 1e-12);
    }

    #[test]
    fn scott_rule_degenerate_and_scaling() {
        let pts = vec![Point2::new(1.0, 1.0); 10];
        assert!(matches!(
            scott_global_bandwidth(&pts),
            Err(IntensityError::DegenerateSpread)
        ));
        let pts: Vec<Point2> = (0..20)
            .map(|i| Point2::new((i as f64).sin(), (i as f64 * 0.7).cos()))
            .collect();
        let scaled: Vec<Point2> = pts.iter().map(|p| Point2::new(3.0 * p.x, 3.0 * p.y)).collect();
        let a = scott_global_bandwidth(&pts).unwrap();
        let b = scott_global_bandwidth(&scaled).unwrap();
        assert_relative_eq!(b, 3.0 * a, max_relative = 1e-12);
    }

    #[test]
    fn single_point_mass_is_preserved() {
        let w = Window::rectangle(0.0, 0.0, 10.0, 10.0).unwrap();
        let f = fixed_kernel_intensity(&[Point2::new(5.0, 5.0)], &w, 0.3, GridSpec::square(256))
            .unwrap();
        assert_relative_eq!(f.integral(), 1.0, max_relative = 0.02);
    }

    #[test]
    fn empty_pattern_errors() {
        let w = unit_window();
        assert!(matches!(
            fixed_kernel_intensity(&[], &w, 0.1, GridSpec::default()),
            Err(IntensityError::EmptyPattern)
        ));
    }

    #[test]
    fn coincident_points_double_the_surface() {
        let w = unit_window();
        let p = Point2::new(0.4, 0.6);
        let one = fixed_kernel_intensity(&[p], &w, 0.15, GridSpec::square(64)).unwrap();
        let two = fixed_kernel_intensity(&[p, p], &w, 0.15, GridSpec::square(64)).unwrap();
        for ((_, _, a), (_, _, b)) in one.iter_inside().zip(two.iter_inside()) {
            assert_relative_eq!(b, 2.0 * a, max_relative = 1e-12);
        }
    }

    #[test]
    fn constant_pilot_reduces_adaptive_to_fixed() {
        let w = unit_window();
        let pts: Vec<Point2> = (0..25)
            .map(|i| Point2::new(0.08 + 0.2 * (i % 5) as f64, 0.08 + 0.2 * (i / 5) as f64))
            .collect();
        let grid = GridSpec::square(64);
        let eps = 0.12;
        // Exactly constant pilot: every factor equals gamma, so all
        // per-point bandwidths collapse to the global bandwidth.
        let pilot = ScalarField::from_fn(&w, grid, |_| 7.0);
        let pilot_at = vec![7.0; pts.len()];
        let (adaptive, spec) =
            adaptive_with_pilot(&pts, &w, eps, grid, &pilot, &pilot_at).unwrap();
        let fixed = fixed_kernel_intensity(&pts, &w, eps, grid).unwrap();
        for bw in &spec.point_bandwidths {
            assert_relative_eq!(*bw, eps, max_relative = 1e-12, epsilon = 1e-12);
        }
        for ((_, _, a), (_, _, f)) in adaptive.iter_inside().zip(fixed.iter_inside()) {
            assert_relative_eq!(a, f, max_relative = 1e-9);
        }
    }

    #[test]
    fn adaptive_needs_two_points() {
        let w = unit_window();
        let err = adaptive_kernel_intensity(&[Point2::new(0.5, 0.5)], &w, 0.1, GridSpec::square(32));
        assert!(matches!(err, Err(IntensityError::TooFewPoints { .. })));
    }

    #[test]
    fn probability_surfaces_sum_to_one() {
        let w = unit_window();
        let mut pts = Vec::new();
        let mut labels = Vec::new();
        for i in 0..40 {
            pts.push(Point2::new(0.1 + 0.02 * (i % 20) as f64, 0.2 + 0.03 * (i / 20) as f64));
            labels.push((i % 3) as u32);
        }
        let p = pattern_of(pts, labels, vec!["a", "b", "c"], w);
        let probs =
            type_probability_surfaces(&p, KernelConfig::Fixed { bandwidth: 0.2 }, GridSpec::square(48))
                .unwrap();
        let f0 = &probs.surfaces[0];
        for (ix, iy, v0) in f0.iter_inside() {
            let total: f64 = probs.surfaces.iter().map(|s| s.get(ix, iy).unwrap()).sum();
            assert!((total - 1.0).abs() < 1e-12);
            assert!((0.0..=1.0).contains(&v0));
        }
    }

    #[test]
    fn single_populated_type_has_probability_one() {
        let w = unit_window();
        let pts: Vec<Point2> = (0..10)
            .map(|i| Point2::new(0.1 + 0.08 * i as f64, 0.5))
            .collect();
        // two declared levels, but only level 0 carries points
        let p = pattern_of(pts, vec![0; 10], vec!["a", "b"], w);
        let probs =
            type_probability_surfaces(&p, KernelConfig::Fixed { bandwidth: 0.2 }, GridSpec::square(24))
                .unwrap();
        for (_, _, v) in probs.surfaces[0].iter_inside() {
            assert_relative_eq!(v, 1.0, epsilon = 1e-12);
        }
        for (_, _, v) in probs.surfaces[1].iter_inside() {
            assert_eq!(v, 0.0);
        }
        assert!(probs.dominant.iter_inside().all(|(_, _, v)| v == 0.0));
    }

    #[test]
    fn segregation_disjoint_halves_is_maximal() {
        let w = unit_window();
        let mut pts = Vec::new();
        let mut labels = Vec::new();
        for i in 0..100 {
            let fx = 0.05 + 0.9 * ((i * 37) % 100) as f64 / 100.0;
            pts.push(Point2::new(fx, 0.05 + 0.4 * ((i * 53) % 97) as f64 / 97.0));
            labels.push(0);
        }
        for i in 0..100 {
            let fx = 0.05 + 0.9 * ((i * 41) % 100) as f64 / 100.0;
            pts.push(Point2::new(fx, 0.55 + 0.4 * ((i * 59) % 97) as f64 / 97.0));
            labels.push(1);
        }
        let p = pattern_of(pts, labels, vec!["a", "b"], w);
        let res = segregation_test(&p, 99, 7, 1).unwrap();
        assert_relative_eq!(res.p_value, 0.01, epsilon = 1e-12);
        assert!(res.statistic > 0.0);
    }

    #[test]
    fn bonferroni_matches_reported_adjustment() {
        assert_relative_eq!(bonferroni(0.001, 51), 0.051, epsilon = 1e-12);
        assert_eq!(bonferroni(0.5, 10), 1.0);
    }

    #[test]
    fn relative_risk_identical_patterns_is_zero() {
        let w = unit_window();
        let pts: Vec<Point2> = (0..30)
            .map(|i| Point2::new(0.05 + 0.03 * (i % 6) as f64, 0.1 + 0.15 * (i / 6) as f64))
            .collect();
        let risk = relative_risk(&pts, &pts, &w, GridSpec::square(32), 0, 1).unwrap();
        for (_, _, v) in risk.log_risk.iter_inside() {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn relative_risk_antisymmetry_exact() {
        let w = unit_window();
        let a: Vec<Point2> = (0..20)
            .map(|i| Point2::new(0.06 + 0.04 * (i % 5) as f64, 0.1 + 0.2 * (i / 5) as f64))
            .collect();
        let b: Vec<Point2> = (0..28)
            .map(|i| Point2::new(0.5 + 0.06 * (i % 7) as f64, 0.15 + 0.19 * (i / 7) as f64))
            .collect();
        let grid = GridSpec::square(32);
        let ij = relative_risk(&a, &b, &w, grid, 0, 1).unwrap();
        let ji = relative_risk(&b, &a, &w, grid, 0, 1).unwrap();
        for iy in 0..32 {
            for ix in 0..32 {
                match (ij.log_risk.get(ix, iy), ji.log_risk.get(ix, iy)) {
                    (Some(x), Some(y)) => assert_eq!(x, -y),
                    (None, None) => {}
                    other => panic!("mask mismatch at ({ix},{iy}): {other:?}"),
                }
            }
        }
    }

    #[test]
    fn nw_constant_marks_and_range() {
        let w = unit_window();
        let pts: Vec<Point2> = (0..12)
            .map(|i| Point2::new(0.1 + 0.07 * i as f64, 0.3 + 0.04 * i as f64))
            .collect();
        let marks: Vec<Option<f64>> = (0..12).map(|_| Some(2.5)).collect();
        let p = pattern_of(pts, vec![0; 12], vec!["a"], w)
            .with_mark("m", marks)
            .unwrap();
        let f = nadaraya_watson(&p, "m", 0.1, GridSpec::square(32)).unwrap();
        for (_, _, v) in f.iter_inside() {
            assert_relative_eq!(v, 2.5, epsilon = 1e-12);
        }
    }

    #[test]
    fn nw_midpoint_of_two_marks() {
        let w = unit_window();
        let pts = vec![Point2::new(0.3, 0.5), Point2::new(0.7, 0.5)];
        let p = pattern_of(pts, vec![0, 0], vec!["a"], w)
            .with_mark("m", vec![Some(0.0), Some(1.0)])
            .unwrap();
        // 127 cells puts a cell centre exactly at (0.5, 0.5).
        let f = nadaraya_watson(&p, "m", 0.15, GridSpec { nx: 127, ny: 127 }).unwrap();
        let v = f.sample(Point2::new(0.5, 0.5)).unwrap();
        assert_relative_eq!(v, 0.5, epsilon = 1e-6);
    }

    #[test]
    fn nw_is_a_convex_combination() {
        let w = unit_window();
        let pts: Vec<Point2> = (0..9)
            .map(|i| Point2::new(0.15 + 0.08 * (i % 3) as f64, 0.2 + 0.25 * (i / 3) as f64))
            .collect();
        let marks: Vec<Option<f64>> = (0..9).map(|i| Some(i as f64)).collect();
        let p = pattern_of(pts, vec![0; 9], vec!["a"], w)
            .with_mark("m", marks)
            .unwrap();
        let f = nadaraya_watson(&p, "m", 0.05, GridSpec::square(64)).unwrap();
        let (lo, hi) = f.range().unwrap();
        assert!(lo >= 0.0 - 1e-9 && hi <= 8.0 + 1e-9);
    }

    #[test]
    fn nw_invariant_to_weight_rescaling() {
        let w = unit_window();
        let pts: Vec<Point2> = (0..5).map(|i| Point2::new(0.2 + 0.12 * i as f64, 0.5)).collect();
        let marks = [1.0, 3.0, -2.0, 0.5, 4.0];
        let weights = [0.7, 1.1, 0.4, 2.0, 1.3];
        let scaled: Vec<f64> = weights.iter().map(|w| w * 17.0).collect();
        let a = nw_smooth(&pts, &marks, &weights, 0.2, &w, GridSpec::square(32));
        let b = nw_smooth(&pts, &marks, &scaled, 0.2, &w, GridSpec::square(32));
        for ((_, _, x), (_, _, y)) in a.iter_inside().zip(b.iter_inside()) {
            assert_relative_eq!(x, y, max_relative = 1e-12);
        }
    }
}
