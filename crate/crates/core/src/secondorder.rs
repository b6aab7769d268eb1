//! Second-order and shortest-distance descriptors for multitype patterns:
//! inhomogeneous cross/dot K and L, pair correlation, empty-space F,
//! nearest-neighbour G, and the ratio J.
//!
//! Estimators are written against a fixed grid of distances. Cumulative
//! statistics accumulate pair contributions into difference arrays and
//! prefix-sum once at the end, so the spatial index only has to enumerate
//! each qualifying pair once.

use crate::field::{GridSpec, ScalarField};
use crate::geometry::{Point2, Window};
use crate::intensity::{
    adaptive_intensity_at_points_loo, scott_global_bandwidth, IntensityError,
};
use crate::pattern::MultitypePattern;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SecondOrderError {
    #[error("type '{0}' has no points")]
    EmptyType(String),
    #[error("unknown type level '{0}'")]
    UnknownLevel(String),
    #[error("estimated intensity is not positive at a data point")]
    NonPositiveIntensityAtPoint,
    #[error("K values must be non-negative for the L transform")]
    NegativeK,
    #[error("pair-correlation bandwidth {bandwidth} exceeds the smallest grid distance {r_min}")]
    BandwidthTooSmall { bandwidth: f64, r_min: f64 },
    #[error("query grid contains no in-window locations")]
    EmptyQueryGrid,
    #[error("translation edge correction needs a convex window")]
    TranslationNeedsConvexWindow,
    #[error(transparent)]
    Intensity(#[from] IntensityError),
}

// ---------------------------------------------------------------------------
// Spatial index
// ---------------------------------------------------------------------------

/// A 2-D kd-tree supporting fixed-radius enumeration and nearest-neighbour
/// queries; results are identical to an exhaustive scan.
pub struct PairCountIndex {
    pts: Vec<Point2>,
    orig: Vec<u32>,
}

impl PairCountIndex {
    pub fn build(points: &[Point2]) -> Self {
        let mut entries: Vec<(Point2, u32)> = points
            .iter()
            .enumerate()
            .map(|(i, &p)| (p, i as u32))
            .collect();
        build_rec(&mut entries, 0);
        PairCountIndex {
            pts: entries.iter().map(|e| e.0).collect(),
            orig: entries.iter().map(|e| e.1).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.pts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pts.is_empty()
    }

    /// Calls `visit(original_index, squared_distance)` for every point with
    /// `|p - center| <= radius` (boundary inclusive).
    pub fn for_each_within(&self, center: Point2, radius: f64, mut visit: impl FnMut(usize, f64)) {
        if self.pts.is_empty() {
            return;
        }
        let r2 = radius * radius;
        self.within_rec(0, self.pts.len(), 0, center, radius, r2, &mut visit);
    }

    #[allow(clippy::too_many_arguments)]
    fn within_rec(
        &self,
        lo: usize,
        hi: usize,
        axis: usize,
        c: Point2,
        r: f64,
        r2: f64,
        visit: &mut impl FnMut(usize, f64),
    ) {
        if lo >= hi {
            return;
        }
        let mid = (lo + hi) / 2;
        let p = self.pts[mid];
        let d2 = p.dist_sq(c);
        if d2 <= r2 {
            visit(self.orig[mid] as usize, d2);
        }
        let delta = if axis == 0 { c.x - p.x } else { c.y - p.y };
        let (near, far) = if delta < 0.0 {
            ((lo, mid), (mid + 1, hi))
        } else {
            ((mid + 1, hi), (lo, mid))
        };
        self.within_rec(near.0, near.1, 1 - axis, c, r, r2, visit);
        if delta.abs() <= r {
            self.within_rec(far.0, far.1, 1 - axis, c, r, r2, visit);
        }
    }

    /// Nearest neighbour with an optional excluded original index; returns
    /// `(original_index, distance)`.
    pub fn nearest_excluding(&self, center: Point2, exclude: Option<usize>) -> Option<(usize, f64)> {
        if self.pts.is_empty() {
            return None;
        }
        let mut best: Option<(usize, f64)> = None;
        self.nearest_rec(0, self.pts.len(), 0, center, exclude, &mut best);
        best.map(|(i, d2)| (i, d2.sqrt()))
    }

    fn nearest_rec(
        &self,
        lo: usize,
        hi: usize,
        axis: usize,
        c: Point2,
        exclude: Option<usize>,
        best: &mut Option<(usize, f64)>,
    ) {
        if lo >= hi {
            return;
        }
        let mid = (lo + hi) / 2;
        let p = self.pts[mid];
        let idx = self.orig[mid] as usize;
        let d2 = p.dist_sq(c);
        if Some(idx) != exclude && best.map(|(_, b)| d2 < b).unwrap_or(true) {
            *best = Some((idx, d2));
        }
        let delta = if axis == 0 { c.x - p.x } else { c.y - p.y };
        let (near, far) = if delta < 0.0 {
            ((lo, mid), (mid + 1, hi))
        } else {
            ((mid + 1, hi), (lo, mid))
        };
        self.nearest_rec(near.0, near.1, 1 - axis, c, exclude, best);
        if best.map(|(_, b)| delta * delta <= b).unwrap_or(true) {
            self.nearest_rec(far.0, far.1, 1 - axis, c, exclude, best);
        }
    }
}

fn build_rec(entries: &mut [(Point2, u32)], axis: usize) {
    let n = entries.len();
    if n <= 1 {
        return;
    }
    let mid = n / 2;
    entries.select_nth_unstable_by(mid, |a, b| {
        let (ka, kb) = if axis == 0 { (a.0.x, b.0.x) } else { (a.0.y, b.0.y) };
        ka.partial_cmp(&kb).unwrap()
    });
    let (left, right) = entries.split_at_mut(mid);
    build_rec(left, 1 - axis);
    build_rec(&mut right[1..], 1 - axis);
}

// ---------------------------------------------------------------------------
// Summary functions
// ---------------------------------------------------------------------------

/// Which set a descriptor side refers to: one type level or any point.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Target<'a> {
    Level(&'a str),
    Any,
}

impl Target<'_> {
    fn label(&self) -> String {
        match self {
            Target::Level(t) => t.to_string(),
            Target::Any => "\u{2022}".to_string(),
        }
    }
}

/// Edge-correction choice for pairwise estimators.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeCorrection {
    None,
    Translation,
    Border,
}

impl EdgeCorrection {
    fn tag(self) -> &'static str {
        match self {
            EdgeCorrection::None => "none",
            EdgeCorrection::Translation => "translation",
            EdgeCorrection::Border => "border",
        }
    }
}

/// Homogeneous or inhomogeneous estimator family for F/G/J.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Homogeneous,
    Inhomogeneous,
}

/// Intensity plug-in for the inhomogeneous estimators.
#[derive(Clone, Copy)]
pub enum IntensitySource<'a> {
    /// Constant `n_side / |W|` per side.
    Homogeneous,
    /// Adaptive kernel estimate with leave-one-out at the data points;
    /// `None` bandwidth means Scott's rule per side.
    Adaptive {
        global_bandwidth: Option<f64>,
        grid: GridSpec,
    },
    /// Caller-supplied surfaces, sampled at the data points.
    Supplied {
        i: &'a ScalarField,
        j: &'a ScalarField,
    },
}

impl IntensitySource<'_> {
    fn tag(&self) -> &'static str {
        match self {
            IntensitySource::Homogeneous => "constant",
            IntensitySource::Adaptive { .. } => "adaptive",
            IntensitySource::Supplied { .. } => "supplied",
        }
    }
}

/// Work-unit size for the deterministic parallel accumulations.
const CHUNK: usize = 64;

/// A functional descriptor evaluated on a distance grid.
#[derive(Debug, Clone, Serialize)]
pub struct SummaryFunction {
    pub name: String,
    pub type_pair: (String, String),
    pub r: Vec<f64>,
    /// Estimated values; NaN marks grid points where the estimator is
    /// undefined (e.g. J where F reaches 1).
    pub values: Vec<f64>,
    /// Benchmark curve under the relevant null (NaN when none applies).
    pub theoretical: Vec<f64>,
    pub edge_correction: &'static str,
    pub intensity_source: &'static str,
}

/// Uniform distance grid on `(0, r0]` (513 values by default, following the
/// usual quarter-side rule capped at 350 length units).
pub fn default_r_grid(window: &Window) -> Vec<f64> {
    let bb = window.bbox();
    let r0 = (bb.width().min(bb.height()) / 4.0).min(350.0);
    uniform_r_grid(r0, 513)
}

pub fn uniform_r_grid(r0: f64, d: usize) -> Vec<f64> {
    assert!(r0 > 0.0 && d >= 1);
    (1..=d).map(|k| r0 * k as f64 / d as f64).collect()
}

fn indices_for(pattern: &MultitypePattern, sel: Target) -> Result<Vec<usize>, SecondOrderError> {
    match sel {
        Target::Any => Ok((0..pattern.n()).collect()),
        Target::Level(t) => {
            let idx = pattern
                .type_index(t)
                .ok_or_else(|| SecondOrderError::UnknownLevel(t.to_string()))?;
            let v = pattern.indices_of_type(idx);
            if v.is_empty() {
                return Err(SecondOrderError::EmptyType(t.to_string()));
            }
            Ok(v)
        }
    }
}

/// Intensities of the `sel` component evaluated at the pattern points in
/// `at` (pattern indices). Adaptive estimates are leave-one-out at points
/// belonging to the component.
fn intensities_at(
    pattern: &MultitypePattern,
    sel: Target,
    at: &[usize],
    source: &IntensitySource<'_>,
    side_is_j: bool,
) -> Result<Vec<f64>, SecondOrderError> {
    let member = indices_for(pattern, sel)?;
    match source {
        IntensitySource::Homogeneous => {
            let lambda = member.len() as f64 / pattern.window().area();
            Ok(vec![lambda; at.len()])
        }
        IntensitySource::Supplied { i, j } => {
            let field = if side_is_j { *j } else { *i };
            at.iter()
                .map(|&k| {
                    field
                        .sample(pattern.points()[k])
                        .filter(|v| *v > 0.0)
                        .ok_or(SecondOrderError::NonPositiveIntensityAtPoint)
                })
                .collect()
        }
        IntensitySource::Adaptive {
            global_bandwidth,
            grid,
        } => {
            match sel {
                Target::Level(_) => {
                    let pts: Vec<Point2> = member.iter().map(|&k| pattern.points()[k]).collect();
                    let eps = match global_bandwidth {
                        Some(e) => *e,
                        None => scott_global_bandwidth(&pts)?,
                    };
                    // Values at the component's own points (leave-one-out),
                    // plus direct evaluation for outside points.
                    let loo = adaptive_intensity_at_points_loo(&pts, pattern.window(), eps, *grid)?;
                    let pos: std::collections::HashMap<usize, usize> =
                        member.iter().enumerate().map(|(a, &k)| (k, a)).collect();
                    at.iter()
                        .map(|&k| match pos.get(&k) {
                            Some(&a) => {
                                let v = loo[a];
                                if v > 0.0 {
                                    Ok(v)
                                } else {
                                    Err(SecondOrderError::NonPositiveIntensityAtPoint)
                                }
                            }
                            None => Err(SecondOrderError::NonPositiveIntensityAtPoint),
                        })
                        .collect()
                }
                Target::Any => {
                    // Sum of per-type adaptive estimates, leave-one-out
                    // within the point's own type.
                    let mut total = vec![0.0; at.len()];
                    for t in 0..pattern.type_names().len() {
                        let t_idx = pattern.indices_of_type(t as u32);
                        if t_idx.is_empty() {
                            continue;
                        }
                        let pts: Vec<Point2> =
                            t_idx.iter().map(|&k| pattern.points()[k]).collect();
                        if pts.len() < 2 {
                            // A single point of a type adds (almost) nothing
                            // to the pooled intensity at other points.
                            continue;
                        }
                        let eps = match global_bandwidth {
                            Some(e) => *e,
                            None => scott_global_bandwidth(&pts)?,
                        };
                        let loo =
                            adaptive_intensity_at_points_loo(&pts, pattern.window(), eps, *grid)?;
                        let pos: std::collections::HashMap<usize, usize> =
                            t_idx.iter().enumerate().map(|(a, &k)| (k, a)).collect();
                        // Direct (not leave-one-out) values at foreign points.
                        let eval_pts: Vec<Point2> =
                            at.iter().map(|&k| pattern.points()[k]).collect();
                        let direct = crate::intensity::fixed_intensity_at(
                            &pts,
                            pattern.window(),
                            eps,
                            *grid,
                            &eval_pts,
                            false,
                        );
                        for (a, &k) in at.iter().enumerate() {
                            total[a] += match pos.get(&k) {
                                Some(&own) => loo[own],
                                None => direct[a],
                            };
                        }
                    }
                    if total.iter().any(|&v| v.is_nan() || v <= 0.0) {
                        return Err(SecondOrderError::NonPositiveIntensityAtPoint);
                    }
                    Ok(total)
                }
            }
        }
    }
}

fn translation_weight(window: &Window, d: Point2) -> Result<f64, SecondOrderError> {
    let overlap = window
        .overlap_area_translated(d.x, d.y)
        .ok_or(SecondOrderError::TranslationNeedsConvexWindow)?;
    if overlap <= 0.0 {
        return Ok(0.0);
    }
    Ok(window.area() / overlap)
}

/// First grid index whose distance is `>= d` (contributions to a cumulative
/// statistic start there).
fn first_bin(r: &[f64], d: f64) -> usize {
    r.partition_point(|&x| x < d)
}

/// Inhomogeneous cross/dot K-function.
///
/// `K_ij(r) = (1/|W|) sum_{u in X(i)} sum_{v in X(j)} 1{|u-v| <= r}
/// e(u,v) / (lambda_i(u) lambda_j(v))`, with the dot version obtained by
/// letting the second sum run over points of any type.
pub fn kcross_inhom(
    pattern: &MultitypePattern,
    i: &str,
    j: Target,
    r_grid: &[f64],
    intensity: &IntensitySource<'_>,
    edge: EdgeCorrection,
) -> Result<SummaryFunction, SecondOrderError> {
    let i_idx = indices_for(pattern, Target::Level(i))?;
    let j_idx = indices_for(pattern, j)?;
    let lam_i = intensities_at(pattern, Target::Level(i), &i_idx, intensity, false)?;
    let lam_j = intensities_at(pattern, j, &j_idx, intensity, true)?;
    if lam_i.iter().chain(lam_j.iter()).any(|&v| v.is_nan() || v <= 0.0) {
        return Err(SecondOrderError::NonPositiveIntensityAtPoint);
    }
    let values = k_accumulate(pattern, &i_idx, &j_idx, &lam_i, &lam_j, r_grid, edge, false)?;
    Ok(SummaryFunction {
        name: format!("K_{{{},{}}}", i, j.label()),
        type_pair: (i.to_string(), j.label()),
        r: r_grid.to_vec(),
        values,
        theoretical: r_grid.iter().map(|&r| PI * r * r).collect(),
        edge_correction: edge.tag(),
        intensity_source: intensity.tag(),
    })
}

/// Reference double-loop evaluation of the same estimator (no spatial
/// index); kept as an independent route for verification.
pub fn kcross_inhom_naive(
    pattern: &MultitypePattern,
    i: &str,
    j: Target,
    r_grid: &[f64],
    intensity: &IntensitySource<'_>,
    edge: EdgeCorrection,
) -> Result<SummaryFunction, SecondOrderError> {
    let i_idx = indices_for(pattern, Target::Level(i))?;
    let j_idx = indices_for(pattern, j)?;
    let lam_i = intensities_at(pattern, Target::Level(i), &i_idx, intensity, false)?;
    let lam_j = intensities_at(pattern, j, &j_idx, intensity, true)?;
    let values = k_accumulate(pattern, &i_idx, &j_idx, &lam_i, &lam_j, r_grid, edge, true)?;
    Ok(SummaryFunction {
        name: format!("K_{{{},{}}} (naive)", i, j.label()),
        type_pair: (i.to_string(), j.label()),
        r: r_grid.to_vec(),
        values,
        theoretical: r_grid.iter().map(|&r| PI * r * r).collect(),
        edge_correction: edge.tag(),
        intensity_source: intensity.tag(),
    })
}

#[allow(clippy::too_many_arguments)]
fn k_accumulate(
    pattern: &MultitypePattern,
    i_idx: &[usize],
    j_idx: &[usize],
    lam_i: &[f64],
    lam_j: &[f64],
    r_grid: &[f64],
    edge: EdgeCorrection,
    naive: bool,
) -> Result<Vec<f64>, SecondOrderError> {
    let window = pattern.window();
    let d = r_grid.len();
    let r0 = *r_grid.last().unwrap();
    let pts = pattern.points();
    let j_pts: Vec<Point2> = j_idx.iter().map(|&k| pts[k]).collect();
    let j_lookup: Vec<usize> = j_idx.to_vec();
    let index = if naive { None } else { Some(PairCountIndex::build(&j_pts)) };

    // Checked upfront so the parallel pair loop cannot fail midway.
    if edge == EdgeCorrection::Translation
        && window.as_axis_rectangle().is_none()
        && !window.is_convex()
    {
        return Err(SecondOrderError::TranslationNeedsConvexWindow);
    }

    let process = |l_pos: usize| -> (Vec<f64>, Vec<f64>) {
        let l = i_idx[l_pos];
        let u = pts[l];
        let mut num = vec![0.0; d + 1];
        let mut den = vec![0.0; d + 1];
        let border = edge == EdgeCorrection::Border;
        let b_l = if border { window.boundary_distance(u) } else { f64::INFINITY };
        if border {
            // This point is at risk for all r <= b_l.
            let ub = r_grid.partition_point(|&x| x <= b_l);
            if ub == 0 {
                return (num, den);
            }
            den[0] += 1.0 / lam_i[l_pos];
            den[ub] -= 1.0 / lam_i[l_pos];
        }
        let mut visit = |k_pos: usize, d2: f64| {
            let k = j_lookup[k_pos];
            if k == l {
                return; // identical point (i = j or dot case)
            }
            let dist = d2.sqrt();
            if dist > r0 {
                return;
            }
            let v = pts[k];
            let w_edge = match edge {
                EdgeCorrection::None => 1.0,
                EdgeCorrection::Translation => {
                    translation_weight(window, Point2::new(u.x - v.x, u.y - v.y)).unwrap_or(0.0)
                }
                EdgeCorrection::Border => 1.0,
            };
            if w_edge == 0.0 {
                return;
            }
            let contrib = w_edge / (lam_i[l_pos] * lam_j[k_pos]);
            let start = first_bin(r_grid, dist);
            if start >= d {
                return;
            }
            if border {
                // Contributes while r >= dist and r <= b_l.
                let stop = r_grid.partition_point(|&x| x <= b_l);
                if stop > start {
                    num[start] += contrib;
                    num[stop] -= contrib;
                }
            } else {
                num[start] += contrib;
                num[d] -= contrib;
            }
        };
        match &index {
            Some(tree) => tree.for_each_within(u, r0, &mut visit),
            None => {
                for (k_pos, v) in j_pts.iter().enumerate() {
                    let d2 = u.dist_sq(*v);
                    if d2 <= r0 * r0 {
                        visit(k_pos, d2);
                    }
                }
            }
        }
        (num, den)
    };

    let zero = || (vec![0.0; d + 1], vec![0.0; d + 1]);
    let add = |(mut a, mut b): (Vec<f64>, Vec<f64>), (x, y): (Vec<f64>, Vec<f64>)| {
        for q in 0..=d {
            a[q] += x[q];
            b[q] += y[q];
        }
        (a, b)
    };
    // Fixed chunking plus an ordered fold keeps the floating-point sums
    // identical for every thread count.
    let (num_diff, den_diff) = if naive {
        (0..i_idx.len()).map(process).fold(zero(), add)
    } else {
        let starts: Vec<usize> = (0..i_idx.len()).step_by(CHUNK).collect();
        starts
            .par_iter()
            .map(|&s| {
                (s..(s + CHUNK).min(i_idx.len()))
                    .map(process)
                    .fold(zero(), add)
            })
            .collect::<Vec<_>>()
            .into_iter()
            .fold(zero(), add)
    };

    let mut values = vec![0.0; d];
    match edge {
        EdgeCorrection::Border => {
            let mut num = 0.0;
            let mut den = 0.0;
            for q in 0..d {
                num += num_diff[q];
                den += den_diff[q];
                values[q] = if den > 0.0 { num / den } else { f64::NAN };
            }
        }
        _ => {
            let mut acc = 0.0;
            for q in 0..d {
                acc += num_diff[q];
                values[q] = acc / window.area();
            }
        }
    }
    Ok(values)
}

/// `L(r) = sqrt(K(r) / pi)`, optionally centred as `L(r) - r`.
pub fn l_transform(k: &SummaryFunction, centred: bool) -> Result<SummaryFunction, SecondOrderError> {
    if k.values.iter().any(|&v| v < 0.0) {
        return Err(SecondOrderError::NegativeK);
    }
    let values: Vec<f64> = k
        .values
        .iter()
        .zip(k.r.iter())
        .map(|(&v, &r)| {
            let l = (v / PI).sqrt();
            if centred {
                l - r
            } else {
                l
            }
        })
        .collect();
    let theoretical: Vec<f64> = k.r.iter().map(|&r| if centred { 0.0 } else { r }).collect();
    Ok(SummaryFunction {
        name: if centred {
            k.name.replacen('K', "L-r", 1)
        } else {
            k.name.replacen('K', "L", 1)
        },
        type_pair: k.type_pair.clone(),
        r: k.r.clone(),
        values,
        theoretical,
        edge_correction: k.edge_correction,
        intensity_source: k.intensity_source,
    })
}

/// Cross/dot pair correlation via Epanechnikov smoothing of the pair
/// distances: the non-cumulative density whose integral recovers K.
pub fn pcf_cross(
    pattern: &MultitypePattern,
    i: &str,
    j: Target,
    r_grid: &[f64],
    intensity: &IntensitySource<'_>,
    bandwidth: Option<f64>,
) -> Result<SummaryFunction, SecondOrderError> {
    let i_idx = indices_for(pattern, Target::Level(i))?;
    let j_idx = indices_for(pattern, j)?;
    let lam_i = intensities_at(pattern, Target::Level(i), &i_idx, intensity, false)?;
    let lam_j = intensities_at(pattern, j, &j_idx, intensity, true)?;

    let window = pattern.window();
    let b = bandwidth.unwrap_or_else(|| stoyan_bandwidth(pattern.n(), window.area()));
    let r_min = r_grid[0];
    if b > r_min {
        return Err(SecondOrderError::BandwidthTooSmall { bandwidth: b, r_min });
    }
    if window.as_axis_rectangle().is_none() && !window.is_convex() {
        return Err(SecondOrderError::TranslationNeedsConvexWindow);
    }

    let d = r_grid.len();
    let r0 = *r_grid.last().unwrap();
    let pts = pattern.points();
    let j_pts: Vec<Point2> = j_idx.iter().map(|&k| pts[k]).collect();
    let tree = PairCountIndex::build(&j_pts);

    let per_point = |l_pos: usize, acc: &mut [f64]| {
        let l = i_idx[l_pos];
        let u = pts[l];
        tree.for_each_within(u, r0 + b, |k_pos, d2| {
            let k = j_idx[k_pos];
            if k == l {
                return;
            }
            let dist = d2.sqrt();
            let v = pts[k];
            let w_edge =
                translation_weight(window, Point2::new(u.x - v.x, u.y - v.y)).unwrap_or(0.0);
            if w_edge == 0.0 {
                return;
            }
            let contrib = w_edge / (lam_i[l_pos] * lam_j[k_pos]);
            // Bins whose grid distance lies within the kernel support.
            let lo = r_grid.partition_point(|&x| x < dist - b);
            for (q, &r) in r_grid.iter().enumerate().skip(lo) {
                if r > dist + b {
                    break;
                }
                let t = (r - dist) / b;
                let kern = 0.75 * (1.0 - t * t) / b;
                acc[q] += contrib * kern / (2.0 * PI * r);
            }
        });
    };
    let starts: Vec<usize> = (0..i_idx.len()).step_by(CHUNK).collect();
    let values = starts
        .par_iter()
        .map(|&s| {
            let mut acc = vec![0.0; d];
            for l_pos in s..(s + CHUNK).min(i_idx.len()) {
                per_point(l_pos, &mut acc);
            }
            acc
        })
        .collect::<Vec<_>>()
        .into_iter()
        .fold(vec![0.0; d], |mut a, x| {
            for q in 0..d {
                a[q] += x[q];
            }
            a
        });

    Ok(SummaryFunction {
        name: format!("g_{{{},{}}}", i, j.label()),
        type_pair: (i.to_string(), j.label()),
        r: r_grid.to_vec(),
        values: values.iter().map(|v| v / window.area()).collect(),
        theoretical: vec![1.0; d],
        edge_correction: EdgeCorrection::Translation.tag(),
        intensity_source: intensity.tag(),
    })
}

/// Smoothing bandwidth rule for the pair correlation: `0.15 / sqrt(n/|W|)`.
pub fn stoyan_bandwidth(n: usize, area: f64) -> f64 {
    0.15 / (n as f64 / area).sqrt()
}

// ---------------------------------------------------------------------------
// Shortest-distance descriptors
// ---------------------------------------------------------------------------

/// Distance observations with their censoring radii (distance to the
/// window boundary), ready for a product-limit estimate.
struct CensoredDistances {
    /// (observed time, is_event) sorted ascending; is_event = the
    /// neighbour distance was reached before the boundary.
    obs: Vec<(f64, bool)>,
}

impl CensoredDistances {
    fn new(mut obs: Vec<(f64, bool)>) -> Self {
        obs.sort_by(|a, b| {
            a.0.partial_cmp(&b.0)
                .unwrap()
                // events before censorings at equal times
                .then(b.1.cmp(&a.1))
        });
        CensoredDistances { obs }
    }

    /// Kaplan-Meier CDF on the grid (monotone, in [0, 1]).
    fn km_cdf(&self, r_grid: &[f64]) -> Vec<f64> {
        let n = self.obs.len();
        let mut out = Vec::with_capacity(r_grid.len());
        let mut at_risk = n as f64;
        let mut surv = 1.0;
        let mut k = 0usize;
        for &r in r_grid {
            while k < n && self.obs[k].0 <= r {
                let (_, event) = self.obs[k];
                if event {
                    surv *= 1.0 - 1.0 / at_risk;
                }
                at_risk -= 1.0;
                k += 1;
            }
            out.push(1.0 - surv);
        }
        out
    }
}

/// Nearest-neighbour distance distribution from type `i` to target `j`.
///
/// Homogeneous mode: Kaplan-Meier estimate censored at the boundary
/// distance. Inhomogeneous mode: product estimator
/// `1 - (1/n_i) sum_u prod_{x in X(j) cap b(u,r)} (1 - lam_min / lam(x))`.
pub fn gcross(
    pattern: &MultitypePattern,
    i: &str,
    j: Target,
    r_grid: &[f64],
    mode: Mode,
    intensity: &IntensitySource<'_>,
) -> Result<SummaryFunction, SecondOrderError> {
    let i_idx = indices_for(pattern, Target::Level(i))?;
    let j_idx = indices_for(pattern, j)?;
    let pts = pattern.points();
    let j_pts: Vec<Point2> = j_idx.iter().map(|&k| pts[k]).collect();
    let tree = PairCountIndex::build(&j_pts);
    let window = pattern.window();

    let values = match mode {
        Mode::Homogeneous => {
            let obs: Vec<(f64, bool)> = i_idx
                .iter()
                .map(|&l| {
                    let u = pts[l];
                    let b = window.boundary_distance(u);
                    // exclude the focal point when it belongs to the target set
                    let excl = j_idx.iter().position(|&k| k == l);
                    let d = tree
                        .nearest_excluding(u, excl)
                        .map(|(_, d)| d)
                        .unwrap_or(f64::INFINITY);
                    if d <= b {
                        (d, true)
                    } else {
                        (b, false)
                    }
                })
                .collect();
            CensoredDistances::new(obs).km_cdf(r_grid)
        }
        Mode::Inhomogeneous => {
            let lam_j = intensities_at(pattern, j, &j_idx, intensity, true)?;
            product_estimator(&i_idx.iter().map(|&l| pts[l]).collect::<Vec<_>>(),
                              Some(&i_idx), &tree, &j_idx, &lam_j, r_grid)?
        }
    };

    let theoretical = csr_distance_cdf(&j_idx, window, r_grid);
    Ok(SummaryFunction {
        name: format!("G_{{{},{}}}", i, j.label()),
        type_pair: (i.to_string(), j.label()),
        r: r_grid.to_vec(),
        values,
        theoretical,
        edge_correction: match mode {
            Mode::Homogeneous => "km",
            Mode::Inhomogeneous => "product",
        },
        intensity_source: intensity.tag(),
    })
}

/// Empty-space function of target `j` from a grid of query locations.
pub fn fest(
    pattern: &MultitypePattern,
    j: Target,
    r_grid: &[f64],
    query: GridSpec,
    mode: Mode,
    intensity: &IntensitySource<'_>,
) -> Result<SummaryFunction, SecondOrderError> {
    let j_idx = indices_for(pattern, j)?;
    let pts = pattern.points();
    let j_pts: Vec<Point2> = j_idx.iter().map(|&k| pts[k]).collect();
    let tree = PairCountIndex::build(&j_pts);
    let window = pattern.window();
    let mask = ScalarField::absent(window, query);
    let queries: Vec<Point2> = mask
        .iter_inside()
        .map(|(ix, iy, _)| mask.cell_center(ix, iy))
        .collect();
    if queries.is_empty() {
        return Err(SecondOrderError::EmptyQueryGrid);
    }

    let values = match mode {
        Mode::Homogeneous => {
            let obs: Vec<(f64, bool)> = queries
                .par_iter()
                .map(|&u| {
                    let b = window.boundary_distance(u);
                    let d = tree
                        .nearest_excluding(u, None)
                        .map(|(_, d)| d)
                        .unwrap_or(f64::INFINITY);
                    if d <= b {
                        (d, true)
                    } else {
                        (b, false)
                    }
                })
                .collect();
            CensoredDistances::new(obs).km_cdf(r_grid)
        }
        Mode::Inhomogeneous => {
            let lam_j = intensities_at(pattern, j, &j_idx, intensity, true)?;
            product_estimator(&queries, None, &tree, &j_idx, &lam_j, r_grid)?
        }
    };

    let theoretical = csr_distance_cdf(&j_idx, window, r_grid);
    Ok(SummaryFunction {
        name: format!("F_{{{}}}", j.label()),
        type_pair: (j.label(), j.label()),
        r: r_grid.to_vec(),
        values,
        theoretical,
        edge_correction: match mode {
            Mode::Homogeneous => "km",
            Mode::Inhomogeneous => "product",
        },
        intensity_source: intensity.tag(),
    })
}

/// Cronie-van Lieshout style product estimator shared by the
/// inhomogeneous G and F: the outer average runs over `outer` locations,
/// the product over target points within distance r.
fn product_estimator(
    outer: &[Point2],
    outer_pattern_idx: Option<&[usize]>,
    tree: &PairCountIndex,
    j_idx: &[usize],
    lam_j: &[f64],
    r_grid: &[f64],
) -> Result<Vec<f64>, SecondOrderError> {
    if lam_j.iter().any(|&v| v.is_nan() || v <= 0.0) {
        return Err(SecondOrderError::NonPositiveIntensityAtPoint);
    }
    let lam_min = lam_j.iter().cloned().fold(f64::INFINITY, f64::min);
    let d = r_grid.len();
    let r0 = *r_grid.last().unwrap();
    let per_outer = |a: usize, out: &mut [f64]| {
        let u = outer[a];
        let self_idx = outer_pattern_idx.map(|ids| ids[a]);
        // Collect (distance, 1 - lam_min/lam) factors within r0.
        let mut factors: Vec<(f64, f64)> = Vec::new();
        tree.for_each_within(u, r0, |k_pos, d2| {
            if Some(j_idx[k_pos]) == self_idx {
                return;
            }
            factors.push((d2.sqrt(), 1.0 - lam_min / lam_j[k_pos]));
        });
        factors.sort_by(|x, y| x.0.partial_cmp(&y.0).unwrap());
        // Running product against the grid.
        let mut prod = 1.0;
        let mut k = 0usize;
        for (q, &r) in r_grid.iter().enumerate() {
            while k < factors.len() && factors[k].0 <= r {
                prod *= factors[k].1;
                k += 1;
            }
            out[q] += prod;
        }
    };
    let starts: Vec<usize> = (0..outer.len()).step_by(CHUNK).collect();
    let sums = starts
        .par_iter()
        .map(|&s| {
            let mut acc = vec![0.0; d];
            for a in s..(s + CHUNK).min(outer.len()) {
                per_outer(a, &mut acc);
            }
            acc
        })
        .collect::<Vec<_>>()
        .into_iter()
        .fold(vec![0.0; d], |mut acc, x| {
            for q in 0..d {
                acc[q] += x[q];
            }
            acc
        });
    Ok(sums
        .iter()
        .map(|s| 1.0 - s / outer.len() as f64)
        .collect())
}

/// CSR/CSRI benchmark CDF `1 - exp(-lambda pi r^2)` at the count-based
/// intensity of the target component.
fn csr_distance_cdf(j_idx: &[usize], window: &Window, r_grid: &[f64]) -> Vec<f64> {
    let lambda = j_idx.len() as f64 / window.area();
    r_grid
        .iter()
        .map(|&r| 1.0 - (-lambda * PI * r * r).exp())
        .collect()
}

/// `J_ij(r) = (1 - G_ij(r)) / (1 - F_j(r))`, masked where `F >= 1 - 1e-9`.
pub fn jfun(
    pattern: &MultitypePattern,
    i: &str,
    j: Target,
    r_grid: &[f64],
    query: GridSpec,
    mode: Mode,
    intensity: &IntensitySource<'_>,
) -> Result<SummaryFunction, SecondOrderError> {
    let g = gcross(pattern, i, j, r_grid, mode, intensity)?;
    let f = fest(pattern, j, r_grid, query, mode, intensity)?;
    Ok(j_from_parts(&g, &f, i, j))
}

/// Assembles J from previously computed G and F curves.
pub fn j_from_parts(g: &SummaryFunction, f: &SummaryFunction, i: &str, j: Target) -> SummaryFunction {
    let values: Vec<f64> = g
        .values
        .iter()
        .zip(f.values.iter())
        .map(|(&gv, &fv)| {
            if fv >= 1.0 - 1e-9 || gv.is_nan() || fv.is_nan() {
                f64::NAN
            } else {
                (1.0 - gv) / (1.0 - fv)
            }
        })
        .collect();
    SummaryFunction {
        name: format!("J_{{{},{}}}", i, j.label()),
        type_pair: (i.to_string(), j.label()),
        r: g.r.clone(),
        values,
        theoretical: vec![1.0; g.r.len()],
        edge_correction: g.edge_correction,
        intensity_source: g.intensity_source,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pattern::MultitypePattern;
    use approx::assert_relative_eq;
    use rand::Rng as _;

    fn unit_window() -> Window {
        Window::rectangle(0.0, 0.0, 1.0, 1.0).unwrap()
    }

    fn two_type(points: Vec<Point2>, labels: Vec<u32>) -> MultitypePattern {
        MultitypePattern::new(
            "p",
            points,
            vec!["a".into(), "b".into()],
            labels,
            unit_window(),
        )
        .unwrap()
    }

    #[test]
    fn radius_queries_match_exhaustive_scan() {
        let mut rng = crate::rng::master(11);
        for trial in 0..50 {
            let n = 20 + (trial * 9) % 480;
            let pts: Vec<Point2> = (0..n)
                .map(|_| Point2::new(rng.random::<f64>(), rng.random::<f64>()))
                .collect();
            let tree = PairCountIndex::build(&pts);
            let center = Point2::new(rng.random::<f64>(), rng.random::<f64>());
            let radius = 0.05 + 0.3 * rng.random::<f64>();
            let mut found = Vec::new();
            tree.for_each_within(center, radius, |i, _| found.push(i));
            found.sort_unstable();
            let mut brute: Vec<usize> = (0..n)
                .filter(|&i| pts[i].dist(center) <= radius)
                .collect();
            brute.sort_unstable();
            assert_eq!(found, brute);

            let nn = tree.nearest_excluding(center, None).unwrap();
            let brute_nn = (0..n)
                .min_by(|&a, &b| {
                    pts[a]
                        .dist_sq(center)
                        .partial_cmp(&pts[b].dist_sq(center))
                        .unwrap()
                })
                .unwrap();
            assert_relative_eq!(nn.1, pts[brute_nn].dist(center), epsilon = 1e-12);
        }
    }

    #[test]
    fn single_pair_k_steps_at_the_pair_distance() {
        // One point of each type half a unit apart, unit intensities, no
        // edge correction: K jumps from 0 to 1 at r = 0.5.
        let p = two_type(
            vec![Point2::new(0.25, 0.5), Point2::new(0.75, 0.5)],
            vec![0, 1],
        );
        let ones = ScalarField::from_fn(&unit_window(), GridSpec::square(16), |_| 1.0);
        let source = IntensitySource::Supplied { i: &ones, j: &ones };
        let r = uniform_r_grid(0.8, 16);
        let k = kcross_inhom(&p, "a", Target::Level("b"), &r, &source, EdgeCorrection::None)
            .unwrap();
        for (q, &rv) in r.iter().enumerate() {
            let expect = if rv >= 0.5 { 1.0 } else { 0.0 };
            assert_relative_eq!(k.values[q], expect, epsilon = 1e-12);
        }
    }

    #[test]
    fn dot_with_single_type_equals_single_type_k() {
        let mut rng = crate::rng::master(3);
        let pts: Vec<Point2> = (0..60)
            .map(|_| Point2::new(rng.random::<f64>(), rng.random::<f64>()))
            .collect();
        let p = MultitypePattern::new("p", pts, vec!["only".into()], vec![0; 60], unit_window())
            .unwrap();
        let r = uniform_r_grid(0.25, 64);
        let src = IntensitySource::Homogeneous;
        let k_dot =
            kcross_inhom(&p, "only", Target::Any, &r, &src, EdgeCorrection::Translation).unwrap();
        let k_ii = kcross_inhom(
            &p,
            "only",
            Target::Level("only"),
            &r,
            &src,
            EdgeCorrection::Translation,
        )
        .unwrap();
        for q in 0..r.len() {
            assert_relative_eq!(k_dot.values[q], k_ii.values[q], epsilon = 1e-12);
        }
    }

    #[test]
    fn index_and_naive_estimators_agree() {
        let mut rng = crate::rng::master(17);
        for trial in 0..10 {
            let n = 50 + trial * 45;
            let pts: Vec<Point2> = (0..n)
                .map(|_| Point2::new(rng.random::<f64>(), rng.random::<f64>()))
                .collect();
            let labels: Vec<u32> = (0..n).map(|_| rng.random_range(0..2)).collect();
            let p = two_type(pts, labels);
            if p.type_counts().iter().any(|&c| c == 0) {
                continue;
            }
            let r = uniform_r_grid(0.25, 101);
            let src = IntensitySource::Homogeneous;
            for edge in [EdgeCorrection::None, EdgeCorrection::Translation, EdgeCorrection::Border]
            {
                let fast =
                    kcross_inhom(&p, "a", Target::Level("b"), &r, &src, edge).unwrap();
                let slow =
                    kcross_inhom_naive(&p, "a", Target::Level("b"), &r, &src, edge).unwrap();
                for q in 0..r.len() {
                    let (a, b) = (fast.values[q], slow.values[q]);
                    if a.is_nan() && b.is_nan() {
                        continue;
                    }
                    assert_relative_eq!(a, b, epsilon = 1e-12, max_relative = 1e-12);
                }
            }
        }
    }

    #[test]
    fn k_is_symmetric_under_translation_correction() {
        let mut rng = crate::rng::master(5);
        let pts: Vec<Point2> = (0..120)
            .map(|_| Point2::new(rng.random::<f64>(), rng.random::<f64>()))
            .collect();
        let labels: Vec<u32> = (0..120).map(|i| (i % 2) as u32).collect();
        let p = two_type(pts, labels);
        let r = uniform_r_grid(0.25, 64);
        let src = IntensitySource::Homogeneous;
        let kij =
            kcross_inhom(&p, "a", Target::Level("b"), &r, &src, EdgeCorrection::Translation)
                .unwrap();
        let kji =
            kcross_inhom(&p, "b", Target::Level("a"), &r, &src, EdgeCorrection::Translation)
                .unwrap();
        for q in 0..r.len() {
            assert_relative_eq!(kij.values[q], kji.values[q], epsilon = 1e-10, max_relative = 1e-10);
        }
    }

    #[test]
    fn k_is_nondecreasing() {
        let mut rng = crate::rng::master(29);
        let pts: Vec<Point2> = (0..150)
            .map(|_| Point2::new(rng.random::<f64>(), rng.random::<f64>()))
            .collect();
        let p = MultitypePattern::new("p", pts, vec!["t".into()], vec![0; 150], unit_window())
            .unwrap();
        let r = uniform_r_grid(0.25, 128);
        let k = kcross_inhom(
            &p,
            "t",
            Target::Level("t"),
            &r,
            &IntensitySource::Homogeneous,
            EdgeCorrection::Translation,
        )
        .unwrap();
        for q in 1..r.len() {
            assert!(k.values[q] + 1e-12 >= k.values[q - 1]);
        }
    }

    #[test]
    fn l_transform_identities() {
        let r = uniform_r_grid(0.5, 32);
        let k_csr = SummaryFunction {
            name: "K".into(),
            type_pair: ("t".into(), "t".into()),
            r: r.clone(),
            values: r.iter().map(|&x| PI * x * x).collect(),
            theoretical: r.iter().map(|&x| PI * x * x).collect(),
            edge_correction: "none",
            intensity_source: "constant",
        };
        let l = l_transform(&k_csr, false).unwrap();
        for (q, &rv) in r.iter().enumerate() {
            assert_relative_eq!(l.values[q], rv, epsilon = 1e-12);
        }
        let centred = l_transform(&k_csr, true).unwrap();
        for q in 0..r.len() {
            assert_relative_eq!(centred.values[q], 0.0, epsilon = 1e-12);
        }
        let zero = SummaryFunction {
            values: vec![0.0; r.len()],
            ..k_csr.clone()
        };
        let l0 = l_transform(&zero, false).unwrap();
        assert!(l0.values.iter().all(|&v| v == 0.0));
        // spot value: K(0.2) = 0.2 -> L = sqrt(0.2/pi)
        let spot = SummaryFunction {
            values: vec![0.2; r.len()],
            ..k_csr
        };
        let ls = l_transform(&spot, false).unwrap();
        assert_relative_eq!(ls.values[0], (0.2 / PI).sqrt(), epsilon = 1e-12);
        assert_relative_eq!(ls.values[0], 0.2523, epsilon = 1e-4);
    }

    #[test]
    fn negative_k_is_rejected() {
        let r = uniform_r_grid(0.5, 4);
        let bad = SummaryFunction {
            name: "K".into(),
            type_pair: ("t".into(), "t".into()),
            r,
            values: vec![0.1, -0.2, 0.3, 0.4],
            theoretical: vec![0.0; 4],
            edge_correction: "none",
            intensity_source: "constant",
        };
        assert!(matches!(
            l_transform(&bad, false),
            Err(SecondOrderError::NegativeK)
        ));
    }

    #[test]
    fn pcf_zero_when_no_cross_pairs_in_range() {
        let p = two_type(
            vec![Point2::new(0.1, 0.1), Point2::new(0.9, 0.9)],
            vec![0, 1],
        );
        let r: Vec<f64> = (1..=24).map(|k| 0.05 + 0.01 * k as f64).collect();
        let g = pcf_cross(
            &p,
            "a",
            Target::Level("b"),
            &r,
            &IntensitySource::Homogeneous,
            Some(0.05),
        )
        .unwrap();
        assert!(g.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pcf_bandwidth_guard() {
        let p = two_type(
            vec![Point2::new(0.2, 0.2), Point2::new(0.8, 0.8)],
            vec![0, 1],
        );
        let r = uniform_r_grid(0.2, 32); // r_min = 0.00625
        let err = pcf_cross(
            &p,
            "a",
            Target::Level("b"),
            &r,
            &IntensitySource::Homogeneous,
            Some(0.05),
        );
        // bandwidth 0.05 > r_min -> rejected
        assert!(matches!(err, Err(SecondOrderError::BandwidthTooSmall { .. })));
        let _ = err;
        // and with explicit coarse start it passes
        let r2: Vec<f64> = (1..=20).map(|k| 0.06 + 0.01 * k as f64).collect();
        assert!(pcf_cross(
            &p,
            "a",
            Target::Level("b"),
            &r2,
            &IntensitySource::Homogeneous,
            Some(0.05)
        )
        .is_ok());
    }

    #[test]
    fn g_far_targets_stay_zero_and_monotone() {
        let mut pts = vec![Point2::new(0.05, 0.05)];
        let mut labels = vec![0u32];
        for k in 0..5 {
            pts.push(Point2::new(0.9, 0.1 + 0.18 * k as f64));
            labels.push(1);
        }
        let p = two_type(pts, labels);
        let r = uniform_r_grid(0.2, 32);
        let g = gcross(
            &p,
            "a",
            Target::Level("b"),
            &r,
            Mode::Homogeneous,
            &IntensitySource::Homogeneous,
        )
        .unwrap();
        assert!(g.values.iter().all(|&v| v == 0.0));
        let g2 = gcross(
            &p,
            "b",
            Target::Level("b"),
            &r,
            Mode::Homogeneous,
            &IntensitySource::Homogeneous,
        )
        .unwrap();
        for q in 1..r.len() {
            assert!(g2.values[q] + 1e-12 >= g2.values[q - 1]);
            assert!((0.0..=1.0).contains(&g2.values[q]));
        }
    }

    #[test]
    fn f_bounded_and_saturates() {
        let p = two_type(
            vec![Point2::new(0.5, 0.5), Point2::new(0.52, 0.5)],
            vec![0, 1],
        );
        let r = uniform_r_grid(1.2, 24);
        let f = fest(
            &p,
            Target::Any,
            &r,
            GridSpec::square(24),
            Mode::Homogeneous,
            &IntensitySource::Homogeneous,
        )
        .unwrap();
        for q in 1..r.len() {
            assert!(f.values[q] + 1e-12 >= f.values[q - 1]);
            assert!(f.values[q] <= 1.0 + 1e-12);
        }
        // With a constant intensity plug-in, the product estimator is the
        // plain empty-space CDF: every query sees the cluster within the
        // range, so it saturates at exactly one.
        let f2 = fest(
            &p,
            Target::Any,
            &r,
            GridSpec::square(24),
            Mode::Inhomogeneous,
            &IntensitySource::Homogeneous,
        )
        .unwrap();
        assert_relative_eq!(*f2.values.last().unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn j_algebra() {
        let r = uniform_r_grid(1.0, 4);
        let mk = |vals: Vec<f64>| SummaryFunction {
            name: "x".into(),
            type_pair: ("a".into(), "b".into()),
            r: r.clone(),
            values: vals,
            theoretical: vec![f64::NAN; 4],
            edge_correction: "km",
            intensity_source: "constant",
        };
        // G == F pointwise -> J == 1
        let g = mk(vec![0.1, 0.4, 0.7, 0.9]);
        let f = mk(vec![0.1, 0.4, 0.7, 0.9]);
        let j = j_from_parts(&g, &f, "a", Target::Level("b"));
        for v in &j.values {
            assert_relative_eq!(*v, 1.0, epsilon = 1e-12);
        }
        // G = 0.5, F = 0.75 -> J = 2
        let j2 = j_from_parts(&mk(vec![0.5; 4]), &mk(vec![0.75; 4]), "a", Target::Level("b"));
        assert!(j2.values.iter().all(|&v| (v - 2.0).abs() < 1e-12));
        // masked where F ~ 1
        let j3 = j_from_parts(&mk(vec![0.5; 4]), &mk(vec![0.3, 1.0, 1.0 - 1e-12, 0.9]), "a", Target::Level("b"));
        assert!(!j3.values[0].is_nan());
        assert!(j3.values[1].is_nan() && j3.values[2].is_nan());
    }

    #[test]
    fn fest_with_far_target_is_zero_and_thin_window_fails() {
        // single far target: every query sits beyond the tiny range
        let p = two_type(
            vec![Point2::new(0.9, 0.9), Point2::new(0.9, 0.9)],
            vec![0, 1],
        );
        let r = uniform_r_grid(0.001, 8);
        let f = fest(
            &p,
            Target::Level("b"),
            &r,
            GridSpec::square(8),
            Mode::Homogeneous,
            &IntensitySource::Homogeneous,
        )
        .unwrap();
        assert!(f.values.iter().all(|&v| v == 0.0));
        // a coarse grid over a thin L-shaped window leaves every cell
        // centre outside the polygon
        let thin_l = Window::try_new(vec![
            Point2::new(0.0, 0.0),
            Point2::new(0.02, 0.0),
            Point2::new(0.02, 0.98),
            Point2::new(1.0, 0.98),
            Point2::new(1.0, 1.0),
            Point2::new(0.0, 1.0),
        ])
        .unwrap();
        let q = MultitypePattern::new(
            "p",
            vec![Point2::new(0.01, 0.5), Point2::new(0.01, 0.6)],
            vec!["a".into()],
            vec![0, 0],
            thin_l,
        )
        .unwrap();
        let err = fest(
            &q,
            Target::Any,
            &r,
            GridSpec { nx: 2, ny: 2 },
            Mode::Homogeneous,
            &IntensitySource::Homogeneous,
        );
        assert!(matches!(err, Err(SecondOrderError::EmptyQueryGrid)));
    }

    #[test]
    fn inhomogeneous_g_with_constant_field_matches_plain_ecdf() {
        let mut rng = crate::rng::master(41);
        let pts: Vec<Point2> = (0..100)
            .map(|_| Point2::new(rng.random::<f64>(), rng.random::<f64>()))
            .collect();
        let labels: Vec<u32> = (0..100).map(|i| (i % 2) as u32).collect();
        let p = two_type(pts.clone(), labels);
        let r = uniform_r_grid(0.2, 64);
        let g_inhom = gcross(
            &p,
            "a",
            Target::Level("b"),
            &r,
            Mode::Inhomogeneous,
            &IntensitySource::Homogeneous,
        )
        .unwrap();
        // With a constant intensity the product factors collapse to zero, so
        // the estimator is exactly the uncorrected empirical CDF.
        let b_idx: Vec<usize> = (0..100).filter(|i| i % 2 == 1).collect();
        let a_idx: Vec<usize> = (0..100).filter(|i| i % 2 == 0).collect();
        for (q, &rv) in r.iter().enumerate() {
            let count = a_idx
                .iter()
                .filter(|&&l| {
                    b_idx
                        .iter()
                        .any(|&k| pts[k].dist(pts[l]) <= rv)
                })
                .count();
            let ecdf = count as f64 / a_idx.len() as f64;
            assert_relative_eq!(g_inhom.values[q], ecdf, epsilon = 1e-12);
        }
    }
}
