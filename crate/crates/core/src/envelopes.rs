//! Global envelope tests via the extreme-rank-length (ERL) ordering.
//!
//! Curves are ranked pointwise across the ensemble (observed plus
//! simulations); each curve's sorted rank vector is compared
//! lexicographically, which grades curves by how long and how extreme their
//! excursions are. The ERL measure yields a Monte Carlo p-value and a
//! central region whose breach is equivalent to rejection.

use crate::field::GridSpec;
use crate::geometry::Window;
use crate::intensity::{fixed_kernel_intensity, scott_global_bandwidth};
use crate::nullmodels::{
    permute_labels, shift_restrict, simulate_poisson, simulate_thomas, NullModelError, NullSpec,
    PoissonIntensity,
};
use crate::pattern::{restrict, MultitypePattern, PatternError, Selector};
use crate::rng;
use crate::secondorder::{
    fest, gcross, j_from_parts, jfun, kcross_inhom, l_transform, pcf_cross, EdgeCorrection,
    IntensitySource, Mode, PairCountIndex, SecondOrderError, SummaryFunction, Target,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EnvelopeError {
    #[error("curves do not share a common grid")]
    GridMismatch,
    #[error("ensemble needs at least one simulated curve")]
    NoSimulations,
    #[error("{got} simulations cannot resolve level {alpha} (need at least {min})")]
    TooFewSimulations { got: usize, min: usize, alpha: f64 },
    #[error("no grid distance is defined across every curve")]
    EmptyGrid,
    #[error("null model is incompatible with the statistic: {0}")]
    IncompatibleNull(String),
    #[error(transparent)]
    Stat(#[from] SecondOrderError),
    #[error(transparent)]
    Null(#[from] NullModelError),
    #[error(transparent)]
    Pattern(#[from] PatternError),
    #[error(transparent)]
    Intensity(#[from] crate::intensity::IntensityError),
    #[error(transparent)]
    Geometry(#[from] crate::geometry::GeometryError),
}

/// Observed curve plus simulated curves on one distance grid.
#[derive(Debug, Clone)]
pub struct CurveSet {
    pub r: Vec<f64>,
    /// `curves[0]` is the observed curve.
    pub curves: Vec<Vec<f64>>,
    pub name: String,
}

impl CurveSet {
    pub fn new(r: Vec<f64>, curves: Vec<Vec<f64>>, name: impl Into<String>) -> Result<Self, EnvelopeError> {
        if curves.len() < 2 {
            return Err(EnvelopeError::NoSimulations);
        }
        if curves.iter().any(|c| c.len() != r.len()) {
            return Err(EnvelopeError::GridMismatch);
        }
        Ok(CurveSet {
            r,
            curves,
            name: name.into(),
        })
    }

    fn n_sim(&self) -> usize {
        self.curves.len() - 1
    }

    /// Grid columns at which every curve is defined.
    fn kept_columns(&self) -> Vec<usize> {
        (0..self.r.len())
            .filter(|&q| self.curves.iter().all(|c| c[q].is_finite()))
            .collect()
    }
}

/// Which tail counts as extreme.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    TwoSided,
    Upper,
    Lower,
}

/// Extreme-rank-length measure of every curve: the fraction of curves that
/// are strictly more extreme in the lexicographic ordering of sorted
/// pointwise rank vectors (small = extreme).
pub fn erl_measure(curves: &CurveSet, side: Side) -> Result<Vec<f64>, EnvelopeError> {
    let cols = curves.kept_columns();
    if cols.is_empty() {
        return Err(EnvelopeError::EmptyGrid);
    }
    let n = curves.curves.len();
    // Pointwise competition ranks per kept column.
    let mut ranks: Vec<Vec<u32>> = vec![Vec::with_capacity(cols.len()); n];
    let mut sorted: Vec<f64> = Vec::with_capacity(n);
    for &q in &cols {
        sorted.clear();
        sorted.extend(curves.curves.iter().map(|c| c[q]));
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for (i, c) in curves.curves.iter().enumerate() {
            let v = c[q];
            let below = sorted.partition_point(|&x| x < v) as u32;
            let above = (n - sorted.partition_point(|&x| x <= v)) as u32;
            let rank = match side {
                Side::Upper => above + 1,
                Side::Lower => below + 1,
                Side::TwoSided => (above + 1).min(below + 1),
            };
            ranks[i].push(rank);
        }
    }
    for r in ranks.iter_mut() {
        r.sort_unstable();
    }
    // Strict lexicographic dominance count; ties contribute to neither side.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| ranks[a].cmp(&ranks[b]));
    let mut e = vec![0.0; n];
    let mut processed = 0usize;
    let mut g0 = 0usize;
    while g0 < n {
        let mut g1 = g0;
        while g1 < n && ranks[order[g1]] == ranks[order[g0]] {
            g1 += 1;
        }
        for &i in &order[g0..g1] {
            e[i] = processed as f64 / n as f64;
        }
        processed += g1 - g0;
        g0 = g1;
    }
    Ok(e)
}

/// Result of a global envelope test.
#[derive(Debug, Clone, Serialize)]
pub struct EnvelopeResult {
    pub p_value: f64,
    /// ERL measure per curve (index 0 = observed).
    pub erl: Vec<f64>,
    pub r: Vec<f64>,
    pub observed: Vec<f64>,
    /// Central-region bounds (NaN at grid points dropped from ranking).
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub alpha: f64,
    pub side: Side,
    pub rejected: bool,
    /// Distances at which the observed curve leaves the central region.
    pub exit_distances: Vec<f64>,
}

/// ERL global envelope test at level `alpha`.
///
/// `p = #{i : E_i <= E_0} / (s+1)`; the central region is the pointwise
/// min/max of the `ceil((1-alpha)(s+1))` least extreme curves, so `p <=
/// alpha` coincides with the observed curve exiting the region.
pub fn global_envelope_test(
    curves: &CurveSet,
    alpha: f64,
    side: Side,
) -> Result<EnvelopeResult, EnvelopeError> {
    let s = curves.n_sim();
    let min_s = (1.0 / alpha - 1.0).ceil() as usize;
    if 1.0 / (s as f64 + 1.0) > alpha {
        return Err(EnvelopeError::TooFewSimulations {
            got: s,
            min: min_s,
            alpha,
        });
    }
    let e = erl_measure(curves, side)?;
    let p_value = e.iter().filter(|&&ei| ei <= e[0]).count() as f64 / (s + 1) as f64;

    let k_alpha = ((1.0 - alpha) * (s + 1) as f64).ceil() as usize;
    let mut by_depth: Vec<usize> = (0..=s).collect();
    by_depth.sort_by(|&a, &b| e[b].partial_cmp(&e[a]).unwrap().then(a.cmp(&b)));
    let region: Vec<usize> = by_depth.into_iter().take(k_alpha.max(1)).collect();

    let d = curves.r.len();
    let mut lower = vec![f64::NAN; d];
    let mut upper = vec![f64::NAN; d];
    for q in curves.kept_columns() {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &i in &region {
            let v = curves.curves[i][q];
            lo = lo.min(v);
            hi = hi.max(v);
        }
        lower[q] = lo;
        upper[q] = hi;
    }
    let observed = curves.curves[0].clone();
    let exit_distances: Vec<f64> = curves
        .kept_columns()
        .into_iter()
        .filter(|&q| observed[q] > upper[q] || observed[q] < lower[q])
        .map(|q| curves.r[q])
        .collect();
    Ok(EnvelopeResult {
        p_value,
        erl: e,
        r: curves.r.clone(),
        observed,
        lower,
        upper,
        alpha,
        side,
        rejected: p_value <= alpha,
        exit_distances,
    })
}

// ---------------------------------------------------------------------------
// Statistic + null-model driver
// ---------------------------------------------------------------------------

/// Functional statistics the envelope driver can compute.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StatName {
    Kcross,
    Lcentred,
    Pcf,
    Gcross,
    Fest,
    J,
    /// `J_{i\u{2022}}(r) - J(r)` of the unmarked pattern.
    JdotCentred,
}

/// Caller-supplied intensity surfaces for the two statistic sides. Under a
/// shift null the focal surface is translated along with the points.
#[derive(Debug, Clone)]
pub struct SuppliedIntensity {
    pub i: crate::field::ScalarField,
    pub j: crate::field::ScalarField,
}

/// Statistic configuration for envelope runs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StatisticConfig {
    pub stat: StatName,
    /// Focal type; `None` treats the pattern as unmarked.
    pub i: Option<String>,
    /// Target type; `None` means "any type" (dot statistics).
    pub j: Option<String>,
    pub mode: Mode,
    /// Constant (per-component count over area) versus adaptive intensity
    /// plug-in for the inhomogeneous estimators.
    pub constant_intensity: bool,
    /// Explicit intensity surfaces; they take precedence over the
    /// constant/adaptive choice (runtime-only, not serialised).
    #[serde(skip)]
    pub supplied: Option<SuppliedIntensity>,
    pub r: Vec<f64>,
    /// Query grid for the empty-space side.
    pub query: GridSpec,
    /// Grid used when intensities have to be estimated.
    pub intensity_grid: GridSpec,
}

impl StatisticConfig {
    pub fn new(stat: StatName, r: Vec<f64>) -> Self {
        StatisticConfig {
            stat,
            i: None,
            j: None,
            mode: Mode::Homogeneous,
            constant_intensity: true,
            supplied: None,
            r,
            query: GridSpec::square(48),
            intensity_grid: GridSpec::default(),
        }
    }

    pub fn with_pair(mut self, i: impl Into<String>, j: impl Into<String>) -> Self {
        self.i = Some(i.into());
        self.j = Some(j.into());
        self
    }

    pub fn with_focal(mut self, i: impl Into<String>) -> Self {
        self.i = Some(i.into());
        self
    }

    fn label(&self) -> String {
        let i = self.i.as_deref().unwrap_or("all");
        let j = self.j.as_deref().unwrap_or("\u{2022}");
        format!("{:?}_{{{},{}}}", self.stat, i, j)
    }

    /// Evaluates the statistic curve on a pattern (general path).
    pub fn evaluate(&self, pattern: &MultitypePattern) -> Result<Vec<f64>, EnvelopeError> {
        let work;
        let pat = if self.i.is_none() {
            work = restrict(pattern, Selector::Unmarked)?;
            &work
        } else {
            pattern
        };
        let i_level = self.i.clone().unwrap_or_else(|| "all".to_string());
        let j_target = match &self.j {
            Some(t) => Target::Level(t),
            None => Target::Any,
        };
        let intensity = match &self.supplied {
            Some(fields) => IntensitySource::Supplied {
                i: &fields.i,
                j: &fields.j,
            },
            None if self.constant_intensity => IntensitySource::Homogeneous,
            None => IntensitySource::Adaptive {
                global_bandwidth: None,
                grid: self.intensity_grid,
            },
        };
        let curve = match self.stat {
            StatName::Kcross => {
                kcross_inhom(pat, &i_level, j_target, &self.r, &intensity, EdgeCorrection::Translation)?
                    .values
            }
            StatName::Lcentred => {
                let k = kcross_inhom(
                    pat,
                    &i_level,
                    j_target,
                    &self.r,
                    &intensity,
                    EdgeCorrection::Translation,
                )?;
                l_transform(&k, true)?.values
            }
            StatName::Pcf => {
                pcf_cross(pat, &i_level, j_target, &self.r, &intensity, None)?.values
            }
            StatName::Gcross => {
                gcross(pat, &i_level, j_target, &self.r, self.mode, &intensity)?.values
            }
            StatName::Fest => {
                fest(pat, j_target, &self.r, self.query, self.mode, &intensity)?.values
            }
            StatName::J => {
                jfun(pat, &i_level, j_target, &self.r, self.query, self.mode, &intensity)?.values
            }
            StatName::JdotCentred => {
                let j_dot = jfun(pat, &i_level, Target::Any, &self.r, self.query, self.mode, &intensity)?;
                let unmarked = restrict(pat, Selector::Unmarked)?;
                let j_all = jfun(
                    &unmarked,
                    "all",
                    Target::Any,
                    &self.r,
                    self.query,
                    self.mode,
                    &intensity,
                )?;
                difference(&j_dot, &j_all)
            }
        };
        Ok(curve)
    }
}

fn difference(a: &SummaryFunction, b: &SummaryFunction) -> Vec<f64> {
    a.values
        .iter()
        .zip(b.values.iter())
        .map(|(&x, &y)| x - y)
        .collect()
}

/// An envelope test outcome together with the ingredients needed to
/// reproduce it.
#[derive(Debug, Clone, Serialize)]
pub struct EnvelopeRun {
    pub statistic: String,
    pub null: NullSpec,
    pub nsim: usize,
    pub seed: u64,
    pub result: EnvelopeResult,
}

/// Computes the observed statistic, simulates `nsim` replicates from the
/// null model, and runs the ERL global envelope test.
pub fn envelope_from_generator(
    pattern: &MultitypePattern,
    config: &StatisticConfig,
    null: &NullSpec,
    nsim: usize,
    seed: u64,
    alpha: f64,
    side: Side,
) -> Result<EnvelopeRun, EnvelopeError> {
    let min_s = (1.0 / alpha - 1.0).ceil() as usize;
    if 1.0 / (nsim as f64 + 1.0) > alpha {
        return Err(EnvelopeError::TooFewSimulations {
            got: nsim,
            min: min_s,
            alpha,
        });
    }
    validate_null(pattern, config, null)?;

    let curves: Vec<Vec<f64>> = match null {
        NullSpec::RandomLabel => random_label_curves(pattern, config, nsim, seed)?,
        NullSpec::RandomShift {
            moving_type,
            max_radius,
        } => random_shift_curves(pattern, config, moving_type, *max_radius, nsim, seed)?,
        NullSpec::Csr => {
            let observed = config.evaluate(pattern)?;
            let window = pattern.window().clone();
            let per_type: Vec<(String, f64)> = pattern
                .type_names()
                .iter()
                .cloned()
                .zip(
                    pattern
                        .type_counts()
                        .iter()
                        .map(|&c| c as f64 / window.area()),
                )
                .collect();
            let sims = simulate_curves(nsim, seed, config, |rng| {
                let mut points = Vec::new();
                let mut labels = Vec::new();
                for (t, (_, lambda)) in per_type.iter().enumerate() {
                    let pts = simulate_poisson(&window, &PoissonIntensity::Constant(*lambda), rng)?;
                    labels.extend(std::iter::repeat_n(t as u32, pts.len()));
                    points.extend(pts);
                }
                Ok(MultitypePattern::new(
                    "sim",
                    points,
                    pattern.type_names().to_vec(),
                    labels,
                    window.clone(),
                )?)
            })?;
            prepend(observed, sims)
        }
        NullSpec::InhomPoisson { bandwidth } => {
            let observed = config.evaluate(pattern)?;
            let window = pattern.window().clone();
            let mut fields = Vec::new();
            for t in 0..pattern.type_names().len() {
                let idx = pattern.indices_of_type(t as u32);
                let pts: Vec<_> = idx.iter().map(|&k| pattern.points()[k]).collect();
                if pts.is_empty() {
                    fields.push(None);
                    continue;
                }
                let eps = match bandwidth {
                    Some(e) => *e,
                    None => scott_global_bandwidth(&pts)?,
                };
                fields.push(Some(fixed_kernel_intensity(
                    &pts,
                    &window,
                    eps,
                    config.intensity_grid,
                )?));
            }
            let sims = simulate_curves(nsim, seed, config, |rng| {
                let mut points = Vec::new();
                let mut labels = Vec::new();
                for (t, field) in fields.iter().enumerate() {
                    if let Some(f) = field {
                        let pts = simulate_poisson(&window, &PoissonIntensity::Field(f), rng)?;
                        labels.extend(std::iter::repeat_n(t as u32, pts.len()));
                        points.extend(pts);
                    }
                }
                Ok(MultitypePattern::new(
                    "sim",
                    points,
                    pattern.type_names().to_vec(),
                    labels,
                    window.clone(),
                )?)
            })?;
            prepend(observed, sims)
        }
        NullSpec::Thomas { kappa, mu, sigma } => {
            let observed = config.evaluate(pattern)?;
            let window = pattern.window().clone();
            let (kappa, mu, sigma) = (*kappa, *mu, *sigma);
            let sims = simulate_curves(nsim, seed, config, |rng| {
                let pts = simulate_thomas(&window, kappa, mu, sigma, rng)?;
                Ok(MultitypePattern::new(
                    "sim",
                    pts.clone(),
                    vec!["all".into()],
                    vec![0; pts.len()],
                    window.clone(),
                )?)
            })?;
            prepend(observed, sims)
        }
    };

    let set = CurveSet::new(config.r.clone(), curves, config.label())?;
    let result = global_envelope_test(&set, alpha, side)?;
    Ok(EnvelopeRun {
        statistic: config.label(),
        null: null.clone(),
        nsim,
        seed,
        result,
    })
}

fn prepend(observed: Vec<f64>, sims: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    let mut curves = Vec::with_capacity(sims.len() + 1);
    curves.push(observed);
    curves.extend(sims);
    curves
}

fn simulate_curves(
    nsim: usize,
    seed: u64,
    config: &StatisticConfig,
    make: impl Fn(&mut rng::Rng) -> Result<MultitypePattern, EnvelopeError> + Sync,
) -> Result<Vec<Vec<f64>>, EnvelopeError> {
    (0..nsim)
        .into_par_iter()
        .map(|k| {
            let mut rng = rng::replicate(seed, k as u64);
            let sim = make(&mut rng)?;
            config.evaluate(&sim)
        })
        .collect()
}

fn validate_null(
    pattern: &MultitypePattern,
    config: &StatisticConfig,
    null: &NullSpec,
) -> Result<(), EnvelopeError> {
    match null {
        NullSpec::RandomLabel => {
            if pattern.type_names().len() < 2 {
                return Err(EnvelopeError::IncompatibleNull(
                    "random labelling needs at least two types".into(),
                ));
            }
        }
        NullSpec::RandomShift { moving_type, .. } => {
            if pattern.type_index(moving_type).is_none() {
                return Err(EnvelopeError::IncompatibleNull(format!(
                    "moving type '{moving_type}' is not a level of the pattern"
                )));
            }
            if config.i.is_none() {
                return Err(EnvelopeError::IncompatibleNull(
                    "random shifts need a typed statistic".into(),
                ));
            }
        }
        _ => {}
    }
    Ok(())
}

// --- random labelling, with cached location geometry -----------------------

/// Distances that do not change under label permutation: each point's
/// nearest-neighbour distance to any other point, its boundary distance,
/// and the empty-space / unmarked curves.
struct LabelInvariants {
    nn_any: Vec<f64>,
    border: Vec<f64>,
    f_all: Option<SummaryFunction>,
    j_all_values: Option<Vec<f64>>,
}

fn random_label_curves(
    pattern: &MultitypePattern,
    config: &StatisticConfig,
    nsim: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>, EnvelopeError> {
    // Fast path: homogeneous dot-J statistic. Everything except the focal
    // subset is label-invariant, so each permutation only reassembles a
    // product-limit curve over cached distances.
    let fast = config.stat == StatName::JdotCentred
        && config.mode == Mode::Homogeneous
        && config.i.is_some();
    if !fast {
        let observed = config.evaluate(pattern)?;
        let sims = simulate_curves(nsim, seed, config, |rng| Ok(permute_labels(pattern, rng)?))?;
        return Ok(prepend(observed, sims));
    }

    let i_level = config.i.clone().unwrap();
    let i_idx = pattern
        .type_index(&i_level)
        .ok_or_else(|| EnvelopeError::IncompatibleNull(format!("unknown type '{i_level}'")))?;
    let inv = label_invariants(pattern, config)?;
    let f_all = inv.f_all.as_ref().unwrap();
    let j_all = inv.j_all_values.as_ref().unwrap();

    let curve_for = |labels: &[u32]| -> Vec<f64> {
        let obs: Vec<(f64, bool)> = labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == i_idx)
            .map(|(k, _)| {
                let (d, b) = (inv.nn_any[k], inv.border[k]);
                if d <= b {
                    (d, true)
                } else {
                    (b, false)
                }
            })
            .collect();
        let g = km_cdf_sorted(obs, &config.r);
        config
            .r
            .iter()
            .enumerate()
            .map(|(q, _)| {
                let fv = f_all.values[q];
                if fv >= 1.0 - 1e-9 || j_all[q].is_nan() {
                    f64::NAN
                } else {
                    (1.0 - g[q]) / (1.0 - fv) - j_all[q]
                }
            })
            .collect()
    };

    let observed = curve_for(pattern.type_labels());
    let sims: Vec<Vec<f64>> = (0..nsim)
        .into_par_iter()
        .map(|k| {
            let mut rng = rng::replicate(seed, k as u64);
            let mut labels = pattern.type_labels().to_vec();
            use rand::seq::SliceRandom;
            labels.shuffle(&mut rng);
            curve_for(&labels)
        })
        .collect();
    Ok(prepend(observed, sims))
}

fn label_invariants(
    pattern: &MultitypePattern,
    config: &StatisticConfig,
) -> Result<LabelInvariants, EnvelopeError> {
    let tree = PairCountIndex::build(pattern.points());
    let window = pattern.window();
    let nn_any: Vec<f64> = (0..pattern.n())
        .into_par_iter()
        .map(|k| {
            tree.nearest_excluding(pattern.points()[k], Some(k))
                .map(|(_, d)| d)
                .unwrap_or(f64::INFINITY)
        })
        .collect();
    let border: Vec<f64> = pattern
        .points()
        .par_iter()
        .map(|&p| window.boundary_distance(p))
        .collect();
    let unmarked = restrict(pattern, Selector::Unmarked)?;
    let intensity = IntensitySource::Homogeneous;
    let f_all = fest(
        &unmarked,
        Target::Any,
        &config.r,
        config.query,
        Mode::Homogeneous,
        &intensity,
    )?;
    let g_all = gcross(
        &unmarked,
        "all",
        Target::Any,
        &config.r,
        Mode::Homogeneous,
        &intensity,
    )?;
    let j_all = j_from_parts(&g_all, &f_all, "all", Target::Any);
    Ok(LabelInvariants {
        nn_any,
        border,
        f_all: Some(f_all),
        j_all_values: Some(j_all.values),
    })
}

/// Product-limit CDF from (time, is_event) observations.
fn km_cdf_sorted(mut obs: Vec<(f64, bool)>, r_grid: &[f64]) -> Vec<f64> {
    obs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(b.1.cmp(&a.1)));
    let n = obs.len();
    let mut out = Vec::with_capacity(r_grid.len());
    let mut at_risk = n as f64;
    let mut surv = 1.0;
    let mut k = 0usize;
    for &r in r_grid {
        while k < n && obs[k].0 <= r {
            if obs[k].1 {
                surv *= 1.0 - 1.0 / at_risk;
            }
            at_risk -= 1.0;
            k += 1;
        }
        out.push(1.0 - surv);
    }
    out
}

// --- random shifts, with cached target-side geometry ------------------------

fn random_shift_curves(
    pattern: &MultitypePattern,
    config: &StatisticConfig,
    moving_type: &str,
    max_radius: f64,
    nsim: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>, EnvelopeError> {
    let eroded = pattern.window().erode(max_radius)?;
    let restricted = restrict(pattern, Selector::SubWindow(&eroded))?;

    // With supplied intensity surfaces the shift applies to the focal
    // surface too: restrict the target side once, translate the moving
    // side with every draw.
    if let Some(fields) = &config.supplied {
        let grid_i = GridSpec { nx: fields.i.nx(), ny: fields.i.ny() };
        let grid_j = GridSpec { nx: fields.j.nx(), ny: fields.j.ny() };
        let j_eroded = fields.j.translate_resample(0.0, 0.0, &eroded, grid_j);
        let mut obs_config = config.clone();
        obs_config.supplied = Some(SuppliedIntensity {
            i: fields.i.translate_resample(0.0, 0.0, &eroded, grid_i),
            j: j_eroded.clone(),
        });
        let observed = obs_config.evaluate(&restricted)?;
        let d = config.r.len();
        let sims: Vec<Vec<f64>> = (0..nsim)
            .into_par_iter()
            .map(|k| {
                let mut rng = rng::replicate(seed, k as u64);
                let v = draw_disc(max_radius, &mut rng);
                let sim = match shift_restrict(pattern, moving_type, v, &eroded, None) {
                    Ok(s) => s.pattern,
                    Err(NullModelError::EmptyAfterRestriction) => return Ok(vec![f64::NAN; d]),
                    Err(e) => return Err(EnvelopeError::Null(e)),
                };
                let mut sim_config = config.clone();
                sim_config.supplied = Some(SuppliedIntensity {
                    i: fields.i.translate_resample(v.0, v.1, &eroded, grid_i),
                    j: j_eroded.clone(),
                });
                match sim_config.evaluate(&sim) {
                    Ok(curve) => Ok(curve),
                    Err(EnvelopeError::Stat(SecondOrderError::EmptyType(_))) => {
                        Ok(vec![f64::NAN; d])
                    }
                    Err(e) => Err(e),
                }
            })
            .collect::<Result<_, _>>()?;
        return Ok(prepend(observed, sims));
    }
    let observed = config.evaluate(&restricted)?;

    // Fast path: homogeneous cross-J with the focal type moving. The
    // non-moving side and its empty-space curve are shift-invariant.
    let fast = config.stat == StatName::J
        && config.mode == Mode::Homogeneous
        && config.i.as_deref() == Some(moving_type)
        && config.j.is_some()
        && config.j.as_deref() != Some(moving_type);
    if fast {
        let j_level = config.j.clone().unwrap();
        let j_t = restricted
            .type_index(&j_level)
            .ok_or_else(|| EnvelopeError::IncompatibleNull(format!("unknown type '{j_level}'")))?;
        let j_pts: Vec<_> = restricted
            .indices_of_type(j_t)
            .iter()
            .map(|&k| restricted.points()[k])
            .collect();
        if j_pts.is_empty() {
            return Err(EnvelopeError::Stat(SecondOrderError::EmptyType(j_level)));
        }
        let tree = PairCountIndex::build(&j_pts);
        let f_j = fest(
            &restricted,
            Target::Level(&j_level),
            &config.r,
            config.query,
            Mode::Homogeneous,
            &IntensitySource::Homogeneous,
        )?;
        let move_idx = pattern.type_index(moving_type).unwrap();
        let moving: Vec<_> = pattern
            .indices_of_type(move_idx)
            .iter()
            .map(|&k| pattern.points()[k])
            .collect();

        let curve_for = |v: (f64, f64)| -> Vec<f64> {
            let obs: Vec<(f64, bool)> = moving
                .iter()
                .filter_map(|p| {
                    let q = crate::geometry::Point2::new(p.x + v.0, p.y + v.1);
                    if !eroded.contains(q) {
                        return None;
                    }
                    let b = eroded.boundary_distance(q);
                    let d = tree
                        .nearest_excluding(q, None)
                        .map(|(_, d)| d)
                        .unwrap_or(f64::INFINITY);
                    Some(if d <= b { (d, true) } else { (b, false) })
                })
                .collect();
            if obs.is_empty() {
                return vec![f64::NAN; config.r.len()];
            }
            let g = km_cdf_sorted(obs, &config.r);
            config
                .r
                .iter()
                .enumerate()
                .map(|(q, _)| {
                    let fv = f_j.values[q];
                    if fv >= 1.0 - 1e-9 {
                        f64::NAN
                    } else {
                        (1.0 - g[q]) / (1.0 - fv)
                    }
                })
                .collect()
        };
        let sims: Vec<Vec<f64>> = (0..nsim)
            .into_par_iter()
            .map(|k| {
                let mut rng = rng::replicate(seed, k as u64);
                curve_for(draw_disc(max_radius, &mut rng))
            })
            .collect();
        return Ok(prepend(observed, sims));
    }

    // A shift can empty the moving type; mask that replicate instead of
    // aborting the run (the fast path above behaves the same way).
    let d = config.r.len();
    let sims: Vec<Vec<f64>> = (0..nsim)
        .into_par_iter()
        .map(|k| {
            let mut rng = rng::replicate(seed, k as u64);
            let v = draw_disc(max_radius, &mut rng);
            let sim = match shift_restrict(pattern, moving_type, v, &eroded, None) {
                Ok(s) => s.pattern,
                Err(NullModelError::EmptyAfterRestriction) => return Ok(vec![f64::NAN; d]),
                Err(e) => return Err(EnvelopeError::Null(e)),
            };
            match config.evaluate(&sim) {
                Ok(curve) => Ok(curve),
                Err(EnvelopeError::Stat(SecondOrderError::EmptyType(_))) => {
                    Ok(vec![f64::NAN; d])
                }
                Err(e) => Err(e),
            }
        })
        .collect::<Result<_, _>>()?;
    Ok(prepend(observed, sims))
}

fn draw_disc(max_radius: f64, rng: &mut rng::Rng) -> (f64, f64) {
    use rand::Rng as _;
    let u: f64 = rng.random();
    let theta: f64 = rng.random::<f64>() * 2.0 * std::f64::consts::PI;
    let r = max_radius * u.sqrt();
    (r * theta.cos(), r * theta.sin())
}

/// Restriction of a pattern to the erosion used by a shift null (exposed so
/// callers can evaluate the observed statistic on the same footing).
pub fn eroded_restriction(
    pattern: &MultitypePattern,
    max_radius: f64,
) -> Result<(MultitypePattern, Window), EnvelopeError> {
    let eroded = pattern.window().erode(max_radius)?;
    let restricted = restrict(pattern, Selector::SubWindow(&eroded))?;
    Ok((restricted, eroded))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn set(curves: Vec<Vec<f64>>) -> CurveSet {
        let d = curves[0].len();
        CurveSet::new((1..=d).map(|k| k as f64).collect(), curves, "t").unwrap()
    }

    #[test]
    fn erl_three_curve_worked_example() {
        let cs = set(vec![vec![5.0, 0.0], vec![3.0, 3.0], vec![1.0, 1.0]]);
        let e = erl_measure(&cs, Side::Upper).unwrap();
        assert_relative_eq!(e[0], 1.0 / 3.0, epsilon = 1e-12);
        assert_relative_eq!(e[1], 0.0, epsilon = 1e-12);
        assert_relative_eq!(e[2], 2.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn erl_identical_curves_all_zero() {
        let cs = set(vec![vec![1.0, 2.0]; 5]);
        let e = erl_measure(&cs, Side::TwoSided).unwrap();
        assert!(e.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn erl_single_simulation_dominance() {
        let cs = set(vec![vec![2.0, 2.0, 2.0], vec![1.0, 1.0, 1.0]]);
        let e = erl_measure(&cs, Side::Upper).unwrap();
        assert_relative_eq!(e[0], 0.0);
        assert_relative_eq!(e[1], 0.5);
    }

    #[test]
    fn erl_invariant_under_monotone_transforms_per_distance() {
        let base = vec![
            vec![0.3, 1.2, -0.5],
            vec![0.1, 0.9, 0.4],
            vec![0.8, -0.2, 0.0],
            vec![0.2, 0.4, 0.6],
        ];
        // a different strictly increasing map at every grid distance
        let maps: [fn(f64) -> f64; 3] = [
            |v| (3.0 * v).exp(),
            |v| v.powi(3) + 0.5 * v,
            |v| v.atan() * 10.0 - 2.0,
        ];
        let transformed: Vec<Vec<f64>> = base
            .iter()
            .map(|c| c.iter().enumerate().map(|(q, &v)| maps[q](v)).collect())
            .collect();
        let e1 = erl_measure(&set(base), Side::TwoSided).unwrap();
        let e2 = erl_measure(&set(transformed), Side::TwoSided).unwrap();
        assert_eq!(e1, e2);
    }

    #[test]
    fn p_value_invariant_under_simulation_order() {
        let mut curves = vec![vec![0.9, 0.1, 0.4]];
        for k in 0..24 {
            let x = (k as f64 * 0.37).sin();
            curves.push(vec![x, x * 0.5, -x]);
        }
        let p1 = global_envelope_test(&set(curves.clone()), 0.2, Side::TwoSided)
            .unwrap()
            .p_value;
        let obs = curves[0].clone();
        let mut sims = curves[1..].to_vec();
        sims.reverse();
        let mut reordered = vec![obs];
        reordered.extend(sims);
        let p2 = global_envelope_test(&set(reordered), 0.2, Side::TwoSided)
            .unwrap()
            .p_value;
        assert_eq!(p1, p2);
    }

    #[test]
    fn observed_most_extreme_gives_minimal_p() {
        let mut curves = vec![vec![10.0, 10.0]];
        for k in 0..99 {
            let x = (k as f64 * 0.11).sin();
            curves.push(vec![x, -x]);
        }
        let res = global_envelope_test(&set(curves), 0.05, Side::TwoSided).unwrap();
        assert_relative_eq!(res.p_value, 0.01, epsilon = 1e-12);
        assert!(res.rejected);
        assert!(!res.exit_distances.is_empty());
    }

    #[test]
    fn identical_observed_gives_p_one() {
        let curves = vec![vec![1.0, 2.0, 3.0]; 40];
        let res = global_envelope_test(&set(curves), 0.05, Side::TwoSided).unwrap();
        assert_eq!(res.p_value, 1.0);
        assert!(!res.rejected);
        assert!(res.exit_distances.is_empty());
    }

    #[test]
    fn too_few_simulations_rejected() {
        let curves = vec![vec![0.0], vec![1.0], vec![2.0]];
        assert!(matches!(
            global_envelope_test(&set(curves), 0.05, Side::TwoSided),
            Err(EnvelopeError::TooFewSimulations { .. })
        ));
    }

    #[test]
    fn rejection_iff_exit_on_continuous_ensembles() {
        let mut rng = crate::rng::master(23);
        use rand::Rng as _;
        for trial in 0..60 {
            let s = 39;
            let d = 6;
            let mut curves = Vec::with_capacity(s + 1);
            for _ in 0..=s {
                curves.push((0..d).map(|_| rng.random::<f64>()).collect::<Vec<_>>());
            }
            // occasionally plant an extreme observed curve
            if trial % 3 == 0 {
                for v in curves[0].iter_mut() {
                    *v += 1.5;
                }
            }
            let res = global_envelope_test(&set(curves), 0.05, Side::TwoSided).unwrap();
            assert_eq!(
                res.rejected,
                !res.exit_distances.is_empty(),
                "p = {}, exits = {:?}",
                res.p_value,
                res.exit_distances
            );
        }
    }

    #[test]
    fn masked_columns_are_dropped_consistently() {
        let curves = vec![
            vec![0.5, f64::NAN, 0.7],
            vec![0.1, 2.0, 0.2],
            vec![0.9, 3.0, 0.4],
            vec![0.2, 4.0, 0.9],
            vec![0.4, 5.0, 0.3],
        ];
        let res = global_envelope_test(&set(curves), 0.25, Side::TwoSided).unwrap();
        assert!(res.lower[1].is_nan() && res.upper[1].is_nan());
        assert!(res.lower[0].is_finite() && res.upper[2].is_finite());
    }
}
