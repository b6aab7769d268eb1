//! Monte Carlo null-model generators: Poisson simulation, label
//! permutation, random shifts on an eroded window, and a Thomas cluster
//! process used as a clustered oracle in power experiments.
//!
//! Every generator is a pure function of its parameters and the supplied
//! RNG; batches derive one stream per replicate (see [`crate::rng`]).

use crate::field::ScalarField;
use crate::geometry::{GeometryError, Point2, Window};
use crate::pattern::MultitypePattern;
use crate::rng::Rng;
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NullModelError {
    #[error("intensity must be non-negative")]
    NegativeIntensity,
    #[error("pattern has a single type; labels cannot be permuted")]
    SingleType,
    #[error("cluster parameters must be positive")]
    NonPositiveParameter,
    #[error("no points remain after restriction to the eroded window")]
    EmptyAfterRestriction,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Intensity argument for Poisson simulation.
pub enum PoissonIntensity<'a> {
    Constant(f64),
    Field(&'a ScalarField),
}

/// Null-model selection, as it appears in run configuration files.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "camelCase")]
pub enum NullSpec {
    /// Independent homogeneous Poisson per type at the observed counts.
    Csr,
    /// Independent inhomogeneous Poisson per type; intensities estimated
    /// from the data at a fixed bandwidth (Scott's rule when omitted).
    InhomPoisson { bandwidth: Option<f64> },
    /// Random permutation of the type labels over fixed locations.
    RandomLabel,
    /// Uniform-disc translation of one type, evaluated on the eroded window.
    RandomShift {
        moving_type: String,
        max_radius: f64,
    },
    /// Thomas cluster process (clustered oracle).
    Thomas { kappa: f64, mu: f64, sigma: f64 },
}

/// Homogeneous or inhomogeneous Poisson points on the window.
pub fn simulate_poisson(
    window: &Window,
    intensity: &PoissonIntensity<'_>,
    rng: &mut Rng,
) -> Result<Vec<Point2>, NullModelError> {
    match intensity {
        PoissonIntensity::Constant(lambda) => {
            if lambda.is_nan() || *lambda < 0.0 {
                return Err(NullModelError::NegativeIntensity);
            }
            let mean = lambda * window.area();
            let n = sample_poisson(mean, rng);
            Ok(uniform_in_window(window, n, rng))
        }
        PoissonIntensity::Field(field) => {
            let (lo, hi) = field.range().ok_or(NullModelError::NegativeIntensity)?;
            if lo < 0.0 {
                return Err(NullModelError::NegativeIntensity);
            }
            if hi == 0.0 {
                return Ok(Vec::new());
            }
            // Thin a dominating homogeneous process at the field maximum.
            let mean = hi * window.area();
            let n = sample_poisson(mean, rng);
            let candidates = uniform_in_window(window, n, rng);
            Ok(candidates
                .into_iter()
                .filter(|&p| {
                    let lambda = field.sample(p).unwrap_or(0.0).max(0.0);
                    rng.random::<f64>() < lambda / hi
                })
                .collect())
        }
    }
}

fn sample_poisson(mean: f64, rng: &mut Rng) -> usize {
    if mean <= 0.0 {
        return 0;
    }
    Poisson::new(mean).expect("positive mean").sample(rng) as usize
}

fn uniform_in_window(window: &Window, n: usize, rng: &mut Rng) -> Vec<Point2> {
    let bb = window.bbox();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let p = Point2::new(
            bb.x0 + bb.width() * rng.random::<f64>(),
            bb.y0 + bb.height() * rng.random::<f64>(),
        );
        if window.contains(p) {
            out.push(p);
        }
    }
    out
}

/// Uniformly permutes the type labels over the points; locations, tissue
/// labels and marks stay glued to their points, and per-type counts are
/// preserved.
pub fn permute_labels(
    pattern: &MultitypePattern,
    rng: &mut Rng,
) -> Result<MultitypePattern, NullModelError> {
    if pattern.type_names().len() < 2 {
        return Err(NullModelError::SingleType);
    }
    let mut labels = pattern.type_labels().to_vec();
    labels.shuffle(rng);
    Ok(pattern.with_labels(labels))
}

/// Output of a random shift: the restricted pattern on the eroded window
/// and the translated intensity field of the moving type, when supplied.
pub struct ShiftedPattern {
    pub pattern: MultitypePattern,
    pub shift: (f64, f64),
    pub shifted_field: Option<ScalarField>,
}

/// Draws a shift vector uniformly on the disc of radius `max_radius`,
/// translates the points of `moving_type` by it, and restricts every type
/// to the eroded window `W_c = erode(W, max_radius)`.
pub fn random_shift(
    pattern: &MultitypePattern,
    moving_type: &str,
    max_radius: f64,
    rng: &mut Rng,
    moving_field: Option<&ScalarField>,
) -> Result<ShiftedPattern, NullModelError> {
    let eroded = pattern.window().erode(max_radius)?;
    let u: f64 = rng.random();
    let theta: f64 = rng.random::<f64>() * 2.0 * PI;
    let radius = max_radius * u.sqrt();
    let v = (radius * theta.cos(), radius * theta.sin());
    shift_restrict(pattern, moving_type, v, &eroded, moving_field)
}

/// Deterministic core of [`random_shift`]: applies a given shift vector and
/// restriction window (the envelope driver erodes once and reuses it).
pub fn shift_restrict(
    pattern: &MultitypePattern,
    moving_type: &str,
    v: (f64, f64),
    eroded: &Window,
    moving_field: Option<&ScalarField>,
) -> Result<ShiftedPattern, NullModelError> {
    let move_idx = pattern
        .type_index(moving_type)
        .ok_or(NullModelError::EmptyAfterRestriction)?;
    let mut points = Vec::new();
    let mut labels = Vec::new();
    for (k, &p) in pattern.points().iter().enumerate() {
        let label = pattern.type_labels()[k];
        let q = if label == move_idx {
            Point2::new(p.x + v.0, p.y + v.1)
        } else {
            p
        };
        if eroded.contains(q) {
            points.push(q);
            labels.push(label);
        }
    }
    if points.is_empty() {
        return Err(NullModelError::EmptyAfterRestriction);
    }
    let pattern_out = MultitypePattern::new(
        pattern.patient_id(),
        points,
        pattern.type_names().to_vec(),
        labels,
        eroded.clone(),
    )
    .map_err(|_| NullModelError::EmptyAfterRestriction)?;
    let shifted_field = moving_field.map(|f| {
        let grid = crate::field::GridSpec {
            nx: f.nx(),
            ny: f.ny(),
        };
        f.translate_resample(v.0, v.1, eroded, grid)
    });
    Ok(ShiftedPattern {
        pattern: pattern_out,
        shift: v,
        shifted_field,
    })
}

/// Thomas cluster process: Poisson parents on the bounding box dilated by
/// four cluster scales, Poisson(mu) offspring per parent with isotropic
/// Gaussian displacements, offspring clipped to the window.
pub fn simulate_thomas(
    window: &Window,
    kappa: f64,
    mu: f64,
    sigma: f64,
    rng: &mut Rng,
) -> Result<Vec<Point2>, NullModelError> {
    if !(kappa > 0.0 && mu > 0.0 && sigma > 0.0) {
        return Err(NullModelError::NonPositiveParameter);
    }
    let bb = window.bbox();
    let pad = 4.0 * sigma;
    let (x0, y0) = (bb.x0 - pad, bb.y0 - pad);
    let (w, h) = (bb.width() + 2.0 * pad, bb.height() + 2.0 * pad);
    let n_parents = sample_poisson(kappa * w * h, rng);
    let normal = Normal::new(0.0, sigma).expect("positive sigma");
    let mut out = Vec::new();
    for _ in 0..n_parents {
        let parent = Point2::new(x0 + w * rng.random::<f64>(), y0 + h * rng.random::<f64>());
        let n_off = sample_poisson(mu, rng);
        for _ in 0..n_off {
            let p = Point2::new(parent.x + normal.sample(rng), parent.y + normal.sample(rng));
            if window.contains(p) {
                out.push(p);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn unit_window() -> Window {
        Window::rectangle(0.0, 0.0, 1.0, 1.0).unwrap()
    }

    #[test]
    fn zero_intensity_gives_empty_pattern() {
        let mut r = rng::master(1);
        let pts = simulate_poisson(&unit_window(), &PoissonIntensity::Constant(0.0), &mut r)
            .unwrap();
        assert!(pts.is_empty());
    }

    #[test]
    fn poisson_mean_count_matches() {
        let w = unit_window();
        let mut total = 0usize;
        let sims = 1000;
        for k in 0..sims {
            let mut r = rng::replicate(42, k);
            total += simulate_poisson(&w, &PoissonIntensity::Constant(100.0), &mut r)
                .unwrap()
                .len();
        }
        let mean = total as f64 / sims as f64;
        // s.e. = sqrt(100/1000) ~ 0.32; allow 3 s.e.
        assert!((mean - 100.0).abs() < 1.0, "mean {mean}");
    }

    #[test]
    fn field_intensity_respects_support() {
        let w = unit_window();
        let field = ScalarField::from_fn(&w, crate::field::GridSpec::square(64), |p| {
            if p.x > 0.5 {
                2.0
            } else {
                0.0
            }
        });
        let mut r = rng::master(7);
        let pts =
            simulate_poisson(&w, &PoissonIntensity::Field(&field), &mut r).unwrap();
        assert!(!pts.is_empty());
        // Bilinear sampling blurs the step by one cell; stay clear of it.
        let cell = 1.0 / 64.0;
        assert!(pts.iter().all(|p| p.x > 0.5 - cell));
    }

    #[test]
    fn negative_intensity_rejected() {
        let mut r = rng::master(1);
        assert!(matches!(
            simulate_poisson(&unit_window(), &PoissonIntensity::Constant(-1.0), &mut r),
            Err(NullModelError::NegativeIntensity)
        ));
    }

    fn four_type_pattern() -> MultitypePattern {
        let mut pts = Vec::new();
        let mut labels = Vec::new();
        for i in 0..32 {
            pts.push(Point2::new(
                0.05 + 0.9 * ((i * 37) % 32) as f64 / 32.0,
                0.05 + 0.9 * ((i * 17) % 32) as f64 / 32.0,
            ));
            labels.push((i % 4) as u32);
        }
        MultitypePattern::new(
            "p",
            pts,
            vec!["a".into(), "b".into(), "c".into(), "d".into()],
            labels,
            unit_window(),
        )
        .unwrap()
    }

    #[test]
    fn permutation_preserves_counts_and_locations() {
        let p = four_type_pattern();
        let mut r = rng::master(3);
        let q = permute_labels(&p, &mut r).unwrap();
        assert_eq!(p.type_counts(), q.type_counts());
        assert_eq!(p.points(), q.points());
    }

    #[test]
    fn permutation_is_uniform_on_two_points() {
        let p = MultitypePattern::new(
            "p",
            vec![Point2::new(0.2, 0.2), Point2::new(0.8, 0.8)],
            vec!["a".into(), "b".into()],
            vec![0, 1],
            unit_window(),
        )
        .unwrap();
        let mut swapped = 0usize;
        let total = 10_000;
        for k in 0..total {
            let mut r = rng::replicate(9, k);
            let q = permute_labels(&p, &mut r).unwrap();
            if q.type_labels()[0] == 1 {
                swapped += 1;
            }
        }
        let freq = swapped as f64 / total as f64;
        assert!((freq - 0.5).abs() < 0.02, "swap frequency {freq}");
    }

    #[test]
    fn single_type_cannot_be_permuted() {
        let p = MultitypePattern::new(
            "p",
            vec![Point2::new(0.5, 0.5)],
            vec!["only".into()],
            vec![0],
            unit_window(),
        )
        .unwrap();
        let mut r = rng::master(1);
        assert!(matches!(
            permute_labels(&p, &mut r),
            Err(NullModelError::SingleType)
        ));
    }

    #[test]
    fn zero_shift_equals_plain_restriction() {
        let p = four_type_pattern();
        let eroded = p.window().erode(0.1).unwrap();
        let out = shift_restrict(&p, "a", (0.0, 0.0), &eroded, None).unwrap();
        let expected = crate::pattern::restrict(&p, crate::pattern::Selector::SubWindow(&eroded))
            .unwrap();
        assert_eq!(out.pattern.n(), expected.n());
        assert_eq!(out.pattern.points(), expected.points());
        assert!((out.pattern.window().area() - 0.64).abs() < 1e-12);
    }

    #[test]
    fn shifted_points_land_in_eroded_window() {
        let p = four_type_pattern();
        for k in 0..20 {
            let mut r = rng::replicate(11, k);
            let out = random_shift(&p, "b", 0.1, &mut r, None).unwrap();
            assert!((out.shift.0.powi(2) + out.shift.1.powi(2)).sqrt() <= 0.1 + 1e-12);
            for q in out.pattern.points() {
                assert!(out.pattern.window().contains(*q));
            }
        }
    }

    #[test]
    fn thomas_count_and_smallness() {
        let w = unit_window();
        let mut r = rng::master(13);
        let tiny = simulate_thomas(&w, 10.0, 1e-9, 0.02, &mut r).unwrap();
        assert!(tiny.len() < 3);
        let mut total = 0usize;
        let sims = 500;
        for k in 0..sims {
            let mut r = rng::replicate(14, k);
            total += simulate_thomas(&w, 10.0, 10.0, 0.02, &mut r).unwrap().len();
        }
        let mean = total as f64 / sims as f64;
        assert!((mean - 100.0).abs() < 10.0, "mean {mean}");
        let mut r2 = rng::master(15);
        for p in simulate_thomas(&w, 10.0, 10.0, 0.02, &mut r2).unwrap() {
            assert!(w.contains(p));
        }
    }

    #[test]
    fn generators_are_seed_deterministic() {
        let w = unit_window();
        let gen = |seed| {
            let mut r = rng::replicate(seed, 5);
            simulate_poisson(&w, &PoissonIntensity::Constant(50.0), &mut r).unwrap()
        };
        assert_eq!(gen(77), gen(77));
        assert_ne!(gen(77), gen(78));
    }
}
