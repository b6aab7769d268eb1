//! Cross-sample functional inference: per-sample descriptor curves grouped
//! by clinical covariates, a Levene-style permutation test for equality of
//! curve variances, and a permutation one-way functional ANOVA, both judged
//! with the extreme-rank-length envelope machinery.

use crate::envelopes::{global_envelope_test, CurveSet, EnvelopeError, EnvelopeResult, Side, StatisticConfig};
use crate::pattern::{MultitypePattern, PatientRecord};
use crate::rng;
use crate::secondorder::uniform_r_grid;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GroupStatsError {
    #[error("need at least two samples with a common distance range")]
    NoCommonRange,
    #[error("no group label available for patient '{0}'")]
    MissingGroupLabel(String),
    #[error("group '{group}' has {got} curves (need at least {need})")]
    TooFewCurves {
        group: String,
        got: usize,
        need: usize,
    },
    #[error("need at least two groups")]
    TooFewGroups,
    #[error(transparent)]
    Envelope(#[from] EnvelopeError),
}

/// Clinical grouping variable for cross-sample tests.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupField {
    Stage,
    PriorChemo,
    Death,
    Brca,
    Parpi,
    PrimaryTumour,
}

impl GroupField {
    pub fn label_of(&self, rec: &PatientRecord) -> Option<String> {
        let yes_no = |b: bool| if b { "yes" } else { "no" }.to_string();
        match self {
            GroupField::Stage => rec.stage.map(|s| s.name().to_string()),
            GroupField::PriorChemo => Some(yes_no(rec.prior_chemo)),
            GroupField::Death => Some(yes_no(rec.death)),
            GroupField::Brca => Some(yes_no(rec.brca)),
            GroupField::Parpi => Some(yes_no(rec.parpi)),
            GroupField::PrimaryTumour => Some(yes_no(rec.primary_tumour)),
        }
    }
}

/// One descriptor curve per sample on a shared grid, with group labels.
#[derive(Debug, Clone, Serialize)]
pub struct GroupedCurves {
    pub r: Vec<f64>,
    pub curves: Vec<Vec<f64>>,
    pub patients: Vec<String>,
    pub groups: Vec<String>,
}

impl GroupedCurves {
    pub fn new(
        r: Vec<f64>,
        curves: Vec<Vec<f64>>,
        patients: Vec<String>,
        groups: Vec<String>,
    ) -> Self {
        assert_eq!(curves.len(), groups.len());
        assert_eq!(curves.len(), patients.len());
        GroupedCurves {
            r,
            curves,
            patients,
            groups,
        }
    }

    /// Distinct group names in sorted order.
    pub fn group_levels(&self) -> Vec<String> {
        let mut levels: Vec<String> = self.groups.clone();
        levels.sort();
        levels.dedup();
        levels
    }

    fn group_indices(&self, levels: &[String]) -> Vec<usize> {
        self.groups
            .iter()
            .map(|g| levels.iter().position(|l| l == g).unwrap())
            .collect()
    }

    /// Mean curve per group level (levels in sorted order).
    pub fn group_means(&self) -> Vec<(String, Vec<f64>)> {
        let levels = self.group_levels();
        let assignment = self.group_indices(&levels);
        levels
            .iter()
            .enumerate()
            .map(|(gi, name)| {
                let members: Vec<&Vec<f64>> = assignment
                    .iter()
                    .zip(self.curves.iter())
                    .filter(|(&a, _)| a == gi)
                    .map(|(_, c)| c)
                    .collect();
                (name.clone(), mean_curve(&members, self.r.len()))
            })
            .collect()
    }
}

fn mean_curve(curves: &[&Vec<f64>], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; d];
    for c in curves {
        for q in 0..d {
            out[q] += c[q];
        }
    }
    let n = curves.len() as f64;
    out.iter_mut().for_each(|v| *v /= n);
    out
}

/// Computes the configured descriptor for every pattern on a common grid
/// (the smallest admissible range across samples) and attaches group labels
/// from the clinical records.
pub fn patient_curves(
    patterns: &[MultitypePattern],
    records: &[PatientRecord],
    template: &StatisticConfig,
    field: GroupField,
    grid_points: usize,
) -> Result<GroupedCurves, GroupStatsError> {
    if patterns.len() < 2 {
        return Err(GroupStatsError::NoCommonRange);
    }
    let r0 = patterns
        .iter()
        .map(|p| {
            let bb = p.window().bbox();
            (bb.width().min(bb.height()) / 4.0).min(350.0)
        })
        .fold(f64::INFINITY, f64::min);
    if r0.is_nan() || r0 <= 0.0 {
        return Err(GroupStatsError::NoCommonRange);
    }
    let r = uniform_r_grid(r0, grid_points);
    let mut config = template.clone();
    config.r = r.clone();

    let mut groups = Vec::with_capacity(patterns.len());
    for p in patterns {
        let rec = records
            .iter()
            .find(|rec| rec.patient_id == p.base_patient_id())
            .ok_or_else(|| GroupStatsError::MissingGroupLabel(p.patient_id().to_string()))?;
        let label = field
            .label_of(rec)
            .ok_or_else(|| GroupStatsError::MissingGroupLabel(p.patient_id().to_string()))?;
        groups.push(label);
    }
    let curves: Vec<Vec<f64>> = patterns
        .par_iter()
        .map(|p| config.evaluate(p))
        .collect::<Result<_, _>>()?;
    Ok(GroupedCurves::new(
        r,
        curves,
        patterns.iter().map(|p| p.patient_id().to_string()).collect(),
        groups,
    ))
}

/// Intersects the grid columns on which every curve is defined.
fn defined_columns(curves: &[Vec<f64>]) -> Vec<usize> {
    (0..curves[0].len())
        .filter(|&q| curves.iter().all(|c| c[q].is_finite()))
        .collect()
}

/// Concatenated group means of the absolute residual curves
/// `|T_i - mean_{group(i)}|`: the Levene-style test vector.
fn levene_vector(curves: &[Vec<f64>], assignment: &[usize], n_groups: usize, cols: &[usize]) -> Vec<f64> {
    let d = cols.len();
    let mut means = vec![vec![0.0; d]; n_groups];
    let mut sizes = vec![0usize; n_groups];
    for (c, &g) in curves.iter().zip(assignment) {
        sizes[g] += 1;
        for (qi, &q) in cols.iter().enumerate() {
            means[g][qi] += c[q];
        }
    }
    for (m, &s) in means.iter_mut().zip(&sizes) {
        m.iter_mut().for_each(|v| *v /= s as f64);
    }
    let mut out = vec![0.0; n_groups * d];
    for (c, &g) in curves.iter().zip(assignment) {
        for (qi, &q) in cols.iter().enumerate() {
            out[g * d + qi] += (c[q] - means[g][qi]).abs();
        }
    }
    for g in 0..n_groups {
        for qi in 0..d {
            out[g * d + qi] /= sizes[g] as f64;
        }
    }
    out
}

/// Concatenated group mean curves: the one-way functional ANOVA vector.
fn anova_vector(curves: &[Vec<f64>], assignment: &[usize], n_groups: usize, cols: &[usize]) -> Vec<f64> {
    let d = cols.len();
    let mut means = vec![0.0; n_groups * d];
    let mut sizes = vec![0usize; n_groups];
    for (c, &g) in curves.iter().zip(assignment) {
        sizes[g] += 1;
        for (qi, &q) in cols.iter().enumerate() {
            means[g * d + qi] += c[q];
        }
    }
    for g in 0..n_groups {
        for qi in 0..d {
            means[g * d + qi] /= sizes[g] as f64;
        }
    }
    means
}

fn permutation_envelope(
    grouped: &GroupedCurves,
    nperm: usize,
    seed: u64,
    alpha: f64,
    min_group: usize,
    vector: impl Fn(&[usize]) -> Vec<f64> + Sync,
) -> Result<EnvelopeResult, GroupStatsError> {
    let levels = grouped.group_levels();
    if levels.len() < 2 {
        return Err(GroupStatsError::TooFewGroups);
    }
    let assignment = grouped.group_indices(&levels);
    for (gi, level) in levels.iter().enumerate() {
        let size = assignment.iter().filter(|&&a| a == gi).count();
        if size < min_group {
            return Err(GroupStatsError::TooFewCurves {
                group: level.clone(),
                got: size,
                need: min_group,
            });
        }
    }
    let observed = vector(&assignment);
    let sims: Vec<Vec<f64>> = (0..nperm)
        .into_par_iter()
        .map(|k| {
            let mut rng = rng::replicate(seed, k as u64);
            let mut perm = assignment.clone();
            perm.shuffle(&mut rng);
            vector(&perm)
        })
        .collect();
    let mut curves = Vec::with_capacity(nperm + 1);
    curves.push(observed);
    curves.extend(sims);
    let index_grid: Vec<f64> = (0..curves[0].len()).map(|q| q as f64).collect();
    let set = CurveSet::new(index_grid, curves, "permutation")?;
    Ok(global_envelope_test(&set, alpha, Side::TwoSided)?)
}

/// Levene-style permutation test for equality of curve variances across
/// groups. Whole curves are permuted across groups; the test vector is the
/// concatenation of group means of absolute residual curves.
pub fn functional_levene_test(
    grouped: &GroupedCurves,
    nperm: usize,
    seed: u64,
    alpha: f64,
) -> Result<EnvelopeResult, GroupStatsError> {
    let cols = defined_columns(&grouped.curves);
    if cols.is_empty() {
        return Err(GroupStatsError::NoCommonRange);
    }
    let levels = grouped.group_levels();
    let n_groups = levels.len();
    permutation_envelope(grouped, nperm, seed, alpha, 2, |assignment| {
        levene_vector(&grouped.curves, assignment, n_groups, &cols)
    })
}

/// Permutation one-way functional ANOVA on the group mean curves.
pub fn functional_anova_permutation(
    grouped: &GroupedCurves,
    nperm: usize,
    seed: u64,
    alpha: f64,
) -> Result<EnvelopeResult, GroupStatsError> {
    let cols = defined_columns(&grouped.curves);
    if cols.is_empty() {
        return Err(GroupStatsError::NoCommonRange);
    }
    let levels = grouped.group_levels();
    let n_groups = levels.len();
    permutation_envelope(grouped, nperm, seed, alpha, 1, |assignment| {
        anova_vector(&grouped.curves, assignment, n_groups, &cols)
    })
}
