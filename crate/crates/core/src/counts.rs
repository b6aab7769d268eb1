//! Count regression for cell abundances: a log-linear model with area
//! offsets, quasi-likelihood dispersion, and estimating-equation fitting
//! with exchangeable or independence working correlation. Standard errors
//! come in both model-based ("naive") and cluster-robust sandwich form.

use crate::pattern::{MultitypePattern, PatientRecord, Stage};
use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CountsError {
    #[error("pattern '{0}' has no tissue labels")]
    MissingTissueLabel(String),
    #[error("patient '{0}' is missing from the clinical table")]
    MissingRecord(String),
    #[error("patient '{0}' lacks covariate '{1}'")]
    MissingCovariate(String, String),
    #[error("design matrix is rank deficient")]
    RankDeficientDesign,
    #[error("estimating equations did not converge in {0} iterations")]
    NonConvergence(usize),
    #[error("at least two clusters are required")]
    SingleCluster,
}

/// One (patient, immune type, tissue) cell count with its area offset.
#[derive(Debug, Clone, Serialize)]
pub struct CountsRow {
    pub patient: String,
    pub immune: String,
    pub tissue: String,
    pub count: f64,
    /// `log` of the patient's total sampled area.
    pub offset: f64,
}

/// Count rows joined with the clinical records.
#[derive(Debug, Clone)]
pub struct CountsTable {
    pub rows: Vec<CountsRow>,
    pub records: BTreeMap<String, PatientRecord>,
}

/// Tallies type-by-tissue counts per patient (samples of one patient pool
/// their counts and areas) and joins the clinical covariates. Zero counts
/// are kept: they are informative under a log-linear model.
pub fn build_counts_table(
    patterns: &[MultitypePattern],
    records: &[PatientRecord],
) -> Result<CountsTable, CountsError> {
    let by_id: BTreeMap<String, PatientRecord> = records
        .iter()
        .map(|r| (r.patient_id.clone(), r.clone()))
        .collect();
    // patient -> (area, tissue levels, counts[(type, tissue)])
    struct Acc {
        area: f64,
        tissues: Vec<String>,
        types: Vec<String>,
        counts: BTreeMap<(usize, usize), f64>,
    }
    let mut acc: BTreeMap<String, Acc> = BTreeMap::new();
    for p in patterns {
        let tissue_labels = p
            .tissue_labels()
            .ok_or_else(|| CountsError::MissingTissueLabel(p.patient_id().to_string()))?;
        let pid = p.base_patient_id().to_string();
        if !by_id.contains_key(&pid) {
            return Err(CountsError::MissingRecord(pid));
        }
        let entry = acc.entry(pid).or_insert_with(|| Acc {
            area: 0.0,
            tissues: Vec::new(),
            types: p.type_names().to_vec(),
            counts: BTreeMap::new(),
        });
        entry.area += p.window().area();
        for (k, &t_label) in p.type_labels().iter().enumerate() {
            let tissue_name = &p.tissue_names()[tissue_labels[k] as usize];
            let ti = match entry.tissues.iter().position(|t| t == tissue_name) {
                Some(i) => i,
                None => {
                    entry.tissues.push(tissue_name.clone());
                    entry.tissues.len() - 1
                }
            };
            *entry.counts.entry((t_label as usize, ti)).or_insert(0.0) += 1.0;
        }
        // make sure every observed tissue level exists for every type
        for t in 0..entry.types.len() {
            for ti in 0..entry.tissues.len() {
                entry.counts.entry((t, ti)).or_insert(0.0);
            }
        }
    }
    let mut rows = Vec::new();
    for (pid, a) in acc {
        let offset = a.area.ln();
        for ((t, ti), count) in a.counts {
            rows.push(CountsRow {
                patient: pid.clone(),
                immune: a.types[t].clone(),
                tissue: a.tissues[ti].clone(),
                count,
                offset,
            });
        }
    }
    Ok(CountsTable { rows, records: by_id })
}

/// Model terms for [`design_from_table`], in Table-style order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Term {
    Immune,
    Tissue,
    PrimaryTumour,
    PriorChemo,
    Stage,
    Brca,
    Parpi,
    Death,
    Age,
}

pub const TABLE_TERMS: [Term; 9] = [
    Term::Immune,
    Term::Tissue,
    Term::PrimaryTumour,
    Term::PriorChemo,
    Term::Stage,
    Term::Brca,
    Term::Parpi,
    Term::Death,
    Term::Age,
];

/// A prepared regression problem: response, offset, design matrix and the
/// cluster id of every row.
#[derive(Debug, Clone)]
pub struct Design {
    pub y: Vec<f64>,
    pub offset: Vec<f64>,
    pub x: DMatrix<f64>,
    pub names: Vec<String>,
    pub cluster: Vec<usize>,
}

/// Dummy-codes the requested terms with the reference levels immune =
/// B-cell, tissue = stroma, stage = I.
pub fn design_from_table(table: &CountsTable, terms: &[Term]) -> Result<Design, CountsError> {
    let rows = &table.rows;
    let mut immune_levels: Vec<String> = rows.iter().map(|r| r.immune.clone()).collect();
    immune_levels.sort();
    immune_levels.dedup();
    reference_first(&mut immune_levels, "B-cell");
    let mut tissue_levels: Vec<String> = rows.iter().map(|r| r.tissue.clone()).collect();
    tissue_levels.sort();
    tissue_levels.dedup();
    reference_first(&mut tissue_levels, "stroma");

    let mut names = vec!["Intercept".to_string()];
    for term in terms {
        match term {
            Term::Immune => {
                names.extend(immune_levels.iter().skip(1).map(|l| format!("Immune: {l}")))
            }
            Term::Tissue => {
                names.extend(tissue_levels.iter().skip(1).map(|l| format!("Tissue: {l}")))
            }
            Term::PrimaryTumour => names.push("Primary tumour: yes".into()),
            Term::PriorChemo => names.push("Prior chemo: yes".into()),
            Term::Stage => names.extend(
                [Stage::II, Stage::III, Stage::IV]
                    .iter()
                    .map(|s| format!("Stage {}", s.name())),
            ),
            Term::Brca => names.push("BRCA mutation: yes".into()),
            Term::Parpi => names.push("PARPi inhibitor: yes".into()),
            Term::Death => names.push("Death: yes".into()),
            Term::Age => names.push("Age at diagnosis".into()),
        }
    }
    let p = names.len();
    let n = rows.len();
    let mut x = DMatrix::zeros(n, p);
    let mut cluster_ids: Vec<String> = rows.iter().map(|r| r.patient.clone()).collect();
    cluster_ids.sort();
    cluster_ids.dedup();
    let mut cluster = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    let mut offset = Vec::with_capacity(n);
    for (ri, row) in rows.iter().enumerate() {
        let rec = table
            .records
            .get(&row.patient)
            .ok_or_else(|| CountsError::MissingRecord(row.patient.clone()))?;
        y.push(row.count);
        offset.push(row.offset);
        cluster.push(cluster_ids.iter().position(|c| *c == row.patient).unwrap());
        let mut col = 0usize;
        x[(ri, col)] = 1.0;
        col += 1;
        for term in terms {
            match term {
                Term::Immune => {
                    for level in immune_levels.iter().skip(1) {
                        x[(ri, col)] = f64::from(row.immune == *level);
                        col += 1;
                    }
                }
                Term::Tissue => {
                    for level in tissue_levels.iter().skip(1) {
                        x[(ri, col)] = f64::from(row.tissue == *level);
                        col += 1;
                    }
                }
                Term::PrimaryTumour => {
                    x[(ri, col)] = f64::from(rec.primary_tumour);
                    col += 1;
                }
                Term::PriorChemo => {
                    x[(ri, col)] = f64::from(rec.prior_chemo);
                    col += 1;
                }
                Term::Stage => {
                    let stage = rec.stage.ok_or_else(|| {
                        CountsError::MissingCovariate(row.patient.clone(), "stage".into())
                    })?;
                    for s in [Stage::II, Stage::III, Stage::IV] {
                        x[(ri, col)] = f64::from(stage == s);
                        col += 1;
                    }
                }
                Term::Brca => {
                    x[(ri, col)] = f64::from(rec.brca);
                    col += 1;
                }
                Term::Parpi => {
                    x[(ri, col)] = f64::from(rec.parpi);
                    col += 1;
                }
                Term::Death => {
                    x[(ri, col)] = f64::from(rec.death);
                    col += 1;
                }
                Term::Age => {
                    x[(ri, col)] = rec.age;
                    col += 1;
                }
            }
        }
    }
    Ok(Design {
        y,
        offset,
        x,
        names,
        cluster,
    })
}

fn reference_first(levels: &mut [String], preferred: &str) {
    if let Some(pos) = levels
        .iter()
        .position(|l| l.eq_ignore_ascii_case(preferred))
    {
        levels.swap(0, pos);
    }
}

/// Working correlation structure within clusters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Working {
    Independence,
    Exchangeable,
}

/// Fitted estimating-equation model.
#[derive(Debug, Clone, Serialize)]
pub struct GeeFit {
    pub names: Vec<String>,
    pub beta: Vec<f64>,
    pub naive_se: Vec<f64>,
    pub robust_se: Vec<f64>,
    /// Pearson dispersion.
    pub phi: f64,
    /// Estimated exchangeable correlation (zero under independence).
    pub alpha: f64,
    pub working: Working,
    pub iterations: usize,
    #[serde(skip)]
    pub robust_cov: DMatrix<f64>,
}

const MAX_ITER: usize = 100;
const TOL: f64 = 1e-8;

/// Fits the log-linear count model with offset by iteratively reweighted
/// estimating equations. The dispersion is the Pearson statistic over
/// `N - p`; naive covariance is the model-based matrix scaled by it, robust
/// covariance the cluster sandwich.
pub fn fit_gee_quasipoisson(design: &Design, working: Working) -> Result<GeeFit, CountsError> {
    let n = design.y.len();
    let p = design.x.ncols();
    if design.x.nrows() != n || n < p {
        return Err(CountsError::RankDeficientDesign);
    }
    let n_clusters = design.cluster.iter().max().map(|m| m + 1).unwrap_or(0);
    if n_clusters < 2 {
        return Err(CountsError::SingleCluster);
    }
    // Quick full-rank check on the raw design.
    let xtx = design.x.transpose() * &design.x;
    if xtx.clone().cholesky().is_none() {
        return Err(CountsError::RankDeficientDesign);
    }
    let mut clusters: Vec<Vec<usize>> = vec![Vec::new(); n_clusters];
    for (row, &c) in design.cluster.iter().enumerate() {
        clusters[c].push(row);
    }

    let total: f64 = design.y.iter().sum();
    let exposure: f64 = design.offset.iter().map(|o| o.exp()).sum();
    let mut beta = DVector::zeros(p);
    beta[0] = (total.max(1e-12) / exposure).ln();

    let eta_mu = |beta: &DVector<f64>| -> (DVector<f64>, DVector<f64>) {
        let mut eta = &design.x * beta;
        for (i, o) in design.offset.iter().enumerate() {
            eta[i] = (eta[i] + o).min(700.0);
        }
        let mu = eta.map(f64::exp);
        (eta, mu)
    };

    let mut alpha = 0.0_f64;
    let mut iterations = 0usize;
    let mut converged = false;
    while iterations < MAX_ITER {
        iterations += 1;
        let (_, mu) = eta_mu(&beta);
        // Pearson residuals and moment estimates.
        let z: Vec<f64> = (0..n)
            .map(|i| (design.y[i] - mu[i]) / mu[i].sqrt())
            .collect();
        let pearson: f64 = z.iter().map(|v| v * v).sum();
        let phi = pearson / (n - p) as f64;
        alpha = match working {
            Working::Independence => 0.0,
            Working::Exchangeable => {
                let mut cross = 0.0;
                let mut pairs = 0.0;
                for members in &clusters {
                    let m = members.len();
                    if m < 2 {
                        continue;
                    }
                    let s: f64 = members.iter().map(|&i| z[i]).sum();
                    let ss: f64 = members.iter().map(|&i| z[i] * z[i]).sum();
                    cross += (s * s - ss) / 2.0;
                    pairs += (m * (m - 1)) as f64 / 2.0;
                }
                let denom = (pairs - p as f64).max(1.0) * phi.max(1e-300);
                let max_m = clusters.iter().map(|c| c.len()).max().unwrap_or(2);
                let lo = if max_m > 1 {
                    -0.9 / (max_m as f64 - 1.0)
                } else {
                    0.0
                };
                (cross / denom).clamp(lo, 0.95)
            }
        };

        let mut h = DMatrix::<f64>::zeros(p, p);
        let mut u = DVector::<f64>::zeros(p);
        for members in &clusters {
            let m = members.len();
            if m == 0 {
                continue;
            }
            // W = A^{1/2} X  (rows of this cluster), res = A^{-1/2}(y - mu)
            let mut w = DMatrix::<f64>::zeros(m, p);
            let mut res = DVector::<f64>::zeros(m);
            for (a, &i) in members.iter().enumerate() {
                let s = mu[i].sqrt();
                for c in 0..p {
                    w[(a, c)] = s * design.x[(i, c)];
                }
                res[a] = (design.y[i] - mu[i]) / s;
            }
            let (rw, rres) = apply_inverse_exchangeable(&w, &res, alpha);
            h += w.transpose() * rw;
            u += w.transpose() * rres;
        }
        let chol = h.clone().cholesky().ok_or(CountsError::RankDeficientDesign)?;
        let delta = chol.solve(&u);
        beta += &delta;
        if delta.amax() < TOL {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(CountsError::NonConvergence(MAX_ITER));
    }

    // Final covariances at the converged estimate.
    let (_, mu) = eta_mu(&beta);
    let z: Vec<f64> = (0..n)
        .map(|i| (design.y[i] - mu[i]) / mu[i].sqrt())
        .collect();
    let phi = z.iter().map(|v| v * v).sum::<f64>() / (n - p) as f64;
    let mut h = DMatrix::<f64>::zeros(p, p);
    let mut meat = DMatrix::<f64>::zeros(p, p);
    for members in &clusters {
        let m = members.len();
        if m == 0 {
            continue;
        }
        let mut w = DMatrix::<f64>::zeros(m, p);
        let mut res = DVector::<f64>::zeros(m);
        for (a, &i) in members.iter().enumerate() {
            let s = mu[i].sqrt();
            for c in 0..p {
                w[(a, c)] = s * design.x[(i, c)];
            }
            res[a] = (design.y[i] - mu[i]) / s;
        }
        let (rw, rres) = apply_inverse_exchangeable(&w, &res, alpha);
        h += w.transpose() * rw;
        let score = w.transpose() * rres;
        meat += &score * score.transpose();
    }
    let h_inv = h
        .clone()
        .try_inverse()
        .ok_or(CountsError::RankDeficientDesign)?;
    let naive = h_inv.clone() * phi;
    let robust = &h_inv * meat * &h_inv;
    let naive_se: Vec<f64> = (0..p).map(|c| naive[(c, c)].max(0.0).sqrt()).collect();
    let robust_se: Vec<f64> = (0..p).map(|c| robust[(c, c)].max(0.0).sqrt()).collect();
    Ok(GeeFit {
        names: design.names.clone(),
        beta: beta.iter().cloned().collect(),
        naive_se,
        robust_se,
        phi,
        alpha,
        working,
        iterations,
        robust_cov: robust,
    })
}

/// `R(alpha)^{-1} M` for the exchangeable correlation, using the closed
/// form `R^{-1} = (I - alpha/(1+(m-1)alpha) J) / (1-alpha)`.
fn apply_inverse_exchangeable(
    w: &DMatrix<f64>,
    res: &DVector<f64>,
    alpha: f64,
) -> (DMatrix<f64>, DVector<f64>) {
    let m = w.nrows();
    if alpha == 0.0 || m == 1 {
        return (w.clone(), res.clone());
    }
    let c = alpha / (1.0 + (m as f64 - 1.0) * alpha);
    let scale = 1.0 / (1.0 - alpha);
    let mut rw = w.clone();
    for col in 0..w.ncols() {
        let mean_sum: f64 = (0..m).map(|r| w[(r, col)]).sum();
        for r in 0..m {
            rw[(r, col)] = scale * (w[(r, col)] - c * mean_sum);
        }
    }
    let sum_res: f64 = res.iter().sum();
    let rres = DVector::from_iterator(m, res.iter().map(|&v| scale * (v - c * sum_res)));
    (rw, rres)
}

/// One row of the coefficient report.
#[derive(Debug, Clone, Serialize)]
pub struct WaldRow {
    pub name: String,
    pub estimate: f64,
    pub naive_se: f64,
    pub robust_se: f64,
    pub p_value: f64,
    pub stars: &'static str,
}

/// Wald summary: two-sided normal-approximation p-values from the robust
/// standard errors, starred at 0.05 / 0.01 / 0.001.
pub fn wald_table(fit: &GeeFit) -> Vec<WaldRow> {
    let normal = Normal::new(0.0, 1.0).unwrap();
    fit.names
        .iter()
        .enumerate()
        .map(|(c, name)| {
            let estimate = fit.beta[c];
            let se = fit.robust_se[c];
            let p_value = if se > 0.0 {
                2.0 * (1.0 - normal.cdf((estimate / se).abs()))
            } else if estimate == 0.0 {
                1.0
            } else {
                0.0
            };
            let stars = if p_value < 0.001 {
                "***"
            } else if p_value < 0.01 {
                "**"
            } else if p_value < 0.05 {
                "*"
            } else {
                ""
            };
            WaldRow {
                name: name.clone(),
                estimate,
                naive_se: fit.naive_se[c],
                robust_se: se,
                p_value,
                stars,
            }
        })
        .collect()
}

/// Plain-text table of the Wald summary with aligned columns.
pub fn render_wald_table(fit: &GeeFit) -> String {
    let rows = wald_table(fit);
    let name_w = rows.iter().map(|r| r.name.len()).max().unwrap_or(9).max(9);
    let mut out = String::new();
    out.push_str(&format!(
        "{:<name_w$}  {:>10}  {:>10}  {:>10}  {:>10}\n",
        "Regressor", "Estimate", "Naive SE", "Robust SE", "p-value"
    ));
    for r in &rows {
        out.push_str(&format!(
            "{:<name_w$}  {:>10.3}  {:>10.3}  {:>10.3}  {:>10.4} {}\n",
            r.name, r.estimate, r.naive_se, r.robust_se, r.p_value, r.stars
        ));
    }
    out.push_str(&format!(
        "dispersion phi = {:.1}; working correlation = {:?} (alpha = {:.3})\n",
        fit.phi, fit.working, fit.alpha
    ));
    out
}
