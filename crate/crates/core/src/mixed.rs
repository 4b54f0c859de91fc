//! Random-intercept comparator: `y = β₀ + τ z + β'x + μ_cluster + ε`.
//!
//! Variance components come from moment equations (within-cluster residual
//! variance, then the excess of the pooled OLS residual sum of squares);
//! fixed effects are then estimated by GLS under the implied
//! compound-symmetric cluster covariance.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, Matrix};
use crate::panel::PanelDataset;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarianceComponents {
    pub sigma2_eps: f64,
    pub sigma2_mu: f64,
    pub icc: f64,
}

impl VarianceComponents {
    pub fn new(sigma2_eps: f64, sigma2_mu: f64) -> Self {
        let total = sigma2_eps + sigma2_mu;
        let icc = if total > 0.0 { sigma2_mu / total } else { 0.0 };
        Self { sigma2_eps, sigma2_mu, icc }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MixedOptions {
    /// Include the observation grade as a fixed effect.
    pub grade_fixed_effect: bool,
    /// Panel covariate columns to include.
    pub covariates: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixedFit {
    pub tau_hat: f64,
    pub se_model: f64,
    /// Cluster-robust SE with the `C/(C−1)` small-sample factor.
    pub se_cr: f64,
    pub df: f64,
    pub components: VarianceComponents,
    /// Fixed effects in design order: intercept, treatment, grade?, covariates.
    pub beta: Vec<f64>,
    pub warnings: Vec<String>,
}

struct Design {
    x: Vec<Vec<f64>>,
    y: Vec<f64>,
    /// Rows of each cluster.
    clusters: Vec<Vec<usize>>,
    p: usize,
}

fn build_design(panel: &PanelDataset, options: &MixedOptions) -> Result<Design> {
    let idx = options
        .covariates
        .iter()
        .map(|name| {
            panel.covariate_names().iter().position(|c| c == name).ok_or_else(|| Error::MissingColumn(name.clone()))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut x = Vec::with_capacity(panel.len());
    let mut y = Vec::with_capacity(panel.len());
    let mut clusters = vec![Vec::new(); panel.n_clusters()];
    for (i, o) in panel.observations().iter().enumerate() {
        let mut row = vec![1.0, if o.treated { 1.0 } else { 0.0 }];
        if options.grade_fixed_effect {
            row.push(o.grade as f64);
        }
        row.extend(idx.iter().map(|&c| o.covariates[c]));
        x.push(row);
        y.push(o.outcome);
        clusters[o.cluster].push(i);
    }
    clusters.retain(|c| !c.is_empty());
    let p = 2 + usize::from(options.grade_fixed_effect) + idx.len();
    Ok(Design { x, y, clusters, p })
}

fn gram(design: &Design) -> (Matrix, Vec<f64>) {
    let mut xtx = Matrix::zeros(design.p, design.p);
    let mut xty = vec![0.0; design.p];
    for (row, &yi) in design.x.iter().zip(&design.y) {
        xtx.add_outer(row, 1.0);
        for (t, v) in xty.iter_mut().zip(row) {
            *t += v * yi;
        }
    }
    (xtx, xty)
}

fn cluster_sums(design: &Design, rows: &[usize]) -> (Vec<f64>, f64) {
    let mut s = vec![0.0; design.p];
    let mut sy = 0.0;
    for &i in rows {
        for (a, v) in s.iter_mut().zip(&design.x[i]) {
            *a += v;
        }
        sy += design.y[i];
    }
    (s, sy)
}

/// Moment estimates of the variance components.
fn moment_components(design: &Design, warnings: &mut Vec<String>) -> Result<VarianceComponents> {
    let n = design.y.len();
    let n_clusters = design.clusters.len();
    let (xtx, xty) = gram(design);
    let chol = xtx.cholesky().map_err(|_| Error::RankDeficientDesign)?;
    let beta = chol.solve(&xty);
    let sse: f64 = design
        .x
        .iter()
        .zip(&design.y)
        .map(|(r, &yi)| {
            let e = yi - dot(r, &beta);
            e * e
        })
        .sum();

    // Within-cluster regression on cluster-demeaned columns.
    let mut wtw = Matrix::zeros(design.p, design.p);
    let mut wty = vec![0.0; design.p];
    let mut demeaned_y = vec![0.0; n];
    let mut demeaned_x = vec![Vec::new(); n];
    for rows in &design.clusters {
        let (s, sy) = cluster_sums(design, rows);
        let m = rows.len() as f64;
        for &i in rows {
            let xr: Vec<f64> = design.x[i].iter().zip(&s).map(|(v, t)| v - t / m).collect();
            let yr = design.y[i] - sy / m;
            wtw.add_outer(&xr, 1.0);
            for (t, v) in wty.iter_mut().zip(&xr) {
                *t += v * yr;
            }
            demeaned_y[i] = yr;
            demeaned_x[i] = xr;
        }
    }
    let scale = wtw.diag().iter().copied().fold(0.0, f64::max).max(1e-300);
    let varying: Vec<usize> = (0..design.p).filter(|&j| wtw[(j, j)] > 1e-10 * scale).collect();
    let beta_w = if varying.is_empty() {
        Vec::new()
    } else {
        let mut sub = Matrix::zeros(varying.len(), varying.len());
        for (a, &i) in varying.iter().enumerate() {
            for (b, &j) in varying.iter().enumerate() {
                sub[(a, b)] = wtw[(i, j)];
            }
        }
        let rhs: Vec<f64> = varying.iter().map(|&j| wty[j]).collect();
        sub.cholesky().map_err(|_| Error::RankDeficientDesign)?.solve(&rhs)
    };
    let ssw: f64 = (0..n)
        .map(|i| {
            let fit: f64 = varying.iter().zip(&beta_w).map(|(&j, b)| demeaned_x[i][j] * b).sum();
            let e = demeaned_y[i] - fit;
            e * e
        })
        .sum();
    let df_within = n as isize - n_clusters as isize - varying.len() as isize;
    if df_within <= 0 {
        warnings.push("one observation per cluster: intraclass correlation not identifiable; fitted by OLS".into());
        let df = (n as isize - design.p as isize).max(1) as f64;
        return Ok(VarianceComponents::new(sse / df, 0.0));
    }
    let sigma2_eps = ssw / df_within as f64;

    // E[SSE_ols] = σ²_ε (N − p) + σ²_μ (N − Σ_c s_c'(X'X)⁻¹ s_c).
    let xtx_inv = chol.inverse();
    let mut k_mu = n as f64;
    for rows in &design.clusters {
        let (s, _) = cluster_sums(design, rows);
        k_mu -= xtx_inv.quad_form(&s);
    }
    let raw = (sse - sigma2_eps * (n - design.p) as f64) / k_mu;
    let sigma2_mu = if raw.is_finite() && raw > 0.0 {
        raw
    } else {
        warnings.push("negative between-cluster moment estimate floored at zero".into());
        0.0
    };
    Ok(VarianceComponents::new(sigma2_eps, sigma2_mu))
}

/// GLS fit for given variance components.
fn gls(design: &Design, components: VarianceComponents) -> Result<(Vec<f64>, Matrix, Matrix)> {
    let rho = if components.sigma2_eps > 0.0 { components.sigma2_mu / components.sigma2_eps } else { 0.0 };
    let mut a = Matrix::zeros(design.p, design.p);
    let mut b = vec![0.0; design.p];
    let mut per_cluster = Vec::with_capacity(design.clusters.len());
    for rows in &design.clusters {
        let (s, sy) = cluster_sums(design, rows);
        let gamma = rho / (1.0 + rows.len() as f64 * rho);
        for &i in rows {
            a.add_outer(&design.x[i], 1.0);
            for (t, v) in b.iter_mut().zip(&design.x[i]) {
                *t += v * design.y[i];
            }
        }
        a.add_outer(&s, -gamma);
        for (t, v) in b.iter_mut().zip(&s) {
            *t -= gamma * v * sy;
        }
        per_cluster.push((s, gamma));
    }
    let chol = a.cholesky().map_err(|_| Error::RankDeficientDesign)?;
    let beta = chol.solve(&b);
    let bread = chol.inverse();

    let mut meat = Matrix::zeros(design.p, design.p);
    for (rows, (s, gamma)) in design.clusters.iter().zip(&per_cluster) {
        let mut u = vec![0.0; design.p];
        let mut sum_e = 0.0;
        for &i in rows {
            let e = design.y[i] - dot(&design.x[i], &beta);
            sum_e += e;
            for (t, v) in u.iter_mut().zip(&design.x[i]) {
                *t += v * e;
            }
        }
        for (t, v) in u.iter_mut().zip(s) {
            *t -= gamma * v * sum_e;
        }
        meat.add_outer(&u, 1.0);
    }
    let c = design.clusters.len() as f64;
    let robust = bread.matmul(&meat).matmul(&bread).scale(c / (c - 1.0));
    // Model covariance in outcome units: σ²_ε (X'V₀⁻¹X)⁻¹ with V₀ = V/σ²_ε.
    let model = bread.scale(components.sigma2_eps);
    Ok((beta, model, robust))
}

/// Random-intercept fit with moment variance components.
pub fn fit_random_intercept(panel: &PanelDataset, options: &MixedOptions) -> Result<MixedFit> {
    let design = build_design(panel, options)?;
    if design.clusters.len() < 2 {
        return Err(Error::TooFewClusters { needed: 2, found: design.clusters.len() });
    }
    let mut warnings = Vec::new();
    let components = moment_components(&design, &mut warnings)?;
    fit_with_components(&design, components, warnings)
}

/// GLS fit at fixed variance components; `sigma2_mu = 0` gives OLS.
pub fn fit_random_intercept_at(
    panel: &PanelDataset,
    options: &MixedOptions,
    components: VarianceComponents,
) -> Result<MixedFit> {
    let design = build_design(panel, options)?;
    if design.clusters.len() < 2 {
        return Err(Error::TooFewClusters { needed: 2, found: design.clusters.len() });
    }
    fit_with_components(&design, components, Vec::new())
}

fn fit_with_components(design: &Design, components: VarianceComponents, warnings: Vec<String>) -> Result<MixedFit> {
    let (beta, model, robust) = gls(design, components)?;
    Ok(MixedFit {
        tau_hat: beta[1],
        se_model: libm::sqrt(model[(1, 1)]),
        se_cr: libm::sqrt(robust[(1, 1)]),
        df: design.clusters.len() as f64 - 2.0,
        components,
        beta,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::panel::{PanelBuilder, RawRow};
    use alloc::format;

    fn panel(cluster_rows: &[(bool, &[f64])]) -> PanelDataset {
        let mut ids = Vec::new();
        for (c, (z, ys)) in cluster_rows.iter().enumerate() {
            for (r, y) in ys.iter().enumerate() {
                ids.push((format!("u{c}-{r}"), format!("c{c}"), *z, *y, r as i32));
            }
        }
        let mut b = PanelBuilder::new(Vec::new(), false);
        for (u, c, z, y, g) in &ids {
            b.push(RawRow {
                unit: u,
                cluster: c,
                block: None,
                treated: *z,
                cohort: 1,
                grade: *g,
                year: 1,
                outcome: *y,
                tested_in: false,
                covariates: Vec::new(),
            });
        }
        b.build().unwrap()
    }

    #[test]
    fn zero_cluster_variance_reduces_to_ols() {
        let p = panel(&[
            (true, &[3.0, 5.0, 4.5]),
            (true, &[6.0, 2.0]),
            (false, &[1.0, 2.5, 2.0, 0.5]),
            (false, &[3.0, 1.5]),
        ]);
        let opts = MixedOptions { grade_fixed_effect: true, covariates: Vec::new() };
        let fit = fit_random_intercept_at(&p, &opts, VarianceComponents::new(1.0, 0.0)).unwrap();
        // OLS by normal equations.
        let design = build_design(&p, &opts).unwrap();
        let (xtx, xty) = gram(&design);
        let ols = xtx.solve(&xty).unwrap();
        assert!((fit.tau_hat - ols[1]).abs() <= 1e-8 * ols[1].abs());
    }

    #[test]
    fn single_row_clusters_warn_and_use_ols() {
        let p = panel(&[(true, &[3.0]), (true, &[4.0]), (false, &[1.0]), (false, &[2.5])]);
        let fit = fit_random_intercept(&p, &MixedOptions::default()).unwrap();
        assert_eq!(fit.components.sigma2_mu, 0.0);
        assert!(!fit.warnings.is_empty());
        assert!((fit.tau_hat - 1.75).abs() < 1e-12);
    }

    #[test]
    fn identical_cluster_means_floor_between_variance() {
        let p = panel(&[(true, &[1.0, 3.0]), (true, &[0.0, 4.0]), (false, &[1.0, 3.0]), (false, &[2.0, 2.0])]);
        let fit = fit_random_intercept(&p, &MixedOptions::default()).unwrap();
        assert_eq!(fit.components.sigma2_mu, 0.0);
        assert_eq!(fit.components.icc, 0.0);
        assert!(fit.tau_hat.abs() < 1e-12);
    }
}
