//! Per-group intention-to-treat estimates, control-arm test-in proportions,
//! and the exit-observation comparator.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::covariance::{cluster_covariance, CovarianceOptions};
use crate::error::{Error, Result};
use crate::linalg::{dot, Matrix};
use crate::panel::{GroupInfo, GroupKey, PanelDataset};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EffectMethod {
    DifferenceInMeans,
    PetersBelson,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExcludedGroup {
    pub group: GroupInfo,
    pub reason: String,
}

/// Sufficient statistics of one group's fit.
///
/// Covariates are centered on the control mean, so with no covariates the
/// estimate is exactly the difference of arm means.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupFit {
    pub n_treated: usize,
    pub n_control: usize,
    pub mean_treated: f64,
    pub mean_control: f64,
    pub control_mean_x: Vec<f64>,
    pub treated_mean_x: Vec<f64>,
    /// Slopes of the control-arm regression.
    pub beta: Vec<f64>,
    /// Inverse of the centered control Gram matrix.
    pub gram_inv: Matrix,
}

impl GroupFit {
    pub fn estimate(&self) -> f64 {
        let shift: Vec<f64> = self.treated_mean_x.iter().zip(&self.control_mean_x).map(|(t, c)| t - c).collect();
        self.mean_treated - self.mean_control - dot(&shift, &self.beta)
    }

    fn shift(&self) -> Vec<f64> {
        self.treated_mean_x.iter().zip(&self.control_mean_x).map(|(t, c)| t - c).collect()
    }
}

/// Vector of per-group estimates plus what is needed to recompute their
/// estimating-equation scores.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupEffects {
    pub method: EffectMethod,
    pub groups: Vec<GroupInfo>,
    pub estimates: Vec<f64>,
    pub excluded: Vec<ExcludedGroup>,
    /// Covariate column indices used by the fit.
    pub covariates: Vec<usize>,
    pub fits: Vec<GroupFit>,
    /// Included-group ordinal for each panel row; `None` for rows outside the
    /// estimation sample.
    pub assignment: Vec<Option<usize>>,
}

impl GroupEffects {
    pub fn len(&self) -> usize {
        self.estimates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.estimates.is_empty()
    }

    pub fn counts(&self) -> Vec<usize> {
        self.groups.iter().map(|g| g.n).collect()
    }

    pub fn keys(&self) -> Vec<GroupKey> {
        self.groups.iter().map(GroupInfo::key).collect()
    }

    /// Linear influence of `y_i` on its group's estimate, and the residual of
    /// row `i` under the fitted model.
    ///
    /// With `control_centered`, treated residuals are taken around the
    /// control-arm prediction instead of the treated-arm fit.
    pub fn score(&self, panel: &PanelDataset, i: usize, control_centered: bool) -> Option<(usize, f64, f64)> {
        let g = self.assignment[i]?;
        let fit = &self.fits[g];
        let o = &panel.observations()[i];
        let x: Vec<f64> = self.covariates.iter().map(|&c| o.covariates[c]).collect();
        if o.treated {
            let a = 1.0 / fit.n_treated as f64;
            let e = if control_centered {
                let xc: Vec<f64> = x.iter().zip(&fit.control_mean_x).map(|(v, m)| v - m).collect();
                o.outcome - fit.mean_control - dot(&xc, &fit.beta)
            } else {
                let xt: Vec<f64> = x.iter().zip(&fit.treated_mean_x).map(|(v, m)| v - m).collect();
                o.outcome - fit.mean_treated - dot(&xt, &fit.beta)
            };
            Some((g, a, e))
        } else {
            let xc: Vec<f64> = x.iter().zip(&fit.control_mean_x).map(|(v, m)| v - m).collect();
            let a = -1.0 / fit.n_control as f64 - dot(&fit.shift(), &fit.gram_inv.mul_vec(&xc));
            let e = o.outcome - fit.mean_control - dot(&xc, &fit.beta);
            Some((g, a, e))
        }
    }

    /// Centered covariate vector of row `i` relative to its arm's regression
    /// leverage: empty for treated rows (intercept-only leverage).
    pub fn leverage_design(&self, panel: &PanelDataset, i: usize) -> Option<Vec<f64>> {
        let g = self.assignment[i]?;
        let o = &panel.observations()[i];
        if o.treated {
            return Some(Vec::new());
        }
        let fit = &self.fits[g];
        Some(self.covariates.iter().zip(&fit.control_mean_x).map(|(&c, m)| o.covariates[c] - m).collect())
    }
}

/// Proportion of control observations flagged as tested in, per group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestInProportions {
    pub groups: Vec<GroupInfo>,
    pub p_hat: Vec<f64>,
    /// Control observation counts (the denominators).
    pub counts: Vec<usize>,
    pub excluded: Vec<ExcludedGroup>,
}

impl TestInProportions {
    /// Proportions re-ordered to the groups of `effects`.
    pub fn aligned_to(&self, effects: &GroupEffects) -> Result<Vec<f64>> {
        effects
            .groups
            .iter()
            .map(|g| {
                self.groups
                    .iter()
                    .position(|h| h.key() == g.key())
                    .map(|j| self.p_hat[j])
                    .ok_or_else(|| Error::Dimension(format!("no test-in proportion for group {}", g.g)))
            })
            .collect()
    }
}

/// Difference in arm means per cohort-year group.
pub fn estimate_effects_diffmeans(panel: &PanelDataset) -> Result<GroupEffects> {
    estimate_effects(panel, &[], EffectMethod::DifferenceInMeans)
}

/// Peters-Belson estimates: per group, a least-squares fit of outcome on the
/// named covariates among control rows, then the mean treated residual.
pub fn estimate_effects_peters_belson(panel: &PanelDataset, covariates: &[&str]) -> Result<GroupEffects> {
    let idx = covariates
        .iter()
        .map(|name| {
            panel
                .covariate_names()
                .iter()
                .position(|c| c == name)
                .ok_or_else(|| Error::MissingColumn(String::from(*name)))
        })
        .collect::<Result<Vec<_>>>()?;
    estimate_effects(panel, &idx, EffectMethod::PetersBelson)
}

fn estimate_effects(panel: &PanelDataset, covariates: &[usize], method: EffectMethod) -> Result<GroupEffects> {
    let group_rows = rows_by_group(panel, panel.group_ordinals(), panel.n_groups());
    fit_cells(panel, panel.catalog(), &group_rows, covariates, method)
}

fn rows_by_group(panel: &PanelDataset, group_of: &[usize], n_groups: usize) -> Vec<Vec<usize>> {
    let mut rows = vec![Vec::new(); n_groups];
    for i in 0..panel.len() {
        rows[group_of[i]].push(i);
    }
    rows
}

fn fit_cells(
    panel: &PanelDataset,
    catalog: &[GroupInfo],
    group_rows: &[Vec<usize>],
    covariates: &[usize],
    method: EffectMethod,
) -> Result<GroupEffects> {
    let k = covariates.len();
    let mut groups = Vec::new();
    let mut estimates = Vec::new();
    let mut excluded = Vec::new();
    let mut fits = Vec::new();
    let mut assignment = vec![None; panel.len()];
    let obs = panel.observations();

    for (info, rows) in catalog.iter().zip(group_rows) {
        if info.n_treated == 0 || info.n_control == 0 {
            let arm = if info.n_treated == 0 { "treated" } else { "control" };
            excluded.push(ExcludedGroup { group: info.clone(), reason: format!("no {arm} observations") });
            continue;
        }
        if info.n_control < k + 1 {
            excluded.push(ExcludedGroup {
                group: info.clone(),
                reason: format!("{} control rows for {} predictors", info.n_control, k + 1),
            });
            continue;
        }
        let mut sum_t = 0.0;
        let mut sum_c = 0.0;
        let mut sx_t = vec![0.0; k];
        let mut sx_c = vec![0.0; k];
        for &i in rows {
            let o = &obs[i];
            if o.treated {
                sum_t += o.outcome;
                for (s, &c) in sx_t.iter_mut().zip(covariates) {
                    *s += o.covariates[c];
                }
            } else {
                sum_c += o.outcome;
                for (s, &c) in sx_c.iter_mut().zip(covariates) {
                    *s += o.covariates[c];
                }
            }
        }
        let nt = info.n_treated as f64;
        let nc = info.n_control as f64;
        let mean_treated = sum_t / nt;
        let mean_control = sum_c / nc;
        let treated_mean_x: Vec<f64> = sx_t.iter().map(|s| s / nt).collect();
        let control_mean_x: Vec<f64> = sx_c.iter().map(|s| s / nc).collect();

        let (beta, gram_inv) = if k == 0 {
            (Vec::new(), Matrix::zeros(0, 0))
        } else {
            let mut gram = Matrix::zeros(k, k);
            let mut xty = vec![0.0; k];
            for &i in rows {
                let o = &obs[i];
                if o.treated {
                    continue;
                }
                let xc: Vec<f64> = covariates.iter().zip(&control_mean_x).map(|(&c, m)| o.covariates[c] - m).collect();
                gram.add_outer(&xc, 1.0);
                for (t, v) in xty.iter_mut().zip(&xc) {
                    *t += v * (o.outcome - mean_control);
                }
            }
            let chol = gram.cholesky().map_err(|_| Error::RankDeficient(info.g))?;
            // Reject numerically rank-deficient designs that Cholesky lets through.
            let l = chol.factor().diag();
            let lmax = l.iter().copied().fold(0.0, f64::max);
            if l.iter().any(|&d| d <= 1e-7 * lmax) {
                return Err(Error::RankDeficient(info.g));
            }
            (chol.solve(&xty), chol.inverse())
        };

        let fit = GroupFit {
            n_treated: info.n_treated,
            n_control: info.n_control,
            mean_treated,
            mean_control,
            control_mean_x,
            treated_mean_x,
            beta,
            gram_inv,
        };
        let slot = groups.len();
        for &i in rows {
            assignment[i] = Some(slot);
        }
        estimates.push(fit.estimate());
        fits.push(fit);
        groups.push(info.clone());
    }

    Ok(GroupEffects { method, groups, estimates, excluded, covariates: covariates.to_vec(), fits, assignment })
}

/// Control-arm test-in proportions per group, over student-year rows.
pub fn estimate_p0(panel: &PanelDataset) -> Result<TestInProportions> {
    if !panel.has_test_in() {
        return Err(Error::MissingTestIn);
    }
    let mut flagged = vec![0usize; panel.n_groups()];
    for (i, o) in panel.observations().iter().enumerate() {
        if !o.treated && o.tested_in {
            flagged[panel.group_of(i)] += 1;
        }
    }
    let mut out = TestInProportions { groups: Vec::new(), p_hat: Vec::new(), counts: Vec::new(), excluded: Vec::new() };
    for (info, &f) in panel.catalog().iter().zip(&flagged) {
        if info.n_control == 0 {
            out.excluded.push(ExcludedGroup { group: info.clone(), reason: "no control observations".into() });
            continue;
        }
        out.groups.push(info.clone());
        out.p_hat.push(f as f64 / info.n_control as f64);
        out.counts.push(info.n_control);
    }
    Ok(out)
}

/// Which observation represents a unit in the exit analysis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ExitRule {
    /// Each unit's last follow-up year.
    #[default]
    LastYear,
    /// Rows observed at this grade.
    Grade(i32),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExitEstimate {
    pub estimate: f64,
    pub se: f64,
    pub df: f64,
    pub n: usize,
    pub n_treated: usize,
    pub n_control: usize,
}

/// Row indices selected by an exit rule.
pub fn exit_rows(panel: &PanelDataset, rule: ExitRule) -> Vec<usize> {
    match rule {
        ExitRule::LastYear => {
            let mut rows: Vec<usize> = panel.unit_histories().into_iter().filter_map(|h| h.last().copied()).collect();
            rows.sort_unstable();
            rows
        }
        ExitRule::Grade(grade) => (0..panel.len()).filter(|&i| panel.observations()[i].grade == grade).collect(),
    }
}

/// Pooled effect on the exit observations with a cluster-robust SE.
pub fn exit_observation_estimate(
    panel: &PanelDataset,
    rule: ExitRule,
    covariates: &[&str],
    options: &CovarianceOptions,
) -> Result<ExitEstimate> {
    let rows = exit_rows(panel, rule);
    let effects = pooled_effects(panel, &rows, covariates)?;
    let cov = cluster_covariance(panel, &effects, options)?;
    let fit = &effects.fits[0];
    Ok(ExitEstimate {
        estimate: effects.estimates[0],
        se: libm::sqrt(cov.sigma_hat[(0, 0)]),
        df: cov.df,
        n: rows.len(),
        n_treated: fit.n_treated,
        n_control: fit.n_control,
    })
}

/// Treats the given rows as a single group.
pub fn pooled_effects(panel: &PanelDataset, rows: &[usize], covariates: &[&str]) -> Result<GroupEffects> {
    let idx = covariates
        .iter()
        .map(|name| {
            panel
                .covariate_names()
                .iter()
                .position(|c| c == name)
                .ok_or_else(|| Error::MissingColumn(String::from(*name)))
        })
        .collect::<Result<Vec<_>>>()?;
    let n_treated = rows.iter().filter(|&&i| panel.observations()[i].treated).count();
    let n_control = rows.len() - n_treated;
    if n_treated == 0 {
        return Err(Error::EmptyExitArm("treated"));
    }
    if n_control == 0 {
        return Err(Error::EmptyExitArm("control"));
    }
    let info = GroupInfo { g: 1, cohort: 0, entry_grade: 0, year: 0, n: rows.len(), n_treated, n_control };
    let method = if idx.is_empty() { EffectMethod::DifferenceInMeans } else { EffectMethod::PetersBelson };
    let effects = fit_cells(panel, &[info], &[rows.to_vec()], &idx, method)?;
    if effects.is_empty() {
        return Err(Error::NoGroups);
    }
    Ok(effects)
}
