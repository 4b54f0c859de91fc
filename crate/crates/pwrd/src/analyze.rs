//! Panel analysis and external-summary aggregation behind the `analyze`
//! and `weights` subcommands.

use pwrd_core::covariance::{cluster_covariance, small_sample_df, CovarianceEstimate, CovarianceOptions, DfRule};
use pwrd_core::dist::student_t_sf;
use pwrd_core::effects::{
    estimate_effects_diffmeans, estimate_effects_peters_belson, estimate_p0, exit_observation_estimate, EffectMethod,
    ExitRule,
};
use pwrd_core::linalg::Matrix;
use pwrd_core::mixed::{fit_random_intercept, MixedOptions};
use pwrd_core::sim::Method;
use pwrd_core::weights::{
    aggregate_external, aggregate_test_with_df, flat_weights, pwrd_weights, test_slope, AggregatedTest, Alternative,
    PwrdOptions,
};
use serde::{Deserialize, Serialize};

use crate::panel_csv::Ingested;
use crate::report::{AnalysisReport, ExcludedJson, MixedJson, ReportGroup, WeightsJson};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyzeOptions {
    pub method: Method,
    pub estimator: EffectMethod,
    /// Covariates for Peters-Belson, the exit estimate and the mixed model.
    pub covariates: Vec<String>,
    pub alpha: f64,
    pub alternative: Alternative,
    pub covariance: CovarianceOptions,
    pub df_rule: DfRule,
    pub ridge: bool,
}

impl Default for AnalyzeOptions {
    fn default() -> Self {
        Self {
            method: Method::Pwrd,
            estimator: EffectMethod::DifferenceInMeans,
            covariates: Vec::new(),
            alpha: 0.05,
            alternative: Alternative::Greater,
            covariance: CovarianceOptions::default(),
            df_rule: DfRule::ClustersMinus2,
            ridge: false,
        }
    }
}

fn t_test(estimate: f64, se: f64, df: f64, alternative: Alternative) -> Result<AggregatedTest> {
    if !(df > 0.0) {
        return Err(pwrd_core::Error::NonPositiveDf(df).into());
    }
    if !(se > 0.0 && se.is_finite()) {
        return Err(pwrd_core::Error::NonPositiveVariance(se * se).into());
    }
    let t_stat = estimate / se;
    let p_value = match alternative {
        Alternative::Greater => student_t_sf(t_stat, df),
        Alternative::TwoSided => (2.0 * student_t_sf(t_stat.abs(), df)).min(1.0),
    };
    Ok(AggregatedTest { estimate, null_value: 0.0, se, t_stat, df, p_value, alternative })
}

pub fn analyze(input: &Ingested, opts: &AnalyzeOptions) -> Result<AnalysisReport> {
    if !(opts.alpha > 0.0 && opts.alpha < 1.0) {
        return Err(Error::Input(format!("alpha must lie in (0, 1), got {}", opts.alpha)));
    }
    let panel = &input.panel;
    let cov_names: Vec<&str> = opts.covariates.iter().map(String::as_str).collect();
    let mut warnings = Vec::new();
    if !input.deleted_rows.is_empty() {
        warnings.push(format!("{} row(s) with a missing outcome were deleted", input.deleted_rows.len()));
    }

    let effects = match opts.estimator {
        EffectMethod::DifferenceInMeans => estimate_effects_diffmeans(panel)?,
        EffectMethod::PetersBelson => estimate_effects_peters_belson(panel, &cov_names)?,
    };
    let cov = cluster_covariance(panel, &effects, &opts.covariance)?;
    let p0 = if panel.has_test_in() { Some(estimate_p0(panel)?) } else { None };
    let p0_aligned = p0.as_ref().map(|p| p.aligned_to(&effects)).transpose()?;

    let mut omega: Option<Vec<f64>> = None;
    let mut weights_json = None;
    let mut slope = None;
    let mut mixed = None;
    let mut df_rule = DfRule::ClustersMinus2;

    let test = match opts.method {
        Method::Pwrd | Method::Flat => {
            let w = if opts.method == Method::Pwrd {
                let p = p0_aligned.as_ref().ok_or(pwrd_core::Error::MissingTestIn)?;
                pwrd_weights(&cov.sigma_hat, p, PwrdOptions { ridge: opts.ridge })?
            } else {
                flat_weights(&effects.counts())?
            };
            if w.closed_form_disagrees() {
                warnings.push(
                    "clipped closed form failed the first-order check; the active-set optimum is reported".into(),
                );
            }
            let df = match opts.df_rule {
                DfRule::ClustersMinus2 => cov.df,
                DfRule::Satterthwaite => {
                    df_rule = DfRule::Satterthwaite;
                    small_sample_df(panel, &effects, &opts.covariance, &w.omega)?
                }
            };
            let t = aggregate_test_with_df(&effects.estimates, &cov, &w.omega, None, opts.alternative, df)?;
            slope = p0_aligned.as_ref().map(|p| test_slope(&w.omega, p, &cov.sigma_hat)).transpose()?;
            weights_json = Some(WeightsJson::new(&w, slope, &t));
            omega = Some(w.omega);
            t
        }
        Method::Exit => {
            let e = exit_observation_estimate(panel, ExitRule::LastYear, &cov_names, &opts.covariance)?;
            t_test(e.estimate, e.se, e.df, opts.alternative)?
        }
        Method::Mixed => {
            let fit = fit_random_intercept(
                panel,
                &MixedOptions { grade_fixed_effect: true, covariates: opts.covariates.clone() },
            )?;
            warnings.extend(fit.warnings.iter().cloned());
            let t = t_test(fit.tau_hat, fit.se_cr, fit.df, opts.alternative)?;
            mixed = Some(MixedJson::from(&fit));
            t
        }
    };
    if opts.df_rule == DfRule::Satterthwaite && df_rule != DfRule::Satterthwaite {
        warnings.push("Satterthwaite df applies to weighted group contrasts; clusters - 2 used".into());
    }

    let groups = effects
        .groups
        .iter()
        .enumerate()
        .map(|(j, info)| ReportGroup {
            g: info.g,
            cohort: info.cohort,
            entry_grade: info.entry_grade,
            year: info.year,
            n: info.n,
            n_treated: info.n_treated,
            n_control: info.n_control,
            delta_hat: effects.estimates[j],
            se: cov.sigma_hat[(j, j)].sqrt(),
            p0_hat: p0_aligned.as_ref().map(|p| p[j]),
            omega: omega.as_ref().map(|w| w[j]),
        })
        .collect();
    let excluded_groups = effects
        .excluded
        .iter()
        .map(|e| ExcludedJson {
            g: e.group.g,
            cohort: e.group.cohort,
            entry_grade: e.group.entry_grade,
            year: e.group.year,
            reason: e.reason.clone(),
        })
        .collect();

    Ok(AnalysisReport {
        method: opts.method,
        estimator: effects.method,
        n_observations: panel.len(),
        n_clusters: panel.n_clusters(),
        n_units: panel.n_units(),
        groups,
        excluded_groups,
        deleted_rows: input.deleted_rows.clone(),
        test_in_source: input.test_in_source,
        p0_denominator: "student-year".into(),
        covariance_variant: cov.variant,
        df_rule,
        weights: weights_json,
        slope,
        reject: test.p_value < opts.alpha,
        test: (&test).into(),
        alpha: opts.alpha,
        mixed,
        warnings,
        manifest: None,
    })
}

/// Externally estimated group effects: `cov` or `se` must be given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExternalSummary {
    pub delta_hat: Vec<f64>,
    #[serde(default)]
    pub cov: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub se: Option<Vec<f64>>,
    pub p0: Vec<f64>,
    #[serde(default)]
    pub delta0: Option<Vec<f64>>,
    /// Reference t degrees of freedom; the normal when absent.
    #[serde(default)]
    pub df: Option<f64>,
}

impl ExternalSummary {
    pub fn covariance(&self) -> Result<CovarianceEstimate> {
        let df = self.df.unwrap_or(f64::INFINITY);
        match (&self.cov, &self.se) {
            (Some(c), None) => Ok(CovarianceEstimate::supplied(Matrix::from_rows(c)?, df)?),
            (None, Some(se)) => Ok(CovarianceEstimate::from_standard_errors(se, df)?),
            _ => Err(Error::Input("give exactly one of `cov` and `se`".into())),
        }
    }
}

pub fn weights_external(input: &ExternalSummary, alternative: Alternative, ridge: bool) -> Result<WeightsJson> {
    let cov = input.covariance()?;
    let (test, w) = aggregate_external(
        &input.delta_hat,
        &cov,
        &input.p0,
        input.delta0.as_deref(),
        alternative,
        PwrdOptions { ridge },
    )?;
    let slope = test_slope(&w.omega, &input.p0, &cov.sigma_hat)?;
    Ok(WeightsJson::new(&w, Some(slope), &test))
}
