//! Serializable reports and the human-readable table.

use std::fmt::Write as _;

use pwrd_core::covariance::{CovarianceEstimate, CovarianceVariant, DfRule};
use pwrd_core::effects::{EffectMethod, GroupEffects, TestInProportions};
use pwrd_core::mixed::MixedFit;
use pwrd_core::sim::Method;
use pwrd_core::weights::{AggregatedTest, AggregationWeights, Alternative, WeightScheme, WeightSolver};
use serde::{Deserialize, Serialize};

use crate::manifest::RunManifest;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRow {
    pub g: usize,
    pub cohort: i32,
    pub entry_grade: i32,
    pub year: u32,
    pub n: usize,
    pub delta_hat: f64,
    pub p0_hat: Option<f64>,
}

/// `{groups, method}` view of a [`GroupEffects`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectsJson {
    pub groups: Vec<GroupRow>,
    pub method: EffectMethod,
}

impl EffectsJson {
    pub fn new(effects: &GroupEffects, p0: Option<&TestInProportions>) -> Self {
        let groups = effects
            .groups
            .iter()
            .zip(&effects.estimates)
            .map(|(info, &d)| GroupRow {
                g: info.g,
                cohort: info.cohort,
                entry_grade: info.entry_grade,
                year: info.year,
                n: info.n,
                delta_hat: d,
                p0_hat: p0.and_then(|p| p.groups.iter().position(|h| h.key() == info.key()).map(|j| p.p_hat[j])),
            })
            .collect();
        Self { groups, method: effects.method }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovarianceJson {
    pub dim: usize,
    /// Row-major.
    pub matrix: Vec<f64>,
    pub variant: CovarianceVariant,
    pub df: f64,
    pub df_rule: DfRule,
    pub n_clusters: usize,
}

impl From<&CovarianceEstimate> for CovarianceJson {
    fn from(c: &CovarianceEstimate) -> Self {
        Self {
            dim: c.dim(),
            matrix: c.sigma_hat.as_slice().to_vec(),
            variant: c.variant,
            df: c.df,
            df_rule: c.df_rule,
            n_clusters: c.n_clusters,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixedJson {
    pub tau_hat: f64,
    pub se_model: f64,
    pub se_cr: f64,
    pub sigma2_eps: f64,
    pub sigma2_mu: f64,
    pub icc: f64,
    pub df: f64,
    pub warnings: Vec<String>,
}

impl From<&MixedFit> for MixedJson {
    fn from(f: &MixedFit) -> Self {
        Self {
            tau_hat: f.tau_hat,
            se_model: f.se_model,
            se_cr: f.se_cr,
            sigma2_eps: f.components.sigma2_eps,
            sigma2_mu: f.components.sigma2_mu,
            icc: f.components.icc,
            df: f.df,
            warnings: f.warnings.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestJson {
    pub estimate: f64,
    pub se: f64,
    pub t: f64,
    /// `None` when the reference distribution is the normal.
    pub df: Option<f64>,
    pub p: f64,
    pub alternative: Alternative,
}

impl From<&AggregatedTest> for TestJson {
    fn from(t: &AggregatedTest) -> Self {
        Self {
            estimate: t.estimate,
            se: t.se,
            t: t.t_stat,
            df: t.df.is_finite().then_some(t.df),
            p: t.p_value,
            alternative: t.alternative,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightsJson {
    pub omega: Vec<f64>,
    /// 1-based group ordinals.
    pub clipped_groups: Vec<usize>,
    pub slope: Option<f64>,
    pub test: TestJson,
    pub scheme: WeightScheme,
    pub solver: WeightSolver,
    /// Normalized `(Σ⁻¹p₀)₊`, present when it differs from `omega`.
    pub closed_form: Option<Vec<f64>>,
    pub ridge: Option<f64>,
}

impl WeightsJson {
    pub fn new(w: &AggregationWeights, slope: Option<f64>, test: &AggregatedTest) -> Self {
        Self {
            omega: w.omega.clone(),
            clipped_groups: w.clipped_groups.iter().map(|g| g + 1).collect(),
            slope,
            test: test.into(),
            scheme: w.scheme,
            solver: w.solver,
            closed_form: if w.closed_form_disagrees() { w.closed_form.clone() } else { None },
            ridge: w.ridge,
        }
    }
}

/// Per-group line of an analysis report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportGroup {
    pub g: usize,
    pub cohort: i32,
    pub entry_grade: i32,
    pub year: u32,
    pub n: usize,
    pub n_treated: usize,
    pub n_control: usize,
    pub delta_hat: f64,
    pub se: f64,
    pub p0_hat: Option<f64>,
    pub omega: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExcludedJson {
    pub g: usize,
    pub cohort: i32,
    pub entry_grade: i32,
    pub year: u32,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub method: Method,
    pub estimator: EffectMethod,
    pub n_observations: usize,
    pub n_clusters: usize,
    pub n_units: usize,
    pub groups: Vec<ReportGroup>,
    pub excluded_groups: Vec<ExcludedJson>,
    pub deleted_rows: Vec<usize>,
    pub test_in_source: crate::panel_csv::TestInSource,
    /// Denominator of p̂₀: control student-year rows.
    pub p0_denominator: String,
    pub covariance_variant: CovarianceVariant,
    pub df_rule: DfRule,
    pub weights: Option<WeightsJson>,
    pub slope: Option<f64>,
    pub test: TestJson,
    pub alpha: f64,
    pub reject: bool,
    pub mixed: Option<MixedJson>,
    pub warnings: Vec<String>,
    pub manifest: Option<RunManifest>,
}

fn cell(x: Option<f64>, digits: usize) -> String {
    match x {
        Some(v) if v.is_finite() => format!("{v:.digits$}"),
        Some(_) => "-".into(),
        None => "".into(),
    }
}

/// Fixed-width summary for terminals. Values are rounded for display only.
pub fn render_table(r: &AnalysisReport) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "method {}  estimator {}  clusters {}  rows {}",
        r.method.as_str(),
        match r.estimator {
            EffectMethod::DifferenceInMeans => "difference-in-means",
            EffectMethod::PetersBelson => "peters-belson",
        },
        r.n_clusters,
        r.n_observations
    );
    let _ = writeln!(
        s,
        "{:>3} {:>6} {:>5} {:>4} {:>6} {:>10} {:>9} {:>7} {:>7}",
        "g", "cohort", "entry", "year", "n", "delta_hat", "se", "p0_hat", "omega"
    );
    for g in &r.groups {
        let _ = writeln!(
            s,
            "{:>3} {:>6} {:>5} {:>4} {:>6} {:>10} {:>9} {:>7} {:>7}",
            g.g,
            g.cohort,
            g.entry_grade,
            g.year,
            g.n,
            cell(Some(g.delta_hat), 4),
            cell(Some(g.se), 4),
            cell(g.p0_hat, 3),
            cell(g.omega, 4),
        );
    }
    for e in &r.excluded_groups {
        let _ = writeln!(s, "excluded group {} (cohort {}, year {}): {}", e.g, e.cohort, e.year, e.reason);
    }
    if let Some(slope) = r.slope {
        let _ = writeln!(s, "slope {slope:.4}");
    }
    let t = &r.test;
    let df = t.df.map_or_else(|| "inf".to_string(), |d| format!("{d:.1}"));
    let _ = writeln!(
        s,
        "estimate {:.4}  se {:.4}  t {:.3}  df {}  p {:.4} ({})",
        t.estimate,
        t.se,
        t.t,
        df,
        t.p,
        match t.alternative {
            Alternative::Greater => "greater",
            Alternative::TwoSided => "two-sided",
        }
    );
    if let Some(m) = &r.mixed {
        let _ = writeln!(
            s,
            "mixed: se_model {:.4}  se_cr {:.4}  sigma2_eps {:.3}  sigma2_mu {:.3}  icc {:.4}",
            m.se_model, m.se_cr, m.sigma2_eps, m.sigma2_mu, m.icc
        );
    }
    for w in &r.warnings {
        let _ = writeln!(s, "warning: {w}");
    }
    s
}
