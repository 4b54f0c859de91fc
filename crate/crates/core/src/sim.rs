//! Synthetic longitudinal cluster-randomized trials and power estimation.
//!
//! Outcomes follow `Y = β₀ + β₁·grade + μ_cluster + ε`. A unit tests in the
//! first year its untreated outcome falls below its grade's cutoff and stays
//! flagged afterwards; treatment effects are then imposed on treated
//! clusters according to an [`EffectSpec`].
//!
//! Every random draw comes from a ChaCha stream keyed by
//! `(seed, replicate, stage)`, so replicates can run in any order or in
//! parallel and still give identical results.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::covariance::{cluster_covariance, small_sample_df, CovarianceOptions, DfRule};
use crate::dist::{normal_cdf, student_t_sf};
use crate::effects::{estimate_effects_diffmeans, estimate_p0, exit_observation_estimate, ExitRule};
use crate::error::{Error, Result};
use crate::mixed::{fit_random_intercept, MixedOptions};
use crate::panel::{Observation, PanelDataset, TestInRule};
use crate::weights::{aggregate_test_with_df, flat_weights, pwrd_weights, Alternative, PwrdOptions};

/// Control test-in proportions by years of participation used as the
/// default calibration target.
pub const DEFAULT_TEST_IN_PROFILE: [f64; 4] = [0.383, 0.543, 0.611, 0.694];

const STAGE_ASSIGNMENT: u64 = 0;
const STAGE_CLUSTER: u64 = 1;
const STAGE_RESIDUAL: u64 = 2;
const STAGE_EFFECT: u64 = 3;

/// Generator stream for one stage of one replicate.
pub fn stream(seed: u64, replicate: u64, stage: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&replicate.to_le_bytes());
    key[16..24].copy_from_slice(&stage.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

fn std_normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortSpec {
    pub cohort: i32,
    /// Study year in which the cohort's units are first observed.
    pub entry_study_year: u32,
    pub entry_grades: Vec<i32>,
    /// Units per entry grade per cluster.
    pub units_per_grade: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Assignment {
    /// Consecutive clusters form pairs; one per pair is treated.
    #[default]
    Pairs,
    /// `⌊C/2⌋` clusters treated completely at random.
    Complete,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    #[default]
    Null,
    Effect1,
    Effect2,
    Effect3,
}

impl Regime {
    pub fn as_str(self) -> &'static str {
        match self {
            Regime::Null => "null",
            Regime::Effect1 => "effect1",
            Regime::Effect2 => "effect2",
            Regime::Effect3 => "effect3",
        }
    }
}

/// How the second parameter of the effect-3 normal law is read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Effect3Spread {
    /// `τ ~ N(l, 2.5·l)` with 2.5·l the variance.
    #[default]
    Variance,
    /// 2.5·l is the standard deviation.
    StdDev,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EffectSpec {
    pub regime: Regime,
    #[serde(default)]
    pub tau: f64,
    /// Effect 2: unflagged treated rows receive `−p·τ`.
    #[serde(default)]
    pub spill_fraction: f64,
    /// Effect 3 mean.
    #[serde(default)]
    pub l: f64,
    #[serde(default)]
    pub effect3_spread: Effect3Spread,
    /// Start the effect the year after a unit first tests in.
    #[serde(default)]
    pub defer_one_year: bool,
}

impl EffectSpec {
    pub fn null() -> Self {
        Self::default()
    }

    pub fn effect1(tau: f64) -> Self {
        Self { regime: Regime::Effect1, tau, ..Self::default() }
    }

    pub fn effect2(tau: f64, p: f64) -> Self {
        Self { regime: Regime::Effect2, tau, spill_fraction: p, ..Self::default() }
    }

    pub fn effect3(l: f64) -> Self {
        Self { regime: Regime::Effect3, l, ..Self::default() }
    }

    /// The swept magnitude: `l` for effect 3, `τ` otherwise.
    pub fn level(&self) -> f64 {
        match self.regime {
            Regime::Null => 0.0,
            Regime::Effect3 => self.l,
            _ => self.tau,
        }
    }

    pub fn with_level(mut self, level: f64) -> Self {
        match self.regime {
            Regime::Null => {}
            Regime::Effect3 => self.l = level,
            _ => self.tau = level,
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(String::from(m)));
        match self.regime {
            Regime::Null => Ok(()),
            Regime::Effect1 if !(self.tau >= 0.0 && self.tau.is_finite()) => bad("tau must be finite and >= 0"),
            Regime::Effect2 if !(self.tau >= 0.0 && self.tau.is_finite()) => bad("tau must be finite and >= 0"),
            Regime::Effect2 if !(0.0..=1.0).contains(&self.spill_fraction) => bad("spill fraction must be in [0, 1]"),
            Regime::Effect3 if !(self.l >= 0.0 && self.l.is_finite()) => bad("l must be finite and >= 0"),
            _ => Ok(()),
        }
    }

    /// Whether the effect-2 mean shift `τ(p₀ − p(1 − p₀))` is positive when
    /// averaged over the given test-in proportions.
    pub fn aggregate_effect_positive(&self, p0: &[f64]) -> bool {
        if self.regime != Regime::Effect2 || p0.is_empty() {
            return true;
        }
        let mean = p0.iter().map(|p| p - self.spill_fraction * (1.0 - p)).sum::<f64>() / p0.len() as f64;
        mean * self.tau > 0.0 || self.tau == 0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub n_clusters: usize,
    #[serde(default)]
    pub assignment: Assignment,
    pub cohorts: Vec<CohortSpec>,
    pub study_years: u32,
    pub max_grade: i32,
    pub beta0: f64,
    pub beta1: f64,
    pub sigma2_eps: f64,
    pub sigma2_mu: f64,
    /// Cutoff by grade; a score strictly below it tests the unit in.
    pub test_in_thresholds: BTreeMap<i32, f64>,
    #[serde(default)]
    pub effect: EffectSpec,
    pub seed: u64,
}

impl Scenario {
    /// Four cohorts over four study years: the first enters at grades
    /// K through 3 with 9 units per grade, later ones at K in years 2 to 4
    /// with 18 units, giving 36 to 63 rows per cluster-year. Units are
    /// followed through grade 3 or the end of the study. Thresholds sit at
    /// the grade means until calibrated.
    pub fn default_design(icc: f64) -> Self {
        let total = 225.0;
        let mut cohorts =
            vec![CohortSpec { cohort: 1, entry_study_year: 1, entry_grades: vec![0, 1, 2, 3], units_per_grade: 9 }];
        for c in 2..=4 {
            cohorts.push(CohortSpec {
                cohort: c,
                entry_study_year: c as u32,
                entry_grades: vec![0],
                units_per_grade: 18,
            });
        }
        let beta0 = 100.0;
        let beta1 = 10.0;
        Self {
            n_clusters: 52,
            assignment: Assignment::Pairs,
            cohorts,
            study_years: 4,
            max_grade: 3,
            beta0,
            beta1,
            sigma2_eps: total * (1.0 - icc),
            sigma2_mu: total * icc,
            test_in_thresholds: (0..=3).map(|g| (g, beta0 + beta1 * g as f64)).collect(),
            effect: EffectSpec::null(),
            seed: 20_240_601,
        }
    }

    /// [`Scenario::default_design`] with thresholds calibrated to
    /// [`DEFAULT_TEST_IN_PROFILE`].
    pub fn calibrated_default(icc: f64) -> Result<Self> {
        let mut s = Self::default_design(icc);
        s.test_in_thresholds = calibrate_thresholds(&s, &DEFAULT_TEST_IN_PROFILE)?.thresholds;
        Ok(s)
    }

    pub fn icc(&self) -> f64 {
        let t = self.sigma2_eps + self.sigma2_mu;
        if t > 0.0 {
            self.sigma2_mu / t
        } else {
            0.0
        }
    }

    /// Splits the current total variance according to `icc`.
    pub fn set_icc(&mut self, icc: f64) {
        let t = self.sigma2_eps + self.sigma2_mu;
        self.sigma2_mu = t * icc;
        self.sigma2_eps = t * (1.0 - icc);
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        match self.assignment {
            Assignment::Pairs if self.n_clusters < 4 || self.n_clusters % 2 != 0 => {
                return bad(format!("paired design needs an even number of clusters >= 4, got {}", self.n_clusters))
            }
            Assignment::Complete if self.n_clusters < 4 => {
                return bad(format!("need at least 4 clusters, got {}", self.n_clusters))
            }
            _ => {}
        }
        if !(self.sigma2_eps >= 0.0 && self.sigma2_mu >= 0.0) || !(self.sigma2_eps + self.sigma2_mu).is_finite() {
            return bad(String::from("variances must be finite and >= 0"));
        }
        if !self.beta0.is_finite() || !self.beta1.is_finite() {
            return bad(String::from("fixed effects must be finite"));
        }
        if self.cohorts.iter().all(|c| c.units_per_grade == 0 || c.entry_grades.is_empty()) || self.study_years == 0 {
            return bad(String::from("design has no observations"));
        }
        for c in &self.cohorts {
            if c.entry_study_year == 0 || c.entry_study_year > self.study_years {
                return bad(format!("cohort {} enters outside the study window", c.cohort));
            }
        }
        for (g, t) in &self.test_in_thresholds {
            if t.is_nan() {
                return bad(format!("threshold for grade {g} is NaN"));
            }
        }
        for cell in self.cells() {
            for k in 1..=cell.years {
                let grade = cell.entry_grade + k as i32 - 1;
                if !self.test_in_thresholds.contains_key(&grade) {
                    return bad(format!("no test-in threshold for grade {grade}"));
                }
            }
        }
        self.effect.validate()
    }

    /// (cohort, entry grade, years observed) for every cohort × entry grade.
    fn cells(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        for c in &self.cohorts {
            for &e in &c.entry_grades {
                let by_grade = (self.max_grade - e + 1).max(0) as u32;
                let by_study = self.study_years + 1 - c.entry_study_year;
                let years = by_grade.min(by_study);
                if years > 0 && c.units_per_grade > 0 {
                    out.push(Cell { cohort: c.cohort, entry_grade: e, years, units: c.units_per_grade });
                }
            }
        }
        out
    }

    fn grade_mean(&self, grade: i32) -> f64 {
        self.beta0 + self.beta1 * grade as f64
    }
}

#[derive(Debug, Clone, Copy)]
struct Cell {
    cohort: i32,
    entry_grade: i32,
    years: u32,
    units: usize,
}

/// Treated indicator per cluster and pair labels (if paired).
fn assign(scenario: &Scenario, replicate: u64) -> (Vec<bool>, Vec<Option<usize>>) {
    let mut rng = stream(scenario.seed, replicate, STAGE_ASSIGNMENT);
    let c = scenario.n_clusters;
    match scenario.assignment {
        Assignment::Pairs => {
            let mut treated = vec![false; c];
            let mut blocks = vec![None; c];
            for pair in 0..c / 2 {
                let first = rng.next_u32() & 1 == 1;
                treated[2 * pair] = first;
                treated[2 * pair + 1] = !first;
                blocks[2 * pair] = Some(pair);
                blocks[2 * pair + 1] = Some(pair);
            }
            (treated, blocks)
        }
        Assignment::Complete => {
            let mut order: Vec<usize> = (0..c).collect();
            for i in (1..c).rev() {
                let j = (rng.next_u64() % (i as u64 + 1)) as usize;
                order.swap(i, j);
            }
            let mut treated = vec![false; c];
            for &k in &order[..c / 2] {
                treated[k] = true;
            }
            (treated, vec![None; c])
        }
    }
}

/// Draws one untreated panel with test-in flags.
pub fn generate_panel(scenario: &Scenario, replicate: u64) -> Result<PanelDataset> {
    scenario.validate()?;
    let (treated, blocks) = assign(scenario, replicate);
    let sd_mu = libm::sqrt(scenario.sigma2_mu);
    let sd_eps = libm::sqrt(scenario.sigma2_eps);
    let mut cluster_rng = stream(scenario.seed, replicate, STAGE_CLUSTER);
    let mu: Vec<f64> = (0..scenario.n_clusters).map(|_| sd_mu * std_normal(&mut cluster_rng)).collect();
    let mut eps_rng = stream(scenario.seed, replicate, STAGE_RESIDUAL);

    let cells = scenario.cells();
    let rows_per_cluster: usize = cells.iter().map(|c| c.years as usize * c.units).sum();
    let mut observations = Vec::with_capacity(rows_per_cluster * scenario.n_clusters);
    let mut unit_labels = Vec::new();
    for cluster in 0..scenario.n_clusters {
        for cell in &cells {
            for u in 0..cell.units {
                let unit = unit_labels.len();
                unit_labels.push(format!("s{cluster}-c{}-e{}-{u}", cell.cohort, cell.entry_grade));
                for k in 1..=cell.years {
                    let grade = cell.entry_grade + k as i32 - 1;
                    let outcome = scenario.grade_mean(grade) + mu[cluster] + sd_eps * std_normal(&mut eps_rng);
                    observations.push(Observation {
                        unit,
                        cluster,
                        block: blocks[cluster],
                        treated: treated[cluster],
                        cohort: cell.cohort,
                        grade,
                        year: k,
                        outcome,
                        tested_in: false,
                        covariates: Vec::new(),
                    });
                }
            }
        }
    }
    let scores: Vec<f64> = observations.iter().map(|o| o.outcome).collect();
    let rule = TestInRule { cutoffs: scenario.test_in_thresholds.clone(), defer_one_year: false };
    rule.apply(&mut observations, &scores, unit_labels.len())?;

    let cluster_labels = (0..scenario.n_clusters).map(|c| format!("s{c}")).collect();
    let block_labels = match scenario.assignment {
        Assignment::Pairs => (0..scenario.n_clusters / 2).map(|b| format!("p{b}")).collect(),
        Assignment::Complete => Vec::new(),
    };
    PanelDataset::from_parts(observations, unit_labels, cluster_labels, block_labels, Vec::new(), true)
}

/// Adds the treatment effect to treated clusters' outcomes.
pub fn apply_effect(panel: &PanelDataset, spec: &EffectSpec, seed: u64, replicate: u64) -> Result<PanelDataset> {
    spec.validate()?;
    let obs = panel.observations();
    let mut y: Vec<f64> = obs.iter().map(|o| o.outcome).collect();
    match spec.regime {
        Regime::Null => {}
        Regime::Effect1 | Regime::Effect2 => {
            if !panel.has_test_in() {
                return Err(Error::MissingTestIn);
            }
            if spec.tau == 0.0 {
                return Ok(panel.clone());
            }
            let receives = effect_rows(panel, spec.defer_one_year);
            let spill = -spec.spill_fraction * spec.tau;
            for (i, o) in obs.iter().enumerate() {
                if !o.treated {
                    continue;
                }
                if receives[i] {
                    y[i] += spec.tau;
                } else if spec.regime == Regime::Effect2 {
                    y[i] += spill;
                }
            }
        }
        Regime::Effect3 => {
            let sd = match spec.effect3_spread {
                Effect3Spread::Variance => libm::sqrt(2.5 * spec.l),
                Effect3Spread::StdDev => 2.5 * spec.l,
            };
            let mut rng = stream(seed, replicate, STAGE_EFFECT);
            for (i, o) in obs.iter().enumerate() {
                if o.treated {
                    y[i] += spec.l + sd * std_normal(&mut rng);
                }
            }
        }
    }
    panel.with_outcomes(&y)
}

/// Rows that receive the tested-in effect.
fn effect_rows(panel: &PanelDataset, defer: bool) -> Vec<bool> {
    let obs = panel.observations();
    if !defer {
        return obs.iter().map(|o| o.tested_in).collect();
    }
    let mut out = vec![false; obs.len()];
    for rows in panel.unit_histories() {
        let mut seen = false;
        for i in rows {
            if seen {
                out[i] = obs[i].tested_in;
            }
            seen |= obs[i].tested_in;
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Threshold calibration

/// Expected control test-in proportion by participation year under the
/// scenario's generator.
pub fn population_test_in_profile(scenario: &Scenario) -> Result<Vec<f64>> {
    let q = Quadrature::new(scenario.sigma2_mu);
    let cells = scenario.cells();
    let years = cells.iter().map(|c| c.years).max().unwrap_or(0);
    (1..=years).map(|k| year_proportion(scenario, &cells, &q, k)).collect()
}

/// Weighted nodes for `E[f(μ)]`, `μ ~ N(0, σ²)`.
struct Quadrature {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl Quadrature {
    fn new(sigma2: f64) -> Self {
        if sigma2 <= 0.0 {
            return Self { nodes: vec![0.0], weights: vec![1.0] };
        }
        // Composite Simpson on [−8, 8] against the normal density.
        const HALF_STEPS: usize = 100;
        let n = 2 * HALF_STEPS;
        let h = 16.0 / n as f64;
        let sd = libm::sqrt(sigma2);
        let mut nodes = Vec::with_capacity(n + 1);
        let mut weights = Vec::with_capacity(n + 1);
        for i in 0..=n {
            let z = -8.0 + i as f64 * h;
            let simpson = if i == 0 || i == n {
                1.0
            } else if i % 2 == 1 {
                4.0
            } else {
                2.0
            };
            let density = libm::exp(-0.5 * z * z) / libm::sqrt(2.0 * core::f64::consts::PI);
            nodes.push(sd * z);
            weights.push(simpson * h / 3.0 * density);
        }
        let total: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= total);
        Self { nodes, weights }
    }
}

fn year_proportion(scenario: &Scenario, cells: &[Cell], q: &Quadrature, k: u32) -> Result<f64> {
    let sd_eps = libm::sqrt(scenario.sigma2_eps);
    let mut total = 0.0;
    let mut count = 0usize;
    for cell in cells.iter().filter(|c| c.years >= k) {
        let mut never = 0.0;
        for (&mu, &w) in q.nodes.iter().zip(&q.weights) {
            let mut stay = 1.0;
            for s in 1..=k {
                let grade = cell.entry_grade + s as i32 - 1;
                let cutoff = *scenario
                    .test_in_thresholds
                    .get(&grade)
                    .ok_or_else(|| Error::InvalidArgument(format!("no test-in threshold for grade {grade}")))?;
                let margin = scenario.grade_mean(grade) + mu - cutoff;
                stay *= if sd_eps > 0.0 {
                    normal_cdf(margin / sd_eps)
                } else if margin >= 0.0 {
                    1.0
                } else {
                    0.0
                };
            }
            never += w * stay;
        }
        total += cell.units as f64 * (1.0 - never);
        count += cell.units;
    }
    if count == 0 {
        return Err(Error::InvalidArgument(format!("no observations in participation year {k}")));
    }
    Ok(total / count as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub thresholds: BTreeMap<i32, f64>,
    pub targets: Vec<f64>,
    pub achieved: Vec<f64>,
    pub sweeps: usize,
}

/// Per-grade cutoffs matching `targets` (one per participation year).
///
/// Participation year `k` is paired with the `k`-th lowest grade, whose
/// cutoff is bisected while the others are held fixed; sweeps repeat until
/// every year matches to 1e-10.
pub fn calibrate_thresholds(scenario: &Scenario, targets: &[f64]) -> Result<Calibration> {
    let mut s = scenario.clone();
    s.effect = EffectSpec::null();
    if !(s.sigma2_eps > 0.0) {
        return Err(Error::Calibration(String::from("residual variance must be positive")));
    }
    let cells = s.cells();
    let mut grades: Vec<i32> = Vec::new();
    for c in &cells {
        for k in 0..c.years as i32 {
            let g = c.entry_grade + k;
            if !grades.contains(&g) {
                grades.push(g);
            }
        }
    }
    grades.sort_unstable();
    let years = cells.iter().map(|c| c.years).max().unwrap_or(0) as usize;
    if targets.len() != grades.len() || targets.len() != years {
        return Err(Error::Dimension(format!(
            "{} targets for {} grades and {} participation years",
            targets.len(),
            grades.len(),
            years
        )));
    }
    if targets.iter().any(|t| !(*t > 0.0 && *t < 1.0)) {
        return Err(Error::InvalidArgument(String::from("targets must lie in (0, 1)")));
    }
    let q = Quadrature::new(s.sigma2_mu);
    let spread = 12.0 * libm::sqrt(s.sigma2_eps + s.sigma2_mu);
    for &g in &grades {
        let mean = s.grade_mean(g);
        s.test_in_thresholds.entry(g).or_insert(mean);
    }

    const MAX_SWEEPS: usize = 500;
    for sweep in 1..=MAX_SWEEPS {
        for (j, &g) in grades.iter().enumerate() {
            let k = j as u32 + 1;
            let (mut lo, mut hi) = (s.grade_mean(g) - spread, s.grade_mean(g) + spread);
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if mid == lo || mid == hi {
                    break;
                }
                s.test_in_thresholds.insert(g, mid);
                if year_proportion(&s, &cells, &q, k)? < targets[j] {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            s.test_in_thresholds.insert(g, 0.5 * (lo + hi));
        }
        let achieved = (1..=years as u32).map(|k| year_proportion(&s, &cells, &q, k)).collect::<Result<Vec<_>>>()?;
        let worst = achieved.iter().zip(targets).map(|(a, t)| (a - t).abs()).fold(0.0, f64::max);
        if worst < 1e-10 {
            return Ok(Calibration {
                thresholds: s.test_in_thresholds,
                targets: targets.to_vec(),
                achieved,
                sweeps: sweep,
            });
        }
    }
    Err(Error::Calibration(format!("no convergence after {MAX_SWEEPS} sweeps")))
}

/// Control test-in proportions by participation year in a panel.
pub fn empirical_test_in_profile(panel: &PanelDataset) -> Vec<f64> {
    let mut flagged: BTreeMap<u32, (usize, usize)> = BTreeMap::new();
    for o in panel.observations().iter().filter(|o| !o.treated) {
        let e = flagged.entry(o.year).or_insert((0, 0));
        e.0 += usize::from(o.tested_in);
        e.1 += 1;
    }
    flagged.values().map(|&(f, n)| f as f64 / n as f64).collect()
}

// ---------------------------------------------------------------------------
// Replicate analysis

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Pwrd,
    Flat,
    Mixed,
    Exit,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Pwrd, Method::Flat, Method::Mixed, Method::Exit];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Pwrd => "pwrd",
            Method::Flat => "flat",
            Method::Mixed => "mixed",
            Method::Exit => "exit",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisConfig {
    pub alpha: f64,
    pub alternative: Alternative,
    pub covariance: CovarianceOptions,
    pub df_rule: DfRule,
    pub ridge: bool,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            alpha: 0.05,
            alternative: Alternative::Greater,
            covariance: CovarianceOptions::default(),
            df_rule: DfRule::ClustersMinus2,
            ridge: false,
        }
    }
}

/// Estimate, standard error and reference distribution of one method's test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MethodTest {
    pub estimate: f64,
    pub se: f64,
    pub t_stat: f64,
    pub df: f64,
    pub p_value: f64,
}

fn p_value(t: f64, df: f64, alternative: Alternative) -> f64 {
    match alternative {
        Alternative::Greater => student_t_sf(t, df),
        Alternative::TwoSided => (2.0 * student_t_sf(t.abs(), df)).min(1.0),
    }
}

/// Runs each method's full pipeline on one panel.
pub fn analyze_panel(panel: &PanelDataset, methods: &[Method], config: &AnalysisConfig) -> Vec<Result<MethodTest>> {
    let needs_groups = methods.iter().any(|m| matches!(m, Method::Pwrd | Method::Flat));
    let grouped = if needs_groups {
        estimate_effects_diffmeans(panel).and_then(|e| {
            let cov = cluster_covariance(panel, &e, &config.covariance)?;
            Ok((e, cov))
        })
    } else {
        Err(Error::NoGroups)
    };
    methods
        .iter()
        .map(|&m| match m {
            Method::Pwrd | Method::Flat => {
                let (effects, cov) = grouped.as_ref().map_err(Clone::clone)?;
                let omega = if m == Method::Pwrd {
                    let p0 = estimate_p0(panel)?.aligned_to(effects)?;
                    pwrd_weights(&cov.sigma_hat, &p0, PwrdOptions { ridge: config.ridge })?.omega
                } else {
                    flat_weights(&effects.counts())?.omega
                };
                let df = match config.df_rule {
                    DfRule::ClustersMinus2 => cov.df,
                    DfRule::Satterthwaite => small_sample_df(panel, effects, &config.covariance, &omega)?,
                };
                let t = aggregate_test_with_df(&effects.estimates, cov, &omega, None, config.alternative, df)?;
                Ok(MethodTest { estimate: t.estimate, se: t.se, t_stat: t.t_stat, df: t.df, p_value: t.p_value })
            }
            Method::Mixed => {
                let fit =
                    fit_random_intercept(panel, &MixedOptions { grade_fixed_effect: true, covariates: Vec::new() })?;
                if !(fit.df > 0.0) {
                    return Err(Error::NonPositiveDf(fit.df));
                }
                if !(fit.se_cr > 0.0) {
                    return Err(Error::NonPositiveVariance(fit.se_cr));
                }
                let t = fit.tau_hat / fit.se_cr;
                Ok(MethodTest {
                    estimate: fit.tau_hat,
                    se: fit.se_cr,
                    t_stat: t,
                    df: fit.df,
                    p_value: p_value(t, fit.df, config.alternative),
                })
            }
            Method::Exit => {
                let e = exit_observation_estimate(panel, ExitRule::LastYear, &[], &config.covariance)?;
                if !(e.df > 0.0) {
                    return Err(Error::NonPositiveDf(e.df));
                }
                if !(e.se > 0.0) {
                    return Err(Error::NonPositiveVariance(e.se));
                }
                let t = e.estimate / e.se;
                Ok(MethodTest {
                    estimate: e.estimate,
                    se: e.se,
                    t_stat: t,
                    df: e.df,
                    p_value: p_value(t, e.df, config.alternative),
                })
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Power

/// Executes `n` independent replicate jobs and returns results in index order.
pub trait ReplicateRunner {
    fn run<R, F>(&self, n: usize, job: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync + Send;
}

/// Runs replicates one after another.
#[derive(Debug, Clone, Copy, Default)]
pub struct Sequential;

impl ReplicateRunner for Sequential {
    fn run<R, F>(&self, n: usize, job: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync + Send,
    {
        (0..n).map(job).collect()
    }
}

/// One simulation setting: a scenario and the effects applied to each of
/// its replicate panels.
#[derive(Debug, Clone, PartialEq)]
pub struct Setting {
    pub scenario: Scenario,
    pub effects: Vec<EffectSpec>,
}

/// Rejections per effect, per method, for one replicate. `None` marks an
/// estimation failure.
pub type ReplicateOutcome = Vec<Vec<Option<bool>>>;

/// Generates replicate `rep` once and analyzes it under every effect.
pub fn run_replicate(setting: &Setting, methods: &[Method], config: &AnalysisConfig, rep: u64) -> ReplicateOutcome {
    let base = match generate_panel(&setting.scenario, rep) {
        Ok(p) => p,
        Err(_) => return vec![vec![None; methods.len()]; setting.effects.len()],
    };
    setting
        .effects
        .iter()
        .map(|spec| match apply_effect(&base, spec, setting.scenario.seed, rep) {
            Ok(panel) => analyze_panel(&panel, methods, config)
                .into_iter()
                .map(|r| r.ok().map(|t| t.p_value < config.alpha))
                .collect(),
            Err(_) => vec![None; methods.len()],
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerRow {
    pub method: Method,
    pub regime: Regime,
    pub effect_level: f64,
    pub icc: f64,
    pub p_spill: f64,
    pub power: f64,
    pub mc_se: f64,
    /// Replicates that produced a test.
    pub n_reps: usize,
    pub n_excluded: usize,
    pub alpha: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PowerResult {
    pub rows: Vec<PowerRow>,
}

impl PowerResult {
    pub fn get(&self, method: Method, level: f64) -> Option<&PowerRow> {
        self.rows.iter().find(|r| r.method == method && r.effect_level == level)
    }

    pub fn power(&self, method: Method, level: f64) -> Option<f64> {
        self.get(method, level).map(|r| r.power)
    }
}

/// Largest tolerated share of failed replicates.
pub const MAX_EXCLUDED_SHARE: f64 = 0.02;

/// Rejection rates with Monte Carlo errors, replicates folded in index order.
pub fn summarize(
    setting: &Setting,
    methods: &[Method],
    config: &AnalysisConfig,
    outcomes: &[ReplicateOutcome],
) -> Result<Vec<PowerRow>> {
    let mut rows = Vec::new();
    for (e, spec) in setting.effects.iter().enumerate() {
        for (m, &method) in methods.iter().enumerate() {
            let mut rejected = 0usize;
            let mut used = 0usize;
            for o in outcomes {
                if let Some(r) = o[e][m] {
                    used += 1;
                    rejected += usize::from(r);
                }
            }
            let excluded = outcomes.len() - used;
            if excluded as f64 > MAX_EXCLUDED_SHARE * outcomes.len() as f64 || used == 0 {
                return Err(Error::TooManyExclusions {
                    method: String::from(method.as_str()),
                    excluded,
                    reps: outcomes.len(),
                });
            }
            let power = rejected as f64 / used as f64;
            rows.push(PowerRow {
                method,
                regime: spec.regime,
                effect_level: spec.level(),
                icc: setting.scenario.icc(),
                p_spill: if spec.regime == Regime::Effect2 { spec.spill_fraction } else { 0.0 },
                power,
                mc_se: libm::sqrt(power * (1.0 - power) / used as f64),
                n_reps: used,
                n_excluded: excluded,
                alpha: config.alpha,
                seed: setting.scenario.seed,
            });
        }
    }
    Ok(rows)
}

/// Power over the given settings.
pub fn run_settings<E: ReplicateRunner>(
    runner: &E,
    settings: &[Setting],
    methods: &[Method],
    n_reps: usize,
    config: &AnalysisConfig,
) -> Result<PowerResult> {
    if n_reps < 100 {
        return Err(Error::InvalidArgument(format!("need at least 100 replicates, got {n_reps}")));
    }
    if !(config.alpha > 0.0 && config.alpha < 1.0) {
        return Err(Error::InvalidArgument(String::from("alpha must lie in (0, 1)")));
    }
    let mut rows = Vec::new();
    for setting in settings {
        setting.scenario.validate()?;
        for spec in &setting.effects {
            spec.validate()?;
        }
        let outcomes = runner.run(n_reps, |rep| run_replicate(setting, methods, config, rep as u64));
        rows.extend(summarize(setting, methods, config, &outcomes)?);
    }
    Ok(PowerResult { rows })
}

/// Power at each effect level of the scenario's regime.
pub fn estimate_power<E: ReplicateRunner>(
    runner: &E,
    scenario: &Scenario,
    methods: &[Method],
    effect_grid: &[f64],
    n_reps: usize,
    config: &AnalysisConfig,
) -> Result<PowerResult> {
    let effects = effect_grid.iter().map(|&x| scenario.effect.with_level(x)).collect();
    run_settings(runner, &[Setting { scenario: scenario.clone(), effects }], methods, n_reps, config)
}

/// Power across intraclass correlations at total variance fixed. With
/// `recalibrate`, thresholds are re-fitted at each ICC so the control
/// test-in profile stays at `targets`.
#[allow(clippy::too_many_arguments)]
pub fn icc_sweep<E: ReplicateRunner>(
    runner: &E,
    template: &Scenario,
    icc_grid: &[f64],
    effect: EffectSpec,
    recalibrate: Option<&[f64]>,
    methods: &[Method],
    n_reps: usize,
    config: &AnalysisConfig,
) -> Result<PowerResult> {
    let mut settings = Vec::with_capacity(icc_grid.len());
    for &icc in icc_grid {
        if !(0.0..0.5).contains(&icc) {
            return Err(Error::InvalidArgument(format!("icc {icc} outside [0, 0.5)")));
        }
        let mut s = template.clone();
        s.set_icc(icc);
        if let Some(targets) = recalibrate {
            s.test_in_thresholds = calibrate_thresholds(&s, targets)?.thresholds;
        }
        settings.push(Setting { scenario: s, effects: vec![effect] });
    }
    run_settings(runner, &settings, methods, n_reps, config)
}

/// Effect-2 power across spillover fractions at fixed `τ`.
pub fn negative_effect_sweep<E: ReplicateRunner>(
    runner: &E,
    scenario: &Scenario,
    tau: f64,
    p_grid: &[f64],
    methods: &[Method],
    n_reps: usize,
    config: &AnalysisConfig,
) -> Result<PowerResult> {
    let effects = p_grid.iter().map(|&p| EffectSpec::effect2(tau, p)).collect();
    run_settings(runner, &[Setting { scenario: scenario.clone(), effects }], methods, n_reps, config)
}
