//! Cluster-robust covariance of the group effect vector.
//!
//! Each group estimate is linear in the outcomes, `Δ̂_g = Σ_i a_i y_i`, so
//! the sandwich reduces to summing per-cluster score vectors
//! `s_c[g] = Σ_{i ∈ c, g} a_i ẽ_i` and forming `Σ_c s_c s_c'`. The CR2
//! variant replaces the residuals `e` of each cluster-by-group block by
//! `(I − L)^{-1/2} e`, where `L` is that block of the hat matrix.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::effects::GroupEffects;
use crate::error::{Error, Result};
use crate::linalg::{dot, Matrix};
use crate::panel::PanelDataset;

/// Eigenvalue floor used when inverting leverage adjustments.
pub const LEVERAGE_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum CovarianceVariant {
    #[serde(rename = "CR0")]
    Cr0,
    #[default]
    #[serde(rename = "CR2")]
    Cr2,
    /// Matrix supplied by the caller.
    #[serde(rename = "supplied")]
    Supplied,
}

/// Where treated-arm residuals are centered.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ResidualCentering {
    /// Each arm around its own fitted mean.
    #[default]
    BothArms,
    /// Treated rows around the control-arm prediction.
    ControlOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DfRule {
    #[default]
    ClustersMinus2,
    Satterthwaite,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CovarianceOptions {
    pub variant: CovarianceVariant,
    pub centering: ResidualCentering,
}

impl CovarianceOptions {
    pub fn cr0() -> Self {
        Self { variant: CovarianceVariant::Cr0, ..Self::default() }
    }

    pub fn cr2() -> Self {
        Self { variant: CovarianceVariant::Cr2, ..Self::default() }
    }
}

/// Estimated covariance of Δ̂ (outcome units squared).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovarianceEstimate {
    pub sigma_hat: Matrix,
    pub variant: CovarianceVariant,
    pub n_clusters: usize,
    pub df: f64,
    pub df_rule: DfRule,
}

impl CovarianceEstimate {
    /// Wraps a caller-supplied covariance matrix.
    pub fn supplied(sigma_hat: Matrix, df: f64) -> Result<Self> {
        if !sigma_hat.is_square() {
            return Err(Error::Dimension("covariance must be square".into()));
        }
        Ok(Self { sigma_hat, variant: CovarianceVariant::Supplied, n_clusters: 0, df, df_rule: DfRule::ClustersMinus2 })
    }

    /// Diagonal covariance from standard errors.
    pub fn from_standard_errors(se: &[f64], df: f64) -> Result<Self> {
        if se.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::InvalidArgument("standard errors must be positive".into()));
        }
        let d: Vec<f64> = se.iter().map(|s| s * s).collect();
        Self::supplied(Matrix::from_diag(&d), df)
    }

    pub fn dim(&self) -> usize {
        self.sigma_hat.rows()
    }

    /// Variance of the contrast ω'Δ̂.
    pub fn contrast_variance(&self, weights: &[f64]) -> f64 {
        self.sigma_hat.quad_form(weights)
    }
}

/// Per-row ingredients of the sandwich.
#[derive(Debug, Clone, Copy)]
struct RowScore {
    row: usize,
    cluster: usize,
    group: usize,
    treated: bool,
    influence: f64,
    residual: f64,
}

struct Blocks {
    scores: Vec<RowScore>,
    /// Half-open ranges into `scores`, one per (cluster, group) block, in
    /// cluster-then-group order.
    ranges: Vec<(usize, usize)>,
    n_clusters_used: usize,
}

fn collect_blocks(panel: &PanelDataset, effects: &GroupEffects, options: &CovarianceOptions) -> Result<Blocks> {
    if effects.is_empty() {
        return Err(Error::NoGroups);
    }
    if effects.assignment.len() != panel.len() {
        return Err(Error::Dimension("effects were not computed from this panel".into()));
    }
    let control_centered = options.centering == ResidualCentering::ControlOnly;
    let obs = panel.observations();
    let mut scores: Vec<RowScore> = (0..panel.len())
        .filter_map(|i| {
            effects.score(panel, i, control_centered).map(|(g, a, e)| RowScore {
                row: i,
                cluster: obs[i].cluster,
                group: g,
                treated: obs[i].treated,
                influence: a,
                residual: e,
            })
        })
        .collect();
    // Clusters are visited in order of first appearance in the panel so the
    // reduction order does not depend on cluster labels.
    let mut first_row = vec![usize::MAX; panel.n_clusters()];
    for (i, o) in obs.iter().enumerate().rev() {
        first_row[o.cluster] = i;
    }
    scores.sort_by_key(|s| (first_row[s.cluster], s.group, s.row));

    let mut ranges = Vec::new();
    let mut start = 0;
    let mut clusters_used = 0;
    for i in 1..=scores.len() {
        if i == scores.len() || (scores[i].cluster, scores[i].group) != (scores[start].cluster, scores[start].group) {
            if start == 0 || scores[start].cluster != scores[start - 1].cluster {
                clusters_used += 1;
            }
            ranges.push((start, i));
            start = i;
        }
    }
    if clusters_used < 2 {
        return Err(Error::TooFewClusters { needed: 2, found: clusters_used });
    }
    Ok(Blocks { scores, ranges, n_clusters_used: clusters_used })
}

/// Size of the cell (group × arm) a block belongs to.
fn cell_size(effects: &GroupEffects, group: usize, treated: bool) -> f64 {
    let fit = &effects.fits[group];
    if treated {
        fit.n_treated as f64
    } else {
        fit.n_control as f64
    }
}

/// Applies the CR2 adjustment `(I − L)^{-1/2}` to `v` for one block.
fn adjust_block(panel: &PanelDataset, effects: &GroupEffects, block: &[RowScore], v: &mut [f64]) -> Result<()> {
    let first = block[0];
    let m = block.len();
    let n_cell = cell_size(effects, first.group, first.treated);
    let has_slopes = !first.treated && !effects.covariates.is_empty();
    if !has_slopes {
        // L = J/n: eigenvalue 1 − m/n along the constant vector, 1 elsewhere.
        let lambda = (1.0 - m as f64 / n_cell).max(LEVERAGE_FLOOR);
        let shift = (1.0 / libm::sqrt(lambda) - 1.0) * (v.iter().sum::<f64>() / m as f64);
        for x in v.iter_mut() {
            *x += shift;
        }
        return Ok(());
    }
    let gram_inv = &effects.fits[first.group].gram_inv;
    let designs: Vec<Vec<f64>> =
        block.iter().map(|s| effects.leverage_design(panel, s.row).unwrap_or_default()).collect();
    let mut i_minus_l = Matrix::identity(m);
    for a in 0..m {
        let ga = gram_inv.mul_vec(&designs[a]);
        for b in 0..m {
            i_minus_l[(a, b)] -= 1.0 / n_cell + dot(&ga, &designs[b]);
        }
    }
    let adj = i_minus_l.inv_sqrt_sym(LEVERAGE_FLOOR)?;
    let out = adj.mul_vec(v);
    v.copy_from_slice(&out);
    Ok(())
}

/// Cluster-robust covariance of the effect vector.
pub fn cluster_covariance(
    panel: &PanelDataset,
    effects: &GroupEffects,
    options: &CovarianceOptions,
) -> Result<CovarianceEstimate> {
    let blocks = collect_blocks(panel, effects, options)?;
    let g_dim = effects.len();
    let mut sigma = Matrix::zeros(g_dim, g_dim);
    let mut score = vec![0.0; g_dim];
    let mut residuals = Vec::new();
    let mut current_cluster = blocks.scores[0].cluster;

    for &(lo, hi) in &blocks.ranges {
        let block = &blocks.scores[lo..hi];
        if block[0].cluster != current_cluster {
            sigma.add_outer(&score, 1.0);
            score.iter_mut().for_each(|s| *s = 0.0);
            current_cluster = block[0].cluster;
        }
        residuals.clear();
        residuals.extend(block.iter().map(|s| s.residual));
        if options.variant == CovarianceVariant::Cr2 {
            adjust_block(panel, effects, block, &mut residuals)?;
        }
        score[block[0].group] += block.iter().zip(&residuals).map(|(s, e)| s.influence * e).sum::<f64>();
    }
    sigma.add_outer(&score, 1.0);
    sigma.symmetrize();

    let n_clusters = blocks.n_clusters_used;
    Ok(CovarianceEstimate {
        sigma_hat: sigma,
        variant: options.variant,
        n_clusters,
        df: n_clusters as f64 - 2.0,
        df_rule: DfRule::ClustersMinus2,
    })
}

/// Satterthwaite degrees of freedom for the contrast `weights'Δ̂` under a
/// working model of independent, homoskedastic errors. Falls back to
/// `n_clusters − 2` when the ratio is not finite and positive.
pub fn small_sample_df(
    panel: &PanelDataset,
    effects: &GroupEffects,
    options: &CovarianceOptions,
    weights: &[f64],
) -> Result<f64> {
    if weights.len() != effects.len() {
        return Err(Error::Dimension("weights length differs from number of groups".into()));
    }
    let blocks = collect_blocks(panel, effects, options)?;
    let fallback = blocks.n_clusters_used as f64 - 2.0;

    // Dense relabeling of the clusters that carry rows.
    let mut cluster_slot = vec![usize::MAX; panel.n_clusters()];
    let mut n_c = 0;
    for s in &blocks.scores {
        if cluster_slot[s.cluster] == usize::MAX {
            cluster_slot[s.cluster] = n_c;
            n_c += 1;
        }
    }
    let g_dim = effects.len();
    let k = effects.covariates.len();

    // Per (cluster, group): u = B w, then sums and design projections.
    let mut sq = vec![0.0; n_c];
    let mut sums = vec![vec![0.0; n_c]; g_dim];
    let mut proj = vec![vec![vec![0.0; k]; n_c]; g_dim];
    for &(lo, hi) in &blocks.ranges {
        let block = &blocks.scores[lo..hi];
        let first = block[0];
        let c = cluster_slot[first.cluster];
        let mut u: Vec<f64> = block.iter().map(|s| weights[s.group] * s.influence).collect();
        if options.variant == CovarianceVariant::Cr2 {
            adjust_block(panel, effects, block, &mut u)?;
        }
        sq[c] += dot(&u, &u);
        sums[first.group][c] = u.iter().sum();
        if !first.treated && k > 0 {
            let mut v = vec![0.0; k];
            for (s, ui) in block.iter().zip(&u) {
                let x = effects.leverage_design(panel, s.row).unwrap_or_default();
                for (vj, xj) in v.iter_mut().zip(&x) {
                    *vj += xj * ui;
                }
            }
            proj[first.group][c] = v;
        }
    }

    let mut arm = vec![false; n_c];
    for s in &blocks.scores {
        arm[cluster_slot[s.cluster]] = s.treated;
    }
    let mut omega = Matrix::from_diag(&sq);
    for g in 0..g_dim {
        let gram_inv = &effects.fits[g].gram_inv;
        for a in 0..n_c {
            for b in 0..n_c {
                if arm[a] != arm[b] {
                    continue;
                }
                let n_cell = cell_size(effects, g, arm[a]);
                let mut h = sums[g][a] * sums[g][b] / n_cell;
                if !arm[a] && k > 0 {
                    h += dot(&proj[g][a], &gram_inv.mul_vec(&proj[g][b]));
                }
                omega[(a, b)] -= h;
            }
        }
    }
    let tr = omega.trace();
    let tr2: f64 = omega.as_slice().iter().map(|v| v * v).sum();
    let df = tr * tr / tr2;
    Ok(if df.is_finite() && df > 0.0 && tr > 1e-12 * sq.iter().sum::<f64>() { df } else { fallback.max(0.0) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::effects::estimate_effects_diffmeans;
    use crate::panel::{PanelBuilder, RawRow};
    use alloc::format;
    use alloc::string::String;

    /// One group; `clusters` clusters per arm with `size` rows each.
    fn balanced(clusters: usize, size: usize, f: impl Fn(usize, usize, bool) -> f64) -> PanelDataset {
        let mut b = PanelBuilder::new(Vec::new(), false);
        let mut labels: Vec<(String, String, bool, f64)> = Vec::new();
        for arm in [true, false] {
            for c in 0..clusters {
                for r in 0..size {
                    labels.push((format!("{arm}-{c}-{r}"), format!("{arm}-{c}"), arm, f(c, r, arm)));
                }
            }
        }
        for (u, c, z, y) in &labels {
            b.push(RawRow {
                unit: u,
                cluster: c,
                block: None,
                treated: *z,
                cohort: 1,
                grade: 0,
                year: 1,
                outcome: *y,
                tested_in: false,
                covariates: Vec::new(),
            });
        }
        b.build().unwrap()
    }

    #[test]
    fn singleton_clusters_reduce_to_two_sample_variance() {
        let m = 7;
        let p = balanced(m, 1, |c, _, arm| (c * c) as f64 * 0.3 + if arm { 1.0 } else { -2.0 });
        let e = estimate_effects_diffmeans(&p).unwrap();
        let cov = cluster_covariance(&p, &e, &CovarianceOptions::cr0()).unwrap();
        let ys: Vec<f64> = (0..m).map(|c| (c * c) as f64 * 0.3).collect();
        let mean = ys.iter().sum::<f64>() / m as f64;
        let s2 = ys.iter().map(|y| (y - mean) * (y - mean)).sum::<f64>() / m as f64;
        let expected = s2 * (1.0 / m as f64 + 1.0 / m as f64);
        assert!((cov.sigma_hat[(0, 0)] - expected).abs() < 1e-12 * expected);
    }

    #[test]
    fn cr2_exceeds_cr0_by_leverage_factor_in_balanced_design() {
        // Equal clusters of size s, k per arm: CR2 = CR0 · k/(k−1) for one group.
        let k = 5;
        let p = balanced(k, 3, |c, r, arm| (c as f64).sin() * 4.0 + r as f64 + if arm { 0.5 } else { 0.0 });
        let e = estimate_effects_diffmeans(&p).unwrap();
        let cr0 = cluster_covariance(&p, &e, &CovarianceOptions::cr0()).unwrap();
        let cr2 = cluster_covariance(&p, &e, &CovarianceOptions::cr2()).unwrap();
        let ratio = cr2.sigma_hat[(0, 0)] / cr0.sigma_hat[(0, 0)];
        assert!((ratio - k as f64 / (k as f64 - 1.0)).abs() < 1e-12);
    }

    #[test]
    fn satterthwaite_balanced_equals_clusters_minus_two() {
        for &(k, s) in &[(3usize, 4usize), (10, 2), (26, 5)] {
            let p = balanced(k, s, |c, r, _| (c * 7 + r) as f64);
            let e = estimate_effects_diffmeans(&p).unwrap();
            let df = small_sample_df(&p, &e, &CovarianceOptions::cr2(), &[1.0]).unwrap();
            let target = 2.0 * k as f64 - 2.0;
            assert!((df - target).abs() < 1e-8 * target, "k={k}: {df}");
        }
    }

    #[test]
    fn two_clusters_fall_back_to_zero_df() {
        let p = balanced(1, 4, |_, r, _| r as f64);
        let e = estimate_effects_diffmeans(&p).unwrap();
        let cov = cluster_covariance(&p, &e, &CovarianceOptions::cr2()).unwrap();
        assert_eq!(cov.df, 0.0);
        let df = small_sample_df(&p, &e, &CovarianceOptions::cr2(), &[1.0]).unwrap();
        assert_eq!(df, 0.0);
    }

    #[test]
    fn one_cluster_is_an_error() {
        let mut b = PanelBuilder::new(Vec::new(), false);
        for (u, z) in [("a", true), ("b", true)] {
            b.push(RawRow {
                unit: u,
                cluster: "only",
                block: None,
                treated: z,
                cohort: 1,
                grade: 0,
                year: 1,
                outcome: 1.0,
                tested_in: false,
                covariates: Vec::new(),
            });
        }
        let p = b.build().unwrap();
        let e = estimate_effects_diffmeans(&p).unwrap();
        assert!(matches!(
            cluster_covariance(&p, &e, &CovarianceOptions::cr0()),
            Err(Error::NoGroups) | Err(Error::TooFewClusters { .. })
        ));
    }
}
