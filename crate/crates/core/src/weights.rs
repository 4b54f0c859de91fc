//! Aggregation weights, test slopes, and the aggregated test.
//!
//! Under the proportional alternative `Δ = η p₀` the test slope of the
//! statistic `ω'Δ̂` is `h(ω) = ω'p₀ / (ω'Σω)^{1/2}`. Over the nonnegative
//! simplex it is maximized by `ω ∝ (Σ⁻¹p₀)₊` whenever that clipped vector
//! satisfies the first-order conditions; otherwise a projected-gradient
//! solver finds the constrained optimum.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::covariance::CovarianceEstimate;
use crate::dist::student_t_sf;
use crate::error::{Error, Result};
use crate::linalg::{dot, Matrix};

/// Tolerance on the clipped-group gradient condition.
pub const KKT_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightScheme {
    Pwrd,
    Flat,
    Exit,
    Custom,
}

/// How a PWRD weight vector was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightSolver {
    /// `(Σ⁻¹p₀)₊`, normalized, verified against the first-order conditions.
    ClippedClosedForm,
    /// Projected-gradient and active-set optimum (closed form failed
    /// verification).
    ProjectedGradient,
    /// Not an optimization (flat, exit, custom).
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregationWeights {
    pub omega: Vec<f64>,
    pub scheme: WeightScheme,
    pub solver: WeightSolver,
    /// 0-based groups whose weight was clipped to zero.
    pub clipped_groups: Vec<usize>,
    /// The normalized `(Σ⁻¹p₀)₊` vector, kept for comparison when the
    /// solver fell back.
    pub closed_form: Option<Vec<f64>>,
    /// Ridge added to Σ before solving, if any.
    pub ridge: Option<f64>,
    pub p0_used: Option<Vec<f64>>,
}

impl AggregationWeights {
    /// Wraps a caller-supplied weight vector after checking the simplex
    /// constraints.
    pub fn custom(omega: Vec<f64>) -> Result<Self> {
        if omega.is_empty() {
            return Err(Error::NoGroups);
        }
        if omega.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::InvalidArgument("weights must be finite and nonnegative".into()));
        }
        let total: f64 = omega.iter().sum();
        if total <= 0.0 {
            return Err(Error::InvalidArgument("weights sum to zero".into()));
        }
        let omega = omega.iter().map(|w| w / total).collect();
        Ok(Self::fixed(omega, WeightScheme::Custom))
    }

    fn fixed(omega: Vec<f64>, scheme: WeightScheme) -> Self {
        Self {
            omega,
            scheme,
            solver: WeightSolver::Fixed,
            clipped_groups: Vec::new(),
            closed_form: None,
            ridge: None,
            p0_used: None,
        }
    }

    pub fn len(&self) -> usize {
        self.omega.len()
    }

    pub fn is_empty(&self) -> bool {
        self.omega.is_empty()
    }

    /// True when the closed form and the returned weights differ.
    pub fn closed_form_disagrees(&self) -> bool {
        self.solver == WeightSolver::ProjectedGradient
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PwrdOptions {
    /// Add `1e-8 · trace/G` to the diagonal of Σ before solving.
    pub ridge: bool,
}

/// Power-maximizing weights for the proportional alternative `Δ = η p₀`.
pub fn pwrd_weights(sigma: &Matrix, p0: &[f64], options: PwrdOptions) -> Result<AggregationWeights> {
    let g = p0.len();
    if g == 0 {
        return Err(Error::NoGroups);
    }
    if !sigma.is_square() || sigma.rows() != g {
        return Err(Error::Dimension(alloc::format!(
            "covariance is {}x{} but there are {g} groups",
            sigma.rows(),
            sigma.cols()
        )));
    }
    if p0.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
        return Err(Error::InvalidArgument("test-in proportions must be finite and nonnegative".into()));
    }
    if p0.iter().all(|&p| p == 0.0) {
        return Err(Error::NoTestInSignal);
    }
    if sigma.as_slice().iter().any(|v| !v.is_finite()) {
        return Err(Error::Singular);
    }

    let mut sigma = sigma.clone();
    sigma.symmetrize();
    let scale = sigma.trace() / g as f64;
    if !(scale > 0.0) {
        return Err(Error::Singular);
    }
    let ridge = if options.ridge {
        let lambda = 1e-8 * scale;
        for i in 0..g {
            sigma[(i, i)] += lambda;
        }
        Some(lambda)
    } else {
        None
    };
    let eig = sigma.symmetric_eigen()?;
    if eig.min_value() <= 1e-12 * sigma.trace() / g as f64 {
        return Err(Error::Singular);
    }
    let chol = sigma.cholesky()?;
    let raw = chol.solve(p0);

    let clipped: Vec<usize> = (0..g).filter(|&i| raw[i] <= 0.0).collect();
    let positive_total: f64 = raw.iter().filter(|v| **v > 0.0).sum();
    let closed_form = if positive_total > 0.0 {
        Some(raw.iter().map(|&v| if v > 0.0 { v / positive_total } else { 0.0 }).collect::<Vec<f64>>())
    } else {
        None
    };

    let base = AggregationWeights {
        omega: Vec::new(),
        scheme: WeightScheme::Pwrd,
        solver: WeightSolver::ClippedClosedForm,
        clipped_groups: clipped.clone(),
        closed_form: closed_form.clone(),
        ridge,
        p0_used: Some(p0.to_vec()),
    };

    if let Some(omega) = closed_form {
        if clipped.is_empty() || satisfies_kkt(&sigma, p0, &omega) {
            return Ok(AggregationWeights { omega, ..base });
        }
    }
    let omega = projected_gradient_weights(&sigma, p0)?;
    let clipped_groups = (0..g).filter(|&i| omega[i] == 0.0).collect();
    Ok(AggregationWeights { omega, solver: WeightSolver::ProjectedGradient, clipped_groups, ..base })
}

/// Gradient of `log(ω'p) − ½ log(ω'Σω)`.
pub fn log_slope_gradient(sigma: &Matrix, p0: &[f64], omega: &[f64]) -> Vec<f64> {
    let wp = dot(omega, p0);
    let sw = sigma.mul_vec(omega);
    let wsw = dot(omega, &sw);
    p0.iter().zip(&sw).map(|(p, s)| p / wp - s / wsw).collect()
}

/// First-order optimality over the nonnegative simplex: the gradient is
/// constant on the support and no larger off it.
pub fn satisfies_kkt(sigma: &Matrix, p0: &[f64], omega: &[f64]) -> bool {
    if dot(omega, p0) <= 0.0 {
        return false;
    }
    let grad = log_slope_gradient(sigma, p0, omega);
    let active: Vec<f64> = grad.iter().zip(omega).filter(|(_, w)| **w > 0.0).map(|(g, _)| *g).collect();
    if active.is_empty() {
        return false;
    }
    let common = active.iter().sum::<f64>() / active.len() as f64;
    let spread = active.iter().map(|g| (g - common).abs()).fold(0.0, f64::max);
    let magnitude = grad.iter().map(|g| g.abs()).fold(1.0, f64::max);
    if spread > KKT_TOLERANCE * magnitude {
        return false;
    }
    grad.iter().zip(omega).filter(|(_, w)| **w == 0.0).all(|(g, _)| *g <= common + KKT_TOLERANCE)
}

/// Iteration budget of the accelerated projected-gradient phase.
pub const PROJECTED_GRADIENT_ITERATIONS: usize = 2_000;

/// Maximizes the slope over the simplex through the equivalent problem
/// `min z'Σz` subject to `p'z = 1, z ≥ 0`. A fixed budget of accelerated
/// projected-gradient steps from flat weights locates the support; an
/// active-set pass started at that point then solves the problem exactly.
pub fn projected_gradient_weights(sigma: &Matrix, p0: &[f64]) -> Result<Vec<f64>> {
    let g = p0.len();
    let p_total: f64 = p0.iter().sum();
    if p_total <= 0.0 {
        return Err(Error::NoTestInSignal);
    }
    let lmax = sigma.symmetric_eigen()?.values.iter().copied().fold(0.0, f64::max);
    let step = 1.0 / (2.0 * lmax);

    let objective = |z: &[f64]| sigma.quad_form(z);
    let mut z = vec![1.0 / p_total; g];
    let mut y = z.clone();
    let mut t = 1.0f64;
    let mut f_prev = objective(&z);
    for _ in 0..PROJECTED_GRADIENT_ITERATIONS {
        let grad = sigma.mul_vec(&y);
        let trial: Vec<f64> = y.iter().zip(&grad).map(|(yi, gi)| yi - 2.0 * step * gi).collect();
        let z_next = project_weighted_simplex(&trial, p0);
        let f_next = objective(&z_next);
        let t_next = 0.5 * (1.0 + libm::sqrt(1.0 + 4.0 * t * t));
        if f_next > f_prev {
            // Adaptive restart.
            y = z.clone();
            t = 1.0;
            continue;
        }
        let momentum = (t - 1.0) / t_next;
        y = z_next.iter().zip(&z).map(|(a, b)| a + momentum * (a - b)).collect();
        let moved: f64 = z_next.iter().zip(&z).map(|(a, b)| (a - b) * (a - b)).sum();
        let size: f64 = z_next.iter().map(|a| a * a).sum();
        z = z_next;
        t = t_next;
        let converged = libm::sqrt(moved) <= 1e-15 * libm::sqrt(size) && (f_prev - f_next) <= 1e-16 * f_next;
        f_prev = f_next;
        if converged {
            break;
        }
    }

    let z = active_set(sigma, p0, z)?;
    let total: f64 = z.iter().sum();
    Ok(z.iter().map(|v| if *v > 0.0 { v / total } else { 0.0 }).collect())
}

/// Lawson–Hanson active-set solution of `min ½z'Σz − p'z, z ≥ 0`, started
/// from the feasible point `z`. Its minimizer is proportional to the
/// slope-maximizing weights.
fn active_set(sigma: &Matrix, p0: &[f64], mut z: Vec<f64>) -> Result<Vec<f64>> {
    let g = p0.len();
    let scale = p0.iter().copied().fold(0.0, f64::max);
    let tol = 1e-13 * scale.max(1e-300);
    // Rescale the warm start onto the unconstrained optimum along its ray.
    let zsz = sigma.quad_form(&z);
    if zsz > 0.0 {
        let c = dot(p0, &z) / zsz;
        z.iter_mut().for_each(|v| *v *= c.max(0.0));
    }
    let mut free: Vec<bool> = z.iter().map(|v| *v > 0.0).collect();
    for _ in 0..(10 * g + 10) {
        // Inner loop: make the free-set solution feasible.
        for _ in 0..=g {
            let support: Vec<usize> = (0..g).filter(|&i| free[i]).collect();
            if support.is_empty() {
                break;
            }
            let s = solve_support(sigma, p0, &support)?;
            if support.iter().all(|&i| s[i] > 0.0) {
                z = s;
                break;
            }
            let mut alpha = 1.0f64;
            for &i in &support {
                if s[i] <= 0.0 {
                    alpha = alpha.min(z[i] / (z[i] - s[i]));
                }
            }
            for i in 0..g {
                z[i] += alpha * (s[i] - z[i]);
                if free[i] && z[i] <= tol {
                    z[i] = 0.0;
                    free[i] = false;
                }
            }
        }
        let w: Vec<f64> = p0.iter().zip(sigma.mul_vec(&z)).map(|(p, sz)| p - sz).collect();
        let entering = (0..g).filter(|&i| !free[i] && w[i] > tol).max_by(|&a, &b| w[a].total_cmp(&w[b]));
        match entering {
            Some(j) => free[j] = true,
            None => return Ok(z),
        }
    }
    Err(Error::Numerical("active-set solver did not terminate"))
}

/// `Σ_AA⁻¹ p_A` embedded in a full-length vector.
fn solve_support(sigma: &Matrix, p0: &[f64], support: &[usize]) -> Result<Vec<f64>> {
    let m = support.len();
    let mut sub = Matrix::zeros(m, m);
    for (a, &i) in support.iter().enumerate() {
        for (b, &j) in support.iter().enumerate() {
            sub[(a, b)] = sigma[(i, j)];
        }
    }
    let rhs: Vec<f64> = support.iter().map(|&i| p0[i]).collect();
    let y = sub.cholesky()?.solve(&rhs);
    let mut out = vec![0.0; p0.len()];
    for (a, &i) in support.iter().enumerate() {
        out[i] = y[a];
    }
    Ok(out)
}

/// Euclidean projection onto `{z ≥ 0, p'z = 1}` by bisection on the
/// multiplier of the equality constraint.
fn project_weighted_simplex(y: &[f64], p: &[f64]) -> Vec<f64> {
    let at = |lambda: f64| -> Vec<f64> { y.iter().zip(p).map(|(yi, pi)| (yi - lambda * pi).max(0.0)).collect() };
    let mass = |z: &[f64]| dot(z, p);
    let mut lo = -1.0;
    while mass(&at(lo)) < 1.0 {
        lo *= 2.0;
    }
    let mut hi = 1.0;
    while mass(&at(hi)) > 1.0 {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid == lo || mid == hi {
            break;
        }
        if mass(&at(mid)) > 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    at(0.5 * (lo + hi))
}

/// Flat weights `n_g / N`.
pub fn flat_weights(counts: &[usize]) -> Result<AggregationWeights> {
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err(Error::NoGroups);
    }
    let n = total as f64;
    Ok(AggregationWeights::fixed(counts.iter().map(|&c| c as f64 / n).collect(), WeightScheme::Flat))
}

/// Weights proportional to each group's count of exit observations.
pub fn exit_weights(exit_counts: &[usize]) -> Result<AggregationWeights> {
    let mut w = flat_weights(exit_counts)?;
    w.scheme = WeightScheme::Exit;
    Ok(w)
}

/// Test slope `ω'p₀ / (ω'Σω)^{1/2}`.
pub fn test_slope(omega: &[f64], p0: &[f64], sigma: &Matrix) -> Result<f64> {
    if omega.len() != p0.len() || sigma.rows() != p0.len() {
        return Err(Error::Dimension("slope: dimension mismatch".into()));
    }
    let var = sigma.quad_form(omega);
    if !(var > 0.0) {
        return Err(Error::NonPositiveVariance(var));
    }
    Ok(dot(omega, p0) / libm::sqrt(var))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlopeComparison {
    pub slope_first: f64,
    pub slope_second: f64,
    pub relative_efficiency: f64,
}

/// Pitman relative efficiency `(h(ω₁)/h(ω₂))²`.
pub fn pitman_relative_efficiency(
    first: &[f64],
    second: &[f64],
    p0: &[f64],
    sigma: &Matrix,
) -> Result<SlopeComparison> {
    let h1 = test_slope(first, p0, sigma)?;
    let h2 = test_slope(second, p0, sigma)?;
    if h2 == 0.0 {
        return Err(Error::ZeroSlope);
    }
    let r = h1 / h2;
    Ok(SlopeComparison { slope_first: h1, slope_second: h2, relative_efficiency: r * r })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Alternative {
    TwoSided,
    #[default]
    Greater,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregatedTest {
    pub estimate: f64,
    pub null_value: f64,
    pub se: f64,
    pub t_stat: f64,
    pub df: f64,
    pub p_value: f64,
    pub alternative: Alternative,
}

impl AggregatedTest {
    pub fn rejects(&self, alpha: f64) -> bool {
        self.p_value < alpha
    }
}

/// t-test of `ω'Δ = ω'δ₀` using the estimated covariance and its degrees
/// of freedom.
pub fn aggregate_test(
    estimates: &[f64],
    cov: &CovarianceEstimate,
    omega: &[f64],
    delta0: Option<&[f64]>,
    alternative: Alternative,
) -> Result<AggregatedTest> {
    aggregate_test_with_df(estimates, cov, omega, delta0, alternative, cov.df)
}

pub fn aggregate_test_with_df(
    estimates: &[f64],
    cov: &CovarianceEstimate,
    omega: &[f64],
    delta0: Option<&[f64]>,
    alternative: Alternative,
    df: f64,
) -> Result<AggregatedTest> {
    let g = estimates.len();
    if omega.len() != g || cov.dim() != g || delta0.is_some_and(|d| d.len() != g) {
        return Err(Error::Dimension("aggregate test: dimension mismatch".into()));
    }
    if df.is_nan() || df <= 0.0 {
        return Err(Error::NonPositiveDf(df));
    }
    let var = cov.contrast_variance(omega);
    if !(var > 0.0) || !var.is_finite() {
        return Err(Error::NonPositiveVariance(var));
    }
    let se = libm::sqrt(var);
    let estimate = dot(omega, estimates);
    let null_value = delta0.map_or(0.0, |d| dot(omega, d));
    let t_stat = (estimate - null_value) / se;
    let p_value = match alternative {
        Alternative::Greater => student_t_sf(t_stat, df),
        Alternative::TwoSided => (2.0 * student_t_sf(t_stat.abs(), df)).min(1.0),
    };
    Ok(AggregatedTest { estimate, null_value, se, t_stat, df, p_value, alternative })
}

/// PWRD aggregation of externally estimated effects.
pub fn aggregate_external(
    delta_hat: &[f64],
    cov: &CovarianceEstimate,
    p0: &[f64],
    delta0: Option<&[f64]>,
    alternative: Alternative,
    options: PwrdOptions,
) -> Result<(AggregatedTest, AggregationWeights)> {
    if delta_hat.len() != p0.len() {
        return Err(Error::Dimension("delta_hat and p0 lengths differ".into()));
    }
    let weights = pwrd_weights(&cov.sigma_hat, p0, options)?;
    let test = aggregate_test(delta_hat, cov, &weights.omega, delta0, alternative)?;
    Ok((test, weights))
}
