//! Ornstein–Uhlenbeck temporal error process on irregular time grids.
//!
//! The process is a zero-mean continuous-time Gaussian Markov process with
//! mean-reversion rate `φ` and stationary precision `τ_s`. Given the state
//! `s_prev` at the previous observation time, the state after a gap `dt` is
//!
//! ```text
//! s | s_prev ~ Normal(s_prev · exp(-φ dt), [τ_s / (1 - exp(-2 φ dt))]⁻¹)
//! ```
//!
//! and the first state of a session is `Normal(0, τ_s⁻¹)`. The sequential
//! conditionals imply a joint Gaussian whose precision matrix is symmetric
//! tridiagonal, which is what makes the full model solvable in linear time;
//! equivalently the joint covariance is the exponential kernel
//! `τ_s⁻¹ exp(-φ |tᵢ − tⱼ|)`.

use alloc::string::ToString;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::linalg::Tridiag;
use crate::math;
use crate::rng;

/// Mean-reversion rate `phi` (1/seconds) and stationary precision `tau_s`.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct OuParams {
    pub phi: f64,
    pub tau_s: f64,
}

impl OuParams {
    pub fn new(phi: f64, tau_s: f64) -> Result<Self> {
        if !(phi > 0.0) || !phi.is_finite() {
            return Err(Error::BadParam { name: "phi".to_string(), value: phi });
        }
        if !(tau_s > 0.0) || !tau_s.is_finite() {
            return Err(Error::BadParam { name: "tau_s".to_string(), value: tau_s });
        }
        Ok(OuParams { phi, tau_s })
    }
}

/// A realized path: values at strictly increasing times.
#[derive(Debug, Clone, PartialEq)]
pub struct OuPath {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
}

impl OuPath {
    pub fn new(times: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if times.len() != values.len() {
            return Err(Error::LengthMismatch { left: times.len(), right: values.len() });
        }
        check_times(&times)?;
        Ok(OuPath { times, values })
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

fn check_times(times: &[f64]) -> Result<()> {
    if times.is_empty() {
        return Err(Error::BadTimeGrid);
    }
    for w in times.windows(2) {
        if !(w[1] > w[0]) {
            return Err(Error::BadTimeGrid);
        }
    }
    if times.iter().any(|t| !t.is_finite()) {
        return Err(Error::BadTimeGrid);
    }
    Ok(())
}

/// `1 - exp(-2 φ dt)` computed via `expm1` so small `φ dt` does not cancel.
#[inline]
fn one_minus_exp2(phi: f64, dt: f64) -> f64 {
    -math::expm1(-2.0 * phi * dt)
}

/// Conditional distribution of the state a gap `dt > 0` after a state
/// `s_prev`: returns `(mean, precision)`.
pub fn ou_conditional(s_prev: f64, dt: f64, p: &OuParams) -> Result<(f64, f64)> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::BadTimeStep { dt });
    }
    let mean = s_prev * math::exp(-p.phi * dt);
    let precision = p.tau_s / one_minus_exp2(p.phi, dt);
    Ok((mean, precision))
}

/// Joint precision matrix of the path over `times`, assembled from the
/// sequential conditionals with initial state `Normal(0, τ_s⁻¹)`.
///
/// The result is symmetric tridiagonal and positive definite.
pub fn ou_precision(times: &[f64], p: &OuParams) -> Result<Tridiag> {
    check_times(times)?;
    let n = times.len();
    let mut diag = Vec::with_capacity(n);
    let mut off = Vec::with_capacity(n.saturating_sub(1));
    diag.push(p.tau_s);
    for k in 1..n {
        let dt = times[k] - times[k - 1];
        let rho = math::exp(-p.phi * dt);
        let prec = p.tau_s / one_minus_exp2(p.phi, dt);
        // Conditional s_k | s_{k-1} contributes prec to (k,k), rho²·prec to
        // (k-1,k-1) and -rho·prec to the off-diagonal.
        diag[k - 1] += rho * rho * prec;
        diag.push(prec);
        off.push(-rho * prec);
    }
    Ok(Tridiag::new(diag, off))
}

/// Log of the joint precision determinant: the product of the sequential
/// conditional precisions.
pub fn ou_log_det_precision(times: &[f64], p: &OuParams) -> Result<f64> {
    check_times(times)?;
    let mut ld = math::ln(p.tau_s);
    for k in 1..times.len() {
        let dt = times[k] - times[k - 1];
        ld += math::ln(p.tau_s) - math::ln(one_minus_exp2(p.phi, dt));
    }
    Ok(ld)
}

/// Joint log-density of a path: initial-state density plus the sequential
/// conditional densities.
pub fn ou_logpdf(path: &OuPath, p: &OuParams) -> Result<f64> {
    OuParams::new(p.phi, p.tau_s)?;
    let mut lp = math::normal_logpdf(path.values[0], 0.0, p.tau_s);
    for k in 1..path.len() {
        let dt = path.times[k] - path.times[k - 1];
        let (mean, prec) = ou_conditional(path.values[k - 1], dt, p)?;
        lp += math::normal_logpdf(path.values[k], mean, prec);
    }
    Ok(lp)
}

/// Draw a path sequentially from the exact conditionals; deterministic for
/// a given seed.
pub fn ou_sample(times: &[f64], p: &OuParams, seed: u64) -> Result<OuPath> {
    let mut rng = rng::stream_rng(seed, 0);
    ou_sample_with(times, p, &mut rng)
}

/// As [`ou_sample`] but drawing from a caller-supplied RNG.
pub fn ou_sample_with<R: rand::Rng + ?Sized>(
    times: &[f64],
    p: &OuParams,
    rng: &mut R,
) -> Result<OuPath> {
    check_times(times)?;
    let mut values = Vec::with_capacity(times.len());
    let first = rng::standard_normal(rng) / math::sqrt(p.tau_s);
    values.push(first);
    for k in 1..times.len() {
        let dt = times[k] - times[k - 1];
        let (mean, prec) = ou_conditional(values[k - 1], dt, p)?;
        values.push(mean + rng::standard_normal(rng) / math::sqrt(prec));
    }
    Ok(OuPath { times: times.to_vec(), values })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn params() -> OuParams {
        OuParams::new(0.09, 46.75).unwrap()
    }

    #[test]
    fn conditional_matches_direct_formula_evaluation() {
        // s_prev = 1, φ = 0.09, τ_s = 46.75, dt = 1.
        let (mean, prec) = ou_conditional(1.0, 1.0, &params()).unwrap();
        assert!((mean - 0.9139311852712282).abs() < 1e-15);
        let variance = 1.0 / prec;
        assert!((variance - 0.164729788588728 / 46.75).abs() < 1e-15);
    }

    #[test]
    fn conditional_limits() {
        let p = params();
        // Long gaps forget the past: mean -> 0, precision -> τ_s.
        let (mean, prec) = ou_conditional(1.0, 1e9, &p).unwrap();
        assert!(mean.abs() < 1e-300);
        assert!((prec - p.tau_s).abs() < 1e-12);
        // Short gaps pin the state: mean -> s_prev, variance -> 0.
        let (mean, prec) = ou_conditional(2.5, 1e-12, &p).unwrap();
        assert!((mean - 2.5).abs() < 1e-9);
        assert!(1.0 / prec < 1e-10);
        assert!(ou_conditional(1.0, 0.0, &p).is_err());
        assert!(ou_conditional(1.0, -1.0, &p).is_err());
    }

    #[test]
    fn conditional_mean_shrinks_monotonically() {
        let p = params();
        let mut last = f64::INFINITY;
        for k in 1..30 {
            let (mean, _) = ou_conditional(1.0, k as f64 * 0.5, &p).unwrap();
            assert!(mean > 0.0 && mean < last);
            last = mean;
        }
    }

    #[test]
    fn precision_single_point_is_stationary() {
        let q = ou_precision(&[3.0], &params()).unwrap();
        assert_eq!(q.n(), 1);
        assert!((q.diag[0] - 46.75).abs() < 1e-12);
    }

    #[test]
    fn two_point_inverse_matches_hand_inverted_kernel() {
        let p = params();
        let d = 2.3;
        let q = ou_precision(&[0.0, d], &p).unwrap();
        // Covariance should be [[v, v ρ], [v ρ, v]] with v = 1/τ_s, ρ = e^{-φd};
        // invert the 2x2 by hand and compare entrywise.
        let v = 1.0 / p.tau_s;
        let rho = math::exp(-p.phi * d);
        let det = v * v * (1.0 - rho * rho);
        let dense = q.to_dense();
        assert!((dense[0][0] - v / det).abs() < 1e-9);
        assert!((dense[1][1] - v / det).abs() < 1e-9);
        assert!((dense[0][1] + v * rho / det).abs() < 1e-9);
    }

    #[test]
    fn rejects_bad_grids() {
        let p = params();
        assert!(ou_precision(&[], &p).is_err());
        assert!(ou_precision(&[0.0, 0.0], &p).is_err());
        assert!(ou_precision(&[0.0, 2.0, 1.0], &p).is_err());
    }

    #[test]
    fn logpdf_single_point_is_stationary_density() {
        let p = params();
        let path = OuPath::new(vec![0.0], vec![0.0]).unwrap();
        let lp = ou_logpdf(&path, &p).unwrap();
        assert!((lp - math::normal_logpdf(0.0, 0.0, p.tau_s)).abs() < 1e-14);
    }

    #[test]
    fn logpdf_scaling_consistent_with_rescaled_precision() {
        // Scaling a path by c and the precision by 1/c² changes the log
        // density only through the Jacobian term n·ln c.
        let p = params();
        let times = vec![0.0, 1.0, 2.5, 4.1];
        let path = ou_sample(&times, &p, 99).unwrap();
        let c = 1.7;
        let scaled = OuPath::new(
            times.clone(),
            path.values.iter().map(|v| v * c).collect(),
        )
        .unwrap();
        let p_scaled = OuParams::new(p.phi, p.tau_s / (c * c)).unwrap();
        let lp = ou_logpdf(&path, &p).unwrap();
        let lp_scaled = ou_logpdf(&scaled, &p_scaled).unwrap();
        let n = times.len() as f64;
        assert!((lp_scaled - (lp - n * math::ln(c))).abs() < 1e-10);
    }

    #[test]
    fn sampling_is_deterministic_per_seed() {
        let times = vec![0.0, 1.0, 3.0, 3.5];
        let a = ou_sample(&times, &params(), 42).unwrap();
        let b = ou_sample(&times, &params(), 42).unwrap();
        let c = ou_sample(&times, &params(), 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.values, c.values);
    }

    #[test]
    fn single_point_sample_variance_is_stationary() {
        let p = params();
        let n = 100_000;
        let mut rng = rng::stream_rng(5, 0);
        let draws: Vec<f64> = (0..n)
            .map(|_| ou_sample_with(&[0.0], &p, &mut rng).unwrap().values[0])
            .collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (n - 1) as f64;
        let target = 1.0 / p.tau_s;
        // SE of a sample variance of a Gaussian is var·sqrt(2/(n-1)).
        let se = target * math::sqrt(2.0 / (n as f64 - 1.0));
        assert!((var - target).abs() < 3.0 * se, "var {var} target {target}");
    }

    #[test]
    fn lag_autocorrelation_matches_kernel() {
        let p = params();
        let n = 200_000usize;
        let times: Vec<f64> = (0..n).map(|i| i as f64 * 2.0).collect();
        let path = ou_sample(&times, &p, 17).unwrap();
        let d = 2.0;
        let target = math::exp(-p.phi * d);
        let v = &path.values;
        let mean = v.iter().sum::<f64>() / n as f64;
        let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        let cov = (0..n - 1)
            .map(|i| (v[i] - mean) * (v[i + 1] - mean))
            .sum::<f64>()
            / (n - 1) as f64;
        let rho = cov / var;
        // Bartlett-style standard error for a lag-1 autocorrelation.
        let se = math::sqrt((1.0 - target * target) / n as f64);
        assert!((rho - target).abs() < 3.0 * se, "rho {rho} target {target}");
    }
}
