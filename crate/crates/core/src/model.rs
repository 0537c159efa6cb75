//! Latent-field layout, priors, sparse design rows and the joint prior
//! precision `Q(θ)`.
//!
//! The latent vector stacks, in order: the fixed-effect coefficients (the
//! population intercept and `log(V_T)` slope live here), one zero-mean
//! intercept deviation per session, one zero-mean `log(V_T)` slope deviation
//! per patient, and one temporal state per observation ordered by session
//! then time. The decomposition is non-centered, so `Q(θ)` stays block
//! diagonal: a constant `0.1` ridge on the fixed block, `τ_α` and `τ_β₁` on
//! the deviation blocks, and per-session Ornstein–Uhlenbeck precisions on
//! the temporal block.

use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::frame::{ModelFrame, COL_LOG_VT};
use crate::linalg::Tridiag;
use crate::math;
use crate::ou::{self, OuParams};

/// The four non-Gaussian hyperparameters. Optimization and grid exploration
/// work on their logs, which makes every component unconstrained.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct HyperParams {
    /// Session-intercept precision.
    pub tau_alpha: f64,
    /// Patient-slope precision.
    pub tau_beta1: f64,
    /// Stationary precision of the temporal process.
    pub tau_s: f64,
    /// Mean-reversion rate of the temporal process.
    pub phi: f64,
}

impl HyperParams {
    pub fn new(tau_alpha: f64, tau_beta1: f64, tau_s: f64, phi: f64) -> Result<Self> {
        for (name, v) in [
            ("tau_alpha", tau_alpha),
            ("tau_beta1", tau_beta1),
            ("tau_s", tau_s),
            ("phi", phi),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::BadParam { name: name.to_string(), value: v });
            }
        }
        Ok(HyperParams { tau_alpha, tau_beta1, tau_s, phi })
    }

    pub fn ou(&self) -> OuParams {
        OuParams { phi: self.phi, tau_s: self.tau_s }
    }
}

impl Default for HyperParams {
    fn default() -> Self {
        HyperParams { tau_alpha: 50.0, tau_beta1: 50.0, tau_s: 50.0, phi: 0.1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct GammaPrior {
    pub shape: f64,
    pub rate: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct NormalPrior {
    pub mean: f64,
    pub precision: f64,
}

/// Priors and fixed constants of the model.
///
/// The observation precision is a constant, not a hyperparameter: all
/// measurement-level variation is forced through the temporal process,
/// which keeps the model identifiable. The default is `e^15`; lowering it
/// (for sensitivity runs) is a configuration change, not a code change.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PriorSpec {
    /// Precision of the zero-mean Gaussian prior on every fixed effect.
    pub fixed_precision: f64,
    pub tau_alpha: GammaPrior,
    pub tau_beta1: GammaPrior,
    pub tau_s: GammaPrior,
    /// Prior on log φ directly.
    pub log_phi: NormalPrior,
    /// Fixed observation precision τ.
    pub obs_precision: f64,
}

/// Default fixed observation log-precision: τ = e¹⁵.
pub const DEFAULT_OBS_LOG_PRECISION: f64 = 15.0;

impl Default for PriorSpec {
    fn default() -> Self {
        PriorSpec {
            fixed_precision: 0.1,
            tau_alpha: GammaPrior { shape: 1.0, rate: 5e-5 },
            tau_beta1: GammaPrior { shape: 1.0, rate: 5e-5 },
            tau_s: GammaPrior { shape: 50.0, rate: 1.0 },
            log_phi: NormalPrior { mean: 0.0, precision: 0.1 },
            obs_precision: math::exp(DEFAULT_OBS_LOG_PRECISION),
        }
    }
}

/// Structural toggles: which random-effect blocks the model carries.
/// Everything on is the full model; switching blocks off is used for toy
/// models and degenerate-limit checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ModelSpec {
    pub session_intercepts: bool,
    pub patient_slopes: bool,
    pub temporal: bool,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec { session_intercepts: true, patient_slopes: true, temporal: true }
    }
}

impl ModelSpec {
    pub const FIXED_ONLY: ModelSpec =
        ModelSpec { session_intercepts: false, patient_slopes: false, temporal: false };
}

/// Slot assignment in the latent vector. Ranges are disjoint and exhaustive:
/// `dim = n_fixed + sessions + patients + observations` (with disabled
/// blocks contributing zero slots).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LatentLayout {
    pub n_fixed: usize,
    pub n_sessions: usize,
    pub n_patients: usize,
    pub n_obs: usize,
    pub spec: ModelSpec,
}

impl LatentLayout {
    pub fn session_slots(&self) -> usize {
        if self.spec.session_intercepts { self.n_sessions } else { 0 }
    }

    pub fn patient_slots(&self) -> usize {
        if self.spec.patient_slopes { self.n_patients } else { 0 }
    }

    pub fn ou_slots(&self) -> usize {
        if self.spec.temporal { self.n_obs } else { 0 }
    }

    /// Dimension of the densely coupled block: fixed effects plus group
    /// deviations.
    pub fn rest_dim(&self) -> usize {
        self.n_fixed + self.session_slots() + self.patient_slots()
    }

    pub fn dim(&self) -> usize {
        self.rest_dim() + self.ou_slots()
    }

    pub fn fixed_slot(&self, k: usize) -> usize {
        debug_assert!(k < self.n_fixed);
        k
    }

    pub fn session_slot(&self, j: usize) -> Option<usize> {
        self.spec.session_intercepts.then(|| {
            debug_assert!(j < self.n_sessions);
            self.n_fixed + j
        })
    }

    pub fn patient_slot(&self, i: usize) -> Option<usize> {
        self.spec.patient_slopes.then(|| {
            debug_assert!(i < self.n_patients);
            self.n_fixed + self.session_slots() + i
        })
    }

    pub fn ou_slot(&self, r: usize) -> Option<usize> {
        self.spec.temporal.then(|| {
            debug_assert!(r < self.n_obs);
            self.rest_dim() + r
        })
    }
}

/// Deterministic slot assignment for a frame: stable under re-runs because
/// frames index sessions and patients by first appearance.
pub fn layout(frame: &ModelFrame, spec: &ModelSpec) -> Result<LatentLayout> {
    if frame.rows.is_empty() {
        return Err(Error::EmptyFrame);
    }
    Ok(LatentLayout {
        n_fixed: frame.n_fixed(),
        n_sessions: frame.n_sessions(),
        n_patients: frame.n_patients(),
        n_obs: frame.n_rows(),
        spec: *spec,
    })
}

/// Sparse design row `A_r`: the linear map from the latent vector to the
/// row's linear predictor. Fixed covariate values land in the fixed slots
/// (the intercept constant and `log(V_T)` among them), a 1 in the row's
/// session slot, the centered `log(V_T)` value in the row's patient slot
/// and a 1 in the row's own temporal slot.
pub fn design_row(frame: &ModelFrame, layout: &LatentLayout, r: usize) -> Vec<(usize, f64)> {
    let row = &frame.rows[r];
    let mut entries = Vec::with_capacity(layout.n_fixed + 3);
    for (k, &v) in row.covariates.iter().enumerate() {
        entries.push((layout.fixed_slot(k), v));
    }
    if let Some(slot) = layout.session_slot(row.session) {
        entries.push((slot, 1.0));
    }
    if let Some(slot) = layout.patient_slot(row.patient) {
        entries.push((slot, row.covariates[COL_LOG_VT]));
    }
    if let Some(slot) = layout.ou_slot(r) {
        entries.push((slot, 1.0));
    }
    entries
}

/// The non-temporal part of `A_r` (all slots below `rest_dim`).
pub(crate) fn rest_design_row(
    frame: &ModelFrame,
    layout: &LatentLayout,
    r: usize,
) -> Vec<(usize, f64)> {
    let row = &frame.rows[r];
    let mut entries = Vec::with_capacity(layout.n_fixed + 2);
    for (k, &v) in row.covariates.iter().enumerate() {
        entries.push((layout.fixed_slot(k), v));
    }
    if let Some(slot) = layout.session_slot(row.session) {
        entries.push((slot, 1.0));
    }
    if let Some(slot) = layout.patient_slot(row.patient) {
        entries.push((slot, row.covariates[COL_LOG_VT]));
    }
    entries
}

/// η = A x assembled sparsely for every row.
pub fn linear_predictor(frame: &ModelFrame, layout: &LatentLayout, x: &[f64]) -> Vec<f64> {
    debug_assert_eq!(x.len(), layout.dim());
    (0..frame.n_rows())
        .map(|r| design_row(frame, layout, r).iter().map(|&(s, v)| v * x[s]).sum())
        .collect()
}

/// Joint prior precision `Q(θ)` in block form.
#[derive(Debug, Clone)]
pub struct PriorPrecision {
    pub fixed_precision: f64,
    pub tau_alpha: Option<f64>,
    pub tau_beta1: Option<f64>,
    /// Per-session temporal precision blocks; empty when the temporal block
    /// is disabled.
    pub ou_blocks: Vec<Tridiag>,
    pub layout: LatentLayout,
}

/// Assemble `Q(θ)` for a layout. `times` must hold one strictly increasing
/// grid per session (ignored when the temporal block is off).
pub fn prior_precision(
    layout: &LatentLayout,
    theta: &HyperParams,
    priors: &PriorSpec,
    times: &[Vec<f64>],
) -> Result<PriorPrecision> {
    HyperParams::new(theta.tau_alpha, theta.tau_beta1, theta.tau_s, theta.phi)?;
    let ou_blocks = if layout.spec.temporal {
        if times.len() != layout.n_sessions {
            return Err(Error::LengthMismatch { left: times.len(), right: layout.n_sessions });
        }
        times
            .iter()
            .map(|t| ou::ou_precision(t, &theta.ou()))
            .collect::<Result<Vec<_>>>()?
    } else {
        Vec::new()
    };
    Ok(PriorPrecision {
        fixed_precision: priors.fixed_precision,
        tau_alpha: layout.spec.session_intercepts.then_some(theta.tau_alpha),
        tau_beta1: layout.spec.patient_slopes.then_some(theta.tau_beta1),
        ou_blocks,
        layout: *layout,
    })
}

impl PriorPrecision {
    /// log |Q(θ)|: the sum of the block log-determinants.
    pub fn log_det(&self) -> f64 {
        let l = &self.layout;
        let mut ld = l.n_fixed as f64 * math::ln(self.fixed_precision);
        if let Some(ta) = self.tau_alpha {
            ld += l.n_sessions as f64 * math::ln(ta);
        }
        if let Some(tb) = self.tau_beta1 {
            ld += l.n_patients as f64 * math::ln(tb);
        }
        for b in &self.ou_blocks {
            // Tridiagonal block determinant equals the product of the
            // sequential conditional precisions; recover it from the factor.
            ld += b.cholesky().map(|c| c.log_det()).unwrap_or(f64::NEG_INFINITY);
        }
        ld
    }

    /// Q(θ) x over a full latent vector in layout order.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let l = &self.layout;
        debug_assert_eq!(x.len(), l.dim());
        let mut out = vec![0.0; l.dim()];
        for k in 0..l.n_fixed {
            out[k] = self.fixed_precision * x[k];
        }
        if let Some(ta) = self.tau_alpha {
            for j in 0..l.n_sessions {
                let s = l.session_slot(j).unwrap();
                out[s] = ta * x[s];
            }
        }
        if let Some(tb) = self.tau_beta1 {
            for i in 0..l.n_patients {
                let s = l.patient_slot(i).unwrap();
                out[s] = tb * x[s];
            }
        }
        let mut offset = l.rest_dim();
        for b in &self.ou_blocks {
            let y = b.mul(&x[offset..offset + b.n()]);
            out[offset..offset + b.n()].copy_from_slice(&y);
            offset += b.n();
        }
        out
    }

    /// xᵀ Q(θ) x over a full latent vector in layout order.
    pub fn quadform(&self, x: &[f64]) -> f64 {
        let l = &self.layout;
        debug_assert_eq!(x.len(), l.dim());
        let mut q = 0.0;
        for k in 0..l.n_fixed {
            q += self.fixed_precision * x[k] * x[k];
        }
        if let Some(ta) = self.tau_alpha {
            for j in 0..l.n_sessions {
                let s = l.session_slot(j).unwrap();
                q += ta * x[s] * x[s];
            }
        }
        if let Some(tb) = self.tau_beta1 {
            for i in 0..l.n_patients {
                let s = l.patient_slot(i).unwrap();
                q += tb * x[s] * x[s];
            }
        }
        let mut offset = l.rest_dim();
        for b in &self.ou_blocks {
            q += b.quadform(&x[offset..offset + b.n()]);
            offset += b.n();
        }
        q
    }

    /// Dense copy for small-case oracle comparisons.
    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let l = &self.layout;
        let d = l.dim();
        let mut a = vec![vec![0.0; d]; d];
        for k in 0..l.n_fixed {
            a[k][k] = self.fixed_precision;
        }
        if let Some(ta) = self.tau_alpha {
            for j in 0..l.n_sessions {
                let s = l.session_slot(j).unwrap();
                a[s][s] = ta;
            }
        }
        if let Some(tb) = self.tau_beta1 {
            for i in 0..l.n_patients {
                let s = l.patient_slot(i).unwrap();
                a[s][s] = tb;
            }
        }
        let mut offset = l.rest_dim();
        for b in &self.ou_blocks {
            let dense = b.to_dense();
            for i in 0..b.n() {
                for j in 0..b.n() {
                    a[offset + i][offset + j] = dense[i][j];
                }
            }
            offset += b.n();
        }
        a
    }
}

/// Which hyperparameters are active under a [`ModelSpec`] and how they map
/// to the unconstrained optimization vector (logs of the active components,
/// in the fixed order τ_α, τ_β₁, τ_s, φ).
#[derive(Debug, Clone, Copy)]
pub struct ActiveHypers {
    pub spec: ModelSpec,
}

impl ActiveHypers {
    pub fn new(spec: ModelSpec) -> Self {
        ActiveHypers { spec }
    }

    pub fn dim(&self) -> usize {
        usize::from(self.spec.session_intercepts)
            + usize::from(self.spec.patient_slopes)
            + 2 * usize::from(self.spec.temporal)
    }

    pub fn names(&self) -> Vec<&'static str> {
        let mut n = Vec::new();
        if self.spec.session_intercepts {
            n.push("tau_alpha");
        }
        if self.spec.patient_slopes {
            n.push("tau_beta1");
        }
        if self.spec.temporal {
            n.push("tau_s");
            n.push("phi");
        }
        n
    }

    pub fn to_log_vec(&self, theta: &HyperParams) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.dim());
        if self.spec.session_intercepts {
            v.push(math::ln(theta.tau_alpha));
        }
        if self.spec.patient_slopes {
            v.push(math::ln(theta.tau_beta1));
        }
        if self.spec.temporal {
            v.push(math::ln(theta.tau_s));
            v.push(math::ln(theta.phi));
        }
        v
    }

    /// Rebuild a full parameter set from the active log components, taking
    /// inactive values from `base`.
    pub fn from_log_vec(&self, base: &HyperParams, v: &[f64]) -> HyperParams {
        debug_assert_eq!(v.len(), self.dim());
        let mut theta = *base;
        let mut k = 0;
        if self.spec.session_intercepts {
            theta.tau_alpha = math::exp(v[k]);
            k += 1;
        }
        if self.spec.patient_slopes {
            theta.tau_beta1 = math::exp(v[k]);
            k += 1;
        }
        if self.spec.temporal {
            theta.tau_s = math::exp(v[k]);
            theta.phi = math::exp(v[k + 1]);
        }
        theta
    }

    /// Natural-scale value of active component `k`.
    pub fn natural_value(&self, theta: &HyperParams, k: usize) -> f64 {
        let vals = self.to_log_vec(theta);
        math::exp(vals[k])
    }
}

/// Log-density of the hyperprior at `θ`, in the internal log
/// parameterization: Gamma log-densities on the active precisions plus
/// their log-scale Jacobians, and the Normal log-density on log φ.
pub fn log_hyperprior(theta: &HyperParams, priors: &PriorSpec, spec: &ModelSpec) -> f64 {
    let mut lp = 0.0;
    if spec.session_intercepts {
        lp += math::gamma_logpdf(theta.tau_alpha, priors.tau_alpha.shape, priors.tau_alpha.rate)
            + math::ln(theta.tau_alpha);
    }
    if spec.patient_slopes {
        lp += math::gamma_logpdf(theta.tau_beta1, priors.tau_beta1.shape, priors.tau_beta1.rate)
            + math::ln(theta.tau_beta1);
    }
    if spec.temporal {
        lp += math::gamma_logpdf(theta.tau_s, priors.tau_s.shape, priors.tau_s.rate)
            + math::ln(theta.tau_s);
        lp += math::normal_logpdf(
            math::ln(theta.phi),
            priors.log_phi.mean,
            priors.log_phi.precision,
        );
    }
    lp
}
