//! Synthetic data from the exact generative model, so that inference,
//! prediction and cross-validation can be validated without the private
//! clinical recordings.
//!
//! The generative direction mirrors the fitted model: per-patient slope
//! deviations, per-session intercept deviations, an Ornstein–Uhlenbeck
//! error path per session on an irregular breath grid, and observed log
//! V̇O₂ equal to the linear predictor plus `Normal(0, τ⁻¹)` noise at the
//! fixed τ. Covariate trajectories are synthetic stand-ins (log-scale
//! drifts around per-patient baselines with a per-session intensity
//! profile); their scales are tuning constants, not physiology.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;

use crate::data::{Breath, Dataset, PatientData, PatientMeta, Quality, SessionData, SessionMeta};
use crate::error::{Error, Result};
use crate::frame::{build_frame, Centering, FrameSpec, ModelFrame};
use crate::math;
use crate::model::{self, HyperParams, LatentLayout, ModelSpec};
use crate::ou::{ou_sample_with, OuParams};
use crate::rng;

/// Transient multiplicative spikes mimicking cough artefacts, applied to
/// the emitted covariates and V̇O₂ after generation (a measurement
/// disturbance, not part of the latent model).
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SpikeSettings {
    /// Probability that a breath starts a spike.
    pub rate: f64,
    /// Peak multiplicative amplitude, e.g. 0.8 for a +80% excursion.
    pub amplitude: f64,
}

/// Covariate-process tuning. All values here are artifact choices for the
/// synthetic stand-in processes.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CovariateSettings {
    /// Mean inter-breath gap, seconds.
    pub mean_gap: f64,
    /// Gap jitter fraction in [0, 1): gaps are uniform in
    /// `mean_gap·[1-jitter, 1+jitter]`.
    pub gap_jitter: f64,
    /// Per-patient baseline of log tidal volume: (mean, sd).
    pub base_log_vt: (f64, f64),
    pub base_log_petco2: (f64, f64),
    pub base_log_rr: (f64, f64),
    /// Amplitudes of the shared per-session intensity profile.
    pub load_vt: f64,
    pub load_petco2: f64,
    pub load_rr: f64,
    /// Within-session wobble: mean-reversion rate and marginal sd per
    /// covariate.
    pub wobble_phi: f64,
    pub wobble_sd_vt: f64,
    pub wobble_sd_petco2: f64,
    pub wobble_sd_rr: f64,
    pub spikes: Option<SpikeSettings>,
}

impl Default for CovariateSettings {
    fn default() -> Self {
        CovariateSettings {
            mean_gap: 2.0,
            gap_jitter: 0.3,
            base_log_vt: (math::ln(0.45), 0.10),
            base_log_petco2: (math::ln(4.8), 0.06),
            base_log_rr: (math::ln(21.0), 0.10),
            load_vt: 0.42,
            load_petco2: 0.10,
            load_rr: 0.35,
            wobble_phi: 0.03,
            wobble_sd_vt: 0.05,
            wobble_sd_petco2: 0.03,
            wobble_sd_rr: 0.05,
            spikes: None,
        }
    }
}

/// Generative truth. The default coefficient vector and hyperparameters
/// are the fitted posterior means of the full model (intercept 1.32,
/// log V_T 1.56, log P_ETCO₂ 1.92, log RR 1.11, interactions −0.20 and
/// 0.33, τ_α 38.63, τ_β₁ 44.30, τ_s 46.75, φ 0.09, and so on), so recovery
/// studies run at realistic parameter scales.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct GenerativeConfig {
    pub n_patients: usize,
    pub sessions_per_patient: usize,
    pub breaths_per_session: usize,
    /// True fixed-effect vector over the full 14-column design.
    pub fixed: Vec<f64>,
    pub truth: HyperParams,
    /// Fixed observation log-precision (τ = e^this).
    pub obs_log_precision: f64,
    pub covariates: CovariateSettings,
    pub seed: u64,
}

/// Table of true fixed effects in design-column order.
pub const DEFAULT_TRUE_FIXED: [f64; 14] = [
    1.32,  // intercept
    1.56,  // log vt
    1.92,  // log petco2
    1.11,  // log rr
    -0.20, // log vt x log petco2
    0.33,  // log vt x log rr
    -0.01, // sofa
    -0.01, // gppaq = 2
    0.01,  // gppaq = 3
    0.31,  // gppaq = 4
    -0.08, // sex
    0.35,  // log age
    -1.13, // log bmi
    -2.12, // log age x log bmi
];

impl Default for GenerativeConfig {
    fn default() -> Self {
        GenerativeConfig {
            n_patients: 8,
            sessions_per_patient: 3,
            breaths_per_session: 150,
            fixed: DEFAULT_TRUE_FIXED.to_vec(),
            truth: HyperParams { tau_alpha: 38.63, tau_beta1: 44.30, tau_s: 46.75, phi: 0.09 },
            obs_log_precision: crate::model::DEFAULT_OBS_LOG_PRECISION,
            covariates: CovariateSettings::default(),
            seed: 1,
        }
    }
}

/// Realized latent quantities kept alongside the emitted dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SimTruth {
    /// One intercept deviation per session, in frame session order.
    pub session_intercepts: Vec<f64>,
    /// One slope deviation per patient, in frame patient order.
    pub patient_slopes: Vec<f64>,
    /// Temporal error path per session.
    pub ou_paths: Vec<Vec<f64>>,
    /// Noiseless linear predictor per row (raw log V̇O₂ scale).
    pub eta: Vec<f64>,
    /// Covariate centering constants of the generated dataset.
    pub centering: Centering,
}

/// Strictly increasing times from uniformly jittered gaps; the first time
/// is the first gap.
pub fn irregular_grid(n: usize, mean_gap: f64, jitter: f64, seed: u64) -> Result<Vec<f64>> {
    let mut r = rng::stream_rng(seed, 0);
    irregular_grid_with(n, mean_gap, jitter, &mut r)
}

pub fn irregular_grid_with<R: Rng + ?Sized>(
    n: usize,
    mean_gap: f64,
    jitter: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if !(mean_gap > 0.0) {
        return Err(Error::BadConfig { detail: format!("mean_gap must be > 0, got {mean_gap}") });
    }
    if !(0.0..1.0).contains(&jitter) {
        return Err(Error::BadConfig { detail: format!("jitter must lie in [0,1), got {jitter}") });
    }
    let mut t = 0.0;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let u: f64 = rng.random();
        t += mean_gap * (1.0 - jitter + 2.0 * jitter * u);
        out.push(t);
    }
    Ok(out)
}

fn validate(cfg: &GenerativeConfig) -> Result<()> {
    if cfg.n_patients < 1 || cfg.sessions_per_patient < 1 || cfg.breaths_per_session < 1 {
        return Err(Error::BadConfig { detail: "layout counts must be >= 1".into() });
    }
    if cfg.fixed.len() != DEFAULT_TRUE_FIXED.len() {
        return Err(Error::BadConfig {
            detail: format!(
                "true fixed-effect vector must have {} entries, got {}",
                DEFAULT_TRUE_FIXED.len(),
                cfg.fixed.len()
            ),
        });
    }
    HyperParams::new(cfg.truth.tau_alpha, cfg.truth.tau_beta1, cfg.truth.tau_s, cfg.truth.phi)?;
    Ok(())
}

// Stream ids per purpose, spaced so per-session streams never collide.
const STREAM_PATIENT: u64 = 1;
const STREAM_SESSION_BASE: u64 = 1 << 20;
const STREAM_NOISE: u64 = 2;
const STREAM_SPIKES: u64 = 3;

/// Generate a dataset and its latent truth. Identical configuration
/// (including the seed) reproduces both bit for bit.
pub fn simulate(cfg: &GenerativeConfig) -> Result<(Dataset, SimTruth)> {
    validate(cfg)?;
    let cov = &cfg.covariates;
    let mut patient_rng = rng::stream_rng(cfg.seed, STREAM_PATIENT);

    struct PatientDraw {
        meta: PatientMeta,
        base_log_vt: f64,
        base_log_petco2: f64,
        base_log_rr: f64,
        slope: f64,
    }

    let mut patient_draws = Vec::with_capacity(cfg.n_patients);
    for _ in 0..cfg.n_patients {
        let age = 50.0 + 36.0 * patient_rng.random::<f64>();
        let bmi = 20.0 + 15.0 * patient_rng.random::<f64>();
        let sex = u8::from(patient_rng.random::<f64>() < 0.5);
        let gppaq = 1 + (patient_rng.random::<f64>() * 4.0) as u8;
        let meta = PatientMeta::new(age, bmi, sex, gppaq.min(4))?;
        patient_draws.push(PatientDraw {
            meta,
            base_log_vt: cov.base_log_vt.0
                + cov.base_log_vt.1 * rng::standard_normal(&mut patient_rng),
            base_log_petco2: cov.base_log_petco2.0
                + cov.base_log_petco2.1 * rng::standard_normal(&mut patient_rng),
            base_log_rr: cov.base_log_rr.0
                + cov.base_log_rr.1 * rng::standard_normal(&mut patient_rng),
            slope: rng::standard_normal(&mut patient_rng) / math::sqrt(cfg.truth.tau_beta1),
        });
    }

    // Covariate-only dataset plus the latent draws, session by session.
    let mut patients_data = Vec::with_capacity(cfg.n_patients);
    let mut session_intercepts = Vec::new();
    let mut ou_paths: Vec<Vec<f64>> = Vec::new();
    let wobble = |sd: f64| OuParams {
        phi: cov.wobble_phi.max(1e-6),
        tau_s: 1.0 / (sd * sd).max(1e-12),
    };
    for (pi, pd) in patient_draws.iter().enumerate() {
        let mut sessions = Vec::with_capacity(cfg.sessions_per_patient);
        for sj in 0..cfg.sessions_per_patient {
            let global = (pi * cfg.sessions_per_patient + sj) as u64;
            let mut srng = rng::stream_rng(cfg.seed, STREAM_SESSION_BASE + global);
            let sofa = 2 + (srng.random::<f64>() * 11.0) as i32;
            let quality = match srng.random::<f64>() {
                u if u < 0.5 => Quality::Good,
                u if u < 0.8 => Quality::Reasonable,
                _ => Quality::Poor,
            };
            let days = 7 + (srng.random::<f64>() * 30.0) as i32;
            let times = irregular_grid_with(
                cfg.breaths_per_session,
                cov.mean_gap,
                cov.gap_jitter,
                &mut srng,
            )?;
            let intercept =
                rng::standard_normal(&mut srng) / math::sqrt(cfg.truth.tau_alpha);
            session_intercepts.push(intercept);
            let amp = 0.6 + 0.8 * srng.random::<f64>();
            let span = times.last().unwrap() - times[0];
            let profile: Vec<f64> = times
                .iter()
                .map(|&t| {
                    let frac = if span > 0.0 { (t - times[0]) / span } else { 0.0 };
                    let s = math::cos(core::f64::consts::PI * (frac - 0.5));
                    amp * s * s
                })
                .collect();
            let w_vt = ou_sample_with(&times, &wobble(cov.wobble_sd_vt), &mut srng)?;
            let w_pet = ou_sample_with(&times, &wobble(cov.wobble_sd_petco2), &mut srng)?;
            let w_rr = ou_sample_with(&times, &wobble(cov.wobble_sd_rr), &mut srng)?;
            let ou = ou_sample_with(&times, &cfg.truth.ou(), &mut srng)?;
            ou_paths.push(ou.values.clone());

            let breaths: Vec<Breath> = (0..cfg.breaths_per_session)
                .map(|k| Breath {
                    t: times[k],
                    vo2: None,
                    vt: math::exp(pd.base_log_vt + cov.load_vt * profile[k] + w_vt.values[k]),
                    petco2: math::exp(
                        pd.base_log_petco2 + cov.load_petco2 * profile[k] + w_pet.values[k],
                    ),
                    rr: math::exp(pd.base_log_rr + cov.load_rr * profile[k] + w_rr.values[k]),
                })
                .collect();
            sessions.push(SessionData {
                id: format!("p{:03}s{:02}", pi + 1, sj + 1),
                meta: SessionMeta {
                    patient_id: format!("p{:03}", pi + 1),
                    sofa,
                    quality,
                    days_since_admission: days,
                },
                breaths,
            });
        }
        patients_data.push(PatientData {
            id: format!("p{:03}", pi + 1),
            meta: pd.meta.clone(),
            sessions,
        });
    }
    let covariate_ds = Dataset { patients: patients_data };

    // Assemble η with the exact design machinery the fit uses, so the
    // emitted data and the analysis model agree to the last bit.
    let frame = build_frame(&covariate_ds, &FrameSpec::default(), None)?;
    let layout = model::layout(&frame, &ModelSpec::default())?;
    let x_true = truth_vector(
        &layout,
        &cfg.fixed,
        &session_intercepts,
        &patient_draws.iter().map(|p| p.slope).collect::<Vec<_>>(),
        &ou_paths,
    );
    let eta = model::linear_predictor(&frame, &layout, &x_true);

    let tau = math::exp(cfg.obs_log_precision);
    let noise_sd = 1.0 / math::sqrt(tau);
    let mut noise_rng = rng::stream_rng(cfg.seed, STREAM_NOISE);
    let mut ds = covariate_ds;
    let mut row = 0usize;
    for p in &mut ds.patients {
        for s in &mut p.sessions {
            for b in &mut s.breaths {
                let y = eta[row] + noise_sd * rng::standard_normal(&mut noise_rng);
                b.vo2 = Some(math::exp(y));
                row += 1;
            }
        }
    }

    if let Some(spikes) = &cov.spikes {
        let mut spike_rng = rng::stream_rng(cfg.seed, STREAM_SPIKES);
        for p in &mut ds.patients {
            for s in &mut p.sessions {
                for b in &mut s.breaths {
                    if spike_rng.random::<f64>() < spikes.rate {
                        let bump = 1.0 + spikes.amplitude * spike_rng.random::<f64>();
                        b.vt *= bump;
                        b.rr *= bump;
                        b.petco2 *= 2.0 - bump.min(1.99);
                        if let Some(v) = b.vo2.as_mut() {
                            *v *= bump;
                        }
                    }
                }
            }
        }
    }

    let truth = SimTruth {
        session_intercepts,
        patient_slopes: patient_draws.iter().map(|p| p.slope).collect(),
        ou_paths,
        eta,
        centering: frame.centering,
    };
    Ok((ds, truth))
}

/// Pack the generative draws into a latent vector in layout order.
pub fn truth_vector(
    layout: &LatentLayout,
    fixed: &[f64],
    session_intercepts: &[f64],
    patient_slopes: &[f64],
    ou_paths: &[Vec<f64>],
) -> Vec<f64> {
    let mut x = alloc::vec![0.0; layout.dim()];
    x[..layout.n_fixed].copy_from_slice(&fixed[..layout.n_fixed]);
    if layout.spec.session_intercepts {
        for (j, &a) in session_intercepts.iter().enumerate() {
            x[layout.session_slot(j).unwrap()] = a;
        }
    }
    if layout.spec.patient_slopes {
        for (i, &b) in patient_slopes.iter().enumerate() {
            x[layout.patient_slot(i).unwrap()] = b;
        }
    }
    if layout.spec.temporal {
        let mut r = 0usize;
        for path in ou_paths {
            for &s in path {
                x[layout.ou_slot(r).unwrap()] = s;
                r += 1;
            }
        }
    }
    x
}

/// Rebuild a [`ModelFrame`] for the emitted dataset exactly as the
/// simulator did internally (fresh constants, full design).
pub fn frame_for(ds: &Dataset) -> Result<ModelFrame> {
    build_frame(ds, &FrameSpec::default(), None)
}

/// Session and patient metadata maps of a dataset, in the shape the
/// ingestion constructor takes.
pub fn metadata_maps(
    ds: &Dataset,
) -> (BTreeMap<String, SessionMeta>, BTreeMap<String, PatientMeta>) {
    let mut sessions = BTreeMap::new();
    let mut patients = BTreeMap::new();
    for p in &ds.patients {
        patients.insert(p.id.clone(), p.meta.clone());
        for s in &p.sessions {
            sessions.insert(s.id.clone(), s.meta.clone());
        }
    }
    (sessions, patients)
}
