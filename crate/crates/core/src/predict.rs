//! Predictive distributions of V̇O₂ for new rows and classification into
//! the four exercise-intensity categories.
//!
//! Per joint-posterior sample the predictive density of a row's log V̇O₂ is
//! Gaussian: the sampled fixed effects (plus whichever group deviations the
//! prediction mode treats as known) give the mean, and the unknown group
//! deviations contribute their variances in closed form. The temporal term
//! always enters through its stationary marginal variance `τ_s⁻¹`; path
//! simulation along time belongs to the simulator, not the classifier.
//! Category probabilities are Gaussian interval probabilities of the
//! log-scale bands, averaged over the samples.

use alloc::string::ToString;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::frame::ModelFrame;
use crate::inference::{pick_grid_index, FitResult};
use crate::math;
use crate::rng;

/// Exercise-intensity categories in ascending order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum Category {
    Rest,
    Low,
    Medium,
    High,
}

impl Category {
    pub const ALL: [Category; 4] = [Category::Rest, Category::Low, Category::Medium, Category::High];

    pub fn index(&self) -> usize {
        match self {
            Category::Rest => 0,
            Category::Low => 1,
            Category::Medium => 2,
            Category::High => 3,
        }
    }

    pub fn from_index(i: usize) -> Category {
        Category::ALL[i]
    }

    pub fn name(&self) -> &'static str {
        match self {
            Category::Rest => "rest",
            Category::Low => "low",
            Category::Medium => "medium",
            Category::High => "high",
        }
    }
}

impl core::str::FromStr for Category {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_lowercase().as_str() {
            "rest" => Ok(Category::Rest),
            "low" => Ok(Category::Low),
            "medium" | "med" => Ok(Category::Medium),
            "high" => Ok(Category::High),
            other => Err(Error::BadConfig { detail: alloc::format!("unknown category `{other}`") }),
        }
    }
}

/// Category boundaries on the V̇O₂ scale with the half-open `[lo, hi)`
/// convention: a value equal to a boundary belongs to the higher category.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CategoryThresholds {
    pub bounds: [f64; 3],
}

impl Default for CategoryThresholds {
    fn default() -> Self {
        CategoryThresholds { bounds: [3.5, 5.0, 7.5] }
    }
}

impl CategoryThresholds {
    pub fn new(bounds: [f64; 3]) -> Result<Self> {
        if !(bounds[0] > 0.0 && bounds[0] < bounds[1] && bounds[1] < bounds[2]) {
            return Err(Error::BadConfig {
                detail: "category boundaries must be positive and strictly increasing".to_string(),
            });
        }
        Ok(CategoryThresholds { bounds })
    }

    /// Boundaries on the log scale; these are exactly the logs of the
    /// configured V̇O₂ boundaries, never independent constants.
    pub fn log_bounds(&self) -> [f64; 3] {
        [math::ln(self.bounds[0]), math::ln(self.bounds[1]), math::ln(self.bounds[2])]
    }

    pub fn category_of_log(&self, log_vo2: f64) -> Category {
        let lb = self.log_bounds();
        if log_vo2 < lb[0] {
            Category::Rest
        } else if log_vo2 < lb[1] {
            Category::Low
        } else if log_vo2 < lb[2] {
            Category::Medium
        } else {
            Category::High
        }
    }

    pub fn category_of_vo2(&self, vo2: f64) -> Category {
        // Compare on the raw scale so a value exactly equal to a boundary
        // lands in the higher category regardless of log rounding.
        if vo2 < self.bounds[0] {
            Category::Rest
        } else if vo2 < self.bounds[1] {
            Category::Low
        } else if vo2 < self.bounds[2] {
            Category::Medium
        } else {
            Category::High
        }
    }
}

/// Probabilities over the four categories.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CategoryProbs {
    pub rest: f64,
    pub low: f64,
    pub medium: f64,
    pub high: f64,
}

impl CategoryProbs {
    pub fn as_array(&self) -> [f64; 4] {
        [self.rest, self.low, self.medium, self.high]
    }

    pub fn from_array(a: [f64; 4]) -> CategoryProbs {
        CategoryProbs { rest: a[0], low: a[1], medium: a[2], high: a[3] }
    }

    pub fn get(&self, c: Category) -> f64 {
        self.as_array()[c.index()]
    }

    /// Point mass on one category.
    pub fn point_mass(c: Category) -> CategoryProbs {
        let mut a = [0.0; 4];
        a[c.index()] = 1.0;
        CategoryProbs::from_array(a)
    }
}

/// One per-sample Gaussian predictive for a row: mean and variance of log
/// V̇O₂ (on the uncentered log scale).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PredictiveDraw {
    pub mean: f64,
    pub var: f64,
}

/// How much of the hierarchy is known for the rows being predicted.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum PredictMode {
    /// Nothing known: intercept, slope and temporal deviations all enter
    /// as variance.
    NewPatient,
    /// Patient known: its sampled slope deviation moves into the mean; a
    /// fresh session intercept and the temporal term stay as variance.
    NewSession,
    /// Session and patient known: both sampled deviations move into the
    /// mean; only the temporal term stays as variance.
    InSample,
}

impl core::str::FromStr for PredictMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_lowercase().replace('-', "_").as_str() {
            "new_patient" => Ok(PredictMode::NewPatient),
            "new_session" => Ok(PredictMode::NewSession),
            "in_sample" => Ok(PredictMode::InSample),
            other => Err(Error::BadConfig {
                detail: alloc::format!("unknown prediction mode `{other}`"),
            }),
        }
    }
}

/// Posterior draws reduced to what prediction needs: θ, fixed effects and
/// group deviations, one entry per joint-posterior sample.
pub struct SampleBank {
    pub thetas: Vec<crate::model::HyperParams>,
    /// Per sample: the dense latent block (fixed effects, then session
    /// deviations, then patient deviations) in layout order.
    pub rest: Vec<Vec<f64>>,
}

/// Draw the dense latent block for `n` joint-posterior samples. The dense
/// block's marginal under each conditional is exact, so no temporal states
/// need to be drawn here.
pub fn sample_bank(fit: &FitResult, n: usize, seed: u64) -> SampleBank {
    let mut thetas = Vec::with_capacity(n);
    let mut rest = Vec::with_capacity(n);
    for i in 0..n {
        let mut r = rng::stream_rng(seed, i as u64);
        let u: f64 = r.random();
        let k = pick_grid_index(&fit.grid, u);
        thetas.push(fit.grid.points[k].theta);
        rest.push(fit.conditionals[k].sample_rest(&mut r));
    }
    SampleBank { thetas, rest }
}

fn map_ids<'a>(from: &'a [alloc::string::String], to: &[alloc::string::String]) -> Vec<Option<usize>> {
    from.iter()
        .map(|id| to.iter().position(|t| t == id))
        .collect()
}

/// Per-row predictive draws for every row of `new_frame`, one draw per
/// joint-posterior sample (default sample count in the calling tools:
/// 1000). The new frame must have been built with the fit's centering
/// constants. Returned means are on the uncentered log V̇O₂ scale.
pub fn predict_rows(
    fit: &FitResult,
    new_frame: &ModelFrame,
    mode: PredictMode,
    n: usize,
    seed: u64,
) -> Result<Vec<Vec<PredictiveDraw>>> {
    if new_frame.centering != fit.frame.centering {
        return Err(Error::CenteringMismatch);
    }
    if new_frame.spec != fit.frame.spec {
        return Err(Error::CenteringMismatch);
    }
    let response_center = fit.frame.centering.log_vo2.ok_or(Error::NoResponse)?;
    let bank = sample_bank(fit, n, seed);

    // Map the new frame's patients/sessions onto the fit's indices.
    let patient_map = map_ids(&new_frame.patient_ids, &fit.frame.patient_ids);
    let session_map = map_ids(&new_frame.session_ids, &fit.frame.session_ids);
    if matches!(mode, PredictMode::NewSession | PredictMode::InSample) {
        for (pi, m) in patient_map.iter().enumerate() {
            if m.is_none() {
                return Err(Error::UnknownPatient { patient: new_frame.patient_ids[pi].clone() });
            }
        }
    }
    if matches!(mode, PredictMode::InSample) {
        for (si, m) in session_map.iter().enumerate() {
            if m.is_none() {
                return Err(Error::UnknownSession { session: new_frame.session_ids[si].clone() });
            }
        }
    }

    let layout = &fit.layout;
    let spec = layout.spec;
    let nf = layout.n_fixed;
    let obs_var = 1.0 / fit.priors.obs_precision;
    let mut out = Vec::with_capacity(new_frame.n_rows());
    for row in &new_frame.rows {
        let mut draws = Vec::with_capacity(n);
        let cvt = row.covariates[crate::frame::COL_LOG_VT];
        for s in 0..n {
            let rest = &bank.rest[s];
            let theta = &bank.thetas[s];
            let mut mean: f64 =
                row.covariates.iter().zip(&rest[..nf]).map(|(a, b)| a * b).sum();
            let mut var = obs_var;
            if spec.temporal {
                var += 1.0 / theta.tau_s;
            }
            match mode {
                PredictMode::NewPatient => {
                    if spec.session_intercepts {
                        var += 1.0 / theta.tau_alpha;
                    }
                    if spec.patient_slopes {
                        var += cvt * cvt / theta.tau_beta1;
                    }
                }
                PredictMode::NewSession => {
                    if spec.session_intercepts {
                        var += 1.0 / theta.tau_alpha;
                    }
                    if spec.patient_slopes {
                        let pi = patient_map[row.patient].unwrap();
                        mean += rest[layout.patient_slot(pi).unwrap()] * cvt;
                    }
                }
                PredictMode::InSample => {
                    if spec.session_intercepts {
                        let sj = session_map[row.session].unwrap();
                        mean += rest[layout.session_slot(sj).unwrap()];
                    }
                    if spec.patient_slopes {
                        let pi = patient_map[row.patient].unwrap();
                        mean += rest[layout.patient_slot(pi).unwrap()] * cvt;
                    }
                }
            }
            draws.push(PredictiveDraw { mean: mean + response_center, var });
        }
        out.push(draws);
    }
    Ok(out)
}

/// Category probabilities for one row: Gaussian interval probabilities of
/// the log-scale bands under each draw, averaged over draws. Probabilities
/// telescope, so they sum to one exactly. A draw with zero variance is a
/// point mass classified under the `[lo, hi)` convention.
pub fn classify(draws: &[PredictiveDraw], thresholds: &CategoryThresholds) -> CategoryProbs {
    let lb = thresholds.log_bounds();
    let mut acc = [0.0f64; 4];
    for d in draws {
        if d.var > 0.0 {
            let sd = math::sqrt(d.var);
            let p1 = math::normal_cdf((lb[0] - d.mean) / sd);
            let p2 = math::normal_cdf((lb[1] - d.mean) / sd);
            let p3 = math::normal_cdf((lb[2] - d.mean) / sd);
            acc[0] += p1;
            acc[1] += p2 - p1;
            acc[2] += p3 - p2;
            acc[3] += 1.0 - p3;
        } else {
            acc[thresholds.category_of_log(d.mean).index()] += 1.0;
        }
    }
    let n = draws.len().max(1) as f64;
    CategoryProbs::from_array([acc[0] / n, acc[1] / n, acc[2] / n, acc[3] / n])
}

/// Highest-probability category; ties break toward the higher category.
pub fn argmax_category(p: &CategoryProbs) -> Category {
    let a = p.as_array();
    let mut best = Category::Rest;
    for c in Category::ALL {
        if a[c.index()] >= a[best.index()] {
            best = c;
        }
    }
    best
}

/// Alert when the probability of high intensity reaches the threshold
/// (inclusive).
pub fn high_alert(p: &CategoryProbs, threshold: f64) -> bool {
    p.high >= threshold
}
