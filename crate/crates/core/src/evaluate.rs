//! Internal validation: leave-one-patient-out cross-validation and the
//! in-time posterior predictive split.
//!
//! Every fold refits from scratch on the training patients — fresh
//! centering constants included — so no information from the held-out
//! patient can reach the fold's fit through any path. The held-out rows
//! are then predicted in new-patient mode, classified, and scored with
//! zero-one loss and the ranked probability score.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::Rng as _;

use crate::data::{Dataset, Quality};
use crate::error::{Error, Result};
use crate::frame::{build_frame, FrameSpec};
use crate::inference::{fit, FitOptions};
use crate::metrics::{mean_rps, zero_one_loss, ConfusionMatrix};
use crate::model::{ModelSpec, PriorSpec};
use crate::predict::{argmax_category, classify, predict_rows, Category, CategoryProbs,
    CategoryThresholds, PredictMode};
use crate::rng;

/// Split for the in-time posterior predictive check: the target session's
/// rows strictly before `t_cut` stay in training (along with every other
/// session in full); its rows at or after `t_cut` form the test set.
pub fn ppc_split(ds: &Dataset, session_id: &str, t_cut: f64) -> Result<(Dataset, Dataset)> {
    let (pi, si) = ds
        .find_session(session_id)
        .ok_or_else(|| Error::SessionNotFound { session: session_id.to_string() })?;
    let breaths = &ds.patients[pi].sessions[si].breaths;
    let start = breaths.first().map(|b| b.t).unwrap_or(0.0);
    let end = breaths.last().map(|b| b.t).unwrap_or(0.0);
    if !(t_cut > start && t_cut <= end) {
        return Err(Error::CutOutsideSpan { t_cut, start, end });
    }

    let mut train = ds.clone();
    let session = &mut train.patients[pi].sessions[si];
    session.breaths.retain(|b| b.t < t_cut);

    let mut test = Dataset::default();
    let mut patient = ds.patients[pi].clone();
    let mut target = ds.patients[pi].sessions[si].clone();
    target.breaths.retain(|b| b.t >= t_cut);
    patient.sessions = alloc::vec![target];
    test.patients.push(patient);
    Ok((train, test))
}

/// Everything a cross-validation fold needs to fit and score.
#[derive(Debug, Clone)]
pub struct CvSettings {
    pub frame_spec: FrameSpec,
    pub model_spec: ModelSpec,
    pub priors: PriorSpec,
    pub fit_options: FitOptions,
    pub thresholds: CategoryThresholds,
    /// Joint-posterior samples per fold.
    pub n_samples: usize,
    /// Rolling-average window applied to both fold sides; `None` for raw.
    pub smooth_window: Option<usize>,
}

impl Default for CvSettings {
    fn default() -> Self {
        CvSettings {
            frame_spec: FrameSpec::default(),
            model_spec: ModelSpec::default(),
            priors: PriorSpec::default(),
            fit_options: FitOptions::default(),
            thresholds: CategoryThresholds::default(),
            n_samples: 1000,
            smooth_window: None,
        }
    }
}

/// Per-session tallies inside a fold, for the quality breakdown.
#[derive(Debug, Clone)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SessionScore {
    pub session_id: String,
    pub quality: Quality,
    pub n_rows: usize,
    pub n_correct: usize,
}

/// Outcome of one fold. A failed fit is recorded, not propagated, so the
/// remaining folds still run.
#[derive(Debug, Clone)]
pub struct FoldResult {
    pub patient_id: String,
    pub n_rows: usize,
    pub confusion: ConfusionMatrix,
    pub zero_one: f64,
    pub mean_rps: f64,
    pub session_scores: Vec<SessionScore>,
    pub probs: Vec<CategoryProbs>,
    pub observed: Vec<Category>,
    pub failure: Option<String>,
}

/// Fit on every patient except `patient_id`, predict that patient's rows in
/// new-patient mode, classify and score.
pub fn run_fold(ds: &Dataset, patient_id: &str, settings: &CvSettings, seed: u64) -> FoldResult {
    match try_fold(ds, patient_id, settings, seed) {
        Ok(f) => f,
        Err(e) => FoldResult {
            patient_id: patient_id.to_string(),
            n_rows: 0,
            confusion: ConfusionMatrix::default(),
            zero_one: f64::NAN,
            mean_rps: f64::NAN,
            session_scores: Vec::new(),
            probs: Vec::new(),
            observed: Vec::new(),
            failure: Some(format!("{e}")),
        },
    }
}

fn try_fold(
    ds: &Dataset,
    patient_id: &str,
    settings: &CvSettings,
    seed: u64,
) -> Result<FoldResult> {
    let mut train = ds.without_patient(patient_id);
    let mut test = ds.only_patient(patient_id);
    // Leakage guard: the fold's training data must not contain the held-out
    // patient in any form.
    assert!(train.patients.iter().all(|p| p.id != patient_id));
    if let Some(w) = settings.smooth_window {
        train = train.smooth(w)?;
        test = test.smooth(w)?;
    }
    let train_frame = build_frame(&train, &settings.frame_spec, None)?;
    let fitted = fit(
        train_frame,
        &settings.priors,
        &settings.model_spec,
        &settings.fit_options,
    )?;
    let test_frame = build_frame(&test, &settings.frame_spec, Some(fitted.centering()))?;
    let draws = predict_rows(
        &fitted,
        &test_frame,
        PredictMode::NewPatient,
        settings.n_samples,
        seed,
    )?;

    let mut probs = Vec::with_capacity(draws.len());
    let mut preds = Vec::with_capacity(draws.len());
    let mut observed = Vec::with_capacity(draws.len());
    for (row, row_draws) in test_frame.rows.iter().zip(&draws) {
        let p = classify(row_draws, &settings.thresholds);
        preds.push(argmax_category(&p));
        probs.push(p);
        let centered = row.response.ok_or(Error::NoResponse)?;
        let log_vo2 = centered + fitted.centering().log_vo2.ok_or(Error::NoResponse)?;
        observed.push(settings.thresholds.category_of_log(log_vo2));
    }

    let mut session_scores = Vec::new();
    for (j, sid) in test_frame.session_ids.iter().enumerate() {
        let (a, b) = test_frame.session_rows[j];
        let quality = test
            .sessions()
            .find(|(_, s)| &s.id == sid)
            .map(|(_, s)| s.meta.quality)
            .unwrap_or(Quality::Good);
        let n_correct = (a..b).filter(|&r| preds[r] == observed[r]).count();
        session_scores.push(SessionScore {
            session_id: sid.clone(),
            quality,
            n_rows: b - a,
            n_correct,
        });
    }

    Ok(FoldResult {
        patient_id: patient_id.to_string(),
        n_rows: preds.len(),
        confusion: ConfusionMatrix::from_pairs(&preds, &observed)?,
        zero_one: zero_one_loss(&preds, &observed)?,
        mean_rps: mean_rps(&probs, &observed)?,
        session_scores,
        probs,
        observed,
        failure: None,
    })
}

/// Accuracy by session quality, reported both ways the average can be
/// taken: pooled over rows and as a mean over per-session accuracies.
#[derive(Debug, Clone)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct QualityAccuracy {
    pub quality: Quality,
    pub n_rows: usize,
    pub n_sessions: usize,
    pub row_accuracy: f64,
    pub session_mean_accuracy: f64,
}

/// Cross-validation report: per-fold results plus pooled totals.
#[derive(Debug, Clone)]
pub struct CvReport {
    pub folds: Vec<FoldResult>,
    pub pooled: ConfusionMatrix,
    pub pooled_zero_one: f64,
    pub pooled_mean_rps: f64,
    pub quality_breakdown: Vec<QualityAccuracy>,
}

/// Derive the per-fold seed from the run seed and the fold's position.
pub fn fold_seed(seed: u64, fold: usize) -> u64 {
    // splitmix64 step keeps fold streams decorrelated.
    let mut z = seed ^ (0x9e3779b97f4a7c15u64.wrapping_mul(fold as u64 + 1));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Leave-one-patient-out cross-validation, folds in patient order.
pub fn lopo_cv(ds: &Dataset, settings: &CvSettings, seed: u64) -> Result<CvReport> {
    if ds.n_patients() < 2 {
        return Err(Error::TooFewPatients { found: ds.n_patients() });
    }
    let folds: Vec<FoldResult> = ds
        .patients
        .iter()
        .enumerate()
        .map(|(k, p)| run_fold(ds, &p.id, settings, fold_seed(seed, k)))
        .collect();
    Ok(merge_folds(folds))
}

/// Combine fold outcomes into the report; pooled counts are the sum of the
/// fold counts.
pub fn merge_folds(folds: Vec<FoldResult>) -> CvReport {
    let mut pooled = ConfusionMatrix::default();
    let mut rps_weighted = 0.0;
    let mut rows = 0usize;
    for f in folds.iter().filter(|f| f.failure.is_none()) {
        pooled.merge(&f.confusion);
        rps_weighted += f.mean_rps * f.n_rows as f64;
        rows += f.n_rows;
    }
    let pooled_zero_one = if pooled.total() > 0 { 1.0 - pooled.accuracy() } else { f64::NAN };
    let pooled_mean_rps = if rows > 0 { rps_weighted / rows as f64 } else { f64::NAN };

    let mut quality_breakdown = Vec::new();
    for q in Quality::ALL {
        let sessions: Vec<&SessionScore> = folds
            .iter()
            .filter(|f| f.failure.is_none())
            .flat_map(|f| f.session_scores.iter())
            .filter(|s| s.quality == q && s.n_rows > 0)
            .collect();
        if sessions.is_empty() {
            continue;
        }
        let n_rows: usize = sessions.iter().map(|s| s.n_rows).sum();
        let n_correct: usize = sessions.iter().map(|s| s.n_correct).sum();
        let session_mean = sessions
            .iter()
            .map(|s| s.n_correct as f64 / s.n_rows as f64)
            .sum::<f64>()
            / sessions.len() as f64;
        quality_breakdown.push(QualityAccuracy {
            quality: q,
            n_rows,
            n_sessions: sessions.len(),
            row_accuracy: n_correct as f64 / n_rows as f64,
            session_mean_accuracy: session_mean,
        });
    }

    CvReport { folds, pooled, pooled_zero_one, pooled_mean_rps, quality_breakdown }
}

/// Stream seed for dataset replicate `k` in simulation studies.
pub fn replicate_seed(seed: u64, k: usize) -> u64 {
    rng::stream_rng(seed, k as u64).random()
}
