//! Breath-by-breath rehabilitation data: validated grouping by patient and
//! session, rolling-average smoothing, quality filtering and value screening.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Clinician-assessed session quality.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum Quality {
    Good,
    Reasonable,
    Poor,
}

impl Quality {
    pub const ALL: [Quality; 3] = [Quality::Good, Quality::Reasonable, Quality::Poor];

    pub fn as_str(&self) -> &'static str {
        match self {
            Quality::Good => "good",
            Quality::Reasonable => "reasonable",
            Quality::Poor => "poor",
        }
    }
}

impl core::str::FromStr for Quality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_lowercase().as_str() {
            "good" => Ok(Quality::Good),
            "reasonable" => Ok(Quality::Reasonable),
            "poor" => Ok(Quality::Poor),
            other => Err(Error::BadMeta {
                field: "quality".to_string(),
                detail: alloc::format!("expected good/reasonable/poor, got `{other}`"),
            }),
        }
    }
}

/// Per-session metadata.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SessionMeta {
    pub patient_id: String,
    pub sofa: i32,
    pub quality: Quality,
    pub days_since_admission: i32,
}

/// Per-patient baseline characteristics.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PatientMeta {
    pub age: f64,
    pub bmi: f64,
    /// Binary sex code (0/1).
    pub sex: u8,
    /// Pre-admission activity level, ordinal 1-4.
    pub gppaq: u8,
}

impl PatientMeta {
    pub fn new(age: f64, bmi: f64, sex: u8, gppaq: u8) -> Result<Self> {
        if !(age > 0.0) {
            return Err(Error::BadMeta { field: "age".to_string(), detail: "must be > 0".to_string() });
        }
        if !(bmi > 0.0) {
            return Err(Error::BadMeta { field: "bmi".to_string(), detail: "must be > 0".to_string() });
        }
        if sex > 1 {
            return Err(Error::BadMeta { field: "sex".to_string(), detail: "must be 0 or 1".to_string() });
        }
        if !(1..=4).contains(&gppaq) {
            return Err(Error::BadMeta { field: "gppaq".to_string(), detail: "must be 1-4".to_string() });
        }
        Ok(PatientMeta { age, bmi, sex, gppaq })
    }
}

/// One parsed input row.
#[derive(Debug, Clone, PartialEq)]
pub struct BreathRecord {
    pub patient_id: String,
    pub session_id: String,
    /// Seconds since session start.
    pub t: f64,
    /// mL·kg⁻¹·min⁻¹; absent at prediction time.
    pub vo2: Option<f64>,
    /// Tidal volume, litres.
    pub vt: f64,
    /// Breaths per minute.
    pub rr: f64,
    /// End-tidal CO₂ (kPa or mmHg, as declared in the run configuration).
    pub petco2: f64,
}

/// Per-breath payload once grouped under its session.
#[derive(Debug, Clone, PartialEq)]
pub struct Breath {
    pub t: f64,
    pub vo2: Option<f64>,
    pub vt: f64,
    pub rr: f64,
    pub petco2: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionData {
    pub id: String,
    pub meta: SessionMeta,
    pub breaths: Vec<Breath>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatientData {
    pub id: String,
    pub meta: PatientMeta,
    pub sessions: Vec<SessionData>,
}

/// Result of a quality filter, carrying what was dropped so callers can warn.
#[derive(Debug, Clone)]
pub struct FilterOutcome {
    pub dataset: Dataset,
    pub removed_sessions: usize,
    pub removed_patients: usize,
}

/// Optional per-covariate screening bounds (inclusive).
#[derive(Debug, Clone, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ScreenBounds {
    pub vt: (Option<f64>, Option<f64>),
    pub rr: (Option<f64>, Option<f64>),
    pub petco2: (Option<f64>, Option<f64>),
    pub vo2: (Option<f64>, Option<f64>),
}

impl ScreenBounds {
    fn keeps(&self, b: &Breath) -> bool {
        fn within(v: f64, lo: Option<f64>, hi: Option<f64>) -> bool {
            lo.is_none_or(|l| v >= l) && hi.is_none_or(|h| v <= h)
        }
        within(b.vt, self.vt.0, self.vt.1)
            && within(b.rr, self.rr.0, self.rr.1)
            && within(b.petco2, self.petco2.0, self.petco2.1)
            && b.vo2.is_none_or(|v| within(v, self.vo2.0, self.vo2.1))
    }
}

/// Immutable grouped dataset: patients, each with sessions, each with
/// time-ordered breaths. All transformation methods return new datasets.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub patients: Vec<PatientData>,
}

impl Dataset {
    /// Group validated records under patients and sessions, preserving first
    /// appearance order and sorting each session by time. Duplicate
    /// timestamps within a session are rejected; positivity of the
    /// physiological values is enforced here with 1-based record positions
    /// in the error.
    pub fn from_records<I>(
        records: I,
        sessions: &BTreeMap<String, SessionMeta>,
        patients: &BTreeMap<String, PatientMeta>,
    ) -> Result<Dataset>
    where
        I: IntoIterator<Item = BreathRecord>,
    {
        let mut ds = Dataset::default();
        let mut patient_idx: BTreeMap<String, usize> = BTreeMap::new();
        let mut session_idx: BTreeMap<String, (usize, usize)> = BTreeMap::new();

        for (pos, rec) in records.into_iter().enumerate() {
            let row = pos + 1;
            check_positive(row, "vt", rec.vt)?;
            check_positive(row, "rr", rec.rr)?;
            check_positive(row, "petco2", rec.petco2)?;
            if let Some(v) = rec.vo2 {
                check_positive(row, "vo2", v)?;
            }
            if !rec.t.is_finite() || rec.t < 0.0 {
                return Err(Error::BadNumber { row, column: "t_seconds".to_string() });
            }

            let smeta = sessions
                .get(&rec.session_id)
                .ok_or_else(|| Error::MissingSessionMeta { session: rec.session_id.clone() })?;
            if smeta.patient_id != rec.patient_id {
                return Err(Error::BadMeta {
                    field: "session".to_string(),
                    detail: alloc::format!(
                        "session `{}` belongs to patient `{}`, record says `{}`",
                        rec.session_id,
                        smeta.patient_id,
                        rec.patient_id
                    ),
                });
            }

            let pi = match patient_idx.get(&rec.patient_id) {
                Some(&pi) => pi,
                None => {
                    let meta = patients
                        .get(&rec.patient_id)
                        .ok_or_else(|| Error::MissingPatientMeta {
                            patient: rec.patient_id.clone(),
                        })?
                        .clone();
                    let pi = ds.patients.len();
                    ds.patients.push(PatientData {
                        id: rec.patient_id.clone(),
                        meta,
                        sessions: Vec::new(),
                    });
                    patient_idx.insert(rec.patient_id.clone(), pi);
                    pi
                }
            };

            let si = match session_idx.get(&rec.session_id) {
                Some(&(spi, si)) => {
                    if spi != pi {
                        return Err(Error::BadMeta {
                            field: "session".to_string(),
                            detail: alloc::format!(
                                "session `{}` appears under two patients",
                                rec.session_id
                            ),
                        });
                    }
                    si
                }
                None => {
                    let si = ds.patients[pi].sessions.len();
                    ds.patients[pi].sessions.push(SessionData {
                        id: rec.session_id.clone(),
                        meta: smeta.clone(),
                        breaths: Vec::new(),
                    });
                    session_idx.insert(rec.session_id.clone(), (pi, si));
                    si
                }
            };

            ds.patients[pi].sessions[si].breaths.push(Breath {
                t: rec.t,
                vo2: rec.vo2,
                vt: rec.vt,
                rr: rec.rr,
                petco2: rec.petco2,
            });
        }

        // Order each session by time; equal timestamps are duplicates.
        for p in &mut ds.patients {
            for s in &mut p.sessions {
                s.breaths.sort_by(|a, b| a.t.partial_cmp(&b.t).expect("finite times"));
                for (k, w) in s.breaths.windows(2).enumerate() {
                    if !(w[1].t > w[0].t) {
                        return Err(Error::NonIncreasingTime {
                            session: s.id.clone(),
                            row: k + 2,
                        });
                    }
                }
            }
        }
        Ok(ds)
    }

    pub fn n_patients(&self) -> usize {
        self.patients.len()
    }

    pub fn n_sessions(&self) -> usize {
        self.patients.iter().map(|p| p.sessions.len()).sum()
    }

    pub fn n_obs(&self) -> usize {
        self.patients
            .iter()
            .flat_map(|p| &p.sessions)
            .map(|s| s.breaths.len())
            .sum()
    }

    pub fn is_empty(&self) -> bool {
        self.patients.is_empty()
    }

    pub fn sessions(&self) -> impl Iterator<Item = (&PatientData, &SessionData)> {
        self.patients
            .iter()
            .flat_map(|p| p.sessions.iter().map(move |s| (p, s)))
    }

    pub fn find_session(&self, session_id: &str) -> Option<(usize, usize)> {
        for (pi, p) in self.patients.iter().enumerate() {
            for (si, s) in p.sessions.iter().enumerate() {
                if s.id == session_id {
                    return Some((pi, si));
                }
            }
        }
        None
    }

    /// Centered rolling average with the window truncated at session
    /// boundaries, applied to the physiological covariates and, where
    /// present, V̇O₂. Timestamps and grouping are unchanged. The window must
    /// be odd; a window of 1 is the identity.
    pub fn smooth(&self, window: usize) -> Result<Dataset> {
        if window < 1 || window % 2 == 0 {
            return Err(Error::BadWindow { window });
        }
        if window == 1 {
            return Ok(self.clone());
        }
        let half = window / 2;
        let mut out = self.clone();
        for p in &mut out.patients {
            for s in &mut p.sessions {
                let n = s.breaths.len();
                let src = s.breaths.clone();
                // Mean taken as deviations around the centre value: exact on
                // constant stretches and better conditioned elsewhere.
                let smooth_one = |get: &dyn Fn(&Breath) -> f64, i: usize| -> f64 {
                    let lo = i.saturating_sub(half);
                    let hi = (i + half + 1).min(n);
                    let pivot = get(&src[i]);
                    let sum: f64 = src[lo..hi].iter().map(|b| get(b) - pivot).sum();
                    pivot + sum / (hi - lo) as f64
                };
                let vo2_complete = src.iter().all(|b| b.vo2.is_some());
                for (i, b) in s.breaths.iter_mut().enumerate() {
                    b.vt = smooth_one(&|b| b.vt, i);
                    b.rr = smooth_one(&|b| b.rr, i);
                    b.petco2 = smooth_one(&|b| b.petco2, i);
                    if vo2_complete {
                        b.vo2 = Some(smooth_one(&|b| b.vo2.unwrap(), i));
                    }
                }
            }
        }
        Ok(out)
    }

    /// Keep only sessions whose quality is in `allowed`; patients left with
    /// no sessions are dropped. An empty result is permitted and reported
    /// through the outcome counts.
    pub fn filter_quality(&self, allowed: &[Quality]) -> FilterOutcome {
        let before_sessions = self.n_sessions();
        let before_patients = self.n_patients();
        let mut dataset = self.clone();
        for p in &mut dataset.patients {
            p.sessions.retain(|s| allowed.contains(&s.meta.quality));
        }
        dataset.patients.retain(|p| !p.sessions.is_empty());
        FilterOutcome {
            removed_sessions: before_sessions - dataset.n_sessions(),
            removed_patients: before_patients - dataset.n_patients(),
            dataset,
        }
    }

    /// Drop rows outside the configured bounds; returns the cleaned dataset
    /// and the number of rows removed. Sessions or patients emptied by the
    /// screen are dropped.
    pub fn screen(&self, bounds: &ScreenBounds) -> (Dataset, usize) {
        let before = self.n_obs();
        let mut out = self.clone();
        for p in &mut out.patients {
            for s in &mut p.sessions {
                s.breaths.retain(|b| bounds.keeps(b));
            }
            p.sessions.retain(|s| !s.breaths.is_empty());
        }
        out.patients.retain(|p| !p.sessions.is_empty());
        let removed = before - out.n_obs();
        (out, removed)
    }

    /// Drop patients younger than `min_age`; returns the filtered dataset and
    /// the number of patients removed.
    pub fn filter_min_age(&self, min_age: f64) -> (Dataset, usize) {
        let before = self.n_patients();
        let mut out = self.clone();
        out.patients.retain(|p| p.meta.age >= min_age);
        let removed = before - out.n_patients();
        (out, removed)
    }

    pub fn without_patient(&self, patient_id: &str) -> Dataset {
        let mut out = self.clone();
        out.patients.retain(|p| p.id != patient_id);
        out
    }

    pub fn only_patient(&self, patient_id: &str) -> Dataset {
        let mut out = self.clone();
        out.patients.retain(|p| p.id == patient_id);
        out
    }
}

fn check_positive(row: usize, column: &str, value: f64) -> Result<()> {
    if !(value > 0.0) || !value.is_finite() {
        return Err(Error::NonPositiveValue { row, column: column.to_string(), value });
    }
    Ok(())
}
