//! Design data for the regression: log transforms, centering, dummy coding
//! and interaction columns.
//!
//! All continuous covariates and the response are logged and centered on
//! their training-sample means; the means are kept with the frame so that
//! prediction-time frames can be built with exactly the same constants.
//! Interactions are products of the centered logs. GPPAQ is dummy coded
//! against reference level 1; SOFA, sex and the GPPAQ dummies enter raw.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::math;

/// Training-sample means used for centering. Reusing a stored value at
/// prediction time is mandatory; recomputing on new data would silently
/// shift every coefficient.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Centering {
    pub log_vt: f64,
    pub log_petco2: f64,
    pub log_rr: f64,
    pub log_age: f64,
    pub log_bmi: f64,
    /// Mean of log V̇O₂ over training rows; `None` when the frame was built
    /// without responses.
    pub log_vo2: Option<f64>,
}

/// Formula toggles. The fixed-effect column set is either the full 14-term
/// design or, with patient-level covariates excluded, the 7 physiological
/// terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct FrameSpec {
    pub include_patient_covariates: bool,
}

impl Default for FrameSpec {
    fn default() -> Self {
        FrameSpec { include_patient_covariates: true }
    }
}

impl FrameSpec {
    pub fn n_fixed(&self) -> usize {
        if self.include_patient_covariates {
            14
        } else {
            7
        }
    }

    pub fn column_names(&self) -> Vec<String> {
        let mut names: Vec<String> = [
            "intercept",
            "log_vt",
            "log_petco2",
            "log_rr",
            "log_vt_x_log_petco2",
            "log_vt_x_log_rr",
            "sofa",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        if self.include_patient_covariates {
            for s in ["gppaq2", "gppaq3", "gppaq4", "sex", "log_age", "log_bmi", "log_age_x_log_bmi"] {
                names.push(s.to_string());
            }
        }
        names
    }
}

/// One design row: fixed-effect covariate values plus group indices.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct FrameRow {
    pub covariates: Vec<f64>,
    pub session: usize,
    pub patient: usize,
    pub t: f64,
    /// Centered log V̇O₂.
    pub response: Option<f64>,
}

/// Transformed design data, rows grouped contiguously by session in first
/// appearance order and ordered by time within each session.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ModelFrame {
    pub rows: Vec<FrameRow>,
    pub spec: FrameSpec,
    pub session_ids: Vec<String>,
    pub patient_ids: Vec<String>,
    /// Patient index of each session.
    pub session_patient: Vec<usize>,
    /// `[start, end)` row range of each session.
    pub session_rows: Vec<(usize, usize)>,
    pub centering: Centering,
}

/// Column index of the centered `log(V_T)` covariate (also the patient-slope
/// multiplier).
pub const COL_LOG_VT: usize = 1;

impl ModelFrame {
    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn n_fixed(&self) -> usize {
        self.spec.n_fixed()
    }

    pub fn n_sessions(&self) -> usize {
        self.session_ids.len()
    }

    pub fn n_patients(&self) -> usize {
        self.patient_ids.len()
    }

    /// Centered log tidal volume of a row.
    pub fn cvt(&self, r: usize) -> f64 {
        self.rows[r].covariates[COL_LOG_VT]
    }

    pub fn session_times(&self, j: usize) -> Vec<f64> {
        let (a, b) = self.session_rows[j];
        self.rows[a..b].iter().map(|r| r.t).collect()
    }

    pub fn all_session_times(&self) -> Vec<Vec<f64>> {
        (0..self.n_sessions()).map(|j| self.session_times(j)).collect()
    }

    pub fn has_responses(&self) -> bool {
        !self.rows.is_empty() && self.rows.iter().all(|r| r.response.is_some())
    }

    /// Centered responses; errors unless every row has one.
    pub fn responses(&self) -> Result<Vec<f64>> {
        self.rows
            .iter()
            .map(|r| r.response.ok_or(Error::NoResponse))
            .collect()
    }
}

/// Build a [`ModelFrame`] from a dataset. With `centering = None` the
/// constants are the dataset's own sample means (training use); passing
/// stored constants reproduces the training transform bit for bit on any
/// data.
pub fn build_frame(
    ds: &Dataset,
    spec: &FrameSpec,
    centering: Option<&Centering>,
) -> Result<ModelFrame> {
    struct Raw {
        log_vt: f64,
        log_petco2: f64,
        log_rr: f64,
        log_vo2: Option<f64>,
        t: f64,
        session: usize,
        patient: usize,
    }

    let mut raws: Vec<Raw> = Vec::with_capacity(ds.n_obs());
    let mut session_ids = Vec::new();
    let mut patient_ids = Vec::new();
    let mut session_patient = Vec::new();
    let mut session_sofa: Vec<f64> = Vec::new();
    let mut patient_logs: Vec<(f64, f64)> = Vec::new(); // (log age, log bmi)
    let mut patient_gppaq: Vec<u8> = Vec::new();
    let mut patient_sex: Vec<u8> = Vec::new();
    let mut row = 0usize;

    for p in &ds.patients {
        let pi = patient_ids.len();
        patient_ids.push(p.id.clone());
        patient_logs.push((
            checked_ln(p.meta.age, "age", row + 1)?,
            checked_ln(p.meta.bmi, "bmi", row + 1)?,
        ));
        patient_gppaq.push(p.meta.gppaq);
        patient_sex.push(p.meta.sex);
        for s in &p.sessions {
            let si = session_ids.len();
            session_ids.push(s.id.clone());
            session_patient.push(pi);
            session_sofa.push(s.meta.sofa as f64);
            for b in &s.breaths {
                row += 1;
                raws.push(Raw {
                    log_vt: checked_ln(b.vt, "vt", row)?,
                    log_petco2: checked_ln(b.petco2, "petco2", row)?,
                    log_rr: checked_ln(b.rr, "rr", row)?,
                    log_vo2: match b.vo2 {
                        Some(v) => Some(checked_ln(v, "vo2", row)?),
                        None => None,
                    },
                    t: b.t,
                    session: si,
                    patient: pi,
                });
            }
        }
    }

    let centering = match centering {
        Some(c) => *c,
        None => {
            let n = raws.len().max(1) as f64;
            let mean = |f: &dyn Fn(&Raw) -> f64| raws.iter().map(|r| f(r)).sum::<f64>() / n;
            let vo2_values: Vec<f64> = raws.iter().filter_map(|r| r.log_vo2).collect();
            let mut row_weighted_age = 0.0;
            let mut row_weighted_bmi = 0.0;
            for r in &raws {
                row_weighted_age += patient_logs[r.patient].0;
                row_weighted_bmi += patient_logs[r.patient].1;
            }
            Centering {
                log_vt: mean(&|r| r.log_vt),
                log_petco2: mean(&|r| r.log_petco2),
                log_rr: mean(&|r| r.log_rr),
                log_age: row_weighted_age / n,
                log_bmi: row_weighted_bmi / n,
                log_vo2: if vo2_values.is_empty() {
                    None
                } else {
                    Some(vo2_values.iter().sum::<f64>() / vo2_values.len() as f64)
                },
            }
        }
    };

    let mut rows = Vec::with_capacity(raws.len());
    let mut session_rows: Vec<(usize, usize)> = alloc::vec![(0, 0); session_ids.len()];
    for r in &raws {
        let cvt = r.log_vt - centering.log_vt;
        let cpet = r.log_petco2 - centering.log_petco2;
        let crr = r.log_rr - centering.log_rr;
        let mut covariates = Vec::with_capacity(spec.n_fixed());
        covariates.push(1.0);
        covariates.push(cvt);
        covariates.push(cpet);
        covariates.push(crr);
        covariates.push(cvt * cpet);
        covariates.push(cvt * crr);
        covariates.push(session_sofa[r.session]);
        if spec.include_patient_covariates {
            let g = patient_gppaq[r.patient];
            covariates.push(if g == 2 { 1.0 } else { 0.0 });
            covariates.push(if g == 3 { 1.0 } else { 0.0 });
            covariates.push(if g == 4 { 1.0 } else { 0.0 });
            covariates.push(patient_sex[r.patient] as f64);
            let cage = patient_logs[r.patient].0 - centering.log_age;
            let cbmi = patient_logs[r.patient].1 - centering.log_bmi;
            covariates.push(cage);
            covariates.push(cbmi);
            covariates.push(cage * cbmi);
        }
        let response = match (r.log_vo2, centering.log_vo2) {
            (Some(lv), Some(c)) => Some(lv - c),
            _ => None,
        };
        rows.push(FrameRow {
            covariates,
            session: r.session,
            patient: r.patient,
            t: r.t,
            response,
        });
    }

    // Rows are session-contiguous by construction; record the ranges.
    let mut start = 0usize;
    for (j, range) in session_rows.iter_mut().enumerate() {
        let end = rows[start..]
            .iter()
            .position(|r| r.session != j)
            .map(|k| start + k)
            .unwrap_or(rows.len());
        *range = (start, end);
        start = end;
    }

    Ok(ModelFrame {
        rows,
        spec: *spec,
        session_ids,
        patient_ids,
        session_patient,
        session_rows,
        centering,
    })
}

fn checked_ln(v: f64, column: &str, row: usize) -> Result<f64> {
    if !(v > 0.0) || !v.is_finite() {
        return Err(Error::NonPositiveValue { row, column: column.to_string(), value: v });
    }
    Ok(math::ln(v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{BreathRecord, PatientMeta, Quality, SessionMeta};
    use alloc::collections::BTreeMap;
    use alloc::vec;

    fn toy_dataset() -> Dataset {
        let mut sessions = BTreeMap::new();
        let mut patients = BTreeMap::new();
        for (sid, pid, q) in [("s1", "p1", Quality::Good), ("s2", "p2", Quality::Poor)] {
            sessions.insert(
                sid.to_string(),
                SessionMeta {
                    patient_id: pid.to_string(),
                    sofa: 4,
                    quality: q,
                    days_since_admission: 9,
                },
            );
        }
        patients.insert("p1".to_string(), PatientMeta::new(62.0, 24.0, 0, 4).unwrap());
        patients.insert("p2".to_string(), PatientMeta::new(71.0, 31.0, 1, 2).unwrap());
        let mut recs = Vec::new();
        for (sid, pid) in [("s1", "p1"), ("s2", "p2")] {
            for k in 0..5 {
                recs.push(BreathRecord {
                    patient_id: pid.to_string(),
                    session_id: sid.to_string(),
                    t: k as f64 * 2.0,
                    vo2: Some(4.0 + 0.3 * k as f64),
                    vt: 0.4 + 0.02 * k as f64,
                    rr: 18.0 + k as f64,
                    petco2: 4.6 - 0.05 * k as f64,
                });
            }
        }
        Dataset::from_records(recs, &sessions, &patients).unwrap()
    }

    #[test]
    fn centered_columns_have_zero_mean() {
        let frame = build_frame(&toy_dataset(), &FrameSpec::default(), None).unwrap();
        let n = frame.n_rows() as f64;
        for col in [1, 2, 3, 11, 12] {
            let mean: f64 = frame.rows.iter().map(|r| r.covariates[col]).sum::<f64>() / n;
            assert!(mean.abs() < 1e-12, "col {col} mean {mean}");
        }
        let rmean: f64 =
            frame.rows.iter().map(|r| r.response.unwrap()).sum::<f64>() / n;
        assert!(rmean.abs() < 1e-12);
    }

    #[test]
    fn row_at_training_means_has_zero_centered_columns() {
        let train = build_frame(&toy_dataset(), &FrameSpec::default(), None).unwrap();
        let c = train.centering;
        let mut sessions = BTreeMap::new();
        sessions.insert(
            "snew".to_string(),
            SessionMeta {
                patient_id: "pnew".to_string(),
                sofa: 4,
                quality: Quality::Good,
                days_since_admission: 9,
            },
        );
        let mut patients = BTreeMap::new();
        patients.insert(
            "pnew".to_string(),
            PatientMeta::new(math::exp(c.log_age), math::exp(c.log_bmi), 0, 1).unwrap(),
        );
        let rec = BreathRecord {
            patient_id: "pnew".to_string(),
            session_id: "snew".to_string(),
            t: 0.0,
            vo2: None,
            vt: math::exp(c.log_vt),
            rr: math::exp(c.log_rr),
            petco2: math::exp(c.log_petco2),
        };
        let ds = Dataset::from_records(vec![rec], &sessions, &patients).unwrap();
        let frame = build_frame(&ds, &FrameSpec::default(), Some(&c)).unwrap();
        for col in [1, 2, 3, 4, 5, 11, 12, 13] {
            assert!(frame.rows[0].covariates[col].abs() < 1e-12, "col {col}");
        }
    }

    #[test]
    fn gppaq4_dummy_coding() {
        let frame = build_frame(&toy_dataset(), &FrameSpec::default(), None).unwrap();
        // p1 has gppaq 4 -> (0, 0, 1); p2 has gppaq 2 -> (1, 0, 0).
        let r1 = &frame.rows[0];
        assert_eq!(&r1.covariates[7..10], &[0.0, 0.0, 1.0]);
        let r2 = &frame.rows[5];
        assert_eq!(&r2.covariates[7..10], &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn interaction_columns_are_products_of_centered_logs() {
        let frame = build_frame(&toy_dataset(), &FrameSpec::default(), None).unwrap();
        for r in &frame.rows {
            assert!((r.covariates[4] - r.covariates[1] * r.covariates[2]).abs() < 1e-15);
            assert!((r.covariates[5] - r.covariates[1] * r.covariates[3]).abs() < 1e-15);
            assert!((r.covariates[13] - r.covariates[11] * r.covariates[12]).abs() < 1e-15);
        }
    }

    #[test]
    fn stored_constants_reproduce_training_frame_bitwise() {
        let ds = toy_dataset();
        let a = build_frame(&ds, &FrameSpec::default(), None).unwrap();
        let b = build_frame(&ds, &FrameSpec::default(), Some(&a.centering)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn physiological_only_spec_has_seven_columns() {
        let spec = FrameSpec { include_patient_covariates: false };
        let frame = build_frame(&toy_dataset(), &spec, None).unwrap();
        assert_eq!(frame.n_fixed(), 7);
        assert_eq!(frame.rows[0].covariates.len(), 7);
        assert_eq!(spec.column_names().len(), 7);
    }

    #[test]
    fn sessions_are_contiguous_row_ranges() {
        let frame = build_frame(&toy_dataset(), &FrameSpec::default(), None).unwrap();
        assert_eq!(frame.session_rows, vec![(0, 5), (5, 10)]);
        assert_eq!(frame.session_patient, vec![0, 1]);
        assert_eq!(frame.session_times(1).len(), 5);
    }
}
