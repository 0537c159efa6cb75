//! Shared fixtures for unit tests.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec::Vec;

use crate::data::{BreathRecord, Dataset, PatientMeta, Quality, SessionMeta};
use crate::frame::{build_frame, FrameSpec, ModelFrame};

/// Small deterministic dataset with smoothly varying covariates, as a
/// built frame.
pub(crate) fn toy_frame(
    n_patients: usize,
    sessions_per_patient: usize,
    breaths_per_session: usize,
) -> ModelFrame {
    build_frame(
        &toy_dataset(n_patients, sessions_per_patient, breaths_per_session),
        &FrameSpec::default(),
        None,
    )
    .unwrap()
}

pub(crate) fn toy_dataset(
    n_patients: usize,
    sessions_per_patient: usize,
    breaths_per_session: usize,
) -> Dataset {
    let mut sessions = BTreeMap::new();
    let mut patients = BTreeMap::new();
    let mut recs = Vec::new();
    for pi in 0..n_patients {
        let pid = format!("p{pi}");
        patients.insert(
            pid.clone(),
            PatientMeta::new(55.0 + pi as f64, 24.0 + pi as f64, (pi % 2) as u8, 1 + (pi % 4) as u8)
                .unwrap(),
        );
        for sj in 0..sessions_per_patient {
            let sid = format!("p{pi}s{sj}");
            sessions.insert(
                sid.clone(),
                SessionMeta {
                    patient_id: pid.clone(),
                    sofa: 3 + ((pi + sj) % 5) as i32,
                    quality: Quality::ALL[(pi + sj) % 3],
                    days_since_admission: 8 + sj as i32,
                },
            );
            for k in 0..breaths_per_session {
                let x = k as f64;
                recs.push(BreathRecord {
                    patient_id: pid.clone(),
                    session_id: sid.clone(),
                    t: 2.0 * x + 0.1 * ((pi + sj) as f64),
                    vo2: Some(4.0 + 0.1 * x + 0.2 * pi as f64),
                    vt: 0.4 + 0.01 * x + 0.02 * sj as f64,
                    rr: 18.0 + 0.5 * x,
                    petco2: 4.5 + 0.02 * x,
                });
            }
        }
    }
    Dataset::from_records(recs, &sessions, &patients).unwrap()
}
