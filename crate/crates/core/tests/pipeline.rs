//! End-to-end checks on simulated data: mode recovery, posterior
//! contraction, predictive moments against a brute-force nested Monte
//! Carlo, sampling moments and cross-validation bookkeeping.

use rand::Rng;

use vo2_core::evaluate::{lopo_cv, run_fold, CvSettings};
use vo2_core::frame::{build_frame, FrameSpec};
use vo2_core::inference::{fit, sample_joint, FitOptions};
use vo2_core::model::{self, HyperParams, ModelSpec, PriorSpec};
use vo2_core::predict::{predict_rows, PredictMode};
use vo2_core::rng::{standard_normal, stream_rng};
use vo2_core::simulate::{simulate, GenerativeConfig};

fn quick_opts() -> FitOptions {
    FitOptions { max_iter: 80, ..Default::default() }
}

#[test]
fn mode_recovers_generative_hyperparameters() {
    let cfg = GenerativeConfig {
        n_patients: 6,
        sessions_per_patient: 3,
        breaths_per_session: 100,
        seed: 41,
        ..Default::default()
    };
    let (ds, _) = simulate(&cfg).unwrap();
    let frame = build_frame(&ds, &FrameSpec::default(), None).unwrap();
    let fitted = fit(frame, &PriorSpec::default(), &ModelSpec::default(), &quick_opts()).unwrap();
    assert!(fitted.mode.converged);

    let truth = [
        ("tau_alpha", cfg.truth.tau_alpha),
        ("tau_beta1", cfg.truth.tau_beta1),
        ("tau_s", cfg.truth.tau_s),
        ("phi", cfg.truth.phi),
    ];
    for (name, target) in truth {
        let (_, s) = fitted
            .hyper_summaries
            .iter()
            .find(|(n, _)| n == name)
            .expect("summary present");
        assert!(
            (s.mean - target).abs() < 3.0 * s.sd.max(1e-6),
            "{name}: mean {} sd {} target {target}",
            s.mean,
            s.sd
        );
    }
}

#[test]
fn posterior_contraction_with_more_data() {
    // Doubling the per-session length should not inflate fixed-effect sds;
    // over 20 replicates at most 2 may violate this.
    let spec = FrameSpec { include_patient_covariates: false };
    let mut violations = 0;
    for rep in 0..20 {
        let long = GenerativeConfig {
            n_patients: 4,
            sessions_per_patient: 8,
            breaths_per_session: 15,
            seed: 500 + rep,
            ..Default::default()
        };
        let (ds_b, _) = simulate(&long).unwrap();
        // The shorter dataset is the same realization with half the
        // sessions: data-nested, and halving sessions starves every
        // coefficient (the intercept and session-level covariates draw
        // their information from the session count, not the breath count).
        let mut ds_a = ds_b.clone();
        for p in &mut ds_a.patients {
            p.sessions.truncate(4);
        }
        let fit_a = fit(
            build_frame(&ds_a, &spec, None).unwrap(),
            &PriorSpec::default(),
            &ModelSpec::default(),
            &quick_opts(),
        )
        .unwrap();
        let fit_b = fit(
            build_frame(&ds_b, &spec, None).unwrap(),
            &PriorSpec::default(),
            &ModelSpec::default(),
            &quick_opts(),
        )
        .unwrap();
        let grew = (0..fit_a.layout.n_fixed).any(|k| {
            fit_b.latent_summaries[k].sd > fit_a.latent_summaries[k].sd * (1.0 + 1e-9)
        });
        if grew {
            violations += 1;
        }
    }
    assert!(violations <= 2, "contraction violated in {violations}/20 replicates");
}

fn predictive_moments(draws: &[vo2_core::predict::PredictiveDraw]) -> (f64, f64) {
    let n = draws.len() as f64;
    let mean = draws.iter().map(|d| d.mean).sum::<f64>() / n;
    let var = draws.iter().map(|d| d.var + d.mean * d.mean).sum::<f64>() / n - mean * mean;
    (mean, var)
}

#[test]
fn predictive_moments_match_nested_monte_carlo() {
    let cfg = GenerativeConfig {
        n_patients: 3,
        sessions_per_patient: 2,
        breaths_per_session: 40,
        seed: 9,
        ..Default::default()
    };
    let (ds, _) = simulate(&cfg).unwrap();
    let frame = build_frame(&ds, &FrameSpec::default(), None).unwrap();
    let fitted =
        fit(frame.clone(), &PriorSpec::default(), &ModelSpec::default(), &quick_opts()).unwrap();

    let n_samples = 4000;
    let c_y = fitted.centering().log_vo2.unwrap();
    // Joint fields for the oracle.
    let joint = sample_joint(&fitted, n_samples, 303);

    for (mode, row_idx) in [
        (PredictMode::NewPatient, 3usize),
        (PredictMode::NewSession, 17usize),
        (PredictMode::InSample, 29usize),
    ] {
        let draws = predict_rows(&fitted, &frame, mode, n_samples, 404).unwrap();
        let (mean_a, var_a) = predictive_moments(&draws[row_idx]);

        // Brute force: per joint sample, draw the unknown deviations
        // explicitly and evaluate the predictor.
        let mut r = stream_rng(505, 0);
        let row = &frame.rows[row_idx];
        let cvt = row.covariates[1];
        let mut ys = Vec::with_capacity(n_samples);
        for s in 0..n_samples {
            let field = &joint.fields[s];
            let theta: &HyperParams = &joint.thetas[s];
            let fixed: f64 = row
                .covariates
                .iter()
                .enumerate()
                .map(|(k, x)| x * field[k])
                .sum();
            let a_known = field[fitted.layout.session_slot(row.session).unwrap()];
            let b_known = field[fitted.layout.patient_slot(row.patient).unwrap()];
            let a_new = standard_normal(&mut r) / theta.tau_alpha.sqrt();
            let b_new = standard_normal(&mut r) / theta.tau_beta1.sqrt();
            let s_new = standard_normal(&mut r) / theta.tau_s.sqrt();
            let eps = standard_normal(&mut r) / fitted.priors.obs_precision.sqrt();
            let y = match mode {
                PredictMode::NewPatient => fixed + a_new + b_new * cvt + s_new,
                PredictMode::NewSession => fixed + a_new + b_known * cvt + s_new,
                PredictMode::InSample => fixed + a_known + b_known * cvt + s_new,
            } + eps
                + c_y;
            ys.push(y);
        }
        let n = ys.len() as f64;
        let mean_b = ys.iter().sum::<f64>() / n;
        let var_b = ys.iter().map(|y| (y - mean_b) * (y - mean_b)).sum::<f64>() / (n - 1.0);

        // Three standard errors of the Monte Carlo estimates.
        let se_mean = (var_b / n).sqrt();
        let se_var = var_b * (2.0 / (n - 1.0)).sqrt();
        assert!(
            (mean_a - mean_b).abs() < 3.0 * se_mean,
            "{mode:?} mean: {mean_a} vs {mean_b} (se {se_mean})"
        );
        assert!(
            (var_a - var_b).abs() < 3.0 * se_var,
            "{mode:?} var: {var_a} vs {var_b} (se {se_var})"
        );
    }
}

#[test]
fn joint_sample_mean_matches_mixture_mean() {
    let cfg = GenerativeConfig {
        n_patients: 2,
        sessions_per_patient: 2,
        breaths_per_session: 30,
        seed: 15,
        ..Default::default()
    };
    let (ds, _) = simulate(&cfg).unwrap();
    let frame = build_frame(&ds, &FrameSpec::default(), None).unwrap();
    let fitted = fit(frame, &PriorSpec::default(), &ModelSpec::default(), &quick_opts()).unwrap();
    let n = 10_000;
    let joint = sample_joint(&fitted, n, 77);
    for k in [0usize, 1, 2] {
        let mean: f64 = joint.fields.iter().map(|f| f[k]).sum::<f64>() / n as f64;
        let s = &fitted.latent_summaries[k];
        let se = s.sd / (n as f64).sqrt();
        assert!(
            (mean - s.mean).abs() < 3.0 * se,
            "effect {k}: sample mean {mean} vs mixture {} (se {se})",
            s.mean
        );
    }
}

#[test]
fn two_patient_cross_validation_bookkeeping() {
    let cfg = GenerativeConfig {
        n_patients: 2,
        sessions_per_patient: 2,
        breaths_per_session: 30,
        seed: 23,
        ..Default::default()
    };
    let (ds, _) = simulate(&cfg).unwrap();
    let settings = CvSettings {
        n_samples: 200,
        fit_options: quick_opts(),
        ..Default::default()
    };
    let report = lopo_cv(&ds, &settings, 99).unwrap();
    assert_eq!(report.folds.len(), 2);
    assert!(report.folds.iter().all(|f| f.failure.is_none()));
    let mut total = vo2_core::metrics::ConfusionMatrix::default();
    for f in &report.folds {
        total.merge(&f.confusion);
    }
    assert_eq!(total, report.pooled);
    assert_eq!(report.pooled.total() as usize, ds.n_obs());
}

#[test]
fn leakage_probe_perturbing_held_out_rows_is_bit_exact() {
    let cfg = GenerativeConfig {
        n_patients: 3,
        sessions_per_patient: 2,
        breaths_per_session: 25,
        seed: 31,
        ..Default::default()
    };
    let (ds, _) = simulate(&cfg).unwrap();
    let held_out = ds.patients[1].id.clone();

    // Perturb every breath of the held-out patient.
    let mut perturbed = ds.clone();
    for s in &mut perturbed.patients[1].sessions {
        for b in &mut s.breaths {
            b.vo2 = b.vo2.map(|v| v * 1.7);
            b.vt *= 0.6;
            b.rr *= 1.3;
        }
    }

    let spec = FrameSpec::default();
    let opts = quick_opts();
    let fit_a = fit(
        build_frame(&ds.without_patient(&held_out), &spec, None).unwrap(),
        &PriorSpec::default(),
        &ModelSpec::default(),
        &opts,
    )
    .unwrap();
    let fit_b = fit(
        build_frame(&perturbed.without_patient(&held_out), &spec, None).unwrap(),
        &PriorSpec::default(),
        &ModelSpec::default(),
        &opts,
    )
    .unwrap();

    // Bit-exact: summaries, grid and conditional means.
    assert_eq!(fit_a.latent_summaries, fit_b.latent_summaries);
    assert_eq!(fit_a.grid.points.len(), fit_b.grid.points.len());
    for (p, q) in fit_a.grid.points.iter().zip(&fit_b.grid.points) {
        assert_eq!(p.log_post, q.log_post);
        assert_eq!(p.weight, q.weight);
    }
    for (a, b) in fit_a.conditionals.iter().zip(&fit_b.conditionals) {
        assert_eq!(a.mean, b.mean);
    }

    // The fold runner's own guard also holds.
    let settings = CvSettings { n_samples: 50, fit_options: quick_opts(), ..Default::default() };
    let fold = run_fold(&ds, &held_out, &settings, 1);
    assert!(fold.failure.is_none());
    assert_eq!(fold.n_rows, ds.only_patient(&held_out).n_obs());
}

#[test]
fn prediction_modes_order_variances_sensibly() {
    // Knowing more of the hierarchy cannot inflate the predictive variance:
    // new-patient >= new-session >= in-sample on average.
    let cfg = GenerativeConfig {
        n_patients: 3,
        sessions_per_patient: 2,
        breaths_per_session: 30,
        seed: 55,
        ..Default::default()
    };
    let (ds, _) = simulate(&cfg).unwrap();
    let frame = build_frame(&ds, &FrameSpec::default(), None).unwrap();
    let fitted =
        fit(frame.clone(), &PriorSpec::default(), &ModelSpec::default(), &quick_opts()).unwrap();
    let mean_var = |mode: PredictMode| -> f64 {
        let draws = predict_rows(&fitted, &frame, mode, 200, 8).unwrap();
        let mut acc = 0.0;
        let mut count = 0.0;
        for row in &draws {
            for d in row {
                acc += d.var;
                count += 1.0;
            }
        }
        acc / count
    };
    let vp = mean_var(PredictMode::NewPatient);
    let vs = mean_var(PredictMode::NewSession);
    let vi = mean_var(PredictMode::InSample);
    assert!(vp >= vs && vs >= vi, "{vp} {vs} {vi}");
}

#[test]
fn unknown_patient_is_rejected_in_new_session_mode() {
    let cfg = GenerativeConfig {
        n_patients: 2,
        sessions_per_patient: 1,
        breaths_per_session: 20,
        seed: 62,
        ..Default::default()
    };
    let (ds, _) = simulate(&cfg).unwrap();
    let frame = build_frame(&ds, &FrameSpec::default(), None).unwrap();
    let fitted =
        fit(frame, &PriorSpec::default(), &ModelSpec::default(), &quick_opts()).unwrap();

    let other = GenerativeConfig { seed: 63, ..cfg };
    let (new_ds, _) = simulate(&other).unwrap();
    let mut renamed = new_ds;
    renamed.patients[0].id = "stranger".into();
    for s in &mut renamed.patients[0].sessions {
        s.meta.patient_id = "stranger".into();
    }
    let new_frame =
        build_frame(&renamed, &FrameSpec::default(), Some(fitted.centering())).unwrap();
    let err =
        predict_rows(&fitted, &new_frame, PredictMode::NewSession, 10, 1).unwrap_err();
    assert!(matches!(err, vo2_core::error::Error::UnknownPatient { .. }));
    // New-patient mode accepts the same frame.
    assert!(predict_rows(&fitted, &new_frame, PredictMode::NewPatient, 10, 1).is_ok());
    // Centering mismatch is caught.
    let wrong = build_frame(&renamed, &FrameSpec::default(), None).unwrap();
    assert!(matches!(
        predict_rows(&fitted, &wrong, PredictMode::NewPatient, 10, 1),
        Err(vo2_core::error::Error::CenteringMismatch)
    ));
}

#[test]
fn degenerate_fit_collapses_prediction_to_fixed_line() {
    // With all hierarchy precisions enormous the predictive distribution
    // tightens onto the fixed-effect predictor.
    let cfg = GenerativeConfig {
        n_patients: 2,
        sessions_per_patient: 2,
        breaths_per_session: 25,
        truth: HyperParams { tau_alpha: 1e12, tau_beta1: 1e12, tau_s: 1e12, phi: 5.0 },
        seed: 71,
        ..Default::default()
    };
    let (ds, _) = simulate(&cfg).unwrap();
    let frame = build_frame(&ds, &FrameSpec::default(), None).unwrap();
    let layout = model::layout(&frame, &ModelSpec::default()).unwrap();
    let priors = PriorSpec::default();
    let theta = HyperParams::new(1e12, 1e12, 1e12, 5.0).unwrap();
    let c = vo2_core::inference::conditional(&frame, &layout, &priors, &theta).unwrap();

    // Hand-build a single-point fit at the degenerate θ.
    let grid = vo2_core::inference::HyperGrid {
        points: vec![vo2_core::inference::GridPoint {
            theta,
            log_post: 0.0,
            weight: 1.0,
            z: vec![],
        }],
        mode_index: 0,
        axis_fallback: false,
        truncated: false,
    };
    let mode = vo2_core::inference::ModeResult {
        theta,
        log_post: 0.0,
        curvature: vec![],
        converged: true,
        curvature_ok: true,
        iterations: 0,
        trace: vec![0.0],
    };
    let fitted = vo2_core::inference::assemble_fit(
        frame.clone(),
        layout,
        priors,
        FitOptions::default(),
        mode,
        grid,
        vec![c],
    );
    let draws = predict_rows(&fitted, &frame, PredictMode::NewPatient, 50, 2).unwrap();
    for (row, rd) in frame.rows.iter().zip(&draws) {
        let fixed: f64 = row
            .covariates
            .iter()
            .enumerate()
            .map(|(k, x)| x * fitted.latent_summaries[k].mean)
            .sum::<f64>()
            + fitted.centering().log_vo2.unwrap();
        let (mean, var) = predictive_moments(rd);
        // Floor: the fixed observation noise 1/τ = e^{-15} ≈ 3.3e-7.
        assert!(var < 1e-6, "variance should collapse, got {var}");
        assert!((mean - fixed).abs() < 0.02, "{mean} vs {fixed}");
    }
}

#[test]
fn fold_failure_is_reported_not_propagated() {
    // A held-out patient with a single breath still yields a report; a
    // training side with one patient and pathological settings reports the
    // failure in the fold.
    let cfg = GenerativeConfig {
        n_patients: 2,
        sessions_per_patient: 1,
        breaths_per_session: 10,
        seed: 83,
        ..Default::default()
    };
    let (ds, _) = simulate(&cfg).unwrap();
    let mut settings = CvSettings { n_samples: 20, fit_options: quick_opts(), ..Default::default() };
    // Force a failure: an even smoothing window is rejected inside the fold.
    settings.smooth_window = Some(2);
    let report = lopo_cv(&ds, &settings, 3).unwrap();
    assert_eq!(report.folds.len(), 2);
    assert!(report.folds.iter().all(|f| f.failure.is_some()));
    assert!(report.pooled_zero_one.is_nan());
}
