use proptest::prelude::*;
use wastebot::plant::{self, collect_dataset, scenarios, JointPlantParams, DEFAULT_DT};
use wastebot::sysid::*;
use wastebot::Error;

fn short_log(seconds: f64, seed: u64) -> plant::DatasetLog {
    collect_dataset(
        &JointPlantParams::canonical(),
        &scenarios::canonical_chirp(),
        seconds,
        DEFAULT_DT,
        seed,
    )
    .unwrap()
}

fn quick_config() -> SysidTrainConfig {
    SysidTrainConfig {
        hidden_size: 8,
        window_len: 24,
        burn_in: 4,
        stride: 8,
        epochs: 2,
        ..Default::default()
    }
}

fn window(series: &PredictorSeries, start: usize, len: usize) -> PredictorSeries {
    PredictorSeries {
        dt: series.dt,
        inputs: series.inputs[start..start + len].to_vec(),
        targets: series.targets[start..start + len].to_vec(),
    }
}

#[test]
fn gradient_check_passes_and_catches_forget_gate_mutation() {
    let log = short_log(20.0, 1);
    let model = train_predictor(&log, &quick_config()).unwrap().model;
    let series = PredictorSeries::from_log(&log, VelocityTarget::Sensor).unwrap();
    let w = window(&series, 900, 20);
    let err = gradient_check_recurrent(&model, &w, 1e-5).unwrap();
    assert!(err <= 1e-4, "max relative error {err}");

    let forget = model.gate_param_indices(Gate::Forget);
    let mutated = gradient_check_recurrent_with(&model, &w, 1e-5, |g| {
        for &i in &forget {
            g[i] *= 1.1;
        }
    })
    .unwrap();
    assert!(mutated > 1e-2, "mutation slipped through: {mutated}");

    let too_short = window(&series, 0, 1);
    assert!(gradient_check_recurrent(&model, &too_short, 1e-5).is_err());
}

#[test]
fn config_and_data_preconditions() {
    let log = short_log(2.0, 0);
    let bad_window = SysidTrainConfig {
        window_len: 1,
        burn_in: 0,
        ..quick_config()
    };
    assert!(matches!(
        train_predictor(&log, &bad_window),
        Err(Error::InvalidInput(_))
    ));
    let long_window = SysidTrainConfig {
        window_len: 500,
        ..quick_config()
    };
    assert!(train_predictor(&log, &long_window).is_err());
}

#[test]
fn training_is_deterministic_and_serializes() {
    let log = short_log(10.0, 2);
    let a = train_predictor(&log, &quick_config()).unwrap();
    let b = train_predictor(&log, &quick_config()).unwrap();
    assert_eq!(a, b);
    let json = serde_json::to_string(&a.model).unwrap();
    let back: RecurrentModel = serde_json::from_str(&json).unwrap();
    assert_eq!(back, a.model);
    assert_eq!(back.config.as_ref(), Some(&quick_config()));
}

#[test]
fn constant_velocity_is_learned_exactly() {
    let n = 400;
    let series = PredictorSeries {
        dt: DEFAULT_DT,
        inputs: (0..n)
            .map(|k| [0.1 + 0.3 * k as f64 * DEFAULT_DT, 1800.0, 40.0, 0.5])
            .collect(),
        targets: vec![0.3; n],
    };
    let cfg = SysidTrainConfig {
        epochs: 30,
        ..quick_config()
    };
    let trained = train_predictor_on(&series, &cfg).unwrap();
    let report = evaluate_series(&mut RecurrentPredictor::new(&trained.model), &series).unwrap();
    assert!(report.rmse < 1e-3, "rmse {}", report.rmse);
    assert!((trained.model.target_mean - 0.3).abs() < 1e-12);
}

#[test]
fn teacher_forced_rollout_equals_stepping() {
    let log = short_log(8.0, 3);
    let model = train_predictor(&log, &quick_config()).unwrap().model;
    let series = PredictorSeries::from_log(&log, model.target).unwrap();
    let roll = rollout_log(&model, &log, false).unwrap();
    let mut hidden = HiddenState::zeros(model.hidden_size);
    for (k, x) in series.inputs.iter().enumerate() {
        let (v, h) = predict_step(&model, &hidden, &PredictorInput::from_array(*x)).unwrap();
        assert_eq!(v, roll.velocity[k]);
        hidden = h;
    }
    let eval = evaluate_predictor(&model, &log).unwrap();
    assert_eq!(eval.predicted, roll.velocity);

    let free = rollout_log(&model, &log, true).unwrap();
    for w in free.sensor.windows(2).zip(&free.velocity) {
        assert!((w.0[1] - (w.0[0] + w.1 * DEFAULT_DT)).abs() < 1e-15);
    }
}

#[test]
fn plant_oracle_is_exact() {
    let log = short_log(15.0, 4);
    let p = JointPlantParams::canonical();
    for target in [VelocityTarget::Sensor, VelocityTarget::Joint] {
        let series = PredictorSeries::from_log(&log, target).unwrap();
        let mut oracle = PlantOracle::new(p.clone(), DEFAULT_DT, target).unwrap();
        let report = evaluate_series(&mut oracle, &series).unwrap();
        assert!(report.max_abs_error < 1e-12, "{}", report.max_abs_error);
    }
}

#[test]
fn normalization_absorbs_input_scale() {
    let log = short_log(6.0, 5);
    let series = PredictorSeries::from_log(&log, VelocityTarget::Sensor).unwrap();
    let scaled = PredictorSeries {
        dt: series.dt,
        inputs: series.inputs.iter().map(|x| x.map(|v| v * 4.0)).collect(),
        targets: series.targets.iter().map(|y| y * 0.5).collect(),
    };
    let a = train_predictor_on(&series, &quick_config()).unwrap();
    let b = train_predictor_on(&scaled, &quick_config()).unwrap();
    assert_eq!(a.epoch_losses, b.epoch_losses);
}

#[test]
fn eval_report_csv_has_one_row_per_step() {
    let log = short_log(3.0, 6);
    let model = train_predictor(&log, &quick_config()).unwrap().model;
    let report = evaluate_predictor(&model, &log).unwrap();
    let mut buf = Vec::new();
    report.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert!(text.starts_with("t,actual,predicted,error\n"));
    assert_eq!(text.lines().count(), log.len());
    assert!(report.max_abs_error >= report.rmse && report.rmse >= 0.0);
}

/// Default-config fit on the canonical identification log: training error,
/// learned dead zone and free-running drift.
#[test]
fn canonical_predictor_fits_and_simulates() {
    let p = JointPlantParams::canonical();
    let log = collect_dataset(
        &p,
        &scenarios::canonical_chirp(),
        scenarios::CHIRP_LOG_DURATION,
        DEFAULT_DT,
        1,
    )
    .unwrap();
    let model = train_predictor(&log, &SysidTrainConfig::default()).unwrap().model;

    let fit = evaluate_predictor(&model, &log).unwrap();
    assert!(fit.max_abs_error <= 0.05, "training max error {}", fit.max_abs_error);

    let n = 1000;
    let rest = rollout(
        &model,
        p.rest_state().s,
        &vec![0.0; n],
        &vec![(p.engine_nominal_rpm, p.temp_warmup.ambient); n],
        DEFAULT_DT,
        &RolloutMode::FreeRunning,
    )
    .unwrap();
    let worst = rest.velocity.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(worst <= 0.01, "rest velocity {worst}");

    let free = rollout_log(&model, &log, true).unwrap();
    let series = PredictorSeries::from_log(&log, model.target).unwrap();
    let rms =
        |v: &[f64]| (v.iter().zip(&series.targets).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / v.len() as f64).sqrt();
    assert!(fit.rmse <= rms(&free.velocity));
    let drift = (0..n)
        .map(|k| (free.sensor[k] - log.records[k].s).abs())
        .fold(0.0f64, f64::max);
    assert!(drift <= 0.1, "drift over 10 s: {drift}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn hidden_state_stays_bounded(
        seed in 0u64..1000,
        inputs in prop::collection::vec(prop::array::uniform4(-1e6f64..1e6), 1..200),
    ) {
        let model = RecurrentModel::init_random(6, seed);
        let mut hidden = HiddenState::zeros(6);
        for x in inputs {
            let (v, h) = predict_step(&model, &hidden, &PredictorInput::from_array(x)).unwrap();
            prop_assert!(v.is_finite());
            prop_assert!(h.h.iter().all(|a| a.abs() <= 1.0));
            prop_assert!(h.c.iter().all(|a| a.is_finite()));
            hidden = h;
        }
    }
}
