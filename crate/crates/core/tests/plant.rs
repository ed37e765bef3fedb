use proptest::prelude::*;
use wastebot::plant::*;

fn canonical() -> JointPlantParams {
    JointPlantParams::canonical()
}

fn chirp(amp_end: f64) -> Excitation {
    Excitation::Chirp {
        chirp: ChirpSpec {
            amp_start: 0.3,
            amp_end,
            f0: 0.2,
            f1: 2.0,
            duration: 30.0,
        },
        lead_in: 0.0,
        repeats: 1,
    }
}

#[test]
fn rest_is_invariant() {
    let mut plant = Plant::new(canonical(), 1).unwrap();
    let start = plant.state;
    for _ in 0..2000 {
        plant.step(0.0, DEFAULT_DT).unwrap();
        assert_eq!(plant.state.len, start.len);
        assert_eq!(plant.state.theta, start.theta);
        assert_eq!(plant.state.v, 0.0);
    }
}

#[test]
fn dead_zone_commands_do_nothing() {
    let p = canonical();
    let mut plant = Plant::new(p.clone(), 2).unwrap();
    let start = plant.state.len;
    for k in 0..500 {
        let u = if k % 2 == 0 { 0.05 } else { -0.05 };
        plant.step(u, DEFAULT_DT).unwrap();
        assert_eq!(plant.state.v, 0.0);
    }
    assert_eq!(plant.state.len, start);
    assert_eq!(dead_zone(p.dead_zone_pos, &p), 0.0);
    assert_eq!(dead_zone(1.0, &p), 1.0);
    assert_eq!(dead_zone(-1.0, &p), -1.0);
}

#[test]
fn hysteresis_remembers_path() {
    let p = canonical();
    let run = |params: &JointPlantParams, u1: f64| {
        let mut plant = Plant::new(params.clone(), 0).unwrap();
        for _ in 0..20 {
            plant.step(u1, DEFAULT_DT).unwrap();
        }
        for _ in 0..5 {
            plant.step(0.0, DEFAULT_DT).unwrap();
        }
        plant.state.h
    };
    let h = run(&p, 0.6);
    assert!((h - p.hysteresis_width / 2.0).abs() < 1e-12, "h = {h}");
    let mut no_play = p.clone();
    no_play.hysteresis_width = 0.0;
    assert_eq!(run(&no_play, 0.6), 0.0);
}

#[test]
fn actuator_clamps_at_limit() {
    let p = canonical();
    let mut at_max = p.rest_state_at(p.actuator_range.1);
    at_max.v = 0.0;
    let mut plant = Plant::with_state(p.clone(), at_max, 0).unwrap();
    for _ in 0..50 {
        plant.step(1.0, DEFAULT_DT).unwrap();
        assert_eq!(plant.state.len, p.actuator_range.1);
        assert_eq!(plant.state.v, 0.0);
        assert_eq!(plant.state.omega, 0.0);
    }
}

#[test]
fn analytic_omega_matches_finite_differences() {
    let p = canonical();
    for log in [
        collect_dataset(&p, &chirp(1.0), 40.0, DEFAULT_DT, 3).unwrap(),
        collect_dataset(
            &p,
            &Excitation::RandomWalk {
                step_std: 0.05,
                bound: 1.0,
            },
            60.0,
            DEFAULT_DT,
            4,
        )
        .unwrap(),
    ] {
        let mut worst: f64 = 0.0;
        for w in log.records.windows(2) {
            let fd = (w[1].theta - w[0].theta) / DEFAULT_DT;
            worst = worst.max((fd - w[1].omega).abs());
        }
        assert!(worst <= 1e-3, "max |ω - Δθ/dt| = {worst}");
    }
}

#[test]
fn steady_velocity_is_monotone_in_command() {
    let mut p = canonical();
    p.hysteresis_width = 0.0;
    p.temp_coeff = 0.0;
    let mut last = f64::NEG_INFINITY;
    for i in -20..=20 {
        let u = i as f64 / 20.0;
        let mut plant = Plant::new(p.clone(), 0).unwrap();
        for _ in 0..60 {
            plant.step(u, DEFAULT_DT).unwrap();
        }
        assert!(plant.state.v >= last);
        last = plant.state.v;
    }
}

#[test]
fn dataset_length_determinism_and_limits() {
    let p = canonical();
    let walk = Excitation::RandomWalk {
        step_std: 0.05,
        bound: 1.0,
    };
    let a = collect_dataset(&p, &walk, 10.0, 0.01, 9).unwrap();
    assert_eq!(a.len(), 1000);
    let b = collect_dataset(&p, &walk, 10.0, 0.01, 9).unwrap();
    assert_eq!(a, b);
    a.validate().unwrap();

    let log = collect_dataset(&p, &chirp(1.0), 30.0, 0.01, 1).unwrap();
    let (lo, hi) = p.actuator_range;
    assert!(log.records.iter().all(|r| (lo..=hi).contains(&r.len)));
}

#[test]
fn log_round_trips_through_csv() {
    let p = canonical();
    let log = collect_dataset(&p, &chirp(0.8), 5.0, 0.01, 2).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("log.csv");
    log.write(&path).unwrap();
    let header = std::fs::read_to_string(&path).unwrap();
    assert!(header.starts_with("t,u,h,v,L,theta,omega,s,T,rpm\n"));
    let back = DatasetLog::read(&path).unwrap();
    assert_eq!(back, log);
}

#[test]
fn temperature_follows_warmup() {
    let p = canonical();
    let log = collect_dataset(&p, &chirp(0.5), 90.0, 0.01, 0).unwrap();
    let first = log.records[0].temp;
    let last = log.records.last().unwrap().temp;
    assert_eq!(first, p.temp_warmup.ambient);
    assert!(last > first + 0.9 * p.temp_warmup.rise);
}

proptest! {
    #[test]
    fn marker_angle_inverts(theta in -3.0f64..3.0) {
        let mut st = canonical().rest_state();
        st.theta = theta;
        let [a, b] = render_markers(&st, &MarkerCamera::default());
        let back = (b.1 - a.1).atan2(b.0 - a.0);
        prop_assert!((back + theta).abs() < 1e-12);
    }

    #[test]
    fn sensor_map_inverts(theta in -3.0f64..3.0, beta in -0.95f64..0.95) {
        let mut p = canonical();
        p.sensor_beta = beta;
        let s = sensor_from_joint(theta, &p);
        prop_assert!((joint_from_sensor(s, &p).unwrap() - theta).abs() < 1e-10);
    }

    #[test]
    fn chirp_stays_in_envelope(a0 in 0.0f64..1.0, a1 in 0.0f64..1.0, f0 in 0.05f64..3.0, f1 in 0.05f64..3.0, frac in 0.0f64..=1.0) {
        let spec = ChirpSpec { amp_start: a0, amp_end: a1, f0, f1, duration: 20.0 };
        let u = gen_chirp(&spec, frac * 20.0).unwrap();
        prop_assert!(u.abs() <= a0.max(a1) + 1e-15);
    }

    #[test]
    fn state_stays_in_range(cmds in prop::collection::vec(-1.0f64..=1.0, 1..400)) {
        let p = canonical();
        let mut plant = Plant::new(p.clone(), 5).unwrap();
        for u in cmds {
            plant.step(u, DEFAULT_DT).unwrap();
            prop_assert!(plant.state.is_finite());
            prop_assert!((p.actuator_range.0..=p.actuator_range.1).contains(&plant.state.len));
        }
    }
}
