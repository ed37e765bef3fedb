use std::sync::OnceLock;

use proptest::prelude::{prop, prop_assert, prop_assert_eq, proptest, ProptestConfig};
use wastebot::control::*;
use wastebot::matclass::{LabelMap, MaterialClass};
use wastebot::plant::{
    self, collect_dataset, render_markers, scenarios, JointPlantParams, MarkerCamera, Plant, DEFAULT_DT,
};
use wastebot::sysid::{train_predictor, RecurrentModel, SysidTrainConfig};

fn canonical() -> JointPlantParams {
    JointPlantParams::canonical()
}

/// A lightly trained predictor shared by the policy tests.
fn predictor() -> &'static RecurrentModel {
    static MODEL: OnceLock<RecurrentModel> = OnceLock::new();
    MODEL.get_or_init(|| {
        let log = collect_dataset(&canonical(), &scenarios::canonical_chirp(), 62.0, DEFAULT_DT, 1).unwrap();
        let cfg = SysidTrainConfig {
            epochs: 10,
            ..Default::default()
        };
        train_predictor(&log, &cfg).unwrap().model
    })
}

fn paint(map: &mut LabelMap, x0: usize, y0: usize, w: usize, h: usize, c: MaterialClass) {
    for y in y0..y0 + h {
        for x in x0..x0 + w {
            map.labels[y * map.width + x] = c;
        }
    }
}

fn strategy(priority: &[MaterialClass]) -> Strategy {
    Strategy {
        priority: priority.to_vec(),
        min_area: 1,
        min_confidence: 0.0,
    }
}

fn plant_at(s: f64, seed: u64) -> Plant {
    let p = canonical();
    let st = p.rest_state_at_sensor(s).unwrap();
    Plant::with_state(p, st, seed).unwrap()
}

#[test]
fn planner_examples() {
    use MaterialClass::*;
    let reach = (-0.5, 0.5);
    let empty = LabelMap::filled(64, 64, Unlabeled);
    let conf = vec![1.0; 64 * 64];
    assert!(plan_pick_sequence(&empty, &conf, &strategy(&[Wood]), reach)
        .unwrap()
        .is_empty());

    let mut one = empty.clone();
    paint(&mut one, 20, 20, 10, 10, Wood);
    let picks = plan_pick_sequence(&one, &conf, &strategy(&[Wood]), reach).unwrap();
    assert_eq!(picks.len(), 1);
    assert_eq!(picks[0].centroid_px, (24.5, 24.5));
    assert_eq!(picks[0].area_px, 100);
    assert!((picks[0].target_sensor_pos - (-0.5 + 24.5 / 63.0)).abs() < 1e-15);

    let mut two = empty.clone();
    paint(&mut two, 2, 2, 10, 5, Wood);
    paint(&mut two, 30, 30, 25, 20, Metal);
    let picks = plan_pick_sequence(&two, &conf, &strategy(&[Wood, Metal]), reach).unwrap();
    assert_eq!(
        picks.iter().map(|p| (p.material, p.area_px)).collect::<Vec<_>>(),
        [(Wood, 50), (Metal, 500)]
    );
    let only_metal = plan_pick_sequence(&two, &conf, &strategy(&[Metal]), reach).unwrap();
    assert_eq!(only_metal.len(), 1);

    assert!(plan_pick_sequence(&two, &conf, &strategy(&[]), reach).is_err());
    assert!(plan_pick_sequence(&two, &conf[1..], &strategy(&[Wood]), reach).is_err());
}

#[test]
fn planner_filters_confidence_and_area() {
    use MaterialClass::*;
    let mut map = LabelMap::filled(40, 40, Unlabeled);
    paint(&mut map, 0, 0, 10, 10, PaperCardboard);
    paint(&mut map, 20, 20, 2, 2, PaperCardboard);
    let mut conf = vec![0.9; 1600];
    // A low-confidence column splits the large patch in two.
    for y in 0..10 {
        conf[y * 40 + 5] = 0.2;
    }
    let s = Strategy {
        priority: vec![PaperCardboard],
        min_area: 5,
        min_confidence: 0.5,
    };
    let picks = plan_pick_sequence(&map, &conf, &s, (0.0, 1.0)).unwrap();
    assert_eq!(picks.iter().map(|p| p.area_px).collect::<Vec<_>>(), [50, 40]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn plan_is_strictly_ordered_and_complete(
        cells in prop::collection::vec(0usize..4, 24 * 24),
        conf in prop::collection::vec(0.0f64..1.0, 24 * 24),
        min_area in 1usize..4,
    ) {
        use MaterialClass::*;
        let classes = [Unlabeled, Wood, Metal, Plastic];
        let map = LabelMap { width: 24, height: 24, labels: cells.iter().map(|&c| classes[c]).collect() };
        let s = Strategy { priority: vec![Plastic, Wood], min_area, min_confidence: 0.3 };
        let picks = plan_pick_sequence(&map, &conf, &s, (-1.0, 1.0)).unwrap();
        let rank = |c: MaterialClass| s.priority.iter().position(|p| *p == c).unwrap();
        for w in picks.windows(2) {
            let a = (rank(w[0].material), std::cmp::Reverse(w[0].area_px));
            let b = (rank(w[1].material), std::cmp::Reverse(w[1].area_px));
            prop_assert!(a < b || (a == b && w[0].centroid_px <= w[1].centroid_px));
        }
        for p in &picks {
            prop_assert!(p.area_px >= min_area);
            prop_assert!(p.material != Metal);
            prop_assert!((-1.0..=1.0).contains(&p.target_sensor_pos));
        }
        let eligible = (0..576).filter(|&i| conf[i] >= 0.3 && matches!(map.labels[i], Plastic | Wood)).count();
        prop_assert!(picks.iter().map(|p| p.area_px).sum::<usize>() <= eligible);
        prop_assert_eq!(plan_pick_sequence(&map, &conf, &s, (-1.0, 1.0)).unwrap(), picks);
    }

    #[test]
    fn trajectories_respect_limits(
        start in -1.0f64..1.0,
        dist in -1.5f64..1.5,
        vmax in 0.05f64..1.0,
        amax in 0.05f64..2.0,
    ) {
        let dt = 0.01;
        let t = gen_trajectory(start, start + dist, vmax, amax, dt).unwrap();
        let pts = &t.points;
        prop_assert_eq!(pts[0].pos, start);
        prop_assert_eq!(pts[0].vel, 0.0);
        prop_assert_eq!(pts[pts.len() - 1].pos, start + dist);
        prop_assert_eq!(pts[pts.len() - 1].vel, 0.0);
        let mut integral = start;
        for w in pts.windows(2) {
            prop_assert!(w[1].vel.abs() <= vmax + 1e-9);
            prop_assert!(((w[1].vel - w[0].vel) / dt).abs() <= amax + 1e-9);
            integral += 0.5 * dt * (w[0].vel + w[1].vel);
            prop_assert!((integral - w[1].pos).abs() <= 1e-9);
        }
    }

    #[test]
    fn policy_output_is_bounded(
        seed in 0u64..50,
        s in -1e3f64..1e3,
        v in -1e3f64..1e3,
        ahead in prop::array::uniform5(-1e3f64..1e3),
    ) {
        let mut pol = PolicyModel::init_random(5, 8, seed);
        let big: Vec<f64> = pol.flat_params().iter().map(|w| w * 50.0).collect();
        pol.set_flat_params(&big);
        let u = pol.command(s, v, &ahead).unwrap();
        prop_assert!(u.abs() <= 1.0);
    }
}

#[test]
fn triangular_peak_velocity() {
    let t = gen_trajectory(0.0, 0.1, 1.0, 1.0, 0.01).unwrap();
    let peak = t.points.iter().map(|p| p.vel).fold(0.0, f64::max);
    // √(d·a) ≈ 0.316 in continuous time; whole-sample ramps give 0.3125.
    assert!((peak - 0.1f64.sqrt()).abs() <= 0.01);
    assert!(peak <= 0.1f64.sqrt());
}

#[test]
fn pid_tracks_canonical_trapezoid() {
    let traj = canonical_trapezoid();
    assert!((traj.duration() - 3.0).abs() < 1e-12);
    let run = |g: &PidGains| pid_follow(&mut plant_at(traj.start(), 0), &traj, g).unwrap().rmse;
    let base = run(&PidGains::default());
    assert!(base <= 0.05, "rmse {base}");
    let stiffer = run(&PidGains {
        kp: 2.0 * PidGains::default().kp,
        ..Default::default()
    });
    assert!(stiffer <= 1.1 * base, "{stiffer} vs {base}");
}

#[test]
fn pid_trivial_cases() {
    let mut plant = plant_at(0.2, 0);
    let s0 = plant.state.s;
    let still = gen_trajectory(s0, s0, 0.5, 0.5, DEFAULT_DT).unwrap();
    let p = canonical();
    let mut quiet = p.clone();
    quiet.sensor_noise_std = 0.0;
    let mut clean = Plant::with_state(quiet, plant.state, 0).unwrap();
    let log = pid_follow(&mut clean, &still, &PidGains::default()).unwrap();
    assert_eq!(log.steps.len(), 1);
    assert_eq!(log.steps[0].command, 0.0);

    let zero = PidGains {
        kp: 0.0,
        ki: 0.0,
        kd: 0.0,
        ..Default::default()
    };
    let traj = gen_trajectory(s0, s0 + 0.4, 0.5, 0.5, DEFAULT_DT).unwrap();
    let log = pid_follow(&mut plant, &traj, &zero).unwrap();
    assert!(log.steps.iter().all(|s| s.command == 0.0));
    assert_eq!(plant.state.len, p.rest_state_at_sensor(0.2).unwrap().len);
}

#[test]
fn marker_estimator_examples_and_accuracy() {
    let p = canonical();
    let cam = MarkerCamera::default();
    let at = |m: [(f64, f64); 2]| estimate_joint_state(&[MarkerSample { t: 0.0, markers: m }], &cam, &p, 0.5).unwrap();
    assert_eq!(at([(100.0, 100.0), (150.0, 100.0)]).sensor_pos, 0.0);
    let up = at([(100.0, 100.0), (100.0, 50.0)]).sensor_pos;
    let half_pi = std::f64::consts::FRAC_PI_2;
    assert!((up - (half_pi + p.sensor_beta)).abs() < 1e-12);
    let bad = [MarkerSample {
        t: 0.0,
        markers: [(5.0, 5.0), (5.0, 5.0)],
    }];
    assert!(estimate_joint_state(&bad, &cam, &p, 0.5).is_err());

    let log = collect_dataset(&p, &scenarios::canonical_chirp(), 40.0, DEFAULT_DT, 1).unwrap();
    let truth_v = log.sensor_velocities();
    let mut est = MarkerEstimator::new(&p, DEFAULT_ALPHA).unwrap();
    let (mut worst_s, mut worst_v) = (0.0f64, 0.0f64);
    for (k, r) in log.records.iter().enumerate() {
        let e = est
            .push(&MarkerSample {
                t: r.t,
                markers: render_markers(r, &cam),
            })
            .unwrap();
        worst_s = worst_s.max((e.sensor_pos - plant::sensor_from_joint(r.theta, &p)).abs());
        if k >= 2 {
            worst_v = worst_v.max((e.velocity - truth_v[k]).abs());
        }
    }
    assert!(worst_s <= 0.01, "position error {worst_s}");
    assert!(worst_v <= 0.02, "velocity error {worst_v}");
}

#[test]
fn episodes() {
    use MaterialClass::*;
    let p = canonical();
    let cfg = EpisodeConfig::for_plant(&p);
    let mut plant = Plant::new(p.clone(), 3).unwrap();
    let none = run_episode(
        &mut plant,
        &[],
        &Controller::Pid(PidGains::default()),
        StateSource::Direct,
        &cfg,
    )
    .unwrap();
    assert!(none.report.picks.is_empty() && none.report.success);

    let mut map = LabelMap::filled(64, 64, Unlabeled);
    paint(&mut map, 40, 10, 10, 10, Wood);
    let conf = vec![1.0; 64 * 64];
    let picks = plan_pick_sequence(&map, &conf, &strategy(&[Wood]), reach_range(&p)).unwrap();
    let run = |source| {
        let mut plant = Plant::new(p.clone(), 3).unwrap();
        run_episode(&mut plant, &picks, &Controller::Pid(PidGains::default()), source, &cfg).unwrap()
    };
    let direct = run(StateSource::Direct);
    assert_eq!(direct.report.completed, 1);
    assert!(direct.report.picks[0].rmse <= 0.05, "{:?}", direct.report);
    let markers = run(StateSource::Markers);
    assert!((markers.report.rmse - direct.report.rmse).abs() <= 0.02);

    let json = serde_json::to_string(&direct.report).unwrap();
    let back: EpisodeReport = serde_json::from_str(&json).unwrap();
    assert_eq!(back, direct.report);
    let mut csv = Vec::new();
    direct.write_steps_csv(&mut csv).unwrap();
    assert_eq!(String::from_utf8(csv).unwrap().lines().count(), direct.steps.len() + 1);
}

#[test]
fn policy_gradient_matches_finite_differences() {
    let p = canonical();
    let mut cfg = ControllerTrainConfig::for_plant(&p);
    cfg.horizon = 60;
    cfg.hidden_size = 6;
    let pol = PolicyModel::init_random(cfg.lookahead, cfg.hidden_size, 4);
    let traj = gen_trajectory(-0.2, 0.1, 0.4, 0.8, DEFAULT_DT).unwrap();
    let ctx = RolloutContext {
        rpm: p.engine_nominal_rpm,
        oil_temp: 45.0,
    };
    let mut grad = vec![0.0; pol.param_count()];
    policy_rollout_loss(&pol, predictor(), &traj, ctx, &cfg, Some(&mut grad));
    let flat = pol.flat_params();
    let mut probe = pol.clone();
    let eps = 1e-6;
    let mut worst = 0.0f64;
    for i in (0..flat.len()).step_by(3) {
        let mut f = flat.clone();
        f[i] += eps;
        probe.set_flat_params(&f);
        let plus = policy_rollout_loss(&probe, predictor(), &traj, ctx, &cfg, None);
        f[i] -= 2.0 * eps;
        probe.set_flat_params(&f);
        let minus = policy_rollout_loss(&probe, predictor(), &traj, ctx, &cfg, None);
        let numeric = (plus - minus) / (2.0 * eps);
        worst = worst.max((numeric - grad[i]).abs() / numeric.abs().max(grad[i].abs()).max(1e-7));
    }
    assert!(worst <= 1e-4, "max relative error {worst}");
}

#[test]
fn controller_training_is_deterministic_and_rests() {
    let p = canonical();
    let mut cfg = ControllerTrainConfig::for_plant(&p);
    cfg.epochs = 20;
    cfg.sampler.rest_fraction = 1.0;
    let a = train_controller(predictor(), &p, &cfg).unwrap();
    let b = train_controller(predictor(), &p, &cfg).unwrap();
    assert_eq!(a, b);
    assert!(*a.epoch_losses.last().unwrap() < 1e-4, "{:?}", a.epoch_losses);
    for s in [-0.4, 0.0, 0.4] {
        let u = a.policy.command(s, 0.0, &[s; 5]).unwrap();
        assert!(u.abs() <= p.dead_zone_pos.min(p.dead_zone_neg), "u = {u} at {s}");
    }
    let bad = ControllerTrainConfig { horizon: 2, ..cfg };
    assert!(train_controller(predictor(), &p, &bad).is_err());
}
