//! Pick planning, trajectories and joint control.
//!
//! Label maps become an ordered list of pick targets, each pick becomes a
//! pair of rest-to-rest trapezoids (pit to target, target to drop), and the
//! trapezoids are followed on the plant by a PID loop or by a feedforward
//! policy that was optimized only against a frozen [`RecurrentModel`].
//! Joint state comes either straight from the plant or from two image
//! markers.

use std::collections::BTreeMap;
use std::io::Write;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matclass::{LabelMap, MaterialClass};
use crate::plant::{self, JointPlantParams, JointState, MarkerCamera, Plant};
use crate::rng;
use crate::sysid::{HiddenState, RecurrentModel, StepCache, INPUT_SIZE, IN_COMMAND, IN_RPM, IN_SENSOR, IN_TEMP};

// ---------------------------------------------------------------- planning

/// Sorting strategy supplied by the operator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Strategy {
    /// Classes to pick, most important first. Classes not listed are left in
    /// the pit.
    pub priority: Vec<MaterialClass>,
    #[serde(default)]
    pub min_area: usize,
    #[serde(default)]
    pub min_confidence: f64,
}

impl Strategy {
    pub fn validate(&self) -> Result<()> {
        if self.priority.is_empty() {
            return Err(Error::invalid("strategy has an empty priority list"));
        }
        if self.priority.contains(&MaterialClass::Unlabeled) {
            return Err(Error::invalid("Unlabeled cannot be picked"));
        }
        for (i, c) in self.priority.iter().enumerate() {
            if self.priority[..i].contains(c) {
                return Err(Error::invalid(format!("{c} appears twice in the priority list")));
            }
        }
        if !(0.0..=1.0).contains(&self.min_confidence) {
            return Err(Error::invalid("min_confidence must lie in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PickTarget {
    pub material: MaterialClass,
    /// Mean pixel index of the component, (x, y).
    pub centroid_px: (f64, f64),
    pub area_px: usize,
    pub target_sensor_pos: f64,
}

/// Sensor interval the planner maps image columns onto: the full sensor
/// range with 10 % kept clear at each end, away from the stroke limits.
pub fn reach_range(params: &JointPlantParams) -> (f64, f64) {
    let (lo, hi) = params.sensor_range();
    let pad = 0.1 * (hi - lo);
    (lo + pad, hi - pad)
}

struct Component {
    rank: usize,
    first_px: usize,
    area: usize,
    centroid: (f64, f64),
    material: MaterialClass,
}

/// Connected components of confident, prioritized pixels, in pick order.
///
/// Order is (priority rank, area descending, centroid x, centroid y, first
/// pixel in raster order), a strict total order.
pub fn plan_pick_sequence(
    labels: &LabelMap,
    confidence: &[f64],
    strategy: &Strategy,
    reach: (f64, f64),
) -> Result<Vec<PickTarget>> {
    strategy.validate()?;
    let (w, h) = (labels.width, labels.height);
    if labels.labels.len() != w * h || confidence.len() != w * h {
        return Err(Error::invalid(format!(
            "label map ({}) and confidence map ({}) must both have {w}x{h} entries",
            labels.labels.len(),
            confidence.len()
        )));
    }
    if !(reach.0.is_finite() && reach.1.is_finite()) {
        return Err(Error::invalid("reach range must be finite"));
    }
    let rank_of = |c: MaterialClass| strategy.priority.iter().position(|p| *p == c);
    let eligible = |i: usize| confidence[i] >= strategy.min_confidence && rank_of(labels.labels[i]).is_some();

    let mut seen = vec![false; w * h];
    let mut comps = Vec::new();
    let mut stack = Vec::new();
    for start in 0..w * h {
        if seen[start] || !eligible(start) {
            continue;
        }
        let class = labels.labels[start];
        seen[start] = true;
        stack.push(start);
        let (mut n, mut sx, mut sy) = (0usize, 0.0, 0.0);
        while let Some(i) = stack.pop() {
            let (x, y) = (i % w, i / w);
            n += 1;
            sx += x as f64;
            sy += y as f64;
            let mut visit = |j: usize| {
                if !seen[j] && labels.labels[j] == class && eligible(j) {
                    seen[j] = true;
                    stack.push(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
        }
        if n >= strategy.min_area.max(1) {
            comps.push(Component {
                rank: rank_of(class).unwrap(),
                first_px: start,
                area: n,
                centroid: (sx / n as f64, sy / n as f64),
                material: class,
            });
        }
    }
    comps.sort_by(|a, b| {
        a.rank
            .cmp(&b.rank)
            .then(b.area.cmp(&a.area))
            .then(a.centroid.0.total_cmp(&b.centroid.0))
            .then(a.centroid.1.total_cmp(&b.centroid.1))
            .then(a.first_px.cmp(&b.first_px))
    });
    let span = (w.max(2) - 1) as f64;
    Ok(comps
        .into_iter()
        .map(|c| PickTarget {
            material: c.material,
            centroid_px: c.centroid,
            area_px: c.area,
            target_sensor_pos: reach.0 + (reach.1 - reach.0) * c.centroid.0 / span,
        })
        .collect())
}

// ------------------------------------------------------------ trajectories

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub t: f64,
    pub pos: f64,
    pub vel: f64,
}

/// Desired sensor position and velocity at a fixed sample interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub dt: f64,
    pub points: Vec<TrajectoryPoint>,
}

impl Trajectory {
    pub fn duration(&self) -> f64 {
        (self.points.len() - 1) as f64 * self.dt
    }

    pub fn positions(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.pos).collect()
    }

    pub fn start(&self) -> f64 {
        self.points[0].pos
    }

    pub fn end(&self) -> f64 {
        self.points[self.points.len() - 1].pos
    }

    /// Holds the final position for `seconds` more.
    pub fn with_hold(mut self, seconds: f64) -> Self {
        let n = (seconds / self.dt).round() as usize;
        let last = *self.points.last().unwrap();
        let k0 = self.points.len();
        for k in 0..n {
            self.points.push(TrajectoryPoint {
                t: (k0 + k) as f64 * self.dt,
                pos: last.pos,
                vel: 0.0,
            });
        }
        self
    }

    /// Concatenates `next`, which must start where `self` ends.
    pub fn then(mut self, next: &Trajectory) -> Result<Self> {
        if (next.start() - self.end()).abs() > 1e-12 || next.dt != self.dt {
            return Err(Error::invalid("trajectories do not join"));
        }
        let k0 = self.points.len() - 1;
        for (k, p) in next.points.iter().enumerate().skip(1) {
            self.points.push(TrajectoryPoint {
                t: (k0 + k) as f64 * self.dt,
                ..*p
            });
        }
        Ok(self)
    }
}

/// Rest-to-rest trapezoidal (or triangular) velocity profile.
///
/// The continuous profile's ramp and cruise times are rounded up to whole
/// samples and the peak velocity is then lowered so the trapezoid-rule
/// integral of the velocity samples covers the distance exactly; limits are
/// therefore never exceeded.
pub fn gen_trajectory(current: f64, target: f64, vmax: f64, amax: f64, dt: f64) -> Result<Trajectory> {
    if !(vmax > 0.0 && amax > 0.0 && dt > 0.0) || !(vmax.is_finite() && amax.is_finite() && dt.is_finite()) {
        return Err(Error::invalid("vmax, amax and dt must be positive"));
    }
    if !(current.is_finite() && target.is_finite()) {
        return Err(Error::invalid("trajectory end points must be finite"));
    }
    let d = (target - current).abs();
    let dir = (target - current).signum();
    if d == 0.0 {
        return Ok(Trajectory {
            dt,
            points: vec![TrajectoryPoint {
                t: 0.0,
                pos: current,
                vel: 0.0,
            }],
        });
    }
    let (t_a, t_c) = if d < vmax * vmax / amax {
        ((d / amax).sqrt(), 0.0)
    } else {
        (vmax / amax, (d - vmax * vmax / amax) / vmax)
    };
    let n_a = ((t_a / dt - 1e-9).ceil() as usize).max(1);
    let n_c = (t_c / dt - 1e-9).ceil().max(0.0) as usize;
    let v_peak = d / ((n_a + n_c) as f64 * dt);
    let n = 2 * n_a + n_c;
    let speed = |k: usize| {
        if k <= n_a {
            v_peak * k as f64 / n_a as f64
        } else if k <= n_a + n_c {
            v_peak
        } else {
            v_peak * (n - k) as f64 / n_a as f64
        }
    };
    let mut points = Vec::with_capacity(n + 1);
    let mut pos = current;
    for k in 0..=n {
        if k > 0 {
            pos += dir * 0.5 * dt * (speed(k - 1) + speed(k));
        }
        points.push(TrajectoryPoint {
            t: k as f64 * dt,
            pos: if k == n { target } else { pos },
            vel: dir * speed(k),
        });
    }
    Ok(Trajectory { dt, points })
}

/// The reference move: 1 rad at vmax 0.5 rad/s and amax 0.5 rad/s², 3 s.
pub fn canonical_trapezoid() -> Trajectory {
    gen_trajectory(-0.5, 0.5, 0.5, 0.5, plant::DEFAULT_DT).expect("valid canonical trapezoid")
}

// ------------------------------------------------------------------ state

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimatedJointState {
    pub sensor_pos: f64,
    pub velocity: f64,
    pub timestamp: f64,
}

/// Image positions of the pivot and link markers at one instant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarkerSample {
    pub t: f64,
    pub markers: [(f64, f64); 2],
}

/// Joint angle seen by the camera; inverse of [`plant::render_markers`].
pub fn marker_angle(markers: &[(f64, f64); 2]) -> Result<f64> {
    let [(x1, y1), (x2, y2)] = *markers;
    if !(x1.is_finite() && y1.is_finite() && x2.is_finite() && y2.is_finite()) {
        return Err(Error::invalid("marker positions must be finite"));
    }
    if x1 == x2 && y1 == y2 {
        return Err(Error::invalid("markers coincide; the joint angle is undefined"));
    }
    Ok(-(y2 - y1).atan2(x2 - x1))
}

/// Streaming marker-based estimator.
///
/// Position is the sensor map of the latest marker angle. Velocity is the
/// central difference at the middle of the last three samples (a backward
/// difference while only two exist), passed through
/// `v ← α·v_new + (1 − α)·v`.
#[derive(Debug, Clone)]
pub struct MarkerEstimator {
    pub alpha: f64,
    sensor_beta: f64,
    history: Vec<(f64, f64)>,
    velocity: Option<f64>,
}

impl MarkerEstimator {
    pub fn new(params: &JointPlantParams, alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(Error::invalid("smoothing coefficient must lie in (0, 1]"));
        }
        Ok(Self {
            alpha,
            sensor_beta: params.sensor_beta,
            history: Vec::with_capacity(3),
            velocity: None,
        })
    }

    pub fn push(&mut self, sample: &MarkerSample) -> Result<EstimatedJointState> {
        let theta = marker_angle(&sample.markers)?;
        let s = theta + self.sensor_beta * theta.sin();
        if let Some(&(t_last, _)) = self.history.last() {
            if !(sample.t > t_last) {
                return Err(Error::invalid("marker timestamps must increase"));
            }
        }
        if self.history.len() == 3 {
            self.history.remove(0);
        }
        self.history.push((sample.t, s));
        let raw = match self.history.as_slice() {
            [(t0, s0), _, (t2, s2)] => Some((s2 - s0) / (t2 - t0)),
            [(t0, s0), (t1, s1)] => Some((s1 - s0) / (t1 - t0)),
            _ => None,
        };
        if let Some(v) = raw {
            self.velocity = Some(match self.velocity {
                Some(prev) => self.alpha * v + (1.0 - self.alpha) * prev,
                None => v,
            });
        }
        Ok(EstimatedJointState {
            sensor_pos: s,
            velocity: self.velocity.unwrap_or(0.0),
            timestamp: sample.t,
        })
    }
}

/// Estimate after feeding a whole marker history.
pub fn estimate_joint_state(
    history: &[MarkerSample],
    camera: &MarkerCamera,
    params: &JointPlantParams,
    alpha: f64,
) -> Result<EstimatedJointState> {
    // The angle is invariant to the camera's scale and principal point; the
    // camera only has to be a valid projection.
    if !(camera.scale > 0.0 && camera.scale.is_finite()) {
        return Err(Error::invalid("camera scale must be positive"));
    }
    if history.is_empty() {
        return Err(Error::invalid("marker history is empty"));
    }
    let mut est = MarkerEstimator::new(params, alpha)?;
    let mut last = None;
    for s in history {
        last = Some(est.push(s)?);
    }
    Ok(last.unwrap())
}

/// Where the controller gets the joint state from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StateSource {
    /// Encoder reading and exact sensor-axis velocity from the plant.
    Direct,
    /// Noiseless marker renders through [`MarkerEstimator`].
    Markers,
}

struct StateReader {
    source: StateSource,
    camera: MarkerCamera,
    estimator: MarkerEstimator,
}

impl StateReader {
    fn new(source: StateSource, camera: MarkerCamera, params: &JointPlantParams, alpha: f64) -> Result<Self> {
        Ok(Self {
            source,
            camera,
            estimator: MarkerEstimator::new(params, alpha)?,
        })
    }

    fn read(&mut self, st: &JointState, params: &JointPlantParams) -> Result<EstimatedJointState> {
        match self.source {
            StateSource::Direct => Ok(EstimatedJointState {
                sensor_pos: st.s,
                velocity: plant::sensor_velocity(st.theta, st.omega, params),
                timestamp: st.t,
            }),
            StateSource::Markers => self.estimator.push(&MarkerSample {
                t: st.t,
                markers: plant::render_markers(st, &self.camera),
            }),
        }
    }
}

// -------------------------------------------------------------------- PID

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PidGains {
    pub kp: f64,
    pub ki: f64,
    pub kd: f64,
    /// Bound on |∫e dt|.
    pub integrator_clamp: f64,
    /// Bound on |u|, at most 1.
    pub output_clamp: f64,
}

impl Default for PidGains {
    fn default() -> Self {
        Self {
            kp: 20.0,
            ki: 10.0,
            kd: 0.5,
            integrator_clamp: 0.05,
            output_clamp: 1.0,
        }
    }
}

impl PidGains {
    pub fn validate(&self) -> Result<()> {
        let finite = [self.kp, self.ki, self.kd].iter().all(|g| g.is_finite());
        if !finite || !(self.integrator_clamp > 0.0) || !(self.output_clamp > 0.0 && self.output_clamp <= 1.0) {
            return Err(Error::invalid(
                "PID gains must be finite with positive clamps, output clamp at most 1",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct PidState {
    integral: f64,
    prev_error: Option<f64>,
}

impl PidState {
    fn new() -> Self {
        Self {
            integral: 0.0,
            prev_error: None,
        }
    }

    fn command(&mut self, gains: &PidGains, error: f64, dt: f64) -> f64 {
        self.integral = (self.integral + error * dt).clamp(-gains.integrator_clamp, gains.integrator_clamp);
        let de = (error - self.prev_error.unwrap_or(error)) / dt;
        self.prev_error = Some(error);
        (gains.kp * error + gains.ki * self.integral + gains.kd * de).clamp(-gains.output_clamp, gains.output_clamp)
    }
}

/// One control-loop sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlStep {
    pub t: f64,
    pub desired: f64,
    /// Position the controller saw.
    pub estimated: f64,
    /// Noise-free sensor position σ(θ).
    pub actual: f64,
    pub command: f64,
}

/// Closed-loop run over one trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackingLog {
    pub steps: Vec<ControlStep>,
    /// RMS of desired − actual over all samples.
    pub rmse: f64,
}

/// The controllers [`follow`] can run.
#[derive(Debug, Clone, PartialEq)]
pub enum Controller<'a> {
    Pid(PidGains),
    Policy(&'a PolicyModel),
}

impl Controller<'_> {
    pub fn name(&self) -> &'static str {
        match self {
            Controller::Pid(_) => "pid",
            Controller::Policy(_) => "policy",
        }
    }
}

/// Follows `trajectory` on `plant` at the trajectory's dt.
///
/// At every sample (including the last) the controller reads the state,
/// issues a command and the plant advances one step; the tracking error is
/// taken against the noise-free sensor position before each command.
pub fn follow(
    plant: &mut Plant,
    trajectory: &Trajectory,
    controller: &Controller,
    source: StateSource,
    camera: &MarkerCamera,
    alpha: f64,
) -> Result<TrackingLog> {
    let dt = trajectory.dt;
    let mut reader = StateReader::new(source, *camera, &plant.params, alpha)?;
    let mut pid = PidState::new();
    if let Controller::Pid(g) = controller {
        g.validate()?;
    }
    let desired = trajectory.positions();
    let t0 = plant.state.t;
    let mut steps = Vec::with_capacity(desired.len());
    for (k, &p) in desired.iter().enumerate() {
        let st = plant.state;
        let est = reader.read(&st, &plant.params)?;
        let u = match controller {
            Controller::Pid(g) => pid.command(g, p - est.sensor_pos, dt),
            Controller::Policy(pol) => {
                pol.command(est.sensor_pos, est.velocity, &lookahead(&desired, k, pol.lookahead))?
            }
        };
        steps.push(ControlStep {
            t: st.t - t0,
            desired: p,
            estimated: est.sensor_pos,
            actual: plant::sensor_from_joint(st.theta, &plant.params),
            command: u,
        });
        plant.step(u, dt)?;
    }
    let rmse = (steps.iter().map(|s| (s.desired - s.actual).powi(2)).sum::<f64>() / steps.len() as f64).sqrt();
    Ok(TrackingLog { steps, rmse })
}

fn lookahead(desired: &[f64], k: usize, count: usize) -> Vec<f64> {
    (1..=count).map(|j| desired[(k + j).min(desired.len() - 1)]).collect()
}

/// PID tracking on sensor-position error with Direct state.
pub fn pid_follow(plant: &mut Plant, trajectory: &Trajectory, gains: &PidGains) -> Result<TrackingLog> {
    follow(
        plant,
        trajectory,
        &Controller::Pid(*gains),
        StateSource::Direct,
        &MarkerCamera::default(),
        DEFAULT_ALPHA,
    )
}

pub const DEFAULT_ALPHA: f64 = 0.5;

// ----------------------------------------------------------------- policy

/// Feedforward policy: tanh hidden layer, tanh output.
///
/// Inputs are the current sensor position, velocity and the next
/// `lookahead` desired positions, the latter relative to the current
/// position; each is multiplied by `input_scale` before the first layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyModel {
    pub lookahead: usize,
    pub hidden_size: usize,
    pub input_scale: Vec<f64>,
    /// `hidden x inputs`, row-major.
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: f64,
}

struct PolicyCache {
    a: Vec<f64>,
    u: f64,
}

impl PolicyModel {
    pub fn init_random(lookahead: usize, hidden_size: usize, seed: u64) -> Self {
        let n_in = 2 + lookahead;
        let mut r = rng::seeded(seed);
        let n1 = Normal::new(0.0, (1.0 / n_in as f64).sqrt()).unwrap();
        let w1 = (0..hidden_size * n_in).map(|_| n1.sample(&mut r)).collect();
        let w2 = (0..hidden_size).map(|_| r.random_range(-0.1..0.1)).collect();
        let mut input_scale = vec![1.0, 2.0];
        input_scale.extend((1..=lookahead).map(|j| 1.0 / (0.005 * j as f64)));
        Self {
            lookahead,
            hidden_size,
            input_scale,
            w1,
            b1: vec![0.0; hidden_size],
            w2,
            b2: 0.0,
        }
    }

    pub fn inputs(&self) -> usize {
        2 + self.lookahead
    }

    pub fn param_count(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + 1
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.inputs();
        let shapes = self.input_scale.len() == n
            && self.w1.len() == self.hidden_size * n
            && self.b1.len() == self.hidden_size
            && self.w2.len() == self.hidden_size;
        if !shapes || self.lookahead == 0 || self.hidden_size == 0 {
            return Err(Error::format("policy shapes do not match its sizes"));
        }
        if !self
            .flat_params()
            .iter()
            .chain(&self.input_scale)
            .all(|v| v.is_finite())
        {
            return Err(Error::format("policy has non-finite parameters"));
        }
        Ok(())
    }

    pub fn flat_params(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.param_count());
        p.extend(&self.w1);
        p.extend(&self.b1);
        p.extend(&self.w2);
        p.push(self.b2);
        p
    }

    pub fn set_flat_params(&mut self, p: &[f64]) {
        let (a, rest) = p.split_at(self.w1.len());
        let (b, rest) = rest.split_at(self.b1.len());
        let (c, rest) = rest.split_at(self.w2.len());
        self.w1.copy_from_slice(a);
        self.b1.copy_from_slice(b);
        self.w2.copy_from_slice(c);
        self.b2 = rest[0];
    }

    fn features(&self, s: f64, v: f64, ahead: &[f64]) -> Vec<f64> {
        let mut f = Vec::with_capacity(self.inputs());
        f.push(s * self.input_scale[0]);
        f.push(v * self.input_scale[1]);
        for (j, p) in ahead.iter().enumerate() {
            f.push((p - s) * self.input_scale[2 + j]);
        }
        f
    }

    fn forward(&self, f: &[f64]) -> PolicyCache {
        let n = self.inputs();
        let a: Vec<f64> = (0..self.hidden_size)
            .map(|j| {
                (self.b1[j]
                    + self.w1[j * n..(j + 1) * n]
                        .iter()
                        .zip(f)
                        .map(|(a, b)| a * b)
                        .sum::<f64>())
                .tanh()
            })
            .collect();
        let u = (self.b2 + self.w2.iter().zip(&a).map(|(w, x)| w * x).sum::<f64>()).tanh();
        PolicyCache { a, u }
    }

    /// Backpropagates `du` (gradient w.r.t. the command); accumulates
    /// parameter gradients and returns the gradient w.r.t. the features.
    fn backward(&self, f: &[f64], cache: &PolicyCache, du: f64, grad: &mut [f64]) -> Vec<f64> {
        let n = self.inputs();
        let hs = self.hidden_size;
        let (ob1, ow2) = (hs * n, hs * n + hs);
        let dpre = du * (1.0 - cache.u * cache.u);
        grad[ow2 + hs] += dpre;
        let mut df = vec![0.0; n];
        for j in 0..hs {
            grad[ow2 + j] += dpre * cache.a[j];
            let dz = dpre * self.w2[j] * (1.0 - cache.a[j] * cache.a[j]);
            grad[ob1 + j] += dz;
            for k in 0..n {
                grad[j * n + k] += dz * f[k];
                df[k] += dz * self.w1[j * n + k];
            }
        }
        df
    }

    /// Command for the current state and the next `lookahead` desired
    /// positions. Always within [-1, 1].
    pub fn command(&self, s: f64, v: f64, ahead: &[f64]) -> Result<f64> {
        if ahead.len() != self.lookahead {
            return Err(Error::invalid(format!(
                "policy expects {} look-ahead positions, got {}",
                self.lookahead,
                ahead.len()
            )));
        }
        if !s.is_finite() || !v.is_finite() || ahead.iter().any(|p| !p.is_finite()) {
            return Err(Error::invalid("policy inputs must be finite"));
        }
        Ok(self.forward(&self.features(s, v, ahead)).u)
    }
}

/// Random rest-to-rest moves inside a sensor interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySampler {
    pub reach: (f64, f64),
    pub vmax: (f64, f64),
    pub amax: (f64, f64),
    /// Minimum move distance, rad.
    pub min_distance: f64,
    /// Rest appended after each move, s.
    pub hold: f64,
    /// Probability of drawing a pure hold at the start position instead of
    /// a move.
    #[serde(default)]
    pub rest_fraction: f64,
    pub dt: f64,
}

impl TrajectorySampler {
    pub fn for_plant(params: &JointPlantParams) -> Self {
        Self {
            reach: reach_range(params),
            vmax: (0.2, 0.5),
            amax: (0.3, 1.0),
            min_distance: 0.05,
            hold: 0.5,
            rest_fraction: 0.1,
            dt: plant::DEFAULT_DT,
        }
    }

    pub fn sample(&self, r: &mut impl Rng) -> Result<Trajectory> {
        let (lo, hi) = self.reach;
        if !(hi - lo > self.min_distance) {
            return Err(Error::invalid("sampler reach is shorter than the minimum distance"));
        }
        if !(0.0..=1.0).contains(&self.rest_fraction) {
            return Err(Error::invalid("rest_fraction must lie in [0, 1]"));
        }
        let start = r.random_range(lo..hi);
        if r.random::<f64>() < self.rest_fraction {
            return Ok(gen_trajectory(start, start, 1.0, 1.0, self.dt)?.with_hold(1.0 + self.hold));
        }
        let mut target = r.random_range(lo..hi);
        while (target - start).abs() < self.min_distance {
            target = r.random_range(lo..hi);
        }
        let vmax = r.random_range(self.vmax.0..=self.vmax.1);
        let amax = r.random_range(self.amax.0..=self.amax.1);
        Ok(gen_trajectory(start, target, vmax, amax, self.dt)?.with_hold(self.hold))
    }

    /// `count` trajectories from their own seeded stream.
    pub fn sample_set(&self, count: usize, seed: u64) -> Result<Vec<Trajectory>> {
        let mut r = rng::seeded(seed);
        (0..count).map(|_| self.sample(&mut r)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerTrainConfig {
    pub lookahead: usize,
    pub hidden_size: usize,
    /// Longest rollout through the predictor, steps.
    pub horizon: usize,
    pub epochs: usize,
    /// Trajectories per epoch.
    pub batch: usize,
    pub lr: f64,
    pub clip_norm: f64,
    pub lambda_cmd: f64,
    pub mu_smooth: f64,
    /// Zero-command steps that warm the predictor state before a rollout.
    pub warmup: usize,
    pub seed: u64,
    pub sampler: TrajectorySampler,
}

impl ControllerTrainConfig {
    pub fn for_plant(params: &JointPlantParams) -> Self {
        Self {
            lookahead: 5,
            hidden_size: 32,
            horizon: 400,
            epochs: 150,
            batch: 8,
            lr: 3e-3,
            clip_norm: 1.0,
            lambda_cmd: 1e-4,
            mu_smooth: 1e-3,
            warmup: 20,
            seed: 0,
            sampler: TrajectorySampler::for_plant(params),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lookahead == 0 || self.hidden_size == 0 || self.epochs == 0 || self.batch == 0 {
            return Err(Error::invalid(
                "lookahead, hidden_size, epochs and batch must be positive",
            ));
        }
        if self.horizon < self.lookahead {
            return Err(Error::invalid("horizon must be at least the look-ahead"));
        }
        if !(self.lr > 0.0 && self.clip_norm > 0.0 && self.lambda_cmd >= 0.0 && self.mu_smooth >= 0.0) {
            return Err(Error::invalid(
                "lr and clip must be positive, loss weights non-negative",
            ));
        }
        Ok(())
    }
}

/// Context the frozen predictor sees besides position and command.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RolloutContext {
    pub rpm: f64,
    pub oil_temp: f64,
}

/// Loss of one trajectory rolled out through the predictor, with policy
/// gradients accumulated into `grad` when given.
///
/// Loss = mean over steps of (s − s*)² + λ·u² + μ·(u − u_prev)².
pub fn policy_rollout_loss(
    policy: &PolicyModel,
    predictor: &RecurrentModel,
    trajectory: &Trajectory,
    context: RolloutContext,
    cfg: &ControllerTrainConfig,
    grad: Option<&mut [f64]>,
) -> f64 {
    let desired = trajectory.positions();
    let n = (desired.len() - 1).min(cfg.horizon);
    let dt = trajectory.dt;
    let x_of = |s: f64, u: f64| {
        let mut x = [0.0; INPUT_SIZE];
        x[IN_SENSOR] = s;
        x[IN_RPM] = context.rpm;
        x[IN_TEMP] = context.oil_temp;
        x[IN_COMMAND] = u;
        predictor.normalize(&x)
    };
    let mut hidden = HiddenState::zeros(predictor.hidden_size);
    for _ in 0..cfg.warmup {
        hidden = predictor.forward_step(&x_of(desired[0], 0.0), &hidden).hidden();
    }
    let mut s = vec![desired[0]; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut u = vec![0.0; n];
    let mut feats = Vec::with_capacity(n);
    let mut pcaches = Vec::with_capacity(n);
    let mut caches: Vec<StepCache> = Vec::with_capacity(n);
    for t in 0..n {
        let f = policy.features(s[t], v[t], &lookahead(&desired, t, policy.lookahead));
        let pc = policy.forward(&f);
        u[t] = pc.u;
        let c = predictor.forward_step(&x_of(s[t], u[t]), &hidden);
        v[t + 1] = predictor.denormalize_target(predictor.head(c.h()));
        s[t + 1] = s[t] + v[t + 1] * dt;
        hidden = c.hidden();
        feats.push(f);
        pcaches.push(pc);
        caches.push(c);
    }
    let nf = n as f64;
    let mut loss = 0.0;
    for t in 0..n {
        let prev = if t > 0 { u[t - 1] } else { 0.0 };
        loss +=
            (s[t + 1] - desired[t + 1]).powi(2) + cfg.lambda_cmd * u[t] * u[t] + cfg.mu_smooth * (u[t] - prev).powi(2);
    }
    loss /= nf;

    if let Some(grad) = grad {
        let mut gs = vec![0.0; n + 1];
        let mut gv = vec![0.0; n + 1];
        let mut gu = vec![0.0; n];
        for t in 0..n {
            gs[t + 1] = 2.0 * (s[t + 1] - desired[t + 1]) / nf;
            let prev = if t > 0 { u[t - 1] } else { 0.0 };
            gu[t] += (2.0 * cfg.lambda_cmd * u[t] + 2.0 * cfg.mu_smooth * (u[t] - prev)) / nf;
            if t > 0 {
                gu[t - 1] -= 2.0 * cfg.mu_smooth * (u[t] - prev) / nf;
            }
        }
        let sig_s = predictor.input_stds[IN_SENSOR];
        let sig_u = predictor.input_stds[IN_COMMAND];
        let mut dh = vec![0.0; predictor.hidden_size];
        let mut dc = vec![0.0; predictor.hidden_size];
        for t in (0..n).rev() {
            gv[t + 1] += gs[t + 1] * dt;
            gs[t] += gs[t + 1];
            let dy = gv[t + 1] * predictor.target_std;
            let (dx, prev) = predictor.backward_step(&caches[t], dy, &dh, &dc, None);
            dh = prev.h;
            dc = prev.c;
            gs[t] += dx[IN_SENSOR] / sig_s;
            gu[t] += dx[IN_COMMAND] / sig_u;
            let df = policy.backward(&feats[t], &pcaches[t], gu[t], grad);
            gs[t] += df[0] * policy.input_scale[0];
            gv[t] += df[1] * policy.input_scale[1];
            for j in 0..policy.lookahead {
                gs[t] -= df[2 + j] * policy.input_scale[2 + j];
            }
        }
    }
    loss
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedPolicy {
    pub policy: PolicyModel,
    pub epoch_losses: Vec<f64>,
}

/// Optimizes a policy through free-running rollouts of the frozen predictor.
/// The plant is never touched. Each epoch draws a fresh batch of
/// trajectories and oil temperatures from the seeded stream.
pub fn train_controller(
    predictor: &RecurrentModel,
    params: &JointPlantParams,
    cfg: &ControllerTrainConfig,
) -> Result<TrainedPolicy> {
    cfg.validate()?;
    predictor.validate()?;
    let mut policy = PolicyModel::init_random(cfg.lookahead, cfg.hidden_size, cfg.seed);
    let mut r = rng::substream(cfg.seed, 0x7472_616a);
    let (t_lo, t_hi) = (
        params.temp_warmup.ambient,
        params.temp_warmup.ambient + params.temp_warmup.rise,
    );
    let np = policy.param_count();
    let (mut m, mut vv) = (vec![0.0; np], vec![0.0; np]);
    let mut params_flat = policy.flat_params();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let jobs: Vec<(Trajectory, RolloutContext)> = (0..cfg.batch)
            .map(|_| {
                let tr = cfg.sampler.sample(&mut r)?;
                let ctx = RolloutContext {
                    rpm: params.engine_nominal_rpm,
                    oil_temp: r.random_range(t_lo..=t_hi),
                };
                Ok((tr, ctx))
            })
            .collect::<Result<_>>()?;
        let results: Vec<(f64, Vec<f64>)> = jobs
            .par_iter()
            .map(|(tr, ctx)| {
                let mut g = vec![0.0; np];
                let l = policy_rollout_loss(&policy, predictor, tr, *ctx, cfg, Some(&mut g));
                (l, g)
            })
            .collect();
        let mut grad = vec![0.0; np];
        let mut loss = 0.0;
        for (l, g) in &results {
            loss += l;
            grad.iter_mut().zip(g).for_each(|(a, b)| *a += b);
        }
        let b = cfg.batch as f64;
        loss /= b;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Divergence { epoch, loss });
        }
        grad.iter_mut().for_each(|g| *g /= b);
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if norm > cfg.clip_norm {
            grad.iter_mut().for_each(|g| *g *= cfg.clip_norm / norm);
        }
        let t = (epoch + 1) as i32;
        let (b1, b2) = (0.9f64, 0.999f64);
        for i in 0..np {
            m[i] = b1 * m[i] + (1.0 - b1) * grad[i];
            vv[i] = b2 * vv[i] + (1.0 - b2) * grad[i] * grad[i];
            params_flat[i] -= cfg.lr * (m[i] / (1.0 - b1.powi(t))) / ((vv[i] / (1.0 - b2.powi(t))).sqrt() + 1e-8);
        }
        policy.set_flat_params(&params_flat);
        log::debug!("controller epoch {epoch}: loss {loss:.6e}");
        epoch_losses.push(loss);
    }
    policy.validate()?;
    Ok(TrainedPolicy { policy, epoch_losses })
}

// --------------------------------------------------------------- episodes

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeConfig {
    pub vmax: f64,
    pub amax: f64,
    pub dt: f64,
    /// Picks tracked worse than this RMS error are marked failed.
    pub fail_rmse: f64,
    /// Rest at the target (gripping) before moving to the drop, s.
    pub dwell: f64,
    /// Sorting location per material, sensor rad.
    pub drop_positions: BTreeMap<MaterialClass, f64>,
    pub camera: MarkerCamera,
    pub alpha: f64,
}

impl EpisodeConfig {
    /// One bin per class, evenly spread over the reachable interval.
    pub fn for_plant(params: &JointPlantParams) -> Self {
        let (lo, hi) = reach_range(params);
        let n = MaterialClass::TRAINABLE.len() as f64;
        let drop_positions = MaterialClass::TRAINABLE
            .iter()
            .enumerate()
            .map(|(k, c)| (*c, lo + (hi - lo) * (k as f64 + 0.5) / n))
            .collect();
        Self {
            vmax: 0.4,
            amax: 0.5,
            dt: plant::DEFAULT_DT,
            fail_rmse: 0.2,
            dwell: 0.2,
            drop_positions,
            camera: MarkerCamera::default(),
            alpha: DEFAULT_ALPHA,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PickReport {
    pub index: usize,
    pub material: MaterialClass,
    pub centroid_px: (f64, f64),
    pub area_px: usize,
    pub target_sensor_pos: f64,
    pub drop_sensor_pos: f64,
    pub rmse: f64,
    pub completed: bool,
    pub duration: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeReport {
    pub controller: String,
    pub state_source: StateSource,
    pub picks: Vec<PickReport>,
    pub completed: usize,
    pub failed: usize,
    pub total_time: f64,
    /// RMS tracking error over every sample of the episode.
    pub rmse: f64,
    pub success: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeStep {
    pub pick: usize,
    pub step: ControlStep,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub report: EpisodeReport,
    pub steps: Vec<EpisodeStep>,
}

impl Episode {
    /// Per-step CSV: `t,pick,desired,estimated,actual,command`, with `t` on
    /// the episode clock.
    pub fn write_steps_csv(&self, writer: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["t", "pick", "desired", "estimated", "actual", "command"])?;
        for e in &self.steps {
            let s = e.step;
            w.write_record([
                s.t.to_string(),
                e.pick.to_string(),
                s.desired.to_string(),
                s.estimated.to_string(),
                s.actual.to_string(),
                s.command.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Executes the planned picks in order on `plant`: move to the target, dwell,
/// move to the material's drop position. Failed picks are recorded and the
/// episode continues.
pub fn run_episode(
    plant: &mut Plant,
    picks: &[PickTarget],
    controller: &Controller,
    source: StateSource,
    cfg: &EpisodeConfig,
) -> Result<Episode> {
    let t_start = plant.state.t;
    let mut reports = Vec::with_capacity(picks.len());
    let mut steps = Vec::new();
    for (i, pick) in picks.iter().enumerate() {
        let drop = *cfg
            .drop_positions
            .get(&pick.material)
            .ok_or_else(|| Error::invalid(format!("no drop position for {}", pick.material)))?;
        let from = plant::sensor_from_joint(plant.state.theta, &plant.params);
        let traj = gen_trajectory(from, pick.target_sensor_pos, cfg.vmax, cfg.amax, cfg.dt)?
            .with_hold(cfg.dwell)
            .then(&gen_trajectory(
                pick.target_sensor_pos,
                drop,
                cfg.vmax,
                cfg.amax,
                cfg.dt,
            )?)?;
        let t_pick = plant.state.t;
        let log = follow(plant, &traj, controller, source, &cfg.camera, cfg.alpha)?;
        for s in &log.steps {
            steps.push(EpisodeStep {
                pick: i,
                step: ControlStep {
                    t: t_pick - t_start + s.t,
                    ..*s
                },
            });
        }
        let completed = log.rmse <= cfg.fail_rmse;
        if !completed {
            log::warn!("pick {i} ({}) failed with rmse {:.3} rad", pick.material, log.rmse);
        }
        reports.push(PickReport {
            index: i,
            material: pick.material,
            centroid_px: pick.centroid_px,
            area_px: pick.area_px,
            target_sensor_pos: pick.target_sensor_pos,
            drop_sensor_pos: drop,
            rmse: log.rmse,
            completed,
            duration: plant.state.t - t_pick,
        });
    }
    let completed = reports.iter().filter(|r| r.completed).count();
    let rmse = if steps.is_empty() {
        0.0
    } else {
        (steps
            .iter()
            .map(|e| (e.step.desired - e.step.actual).powi(2))
            .sum::<f64>()
            / steps.len() as f64)
            .sqrt()
    };
    Ok(Episode {
        report: EpisodeReport {
            controller: controller.name().to_string(),
            state_source: source,
            completed,
            failed: reports.len() - completed,
            success: completed == reports.len(),
            picks: reports,
            total_time: plant.state.t - t_start,
            rmse,
        },
        steps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn marker_angle_examples() {
        assert_eq!(marker_angle(&[(100.0, 100.0), (150.0, 100.0)]).unwrap(), 0.0);
        assert!((marker_angle(&[(100.0, 100.0), (100.0, 50.0)]).unwrap() - PI / 2.0).abs() < 1e-15);
        assert!(marker_angle(&[(3.0, 4.0), (3.0, 4.0)]).is_err());
    }

    #[test]
    fn trajectory_examples() {
        let t = gen_trajectory(0.3, 0.3, 1.0, 1.0, 0.01).unwrap();
        assert_eq!(t.points.len(), 1);
        assert_eq!(t.duration(), 0.0);

        let t = gen_trajectory(0.0, 1.0, 0.5, 0.5, 0.01).unwrap();
        assert!((t.duration() - 3.0).abs() < 1e-12);
        assert!((t.points[100].pos - 0.25).abs() < 1e-12);
        assert!((t.points[200].pos - 0.75).abs() < 1e-12);
        assert!((t.points[150].vel - 0.5).abs() < 1e-15);

        let t = gen_trajectory(0.0, 0.1, 1.0, 1.0, 0.01).unwrap();
        let peak = t.points.iter().map(|p| p.vel).fold(0.0, f64::max);
        assert!((peak - 0.1f64.sqrt()).abs() <= 0.01, "peak {peak}");
    }

    #[test]
    fn pid_with_zero_gains_never_moves() {
        let p = JointPlantParams::canonical();
        let mut plant = Plant::new(p.clone(), 0).unwrap();
        let traj = gen_trajectory(plant.state.s, plant.state.s + 0.3, 0.5, 0.5, 0.01).unwrap();
        let gains = PidGains {
            kp: 0.0,
            ki: 0.0,
            kd: 0.0,
            ..Default::default()
        };
        let log = pid_follow(&mut plant, &traj, &gains).unwrap();
        assert!(log.steps.iter().all(|s| s.command == 0.0));
        assert_eq!(plant.state.len, p.center_len());
    }
}
