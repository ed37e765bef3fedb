//! Synthetic single-joint hydraulic plant.
//!
//! The valve chain is dead-zone → play-operator hysteresis → temperature and
//! engine-speed dependent gain → first-order lag. The cylinder drives the
//! joint through a law-of-cosines triangle, and the encoder sits on an axis
//! related to the joint by `s = θ + β sin θ`.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, SeededRng};

const CANONICAL_PARAMS: &str = include_str!("../data/canonical_plant.json");

/// Default control and logging period.
pub const DEFAULT_DT: f64 = 0.01;

/// Fraction of the actuator stroke near either end where the collector's
/// safety rule takes over.
pub const SAFETY_MARGIN: f64 = 0.05;

/// Command magnitude used to drive back toward the stroke center.
pub const SAFETY_RECOVERY_CMD: f64 = 0.4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TempWarmup {
    /// °C at t = 0.
    pub ambient: f64,
    /// Asymptotic rise above ambient, °C.
    pub rise: f64,
    /// Time constant, s.
    pub tau: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointPlantParams {
    pub dead_zone_pos: f64,
    pub dead_zone_neg: f64,
    pub hysteresis_width: f64,
    /// Actuator speed per unit command, m/s.
    pub gain_g0: f64,
    /// Relative gain change per °C.
    pub temp_coeff: f64,
    pub temp_ref: f64,
    pub engine_nominal_rpm: f64,
    pub lag_tau: f64,
    pub link_a: f64,
    pub link_b: f64,
    /// (Lmin, Lmax) in m.
    pub actuator_range: (f64, f64),
    pub joint_offset: f64,
    pub sensor_beta: f64,
    pub sensor_noise_std: f64,
    pub temp_warmup: TempWarmup,
}

impl JointPlantParams {
    /// The parameter file shipped with the crate.
    pub fn canonical() -> Self {
        serde_json::from_str(CANONICAL_PARAMS).expect("canonical plant params parse")
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let p: Self = serde_json::from_reader(BufReader::new(File::open(path)?))?;
        p.validate().map_err(|e| Error::format(e.to_string()))?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.dead_zone_pos,
            self.dead_zone_neg,
            self.hysteresis_width,
            self.gain_g0,
            self.temp_coeff,
            self.temp_ref,
            self.engine_nominal_rpm,
            self.lag_tau,
            self.link_a,
            self.link_b,
            self.actuator_range.0,
            self.actuator_range.1,
            self.joint_offset,
            self.sensor_beta,
            self.sensor_noise_std,
            self.temp_warmup.ambient,
            self.temp_warmup.rise,
            self.temp_warmup.tau,
        ];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("plant parameters must be finite"));
        }
        for (name, d) in [
            ("dead_zone_pos", self.dead_zone_pos),
            ("dead_zone_neg", self.dead_zone_neg),
        ] {
            if !(0.0..1.0).contains(&d) {
                return Err(Error::invalid(format!("{name} must be in [0, 1)")));
            }
        }
        if self.hysteresis_width < 0.0 || self.gain_g0 < 0.0 || self.sensor_noise_std < 0.0 {
            return Err(Error::invalid("hysteresis width, gain and noise must be non-negative"));
        }
        if self.lag_tau <= 0.0 || self.engine_nominal_rpm <= 0.0 || self.temp_warmup.tau <= 0.0 {
            return Err(Error::invalid(
                "lag, nominal rpm and warm-up time constant must be positive",
            ));
        }
        if self.link_a <= 0.0 || self.link_b <= 0.0 {
            return Err(Error::invalid("link lengths must be positive"));
        }
        let (lo, hi) = self.actuator_range;
        if lo >= hi {
            return Err(Error::invalid("actuator range needs Lmin < Lmax"));
        }
        if lo <= (self.link_a - self.link_b).abs() || hi >= self.link_a + self.link_b {
            return Err(Error::invalid("actuator range violates the triangle inequality"));
        }
        if self.sensor_beta.abs() >= 1.0 {
            return Err(Error::invalid("|sensor_beta| must be below 1"));
        }
        let (t_lo, t_hi) = self.theta_range();
        if t_lo < -PI || t_hi > PI {
            return Err(Error::invalid(
                "joint range must stay within [-π, π] for a monotone sensor map",
            ));
        }
        Ok(())
    }

    /// Joint angle for an actuator length. Monotone increasing in `L`.
    pub fn theta_of_len(&self, len: f64) -> f64 {
        let (a, b) = (self.link_a, self.link_b);
        let c = ((a * a + b * b - len * len) / (2.0 * a * b)).clamp(-1.0, 1.0);
        self.joint_offset + c.acos()
    }

    /// dθ/dL of the linkage.
    pub fn dtheta_dlen(&self, len: f64) -> f64 {
        let (a, b) = (self.link_a, self.link_b);
        let phi = self.theta_of_len(len) - self.joint_offset;
        len / (a * b * phi.sin())
    }

    /// Actuator length for a joint angle; inverse of [`Self::theta_of_len`].
    pub fn len_of_theta(&self, theta: f64) -> f64 {
        let (a, b) = (self.link_a, self.link_b);
        (a * a + b * b - 2.0 * a * b * (theta - self.joint_offset).cos())
            .max(0.0)
            .sqrt()
    }

    /// Rest state whose sensor reading is `s` (clamped to the stroke).
    pub fn rest_state_at_sensor(&self, s: f64) -> Result<JointState> {
        Ok(self.rest_state_at(self.len_of_theta(joint_from_sensor(s, self)?)))
    }

    pub fn center_len(&self) -> f64 {
        0.5 * (self.actuator_range.0 + self.actuator_range.1)
    }

    pub fn theta_range(&self) -> (f64, f64) {
        (
            self.theta_of_len(self.actuator_range.0),
            self.theta_of_len(self.actuator_range.1),
        )
    }

    pub fn sensor_range(&self) -> (f64, f64) {
        let (lo, hi) = self.theta_range();
        (sensor_from_joint(lo, self), sensor_from_joint(hi, self))
    }

    /// Oil temperature on the warm-up curve.
    pub fn temperature(&self, t: f64) -> f64 {
        let w = &self.temp_warmup;
        w.ambient + w.rise * (1.0 - (-t / w.tau).exp())
    }

    /// Plant at rest in the middle of the stroke at t = 0.
    pub fn rest_state(&self) -> JointState {
        self.rest_state_at(self.center_len())
    }

    pub fn rest_state_at(&self, len: f64) -> JointState {
        let len = len.clamp(self.actuator_range.0, self.actuator_range.1);
        let theta = self.theta_of_len(len);
        JointState {
            t: 0.0,
            u: 0.0,
            h: 0.0,
            v: 0.0,
            len,
            theta,
            omega: 0.0,
            s: sensor_from_joint(theta, self),
            temp: self.temperature(0.0),
            rpm: self.engine_nominal_rpm,
        }
    }

    /// Stable 64-bit FNV-1a digest of the JSON encoding, for log provenance.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("params serialize");
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in json {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        format!("{h:016x}")
    }
}

/// Full plant state. `u` is the command most recently applied.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JointState {
    pub t: f64,
    pub u: f64,
    pub h: f64,
    pub v: f64,
    #[serde(rename = "L")]
    pub len: f64,
    pub theta: f64,
    pub omega: f64,
    pub s: f64,
    #[serde(rename = "T")]
    pub temp: f64,
    pub rpm: f64,
}

impl JointState {
    pub fn is_finite(&self) -> bool {
        [
            self.t, self.u, self.h, self.v, self.len, self.theta, self.omega, self.s, self.temp, self.rpm,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// Dead-zone with separate thresholds per sign, rescaled so |u| = 1 maps to 1.
pub fn dead_zone(u: f64, params: &JointPlantParams) -> f64 {
    let d = if u >= 0.0 {
        params.dead_zone_pos
    } else {
        params.dead_zone_neg
    };
    u.signum() * (u.abs() - d).max(0.0) / (1.0 - d)
}

/// Play operator of total width `b`.
pub fn play_operator(input: f64, h: f64, b: f64) -> f64 {
    if input > h + b / 2.0 {
        input - b / 2.0
    } else if input < h - b / 2.0 {
        input + b / 2.0
    } else {
        h
    }
}

/// Advances the plant by one explicit-Euler step under command `u`.
///
/// Sensor noise is drawn from `noise` only when its std is positive.
pub fn step(
    state: &JointState,
    u: f64,
    dt: f64,
    params: &JointPlantParams,
    noise: &mut impl Rng,
) -> Result<JointState> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::invalid(format!("dt must be positive, got {dt}")));
    }
    if !(-1.0..=1.0).contains(&u) {
        return Err(Error::invalid(format!("command {u} outside [-1, 1]")));
    }
    let u_dz = dead_zone(u, params);
    let h = play_operator(u_dz, state.h, params.hysteresis_width);
    let gain = params.gain_g0
        * (1.0 + params.temp_coeff * (state.temp - params.temp_ref))
        * (state.rpm / params.engine_nominal_rpm);
    let v_target = gain * h;
    let mut v = state.v + (dt / params.lag_tau) * (v_target - state.v);
    let (lo, hi) = params.actuator_range;
    let raw_len = state.len + v * dt;
    let len = raw_len.clamp(lo, hi);
    if len != raw_len {
        v = 0.0;
    }
    let theta = params.theta_of_len(len);
    let omega = params.dtheta_dlen(len) * v;
    let mut s = sensor_from_joint(theta, params);
    if params.sensor_noise_std > 0.0 {
        let n = Normal::new(0.0, params.sensor_noise_std).map_err(|e| Error::invalid(e.to_string()))?;
        s += n.sample(noise);
    }
    let t = state.t + dt;
    Ok(JointState {
        t,
        u,
        h,
        v,
        len,
        theta,
        omega,
        s,
        temp: params.temperature(t),
        rpm: state.rpm,
    })
}

pub fn sensor_from_joint(theta: f64, params: &JointPlantParams) -> f64 {
    theta + params.sensor_beta * theta.sin()
}

/// Sensor-axis velocity ds/dt for joint angle `theta` moving at `omega`.
pub fn sensor_velocity(theta: f64, omega: f64, params: &JointPlantParams) -> f64 {
    (1.0 + params.sensor_beta * theta.cos()) * omega
}

/// Inverts the sensor map on [-π, π] by safeguarded Newton iteration.
pub fn joint_from_sensor(s: f64, params: &JointPlantParams) -> Result<f64> {
    let beta = params.sensor_beta;
    if beta.abs() >= 1.0 {
        return Err(Error::invalid("|sensor_beta| must be below 1"));
    }
    // The map is strictly increasing on [-π, π] with image [-π, π].
    if !s.is_finite() || s.abs() > PI {
        return Err(Error::invalid(format!(
            "sensor value {s} outside the image of the sensor map"
        )));
    }
    let (mut lo, mut hi) = (-PI, PI);
    let mut x = s;
    for _ in 0..200 {
        let f = x + beta * x.sin() - s;
        if f.abs() <= 1e-15 {
            break;
        }
        if f > 0.0 {
            hi = x;
        } else {
            lo = x;
        }
        let next = x - f / (1.0 + beta * x.cos());
        x = if next > lo && next < hi { next } else { 0.5 * (lo + hi) };
        if hi - lo < 1e-13 {
            break;
        }
    }
    Ok(x)
}

/// A plant instance with its own noise stream.
#[derive(Debug, Clone)]
pub struct Plant {
    pub params: JointPlantParams,
    pub state: JointState,
    noise: SeededRng,
}

impl Plant {
    pub fn new(params: JointPlantParams, seed: u64) -> Result<Self> {
        params.validate()?;
        Ok(Self {
            state: params.rest_state(),
            params,
            noise: rng::substream(seed, 0x706c_616e),
        })
    }

    pub fn with_state(params: JointPlantParams, state: JointState, seed: u64) -> Result<Self> {
        let mut p = Self::new(params, seed)?;
        p.state = state;
        Ok(p)
    }

    pub fn step(&mut self, u: f64, dt: f64) -> Result<&JointState> {
        self.state = step(&self.state, u, dt, &self.params, &mut self.noise)?;
        Ok(&self.state)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChirpSpec {
    pub amp_start: f64,
    pub amp_end: f64,
    pub f0: f64,
    pub f1: f64,
    pub duration: f64,
}

impl ChirpSpec {
    pub fn validate(&self) -> Result<()> {
        let amps = [self.amp_start, self.amp_end];
        if amps.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::invalid("chirp amplitudes must be in [0, 1]"));
        }
        if !(self.f0 > 0.0 && self.f1 > 0.0 && self.duration > 0.0) {
            return Err(Error::invalid("chirp frequencies and duration must be positive"));
        }
        Ok(())
    }
}

/// Linear chirp with a linear amplitude envelope.
pub fn gen_chirp(spec: &ChirpSpec, t: f64) -> Result<f64> {
    spec.validate()?;
    if !(0.0..=spec.duration).contains(&t) {
        return Err(Error::invalid(format!("t = {t} outside [0, {}]", spec.duration)));
    }
    let phase = spec.f0 * t + (spec.f1 - spec.f0) * t * t / (2.0 * spec.duration);
    let amp = spec.amp_start + (spec.amp_end - spec.amp_start) * t / spec.duration;
    Ok(amp * (2.0 * PI * phase).sin())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum Excitation {
    /// Zero command for `lead_in` seconds, then the chirp `repeats` times
    /// back to back, then zero. Repeating the sweep while the oil warms up
    /// keeps temperature from being confounded with amplitude.
    Chirp {
        chirp: ChirpSpec,
        #[serde(default)]
        lead_in: f64,
        #[serde(default = "one")]
        repeats: u32,
    },
    /// Joystick surrogate: each step adds N(0, step_std²), clamped to ±bound.
    RandomWalk { step_std: f64, bound: f64 },
    /// Recorded commands, zero after they run out.
    Replay { commands: Vec<f64> },
}

impl Excitation {
    pub fn describe(&self) -> String {
        match self {
            Excitation::Chirp {
                chirp: c,
                lead_in,
                repeats,
            } => format!(
                "chirp A {}→{} f {}→{} Hz over {} s x{} after {} s rest",
                c.amp_start, c.amp_end, c.f0, c.f1, c.duration, repeats, lead_in
            ),
            Excitation::RandomWalk { step_std, bound } => format!("random walk σ {step_std} bound {bound}"),
            Excitation::Replay { commands } => format!("replay of {} commands", commands.len()),
        }
    }

    /// Raw commands of the first `n` steps, before any safety override.
    /// The random walk draws from a substream of `seed`.
    pub fn commands(&self, n: usize, dt: f64, seed: u64) -> Result<Vec<f64>> {
        let mut walk_rng = rng::substream(seed, 0x7761_6c6b);
        let mut walk = 0.0;
        (0..n)
            .map(|k| {
                let t = k as f64 * dt;
                Ok(match self {
                    Excitation::Chirp {
                        chirp,
                        lead_in,
                        repeats,
                    } => {
                        let tc = t - lead_in;
                        if tc >= 0.0 && tc < chirp.duration * *repeats as f64 {
                            gen_chirp(chirp, tc % chirp.duration)?
                        } else {
                            0.0
                        }
                    }
                    Excitation::RandomWalk { step_std, bound } => {
                        if *step_std > 0.0 {
                            let inc: f64 = Normal::new(0.0, *step_std).unwrap().sample(&mut walk_rng);
                            walk = (walk + inc).clamp(-bound, *bound);
                        }
                        walk
                    }
                    Excitation::Replay { commands } => commands.get(k).copied().unwrap_or(0.0),
                })
            })
            .collect()
    }
}

fn one() -> u32 {
    1
}

/// One log row: the state at `t` and the command applied from `t` to `t + dt`.
pub type LogRecord = JointState;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogMeta {
    pub params: JointPlantParams,
    pub params_digest: String,
    pub seed: u64,
    pub dt: f64,
    pub excitation: Excitation,
    pub description: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetLog {
    pub meta: LogMeta,
    pub records: Vec<LogRecord>,
}

impl DatasetLog {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn dt(&self) -> f64 {
        self.meta.dt
    }

    /// Noise-free ds/dt of every row.
    pub fn sensor_velocities(&self) -> Vec<f64> {
        self.records
            .iter()
            .map(|r| sensor_velocity(r.theta, r.omega, &self.meta.params))
            .collect()
    }

    /// Checks strictly increasing, evenly spaced timestamps.
    pub fn validate(&self) -> Result<()> {
        let dt = self.meta.dt;
        for (k, w) in self.records.windows(2).enumerate() {
            let d = w[1].t - w[0].t;
            if d <= 0.0 || (d - dt).abs() > 1e-9 * dt.max(1.0) {
                return Err(Error::format(format!("row {} breaks the constant dt of {dt}", k + 1)));
            }
        }
        if self.records.iter().any(|r| !r.is_finite()) {
            return Err(Error::format("log contains non-finite values"));
        }
        Ok(())
    }

    pub fn sidecar_path(csv_path: &Path) -> PathBuf {
        let mut p = csv_path.as_os_str().to_owned();
        p.push(".json");
        PathBuf::from(p)
    }

    /// CSV with header `t,u,h,v,L,theta,omega,s,T,rpm`, plus `<path>.json`.
    pub fn write(&self, csv_path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_writer(BufWriter::new(File::create(csv_path)?));
        for r in &self.records {
            w.serialize(r)?;
        }
        w.flush()?;
        let side = BufWriter::new(File::create(Self::sidecar_path(csv_path))?);
        serde_json::to_writer_pretty(side, &self.meta)?;
        Ok(())
    }

    pub fn read(csv_path: &Path) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(BufReader::new(File::open(csv_path)?));
        let records = rdr.deserialize().collect::<std::result::Result<Vec<LogRecord>, _>>()?;
        let meta: LogMeta = serde_json::from_reader(BufReader::new(File::open(Self::sidecar_path(csv_path))?))?;
        let log = Self { meta, records };
        log.validate()?;
        Ok(log)
    }
}

/// Applies the collector's limit rule: close to either end of the stroke the
/// command is forced to at least the recovery magnitude toward the center.
pub fn safety_override(u: f64, len: f64, params: &JointPlantParams) -> f64 {
    let (lo, hi) = params.actuator_range;
    let band = SAFETY_MARGIN * (hi - lo);
    if len >= hi - band {
        u.min(-SAFETY_RECOVERY_CMD)
    } else if len <= lo + band {
        u.max(SAFETY_RECOVERY_CMD)
    } else {
        u
    }
}

/// Runs the plant from rest under an excitation and logs every step.
///
/// Produces `round(duration / dt)` rows. Deterministic for a fixed seed.
pub fn collect_dataset(
    params: &JointPlantParams,
    excitation: &Excitation,
    duration: f64,
    dt: f64,
    seed: u64,
) -> Result<DatasetLog> {
    if !(duration > 0.0 && dt > 0.0) {
        return Err(Error::invalid("duration and dt must be positive"));
    }
    match excitation {
        Excitation::Chirp {
            chirp,
            lead_in,
            repeats,
        } => {
            chirp.validate()?;
            if !(*lead_in >= 0.0 && lead_in.is_finite()) {
                return Err(Error::invalid("chirp lead-in must be non-negative"));
            }
            if *repeats == 0 {
                return Err(Error::invalid("chirp must repeat at least once"));
            }
        }
        Excitation::RandomWalk { step_std, bound } => {
            if !(*step_std >= 0.0 && (0.0..=1.0).contains(bound)) {
                return Err(Error::invalid("random walk needs step_std >= 0 and bound in [0, 1]"));
            }
        }
        Excitation::Replay { commands } => {
            if commands.iter().any(|u| !(-1.0..=1.0).contains(u)) {
                return Err(Error::invalid("replayed commands must lie in [-1, 1]"));
            }
        }
    }
    let n = (duration / dt).round() as usize;
    let commands = excitation.commands(n, dt, seed)?;
    let mut plant = Plant::new(params.clone(), seed)?;
    let mut records = Vec::with_capacity(n);
    for raw in commands {
        let u = safety_override(raw, plant.state.len, params);
        let mut row = plant.state;
        row.u = u;
        records.push(row);
        plant.step(u, dt)?;
    }
    Ok(DatasetLog {
        meta: LogMeta {
            params: params.clone(),
            params_digest: params.digest(),
            seed,
            dt,
            description: excitation.describe(),
            excitation: excitation.clone(),
        },
        records,
    })
}

/// Identification scenarios shared by the command line and the acceptance
/// runs. All use [`DEFAULT_DT`].
pub mod scenarios {
    use super::*;

    /// Length of the canonical identification log, s.
    pub const CHIRP_LOG_DURATION: f64 = 92.0;
    pub const HELD_OUT_DURATION: f64 = 60.0;

    fn sweep(amp_start: f64, amp_end: f64, lead_in: f64) -> Excitation {
        Excitation::Chirp {
            chirp: ChirpSpec {
                amp_start,
                amp_end,
                f0: 1.5,
                f1: 0.1,
                duration: 30.0,
            },
            lead_in,
            repeats: 3,
        }
    }

    /// Falling-frequency sweep whose slow, large cycles come last, repeated
    /// three times during the oil warm-up. Its amplitude is deliberately
    /// modest, so it never drives the actuator into the stroke ends.
    pub fn canonical_chirp() -> Excitation {
        sweep(0.15, 0.45, 2.0)
    }

    /// Same sweep at amplitudes that reach the whole stroke.
    pub fn high_amplitude_chirp() -> Excitation {
        sweep(0.3, 1.0, 2.0)
    }

    /// Joystick-like held-out commands.
    pub fn held_out_walk() -> Excitation {
        Excitation::RandomWalk {
            step_std: 0.02,
            bound: 1.0,
        }
    }

    /// The canonical sweep recorded from an already warm machine and started
    /// 10 s later, so temperature follows a different course against the
    /// commands than in training.
    pub fn temperature_sweep(params: &JointPlantParams, seed: u64) -> Result<DatasetLog> {
        let mut warm = params.clone();
        warm.temp_warmup = TempWarmup {
            ambient: 35.0,
            rise: 25.0,
            tau: params.temp_warmup.tau,
        };
        collect_dataset(&warm, &sweep(0.15, 0.45, 12.0), CHIRP_LOG_DURATION, DEFAULT_DT, seed)
    }
}

/// Orthographic side-view camera looking at the joint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarkerCamera {
    /// Pixels per metre.
    pub scale: f64,
    /// Image position of the joint pivot.
    pub principal: (f64, f64),
    /// Distance of the second marker from the pivot along the link, m.
    pub marker_radius: f64,
}

impl Default for MarkerCamera {
    fn default() -> Self {
        Self {
            scale: 500.0,
            principal: (320.0, 240.0),
            marker_radius: 0.4,
        }
    }
}

/// Pixel positions of the pivot marker and the link marker. Image y points
/// down, so positive angles move the link marker up.
pub fn render_markers(state: &JointState, camera: &MarkerCamera) -> [(f64, f64); 2] {
    let (cx, cy) = camera.principal;
    let r = camera.scale * camera.marker_radius;
    [(cx, cy), (cx + r * state.theta.cos(), cy - r * state.theta.sin())]
}
