//! Learned motion predictor: a single LSTM layer with a linear head that maps
//! (sensor position, engine speed, oil temperature, raw command) to the
//! sensor-axis velocity one step ahead.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::plant::{self, DatasetLog, JointPlantParams, Plant};
use crate::rng;

pub const INPUT_SIZE: usize = 4;

/// Index of each feature in an input vector.
pub const IN_SENSOR: usize = 0;
pub const IN_RPM: usize = 1;
pub const IN_TEMP: usize = 2;
pub const IN_COMMAND: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictorInput {
    pub sensor_pos: f64,
    pub engine_rpm: f64,
    pub oil_temp: f64,
    pub raw_command: f64,
}

impl PredictorInput {
    pub fn to_array(self) -> [f64; INPUT_SIZE] {
        [self.sensor_pos, self.engine_rpm, self.oil_temp, self.raw_command]
    }

    pub fn from_array(a: [f64; INPUT_SIZE]) -> Self {
        Self {
            sensor_pos: a[IN_SENSOR],
            engine_rpm: a[IN_RPM],
            oil_temp: a[IN_TEMP],
            raw_command: a[IN_COMMAND],
        }
    }
}

/// Which velocity the model is trained to predict.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum VelocityTarget {
    /// ds/dt on the encoder axis.
    #[default]
    Sensor,
    /// dθ/dt on the joint axis.
    Joint,
}

/// Aligned model inputs and next-step targets.
///
/// `targets[k]` is the velocity at row `k + 1` of the source log.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictorSeries {
    pub dt: f64,
    pub inputs: Vec<[f64; INPUT_SIZE]>,
    pub targets: Vec<f64>,
}

impl PredictorSeries {
    pub fn from_log(log: &DatasetLog, target: VelocityTarget) -> Result<Self> {
        if log.len() < 2 {
            return Err(Error::invalid("log needs at least two rows"));
        }
        let vel: Vec<f64> = match target {
            VelocityTarget::Sensor => log.sensor_velocities(),
            VelocityTarget::Joint => log.records.iter().map(|r| r.omega).collect(),
        };
        let rows = &log.records;
        Ok(Self {
            dt: log.dt(),
            inputs: rows[..rows.len() - 1]
                .iter()
                .map(|r| [r.s, r.rpm, r.temp, r.u])
                .collect(),
            targets: vel[1..].to_vec(),
        })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    /// Sensor positions as recorded, one per input row.
    pub fn sensor_positions(&self) -> Vec<f64> {
        self.inputs.iter().map(|x| x[IN_SENSOR]).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Optimizer {
    Adam,
    Momentum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SysidTrainConfig {
    pub hidden_size: usize,
    /// Truncated-BPTT horizon; the hidden state is reset for every window.
    pub window_len: usize,
    /// Leading steps of each window that warm up the state but are not scored.
    pub burn_in: usize,
    /// Offset between consecutive window starts.
    pub stride: usize,
    pub batch: usize,
    pub epochs: usize,
    pub lr: f64,
    /// Learning rate decays exponentially to `lr * lr_final_frac`.
    pub lr_final_frac: f64,
    pub clip_norm: f64,
    pub optimizer: Optimizer,
    pub target: VelocityTarget,
    pub seed: u64,
    /// Std of a constant offset added to each normalized input over a whole
    /// window, redrawn per window and epoch. Oil temperature rises
    /// monotonically through a log, so without jitter the network can read it
    /// as a clock and memorize the excitation instead of the gain it sets.
    #[serde(default)]
    pub input_jitter: [f64; INPUT_SIZE],
}

impl Default for SysidTrainConfig {
    fn default() -> Self {
        Self {
            hidden_size: 32,
            window_len: 64,
            burn_in: 16,
            stride: 4,
            batch: 32,
            epochs: 40,
            lr: 5e-3,
            lr_final_frac: 0.05,
            clip_norm: 1.0,
            optimizer: Optimizer::Adam,
            target: VelocityTarget::Sensor,
            seed: 0,
            input_jitter: [0.0, 0.0, 0.3, 0.0],
        }
    }
}

impl SysidTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window_len < 2 {
            return Err(Error::invalid("window_len must be at least 2"));
        }
        if self.burn_in >= self.window_len {
            return Err(Error::invalid("burn_in must be shorter than the window"));
        }
        if self.hidden_size == 0 || self.stride == 0 || self.batch == 0 || self.epochs == 0 {
            return Err(Error::invalid("hidden_size, stride, batch and epochs must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.lr_final_frac > 0.0 && self.lr_final_frac <= 1.0) {
            return Err(Error::invalid("learning rate schedule must be positive"));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::invalid("clip_norm must be positive"));
        }
        if self.input_jitter.iter().any(|j| !(*j >= 0.0 && j.is_finite())) {
            return Err(Error::invalid("input_jitter must be finite and non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HiddenState {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

impl HiddenState {
    pub fn zeros(hidden_size: usize) -> Self {
        Self {
            h: vec![0.0; hidden_size],
            c: vec![0.0; hidden_size],
        }
    }
}

/// LSTM gates in parameter-block order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Gate {
    Input,
    Forget,
    Candidate,
    Output,
}

impl Gate {
    pub const ALL: [Gate; 4] = [Gate::Input, Gate::Forget, Gate::Candidate, Gate::Output];

    fn block(self) -> usize {
        self as usize
    }
}

/// One-layer LSTM with a scalar linear head.
///
/// Gate matrices are stacked `[input, forget, candidate, output]`, each block
/// `hidden_size` rows, row-major. Inputs are z-scored with `input_means` /
/// `input_stds`; the head output is de-normalized with the target stats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecurrentModel {
    pub hidden_size: usize,
    /// `4H x 4`.
    pub w_x: Vec<f64>,
    /// `4H x H`.
    pub w_h: Vec<f64>,
    /// `4H`.
    pub b: Vec<f64>,
    pub head_w: Vec<f64>,
    pub head_b: f64,
    pub input_means: [f64; INPUT_SIZE],
    pub input_stds: [f64; INPUT_SIZE],
    pub target_mean: f64,
    pub target_std: f64,
    pub target: VelocityTarget,
    /// Training configuration echo, when trained.
    pub config: Option<SysidTrainConfig>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Activations kept for backpropagation through one step.
#[derive(Debug, Clone)]
pub struct StepCache {
    x: [f64; INPUT_SIZE],
    h_prev: Vec<f64>,
    c_prev: Vec<f64>,
    /// Gate activations, `4H`, in block order.
    gates: Vec<f64>,
    c: Vec<f64>,
    tanh_c: Vec<f64>,
    h: Vec<f64>,
}

impl StepCache {
    /// Hidden output of this step.
    pub fn h(&self) -> &[f64] {
        &self.h
    }

    pub fn hidden(&self) -> HiddenState {
        HiddenState {
            h: self.h.clone(),
            c: self.c.clone(),
        }
    }
}

impl RecurrentModel {
    /// All-zero parameters with identity normalization.
    pub fn zeros(hidden_size: usize) -> Self {
        let g = 4 * hidden_size;
        Self {
            hidden_size,
            w_x: vec![0.0; g * INPUT_SIZE],
            w_h: vec![0.0; g * hidden_size],
            b: vec![0.0; g],
            head_w: vec![0.0; hidden_size],
            head_b: 0.0,
            input_means: [0.0; INPUT_SIZE],
            input_stds: [1.0; INPUT_SIZE],
            target_mean: 0.0,
            target_std: 1.0,
            target: VelocityTarget::Sensor,
            config: None,
        }
    }

    /// Uniform(±1/√H) weights, forget-gate bias 1, small head.
    pub fn init_random(hidden_size: usize, seed: u64) -> Self {
        let mut m = Self::zeros(hidden_size);
        let mut r = rng::substream(seed, 0x6c73_746d);
        let k = 1.0 / (hidden_size as f64).sqrt();
        for v in m.w_x.iter_mut().chain(m.w_h.iter_mut()) {
            *v = r.random_range(-k..k);
        }
        let hs = hidden_size;
        m.b[Gate::Forget.block() * hs..(Gate::Forget.block() + 1) * hs].fill(1.0);
        for v in &mut m.head_w {
            *v = r.random_range(-k..k) * 0.1;
        }
        m
    }

    pub fn param_count(&self) -> usize {
        self.w_x.len() + self.w_h.len() + self.b.len() + self.head_w.len() + 1
    }

    fn offsets(&self) -> [usize; 5] {
        let ox = 0;
        let oh = ox + self.w_x.len();
        let ob = oh + self.w_h.len();
        let ohw = ob + self.b.len();
        let ohb = ohw + self.head_w.len();
        [ox, oh, ob, ohw, ohb]
    }

    /// Flat parameter vector: `w_x, w_h, b, head_w, head_b`.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.param_count());
        p.extend_from_slice(&self.w_x);
        p.extend_from_slice(&self.w_h);
        p.extend_from_slice(&self.b);
        p.extend_from_slice(&self.head_w);
        p.push(self.head_b);
        p
    }

    pub fn set_flat_params(&mut self, p: &[f64]) {
        let [_, oh, ob, ohw, ohb] = self.offsets();
        self.w_x.copy_from_slice(&p[..oh]);
        self.w_h.copy_from_slice(&p[oh..ob]);
        self.b.copy_from_slice(&p[ob..ohw]);
        self.head_w.copy_from_slice(&p[ohw..ohb]);
        self.head_b = p[ohb];
    }

    /// Flat indices of every parameter feeding one gate.
    pub fn gate_param_indices(&self, gate: Gate) -> Vec<usize> {
        let hs = self.hidden_size;
        let [ox, oh, ob, _, _] = self.offsets();
        let rows = gate.block() * hs..(gate.block() + 1) * hs;
        let mut idx = Vec::new();
        idx.extend((rows.start * INPUT_SIZE..rows.end * INPUT_SIZE).map(|i| ox + i));
        idx.extend((rows.start * hs..rows.end * hs).map(|i| oh + i));
        idx.extend(rows.map(|i| ob + i));
        idx
    }

    pub fn is_finite(&self) -> bool {
        self.flat_params().iter().all(|v| v.is_finite())
    }

    pub fn validate(&self) -> Result<()> {
        let hs = self.hidden_size;
        if hs == 0
            || self.w_x.len() != 4 * hs * INPUT_SIZE
            || self.w_h.len() != 4 * hs * hs
            || self.b.len() != 4 * hs
            || self.head_w.len() != hs
        {
            return Err(Error::format("recurrent model parameter shapes are inconsistent"));
        }
        let stats_ok = self.input_stds.iter().all(|s| *s > 0.0 && s.is_finite())
            && self.input_means.iter().all(|m| m.is_finite())
            && self.target_std > 0.0
            && self.target_std.is_finite()
            && self.target_mean.is_finite();
        if !stats_ok || !self.is_finite() {
            return Err(Error::format("recurrent model has non-finite parameters or statistics"));
        }
        Ok(())
    }

    pub fn normalize(&self, x: &[f64; INPUT_SIZE]) -> [f64; INPUT_SIZE] {
        std::array::from_fn(|i| (x[i] - self.input_means[i]) / self.input_stds[i])
    }

    pub fn denormalize_target(&self, y: f64) -> f64 {
        y * self.target_std + self.target_mean
    }

    /// One LSTM step on an already normalized input.
    pub fn forward_step(&self, x: &[f64; INPUT_SIZE], prev: &HiddenState) -> StepCache {
        let hs = self.hidden_size;
        let mut gates = self.b.clone();
        for (r, z) in gates.iter_mut().enumerate() {
            let wx = &self.w_x[r * INPUT_SIZE..(r + 1) * INPUT_SIZE];
            let wh = &self.w_h[r * hs..(r + 1) * hs];
            *z += wx.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
            *z += wh.iter().zip(&prev.h).map(|(a, b)| a * b).sum::<f64>();
        }
        for (k, z) in gates.iter_mut().enumerate() {
            *z = if k / hs == Gate::Candidate.block() {
                z.tanh()
            } else {
                sigmoid(*z)
            };
        }
        let mut c = vec![0.0; hs];
        let mut tanh_c = vec![0.0; hs];
        let mut h = vec![0.0; hs];
        for j in 0..hs {
            let (i, f, g, o) = (gates[j], gates[hs + j], gates[2 * hs + j], gates[3 * hs + j]);
            c[j] = f * prev.c[j] + i * g;
            tanh_c[j] = c[j].tanh();
            h[j] = o * tanh_c[j];
        }
        StepCache {
            x: *x,
            h_prev: prev.h.clone(),
            c_prev: prev.c.clone(),
            gates,
            c,
            tanh_c,
            h,
        }
    }

    /// Normalized head output for a hidden vector.
    pub fn head(&self, h: &[f64]) -> f64 {
        self.head_b + self.head_w.iter().zip(h).map(|(a, b)| a * b).sum::<f64>()
    }

    /// Backpropagates through one step.
    ///
    /// `dy` is the loss gradient w.r.t. this step's normalized head output,
    /// `dh`/`dc` the gradients flowing in from the next step. Returns the
    /// gradients w.r.t. the normalized input and the previous hidden state;
    /// parameter gradients are accumulated into `grad` (flat layout) when
    /// given.
    pub fn backward_step(
        &self,
        cache: &StepCache,
        dy: f64,
        dh: &[f64],
        dc: &[f64],
        grad: Option<&mut [f64]>,
    ) -> ([f64; INPUT_SIZE], HiddenState) {
        let hs = self.hidden_size;
        let [ox, oh, ob, ohw, ohb] = self.offsets();
        let mut dh_total: Vec<f64> = dh.iter().zip(&self.head_w).map(|(a, w)| a + dy * w).collect();
        let mut dz = vec![0.0; 4 * hs];
        let mut dc_prev = vec![0.0; hs];
        for j in 0..hs {
            let g = &cache.gates;
            let (i, f, cand, o) = (g[j], g[hs + j], g[2 * hs + j], g[3 * hs + j]);
            let tc = cache.tanh_c[j];
            let d_o = dh_total[j] * tc;
            let dct = dc[j] + dh_total[j] * o * (1.0 - tc * tc);
            dz[j] = dct * cand * i * (1.0 - i);
            dz[hs + j] = dct * cache.c_prev[j] * f * (1.0 - f);
            dz[2 * hs + j] = dct * i * (1.0 - cand * cand);
            dz[3 * hs + j] = d_o * o * (1.0 - o);
            dc_prev[j] = dct * f;
        }
        if let Some(gr) = grad {
            for (r, d) in dz.iter().enumerate() {
                if *d == 0.0 {
                    continue;
                }
                for (k, xv) in cache.x.iter().enumerate() {
                    gr[ox + r * INPUT_SIZE + k] += d * xv;
                }
                let row = &mut gr[oh + r * hs..oh + (r + 1) * hs];
                for (gv, hv) in row.iter_mut().zip(&cache.h_prev) {
                    *gv += d * hv;
                }
                gr[ob + r] += d;
            }
            for j in 0..hs {
                gr[ohw + j] += dy * cache.h[j];
            }
            gr[ohb] += dy;
        }
        let mut dx = [0.0; INPUT_SIZE];
        dh_total.iter_mut().for_each(|v| *v = 0.0);
        for (r, d) in dz.iter().enumerate() {
            if *d == 0.0 {
                continue;
            }
            for (k, dxv) in dx.iter_mut().enumerate() {
                *dxv += d * self.w_x[r * INPUT_SIZE + k];
            }
            for (j, dhv) in dh_total.iter_mut().enumerate() {
                *dhv += d * self.w_h[r * hs + j];
            }
        }
        (
            dx,
            HiddenState {
                h: dh_total,
                c: dc_prev,
            },
        )
    }

    /// Mean squared normalized error over the scored steps of one window,
    /// starting from a zero state. Accumulates parameter gradients of that
    /// mean into `grad` when given.
    fn window_loss(&self, xs: &[[f64; INPUT_SIZE]], ys: &[f64], burn_in: usize, grad: Option<&mut [f64]>) -> f64 {
        let mut state = HiddenState::zeros(self.hidden_size);
        let mut caches = Vec::with_capacity(xs.len());
        let mut outs = Vec::with_capacity(xs.len());
        for x in xs {
            let cache = self.forward_step(x, &state);
            outs.push(self.head(&cache.h));
            state = cache.hidden();
            caches.push(cache);
        }
        let scored = (xs.len() - burn_in) as f64;
        let loss = (burn_in..xs.len()).map(|k| (outs[k] - ys[k]).powi(2)).sum::<f64>() / scored;
        if let Some(gr) = grad {
            let hs = self.hidden_size;
            let mut dh = vec![0.0; hs];
            let mut dc = vec![0.0; hs];
            for k in (0..xs.len()).rev() {
                let dy = if k >= burn_in {
                    2.0 * (outs[k] - ys[k]) / scored
                } else {
                    0.0
                };
                let (_, prev) = self.backward_step(&caches[k], dy, &dh, &dc, Some(&mut *gr));
                dh = prev.h;
                dc = prev.c;
            }
        }
        loss
    }
}

/// One prediction step in physical units.
pub fn predict_step(
    model: &RecurrentModel,
    hidden: &HiddenState,
    input: &PredictorInput,
) -> Result<(f64, HiddenState)> {
    let x = input.to_array();
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("predictor input must be finite"));
    }
    if hidden.h.len() != model.hidden_size || hidden.c.len() != model.hidden_size {
        return Err(Error::invalid("hidden state size does not match the model"));
    }
    let cache = model.forward_step(&model.normalize(&x), hidden);
    Ok((model.denormalize_target(model.head(&cache.h)), cache.hidden()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedPredictor {
    pub model: RecurrentModel,
    /// Mean normalized training loss per epoch.
    pub epoch_losses: Vec<f64>,
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    (mean, if std < 1e-12 { 1.0 } else { std })
}

struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

/// Trains on a plant log with the configured velocity target.
pub fn train_predictor(log: &DatasetLog, config: &SysidTrainConfig) -> Result<TrainedPredictor> {
    let series = PredictorSeries::from_log(log, config.target)?;
    train_predictor_on(&series, config)
}

/// Truncated BPTT over sliding windows with per-window state reset,
/// global-norm gradient clipping and Adam (or momentum SGD).
pub fn train_predictor_on(series: &PredictorSeries, config: &SysidTrainConfig) -> Result<TrainedPredictor> {
    config.validate()?;
    let n = series.len();
    if n <= config.window_len {
        return Err(Error::invalid(format!(
            "series of {n} steps is not longer than the {}-step window",
            config.window_len
        )));
    }
    if series
        .inputs
        .iter()
        .flatten()
        .chain(&series.targets)
        .any(|v| !v.is_finite())
    {
        return Err(Error::invalid("training series must be finite"));
    }
    let mut model = RecurrentModel::init_random(config.hidden_size, config.seed);
    model.target = config.target;
    model.config = Some(config.clone());
    for i in 0..INPUT_SIZE {
        let (m, s) = mean_std(series.inputs.iter().map(move |x| x[i]));
        model.input_means[i] = m;
        model.input_stds[i] = s;
    }
    let (tm, ts) = mean_std(series.targets.iter().copied());
    model.target_mean = tm;
    model.target_std = ts;
    let xs: Vec<[f64; INPUT_SIZE]> = series.inputs.iter().map(|x| model.normalize(x)).collect();
    let ys: Vec<f64> = series.targets.iter().map(|y| (y - tm) / ts).collect();

    let w = config.window_len;
    let mut starts: Vec<usize> = (0..=n - w).step_by(config.stride).collect();
    let mut shuffle_rng = rng::substream(config.seed, 0x7368_7566);
    let mut jitter_rng = rng::substream(config.seed, 0x6a69_7474);
    let np = model.param_count();
    let mut opt = AdamState {
        m: vec![0.0; np],
        v: vec![0.0; np],
        t: 0,
    };
    let mut params = model.flat_params();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let lr = config.lr
            * config
                .lr_final_frac
                .powf(epoch as f64 / (config.epochs.max(2) - 1) as f64);
        starts.shuffle(&mut shuffle_rng);
        let offsets: Vec<[f64; INPUT_SIZE]> = starts
            .iter()
            .map(|_| {
                let mut o = [0.0; INPUT_SIZE];
                for (v, sd) in o.iter_mut().zip(&config.input_jitter) {
                    if *sd > 0.0 {
                        let z: f64 = StandardNormal.sample(&mut jitter_rng);
                        *v = sd * z;
                    }
                }
                o
            })
            .collect();
        let mut total = 0.0;
        for (batch, batch_offsets) in starts.chunks(config.batch).zip(offsets.chunks(config.batch)) {
            let per_window: Vec<(f64, Vec<f64>)> = batch
                .par_iter()
                .zip(batch_offsets)
                .map(|(&s0, off)| {
                    let mut g = vec![0.0; np];
                    let l = if off.iter().all(|v| *v == 0.0) {
                        model.window_loss(&xs[s0..s0 + w], &ys[s0..s0 + w], config.burn_in, Some(&mut g))
                    } else {
                        let shifted: Vec<[f64; INPUT_SIZE]> = xs[s0..s0 + w]
                            .iter()
                            .map(|x| std::array::from_fn(|i| x[i] + off[i]))
                            .collect();
                        model.window_loss(&shifted, &ys[s0..s0 + w], config.burn_in, Some(&mut g))
                    };
                    (l, g)
                })
                .collect();
            let mut grad = vec![0.0; np];
            let mut batch_loss = 0.0;
            for (l, g) in &per_window {
                batch_loss += l;
                for (a, b) in grad.iter_mut().zip(g) {
                    *a += b;
                }
            }
            let bn = batch.len() as f64;
            batch_loss /= bn;
            if !batch_loss.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    loss: batch_loss,
                });
            }
            total += batch_loss * bn;
            grad.iter_mut().for_each(|g| *g /= bn);
            let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            if norm > config.clip_norm {
                let s = config.clip_norm / norm;
                grad.iter_mut().for_each(|g| *g *= s);
            }
            match config.optimizer {
                Optimizer::Adam => {
                    opt.t += 1;
                    let (b1, b2) = (0.9f64, 0.999f64);
                    let c1 = 1.0 - b1.powi(opt.t);
                    let c2 = 1.0 - b2.powi(opt.t);
                    for i in 0..np {
                        opt.m[i] = b1 * opt.m[i] + (1.0 - b1) * grad[i];
                        opt.v[i] = b2 * opt.v[i] + (1.0 - b2) * grad[i] * grad[i];
                        params[i] -= lr * (opt.m[i] / c1) / ((opt.v[i] / c2).sqrt() + 1e-8);
                    }
                }
                Optimizer::Momentum => {
                    for i in 0..np {
                        opt.m[i] = 0.9 * opt.m[i] - lr * grad[i];
                        params[i] += opt.m[i];
                    }
                }
            }
            model.set_flat_params(&params);
        }
        let mean = total / starts.len() as f64;
        if !model.is_finite() {
            return Err(Error::Divergence { epoch, loss: mean });
        }
        log::debug!("predictor epoch {epoch}: loss {mean:.6e}");
        epoch_losses.push(mean);
    }
    Ok(TrainedPredictor { model, epoch_losses })
}

/// Anything that produces next-step velocities from a stream of inputs.
pub trait VelocityPredictor {
    fn reset(&mut self);
    fn predict(&mut self, input: &PredictorInput) -> Result<f64>;
}

/// Stateful wrapper running a [`RecurrentModel`] step by step.
///
/// Inputs listed in `zeroed` are replaced by their training mean, i.e. zero
/// after normalization.
#[derive(Debug, Clone)]
pub struct RecurrentPredictor<'a> {
    pub model: &'a RecurrentModel,
    pub hidden: HiddenState,
    pub zeroed: [bool; INPUT_SIZE],
}

impl<'a> RecurrentPredictor<'a> {
    pub fn new(model: &'a RecurrentModel) -> Self {
        Self {
            model,
            hidden: HiddenState::zeros(model.hidden_size),
            zeroed: [false; INPUT_SIZE],
        }
    }

    /// Same model with one input held at its training mean.
    pub fn ablating(model: &'a RecurrentModel, input: usize) -> Self {
        let mut p = Self::new(model);
        p.zeroed[input] = true;
        p
    }
}

impl VelocityPredictor for RecurrentPredictor<'_> {
    fn reset(&mut self) {
        self.hidden = HiddenState::zeros(self.model.hidden_size);
    }

    fn predict(&mut self, input: &PredictorInput) -> Result<f64> {
        let mut x = input.to_array();
        for (i, z) in self.zeroed.iter().enumerate() {
            if *z {
                x[i] = self.model.input_means[i];
            }
        }
        let (v, h) = predict_step(self.model, &self.hidden, &PredictorInput::from_array(x))?;
        self.hidden = h;
        Ok(v)
    }
}

/// The plant itself replaying the logged commands from rest; exact on logs
/// recorded from rest with the same parameters.
#[derive(Debug, Clone)]
pub struct PlantOracle {
    params: JointPlantParams,
    dt: f64,
    target: VelocityTarget,
    plant: Plant,
}

impl PlantOracle {
    pub fn new(params: JointPlantParams, dt: f64, target: VelocityTarget) -> Result<Self> {
        let plant = Plant::new(params.clone(), 0)?;
        Ok(Self {
            params,
            dt,
            target,
            plant,
        })
    }
}

impl VelocityPredictor for PlantOracle {
    fn reset(&mut self) {
        self.plant.state = self.params.rest_state();
    }

    fn predict(&mut self, input: &PredictorInput) -> Result<f64> {
        let s = *self.plant.step(input.raw_command, self.dt)?;
        Ok(match self.target {
            VelocityTarget::Sensor => plant::sensor_velocity(s.theta, s.omega, &self.params),
            VelocityTarget::Joint => s.omega,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dt: f64,
    pub actual: Vec<f64>,
    pub predicted: Vec<f64>,
    pub error: Vec<f64>,
    pub max_abs_error: f64,
    pub rmse: f64,
}

impl EvalReport {
    pub fn from_series(dt: f64, actual: Vec<f64>, predicted: Vec<f64>) -> Result<Self> {
        if actual.len() != predicted.len() || actual.is_empty() {
            return Err(Error::invalid(
                "evaluation series must be non-empty and of equal length",
            ));
        }
        let error: Vec<f64> = predicted.iter().zip(&actual).map(|(p, a)| p - a).collect();
        let max_abs_error = error.iter().fold(0.0f64, |m, e| m.max(e.abs()));
        let rmse = (error.iter().map(|e| e * e).sum::<f64>() / error.len() as f64).sqrt();
        Ok(Self {
            dt,
            actual,
            predicted,
            error,
            max_abs_error,
            rmse,
        })
    }

    /// `t,actual,predicted,error`, where `t` is the time of the predicted row.
    pub fn write_csv(&self, writer: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["t", "actual", "predicted", "error"])?;
        for k in 0..self.actual.len() {
            let t = (k + 1) as f64 * self.dt;
            w.write_record([t, self.actual[k], self.predicted[k], self.error[k]].map(|v| v.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn summary(&self) -> serde_json::Value {
        serde_json::json!({"max_abs_error": self.max_abs_error, "rmse": self.rmse, "steps": self.error.len()})
    }
}

/// Teacher-forced evaluation: recorded inputs at every step, predictions
/// compared with the recorded next-step velocity.
pub fn evaluate_series(predictor: &mut impl VelocityPredictor, series: &PredictorSeries) -> Result<EvalReport> {
    if series.is_empty() {
        return Err(Error::invalid("evaluation needs at least two log rows"));
    }
    predictor.reset();
    let predicted = series
        .inputs
        .iter()
        .map(|x| predictor.predict(&PredictorInput::from_array(*x)))
        .collect::<Result<Vec<_>>>()?;
    EvalReport::from_series(series.dt, series.targets.clone(), predicted)
}

pub fn evaluate_predictor(model: &RecurrentModel, log: &DatasetLog) -> Result<EvalReport> {
    let series = PredictorSeries::from_log(log, model.target)?;
    evaluate_series(&mut RecurrentPredictor::new(model), &series)
}

#[derive(Debug, Clone, PartialEq)]
pub enum RolloutMode {
    /// Recorded sensor positions, one per command.
    TeacherForced(Vec<f64>),
    /// Integrate the model's own velocity: s[k+1] = s[k] + v̂[k+1]·dt.
    FreeRunning,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    /// v̂ for steps 1..=N.
    pub velocity: Vec<f64>,
    /// Sensor positions 0..=N; index 0 is the initial position.
    pub sensor: Vec<f64>,
}

/// Runs the model over a command series. `context[k]` supplies (rpm, oil
/// temperature) at step k.
pub fn rollout(
    model: &RecurrentModel,
    initial_sensor_pos: f64,
    commands: &[f64],
    context: &[(f64, f64)],
    dt: f64,
    mode: &RolloutMode,
) -> Result<Rollout> {
    if context.len() != commands.len() {
        return Err(Error::invalid("context must have one entry per command"));
    }
    if let RolloutMode::TeacherForced(s) = mode {
        if s.len() != commands.len() {
            return Err(Error::invalid("teacher-forced positions must match the command count"));
        }
    }
    let mut hidden = HiddenState::zeros(model.hidden_size);
    let mut sensor = Vec::with_capacity(commands.len() + 1);
    let mut velocity = Vec::with_capacity(commands.len());
    sensor.push(initial_sensor_pos);
    let mut s = initial_sensor_pos;
    for (k, (&u, &(rpm, temp))) in commands.iter().zip(context).enumerate() {
        let pos = match mode {
            RolloutMode::TeacherForced(rec) => rec[k],
            RolloutMode::FreeRunning => s,
        };
        let input = PredictorInput {
            sensor_pos: pos,
            engine_rpm: rpm,
            oil_temp: temp,
            raw_command: u,
        };
        let (v, h) = predict_step(model, &hidden, &input)?;
        hidden = h;
        velocity.push(v);
        s = match mode {
            RolloutMode::TeacherForced(rec) => rec.get(k + 1).copied().unwrap_or(pos + v * dt),
            RolloutMode::FreeRunning => s + v * dt,
        };
        sensor.push(s);
    }
    Ok(Rollout { velocity, sensor })
}

/// Rollout driven by a log's commands and context.
pub fn rollout_log(model: &RecurrentModel, log: &DatasetLog, free_running: bool) -> Result<Rollout> {
    let series = PredictorSeries::from_log(log, model.target)?;
    let commands: Vec<f64> = series.inputs.iter().map(|x| x[IN_COMMAND]).collect();
    let context: Vec<(f64, f64)> = series.inputs.iter().map(|x| (x[IN_RPM], x[IN_TEMP])).collect();
    let mode = if free_running {
        RolloutMode::FreeRunning
    } else {
        RolloutMode::TeacherForced(series.sensor_positions())
    };
    rollout(
        model,
        series.inputs[0][IN_SENSOR],
        &commands,
        &context,
        series.dt,
        &mode,
    )
}

/// Largest relative discrepancy between BPTT and central differences of the
/// window loss (no burn-in), over 30 parameters from each gate plus 10 from
/// the head.
pub fn gradient_check_recurrent(model: &RecurrentModel, window: &PredictorSeries, epsilon: f64) -> Result<f64> {
    gradient_check_recurrent_with(model, window, epsilon, |_| {})
}

/// As [`gradient_check_recurrent`], with a hook that may tamper with the flat
/// analytic gradient before comparison.
pub fn gradient_check_recurrent_with(
    model: &RecurrentModel,
    window: &PredictorSeries,
    epsilon: f64,
    mutate: impl FnOnce(&mut [f64]),
) -> Result<f64> {
    if window.len() < 2 {
        return Err(Error::invalid("gradient check needs a window of at least two steps"));
    }
    if !(1e-7..=1e-3).contains(&epsilon) {
        return Err(Error::invalid("epsilon must be in [1e-7, 1e-3]"));
    }
    model.validate().map_err(|e| Error::invalid(e.to_string()))?;
    let xs: Vec<[f64; INPUT_SIZE]> = window.inputs.iter().map(|x| model.normalize(x)).collect();
    let ys: Vec<f64> = window
        .targets
        .iter()
        .map(|y| (y - model.target_mean) / model.target_std)
        .collect();
    let mut analytic = vec![0.0; model.param_count()];
    model.window_loss(&xs, &ys, 0, Some(&mut analytic));
    mutate(&mut analytic);

    let mut r = rng::seeded(0x6772_6164);
    let mut picks = Vec::new();
    for gate in Gate::ALL {
        let idx = model.gate_param_indices(gate);
        picks.extend(
            rand::seq::index::sample(&mut r, idx.len(), 30.min(idx.len()))
                .into_iter()
                .map(|i| idx[i]),
        );
    }
    let [_, _, _, ohw, _] = model.offsets();
    let head_len = model.hidden_size + 1;
    picks.extend(
        rand::seq::index::sample(&mut r, head_len, 10.min(head_len))
            .into_iter()
            .map(|i| ohw + i),
    );

    let mut probe = model.clone();
    let mut flat = model.flat_params();
    let mut worst: f64 = 0.0;
    for i in picks {
        let orig = flat[i];
        flat[i] = orig + epsilon;
        probe.set_flat_params(&flat);
        let plus = probe.window_loss(&xs, &ys, 0, None);
        flat[i] = orig - epsilon;
        probe.set_flat_params(&flat);
        let minus = probe.window_loss(&xs, &ys, 0, None);
        flat[i] = orig;
        let numeric = (plus - minus) / (2.0 * epsilon);
        worst = worst.max(crate::matclass::relative_error(analytic[i], numeric));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_model_outputs_target_mean() {
        let mut m = RecurrentModel::zeros(8);
        m.target_mean = 0.3;
        m.target_std = 2.0;
        let input = PredictorInput {
            sensor_pos: 0.1,
            engine_rpm: 1800.0,
            oil_temp: 40.0,
            raw_command: 0.5,
        };
        let (v, _) = predict_step(&m, &HiddenState::zeros(8), &input).unwrap();
        assert_eq!(v, 0.3);
        let bad = PredictorInput {
            raw_command: f64::NAN,
            ..input
        };
        assert!(predict_step(&m, &HiddenState::zeros(8), &bad).is_err());
    }

    #[test]
    fn repeated_input_reaches_fixed_point() {
        let m = RecurrentModel::init_random(16, 3);
        let x = [0.2, -0.1, 0.5, 0.3];
        let mut state = HiddenState::zeros(16);
        let mut last_delta = f64::INFINITY;
        for _ in 0..1000 {
            let next = m.forward_step(&x, &state).hidden();
            last_delta = next
                .h
                .iter()
                .zip(&state.h)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt();
            state = next;
        }
        assert!(last_delta < 1e-6, "{last_delta}");
        assert!(state.h.iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn gate_indices_partition_gate_blocks() {
        let m = RecurrentModel::zeros(4);
        let mut all: Vec<usize> = Gate::ALL.iter().flat_map(|g| m.gate_param_indices(*g)).collect();
        all.sort_unstable();
        all.dedup();
        assert_eq!(all.len(), m.param_count() - m.hidden_size - 1);
    }
}
