//! Per-pixel material classification from the 15 cube channels.
//!
//! Covers the whole chain from rectangle annotations to a trained multilayer
//! perceptron, its evaluation and band ablation, plus a synthetic scene
//! generator that stands in for recorded data.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cube::{self, ChannelMeta, Rect, SpectralCube, CHANNEL_COUNT};
use crate::error::{Error, Result};
use crate::image::{self, Image};
use crate::rng;

/// Number of trainable material categories.
pub const CLASS_COUNT: usize = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MaterialClass {
    Plastic,
    PaperCardboard,
    Wood,
    Metal,
    Textile,
    Foam,
    MineralStone,
    /// Pixels without annotation or outside the valid mask.
    Unlabeled,
}

impl MaterialClass {
    /// Trainable classes in ordinal order.
    pub const TRAINABLE: [MaterialClass; CLASS_COUNT] = [
        MaterialClass::Plastic,
        MaterialClass::PaperCardboard,
        MaterialClass::Wood,
        MaterialClass::Metal,
        MaterialClass::Textile,
        MaterialClass::Foam,
        MaterialClass::MineralStone,
    ];

    /// Ordinal among the trainable classes; `None` for `Unlabeled`.
    pub fn index(self) -> Option<usize> {
        Self::TRAINABLE.iter().position(|&c| c == self)
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::TRAINABLE.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            MaterialClass::Plastic => "Plastic",
            MaterialClass::PaperCardboard => "PaperCardboard",
            MaterialClass::Wood => "Wood",
            MaterialClass::Metal => "Metal",
            MaterialClass::Textile => "Textile",
            MaterialClass::Foam => "Foam",
            MaterialClass::MineralStone => "MineralStone",
            MaterialClass::Unlabeled => "Unlabeled",
        }
    }
}

impl fmt::Display for MaterialClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MaterialClass {
    type Err = Error;

    /// Case-insensitive; separators such as `/`, `_` and `-` are ignored so
    /// "paper/cardboard" and "mineral_stone" parse too.
    fn from_str(s: &str) -> Result<Self> {
        let key: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .map(|c| c.to_ascii_lowercase())
            .collect();
        let all = Self::TRAINABLE.iter().chain(std::iter::once(&MaterialClass::Unlabeled));
        for &c in all {
            if c.name().to_ascii_lowercase() == key {
                return Ok(c);
            }
        }
        match key.as_str() {
            "paper" | "cardboard" => Ok(MaterialClass::PaperCardboard),
            "textiles" => Ok(MaterialClass::Textile),
            "mineral" | "stone" => Ok(MaterialClass::MineralStone),
            _ => Err(Error::invalid(format!("unknown material class '{s}'"))),
        }
    }
}

/// Annotated rectangle; extraction shrinks it by `margin_px` on every side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelRect {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
    #[serde(rename = "class")]
    pub material: MaterialClass,
    #[serde(rename = "margin", default)]
    pub margin_px: usize,
}

impl LabelRect {
    /// The rectangle after the inward margin, or `None` if nothing is left.
    pub fn core(&self) -> Option<Rect> {
        let m2 = 2 * self.margin_px;
        if self.w <= m2 || self.h <= m2 {
            return None;
        }
        Some(Rect::new(
            self.x + self.margin_px,
            self.y + self.margin_px,
            self.w - m2,
            self.h - m2,
        ))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PixelSample {
    pub features: [f64; CHANNEL_COUNT],
    pub target: MaterialClass,
}

/// Emits one sample per valid pixel inside each margin-shrunk rectangle.
///
/// Overlapping rectangles are not deduplicated.
pub fn extract_samples(cube: &SpectralCube, rects: &[LabelRect]) -> Result<Vec<PixelSample>> {
    let mut out = Vec::new();
    for (i, r) in rects.iter().enumerate() {
        if r.material == MaterialClass::Unlabeled {
            return Err(Error::invalid(format!("rectangle {i} is labeled Unlabeled")));
        }
        if r.w == 0 || r.h == 0 || !Rect::new(r.x, r.y, r.w, r.h).fits_in(cube.width(), cube.height()) {
            return Err(Error::invalid(format!(
                "rectangle {i} ({},{} {}x{}) is empty or outside the {}x{} cube",
                r.x,
                r.y,
                r.w,
                r.h,
                cube.width(),
                cube.height()
            )));
        }
        let core = r.core().ok_or_else(|| {
            Error::invalid(format!(
                "rectangle {i} ({},{} {}x{}) is empty after a {} px margin",
                r.x, r.y, r.w, r.h, r.margin_px
            ))
        })?;
        let before = out.len();
        for y in core.y..core.y + core.h {
            for x in core.x..core.x + core.w {
                if cube.is_valid(x, y) {
                    out.push(PixelSample {
                        features: cube.pixel(x, y),
                        target: r.material,
                    });
                }
            }
        }
        if out.len() == before {
            log::warn!("rectangle {i} covers only masked pixels");
        }
    }
    Ok(out)
}

/// Multilayer perceptron with rectifier hidden layers and a softmax output.
///
/// Inputs are z-scored with the stored training statistics before the first
/// layer. Weights are row-major `out x in` per layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpModel {
    pub layer_sizes: Vec<usize>,
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
    pub feature_means: Vec<f64>,
    pub feature_stds: Vec<f64>,
    /// Cube channels feeding the input layer, in order.
    pub band_subset: Vec<usize>,
}

fn all_bands() -> Vec<usize> {
    (0..CHANNEL_COUNT).collect()
}

impl MlpModel {
    /// Model with all parameters zero and identity normalization.
    pub fn zeros(hidden_sizes: &[usize], band_subset: Option<Vec<usize>>) -> Result<Self> {
        let band_subset = band_subset.unwrap_or_else(all_bands);
        validate_subset(&band_subset)?;
        let mut layer_sizes = vec![band_subset.len()];
        layer_sizes.extend_from_slice(hidden_sizes);
        layer_sizes.push(CLASS_COUNT);
        if layer_sizes.contains(&0) {
            return Err(Error::invalid("layer sizes must be positive"));
        }
        let weights = layer_sizes.windows(2).map(|p| vec![0.0; p[0] * p[1]]).collect();
        let biases = layer_sizes[1..].iter().map(|&n| vec![0.0; n]).collect();
        let d = band_subset.len();
        Ok(Self {
            layer_sizes,
            weights,
            biases,
            feature_means: vec![0.0; d],
            feature_stds: vec![1.0; d],
            band_subset,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    fn layers(&self) -> usize {
        self.weights.len()
    }

    pub fn param_count(&self) -> usize {
        self.weights.iter().chain(&self.biases).map(Vec::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().chain(&self.biases).flatten().all(|v| v.is_finite())
    }

    /// Checks shapes after deserialization.
    pub fn validate(&self) -> Result<()> {
        let l = self.layer_sizes.len();
        if l < 2 || self.weights.len() != l - 1 || self.biases.len() != l - 1 {
            return Err(Error::format("mlp layer lists have inconsistent lengths"));
        }
        if *self.layer_sizes.last().unwrap() != CLASS_COUNT {
            return Err(Error::format("mlp output layer must have 7 units"));
        }
        for (i, p) in self.layer_sizes.windows(2).enumerate() {
            if self.weights[i].len() != p[0] * p[1] || self.biases[i].len() != p[1] {
                return Err(Error::format(format!("mlp layer {i} has wrong parameter count")));
            }
        }
        let d = self.input_dim();
        if self.band_subset.len() != d || self.feature_means.len() != d || self.feature_stds.len() != d {
            return Err(Error::format("mlp input statistics do not match the input layer"));
        }
        validate_subset(&self.band_subset).map_err(|e| Error::format(e.to_string()))?;
        if !self.is_finite() {
            return Err(Error::format("mlp parameters are not finite"));
        }
        Ok(())
    }

    /// Selects and z-scores the model inputs. Accepts either a full
    /// 15-channel vector or one already restricted to the band subset.
    fn prepare(&self, features: &[f64]) -> Result<Vec<f64>> {
        let d = self.input_dim();
        let picked: Vec<f64> = if features.len() == CHANNEL_COUNT {
            self.band_subset.iter().map(|&b| features[b]).collect()
        } else if features.len() == d {
            features.to_vec()
        } else {
            return Err(Error::invalid(format!(
                "feature vector has {} values, model expects {d} or {CHANNEL_COUNT}",
                features.len()
            )));
        };
        Ok(picked
            .iter()
            .zip(self.feature_means.iter().zip(&self.feature_stds))
            .map(|(v, (m, s))| (v - m) / s)
            .collect())
    }

    /// Activations of every layer; the last entry holds the logits.
    fn forward(&self, z: &[f64]) -> Vec<Vec<f64>> {
        let mut acts = Vec::with_capacity(self.layers() + 1);
        acts.push(z.to_vec());
        for l in 0..self.layers() {
            let (n_in, n_out) = (self.layer_sizes[l], self.layer_sizes[l + 1]);
            let w = &self.weights[l];
            let prev = &acts[l];
            let mut next: Vec<f64> = (0..n_out)
                .map(|o| {
                    let row = &w[o * n_in..(o + 1) * n_in];
                    self.biases[l][o] + row.iter().zip(prev).map(|(a, b)| a * b).sum::<f64>()
                })
                .collect();
            if l + 1 < self.layers() {
                for v in &mut next {
                    *v = v.max(0.0);
                }
            }
            acts.push(next);
        }
        acts
    }

    /// Cross-entropy of one prepared sample; accumulates parameter gradients
    /// into `grad` when given.
    fn loss_and_grad(&self, z: &[f64], target: usize, grad: Option<&mut Params>) -> f64 {
        let acts = self.forward(z);
        let logits = acts.last().unwrap();
        let probs = softmax(logits);
        let loss = log_sum_exp(logits) - logits[target];
        if let Some(g) = grad {
            let mut delta = probs;
            delta[target] -= 1.0;
            for l in (0..self.layers()).rev() {
                let n_in = self.layer_sizes[l];
                let prev = &acts[l];
                for (o, d) in delta.iter().enumerate() {
                    if *d == 0.0 {
                        continue;
                    }
                    let row = &mut g.weights[l][o * n_in..(o + 1) * n_in];
                    for (gw, a) in row.iter_mut().zip(prev) {
                        *gw += d * a;
                    }
                    g.biases[l][o] += d;
                }
                if l > 0 {
                    let w = &self.weights[l];
                    delta = (0..n_in)
                        .map(|i| {
                            if prev[i] <= 0.0 {
                                return 0.0;
                            }
                            delta.iter().enumerate().map(|(o, d)| d * w[o * n_in + i]).sum()
                        })
                        .collect();
                }
            }
        }
        loss
    }

    fn zero_params(&self) -> Params {
        Params {
            weights: self.weights.iter().map(|w| vec![0.0; w.len()]).collect(),
            biases: self.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    fn param_mut(&mut self, idx: usize) -> &mut f64 {
        let mut i = idx;
        for v in self.weights.iter_mut().chain(self.biases.iter_mut()) {
            if i < v.len() {
                return &mut v[i];
            }
            i -= v.len();
        }
        panic!("parameter index {idx} out of range");
    }
}

/// Same shape as the model parameters; used for gradients and momentum.
#[derive(Debug, Clone)]
struct Params {
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
}

impl Params {
    fn flat(&self) -> Vec<f64> {
        self.weights.iter().chain(&self.biases).flatten().copied().collect()
    }
}

fn validate_subset(subset: &[usize]) -> Result<()> {
    if subset.is_empty() {
        return Err(Error::invalid("band subset is empty"));
    }
    if let Some(b) = subset.iter().find(|&&b| b >= CHANNEL_COUNT) {
        return Err(Error::invalid(format!("band index {b} out of range")));
    }
    let mut sorted = subset.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != subset.len() {
        return Err(Error::invalid("band subset has duplicate indices"));
    }
    Ok(())
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

fn log_sum_exp(logits: &[f64]) -> f64 {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + logits.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Index of the largest value; the first one wins on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub hidden_sizes: Vec<usize>,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    /// Classical momentum coefficient; 0 gives plain SGD.
    pub momentum: f64,
    pub seed: u64,
    pub band_subset: Option<Vec<usize>>,
}

impl Default for MlpConfig {
    fn default() -> Self {
        Self {
            hidden_sizes: vec![64],
            epochs: 30,
            batch: 64,
            lr: 0.02,
            momentum: 0.9,
            seed: 0,
            band_subset: None,
        }
    }
}

impl MlpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch == 0 {
            return Err(Error::invalid("epochs and batch must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid("learning rate must be positive and finite"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("momentum must be in [0, 1)"));
        }
        if let Some(s) = &self.band_subset {
            validate_subset(s)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpTraining {
    pub model: MlpModel,
    /// Mean training cross-entropy of each epoch, accumulated over its batches.
    pub epoch_losses: Vec<f64>,
}

impl MlpTraining {
    pub fn final_loss(&self) -> f64 {
        *self.epoch_losses.last().expect("at least one epoch")
    }
}

fn feature_stats(rows: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let d = rows[0].len();
    let n = rows.len() as f64;
    let mut means = vec![0.0; d];
    for r in rows {
        for (m, v) in means.iter_mut().zip(r) {
            *m += v;
        }
    }
    means.iter_mut().for_each(|m| *m /= n);
    let mut stds = vec![0.0; d];
    for r in rows {
        for ((s, v), m) in stds.iter_mut().zip(r).zip(&means) {
            *s += (v - m).powi(2);
        }
    }
    for s in &mut stds {
        *s = (*s / n).sqrt();
        if *s < 1e-12 {
            *s = 1.0;
        }
    }
    (means, stds)
}

/// Mini-batch SGD on softmax cross-entropy with He-initialized weights.
///
/// Every class must be present. Deterministic for a fixed seed. A
/// non-finite batch loss or parameter aborts with `Divergence`.
pub fn train_mlp(samples: &[PixelSample], config: &MlpConfig) -> Result<MlpTraining> {
    config.validate()?;
    for c in MaterialClass::TRAINABLE {
        if !samples.iter().any(|s| s.target == c) {
            return Err(Error::invalid(format!("no training samples for class {c}")));
        }
    }
    if samples.iter().any(|s| s.target == MaterialClass::Unlabeled) {
        return Err(Error::invalid("training samples must not be Unlabeled"));
    }
    if samples.iter().any(|s| s.features.iter().any(|v| !v.is_finite())) {
        return Err(Error::invalid("training features must be finite"));
    }

    let mut model = MlpModel::zeros(&config.hidden_sizes, config.band_subset.clone())?;
    let raw: Vec<Vec<f64>> = samples
        .iter()
        .map(|s| model.band_subset.iter().map(|&b| s.features[b]).collect())
        .collect();
    let (means, stds) = feature_stats(&raw);
    model.feature_means = means;
    model.feature_stds = stds;
    let inputs: Vec<Vec<f64>> = raw.iter().map(|r| model.prepare(r).expect("subset width")).collect();
    let targets: Vec<usize> = samples.iter().map(|s| s.target.index().unwrap()).collect();

    let mut rng = rng::seeded(config.seed);
    for (l, w) in model.weights.iter_mut().enumerate() {
        let fan_in = model.layer_sizes[l] as f64;
        let scale = (2.0 / fan_in).sqrt();
        for v in w.iter_mut() {
            let n: f64 = StandardNormal.sample(&mut rng);
            *v = n * scale;
        }
    }

    let mut velocity = model.zero_params();
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(config.batch) {
            let mut grad = model.zero_params();
            let mut batch_loss = 0.0;
            for &i in batch {
                batch_loss += model.loss_and_grad(&inputs[i], targets[i], Some(&mut grad));
            }
            if !batch_loss.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    loss: batch_loss / batch.len() as f64,
                });
            }
            total += batch_loss;
            let step = config.lr / batch.len() as f64;
            let pv = velocity.weights.iter_mut().chain(velocity.biases.iter_mut());
            let pg = grad.weights.iter().chain(&grad.biases);
            let pp = model.weights.iter_mut().chain(model.biases.iter_mut());
            for ((v, g), p) in pv.zip(pg).zip(pp) {
                for ((vi, gi), pi) in v.iter_mut().zip(g).zip(p.iter_mut()) {
                    *vi = config.momentum * *vi - step * gi;
                    *pi += *vi;
                }
            }
        }
        let mean = total / samples.len() as f64;
        if !model.is_finite() {
            return Err(Error::Divergence { epoch, loss: mean });
        }
        log::debug!("mlp epoch {epoch}: loss {mean:.6}");
        epoch_losses.push(mean);
    }
    Ok(MlpTraining { model, epoch_losses })
}

/// Most probable class and the full probability vector.
///
/// Ties go to the lowest class ordinal.
pub fn predict_pixel(model: &MlpModel, features: &[f64]) -> Result<(MaterialClass, [f64; CLASS_COUNT])> {
    let z = model.prepare(features)?;
    let acts = model.forward(&z);
    let probs = softmax(acts.last().unwrap());
    let mut out = [0.0; CLASS_COUNT];
    out.copy_from_slice(&probs);
    Ok((MaterialClass::TRAINABLE[argmax(&probs)], out))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelMap {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<MaterialClass>,
}

impl LabelMap {
    pub fn filled(width: usize, height: usize, class: MaterialClass) -> Self {
        Self {
            width,
            height,
            labels: vec![class; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> MaterialClass {
        self.labels[y * self.width + x]
    }

    /// Pixel count per class, including `Unlabeled`.
    pub fn histogram(&self) -> BTreeMap<MaterialClass, usize> {
        let mut h = BTreeMap::new();
        for &l in &self.labels {
            *h.entry(l).or_insert(0) += 1;
        }
        h
    }
}

/// Classifies every valid pixel; masked pixels become `Unlabeled` with
/// confidence 0.
pub fn classify_cube(model: &MlpModel, cube: &SpectralCube) -> Result<(LabelMap, Vec<f64>)> {
    model.validate().map_err(|e| Error::invalid(e.to_string()))?;
    let (w, h) = (cube.width(), cube.height());
    let rows: Vec<Vec<(MaterialClass, f64)>> = (0..h)
        .into_par_iter()
        .map(|y| {
            (0..w)
                .map(|x| {
                    if !cube.is_valid(x, y) {
                        return Ok((MaterialClass::Unlabeled, 0.0));
                    }
                    let (c, p) = predict_pixel(model, &cube.pixel(x, y))?;
                    Ok((c, p[c.index().unwrap()]))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let (labels, conf): (Vec<_>, Vec<_>) = rows.into_iter().flatten().unzip();
    Ok((
        LabelMap {
            width: w,
            height: h,
            labels,
        },
        conf,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub class: MaterialClass,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub per_class: Vec<ClassScore>,
    /// Unweighted mean f1 over classes that occur as target or prediction.
    pub macro_f1: f64,
    /// Support-weighted mean f1.
    pub weighted_f1: f64,
    pub accuracy: f64,
    /// Rows are true classes, columns predictions.
    pub confusion: [[usize; CLASS_COUNT]; CLASS_COUNT],
}

impl Metrics {
    pub fn from_confusion(confusion: [[usize; CLASS_COUNT]; CLASS_COUNT]) -> Self {
        let total: usize = confusion.iter().flatten().sum();
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let mut per_class = Vec::with_capacity(CLASS_COUNT);
        let mut present = Vec::new();
        for (k, class) in MaterialClass::TRAINABLE.into_iter().enumerate() {
            let tp = confusion[k][k];
            let support: usize = confusion[k].iter().sum();
            let predicted: usize = confusion.iter().map(|r| r[k]).sum();
            let precision = ratio(tp, predicted);
            let recall = ratio(tp, support);
            let f1 = if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
            if support > 0 || predicted > 0 {
                present.push(f1);
            }
            per_class.push(ClassScore {
                class,
                precision,
                recall,
                f1,
                support,
            });
        }
        let macro_f1 = if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        };
        let weighted_f1 = per_class.iter().map(|c| c.f1 * c.support as f64).sum::<f64>() / total.max(1) as f64;
        let correct: usize = (0..CLASS_COUNT).map(|k| confusion[k][k]).sum();
        Self {
            per_class,
            macro_f1,
            weighted_f1,
            accuracy: ratio(correct, total),
            confusion,
        }
    }

    /// One-line summary in the customary "f1-score of 0.74" style.
    pub fn headline(&self) -> String {
        format!("f1-score of {:.2}", self.macro_f1)
    }
}

/// Scores pairs of (true, predicted) classes.
pub fn metrics_from_predictions(pairs: &[(MaterialClass, MaterialClass)]) -> Result<Metrics> {
    let mut confusion = [[0usize; CLASS_COUNT]; CLASS_COUNT];
    for (t, p) in pairs {
        let (Some(ti), Some(pi)) = (t.index(), p.index()) else {
            return Err(Error::invalid("metrics need trainable classes only"));
        };
        confusion[ti][pi] += 1;
    }
    Ok(Metrics::from_confusion(confusion))
}

pub fn evaluate(model: &MlpModel, samples: &[PixelSample]) -> Result<Metrics> {
    if samples.is_empty() {
        return Err(Error::invalid("evaluation needs at least one sample"));
    }
    let pairs = samples
        .iter()
        .map(|s| Ok((s.target, predict_pixel(model, &s.features)?.0)))
        .collect::<Result<Vec<_>>>()?;
    metrics_from_predictions(&pairs)
}

/// Per-class seeded shuffle, then the first `round(train_frac * n)` of each
/// class go to training. Classes with two or more samples keep at least one
/// on each side.
pub fn stratified_split(
    samples: &[PixelSample],
    train_frac: f64,
    seed: u64,
) -> Result<(Vec<PixelSample>, Vec<PixelSample>)> {
    if !(0.0..=1.0).contains(&train_frac) {
        return Err(Error::invalid("train fraction must be in [0, 1]"));
    }
    let mut rng = rng::seeded(seed);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for class in MaterialClass::TRAINABLE {
        let mut idx: Vec<usize> = (0..samples.len()).filter(|&i| samples[i].target == class).collect();
        idx.shuffle(&mut rng);
        let n = idx.len();
        let mut k = (train_frac * n as f64).round() as usize;
        if n >= 2 {
            k = k.clamp(1, n - 1);
        }
        train.extend(idx[..k].iter().map(|&i| samples[i].clone()));
        test.extend(idx[k..].iter().map(|&i| samples[i].clone()));
    }
    Ok((train, test))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationEntry {
    pub subset: Vec<usize>,
    pub macro_f1: f64,
}

/// Fraction of samples used for training in every held-out evaluation.
pub const TRAIN_FRACTION: f64 = 0.8;

/// Trains one model per band subset on the same stratified split and ranks
/// the subsets by held-out macro-f1, best first.
///
/// The split uses `config.seed`; `config.band_subset` is overridden.
pub fn band_ablation(
    samples: &[PixelSample],
    subsets: &[Vec<usize>],
    config: &MlpConfig,
) -> Result<Vec<AblationEntry>> {
    if subsets.is_empty() {
        return Err(Error::invalid("ablation needs at least one subset"));
    }
    for s in subsets {
        validate_subset(s)?;
    }
    let (train, test) = stratified_split(samples, TRAIN_FRACTION, config.seed)?;
    if test.is_empty() {
        return Err(Error::invalid("held-out split is empty"));
    }
    let mut entries = subsets
        .par_iter()
        .map(|subset| {
            let cfg = MlpConfig {
                band_subset: Some(subset.clone()),
                ..config.clone()
            };
            let trained = train_mlp(&train, &cfg)?;
            Ok(AblationEntry {
                subset: subset.clone(),
                macro_f1: evaluate(&trained.model, &test)?.macro_f1,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    entries.sort_by(|a, b| b.macro_f1.total_cmp(&a.macro_f1));
    Ok(entries)
}

/// Largest relative discrepancy between backprop and central differences of
/// the mean cross-entropy over `samples`.
///
/// Checks up to 128 parameters drawn without replacement from a fixed seed
/// (all of them when the model is smaller).
pub fn gradient_check_mlp(model: &MlpModel, samples: &[PixelSample], epsilon: f64) -> Result<f64> {
    gradient_check_mlp_with(model, samples, epsilon, |_| {})
}

/// As [`gradient_check_mlp`], but lets the caller tamper with the flattened
/// analytic gradient first. Used to confirm the check catches wrong gradients.
pub fn gradient_check_mlp_with(
    model: &MlpModel,
    samples: &[PixelSample],
    epsilon: f64,
    mutate: impl FnOnce(&mut [f64]),
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::invalid("gradient check needs samples"));
    }
    if !(1e-7..=1e-3).contains(&epsilon) {
        return Err(Error::invalid("epsilon must be in [1e-7, 1e-3]"));
    }
    model.validate().map_err(|e| Error::invalid(e.to_string()))?;
    let prepared = samples
        .iter()
        .map(|s| {
            let t = s
                .target
                .index()
                .ok_or_else(|| Error::invalid("gradient check samples must be labeled"))?;
            Ok((model.prepare(&s.features)?, t))
        })
        .collect::<Result<Vec<_>>>()?;
    let n = prepared.len() as f64;
    let mean_loss = |m: &MlpModel| prepared.iter().map(|(z, t)| m.loss_and_grad(z, *t, None)).sum::<f64>() / n;

    let mut grad = model.zero_params();
    for (z, t) in &prepared {
        model.loss_and_grad(z, *t, Some(&mut grad));
    }
    let mut analytic = grad.flat();
    analytic.iter_mut().for_each(|g| *g /= n);
    mutate(&mut analytic);

    let total = model.param_count();
    let picks = rand::seq::index::sample(&mut rng::seeded(0x6772_6164), total, total.min(128)).into_vec();
    let mut probe = model.clone();
    let mut worst: f64 = 0.0;
    for i in picks {
        let orig = *probe.param_mut(i);
        *probe.param_mut(i) = orig + epsilon;
        let plus = mean_loss(&probe);
        *probe.param_mut(i) = orig - epsilon;
        let minus = mean_loss(&probe);
        *probe.param_mut(i) = orig;
        let numeric = (plus - minus) / (2.0 * epsilon);
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    Ok(worst)
}

/// `|a - b| / max(|a|, |b|)`, with a floor of 1e-7 on the denominator so that
/// two vanishing gradients compare as equal.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-7)
}

/// Mean cube values of one material, one per channel.
pub type Signature = [f64; CHANNEL_COUNT];

/// Hand-made reflectance-like signatures with distinct shapes across all
/// three cameras. Order follows [`MaterialClass::TRAINABLE`].
pub fn canonical_signatures() -> [Signature; CLASS_COUNT] {
    [
        // UV(3)            VIS RGB(3)        NIR filters(4)          SWIR(5)
        [
            0.30, 0.25, 0.35, 0.70, 0.40, 0.30, 0.75, 0.78, 0.80, 0.70, 0.65, 0.30, 0.70, 0.25, 0.55,
        ],
        [
            0.55, 0.60, 0.50, 0.75, 0.70, 0.60, 0.80, 0.82, 0.83, 0.82, 0.70, 0.60, 0.45, 0.55, 0.40,
        ],
        [
            0.15, 0.12, 0.18, 0.55, 0.40, 0.25, 0.65, 0.72, 0.75, 0.76, 0.70, 0.65, 0.50, 0.45, 0.35,
        ],
        [
            0.60, 0.62, 0.64, 0.55, 0.56, 0.58, 0.60, 0.61, 0.62, 0.63, 0.64, 0.65, 0.66, 0.67, 0.68,
        ],
        [
            0.40, 0.45, 0.70, 0.30, 0.35, 0.60, 0.55, 0.60, 0.62, 0.58, 0.50, 0.40, 0.35, 0.42, 0.30,
        ],
        [
            0.75, 0.80, 0.78, 0.85, 0.85, 0.83, 0.86, 0.85, 0.84, 0.80, 0.60, 0.35, 0.55, 0.20, 0.50,
        ],
        [
            0.20, 0.18, 0.17, 0.45, 0.44, 0.42, 0.46, 0.47, 0.48, 0.48, 0.40, 0.30, 0.42, 0.28, 0.35,
        ],
    ]
}

/// Signatures identical outside the SWIR camera; within it each class has
/// high response on a distinct pair of the five channels.
pub fn swir_only_signatures() -> [Signature; CLASS_COUNT] {
    const PATTERNS: [[u8; 5]; CLASS_COUNT] = [
        [1, 1, 0, 0, 0],
        [0, 1, 1, 0, 0],
        [0, 0, 1, 1, 0],
        [0, 0, 0, 1, 1],
        [1, 0, 0, 0, 1],
        [1, 0, 1, 0, 0],
        [0, 1, 0, 1, 0],
    ];
    let swir = cube::camera_channels(cube::Camera::Swir);
    PATTERNS.map(|p| {
        let mut s = [0.5; CHANNEL_COUNT];
        for (&c, &bit) in swir.iter().zip(&p) {
            s[c] = if bit == 1 { 0.8 } else { 0.2 };
        }
        s
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenePatch {
    pub rect: Rect,
    pub class: MaterialClass,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSceneSpec {
    pub width: usize,
    pub height: usize,
    pub signatures: [Signature; CLASS_COUNT],
    /// Value of pixels outside every patch (the conveyor).
    pub background: Signature,
    pub noise_std: [f64; CHANNEL_COUNT],
    /// Each patch is scaled by a factor drawn uniformly from this range.
    pub shadow_range: (f64, f64),
    /// Later patches overwrite earlier ones where they overlap.
    pub layout: Vec<ScenePatch>,
    pub seed: u64,
}

impl SyntheticSceneSpec {
    /// A 4x4 grid of rectangles of randomized size and round-robin class
    /// assignment, so every class appears at least twice.
    pub fn grid(
        seed: u64,
        width: usize,
        height: usize,
        signatures: [Signature; CLASS_COUNT],
        noise_std: f64,
        shadow_range: (f64, f64),
    ) -> Self {
        const CELLS: usize = 4;
        let mut rng = rng::substream(seed, 1);
        let mut classes: Vec<MaterialClass> = (0..CELLS * CELLS)
            .map(|i| MaterialClass::TRAINABLE[i % CLASS_COUNT])
            .collect();
        classes.shuffle(&mut rng);
        let (cw, ch) = (width / CELLS, height / CELLS);
        let mut layout = Vec::new();
        for (i, class) in classes.into_iter().enumerate() {
            let (gx, gy) = (i % CELLS, i / CELLS);
            let max_inset_x = (cw / 6).max(1);
            let max_inset_y = (ch / 6).max(1);
            let (l, r) = (rng.random_range(1..=max_inset_x), rng.random_range(1..=max_inset_x));
            let (t, b) = (rng.random_range(1..=max_inset_y), rng.random_range(1..=max_inset_y));
            if cw <= l + r || ch <= t + b {
                continue;
            }
            layout.push(ScenePatch {
                rect: Rect::new(gx * cw + l, gy * ch + t, cw - l - r, ch - t - b),
                class,
            });
        }
        Self {
            width,
            height,
            signatures,
            background: [0.05; CHANNEL_COUNT],
            noise_std: [noise_std; CHANNEL_COUNT],
            shadow_range,
            layout,
            seed,
        }
    }

    /// The canonical classification scene: 128x128, σ = 0.05, shadow in
    /// [0.5, 1].
    pub fn canonical(seed: u64) -> Self {
        Self::grid(seed, 128, 128, canonical_signatures(), 0.05, (0.5, 1.0))
    }

    pub fn validate(&self) -> Result<()> {
        let in_unit = |s: &Signature| s.iter().all(|v| (0.0..=1.0).contains(v));
        if !self.signatures.iter().all(in_unit) || !in_unit(&self.background) {
            return Err(Error::invalid("signatures must lie in [0, 1]"));
        }
        if self.noise_std.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
            return Err(Error::invalid("noise std must be finite and non-negative"));
        }
        let (lo, hi) = self.shadow_range;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::invalid("shadow range must lie in (0, 1] with lo <= hi"));
        }
        for p in &self.layout {
            if p.class == MaterialClass::Unlabeled {
                return Err(Error::invalid("scene patches must carry a trainable class"));
            }
            if p.rect.area() == 0 || !p.rect.fits_in(self.width, self.height) {
                return Err(Error::invalid("scene patch is empty or outside the scene"));
            }
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid("scene must be non-empty"));
        }
        Ok(())
    }

    /// Annotation rectangles matching the layout.
    pub fn label_rects(&self, margin_px: usize) -> Vec<LabelRect> {
        self.layout
            .iter()
            .map(|p| LabelRect {
                x: p.rect.x,
                y: p.rect.y,
                w: p.rect.w,
                h: p.rect.h,
                material: p.class,
                margin_px,
            })
            .collect()
    }
}

/// Renders the layout: patch signature times its shadow factor plus
/// per-channel Gaussian noise. The whole cube is valid.
pub fn gen_synthetic_scene(spec: &SyntheticSceneSpec) -> Result<(SpectralCube, LabelMap)> {
    spec.validate()?;
    let (w, h) = (spec.width, spec.height);
    let mut truth = LabelMap::filled(w, h, MaterialClass::Unlabeled);
    let mut shadow = vec![1.0; w * h];
    let mut shadow_rng = rng::substream(spec.seed, 2);
    for p in &spec.layout {
        let (lo, hi) = spec.shadow_range;
        let f = if hi > lo { shadow_rng.random_range(lo..=hi) } else { lo };
        for y in p.rect.y..p.rect.y + p.rect.h {
            for x in p.rect.x..p.rect.x + p.rect.w {
                truth.labels[y * w + x] = p.class;
                shadow[y * w + x] = f;
            }
        }
    }
    let mut noise_rng = rng::substream(spec.seed, 3);
    let mut planes = Vec::with_capacity(CHANNEL_COUNT);
    for c in 0..CHANNEL_COUNT {
        let normal = Normal::new(0.0, spec.noise_std[c]).map_err(|e| Error::invalid(e.to_string()))?;
        let plane: Vec<f64> = (0..w * h)
            .map(|i| {
                let base = match truth.labels[i].index() {
                    Some(k) => spec.signatures[k][c] * shadow[i],
                    None => spec.background[c],
                };
                if spec.noise_std[c] > 0.0 {
                    base + normal.sample(&mut noise_rng)
                } else {
                    base
                }
            })
            .collect();
        planes.push(plane);
    }
    let meta: Vec<ChannelMeta> = cube::canonical_channel_meta();
    let cube = SpectralCube::new(w, h, planes, meta, vec![true; w * h], false)?;
    Ok((cube, truth))
}

/// RGB color per class ordinal; index 7 is `Unlabeled`.
pub fn palette() -> [[u8; 3]; CLASS_COUNT + 1] {
    [
        [230, 25, 75],
        [255, 225, 25],
        [145, 95, 40],
        [128, 128, 144],
        [145, 30, 180],
        [70, 240, 240],
        [170, 110, 40],
        [0, 0, 0],
    ]
}

/// `{"0": {"class": "Plastic", "rgb": [..]}, ...}`
pub fn palette_legend() -> serde_json::Value {
    let pal = palette();
    let mut map = serde_json::Map::new();
    for (i, rgb) in pal.iter().enumerate() {
        let class = MaterialClass::from_index(i).unwrap_or(MaterialClass::Unlabeled);
        map.insert(i.to_string(), serde_json::json!({"class": class.name(), "rgb": rgb}));
    }
    serde_json::Value::Object(map)
}

pub fn write_label_png(map: &LabelMap, writer: impl Write) -> Result<()> {
    let idx: Vec<u8> = map
        .labels
        .iter()
        .map(|l| l.index().unwrap_or(CLASS_COUNT) as u8)
        .collect();
    image::write_png_indexed(map.width, map.height, &idx, &palette(), writer)
}

pub fn write_confidence_png(width: usize, height: usize, confidence: &[f64], writer: impl Write) -> Result<()> {
    let img = Image::from_vec(width, height, 1, confidence.to_vec())?;
    image::write_png_gray16(&img, writer)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cube_from(w: usize, h: usize, f: impl Fn(usize, usize, usize) -> f64, mask: Vec<bool>) -> SpectralCube {
        let planes = (0..CHANNEL_COUNT)
            .map(|c| (0..w * h).map(|i| f(i % w, i / w, c)).collect())
            .collect();
        SpectralCube::new(w, h, planes, cube::canonical_channel_meta(), mask, false).unwrap()
    }

    #[test]
    fn margin_shrinks_rect() {
        let cube = cube_from(8, 8, |x, y, c| (x + y + c) as f64, vec![true; 64]);
        let r = LabelRect {
            x: 2,
            y: 2,
            w: 4,
            h: 4,
            material: MaterialClass::Wood,
            margin_px: 1,
        };
        let s = extract_samples(&cube, std::slice::from_ref(&r)).unwrap();
        assert_eq!(s.len(), 4);
        assert_eq!(s[0].features[0], 6.0);
        let too_big = LabelRect { margin_px: 2, ..r };
        let err = extract_samples(&cube, &[too_big]).unwrap_err().to_string();
        assert!(err.contains("rectangle 0"), "{err}");
    }

    #[test]
    fn masked_rect_and_overlap() {
        let mut mask = vec![true; 64];
        for y in 0..4 {
            for x in 0..4 {
                mask[y * 8 + x] = false;
            }
        }
        let cube = cube_from(8, 8, |_, _, _| 0.5, mask);
        let masked = LabelRect {
            x: 0,
            y: 0,
            w: 4,
            h: 4,
            material: MaterialClass::Metal,
            margin_px: 0,
        };
        assert!(extract_samples(&cube, &[masked]).unwrap().is_empty());
        let a = LabelRect {
            x: 4,
            y: 4,
            w: 3,
            h: 3,
            material: MaterialClass::Foam,
            margin_px: 0,
        };
        let b = LabelRect {
            x: 5,
            y: 5,
            w: 3,
            h: 3,
            material: MaterialClass::Textile,
            ..a.clone()
        };
        let s = extract_samples(&cube, &[a, b]).unwrap();
        assert_eq!(s.len(), 18);
    }

    #[test]
    fn zero_model_is_uniform_and_picks_first_class() {
        let m = MlpModel::zeros(&[8], None).unwrap();
        let (c, p) = predict_pixel(&m, &[0.3; CHANNEL_COUNT]).unwrap();
        assert_eq!(c, MaterialClass::Plastic);
        for v in p {
            assert!((v - 1.0 / 7.0).abs() < 1e-15);
        }
        assert!(predict_pixel(&m, &[0.0; 4]).is_err());
    }

    #[test]
    fn constant_predictor_macro_f1() {
        let pairs: Vec<_> = MaterialClass::TRAINABLE
            .iter()
            .flat_map(|&c| std::iter::repeat_n((c, MaterialClass::Wood), 10))
            .collect();
        let m = metrics_from_predictions(&pairs).unwrap();
        let wood = &m.per_class[2];
        assert!((wood.f1 - 0.25).abs() < 1e-12);
        assert!((m.macro_f1 - 1.0 / 28.0).abs() < 1e-12);
        for (k, row) in m.confusion.iter().enumerate() {
            assert_eq!(row.iter().sum::<usize>(), m.per_class[k].support);
        }
    }

    #[test]
    fn perfect_predictions_score_one() {
        let pairs = vec![
            (MaterialClass::Wood, MaterialClass::Wood),
            (MaterialClass::Metal, MaterialClass::Metal),
        ];
        let m = metrics_from_predictions(&pairs).unwrap();
        assert_eq!(m.macro_f1, 1.0);
        assert_eq!(m.headline(), "f1-score of 1.00");
    }

    #[test]
    fn class_names_parse() {
        assert_eq!("wood".parse::<MaterialClass>().unwrap(), MaterialClass::Wood);
        assert_eq!(
            "Paper/Cardboard".parse::<MaterialClass>().unwrap(),
            MaterialClass::PaperCardboard
        );
        assert_eq!(
            "mineral_stone".parse::<MaterialClass>().unwrap(),
            MaterialClass::MineralStone
        );
        assert!("glass".parse::<MaterialClass>().is_err());
    }

    #[test]
    fn label_json_uses_short_keys() {
        let json = r#"[{"x":1,"y":2,"w":5,"h":6,"class":"Metal","margin":1}]"#;
        let rects: Vec<LabelRect> = serde_json::from_str(json).unwrap();
        assert_eq!(rects[0].material, MaterialClass::Metal);
        assert_eq!(rects[0].margin_px, 1);
    }

    #[test]
    fn gradient_check_rejects_bad_input() {
        let m = MlpModel::zeros(&[4], None).unwrap();
        assert!(gradient_check_mlp(&m, &[], 1e-5).is_err());
        let s = PixelSample {
            features: [0.1; CHANNEL_COUNT],
            target: MaterialClass::Foam,
        };
        assert!(gradient_check_mlp(&m, &[s], 1e-2).is_err());
    }
}
