//! Difference-of-Gaussians keypoints with 128-dimensional gradient-histogram
//! descriptors (Lowe's SIFT), operating on a single-channel image with values
//! in `[0, 1]`.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

pub const DESCRIPTOR_LEN: usize = 128;
const DESC_WIDTH: usize = 4;
const DESC_BINS: usize = 8;
const ORI_BINS: usize = 36;
const ORI_PEAK_RATIO: f64 = 0.8;
const BORDER: usize = 5;
const MAX_REFINE_STEPS: usize = 5;
const DESC_CLAMP: f64 = 0.2;
/// Smallest octave side length still searched for extrema.
const MIN_OCTAVE_SIZE: usize = 16;
pub const MIN_IMAGE_SIZE: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiftParams {
    pub scales_per_octave: usize,
    /// Blur of the first level of every octave.
    pub sigma: f64,
    /// Blur already present in the input image.
    pub assumed_blur: f64,
    /// Minimum |DoG| at the refined extremum, in normalized intensity units.
    pub contrast_threshold: f64,
    /// Maximum ratio of principal curvatures.
    pub edge_ratio: f64,
}

impl Default for SiftParams {
    fn default() -> Self {
        Self {
            scales_per_octave: 3,
            sigma: 1.6,
            assumed_blur: 0.5,
            contrast_threshold: 0.03,
            edge_ratio: 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub scale: f64,
    pub orientation: f64,
    pub descriptor: Vec<f64>,
}

#[derive(Clone)]
struct Plane {
    w: usize,
    h: usize,
    data: Vec<f64>,
}

impl Plane {
    #[inline]
    fn at(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.w + x]
    }

    fn downsample(&self) -> Plane {
        let (w, h) = (self.w / 2, self.h / 2);
        let mut data = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                data.push(self.at(2 * x, 2 * y));
            }
        }
        Plane { w, h, data }
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (4.0 * sigma).ceil().max(1.0) as usize;
    let mut k: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let d = i as f64 - radius as f64;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

/// Separable Gaussian blur with replicated borders.
fn blur(p: &Plane, sigma: f64) -> Plane {
    if sigma <= 0.0 {
        return p.clone();
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let (w, h) = (p.w as isize, p.h as isize);
    let mut tmp = vec![0.0; p.data.len()];
    for y in 0..h {
        let row = &p.data[(y * w) as usize..((y + 1) * w) as usize];
        for x in 0..w {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                let sx = (x + i as isize - r).clamp(0, w - 1) as usize;
                acc += kv * row[sx];
            }
            tmp[(y * w + x) as usize] = acc;
        }
    }
    let mut out = vec![0.0; p.data.len()];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                let sy = (y + i as isize - r).clamp(0, h - 1);
                acc += kv * tmp[(sy * w + x) as usize];
            }
            out[(y * w + x) as usize] = acc;
        }
    }
    Plane {
        w: p.w,
        h: p.h,
        data: out,
    }
}

struct Octave {
    gauss: Vec<Plane>,
    dog: Vec<Plane>,
}

fn build_pyramid(base: Plane, params: &SiftParams) -> Vec<Octave> {
    let s = params.scales_per_octave;
    let k = 2f64.powf(1.0 / s as f64);
    // Incremental blur taking level i-1 to level i.
    let increments: Vec<f64> = (1..s + 3)
        .map(|i| {
            let prev = params.sigma * k.powi(i as i32 - 1);
            let total = prev * k;
            (total * total - prev * prev).sqrt()
        })
        .collect();

    let mut octaves = Vec::new();
    let mut first = base;
    while first.w.min(first.h) >= MIN_OCTAVE_SIZE {
        let mut gauss = Vec::with_capacity(s + 3);
        gauss.push(first.clone());
        for inc in &increments {
            let next = blur(gauss.last().unwrap(), *inc);
            gauss.push(next);
        }
        let dog = gauss
            .windows(2)
            .map(|pair| Plane {
                w: pair[0].w,
                h: pair[0].h,
                data: pair[1].data.iter().zip(&pair[0].data).map(|(a, b)| a - b).collect(),
            })
            .collect();
        first = gauss[s].downsample();
        octaves.push(Octave { gauss, dog });
    }
    octaves
}

fn is_extremum(dog: &[Plane], layer: usize, x: usize, y: usize) -> bool {
    let v = dog[layer].at(x, y);
    let mut is_max = true;
    let mut is_min = true;
    for plane in &dog[layer - 1..=layer + 1] {
        for yy in y - 1..=y + 1 {
            for xx in x - 1..=x + 1 {
                if std::ptr::eq(plane, &dog[layer]) && xx == x && yy == y {
                    continue;
                }
                let n = plane.at(xx, yy);
                is_max &= v > n;
                is_min &= v < n;
                if !is_max && !is_min {
                    return false;
                }
            }
        }
    }
    is_max || is_min
}

struct Refined {
    x: usize,
    y: usize,
    layer: usize,
    offset: Vector3<f64>,
}

fn refine(
    dog: &[Plane],
    s: usize,
    mut x: usize,
    mut y: usize,
    mut layer: usize,
    params: &SiftParams,
) -> Option<Refined> {
    let (w, h) = (dog[0].w, dog[0].h);
    for _ in 0..MAX_REFINE_STEPS {
        let (prev, cur, next) = (&dog[layer - 1], &dog[layer], &dog[layer + 1]);
        let v = cur.at(x, y);
        let g = Vector3::new(
            0.5 * (cur.at(x + 1, y) - cur.at(x - 1, y)),
            0.5 * (cur.at(x, y + 1) - cur.at(x, y - 1)),
            0.5 * (next.at(x, y) - prev.at(x, y)),
        );
        let dxx = cur.at(x + 1, y) + cur.at(x - 1, y) - 2.0 * v;
        let dyy = cur.at(x, y + 1) + cur.at(x, y - 1) - 2.0 * v;
        let dss = next.at(x, y) + prev.at(x, y) - 2.0 * v;
        let dxy = 0.25 * (cur.at(x + 1, y + 1) - cur.at(x - 1, y + 1) - cur.at(x + 1, y - 1) + cur.at(x - 1, y - 1));
        let dxs = 0.25 * (next.at(x + 1, y) - next.at(x - 1, y) - prev.at(x + 1, y) + prev.at(x - 1, y));
        let dys = 0.25 * (next.at(x, y + 1) - next.at(x, y - 1) - prev.at(x, y + 1) + prev.at(x, y - 1));
        let hess = Matrix3::new(dxx, dxy, dxs, dxy, dyy, dys, dxs, dys, dss);
        let offset = -(hess.try_inverse()? * g);
        if offset.iter().all(|o| o.abs() < 0.5) {
            let contrast = v + 0.5 * g.dot(&offset);
            if contrast.abs() < params.contrast_threshold {
                return None;
            }
            let tr = dxx + dyy;
            let det = dxx * dyy - dxy * dxy;
            let r = params.edge_ratio;
            if det <= 0.0 || tr * tr * r >= (r + 1.0) * (r + 1.0) * det {
                return None;
            }
            return Some(Refined { x, y, layer, offset });
        }
        if offset.iter().any(|o| !o.is_finite() || o.abs() > 1e3) {
            return None;
        }
        let nx = x as f64 + offset.x.round();
        let ny = y as f64 + offset.y.round();
        let nl = layer as f64 + offset.z.round();
        if nl < 1.0
            || nl > s as f64
            || nx < BORDER as f64
            || ny < BORDER as f64
            || nx >= (w - BORDER) as f64
            || ny >= (h - BORDER) as f64
        {
            return None;
        }
        x = nx as usize;
        y = ny as usize;
        layer = nl as usize;
    }
    None
}

#[inline]
fn gradient(p: &Plane, x: usize, y: usize) -> (f64, f64) {
    (p.at(x + 1, y) - p.at(x - 1, y), p.at(x, y + 1) - p.at(x, y - 1))
}

fn dominant_orientations(img: &Plane, x: f64, y: f64, sigma_oct: f64) -> Vec<f64> {
    let sigma_w = 1.5 * sigma_oct;
    let radius = (3.0 * sigma_w).round() as isize;
    let (cx, cy) = (x.round() as isize, y.round() as isize);
    let mut hist = [0.0f64; ORI_BINS];
    for dy in -radius..=radius {
        let py = cy + dy;
        if py < 1 || py >= img.h as isize - 1 {
            continue;
        }
        for dx in -radius..=radius {
            let px = cx + dx;
            if px < 1 || px >= img.w as isize - 1 {
                continue;
            }
            let (gx, gy) = gradient(img, px as usize, py as usize);
            let mag = (gx * gx + gy * gy).sqrt();
            let ang = gy.atan2(gx).rem_euclid(2.0 * PI);
            let rx = px as f64 - x;
            let ry = py as f64 - y;
            let weight = (-(rx * rx + ry * ry) / (2.0 * sigma_w * sigma_w)).exp();
            let bin = ((ang * ORI_BINS as f64 / (2.0 * PI)).round() as usize) % ORI_BINS;
            hist[bin] += weight * mag;
        }
    }
    let n = ORI_BINS;
    let smooth: Vec<f64> = (0..n)
        .map(|i| {
            (hist[(i + n - 2) % n] + hist[(i + 2) % n]) / 16.0
                + 4.0 * (hist[(i + n - 1) % n] + hist[(i + 1) % n]) / 16.0
                + 6.0 * hist[i] / 16.0
        })
        .collect();
    let max = smooth.iter().cloned().fold(0.0, f64::max);
    if max <= 0.0 {
        return Vec::new();
    }
    let mut out = Vec::new();
    for i in 0..n {
        let l = smooth[(i + n - 1) % n];
        let r = smooth[(i + 1) % n];
        let c = smooth[i];
        if c > l && c > r && c >= ORI_PEAK_RATIO * max {
            let shift = 0.5 * (l - r) / (l - 2.0 * c + r);
            let bin = i as f64 + shift;
            out.push((bin * 2.0 * PI / n as f64).rem_euclid(2.0 * PI));
        }
    }
    out
}

fn descriptor(img: &Plane, x: f64, y: f64, sigma_oct: f64, orientation: f64) -> Option<Vec<f64>> {
    let d = DESC_WIDTH as f64;
    let hist_width = 3.0 * sigma_oct;
    let diag = ((img.w * img.w + img.h * img.h) as f64).sqrt();
    let radius = (hist_width * std::f64::consts::SQRT_2 * (d + 1.0) * 0.5)
        .round()
        .min(diag) as isize;
    let (cos_t, sin_t) = (orientation.cos(), orientation.sin());
    let (cx, cy) = (x.round() as isize, y.round() as isize);
    let side = DESC_WIDTH + 2;
    let mut hist = vec![0.0f64; side * side * DESC_BINS];
    for dy in -radius..=radius {
        let py = cy + dy;
        if py < 1 || py >= img.h as isize - 1 {
            continue;
        }
        for dx in -radius..=radius {
            let px = cx + dx;
            if px < 1 || px >= img.w as isize - 1 {
                continue;
            }
            let ox = px as f64 - x;
            let oy = py as f64 - y;
            let xr = (cos_t * ox + sin_t * oy) / hist_width;
            let yr = (-sin_t * ox + cos_t * oy) / hist_width;
            let rbin = yr + d / 2.0 - 0.5;
            let cbin = xr + d / 2.0 - 0.5;
            if !(rbin > -1.0 && rbin < d && cbin > -1.0 && cbin < d) {
                continue;
            }
            let (gx, gy) = gradient(img, px as usize, py as usize);
            let mag = (gx * gx + gy * gy).sqrt();
            let ang = (gy.atan2(gx) - orientation).rem_euclid(2.0 * PI);
            let obin = ang * DESC_BINS as f64 / (2.0 * PI);
            let weight = (-(xr * xr + yr * yr) / (0.5 * d * d)).exp();
            let v = mag * weight;

            let (r0, c0, o0) = (rbin.floor(), cbin.floor(), obin.floor());
            let (fr, fc, fo) = (rbin - r0, cbin - c0, obin - o0);
            for (ir, wr) in [(0, 1.0 - fr), (1, fr)] {
                let ri = (r0 as isize + 1 + ir) as usize;
                for (ic, wc) in [(0, 1.0 - fc), (1, fc)] {
                    let ci = (c0 as isize + 1 + ic) as usize;
                    for (io, wo) in [(0, 1.0 - fo), (1, fo)] {
                        let oi = (o0 as usize + io) % DESC_BINS;
                        hist[(ri * side + ci) * DESC_BINS + oi] += v * wr * wc * wo;
                    }
                }
            }
        }
    }
    let mut desc = Vec::with_capacity(DESCRIPTOR_LEN);
    for r in 1..=DESC_WIDTH {
        for c in 1..=DESC_WIDTH {
            let base = (r * side + c) * DESC_BINS;
            desc.extend_from_slice(&hist[base..base + DESC_BINS]);
        }
    }
    normalize_descriptor(&mut desc)?;
    for v in desc.iter_mut() {
        *v = v.min(DESC_CLAMP);
    }
    normalize_descriptor(&mut desc)?;
    Some(desc)
}

fn normalize_descriptor(desc: &mut [f64]) -> Option<()> {
    let norm = desc.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm < 1e-12 {
        return None;
    }
    desc.iter_mut().for_each(|v| *v /= norm);
    Some(())
}

/// Detects scale-space keypoints and computes their descriptors.
///
/// Output order is deterministic: octave, layer, row, column, orientation.
pub fn detect_keypoints(image: &Image, params: &SiftParams) -> Result<Vec<Keypoint>> {
    if image.channels() != 1 {
        return Err(Error::invalid("keypoint detection needs a single-channel image"));
    }
    if image.width().min(image.height()) < MIN_IMAGE_SIZE {
        return Err(Error::invalid(format!(
            "image {}x{} is smaller than the {MIN_IMAGE_SIZE} px minimum",
            image.width(),
            image.height()
        )));
    }
    if !image.is_finite() {
        return Err(Error::invalid("image contains non-finite values"));
    }
    if params.scales_per_octave == 0 || !(params.sigma > params.assumed_blur) {
        return Err(Error::invalid("invalid SIFT parameters"));
    }
    let s = params.scales_per_octave;
    let input = Plane {
        w: image.width(),
        h: image.height(),
        data: image.data().to_vec(),
    };
    let base = blur(&input, (params.sigma.powi(2) - params.assumed_blur.powi(2)).sqrt());
    let octaves = build_pyramid(base, params);
    let prefilter = 0.5 * params.contrast_threshold;

    let mut keypoints = Vec::new();
    for (o, octave) in octaves.iter().enumerate() {
        let (w, h) = (octave.dog[0].w, octave.dog[0].h);
        if w <= 2 * BORDER || h <= 2 * BORDER {
            continue;
        }
        let octave_scale = (1usize << o) as f64;
        for layer in 1..=s {
            for y in BORDER..h - BORDER {
                for x in BORDER..w - BORDER {
                    if octave.dog[layer].at(x, y).abs() <= prefilter || !is_extremum(&octave.dog, layer, x, y) {
                        continue;
                    }
                    let Some(r) = refine(&octave.dog, s, x, y, layer, params) else {
                        continue;
                    };
                    let xo = r.x as f64 + r.offset.x;
                    let yo = r.y as f64 + r.offset.y;
                    let sigma_oct = params.sigma * 2f64.powf((r.layer as f64 + r.offset.z) / s as f64);
                    let img = &octave.gauss[r.layer];
                    for orientation in dominant_orientations(img, xo, yo, sigma_oct) {
                        if let Some(descriptor) = descriptor(img, xo, yo, sigma_oct, orientation) {
                            keypoints.push(Keypoint {
                                x: xo * octave_scale,
                                y: yo * octave_scale,
                                scale: sigma_oct * octave_scale,
                                orientation,
                                descriptor,
                            });
                        }
                    }
                }
            }
        }
    }
    Ok(keypoints)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blob(w: usize, h: usize, cx: f64, cy: f64, sigma: f64) -> Image {
        Image::from_fn(w, h, |x, y| {
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp()
        })
    }

    #[test]
    fn uniform_image_has_no_keypoints() {
        let img = Image::from_fn(64, 64, |_, _| 0.5);
        assert!(detect_keypoints(&img, &SiftParams::default()).unwrap().is_empty());
    }

    #[test]
    fn too_small_image_is_rejected() {
        let img = Image::from_fn(31, 64, |_, _| 0.5);
        assert!(detect_keypoints(&img, &SiftParams::default()).is_err());
    }

    #[test]
    fn gaussian_blob_is_found_at_its_center() {
        let img = blob(128, 128, 64.0, 64.0, 4.0);
        let kps = detect_keypoints(&img, &SiftParams::default()).unwrap();
        assert!(!kps.is_empty());
        let near = kps
            .iter()
            .filter(|k| ((k.x - 64.0).powi(2) + (k.y - 64.0).powi(2)).sqrt() <= 2.0)
            .count();
        assert!(
            near >= 1,
            "no keypoint near blob center: {:?}",
            kps.iter().map(|k| (k.x, k.y)).collect::<Vec<_>>()
        );
    }

    #[test]
    fn descriptors_are_unit_norm_and_clamped() {
        let img = Image::from_fn(96, 96, |x, y| {
            let (x, y) = (x as f64, y as f64);
            0.5 + 0.25 * (x / 5.0).sin() * (y / 7.0).cos() + 0.2 * ((x + y) / 11.0).sin()
        });
        let kps = detect_keypoints(&img, &SiftParams::default()).unwrap();
        assert!(!kps.is_empty());
        for k in &kps {
            assert_eq!(k.descriptor.len(), DESCRIPTOR_LEN);
            let norm: f64 = k.descriptor.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-6);
            assert!(k.descriptor.iter().all(|v| *v >= 0.0));
            assert!(k.scale > 0.0);
        }
    }

    #[test]
    fn detection_is_deterministic() {
        let img = Image::from_fn(80, 80, |x, y| ((x * 7919 + y * 104729) % 97) as f64 / 97.0);
        let a = detect_keypoints(&img, &SiftParams::default()).unwrap();
        let b = detect_keypoints(&img, &SiftParams::default()).unwrap();
        assert_eq!(a, b);
    }
}
