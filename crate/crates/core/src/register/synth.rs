//! Analytic textures for registration oracles.
//!
//! A [`TextureField`] is a continuous intensity function, so a camera related
//! to the reference by any homography can be rendered exactly instead of by
//! resampling another raster.

use rand::Rng;

use super::homography::Homography;
use crate::image::Image;
use crate::register::VisFrames;

const CELL: f64 = 32.0;
const SUPPORT: f64 = 4.0;

#[derive(Debug, Clone, Copy)]
struct Blob {
    x: f64,
    y: f64,
    sigma: f64,
    amp: f64,
}

/// Sum of random Gaussian blobs over a rectangular domain, bucketed on a grid
/// for fast evaluation.
#[derive(Debug, Clone)]
pub struct TextureField {
    blobs: Vec<Blob>,
    origin: (f64, f64),
    cols: usize,
    rows: usize,
    cells: Vec<Vec<u32>>,
}

impl TextureField {
    /// `count` blobs scattered over `[-pad, w+pad] x [-pad, h+pad]` where `pad`
    /// leaves room for cameras that see beyond the reference frame.
    pub fn random(seed: u64, w: f64, h: f64, count: usize) -> Self {
        let mut rng = crate::rng::seeded(seed);
        let pad = 0.25 * w.max(h);
        let area_scale = ((w + 2.0 * pad) * (h + 2.0 * pad)) / (w * h);
        let n = (count as f64 * area_scale).round() as usize;
        let blobs = (0..n)
            .map(|_| Blob {
                x: rng.random_range(-pad..w + pad),
                y: rng.random_range(-pad..h + pad),
                sigma: rng.random_range(2.5..8.0),
                amp: rng.random_range(0.25..1.0) * if rng.random::<bool>() { 1.0 } else { -1.0 },
            })
            .collect();
        Self::from_blobs(
            blobs,
            (-pad - CELL, -pad - CELL),
            w + 2.0 * pad + 2.0 * CELL,
            h + 2.0 * pad + 2.0 * CELL,
        )
    }

    fn from_blobs(blobs: Vec<Blob>, origin: (f64, f64), w: f64, h: f64) -> Self {
        let cols = (w / CELL).ceil() as usize + 1;
        let rows = (h / CELL).ceil() as usize + 1;
        let mut cells = vec![Vec::new(); cols * rows];
        for (i, b) in blobs.iter().enumerate() {
            let r = SUPPORT * b.sigma;
            let c0 = (((b.x - r - origin.0) / CELL).floor().max(0.0)) as usize;
            let c1 = (((b.x + r - origin.0) / CELL).floor().max(0.0) as usize).min(cols - 1);
            let r0 = (((b.y - r - origin.1) / CELL).floor().max(0.0)) as usize;
            let r1 = (((b.y + r - origin.1) / CELL).floor().max(0.0) as usize).min(rows - 1);
            for row in r0..=r1 {
                for col in c0..=c1.max(c0) {
                    if col < cols {
                        cells[row * cols + col].push(i as u32);
                    }
                }
            }
        }
        Self {
            blobs,
            origin,
            cols,
            rows,
            cells,
        }
    }

    /// Intensity at a continuous reference-frame position; roughly in `[0, 1]`.
    pub fn value(&self, x: f64, y: f64) -> f64 {
        let col = ((x - self.origin.0) / CELL).floor();
        let row = ((y - self.origin.1) / CELL).floor();
        let mut v = 0.5;
        if col >= 0.0 && row >= 0.0 && (col as usize) < self.cols && (row as usize) < self.rows {
            for &i in &self.cells[row as usize * self.cols + col as usize] {
                let b = &self.blobs[i as usize];
                let d2 = (x - b.x).powi(2) + (y - b.y).powi(2);
                let s2 = b.sigma * b.sigma;
                if d2 < SUPPORT * SUPPORT * s2 {
                    v += 0.35 * b.amp * (-d2 / (2.0 * s2)).exp();
                }
            }
        }
        v
    }

    /// Renders the view of a camera whose pixel `p` sees reference point
    /// `cam_to_ref(p)`.
    pub fn render(&self, cam_to_ref: &Homography, w: usize, h: usize) -> Image {
        Image::from_fn(w, h, |x, y| {
            let (rx, ry) = cam_to_ref.apply((x as f64, y as f64));
            self.value(rx, ry)
        })
    }
}

/// Similarity about the frame center: scale and rotate by `angle`, then
/// translate by `(tx, ty)`.
pub fn centered_similarity(size: usize, scale: f64, angle: f64, tx: f64, ty: f64) -> Homography {
    let c = (size as f64 - 1.0) / 2.0;
    let to_origin = Homography::translation(-c, -c);
    let back = Homography::translation(c + tx, c + ty);
    let rs = Homography::similarity(scale, angle, 0.0, 0.0).expect("nonzero scale");
    back.compose(&rs)
        .and_then(|m| m.compose(&to_origin))
        .expect("invertible")
}

/// Ground truth for a synthetic VIS triple.
#[derive(Debug, Clone)]
pub struct SyntheticTriple {
    pub frames: VisFrames,
    /// VIS/NIR pixel → UV pixel.
    pub visnir_to_uv: Homography,
    /// SWIR pixel → UV pixel.
    pub swir_to_uv: Homography,
}

/// Renders a UV/VIS-NIR/SWIR VIS-domain triple of `size x size` pixels where
/// the two non-reference cameras are related to UV by random similarities
/// (translation up to `max_shift` px, rotation up to `max_angle` rad, scale
/// within `[1/max_scale, max_scale]`). Each camera gets its own intensity
/// response so matching must survive photometric differences.
pub fn synthetic_vis_triple(seed: u64, size: usize, max_shift: f64, max_angle: f64, max_scale: f64) -> SyntheticTriple {
    let tex = TextureField::random(seed, size as f64, size as f64, size * size / 250);
    let mut rng = crate::rng::substream(seed, 1);
    let draw = |rng: &mut crate::rng::SeededRng| {
        let s = rng.random_range(max_scale.recip().ln()..=max_scale.ln()).exp();
        let a = rng.random_range(-max_angle..=max_angle);
        let tx = rng.random_range(-max_shift..=max_shift);
        let ty = rng.random_range(-max_shift..=max_shift);
        centered_similarity(size, s, a, tx, ty)
    };
    let visnir_to_uv = draw(&mut rng);
    let swir_to_uv = draw(&mut rng);
    let uv = tex.render(&Homography::identity(), size, size);
    let mut visnir = tex.render(&visnir_to_uv, size, size);
    let mut swir = tex.render(&swir_to_uv, size, size);
    visnir
        .data_mut()
        .iter_mut()
        .for_each(|v| *v = 200.0 * v.clamp(0.0, 1.5));
    swir.data_mut()
        .iter_mut()
        .for_each(|v| *v = 0.05 + 0.8 * v.clamp(0.0, 1.5).powf(1.2));
    SyntheticTriple {
        frames: VisFrames {
            series_id: format!("synthetic-{seed}"),
            uv,
            visnir,
            swir,
        },
        visnir_to_uv,
        swir_to_uv,
    }
}
