//! Projective transforms, normalized DLT and RANSAC.

use nalgebra::{DMatrix, Matrix3, Vector3};
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use super::matching::MatchPair;
use crate::error::{Error, Result};

pub type Point = (f64, f64);

const MIN_DET: f64 = 1e-12;

/// Row-major 3x3 projective map with `h[8] == 1` plus the provenance of its fit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Homography {
    pub h: [f64; 9],
    pub inlier_count: usize,
    pub rms_reproj_px: f64,
}

impl Homography {
    pub fn identity() -> Self {
        Self {
            h: [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
            inlier_count: 0,
            rms_reproj_px: 0.0,
        }
    }

    /// Normalizes `h` so the last entry is one and checks invertibility.
    pub fn from_matrix(h: [f64; 9]) -> Result<Self> {
        if h.iter().any(|v| !v.is_finite()) || h[8].abs() < MIN_DET {
            return Err(Error::invalid("homography is not normalizable"));
        }
        let s = h[8];
        let h = h.map(|v| v / s);
        let out = Self {
            h,
            inlier_count: 0,
            rms_reproj_px: 0.0,
        };
        if out.det().abs() <= MIN_DET {
            return Err(Error::invalid("homography is singular"));
        }
        Ok(out)
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Self::from_matrix([1.0, 0.0, tx, 0.0, 1.0, ty, 0.0, 0.0, 1.0]).expect("translation is invertible")
    }

    /// Rotation by `angle` and isotropic `scale` about the origin, then translation.
    pub fn similarity(scale: f64, angle: f64, tx: f64, ty: f64) -> Result<Self> {
        let (c, s) = (scale * angle.cos(), scale * angle.sin());
        Self::from_matrix([c, -s, tx, s, c, ty, 0.0, 0.0, 1.0])
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::from_row_slice(&self.h)
    }

    pub fn det(&self) -> f64 {
        self.matrix().determinant()
    }

    #[inline]
    pub fn apply(&self, p: Point) -> Point {
        let h = &self.h;
        let w = h[6] * p.0 + h[7] * p.1 + h[8];
        (
            (h[0] * p.0 + h[1] * p.1 + h[2]) / w,
            (h[3] * p.0 + h[4] * p.1 + h[5]) / w,
        )
    }

    pub fn inverse(&self) -> Result<Self> {
        let inv = self
            .matrix()
            .try_inverse()
            .ok_or_else(|| Error::invalid("homography is not invertible"))?;
        let mut h = [0.0; 9];
        for r in 0..3 {
            for c in 0..3 {
                h[r * 3 + c] = inv[(r, c)];
            }
        }
        Self::from_matrix(h)
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Homography) -> Result<Self> {
        let m = self.matrix() * other.matrix();
        let mut h = [0.0; 9];
        for r in 0..3 {
            for c in 0..3 {
                h[r * 3 + c] = m[(r, c)];
            }
        }
        Self::from_matrix(h)
    }
}

/// RMS of forward and backward transfer distance for one correspondence.
#[inline]
pub fn symmetric_error(h: &Homography, h_inv: &Homography, p: Point, q: Point) -> f64 {
    let fwd = h.apply(p);
    let bwd = h_inv.apply(q);
    let e = (fwd.0 - q.0).powi(2) + (fwd.1 - q.1).powi(2) + (bwd.0 - p.0).powi(2) + (bwd.1 - p.1).powi(2);
    let e = (0.5 * e).sqrt();
    if e.is_finite() {
        e
    } else {
        f64::INFINITY
    }
}

/// Similarity taking the centroid to the origin and the mean distance to √2.
fn normalizing_transform(pts: &[Point]) -> Matrix3<f64> {
    let n = pts.len() as f64;
    let cx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let cy = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let mean = pts
        .iter()
        .map(|p| ((p.0 - cx).powi(2) + (p.1 - cy).powi(2)).sqrt())
        .sum::<f64>()
        / n;
    let s = if mean > 0.0 {
        std::f64::consts::SQRT_2 / mean
    } else {
        1.0
    };
    Matrix3::new(s, 0.0, -s * cx, 0.0, s, -s * cy, 0.0, 0.0, 1.0)
}

fn transform(t: &Matrix3<f64>, p: Point) -> Point {
    let v = t * Vector3::new(p.0, p.1, 1.0);
    (v.x / v.z, v.y / v.z)
}

/// Least-squares direct linear transform with Hartley normalization.
pub fn fit_dlt(src: &[Point], dst: &[Point]) -> Result<Homography> {
    if src.len() != dst.len() {
        return Err(Error::invalid("point lists differ in length"));
    }
    if src.len() < 4 {
        return Err(Error::invalid("homography needs at least 4 correspondences"));
    }
    let ts = normalizing_transform(src);
    let td = normalizing_transform(dst);
    let rows = (2 * src.len()).max(9);
    let mut a = DMatrix::<f64>::zeros(rows, 9);
    for (i, (p, q)) in src.iter().zip(dst).enumerate() {
        let (x, y) = transform(&ts, *p);
        let (u, v) = transform(&td, *q);
        let r = 2 * i;
        let row0 = [-x, -y, -1.0, 0.0, 0.0, 0.0, u * x, u * y, u];
        let row1 = [0.0, 0.0, 0.0, -x, -y, -1.0, v * x, v * y, v];
        for c in 0..9 {
            a[(r, c)] = row0[c];
            a[(r + 1, c)] = row1[c];
        }
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t.ok_or_else(|| Error::invalid("SVD failed"))?;
    let (min_idx, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .expect("nine singular values");
    let hn = Matrix3::from_fn(|r, c| v_t[(min_idx, r * 3 + c)]);
    let td_inv = td
        .try_inverse()
        .ok_or_else(|| Error::invalid("degenerate destination points"))?;
    let m = td_inv * hn * ts;
    let mut h = [0.0; 9];
    for r in 0..3 {
        for c in 0..3 {
            h[r * 3 + c] = m[(r, c)];
        }
    }
    Homography::from_matrix(h)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RansacParams {
    pub thresh_px: f64,
    pub max_iters: usize,
    pub seed: u64,
    /// Probability of having drawn at least one all-inlier sample, used to stop early.
    pub confidence: f64,
}

impl Default for RansacParams {
    fn default() -> Self {
        Self {
            thresh_px: 3.0,
            max_iters: 2000,
            seed: 0,
            confidence: 0.999,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RansacFit {
    pub homography: Homography,
    /// Indices into the correspondence list whose symmetric error under
    /// `homography` is below the threshold.
    pub inliers: Vec<usize>,
}

fn score(h: &Homography, src: &[Point], dst: &[Point], thresh: f64) -> Option<Vec<usize>> {
    let h_inv = h.inverse().ok()?;
    Some(
        (0..src.len())
            .filter(|&i| symmetric_error(h, &h_inv, src[i], dst[i]) < thresh)
            .collect(),
    )
}

fn rms_error(h: &Homography, src: &[Point], dst: &[Point], inliers: &[usize]) -> f64 {
    let Ok(h_inv) = h.inverse() else {
        return f64::INFINITY;
    };
    if inliers.is_empty() {
        return 0.0;
    }
    let sum: f64 = inliers
        .iter()
        .map(|&i| symmetric_error(h, &h_inv, src[i], dst[i]).powi(2))
        .sum();
    (sum / inliers.len() as f64).sqrt()
}

fn has_collinear_triple(pts: &[Point; 4]) -> bool {
    const TRIPLES: [[usize; 3]; 4] = [[0, 1, 2], [0, 1, 3], [0, 2, 3], [1, 2, 3]];
    TRIPLES.iter().any(|t| {
        let (a, b, c) = (pts[t[0]], pts[t[1]], pts[t[2]]);
        let (ux, uy) = (b.0 - a.0, b.1 - a.1);
        let (vx, vy) = (c.0 - a.0, c.1 - a.1);
        let cross = (ux * vy - uy * vx).abs();
        cross <= 1e-6 * ((ux * ux + uy * uy).sqrt() * (vx * vx + vy * vy).sqrt()) + 1e-12
    })
}

/// Robust homography over point correspondences `src[i] -> dst[i]`.
///
/// Minimal 4-point hypotheses vote by symmetric transfer error; the largest
/// consensus set is refit by least squares until it stops growing. The
/// returned inlier set is exactly the consensus of the returned matrix.
pub fn ransac_homography(src: &[Point], dst: &[Point], params: &RansacParams) -> Result<RansacFit> {
    if src.len() != dst.len() {
        return Err(Error::invalid("point lists differ in length"));
    }
    let n = src.len();
    if n < 4 {
        return Err(Error::invalid(format!("RANSAC needs at least 4 matches, got {n}")));
    }
    if !(params.thresh_px > 0.0) {
        return Err(Error::invalid("RANSAC threshold must be positive"));
    }
    let mut rng = crate::rng::seeded(params.seed);
    let mut best: Option<(Homography, Vec<usize>)> = None;
    let mut needed = params.max_iters;
    let mut iter = 0;
    while iter < needed.min(params.max_iters) {
        iter += 1;
        let idx = sample(&mut rng, n, 4);
        let s4: [Point; 4] = std::array::from_fn(|k| src[idx.index(k)]);
        let d4: [Point; 4] = std::array::from_fn(|k| dst[idx.index(k)]);
        if has_collinear_triple(&s4) || has_collinear_triple(&d4) {
            continue;
        }
        let Ok(h) = fit_dlt(&s4, &d4) else { continue };
        let Some(inliers) = score(&h, src, dst, params.thresh_px) else {
            continue;
        };
        if best.as_ref().is_none_or(|(_, b)| inliers.len() > b.len()) {
            let w = inliers.len() as f64 / n as f64;
            let denom = (1.0 - w.powi(4)).ln();
            if denom < 0.0 {
                let k = ((1.0 - params.confidence).ln() / denom).ceil();
                if k.is_finite() {
                    needed = (k as usize).max(1);
                }
            }
            best = Some((h, inliers));
        }
    }
    let (mut h, mut inliers) = best.ok_or_else(|| Error::RegistrationFailed("no non-degenerate sample".into()))?;
    if inliers.len() < 4 {
        return Err(Error::RegistrationFailed(format!(
            "largest consensus set has {} points",
            inliers.len()
        )));
    }
    for _ in 0..10 {
        let s: Vec<Point> = inliers.iter().map(|&i| src[i]).collect();
        let d: Vec<Point> = inliers.iter().map(|&i| dst[i]).collect();
        let Ok(refit) = fit_dlt(&s, &d) else { break };
        let Some(refit_inliers) = score(&refit, src, dst, params.thresh_px) else {
            break;
        };
        if refit_inliers.len() < inliers.len() {
            break;
        }
        let converged = refit_inliers == inliers;
        h = refit;
        inliers = refit_inliers;
        if converged {
            break;
        }
    }
    h.inlier_count = inliers.len();
    h.rms_reproj_px = rms_error(&h, src, dst, &inliers);
    Ok(RansacFit { homography: h, inliers })
}

/// Robust homography from keypoint matches, mapping source into destination
/// coordinates.
pub fn estimate_homography_ransac(
    matches: &[MatchPair],
    points_src: &[Point],
    points_dst: &[Point],
    params: &RansacParams,
) -> Result<Homography> {
    if matches.len() < 4 {
        return Err(Error::invalid(format!(
            "RANSAC needs at least 4 matches, got {}",
            matches.len()
        )));
    }
    let mut src = Vec::with_capacity(matches.len());
    let mut dst = Vec::with_capacity(matches.len());
    for m in matches {
        let (Some(p), Some(q)) = (points_src.get(m.src_idx), points_dst.get(m.dst_idx)) else {
            return Err(Error::invalid("match index out of range"));
        };
        src.push(*p);
        dst.push(*q);
    }
    Ok(ransac_homography(&src, &dst, params)?.homography)
}

#[cfg(test)]
mod tests {
    use super::*;
    fn grid(n: usize) -> Vec<Point> {
        (0..n)
            .map(|i| {
                (
                    (i % 10) as f64 * 37.0 + 11.0,
                    (i / 10) as f64 * 29.0 + 5.0 + (i % 3) as f64,
                )
            })
            .collect()
    }

    #[test]
    fn four_exact_points_recover_translation() {
        let t = Homography::translation(5.0, -3.0);
        let src = vec![(0.0, 0.0), (100.0, 0.0), (100.0, 80.0), (0.0, 80.0)];
        let dst: Vec<Point> = src.iter().map(|p| t.apply(*p)).collect();
        let h = fit_dlt(&src, &dst).unwrap();
        for (a, b) in h.h.iter().zip(t.h.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
        let matches: Vec<MatchPair> = (0..4)
            .map(|i| MatchPair {
                src_idx: i,
                dst_idx: i,
                distance: 0.0,
                ratio: 0.0,
            })
            .collect();
        let r = estimate_homography_ransac(&matches, &src, &dst, &RansacParams::default()).unwrap();
        for (a, b) in r.h.iter().zip(t.h.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
        assert_eq!(r.inlier_count, 4);
    }

    #[test]
    fn identical_sets_give_identity() {
        let pts = grid(30);
        let fit = ransac_homography(&pts, &pts, &RansacParams::default()).unwrap();
        for (a, b) in fit.homography.h.iter().zip(Homography::identity().h.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
        assert!(fit.homography.rms_reproj_px < 1e-9);
        assert_eq!(fit.inliers.len(), 30);
    }

    #[test]
    fn too_few_matches() {
        let pts = grid(3);
        assert!(matches!(
            ransac_homography(&pts, &pts, &RansacParams::default()),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn degenerate_points_are_registration_failure() {
        let src: Vec<Point> = (0..12).map(|i| (i as f64 * 10.0, 5.0)).collect();
        let dst: Vec<Point> = (0..12).map(|i| (i as f64 * 10.0 + 3.0, 7.0)).collect();
        assert!(matches!(
            ransac_homography(&src, &dst, &RansacParams::default()),
            Err(Error::RegistrationFailed(_))
        ));
    }

    #[test]
    fn inverse_and_compose() {
        let a = Homography::similarity(1.1, 0.2, 4.0, -7.0).unwrap();
        let id = a.compose(&a.inverse().unwrap()).unwrap();
        for (x, y) in id.h.iter().zip(Homography::identity().h.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!(Homography::from_matrix([0.0; 9]).is_err());
        assert!(Homography::from_matrix([1.0, 2.0, 0.0, 2.0, 4.0, 0.0, 0.0, 0.0, 1.0]).is_err());
    }
}
