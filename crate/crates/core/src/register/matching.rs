use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::sift::Keypoint;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchPair {
    pub src_idx: usize,
    pub dst_idx: usize,
    pub distance: f64,
    /// Best over second-best distance; 0 when the best match is exact.
    pub ratio: f64,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index and squared distance of the two nearest neighbors of `q` in `set`.
/// Ties resolve to the lower index.
fn two_nearest(q: &[f64], set: &[Keypoint]) -> (usize, f64, f64) {
    let mut best = (usize::MAX, f64::INFINITY);
    let mut second = f64::INFINITY;
    for (j, k) in set.iter().enumerate() {
        let d = sq_dist(q, &k.descriptor);
        if d < best.1 {
            second = best.1;
            best = (j, d);
        } else if d < second {
            second = d;
        }
    }
    (best.0, best.1, second)
}

/// Exact 2-nearest-neighbor descriptor matching with Lowe's ratio test and a
/// symmetric cross-check. Output is sorted by `src_idx`.
pub fn match_descriptors(src: &[Keypoint], dst: &[Keypoint], ratio_threshold: f64) -> Result<Vec<MatchPair>> {
    if src.is_empty() {
        return Err(Error::invalid("no source keypoints to match"));
    }
    if dst.len() < 2 {
        return Err(Error::invalid("ratio test needs at least two destination keypoints"));
    }
    if !(ratio_threshold > 0.0 && ratio_threshold < 1.0) {
        return Err(Error::invalid("ratio threshold must lie in (0, 1)"));
    }
    let backward: Vec<usize> = dst.par_iter().map(|k| two_nearest(&k.descriptor, src).0).collect();
    let matches = src
        .par_iter()
        .enumerate()
        .filter_map(|(i, k)| {
            let (j, d1, d2) = two_nearest(&k.descriptor, dst);
            let (d1, d2) = (d1.sqrt(), d2.sqrt());
            let ratio = if d2 > 0.0 { d1 / d2 } else { 1.0 };
            (ratio < ratio_threshold && backward[j] == i).then_some(MatchPair {
                src_idx: i,
                dst_idx: j,
                distance: d1,
                ratio,
            })
        })
        .collect();
    Ok(matches)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn kp(descriptor: Vec<f64>) -> Keypoint {
        Keypoint {
            x: 0.0,
            y: 0.0,
            scale: 1.0,
            orientation: 0.0,
            descriptor,
        }
    }

    fn unit(i: usize, n: usize) -> Vec<f64> {
        let mut v = vec![0.0; n];
        v[i] = 1.0;
        v
    }

    #[test]
    fn identical_lists_match_twins() {
        let mut rng = crate::rng::seeded(3);
        let kps: Vec<Keypoint> = (0..50)
            .map(|_| {
                let v: Vec<f64> = (0..128).map(|_| rng.random::<f64>()).collect();
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                kp(v.into_iter().map(|x| x / n).collect())
            })
            .collect();
        let m = match_descriptors(&kps, &kps, 0.75).unwrap();
        assert_eq!(m.len(), 50);
        for p in m {
            assert_eq!(p.src_idx, p.dst_idx);
            assert_eq!(p.distance, 0.0);
        }
    }

    #[test]
    fn orthonormal_pairs_have_zero_ratio() {
        let a = vec![kp(unit(0, 4)), kp(unit(1, 4))];
        let m = match_descriptors(&a, &a, 0.75).unwrap();
        assert_eq!(m.len(), 2);
        assert!(m.iter().all(|p| p.ratio == 0.0 && p.src_idx == p.dst_idx));
    }

    #[test]
    fn equidistant_is_rejected() {
        let src = vec![kp(vec![0.5f64.sqrt(), 0.5f64.sqrt(), 0.0])];
        let dst = vec![kp(unit(0, 3)), kp(unit(1, 3))];
        assert!(match_descriptors(&src, &dst, 0.75).unwrap().is_empty());
    }

    #[test]
    fn too_few_destination_points() {
        let a = vec![kp(unit(0, 2))];
        assert!(match_descriptors(&a, &a, 0.75).is_err());
        assert!(match_descriptors(&[], &[kp(unit(0, 2)), kp(unit(1, 2))], 0.75).is_err());
    }
}
