use rayon::prelude::*;

use super::homography::Homography;
use crate::error::Result;
use crate::image::Image;

/// Resamples `image` into a `out_w x out_h` frame where `homography` maps
/// source coordinates to destination coordinates.
///
/// Each destination pixel is inverse-mapped and bilinearly sampled. Pixels
/// whose source position falls outside the image get value 0 and mask `false`.
pub fn warp_image(image: &Image, homography: &Homography, out_w: usize, out_h: usize) -> Result<(Image, Vec<bool>)> {
    let inv = homography.inverse()?;
    let c = image.channels();
    let max_x = (image.width() as f64) - 1.0;
    let max_y = (image.height() as f64) - 1.0;
    let rows: Vec<(Vec<f64>, Vec<bool>)> = (0..out_h)
        .into_par_iter()
        .map(|y| {
            let mut vals = vec![0.0; out_w * c];
            let mut mask = vec![false; out_w];
            for x in 0..out_w {
                let (sx, sy) = inv.apply((x as f64, y as f64));
                if sx >= 0.0 && sy >= 0.0 && sx <= max_x && sy <= max_y {
                    mask[x] = true;
                    for k in 0..c {
                        vals[x * c + k] = image.sample_bilinear(sx, sy, k);
                    }
                }
            }
            (vals, mask)
        })
        .collect();
    let mut data = Vec::with_capacity(out_w * out_h * c);
    let mut mask = Vec::with_capacity(out_w * out_h);
    for (v, m) in rows {
        data.extend(v);
        mask.extend(m);
    }
    Ok((Image::from_vec(out_w, out_h, c, data)?, mask))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn smooth(w: usize, h: usize) -> Image {
        Image::from_fn(w, h, |x, y| {
            let (x, y) = (x as f64, y as f64);
            0.5 + 0.3 * (x / 13.0).sin() * (y / 17.0).cos() + 0.1 * ((x - y) / 23.0).cos()
        })
    }

    #[test]
    fn identity_is_bit_exact() {
        let img = smooth(40, 30);
        let (out, mask) = warp_image(&img, &Homography::identity(), 40, 30).unwrap();
        assert_eq!(out, img);
        assert!(mask.iter().all(|m| *m));
    }

    #[test]
    fn translation_masks_left_stripe() {
        let img = smooth(100, 100);
        let (_, mask) = warp_image(&img, &Homography::translation(10.0, 0.0), 100, 100).unwrap();
        for y in 0..100 {
            for x in 0..100 {
                assert_eq!(mask[y * 100 + x], x >= 10, "({x},{y})");
            }
        }
    }

    #[test]
    fn round_trip_on_smooth_image() {
        let img = smooth(120, 100);
        let h = Homography::similarity(1.05, 0.05, 3.3, -2.7).unwrap();
        let (fwd, m1) = warp_image(&img, &h, 120, 100).unwrap();
        let (back, m2) = warp_image(&fwd, &h.inverse().unwrap(), 120, 100).unwrap();
        // Only compare pixels whose round trip stayed inside valid data with a margin.
        let mut max_err: f64 = 0.0;
        for y in 10..90 {
            for x in 10..110 {
                let i = y * 120 + x;
                if m2[i] {
                    let (fx, fy) = h.apply((x as f64, y as f64));
                    let (fx, fy) = (fx.round() as usize, fy.round() as usize);
                    if fx + 1 < 120 && fy + 1 < 100 && m1[fy * 120 + fx] && m1[(fy + 1) * 120 + fx + 1] {
                        max_err = max_err.max((back.get(x, y, 0) - img.get(x, y, 0)).abs());
                    }
                }
            }
        }
        assert!(max_err <= 0.02, "max round-trip error {max_err}");
    }

    #[test]
    fn singular_homography_is_rejected() {
        let mut h = Homography::identity();
        h.h = [1.0, 1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        assert!(warp_image(&smooth(10, 10), &h, 10, 10).is_err());
    }
}
