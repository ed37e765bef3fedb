//! Cross-camera registration of an exposure series into the UV camera frame.
//!
//! Only the unfiltered, VIS-covering frame of each camera is matched; the
//! resulting per-camera homography is then applied to every filtered frame of
//! that camera.

mod homography;
mod matching;
mod sift;
pub mod synth;
mod warp;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use homography::{
    estimate_homography_ransac, fit_dlt, ransac_homography, symmetric_error, Homography, Point, RansacFit, RansacParams,
};
pub use matching::{match_descriptors, MatchPair};
pub use sift::{detect_keypoints, Keypoint, SiftParams, DESCRIPTOR_LEN};
pub use warp::warp_image;

use crate::cube::{self, Camera, RawCapture, SpectralCube};
use crate::error::{Error, Result};
use crate::image::Image;

/// Reference camera every other camera is mapped into.
pub const REFERENCE_CAMERA: Camera = Camera::Uv;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistrationParams {
    pub sift: SiftParams,
    pub ratio_threshold: f64,
    pub ransac: RansacParams,
    /// Consensus size below which a camera counts as unregistered.
    pub min_inliers: usize,
}

impl Default for RegistrationParams {
    fn default() -> Self {
        Self {
            sift: SiftParams::default(),
            ratio_threshold: 0.75,
            ransac: RansacParams::default(),
            min_inliers: 10,
        }
    }
}

/// Unfiltered VIS-domain frame of each camera in one exposure series.
#[derive(Debug, Clone)]
pub struct VisFrames {
    pub series_id: String,
    pub uv: Image,
    pub visnir: Image,
    pub swir: Image,
}

impl VisFrames {
    pub fn get(&self, camera: Camera) -> &Image {
        match camera {
            Camera::Uv => &self.uv,
            Camera::VisNir => &self.visnir,
            Camera::Swir => &self.swir,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum CameraRegistration {
    Registered {
        /// Maps this camera's pixel coordinates into the reference frame.
        homography: Homography,
        keypoints: usize,
        matches: usize,
    },
    Failed {
        reason: String,
    },
}

impl CameraRegistration {
    pub fn homography(&self) -> Option<&Homography> {
        match self {
            CameraRegistration::Registered { homography, .. } => Some(homography),
            CameraRegistration::Failed { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegistrationResult {
    pub series_id: String,
    pub cameras: BTreeMap<Camera, CameraRegistration>,
}

#[derive(Serialize, Deserialize)]
struct CameraJson {
    #[serde(skip_serializing_if = "Option::is_none")]
    h: Option<[f64; 9]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    inliers: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    rms_px: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    failed: Option<String>,
}

impl RegistrationResult {
    pub fn homography(&self, camera: Camera) -> Result<&Homography> {
        match self.cameras.get(&camera) {
            Some(CameraRegistration::Registered { homography, .. }) => Ok(homography),
            Some(CameraRegistration::Failed { reason }) => {
                Err(Error::RegistrationFailed(format!("{}: {reason}", camera.name())))
            }
            None => Err(Error::invalid(format!("no registration for {}", camera.name()))),
        }
    }

    /// `{camera: {h: [9 numbers], inliers, rms_px}}`; failed cameras carry
    /// `{failed: reason}` instead.
    pub fn to_json(&self) -> serde_json::Value {
        let map: BTreeMap<String, CameraJson> = self
            .cameras
            .iter()
            .map(|(cam, reg)| {
                let key = serde_json::to_value(cam).unwrap().as_str().unwrap().to_string();
                let val = match reg {
                    CameraRegistration::Registered { homography, .. } => CameraJson {
                        h: Some(homography.h),
                        inliers: Some(homography.inlier_count),
                        rms_px: Some(homography.rms_reproj_px),
                        failed: None,
                    },
                    CameraRegistration::Failed { reason } => CameraJson {
                        h: None,
                        inliers: None,
                        rms_px: None,
                        failed: Some(reason.clone()),
                    },
                };
                (key, val)
            })
            .collect();
        serde_json::to_value(map).expect("registration json")
    }

    pub fn from_json(series_id: impl Into<String>, value: &serde_json::Value) -> Result<Self> {
        let map: BTreeMap<String, CameraJson> = serde_json::from_value(value.clone())?;
        let mut cameras = BTreeMap::new();
        for (key, cj) in map {
            let cam: Camera = serde_json::from_value(serde_json::Value::String(key))?;
            let reg = match (cj.h, cj.failed) {
                (Some(h), _) => {
                    let mut homography = Homography::from_matrix(h).map_err(|e| Error::format(e.to_string()))?;
                    homography.inlier_count = cj.inliers.unwrap_or(0);
                    homography.rms_reproj_px = cj.rms_px.unwrap_or(0.0);
                    CameraRegistration::Registered {
                        homography,
                        keypoints: 0,
                        matches: homography.inlier_count,
                    }
                }
                (None, Some(reason)) => CameraRegistration::Failed { reason },
                (None, None) => return Err(Error::format("camera entry has neither h nor failed")),
            };
            cameras.insert(cam, reg);
        }
        Ok(Self {
            series_id: series_id.into(),
            cameras,
        })
    }
}

fn vis_keypoints(frame: &Image, params: &SiftParams) -> Result<Vec<Keypoint>> {
    let gray = cube::normalize_image(&frame.to_gray())?;
    detect_keypoints(&gray, params)
}

/// Homography mapping `src` frame coordinates into `dst` frame coordinates.
pub fn register_pair(src: &[Keypoint], dst: &[Keypoint], params: &RegistrationParams) -> Result<(Homography, usize)> {
    let matches =
        match_descriptors(src, dst, params.ratio_threshold).map_err(|e| Error::RegistrationFailed(e.to_string()))?;
    let ps: Vec<Point> = src.iter().map(|k| (k.x, k.y)).collect();
    let pd: Vec<Point> = dst.iter().map(|k| (k.x, k.y)).collect();
    let h = estimate_homography_ransac(&matches, &ps, &pd, &params.ransac).map_err(|e| match e {
        Error::InvalidInput(msg) => Error::RegistrationFailed(msg),
        other => other,
    })?;
    if h.inlier_count < params.min_inliers {
        return Err(Error::RegistrationFailed(format!(
            "only {} inliers, need {}",
            h.inlier_count, params.min_inliers
        )));
    }
    Ok((h, matches.len()))
}

/// Estimates VIS/NIR→UV and SWIR→UV homographies from the unfiltered frames.
///
/// A camera that cannot be registered is reported as `Failed` without
/// affecting the others. Errors are returned only for malformed input.
pub fn register_series(frames: &VisFrames, params: &RegistrationParams) -> Result<RegistrationResult> {
    let reference = vis_keypoints(frames.get(REFERENCE_CAMERA), &params.sift)?;
    let mut cameras = BTreeMap::new();
    cameras.insert(
        REFERENCE_CAMERA,
        CameraRegistration::Registered {
            homography: Homography {
                inlier_count: reference.len(),
                ..Homography::identity()
            },
            keypoints: reference.len(),
            matches: reference.len(),
        },
    );
    for camera in [Camera::VisNir, Camera::Swir] {
        let kps = vis_keypoints(frames.get(camera), &params.sift)?;
        let reg = match register_pair(&kps, &reference, params) {
            Ok((homography, matches)) => CameraRegistration::Registered {
                homography,
                keypoints: kps.len(),
                matches,
            },
            Err(Error::RegistrationFailed(reason)) => CameraRegistration::Failed { reason },
            Err(other) => return Err(other),
        };
        cameras.insert(camera, reg);
    }
    Ok(RegistrationResult {
        series_id: frames.series_id.clone(),
        cameras,
    })
}

/// Warps every capture of the series into the reference frame with its
/// camera's homography and stacks the result into a 15-channel cube.
///
/// `captures` must contain each of the 13 filters exactly once.
pub fn warp_series_to_cube(
    captures: &[RawCapture],
    registration: &RegistrationResult,
    out_w: usize,
    out_h: usize,
) -> Result<SpectralCube> {
    let mut planes = Vec::with_capacity(cube::CHANNEL_COUNT);
    let mut masks = Vec::with_capacity(cube::CHANNEL_COUNT);
    for band in cube::canonical_band_table() {
        let mut found = captures.iter().filter(|c| c.band.filter_index == band.filter_index);
        let capture = found
            .next()
            .ok_or_else(|| Error::invalid(format!("series lacks filter {}", band.filter_index)))?;
        if found.next().is_some() {
            return Err(Error::invalid(format!("series has filter {} twice", band.filter_index)));
        }
        let h = registration.homography(band.camera)?;
        let (warped, mask) = warp_image(&capture.image, h, out_w, out_h)?;
        for c in 0..warped.channels() {
            planes.push(warped.channel(c));
            masks.push(mask.clone());
        }
    }
    cube::assemble_cube(&planes, cube::canonical_channel_meta(), &masks)
}

#[cfg(test)]
mod tests {
    use super::synth::TextureField;
    use super::*;

    #[test]
    fn identical_frames_register_to_identity() {
        let tex = TextureField::random(11, 256.0, 256.0, 250);
        let frame = tex.render(&Homography::identity(), 256, 256);
        let frames = VisFrames {
            series_id: "s".into(),
            uv: frame.clone(),
            visnir: frame.clone(),
            swir: frame,
        };
        let res = register_series(&frames, &RegistrationParams::default()).unwrap();
        for cam in Camera::ALL {
            let h = res.homography(cam).unwrap();
            for (a, b) in h.h.iter().zip(Homography::identity().h.iter()) {
                assert!((a - b).abs() < 1e-6, "{cam:?}: {:?}", h.h);
            }
        }
    }

    #[test]
    fn shifted_frame_recovers_translation() {
        let tex = TextureField::random(5, 256.0, 256.0, 250);
        let uv = tex.render(&Homography::identity(), 256, 256);
        // VIS/NIR pixel p sees reference point p + (8, 2).
        let shift = Homography::translation(8.0, 2.0);
        let frames = VisFrames {
            series_id: "s".into(),
            uv: uv.clone(),
            visnir: tex.render(&shift, 256, 256),
            swir: uv,
        };
        let res = register_series(&frames, &RegistrationParams::default()).unwrap();
        let h = res.homography(Camera::VisNir).unwrap();
        for p in [(0.0, 0.0), (255.0, 0.0), (0.0, 255.0), (255.0, 255.0), (128.0, 128.0)] {
            let a = h.apply(p);
            let b = shift.apply(p);
            assert!(((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt() < 0.5);
        }
    }

    #[test]
    fn textureless_swir_fails_alone() {
        let tex = TextureField::random(2, 128.0, 128.0, 120);
        let uv = tex.render(&Homography::identity(), 128, 128);
        let frames = VisFrames {
            series_id: "s".into(),
            uv: uv.clone(),
            visnir: uv,
            swir: Image::from_fn(128, 128, |_, _| 0.3),
        };
        let res = register_series(&frames, &RegistrationParams::default()).unwrap();
        assert!(res.homography(Camera::VisNir).is_ok());
        assert!(matches!(res.cameras[&Camera::Swir], CameraRegistration::Failed { .. }));
        assert!(matches!(
            res.homography(Camera::Swir),
            Err(Error::RegistrationFailed(_))
        ));
        let json = res.to_json();
        assert!(json["SWIR"]["failed"].is_string());
        assert_eq!(json["UV"]["h"][0], 1.0);
        let back = RegistrationResult::from_json("s", &json).unwrap();
        assert_eq!(
            back.homography(Camera::VisNir).unwrap().h,
            res.homography(Camera::VisNir).unwrap().h
        );
    }
}
