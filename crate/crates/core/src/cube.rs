//! Multispectral band model, raw capture containers, normalization,
//! exposure control and the registered 15-channel [`SpectralCube`].
//!
//! Three cameras (UV, VIS/NIR, SWIR) each shoot a series of filtered frames.
//! Twelve filtered captures are single channel; the unfiltered VIS/NIR capture
//! is RGB, which yields 15 channels per registered pixel.

use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

pub const CHANNEL_COUNT: usize = 15;
pub const BAND_COUNT: usize = 13;

/// Shortest and longest wavelength any camera in the rig can see.
pub const SPECTRAL_RANGE_NM: (f64, f64) = (190.0, 1700.0);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Camera {
    Uv,
    VisNir,
    Swir,
}

impl Camera {
    pub const ALL: [Camera; 3] = [Camera::Uv, Camera::VisNir, Camera::Swir];

    pub fn name(self) -> &'static str {
        match self {
            Camera::Uv => "UV",
            Camera::VisNir => "VIS/NIR",
            Camera::Swir => "SWIR",
        }
    }

    /// Filter index of the camera's unfiltered, VIS-covering capture.
    pub fn unfiltered_index(self) -> u8 {
        match self {
            Camera::Uv => 0,
            Camera::VisNir => 3,
            Camera::Swir => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandSpec {
    pub filter_index: u8,
    pub camera: Camera,
    pub passbands_nm: Vec<(f64, f64)>,
    pub exposure_s: f64,
    pub channel_count: u8,
}

impl BandSpec {
    fn new(filter_index: u8, camera: Camera, passbands_nm: &[(f64, f64)], exposure_s: f64) -> Self {
        Self {
            filter_index,
            camera,
            passbands_nm: passbands_nm.to_vec(),
            exposure_s,
            channel_count: if filter_index == 3 { 3 } else { 1 },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.passbands_nm.is_empty() || self.passbands_nm.len() > 2 {
            return Err(Error::invalid(format!(
                "filter {} must have one or two passbands",
                self.filter_index
            )));
        }
        for &(lo, hi) in &self.passbands_nm {
            if !(lo < hi && lo >= SPECTRAL_RANGE_NM.0 && hi <= SPECTRAL_RANGE_NM.1) {
                return Err(Error::invalid(format!(
                    "filter {} has invalid passband {lo}-{hi} nm",
                    self.filter_index
                )));
            }
        }
        if self.channel_count != 1 && self.channel_count != 3 {
            return Err(Error::invalid("channel_count must be 1 or 3"));
        }
        if !(self.exposure_s > 0.0) {
            return Err(Error::invalid("exposure must be positive"));
        }
        Ok(())
    }
}

/// The rig's 13 filter configurations with their lab exposure times.
pub fn canonical_band_table() -> Vec<BandSpec> {
    use Camera::*;
    vec![
        BandSpec::new(0, Uv, &[(190.0, 1100.0)], 0.3),
        BandSpec::new(1, Uv, &[(290.0, 365.0)], 5.0),
        BandSpec::new(2, Uv, &[(375.0, 425.0), (745.0, 970.0)], 1.0),
        BandSpec::new(3, VisNir, &[(400.0, 1000.0)], 0.01),
        BandSpec::new(4, VisNir, &[(730.0, 755.0)], 0.05),
        BandSpec::new(5, VisNir, &[(830.0, 865.0)], 0.1),
        BandSpec::new(6, VisNir, &[(845.0, 930.0)], 0.1),
        BandSpec::new(7, VisNir, &[(928.0, 955.0)], 0.4),
        BandSpec::new(8, Swir, &[(400.0, 1700.0)], 0.04),
        BandSpec::new(9, Swir, &[(930.0, 1030.0)], 0.4),
        BandSpec::new(10, Swir, &[(1290.0, 1310.0)], 1.0),
        BandSpec::new(11, Swir, &[(1440.0, 1460.0)], 1.5),
        BandSpec::new(12, Swir, &[(1485.0, 1645.0)], 0.4),
    ]
}

/// Tab-separated rendering of the band table followed by the channel total.
/// The camera cell is left empty on rows that continue the previous camera.
pub fn format_band_table(table: &[BandSpec]) -> String {
    let mut out = String::from("Camera\tSpectrum[nm]\tExposure time[s]\tIndex\tChannels\n");
    let mut previous = None;
    for band in table {
        let camera = if previous == Some(band.camera) {
            ""
        } else {
            band.camera.name()
        };
        previous = Some(band.camera);
        let spectrum = band
            .passbands_nm
            .iter()
            .map(|(lo, hi)| format!("{lo} - {hi}"))
            .collect::<Vec<_>>()
            .join(" ");
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}",
            camera, spectrum, band.exposure_s, band.filter_index, band.channel_count
        );
    }
    let total: u32 = table.iter().map(|b| b.channel_count as u32).sum();
    let _ = writeln!(out, "Total channels\t{total}");
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RgbComponent {
    R,
    G,
    B,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelMeta {
    pub filter_index: u8,
    pub camera: Camera,
    pub passbands_nm: Vec<(f64, f64)>,
    pub rgb_component: Option<RgbComponent>,
}

/// Per-channel metadata in cube order: filters 0..12 with filter 3 expanded
/// into R, G, B.
pub fn canonical_channel_meta() -> Vec<ChannelMeta> {
    let mut meta = Vec::with_capacity(CHANNEL_COUNT);
    for band in canonical_band_table() {
        if band.channel_count == 3 {
            for comp in [RgbComponent::R, RgbComponent::G, RgbComponent::B] {
                meta.push(ChannelMeta {
                    filter_index: band.filter_index,
                    camera: band.camera,
                    passbands_nm: band.passbands_nm.clone(),
                    rgb_component: Some(comp),
                });
            }
        } else {
            meta.push(ChannelMeta {
                filter_index: band.filter_index,
                camera: band.camera,
                passbands_nm: band.passbands_nm.clone(),
                rgb_component: None,
            });
        }
    }
    meta
}

/// Cube channel indices belonging to one camera.
pub fn camera_channels(camera: Camera) -> Vec<usize> {
    canonical_channel_meta()
        .iter()
        .enumerate()
        .filter(|(_, m)| m.camera == camera)
        .map(|(i, _)| i)
        .collect()
}

/// Cube channel indices of the RGB (visible) capture.
pub fn visible_channels() -> Vec<usize> {
    canonical_channel_meta()
        .iter()
        .enumerate()
        .filter(|(_, m)| m.rgb_component.is_some())
        .map(|(i, _)| i)
        .collect()
}

#[derive(Debug, Clone)]
pub struct RawCapture {
    pub image: Image,
    pub band: BandSpec,
    pub exposure_used_s: f64,
    pub timestamp: f64,
    pub series_id: String,
}

impl RawCapture {
    pub fn new(
        image: Image,
        band: BandSpec,
        exposure_used_s: f64,
        timestamp: f64,
        series_id: impl Into<String>,
    ) -> Result<Self> {
        if image.channels() != band.channel_count as usize {
            return Err(Error::invalid(format!(
                "filter {} expects {} channels, capture has {}",
                band.filter_index,
                band.channel_count,
                image.channels()
            )));
        }
        if image.data().iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::invalid("capture intensities must be finite and non-negative"));
        }
        Ok(Self {
            image,
            band,
            exposure_used_s,
            timestamp,
            series_id: series_id.into(),
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CaptureSidecar {
    filter_index: u8,
    exposure_s: f64,
    #[serde(default)]
    timestamp: f64,
    #[serde(default)]
    series_id: String,
}

/// Loads a raw capture from a PNG plus a JSON sidecar at `<png>.json` naming
/// the filter index and exposure used.
pub fn load_raw_capture(png_path: &Path) -> Result<RawCapture> {
    let sidecar_path = png_path.with_extension("json");
    let sidecar: CaptureSidecar = serde_json::from_reader(std::fs::File::open(&sidecar_path)?)?;
    let band = canonical_band_table()
        .into_iter()
        .find(|b| b.filter_index == sidecar.filter_index)
        .ok_or_else(|| Error::format(format!("unknown filter index {}", sidecar.filter_index)))?;
    let image = crate::image::read_png(std::fs::File::open(png_path)?)?;
    RawCapture::new(image, band, sidecar.exposure_s, sidecar.timestamp, sidecar.series_id)
        .map_err(|e| Error::format(e.to_string()))
}

/// Per-channel min-max scaling to `[0, 1]`; constant channels become zero.
pub fn normalize_image(image: &Image) -> Result<Image> {
    if !image.is_finite() {
        return Err(Error::invalid("image contains non-finite values"));
    }
    let c = image.channels();
    let mut lo = vec![f64::INFINITY; c];
    let mut hi = vec![f64::NEG_INFINITY; c];
    for px in image.data().chunks_exact(c) {
        for (k, &v) in px.iter().enumerate() {
            lo[k] = lo[k].min(v);
            hi[k] = hi[k].max(v);
        }
    }
    let mut out = image.clone();
    for px in out.data_mut().chunks_exact_mut(c) {
        for (k, v) in px.iter_mut().enumerate() {
            let span = hi[k] - lo[k];
            *v = if span > 0.0 { (*v - lo[k]) / span } else { 0.0 };
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl Rect {
    pub fn new(x: usize, y: usize, w: usize, h: usize) -> Self {
        Self { x, y, w, h }
    }

    pub fn area(&self) -> usize {
        self.w * self.h
    }

    pub fn fits_in(&self, width: usize, height: usize) -> bool {
        self.x + self.w <= width && self.y + self.h <= height
    }
}

/// Crops `roi` out of the capture and bilinearly resamples it to
/// `target_w x target_h` using pixel-center alignment.
pub fn crop_and_rescale(capture: &Image, roi: Rect, target_w: usize, target_h: usize) -> Result<Image> {
    if roi.w == 0 || roi.h == 0 {
        return Err(Error::invalid("roi has zero area"));
    }
    if !roi.fits_in(capture.width(), capture.height()) {
        return Err(Error::invalid(format!(
            "roi {roi:?} exceeds {}x{} image",
            capture.width(),
            capture.height()
        )));
    }
    if target_w == 0 || target_h == 0 {
        return Err(Error::invalid("target dimensions must be positive"));
    }
    let sx = roi.w as f64 / target_w as f64;
    let sy = roi.h as f64 / target_h as f64;
    let max_x = (roi.w - 1) as f64;
    let max_y = (roi.h - 1) as f64;
    let c = capture.channels();
    let mut out = Image::new(target_w, target_h, c);
    for ty in 0..target_h {
        let ly = ((ty as f64 + 0.5) * sy - 0.5).clamp(0.0, max_y);
        for tx in 0..target_w {
            let lx = ((tx as f64 + 0.5) * sx - 0.5).clamp(0.0, max_x);
            for k in 0..c {
                let v = capture.sample_bilinear(roi.x as f64 + lx, roi.y as f64 + ly, k);
                out.set(tx, ty, k, v);
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExposureStrategy {
    MeanBrightness,
    Bracketing,
    CalibrationPatch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExposureConfig {
    pub strategy: ExposureStrategy,
    /// Desired mean brightness as a fraction of full scale.
    pub target_mean: f64,
    pub bracket_factors: Vec<f64>,
    /// Region holding the calibration object, for `CalibrationPatch`.
    pub patch_roi: Option<Rect>,
    pub bounds_s: (f64, f64),
}

impl ExposureConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.bounds_s.0 < self.bounds_s.1) || self.bounds_s.0 < 0.0 {
            return Err(Error::invalid("exposure bounds must satisfy 0 <= min < max"));
        }
        if !(self.target_mean > 0.0 && self.target_mean < 1.0) {
            return Err(Error::invalid("target_mean must lie in (0, 1)"));
        }
        if self.bracket_factors.iter().any(|f| !(*f > 0.0)) || self.bracket_factors.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::invalid(
                "bracket factors must be positive and strictly increasing",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ExposureDecision {
    Single(f64),
    Bracket(Vec<f64>),
}

/// Next exposure time(s) for a filter given recently observed brightness.
///
/// `recent_means` are fractions of full scale, measured over the whole frame
/// or over the calibration patch depending on the strategy; they are averaged.
pub fn adapt_exposure(
    config: &ExposureConfig,
    recent_means: &[f64],
    current_exposure_s: f64,
) -> Result<ExposureDecision> {
    config.validate()?;
    let (lo, hi) = config.bounds_s;
    if !(current_exposure_s >= lo && current_exposure_s <= hi) {
        return Err(Error::invalid(format!(
            "current exposure {current_exposure_s} s outside bounds [{lo}, {hi}]"
        )));
    }
    match config.strategy {
        ExposureStrategy::Bracketing => Ok(ExposureDecision::Bracket(
            config
                .bracket_factors
                .iter()
                .map(|f| (current_exposure_s * f).clamp(lo, hi))
                .collect(),
        )),
        ExposureStrategy::MeanBrightness | ExposureStrategy::CalibrationPatch => {
            if recent_means.is_empty() {
                return Err(Error::invalid("no brightness observations"));
            }
            let observed = recent_means.iter().sum::<f64>() / recent_means.len() as f64;
            if !observed.is_finite() || observed < 0.0 {
                return Err(Error::invalid("observed brightness must be finite and non-negative"));
            }
            if observed == 0.0 {
                return Ok(ExposureDecision::Single(hi));
            }
            Ok(ExposureDecision::Single(
                (current_exposure_s * (config.target_mean / observed)).clamp(lo, hi),
            ))
        }
    }
}

/// Mean intensity of `roi` as a fraction of `full_scale`, averaged over
/// channels.
pub fn patch_mean(image: &Image, roi: Rect, full_scale: f64) -> Result<f64> {
    if roi.area() == 0 || !roi.fits_in(image.width(), image.height()) {
        return Err(Error::invalid("patch roi invalid for image"));
    }
    let mut sum = 0.0;
    for y in roi.y..roi.y + roi.h {
        for x in roi.x..roi.x + roi.w {
            for c in 0..image.channels() {
                sum += image.get(x, y, c);
            }
        }
    }
    Ok(sum / (roi.area() * image.channels()) as f64 / full_scale)
}

/// Merges an exposure bracket by taking, per pixel and channel, the sample
/// closest to mid-scale, rescaled to the exposure of the first bracket.
pub fn merge_brackets(captures: &[(f64, Image)], full_scale: f64) -> Result<Image> {
    let (ref_exposure, first) = captures.first().ok_or_else(|| Error::invalid("empty bracket"))?;
    for (_, img) in captures {
        if img.width() != first.width() || img.height() != first.height() || img.channels() != first.channels() {
            return Err(Error::invalid("bracket images differ in shape"));
        }
    }
    let mid = full_scale / 2.0;
    let mut out = first.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let (exposure, best) = captures
            .iter()
            .map(|(e, img)| (*e, img.data()[i]))
            .min_by(|a, b| (a.1 - mid).abs().total_cmp(&(b.1 - mid).abs()))
            .expect("non-empty bracket");
        *v = best * ref_exposure / exposure;
    }
    Ok(out)
}

/// Registered 15-channel image. Planes are stored plane-major, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralCube {
    width: usize,
    height: usize,
    planes: Vec<Vec<f64>>,
    channel_meta: Vec<ChannelMeta>,
    mask: Vec<bool>,
    normalized: bool,
}

impl SpectralCube {
    pub fn new(
        width: usize,
        height: usize,
        planes: Vec<Vec<f64>>,
        channel_meta: Vec<ChannelMeta>,
        mask: Vec<bool>,
        normalized: bool,
    ) -> Result<Self> {
        if planes.len() != CHANNEL_COUNT {
            return Err(Error::invalid(format!(
                "cube needs {CHANNEL_COUNT} planes, got {}",
                planes.len()
            )));
        }
        if channel_meta.len() != CHANNEL_COUNT {
            return Err(Error::invalid("channel_meta must have 15 entries"));
        }
        let n = width * height;
        if planes.iter().any(|p| p.len() != n) || mask.len() != n {
            return Err(Error::invalid("plane or mask size does not match cube dimensions"));
        }
        if planes.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::invalid("cube values must be finite"));
        }
        if normalized {
            let out_of_range = planes
                .iter()
                .any(|p| p.iter().zip(&mask).any(|(v, m)| *m && !(0.0..=1.0).contains(v)));
            if out_of_range {
                return Err(Error::invalid("normalized cube has valid values outside [0, 1]"));
            }
        }
        Ok(Self {
            width,
            height,
            planes,
            channel_meta,
            mask,
            normalized,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        &self.planes[c]
    }

    pub fn channel_meta(&self) -> &[ChannelMeta] {
        &self.channel_meta
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn is_valid(&self, x: usize, y: usize) -> bool {
        self.mask[y * self.width + x]
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; CHANNEL_COUNT] {
        let i = y * self.width + x;
        std::array::from_fn(|c| self.planes[c][i])
    }

    /// Writes the MSC1 binary format.
    pub fn write_msc1(&self, mut w: impl Write) -> Result<()> {
        let header = CubeHeader {
            width: self.width,
            height: self.height,
            channels: CHANNEL_COUNT,
            normalized: self.normalized,
            channel_meta: self.channel_meta.clone(),
        };
        let header = serde_json::to_vec(&header)?;
        w.write_all(MSC1_MAGIC)?;
        w.write_all(&(header.len() as u32).to_le_bytes())?;
        w.write_all(&header)?;
        let mut buf = Vec::with_capacity(self.width * self.height * 4);
        for plane in &self.planes {
            buf.clear();
            for v in plane {
                buf.extend_from_slice(&(*v as f32).to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        let mask: Vec<u8> = self.mask.iter().map(|&m| m as u8).collect();
        w.write_all(&mask)?;
        Ok(())
    }

    /// Reads the MSC1 binary format.
    pub fn read_msc1(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(truncated)?;
        if &magic != MSC1_MAGIC {
            return Err(Error::format("not an MSC1 cube (bad magic)"));
        }
        let mut len = [0u8; 4];
        r.read_exact(&mut len).map_err(truncated)?;
        let mut header = vec![0u8; u32::from_le_bytes(len) as usize];
        r.read_exact(&mut header).map_err(truncated)?;
        let header: CubeHeader = serde_json::from_slice(&header)?;
        if header.channels != CHANNEL_COUNT {
            return Err(Error::format(format!(
                "expected 15 channels, header says {}",
                header.channels
            )));
        }
        let n = header.width * header.height;
        let mut bytes = vec![0u8; n * 4];
        let mut planes = Vec::with_capacity(CHANNEL_COUNT);
        for _ in 0..CHANNEL_COUNT {
            r.read_exact(&mut bytes).map_err(truncated)?;
            planes.push(
                bytes
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
                    .collect(),
            );
        }
        let mut mask = vec![0u8; n];
        r.read_exact(&mut mask).map_err(truncated)?;
        let mask = mask
            .into_iter()
            .map(|b| match b {
                0 => Ok(false),
                1 => Ok(true),
                other => Err(Error::format(format!("mask byte {other} is not 0/1"))),
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(
            header.width,
            header.height,
            planes,
            header.channel_meta,
            mask,
            header.normalized,
        )
        .map_err(|e| Error::format(e.to_string()))
    }
}

const MSC1_MAGIC: &[u8; 4] = b"MSC1";

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::format("MSC1 file truncated")
    } else {
        Error::Io(e)
    }
}

#[derive(Serialize, Deserialize)]
struct CubeHeader {
    width: usize,
    height: usize,
    channels: usize,
    normalized: bool,
    channel_meta: Vec<ChannelMeta>,
}

/// Stacks 15 registered single-channel planes into a cube whose validity
/// mask is the AND of the per-plane masks.
pub fn assemble_cube(planes: &[Image], channel_meta: Vec<ChannelMeta>, masks: &[Vec<bool>]) -> Result<SpectralCube> {
    if planes.len() != CHANNEL_COUNT {
        return Err(Error::invalid(format!("expected 15 planes, got {}", planes.len())));
    }
    if masks.len() != CHANNEL_COUNT {
        return Err(Error::invalid(format!("expected 15 masks, got {}", masks.len())));
    }
    let (w, h) = (planes[0].width(), planes[0].height());
    if planes
        .iter()
        .any(|p| p.width() != w || p.height() != h || p.channels() != 1)
    {
        return Err(Error::invalid(
            "planes must be single-channel with identical dimensions",
        ));
    }
    if masks.iter().any(|m| m.len() != w * h) {
        return Err(Error::invalid("mask dimensions do not match planes"));
    }
    let mask = (0..w * h).map(|i| masks.iter().all(|m| m[i])).collect();
    let planes = planes.iter().map(|p| p.data().to_vec()).collect();
    SpectralCube::new(w, h, planes, channel_meta, mask, false)
}
