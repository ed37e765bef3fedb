//! Minimal floating-point raster used by every image-handling module.
//!
//! Pixels are stored interleaved (`HWC`, row-major). Coordinates follow the
//! pixel-center convention: pixel `(x, y)` sits at continuous position
//! `(x, y)`, so bilinear sampling at integer coordinates returns stored values
//! exactly.

use std::io::{Read, Write};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    pub fn from_vec(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 {
            return Err(Error::invalid("image must have at least one channel"));
        }
        if data.len() != width * height * channels {
            return Err(Error::invalid(format!(
                "image buffer has {} values, expected {}x{}x{}",
                data.len(),
                width,
                height,
                channels
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    /// Builds a single-channel image by evaluating `f(x, y)` at every pixel.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            channels: 1,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    /// Copies channel `c` out as a single-channel image.
    pub fn channel(&self, c: usize) -> Image {
        let data = self.data.iter().skip(c).step_by(self.channels).copied().collect();
        Image {
            width: self.width,
            height: self.height,
            channels: 1,
            data,
        }
    }

    /// Mean over RGB (or the only channel) per pixel.
    pub fn to_gray(&self) -> Image {
        if self.channels == 1 {
            return self.clone();
        }
        let n = self.channels as f64;
        let data = self
            .data
            .chunks_exact(self.channels)
            .map(|px| px.iter().sum::<f64>() / n)
            .collect();
        Image {
            width: self.width,
            height: self.height,
            channels: 1,
            data,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Bilinear sample of channel `c` at a continuous position.
    ///
    /// Callers must keep `(x, y)` inside `[0, w-1] x [0, h-1]`; the far
    /// neighbor is clamped so the last row/column samples exactly.
    #[inline]
    pub fn sample_bilinear(&self, x: f64, y: f64, c: usize) -> f64 {
        let x0 = x.floor();
        let y0 = y.floor();
        let fx = x - x0;
        let fy = y - y0;
        let x0 = (x0 as usize).min(self.width - 1);
        let y0 = (y0 as usize).min(self.height - 1);
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let top = self.get(x0, y0, c) * (1.0 - fx) + self.get(x1, y0, c) * fx;
        let bot = self.get(x0, y1, c) * (1.0 - fx) + self.get(x1, y1, c) * fx;
        top * (1.0 - fy) + bot * fy
    }
}

/// Decodes an 8- or 16-bit grayscale or RGB PNG into native-scale intensities
/// (0..255 or 0..65535).
pub fn read_png(mut reader: impl Read) -> Result<Image> {
    let mut bytes = Vec::new();
    reader.read_to_end(&mut bytes)?;
    let mut decoder = png::Decoder::new(std::io::Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder.read_info().map_err(|e| Error::format(format!("png: {e}")))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::format("png: image too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::format(format!("png: {e}")))?;
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::Rgb => 3,
        other => return Err(Error::format(format!("png: unsupported color type {other:?}"))),
    };
    let (w, h) = (info.width as usize, info.height as usize);
    let bytes = &buf[..info.buffer_size()];
    let data: Vec<f64> = match info.bit_depth {
        png::BitDepth::Eight => bytes.iter().map(|&b| b as f64).collect(),
        png::BitDepth::Sixteen => bytes
            .chunks_exact(2)
            .map(|p| u16::from_be_bytes([p[0], p[1]]) as f64)
            .collect(),
        other => return Err(Error::format(format!("png: unsupported bit depth {other:?}"))),
    };
    Image::from_vec(w, h, channels, data)
}

/// Encodes a single-channel image as 16-bit grayscale, mapping `[0, 1]` to the
/// full range and clamping outside it.
pub fn write_png_gray16(image: &Image, writer: impl Write) -> Result<()> {
    if image.channels() != 1 {
        return Err(Error::invalid("gray16 png needs a single-channel image"));
    }
    let mut encoder = png::Encoder::new(writer, image.width() as u32, image.height() as u32);
    encoder.set_color(png::ColorType::Grayscale);
    encoder.set_depth(png::BitDepth::Sixteen);
    let mut w = encoder.write_header().map_err(|e| Error::format(format!("png: {e}")))?;
    let bytes: Vec<u8> = image
        .data()
        .iter()
        .flat_map(|v| ((v.clamp(0.0, 1.0) * 65535.0).round() as u16).to_be_bytes())
        .collect();
    w.write_image_data(&bytes)
        .map_err(|e| Error::format(format!("png: {e}")))?;
    Ok(())
}

/// Encodes one byte per pixel as an indexed-color PNG with the given RGB
/// palette.
pub fn write_png_indexed(
    width: usize,
    height: usize,
    indices: &[u8],
    palette: &[[u8; 3]],
    writer: impl Write,
) -> Result<()> {
    if indices.len() != width * height {
        return Err(Error::invalid("index buffer does not match dimensions"));
    }
    let mut encoder = png::Encoder::new(writer, width as u32, height as u32);
    encoder.set_color(png::ColorType::Indexed);
    encoder.set_depth(png::BitDepth::Eight);
    encoder.set_palette(palette.iter().flatten().copied().collect::<Vec<u8>>());
    let mut w = encoder.write_header().map_err(|e| Error::format(format!("png: {e}")))?;
    w.write_image_data(indices)
        .map_err(|e| Error::format(format!("png: {e}")))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bilinear_at_integer_coords_is_exact() {
        let img = Image::from_fn(5, 4, |x, y| (x * 7 + y * 3) as f64 * 0.1);
        for y in 0..4 {
            for x in 0..5 {
                assert_eq!(img.sample_bilinear(x as f64, y as f64, 0), img.get(x, y, 0));
            }
        }
    }

    #[test]
    fn bilinear_center_of_2x2() {
        let img = Image::from_vec(2, 2, 1, vec![1.0, 3.0, 5.0, 7.0]).unwrap();
        assert_eq!(img.sample_bilinear(0.5, 0.5, 0), 4.0);
    }

    #[test]
    fn png_gray16_round_trip() {
        let img = Image::from_fn(7, 3, |x, y| (x + y) as f64 / 8.0);
        let mut buf = Vec::new();
        write_png_gray16(&img, &mut buf).unwrap();
        let back = read_png(&buf[..]).unwrap();
        assert_eq!(back.channels(), 1);
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a * 65535.0 - b).abs() <= 0.5);
        }
    }

    #[test]
    fn channel_extraction() {
        let img = Image::from_vec(2, 1, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(img.channel(1).data(), &[2.0, 5.0]);
        assert_eq!(img.to_gray().data(), &[2.0, 5.0]);
    }
}
