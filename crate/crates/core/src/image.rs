//! Float images in `[0, 1]`, HWC layout, with 8-bit PNG I/O and the colour
//! helpers used by the hue oracles.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize) -> Self {
        Self { height, width, channels, data: vec![0.0; height * width * channels] }
    }

    pub fn filled(height: usize, width: usize, color: &[f32]) -> Self {
        let mut img = Self::new(height, width, color.len());
        for px in img.data.chunks_exact_mut(color.len()) {
            px.copy_from_slice(color);
        }
        img
    }

    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "image buffer of {} values cannot be {height}x{width}x{channels}",
                data.len()
            )));
        }
        Ok(Self { height, width, channels, data })
    }

    #[inline]
    pub fn pixel(&self, r: usize, c: usize) -> &[f32] {
        let i = (r * self.width + c) * self.channels;
        &self.data[i..i + self.channels]
    }

    #[inline]
    pub fn pixel_mut(&mut self, r: usize, c: usize) -> &mut [f32] {
        let i = (r * self.width + c) * self.channels;
        &mut self.data[i..i + self.channels]
    }

    pub fn set_pixel(&mut self, r: usize, c: usize, color: &[f32]) {
        self.pixel_mut(r, c).copy_from_slice(color);
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    /// Rounds every value to the nearest 8-bit level so PNG round-trips are exact.
    pub fn quantize(&mut self) {
        for v in &mut self.data {
            *v = quantize_u8(*v) as f32 / 255.0;
        }
    }

    pub fn clamp(&mut self, lo: f32, hi: f32) {
        for v in &mut self.data {
            *v = v.clamp(lo, hi);
        }
    }

    /// ITU-R BT.601 luma as a single-channel image.
    pub fn to_gray(&self) -> Image {
        match self.channels {
            1 => self.clone(),
            3 => {
                let data = self.data.chunks_exact(3).map(|p| luma(p)).collect();
                Image { height: self.height, width: self.width, channels: 1, data }
            }
            c => panic!("grayscale conversion undefined for {c} channels"),
        }
    }

    /// 2x2 average pooling (both sides must be even).
    pub fn avg_pool2(&self) -> Image {
        assert!(self.height % 2 == 0 && self.width % 2 == 0, "avg_pool2 needs even dimensions");
        let mut out = Image::new(self.height / 2, self.width / 2, self.channels);
        for r in 0..out.height {
            for c in 0..out.width {
                for ch in 0..self.channels {
                    let s = self.pixel(2 * r, 2 * c)[ch]
                        + self.pixel(2 * r, 2 * c + 1)[ch]
                        + self.pixel(2 * r + 1, 2 * c)[ch]
                        + self.pixel(2 * r + 1, 2 * c + 1)[ch];
                    out.pixel_mut(r, c)[ch] = s * 0.25;
                }
            }
        }
        out
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2(&self) -> Image {
        let mut out = Image::new(self.height * 2, self.width * 2, self.channels);
        for r in 0..out.height {
            for c in 0..out.width {
                let src = self.pixel(r / 2, c / 2).to_vec();
                out.set_pixel(r, c, &src);
            }
        }
        out
    }

    /// Channel-wise concatenation of two equally sized images.
    pub fn concat_channels(&self, other: &Image) -> Result<Image> {
        if self.height != other.height || self.width != other.width {
            return Err(Error::Shape(format!(
                "cannot stack {}x{} with {}x{}",
                self.height, self.width, other.height, other.width
            )));
        }
        let channels = self.channels + other.channels;
        let mut data = Vec::with_capacity(self.height * self.width * channels);
        for (a, b) in self.data.chunks_exact(self.channels).zip(other.data.chunks_exact(other.channels)) {
            data.extend_from_slice(a);
            data.extend_from_slice(b);
        }
        Ok(Image { height: self.height, width: self.width, channels, data })
    }

    pub fn max_abs_diff(&self, other: &Image) -> f32 {
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max)
    }

    /// Encodes as 8-bit RGB (or grayscale for one channel) PNG bytes.
    pub fn to_png_bytes(&self) -> Result<Vec<u8>> {
        let color = match self.channels {
            1 => png::ColorType::Grayscale,
            3 => png::ColorType::Rgb,
            c => return Err(Error::Shape(format!("cannot encode {c}-channel image as PNG"))),
        };
        let mut buf = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut buf, self.width as u32, self.height as u32);
            enc.set_color(color);
            enc.set_depth(png::BitDepth::Eight);
            let mut writer = enc.write_header().map_err(|e| Error::Shape(e.to_string()))?;
            let bytes: Vec<u8> = self.data.iter().map(|&v| quantize_u8(v)).collect();
            writer.write_image_data(&bytes).map_err(|e| Error::Shape(e.to_string()))?;
        }
        Ok(buf)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes = self.to_png_bytes().map_err(|e| Error::format(path, e.to_string()))?;
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        std::io::Write::write_all(&mut w, &bytes).map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn load_png(path: &Path) -> Result<Image> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let decoder = png::Decoder::new(std::io::BufReader::new(file));
        let mut reader = decoder.read_info().map_err(|e| Error::format(path, e.to_string()))?;
        let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
        let info = reader.next_frame(&mut buf).map_err(|e| Error::format(path, e.to_string()))?;
        if info.bit_depth != png::BitDepth::Eight {
            return Err(Error::format(path, "only 8-bit PNG is supported"));
        }
        let channels = match info.color_type {
            png::ColorType::Grayscale => 1,
            png::ColorType::Rgb => 3,
            other => return Err(Error::format(path, format!("unsupported PNG colour type {other:?}"))),
        };
        let data = buf[..info.buffer_size()].iter().map(|&b| b as f32 / 255.0).collect();
        Image::from_vec(info.height as usize, info.width as usize, channels, data)
    }
}

#[inline]
pub fn quantize_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[inline]
pub fn luma(rgb: &[f32]) -> f32 {
    0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2]
}

/// RGB in `[0,1]` to `(hue in [0,1), saturation, value)`.
pub fn rgb_to_hsv(rgb: &[f32]) -> (f32, f32, f32) {
    let (r, g, b) = (rgb[0], rgb[1], rgb[2]);
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let s = if max > 0.0 { delta / max } else { 0.0 };
    if delta <= 0.0 {
        return (0.0, s, max);
    }
    let h = if max == r {
        ((g - b) / delta).rem_euclid(6.0)
    } else if max == g {
        (b - r) / delta + 2.0
    } else {
        (r - g) / delta + 4.0
    };
    ((h / 6.0).rem_euclid(1.0), s, max)
}

pub fn hsv_to_rgb(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i as i32 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Circular distance between two hues in `[0,1)`.
pub fn hue_distance(a: f32, b: f32) -> f32 {
    let d = (a - b).rem_euclid(1.0);
    d.min(1.0 - d)
}

/// Dominant hue of the pixels selected by `mask` whose saturation reaches
/// `min_saturation`: the fullest of 36 hue bins, refined by the circular mean
/// of the pixels in that bin and its two neighbours. `None` when no pixel
/// qualifies.
pub fn dominant_hue(img: &Image, mask: &[bool], min_saturation: f32) -> Option<f32> {
    const BINS: usize = 36;
    let mut hues = Vec::new();
    for (i, px) in img.data.chunks_exact(img.channels).enumerate() {
        if !mask[i] {
            continue;
        }
        let (h, s, v) = rgb_to_hsv(px);
        if s >= min_saturation && v > 0.05 {
            hues.push(h);
        }
    }
    if hues.is_empty() {
        return None;
    }
    let mut counts = [0usize; BINS];
    for &h in &hues {
        counts[((h * BINS as f32) as usize).min(BINS - 1)] += 1;
    }
    let best = (0..BINS).max_by_key(|&b| (counts[b], std::cmp::Reverse(b))).unwrap();
    let center = (best as f32 + 0.5) / BINS as f32;
    let (mut sx, mut sy) = (0.0f64, 0.0f64);
    for &h in &hues {
        if hue_distance(h, center) <= 1.5 / BINS as f32 {
            let a = 2.0 * std::f64::consts::PI * h as f64;
            sx += a.cos();
            sy += a.sin();
        }
    }
    let mean = sy.atan2(sx) / (2.0 * std::f64::consts::PI);
    Some(mean.rem_euclid(1.0) as f32)
}
