//! Float RGB images with an alpha channel and optional object mask, plus 8-bit
//! PNG and binary PPM I/O.

use std::fs;
use std::io::BufWriter;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    pub width: usize,
    pub height: usize,
    /// Row-major `H×W×3`.
    pub rgb: Vec<f64>,
    /// Row-major `H×W`, `1 - final transmittance` for rendered images.
    pub alpha: Vec<f64>,
    pub mask: Option<Vec<bool>>,
}

impl ImageBuffer {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            rgb: vec![0.0; width * height * 3],
            alpha: vec![0.0; width * height],
            mask: None,
        }
    }

    pub fn filled(width: usize, height: usize, color: [f64; 3]) -> Self {
        let mut img = Self::new(width, height);
        for px in img.rgb.chunks_exact_mut(3) {
            px.copy_from_slice(&color);
        }
        img
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.rgb[i], self.rgb[i + 1], self.rgb[i + 2]]
    }

    pub fn same_size(&self, other: &ImageBuffer) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn with_mask(mut self, mask: Vec<bool>) -> Self {
        assert_eq!(mask.len(), self.pixel_count());
        self.mask = Some(mask);
        self
    }

    /// Object mask derived from alpha (`alpha > threshold`).
    pub fn alpha_mask(&self, threshold: f64) -> Vec<bool> {
        self.alpha.iter().map(|&a| a > threshold).collect()
    }

    /// Rec.601 luma per pixel.
    pub fn luma(&self) -> Vec<f64> {
        self.rgb
            .chunks_exact(3)
            .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
            .collect()
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.rgb.iter().map(|&v| quantize(v)).collect()
    }

    pub fn from_rgb8(width: usize, height: usize, data: &[u8]) -> Self {
        assert_eq!(data.len(), width * height * 3);
        let mut img = Self::new(width, height);
        img.rgb = data.iter().map(|&v| v as f64 / 255.0).collect();
        img.alpha = vec![1.0; width * height];
        img
    }
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn write_png(path: &Path, width: usize, height: usize, color: png::ColorType, data: &[u8]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc
        .write_header()
        .map_err(|e| Error::format(path, e.to_string()))?;
    writer
        .write_image_data(data)
        .map_err(|e| Error::format(path, e.to_string()))?;
    writer.finish().map_err(|e| Error::format(path, e.to_string()))
}

fn read_png(path: &Path) -> Result<(usize, usize, png::ColorType, Vec<u8>)> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(std::io::BufReader::new(file));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::format(path, e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::format(path, "image too large"))?;
    let mut buf = vec![0; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::format(path, e.to_string()))?;
    buf.truncate(info.buffer_size());
    Ok((info.width as usize, info.height as usize, info.color_type, buf))
}

pub fn save_png(path: impl AsRef<Path>, img: &ImageBuffer) -> Result<()> {
    write_png(path.as_ref(), img.width, img.height, png::ColorType::Rgb, &img.to_rgb8())
}

pub fn load_png(path: impl AsRef<Path>) -> Result<ImageBuffer> {
    let path = path.as_ref();
    let (w, h, color, buf) = read_png(path)?;
    let rgb: Vec<u8> = match color {
        png::ColorType::Rgb => buf,
        png::ColorType::Rgba => buf.chunks_exact(4).flat_map(|p| [p[0], p[1], p[2]]).collect(),
        png::ColorType::Grayscale => buf.iter().flat_map(|&v| [v, v, v]).collect(),
        png::ColorType::GrayscaleAlpha => buf.chunks_exact(2).flat_map(|p| [p[0], p[0], p[0]]).collect(),
        other => return Err(Error::format(path, format!("unsupported color type {other:?}"))),
    };
    Ok(ImageBuffer::from_rgb8(w, h, &rgb))
}

pub fn save_mask_png(path: impl AsRef<Path>, width: usize, height: usize, mask: &[bool]) -> Result<()> {
    let data: Vec<u8> = mask.iter().map(|&m| if m { 255 } else { 0 }).collect();
    write_png(path.as_ref(), width, height, png::ColorType::Grayscale, &data)
}

pub fn load_mask_png(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<bool>)> {
    let path = path.as_ref();
    let (w, h, color, buf) = read_png(path)?;
    let channels = match color {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        other => return Err(Error::format(path, format!("unsupported color type {other:?}"))),
    };
    Ok((w, h, buf.chunks_exact(channels).map(|p| p[0] >= 128).collect()))
}

/// Binary PPM (`P6`, maxval 255).
pub fn save_ppm(path: impl AsRef<Path>, img: &ImageBuffer) -> Result<()> {
    let path = path.as_ref();
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.to_rgb8());
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn load_ppm(path: impl AsRef<Path>) -> Result<ImageBuffer> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::format(path, msg.to_string());
    // header: magic, width, height, maxval separated by whitespace, then one whitespace byte
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated PPM header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("bad header"))?);
    }
    if fields[0] != "P6" {
        return Err(bad("not a binary PPM"));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (w, h, maxval) = (parse(fields[1])?, parse(fields[2])?, parse(fields[3])?);
    if maxval != 255 {
        return Err(bad("only maxval 255 is supported"));
    }
    let data = &bytes[pos + 1..];
    if data.len() != w * h * 3 {
        return Err(bad("pixel data size mismatch"));
    }
    Ok(ImageBuffer::from_rgb8(w, h, data))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient_image() -> ImageBuffer {
        let mut img = ImageBuffer::new(7, 5);
        for (i, v) in img.rgb.iter_mut().enumerate() {
            *v = ((i * 37) % 256) as f64 / 255.0;
        }
        img
    }

    #[test]
    fn png_and_ppm_round_trip_8bit_values() {
        let dir = tempfile::tempdir().unwrap();
        let img = gradient_image();
        save_png(dir.path().join("a.png"), &img).unwrap();
        save_ppm(dir.path().join("a.ppm"), &img).unwrap();
        let a = load_png(dir.path().join("a.png")).unwrap();
        let b = load_ppm(dir.path().join("a.ppm")).unwrap();
        assert_eq!(a.to_rgb8(), img.to_rgb8());
        assert_eq!(b.rgb, a.rgb);
    }

    #[test]
    fn mask_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mask: Vec<bool> = (0..35).map(|i| i % 3 == 0).collect();
        save_mask_png(dir.path().join("m.png"), 7, 5, &mask).unwrap();
        assert_eq!(load_mask_png(dir.path().join("m.png")).unwrap(), (7, 5, mask));
    }

    #[test]
    fn malformed_ppm_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.ppm");
        fs::write(&p, b"P6\n2 2\n255\n\x00\x01").unwrap();
        assert!(matches!(load_ppm(&p), Err(Error::Format { .. })));
    }
}
