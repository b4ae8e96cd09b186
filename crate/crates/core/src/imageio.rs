//! Image containers and the on-disk formats: 8-bit RGB PNG, 16-bit and
//! 1-bit grayscale PNG, and little-endian PFM for float maps.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("png encode: {0}")]
    PngEncode(#[from] png::EncodingError),
    #[error("png decode: {0}")]
    PngDecode(#[from] png::DecodingError),
    #[error("malformed {format} file: {reason}")]
    Malformed { format: &'static str, reason: String },
    #[error("image dimensions differ: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(u32, u32, u32, u32),
}

/// Linear RGB image with channels in `[0, 1]`, stored row-major from the top row.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    pub width: u32,
    pub height: u32,
    pub pixels: Vec<[f32; 3]>,
}

impl RgbImage {
    pub fn new(width: u32, height: u32) -> Self {
        Self::filled(width, height, [0.0; 3])
    }

    pub fn filled(width: u32, height: u32, color: [f32; 3]) -> Self {
        Self {
            width,
            height,
            pixels: vec![color; width as usize * height as usize],
        }
    }

    pub fn from_pixels(width: u32, height: u32, pixels: Vec<[f32; 3]>) -> Self {
        assert_eq!(pixels.len(), width as usize * height as usize);
        Self { width, height, pixels }
    }

    pub fn get(&self, x: u32, y: u32) -> [f32; 3] {
        self.pixels[(y * self.width + x) as usize]
    }

    pub fn set(&mut self, x: u32, y: u32, c: [f32; 3]) {
        self.pixels[(y * self.width + x) as usize] = c;
    }

    pub fn same_size(&self, other: &RgbImage) -> Result<(), ImageError> {
        if self.width != other.width || self.height != other.height {
            return Err(ImageError::DimensionMismatch(
                self.width,
                self.height,
                other.width,
                other.height,
            ));
        }
        Ok(())
    }

    /// Rec. 601 luma.
    pub fn luma(&self) -> Vec<f64> {
        self.pixels
            .iter()
            .map(|p| 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64)
            .collect()
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.pixels
            .iter()
            .flat_map(|p| p.map(|c| (c.clamp(0.0, 1.0) * 255.0).round() as u8))
            .collect()
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<(), ImageError> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_png(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn write_png<W: Write>(&self, w: W) -> Result<(), ImageError> {
        let mut enc = png::Encoder::new(w, self.width, self.height);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header()?;
        writer.write_image_data(&self.to_rgb8())?;
        writer.finish()?;
        Ok(())
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self, ImageError> {
        let dec = png::Decoder::new(BufReader::new(File::open(path)?));
        let mut reader = dec.read_info()?;
        let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
        let info = reader.next_frame(&mut buf)?;
        if info.bit_depth != png::BitDepth::Eight {
            return Err(ImageError::Malformed {
                format: "png",
                reason: format!("expected 8-bit samples, got {:?}", info.bit_depth),
            });
        }
        let channels = match info.color_type {
            png::ColorType::Rgb => 3,
            png::ColorType::Rgba => 4,
            png::ColorType::Grayscale => 1,
            other => {
                return Err(ImageError::Malformed {
                    format: "png",
                    reason: format!("unsupported color type {other:?}"),
                })
            }
        };
        let pixels = buf[..info.buffer_size()]
            .chunks_exact(channels)
            .map(|c| {
                if channels == 1 {
                    [c[0] as f32 / 255.0; 3]
                } else {
                    [c[0] as f32 / 255.0, c[1] as f32 / 255.0, c[2] as f32 / 255.0]
                }
            })
            .collect();
        Ok(Self::from_pixels(info.width, info.height, pixels))
    }

    /// Round-trips the image through 8-bit quantisation.
    pub fn quantized(&self) -> Self {
        let pixels = self
            .pixels
            .iter()
            .map(|p| p.map(|c| (c.clamp(0.0, 1.0) * 255.0).round() / 255.0))
            .collect();
        Self::from_pixels(self.width, self.height, pixels)
    }
}

pub fn write_gray16_png<W: Write>(w: W, width: u32, height: u32, data: &[u16]) -> Result<(), ImageError> {
    let mut enc = png::Encoder::new(w, width, height);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Sixteen);
    let mut writer = enc.write_header()?;
    let bytes: Vec<u8> = data.iter().flat_map(|v| v.to_be_bytes()).collect();
    writer.write_image_data(&bytes)?;
    writer.finish()?;
    Ok(())
}

pub fn read_gray16_png<R: BufRead + std::io::Seek>(r: R) -> Result<(u32, u32, Vec<u16>), ImageError> {
    let mut reader = png::Decoder::new(r).read_info()?;
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
    let info = reader.next_frame(&mut buf)?;
    if info.bit_depth != png::BitDepth::Sixteen || info.color_type != png::ColorType::Grayscale {
        return Err(ImageError::Malformed {
            format: "png",
            reason: "expected 16-bit grayscale".into(),
        });
    }
    let data = buf[..info.buffer_size()]
        .chunks_exact(2)
        .map(|c| u16::from_be_bytes([c[0], c[1]]))
        .collect();
    Ok((info.width, info.height, data))
}

/// 1-bit grayscale PNG; `true` is written as white.
pub fn write_mask_png<W: Write>(w: W, width: u32, height: u32, mask: &[bool]) -> Result<(), ImageError> {
    let mut enc = png::Encoder::new(w, width, height);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::One);
    let mut writer = enc.write_header()?;
    let stride = (width as usize).div_ceil(8);
    let mut bytes = vec![0u8; stride * height as usize];
    for y in 0..height as usize {
        for x in 0..width as usize {
            if mask[y * width as usize + x] {
                bytes[y * stride + x / 8] |= 0x80 >> (x % 8);
            }
        }
    }
    writer.write_image_data(&bytes)?;
    writer.finish()?;
    Ok(())
}

pub fn read_mask_png<R: BufRead + std::io::Seek>(r: R) -> Result<(u32, u32, Vec<bool>), ImageError> {
    let mut reader = png::Decoder::new(r).read_info()?;
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
    let info = reader.next_frame(&mut buf)?;
    if info.bit_depth != png::BitDepth::One || info.color_type != png::ColorType::Grayscale {
        return Err(ImageError::Malformed {
            format: "png",
            reason: "expected 1-bit grayscale".into(),
        });
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let stride = info.line_size;
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            out.push(buf[y * stride + x / 8] & (0x80 >> (x % 8)) != 0);
        }
    }
    Ok((info.width, info.height, out))
}

/// Writes a PFM with 1 (`Pf`) or 3 (`PF`) channels. Rows are given top to
/// bottom and stored bottom to top as the format requires; the negative
/// scale marks little-endian data.
pub fn write_pfm<W: Write>(mut w: W, width: u32, height: u32, channels: usize, data: &[f32]) -> Result<(), ImageError> {
    assert!(channels == 1 || channels == 3);
    assert_eq!(data.len(), width as usize * height as usize * channels);
    let tag = if channels == 1 { "Pf" } else { "PF" };
    write!(w, "{tag}\n{width} {height}\n-1.0\n")?;
    let row = width as usize * channels;
    let mut bytes = Vec::with_capacity(data.len() * 4);
    for y in (0..height as usize).rev() {
        for v in &data[y * row..(y + 1) * row] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    w.write_all(&bytes)?;
    Ok(())
}

/// Reads a PFM, returning `(width, height, channels, data)` with rows top to bottom.
pub fn read_pfm<R: Read>(r: R) -> Result<(u32, u32, usize, Vec<f32>), ImageError> {
    let mut r = BufReader::new(r);
    let malformed = |reason: &str| ImageError::Malformed {
        format: "pfm",
        reason: reason.to_string(),
    };
    let mut tokens = Vec::new();
    let mut line = String::new();
    while tokens.len() < 4 {
        line.clear();
        if r.read_line(&mut line)? == 0 {
            return Err(malformed("truncated header"));
        }
        tokens.extend(line.split_whitespace().map(str::to_string));
    }
    let channels = match tokens[0].as_str() {
        "Pf" => 1,
        "PF" => 3,
        _ => return Err(malformed("bad magic")),
    };
    let width: u32 = tokens[1].parse().map_err(|_| malformed("bad width"))?;
    let height: u32 = tokens[2].parse().map_err(|_| malformed("bad height"))?;
    let scale: f32 = tokens[3].parse().map_err(|_| malformed("bad scale"))?;
    let little = scale < 0.0;
    let row = width as usize * channels;
    let mut raw = vec![0u8; row * height as usize * 4];
    r.read_exact(&mut raw)?;
    let values: Vec<f32> = raw
        .chunks_exact(4)
        .map(|b| {
            let b = [b[0], b[1], b[2], b[3]];
            if little {
                f32::from_le_bytes(b)
            } else {
                f32::from_be_bytes(b)
            }
        })
        .collect();
    let mut data = Vec::with_capacity(values.len());
    for y in (0..height as usize).rev() {
        data.extend_from_slice(&values[y * row..(y + 1) * row]);
    }
    Ok((width, height, channels, data))
}
