//! Grayscale/multichannel pixel grids and PPM/PGM/PNG export.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::{Error, Result};

/// `channels × height × width` pixels, row-major, values nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageGrid {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ImageGrid {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::InvalidArgument(format!(
                "image dimensions must be positive, got {channels}x{height}x{width}"
            )));
        }
        if data.len() != channels * height * width {
            return Err(Error::ShapeMismatch {
                what: "image data",
                expected: vec![channels, height, width],
                got: vec![data.len()],
            });
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub(crate) fn ensure_same_dims(&self, other: &ImageGrid) -> Result<()> {
        if self.dims() != other.dims() {
            let (c, h, w) = other.dims();
            return Err(Error::ShapeMismatch {
                what: "image",
                expected: vec![self.channels, self.height, self.width],
                got: vec![c, h, w],
            });
        }
        Ok(())
    }

    /// Concatenate images of equal size left to right.
    pub fn hstack(images: &[ImageGrid]) -> Result<ImageGrid> {
        let first = images
            .first()
            .ok_or_else(|| Error::InvalidArgument("cannot stack zero images".into()))?;
        for img in images {
            first.ensure_same_dims(img)?;
        }
        let (c, h, w) = first.dims();
        let total_w = w * images.len();
        let mut data = vec![0.0; c * h * total_w];
        for (i, img) in images.iter().enumerate() {
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        data[(ch * h + y) * total_w + i * w + x] = img.get(ch, y, x);
                    }
                }
            }
        }
        ImageGrid::new(c, h, total_w, data)
    }

    /// 8-bit samples in interleaved (HWC) order, clamped to `[0, 1]` first.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len());
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..self.channels {
                    let v = self.get(c, y, x).clamp(0.0, 1.0);
                    out.push((v * 255.0).round() as u8);
                }
            }
        }
        out
    }

    /// Binary PGM (P5) for one channel, PPM (P6) for three.
    pub fn write_pnm(&self, path: &Path) -> Result<()> {
        let magic = match self.channels {
            1 => "P5",
            3 => "P6",
            c => {
                return Err(Error::InvalidArgument(format!(
                    "PNM export needs 1 or 3 channels, got {c}"
                )))
            }
        };
        let mut f = BufWriter::new(File::create(path)?);
        write!(f, "{magic}\n{} {}\n255\n", self.width, self.height)?;
        f.write_all(&self.to_bytes())?;
        f.flush()?;
        Ok(())
    }

    pub fn write_png(&self, path: &Path) -> Result<()> {
        let color = match self.channels {
            1 => png::ColorType::Grayscale,
            3 => png::ColorType::Rgb,
            c => {
                return Err(Error::InvalidArgument(format!(
                    "PNG export needs 1 or 3 channels, got {c}"
                )))
            }
        };
        let f = BufWriter::new(File::create(path)?);
        let mut enc = png::Encoder::new(f, self.width as u32, self.height as u32);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc
            .write_header()
            .map_err(|e| Error::Format(format!("png header: {e}")))?;
        writer
            .write_image_data(&self.to_bytes())
            .map_err(|e| Error::Format(format!("png data: {e}")))?;
        Ok(())
    }

    /// Planar image from 8-bit interleaved samples.
    fn from_bytes(channels: usize, height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        if bytes.len() < channels * height * width {
            return Err(Error::Format("image payload is truncated".into()));
        }
        let mut data = vec![0.0; channels * height * width];
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data[(c * height + y) * width + x] = f64::from(bytes[(y * width + x) * channels + c]) / 255.0;
                }
            }
        }
        Self::new(channels, height, width, data)
    }

    /// Reads an 8-bit binary PGM (P5) or PPM (P6).
    pub fn read_pnm(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let mut fields = Vec::new();
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
                return Err(Error::Format("PNM header is truncated".into()));
            }
            fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
        }
        pos += 1;
        let channels = match fields[0].as_str() {
            "P5" => 1,
            "P6" => 3,
            m => return Err(Error::Format(format!("unsupported PNM type {m}"))),
        };
        let num = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| Error::Format(format!("bad PNM header field `{s}`")))
        };
        let (width, height, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
        if maxval != 255 {
            return Err(Error::Format(format!("only 8-bit PNM is supported, maxval {maxval}")));
        }
        Self::from_bytes(channels, height, width, bytes.get(pos..).unwrap_or_default())
    }

    /// Reads an 8-bit grayscale or RGB PNG.
    pub fn read_png(path: &Path) -> Result<Self> {
        let decoder = png::Decoder::new(std::io::BufReader::new(File::open(path)?));
        let mut reader = decoder
            .read_info()
            .map_err(|e| Error::Format(format!("png header: {e}")))?;
        let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
        let info = reader
            .next_frame(&mut buf)
            .map_err(|e| Error::Format(format!("png data: {e}")))?;
        if info.bit_depth != png::BitDepth::Eight {
            return Err(Error::Format("only 8-bit PNG is supported".into()));
        }
        let channels = match info.color_type {
            png::ColorType::Grayscale => 1,
            png::ColorType::Rgb => 3,
            other => return Err(Error::Format(format!("unsupported PNG color type {other:?}"))),
        };
        Self::from_bytes(channels, info.height as usize, info.width as usize, &buf[..info.buffer_size()])
    }

    /// Reads PNG or PNM depending on the file extension.
    pub fn load(path: &Path) -> Result<Self> {
        match path.extension().and_then(|e| e.to_str()) {
            Some("png") => Self::read_png(path),
            Some("ppm") | Some("pgm") | Some("pnm") => Self::read_pnm(path),
            _ => Err(Error::InvalidArgument(format!(
                "unsupported image extension: {}",
                path.display()
            ))),
        }
    }

    /// Write as PNG or PNM depending on the file extension.
    pub fn save(&self, path: &Path) -> Result<()> {
        match path.extension().and_then(|e| e.to_str()) {
            Some("png") => self.write_png(path),
            Some("ppm") | Some("pgm") | Some("pnm") => self.write_pnm(path),
            _ => Err(Error::InvalidArgument(format!(
                "unsupported image extension: {}",
                path.display()
            ))),
        }
    }
}
