//! 8-bit RGB images: binary PPM and PNG codecs, bilinear resizing, and
//! conversion to and from `[0, 1]` CHW tensors.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    /// Interleaved RGB, row-major, `width * height * 3` bytes.
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != width * height * 3 {
            return Err(Error::Data(format!(
                "{width}x{height} RGB image needs {} bytes, got {}",
                width * height * 3,
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        Self {
            width,
            height,
            data: rgb.repeat(width * height),
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }
}

/// Skip whitespace and `#` comments, then read one unsigned decimal token.
fn ppm_token(bytes: &[u8], pos: &mut usize) -> Result<usize> {
    loop {
        match bytes.get(*pos) {
            Some(b) if b.is_ascii_whitespace() => *pos += 1,
            Some(b'#') => {
                while bytes.get(*pos).is_some_and(|&b| b != b'\n') {
                    *pos += 1;
                }
            }
            _ => break,
        }
    }
    let start = *pos;
    while bytes.get(*pos).is_some_and(u8::is_ascii_digit) {
        *pos += 1;
    }
    std::str::from_utf8(&bytes[start..*pos])
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Data("malformed PPM header".into()))
}

/// Binary P6 with maxval 255.
pub fn decode_ppm(bytes: &[u8]) -> Result<RgbImage> {
    if !bytes.starts_with(b"P6") {
        return Err(Error::Data("not a binary (P6) PPM file".into()));
    }
    let mut pos = 2;
    let width = ppm_token(bytes, &mut pos)?;
    let height = ppm_token(bytes, &mut pos)?;
    let maxval = ppm_token(bytes, &mut pos)?;
    if maxval != 255 {
        return Err(Error::Data(format!("PPM maxval {maxval} unsupported (expected 255)")));
    }
    // exactly one whitespace byte separates the header from the raster
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::Data("malformed PPM header".into()));
    }
    pos += 1;
    let need = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(3))
        .ok_or_else(|| Error::Data("PPM dimensions overflow".into()))?;
    let raster = bytes
        .get(pos..pos + need)
        .ok_or_else(|| Error::Data(format!("PPM raster truncated: need {need} bytes")))?;
    RgbImage::new(width, height, raster.to_vec())
}

pub fn encode_ppm(img: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

/// Decodes 8-bit RGB PNGs; grayscale, alpha and 16-bit inputs are converted.
pub fn decode_png(bytes: &[u8]) -> Result<RgbImage> {
    let mut decoder = png::Decoder::new(std::io::Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info().map_err(|e| Error::Data(format!("PNG: {e}")))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Data("PNG: image too large".into()))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::Data(format!("PNG: {e}")))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let px = &buf[..info.buffer_size()];
    let data = match info.color_type {
        png::ColorType::Rgb => px.to_vec(),
        png::ColorType::Rgba => px.chunks_exact(4).flat_map(|p| [p[0], p[1], p[2]]).collect(),
        png::ColorType::Grayscale => px.iter().flat_map(|&g| [g, g, g]).collect(),
        png::ColorType::GrayscaleAlpha => px.chunks_exact(2).flat_map(|p| [p[0], p[0], p[0]]).collect(),
        png::ColorType::Indexed => return Err(Error::Data("PNG: palette was not expanded".into())),
    };
    RgbImage::new(w, h, data)
}

pub fn encode_png(img: &RgbImage) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, img.width as u32, img.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc
            .write_header()
            .map_err(|e| Error::Internal(format!("PNG encode: {e}")))?;
        w.write_image_data(&img.data)
            .map_err(|e| Error::Internal(format!("PNG encode: {e}")))?;
    }
    Ok(out)
}

/// Decode by signature: PPM (P6) or PNG.
pub fn decode_image(bytes: &[u8]) -> Result<RgbImage> {
    if bytes.starts_with(b"P6") {
        decode_ppm(bytes)
    } else if bytes.starts_with(b"\x89PNG\r\n\x1a\n") {
        decode_png(bytes)
    } else {
        Err(Error::Data("unrecognised image format (expected PPM P6 or PNG)".into()))
    }
}

/// Source sample position for output index `i` with half-pixel centres,
/// clamped to the valid range: `(lo, hi, frac)`.
fn half_pixel(i: usize, src: usize, dst: usize) -> (usize, usize, f32) {
    let pos = ((i as f64 + 0.5) * src as f64 / dst as f64 - 0.5).clamp(0.0, (src - 1) as f64);
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(src - 1);
    (lo, hi, (pos - lo as f64) as f32)
}

/// Bilinear resize of a `C×H×W` tensor with half-pixel centres and edge clamping.
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let [c, h, w] = match *x.shape() {
        [c, h, w] => [c, h, w],
        _ => return Err(Error::shape("resize", x.shape(), "expected rank 3 (CHW)")),
    };
    if out_h == 0 || out_w == 0 {
        return Err(Error::Usage(format!("resize target {out_h}x{out_w} must be nonempty")));
    }
    if (h, w) == (out_h, out_w) {
        return Ok(x.clone());
    }
    let rows: Vec<_> = (0..out_h).map(|i| half_pixel(i, h, out_h)).collect();
    let cols: Vec<_> = (0..out_w).map(|j| half_pixel(j, w, out_w)).collect();
    let src = x.data();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ci in 0..c {
        let plane = &src[ci * h * w..][..h * w];
        for &(y0, y1, fy) in &rows {
            for &(x0, x1, fx) in &cols {
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bottom = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    Tensor::new(vec![c, out_h, out_w], out)
}

/// `3×H×W` tensor with raw 0..=255 channel values.
fn raw_tensor(img: &RgbImage) -> Tensor {
    let (w, h) = (img.width, img.height);
    Tensor::from_fn(vec![3, h, w], |i| {
        let (c, p) = (i / (h * w), i % (h * w));
        img.data[p * 3 + c] as f32
    })
}

/// `3×H×W` tensor in `[0, 1]`.
pub fn to_tensor(img: &RgbImage) -> Tensor {
    raw_tensor(img).map(|v| v / 255.0)
}

/// Round-half-away-from-zero to a byte, clamping to `0..=255`.
pub fn to_byte(v: f32) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// Inverse of [`to_tensor`] for a `3×H×W` tensor in `[0, 1]`.
pub fn from_tensor(x: &Tensor) -> Result<RgbImage> {
    let (h, w) = match *x.shape() {
        [3, h, w] => (h, w),
        _ => return Err(Error::shape("from_tensor", x.shape(), "expected 3xHxW")),
    };
    let d = x.data();
    let mut data = Vec::with_capacity(h * w * 3);
    for p in 0..h * w {
        for c in 0..3 {
            data.push(to_byte(d[c * h * w + p] * 255.0));
        }
    }
    RgbImage::new(w, h, data)
}

/// Decode, resize to `size×size` and scale to `[0, 1]`.
pub fn preprocess(bytes: &[u8], size: usize) -> Result<Tensor> {
    let img = decode_image(bytes)?;
    let resized = resize_bilinear(&raw_tensor(&img), size, size)?;
    Ok(resized.map(|v| v / 255.0))
}
