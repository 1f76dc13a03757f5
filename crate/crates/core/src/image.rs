//! RGB images: file I/O, range conversion, cropping, resampling and PSNR.
//!
//! Internally images live in `[-1, 1]` (diffusion latents want zero-centered
//! data); files are 8-bit RGB PNG. The two conventions are mapped linearly,
//! so a file -> internal -> file round trip is lossless.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::path::Path;

/// Which convention the tensor values follow.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ValueRange {
    /// `[-1, 1]` floats; the working convention for every model.
    Internal,
    /// `[0, 255]` integers stored as floats; the file convention.
    Byte,
}

/// An RGB image: a `(3, H, W)` tensor plus its declared value range.
#[derive(Debug, Clone)]
pub struct Image {
    pub tensor: Tensor,
    pub range: ValueRange,
}

/// PSNR cap returned for identical images.
pub const PSNR_CAP_DB: f32 = 100.0;

impl Image {
    /// Wraps a `(3, H, W)` tensor already in internal range.
    pub fn from_tensor(tensor: Tensor) -> Result<Self> {
        let (c, _, _) = tensor.dims3()?;
        if c != 3 {
            return Err(Error::dim(format!("images are 3-channel, got {c}")));
        }
        Ok(Self {
            tensor,
            range: ValueRange::Internal,
        })
    }

    pub fn height(&self) -> usize {
        self.tensor.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.tensor.shape()[2]
    }

    /// Decodes an 8-bit PNG; grayscale inputs are replicated to 3 channels.
    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let img = image::open(path.as_ref())?.to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut data = vec![0.0f32; 3 * h * w];
        for (x, y, px) in img.enumerate_pixels() {
            let (x, y) = (x as usize, y as usize);
            for c in 0..3 {
                data[c * h * w + y * w + x] = byte_to_internal(px.0[c]);
            }
        }
        Ok(Self {
            tensor: Tensor::new(&[3, h, w], data)?,
            range: ValueRange::Internal,
        })
    }

    /// Encodes to 8-bit RGB bytes (row-major, interleaved), clamping to the
    /// valid range at this export boundary.
    pub fn to_rgb8(&self) -> Vec<u8> {
        let (h, w) = (self.height(), self.width());
        let d = self.tensor.data();
        let mut out = vec![0u8; 3 * h * w];
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    let v = match self.range {
                        ValueRange::Internal => internal_to_byte(d[c * h * w + y * w + x]),
                        ValueRange::Byte => d[c * h * w + y * w + x].round().clamp(0.0, 255.0) as u8,
                    };
                    out[(y * w + x) * 3 + c] = v;
                }
            }
        }
        out
    }

    /// Writes a PNG atomically (temp file + rename in the target directory).
    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let (h, w) = (self.height(), self.width());
        let buf: image::RgbImage =
            image::ImageBuffer::from_raw(w as u32, h as u32, self.to_rgb8())
                .expect("buffer sized from image dims");
        let tmp = temp_sibling(path);
        buf.save_with_format(&tmp, image::ImageFormat::Png)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    /// Crop of size `(ch, cw)` with top-left corner `(top, left)`.
    pub fn crop(&self, top: usize, left: usize, ch: usize, cw: usize) -> Result<Image> {
        let (h, w) = (self.height(), self.width());
        if top + ch > h || left + cw > w {
            return Err(Error::dim(format!(
                "crop {ch}x{cw}@({top},{left}) exceeds {h}x{w}"
            )));
        }
        let d = self.tensor.data();
        let mut out = vec![0.0f32; 3 * ch * cw];
        for c in 0..3 {
            for y in 0..ch {
                let src = c * h * w + (top + y) * w + left;
                let dst = c * ch * cw + y * cw;
                out[dst..dst + cw].copy_from_slice(&d[src..src + cw]);
            }
        }
        Ok(Image {
            tensor: Tensor::new(&[3, ch, cw], out)?,
            range: self.range,
        })
    }

    /// Separable Catmull-Rom bicubic resample to `(out_h, out_w)` with
    /// reflected boundaries.
    pub fn resize_bicubic(&self, out_h: usize, out_w: usize) -> Result<Image> {
        let (h, w) = (self.height(), self.width());
        let d = self.tensor.data();
        let mut out = vec![0.0f32; 3 * out_h * out_w];
        for c in 0..3 {
            let plane = &d[c * h * w..(c + 1) * h * w];
            let resized = bicubic_plane(plane, h, w, out_h, out_w);
            out[c * out_h * out_w..(c + 1) * out_h * out_w].copy_from_slice(&resized);
        }
        Ok(Image {
            tensor: Tensor::new(&[3, out_h, out_w], out)?,
            range: self.range,
        })
    }

    /// Copy with values clamped to the internal range.
    pub fn clamped(&self) -> Image {
        Image {
            tensor: self.tensor.clamp(-1.0, 1.0),
            range: self.range,
        }
    }
}

pub fn byte_to_internal(b: u8) -> f32 {
    b as f32 / 255.0 * 2.0 - 1.0
}

pub fn internal_to_byte(v: f32) -> u8 {
    (((v.clamp(-1.0, 1.0) + 1.0) / 2.0) * 255.0).round() as u8
}

fn temp_sibling(path: &Path) -> std::path::PathBuf {
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".into());
    path.with_file_name(format!(".{name}.tmp"))
}

/// Peak signal-to-noise ratio in dB; identical inputs return the
/// [`PSNR_CAP_DB`] cap.
pub fn psnr(a: &Image, b: &Image, peak: f32) -> Result<f32> {
    if a.tensor.shape() != b.tensor.shape() {
        return Err(Error::dim(format!(
            "psnr shape mismatch: {:?} vs {:?}",
            a.tensor.shape(),
            b.tensor.shape()
        )));
    }
    let mut acc = 0.0f64;
    for (&x, &y) in a.tensor.data().iter().zip(b.tensor.data()) {
        let d = x as f64 - y as f64;
        acc += d * d;
    }
    let mse = acc / a.tensor.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * ((peak as f64 * peak as f64) / mse).log10()) as f32)
}

/// PSNR of the 8-bit encodings of two images (peak 255), the convention for
/// comparing files.
pub fn psnr_bytes(a: &Image, b: &Image) -> Result<f32> {
    if a.tensor.shape() != b.tensor.shape() {
        return Err(Error::dim("psnr shape mismatch"));
    }
    let (ab, bb) = (a.to_rgb8(), b.to_rgb8());
    let mut acc = 0.0f64;
    for (&x, &y) in ab.iter().zip(&bb) {
        let d = x as f64 - y as f64;
        acc += d * d;
    }
    let mse = acc / ab.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (255.0f64 * 255.0 / mse).log10()) as f32)
}

fn catmull_rom(t: f32) -> [f32; 4] {
    // Weights for samples at offsets -1..2 around the interpolation point.
    let t2 = t * t;
    let t3 = t2 * t;
    [
        0.5 * (-t3 + 2.0 * t2 - t),
        0.5 * (3.0 * t3 - 5.0 * t2 + 2.0),
        0.5 * (-3.0 * t3 + 4.0 * t2 + t),
        0.5 * (t3 - t2),
    ]
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    while i < 0 || i >= n {
        if i < 0 {
            i = -i - 1;
        }
        if i >= n {
            i = 2 * n - i - 1;
        }
    }
    i as usize
}

fn bicubic_plane(src: &[f32], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f32> {
    // Horizontal pass then vertical pass, pixel centers aligned.
    let sx = w as f32 / out_w as f32;
    let sy = h as f32 / out_h as f32;
    let mut mid = vec![0.0f32; h * out_w];
    for x in 0..out_w {
        let center = (x as f32 + 0.5) * sx - 0.5;
        let base = center.floor();
        let wts = catmull_rom(center - base);
        let cols: [usize; 4] = std::array::from_fn(|k| reflect(base as isize + k as isize - 1, w));
        for y in 0..h {
            let row = &src[y * w..(y + 1) * w];
            let mut acc = 0.0f32;
            for k in 0..4 {
                acc += wts[k] * row[cols[k]];
            }
            mid[y * out_w + x] = acc;
        }
    }
    let mut out = vec![0.0f32; out_h * out_w];
    for y in 0..out_h {
        let center = (y as f32 + 0.5) * sy - 0.5;
        let base = center.floor();
        let wts = catmull_rom(center - base);
        let rows: [usize; 4] = std::array::from_fn(|k| reflect(base as isize + k as isize - 1, h));
        for x in 0..out_w {
            let mut acc = 0.0f32;
            for k in 0..4 {
                acc += wts[k] * mid[rows[k] * out_w + x];
            }
            out[y * out_w + x] = acc;
        }
    }
    out
}
