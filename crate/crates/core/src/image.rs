//! Small float-image type shared by the renderer, texture model and metrics.
//!
//! Pixels are RGB `f64` in `[0, 1]`, row-major with the origin at the top-left
//! corner. All mutating accessors clamp into range so downstream consumers can
//! rely on the invariant without re-checking.

use std::path::Path;

use thiserror::Error;

use crate::tensorfile::{TensorFile, TensorFileError};

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("png error: {0}")]
    Png(#[from] image::ImageError),
    #[error("tensor file error: {0}")]
    Tensor(#[from] TensorFileError),
    #[error("image entry has dims {0:?}, expected [h, w, 3]")]
    BadDims(Vec<usize>),
    #[error("size mismatch: {0}x{1} vs {2}x{3}")]
    SizeMismatch(usize, usize, usize, usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    /// Row-major, 3 channels per pixel.
    data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height * 3],
        }
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        let mut img = Self::new(width, height);
        for y in 0..height {
            for x in 0..width {
                img.set(x, y, rgb);
            }
        }
        img
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i] = rgb[0].clamp(0.0, 1.0);
        self.data[i + 1] = rgb[1].clamp(0.0, 1.0);
        self.data[i + 2] = rgb[2].clamp(0.0, 1.0);
    }

    /// Builds an image from raw channel data without clamping; callers that
    /// synthesize data already in range (e.g. decoders) use this directly.
    pub fn from_raw(width: usize, height: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), width * height * 3);
        Self {
            width,
            height,
            data,
        }
    }

    /// Bilinear sample at continuous pixel coordinates, where integer
    /// coordinates address pixel centers. Out-of-range coordinates clamp to
    /// the image edge.
    pub fn sample_bilinear(&self, x: f64, y: f64) -> [f64; 3] {
        let xc = x.clamp(0.0, (self.width - 1) as f64);
        let yc = y.clamp(0.0, (self.height - 1) as f64);
        let x0 = xc.floor() as usize;
        let y0 = yc.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = xc - x0 as f64;
        let fy = yc - y0 as f64;
        let p00 = self.get(x0, y0);
        let p10 = self.get(x1, y0);
        let p01 = self.get(x0, y1);
        let p11 = self.get(x1, y1);
        let mut out = [0.0; 3];
        for c in 0..3 {
            let top = p00[c] * (1.0 - fx) + p10[c] * fx;
            let bot = p01[c] * (1.0 - fx) + p11[c] * fx;
            out[c] = top * (1.0 - fy) + bot * fy;
        }
        out
    }

    pub fn mean_abs_diff(&self, other: &Image) -> Result<f64, ImageError> {
        if self.width != other.width || self.height != other.height {
            return Err(ImageError::SizeMismatch(
                self.width,
                self.height,
                other.width,
                other.height,
            ));
        }
        let n = self.data.len() as f64;
        let sum: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .sum();
        Ok(sum / n)
    }

    /// 2x2 average pooling; odd trailing rows/columns are dropped.
    pub fn avg_pool2(&self) -> Image {
        let w = self.width / 2;
        let h = self.height / 2;
        let mut out = Image::new(w, h);
        for y in 0..h {
            for x in 0..w {
                let mut acc = [0.0; 3];
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let p = self.get(2 * x + dx, 2 * y + dy);
                    for c in 0..3 {
                        acc[c] += p[c];
                    }
                }
                out.set(x, y, [acc[0] / 4.0, acc[1] / 4.0, acc[2] / 4.0]);
            }
        }
        out
    }

    /// 8-bit PNG export. Quantization rounds to nearest.
    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<(), ImageError> {
        let mut buf = image::RgbImage::new(self.width as u32, self.height as u32);
        for y in 0..self.height {
            for x in 0..self.width {
                let p = self.get(x, y);
                let px = image::Rgb([
                    (p[0] * 255.0).round() as u8,
                    (p[1] * 255.0).round() as u8,
                    (p[2] * 255.0).round() as u8,
                ]);
                buf.put_pixel(x as u32, y as u32, px);
            }
        }
        buf.save(path)?;
        Ok(())
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self, ImageError> {
        let img = image::open(path)?.to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut out = Image::new(w, h);
        for y in 0..h {
            for x in 0..w {
                let p = img.get_pixel(x as u32, y as u32);
                out.set(
                    x,
                    y,
                    [
                        p[0] as f64 / 255.0,
                        p[1] as f64 / 255.0,
                        p[2] as f64 / 255.0,
                    ],
                );
            }
        }
        Ok(out)
    }

    /// Lossless float round trip through the tensor container.
    pub fn save_float(&self, path: impl AsRef<Path>) -> Result<(), ImageError> {
        let mut tf = TensorFile::new(serde_json::json!({"kind": "float-image"}));
        tf.insert_f64("pixels", &[self.height, self.width, 3], self.data.clone());
        tf.save(path)?;
        Ok(())
    }

    pub fn load_float(path: impl AsRef<Path>) -> Result<Self, ImageError> {
        let tf = TensorFile::load(path)?;
        let (dims, data) = tf.f64_entry("pixels")?;
        if dims.len() != 3 || dims[2] != 3 {
            return Err(ImageError::BadDims(dims.to_vec()));
        }
        Ok(Self {
            width: dims[1],
            height: dims[0],
            data: data.to_vec(),
        })
    }
}

/// Single-channel float mask in `[0, 1]`, same layout conventions as [`Image`].
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Mask {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.data[y * self.width + x] = v.clamp(0.0, 1.0);
    }

    /// Morphological erosion with a disk structuring element of the given
    /// radius: a pixel stays on only if every mask pixel within `radius`
    /// (Euclidean, center-to-center) is at least 0.5. Pixels beyond the image
    /// border count as off, so the mask shrinks away from the frame edge too.
    pub fn erode_disk(&self, radius: usize) -> Mask {
        let r = radius as isize;
        let r2 = (radius * radius) as isize;
        let mut out = Mask::new(self.width, self.height);
        for y in 0..self.height as isize {
            for x in 0..self.width as isize {
                if self.get(x as usize, y as usize) < 0.5 {
                    continue;
                }
                let mut keep = true;
                'probe: for dy in -r..=r {
                    for dx in -r..=r {
                        if dx * dx + dy * dy > r2 {
                            continue;
                        }
                        let (nx, ny) = (x + dx, y + dy);
                        if nx < 0
                            || ny < 0
                            || nx >= self.width as isize
                            || ny >= self.height as isize
                            || self.get(nx as usize, ny as usize) < 0.5
                        {
                            keep = false;
                            break 'probe;
                        }
                    }
                }
                if keep {
                    out.set(x as usize, y as usize, 1.0);
                }
            }
        }
        out
    }

    /// Separable Gaussian blur with a kernel truncated at three standard
    /// deviations and renormalized. Borders clamp to the edge pixel. A
    /// non-positive sigma returns the mask unchanged.
    pub fn blur_gaussian(&self, sigma: f64) -> Mask {
        if sigma <= 0.0 {
            return self.clone();
        }
        let radius = (3.0 * sigma).ceil() as isize;
        let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
        for i in -radius..=radius {
            let x = i as f64;
            kernel.push((-x * x / (2.0 * sigma * sigma)).exp());
        }
        let norm: f64 = kernel.iter().sum();
        for k in kernel.iter_mut() {
            *k /= norm;
        }

        let w = self.width as isize;
        let h = self.height as isize;
        // Horizontal pass.
        let mut tmp = vec![0.0; self.data.len()];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (ki, i) in (-radius..=radius).enumerate() {
                    let sx = (x + i).clamp(0, w - 1);
                    acc += kernel[ki] * self.get(sx as usize, y as usize);
                }
                tmp[(y * w + x) as usize] = acc;
            }
        }
        // Vertical pass.
        let mut out = Mask::new(self.width, self.height);
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (ki, i) in (-radius..=radius).enumerate() {
                    let sy = (y + i).clamp(0, h - 1);
                    acc += kernel[ki] * tmp[(sy * w + x) as usize];
                }
                out.set(x as usize, y as usize, acc);
            }
        }
        out
    }

    /// Per-pixel union (max) of two equally sized masks.
    pub fn union(&self, other: &Mask) -> Mask {
        assert_eq!((self.width, self.height), (other.width, other.height));
        let mut out = Mask::new(self.width, self.height);
        for (i, v) in out.data.iter_mut().enumerate() {
            *v = self.data[i].max(other.data[i]);
        }
        out
    }
}

/// Alpha composite: `fg * alpha + bg * (1 - alpha)` per pixel.
pub fn composite(fg: &Image, bg: &Image, alpha: &Mask) -> Result<Image, ImageError> {
    if fg.width != bg.width
        || fg.height != bg.height
        || fg.width != alpha.width
        || fg.height != alpha.height
    {
        return Err(ImageError::SizeMismatch(
            fg.width, fg.height, bg.width, bg.height,
        ));
    }
    let mut out = Image::new(fg.width, fg.height);
    for y in 0..fg.height {
        for x in 0..fg.width {
            let a = alpha.get(x, y);
            let f = fg.get(x, y);
            let b = bg.get(x, y);
            out.set(
                x,
                y,
                [
                    f[0] * a + b[0] * (1.0 - a),
                    f[1] * a + b[1] * (1.0 - a),
                    f[2] * a + b[2] * (1.0 - a),
                ],
            );
        }
    }
    Ok(out)
}
