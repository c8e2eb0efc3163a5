//! Row-major image buffers with the sampling primitives the photometric and stereo
//! code needs.

use alloc::vec;
use alloc::vec::Vec;

use crate::geometry::PixelCoord;

/// Working resolution of every per-pixel map in the pipeline.
pub const WORKING_WIDTH: usize = 320;
pub const WORKING_HEIGHT: usize = 240;

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum ImageError {
    #[error("sample position outside the interpolable image area")]
    OutOfBounds,
    #[error("buffer length {len} does not match {width}x{height}")]
    SizeMismatch {
        width: usize,
        height: usize,
        len: usize,
    },
    #[error("unsupported pixel format")]
    UnsupportedFormat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Image<T> {
    width: usize,
    height: usize,
    data: Vec<T>,
}

/// Grayscale intensity in `[0, 1]`.
pub type IntensityImage = Image<f64>;
/// Metric depth; `0` (or any non-finite value) marks an invalid pixel.
pub type DepthMap = Image<f64>;

impl<T: Clone> Image<T> {
    pub fn filled(width: usize, height: usize, value: T) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }
}

impl<T> Image<T> {
    pub fn from_vec(width: usize, height: usize, data: Vec<T>) -> Result<Self, ImageError> {
        if data.len() != width * height {
            return Err(ImageError::SizeMismatch {
                width,
                height,
                len: data.len(),
            });
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn same_shape<U>(&self, other: &Image<U>) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> &T {
        &self.data[y * self.width + x]
    }

    #[inline]
    pub fn get_mut(&mut self, x: usize, y: usize) -> &mut T {
        &mut self.data[y * self.width + x]
    }

    pub fn map<U>(&self, f: impl FnMut(&T) -> U) -> Image<U> {
        Image {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(f).collect(),
        }
    }
}

impl<T: Copy> Image<T> {
    #[inline]
    pub fn at(&self, x: usize, y: usize) -> T {
        self.data[y * self.width + x]
    }

    /// Nearest-neighbour resampling with pixel centres aligned.
    pub fn resize_nearest(&self, width: usize, height: usize) -> Image<T> {
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        Image::from_fn(width, height, |x, y| {
            let xs = (((x as f64 + 0.5) * sx) as usize).min(self.width - 1);
            let ys = (((y as f64 + 0.5) * sy) as usize).min(self.height - 1);
            self.at(xs, ys)
        })
    }
}

pub fn is_valid_depth(d: f64) -> bool {
    d.is_finite() && d > 0.0
}

impl Image<f64> {
    /// Bilinear interpolation at `u`, defined on `[0, w-1] x [0, h-1]`.
    pub fn sample_bilinear(&self, u: &PixelCoord) -> Result<f64, ImageError> {
        self.sample_with_gradient(u).map(|(v, _, _)| v)
    }

    /// Bilinear value together with the exact partial derivatives of the interpolant.
    pub fn sample_with_gradient(&self, u: &PixelCoord) -> Result<(f64, f64, f64), ImageError> {
        let (w, h) = (self.width, self.height);
        if !(u.x >= 0.0 && u.y >= 0.0 && u.x <= (w - 1) as f64 && u.y <= (h - 1) as f64) {
            return Err(ImageError::OutOfBounds);
        }
        let x0 = (u.x.floor() as usize).min(w.saturating_sub(2));
        let y0 = (u.y.floor() as usize).min(h.saturating_sub(2));
        let x1 = (x0 + 1).min(w - 1);
        let y1 = (y0 + 1).min(h - 1);
        let ax = u.x - x0 as f64;
        let ay = u.y - y0 as f64;
        let i00 = self.at(x0, y0);
        let i10 = self.at(x1, y0);
        let i01 = self.at(x0, y1);
        let i11 = self.at(x1, y1);
        let top = i00 + ax * (i10 - i00);
        let bottom = i01 + ax * (i11 - i01);
        let value = top + ay * (bottom - top);
        let dx = (1.0 - ay) * (i10 - i00) + ay * (i11 - i01);
        let dy = bottom - top;
        Ok((value, dx, dy))
    }

    /// Bilinear resampling to a new size, pixel centres aligned, edges clamped.
    pub fn resize_bilinear(&self, width: usize, height: usize) -> Image<f64> {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        let maxx = (self.width - 1) as f64;
        let maxy = (self.height - 1) as f64;
        Image::from_fn(width, height, |x, y| {
            let u = PixelCoord::new(
                ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, maxx),
                ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, maxy),
            );
            self.sample_bilinear(&u).unwrap_or(0.0)
        })
    }

    /// 2x2 box average; odd trailing rows/columns are dropped.
    pub fn downsample_half(&self) -> Image<f64> {
        let (w, h) = (self.width / 2, self.height / 2);
        Image::from_fn(w, h, |x, y| {
            let (x2, y2) = (2 * x, 2 * y);
            0.25 * (self.at(x2, y2)
                + self.at(x2 + 1, y2)
                + self.at(x2, y2 + 1)
                + self.at(x2 + 1, y2 + 1))
        })
    }

    /// 2x2 average over the valid depths of each block; all-invalid blocks stay invalid.
    pub fn downsample_depth_half(&self) -> Image<f64> {
        let (w, h) = (self.width / 2, self.height / 2);
        Image::from_fn(w, h, |x, y| {
            let (x2, y2) = (2 * x, 2 * y);
            let mut sum = 0.0;
            let mut n = 0;
            for (dx, dy) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                let d = self.at(x2 + dx, y2 + dy);
                if is_valid_depth(d) {
                    sum += d;
                    n += 1;
                }
            }
            if n == 0 {
                0.0
            } else {
                sum / n as f64
            }
        })
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Mean over valid depths only.
    pub fn mean_valid_depth(&self) -> Option<f64> {
        let (sum, n) = self
            .data
            .iter()
            .filter(|d| is_valid_depth(**d))
            .fold((0.0, 0usize), |(s, n), d| (s + d, n + 1));
        (n > 0).then(|| sum / n as f64)
    }
}

/// Per-pixel intensity gradient (central differences; zero on the outer ring).
#[derive(Debug, Clone, PartialEq)]
pub struct GradientMap {
    pub gx: Image<f64>,
    pub gy: Image<f64>,
}

impl GradientMap {
    pub fn compute(img: &IntensityImage) -> Self {
        let (w, h) = (img.width(), img.height());
        let mut gx = Image::filled(w, h, 0.0);
        let mut gy = Image::filled(w, h, 0.0);
        for y in 1..h.saturating_sub(1) {
            for x in 1..w.saturating_sub(1) {
                *gx.get_mut(x, y) = 0.5 * (img.at(x + 1, y) - img.at(x - 1, y));
                *gy.get_mut(x, y) = 0.5 * (img.at(x, y + 1) - img.at(x, y - 1));
            }
        }
        Self { gx, gy }
    }

    pub fn width(&self) -> usize {
        self.gx.width()
    }

    pub fn height(&self) -> usize {
        self.gx.height()
    }

    #[inline]
    pub fn magnitude(&self, x: usize, y: usize) -> f64 {
        let (a, b) = (self.gx.at(x, y), self.gy.at(x, y));
        (a * a + b * b).sqrt()
    }
}

/// Luminance of an interleaved 8-bit RGB buffer, resampled (bilinear) to
/// `out_width x out_height`.
pub fn rgb_to_intensity(
    rgb: &[u8],
    width: usize,
    height: usize,
    out_width: usize,
    out_height: usize,
) -> Result<IntensityImage, ImageError> {
    if rgb.len() != width * height * 3 {
        return Err(ImageError::SizeMismatch {
            width,
            height,
            len: rgb.len() / 3,
        });
    }
    let lum: Vec<f64> = rgb
        .chunks_exact(3)
        .map(|p| (0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64) / 255.0)
        .collect();
    let img = Image::from_vec(width, height, lum)?;
    Ok(img.resize_bilinear(out_width, out_height))
}
