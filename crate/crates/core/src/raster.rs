//! Image and mask buffers with the conventions used throughout the toolkit:
//! pixels are `f64` in `[0, 1]`, layout is row-major `(height, width, channel)`,
//! masks are boolean grids where `true` marks an anomalous pixel.

use std::path::Path;

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};

/// RGB image, values in `[0, 1]`, shape `(H, W, 3)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuf {
    pub data: Array3<f64>,
}

impl ImageBuf {
    pub fn new(data: Array3<f64>) -> Self {
        ImageBuf { data }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        ImageBuf {
            data: Array3::zeros((height, width, 3)),
        }
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let mut img = ImageBuf::zeros(height, width);
        for y in 0..height {
            for x in 0..width {
                for c in 0..3 {
                    img.data[[y, x, c]] = rgb[c];
                }
            }
        }
        img
    }

    pub fn height(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn clamp_unit(&mut self) {
        self.data.mapv_inplace(|v| v.clamp(0.0, 1.0));
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Channel-first copy `(3, H, W)`, the layout the networks consume.
    pub fn to_chw(&self) -> Array3<f64> {
        let (h, w) = (self.height(), self.width());
        let mut out = Array3::zeros((3, h, w));
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    out[[c, y, x]] = self.data[[y, x, c]];
                }
            }
        }
        out
    }

    pub fn from_rgb8(bytes: &[u8], height: usize, width: usize) -> Result<Self> {
        if bytes.len() != height * width * 3 {
            return Err(Error::Shape(format!(
                "rgb8 buffer has {} bytes, expected {}",
                bytes.len(),
                height * width * 3
            )));
        }
        let data = Array3::from_shape_vec(
            (height, width, 3),
            bytes.iter().map(|&b| f64::from(b) / 255.0).collect(),
        )
        .expect("shape checked above");
        Ok(ImageBuf { data })
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| Error::Data(format!("cannot read image {}: {e}", path.display())))?
            .to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        ImageBuf::from_rgb8(img.as_raw(), h, w)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let buf = image::RgbImage::from_raw(self.width() as u32, self.height() as u32, self.to_rgb8())
            .expect("buffer size matches dims");
        buf.save(path)
            .map_err(|e| Error::Data(format!("cannot write image {}: {e}", path.display())))
    }

    /// Bilinear resample to `(new_h, new_w)` using the half-pixel-center
    /// convention (`src = (dst + 0.5) * scale - 0.5`, clamped).
    pub fn resize_bilinear(&self, new_h: usize, new_w: usize) -> Self {
        let mut out = ImageBuf::zeros(new_h, new_w);
        for c in 0..3 {
            let src = self.data.index_axis(ndarray::Axis(2), c);
            let dst = resample_bilinear_2d(&src.to_owned(), new_h, new_w);
            for y in 0..new_h {
                for x in 0..new_w {
                    out.data[[y, x, c]] = dst[[y, x]];
                }
            }
        }
        out
    }
}

/// Binary anomaly mask, `true` = anomalous pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitMask {
    pub data: Array2<bool>,
}

impl BitMask {
    pub fn zeros(height: usize, width: usize) -> Self {
        BitMask {
            data: Array2::from_elem((height, width), false),
        }
    }

    pub fn height(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| Error::Data(format!("cannot read mask {}: {e}", path.display())))?
            .to_luma8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut mask = BitMask::zeros(h, w);
        for y in 0..h {
            for x in 0..w {
                mask.data[[y, x]] = img.get_pixel(x as u32, y as u32).0[0] != 0;
            }
        }
        Ok(mask)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let mut img = image::GrayImage::new(self.width() as u32, self.height() as u32);
        for y in 0..self.height() {
            for x in 0..self.width() {
                let v = if self.data[[y, x]] { 255 } else { 0 };
                img.put_pixel(x as u32, y as u32, image::Luma([v]));
            }
        }
        img.save(path)
            .map_err(|e| Error::Data(format!("cannot write mask {}: {e}", path.display())))
    }
}

/// Bilinear resample of a single-channel grid, half-pixel-center convention.
pub fn resample_bilinear_2d(src: &Array2<f64>, new_h: usize, new_w: usize) -> Array2<f64> {
    let (h, w) = (src.shape()[0], src.shape()[1]);
    let mut out = Array2::zeros((new_h, new_w));
    let sy = h as f64 / new_h as f64;
    let sx = w as f64 / new_w as f64;
    for y in 0..new_h {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let wy = fy - y0 as f64;
        for x in 0..new_w {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let wx = fx - x0 as f64;
            out[[y, x]] = src[[y0, x0]] * (1.0 - wy) * (1.0 - wx)
                + src[[y0, x1]] * (1.0 - wy) * wx
                + src[[y1, x0]] * wy * (1.0 - wx)
                + src[[y1, x1]] * wy * wx;
        }
    }
    out
}

/// Separable Gaussian smoothing with reflect padding; kernel truncated at
/// `4 * sigma` to match the usual scientific-stack default.
pub fn gaussian_smooth_2d(src: &Array2<f64>, sigma: f64) -> Array2<f64> {
    if sigma <= 0.0 {
        return src.clone();
    }
    let radius = (4.0 * sigma).ceil() as i64;
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    for i in -radius..=radius {
        kernel.push((-0.5 * (i as f64 / sigma).powi(2)).exp());
    }
    let s: f64 = kernel.iter().sum();
    for k in kernel.iter_mut() {
        *k /= s;
    }
    let (h, w) = (src.shape()[0] as i64, src.shape()[1] as i64);
    let reflect = |i: i64, n: i64| -> usize {
        // reflect including the edge pixel: -1 -> 0, n -> n-1
        let mut i = i;
        loop {
            if i < 0 {
                i = -i - 1;
            } else if i >= n {
                i = 2 * n - i - 1;
            } else {
                return i as usize;
            }
        }
    };
    let mut tmp = Array2::zeros((h as usize, w as usize));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (j, k) in kernel.iter().enumerate() {
                let xx = reflect(x + j as i64 - radius, w);
                acc += k * src[[y as usize, xx]];
            }
            tmp[[y as usize, x as usize]] = acc;
        }
    }
    let mut out = Array2::zeros((h as usize, w as usize));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (j, k) in kernel.iter().enumerate() {
                let yy = reflect(y + j as i64 - radius, h);
                acc += k * tmp[[yy, x as usize]];
            }
            out[[y as usize, x as usize]] = acc;
        }
    }
    out
}
