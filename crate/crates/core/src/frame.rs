//! Frames, binary masks and mask logits.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// An `H × W` RGB frame with channels in `[0, 1]`, stored row-major HWC.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::Shape(format!("{} values for a {height}x{width}x3 image", data.len())));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(Error::Shape(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(ImageTensor { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        ImageTensor { height, width, data: vec![value.clamp(0.0, 1.0); height * width * 3] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Flattened `p × p` patches in row-major patch order. Each row holds the
    /// patch pixels in `(dy, dx, channel)` order, followed by `extra`'s value
    /// at the same pixels when a mask channel is supplied.
    pub fn patches(&self, patch: usize, extra: Option<&BinaryMask>) -> Result<Tensor> {
        if patch == 0 || self.height % patch != 0 || self.width % patch != 0 {
            return Err(Error::Shape(format!(
                "{}x{} image is not divisible into {patch}-pixel patches",
                self.height, self.width
            )));
        }
        if let Some(m) = extra {
            m.expect_dims(self.height, self.width)?;
        }
        let (gh, gw) = (self.height / patch, self.width / patch);
        let chans = if extra.is_some() { 4 } else { 3 };
        let cols = patch * patch * chans;
        let mut out = Tensor::zeros(gh * gw, cols);
        for gy in 0..gh {
            for gx in 0..gw {
                let row = gy * gw + gx;
                let mut c = 0;
                for dy in 0..patch {
                    for dx in 0..patch {
                        let (x, y) = (gx * patch + dx, gy * patch + dy);
                        for ch in self.pixel(x, y) {
                            out.set(row, c, ch);
                            c += 1;
                        }
                    }
                }
                if let Some(m) = extra {
                    for dy in 0..patch {
                        for dx in 0..patch {
                            let v = m.get(gx * patch + dx, gy * patch + dy) as u8 as f64;
                            out.set(row, c, v);
                            c += 1;
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Zero-padded 3×3 neighbourhoods: one row of 27 values per pixel.
    pub fn neighborhoods(&self) -> Tensor {
        let mut out = Tensor::zeros(self.height * self.width, 27);
        for y in 0..self.height {
            for x in 0..self.width {
                let row = y * self.width + x;
                let mut c = 0;
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let (xx, yy) = (x as i64 + dx, y as i64 + dy);
                        let inside = xx >= 0 && yy >= 0 && (xx as usize) < self.width && (yy as usize) < self.height;
                        let px = if inside { self.pixel(xx as usize, yy as usize) } else { [0.0; 3] };
                        for ch in px {
                            out.set(row, c, ch);
                            c += 1;
                        }
                    }
                }
            }
        }
        out
    }

    /// Bilinear resize, snapped to the 8-bit grid.
    pub fn resized(&self, height: usize, width: usize) -> ImageTensor {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let mut data = Vec::with_capacity(height * width * 3);
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        for y in 0..height {
            let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
            let (y0, ty) = (fy.floor() as usize, fy - fy.floor());
            let y1 = (y0 + 1).min(self.height - 1);
            for x in 0..width {
                let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
                let (x0, tx) = (fx.floor() as usize, fx - fx.floor());
                let x1 = (x0 + 1).min(self.width - 1);
                let (a, b, c, d) = (self.pixel(x0, y0), self.pixel(x1, y0), self.pixel(x0, y1), self.pixel(x1, y1));
                for ch in 0..3 {
                    let top = a[ch] * (1.0 - tx) + b[ch] * tx;
                    let bot = c[ch] * (1.0 - tx) + d[ch] * tx;
                    let v = top * (1.0 - ty) + bot * ty;
                    data.push((v * 255.0).round() / 255.0);
                }
            }
        }
        ImageTensor { height, width, data }
    }
}

/// Boolean foreground mask. Coordinates are `(x, y)` = (column, row).
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn empty(height: usize, width: usize) -> Self {
        BinaryMask { height, width, data: vec![false; height * width] }
    }

    pub fn full(height: usize, width: usize) -> Self {
        BinaryMask { height, width, data: vec![true; height * width] }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!("{} values for a {height}x{width} mask", data.len())));
        }
        Ok(BinaryMask { height, width, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|v| **v).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|v| *v)
    }

    pub fn union(&self, other: &BinaryMask) -> Result<BinaryMask> {
        other.expect_dims(self.height, self.width)?;
        Ok(BinaryMask {
            height: self.height,
            width: self.width,
            data: self.data.iter().zip(&other.data).map(|(a, b)| *a || *b).collect(),
        })
    }

    /// Mask values as `0.0` / `1.0` in row-major order.
    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&b| b as u8 as f64).collect()
    }

    pub(crate) fn expect_dims(&self, height: usize, width: usize) -> Result<()> {
        if self.height != height || self.width != width {
            return Err(Error::Shape(format!("mask is {}x{}, expected {height}x{width}", self.height, self.width)));
        }
        Ok(())
    }

    /// Nearest-neighbour resize.
    pub fn resized(&self, height: usize, width: usize) -> BinaryMask {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let mut out = BinaryMask::empty(height, width);
        for y in 0..height {
            let sy = ((y as f64 + 0.5) * self.height as f64 / height as f64) as usize;
            for x in 0..width {
                let sx = ((x as f64 + 0.5) * self.width as f64 / width as f64) as usize;
                out.set(x, y, self.get(sx.min(self.width - 1), sy.min(self.height - 1)));
            }
        }
        out
    }
}

/// Real-valued per-pixel mask scores; foreground is `logit > 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskLogits {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl MaskLogits {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!("{} logits for a {height}x{width} mask", data.len())));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("mask logits".into()));
        }
        Ok(MaskLogits { height, width, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn binarize(&self) -> BinaryMask {
        BinaryMask { height: self.height, width: self.width, data: self.data.iter().map(|&v| v > 0.0).collect() }
    }
}
