use crate::error::{Error, Result};

/// RGB image with `f64` channels in row-major `(y, x, channel)` order.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::invalid(format!(
                "{}x{} RGB image needs {} values, got {}",
                width,
                height,
                width * height * 3,
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Self { width, height, data: vec![value; width * height * 3] }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn same_size(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn flip_horizontal(&self) -> Image {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                out.set_pixel(self.width - 1 - x, y, self.pixel(x, y));
            }
        }
        out
    }

    /// One channel as a `height × width` plane.
    pub fn channel(&self, c: usize) -> Vec<f64> {
        self.data.iter().skip(c).step_by(3).copied().collect()
    }
}

/// Pixel-center coordinates in normalized units.
///
/// The longer image side spans `[-1, 1]` edge to edge and the shorter side
/// is scaled by the same factor, so a `64×32` image covers
/// `[-1, 1] × [-0.5, 0.5]`. Pixel `(x, y)` sits at
/// `((x + 0.5 − w/2)·s, (y + 0.5 − h/2)·s)` with `s = 2 / max(w, h)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct PixelGrid {
    pub width: usize,
    pub height: usize,
}

impl PixelGrid {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height }
    }

    pub fn scale(&self) -> f64 {
        2.0 / self.width.max(self.height) as f64
    }

    pub fn to_normalized(&self, x: f64, y: f64) -> (f64, f64) {
        let s = self.scale();
        ((x + 0.5 - self.width as f64 / 2.0) * s, (y + 0.5 - self.height as f64 / 2.0) * s)
    }

    /// Inverse of [`to_normalized`](Self::to_normalized), in pixel index units.
    pub fn to_pixel(&self, u: f64, v: f64) -> (f64, f64) {
        let s = self.scale();
        (u / s + self.width as f64 / 2.0 - 0.5, v / s + self.height as f64 / 2.0 - 0.5)
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(u, v)` of every pixel center in row-major order.
    pub fn coords(&self) -> Vec<[f64; 2]> {
        let mut out = Vec::with_capacity(self.len());
        for y in 0..self.height {
            for x in 0..self.width {
                let (u, v) = self.to_normalized(x as f64, y as f64);
                out.push([u, v]);
            }
        }
        out
    }

    /// Extent covered by pixel edges along each axis: `(u_min, u_max, v_min, v_max)`.
    pub fn extent(&self) -> (f64, f64, f64, f64) {
        let s = self.scale();
        let hw = self.width as f64 * s / 2.0;
        let hh = self.height as f64 * s / 2.0;
        (-hw, hw, -hh, hh)
    }
}
