//! Dense f64 image buffers. Channel-planar layout (all of R, then G, then B)
//! so an RGB image is directly usable as a 3-channel tensor by the refiner.

use alloc::vec;
use alloc::vec::Vec;

#[derive(Clone, Debug, PartialEq)]
pub struct ImageRgb {
    pub width: usize,
    pub height: usize,
    /// len = 3 * width * height, index (c * height + y) * width + x.
    pub data: Vec<f64>,
}

impl ImageRgb {
    pub fn zeros(width: usize, height: usize) -> ImageRgb {
        ImageRgb { width, height, data: vec![0.0; 3 * width * height] }
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> ImageRgb {
        let mut img = ImageRgb::zeros(width, height);
        for c in 0..3 {
            let plane = &mut img.data[c * width * height..(c + 1) * width * height];
            plane.fill(rgb[c]);
        }
        img
    }

    #[inline]
    pub fn idx(&self, c: usize, x: usize, y: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, x: usize, y: usize) -> f64 {
        self.data[self.idx(c, x, y)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, x: usize, y: usize, v: f64) {
        let i = self.idx(c, x, y);
        self.data[i] = v;
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        [self.get(0, x, y), self.get(1, x, y), self.get(2, x, y)]
    }

    /// One channel as a gray view (copies).
    pub fn channel(&self, c: usize) -> ImageGray {
        let n = self.width * self.height;
        ImageGray {
            width: self.width,
            height: self.height,
            data: self.data[c * n..(c + 1) * n].to_vec(),
        }
    }

    /// Mean squared error over all 3*h*w samples.
    pub fn mse(&self, other: &ImageRgb) -> f64 {
        assert_eq!(self.data.len(), other.data.len(), "image shape mismatch");
        let mut acc = 0.0;
        for (a, b) in self.data.iter().zip(&other.data) {
            let d = a - b;
            acc += d * d;
        }
        acc / self.data.len() as f64
    }

    pub fn clamp01(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageGray {
    pub width: usize,
    pub height: usize,
    /// len = width * height, row-major.
    pub data: Vec<f64>,
}

impl ImageGray {
    pub fn zeros(width: usize, height: usize) -> ImageGray {
        ImageGray { width, height, data: vec![0.0; width * height] }
    }

    pub fn filled(width: usize, height: usize, v: f64) -> ImageGray {
        ImageGray { width, height, data: vec![v; width * height] }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn planar_indexing() {
        let mut img = ImageRgb::zeros(4, 3);
        img.set(2, 1, 2, 0.5);
        assert_eq!(img.get(2, 1, 2), 0.5);
        assert_eq!(img.data[(2 * 3 + 2) * 4 + 1], 0.5);
    }

    #[test]
    fn mse_of_identical_images_is_zero() {
        let img = ImageRgb::filled(8, 8, [0.3, 0.6, 0.9]);
        assert_eq!(img.mse(&img.clone()), 0.0);
    }

    #[test]
    fn mse_of_constant_offset() {
        let a = ImageRgb::filled(8, 8, [0.0, 0.0, 0.0]);
        let b = ImageRgb::filled(8, 8, [0.5, 0.5, 0.5]);
        assert!((a.mse(&b) - 0.25).abs() < 1e-15);
    }
}
