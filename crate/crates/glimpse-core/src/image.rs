//! Image container with a normalized coordinate frame and the bilinear
//! sampling shared by the glimpse sampler, dataset synthesis and the
//! differentiable pixels-to-glimpse path.
//!
//! The frame: the image center is (0,0) and the longer side spans [-1, 1].
//! Row index grows with +y, column index with +x. Samples outside the image
//! read as zero.

use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;

use crate::real::Real;

/// Four-neighbor bilinear footprint of one sample point.
///
/// Weights of neighbors that fall outside the image are zero, which makes
/// intensities fade to the zero padding across the border band.
#[derive(Clone, Copy, Debug)]
pub struct BilinearTap {
    pub y0: i64,
    pub x0: i64,
    /// (w00, w01, w10, w11) for (y0,x0), (y0,x0+1), (y0+1,x0), (y0+1,x0+1).
    pub w: [f64; 4],
}

impl BilinearTap {
    /// Tap for pixel-space coordinates (u, v) measured in pixel centers.
    pub fn at(u: f64, v: f64) -> Self {
        // Degenerate coordinates (attacked or warped images never produce
        // them, but the sampler contract allows any input).
        if !u.is_finite() || !v.is_finite() || u.abs() > 1e12 || v.abs() > 1e12 {
            return BilinearTap { y0: 0, x0: 0, w: [0.0; 4] };
        }
        let x0 = u.floor();
        let y0 = v.floor();
        let fx = u - x0;
        let fy = v - y0;
        BilinearTap {
            y0: y0 as i64,
            x0: x0 as i64,
            w: [
                (1.0 - fx) * (1.0 - fy),
                fx * (1.0 - fy),
                (1.0 - fx) * fy,
                fx * fy,
            ],
        }
    }

    /// Valid (flat pixel index, weight) pairs for an `h` x `w` grid.
    pub fn iter_valid(&self, h: usize, w: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let (y0, x0) = (self.y0, self.x0);
        [(y0, x0, 0), (y0, x0 + 1, 1), (y0 + 1, x0, 2), (y0 + 1, x0 + 1, 3)]
            .into_iter()
            .filter(move |&(y, x, wi)| {
                y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w && self.w[wi] != 0.0
            })
            .map(move |(y, x, wi)| ((y as usize) * w + (x as usize), self.w[wi]))
    }
}

/// Dense H x W x C image, row-major, intensities nominally in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBuffer<T> {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<T>,
}

impl<T: Real> ImageBuffer<T> {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<T>) -> Self {
        assert!(height > 0 && width > 0 && channels > 0);
        assert_eq!(data.len(), height * width * channels);
        ImageBuffer { height, width, channels, data }
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::new(height, width, channels, vec![T::zero(); height * width * channels])
    }

    pub fn constant(height: usize, width: usize, channels: usize, v: T) -> Self {
        Self::new(height, width, channels, vec![v; height * width * channels])
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> T {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: T) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    /// Normalized units per pixel: the longer side spans length 2.
    #[inline]
    pub fn norm_scale(&self) -> f64 {
        2.0 / self.height.max(self.width) as f64
    }

    /// Center of pixel (x index, y index) in normalized coordinates.
    pub fn pixel_to_norm(&self, ix: usize, iy: usize) -> (f64, f64) {
        let s = self.norm_scale();
        let x = ((ix as f64 + 0.5) - self.width as f64 / 2.0) * s;
        let y = ((iy as f64 + 0.5) - self.height as f64 / 2.0) * s;
        (x, y)
    }

    /// Normalized coordinates to continuous pixel-center coordinates (u, v).
    pub fn norm_to_pixel(&self, x: f64, y: f64) -> (f64, f64) {
        let s = self.norm_scale();
        let u = x / s + self.width as f64 / 2.0 - 0.5;
        let v = y / s + self.height as f64 / 2.0 - 0.5;
        (u, v)
    }

    pub fn tap_at_norm(&self, x: f64, y: f64) -> BilinearTap {
        let (u, v) = self.norm_to_pixel(x, y);
        BilinearTap::at(u, v)
    }

    /// Bilinear sample at pixel-space coordinates; zero outside the image.
    pub fn sample_px(&self, u: f64, v: f64, c: usize) -> T {
        let tap = BilinearTap::at(u, v);
        let mut acc = 0.0f64;
        for (idx, wgt) in tap.iter_valid(self.height, self.width) {
            acc += wgt * self.data[idx * self.channels + c].to_f64();
        }
        T::from_f64(acc)
    }

    /// Bilinear sample at normalized coordinates; zero outside the image.
    pub fn sample_norm(&self, x: f64, y: f64, c: usize) -> T {
        let (u, v) = self.norm_to_pixel(x, y);
        self.sample_px(u, v, c)
    }

    pub fn convert<U: Real>(&self) -> ImageBuffer<U> {
        ImageBuffer {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|&v| U::from_f64(v.to_f64())).collect(),
        }
    }

    /// Rotation by `angle` radians about a point given in normalized
    /// coordinates, resampled bilinearly (zero outside).
    pub fn rotate_about(&self, cx: f64, cy: f64, angle: f64) -> Self {
        let (cu, cv) = self.norm_to_pixel(cx, cy);
        let (sin, cos) = angle.sin_cos();
        self.inverse_warp(|u, v| {
            let (du, dv) = (u - cu, v - cv);
            // inverse rotation of the output offset
            (cu + cos * du + sin * dv, cv - sin * du + cos * dv)
        })
    }

    /// Magnification by `factor` about a point in normalized coordinates:
    /// content at offset d from the point moves to offset d * factor.
    pub fn scale_about(&self, cx: f64, cy: f64, factor: f64) -> Self {
        assert!(factor > 0.0);
        let (cu, cv) = self.norm_to_pixel(cx, cy);
        self.inverse_warp(|u, v| (cu + (u - cu) / factor, cv + (v - cv) / factor))
    }

    fn inverse_warp(&self, src_of_dst: impl Fn(f64, f64) -> (f64, f64)) -> Self {
        let mut out = Self::zeros(self.height, self.width, self.channels);
        for y in 0..self.height {
            for x in 0..self.width {
                let (su, sv) = src_of_dst(x as f64, y as f64);
                for c in 0..self.channels {
                    out.set(y, x, c, self.sample_px(su, sv, c));
                }
            }
        }
        out
    }

    /// Separable Gaussian blur with standard deviation `sigma` pixels,
    /// zero padded at the borders. Used to build smooth test images.
    pub fn gaussian_blur(&self, sigma: f64) -> Self {
        assert!(sigma > 0.0);
        let radius = (3.0 * sigma).ceil() as i64;
        let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
        let mut norm = 0.0f64;
        for i in -radius..=radius {
            let v = (-0.5 * (i as f64 / sigma).powi(2)).exp();
            kernel.push(v);
            norm += v;
        }
        for v in kernel.iter_mut() {
            *v /= norm;
        }

        let (h, w, c) = (self.height, self.width, self.channels);
        let mut tmp = vec![0.0f64; h * w * c];
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    let mut acc = 0.0;
                    for (ki, kv) in kernel.iter().enumerate() {
                        let sx = x as i64 + ki as i64 - radius;
                        if sx >= 0 && (sx as usize) < w {
                            acc += kv * self.get(y, sx as usize, ch).to_f64();
                        }
                    }
                    tmp[(y * w + x) * c + ch] = acc;
                }
            }
        }
        let mut out = Self::zeros(h, w, c);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    let mut acc = 0.0;
                    for (ki, kv) in kernel.iter().enumerate() {
                        let sy = y as i64 + ki as i64 - radius;
                        if sy >= 0 && (sy as usize) < h {
                            acc += kv * tmp[(sy as usize * w + x) * c + ch];
                        }
                    }
                    out.set(y, x, ch, T::from_f64(acc));
                }
            }
        }
        out
    }

    pub fn min_intensity(&self) -> T {
        self.data.iter().copied().fold(T::infinity(), T::min)
    }

    pub fn max_intensity(&self) -> T {
        self.data.iter().copied().fold(T::neg_infinity(), T::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pixel_center_sample_is_exact() {
        let mut img = ImageBuffer::<f64>::zeros(4, 6, 1);
        img.set(2, 3, 0, 0.625);
        let (x, y) = img.pixel_to_norm(3, 2);
        assert_eq!(img.sample_norm(x, y, 0), 0.625);
    }

    #[test]
    fn constant_image_in_hull_is_constant() {
        // queries inside the pixel-center hull of a constant image return
        // the constant exactly (convex combination of equal values)
        let img = ImageBuffer::<f64>::constant(5, 5, 1, 0.7);
        for i in 0..50 {
            let u = 0.5 + 3.0 * (i as f64) / 50.0;
            let v = 3.9 - 3.3 * (i as f64) / 50.0;
            let got = img.sample_px(u, v, 0);
            assert!((got - 0.7).abs() < 1e-12, "sample at ({u},{v}) was {got}");
        }
    }

    #[test]
    fn far_outside_is_zero() {
        let img = ImageBuffer::<f64>::constant(5, 5, 1, 0.7);
        assert_eq!(img.sample_norm(10.0, -3.0, 0), 0.0);
        assert_eq!(img.sample_px(-50.0, 2.0, 0), 0.0);
    }

    #[test]
    fn longer_side_spans_two() {
        let img = ImageBuffer::<f64>::zeros(10, 20, 1);
        let (x0, _) = img.pixel_to_norm(0, 0);
        let (x1, _) = img.pixel_to_norm(19, 0);
        // pixel centers sit half a pixel inside the [-1,1] span
        let s = img.norm_scale();
        assert!((x0 - (-1.0 + 0.5 * s)).abs() < 1e-12);
        assert!((x1 - (1.0 - 0.5 * s)).abs() < 1e-12);
        // shorter side spans proportionally less
        let (_, y0) = img.pixel_to_norm(0, 0);
        assert!(y0 > -1.0 + 0.4);
    }

    #[test]
    fn rotation_by_pi_is_pixel_permutation() {
        let mut img = ImageBuffer::<f64>::zeros(6, 6, 1);
        for y in 0..6 {
            for x in 0..6 {
                img.set(y, x, 0, (y * 6 + x) as f64 / 36.0);
            }
        }
        let rot = img.rotate_about(0.0, 0.0, core::f64::consts::PI);
        for y in 0..6 {
            for x in 0..6 {
                let want = img.get(5 - y, 5 - x, 0);
                let got = rot.get(y, x, 0);
                assert!((got - want).abs() < 1e-12);
            }
        }
    }
}
