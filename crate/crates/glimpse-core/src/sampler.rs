//! Log-polar field of view: maps the annulus around a fixation point onto a
//! regular [H, W, C] grid.
//!
//! Around a fixation (x_t, y_t), a point at distance r and angle theta has
//! log-polar coordinates (ln r, theta) with theta in [-pi, pi). The field of
//! view is the annulus rho_min < rho < rho_max, divided evenly into H radial
//! by W angular cells; cell (h, w) samples the image at
//! `fixation + e^rho(h) * (cos theta(w), sin theta(w))` with
//! `rho(h) = rho_min + h * (rho_max - rho_min) / (H - 1)` and
//! `theta(w) = -pi + 2*pi*w / W`. Rotations about the fixation become
//! circular shifts along the angular axis and scalings become shifts along
//! the radial axis, which is the property the whole model is built on.

use alloc::vec::Vec;
use core::f64::consts::PI;
use core::fmt;

use crate::image::{BilinearTap, ImageBuffer};
use num_traits::Float;

use crate::real::Real;

/// Fixation point in normalized image coordinates, each axis in [-1, 1].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Fixation {
    pub x: f64,
    pub y: f64,
}

impl Fixation {
    pub fn new(x: f64, y: f64) -> Self {
        Fixation { x, y }
    }

    pub fn clamped(x: f64, y: f64) -> Self {
        Fixation { x: x.clamp(-1.0, 1.0), y: y.clamp(-1.0, 1.0) }
    }
}

/// Geometry of the field of view.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FovConfig {
    /// Radial bins H.
    pub grid_h: usize,
    /// Angular bins W.
    pub grid_w: usize,
    /// Log-radius of the innermost ring, in normalized image units.
    pub rho_min: f64,
    /// Log-radius of the outermost ring.
    pub rho_max: f64,
}

impl FovConfig {
    pub fn new(grid_h: usize, grid_w: usize, rho_min: f64, rho_max: f64) -> Self {
        let cfg = FovConfig { grid_h, grid_w, rho_min, rho_max };
        cfg.validate().expect("invalid FovConfig");
        cfg
    }

    pub fn validate(&self) -> Result<(), SamplerError> {
        if self.grid_h < 2 || self.grid_w < 2 {
            return Err(SamplerError::BadConfig("grid must be at least 2x2"));
        }
        if !(self.rho_min < self.rho_max) {
            return Err(SamplerError::BadConfig("rho_min must be below rho_max"));
        }
        Ok(())
    }

    /// Radial step between adjacent rows.
    pub fn delta_rho(&self) -> f64 {
        (self.rho_max - self.rho_min) / (self.grid_h - 1) as f64
    }

    pub fn rho(&self, h: usize) -> f64 {
        self.rho_min + h as f64 * self.delta_rho()
    }

    pub fn theta(&self, w: usize) -> f64 {
        -PI + 2.0 * PI * w as f64 / self.grid_w as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SamplerError {
    /// Log-polar coordinates are undefined at the fixation point itself.
    ZeroRadius,
    BadConfig(&'static str),
}

impl fmt::Display for SamplerError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SamplerError::ZeroRadius => write!(f, "log-polar coordinates undefined at zero radius"),
            SamplerError::BadConfig(msg) => write!(f, "invalid field-of-view config: {msg}"),
        }
    }
}

/// Log-polar coordinates of `point` relative to `fixation`:
/// rho = ln(distance), theta = atan2(dy, dx) normalized into [-pi, pi).
pub fn logpolar_coords(point: (f64, f64), fixation: Fixation) -> Result<(f64, f64), SamplerError> {
    let dx = point.0 - fixation.x;
    let dy = point.1 - fixation.y;
    let r2 = dx * dx + dy * dy;
    if r2 == 0.0 {
        return Err(SamplerError::ZeroRadius);
    }
    let rho = r2.sqrt().ln();
    let mut theta = dy.atan2(dx);
    if theta >= PI {
        theta -= 2.0 * PI;
    }
    Ok((rho, theta))
}

/// Cartesian sample points of the H x W log-polar grid, row-major in (h, w).
pub fn glimpse_grid(cfg: &FovConfig, fixation: Fixation) -> Vec<(f64, f64)> {
    let mut pts = Vec::with_capacity(cfg.grid_h * cfg.grid_w);
    for h in 0..cfg.grid_h {
        let r = cfg.rho(h).exp();
        for w in 0..cfg.grid_w {
            let (sin, cos) = cfg.theta(w).sin_cos();
            pts.push((fixation.x + r * cos, fixation.y + r * sin));
        }
    }
    pts
}

/// The [H, W, C] log-polar patch.
#[derive(Clone, Debug, PartialEq)]
pub struct GlimpseTensor<T> {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    /// Row-major [H, W, C].
    pub data: Vec<T>,
}

impl<T: Real> GlimpseTensor<T> {
    #[inline]
    pub fn get(&self, h: usize, w: usize, c: usize) -> T {
        self.data[(h * self.w + w) * self.c + c]
    }

    /// Repacks to [C, H, W] (the convolution layout).
    pub fn chw_data(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.data.len());
        for c in 0..self.c {
            for h in 0..self.h {
                for w in 0..self.w {
                    out.push(self.get(h, w, c));
                }
            }
        }
        out
    }
}

/// Bilinear taps for all grid points of a glimpse on a given image.
/// Shared by `extract_glimpse` and the differentiable attack path so both
/// read pixels identically.
pub fn glimpse_taps<T: Real>(
    image: &ImageBuffer<T>,
    fixation: Fixation,
    cfg: &FovConfig,
) -> Vec<BilinearTap> {
    glimpse_grid(cfg, fixation)
        .into_iter()
        .map(|(x, y)| image.tap_at_norm(x, y))
        .collect()
}

/// Extracts the [H, W, C] log-polar glimpse around `fixation`.
pub fn extract_glimpse<T: Real>(
    image: &ImageBuffer<T>,
    fixation: Fixation,
    cfg: &FovConfig,
) -> GlimpseTensor<T> {
    let taps = glimpse_taps(image, fixation, cfg);
    let c = image.channels;
    let mut data = Vec::with_capacity(taps.len() * c);
    for tap in &taps {
        for ch in 0..c {
            let mut acc = 0.0f64;
            for (idx, wgt) in tap.iter_valid(image.height, image.width) {
                acc += wgt * image.data[idx * c + ch].to_f64();
            }
            data.push(T::from_f64(acc));
        }
    }
    GlimpseTensor { h: cfg.grid_h, w: cfg.grid_w, c, data }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn coords_unit_distance() {
        // point one unit to the right of the fixation -> (0, 0)
        let f = Fixation::new(0.2, -0.1);
        let (rho, theta) = logpolar_coords((f.x + 1.0, f.y), f).unwrap();
        assert!(close(rho, 0.0, 1e-15));
        assert!(close(theta, 0.0, 1e-15));
    }

    #[test]
    fn coords_below_at_exp_minus_two() {
        let f = Fixation::new(0.0, 0.0);
        let (rho, theta) = logpolar_coords((0.0, (-2.0f64).exp()), f).unwrap();
        assert!(close(rho, -2.0, 1e-12));
        assert!(close(theta, core::f64::consts::FRAC_PI_2, 1e-15));
    }

    #[test]
    fn coords_negative_x_axis_normalizes_pi() {
        // atan2 returns +pi on the negative x axis; the [-pi, pi) convention
        // maps it to -pi
        let f = Fixation::new(0.3, 0.3);
        let (rho, theta) = logpolar_coords((f.x - 2.0, f.y), f).unwrap();
        assert!(close(rho, (2.0f64).ln(), 1e-15));
        assert_eq!(theta, -PI);
        assert!(theta < PI);
    }

    #[test]
    fn coords_zero_radius_is_error() {
        let f = Fixation::new(0.1, 0.2);
        assert_eq!(logpolar_coords((0.1, 0.2), f), Err(SamplerError::ZeroRadius));
    }

    #[test]
    fn grid_endpoints() {
        let cfg = FovConfig::new(5, 8, -2.0, -0.5);
        let f = Fixation::new(0.1, -0.2);
        let pts = glimpse_grid(&cfg, f);
        // h=0, w=0: fixation + e^rho_min * (cos(-pi), sin(-pi))
        let r0 = (-2.0f64).exp();
        assert!(close(pts[0].0, f.x - r0, 1e-12));
        assert!(close(pts[0].1, f.y, 1e-12));
        // h=H-1: radius e^rho_max for every w
        for w in 0..8 {
            let p = pts[4 * 8 + w];
            let d = ((p.0 - f.x).powi(2) + (p.1 - f.y).powi(2)).sqrt();
            assert!(close(d, (-0.5f64).exp(), 1e-12));
        }
    }

    #[test]
    fn grid_matches_per_element_formula() {
        let cfg = FovConfig::new(4, 6, -1.5, 0.2);
        let f = Fixation::new(-0.3, 0.4);
        let pts = glimpse_grid(&cfg, f);
        for h in 0..4 {
            for w in 0..6 {
                let rho = -1.5 + h as f64 * (0.2 - (-1.5)) / 3.0;
                let theta = -PI + 2.0 * PI * w as f64 / 6.0;
                let want = (f.x + rho.exp() * theta.cos(), f.y + rho.exp() * theta.sin());
                let got = pts[h * 6 + w];
                assert!(close(got.0, want.0, 1e-12) && close(got.1, want.1, 1e-12));
            }
        }
    }

    #[test]
    fn radius_strictly_increasing_in_h() {
        let cfg = FovConfig::new(9, 4, -2.5, -0.1);
        let f = Fixation::new(0.0, 0.0);
        let pts = glimpse_grid(&cfg, f);
        let mut last = 0.0;
        for h in 0..9 {
            let p = pts[h * 4];
            let d = (p.0 * p.0 + p.1 * p.1).sqrt();
            assert!(d > last);
            last = d;
        }
    }

    #[test]
    fn constant_image_gives_constant_glimpse() {
        let img = ImageBuffer::<f32>::constant(32, 32, 1, 0.7);
        let cfg = FovConfig::new(6, 8, (0.05f64).ln(), (0.5f64).ln());
        let g = extract_glimpse(&img, Fixation::new(0.0, 0.0), &cfg);
        for &v in &g.data {
            assert!((v - 0.7).abs() < 1e-6);
        }
    }

    #[test]
    fn glimpse_respects_intensity_range() {
        // all sample points inside the image: samples stay within
        // [min, max] of the image
        let mut img = ImageBuffer::<f64>::zeros(64, 64, 1);
        for y in 0..64 {
            for x in 0..64 {
                img.set(y, x, 0, ((x * 31 + y * 17) % 101) as f64 / 100.0);
            }
        }
        let cfg = FovConfig::new(8, 12, (0.05f64).ln(), (0.6f64).ln());
        let g = extract_glimpse(&img, Fixation::new(0.1, -0.05), &cfg);
        let (lo, hi) = (img.min_intensity(), img.max_intensity());
        for &v in &g.data {
            assert!(v >= lo && v <= hi);
        }
    }

    #[test]
    fn glimpse_deterministic() {
        let mut img = ImageBuffer::<f32>::zeros(48, 48, 1);
        for i in 0..img.data.len() {
            img.data[i] = ((i * 2654435761) % 997) as f32 / 997.0;
        }
        let cfg = FovConfig::new(10, 12, (0.05f64).ln(), (0.8f64).ln());
        let a = extract_glimpse(&img, Fixation::new(0.07, 0.03), &cfg);
        let b = extract_glimpse(&img, Fixation::new(0.07, 0.03), &cfg);
        assert_eq!(a.data, b.data);
    }

    #[test]
    fn chw_repack() {
        let g = GlimpseTensor::<f64> { h: 2, w: 2, c: 2, data: vec![0., 1., 2., 3., 4., 5., 6., 7.] };
        // [h,w,c] -> [c,h,w]
        assert_eq!(g.chw_data(), vec![0., 2., 4., 6., 1., 3., 5., 7.]);
    }
}
