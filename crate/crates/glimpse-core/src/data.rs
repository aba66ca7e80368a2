//! Dataset types, square padding, and synthesis of rotation / scale /
//! translation / clutter perturbed digit datasets.
//!
//! The perturbation pipeline composes rotation, scaling and placement into
//! a single inverse affine warp (one bilinear resample per image), then
//! pastes clutter patches cropped from other digits. Everything is
//! deterministic given the config seed: example i draws from a stream
//! derived from (seed, i).
//!
//! A procedural glyph renderer provides a self-contained base digit set so
//! the pipeline runs without external files; IDX ingestion in the companion
//! crate feeds real digit data through the same types.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::image::ImageBuffer;
use num_traits::Float;

use crate::real::Real;
use crate::seeds;

/// Classified image set.
#[derive(Clone, Debug)]
pub struct LabeledDataset<T> {
    pub images: Vec<ImageBuffer<T>>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl<T: Real> LabeledDataset<T> {
    pub fn new(images: Vec<ImageBuffer<T>>, labels: Vec<usize>, num_classes: usize) -> Self {
        assert_eq!(images.len(), labels.len(), "one label per image");
        assert!(labels.iter().all(|&l| l < num_classes), "label out of range");
        LabeledDataset { images, labels, num_classes }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// All intensities within [0, 1].
    pub fn intensities_in_unit_range(&self) -> bool {
        self.images
            .iter()
            .all(|im| im.data.iter().all(|&v| v >= T::zero() && v <= T::one()))
    }
}

/// Per-pixel padding mask, true where the pixel is synthetic padding.
/// Attacks must leave masked pixels untouched.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PadMask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<bool>,
}

impl PadMask {
    pub fn none(height: usize, width: usize) -> Self {
        PadMask { height, width, data: vec![false; height * width] }
    }

    pub fn padded_count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
}

/// Perturbation ranges for dataset synthesis.
#[derive(Clone, Debug, PartialEq)]
pub struct PerturbConfig {
    /// Canvas height in pixels.
    pub out_size: usize,
    /// Canvas width; None means square.
    pub out_width: Option<usize>,
    /// Rotation range [lo, hi) radians.
    pub rot_range: (f64, f64),
    /// Multiplicative scale range [lo, hi).
    pub scale_range: (f64, f64),
    /// Max digit-center offset from the canvas center, pixels; None places
    /// the digit uniformly anywhere it fits.
    pub translation_range: Option<f64>,
    pub clutter_count: usize,
    /// Clutter patch side, pixels.
    pub clutter_patch: usize,
    pub seed: u64,
}

impl PerturbConfig {
    /// Desk defaults: 96px canvas, full rotation, scale 1..2, digit placed
    /// uniformly anywhere inside the canvas, 8 clutter patches of 8x8.
    pub fn desk_default(seed: u64) -> Self {
        PerturbConfig {
            out_size: 96,
            out_width: None,
            rot_range: (0.0, 2.0 * core::f64::consts::PI),
            scale_range: (1.0, 2.0),
            translation_range: None,
            clutter_count: 8,
            clutter_patch: 8,
            seed,
        }
    }

    /// No-op transform at the base resolution.
    pub fn identity(base_size: usize, seed: u64) -> Self {
        PerturbConfig {
            out_size: base_size,
            out_width: None,
            rot_range: (0.0, 0.0),
            scale_range: (1.0, 1.0),
            translation_range: Some(0.0),
            clutter_count: 0,
            clutter_patch: 8,
            seed,
        }
    }

    pub fn out_dims(&self) -> (usize, usize) {
        (self.out_size, self.out_width.unwrap_or(self.out_size))
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.out_size == 0 {
            return Err(DataError::BadConfig("out_size must be positive"));
        }
        if self.scale_range.0 <= 0.0 || self.scale_range.1 < self.scale_range.0 {
            return Err(DataError::BadConfig("scale range must be positive and ordered"));
        }
        if self.rot_range.1 < self.rot_range.0 {
            return Err(DataError::BadConfig("rotation range must be ordered"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum DataError {
    BadConfig(&'static str),
    /// The scaled, rotated digit cannot fit the canvas.
    DigitExceedsCanvas { index: usize },
}

impl fmt::Display for DataError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DataError::BadConfig(m) => write!(f, "invalid perturbation config: {m}"),
            DataError::DigitExceedsCanvas { index } => {
                write!(f, "scaled digit exceeds the canvas at example {index}")
            }
        }
    }
}

fn uniform_in(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

/// Applies rotation, scale, translation and clutter to every example.
/// Labels are preserved; intensities stay in [0, 1]; example i is fully
/// determined by (cfg.seed, i).
pub fn make_perturbed<T: Real>(
    base: &LabeledDataset<T>,
    cfg: &PerturbConfig,
) -> Result<LabeledDataset<T>, DataError> {
    cfg.validate()?;
    let (oh, ow) = cfg.out_dims();
    let mut images = Vec::with_capacity(base.len());
    for (i, src) in base.images.iter().enumerate() {
        let mut rng = seeds::rng(cfg.seed, &[i as u64]);
        let img = perturb_one(src, base, i, cfg, oh, ow, &mut rng)?;
        images.push(img);
    }
    Ok(LabeledDataset::new(images, base.labels.clone(), base.num_classes))
}

fn perturb_one<T: Real>(
    src: &ImageBuffer<T>,
    base: &LabeledDataset<T>,
    index: usize,
    cfg: &PerturbConfig,
    oh: usize,
    ow: usize,
    rng: &mut ChaCha8Rng,
) -> Result<ImageBuffer<T>, DataError> {
    let angle = uniform_in(rng, cfg.rot_range.0, cfg.rot_range.1);
    let scale = uniform_in(rng, cfg.scale_range.0, cfg.scale_range.1);

    // bounding box of the rotated, scaled digit
    let (sin, cos) = angle.sin_cos();
    let bw = scale * (src.width as f64 * cos.abs() + src.height as f64 * sin.abs());
    let bh = scale * (src.width as f64 * sin.abs() + src.height as f64 * cos.abs());
    if bw > ow as f64 || bh > oh as f64 {
        return Err(DataError::DigitExceedsCanvas { index });
    }

    // digit center placement: anywhere the bbox fits, optionally narrowed
    // around the canvas center by the translation range
    let (ccx, ccy) = (ow as f64 / 2.0, oh as f64 / 2.0);
    let (mut x_lo, mut x_hi) = (bw / 2.0, ow as f64 - bw / 2.0);
    let (mut y_lo, mut y_hi) = (bh / 2.0, oh as f64 - bh / 2.0);
    if let Some(tr) = cfg.translation_range {
        x_lo = x_lo.max(ccx - tr);
        x_hi = x_hi.min(ccx + tr);
        y_lo = y_lo.max(ccy - tr);
        y_hi = y_hi.min(ccy + tr);
        if x_lo > x_hi {
            x_lo = ccx;
            x_hi = ccx;
        }
        if y_lo > y_hi {
            y_lo = ccy;
            y_hi = ccy;
        }
    }
    let cx = uniform_in(rng, x_lo, x_hi);
    let cy = uniform_in(rng, y_lo, y_hi);

    // single inverse affine resample: dst pixel -> digit pixel
    let (dcx, dcy) = ((src.width as f64 - 1.0) / 2.0, (src.height as f64 - 1.0) / 2.0);
    let c = src.channels;
    let mut out = ImageBuffer::zeros(oh, ow, c);
    // dst center coordinates use the same pixel-center convention
    let (pcx, pcy) = (cx - 0.5, cy - 0.5);
    for y in 0..oh {
        for x in 0..ow {
            let dx = x as f64 - pcx;
            let dy = y as f64 - pcy;
            let sx = (cos * dx + sin * dy) / scale + dcx;
            let sy = (-sin * dx + cos * dy) / scale + dcy;
            for ch in 0..c {
                out.set(y, x, ch, src.sample_px(sx, sy, ch));
            }
        }
    }

    // clutter: pixel-aligned crops from other digits, max-blended
    if cfg.clutter_count > 0 && base.len() > 1 {
        let p = cfg.clutter_patch;
        for _ in 0..cfg.clutter_count {
            let mut donor_idx = rng.gen_range(0..base.len());
            if donor_idx == index {
                donor_idx = (donor_idx + 1) % base.len();
            }
            let donor = &base.images[donor_idx];
            if donor.width < p || donor.height < p || ow < p || oh < p {
                continue;
            }
            let sx = rng.gen_range(0..=donor.width - p);
            let sy = rng.gen_range(0..=donor.height - p);
            let dx = rng.gen_range(0..=ow - p);
            let dy = rng.gen_range(0..=oh - p);
            for yy in 0..p {
                for xx in 0..p {
                    for ch in 0..c {
                        let v = donor.get(sy + yy, sx + xx, ch);
                        let cur = out.get(dy + yy, dx + xx, ch);
                        if v > cur {
                            out.set(dy + yy, dx + xx, ch, v);
                        }
                    }
                }
            }
        }
    }

    for v in out.data.iter_mut() {
        *v = (*v).max(T::zero()).min(T::one());
    }
    Ok(out)
}

// ── Square padding ──────────────────────────────────────────────────────

/// Zero-pads the short side symmetrically to a square (odd remainders put
/// the extra pixel at the bottom or right), then bilinearly resizes to
/// `target` x `target`. Returns the image and the mask of padded pixels.
/// Already-square images of the target size pass through bit-identically.
pub fn square_pad_resize<T: Real>(
    image: &ImageBuffer<T>,
    target: usize,
) -> (ImageBuffer<T>, PadMask) {
    assert!(target >= 1);
    let side = image.height.max(image.width);
    let pad_top = (side - image.height) / 2;
    let pad_left = (side - image.width) / 2;
    let c = image.channels;

    let mut squared = ImageBuffer::zeros(side, side, c);
    let mut mask = PadMask { height: side, width: side, data: vec![true; side * side] };
    for y in 0..image.height {
        for x in 0..image.width {
            for ch in 0..c {
                squared.set(y + pad_top, x + pad_left, ch, image.get(y, x, ch));
            }
            mask.data[(y + pad_top) * side + (x + pad_left)] = false;
        }
    }

    if side == target {
        return (squared, mask);
    }

    // resize; a destination pixel is padding when its center maps into the
    // padded band
    let scale = side as f64 / target as f64;
    let mut out = ImageBuffer::zeros(target, target, c);
    let mut out_mask = PadMask { height: target, width: target, data: vec![true; target * target] };
    for y in 0..target {
        for x in 0..target {
            let su = (x as f64 + 0.5) * scale - 0.5;
            let sv = (y as f64 + 0.5) * scale - 0.5;
            for ch in 0..c {
                out.set(y, x, ch, squared.sample_px(su, sv, ch));
            }
            let sxi = su.round().clamp(0.0, (side - 1) as f64) as usize;
            let syi = sv.round().clamp(0.0, (side - 1) as f64) as usize;
            out_mask.data[y * target + x] = mask.data[syi * side + sxi];
        }
    }
    (out, out_mask)
}

// ── Procedural digit glyphs ─────────────────────────────────────────────

type Stroke = Vec<(f64, f64)>;

fn circle(cx: f64, cy: f64, rx: f64, ry: f64, n: usize) -> Stroke {
    (0..=n)
        .map(|i| {
            let a = 2.0 * core::f64::consts::PI * i as f64 / n as f64;
            (cx + rx * a.cos(), cy + ry * a.sin())
        })
        .collect()
}

/// Stroke skeletons of the ten digits in a unit box (y grows downward).
fn digit_strokes(digit: usize) -> Vec<Stroke> {
    match digit {
        0 => vec![circle(0.5, 0.5, 0.20, 0.30, 20)],
        1 => vec![vec![(0.36, 0.30), (0.54, 0.18)], vec![(0.54, 0.18), (0.54, 0.82)]],
        2 => vec![
            vec![
                (0.31, 0.34),
                (0.34, 0.24),
                (0.44, 0.18),
                (0.56, 0.18),
                (0.66, 0.24),
                (0.68, 0.34),
                (0.62, 0.46),
                (0.32, 0.80),
            ],
            vec![(0.32, 0.80), (0.70, 0.80)],
        ],
        3 => vec![
            vec![
                (0.33, 0.23),
                (0.45, 0.17),
                (0.59, 0.20),
                (0.64, 0.30),
                (0.59, 0.42),
                (0.47, 0.47),
            ],
            vec![
                (0.47, 0.47),
                (0.61, 0.52),
                (0.67, 0.64),
                (0.60, 0.77),
                (0.45, 0.83),
                (0.33, 0.77),
            ],
        ],
        4 => vec![
            vec![(0.62, 0.82), (0.62, 0.18)],
            vec![(0.62, 0.18), (0.30, 0.62)],
            vec![(0.30, 0.62), (0.74, 0.62)],
        ],
        5 => vec![
            vec![(0.66, 0.18), (0.35, 0.18)],
            vec![(0.35, 0.18), (0.33, 0.45)],
            vec![
                (0.33, 0.45),
                (0.50, 0.41),
                (0.63, 0.47),
                (0.68, 0.59),
                (0.62, 0.74),
                (0.46, 0.82),
                (0.32, 0.75),
            ],
        ],
        6 => vec![
            vec![(0.62, 0.19), (0.46, 0.30), (0.36, 0.46), (0.34, 0.62)],
            circle(0.50, 0.64, 0.16, 0.17, 16),
        ],
        7 => vec![vec![(0.30, 0.19), (0.70, 0.19)], vec![(0.70, 0.19), (0.44, 0.82)]],
        8 => vec![circle(0.5, 0.33, 0.15, 0.15, 16), circle(0.5, 0.66, 0.18, 0.17, 16)],
        9 => vec![
            circle(0.48, 0.35, 0.16, 0.16, 16),
            vec![(0.64, 0.37), (0.62, 0.60), (0.53, 0.82)],
        ],
        _ => panic!("digit out of range"),
    }
}

fn dist_to_segment(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (vx, vy) = (b.0 - a.0, b.1 - a.1);
    let (wx, wy) = (p.0 - a.0, p.1 - a.1);
    let len2 = vx * vx + vy * vy;
    let t = if len2 > 0.0 { ((wx * vx + wy * vy) / len2).clamp(0.0, 1.0) } else { 0.0 };
    let (dx, dy) = (wx - t * vx, wy - t * vy);
    (dx * dx + dy * dy).sqrt()
}

/// Renders `count` handwriting-like digit glyphs at `size` x `size` with
/// per-sample style jitter (slant, scale, offset, stroke width, intensity,
/// control-point noise). Deterministic given the seed.
pub fn synth_digits<T: Real>(count: usize, size: usize, seed: u64) -> LabeledDataset<T> {
    let mut images = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let mut rng = seeds::rng(seed, &[0x679c, i as u64]);
        let digit = rng.gen_range(0..10usize);
        images.push(render_glyph(digit, size, &mut rng));
        labels.push(digit);
    }
    LabeledDataset::new(images, labels, 10)
}

fn render_glyph<T: Real>(digit: usize, size: usize, rng: &mut ChaCha8Rng) -> ImageBuffer<T> {
    let slant = rng.gen_range(-0.18..0.18);
    let scale = rng.gen_range(0.85..1.05);
    let ox = rng.gen_range(-0.04..0.04);
    let oy = rng.gen_range(-0.04..0.04);
    let thickness = rng.gen_range(0.05..0.085);
    let intensity = rng.gen_range(0.78..1.0);

    let strokes: Vec<Stroke> = digit_strokes(digit)
        .into_iter()
        .map(|s| {
            s.into_iter()
                .map(|(x, y)| {
                    let jx = rng.gen_range(-0.012..0.012);
                    let jy = rng.gen_range(-0.012..0.012);
                    // jitter, slant shear, scale about the glyph center
                    let (mut px, mut py) = (x + jx, y + jy);
                    px += slant * (0.5 - py);
                    px = 0.5 + (px - 0.5) * scale + ox;
                    py = 0.5 + (py - 0.5) * scale + oy;
                    (px, py)
                })
                .collect()
        })
        .collect();

    let mut img = ImageBuffer::zeros(size, size, 1);
    let aa = 0.75 / size as f64;
    let half = thickness / 2.0;
    let reach = half + aa;
    for y in 0..size {
        for x in 0..size {
            let p = ((x as f64 + 0.5) / size as f64, (y as f64 + 0.5) / size as f64);
            let mut d = f64::INFINITY;
            for s in &strokes {
                for seg in s.windows(2) {
                    // cheap reject on the segment's expanded bounding box
                    let (a, b) = (seg[0], seg[1]);
                    if p.0 < a.0.min(b.0) - reach
                        || p.0 > a.0.max(b.0) + reach
                        || p.1 < a.1.min(b.1) - reach
                        || p.1 > a.1.max(b.1) + reach
                    {
                        continue;
                    }
                    d = d.min(dist_to_segment(p, a, b));
                    if d == 0.0 {
                        break;
                    }
                }
            }
            let cov = ((half + aa - d) / (2.0 * aa)).clamp(0.0, 1.0);
            if cov > 0.0 {
                img.set(y, x, 0, T::from_f64(intensity * cov));
            }
        }
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_config_is_bitwise() {
        let base = synth_digits::<f32>(12, 28, 5);
        let cfg = PerturbConfig::identity(28, 9);
        let out = make_perturbed(&base, &cfg).unwrap();
        for (a, b) in out.images.iter().zip(&base.images) {
            assert_eq!(a.data, b.data);
        }
        assert_eq!(out.labels, base.labels);
    }

    #[test]
    fn perturb_deterministic_and_labels_preserved() {
        let base = synth_digits::<f32>(10, 28, 5);
        let cfg = PerturbConfig { seed: 123, ..PerturbConfig::desk_default(123) };
        let a = make_perturbed(&base, &cfg).unwrap();
        let b = make_perturbed(&base, &cfg).unwrap();
        for (x, y) in a.images.iter().zip(&b.images) {
            assert_eq!(x.data, y.data);
        }
        assert_eq!(a.labels, base.labels);
        assert!(a.intensities_in_unit_range());
    }

    #[test]
    fn double_pi_rotation_recovers_original() {
        let base = synth_digits::<f64>(3, 28, 7);
        let img = &base.images[0];
        let once = img.rotate_about(0.0, 0.0, core::f64::consts::PI);
        let twice = once.rotate_about(0.0, 0.0, core::f64::consts::PI);
        let mut worst = 0.0f64;
        for (a, b) in twice.data.iter().zip(&img.data) {
            worst = worst.max((a - b).abs());
        }
        assert!(worst <= 0.05, "double rotation error {worst}");
    }

    #[test]
    fn oversized_digit_is_an_error() {
        let base = synth_digits::<f32>(2, 28, 5);
        let cfg = PerturbConfig {
            out_size: 30,
            scale_range: (2.0, 2.0),
            rot_range: (0.8, 0.8),
            ..PerturbConfig::identity(30, 1)
        };
        match make_perturbed(&base, &cfg) {
            Err(DataError::DigitExceedsCanvas { .. }) => {}
            other => panic!("expected canvas error, got {other:?}"),
        }
    }

    #[test]
    fn square_pad_centers_content() {
        // 100x50 pads to 100x100 with 25-pixel zero bands on both sides
        let mut img = ImageBuffer::<f32>::zeros(100, 50, 1);
        for v in img.data.iter_mut() {
            *v = 0.5;
        }
        let (sq, mask) = square_pad_resize(&img, 100);
        assert_eq!((sq.height, sq.width), (100, 100));
        for y in 0..100 {
            for x in 0..100 {
                let inside = (25..75).contains(&x);
                assert_eq!(sq.get(y, x, 0) != 0.0, inside);
                assert_eq!(mask.data[y * 100 + x], !inside);
            }
        }
        assert_eq!(mask.padded_count(), 100 * 50);
    }

    #[test]
    fn square_input_at_target_is_bit_equal() {
        let base = synth_digits::<f32>(1, 28, 3);
        let (out, mask) = square_pad_resize(&base.images[0], 28);
        assert_eq!(out.data, base.images[0].data);
        assert_eq!(mask.padded_count(), 0);
    }

    #[test]
    fn content_aspect_preserved_by_pad_resize() {
        // a blurred blob keeps its bounding-box aspect within 5%
        let mut img = ImageBuffer::<f64>::zeros(60, 40, 1);
        for y in 15..45 {
            for x in 10..30 {
                img.set(y, x, 0, 1.0);
            }
        }
        let img = img.gaussian_blur(1.5);
        let bbox = |im: &ImageBuffer<f64>| {
            let (mut x0, mut x1, mut y0, mut y1) = (usize::MAX, 0usize, usize::MAX, 0usize);
            for y in 0..im.height {
                for x in 0..im.width {
                    if im.get(y, x, 0) > 0.2 {
                        x0 = x0.min(x);
                        x1 = x1.max(x);
                        y0 = y0.min(y);
                        y1 = y1.max(y);
                    }
                }
            }
            (x1 - x0 + 1) as f64 / (y1 - y0 + 1) as f64
        };
        let before = bbox(&img);
        let (out, _) = square_pad_resize(&img, 90);
        let after = bbox(&out);
        assert!(
            (after / before - 1.0).abs() <= 0.05,
            "aspect drifted: {before} -> {after}"
        );
    }

    #[test]
    fn glyphs_deterministic_and_distinct() {
        let a = synth_digits::<f32>(20, 28, 11);
        let b = synth_digits::<f32>(20, 28, 11);
        for (x, y) in a.images.iter().zip(&b.images) {
            assert_eq!(x.data, y.data);
        }
        assert!(a.intensities_in_unit_range());
        // each class renders something nonempty and classes differ
        let c = synth_digits::<f32>(200, 28, 1);
        for d in 0..10 {
            assert!(c.labels.contains(&d), "class {d} missing from 200 draws");
        }
        for im in &c.images {
            assert!(im.data.iter().any(|&v| v > 0.5));
        }
    }
}
