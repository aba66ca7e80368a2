//! Portable pixmap input/output and glimpse visualization overlays.
//! PGM (P5) and PPM (P6) keep the renderer free of image codecs.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use glimpse_core::image::ImageBuffer;
use glimpse_core::model::Episode;
use glimpse_core::sampler::{FovConfig, GlimpseTensor};

use num_traits::Float as _;

#[derive(Debug, thiserror::Error)]
pub enum PixmapError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: not a P5/P6 pixmap ({what})")]
    Format { path: String, what: String },
}

fn io_err(path: &Path, source: std::io::Error) -> PixmapError {
    PixmapError::Io { path: path.display().to_string(), source }
}

/// Writes a grayscale (1 channel) or RGB (3 channels) image as P5/P6.
pub fn write_pixmap(path: &Path, image: &ImageBuffer<f32>) -> Result<(), PixmapError> {
    let f = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = std::io::BufWriter::new(f);
    let tag = match image.channels {
        1 => "P5",
        3 => "P6",
        c => {
            return Err(PixmapError::Format {
                path: path.display().to_string(),
                what: format!("{c} channels"),
            })
        }
    };
    write!(w, "{tag}\n{} {}\n255\n", image.width, image.height).map_err(|e| io_err(path, e))?;
    let bytes: Vec<u8> =
        image.data.iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8).collect();
    w.write_all(&bytes).map_err(|e| io_err(path, e))?;
    w.flush().map_err(|e| io_err(path, e))
}

/// Reads a binary P5/P6 pixmap into intensities in [0, 1].
pub fn read_pixmap(path: &Path) -> Result<ImageBuffer<f32>, PixmapError> {
    let f = std::fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut r = BufReader::new(f);
    let bad = |what: &str| PixmapError::Format {
        path: path.display().to_string(),
        what: what.to_string(),
    };

    let mut header_fields = Vec::new();
    let mut magic = [0u8; 2];
    r.read_exact(&mut magic).map_err(|e| io_err(path, e))?;
    let channels = match &magic {
        b"P5" => 1usize,
        b"P6" => 3usize,
        _ => return Err(bad("bad magic")),
    };
    // header: width, height, maxval as whitespace-separated tokens with
    // optional comment lines
    while header_fields.len() < 3 {
        let mut line = String::new();
        if r.read_line(&mut line).map_err(|e| io_err(path, e))? == 0 {
            return Err(bad("truncated header"));
        }
        let line = line.split('#').next().unwrap_or("");
        for tok in line.split_whitespace() {
            header_fields.push(tok.parse::<usize>().map_err(|_| bad("non-numeric header"))?);
        }
    }
    let (width, height, maxval) = (header_fields[0], header_fields[1], header_fields[2]);
    if maxval != 255 {
        return Err(bad("only maxval 255 supported"));
    }
    let mut bytes = vec![0u8; width * height * channels];
    r.read_exact(&mut bytes).map_err(|e| io_err(path, e))?;
    let data: Vec<f32> = bytes.iter().map(|&b| b as f32 / 255.0).collect();
    Ok(ImageBuffer::new(height, width, channels, data))
}

/// Renders the [H, W, C] glimpse as a pixmap (W across, H down).
pub fn glimpse_to_image(g: &GlimpseTensor<f32>) -> ImageBuffer<f32> {
    let mut out = ImageBuffer::zeros(g.h, g.w, g.c.min(3));
    for h in 0..g.h {
        for w in 0..g.w {
            for c in 0..out.channels {
                out.set(h, w, c, g.get(h, w, c).clamp(0.0, 1.0));
            }
        }
    }
    out
}

fn to_rgb(image: &ImageBuffer<f32>) -> ImageBuffer<f32> {
    if image.channels == 3 {
        return image.clone();
    }
    let mut out = ImageBuffer::zeros(image.height, image.width, 3);
    for y in 0..image.height {
        for x in 0..image.width {
            let v = image.get(y, x, 0);
            for c in 0..3 {
                out.set(y, x, c, v);
            }
        }
    }
    out
}

fn put_rgb(img: &mut ImageBuffer<f32>, x: i64, y: i64, color: [f32; 3]) {
    if x < 0 || y < 0 || x as usize >= img.width || y as usize >= img.height {
        return;
    }
    for (c, &v) in color.iter().enumerate() {
        img.set(y as usize, x as usize, c, v);
    }
}

fn draw_circle(img: &mut ImageBuffer<f32>, cx: f64, cy: f64, r: f64, color: [f32; 3]) {
    let steps = (2.0 * std::f64::consts::PI * r).ceil().max(16.0) as usize;
    for i in 0..steps {
        let a = 2.0 * std::f64::consts::PI * i as f64 / steps as f64;
        put_rgb(img, (cx + r * a.cos()).round() as i64, (cy + r * a.sin()).round() as i64, color);
    }
}

fn draw_line(img: &mut ImageBuffer<f32>, x0: f64, y0: f64, x1: f64, y1: f64, color: [f32; 3]) {
    let n = ((x1 - x0).abs().max((y1 - y0).abs()).ceil() as usize).max(1);
    for i in 0..=n {
        let t = i as f64 / n as f64;
        put_rgb(
            img,
            (x0 + t * (x1 - x0)).round() as i64,
            (y0 + t * (y1 - y0)).round() as i64,
            color,
        );
    }
}

fn draw_marker(img: &mut ImageBuffer<f32>, x: f64, y: f64, color: [f32; 3]) {
    for d in -2i64..=2 {
        put_rgb(img, x.round() as i64 + d, y.round() as i64, color);
        put_rgb(img, x.round() as i64, y.round() as i64 + d, color);
    }
}

/// Source image with the field-of-view annuli of the final fixation and
/// the whole fixation trajectory overlaid (one marker per glimpse).
pub fn trajectory_overlay(
    image: &ImageBuffer<f32>,
    episode: &Episode,
    fov: &FovConfig,
) -> ImageBuffer<f32> {
    let mut out = to_rgb(image);
    let px_per_unit = 1.0 / image.norm_scale();
    let green = [0.1, 0.9, 0.2];
    let red = [0.95, 0.15, 0.1];
    let blue = [0.2, 0.4, 1.0];

    for pair in episode.fixations.windows(2) {
        let (u0, v0) = image.norm_to_pixel(pair[0].x, pair[0].y);
        let (u1, v1) = image.norm_to_pixel(pair[1].x, pair[1].y);
        draw_line(&mut out, u0, v0, u1, v1, blue);
    }
    for f in &episode.fixations {
        let (u, v) = image.norm_to_pixel(f.x, f.y);
        draw_marker(&mut out, u, v, red);
    }
    if let Some(last) = episode.fixations.last() {
        let (u, v) = image.norm_to_pixel(last.x, last.y);
        draw_circle(&mut out, u, v, fov.rho_min.exp() * px_per_unit, green);
        draw_circle(&mut out, u, v, fov.rho_max.exp() * px_per_unit, green);
    }
    out
}
