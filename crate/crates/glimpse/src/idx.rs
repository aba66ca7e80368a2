//! IDX dataset files: big-endian headers, u8 payload.
//!
//! Image files carry magic 2051 (dtype 0x08, 3 dims), label files 2049
//! (dtype 0x08, 1 dim). Pixels map to intensities by /255; writing rounds
//! back, so a read-write-read cycle is byte-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use glimpse_core::data::{LabeledDataset, PadMask};
use glimpse_core::image::ImageBuffer;

pub const IMAGES_MAGIC: u32 = 2051;
pub const LABELS_MAGIC: u32 = 2049;

#[derive(Debug, thiserror::Error)]
pub enum IdxError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: bad magic {found} (expected {expected})")]
    BadMagic { path: String, expected: u32, found: u32 },
    #[error("{path}: truncated payload")]
    Truncated { path: String },
    #[error("image/label count mismatch: {images} images, {labels} labels")]
    CountMismatch { images: usize, labels: usize },
}

fn io_err(path: &Path, source: std::io::Error) -> IdxError {
    if source.kind() == std::io::ErrorKind::UnexpectedEof {
        IdxError::Truncated { path: path.display().to_string() }
    } else {
        IdxError::Io { path: path.display().to_string(), source }
    }
}

fn read_u32_be(r: &mut impl Read, path: &Path) -> Result<u32, IdxError> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf).map_err(|e| io_err(path, e))?;
    Ok(u32::from_be_bytes(buf))
}

/// Raw image payload of an IDX image file.
pub fn read_idx_images(path: &Path) -> Result<Vec<ImageBuffer<f32>>, IdxError> {
    let f = File::open(path).map_err(|e| io_err(path, e))?;
    let mut r = BufReader::new(f);
    let magic = read_u32_be(&mut r, path)?;
    if magic != IMAGES_MAGIC {
        return Err(IdxError::BadMagic {
            path: path.display().to_string(),
            expected: IMAGES_MAGIC,
            found: magic,
        });
    }
    let count = read_u32_be(&mut r, path)? as usize;
    let h = read_u32_be(&mut r, path)? as usize;
    let w = read_u32_be(&mut r, path)? as usize;
    let mut images = Vec::with_capacity(count);
    let mut buf = vec![0u8; h * w];
    for _ in 0..count {
        r.read_exact(&mut buf).map_err(|e| io_err(path, e))?;
        let data: Vec<f32> = buf.iter().map(|&b| b as f32 / 255.0).collect();
        images.push(ImageBuffer::new(h, w, 1, data));
    }
    Ok(images)
}

pub fn read_idx_labels(path: &Path) -> Result<Vec<usize>, IdxError> {
    let f = File::open(path).map_err(|e| io_err(path, e))?;
    let mut r = BufReader::new(f);
    let magic = read_u32_be(&mut r, path)?;
    if magic != LABELS_MAGIC {
        return Err(IdxError::BadMagic {
            path: path.display().to_string(),
            expected: LABELS_MAGIC,
            found: magic,
        });
    }
    let count = read_u32_be(&mut r, path)? as usize;
    let mut buf = vec![0u8; count];
    r.read_exact(&mut buf).map_err(|e| io_err(path, e))?;
    Ok(buf.into_iter().map(usize::from).collect())
}

/// Loads an image/label IDX pair into a dataset.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<LabeledDataset<f32>, IdxError> {
    let images = read_idx_images(images_path)?;
    let labels = read_idx_labels(labels_path)?;
    if images.len() != labels.len() {
        return Err(IdxError::CountMismatch { images: images.len(), labels: labels.len() });
    }
    let num_classes = labels.iter().copied().max().map_or(1, |m| m + 1).max(10);
    Ok(LabeledDataset::new(images, labels, num_classes))
}

pub fn write_idx_images(path: &Path, images: &[ImageBuffer<f32>]) -> Result<(), IdxError> {
    let f = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(f);
    let (h, iw) = (images[0].height, images[0].width);
    w.write_all(&IMAGES_MAGIC.to_be_bytes()).map_err(|e| io_err(path, e))?;
    w.write_all(&(images.len() as u32).to_be_bytes()).map_err(|e| io_err(path, e))?;
    w.write_all(&(h as u32).to_be_bytes()).map_err(|e| io_err(path, e))?;
    w.write_all(&(iw as u32).to_be_bytes()).map_err(|e| io_err(path, e))?;
    let mut buf = Vec::with_capacity(h * iw);
    for img in images {
        assert_eq!((img.height, img.width, img.channels), (h, iw, 1), "uniform grayscale set");
        buf.clear();
        buf.extend(img.data.iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
        w.write_all(&buf).map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

pub fn write_idx_labels(path: &Path, labels: &[usize]) -> Result<(), IdxError> {
    let f = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(f);
    w.write_all(&LABELS_MAGIC.to_be_bytes()).map_err(|e| io_err(path, e))?;
    w.write_all(&(labels.len() as u32).to_be_bytes()).map_err(|e| io_err(path, e))?;
    let bytes: Vec<u8> = labels.iter().map(|&l| l as u8).collect();
    w.write_all(&bytes).map_err(|e| io_err(path, e))?;
    w.flush().map_err(|e| io_err(path, e))
}

/// Pad masks ride in the image layout: 0 = content, 255 = padded.
pub fn write_idx_masks(path: &Path, masks: &[PadMask]) -> Result<(), IdxError> {
    let images: Vec<ImageBuffer<f32>> = masks
        .iter()
        .map(|m| {
            ImageBuffer::new(
                m.height,
                m.width,
                1,
                m.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
            )
        })
        .collect();
    write_idx_images(path, &images)
}

pub fn read_idx_masks(path: &Path) -> Result<Vec<PadMask>, IdxError> {
    Ok(read_idx_images(path)?
        .into_iter()
        .map(|im| PadMask {
            height: im.height,
            width: im.width,
            data: im.data.iter().map(|&v| v > 0.5).collect(),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use glimpse_core::data::synth_digits;

    #[test]
    fn round_trip_is_byte_exact() {
        let dir = tempfile::tempdir().unwrap();
        let ds = synth_digits::<f32>(40, 28, 3);
        let ip = dir.path().join("images-idx3-ubyte");
        let lp = dir.path().join("labels-idx1-ubyte");
        write_idx_images(&ip, &ds.images).unwrap();
        write_idx_labels(&lp, &ds.labels).unwrap();
        let bytes1 = std::fs::read(&ip).unwrap();

        let back = load_idx(&ip, &lp).unwrap();
        assert_eq!(back.labels, ds.labels);
        write_idx_images(&ip, &back.images).unwrap();
        let bytes2 = std::fs::read(&ip).unwrap();
        assert_eq!(bytes1, bytes2, "write-read-write changed bytes");
    }

    #[test]
    fn byte_255_maps_to_one() {
        let dir = tempfile::tempdir().unwrap();
        let img = ImageBuffer::new(1, 2, 1, vec![1.0f32, 0.0]);
        let ip = dir.path().join("img");
        write_idx_images(&ip, &[img]).unwrap();
        let back = read_idx_images(&ip).unwrap();
        assert_eq!(back[0].data, vec![1.0, 0.0]);
    }

    #[test]
    fn labels_file_with_image_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let ds = synth_digits::<f32>(3, 8, 1);
        let ip = dir.path().join("images");
        write_idx_images(&ip, &ds.images).unwrap();
        match read_idx_labels(&ip) {
            Err(IdxError::BadMagic { expected, found, .. }) => {
                assert_eq!(expected, LABELS_MAGIC);
                assert_eq!(found, IMAGES_MAGIC);
            }
            other => panic!("expected BadMagic, got {other:?}"),
        }
    }

    #[test]
    fn truncated_payload_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let ds = synth_digits::<f32>(4, 8, 1);
        let ip = dir.path().join("images");
        write_idx_images(&ip, &ds.images).unwrap();
        let bytes = std::fs::read(&ip).unwrap();
        std::fs::write(&ip, &bytes[..bytes.len() - 10]).unwrap();
        match read_idx_images(&ip) {
            Err(IdxError::Truncated { .. }) => {}
            other => panic!("expected Truncated, got {other:?}"),
        }
    }

    #[test]
    fn count_mismatch_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let ds = synth_digits::<f32>(4, 8, 1);
        let ip = dir.path().join("images");
        let lp = dir.path().join("labels");
        write_idx_images(&ip, &ds.images).unwrap();
        write_idx_labels(&lp, &ds.labels[..3]).unwrap();
        match load_idx(&ip, &lp) {
            Err(IdxError::CountMismatch { images: 4, labels: 3 }) => {}
            other => panic!("expected CountMismatch, got {other:?}"),
        }
    }

    #[test]
    fn mask_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = PadMask {
            height: 2,
            width: 3,
            data: vec![true, false, true, false, false, true],
        };
        let p = dir.path().join("masks");
        write_idx_masks(&p, &[m.clone()]).unwrap();
        let back = read_idx_masks(&p).unwrap();
        assert_eq!(back[0], m);
    }

    /// Real MNIST, exercised only when the published files are present
    /// (point GLIMPSE_MNIST_DIR at a directory holding
    /// train-images-idx3-ubyte / train-labels-idx1-ubyte).
    #[test]
    fn published_mnist_when_available() {
        let Ok(dir) = std::env::var("GLIMPSE_MNIST_DIR") else { return };
        let images = std::path::Path::new(&dir).join("train-images-idx3-ubyte");
        let labels = std::path::Path::new(&dir).join("train-labels-idx1-ubyte");
        if !images.exists() || !labels.exists() {
            return;
        }
        let ds = load_idx(&images, &labels).unwrap();
        assert_eq!(ds.len(), 60_000);
        assert_eq!((ds.images[0].height, ds.images[0].width), (28, 28));
        assert_eq!(ds.num_classes, 10);
    }
}
