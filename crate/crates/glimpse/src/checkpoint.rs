//! Binary checkpoints: magic bytes, format version, the model
//! configuration, named little-endian f32 tensors with shapes, and
//! optionally the Adam moments so training resumes exactly.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use glimpse_core::model::{ConvSpec, Model, ModelConfig};
use glimpse_core::sampler::FovConfig;
use glimpse_core::train::OptState;

pub const MAGIC: [u8; 8] = *b"GLMPCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: bad magic bytes, not a checkpoint")]
    BadMagic { path: String },
    #[error("{path}: unsupported checkpoint version {found} (expected {VERSION})")]
    Version { path: String, found: u32 },
    #[error("{path}: truncated checkpoint")]
    Truncated { path: String },
    #[error("shape mismatch for tensor {name}: checkpoint {found:?}, expected {expected:?}")]
    ShapeMismatch { name: String, expected: Vec<usize>, found: Vec<usize> },
    #[error("checkpoint is missing tensor {name}")]
    MissingTensor { name: String },
    #[error("{path}: malformed checkpoint: {what}")]
    Malformed { path: String, what: String },
}

fn io_err(path: &Path, source: std::io::Error) -> CheckpointError {
    if source.kind() == std::io::ErrorKind::UnexpectedEof {
        CheckpointError::Truncated { path: path.display().to_string() }
    } else {
        CheckpointError::Io { path: path.display().to_string(), source }
    }
}

/// Everything a checkpoint restores.
pub struct Checkpoint {
    pub config: ModelConfig,
    /// Completed epochs.
    pub epoch: u32,
    pub model: Model<f32>,
    /// Present when the checkpoint was saved with optimizer state.
    pub opt_moments: Option<Vec<SavedAdam>>,
}

/// Adam moments of one parameter tensor.
pub struct SavedAdam {
    pub name: String,
    pub m: Vec<f32>,
    pub v: Vec<f32>,
    pub step_count: u64,
}

struct W<'a> {
    inner: BufWriter<File>,
    path: &'a Path,
}

impl<'a> W<'a> {
    fn u32(&mut self, v: u32) -> Result<(), CheckpointError> {
        self.inner.write_all(&v.to_le_bytes()).map_err(|e| io_err(self.path, e))
    }
    fn u64(&mut self, v: u64) -> Result<(), CheckpointError> {
        self.inner.write_all(&v.to_le_bytes()).map_err(|e| io_err(self.path, e))
    }
    fn f64(&mut self, v: f64) -> Result<(), CheckpointError> {
        self.inner.write_all(&v.to_le_bytes()).map_err(|e| io_err(self.path, e))
    }
    fn str(&mut self, s: &str) -> Result<(), CheckpointError> {
        self.u32(s.len() as u32)?;
        self.inner.write_all(s.as_bytes()).map_err(|e| io_err(self.path, e))
    }
    fn f32s(&mut self, v: &[f32]) -> Result<(), CheckpointError> {
        let mut buf = Vec::with_capacity(v.len() * 4);
        for x in v {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        self.inner.write_all(&buf).map_err(|e| io_err(self.path, e))
    }
}

struct R<'a> {
    inner: BufReader<File>,
    path: &'a Path,
}

impl<'a> R<'a> {
    fn u32(&mut self) -> Result<u32, CheckpointError> {
        let mut b = [0u8; 4];
        self.inner.read_exact(&mut b).map_err(|e| io_err(self.path, e))?;
        Ok(u32::from_le_bytes(b))
    }
    fn u64(&mut self) -> Result<u64, CheckpointError> {
        let mut b = [0u8; 8];
        self.inner.read_exact(&mut b).map_err(|e| io_err(self.path, e))?;
        Ok(u64::from_le_bytes(b))
    }
    fn f64(&mut self) -> Result<f64, CheckpointError> {
        let mut b = [0u8; 8];
        self.inner.read_exact(&mut b).map_err(|e| io_err(self.path, e))?;
        Ok(f64::from_le_bytes(b))
    }
    fn str(&mut self) -> Result<String, CheckpointError> {
        let n = self.u32()? as usize;
        if n > 1 << 16 {
            return Err(CheckpointError::Malformed {
                path: self.path.display().to_string(),
                what: format!("string length {n}"),
            });
        }
        let mut b = vec![0u8; n];
        self.inner.read_exact(&mut b).map_err(|e| io_err(self.path, e))?;
        String::from_utf8(b).map_err(|_| CheckpointError::Malformed {
            path: self.path.display().to_string(),
            what: "non-utf8 name".into(),
        })
    }
    fn f32s(&mut self, n: usize) -> Result<Vec<f32>, CheckpointError> {
        let mut buf = vec![0u8; n * 4];
        self.inner.read_exact(&mut buf).map_err(|e| io_err(self.path, e))?;
        Ok(buf.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
    }
}

fn write_conv_stack(w: &mut W, stack: &[ConvSpec]) -> Result<(), CheckpointError> {
    w.u32(stack.len() as u32)?;
    for s in stack {
        w.u32(s.out_channels as u32)?;
        w.u32(s.kernel as u32)?;
        w.u32(s.pool as u32)?;
    }
    Ok(())
}

fn read_conv_stack(r: &mut R) -> Result<Vec<ConvSpec>, CheckpointError> {
    let n = r.u32()? as usize;
    if n > 64 {
        return Err(CheckpointError::Malformed {
            path: r.path.display().to_string(),
            what: format!("conv stack of {n} layers"),
        });
    }
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        out.push(ConvSpec {
            out_channels: r.u32()? as usize,
            kernel: r.u32()? as usize,
            pool: r.u32()? as usize,
        });
    }
    Ok(out)
}

/// Writes model parameters, config, epoch counter and (optionally) Adam
/// moments. Writes to a temp file first so a failed save never leaves a
/// partial checkpoint behind.
pub fn save_checkpoint(
    path: &Path,
    model: &Model<f32>,
    opt: Option<&OptState<f32>>,
    epoch: u32,
) -> Result<(), CheckpointError> {
    let tmp = path.with_extension("tmp");
    {
        let f = File::create(&tmp).map_err(|e| io_err(&tmp, e))?;
        let mut w = W { inner: BufWriter::new(f), path: &tmp };
        w.inner.write_all(&MAGIC).map_err(|e| io_err(&tmp, e))?;
        w.u32(VERSION)?;
        w.u32(epoch)?;

        let c = &model.cfg;
        w.u32(c.classes as u32)?;
        w.u32(c.channels as u32)?;
        w.u32(c.fov.grid_h as u32)?;
        w.u32(c.fov.grid_w as u32)?;
        w.f64(c.fov.rho_min)?;
        w.f64(c.fov.rho_max)?;
        write_conv_stack(&mut w, &c.what_cnn)?;
        write_conv_stack(&mut w, &c.where_cnn)?;
        w.u32(c.lstm_dim as u32)?;
        w.u32(c.fc_classifier as u32)?;
        w.u32(c.fc_baseline as u32)?;
        w.u32(c.fc_location as u32)?;
        w.f64(c.sigma)?;

        let params = model.named_params();
        w.u32(params.len() as u32)?;
        for (name, p) in &params {
            w.str(name)?;
            w.u32(p.shape.len() as u32)?;
            for &d in &p.shape {
                w.u32(d as u32)?;
            }
            w.f32s(&p.data)?;
        }

        match opt {
            None => w.u32(0)?,
            Some(opt) => {
                w.u32(opt.states.len() as u32)?;
                for (name, st) in opt.names.iter().zip(&opt.states) {
                    w.str(name)?;
                    w.u64(st.step_count)?;
                    w.u32(st.m.len() as u32)?;
                    w.f32s(&st.m)?;
                    w.f32s(&st.v)?;
                }
            }
        }
        w.inner.flush().map_err(|e| io_err(&tmp, e))?;
    }
    std::fs::rename(&tmp, path).map_err(|e| io_err(path, e))
}

/// Reads a checkpoint and rebuilds the model with its stored parameters.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let f = File::open(path).map_err(|e| io_err(path, e))?;
    let mut r = R { inner: BufReader::new(f), path };

    let mut magic = [0u8; 8];
    r.inner.read_exact(&mut magic).map_err(|e| io_err(path, e))?;
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic { path: path.display().to_string() });
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::Version { path: path.display().to_string(), found: version });
    }
    let epoch = r.u32()?;

    let classes = r.u32()? as usize;
    let channels = r.u32()? as usize;
    let grid_h = r.u32()? as usize;
    let grid_w = r.u32()? as usize;
    let rho_min = r.f64()?;
    let rho_max = r.f64()?;
    let what_cnn = read_conv_stack(&mut r)?;
    let where_cnn = read_conv_stack(&mut r)?;
    let lstm_dim = r.u32()? as usize;
    let fc_classifier = r.u32()? as usize;
    let fc_baseline = r.u32()? as usize;
    let fc_location = r.u32()? as usize;
    let sigma = r.f64()?;

    let config = ModelConfig {
        classes,
        channels,
        fov: FovConfig { grid_h, grid_w, rho_min, rho_max },
        what_cnn,
        where_cnn,
        lstm_dim,
        fc_classifier,
        fc_baseline,
        fc_location,
        sigma,
    };
    config.validate().map_err(|e| CheckpointError::Malformed {
        path: path.display().to_string(),
        what: e,
    })?;

    let mut model = Model::<f32>::new(config.clone(), 0);

    let tensor_count = r.u32()? as usize;
    let mut stored: Vec<(String, Vec<usize>, Vec<f32>)> = Vec::with_capacity(tensor_count);
    for _ in 0..tensor_count {
        let name = r.str()?;
        let ndims = r.u32()? as usize;
        if ndims > 8 {
            return Err(CheckpointError::Malformed {
                path: path.display().to_string(),
                what: format!("tensor {name} with {ndims} dims"),
            });
        }
        let mut shape = Vec::with_capacity(ndims);
        for _ in 0..ndims {
            shape.push(r.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let data = r.f32s(numel)?;
        stored.push((name, shape, data));
    }

    for (name, p) in model.named_params_mut() {
        let found = stored
            .iter()
            .find(|(n, _, _)| *n == name)
            .ok_or_else(|| CheckpointError::MissingTensor { name: name.clone() })?;
        if found.1 != p.shape {
            return Err(CheckpointError::ShapeMismatch {
                name,
                expected: p.shape.clone(),
                found: found.1.clone(),
            });
        }
        p.data = found.2.clone();
    }

    let opt_count = r.u32()? as usize;
    let opt_moments = if opt_count == 0 {
        None
    } else {
        let mut out = Vec::with_capacity(opt_count);
        for _ in 0..opt_count {
            let name = r.str()?;
            let step_count = r.u64()?;
            let n = r.u32()? as usize;
            let m = r.f32s(n)?;
            let v = r.f32s(n)?;
            out.push(SavedAdam { name, m, v, step_count });
        }
        Some(out)
    };

    Ok(Checkpoint { config, epoch, model, opt_moments })
}

/// Loads a checkpoint whose architecture must match `expected`; a tensor
/// whose stored shape disagrees with the expected configuration is reported
/// by name.
pub fn load_checkpoint_expecting(
    path: &Path,
    expected: &ModelConfig,
) -> Result<Checkpoint, CheckpointError> {
    let ck = load_checkpoint(path)?;
    let reference = Model::<f32>::new(expected.clone(), 0);
    for ((name, want), (_, got)) in reference.named_params().iter().zip(ck.model.named_params()) {
        if want.shape != got.shape {
            return Err(CheckpointError::ShapeMismatch {
                name: name.clone(),
                expected: want.shape.clone(),
                found: got.shape.clone(),
            });
        }
    }
    Ok(ck)
}

/// Rebuilds optimizer state from saved moments (missing entries start
/// fresh).
pub fn restore_opt(
    model: &Model<f32>,
    lr_what: f64,
    lr_where: f64,
    saved: &[SavedAdam],
) -> OptState<f32> {
    let mut opt = OptState::new(model, lr_what, lr_where);
    for (name, st) in opt.names.clone().iter().zip(opt.states.iter_mut()) {
        if let Some(s) = saved.iter().find(|s| &s.name == name) {
            if s.m.len() == st.m.len() {
                st.m = s.m.clone();
                st.v = s.v.clone();
                st.step_count = s.step_count;
            }
        }
    }
    opt
}

#[cfg(test)]
mod tests {
    use super::*;
    use glimpse_core::model::ConvSpec;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            classes: 3,
            channels: 1,
            fov: FovConfig::new(6, 8, 0.1f64.ln(), 0.7f64.ln()),
            what_cnn: vec![ConvSpec { out_channels: 2, kernel: 3, pool: 2 }],
            where_cnn: vec![ConvSpec { out_channels: 2, kernel: 3, pool: 2 }],
            lstm_dim: 8,
            fc_classifier: 8,
            fc_baseline: 8,
            fc_location: 8,
            sigma: 0.16,
        }
    }

    #[test]
    fn round_trip_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        let model = Model::<f32>::new(tiny_config(), 9);
        let mut opt = OptState::new(&model, 1e-3, 1e-5);
        opt.states[0].m[0] = 0.5;
        opt.states[0].step_count = 7;
        save_checkpoint(&path, &model, Some(&opt), 4).unwrap();

        let ck = load_checkpoint(&path).unwrap();
        assert_eq!(ck.epoch, 4);
        assert_eq!(ck.config, model.cfg);
        for ((n1, p1), (n2, p2)) in model.named_params().iter().zip(ck.model.named_params()) {
            assert_eq!(n1, n2);
            assert_eq!(p1.data, p2.data, "tensor {n1} changed");
        }
        let moments = ck.opt_moments.unwrap();
        assert_eq!(moments[0].m[0], 0.5);
        assert_eq!(moments[0].step_count, 7);
    }

    #[test]
    fn bad_magic_is_rejected_without_partial_state() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        let model = Model::<f32>::new(tiny_config(), 9);
        save_checkpoint(&path, &model, None, 0).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] ^= 0xff;
        std::fs::write(&path, &bytes).unwrap();
        match load_checkpoint(&path) {
            Err(CheckpointError::BadMagic { .. }) => {}
            other => panic!("expected BadMagic, got {:?}", other.err()),
        }
    }

    #[test]
    fn version_mismatch_is_distinct() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        let model = Model::<f32>::new(tiny_config(), 9);
        save_checkpoint(&path, &model, None, 0).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[8] = 99;
        std::fs::write(&path, &bytes).unwrap();
        match load_checkpoint(&path) {
            Err(CheckpointError::Version { found: 99, .. }) => {}
            other => panic!("expected Version, got {:?}", other.err()),
        }
    }

    #[test]
    fn truncation_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        let model = Model::<f32>::new(tiny_config(), 9);
        save_checkpoint(&path, &model, None, 0).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        match load_checkpoint(&path) {
            Err(CheckpointError::Truncated { .. }) => {}
            other => panic!("expected Truncated, got {:?}", other.err()),
        }
    }

    #[test]
    fn fov_mismatch_names_offending_tensor() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        let model = Model::<f32>::new(tiny_config(), 9);
        save_checkpoint(&path, &model, None, 0).unwrap();
        // a different field of view changes the flattened CNN width
        let mut other = tiny_config();
        other.fov = FovConfig::new(8, 12, 0.1f64.ln(), 0.7f64.ln());
        match load_checkpoint_expecting(&path, &other) {
            Err(CheckpointError::ShapeMismatch { name, .. }) => {
                assert!(name.contains("lstm"), "unexpected tensor {name}");
            }
            other => panic!("expected ShapeMismatch, got {:?}", other.err()),
        }
    }
}
