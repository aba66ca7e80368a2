//! Run configuration: defaults, a flat `key = value` file with `#`
//! comments, environment overrides for paths, and CLI overrides on top.
//! Every command validates the whole configuration before touching data.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use glimpse_core::attack::AttackConfig;
use glimpse_core::data::PerturbConfig;
use glimpse_core::model::{ConvSpec, ModelConfig};
use glimpse_core::sampler::FovConfig;
use glimpse_core::train::TrainConfig;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config line {line}: expected `key = value`, got `{text}`")]
    Syntax { line: usize, text: String },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("invalid value for `{key}`: `{value}` ({why})")]
    BadValue { key: String, value: String, why: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("path for `{key}` does not exist: {path}")]
    MissingPath { key: String, path: String },
}

/// Flat run configuration; field defaults are the published
/// perturbed-digits hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    // paths
    pub data_dir: PathBuf,
    pub runs_dir: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub resume: Option<PathBuf>,
    pub image: Option<PathBuf>,
    // model
    pub classes: usize,
    pub channels: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    /// Inner/outer FOV radii in normalized units; the log bounds are ln(r).
    pub r_min: f64,
    pub r_max: f64,
    pub what_cnn: String,
    pub where_cnn: String,
    pub lstm_dim: usize,
    pub fc_classifier: usize,
    pub fc_baseline: usize,
    pub fc_location: usize,
    pub sigma: f64,
    // training
    pub lr_what: f64,
    pub lr_where: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub glimpse_num: usize,
    pub seed: u64,
    /// Stop early once test error reaches this fraction.
    pub target_error: Option<f64>,
    pub ablate_where: bool,
    // evaluation
    pub eval_glimpses: String,
    pub eval_mc: String,
    // dataset generation
    pub gen_train: usize,
    pub gen_test: usize,
    pub base_size: usize,
    pub out_size: usize,
    pub out_width: Option<usize>,
    pub rot_lo: f64,
    pub rot_hi: f64,
    pub scale_lo: f64,
    pub scale_hi: f64,
    pub translation: Option<f64>,
    pub clutter_count: usize,
    pub clutter_patch: usize,
    /// "synthetic" renders glyphs; "idx" reads base_images/base_labels.
    pub base: String,
    pub base_images: Option<PathBuf>,
    pub base_labels: Option<PathBuf>,
    // attack
    pub epsilon: f64,
    pub pgd_step: f64,
    pub pgd_iters: usize,
    pub pgd_random_start: bool,
    pub spsa_delta: f64,
    pub spsa_iters: usize,
    pub spsa_batch: usize,
    pub spsa_lr: f64,
    pub attack_sample: usize,
    pub attack_glimpses: usize,
    pub attack_mc: usize,
    pub masks: Option<PathBuf>,
    // execution
    pub threads: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data_dir: PathBuf::from("data"),
            runs_dir: PathBuf::from("runs"),
            checkpoint: None,
            resume: None,
            image: None,
            classes: 10,
            channels: 1,
            grid_h: 20,
            grid_w: 24,
            r_min: 0.05,
            r_max: 0.8,
            what_cnn: "16x3p2,32x3p2".into(),
            where_cnn: "16x3p2".into(),
            lstm_dim: 128,
            fc_classifier: 128,
            fc_baseline: 128,
            fc_location: 128,
            sigma: 0.16,
            lr_what: 1e-3,
            lr_where: 1e-5,
            batch_size: 256,
            epochs: 30,
            glimpse_num: 20,
            seed: 42,
            target_error: None,
            ablate_where: false,
            eval_glimpses: "1,5,10,20".into(),
            eval_mc: "1,4,8".into(),
            gen_train: 10_000,
            gen_test: 2_000,
            base_size: 28,
            out_size: 96,
            out_width: None,
            rot_lo: 0.0,
            rot_hi: std::f64::consts::TAU,
            scale_lo: 1.0,
            scale_hi: 2.0,
            translation: None,
            clutter_count: 8,
            clutter_patch: 8,
            base: "synthetic".into(),
            base_images: None,
            base_labels: None,
            epsilon: 2.0 / 255.0,
            pgd_step: 0.2 / 255.0,
            pgd_iters: 40,
            pgd_random_start: true,
            spsa_delta: 0.01,
            spsa_iters: 20,
            spsa_batch: 256,
            spsa_lr: 0.01,
            attack_sample: 200,
            attack_glimpses: 10,
            attack_mc: 1,
            masks: None,
            threads: 1,
        }
    }
}

fn parse_num(key: &str, v: &str) -> Result<f64, ConfigError> {
    let bad = |why: &str| ConfigError::BadValue {
        key: key.into(),
        value: v.into(),
        why: why.into(),
    };
    if let Some((a, b)) = v.split_once('/') {
        let a: f64 = a.trim().parse().map_err(|_| bad("not a number"))?;
        let b: f64 = b.trim().parse().map_err(|_| bad("not a number"))?;
        if b == 0.0 {
            return Err(bad("division by zero"));
        }
        return Ok(a / b);
    }
    v.trim().parse().map_err(|_| bad("not a number"))
}

fn parse_usize(key: &str, v: &str) -> Result<usize, ConfigError> {
    v.trim().parse().map_err(|_| ConfigError::BadValue {
        key: key.into(),
        value: v.into(),
        why: "not a non-negative integer".into(),
    })
}

fn parse_bool(key: &str, v: &str) -> Result<bool, ConfigError> {
    match v.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(ConfigError::BadValue {
            key: key.into(),
            value: v.into(),
            why: "expected true/false".into(),
        }),
    }
}

fn parse_opt_num(key: &str, v: &str) -> Result<Option<f64>, ConfigError> {
    if v.trim() == "none" {
        Ok(None)
    } else {
        parse_num(key, v).map(Some)
    }
}

impl RunConfig {
    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let v = value.trim();
        match key {
            "data_dir" => self.data_dir = PathBuf::from(v),
            "runs_dir" => self.runs_dir = PathBuf::from(v),
            "checkpoint" => self.checkpoint = Some(PathBuf::from(v)),
            "resume" => self.resume = Some(PathBuf::from(v)),
            "image" => self.image = Some(PathBuf::from(v)),
            "classes" => self.classes = parse_usize(key, v)?,
            "channels" => self.channels = parse_usize(key, v)?,
            "grid_h" => self.grid_h = parse_usize(key, v)?,
            "grid_w" => self.grid_w = parse_usize(key, v)?,
            "r_min" => self.r_min = parse_num(key, v)?,
            "r_max" => self.r_max = parse_num(key, v)?,
            "what_cnn" => self.what_cnn = v.into(),
            "where_cnn" => self.where_cnn = v.into(),
            "lstm_dim" => self.lstm_dim = parse_usize(key, v)?,
            "fc_classifier" => self.fc_classifier = parse_usize(key, v)?,
            "fc_baseline" => self.fc_baseline = parse_usize(key, v)?,
            "fc_location" => self.fc_location = parse_usize(key, v)?,
            "sigma" => self.sigma = parse_num(key, v)?,
            "lr_what" => self.lr_what = parse_num(key, v)?,
            "lr_where" => self.lr_where = parse_num(key, v)?,
            "batch_size" => self.batch_size = parse_usize(key, v)?,
            "epochs" => self.epochs = parse_usize(key, v)?,
            "glimpse_num" => self.glimpse_num = parse_usize(key, v)?,
            "seed" => {
                self.seed = v.parse().map_err(|_| ConfigError::BadValue {
                    key: key.into(),
                    value: v.into(),
                    why: "not a u64".into(),
                })?
            }
            "target_error" => self.target_error = parse_opt_num(key, v)?,
            "ablate_where" => self.ablate_where = parse_bool(key, v)?,
            "eval_glimpses" => self.eval_glimpses = v.into(),
            "eval_mc" => self.eval_mc = v.into(),
            "gen_train" => self.gen_train = parse_usize(key, v)?,
            "gen_test" => self.gen_test = parse_usize(key, v)?,
            "base_size" => self.base_size = parse_usize(key, v)?,
            "out_size" => self.out_size = parse_usize(key, v)?,
            "out_width" => {
                self.out_width =
                    if v == "none" { None } else { Some(parse_usize(key, v)?) }
            }
            "rot_lo" => self.rot_lo = parse_num(key, v)?,
            "rot_hi" => self.rot_hi = parse_num(key, v)?,
            "scale_lo" => self.scale_lo = parse_num(key, v)?,
            "scale_hi" => self.scale_hi = parse_num(key, v)?,
            "translation" => self.translation = parse_opt_num(key, v)?,
            "clutter_count" => self.clutter_count = parse_usize(key, v)?,
            "clutter_patch" => self.clutter_patch = parse_usize(key, v)?,
            "base" => self.base = v.into(),
            "base_images" => self.base_images = Some(PathBuf::from(v)),
            "base_labels" => self.base_labels = Some(PathBuf::from(v)),
            "epsilon" => self.epsilon = parse_num(key, v)?,
            "pgd_step" => self.pgd_step = parse_num(key, v)?,
            "pgd_iters" => self.pgd_iters = parse_usize(key, v)?,
            "pgd_random_start" => self.pgd_random_start = parse_bool(key, v)?,
            "spsa_delta" => self.spsa_delta = parse_num(key, v)?,
            "spsa_iters" => self.spsa_iters = parse_usize(key, v)?,
            "spsa_batch" => self.spsa_batch = parse_usize(key, v)?,
            "spsa_lr" => self.spsa_lr = parse_num(key, v)?,
            "attack_sample" => self.attack_sample = parse_usize(key, v)?,
            "attack_glimpses" => self.attack_glimpses = parse_usize(key, v)?,
            "attack_mc" => self.attack_mc = parse_usize(key, v)?,
            "masks" => self.masks = Some(PathBuf::from(v)),
            "threads" => self.threads = parse_usize(key, v)?.max(1),
            _ => return Err(ConfigError::UnknownKey(key.into())),
        }
        Ok(())
    }

    /// Parses a config file (`key = value`, `#` comments, blank lines).
    pub fn apply_file(&mut self, path: &Path) -> Result<(), ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(ConfigError::Syntax { line: i + 1, text: raw.into() });
            };
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    /// Environment overrides for the path roots.
    pub fn apply_env(&mut self) {
        if let Ok(v) = std::env::var("GLIMPSE_DATA_DIR") {
            if !v.is_empty() {
                self.data_dir = PathBuf::from(v);
            }
        }
        if let Ok(v) = std::env::var("GLIMPSE_RUNS_DIR") {
            if !v.is_empty() {
                self.runs_dir = PathBuf::from(v);
            }
        }
    }

    fn parse_cnn(key: &str, text: &str) -> Result<Vec<ConvSpec>, ConfigError> {
        let bad = |why: String| ConfigError::BadValue {
            key: key.into(),
            value: text.into(),
            why,
        };
        let mut out = Vec::new();
        for part in text.split(',') {
            let part = part.trim();
            if part.is_empty() {
                continue;
            }
            // "16x3p2" = 16 channels, 3x3 kernel, pool 2; "16x3" = no pool
            let (chan_kernel, pool) = match part.split_once('p') {
                Some((a, p)) => {
                    (a, p.parse::<usize>().map_err(|_| bad(format!("bad pool in `{part}`")))?)
                }
                None => (part, 1),
            };
            let (c, k) = chan_kernel
                .split_once('x')
                .ok_or_else(|| bad(format!("expected CHANxK in `{part}`")))?;
            out.push(ConvSpec {
                out_channels: c.parse().map_err(|_| bad(format!("bad channels in `{part}`")))?,
                kernel: k.parse().map_err(|_| bad(format!("bad kernel in `{part}`")))?,
                pool,
            });
        }
        if out.is_empty() {
            return Err(bad("empty CNN stack".into()));
        }
        Ok(out)
    }

    pub fn parse_list(key: &str, text: &str) -> Result<Vec<usize>, ConfigError> {
        let mut out = Vec::new();
        for part in text.split(',') {
            let part = part.trim();
            if part.is_empty() {
                continue;
            }
            out.push(parse_usize(key, part)?);
        }
        if out.is_empty() {
            return Err(ConfigError::BadValue {
                key: key.into(),
                value: text.into(),
                why: "empty list".into(),
            });
        }
        Ok(out)
    }

    pub fn model_config(&self) -> Result<ModelConfig, ConfigError> {
        if self.r_min <= 0.0 || self.r_max <= 0.0 {
            return Err(ConfigError::Invalid("FOV radii must be positive".into()));
        }
        let cfg = ModelConfig {
            classes: self.classes,
            channels: self.channels,
            fov: FovConfig {
                grid_h: self.grid_h,
                grid_w: self.grid_w,
                rho_min: self.r_min.ln(),
                rho_max: self.r_max.ln(),
            },
            what_cnn: Self::parse_cnn("what_cnn", &self.what_cnn)?,
            where_cnn: Self::parse_cnn("where_cnn", &self.where_cnn)?,
            lstm_dim: self.lstm_dim,
            fc_classifier: self.fc_classifier,
            fc_baseline: self.fc_baseline,
            fc_location: self.fc_location,
            sigma: self.sigma,
        };
        cfg.validate().map_err(ConfigError::Invalid)?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> Result<TrainConfig, ConfigError> {
        let model = self.model_config()?;
        let cfg = TrainConfig {
            lr_what: self.lr_what,
            lr_where: self.lr_where,
            batch_size: self.batch_size,
            epochs: self.epochs,
            glimpse_num: self.glimpse_num,
            sigma: self.sigma,
            seed: self.seed,
            fov: model.fov,
        };
        cfg.validate().map_err(ConfigError::Invalid)?;
        Ok(cfg)
    }

    pub fn perturb_config(&self, seed: u64) -> Result<PerturbConfig, ConfigError> {
        let cfg = PerturbConfig {
            out_size: self.out_size,
            out_width: self.out_width,
            rot_range: (self.rot_lo, self.rot_hi),
            scale_range: (self.scale_lo, self.scale_hi),
            translation_range: self.translation,
            clutter_count: self.clutter_count,
            clutter_patch: self.clutter_patch,
            seed,
        };
        cfg.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(cfg)
    }

    pub fn attack_config(&self) -> Result<AttackConfig, ConfigError> {
        let cfg = AttackConfig {
            epsilon: self.epsilon,
            pgd_step: self.pgd_step,
            pgd_iters: self.pgd_iters,
            pgd_random_start: self.pgd_random_start,
            pgd_resample_fixations: false,
            spsa_delta: self.spsa_delta,
            spsa_iters: self.spsa_iters,
            spsa_batch: self.spsa_batch,
            spsa_lr: self.spsa_lr,
            spsa_early_stop: true,
            seed: self.seed,
        };
        cfg.validate().map_err(|e| ConfigError::Invalid(e.into()))?;
        Ok(cfg)
    }

    pub fn require_path(&self, key: &str, path: &Path) -> Result<(), ConfigError> {
        if path.exists() {
            Ok(())
        } else {
            Err(ConfigError::MissingPath { key: key.into(), path: path.display().to_string() })
        }
    }

    /// Canonical rendering of the effective configuration; also the input
    /// of the run-directory hash.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let kv = self.to_pairs();
        for (k, v) in kv {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    fn to_pairs(&self) -> BTreeMap<&'static str, String> {
        let opt_path = |p: &Option<PathBuf>| {
            p.as_ref().map_or("none".to_string(), |p| p.display().to_string())
        };
        let opt_num =
            |p: &Option<f64>| p.map_or("none".to_string(), |v| format!("{v}"));
        let mut m = BTreeMap::new();
        m.insert("data_dir", self.data_dir.display().to_string());
        m.insert("runs_dir", self.runs_dir.display().to_string());
        m.insert("checkpoint", opt_path(&self.checkpoint));
        m.insert("resume", opt_path(&self.resume));
        m.insert("image", opt_path(&self.image));
        m.insert("classes", self.classes.to_string());
        m.insert("channels", self.channels.to_string());
        m.insert("grid_h", self.grid_h.to_string());
        m.insert("grid_w", self.grid_w.to_string());
        m.insert("r_min", self.r_min.to_string());
        m.insert("r_max", self.r_max.to_string());
        m.insert("what_cnn", self.what_cnn.clone());
        m.insert("where_cnn", self.where_cnn.clone());
        m.insert("lstm_dim", self.lstm_dim.to_string());
        m.insert("fc_classifier", self.fc_classifier.to_string());
        m.insert("fc_baseline", self.fc_baseline.to_string());
        m.insert("fc_location", self.fc_location.to_string());
        m.insert("sigma", self.sigma.to_string());
        m.insert("lr_what", self.lr_what.to_string());
        m.insert("lr_where", self.lr_where.to_string());
        m.insert("batch_size", self.batch_size.to_string());
        m.insert("epochs", self.epochs.to_string());
        m.insert("glimpse_num", self.glimpse_num.to_string());
        m.insert("seed", self.seed.to_string());
        m.insert("target_error", opt_num(&self.target_error));
        m.insert("ablate_where", self.ablate_where.to_string());
        m.insert("eval_glimpses", self.eval_glimpses.clone());
        m.insert("eval_mc", self.eval_mc.clone());
        m.insert("gen_train", self.gen_train.to_string());
        m.insert("gen_test", self.gen_test.to_string());
        m.insert("base_size", self.base_size.to_string());
        m.insert("out_size", self.out_size.to_string());
        m.insert(
            "out_width",
            self.out_width.map_or("none".into(), |v| v.to_string()),
        );
        m.insert("rot_lo", self.rot_lo.to_string());
        m.insert("rot_hi", self.rot_hi.to_string());
        m.insert("scale_lo", self.scale_lo.to_string());
        m.insert("scale_hi", self.scale_hi.to_string());
        m.insert("translation", opt_num(&self.translation));
        m.insert("clutter_count", self.clutter_count.to_string());
        m.insert("clutter_patch", self.clutter_patch.to_string());
        m.insert("base", self.base.clone());
        m.insert("base_images", opt_path(&self.base_images));
        m.insert("base_labels", opt_path(&self.base_labels));
        m.insert("epsilon", self.epsilon.to_string());
        m.insert("pgd_step", self.pgd_step.to_string());
        m.insert("pgd_iters", self.pgd_iters.to_string());
        m.insert("pgd_random_start", self.pgd_random_start.to_string());
        m.insert("spsa_delta", self.spsa_delta.to_string());
        m.insert("spsa_iters", self.spsa_iters.to_string());
        m.insert("spsa_batch", self.spsa_batch.to_string());
        m.insert("spsa_lr", self.spsa_lr.to_string());
        m.insert("attack_sample", self.attack_sample.to_string());
        m.insert("attack_glimpses", self.attack_glimpses.to_string());
        m.insert("attack_mc", self.attack_mc.to_string());
        m.insert("masks", opt_path(&self.masks));
        m.insert("threads", self.threads.to_string());
        m
    }

    /// FNV-1a hash of the canonical rendering; names the run directory.
    pub fn hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in self.render().bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x1000_0000_01b3);
        }
        h
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn defaults_are_valid() {
        let cfg = RunConfig::default();
        cfg.model_config().unwrap();
        cfg.train_config().unwrap();
        cfg.attack_config().unwrap();
        cfg.perturb_config(1).unwrap();
    }

    #[test]
    fn file_parsing_and_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.conf");
        let mut f = std::fs::File::create(&path).unwrap();
        writeln!(f, "# comment\nlstm_dim = 64\nepsilon = 4/255\n\nsigma = 0.2 # inline").unwrap();
        drop(f);
        let mut cfg = RunConfig::default();
        cfg.apply_file(&path).unwrap();
        assert_eq!(cfg.lstm_dim, 64);
        assert!((cfg.epsilon - 4.0 / 255.0).abs() < 1e-12);
        assert!((cfg.sigma - 0.2).abs() < 1e-12);
        // CLI-style override wins over the file value
        cfg.set("lstm_dim", "32").unwrap();
        assert_eq!(cfg.lstm_dim, 32);
    }

    #[test]
    fn unknown_key_rejected() {
        let mut cfg = RunConfig::default();
        match cfg.set("lstm_dm", "64") {
            Err(ConfigError::UnknownKey(k)) => assert_eq!(k, "lstm_dm"),
            other => panic!("expected UnknownKey, got {other:?}"),
        }
    }

    #[test]
    fn bad_syntax_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.conf");
        std::fs::write(&path, "lstm_dim = 64\nnot a kv line\n").unwrap();
        let mut cfg = RunConfig::default();
        match cfg.apply_file(&path) {
            Err(ConfigError::Syntax { line: 2, .. }) => {}
            other => panic!("expected Syntax at line 2, got {other:?}"),
        }
    }

    #[test]
    fn cnn_spec_parsing() {
        let stack = RunConfig::parse_cnn("what_cnn", "16x3p2, 32x3p2").unwrap();
        assert_eq!(stack.len(), 2);
        assert_eq!(stack[1].out_channels, 32);
        assert_eq!(stack[1].pool, 2);
        let nopool = RunConfig::parse_cnn("what_cnn", "8x5").unwrap();
        assert_eq!(nopool[0].kernel, 5);
        assert_eq!(nopool[0].pool, 1);
        assert!(RunConfig::parse_cnn("what_cnn", "banana").is_err());
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = RunConfig::default();
        let mut b = RunConfig::default();
        assert_eq!(a.hash(), b.hash());
        b.seed = 43;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn invalid_combinations_fail_fast() {
        let mut cfg = RunConfig::default();
        cfg.lr_where = 1.0; // above lr_what
        assert!(cfg.train_config().is_err());
        let mut cfg = RunConfig::default();
        cfg.grid_h = 21; // pool 2 cannot divide 21
        assert!(cfg.model_config().is_err());
        let mut cfg = RunConfig::default();
        cfg.pgd_step = 1.0;
        assert!(cfg.attack_config().is_err());
    }
}
