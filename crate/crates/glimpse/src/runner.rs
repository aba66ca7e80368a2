//! Command drivers: dataset generation, training, evaluation, attack
//! sweeps and glimpse visualization. Every command validates its full
//! configuration before touching data and writes outputs into a fresh run
//! directory named by config hash and timestamp.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rand::seq::SliceRandom;

use glimpse_core::attack::{evaluate_robustness, AttackKind};
use glimpse_core::data::{make_perturbed, square_pad_resize, synth_digits, LabeledDataset, PadMask};
use glimpse_core::image::ImageBuffer;
use glimpse_core::model::{FixationPolicy, Model};
use glimpse_core::sampler::{extract_glimpse, Fixation};
use glimpse_core::train::{
    accuracy_of, apply_update, compute_batch_grads, eval_grid, evaluate, merge_shard_grads,
    OptState, StepMetrics,
};
use glimpse_core::{seeds, Real};

use crate::checkpoint::{load_checkpoint, load_checkpoint_expecting, restore_opt, save_checkpoint};
use crate::config::{ConfigError, RunConfig};
use crate::idx;
use crate::parallel::map_indexed;
use crate::robustness::write_report;
use crate::viz;

/// Input errors exit with code 1, runtime failures with code 2.
#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Runtime(String),
}

impl From<ConfigError> for RunError {
    fn from(e: ConfigError) -> Self {
        RunError::Input(e.to_string())
    }
}

fn input<E: std::fmt::Display>(e: E) -> RunError {
    RunError::Input(e.to_string())
}

fn runtime<E: std::fmt::Display>(e: E) -> RunError {
    RunError::Runtime(e.to_string())
}

/// Creates `runs_dir/<command>-<confighash>-<unixtime>[-n]`; never reuses
/// an existing directory. The effective configuration is written inside.
pub fn make_run_dir(cfg: &RunConfig, command: &str) -> Result<PathBuf, RunError> {
    let secs = SystemTime::now().duration_since(UNIX_EPOCH).map_err(runtime)?.as_secs();
    let base = format!("{command}-{:08x}-{secs}", cfg.hash() as u32);
    std::fs::create_dir_all(&cfg.runs_dir).map_err(runtime)?;
    for attempt in 0..10_000u32 {
        let name = if attempt == 0 { base.clone() } else { format!("{base}-{attempt}") };
        let dir = cfg.runs_dir.join(&name);
        match std::fs::create_dir(&dir) {
            Ok(()) => {
                std::fs::write(dir.join("config.txt"), cfg.render()).map_err(runtime)?;
                return Ok(dir);
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(runtime(e)),
        }
    }
    Err(RunError::Runtime("could not allocate a run directory".into()))
}

// ── Dataset generation ──────────────────────────────────────────────────

pub struct DatasetPaths {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
    pub test_masks: Option<PathBuf>,
}

pub fn dataset_paths(data_dir: &Path) -> DatasetPaths {
    DatasetPaths {
        train_images: data_dir.join("train-images-idx3-ubyte"),
        train_labels: data_dir.join("train-labels-idx1-ubyte"),
        test_images: data_dir.join("test-images-idx3-ubyte"),
        test_labels: data_dir.join("test-labels-idx1-ubyte"),
        test_masks: Some(data_dir.join("test-masks-idx3-ubyte")),
    }
}

fn base_split(cfg: &RunConfig, count: usize, tag: u64) -> Result<LabeledDataset<f32>, RunError> {
    match cfg.base.as_str() {
        "synthetic" => Ok(synth_digits(count, cfg.base_size, seeds::derive(cfg.seed, &[tag]))),
        "idx" => {
            let images =
                cfg.base_images.as_ref().ok_or_else(|| input("base_images path required"))?;
            let labels =
                cfg.base_labels.as_ref().ok_or_else(|| input("base_labels path required"))?;
            cfg.require_path("base_images", images)?;
            cfg.require_path("base_labels", labels)?;
            let ds = idx::load_idx(images, labels).map_err(input)?;
            let skip = if tag == 1 { 0 } else { cfg.gen_train };
            if ds.len() < skip + count {
                return Err(input(format!(
                    "base dataset holds {} examples, need {}",
                    ds.len(),
                    skip + count
                )));
            }
            Ok(LabeledDataset::new(
                ds.images[skip..skip + count].to_vec(),
                ds.labels[skip..skip + count].to_vec(),
                ds.num_classes,
            ))
        }
        other => Err(input(format!("unknown base `{other}` (use synthetic or idx)"))),
    }
}

/// Synthesizes the perturbed train/test splits and writes them as IDX
/// files plus a text manifest. Non-square canvases are zero-padded to
/// square with the pad masks saved alongside the test split.
pub fn cmd_dataset_gen(cfg: &RunConfig) -> Result<DatasetPaths, RunError> {
    let _ = cfg.perturb_config(0)?; // fail fast on ranges
    std::fs::create_dir_all(&cfg.data_dir).map_err(runtime)?;
    let paths = dataset_paths(&cfg.data_dir);

    let mut manifest = String::new();
    let _ = writeln!(manifest, "# perturbed dataset manifest");
    let _ = writeln!(manifest, "base = {}", cfg.base);
    let _ = writeln!(manifest, "base_size = {}", cfg.base_size);
    let _ = writeln!(manifest, "out_size = {}", cfg.out_size);
    let _ = writeln!(
        manifest,
        "out_width = {}",
        cfg.out_width.map_or("none".into(), |v| v.to_string())
    );
    let _ = writeln!(manifest, "rot_lo = {}", cfg.rot_lo);
    let _ = writeln!(manifest, "rot_hi = {}", cfg.rot_hi);
    let _ = writeln!(manifest, "scale_lo = {}", cfg.scale_lo);
    let _ = writeln!(manifest, "scale_hi = {}", cfg.scale_hi);
    let _ = writeln!(
        manifest,
        "translation = {}",
        cfg.translation.map_or("none".into(), |v| v.to_string())
    );
    let _ = writeln!(manifest, "clutter_count = {}", cfg.clutter_count);
    let _ = writeln!(manifest, "clutter_patch = {}", cfg.clutter_patch);
    let _ = writeln!(manifest, "seed = {}", cfg.seed);
    let _ = writeln!(manifest, "gen_train = {}", cfg.gen_train);
    let _ = writeln!(manifest, "gen_test = {}", cfg.gen_test);

    for (count, tag, images_path, labels_path, masks_path) in [
        (cfg.gen_train, 1u64, &paths.train_images, &paths.train_labels, None),
        (cfg.gen_test, 3u64, &paths.test_images, &paths.test_labels, paths.test_masks.as_ref()),
    ] {
        let base = base_split(cfg, count, tag)?;
        let perturb = cfg.perturb_config(seeds::derive(cfg.seed, &[tag + 1]))?;
        let ds = make_perturbed(&base, &perturb).map_err(input)?;
        let (images, masks): (Vec<ImageBuffer<f32>>, Vec<PadMask>) = if cfg.out_width.is_some() {
            let target = cfg.out_size.max(cfg.out_width.unwrap_or(0));
            ds.images.iter().map(|im| square_pad_resize(im, target)).unzip()
        } else {
            let masks =
                ds.images.iter().map(|im| PadMask::none(im.height, im.width)).collect();
            (ds.images.clone(), masks)
        };
        idx::write_idx_images(images_path, &images).map_err(runtime)?;
        idx::write_idx_labels(labels_path, &ds.labels).map_err(runtime)?;
        if let Some(mp) = masks_path {
            idx::write_idx_masks(mp, &masks).map_err(runtime)?;
        }
    }
    std::fs::write(cfg.data_dir.join("manifest.txt"), manifest).map_err(runtime)?;
    Ok(paths)
}

// ── Training ────────────────────────────────────────────────────────────

pub struct TrainOutcome {
    pub run_dir: PathBuf,
    pub checkpoint: PathBuf,
    pub epochs_run: u32,
    pub final_test_error: f64,
}

fn load_split(images: &Path, labels: &Path) -> Result<LabeledDataset<f32>, RunError> {
    let ds = idx::load_idx(images, labels).map_err(input)?;
    if ds.is_empty() {
        return Err(input(format!("empty dataset at {}", images.display())));
    }
    Ok(ds)
}

/// One sharded, deterministic optimizer step.
fn sharded_step(
    model: &mut Model<f32>,
    opt: &mut OptState<f32>,
    images: &[&ImageBuffer<f32>],
    labels: &[usize],
    glimpse_num: usize,
    ablate: bool,
    step_seed: u64,
    threads: usize,
) -> Result<StepMetrics, RunError> {
    let b = images.len();
    let shards = threads.max(1).min(b);
    let shard_size = b.div_ceil(shards);
    let ranges: Vec<(usize, usize)> = (0..shards)
        .map(|s| (s * shard_size, ((s + 1) * shard_size).min(b)))
        .filter(|(lo, hi)| lo < hi)
        .collect();

    let results = map_indexed(ranges.len(), threads, |si| {
        let (lo, hi) = ranges[si];
        compute_batch_grads(
            &*model,
            &images[lo..hi],
            &labels[lo..hi],
            glimpse_num,
            ablate,
            step_seed,
            lo,
        )
        .map(|(g, m)| (g, m, hi - lo))
    });

    let mut shard_grads = Vec::new();
    let mut ce = 0.0;
    let mut mse = 0.0;
    let mut rf = 0.0;
    let mut acc = 0.0;
    for r in results {
        let (g, m, count) = r.map_err(runtime)?;
        let w = count as f64 / b as f64;
        ce += m.ce * w;
        mse += m.baseline_mse * w;
        rf += m.reinforce * w;
        acc += m.accuracy * w;
        shard_grads.push((g, count));
    }
    let merged = merge_shard_grads(shard_grads, b);
    apply_update(model, opt, merged);
    Ok(StepMetrics { ce, baseline_mse: mse, reinforce: rf, accuracy: acc })
}

pub fn cmd_train(cfg: &RunConfig) -> Result<TrainOutcome, RunError> {
    let model_cfg = cfg.model_config()?;
    let train_cfg = cfg.train_config()?;
    let paths = dataset_paths(&cfg.data_dir);
    cfg.require_path("data_dir", &paths.train_images)?;
    cfg.require_path("data_dir", &paths.train_labels)?;
    cfg.require_path("data_dir", &paths.test_images)?;
    cfg.require_path("data_dir", &paths.test_labels)?;

    let train = load_split(&paths.train_images, &paths.train_labels)?;
    let test = load_split(&paths.test_images, &paths.test_labels)?;
    if train.num_classes > model_cfg.classes {
        return Err(input(format!(
            "dataset has {} classes, model configured for {}",
            train.num_classes, model_cfg.classes
        )));
    }

    let (mut model, mut opt, start_epoch) = match &cfg.resume {
        Some(path) => {
            cfg.require_path("resume", path)?;
            let ck = load_checkpoint_expecting(path, &model_cfg).map_err(input)?;
            let opt = match &ck.opt_moments {
                Some(saved) => restore_opt(&ck.model, cfg.lr_what, cfg.lr_where, saved),
                None => OptState::new(&ck.model, cfg.lr_what, cfg.lr_where),
            };
            (ck.model, opt, ck.epoch)
        }
        None => {
            let model = Model::<f32>::new(model_cfg.clone(), cfg.seed);
            let opt = OptState::new(&model, cfg.lr_what, cfg.lr_where);
            (model, opt, 0)
        }
    };

    let run_dir = make_run_dir(cfg, "train")?;
    let mut metrics = std::io::BufWriter::new(
        std::fs::File::create(run_dir.join("metrics.csv")).map_err(runtime)?,
    );
    writeln!(metrics, "epoch,step,ce,baseline_mse,reinforce,accuracy").map_err(runtime)?;
    let mut epochs_csv = std::io::BufWriter::new(
        std::fs::File::create(run_dir.join("epochs.csv")).map_err(runtime)?,
    );
    writeln!(epochs_csv, "epoch,test_error").map_err(runtime)?;

    let train_refs: Vec<&ImageBuffer<f32>> = train.images.iter().collect();
    let test_refs: Vec<&ImageBuffer<f32>> = test.images.iter().collect();
    let checkpoint_path = run_dir.join("checkpoint.bin");
    let mut final_error = 1.0;
    let mut epochs_run = start_epoch;

    for epoch in start_epoch..train_cfg.epochs as u32 {
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut rng = seeds::rng(train_cfg.seed, &[0xE, epoch as u64]);
        order.shuffle(&mut rng);

        for (step, chunk) in order.chunks(train_cfg.batch_size).enumerate() {
            let images: Vec<&ImageBuffer<f32>> = chunk.iter().map(|&i| train_refs[i]).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| train.labels[i]).collect();
            let step_seed = seeds::derive(train_cfg.seed, &[0x57, epoch as u64, step as u64]);
            let m = sharded_step(
                &mut model,
                &mut opt,
                &images,
                &labels,
                train_cfg.glimpse_num,
                cfg.ablate_where,
                step_seed,
                cfg.threads,
            )?;
            writeln!(
                metrics,
                "{epoch},{step},{:.6},{:.6},{:.6},{:.4}",
                m.ce, m.baseline_mse, m.reinforce, m.accuracy
            )
            .map_err(runtime)?;
        }
        metrics.flush().map_err(runtime)?;

        let correct = evaluate(
            &model,
            &test_refs,
            &test.labels,
            train_cfg.glimpse_num,
            1,
            seeds::derive(train_cfg.seed, &[0xEA, epoch as u64]),
        );
        final_error = 1.0 - accuracy_of(&correct);
        epochs_run = epoch + 1;
        writeln!(epochs_csv, "{epoch},{final_error:.4}").map_err(runtime)?;
        epochs_csv.flush().map_err(runtime)?;

        save_checkpoint(&run_dir.join(format!("ckpt-epoch-{epoch}.bin")), &model, None, epoch + 1)
            .map_err(runtime)?;
        save_checkpoint(&checkpoint_path, &model, Some(&opt), epoch + 1).map_err(runtime)?;

        if let Some(target) = cfg.target_error {
            if final_error <= target {
                break;
            }
        }
    }

    Ok(TrainOutcome {
        run_dir,
        checkpoint: checkpoint_path,
        epochs_run,
        final_test_error: final_error,
    })
}

// ── Evaluation ──────────────────────────────────────────────────────────

pub struct EvalOutcome {
    pub run_dir: PathBuf,
    pub glimpse_nums: Vec<usize>,
    pub mc_samples: Vec<usize>,
    /// accuracy[glimpse][mc]
    pub accuracy: Vec<Vec<f64>>,
}

pub fn cmd_eval(cfg: &RunConfig) -> Result<EvalOutcome, RunError> {
    let ck_path =
        cfg.checkpoint.as_ref().ok_or_else(|| input("eval requires a checkpoint path"))?;
    cfg.require_path("checkpoint", ck_path)?;
    let glimpse_nums = RunConfig::parse_list("eval_glimpses", &cfg.eval_glimpses)?;
    let mc_samples = RunConfig::parse_list("eval_mc", &cfg.eval_mc)?;
    let paths = dataset_paths(&cfg.data_dir);
    cfg.require_path("data_dir", &paths.test_images)?;
    let test = load_split(&paths.test_images, &paths.test_labels)?;

    let ck = load_checkpoint(ck_path).map_err(input)?;
    if test.num_classes > ck.config.classes {
        return Err(input("test set classes exceed the checkpoint's classifier"));
    }

    let refs: Vec<&ImageBuffer<f32>> = test.images.iter().collect();
    let accuracy = eval_grid(
        &ck.model,
        &refs,
        &test.labels,
        &glimpse_nums,
        &mc_samples,
        seeds::derive(cfg.seed, &[0xEB]),
    );

    let run_dir = make_run_dir(cfg, "eval")?;
    let mut s = String::from("glimpses");
    for m in &mc_samples {
        let _ = write!(s, ",mc{m}");
    }
    let _ = writeln!(s);
    for (gi, g) in glimpse_nums.iter().enumerate() {
        let _ = write!(s, "{g}");
        for mi in 0..mc_samples.len() {
            let _ = write!(s, ",{:.4}", accuracy[gi][mi]);
        }
        let _ = writeln!(s);
    }
    std::fs::write(run_dir.join("eval.csv"), &s).map_err(runtime)?;

    Ok(EvalOutcome { run_dir, glimpse_nums, mc_samples, accuracy })
}

// ── Attacks ─────────────────────────────────────────────────────────────

pub struct AttackOutcome {
    pub run_dir: PathBuf,
    pub reports: Vec<(String, glimpse_core::attack::RobustnessReport, PathBuf)>,
}

pub fn cmd_attack(cfg: &RunConfig) -> Result<AttackOutcome, RunError> {
    let ck_path =
        cfg.checkpoint.as_ref().ok_or_else(|| input("attack requires a checkpoint path"))?;
    cfg.require_path("checkpoint", ck_path)?;
    let attack_cfg = cfg.attack_config()?;
    let paths = dataset_paths(&cfg.data_dir);
    cfg.require_path("data_dir", &paths.test_images)?;
    let test = load_split(&paths.test_images, &paths.test_labels)?;

    let masks: Option<Vec<PadMask>> = match &cfg.masks {
        Some(path) => {
            cfg.require_path("masks", path)?;
            let m = idx::read_idx_masks(path).map_err(input)?;
            if m.len() != test.len() {
                return Err(input("mask count does not match the test set"));
            }
            Some(m)
        }
        None => None,
    };

    let ck = load_checkpoint(ck_path).map_err(input)?;
    let n = cfg.attack_sample.min(test.len());
    let images: Vec<&ImageBuffer<f32>> = test.images[..n].iter().collect();
    let labels = &test.labels[..n];
    let mask_refs: Vec<Option<&PadMask>> = (0..n)
        .map(|i| masks.as_ref().map(|m| &m[i]))
        .collect();

    let run_dir = make_run_dir(cfg, "attack")?;
    let mut reports = Vec::new();
    for (kind, name) in [(AttackKind::Pgd, "pgd"), (AttackKind::Spsa, "spsa")] {
        let (report, logs) = attack_sharded(
            &ck.model,
            &images,
            labels,
            &mask_refs,
            kind,
            &attack_cfg,
            cfg.attack_glimpses,
            cfg.attack_mc,
            seeds::derive(cfg.seed, &[0xA7]),
            cfg.threads,
        );
        let path = run_dir.join(format!("attack-{name}.txt"));
        write_report(&path, name, attack_cfg.epsilon, &report, &logs).map_err(runtime)?;
        reports.push((name.to_string(), report, path));
    }
    Ok(AttackOutcome { run_dir, reports })
}

/// Splits the sample into per-worker ranges; per-image seeds are anchored
/// to absolute indices, so the outcome is worker-count independent.
#[allow(clippy::too_many_arguments)]
pub fn attack_sharded(
    model: &Model<f32>,
    images: &[&ImageBuffer<f32>],
    labels: &[usize],
    masks: &[Option<&PadMask>],
    kind: AttackKind,
    attack_cfg: &glimpse_core::attack::AttackConfig,
    glimpse_num: usize,
    mc_eval: usize,
    root_seed: u64,
    threads: usize,
) -> (glimpse_core::attack::RobustnessReport, Vec<glimpse_core::attack::PerImageLog>) {
    let n = images.len();
    let shards = threads.max(1).min(n.max(1));
    let shard_size = n.div_ceil(shards);
    let ranges: Vec<(usize, usize)> = (0..shards)
        .map(|s| (s * shard_size, ((s + 1) * shard_size).min(n)))
        .filter(|(lo, hi)| lo < hi)
        .collect();
    let parts = map_indexed(ranges.len(), threads, |si| {
        let (lo, hi) = ranges[si];
        evaluate_robustness(
            model,
            &images[lo..hi],
            &labels[lo..hi],
            &masks[lo..hi],
            kind,
            attack_cfg,
            glimpse_num,
            mc_eval,
            root_seed,
            lo,
        )
    });
    let mut report = glimpse_core::attack::RobustnessReport::default();
    let mut logs = Vec::with_capacity(n);
    for (r, l) in parts {
        report.merge(&r);
        logs.extend(l);
    }
    (report, logs)
}

// ── Glimpse visualization ───────────────────────────────────────────────

pub struct VizOutcome {
    pub run_dir: PathBuf,
    pub glimpse_first: PathBuf,
    pub glimpse_final: PathBuf,
    pub trajectory: PathBuf,
    pub fixations: usize,
}

pub fn cmd_glimpse_viz(cfg: &RunConfig) -> Result<VizOutcome, RunError> {
    let image_path =
        cfg.image.as_ref().ok_or_else(|| input("glimpse-viz requires an input image"))?;
    cfg.require_path("image", image_path)?;
    let model_cfg = cfg.model_config()?;
    let image = viz::read_pixmap(image_path).map_err(input)?;
    if image.channels != model_cfg.channels {
        return Err(input(format!(
            "image has {} channels, model expects {}",
            image.channels, model_cfg.channels
        )));
    }

    let model = match &cfg.checkpoint {
        Some(path) => {
            cfg.require_path("checkpoint", path)?;
            load_checkpoint_expecting(path, &model_cfg).map_err(input)?.model
        }
        None => Model::<f32>::new(model_cfg.clone(), cfg.seed),
    };

    let episode = model.run_episode(
        &image,
        cfg.glimpse_num,
        FixationPolicy::Learned,
        seeds::derive(cfg.seed, &[0x51]),
        false,
    );

    let run_dir = make_run_dir(cfg, "viz")?;
    let first = extract_glimpse(&image, episode.fixations[0], &model_cfg.fov);
    let last = extract_glimpse(
        &image,
        *episode.fixations.last().expect("episode has fixations"),
        &model_cfg.fov,
    );
    let overlay = viz::trajectory_overlay(&image, &episode, &model_cfg.fov);

    let glimpse_first = run_dir.join("glimpse-first.pgm");
    let glimpse_final = run_dir.join("glimpse-final.pgm");
    let trajectory = run_dir.join("trajectory.ppm");
    viz::write_pixmap(&glimpse_first, &viz::glimpse_to_image(&first)).map_err(runtime)?;
    viz::write_pixmap(&glimpse_final, &viz::glimpse_to_image(&last)).map_err(runtime)?;
    viz::write_pixmap(&trajectory, &overlay).map_err(runtime)?;

    Ok(VizOutcome {
        run_dir,
        glimpse_first,
        glimpse_final,
        trajectory,
        fixations: episode.len(),
    })
}

/// Central fixation at the canvas middle, used by tests and ablations.
pub fn center_fixation() -> Fixation {
    Fixation::new(0.0, 0.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg(dir: &Path) -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.data_dir = dir.join("data");
        cfg.runs_dir = dir.join("runs");
        cfg.gen_train = 24;
        cfg.gen_test = 12;
        cfg.out_size = 48;
        cfg.scale_hi = 1.2;
        cfg.clutter_count = 2;
        cfg.batch_size = 8;
        cfg.epochs = 1;
        cfg.glimpse_num = 2;
        cfg.grid_h = 8;
        cfg.grid_w = 8;
        cfg.what_cnn = "4x3p2".into();
        cfg.where_cnn = "4x3p2".into();
        cfg.lstm_dim = 16;
        cfg.fc_classifier = 16;
        cfg.fc_baseline = 16;
        cfg.fc_location = 16;
        cfg.seed = 7;
        cfg
    }

    #[test]
    fn run_dirs_never_collide() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg(dir.path());
        let a = make_run_dir(&cfg, "train").unwrap();
        let b = make_run_dir(&cfg, "train").unwrap();
        assert_ne!(a, b);
        assert!(a.join("config.txt").exists());
    }

    #[test]
    fn dataset_gen_then_train_one_epoch() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg(dir.path());
        let paths = cmd_dataset_gen(&cfg).unwrap();
        assert!(paths.train_images.exists());
        assert!(cfg.data_dir.join("manifest.txt").exists());

        let out = cmd_train(&cfg).unwrap();
        assert!(out.checkpoint.exists());
        assert_eq!(out.epochs_run, 1);
        let ck = load_checkpoint(&out.checkpoint).unwrap();
        assert_eq!(ck.epoch, 1);
    }

    #[test]
    fn resume_continues_epoch_counter() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_cfg(dir.path());
        cmd_dataset_gen(&cfg).unwrap();
        let first = cmd_train(&cfg).unwrap();

        cfg.resume = Some(first.checkpoint.clone());
        cfg.epochs = 2;
        let second = cmd_train(&cfg).unwrap();
        assert_eq!(second.epochs_run, 2);
        let ck = load_checkpoint(&second.checkpoint).unwrap();
        assert_eq!(ck.epoch, 2);
    }

    #[test]
    fn same_seed_identical_metrics_files() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg(dir.path());
        cmd_dataset_gen(&cfg).unwrap();
        let a = cmd_train(&cfg).unwrap();
        let b = cmd_train(&cfg).unwrap();
        let ma = std::fs::read_to_string(a.run_dir.join("metrics.csv")).unwrap();
        let mb = std::fs::read_to_string(b.run_dir.join("metrics.csv")).unwrap();
        assert_eq!(ma, mb);
    }

    #[test]
    fn missing_dataset_is_input_error() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg(dir.path());
        match cmd_train(&cfg) {
            Err(RunError::Input(_)) => {}
            other => panic!("expected input error, got {other:?}"),
        }
    }

    #[test]
    fn eval_grid_shape_and_range() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_cfg(dir.path());
        cmd_dataset_gen(&cfg).unwrap();
        let out = cmd_train(&cfg).unwrap();
        cfg.checkpoint = Some(out.checkpoint.clone());
        cfg.eval_glimpses = "1,2".into();
        cfg.eval_mc = "1,4".into();
        let ev = cmd_eval(&cfg).unwrap();
        assert_eq!(ev.accuracy.len(), 2);
        assert_eq!(ev.accuracy[0].len(), 2);
        for row in &ev.accuracy {
            for &a in row {
                assert!((0.0..=1.0).contains(&a));
            }
        }
        assert!(ev.run_dir.join("eval.csv").exists());
    }

    #[test]
    fn empty_test_set_is_explicit_error() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_cfg(dir.path());
        cmd_dataset_gen(&cfg).unwrap();
        let out = cmd_train(&cfg).unwrap();
        // overwrite the test split with an empty IDX file
        idx::write_idx_labels(&dataset_paths(&cfg.data_dir).test_labels, &[]).unwrap();
        let empty: Vec<ImageBuffer<f32>> = Vec::new();
        // write_idx_images needs at least one image for dims; hand-roll an
        // empty file instead
        {
            use std::io::Write;
            let mut f =
                std::fs::File::create(&dataset_paths(&cfg.data_dir).test_images).unwrap();
            f.write_all(&idx::IMAGES_MAGIC.to_be_bytes()).unwrap();
            f.write_all(&0u32.to_be_bytes()).unwrap();
            f.write_all(&8u32.to_be_bytes()).unwrap();
            f.write_all(&8u32.to_be_bytes()).unwrap();
        }
        let _ = empty;
        cfg.checkpoint = Some(out.checkpoint);
        match cmd_eval(&cfg) {
            Err(RunError::Input(msg)) => assert!(msg.contains("empty"), "{msg}"),
            other => panic!("expected input error, got {other:?}"),
        }
    }

    #[test]
    fn glimpse_viz_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_cfg(dir.path());
        // constant input image
        let img = ImageBuffer::constant(48, 48, 1, 0.6f32);
        let img_path = dir.path().join("input.pgm");
        viz::write_pixmap(&img_path, &img).unwrap();
        cfg.image = Some(img_path);
        cfg.glimpse_num = 3;
        let out = cmd_glimpse_viz(&cfg).unwrap();
        assert_eq!(out.fixations, 3);
        let g = viz::read_pixmap(&out.glimpse_first).unwrap();
        assert_eq!((g.height, g.width), (cfg.grid_h, cfg.grid_w));
        // constant input -> constant glimpse
        let lo = g.data.iter().cloned().fold(f32::INFINITY, f32::min);
        let hi = g.data.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        assert!(hi - lo <= 1.0 / 255.0 + 1e-6);
        assert!(out.trajectory.exists());
    }
}
