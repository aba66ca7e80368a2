//! Hybrid training objective and the per-batch update step.
//!
//! Cross-entropy on the final logits trains the what pathway and classifier;
//! mean-squared error against the 0/1 reward trains the baseline head (its
//! input is detached); REINFORCE with baseline subtraction trains the where
//! pathway. The three parameter groups run Adam at their own learning rates
//! (what + classifier and the baseline head at `lr_what`, the where pathway
//! at `lr_where`), with one shared global-norm gradient clip.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::adam::{adam_step, AdamState};
use crate::autodiff::{Tape, TensorId};
use crate::image::ImageBuffer;
use crate::model::{argmax, BatchHandles, Episode, FixationPolicy, GlimpseSource, Model};
use num_traits::Float;

use crate::real::Real;
use crate::sampler::FovConfig;
use crate::seeds;

/// Global-norm clip applied to every gradient before Adam.
pub const GRAD_CLIP_NORM: f64 = 10.0;

/// Training hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr_what: f64,
    pub lr_where: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub glimpse_num: usize,
    pub sigma: f64,
    pub seed: u64,
    pub fov: FovConfig,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.lr_what <= 0.0 || self.lr_where <= 0.0 {
            return Err("learning rates must be positive".into());
        }
        if self.lr_where > self.lr_what {
            return Err("lr_where must not exceed lr_what".into());
        }
        if self.batch_size == 0 || self.epochs == 0 || self.glimpse_num == 0 {
            return Err("batch_size, epochs and glimpse_num must be positive".into());
        }
        if self.sigma <= 0.0 {
            return Err("sigma must be positive".into());
        }
        self.fov.validate().map_err(|e| alloc::format!("{e}"))
    }
}

/// Scalar loss components of one episode or one batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub ce: f64,
    pub baseline_mse: f64,
    /// Value of the surrogate whose gradient is the policy gradient.
    pub reinforce: f64,
}

/// Numerically stable softmax cross-entropy of a logit vector.
pub fn softmax_ce_value(logits: &[f64], label: usize) -> f64 {
    assert!(label < logits.len(), "label out of range");
    let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let denom: f64 = logits.iter().map(|&l| (l - mx).exp()).sum();
    -(logits[label] - mx - denom.ln())
}

/// Loss components of a completed episode against its label.
///
/// The reward is recomputed from the final logits: R = 1 when the episode's
/// prediction matches the label. The surrogate excludes the final step's
/// location sample, which never drives a glimpse.
pub fn hybrid_loss(episode: &Episode, label: usize) -> LossBreakdown {
    let logits = episode.final_logits();
    assert!(label < logits.len(), "label out of range");
    let ce = softmax_ce_value(logits, label);
    let r = if argmax(logits) == label { 1.0 } else { 0.0 };
    let t = episode.len() as f64;
    let baseline_mse =
        episode.baselines.iter().map(|&b| (b - r) * (b - r)).sum::<f64>() / t;
    let mut reinforce = 0.0;
    for step in 0..episode.len().saturating_sub(1) {
        reinforce -= episode.log_probs[step] * (r - episode.baselines[step]);
    }
    LossBreakdown { ce, baseline_mse, reinforce }
}

/// Tape nodes of the assembled hybrid objective.
pub struct TapeLoss {
    pub ce: TensorId,
    pub baseline_mse: TensorId,
    pub reinforce: TensorId,
    pub total: TensorId,
}

/// Builds the batch objective on the tape. Rewards must already be set on
/// every episode. Advantages (R - b_t) enter as constants: the surrogate
/// sends no gradient into the baseline head.
pub fn hybrid_loss_on_tape<T: Real>(
    tape: &mut Tape<T>,
    handles: &BatchHandles,
    episodes: &[Episode],
    labels: &[usize],
) -> TapeLoss {
    let b = episodes.len();
    assert_eq!(labels.len(), b);
    let t_steps = episodes[0].len();

    let ce_vec = tape.softmax_cross_entropy(handles.final_logits, labels);
    let ce = tape.mean_all(ce_vec);

    let rewards: Vec<f64> = episodes
        .iter()
        .map(|e| f64::from(e.reward().expect("reward must be set before the loss")))
        .collect();
    let r_const = tape.constant(rewards.iter().map(|&r| T::from_f64(r)).collect(), vec![1, b]);

    let mut mse_acc: Option<TensorId> = None;
    for &b_id in &handles.step_baselines {
        let d = tape.sub(b_id, r_const);
        let sq = tape.mul(d, d);
        mse_acc = Some(match mse_acc {
            Some(acc) => tape.add(acc, sq),
            None => sq,
        });
    }
    let mse_sum = mse_acc.expect("at least one glimpse");
    let mse_mean = tape.mean_all(mse_sum);
    let baseline_mse = tape.scale(mse_mean, T::from_f64(1.0 / t_steps as f64));

    // policy surrogate: -(1/B) sum_b sum_{t<T-1} logprob_t * (R - b_t)
    let reinforce = if handles.step_logprobs.is_empty() || t_steps < 2 {
        tape.scalar_constant(T::zero())
    } else {
        let mut acc: Option<TensorId> = None;
        for (step, &lp) in handles.step_logprobs.iter().take(t_steps - 1).enumerate() {
            let adv: Vec<T> = episodes
                .iter()
                .zip(&rewards)
                .map(|(e, &r)| T::from_f64(r - e.baselines[step]))
                .collect();
            let adv_const = tape.constant(adv, vec![1, b]);
            let term = tape.mul(lp, adv_const);
            acc = Some(match acc {
                Some(a) => tape.add(a, term),
                None => term,
            });
        }
        let mean = tape.mean_all(acc.unwrap());
        tape.neg(mean)
    };

    let partial = tape.add(ce, baseline_mse);
    let total = tape.add(partial, reinforce);
    TapeLoss { ce, baseline_mse, reinforce, total }
}

// ── Optimizer ───────────────────────────────────────────────────────────

/// Learning-rate group of a parameter, decided by its name.
fn param_lr(name: &str, lr_what: f64, lr_where: f64) -> f64 {
    if name.starts_with("where_") || name.starts_with("location.") {
        lr_where
    } else {
        lr_what
    }
}

/// Adam moments for every model parameter, in `named_params` order.
pub struct OptState<T> {
    pub states: Vec<AdamState<T>>,
    pub names: Vec<String>,
}

impl<T: Real> OptState<T> {
    pub fn new(model: &Model<T>, lr_what: f64, lr_where: f64) -> Self {
        let mut states = Vec::new();
        let mut names = Vec::new();
        for (name, p) in model.named_params() {
            let lr = param_lr(&name, lr_what, lr_where);
            states.push(AdamState::new(p.numel(), T::from_f64(lr)));
            names.push(name);
        }
        OptState { states, names }
    }
}

/// Metrics of one optimization step.
#[derive(Clone, Copy, Debug)]
pub struct StepMetrics {
    pub ce: f64,
    pub baseline_mse: f64,
    pub reinforce: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum TrainError {
    NonFiniteLoss(LossBreakdown),
}

impl fmt::Display for TrainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainError::NonFiniteLoss(l) => write!(
                f,
                "non-finite loss: ce={} baseline_mse={} reinforce={}",
                l.ce, l.baseline_mse, l.reinforce
            ),
        }
    }
}

/// Gradients of the hybrid objective over one batch shard, without
/// touching the parameters. Gradients are those of the shard-mean loss;
/// metrics carry the shard's loss values and accuracy.
pub fn compute_batch_grads<T: Real>(
    model: &Model<T>,
    images: &[&ImageBuffer<T>],
    labels: &[usize],
    glimpse_num: usize,
    ablate: bool,
    step_seed: u64,
    seed_offset: usize,
) -> Result<(Vec<Option<Vec<T>>>, StepMetrics), TrainError> {
    assert!(!images.is_empty(), "empty batch");
    assert_eq!(images.len(), labels.len());
    let b = images.len();
    let episode_seeds: Vec<u64> = (0..b)
        .map(|i| seeds::derive(step_seed, &[(seed_offset + i) as u64]))
        .collect();

    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let policy = if ablate { FixationPolicy::Center } else { FixationPolicy::Learned };
    let (mut episodes, handles) = model.run_batch(
        &mut tape,
        &bound,
        images,
        glimpse_num,
        policy,
        GlimpseSource::Constant,
        &episode_seeds,
    );

    let mut correct = 0usize;
    for (ep, &label) in episodes.iter_mut().zip(labels) {
        let ok = ep.predicted_class() == label;
        ep.set_reward(ok);
        correct += usize::from(ok);
    }

    let loss = hybrid_loss_on_tape(&mut tape, &handles, &episodes, labels);
    let breakdown = LossBreakdown {
        ce: tape.value(loss.ce)[0].to_f64(),
        baseline_mse: tape.value(loss.baseline_mse)[0].to_f64(),
        reinforce: tape.value(loss.reinforce)[0].to_f64(),
    };
    if !tape.value(loss.total)[0].to_f64().is_finite() {
        return Err(TrainError::NonFiniteLoss(breakdown));
    }

    tape.backward(loss.total);

    let ids = model.bound_param_ids(&bound);
    let grads: Vec<Option<Vec<T>>> =
        ids.iter().map(|&id| tape.grad(id).map(|g| g.to_vec())).collect();

    Ok((
        grads,
        StepMetrics {
            ce: breakdown.ce,
            baseline_mse: breakdown.baseline_mse,
            reinforce: breakdown.reinforce,
            accuracy: correct as f64 / b as f64,
        },
    ))
}

/// Clips the gradient list at the shared global norm and applies Adam.
/// Parameters whose gradient is absent (the where pathway under ablation)
/// stay untouched.
pub fn apply_update<T: Real>(
    model: &mut Model<T>,
    opt: &mut OptState<T>,
    mut grads: Vec<Option<Vec<T>>>,
) {
    let mut sq = 0.0f64;
    for g in grads.iter().flatten() {
        for &v in g {
            let v = v.to_f64();
            sq += v * v;
        }
    }
    let norm = sq.sqrt();
    if norm > GRAD_CLIP_NORM {
        let k = T::from_f64(GRAD_CLIP_NORM / norm);
        for g in grads.iter_mut().flatten() {
            for v in g.iter_mut() {
                *v = *v * k;
            }
        }
    }

    for (((_, p), st), g) in model
        .named_params_mut()
        .into_iter()
        .zip(opt.states.iter_mut())
        .zip(grads.iter())
    {
        if let Some(g) = g {
            adam_step(&mut p.data, g, st);
        }
    }
}

/// Merges shard gradients into the batch-mean gradient. Each shard's
/// gradients are of its own mean loss; scaling by the shard fraction and
/// summing in shard order gives a deterministic batch gradient for a fixed
/// shard layout.
pub fn merge_shard_grads<T: Real>(
    shards: Vec<(Vec<Option<Vec<T>>>, usize)>,
    total: usize,
) -> Vec<Option<Vec<T>>> {
    let mut merged: Vec<Option<Vec<T>>> = Vec::new();
    for (grads, count) in shards {
        let w = T::from_f64(count as f64 / total as f64);
        if merged.is_empty() {
            merged = grads
                .into_iter()
                .map(|g| g.map(|mut v| {
                    for x in v.iter_mut() {
                        *x = *x * w;
                    }
                    v
                }))
                .collect();
            continue;
        }
        for (m, g) in merged.iter_mut().zip(grads) {
            match (m.as_mut(), g) {
                (Some(acc), Some(v)) => {
                    for (a, x) in acc.iter_mut().zip(v) {
                        *a = *a + x * w;
                    }
                }
                (None, Some(v)) => {
                    let mut v = v;
                    for x in v.iter_mut() {
                        *x = *x * w;
                    }
                    *m = Some(v);
                }
                _ => {}
            }
        }
    }
    merged
}

/// One batch: run episodes, backpropagate the hybrid objective, clip, and
/// apply Adam. With `ablate` the where pathway is skipped entirely and
/// every fixation is the image center.
pub fn train_step<T: Real>(
    model: &mut Model<T>,
    opt: &mut OptState<T>,
    images: &[&ImageBuffer<T>],
    labels: &[usize],
    glimpse_num: usize,
    ablate: bool,
    step_seed: u64,
) -> Result<StepMetrics, TrainError> {
    let (grads, metrics) =
        compute_batch_grads(model, images, labels, glimpse_num, ablate, step_seed, 0)?;
    apply_update(model, opt, grads);
    Ok(metrics)
}

// ── Evaluation ──────────────────────────────────────────────────────────

/// Per-image correctness with MC-averaged logits; processes the set in
/// bounded chunks. Seeds derive from (seed, image index, mc index), so the
/// outcome is chunking-independent.
pub fn evaluate<T: Real>(
    model: &Model<T>,
    images: &[&ImageBuffer<T>],
    labels: &[usize],
    glimpse_num: usize,
    mc_sample: usize,
    seed: u64,
) -> Vec<bool> {
    assert_eq!(images.len(), labels.len());
    assert!(mc_sample >= 1);
    let k = model.cfg.classes;
    let chunk_imgs = (256usize / mc_sample).max(1);
    let mut correct = Vec::with_capacity(images.len());
    for (chunk_idx, (imgs, lbls)) in
        images.chunks(chunk_imgs).zip(labels.chunks(chunk_imgs)).enumerate()
    {
        let base = chunk_idx * chunk_imgs;
        let mut cols: Vec<&ImageBuffer<T>> = Vec::with_capacity(imgs.len() * mc_sample);
        let mut col_seeds = Vec::with_capacity(imgs.len() * mc_sample);
        for (i, img) in imgs.iter().enumerate() {
            for m in 0..mc_sample {
                cols.push(img);
                col_seeds.push(seeds::derive(seed, &[(base + i) as u64, m as u64]));
            }
        }
        let eps = model.run_batch_infer(&cols, glimpse_num, FixationPolicy::Learned, &col_seeds);
        for (i, &label) in lbls.iter().enumerate() {
            let mut mean = vec![0.0f64; k];
            for m in 0..mc_sample {
                let ep = &eps[i * mc_sample + m];
                for (acc, &l) in mean.iter_mut().zip(ep.final_logits()) {
                    *acc += l;
                }
            }
            for v in mean.iter_mut() {
                *v /= mc_sample as f64;
            }
            correct.push(argmax(&mean) == label);
        }
    }
    correct
}

pub fn accuracy_of(correct: &[bool]) -> f64 {
    if correct.is_empty() {
        return 0.0;
    }
    correct.iter().filter(|&&c| c).count() as f64 / correct.len() as f64
}

/// Accuracy over a (glimpse count) x (MC samples) grid from one pass.
///
/// Episodes are run once at the largest glimpse count and largest MC count;
/// smaller cells reuse prefixes (logits at intermediate steps, means over
/// the first m episodes), which both saves compute and couples the cells
/// for a low-variance monotonicity comparison.
pub fn eval_grid<T: Real>(
    model: &Model<T>,
    images: &[&ImageBuffer<T>],
    labels: &[usize],
    glimpse_nums: &[usize],
    mc_samples: &[usize],
    seed: u64,
) -> Vec<Vec<f64>> {
    let max_g = *glimpse_nums.iter().max().unwrap();
    let max_m = *mc_samples.iter().max().unwrap();
    let k = model.cfg.classes;
    let chunk_imgs = (256usize / max_m).max(1);
    let mut hits = vec![vec![0usize; mc_samples.len()]; glimpse_nums.len()];
    for (chunk_idx, (imgs, lbls)) in
        images.chunks(chunk_imgs).zip(labels.chunks(chunk_imgs)).enumerate()
    {
        let base = chunk_idx * chunk_imgs;
        let mut cols: Vec<&ImageBuffer<T>> = Vec::with_capacity(imgs.len() * max_m);
        let mut col_seeds = Vec::with_capacity(imgs.len() * max_m);
        for (i, img) in imgs.iter().enumerate() {
            for m in 0..max_m {
                cols.push(img);
                col_seeds.push(seeds::derive(seed, &[(base + i) as u64, m as u64]));
            }
        }
        let eps = model.run_batch_infer(&cols, max_g, FixationPolicy::Learned, &col_seeds);
        for (i, &label) in lbls.iter().enumerate() {
            for (gi, &g) in glimpse_nums.iter().enumerate() {
                for (mi, &m) in mc_samples.iter().enumerate() {
                    let mut mean = vec![0.0f64; k];
                    for e in 0..m {
                        let ep = &eps[i * max_m + e];
                        for (acc, &l) in mean.iter_mut().zip(&ep.step_logits[g - 1]) {
                            *acc += l;
                        }
                    }
                    for v in mean.iter_mut() {
                        *v /= m as f64;
                    }
                    if argmax(&mean) == label {
                        hits[gi][mi] += 1;
                    }
                }
            }
        }
    }
    hits.into_iter()
        .map(|row| row.into_iter().map(|h| h as f64 / images.len() as f64).collect())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ConvSpec, ModelConfig};
    use crate::sampler::Fixation;
    use rand::Rng;

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

    fn noise_image(seed: u64) -> ImageBuffer<f32> {
        let mut rng = seeds::rng(seed, &[7]);
        let mut img = ImageBuffer::zeros(32, 32, 1);
        for v in img.data.iter_mut() {
            *v = rng.gen_range(0.0..1.0);
        }
        img
    }

    #[test]
    fn hybrid_loss_baseline_mse_value() {
        // R=1 and b_t = 0.6 for all t gives mse (1-0.6)^2 = 0.16
        let model = Model::<f32>::new(tiny_config(), 1);
        let img = noise_image(1);
        let mut ep = model.run_episode(&img, 4, FixationPolicy::Learned, 3, false);
        let label = ep.predicted_class(); // force R = 1
        ep.baselines = vec![0.6; 4];
        let l = hybrid_loss(&ep, label);
        assert!((l.baseline_mse - 0.16).abs() < 1e-12);
    }

    #[test]
    fn hybrid_loss_excludes_final_sample() {
        let model = Model::<f32>::new(tiny_config(), 1);
        let img = noise_image(2);
        let mut ep = model.run_episode(&img, 3, FixationPolicy::Learned, 3, false);
        let label = (ep.predicted_class() + 1) % 3; // R = 0
        ep.baselines = vec![0.5; 3];
        ep.log_probs = vec![1.0, 10.0, 1000.0];
        let l = hybrid_loss(&ep, label);
        // -(1*(0-0.5) + 10*(0-0.5)) = 5.5; the 1000 term must not appear
        assert!((l.reinforce - 5.5).abs() < 1e-9, "got {}", l.reinforce);
    }

    #[test]
    fn zero_advantage_gives_exactly_zero_policy_gradient() {
        // when b_t equals R for every step, the surrogate's gradient into
        // the where pathway is exactly zero
        let model = Model::<f32>::new(tiny_config(), 5);
        let img = noise_image(5);
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let (mut eps, handles) = model.run_batch(
            &mut tape,
            &bound,
            &[&img],
            3,
            FixationPolicy::Learned,
            GlimpseSource::Constant,
            &[9],
        );
        eps[0].set_reward(true);
        for b in eps[0].baselines.iter_mut() {
            *b = 1.0; // b_t == R
        }
        let loss = hybrid_loss_on_tape(&mut tape, &handles, &eps, &[0]);
        // isolate the surrogate
        tape.backward(loss.reinforce);
        for id in [bound.location.out.w, bound.location.hidden.w, bound.where_lstm.w_ih] {
            if let Some(g) = tape.grad(id) {
                assert!(g.iter().all(|&v| v == 0.0), "nonzero policy gradient");
            }
        }
    }

    #[test]
    fn ce_gradient_never_reaches_where_pathway() {
        let model = Model::<f32>::new(tiny_config(), 5);
        let img = noise_image(6);
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let (mut eps, handles) = model.run_batch(
            &mut tape,
            &bound,
            &[&img],
            3,
            FixationPolicy::Learned,
            GlimpseSource::Constant,
            &[9],
        );
        eps[0].set_reward(true);
        let loss = hybrid_loss_on_tape(&mut tape, &handles, &eps, &[1]);
        tape.backward(loss.ce);
        for id in model.bound_param_ids(&bound).iter().skip(16) {
            // indices 16.. are the where pathway and location head
            assert!(tape.grad(*id).is_none(), "cross-entropy leaked into the where pathway");
        }
        // and it does reach the what pathway
        assert!(tape.grad(bound.what_lstm.w_ih).is_some());
    }

    #[test]
    fn baseline_mse_trains_only_baseline_head() {
        let model = Model::<f32>::new(tiny_config(), 5);
        let img = noise_image(7);
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let (mut eps, handles) = model.run_batch(
            &mut tape,
            &bound,
            &[&img],
            2,
            FixationPolicy::Learned,
            GlimpseSource::Constant,
            &[4],
        );
        eps[0].set_reward(false);
        let loss = hybrid_loss_on_tape(&mut tape, &handles, &eps, &[2]);
        tape.backward(loss.baseline_mse);
        assert!(tape.grad(bound.baseline.out.w).is_some());
        assert!(tape.grad(bound.what_lstm.w_ih).is_none(), "mse leaked into the what pathway");
        assert!(tape.grad(bound.classifier.out.w).is_none());
    }

    #[test]
    fn reinforce_gradient_nonzero_with_advantage() {
        let model = Model::<f32>::new(tiny_config(), 5);
        let img = noise_image(8);
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let (mut eps, handles) = model.run_batch(
            &mut tape,
            &bound,
            &[&img],
            3,
            FixationPolicy::Learned,
            GlimpseSource::Constant,
            &[12],
        );
        eps[0].set_reward(true);
        let loss = hybrid_loss_on_tape(&mut tape, &handles, &eps, &[0]);
        tape.backward(loss.reinforce);
        let g = tape.grad(bound.location.out.w).expect("policy gradient missing");
        assert!(g.iter().any(|&v| v != 0.0));
        // and the what pathway stays untouched by the surrogate
        assert!(tape.grad(bound.what_lstm.w_ih).is_none());
    }

    #[test]
    fn zero_learning_rate_keeps_params_bit_identical() {
        let cfg = tiny_config();
        let mut model = Model::<f32>::new(cfg, 3);
        // lr 0 in both groups; validate() forbids it, so build OptState by hand
        let mut opt = OptState::new(&model, 1.0, 1.0);
        for st in opt.states.iter_mut() {
            st.lr = 0.0;
        }
        let before: Vec<Vec<f32>> =
            model.named_params().iter().map(|(_, p)| p.data.clone()).collect();
        let img = noise_image(9);
        train_step(&mut model, &mut opt, &[&img], &[1], 3, false, 77).unwrap();
        let after: Vec<Vec<f32>> =
            model.named_params().iter().map(|(_, p)| p.data.clone()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn ablated_step_leaves_where_pathway_untouched() {
        let mut model = Model::<f32>::new(tiny_config(), 3);
        let mut opt = OptState::new(&model, 1e-3, 1e-5);
        let where_before = model.where_lstm.w_ih.data.clone();
        let what_before = model.what_lstm.w_ih.data.clone();
        let img = noise_image(10);
        train_step(&mut model, &mut opt, &[&img], &[0], 2, true, 5).unwrap();
        assert_eq!(model.where_lstm.w_ih.data, where_before);
        assert_ne!(model.what_lstm.w_ih.data, what_before);
    }

    #[test]
    fn descent_on_fixed_fixations() {
        // one step on a single frozen-fixation example decreases its CE
        let cfg = tiny_config();
        let mut model = Model::<f32>::new(cfg, 21);
        let mut opt = OptState::new(&model, 1e-3, 1e-5);
        let img = noise_image(11);
        let label = 2usize;

        let probe = model.run_episode(&img, 3, FixationPolicy::Learned, 400, false);
        let fseq = vec![probe.fixations.clone()];

        let ce_before = {
            let ep = model.run_episode(&img, 3, FixationPolicy::Scripted(&fseq), 0, false);
            softmax_ce_value(ep.final_logits(), label)
        };
        // several steps on the same scripted example
        for _ in 0..5 {
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape);
            let (mut eps, handles) = model.run_batch(
                &mut tape,
                &bound,
                &[&img],
                3,
                FixationPolicy::Scripted(&fseq),
                GlimpseSource::Constant,
                &[0],
            );
            let ok = eps[0].predicted_class() == label;
            eps[0].set_reward(ok);
            let loss = hybrid_loss_on_tape(&mut tape, &handles, &eps, &[label]);
            tape.backward(loss.total);
            let ids = model.bound_param_ids(&bound);
            let grads: Vec<Option<Vec<f32>>> =
                ids.iter().map(|&id| tape.grad(id).map(|g| g.to_vec())).collect();
            drop(tape);
            for (((_, p), st), g) in model
                .named_params_mut()
                .into_iter()
                .zip(opt.states.iter_mut())
                .zip(grads.iter())
            {
                if let Some(g) = g {
                    adam_step(&mut p.data, g, st);
                }
            }
        }
        let ce_after = {
            let ep = model.run_episode(&img, 3, FixationPolicy::Scripted(&fseq), 0, false);
            softmax_ce_value(ep.final_logits(), label)
        };
        assert!(
            ce_after < ce_before,
            "cross-entropy did not decrease: {ce_before} -> {ce_after}"
        );
    }

    #[test]
    fn train_config_validation() {
        let ok = TrainConfig {
            lr_what: 1e-3,
            lr_where: 1e-5,
            batch_size: 4,
            epochs: 1,
            glimpse_num: 2,
            sigma: 0.16,
            seed: 0,
            fov: FovConfig::new(6, 8, -2.0, -0.5),
        };
        assert!(ok.validate().is_ok());
        let mut bad = ok.clone();
        bad.lr_where = 1.0;
        assert!(bad.validate().is_err());
        let mut bad = ok;
        bad.sigma = 0.0;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn eval_grid_prefix_matches_short_run() {
        // logits at step g of a long episode equal a g-glimpse run with the
        // same seed: the grid's prefix reuse is exact
        let model = Model::<f32>::new(tiny_config(), 33);
        let img = noise_image(12);
        let long = model.run_episode(&img, 6, FixationPolicy::Learned, 123, false);
        let short = model.run_episode(&img, 2, FixationPolicy::Learned, 123, false);
        assert_eq!(long.step_logits[1], short.step_logits[1]);
        assert_eq!(long.fixations[..2], short.fixations[..2]);
    }

    #[test]
    fn scripted_policy_follows_sequence() {
        let model = Model::<f32>::new(tiny_config(), 3);
        let img = noise_image(13);
        let seq = vec![vec![
            Fixation::new(0.1, 0.2),
            Fixation::new(-0.3, 0.0),
            Fixation::new(0.05, -0.4),
        ]];
        let ep = model.run_episode(&img, 3, FixationPolicy::Scripted(&seq), 0, false);
        assert_eq!(ep.fixations, seq[0]);
    }
}
