//! Dual-pathway recurrent attention model.
//!
//! Per glimpse, the log-polar patch is processed by two parallel streams:
//! the what pathway (CNN -> LSTM -> classifier and baseline heads) learns
//! the image identity, the where pathway (CNN -> LSTM -> location head)
//! emits the mean of a Gaussian over the next fixation. Episodes run a
//! fixed number of glimpses; the final logits carry the prediction and, at
//! inference, several episodes' logits are averaged.
//!
//! Gradient routing is structural: sampled fixations enter both LSTMs as
//! constants (supervised gradients cannot tunnel through coordinates into
//! the policy), the baseline head reads a detached hidden state (its MSE
//! trains only the head), and on the differentiable-pixels path used by the
//! white-box attack only the what pathway sees the non-detached glimpse.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, TensorId};
use crate::image::ImageBuffer;
use crate::layers::{
    conv_layer_forward, conv_layer_out_dims, lstm_step, mlp_forward, ConvLayerIds,
    ConvLayerParams, LstmIds, LstmParams, MlpIds, MlpParams, PTensor,
};
use num_traits::Float;

use crate::real::Real;
use crate::sampler::{extract_glimpse, glimpse_taps, Fixation, FovConfig};
use crate::seeds;

/// One convolution layer of a pathway CNN.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub kernel: usize,
    /// Max-pool window/stride after the conv; 1 disables pooling.
    pub pool: usize,
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub classes: usize,
    pub channels: usize,
    pub fov: FovConfig,
    pub what_cnn: Vec<ConvSpec>,
    pub where_cnn: Vec<ConvSpec>,
    pub lstm_dim: usize,
    pub fc_classifier: usize,
    pub fc_baseline: usize,
    pub fc_location: usize,
    /// Fixed standard deviation of the location policy.
    pub sigma: f64,
}

impl ModelConfig {
    /// Desk-scale defaults for the perturbed-digits task: 20x24 field of
    /// view over radii 0.05..0.8, two-conv what CNN, one-conv where CNN,
    /// 128-dim LSTMs and heads, sigma 0.16.
    pub fn sim2mnist(classes: usize, channels: usize) -> Self {
        ModelConfig {
            classes,
            channels,
            fov: FovConfig::new(20, 24, 0.05f64.ln(), 0.8f64.ln()),
            what_cnn: vec![
                ConvSpec { out_channels: 16, kernel: 3, pool: 2 },
                ConvSpec { out_channels: 32, kernel: 3, pool: 2 },
            ],
            where_cnn: vec![ConvSpec { out_channels: 16, kernel: 3, pool: 2 }],
            lstm_dim: 128,
            fc_classifier: 128,
            fc_baseline: 128,
            fc_location: 128,
            sigma: 0.16,
        }
    }

    /// The large-image preset: 54x108 field of view over radii 0.02..1,
    /// 512-dim LSTMs. Constructible at desk scale, not trained here.
    pub fn imagenet(classes: usize, channels: usize) -> Self {
        ModelConfig {
            classes,
            channels,
            fov: FovConfig::new(54, 108, 0.02f64.ln(), 1.0f64.ln()),
            what_cnn: vec![
                ConvSpec { out_channels: 16, kernel: 3, pool: 2 },
                ConvSpec { out_channels: 32, kernel: 3, pool: 2 },
                ConvSpec { out_channels: 64, kernel: 3, pool: 2 },
            ],
            where_cnn: vec![
                ConvSpec { out_channels: 16, kernel: 3, pool: 2 },
                ConvSpec { out_channels: 32, kernel: 3, pool: 2 },
            ],
            lstm_dim: 512,
            fc_classifier: 512,
            fc_baseline: 512,
            fc_location: 128,
            sigma: 0.16,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        self.fov.validate().map_err(|e| alloc::format!("{e}"))?;
        if self.classes < 2 {
            return Err("need at least two classes".into());
        }
        if self.sigma <= 0.0 {
            return Err("sigma must be positive".into());
        }
        if self.lstm_dim == 0 {
            return Err("lstm_dim must be positive".into());
        }
        for (name, stack) in [("what", &self.what_cnn), ("where", &self.where_cnn)] {
            let (mut h, mut w) = (self.fov.grid_h, self.fov.grid_w);
            for (i, spec) in stack.iter().enumerate() {
                if spec.kernel % 2 == 0 {
                    return Err(alloc::format!("{name} conv {i}: kernel must be odd"));
                }
                if spec.pool > 1 && (h % spec.pool != 0 || w % spec.pool != 0) {
                    return Err(alloc::format!(
                        "{name} conv {i}: pool {} does not divide {h}x{w}",
                        spec.pool
                    ));
                }
                let (nh, nw) = conv_layer_out_dims(h, w, spec.pool);
                h = nh;
                w = nw;
            }
            if h == 0 || w == 0 {
                return Err(alloc::format!("{name} CNN pools away all resolution"));
            }
        }
        Ok(())
    }

    fn cnn_flat_dim(&self, stack: &[ConvSpec]) -> usize {
        let (mut h, mut w) = (self.fov.grid_h, self.fov.grid_w);
        let mut ch = self.channels;
        for spec in stack {
            let (nh, nw) = conv_layer_out_dims(h, w, spec.pool);
            h = nh;
            w = nw;
            ch = spec.out_channels;
        }
        ch * h * w
    }

    pub fn what_feature_dim(&self) -> usize {
        self.cnn_flat_dim(&self.what_cnn)
    }

    pub fn where_feature_dim(&self) -> usize {
        self.cnn_flat_dim(&self.where_cnn)
    }
}

/// The model: configuration plus every learned tensor.
#[derive(Clone, Debug)]
pub struct Model<T> {
    pub cfg: ModelConfig,
    pub what_cnn: Vec<ConvLayerParams<T>>,
    pub what_lstm: LstmParams<T>,
    pub classifier: MlpParams<T>,
    pub baseline: MlpParams<T>,
    pub where_cnn: Vec<ConvLayerParams<T>>,
    pub where_lstm: LstmParams<T>,
    pub location: MlpParams<T>,
}

fn init_stack<T: Real>(
    specs: &[ConvSpec],
    in_channels: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<ConvLayerParams<T>> {
    let mut layers = Vec::new();
    let mut ch = in_channels;
    for spec in specs {
        layers.push(ConvLayerParams::init(ch, spec.out_channels, spec.kernel, spec.pool, rng));
        ch = spec.out_channels;
    }
    layers
}

impl<T: Real> Model<T> {
    pub fn new(cfg: ModelConfig, seed: u64) -> Self {
        cfg.validate().expect("invalid model config");
        let mut rng = seeds::rng(seed, &[0x6d6f64656c]);
        let what_cnn = init_stack(&cfg.what_cnn, cfg.channels, &mut rng);
        let where_cnn = init_stack(&cfg.where_cnn, cfg.channels, &mut rng);
        let what_in = cfg.what_feature_dim() + 2;
        let where_in = cfg.where_feature_dim() + 2;
        let what_lstm = LstmParams::init(what_in, cfg.lstm_dim, &mut rng);
        let where_lstm = LstmParams::init(where_in, cfg.lstm_dim, &mut rng);
        let classifier = MlpParams::init(cfg.lstm_dim, cfg.fc_classifier, cfg.classes, &mut rng);
        let baseline = MlpParams::init(cfg.lstm_dim, cfg.fc_baseline, 1, &mut rng);
        let location = MlpParams::init(cfg.lstm_dim, cfg.fc_location, 2, &mut rng);
        Model { cfg, what_cnn, what_lstm, classifier, baseline, where_cnn, where_lstm, location }
    }

    /// Stable (name, tensor) enumeration; the order defines the optimizer
    /// and checkpoint layout.
    pub fn named_params(&self) -> Vec<(String, &PTensor<T>)> {
        let mut out = Vec::new();
        for (i, l) in self.what_cnn.iter().enumerate() {
            out.push((alloc::format!("what_cnn.{i}.kernel"), &l.kernel));
            out.push((alloc::format!("what_cnn.{i}.bias"), &l.bias));
        }
        out.push(("what_lstm.w_ih".into(), &self.what_lstm.w_ih));
        out.push(("what_lstm.w_hh".into(), &self.what_lstm.w_hh));
        out.push(("what_lstm.bias".into(), &self.what_lstm.bias));
        out.push(("classifier.hidden.w".into(), &self.classifier.hidden.w));
        out.push(("classifier.hidden.b".into(), &self.classifier.hidden.b));
        out.push(("classifier.out.w".into(), &self.classifier.out.w));
        out.push(("classifier.out.b".into(), &self.classifier.out.b));
        out.push(("baseline.hidden.w".into(), &self.baseline.hidden.w));
        out.push(("baseline.hidden.b".into(), &self.baseline.hidden.b));
        out.push(("baseline.out.w".into(), &self.baseline.out.w));
        out.push(("baseline.out.b".into(), &self.baseline.out.b));
        for (i, l) in self.where_cnn.iter().enumerate() {
            out.push((alloc::format!("where_cnn.{i}.kernel"), &l.kernel));
            out.push((alloc::format!("where_cnn.{i}.bias"), &l.bias));
        }
        out.push(("where_lstm.w_ih".into(), &self.where_lstm.w_ih));
        out.push(("where_lstm.w_hh".into(), &self.where_lstm.w_hh));
        out.push(("where_lstm.bias".into(), &self.where_lstm.bias));
        out.push(("location.hidden.w".into(), &self.location.hidden.w));
        out.push(("location.hidden.b".into(), &self.location.hidden.b));
        out.push(("location.out.w".into(), &self.location.out.w));
        out.push(("location.out.b".into(), &self.location.out.b));
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut PTensor<T>)> {
        let mut out: Vec<(String, &mut PTensor<T>)> = Vec::new();
        for (i, l) in self.what_cnn.iter_mut().enumerate() {
            out.push((alloc::format!("what_cnn.{i}.kernel"), &mut l.kernel));
            out.push((alloc::format!("what_cnn.{i}.bias"), &mut l.bias));
        }
        out.push(("what_lstm.w_ih".into(), &mut self.what_lstm.w_ih));
        out.push(("what_lstm.w_hh".into(), &mut self.what_lstm.w_hh));
        out.push(("what_lstm.bias".into(), &mut self.what_lstm.bias));
        out.push(("classifier.hidden.w".into(), &mut self.classifier.hidden.w));
        out.push(("classifier.hidden.b".into(), &mut self.classifier.hidden.b));
        out.push(("classifier.out.w".into(), &mut self.classifier.out.w));
        out.push(("classifier.out.b".into(), &mut self.classifier.out.b));
        out.push(("baseline.hidden.w".into(), &mut self.baseline.hidden.w));
        out.push(("baseline.hidden.b".into(), &mut self.baseline.hidden.b));
        out.push(("baseline.out.w".into(), &mut self.baseline.out.w));
        out.push(("baseline.out.b".into(), &mut self.baseline.out.b));
        for (i, l) in self.where_cnn.iter_mut().enumerate() {
            out.push((alloc::format!("where_cnn.{i}.kernel"), &mut l.kernel));
            out.push((alloc::format!("where_cnn.{i}.bias"), &mut l.bias));
        }
        out.push(("where_lstm.w_ih".into(), &mut self.where_lstm.w_ih));
        out.push(("where_lstm.w_hh".into(), &mut self.where_lstm.w_hh));
        out.push(("where_lstm.bias".into(), &mut self.where_lstm.bias));
        out.push(("location.hidden.w".into(), &mut self.location.hidden.w));
        out.push(("location.hidden.b".into(), &mut self.location.hidden.b));
        out.push(("location.out.w".into(), &mut self.location.out.w));
        out.push(("location.out.b".into(), &mut self.location.out.b));
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, p)| p.numel()).sum()
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> BoundModel {
        let bind_stack = |tape: &mut Tape<T>, stack: &[ConvLayerParams<T>]| {
            stack
                .iter()
                .map(|l| ConvLayerIds {
                    kernel: l.kernel.bind(tape),
                    bias: l.bias.bind(tape),
                    pool: l.pool,
                    k: l.kernel_size(),
                })
                .collect::<Vec<_>>()
        };
        let bind_lstm = |tape: &mut Tape<T>, l: &LstmParams<T>| LstmIds {
            w_ih: l.w_ih.bind(tape),
            w_hh: l.w_hh.bind(tape),
            bias: l.bias.bind(tape),
            hidden: l.hidden,
        };
        let bind_mlp = |tape: &mut Tape<T>, m: &MlpParams<T>| MlpIds {
            hidden: crate::layers::DenseIds { w: m.hidden.w.bind(tape), b: m.hidden.b.bind(tape) },
            out: crate::layers::DenseIds { w: m.out.w.bind(tape), b: m.out.b.bind(tape) },
        };
        BoundModel {
            what_cnn: bind_stack(tape, &self.what_cnn),
            what_lstm: bind_lstm(tape, &self.what_lstm),
            classifier: bind_mlp(tape, &self.classifier),
            baseline: bind_mlp(tape, &self.baseline),
            where_cnn: bind_stack(tape, &self.where_cnn),
            where_lstm: bind_lstm(tape, &self.where_lstm),
            location: bind_mlp(tape, &self.location),
        }
    }

    /// Leaf ids in `named_params` order, for gradient harvesting.
    pub fn bound_param_ids(&self, bound: &BoundModel) -> Vec<TensorId> {
        let mut out = Vec::new();
        for l in &bound.what_cnn {
            out.push(l.kernel);
            out.push(l.bias);
        }
        out.extend([bound.what_lstm.w_ih, bound.what_lstm.w_hh, bound.what_lstm.bias]);
        out.extend([
            bound.classifier.hidden.w,
            bound.classifier.hidden.b,
            bound.classifier.out.w,
            bound.classifier.out.b,
        ]);
        out.extend([
            bound.baseline.hidden.w,
            bound.baseline.hidden.b,
            bound.baseline.out.w,
            bound.baseline.out.b,
        ]);
        for l in &bound.where_cnn {
            out.push(l.kernel);
            out.push(l.bias);
        }
        out.extend([bound.where_lstm.w_ih, bound.where_lstm.w_hh, bound.where_lstm.bias]);
        out.extend([
            bound.location.hidden.w,
            bound.location.hidden.b,
            bound.location.out.w,
            bound.location.out.b,
        ]);
        out
    }
}

/// Tape handles of one bound copy of the parameters.
pub struct BoundModel {
    pub what_cnn: Vec<ConvLayerIds>,
    pub what_lstm: LstmIds,
    pub classifier: MlpIds,
    pub baseline: MlpIds,
    pub where_cnn: Vec<ConvLayerIds>,
    pub where_lstm: LstmIds,
    pub location: MlpIds,
}

// ── Episodes ────────────────────────────────────────────────────────────

/// Per-glimpse record of one episode. All lists have length glimpseNum.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub fixations: Vec<Fixation>,
    pub mus: Vec<(f64, f64)>,
    /// Gaussian log-density of the location sampled at each step (the
    /// final step's sample never drives a glimpse and is excluded from the
    /// policy-gradient sum).
    pub log_probs: Vec<f64>,
    pub baselines: Vec<f64>,
    /// Logits after each glimpse; the last entry is the prediction.
    pub step_logits: Vec<Vec<f64>>,
    reward: Option<u8>,
}

impl Episode {
    fn with_capacity(t: usize) -> Self {
        Episode {
            fixations: Vec::with_capacity(t),
            mus: Vec::with_capacity(t),
            log_probs: Vec::with_capacity(t),
            baselines: Vec::with_capacity(t),
            step_logits: Vec::with_capacity(t),
            reward: None,
        }
    }

    pub fn final_logits(&self) -> &[f64] {
        self.step_logits.last().expect("episode has at least one glimpse")
    }

    pub fn predicted_class(&self) -> usize {
        argmax(self.final_logits())
    }

    /// Sets the 0/1 reward; panics if set twice.
    pub fn set_reward(&mut self, correct: bool) {
        assert!(self.reward.is_none(), "reward set twice");
        self.reward = Some(u8::from(correct));
    }

    pub fn reward(&self) -> Option<u8> {
        self.reward
    }

    pub fn len(&self) -> usize {
        self.fixations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fixations.is_empty()
    }
}

/// Argmax with ties to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate().skip(1) {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

/// How fixations are produced during an episode.
#[derive(Clone, Copy, Debug)]
pub enum FixationPolicy<'a> {
    /// The where pathway's Gaussian policy.
    Learned,
    /// Fixed central fixation every step (the ablation).
    Center,
    /// Externally supplied fixation sequences, one per episode.
    Scripted(&'a [Vec<Fixation>]),
}

/// Where glimpse pixels come from on the tape.
#[derive(Clone, Copy, Debug)]
pub enum GlimpseSource {
    /// Sampled outside the graph; pixels are constants.
    Constant,
    /// Differentiable bilinear gather from a `[b,h,w,c]` leaf of stacked
    /// images; only the what pathway sees the differentiable version.
    Differentiable(TensorId),
}

/// Tape handles needed to assemble the training loss.
pub struct BatchHandles {
    /// `[classes, batch]` logits of the final glimpse.
    pub final_logits: TensorId,
    /// `[1, batch]` baseline per step.
    pub step_baselines: Vec<TensorId>,
    /// `[1, batch]` location log-probability per step (empty unless the
    /// policy is learned).
    pub step_logprobs: Vec<TensorId>,
}

/// Initial fixation: each coordinate uniform in (-0.25, 0.25).
pub fn init_fixation(rng: &mut ChaCha8Rng) -> Fixation {
    let x = rng.gen_range(-0.25..0.25);
    let y = rng.gen_range(-0.25..0.25);
    Fixation::new(x, y)
}

/// One standard-normal pair (Box-Muller).
fn normal_pair(rng: &mut ChaCha8Rng) -> (f64, f64) {
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen::<f64>();
    let r = (-2.0 * u1.ln()).sqrt();
    let (s, c) = (2.0 * core::f64::consts::PI * u2).sin_cos();
    (r * c, r * s)
}

/// Log-density constant per coordinate: -ln(sigma * sqrt(2 pi)).
fn logprob_const(sigma: f64) -> f64 {
    -(sigma * (2.0 * core::f64::consts::PI).sqrt()).ln()
}

/// Draws the next fixation from N(mu, sigma^2) per coordinate. The
/// log-density is computed for the unclamped draw; the returned fixation is
/// clamped into [-1, 1]^2.
pub fn sample_location(mu: (f64, f64), sigma: f64, rng: &mut ChaCha8Rng) -> (Fixation, f64) {
    let (zx, zy) = normal_pair(rng);
    let sx = mu.0 + sigma * zx;
    let sy = mu.1 + sigma * zy;
    let log_prob = -0.5 * (zx * zx) + -0.5 * (zy * zy) + 2.0 * logprob_const(sigma);
    (Fixation::clamped(sx, sy), log_prob)
}

// ── Batched episode execution ───────────────────────────────────────────

struct PathState {
    h: TensorId,
    c: TensorId,
}

fn zero_state<T: Real>(tape: &mut Tape<T>, hidden: usize, batch: usize) -> PathState {
    let h = tape.constant(vec![T::zero(); hidden * batch], vec![hidden, batch]);
    let c = tape.constant(vec![T::zero(); hidden * batch], vec![hidden, batch]);
    PathState { h, c }
}

fn cnn_features<T: Real>(tape: &mut Tape<T>, stack: &[ConvLayerIds], glimpse: TensorId) -> TensorId {
    let mut x = glimpse;
    for ids in stack {
        x = conv_layer_forward(tape, *ids, x);
    }
    let shape = tape.shape(x).to_vec();
    let (b, f) = (shape[0], shape[1] * shape[2] * shape[3]);
    let flat = tape.reshape(x, vec![b, f]);
    tape.transpose(flat)
}

fn pathway_step<T: Real>(
    tape: &mut Tape<T>,
    stack: &[ConvLayerIds],
    lstm: LstmIds,
    glimpse: TensorId,
    fix: TensorId,
    state: PathState,
) -> PathState {
    let feat = cnn_features(tape, stack, glimpse);
    let x = tape.concat_rows(feat, fix);
    let (h, c) = lstm_step(tape, lstm, x, state.h, state.c);
    PathState { h, c }
}

impl<T: Real> Model<T> {
    /// One what-pathway step over a `[b,c,gh,gw]` glimpse tensor already on
    /// the tape. Returns the new state, `[classes, b]` logits and the
    /// `[1, b]` sigmoid baseline. The baseline head reads a detached hidden
    /// state: its MSE trains only the head.
    fn what_step_on(
        &self,
        tape: &mut Tape<T>,
        bound: &BoundModel,
        glimpse: TensorId,
        fix: TensorId,
        state: PathState,
    ) -> (PathState, TensorId, TensorId) {
        let state = pathway_step(tape, &bound.what_cnn, bound.what_lstm, glimpse, fix, state);
        let logits = mlp_forward(tape, bound.classifier, state.h);
        let detached = tape.detach(state.h);
        let b_raw = mlp_forward(tape, bound.baseline, detached);
        let baseline = tape.sigmoid(b_raw);
        (state, logits, baseline)
    }

    /// One where-pathway step; returns the new state and `[2, b]` location
    /// means squashed through tanh.
    fn where_step_on(
        &self,
        tape: &mut Tape<T>,
        bound: &BoundModel,
        glimpse: TensorId,
        fix: TensorId,
        state: PathState,
    ) -> (PathState, TensorId) {
        let state = pathway_step(tape, &bound.where_cnn, bound.where_lstm, glimpse, fix, state);
        let mu_raw = mlp_forward(tape, bound.location, state.h);
        let mu = tape.tanh(mu_raw);
        (state, mu)
    }

    /// Runs `images.len()` episodes in lockstep on one tape.
    ///
    /// Rewards are left unset; the caller compares predictions to labels.
    /// Episode `b` draws from its own stream seeded by `episode_seeds[b]`.
    pub fn run_batch(
        &self,
        tape: &mut Tape<T>,
        bound: &BoundModel,
        images: &[&ImageBuffer<T>],
        glimpse_num: usize,
        policy: FixationPolicy<'_>,
        source: GlimpseSource,
        episode_seeds: &[u64],
    ) -> (Vec<Episode>, BatchHandles) {
        assert!(glimpse_num >= 1, "need at least one glimpse");
        let b = images.len();
        assert!(b > 0, "empty batch");
        assert_eq!(episode_seeds.len(), b, "one seed per episode");
        if let FixationPolicy::Scripted(seqs) = policy {
            assert_eq!(seqs.len(), b, "one fixation sequence per episode");
            assert!(seqs.iter().all(|s| s.len() >= glimpse_num), "scripted sequences too short");
        }
        let fov = &self.cfg.fov;
        let (gh, gw, ch) = (fov.grid_h, fov.grid_w, self.cfg.channels);
        let k = self.cfg.classes;
        let sigma = self.cfg.sigma;
        let learned = matches!(policy, FixationPolicy::Learned);

        let mut rngs: Vec<ChaCha8Rng> =
            episode_seeds.iter().map(|&s| seeds::rng(s, &[])).collect();
        let mut episodes: Vec<Episode> =
            (0..b).map(|_| Episode::with_capacity(glimpse_num)).collect();

        let mut fixations: Vec<Fixation> = (0..b)
            .map(|i| match policy {
                FixationPolicy::Learned => init_fixation(&mut rngs[i]),
                FixationPolicy::Center => Fixation::new(0.0, 0.0),
                FixationPolicy::Scripted(seqs) => seqs[i][0],
            })
            .collect();

        let mut what_state = zero_state(tape, self.cfg.lstm_dim, b);
        let mut where_state = if learned {
            Some(zero_state(tape, self.cfg.lstm_dim, b))
        } else {
            None
        };
        let mut handles = BatchHandles {
            final_logits: TensorId(0),
            step_baselines: Vec::with_capacity(glimpse_num),
            step_logprobs: Vec::with_capacity(glimpse_num),
        };

        for t in 0..glimpse_num {
            // glimpse tensor [b, ch, gh, gw] at the current fixations
            let glimpse = match source {
                GlimpseSource::Constant => {
                    let mut data = Vec::with_capacity(b * ch * gh * gw);
                    for (img, fx) in images.iter().zip(&fixations) {
                        data.extend_from_slice(&extract_glimpse(img, *fx, fov).chw_data());
                    }
                    tape.constant(data, vec![b, ch, gh, gw])
                }
                GlimpseSource::Differentiable(src) => {
                    let mut taps = Vec::with_capacity(b * gh * gw);
                    for (img, fx) in images.iter().zip(&fixations) {
                        taps.extend(glimpse_taps(img, *fx, fov));
                    }
                    tape.glimpse_from_images(src, taps, gh, gw)
                }
            };

            let mut fix_data = Vec::with_capacity(2 * b);
            for f in &fixations {
                fix_data.push(T::from_f64(f.x));
            }
            for f in &fixations {
                fix_data.push(T::from_f64(f.y));
            }
            let fix = tape.constant(fix_data, vec![2, b]);

            for (ep, f) in episodes.iter_mut().zip(&fixations) {
                ep.fixations.push(*f);
            }

            let (next_what, logits, baseline) =
                self.what_step_on(tape, bound, glimpse, fix, what_state);
            what_state = next_what;
            handles.final_logits = logits;
            handles.step_baselines.push(baseline);
            {
                let lv = tape.value(logits);
                let bv = tape.value(baseline);
                for (bi, ep) in episodes.iter_mut().enumerate() {
                    ep.step_logits
                        .push((0..k).map(|r| lv[r * b + bi].to_f64()).collect());
                    ep.baselines.push(bv[bi].to_f64());
                }
            }

            if learned {
                // the where pathway never sees differentiable pixels
                let where_glimpse = match source {
                    GlimpseSource::Constant => glimpse,
                    GlimpseSource::Differentiable(_) => tape.detach(glimpse),
                };
                let (next_where, mu) =
                    self.where_step_on(tape, bound, where_glimpse, fix, where_state.take().unwrap());
                where_state = Some(next_where);

                // sample the next fixation per episode
                let mu_v = tape.value(mu).to_vec();
                let mut samples = Vec::with_capacity(2 * b);
                let mut next_fix = Vec::with_capacity(b);
                for bi in 0..b {
                    let m = (mu_v[bi].to_f64(), mu_v[b + bi].to_f64());
                    let (zx, zy) = normal_pair(&mut rngs[bi]);
                    let sx = m.0 + sigma * zx;
                    let sy = m.1 + sigma * zy;
                    episodes[bi].mus.push(m);
                    next_fix.push(Fixation::clamped(sx, sy));
                    samples.push((sx, sy));
                }
                let mut s_data = Vec::with_capacity(2 * b);
                for s in &samples {
                    s_data.push(T::from_f64(s.0));
                }
                for s in &samples {
                    s_data.push(T::from_f64(s.1));
                }
                let s_const = tape.constant(s_data, vec![2, b]);
                // per-coordinate: -(1/2)((s-mu)/sigma)^2 - ln(sigma sqrt(2 pi))
                let diff = tape.sub(s_const, mu);
                let z = tape.scale(diff, T::from_f64(1.0 / sigma));
                let zz = tape.mul(z, z);
                let half = tape.scale(zz, T::from_f64(-0.5));
                let summed = tape.col_sum(half);
                let lp = tape.add_scalar(summed, T::from_f64(2.0 * logprob_const(sigma)));
                let lp_v = tape.value(lp);
                for (bi, ep) in episodes.iter_mut().enumerate() {
                    ep.log_probs.push(lp_v[bi].to_f64());
                }
                handles.step_logprobs.push(lp);
                fixations = next_fix;
            } else {
                for ep in episodes.iter_mut() {
                    ep.mus.push((0.0, 0.0));
                    ep.log_probs.push(0.0);
                }
                if let FixationPolicy::Scripted(seqs) = policy {
                    if t + 1 < glimpse_num {
                        for (bi, f) in fixations.iter_mut().enumerate() {
                            *f = seqs[bi][t + 1];
                        }
                    }
                }
            }
        }
        (episodes, handles)
    }

    /// Inference over a batch: per-step no-grad tapes, recurrent state
    /// carried as raw arrays. Memory stays bounded by one glimpse step.
    pub fn run_batch_infer(
        &self,
        images: &[&ImageBuffer<T>],
        glimpse_num: usize,
        policy: FixationPolicy<'_>,
        episode_seeds: &[u64],
    ) -> Vec<Episode> {
        assert!(glimpse_num >= 1);
        let b = images.len();
        assert!(b > 0, "empty batch");
        assert_eq!(episode_seeds.len(), b);
        let fov = &self.cfg.fov;
        let (gh, gw, ch) = (fov.grid_h, fov.grid_w, self.cfg.channels);
        let k = self.cfg.classes;
        let hd = self.cfg.lstm_dim;
        let sigma = self.cfg.sigma;
        let learned = matches!(policy, FixationPolicy::Learned);

        let mut rngs: Vec<ChaCha8Rng> =
            episode_seeds.iter().map(|&s| seeds::rng(s, &[])).collect();
        let mut episodes: Vec<Episode> =
            (0..b).map(|_| Episode::with_capacity(glimpse_num)).collect();
        let mut fixations: Vec<Fixation> = (0..b)
            .map(|i| match policy {
                FixationPolicy::Learned => init_fixation(&mut rngs[i]),
                FixationPolicy::Center => Fixation::new(0.0, 0.0),
                FixationPolicy::Scripted(seqs) => seqs[i][0],
            })
            .collect();

        let mut wh = vec![T::zero(); hd * b];
        let mut wc = vec![T::zero(); hd * b];
        let mut rh = vec![T::zero(); hd * b];
        let mut rc = vec![T::zero(); hd * b];

        for t in 0..glimpse_num {
            let mut tape = Tape::no_grad();
            let bound = self.bind(&mut tape);

            let mut data = Vec::with_capacity(b * ch * gh * gw);
            for (img, fx) in images.iter().zip(&fixations) {
                data.extend_from_slice(&extract_glimpse(img, *fx, fov).chw_data());
            }
            let glimpse = tape.constant(data, vec![b, ch, gh, gw]);

            let mut fix_data = Vec::with_capacity(2 * b);
            for f in &fixations {
                fix_data.push(T::from_f64(f.x));
            }
            for f in &fixations {
                fix_data.push(T::from_f64(f.y));
            }
            let fix = tape.constant(fix_data, vec![2, b]);

            for (ep, f) in episodes.iter_mut().zip(&fixations) {
                ep.fixations.push(*f);
            }

            let state = PathState {
                h: tape.constant(wh.clone(), vec![hd, b]),
                c: tape.constant(wc.clone(), vec![hd, b]),
            };
            let (state, logits, baseline) = self.what_step_on(&mut tape, &bound, glimpse, fix, state);
            wh = tape.value(state.h).to_vec();
            wc = tape.value(state.c).to_vec();
            let lv = tape.value(logits);
            let bv = tape.value(baseline);
            for (bi, ep) in episodes.iter_mut().enumerate() {
                ep.step_logits.push((0..k).map(|r| lv[r * b + bi].to_f64()).collect());
                ep.baselines.push(bv[bi].to_f64());
            }

            if learned {
                let state = PathState {
                    h: tape.constant(rh.clone(), vec![hd, b]),
                    c: tape.constant(rc.clone(), vec![hd, b]),
                };
                let (state, mu) = self.where_step_on(&mut tape, &bound, glimpse, fix, state);
                rh = tape.value(state.h).to_vec();
                rc = tape.value(state.c).to_vec();
                let mu_v = tape.value(mu);
                for bi in 0..b {
                    let m = (mu_v[bi].to_f64(), mu_v[b + bi].to_f64());
                    let (f, lp) = sample_location(m, sigma, &mut rngs[bi]);
                    episodes[bi].mus.push(m);
                    episodes[bi].log_probs.push(lp);
                    fixations[bi] = f;
                }
            } else {
                for ep in episodes.iter_mut() {
                    ep.mus.push((0.0, 0.0));
                    ep.log_probs.push(0.0);
                }
                if let FixationPolicy::Scripted(seqs) = policy {
                    if t + 1 < glimpse_num {
                        for (bi, f) in fixations.iter_mut().enumerate() {
                            *f = seqs[bi][t + 1];
                        }
                    }
                }
            }
            let _ = t;
        }
        episodes
    }

    /// Single-episode convenience wrapper (batch of one).
    pub fn run_episode(
        &self,
        image: &ImageBuffer<T>,
        glimpse_num: usize,
        policy: FixationPolicy<'_>,
        seed: u64,
        train: bool,
    ) -> Episode {
        if train {
            let mut tape = Tape::new();
            let bound = self.bind(&mut tape);
            let (mut eps, _) = self.run_batch(
                &mut tape,
                &bound,
                &[image],
                glimpse_num,
                policy,
                GlimpseSource::Constant,
                &[seed],
            );
            eps.pop().unwrap()
        } else {
            self.run_batch_infer(&[image], glimpse_num, policy, &[seed])
                .pop()
                .unwrap()
        }
    }

    /// Averages final logits over `mc_sample` independent episodes and
    /// returns (class, averaged logits). Ties go to the lowest index.
    pub fn predict(
        &self,
        image: &ImageBuffer<T>,
        glimpse_num: usize,
        mc_sample: usize,
        seed: u64,
    ) -> (usize, Vec<f64>) {
        assert!(mc_sample >= 1);
        let images: Vec<&ImageBuffer<T>> = (0..mc_sample).map(|_| image).collect();
        let seeds: Vec<u64> = (0..mc_sample).map(|i| seeds::derive(seed, &[i as u64])).collect();
        let eps = self.run_batch_infer(&images, glimpse_num, FixationPolicy::Learned, &seeds);
        let k = self.cfg.classes;
        let mut mean = vec![0.0f64; k];
        for ep in &eps {
            for (m, &l) in mean.iter_mut().zip(ep.final_logits()) {
                *m += l;
            }
        }
        for m in mean.iter_mut() {
            *m /= mc_sample as f64;
        }
        (argmax(&mean), mean)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

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
    fn init_fixation_support_and_mean() {
        let mut rng = seeds::rng(123, &[]);
        let n = 10_000;
        let (mut min, mut max, mut sum) = (f64::INFINITY, f64::NEG_INFINITY, 0.0);
        for _ in 0..n {
            let f = init_fixation(&mut rng);
            for v in [f.x, f.y] {
                min = min.min(v);
                max = max.max(v);
                sum += v;
            }
        }
        assert!(min >= -0.25 && max <= 0.25);
        let mean = sum / (2 * n) as f64;
        assert!(mean.abs() <= 0.01, "mean {mean}");
    }

    #[test]
    fn init_fixation_seeded_reproducible() {
        let mut a = seeds::rng(5, &[]);
        let mut b = seeds::rng(5, &[]);
        for _ in 0..10 {
            assert_eq!(init_fixation(&mut a), init_fixation(&mut b));
        }
    }

    #[test]
    fn sample_location_degenerate_sigma() {
        let mut rng = seeds::rng(9, &[]);
        let (f, _) = sample_location((0.3, -0.2), 1e-9, &mut rng);
        assert!((f.x - 0.3).abs() <= 1e-6 && (f.y + 0.2).abs() <= 1e-6);
    }

    #[test]
    fn sample_location_logprob_at_mean() {
        // at x = mu the per-coordinate density is -ln(sigma sqrt(2 pi));
        // for sigma = 0.16 that is about 0.913646
        let per_coord = logprob_const(0.16);
        assert!((per_coord - 0.9136429).abs() < 1e-6, "got {per_coord}");
    }

    #[test]
    fn logprob_gradient_wrt_mu_closed_form() {
        // d logprob / d mu_x = (x - mu)/sigma^2 = 0.2/0.0256 = 7.8125
        let sigma = 0.16f64;
        let mut tape = Tape::<f64>::new();
        let mu = tape.leaf(vec![0.3, 0.0], vec![2, 1]);
        let s = tape.constant(vec![0.5, 0.0], vec![2, 1]);
        let diff = tape.sub(s, mu);
        let z = tape.scale(diff, 1.0 / sigma);
        let zz = tape.mul(z, z);
        let half = tape.scale(zz, -0.5);
        let summed = tape.col_sum(half);
        let lp = tape.add_scalar(summed, 2.0 * logprob_const(sigma));
        let out = tape.sum_all(lp);
        tape.backward(out);
        let g = tape.grad(mu).unwrap();
        assert!((g[0] - 7.8125).abs() < 1e-9, "got {}", g[0]);
    }

    #[test]
    fn episode_contract_lengths_and_bounds() {
        let model = Model::<f32>::new(tiny_config(), 42);
        let img = noise_image(1);
        let ep = model.run_episode(&img, 5, FixationPolicy::Learned, 11, true);
        assert_eq!(ep.len(), 5);
        assert_eq!(ep.mus.len(), 5);
        assert_eq!(ep.log_probs.len(), 5);
        assert_eq!(ep.baselines.len(), 5);
        assert_eq!(ep.step_logits.len(), 5);
        assert_eq!(ep.final_logits().len(), 3);
        for f in &ep.fixations {
            assert!(f.x >= -1.0 && f.x <= 1.0 && f.y >= -1.0 && f.y <= 1.0);
        }
        for b in &ep.baselines {
            assert!(*b > 0.0 && *b < 1.0);
        }
    }

    #[test]
    fn glimpse_num_one_runs_single_step() {
        let model = Model::<f32>::new(tiny_config(), 42);
        let img = noise_image(2);
        let ep = model.run_episode(&img, 1, FixationPolicy::Learned, 3, true);
        assert_eq!(ep.len(), 1);
    }

    #[test]
    fn same_seed_bit_identical_episode() {
        let model = Model::<f32>::new(tiny_config(), 42);
        let img = noise_image(3);
        let a = model.run_episode(&img, 4, FixationPolicy::Learned, 77, true);
        let b = model.run_episode(&img, 4, FixationPolicy::Learned, 77, true);
        assert_eq!(a, b);
    }

    #[test]
    fn train_and_infer_paths_agree() {
        // the per-step no-grad path must reproduce the taped path exactly
        let model = Model::<f32>::new(tiny_config(), 42);
        let img = noise_image(4);
        let a = model.run_episode(&img, 4, FixationPolicy::Learned, 5, true);
        let b = model.run_episode(&img, 4, FixationPolicy::Learned, 5, false);
        assert_eq!(a.fixations, b.fixations);
        for (x, y) in a.step_logits.iter().zip(&b.step_logits) {
            for (u, v) in x.iter().zip(y) {
                assert!((u - v).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn batched_run_matches_individual_runs() {
        let model = Model::<f32>::new(tiny_config(), 42);
        let imgs = [noise_image(10), noise_image(11), noise_image(12)];
        let refs: Vec<&ImageBuffer<f32>> = imgs.iter().collect();
        let seeds_v = [100u64, 101, 102];
        let batched = model.run_batch_infer(&refs, 3, FixationPolicy::Learned, &seeds_v);
        for (i, img) in imgs.iter().enumerate() {
            let single = model.run_episode(img, 3, FixationPolicy::Learned, seeds_v[i], false);
            assert_eq!(batched[i].fixations, single.fixations, "episode {i}");
        }
    }

    #[test]
    fn mu_stays_in_unit_square() {
        let model = Model::<f32>::new(tiny_config(), 7);
        for trial in 0..40 {
            let img = noise_image(100 + trial);
            let ep = model.run_episode(&img, 3, FixationPolicy::Learned, trial, false);
            for m in &ep.mus {
                assert!(m.0 > -1.0 && m.0 < 1.0 && m.1 > -1.0 && m.1 < 1.0);
            }
        }
    }

    #[test]
    fn zero_location_head_gives_zero_mu() {
        let mut model = Model::<f32>::new(tiny_config(), 7);
        for p in [&mut model.location.hidden.w, &mut model.location.hidden.b, &mut model.location.out.w, &mut model.location.out.b] {
            for v in p.data.iter_mut() {
                *v = 0.0;
            }
        }
        let img = noise_image(5);
        let ep = model.run_episode(&img, 3, FixationPolicy::Learned, 1, false);
        for m in &ep.mus {
            assert_eq!(*m, (0.0, 0.0));
        }
    }

    #[test]
    fn different_glimpses_different_hidden_states() {
        let model = Model::<f32>::new(tiny_config(), 13);
        let a = noise_image(20);
        let b = noise_image(21);
        let fix = vec![vec![Fixation::new(0.0, 0.0); 1]; 1];
        let ea = model.run_episode(&a, 1, FixationPolicy::Scripted(&fix), 0, false);
        let eb = model.run_episode(&b, 1, FixationPolicy::Scripted(&fix), 0, false);
        assert_ne!(ea.step_logits[0], eb.step_logits[0]);
    }

    #[test]
    fn center_policy_keeps_center() {
        let model = Model::<f32>::new(tiny_config(), 13);
        let img = noise_image(30);
        let ep = model.run_episode(&img, 4, FixationPolicy::Center, 0, false);
        for f in &ep.fixations {
            assert_eq!((f.x, f.y), (0.0, 0.0));
        }
        assert!(ep.log_probs.iter().all(|&l| l == 0.0));
    }

    #[test]
    fn infer_mode_records_no_graph() {
        let mut tape = Tape::<f32>::no_grad();
        let model = Model::<f32>::new(tiny_config(), 1);
        let bound = model.bind(&mut tape);
        let img = noise_image(40);
        let _ = model.run_batch(
            &mut tape,
            &bound,
            &[&img],
            2,
            FixationPolicy::Learned,
            GlimpseSource::Constant,
            &[9],
        );
        assert_eq!(tape.recorded_ops(), 0);
    }

    #[test]
    fn predict_constant_logits_picks_class_one() {
        let mut model = Model::<f32>::new(tiny_config(), 3);
        // zero every parameter, then set the classifier output bias
        let names: Vec<String> = model.named_params().iter().map(|(n, _)| n.clone()).collect();
        for (name, p) in names.iter().zip(model.named_params_mut()) {
            let _ = name;
            for v in p.1.data.iter_mut() {
                *v = 0.0;
            }
        }
        model.classifier.out.b.data = vec![0.0, 3.0, 1.0];
        let img = noise_image(50);
        for mc in [1usize, 3, 8] {
            let (class, logits) = model.predict(&img, 2, mc, 99);
            assert_eq!(class, 1);
            assert!((logits[1] - 3.0).abs() < 1e-5);
        }
    }

    #[test]
    fn predict_mc1_matches_single_episode() {
        let model = Model::<f32>::new(tiny_config(), 21);
        let img = noise_image(60);
        let (class, logits) = model.predict(&img, 3, 1, 7);
        let ep = model.run_batch_infer(
            &[&img],
            3,
            FixationPolicy::Learned,
            &[seeds::derive(7, &[0])],
        )
        .pop()
        .unwrap();
        assert_eq!(class, argmax(ep.final_logits()));
        for (a, b) in logits.iter().zip(ep.final_logits()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn argmax_ties_to_lowest() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[5.0]), 0);
    }

    #[test]
    #[should_panic(expected = "reward set twice")]
    fn reward_set_once() {
        let model = Model::<f32>::new(tiny_config(), 2);
        let img = noise_image(70);
        let mut ep = model.run_episode(&img, 1, FixationPolicy::Learned, 0, false);
        ep.set_reward(true);
        ep.set_reward(false);
    }
}
