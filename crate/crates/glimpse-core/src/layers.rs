//! Layer parameter containers and forward compositions on the tape:
//! wrap-padded convolution stacks, dense heads, the LSTM cell and batch
//! normalization.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, TensorId};
use crate::real::Real;

/// Master copy of one learned tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct PTensor<T> {
    pub data: Vec<T>,
    pub shape: Vec<usize>,
}

impl<T: Real> PTensor<T> {
    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        PTensor { data: vec![T::zero(); n], shape }
    }

    pub fn constant(shape: Vec<usize>, v: T) -> Self {
        let n = shape.iter().product();
        PTensor { data: vec![v; n], shape }
    }

    /// Uniform init in [-bound, bound].
    pub fn uniform(shape: Vec<usize>, bound: f64, rng: &mut ChaCha8Rng) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| T::from_f64(rng.gen_range(-bound..bound)))
            .collect();
        PTensor { data, shape }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> TensorId {
        tape.leaf(self.data.clone(), self.shape.clone())
    }
}

fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

// ── Dense ───────────────────────────────────────────────────────────────

/// Fully connected layer, `[out, in]` weight plus `[out]` bias.
#[derive(Clone, Debug)]
pub struct DenseParams<T> {
    pub w: PTensor<T>,
    pub b: PTensor<T>,
}

impl<T: Real> DenseParams<T> {
    pub fn init(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        DenseParams {
            w: PTensor::uniform(vec![out_dim, in_dim], glorot_bound(in_dim, out_dim), rng),
            b: PTensor::zeros(vec![out_dim]),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w.shape[1]
    }

    pub fn out_dim(&self) -> usize {
        self.w.shape[0]
    }
}

#[derive(Clone, Copy, Debug)]
pub struct DenseIds {
    pub w: TensorId,
    pub b: TensorId,
}

pub fn dense_forward<T: Real>(tape: &mut Tape<T>, ids: DenseIds, x: TensorId) -> TensorId {
    let y = tape.matmul(ids.w, x);
    tape.add_col_vec(y, ids.b)
}

/// Two-layer head: dense -> relu -> dense.
#[derive(Clone, Debug)]
pub struct MlpParams<T> {
    pub hidden: DenseParams<T>,
    pub out: DenseParams<T>,
}

impl<T: Real> MlpParams<T> {
    pub fn init(in_dim: usize, hidden_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        MlpParams {
            hidden: DenseParams::init(in_dim, hidden_dim, rng),
            out: DenseParams::init(hidden_dim, out_dim, rng),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct MlpIds {
    pub hidden: DenseIds,
    pub out: DenseIds,
}

pub fn mlp_forward<T: Real>(tape: &mut Tape<T>, ids: MlpIds, x: TensorId) -> TensorId {
    let h = dense_forward(tape, ids.hidden, x);
    let h = tape.relu(h);
    dense_forward(tape, ids.out, h)
}

// ── Convolution stack ───────────────────────────────────────────────────

/// One conv layer: odd square kernel, stride 1, wrap-around padding on the
/// angular axis, relu, then an optional square max pool.
#[derive(Clone, Debug)]
pub struct ConvLayerParams<T> {
    pub kernel: PTensor<T>,
    pub bias: PTensor<T>,
    /// Pool window and stride; 1 means no pooling.
    pub pool: usize,
}

impl<T: Real> ConvLayerParams<T> {
    pub fn init(in_ch: usize, out_ch: usize, k: usize, pool: usize, rng: &mut ChaCha8Rng) -> Self {
        assert!(k % 2 == 1, "kernel spatial dims must be odd for symmetric wrap padding");
        let fan_in = in_ch * k * k;
        let fan_out = out_ch * k * k;
        ConvLayerParams {
            kernel: PTensor::uniform(vec![out_ch, in_ch, k, k], glorot_bound(fan_in, fan_out), rng),
            bias: PTensor::zeros(vec![out_ch]),
            pool,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.shape[0]
    }

    pub fn kernel_size(&self) -> usize {
        self.kernel.shape[2]
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ConvLayerIds {
    pub kernel: TensorId,
    pub bias: TensorId,
    pub pool: usize,
    pub k: usize,
}

/// Wrap-pad, convolve (stride 1, same size), relu, optionally pool.
pub fn conv_layer_forward<T: Real>(tape: &mut Tape<T>, ids: ConvLayerIds, x: TensorId) -> TensorId {
    let p = (ids.k - 1) / 2;
    let padded = tape.wrap_pad(x, p, p);
    let y = tape.conv2d(padded, ids.kernel, ids.bias, 1, 1);
    let y = tape.relu(y);
    if ids.pool > 1 {
        tape.maxpool2d(y, ids.pool, ids.pool, ids.pool, ids.pool)
    } else {
        y
    }
}

/// Spatial dims after a conv layer (same-size conv, then pool).
pub fn conv_layer_out_dims(h: usize, w: usize, pool: usize) -> (usize, usize) {
    if pool > 1 {
        ((h - pool) / pool + 1, (w - pool) / pool + 1)
    } else {
        (h, w)
    }
}

// ── LSTM ────────────────────────────────────────────────────────────────

/// LSTM cell parameters with fused gates, row blocks ordered (i, f, g, o).
#[derive(Clone, Debug)]
pub struct LstmParams<T> {
    /// `[4*hidden, input]`
    pub w_ih: PTensor<T>,
    /// `[4*hidden, hidden]`
    pub w_hh: PTensor<T>,
    /// `[4*hidden]`
    pub bias: PTensor<T>,
    pub hidden: usize,
}

impl<T: Real> LstmParams<T> {
    pub fn init(input: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        let w_ih = PTensor::uniform(vec![4 * hidden, input], bound, rng);
        let w_hh = PTensor::uniform(vec![4 * hidden, hidden], bound, rng);
        let mut bias = PTensor::zeros(vec![4 * hidden]);
        // forget gate bias starts at one
        for i in hidden..2 * hidden {
            bias.data[i] = T::one();
        }
        LstmParams { w_ih, w_hh, bias, hidden }
    }

    pub fn input_dim(&self) -> usize {
        self.w_ih.shape[1]
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LstmIds {
    pub w_ih: TensorId,
    pub w_hh: TensorId,
    pub bias: TensorId,
    pub hidden: usize,
}

/// One LSTM step over a `[input, batch]` column block.
///
/// Gates: i, f, o through sigmoid, candidate g through tanh;
/// c' = f*c + i*g, h' = o * tanh(c').
pub fn lstm_step<T: Real>(
    tape: &mut Tape<T>,
    ids: LstmIds,
    x: TensorId,
    h: TensorId,
    c: TensorId,
) -> (TensorId, TensorId) {
    let hd = ids.hidden;
    let wx = tape.matmul(ids.w_ih, x);
    let wh = tape.matmul(ids.w_hh, h);
    let pre = tape.add(wx, wh);
    let pre = tape.add_col_vec(pre, ids.bias);

    let i_pre = tape.slice_rows(pre, 0, hd);
    let f_pre = tape.slice_rows(pre, hd, 2 * hd);
    let g_pre = tape.slice_rows(pre, 2 * hd, 3 * hd);
    let o_pre = tape.slice_rows(pre, 3 * hd, 4 * hd);

    let i = tape.sigmoid(i_pre);
    let f = tape.sigmoid(f_pre);
    let g = tape.tanh(g_pre);
    let o = tape.sigmoid(o_pre);

    let fc = tape.mul(f, c);
    let ig = tape.mul(i, g);
    let c_new = tape.add(fc, ig);
    let ct = tape.tanh(c_new);
    let h_new = tape.mul(o, ct);
    (h_new, c_new)
}

// ── Batch normalization ─────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Infer,
}

/// Per-channel batch normalization parameters and running statistics.
///
/// Running statistics track the biased batch moments so that inference
/// converges to the training-mode output on a stationary batch.
#[derive(Clone, Debug)]
pub struct BatchNormParams<T> {
    pub scale: PTensor<T>,
    pub shift: PTensor<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: T,
    pub epsilon: T,
}

impl<T: Real> BatchNormParams<T> {
    pub fn init(channels: usize) -> Self {
        BatchNormParams {
            scale: PTensor::constant(vec![channels], T::one()),
            shift: PTensor::zeros(vec![channels]),
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            momentum: T::from_f64(0.9),
            epsilon: T::from_f64(1e-5),
        }
    }

    pub fn channels(&self) -> usize {
        self.scale.numel()
    }

    fn update_running(&mut self, mean: &[T], var: &[T]) {
        let m = self.momentum;
        let one = T::one();
        for c in 0..self.channels() {
            self.running_mean[c] = m * self.running_mean[c] + (one - m) * mean[c];
            self.running_var[c] = m * self.running_var[c] + (one - m) * var[c];
        }
    }
}

/// Batch normalization over `[b,c,h,w]`.
///
/// Train mode normalizes by batch statistics (batch size must be at least
/// 2) and updates the running averages in `params`; infer mode applies the
/// running statistics.
pub fn batchnorm<T: Real>(
    tape: &mut Tape<T>,
    x: TensorId,
    scale: TensorId,
    shift: TensorId,
    params: &mut BatchNormParams<T>,
    mode: BnMode,
) -> TensorId {
    match mode {
        BnMode::Train => {
            let (out, mean, var) = tape.batchnorm_train(x, scale, shift, params.epsilon);
            params.update_running(&mean, &var);
            out
        }
        BnMode::Infer => {
            // y = a*x + b with per-channel constants folded from the
            // running stats; realized with existing ops via a channel mask
            let shape = tape.shape(x).to_vec();
            assert_eq!(shape.len(), 4, "batchnorm needs [b,c,h,w]");
            let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
            assert_eq!(c, params.channels());
            let mut a_full = vec![T::zero(); b * c * h * w];
            let mut b_full = vec![T::zero(); b * c * h * w];
            for bi in 0..b {
                for ch in 0..c {
                    let istd = T::one() / (params.running_var[ch] + params.epsilon).sqrt();
                    let sc = params.scale.data[ch];
                    let sh = params.shift.data[ch];
                    let a = sc * istd;
                    let off = sh - params.running_mean[ch] * a;
                    let base = (bi * c + ch) * h * w;
                    for k in 0..h * w {
                        a_full[base + k] = a;
                        b_full[base + k] = off;
                    }
                }
            }
            let a_id = tape.constant(a_full, shape.clone());
            let b_id = tape.constant(b_full, shape);
            let ax = tape.mul(x, a_id);
            tape.add(ax, b_id)
        }
    }
}

// ── Naming helper for checkpoints and optimizers ────────────────────────

/// Visitor item: a named parameter tensor.
pub struct NamedParam<'a, T> {
    pub name: String,
    pub tensor: &'a PTensor<T>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeds;

    #[test]
    fn lstm_all_zero_is_fixed_point() {
        // zero weights, biases and state: candidate is tanh(0) = 0, so both
        // h' and c' stay zero
        let mut tape = Tape::<f64>::new();
        let p = LstmParams::<f64> {
            w_ih: PTensor::zeros(vec![8, 3]),
            w_hh: PTensor::zeros(vec![8, 2]),
            bias: PTensor::zeros(vec![8]),
            hidden: 2,
        };
        let ids = LstmIds {
            w_ih: p.w_ih.bind(&mut tape),
            w_hh: p.w_hh.bind(&mut tape),
            bias: p.bias.bind(&mut tape),
            hidden: 2,
        };
        let x = tape.constant(vec![0.5, -0.3, 0.9], vec![3, 1]);
        let h = tape.constant(vec![0.0, 0.0], vec![2, 1]);
        let c = tape.constant(vec![0.0, 0.0], vec![2, 1]);
        let (h2, c2) = lstm_step(&mut tape, ids, x, h, c);
        assert_eq!(tape.value(h2), &[0.0, 0.0]);
        assert_eq!(tape.value(c2), &[0.0, 0.0]);
    }

    #[test]
    fn lstm_saturated_input_gate_blocks_candidate() {
        // a large negative input-gate bias with zero cell state keeps c'
        // within 1e-6 of zero
        let mut rng = seeds::rng(11, &[0]);
        let mut p = LstmParams::<f64>::init(3, 4, &mut rng);
        for i in 0..4 {
            p.bias.data[i] = -50.0; // input gate rows
        }
        let mut tape = Tape::<f64>::new();
        let ids = LstmIds {
            w_ih: p.w_ih.bind(&mut tape),
            w_hh: p.w_hh.bind(&mut tape),
            bias: p.bias.bind(&mut tape),
            hidden: 4,
        };
        let x = tape.constant(vec![0.9, -0.7, 0.4], vec![3, 1]);
        let h = tape.constant(vec![0.0; 4], vec![4, 1]);
        let c = tape.constant(vec![0.0; 4], vec![4, 1]);
        let (_, c2) = lstm_step(&mut tape, ids, x, h, c);
        for &v in tape.value(c2) {
            assert!(v.abs() <= 1e-6, "cell leaked: {v}");
        }
    }

    #[test]
    fn batchnorm_zero_variance_outputs_shift() {
        // a degenerate batch (zero variance) collapses to the shift value
        let mut tape = Tape::<f64>::new();
        let mut p = BatchNormParams::<f64>::init(1);
        p.shift.data[0] = 0.25;
        let x = tape.constant(vec![0.7; 8], vec![4, 1, 2, 1]);
        let scale = p.scale.bind(&mut tape);
        let shift = p.shift.bind(&mut tape);
        let y = batchnorm(&mut tape, x, scale, shift, &mut p, BnMode::Train);
        for &v in tape.value(y) {
            assert!((v - 0.25).abs() < 1e-9);
        }
    }

    #[test]
    fn batchnorm_standardized_batch_is_identity() {
        // batch already standardized (biased moments), scale 1 shift 0
        let vals = [-1.5f64, -0.5, 0.5, 1.5];
        let mean: f64 = vals.iter().sum::<f64>() / 4.0;
        let var: f64 = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
        let std = var.sqrt();
        let data: Vec<f64> = vals.iter().map(|v| (v - mean) / std).collect();
        let mut tape = Tape::<f64>::new();
        let mut p = BatchNormParams::<f64>::init(1);
        let x = tape.constant(data.clone(), vec![4, 1, 1, 1]);
        let scale = p.scale.bind(&mut tape);
        let shift = p.shift.bind(&mut tape);
        let y = batchnorm(&mut tape, x, scale, shift, &mut p, BnMode::Train);
        for (got, want) in tape.value(y).iter().zip(&data) {
            assert!((got - want).abs() <= 1e-5);
        }
    }

    #[test]
    fn batchnorm_train_statistics_normalized() {
        // train output has per-channel mean ~0 and variance ~1
        let mut tape = Tape::<f64>::new();
        let mut p = BatchNormParams::<f64>::init(2);
        let n = 6 * 2 * 3 * 2;
        let data: Vec<f64> = (0..n).map(|i| ((i * 29 % 13) as f64) * 0.37 - 1.0).collect();
        let x = tape.constant(data, vec![6, 2, 3, 2]);
        let scale = p.scale.bind(&mut tape);
        let shift = p.shift.bind(&mut tape);
        let y = batchnorm(&mut tape, x, scale, shift, &mut p, BnMode::Train);
        let out = tape.value(y);
        for ch in 0..2 {
            let mut vals = Vec::new();
            for b in 0..6 {
                for k in 0..6 {
                    vals.push(out[(b * 2 + ch) * 6 + k]);
                }
            }
            let m: f64 = vals.iter().sum::<f64>() / vals.len() as f64;
            let v: f64 = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / vals.len() as f64;
            assert!(m.abs() <= 1e-5, "channel mean {m}");
            assert!((v - 1.0).abs() <= 1e-4, "channel var {v}");
        }
    }

    #[test]
    fn batchnorm_infer_converges_to_train_output() {
        // running statistics converge on a fixed batch repeated 100 times;
        // infer output then matches train output within 1e-3
        let data: Vec<f64> = (0..16).map(|i| 0.2 * (i as f64) - 1.3).collect();
        let mut p = BatchNormParams::<f64>::init(2);
        let mut train_out = Vec::new();
        for _ in 0..100 {
            let mut tape = Tape::<f64>::new();
            let x = tape.constant(data.clone(), vec![4, 2, 2, 1]);
            let scale = p.scale.bind(&mut tape);
            let shift = p.shift.bind(&mut tape);
            let y = batchnorm(&mut tape, x, scale, shift, &mut p, BnMode::Train);
            train_out = tape.value(y).to_vec();
        }
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(data.clone(), vec![4, 2, 2, 1]);
        let scale = p.scale.bind(&mut tape);
        let shift = p.shift.bind(&mut tape);
        let y = batchnorm(&mut tape, x, scale, shift, &mut p, BnMode::Infer);
        for (a, b) in tape.value(y).iter().zip(&train_out) {
            assert!((a - b).abs() <= 1e-3, "infer {a} vs train {b}");
        }
    }

    #[test]
    #[should_panic(expected = "batch size >= 2")]
    fn batchnorm_train_batch_of_one_panics() {
        let mut tape = Tape::<f64>::new();
        let mut p = BatchNormParams::<f64>::init(1);
        let x = tape.constant(vec![1.0, 2.0], vec![1, 1, 2, 1]);
        let scale = p.scale.bind(&mut tape);
        let shift = p.shift.bind(&mut tape);
        let _ = batchnorm(&mut tape, x, scale, shift, &mut p, BnMode::Train);
    }

    #[test]
    fn conv_stack_dims() {
        assert_eq!(conv_layer_out_dims(20, 24, 2), (10, 12));
        assert_eq!(conv_layer_out_dims(10, 12, 2), (5, 6));
        assert_eq!(conv_layer_out_dims(5, 6, 1), (5, 6));
    }
}
