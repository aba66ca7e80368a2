//! Tape-based reverse-mode automatic differentiation over dense tensors.
//!
//! Conventions:
//! - matrices are row-major `[rows, cols]`; batched activations put the
//!   batch in the columns (`[features, batch]`),
//! - convolutional tensors are `[batch, channels, height, width]`,
//! - scalars have shape `[1]`.
//!
//! A `Tape` is built per episode (or per training step) and dropped after
//! `backward`; graphs are short-lived. With gradients disabled the tape
//! records no parents and keeps no saved buffers, so inference costs only
//! the forward arrays.

use alloc::vec;
use alloc::vec::Vec;

use crate::image::BilinearTap;
use crate::real::Real;

/// Handle to a tensor on a tape.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct TensorId(pub(crate) usize);

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

enum Op<T> {
    /// Parameter or input; receives a gradient when `requires_grad`.
    Leaf,
    /// Value outside the gradient graph.
    Constant,
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { a: usize, k: T },
    AddScalar { a: usize },
    Relu { a: usize },
    Tanh { a: usize },
    Sigmoid { a: usize },
    Exp { a: usize },
    Log { a: usize },
    Matmul { a: usize, b: usize, m: usize, k: usize, n: usize },
    /// `[m,n] + [m]` broadcast over columns.
    AddColVec { a: usize, v: usize },
    SumAll { a: usize },
    MeanAll { a: usize },
    /// `[m,n] -> [1,n]`, sum over rows.
    ColSum { a: usize },
    ConcatRows { a: usize, b: usize, ma: usize, n: usize },
    SliceRows { a: usize, r0: usize, n: usize },
    Transpose { a: usize, m: usize, n: usize },
    Reshape { a: usize },
    /// Zero padding on the row (radial) axis, circular on the column
    /// (angular) axis.
    WrapPad { a: usize, b: usize, c: usize, h: usize, w: usize, ph: usize, pw: usize },
    Conv2d {
        input: usize,
        kernel: usize,
        bias: usize,
        b: usize,
        ic: usize,
        oc: usize,
        h: usize,
        w: usize,
        kh: usize,
        kw: usize,
        sh: usize,
        sw: usize,
        /// im2col buffer `[ic*kh*kw, b*oh*ow]`, kept for the backward GEMMs.
        cols: Vec<T>,
    },
    MaxPool2d { a: usize, argmax: Vec<u32> },
    BatchNorm {
        a: usize,
        scale: usize,
        shift: usize,
        b: usize,
        c: usize,
        hw: usize,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    /// `[k, n]` logits + per-column labels -> `[1, n]` losses.
    SoftmaxCrossEntropy { logits: usize, labels: Vec<usize>, probs: Vec<T> },
    /// Bilinear gather from stacked images `[b, h, w, c]` into glimpses
    /// `[b, c, gh, gw]`; taps are per (b, gy, gx).
    GlimpseFromImages { src: usize, c: usize, taps: Vec<BilinearTap> },
}

struct Node<T> {
    data: Vec<T>,
    shape: Vec<usize>,
    op: Op<T>,
    rg: bool,
}

/// Reverse-mode tape.
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    grad_enabled: bool,
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grads: Vec::new(), grad_enabled: true }
    }

    /// Tape that records no gradient graph (inference mode).
    pub fn no_grad() -> Self {
        Tape { nodes: Vec::new(), grads: Vec::new(), grad_enabled: false }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    /// Number of nodes carrying a backward recipe; zero on a no-grad tape.
    pub fn recorded_ops(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| !matches!(n.op, Op::Leaf | Op::Constant))
            .count()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: TensorId) -> &[T] {
        &self.nodes[id.0].data
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    /// Gradient of the last `backward` output w.r.t. `id`, if any reached it.
    pub fn grad(&self, id: TensorId) -> Option<&[T]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, data: Vec<T>, shape: Vec<usize>, op: Op<T>, rg: bool) -> TensorId {
        debug_assert_eq!(data.len(), numel(&shape), "data length must match shape");
        let (op, rg) = if self.grad_enabled { (op, rg) } else { (Op::Constant, false) };
        let id = self.nodes.len();
        self.nodes.push(Node { data, shape, op, rg });
        TensorId(id)
    }

    fn rg(&self, a: TensorId) -> bool {
        self.nodes[a.0].rg
    }

    /// Differentiable leaf (parameter or attacked input).
    pub fn leaf(&mut self, data: Vec<T>, shape: Vec<usize>) -> TensorId {
        self.push(data, shape, Op::Leaf, true)
    }

    /// Non-differentiable value (data, sampled glimpses, detached values).
    pub fn constant(&mut self, data: Vec<T>, shape: Vec<usize>) -> TensorId {
        self.push(data, shape, Op::Constant, false)
    }

    pub fn scalar_constant(&mut self, v: T) -> TensorId {
        self.constant(vec![v], vec![1])
    }

    /// Copy of `a`'s value with the gradient path severed.
    pub fn detach(&mut self, a: TensorId) -> TensorId {
        let data = self.nodes[a.0].data.clone();
        let shape = self.nodes[a.0].shape.clone();
        self.constant(data, shape)
    }

    // ── Elementwise ─────────────────────────────────────────────────────

    fn binary_elementwise(&mut self, a: TensorId, b: TensorId, f: impl Fn(T, T) -> T) -> Vec<T> {
        assert_eq!(
            self.nodes[a.0].shape, self.nodes[b.0].shape,
            "elementwise op on mismatched shapes"
        );
        self.nodes[a.0]
            .data
            .iter()
            .zip(self.nodes[b.0].data.iter())
            .map(|(&x, &y)| f(x, y))
            .collect()
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let data = self.binary_elementwise(a, b, |x, y| x + y);
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.rg(a) || self.rg(b);
        self.push(data, shape, Op::Add { a: a.0, b: b.0 }, rg)
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let data = self.binary_elementwise(a, b, |x, y| x - y);
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.rg(a) || self.rg(b);
        self.push(data, shape, Op::Sub { a: a.0, b: b.0 }, rg)
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let data = self.binary_elementwise(a, b, |x, y| x * y);
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.rg(a) || self.rg(b);
        self.push(data, shape, Op::Mul { a: a.0, b: b.0 }, rg)
    }

    pub fn scale(&mut self, a: TensorId, k: T) -> TensorId {
        let data: Vec<T> = self.nodes[a.0].data.iter().map(|&x| x * k).collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.rg(a);
        self.push(data, shape, Op::Scale { a: a.0, k }, rg)
    }

    pub fn neg(&mut self, a: TensorId) -> TensorId {
        self.scale(a, -T::one())
    }

    pub fn add_scalar(&mut self, a: TensorId, k: T) -> TensorId {
        let data: Vec<T> = self.nodes[a.0].data.iter().map(|&x| x + k).collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.rg(a);
        self.push(data, shape, Op::AddScalar { a: a.0 }, rg)
    }

    fn unary(&mut self, a: TensorId, f: impl Fn(T) -> T, op: Op<T>) -> TensorId {
        let data: Vec<T> = self.nodes[a.0].data.iter().map(|&x| f(x)).collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.rg(a);
        self.push(data, shape, op, rg)
    }

    /// relu, with the subgradient at 0 defined as 0.
    pub fn relu(&mut self, a: TensorId) -> TensorId {
        self.unary(a, |x| if x > T::zero() { x } else { T::zero() }, Op::Relu { a: a.0 })
    }

    pub fn tanh(&mut self, a: TensorId) -> TensorId {
        self.unary(a, |x| x.tanh(), Op::Tanh { a: a.0 })
    }

    pub fn sigmoid(&mut self, a: TensorId) -> TensorId {
        self.unary(a, |x| T::one() / (T::one() + (-x).exp()), Op::Sigmoid { a: a.0 })
    }

    pub fn exp(&mut self, a: TensorId) -> TensorId {
        self.unary(a, |x| x.exp(), Op::Exp { a: a.0 })
    }

    pub fn log(&mut self, a: TensorId) -> TensorId {
        self.unary(a, |x| x.ln(), Op::Log { a: a.0 })
    }

    // ── Linear algebra ──────────────────────────────────────────────────

    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        assert_eq!(sa.len(), 2, "matmul lhs must be 2-d");
        assert_eq!(sb.len(), 2, "matmul rhs must be 2-d");
        let (m, k) = (sa[0], sa[1]);
        assert_eq!(sb[0], k, "matmul inner dimensions must agree");
        let n = sb[1];
        let mut out = vec![T::zero(); m * n];
        gemm_nn(&mut out, &self.nodes[a.0].data, &self.nodes[b.0].data, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, vec![m, n], Op::Matmul { a: a.0, b: b.0, m, k, n }, rg)
    }

    /// `[m,n] + [m]`, the column-vector broadcast used for biases.
    pub fn add_col_vec(&mut self, a: TensorId, v: TensorId) -> TensorId {
        let sa = self.nodes[a.0].shape.clone();
        assert_eq!(sa.len(), 2, "add_col_vec lhs must be 2-d");
        let (m, n) = (sa[0], sa[1]);
        assert_eq!(self.nodes[v.0].shape, vec![m], "bias length must equal rows");
        let mut out = self.nodes[a.0].data.clone();
        for (i, row) in out.chunks_exact_mut(n).enumerate() {
            let b = self.nodes[v.0].data[i];
            for x in row {
                *x += b;
            }
        }
        let rg = self.rg(a) || self.rg(v);
        self.push(out, sa, Op::AddColVec { a: a.0, v: v.0 }, rg)
    }

    pub fn transpose(&mut self, a: TensorId) -> TensorId {
        let sa = &self.nodes[a.0].shape;
        assert_eq!(sa.len(), 2, "transpose needs a 2-d tensor");
        let (m, n) = (sa[0], sa[1]);
        let src = &self.nodes[a.0].data;
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let rg = self.rg(a);
        self.push(out, vec![n, m], Op::Transpose { a: a.0, m, n }, rg)
    }

    pub fn reshape(&mut self, a: TensorId, shape: Vec<usize>) -> TensorId {
        assert_eq!(numel(&shape), self.nodes[a.0].data.len(), "reshape must preserve size");
        let data = self.nodes[a.0].data.clone();
        let rg = self.rg(a);
        self.push(data, shape, Op::Reshape { a: a.0 }, rg)
    }

    // ── Reductions ──────────────────────────────────────────────────────

    pub fn sum_all(&mut self, a: TensorId) -> TensorId {
        let s: T = self.nodes[a.0].data.iter().copied().sum();
        let rg = self.rg(a);
        self.push(vec![s], vec![1], Op::SumAll { a: a.0 }, rg)
    }

    pub fn mean_all(&mut self, a: TensorId) -> TensorId {
        let len = self.nodes[a.0].data.len();
        let s: T = self.nodes[a.0].data.iter().copied().sum();
        let rg = self.rg(a);
        self.push(vec![s / T::from_f64(len as f64)], vec![1], Op::MeanAll { a: a.0 }, rg)
    }

    /// `[m,n] -> [1,n]`, summing each column.
    pub fn col_sum(&mut self, a: TensorId) -> TensorId {
        let sa = &self.nodes[a.0].shape;
        assert_eq!(sa.len(), 2, "col_sum needs a 2-d tensor");
        let (m, n) = (sa[0], sa[1]);
        let mut out = vec![T::zero(); n];
        for row in self.nodes[a.0].data.chunks_exact(n) {
            for (o, &x) in out.iter_mut().zip(row) {
                *o += x;
            }
        }
        let _ = m;
        let rg = self.rg(a);
        self.push(out, vec![1, n], Op::ColSum { a: a.0 }, rg)
    }

    // ── Structure ───────────────────────────────────────────────────────

    /// Stacks `[ma,n]` on top of `[mb,n]`.
    pub fn concat_rows(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        assert_eq!(sa.len(), 2);
        assert_eq!(sb.len(), 2);
        assert_eq!(sa[1], sb[1], "concat_rows needs equal column counts");
        let (ma, mb, n) = (sa[0], sb[0], sa[1]);
        let mut data = Vec::with_capacity((ma + mb) * n);
        data.extend_from_slice(&self.nodes[a.0].data);
        data.extend_from_slice(&self.nodes[b.0].data);
        let rg = self.rg(a) || self.rg(b);
        self.push(data, vec![ma + mb, n], Op::ConcatRows { a: a.0, b: b.0, ma, n }, rg)
    }

    /// Rows `r0..r1` of a `[m,n]` tensor.
    pub fn slice_rows(&mut self, a: TensorId, r0: usize, r1: usize) -> TensorId {
        let sa = &self.nodes[a.0].shape;
        assert_eq!(sa.len(), 2);
        let (m, n) = (sa[0], sa[1]);
        assert!(r0 < r1 && r1 <= m, "row slice out of bounds");
        let data = self.nodes[a.0].data[r0 * n..r1 * n].to_vec();
        let rg = self.rg(a);
        self.push(data, vec![r1 - r0, n], Op::SliceRows { a: a.0, r0, n }, rg)
    }

    // ── Convolutional ops ───────────────────────────────────────────────

    /// Pads `[b,c,h,w]`: rows (radial axis) with zeros, columns (angular
    /// axis) circularly. Requires `pw < w`.
    pub fn wrap_pad(&mut self, a: TensorId, ph: usize, pw: usize) -> TensorId {
        let sa = self.nodes[a.0].shape.clone();
        assert_eq!(sa.len(), 4, "wrap_pad needs [b,c,h,w]");
        let (b, c, h, w) = (sa[0], sa[1], sa[2], sa[3]);
        assert!(pw < w, "circular pad must be smaller than the angular axis");
        let (hp, wp) = (h + 2 * ph, w + 2 * pw);
        let src = &self.nodes[a.0].data;
        let mut out = vec![T::zero(); b * c * hp * wp];
        for bc in 0..b * c {
            let s = &src[bc * h * w..(bc + 1) * h * w];
            let d = &mut out[bc * hp * wp..(bc + 1) * hp * wp];
            for y in 0..h {
                let drow = &mut d[(y + ph) * wp..(y + ph) * wp + wp];
                let srow = &s[y * w..y * w + w];
                for x in 0..wp {
                    // wraps into [0, w)
                    let sx = (x + w - pw) % w;
                    drow[x] = srow[sx];
                }
            }
        }
        let rg = self.rg(a);
        self.push(out, vec![b, c, hp, wp], Op::WrapPad { a: a.0, b, c, h, w, ph, pw }, rg)
    }

    /// Valid cross-correlation of `[b,ic,h,w]` with kernel `[oc,ic,kh,kw]`
    /// and bias `[oc]`, stride `(sh,sw)`.
    pub fn conv2d(&mut self, input: TensorId, kernel: TensorId, bias: TensorId, sh: usize, sw: usize) -> TensorId {
        let si = self.nodes[input.0].shape.clone();
        let sk = self.nodes[kernel.0].shape.clone();
        assert_eq!(si.len(), 4, "conv2d input must be [b,ic,h,w]");
        assert_eq!(sk.len(), 4, "conv2d kernel must be [oc,ic,kh,kw]");
        let (b, ic, h, w) = (si[0], si[1], si[2], si[3]);
        let (oc, kic, kh, kw) = (sk[0], sk[1], sk[2], sk[3]);
        assert_eq!(ic, kic, "conv2d channel counts must agree");
        assert_eq!(self.nodes[bias.0].shape, vec![oc], "conv2d bias must be [oc]");
        assert!(h >= kh && w >= kw, "kernel larger than input");
        let oh = (h - kh) / sh + 1;
        let ow = (w - kw) / sw + 1;

        let krows = ic * kh * kw;
        let ncols = b * oh * ow;
        let mut cols = vec![T::zero(); krows * ncols];
        im2col(&self.nodes[input.0].data, &mut cols, b, ic, h, w, kh, kw, sh, sw, oh, ow);

        // [oc, krows] x [krows, ncols]
        let mut outmat = vec![T::zero(); oc * ncols];
        gemm_nn(&mut outmat, &self.nodes[kernel.0].data, &cols, oc, krows, ncols);

        // outmat columns are (b, oy, ox); fold bias in while permuting to
        // [b, oc, oh, ow].
        let mut out = vec![T::zero(); b * oc * oh * ow];
        let bias_v = &self.nodes[bias.0].data;
        for o in 0..oc {
            let orow = &outmat[o * ncols..(o + 1) * ncols];
            let bv = bias_v[o];
            for bi in 0..b {
                let dst = &mut out[(bi * oc + o) * oh * ow..(bi * oc + o + 1) * oh * ow];
                let src = &orow[bi * oh * ow..(bi + 1) * oh * ow];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = s + bv;
                }
            }
        }

        let rg = self.rg(input) || self.rg(kernel) || self.rg(bias);
        let keep_cols = if rg && self.grad_enabled { cols } else { Vec::new() };
        self.push(
            out,
            vec![b, oc, oh, ow],
            Op::Conv2d {
                input: input.0,
                kernel: kernel.0,
                bias: bias.0,
                b,
                ic,
                oc,
                h,
                w,
                kh,
                kw,
                sh,
                sw,
                cols: keep_cols,
            },
            rg,
        )
    }

    /// Max pooling over `[b,c,h,w]`; gradient goes to the first maximal
    /// element of each window.
    pub fn maxpool2d(&mut self, a: TensorId, wh: usize, ww: usize, sh: usize, sw: usize) -> TensorId {
        let sa = self.nodes[a.0].shape.clone();
        assert_eq!(sa.len(), 4, "maxpool2d needs [b,c,h,w]");
        let (b, c, h, w) = (sa[0], sa[1], sa[2], sa[3]);
        assert!(wh <= h && ww <= w, "pool window larger than input");
        let oh = (h - wh) / sh + 1;
        let ow = (w - ww) / sw + 1;
        let src = &self.nodes[a.0].data;
        let mut out = vec![T::zero(); b * c * oh * ow];
        let mut argmax = vec![0u32; b * c * oh * ow];
        for bc in 0..b * c {
            let plane = &src[bc * h * w..(bc + 1) * h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = T::neg_infinity();
                    let mut best_idx = 0usize;
                    for ky in 0..wh {
                        let y = oy * sh + ky;
                        for kx in 0..ww {
                            let x = ox * sw + kx;
                            let v = plane[y * w + x];
                            if v > best {
                                best = v;
                                best_idx = y * w + x;
                            }
                        }
                    }
                    let oi = bc * oh * ow + oy * ow + ox;
                    out[oi] = best;
                    argmax[oi] = (bc * h * w + best_idx) as u32;
                }
            }
        }
        let rg = self.rg(a);
        let keep = if rg && self.grad_enabled { argmax } else { Vec::new() };
        self.push(out, vec![b, c, oh, ow], Op::MaxPool2d { a: a.0, argmax: keep }, rg)
    }

    /// Training-mode batch normalization over `[b,c,h,w]` with per-channel
    /// `scale`/`shift`. Normalizes by the biased batch statistics and
    /// returns them so the caller can maintain running averages.
    pub fn batchnorm_train(
        &mut self,
        a: TensorId,
        scale: TensorId,
        shift: TensorId,
        epsilon: T,
    ) -> (TensorId, Vec<T>, Vec<T>) {
        let sa = self.nodes[a.0].shape.clone();
        assert_eq!(sa.len(), 4, "batchnorm needs [b,c,h,w]");
        let (b, c, h, w) = (sa[0], sa[1], sa[2], sa[3]);
        assert!(b >= 2, "batchnorm train mode needs batch size >= 2");
        assert_eq!(self.nodes[scale.0].shape, vec![c]);
        assert_eq!(self.nodes[shift.0].shape, vec![c]);
        let hw = h * w;
        let src = &self.nodes[a.0].data;
        let count = T::from_f64((b * hw) as f64);

        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for ch in 0..c {
            let mut s = T::zero();
            for bi in 0..b {
                let plane = &src[(bi * c + ch) * hw..(bi * c + ch + 1) * hw];
                s += plane.iter().copied().sum::<T>();
            }
            let m = s / count;
            let mut v = T::zero();
            for bi in 0..b {
                let plane = &src[(bi * c + ch) * hw..(bi * c + ch + 1) * hw];
                v += plane.iter().map(|&x| (x - m) * (x - m)).sum::<T>();
            }
            mean[ch] = m;
            var[ch] = v / count;
        }

        let mut xhat = vec![T::zero(); src.len()];
        let mut inv_std = vec![T::zero(); c];
        let mut out = vec![T::zero(); src.len()];
        for ch in 0..c {
            let istd = T::one() / (var[ch] + epsilon).sqrt();
            inv_std[ch] = istd;
            let g = self.nodes[scale.0].data[ch];
            let s = self.nodes[shift.0].data[ch];
            for bi in 0..b {
                let base = (bi * c + ch) * hw;
                for i in 0..hw {
                    let xh = (src[base + i] - mean[ch]) * istd;
                    xhat[base + i] = xh;
                    out[base + i] = xh * g + s;
                }
            }
        }

        let rg = self.rg(a) || self.rg(scale) || self.rg(shift);
        let (keep_xhat, keep_istd) = if rg && self.grad_enabled {
            (xhat, inv_std)
        } else {
            (Vec::new(), Vec::new())
        };
        let id = self.push(
            out,
            sa,
            Op::BatchNorm { a: a.0, scale: scale.0, shift: shift.0, b, c, hw, xhat: keep_xhat, inv_std: keep_istd },
            rg,
        );
        (id, mean, var)
    }

    // ── Losses ──────────────────────────────────────────────────────────

    /// Per-column softmax cross-entropy: `[k,n]` logits and `n` labels give
    /// a `[1,n]` loss row. Computed with max subtraction.
    pub fn softmax_cross_entropy(&mut self, logits: TensorId, labels: &[usize]) -> TensorId {
        let sl = self.nodes[logits.0].shape.clone();
        assert_eq!(sl.len(), 2, "softmax_cross_entropy needs [k,n] logits");
        let (k, n) = (sl[0], sl[1]);
        assert_eq!(labels.len(), n, "one label per column");
        assert!(labels.iter().all(|&l| l < k), "label out of range");
        let src = &self.nodes[logits.0].data;
        let mut probs = vec![T::zero(); k * n];
        let mut out = vec![T::zero(); n];
        for col in 0..n {
            let mut mx = T::neg_infinity();
            for row in 0..k {
                mx = mx.max(src[row * n + col]);
            }
            let mut denom = T::zero();
            for row in 0..k {
                let e = (src[row * n + col] - mx).exp();
                probs[row * n + col] = e;
                denom += e;
            }
            for row in 0..k {
                probs[row * n + col] = probs[row * n + col] / denom;
            }
            let l = labels[col];
            out[col] = -(src[l * n + col] - mx - denom.ln());
        }
        let rg = self.rg(logits);
        let keep = if rg && self.grad_enabled { probs } else { Vec::new() };
        self.push(out, vec![1, n], Op::SoftmaxCrossEntropy { logits: logits.0, labels: labels.to_vec(), probs: keep }, rg)
    }

    /// Bilinear gather from stacked images `[b,h,w,c]` into `[b,c,gh,gw]`
    /// glimpses; one tap per (b, gy, gx), weights shared across channels.
    /// This is the differentiable path from pixels to glimpses used by the
    /// white-box attack.
    pub fn glimpse_from_images(
        &mut self,
        src: TensorId,
        taps: Vec<BilinearTap>,
        gh: usize,
        gw: usize,
    ) -> TensorId {
        let ss = self.nodes[src.0].shape.clone();
        assert_eq!(ss.len(), 4, "glimpse_from_images needs [b,h,w,c]");
        let (b, h, w, c) = (ss[0], ss[1], ss[2], ss[3]);
        assert_eq!(taps.len(), b * gh * gw, "one tap per batch sample point");
        let data = &self.nodes[src.0].data;
        let mut out = vec![T::zero(); b * c * gh * gw];
        for (ti, tap) in taps.iter().enumerate() {
            let bi = ti / (gh * gw);
            let p = ti % (gh * gw);
            let plane = &data[bi * h * w * c..(bi + 1) * h * w * c];
            for ch in 0..c {
                let mut acc = 0.0f64;
                for (idx, wgt) in tap.iter_valid(h, w) {
                    acc += wgt * plane[idx * c + ch].to_f64();
                }
                out[(bi * c + ch) * gh * gw + p] = T::from_f64(acc);
            }
        }
        let rg = self.rg(src);
        let keep = if rg && self.grad_enabled { taps } else { Vec::new() };
        self.push(out, vec![b, c, gh, gw], Op::GlimpseFromImages { src: src.0, c, taps: keep }, rg)
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Reverse pass from a scalar output. Gradients of multiple uses
    /// accumulate by summation; leaves keep their gradient for `grad()`.
    pub fn backward(&mut self, output: TensorId) {
        assert!(self.grad_enabled, "backward on a no-grad tape");
        assert_eq!(self.nodes[output.0].data.len(), 1, "backward needs a scalar output");
        let n = self.nodes.len();
        self.grads = Vec::new();
        self.grads.resize_with(n, || None);
        self.grads[output.0] = Some(vec![T::one()]);

        for i in (0..n).rev() {
            if !self.nodes[i].rg {
                continue;
            }
            let Some(g) = self.grads[i].take() else { continue };
            self.node_backward(i, &g);
            // keep leaf gradients retrievable after the pass
            if matches!(self.nodes[i].op, Op::Leaf) {
                self.grads[i] = Some(g);
            }
        }
    }

    fn acc(grads: &mut [Option<Vec<T>>], id: usize, len: usize) -> &mut [T] {
        grads[id].get_or_insert_with(|| vec![T::zero(); len]).as_mut_slice()
    }

    fn node_backward(&mut self, i: usize, g: &[T]) {
        // Split borrows: ops/data are read, grads are written.
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let rg = |id: usize| nodes[id].rg;
        match &nodes[i].op {
            Op::Leaf | Op::Constant => {}

            Op::Add { a, b } => {
                for &p in [a, b].iter() {
                    if rg(*p) {
                        let d = Self::acc(grads, *p, g.len());
                        for (dv, &gv) in d.iter_mut().zip(g) {
                            *dv += gv;
                        }
                    }
                }
            }
            Op::Sub { a, b } => {
                if rg(*a) {
                    let d = Self::acc(grads, *a, g.len());
                    for (dv, &gv) in d.iter_mut().zip(g) {
                        *dv += gv;
                    }
                }
                if rg(*b) {
                    let d = Self::acc(grads, *b, g.len());
                    for (dv, &gv) in d.iter_mut().zip(g) {
                        *dv = *dv - gv;
                    }
                }
            }
            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                if rg(a) {
                    let vb = &nodes[b].data;
                    let d = Self::acc(grads, a, g.len());
                    for ((dv, &gv), &bv) in d.iter_mut().zip(g).zip(vb) {
                        *dv += gv * bv;
                    }
                }
                if rg(b) {
                    let va = &nodes[a].data;
                    let d = Self::acc(grads, b, g.len());
                    for ((dv, &gv), &av) in d.iter_mut().zip(g).zip(va) {
                        *dv += gv * av;
                    }
                }
            }
            Op::Scale { a, k } => {
                let (a, k) = (*a, *k);
                if rg(a) {
                    let d = Self::acc(grads, a, g.len());
                    for (dv, &gv) in d.iter_mut().zip(g) {
                        *dv += gv * k;
                    }
                }
            }
            Op::AddScalar { a } => {
                let a = *a;
                if rg(a) {
                    let d = Self::acc(grads, a, g.len());
                    for (dv, &gv) in d.iter_mut().zip(g) {
                        *dv += gv;
                    }
                }
            }
            Op::Relu { a } => {
                let a = *a;
                if rg(a) {
                    let va = &nodes[a].data;
                    let d = Self::acc(grads, a, g.len());
                    for ((dv, &gv), &x) in d.iter_mut().zip(g).zip(va) {
                        if x > T::zero() {
                            *dv += gv;
                        }
                    }
                }
            }
            Op::Tanh { a } => {
                let a = *a;
                if rg(a) {
                    let vy = &nodes[i].data;
                    let d = Self::acc(grads, a, g.len());
                    for ((dv, &gv), &y) in d.iter_mut().zip(g).zip(vy) {
                        *dv += gv * (T::one() - y * y);
                    }
                }
            }
            Op::Sigmoid { a } => {
                let a = *a;
                if rg(a) {
                    let vy = &nodes[i].data;
                    let d = Self::acc(grads, a, g.len());
                    for ((dv, &gv), &y) in d.iter_mut().zip(g).zip(vy) {
                        *dv += gv * y * (T::one() - y);
                    }
                }
            }
            Op::Exp { a } => {
                let a = *a;
                if rg(a) {
                    let vy = &nodes[i].data;
                    let d = Self::acc(grads, a, g.len());
                    for ((dv, &gv), &y) in d.iter_mut().zip(g).zip(vy) {
                        *dv += gv * y;
                    }
                }
            }
            Op::Log { a } => {
                let a = *a;
                if rg(a) {
                    let vx = &nodes[a].data;
                    let d = Self::acc(grads, a, g.len());
                    for ((dv, &gv), &x) in d.iter_mut().zip(g).zip(vx) {
                        *dv += gv / x;
                    }
                }
            }
            Op::Matmul { a, b, m, k, n } => {
                let (a, b, m, k, n) = (*a, *b, *m, *k, *n);
                if rg(a) {
                    // dA = G . B^T
                    let vb = nodes[b].data.clone();
                    let d = Self::acc(grads, a, m * k);
                    gemm_nt(d, g, &vb, m, n, k);
                }
                if rg(b) {
                    // dB = A^T . G
                    let va = nodes[a].data.clone();
                    let d = Self::acc(grads, b, k * n);
                    gemm_tn(d, &va, g, m, k, n);
                }
            }
            Op::AddColVec { a, v } => {
                let (a, v) = (*a, *v);
                let n = nodes[i].shape[1];
                if rg(a) {
                    let d = Self::acc(grads, a, g.len());
                    for (dv, &gv) in d.iter_mut().zip(g) {
                        *dv += gv;
                    }
                }
                if rg(v) {
                    let m = nodes[i].shape[0];
                    let d = Self::acc(grads, v, m);
                    for (row, dv) in d.iter_mut().enumerate() {
                        let mut s = T::zero();
                        for &gv in &g[row * n..(row + 1) * n] {
                            s += gv;
                        }
                        *dv += s;
                    }
                }
            }
            Op::SumAll { a } => {
                let a = *a;
                if rg(a) {
                    let len = nodes[a].data.len();
                    let d = Self::acc(grads, a, len);
                    let gv = g[0];
                    for dv in d.iter_mut() {
                        *dv += gv;
                    }
                }
            }
            Op::MeanAll { a } => {
                let a = *a;
                if rg(a) {
                    let len = nodes[a].data.len();
                    let d = Self::acc(grads, a, len);
                    let gv = g[0] / T::from_f64(len as f64);
                    for dv in d.iter_mut() {
                        *dv += gv;
                    }
                }
            }
            Op::ColSum { a } => {
                let a = *a;
                if rg(a) {
                    let len = nodes[a].data.len();
                    let n = nodes[a].shape[1];
                    let d = Self::acc(grads, a, len);
                    for (dv, gi) in d.iter_mut().zip((0..len).map(|idx| idx % n)) {
                        *dv += g[gi];
                    }
                }
            }
            Op::ConcatRows { a, b, ma, n } => {
                let (a, b, ma, n) = (*a, *b, *ma, *n);
                if rg(a) {
                    let d = Self::acc(grads, a, nodes[a].data.len());
                    for (dv, &gv) in d.iter_mut().zip(&g[..ma * n]) {
                        *dv += gv;
                    }
                }
                if rg(b) {
                    let d = Self::acc(grads, b, nodes[b].data.len());
                    for (dv, &gv) in d.iter_mut().zip(&g[ma * n..]) {
                        *dv += gv;
                    }
                }
            }
            Op::SliceRows { a, r0, n } => {
                let (a, r0, n) = (*a, *r0, *n);
                if rg(a) {
                    let d = Self::acc(grads, a, nodes[a].data.len());
                    for (dv, &gv) in d[r0 * n..r0 * n + g.len()].iter_mut().zip(g) {
                        *dv += gv;
                    }
                }
            }
            Op::Transpose { a, m, n } => {
                let (a, m, n) = (*a, *m, *n);
                if rg(a) {
                    // output is [n,m]; route g[j,i] back to a[i,j]
                    let d = Self::acc(grads, a, m * n);
                    for j in 0..n {
                        for ii in 0..m {
                            d[ii * n + j] += g[j * m + ii];
                        }
                    }
                }
            }
            Op::Reshape { a } => {
                let a = *a;
                if rg(a) {
                    let d = Self::acc(grads, a, nodes[a].data.len());
                    for (dv, &gv) in d.iter_mut().zip(g) {
                        *dv += gv;
                    }
                }
            }
            Op::WrapPad { a, b, c, h, w, ph, pw } => {
                let (a, b, c, h, w, ph, pw) = (*a, *b, *c, *h, *w, *ph, *pw);
                if rg(a) {
                    let (hp, wp) = (h + 2 * ph, w + 2 * pw);
                    let d = Self::acc(grads, a, b * c * h * w);
                    for bc in 0..b * c {
                        let gp = &g[bc * hp * wp..(bc + 1) * hp * wp];
                        let dp = &mut d[bc * h * w..(bc + 1) * h * w];
                        for y in 0..h {
                            for x in 0..wp {
                                let sx = (x + w - pw) % w;
                                dp[y * w + sx] += gp[(y + ph) * wp + x];
                            }
                        }
                    }
                }
            }
            Op::Conv2d { input, kernel, bias, b, ic, oc, h, w, kh, kw, sh, sw, cols } => {
                let (input, kernel, bias) = (*input, *kernel, *bias);
                let (b, ic, oc, h, w, kh, kw, sh, sw) = (*b, *ic, *oc, *h, *w, *kh, *kw, *sh, *sw);
                let oh = (h - kh) / sh + 1;
                let ow = (w - kw) / sw + 1;
                let ncols = b * oh * ow;
                let krows = ic * kh * kw;

                // permute g [b,oc,oh,ow] -> gmat [oc, b*oh*ow]
                let mut gmat = vec![T::zero(); oc * ncols];
                for bi in 0..b {
                    for o in 0..oc {
                        let src = &g[(bi * oc + o) * oh * ow..(bi * oc + o + 1) * oh * ow];
                        let dst = &mut gmat[o * ncols + bi * oh * ow..o * ncols + (bi + 1) * oh * ow];
                        dst.copy_from_slice(src);
                    }
                }

                if rg(bias) {
                    let d = Self::acc(grads, bias, oc);
                    for (o, dv) in d.iter_mut().enumerate() {
                        let mut s = T::zero();
                        for &gv in &gmat[o * ncols..(o + 1) * ncols] {
                            s += gv;
                        }
                        *dv += s;
                    }
                }
                if rg(kernel) {
                    // dK = gmat . cols^T
                    let cols_ref: &[T] = cols;
                    let cols_owned;
                    let cols_slice = if cols_ref.is_empty() {
                        cols_owned = {
                            let mut cb = vec![T::zero(); krows * ncols];
                            im2col(&nodes[input].data, &mut cb, b, ic, h, w, kh, kw, sh, sw, oh, ow);
                            cb
                        };
                        &cols_owned[..]
                    } else {
                        cols_ref
                    };
                    let d = Self::acc(grads, kernel, oc * krows);
                    gemm_nt(d, &gmat, cols_slice, oc, ncols, krows);
                }
                if rg(input) {
                    // dcols = K^T . gmat, then col2im
                    let kmat = nodes[kernel].data.clone();
                    let mut dcols = vec![T::zero(); krows * ncols];
                    gemm_tn(&mut dcols, &kmat, &gmat, oc, krows, ncols);
                    let d = Self::acc(grads, input, b * ic * h * w);
                    col2im_acc(&dcols, d, b, ic, h, w, kh, kw, sh, sw, oh, ow);
                }
            }
            Op::MaxPool2d { a, argmax } => {
                let a = *a;
                if rg(a) {
                    let am: Vec<u32> = argmax.clone();
                    let d = Self::acc(grads, a, nodes[a].data.len());
                    for (&src, &gv) in am.iter().zip(g) {
                        d[src as usize] += gv;
                    }
                }
            }
            Op::BatchNorm { a, scale, shift, b, c, hw, xhat, inv_std } => {
                let (a, scale, shift, b, c, hw) = (*a, *scale, *shift, *b, *c, *hw);
                let count = T::from_f64((b * hw) as f64);
                // per-channel reductions over (b, hw)
                let mut sum_g = vec![T::zero(); c];
                let mut sum_gx = vec![T::zero(); c];
                for bi in 0..b {
                    for ch in 0..c {
                        let base = (bi * c + ch) * hw;
                        let mut sg = T::zero();
                        let mut sgx = T::zero();
                        for k in 0..hw {
                            sg += g[base + k];
                            sgx += g[base + k] * xhat[base + k];
                        }
                        sum_g[ch] += sg;
                        sum_gx[ch] += sgx;
                    }
                }
                if rg(shift) {
                    let d = Self::acc(grads, shift, c);
                    for (dv, &s) in d.iter_mut().zip(&sum_g) {
                        *dv += s;
                    }
                }
                if rg(scale) {
                    let d = Self::acc(grads, scale, c);
                    for (dv, &s) in d.iter_mut().zip(&sum_gx) {
                        *dv += s;
                    }
                }
                if rg(a) {
                    let sv = nodes[scale].data.clone();
                    let xh = xhat.clone();
                    let istd = inv_std.clone();
                    let d = Self::acc(grads, a, b * c * hw);
                    for bi in 0..b {
                        for ch in 0..c {
                            let base = (bi * c + ch) * hw;
                            let coef = sv[ch] * istd[ch] / count;
                            for k in 0..hw {
                                let t = g[base + k] * count - sum_g[ch] - xh[base + k] * sum_gx[ch];
                                d[base + k] += coef * t;
                            }
                        }
                    }
                }
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                let logits = *logits;
                if rg(logits) {
                    let k = nodes[logits].shape[0];
                    let n = nodes[logits].shape[1];
                    let pr = probs.clone();
                    let lb = labels.clone();
                    let d = Self::acc(grads, logits, k * n);
                    for col in 0..n {
                        let gv = g[col];
                        for row in 0..k {
                            let ind = if lb[col] == row { T::one() } else { T::zero() };
                            d[row * n + col] += gv * (pr[row * n + col] - ind);
                        }
                    }
                }
            }
            Op::GlimpseFromImages { src, c, taps } => {
                let (src, c) = (*src, *c);
                if rg(src) {
                    let (h, w) = (nodes[src].shape[1], nodes[src].shape[2]);
                    let gh_gw = taps.len() / nodes[src].shape[0];
                    let taps = taps.clone();
                    let d = Self::acc(grads, src, nodes[src].data.len());
                    for (ti, tap) in taps.iter().enumerate() {
                        let bi = ti / gh_gw;
                        let p = ti % gh_gw;
                        let plane = &mut d[bi * h * w * c..(bi + 1) * h * w * c];
                        for ch in 0..c {
                            let gv = g[(bi * c + ch) * gh_gw + p].to_f64();
                            for (idx, wgt) in tap.iter_valid(h, w) {
                                plane[idx * c + ch] += T::from_f64(gv * wgt);
                            }
                        }
                    }
                }
            }
        }
    }
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

// ── GEMM kernels ────────────────────────────────────────────────────────
//
// C += A.B in three transposition layouts, register-blocked: an MR x NR
// accumulator tile lives in registers across the whole k loop, so the
// kernels stay compute bound. NR is a multiple of the widest SIMD lane
// count; the fixed-size array ops below vectorize.

const MR: usize = 4;
const NR: usize = 16;

/// C[m,n] += A[m,k] . B[k,n]
pub fn gemm_nn<T: Real>(c: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(c.len(), m * n);
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut i = 0;
    while i + MR <= m {
        let mut j = 0;
        while j + NR <= n {
            let mut acc = [[T::zero(); NR]; MR];
            for p in 0..k {
                let brow = &b[p * n + j..p * n + j + NR];
                for (r, accr) in acc.iter_mut().enumerate() {
                    let av = a[(i + r) * k + p];
                    for (x, &bv) in accr.iter_mut().zip(brow) {
                        *x = *x + av * bv;
                    }
                }
            }
            for (r, accr) in acc.iter().enumerate() {
                let crow = &mut c[(i + r) * n + j..(i + r) * n + j + NR];
                for (cv, &x) in crow.iter_mut().zip(accr) {
                    *cv += x;
                }
            }
            j += NR;
        }
        // right edge
        if j < n {
            for p in 0..k {
                for r in 0..MR {
                    let av = a[(i + r) * k + p];
                    let brow = &b[p * n + j..(p + 1) * n];
                    let crow = &mut c[(i + r) * n + j..(i + r + 1) * n];
                    for (cv, &bv) in crow.iter_mut().zip(brow) {
                        *cv += av * bv;
                    }
                }
            }
        }
        i += MR;
    }
    // bottom edge
    for ii in i..m {
        for p in 0..k {
            let av = a[ii * k + p];
            let brow = &b[p * n..(p + 1) * n];
            let crow = &mut c[ii * n..(ii + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// C[m,n] += A[m,k] . B[n,k]^T
pub fn gemm_nt<T: Real>(c: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(c.len(), m * n);
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    // dot products over the shared contiguous k axis; 2x4 tile of
    // vector-wide partial sums
    const DR: usize = 2;
    const DC: usize = 4;
    const L: usize = 8;
    let mut i = 0;
    while i + DR <= m {
        let mut j = 0;
        while j + DC <= n {
            let mut acc = [[[T::zero(); L]; DC]; DR];
            let mut p = 0;
            while p + L <= k {
                for (r, accr) in acc.iter_mut().enumerate() {
                    let av = &a[(i + r) * k + p..(i + r) * k + p + L];
                    for (cc, accc) in accr.iter_mut().enumerate() {
                        let bv = &b[(j + cc) * k + p..(j + cc) * k + p + L];
                        for l in 0..L {
                            accc[l] = accc[l] + av[l] * bv[l];
                        }
                    }
                }
                p += L;
            }
            let mut tail = [[T::zero(); DC]; DR];
            while p < k {
                for (r, t) in tail.iter_mut().enumerate() {
                    let av = a[(i + r) * k + p];
                    for (cc, tv) in t.iter_mut().enumerate() {
                        *tv = *tv + av * b[(j + cc) * k + p];
                    }
                }
                p += 1;
            }
            for r in 0..DR {
                for cc in 0..DC {
                    let mut s = tail[r][cc];
                    for l in 0..L {
                        s += acc[r][cc][l];
                    }
                    c[(i + r) * n + j + cc] += s;
                }
            }
            j += DC;
        }
        while j < n {
            for r in 0..DR {
                let av = &a[(i + r) * k..(i + r + 1) * k];
                let bv = &b[j * k..(j + 1) * k];
                let mut s = T::zero();
                for (&x, &y) in av.iter().zip(bv) {
                    s += x * y;
                }
                c[(i + r) * n + j] += s;
            }
            j += 1;
        }
        i += DR;
    }
    while i < m {
        for j in 0..n {
            let av = &a[i * k..(i + 1) * k];
            let bv = &b[j * k..(j + 1) * k];
            let mut s = T::zero();
            for (&x, &y) in av.iter().zip(bv) {
                s += x * y;
            }
            c[i * n + j] += s;
        }
        i += 1;
    }
}

/// C[m,n] += A[k,m]^T . B[k,n]
pub fn gemm_tn<T: Real>(c: &mut [T], a: &[T], b: &[T], k: usize, m: usize, n: usize) {
    debug_assert_eq!(c.len(), m * n);
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    let mut i = 0;
    while i + MR <= m {
        let mut j = 0;
        while j + NR <= n {
            let mut acc = [[T::zero(); NR]; MR];
            for p in 0..k {
                let arow = &a[p * m + i..p * m + i + MR];
                let brow = &b[p * n + j..p * n + j + NR];
                for (r, accr) in acc.iter_mut().enumerate() {
                    let av = arow[r];
                    for (x, &bv) in accr.iter_mut().zip(brow) {
                        *x = *x + av * bv;
                    }
                }
            }
            for (r, accr) in acc.iter().enumerate() {
                let crow = &mut c[(i + r) * n + j..(i + r) * n + j + NR];
                for (cv, &x) in crow.iter_mut().zip(accr) {
                    *cv += x;
                }
            }
            j += NR;
        }
        if j < n {
            for p in 0..k {
                for r in 0..MR {
                    let av = a[p * m + i + r];
                    let brow = &b[p * n + j..(p + 1) * n];
                    let crow = &mut c[(i + r) * n + j..(i + r + 1) * n];
                    for (cv, &bv) in crow.iter_mut().zip(brow) {
                        *cv += av * bv;
                    }
                }
            }
        }
        i += MR;
    }
    for ii in i..m {
        for p in 0..k {
            let av = a[p * m + ii];
            let brow = &b[p * n..(p + 1) * n];
            let crow = &mut c[ii * n..(ii + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Real>(
    input: &[T],
    cols: &mut [T],
    b: usize,
    ic: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    oh: usize,
    ow: usize,
) {
    let ncols = b * oh * ow;
    for ci in 0..ic {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for bi in 0..b {
                    let plane = &input[(bi * ic + ci) * h * w..(bi * ic + ci + 1) * h * w];
                    for oy in 0..oh {
                        let y = oy * sh + ky;
                        let srow = &plane[y * w + kx..y * w + kx + (ow - 1) * sw + 1];
                        let drow = &mut dst[bi * oh * ow + oy * ow..bi * oh * ow + (oy + 1) * ow];
                        if sw == 1 {
                            drow.copy_from_slice(&srow[..ow]);
                        } else {
                            for (j, dv) in drow.iter_mut().enumerate() {
                                *dv = srow[j * sw];
                            }
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im_acc<T: Real>(
    dcols: &[T],
    dinput: &mut [T],
    b: usize,
    ic: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    oh: usize,
    ow: usize,
) {
    let ncols = b * oh * ow;
    for ci in 0..ic {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                let src = &dcols[row * ncols..(row + 1) * ncols];
                for bi in 0..b {
                    let plane = &mut dinput[(bi * ic + ci) * h * w..(bi * ic + ci + 1) * h * w];
                    for oy in 0..oh {
                        let y = oy * sh + ky;
                        let srow = &src[bi * oh * ow + oy * ow..bi * oh * ow + (oy + 1) * ow];
                        for (j, &sv) in srow.iter().enumerate() {
                            plane[y * w + kx + j * sw] += sv;
                        }
                    }
                }
            }
        }
    }
}
