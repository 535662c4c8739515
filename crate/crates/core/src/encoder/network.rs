//! Convolutional regressor with explicit forward and backward passes.
//!
//! Layout: `[conv -> ReLU] x N -> global average pool -> dense -> ReLU ->
//! dense -> sigmoid`. Convolutions use zero "same" padding and are lowered to
//! matrix products (im2col). Parameters live in one flat vector.

use std::fmt::Debug;
use std::ops::AddAssign;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::PARAM_DIM;

/// Numeric type the network can run in.
pub trait Scalar: Float + AddAssign + Default + Debug + Send + Sync + 'static {
    /// `c = a * b + beta * c` with explicit row/column strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        rsa: usize,
        csa: usize,
        b: &[Self],
        rsb: usize,
        csb: usize,
        beta: Self,
        c: &mut [Self],
    );

    fn lit(v: f64) -> Self {
        Self::from(v).expect("representable")
    }
}

fn check_extent(len: usize, rows: usize, cols: usize, rs: usize, cs: usize) {
    if rows > 0 && cols > 0 {
        assert!((rows - 1) * rs + (cols - 1) * cs < len, "gemm operand out of bounds");
    }
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:path) => {
        impl Scalar for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                rsa: usize,
                csa: usize,
                b: &[Self],
                rsb: usize,
                csb: usize,
                beta: Self,
                c: &mut [Self],
            ) {
                check_extent(a.len(), m, k, rsa, csa);
                check_extent(b.len(), k, n, rsb, csb);
                check_extent(c.len(), m, n, n, 1);
                // SAFETY: extents of all three operands were checked above.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa as isize,
                        csa as isize,
                        b.as_ptr(),
                        rsb as isize,
                        csb as isize,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    )
                }
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

/// Architecture of the regressor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub input_size: usize,
    pub in_channels: usize,
    pub convs: Vec<ConvSpec>,
    pub hidden: usize,
    pub output_dim: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        let conv = |out_channels, stride| ConvSpec {
            out_channels,
            kernel: 3,
            stride,
        };
        Self {
            input_size: 64,
            in_channels: 3,
            convs: vec![conv(32, 2), conv(64, 2), conv(96, 2), conv(128, 1)],
            hidden: 128,
            output_dim: PARAM_DIM,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvLayer {
    pub in_c: usize,
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub w_off: usize,
    pub b_off: usize,
}

impl ConvLayer {
    fn patch(&self) -> usize {
        self.in_c * self.k * self.k
    }

    fn out_n(&self) -> usize {
        self.out_h * self.out_w
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct DenseLayer {
    pub inp: usize,
    pub out: usize,
    pub w_off: usize,
    pub b_off: usize,
}

/// Which kind of parameter a flat index belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamKind {
    ConvWeight(usize),
    ConvBias(usize),
    HiddenWeight,
    HiddenBias,
    HeadWeight,
    HeadBias,
}

/// Offsets and shapes derived from an [`ArchConfig`].
#[derive(Debug, Clone)]
pub struct Layout {
    pub(crate) convs: Vec<ConvLayer>,
    pub(crate) hidden: DenseLayer,
    pub(crate) head: DenseLayer,
    pub(crate) n_params: usize,
    pub(crate) input_size: usize,
    pub(crate) in_channels: usize,
}

impl Layout {
    pub fn new(arch: &ArchConfig) -> Result<Self> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if arch.input_size == 0 || arch.in_channels == 0 || arch.convs.is_empty() {
            return bad("architecture needs an input and at least one conv block".into());
        }
        if arch.output_dim != PARAM_DIM {
            return bad(format!("output_dim must be {PARAM_DIM}, got {}", arch.output_dim));
        }
        if arch.hidden == 0 {
            return bad("hidden width must be positive".into());
        }
        let mut off = 0;
        let (mut c, mut h, mut w) = (arch.in_channels, arch.input_size, arch.input_size);
        let mut convs = Vec::with_capacity(arch.convs.len());
        for spec in &arch.convs {
            if spec.kernel == 0 || spec.kernel % 2 == 0 || spec.stride == 0 || spec.out_channels == 0 {
                return bad(format!("invalid conv block {spec:?} (odd kernel, positive stride)"));
            }
            let pad = spec.kernel / 2;
            let out_h = (h + 2 * pad - spec.kernel) / spec.stride + 1;
            let out_w = (w + 2 * pad - spec.kernel) / spec.stride + 1;
            let layer = ConvLayer {
                in_c: c,
                out_c: spec.out_channels,
                k: spec.kernel,
                stride: spec.stride,
                pad,
                in_h: h,
                in_w: w,
                out_h,
                out_w,
                w_off: off,
                b_off: off + spec.out_channels * c * spec.kernel * spec.kernel,
            };
            off = layer.b_off + spec.out_channels;
            convs.push(layer);
            (c, h, w) = (spec.out_channels, out_h, out_w);
        }
        let hidden = DenseLayer {
            inp: c,
            out: arch.hidden,
            w_off: off,
            b_off: off + arch.hidden * c,
        };
        off = hidden.b_off + arch.hidden;
        let head = DenseLayer {
            inp: arch.hidden,
            out: arch.output_dim,
            w_off: off,
            b_off: off + arch.output_dim * arch.hidden,
        };
        off = head.b_off + arch.output_dim;
        Ok(Self {
            convs,
            hidden,
            head,
            n_params: off,
            input_size: arch.input_size,
            in_channels: arch.in_channels,
        })
    }

    pub fn n_params(&self) -> usize {
        self.n_params
    }

    pub fn input_len(&self) -> usize {
        self.in_channels * self.input_size * self.input_size
    }

    pub fn kind_of(&self, index: usize) -> ParamKind {
        for (i, c) in self.convs.iter().enumerate() {
            if index >= c.w_off && index < c.b_off {
                return ParamKind::ConvWeight(i);
            }
            if index >= c.b_off && index < c.b_off + c.out_c {
                return ParamKind::ConvBias(i);
            }
        }
        let (h, o) = (&self.hidden, &self.head);
        if index < h.b_off {
            ParamKind::HiddenWeight
        } else if index < o.w_off {
            ParamKind::HiddenBias
        } else if index < o.b_off {
            ParamKind::HeadWeight
        } else {
            ParamKind::HeadBias
        }
    }

    /// Fan-in of the layer owning parameter `index`, and whether it feeds a ReLU.
    pub(crate) fn fan_in(&self, index: usize) -> (usize, bool) {
        match self.kind_of(index) {
            ParamKind::ConvWeight(i) | ParamKind::ConvBias(i) => (self.convs[i].patch(), true),
            ParamKind::HiddenWeight | ParamKind::HiddenBias => (self.hidden.inp, true),
            ParamKind::HeadWeight | ParamKind::HeadBias => (self.head.inp, false),
        }
    }
}

/// Intermediate values kept for the backward pass.
pub(crate) struct Trace<T> {
    cols: Vec<Vec<T>>,
    acts: Vec<Vec<T>>,
    pooled: Vec<T>,
    hidden: Vec<T>,
    pub out: Vec<T>,
}

fn im2col<T: Scalar>(l: &ConvLayer, input: &[T], cols: &mut [T]) {
    let n = l.out_n();
    for c in 0..l.in_c {
        let plane = &input[c * l.in_h * l.in_w..(c + 1) * l.in_h * l.in_w];
        for ky in 0..l.k {
            for kx in 0..l.k {
                let row = &mut cols[((c * l.k + ky) * l.k + kx) * n..][..n];
                for oy in 0..l.out_h {
                    let iy = (oy * l.stride + ky) as isize - l.pad as isize;
                    let dst = &mut row[oy * l.out_w..(oy + 1) * l.out_w];
                    if iy < 0 || iy as usize >= l.in_h {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * l.in_w..(iy as usize + 1) * l.in_w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * l.stride + kx) as isize - l.pad as isize;
                        *d = if ix < 0 || ix as usize >= l.in_w { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(l: &ConvLayer, cols: &[T], grad_in: &mut [T]) {
    let n = l.out_n();
    grad_in.fill(T::zero());
    for c in 0..l.in_c {
        let plane = &mut grad_in[c * l.in_h * l.in_w..(c + 1) * l.in_h * l.in_w];
        for ky in 0..l.k {
            for kx in 0..l.k {
                let row = &cols[((c * l.k + ky) * l.k + kx) * n..][..n];
                for oy in 0..l.out_h {
                    let iy = (oy * l.stride + ky) as isize - l.pad as isize;
                    if iy < 0 || iy as usize >= l.in_h {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * l.in_w..(iy as usize + 1) * l.in_w];
                    for ox in 0..l.out_w {
                        let ix = (ox * l.stride + kx) as isize - l.pad as isize;
                        if ix >= 0 && (ix as usize) < l.in_w {
                            dst[ix as usize] += row[oy * l.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

fn relu<T: Scalar>(v: &mut [T]) {
    for x in v {
        if *x < T::zero() {
            *x = T::zero();
        }
    }
}

fn sigmoid<T: Scalar>(z: T) -> T {
    T::one() / (T::one() + (-z).exp())
}

fn dense<T: Scalar>(l: &DenseLayer, params: &[T], x: &[T], y: &mut [T]) {
    y.copy_from_slice(&params[l.b_off..l.b_off + l.out]);
    T::gemm(l.out, l.inp, 1, &params[l.w_off..l.b_off], l.inp, 1, x, 1, 1, T::one(), y);
}

/// Runs the network on one planar (channel-major) input.
pub(crate) fn forward<T: Scalar>(layout: &Layout, params: &[T], input: &[T]) -> Trace<T> {
    debug_assert_eq!(input.len(), layout.input_len());
    debug_assert_eq!(params.len(), layout.n_params);
    let mut cols = Vec::with_capacity(layout.convs.len());
    let mut acts: Vec<Vec<T>> = Vec::with_capacity(layout.convs.len());
    for (i, l) in layout.convs.iter().enumerate() {
        let x = if i == 0 { input } else { &acts[i - 1] };
        let n = l.out_n();
        let mut col = vec![T::zero(); l.patch() * n];
        im2col(l, x, &mut col);
        let mut act = vec![T::zero(); l.out_c * n];
        for (oc, row) in act.chunks_exact_mut(n).enumerate() {
            row.fill(params[l.b_off + oc]);
        }
        T::gemm(l.out_c, l.patch(), n, &params[l.w_off..l.b_off], l.patch(), 1, &col, n, 1, T::one(), &mut act);
        relu(&mut act);
        cols.push(col);
        acts.push(act);
    }
    let last = layout.convs.last().expect("at least one conv");
    let n = T::lit(last.out_n() as f64);
    let pooled: Vec<T> = acts
        .last()
        .expect("at least one conv")
        .chunks_exact(last.out_n())
        .map(|row| row.iter().fold(T::zero(), |a, &b| a + b) / n)
        .collect();
    let mut hidden = vec![T::zero(); layout.hidden.out];
    dense(&layout.hidden, params, &pooled, &mut hidden);
    relu(&mut hidden);
    let mut out = vec![T::zero(); layout.head.out];
    dense(&layout.head, params, &hidden, &mut out);
    for v in &mut out {
        *v = sigmoid(*v);
    }
    Trace {
        cols,
        acts,
        pooled,
        hidden,
        out,
    }
}

/// Accumulates `d loss / d params` into `grad` given `d loss / d outputs`.
pub(crate) fn backward<T: Scalar>(layout: &Layout, params: &[T], trace: &Trace<T>, d_out: &[T], grad: &mut [T]) {
    // sigmoid
    let dz: Vec<T> = trace
        .out
        .iter()
        .zip(d_out)
        .map(|(&y, &g)| g * y * (T::one() - y))
        .collect();
    // head dense
    let head = &layout.head;
    let mut d_hidden = vec![T::zero(); head.inp];
    for (o, &g) in dz.iter().enumerate() {
        grad[head.b_off + o] += g;
        let w = &params[head.w_off + o * head.inp..][..head.inp];
        let gw = &mut grad[head.w_off + o * head.inp..][..head.inp];
        for j in 0..head.inp {
            gw[j] += g * trace.hidden[j];
            d_hidden[j] += g * w[j];
        }
    }
    // hidden ReLU + dense
    let hid = &layout.hidden;
    let mut d_pooled = vec![T::zero(); hid.inp];
    for o in 0..hid.out {
        if trace.hidden[o] <= T::zero() {
            continue;
        }
        let g = d_hidden[o];
        grad[hid.b_off + o] += g;
        let w = &params[hid.w_off + o * hid.inp..][..hid.inp];
        let gw = &mut grad[hid.w_off + o * hid.inp..][..hid.inp];
        for j in 0..hid.inp {
            gw[j] += g * trace.pooled[j];
            d_pooled[j] += g * w[j];
        }
    }
    // global average pool
    let last = layout.convs.last().expect("at least one conv");
    let inv_n = T::one() / T::lit(last.out_n() as f64);
    let mut d_act: Vec<T> = d_pooled
        .iter()
        .flat_map(|&g| std::iter::repeat_n(g * inv_n, last.out_n()))
        .collect();
    for (i, l) in layout.convs.iter().enumerate().rev() {
        let n = l.out_n();
        let act = &trace.acts[i];
        for (d, &a) in d_act.iter_mut().zip(act) {
            if a <= T::zero() {
                *d = T::zero();
            }
        }
        for (oc, row) in d_act.chunks_exact(n).enumerate() {
            grad[l.b_off + oc] += row.iter().fold(T::zero(), |a, &b| a + b);
        }
        // dW += dZ . cols^T
        T::gemm(
            l.out_c,
            n,
            l.patch(),
            &d_act,
            n,
            1,
            &trace.cols[i],
            1,
            n,
            T::one(),
            &mut grad[l.w_off..l.b_off],
        );
        if i == 0 {
            break;
        }
        // dCols = W^T . dZ
        let mut d_cols = vec![T::zero(); l.patch() * n];
        T::gemm(
            l.patch(),
            l.out_c,
            n,
            &params[l.w_off..l.b_off],
            1,
            l.patch(),
            &d_act,
            n,
            1,
            T::zero(),
            &mut d_cols,
        );
        let mut d_in = vec![T::zero(); l.in_c * l.in_h * l.in_w];
        col2im(l, &d_cols, &mut d_in);
        d_act = d_in;
    }
}

/// Squared-error loss of one sample and its gradient w.r.t. the outputs,
/// both scaled by `1 / batch`.
pub(crate) fn sample_loss_grad<T: Scalar>(out: &[T], label: &[T], batch: usize) -> (T, Vec<T>) {
    let scale = T::one() / T::lit(batch as f64);
    let mut loss = T::zero();
    let grad = out
        .iter()
        .zip(label)
        .map(|(&y, &t)| {
            let d = y - t;
            loss += d * d;
            T::lit(2.0) * d * scale
        })
        .collect();
    (loss * scale, grad)
}

/// Huber loss of one sample (quadratic within `delta`, slope one outside)
/// and its gradient w.r.t. the outputs, both scaled by `1 / batch`.
pub(crate) fn sample_huber_grad<T: Scalar>(out: &[T], label: &[T], batch: usize, delta: T) -> (T, Vec<T>) {
    let scale = T::one() / T::lit(batch as f64);
    let half = T::lit(0.5);
    let mut loss = T::zero();
    let grad = out
        .iter()
        .zip(label)
        .map(|(&y, &t)| {
            let d = y - t;
            if d.abs() <= delta {
                loss += half * d * d / delta;
                d / delta * scale
            } else {
                loss += d.abs() - half * delta;
                d.signum() * scale
            }
        })
        .collect();
    (loss * scale, grad)
}
