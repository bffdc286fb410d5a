//! Reverse-mode autodiff on a Wengert tape.
//!
//! Values are computed eagerly; each operation is recorded and replayed in
//! exact reverse order by [`Tape::backward`]. Gradients accumulate with `+=`
//! and persist until [`Tape::zero_grads`], so repeated backward calls sum.
//!
//! The step nonlinearity has two execution modes. `Hard` is the real thing:
//! emit 1 where the argument is strictly positive. `Smoothed` replaces the
//! forward by the piecewise-quadratic integral of the triangular surrogate,
//! so that finite differences of the forward agree with the analytic
//! backward pass; gradient checks run in this mode. Both modes use the same
//! triangular pseudo-derivative on the way back.
//!
//! Convolution skips zero-valued input entries. Two kernel schedules exist,
//! chosen by measured input density: a gather (per output element) and a
//! scatter (per nonzero input element). Both accumulate the contributions of
//! each output element in the same (ci, kh, kw) order starting from +0.0 and
//! add the bias last, which makes them bitwise interchangeable: skipping a
//! zero term only ever omits adding ±0.0 to an accumulator that cannot be
//! -0.0, and IEEE addition of ±0.0 to such an accumulator is the identity.

use crate::tensor::{ShapeError, Tensor};

/// How the Heaviside step executes its forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepMode {
    /// Binary emission, 1 where the argument exceeds 0.
    Hard,
    /// C1 surrogate-integral forward, used only for gradient checking.
    Smoothed,
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Input density below which the scatter schedule is used. Pure performance
/// knob; the two schedules produce bitwise-identical outputs.
const SCATTER_DENSITY_CUTOFF: f64 = 0.3;

/// Which convolution schedule to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvSchedule {
    /// Pick by measured input density.
    Auto,
    /// Per-output-element accumulation.
    Gather,
    /// Per-nonzero-input-element accumulation.
    Scatter,
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn resolve(
        xshape: &[usize],
        kshape: &[usize],
        bias_len: Option<usize>,
        stride: usize,
        pad: usize,
    ) -> Result<ConvGeom, ShapeError> {
        if xshape.len() != 4 {
            return Err(ShapeError::Rank {
                op: "conv2d input",
                expected: 4,
                shape: xshape.to_vec(),
            });
        }
        if kshape.len() != 4 {
            return Err(ShapeError::Rank {
                op: "conv2d kernel",
                expected: 4,
                shape: kshape.to_vec(),
            });
        }
        let (n, cin, h, w) = (xshape[0], xshape[1], xshape[2], xshape[3]);
        let (cout, kcin, kh, kw) = (kshape[0], kshape[1], kshape[2], kshape[3]);
        if kcin != cin {
            return Err(ShapeError::DimMismatch {
                op: "conv2d",
                dim: "input channels (kernel dim 1)",
                expected: cin,
                got: kcin,
            });
        }
        if let Some(bl) = bias_len {
            if bl != cout {
                return Err(ShapeError::DimMismatch {
                    op: "conv2d",
                    dim: "bias length (output channels)",
                    expected: cout,
                    got: bl,
                });
            }
        }
        if stride == 0 {
            return Err(ShapeError::Invalid {
                op: "conv2d",
                what: "stride must be >= 1".into(),
            });
        }
        if h + 2 * pad < kh {
            return Err(ShapeError::DimMismatch {
                op: "conv2d",
                dim: "kernel height vs padded input height",
                expected: h + 2 * pad,
                got: kh,
            });
        }
        if w + 2 * pad < kw {
            return Err(ShapeError::DimMismatch {
                op: "conv2d",
                dim: "kernel width vs padded input width",
                expected: w + 2 * pad,
                got: kw,
            });
        }
        Ok(ConvGeom {
            n,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            stride,
            pad,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (w + 2 * pad - kw) / stride + 1,
        })
    }
}

enum Op {
    Conv2d {
        x: Var,
        k: Var,
        b: Option<Var>,
        out: Var,
        geom: ConvGeom,
    },
    Add {
        a: Var,
        b: Var,
        out: Var,
    },
    Sub {
        a: Var,
        b: Var,
        out: Var,
    },
    Mul {
        a: Var,
        b: Var,
        out: Var,
    },
    Sigmoid {
        x: Var,
        out: Var,
    },
    Tanh {
        x: Var,
        out: Var,
    },
    Relu {
        x: Var,
        out: Var,
    },
    Affine {
        x: Var,
        out: Var,
        scale: f64,
    },
    Step {
        u: Var,
        out: Var,
        alpha: f64,
    },
    SliceChannels {
        x: Var,
        out: Var,
        from: usize,
        to: usize,
    },
    Upsample2 {
        x: Var,
        out: Var,
    },
    Sum {
        x: Var,
        out: Var,
    },
    SumAbs {
        x: Var,
        out: Var,
    },
    BceLogitsSum {
        x: Var,
        out: Var,
        target: Tensor,
        weight: Tensor,
    },
    SmoothL1Sum {
        x: Var,
        out: Var,
        target: Tensor,
        weight: Tensor,
    },
    CharbonnierEpeSum {
        x: Var,
        out: Var,
        target: Tensor,
        mask: Tensor,
        eps: f64,
    },
}

/// Recording of a forward computation plus the state to replay it backward.
pub struct Tape {
    values: Vec<Tensor>,
    grads: Vec<Vec<f64>>,
    ops: Vec<Op>,
    mode: StepMode,
    schedule: ConvSchedule,
}

impl Tape {
    pub fn new() -> Self {
        Tape::with_mode(StepMode::Hard)
    }

    pub fn with_mode(mode: StepMode) -> Self {
        Tape {
            values: Vec::new(),
            grads: Vec::new(),
            ops: Vec::new(),
            mode,
            schedule: ConvSchedule::Auto,
        }
    }

    pub fn mode(&self) -> StepMode {
        self.mode
    }

    /// Forces a convolution schedule for every subsequent conv on this tape.
    pub fn set_conv_schedule(&mut self, schedule: ConvSchedule) {
        self.schedule = schedule;
    }

    /// Registers a leaf node (parameter or data).
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t)
    }

    fn push(&mut self, t: Tensor) -> Var {
        let id = self.values.len();
        self.grads.push(vec![0.0; t.len()]);
        self.values.push(t);
        Var(id)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    /// Gradient of the most recent backward pass(es) for `v`, as a tensor of
    /// the node's shape.
    pub fn grad(&self, v: Var) -> Tensor {
        Tensor::new(self.values[v.0].shape().to_vec(), self.grads[v.0].clone())
            .expect("gradient buffer matches node shape")
    }

    pub fn grad_data(&self, v: Var) -> &[f64] {
        &self.grads[v.0]
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            for x in g.iter_mut() {
                *x = 0.0;
            }
        }
    }

    /// Number of recorded nodes, mostly for diagnostics.
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    // ---- recorded operations ----

    pub fn conv2d(
        &mut self,
        x: Var,
        k: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var, ShapeError> {
        let geom = ConvGeom::resolve(
            self.values[x.0].shape(),
            self.values[k.0].shape(),
            b.map(|b| self.values[b.0].len()),
            stride,
            pad,
        )?;
        let out_t = conv2d_forward(
            &self.values[x.0],
            &self.values[k.0],
            b.map(|b| &self.values[b.0]),
            &geom,
            self.schedule,
        );
        let out = self.push(out_t);
        self.ops.push(Op::Conv2d { x, k, b, out, geom });
        Ok(out)
    }

    fn check_same_shape(&self, name: &'static str, a: Var, b: Var) -> Result<(), ShapeError> {
        let (ta, tb) = (&self.values[a.0], &self.values[b.0]);
        if ta.shape() != tb.shape() {
            return Err(ShapeError::Invalid {
                op: name,
                what: format!(
                    "operand shapes differ: {:?} vs {:?}",
                    ta.shape(),
                    tb.shape()
                ),
            });
        }
        Ok(())
    }

    fn map_binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Var {
        let (shape, data) = {
            let (ta, tb) = (&self.values[a.0], &self.values[b.0]);
            let data: Vec<f64> = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
            (ta.shape().to_vec(), data)
        };
        self.push(Tensor::new(shape, data).unwrap())
    }

    fn map_unary(&mut self, x: Var, f: impl Fn(f64) -> f64) -> Var {
        let (shape, data) = {
            let t = &self.values[x.0];
            let data: Vec<f64> = t.data().iter().map(|v| f(*v)).collect();
            (t.shape().to_vec(), data)
        };
        self.push(Tensor::new(shape, data).unwrap())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, ShapeError> {
        self.check_same_shape("add", a, b)?;
        let out = self.map_binary(a, b, |x, y| x + y);
        self.ops.push(Op::Add { a, b, out });
        Ok(out)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, ShapeError> {
        self.check_same_shape("sub", a, b)?;
        let out = self.map_binary(a, b, |x, y| x - y);
        self.ops.push(Op::Sub { a, b, out });
        Ok(out)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, ShapeError> {
        self.check_same_shape("mul", a, b)?;
        let out = self.map_binary(a, b, |x, y| x * y);
        self.ops.push(Op::Mul { a, b, out });
        Ok(out)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.map_unary(x, sigmoid);
        self.ops.push(Op::Sigmoid { x, out });
        out
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.map_unary(x, f64::tanh);
        self.ops.push(Op::Tanh { x, out });
        out
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.map_unary(x, |v| if v > 0.0 { v } else { 0.0 });
        self.ops.push(Op::Relu { x, out });
        out
    }

    /// y = scale * x + shift, elementwise with scalar coefficients.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let out = self.map_unary(x, |v| scale * v + shift);
        self.ops.push(Op::Affine { x, out, scale });
        out
    }

    /// Heaviside step H(u), 1 where u > 0 (strictly), else 0, with the
    /// triangular surrogate of width `alpha` on the backward pass. In
    /// smoothed tapes the forward is the surrogate's C1 integral instead.
    pub fn step(&mut self, u: Var, alpha: f64) -> Var {
        assert!(alpha > 0.0, "step: alpha must be positive");
        let smoothed = self.mode == StepMode::Smoothed;
        let out = self.map_unary(u, |v| {
            if smoothed {
                step_smoothed(v, alpha)
            } else {
                step_hard(v)
            }
        });
        self.ops.push(Op::Step { u, out, alpha });
        out
    }

    /// Extracts channels [from, to) of an NCHW tensor.
    pub fn slice_channels(&mut self, x: Var, from: usize, to: usize) -> Result<Var, ShapeError> {
        let t = &self.values[x.0];
        let (n, c, h, w) = t.dims4("slice_channels")?;
        if from >= to || to > c {
            return Err(ShapeError::Invalid {
                op: "slice_channels",
                what: format!("range {from}..{to} invalid for {c} channels"),
            });
        }
        let cs = to - from;
        let mut data = vec![0.0; n * cs * h * w];
        let plane = h * w;
        for ni in 0..n {
            let src = ni * c * plane + from * plane;
            let dst = ni * cs * plane;
            data[dst..dst + cs * plane].copy_from_slice(&t.data()[src..src + cs * plane]);
        }
        let out = self.push(Tensor::new(vec![n, cs, h, w], data).unwrap());
        self.ops.push(Op::SliceChannels { x, out, from, to });
        Ok(out)
    }

    /// Nearest-neighbor 2x spatial upsampling of an NCHW tensor.
    pub fn upsample2(&mut self, x: Var) -> Result<Var, ShapeError> {
        let t = &self.values[x.0];
        let (n, c, h, w) = t.dims4("upsample2")?;
        let (oh, ow) = (2 * h, 2 * w);
        let mut data = vec![0.0; n * c * oh * ow];
        for nc in 0..n * c {
            let src = nc * h * w;
            let dst = nc * oh * ow;
            for i in 0..h {
                for j in 0..w {
                    let v = t.data()[src + i * w + j];
                    let base = dst + 2 * i * ow + 2 * j;
                    data[base] = v;
                    data[base + 1] = v;
                    data[base + ow] = v;
                    data[base + ow + 1] = v;
                }
            }
        }
        let out = self.push(Tensor::new(vec![n, c, oh, ow], data).unwrap());
        self.ops.push(Op::Upsample2 { x, out });
        Ok(out)
    }

    /// Scalar sum of all elements.
    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.values[x.0].data().iter().sum();
        let out = self.push(Tensor::scalar(s));
        self.ops.push(Op::Sum { x, out });
        out
    }

    /// Scalar sum of absolute values (L1 norm). The subgradient at exact
    /// zeros is taken as 0.
    pub fn sum_abs(&mut self, x: Var) -> Var {
        let s: f64 = self.values[x.0].data().iter().map(|v| v.abs()).sum();
        let out = self.push(Tensor::scalar(s));
        self.ops.push(Op::SumAbs { x, out });
        out
    }

    /// Weighted binary cross-entropy with logits, summed over all elements:
    /// sum_i w_i * (max(x_i,0) - x_i t_i + ln(1 + exp(-|x_i|))).
    pub fn bce_logits_sum(
        &mut self,
        x: Var,
        target: &Tensor,
        weight: &Tensor,
    ) -> Result<Var, ShapeError> {
        let t = &self.values[x.0];
        if t.shape() != target.shape() || t.shape() != weight.shape() {
            return Err(ShapeError::Invalid {
                op: "bce_logits_sum",
                what: format!(
                    "logits {:?}, target {:?}, weight {:?} must agree",
                    t.shape(),
                    target.shape(),
                    weight.shape()
                ),
            });
        }
        let mut s = 0.0;
        for ((xv, tv), wv) in t.data().iter().zip(target.data()).zip(weight.data()) {
            s += wv * (xv.max(0.0) - xv * tv + (-xv.abs()).exp().ln_1p());
        }
        let out = self.push(Tensor::scalar(s));
        self.ops.push(Op::BceLogitsSum {
            x,
            out,
            target: target.clone(),
            weight: weight.clone(),
        });
        Ok(out)
    }

    /// Weighted smooth-L1 (Huber) loss, summed: sum_i w_i * h(x_i - t_i)
    /// with h(d) = d^2/2 for |d| < 1, |d| - 1/2 otherwise.
    pub fn smooth_l1_sum(
        &mut self,
        x: Var,
        target: &Tensor,
        weight: &Tensor,
    ) -> Result<Var, ShapeError> {
        let t = &self.values[x.0];
        if t.shape() != target.shape() || t.shape() != weight.shape() {
            return Err(ShapeError::Invalid {
                op: "smooth_l1_sum",
                what: format!(
                    "pred {:?}, target {:?}, weight {:?} must agree",
                    t.shape(),
                    target.shape(),
                    weight.shape()
                ),
            });
        }
        let mut s = 0.0;
        for ((xv, tv), wv) in t.data().iter().zip(target.data()).zip(weight.data()) {
            let d = xv - tv;
            s += wv * if d.abs() < 1.0 { 0.5 * d * d } else { d.abs() - 0.5 };
        }
        let out = self.push(Tensor::scalar(s));
        self.ops.push(Op::SmoothL1Sum {
            x,
            out,
            target: target.clone(),
            weight: weight.clone(),
        });
        Ok(out)
    }

    /// Masked Charbonnier endpoint error, summed over pixels:
    /// sum_{n,h,w} m * sqrt((u - u*)^2 + (v - v*)^2 + eps^2)
    /// where x and target are [N,2,H,W] flow fields and mask is [N,1,H,W].
    pub fn charbonnier_epe_sum(
        &mut self,
        x: Var,
        target: &Tensor,
        mask: &Tensor,
        eps: f64,
    ) -> Result<Var, ShapeError> {
        let t = &self.values[x.0];
        let (n, c, h, w) = t.dims4("charbonnier_epe_sum")?;
        if c != 2 {
            return Err(ShapeError::DimMismatch {
                op: "charbonnier_epe_sum",
                dim: "flow channels",
                expected: 2,
                got: c,
            });
        }
        if target.shape() != t.shape() {
            return Err(ShapeError::Invalid {
                op: "charbonnier_epe_sum",
                what: format!("target shape {:?} != pred {:?}", target.shape(), t.shape()),
            });
        }
        if mask.shape() != [n, 1, h, w] {
            return Err(ShapeError::Invalid {
                op: "charbonnier_epe_sum",
                what: format!("mask shape {:?} != [{n}, 1, {h}, {w}]", mask.shape()),
            });
        }
        assert!(eps > 0.0, "charbonnier eps must be positive");
        let plane = h * w;
        let mut s = 0.0;
        for ni in 0..n {
            for p in 0..plane {
                let m = mask.data()[ni * plane + p];
                if m == 0.0 {
                    continue;
                }
                let du = t.data()[ni * 2 * plane + p] - target.data()[ni * 2 * plane + p];
                let dv = t.data()[ni * 2 * plane + plane + p]
                    - target.data()[ni * 2 * plane + plane + p];
                s += m * (du * du + dv * dv + eps * eps).sqrt();
            }
        }
        let out = self.push(Tensor::scalar(s));
        self.ops.push(Op::CharbonnierEpeSum {
            x,
            out,
            target: target.clone(),
            mask: mask.clone(),
            eps,
        });
        Ok(out)
    }

    /// Replays the tape in reverse, accumulating d(loss)/d(node) into every
    /// node's grad buffer. `loss` must be scalar. Each call computes the
    /// full gradient afresh and adds it, so repeated calls sum.
    pub fn backward(&mut self, loss: Var) -> Result<(), ShapeError> {
        if self.values[loss.0].len() != 1 {
            return Err(ShapeError::Invalid {
                op: "backward",
                what: format!(
                    "loss must be scalar, got shape {:?}",
                    self.values[loss.0].shape()
                ),
            });
        }
        let mut scratch: Vec<Vec<f64>> = self.values.iter().map(|t| vec![0.0; t.len()]).collect();
        scratch[loss.0][0] = 1.0;
        for idx in (0..self.ops.len()).rev() {
            self.backward_op(idx, &mut scratch);
        }
        for (acc, fresh) in self.grads.iter_mut().zip(&scratch) {
            for (a, f) in acc.iter_mut().zip(fresh) {
                *a += f;
            }
        }
        Ok(())
    }

    fn backward_op(&self, idx: usize, grads: &mut [Vec<f64>]) {
        // Pull the output gradient out so input grads can be borrowed mutably.
        let (out, go): (Var, Vec<f64>) = {
            let out = match &self.ops[idx] {
                Op::Conv2d { out, .. }
                | Op::Add { out, .. }
                | Op::Sub { out, .. }
                | Op::Mul { out, .. }
                | Op::Sigmoid { out, .. }
                | Op::Tanh { out, .. }
                | Op::Relu { out, .. }
                | Op::Affine { out, .. }
                | Op::Step { out, .. }
                | Op::SliceChannels { out, .. }
                | Op::Upsample2 { out, .. }
                | Op::Sum { out, .. }
                | Op::SumAbs { out, .. }
                | Op::BceLogitsSum { out, .. }
                | Op::SmoothL1Sum { out, .. }
                | Op::CharbonnierEpeSum { out, .. } => *out,
            };
            (out, grads[out.0].clone())
        };
        match &self.ops[idx] {
            Op::Conv2d { x, k, b, geom, .. } => {
                let (x, k, b, geom) = (*x, *k, *b, *geom);
                // Local buffers keep the three write targets independent of
                // the grads slice borrows.
                let mut gx = vec![0.0; self.values[x.0].len()];
                let mut gk = vec![0.0; self.values[k.0].len()];
                let mut gb = b.map(|b| vec![0.0; self.values[b.0].len()]);
                conv2d_backward(
                    &self.values[x.0],
                    &self.values[k.0],
                    &go,
                    &geom,
                    &mut gx,
                    &mut gk,
                    gb.as_deref_mut(),
                );
                for (g, d) in grads[x.0].iter_mut().zip(&gx) {
                    *g += d;
                }
                for (g, d) in grads[k.0].iter_mut().zip(&gk) {
                    *g += d;
                }
                if let (Some(b), Some(gb)) = (b, gb) {
                    for (g, d) in grads[b.0].iter_mut().zip(&gb) {
                        *g += d;
                    }
                }
            }
            Op::Add { a, b, .. } => {
                let (a, b) = (*a, *b);
                for (g, d) in grads[a.0].iter_mut().zip(&go) {
                    *g += d;
                }
                for (g, d) in grads[b.0].iter_mut().zip(&go) {
                    *g += d;
                }
            }
            Op::Sub { a, b, .. } => {
                let (a, b) = (*a, *b);
                for (g, d) in grads[a.0].iter_mut().zip(&go) {
                    *g += d;
                }
                for (g, d) in grads[b.0].iter_mut().zip(&go) {
                    *g -= d;
                }
            }
            Op::Mul { a, b, .. } => {
                let (a, b) = (*a, *b);
                // Two sequential passes so a == b (squaring) accumulates both.
                for ((g, d), y) in grads[a.0].iter_mut().zip(&go).zip(self.values[b.0].data()) {
                    *g += d * y;
                }
                for ((g, d), xv) in grads[b.0].iter_mut().zip(&go).zip(self.values[a.0].data()) {
                    *g += d * xv;
                }
            }
            Op::Sigmoid { x, .. } => {
                let x = *x;
                for ((g, d), y) in grads[x.0].iter_mut().zip(&go).zip(self.values[out.0].data()) {
                    *g += d * y * (1.0 - y);
                }
            }
            Op::Tanh { x, .. } => {
                let x = *x;
                for ((g, d), y) in grads[x.0].iter_mut().zip(&go).zip(self.values[out.0].data()) {
                    *g += d * (1.0 - y * y);
                }
            }
            Op::Relu { x, .. } => {
                let x = *x;
                for ((g, d), v) in grads[x.0].iter_mut().zip(&go).zip(self.values[x.0].data()) {
                    if *v > 0.0 {
                        *g += d;
                    }
                }
            }
            Op::Affine { x, scale, .. } => {
                let (x, scale) = (*x, *scale);
                for (g, d) in grads[x.0].iter_mut().zip(&go) {
                    *g += scale * d;
                }
            }
            Op::Step { u, alpha, .. } => {
                let (u, alpha) = (*u, *alpha);
                for ((g, d), v) in grads[u.0].iter_mut().zip(&go).zip(self.values[u.0].data()) {
                    *g += d * surrogate_grad(*v, alpha);
                }
            }
            Op::SliceChannels { x, from, to, .. } => {
                let (x, from, to) = (*x, *from, *to);
                let (n, c, h, w) = self.values[x.0].dims4("slice_channels backward").unwrap();
                let cs = to - from;
                let plane = h * w;
                for ni in 0..n {
                    let dst = ni * c * plane + from * plane;
                    let src = ni * cs * plane;
                    for i in 0..cs * plane {
                        grads[x.0][dst + i] += go[src + i];
                    }
                }
            }
            Op::Upsample2 { x, .. } => {
                let x = *x;
                let (n, c, h, w) = self.values[x.0].dims4("upsample2 backward").unwrap();
                let ow = 2 * w;
                for nc in 0..n * c {
                    let src = nc * 4 * h * w;
                    let dst = nc * h * w;
                    for i in 0..h {
                        for j in 0..w {
                            let base = src + 2 * i * ow + 2 * j;
                            grads[x.0][dst + i * w + j] +=
                                go[base] + go[base + 1] + go[base + ow] + go[base + ow + 1];
                        }
                    }
                }
            }
            Op::Sum { x, .. } => {
                let x = *x;
                let d = go[0];
                for g in grads[x.0].iter_mut() {
                    *g += d;
                }
            }
            Op::SumAbs { x, .. } => {
                let x = *x;
                let d = go[0];
                for (g, v) in grads[x.0].iter_mut().zip(self.values[x.0].data()) {
                    if *v > 0.0 {
                        *g += d;
                    } else if *v < 0.0 {
                        *g -= d;
                    }
                }
            }
            Op::BceLogitsSum { x, target, weight, .. } => {
                let x = *x;
                let d = go[0];
                for (((g, v), t), w) in grads[x.0]
                    .iter_mut()
                    .zip(self.values[x.0].data())
                    .zip(target.data())
                    .zip(weight.data())
                {
                    *g += d * w * (sigmoid(*v) - t);
                }
            }
            Op::SmoothL1Sum { x, target, weight, .. } => {
                let x = *x;
                let d = go[0];
                for (((g, v), t), w) in grads[x.0]
                    .iter_mut()
                    .zip(self.values[x.0].data())
                    .zip(target.data())
                    .zip(weight.data())
                {
                    let diff = v - t;
                    *g += d * w * diff.clamp(-1.0, 1.0);
                }
            }
            Op::CharbonnierEpeSum { x, target, mask, eps, .. } => {
                let (x, eps) = (*x, *eps);
                let d = go[0];
                let xv = &self.values[x.0];
                let (n, _, h, w) = xv.dims4("charbonnier backward").unwrap();
                let plane = h * w;
                let gx = &mut grads[x.0];
                for ni in 0..n {
                    for p in 0..plane {
                        let m = mask.data()[ni * plane + p];
                        if m == 0.0 {
                            continue;
                        }
                        let iu = ni * 2 * plane + p;
                        let iv = iu + plane;
                        let du = xv.data()[iu] - target.data()[iu];
                        let dv = xv.data()[iv] - target.data()[iv];
                        let r = (du * du + dv * dv + eps * eps).sqrt();
                        gx[iu] += d * m * du / r;
                        gx[iv] += d * m * dv / r;
                    }
                }
            }
        }
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn step_hard(u: f64) -> f64 {
    if u > 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Integral of the triangular surrogate: 0 below -alpha, 1 above alpha,
/// piecewise quadratic between (C1 everywhere, derivative = the surrogate).
fn step_smoothed(u: f64, alpha: f64) -> f64 {
    if u <= -alpha {
        0.0
    } else if u <= 0.0 {
        0.5 + u / alpha + u * u / (2.0 * alpha * alpha)
    } else if u < alpha {
        0.5 + u / alpha - u * u / (2.0 * alpha * alpha)
    } else {
        1.0
    }
}

/// Triangular pseudo-derivative g(u) = max(0, 1 - |u|/alpha) / alpha.
pub fn surrogate_grad(u: f64, alpha: f64) -> f64 {
    (1.0 - u.abs() / alpha).max(0.0) / alpha
}

fn conv2d_forward(
    x: &Tensor,
    k: &Tensor,
    b: Option<&Tensor>,
    g: &ConvGeom,
    schedule: ConvSchedule,
) -> Tensor {
    let scatter = match schedule {
        ConvSchedule::Scatter => true,
        ConvSchedule::Gather => false,
        ConvSchedule::Auto => x.density() < SCATTER_DENSITY_CUTOFF,
    };
    let mut out = vec![0.0; g.n * g.cout * g.oh * g.ow];
    if scatter {
        conv2d_scatter(x.data(), k.data(), g, &mut out);
    } else {
        conv2d_gather(x.data(), k.data(), g, &mut out);
    }
    if let Some(b) = b {
        let plane = g.oh * g.ow;
        for ni in 0..g.n {
            for co in 0..g.cout {
                let bias = b.data()[co];
                let base = (ni * g.cout + co) * plane;
                for v in &mut out[base..base + plane] {
                    *v += bias;
                }
            }
        }
    }
    Tensor::new(vec![g.n, g.cout, g.oh, g.ow], out).unwrap()
}

/// Valid output-column range [lo, hi) such that `owi * stride + off` stays
/// inside [0, w) for every owi in the range.
fn ow_range(ow: usize, w: usize, stride: usize, off: isize) -> (usize, usize) {
    let s = stride as isize;
    let ceil_div = |a: isize, b: isize| (a + b - 1).div_euclid(b);
    let lo = ceil_div(-off, s).max(0) as usize;
    let hi = (ceil_div(w as isize - off, s).max(0) as usize).min(ow);
    (lo, hi.max(lo))
}

/// Stride-1, width-3 row update with all three taps fused into one pass.
/// Each output element's taps are still added one at a time in ascending
/// kw order, so the summation order (and hence every bit of the result)
/// matches the unfused per-tap passes.
fn gather_row_k3(out: &mut [f64], x: &[f64], k: &[f64], pad: isize) {
    let ow = out.len();
    let w = x.len();
    let (kv0, kv1, kv2) = (k[0], k[1], k[2]);
    let mut lo = [0usize; 3];
    let mut hi = [0usize; 3];
    for (t, (l, h)) in lo.iter_mut().zip(hi.iter_mut()).enumerate() {
        let (a, b) = ow_range(ow, w, 1, t as isize - pad);
        *l = a;
        *h = b;
    }
    let lo_all = lo[0].max(lo[1]).max(lo[2]);
    let hi_all = hi[0].min(hi[1]).min(hi[2]).max(lo_all);
    let lo_min = lo[0].min(lo[1]).min(lo[2]);
    let hi_max = hi[0].max(hi[1]).max(hi[2]);
    for owi in (lo_min..lo_all).chain(hi_all..hi_max) {
        let mut acc = out[owi];
        for t in 0..3 {
            if owi >= lo[t] && owi < hi[t] {
                acc += k[t] * x[(owi as isize + t as isize - pad) as usize];
            }
        }
        out[owi] = acc;
    }
    if lo_all < hi_all {
        let n = hi_all - lo_all;
        let xs = &x[(lo_all as isize - pad) as usize..][..n + 2];
        let os = &mut out[lo_all..hi_all];
        for i in 0..n {
            let mut acc = os[i];
            acc += kv0 * xs[i];
            acc += kv1 * xs[i + 1];
            acc += kv2 * xs[i + 2];
            os[i] = acc;
        }
    }
}

/// Per-output-element accumulation in (ci, kh, kw) term order. The loops run
/// over whole output rows per kernel tap so the inner updates are slice
/// AXPYs, but each output element still receives its terms in exactly the
/// (ci, kh, kw) order the scatter schedule delivers, keeping the two
/// schedules bitwise identical.
fn conv2d_gather(x: &[f64], k: &[f64], g: &ConvGeom, out: &mut [f64]) {
    let pad = g.pad as isize;
    let s = g.stride;
    for ni in 0..g.n {
        for co in 0..g.cout {
            let obase = (ni * g.cout + co) * g.oh * g.ow;
            for ci in 0..g.cin {
                let xbase = (ni * g.cin + ci) * g.h * g.w;
                let kbase = (co * g.cin + ci) * g.kh * g.kw;
                for khi in 0..g.kh {
                    let krow = kbase + khi * g.kw;
                    for ohi in 0..g.oh {
                        let ihp = (ohi * s) as isize - pad + khi as isize;
                        if ihp < 0 || ihp >= g.h as isize {
                            continue;
                        }
                        let xrow = xbase + ihp as usize * g.w;
                        let orow = obase + ohi * g.ow;
                        if s == 1 && g.kw == 3 {
                            gather_row_k3(&mut out[orow..orow + g.ow], &x[xrow..xrow + g.w], &k[krow..krow + 3], pad);
                            continue;
                        }
                        for kwi in 0..g.kw {
                            let kv = k[krow + kwi];
                            let off = kwi as isize - pad;
                            let (lo, hi) = ow_range(g.ow, g.w, s, off);
                            if lo >= hi {
                                continue;
                            }
                            let x0 = (lo * s) as isize + off;
                            if s == 1 {
                                let xs = &x[xrow + x0 as usize..xrow + x0 as usize + (hi - lo)];
                                let os = &mut out[orow + lo..orow + hi];
                                for (o, xv) in os.iter_mut().zip(xs) {
                                    *o += kv * xv;
                                }
                            } else {
                                let mut xi = xrow + x0 as usize;
                                for o in out[orow + lo..orow + hi].iter_mut() {
                                    *o += kv * x[xi];
                                    xi += s;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Per-nonzero-input-element accumulation. Visits inputs in (ci, ih, iw)
/// order, which delivers each output element's terms in the same (ci, kh,
/// kw) order the gather uses, so the two schedules match bitwise.
fn conv2d_scatter(x: &[f64], k: &[f64], g: &ConvGeom, out: &mut [f64]) {
    let pad = g.pad as isize;
    let s = g.stride as isize;
    for ni in 0..g.n {
        for ci in 0..g.cin {
            let xbase = (ni * g.cin + ci) * g.h * g.w;
            for ihi in 0..g.h {
                for iwi in 0..g.w {
                    let xv = x[xbase + ihi * g.w + iwi];
                    if xv == 0.0 {
                        continue;
                    }
                    // Output rows/cols this input pixel can reach.
                    for co in 0..g.cout {
                        let kbase = (co * g.cin + ci) * g.kh * g.kw;
                        let obase = (ni * g.cout + co) * g.oh * g.ow;
                        for khi in 0..g.kh {
                            let oh_num = ihi as isize + pad - khi as isize;
                            if oh_num < 0 || oh_num % s != 0 {
                                continue;
                            }
                            let ohi = (oh_num / s) as usize;
                            if ohi >= g.oh {
                                continue;
                            }
                            let krow = kbase + khi * g.kw;
                            let orow = obase + ohi * g.ow;
                            for kwi in 0..g.kw {
                                let ow_num = iwi as isize + pad - kwi as isize;
                                if ow_num < 0 || ow_num % s != 0 {
                                    continue;
                                }
                                let owi = (ow_num / s) as usize;
                                if owi >= g.ow {
                                    continue;
                                }
                                out[orow + owi] += xv * k[krow + kwi];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Upstream-gradient density below which the element-skipping backward wins
/// over the row-sliced one. Pure performance knob; both accumulate the same
/// terms, merely in a different (equally deterministic) order.
const BACKWARD_SPARSE_CUTOFF: f64 = 0.15;

/// Accumulates input, kernel, and bias gradients, picking the backward
/// strategy by upstream-gradient density.
fn conv2d_backward(
    x: &Tensor,
    k: &Tensor,
    go: &[f64],
    g: &ConvGeom,
    gx: &mut [f64],
    gk: &mut [f64],
    gb: Option<&mut [f64]>,
) {
    if let Some(gb) = gb {
        let plane = g.oh * g.ow;
        for ni in 0..g.n {
            for co in 0..g.cout {
                let obase = (ni * g.cout + co) * plane;
                for d in &go[obase..obase + plane] {
                    gb[co] += d;
                }
            }
        }
    }
    let nnz = go.iter().filter(|v| **v != 0.0).count();
    if (nnz as f64) < BACKWARD_SPARSE_CUTOFF * go.len() as f64 {
        conv2d_backward_sparse(x, k, go, g, gx, gk);
    } else {
        conv2d_backward_dense(x, k, go, g, gx, gk);
    }
}

/// Skips whole output elements with zero upstream gradient; fastest when the
/// loss touches only a sparse subset of this conv's outputs.
fn conv2d_backward_sparse(
    x: &Tensor,
    k: &Tensor,
    go: &[f64],
    g: &ConvGeom,
    gx: &mut [f64],
    gk: &mut [f64],
) {
    let (h, w) = (g.h as isize, g.w as isize);
    let pad = g.pad as isize;
    let (xd, kd) = (x.data(), k.data());
    for ni in 0..g.n {
        for co in 0..g.cout {
            let obase = (ni * g.cout + co) * g.oh * g.ow;
            for ohi in 0..g.oh {
                let ih0 = (ohi * g.stride) as isize - pad;
                for owi in 0..g.ow {
                    let d = go[obase + ohi * g.ow + owi];
                    if d == 0.0 {
                        continue;
                    }
                    let iw0 = (owi * g.stride) as isize - pad;
                    let kw_lo = (-iw0).max(0) as usize;
                    let kw_hi = (w - iw0).min(g.kw as isize).max(0) as usize;
                    for ci in 0..g.cin {
                        let xbase = (ni * g.cin + ci) * g.h * g.w;
                        let kbase = (co * g.cin + ci) * g.kh * g.kw;
                        for khi in 0..g.kh {
                            let ihp = ih0 + khi as isize;
                            if ihp < 0 || ihp >= h {
                                continue;
                            }
                            let xrow = xbase + ihp as usize * g.w;
                            let krow = kbase + khi * g.kw;
                            for kwi in kw_lo..kw_hi {
                                let iw = (iw0 + kwi as isize) as usize;
                                gx[xrow + iw] += d * kd[krow + kwi];
                                gk[krow + kwi] += d * xd[xrow + iw];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Stride-1, width-3 backward row update with the three taps fused: one pass
/// over the output row updates the input-gradient row and the three
/// kernel-gradient taps together.
fn backward_row_k3(
    go_row: &[f64],
    x_row: &[f64],
    gx_row: &mut [f64],
    k: &[f64],
    gk: &mut [f64],
    pad: isize,
) {
    let ow = go_row.len();
    let w = x_row.len();
    let mut lo = [0usize; 3];
    let mut hi = [0usize; 3];
    for (t, (l, h)) in lo.iter_mut().zip(hi.iter_mut()).enumerate() {
        let (a, b) = ow_range(ow, w, 1, t as isize - pad);
        *l = a;
        *h = b;
    }
    let lo_all = lo[0].max(lo[1]).max(lo[2]);
    let hi_all = hi[0].min(hi[1]).min(hi[2]).max(lo_all);
    let lo_min = lo[0].min(lo[1]).min(lo[2]);
    let hi_max = hi[0].max(hi[1]).max(hi[2]);
    for owi in (lo_min..lo_all).chain(hi_all..hi_max) {
        let d = go_row[owi];
        for t in 0..3 {
            if owi >= lo[t] && owi < hi[t] {
                let xi = (owi as isize + t as isize - pad) as usize;
                gx_row[xi] += d * k[t];
                gk[t] += d * x_row[xi];
            }
        }
    }
    if lo_all < hi_all {
        let n = hi_all - lo_all;
        let x0 = (lo_all as isize - pad) as usize;
        let ds = &go_row[lo_all..hi_all];
        let xs = &x_row[x0..x0 + n + 2];
        let gxs = &mut gx_row[x0..x0 + n + 2];
        let (k0, k1, k2) = (k[0], k[1], k[2]);
        let (mut a0, mut a1, mut a2) = (0.0, 0.0, 0.0);
        for i in 0..n {
            let d = ds[i];
            gxs[i] += d * k0;
            gxs[i + 1] += d * k1;
            gxs[i + 2] += d * k2;
            a0 += d * xs[i];
            a1 += d * xs[i + 1];
            a2 += d * xs[i + 2];
        }
        gk[0] += a0;
        gk[1] += a1;
        gk[2] += a2;
    }
}

/// Row-sliced backward: for each kernel tap, one pass over the output row
/// updates the input gradient (AXPY) and accumulates the kernel gradient
/// (dot product). Fastest when upstream gradients are mostly nonzero.
fn conv2d_backward_dense(
    x: &Tensor,
    k: &Tensor,
    go: &[f64],
    g: &ConvGeom,
    gx: &mut [f64],
    gk: &mut [f64],
) {
    let pad = g.pad as isize;
    let s = g.stride;
    let (xd, kd) = (x.data(), k.data());
    for ni in 0..g.n {
        for co in 0..g.cout {
            let obase = (ni * g.cout + co) * g.oh * g.ow;
            for ci in 0..g.cin {
                let xbase = (ni * g.cin + ci) * g.h * g.w;
                let kbase = (co * g.cin + ci) * g.kh * g.kw;
                for khi in 0..g.kh {
                    let krow = kbase + khi * g.kw;
                    for ohi in 0..g.oh {
                        let ihp = (ohi * s) as isize - pad + khi as isize;
                        if ihp < 0 || ihp >= g.h as isize {
                            continue;
                        }
                        let xrow = xbase + ihp as usize * g.w;
                        let orow = obase + ohi * g.ow;
                        if s == 1 && g.kw == 3 {
                            backward_row_k3(
                                &go[orow..orow + g.ow],
                                &xd[xrow..xrow + g.w],
                                &mut gx[xrow..xrow + g.w],
                                &kd[krow..krow + 3],
                                &mut gk[krow..krow + 3],
                                pad,
                            );
                            continue;
                        }
                        for kwi in 0..g.kw {
                            let kv = kd[krow + kwi];
                            let off = kwi as isize - pad;
                            let (lo, hi) = ow_range(g.ow, g.w, s, off);
                            if lo >= hi {
                                continue;
                            }
                            let x0 = xrow + ((lo * s) as isize + off) as usize;
                            let mut acc = 0.0;
                            let mut xi = x0;
                            for d in &go[orow + lo..orow + hi] {
                                gx[xi] += d * kv;
                                acc += d * xd[xi];
                                xi += s;
                            }
                            gk[krow + kwi] += acc;
                        }
                    }
                }
            }
        }
    }
}
