//! Context-aware sparse blocks: thresholded convolution, residual block,
//! and three convolutional recurrent units (MGU, GRU, MinimalRNN).
//!
//! Every block computes a learned per-pixel, per-channel threshold, compares
//! its pre-activation against it with a strict Heaviside step, and emits
//! value*mask. Emitted values are therefore strictly positive: the threshold
//! is a sigmoid output in (0,1) and emission requires exceeding it.
//!
//! Blocks are pure functions of (input, state, params) plus an optional
//! [`SOpLedger`] sink. The ledger records the exact synaptic operations of
//! each conv, counted on the nonzero entries of whatever tensor actually
//! feeds it, and the output activation density of the block. Recurrent
//! input-path convs on x are charged at the dense rate: their input is a
//! dense tensor by construction, and the dense formula is the exact count
//! only when padding is zero, so we count those exactly too but label them
//! through the same entry point.
//!
//! A `threshold` of [`ThresholdKind::Relu`] swaps every learned threshold
//! for a plain ReLU and drops the threshold parameters; that is the
//! baseline model used for sparsity comparisons, trained with the L1
//! activation penalty instead.

use crate::params::{BoundParams, ParamSet};
use crate::sop::{count_conv_sop, ConvCount, SOpLedger, SOpPath};
use crate::tape::{Tape, Var};
use crate::tensor::{ShapeError, Tensor};
use rand_chacha::ChaCha8Rng;

/// Learned context-aware threshold, or the fixed-ReLU baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ThresholdKind {
    Learned,
    Relu,
}

/// Initial bias of every threshold-producing conv. σ(-2) ≈ 0.12, so a
/// freshly initialized network fires on weak evidence instead of starting
/// silent behind the σ(0) = 0.5 default — event-histogram inputs are sparse
/// and produce pre-activations well under 0.5, which would leave the whole
/// stack emitting nothing and training stuck in that dead equilibrium.
pub const THR_BIAS_INIT: f64 = -2.0;

/// Initial bias on the candidate-memory path of the recurrent cells (the
/// conv feeding the tanh). A zero-initialized cell keeps its auxiliary
/// state near zero and never crosses even a permissive threshold, so the
/// emitted output — and everything downstream — stays exactly zero; a small
/// positive bias gives the memory a resting drive the first emissions (and
/// their gradients) can come from.
pub const REC_CANDIDATE_BIAS_INIT: f64 = 0.5;

/// A block output: emitted values with their binary emission mask, plus the
/// pre-threshold tensor and threshold so invariants stay checkable.
#[derive(Debug, Clone, Copy)]
pub struct SparseActivation {
    /// Emitted values, zero wherever the mask is zero.
    pub values: Var,
    /// Binary emission mask (for the ReLU baseline: the positivity mask).
    pub mask: Var,
    /// Pre-threshold values the mask was derived from.
    pub pre: Var,
    /// Per-pixel threshold; None for the ReLU baseline.
    pub vth: Option<Var>,
    /// Fraction of nonzero emitted values.
    pub density: f64,
}

/// Recurrent carry: auxiliary memory c and the previous sparse output y.
#[derive(Debug, Clone, Copy)]
pub struct RecState {
    pub c: Var,
    pub y: Var,
}

impl RecState {
    /// Zero state of the given geometry; what every sequence starts from.
    pub fn zeros(tape: &mut Tape, n: usize, ch: usize, h: usize, w: usize) -> Self {
        RecState {
            c: tape.input(crate::tensor::Tensor::zeros(&[n, ch, h, w])),
            y: tape.input(crate::tensor::Tensor::zeros(&[n, ch, h, w])),
        }
    }
}

/// Soft reset: c' = c - v_th ⊙ s. Entries without an emission are unchanged.
pub fn soft_reset(tape: &mut Tape, c: Var, vth: Var, s: Var) -> Result<Var, ShapeError> {
    let sub = tape.mul(vth, s)?;
    tape.sub(c, sub)
}

fn record_conv(
    ledger: &mut Option<&mut SOpLedger>,
    tape: &Tape,
    layer: &str,
    path: SOpPath,
    input: Var,
    cout: usize,
    ksize: usize,
    stride: usize,
    pad: usize,
    force_dense: bool,
) {
    if let Some(ledger) = ledger.as_deref_mut() {
        let c = ConvCount { cout, kh: ksize, kw: ksize, stride, pad };
        let dense = count_conv_sop(tape.value(input), c, false);
        let sparse = if force_dense {
            dense
        } else {
            count_conv_sop(tape.value(input), c, true)
        };
        ledger.add_sop(layer, path, sparse, dense);
    }
}

fn record_output(ledger: &mut Option<&mut SOpLedger>, tape: &Tape, layer: &str, out: Var) {
    if let Some(ledger) = ledger.as_deref_mut() {
        let t = tape.value(out);
        ledger.add_activation(layer, t.count_nonzero() as u64, t.len() as u64);
    }
}

/// Context-aware 2D convolution. The threshold conv mirrors the main conv's
/// kernel size, stride, and padding so the two outputs align spatially.
#[derive(Debug, Clone)]
pub struct CaConv2d {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub ksize: usize,
    pub stride: usize,
    pub pad: usize,
    pub alpha: f64,
    pub threshold: ThresholdKind,
}

impl CaConv2d {
    pub fn new(
        name: &str,
        cin: usize,
        cout: usize,
        ksize: usize,
        stride: usize,
        alpha: f64,
        threshold: ThresholdKind,
    ) -> Self {
        CaConv2d {
            name: name.to_string(),
            cin,
            cout,
            ksize,
            stride,
            pad: ksize / 2,
            alpha,
            threshold,
        }
    }

    pub fn register(&self, ps: &mut ParamSet, rng: &mut ChaCha8Rng) {
        ps.insert_conv(
            rng,
            &format!("{}.w", self.name),
            Some(&format!("{}.b", self.name)),
            self.cout,
            self.cin,
            self.ksize,
            self.ksize,
        );
        if self.threshold == ThresholdKind::Learned {
            let thr_b = format!("{}.thr_b", self.name);
            ps.insert_conv(
                rng,
                &format!("{}.thr_w", self.name),
                Some(&thr_b),
                self.cout,
                self.cin,
                self.ksize,
                self.ksize,
            );
            *ps.get_mut(&thr_b) = Tensor::full(&[self.cout], THR_BIAS_INIT);
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        bp: &BoundParams,
        x: Var,
        mut ledger: Option<&mut SOpLedger>,
    ) -> Result<SparseActivation, ShapeError> {
        record_conv(
            &mut ledger,
            tape,
            &self.name,
            SOpPath::Main,
            x,
            self.cout,
            self.ksize,
            self.stride,
            self.pad,
            false,
        );
        let w = bp.var(&format!("{}.w", self.name));
        let b = bp.var(&format!("{}.b", self.name));
        let pre = tape.conv2d(x, w, Some(b), self.stride, self.pad)?;
        let act = match self.threshold {
            ThresholdKind::Learned => {
                record_conv(
                    &mut ledger,
                    tape,
                    &self.name,
                    SOpPath::Threshold,
                    x,
                    self.cout,
                    self.ksize,
                    self.stride,
                    self.pad,
                    false,
                );
                let tw = bp.var(&format!("{}.thr_w", self.name));
                let tb = bp.var(&format!("{}.thr_b", self.name));
                let thr_pre = tape.conv2d(x, tw, Some(tb), self.stride, self.pad)?;
                let vth = tape.sigmoid(thr_pre);
                let margin = tape.sub(pre, vth)?;
                let mask = tape.step(margin, self.alpha);
                let values = tape.mul(pre, mask)?;
                SparseActivation {
                    values,
                    mask,
                    pre,
                    vth: Some(vth),
                    density: tape.value(values).density(),
                }
            }
            ThresholdKind::Relu => {
                let values = tape.relu(pre);
                let mask = tape.step(pre, self.alpha);
                SparseActivation {
                    values,
                    mask,
                    pre,
                    vth: None,
                    density: tape.value(values).density(),
                }
            }
        };
        record_output(&mut ledger, tape, &self.name, act.values);
        Ok(act)
    }
}

/// An ordinary convolution without any thresholding, used for task heads
/// and decoders. Its synaptic operations are still counted on the nonzero
/// entries of whatever reaches it, but it records no activation density
/// (its output is a dense prediction, not a sparse code).
#[derive(Debug, Clone)]
pub struct PlainConv {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub ksize: usize,
    pub stride: usize,
    pub pad: usize,
    pub bias: bool,
}

impl PlainConv {
    pub fn new(name: &str, cin: usize, cout: usize, ksize: usize, stride: usize, bias: bool) -> Self {
        PlainConv {
            name: name.to_string(),
            cin,
            cout,
            ksize,
            stride,
            pad: ksize / 2,
            bias,
        }
    }

    pub fn register(&self, ps: &mut ParamSet, rng: &mut ChaCha8Rng) {
        let b_name = format!("{}.b", self.name);
        ps.insert_conv(
            rng,
            &format!("{}.w", self.name),
            self.bias.then_some(b_name.as_str()),
            self.cout,
            self.cin,
            self.ksize,
            self.ksize,
        );
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        bp: &BoundParams,
        x: Var,
        mut ledger: Option<&mut SOpLedger>,
    ) -> Result<Var, ShapeError> {
        record_conv(
            &mut ledger,
            tape,
            &self.name,
            SOpPath::Main,
            x,
            self.cout,
            self.ksize,
            self.stride,
            self.pad,
            false,
        );
        let w = bp.var(&format!("{}.w", self.name));
        let b = self.bias.then(|| bp.var(&format!("{}.b", self.name)));
        tape.conv2d(x, w, b, self.stride, self.pad)
    }
}

/// Context-aware residual block. The first conv is a full [`CaConv2d`]; the
/// second produces 2C channels that split into threshold logits (first C)
/// and a dense feature (last C). The dense half is accumulated with the
/// shortcut and the sum is thresholded again, so the output stays sparse.
/// When the shortcut changes shape it is a strided 1x1 projection conv,
/// charged to this block's second conv in the ledger.
#[derive(Debug, Clone)]
pub struct CaResidual {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub stride: usize,
    pub ksize: usize,
    pub alpha: f64,
    pub threshold: ThresholdKind,
    conv1: CaConv2d,
}

impl CaResidual {
    pub fn new(
        name: &str,
        cin: usize,
        cout: usize,
        ksize: usize,
        stride: usize,
        alpha: f64,
        threshold: ThresholdKind,
    ) -> Self {
        let conv1 = CaConv2d::new(
            &format!("{name}_Conv1"),
            cin,
            cout,
            ksize,
            stride,
            alpha,
            threshold,
        );
        CaResidual {
            name: name.to_string(),
            cin,
            cout,
            stride,
            ksize,
            alpha,
            threshold,
            conv1,
        }
    }

    fn conv2_name(&self) -> String {
        format!("{}_Conv2", self.name)
    }

    fn needs_projection(&self) -> bool {
        self.cin != self.cout || self.stride != 1
    }

    pub fn register(&self, ps: &mut ParamSet, rng: &mut ChaCha8Rng) {
        self.conv1.register(ps, rng);
        let c2 = self.conv2_name();
        // The baseline has no threshold half to produce.
        let c2_out = match self.threshold {
            ThresholdKind::Learned => 2 * self.cout,
            ThresholdKind::Relu => self.cout,
        };
        let b2 = format!("{c2}.b");
        ps.insert_conv(
            rng,
            &format!("{c2}.w"),
            Some(&b2),
            c2_out,
            self.cout,
            self.ksize,
            self.ksize,
        );
        if self.threshold == ThresholdKind::Learned {
            // The first half of conv2's channels produces the threshold;
            // start it permissive like every other threshold conv.
            for v in &mut ps.get_mut(&b2).data_mut()[..self.cout] {
                *v = THR_BIAS_INIT;
            }
        }
        if self.needs_projection() {
            ps.insert_conv(rng, &format!("{}.proj_w", self.name), None, self.cout, self.cin, 1, 1);
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        bp: &BoundParams,
        x: Var,
        mut ledger: Option<&mut SOpLedger>,
    ) -> Result<SparseActivation, ShapeError> {
        let a = self.conv1.forward(tape, bp, x, ledger.as_deref_mut())?;
        let c2 = self.conv2_name();
        // Both halves of conv2 see the same input; each half's SOp is the
        // one-half-cout count, charged to its own path.
        record_conv(
            &mut ledger,
            tape,
            &c2,
            SOpPath::Main,
            a.values,
            self.cout,
            self.ksize,
            1,
            self.ksize / 2,
            false,
        );
        let w2 = bp.var(&format!("{c2}.w"));
        let b2 = bp.var(&format!("{c2}.b"));
        let z = tape.conv2d(a.values, w2, Some(b2), 1, self.ksize / 2)?;
        let shortcut = if self.needs_projection() {
            record_conv(
                &mut ledger,
                tape,
                &c2,
                SOpPath::Main,
                x,
                self.cout,
                1,
                self.stride,
                0,
                false,
            );
            let pw = bp.var(&format!("{}.proj_w", self.name));
            tape.conv2d(x, pw, None, self.stride, 0)?
        } else {
            x
        };
        let act = match self.threshold {
            ThresholdKind::Learned => {
                record_conv(
                    &mut ledger,
                    tape,
                    &c2,
                    SOpPath::Threshold,
                    a.values,
                    self.cout,
                    self.ksize,
                    1,
                    self.ksize / 2,
                    false,
                );
                let u = tape.slice_channels(z, 0, self.cout)?;
                let d = tape.slice_channels(z, self.cout, 2 * self.cout)?;
                let vth = tape.sigmoid(u);
                let r = tape.add(shortcut, d)?;
                let margin = tape.sub(r, vth)?;
                let mask = tape.step(margin, self.alpha);
                let values = tape.mul(r, mask)?;
                SparseActivation {
                    values,
                    mask,
                    pre: r,
                    vth: Some(vth),
                    density: tape.value(values).density(),
                }
            }
            ThresholdKind::Relu => {
                let r = tape.add(shortcut, z)?;
                let values = tape.relu(r);
                let mask = tape.step(r, self.alpha);
                SparseActivation {
                    values,
                    mask,
                    pre: r,
                    vth: None,
                    density: tape.value(values).density(),
                }
            }
        };
        record_output(&mut ledger, tape, &c2, act.values);
        Ok(act)
    }
}

/// Which gating equations a recurrent block runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecurrentKind {
    Mgu,
    Gru,
    MinimalRnn,
}

impl RecurrentKind {
    pub fn parse(s: &str) -> Option<RecurrentKind> {
        match s {
            "mgu" => Some(RecurrentKind::Mgu),
            "gru" => Some(RecurrentKind::Gru),
            "minimalrnn" => Some(RecurrentKind::MinimalRnn),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            RecurrentKind::Mgu => "mgu",
            RecurrentKind::Gru => "gru",
            RecurrentKind::MinimalRnn => "minimalrnn",
        }
    }
}

/// Context-aware convolutional recurrent unit. All convs are 3x3, stride 1,
/// same padding, so state shape is preserved across steps.
///
/// The MGU follows the forget-gate equations with the candidate conv applied
/// to the gated previous output. GRU and MinimalRNN keep that adaptation
/// pattern (threshold from y_prev, auxiliary memory c, step plus soft reset)
/// around their original gate structures.
#[derive(Debug, Clone)]
pub struct CaConvRec {
    pub name: String,
    pub kind: RecurrentKind,
    pub cin: usize,
    pub ch: usize,
    pub alpha: f64,
    pub threshold: ThresholdKind,
}

const REC_K: usize = 3;
const REC_PAD: usize = 1;

impl CaConvRec {
    pub fn new(
        name: &str,
        kind: RecurrentKind,
        cin: usize,
        ch: usize,
        alpha: f64,
        threshold: ThresholdKind,
    ) -> Self {
        CaConvRec {
            name: name.to_string(),
            kind,
            cin,
            ch,
            alpha,
            threshold,
        }
    }

    /// (name, cout, cin, bias) for each conv this unit owns.
    fn conv_defs(&self) -> Vec<(String, usize, usize, bool)> {
        let n = &self.name;
        let (ch, cin) = (self.ch, self.cin);
        let mut defs = match self.kind {
            RecurrentKind::Mgu => vec![
                (format!("{n}.w_xf"), ch, cin, false),
                (format!("{n}.w_yf"), ch, ch, true),
                (format!("{n}.w_hi"), ch, ch, false),
                (format!("{n}.w_xh"), ch, cin, true),
            ],
            RecurrentKind::Gru => vec![
                (format!("{n}.w_xz"), ch, cin, false),
                (format!("{n}.w_yz"), ch, ch, true),
                (format!("{n}.w_xr"), ch, cin, false),
                (format!("{n}.w_yr"), ch, ch, true),
                (format!("{n}.w_xh"), ch, cin, false),
                (format!("{n}.w_yh"), ch, ch, true),
            ],
            RecurrentKind::MinimalRnn => vec![
                (format!("{n}.w_z"), ch, cin, true),
                (format!("{n}.w_uz"), ch, ch, false),
                (format!("{n}.w_uy"), ch, ch, true),
            ],
        };
        if self.threshold == ThresholdKind::Learned {
            defs.push((format!("{n}.thr_w"), ch, ch, true));
        }
        defs
    }

    pub fn register(&self, ps: &mut ParamSet, rng: &mut ChaCha8Rng) {
        for (w_name, cout, cin, bias) in self.conv_defs() {
            let b_name = bias.then(|| w_name.replace(".w_", ".b_").replace(".thr_w", ".thr_b"));
            ps.insert_conv(rng, &w_name, b_name.as_deref(), cout, cin, REC_K, REC_K);
        }
        let candidate_bias = match self.kind {
            RecurrentKind::Mgu => format!("{}.b_xh", self.name),
            RecurrentKind::Gru => format!("{}.b_yh", self.name),
            RecurrentKind::MinimalRnn => format!("{}.b_z", self.name),
        };
        *ps.get_mut(&candidate_bias) = Tensor::full(&[self.ch], REC_CANDIDATE_BIAS_INIT);
        if self.threshold == ThresholdKind::Learned {
            *ps.get_mut(&format!("{}.thr_b", self.name)) =
                Tensor::full(&[self.ch], THR_BIAS_INIT);
        }
    }

    fn conv(
        &self,
        tape: &mut Tape,
        bp: &BoundParams,
        input: Var,
        w_name: &str,
        bias: bool,
    ) -> Result<Var, ShapeError> {
        let w = bp.var(w_name);
        let b = if bias {
            Some(bp.var(&w_name.replace(".w_", ".b_").replace(".thr_w", ".thr_b")))
        } else {
            None
        };
        tape.conv2d(input, w, b, 1, REC_PAD)
    }

    /// One step. `state` of None means sequence start (all-zero state).
    pub fn forward(
        &self,
        tape: &mut Tape,
        bp: &BoundParams,
        x: Var,
        state: Option<RecState>,
        mut ledger: Option<&mut SOpLedger>,
    ) -> Result<(SparseActivation, RecState), ShapeError> {
        let (n, _, h, w) = tape.value(x).dims4("recurrent input")?;
        let st = match state {
            Some(st) => st,
            None => RecState::zeros(tape, n, self.ch, h, w),
        };
        let count = |tape: &Tape,
                     ledger: &mut Option<&mut SOpLedger>,
                     input: Var,
                     path: SOpPath,
                     dense: bool| {
            record_conv(
                ledger, tape, &self.name, path, input, self.ch, REC_K, 1, REC_PAD, dense,
            );
        };

        let (c, vth): (Var, Option<Var>) = match self.kind {
            RecurrentKind::Mgu => {
                count(tape, &mut ledger, x, SOpPath::Main, true);
                count(tape, &mut ledger, st.y, SOpPath::Main, false);
                let fx = self.conv(tape, bp, x, &format!("{}.w_xf", self.name), false)?;
                let fy = self.conv(tape, bp, st.y, &format!("{}.w_yf", self.name), true)?;
                let f_pre = tape.add(fx, fy)?;
                let f = tape.sigmoid(f_pre);
                let vth = self.threshold_var(tape, bp, st.y, &mut ledger)?;
                let gated = tape.mul(f, st.y)?;
                count(tape, &mut ledger, gated, SOpPath::Main, false);
                count(tape, &mut ledger, x, SOpPath::Main, true);
                let hi = self.conv(tape, bp, gated, &format!("{}.w_hi", self.name), false)?;
                let hx = self.conv(tape, bp, x, &format!("{}.w_xh", self.name), true)?;
                let h_pre = tape.add(hi, hx)?;
                let htil = tape.tanh(h_pre);
                let one_minus_f = tape.affine(f, -1.0, 1.0);
                let keep = tape.mul(one_minus_f, st.c)?;
                let write = tape.mul(f, htil)?;
                let c = tape.add(keep, write)?;
                (c, vth)
            }
            RecurrentKind::Gru => {
                count(tape, &mut ledger, x, SOpPath::Main, true);
                count(tape, &mut ledger, st.y, SOpPath::Main, false);
                let zx = self.conv(tape, bp, x, &format!("{}.w_xz", self.name), false)?;
                let zy = self.conv(tape, bp, st.y, &format!("{}.w_yz", self.name), true)?;
                let z_pre = tape.add(zx, zy)?;
                let z = tape.sigmoid(z_pre);
                count(tape, &mut ledger, x, SOpPath::Main, true);
                count(tape, &mut ledger, st.y, SOpPath::Main, false);
                let rx = self.conv(tape, bp, x, &format!("{}.w_xr", self.name), false)?;
                let ry = self.conv(tape, bp, st.y, &format!("{}.w_yr", self.name), true)?;
                let r_pre = tape.add(rx, ry)?;
                let r = tape.sigmoid(r_pre);
                let vth = self.threshold_var(tape, bp, st.y, &mut ledger)?;
                let gated = tape.mul(r, st.y)?;
                count(tape, &mut ledger, x, SOpPath::Main, true);
                count(tape, &mut ledger, gated, SOpPath::Main, false);
                let hx = self.conv(tape, bp, x, &format!("{}.w_xh", self.name), false)?;
                let hy = self.conv(tape, bp, gated, &format!("{}.w_yh", self.name), true)?;
                let h_pre = tape.add(hx, hy)?;
                let htil = tape.tanh(h_pre);
                let one_minus_z = tape.affine(z, -1.0, 1.0);
                let keep = tape.mul(one_minus_z, st.c)?;
                let write = tape.mul(z, htil)?;
                let c = tape.add(keep, write)?;
                (c, vth)
            }
            RecurrentKind::MinimalRnn => {
                count(tape, &mut ledger, x, SOpPath::Main, true);
                let z_pre = self.conv(tape, bp, x, &format!("{}.w_z", self.name), true)?;
                let z = tape.tanh(z_pre);
                // z is dense (tanh of a conv), so its conv is charged densely
                // like the x path.
                count(tape, &mut ledger, z, SOpPath::Main, true);
                count(tape, &mut ledger, st.y, SOpPath::Main, false);
                let uz = self.conv(tape, bp, z, &format!("{}.w_uz", self.name), false)?;
                let uy = self.conv(tape, bp, st.y, &format!("{}.w_uy", self.name), true)?;
                let u_pre = tape.add(uz, uy)?;
                let u = tape.sigmoid(u_pre);
                let vth = self.threshold_var(tape, bp, st.y, &mut ledger)?;
                let keep = tape.mul(u, st.c)?;
                let one_minus_u = tape.affine(u, -1.0, 1.0);
                let write = tape.mul(one_minus_u, z)?;
                let c = tape.add(keep, write)?;
                (c, vth)
            }
        };

        let (act, c_next) = match (self.threshold, vth) {
            (ThresholdKind::Learned, Some(vth)) => {
                let margin = tape.sub(c, vth)?;
                let mask = tape.step(margin, self.alpha);
                let values = tape.mul(c, mask)?;
                let c_next = soft_reset(tape, c, vth, mask)?;
                (
                    SparseActivation {
                        values,
                        mask,
                        pre: c,
                        vth: Some(vth),
                        density: tape.value(values).density(),
                    },
                    c_next,
                )
            }
            _ => {
                let values = tape.relu(c);
                let mask = tape.step(c, self.alpha);
                (
                    SparseActivation {
                        values,
                        mask,
                        pre: c,
                        vth: None,
                        density: tape.value(values).density(),
                    },
                    c,
                )
            }
        };
        record_output(&mut ledger, tape, &self.name, act.values);
        Ok((act, RecState { c: c_next, y: act.values }))
    }

    fn threshold_var(
        &self,
        tape: &mut Tape,
        bp: &BoundParams,
        y_prev: Var,
        ledger: &mut Option<&mut SOpLedger>,
    ) -> Result<Option<Var>, ShapeError> {
        if self.threshold != ThresholdKind::Learned {
            return Ok(None);
        }
        record_conv(
            ledger,
            tape,
            &self.name,
            SOpPath::Threshold,
            y_prev,
            self.ch,
            REC_K,
            1,
            REC_PAD,
            false,
        );
        let pre = self.conv(tape, bp, y_prev, &format!("{}.thr_w", self.name), true)?;
        Ok(Some(tape.sigmoid(pre)))
    }
}
