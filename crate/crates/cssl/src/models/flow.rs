//! Dense optical-flow regression: a sparse context-aware encoder, a
//! recurrent bottleneck that integrates motion over time, and a small
//! dense decoder back to full resolution with a 2-channel flow output.

use super::backbone::ModelError;
use crate::blocks::{
    CaConv2d, CaConvRec, CaResidual, PlainConv, RecState, RecurrentKind, ThresholdKind,
};
use crate::params::{BoundParams, ParamSet};
use crate::sop::SOpLedger;
use crate::tape::{Tape, Var};
use crate::tensor::ShapeError;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct FlowSpec {
    pub cin: usize,
    pub enc1: usize,
    pub enc2: usize,
    pub res: usize,
    pub rec: usize,
    pub dec1: usize,
    pub alpha: f64,
    pub threshold: ThresholdKind,
    pub recurrent: RecurrentKind,
}

impl FlowSpec {
    pub fn desk(recurrent: RecurrentKind, threshold: ThresholdKind) -> Self {
        FlowSpec {
            cin: 2,
            enc1: 8,
            enc2: 16,
            res: 16,
            rec: 16,
            dec1: 8,
            alpha: 1.0,
            threshold,
            recurrent,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        for (what, v) in [
            ("cin", self.cin),
            ("enc1", self.enc1),
            ("enc2", self.enc2),
            ("res", self.res),
            ("rec", self.rec),
            ("dec1", self.dec1),
        ] {
            if v == 0 {
                return Err(ModelError::BadSpec(format!("flow channel '{what}' is zero")));
            }
        }
        Ok(())
    }

    pub fn to_arch_lines(&self) -> Vec<String> {
        vec![
            format!("cin {}", self.cin),
            format!("enc1 {}", self.enc1),
            format!("enc2 {}", self.enc2),
            format!("res {}", self.res),
            format!("rec {}", self.rec),
            format!("dec1 {}", self.dec1),
            format!("alpha {}", self.alpha),
            format!(
                "threshold {}",
                match self.threshold {
                    ThresholdKind::Learned => "learned",
                    ThresholdKind::Relu => "relu",
                }
            ),
            format!("recurrent {}", self.recurrent.as_str()),
        ]
    }

    pub fn from_arch_lines(lines: &[String]) -> Result<Self, ModelError> {
        let bad = |what: String| ModelError::BadSpec(what);
        let mut spec = FlowSpec::desk(RecurrentKind::Mgu, ThresholdKind::Learned);
        for line in lines {
            let mut parts = line.split_whitespace();
            let key = parts.next().unwrap_or("");
            let val = parts.next().unwrap_or("");
            match key {
                "cin" | "enc1" | "enc2" | "res" | "rec" | "dec1" => {
                    let v: usize =
                        val.parse().map_err(|_| bad(format!("bad number in '{line}'")))?;
                    match key {
                        "cin" => spec.cin = v,
                        "enc1" => spec.enc1 = v,
                        "enc2" => spec.enc2 = v,
                        "res" => spec.res = v,
                        "rec" => spec.rec = v,
                        _ => spec.dec1 = v,
                    }
                }
                "alpha" => {
                    spec.alpha =
                        val.parse().map_err(|_| bad(format!("bad alpha in '{line}'")))?
                }
                "threshold" => {
                    spec.threshold = match val {
                        "learned" => ThresholdKind::Learned,
                        "relu" => ThresholdKind::Relu,
                        _ => return Err(bad(format!("bad threshold '{val}'"))),
                    }
                }
                "recurrent" => {
                    spec.recurrent = RecurrentKind::parse(val)
                        .ok_or_else(|| bad(format!("bad recurrent kind '{val}'")))?
                }
                _ => return Err(bad(format!("unknown arch line '{line}'"))),
            }
        }
        spec.validate()?;
        Ok(spec)
    }
}

/// Total downsampling of the encoder; input dims must divide by it so the
/// decoder lands back on the input resolution.
pub const FLOW_STRIDE: usize = 4;

pub struct FlowModel {
    pub spec: FlowSpec,
    enc1: CaConv2d,
    enc2: CaConv2d,
    res: CaResidual,
    rec: CaConvRec,
    dec1: PlainConv,
    dec2: PlainConv,
}

impl FlowModel {
    pub fn new(spec: FlowSpec) -> Result<Self, ModelError> {
        spec.validate()?;
        let th = spec.threshold;
        Ok(FlowModel {
            enc1: CaConv2d::new("Enc1", spec.cin, spec.enc1, 3, 2, spec.alpha, th),
            enc2: CaConv2d::new("Enc2", spec.enc1, spec.enc2, 3, 2, spec.alpha, th),
            res: CaResidual::new("Res1", spec.enc2, spec.res, 3, 1, spec.alpha, th),
            rec: CaConvRec::new("Recurrent1", spec.recurrent, spec.res, spec.rec, spec.alpha, th),
            dec1: PlainConv::new("Dec1", spec.rec, spec.dec1, 3, 1, true),
            dec2: PlainConv::new("Dec2", spec.dec1, 2, 3, 1, true),
            spec,
        })
    }

    pub fn register(&self, ps: &mut ParamSet, rng: &mut ChaCha8Rng) {
        self.enc1.register(ps, rng);
        self.enc2.register(ps, rng);
        self.res.register(ps, rng);
        self.rec.register(ps, rng);
        self.dec1.register(ps, rng);
        self.dec2.register(ps, rng);
    }

    /// One step: returns the full-resolution flow [N, 2, H, W] and the
    /// sparse block outputs for the sparsity penalty.
    pub fn forward_step(
        &self,
        tape: &mut Tape,
        bp: &BoundParams,
        x: Var,
        state: &mut Option<RecState>,
        mut ledger: Option<&mut SOpLedger>,
    ) -> Result<(Var, Vec<Var>), ShapeError> {
        let (_, _, h, w) = tape.value(x).dims4("flow input")?;
        if h % FLOW_STRIDE != 0 || w % FLOW_STRIDE != 0 {
            return Err(ShapeError::Invalid {
                op: "flow forward",
                what: format!("input {h}x{w} not divisible by the total stride {FLOW_STRIDE}"),
            });
        }
        let e1 = self.enc1.forward(tape, bp, x, ledger.as_deref_mut())?;
        let e2 = self.enc2.forward(tape, bp, e1.values, ledger.as_deref_mut())?;
        let r = self.res.forward(tape, bp, e2.values, ledger.as_deref_mut())?;
        let (ra, st) = self.rec.forward(tape, bp, r.values, *state, ledger.as_deref_mut())?;
        *state = Some(st);
        let u1 = tape.upsample2(ra.values)?;
        let d1 = self.dec1.forward(tape, bp, u1, ledger.as_deref_mut())?;
        let d1 = tape.relu(d1);
        let u2 = tape.upsample2(d1)?;
        let flow = self.dec2.forward(tape, bp, u2, ledger)?;
        Ok((flow, vec![e1.values, e2.values, r.values, ra.values]))
    }
}
