//! Backbone assembly: an ordered stack of context-aware blocks with a
//! validated channel chain and named layers for the operation ledger.

use crate::blocks::{
    CaConv2d, CaConvRec, CaResidual, RecState, RecurrentKind, SparseActivation, ThresholdKind,
};
use crate::params::{BoundParams, ParamSet};
use crate::sop::SOpLedger;
use crate::tape::{Tape, Var};
use crate::tensor::ShapeError;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model spec: {0}")]
    BadSpec(String),
    #[error(transparent)]
    Shape(#[from] ShapeError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    CaConv,
    CaResidual,
    CaConvRec,
}

impl LayerKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            LayerKind::CaConv => "ca_conv",
            LayerKind::CaResidual => "ca_residual",
            LayerKind::CaConvRec => "ca_convrec",
        }
    }

    pub fn parse(s: &str) -> Option<LayerKind> {
        match s {
            "ca_conv" => Some(LayerKind::CaConv),
            "ca_residual" => Some(LayerKind::CaResidual),
            "ca_convrec" => Some(LayerKind::CaConvRec),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub rec: Option<RecurrentKind>,
    pub cin: usize,
    pub cout: usize,
    pub stride: usize,
}

/// Declarative description of a backbone. The standard pattern is one
/// context-aware conv, three residual blocks, then three recurrent blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneSpec {
    pub cin: usize,
    pub layers: Vec<LayerSpec>,
    pub ksize: usize,
    pub alpha: f64,
    pub threshold: ThresholdKind,
}

/// Desk-scale default output channels for the 7-layer pattern.
pub const DESK_CHANNELS: [usize; 7] = [8, 16, 16, 32, 64, 64, 64];
/// Desk-scale strides giving a total stride of 8 (recurrent layers never
/// change resolution).
pub const DESK_STRIDES: [usize; 7] = [2, 2, 1, 2, 1, 1, 1];

impl BackboneSpec {
    /// The 1 conv + 3 residual + 3 recurrent pattern at arbitrary widths.
    pub fn with_pattern(
        cin: usize,
        channels: &[usize; 7],
        strides: &[usize; 7],
        rec: RecurrentKind,
        alpha: f64,
        threshold: ThresholdKind,
    ) -> Self {
        let kinds = [
            LayerKind::CaConv,
            LayerKind::CaResidual,
            LayerKind::CaResidual,
            LayerKind::CaResidual,
            LayerKind::CaConvRec,
            LayerKind::CaConvRec,
            LayerKind::CaConvRec,
        ];
        let mut prev = cin;
        let mut layers = Vec::with_capacity(7);
        for i in 0..7 {
            layers.push(LayerSpec {
                kind: kinds[i],
                rec: (kinds[i] == LayerKind::CaConvRec).then_some(rec),
                cin: prev,
                cout: channels[i],
                stride: strides[i],
            });
            prev = channels[i];
        }
        BackboneSpec { cin, layers, ksize: 3, alpha, threshold }
    }

    pub fn desk(rec: RecurrentKind, threshold: ThresholdKind) -> Self {
        Self::with_pattern(2, &DESK_CHANNELS, &DESK_STRIDES, rec, 1.0, threshold)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.layers.is_empty() {
            return Err(ModelError::BadSpec("backbone has no layers".into()));
        }
        if self.ksize == 0 || self.ksize % 2 == 0 {
            return Err(ModelError::BadSpec(format!(
                "kernel size {} must be odd and positive",
                self.ksize
            )));
        }
        let mut prev = self.cin;
        for (i, l) in self.layers.iter().enumerate() {
            if l.cin != prev {
                return Err(ModelError::BadSpec(format!(
                    "layer {i} expects {} input channels but the chain provides {prev}",
                    l.cin
                )));
            }
            if l.cout == 0 || l.stride == 0 {
                return Err(ModelError::BadSpec(format!(
                    "layer {i} has zero channels or stride"
                )));
            }
            match l.kind {
                LayerKind::CaConvRec => {
                    if l.rec.is_none() {
                        return Err(ModelError::BadSpec(format!(
                            "recurrent layer {i} is missing its unit kind"
                        )));
                    }
                    if l.stride != 1 {
                        return Err(ModelError::BadSpec(format!(
                            "recurrent layer {i} must keep stride 1"
                        )));
                    }
                }
                _ => {
                    if l.rec.is_some() {
                        return Err(ModelError::BadSpec(format!(
                            "non-recurrent layer {i} carries a recurrent kind"
                        )));
                    }
                }
            }
            prev = l.cout;
        }
        Ok(())
    }

    pub fn out_channels(&self) -> usize {
        self.layers.last().map(|l| l.cout).unwrap_or(self.cin)
    }

    pub fn total_stride(&self) -> usize {
        self.layers.iter().map(|l| l.stride).product()
    }

    pub fn n_recurrent(&self) -> usize {
        self.layers.iter().filter(|l| l.kind == LayerKind::CaConvRec).count()
    }

    /// One `layer<i> <kind> <cin> <cout> <stride> [<rec>]` line per layer,
    /// plus the shared fields; the checkpoint stores these verbatim.
    pub fn to_arch_lines(&self) -> Vec<String> {
        let mut out = vec![
            format!("cin {}", self.cin),
            format!("ksize {}", self.ksize),
            format!("alpha {}", self.alpha),
            format!(
                "threshold {}",
                match self.threshold {
                    ThresholdKind::Learned => "learned",
                    ThresholdKind::Relu => "relu",
                }
            ),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            let mut line = format!(
                "layer{i} {} {} {} {}",
                l.kind.as_str(),
                l.cin,
                l.cout,
                l.stride
            );
            if let Some(r) = l.rec {
                line.push(' ');
                line.push_str(r.as_str());
            }
            out.push(line);
        }
        out
    }

    pub fn from_arch_lines(lines: &[String]) -> Result<Self, ModelError> {
        let bad = |what: String| ModelError::BadSpec(what);
        let mut cin = None;
        let mut ksize = 3usize;
        let mut alpha = 1.0f64;
        let mut threshold = ThresholdKind::Learned;
        let mut layers: Vec<(usize, LayerSpec)> = Vec::new();
        for line in lines {
            let mut parts = line.split_whitespace();
            let key = parts.next().unwrap_or("");
            let rest: Vec<&str> = parts.collect();
            match key {
                "cin" => {
                    cin = Some(
                        rest.first()
                            .and_then(|v| v.parse().ok())
                            .ok_or_else(|| bad(format!("bad cin line '{line}'")))?,
                    )
                }
                "ksize" => {
                    ksize = rest
                        .first()
                        .and_then(|v| v.parse().ok())
                        .ok_or_else(|| bad(format!("bad ksize line '{line}'")))?
                }
                "alpha" => {
                    alpha = rest
                        .first()
                        .and_then(|v| v.parse().ok())
                        .ok_or_else(|| bad(format!("bad alpha line '{line}'")))?
                }
                "threshold" => {
                    threshold = match rest.first().copied() {
                        Some("learned") => ThresholdKind::Learned,
                        Some("relu") => ThresholdKind::Relu,
                        _ => return Err(bad(format!("bad threshold line '{line}'"))),
                    }
                }
                k if k.starts_with("layer") => {
                    let idx: usize = k[5..]
                        .parse()
                        .map_err(|_| bad(format!("bad layer index in '{line}'")))?;
                    if rest.len() < 4 {
                        return Err(bad(format!("layer line too short: '{line}'")));
                    }
                    let kind = LayerKind::parse(rest[0])
                        .ok_or_else(|| bad(format!("unknown layer kind '{}'", rest[0])))?;
                    let nums: Vec<usize> = rest[1..4]
                        .iter()
                        .map(|v| v.parse())
                        .collect::<Result<_, _>>()
                        .map_err(|_| bad(format!("bad layer numbers in '{line}'")))?;
                    let rec = match rest.get(4) {
                        Some(r) => Some(
                            RecurrentKind::parse(r)
                                .ok_or_else(|| bad(format!("unknown recurrent kind '{r}'")))?,
                        ),
                        None => None,
                    };
                    layers.push((
                        idx,
                        LayerSpec { kind, rec, cin: nums[0], cout: nums[1], stride: nums[2] },
                    ));
                }
                _ => return Err(bad(format!("unknown arch line '{line}'"))),
            }
        }
        layers.sort_by_key(|(i, _)| *i);
        let spec = BackboneSpec {
            cin: cin.ok_or_else(|| bad("missing cin".into()))?,
            layers: layers.into_iter().map(|(_, l)| l).collect(),
            ksize,
            alpha,
            threshold,
        };
        spec.validate()?;
        Ok(spec)
    }
}

enum Block {
    Conv(CaConv2d),
    Res(CaResidual),
    Rec(CaConvRec),
}

/// A built backbone: named block instances ready to register parameters and
/// run steps. Recurrent state lives outside the model, one slot per
/// recurrent layer, so sequences can be reset by clearing the state vector.
pub struct Backbone {
    pub spec: BackboneSpec,
    blocks: Vec<Block>,
    names: Vec<String>,
}

impl Backbone {
    pub fn new(spec: BackboneSpec) -> Result<Self, ModelError> {
        spec.validate()?;
        let mut blocks = Vec::with_capacity(spec.layers.len());
        let mut names = Vec::with_capacity(spec.layers.len());
        let (mut n_conv, mut n_res, mut n_rec) = (0, 0, 0);
        for l in &spec.layers {
            match l.kind {
                LayerKind::CaConv => {
                    n_conv += 1;
                    let name = format!("Conv{n_conv}");
                    blocks.push(Block::Conv(CaConv2d::new(
                        &name,
                        l.cin,
                        l.cout,
                        spec.ksize,
                        l.stride,
                        spec.alpha,
                        spec.threshold,
                    )));
                    names.push(name);
                }
                LayerKind::CaResidual => {
                    n_res += 1;
                    let name = format!("Res{n_res}");
                    blocks.push(Block::Res(CaResidual::new(
                        &name,
                        l.cin,
                        l.cout,
                        spec.ksize,
                        l.stride,
                        spec.alpha,
                        spec.threshold,
                    )));
                    names.push(name);
                }
                LayerKind::CaConvRec => {
                    n_rec += 1;
                    let name = format!("Recurrent{n_rec}");
                    blocks.push(Block::Rec(CaConvRec::new(
                        &name,
                        l.rec.unwrap(),
                        l.cin,
                        l.cout,
                        spec.alpha,
                        spec.threshold,
                    )));
                    names.push(name);
                }
            }
        }
        Ok(Backbone { spec, blocks, names })
    }

    pub fn register(&self, ps: &mut ParamSet, rng: &mut ChaCha8Rng) {
        for b in &self.blocks {
            match b {
                Block::Conv(c) => c.register(ps, rng),
                Block::Res(r) => r.register(ps, rng),
                Block::Rec(r) => r.register(ps, rng),
            }
        }
    }

    pub fn layer_names(&self) -> &[String] {
        &self.names
    }

    /// One time step. `states` holds one slot per recurrent layer and is
    /// created on first use; clear it to start a new sequence. Returns the
    /// final activation and every block's emitted values (the tensors the
    /// sparsity penalty sums over).
    pub fn forward_step(
        &self,
        tape: &mut Tape,
        bp: &BoundParams,
        x: Var,
        states: &mut Vec<Option<RecState>>,
        mut ledger: Option<&mut SOpLedger>,
    ) -> Result<(SparseActivation, Vec<Var>), ShapeError> {
        if states.is_empty() {
            states.resize(self.spec.n_recurrent(), None);
        }
        let mut cur = x;
        let mut outputs = Vec::with_capacity(self.blocks.len());
        let mut act = None;
        let mut rec_idx = 0;
        for b in &self.blocks {
            let a = match b {
                Block::Conv(c) => c.forward(tape, bp, cur, ledger.as_deref_mut())?,
                Block::Res(r) => r.forward(tape, bp, cur, ledger.as_deref_mut())?,
                Block::Rec(r) => {
                    let (a, st) =
                        r.forward(tape, bp, cur, states[rec_idx], ledger.as_deref_mut())?;
                    states[rec_idx] = Some(st);
                    rec_idx += 1;
                    a
                }
            };
            cur = a.values;
            outputs.push(a.values);
            act = Some(a);
        }
        Ok((act.expect("validated spec has layers"), outputs))
    }
}
