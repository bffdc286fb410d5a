//! Finite-difference gradient checks through every block type, run in the
//! smoothed-step mode so the analytic surrogate gradient and the numeric
//! derivative describe the same function.

use cssl::blocks::{CaConv2d, CaConvRec, CaResidual, RecurrentKind, ThresholdKind};
use cssl::gradcheck::finite_difference_check;
use cssl::params::{BoundParams, ParamSet};
use cssl::rng::{rng_from_seed, uniform};
use cssl::tape::StepMode;
use cssl::{Tape, Tensor};

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-6;
const TOL_RECURRENT: f64 = 1e-4;

fn random_tensor(seed: u64, shape: &[usize]) -> Tensor {
    let mut rng = rng_from_seed(seed);
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| uniform(&mut rng, -1.0, 1.0)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn substituted(base: &ParamSet, tensors: &[Tensor]) -> ParamSet {
    let mut ps = base.clone();
    for (dst, src) in ps.tensors_mut().iter_mut().zip(tensors) {
        *dst = src.clone();
    }
    ps
}

/// Runs the model once analytically and once per coordinate numerically,
/// returning the worst relative disagreement.
fn check<M>(ps: &ParamSet, model: M) -> f64
where
    M: Fn(&mut Tape, &BoundParams) -> cssl::tape::Var,
{
    let eval = |tensors: &[Tensor]| -> f64 {
        let ps2 = substituted(ps, tensors);
        let mut tape = Tape::with_mode(StepMode::Smoothed);
        let bp = BoundParams::bind(&mut tape, &ps2);
        let loss = model(&mut tape, &bp);
        tape.value(loss).data()[0]
    };
    let mut tape = Tape::with_mode(StepMode::Smoothed);
    let bp = BoundParams::bind(&mut tape, ps);
    let loss = model(&mut tape, &bp);
    tape.backward(loss).unwrap();
    let analytic: Vec<Tensor> = bp.vars().iter().map(|&v| tape.grad(v)).collect();
    finite_difference_check(eval, ps.tensors(), &analytic, EPS)
}

#[test]
fn ca_conv_gradients_match_finite_differences() {
    let block = CaConv2d::new("c", 2, 3, 3, 1, 1.0, ThresholdKind::Learned);
    let mut ps = ParamSet::new();
    let mut rng = rng_from_seed(21);
    block.register(&mut ps, &mut rng);
    let x_t = random_tensor(22, &[1, 2, 6, 6]);
    let err = check(&ps, |tape, bp| {
        let x = tape.input(x_t.clone());
        let act = block.forward(tape, bp, x, None).unwrap();
        tape.sum(act.values)
    });
    assert!(err < TOL, "worst relative error {err}");
}

#[test]
fn residual_gradients_match_finite_differences() {
    let block = CaResidual::new("Res1", 2, 3, 3, 2, 1.0, ThresholdKind::Learned);
    let mut ps = ParamSet::new();
    let mut rng = rng_from_seed(31);
    block.register(&mut ps, &mut rng);
    let x_t = random_tensor(32, &[1, 2, 6, 6]);
    let err = check(&ps, |tape, bp| {
        let x = tape.input(x_t.clone());
        let act = block.forward(tape, bp, x, None).unwrap();
        tape.sum(act.values)
    });
    assert!(err < TOL, "worst relative error {err}");
}

#[test]
fn relu_baseline_gradients_match_finite_differences() {
    let block = CaResidual::new("Res1", 3, 3, 3, 1, 1.0, ThresholdKind::Relu);
    let mut ps = ParamSet::new();
    let mut rng = rng_from_seed(41);
    block.register(&mut ps, &mut rng);
    let x_t = random_tensor(42, &[1, 3, 5, 5]);
    let err = check(&ps, |tape, bp| {
        let x = tape.input(x_t.clone());
        let act = block.forward(tape, bp, x, None).unwrap();
        tape.sum(act.values)
    });
    assert!(err < TOL, "worst relative error {err}");
}

fn recurrent_two_step_check(kind: RecurrentKind) {
    let block = CaConvRec::new("R", kind, 2, 3, 1.0, ThresholdKind::Learned);
    let mut ps = ParamSet::new();
    let mut rng = rng_from_seed(51);
    block.register(&mut ps, &mut rng);
    let x1_t = random_tensor(52, &[1, 2, 4, 4]);
    let x2_t = random_tensor(53, &[1, 2, 4, 4]);
    let err = check(&ps, |tape, bp| {
        let x1 = tape.input(x1_t.clone());
        let x2 = tape.input(x2_t.clone());
        let (a1, st1) = block.forward(tape, bp, x1, None, None).unwrap();
        let (a2, st2) = block.forward(tape, bp, x2, Some(st1), None).unwrap();
        let s1 = tape.sum(a1.values);
        let s2 = tape.sum(a2.values);
        let sc = tape.sum(st2.c);
        let part = tape.add(s1, s2).unwrap();
        tape.add(part, sc).unwrap()
    });
    assert!(err < TOL_RECURRENT, "{kind:?} worst relative error {err}");
}

#[test]
fn mgu_two_step_gradients_match_finite_differences() {
    recurrent_two_step_check(RecurrentKind::Mgu);
}

#[test]
fn gru_two_step_gradients_match_finite_differences() {
    recurrent_two_step_check(RecurrentKind::Gru);
}

#[test]
fn minimal_rnn_two_step_gradients_match_finite_differences() {
    recurrent_two_step_check(RecurrentKind::MinimalRnn);
}
