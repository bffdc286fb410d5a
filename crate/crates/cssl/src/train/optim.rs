//! Adam-family optimizer and the one-cycle learning-rate schedule.

use crate::params::ParamSet;
use crate::tensor::Tensor;

/// First/second-moment buffers, laid out in the parameter set's insertion
/// order. `t` counts completed steps for bias correction.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        AdamState {
            m: params.tensors().iter().map(|t| vec![0.0; t.len()]).collect(),
            v: params.tensors().iter().map(|t| vec![0.0; t.len()]).collect(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }
}

/// One Adam update with bias correction, in place. `decoupled=false` folds
/// the weight decay into the gradient (classic L2 regularization);
/// `decoupled=true` applies it directly to the parameters after the adaptive
/// update (the AdamW variant).
///
/// `grads` must align with the parameter set's insertion order.
pub fn adam_step(
    params: &mut ParamSet,
    grads: &[Tensor],
    state: &mut AdamState,
    lr: f64,
    betas: (f64, f64),
    eps: f64,
    weight_decay: f64,
    decoupled: bool,
) {
    assert_eq!(grads.len(), params.len(), "gradient list must match parameter set");
    let (b1, b2) = betas;
    state.t += 1;
    let bc1 = 1.0 - b1.powi(state.t as i32);
    let bc2 = 1.0 - b2.powi(state.t as i32);
    for (pi, p) in params.tensors_mut().iter_mut().enumerate() {
        let g = grads[pi].data();
        assert_eq!(g.len(), p.len(), "gradient {pi} shape mismatch");
        let m = &mut state.m[pi];
        let v = &mut state.v[pi];
        for (i, pv) in p.data_mut().iter_mut().enumerate() {
            let mut gi = g[i];
            if !decoupled {
                gi += weight_decay * *pv;
            }
            m[i] = b1 * m[i] + (1.0 - b1) * gi;
            v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            *pv -= lr * m_hat / (v_hat.sqrt() + eps);
            if decoupled {
                *pv -= lr * weight_decay * *pv;
            }
        }
    }
}

/// Euclidean norm over every gradient entry.
pub fn global_grad_norm(grads: &[Tensor]) -> f64 {
    grads
        .iter()
        .flat_map(|t| t.data())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt()
}

/// Scales all gradients down so their global norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = global_grad_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for t in grads.iter_mut() {
            for g in t.data_mut() {
                *g *= scale;
            }
        }
    }
    norm
}

/// One-cycle schedule: cosine warmup from `max_lr / 25` to `max_lr` over the
/// first `pct_warmup` fraction of steps, then cosine annealing down to
/// `max_lr / 1e4`.
pub fn onecycle_lr(step: usize, total_steps: usize, max_lr: f64, pct_warmup: f64) -> f64 {
    assert!(step <= total_steps, "step {step} out of range 0..={total_steps}");
    let start = max_lr / 25.0;
    let end = max_lr / 1e4;
    let warmup = pct_warmup * total_steps as f64;
    let s = step as f64;
    if s < warmup {
        cosine_interp(start, max_lr, s / warmup)
    } else {
        let rest = (total_steps as f64 - warmup).max(f64::MIN_POSITIVE);
        cosine_interp(max_lr, end, ((s - warmup) / rest).min(1.0))
    }
}

/// Cosine interpolation from `a` (t=0) to `b` (t=1). The endpoints return
/// `a` and `b` exactly, and the weight is applied before the difference so
/// the arithmetic stays finite for rates up to f64::MAX.
fn cosine_interp(a: f64, b: f64, t: f64) -> f64 {
    if t <= 0.0 {
        return a;
    }
    if t >= 1.0 {
        return b;
    }
    let w = (1.0 + (std::f64::consts::PI * t).cos()) / 2.0;
    b + (a - b) * w
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(p: f64) -> ParamSet {
        let mut ps = ParamSet::new();
        ps.insert("p", Tensor::scalar(p));
        ps
    }

    const BETAS: (f64, f64) = (0.9, 0.999);
    const EPS: f64 = 1e-8;

    #[test]
    fn zero_gradient_leaves_parameter_unchanged() {
        let mut ps = single(1.25);
        let mut st = AdamState::new(&ps);
        for _ in 0..3 {
            adam_step(&mut ps, &[Tensor::scalar(0.0)], &mut st, 1e-3, BETAS, EPS, 0.0, false);
        }
        assert_eq!(ps.get("p").data()[0], 1.25);
        assert_eq!(st.steps(), 3);
    }

    #[test]
    fn first_step_matches_hand_computed_update() {
        // After one step from zeroed state, the bias corrections cancel the
        // (1 - beta) factors exactly: m_hat = g, v_hat = g^2, so the update
        // is -lr * g / (|g| + eps).
        let (p0, g, lr) = (0.7, 0.3, 1e-2);
        let mut ps = single(p0);
        let mut st = AdamState::new(&ps);
        adam_step(&mut ps, &[Tensor::scalar(g)], &mut st, lr, BETAS, EPS, 0.0, false);
        let m_hat = (1.0 - BETAS.0) * g / (1.0 - BETAS.0);
        let v_hat = (1.0 - BETAS.1) * g * g / (1.0 - BETAS.1);
        let expected = p0 - lr * m_hat / (v_hat.sqrt() + EPS);
        assert_eq!(ps.get("p").data()[0], expected);
        let approx = p0 - lr * g / (g.abs() + EPS);
        assert!((ps.get("p").data()[0] - approx).abs() < 1e-12);
    }

    #[test]
    fn second_step_matches_recurrence() {
        let (p0, g1, g2, lr) = (-0.4, 0.25, -0.1, 5e-3);
        let mut ps = single(p0);
        let mut st = AdamState::new(&ps);
        adam_step(&mut ps, &[Tensor::scalar(g1)], &mut st, lr, BETAS, EPS, 0.0, false);
        adam_step(&mut ps, &[Tensor::scalar(g2)], &mut st, lr, BETAS, EPS, 0.0, false);

        let (b1, b2) = BETAS;
        let mut m = 0.0;
        let mut v = 0.0;
        let mut p = p0;
        for (t, g) in [(1, g1), (2, g2)] {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let m_hat = m / (1.0 - b1.powi(t));
            let v_hat = v / (1.0 - b2.powi(t));
            p -= lr * m_hat / (v_hat.sqrt() + EPS);
        }
        assert_eq!(ps.get("p").data()[0], p);
    }

    #[test]
    fn decoupled_decay_moves_parameter_by_lr_lambda_p_on_zero_gradient() {
        // With zero gradient the adaptive term vanishes (0 / (0 + eps)), so
        // the decoupled variant's whole update is the decay term.
        let (p0, lr, wd) = (2.0, 1e-2, 0.1);
        let mut ps = single(p0);
        let mut st = AdamState::new(&ps);
        adam_step(&mut ps, &[Tensor::scalar(0.0)], &mut st, lr, BETAS, EPS, wd, true);
        assert_eq!(ps.get("p").data()[0], p0 - lr * wd * p0);
    }

    #[test]
    fn coupled_decay_equals_adam_on_shifted_gradient() {
        // Folding the decay into the gradient is the definition of the
        // coupled variant: it must match a plain Adam step whose gradient is
        // g + lambda * p, which differs from the decoupled update above.
        let (p0, lr, wd) = (2.0, 1e-2, 0.1);
        let mut coupled = single(p0);
        let mut st_c = AdamState::new(&coupled);
        adam_step(&mut coupled, &[Tensor::scalar(0.0)], &mut st_c, lr, BETAS, EPS, wd, false);

        let mut plain = single(p0);
        let mut st_p = AdamState::new(&plain);
        adam_step(&mut plain, &[Tensor::scalar(wd * p0)], &mut st_p, lr, BETAS, EPS, 0.0, false);

        assert_eq!(coupled.get("p").data()[0], plain.get("p").data()[0]);
        assert_ne!(coupled.get("p").data()[0], p0 - lr * wd * p0);
    }

    #[test]
    fn clip_rescales_only_when_norm_exceeds_max() {
        let mut grads = vec![Tensor::new(vec![2], vec![3.0, 4.0]).unwrap()];
        let norm = clip_global_norm(&mut grads, 10.0);
        assert_eq!(norm, 5.0);
        assert_eq!(grads[0].data(), &[3.0, 4.0]);
        let norm = clip_global_norm(&mut grads, 1.0);
        assert_eq!(norm, 5.0);
        assert!((grads[0].data()[0] - 0.6).abs() < 1e-15);
        assert!((grads[0].data()[1] - 0.8).abs() < 1e-15);
        assert!((global_grad_norm(&grads) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn onecycle_endpoints_and_peak() {
        let (total, max_lr, pct) = (1000, 3e-4, 0.3);
        assert!((onecycle_lr(0, total, max_lr, pct) - max_lr / 25.0).abs() < 1e-18);
        assert!((onecycle_lr(300, total, max_lr, pct) - max_lr).abs() < 1e-18);
        assert!((onecycle_lr(total, total, max_lr, pct) - max_lr / 1e4).abs() < 1e-18);
    }

    #[test]
    fn onecycle_rises_then_falls() {
        let (total, max_lr, pct) = (400, 1e-3, 0.25);
        let warmup = (pct * total as f64) as usize;
        let mut prev = onecycle_lr(0, total, max_lr, pct);
        for s in 1..=warmup {
            let lr = onecycle_lr(s, total, max_lr, pct);
            assert!(lr > prev, "warmup not increasing at step {s}");
            prev = lr;
        }
        for s in warmup + 1..=total {
            let lr = onecycle_lr(s, total, max_lr, pct);
            assert!(lr < prev, "anneal not decreasing at step {s}");
            prev = lr;
        }
    }

    #[test]
    fn zero_warmup_starts_at_peak() {
        let lr = onecycle_lr(0, 100, 1e-3, 0.0);
        assert_eq!(lr, 1e-3);
    }
}
