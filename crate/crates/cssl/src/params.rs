//! Named parameter storage and tape binding.
//!
//! Parameters live outside any tape as plain tensors. Each training step
//! binds the whole set onto a fresh tape, runs forward/backward, then reads
//! the gradients back out by name. Insertion order is preserved; it defines
//! the (deterministic) iteration order everywhere, including checkpoints
//! and the optimizer state layout.

use crate::rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;

#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn insert(&mut self, name: &str, t: Tensor) {
        assert!(
            !self.names.iter().any(|n| n == name),
            "duplicate parameter name {name}"
        );
        self.names.push(name.to_string());
        self.tensors.push(t);
    }

    /// Kernel with fan-in-scaled uniform init, bias (when named) all zeros.
    pub fn insert_conv(
        &mut self,
        rng: &mut ChaCha8Rng,
        w_name: &str,
        b_name: Option<&str>,
        cout: usize,
        cin: usize,
        kh: usize,
        kw: usize,
    ) {
        let fan_in = (cin * kh * kw) as f64;
        let bound = 1.0 / fan_in.sqrt();
        let n = cout * cin * kh * kw;
        let data: Vec<f64> = (0..n).map(|_| rng::uniform(rng, -bound, bound)).collect();
        self.insert(w_name, Tensor::new(vec![cout, cin, kh, kw], data).unwrap());
        if let Some(b) = b_name {
            self.insert(b, Tensor::zeros(&[cout]));
        }
    }

    pub fn get(&self, name: &str) -> &Tensor {
        let pos = self
            .names
            .iter()
            .position(|n| n == name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        &self.tensors[pos]
    }

    /// Mutable access to one parameter by name. Panics on unknown names.
    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        let pos = self
            .names
            .iter()
            .position(|n| n == name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        &mut self.tensors[pos]
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(|s| s.as_str()).zip(self.tensors.iter())
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

/// Tape handles for every parameter of a [`ParamSet`], bound once per tape.
pub struct BoundParams {
    map: HashMap<String, Var>,
    order: Vec<Var>,
}

impl BoundParams {
    pub fn bind(tape: &mut Tape, params: &ParamSet) -> Self {
        let mut map = HashMap::new();
        let mut order = Vec::new();
        for (name, t) in params.iter() {
            let v = tape.input(t.clone());
            map.insert(name.to_string(), v);
            order.push(v);
        }
        BoundParams { map, order }
    }

    pub fn var(&self, name: &str) -> Var {
        *self
            .map
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} not bound"))
    }

    /// Vars in the param set's insertion order, aligned with
    /// [`ParamSet::tensors`].
    pub fn vars(&self) -> &[Var] {
        &self.order
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn insert_and_bind_preserve_order() {
        let mut rng = rng::rng_from_seed(5);
        let mut ps = ParamSet::new();
        ps.insert_conv(&mut rng, "a.w", Some("a.b"), 2, 3, 3, 3);
        ps.insert_conv(&mut rng, "z.w", None, 1, 1, 1, 1);
        assert_eq!(ps.names(), &["a.w", "a.b", "z.w"]);
        assert_eq!(ps.scalar_count(), 2 * 3 * 9 + 2 + 1);
        assert!(ps.get("a.b").data().iter().all(|v| *v == 0.0));
        let bound = 1.0 / (27f64).sqrt();
        assert!(ps.get("a.w").data().iter().all(|v| v.abs() < bound));
        let mut tape = Tape::new();
        let bp = BoundParams::bind(&mut tape, &ps);
        assert_eq!(bp.vars().len(), 3);
        assert_eq!(tape.value(bp.var("z.w")).shape(), &[1, 1, 1, 1]);
    }

    #[test]
    #[should_panic(expected = "duplicate parameter")]
    fn duplicate_name_panics() {
        let mut ps = ParamSet::new();
        ps.insert("x", Tensor::scalar(1.0));
        ps.insert("x", Tensor::scalar(2.0));
    }
}
