//! Flat parameter vectors with a named tensor layout.

use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::real::Real;
use crate::tape::{Grads, Tape, Var};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> core::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Ordered list of tensors packed into one flat vector.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    tensors: Vec<TensorSpec>,
    len: usize,
}

impl Layout {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a tensor and returns its index in the layout.
    pub fn push(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> usize {
        self.tensors.push(TensorSpec {
            name: name.into(),
            rows,
            cols,
            offset: self.len,
        });
        self.len += rows * cols;
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn tensors(&self) -> &[TensorSpec] {
        &self.tensors
    }

    pub fn tensor(&self, idx: usize) -> &TensorSpec {
        &self.tensors[idx]
    }

    pub fn find(&self, name: &str) -> Option<&TensorSpec> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Binds `data` as differentiable leaves, one per tensor.
    pub fn bind<S: Real>(&self, tape: &mut Tape<S>, data: &[S]) -> Vec<Var> {
        assert_eq!(data.len(), self.len, "parameter vector length mismatch");
        self.tensors
            .iter()
            .map(|t| tape.leaf(t.rows, t.cols, data[t.range()].to_vec()))
            .collect()
    }

    pub fn bind_f64<S: Real>(&self, tape: &mut Tape<S>, data: &[f64]) -> Vec<Var> {
        let d: Vec<S> = data.iter().map(|&x| S::from_f64(x)).collect();
        self.bind(tape, &d)
    }

    /// Binds `data` as constants (no gradient).
    pub fn bind_const<S: Real>(&self, tape: &mut Tape<S>, data: &[f64]) -> Vec<Var> {
        assert_eq!(data.len(), self.len, "parameter vector length mismatch");
        self.tensors
            .iter()
            .map(|t| tape.constant_f64(t.rows, t.cols, &data[t.range()]))
            .collect()
    }

    /// Gathers the gradients of bound leaves back into a flat vector.
    pub fn collect<S: Real>(&self, grads: &Grads<S>, vars: &[Var]) -> Vec<S> {
        let mut out = Vec::with_capacity(self.len);
        for v in vars {
            out.extend(grads.get_or_zero(*v));
        }
        out
    }
}

/// Uniform `[-scale, scale]` initializer.
pub fn uniform_init<R: Rng + ?Sized>(rng: &mut R, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| (rng.random::<f64>() * 2.0 - 1.0) * scale)
        .collect()
}

pub fn l2_norm(v: &[f64]) -> f64 {
    libm::sqrt(v.iter().map(|x| x * x).sum::<f64>())
}

pub fn all_finite(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// Scales `g` in place so that its L2 norm is at most `max_norm`; returns
/// the norm before clipping. `max_norm <= 0` disables clipping.
pub fn clip_grad_norm(g: &mut [f64], max_norm: f64) -> f64 {
    let n = l2_norm(g);
    if max_norm > 0.0 && n > max_norm {
        let s = max_norm / (n + 1e-6);
        for x in g.iter_mut() {
            *x *= s;
        }
    }
    n
}

/// Polyak averaging `target ← (1 − τ)·target + τ·source`.
pub fn polyak(target: &mut [f64], source: &[f64], tau: f64) {
    for (t, s) in target.iter_mut().zip(source) {
        *t = (1.0 - tau) * *t + tau * s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_offsets_are_contiguous() {
        let mut l = Layout::new();
        l.push("w", 2, 3);
        l.push("b", 1, 3);
        assert_eq!(l.len(), 9);
        assert_eq!(l.tensor(1).offset, 6);
        assert_eq!(l.find("b").unwrap().range(), 6..9);
    }

    #[test]
    fn bind_and_collect_round_trip_gradients() {
        let mut l = Layout::new();
        l.push("a", 1, 2);
        l.push("b", 2, 1);
        let data = [1.0, 2.0, 3.0, 4.0];
        let mut t = Tape::<f64>::new();
        let vars = l.bind_f64(&mut t, &data);
        let p = t.matmul(vars[0], vars[1]);
        let g = t.backward(p);
        assert_eq!(l.collect(&g, &vars), vec![3.0, 4.0, 1.0, 2.0]);
    }

    #[test]
    fn clipping_caps_norm() {
        let mut g = [3.0, 4.0];
        let n = clip_grad_norm(&mut g, 1.0);
        assert_eq!(n, 5.0);
        assert!((l2_norm(&g) - 1.0).abs() < 1e-5);
        let mut h = [0.3, 0.4];
        clip_grad_norm(&mut h, 1.0);
        assert_eq!(h, [0.3, 0.4]);
    }
}
