//! Dense networks and first-order optimizers over flat parameter vectors.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::params::{uniform_init, Layout};
use crate::real::Real;
use crate::tape::{Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    Tanh,
}

/// Fully connected network; hidden layers use `act`, the output layer is linear.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    sizes: Vec<usize>,
    act: Activation,
    layout: Layout,
}

impl Mlp {
    pub fn new(input: usize, hidden: &[usize], output: usize, act: Activation) -> Self {
        let mut sizes = vec![input];
        sizes.extend_from_slice(hidden);
        sizes.push(output);
        let mut layout = Layout::new();
        for (i, w) in sizes.windows(2).enumerate() {
            layout.push(format!("w{i}"), w[0], w[1]);
            layout.push(format!("b{i}"), 1, w[1]);
        }
        Self { sizes, act, layout }
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    /// PyTorch-style fan-in uniform init; the output layer is scaled by `out_scale`.
    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R, out_scale: f64) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.layout.len());
        let layers = self.sizes.len() - 1;
        for (i, w) in self.sizes.windows(2).enumerate() {
            let mut bound = 1.0 / libm::sqrt(w[0] as f64);
            if i + 1 == layers {
                bound *= out_scale;
            }
            p.extend(uniform_init(rng, w[0] * w[1], bound));
            p.extend(uniform_init(rng, w[1], bound));
        }
        p
    }

    /// Batched forward pass, `x` is batch×input.
    pub fn forward<S: Real>(&self, tape: &mut Tape<S>, params: &[Var], x: Var) -> Var {
        let layers = self.sizes.len() - 1;
        let mut h = x;
        for i in 0..layers {
            h = tape.affine(h, params[2 * i], params[2 * i + 1]);
            if i + 1 < layers {
                h = match self.act {
                    Activation::Relu => tape.relu(h),
                    Activation::Tanh => tape.tanh(h),
                };
            }
        }
        h
    }

    /// Single-sample forward pass without a tape.
    pub fn eval(&self, params: &[f64], x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.sizes[0], "mlp input dimension mismatch");
        let layers = self.sizes.len() - 1;
        let mut h = x.to_vec();
        for i in 0..layers {
            let w = &params[self.layout.tensor(2 * i).range()];
            let b = &params[self.layout.tensor(2 * i + 1).range()];
            let (n_in, n_out) = (self.sizes[i], self.sizes[i + 1]);
            let mut out = b.to_vec();
            for (p, &hp) in h.iter().enumerate().take(n_in) {
                if hp == 0.0 {
                    continue;
                }
                let row = &w[p * n_out..(p + 1) * n_out];
                for (o, &wv) in out.iter_mut().zip(row) {
                    *o += hp * wv;
                }
            }
            if i + 1 < layers {
                for o in out.iter_mut() {
                    *o = match self.act {
                        Activation::Relu => o.max(0.0),
                        Activation::Tanh => libm::tanh(*o),
                    };
                }
            }
            h = out;
        }
        h
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 2.5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub cfg: AdamConfig,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl Adam {
    pub fn new(cfg: AdamConfig, n: usize) -> Self {
        Self {
            cfg,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.cfg;
        let bc1 = 1.0 - libm::pow(beta1, self.t as f64);
        let bc2 = 1.0 - libm::pow(beta2, self.t as f64);
        for i in 0..params.len() {
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * grad[i];
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * grad[i] * grad[i];
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            params[i] -= lr * mh / (libm::sqrt(vh) + eps);
        }
    }
}

/// Optimizer used for differentiable inner steps. Both variants are
/// elementwise, so the Jacobian of the update with respect to the gradient
/// is diagonal and exposed by [`InnerOptimizer::step_jacobian_diag`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum InnerOptimizer {
    Sgd { lr: f64 },
    Adam(Adam),
}

impl InnerOptimizer {
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        match self {
            InnerOptimizer::Sgd { lr } => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p -= *lr * g;
                }
            }
            InnerOptimizer::Adam(a) => a.step(params, grad),
        }
    }

    pub fn set_lr(&mut self, new_lr: f64) {
        match self {
            InnerOptimizer::Sgd { lr } => *lr = new_lr,
            InnerOptimizer::Adam(a) => a.cfg.lr = new_lr,
        }
    }

    /// `∂ params'_i / ∂ grad_i` of the next call to `step` given the
    /// current optimizer state.
    pub fn step_jacobian_diag(&self, grad: &[f64]) -> Vec<f64> {
        match self {
            InnerOptimizer::Sgd { lr } => vec![-lr; grad.len()],
            InnerOptimizer::Adam(a) => {
                let AdamConfig {
                    lr,
                    beta1,
                    beta2,
                    eps,
                } = a.cfg;
                let t = (a.t + 1) as f64;
                let bc1 = 1.0 - libm::pow(beta1, t);
                let bc2 = 1.0 - libm::pow(beta2, t);
                grad.iter()
                    .enumerate()
                    .map(|(i, &g)| {
                        let m = beta1 * a.m[i] + (1.0 - beta1) * g;
                        let v = beta2 * a.v[i] + (1.0 - beta2) * g * g;
                        let mh = m / bc1;
                        let sv = libm::sqrt(v / bc2);
                        let den = sv + eps;
                        let dm = (1.0 - beta1) / bc1;
                        let dsv = if sv > 0.0 {
                            (1.0 - beta2) * g / (bc2 * sv)
                        } else {
                            0.0
                        };
                        -lr * (dm / den - mh * dsv / (den * den))
                    })
                    .collect()
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn eval_matches_tape_forward() {
        let net = Mlp::new(3, &[5, 4], 2, Activation::Relu);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = net.init(&mut rng, 1.0);
        let x = [0.2, -0.5, 0.9];
        let mut t = Tape::<f64>::new();
        let vars = net.layout().bind_f64(&mut t, &p);
        let xv = t.constant_f64(1, 3, &x);
        let out = net.forward(&mut t, &vars, xv);
        let a = t.values_f64(out);
        let b = net.eval(&p, &x);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn parameter_count() {
        let net = Mlp::new(4, &[8], 2, Activation::Tanh);
        assert_eq!(net.layout().len(), 4 * 8 + 8 + 8 * 2 + 2);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut a = Adam::new(AdamConfig::default(), 2);
        let mut p = [1.0, 1.0];
        a.step(&mut p, &[0.5, -2.0]);
        assert!((p[0] - (1.0 - 2.5e-4)).abs() < 1e-9);
        assert!((p[1] - (1.0 + 2.5e-4)).abs() < 1e-9);
    }

    #[test]
    fn step_jacobian_matches_finite_differences() {
        let mut adam = Adam::new(
            AdamConfig {
                lr: 0.01,
                ..Default::default()
            },
            3,
        );
        let mut warm = [0.0; 3];
        adam.step(&mut warm, &[0.3, -0.1, 0.2]);
        adam.step(&mut warm, &[0.1, 0.4, -0.2]);
        for opt in [InnerOptimizer::Sgd { lr: 0.1 }, InnerOptimizer::Adam(adam)] {
            let g = [0.25, -0.05, 0.7];
            let jac = opt.step_jacobian_diag(&g);
            let h = 1e-7;
            for i in 0..3 {
                let run = |gi: f64| {
                    let mut o = opt.clone();
                    let mut p = [0.0; 3];
                    let mut gg = g;
                    gg[i] = gi;
                    o.step(&mut p, &gg);
                    p[i]
                };
                let fd = (run(g[i] + h) - run(g[i] - h)) / (2.0 * h);
                assert!((fd - jac[i]).abs() < 1e-6 * (1.0 + fd.abs()), "{fd} vs {}", jac[i]);
            }
        }
    }
}
