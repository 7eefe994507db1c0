//! Abstract-curriculum memory.
//!
//! A K×M matrix written once per outer episode by the hyper-network with an
//! erase/add rule and read by the agent through cosine attention. The agent
//! only ever sees the read vector `c_abs`; writing requires `&mut
//! MemoryMatrix`, which only the trainer holds.

use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::params::uniform_init;
use crate::real::Real;
use crate::tape::{Tape, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    /// Add vector of the most recent write; keys the next read.
    m_a_prev: Vec<f64>,
    #[serde(default)]
    writes: u64,
}

/// Attention weights over memory rows.
#[derive(Clone, Debug, PartialEq)]
pub struct Attention {
    pub alpha: Vec<f64>,
}

impl Attention {
    pub fn uniform(k: usize) -> Self {
        Self {
            alpha: alloc::vec![1.0 / k as f64; k],
        }
    }
}

impl MemoryMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::from_data(rows, cols, alloc::vec![0.0; rows * cols])
    }

    /// Entries uniform in `[-0.01, 0.01]`.
    pub fn init<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Self {
        Self::from_data(rows, cols, uniform_init(rng, rows * cols, 0.01))
    }

    pub fn from_data(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert!(rows > 0 && cols > 0, "memory must have at least one row and column");
        assert_eq!(data.len(), rows * cols, "memory data length mismatch");
        Self {
            rows,
            cols,
            data,
            m_a_prev: alloc::vec![0.0; cols],
            writes: 0,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, k: usize) -> &[f64] {
        &self.data[k * self.cols..(k + 1) * self.cols]
    }

    pub fn m_a_prev(&self) -> &[f64] {
        &self.m_a_prev
    }

    pub fn set_m_a_prev(&mut self, m_a: Vec<f64>) {
        assert_eq!(m_a.len(), self.cols);
        self.m_a_prev = m_a;
    }

    /// Number of writes applied since construction.
    pub fn writes(&self) -> u64 {
        self.writes
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Softmax of cosine scores between each row and `key`.
    pub fn attend(&self, key: &[f64]) -> Attention {
        let mut t = Tape::<f64>::new();
        let m = t.constant_f64(self.rows, self.cols, &self.data);
        let k = t.constant_f64(1, self.cols, key);
        let a = attend_tape(&mut t, m, k);
        Attention {
            alpha: t.values_f64(a),
        }
    }

    /// `c_abs = αᵀ M` with α keyed by the stored add vector.
    pub fn read(&self) -> Vec<f64> {
        let alpha = self.attend(&self.m_a_prev);
        self.read_with(&alpha)
    }

    pub fn read_with(&self, alpha: &Attention) -> Vec<f64> {
        assert_eq!(alpha.alpha.len(), self.rows);
        let mut out = alloc::vec![0.0; self.cols];
        for (k, &a) in alpha.alpha.iter().enumerate() {
            for (o, &x) in out.iter_mut().zip(self.row(k)) {
                *o += a * x;
            }
        }
        out
    }

    /// Erase/add write with attention keyed by the new add vector. Stores
    /// `m_a` for the next read.
    pub fn write(&mut self, m_e: &[f64], m_a: &[f64]) -> Attention {
        let alpha = self.attend(m_a);
        self.write_with(&alpha, m_e, m_a);
        alpha
    }

    /// `M'_{kj} = M_{kj}·(1 − α_k·m_e_j) + α_k·m_a_j`.
    pub fn write_with(&mut self, alpha: &Attention, m_e: &[f64], m_a: &[f64]) {
        assert_eq!(alpha.alpha.len(), self.rows);
        assert_eq!(m_e.len(), self.cols);
        assert_eq!(m_a.len(), self.cols);
        for k in 0..self.rows {
            let a = alpha.alpha[k];
            for j in 0..self.cols {
                let x = &mut self.data[k * self.cols + j];
                *x = *x * (1.0 - a * m_e[j]) + a * m_a[j];
            }
        }
        self.m_a_prev = m_a.to_vec();
        self.writes += 1;
    }
}

/// Attention column (K×1) of memory `m` (K×M) against `key` (1×M).
pub fn attend_tape<S: Real>(tape: &mut Tape<S>, m: Var, key: Var) -> Var {
    let scores = tape.cosine_rows(m, key);
    tape.softmax(scores)
}

/// Read vector (1×M) from attention `alpha` (K×1) and memory `m` (K×M).
pub fn read_tape<S: Real>(tape: &mut Tape<S>, alpha: Var, m: Var) -> Var {
    let at = tape.transpose(alpha);
    tape.matmul(at, m)
}

/// Erase/add write on the tape; `m_e`, `m_a` are 1×M rows.
pub fn write_tape<S: Real>(tape: &mut Tape<S>, m: Var, alpha: Var, m_e: Var, m_a: Var) -> Var {
    let erase = tape.matmul(alpha, m_e);
    let keep = tape.scale(erase, -1.0);
    let keep = tape.add_const(keep, 1.0);
    let kept = tape.mul(m, keep);
    let add = tape.matmul(alpha, m_a);
    tape.add(kept, add)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identical_rows_give_uniform_attention() {
        let key = [0.3, -0.2, 0.5];
        let m = MemoryMatrix::from_data(4, 3, key.repeat(4));
        for a in m.attend(&key).alpha {
            assert!((a - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn one_hot_score_softmax() {
        // cosine scores (1, 0, 0, 0): row 0 parallel to the key, the rest orthogonal
        let m = MemoryMatrix::from_data(
            4,
            2,
            vec![2.0, 0.0, 0.0, 1.0, 0.0, -3.0, 0.0, 0.5],
        );
        let a = m.attend(&[1.0, 0.0]).alpha;
        let e = libm::exp(1.0);
        let z = e + 3.0;
        let expected = [e / z, 1.0 / z, 1.0 / z, 1.0 / z];
        for (x, y) in a.iter().zip(expected) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!((a[0] - 0.4754).abs() < 5e-5);
        assert!((a[1] - 0.1749).abs() < 5e-5);
    }

    #[test]
    fn zero_key_gives_uniform_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = MemoryMatrix::init(5, 3, &mut rng);
        for a in m.attend(&[0.0; 3]).alpha {
            assert!((a - 0.2).abs() < 1e-12);
        }
    }

    #[test]
    fn read_selection_mean_and_constant_rows() {
        let m = MemoryMatrix::from_data(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let one_hot = Attention {
            alpha: vec![0.0, 1.0, 0.0],
        };
        assert_eq!(m.read_with(&one_hot), vec![3.0, 4.0]);
        let mean = m.read_with(&Attention::uniform(3));
        assert!((mean[0] - 3.0).abs() < 1e-12 && (mean[1] - 4.0).abs() < 1e-12);
        let c = MemoryMatrix::from_data(3, 2, [0.7, -0.1].repeat(3));
        let r = c.read_with(&Attention {
            alpha: vec![0.2, 0.5, 0.3],
        });
        assert!((r[0] - 0.7).abs() < 1e-12 && (r[1] + 0.1).abs() < 1e-12);
    }

    #[test]
    fn erase_replace_and_null_writes() {
        let mut m = MemoryMatrix::from_data(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let alpha = Attention {
            alpha: vec![0.0, 1.0],
        };
        m.write_with(&alpha, &[1.0, 1.0], &[0.5, -0.5]);
        assert_eq!(m.data(), &[1.0, 2.0, 0.5, -0.5]);
        assert_eq!(m.m_a_prev(), &[0.5, -0.5]);
        let before = m.data().to_vec();
        m.write_with(&Attention::uniform(2), &[0.0, 0.0], &[0.0, 0.0]);
        assert_eq!(m.data(), &before[..]);
        assert_eq!(m.writes(), 2);
    }

    #[test]
    fn write_converges_to_add_over_erase() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut m = MemoryMatrix::init(8, 16, &mut rng);
        let alpha = Attention::uniform(8);
        let (me, ma) = (vec![0.8; 16], vec![0.5; 16]);
        for _ in 0..500 {
            m.write_with(&alpha, &me, &ma);
        }
        for x in m.data() {
            assert!((x - 0.625).abs() < 1e-5);
        }
    }

    #[test]
    fn tape_write_matches_direct_write() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m0 = MemoryMatrix::init(3, 4, &mut rng);
        let me = [0.2, 0.9, 0.5, 0.4];
        let ma = [-0.3, 0.1, 0.8, -0.6];
        let mut direct = m0.clone();
        direct.write(&me, &ma);
        let mut t = Tape::<f64>::new();
        let mv = t.constant_f64(3, 4, m0.data());
        let mev = t.constant_f64(1, 4, &me);
        let mav = t.constant_f64(1, 4, &ma);
        let a = attend_tape(&mut t, mv, mav);
        let w = write_tape(&mut t, mv, a, mev, mav);
        for (x, y) in t.values_f64(w).iter().zip(direct.data()) {
            assert!((x - y).abs() < 1e-14);
        }
        let a2 = attend_tape(&mut t, w, mav);
        let r = read_tape(&mut t, a2, w);
        for (x, y) in t.values_f64(r).iter().zip(direct.read()) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    proptest! {
        #[test]
        fn attention_normalized_and_read_convex(
            data in proptest::collection::vec(-2.0f64..2.0, 12),
            key in proptest::collection::vec(-2.0f64..2.0, 3),
            zero_row in 0usize..4,
        ) {
            let mut data = data;
            for j in 0..3 { data[zero_row * 3 + j] = 0.0; }
            let mut m = MemoryMatrix::from_data(4, 3, data);
            let a = m.attend(&key);
            let s: f64 = a.alpha.iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
            prop_assert!(a.alpha.iter().all(|x| *x >= 0.0 && x.is_finite()));
            m.set_m_a_prev(key.clone());
            let r = m.read();
            for j in 0..3 {
                let col: Vec<f64> = (0..4).map(|k| m.row(k)[j]).collect();
                let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(r[j] >= lo - 1e-12 && r[j] <= hi + 1e-12);
            }
        }

        #[test]
        fn contraction_factor_per_row(
            alpha_raw in proptest::collection::vec(0.05f64..1.0, 3),
            me in 0.1f64..0.95,
            ma in -0.9f64..0.9,
            start in -1.0f64..1.0,
        ) {
            let z: f64 = alpha_raw.iter().sum();
            let alpha = Attention { alpha: alpha_raw.iter().map(|a| a / z).collect() };
            let mut m = MemoryMatrix::from_data(3, 1, vec![start; 3]);
            let fixed = ma / me;
            let before: Vec<f64> = m.data().iter().map(|x| x - fixed).collect();
            m.write_with(&alpha, &[me], &[ma]);
            for k in 0..3 {
                let after = m.data()[k] - fixed;
                let factor = 1.0 - alpha.alpha[k] * me;
                prop_assert!((after - factor * before[k]).abs() < 1e-12);
            }
        }
    }
}
