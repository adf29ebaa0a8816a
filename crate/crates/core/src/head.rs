//! Temporal attention pooling and interval regression.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::params::{Activation, Bound, Mlp, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

/// `MLP_tatt` (`d→d/2→1`, tanh) scores segments; `MLP_reg` (`d→d→2`, ReLU) regresses the interval.
#[derive(Clone, Debug)]
pub struct HeadParams {
    pub tatt: Mlp,
    pub reg: Mlp,
}

/// Graph handles produced by [`HeadParams::predict_interval`].
#[derive(Clone, Copy, Debug)]
pub struct HeadOutput {
    /// Raw `(t_start, t_end)` as a `2×1` column.
    pub interval: Var,
    /// Temporal attention `o`, `1×T`.
    pub attention: Var,
    /// Attended summary `v`, `d×1`.
    pub summary: Var,
}

/// Values of a prediction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub t_start: f64,
    pub t_end: f64,
    pub attention: Vec<f64>,
    pub summary: Vec<f64>,
}

impl Prediction {
    pub fn from_output(tape: &Tape, out: &HeadOutput) -> Self {
        let interval = tape.value(out.interval);
        Prediction {
            t_start: interval.data()[0],
            t_end: interval.data()[1],
            attention: tape.value(out.attention).into_data(),
            summary: tape.value(out.summary).into_data(),
        }
    }

    /// Clamped and ordered interval used for evaluation.
    pub fn interval(&self) -> (f64, f64) {
        canonicalize(self.t_start, self.t_end)
    }
}

/// Clamp both ends to `[0, 1]`, then swap if out of order.
pub fn canonicalize(t_start: f64, t_end: f64) -> (f64, f64) {
    let s = t_start.clamp(0.0, 1.0);
    let e = t_end.clamp(0.0, 1.0);
    if s > e {
        (e, s)
    } else {
        (s, e)
    }
}

impl HeadParams {
    pub fn new(store: &mut ParamStore, d: usize, rng: &mut ChaCha8Rng) -> Self {
        HeadParams {
            tatt: Mlp::new(store, "head.tatt", d, d / 2, 1, Activation::Tanh, false, rng),
            reg: Mlp::new(store, "head.reg", d, d, 2, Activation::Relu, true, rng),
        }
    }

    /// `o = softmax(MLP_tatt(R))`, `v = R oᵀ`, `(t_s, t_e) = MLP_reg(v)`.
    ///
    /// `mask` (`1×T`, 0 or masked) optionally hides padded segments from the attention.
    pub fn predict_interval(&self, b: &Bound, r: Var, mask: Option<&Tensor>) -> Result<HeadOutput> {
        let tape = b.tape;
        let scores = self.tatt.forward(b, r)?;
        let attention = tape.softmax(scores, mask)?;
        let attention_t = tape.transpose(attention)?;
        let summary = tape.matmul(r, attention_t)?;
        let interval = self.reg.forward(b, summary)?;
        Ok(HeadOutput {
            interval,
            attention,
            summary,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check_many;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn build(d: usize) -> (ParamStore, HeadParams) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let h = HeadParams::new(&mut store, d, &mut rng);
        (store, h)
    }

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn identical_columns_give_uniform_attention() {
        let (store, head) = build(8);
        let col = random(&[8, 1], 1);
        let r = Tensor::from_fn(&[8, 4], |i| col.data()[i / 4]);
        let tape = Tape::new();
        let b = store.bind(&tape, false);
        let out = head.predict_interval(&b, tape.constant(r), None).unwrap();
        for &o in tape.value(out.attention).data() {
            assert!((o - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn single_segment() {
        let (store, head) = build(8);
        let r = random(&[8, 1], 2);
        let tape = Tape::new();
        let b = store.bind(&tape, false);
        let out = head.predict_interval(&b, tape.constant(r.clone()), None).unwrap();
        assert_eq!(tape.value(out.attention).data(), &[1.0]);
        assert_eq!(tape.value(out.summary), r);
    }

    #[test]
    fn summary_inside_column_hull() {
        let (store, head) = build(8);
        let r = random(&[8, 6], 3);
        let tape = Tape::new();
        let b = store.bind(&tape, false);
        let out = head.predict_interval(&b, tape.constant(r.clone()), None).unwrap();
        let pred = Prediction::from_output(&tape, &out);
        assert!((pred.attention.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        for (row, v) in pred.summary.iter().enumerate() {
            let vals: Vec<f64> = (0..6).map(|c| r.at(row, c)).collect();
            let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            assert!(*v >= lo - 1e-12 && *v <= hi + 1e-12);
        }
    }

    #[test]
    fn start_gradient_wrt_segments() {
        let (store, head) = build(8);
        let r = random(&[8, 5], 4);
        let err = grad_check_many(
            |tape, vars| {
                let b = store.bind(tape, false);
                let out = head.predict_interval(&b, vars[0], None)?;
                let row = tape.transpose(out.interval)?;
                tape.slice_cols(row, 0, 1)
            },
            &[r],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn canonicalize_examples() {
        assert_eq!(canonicalize(0.3, 0.7), (0.3, 0.7));
        assert_eq!(canonicalize(1.4, -0.2), (0.0, 1.0));
        assert_eq!(canonicalize(0.9, 0.2), (0.2, 0.9));
    }

    proptest! {
        #[test]
        fn canonicalize_is_idempotent(a in -3.0f64..3.0, b in -3.0f64..3.0) {
            let (s, e) = canonicalize(a, b);
            prop_assert!(0.0 <= s && s <= e && e <= 1.0);
            prop_assert_eq!(canonicalize(s, e), (s, e));
        }
    }
}
