//! Training objectives: interval regression, temporal attention guidance and
//! distinct query attention, summed with unit weights.
//!
//! Each loss exists twice: a plain `f64` evaluation and a tape version used
//! for training. Tests hold the two in agreement.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::head::HeadOutput;
use crate::tensor::{Tape, Tensor, Var};

/// Floor applied inside `log` so a zero attention weight on a guided segment stays finite.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_reg: f64,
    pub l_tag: f64,
    pub l_dqa: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(l_reg: f64, l_tag: f64, l_dqa: f64) -> Self {
        LossBreakdown {
            l_reg,
            l_tag,
            l_dqa,
            total: l_reg + l_tag + l_dqa,
        }
    }

    /// Running sum, for batch and epoch averages.
    pub fn accumulate(&mut self, other: &LossBreakdown) {
        self.l_reg += other.l_reg;
        self.l_tag += other.l_tag;
        self.l_dqa += other.l_dqa;
        self.total += other.total;
    }

    pub fn scaled(&self, s: f64) -> Self {
        LossBreakdown {
            l_reg: self.l_reg * s,
            l_tag: self.l_tag * s,
            l_dqa: self.l_dqa * s,
            total: self.total * s,
        }
    }
}

/// Which terms enter the objective and the overlap target `λ` of the distinctness term.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda: f64,
    pub use_tag: bool,
    pub use_dqa: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda: 0.3,
            use_tag: true,
            use_dqa: true,
        }
    }
}

/// Binary indicator over segments lying inside the ground-truth interval.
#[derive(Clone, Debug, PartialEq)]
pub struct TemporalGuide(Vec<f64>);

impl TemporalGuide {
    /// Segment `i` (0-based) is guided when its center `(i + 0.5)/T` lies in `[start, end]`.
    ///
    /// An interval too short to contain any center guides the segment holding its midpoint.
    pub fn from_interval(start: f64, end: f64, segments: usize) -> Self {
        let t = segments as f64;
        let mut mask: Vec<f64> = (0..segments)
            .map(|i| {
                let c = (i as f64 + 0.5) / t;
                if c >= start && c <= end {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        if mask.iter().all(|&m| m == 0.0) && segments > 0 {
            let mid = (0.5 * (start + end)).clamp(0.0, 1.0);
            let i = ((mid * t).floor() as usize).min(segments - 1);
            mask[i] = 1.0;
        }
        TemporalGuide(mask)
    }

    pub fn from_mask(mask: Vec<f64>) -> Self {
        TemporalGuide(mask)
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

pub fn smooth_l1(x: f64) -> f64 {
    if x.abs() < 1.0 {
        0.5 * x * x
    } else {
        x.abs() - 0.5
    }
}

pub fn loss_reg(pred: (f64, f64), gt: (f64, f64)) -> f64 {
    smooth_l1(gt.0 - pred.0) + smooth_l1(gt.1 - pred.1)
}

/// `−Σ ô_i log o_i / Σ ô_i`, with `log` floored at `log(1e-12)`.
pub fn loss_tag(attention: &[f64], guide: &TemporalGuide) -> Result<f64> {
    if attention.len() != guide.0.len() {
        return Err(Error::shape("loss_tag", format!("{} weights vs {} guide entries", attention.len(), guide.0.len())));
    }
    let mass: f64 = guide.0.iter().sum();
    if mass <= 0.0 {
        return Err(Error::EmptyGuide);
    }
    let s: f64 = attention
        .iter()
        .zip(&guide.0)
        .map(|(o, g)| g * o.max(LOG_FLOOR).ln())
        .sum();
    Ok(-s / mass)
}

/// `‖AᵀA − λI‖²_F` for the `L×N` query attention matrix.
pub fn loss_dqa(attn: &Tensor, lambda: f64) -> f64 {
    let (l, n) = (attn.rows(), attn.cols());
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            let dot: f64 = (0..l).map(|k| attn.at(k, i) * attn.at(k, j)).sum();
            let target = if i == j { lambda } else { 0.0 };
            total += (dot - target).powi(2);
        }
    }
    total
}

/// Regression loss on the tape; `interval` is the raw `2×1` prediction.
pub fn reg_loss_var(tape: &Tape, interval: Var, gt: (f64, f64)) -> Result<Var> {
    let target = tape.constant(Tensor::column(vec![gt.0, gt.1]));
    let residual = tape.sub(target, interval)?;
    let per_end = tape.smooth_l1(residual)?;
    tape.sum(per_end, None)
}

/// Attention guidance loss on the tape; `attention` is `1×T`.
pub fn tag_loss_var(tape: &Tape, attention: Var, guide: &TemporalGuide) -> Result<Var> {
    let mass: f64 = guide.0.iter().sum();
    if mass <= 0.0 {
        return Err(Error::EmptyGuide);
    }
    let logs = tape.log_floor(attention, LOG_FLOOR)?;
    let g = tape.constant(Tensor::new(tape.shape(attention), guide.0.clone())?);
    let picked = tape.mul(logs, g)?;
    let s = tape.sum(picked, None)?;
    tape.scale(s, -1.0 / mass)
}

/// Distinct query attention loss on the tape; `attn` is `L×N`.
pub fn dqa_loss_var(tape: &Tape, attn: Var, lambda: f64) -> Result<Var> {
    let n = tape.shape(attn)[1];
    let at = tape.transpose(attn)?;
    let gram = tape.matmul(at, attn)?;
    let mut target = Tensor::identity(n);
    target.data_mut().iter_mut().for_each(|v| *v *= lambda);
    let diff = tape.sub(gram, tape.constant(target))?;
    tape.sq_norm(diff)
}

/// Sum of the enabled terms for one sample. Disabled terms, and the distinctness
/// term when there is no query attention matrix, contribute exactly zero.
pub fn total_loss(
    tape: &Tape,
    head: &HeadOutput,
    query_attention: Option<Var>,
    gt: (f64, f64),
    guide: &TemporalGuide,
    config: &LossConfig,
) -> Result<(Var, LossBreakdown)> {
    let reg = reg_loss_var(tape, head.interval, gt)?;
    let mut total = reg;
    let mut l_tag = 0.0;
    let mut l_dqa = 0.0;
    if config.use_tag {
        let tag = tag_loss_var(tape, head.attention, guide)?;
        l_tag = tape.item(tag);
        total = tape.add(total, tag)?;
    }
    if let (true, Some(attn)) = (config.use_dqa, query_attention) {
        let dqa = dqa_loss_var(tape, attn, config.lambda)?;
        l_dqa = tape.item(dqa);
        total = tape.add(total, dqa)?;
    }
    Ok((total, LossBreakdown::new(tape.item(reg), l_tag, l_dqa)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use proptest::prelude::*;

    #[test]
    fn regression_examples() {
        assert_eq!(loss_reg((0.2, 0.6), (0.2, 0.6)), 0.0);
        assert_eq!(loss_reg((0.0, 0.0), (0.5, 0.0)), 0.125);
        assert_eq!(loss_reg((0.0, 0.0), (2.0, -3.0)), 4.0);
    }

    #[test]
    fn tag_examples() {
        let all = TemporalGuide::from_mask(vec![1.0; 5]);
        assert!((loss_tag(&[0.2; 5], &all).unwrap() - 5f64.ln()).abs() < 1e-12);

        let one = TemporalGuide::from_mask(vec![0.0, 1.0, 0.0]);
        assert!(loss_tag(&[0.0, 1.0, 0.0], &one).unwrap().abs() < 1e-12);

        let g = TemporalGuide::from_mask(vec![0.0, 1.0, 1.0, 0.0]);
        let v = loss_tag(&[0.1, 0.4, 0.4, 0.1], &g).unwrap();
        assert!((v - 0.916_290_731_874_155).abs() < 1e-9);

        let empty = TemporalGuide::from_mask(vec![0.0; 3]);
        assert!(matches!(loss_tag(&[0.3; 3], &empty), Err(Error::EmptyGuide)));
    }

    #[test]
    fn dqa_examples() {
        let onehot = Tensor::matrix(3, 2, vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        assert_eq!(loss_dqa(&onehot, 1.0), 0.0);
        let uniform = Tensor::filled(&[4, 2], 0.25);
        assert!((loss_dqa(&uniform, 0.0) - 0.25).abs() < 1e-12);
        let single = Tensor::matrix(3, 1, vec![1.0, 0.0, 0.0]).unwrap();
        assert!((loss_dqa(&single, 0.3) - 0.49).abs() < 1e-12);
    }

    #[test]
    fn guide_from_centers() {
        let g = TemporalGuide::from_interval(0.25, 0.5, 8);
        assert_eq!(g.values(), &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
        // too short to cover a center
        let g = TemporalGuide::from_interval(0.26, 0.30, 8);
        assert_eq!(g.values().iter().sum::<f64>(), 1.0);
        assert_eq!(g.values()[2], 1.0);
    }

    #[test]
    fn tape_losses_match_plain_versions() {
        let tape = Tape::new();
        let interval = tape.constant(Tensor::column(vec![0.1, 1.9]));
        let r = reg_loss_var(&tape, interval, (0.3, 0.4)).unwrap();
        assert_eq!(tape.item(r), loss_reg((0.1, 1.9), (0.3, 0.4)));

        let att = vec![0.1, 0.2, 0.3, 0.4];
        let g = TemporalGuide::from_mask(vec![1.0, 0.0, 1.0, 1.0]);
        let a = tape.constant(Tensor::row(att.clone()));
        let t = tag_loss_var(&tape, a, &g).unwrap();
        assert!((tape.item(t) - loss_tag(&att, &g).unwrap()).abs() < 1e-15);

        let m = Tensor::matrix(3, 2, vec![0.2, 0.5, 0.3, 0.1, 0.5, 0.4]).unwrap();
        let mv = tape.constant(m.clone());
        let d = dqa_loss_var(&tape, mv, 0.3).unwrap();
        assert!((tape.item(d) - loss_dqa(&m, 0.3)).abs() < 1e-15);
    }

    #[test]
    fn tape_losses_have_correct_gradients() {
        let interval = Tensor::column(vec![0.1, 1.9]);
        let err = grad_check(|t, x| reg_loss_var(t, x, (0.3, 0.4)), &interval, 1e-5).unwrap();
        assert!(err < 1e-6, "{err}");

        let g = TemporalGuide::from_mask(vec![1.0, 0.0, 1.0, 1.0]);
        let att = Tensor::row(vec![0.1, 0.2, 0.3, 0.4]);
        let err = grad_check(|t, x| tag_loss_var(t, x, &g), &att, 1e-6).unwrap();
        assert!(err < 1e-4, "{err}");

        let m = Tensor::matrix(3, 2, vec![0.2, 0.5, 0.3, 0.1, 0.5, 0.4]).unwrap();
        let err = grad_check(|t, x| dqa_loss_var(t, x, 0.3), &m, 1e-5).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    proptest! {
        #[test]
        fn regression_nonnegative_and_zero_only_at_target(
            a in -3.0f64..3.0, b in -3.0f64..3.0, s in 0.0f64..1.0, e in 0.0f64..1.0
        ) {
            let l = loss_reg((a, b), (s, e));
            prop_assert!(l >= 0.0);
            if (a, b) != (s, e) {
                prop_assert!(l > 0.0);
            }
        }

        #[test]
        fn moving_mass_into_the_guide_never_raises_tag_loss(
            raw in proptest::collection::vec(0.01f64..1.0, 6),
            shift in 0.0f64..0.9,
        ) {
            let guide = TemporalGuide::from_mask(vec![0.0, 1.0, 1.0, 1.0, 0.0, 0.0]);
            let total: f64 = raw.iter().sum();
            let o: Vec<f64> = raw.iter().map(|v| v / total).collect();
            let inside: f64 = (1..4).map(|i| o[i]).sum();
            let outside = 1.0 - inside;
            // remove `shift` of the outside mass and spread it proportionally inside
            let moved = outside * shift;
            let o2: Vec<f64> = o.iter().enumerate().map(|(i, &v)| {
                if (1..4).contains(&i) { v + moved * v / inside } else { v * (1.0 - shift) }
            }).collect();
            prop_assert!(loss_tag(&o2, &guide).unwrap() <= loss_tag(&o, &guide).unwrap() + 1e-12);
        }

        #[test]
        fn breakdown_total_is_component_sum(a in 0.0f64..5.0, b in 0.0f64..5.0, c in 0.0f64..5.0) {
            let br = LossBreakdown::new(a, b, c);
            prop_assert_eq!(br.total, a + b + c);
        }
    }
}
