//! Local-global video-text interactions.
//!
//! Each phrase is fused with every segment, refined with local temporal
//! context, pooled across phrases with learned weights, and finally related
//! across the whole video with non-local blocks. The ordering of the three
//! stages, the fusion operator and the local-context variant are all
//! configurable for ablations.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{broadcast_cols, Activation, Bound, Mlp, ParamId, ParamStore};
use crate::sqan::PhraseSet;
use crate::tensor::{Tensor, Var, NEG_INF_SURROGATE};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionKind {
    #[default]
    Hadamard,
    Addition,
    Concat,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LocalContext {
    /// Two same-padded convolutions of width `kernel` with an identity skip.
    ResBlock { kernel: usize },
    /// Non-local blocks whose attention only reaches `window` segments around each position.
    MaskedNl { blocks: usize, window: usize },
    None,
}

impl Default for LocalContext {
    fn default() -> Self {
        LocalContext::ResBlock { kernel: 15 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StageOrder {
    #[default]
    FusionLocalGlobal,
    LocalFusionGlobal,
    LocalGlobalFusion,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LgvtiConfig {
    pub d: usize,
    pub segments: usize,
    /// Number of phrase steps; 1 in sentence-feature mode.
    pub steps: usize,
    pub fusion: FusionKind,
    pub local: LocalContext,
    pub global_blocks: usize,
    pub order: StageOrder,
    /// Learn phrase pooling weights; without it a single step is passed through.
    pub phrase_pooling: bool,
}

#[derive(Clone, Debug)]
struct FusionStep {
    w_m: ParamId,
    w_s: ParamId,
    w_e: ParamId,
    proj: Option<ParamId>,
}

#[derive(Clone, Debug)]
pub struct FusionParams {
    pub kind: FusionKind,
    steps: Vec<FusionStep>,
}

/// Residual self-attention over segments with `√d`-scaled dot products.
#[derive(Clone, Debug)]
pub struct NlBlock {
    pub w_rq: ParamId,
    pub w_rk: ParamId,
    pub w_rv: ParamId,
}

#[derive(Clone, Debug)]
pub enum LocalContextParams {
    ResBlock {
        conv1: (ParamId, ParamId),
        conv2: (ParamId, ParamId),
    },
    MaskedNl {
        blocks: Vec<NlBlock>,
        window: usize,
    },
    Identity,
}

#[derive(Clone, Debug)]
pub struct GlobalContextParams {
    pub blocks: Vec<NlBlock>,
    pub satt: Option<Mlp>,
}

#[derive(Clone, Debug)]
pub struct LgvtiParams {
    pub config: LgvtiConfig,
    pub fusion: FusionParams,
    pub local: LocalContextParams,
    pub global: GlobalContextParams,
}

/// What the interaction stages condition on.
#[derive(Clone, Copy, Debug)]
pub enum QueryRepr<'a> {
    Phrases(&'a PhraseSet),
    /// Sentence feature copied across segments; a single step without pooling.
    Sentence(Var),
}

/// Semantics-aware segment features and the phrase pooling weights when learned.
#[derive(Clone, Copy, Debug)]
pub struct LgvtiOutput {
    pub r: Var,
    pub pool_weights: Option<Var>,
}

impl NlBlock {
    fn new(store: &mut ParamStore, name: &str, d: usize, rng: &mut ChaCha8Rng) -> Self {
        NlBlock {
            w_rq: store.uniform(format!("{name}.w_rq"), &[d, d], d, rng),
            w_rk: store.uniform(format!("{name}.w_rk"), &[d, d], d, rng),
            w_rv: store.uniform(format!("{name}.w_rv"), &[d, d], d, rng),
        }
    }

    /// `X + (W_rv X) · softmax((W_rq X)ᵀ (W_rk X) / √d + mask)ᵀ`, softmax over key positions.
    pub fn forward(&self, b: &Bound, x: Var, mask: Option<&Tensor>) -> Result<Var> {
        self.forward_with_attention(b, x, mask).map(|(y, _)| y)
    }

    /// Like [`NlBlock::forward`], also returning the `T×T` attention (rows are queries).
    pub fn forward_with_attention(&self, b: &Bound, x: Var, mask: Option<&Tensor>) -> Result<(Var, Var)> {
        let tape = b.tape;
        let d = tape.shape(x)[0];
        let q = tape.matmul(b.p(self.w_rq), x)?;
        let k = tape.matmul(b.p(self.w_rk), x)?;
        let v = tape.matmul(b.p(self.w_rv), x)?;
        let qt = tape.transpose(q)?;
        let logits = tape.matmul(qt, k)?;
        let logits = tape.scale(logits, 1.0 / (d as f64).sqrt())?;
        let attn = tape.softmax(logits, mask)?;
        let attn_t = tape.transpose(attn)?;
        let mixed = tape.matmul(v, attn_t)?;
        Ok((tape.add(x, mixed)?, attn))
    }
}

/// `T×T` additive mask allowing only `|i − j| ≤ (window − 1)/2`.
pub fn window_mask(segments: usize, window: usize) -> Tensor {
    let half = (window.saturating_sub(1) / 2) as isize;
    Tensor::from_fn(&[segments, segments], |k| {
        let (i, j) = ((k / segments) as isize, (k % segments) as isize);
        if (i - j).abs() <= half {
            0.0
        } else {
            NEG_INF_SURROGATE
        }
    })
}

fn conv_params(
    store: &mut ParamStore,
    name: &str,
    d: usize,
    kernel: usize,
    rng: &mut ChaCha8Rng,
) -> (ParamId, ParamId) {
    let fan_in = d * kernel;
    (
        store.uniform(format!("{name}.kernels"), &[d, d, kernel], fan_in, rng),
        store.uniform(format!("{name}.bias"), &[d], fan_in, rng),
    )
}

impl LgvtiParams {
    pub fn new(store: &mut ParamStore, config: LgvtiConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let d = config.d;
        if config.steps == 0 {
            return Err(Error::NInvalid(0));
        }
        let steps = (0..config.steps)
            .map(|n| {
                let name = format!("lgvti.fusion.{n}");
                FusionStep {
                    w_m: store.uniform(format!("{name}.w_m"), &[d, d], d, rng),
                    w_s: store.uniform(format!("{name}.w_s"), &[d, d], d, rng),
                    w_e: store.uniform(format!("{name}.w_e"), &[d, d], d, rng),
                    proj: (config.fusion == FusionKind::Concat)
                        .then(|| store.uniform(format!("{name}.proj"), &[d, 2 * d], 2 * d, rng)),
                }
            })
            .collect();
        let local = match config.local {
            LocalContext::ResBlock { kernel } => {
                if kernel % 2 == 0 {
                    return Err(Error::EvenKernel(kernel));
                }
                LocalContextParams::ResBlock {
                    conv1: conv_params(store, "lgvti.local.conv1", d, kernel, rng),
                    conv2: conv_params(store, "lgvti.local.conv2", d, kernel, rng),
                }
            }
            LocalContext::MaskedNl { blocks, window } => {
                if blocks == 0 || window % 2 == 0 {
                    return Err(Error::ConfigInvalid(format!(
                        "masked non-local needs b ≥ 1 and an odd window, got b={blocks}, w={window}"
                    )));
                }
                LocalContextParams::MaskedNl {
                    blocks: (0..blocks)
                        .map(|i| NlBlock::new(store, &format!("lgvti.local.nl{i}"), d, rng))
                        .collect(),
                    window,
                }
            }
            LocalContext::None => LocalContextParams::Identity,
        };
        let global = GlobalContextParams {
            blocks: (0..config.global_blocks)
                .map(|i| NlBlock::new(store, &format!("lgvti.global.nl{i}"), d, rng))
                .collect(),
            satt: config.phrase_pooling.then(|| {
                Mlp::new(store, "lgvti.global.satt", d, d / 2, 1, Activation::Tanh, false, rng)
            }),
        };
        Ok(LgvtiParams {
            fusion: FusionParams {
                kind: config.fusion,
                steps,
            },
            local,
            global,
            config,
        })
    }

    /// Segment-level fusion of `s` (`d×T`) with phrase `e` (`d×1`) using step `n`'s weights.
    pub fn fuse_segments(&self, b: &Bound, s: Var, e: Var, n: usize) -> Result<Var> {
        let tape = b.tape;
        let step = self
            .fusion
            .steps
            .get(n)
            .ok_or_else(|| Error::shape("fuse_segments", format!("no fusion weights for step {n}")))?;
        let segments = tape.shape(s)[1];
        let seg = tape.matmul(b.p(step.w_s), s)?;
        let phrase = tape.matmul(b.p(step.w_e), e)?;
        let phrase = broadcast_cols(tape, phrase, segments)?;
        let joined = match self.fusion.kind {
            FusionKind::Hadamard => tape.mul(seg, phrase)?,
            FusionKind::Addition => tape.add(seg, phrase)?,
            FusionKind::Concat => {
                let stacked = tape.concat(&[seg, phrase], 0)?;
                tape.matmul(b.p(step.proj.expect("concat fusion has a projection")), stacked)?
            }
        };
        tape.matmul(b.p(step.w_m), joined)
    }

    pub fn local_context(&self, b: &Bound, x: Var) -> Result<Var> {
        let tape = b.tape;
        match &self.local {
            LocalContextParams::ResBlock { conv1, conv2 } => {
                let h = tape.conv1d_same(x, b.p(conv1.0), b.p(conv1.1))?;
                let h = tape.relu(h)?;
                let h = tape.conv1d_same(h, b.p(conv2.0), b.p(conv2.1))?;
                tape.add(x, h)
            }
            LocalContextParams::MaskedNl { blocks, window } => {
                let mask = window_mask(tape.shape(x)[1], *window);
                blocks
                    .iter()
                    .try_fold(x, |acc, blk| blk.forward(b, acc, Some(&mask)))
            }
            LocalContextParams::Identity => Ok(x),
        }
    }

    /// Weighted sum of the per-phrase features with `c = softmax(MLP_satt(e⁽¹⁾..e⁽ᴺ⁾))`.
    pub fn pool_phrases(&self, b: &Bound, per_phrase: &[Var], phrases: Var) -> Result<(Var, Option<Var>)> {
        let tape = b.tape;
        let Some(satt) = &self.global.satt else {
            return match per_phrase {
                [single] => Ok((*single, None)),
                _ => Err(Error::shape("pool_phrases", "several phrases but no pooling weights")),
            };
        };
        let scores = satt.forward(b, phrases)?;
        let weights = tape.softmax(scores, None)?;
        let shape = tape.shape(per_phrase[0]);
        let flat_len = shape[0] * shape[1];
        let rows = per_phrase
            .iter()
            .map(|&m| tape.reshape(m, &[1, flat_len]))
            .collect::<Result<Vec<_>>>()?;
        let stacked = tape.concat(&rows, 0)?;
        let pooled = tape.matmul(weights, stacked)?;
        Ok((tape.reshape(pooled, &shape)?, Some(weights)))
    }

    pub fn global_context(&self, b: &Bound, x: Var) -> Result<Var> {
        self.global
            .blocks
            .iter()
            .try_fold(x, |acc, blk| blk.forward(b, acc, None))
    }

    /// Run the three stages over segment features `s` in the configured order.
    pub fn forward(&self, b: &Bound, s: Var, query: QueryRepr) -> Result<LgvtiOutput> {
        let (columns, phrases) = match query {
            QueryRepr::Phrases(set) => (set.columns.clone(), set.phrases),
            QueryRepr::Sentence(q) => (vec![q], q),
        };
        if columns.len() != self.fusion.steps.len() {
            return Err(Error::shape(
                "lgvti",
                format!("{} phrases for {} fusion steps", columns.len(), self.fusion.steps.len()),
            ));
        }
        let fuse_all = |base: Var, local: bool| -> Result<Vec<Var>> {
            columns
                .iter()
                .enumerate()
                .map(|(n, &e)| {
                    let m = self.fuse_segments(b, base, e, n)?;
                    if local {
                        self.local_context(b, m)
                    } else {
                        Ok(m)
                    }
                })
                .collect()
        };
        let (r, pool_weights) = match self.config.order {
            StageOrder::FusionLocalGlobal => {
                let per_phrase = fuse_all(s, true)?;
                let (pooled, w) = self.pool_phrases(b, &per_phrase, phrases)?;
                (self.global_context(b, pooled)?, w)
            }
            StageOrder::LocalFusionGlobal => {
                let local = self.local_context(b, s)?;
                let per_phrase = fuse_all(local, false)?;
                let (pooled, w) = self.pool_phrases(b, &per_phrase, phrases)?;
                (self.global_context(b, pooled)?, w)
            }
            StageOrder::LocalGlobalFusion => {
                let local = self.local_context(b, s)?;
                let global = self.global_context(b, local)?;
                let per_phrase = fuse_all(global, false)?;
                self.pool_phrases(b, &per_phrase, phrases)?
            }
        };
        Ok(LgvtiOutput { r, pool_weights })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check_many, Tape};
    use rand::{Rng, SeedableRng};

    fn config(d: usize, t: usize, steps: usize) -> LgvtiConfig {
        LgvtiConfig {
            d,
            segments: t,
            steps,
            fusion: FusionKind::Hadamard,
            local: LocalContext::ResBlock { kernel: 3 },
            global_blocks: 1,
            order: StageOrder::FusionLocalGlobal,
            phrase_pooling: true,
        }
    }

    fn build(cfg: LgvtiConfig, seed: u64) -> (ParamStore, LgvtiParams) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let p = LgvtiParams::new(&mut store, cfg, &mut rng).unwrap();
        (store, p)
    }

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    fn zero_prefix(store: &mut ParamStore, prefix: &str) {
        for i in 0..store.len() {
            if store.names()[i].starts_with(prefix) {
                store.tensors_mut()[i].data_mut().fill(0.0);
            }
        }
    }

    #[test]
    fn zero_phrase_annihilates_hadamard() {
        let (store, p) = build(config(8, 5, 1), 1);
        let tape = Tape::new();
        let b = store.bind(&tape, false);
        let s = tape.constant(random(&[8, 5], 2));
        let e = tape.constant(Tensor::zeros(&[8, 1]));
        let m = p.fuse_segments(&b, s, e, 0).unwrap();
        assert!(tape.value(m).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_phrase_addition_is_phrase_independent() {
        let mut cfg = config(8, 5, 1);
        cfg.fusion = FusionKind::Addition;
        let (store, p) = build(cfg, 3);
        let tape = Tape::new();
        let b = store.bind(&tape, false);
        let s_val = random(&[8, 5], 4);
        let s = tape.constant(s_val);
        let e = tape.constant(Tensor::zeros(&[8, 1]));
        let m = p.fuse_segments(&b, s, e, 0).unwrap();
        let ws = tape.matmul(b.p(p.fusion.steps[0].w_s), s).unwrap();
        let want = tape.matmul(b.p(p.fusion.steps[0].w_m), ws).unwrap();
        assert!(tape.value(m).max_abs_diff(&tape.value(want)) < 1e-14);
    }

    #[test]
    fn zero_resblock_is_identity() {
        let (mut store, p) = build(config(8, 6, 1), 5);
        zero_prefix(&mut store, "lgvti.local");
        let tape = Tape::new();
        let b = store.bind(&tape, false);
        let x = random(&[8, 6], 6);
        let y = p.local_context(&b, tape.constant(x.clone())).unwrap();
        assert_eq!(tape.value(y), x);
    }

    #[test]
    fn masked_nl_with_zero_values_is_identity() {
        let mut cfg = config(8, 6, 1);
        cfg.local = LocalContext::MaskedNl { blocks: 2, window: 3 };
        let (mut store, p) = build(cfg, 7);
        for i in 0..store.len() {
            if store.names()[i].starts_with("lgvti.local") && store.names()[i].ends_with("w_rv") {
                store.tensors_mut()[i].data_mut().fill(0.0);
            }
        }
        let tape = Tape::new();
        let b = store.bind(&tape, false);
        let x = random(&[8, 6], 8);
        let y = p.local_context(&b, tape.constant(x.clone())).unwrap();
        assert_eq!(tape.value(y), x);
    }

    #[test]
    fn global_block_passthrough_and_single_segment() {
        let (mut store, p) = build(config(8, 1, 1), 9);
        let x = random(&[8, 1], 10);
        {
            let tape = Tape::new();
            let b = store.bind(&tape, false);
            let xv = tape.constant(x.clone());
            let r = p.global_context(&b, xv).unwrap();
            let vx = tape.matmul(b.p(p.global.blocks[0].w_rv), xv).unwrap();
            let want = tape.add(xv, vx).unwrap();
            assert!(tape.value(r).max_abs_diff(&tape.value(want)) < 1e-14);
        }
        zero_prefix(&mut store, "lgvti.global.nl0.w_rv");
        let tape = Tape::new();
        let b = store.bind(&tape, false);
        let r = p.global_context(&b, tape.constant(x.clone())).unwrap();
        assert_eq!(tape.value(r), x);
    }

    #[test]
    fn nl_attention_rows_are_stochastic() {
        let (store, p) = build(config(8, 7, 1), 11);
        let tape = Tape::new();
        let b = store.bind(&tape, false);
        let x = tape.constant(random(&[8, 7], 12));
        let (_, attn) = p.global.blocks[0].forward_with_attention(&b, x, None).unwrap();
        let a = tape.value(attn);
        for i in 0..7 {
            let s: f64 = (0..7).map(|j| a.at(i, j)).sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn window_mask_band() {
        let m = window_mask(4, 3);
        assert_eq!(m.at(0, 1), 0.0);
        assert_eq!(m.at(0, 2), NEG_INF_SURROGATE);
        assert_eq!(m.at(3, 2), 0.0);
    }

    #[test]
    fn pooling_degenerate_cases() {
        let (store, p) = build(config(8, 5, 3), 13);
        let tape = Tape::new();
        let b = store.bind(&tape, false);
        let m = random(&[8, 5], 14);
        let mv = tape.constant(m.clone());
        let phrases = tape.constant(random(&[8, 3], 15));
        let (pooled, w) = p.pool_phrases(&b, &[mv, mv, mv], phrases).unwrap();
        assert!(tape.value(pooled).max_abs_diff(&m) < 1e-14);
        let w = tape.value(w.unwrap());
        assert!(w.data().iter().all(|&v| v >= 0.0));
        assert!((w.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);

        let (store1, p1) = build(config(8, 5, 1), 16);
        let tape = Tape::new();
        let b = store1.bind(&tape, false);
        let mv = tape.constant(m.clone());
        let phrase = tape.constant(random(&[8, 1], 17));
        let (pooled, w) = p1.pool_phrases(&b, &[mv], phrase).unwrap();
        assert_eq!(tape.value(w.unwrap()).data(), &[1.0]);
        assert_eq!(tape.value(pooled), m);
    }

    #[test]
    fn pooling_gradient_matches_finite_differences() {
        let (store, p) = build(config(8, 5, 3), 18);
        let satt_ids: Vec<usize> = (0..store.len())
            .filter(|&i| store.names()[i].starts_with("lgvti.global.satt"))
            .collect();
        let ms: Vec<Tensor> = (0..3).map(|n| random(&[8, 5], 20 + n)).collect();
        let phrases = random(&[8, 3], 30);
        let points: Vec<Tensor> = satt_ids.iter().map(|&i| store.tensors()[i].clone()).collect();
        let err = grad_check_many(
            |tape, vars| {
                let mut all: Vec<Var> = store.tensors().iter().map(|t| tape.constant(t.clone())).collect();
                for (&i, &v) in satt_ids.iter().zip(vars) {
                    all[i] = v;
                }
                let b = Bound::from_vars(tape, all);
                let mvars: Vec<Var> = ms.iter().map(|m| tape.constant(m.clone())).collect();
                let (pooled, _) = p.pool_phrases(&b, &mvars, tape.constant(phrases.clone()))?;
                let sq = tape.mul(pooled, pooled)?;
                tape.sum(sq, None)
            },
            &points,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
