//! The full grounding network: encoders, phrase extraction, local-global
//! interactions and the regression head, wired to the training objective.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::GroundingSample;
use crate::encoders::{sample_segments, QueryEncoderParams, VideoEncoderParams, Vocabulary};
use crate::error::{Error, Result};
use crate::head::{HeadOutput, HeadParams, Prediction};
use crate::lgvti::{FusionKind, LgvtiConfig, LgvtiParams, LocalContext, QueryRepr, StageOrder};
use crate::losses::{total_loss, LossBreakdown, LossConfig, TemporalGuide};
use crate::params::{Bound, ParamStore};
use crate::sqan::SqanParams;
use crate::tensor::{grad_check_many, Tape, Tensor, Var, NEG_INF_SURROGATE};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Sequential phrase extraction with `N` steps.
    #[default]
    Lgi,
    /// Sentence feature only, a single fusion step.
    LgiSqan,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_v: usize,
    pub d: usize,
    pub segments: usize,
    pub steps: usize,
    pub variant: Variant,
    pub fusion: FusionKind,
    pub local: LocalContext,
    pub global_blocks: usize,
    pub order: StageOrder,
    pub position_embedding: bool,
    /// Hide zero-filled segments from the temporal attention.
    pub mask_padding: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::ConfigInvalid(m));
        if self.d == 0 || !self.d.is_multiple_of(2) {
            return fail(format!("d={} must be even and positive", self.d));
        }
        if self.segments == 0 || self.d_v == 0 || self.vocab_size < 2 {
            return fail("segments, d_v and vocabulary must be non-empty".into());
        }
        if self.steps == 0 {
            return Err(Error::NInvalid(0));
        }
        Ok(())
    }

    fn lgvti(&self) -> LgvtiConfig {
        let lgi = self.variant == Variant::Lgi;
        LgvtiConfig {
            d: self.d,
            segments: self.segments,
            steps: if lgi { self.steps } else { 1 },
            fusion: self.fusion,
            local: self.local,
            global_blocks: self.global_blocks,
            order: self.order,
            phrase_pooling: lgi,
        }
    }
}

/// A sample converted to model inputs once, reused across epochs.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedSample {
    pub video_id: String,
    pub tokens: Vec<usize>,
    pub sampled: Tensor,
    pub valid: Vec<bool>,
    pub gt: (f64, f64),
    pub guide: TemporalGuide,
}

impl PreparedSample {
    pub fn new(sample: &GroundingSample, vocab: &Vocabulary, segments: usize) -> Result<Self> {
        let tokens = vocab.encode(&sample.tokens);
        if tokens.is_empty() {
            return Err(Error::EmptyQuery);
        }
        let (sampled, valid) = sample_segments(&sample.features, segments)?;
        Ok(PreparedSample {
            video_id: sample.video_id.clone(),
            tokens,
            sampled,
            valid,
            gt: sample.gt(),
            guide: TemporalGuide::from_interval(sample.start, sample.end, segments),
        })
    }
}

pub fn prepare_all(samples: &[GroundingSample], vocab: &Vocabulary, segments: usize) -> Result<Vec<PreparedSample>> {
    samples.iter().map(|s| PreparedSample::new(s, vocab, segments)).collect()
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardOutput {
    pub head: HeadOutput,
    /// `L×N` query attention; absent in sentence-feature mode.
    pub query_attention: Option<Var>,
    pub pool_weights: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct LgiModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    query: QueryEncoderParams,
    video: VideoEncoderParams,
    sqan: Option<SqanParams>,
    lgvti: LgvtiParams,
    head: HeadParams,
}

impl LgiModel {
    /// Parameters are drawn in a fixed order from one stream seeded by `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let query = QueryEncoderParams::new(&mut store, config.vocab_size, config.d, &mut rng)?;
        let video = VideoEncoderParams::new(
            &mut store,
            config.d_v,
            config.d,
            config.segments,
            config.position_embedding,
            &mut rng,
        );
        let sqan = match config.variant {
            Variant::Lgi => Some(SqanParams::new(&mut store, config.d, config.steps, &mut rng)?),
            Variant::LgiSqan => None,
        };
        let lgvti = LgvtiParams::new(&mut store, config.lgvti(), &mut rng)?;
        let head = HeadParams::new(&mut store, config.d, &mut rng);
        Ok(LgiModel {
            config,
            store,
            query,
            video,
            sqan,
            lgvti,
            head,
        })
    }

    fn attention_mask(&self, valid: &[bool]) -> Option<Tensor> {
        if !self.config.mask_padding || valid.iter().all(|&v| v) {
            return None;
        }
        let vals = valid.iter().map(|&v| if v { 0.0 } else { NEG_INF_SURROGATE }).collect();
        Some(Tensor::row(vals))
    }

    pub fn forward(&self, b: &Bound, sample: &PreparedSample) -> Result<ForwardOutput> {
        let (e, q) = self.query.encode_query(b, &sample.tokens)?;
        let seg = self.video.encode_video(b, &sample.sampled, &sample.valid)?;
        let (out, query_attention) = match &self.sqan {
            Some(sqan) => {
                let set = sqan.extract_phrases(b, e, q)?;
                (self.lgvti.forward(b, seg.s, QueryRepr::Phrases(&set))?, Some(set.attn))
            }
            None => (self.lgvti.forward(b, seg.s, QueryRepr::Sentence(q))?, None),
        };
        let mask = self.attention_mask(&sample.valid);
        let head = self.head.predict_interval(b, out.r, mask.as_ref())?;
        Ok(ForwardOutput {
            head,
            query_attention,
            pool_weights: out.pool_weights,
        })
    }

    /// Objective on an existing binding; used directly by gradient checks.
    pub fn loss_on(&self, b: &Bound, sample: &PreparedSample, loss: &LossConfig) -> Result<(Var, LossBreakdown)> {
        let out = self.forward(b, sample)?;
        total_loss(b.tape, &out.head, out.query_attention, sample.gt, &sample.guide, loss)
    }

    pub fn loss_and_grads(&self, sample: &PreparedSample, loss: &LossConfig) -> Result<(LossBreakdown, Vec<Tensor>)> {
        let tape = Tape::new();
        let b = self.store.bind(&tape, true);
        let (total, breakdown) = self.loss_on(&b, sample, loss)?;
        tape.backward(total)?;
        Ok((breakdown, b.grads(&self.store)))
    }

    pub fn predict(&self, sample: &PreparedSample) -> Result<Prediction> {
        let tape = Tape::new();
        let b = self.store.bind(&tape, false);
        let out = self.forward(&b, sample)?;
        Ok(Prediction::from_output(&tape, &out.head))
    }

    /// Query attention `L×N` for one sample, if the variant has one.
    pub fn query_attention(&self, sample: &PreparedSample) -> Result<Option<Tensor>> {
        let tape = Tape::new();
        let b = self.store.bind(&tape, false);
        let out = self.forward(&b, sample)?;
        Ok(out.query_attention.map(|a| tape.value(a)))
    }
}

/// Worst relative gradient error of the full objective against central
/// differences, on a random sample with `len` query tokens and a random model.
pub fn check_model_gradient(config: &ModelConfig, len: usize, loss: &LossConfig, seed: u64, eps: f64) -> Result<f64> {
    if len == 0 {
        return Err(Error::EmptyQuery);
    }
    let model = LgiModel::new(config.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let tokens = (0..len).map(|_| rng.gen_range(2..config.vocab_size.max(3))).collect();
    let sampled = Tensor::from_fn(&[config.d_v, config.segments], |_| rng.gen_range(-1.0..1.0));
    let a: f64 = rng.gen_range(0.0..0.6);
    let gt = (a, a + rng.gen_range(0.2..0.4));
    let sample = PreparedSample {
        video_id: "probe".into(),
        tokens,
        sampled,
        valid: vec![true; config.segments],
        gt,
        guide: TemporalGuide::from_interval(gt.0, gt.1, config.segments),
    };
    grad_check_many(
        |tape, vars| {
            let b = Bound::from_vars(tape, vars.to_vec());
            Ok(model.loss_on(&b, &sample, loss)?.0)
        },
        model.store.tensors(),
        eps,
    )
}

/// Mean over pairs `i < j` of the dot product between query attention columns.
pub fn mean_pairwise_dot(attn: &Tensor) -> Option<f64> {
    let n = attn.cols();
    if n < 2 {
        return None;
    }
    let mut total = 0.0;
    let mut pairs = 0;
    for i in 0..n {
        for j in (i + 1)..n {
            total += (0..attn.rows()).map(|r| attn.at(r, i) * attn.at(r, j)).sum::<f64>();
            pairs += 1;
        }
    }
    Some(total / pairs as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, SynthConfig};

    fn base(vocab_size: usize, d_v: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            d_v,
            d: 8,
            segments: 6,
            steps: 2,
            variant: Variant::Lgi,
            fusion: FusionKind::Hadamard,
            local: LocalContext::ResBlock { kernel: 3 },
            global_blocks: 1,
            order: StageOrder::FusionLocalGlobal,
            position_embedding: false,
            mask_padding: false,
        }
    }

    fn census(cfg: &ModelConfig) -> Vec<(String, usize)> {
        let m = LgiModel::new(cfg.clone(), 1).unwrap();
        ["query.", "video.", "sqan.", "lgvti.fusion.", "lgvti.local.", "lgvti.global.nl", "lgvti.global.satt", "head."]
            .iter()
            .map(|p| (p.to_string(), m.store.census(p)))
            .collect()
    }

    fn changed(a: &ModelConfig, b: &ModelConfig) -> Vec<String> {
        census(a)
            .into_iter()
            .zip(census(b))
            .filter(|(x, y)| x.1 != y.1)
            .map(|(x, _)| x.0)
            .collect()
    }

    #[test]
    fn ablation_flags_touch_only_their_subnetwork() {
        let c = base(10, 4);
        let total = LgiModel::new(c.clone(), 1).unwrap().store.num_scalars();
        assert_eq!(census(&c).iter().map(|x| x.1).sum::<usize>(), total);

        let pos = ModelConfig { position_embedding: true, ..c.clone() };
        assert_eq!(changed(&c, &pos), vec!["video."]);
        let concat = ModelConfig { fusion: FusionKind::Concat, ..c.clone() };
        assert_eq!(changed(&c, &concat), vec!["lgvti.fusion."]);
        let none = ModelConfig { local: LocalContext::None, ..c.clone() };
        assert_eq!(changed(&c, &none), vec!["lgvti.local."]);
        assert_eq!(LgiModel::new(none, 1).unwrap().store.census("lgvti.local."), 0);
        let nl = ModelConfig { local: LocalContext::MaskedNl { blocks: 2, window: 3 }, ..c.clone() };
        assert_eq!(changed(&c, &nl), vec!["lgvti.local."]);
        let global = ModelConfig { global_blocks: 3, ..c.clone() };
        assert_eq!(changed(&c, &global), vec!["lgvti.global.nl"]);
        let sentence = ModelConfig { variant: Variant::LgiSqan, ..c.clone() };
        assert_eq!(changed(&c, &sentence), vec!["sqan.", "lgvti.fusion.", "lgvti.global.satt"]);
        let order = ModelConfig { order: StageOrder::LocalGlobalFusion, ..c.clone() };
        assert!(changed(&c, &order).is_empty());
        let mask = ModelConfig { mask_padding: true, ..c.clone() };
        assert!(changed(&c, &mask).is_empty());
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = LgiModel::new(base(10, 4), 5).unwrap();
        let b = LgiModel::new(base(10, 4), 5).unwrap();
        assert_eq!(a.store.tensors(), b.store.tensors());
        let c = LgiModel::new(base(10, 4), 6).unwrap();
        assert_ne!(a.store.tensors(), c.store.tensors());
    }

    #[test]
    fn odd_width_rejected() {
        assert!(matches!(
            LgiModel::new(ModelConfig { d: 7, ..base(10, 4) }, 1),
            Err(Error::ConfigInvalid(_))
        ));
    }

    fn tiny_sample(d_v: usize) -> (Vocabulary, PreparedSample) {
        let corpus = generate(&SynthConfig { d_v, t_raw_min: 9, t_raw_max: 12, ..SynthConfig::default() }, 5, 1).unwrap();
        let s = corpus.train.iter().find(|s| s.tokens.len() >= 3).unwrap_or(&corpus.train[0]);
        let p = PreparedSample::new(s, &corpus.vocab, 6).unwrap();
        (corpus.vocab, p)
    }

    #[test]
    fn padding_mask_hides_padded_segments() {
        let corpus = generate(&SynthConfig { d_v: 4, t_raw_min: 6, t_raw_max: 6, phrases_max: 1, ..SynthConfig::default() }, 2, 1).unwrap();
        let mut cfg = base(corpus.vocab.len(), 4);
        cfg.segments = 10;
        cfg.mask_padding = true;
        let m = LgiModel::new(cfg, 2).unwrap();
        let p = PreparedSample::new(&corpus.train[0], &corpus.vocab, 10).unwrap();
        let pred = m.predict(&p).unwrap();
        assert!(pred.attention[6..].iter().all(|&o| o == 0.0));
        assert!((pred.attention.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sentence_variant_has_no_distinctness_term() {
        let (vocab, p) = tiny_sample(4);
        let cfg = ModelConfig { variant: Variant::LgiSqan, ..base(vocab.len(), 4) };
        let m = LgiModel::new(cfg, 3).unwrap();
        let (br, _) = m.loss_and_grads(&p, &LossConfig::default()).unwrap();
        assert_eq!(br.l_dqa, 0.0);
        assert!(br.l_reg > 0.0 && br.l_tag > 0.0);
        assert!(m.query_attention(&p).unwrap().is_none());
    }

    #[test]
    fn full_loss_gradient() {
        let (vocab, p) = tiny_sample(4);
        let m = LgiModel::new(base(vocab.len(), 4), 4).unwrap();
        let lc = LossConfig::default();
        let err = grad_check_many(
            |tape, vars| {
                let b = Bound::from_vars(tape, vars.to_vec());
                Ok(m.loss_on(&b, &p, &lc)?.0)
            },
            m.store.tensors(),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn pairwise_dot() {
        let a = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(mean_pairwise_dot(&a), Some(0.0));
        let u = Tensor::filled(&[4, 3], 0.25);
        assert_eq!(mean_pairwise_dot(&u), Some(0.25));
        assert_eq!(mean_pairwise_dot(&Tensor::filled(&[3, 1], 1.0 / 3.0)), None);
    }
}
