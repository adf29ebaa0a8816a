//! Adam, the training loop, configuration and checkpoints.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::Corpus;
use crate::encoders::Vocabulary;
use crate::error::{Error, Result};
use crate::head::Prediction;
use crate::lgvti::{FusionKind, LocalContext, StageOrder};
use crate::losses::{LossBreakdown, LossConfig};
use crate::metrics::{evaluate, EvalReport};
use crate::model::{mean_pairwise_dot, prepare_all, LgiModel, ModelConfig, PreparedSample, Variant};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"LGICKPT1";
pub const SEED_ENV: &str = "LGI_SEED";

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let zeros = || store.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// Bias-corrected update. A non-finite gradient leaves parameters and state untouched.
    pub fn update(&mut self, store: &mut ParamStore, grads: &[Tensor], lr: f64) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::shape("adam", format!("{} gradients for {} parameters", grads.len(), store.len())));
        }
        for (i, g) in grads.iter().enumerate() {
            if g.shape() != store.tensors()[i].shape() {
                return Err(Error::shape("adam", format!("gradient of `{}` has shape {:?}", store.names()[i], g.shape())));
            }
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient(store.names()[i].clone()));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (i, p) in store.tensors_mut().iter_mut().enumerate() {
            let g = grads[i].data();
            let m = self.m[i].data_mut();
            for (mj, gj) in m.iter_mut().zip(g) {
                *mj = self.beta1 * *mj + (1.0 - self.beta1) * gj;
            }
            let v = self.v[i].data_mut();
            for (vj, gj) in v.iter_mut().zip(g) {
                *vj = self.beta2 * *vj + (1.0 - self.beta2) * gj * gj;
            }
            let (m, v) = (self.m[i].data(), self.v[i].data());
            for (j, x) in p.data_mut().iter_mut().enumerate() {
                *x -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LocalKind {
    #[default]
    ResBlock,
    MaskedNl,
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub d: usize,
    pub segments: usize,
    pub steps: usize,
    pub lambda: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub variant: Variant,
    pub fusion: FusionKind,
    pub local: LocalKind,
    pub kernel: usize,
    pub window: usize,
    pub local_blocks: usize,
    pub global_blocks: usize,
    pub order: StageOrder,
    pub position_embedding: bool,
    pub mask_padding: bool,
    pub use_tag: bool,
    pub use_dqa: bool,
    /// Global gradient-norm clip; off by default.
    pub clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            d: 64,
            segments: 32,
            steps: 3,
            lambda: 0.3,
            learning_rate: 4e-4,
            batch_size: 16,
            epochs: 20,
            seed: 7,
            variant: Variant::Lgi,
            fusion: FusionKind::Hadamard,
            local: LocalKind::ResBlock,
            kernel: 15,
            window: 31,
            local_blocks: 1,
            global_blocks: 2,
            order: StageOrder::FusionLocalGlobal,
            position_embedding: true,
            mask_padding: false,
            use_tag: true,
            use_dqa: true,
            clip: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::ConfigInvalid(m.into()));
        if self.d == 0 || !self.d.is_multiple_of(2) {
            return fail("d must be even and positive");
        }
        if self.segments == 0 || self.steps == 0 || self.batch_size == 0 || self.epochs == 0 {
            return fail("segments, steps, batch_size and epochs must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail("learning_rate must be positive");
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return fail("lambda must lie in [0, 1]");
        }
        if self.local == LocalKind::ResBlock && self.kernel.is_multiple_of(2) {
            return Err(Error::EvenKernel(self.kernel));
        }
        if self.local == LocalKind::MaskedNl && (self.window.is_multiple_of(2) || self.local_blocks == 0) {
            return fail("masked non-local needs an odd window and at least one block");
        }
        if matches!(self.clip, Some(c) if c.is_nan() || c <= 0.0) {
            return fail("clip must be positive");
        }
        Ok(())
    }

    pub fn model_config(&self, vocab_size: usize, d_v: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            d_v,
            d: self.d,
            segments: self.segments,
            steps: self.steps,
            variant: self.variant,
            fusion: self.fusion,
            local: match self.local {
                LocalKind::ResBlock => LocalContext::ResBlock { kernel: self.kernel },
                LocalKind::MaskedNl => LocalContext::MaskedNl {
                    blocks: self.local_blocks,
                    window: self.window,
                },
                LocalKind::None => LocalContext::None,
            },
            global_blocks: self.global_blocks,
            order: self.order,
            position_embedding: self.position_embedding,
            mask_padding: self.mask_padding,
        }
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            lambda: self.lambda,
            use_tag: self.use_tag,
            use_dqa: self.use_dqa,
        }
    }

    /// Reads the seed override from the environment, if set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(raw) = std::env::var(SEED_ENV) {
            self.seed = raw
                .trim()
                .parse()
                .map_err(|_| Error::ConfigInvalid(format!("{SEED_ENV}={raw:?} is not an unsigned integer")))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::ConfigInvalid(format!("{}: {e}", path.display())))
    }
}

/// Sets top-level fields of a serializable config from `key=value` pairs.
/// Values are parsed as JSON, falling back to a plain string; dashes in keys become underscores.
pub fn apply_overrides<T: Serialize + DeserializeOwned>(config: &T, pairs: &[(String, String)]) -> Result<T> {
    let mut value = serde_json::to_value(config)?;
    let obj = value
        .as_object_mut()
        .ok_or_else(|| Error::ConfigInvalid("config is not an object".into()))?;
    for (key, raw) in pairs {
        let key = key.replace('-', "_");
        if !obj.contains_key(&key) {
            return Err(Error::ConfigInvalid(format!("unknown config key `{key}`")));
        }
        let parsed = serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.clone()));
        obj.insert(key, parsed);
    }
    serde_json::from_value(value).map_err(|e| Error::ConfigInvalid(e.to_string()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub l_reg: f64,
    pub l_tag: f64,
    pub l_dqa: f64,
    pub total: f64,
    pub val: EvalReport,
}

pub struct TrainOutcome {
    /// Checkpoint of the epoch with the best validation R@0.5.
    pub best: Checkpoint,
    pub best_epoch: usize,
    pub history: Vec<EpochLog>,
}

pub fn predict_all(model: &LgiModel, samples: &[PreparedSample]) -> Result<Vec<Prediction>> {
    samples.iter().map(|s| model.predict(s)).collect()
}

pub fn evaluate_model(model: &LgiModel, samples: &[PreparedSample]) -> Result<EvalReport> {
    let preds: Vec<(f64, f64)> = predict_all(model, samples)?.iter().map(Prediction::interval).collect();
    let gts: Vec<(f64, f64)> = samples.iter().map(|s| s.gt).collect();
    evaluate(&preds, &gts)
}

/// Mean over samples of the mean pairwise dot product between query attention columns.
pub fn attention_overlap(model: &LgiModel, samples: &[PreparedSample]) -> Result<Option<f64>> {
    let mut total = 0.0;
    let mut count = 0usize;
    for s in samples {
        if let Some(v) = model.query_attention(s)?.as_ref().and_then(mean_pairwise_dot) {
            total += v;
            count += 1;
        }
    }
    Ok((count > 0).then(|| total / count as f64))
}

fn clip_grads(grads: &mut [Tensor], max_norm: f64) {
    let norm = grads.iter().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| g.data_mut().iter_mut().for_each(|v| *v *= s));
    }
}

/// Trains on `corpus.train`, selecting by validation R@0.5.
///
/// With `out_dir`, writes `metrics.jsonl` (one line per epoch) and `best.ckpt`.
/// A non-finite loss or gradient aborts with [`Error::Diverged`]; the best
/// checkpoint already on disk is kept.
pub fn train(config: &TrainConfig, corpus: &Corpus, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    config.validate()?;
    let d_v = corpus
        .train
        .first()
        .ok_or_else(|| Error::ConfigInvalid("empty training split".into()))?
        .features
        .rows();
    let train_set = prepare_all(&corpus.train, &corpus.vocab, config.segments)?;
    let val_set = prepare_all(&corpus.val, &corpus.vocab, config.segments)?;
    let mut model = LgiModel::new(config.model_config(corpus.vocab.len(), d_v), config.seed)?;
    let mut adam = Adam::new(&model.store);
    let loss_cfg = config.loss_config();

    let mut log = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join("metrics.jsonl");
            Some((BufWriter::new(File::create(&path).map_err(|e| Error::io(&path, e))?), path))
        }
        None => None,
    };

    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
    shuffle_rng.set_stream(1);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, Checkpoint)> = None;

    for epoch in 1..=config.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut sums = LossBreakdown::default();
        for batch in order.chunks(config.batch_size) {
            let mut acc: Vec<Tensor> = model.store.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
            for &i in batch {
                let (br, grads) = model
                    .loss_and_grads(&train_set[i], &loss_cfg)
                    .map_err(|e| diverged(epoch, e))?;
                if !br.total.is_finite() {
                    return Err(Error::Diverged {
                        epoch,
                        msg: format!("non-finite loss on {}", train_set[i].video_id),
                    });
                }
                sums.accumulate(&br);
                for (a, g) in acc.iter_mut().zip(&grads) {
                    a.data_mut().iter_mut().zip(g.data()).for_each(|(x, y)| *x += y);
                }
            }
            let scale = 1.0 / batch.len() as f64;
            acc.iter_mut().for_each(|g| g.data_mut().iter_mut().for_each(|v| *v *= scale));
            if let Some(c) = config.clip {
                clip_grads(&mut acc, c);
            }
            adam.update(&mut model.store, &acc, config.learning_rate)
                .map_err(|e| diverged(epoch, e))?;
        }
        let mean = sums.scaled(1.0 / train_set.len() as f64);
        let val = evaluate_model(&model, &val_set)?;
        let entry = EpochLog {
            epoch,
            l_reg: mean.l_reg,
            l_tag: mean.l_tag,
            l_dqa: mean.l_dqa,
            total: mean.total,
            val,
        };
        if let Some((w, path)) = log.as_mut() {
            serde_json::to_writer(&mut *w, &entry)?;
            w.write_all(b"\n").and_then(|_| w.flush()).map_err(|e| Error::io(&*path, e))?;
        }
        let r05 = entry.val.recall(0.5).unwrap_or(0.0);
        if best.as_ref().is_none_or(|b| r05 > b.0) {
            let ckpt = Checkpoint {
                model: model.clone(),
                adam: adam.clone(),
                train_config: config.clone(),
                vocab: corpus.vocab.clone(),
                epoch,
            };
            if let Some(dir) = out_dir {
                ckpt.save(&dir.join("best.ckpt"))?;
            }
            best = Some((r05, epoch, ckpt));
        }
        history.push(entry);
    }
    let (_, best_epoch, best) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        best,
        best_epoch,
        history,
    })
}

fn diverged(epoch: usize, e: Error) -> Error {
    match e {
        Error::NonFiniteGradient(name) => Error::Diverged {
            epoch,
            msg: format!("non-finite gradient for `{name}`"),
        },
        Error::NonFiniteValue(msg) => Error::Diverged { epoch, msg },
        other => other,
    }
}

/// Model parameters, optimizer moments and everything needed to rebuild the model.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: LgiModel,
    pub adam: Adam,
    pub train_config: TrainConfig,
    pub vocab: Vocabulary,
    pub epoch: usize,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    model_config: ModelConfig,
    train_config: TrainConfig,
    vocab: Vocabulary,
    epoch: usize,
    step: u64,
    /// SHA-256 of the payload, hex.
    digest: String,
}

impl Checkpoint {
    /// Magic, `u64` header length, JSON header, then `f64` little-endian parameters, first and second moments.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let store = &self.model.store;
        let mut payload = Vec::with_capacity(24 * store.num_scalars());
        for group in [store.tensors(), &self.adam.m[..], &self.adam.v[..]] {
            for t in group {
                for v in t.data() {
                    payload.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        let header = CheckpointHeader {
            names: store.names().to_vec(),
            shapes: store.tensors().iter().map(|t| t.shape().to_vec()).collect(),
            model_config: self.model.config.clone(),
            train_config: self.train_config.clone(),
            vocab: self.vocab.clone(),
            epoch: self.epoch,
            step: self.adam.step,
            digest: hex_digest(&payload),
        };
        let header = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + header.len() + payload.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let fail = |offset: usize, msg: String| Error::Format {
            path: path.to_owned(),
            video_id: None,
            offset: offset as u64,
            msg,
        };
        if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(fail(0, "not a checkpoint".into()));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = 16usize
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| fail(8, format!("header length {header_len} exceeds file")))?;
        let header: CheckpointHeader =
            serde_json::from_slice(&bytes[16..body]).map_err(|e| fail(16, format!("bad header: {e}")))?;
        let payload = &bytes[body..];
        if hex_digest(payload) != header.digest {
            return Err(fail(body, "payload digest mismatch".into()));
        }
        let mut model = LgiModel::new(header.model_config.clone(), 0)?;
        if model.store.names() != header.names.as_slice() {
            return Err(fail(16, "parameter names do not match the configuration".into()));
        }
        let n = model.store.num_scalars();
        if payload.len() != 24 * n {
            return Err(fail(body, format!("payload holds {} bytes, expected {}", payload.len(), 24 * n)));
        }
        let mut values = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        let mut fill = |t: &mut Tensor| t.data_mut().iter_mut().for_each(|x| *x = values.next().unwrap());
        for (t, shape) in model.store.tensors_mut().iter_mut().zip(&header.shapes) {
            if t.shape() != shape.as_slice() {
                return Err(fail(16, format!("shape mismatch {:?} vs {:?}", t.shape(), shape)));
            }
            fill(t);
        }
        let mut adam = Adam::new(&model.store);
        adam.m.iter_mut().for_each(&mut fill);
        adam.v.iter_mut().for_each(&mut fill);
        adam.step = header.step;
        Ok(Checkpoint {
            model,
            adam,
            train_config: header.train_config,
            vocab: header.vocab,
            epoch: header.epoch,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        // write-then-rename so an interrupted save never clobbers the previous file
        let tmp = PathBuf::from(format!("{}.tmp", path.display()));
        fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes, path)
    }
}

fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, SynthConfig};

    fn scalar_store(x: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("x", Tensor::scalar(x));
        s
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut s = scalar_store(1.5);
        let mut adam = Adam::new(&s);
        adam.update(&mut s, &[Tensor::scalar(0.0)], 0.1).unwrap();
        assert_eq!(s.tensors()[0].item(), 1.5);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut s = scalar_store(1.0);
        let mut adam = Adam::new(&s);
        adam.update(&mut s, &[Tensor::scalar(3.0)], 0.01).unwrap();
        assert!((s.tensors()[0].item() - 0.99).abs() < 1e-9);
    }

    #[test]
    fn minimizes_square() {
        let mut s = scalar_store(1.0);
        let mut adam = Adam::new(&s);
        for _ in 0..100 {
            let x = s.tensors()[0].item();
            adam.update(&mut s, &[Tensor::scalar(2.0 * x)], 0.1).unwrap();
        }
        assert!(s.tensors()[0].item().abs() < 0.05);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut s = scalar_store(1.0);
        let mut adam = Adam::new(&s);
        match adam.update(&mut s, &[Tensor::scalar(f64::NAN)], 0.1) {
            Err(Error::NonFiniteGradient(name)) => assert_eq!(name, "x"),
            other => panic!("{other:?}"),
        }
        assert_eq!(s.tensors()[0].item(), 1.0);
        assert_eq!(adam.step, 0);
    }

    #[test]
    fn overrides() {
        let c = TrainConfig::default();
        let pairs = vec![
            ("d".to_string(), "16".to_string()),
            ("fusion".to_string(), "concat".to_string()),
            ("use-dqa".to_string(), "false".to_string()),
            ("local".to_string(), "masked_nl".to_string()),
        ];
        let o = apply_overrides(&c, &pairs).unwrap();
        assert_eq!(o.d, 16);
        assert_eq!(o.fusion, FusionKind::Concat);
        assert!(!o.use_dqa);
        assert_eq!(o.local, LocalKind::MaskedNl);
        assert!(apply_overrides(&c, &[("nope".into(), "1".into())]).is_err());
        assert!(apply_overrides(&c, &[("d".into(), "many".into())]).is_err());
    }

    #[test]
    fn config_validation() {
        let even = TrainConfig { kernel: 4, ..TrainConfig::default() };
        assert!(matches!(even.validate(), Err(Error::EvenKernel(4))));
        let odd_d = TrainConfig { d: 9, ..TrainConfig::default() };
        assert!(odd_d.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }

    fn tiny() -> (TrainConfig, Corpus) {
        let corpus = generate(&SynthConfig { d_v: 6, t_raw_min: 12, t_raw_max: 16, ..SynthConfig::default() }, 24, 6).unwrap();
        let cfg = TrainConfig {
            d: 8,
            segments: 8,
            steps: 2,
            kernel: 3,
            global_blocks: 1,
            batch_size: 5,
            epochs: 2,
            learning_rate: 1e-2,
            ..TrainConfig::default()
        };
        (cfg, corpus)
    }

    #[test]
    fn training_is_deterministic_and_checkpoints_round_trip() {
        let (cfg, corpus) = tiny();
        let dir = tempfile::tempdir().unwrap();
        let a = train(&cfg, &corpus, Some(dir.path())).unwrap();
        let b = train(&cfg, &corpus, None).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap().lines().count(), 2);

        let loaded = Checkpoint::load(&dir.path().join("best.ckpt")).unwrap();
        assert_eq!(loaded.model.store.tensors(), a.best.model.store.tensors());
        assert_eq!(loaded.adam, a.best.adam);
        assert_eq!(loaded.vocab, corpus.vocab);
        let val = prepare_all(&corpus.val, &corpus.vocab, cfg.segments).unwrap();
        for s in &val {
            assert_eq!(loaded.model.predict(s).unwrap(), a.best.model.predict(s).unwrap());
        }
    }

    #[test]
    fn dqa_off_logs_zero() {
        let (cfg, corpus) = tiny();
        let cfg = TrainConfig { use_dqa: false, epochs: 1, ..cfg };
        let out = train(&cfg, &corpus, None).unwrap();
        assert!(out.history.iter().all(|h| h.l_dqa == 0.0));
    }

    #[test]
    fn corrupted_checkpoint_rejected() {
        let (cfg, corpus) = tiny();
        let out = train(&TrainConfig { epochs: 1, ..cfg }, &corpus, None).unwrap();
        let mut bytes = out.best.to_bytes().unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 1;
        assert!(matches!(
            Checkpoint::from_bytes(&bytes, Path::new("x")),
            Err(Error::Format { .. })
        ));
    }
}
