//! Synthetic grounding corpora with ground truth known by construction, and
//! their on-disk format.
//!
//! A video is a sequence of blocks, each showing one activity prototype (a
//! fixed anchor vector plus Gaussian noise). The query names the target
//! prototypes in temporal order; the ground truth is the span they cover.
//! Distractor blocks around the span never use a target prototype.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::encoders::Vocabulary;
use crate::error::{Error, Result};
use crate::metrics::{baseline_predict, center_prior, evaluate, BaselineKind, EvalReport};
use crate::tensor::Tensor;

pub const FEATURE_MAGIC: &[u8; 8] = b"LGIFEAT1";
const HEADER_LEN: usize = 16;

const NAMES: [&str; 16] = [
    "walk", "run", "jump", "sit", "stand", "wave", "open", "close", "cook", "read", "drink", "eat", "throw", "climb",
    "dance", "sing",
];
const CONNECTIVES: [&str; 2] = ["then", "and"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundingSample {
    pub video_id: String,
    /// `d_v×T_raw`; values are exactly representable in `f32`.
    pub features: Tensor,
    pub tokens: Vec<String>,
    pub start: f64,
    pub end: f64,
}

impl GroundingSample {
    pub fn gt(&self) -> (f64, f64) {
        (self.start, self.end)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Error::InvariantViolation {
            id: self.video_id.clone(),
            msg,
        };
        if !(0.0 <= self.start && self.start < self.end && self.end <= 1.0) {
            return Err(bad(format!("interval ({}, {}) is not 0 <= start < end <= 1", self.start, self.end)));
        }
        if self.tokens.is_empty() {
            return Err(bad("empty query".into()));
        }
        if !self.features.is_finite() {
            return Err(bad("non-finite features".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_prototypes: usize,
    pub d_v: usize,
    pub t_raw_min: usize,
    pub t_raw_max: usize,
    pub phrases_min: usize,
    pub phrases_max: usize,
    /// Fraction of the video covered by the target span.
    pub span_min: f64,
    pub span_max: f64,
    pub distractor_block_min: usize,
    pub distractor_block_max: usize,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_prototypes: 8,
            d_v: 32,
            t_raw_min: 32,
            t_raw_max: 64,
            phrases_min: 1,
            phrases_max: 3,
            span_min: 0.1,
            span_max: 0.5,
            distractor_block_min: 3,
            distractor_block_max: 8,
            noise_std: 0.5,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::ConfigInvalid(m.into()));
        if self.n_prototypes < 2 {
            return fail("n_prototypes must be at least 2");
        }
        if self.d_v == 0 {
            return fail("d_v must be positive");
        }
        if self.t_raw_min == 0 || self.t_raw_min > self.t_raw_max {
            return fail("need 0 < t_raw_min <= t_raw_max");
        }
        if self.phrases_min == 0 || self.phrases_min > self.phrases_max {
            return fail("need 0 < phrases_min <= phrases_max");
        }
        if self.phrases_max >= self.n_prototypes {
            return fail("phrases_max must leave at least one distractor prototype");
        }
        if !(0.0 < self.span_min && self.span_min <= self.span_max && self.span_max < 1.0) {
            return fail("need 0 < span_min <= span_max < 1");
        }
        if self.distractor_block_min == 0 || self.distractor_block_min > self.distractor_block_max {
            return fail("need 0 < distractor_block_min <= distractor_block_max");
        }
        if self.t_raw_min < 3 * self.phrases_max {
            return fail("t_raw_min too small for the longest query");
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return fail("noise_std must be finite and non-negative");
        }
        Ok(())
    }

    pub fn prototype_name(&self, k: usize) -> String {
        NAMES.get(k).map(|s| s.to_string()).unwrap_or_else(|| format!("act{k}"))
    }
}

/// Prototype index per raw time step, with the target span `[start, end)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    pub labels: Vec<usize>,
    pub targets: Vec<usize>,
    pub span: (usize, usize),
}

impl Layout {
    pub fn gt(&self) -> (f64, f64) {
        let t = self.labels.len() as f64;
        (self.span.0 as f64 / t, self.span.1 as f64 / t)
    }
}

/// Noise-free `d_v×T` features for a layout.
pub fn render(labels: &[usize], anchors: &[Vec<f64>]) -> Tensor {
    let d_v = anchors[0].len();
    let t = labels.len();
    Tensor::from_fn(&[d_v, t], |i| anchors[labels[i % t]][i / t])
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub config: SynthConfig,
    pub train: Vec<GroundingSample>,
    pub val: Vec<GroundingSample>,
    pub vocab: Vocabulary,
    /// Prototype anchors; only present for freshly generated corpora.
    pub anchors: Option<Vec<Vec<f64>>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineNumbers {
    pub center_prior_interval: (f64, f64),
    pub center_prior: EvalReport,
    pub random_seed: u64,
    pub random: EvalReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: SynthConfig,
    pub seed: u64,
    pub n_train: usize,
    pub n_val: usize,
    /// Baselines fitted on train and scored on val.
    pub baselines: BaselineNumbers,
}

fn draw_layout(config: &SynthConfig, rng: &mut ChaCha8Rng) -> Layout {
    let t_raw = rng.gen_range(config.t_raw_min..=config.t_raw_max);
    let k = rng.gen_range(config.phrases_min..=config.phrases_max);
    let mut protos: Vec<usize> = (0..config.n_prototypes).collect();
    protos.shuffle(rng);
    let targets = protos[..k].to_vec();
    let distractors = &protos[k..];

    let frac = rng.gen_range(config.span_min..=config.span_max);
    let span_len = ((frac * t_raw as f64).round() as usize).clamp(3 * k, t_raw);
    let start = rng.gen_range(0..=t_raw - span_len);

    // split the span into k blocks of at least 3 steps
    let mut cuts: Vec<usize> = (0..k - 1).map(|_| rng.gen_range(0..=span_len - 3 * k)).collect();
    cuts.sort_unstable();
    let mut sizes = Vec::with_capacity(k);
    let mut prev = 0;
    for &c in cuts.iter().chain(std::iter::once(&(span_len - 3 * k))) {
        sizes.push(3 + c - prev);
        prev = c;
    }

    let mut labels = vec![0; t_raw];
    let fill_distractors = |from: usize, to: usize, rng: &mut ChaCha8Rng, labels: &mut Vec<usize>| {
        let mut pos = from;
        let mut last = usize::MAX;
        while pos < to {
            let len = rng.gen_range(config.distractor_block_min..=config.distractor_block_max);
            let mut p = *distractors.choose(rng).unwrap();
            if distractors.len() > 1 {
                while p == last {
                    p = *distractors.choose(rng).unwrap();
                }
            }
            last = p;
            for l in labels.iter_mut().take(to.min(pos + len)).skip(pos) {
                *l = p;
            }
            pos += len;
        }
    };
    fill_distractors(0, start, rng, &mut labels);
    let mut pos = start;
    for (&p, &s) in targets.iter().zip(&sizes) {
        labels[pos..pos + s].iter_mut().for_each(|l| *l = p);
        pos += s;
    }
    fill_distractors(start + span_len, t_raw, rng, &mut labels);
    Layout {
        labels,
        targets,
        span: (start, start + span_len),
    }
}

fn query_tokens(config: &SynthConfig, targets: &[usize], rng: &mut ChaCha8Rng) -> Vec<String> {
    let mut tokens = Vec::with_capacity(2 * targets.len());
    for (i, &p) in targets.iter().enumerate() {
        if i > 0 {
            tokens.push(CONNECTIVES.choose(rng).unwrap().to_string());
        }
        tokens.push(config.prototype_name(p));
    }
    tokens
}

fn draw_sample(
    config: &SynthConfig,
    anchors: &[Vec<f64>],
    noise: &Normal<f64>,
    video_id: String,
    rng: &mut ChaCha8Rng,
) -> GroundingSample {
    let layout = draw_layout(config, rng);
    let tokens = query_tokens(config, &layout.targets, rng);
    let mut features = render(&layout.labels, anchors);
    for v in features.data_mut() {
        *v = (*v + noise.sample(rng)) as f32 as f64;
    }
    let (start, end) = layout.gt();
    GroundingSample {
        video_id,
        features,
        tokens,
        start,
        end,
    }
}

/// Deterministic in `config.seed`. The vocabulary covers the training queries.
pub fn generate(config: &SynthConfig, n_train: usize, n_val: usize) -> Result<Corpus> {
    config.validate()?;
    if n_train == 0 || n_val == 0 {
        return Err(Error::ConfigInvalid("split sizes must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let anchors: Vec<Vec<f64>> = (0..config.n_prototypes)
        .map(|_| (0..config.d_v).map(|_| unit.sample(&mut rng)).collect())
        .collect();
    let noise = Normal::new(0.0, config.noise_std).map_err(|e| Error::ConfigInvalid(e.to_string()))?;
    let train: Vec<GroundingSample> = (0..n_train)
        .map(|i| draw_sample(config, &anchors, &noise, format!("train_{i:05}"), &mut rng))
        .collect();
    let val: Vec<GroundingSample> = (0..n_val)
        .map(|i| draw_sample(config, &anchors, &noise, format!("val_{i:05}"), &mut rng))
        .collect();
    let vocab = Vocabulary::build(train.iter().map(|s| s.tokens.as_slice()));
    Ok(Corpus {
        config: config.clone(),
        train,
        val,
        vocab,
        anchors: Some(anchors),
    })
}

pub fn gts(samples: &[GroundingSample]) -> Vec<(f64, f64)> {
    samples.iter().map(GroundingSample::gt).collect()
}

impl Corpus {
    pub fn baselines(&self, random_seed: u64) -> Result<BaselineNumbers> {
        let train = gts(&self.train);
        let val = gts(&self.val);
        let interval = center_prior(&train)?;
        let center = evaluate(&vec![interval; val.len()], &val)?;
        let random = evaluate(&baseline_predict(BaselineKind::Random, &train, val.len(), random_seed)?, &val)?;
        Ok(BaselineNumbers {
            center_prior_interval: interval,
            center_prior: center,
            random_seed,
            random,
        })
    }

    pub fn manifest(&self) -> Result<Manifest> {
        Ok(Manifest {
            config: self.config.clone(),
            seed: self.config.seed,
            n_train: self.train.len(),
            n_val: self.val.len(),
            baselines: self.baselines(self.config.seed)?,
        })
    }

    /// Writes `manifest.json`, `vocab.json`, `{train,val}.jsonl` and `features/<video_id>.bin`.
    pub fn save(&self, dir: &Path) -> Result<Manifest> {
        fs::create_dir_all(dir.join("features")).map_err(|e| Error::io(dir, e))?;
        for (split, samples) in [("train", &self.train), ("val", &self.val)] {
            save_split(dir, split, samples)?;
        }
        self.vocab.save(&dir.join("vocab.json"))?;
        let manifest = self.manifest()?;
        write_json(&dir.join("manifest.json"), &manifest)?;
        Ok(manifest)
    }

    pub fn load(dir: &Path) -> Result<Corpus> {
        let manifest = load_manifest(dir)?;
        Ok(Corpus {
            config: manifest.config,
            train: load_split(dir, "train")?,
            val: load_split(dir, "val")?,
            vocab: Vocabulary::load(&dir.join("vocab.json"))?,
            anchors: None,
        })
    }
}

pub fn load_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

#[derive(Serialize, Deserialize)]
struct Annotation {
    video_id: String,
    tokens: Vec<String>,
    start: f64,
    end: f64,
}

fn feature_path(dir: &Path, video_id: &str) -> PathBuf {
    dir.join("features").join(format!("{video_id}.bin"))
}

pub fn save_split(dir: &Path, split: &str, samples: &[GroundingSample]) -> Result<()> {
    let path = dir.join(format!("{split}.jsonl"));
    let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut out = BufWriter::new(file);
    for s in samples {
        let ann = Annotation {
            video_id: s.video_id.clone(),
            tokens: s.tokens.clone(),
            start: s.start,
            end: s.end,
        };
        serde_json::to_writer(&mut out, &ann)?;
        out.write_all(b"\n").map_err(|e| Error::io(&path, e))?;
        write_features(&feature_path(dir, &s.video_id), &s.features)?;
    }
    out.flush().map_err(|e| Error::io(&path, e))
}

/// Time-major `f32` little-endian payload after the magic and `u32` dimensions.
pub fn write_features(path: &Path, features: &Tensor) -> Result<()> {
    let (d_v, t_raw) = (features.rows(), features.cols());
    let mut buf = Vec::with_capacity(HEADER_LEN + 4 * d_v * t_raw);
    buf.extend_from_slice(FEATURE_MAGIC);
    buf.extend_from_slice(&(t_raw as u32).to_le_bytes());
    buf.extend_from_slice(&(d_v as u32).to_le_bytes());
    for t in 0..t_raw {
        for r in 0..d_v {
            buf.extend_from_slice(&(features.at(r, t) as f32).to_le_bytes());
        }
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_features(path: &Path, video_id: &str) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let fail = |offset: usize, msg: String| Error::Format {
        path: path.to_owned(),
        video_id: Some(video_id.to_owned()),
        offset: offset as u64,
        msg,
    };
    if bytes.len() < HEADER_LEN {
        return Err(fail(bytes.len(), format!("header needs {HEADER_LEN} bytes, file has {}", bytes.len())));
    }
    if &bytes[..8] != FEATURE_MAGIC {
        return Err(fail(0, "bad magic".into()));
    }
    let t_raw = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let d_v = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    if t_raw == 0 || d_v == 0 {
        return Err(fail(8, format!("empty feature block {t_raw}x{d_v}")));
    }
    let expected = HEADER_LEN + 4 * t_raw * d_v;
    if bytes.len() != expected {
        let offset = bytes.len().min(expected);
        return Err(fail(offset, format!("expected {expected} bytes for {t_raw}x{d_v} features, found {}", bytes.len())));
    }
    let mut out = Tensor::zeros(&[d_v, t_raw]);
    for (i, chunk) in bytes[HEADER_LEN..].chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(fail(HEADER_LEN + 4 * i, "non-finite feature value".into()));
        }
        out.set(i % d_v, i / d_v, v as f64);
    }
    Ok(out)
}

/// Streams `<split>.jsonl` and the matching feature files, validating each sample.
pub fn load_split(dir: &Path, split: &str) -> Result<Vec<GroundingSample>> {
    let path = dir.join(format!("{split}.jsonl"));
    let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
    let mut reader = BufReader::new(file);
    let mut samples = Vec::new();
    let mut offset = 0u64;
    let mut line = String::new();
    loop {
        line.clear();
        let n = reader.read_line(&mut line).map_err(|e| Error::io(&path, e))?;
        if n == 0 {
            break;
        }
        if !line.trim().is_empty() {
            let ann: Annotation = serde_json::from_str(&line).map_err(|e| Error::Format {
                path: path.clone(),
                video_id: None,
                offset: offset + e.column().saturating_sub(1) as u64,
                msg: e.to_string(),
            })?;
            let features = read_features(&feature_path(dir, &ann.video_id), &ann.video_id)?;
            let sample = GroundingSample {
                video_id: ann.video_id,
                features,
                tokens: ann.tokens,
                start: ann.start,
                end: ann.end,
            };
            sample.validate()?;
            samples.push(sample);
        }
        offset += n as u64;
    }
    Ok(samples)
}

/// Recovers the ground truth from noise-free features by labeling each step
/// with its nearest anchor and spanning the steps whose prototype the query names.
pub fn oracle_decode(features: &Tensor, tokens: &[String], anchors: &[Vec<f64>], config: &SynthConfig) -> Option<(f64, f64)> {
    let t = features.cols();
    let named: Vec<usize> = (0..anchors.len())
        .filter(|&k| tokens.contains(&config.prototype_name(k)))
        .collect();
    let hits: Vec<usize> = (0..t)
        .filter(|&c| {
            let label = (0..anchors.len())
                .min_by(|&a, &b| {
                    let da: f64 = anchors[a].iter().enumerate().map(|(r, v)| (features.at(r, c) - v).powi(2)).sum();
                    let db: f64 = anchors[b].iter().enumerate().map(|(r, v)| (features.at(r, c) - v).powi(2)).sum();
                    da.total_cmp(&db)
                })
                .unwrap();
            named.contains(&label)
        })
        .collect();
    let (first, last) = (*hits.first()?, *hits.last()?);
    Some((first as f64 / t as f64, (last + 1) as f64 / t as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            d_v: 8,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn single_block_layout() {
        let mut labels = vec![1; 16];
        labels[4..8].iter_mut().for_each(|l| *l = 0);
        let layout = Layout {
            labels,
            targets: vec![0],
            span: (4, 8),
        };
        assert_eq!(layout.gt(), (0.25, 0.5));
        let anchors = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let cfg = SynthConfig::default();
        let f = render(&layout.labels, &anchors);
        assert_eq!(oracle_decode(&f, &["walk".into()], &anchors, &cfg), Some((0.25, 0.5)));
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate(&small(), 20, 5).unwrap();
        let b = generate(&small(), 20, 5).unwrap();
        assert_eq!(a, b);
        let c = generate(&SynthConfig { seed: 8, ..small() }, 20, 5).unwrap();
        assert_ne!(a.train, c.train);
    }

    #[test]
    fn samples_satisfy_invariants() {
        let c = generate(&small(), 200, 20).unwrap();
        for s in c.train.iter().chain(&c.val) {
            s.validate().unwrap();
            let words: Vec<&str> = s.tokens.iter().map(String::as_str).filter(|t| !CONNECTIVES.contains(t)).collect();
            assert!(!words.is_empty() && words.len() <= 3);
        }
    }

    #[test]
    fn names_appear_iff_in_span() {
        let cfg = small();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let layout = draw_layout(&cfg, &mut rng);
            let tokens = query_tokens(&cfg, &layout.targets, &mut rng);
            for k in 0..cfg.n_prototypes {
                let in_span = layout.labels[layout.span.0..layout.span.1].contains(&k);
                let outside = layout.labels[..layout.span.0].contains(&k) || layout.labels[layout.span.1..].contains(&k);
                assert_eq!(tokens.contains(&cfg.prototype_name(k)), in_span);
                assert!(!(in_span && outside));
            }
        }
    }

    #[test]
    fn noise_free_corpus_decodes_exactly() {
        let cfg = SynthConfig {
            noise_std: 0.0,
            ..small()
        };
        let c = generate(&cfg, 100, 10).unwrap();
        let anchors = c.anchors.as_ref().unwrap();
        for s in &c.train {
            let decoded = oracle_decode(&s.features, &s.tokens, anchors, &cfg).unwrap();
            // features are rounded to f32 but stay nearest to their own anchor
            assert_eq!(decoded, s.gt(), "{}", s.video_id);
        }
    }

    #[test]
    fn config_validation() {
        assert!(matches!(
            generate(&SynthConfig { n_prototypes: 1, ..small() }, 1, 1),
            Err(Error::ConfigInvalid(_))
        ));
        assert!(matches!(
            generate(&SynthConfig { noise_std: -1.0, ..small() }, 1, 1),
            Err(Error::ConfigInvalid(_))
        ));
        assert!(generate(&small(), 0, 1).is_err());
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let c = generate(&small(), 30, 6).unwrap();
        let manifest = c.save(dir.path()).unwrap();
        let back = Corpus::load(dir.path()).unwrap();
        assert_eq!(back.train, c.train);
        assert_eq!(back.val, c.val);
        assert_eq!(back.vocab, c.vocab);
        assert_eq!(load_manifest(dir.path()).unwrap(), manifest);
    }

    #[test]
    fn truncated_features_name_the_video() {
        let dir = tempfile::tempdir().unwrap();
        let c = generate(&small(), 3, 1).unwrap();
        c.save(dir.path()).unwrap();
        let victim = feature_path(dir.path(), "train_00001");
        let bytes = fs::read(&victim).unwrap();
        fs::write(&victim, &bytes[..bytes.len() - 5]).unwrap();
        match load_split(dir.path(), "train") {
            Err(Error::Format { video_id, offset, .. }) => {
                assert_eq!(video_id.as_deref(), Some("train_00001"));
                assert_eq!(offset as usize, bytes.len() - 5);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn inverted_interval_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let c = generate(&small(), 2, 1).unwrap();
        c.save(dir.path()).unwrap();
        let path = dir.path().join("train.jsonl");
        let text = fs::read_to_string(&path).unwrap();
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        let mut ann: Annotation = serde_json::from_str(&lines[1]).unwrap();
        ann.start = ann.end;
        lines[1] = serde_json::to_string(&ann).unwrap();
        fs::write(&path, lines.join("\n") + "\n").unwrap();
        match load_split(dir.path(), "train") {
            Err(Error::InvariantViolation { id, .. }) => assert_eq!(id, "train_00001"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_annotation_reports_offset() {
        let dir = tempfile::tempdir().unwrap();
        let c = generate(&small(), 2, 1).unwrap();
        c.save(dir.path()).unwrap();
        let path = dir.path().join("train.jsonl");
        let text = fs::read_to_string(&path).unwrap();
        let first_len = text.lines().next().unwrap().len() + 1;
        fs::write(&path, format!("{}{{broken\n", &text[..first_len])).unwrap();
        match load_split(dir.path(), "train") {
            Err(Error::Format { offset, .. }) => assert!(offset as usize >= first_len),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn baselines_are_weak_on_default_corpus() {
        let c = generate(&SynthConfig::default(), 2000, 400).unwrap();
        let b = c.baselines(7).unwrap();
        assert!(b.center_prior.recall(0.5).unwrap() < 40.0, "{:?}", b.center_prior);
        assert!(b.random.recall(0.5).unwrap() < 40.0);
    }
}
