//! Query and video encoders.
//!
//! The query side embeds tokens and runs two stacked bi-directional LSTMs;
//! word features are the concatenated per-position hidden states of the top
//! layer, the sentence feature joins the last forward and first backward
//! states. The video side embeds pre-extracted segment features, applies ReLU
//! and adds a learned per-position embedding.

use std::collections::BTreeMap;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::{Tensor, Var};

pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";
pub const PAD_INDEX: usize = 0;
pub const UNK_INDEX: usize = 1;

/// Lower-cases and splits on whitespace and punctuation.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|s| !s.is_empty())
        .map(str::to_owned)
        .collect()
}

/// Token → index map. Index 0 is padding, index 1 the shared out-of-vocabulary slot.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "BTreeMap<String, usize>", into = "BTreeMap<String, usize>")]
pub struct Vocabulary {
    index: BTreeMap<String, usize>,
}

impl Vocabulary {
    /// Vocabulary over every distinct token, indexed in sorted order after the reserved slots.
    pub fn build<'a, I, S>(queries: I) -> Self
    where
        I: IntoIterator<Item = &'a [S]>,
        S: AsRef<str> + 'a,
    {
        let mut tokens: Vec<String> = queries
            .into_iter()
            .flat_map(|q| q.iter().map(|t| t.as_ref().to_owned()))
            .filter(|t| t != PAD_TOKEN && t != UNK_TOKEN)
            .collect();
        tokens.sort();
        tokens.dedup();
        let mut index = BTreeMap::new();
        index.insert(PAD_TOKEN.to_owned(), PAD_INDEX);
        index.insert(UNK_TOKEN.to_owned(), UNK_INDEX);
        for (i, t) in tokens.into_iter().enumerate() {
            index.insert(t, i + 2);
        }
        Vocabulary { index }
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Indices for `tokens`; unknown tokens map to [`UNK_INDEX`].
    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens
            .iter()
            .map(|t| self.get(t.as_ref()).unwrap_or(UNK_INDEX))
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

impl TryFrom<BTreeMap<String, usize>> for Vocabulary {
    type Error = String;

    fn try_from(index: BTreeMap<String, usize>) -> Result<Self, String> {
        if index.get(PAD_TOKEN) != Some(&PAD_INDEX) || index.get(UNK_TOKEN) != Some(&UNK_INDEX) {
            return Err(format!("vocabulary must map {PAD_TOKEN} to 0 and {UNK_TOKEN} to 1"));
        }
        let mut seen = vec![false; index.len()];
        for (tok, &i) in &index {
            if i >= seen.len() || std::mem::replace(&mut seen[i], true) {
                return Err(format!("token `{tok}` has a duplicate or out-of-range index {i}"));
            }
        }
        Ok(Vocabulary { index })
    }
}

impl From<Vocabulary> for BTreeMap<String, usize> {
    fn from(v: Vocabulary) -> Self {
        v.index
    }
}

/// One LSTM direction; gate order is input, forget, cell, output.
#[derive(Clone, Debug)]
struct LstmDirection {
    w_in: [ParamId; 4],
    w_rec: [ParamId; 4],
    bias: [ParamId; 4],
}

const GATES: [&str; 4] = ["input", "forget", "cell", "output"];

impl LstmDirection {
    fn new(store: &mut ParamStore, name: &str, input: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut mk = |kind: &str, cols: usize| {
            GATES.map(|g| {
                let shape = [hidden, cols];
                store.uniform(format!("{name}.{g}.{kind}"), &shape, hidden, rng)
            })
        };
        let w_in = mk("w_in", input);
        let w_rec = mk("w_rec", hidden);
        let bias = mk("bias", 1);
        LstmDirection { w_in, w_rec, bias }
    }

    /// Hidden state at every position of `x` (`in×L`), scanning forward or backward.
    fn run(&self, b: &Bound, x: Var, len: usize, reverse: bool) -> Result<Vec<Var>> {
        let tape = b.tape;
        let projected = (0..4)
            .map(|g| {
                let z = tape.matmul(b.p(self.w_in[g]), x)?;
                tape.add_bias(z, b.p(self.bias[g]))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut hidden: Vec<Option<Var>> = vec![None; len];
        let mut state: Option<(Var, Var)> = None;
        let order: Box<dyn Iterator<Item = usize>> = if reverse {
            Box::new((0..len).rev())
        } else {
            Box::new(0..len)
        };
        for pos in order {
            let mut gates = [x; 4];
            for g in 0..4 {
                let mut z = tape.slice_cols(projected[g], pos, 1)?;
                if let Some((h, _)) = state {
                    let r = tape.matmul(b.p(self.w_rec[g]), h)?;
                    z = tape.add(z, r)?;
                }
                gates[g] = if g == 2 { tape.tanh(z)? } else { tape.sigmoid(z)? };
            }
            let [i, f, cand, o] = gates;
            let mut c = tape.mul(i, cand)?;
            if let Some((_, c_prev)) = state {
                let keep = tape.mul(f, c_prev)?;
                c = tape.add(c, keep)?;
            }
            let c_act = tape.tanh(c)?;
            let h = tape.mul(o, c_act)?;
            hidden[pos] = Some(h);
            state = Some((h, c));
        }
        Ok(hidden.into_iter().map(Option::unwrap).collect())
    }
}

/// Word embedding table plus two stacked bi-directional LSTM layers of width `d/2` per direction.
#[derive(Clone, Debug)]
pub struct QueryEncoderParams {
    pub embedding: ParamId,
    layers: Vec<[LstmDirection; 2]>,
}

impl QueryEncoderParams {
    pub fn new(store: &mut ParamStore, vocab_size: usize, d: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if d == 0 || !d.is_multiple_of(2) {
            return Err(Error::ConfigInvalid(format!("feature size d={d} must be even and positive")));
        }
        let embedding = store.uniform("query.embedding", &[vocab_size, d], 1, rng);
        let h = d / 2;
        let layers = (0..2)
            .map(|l| {
                [
                    LstmDirection::new(store, &format!("query.lstm{l}.fwd"), d, h, rng),
                    LstmDirection::new(store, &format!("query.lstm{l}.bwd"), d, h, rng),
                ]
            })
            .collect();
        Ok(QueryEncoderParams { embedding, layers })
    }

    /// Word features `E` (`d×L`) and sentence feature `q` (`d×1`).
    pub fn encode_query(&self, b: &Bound, tokens: &[usize]) -> Result<(Var, Var)> {
        if tokens.is_empty() {
            return Err(Error::EmptyQuery);
        }
        let tape = b.tape;
        let len = tokens.len();
        let rows = tape.embedding(b.p(self.embedding), tokens)?;
        let mut x = tape.transpose(rows)?;
        let mut q = x;
        for [fwd, bwd] in &self.layers {
            let hf = fwd.run(b, x, len, false)?;
            let hb = bwd.run(b, x, len, true)?;
            let f_mat = tape.concat(&hf, 1)?;
            let b_mat = tape.concat(&hb, 1)?;
            x = tape.concat(&[f_mat, b_mat], 0)?;
            q = tape.concat(&[hf[len - 1], hb[0]], 0)?;
        }
        Ok((x, q))
    }
}

/// Segment embedding `W_seg` (`d×d_v`) and position table `W_pos` (`d×T`).
#[derive(Clone, Debug)]
pub struct VideoEncoderParams {
    pub w_seg: ParamId,
    pub w_pos: Option<ParamId>,
    pub segments: usize,
}

/// Encoded segments and which of them hold real (non-padded) video.
#[derive(Clone, Copy, Debug)]
pub struct SegmentFeatures<'m> {
    pub s: Var,
    pub valid_mask: &'m [bool],
}

/// Uniformly resample a `d_v×T_raw` feature matrix to `T` columns.
///
/// Longer inputs pick columns `round(i·(T_raw−1)/(T−1))`; shorter ones are
/// copied left-aligned and zero-filled. Returns the sampled matrix and the
/// per-column validity mask.
pub fn sample_segments(raw: &Tensor, segments: usize) -> Result<(Tensor, Vec<bool>)> {
    if raw.rank() != 2 {
        return Err(Error::shape("sample_segments", format!("expected d_v×T_raw, got {:?}", raw.shape())));
    }
    if segments == 0 {
        return Err(Error::ConfigInvalid("segment count must be positive".into()));
    }
    let (d_v, t_raw) = (raw.rows(), raw.cols());
    let mut out = Tensor::zeros(&[d_v, segments]);
    let mut mask = vec![false; segments];
    let picks: Vec<usize> = if t_raw >= segments {
        if segments == 1 {
            vec![0]
        } else {
            let step = (t_raw - 1) as f64 / (segments - 1) as f64;
            (0..segments).map(|i| (i as f64 * step).round() as usize).collect()
        }
    } else {
        (0..t_raw).collect()
    };
    for (dst, &src) in picks.iter().enumerate() {
        mask[dst] = true;
        for r in 0..d_v {
            out.set(r, dst, raw.at(r, src));
        }
    }
    Ok((out, mask))
}

impl VideoEncoderParams {
    pub fn new(
        store: &mut ParamStore,
        d_v: usize,
        d: usize,
        segments: usize,
        position_embedding: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let w_seg = store.uniform("video.w_seg", &[d, d_v], d_v, rng);
        let w_pos = position_embedding.then(|| store.uniform("video.w_pos", &[d, segments], d, rng));
        VideoEncoderParams { w_seg, w_pos, segments }
    }

    /// `S = ReLU(W_seg · sampled) + W_pos`. Padded columns still receive their position embedding.
    pub fn encode_video<'m>(&self, b: &Bound, sampled: &Tensor, valid_mask: &'m [bool]) -> Result<SegmentFeatures<'m>> {
        if sampled.rank() != 2 || sampled.cols() != self.segments || valid_mask.len() != self.segments {
            return Err(Error::shape(
                "encode_video",
                format!("expected d_v×{} features, got {:?}", self.segments, sampled.shape()),
            ));
        }
        let tape = b.tape;
        let x = tape.constant(sampled.clone());
        let emb = tape.matmul(b.p(self.w_seg), x)?;
        let mut s = tape.relu(emb)?;
        if let Some(pos) = self.w_pos {
            s = tape.add(s, b.p(pos))?;
        }
        Ok(SegmentFeatures { s, valid_mask })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check_many, Tape};
    use rand::SeedableRng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    #[test]
    fn tokenizer_lowercases_and_splits_punctuation() {
        assert_eq!(tokenize("Person opens, the DOOR."), vec!["person", "opens", "the", "door"]);
    }

    #[test]
    fn vocabulary_roundtrip_and_oov() {
        let q1 = vec!["open".to_string(), "door".to_string()];
        let q2 = vec!["close".to_string(), "door".to_string()];
        let v = Vocabulary::build([q1.as_slice(), q2.as_slice()]);
        assert_eq!(v.len(), 5);
        assert_eq!(v.encode(&["door", "window"]), vec![v.get("door").unwrap(), UNK_INDEX]);
        let json = serde_json::to_string(&v).unwrap();
        let back: Vocabulary = serde_json::from_str(&json).unwrap();
        assert_eq!(back, v);
        assert!(serde_json::from_str::<Vocabulary>(r#"{"<pad>":0,"<unk>":1,"a":1}"#).is_err());
    }

    #[test]
    fn single_token_query_sentence_equals_word() {
        let mut store = ParamStore::new();
        let enc = QueryEncoderParams::new(&mut store, 6, 8, &mut rng()).unwrap();
        let tape = Tape::new();
        let b = store.bind(&tape, false);
        let (e, q) = enc.encode_query(&b, &[3]).unwrap();
        assert_eq!(tape.shape(e), vec![8, 1]);
        assert_eq!(tape.value(e).data(), tape.value(q).data());
    }

    #[test]
    fn zero_weights_give_constant_features() {
        let mut store = ParamStore::new();
        let enc = QueryEncoderParams::new(&mut store, 6, 8, &mut rng()).unwrap();
        store.tensors_mut().iter_mut().for_each(|t| t.data_mut().fill(0.0));
        let tape = Tape::new();
        let b = store.bind(&tape, false);
        let (e1, q1) = enc.encode_query(&b, &[2, 3, 4]).unwrap();
        let (e2, q2) = enc.encode_query(&b, &[5, 5, 1]).unwrap();
        assert_eq!(tape.value(e1), tape.value(e2));
        assert_eq!(tape.value(q1), tape.value(q2));
        assert!(tape.value(e1).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn reversal_changes_word_features() {
        let mut store = ParamStore::new();
        let enc = QueryEncoderParams::new(&mut store, 8, 8, &mut rng()).unwrap();
        let tape = Tape::new();
        let b = store.bind(&tape, false);
        let (e1, _) = enc.encode_query(&b, &[2, 3, 4, 5]).unwrap();
        let (e2, _) = enc.encode_query(&b, &[5, 4, 3, 2]).unwrap();
        assert!(tape.value(e1).max_abs_diff(&tape.value(e2)) > 1e-6);
    }

    #[test]
    fn deterministic_encoding() {
        let mut store = ParamStore::new();
        let enc = QueryEncoderParams::new(&mut store, 8, 8, &mut rng()).unwrap();
        let run = || {
            let tape = Tape::new();
            let b = store.bind(&tape, false);
            let (e, q) = enc.encode_query(&b, &[2, 7, 4]).unwrap();
            (tape.value(e), tape.value(q))
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn empty_query_rejected() {
        let mut store = ParamStore::new();
        let enc = QueryEncoderParams::new(&mut store, 4, 8, &mut rng()).unwrap();
        let tape = Tape::new();
        let b = store.bind(&tape, false);
        assert!(matches!(enc.encode_query(&b, &[]), Err(Error::EmptyQuery)));
    }

    #[test]
    fn sentence_gradient_wrt_embedding_matches_finite_differences() {
        let mut store = ParamStore::new();
        let enc = QueryEncoderParams::new(&mut store, 5, 8, &mut rng()).unwrap();
        let tokens = [1, 3, 4];
        let err = grad_check_many(
            |tape, vars| {
                // the embedding table is the probed input; everything else stays fixed
                let mut b = store.bind(tape, false);
                b.replace(enc.embedding, vars[0]);
                let (_, q) = enc.encode_query(&b, &tokens)?;
                tape.sum(q, None)
            },
            &[store.get(enc.embedding).clone()],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn sampling_rules() {
        let raw = Tensor::from_fn(&[2, 5], |i| i as f64);
        let (s, m) = sample_segments(&raw, 3).unwrap();
        assert_eq!(s.col(1), raw.col(2));
        assert_eq!(s.col(2), raw.col(4));
        assert_eq!(m, vec![true; 3]);

        let (s, _) = sample_segments(&raw, 5).unwrap();
        assert_eq!(s, raw);

        let raw = Tensor::from_fn(&[2, 2], |i| 1.0 + i as f64);
        let (s, m) = sample_segments(&raw, 4).unwrap();
        assert_eq!(s.col(0), raw.col(0));
        assert_eq!(s.col(1), raw.col(1));
        assert_eq!(s.col(2), vec![0.0, 0.0]);
        assert_eq!(m, vec![true, true, false, false]);
    }

    #[test]
    fn video_encoding_cases() {
        let mut store = ParamStore::new();
        let enc = VideoEncoderParams::new(&mut store, 3, 4, 5, true, &mut rng());
        let raw = Tensor::from_fn(&[3, 5], |i| (i as f64 * 0.3).sin());
        let mask = vec![true; 5];

        let mut zero_seg = store.clone();
        zero_seg.get_mut(enc.w_seg).data_mut().fill(0.0);
        let tape = Tape::new();
        let b = zero_seg.bind(&tape, false);
        let s = enc.encode_video(&b, &raw, &mask).unwrap().s;
        assert_eq!(tape.value(s), *store.get(enc.w_pos.unwrap()));

        let mut zero_pos = store.clone();
        zero_pos.get_mut(enc.w_pos.unwrap()).data_mut().fill(0.0);
        let tape = Tape::new();
        let b = zero_pos.bind(&tape, false);
        let s = enc.encode_video(&b, &Tensor::zeros(&[3, 5]), &mask).unwrap().s;
        assert!(tape.value(s).data().iter().all(|&v| v == 0.0));
    }
}
