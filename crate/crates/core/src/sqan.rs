//! Sequential query attention: extracts `N` phrase features from the word
//! features, each step conditioned on the phrase found by the previous one.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{broadcast_cols, Bound, ParamId, ParamStore};
use crate::tensor::{Tensor, Var};

#[derive(Clone, Debug)]
pub struct SqanParams {
    pub w_g: ParamId,
    /// One query embedding per step.
    pub w_q: Vec<ParamId>,
    pub w_qatt: ParamId,
    pub w_galpha: ParamId,
    pub w_walpha: ParamId,
}

/// Phrase features `d×N` and the `L×N` query-attention matrix `A`.
#[derive(Clone, Debug)]
pub struct PhraseSet {
    pub phrases: Var,
    pub attn: Var,
    /// Each phrase as a `d×1` column, in step order.
    pub columns: Vec<Var>,
}

impl SqanParams {
    pub fn new(store: &mut ParamStore, d: usize, steps: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if steps == 0 {
            return Err(Error::NInvalid(steps));
        }
        let h = d / 2;
        Ok(SqanParams {
            w_g: store.uniform("sqan.w_g", &[d, 2 * d], 2 * d, rng),
            w_q: (0..steps)
                .map(|n| store.uniform(format!("sqan.w_q.{n}"), &[d, d], d, rng))
                .collect(),
            w_qatt: store.uniform("sqan.w_qatt", &[1, h], h, rng),
            w_galpha: store.uniform("sqan.w_galpha", &[h, d], d, rng),
            w_walpha: store.uniform("sqan.w_walpha", &[h, d], d, rng),
        })
    }

    pub fn steps(&self) -> usize {
        self.w_q.len()
    }

    /// Runs all steps over word features `e` (`d×L`) and sentence feature `q` (`d×1`).
    ///
    /// Step `n` forms the guidance `g = ReLU(W_g [W_q⁽ⁿ⁾ q ; e⁽ⁿ⁻¹⁾])`, scores every
    /// word with `W_qatt tanh(W_gα g + W_wα w_l)`, and takes the softmax-weighted
    /// sum of words. The seed phrase `e⁽⁰⁾` is zero.
    pub fn extract_phrases(&self, b: &Bound, e: Var, q: Var) -> Result<PhraseSet> {
        let tape = b.tape;
        let shape = tape.shape(e);
        let [d, len] = shape[..] else {
            return Err(Error::shape("extract_phrases", format!("word features {shape:?}")));
        };
        let word_keys = tape.matmul(b.p(self.w_walpha), e)?;
        let e_t = tape.transpose(e)?;
        let mut prev = tape.constant(Tensor::zeros(&[d, 1]));
        let mut columns = Vec::with_capacity(self.steps());
        let mut attn_cols = Vec::with_capacity(self.steps());
        for &w_q in &self.w_q {
            let projected_q = tape.matmul(b.p(w_q), q)?;
            let joined = tape.concat(&[projected_q, prev], 0)?;
            let guide = tape.matmul(b.p(self.w_g), joined)?;
            let guide = tape.relu(guide)?;
            let guide_key = tape.matmul(b.p(self.w_galpha), guide)?;
            let hidden = tape.add(word_keys, broadcast_cols(tape, guide_key, len)?)?;
            let hidden = tape.tanh(hidden)?;
            let logits = tape.matmul(b.p(self.w_qatt), hidden)?;
            let weights = tape.softmax(logits, None)?;
            // e⁽ⁿ⁾ = Σ_l a_l w_l
            let phrase = tape.matmul(weights, e_t)?;
            let phrase = tape.transpose(phrase)?;
            attn_cols.push(tape.transpose(weights)?);
            columns.push(phrase);
            prev = phrase;
        }
        Ok(PhraseSet {
            phrases: tape.concat(&columns, 1)?,
            attn: tape.concat(&attn_cols, 1)?,
            columns,
        })
    }
}
