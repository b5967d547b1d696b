//! Tokenization and the expression encoder producing the language feature.
//!
//! Pipeline: embedding lookup, a linear projection, then a bidirectional
//! Elman recurrence. The last hidden state of each direction is
//! concatenated and projected to the language feature dimension.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{lecun_bound, uniform, Bound, ParamId, ParamStore};
use crate::tensor::Tensor;

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
const RESERVED: usize = 2;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Builds a vocabulary from token lists. Tokens are sorted so the id
    /// assignment is independent of input order.
    pub fn build<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut all: Vec<String> = tokens.into_iter().map(|t| t.as_ref().to_string()).collect();
        all.sort();
        all.dedup();
        Self::from_ordered(all)
    }

    fn from_ordered(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i + RESERVED))
            .collect();
        Vocabulary { tokens, index }
    }

    /// Builds from raw expressions using the same splitting as [`tokenize`].
    pub fn from_expressions<'a>(exprs: impl IntoIterator<Item = &'a str>) -> Self {
        Self::build(exprs.into_iter().flat_map(split_words))
    }

    pub fn size(&self) -> usize {
        self.tokens.len() + RESERVED
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> &str {
        match id {
            PAD_ID => "<pad>",
            UNK_ID => "<unk>",
            _ => &self.tokens[id - RESERVED],
        }
    }

    /// One token per line; line `n` (zero-based) holds id `n + 2`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for t in &self.tokens {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut tokens = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let tok = line.trim();
            if tok.is_empty() || tok.contains(char::is_whitespace) {
                return Err(Error::Parse {
                    path: "<vocabulary>".into(),
                    line: n + 1,
                    msg: format!("invalid token {line:?}"),
                });
            }
            tokens.push(tok.to_string());
        }
        let vocab = Self::from_ordered(tokens);
        if vocab.index.len() != vocab.tokens.len() {
            return Err(Error::Invalid("vocabulary contains duplicate tokens".into()));
        }
        Ok(vocab)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    ids: Vec<usize>,
}

impl TokenSequence {
    pub fn new(ids: Vec<usize>, vocab: &Vocabulary) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::EmptyExpression);
        }
        if let Some(bad) = ids.iter().find(|&&i| i >= vocab.size()) {
            return Err(Error::Invalid(format!(
                "token id {bad} outside vocabulary of size {}",
                vocab.size()
            )));
        }
        Ok(TokenSequence { ids })
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

fn split_words(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_string)
        .collect()
}

/// Lowercases, splits on whitespace and punctuation, and maps words to ids.
pub fn tokenize(text: &str, vocab: &Vocabulary) -> Result<TokenSequence> {
    let words = split_words(text);
    if words.is_empty() {
        return Err(Error::EmptyExpression);
    }
    let ids = words.iter().map(|w| vocab.id(w)).collect();
    TokenSequence::new(ids, vocab)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncoderKind {
    Recurrent,
    /// Mean of embeddings; order-insensitive, for diagnostics.
    BagOfWords,
}

impl fmt::Display for EncoderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EncoderKind::Recurrent => "birnn",
            EncoderKind::BagOfWords => "bow",
        })
    }
}

impl std::str::FromStr for EncoderKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "birnn" => Ok(EncoderKind::Recurrent),
            "bow" => Ok(EncoderKind::BagOfWords),
            _ => Err(Error::Config(format!("unknown encoder `{s}` (birnn | bow)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExpressionDims {
    pub vocab_size: usize,
    pub embed: usize,
    /// Width of the projected token features and of each recurrent state.
    pub hidden: usize,
    pub output: usize,
}

#[derive(Debug, Clone, Copy)]
struct RnnCell {
    wx: ParamId,
    wh: ParamId,
    b: ParamId,
}

impl RnnCell {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, h: usize) -> Self {
        let bound = lecun_bound(2 * h);
        RnnCell {
            wx: store.add(format!("{prefix}.wx"), uniform(rng, &[h, h], bound)),
            wh: store.add(format!("{prefix}.wh"), uniform(rng, &[h, h], bound)),
            b: store.add(format!("{prefix}.b"), Tensor::zeros(&[h])),
        }
    }

    fn step(&self, tape: &mut Tape, p: &Bound, x: Var, h: Option<Var>) -> Result<Var> {
        let mut pre = tape.linear(x, p[self.wx], Some(p[self.b]))?;
        if let Some(h) = h {
            let rec = tape.linear(h, p[self.wh], None)?;
            pre = tape.add(pre, rec)?;
        }
        Ok(tape.tanh(pre))
    }
}

/// Expression encoder parameters, registered in a shared [`ParamStore`].
#[derive(Debug, Clone)]
pub struct ExpressionEncoder {
    kind: EncoderKind,
    dims: ExpressionDims,
    embedding: ParamId,
    proj_w: ParamId,
    proj_b: ParamId,
    forward: RnnCell,
    backward: RnnCell,
    out_w: ParamId,
    out_b: ParamId,
}

impl ExpressionEncoder {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        dims: ExpressionDims,
        kind: EncoderKind,
    ) -> Self {
        let h = dims.hidden;
        let embedding = store.add(
            "expr.embedding",
            uniform(rng, &[dims.vocab_size, dims.embed], 1.0),
        );
        let proj_w = store.add(
            "expr.proj.w",
            uniform(rng, &[h, dims.embed], lecun_bound(dims.embed)),
        );
        let proj_b = store.add("expr.proj.b", Tensor::zeros(&[h]));
        let forward = RnnCell::new(store, rng, "expr.rnn_fwd", h);
        let backward = RnnCell::new(store, rng, "expr.rnn_bwd", h);
        let (out_in, out_bound) = match kind {
            EncoderKind::Recurrent => (2 * h, lecun_bound(2 * h)),
            EncoderKind::BagOfWords => (h, lecun_bound(h)),
        };
        let out_w = store.add("expr.out.w", uniform(rng, &[dims.output, out_in], out_bound));
        let out_b = store.add("expr.out.b", Tensor::zeros(&[dims.output]));
        ExpressionEncoder {
            kind,
            dims,
            embedding,
            proj_w,
            proj_b,
            forward,
            backward,
            out_w,
            out_b,
        }
    }

    pub fn dims(&self) -> ExpressionDims {
        self.dims
    }

    pub fn kind(&self) -> EncoderKind {
        self.kind
    }

    pub fn embedding_id(&self) -> ParamId {
        self.embedding
    }

    /// Encodes a token sequence into the `output`-dimensional feature.
    pub fn encode(&self, tape: &mut Tape, p: &Bound, tokens: &TokenSequence) -> Result<Var> {
        let mut projected = Vec::with_capacity(tokens.len());
        for &id in tokens.ids() {
            if id >= self.dims.vocab_size {
                return Err(Error::Invalid(format!(
                    "token id {id} outside vocabulary of size {}",
                    self.dims.vocab_size
                )));
            }
            let e = tape.row(p[self.embedding], id)?;
            projected.push(tape.linear(e, p[self.proj_w], Some(p[self.proj_b]))?);
        }
        let summary = match self.kind {
            EncoderKind::Recurrent => {
                let mut hf = None;
                for &x in &projected {
                    hf = Some(self.forward.step(tape, p, x, hf)?);
                }
                let mut hb = None;
                for &x in projected.iter().rev() {
                    hb = Some(self.backward.step(tape, p, x, hb)?);
                }
                tape.concat(&[hf.unwrap(), hb.unwrap()])?
            }
            EncoderKind::BagOfWords => {
                let mut acc = projected[0];
                for &x in &projected[1..] {
                    acc = tape.add(acc, x)?;
                }
                tape.scale(acc, 1.0 / projected.len() as f64)
            }
        };
        tape.linear(summary, p[self.out_w], Some(p[self.out_b]))
    }
}
