//! Token vocabulary, word embeddings, and GRU encoders.
//!
//! One GRU implementation serves both the question pathway and the
//! relationship encoder's language module; callers pick a parameter prefix
//! and share or separate weights by sharing or separating the prefix.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use crate::error::{Error, Result};
use crate::params::{Bound, ModelParams};
use crate::rng::SeedableStream;
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};

/// Width of the word-embedding rows.
pub const EMBED_WIDTH: usize = 300;
/// Index of the unknown-token row.
pub const UNK: usize = 0;
/// Index of the padding row.
pub const PAD: usize = 1;

const UNK_TOKEN: &str = "<unk>";
const PAD_TOKEN: &str = "<pad>";

/// Token set with UNK and PAD pinned at indices 0 and 1. Lookup of an
/// out-of-vocabulary token yields UNK.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    fn with_specials() -> Self {
        let mut v = Vocabulary {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        v.push(UNK_TOKEN);
        v.push(PAD_TOKEN);
        v
    }

    fn push(&mut self, token: &str) {
        if !self.index.contains_key(token) {
            self.index.insert(token.to_string(), self.tokens.len());
            self.tokens.push(token.to_string());
        }
    }

    /// Builds a vocabulary from a token stream. Distinct tokens are sorted
    /// lexicographically so the index assignment is independent of corpus
    /// order.
    pub fn from_corpus<'a, I: IntoIterator<Item = &'a str>>(tokens: I) -> Self {
        let mut distinct: Vec<&str> = tokens
            .into_iter()
            .filter(|t| *t != UNK_TOKEN && *t != PAD_TOKEN)
            .collect();
        distinct.sort_unstable();
        distinct.dedup();
        let mut v = Self::with_specials();
        for t in distinct {
            v.push(t);
        }
        v
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false // UNK and PAD are always present
    }

    pub fn lookup(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, idx: usize) -> Result<&str> {
        self.tokens
            .get(idx)
            .map(String::as_str)
            .ok_or_else(|| Error::Vocab(format!("index {idx} out of range")))
    }

    /// Whitespace tokenization plus lookup.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        text.split_whitespace().map(|t| self.lookup(t)).collect()
    }

    /// One non-special token per line; line number = index - 2.
    pub fn write_lines<W: Write>(&self, w: &mut W) -> Result<()> {
        for t in &self.tokens[2..] {
            writeln!(w, "{t}")?;
        }
        Ok(())
    }

    pub fn read_lines<R: BufRead>(r: R) -> Result<Self> {
        let mut v = Self::with_specials();
        for line in r.lines() {
            let line = line?;
            let tok = line.trim();
            if !tok.is_empty() {
                v.push(tok);
            }
        }
        Ok(v)
    }

    /// Raw token list in index order (including specials).
    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn from_token_list(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 2 || tokens[UNK] != UNK_TOKEN || tokens[PAD] != PAD_TOKEN {
            return Err(Error::Vocab(
                "token list must start with <unk>, <pad>".into(),
            ));
        }
        let mut index = HashMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Vocab(format!("duplicate token {t}")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }
}

/// Inserts a `|V|×300` trainable embedding table under `{prefix}embed.table`,
/// initialized uniform in ±0.05.
pub fn init_embedding(
    prefix: &str,
    vocab_size: usize,
    params: &mut ModelParams,
    rng: &mut SeedableStream,
) {
    params.insert(
        format!("{prefix}embed.table"),
        Tensor::uniform(vec![vocab_size, EMBED_WIDTH], 0.05, rng),
    );
}

/// Row-gather of token embeddings: `[T×300]`. Empty sequences yield a
/// `0×300` tensor; gradient reaches only the touched rows.
pub fn embed(tape: &mut Tape, table: Var, tokens: &[usize]) -> Result<Var> {
    tape.gather_rows(table, tokens)
}

/// Replaces rows of an embedding table with vectors from the standard text
/// format, one `token v1 ... v300` entry per line. Tokens absent from the
/// vocabulary are skipped; vocabulary tokens absent from the file keep
/// their current rows.
pub fn load_pretrained_embeddings<R: BufRead>(
    r: R,
    vocab: &Vocabulary,
    table: &mut Tensor,
) -> Result<usize> {
    if table.shape() != [vocab.len(), EMBED_WIDTH] {
        return Err(Error::Contract(format!(
            "embedding table shape {:?} does not match vocabulary of {} x {}",
            table.shape(),
            vocab.len(),
            EMBED_WIDTH
        )));
    }
    let mut loaded = 0;
    for line in r.lines() {
        let line = line?;
        let mut parts = line.split_whitespace();
        let Some(tok) = parts.next() else { continue };
        let idx = vocab.lookup(tok);
        if idx == UNK && tok != UNK_TOKEN {
            continue;
        }
        let values: std::result::Result<Vec<Real>, _> =
            parts.map(|p| p.parse::<Real>()).collect();
        let values =
            values.map_err(|e| Error::Data(format!("bad embedding value for {tok}: {e}")))?;
        if values.len() != EMBED_WIDTH {
            return Err(Error::Data(format!(
                "embedding for {tok} has {} values, expected {EMBED_WIDTH}",
                values.len()
            )));
        }
        table.data_mut()[idx * EMBED_WIDTH..(idx + 1) * EMBED_WIDTH].copy_from_slice(&values);
        loaded += 1;
    }
    Ok(loaded)
}

/// Shape descriptor for a stacked unidirectional GRU.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GruSpec {
    pub layers: usize,
    pub input: usize,
    pub hidden: usize,
}

impl GruSpec {
    pub fn new(layers: usize, input: usize, hidden: usize) -> Result<Self> {
        if !(1..=2).contains(&layers) {
            return Err(Error::Config(format!(
                "gru layer count must be 1 or 2, got {layers}"
            )));
        }
        Ok(GruSpec {
            layers,
            input,
            hidden,
        })
    }

    fn layer_input(&self, layer: usize) -> usize {
        if layer == 0 {
            self.input
        } else {
            self.hidden
        }
    }

    pub fn init(&self, prefix: &str, params: &mut ModelParams, rng: &mut SeedableStream) {
        for l in 0..self.layers {
            let d_in = self.layer_input(l);
            let h = self.hidden;
            for gate in ["z", "r", "h"] {
                params.insert(
                    format!("{prefix}l{l}.w_{gate}"),
                    Tensor::fan_init(vec![h, d_in], d_in, rng),
                );
                params.insert(
                    format!("{prefix}l{l}.u_{gate}"),
                    Tensor::fan_init(vec![h, h], h, rng),
                );
                params.insert(format!("{prefix}l{l}.b_{gate}"), Tensor::zeros(vec![h]));
            }
        }
    }

    /// Runs the recurrence over `x: [T×input]` from a zero initial state.
    ///
    /// Per step: `z = σ(W_z·x + U_z·h + b_z)`, `r = σ(W_r·x + U_r·h + b_r)`,
    /// `h~ = tanh(W_h·x + U_h·(r∘h) + b_h)`, `h' = (1−z)∘h + z∘h~`.
    /// Returns the per-step states of the top layer and the last of them.
    pub fn encode(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        prefix: &str,
        x: Var,
    ) -> Result<(Vec<Var>, Var)> {
        let sx = tape.shape(x).to_vec();
        if sx.len() != 2 || sx[1] != self.input {
            return Err(Error::Dimension {
                op: "gru_encode",
                lhs: sx,
                rhs: vec![0, self.input],
            });
        }
        let t_len = sx[0];
        if t_len == 0 {
            return Err(Error::Input("gru_encode requires at least one step".into()));
        }
        let mut inputs: Vec<Var> = (0..t_len).map(|t| tape.row(x, t)).collect::<Result<_>>()?;
        for l in 0..self.layers {
            let w_z = bound.var(&format!("{prefix}l{l}.w_z"));
            let u_z = bound.var(&format!("{prefix}l{l}.u_z"));
            let b_z = bound.var(&format!("{prefix}l{l}.b_z"));
            let w_r = bound.var(&format!("{prefix}l{l}.w_r"));
            let u_r = bound.var(&format!("{prefix}l{l}.u_r"));
            let b_r = bound.var(&format!("{prefix}l{l}.b_r"));
            let w_h = bound.var(&format!("{prefix}l{l}.w_h"));
            let u_h = bound.var(&format!("{prefix}l{l}.u_h"));
            let b_h = bound.var(&format!("{prefix}l{l}.b_h"));
            let mut h = tape.constant(Tensor::zeros(vec![self.hidden]));
            let mut states = Vec::with_capacity(t_len);
            for &xt in &inputs {
                let zx = tape.matvec(w_z, xt)?;
                let zh = tape.matvec(u_z, h)?;
                let za = tape.add(zx, zh)?;
                let zb = tape.add(za, b_z)?;
                let z = tape.sigmoid(zb);

                let rx = tape.matvec(w_r, xt)?;
                let rh = tape.matvec(u_r, h)?;
                let ra = tape.add(rx, rh)?;
                let rb = tape.add(ra, b_r)?;
                let r = tape.sigmoid(rb);

                let gated = tape.mul(r, h)?;
                let cx = tape.matvec(w_h, xt)?;
                let ch = tape.matvec(u_h, gated)?;
                let ca = tape.add(cx, ch)?;
                let cb = tape.add(ca, b_h)?;
                let cand = tape.tanh(cb);

                let one_minus_z = tape.affine(z, -1.0, 1.0);
                let keep = tape.mul(one_minus_z, h)?;
                let take = tape.mul(z, cand)?;
                h = tape.add(keep, take)?;
                states.push(h);
            }
            inputs = states;
        }
        let final_state = *inputs.last().expect("nonempty sequence");
        Ok((inputs, final_state))
    }
}

/// Question pathway: embedding, GRU, and optionally additive self-attention
/// over the per-token states.
#[derive(Debug, Clone, Copy)]
pub struct QuestionEncoder {
    pub gru: GruSpec,
    /// When set, the question vector is the attention-weighted sum of the
    /// GRU states instead of the final state.
    pub attention: bool,
    /// Hidden width of the attention scorer.
    pub att_width: usize,
}

impl QuestionEncoder {
    pub fn init(
        &self,
        prefix: &str,
        vocab_size: usize,
        params: &mut ModelParams,
        rng: &mut SeedableStream,
    ) {
        init_embedding(prefix, vocab_size, params, rng);
        self.gru.init(&format!("{prefix}gru."), params, rng);
        if self.attention {
            params.insert(
                format!("{prefix}qatt.w"),
                Tensor::fan_init(vec![self.att_width, self.gru.hidden], self.gru.hidden, rng),
            );
            params.insert(
                format!("{prefix}qatt.v"),
                Tensor::fan_init(vec![self.att_width], self.att_width, rng),
            );
        }
    }

    /// Encodes a nonempty token sequence into a `[hidden]` question vector.
    /// PAD positions are masked out of the attention with `-inf` logits.
    pub fn encode(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        prefix: &str,
        tokens: &[usize],
    ) -> Result<Var> {
        if tokens.is_empty() {
            return Err(Error::Input("empty question".into()));
        }
        let table = bound.var(&format!("{prefix}embed.table"));
        let x = embed(tape, table, tokens)?;
        let (states, final_state) = self.gru.encode(tape, bound, &format!("{prefix}gru."), x)?;
        if !self.attention {
            return Ok(final_state);
        }
        if tokens.iter().all(|&t| t == PAD) {
            return Err(Error::Input("question contains only padding".into()));
        }
        let w = bound.var(&format!("{prefix}qatt.w"));
        let v = bound.var(&format!("{prefix}qatt.v"));
        let mut logits = Vec::with_capacity(states.len());
        for (t, &s) in states.iter().enumerate() {
            if tokens[t] == PAD {
                logits.push(tape.scalar_const(Real::NEG_INFINITY));
            } else {
                let proj = tape.matvec(w, s)?;
                let act = tape.relu(proj);
                logits.push(tape.dot(v, act)?);
            }
        }
        let logit_vec = tape.stack(&logits)?;
        let weights = tape.softmax(logit_vec, 0)?;
        let state_mat = tape.stack_rows(&states)?;
        let state_t = tape.transpose(state_mat)?;
        tape.matvec(state_t, weights)
    }

    /// Attention weights over token positions, for diagnostics. Only valid
    /// in attention mode.
    pub fn attention_weights(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        prefix: &str,
        tokens: &[usize],
    ) -> Result<Vec<Real>> {
        if !self.attention {
            return Err(Error::Contract(
                "attention_weights on a final-state question encoder".into(),
            ));
        }
        let table = bound.var(&format!("{prefix}embed.table"));
        let x = embed(tape, table, tokens)?;
        let (states, _) = self.gru.encode(tape, bound, &format!("{prefix}gru."), x)?;
        let w = bound.var(&format!("{prefix}qatt.w"));
        let v = bound.var(&format!("{prefix}qatt.v"));
        let mut logits = Vec::with_capacity(states.len());
        for (t, &s) in states.iter().enumerate() {
            if tokens[t] == PAD {
                logits.push(tape.scalar_const(Real::NEG_INFINITY));
            } else {
                let proj = tape.matvec(w, s)?;
                let act = tape.relu(proj);
                logits.push(tape.dot(v, act)?);
            }
        }
        let logit_vec = tape.stack(&logits)?;
        let weights = tape.softmax(logit_vec, 0)?;
        Ok(tape.data(weights).to_vec())
    }
}
