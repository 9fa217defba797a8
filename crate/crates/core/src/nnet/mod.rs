//! The encoder-attention-decoder network with optional language factors.
//!
//! A bidirectional LSTM encoder turns the embedded source sentence into one
//! annotation vector per position (forward and backward states
//! concatenated). At each output step an additive attention over the
//! annotations produces a context vector; the decoder LSTM consumes the
//! previous target embedding concatenated with that context, and an affine
//! head plus softmax yields the word distribution. Factored models embed
//! `(word, word language, target language)` on the source side and
//! `(word, word language)` on the target side by concatenating the factor
//! embeddings, and jointly predict the word language from the decoder
//! state through a separate head.
//!
//! Forward functions here are pure and allocation-light; training gradients
//! come from `sequence_loss`, which replays the same computation on a
//! reverse-mode tape.

mod loss;

pub use loss::{sequence_loss, LossOptions, ParamGrads, SequenceLoss};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::num;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum NnetError {
    #[error("{what}: expected width {expected}, got {got}")]
    WidthMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("id {id} out of range for {rows} rows")]
    IdOutOfRange { id: usize, rows: usize },
    #[error("{got} factor ids for {expected} factor embeddings")]
    FactorArityMismatch { expected: usize, got: usize },
    #[error("dropout probability {0} outside [0, 1)")]
    InvalidDropout(f64),
    #[error("operation requires a factored model")]
    NotFactored,
    #[error("sequence does not match the model scheme: {0}")]
    SchemeMismatch(&'static str),
    #[error("source sequence is empty")]
    EmptyInput,
    #[error("target sequence is empty")]
    EmptyTarget,
    #[error("mask allows no vocabulary entry")]
    AllMasked,
    #[error("invalid model config: {0}")]
    BadConfig(String),
}

/// Widths and switches of a model. `vocab_size` counts the (word)
/// vocabulary including specials; `factor_vocab_size` counts the language
/// factor vocabulary of a factored model and is 0 otherwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub factor_vocab_size: usize,
    pub d_word: usize,
    pub d_lang: usize,
    pub d_hidden: usize,
    pub n_layers: usize,
    pub dropout_p: f64,
    pub factored: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), NnetError> {
        if self.vocab_size < 4 {
            return Err(NnetError::BadConfig("vocab smaller than the specials".into()));
        }
        if self.d_word == 0 || self.d_hidden == 0 || self.n_layers == 0 {
            return Err(NnetError::BadConfig("zero width or depth".into()));
        }
        if self.factored && (self.d_lang == 0 || self.factor_vocab_size == 0) {
            return Err(NnetError::BadConfig(
                "factored model needs d_lang and a factor vocabulary".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(NnetError::InvalidDropout(self.dropout_p));
        }
        Ok(())
    }

    /// Encoder input width: the word embedding plus, in factored models,
    /// the word-language and target-language factor embeddings.
    pub fn src_input_width(&self) -> usize {
        if self.factored {
            self.d_word + 2 * self.d_lang
        } else {
            self.d_word
        }
    }

    /// Target embedding width: word plus word-language factor.
    pub fn tgt_input_width(&self) -> usize {
        if self.factored {
            self.d_word + self.d_lang
        } else {
            self.d_word
        }
    }

    fn lstm_sizes(&self) -> LstmSizes {
        LstmSizes {
            h: self.d_hidden,
            enc_in: self.src_input_width(),
            dec_in: self.tgt_input_width() + 2 * self.d_hidden,
        }
    }

    /// Exact learnable parameter count, computed from widths alone.
    pub fn param_count(&self) -> usize {
        let LstmSizes { h, enc_in, dec_in } = self.lstm_sizes();
        let lstm = |d_in: usize| 4 * h * d_in + 4 * h * h + 4 * h;
        let mut n = 0usize;
        // embeddings
        n += self.vocab_size * self.d_word * 2;
        if self.factored {
            n += 3 * self.factor_vocab_size * self.d_lang;
        }
        // encoder, both directions, stacked
        n += 2 * lstm(enc_in);
        n += 2 * (self.n_layers - 1) * lstm(2 * h);
        // decoder stack
        n += lstm(dec_in);
        n += (self.n_layers - 1) * lstm(h);
        // attention, initial-state map, output head
        n += h * h + h * 2 * h + h;
        n += h * 2 * h + h;
        n += self.vocab_size * h + self.vocab_size;
        if self.factored {
            n += self.factor_vocab_size * h + self.factor_vocab_size;
        }
        n
    }
}

struct LstmSizes {
    h: usize,
    enc_in: usize,
    dec_in: usize,
}

/// One LSTM cell's weights: input map, recurrent map and bias over the
/// stacked `[input; forget; candidate; output]` gate block.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmWeights {
    pub w_x: Tensor,
    pub w_h: Tensor,
    pub b: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights {
    /// Projection of the previous decoder state, `[h, h]`.
    pub query: Tensor,
    /// Projection of an annotation vector, `[h, 2h]`.
    pub key: Tensor,
    /// Scoring vector, `[h]`.
    pub score: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InitWeights {
    pub w: Tensor,
    pub b: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutputHead {
    pub w: Tensor,
    pub b: Tensor,
}

/// All learnable tensors, with a stable name layout for checkpoints and
/// optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub embed_src: Tensor,
    /// Factored: `[word-language, target-language]` factor matrices.
    pub embed_src_factors: Vec<Tensor>,
    pub embed_tgt: Tensor,
    /// Factored: `[word-language]` factor matrix.
    pub embed_tgt_factors: Vec<Tensor>,
    pub enc_fwd: Vec<LstmWeights>,
    pub enc_bwd: Vec<LstmWeights>,
    pub dec: Vec<LstmWeights>,
    pub attn: AttentionWeights,
    pub init: InitWeights,
    pub out: OutputHead,
    pub factor_out: Vec<OutputHead>,
}

const INIT_RANGE: f64 = 0.08;

fn init_lstm(d_in: usize, h: usize, rng: &mut ChaCha8Rng) -> LstmWeights {
    let w_x = Tensor::uniform(&[4 * h, d_in], -INIT_RANGE, INIT_RANGE, rng);
    let w_h = Tensor::uniform(&[4 * h, h], -INIT_RANGE, INIT_RANGE, rng);
    let mut b = Tensor::zeros(&[4 * h]);
    // forget-gate bias starts at 1 so early training does not erase state
    for j in h..2 * h {
        b.data[j] = 1.0;
    }
    LstmWeights { w_x, w_h, b }
}

impl ModelParams {
    /// Fresh parameters, uniform on `[-0.08, 0.08]` from a seeded stream
    /// (forget-gate biases start at 1).
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self, NnetError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = &mut rng;
        let LstmSizes { h, enc_in, dec_in } = config.lstm_sizes();
        let uni = |shape: &[usize], r: &mut ChaCha8Rng| {
            Tensor::uniform(shape, -INIT_RANGE, INIT_RANGE, r)
        };

        let embed_src = uni(&[config.vocab_size, config.d_word], r);
        let embed_tgt = uni(&[config.vocab_size, config.d_word], r);
        let (embed_src_factors, embed_tgt_factors) = if config.factored {
            (
                vec![
                    uni(&[config.factor_vocab_size, config.d_lang], r),
                    uni(&[config.factor_vocab_size, config.d_lang], r),
                ],
                vec![uni(&[config.factor_vocab_size, config.d_lang], r)],
            )
        } else {
            (Vec::new(), Vec::new())
        };

        let mut enc_fwd = vec![init_lstm(enc_in, h, r)];
        let mut enc_bwd = vec![init_lstm(enc_in, h, r)];
        let mut dec = vec![init_lstm(dec_in, h, r)];
        for _ in 1..config.n_layers {
            enc_fwd.push(init_lstm(2 * h, h, r));
            enc_bwd.push(init_lstm(2 * h, h, r));
            dec.push(init_lstm(h, h, r));
        }

        let attn = AttentionWeights {
            query: uni(&[h, h], r),
            key: uni(&[h, 2 * h], r),
            score: uni(&[h], r),
        };
        let init = InitWeights {
            w: uni(&[h, 2 * h], r),
            b: Tensor::zeros(&[h]),
        };
        let out = OutputHead {
            w: uni(&[config.vocab_size, h], r),
            b: Tensor::zeros(&[config.vocab_size]),
        };
        let factor_out = if config.factored {
            vec![OutputHead {
                w: uni(&[config.factor_vocab_size, h], r),
                b: Tensor::zeros(&[config.factor_vocab_size]),
            }]
        } else {
            Vec::new()
        };

        Ok(ModelParams {
            config: config.clone(),
            embed_src,
            embed_src_factors,
            embed_tgt,
            embed_tgt_factors,
            enc_fwd,
            enc_bwd,
            dec,
            attn,
            init,
            out,
            factor_out,
        })
    }

    /// Stable `(name, tensor)` listing used by checkpoints, the optimizer
    /// and gradient bookkeeping.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = Vec::new();
        out.push(("embed.src.word".into(), &self.embed_src));
        for (i, t) in self.embed_src_factors.iter().enumerate() {
            out.push((format!("embed.src.factor.{i}"), t));
        }
        out.push(("embed.tgt.word".into(), &self.embed_tgt));
        for (i, t) in self.embed_tgt_factors.iter().enumerate() {
            out.push((format!("embed.tgt.factor.{i}"), t));
        }
        for (dir, stack) in [("fwd", &self.enc_fwd), ("bwd", &self.enc_bwd)] {
            for (l, w) in stack.iter().enumerate() {
                out.push((format!("enc.{dir}.{l}.wx"), &w.w_x));
                out.push((format!("enc.{dir}.{l}.wh"), &w.w_h));
                out.push((format!("enc.{dir}.{l}.b"), &w.b));
            }
        }
        for (l, w) in self.dec.iter().enumerate() {
            out.push((format!("dec.{l}.wx"), &w.w_x));
            out.push((format!("dec.{l}.wh"), &w.w_h));
            out.push((format!("dec.{l}.b"), &w.b));
        }
        out.push(("attn.query".into(), &self.attn.query));
        out.push(("attn.key".into(), &self.attn.key));
        out.push(("attn.score".into(), &self.attn.score));
        out.push(("init.w".into(), &self.init.w));
        out.push(("init.b".into(), &self.init.b));
        out.push(("out.w".into(), &self.out.w));
        out.push(("out.b".into(), &self.out.b));
        for (i, h) in self.factor_out.iter().enumerate() {
            out.push((format!("factor_out.{i}.w"), &h.w));
            out.push((format!("factor_out.{i}.b"), &h.b));
        }
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = Vec::new();
        out.push(("embed.src.word".into(), &mut self.embed_src));
        for (i, t) in self.embed_src_factors.iter_mut().enumerate() {
            out.push((format!("embed.src.factor.{i}"), t));
        }
        out.push(("embed.tgt.word".into(), &mut self.embed_tgt));
        for (i, t) in self.embed_tgt_factors.iter_mut().enumerate() {
            out.push((format!("embed.tgt.factor.{i}"), t));
        }
        for (dir, stack) in [("fwd", &mut self.enc_fwd), ("bwd", &mut self.enc_bwd)] {
            for (l, w) in stack.iter_mut().enumerate() {
                out.push((format!("enc.{dir}.{l}.wx"), &mut w.w_x));
                out.push((format!("enc.{dir}.{l}.wh"), &mut w.w_h));
                out.push((format!("enc.{dir}.{l}.b"), &mut w.b));
            }
        }
        for (l, w) in self.dec.iter_mut().enumerate() {
            out.push((format!("dec.{l}.wx"), &mut w.w_x));
            out.push((format!("dec.{l}.wh"), &mut w.w_h));
            out.push((format!("dec.{l}.b"), &mut w.b));
        }
        out.push(("attn.query".into(), &mut self.attn.query));
        out.push(("attn.key".into(), &mut self.attn.key));
        out.push(("attn.score".into(), &mut self.attn.score));
        out.push(("init.w".into(), &mut self.init.w));
        out.push(("init.b".into(), &mut self.init.b));
        out.push(("out.w".into(), &mut self.out.w));
        out.push(("out.b".into(), &mut self.out.b));
        for (i, h) in self.factor_out.iter_mut().enumerate() {
            out.push((format!("factor_out.{i}.w"), &mut h.w));
            out.push((format!("factor_out.{i}.b"), &mut h.b));
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.named().iter().all(|(_, t)| t.is_finite())
    }
}

/// A source token of a factored model: word id plus the two factor ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FactoredSource {
    pub word: usize,
    pub word_lang: usize,
    pub tgt_lang: usize,
}

/// A target token of a factored model: word id plus the word-language id.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FactoredTarget {
    pub word: usize,
    pub word_lang: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SourceSeq {
    Plain(Vec<usize>),
    Factored(Vec<FactoredSource>),
}

impl SourceSeq {
    pub fn len(&self) -> usize {
        match self {
            SourceSeq::Plain(v) => v.len(),
            SourceSeq::Factored(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TargetSeq {
    Plain(Vec<usize>),
    Factored(Vec<FactoredTarget>),
}

impl TargetSeq {
    pub fn len(&self) -> usize {
        match self {
            TargetSeq::Plain(v) => v.len(),
            TargetSeq::Factored(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn word_ids(&self) -> Vec<usize> {
        match self {
            TargetSeq::Plain(v) => v.clone(),
            TargetSeq::Factored(v) => v.iter().map(|t| t.word).collect(),
        }
    }
}

/// One training example: preprocessed id sequences plus, for factored
/// models, the factor id of the target language (used for the start-of
/// -sentence embedding and as the factor target of the closing `</s>`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub src: SourceSeq,
    pub tgt: TargetSeq,
    pub tgt_lang_factor: Option<usize>,
}

/// Per-position annotation vectors, one row per source position, each the
/// concatenation of the forward and backward encoder states.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    pub annotations: Tensor,
}

impl EncoderOutput {
    pub fn len(&self) -> usize {
        self.annotations.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.annotations.row(i)
    }
}

/// Hidden and cell state of one LSTM cell.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmState {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

impl LstmState {
    pub fn zeros(h: usize) -> Self {
        LstmState {
            h: vec![0.0; h],
            c: vec![0.0; h],
        }
    }
}

/// Decoder state: one LSTM state per layer plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderState {
    pub layers: Vec<LstmState>,
    pub step: usize,
}

impl DecoderState {
    /// The top-layer hidden vector, the `z` fed to attention and heads.
    pub fn z(&self) -> &[f64] {
        &self.layers.last().expect("decoder has layers").h
    }
}

/// Row lookup into an embedding matrix.
pub fn embed(e: &Tensor, id: usize) -> Result<Vec<f64>, NnetError> {
    if id >= e.rows() {
        return Err(NnetError::IdOutOfRange { id, rows: e.rows() });
    }
    Ok(e.row(id).to_vec())
}

/// Concatenation of one row from each factor embedding matrix.
pub fn embed_factored(mats: &[&Tensor], ids: &[usize]) -> Result<Vec<f64>, NnetError> {
    if mats.len() != ids.len() {
        return Err(NnetError::FactorArityMismatch {
            expected: mats.len(),
            got: ids.len(),
        });
    }
    let mut out = Vec::new();
    for (m, &id) in mats.iter().zip(ids) {
        out.extend_from_slice(&embed(m, id)?);
    }
    Ok(out)
}

/// One LSTM step: logistic input/forget/output gates, tanh candidate,
/// `c' = f*c + i*g`, `h' = o * tanh(c')`.
pub fn lstm_step(w: &LstmWeights, x: &[f64], state: &LstmState) -> Result<LstmState, NnetError> {
    let h = state.h.len();
    if w.w_x.cols() != x.len() {
        return Err(NnetError::WidthMismatch {
            what: "lstm input",
            expected: w.w_x.cols(),
            got: x.len(),
        });
    }
    if w.w_h.cols() != h || w.w_x.rows() != 4 * h {
        return Err(NnetError::WidthMismatch {
            what: "lstm state",
            expected: w.w_h.cols(),
            got: h,
        });
    }
    let mut gates = w.w_x.matvec(x);
    let rec = w.w_h.matvec(&state.h);
    for (g, (r, b)) in gates.iter_mut().zip(rec.iter().zip(&w.b.data)) {
        *g = *g + r + b;
    }
    let mut next = LstmState::zeros(h);
    for j in 0..h {
        let i_g = num::sigmoid(gates[j]);
        let f_g = num::sigmoid(gates[h + j]);
        let g_g = gates[2 * h + j].tanh();
        let o_g = num::sigmoid(gates[3 * h + j]);
        let c = f_g * state.c[j] + i_g * g_g;
        next.c[j] = c;
        next.h[j] = o_g * c.tanh();
    }
    Ok(next)
}

/// Inverted dropout: in training, zero each coordinate with probability
/// `p` and scale survivors by `1/(1-p)`; in inference, the identity.
pub fn dropout(
    x: &[f64],
    p: f64,
    training: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>, NnetError> {
    if !(0.0..1.0).contains(&p) {
        return Err(NnetError::InvalidDropout(p));
    }
    if !training || p == 0.0 {
        return Ok(x.to_vec());
    }
    Ok(dropout_mask(x.len(), p, rng)
        .into_iter()
        .zip(x)
        .map(|(m, v)| m * v)
        .collect())
}

/// The multiplicative mask `dropout` applies; factored out so the tape path
/// can draw identical masks.
pub(crate) fn dropout_mask(n: usize, p: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    use rand::Rng;
    let keep = 1.0 / (1.0 - p);
    (0..n)
        .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
        .collect()
}

fn embed_source(params: &ModelParams, src: &SourceSeq) -> Result<Vec<Vec<f64>>, NnetError> {
    match (params.config.factored, src) {
        (false, SourceSeq::Plain(ids)) => {
            ids.iter().map(|&id| embed(&params.embed_src, id)).collect()
        }
        (true, SourceSeq::Factored(toks)) => toks
            .iter()
            .map(|t| {
                embed_factored(
                    &[
                        &params.embed_src,
                        &params.embed_src_factors[0],
                        &params.embed_src_factors[1],
                    ],
                    &[t.word, t.word_lang, t.tgt_lang],
                )
            })
            .collect(),
        _ => Err(NnetError::SchemeMismatch(
            "source sequence kind does not match model.factored",
        )),
    }
}

/// Embedding of a previous target token (with the word-language factor on
/// factored models).
pub fn embed_target(
    params: &ModelParams,
    word: usize,
    word_lang: Option<usize>,
) -> Result<Vec<f64>, NnetError> {
    if params.config.factored {
        let lang = word_lang.ok_or(NnetError::SchemeMismatch(
            "factored model needs a word-language factor for target embedding",
        ))?;
        embed_factored(
            &[&params.embed_tgt, &params.embed_tgt_factors[0]],
            &[word, lang],
        )
    } else {
        embed(&params.embed_tgt, word)
    }
}

/// Run the bidirectional encoder stack. Dropout applies to the inputs of
/// layers above the first, in training mode only.
pub fn encode(
    params: &ModelParams,
    src: &SourceSeq,
    training: bool,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<EncoderOutput, NnetError> {
    if src.is_empty() {
        return Err(NnetError::EmptyInput);
    }
    let h = params.config.d_hidden;
    let p = params.config.dropout_p;
    let mut inputs = embed_source(params, src)?;
    let mut local_rng = rng;
    for layer in 0..params.config.n_layers {
        if layer > 0 && training && p > 0.0 {
            let r = local_rng
                .as_deref_mut()
                .expect("training-mode encode needs an rng");
            for x in &mut inputs {
                *x = dropout(x, p, true, r)?;
            }
        }
        let n = inputs.len();
        let mut fwd_states = Vec::with_capacity(n);
        let mut state = LstmState::zeros(h);
        for x in &inputs {
            state = lstm_step(&params.enc_fwd[layer], x, &state)?;
            fwd_states.push(state.h.clone());
        }
        let mut bwd_states = vec![Vec::new(); n];
        let mut state = LstmState::zeros(h);
        for i in (0..n).rev() {
            state = lstm_step(&params.enc_bwd[layer], &inputs[i], &state)?;
            bwd_states[i] = state.h.clone();
        }
        inputs = (0..n)
            .map(|i| {
                let mut row = fwd_states[i].clone();
                row.extend_from_slice(&bwd_states[i]);
                row
            })
            .collect();
    }
    let n = inputs.len();
    let mut data = Vec::with_capacity(n * 2 * h);
    for row in &inputs {
        data.extend_from_slice(row);
    }
    Ok(EncoderOutput {
        annotations: Tensor::matrix(n, 2 * h, data),
    })
}

/// Additive attention: `rel(z, h_i) = score . tanh(query z + key h_i)`,
/// weights by softmax over positions, context as the weighted sum of
/// annotation vectors.
pub fn attention(
    params: &ModelParams,
    z_prev: &[f64],
    enc: &EncoderOutput,
) -> Result<(Vec<f64>, Vec<f64>), NnetError> {
    if z_prev.len() != params.config.d_hidden {
        return Err(NnetError::WidthMismatch {
            what: "attention query",
            expected: params.config.d_hidden,
            got: z_prev.len(),
        });
    }
    let q = params.attn.query.matvec(z_prev);
    let n = enc.len();
    let mut scores = Vec::with_capacity(n);
    for i in 0..n {
        let mut u = params.attn.key.matvec(enc.row(i));
        for (uj, qj) in u.iter_mut().zip(&q) {
            *uj = (*uj + qj).tanh();
        }
        let s: f64 = u.iter().zip(&params.attn.score.data).map(|(a, b)| a * b).sum();
        scores.push(s);
    }
    let alpha = num::softmax(&scores);
    let mut context = vec![0.0; enc.annotations.cols()];
    for (i, &a) in alpha.iter().enumerate() {
        for (c, v) in context.iter_mut().zip(enc.row(i)) {
            *c += a * v;
        }
    }
    Ok((alpha, context))
}

/// Initial decoder state: a tanh-squashed affine map of the mean
/// annotation vector, shared by every layer; cell states start at zero.
pub fn init_decoder_state(params: &ModelParams, enc: &EncoderOutput) -> DecoderState {
    let cols = enc.annotations.cols();
    let inv_n = 1.0 / enc.len() as f64;
    let mut mean = vec![0.0; cols];
    for i in 0..enc.len() {
        for (m, v) in mean.iter_mut().zip(enc.row(i)) {
            *m += inv_n * v;
        }
    }
    let mut h0 = params.init.w.matvec(&mean);
    for (v, b) in h0.iter_mut().zip(&params.init.b.data) {
        *v = (*v + b).tanh();
    }
    let layers = (0..params.config.n_layers)
        .map(|_| LstmState {
            h: h0.clone(),
            c: vec![0.0; params.config.d_hidden],
        })
        .collect();
    DecoderState { layers, step: 0 }
}

/// One decoder step: the bottom layer consumes the previous target
/// embedding concatenated with the context vector; upper layers consume
/// the hidden state below. Returns the new state and the top hidden `z`.
pub fn decoder_step(
    params: &ModelParams,
    state: &DecoderState,
    t_prev: &[f64],
    context: &[f64],
    training: bool,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<(DecoderState, Vec<f64>), NnetError> {
    let expected = params.config.tgt_input_width();
    if t_prev.len() != expected {
        return Err(NnetError::WidthMismatch {
            what: "decoder target embedding",
            expected,
            got: t_prev.len(),
        });
    }
    if context.len() != 2 * params.config.d_hidden {
        return Err(NnetError::WidthMismatch {
            what: "decoder context",
            expected: 2 * params.config.d_hidden,
            got: context.len(),
        });
    }
    let p = params.config.dropout_p;
    let mut local_rng = rng;
    let mut x: Vec<f64> = t_prev.iter().chain(context).copied().collect();
    let mut layers = Vec::with_capacity(state.layers.len());
    for (layer, w) in params.dec.iter().enumerate() {
        if layer > 0 && training && p > 0.0 {
            let r = local_rng
                .as_deref_mut()
                .expect("training-mode decoder_step needs an rng");
            x = dropout(&x, p, true, r)?;
        }
        let next = lstm_step(w, &x, &state.layers[layer])?;
        x = next.h.clone();
        layers.push(next);
    }
    let z = x;
    Ok((
        DecoderState {
            layers,
            step: state.step + 1,
        },
        z,
    ))
}

/// Log-probabilities over the target vocabulary from a decoder hidden
/// state. With a mask, blocked entries get negative infinity before
/// normalization, which renormalizes the distribution over the allowed set.
pub fn output_distribution(
    params: &ModelParams,
    z: &[f64],
    mask: Option<&[bool]>,
) -> Result<Vec<f64>, NnetError> {
    if z.len() != params.config.d_hidden {
        return Err(NnetError::WidthMismatch {
            what: "output head input",
            expected: params.config.d_hidden,
            got: z.len(),
        });
    }
    if let Some(m) = mask {
        if m.len() != params.config.vocab_size {
            return Err(NnetError::WidthMismatch {
                what: "mask length",
                expected: params.config.vocab_size,
                got: m.len(),
            });
        }
        if !m.iter().any(|&a| a) {
            return Err(NnetError::AllMasked);
        }
    }
    let mut logits = params.out.w.matvec(z);
    for (l, b) in logits.iter_mut().zip(&params.out.b.data) {
        *l += b;
    }
    Ok(num::masked_log_softmax(&logits, mask))
}

/// Log-probabilities over each target factor. Factored models only.
pub fn factor_distributions(params: &ModelParams, z: &[f64]) -> Result<Vec<Vec<f64>>, NnetError> {
    if !params.config.factored {
        return Err(NnetError::NotFactored);
    }
    params
        .factor_out
        .iter()
        .map(|head| {
            let mut logits = head.w.matvec(z);
            for (l, b) in logits.iter_mut().zip(&head.b.data) {
                *l += b;
            }
            Ok(num::masked_log_softmax(&logits, None))
        })
        .collect()
}

#[cfg(test)]
mod tests;
