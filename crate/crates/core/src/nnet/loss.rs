//! Teacher-forced sequence loss with reverse-mode gradients.
//!
//! The forward computation mirrors the pure functions in the parent module
//! operation for operation, replayed on the tape, so decode-time scores and
//! training losses agree on identical inputs.

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;

use crate::autograd::{NodeId, Tape};
use crate::tensor::Tensor;
use crate::vocab::{BOS, EOS};

use super::{
    dropout_mask, Example, ModelParams, NnetError, SourceSeq, TargetSeq,
};

/// Gradients keyed by the stable parameter names of `ModelParams::named`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    map: BTreeMap<String, Tensor>,
}

impl ParamGrads {
    pub fn zeros_like(params: &ModelParams) -> Self {
        let map = params
            .named()
            .into_iter()
            .map(|(name, t)| (name, Tensor::zeros(&t.shape)))
            .collect();
        ParamGrads { map }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    /// Accumulate `other` into `self` elementwise.
    pub fn add(&mut self, other: &ParamGrads) {
        for (name, t) in &mut self.map {
            let o = &other.map[name];
            for (a, b) in t.data.iter_mut().zip(&o.data) {
                *a += b;
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        for t in self.map.values_mut() {
            for a in &mut t.data {
                *a *= c;
            }
        }
    }

    /// Name of the first parameter with a non-finite gradient, if any.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.map
            .iter()
            .find(|(_, t)| !t.is_finite())
            .map(|(n, _)| n.as_str())
    }

    /// Euclidean norm over all gradient entries.
    pub fn global_norm(&self) -> f64 {
        self.map
            .values()
            .flat_map(|t| t.data.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

#[cfg(test)]
impl ParamGrads {
    pub(crate) fn fill_for_tests(&mut self, v: f64) {
        for t in self.map.values_mut() {
            t.data.iter_mut().for_each(|x| *x = v);
        }
    }

    pub(crate) fn poison_for_tests(&mut self, name: &str) {
        self.map.get_mut(name).expect("known parameter").data[0] = f64::NAN;
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LossOptions {
    pub training: bool,
    /// Weight of each target-factor negative log-likelihood term.
    pub factor_loss_weight: f64,
}

impl Default for LossOptions {
    fn default() -> Self {
        LossOptions {
            training: true,
            factor_loss_weight: 1.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SequenceLoss {
    /// `word_nll + factor_loss_weight * factor_nll`.
    pub total: f64,
    /// Sum of per-step word negative log-probabilities, including the
    /// closing `</s>`.
    pub word_nll: f64,
    pub factor_nll: f64,
    /// Number of predicted positions (target words plus `</s>`).
    pub predicted_tokens: usize,
    pub grads: ParamGrads,
}

struct TapeLstm {
    wx: NodeId,
    wh: NodeId,
    b: NodeId,
}

struct TapeParams {
    embed_src: NodeId,
    embed_src_factors: Vec<NodeId>,
    embed_tgt: NodeId,
    embed_tgt_factors: Vec<NodeId>,
    enc_fwd: Vec<TapeLstm>,
    enc_bwd: Vec<TapeLstm>,
    dec: Vec<TapeLstm>,
    attn_query: NodeId,
    attn_key: NodeId,
    attn_score: NodeId,
    init_w: NodeId,
    init_b: NodeId,
    out_w: NodeId,
    out_b: NodeId,
    factor_out: Vec<(NodeId, NodeId)>,
    named: Vec<(String, NodeId)>,
}

fn leaf(
    tape: &mut Tape,
    named: &mut Vec<(String, NodeId)>,
    name: String,
    t: &Tensor,
) -> NodeId {
    let id = tape.leaf_tensor(t);
    named.push((name, id));
    id
}

fn leaf_stack(
    tape: &mut Tape,
    named: &mut Vec<(String, NodeId)>,
    dir: &str,
    ws: &[super::LstmWeights],
) -> Vec<TapeLstm> {
    ws.iter()
        .enumerate()
        .map(|(l, w)| TapeLstm {
            wx: leaf(tape, named, format!("{dir}.{l}.wx"), &w.w_x),
            wh: leaf(tape, named, format!("{dir}.{l}.wh"), &w.w_h),
            b: leaf(tape, named, format!("{dir}.{l}.b"), &w.b),
        })
        .collect()
}

impl TapeParams {
    fn build(tape: &mut Tape, params: &ModelParams) -> Self {
        let named = &mut Vec::new();
        let embed_src = leaf(tape, named, "embed.src.word".into(), &params.embed_src);
        let embed_src_factors = params
            .embed_src_factors
            .iter()
            .enumerate()
            .map(|(i, t)| leaf(tape, named, format!("embed.src.factor.{i}"), t))
            .collect();
        let embed_tgt = leaf(tape, named, "embed.tgt.word".into(), &params.embed_tgt);
        let embed_tgt_factors = params
            .embed_tgt_factors
            .iter()
            .enumerate()
            .map(|(i, t)| leaf(tape, named, format!("embed.tgt.factor.{i}"), t))
            .collect();
        let enc_fwd = leaf_stack(tape, named, "enc.fwd", &params.enc_fwd);
        let enc_bwd = leaf_stack(tape, named, "enc.bwd", &params.enc_bwd);
        let dec = leaf_stack(tape, named, "dec", &params.dec);
        let attn_query = leaf(tape, named, "attn.query".into(), &params.attn.query);
        let attn_key = leaf(tape, named, "attn.key".into(), &params.attn.key);
        let attn_score = leaf(tape, named, "attn.score".into(), &params.attn.score);
        let init_w = leaf(tape, named, "init.w".into(), &params.init.w);
        let init_b = leaf(tape, named, "init.b".into(), &params.init.b);
        let out_w = leaf(tape, named, "out.w".into(), &params.out.w);
        let out_b = leaf(tape, named, "out.b".into(), &params.out.b);
        let factor_out = params
            .factor_out
            .iter()
            .enumerate()
            .map(|(i, h)| {
                (
                    leaf(tape, named, format!("factor_out.{i}.w"), &h.w),
                    leaf(tape, named, format!("factor_out.{i}.b"), &h.b),
                )
            })
            .collect();
        let named = std::mem::take(named);
        TapeParams {
            embed_src,
            embed_src_factors,
            embed_tgt,
            embed_tgt_factors,
            enc_fwd,
            enc_bwd,
            dec,
            attn_query,
            attn_key,
            attn_score,
            init_w,
            init_b,
            out_w,
            out_b,
            factor_out,
            named,
        }
    }
}

fn lstm_tape(
    tape: &mut Tape,
    w: &TapeLstm,
    x: NodeId,
    state: (NodeId, NodeId),
    h: usize,
) -> (NodeId, NodeId) {
    let gx = tape.matvec(w.wx, x);
    let gh = tape.matvec(w.wh, state.0);
    let gsum = tape.add(gx, gh);
    let gates = tape.add(gsum, w.b);
    let i_pre = tape.slice(gates, 0, h);
    let i_g = tape.sigmoid(i_pre);
    let f_pre = tape.slice(gates, h, h);
    let f_g = tape.sigmoid(f_pre);
    let g_pre = tape.slice(gates, 2 * h, h);
    let g_g = tape.tanh(g_pre);
    let o_pre = tape.slice(gates, 3 * h, h);
    let o_g = tape.sigmoid(o_pre);
    let fc = tape.mul(f_g, state.1);
    let ig = tape.mul(i_g, g_g);
    let c_next = tape.add(fc, ig);
    let c_tanh = tape.tanh(c_next);
    let h_next = tape.mul(o_g, c_tanh);
    (h_next, c_next)
}

/// Negative log-likelihood of a teacher-forced pair, plus gradients for
/// every parameter via reverse-mode accumulation. The decoder conditions on
/// `<s>` and predicts every target word followed by `</s>`; factored models
/// add one weighted negative log-likelihood term per target factor.
pub fn sequence_loss(
    params: &ModelParams,
    example: &Example,
    opts: &LossOptions,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<SequenceLoss, NnetError> {
    let cfg = &params.config;
    cfg.validate()?;
    if example.src.is_empty() {
        return Err(NnetError::EmptyInput);
    }
    if example.tgt.is_empty() {
        return Err(NnetError::EmptyTarget);
    }
    let factored_src = matches!(example.src, SourceSeq::Factored(_));
    let factored_tgt = matches!(example.tgt, TargetSeq::Factored(_));
    if factored_src != cfg.factored || factored_tgt != cfg.factored {
        return Err(NnetError::SchemeMismatch(
            "example kind does not match model.factored",
        ));
    }
    let tgt_lang_factor = if cfg.factored {
        Some(example.tgt_lang_factor.ok_or(NnetError::SchemeMismatch(
            "factored example needs tgt_lang_factor",
        ))?)
    } else {
        None
    };

    let h = cfg.d_hidden;
    let p = cfg.dropout_p;
    let dropout_live = opts.training && p > 0.0 && cfg.n_layers > 1;

    let mut tape = Tape::new();
    let tp = TapeParams::build(&mut tape, params);

    // Source embeddings, one node per position.
    let mut inputs: Vec<NodeId> = match &example.src {
        SourceSeq::Plain(ids) => {
            for &id in ids {
                if id >= cfg.vocab_size {
                    return Err(NnetError::IdOutOfRange {
                        id,
                        rows: cfg.vocab_size,
                    });
                }
            }
            ids.iter().map(|&id| tape.row(tp.embed_src, id)).collect()
        }
        SourceSeq::Factored(toks) => toks
            .iter()
            .map(|t| {
                let w = tape.row(tp.embed_src, t.word);
                let f0 = tape.row(tp.embed_src_factors[0], t.word_lang);
                let f1 = tape.row(tp.embed_src_factors[1], t.tgt_lang);
                tape.concat(&[w, f0, f1])
            })
            .collect(),
    };

    // Encoder stack; dropout on the inputs of layers above the first.
    let zero_h = tape.leaf_vec(&vec![0.0; h]);
    for layer in 0..cfg.n_layers {
        if layer > 0 && dropout_live {
            let r = rng
                .as_deref_mut()
                .expect("training-mode sequence_loss with dropout needs an rng");
            inputs = inputs
                .iter()
                .map(|&x| {
                    let n = tape.value(x).len();
                    let mask = dropout_mask(n, p, r);
                    tape.mul_const(x, mask)
                })
                .collect();
        }
        let n = inputs.len();
        let mut fwd = Vec::with_capacity(n);
        let mut state = (zero_h, zero_h);
        for &x in &inputs {
            state = lstm_tape(&mut tape, &tp.enc_fwd[layer], x, state, h);
            fwd.push(state.0);
        }
        let mut bwd = vec![zero_h; n];
        let mut state = (zero_h, zero_h);
        for i in (0..n).rev() {
            state = lstm_tape(&mut tape, &tp.enc_bwd[layer], inputs[i], state, h);
            bwd[i] = state.0;
        }
        inputs = (0..n).map(|i| tape.concat(&[fwd[i], bwd[i]])).collect();
    }
    let annotations = inputs;
    let n_src = annotations.len();

    // Initial decoder state from the mean annotation.
    let uniform = tape.leaf_vec(&vec![1.0 / n_src as f64; n_src]);
    let mean = tape.weighted_sum(uniform, &annotations);
    let z0_lin = tape.matvec(tp.init_w, mean);
    let z0_aff = tape.add(z0_lin, tp.init_b);
    let z0 = tape.tanh(z0_aff);
    let mut dec_states: Vec<(NodeId, NodeId)> =
        (0..cfg.n_layers).map(|_| (z0, zero_h)).collect();

    let tgt_words = example.tgt.word_ids();
    for &id in &tgt_words {
        if id >= cfg.vocab_size {
            return Err(NnetError::IdOutOfRange {
                id,
                rows: cfg.vocab_size,
            });
        }
    }
    let steps = tgt_words.len() + 1;
    let mut word_losses = Vec::with_capacity(steps);
    let mut factor_losses = Vec::new();

    for s in 0..steps {
        // Previous token embedding; <s> conditions the first step.
        let (prev_word, prev_lang) = if s == 0 {
            (BOS, tgt_lang_factor)
        } else {
            match &example.tgt {
                TargetSeq::Plain(ids) => (ids[s - 1], None),
                TargetSeq::Factored(toks) => (toks[s - 1].word, Some(toks[s - 1].word_lang)),
            }
        };
        let t_prev = if cfg.factored {
            let w = tape.row(tp.embed_tgt, prev_word);
            let f = tape.row(tp.embed_tgt_factors[0], prev_lang.expect("factored lang"));
            tape.concat(&[w, f])
        } else {
            tape.row(tp.embed_tgt, prev_word)
        };

        // Attention over annotations from the previous top-layer state.
        let z_prev = dec_states.last().unwrap().0;
        let q = tape.matvec(tp.attn_query, z_prev);
        let mut scores = Vec::with_capacity(n_src);
        for &ann in &annotations {
            let k = tape.matvec(tp.attn_key, ann);
            let kq = tape.add(k, q);
            let u = tape.tanh(kq);
            scores.push(tape.dot(tp.attn_score, u));
        }
        let score_vec = tape.concat(&scores);
        let alpha = tape.softmax(score_vec);
        let context = tape.weighted_sum(alpha, &annotations);

        // Decoder stack.
        let mut x = tape.concat(&[t_prev, context]);
        for layer in 0..cfg.n_layers {
            if layer > 0 && dropout_live {
                let r = rng
                    .as_deref_mut()
                    .expect("training-mode sequence_loss with dropout needs an rng");
                let nvals = tape.value(x).len();
                let mask = dropout_mask(nvals, p, r);
                x = tape.mul_const(x, mask);
            }
            let next = lstm_tape(&mut tape, &tp.dec[layer], x, dec_states[layer], h);
            dec_states[layer] = next;
            x = next.0;
        }
        let z = x;

        // Word prediction.
        let logits_lin = tape.matvec(tp.out_w, z);
        let logits = tape.add(logits_lin, tp.out_b);
        let logp = tape.log_softmax(logits, None);
        let target_word = if s < tgt_words.len() {
            tgt_words[s]
        } else {
            EOS
        };
        word_losses.push(tape.pick_neg_log(logp, target_word));

        // Joint factor prediction from the same hidden state.
        if cfg.factored {
            let factor_target = if s < tgt_words.len() {
                match &example.tgt {
                    TargetSeq::Factored(toks) => toks[s].word_lang,
                    TargetSeq::Plain(_) => unreachable!(),
                }
            } else {
                tgt_lang_factor.expect("factored lang")
            };
            for &(w, b) in &tp.factor_out {
                let f_lin = tape.matvec(w, z);
                let f_logits = tape.add(f_lin, b);
                let f_logp = tape.log_softmax(f_logits, None);
                factor_losses.push(tape.pick_neg_log(f_logp, factor_target));
            }
        }
    }

    let word_nll_node = tape.sum(&word_losses);
    let (total_node, factor_nll) = if factor_losses.is_empty() {
        (word_nll_node, 0.0)
    } else {
        let f_sum = tape.sum(&factor_losses);
        let f_scaled = tape.scale(f_sum, opts.factor_loss_weight);
        (tape.add(word_nll_node, f_scaled), tape.scalar(f_sum))
    };

    let grads_raw = tape.backward(total_node);
    let mut map = BTreeMap::new();
    for ((name, node), (pname, ptensor)) in tp.named.iter().zip(params.named()) {
        debug_assert_eq!(name, &pname);
        map.insert(
            pname,
            Tensor {
                shape: ptensor.shape.clone(),
                data: grads_raw.of(*node).to_vec(),
            },
        );
    }

    Ok(SequenceLoss {
        total: tape.scalar(total_node),
        word_nll: tape.scalar(word_nll_node),
        factor_nll,
        predicted_tokens: steps,
        grads: ParamGrads { map },
    })
}
