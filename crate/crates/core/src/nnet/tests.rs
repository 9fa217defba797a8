use super::*;
use crate::vocab::{BOS, EOS};
use proptest::prelude::*;
use rand::Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn tiny_config(factored: bool, n_layers: usize, dropout_p: f64) -> ModelConfig {
    ModelConfig {
        vocab_size: 7,
        factor_vocab_size: if factored { 3 } else { 0 },
        d_word: 4,
        d_lang: 2,
        d_hidden: 4,
        n_layers,
        dropout_p,
        factored,
    }
}

fn random_example(cfg: &ModelConfig, seed: u64) -> Example {
    let mut r = rng(seed);
    let src_len = r.random_range(1..=3);
    let tgt_len = r.random_range(1..=3);
    // ids above the specials so the sequences look like real sentences
    let word = |r: &mut ChaCha8Rng| r.random_range(4..cfg.vocab_size);
    if cfg.factored {
        let lang = |r: &mut ChaCha8Rng| r.random_range(0..cfg.factor_vocab_size);
        let tgt_lang = lang(&mut r);
        Example {
            src: SourceSeq::Factored(
                (0..src_len)
                    .map(|_| FactoredSource {
                        word: word(&mut r),
                        word_lang: lang(&mut r),
                        tgt_lang,
                    })
                    .collect(),
            ),
            tgt: TargetSeq::Factored(
                (0..tgt_len)
                    .map(|_| FactoredTarget {
                        word: word(&mut r),
                        word_lang: tgt_lang,
                    })
                    .collect(),
            ),
            tgt_lang_factor: Some(tgt_lang),
        }
    } else {
        Example {
            src: SourceSeq::Plain((0..src_len).map(|_| word(&mut r)).collect()),
            tgt: TargetSeq::Plain((0..tgt_len).map(|_| word(&mut r)).collect()),
            tgt_lang_factor: None,
        }
    }
}

// ---------------------------------------------------------------- embed

#[test]
fn embed_reads_rows() {
    let eye = Tensor::matrix(3, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
    assert_eq!(embed(&eye, 2).unwrap(), vec![0.0, 0.0, 1.0]);
    let zero = Tensor::zeros(&[4, 2]);
    assert_eq!(embed(&zero, 1).unwrap(), vec![0.0, 0.0]);
    let m = Tensor::uniform(&[5, 3], -1.0, 1.0, &mut rng(3));
    assert_eq!(embed(&m, 4).unwrap(), m.row(4).to_vec());
    assert!(matches!(
        embed(&m, 5),
        Err(NnetError::IdOutOfRange { id: 5, rows: 5 })
    ));
}

#[test]
fn factored_embedding_concatenates() {
    let mut r = rng(4);
    let a = Tensor::uniform(&[3, 4], -1.0, 1.0, &mut r);
    let b = Tensor::uniform(&[2, 2], -1.0, 1.0, &mut r);
    let c = Tensor::uniform(&[2, 2], -1.0, 1.0, &mut r);

    // single factor degenerates to embed
    assert_eq!(
        embed_factored(&[&a], &[1]).unwrap(),
        embed(&a, 1).unwrap()
    );

    // widths (4, 2, 2) concatenate to 8, exactly the row contents
    let v = embed_factored(&[&a, &b, &c], &[2, 0, 1]).unwrap();
    assert_eq!(v.len(), 8);
    let mut manual = a.row(2).to_vec();
    manual.extend_from_slice(b.row(0));
    manual.extend_from_slice(c.row(1));
    assert_eq!(v, manual);

    assert!(matches!(
        embed_factored(&[&a, &b], &[0]),
        Err(NnetError::FactorArityMismatch { .. })
    ));
}

// ------------------------------------------------------------- lstm_step

fn lstm_zeroed(d_in: usize, h: usize) -> LstmWeights {
    LstmWeights {
        w_x: Tensor::zeros(&[4 * h, d_in]),
        w_h: Tensor::zeros(&[4 * h, h]),
        b: Tensor::zeros(&[4 * h]),
    }
}

#[test]
fn lstm_zero_everything_is_zero() {
    let w = lstm_zeroed(3, 2);
    let next = lstm_step(&w, &[0.0; 3], &LstmState::zeros(2)).unwrap();
    assert_eq!(next.h, vec![0.0, 0.0]);
    assert_eq!(next.c, vec![0.0, 0.0]);
}

#[test]
fn lstm_saturated_forget_preserves_cell() {
    let h = 2;
    let mut w = lstm_zeroed(2, h);
    for j in 0..h {
        w.b.data[h + j] = 60.0; // forget gate pinned open
        w.b.data[j] = -60.0; // input gate pinned shut
    }
    let state = LstmState {
        h: vec![0.0; h],
        c: vec![0.7, -0.3],
    };
    let next = lstm_step(&w, &[0.5, -0.5], &state).unwrap();
    for j in 0..h {
        assert!((next.c[j] - state.c[j]).abs() < 1e-12);
    }
}

/// Scalar-by-scalar reference with the standard gate formulas, kept free of
/// the Tensor type on purpose.
fn lstm_reference(
    w_x: &[Vec<f64>],
    w_h: &[Vec<f64>],
    b: &[f64],
    x: &[f64],
    h_prev: &[f64],
    c_prev: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let h = h_prev.len();
    let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
    let pre = |row: usize| -> f64 {
        let mut s = 0.0;
        for (j, xv) in x.iter().enumerate() {
            s += w_x[row][j] * xv;
        }
        for (j, hv) in h_prev.iter().enumerate() {
            s += w_h[row][j] * hv;
        }
        s + b[row]
    };
    let mut h_next = vec![0.0; h];
    let mut c_next = vec![0.0; h];
    for j in 0..h {
        let i = sig(pre(j));
        let f = sig(pre(h + j));
        let g = pre(2 * h + j).tanh();
        let o = sig(pre(3 * h + j));
        c_next[j] = f * c_prev[j] + i * g;
        h_next[j] = o * c_next[j].tanh();
    }
    (h_next, c_next)
}

#[test]
fn lstm_matches_scalar_reference() {
    let (d_in, h) = (3, 4);
    let mut r = rng(11);
    let w = LstmWeights {
        w_x: Tensor::uniform(&[4 * h, d_in], -0.9, 0.9, &mut r),
        w_h: Tensor::uniform(&[4 * h, h], -0.9, 0.9, &mut r),
        b: Tensor::uniform(&[4 * h], -0.5, 0.5, &mut r),
    };
    let x: Vec<f64> = (0..d_in).map(|_| r.random_range(-1.0..1.0)).collect();
    let state = LstmState {
        h: (0..h).map(|_| r.random_range(-1.0..1.0)).collect(),
        c: (0..h).map(|_| r.random_range(-1.0..1.0)).collect(),
    };
    let next = lstm_step(&w, &x, &state).unwrap();

    let to_rows = |t: &Tensor| -> Vec<Vec<f64>> {
        (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
    };
    let (h_ref, c_ref) = lstm_reference(
        &to_rows(&w.w_x),
        &to_rows(&w.w_h),
        &w.b.data,
        &x,
        &state.h,
        &state.c,
    );
    for j in 0..h {
        assert!((next.h[j] - h_ref[j]).abs() < 1e-12);
        assert!((next.c[j] - c_ref[j]).abs() < 1e-12);
    }
}

#[test]
fn lstm_rejects_width_mismatch() {
    let w = lstm_zeroed(3, 2);
    assert!(matches!(
        lstm_step(&w, &[0.0; 4], &LstmState::zeros(2)),
        Err(NnetError::WidthMismatch { .. })
    ));
}

// ---------------------------------------------------------------- encode

#[test]
fn encode_single_position() {
    let cfg = tiny_config(false, 1, 0.0);
    let params = ModelParams::init(&cfg, 1).unwrap();
    let enc = encode(&params, &SourceSeq::Plain(vec![4]), false, None).unwrap();
    assert_eq!(enc.len(), 1);
    assert_eq!(enc.annotations.cols(), 2 * cfg.d_hidden);
}

#[test]
fn encode_rejects_empty() {
    let cfg = tiny_config(false, 1, 0.0);
    let params = ModelParams::init(&cfg, 1).unwrap();
    assert!(matches!(
        encode(&params, &SourceSeq::Plain(vec![]), false, None),
        Err(NnetError::EmptyInput)
    ));
}

#[test]
fn palindrome_with_tied_directions_is_symmetric() {
    let cfg = tiny_config(false, 1, 0.0);
    let mut params = ModelParams::init(&cfg, 2).unwrap();
    params.enc_bwd = params.enc_fwd.clone();
    let ids = vec![4, 5, 6, 5, 4];
    let enc = encode(&params, &SourceSeq::Plain(ids.clone()), false, None).unwrap();
    let h = cfg.d_hidden;
    let n = ids.len();
    for i in 0..n {
        let row = enc.row(i);
        let mirror = enc.row(n - 1 - i);
        for j in 0..h {
            assert!((row[j] - mirror[h + j]).abs() < 1e-12);
            assert!((row[h + j] - mirror[j]).abs() < 1e-12);
        }
    }
}

#[test]
fn reversing_input_and_swapping_directions_reverses_annotations() {
    let cfg = tiny_config(false, 2, 0.0);
    let params = ModelParams::init(&cfg, 3).unwrap();
    let mut swapped = params.clone();
    std::mem::swap(&mut swapped.enc_fwd, &mut swapped.enc_bwd);

    let ids = vec![4, 6, 5, 4];
    let fwd = encode(&params, &SourceSeq::Plain(ids.clone()), false, None).unwrap();
    let mut rev_ids = ids.clone();
    rev_ids.reverse();
    let rev = encode(&swapped, &SourceSeq::Plain(rev_ids), false, None).unwrap();

    let h = cfg.d_hidden;
    let n = ids.len();
    for i in 0..n {
        let a = fwd.row(n - 1 - i);
        let b = rev.row(i);
        for j in 0..h {
            assert!((b[j] - a[h + j]).abs() < 1e-12);
            assert!((b[h + j] - a[j]).abs() < 1e-12);
        }
    }
}

// ------------------------------------------------------------- attention

#[test]
fn attention_singleton_is_identity() {
    let cfg = tiny_config(false, 1, 0.0);
    let params = ModelParams::init(&cfg, 4).unwrap();
    let enc = encode(&params, &SourceSeq::Plain(vec![5]), false, None).unwrap();
    let z = vec![0.3; cfg.d_hidden];
    let (alpha, ctx) = attention(&params, &z, &enc).unwrap();
    assert_eq!(alpha, vec![1.0]);
    assert_eq!(ctx, enc.row(0).to_vec());
}

#[test]
fn attention_uniform_over_identical_rows() {
    let cfg = tiny_config(false, 1, 0.0);
    let params = ModelParams::init(&cfg, 5).unwrap();
    let row: Vec<f64> = (0..2 * cfg.d_hidden).map(|j| 0.1 * j as f64).collect();
    let mut data = Vec::new();
    for _ in 0..4 {
        data.extend_from_slice(&row);
    }
    let enc = EncoderOutput {
        annotations: Tensor::matrix(4, 2 * cfg.d_hidden, data),
    };
    let z = vec![0.2; cfg.d_hidden];
    let (alpha, ctx) = attention(&params, &z, &enc).unwrap();
    for a in &alpha {
        assert!((a - 0.25).abs() < 1e-12);
    }
    for (c, r) in ctx.iter().zip(&row) {
        assert!((c - r).abs() < 1e-12);
    }
}

#[test]
fn attention_matches_formula_oracle() {
    let cfg = tiny_config(false, 1, 0.0);
    let params = ModelParams::init(&cfg, 6).unwrap();
    let enc = encode(&params, &SourceSeq::Plain(vec![4, 5, 6]), false, None).unwrap();
    let mut r = rng(7);
    let z: Vec<f64> = (0..cfg.d_hidden).map(|_| r.random_range(-1.0..1.0)).collect();
    let (alpha, ctx) = attention(&params, &z, &enc).unwrap();

    // Direct evaluation of rel, softmax and the weighted sum with loops.
    let h = cfg.d_hidden;
    let mut scores = Vec::new();
    for i in 0..enc.len() {
        let hi = enc.row(i);
        let mut s = 0.0;
        for a in 0..h {
            let mut pre = 0.0;
            for (j, zv) in z.iter().enumerate() {
                pre += params.attn.query.at(a, j) * zv;
            }
            for (j, hv) in hi.iter().enumerate() {
                pre += params.attn.key.at(a, j) * hv;
            }
            s += params.attn.score.data[a] * pre.tanh();
        }
        scores.push(s);
    }
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let zsum: f64 = exps.iter().sum();
    let mut ctx_ref = vec![0.0; 2 * h];
    for i in 0..enc.len() {
        for (j, v) in enc.row(i).iter().enumerate() {
            ctx_ref[j] += exps[i] / zsum * v;
        }
    }
    let alpha_sum: f64 = alpha.iter().sum();
    assert!((alpha_sum - 1.0).abs() < 1e-9);
    for i in 0..enc.len() {
        assert!((alpha[i] - exps[i] / zsum).abs() < 1e-10);
    }
    for j in 0..2 * h {
        assert!((ctx[j] - ctx_ref[j]).abs() < 1e-10);
    }
}

// ---------------------------------------------------------- decoder_step

#[test]
fn decoder_zero_model_gives_zero_z() {
    let cfg = tiny_config(false, 1, 0.0);
    let mut params = ModelParams::init(&cfg, 8).unwrap();
    for (_, t) in params.named_mut() {
        t.data.iter_mut().for_each(|v| *v = 0.0);
    }
    let enc = encode(&params, &SourceSeq::Plain(vec![4]), false, None).unwrap();
    let state = init_decoder_state(&params, &enc);
    let t_prev = vec![0.0; cfg.d_word];
    let ctx = vec![0.0; 2 * cfg.d_hidden];
    let (_, z) = decoder_step(&params, &state, &t_prev, &ctx, false, None).unwrap();
    assert_eq!(z, vec![0.0; cfg.d_hidden]);
}

#[test]
fn decoder_step_is_pure() {
    let cfg = tiny_config(false, 2, 0.0);
    let params = ModelParams::init(&cfg, 9).unwrap();
    let enc = encode(&params, &SourceSeq::Plain(vec![4, 5]), false, None).unwrap();
    let state = init_decoder_state(&params, &enc);
    let t_prev = embed(&params.embed_tgt, 5).unwrap();
    let (_, ctx) = attention(&params, state.z(), &enc).unwrap();
    let a = decoder_step(&params, &state, &t_prev, &ctx, false, None).unwrap();
    let b = decoder_step(&params, &state, &t_prev, &ctx, false, None).unwrap();
    assert_eq!(a, b);
}

#[test]
fn decoder_rejects_width_mismatch() {
    let cfg = tiny_config(false, 1, 0.0);
    let params = ModelParams::init(&cfg, 10).unwrap();
    let enc = encode(&params, &SourceSeq::Plain(vec![4]), false, None).unwrap();
    let state = init_decoder_state(&params, &enc);
    let bad = vec![0.0; cfg.d_word + 1];
    let ctx = vec![0.0; 2 * cfg.d_hidden];
    assert!(decoder_step(&params, &state, &bad, &ctx, false, None).is_err());
}

// -------------------------------------------------- output distributions

#[test]
fn uniform_logits_give_uniform_probabilities() {
    let cfg = ModelConfig {
        vocab_size: 4,
        ..tiny_config(false, 1, 0.0)
    };
    let mut params = ModelParams::init(&cfg, 11).unwrap();
    params.out.w = Tensor::zeros(&[4, cfg.d_hidden]);
    params.out.b = Tensor::zeros(&[4]);
    let logp = output_distribution(&params, &vec![0.5; cfg.d_hidden], None).unwrap();
    for l in &logp {
        assert!((l.exp() - 0.25).abs() < 1e-12);
    }
}

#[test]
fn single_allowed_entry_gets_probability_one() {
    let cfg = tiny_config(false, 1, 0.0);
    let params = ModelParams::init(&cfg, 12).unwrap();
    let mut mask = vec![false; cfg.vocab_size];
    mask[EOS] = true;
    let logp = output_distribution(&params, &vec![0.1; cfg.d_hidden], Some(&mask)).unwrap();
    assert!((logp[EOS].exp() - 1.0).abs() < 1e-12);
    assert!(logp.iter().enumerate().all(|(i, l)| i == EOS || *l == f64::NEG_INFINITY));
}

#[test]
fn masked_distribution_is_renormalized_unmasked() {
    let cfg = tiny_config(false, 1, 0.0);
    let params = ModelParams::init(&cfg, 13).unwrap();
    let z: Vec<f64> = (0..cfg.d_hidden).map(|j| 0.3 * j as f64 - 0.4).collect();
    let mask: Vec<bool> = (0..cfg.vocab_size).map(|i| i % 2 == 1).collect();
    let masked = output_distribution(&params, &z, Some(&mask)).unwrap();
    let unmasked = output_distribution(&params, &z, None).unwrap();
    let renorm: f64 = unmasked
        .iter()
        .enumerate()
        .filter(|(i, _)| mask[*i])
        .map(|(_, l)| l.exp())
        .sum();
    for i in 0..cfg.vocab_size {
        if mask[i] {
            assert!((masked[i] - (unmasked[i] - renorm.ln())).abs() < 1e-9);
        } else {
            assert_eq!(masked[i], f64::NEG_INFINITY);
        }
    }
}

#[test]
fn all_false_mask_rejected() {
    let cfg = tiny_config(false, 1, 0.0);
    let params = ModelParams::init(&cfg, 14).unwrap();
    let mask = vec![false; cfg.vocab_size];
    assert!(matches!(
        output_distribution(&params, &vec![0.0; cfg.d_hidden], Some(&mask)),
        Err(NnetError::AllMasked)
    ));
}

#[test]
fn factor_head_singleton_and_uniform() {
    // A one-entry factor vocabulary puts all mass on its single value.
    let cfg = ModelConfig {
        factor_vocab_size: 1,
        d_lang: 2,
        factored: true,
        ..tiny_config(false, 1, 0.0)
    };
    let params = ModelParams::init(&cfg, 15).unwrap();
    let dists = factor_distributions(&params, &vec![0.2; cfg.d_hidden]).unwrap();
    assert_eq!(dists.len(), 1);
    assert_eq!(dists[0].len(), 1);
    assert!((dists[0][0].exp() - 1.0).abs() < 1e-12);

    // Zeroed head weights spread mass uniformly over the languages.
    let cfg = tiny_config(true, 1, 0.0);
    let mut params = ModelParams::init(&cfg, 16).unwrap();
    params.factor_out[0].w = Tensor::zeros(&[cfg.factor_vocab_size, cfg.d_hidden]);
    params.factor_out[0].b = Tensor::zeros(&[cfg.factor_vocab_size]);
    let dists = factor_distributions(&params, &vec![0.7; cfg.d_hidden]).unwrap();
    for l in &dists[0] {
        assert!((l.exp() - 1.0 / cfg.factor_vocab_size as f64).abs() < 1e-12);
    }
}

#[test]
fn factor_distributions_match_direct_softmax() {
    let cfg = tiny_config(true, 1, 0.0);
    let params = ModelParams::init(&cfg, 17).unwrap();
    let z: Vec<f64> = (0..cfg.d_hidden).map(|j| 0.25 * j as f64 - 0.3).collect();
    let dists = factor_distributions(&params, &z).unwrap();
    let head = &params.factor_out[0];
    let mut logits = head.w.matvec(&z);
    for (l, b) in logits.iter_mut().zip(&head.b.data) {
        *l += b;
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let zsum: f64 = logits.iter().map(|l| (l - max).exp()).sum();
    for (out, l) in dists[0].iter().zip(&logits) {
        let direct = (l - max).exp() / zsum;
        assert!((out.exp() - direct).abs() < 1e-12);
    }
}

#[test]
fn factor_distributions_need_factored_model() {
    let cfg = tiny_config(false, 1, 0.0);
    let params = ModelParams::init(&cfg, 18).unwrap();
    assert!(matches!(
        factor_distributions(&params, &vec![0.0; cfg.d_hidden]),
        Err(NnetError::NotFactored)
    ));
}

// --------------------------------------------------------------- dropout

#[test]
fn dropout_identity_cases() {
    let x: Vec<f64> = (0..16).map(|j| j as f64).collect();
    let mut r = rng(19);
    assert_eq!(dropout(&x, 0.0, true, &mut r).unwrap(), x);
    assert_eq!(dropout(&x, 0.5, false, &mut r).unwrap(), x);
    assert!(matches!(
        dropout(&x, 1.0, true, &mut r),
        Err(NnetError::InvalidDropout(_))
    ));
    assert!(matches!(
        dropout(&x, -0.1, true, &mut r),
        Err(NnetError::InvalidDropout(_))
    ));
}

#[test]
fn dropout_zero_fraction_is_near_p() {
    let x = vec![1.0; 10_000];
    let mut r = rng(20);
    let y = dropout(&x, 0.3, true, &mut r).unwrap();
    let zeros = y.iter().filter(|v| **v == 0.0).count() as f64 / y.len() as f64;
    assert!((zeros - 0.3).abs() < 0.02, "zero fraction {zeros}");
    let survivor = y.iter().find(|v| **v != 0.0).unwrap();
    assert!((survivor - 1.0 / 0.7).abs() < 1e-12);
}

// --------------------------------------------------------- sequence loss

#[test]
fn saturated_hand_built_model_drives_loss_to_zero() {
    // One hidden unit, one embedding dimension. The target-word embedding
    // (+1) and the start embedding (-1) flow through a pinned-open LSTM so
    // the hidden state carries the sign of the previous token, and the
    // output rows read it out with a large gain: the model deterministically
    // emits `w` then `</s>`.
    let cfg = ModelConfig {
        vocab_size: 7,
        factor_vocab_size: 0,
        d_word: 1,
        d_lang: 0,
        d_hidden: 1,
        n_layers: 1,
        dropout_p: 0.0,
        factored: false,
    };
    let mut params = ModelParams::init(&cfg, 21).unwrap();
    for (_, t) in params.named_mut() {
        t.data.iter_mut().for_each(|v| *v = 0.0);
    }
    let w_id = 4usize;
    params.embed_tgt.data[BOS] = -1.0;
    params.embed_tgt.data[w_id] = 1.0;
    // decoder gates: input open, forget shut, output open, candidate reads
    // the previous embedding with a large gain
    params.dec[0].b.data[0] = 60.0; // input gate
    params.dec[0].b.data[1] = -60.0; // forget gate
    params.dec[0].b.data[3] = 60.0; // output gate
    // candidate row of w_x is row 2; input width = d_word + 2*d_hidden = 3
    let in_w = cfg.d_word + 2 * cfg.d_hidden;
    params.dec[0].w_x.data[2 * in_w] = 60.0;
    params.out.w.data[w_id] = -60.0;
    params.out.w.data[EOS] = 60.0;

    let example = Example {
        src: SourceSeq::Plain(vec![5]),
        tgt: TargetSeq::Plain(vec![w_id]),
        tgt_lang_factor: None,
    };
    let loss = sequence_loss(&params, &example, &LossOptions::default(), None).unwrap();
    assert!(loss.total < 1e-9, "saturated loss = {}", loss.total);
}

#[test]
fn loss_is_deterministic() {
    for factored in [false, true] {
        let cfg = tiny_config(factored, 2, 0.2);
        let params = ModelParams::init(&cfg, 22).unwrap();
        let example = random_example(&cfg, 23);
        let opts = LossOptions::default();
        let mut r1 = rng(24);
        let mut r2 = rng(24);
        let a = sequence_loss(&params, &example, &opts, Some(&mut r1)).unwrap();
        let b = sequence_loss(&params, &example, &opts, Some(&mut r2)).unwrap();
        assert_eq!(a.total.to_bits(), b.total.to_bits());
        for ((na, ta), (nb, tb)) in a.grads.iter().zip(b.grads.iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta.data, tb.data);
        }
    }
}

#[test]
fn loss_rejects_empty_target() {
    let cfg = tiny_config(false, 1, 0.0);
    let params = ModelParams::init(&cfg, 25).unwrap();
    let example = Example {
        src: SourceSeq::Plain(vec![4]),
        tgt: TargetSeq::Plain(vec![]),
        tgt_lang_factor: None,
    };
    assert!(matches!(
        sequence_loss(&params, &example, &LossOptions::default(), None),
        Err(NnetError::EmptyTarget)
    ));
}

/// Teacher-forced word NLL recomputed step by step through the pure
/// forward functions; pins the tape and the pure path together.
fn pure_word_nll(params: &ModelParams, example: &Example) -> f64 {
    let enc = encode(params, &example.src, false, None).unwrap();
    let mut state = init_decoder_state(params, &enc);
    let words = example.tgt.word_ids();
    let mut nll = 0.0;
    for s in 0..=words.len() {
        let (prev, prev_lang) = if s == 0 {
            (BOS, example.tgt_lang_factor)
        } else {
            match &example.tgt {
                TargetSeq::Plain(ids) => (ids[s - 1], None),
                TargetSeq::Factored(t) => (t[s - 1].word, Some(t[s - 1].word_lang)),
            }
        };
        let t_prev = embed_target(params, prev, prev_lang).unwrap();
        let (_, ctx) = attention(params, state.z(), &enc).unwrap();
        let (next, z) = decoder_step(params, &state, &t_prev, &ctx, false, None).unwrap();
        state = next;
        let logp = output_distribution(params, &z, None).unwrap();
        let target = if s < words.len() { words[s] } else { EOS };
        nll -= logp[target];
    }
    nll
}

#[test]
fn tape_and_pure_forward_agree() {
    for factored in [false, true] {
        for seed in 0..4u64 {
            let cfg = tiny_config(factored, 1, 0.0);
            let params = ModelParams::init(&cfg, 100 + seed).unwrap();
            let example = random_example(&cfg, 200 + seed);
            let loss =
                sequence_loss(&params, &example, &LossOptions::default(), None).unwrap();
            let pure = pure_word_nll(&params, &example);
            assert!(
                (loss.word_nll - pure).abs() < 1e-9,
                "tape {} vs pure {}",
                loss.word_nll,
                pure
            );
        }
    }
}

/// Central-difference gradient check at epsilon 1e-5. The comparison is
/// relative with an absolute floor, so near-zero coordinates are compared
/// absolutely at 1e-7.
pub(crate) fn max_grad_rel_err(
    cfg: &ModelConfig,
    params_seed: u64,
    example: &Example,
    dropout_seed: Option<u64>,
) -> f64 {
    let params = ModelParams::init(cfg, params_seed).unwrap();
    let opts = LossOptions {
        training: true,
        factor_loss_weight: 1.0,
    };
    let eval = |p: &ModelParams| -> f64 {
        let mut r = dropout_seed.map(ChaCha8Rng::seed_from_u64);
        sequence_loss(p, example, &opts, r.as_mut())
            .unwrap()
            .total
    };
    let mut r = dropout_seed.map(ChaCha8Rng::seed_from_u64);
    let analytic = sequence_loss(&params, example, &opts, r.as_mut())
        .unwrap()
        .grads;

    let eps = 1e-5;
    let mut max_rel: f64 = 0.0;
    let names: Vec<String> = params.named().into_iter().map(|(n, _)| n).collect();
    for name in names {
        let n_elem = analytic.get(&name).unwrap().numel();
        for j in 0..n_elem {
            let mut plus = params.clone();
            for (pn, t) in plus.named_mut() {
                if pn == name {
                    t.data[j] += eps;
                }
            }
            let mut minus = params.clone();
            for (pn, t) in minus.named_mut() {
                if pn == name {
                    t.data[j] -= eps;
                }
            }
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * eps);
            let an = analytic.get(&name).unwrap().data[j];
            let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-3);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    max_rel
}

#[test]
fn gradients_match_finite_differences() {
    // plain, factored, and a 2-layer model with live dropout
    let cases = [
        (tiny_config(false, 1, 0.0), None),
        (tiny_config(true, 1, 0.0), None),
        (tiny_config(false, 2, 0.3), Some(77u64)),
    ];
    for (i, (cfg, dropout_seed)) in cases.into_iter().enumerate() {
        let example = random_example(&cfg, 300 + i as u64);
        let rel = max_grad_rel_err(&cfg, 400 + i as u64, &example, dropout_seed);
        assert!(rel < 1e-4, "case {i}: max rel err {rel}");
    }
}

#[test]
fn param_count_formula_matches_actual_tensors() {
    for factored in [false, true] {
        for layers in [1usize, 2] {
            let cfg = tiny_config(factored, layers, 0.1);
            let params = ModelParams::init(&cfg, 31).unwrap();
            let actual: usize = params.named().iter().map(|(_, t)| t.numel()).sum();
            assert_eq!(cfg.param_count(), actual, "factored={factored} layers={layers}");
        }
    }
}

#[test]
fn factored_width_additivity() {
    let cfg = tiny_config(true, 1, 0.0);
    assert_eq!(cfg.src_input_width(), cfg.d_word + 2 * cfg.d_lang);
    assert_eq!(cfg.tgt_input_width(), cfg.d_word + cfg.d_lang);
    let params = ModelParams::init(&cfg, 32).unwrap();
    assert_eq!(params.enc_fwd[0].w_x.cols(), cfg.src_input_width());
    assert_eq!(
        params.dec[0].w_x.cols(),
        cfg.tgt_input_width() + 2 * cfg.d_hidden
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn distributions_normalize(seed in 0u64..500, masked in proptest::bool::ANY) {
        let cfg = tiny_config(false, 1, 0.0);
        let params = ModelParams::init(&cfg, seed).unwrap();
        let mut r = rng(seed ^ 0xabc);
        let z: Vec<f64> = (0..cfg.d_hidden).map(|_| r.random_range(-2.0..2.0)).collect();
        let mask: Option<Vec<bool>> = if masked {
            let mut m: Vec<bool> = (0..cfg.vocab_size).map(|_| r.random::<f64>() < 0.5).collect();
            m[EOS] = true;
            Some(m)
        } else {
            None
        };
        let logp = output_distribution(&params, &z, mask.as_deref()).unwrap();
        let total: f64 = logp.iter().filter(|l| l.is_finite()).map(|l| l.exp()).sum();
        prop_assert!((total - 1.0).abs() < 1e-9);

        let enc = encode(&params, &SourceSeq::Plain(vec![4, 5, 6]), false, None).unwrap();
        let (alpha, _) = attention(&params, &z, &enc).unwrap();
        prop_assert!((alpha.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}
