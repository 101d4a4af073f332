//! Property suites shared by `kedit selftest` and the test targets. Each
//! check returns the measured quantity so callers can report it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::Tape;
use crate::editor::{AdversarialRetriever, EditorConfig, Lab, Strategy};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::gradcheck::fd_compare;
use crate::meme::{self, EncoderParams, MemoryStore, PairItem, TextMemoryEntry, VisualMemoryEntry};
use crate::memi::{fused_ffn_ordered, AdapterBank, ModalityGates, SummandOrder, Trainable};
use crate::metrics::evaluate_run;
use crate::model::{self, collect_grads, init_model, random_matrix, sequence_loss, FrozenWeights, ModelConfig, Sequence};
use crate::tensor::Tensor;
use crate::types::Modality;
use crate::world::{generate_world_with, make_edit_stream, ImageSpec, WorldConfig};

pub type Suite = fn(Exec) -> Result<()>;

pub const SUITES: [(&str, Suite); 7] = [
    ("gating_identity", suite_gating),
    ("gradient_fidelity", suite_gradients),
    ("adapter_commutativity", suite_commutativity),
    ("retrieval_oracle", suite_retrieval),
    ("adversarial_endpoints", suite_adversarial),
    ("modality_isolation", suite_isolation),
    ("run_determinism", suite_determinism),
];

fn tiny_config(vocab_text: usize, vocab_image: usize) -> ModelConfig {
    ModelConfig {
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        d_ff: 32,
        vocab_size_text: vocab_text,
        vocab_size_image: vocab_image,
        max_seq_len: 64,
        lora_rank: 2,
        ..ModelConfig::default()
    }
}

/// Fills every adapter and connector tensor with Gaussian noise.
pub fn randomize_bank(bank: &mut AdapterBank, seed: u64, std: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for which in [Trainable::Visual, Trainable::Textual, Trainable::Shared, Trainable::Connector] {
        for t in bank.tensors_mut(which) {
            *t = random_matrix(&mut rng, t.rows(), t.cols(), std);
        }
    }
}

/// Largest absolute logit difference between `bank` and `bank` with a zeroed
/// connector over `n` random unimodal token sequences.
pub fn gating_max_diff(weights: &FrozenWeights, bank: &AdapterBank, n: usize, seed: u64, exec: Exec) -> Result<f64> {
    let mut zeroed = bank.clone();
    for t in zeroed.tensors_mut(Trainable::Connector) {
        t.fill(0.0);
    }
    let cfg = &weights.config;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cases: Vec<(ModalityGates, Vec<usize>)> = (0..n)
        .map(|_| {
            let gates = if rng.gen_bool(0.5) { ModalityGates::VISUAL } else { ModalityGates::TEXTUAL };
            let len = rng.gen_range(2..=cfg.max_seq_len.min(24));
            (gates, (0..len).map(|_| rng.gen_range(0..cfg.vocab_size())).collect())
        })
        .collect();
    let diffs = exec.map(&cases, |(g, toks)| -> Result<f64> {
        let a = model::forward(weights, Some(bank), *g, toks)?;
        let b = model::forward(weights, Some(&zeroed), *g, toks)?;
        Ok(a.max_abs_diff(&b))
    });
    diffs.into_iter().try_fold(0.0f64, |m, d| Ok(m.max(d?)))
}

/// Largest difference between the two summand orders of the fused FFN over
/// `n` random adapter states and inputs.
pub fn commutativity_max_diff(n: usize, seed: u64) -> Result<f64> {
    let cfg = tiny_config(20, 8);
    let w = init_model(&cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for i in 0..n {
        let mut bank = AdapterBank::dual(&cfg, i as u64);
        randomize_bank(&mut bank, seed ^ (i as u64 + 1), rng.gen_range(0.01..2.0));
        let rows = rng.gen_range(1..6);
        let h = random_matrix(&mut rng, rows, cfg.d_model, 1.0);
        let layer = rng.gen_range(0..cfg.n_layers);
        let a = fused_ffn_ordered(&w, Some(&bank), layer, ModalityGates::BOTH, &h, SummandOrder::VisualFirst)?;
        let b = fused_ffn_ordered(&w, Some(&bank), layer, ModalityGates::BOTH, &h, SummandOrder::TextualFirst)?;
        worst = worst.max(a.max_abs_diff(&b));
    }
    Ok(worst)
}

/// Cosine computed with nalgebra, independent of the retrieval code path.
fn oracle_cosine(a: &[f64], b: &[f64]) -> f64 {
    let (a, b) = (nalgebra::DVector::from_column_slice(a), nalgebra::DVector::from_column_slice(b));
    a.dot(&b) / (a.norm().max(1e-12) * b.norm().max(1e-12))
}

/// Lowest index whose score is within rounding of the maximum.
fn exhaustive_argmax(scores: &[f64]) -> Option<usize> {
    let best = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    scores.iter().position(|&s| s >= best - 1e-12)
}

/// Agreement (out of `n` stores per modality) between the retrieval
/// functions and an exhaustive scan. Stores contain deliberate duplicates so
/// the tie rule is exercised.
pub fn retrieval_agreement(n: usize, seed: u64) -> (usize, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vec = |rng: &mut ChaCha8Rng, d: usize| -> Vec<f64> { (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect() };
    let (mut text_ok, mut vis_ok) = (0, 0);
    for _ in 0..n {
        let d = rng.gen_range(2..12);
        let size = rng.gen_range(1..40);
        let mut store = MemoryStore::default();
        for i in 0..size {
            let emb = if i > 0 && rng.gen_bool(0.2) {
                store.text[rng.gen_range(0..i)].embedding.clone()
            } else {
                vec(&mut rng, d)
            };
            store.text.push(TextMemoryEntry {
                edit_index: i,
                question: String::new(),
                answer: String::new(),
                embedding: emb,
            });
            let (img, txt) = if i > 0 && rng.gen_bool(0.2) {
                let j = rng.gen_range(0..i);
                (store.visual[j].image_embedding.clone(), store.visual[j].text_embedding.clone())
            } else {
                (vec(&mut rng, d), vec(&mut rng, d))
            };
            store.visual.push(VisualMemoryEntry {
                edit_index: i,
                image: ImageSpec { entity: i, variant: 0 },
                question: String::new(),
                answer: String::new(),
                image_embedding: img,
                text_embedding: txt,
            });
        }
        let q = if rng.gen_bool(0.3) { store.text[rng.gen_range(0..size)].embedding.clone() } else { vec(&mut rng, d) };
        let scan: Vec<f64> = store.text.iter().map(|e| oracle_cosine(&q, &e.embedding)).collect();
        if meme::retrieve_text_embedding(&store, &q).map(|r| r.index) == exhaustive_argmax(&scan) {
            text_ok += 1;
        }
        let (qi, qt) = (vec(&mut rng, d), vec(&mut rng, d));
        let alpha = [0.0, 0.5, 1.0, rng.gen_range(0.0..1.0)][rng.gen_range(0..4)];
        let scan: Vec<f64> = store
            .visual
            .iter()
            .map(|e| alpha * oracle_cosine(&qi, &e.image_embedding) + (1.0 - alpha) * oracle_cosine(&qt, &e.text_embedding))
            .collect();
        if meme::retrieve_visual_embedding(&store, &qi, &qt, alpha).map(|r| r.index) == exhaustive_argmax(&scan) {
            vis_ok += 1;
        }
    }
    (text_ok, vis_ok)
}

/// Largest finite-difference relative error of the sequence loss gradient
/// for the base weights, each adapter and the connector, in that order.
pub fn model_gradient_errors(
    weights: &FrozenWeights,
    bank: &AdapterBank,
    seq: &Sequence,
    per_param: usize,
    seed: u64,
) -> Result<Vec<(&'static str, f64)>> {
    let c = &weights.config;
    let mut out = Vec::new();
    let base = {
        let analytic = {
            let mut tape = Tape::new();
            let bw = weights.bind(&mut tape, true);
            let (loss, _) = sequence_loss(&mut tape, c, &bw, None, ModalityGates::OFF, seq)?;
            let mut g = tape.backward(loss)?;
            collect_grads(&mut g, &bw.vars(), &weights.tensors())
        };
        let params: Vec<Tensor> = weights.tensors().into_iter().cloned().collect();
        let eval = |ps: &[Tensor]| -> Result<f64> {
            let mut m = weights.clone();
            for (t, p) in m.tensors_mut().into_iter().zip(ps) {
                *t = p.clone();
            }
            let mut tape = Tape::new();
            let bw = m.bind(&mut tape, false);
            let (loss, _) = sequence_loss(&mut tape, c, &bw, None, ModalityGates::OFF, seq)?;
            Ok(tape.value(loss).data()[0])
        };
        fd_compare(eval, &params, &analytic, per_param, seed)?.max_rel_err
    };
    out.push(("base", base));
    for (name, which) in [
        ("visual_adapter", Trainable::Visual),
        ("textual_adapter", Trainable::Textual),
        ("connector", Trainable::Connector),
    ] {
        let analytic = {
            let mut tape = Tape::new();
            let bw = weights.bind(&mut tape, false);
            let a = bank.bind(&mut tape, which);
            let (loss, _) = sequence_loss(&mut tape, c, &bw, Some(&a), ModalityGates::BOTH, seq)?;
            let mut g = tape.backward(loss)?;
            collect_grads(&mut g, &a.vars(which), &bank.tensors(which))
        };
        let params: Vec<Tensor> = bank.tensors(which).into_iter().cloned().collect();
        let eval = |ps: &[Tensor]| -> Result<f64> {
            let mut b = bank.clone();
            for (t, p) in b.tensors_mut(which).into_iter().zip(ps) {
                *t = p.clone();
            }
            let mut tape = Tape::new();
            let bw = weights.bind(&mut tape, false);
            let a = b.bind(&mut tape, Trainable::None);
            let (loss, _) = sequence_loss(&mut tape, c, &bw, Some(&a), ModalityGates::BOTH, seq)?;
            Ok(tape.value(loss).data()[0])
        };
        out.push((name, fd_compare(eval, &params, &analytic, per_param, seed)?.max_rel_err));
    }
    Ok(out)
}

/// Finite-difference relative error of the encoder pair loss over `items`.
pub fn encoder_gradient_error(enc: &EncoderParams, items: &[PairItem], per_param: usize, seed: u64) -> Result<f64> {
    let params: Vec<Tensor> = enc.text.tensors().into_iter().chain(enc.image.tensors()).cloned().collect();
    let loss_of = |ps: &[Tensor], grad: bool| -> Result<(f64, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let v: Vec<_> = ps.iter().map(|p| tape.leaf_ref(p, grad)).collect();
        let loss = meme::pair_loss(&mut tape, [v[0], v[1], v[2], v[3]], enc, items)?;
        let value = tape.value(loss).data()[0];
        if !grad {
            return Ok((value, Vec::new()));
        }
        let mut g = tape.backward(loss)?;
        let like: Vec<&Tensor> = ps.iter().collect();
        Ok((value, collect_grads(&mut g, &v, &like)))
    };
    let (_, analytic) = loss_of(&params, true)?;
    Ok(fd_compare(|ps| Ok(loss_of(ps, false)?.0), &params, &analytic, per_param, seed)?.max_rel_err)
}

fn suite_gating(exec: Exec) -> Result<()> {
    let cfg = tiny_config(30, 10);
    let w = init_model(&cfg)?;
    let mut bank = AdapterBank::dual(&cfg, 1);
    randomize_bank(&mut bank, 2, 0.5);
    let d = gating_max_diff(&w, &bank, 100, 3, exec)?;
    ensure(d == 0.0, format!("unimodal logits moved by {d}"))
}

fn suite_gradients(_: Exec) -> Result<()> {
    let cfg = tiny_config(20, 8);
    let w = init_model(&cfg)?;
    let mut bank = AdapterBank::dual(&cfg, 7);
    randomize_bank(&mut bank, 8, 0.3);
    let seq = Sequence::new(vec![1, 4, 13, 14, 5, 8, 2, 22, 23], &[9, 10]);
    for (name, e) in model_gradient_errors(&w, &bank, &seq, 4, 9)? {
        ensure(e < 1e-4, format!("{name} gradient relative error {e}"))?;
    }
    let enc = EncoderParams::new(20, 8, 6, 10);
    let items = [
        PairItem::Text { a: vec![1, 2, 3], b: vec![1, 4, 3], label: 1.0 },
        PairItem::Text { a: vec![5, 6], b: vec![7, 8, 9], label: 0.0 },
        PairItem::Image { a: vec![0, 1, 2, 3], b: vec![0, 1, 2, 5], label: 1.0 },
        PairItem::Image { a: vec![4, 5, 6, 7], b: vec![0, 1, 2, 3], label: 0.0 },
    ];
    let e = encoder_gradient_error(&enc, &items, 6, 11)?;
    ensure(e < 1e-4, format!("encoder gradient relative error {e}"))
}

fn suite_commutativity(_: Exec) -> Result<()> {
    let d = commutativity_max_diff(1000, 4)?;
    ensure(d <= 1e-9, format!("summand order changed the output by {d}"))
}

fn suite_retrieval(_: Exec) -> Result<()> {
    let (t, v) = retrieval_agreement(100, 5);
    ensure(t == 100 && v == 100, format!("oracle agreement text {t}/100, visual {v}/100"))
}

fn suite_adversarial(_: Exec) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let one = AdversarialRetriever::new(1.0, 0)?;
    let zero = AdversarialRetriever::new(0.0, 0)?;
    for _ in 0..1000 {
        let n = rng.gen_range(2..30);
        let t = rng.gen_range(0..n);
        ensure(one.draw(&mut rng, n, t) == Some((t, true)), "p=1 missed the true entry".into())?;
        let d = zero.draw(&mut rng, n, t).expect("n ≥ 2");
        ensure(d.0 != t && d.0 < n && !d.1, "p=0 returned the true entry".into())?;
    }
    ensure(zero.draw(&mut rng, 1, 0).is_none(), "counterfactual from a one-entry store".into())
}

fn small_lab() -> Result<(crate::world::KnowledgeBase, FrozenWeights, EncoderParams)> {
    let kb = generate_world_with(&WorldConfig {
        n_entities: 60,
        n_locality: 8,
        n_train_entities: 10,
        ..WorldConfig::default()
    })?;
    let w = init_model(&tiny_config(kb.vocab.text_len(), kb.vocab.image_len()))?;
    let enc = EncoderParams::for_world(&kb, 8, 0);
    Ok((kb, w, enc))
}

/// Fingerprints of θ_v and θ_t after the full stream and after replaying
/// only the visual, respectively textual, edits.
pub fn isolation_fingerprints(
    lab: &Lab<'_>,
    cfg: &EditorConfig,
    stream: &[crate::world::EditRecord],
) -> Result<[(String, String); 2]> {
    let full = {
        let mut s = lab.new_state(cfg, None)?;
        for e in stream {
            lab.apply_edit(&mut s, cfg, e)?;
        }
        s.bank.expect("dual bank")
    };
    let replay = |m: Modality| -> Result<AdapterBank> {
        let mut s = lab.new_state(cfg, None)?;
        for e in stream.iter().filter(|e| e.modality == m) {
            lab.apply_edit(&mut s, cfg, e)?;
        }
        Ok(s.bank.expect("dual bank"))
    };
    let v = replay(Modality::Visual)?;
    let t = replay(Modality::Textual)?;
    Ok([
        (full.fingerprint(Trainable::Visual), v.fingerprint(Trainable::Visual)),
        (full.fingerprint(Trainable::Textual), t.fingerprint(Trainable::Textual)),
    ])
}

fn suite_isolation(exec: Exec) -> Result<()> {
    let (kb, w, enc) = small_lab()?;
    let lab = Lab {
        kb: &kb,
        weights: &w,
        encoders: &enc,
        exec,
    };
    let cfg = EditorConfig {
        strategy: Strategy::InternalDualLora,
        lora_rank: 2,
        edit_steps: 3,
        ..EditorConfig::default()
    };
    let stream = make_edit_stream(&kb, 10, 1)?;
    for (full, alone) in isolation_fingerprints(&lab, &cfg, &stream)? {
        ensure(full == alone, "adapter state depends on the other modality's edits".into())?;
    }
    Ok(())
}

fn suite_determinism(exec: Exec) -> Result<()> {
    let (kb, w, enc) = small_lab()?;
    let stream = make_edit_stream(&kb, 8, 2)?;
    let cfg = EditorConfig {
        strategy: Strategy::HybridNoConnector,
        lora_rank: 2,
        edit_steps: 2,
        gaps: vec![0, 2, 5],
        test_hit_rate: Some(0.5),
        ..EditorConfig::default()
    };
    let mut outs = Vec::new();
    for e in [exec, Exec::Sequential] {
        let lab = Lab {
            kb: &kb,
            weights: &w,
            encoders: &enc,
            exec: e,
        };
        let st = lab.sequential_run(&cfg, &stream, None)?;
        let csv = evaluate_run(cfg.strategy, &st.ledger, &cfg.gaps)
            .map(|r| r.to_csv())
            .unwrap_or_else(|e| e.to_string());
        outs.push((serde_json::to_string(&st.ledger)?, csv));
    }
    ensure(outs[0] == outs[1], "repeated runs differ".into())
}

fn ensure(ok: bool, msg: String) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::Numeric(msg))
    }
}
