//! Property tests for the structural invariants of every module.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use kedit::autograd::Tape;
use kedit::connector::{gated_attention, value_projection, ConnectorWeights};
use kedit::decompose::decompose;
use kedit::editor::{validate_gaps, AdversarialRetriever, EditorConfig, Lab, LedgerRecord, Strategy};
use kedit::exec::Exec;
use kedit::gradcheck::grad_check;
use kedit::meme::{argmax_scores, retrieve_text_embedding, EncoderParams, MemoryStore, TextMemoryEntry};
use kedit::memi::{fused_ffn, AdapterBank, ModalityGates, Trainable};
use kedit::metrics::{count, evaluate_run, kur, Metric};
use kedit::model::{forward, init_model, FrozenWeights, ModelConfig};
use kedit::selftest::{commutativity_max_diff, randomize_bank, retrieval_agreement};
use kedit::tensor::{layer_norm, softmax, Tensor};
use kedit::types::{Modality, QueryType};
use kedit::world::{generate_world_with, make_edit_stream, KnowledgeBase, ProbeKind, WorldConfig};

fn tiny(seed: u64) -> ModelConfig {
    ModelConfig {
        d_model: 8,
        n_layers: 2,
        n_heads: 2,
        d_ff: 16,
        vocab_size_text: 20,
        vocab_size_image: 6,
        max_seq_len: 12,
        lora_rank: 2,
        seed,
        ..ModelConfig::default()
    }
}

fn matrix(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> Tensor {
    Tensor::matrix(r, c, (0..r * c).map(|_| rng.gen_range(-scale..scale)).collect())
}

fn small_world() -> KnowledgeBase {
    generate_world_with(&WorldConfig {
        n_entities: 60,
        n_locality: 8,
        n_train_entities: 10,
        ..WorldConfig::default()
    })
    .unwrap()
}

const GATES: [ModalityGates; 4] = [ModalityGates::OFF, ModalityGates::VISUAL, ModalityGates::TEXTUAL, ModalityGates::BOTH];

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn softmax_rows_sum_to_one(seed in any::<u64>(), rows in 1usize..6, cols in 1usize..10, scale in 0.1f64..50.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = softmax(&matrix(&mut rng, rows, cols, scale)).unwrap();
        for r in 0..rows {
            prop_assert!((s.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_rows_are_centred(seed in any::<u64>(), rows in 1usize..6, cols in 2usize..12, shift in -100.0f64..100.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = matrix(&mut rng, rows, cols, 3.0);
        x.data_mut().iter_mut().for_each(|v| *v += shift);
        let y = layer_norm(&x, &Tensor::filled(&[cols], 1.0), &Tensor::zeros(&[cols]), 1e-5).unwrap();
        for r in 0..rows {
            prop_assert!((y.row(r).iter().sum::<f64>() / cols as f64).abs() < 1e-8);
        }
    }

    #[test]
    fn tape_ops_match_finite_differences(seed in any::<u64>(), rows in 1usize..4, k in 1usize..5, cols in 2usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = vec![matrix(&mut rng, rows, k, 1.0), matrix(&mut rng, k, cols, 1.0), matrix(&mut rng, 1, cols, 1.0)];
        let targets: Vec<usize> = (0..rows).map(|_| rng.gen_range(0..cols)).collect();
        let rep = grad_check(
            |tape: &mut Tape<'_>, v: &[kedit::autograd::Var]| {
                let h = tape.matmul(v[0], v[1])?;
                let h = tape.gelu(h);
                let h = tape.layer_norm(h, v[2], v[2], 1e-5)?;
                let h = tape.softmax(h, false)?;
                let h = tape.scale(h, 3.0);
                tape.cross_entropy(h, &targets)
            },
            &params,
            6,
            seed,
        )
        .unwrap();
        prop_assert!(rep.max_rel_err < 1e-4, "rel err {}", rep.max_rel_err);
    }

    #[test]
    fn zero_adapters_are_transparent(seed in any::<u64>(), len in 1usize..12, gate in 0usize..4) {
        let cfg = tiny(seed % 7);
        let w = init_model(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let toks: Vec<usize> = (0..len).map(|_| rng.gen_range(0..cfg.vocab_size())).collect();
        let mut bank = AdapterBank::dual(&cfg, seed);
        for which in [Trainable::Visual, Trainable::Textual, Trainable::Connector] {
            bank.tensors_mut(which).into_iter().for_each(|t| t.fill(0.0));
        }
        let a = forward(&w, Some(&bank), GATES[gate], &toks).unwrap();
        let b = forward(&w, None, ModalityGates::OFF, &toks).unwrap();
        prop_assert!(a.bit_eq(&b));
    }

    #[test]
    fn logits_are_causal(seed in any::<u64>(), len in 2usize..12, cut in 0usize..11) {
        let cfg = tiny(1);
        let w = init_model(&cfg).unwrap();
        let mut bank = AdapterBank::dual(&cfg, 0);
        randomize_bank(&mut bank, seed, 0.3);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let toks: Vec<usize> = (0..len).map(|_| rng.gen_range(0..cfg.vocab_size())).collect();
        let t = cut % (len - 1);
        let mut other = toks.clone();
        for x in other.iter_mut().skip(t + 1) {
            *x = rng.gen_range(0..cfg.vocab_size());
        }
        let a = forward(&w, Some(&bank), ModalityGates::BOTH, &toks).unwrap();
        let b = forward(&w, Some(&bank), ModalityGates::BOTH, &other).unwrap();
        for r in 0..=t {
            prop_assert_eq!(a.row(r), b.row(r));
        }
    }

    #[test]
    fn connector_is_inert_on_unimodal_queries(seed in any::<u64>(), rows in 1usize..8, visual in any::<bool>()) {
        let cfg = tiny(2);
        let w = init_model(&cfg).unwrap();
        let mut bank = AdapterBank::dual(&cfg, 0);
        randomize_bank(&mut bank, seed, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = matrix(&mut rng, rows, cfg.d_model, 1.0);
        let g = if visual { ModalityGates::VISUAL } else { ModalityGates::TEXTUAL };
        for layer in 0..cfg.n_layers {
            let a = gated_attention(&w, Some(&bank), layer, g, &h).unwrap();
            let b = gated_attention(&w, None, layer, g, &h).unwrap();
            prop_assert!(a.bit_eq(&b));
        }
    }

    #[test]
    fn connector_never_reaches_the_value_path(seed in any::<u64>(), rows in 1usize..8) {
        // the first position attends only to itself, so its output is the
        // value path alone; a Q/K delta cannot move it
        let cfg = tiny(3);
        let w = init_model(&cfg).unwrap();
        let mut bank = AdapterBank::dual(&cfg, 0);
        randomize_bank(&mut bank, seed, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = matrix(&mut rng, rows, cfg.d_model, 1.0);
        for layer in 0..cfg.n_layers {
            let a = gated_attention(&w, Some(&bank), layer, ModalityGates::BOTH, &h).unwrap();
            let b = gated_attention(&w, None, layer, ModalityGates::BOTH, &h).unwrap();
            let v = value_projection(&w, layer, &h).unwrap();
            prop_assert_eq!(a.row(0), b.row(0));
            prop_assert_eq!(v.rows(), rows);
        }
    }

    #[test]
    fn fused_summands_commute(seed in any::<u64>()) {
        prop_assert!(commutativity_max_diff(4, seed).unwrap() <= 1e-9);
    }

    #[test]
    fn fused_ffn_gate_off_is_vanilla(seed in any::<u64>(), rows in 1usize..6) {
        let cfg = tiny(4);
        let w = init_model(&cfg).unwrap();
        let mut bank = AdapterBank::dual(&cfg, 0);
        randomize_bank(&mut bank, seed, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = matrix(&mut rng, rows, cfg.d_model, 1.0);
        let a = fused_ffn(&w, Some(&bank), 1, ModalityGates::OFF, &h).unwrap();
        let b = fused_ffn(&w, None, 1, ModalityGates::OFF, &h).unwrap();
        prop_assert!(a.bit_eq(&b));
    }

    #[test]
    fn retrieval_matches_exhaustive_scan(seed in any::<u64>()) {
        prop_assert_eq!(retrieval_agreement(5, seed), (5, 5));
    }

    #[test]
    fn ties_resolve_to_lowest_index(scores in prop::collection::vec(-1.0f64..1.0, 1..30), dup in any::<prop::sample::Index>()) {
        let mut s = scores.clone();
        let best = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let j = dup.index(s.len());
        s[j] = best;
        let first = s.iter().position(|&v| v == best).unwrap();
        prop_assert_eq!(argmax_scores(s).unwrap().index, first);
    }

    #[test]
    fn inserting_cannot_steal_without_strictly_higher_score(seed in any::<u64>(), size in 1usize..20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = |rng: &mut ChaCha8Rng| -> Vec<f64> { (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect() };
        let mut store = MemoryStore::default();
        let push = |store: &mut MemoryStore, e: Vec<f64>| {
            let i = store.text.len();
            store.text.push(TextMemoryEntry { edit_index: i, question: String::new(), answer: String::new(), embedding: e });
        };
        for _ in 0..size {
            push(&mut store, v(&mut rng));
        }
        let q = v(&mut rng);
        let before = retrieve_text_embedding(&store, &q).unwrap();
        let new = if rng.gen_bool(0.5) { store.text[before.index].embedding.clone() } else { v(&mut rng) };
        push(&mut store, new);
        let after = retrieve_text_embedding(&store, &q).unwrap();
        if after.index != before.index {
            prop_assert_eq!(after.index, size);
            prop_assert!(after.score > before.score);
        }
    }

    #[test]
    fn gap_schedules_must_increase(gaps in prop::collection::vec(0usize..200, 0..8)) {
        let ok = !gaps.is_empty() && gaps.windows(2).all(|w| w[0] < w[1]);
        prop_assert_eq!(validate_gaps(&gaps).is_ok(), ok);
    }

    #[test]
    fn kur_defined_iff_denominator_positive(c in 0.0f64..1.0, v in 0.0f64..1.0, t in 0.0f64..1.0, zero in any::<bool>()) {
        let (v, t) = if zero { (0.0, 0.0) } else { (v, t) };
        match kur(c, v, t) {
            Ok(k) => prop_assert_eq!(k, 2.0 * c / (v + t)),
            Err(_) => prop_assert!(v + t == 0.0),
        }
    }

    #[test]
    fn report_fractions_are_exact_counts(outcomes in prop::collection::vec(any::<bool>(), 7..60), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let kinds = [
            (ProbeKind::Rel, Modality::Visual),
            (ProbeKind::Rel, Modality::Textual),
            (ProbeKind::TextGen, Modality::Visual),
            (ProbeKind::ImageGen, Modality::Visual),
            (ProbeKind::Loc, Modality::Textual),
            (ProbeKind::Loc, Modality::Visual),
            (ProbeKind::Comp, Modality::Textual),
        ];
        let ledger: Vec<LedgerRecord> = outcomes
            .iter()
            .enumerate()
            .map(|(i, &o)| {
                // the first seven records cover every metric once
                let (kind, modality) = kinds[if i < 7 { i } else { rng.gen_range(0..7) }];
                LedgerRecord { edit: i, pair: i / 2, modality, gap: 0, kind, outcome: o, output: String::new(), context: 0 }
            })
            .collect();
        let r = evaluate_run(Strategy::ExternalOnly, &ledger, &[0]).unwrap();
        for (i, m) in Metric::ALL.into_iter().enumerate() {
            let c = count(&ledger, m, 0);
            prop_assert_eq!(r.rows[0].counts[i], c.samples);
            prop_assert_eq!(r.rows[0].values[i], c.successes as f64 / c.samples as f64);
        }
    }

    #[test]
    fn adversarial_draws_respect_the_store(seed in any::<u64>(), n in 1usize..40, p in 0.0f64..=1.0) {
        let adv = AdversarialRetriever::new(p, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let truth = rng.gen_range(0..n);
        for _ in 0..20 {
            match adv.draw(&mut rng, n, truth) {
                Some((i, hit)) => {
                    prop_assert!(i < n);
                    prop_assert_eq!(hit, i == truth);
                }
                None => prop_assert!(n == 1),
            }
        }
    }
}

#[test]
fn adversarial_hit_rate_is_calibrated() {
    let adv = AdversarialRetriever::new(0.7, 9).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let hits = (0..10_000).filter(|_| adv.draw(&mut rng, 25, 3).unwrap().1).count();
    let rate = hits as f64 / 10_000.0;
    assert!((rate - 0.7).abs() <= 0.02, "hit rate {rate}");
}

#[test]
fn invalid_rates_are_rejected() {
    assert!(AdversarialRetriever::new(1.5, 0).is_err());
    assert!(AdversarialRetriever::new(f64::NAN, 0).is_err());
}

#[test]
fn world_and_stream_regenerate_identically() {
    let a = small_world();
    let b = small_world();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    let sa = make_edit_stream(&a, 8, 4).unwrap();
    let sb = make_edit_stream(&b, 8, 4).unwrap();
    assert_eq!(serde_json::to_string(&sa).unwrap(), serde_json::to_string(&sb).unwrap());
}

#[test]
fn locality_probes_avoid_edited_entities() {
    let kb = small_world();
    for e in make_edit_stream(&kb, 10, 0).unwrap() {
        let touched = e.entities();
        let loc = e.probe(ProbeKind::Loc).unwrap();
        if let Some(img) = loc.query.image {
            assert!(!touched.contains(&img.entity));
        }
        for &t in &touched {
            assert!(!loc.query.question.split_whitespace().any(|w| w == kb.name(t)));
        }
        for kind in [ProbeKind::Rel, ProbeKind::TextGen] {
            let p = e.probe(kind).unwrap();
            let mentions = p.query.image.map_or(false, |i| touched.contains(&i.entity))
                || touched.iter().any(|&t| p.query.question.split_whitespace().any(|w| w == kb.name(t)));
            assert!(mentions, "{kind:?} probe of edit {} is not about the edit", e.index);
        }
    }
}

#[test]
fn decomposition_is_exact_and_idempotent() {
    let kb = small_world();
    for e in make_edit_stream(&kb, 10, 1).unwrap() {
        for p in &e.probes {
            let d = decompose(&p.query).unwrap();
            assert_eq!(d.qtype, p.query.qtype);
            match p.query.qtype {
                QueryType::Visual => assert!(d.image_subquery.is_some() && d.text_subquery.is_none()),
                QueryType::Textual => assert!(d.image_subquery.is_none() && d.placeholder_span.is_none()),
                QueryType::Compositional => {
                    assert!(d.image_subquery.is_some() && d.placeholder_span.is_some());
                    let sub = d.image_subquery.clone().unwrap();
                    let again = decompose(&kedit::world::Query {
                        qtype: QueryType::Visual,
                        image: Some(sub.image),
                        question: sub.question.clone(),
                    })
                    .unwrap();
                    assert_eq!(again.image_subquery, Some(sub));
                }
            }
        }
    }
}

fn lab_parts() -> (KnowledgeBase, FrozenWeights, EncoderParams) {
    let kb = small_world();
    let cfg = ModelConfig {
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        d_ff: 32,
        vocab_size_text: kb.vocab.text_len(),
        vocab_size_image: kb.vocab.image_len(),
        max_seq_len: 64,
        lora_rank: 2,
        ..ModelConfig::default()
    };
    let w = init_model(&cfg).unwrap();
    let enc = EncoderParams::for_world(&kb, 8, 0);
    (kb, w, enc)
}

#[test]
fn strategies_touch_only_their_own_state() {
    let (kb, w, enc) = lab_parts();
    let frozen = w.fingerprint();
    let lab = Lab { kb: &kb, weights: &w, encoders: &enc, exec: Exec::Parallel };
    let stream = make_edit_stream(&kb, 6, 3).unwrap();
    for strategy in Strategy::ALL {
        let cfg = EditorConfig { strategy, lora_rank: 2, edit_steps: 2, ..EditorConfig::default() };
        let conn = ConnectorWeights::new(&w.config, &mut ChaCha8Rng::seed_from_u64(1));
        let mut st = lab.new_state(&cfg, strategy.uses_connector().then_some(&conn)).unwrap();
        let before = st.bank.as_ref().map(|b| (b.fingerprint(Trainable::Visual), b.fingerprint(Trainable::Textual), b.fingerprint(Trainable::Shared)));
        for e in &stream {
            lab.apply_edit(&mut st, &cfg, e).unwrap();
        }
        if strategy.uses_store() {
            assert_eq!(st.store.len(Modality::Visual) + st.store.len(Modality::Textual), stream.len());
        } else {
            assert!(st.store.is_empty(), "{strategy} wrote the store");
        }
        let after = st.bank.as_ref().map(|b| (b.fingerprint(Trainable::Visual), b.fingerprint(Trainable::Textual), b.fingerprint(Trainable::Shared)));
        if strategy.uses_adapters() {
            assert_ne!(before, after, "{strategy} left the adapters untouched");
        } else {
            assert_eq!(before, after, "{strategy} changed adapter parameters");
        }
    }
    assert_eq!(w.fingerprint(), frozen);
}
