//! Sequential against data-parallel execution of the two hot loops:
//! corpus scoring and a probe-heavy editing run.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use kedit::editor::{EditorConfig, Lab, Strategy};
use kedit::exec::Exec;
use kedit::meme::EncoderParams;
use kedit::memi::ModalityGates;
use kedit::model::{corpus_accuracy, init_model, ModelConfig};
use kedit::world::{generate_world_with, make_edit_stream, pretraining_corpus, CorpusConfig, WorldConfig};

fn setup() -> (kedit::world::KnowledgeBase, kedit::model::FrozenWeights, EncoderParams) {
    let kb = generate_world_with(&WorldConfig {
        n_entities: 120,
        n_locality: 10,
        n_train_entities: 10,
        ..WorldConfig::default()
    })
    .unwrap();
    let cfg = ModelConfig {
        d_model: 32,
        n_layers: 3,
        n_heads: 4,
        d_ff: 128,
        vocab_size_text: kb.vocab.text_len(),
        vocab_size_image: kb.vocab.image_len(),
        max_seq_len: 64,
        lora_rank: 4,
        ..ModelConfig::default()
    };
    let w = init_model(&cfg).unwrap();
    let enc = EncoderParams::for_world(&kb, 16, 0);
    (kb, w, enc)
}

fn bench(c: &mut Criterion) {
    let (kb, w, enc) = setup();
    let corpus = pretraining_corpus(&kb, &CorpusConfig::default()).unwrap();
    let corpus = &corpus[..256.min(corpus.len())];
    let stream = make_edit_stream(&kb, 10, 0).unwrap();
    let mut g = c.benchmark_group("exec");
    g.sample_size(10);
    for exec in [Exec::Sequential, Exec::Parallel] {
        let name = format!("{exec:?}");
        g.bench_with_input(BenchmarkId::new("corpus_accuracy", &name), &exec, |b, &e| {
            b.iter(|| corpus_accuracy(&w, None, ModalityGates::OFF, corpus, e).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("hybrid_run_20_edits", &name), &exec, |b, &e| {
            let lab = Lab {
                kb: &kb,
                weights: &w,
                encoders: &enc,
                exec: e,
            };
            let cfg = EditorConfig {
                strategy: Strategy::HybridNoConnector,
                edit_steps: 2,
                gaps: vec![0, 5, 10],
                ..EditorConfig::default()
            };
            b.iter(|| lab.sequential_run(&cfg, &stream, None).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
