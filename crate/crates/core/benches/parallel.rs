use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use phrase_lm::config::TrainConfig;
use phrase_lm::corpus::synthetic;
use phrase_lm::gradcheck::grad_check_params;
use phrase_lm::induce::induce_text;
use phrase_lm::train::{evaluate_ppl, init_model, load_corpus};
use phrase_lm::Exec;

const MODES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn config() -> TrainConfig {
    TrainConfig { synthetic_tokens: Some(4000), emb_dim: 32, hidden: 64, layers: 3, eval_batch_size: 8, bptt: 35, ..Default::default() }
}

fn perplexity(c: &mut Criterion) {
    let cfg = config();
    let corpus = load_corpus(&cfg).unwrap();
    let (model, store) = init_model(&cfg, corpus.vocab.len()).unwrap();
    let eos = corpus.vocab.eos();
    let mut group = c.benchmark_group("evaluate_ppl");
    for (name, exec) in MODES {
        for induce in [false, true] {
            let id = BenchmarkId::new(name, if induce { "with_induction" } else { "plain" });
            group.bench_function(id, |b| {
                b.iter(|| evaluate_ppl(&model, &store, black_box(&corpus.train), 8, 35, eos, exec, induce).unwrap())
            });
        }
    }
    group.finish();
}

fn gradient_check(c: &mut Criterion) {
    let cfg = TrainConfig { emb_dim: 6, hidden: 8, layers: 2, ..config() };
    let corpus = load_corpus(&cfg).unwrap();
    let (model, store) = init_model(&cfg, corpus.vocab.len()).unwrap();
    let inputs = &corpus.train[..24];
    let targets = &corpus.train[1..25];
    let mut group = c.benchmark_group("grad_check_params");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_function(name, |b| {
            b.iter(|| {
                grad_check_params(
                    &store,
                    |tape, s| {
                        let state = phrase_lm::lm::LmState::zeros(&model.lm.cfg, 2);
                        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
                        let out = model.lm.forward(tape, s, inputs, 2, &state, false, &mut rng)?;
                        phrase_lm::lm::lm_loss(tape, out.logits, targets)
                    },
                    1e-5,
                    exec,
                )
                .unwrap()
            })
        });
    }
    group.finish();
}

fn induction(c: &mut Criterion) {
    let cfg = config();
    let corpus = load_corpus(&cfg).unwrap();
    let (model, store) = init_model(&cfg, corpus.vocab.len()).unwrap();
    let text = synthetic::generate(400, 9);
    let mut group = c.benchmark_group("induce_text");
    for (name, exec) in MODES {
        group.bench_function(name, |b| b.iter(|| induce_text(&model, &store, &corpus.vocab, black_box(&text), exec).unwrap()));
    }
    group.finish();
}

criterion_group!(benches, perplexity, gradient_check, induction);
criterion_main!(benches);
