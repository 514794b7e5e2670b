//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion that can be evaluated here fails.
//!
//! Criterion 7 needs the Penn Treebank text under `$PIL_PTB_DIR`
//! (`ptb.train.txt`, `ptb.valid.txt`). Without it the criterion reports FAIL
//! with the reason and, unless `PIL_ACCEPTANCE_STRICT=1`, does not change the
//! exit status. Set `UPDATE_GOLDEN=1` to rewrite the criterion 10 golden files.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use phrase_lm::checkpoint::{Checkpoint, TrainState};
use phrase_lm::config::TrainConfig;
use phrase_lm::corpus::{synthetic, BatchStream, Corpus, Vocab};
use phrase_lm::cpa::cpa_loss;
use phrase_lm::gradcheck::grad_check_params;
use phrase_lm::height::HeightProfile;
use phrase_lm::induce::from_json_lines;
use phrase_lm::induction::{hard_segment, membership_probs, phrase_attention, InductionConfig};
use phrase_lm::lm::LmState;
use phrase_lm::ops::hardtanh_temp;
use phrase_lm::train::{evaluate_ppl, init_model, window_loss, Trainer, WithPhraseAlignment, WordOnly};
use phrase_lm::{Exec, ParamStore};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

enum Verdict {
    Pass(String),
    Fail(String),
    /// Could not be evaluated in this environment.
    Blocked(String),
}

use Verdict::{Blocked, Fail, Pass};

fn check(ok: bool, detail: String) -> Verdict {
    if ok {
        Pass(detail)
    } else {
        Fail(detail)
    }
}

fn within(v: Verdict, elapsed: Duration, budget: Duration) -> Verdict {
    match v {
        Pass(d) if elapsed > budget => Fail(format!("{d}; took {elapsed:.1?}, budget {budget:?}")),
        other => other,
    }
}

fn secs(s: u64) -> Duration {
    Duration::from_secs(s)
}

/// Membership by definition: `k` joins the phrase of `i` iff every word
/// strictly between them is lower than the higher of the two; the phrase is
/// the maximal run of members from `i+1`.
fn brute_force_end(h: &[f64], i: usize) -> Option<usize> {
    if i + 1 >= h.len() {
        return None;
    }
    let member = |k: usize| (i + 1..k).all(|j| h[j] < h[i].max(h[k]));
    let mut end = i + 1;
    while end + 1 < h.len() && member(end + 1) {
        end += 1;
    }
    Some(end)
}

/// Distinct heights with pairwise gaps of at least `gap`.
fn tie_free(len: usize, gap: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut ranks: Vec<usize> = (0..len).collect();
    ranks.shuffle(rng);
    let offset = rng.gen_range(-3.0..3.0);
    ranks.into_iter().map(|r| offset + r as f64 * gap).collect()
}

fn gradient_integrity() -> Verdict {
    let tokens: Vec<String> = (0..18).map(|i| format!("w{i}")).collect();
    let vocab = Vocab::from_tokens(tokens).unwrap();
    assert_eq!(vocab.len(), 20);
    let cfg = TrainConfig {
        synthetic_tokens: Some(1),
        emb_dim: 8,
        hidden: 8,
        layers: 2,
        negatives: 2,
        dropout_input: 0.0,
        dropout_hidden: 0.0,
        dropout_output: 0.0,
        dropout_phrase: 0.0,
        ..Default::default()
    };
    let (model, store) = init_model(&cfg, vocab.len()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let ids: Vec<usize> = (0..14).map(|_| rng.gen_range(0..18)).collect();
    let window = BatchStream::new(&ids, 2, 6).unwrap().window(0).unwrap();
    assert_eq!((window.seq_len, window.batch), (6, 2));
    let objective = WithPhraseAlignment(cfg.cpa());
    let eos = vocab.eos();
    let checked = grad_check_params(
        &store,
        |tape, s| {
            let state = LmState::zeros(&model.lm.cfg, 2);
            let mut r1 = ChaCha8Rng::seed_from_u64(1);
            let mut r2 = ChaCha8Rng::seed_from_u64(2);
            let terms = window_loss(&model, &objective, tape, s, &window, &state, eos, true, &mut r1, &mut r2)?;
            assert!(terms.aux.loss.is_some(), "toy window must score phrases");
            Ok(terms.total)
        },
        1e-5,
        Exec::default(),
    );
    match checked {
        Ok(r) => check(
            r.max_rel_err < 1e-4,
            format!("max rel err {:.2e} over {} coordinates (worst {:?})", r.max_rel_err, r.coordinates, r.worst),
        ),
        Err(e) => Fail(e.to_string()),
    }
}

fn segmentation_oracle() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut agree, mut total) = (0, 0);
    for _ in 0..1000 {
        let len = rng.gen_range(5..=30);
        let h = tie_free(len, rng.gen_range(0.01..1.0), &mut rng);
        let p = HeightProfile::new(h.clone());
        for i in 0..len {
            total += 1;
            agree += usize::from(hard_segment(&p, i) == brute_force_end(&h, i));
        }
    }
    check(agree == total, format!("{agree}/{total} targets agree over 1000 vectors"))
}

fn temperature_hardening() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cfg = InductionConfig { temperature: 1e4, smoothing: 1.0, max_len: 64 };
    let mut matched = 0;
    for _ in 0..1000 {
        let len = rng.gen_range(5..=30);
        // gaps of 1e-2 put every comparison far outside the 1/a linear band
        let h = tie_free(len, 1e-2, &mut rng);
        let p = HeightProfile::new(h);
        let all = (0..len - 1).all(|i| {
            let m = membership_probs(&p, i, &cfg);
            let soft_end = i + m.iter().take_while(|&&x| x >= 0.5).count();
            Some(soft_end) == hard_segment(&p, i)
        });
        matched += usize::from(all);
    }
    check(matched >= 990, format!("{matched}/1000 vectors match on every target"))
}

fn probability_invariants() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst_sum: f64 = 0.0;
    for n in 0..10_000 {
        let len = rng.gen_range(2..=30);
        let h: Vec<f64> = (0..len).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let cfg = InductionConfig {
            temperature: rng.gen_range(0.1..100.0),
            smoothing: rng.gen_range(0.01..2.0),
            max_len: rng.gen_range(1..=25),
        };
        let p = HeightProfile::new(h.clone());
        let i = rng.gen_range(0..len - 1);
        let m = membership_probs(&p, i, &cfg);
        if m.first() != Some(&1.0) {
            return Fail(format!("case {n}: first membership {:?}", m.first()));
        }
        if m.iter().any(|x| !(0.0..=1.0).contains(x)) || m.windows(2).any(|w| w[1] > w[0]) {
            return Fail(format!("case {n}: membership {m:?} not a non-increasing probability sequence"));
        }
        let alpha = phrase_attention(&h[i + 1..i + 1 + m.len()], &m, &cfg);
        worst_sum = worst_sum.max((alpha.iter().sum::<f64>() - 1.0).abs());

        let dim = rng.gen_range(1..=16);
        let mut v = || (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>();
        let (c, s) = (v(), v());
        let negs: Vec<Vec<f64>> = (0..3).map(|_| v()).collect();
        let refs: Vec<&[f64]> = negs.iter().map(Vec::as_slice).collect();
        let l = cpa_loss(&c, &s, &refs).unwrap();
        if !(l > 0.0 && l < 2.0) {
            return Fail(format!("case {n}: cpa loss {l}"));
        }
    }
    if worst_sum > 1e-9 {
        return Fail(format!("attention sums off by {worst_sum:.2e}"));
    }
    for a in [0.5, 1.0, 2.0, 10.0, 1e4] {
        let got: Vec<f64> = [-2.0 / a, 0.0, 1.0 / (2.0 * a), 2.0 / a].iter().map(|&x| hardtanh_temp(x, a).unwrap()).collect();
        if got != [-1.0, 0.0, 0.5, 1.0] {
            return Fail(format!("HardTanh at a={a}: {got:?}"));
        }
    }
    Pass(format!("10000 cases; max |sum alpha - 1| = {worst_sum:.1e}; HardTanh branches exact"))
}

fn param_bits(store: &ParamStore, skip_phrase: bool) -> Vec<(String, Vec<u64>)> {
    store
        .iter()
        .filter(|(_, n, _)| !(skip_phrase && (n.starts_with("height") || n.starts_with("phrase"))))
        .map(|(_, n, t)| (n.to_string(), t.data().iter().map(|v| v.to_bits()).collect()))
        .collect()
}

fn baseline_recovery() -> Verdict {
    let cfg = TrainConfig { gamma: 0.0, synthetic_tokens: Some(4000), epochs: 3, emb_dim: 16, hidden: 32, ..Default::default() };
    let corpus = phrase_lm::train::load_corpus(&cfg).unwrap();
    let stream = BatchStream::new(&corpus.train, cfg.batch_size, cfg.bptt).unwrap();
    let mut base = Trainer::new(cfg.clone(), corpus.vocab.clone(), WordOnly).unwrap();
    let mut cpa = Trainer::new(cfg.clone(), corpus.vocab.clone(), WithPhraseAlignment(cfg.cpa())).unwrap();
    let mut scored = 0;
    for epoch in 0..cfg.epochs {
        let a = base.train_epoch(&stream).unwrap();
        let b = cpa.train_epoch(&stream).unwrap();
        scored += b.cpa_contexts;
        if a.lm_loss.to_bits() != b.lm_loss.to_bits() {
            return Fail(format!("epoch {epoch}: train loss {} vs {}", a.lm_loss, b.lm_loss));
        }
        let (va, vb) = (base.evaluate(&corpus.valid, false).unwrap(), cpa.evaluate(&corpus.valid, false).unwrap());
        if va.loss.to_bits() != vb.loss.to_bits() {
            return Fail(format!("epoch {epoch}: valid loss {} vs {}", va.loss, vb.loss));
        }
    }
    if scored == 0 {
        return Fail("alignment path never ran".into());
    }
    let same = param_bits(&base.store, true) == param_bits(&cpa.store, true);
    check(same, format!("{} epochs bit-identical, {scored} contexts scored at gamma 0", cfg.epochs))
}

fn overfit_sanity() -> Verdict {
    let base = synthetic::generate(640, 7);
    let mut text = String::new();
    while text.split_whitespace().count() + text.lines().count() < 5000 {
        text.push_str(&base);
    }
    let corpus = Corpus::from_texts(&text, &base, &base, None).unwrap();
    let cfg = TrainConfig {
        synthetic_tokens: Some(1),
        emb_dim: 64,
        hidden: 256,
        layers: 2,
        batch_size: 10,
        eval_batch_size: 10,
        bptt: 35,
        dropout_input: 0.0,
        dropout_hidden: 0.0,
        dropout_output: 0.0,
        dropout_phrase: 0.0,
        lr: 5.0,
        clip_norm: 1.0,
        ..Default::default()
    };
    let stream = BatchStream::new(&corpus.train, cfg.batch_size, cfg.bptt).unwrap();
    let mut t = Trainer::new(cfg.clone(), corpus.vocab.clone(), WithPhraseAlignment(cfg.cpa())).unwrap();
    let mut ppl = f64::INFINITY;
    for epoch in 1..=200 {
        if let Err(e) = t.train_epoch(&stream) {
            return Fail(format!("epoch {epoch}: {e}"));
        }
        if epoch % 5 == 0 {
            ppl = t.evaluate(&corpus.train, false).unwrap().ppl;
            if ppl < 1.5 {
                return Pass(format!("{} train tokens, train ppl {ppl:.3} at epoch {epoch}", corpus.train.len()));
            }
        }
    }
    Fail(format!("train ppl {ppl:.3} after 200 epochs"))
}

const PTB_TOKENS: usize = 200_000;
const PTB_EPOCHS: usize = 5;

/// First `limit` tokens of a corpus file, counting one `<eos>` per line and
/// keeping whole lines.
fn head_tokens(text: &str, limit: usize) -> String {
    let mut out = String::new();
    let mut n = 0;
    for line in text.lines() {
        if n >= limit {
            break;
        }
        n += line.split_whitespace().count() + 1;
        out.push_str(line);
        out.push('\n');
    }
    out
}

fn directional_improvement() -> Verdict {
    let Some(dir) = std::env::var_os("PIL_PTB_DIR").map(PathBuf::from) else {
        return Blocked("corpus not found: PIL_PTB_DIR is not set".into());
    };
    let (train, valid) = (dir.join("ptb.train.txt"), dir.join("ptb.valid.txt"));
    let (Ok(train), Ok(valid)) = (fs::read_to_string(&train), fs::read_to_string(&valid)) else {
        return Blocked(format!("corpus not found: need ptb.train.txt and ptb.valid.txt in {}", dir.display()));
    };
    let corpus = Corpus::from_texts(&head_tokens(&train, PTB_TOKENS), &valid, "", None).unwrap();
    let out = tempfile::tempdir().unwrap();
    let mut with_cpa = Vec::new();
    let mut baseline = Vec::new();
    for seed in 1..=3 {
        let cfg = TrainConfig {
            train_path: Some(dir.join("ptb.train.txt")),
            seed,
            epochs: PTB_EPOCHS,
            emb_dim: 100,
            hidden: 256,
            layers: 3,
            context_layer: Some(2),
            gamma: 0.5,
            negatives: 1,
            out_dir: out.path().join(format!("cpa{seed}")),
            ..Default::default()
        };
        let mut t = Trainer::new(cfg.clone(), corpus.vocab.clone(), WithPhraseAlignment(cfg.cpa())).unwrap();
        with_cpa.push(t.fit(&corpus, |_, _| {}).unwrap().ppl);
        let cfg = TrainConfig { out_dir: out.path().join(format!("base{seed}")), ..cfg };
        let mut t = Trainer::new(cfg, corpus.vocab.clone(), WordOnly).unwrap();
        baseline.push(t.fit(&corpus, |_, _| {}).unwrap().ppl);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (c, b) = (mean(&with_cpa), mean(&baseline));
    let delta = c - b;
    let note = if delta <= -0.5 { "; improvement of at least 0.5" } else { "" };
    check(delta <= 0.0, format!("valid ppl with alignment {c:.2} vs baseline {b:.2} (delta {delta:+.2}){note}"))
}

fn evaluation_purity() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        synthetic_tokens: Some(3000),
        epochs: 2,
        emb_dim: 16,
        hidden: 24,
        bptt: 20,
        out_dir: dir.path().to_path_buf(),
        ..Default::default()
    };
    let corpus = phrase_lm::train::load_corpus(&cfg).unwrap();
    let mut t = Trainer::new(cfg.clone(), corpus.vocab.clone(), WithPhraseAlignment(cfg.cpa())).unwrap();
    t.fit(&corpus, |_, _| {}).unwrap();
    let ck = Checkpoint::load(&dir.path().join("best.ckpt")).unwrap();
    let (model, store) = ck.model().unwrap();
    let eos = ck.vocab.eos();
    let run = |exec, induce| evaluate_ppl(&model, &store, &corpus.valid, 10, 20, eos, exec, induce).unwrap();
    let plain = run(Exec::Sequential, false);
    let induced = run(Exec::Sequential, true);
    let par = run(Exec::Parallel, true);
    check(
        plain.ppl.to_bits() == induced.ppl.to_bits() && plain.ppl.to_bits() == par.ppl.to_bits() && induced.phrases > 0,
        format!("valid ppl {} with and without induction ({} phrases induced)", plain.ppl, induced.phrases),
    )
}

fn uniform_calibration() -> Verdict {
    let mut report = Vec::new();
    for v in [20usize, 1000, 10_000] {
        let tokens: Vec<String> = (0..v - 2).map(|i| format!("w{i}")).collect();
        let vocab = Vocab::from_tokens(tokens).unwrap();
        let cfg = TrainConfig { synthetic_tokens: Some(1), emb_dim: 4, hidden: 4, layers: 2, ..Default::default() };
        let (model, mut store) = init_model(&cfg, v).unwrap();
        model.lm.zero_output_path(&mut store);
        let mut rng = ChaCha8Rng::seed_from_u64(v as u64);
        let ids: Vec<usize> = (0..400).map(|_| rng.gen_range(0..v)).collect();
        let r = evaluate_ppl(&model, &store, &ids, 4, 30, vocab.eos(), Exec::default(), false).unwrap();
        // a few ulps of the mean loss (ln V), carried through exp
        let err = (r.ppl - v as f64).abs() / v as f64;
        if err > 4.0 * f64::EPSILON * (v as f64).ln() {
            return Fail(format!("V={v}: ppl {} (relative error {err:.1e})", r.ppl));
        }
        report.push(format!("V={v}: {}", r.ppl));
    }
    Pass(report.join(", "))
}

const FLIGHTS_WORDS: [&str; 7] = ["united", "canceled", "the", "morning", "flights", "to", "houston"];
const FLIGHTS_HEIGHTS: [f64; 7] = [2.0, 5.0, 1.0, 2.5, 4.0, 0.5, 3.0];

/// Checkpoint whose height network reproduces the hand-set heights exactly:
/// one-hot embeddings, an identity convolution with no context, and the
/// heights as readout weights.
fn flights_checkpoint(path: &Path) {
    let vocab = Vocab::from_tokens(FLIGHTS_WORDS.iter().map(|w| w.to_string()).collect()).unwrap();
    let v = vocab.len();
    let cfg = TrainConfig {
        synthetic_tokens: Some(1),
        emb_dim: v,
        hidden: 4,
        layers: 2,
        height_window: 0,
        height_hidden: Some(v),
        height_depth: 1,
        ..Default::default()
    };
    let (_, mut store) = init_model(&cfg, v).unwrap();
    let eye: Vec<f64> = (0..v * v).map(|k| if k / v == k % v { 1.0 } else { 0.0 }).collect();
    store.set_values("embedding.weight", &[v, v], eye.clone()).unwrap();
    store.set_values("height.conv0.weight", &[v, v], eye).unwrap();
    store.set_values("height.conv0.bias", &[v], vec![0.0; v]).unwrap();
    let mut readout = vec![0.0; v];
    for (w, h) in FLIGHTS_WORDS.iter().zip(FLIGHTS_HEIGHTS) {
        readout[vocab.id(w)] = h;
    }
    store.set_values("height.readout.weight", &[1, v], readout).unwrap();
    store.set_values("height.readout.bias", &[1], vec![0.0]).unwrap();
    let ck = Checkpoint { config: cfg, vocab, state: TrainState::default(), params: store, average: None };
    ck.save(path).unwrap();
}

fn golden(name: &str, actual: &str) -> std::result::Result<(), String> {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name);
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        fs::create_dir_all(path.parent().unwrap()).unwrap();
        fs::write(&path, actual).unwrap();
    }
    match fs::read_to_string(&path) {
        Ok(expected) if expected == actual => Ok(()),
        Ok(_) => Err(format!("{name} differs from the golden file")),
        Err(e) => Err(format!("{}: {e}", path.display())),
    }
}

fn visualization_fidelity() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("flights.ckpt");
    flights_checkpoint(&ckpt);
    let input = dir.path().join("flights.txt");
    fs::write(&input, FLIGHTS_WORDS.join(" ") + "\n").unwrap();
    let jsonl = dir.path().join("flights.jsonl");
    let outdir = dir.path().join("svg");
    let pilm = |args: &[&Path]| Command::new(env!("CARGO_BIN_EXE_pilm")).args(args).status().unwrap().success();
    let p = Path::new;
    if !pilm(&[p("induce"), p("--ckpt"), &ckpt, p("--input"), &input, p("--output"), &jsonl]) {
        return Fail("pilm induce failed".into());
    }
    if !pilm(&[p("visualize"), p("--input"), &jsonl, p("--outdir"), &outdir]) {
        return Fail("pilm visualize failed".into());
    }
    let json = fs::read_to_string(&jsonl).unwrap();
    let records = from_json_lines(&json).unwrap();
    let r = &records[0];
    let span = |target: usize| r.phrases.iter().find(|ph| ph.target == target).map(|ph| ph.span_end);
    let soft_end = |target: usize| {
        r.phrases.iter().find(|ph| ph.target == target).map(|ph| target + ph.p_ind.iter().take_while(|&&x| x >= 0.5).count())
    };
    let expected = [(2, 4, "the -> morning flights"), (1, 6, "canceled -> rest of sentence"), (0, 1, "united"), (4, 6, "flights")];
    for (target, end, what) in expected {
        if span(target) != Some(end) || soft_end(target) != Some(end) {
            return Fail(format!("{what}: span ends at {:?}/{:?}, want {end}", span(target), soft_end(target)));
        }
    }
    if r.heights != FLIGHTS_HEIGHTS {
        return Fail(format!("heights {:?}", r.heights));
    }
    let svg = fs::read_to_string(outdir.join("sentence_0000.svg")).unwrap();
    match golden("flights.jsonl", &json).and_then(|_| golden("flights.svg", &svg)) {
        Ok(()) => Pass("span(the) ends at flights, span(canceled) covers the rest; JSON and SVG match golden files".into()),
        Err(e) => Fail(e),
    }
}

type Criterion = (u32, &'static str, fn() -> Verdict, Duration);

fn main() -> ExitCode {
    // libtest-style flags such as --nocapture are accepted and ignored
    let strict = std::env::var("PIL_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let criteria: [Criterion; 10] = [
        (1, "gradient integrity", gradient_integrity, secs(60)),
        (2, "segmentation oracle", segmentation_oracle, secs(5)),
        (3, "temperature hardening", temperature_hardening, secs(10)),
        (4, "probability invariants", probability_invariants, secs(60)),
        (5, "baseline recovery", baseline_recovery, secs(120)),
        (6, "overfit sanity", overfit_sanity, secs(600)),
        (7, "directional improvement", directional_improvement, secs(7200)),
        (8, "evaluation purity", evaluation_purity, secs(120)),
        (9, "uniform calibration", uniform_calibration, secs(60)),
        (10, "visualization fidelity", visualization_fidelity, secs(60)),
    ];
    let mut failed = 0;
    for (n, name, run, budget) in criteria {
        let started = Instant::now();
        let verdict = within(run(), started.elapsed(), budget);
        let took = started.elapsed().as_secs_f64();
        match verdict {
            Pass(d) => println!("PASS {n:>2} {name}: {d} ({took:.1}s)"),
            Fail(d) => {
                failed += 1;
                println!("FAIL {n:>2} {name}: {d} ({took:.1}s)");
            }
            Blocked(d) => {
                failed += usize::from(strict);
                println!("FAIL {n:>2} {name}: not evaluated, {d}");
            }
        }
    }
    if failed > 0 {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
