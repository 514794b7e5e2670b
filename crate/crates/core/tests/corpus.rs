use phrase_lm::corpus::{batchify, synthetic, BatchStream, Corpus, Vocab, EOS, UNK};
use phrase_lm::Error;
use proptest::prelude::*;

#[test]
fn vocabulary_ids_follow_first_appearance() {
    let v = Vocab::build("the cat sat\nthe dog\n").unwrap();
    assert_eq!(v.tokens(), ["the", "cat", "sat", EOS, "dog", UNK]);
    assert_eq!(v.encode("the dog ran"), vec![0, 4, v.unk(), v.eos()]);
    assert_eq!(v.decode(&v.encode_sentence("cat zebra")), vec!["cat", UNK]);
}

#[test]
fn vocabulary_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let v = Vocab::build(&synthetic::generate(50, 3)).unwrap();
    let path = dir.path().join("vocab.txt");
    v.save(&path).unwrap();
    assert_eq!(Vocab::load(&path).unwrap(), v);
}

#[test]
fn corpus_files_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let train = dir.path().join("train.txt");
    std::fs::write(&train, "a b c\nb c\n").unwrap();
    let valid = dir.path().join("valid.txt");
    std::fs::write(&valid, "c a x\n").unwrap();
    let c = Corpus::load(&train, Some(&valid), None, None).unwrap();
    assert_eq!(c.train.len(), 7);
    assert_eq!(c.valid, vec![c.vocab.id("c"), c.vocab.id("a"), c.vocab.unk(), c.vocab.eos()]);
    assert!(c.test.is_empty());

    let missing = dir.path().join("nope.txt");
    let err = Corpus::load(&missing, None, None, None).unwrap_err();
    assert!(err.to_string().contains("nope.txt"), "{err}");
    assert!(matches!(Corpus::from_texts("\n\n", "", "", None), Err(Error::Corpus(_))));
}

#[test]
fn capped_vocabulary_maps_rare_words_to_unk() {
    let c = Corpus::from_texts("a a a b b c\n", "c b\n", "", Some(4)).unwrap();
    assert_eq!(c.vocab.len(), 4);
    assert_eq!(c.valid, vec![c.vocab.unk(), c.vocab.id("b"), c.vocab.eos()]);
}

#[test]
fn batchify_reference_layout() {
    let ids: Vec<usize> = (0..26).collect();
    let s = batchify(&ids, 4, 3).unwrap();
    assert_eq!(s.steps(), 6);
    assert_eq!(s.stream(1), vec![6, 7, 8, 9, 10, 11]);
    assert_eq!(s.num_windows(), 2);
    let w0 = s.window(0).unwrap();
    assert_eq!(w0.inputs, vec![0, 6, 12, 18, 1, 7, 13, 19, 2, 8, 14, 20]);
    assert_eq!(w0.stream_targets(3), vec![19, 20, 21]);
    let w1 = s.window(1).unwrap();
    assert_eq!(w1.seq_len, 2);
    assert_eq!(w1.stream_inputs(0), vec![3, 4]);
    assert_eq!(w1.stream_targets(0), vec![4, 5]);
    assert!(s.window(2).is_none());
}

proptest! {
    #[test]
    fn windows_reconstruct_every_stream(
        n in 2usize..400,
        batch in 1usize..9,
        bptt in 1usize..40,
    ) {
        prop_assume!(n >= 2 * batch);
        let ids: Vec<usize> = (0..n).map(|i| i * 7 % 13).collect();
        let s = BatchStream::new(&ids, batch, bptt).unwrap();
        let steps = n / batch;
        prop_assert_eq!(s.steps(), steps);
        for b in 0..batch {
            let mut inputs = Vec::new();
            let mut targets = Vec::new();
            for w in s.windows() {
                prop_assert!(w.seq_len >= 1 && w.seq_len <= bptt);
                inputs.extend(w.stream_inputs(b));
                targets.extend(w.stream_targets(b));
            }
            let column = &ids[b * steps..(b + 1) * steps];
            prop_assert_eq!(&inputs[..], &column[..steps - 1]);
            prop_assert_eq!(&targets[..], &column[1..]);
        }
        let sub = s.columns(0..1);
        prop_assert_eq!(sub.stream(0), s.stream(0));
    }

    #[test]
    fn known_words_round_trip(words in proptest::collection::vec("[a-z]{1,6}", 1..40)) {
        let line = words.join(" ");
        let v = Vocab::build(&line).unwrap();
        let ids = v.encode_sentence(&line);
        prop_assert!(ids.iter().all(|&i| i < v.len()));
        prop_assert_eq!(v.decode(&ids).join(" "), line);
    }
}

#[test]
fn synthetic_text_is_seeded() {
    assert_eq!(synthetic::generate(20, 4), synthetic::generate(20, 4));
    assert_ne!(synthetic::generate(20, 4), synthetic::generate(20, 5));
    let text = synthetic::generate_tokens(300, 1);
    let v = Vocab::build(&text).unwrap();
    assert!(v.encode(&text).len() >= 300);
}
