use phrase_lm::gradcheck::grad_check_params;
use phrase_lm::height::{syntactic_heights, HeightNet};
use phrase_lm::{Exec, ParamStore, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn gradients_match_finite_differences() {
    for depth in [1, 2] {
        let mut rng = ChaCha8Rng::seed_from_u64(5 + depth as u64);
        let mut store = ParamStore::new();
        let net = HeightNet::new(&mut store, 3, 5, 2, depth, &mut rng).unwrap();
        for id in store.ids().collect::<Vec<_>>() {
            // nonzero biases so no unit sits exactly on the relu kink
            if store.name(id).ends_with("bias") {
                let n = store.get(id).len();
                let t = random(&[n], &mut rng);
                store.get_mut(id).data_mut().copy_from_slice(t.data());
            }
        }
        let x = random(&[12, 3], &mut rng);
        let report = grad_check_params(
            &store,
            |tape: &mut Tape<'_>, s| {
                let xv = tape.constant(x.clone());
                let h = net.forward(tape, s, xv, 2)?;
                let sq = tape.mul(h, h)?;
                Ok(tape.mean(sq))
            },
            1e-6,
            Exec::Sequential,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-5, "depth {depth}: {report:?}");
    }
}

#[test]
fn single_sequence_heights_match_batched_column() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut store = ParamStore::new();
    let net = HeightNet::new(&mut store, 4, 6, 3, 1, &mut rng).unwrap();
    let (t_len, batch) = (7, 3);
    let x = random(&[t_len * batch, 4], &mut rng);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let h = net.forward(&mut tape, &store, xv, batch).unwrap();
    let batched = tape.value(h).to_vec();
    for b in 0..batch {
        let rows: Vec<f64> = (0..t_len).flat_map(|t| x.row(t * batch + b).to_vec()).collect();
        let single = syntactic_heights(&Tensor::new(vec![t_len, 4], rows).unwrap(), &store, &net).unwrap();
        for t in 0..t_len {
            assert!((single.get(t) - batched[t * batch + b]).abs() < 1e-14);
        }
    }
}

#[test]
fn rejects_bad_shapes_and_sizes() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    assert!(HeightNet::new(&mut store, 3, 4, 2, 0, &mut rng).is_err());
    let net = HeightNet::new(&mut store, 3, 4, 2, 1, &mut rng).unwrap();
    assert!(syntactic_heights(&Tensor::zeros(&[5, 2]), &store, &net).is_err());
    assert!(syntactic_heights(&Tensor::zeros(&[0, 3]), &store, &net).is_err());
}
