use amd_distill::nn::{Family, Mode, Model, ModelSpec, TapActivation};
use amd_distill::tensor::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random<T: amd_distill::tensor::Scalar>(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64_lossy(rng.random_range(-1.0..1.0))).collect();
    Tensor::new(shape, data).unwrap()
}

fn model<T: amd_distill::tensor::Scalar>(spec: ModelSpec, seed: u64) -> Model<T> {
    Model::new(spec, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

#[test]
fn wrn_counts_reproduce_table_ratios() {
    let count = |d, k| model::<f32>(ModelSpec::wrn(d, k, 10), 0).param_count() as f64;
    let (t, s, deep) = (count(16, 3), count(16, 1), count(28, 1));
    // Rounded to two decimals in millions, as tabulated.
    assert_eq!(format!("{:.2}", s / 1e6), "0.18");
    assert_eq!(format!("{:.2}", t / 1e6), "1.55");
    assert_eq!(format!("{:.2}", deep / 1e6), "0.37");
    // Compression ratios of the teacher/student pairs.
    assert_eq!(format!("{:.2}", s / t * 100.0), "11.30");
    assert_eq!(format!("{:.2}", s / deep * 100.0), "47.38");
    assert_eq!(format!("{:.2}", deep / t * 100.0), "23.85");
    let resnet44 = model::<f32>(ModelSpec::new(Family::ResnetBasic, 44, 1, 10, [3, 32, 32]), 0).param_count() as f64;
    assert_eq!(format!("{:.2}", resnet44 / 1e6), "0.66");
    assert_eq!(format!("{:.2}", s / resnet44 * 100.0), "26.47");
}

#[test]
fn tap_shapes_follow_group_resolution() {
    let m = model::<f32>(ModelSpec::wrn(16, 1, 10), 1);
    let mut tape = Tape::new();
    let x = tape.constant(random(&[2, 3, 32, 32], &mut ChaCha8Rng::seed_from_u64(2)));
    let out = m.forward(&mut tape, x, Mode::Train).unwrap();
    let shapes: Vec<Vec<usize>> = out.taps.iter().map(|t| tape.shape(t.activation).unwrap().to_vec()).collect();
    assert_eq!(shapes, vec![vec![2, 16, 32, 32], vec![2, 32, 16, 16], vec![2, 64, 8, 8]]);
    assert_eq!(tape.shape(out.logits).unwrap(), &[2, 10]);
    let names: Vec<_> = out.taps.iter().map(|t| t.layer).collect();
    assert_eq!(names, ["group1", "group2", "group3"]);
}

#[test]
fn post_relu_taps_are_nonnegative_and_raw_taps_are_not() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x: Tensor<f64> = random(&[2, 3, 8, 8], &mut rng);
    let mut spec = ModelSpec::wrn(10, 1, 4).with_input([3, 8, 8]);
    for (act, expect_nonneg) in [(TapActivation::PostRelu, true), (TapActivation::Raw, false)] {
        spec.tap_activation = act;
        let m = model::<f64>(spec.clone(), 4);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let out = m.forward(&mut tape, xv, Mode::Train).unwrap();
        let all_nonneg = out
            .taps
            .iter()
            .all(|t| tape.value(t.activation).unwrap().data().iter().all(|&v| v >= 0.0));
        assert_eq!(all_nonneg, expect_nonneg, "{act:?}");
    }
}

#[test]
fn zero_input_gives_finite_logits_and_eval_is_deterministic() {
    for family in [Family::Wrn, Family::ResnetBasic, Family::PlainCnn] {
        let depth = match family {
            Family::Wrn => 10,
            Family::ResnetBasic => 8,
            Family::PlainCnn => 5,
        };
        let m = model::<f32>(ModelSpec::new(family, depth, 1, 5, [3, 16, 16]), 5);
        let run = |x: &Tensor<f32>| {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let out = m.forward(&mut tape, xv, Mode::Eval).unwrap();
            tape.value(out.logits).unwrap().clone()
        };
        let zero = run(&Tensor::zeros(&[3, 3, 16, 16]));
        assert!(zero.all_finite(), "{family:?}");
        let x = random(&[3, 3, 16, 16], &mut ChaCha8Rng::seed_from_u64(6));
        let (a, b) = (run(&x), run(&x));
        assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
}

#[test]
fn every_parameter_receives_gradient() {
    for (family, depth) in [(Family::Wrn, 10), (Family::ResnetBasic, 8), (Family::PlainCnn, 5)] {
        let m = model::<f64>(ModelSpec::new(family, depth, 1, 4, [3, 8, 8]), 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut tape = Tape::new();
        let x = tape.constant(random(&[4, 3, 8, 8], &mut rng));
        let out = m.forward(&mut tape, x, Mode::Train).unwrap();
        let weights = tape.constant(random(&[4, 4], &mut rng));
        let weighted = tape.mul(out.logits, weights).unwrap();
        let mut loss = tape.sum_all(weighted).unwrap();
        for tap in &out.taps {
            let sq = tape.square(tap.activation).unwrap();
            let s = tape.mean(sq, &[]).unwrap();
            loss = tape.add(loss, s).unwrap();
        }
        tape.backward(loss).unwrap();
        assert_eq!(out.params.len(), m.params().len());
        for (p, v) in m.params().iter().zip(&out.params) {
            let g = tape.grad(*v).unwrap().unwrap();
            assert!(g.iter().any(|&x| x != 0.0), "{family:?}: {} has zero gradient", p.name);
        }
    }
}

#[test]
fn downsampling_halves_twice() {
    let spec = ModelSpec::new(Family::ResnetBasic, 8, 1, 10, [3, 32, 32]);
    assert_eq!(spec.group_sizes(), [(32, 32), (16, 16), (8, 8)]);
    let m = model::<f32>(spec, 9);
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[1, 3, 32, 32]));
    let out = m.forward(&mut tape, x, Mode::Eval).unwrap();
    let spatial: Vec<usize> = out.taps.iter().map(|t| tape.shape(t.activation).unwrap()[2]).collect();
    assert_eq!(spatial, [32, 16, 8]);
}

#[test]
fn frozen_forward_produces_no_gradients() {
    let m = model::<f64>(ModelSpec::wrn(10, 1, 3).with_input([1, 8, 8]), 10);
    let mut tape = Tape::new();
    let x = tape.param(random(&[2, 1, 8, 8], &mut ChaCha8Rng::seed_from_u64(11)));
    let out = m.forward_frozen(&mut tape, x).unwrap();
    assert!(out.params.iter().all(|&p| !tape.requires_grad(p).unwrap()));
    assert!(out.bn_stats.is_empty());
}

#[test]
fn checkpoint_round_trip_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut m = model::<f32>(ModelSpec::wrn(10, 2, 6).with_input([3, 8, 8]), 13);
    let x: Tensor<f32> = random(&[2, 3, 8, 8], &mut rng);
    // Move the running stats away from their initial values first.
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let stats = m.forward(&mut tape, xv, Mode::Train).unwrap().bn_stats;
    m.update_running_stats(&stats).unwrap();

    m.save_checkpoint(dir.path(), 7, &[0.5, 0.75]).unwrap();
    let (back, manifest) = Model::<f32>::load_checkpoint(dir.path()).unwrap();
    assert_eq!(manifest.epoch, 7);
    assert_eq!(manifest.metric_history, vec![0.5, 0.75]);
    assert_eq!(back.running_stats(), m.running_stats());

    let logits = |model: &Model<f32>| {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let out = model.forward(&mut tape, xv, Mode::Eval).unwrap();
        tape.value(out.logits).unwrap().data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(logits(&m), logits(&back));
}

#[test]
fn checkpoint_missing_dir_names_path() {
    let err = Model::<f32>::load_checkpoint("/nonexistent/ckpt").unwrap_err();
    assert!(err.to_string().contains("/nonexistent/ckpt"));
}

