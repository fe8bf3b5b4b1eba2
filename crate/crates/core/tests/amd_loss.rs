mod common;

use amd_distill::amd::{am_loss, amd_feature_loss, angular_knowledge, build_pairs, AmdConfig};
use amd_distill::attention::{
    attention_map, mask_negative, normalize_pair, split_local, AttentionPair, LocalMode, Scope,
};
use amd_distill::nn::{FeatureMap, GROUP_TAPS};
use amd_distill::tensor::{grad_check, Tape, Tensor, Var};
use common::drive::{feature_loss, pairing, stack};
use common::{rel, Act};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn acts(rng: &mut ChaCha8Rng, n: usize, c: usize, h: usize, w: usize) -> Vec<Act> {
    (0..n).map(|_| Act::random(rng, c, h, w)).collect()
}

fn values(tape: &Tape<f64>, v: Var) -> Vec<f64> {
    tape.value(v).unwrap().data().to_vec()
}

fn pair_of(tape: &mut Tape<f64>, qp: &[f64], qn: &[f64]) -> AttentionPair {
    let n = qp.len();
    let q_pos = tape.constant(Tensor::from_f64(&[1, 1, n, 1], qp).unwrap());
    let q_neg = tape.constant(Tensor::from_f64(&[1, 1, n, 1], qn).unwrap());
    AttentionPair {
        f: q_pos,
        q_pos,
        q_neg,
        layer: "group1".into(),
        scope: Scope::Global,
        masked: false,
    }
}

fn lib_g(qp: &[f64], qn: &[f64], s: f64, m: f64) -> Vec<f64> {
    let mut tape = Tape::new();
    let p = pair_of(&mut tape, qp, qn);
    let g = angular_knowledge(&mut tape, &p, s, m).unwrap();
    values(&tape, g)
}

fn oracle_maps(batch: &[Act], cfg: &AmdConfig) -> Vec<(Vec<f64>, Vec<f64>)> {
    batch
        .iter()
        .map(|a| {
            let (qp, qn) = common::pos_neg(&common::attention(a, cfg.d));
            if cfg.use_mask {
                let qn = common::mask(&qn, cfg.mask_threshold);
                (qp, qn)
            } else {
                (qp, qn)
            }
        })
        .collect()
}

fn oracle_local_maps(batch: &[Act], k: usize, cfg: &AmdConfig) -> Vec<(Vec<f64>, Vec<f64>)> {
    batch
        .iter()
        .map(|a| {
            let f = common::quadrant(&common::attention(a, cfg.d), a.h, a.w, k);
            let (qp, qn) = common::pos_neg(&f);
            let qn = if cfg.use_mask { common::mask(&qn, cfg.mask_threshold) } else { qn };
            (qp, qn)
        })
        .collect()
}

fn oracle_global(teacher: &[Vec<Act>], student: &[Vec<Act>], cfg: &AmdConfig) -> (f64, Vec<(f64, f64, f64)>) {
    let comps: Vec<_> = teacher
        .iter()
        .zip(student)
        .map(|(t, s)| common::layer_components(&oracle_maps(t, cfg), &oracle_maps(s, cfg), cfg.s, cfg.m))
        .collect();
    (common::am_loss(&comps), comps)
}

fn oracle_feature_loss(teacher: &[Vec<Act>], student: &[Vec<Act>], cfg: &AmdConfig) -> f64 {
    let (global, _) = oracle_global(teacher, student, cfg);
    if !cfg.use_local {
        return global;
    }
    let mut local = 0.0;
    for k in 0..4 {
        let comps: Vec<_> = teacher
            .iter()
            .zip(student)
            .map(|(t, s)| {
                common::layer_components(&oracle_local_maps(t, k, cfg), &oracle_local_maps(s, k, cfg), cfg.s, cfg.m)
            })
            .collect();
        local += common::am_loss(&comps) / 4.0;
    }
    cfg.global_weight * global + cfg.local_weight * local
}

#[test]
fn attention_map_matches_channel_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let batch = acts(&mut rng, 2, 8, 4, 4);
    let mut tape = Tape::new();
    let a = tape.constant(stack(&batch));
    let f = attention_map(&mut tape, a, 2.0).unwrap();
    let got = values(&tape, f);
    let want: Vec<f64> = batch.iter().flat_map(|a| common::attention(a, 2.0)).collect();
    for (g, w) in got.iter().zip(&want) {
        assert!((g - w).abs() <= 1e-12 * w.abs().max(1.0));
    }
}

#[test]
fn random_positive_map_normalizes_to_unit_norm() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let f: Vec<f64> = (0..16).map(|_| rng.random_range(0.01..5.0)).collect();
    let mut tape = Tape::new();
    let fv = tape.constant(Tensor::from_f64(&[1, 1, 4, 4], &f).unwrap());
    let p = normalize_pair(&mut tape, fv, "group1", false).unwrap();
    let qp = values(&tape, p.q_pos);
    assert!(qp.iter().all(|&q| q <= 1.0));
    assert!((qp.iter().map(|q| q * q).sum::<f64>() - 1.0).abs() < 1e-12);
    let (want, _) = common::pos_neg(&f);
    assert!(qp.iter().zip(&want).all(|(a, b)| (a - b).abs() < 1e-15));
}

#[test]
fn local_split_matches_slice_then_normalize() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let f: Vec<f64> = (0..64).map(|_| rng.random_range(0.0..3.0)).collect();
    let mut tape = Tape::new();
    let fv = tape.constant(Tensor::from_f64(&[1, 1, 8, 8], &f).unwrap());
    let p = normalize_pair(&mut tape, fv, "group1", false).unwrap();
    let quads = split_local(&mut tape, &p, LocalMode::Renormalize, false).unwrap();
    let sliced = split_local(&mut tape, &p, LocalMode::Slice, false).unwrap();
    let (global_qp, _) = common::pos_neg(&f);
    for k in 0..4 {
        let (qp, qn) = common::pos_neg(&common::quadrant(&f, 8, 8, k));
        let got_p = values(&tape, quads[k].q_pos);
        let got_n = values(&tape, quads[k].q_neg);
        for i in 0..16 {
            assert!((got_p[i] - qp[i]).abs() < 1e-12);
            assert!((got_n[i] - qn[i]).abs() < 1e-12);
        }
        let want_slice = common::quadrant(&global_qp, 8, 8, k);
        assert!(values(&tape, sliced[k].q_pos)
            .iter()
            .zip(&want_slice)
            .all(|(a, b)| (a - b).abs() < 1e-15));
    }
}

#[test]
fn constant_map_quadrants_are_identical() {
    let mut tape = Tape::new();
    let fv = tape.constant(Tensor::from_f64(&[1, 1, 4, 4], &[2.0; 16]).unwrap());
    let p = normalize_pair(&mut tape, fv, "group1", false).unwrap();
    let quads = split_local(&mut tape, &p, LocalMode::Renormalize, false).unwrap();
    for q in &quads {
        // 1/sqrt(h·w/4) for a 4×4 map.
        assert_eq!(values(&tape, q.q_pos), vec![0.5; 4]);
    }
}

#[test]
fn masked_values_are_zero_or_above_threshold() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let f: Vec<f64> = (0..36).map(|_| rng.random_range(0.0..1.0)).collect();
    let mut tape = Tape::new();
    let fv = tape.constant(Tensor::from_f64(&[1, 1, 6, 6], &f).unwrap());
    let p = normalize_pair(&mut tape, fv, "group1", false).unwrap();
    let m = mask_negative(&mut tape, &p, 0.5).unwrap();
    let before = values(&tape, p.q_neg);
    let after = values(&tape, m.q_neg);
    for (b, a) in before.iter().zip(&after) {
        assert!(*a == 0.0 || (*a > 0.5 && *a <= 1.0));
        assert!(*a == 0.0 || a == b);
    }
    let low = pair_of(&mut tape, &[0.6, 0.9], &[0.4, 0.1]);
    let masked = mask_negative(&mut tape, &low, 0.5).unwrap();
    assert_eq!(values(&tape, masked.q_neg), vec![0.0, 0.0]);
}

#[test]
fn angular_knowledge_matches_literal_formula() {
    let g = lib_g(&[0.9], &[0.1], 64.0, 1.35)[0];
    assert!((g - common::g_literal(0.9, 0.1, 64.0, 1.35)).abs() < 1e-15);
    let want = common::g_stable(0.9, 0.1, 64.0, 1.35);
    assert!(rel(g, want) < 1e-6, "{g} vs {want}");
    for (qp, qn) in [(0.3, 0.7), (0.5, 0.5), (0.6, 0.45)] {
        let g = lib_g(&[qp], &[qn], 30.0, 1.1)[0];
        assert!(rel(g, common::g_literal(qp, qn, 30.0, 1.1)) < 1e-12);
    }
    assert!((0.9f64.acos() - 0.45103).abs() < 1e-5);
}

#[test]
fn saturated_positive_is_near_zero() {
    let s = 64.0;
    for qn in [0.0, 0.05, 0.5, 0.9] {
        let g = lib_g(&[1.0], &[qn], s, 1.35)[0];
        let want = -(s * qn - s).exp().ln_1p();
        assert!(g <= 0.0 && g.is_finite());
        assert!((g - want).abs() < 1e-10, "{qn}: {g} vs {want}");
    }
}

#[test]
fn g_grid_is_monotone_and_margin_shrinks_it() {
    let grid: Vec<f64> = (0..=400).map(|i| i as f64 / 400.0).collect();
    for m in [1.0, 1.1, 1.35, 1.5, 2.0] {
        for qn_i in (0..=20).map(|i| i as f64 / 20.0) {
            let qn = vec![qn_i; grid.len()];
            let g = lib_g(&grid, &qn, 64.0, m);
            assert!(g.iter().all(|v| v.is_finite() && *v <= 0.0));
            for w in g.windows(2) {
                assert!(w[1] >= w[0], "m={m} qn={qn_i}: {} then {}", w[0], w[1]);
            }
        }
    }
    let qp: Vec<f64> = (201..=400).map(|i| i as f64 / 400.0).collect();
    let qn: Vec<f64> = qp.iter().map(|q| 1.0 - q).collect();
    let with = lib_g(&qp, &qn, 64.0, 1.35);
    let without = lib_g(&qp, &qn, 64.0, 1.0);
    assert!(with.iter().zip(&without).all(|(a, b)| a <= b));
}

#[test]
fn identical_maps_give_zero_loss_under_every_config() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let layers = vec![acts(&mut rng, 2, 3, 4, 4), acts(&mut rng, 2, 5, 2, 2)];
    for (use_local, use_mask) in [(false, false), (true, false), (false, true), (true, true)] {
        let cfg = AmdConfig {
            use_local,
            use_mask,
            ..AmdConfig::default()
        };
        let run = feature_loss(&layers, &layers, &cfg);
        assert_eq!(run.tape.item(run.out.loss).unwrap(), 0.0);
        assert_eq!(run.out.global.totals(), (0.0, 0.0, 0.0));
    }
}

#[test]
fn single_layer_loss_is_component_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let t = vec![acts(&mut rng, 3, 4, 4, 4)];
    let s = vec![acts(&mut rng, 3, 2, 4, 4)];
    let run = feature_loss(&t, &s, &AmdConfig::default());
    let c = &run.out.global.components[0];
    let loss = run.tape.item(run.out.loss).unwrap();
    assert!(rel(loss, (c.a + c.p + c.n) / 3.0) < 1e-15);
    assert!(c.a > 0.0 && c.p > 0.0 && c.n > 0.0);
}

#[test]
fn two_layer_loss_matches_scalar_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..20 {
        let n = rng.random_range(1..4);
        let t = vec![acts(&mut rng, n, 3, 6, 6), acts(&mut rng, n, 2, 3, 3)];
        let s = vec![acts(&mut rng, n, 1, 6, 6), acts(&mut rng, n, 4, 3, 3)];
        let cfg = AmdConfig {
            m: [1.0, 1.35, 2.0][rng.random_range(0..3)],
            ..AmdConfig::default()
        };
        let run = feature_loss(&t, &s, &cfg);
        let (want, comps) = oracle_global(&t, &s, &cfg);
        assert!(rel(run.tape.item(run.out.loss).unwrap(), want) < 1e-6);
        for (got, (a, p, q)) in run.out.global.components.iter().zip(&comps) {
            assert!(rel(got.a, *a) < 1e-6 && rel(got.p, *p) < 1e-6 && rel(got.n, *q) < 1e-6);
        }
    }
}

#[test]
fn global_only_equals_am_loss_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let t = vec![acts(&mut rng, 2, 3, 4, 4)];
    let s = vec![acts(&mut rng, 2, 3, 4, 4)];
    let cfg = AmdConfig::default();
    let run = feature_loss(&t, &s, &cfg);

    let mut tape = Tape::new();
    let tv = tape.constant(stack(&t[0]));
    let sv = tape.param(stack(&s[0]));
    let tt = [FeatureMap { layer: GROUP_TAPS[0], activation: tv }];
    let st = [FeatureMap { layer: GROUP_TAPS[0], activation: sv }];
    let (tp, sp) = build_pairs(&mut tape, &tt, &st, &pairing(1), &cfg).unwrap();
    let direct = am_loss(&mut tape, &tp, &sp, &cfg).unwrap();
    assert_eq!(
        run.tape.item(run.out.loss).unwrap().to_bits(),
        tape.item(direct.loss).unwrap().to_bits()
    );
}

#[test]
fn local_blend_matches_oracle_composition() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for use_mask in [false, true] {
        let t = vec![acts(&mut rng, 2, 3, 8, 8), acts(&mut rng, 2, 2, 4, 4)];
        let s = vec![acts(&mut rng, 2, 2, 8, 8), acts(&mut rng, 2, 3, 4, 4)];
        let cfg = AmdConfig {
            use_local: true,
            use_mask,
            ..AmdConfig::default()
        };
        let run = feature_loss(&t, &s, &cfg);
        let want = oracle_feature_loss(&t, &s, &cfg);
        assert!(rel(run.tape.item(run.out.loss).unwrap(), want) < 1e-9);
        assert_eq!(run.out.local.len(), 4);
    }
}

#[test]
fn odd_maps_reject_local_split() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let t = vec![acts(&mut rng, 1, 2, 3, 3)];
    let mut tape = Tape::new();
    let tv = tape.constant(stack(&t[0]));
    let taps = [FeatureMap { layer: GROUP_TAPS[0], activation: tv }];
    let cfg = AmdConfig {
        use_local: true,
        ..AmdConfig::default()
    };
    let err = amd_feature_loss(&mut tape, &taps, &taps, &pairing(1), &cfg).unwrap_err();
    assert!(err.to_string().contains("even"), "{err}");
}

#[test]
fn spatial_mismatch_pools_teacher_map() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let t = vec![acts(&mut rng, 2, 2, 8, 8)];
    let s = vec![acts(&mut rng, 2, 2, 4, 4)];
    let run = feature_loss(&t, &s, &AmdConfig::default());
    assert!(run.tape.item(run.out.loss).unwrap() > 0.0);
}

#[test]
fn feature_loss_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for (use_local, use_mask) in [(false, false), (true, false), (false, true), (true, true)] {
        let teacher = stack(&acts(&mut rng, 2, 3, 4, 4));
        let student = stack(&acts(&mut rng, 2, 2, 4, 4));
        let cfg = AmdConfig {
            use_local,
            use_mask,
            ..AmdConfig::default()
        };
        let report = grad_check(
            |tape, x| {
                let tv = tape.constant(teacher.clone());
                let tt = [FeatureMap { layer: GROUP_TAPS[0], activation: tv }];
                let st = [FeatureMap { layer: GROUP_TAPS[0], activation: x }];
                Ok(amd_feature_loss(tape, &tt, &st, &pairing(1), &cfg)?.loss)
            },
            &student,
            1e-6,
            1e-4,
        )
        .unwrap();
        assert!(
            report.passed(),
            "local={use_local} mask={use_mask}: {}",
            report.max_rel_error
        );
    }
}

#[test]
fn student_activations_receive_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let t = vec![acts(&mut rng, 2, 2, 4, 4)];
    let s = vec![acts(&mut rng, 2, 2, 4, 4)];
    let mut run = feature_loss(&t, &s, &AmdConfig::default());
    run.tape.backward(run.out.loss).unwrap();
    assert!(run.tape.grad(run.student[0]).unwrap().is_some());
}

fn batch_strategy() -> impl Strategy<Value = (u64, usize, usize, usize)> {
    (any::<u64>(), 1usize..4, 1usize..5, 1usize..5)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn normalized_pair_invariants((seed, c, h, w) in batch_strategy()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tape = Tape::new();
        let a = tape.constant(stack(&acts(&mut rng, 2, c, h, w)));
        let f = attention_map(&mut tape, a, 2.0).unwrap();
        let p = normalize_pair(&mut tape, f, "group1", false).unwrap();
        let qp = values(&tape, p.q_pos);
        let qn = values(&tape, p.q_neg);
        for sample in qp.chunks(h * w) {
            let ss: f64 = sample.iter().map(|q| q * q).sum();
            prop_assert!((ss - 1.0).abs() < 1e-6);
        }
        for (p, n) in qp.iter().zip(&qn) {
            prop_assert!((0.0..=1.0).contains(p) && (0.0..=1.0).contains(n));
            prop_assert_eq!(p + n, 1.0);
        }
    }

    #[test]
    fn attention_is_channel_permutation_invariant((seed, c, h, w) in batch_strategy()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Act::random(&mut rng, c + 1, h, w);
        let hw = h * w;
        let mut perm = a.clone();
        for ch in 0..=c {
            let src = c - ch;
            perm.data[ch * hw..(ch + 1) * hw].copy_from_slice(&a.data[src * hw..(src + 1) * hw]);
        }
        let mut tape = Tape::new();
        let av = tape.constant(stack(&[a]));
        let pv = tape.constant(stack(&[perm]));
        let fa = attention_map(&mut tape, av, 2.0).unwrap();
        let fp = attention_map(&mut tape, pv, 2.0).unwrap();
        for (x, y) in values(&tape, fa).iter().zip(&values(&tape, fp)) {
            prop_assert!(rel(*x, *y) < 1e-12);
        }
    }

    #[test]
    fn scaling_laws((seed, c, h, w) in batch_strategy(), alpha in 0.1f64..10.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Act::random(&mut rng, c, h, w);
        let mut scaled = a.clone();
        scaled.data.iter_mut().for_each(|v| *v *= alpha);
        let mut tape = Tape::new();
        let av = tape.constant(stack(&[a]));
        let sv = tape.constant(stack(&[scaled]));
        let fa = attention_map(&mut tape, av, 2.0).unwrap();
        let fs = attention_map(&mut tape, sv, 2.0).unwrap();
        for (x, y) in values(&tape, fa).iter().zip(&values(&tape, fs)) {
            prop_assert!(rel(alpha * alpha * x, *y) < 1e-12);
        }
        let pa = normalize_pair(&mut tape, fa, "group1", false).unwrap();
        let ps = normalize_pair(&mut tape, fs, "group1", false).unwrap();
        for (x, y) in values(&tape, pa.q_pos).iter().zip(&values(&tape, ps.q_pos)) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_is_nonnegative_symmetric_and_scale_invariant(seed in any::<u64>(), alpha in 0.1f64..10.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = vec![acts(&mut rng, 2, 2, 4, 4), acts(&mut rng, 2, 3, 2, 2)];
        let s = vec![acts(&mut rng, 2, 3, 4, 4), acts(&mut rng, 2, 1, 2, 2)];
        let cfg = AmdConfig::default();
        let base = feature_loss(&t, &s, &cfg);
        let loss = base.tape.item(base.out.loss).unwrap();
        prop_assert!(loss > 0.0);

        // Reordering the layers in both lists.
        let rt = vec![t[1].clone(), t[0].clone()];
        let rs = vec![s[1].clone(), s[0].clone()];
        let swapped = feature_loss(&rt, &rs, &cfg);
        prop_assert!(rel(swapped.tape.item(swapped.out.loss).unwrap(), loss) < 1e-12);

        let mut scaled = s.clone();
        for a in &mut scaled[0] {
            a.data.iter_mut().for_each(|v| *v *= alpha);
        }
        let run = feature_loss(&t, &scaled, &cfg);
        prop_assert!(rel(run.tape.item(run.out.loss).unwrap(), loss) < 1e-9);
    }
}
