use ple_core::grad::{finite_diff_grad, max_relative_error, single_segment, value_and_grad, FD_STEP};
use ple_core::model::{ModelParams, PleConfig};
use ple_core::ops;
use ple_core::theory::{gradient_record, tiny_audit_fixture, GRADIENT_FLOOR, GRADIENT_TOLERANCE};
use ple_core::tokenizer::{BOS, EOS};
use ple_core::trainer::ChatExample;
use ple_core::{ParamVector, Reduction, Route, Tape, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn params(shapes: &[&[usize]], seed: u64) -> ParamVector {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pv = ParamVector::new();
    for (i, s) in shapes.iter().enumerate() {
        pv.push(format!("p{i}"), random_tensor(s, &mut rng)).unwrap();
    }
    pv
}

fn check<F>(f: F, pv: &ParamVector) -> f64
where
    F: Fn(&mut Tape, &[Var], &()) -> ple_core::Result<Var>,
{
    let (_, g) = value_and_grad(&f, pv, &()).unwrap();
    let fd = finite_diff_grad(&f, pv, &(), FD_STEP).unwrap();
    max_relative_error(&g, &fd, GRADIENT_FLOOR)
}

/// Contracts a tensor output to a scalar with fixed, non-uniform weights so
/// that every output entry gets a distinct adjoint.
fn weighted_sum(tape: &mut Tape, x: Var) -> ple_core::Result<Var> {
    let shape = tape.value(x).shape().to_vec();
    let n: usize = shape.iter().product();
    let w = tape.leaf(Tensor::new(shape, (0..n).map(|i| ((i * 37 % 11) as f64 - 5.0) / 7.0).collect()).unwrap());
    let prod = tape.mul(x, w)?;
    Ok(tape.sum(prod))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn matmul_and_transposed_matmul_gradients(seed in 0u64..10_000, m in 1usize..4, k in 1usize..5, n in 1usize..4) {
        let pv = params(&[&[m, k], &[k, n], &[n, k]], seed);
        let err = check(|t, v, _| {
            let a = t.matmul(v[0], v[1])?;
            let b = t.matmul_t(v[0], v[2])?;
            let s = t.add(a, b)?;
            weighted_sum(t, s)
        }, &pv);
        prop_assert!(err <= GRADIENT_TOLERANCE, "{err}");
    }

    #[test]
    fn silu_rms_norm_gradients(seed in 0u64..10_000, rows in 1usize..4, d in 1usize..6) {
        let pv = params(&[&[rows, d], &[d]], seed);
        let err = check(|t, v, _| {
            let n = t.rms_norm(v[0], v[1])?;
            let s = t.silu(n);
            let y = t.scale(s, 1.7);
            weighted_sum(t, y)
        }, &pv);
        prop_assert!(err <= GRADIENT_TOLERANCE, "{err}");
    }

    #[test]
    fn attention_with_rope_gradients(seed in 0u64..10_000, tokens in 1usize..5, heads in 1usize..3, offset in 0usize..3) {
        let width = heads * 4;
        let pv = params(&[&[tokens, width], &[tokens, width], &[tokens, width]], seed);
        let err = check(|t, v, _| {
            let q = t.rope(v[0], heads, 10_000.0, offset)?;
            let k = t.rope(v[1], heads, 10_000.0, offset)?;
            let a = t.attention(q, k, v[2], heads)?;
            weighted_sum(t, a)
        }, &pv);
        prop_assert!(err <= GRADIENT_TOLERANCE, "{err}");
    }

    #[test]
    fn embedding_and_cross_entropy_gradients(seed in 0u64..10_000, vocab in 2usize..7, len in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let ids: Vec<usize> = (0..len).map(|_| rng.random_range(0..vocab)).collect();
        let targets: Vec<usize> = (0..len).map(|_| rng.random_range(0..vocab)).collect();
        let mask: Vec<bool> = (0..len).map(|i| i == 0 || rng.random_bool(0.7)).collect();
        let pv = params(&[&[vocab, 3], &[vocab, 3]], seed);
        for red in [Reduction::Mean, Reduction::Sum] {
            let err = check(|t, v, _| {
                let e = t.embed(v[0], &ids)?;
                let logits = t.matmul_t(e, v[1])?;
                t.cross_entropy(logits, &targets, &mask, red)
            }, &pv);
            prop_assert!(err <= GRADIENT_TOLERANCE, "{err}");
        }
    }

    #[test]
    fn select_rows_routes_adjoints(seed in 0u64..10_000, take in proptest::collection::vec(any::<bool>(), 1..5)) {
        let rows = take.len();
        let pv = params(&[&[rows, 3], &[rows, 3]], seed);
        let f = |t: &mut Tape, v: &[Var], _: &()| {
            let s = t.select_rows(v[0], v[1], &take)?;
            weighted_sum(t, s)
        };
        let (_, g) = value_and_grad(f, &pv, &()).unwrap();
        for (i, &b) in take.iter().enumerate() {
            let unused = if b { 0 } else { 1 };
            prop_assert!(g.segment(unused).row(i).iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn rms_norm_is_scale_invariant(seed in 0u64..10_000, d in 1usize..8, c in 0.5f64..10.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_tensor(&[2, d], &mut rng);
        let gain = random_tensor(&[d], &mut rng);
        let scaled = Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| v * c).collect()).unwrap();
        let a = ops::rms_norm(&x, &gain).unwrap();
        let b = ops::rms_norm(&scaled, &gain).unwrap();
        // the norm's epsilon only matters for rows with tiny mean square
        prop_assume!((0..2).all(|r| x.row(r).iter().map(|v| v * v).sum::<f64>() / d as f64 > 0.04));
        prop_assert!(a.max_abs_diff(&b) < 1e-4);
    }
}

#[test]
fn cross_entropy_of_uniform_logits_is_log_vocab() {
    let logits = Tensor::zeros(&[3, 5]);
    let l = ops::softmax_cross_entropy(&logits, &[0, 1, 4], &[true; 3], Reduction::Mean).unwrap();
    assert!((l - 5f64.ln()).abs() < 1e-15);
    let s = ops::softmax_cross_entropy(&logits, &[0, 1, 4], &[true, false, true], Reduction::Sum).unwrap();
    assert!((s - 2.0 * 5f64.ln()).abs() < 1e-15);
    let none = ops::softmax_cross_entropy(&logits, &[0, 1, 4], &[false; 3], Reduction::Mean).unwrap();
    assert_eq!(none, 0.0);
}

#[test]
fn silu_reference_values() {
    let x = Tensor::vector(vec![0.0, 1.0, -1.0]);
    let y = ops::silu(&x);
    let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
    assert_eq!(y.data()[0], 0.0);
    assert!((y.data()[1] - sig(1.0)).abs() < 1e-15);
    assert!((y.data()[2] + sig(-1.0)).abs() < 1e-15);
}

#[test]
fn full_model_gradient_matches_finite_differences_over_twenty_seeds() {
    for seed in 0..20 {
        let (ple, b0, b1) = tiny_audit_fixture(seed).unwrap();
        let rec = gradient_record("gradient", &ple, &[b0, b1].concat(), None, None).unwrap();
        assert!(rec.pass, "seed {seed}: {}", rec.measured);
    }
}

#[test]
fn wider_model_gradient_matches_finite_differences() {
    let cfg = PleConfig::tiny(16);
    let dense = ModelParams::init_dense(&cfg, 2).unwrap();
    let mut ple = ModelParams::clone_from_dense(&dense).unwrap();
    let seg = ple.expert_segments(1, Route::Think)[0];
    ple.values_mut().segment_mut(seg).data_mut().iter_mut().for_each(|v| *v *= 1.5);
    let data = vec![
        ChatExample::new(vec![BOS, 7, 8], vec![9, 10, EOS], Route::NoThink).unwrap(),
        ChatExample::new(vec![BOS, 11], vec![12, 13, 14, EOS], Route::Think).unwrap(),
        ChatExample::new(vec![BOS, 6, 6, 6], vec![15, EOS], Route::Think).unwrap(),
    ];
    let rec = gradient_record("gradient", &ple, &data, None, None).unwrap();
    assert!(rec.pass, "{}", rec.measured);
}

#[test]
fn scalar_segment_gradient() {
    let pv = single_segment("x", Tensor::vector(vec![0.3, -2.0]));
    let err = check(|t, v, _| {
        let sq = t.mul(v[0], v[0])?;
        let s = t.silu(sq);
        Ok(t.sum(s))
    }, &pv);
    assert!(err <= GRADIENT_TOLERANCE);
}
