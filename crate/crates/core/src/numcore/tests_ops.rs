use proptest::prelude::*;

use super::gradcheck::{check_module, relative_error};
use super::*;
use crate::rng::seeded;

fn mat(rows: usize, cols: usize, data: &[f64]) -> Tensor<f64> {
    Tensor::new(&[rows, cols], data.to_vec()).unwrap()
}

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::uniform(shape, 1.0, &mut seeded(seed))
}

/// Weighted sum `Σ w ⊙ y` with fixed pseudo-random weights, so that every
/// output entry gets a distinct upstream gradient.
fn probe(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let w = random(tape.shape(y), seed);
    let w = tape.constant(w)?;
    let prod = tape.mul(y, w)?;
    tape.sum(prod)
}

#[test]
fn matmul_identity_and_hand_cases() {
    let mut tape = Tape::new();
    let i = tape.constant(mat(2, 2, &[1.0, 0.0, 0.0, 1.0])).unwrap();
    let b = tape.constant(mat(2, 2, &[3.0, 4.0, 5.0, 6.0])).unwrap();
    let y = tape.matmul(i, b).unwrap();
    assert_eq!(tape.value(y), &[3.0, 4.0, 5.0, 6.0]);

    let a = tape.constant(mat(1, 2, &[1.0, 2.0])).unwrap();
    let c = tape.constant(mat(2, 1, &[3.0, 4.0])).unwrap();
    let y = tape.matmul(a, c).unwrap();
    assert_eq!(tape.value(y), &[11.0]);
    assert_eq!(tape.shape(y), &[1, 1]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
    let b = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
    match tape.matmul(a, b) {
        Err(Error::Dimension { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 3]);
        }
        other => panic!("expected dimension error, got {other:?}"),
    }
}

#[test]
fn matmul_gradients_match_finite_differences() {
    for seed in 0..10 {
        let mut params = ParamList(vec![
            random(&[4, 3], seed).into_param(),
            random(&[3, 5], seed + 100).into_param(),
        ]);
        let report = check_module(&mut params, 1e-6, |p, tape| {
            let a = tape.input(&p.0[0])?;
            let b = tape.input(&p.0[1])?;
            let y = tape.matmul(a, b)?;
            probe(tape, y, 99)
        })
        .unwrap();
        assert!(report.passes(1e-4), "{report:?}");
    }
}

#[test]
fn softmax_examples() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(mat(1, 3, &[0.0, 0.0, 0.0])).unwrap();
    let y = tape.row_softmax(x).unwrap();
    for &p in tape.value(y) {
        assert!((p - 1.0 / 3.0).abs() < 1e-15);
    }

    let x = tape.constant(mat(1, 2, &[1000.0, 0.0])).unwrap();
    let y = tape.row_softmax(x).unwrap();
    assert_eq!(tape.value(y)[0], 1.0);
    assert!(tape.value(y)[1] >= 0.0 && tape.value(y)[1] < 1e-300);

    let x = tape.constant(random(&[5, 7], 3).reshape(&[5, 7]).unwrap()).unwrap();
    let y = tape.row_softmax(x).unwrap();
    for row in tape.value(y).chunks(7) {
        let s: f64 = row.iter().sum();
        assert!((s - 1.0).abs() < 1e-6);
        assert!(row.iter().all(|&p| p >= 0.0));
    }
}

#[test]
fn softmax_single_precision_is_stable() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::new(&[1, 2], vec![1000.0, 0.0]).unwrap()).unwrap();
    let y = tape.row_softmax(x).unwrap();
    assert_eq!(tape.value(y), &[1.0, 0.0]);
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one_and_ignore_shifts(
        rows in 1usize..6,
        cols in 1usize..9,
        seed in any::<u64>(),
        shift in -50.0f64..50.0,
    ) {
        let x = Tensor::<f64>::uniform(&[rows, cols], 10.0, &mut seeded(seed));
        let shifted = Tensor::new(&[rows, cols], x.data().iter().map(|v| v + shift).collect()).unwrap();
        let mut tape = Tape::new();
        let a = tape.constant(x).unwrap();
        let b = tape.constant(shifted).unwrap();
        let ya = tape.row_softmax(a).unwrap();
        let yb = tape.row_softmax(b).unwrap();
        for row in tape.value(ya).chunks(cols) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        for (p, q) in tape.value(ya).iter().zip(tape.value(yb)) {
            prop_assert!((p - q).abs() < 1e-6);
        }
    }
}

#[test]
fn softmax_rejects_non_finite_input() {
    let mut tape = Tape::<f64>::new();
    let x = tape
        .constant(Tensor::new(&[1, 2], vec![f64::NAN, 0.0]).unwrap())
        .unwrap_err();
    assert!(matches!(x, Error::Numeric(_)));
}

fn layer_norm_of(x: Tensor<f64>) -> Vec<f64> {
    let n = x.cols();
    let mut tape = Tape::new();
    let xv = tape.constant(x).unwrap();
    let g = tape.constant(Tensor::full(&[n], 1.0)).unwrap();
    let b = tape.constant(Tensor::zeros(&[n])).unwrap();
    let y = tape.layer_norm(xv, g, b, 1e-5).unwrap();
    tape.value(y).to_vec()
}

#[test]
fn layer_norm_examples() {
    assert_eq!(layer_norm_of(mat(1, 4, &[1.0; 4])), vec![0.0; 4]);

    let y = layer_norm_of(mat(1, 2, &[1.0, -1.0]));
    let expect = 1.0 / (1.0f64 + 1e-5).sqrt();
    assert!((y[0] - expect).abs() < 1e-12 && (y[1] + expect).abs() < 1e-12);
    assert!((y[0] - 1.0).abs() < 1e-5);

    let x = random(&[3, 8], 11);
    for row in layer_norm_of(x).chunks(8) {
        let mean: f64 = row.iter().sum::<f64>() / 8.0;
        let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
        assert!(mean.abs() < 1e-6);
        // eps = 1e-5 shrinks the variance by var/(var+eps); rows here have var ~0.3
        assert!((var - 1.0).abs() < 1e-4, "variance {var}");
    }
}

#[test]
fn layer_norm_moments_without_eps_bias() {
    // with unit-scale rows the eps shrinkage is below 1e-6
    let x = Tensor::<f64>::uniform(&[3, 8], 1000.0, &mut seeded(5));
    for row in layer_norm_of(x).chunks(8) {
        let mean: f64 = row.iter().sum::<f64>() / 8.0;
        let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
        assert!(mean.abs() < 1e-6);
        assert!((var - 1.0).abs() < 1e-6, "variance {var}");
    }
}

#[test]
fn layer_norm_rejects_single_feature() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::zeros(&[3, 1])).unwrap();
    let g = tape.constant(Tensor::full(&[1], 1.0)).unwrap();
    let b = tape.constant(Tensor::zeros(&[1])).unwrap();
    assert!(matches!(tape.layer_norm(x, g, b, 1e-5), Err(Error::Parameter(_))));
}

#[test]
fn dropout_modes() {
    let mut rng = seeded(1);
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(random(&[4, 5], 2)).unwrap();
    let y = tape.dropout(x, 0.3, false, &mut rng).unwrap();
    assert_eq!(tape.value(y), tape.value(x));
    let y = tape.dropout(x, 0.0, true, &mut rng).unwrap();
    assert_eq!(tape.value(y), tape.value(x));
    assert!(matches!(tape.dropout(x, 1.0, true, &mut rng), Err(Error::Parameter(_))));

    let ones = tape.constant(Tensor::full(&[1, 100_000], 1.0)).unwrap();
    let y = tape.dropout(ones, 0.5, true, &mut rng).unwrap();
    let mean = tape.value(y).iter().sum::<f64>() / 100_000.0;
    assert!((0.98..=1.02).contains(&mean), "mean {mean}");
    assert!(tape.value(y).iter().all(|&v| v == 0.0 || v == 2.0));
}

#[test]
fn backward_of_linear_and_quadratic_functionals() {
    let x = random(&[2, 3, 2], 4).into_param();
    let mut tape = Tape::new();
    let xv = tape.input(&x).unwrap();
    let s = tape.sum(xv).unwrap();
    let grads = tape.backward(s).unwrap();
    assert_eq!(grads.get(x.id()).unwrap(), &[1.0; 12]);

    let mut tape = Tape::new();
    let xv = tape.input(&x).unwrap();
    let sq = tape.mul(xv, xv).unwrap();
    let s = tape.sum(sq).unwrap();
    let half = tape.scale(s, 0.5).unwrap();
    let grads = tape.backward(half).unwrap();
    assert_eq!(grads.get(x.id()).unwrap(), x.data());
}

#[test]
fn backward_contracts() {
    let x = random(&[2, 2], 4).into_param();
    let untracked = random(&[2, 2], 5);
    let mut tape = Tape::new();
    let xv = tape.input(&x).unwrap();
    let uv = tape.input(&untracked).unwrap();
    assert!(!tape.is_tracked(uv));
    let y = tape.mul(xv, uv).unwrap();
    assert!(matches!(tape.backward(y), Err(Error::Contract(_))));
    let s = tape.sum(y).unwrap();
    let grads = tape.backward(s).unwrap();
    assert_eq!(grads.get(x.id()).unwrap(), untracked.data());
    assert!(grads.get(untracked.id()).is_none());
    assert!(matches!(tape.backward(s), Err(Error::State(_))));
    assert!(matches!(tape.input(&x), Err(Error::State(_))));
}

#[test]
fn frozen_params_enter_as_constants() {
    let x = random(&[2, 2], 4).into_param();
    let mut tape = Tape::new();
    tape.set_track_params(false);
    let xv = tape.input(&x).unwrap();
    assert!(!tape.is_tracked(xv));
}

#[test]
fn gradients_accumulate_into_parameters() {
    let mut params = ParamList(vec![random(&[3], 1).into_param()]);
    for _ in 0..2 {
        let mut tape = Tape::new();
        let v = tape.input(&params.0[0]).unwrap();
        let s = tape.sum(v).unwrap();
        let g = tape.backward(s).unwrap();
        params.accumulate(&g).unwrap();
    }
    assert_eq!(params.0[0].grad().unwrap(), &[2.0; 3]);
    params.zero_grad();
    assert_eq!(params.0[0].grad().unwrap(), &[0.0; 3]);
}

#[test]
fn non_finite_results_are_errors() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(mat(1, 1, &[1000.0])).unwrap();
    assert!(matches!(tape.exp(x), Err(Error::Numeric(_))));
}

/// Central-difference check of every primitive's backward rule.
#[test]
fn primitive_gradients_match_finite_differences() {
    type Build = fn(&mut Tape<f64>, &[Var]) -> Result<Var>;
    let cases: Vec<(&str, Vec<Vec<usize>>, Build)> = vec![
        ("add", vec![vec![3, 4], vec![3, 4]], |t, v| t.add(v[0], v[1])),
        ("sub", vec![vec![3, 4], vec![3, 4]], |t, v| t.sub(v[0], v[1])),
        ("mul", vec![vec![3, 4], vec![3, 4]], |t, v| t.mul(v[0], v[1])),
        ("square", vec![vec![3, 4]], |t, v| t.mul(v[0], v[0])),
        ("add_row", vec![vec![3, 4], vec![4]], |t, v| t.add_row(v[0], v[1])),
        ("scale", vec![vec![3, 4]], |t, v| t.scale(v[0], -2.5)),
        ("add_scalar", vec![vec![3, 4]], |t, v| t.add_scalar(v[0], 0.7)),
        ("relu", vec![vec![3, 4]], |t, v| t.relu(v[0])),
        ("tanh", vec![vec![3, 4]], |t, v| t.tanh(v[0])),
        ("exp", vec![vec![3, 4]], |t, v| t.exp(v[0])),
        ("softplus", vec![vec![3, 4]], |t, v| t.softplus(v[0])),
        ("clamp", vec![vec![3, 4]], |t, v| t.clamp(v[0], -0.5, 0.5)),
        ("row_softmax", vec![vec![3, 5]], |t, v| t.row_softmax(v[0])),
        ("layer_norm", vec![vec![3, 6], vec![6], vec![6]], |t, v| {
            t.layer_norm(v[0], v[1], v[2], 1e-5)
        }),
        ("slice_cols", vec![vec![3, 6]], |t, v| t.slice_cols(v[0], 2, 3)),
        ("concat_cols", vec![vec![3, 2], vec![3, 4]], |t, v| {
            t.concat_cols(&[v[0], v[1]])
        }),
        ("block_scores", vec![vec![6, 4], vec![6, 4]], |t, v| {
            t.block_scores(v[0], v[1], 3)
        }),
        ("block_apply", vec![vec![6, 3], vec![6, 4]], |t, v| {
            t.block_apply(v[0], v[1], 3)
        }),
        ("sum_cols", vec![vec![3, 4]], |t, v| t.sum_cols(v[0])),
        ("mean", vec![vec![3, 4]], |t, v| t.mean(v[0])),
        ("reshape", vec![vec![3, 4]], |t, v| t.reshape(v[0], &[4, 3])),
    ];
    for (name, shapes, build) in cases {
        for seed in 0..10u64 {
            let mut params = ParamList(
                shapes
                    .iter()
                    .enumerate()
                    .map(|(i, s)| random(s, seed * 31 + i as u64).into_param())
                    .collect(),
            );
            let report = check_module(&mut params, 1e-6, |p, tape| {
                let vars = p.0.iter().map(|x| tape.input(x)).collect::<Result<Vec<_>>>()?;
                let y = build(tape, &vars)?;
                probe(tape, y, 1000 + seed)
            })
            .unwrap();
            assert!(report.passes(1e-4), "{name} seed {seed}: {report:?}");
        }
    }
}

#[test]
fn dropout_gradient_uses_the_mask() {
    let x = random(&[4, 4], 9).into_param();
    let mut tape = Tape::new();
    let xv = tape.input(&x).unwrap();
    let y = tape.dropout(xv, 0.5, true, &mut seeded(3)).unwrap();
    let mask: Vec<f64> = tape.value(y).iter().zip(x.data()).map(|(a, b)| a / b).collect();
    let s = tape.sum(y).unwrap();
    let g = tape.backward(s).unwrap();
    for (gi, mi) in g.get(x.id()).unwrap().iter().zip(&mask) {
        assert!(relative_error(*gi, *mi) < 1e-12);
    }
}

#[test]
fn identical_seed_and_ops_are_bitwise_identical() {
    let run = || {
        let mut rng = seeded(42);
        let w = Tensor::<f32>::uniform(&[8, 8], 0.5, &mut rng).into_param();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::uniform(&[5, 8], 1.0, &mut rng)).unwrap();
        let wv = tape.input(&w).unwrap();
        let h = tape.matmul(x, wv).unwrap();
        let h = tape.dropout(h, 0.2, true, &mut rng).unwrap();
        let p = tape.row_softmax(h).unwrap();
        let s = tape.sum(p).unwrap();
        let s2 = tape.mul(s, s).unwrap();
        let g = tape.backward(s2).unwrap();
        (tape.value(p).to_vec(), g.get(w.id()).unwrap().to_vec())
    };
    let (a, ga) = run();
    let (b, gb) = run();
    assert_eq!(
        a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
    assert_eq!(
        ga.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        gb.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
}

#[test]
fn tape_replays_in_reverse_order() {
    // a chain a -> b -> c: each op's gradient depends on the downstream one
    let x = Tensor::new(&[1], vec![0.3f64]).unwrap().into_param();
    let mut tape = Tape::new();
    let a = tape.input(&x).unwrap();
    let b = tape.tanh(a).unwrap();
    let c = tape.exp(b).unwrap();
    let d = tape.sum(c).unwrap();
    let g = tape.backward(d).unwrap();
    let t = 0.3f64.tanh();
    let expect = t.exp() * (1.0 - t * t);
    assert!((g.wrt(a).unwrap()[0] - expect).abs() < 1e-15);
}
