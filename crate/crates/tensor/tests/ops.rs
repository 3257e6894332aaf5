use facesr_tensor::gradcheck::{check, GradCheckOptions};
use facesr_tensor::{BnMode, Element, OpKind, Tape, Tensor, Var};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rand_tensor<T: Element>(shape: &[usize], seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::uniform(shape.to_vec(), 1.0, &mut rng)
}

fn run_check<T: Element, F>(inputs: Vec<Tensor<T>>, wrt: &[bool], seed: u64, build: F)
where
    F: Fn(&mut Tape<T>, &[Var]) -> facesr_tensor::Result<Var>,
{
    let opts = GradCheckOptions::for_element::<T>(seed);
    let tol = GradCheckOptions::tolerance_for::<T>();
    let report = check(&inputs, wrt, build, &opts).unwrap();
    assert!(
        report.passes(tol),
        "{}: seed {seed}: {report:?} exceeds {tol}",
        T::NAME
    );
}

fn both_precisions(f: impl Fn(u64, bool)) {
    for seed in 0..5 {
        f(seed, false);
        f(seed, true);
    }
}

macro_rules! gradcheck_both {
    ($seed:expr, $f64:expr, |$t:ident| $body:expr) => {
        if $f64 {
            type $t = f64;
            $body
        } else {
            type $t = f32;
            $body
        }
    };
}

#[test]
fn conv2d_center_value_and_output_size() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::full(vec![1, 1, 3, 3], 1.0));
    let w = tape.constant(Tensor::full(vec![1, 1, 3, 3], 1.0));
    let b = tape.constant(Tensor::zeros(vec![1]));
    let y = tape.conv2d(x, w, Some(b), 1, 1).unwrap();
    assert_eq!(tape.value(y).data()[4], 9.0);

    let x = tape.constant(Tensor::zeros(vec![1, 1, 4, 4]));
    let y = tape.conv2d(x, w, None, 2, 1).unwrap();
    assert_eq!(tape.value(y).shape(), &[1, 1, 2, 2]);
}

#[test]
fn conv2d_rejects_channel_mismatch() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::zeros(vec![1, 2, 4, 4]));
    let w = tape.constant(Tensor::zeros(vec![1, 3, 3, 3]));
    let err = tape.conv2d(x, w, None, 1, 1).unwrap_err();
    assert!(err.to_string().contains("shape mismatch"), "{err}");
    let w = tape.constant(Tensor::zeros(vec![1, 2, 7, 7]));
    assert!(tape.conv2d(x, w, None, 1, 1).is_err());
}

#[test]
fn deconv2d_output_size_and_rejection() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::full(vec![1, 1, 2, 2], 1.0));
    let w = tape.constant(Tensor::full(vec![1, 1, 4, 4], 1.0));
    let y = tape.deconv2d(x, w, None, 2, 1).unwrap();
    assert_eq!(tape.value(y).shape(), &[1, 1, 4, 4]);

    let w = tape.constant(Tensor::full(vec![1, 1, 1, 1], 1.0));
    let x1 = tape.constant(Tensor::full(vec![1, 1, 1, 1], 1.0));
    assert!(tape.deconv2d(x1, w, None, 1, 1).is_err());
}

#[test]
fn deconv_is_adjoint_of_conv() {
    for seed in 0..5 {
        let x = rand_tensor::<f64>(&[2, 3, 8, 8], seed);
        let w = rand_tensor::<f64>(&[4, 3, 4, 4], seed + 100);
        let mut tape = Tape::<f64>::new();
        let xv = tape.constant(x.clone());
        let wv = tape.constant(w);
        let cx = tape.conv2d(xv, wv, None, 2, 1).unwrap();
        let y = rand_tensor::<f64>(tape.value(cx).shape(), seed + 200);
        let yv = tape.constant(y.clone());
        let dy = tape.deconv2d(yv, wv, None, 2, 1).unwrap();
        assert_eq!(tape.value(dy).shape(), x.shape());
        let lhs: f64 = tape.value(cx).data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(tape.value(dy).data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() <= 1e-5 * lhs.abs().max(rhs.abs()), "{lhs} vs {rhs}");
    }
}

#[test]
fn conv2d_gradcheck() {
    both_precisions(|seed, f64_mode| {
        gradcheck_both!(seed, f64_mode, |T| run_check(
            vec![
                rand_tensor::<T>(&[2, 3, 8, 8], seed),
                rand_tensor::<T>(&[4, 3, 3, 3], seed + 1),
                rand_tensor::<T>(&[4], seed + 2),
            ],
            &[true, true, true],
            seed,
            |t, v| t.conv2d(v[0], v[1], Some(v[2]), 1, 1),
        ))
    });
    both_precisions(|seed, f64_mode| {
        gradcheck_both!(seed, f64_mode, |T| run_check(
            vec![rand_tensor::<T>(&[2, 2, 6, 6], seed), rand_tensor::<T>(&[3, 2, 1, 1], seed + 1)],
            &[true, true],
            seed,
            |t, v| t.conv2d(v[0], v[1], None, 1, 0),
        ))
    });
}

#[test]
fn strided_conv2d_gradcheck() {
    both_precisions(|seed, f64_mode| {
        gradcheck_both!(seed, f64_mode, |T| run_check(
            vec![
                rand_tensor::<T>(&[2, 3, 8, 8], seed),
                rand_tensor::<T>(&[4, 3, 3, 3], seed + 1),
                rand_tensor::<T>(&[4], seed + 2),
            ],
            &[true, true, true],
            seed,
            |t, v| t.conv2d(v[0], v[1], Some(v[2]), 2, 1),
        ))
    });
}

#[test]
fn deconv2d_gradcheck() {
    both_precisions(|seed, f64_mode| {
        gradcheck_both!(seed, f64_mode, |T| run_check(
            vec![
                rand_tensor::<T>(&[2, 3, 4, 4], seed),
                rand_tensor::<T>(&[3, 2, 4, 4], seed + 1),
                rand_tensor::<T>(&[2], seed + 2),
            ],
            &[true, true, true],
            seed,
            |t, v| t.deconv2d(v[0], v[1], Some(v[2]), 2, 1),
        ))
    });
}

#[test]
fn batch_norm_examples() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::full(vec![2, 1, 3, 3], 4.25));
    let g = tape.constant(Tensor::full(vec![1], 1.0));
    let b = tape.constant(Tensor::zeros(vec![1]));
    let (y, stats) = tape.batch_norm(x, g, b, BnMode::Train, 1e-5).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    let stats = stats.unwrap();
    assert_eq!(stats.mean, vec![4.25]);
    assert_eq!(stats.var, vec![0.0]);

    let x = tape.constant(rand_tensor::<f32>(&[4, 3, 5, 5], 9));
    let g = tape.constant(Tensor::full(vec![3], 1.0));
    let b = tape.constant(Tensor::full(vec![3], 5.0));
    let (y, _) = tape.batch_norm(x, g, b, BnMode::Train, 1e-5).unwrap();
    let v = tape.value(y).data();
    for c in 0..3 {
        let vals: Vec<f64> = (0..4).flat_map(|n| v[(n * 3 + c) * 25..(n * 3 + c + 1) * 25].to_vec()).map(f64::from).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!((mean - 5.0).abs() < 1e-5, "{mean}");
        assert!((var - 1.0).abs() < 1e-3, "{var}");
    }
}

#[test]
fn batch_norm_train_mode_needs_two_values() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::zeros(vec![1, 1, 1, 1]));
    let g = tape.constant(Tensor::full(vec![1], 1.0));
    let b = tape.constant(Tensor::zeros(vec![1]));
    assert!(tape.batch_norm(x, g, b, BnMode::Train, 1e-5).is_err());
    let (y, stats) = tape
        .batch_norm(x, g, b, BnMode::Eval { mean: &[0.0], var: &[0.0] }, 1e-5)
        .unwrap();
    assert!(stats.is_none());
    assert!(tape.value(y).is_finite());
}

#[test]
fn batch_norm_gradcheck() {
    both_precisions(|seed, f64_mode| {
        gradcheck_both!(seed, f64_mode, |T| run_check(
            vec![
                rand_tensor::<T>(&[3, 2, 4, 4], seed),
                rand_tensor::<T>(&[2], seed + 1),
                rand_tensor::<T>(&[2], seed + 2),
            ],
            &[true, true, true],
            seed,
            |t, v| Ok(t.batch_norm(v[0], v[1], v[2], BnMode::Train, 1e-5)?.0),
        ))
    });
    both_precisions(|seed, f64_mode| {
        gradcheck_both!(seed, f64_mode, |T| run_check(
            vec![
                rand_tensor::<T>(&[2, 2, 3, 3], seed),
                rand_tensor::<T>(&[2], seed + 1),
                rand_tensor::<T>(&[2], seed + 2),
            ],
            &[true, true, true],
            seed,
            |t, v| {
                let mean = [T::from_f64(0.1), T::from_f64(-0.2)];
                let var = [T::from_f64(0.5), T::from_f64(2.0)];
                Ok(t.batch_norm(v[0], v[1], v[2], BnMode::Eval { mean: &mean, var: &var }, 1e-5)?.0)
            },
        ))
    });
}

#[test]
fn pointwise_examples() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::new(vec![3], vec![-1.0, 2.0, 0.0]).unwrap());
    let r = tape.relu(x);
    assert_eq!(tape.value(r).data(), &[0.0, 2.0, 0.0]);
    let s = tape.sigmoid(x);
    assert_eq!(tape.value(s).data()[2], 0.5);

    let big = tape.constant(Tensor::new(vec![2], vec![-1e3, 1e3]).unwrap());
    let s = tape.sigmoid(big);
    assert!(tape.value(s).is_finite());
    let l = tape.ln_clamped(s, 1e-7);
    assert!(tape.value(l).is_finite());
}

#[test]
fn concat_shapes_and_rejection() {
    let mut tape = Tape::<f32>::new();
    let a = tape.constant(Tensor::zeros(vec![2, 64, 64, 64]));
    let b = tape.constant(Tensor::zeros(vec![2, 9, 64, 64]));
    let c = tape.concat_channels(&[a, b]).unwrap();
    assert_eq!(tape.value(c).shape(), &[2, 73, 64, 64]);
    let d = tape.constant(Tensor::zeros(vec![2, 9, 32, 32]));
    assert!(tape.concat_channels(&[a, d]).is_err());
}

#[test]
fn pointwise_and_structural_gradchecks() {
    both_precisions(|seed, f64_mode| {
        gradcheck_both!(seed, f64_mode, |T| {
            let a = rand_tensor::<T>(&[2, 3, 4, 4], seed);
            let b = rand_tensor::<T>(&[2, 3, 4, 4], seed + 7);
            let c = rand_tensor::<T>(&[2, 2, 4, 4], seed + 8);
            run_check(vec![a.clone()], &[true], seed, |t, v| Ok(t.relu(v[0])));
            run_check(vec![a.clone()], &[true], seed, |t, v| Ok(t.leaky_relu(v[0], 0.2)));
            run_check(vec![a.map(|x| x * T::from_f64(4.0))], &[true], seed, |t, v| Ok(t.sigmoid(v[0])));
            run_check(vec![a.clone(), b.clone()], &[true, true], seed, |t, v| t.add(v[0], v[1]));
            run_check(vec![a.clone(), b.clone()], &[true, true], seed, |t, v| t.sub(v[0], v[1]));
            run_check(vec![a.clone(), b.clone()], &[true, true], seed, |t, v| t.mul(v[0], v[1]));
            run_check(vec![a.clone()], &[true], seed, |t, v| Ok(t.affine(v[0], -1.5, 0.25)));
            run_check(vec![a.clone(), c.clone()], &[true, true], seed, |t, v| t.concat_channels(&[v[0], v[1]]));
            run_check(vec![a.clone()], &[true], seed, |t, v| t.downsample_nearest(v[0], 2));
            run_check(vec![a.clone()], &[true], seed, |t, v| t.upsample_nearest(v[0], 2));
            run_check(vec![a.clone(), b.clone()], &[true, true], seed, |t, v| t.mse_loss(v[0], v[1]));
            run_check(vec![a.clone()], &[true], seed, |t, v| Ok(t.sum(v[0])));
            run_check(vec![a.clone()], &[true], seed, |t, v| Ok(t.mean(v[0])));
            let pos = a.map(|x| x.abs() + T::from_f64(0.1));
            run_check(vec![pos], &[true], seed, |t, v| Ok(t.ln_clamped(v[0], 1e-7)));
        })
    });
}

#[test]
fn nearest_rescaling_examples() {
    let mut tape = Tape::<f32>::new();
    let c = tape.constant(Tensor::full(vec![1, 1, 4, 4], 0.3));
    let d = tape.downsample_nearest(c, 2).unwrap();
    let u = tape.upsample_nearest(d, 2).unwrap();
    assert_eq!(tape.value(u), tape.value(c));

    let x = tape.constant(Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let u = tape.upsample_nearest(x, 2).unwrap();
    assert_eq!(
        tape.value(u).data(),
        &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0]
    );
    let odd = tape.constant(Tensor::zeros(vec![1, 1, 5, 4]));
    assert!(tape.downsample_nearest(odd, 2).is_err());
    assert!(tape.upsample_nearest(odd, 1).is_err());
}

#[test]
fn mse_examples() {
    let mut tape = Tape::<f32>::new();
    let a = rand_tensor::<f32>(&[2, 3, 4, 4], 3);
    let av = tape.constant(a.clone());
    let z = tape.mse_loss(av, av).unwrap();
    assert_eq!(tape.value(z).item().unwrap(), 0.0);

    let tgt = tape.constant(Tensor::zeros(vec![1, 1, 4, 4]));
    let pred = tape.constant(Tensor::full(vec![1, 1, 4, 4], 0.1));
    let l = tape.mse_loss(pred, tgt).unwrap();
    assert!((tape.value(l).item().unwrap() - 0.01).abs() < 1e-8);

    let other = tape.constant(Tensor::zeros(vec![1, 1, 4, 5]));
    assert!(tape.mse_loss(pred, other).is_err());
}

#[test]
fn backward_examples() {
    let mut tape = Tape::<f32>::new();
    let x = tape.param(rand_tensor::<f32>(&[2, 3, 5], 1));
    let s = tape.sum(x);
    tape.backward(s).unwrap();
    assert!(tape.grad(x).unwrap().data().iter().all(|&g| g == 1.0));
    tape.backward(s).unwrap();
    assert!(tape.grad(x).unwrap().data().iter().all(|&g| g == 2.0));
    assert!(tape.backward(x).is_err());

    let mut tape = Tape::<f32>::new();
    let x = tape.param(Tensor::new(vec![1], vec![2.0]).unwrap());
    let zero = tape.constant(Tensor::zeros(vec![1]));
    let l = tape.mse_loss(x, zero).unwrap();
    tape.backward(l).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[4.0]);
}

#[test]
fn constants_receive_no_gradient() {
    let mut tape = Tape::<f32>::new();
    let x = tape.param(rand_tensor::<f32>(&[1, 1, 2, 2], 2));
    let c = tape.constant(rand_tensor::<f32>(&[1, 1, 2, 2], 3));
    let y = tape.mul(x, c).unwrap();
    let s = tape.sum(y);
    tape.backward(s).unwrap();
    assert!(tape.grad(c).is_none());
    assert_eq!(tape.grad(x).unwrap().data(), tape.value(c).data());
}

#[test]
fn injected_fault_is_detected() {
    let x = rand_tensor::<f64>(&[1, 2, 4, 4], 5);
    let clean = check(&[x.clone()], &[true], |t, v| Ok(t.sigmoid(v[0])), &GradCheckOptions::for_element::<f64>(1)).unwrap();
    assert!(clean.passes(1e-6));
    let faulty = check(
        &[x],
        &[true],
        |t, v| {
            t.inject_fault(OpKind::Sigmoid);
            Ok(t.sigmoid(v[0]))
        },
        &GradCheckOptions::for_element::<f64>(1),
    )
    .unwrap();
    assert!(!faulty.passes(1e-3), "{faulty:?}");
}

#[test]
fn forward_is_deterministic() {
    let run = || {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(rand_tensor(&[2, 3, 8, 8], 11));
        let w = tape.constant(rand_tensor(&[4, 3, 3, 3], 12));
        let y = tape.conv2d(x, w, None, 1, 1).unwrap();
        tape.value(y).clone()
    };
    assert_eq!(run(), run());
}

proptest! {
    #[test]
    fn ops_stay_finite_for_bounded_inputs(vals in proptest::collection::vec(-1e3f32..1e3, 16)) {
        let mut tape = Tape::<f32>::new();
        let x = tape.param(Tensor::new(vec![1, 1, 4, 4], vals).unwrap());
        let w = tape.constant(Tensor::full(vec![1, 1, 3, 3], 0.5));
        let g = tape.constant(Tensor::full(vec![1], 1.0));
        let b = tape.constant(Tensor::zeros(vec![1]));
        let c = tape.conv2d(x, w, None, 1, 1).unwrap();
        let (n, _) = tape.batch_norm(c, g, b, BnMode::Train, 1e-5).unwrap();
        let s = tape.sigmoid(n);
        let l = tape.ln_clamped(s, 1e-7);
        let r = tape.relu(l);
        let d = tape.downsample_nearest(r, 2).unwrap();
        let u = tape.upsample_nearest(d, 2).unwrap();
        let m = tape.mean(u);
        prop_assert!(tape.value(m).is_finite());
        tape.backward(m).unwrap();
        prop_assert!(tape.grad(x).unwrap().is_finite());
    }

    #[test]
    fn downsample_inverts_upsample(vals in proptest::collection::vec(-10f32..10.0, 2 * 9), f in 2usize..4) {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::new(vec![1, 2, 3, 3], vals).unwrap());
        let u = tape.upsample_nearest(x, f).unwrap();
        let d = tape.downsample_nearest(u, f).unwrap();
        prop_assert_eq!(tape.value(d), tape.value(x));
    }
}
