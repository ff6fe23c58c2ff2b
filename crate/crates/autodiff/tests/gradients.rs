use std::rc::Rc;

use autodiff::suite::{check_ops, op_cases, random_tensor as random, Order};
use autodiff::{bilinear_sample, check_gradient, AdError, GradMode, Tape, Tensor, Var, PAD};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn every_op_matches_central_differences_over_many_seeds() {
    for r in check_ops(0, 100, Order::First).unwrap() {
        assert!(r.worst < 1e-5, "{}: worst relative error {:e}", r.name, r.worst);
    }
}

#[test]
fn every_op_has_differentiable_gradients() {
    for r in check_ops(1000, 20, Order::Second).unwrap() {
        assert!(r.worst < 1e-5, "{}: worst second-order error {:e}", r.name, r.worst);
    }
}

#[test]
fn case_list_covers_every_recorded_op() {
    let names: Vec<&str> = op_cases().iter().map(|c| c.name).collect();
    assert!(names.len() >= 25);
    for op in ["matmul_tn", "weighted_gather", "bilinear_sample:coords", "softmax", "huber"] {
        assert!(names.contains(&op), "{op}");
    }
}

#[test]
fn worked_examples() {
    let a = Var::constant(Tensor::vector(vec![1.0, 2.0]));
    let b = Var::constant(Tensor::vector(vec![3.0, 4.0]));
    assert_eq!(a.add(&b).unwrap().value().data(), &[4.0, 6.0]);

    let s = Var::constant(Tensor::vector(vec![0.0; 3])).softmax(0).unwrap();
    for &p in s.value().data() {
        assert!((p - 1.0 / 3.0).abs() < 1e-15);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let k = random(&[3, 3], &mut rng);
    let eye = Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
    let prod = Var::constant(eye).matmul(&Var::constant(k.clone())).unwrap();
    assert_eq!(prod.value(), &k);

    let tape = Tape::new();
    let x = tape.leaf(Tensor::scalar(3.0));
    let y = x.square().unwrap();
    assert_eq!(tape.gradients(&y, &[&x]).unwrap()[0].item(), 6.0);

    let z = tape.leaf(random(&[5], &mut rng));
    let total = z.softmax(0).unwrap().sum().unwrap();
    let g = tape.gradients(&total, &[&z]).unwrap().remove(0);
    assert!(g.data().iter().all(|v| v.abs() < 1e-15));
}

#[test]
fn huber_gradient_at_twice_delta() {
    let eps = 0.25;
    let point = Tensor::scalar(2.0 * eps);
    let err = check_gradient(|_, x| x.huber(eps), &point, 1e-6).unwrap();
    assert!(err < 1e-8, "{err:e}");
    let tape = Tape::new();
    let x = tape.leaf(point);
    let g = tape.gradients(&x.huber(eps).unwrap(), &[&x]).unwrap();
    assert_eq!(g[0].item(), eps);
}

#[test]
fn sum_of_squares_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..10 {
        let p = random(&[7], &mut rng);
        let err = check_gradient(|_, x| x.square()?.sum(), &p, 1e-4).unwrap();
        assert!(err < 1e-8, "{err:e}");
    }
}

/// f(θ) = outer(θ - α ∇inner(θ)) with inner = ½θᵀAθ + bᵀθ and outer = ½|φ - c|².
#[test]
fn meta_gradient_matches_closed_form() {
    let n = 6;
    let alpha = 0.05;
    for seed in 0..25u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = random(&[n, n], &mut rng);
        let a = {
            // Symmetric Hessian A = M + Mᵀ.
            let mt = Var::constant(m.clone()).transpose().unwrap();
            Var::constant(m.clone()).add(&mt).unwrap()
        };
        let b = Var::constant(random(&[n, 1], &mut rng));
        let c = random(&[n, 1], &mut rng);
        let theta0 = random(&[n, 1], &mut rng);

        let tape = Tape::new();
        let theta = tape.leaf(theta0.clone());
        let inner = theta
            .transpose()
            .unwrap()
            .matmul(&a.matmul(&theta).unwrap())
            .unwrap()
            .scale(0.5)
            .unwrap()
            .add(&b.transpose().unwrap().matmul(&theta).unwrap())
            .unwrap()
            .sum()
            .unwrap();
        let g = tape.grad(&inner, &[&theta], GradMode::CreateGraph).unwrap().remove(0);
        let phi = theta.sub(&g.scale(alpha).unwrap()).unwrap();
        let outer = phi.sub(&Var::constant(c.clone())).unwrap().square().unwrap().sum().unwrap().scale(0.5).unwrap();
        let meta = tape.gradients(&outer, &[&theta]).unwrap().remove(0);

        // Closed form: (I - αA)ᵀ (φ - c) with φ = θ - α(Aθ + b).
        let av = a.value();
        let mut phi_v = vec![0.0; n];
        for i in 0..n {
            let grad_i: f64 = (0..n).map(|j| av.data()[i * n + j] * theta0.data()[j]).sum::<f64>() + b.value().data()[i];
            phi_v[i] = theta0.data()[i] - alpha * grad_i;
        }
        let resid: Vec<f64> = (0..n).map(|i| phi_v[i] - c.data()[i]).collect();
        for i in 0..n {
            let expect: f64 = (0..n)
                .map(|j| {
                    let ij = if i == j { 1.0 } else { 0.0 } - alpha * av.data()[j * n + i];
                    ij * resid[j]
                })
                .sum();
            let got = meta.data()[i];
            assert!((got - expect).abs() / expect.abs().max(1.0) < 1e-12, "seed {seed}: {got} vs {expect}");
        }
    }
}

#[test]
fn backward_leaves_forward_values_untouched() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let tape = Tape::new();
    let x = tape.leaf(random(&[4, 3], &mut rng));
    let y = x.elu().unwrap().softmax(1).unwrap().huber(0.2).unwrap().sum().unwrap();
    let before: Vec<Tensor> = (0..tape.len()).map(|i| tape.node_value(i).unwrap()).collect();
    tape.grad(&y, &[&x], GradMode::CreateGraph).unwrap();
    tape.grad(&y, &[&x], GradMode::Plain).unwrap();
    for (i, v) in before.iter().enumerate() {
        assert_eq!(&tape.node_value(i).unwrap(), v, "node {i} changed");
    }
}

#[test]
fn error_paths() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
    let err = x.add(&Var::constant(Tensor::vector(vec![1.0, 2.0, 3.0]))).unwrap_err();
    match &err {
        AdError::ShapeMismatch { op, lhs, rhs } => {
            assert_eq!(*op, "add");
            assert_eq!(lhs, &vec![2]);
            assert_eq!(rhs, &vec![3]);
        }
        other => panic!("unexpected {other:?}"),
    }
    assert!(err.to_string().contains("add"));

    assert!(matches!(tape.grad(&x, &[&x], GradMode::Plain), Err(AdError::NotScalar(_))));

    let other = Tape::new();
    let y = other.leaf(Tensor::vector(vec![1.0, 2.0]));
    assert!(matches!(x.mul(&y), Err(AdError::ForeignTape(_))));

    // Unreachable leaf gets a zero gradient.
    let unused = tape.leaf(Tensor::vector(vec![5.0, 5.0, 5.0]));
    let loss = x.square().unwrap().sum().unwrap();
    let g = tape.gradients(&loss, &[&unused, &x]).unwrap();
    assert_eq!(g[0], Tensor::zeros(&[3]));
    assert_eq!(g[1].data(), &[2.0, 4.0]);

    assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
}

#[test]
fn bilinear_sample_examples() {
    let grid = Var::constant(Tensor::from_fn(&[5, 4, 1], |i| i as f64 * 0.5));
    let xs = Var::constant(Tensor::vector(vec![2.0, 1.5, -0.5, 3.0]));
    let ys = Var::constant(Tensor::vector(vec![3.0, 0.5, 0.0, 4.0]));
    let s = bilinear_sample(&grid, &xs, &ys).unwrap();
    let v = s.values.value().data();
    assert_eq!(v[0], (3 * 4 + 2) as f64 * 0.5);
    let mean = [1usize, 2, 5, 6].iter().map(|&i| i as f64 * 0.5).sum::<f64>() / 4.0;
    assert!((v[1] - mean).abs() < 1e-15);
    assert_eq!(v[2], 0.0);
    assert_eq!(v[3], 19.0 * 0.5, "far corner is reachable");
    assert_eq!(s.in_bounds, vec![true, true, false, true]);
}

proptest! {
    #[test]
    fn softmax_is_a_distribution(vals in prop::collection::vec(-30.0f64..30.0, 12)) {
        let x = Var::constant(Tensor::new(vec![3, 4], vals).unwrap());
        for axis in 0..2 {
            let p = x.softmax(axis).unwrap();
            prop_assert!(p.value().data().iter().all(|&v| v >= 0.0));
            let sums = p.sum_axis(axis).unwrap();
            for &s in sums.value().data() {
                prop_assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gather_scatter_are_adjoint(
        x in prop::collection::vec(-1.0f64..1.0, 5),
        y in prop::collection::vec(-1.0f64..1.0, 7),
        idx in prop::collection::vec(0u32..6, 7),
    ) {
        // <gather(x), y> == <x, scatter(y)>, with index 5 standing in for PAD.
        let map: Rc<[u32]> = idx.iter().map(|&i| if i == 5 { PAD } else { i }).collect();
        let xv = Var::constant(Tensor::vector(x.clone()));
        let yv = Var::constant(Tensor::vector(y.clone()));
        let gx = xv.gather(map.clone(), &[7]).unwrap();
        let sy = yv.scatter_add(map, &[5]).unwrap();
        let lhs: f64 = gx.value().data().iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = sy.value().data().iter().zip(&x).map(|(a, b)| a * b).sum();
        prop_assert!((lhs - rhs).abs() < 1e-12);
    }
}
