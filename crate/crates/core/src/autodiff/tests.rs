use std::rc::Rc;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn random_plane(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Plane {
    Plane::from_fn(rows, cols, |_, _| rng.gen_range(lo..hi))
}

/// Central-difference gradient of a scalar function of one plane.
fn finite_difference(x: &Plane, step: f64, f: impl Fn(&Plane) -> f64) -> Plane {
    let mut g = Plane::zeros(x.rows(), x.cols());
    for i in 0..x.len() {
        let mut xp = x.clone();
        xp.as_mut_slice()[i] += step;
        let mut xm = x.clone();
        xm.as_mut_slice()[i] -= step;
        g.as_mut_slice()[i] = (f(&xp) - f(&xm)) / (2.0 * step);
    }
    g
}

fn rel_err(a: &Plane, b: &Plane) -> f64 {
    a.max_abs_diff(b) / a.max_abs().max(b.max_abs()).max(1e-300)
}

/// Checks d(sum(w * f(x)))/dx against central differences for a unary builder.
fn check_unary(x: &Plane, build: impl Fn(&Tape, &Var) -> Var) {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let out_shape = {
        let t = Tape::new();
        build(&t, &t.constant(x.clone())).shape()
    };
    let weights = random_plane(&mut rng, out_shape.0, out_shape.1, 0.5, 1.5);
    let eval = |p: &Plane| {
        let t = Tape::new();
        let v = t.constant(p.clone());
        let y = build(&t, &v);
        y.value().zip_map(&weights, |a, b| a * b).sum()
    };
    let t = Tape::new();
    let v = t.param(x.clone());
    let y = build(&t, &v);
    let w = t.constant(weights.clone());
    let root = t.sum(&t.mul(&y, &w).unwrap()).unwrap();
    let analytic = t.backward(&root).unwrap().wrt(&v);
    let numeric = finite_difference(x, 1e-6, eval);
    assert!(
        rel_err(&analytic, &numeric) < 1e-5,
        "analytic {analytic:?} numeric {numeric:?}"
    );
}

#[test]
fn conv2d_identity_kernel() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random_plane(&mut rng, 5, 6, -3.0, 3.0);
    let t = Tape::new();
    let xv = t.constant(x.clone());
    let k = t.param(Plane::scalar(1.0));
    let y = t.conv2d(&xv, &k, Padding::Reflect).unwrap();
    assert_eq!(y.value(), &x);
    let gout = random_plane(&mut rng, 5, 6, -1.0, 1.0);
    let root = t
        .sum(&t.mul(&y, &t.constant(gout.clone())).unwrap())
        .unwrap();
    let gk = t.backward(&root).unwrap().wrt(&k);
    let expected: f64 = gout
        .as_slice()
        .iter()
        .zip(x.as_slice())
        .map(|(a, b)| a * b)
        .sum();
    assert!((gk.item() - expected).abs() < 1e-12);
}

#[test]
fn conv2d_constant_fixed_point() {
    let x = Plane::filled(3, 3, 1.0);
    let k = Plane::filled(3, 3, 1.0 / 9.0);
    let y = kernels::conv2d(&x, &k, Padding::Reflect).unwrap();
    for &v in y.as_slice() {
        assert!((v - 1.0).abs() < 1e-15);
    }
}

#[test]
fn conv2d_kernel_gradient_matches_finite_difference() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random_plane(&mut rng, 8, 8, 0.0, 1.0);
    let k0 = random_plane(&mut rng, 3, 3, -1.0, 1.0);
    for padding in [Padding::Reflect, Padding::Zero] {
        let t = Tape::new();
        let xv = t.constant(x.clone());
        let k = t.param(k0.clone());
        let root = t.sum(&t.conv2d(&xv, &k, padding).unwrap()).unwrap();
        let analytic = t.backward(&root).unwrap().wrt(&k);
        let numeric = finite_difference(&k0, 1e-6, |kp| {
            kernels::conv2d(&x, kp, padding).unwrap().sum()
        });
        assert!(rel_err(&analytic, &numeric) < 1e-6, "{padding:?}");
    }
}

#[test]
fn conv2d_input_gradient_matches_finite_difference() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random_plane(&mut rng, 6, 7, 0.0, 1.0);
    let k = random_plane(&mut rng, 5, 3, -1.0, 1.0);
    for padding in [Padding::Reflect, Padding::Zero] {
        check_unary(&x, |t, v| {
            t.conv2d(v, &t.constant(k.clone()), padding).unwrap()
        });
    }
}

#[test]
fn conv2d_errors() {
    let t = Tape::new();
    let x = t.constant(Plane::zeros(4, 4));
    let even = t.constant(Plane::zeros(2, 2));
    assert!(matches!(
        t.conv2d(&x, &even, Padding::Reflect),
        Err(Error::InvalidArgument(_))
    ));
    let big = t.constant(Plane::zeros(9, 9));
    assert!(matches!(
        t.conv2d(&x, &big, Padding::Reflect),
        Err(Error::InvalidArgument(_))
    ));
}

#[test]
fn downsample_examples() {
    let t = Tape::new();
    let c = t.constant(Plane::filled(4, 4, 7.5));
    let d = t.downsample2x(&c, None).unwrap();
    assert_eq!(d.shape(), (2, 2));
    assert!(d.value().as_slice().iter().all(|&v| v == 7.5));

    let x = t.param(Plane::from_rows(&[vec![1.0, 2.0], vec![3.0, 6.0]]).unwrap());
    let d = t.downsample2x(&x, None).unwrap();
    assert_eq!(d.item(), 3.0);
    let g = t.backward(&t.sum(&d).unwrap()).unwrap().wrt(&x);
    assert!(g.as_slice().iter().all(|&v| v == 0.25));

    let tiny = t.constant(Plane::zeros(1, 4));
    assert!(t.downsample2x(&tiny, None).is_err());
}

#[test]
fn downsample_with_kernel_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random_plane(&mut rng, 9, 7, 0.0, 1.0);
    let k = Plane::filled(3, 3, 1.0 / 9.0);
    check_unary(&x, |t, v| {
        t.downsample2x(v, Some(&t.constant(k.clone()))).unwrap()
    });
    let out = {
        let t = Tape::new();
        t.downsample2x(&t.constant(x.clone()), Some(&t.constant(k.clone())))
            .unwrap()
            .shape()
    };
    assert_eq!(out, (4, 3));
}

#[test]
fn relu_and_clip_conventions() {
    let t = Tape::new();
    let x = t.param(Plane::from_rows(&[vec![-1.0, 1.0, 0.0]]).unwrap());
    let g = t
        .backward(&t.sum(&t.relu(&x).unwrap()).unwrap())
        .unwrap()
        .wrt(&x);
    assert_eq!(g.as_slice(), &[0.0, 1.0, 0.0]);

    let t = Tape::new();
    let x = t.param(Plane::from_rows(&[vec![105.0, 50.0, 100.0, 0.0, -3.0]]).unwrap());
    let y = t.clip(&x, 0.0, 100.0).unwrap();
    assert_eq!(y.value().as_slice(), &[100.0, 50.0, 100.0, 0.0, 0.0]);
    let g = t.backward(&t.sum(&y).unwrap()).unwrap().wrt(&x);
    assert_eq!(g.as_slice(), &[0.0, 1.0, 1.0, 1.0, 0.0]);
}

#[test]
fn log2_1p_derivative_at_zero() {
    let t = Tape::new();
    let x = t.param(Plane::scalar(0.0));
    let y = t.log2_1p_ratio(&x, &t.scalar(1.0)).unwrap();
    let g = t.backward(&y).unwrap().wrt(&x).item();
    assert!((g - 1.0 / std::f64::consts::LN_2).abs() < 1e-12);
}

#[test]
fn min_max_ties_go_to_first_operand() {
    let t = Tape::new();
    let a = t.param(Plane::scalar(2.0));
    let b = t.param(Plane::scalar(2.0));
    let m = t.min(&a, &b).unwrap();
    let g = t.backward(&m).unwrap();
    assert_eq!((g.wrt(&a).item(), g.wrt(&b).item()), (1.0, 0.0));
    let m = t.max(&a, &b).unwrap();
    let g = t.backward(&m).unwrap();
    assert_eq!((g.wrt(&a).item(), g.wrt(&b).item()), (1.0, 0.0));
}

#[test]
fn elementwise_errors() {
    let t = Tape::new();
    let a = t.constant(Plane::zeros(2, 2));
    let b = t.constant(Plane::zeros(3, 2));
    assert!(matches!(t.add(&a, &b), Err(Error::InvalidArgument(_))));
    let one = t.constant(Plane::filled(2, 2, 1.0));
    assert!(matches!(t.div(&one, &a), Err(Error::NumericDomain(_))));
    let s = t.div_stable(&one, &a, 1e-15).unwrap();
    assert!(s.value().as_slice().iter().all(|&v| v == 0.0));
}

#[test]
fn every_elementwise_primitive_matches_finite_difference() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    // Keep samples away from the kinks at 0 and at the clip bounds.
    let x = Plane::from_fn(4, 5, |_, _| {
        let v: f64 = rng.gen_range(0.2..2.0);
        if rng.gen_bool(0.5) {
            v
        } else {
            -v
        }
    });
    let pos = x.map(f64::abs);
    let other = random_plane(&mut rng, 4, 5, 0.5, 2.0).map(|v| v + 0.05);

    check_unary(&x, |t, v| t.relu(v).unwrap());
    check_unary(&x, |t, v| t.abs(v).unwrap());
    check_unary(&x, |t, v| t.cube(v).unwrap());
    check_unary(&pos, |t, v| t.cbrt(v).unwrap());
    check_unary(&x, |t, v| t.exp(v).unwrap());
    check_unary(&x, |t, v| t.clip(v, -1.0, 1.0).unwrap());
    check_unary(&x, |t, v| t.min_scalar(v, 0.1).unwrap());
    check_unary(&x, |t, v| t.max_scalar(v, 0.1).unwrap());
    check_unary(&x, |t, v| t.scale(v, -2.5).unwrap());
    check_unary(&x, |t, v| t.add_scalar(v, 4.0).unwrap());
    check_unary(&x, |t, v| t.square(v).unwrap());

    let o = other.clone();
    check_unary(&x, |t, v| t.add(v, &t.constant(o.clone())).unwrap());
    check_unary(&x, |t, v| t.sub(&t.constant(o.clone()), v).unwrap());
    check_unary(&x, |t, v| t.mul(v, &t.constant(o.clone())).unwrap());
    check_unary(&x, |t, v| t.div(v, &t.constant(o.clone())).unwrap());
    check_unary(&other, |t, v| t.div(&t.constant(x.clone()), v).unwrap());
    check_unary(&other, |t, v| {
        t.div_stable(&t.constant(x.clone()), v, 1e-3).unwrap()
    });
    check_unary(&x, |t, v| t.min(v, &t.constant(o.clone())).unwrap());
    check_unary(&x, |t, v| t.max(&t.constant(o.clone()), v).unwrap());
    check_unary(&pos, |t, v| {
        t.log2_1p_ratio(v, &t.constant(o.clone())).unwrap()
    });
    check_unary(&other, |t, v| {
        t.log2_1p_ratio(&t.constant(pos.clone()), v).unwrap()
    });
    // scalar broadcast on either side
    check_unary(&x, |t, v| t.mul(v, &t.scalar(3.0)).unwrap());
    check_unary(&Plane::scalar(0.7), |t, v| {
        t.mul(&t.constant(o.clone()), v).unwrap()
    });
}

#[test]
fn structural_primitives_match_finite_difference() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = random_plane(&mut rng, 7, 9, -1.0, 1.0);
    check_unary(&x, |t, v| t.decimate2(v).unwrap());
    check_unary(&x, |t, v| t.mean_pool2(v).unwrap());
    for axis in [Axis::Rows, Axis::Cols] {
        for boundary in [Boundary::Reflect, Boundary::Periodic] {
            let fd = FilterDecimate {
                taps: vec![0.3, -0.7, 1.1, 0.2],
                offset: -1,
                axis,
                boundary,
            };
            check_unary(&x, |t, v| t.filter_decimate(v, &fd).unwrap());
        }
    }
    let mask: Rc<Vec<bool>> = Rc::new((0..x.len()).map(|i| i % 3 == 0).collect());
    let other = random_plane(&mut rng, 7, 9, -1.0, 1.0);
    check_unary(&x, |t, v| {
        t.select(Rc::clone(&mask), v, &t.constant(other.clone()))
            .unwrap()
    });
    check_unary(&x, |t, v| {
        t.select(Rc::clone(&mask), &t.constant(other.clone()), v)
            .unwrap()
    });
    check_unary(&x, |t, v| {
        t.sum_region(
            v,
            RectRegion {
                top: 1,
                left: 2,
                rows: 3,
                cols: 4,
            },
        )
        .unwrap()
    });
}

#[test]
fn reduce_sum_examples() {
    let t = Tape::new();
    let ones = t.constant(Plane::filled(2, 2, 1.0));
    assert_eq!(t.sum(&ones).unwrap().item(), 4.0);

    let x = t.param(Plane::filled(4, 4, 1.0));
    let s = t
        .sum_region(
            &x,
            RectRegion {
                top: 1,
                left: 1,
                rows: 2,
                cols: 2,
            },
        )
        .unwrap();
    assert_eq!(s.item(), 4.0);
    let g = t.backward(&s).unwrap().wrt(&x);
    for r in 0..4 {
        for c in 0..4 {
            let inside = (1..3).contains(&r) && (1..3).contains(&c);
            assert_eq!(g.get(r, c), if inside { 1.0 } else { 0.0 });
        }
    }
    assert!(t
        .sum_region(
            &x,
            RectRegion {
                top: 0,
                left: 0,
                rows: 0,
                cols: 2
            }
        )
        .is_err());
    assert!(t
        .sum_region(
            &x,
            RectRegion {
                top: 3,
                left: 0,
                rows: 2,
                cols: 2
            }
        )
        .is_err());

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let p = random_plane(&mut rng, 31, 17, -5.0, 5.0);
    let mut naive = 0.0;
    for r in 0..31 {
        for c in 0..17 {
            naive += p.get(r, c);
        }
    }
    let got = t.sum(&t.constant(p)).unwrap().item();
    assert!((got - naive).abs() <= 1e-12 * naive.abs().max(1.0));
}

#[test]
fn backward_examples_and_errors() {
    let t = Tape::new();
    let p = t.param(Plane::scalar(3.0));
    assert_eq!(t.backward(&p).unwrap().wrt(&p).item(), 1.0);

    let a = t.param(Plane::filled(2, 2, 1.0));
    let b = t.param(Plane::filled(2, 2, 2.0));
    let root = t.sum(&t.square(&a).unwrap()).unwrap();
    let g = t.backward(&root).unwrap();
    assert!(g.wrt(&b).as_slice().iter().all(|&v| v == 0.0));
    assert!(g.wrt(&a).as_slice().iter().all(|&v| v == 2.0));

    assert!(matches!(t.backward(&a), Err(Error::InvalidArgument(_))));
    let c = t.scalar(1.0);
    assert!(matches!(t.backward(&c), Err(Error::InvalidState(_))));
    let other = Tape::new();
    let q = other.param(Plane::scalar(1.0));
    assert!(matches!(t.backward(&q), Err(Error::InvalidState(_))));
    assert!(matches!(t.add(&q, &p), Err(Error::InvalidState(_))));
}

#[test]
fn backward_is_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random_plane(&mut rng, 16, 16, 0.0, 255.0);
        let t = Tape::new();
        let k = t.param(random_plane(&mut rng, 3, 3, 0.0, 0.2));
        let y = t.conv2d(&t.constant(x), &k, Padding::Reflect).unwrap();
        let z = t
            .log2_1p_ratio(&t.square(&y).unwrap(), &t.scalar(2.0))
            .unwrap();
        let root = t.sum(&z).unwrap();
        (root.item(), t.backward(&root).unwrap().wrt(&k))
    };
    let (v1, g1) = run();
    let (v2, g2) = run();
    assert_eq!(v1.to_bits(), v2.to_bits());
    assert!(g1
        .as_slice()
        .iter()
        .zip(g2.as_slice())
        .all(|(a, b)| a.to_bits() == b.to_bits()));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn backward_is_linear(seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x0 = random_plane(&mut rng, 6, 6, -1.0, 1.0);
        let k = random_plane(&mut rng, 3, 3, -1.0, 1.0);
        let grad = |wa: f64, wb: f64| {
            let t = Tape::new();
            let x = t.param(x0.clone());
            let f = t.sum(&t.cube(&x).unwrap()).unwrap();
            let g = t.sum(&t.conv2d(&x, &t.constant(k.clone()), Padding::Reflect).unwrap()).unwrap();
            let root = t.add(&t.scale(&f, wa).unwrap(), &t.scale(&g, wb).unwrap()).unwrap();
            t.backward(&root).unwrap().wrt(&x)
        };
        let combined = grad(a, b);
        let split = grad(1.0, 0.0).scale(a).zip_map(&grad(0.0, 1.0).scale(b), |p, q| p + q);
        prop_assert!(combined.max_abs_diff(&split) <= 1e-9 * (1.0 + split.max_abs()));
    }

    #[test]
    fn sum_to_one_kernels_preserve_constants(
        seed in any::<u64>(),
        c in -100.0f64..300.0,
        half in 0usize..4,
        rows in 8usize..14,
        cols in 8usize..14,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = 2 * half + 1;
        let raw = random_plane(&mut rng, k, k, -1.0, 2.0);
        let s = raw.sum();
        prop_assume!(s.abs() > 0.1);
        let kernel = raw.scale(1.0 / s);
        let y = kernels::conv2d(&Plane::filled(rows, cols, c), &kernel, Padding::Reflect).unwrap();
        for &v in y.as_slice() {
            prop_assert!((v - c).abs() <= 1e-9 * (1.0 + c.abs()));
        }
    }
}
