use nalgebra::{DMatrix, DVector};
use pie_h2::pi_op::{invert_pi, Dims, PiOperator, Rl2Function};
use pie_h2::poly::{Interval, PolyMatrix, Vars};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_poly(rng: &mut ChaCha8Rng, rows: usize, cols: usize, vars: Vars, deg: u32, d: Interval) -> PolyMatrix {
    let mut terms = Vec::new();
    for i in 0..=deg {
        let jmax = if vars == Vars::STheta { deg - i } else { 0 };
        for j in 0..=jmax {
            if rng.gen_bool(0.6) {
                let m = DMatrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0));
                terms.push(((i, j), m));
            }
        }
    }
    PolyMatrix::from_terms(rows, cols, vars, d, terms).unwrap()
}

fn rand_op(rng: &mut ChaCha8Rng, input: Dims, output: Dims, d: Interval) -> PiOperator {
    let p = DMatrix::from_fn(output.m, input.m, |_, _| rng.gen_range(-1.0..1.0));
    PiOperator::new(
        d,
        p,
        rand_poly(rng, output.m, input.n, Vars::S, 2, d),
        rand_poly(rng, output.n, input.m, Vars::S, 2, d),
        rand_poly(rng, output.n, input.n, Vars::S, 2, d),
        rand_poly(rng, output.n, input.n, Vars::STheta, 2, d),
        rand_poly(rng, output.n, input.n, Vars::STheta, 2, d),
    )
    .unwrap()
}

fn rand_dims(rng: &mut ChaCha8Rng) -> Dims {
    Dims::new(rng.gen_range(0..3), rng.gen_range(1..3))
}

fn rand_domain(rng: &mut ChaCha8Rng) -> Interval {
    let a = rng.gen_range(-1.0..0.5);
    Interval::new(a, a + rng.gen_range(0.5..2.0)).unwrap()
}

fn max_diff(f: &Rl2Function, g: &Rl2Function) -> f64 {
    let d = f.domain();
    let mut worst = (&f.finite - &g.finite).amax();
    for k in 0..=20 {
        let s = d.a() + d.len() * k as f64 / 20.0;
        worst = worst.max((f.eval(s) - g.eval(s)).amax());
    }
    worst
}

fn scale_of(f: &Rl2Function) -> f64 {
    let d = f.domain();
    let mut m = f.finite.amax();
    for k in 0..=20 {
        m = m.max(f.eval(d.a() + d.len() * k as f64 / 20.0).amax());
    }
    m.max(1.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn composition_matches_sequential_application(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = rand_domain(&mut rng);
        let (di, dm, dout) = (rand_dims(&mut rng), rand_dims(&mut rng), rand_dims(&mut rng));
        let b = rand_op(&mut rng, di, dm, d);
        let a = rand_op(&mut rng, dm, dout, d);
        let f = Rl2Function::random(&mut rng, di, 3, d);
        let lhs = a.compose(&b).unwrap().apply(&f).unwrap();
        let rhs = a.apply(&b.apply(&f).unwrap()).unwrap();
        prop_assert!(max_diff(&lhs, &rhs) <= 1e-9 * scale_of(&rhs), "diff {}", max_diff(&lhs, &rhs));
    }

    #[test]
    fn adjoint_satisfies_inner_product_identity(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = rand_domain(&mut rng);
        let (di, dout) = (rand_dims(&mut rng), rand_dims(&mut rng));
        let a = rand_op(&mut rng, di, dout, d);
        let f = Rl2Function::random(&mut rng, di, 3, d);
        let g = Rl2Function::random(&mut rng, dout, 3, d);
        let lhs = g.inner(&a.apply(&f).unwrap());
        let rhs = a.adjoint().apply(&g).unwrap().inner(&f);
        prop_assert!((lhs - rhs).abs() <= 1e-9 * (1.0 + lhs.abs()), "{lhs} vs {rhs}");
        prop_assert_eq!(a.adjoint().adjoint(), a);
    }

    #[test]
    fn adjoint_of_composition_reverses_order(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = rand_domain(&mut rng);
        let (di, dm, dout) = (rand_dims(&mut rng), rand_dims(&mut rng), rand_dims(&mut rng));
        let b = rand_op(&mut rng, di, dm, d);
        let a = rand_op(&mut rng, dm, dout, d);
        let lhs = a.compose(&b).unwrap().adjoint();
        let rhs = b.adjoint().compose(&a.adjoint()).unwrap();
        let diff = lhs.sub(&rhs).unwrap().max_abs();
        prop_assert!(diff <= 1e-9 * lhs.max_abs().max(1.0), "diff {diff}");
    }

    #[test]
    fn concatenation_acts_blockwise(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = rand_domain(&mut rng);
        let (d1, d2, o1, o2) = (rand_dims(&mut rng), rand_dims(&mut rng), rand_dims(&mut rng), rand_dims(&mut rng));
        let a = rand_op(&mut rng, d1, o1, d);
        let a2 = rand_op(&mut rng, d1, o2, d);
        let b = rand_op(&mut rng, d2, o1, d);
        let f1 = Rl2Function::random(&mut rng, d1, 3, d);
        let f2 = Rl2Function::random(&mut rng, d2, 3, d);

        // vcat: outputs stacked
        let v = a.vcat(&a2).unwrap().apply(&f1).unwrap();
        let (y1, y2) = (a.apply(&f1).unwrap(), a2.apply(&f1).unwrap());
        let mut fin = y1.finite.as_slice().to_vec();
        fin.extend_from_slice(y2.finite.as_slice());
        let stacked = Rl2Function::new(DVector::from_vec(fin), y1.dist.vcat(&y2.dist).unwrap()).unwrap();
        prop_assert!(max_diff(&v, &stacked) <= 1e-10 * scale_of(&stacked));

        // hcat: inputs stacked, outputs summed
        let mut fin = f1.finite.as_slice().to_vec();
        fin.extend_from_slice(f2.finite.as_slice());
        let joint = Rl2Function::new(DVector::from_vec(fin), f1.dist.vcat(&f2.dist).unwrap()).unwrap();
        let h = a.hcat(&b).unwrap().apply(&joint).unwrap();
        let z1 = a.apply(&f1).unwrap();
        let z2 = b.apply(&f2).unwrap();
        let sum = Rl2Function::new(&z1.finite + &z2.finite, z1.dist.add(&z2.dist).unwrap()).unwrap();
        prop_assert!(max_diff(&h, &sum) <= 1e-10 * scale_of(&sum));

        let bd = a.blockdiag(&b).unwrap();
        prop_assert_eq!(bd.in_dims(), Dims::new(d1.m + d2.m, d1.n + d2.n));
        prop_assert_eq!(bd.out_dims(), Dims::new(o1.m + o1.m, o1.n + o1.n));
    }

    #[test]
    fn quadrature_application_matches_exact(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = rand_domain(&mut rng);
        let (di, dout) = (rand_dims(&mut rng), rand_dims(&mut rng));
        let a = rand_op(&mut rng, di, dout, d);
        let f = Rl2Function::random(&mut rng, di, 4, d);
        let exact = a.apply(&f).unwrap();
        let pts: Vec<f64> = (0..=10).map(|k| d.a() + d.len() * k as f64 / 10.0).collect();
        let (fin, dist) = a.apply_fn(&f.finite, &|s: f64| f.eval(s), &pts);
        let scale = scale_of(&exact);
        prop_assert!((fin - &exact.finite).amax() <= 1e-10 * scale);
        for (s, v) in pts.iter().zip(dist) {
            prop_assert!((v - exact.eval(*s)).amax() <= 1e-10 * scale);
        }
    }
}

#[test]
fn operator_json_round_trip_is_bit_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let d = Interval::new(0.0, 1.0).unwrap();
    let a = rand_op(&mut rng, Dims::new(2, 2), Dims::new(1, 2), d);
    let text = a.to_json();
    let back = PiOperator::from_json(&text).unwrap();
    assert_eq!(a, back);
}

#[test]
fn inverse_of_multiplier() {
    let d = Interval::unit();
    let r0 = PolyMatrix::scalar(Vars::S, d, &[(0, 0, 1.0), (1, 0, 1.0)]).unwrap();
    let op = PiOperator::multiplier(r0).unwrap();
    let inv = invert_pi(&op, 8, 1e-4).unwrap();
    assert!(inv.residual <= 1e-4);
    for &s in &[0.0, 0.3, 0.9] {
        let v = inv.op.r0().eval_s(s).unwrap()[(0, 0)];
        assert!((v - 1.0 / (1.0 + s)).abs() < 1e-4, "{v}");
    }
    let k = inv.op.r1().eval(0.7, 0.2).unwrap()[(0, 0)].abs() + inv.op.r2().eval(0.2, 0.7).unwrap()[(0, 0)].abs();
    assert!(k < 1e-3, "{k}");
}

#[test]
fn inverse_of_coupled_operator() {
    let d = Interval::unit();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let k = rand_op(&mut rng, Dims::new(1, 2), Dims::new(1, 2), d);
    // I + K*K is self-adjoint and coercive
    let op = PiOperator::identity(d, Dims::new(1, 2)).add(&k.adjoint().compose(&k).unwrap()).unwrap();
    let inv = invert_pi(&op, 8, 1e-4).unwrap();
    assert!(inv.residual <= 1e-4, "{}", inv.residual);
    assert!(inv.op.asymmetry() < 1e-9);
}

#[test]
fn inverse_rejects_indefinite_operator() {
    let d = Interval::unit();
    let op = PiOperator::identity(d, Dims::new(0, 1)).scale(-1.0);
    assert!(invert_pi(&op, 8, 1e-4).is_err());
}
