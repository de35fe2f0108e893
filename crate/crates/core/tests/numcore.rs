use std::sync::Arc;

use m2repa::numcore::{finite_diff_check, finite_diff_check_many, Graph, NumError, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn t64(shape: &[usize], v: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape, v).unwrap()
}

#[test]
fn elementwise_examples() {
    let mut g = Graph::<f32>::new();
    let a = g.constant(Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap()).unwrap();
    let b = g.constant(Tensor::from_f64(&[2], &[3.0, 4.0]).unwrap()).unwrap();
    let s = g.add(a, b).unwrap();
    assert_eq!(g.value(s).data(), &[4.0, 6.0]);

    let x = g.constant(Tensor::from_f64(&[2], &[2.0, 3.0]).unwrap()).unwrap();
    let z = g.mul_scalar(x, 0.0).unwrap();
    assert_eq!(g.value(z).data(), &[0.0, 0.0]);

    let d = g.sub(x, x).unwrap();
    assert!(g.value(d).data().iter().all(|&v| v == 0.0));
}

#[test]
fn shape_mismatch_names_both_shapes() {
    let mut g = Graph::<f32>::new();
    let a = g.constant(Tensor::zeros(&[2, 3])).unwrap();
    let b = g.constant(Tensor::zeros(&[4])).unwrap();
    let err = g.add(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[4]"), "{msg}");
}

#[test]
fn matmul_examples() {
    let mut g = Graph::<f64>::new();
    let eye = g.constant(t64(&[2, 2], &[1.0, 0.0, 0.0, 1.0])).unwrap();
    let m = g.constant(t64(&[2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
    let p = g.matmul(eye, m).unwrap();
    assert_eq!(g.value(p), g.value(m));

    let ones = g.constant(t64(&[2, 1], &[1.0, 1.0])).unwrap();
    let c = g.matmul(m, ones).unwrap();
    assert_eq!(g.value(c).data(), &[3.0, 7.0]);

    let z = g.constant(Tensor::zeros(&[2, 2])).unwrap();
    let zc = g.matmul(z, m).unwrap();
    assert!(g.value(zc).data().iter().all(|&v| v == 0.0));

    let bad = g.constant(Tensor::zeros(&[3, 2])).unwrap();
    assert!(matches!(g.matmul(m, bad), Err(NumError::ShapeMismatch { .. })));
}

#[test]
fn matmul_associativity() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a = Tensor::<f32>::randn(&[8, 8], 1.0, &mut rng);
    let b = Tensor::<f32>::randn(&[8, 8], 1.0, &mut rng);
    let c = Tensor::<f32>::randn(&[8, 8], 1.0, &mut rng);
    let left = a.matmul(&b.matmul(&c).unwrap()).unwrap();
    let right = a.matmul(&b).unwrap().matmul(&c).unwrap();
    let rel = left.sub(&right).unwrap().norm() / left.norm();
    assert!(rel < 1e-4, "{rel}");
}

#[test]
fn grad_examples() {
    // d(sum(x²))/dx at [1, 2]
    let mut g = Graph::<f64>::new();
    let x = g.param(t64(&[2], &[1.0, 2.0])).unwrap();
    let sq = g.square(x).unwrap();
    let s = g.sum(sq).unwrap();
    let d = g.grad(s, &[x]).unwrap();
    assert_eq!(d[0].data(), &[2.0, 4.0]);

    // cosine similarity of u with itself is stationary
    let mut g = Graph::<f64>::new();
    let u = g.param(t64(&[1, 3], &[0.3, -1.2, 2.0])).unwrap();
    let n = g.l2_normalize(u, 1e-8).unwrap();
    let p = g.mul(n, n).unwrap();
    let c = g.sum(p).unwrap();
    let d = g.grad(c, &[u]).unwrap();
    assert!(d[0].max_abs() < 1e-12);
}

#[test]
fn grad_errors() {
    let mut g = Graph::<f64>::new();
    let x = g.param(t64(&[2], &[1.0, 2.0])).unwrap();
    let y = g.square(x).unwrap();
    assert!(matches!(g.grad(y, &[x]), Err(NumError::NonScalarOutput(_))));

    let mut other = Graph::<f64>::new();
    let foreign = other.param(t64(&[1], &[1.0])).unwrap();
    let s = g.sum(y).unwrap();
    assert_eq!(g.grad(s, &[foreign]).unwrap_err(), NumError::NotOnTape);
}

#[test]
fn non_finite_is_an_error() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::from_f64(&[2], &[0.0, 1.0]).unwrap()).unwrap();
    assert!(matches!(g.log(x), Err(NumError::NonFinite { op: "log" })));
    assert!(matches!(g.div(x, x), Err(NumError::NonFinite { op: "div" })));
}

#[test]
fn finite_diff_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = Tensor::<f64>::randn(&[8], 1.0, &mut rng);
    let err = finite_diff_check(
        |g, v| {
            let s = g.square(v)?;
            g.sum(s)
        },
        &x,
        1e-3,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");

    let err = finite_diff_check(|g, _| g.constant(Tensor::scalar(2.5)), &x, 1e-3).unwrap();
    assert_eq!(err, 0.0);

    let non_finite = finite_diff_check(
        |g, v| {
            let l = g.log(v)?;
            g.sum(l)
        },
        &t64(&[1], &[1e-4]),
        1e-3,
    );
    assert!(matches!(non_finite, Err(NumError::NonFinite { .. })));
}

/// Weighted reduction so every output coordinate carries an O(1) gradient.
fn weighted_sum(g: &mut Graph<f64>, y: m2repa::numcore::Var, seed: u64) -> m2repa::numcore::Result<m2repa::numcore::Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = g.constant(Tensor::uniform(g.shape(y), 0.5, 1.5, &mut rng))?;
    let p = g.mul(y, w)?;
    g.sum(p)
}

#[test]
fn every_primitive_passes_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let a = Tensor::<f64>::randn(&[4, 6], 1.0, &mut rng);
    let b = Tensor::<f64>::randn(&[4, 6], 1.0, &mut rng);
    let pos = Tensor::<f64>::uniform(&[4, 6], 0.5, 2.0, &mut rng);
    let row = Tensor::<f64>::randn(&[6], 1.0, &mut rng);
    let m = Tensor::<f64>::randn(&[6, 3], 1.0, &mut rng);
    let h = 1e-3;
    let tol = 1e-3;

    type Case = (&'static str, Box<dyn Fn(&mut Graph<f64>, &[m2repa::numcore::Var]) -> m2repa::numcore::Result<m2repa::numcore::Var>>, Vec<Tensor<f64>>);
    let cases: Vec<Case> = vec![
        ("add", Box::new(|g, v| { let y = g.add(v[0], v[1])?; weighted_sum(g, y, 1) }), vec![a.clone(), row.clone()]),
        ("sub", Box::new(|g, v| { let y = g.sub(v[0], v[1])?; weighted_sum(g, y, 2) }), vec![a.clone(), b.clone()]),
        ("mul", Box::new(|g, v| { let y = g.mul(v[0], v[1])?; weighted_sum(g, y, 3) }), vec![a.clone(), row.clone()]),
        ("div", Box::new(|g, v| { let y = g.div(v[0], v[1])?; weighted_sum(g, y, 4) }), vec![a.clone(), pos.clone()]),
        ("pow", Box::new(|g, v| { let y = g.pow(v[0], 1.7)?; weighted_sum(g, y, 5) }), vec![pos.clone()]),
        ("exp", Box::new(|g, v| { let y = g.exp(v[0])?; weighted_sum(g, y, 6) }), vec![a.clone()]),
        ("log", Box::new(|g, v| { let y = g.log(v[0])?; weighted_sum(g, y, 7) }), vec![pos.clone()]),
        ("sqrt", Box::new(|g, v| { let y = g.sqrt(v[0])?; weighted_sum(g, y, 8) }), vec![pos.clone()]),
        ("silu", Box::new(|g, v| { let y = g.silu(v[0])?; weighted_sum(g, y, 9) }), vec![a.clone()]),
        ("tanh", Box::new(|g, v| { let y = g.tanh(v[0])?; weighted_sum(g, y, 10) }), vec![a.clone()]),
        ("relu", Box::new(|g, v| { let y = g.relu(v[0])?; weighted_sum(g, y, 11) }), vec![pos.clone()]),
        ("sum", Box::new(|g, v| { let s = g.sum(v[0])?; g.square(s) }), vec![a.clone()]),
        ("mean", Box::new(|g, v| { let s = g.mean(v[0])?; g.square(s) }), vec![a.clone()]),
        ("sum_axis", Box::new(|g, v| { let y = g.sum_axis(v[0], 0)?; let y = g.square(y)?; weighted_sum(g, y, 12) }), vec![a.clone()]),
        ("matmul", Box::new(|g, v| { let y = g.matmul(v[0], v[1])?; weighted_sum(g, y, 13) }), vec![a.clone(), m.clone()]),
        ("transpose", Box::new(|g, v| { let y = g.transpose(v[0])?; let y = g.square(y)?; weighted_sum(g, y, 14) }), vec![a.clone()]),
        ("reshape", Box::new(|g, v| { let y = g.reshape(v[0], &[3, 8])?; let y = g.square(y)?; weighted_sum(g, y, 15) }), vec![a.clone()]),
        ("concat", Box::new(|g, v| { let y = g.concat(&[v[0], v[1]])?; let y = g.square(y)?; weighted_sum(g, y, 16) }), vec![a.clone(), b.clone()]),
        ("split", Box::new(|g, v| { let p = g.split(v[0], &[2, 4])?; let q = g.square(p[1])?; let y = g.sum(q)?; let z = g.sum(p[0])?; g.add(y, z) }), vec![a.clone()]),
        ("l2_normalize", Box::new(|g, v| { let y = g.l2_normalize(v[0], 1e-8)?; weighted_sum(g, y, 17) }), vec![a.clone()]),
        ("layer_norm", Box::new(|g, v| { let y = g.layer_norm(v[0], 1e-5)?; weighted_sum(g, y, 18) }), vec![a.clone()]),
        ("softmax", Box::new(|g, v| { let y = g.softmax(v[0])?; weighted_sum(g, y, 19) }), vec![a.clone()]),
        ("gather", Box::new(|g, v| {
            let idx = Arc::new(vec![0, 5, usize::MAX, 5, 23, 7]);
            let y = g.gather(v[0], idx, &[2, 3])?;
            let y = g.square(y)?;
            weighted_sum(g, y, 20)
        }), vec![a.clone()]),
    ];
    for (name, f, xs) in cases {
        let report = finite_diff_check_many(f, &xs, h).unwrap();
        assert!(report.max_rel_error < tol, "{name}: {report:?}");
    }
}

#[test]
fn gradient_accumulates_over_two_consumers() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = Tensor::<f64>::randn(&[3, 4], 1.0, &mut rng);
    let f = |g: &mut Graph<f64>, v: m2repa::numcore::Var| {
        let a = g.tanh(v)?;
        let b = g.exp(v)?;
        let p = g.mul(a, b)?;
        let q = g.add(p, v)?;
        weighted_sum(g, q, 99)
    };
    assert!(finite_diff_check(f, &x, 1e-3).unwrap() < 1e-3);

    // the explicit sum: d/dx (x + x) == 2
    let mut g = Graph::<f64>::new();
    let v = g.param(x.clone()).unwrap();
    let y = g.add(v, v).unwrap();
    let s = g.sum(y).unwrap();
    let d = g.grad(s, &[v]).unwrap();
    assert!(d[0].data().iter().all(|&e| e == 2.0));
}

#[test]
fn f32_gradient_check_on_small_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = Tensor::<f32>::uniform(&[8], 0.2, 0.6, &mut rng);
    let err = finite_diff_check(
        |g, v| {
            let s = g.square(v)?;
            g.sum(s)
        },
        &x,
        1e-3,
    )
    .unwrap();
    assert!(err < 1e-3, "{err}");
}
