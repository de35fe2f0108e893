use m2repa::align::{
    cos2_decouple_loss, decouple_loss, linear_cka, linear_cka_value, m2repa_loss, total_loss, total_loss_var, ProjectorBank,
};
use m2repa::numcore::{finite_diff_check_many, Graph, NumError, Tensor};
use m2repa::params::Binder;
use m2repa::rng::stream;
use proptest::prelude::*;

fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, &mut stream(seed, "align-test"))
}

fn num(e: m2repa::Error) -> NumError {
    match e {
        m2repa::Error::Num(n) => n,
        other => NumError::InvalidArgument(other.to_string()),
    }
}

/// HSIC ratio from explicit centered Gram matrices.
fn gram_cka(x: &Tensor<f64>, y: &Tensor<f64>) -> f64 {
    let n = x.shape()[0];
    let gram = |m: &Tensor<f64>| -> Vec<f64> {
        let p = m.shape()[1];
        let d = m.data();
        let mut k = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                k[i * n + j] = (0..p).map(|c| d[i * p + c] * d[j * p + c]).sum();
            }
        }
        // H K H
        let row: Vec<f64> = (0..n).map(|i| (0..n).map(|j| k[i * n + j]).sum::<f64>() / n as f64).collect();
        let all = row.iter().sum::<f64>() / n as f64;
        let mut c = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                c[i * n + j] = k[i * n + j] - row[i] - row[j] + all;
            }
        }
        c
    };
    let (k, l) = (gram(x), gram(y));
    let tr = |a: &[f64], b: &[f64]| -> f64 { (0..n).map(|i| (0..n).map(|j| a[i * n + j] * b[j * n + i]).sum::<f64>()).sum() };
    tr(&k, &l) / (tr(&k, &k) * tr(&l, &l)).sqrt()
}

fn orthogonal(p: usize, seed: u64) -> Tensor<f64> {
    let a = randn(&[p, p], seed);
    let mut q: Vec<Vec<f64>> = Vec::new();
    for r in 0..p {
        let mut v: Vec<f64> = a.data()[r * p..(r + 1) * p].to_vec();
        for u in &q {
            let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= dot * b);
        }
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        v.iter_mut().for_each(|a| *a /= n);
        q.push(v);
    }
    Tensor::new(vec![p, p], q.concat()).unwrap()
}

#[test]
fn projector_bank_outputs() {
    let bank = ProjectorBank::<f64>::new(8, &[24, 24, 24], 3, 1).unwrap();
    assert_eq!(bank.len(), 3);
    let mut g = Graph::new();
    let mut b = Binder::frozen(&bank.params);
    let h = g.constant(randn(&[2, 4, 8], 2)).unwrap();
    let outs = bank.project(&mut g, &mut b, h).unwrap();
    assert_eq!(outs.len(), 3);
    assert!(outs.iter().all(|&o| g.shape(o) == [2, 4, 24]));

    let mut zero = bank.clone();
    for (_, t) in zero.params.iter_mut() {
        t.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let mut g = Graph::new();
    let mut b = Binder::frozen(&zero.params);
    let h = g.constant(randn(&[2, 4, 8], 2)).unwrap();
    let outs = zero.project(&mut g, &mut b, h).unwrap();
    assert_eq!(g.value(outs[0]).max_abs(), 0.0);

    let mut g = Graph::new();
    let mut b = Binder::frozen(&bank.params);
    let h = g.constant(randn(&[2, 4, 7], 2)).unwrap();
    assert!(bank.project(&mut g, &mut b, h).is_err());
}

#[test]
fn alignment_anchors() {
    let mut g = Graph::new();
    let x = g.constant(randn(&[3, 4, 6], 1)).unwrap();
    let l = m2repa_loss(&mut g, &[x], &[x]).unwrap();
    assert!((g.value(l).item() + 1.0).abs() < 1e-12);

    // per-token orthogonal: disjoint channel supports
    let a = Tensor::from_fn(&[2, 3, 4], |i| if i % 4 < 2 { 1.0 + i as f64 } else { 0.0 });
    let b = Tensor::from_fn(&[2, 3, 4], |i| if i % 4 >= 2 { 2.0 - i as f64 } else { 0.0 });
    let av = g.constant(a).unwrap();
    let bv = g.constant(b).unwrap();
    let l = m2repa_loss(&mut g, &[av], &[bv]).unwrap();
    assert!(g.value(l).item().abs() < 1e-12);

    // K = 2, one at cos 1, one at cos 0
    let l = m2repa_loss(&mut g, &[x, av], &[x, bv]).unwrap();
    assert!((g.value(l).item() + 0.5).abs() < 1e-12);
}

#[test]
fn alignment_zero_tokens_do_not_poison() {
    let mut g = Graph::new();
    let p = g.param(Tensor::zeros(&[2, 2, 3])).unwrap();
    let t = g.constant(randn(&[2, 2, 3], 4)).unwrap();
    let l = m2repa_loss(&mut g, &[p], &[t]).unwrap();
    assert_eq!(g.value(l).item(), 0.0);
    let gr = g.grad(l, &[p]).unwrap();
    assert!(gr[0].all_finite());
}

#[test]
fn alignment_targets_receive_no_gradient() {
    let mut g = Graph::new();
    let p = g.param(randn(&[2, 3, 4], 1)).unwrap();
    let t = g.param(randn(&[2, 3, 4], 2)).unwrap();
    let l = m2repa_loss(&mut g, &[p], &[t]).unwrap();
    let gr = g.grad(l, &[p, t]).unwrap();
    assert!(gr[0].max_abs() > 0.0);
    assert_eq!(gr[1].max_abs(), 0.0);
}

#[test]
fn alignment_is_k_average_of_single_expert_losses() {
    let mut g = Graph::new();
    let ps: Vec<_> = (0..3).map(|k| g.constant(randn(&[4, 5, 6], 10 + k)).unwrap()).collect();
    let ts: Vec<_> = (0..3).map(|k| g.constant(randn(&[4, 5, 6], 20 + k)).unwrap()).collect();
    let joint = m2repa_loss(&mut g, &ps, &ts).unwrap();
    let mut sum = 0.0;
    for k in 0..3 {
        let l = m2repa_loss(&mut g, &ps[k..k + 1], &ts[k..k + 1]).unwrap();
        sum += g.value(l).item();
    }
    assert!((g.value(joint).item() - sum / 3.0).abs() < 1e-12);
}

#[test]
fn cka_matches_gram_oracle() {
    let x = randn(&[8, 4], 1);
    let y = randn(&[8, 5], 2);
    let c = linear_cka_value(&x, &y).unwrap();
    assert!((c - gram_cka(&x, &y)).abs() < 1e-10);
    assert!((linear_cka_value(&x, &x).unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn cka_invariances() {
    let x = randn(&[32, 8], 3);
    let y = randn(&[32, 12], 4);
    let base = linear_cka_value(&x, &y).unwrap();
    let xq = x.matmul(&orthogonal(8, 5)).unwrap();
    assert!((linear_cka_value(&xq, &y).unwrap() - base).abs() < 1e-10);
    assert!((linear_cka_value(&x.scale(3.5), &y.scale(0.2)).unwrap() - base).abs() < 1e-10);
}

#[test]
fn cka_errors_and_degenerate_case() {
    assert!(linear_cka_value(&randn(&[1, 3], 1), &randn(&[1, 3], 2)).is_err());
    assert!(linear_cka_value(&randn(&[4, 3], 1), &randn(&[5, 3], 2)).is_err());
    let constant = Tensor::<f64>::full(&[6, 3], 2.0);
    assert_eq!(linear_cka_value(&constant, &randn(&[6, 3], 2)).unwrap(), 0.0);
}

#[test]
fn decoupling_coefficient_and_anchors() {
    let mut g = Graph::new();
    let fs: Vec<Tensor<f64>> = (0..3).map(|k| randn(&[2, 5, 4], 30 + k)).collect();
    let vs: Vec<_> = fs.iter().map(|f| g.constant(f.clone()).unwrap()).collect();
    let d = decouple_loss(&mut g, &vs, 1024, 0).unwrap();
    let flat: Vec<Tensor<f64>> = fs.iter().map(|f| f.reshape(&[10, 4]).unwrap()).collect();
    let mut s = 0.0;
    for i in 0..3 {
        for j in i + 1..3 {
            s += gram_cka(&flat[i], &flat[j]);
        }
    }
    assert!((g.value(d).item() - s / 3.0).abs() < 1e-10);

    let same = decouple_loss(&mut g, &[vs[0], vs[0], vs[0]], 1024, 0).unwrap();
    assert!((g.value(same).item() - 1.0).abs() < 1e-10);
    assert!(decouple_loss(&mut g, &vs[..1], 1024, 0).is_err());
}

#[test]
fn decoupling_orthogonal_column_spaces_give_zero() {
    // centered columns of a and b live in orthogonal subspaces of R^n
    let n = 8;
    let basis = orthogonal(n, 9);
    let col = |r: usize| -> Vec<f64> {
        let v: Vec<f64> = basis.data()[r * n..(r + 1) * n].to_vec();
        let m = v.iter().sum::<f64>() / n as f64;
        v.iter().map(|a| a - m).collect()
    };
    // make the basis orthogonal to the all-ones vector by construction
    let ones = vec![1.0 / (n as f64).sqrt(); n];
    let mut vecs: Vec<Vec<f64>> = vec![ones];
    for r in 0..n {
        let mut v = col(r);
        for u in &vecs {
            let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= dot * b);
        }
        let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if nv > 1e-6 {
            v.iter_mut().for_each(|a| *a /= nv);
            vecs.push(v);
        }
    }
    let a = Tensor::from_fn(&[n, 2], |i| vecs[1 + i % 2][i / 2]);
    let b = Tensor::from_fn(&[n, 2], |i| vecs[3 + i % 2][i / 2]);
    assert!(gram_cka(&a, &b).abs() < 1e-12);
    let mut g = Graph::new();
    let av = g.constant(a).unwrap();
    let bv = g.constant(b).unwrap();
    let d = decouple_loss(&mut g, &[av, bv], 1024, 0).unwrap();
    assert!(g.value(d).item().abs() < 1e-12);
}

#[test]
fn cos2_anchors() {
    let mut g = Graph::new();
    let x = g.constant(randn(&[2, 3, 4], 1)).unwrap();
    let l = cos2_decouple_loss(&mut g, &[x, x, x]).unwrap();
    assert!((g.value(l).item() - 1.0).abs() < 1e-12);
    let neg = g.mul_scalar(x, -1.0).unwrap();
    let y = g.constant(randn(&[2, 3, 4], 2)).unwrap();
    let z = g.constant(randn(&[2, 3, 4], 3)).unwrap();
    let a = cos2_decouple_loss(&mut g, &[x, y, z]).unwrap();
    let b = cos2_decouple_loss(&mut g, &[neg, y, z]).unwrap();
    assert!((g.value(a).item() - g.value(b).item()).abs() < 1e-12);

    let e = [Tensor::from_fn(&[1, 1, 3], |i| (i == 0) as u8 as f64), Tensor::from_fn(&[1, 1, 3], |i| (i == 1) as u8 as f64), Tensor::from_fn(&[1, 1, 3], |i| (i == 2) as u8 as f64)];
    let vs: Vec<_> = e.iter().map(|t| g.constant(t.clone()).unwrap()).collect();
    let l = cos2_decouple_loss(&mut g, &vs).unwrap();
    assert_eq!(g.value(l).item(), 0.0);

    // unequal dims pool onto the smaller one
    let wide = g.constant(randn(&[2, 3, 6], 4)).unwrap();
    let l = cos2_decouple_loss(&mut g, &[x, wide, y]).unwrap();
    assert!(g.value(l).item().is_finite());
}

#[test]
fn total_loss_identity() {
    let b = total_loss(1.0, -1.0, 0.3, 0.5, 0.05).unwrap();
    assert!((b.total - 0.515).abs() < 1e-12);
    assert_eq!((b.lambda_align, b.lambda_decouple), (0.5, 0.05));
    assert!(total_loss(1.0, 0.0, 0.0, 0.0, -1.0).is_err());
}

#[test]
fn gradients_of_every_term_match_finite_differences() {
    let bank = ProjectorBank::<f64>::new(8, &[6, 6, 6], 3, 3).unwrap();
    let h = randn(&[2, 4, 8], 7);
    let targets: Vec<Tensor<f64>> = (0..3).map(|k| randn(&[2, 4, 6], 40 + k)).collect();
    let names: Vec<String> = bank.params.names().cloned().collect();
    let mut xs: Vec<Tensor<f64>> = names.iter().map(|n| bank.params.get(n).unwrap().clone()).collect();
    xs.push(h);
    for term in ["align", "cka", "cos2", "total"] {
        let report = finite_diff_check_many(
            |g, vs| {
                let mut b = Binder::frozen(&bank.params);
                for (n, &v) in names.iter().zip(vs) {
                    b.preset(n, v);
                }
                let p = bank.project(g, &mut b, vs[names.len()]).map_err(num)?;
                let t: Vec<_> = targets.iter().map(|t| g.constant(t.clone())).collect::<Result<_, _>>()?;
                match term {
                    "align" => m2repa_loss(g, &p, &t).map_err(num),
                    "cka" => decouple_loss(g, &p, 1024, 0).map_err(num),
                    "cos2" => cos2_decouple_loss(g, &p).map_err(num),
                    _ => {
                        let a = m2repa_loss(g, &p, &t).map_err(num)?;
                        let d = decouple_loss(g, &p, 1024, 0).map_err(num)?;
                        let diff = g.sub(p[0], t[0])?;
                        let sq = g.square(diff)?;
                        let fm = g.mean(sq)?;
                        total_loss_var(g, fm, Some(a), Some(d), 0.5, 0.05).map_err(num)
                    }
                }
            },
            &xs,
            1e-4,
        )
        .unwrap();
        // the cos² curvature leaves O(h²) truncation above 1e-3 at h = 1e-3 for
        // these inputs, so the check runs one step finer with a tighter bound
        assert!(report.max_rel_error < 1e-4, "{term}: {report:?}");
    }
}

#[test]
fn cka_direct_gradient_check() {
    let x = randn(&[6, 3], 1);
    let y = randn(&[6, 4], 2);
    let r = finite_diff_check_many(|g, v| linear_cka(g, v[0], v[1]).map_err(num), &[x, y], 1e-3).unwrap();
    assert!(r.max_rel_error < 1e-3, "{r:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cka_is_bounded_symmetric_and_row_permutation_invariant(seed in 0u64..10_000, n in 3usize..20, p1 in 1usize..6, p2 in 1usize..6) {
        let x = randn(&[n, p1], seed);
        let y = randn(&[n, p2], seed + 1);
        let c = linear_cka_value(&x, &y).unwrap();
        prop_assert!((-1e-6..=1.0 + 1e-6).contains(&c));
        prop_assert!((c - linear_cka_value(&y, &x).unwrap()).abs() < 1e-6);
        let perm: Vec<usize> = (0..n).map(|i| (i * 7 + 3) % n).collect();
        if perm.iter().collect::<std::collections::BTreeSet<_>>().len() == n {
            let px = Tensor::from_fn(&[n, p1], |i| x.data()[perm[i / p1] * p1 + i % p1]);
            let py = Tensor::from_fn(&[n, p2], |i| y.data()[perm[i / p2] * p2 + i % p2]);
            prop_assert!((linear_cka_value(&px, &py).unwrap() - c).abs() < 1e-6);
        }
    }

    #[test]
    fn losses_stay_in_range(seed in 0u64..10_000, k in 2usize..4) {
        let mut g = Graph::new();
        let ps: Vec<_> = (0..k).map(|i| g.constant(randn(&[2, 3, 4], seed * 7 + i as u64)).unwrap()).collect();
        let ts: Vec<_> = (0..k).map(|i| g.constant(randn(&[2, 3, 4], seed * 11 + i as u64)).unwrap()).collect();
        let a = m2repa_loss(&mut g, &ps, &ts).unwrap();
        let d = decouple_loss(&mut g, &ps, 1024, seed).unwrap();
        let a = g.value(a).item();
        let d = g.value(d).item();
        prop_assert!((-1.0..=1.0).contains(&a));
        prop_assert!((0.0..=1.0 + 1e-6).contains(&d));
    }

    #[test]
    fn breakdown_decomposes(fm in -5.0f64..5.0, al in -1.0f64..1.0, de in 0.0f64..1.0, la in 0.0f64..10.0, ld in 0.0f64..10.0) {
        let b = total_loss(fm, al, de, la, ld).unwrap();
        prop_assert!((b.total - (b.fm + b.lambda_align * b.align + b.lambda_decouple * b.decouple)).abs() < 1e-6);
    }
}
