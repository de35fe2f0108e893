use m2repa::metrics::*;
use m2repa::numcore::Tensor;
use m2repa::rng::stream;
use proptest::prelude::*;
use rand::Rng;

fn t(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data).unwrap()
}

#[test]
fn psnr_examples() {
    let a = t(&[4], vec![0.1, 0.2, 0.3, 0.4]);
    assert_eq!(psnr(&a, &a, 1.0).unwrap(), 99.0);
    let z = t(&[2], vec![0.0, 0.0]);
    let o = t(&[2], vec![1.0, -1.0]);
    assert!(psnr(&z, &o, 1.0).unwrap().abs() < 1e-12);
    let p = t(&[2], vec![0.1, -0.1]);
    assert!((psnr(&z, &p, 1.0).unwrap() - 20.0).abs() < 1e-9);
    assert!(psnr(&z, &a, 1.0).is_err());
}

#[test]
fn ssim_examples() {
    let mut rng = stream(3, "ssim");
    let img: Vec<f64> = (0..256).map(|_| if rng.random::<bool>() { 1.0 } else { 0.0 }).collect();
    let a = t(&[16, 16], img.clone());
    assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    let inv = t(&[16, 16], img.iter().map(|v| 1.0 - v).collect());
    assert!(ssim(&inv, &a).unwrap() < 0.5);
    let c = Tensor::<f64>::full(&[3, 8, 8], 0.4);
    assert!((ssim(&c, &c).unwrap() - 1.0).abs() < 1e-12);
    assert!(ssim(&Tensor::<f64>::zeros(&[6, 6]), &Tensor::zeros(&[6, 6])).is_err());
}

#[test]
fn scale_shift_examples() {
    let gt = t(&[2, 3], vec![1.0, 2.0, 3.0, 1.5, 0.5, 2.5]);
    let pred = gt.map(|v| 2.0 * v + 1.0);
    let f = align_scale_shift(&pred, &gt).unwrap();
    assert!((f.scale - 0.5).abs() < 1e-12 && (f.shift + 0.5).abs() < 1e-12);
    let f = align_scale_shift(&gt, &gt).unwrap();
    assert!((f.scale - 1.0).abs() < 1e-12 && f.shift.abs() < 1e-12);
    let f = align_scale_shift(&Tensor::full(&[2, 3], 4.0), &gt).unwrap();
    assert!(f.degenerate && f.scale == 0.0 && (f.shift - 1.75).abs() < 1e-12);
}

#[test]
fn scale_shift_is_locally_optimal() {
    let gt = t(&[6], vec![1.0, 2.0, 1.2, 0.7, 3.0, 2.2]);
    let pred = t(&[6], vec![0.3, 0.9, 0.2, 0.1, 1.4, 0.8]);
    let f = align_scale_shift(&pred, &gt).unwrap();
    let res = |a: f64, b: f64| -> f64 { pred.data().iter().zip(gt.data()).map(|(p, g)| (a * p + b - g).powi(2)).sum() };
    let r0 = res(f.scale, f.shift);
    for (da, db) in [(1e-3, 0.0), (-1e-3, 0.0), (0.0, 1e-3), (0.0, -1e-3)] {
        assert!(res(f.scale + da, f.shift + db) >= r0);
    }
}

#[test]
fn depth_examples() {
    let gt = t(&[4], vec![1.0, 2.0, 0.5, 3.0]);
    let r = depth_metrics(&gt, &gt).unwrap();
    assert_eq!((r.abs_rel, r.delta1), (0.0, 1.0));
    let r = depth_metrics(&gt.map(|v| 1.25 * v), &gt).unwrap();
    assert_eq!(r.delta1, 0.0);
    let r = depth_metrics(&gt.map(|v| 1.1 * v), &gt).unwrap();
    assert!((r.abs_rel - 0.1).abs() < 1e-12 && r.delta1 == 1.0);
    let neg = t(&[4], vec![-1.0, 2.0, 0.5, 3.0]);
    assert_eq!(depth_metrics(&neg, &gt).unwrap().delta1, 0.75);
    assert!(depth_metrics(&gt, &neg).is_err());
    let r = evaluate_depth(&gt.map(|v| 3.0 * v - 0.2), &gt).unwrap();
    assert!(r.abs_rel < 1e-12 && r.delta1 == 1.0);
}

fn boxmask(x0: usize, x1: usize) -> Vec<bool> {
    (0..16).map(|i| (x0..x1).contains(&i)).collect()
}

#[test]
fn greedy_examples() {
    let masks = vec![boxmask(0, 4), boxmask(5, 9), boxmask(10, 16)];
    let r = greedy_miou(&masks, &masks).unwrap();
    assert_eq!(r.miou, 1.0);
    let o = optimal_miou_oracle(&masks, &masks).unwrap();
    assert_eq!(o.max_miou, 1.0);
    let disjoint = vec![boxmask(4, 5), boxmask(9, 10)];
    assert_eq!(greedy_miou(&disjoint, &masks).unwrap().miou, 0.0);
    assert!(greedy_miou(&[boxmask(0, 1)], &[vec![true; 3]]).is_err());
}

#[test]
fn mask_video_skips_context_and_averages_frames() {
    let mut rng = stream(1, "masks");
    let data: Vec<f64> = (0..4 * 2 * 8 * 8).map(|_| if rng.random::<f64>() < 0.5 { 1.0 } else { 0.0 }).collect();
    let gt = t(&[4, 2, 8, 8], data);
    let r = mask_video_miou(&gt, &gt, 2).unwrap();
    assert_eq!(r.frame_mious, vec![1.0, 1.0]);
    let noisy = gt.map(|v| if v > 0.5 { 0.9 } else { 0.2 });
    let r = mask_video_miou(&noisy, &gt, 1).unwrap();
    assert_eq!(r.overall, r.frame_mious.iter().sum::<f64>() / 3.0);
    assert!(mask_video_miou(&gt, &gt, 4).is_err());
}

fn random_table(seed: u64, g: usize, p: usize) -> Vec<Vec<f64>> {
    let mut rng = stream(seed, "iou-table");
    (0..g).map(|_| (0..p).map(|_| rng.random::<f64>()).collect()).collect()
}

#[test]
fn greedy_vs_oracle_on_seeded_tables() {
    let mut equal = 0;
    for s in 0..200 {
        let table = random_table(s, 4, 4);
        let g = greedy_match_table(&table);
        let o = optimal_match_table(&table).unwrap();
        let gs: f64 = g.matches.iter().map(|m| m.2).sum();
        assert!(gs <= o.max_sum + 1e-12 && g.miou <= o.max_miou + 1e-12);
        if (gs - o.max_sum).abs() < 1e-12 {
            equal += 1;
        }
    }
    assert!(equal > 100, "greedy matched the oracle on {equal}/200");
    assert!(optimal_match_table(&random_table(0, 7, 2)).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn greedy_invariant_to_prediction_order(seed in 0u64..5000, g in 1usize..5, p in 1usize..5) {
        let table = random_table(seed, g, p);
        let rev: Vec<Vec<f64>> = table.iter().map(|r| r.iter().rev().copied().collect()).collect();
        let a = greedy_match_table(&table);
        let b = greedy_match_table(&rev);
        prop_assert!((a.miou - b.miou).abs() < 1e-12);
    }

    #[test]
    fn metrics_are_deterministic_and_bounded(seed in 0u64..5000) {
        let mut rng = stream(seed, "metric-prop");
        let a: Vec<f64> = (0..128).map(|_| rng.random::<f64>()).collect();
        let b: Vec<f64> = (0..128).map(|_| rng.random::<f64>() + 0.1).collect();
        let (a, b) = (t(&[2, 8, 8], a), t(&[2, 8, 8], b));
        let s = ssim(&a, &b).unwrap();
        prop_assert!((-1.0..=1.0).contains(&s));
        prop_assert_eq!(s, ssim(&a, &b).unwrap());
        let d = evaluate_depth(&a, &b).unwrap();
        prop_assert!((0.0..=1.0).contains(&d.delta1) && d.abs_rel >= 0.0);
    }
}
