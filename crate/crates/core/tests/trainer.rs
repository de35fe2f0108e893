use std::collections::BTreeSet;

use m2repa::trainer::*;
use m2repa::Error;
use proptest::prelude::*;

fn tiny(variant: Variant) -> TrainConfig {
    let mut c = TrainConfig::default();
    c.variant = variant;
    c.steps = 3;
    c.batch = 2;
    c.model.dim = 16;
    c.model.depth = 2;
    c.model.tap_layer = 1;
    c.model.mlp_ratio = 2;
    c.data.frames = 4;
    c.data.context = 1;
    c.data.clips = 8;
    c.align.expert_dim = 12;
    c.eval.val_clips = 1;
    c.eval.short_frames = 4;
    c.eval.long_frames = 9;
    c.eval.steps_per_frame = 4;
    c
}

fn model_names(t: &Trainer<f32>) -> BTreeSet<String> {
    t.model.params.names().cloned().collect()
}

#[test]
fn variant_gates_loss_terms() {
    for v in Variant::ALL {
        let mut t = Trainer::<f32>::new(tiny(v)).unwrap();
        let r = t.run_step().unwrap();
        let l = r.loss;
        match v {
            Variant::Baseline => assert_eq!((l.align, l.decouple), (0.0, 0.0)),
            Variant::RepaRgb | Variant::RepaDepth | Variant::RepaMask | Variant::NaiveMulti => {
                assert!(l.align != 0.0 && l.decouple == 0.0, "{v:?} {l:?}")
            }
            Variant::M2repaCos2 | Variant::M2repaCka => assert!(l.align != 0.0 && l.decouple > 0.0, "{v:?} {l:?}"),
        }
        assert_eq!(t.bank.as_ref().map_or(0, |b| b.len()), v.experts().len());
    }
}

#[test]
fn default_lambdas() {
    let c = TrainConfig::default();
    assert_eq!(c.variant, Variant::M2repaCka);
    assert_eq!((c.align.lambda_align, c.align.lambda_decouple), (0.5, 0.05));
    let mut t = Trainer::<f32>::new(tiny(Variant::M2repaCka)).unwrap();
    let l = t.run_step().unwrap().loss;
    assert_eq!((l.lambda_align, l.lambda_decouple), (0.5, 0.05));
}

#[test]
fn same_seed_same_history() {
    let a = Trainer::<f32>::new(tiny(Variant::M2repaCka)).unwrap().run_loop().unwrap();
    let b = Trainer::<f32>::new(tiny(Variant::M2repaCka)).unwrap().run_loop().unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(a.history.len(), 3);
    assert_eq!(a.metrics, b.metrics);
    let mut c = tiny(Variant::M2repaCka);
    c.seed = 2;
    let d = Trainer::<f32>::new(c).unwrap().run_loop().unwrap();
    assert_ne!(a.history, d.history);
}

#[test]
fn experts_stay_frozen() {
    let mut t = Trainer::<f32>::new(tiny(Variant::NaiveMulti)).unwrap();
    let before = t.expert_checksums();
    let r = t.run_loop().unwrap();
    assert_eq!(before, t.expert_checksums());
    assert_eq!(before, r.expert_checksums);
}

#[test]
fn gradients_touch_exactly_trunk_and_projectors() {
    let mut t = Trainer::<f32>::new(tiny(Variant::M2repaCka)).unwrap();
    let mut expected = model_names(&t);
    expected.extend(t.bank.as_ref().unwrap().params.names().cloned());
    let out = t.step_on(&[0, 1]).unwrap();
    assert_eq!(out.touched, expected);

    let mut t = Trainer::<f32>::new(tiny(Variant::Baseline)).unwrap();
    let expected = model_names(&t);
    assert_eq!(t.step_on(&[0]).unwrap().touched, expected);
}

#[test]
fn total_matches_parts_and_mixing_holds() {
    let mut t = Trainer::<f32>::new(tiny(Variant::M2repaCos2)).unwrap();
    for _ in 0..3 {
        let r = t.run_step().unwrap();
        let l = r.loss;
        let recomputed = l.fm + 0.5 * l.align + 0.05 * l.decouple;
        assert!((l.total - recomputed).abs() < 1e-6);
        assert!(r.mixing_error < 1e-6, "{}", r.mixing_error);
    }
}

#[test]
fn empty_or_bad_batch_rejected() {
    let mut t = Trainer::<f32>::new(tiny(Variant::Baseline)).unwrap();
    assert!(t.step_on(&[]).is_err());
    assert!(t.step_on(&[999]).is_err());
}

#[test]
fn non_finite_loss_names_term() {
    let mut t = Trainer::<f32>::new(tiny(Variant::Baseline)).unwrap();
    for v in t.model.params.get_mut("enc.rgb.w").unwrap().data_mut() {
        *v = 1e38;
    }
    match t.run_step() {
        Err(Error::NonFiniteLoss { step: 0, term }) => assert_eq!(term, "fm"),
        other => panic!("expected a non-finite fm loss, got {other:?}"),
    }
}

#[test]
fn oracle_rollout_scores_perfectly_and_beats_untrained() {
    let cfg = tiny(Variant::Baseline);
    let t = Trainer::<f32>::new(cfg.clone()).unwrap();
    for h in [Horizon::Short, Horizon::Long] {
        let o = evaluate_with(oracle_for::<f32>, &t.val_seeds, &cfg, h).unwrap();
        assert_eq!(o.psnr, 99.0, "{h:?} {o:?}");
        assert_eq!(o.delta1, 1.0);
        assert_eq!(o.miou, 1.0);
        let z = t.evaluate(h).unwrap();
        assert!(z.psnr < o.psnr && z.ssim < o.ssim && z.miou < o.miou && z.delta1 < o.delta1, "{z:?}");
        assert_eq!(z, t.evaluate(h).unwrap());
    }
}

#[test]
fn horizon_beyond_support_is_an_error() {
    let mut cfg = tiny(Variant::Baseline);
    cfg.eval.long_frames = 80;
    let t = Trainer::<f32>::new(cfg).unwrap();
    assert!(matches!(t.evaluate(Horizon::Long), Err(Error::Horizon { .. })));
}

#[test]
fn sweeps() {
    let mut base = tiny(Variant::M2repaCka);
    base.steps = 2;
    let r = sweep::<f32>(SweepAxis::TapLayer, &[1.0, 2.0], &base).unwrap();
    assert_eq!(r.len(), base.model.depth);
    assert_eq!(r[1].config.model.tap_layer, 2);

    let single = sweep::<f32>(SweepAxis::LambdaDecouple, &[0.05], &base).unwrap();
    let direct = Trainer::<f32>::new(base.clone()).unwrap().run_loop().unwrap();
    assert_eq!(single[0].history, direct.history);
    assert_eq!(single[0].metrics, direct.metrics);

    assert_eq!(LAMBDA_GRID, [0.05, 0.5, 35.0, 100.0, 200.0]);
    assert!(SweepAxis::parse("width").is_err());
    assert!(sweep::<f32>(SweepAxis::ProjectorDepth, &[], &base).is_err());
    assert!(SweepAxis::TapLayer.apply(&base, 7.0).is_err());
}

#[test]
fn checkpoint_resume_matches_uninterrupted_run() {
    let mut cfg = tiny(Variant::M2repaCka);
    cfg.steps = 4;
    let mut a = Trainer::<f32>::new(cfg.clone()).unwrap();
    a.run_step().unwrap();
    a.run_step().unwrap();
    let bytes = a.checkpoint().unwrap().encode().unwrap();
    let mut b = Trainer::<f32>::from_checkpoint(&m2repa::format::Bundle::decode(&bytes).unwrap()).unwrap();
    assert_eq!(b.model.params, a.model.params);
    assert_eq!(b.config, a.config);
    assert_eq!(b.checkpoint().unwrap().encode().unwrap(), bytes);
    let ra = a.run_loop().unwrap();
    let rb = b.run_loop().unwrap();
    assert_eq!(ra.history, rb.history);
}

#[test]
fn invalid_configs_rejected() {
    let mut c = tiny(Variant::Baseline);
    c.data.context = c.data.frames;
    assert!(Trainer::<f32>::new(c).is_err());
    let mut c = tiny(Variant::Baseline);
    c.align.lambda_decouple = -1.0;
    assert!(Trainer::<f32>::new(c).is_err());
    let mut c = tiny(Variant::Baseline);
    c.model.variant = m2repa::backbone::BackboneVariant::LatentRgb;
    assert!(Trainer::<f32>::new(c).is_err());
}

#[test]
fn latent_sum_backbone_trains() {
    let mut c = tiny(Variant::M2repaCka);
    c.model.variant = m2repa::backbone::BackboneVariant::LatentSum;
    let r = Trainer::<f32>::new(c).unwrap().run_loop().unwrap();
    assert!(r.history.iter().all(|h| h.loss.total.is_finite()));
}

#[test]
fn worker_pool_keeps_job_order() {
    let out = run_parallel(10, 3, |i| i * i);
    assert_eq!(out, (0..10).map(|i| i * i).collect::<Vec<_>>());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn breakdown_is_consistent_for_any_seed(seed in 0u64..1_000_000, vi in 0usize..7) {
        let mut c = tiny(Variant::ALL[vi]);
        c.seed = seed;
        let mut t = Trainer::<f32>::new(c).unwrap();
        let r = t.run_step().unwrap();
        let l = r.loss;
        prop_assert!((l.total - (l.fm + l.lambda_align * l.align + l.lambda_decouple * l.decouple)).abs() < 1e-6);
        prop_assert!((-1.0..=1.0).contains(&l.align));
        prop_assert!((0.0..=1.0 + 1e-6).contains(&l.decouple));
        prop_assert!(l.fm >= 0.0);
    }
}
