use m2repa::synthworld::*;
use proptest::prelude::*;

#[test]
fn clips_are_pixel_aligned_and_in_range() {
    let cfg = SceneConfig::default();
    let clip = clip_from_seed::<f32>(3, &cfg, 8, 2).unwrap();
    assert_eq!(clip.len(), 8);
    assert_eq!(clip.controls.len(), 8);
    assert_eq!(clip.to_tensor().shape(), &[8, 7, 16, 16]);
    for f in &clip.frames {
        assert!(f.rgb.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(f.depth.data().iter().all(|&v| v > 0.0));
        assert!(f.mask.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
    let back = TriModalClip::from_tensor(&clip.to_tensor(), clip.controls.clone(), 2);
    assert_eq!(back, clip);
}

#[test]
fn invalid_configs_are_rejected() {
    let mut cfg = SceneConfig::default();
    cfg.height = 20;
    assert!(clip_from_seed::<f32>(1, &cfg, 4, 1).is_err());
    let cfg = SceneConfig { objects: 4, ..SceneConfig::default() };
    assert!(clip_from_seed::<f32>(1, &cfg, 4, 1).is_err());
    assert!(clip_from_seed::<f32>(1, &SceneConfig::default(), 4, 4).is_err());
    assert!(dataset(1, 1, 0.5).is_err());
    assert!(dataset(1, 10, 1.0).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn generation_is_a_pure_function_of_the_seed(seed in any::<u64>()) {
        let cfg = SceneConfig::default();
        let a = clip_from_seed::<f32>(seed, &cfg, 4, 1).unwrap();
        let b = clip_from_seed::<f32>(seed, &cfg, 4, 1).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn splits_are_disjoint_and_cover(master in any::<u64>(), n in 2usize..50, r in 0.05f64..0.95) {
        let (tr, va) = dataset(master, n, r).unwrap();
        prop_assert_eq!(tr.len() + va.len(), n);
        prop_assert!(!tr.is_empty() && !va.is_empty());
        prop_assert!(tr.iter().all(|s| !va.contains(s)));
    }
}
