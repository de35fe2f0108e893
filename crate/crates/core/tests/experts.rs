use m2repa::align::linear_cka_value;
use m2repa::experts::{build_expert, default_experts, ingest_features, ExpertSpec, Modality};
use m2repa::format::write_tensor_file;
use m2repa::numcore::Tensor;
use m2repa::synthworld::{clip_from_seed, SceneConfig};

fn frames(seed: u64, n: usize) -> Tensor<f32> {
    clip_from_seed::<f32>(seed, &SceneConfig::default(), n, 1).unwrap().to_tensor()
}

#[test]
fn same_seed_same_weights_and_outputs() {
    let a = build_expert::<f32>(ExpertSpec::new(Modality::Rgb, 5)).unwrap();
    let b = build_expert::<f32>(ExpertSpec::new(Modality::Rgb, 5)).unwrap();
    assert_eq!(a.checksum(), b.checksum());
    let x = frames(1, 4);
    assert_eq!(a.extract(&x).unwrap(), b.extract(&x).unwrap());
    assert_eq!(a.extract(&x).unwrap(), a.extract(&x).unwrap());
}

#[test]
fn output_shape_is_frames_tokens_dim() {
    let e = build_expert::<f32>(ExpertSpec::new(Modality::Mask, 1)).unwrap();
    let y = e.extract(&frames(2, 3)).unwrap();
    assert_eq!(y.shape(), &[3, 16, 24]);
}

#[test]
fn experts_read_only_their_modality() {
    let experts = default_experts::<f32>(9, 16, 16, 4, 3).unwrap();
    let x = frames(3, 2);
    let base: Vec<_> = experts.iter().map(|e| e.extract(&x).unwrap()).collect();
    for (mi, m) in Modality::ALL.iter().enumerate() {
        let (c0, len) = m.channel_range(3);
        let mut y = x.clone();
        let hw = 256;
        for f in 0..2 {
            for c in c0..c0 + len {
                for v in &mut y.data_mut()[(f * 7 + c) * hw..(f * 7 + c + 1) * hw] {
                    *v += 0.37;
                }
            }
        }
        for (ei, e) in experts.iter().enumerate() {
            let changed = e.extract(&y).unwrap() != base[ei];
            assert_eq!(changed, ei == mi, "perturbing {} vs expert {ei}", m.name());
        }
    }
}

#[test]
fn distinct_experts_have_low_cka() {
    let x = frames(4, 8);
    let a = build_expert::<f64>(ExpertSpec::new(Modality::Rgb, 1)).unwrap();
    let b = build_expert::<f64>(ExpertSpec::new(Modality::Rgb, 2)).unwrap();
    let fa = a.extract(&x.cast()).unwrap();
    let fb = b.extract(&x.cast()).unwrap();
    let fa = fa.reshape(&[8 * 16, 24]).unwrap();
    let fb = fb.reshape(&[8 * 16, 24]).unwrap();
    let c = linear_cka_value(&fa, &fb).unwrap();
    assert!(c < 0.9, "CKA {c}");
}

#[test]
fn extraction_rejects_wrong_shape() {
    let e = build_expert::<f32>(ExpertSpec::new(Modality::Depth, 1)).unwrap();
    assert!(e.extract(&Tensor::zeros(&[1, 5, 16, 16])).is_err());
}

#[test]
fn feature_files_round_trip_and_validate() {
    let dir = tempfile::tempdir().unwrap();
    let e = build_expert::<f32>(ExpertSpec::new(Modality::Rgb, 1)).unwrap();
    let feats = e.extract(&frames(5, 2)).unwrap();
    let path = dir.path().join("rgb.bin");
    write_tensor_file(&path, "features.rgb", &feats).unwrap();
    let back = ingest_features::<f32>(&path, Some((16, 24))).unwrap();
    assert_eq!(back, feats);

    let err = ingest_features::<f32>(&path, Some((9, 24))).unwrap_err().to_string();
    assert!(err.contains("N = 9") && err.contains("found 16"), "{err}");

    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
    let err = ingest_features::<f32>(&path, None).unwrap_err().to_string();
    assert!(err.contains("truncated at byte"), "{err}");
}
