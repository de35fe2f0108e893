use m2repa::format::*;
use m2repa::numcore::Tensor;
use m2repa::rng::stream;
use proptest::prelude::*;

#[test]
fn save_load_save_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let mut b = Bundle::new();
    b.push_tensor("a", &Tensor::<f32>::randn(&[2, 3], 1.0, &mut stream(1, "f")));
    b.push_tensor("b", &Tensor::<f64>::from_f64(&[1], &[0.25]).unwrap());
    b.push_bytes("meta", b"hello");
    let p = dir.path().join("x.m2rp");
    b.save(&p).unwrap();
    let back = Bundle::load(&p).unwrap();
    assert_eq!(back.encode().unwrap(), std::fs::read(&p).unwrap());
    assert_eq!(back.tensor::<f32>("a").unwrap(), b.tensor::<f32>("a").unwrap());
    let err = Bundle::load(&dir.path().join("missing")).unwrap_err().to_string();
    assert!(err.contains("missing"));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn any_single_byte_flip_is_detected(seed in 0u64..1000, pos in 0usize..10_000, bit in 0u8..8) {
        let mut b = Bundle::new();
        b.push_tensor("w", &Tensor::<f32>::randn(&[4, 5], 1.0, &mut stream(seed, "flip")));
        let mut bytes = b.encode().unwrap();
        let i = pos % bytes.len();
        bytes[i] ^= 1 << bit;
        prop_assert!(Bundle::decode(&bytes).is_err());
    }

    #[test]
    fn tensors_round_trip_bitwise(seed in 0u64..1000, r in 1usize..5, c in 1usize..5) {
        let t = Tensor::<f32>::randn(&[r, c], 3.0, &mut stream(seed, "rt"));
        let mut b = Bundle::new();
        b.push_tensor("t", &t);
        let back = Bundle::decode(&b.encode().unwrap()).unwrap();
        prop_assert_eq!(back.tensor::<f32>("t").unwrap(), t);
    }
}
