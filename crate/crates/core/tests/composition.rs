use fgovd_core::composer::{compose, decompose_category, transfer_triplet, TripletFile, WeightTriplet};
use fgovd_core::embedding::Embedding;
use proptest::prelude::*;

fn vector(dim: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-10.0f64..10.0, dim)
}

fn pair() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (1usize..64).prop_flat_map(|d| (vector(d), vector(d)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn zero_bias_splits_into_attribute_and_category((g, a) in pair(), wg in -5.0f64..5.0, wa in -5.0f64..5.0) {
        let (ug, ua) = (Embedding::new(g), Embedding::new(a));
        let u = compose(&ug, &ua, &WeightTriplet::new(wg, wa, 0.0), false).unwrap();
        let cate = decompose_category(&ug, &ua).unwrap();
        for ((x, ai), ci) in u.values().iter().zip(ua.values()).zip(cate.values()) {
            let expected = (wg + wa) * ai + wg * ci;
            prop_assert!((x - expected).abs() <= 1e-12 * (1.0 + expected.abs()), "{x} vs {expected}");
        }
    }

    #[test]
    fn bias_shifts_every_coordinate((g, a) in pair(), t in prop::array::uniform3(-5.0f64..5.0)) {
        let (ug, ua) = (Embedding::new(g), Embedding::new(a));
        let t = WeightTriplet::from_array(t);
        let with = compose(&ug, &ua, &t, false).unwrap();
        let without = compose(&ug, &ua, &transfer_triplet(&t), false).unwrap();
        for (x, y) in with.values().iter().zip(without.values()) {
            prop_assert!((x - y - t.bias).abs() <= 1e-12 * (1.0 + x.abs()));
        }
    }

    #[test]
    fn skip_returns_global((g, a) in pair(), t in prop::array::uniform3(-5.0f64..5.0)) {
        let ug = Embedding::new(g);
        let u = compose(&ug, &Embedding::new(a), &WeightTriplet::from_array(t), true).unwrap();
        prop_assert_eq!(u, ug);
    }
}

#[test]
fn identity_returns_global() {
    let g = Embedding::new(vec![0.3, -1.2, 4.0]);
    let a = Embedding::new(vec![9.0, 9.0, 9.0]);
    assert_eq!(compose(&g, &a, &WeightTriplet::IDENTITY, false).unwrap(), g);
}

#[test]
fn dimension_mismatch_is_rejected() {
    let g = Embedding::new(vec![1.0, 2.0]);
    let a = Embedding::new(vec![1.0]);
    assert!(compose(&g, &a, &WeightTriplet::IDENTITY, false).is_err());
    assert!(compose(&g, &a, &WeightTriplet::IDENTITY, true).is_err());
}

#[test]
fn transfer_zeroes_bias_only() {
    for t in [
        WeightTriplet::new(0.8, 0.2, 0.1),
        WeightTriplet::new(1.0, 0.0, 0.0),
        WeightTriplet::new(0.5, 0.7, -0.3),
    ] {
        let out = transfer_triplet(&t);
        assert_eq!((out.w_global, out.w_attri, out.bias), (t.w_global, t.w_attri, 0.0));
    }
}

#[test]
fn triplet_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.json");
    let file = TripletFile::new(WeightTriplet::new(0.75, 0.4, -0.02));
    file.save(&path).unwrap();
    let back = TripletFile::load(&path).unwrap();
    assert_eq!(back.triplet(), file.triplet());
    assert!(TripletFile::from_json("{\"w_global\": 1}").is_err());
}
