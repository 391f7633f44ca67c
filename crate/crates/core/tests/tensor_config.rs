use dsurf::config::{PartialConfig, RunConfig};
use dsurf::tensor::{DType, TensorFile};
use proptest::prelude::*;

#[test]
fn known_byte_layout() {
    let t = TensorFile::new(DType::F64, vec![2, 1], vec![1.0, -2.5]).unwrap();
    let mut want = b"DSF1".to_vec();
    want.extend([2u8, 2]);
    want.extend(2u32.to_le_bytes());
    want.extend(1u32.to_le_bytes());
    want.extend(1.0f64.to_le_bytes());
    want.extend((-2.5f64).to_le_bytes());
    assert_eq!(t.to_bytes(), want);
}

#[test]
fn file_round_trip_and_rejections() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("t.dsf");
    let t = TensorFile::new(
        DType::F32,
        vec![3, 2, 2],
        (0..12).map(|i| i as f64 * 0.5).collect(),
    )
    .unwrap();
    t.write(&p).unwrap();
    assert_eq!(TensorFile::read(&p).unwrap(), t);

    let bytes = t.to_bytes();
    assert!(TensorFile::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    let mut bad = bytes.clone();
    bad[4] = 9;
    assert!(TensorFile::from_bytes(&bad).is_err());
    bad = bytes.clone();
    bad[0] = b'X';
    assert!(TensorFile::from_bytes(&bad).is_err());
    assert!(TensorFile::new(DType::F64, vec![2, 2], vec![0.0; 3]).is_err());
}

fn arb_tensor() -> impl Strategy<Value = TensorFile> {
    (prop::collection::vec(0u32..5, 0..4), prop::bool::ANY).prop_flat_map(|(dims, f32)| {
        let n = dims.iter().product::<u32>() as usize;
        prop::collection::vec(-1e6f64..1e6, n).prop_map(move |data| {
            let dtype = if f32 { DType::F32 } else { DType::F64 };
            TensorFile::new(dtype, dims.clone(), data).unwrap()
        })
    })
}

proptest! {
    #[test]
    fn bytes_round_trip(t in arb_tensor()) {
        let bytes = t.to_bytes();
        let back = TensorFile::from_bytes(&bytes).unwrap();
        prop_assert_eq!(&back, &t);
        prop_assert_eq!(back.to_bytes(), bytes);
    }
}

#[test]
fn config_layers_resolve_in_order() {
    let file = PartialConfig::from_json(r#"{"ratio_threshold": 0.7, "rng_seed": 5}"#).unwrap();
    let flags = PartialConfig {
        rng_seed: Some(9),
        ..PartialConfig::default()
    };
    let c = RunConfig::resolve(&[&file, &flags]).unwrap();
    assert_eq!(c.ratio_threshold, 0.7);
    assert_eq!(c.rng_seed, 9);
    assert_eq!(c.ransac().seed, 9);
    assert_eq!(
        c.detection_threshold,
        RunConfig::default().detection_threshold
    );
}

#[test]
fn config_file_and_flags() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.json");
    std::fs::write(&p, r#"{"filter_sizes": [9, 15, 21], "lambda_rec": 4.0}"#).unwrap();
    let c = RunConfig::load(Some(&p), &PartialConfig::default()).unwrap();
    assert_eq!(c.scales, 3);
    assert_eq!(c.scale_specs().unwrap().len(), 3);
    assert_eq!(c.weights().lambda_rec, 4.0);

    let flags = PartialConfig {
        scales: Some(2),
        ..PartialConfig::default()
    };
    assert_eq!(
        RunConfig::load(Some(&p), &flags)
            .unwrap()
            .pair_config()
            .unwrap()
            .scales
            .len(),
        2
    );
}

#[test]
fn config_rejects_bad_input() {
    assert!(PartialConfig::from_json(r#"{"unknown_key": 1}"#).is_err());
    assert!(PartialConfig::from_json("{").is_err());
    for json in [
        r#"{"scales": 0}"#,
        r#"{"scales": 6}"#,
        r#"{"filter_sizes": [10]}"#,
        r#"{"ransac_confidence": 1.0}"#,
        r#"{"ratio_threshold": -0.1}"#,
        r#"{"lambda_adv": -1.0}"#,
        r#"{"ransac_max_iters": 0}"#,
    ] {
        let p = PartialConfig::from_json(json).unwrap();
        assert!(RunConfig::resolve(&[&p]).is_err(), "{json}");
    }
}
