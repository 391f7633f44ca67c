mod common;

use common::{brute_nms, dense_hessian, hessian_weight, max_abs_diff, rand_img};
use dsurf::detector::{
    default_scales, detector_response, extract_keypoints, hessian_filters, read_keypoints_csv,
    write_keypoints_csv, ResponsePyramid, ScaleSpec,
};
use dsurf::image::{convolve_box_filter, integral, GrayImage};
use dsurf::synth::gaussian_blob;
use proptest::prelude::*;

#[test]
fn box_filters_match_textbook_stencils() {
    for size in [9, 15, 21, 27, 33] {
        let f = hessian_filters(&ScaleSpec::new(size).unwrap());
        let half = (size / 2) as isize;
        for (which, spec) in [("xx", &f.xx), ("yy", &f.yy), ("xy", &f.xy)] {
            let (top, left, stencil) = spec.dense_stencil();
            for dy in -half..=half {
                for dx in -half..=half {
                    let (r, c) = (dy - top, dx - left);
                    let got = if r >= 0
                        && c >= 0
                        && (r as usize) < stencil.len()
                        && (c as usize) < stencil[0].len()
                    {
                        stencil[r as usize][c as usize]
                    } else {
                        0.0
                    };
                    assert!(
                        (got - hessian_weight(size, which, dy, dx)).abs() < 1e-15,
                        "L={size} {which} ({dy},{dx})"
                    );
                }
            }
        }
    }
}

#[test]
fn responses_match_dense_convolution_everywhere() {
    let img = rand_img(11, 40, 44);
    for spec in [ScaleSpec::new(9).unwrap(), ScaleSpec::new(21).unwrap()] {
        let pyr = detector_response(&img, &[spec]).unwrap();
        let lv = &pyr.levels()[0];
        let [lxx, lyy, lxy, det] = dense_hessian(&img, spec.filter_size());
        assert!(max_abs_diff(lv.lxx.as_slice(), lxx.as_slice()) < 1e-9);
        assert!(max_abs_diff(lv.lyy.as_slice(), lyy.as_slice()) < 1e-9);
        assert!(max_abs_diff(lv.lxy.as_slice(), lxy.as_slice()) < 1e-9);
        assert!(max_abs_diff(lv.det.as_slice(), det.as_slice()) < 1e-9);
    }
}

#[test]
fn constant_image_has_zero_interior_response() {
    let img = GrayImage::filled(50, 50, 0.6).unwrap();
    let pyr = detector_response(&img, &default_scales()).unwrap();
    for (s, spec) in pyr.scales().iter().enumerate() {
        let r = spec.radius();
        for y in r..50 - r {
            for x in r..50 - r {
                assert!(pyr.det(s).get(y, x).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn blob_peak_at_centre_agrees_with_dense_oracle() {
    let img = gaussian_blob(41, 41, 20.0, 20.0, 2.0, 0.8);
    let pyr = detector_response(&img, &default_scales()).unwrap();
    let argmax = |m: &GrayImage| {
        let (i, _) = m
            .as_slice()
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap();
        (i / m.width(), i % m.width())
    };
    let (y, x) = argmax(pyr.det(0));
    assert!(y.abs_diff(20) <= 1 && x.abs_diff(20) <= 1);
    let [_, _, _, det] = dense_hessian(&img, 9);
    assert_eq!(argmax(&det), (y, x));
}

#[test]
fn nms_matches_exhaustive_oracle() {
    for seed in 0..4 {
        let img = rand_img(100 + seed, 48, 52);
        let pyr = detector_response(&img, &default_scales()).unwrap();
        let mut want = brute_nms(&pyr, 1e-4);
        want.sort_by(|a, b| {
            b.response
                .total_cmp(&a.response)
                .then(a.y.cmp(&b.y))
                .then(a.x.cmp(&b.x))
                .then(a.scale_index.cmp(&b.scale_index))
        });
        let got = extract_keypoints(&pyr, 1e-4);
        assert!(!got.is_empty());
        assert_eq!(got, want);
    }
}

#[test]
fn nms_on_random_pyramid_levels() {
    // det maps drawn directly at random rather than from an image
    let scales: Vec<_> = default_scales()[..3].to_vec();
    let parts = (0..3)
        .map(|i| {
            (
                rand_img(200 + i, 30, 30),
                rand_img(300 + i, 30, 30),
                common::rand_signed(400 + i, 30, 30),
            )
        })
        .collect();
    let pyr = ResponsePyramid::from_parts(scales, parts).unwrap();
    let mut want = brute_nms(&pyr, 0.0);
    want.sort_by(|a, b| b.response.total_cmp(&a.response));
    let got = extract_keypoints(&pyr, 0.0);
    assert_eq!(got.len(), want.len());
    assert_eq!(got, want);
}

#[test]
fn keypoints_respect_threshold_and_bounds() {
    let img = rand_img(7, 60, 60);
    let pyr = detector_response(&img, &default_scales()).unwrap();
    let kps = extract_keypoints(&pyr, 2e-4);
    for k in &kps {
        assert!(k.response > 2e-4);
        assert!(k.x < 60 && k.y < 60);
        assert!(k.laplacian_sign == 1 || k.laplacian_sign == -1);
    }
    assert_eq!(kps, extract_keypoints(&pyr, 2e-4));
}

#[test]
fn csv_round_trip_and_header() {
    let img = rand_img(8, 50, 50);
    let kps = extract_keypoints(&detector_response(&img, &default_scales()).unwrap(), 1e-4);
    let mut buf = Vec::new();
    write_keypoints_csv(&mut buf, &kps).unwrap();
    assert!(buf.starts_with(b"x,y,scale_index,response,laplacian_sign\n"));
    assert_eq!(read_keypoints_csv(buf.as_slice()).unwrap(), kps);
}

#[test]
fn flip_equivariance() {
    let img = rand_img(9, 40, 45);
    let a = detector_response(&img, &default_scales()).unwrap();
    let b = detector_response(&img.flip_horizontal(), &default_scales()).unwrap();
    for s in 0..a.len() {
        assert!(max_abs_diff(a.det(s).flip_horizontal().as_slice(), b.det(s).as_slice()) < 1e-6);
    }
}

#[test]
fn intensity_scaling_is_quadratic() {
    let img = rand_img(10, 40, 40);
    let c = 1.7;
    let a = detector_response(&img, &default_scales()).unwrap();
    let b = detector_response(&img.affine(c, 0.0).unwrap(), &default_scales()).unwrap();
    for s in 0..a.len() {
        for (x, y) in a.det(s).as_slice().iter().zip(b.det(s).as_slice()) {
            assert!((c * c * x - y).abs() <= 1e-6 * (c * c * x).abs().max(1e-6));
        }
    }
}

#[test]
fn offset_invariance_in_interior() {
    let img = rand_img(12, 45, 45);
    let a = detector_response(&img, &default_scales()).unwrap();
    let b = detector_response(&img.affine(1.0, 0.3).unwrap(), &default_scales()).unwrap();
    for (s, spec) in a.scales().iter().enumerate() {
        let r = spec.radius();
        for y in r..45 - r {
            for x in r..45 - r {
                assert!((a.det(s).get(y, x) - b.det(s).get(y, x)).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn too_small_images_are_rejected() {
    let img = rand_img(13, 20, 40);
    assert!(detector_response(&img, &default_scales()).is_err());
    assert!(detector_response(&img, &default_scales()[..2]).is_ok());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn dyy_is_transpose_of_dxx(size in prop::sample::select(vec![9usize, 15, 21, 27, 33])) {
        let f = hessian_filters(&ScaleSpec::new(size).unwrap());
        prop_assert_eq!(&f.yy, &f.xx.transposed());
        for spec in [&f.xx, &f.yy, &f.xy] {
            prop_assert!(spec.dc_gain().abs() < 1e-15);
        }
    }

    #[test]
    fn det_is_cross_weighted_product(seed in 0u64..10_000, size in prop::sample::select(vec![9usize, 15])) {
        let img = rand_img(seed, 24, 24);
        let spec = ScaleSpec::new(size).unwrap();
        let ii = integral(&img);
        let f = hessian_filters(&spec);
        let (xx, yy, xy) = (
            convolve_box_filter(&ii, &f.xx),
            convolve_box_filter(&ii, &f.yy),
            convolve_box_filter(&ii, &f.xy),
        );
        let pyr = detector_response(&img, &[spec]).unwrap();
        for i in 0..img.len() {
            let want = xx.as_slice()[i] * yy.as_slice()[i] - 0.81 * xy.as_slice()[i] * xy.as_slice()[i];
            prop_assert!((pyr.det(0).as_slice()[i] - want).abs() < 1e-9);
        }
    }

    #[test]
    fn transposed_image_has_transposed_det(seed in 0u64..10_000) {
        let img = rand_img(seed, 30, 26);
        let a = detector_response(&img, &default_scales()[..2]).unwrap();
        let b = detector_response(&img.transpose(), &default_scales()[..2]).unwrap();
        for s in 0..2 {
            prop_assert!(max_abs_diff(a.det(s).transpose().as_slice(), b.det(s).as_slice()) < 1e-9);
        }
    }
}
