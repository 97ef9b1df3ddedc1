use dpm_core::autodiff::{Tape, Value};
use dpm_core::dpm::{
    crossing_fraction, oracle_project, project_column, project_volume, to_normalized, Band, PoolMode,
};
use dpm_core::Tensor;
use proptest::prelude::*;

fn project(img: &Value, up: &[f64], lo: &[f64], m: usize, mode: PoolMode) -> Vec<f64> {
    let tape = Tape::new();
    let im = tape.constant(img.clone());
    let u = tape.constant(Value::new(vec![up.len()], up.to_vec()).unwrap());
    let l = tape.constant(Value::new(vec![lo.len()], lo.to_vec()).unwrap());
    let col = project_column(&tape, im, u, l, m, mode).unwrap();
    tape.value(col).data().to_vec()
}

/// Slice size, top row per column, band thickness in rows, and pixel values.
fn integer_band() -> impl Strategy<Value = (usize, usize, Vec<usize>, usize, Vec<f64>)> {
    (4usize..40, 1usize..12).prop_flat_map(|(h, w)| {
        (1..h).prop_flat_map(move |thick| {
            (
                Just(h),
                Just(w),
                prop::collection::vec(0..h - thick, w),
                Just(thick),
                prop::collection::vec(0.0f64..1.0, h * w),
            )
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn mean_projection_matches_row_oracle((h, w, tops, thick, pixels) in integer_band()) {
        let img = Value::new(vec![h, w], pixels).unwrap();
        let bottoms: Vec<usize> = tops.iter().map(|t| t + thick).collect();
        let up: Vec<f64> = tops.iter().map(|&r| to_normalized(r as f64, h)).collect();
        let lo: Vec<f64> = bottoms.iter().map(|&r| to_normalized(r as f64, h)).collect();
        let got = project(&img, &up, &lo, thick + 1, PoolMode::Mean);
        let want = oracle_project(&img, &tops, &bottoms, PoolMode::Mean).unwrap();
        let mad = got.iter().zip(want.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / w as f64;
        prop_assert!(mad <= 1e-6, "mean abs diff {mad}");
        let got = project(&img, &up, &lo, thick + 1, PoolMode::Max);
        let want = oracle_project(&img, &tops, &bottoms, PoolMode::Max).unwrap();
        for (a, b) in got.iter().zip(want.data()) {
            prop_assert!((a - b).abs() <= 1e-9);
        }
    }

    #[test]
    fn max_pool_dominates_mean((h, w, pixels, a, b) in (4usize..32, 1usize..8)
        .prop_flat_map(|(h, w)| (Just(h), Just(w), prop::collection::vec(0.0f64..1.0, h * w),
            prop::collection::vec(-1.0f64..1.0, w), prop::collection::vec(-1.0f64..1.0, w))))
    {
        let img = Value::new(vec![h, w], pixels).unwrap();
        let mean = project(&img, &a, &b, 17, PoolMode::Mean);
        let max = project(&img, &a, &b, 17, PoolMode::Max);
        for (x, y) in max.iter().zip(&mean) {
            prop_assert!(x + 1e-12 >= *y);
        }
    }

    #[test]
    fn swapping_curves_leaves_mean_unchanged((h, w, pixels, a, b) in (4usize..32, 1usize..8)
        .prop_flat_map(|(h, w)| (Just(h), Just(w), prop::collection::vec(0.0f64..1.0, h * w),
            prop::collection::vec(-1.0f64..1.0, w), prop::collection::vec(-1.0f64..1.0, w))))
    {
        // the sample set is symmetric in the two endpoints
        let img = Value::new(vec![h, w], pixels).unwrap();
        let ab = project(&img, &a, &b, 16, PoolMode::Mean);
        let ba = project(&img, &b, &a, 16, PoolMode::Mean);
        for (x, y) in ab.iter().zip(&ba) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn projection_stays_within_pixel_range((h, w, pixels, a, b) in (2usize..32, 1usize..8)
        .prop_flat_map(|(h, w)| (Just(h), Just(w), prop::collection::vec(0.0f64..1.0, h * w),
            prop::collection::vec(-1.5f64..1.5, w), prop::collection::vec(-1.5f64..1.5, w))))
    {
        let img = Value::new(vec![h, w], pixels.clone()).unwrap();
        let lo = pixels.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = pixels.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        for v in project(&img, &a, &b, 8, PoolMode::Mean) {
            prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
        }
    }
}

#[test]
fn crossing_fraction_of_ordered_and_crossed_curves() {
    let ordered = Tensor::<f64>::new(vec![3, 2], vec![-0.5, -0.5, 0.0, 0.0, 0.5, 0.5]).unwrap();
    assert_eq!(crossing_fraction(&ordered).unwrap(), 0.0);
    let crossed = Tensor::<f64>::new(vec![3, 2], vec![-0.5, 0.6, 0.0, 0.0, 0.5, 0.5]).unwrap();
    assert_eq!(crossing_fraction(&crossed).unwrap(), 0.5);
}

#[test]
fn volume_projection_uses_band_layers() {
    // rows 0..8 hold value r; b2 spans layers 0..1, b3 spans 1..2
    let (d, h, w) = (2, 9, 3);
    let vol = Tensor::<f32>::from_fn(&[d, h, w], |i| ((i / w) % h) as f32).unwrap();
    let rows = [1.0, 3.0, 7.0];
    let curves = Tensor::<f64>::from_fn(&[d, 3, w], |i| to_normalized(rows[(i / w) % 3], h)).unwrap();
    let b2 = project_volume(&vol, &curves, Band::B2.layers(), 64, PoolMode::Mean).unwrap();
    let b3 = project_volume(&vol, &curves, Band::B3.layers(), 64, PoolMode::Mean).unwrap();
    assert_eq!(b2.0.dims(), &[d, w]);
    for &v in b2.0.data() {
        assert!((v - 2.0).abs() < 1e-5);
    }
    for &v in b3.0.data() {
        assert!((v - 5.0).abs() < 1e-5);
    }
}

#[test]
fn volume_projection_rejects_mismatched_curves() {
    let vol = Tensor::<f32>::zeros(&[2, 8, 4]).unwrap();
    let curves = Tensor::<f64>::zeros(&[3, 3, 4]).unwrap();
    assert!(project_volume(&vol, &curves, (0, 1), 8, PoolMode::Mean).is_err());
    let curves = Tensor::<f64>::zeros(&[2, 3, 5]).unwrap();
    assert!(project_volume(&vol, &curves, (0, 1), 8, PoolMode::Mean).is_err());
}
