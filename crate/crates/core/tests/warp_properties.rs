use air_core::deform::{fuse_fields, DisplacementField, MaptConfig};
use air_core::tensor::Matrix;
use air_core::warp::{bilinear_sample_gradients, bilinear_sample_matrix, identity_grid};
use proptest::prelude::*;

fn image(h: usize, w: usize, px: &[f64]) -> Matrix<f64> {
    Matrix::from_fn(h, w, |r, c| px[r * w + c])
}

fn sized() -> impl Strategy<Value = (usize, usize, Vec<f64>, Vec<f64>)> {
    (2usize..10, 2usize..10).prop_flat_map(|(h, w)| {
        (
            Just(h),
            Just(w),
            proptest::collection::vec(0.0f64..1.0, h * w),
            proptest::collection::vec(-1.2f64..1.2, 2 * h * w),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn zero_field_is_identity((h, w, px, _) in sized()) {
        let img = image(h, w, &px);
        let out = bilinear_sample_matrix(&img, &identity_grid(h, w).unwrap(), &DisplacementField::zeros(h, w)).unwrap();
        prop_assert_eq!(out, img);
    }

    #[test]
    fn samples_stay_within_the_input_range((h, w, px, off) in sized()) {
        let img = image(h, w, &px);
        let field = DisplacementField::new(h, w, Matrix::from_vec(h * w, 2, off).unwrap()).unwrap();
        let out = bilinear_sample_matrix(&img, &identity_grid(h, w).unwrap(), &field).unwrap();
        let lo = px.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = px.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for &v in out.data() {
            prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
        }
    }

    #[test]
    fn constant_images_are_invariant((h, w, _, off) in sized(), value in 0.0f64..1.0) {
        let img = Matrix::filled(h, w, value);
        let field = DisplacementField::new(h, w, Matrix::from_vec(h * w, 2, off).unwrap()).unwrap();
        let out = bilinear_sample_matrix(&img, &identity_grid(h, w).unwrap(), &field).unwrap();
        for &v in out.data() {
            prop_assert!((v - value).abs() < 1e-12);
        }
    }

    #[test]
    fn sampling_is_linear_in_the_image((h, w, px, off) in sized(), a in -2.0f64..2.0) {
        let img = image(h, w, &px);
        let field = DisplacementField::new(h, w, Matrix::from_vec(h * w, 2, off).unwrap()).unwrap();
        let grid = identity_grid(h, w).unwrap();
        let base = bilinear_sample_matrix(&img, &grid, &field).unwrap();
        let scaled = bilinear_sample_matrix(&img.map(|v| a * v), &grid, &field).unwrap();
        for (s, b) in scaled.data().iter().zip(base.data()) {
            prop_assert!((s - a * b).abs() < 1e-12);
        }
    }

    #[test]
    fn image_gradient_is_the_adjoint_of_sampling((h, w, px, off) in sized(), up in proptest::collection::vec(-1.0f64..1.0, 81)) {
        // <sample(x), u> == <x, dsample^T u> because sampling is linear in x
        let img = image(h, w, &px);
        let field = DisplacementField::new(h, w, Matrix::from_vec(h * w, 2, off).unwrap()).unwrap();
        let grid = identity_grid(h, w).unwrap();
        let upstream = Matrix::from_fn(h, w, |r, c| up[r * w + c]);
        let out = bilinear_sample_matrix(&img, &grid, &field).unwrap();
        let g = bilinear_sample_gradients(&img, &grid, &field, &upstream).unwrap();
        let lhs: f64 = out.data().iter().zip(upstream.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = img.data().iter().zip(g.moving.data()).map(|(a, b)| a * b).sum();
        prop_assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn fusion_is_a_convex_combination(
        logits in proptest::collection::vec(-4.0f64..4.0, 1..5),
        vals in proptest::collection::vec(-1.0f64..1.0, 5 * 2 * 9),
    ) {
        let k = logits.len();
        let fields: Vec<_> = (0..k)
            .map(|s| DisplacementField::new(3, 3, Matrix::from_vec(9, 2, vals[s * 18..(s + 1) * 18].to_vec()).unwrap()).unwrap())
            .collect();
        let cfg = MaptConfig::with_logits(vec![2; k], logits).unwrap();
        let w = cfg.weights();
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(w.iter().all(|&x| x > 0.0));
        let fused = fuse_fields(&fields, &cfg).unwrap();
        for i in 0..9 {
            for ch in 0..2 {
                let expect: f64 = fields.iter().zip(&w).map(|(f, wi)| wi * f.offsets().get(i, ch)).sum();
                prop_assert!((fused.offsets().get(i, ch) - expect).abs() < 1e-12);
                let lo = fields.iter().map(|f| f.offsets().get(i, ch)).fold(f64::INFINITY, f64::min);
                let hi = fields.iter().map(|f| f.offsets().get(i, ch)).fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(fused.offsets().get(i, ch) >= lo - 1e-12 && fused.offsets().get(i, ch) <= hi + 1e-12);
            }
        }
    }
}
