use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use scnet::data::{draw_crop, sample_for_crop, SamplerConfig};
use scnet::density::{generate_density, make_kernel, GaussianKernelSpec, Point};
use scnet::tensor::kernels::{
    avg_pool2d_forward, conv2d_forward, pixel_shuffle, pixel_unshuffle, resize_bilinear_forward,
    resize_nearest_forward,
};
use scnet::tensor::{ConvGeometry, Shape, Tensor};
use scnet::train::{EvalResult, ImageCount};

fn tensor(shape: Shape, values: Vec<f64>) -> Tensor<f64> {
    Tensor::from_vec(shape, values).unwrap()
}

fn points_in(h: usize, w: usize, max: usize) -> impl Strategy<Value = Vec<Point>> {
    prop::collection::vec((0.0..w as f64, 0.0..h as f64), 0..=max)
        .prop_map(|v| v.into_iter().map(|(x, y)| Point::new(x, y)).collect())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv_output_extent_formula(
        h in 1usize..20, w in 1usize..20, k in 1usize..4,
        stride in 1usize..4, pad in 0usize..3, dil in 1usize..4,
    ) {
        let g = ConvGeometry::new(stride, pad, dil);
        let x = Tensor::<f64>::full(Shape::new(1, 2, h, w), 1.0);
        let wt = Tensor::<f64>::full(Shape::new(3, 2, k, k), 1.0);
        let effective = dil * (k - 1) + 1;
        let result = conv2d_forward(&x, &wt, None, g);
        if effective > h + 2 * pad || effective > w + 2 * pad {
            prop_assert!(result.is_err());
        } else {
            let s = result.unwrap().shape();
            prop_assert_eq!(s.h, (h + 2 * pad - effective) / stride + 1);
            prop_assert_eq!(s.w, (w + 2 * pad - effective) / stride + 1);
            prop_assert_eq!(s.c, 3);
        }
    }

    #[test]
    fn pixel_shuffle_is_a_bijection(
        r in prop::sample::select(vec![2usize, 4]), c in 1usize..3,
        h in 1usize..5, w in 1usize..5, seed in any::<u64>(),
    ) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = Shape::new(1, c * r * r, h, w);
        let x = tensor(shape, (0..shape.len()).map(|_| rng.gen::<f64>()).collect());
        let y = pixel_shuffle(&x, r).unwrap();
        prop_assert_eq!(y.shape(), Shape::new(1, c, h * r, w * r));
        let back = pixel_unshuffle(&y, r).unwrap();
        prop_assert_eq!(back.data(), x.data());
        let mut a = x.data().to_vec();
        let mut b = y.data().to_vec();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        prop_assert_eq!(a, b);
    }

    #[test]
    fn resizing_preserves_constants(
        v in -5.0f64..5.0, h in 1usize..9, w in 1usize..9, oh in 1usize..20, ow in 1usize..20,
    ) {
        let x = Tensor::full(Shape::new(1, 2, h, w), v);
        for y in [resize_nearest_forward(&x, oh, ow).unwrap(), resize_bilinear_forward(&x, oh, ow).unwrap()] {
            prop_assert_eq!(y.shape(), Shape::new(1, 2, oh, ow));
            prop_assert!(y.data().iter().all(|&u| (u - v).abs() < 1e-12));
        }
    }

    #[test]
    fn tiling_mean_pool_keeps_mass(
        kh in 1usize..4, kw in 1usize..4, th in 1usize..5, tw in 1usize..5,
        values in prop::collection::vec(-1.0f64..1.0, 144),
    ) {
        let shape = Shape::new(1, 1, kh * th, kw * tw);
        let x = tensor(shape, values[..shape.len()].to_vec());
        let y = avg_pool2d_forward(&x, (kh, kw), (kh, kw)).unwrap();
        prop_assert!((y.sum() * (kh * kw) as f64 - x.sum()).abs() < 1e-9);
    }

    #[test]
    fn density_mass_equals_count(h in 8usize..80, w in 8usize..80, seed in any::<u64>()) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.gen_range(0..60);
        let pts: Vec<Point> = (0..n)
            .map(|_| Point::new(rng.gen_range(0.0..w as f64), rng.gen_range(0.0..h as f64)))
            .collect();
        let map = generate_density(&pts, h, w, &GaussianKernelSpec::default()).unwrap();
        prop_assert!((map.count() - n as f64).abs() < 1e-9);
        prop_assert!(map.grid().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn density_is_additive_and_deterministic(a in points_in(40, 50, 20), b in points_in(40, 50, 20)) {
        let spec = GaussianKernelSpec::default();
        let da = generate_density(&a, 40, 50, &spec).unwrap();
        let db = generate_density(&b, 40, 50, &spec).unwrap();
        let all: Vec<Point> = a.iter().chain(&b).copied().collect();
        let dab = generate_density(&all, 40, 50, &spec).unwrap();
        for ((x, y), z) in da.grid().iter().zip(db.grid()).zip(dab.grid()) {
            prop_assert!((x + y - z).abs() < 1e-12);
        }
        let again = generate_density(&all, 40, 50, &spec).unwrap();
        prop_assert_eq!(again.grid(), dab.grid());
    }

    #[test]
    fn online_samples_are_geometrically_sound(
        h in 32usize..90, w in 32usize..90, out in prop::sample::select(vec![32usize, 48, 64]),
        pts in points_in(32, 32, 30), seed in any::<u64>(),
    ) {
        let spec = GaussianKernelSpec::default();
        let stencil = make_kernel(&spec).unwrap();
        let cfg = SamplerConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let crop = draw_crop(h, w, &cfg, &mut rng).unwrap();
        prop_assert!(crop.row + crop.side <= h && crop.col + crop.side <= w);
        prop_assert!(2 * crop.side >= h.min(w));
        let image = Tensor::<f32>::full(Shape::new(1, 1, h, w), 0.5);
        let s = sample_for_crop(&image, &pts, crop, out, &stencil, spec).unwrap();
        let inside = pts.iter().filter(|p| crop.contains(p)).count();
        prop_assert_eq!(s.true_count, inside);
        prop_assert!(s.points.iter().all(|p| p.inside(out, out)));
        prop_assert!((s.target.count() - inside as f64).abs() < 1e-9);
        prop_assert_eq!(s.input.shape(), Shape::new(1, 1, out, out));
    }

    #[test]
    fn mse_never_below_mae(pairs in prop::collection::vec((0.0f64..500.0, 0.0f64..500.0), 1..40)) {
        let per_image = pairs
            .into_iter()
            .map(|(t, p)| ImageCount { true_count: t, predicted_count: p })
            .collect();
        let r = EvalResult::from_counts(per_image).unwrap();
        prop_assert!(r.mse + 1e-12 >= r.mae);
    }
}
