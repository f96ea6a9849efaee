use proptest::prelude::*;

use sscsr::augment::{apply_batch, DihedralOp};
use sscsr::imaging::{bicubic_resize, rgb_to_y, ImageF, ImageU8};
use sscsr::metrics::{psnr_y, ssim_y};
use sscsr::models::ParamSet;
use sscsr::tensor::{ops, Tensor};
use sscsr::train::ema_update;

fn op() -> impl Strategy<Value = DihedralOp> {
    (0usize..8).prop_map(DihedralOp::from_index)
}

fn unit_image(w: usize, h: usize) -> impl Strategy<Value = ImageF> {
    prop::collection::vec(0.0f32..=1.0, 3 * w * h).prop_map(move |d| ImageF::new(w, h, d).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn u8_round_trip((w, h, data) in (1usize..9, 1usize..9).prop_flat_map(|(w, h)| (Just(w), Just(h), prop::collection::vec(any::<u8>(), 3 * w * h)))) {
        let img = ImageU8::new(w, h, data).unwrap();
        prop_assert_eq!(img.to_float().to_u8(), img);
    }

    #[test]
    fn pixel_shuffle_round_trip(n in 1usize..3, c in 1usize..3, r in 1usize..4, h in 1usize..5, w in 1usize..5) {
        let x = Tensor::<f32>::from_fn(&[n, c * r * r, h, w], |i| i as f32 * 0.5 - 3.0);
        let y = ops::pixel_shuffle(&x, r).unwrap();
        prop_assert_eq!(y.shape(), &[n, c, h * r, w * r]);
        prop_assert!(ops::pixel_unshuffle(&y, r).unwrap().bit_eq(&x));
    }

    #[test]
    fn dihedral_inverse_and_composition(a in op(), b in op(), side in 1usize..7, ch in 1usize..3) {
        let x = Tensor::<f32>::from_fn(&[2, ch, side, side], |i| (i * 7 % 13) as f32);
        let ab = DihedralOp::compose(a, b);
        prop_assert!(apply_batch(&[ab, ab], &x).unwrap().bit_eq(&a.apply(&b.apply(&x).unwrap()).unwrap()));
        prop_assert!(a.inverse().apply(&a.apply(&x).unwrap()).unwrap().bit_eq(&x));
    }

    #[test]
    fn bicubic_is_linear(x in unit_image(7, 6), y in unit_image(7, 6), a in -2.0f32..2.0, b in -2.0f32..2.0,
                         oh in 1usize..15, ow in 1usize..15) {
        let comb = ImageF::new(7, 6, x.data().iter().zip(y.data()).map(|(p, q)| a * p + b * q).collect()).unwrap();
        let lhs = bicubic_resize(&comb, oh, ow).unwrap();
        let (rx, ry) = (bicubic_resize(&x, oh, ow).unwrap(), bicubic_resize(&y, oh, ow).unwrap());
        for i in 0..lhs.data().len() {
            prop_assert!((lhs.data()[i] - (a * rx.data()[i] + b * ry.data()[i])).abs() < 1e-5);
        }
    }

    #[test]
    fn bicubic_preserves_constants(v in 0.0f32..1.0, w in 1usize..10, h in 1usize..10, oh in 1usize..20, ow in 1usize..20) {
        let img = ImageF::new(w, h, vec![v; 3 * w * h]).unwrap();
        prop_assert!(bicubic_resize(&img, oh, ow).unwrap().data().iter().all(|&o| (o - v).abs() < 1e-6));
    }

    #[test]
    fn luma_stays_in_studio_range(img in unit_image(5, 4)) {
        for y in rgb_to_y(&img) {
            prop_assert!((16.0 / 255.0 - 1e-6..=235.0 / 255.0 + 1e-6).contains(&y));
        }
    }

    #[test]
    fn metrics_are_dihedral_invariant(a in unit_image(13, 13), b in unit_image(13, 13), g in op()) {
        let t = |img: &ImageF| ImageF::from_tensor(&g.apply(&img.to_tensor()).unwrap(), 0).unwrap();
        prop_assert_eq!(psnr_y(&a, &b, 1).unwrap().to_bits(), psnr_y(&t(&a), &t(&b), 1).unwrap().to_bits());
        prop_assert_eq!(ssim_y(&a, &b, 0).unwrap().to_bits(), ssim_y(&t(&a), &t(&b), 0).unwrap().to_bits());
        let s = ssim_y(&a, &b, 0).unwrap();
        prop_assert!((-1.0..=1.0).contains(&s));
    }

    #[test]
    fn ema_is_a_convex_combination(t in prop::collection::vec(-5.0f32..5.0, 1..20), beta in 0.0f64..=1.0, shift in -3.0f32..3.0) {
        let o: Vec<f32> = t.iter().map(|v| v + shift).collect();
        let set = |v: &[f32]| { let mut p = ParamSet::new(); p.push("w", Tensor::new(vec![v.len()], v.to_vec()).unwrap()); p };
        let mut target = set(&t);
        ema_update(&mut target, &set(&o), beta).unwrap();
        for ((r, a), b) in target.get("w").unwrap().data().iter().zip(&t).zip(&o) {
            let (lo, hi) = (a.min(*b), a.max(*b));
            prop_assert!(*r >= lo && *r <= hi);
        }
    }
}
