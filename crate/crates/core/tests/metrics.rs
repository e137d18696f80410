use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use svastin::attack::quantize_clamp;
use svastin::metrics::{fid, frechet_distance, mse, psnr, psnr_from_mse, ssim, PairMetrics};
use svastin::victim::{CnnConfig, ToyCnn};
use svastin::Tensor;

fn video(seed: u64, shape: &[usize]) -> Tensor<f32> {
    Tensor::uniform(shape, 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn psnr_is_a_function_of_mse(seed in any::<u64>(), amp in 0.0f32..0.3) {
        let x = quantize_clamp(&video(seed, &[3, 2, 12, 12]));
        let noise = video(seed ^ 7, &[3, 2, 12, 12]).map(|v| (v - 0.5) * amp);
        let y = quantize_clamp(&x.add(&noise));
        let m = PairMetrics::compute(&y, &x).unwrap();
        prop_assert_eq!(m.psnr, psnr_from_mse(m.mse));
        prop_assert_eq!(m.mse, mse(&y, &x).unwrap());
        if m.mse > 0.0 {
            prop_assert!((m.psnr - (10.0 * (65025.0 / m.mse).log10())).abs() < 1e-9);
        }
    }

    #[test]
    fn ssim_is_one_on_identical_and_at_most_one_otherwise(seed in any::<u64>(), w in 2usize..20) {
        let x = video(seed, &[1, 2, w, 14]);
        prop_assert!((ssim(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        let y = video(seed ^ 3, &[1, 2, w, 14]);
        prop_assert!(ssim(&x, &y).unwrap() <= 1.0 + 1e-12);
    }

    #[test]
    fn quantisation_is_idempotent_and_8bit(seed in any::<u64>()) {
        let x = video(seed, &[2, 2, 4, 4]).map(|v| v * 1.6 - 0.3);
        let q = quantize_clamp(&x);
        prop_assert_eq!(&quantize_clamp(&q), &q);
        for &v in q.data() {
            prop_assert!((0.0..=1.0).contains(&v));
            prop_assert_eq!((v * 255.0).round() / 255.0, v);
        }
    }

    #[test]
    fn frechet_distance_is_symmetric_and_nonnegative(seed in any::<u64>(), d in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Tensor::<f64>::normal(&[d, d + 2], 1.0, &mut rng);
        let b = Tensor::<f64>::normal(&[d, d + 2], 1.0, &mut rng);
        let gram = |t: &Tensor<f64>| {
            let m = DMatrix::from_row_slice(d, d + 2, t.data());
            &m * m.transpose()
        };
        let (ca, cb) = (gram(&a), gram(&b));
        let ma = DVector::from_fn(d, |i, _| i as f64);
        let mb = DVector::from_element(d, 0.5);
        let ab = frechet_distance(&ma, &ca, &mb, &cb, 1e-6).unwrap();
        let ba = frechet_distance(&mb, &cb, &ma, &ca, 1e-6).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() <= 1e-8 * ab.max(1.0));
        prop_assert!(frechet_distance(&ma, &ca, &ma, &ca, 1e-6).unwrap() <= 1e-6);
    }
}

#[test]
fn fid_of_a_set_with_itself_vanishes() {
    let f = ToyCnn::<f32>::new(CnnConfig::default()).unwrap();
    let set: Vec<Tensor<f32>> = (0..6).map(|s| video(s, &[3, 8, 32, 32])).collect();
    assert!(fid(&set, &set, &f).unwrap() <= 1e-6);
    let other: Vec<Tensor<f32>> = (10..16).map(|s| video(s, &[3, 8, 32, 32]).map(|v| v * 0.5)).collect();
    assert!(fid(&set, &other, &f).unwrap() > 1e-3);
}

#[test]
fn identical_videos_have_infinite_psnr() {
    let x = video(1, &[3, 2, 8, 8]);
    assert_eq!(psnr(&x, &x).unwrap(), f64::INFINITY);
    assert_eq!(mse(&x, &x).unwrap(), 0.0);
}
