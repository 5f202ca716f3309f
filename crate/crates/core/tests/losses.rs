mod common;

use pfgs::buffer::Image;
use pfgs::losses::{
    downsample_image, fft2d, frequency_loss, l1_loss, l1_loss_grad, progressive_multiscale_frequency_loss,
    progressive_multiscale_image_loss, psnr, total_loss, LoopWeights, LossWeights, PredictionPyramid,
    DEFAULT_SCALES, PSNR_SATURATED,
};
use proptest::prelude::*;
use rand::Rng;
use rustfft::num_complex::Complex;

use common::*;

fn random_image(r: &mut rand_chacha::ChaCha8Rng, w: usize, h: usize, c: usize) -> Image {
    Image::from_fn(w, h, c, |_, _, _| r.random::<f64>())
}

fn random_pyramid(seed: u64, w: usize, h: usize) -> PredictionPyramid {
    let mut r = rng(seed);
    let loops = (0..2)
        .map(|_| {
            DEFAULT_SCALES
                .iter()
                .map(|s| {
                    let k = (1.0 / s).round() as usize;
                    random_image(&mut r, w / k, h / k, 3)
                })
                .collect()
        })
        .collect();
    PredictionPyramid::new(DEFAULT_SCALES.to_vec(), loops).unwrap()
}

/// Block mean written out pixel by pixel.
fn literal_downsample(gt: &Image, k: usize, x: usize, y: usize, c: usize) -> f64 {
    let mut s = 0.0;
    for j in 0..k {
        for i in 0..k {
            s += gt.get(x * k + i, y * k + j, c);
        }
    }
    s / (k * k) as f64
}

fn literal_l1(pred: &Image, gt: &Image, k: usize) -> f64 {
    let (h, w, c) = pred.shape();
    let mut s = 0.0;
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                s += (pred.get(x, y, ch) - literal_downsample(gt, k, x, y, ch)).abs();
            }
        }
    }
    s / (h * w) as f64
}

fn direct_dft(values: &dyn Fn(usize, usize) -> f64, w: usize, h: usize, u: usize, v: usize) -> Complex<f64> {
    let mut acc = Complex::new(0.0, 0.0);
    for y in 0..h {
        for x in 0..w {
            let phase = -2.0 * std::f64::consts::PI * ((v * y) as f64 / h as f64 + (u * x) as f64 / w as f64);
            acc += Complex::new(phase.cos(), phase.sin()) * values(x, y);
        }
    }
    acc
}

fn literal_frequency(pred: &Image, gt: &Image, k: usize) -> f64 {
    let (h, w, c) = pred.shape();
    let mut s = 0.0;
    for ch in 0..c {
        let diff = |x: usize, y: usize| pred.get(x, y, ch) - literal_downsample(gt, k, x, y, ch);
        for v in 0..h {
            for u in 0..w {
                s += direct_dft(&diff, w, h, u, v).norm();
            }
        }
    }
    s / (h * w) as f64
}

#[test]
fn progressive_image_loss_matches_triple_sum() {
    for seed in 0..5 {
        let pyr = random_pyramid(seed, 16, 8);
        let gt = random_image(&mut rng(100 + seed), 16, 8, 3);
        let w = LoopWeights::default();
        let mut expected = 0.0;
        for l in 1..=2 {
            for (s, scale) in DEFAULT_SCALES.iter().enumerate() {
                let k = (1.0 / scale).round() as usize;
                expected += w.weight(l).unwrap() * literal_l1(pyr.get(l, s + 1), &gt, k);
            }
        }
        let got = progressive_multiscale_image_loss(&pyr, &gt, &w).unwrap();
        assert!((got - expected).abs() <= 1e-7, "{got} vs {expected}");
    }
}

#[test]
fn progressive_frequency_loss_matches_triple_sum() {
    for seed in 0..3 {
        let pyr = random_pyramid(10 + seed, 8, 8);
        let gt = random_image(&mut rng(200 + seed), 8, 8, 3);
        let w = LoopWeights::default();
        let mut expected = 0.0;
        for l in 1..=2 {
            for (s, scale) in DEFAULT_SCALES.iter().enumerate() {
                let k = (1.0 / scale).round() as usize;
                expected += w.weight(l).unwrap() * literal_frequency(pyr.get(l, s + 1), &gt, k);
            }
        }
        let got = progressive_multiscale_frequency_loss(&pyr, &gt, &w).unwrap();
        assert!((got - expected).abs() <= 1e-6, "{got} vs {expected}");
    }
}

#[test]
fn perfect_pyramid_has_zero_loss_and_one_mismatch_isolates_its_term() {
    let gt = random_image(&mut rng(3), 16, 16, 2);
    let perfect: Vec<Vec<Image>> = (0..2)
        .map(|_| DEFAULT_SCALES.iter().map(|s| downsample_image(&gt, *s).unwrap()).collect())
        .collect();
    let w = LoopWeights::default();
    let pyr = PredictionPyramid::new(DEFAULT_SCALES.to_vec(), perfect.clone()).unwrap();
    assert_eq!(progressive_multiscale_image_loss(&pyr, &gt, &w).unwrap(), 0.0);
    assert_eq!(progressive_multiscale_frequency_loss(&pyr, &gt, &w).unwrap(), 0.0);

    let mut broken = perfect.clone();
    let bad = random_image(&mut rng(4), 8, 8, 2);
    broken[0][1] = bad.clone();
    let pyr = PredictionPyramid::new(DEFAULT_SCALES.to_vec(), broken).unwrap();
    let target = downsample_image(&gt, 0.5).unwrap();
    let alone = 0.75 * frequency_loss(&bad, &target).unwrap();
    assert!((progressive_multiscale_frequency_loss(&pyr, &gt, &w).unwrap() - alone).abs() < 1e-12);

    // Zeroing a loop weight removes that loop exactly.
    let zeroed = LoopWeights(vec![0.0, 1.0]);
    assert_eq!(progressive_multiscale_image_loss(&pyr, &gt, &zeroed).unwrap(), 0.0);
}

#[test]
fn fft_matches_direct_dft_on_non_square_images() {
    let img = random_image(&mut rng(5), 6, 5, 1);
    let spectrum = fft2d(&img, 0);
    for v in 0..5 {
        for u in 0..6 {
            let d = direct_dft(&|x, y| img.get(x, y, 0), 6, 5, u, v);
            assert!((spectrum[v * 6 + u] - d).norm() < 1e-12);
        }
    }
}

#[test]
fn constant_image_frequency_loss_is_the_constant() {
    for (w, h, kappa) in [(8, 8, 0.3), (5, 7, 1.7), (1, 1, 0.25)] {
        let pred = Image::filled(w, h, 1, kappa);
        let gt = Image::zeros(w, h, 1);
        assert!((frequency_loss(&pred, &gt).unwrap() - kappa).abs() < 1e-12);
    }
}

#[test]
fn psnr_matches_literal_mse() {
    let mut r = rng(6);
    let a = random_image(&mut r, 9, 7, 3);
    let b = random_image(&mut r, 9, 7, 3);
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.data().len() as f64;
    assert!((psnr(&a, &b).unwrap() - 10.0 * (1.0 / mse).log10()).abs() < 1e-12);
    assert_eq!(psnr(&a, &a).unwrap(), PSNR_SATURATED);
    let shifted = Image::from_fn(9, 7, 3, |x, y, c| a.get(x, y, c) + 0.1);
    assert!((psnr(&shifted, &a).unwrap() - 20.0).abs() < 1e-9);
}

#[test]
fn l1_gradient_matches_finite_differences() {
    let mut r = rng(7);
    let pred = random_image(&mut r, 4, 3, 2);
    let gt = random_image(&mut r, 4, 3, 2);
    let grad = l1_loss_grad(&pred, &gt).unwrap();
    let h = 1e-7;
    for k in 0..pred.data().len() {
        let mut plus = pred.clone();
        let mut minus = pred.clone();
        plus.data_mut()[k] += h;
        minus.data_mut()[k] -= h;
        let fd = (l1_loss(&plus, &gt).unwrap() - l1_loss(&minus, &gt).unwrap()) / (2.0 * h);
        assert!((fd - grad.data()[k]).abs() < 1e-6);
    }
}

#[test]
fn shape_mismatches_are_errors() {
    let a = Image::zeros(4, 4, 3);
    let b = Image::zeros(4, 4, 1);
    assert!(l1_loss(&a, &b).is_err());
    assert!(frequency_loss(&a, &b).is_err());
    assert!(psnr(&a, &b).is_err());
    let pyr = PredictionPyramid::new(vec![1.0], vec![vec![a.clone()]]).unwrap();
    assert!(progressive_multiscale_image_loss(&pyr, &Image::zeros(5, 4, 3), &LoopWeights::default()).is_err());
    assert!(downsample_image(&Image::zeros(5, 4, 1), 0.5).is_err());
}

proptest! {
    #[test]
    fn l1_is_translation_invariant(seed in 0u64..1000, delta in -3.0f64..3.0) {
        let mut r = rng(seed);
        let a = random_image(&mut r, 5, 4, 3);
        let b = random_image(&mut r, 5, 4, 3);
        let shift = |img: &Image| Image::from_fn(5, 4, 3, |x, y, c| img.get(x, y, c) + delta);
        let base = l1_loss(&a, &b).unwrap();
        prop_assert!((l1_loss(&shift(&a), &shift(&b)).unwrap() - base).abs() <= 1e-12 * (1.0 + delta.abs()));
        prop_assert!(base >= 0.0);
        prop_assert!(frequency_loss(&a, &b).unwrap() >= 0.0);
    }

    #[test]
    fn total_loss_is_linear(a in 0.0f64..10.0, b in 0.0f64..10.0, c in 0.0f64..10.0, k in 0.0f64..5.0) {
        let w = LossWeights::default();
        let base = total_loss(a, b, c, &w);
        let scaled = total_loss(k * a, b, c, &w);
        prop_assert!((scaled - base - (k - 1.0) * 0.75 * a).abs() <= 1e-12 * (1.0 + base + scaled));
    }

    #[test]
    fn downsampling_preserves_constants(v in -5.0f64..5.0, k in 0usize..3) {
        let img = Image::filled(8, 8, 2, v);
        let r = 1.0 / (1usize << k) as f64;
        let small = downsample_image(&img, r).unwrap();
        prop_assert!(small.data().iter().all(|x| (x - v).abs() <= 1e-15 * (1.0 + v.abs())));
    }
}
