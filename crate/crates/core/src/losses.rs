//! Render loss, progressive multiscale image and frequency losses, the
//! weighted total, pyramid downsampling and PSNR.
//!
//! Normalization: every per-image term is a mean over pixels of a sum over
//! channels. Spectra use the unnormalized DFT (the DC bin holds `H·W·mean`)
//! and are compared by the modulus of the complex difference.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::buffer::Image;
use crate::error::{Error, Result};

/// `psnr` of identical images.
pub const PSNR_SATURATED: f64 = f64::INFINITY;

/// Mean over pixels of the per-pixel L1 norm across channels.
pub fn l1_loss(pred: &Image, gt: &Image) -> Result<f64> {
    pred.ensure_same_shape(gt, "l1_loss")?;
    let sum: f64 = pred.data().iter().zip(gt.data()).map(|(a, b)| (a - b).abs()).sum();
    Ok(sum / pred.pixel_count() as f64)
}

/// `∂ l1_loss / ∂ pred`, using `sign(0) = 0`.
pub fn l1_loss_grad(pred: &Image, gt: &Image) -> Result<Image> {
    pred.ensure_same_shape(gt, "l1_loss_grad")?;
    let inv = 1.0 / pred.pixel_count() as f64;
    let data = pred
        .data()
        .iter()
        .zip(gt.data())
        .map(|(a, b)| {
            let d = a - b;
            if d > 0.0 {
                inv
            } else if d < 0.0 {
                -inv
            } else {
                0.0
            }
        })
        .collect();
    Image::from_vec(pred.width(), pred.height(), pred.channels(), data)
}

fn block_size(factor: f64) -> Result<usize> {
    if !(factor > 0.0 && factor <= 1.0) {
        return Err(Error::Domain(format!("scale factor must be in (0, 1], got {factor}")));
    }
    let inv = 1.0 / factor;
    let block = inv.round();
    if (inv - block).abs() > 1e-9 {
        return Err(Error::Domain(format!("scale factor {factor} is not 1/k for an integer k")));
    }
    Ok(block as usize)
}

/// Area-average pooling by `factor ∈ {1, 1/2, 1/4, …}`.
pub fn downsample_image(img: &Image, factor: f64) -> Result<Image> {
    let block = block_size(factor)?;
    if block == 1 {
        return Ok(img.clone());
    }
    if img.width() % block != 0 || img.height() % block != 0 {
        return Err(Error::Domain(format!(
            "{}x{} image is not divisible into {block}x{block} blocks",
            img.width(),
            img.height()
        )));
    }
    let (w, h, c) = (img.width() / block, img.height() / block, img.channels());
    let norm = 1.0 / (block * block) as f64;
    Ok(Image::from_fn(w, h, c, |x, y, ch| {
        let mut sum = 0.0;
        for dy in 0..block {
            for dx in 0..block {
                sum += img.get(x * block + dx, y * block + dy, ch);
            }
        }
        sum * norm
    }))
}

/// Unnormalized 2D DFT of one channel, row-major.
pub fn fft2d(img: &Image, channel: usize) -> Vec<Complex<f64>> {
    let (w, h) = (img.width(), img.height());
    let mut data: Vec<Complex<f64>> = (0..h)
        .flat_map(|y| (0..w).map(move |x| (x, y)))
        .map(|(x, y)| Complex::new(img.get(x, y, channel), 0.0))
        .collect();
    let mut planner = FftPlanner::<f64>::new();
    let row_fft = planner.plan_fft_forward(w);
    for row in data.chunks_exact_mut(w) {
        row_fft.process(row);
    }
    let col_fft = planner.plan_fft_forward(h);
    let mut column = vec![Complex::new(0.0, 0.0); h];
    for x in 0..w {
        for y in 0..h {
            column[y] = data[y * w + x];
        }
        col_fft.process(&mut column);
        for y in 0..h {
            data[y * w + x] = column[y];
        }
    }
    data
}

/// `(1/Ω) Σ_channels Σ_bins |FFT(pred) − FFT(gt)|`.
pub fn frequency_loss(pred: &Image, gt: &Image) -> Result<f64> {
    pred.ensure_same_shape(gt, "frequency_loss")?;
    let mut total = 0.0;
    for ch in 0..pred.channels() {
        let a = fft2d(pred, ch);
        let b = fft2d(gt, ch);
        total += a.iter().zip(&b).map(|(x, y)| (x - y).norm()).sum::<f64>();
    }
    Ok(total / pred.pixel_count() as f64)
}

/// Per-loop weights `w(l)`, indexed from loop 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopWeights(pub Vec<f64>);

impl LoopWeights {
    /// `w(1) = 0.75`, `w(l) = 1` for every later loop.
    pub fn progressive(loops: usize) -> Self {
        Self((1..=loops).map(|l| if l == 1 { 0.75 } else { 1.0 }).collect())
    }

    pub fn weight(&self, loop_number: usize) -> Option<f64> {
        loop_number.checked_sub(1).and_then(|i| self.0.get(i).copied())
    }
}

impl Default for LoopWeights {
    fn default() -> Self {
        Self::progressive(2)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub gamma_gs: f64,
    pub gamma_mim: f64,
    pub gamma_mfr: f64,
    pub loops: LoopWeights,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            gamma_gs: 0.75,
            gamma_mim: 1.0,
            gamma_mfr: 0.25,
            loops: LoopWeights::default(),
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.gamma_gs, self.gamma_mim, self.gamma_mfr]
            .into_iter()
            .chain(self.loops.0.iter().copied());
        for v in all {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Domain(format!("loss weights must be finite and ≥ 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Default scale factors of a three-output pyramid.
pub const DEFAULT_SCALES: [f64; 3] = [1.0, 0.5, 0.25];

/// Predictions for every decoder loop and output scale.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionPyramid {
    scales: Vec<f64>,
    /// `loops[l][s]`, zero-based.
    loops: Vec<Vec<Image>>,
}

impl PredictionPyramid {
    pub fn new(scales: Vec<f64>, loops: Vec<Vec<Image>>) -> Result<Self> {
        if scales.is_empty() || loops.is_empty() {
            return Err(Error::ShapeMismatch("pyramid needs at least one loop and one scale".into()));
        }
        for s in &scales {
            block_size(*s)?;
        }
        if scales.windows(2).any(|w| !(w[1] < w[0])) {
            return Err(Error::Domain(format!("scale factors must strictly decrease: {scales:?}")));
        }
        for (l, images) in loops.iter().enumerate() {
            if images.len() != scales.len() {
                return Err(Error::ShapeMismatch(format!(
                    "loop {} has {} scales, expected {}",
                    l + 1,
                    images.len(),
                    scales.len()
                )));
            }
            for (s, img) in images.iter().enumerate() {
                if !img.same_shape(&loops[0][s]) {
                    return Err(Error::ShapeMismatch(format!(
                        "loop {} scale {} is {:?}, loop 1 has {:?}",
                        l + 1,
                        s + 1,
                        img.shape(),
                        loops[0][s].shape()
                    )));
                }
            }
        }
        Ok(Self { scales, loops })
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    pub fn loops(&self) -> &[Vec<Image>] {
        &self.loops
    }

    pub fn get(&self, loop_number: usize, scale_number: usize) -> &Image {
        &self.loops[loop_number - 1][scale_number - 1]
    }
}

fn progressive_loss(
    pyr: &PredictionPyramid,
    gt: &Image,
    weights: &LoopWeights,
    inner: impl Fn(&Image, &Image) -> Result<f64>,
) -> Result<f64> {
    if weights.0.len() < pyr.loops.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} loop weights for {} loops",
            weights.0.len(),
            pyr.loops.len()
        )));
    }
    let targets: Vec<Image> = pyr
        .scales
        .iter()
        .map(|s| downsample_image(gt, *s))
        .collect::<Result<_>>()?;
    let mut total = 0.0;
    for (l, images) in pyr.loops.iter().enumerate() {
        let w = weights.0[l];
        for (img, target) in images.iter().zip(&targets) {
            total += w * inner(img, target)?;
        }
    }
    Ok(total)
}

/// `Σ_l Σ_s w(l) · l1_loss(pred[l][s], gt ↓ r_s)`.
pub fn progressive_multiscale_image_loss(
    pyr: &PredictionPyramid,
    gt: &Image,
    weights: &LoopWeights,
) -> Result<f64> {
    progressive_loss(pyr, gt, weights, l1_loss)
}

/// `Σ_l Σ_s w(l) · frequency_loss(pred[l][s], gt ↓ r_s)`.
pub fn progressive_multiscale_frequency_loss(
    pyr: &PredictionPyramid,
    gt: &Image,
    weights: &LoopWeights,
) -> Result<f64> {
    progressive_loss(pyr, gt, weights, frequency_loss)
}

pub fn total_loss(l_gs: f64, l_mim: f64, l_mfr: f64, weights: &LossWeights) -> f64 {
    weights.gamma_gs * l_gs + weights.gamma_mim * l_mim + weights.gamma_mfr * l_mfr
}

/// `10 · log₁₀(1 / MSE)` for unit-range images; [`PSNR_SATURATED`] when identical.
pub fn psnr(pred: &Image, gt: &Image) -> Result<f64> {
    pred.ensure_same_shape(gt, "psnr")?;
    let n = pred.data().len();
    if n == 0 {
        return Ok(PSNR_SATURATED);
    }
    let mse = pred
        .data()
        .iter()
        .zip(gt.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n as f64;
    if mse == 0.0 {
        return Ok(PSNR_SATURATED);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn l1_examples() {
        let gt = Image::from_fn(4, 3, 3, |x, y, c| (x + 2 * y + c) as f64 * 0.05);
        assert_eq!(l1_loss(&gt, &gt).unwrap(), 0.0);
        let shifted = Image::from_fn(4, 3, 3, |x, y, c| gt.get(x, y, c) + 0.1);
        assert!((l1_loss(&shifted, &gt).unwrap() - 0.3).abs() < 1e-12);
        assert!(l1_loss(&gt, &Image::zeros(4, 3, 1)).is_err());
    }

    #[test]
    fn l1_grad_signs() {
        let a = Image::from_vec(2, 1, 1, vec![1.0, 0.0]).unwrap();
        let b = Image::from_vec(2, 1, 1, vec![0.0, 0.0]).unwrap();
        assert_eq!(l1_loss_grad(&a, &b).unwrap().data(), &[0.5, 0.0]);
        assert_eq!(l1_loss_grad(&b, &a).unwrap().data(), &[-0.5, 0.0]);
    }

    #[test]
    fn downsample_examples() {
        let img = Image::from_fn(4, 4, 2, |x, y, c| (x * 3 + y + c) as f64);
        assert_eq!(downsample_image(&img, 1.0).unwrap(), img);
        let constant = Image::filled(8, 4, 3, 0.7);
        for r in [0.5, 0.25] {
            let d = downsample_image(&constant, r).unwrap();
            assert!(d.data().iter().all(|v| (*v - 0.7).abs() < 1e-15));
        }
        let checker = Image::from_fn(4, 4, 1, |x, y, _| ((x + y) % 2) as f64);
        let d = downsample_image(&checker, 0.5).unwrap();
        assert_eq!(d.shape(), (2, 2, 1));
        assert!(d.data().iter().all(|v| *v == 0.5));
        assert!(downsample_image(&Image::zeros(6, 4, 1), 0.25).is_err());
        assert!(downsample_image(&img, 0.3).is_err());
    }

    #[test]
    fn frequency_dc_only() {
        let kappa = 0.37;
        let (w, h) = (6, 4);
        let pred = Image::filled(w, h, 1, kappa);
        let gt = Image::zeros(w, h, 1);
        assert!((frequency_loss(&pred, &gt).unwrap() - kappa).abs() < 1e-12);
        assert_eq!(frequency_loss(&gt, &gt).unwrap(), 0.0);
    }

    #[test]
    fn total_loss_default_weights() {
        let w = LossWeights::default();
        assert_eq!(total_loss(1.0, 1.0, 1.0, &w), 2.0);
        assert_eq!(total_loss(0.0, 0.0, 0.0, &w), 0.0);
        assert_eq!(total_loss(2.0, 0.0, 0.0, &w), 2.0 * total_loss(1.0, 0.0, 0.0, &w));
    }

    #[test]
    fn loop_weights() {
        let w = LoopWeights::progressive(3);
        assert_eq!(w.0, vec![0.75, 1.0, 1.0]);
        assert_eq!(w.weight(1), Some(0.75));
        assert_eq!(w.weight(0), None);
        assert!(LossWeights { gamma_gs: -1.0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn psnr_examples() {
        let gt = Image::filled(4, 4, 3, 0.5);
        assert_eq!(psnr(&gt, &gt).unwrap(), PSNR_SATURATED);
        let off = Image::filled(4, 4, 3, 0.6);
        assert!((psnr(&off, &gt).unwrap() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn pyramid_validation() {
        let full = Image::zeros(8, 8, 3);
        let half = Image::zeros(4, 4, 3);
        assert!(PredictionPyramid::new(vec![1.0, 0.5], vec![vec![full.clone(), half.clone()]]).is_ok());
        assert!(PredictionPyramid::new(vec![0.5, 1.0], vec![vec![half.clone(), full.clone()]]).is_err());
        assert!(PredictionPyramid::new(vec![1.0, 0.5], vec![vec![full.clone()]]).is_err());
        assert!(PredictionPyramid::new(
            vec![1.0, 0.5],
            vec![vec![full.clone(), half.clone()], vec![full, Image::zeros(4, 4, 1)]]
        )
        .is_err());
    }
}
