//! Image quality metrics on `[0,1]` frames.

use crate::error::{AlamError, Result};
use crate::synthworld::{Frame, CHANNELS};

pub const PSNR_CAP_DB: f64 = 99.0;
const SSIM_WINDOW: usize = 7;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn check(a: &Frame, b: &Frame) -> Result<()> {
    if !a.same_shape(b) {
        return Err(AlamError::invalid("frames differ in shape"));
    }
    Ok(())
}

pub fn mse(a: &Frame, b: &Frame) -> Result<f64> {
    check(a, b)?;
    let se: f64 = a.pixels.iter().zip(&b.pixels).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum();
    Ok(se / a.pixels.len().max(1) as f64)
}

/// Peak signal-to-noise ratio for unit dynamic range, capped at 99 dB.
pub fn psnr(a: &Frame, b: &Frame) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse < 1e-10 {
        PSNR_CAP_DB
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB)
    }
}

/// Mean structural similarity over all fully contained 7x7 windows and
/// channels (sample covariance, unit dynamic range). Frames smaller than the
/// window use a single window covering the whole frame.
pub fn ssim(a: &Frame, b: &Frame) -> Result<f64> {
    check(a, b)?;
    let (h, w) = (a.height, a.width);
    let win_h = SSIM_WINDOW.min(h);
    let win_w = SSIM_WINDOW.min(w);
    let n = (win_h * win_w) as f64;
    let unbias = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..CHANNELS {
        for r0 in 0..=h - win_h {
            for c0 in 0..=w - win_w {
                let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for r in r0..r0 + win_h {
                    for c in c0..c0 + win_w {
                        let x = a.at(r, c, ch) as f64;
                        let y = b.at(r, c, ch) as f64;
                        sx += x;
                        sy += y;
                        sxx += x * x;
                        syy += y * y;
                        sxy += x * y;
                    }
                }
                let (mx, my) = (sx / n, sy / n);
                let vx = (sxx / n - mx * mx) * unbias;
                let vy = (syy / n - my * my) * unbias;
                let cxy = (sxy / n - mx * my) * unbias;
                let num = (2.0 * mx * my + SSIM_C1) * (2.0 * cxy + SSIM_C2);
                let den = (mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2);
                total += num / den;
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;
    use crate::synthworld::View;
    use proptest::prelude::*;
    use rand::Rng as _;

    fn constant(v: f32, res: usize) -> Frame {
        let mut f = Frame::zeros(res, res, View::Global);
        f.pixels.iter_mut().for_each(|p| *p = v);
        f
    }

    fn random(seed: u64, res: usize) -> Frame {
        let mut rng = rng_from(seed);
        let mut f = Frame::zeros(res, res, View::Global);
        f.pixels.iter_mut().for_each(|p| *p = rng.gen_range(0.0..1.0));
        f
    }

    #[test]
    fn psnr_examples() {
        let a = random(1, 8);
        assert_eq!(psnr(&a, &a).unwrap(), 99.0);
        assert!((psnr_from_mse(0.01) - 20.0).abs() < 1e-12);
        assert_eq!(psnr_from_mse(1.0), 0.0);
        assert!((psnr(&constant(0.0, 4), &constant(1.0, 4)).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn ssim_examples() {
        let a = random(2, 12);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let expected = SSIM_C1 / (1.0 + SSIM_C1);
        assert!((ssim(&constant(0.0, 12), &constant(1.0, 12)).unwrap() - expected).abs() < 1e-15);
        assert!((expected - 9.999e-5).abs() < 1e-8);
        assert!(ssim(&constant(0.0, 4), &constant(0.0, 5)).is_err());
    }

    #[test]
    fn ssim_matches_brute_force_small_frame() {
        // Frame smaller than the window: one global window.
        let a = random(3, 3);
        let b = random(4, 3);
        let n = 9.0;
        let mut acc = 0.0;
        for ch in 0..3 {
            let xs: Vec<f64> = (0..9).map(|i| a.at(i / 3, i % 3, ch) as f64).collect();
            let ys: Vec<f64> = (0..9).map(|i| b.at(i / 3, i % 3, ch) as f64).collect();
            let mx = xs.iter().sum::<f64>() / n;
            let my = ys.iter().sum::<f64>() / n;
            let vx = xs.iter().map(|x| (x - mx).powi(2)).sum::<f64>() / (n - 1.0);
            let vy = ys.iter().map(|y| (y - my).powi(2)).sum::<f64>() / (n - 1.0);
            let c = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>() / (n - 1.0);
            acc += (2.0 * mx * my + SSIM_C1) * (2.0 * c + SSIM_C2)
                / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2));
        }
        assert!((ssim(&a, &b).unwrap() - acc / 3.0).abs() < 1e-9);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn ssim_symmetric_and_bounded(s1 in 0u64..500, s2 in 0u64..500) {
            let (a, b) = (random(s1, 9), random(s2, 9));
            let ab = ssim(&a, &b).unwrap();
            prop_assert!((ab - ssim(&b, &a).unwrap()).abs() < 1e-12);
            prop_assert!((-1.0..=1.0 + 1e-12).contains(&ab));
        }
    }
}
