//! Fixed random-feature perceptual distance.
//!
//! Three stages of 2x2 stride-2 convolutions with `tanh` activations and
//! weights drawn once from a fixed seed. At every stage each spatial feature
//! vector is normalised to unit length across channels; the distance is the
//! per-position squared difference of normalised features, averaged over
//! positions and then over stages. Odd spatial sizes are cropped by one pixel
//! before a stage.

use std::sync::OnceLock;

use candle_core::{DType, Tensor, D};

use crate::error::{AlamError, Result};
use crate::nn::{from_f32, from_f64, to_f64_vec};
use crate::rng::rng_from;
use crate::synthworld::{Frame, CHANNELS};
use rand_distr::{Distribution, Normal};

const PYRAMID_SEED: u64 = 0x5eed_9e4c_e97a_0001;
const STAGE_CHANNELS: [usize; 3] = [8, 16, 32];

#[derive(Clone, Debug)]
pub struct PerceptualPyramid {
    weights: Vec<Tensor>,
}

impl PerceptualPyramid {
    pub fn new(dtype: DType) -> Result<Self> {
        let mut rng = rng_from(PYRAMID_SEED);
        let mut c_in = CHANNELS;
        let mut weights = Vec::new();
        for &c_out in &STAGE_CHANNELS {
            let fan_in = 4 * c_in;
            let normal = Normal::new(0.0, 1.0 / (fan_in as f64).sqrt()).expect("valid std");
            let w: Vec<f64> = (0..fan_in * c_out).map(|_| normal.sample(&mut rng)).collect();
            weights.push(from_f64(&w, &[fan_in, c_out], dtype)?);
            c_in = c_out;
        }
        Ok(Self { weights })
    }

    /// Unit-normalised features per stage for `(B, H, W, C)` images in `[0,1]`.
    pub fn features(&self, images: &Tensor) -> Result<Vec<Tensor>> {
        let mut x = ((images * 2.0)? - 1.0)?;
        let mut out = Vec::with_capacity(self.weights.len());
        for w in &self.weights {
            let (b, h, wd, c) = x.dims4()?;
            let (h2, w2) = (h / 2, wd / 2);
            if h2 == 0 || w2 == 0 {
                return Err(AlamError::invalid("image too small for the perceptual pyramid"));
            }
            let cropped = x.narrow(1, 0, 2 * h2)?.narrow(2, 0, 2 * w2)?;
            let s2d = cropped
                .reshape((b, h2, 2, w2, 2 * c))?
                .transpose(2, 3)?
                .reshape((b * h2 * w2, 4 * c))?;
            let c_out = w.dim(1)?;
            x = s2d.matmul(w)?.tanh()?.reshape((b, h2, w2, c_out))?;
            let norm = (x.sqr()?.sum_keepdim(D::Minus1)? + 1e-10)?.sqrt()?;
            out.push(x.broadcast_div(&norm)?);
        }
        Ok(out)
    }

    /// Per-image distance `(B,)`.
    pub fn distance(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.dims() != b.dims() {
            return Err(AlamError::invalid("perceptual distance needs equal shapes"));
        }
        let fa = self.features(a)?;
        let fb = self.features(b)?;
        let mut total: Option<Tensor> = None;
        for (x, y) in fa.iter().zip(&fb) {
            let stage = (x - y)?.sqr()?.sum(D::Minus1)?.mean(D::Minus1)?.mean(D::Minus1)?;
            total = Some(match total {
                None => stage,
                Some(t) => (t + stage)?,
            });
        }
        Ok((total.expect("at least one stage") / self.weights.len() as f64)?)
    }
}

fn shared_f64() -> &'static PerceptualPyramid {
    static PYRAMID: OnceLock<PerceptualPyramid> = OnceLock::new();
    PYRAMID.get_or_init(|| PerceptualPyramid::new(DType::F64).expect("pyramid construction"))
}

/// Perceptual distance between two frames (float64 evaluation).
pub fn perceptual_distance(a: &Frame, b: &Frame) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(AlamError::invalid("perceptual distance needs equal shapes"));
    }
    let shape = [1, a.height, a.width, CHANNELS];
    let ta = from_f32(&a.pixels, &shape, DType::F64)?;
    let tb = from_f32(&b.pixels, &shape, DType::F64)?;
    Ok(to_f64_vec(&shared_f64().distance(&ta, &tb)?)?[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthworld::{sample_trajectory, View, WorldConfig};
    use proptest::prelude::*;

    fn random_frame(seed: u64, res: usize) -> Frame {
        use rand::Rng as _;
        let mut rng = rng_from(seed);
        let mut f = Frame::zeros(res, res, View::Global);
        for p in f.pixels.iter_mut() {
            *p = rng.gen_range(0.0..1.0);
        }
        f
    }

    #[test]
    fn identical_images_have_zero_distance() {
        let wc = WorldConfig { resolution: 32, ..Default::default() };
        let t = sample_trajectory(1, 3, &wc).unwrap();
        let f = &t.frames(View::Global)[0];
        assert_eq!(perceptual_distance(f, f).unwrap(), 0.0);
        assert!(perceptual_distance(f, &t.frames(View::Global)[2]).unwrap() > 0.0);
    }

    #[test]
    fn odd_sizes_are_cropped() {
        let a = random_frame(1, 14);
        let b = random_frame(2, 14);
        assert!(perceptual_distance(&a, &b).unwrap() > 0.0);
        assert!(perceptual_distance(&random_frame(1, 1), &random_frame(2, 1)).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn symmetric_and_non_negative(s1 in 0u64..1000, s2 in 0u64..1000) {
            let a = random_frame(s1, 16);
            let b = random_frame(s2, 16);
            let ab = perceptual_distance(&a, &b).unwrap();
            let ba = perceptual_distance(&b, &a).unwrap();
            prop_assert!(ab >= 0.0);
            prop_assert_eq!(ab, ba);
        }
    }
}
