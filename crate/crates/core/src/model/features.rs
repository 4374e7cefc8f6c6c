//! Fixed per-pixel features standing in for a learned image encoder.
//!
//! Channel layout (16 channels, each in `[-1, 1]`):
//!
//! | index | content |
//! |-------|---------|
//! | 0..3  | RGB, mapped `x -> 2x - 1` |
//! | 3, 4  | column and row coordinate, mapped to `[-1, 1]` |
//! | 5..8  | 5x5 local RGB mean, mapped `x -> 2x - 1` |
//! | 8..11 | 5x5 local RGB standard deviation, times 2 |
//! | 11    | intensity gradient magnitude, times `sqrt(2)` |
//! | 12, 13| sine and cosine of the gradient orientation (0 where flat) |
//! | 14    | constant 1 |
//! | 15    | reserved, always 0 |
//!
//! Windows replicate the border, so the features of a mirrored image are the
//! mirrored features (with the column coordinate and gradient cosine negated).

use crate::dense_map::DenseMap;
use crate::error::{Error, Result};
use crate::raster::RgbImage;

pub const FEATURE_DIM: usize = 16;
pub const MIN_IMAGE_SIZE: usize = 8;

const WINDOW_RADIUS: isize = 2;

pub mod channel {
    pub const RGB: usize = 0;
    pub const COORD_U: usize = 3;
    pub const COORD_V: usize = 4;
    pub const LOCAL_MEAN: usize = 5;
    pub const LOCAL_STD: usize = 8;
    pub const GRAD_MAG: usize = 11;
    pub const GRAD_SIN: usize = 12;
    pub const GRAD_COS: usize = 13;
    pub const BIAS: usize = 14;
    pub const RESERVED: usize = 15;
}

/// Pixel-major feature storage: `data[pixel * FEATURE_DIM + channel]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn num_pixels(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn pixel(&self, index: usize) -> &[f64] {
        &self.data[index * FEATURE_DIM..(index + 1) * FEATURE_DIM]
    }

    pub fn pixels(&self) -> std::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(FEATURE_DIM)
    }

    pub fn channel(&self, channel: usize) -> DenseMap {
        assert!(channel < FEATURE_DIM);
        DenseMap::from_vec(
            self.height,
            self.width,
            self.pixels().map(|p| p[channel]).collect(),
        )
        .expect("finite features")
    }
}

fn clamp_index(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

fn local_stats(plane: &DenseMap, row: usize, col: usize) -> (f64, f64) {
    let (h, w) = plane.dims();
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for dr in -WINDOW_RADIUS..=WINDOW_RADIUS {
        let r = clamp_index(row as isize + dr, h);
        for dc in -WINDOW_RADIUS..=WINDOW_RADIUS {
            let c = clamp_index(col as isize + dc, w);
            let v = plane.get(r, c);
            sum += v;
            sum_sq += v * v;
        }
    }
    let n = ((2 * WINDOW_RADIUS + 1) * (2 * WINDOW_RADIUS + 1)) as f64;
    let mean = sum / n;
    let var = (sum_sq / n - mean * mean).max(0.0);
    (mean, var.sqrt())
}

pub fn extract_features(image: &RgbImage) -> Result<FeatureMap> {
    let (h, w) = image.dims();
    if h < MIN_IMAGE_SIZE || w < MIN_IMAGE_SIZE {
        return Err(Error::InvalidDimensions {
            height: h,
            width: w,
        });
    }
    let intensity = image.intensity();
    let channels = image.channels();
    let mut data = Vec::with_capacity(h * w * FEATURE_DIM);
    for r in 0..h {
        for c in 0..w {
            let mut f = [0.0; FEATURE_DIM];
            for (k, plane) in channels.iter().enumerate() {
                f[channel::RGB + k] = 2.0 * plane.get(r, c) - 1.0;
                let (mean, std) = local_stats(plane, r, c);
                f[channel::LOCAL_MEAN + k] = 2.0 * mean - 1.0;
                f[channel::LOCAL_STD + k] = (2.0 * std).min(1.0);
            }
            f[channel::COORD_U] = 2.0 * c as f64 / (w - 1) as f64 - 1.0;
            f[channel::COORD_V] = 2.0 * r as f64 / (h - 1) as f64 - 1.0;

            let at = |rr: isize, cc: isize| intensity.get(clamp_index(rr, h), clamp_index(cc, w));
            let (ri, ci) = (r as isize, c as isize);
            let gx = 0.5 * (at(ri, ci + 1) - at(ri, ci - 1));
            let gy = 0.5 * (at(ri + 1, ci) - at(ri - 1, ci));
            let mag = (gx * gx + gy * gy).sqrt();
            f[channel::GRAD_MAG] = (mag * std::f64::consts::SQRT_2).min(1.0);
            if mag > 0.0 {
                f[channel::GRAD_SIN] = gy / mag;
                f[channel::GRAD_COS] = gx / mag;
            }
            f[channel::BIAS] = 1.0;
            f[channel::RESERVED] = 0.0;
            data.extend_from_slice(&f);
        }
    }
    Ok(FeatureMap {
        height: h,
        width: w,
        data,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(seed: u64, h: usize, w: usize) -> RgbImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut plane = || DenseMap::from_fn(h, w, |_, _| rng.random::<f64>()).unwrap();
        RgbImage::new(plane(), plane(), plane()).unwrap()
    }

    #[test]
    fn uniform_gray_has_no_texture() {
        let g = DenseMap::new_filled(10, 12, 0.5).unwrap();
        let img = RgbImage::new(g.clone(), g.clone(), g).unwrap();
        let f = extract_features(&img).unwrap();
        for p in f.pixels() {
            for k in 0..3 {
                assert_eq!(p[channel::LOCAL_STD + k], 0.0);
            }
            assert_eq!(p[channel::GRAD_MAG], 0.0);
            assert_eq!(p[channel::GRAD_SIN], 0.0);
            assert_eq!(p[channel::GRAD_COS], 0.0);
            assert_eq!(p[channel::BIAS], 1.0);
            assert_eq!(p[channel::RESERVED], 0.0);
        }
    }

    #[test]
    fn deterministic_and_bounded() {
        let img = random_image(1, 9, 11);
        let a = extract_features(&img).unwrap();
        let b = extract_features(&img).unwrap();
        assert_eq!(a, b);
        assert!(a.data.iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn undersized_image_rejected() {
        assert!(matches!(
            extract_features(&random_image(2, 7, 20)),
            Err(Error::InvalidDimensions { .. })
        ));
    }

    #[test]
    fn horizontal_flip_symmetry() {
        let img = random_image(3, 8, 10);
        let f = extract_features(&img).unwrap();
        let g = extract_features(&img.flip_horizontal()).unwrap();
        for ch in 0..FEATURE_DIM {
            let expected = f.channel(ch).flip_horizontal();
            let got = g.channel(ch);
            let sign = if ch == channel::COORD_U || ch == channel::GRAD_COS {
                -1.0
            } else {
                1.0
            };
            for (e, v) in expected.values().iter().zip(got.values()) {
                assert!((sign * e - v).abs() < 1e-12, "channel {ch}");
            }
        }
    }
}
