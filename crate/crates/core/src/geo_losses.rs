//! Geometric supervision: Smooth L1 on risk maps and scale-shift-invariant
//! depth distillation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};

use crate::dense_map::DenseMap;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeoLossWeights {
    pub lambda_slope: f64,
    pub lambda_elev: f64,
    pub lambda_geo: f64,
    /// Log-space standard deviation of multiplicative noise on the teacher depth.
    pub teacher_noise_sigma: f64,
}

impl Default for GeoLossWeights {
    fn default() -> Self {
        Self {
            lambda_slope: 1.0,
            lambda_elev: 1.0,
            lambda_geo: 2.0,
            teacher_noise_sigma: 0.0,
        }
    }
}

impl GeoLossWeights {
    pub fn validate(&self) -> Result<()> {
        let ok = [
            self.lambda_slope,
            self.lambda_elev,
            self.lambda_geo,
            self.teacher_noise_sigma,
        ]
        .iter()
        .all(|w| w.is_finite() && *w >= 0.0);
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!(
                "geometric loss settings must be finite and >= 0, got {self:?}"
            )))
        }
    }
}

/// `depth * exp(sigma * z)` with `z ~ N(0, 1)` drawn per pixel from `seed`.
/// `sigma == 0` returns the input unchanged.
pub fn noisy_teacher(depth: &DenseMap, sigma: f64, seed: u64) -> Result<DenseMap> {
    if !(sigma.is_finite() && sigma >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "teacher noise sigma {sigma} must be finite and >= 0"
        )));
    }
    if sigma == 0.0 {
        return Ok(depth.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = LogNormal::new(0.0, sigma).expect("sigma checked above");
    let values = depth
        .values()
        .iter()
        .map(|d| d * noise.sample(&mut rng))
        .collect();
    DenseMap::from_vec(depth.height(), depth.width(), values)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeoLoss {
    pub value: f64,
    pub slope: f64,
    pub elevation: f64,
    pub grad_slope: DenseMap,
    pub grad_elevation: DenseMap,
}

#[inline]
fn smooth_l1(e: f64) -> (f64, f64) {
    let a = e.abs();
    if a < 1.0 {
        (0.5 * e * e, e)
    } else {
        (a - 0.5, e.signum())
    }
}

/// Mean Smooth L1 between `pred` and `target`, with `dL/dpred` scaled by `weight`.
pub(crate) fn smooth_l1_into(pred: &[f64], target: &[f64], weight: f64, grad: &mut [f64]) -> f64 {
    let n = pred.len() as f64;
    let mut total = 0.0;
    for ((&p, &t), g) in pred.iter().zip(target).zip(grad.iter_mut()) {
        let (l, d) = smooth_l1(p - t);
        total += l;
        *g = weight * d / n;
    }
    total / n
}

/// `lambda_slope * mean SmoothL1(R_slope, g_slope) + lambda_elev * mean SmoothL1(R_elev, g_elev)`.
pub fn smooth_l1_geo(
    pred_slope: &DenseMap,
    pred_elev: &DenseMap,
    pseudo_slope: &DenseMap,
    pseudo_elev: &DenseMap,
    weights: &GeoLossWeights,
) -> Result<GeoLoss> {
    pred_slope.ensure_same_dims(pred_elev)?;
    pred_slope.ensure_same_dims(pseudo_slope)?;
    pred_slope.ensure_same_dims(pseudo_elev)?;
    weights.validate()?;
    let (h, w) = pred_slope.dims();
    let mut gs = vec![0.0; h * w];
    let mut ge = vec![0.0; h * w];
    let slope = smooth_l1_into(
        pred_slope.values(),
        pseudo_slope.values(),
        weights.lambda_slope,
        &mut gs,
    );
    let elevation = smooth_l1_into(
        pred_elev.values(),
        pseudo_elev.values(),
        weights.lambda_elev,
        &mut ge,
    );
    Ok(GeoLoss {
        value: weights.lambda_slope * slope + weights.lambda_elev * elevation,
        slope,
        elevation,
        grad_slope: DenseMap::from_vec(h, w, gs)?,
        grad_elevation: DenseMap::from_vec(h, w, ge)?,
    })
}

/// Least-squares scale and shift taking the prediction onto the teacher.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffineAlignment {
    pub scale: f64,
    pub shift: f64,
    /// Set when the prediction was constant and the fallback
    /// `scale = 1, shift = mean(teacher - pred)` was used.
    pub degenerate: bool,
}

struct Moments {
    n: f64,
    mean_p: f64,
    mean_t: f64,
    sxx: f64,
    sxy: f64,
}

fn moments(pred: &[f64], teacher: &[f64]) -> Moments {
    let n = pred.len() as f64;
    let mean_p = pred.iter().sum::<f64>() / n;
    let mean_t = teacher.iter().sum::<f64>() / n;
    let (mut sxx, mut sxy) = (0.0, 0.0);
    for (&p, &t) in pred.iter().zip(teacher) {
        sxx += (p - mean_p) * (p - mean_p);
        sxy += (p - mean_p) * (t - mean_t);
    }
    Moments {
        n,
        mean_p,
        mean_t,
        sxx,
        sxy,
    }
}

fn is_constant(m: &Moments) -> bool {
    m.sxx / m.n <= (f64::EPSILON * (1.0 + m.mean_p.abs())).powi(2)
}

fn align_slices(pred: &[f64], teacher: &[f64]) -> (AffineAlignment, Moments) {
    let m = moments(pred, teacher);
    let alignment = if is_constant(&m) {
        AffineAlignment {
            scale: 1.0,
            shift: m.mean_t - m.mean_p,
            degenerate: true,
        }
    } else {
        let scale = m.sxy / m.sxx;
        AffineAlignment {
            scale,
            shift: m.mean_t - scale * m.mean_p,
            degenerate: false,
        }
    };
    (alignment, m)
}

/// Closed-form solution of `min_{s,t} ||s * pred + t - teacher||^2`.
///
/// A constant prediction makes the normal equations singular and is an error;
/// [`align_or_fallback`] returns the flagged fallback instead.
pub fn align_least_squares(pred: &DenseMap, teacher: &DenseMap) -> Result<AffineAlignment> {
    let a = align_or_fallback(pred, teacher)?;
    if a.degenerate {
        return Err(Error::SingularAlignment);
    }
    Ok(a)
}

pub fn align_or_fallback(pred: &DenseMap, teacher: &DenseMap) -> Result<AffineAlignment> {
    pred.ensure_same_dims(teacher)?;
    Ok(align_slices(pred.values(), teacher.values()).0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SsiLoss {
    pub value: f64,
    pub alignment: AffineAlignment,
    pub grad: DenseMap,
}

/// Mean absolute residual after alignment, differentiated through the
/// alignment itself. Writes `dL/dpred` into `grad`.
pub(crate) fn ssi_into(pred: &[f64], teacher: &[f64], grad: &mut [f64]) -> (f64, AffineAlignment) {
    let (a, m) = align_slices(pred, teacher);
    let n = m.n;
    let signs: Vec<f64> = pred
        .iter()
        .zip(teacher)
        .map(|(&p, &t)| {
            let r = a.scale * p + a.shift - t;
            if r > 0.0 {
                1.0
            } else if r < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
        .collect();
    let value = pred
        .iter()
        .zip(teacher)
        .map(|(&p, &t)| (a.scale * p + a.shift - t).abs())
        .sum::<f64>()
        / n;
    let sign_sum: f64 = signs.iter().sum();
    if a.degenerate {
        for (g, &sg) in grad.iter_mut().zip(&signs) {
            *g = (sg - sign_sum / n) / n;
        }
        return (value, a);
    }
    // dL/dp_j = (1/n) [ s sg_j + ds_j (sum sg_i p_i - mean_p sum sg_i) - s sum sg_i / n ]
    let signed_pred: f64 = signs.iter().zip(pred).map(|(s, p)| s * p).sum();
    let lever = signed_pred - m.mean_p * sign_sum;
    for (j, g) in grad.iter_mut().enumerate() {
        let ds = ((teacher[j] - m.mean_t) - 2.0 * a.scale * (pred[j] - m.mean_p)) / m.sxx;
        *g = (a.scale * signs[j] + ds * lever - a.scale * sign_sum / n) / n;
    }
    (value, a)
}

pub fn ssi_loss(pred: &DenseMap, teacher: &DenseMap) -> Result<SsiLoss> {
    pred.ensure_same_dims(teacher)?;
    let mut grad = vec![0.0; pred.len()];
    let (value, alignment) = ssi_into(pred.values(), teacher.values(), &mut grad);
    Ok(SsiLoss {
        value,
        alignment,
        grad: DenseMap::from_vec(pred.height(), pred.width(), grad)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;

    fn random_map(rng: &mut ChaCha8Rng, h: usize, w: usize, lo: f64, hi: f64) -> DenseMap {
        DenseMap::from_fn(h, w, |_, _| rng.random_range(lo..hi)).unwrap()
    }

    fn fd(map: &DenseMap, f: impl Fn(&DenseMap) -> f64) -> Vec<f64> {
        let step = 1e-5;
        (0..map.len())
            .map(|i| {
                let mut p = map.values().to_vec();
                let mut m = map.values().to_vec();
                p[i] += step;
                m[i] -= step;
                (f(&DenseMap::from_vec(map.height(), map.width(), p).unwrap())
                    - f(&DenseMap::from_vec(map.height(), map.width(), m).unwrap()))
                    / (2.0 * step)
            })
            .collect()
    }

    fn max_rel_err(a: &[f64], n: &[f64]) -> f64 {
        let scale = n.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
        a.iter()
            .zip(n)
            .map(|(a, n)| (a - n).abs() / scale)
            .fold(0.0, f64::max)
    }

    #[test]
    fn smooth_l1_reference_values() {
        let w = GeoLossWeights::default();
        let z = DenseMap::zeros(3, 3).unwrap();
        let same = smooth_l1_geo(&z, &z, &z, &z, &w).unwrap();
        assert_eq!(same.value, 0.0);

        let half = DenseMap::new_filled(3, 3, 0.5).unwrap();
        let l = smooth_l1_geo(&half, &z, &z, &z, &w).unwrap();
        assert_relative_eq!(l.slope, 0.125, epsilon = 1e-15);
        assert_relative_eq!(l.value, 0.125, epsilon = 1e-15);

        let two = DenseMap::new_filled(3, 3, 2.0).unwrap();
        let l = smooth_l1_geo(&z, &two, &z, &z, &w).unwrap();
        assert_relative_eq!(l.elevation, 1.5, epsilon = 1e-15);
    }

    #[test]
    fn smooth_l1_gradient_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = GeoLossWeights {
            lambda_slope: 0.7,
            lambda_elev: 1.3,
            ..Default::default()
        };
        for _ in 0..100 {
            let ps = random_map(&mut rng, 3, 4, -2.0, 2.0);
            let pe = random_map(&mut rng, 3, 4, -2.0, 2.0);
            let gs = random_map(&mut rng, 3, 4, 0.0, 1.0);
            let ge = random_map(&mut rng, 3, 4, 0.0, 1.0);
            let l = smooth_l1_geo(&ps, &pe, &gs, &ge, &w).unwrap();
            let n = fd(&ps, |m| smooth_l1_geo(m, &pe, &gs, &ge, &w).unwrap().value);
            assert!(max_rel_err(l.grad_slope.values(), &n) < 1e-4);
            let n = fd(&pe, |m| smooth_l1_geo(&ps, m, &gs, &ge, &w).unwrap().value);
            assert!(max_rel_err(l.grad_elevation.values(), &n) < 1e-4);
        }
    }

    #[test]
    fn exact_affine_alignment() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = random_map(&mut rng, 5, 5, 0.0, 3.0);
        let t = d.map(|v| 2.0 * v + 3.0).unwrap();
        let a = align_least_squares(&d, &t).unwrap();
        assert_relative_eq!(a.scale, 2.0, epsilon = 1e-12);
        assert_relative_eq!(a.shift, 3.0, epsilon = 1e-12);
        assert!(ssi_loss(&d, &t).unwrap().value < 1e-12);

        let a = align_least_squares(&d, &d).unwrap();
        assert_relative_eq!(a.scale, 1.0, epsilon = 1e-14);
        assert_relative_eq!(a.shift, 0.0, epsilon = 1e-14);
    }

    #[test]
    fn constant_prediction_is_flagged() {
        let c = DenseMap::new_filled(3, 3, 1.5).unwrap();
        let t = DenseMap::from_fn(3, 3, |r, c| (r + c) as f64).unwrap();
        assert!(matches!(
            align_least_squares(&c, &t),
            Err(Error::SingularAlignment)
        ));
        let a = align_or_fallback(&c, &t).unwrap();
        assert!(a.degenerate);
        assert_eq!(a.scale, 1.0);
        assert_relative_eq!(a.shift, 2.0 - 1.5, epsilon = 1e-14);
        let l = ssi_loss(&c, &t).unwrap();
        assert!(l.alignment.degenerate && l.value.is_finite());
    }

    fn residual(d: &DenseMap, t: &DenseMap, s: f64, c: f64) -> f64 {
        d.values()
            .iter()
            .zip(t.values())
            .map(|(d, t)| (s * d + c - t).powi(2))
            .sum()
    }

    #[test]
    fn alignment_matches_grid_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..5 {
            let d = random_map(&mut rng, 8, 8, 0.0, 2.0);
            let t = random_map(&mut rng, 8, 8, 1.0, 4.0);
            let a = align_least_squares(&d, &t).unwrap();
            // coarse-to-fine grid search, independent of the normal equations
            let (mut s0, mut c0, mut span) = (0.0, 2.5, 4.0);
            for _ in 0..40 {
                let mut best = (f64::INFINITY, s0, c0);
                for i in -10..=10 {
                    for j in -10..=10 {
                        let s = s0 + span * i as f64 / 10.0;
                        let c = c0 + span * j as f64 / 10.0;
                        let r = residual(&d, &t, s, c);
                        if r < best.0 {
                            best = (r, s, c);
                        }
                    }
                }
                s0 = best.1;
                c0 = best.2;
                span *= 0.5;
            }
            let closed = residual(&d, &t, a.scale, a.shift);
            let grid = residual(&d, &t, s0, c0);
            assert!(closed <= grid + 1e-12);
            assert!((closed - grid).abs() < 1e-6);
        }
    }

    #[test]
    fn alternating_residual_pattern() {
        let d = DenseMap::from_fn(6, 6, |_, c| 1.0 + c as f64).unwrap();
        let t = DenseMap::from_fn(6, 6, |r, c| {
            1.0 + c as f64 + if (r + c) % 2 == 0 { 1.0 } else { -1.0 }
        })
        .unwrap();
        let l = ssi_loss(&d, &t).unwrap();
        assert_relative_eq!(l.alignment.scale, 1.0, epsilon = 1e-12);
        assert_relative_eq!(l.alignment.shift, 0.0, epsilon = 1e-12);
        assert_relative_eq!(l.value, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn ssi_gradient_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..100 {
            let d = random_map(&mut rng, 6, 6, 0.5, 3.0);
            let t = random_map(&mut rng, 6, 6, 1.0, 5.0);
            let l = ssi_loss(&d, &t).unwrap();
            let n = fd(&d, |m| ssi_loss(m, &t).unwrap().value);
            assert!(max_rel_err(l.grad.values(), &n) < 1e-4);
        }
    }

    #[test]
    fn ssi_invariances() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let d = random_map(&mut rng, 6, 6, 1.0, 4.0);
        for _ in 0..50 {
            let a = rng.random_range(0.01..100.0);
            let c = rng.random_range(-100.0..100.0);
            let pred = d.map(|v| a * v + c).unwrap();
            assert!(ssi_loss(&pred, &d).unwrap().value < 1e-9);
        }
        // common shift leaves the loss unchanged; common scale multiplies it
        let p = random_map(&mut rng, 6, 6, 0.0, 1.0);
        let base = ssi_loss(&p, &d).unwrap().value;
        assert!(base > 0.0);
        let shifted = ssi_loss(&p.map(|v| v + 7.0).unwrap(), &d.map(|v| v + 7.0).unwrap())
            .unwrap()
            .value;
        assert_relative_eq!(shifted, base, epsilon = 1e-10);
        let scaled = ssi_loss(
            &p.map(|v| 3.0 * v - 1.0).unwrap(),
            &d.map(|v| 3.0 * v - 1.0).unwrap(),
        )
        .unwrap()
        .value;
        assert_relative_eq!(scaled, 3.0 * base, epsilon = 1e-10);
    }

    #[test]
    fn teacher_noise_is_seeded_and_multiplicative() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let depth = random_map(&mut rng, 40, 40, 1.0, 5.0);
        assert_eq!(noisy_teacher(&depth, 0.0, 3).unwrap(), depth);
        let a = noisy_teacher(&depth, 0.1, 3).unwrap();
        assert_eq!(a, noisy_teacher(&depth, 0.1, 3).unwrap());
        assert_ne!(a, noisy_teacher(&depth, 0.1, 4).unwrap());
        let logs: Vec<f64> = a
            .values()
            .iter()
            .zip(depth.values())
            .map(|(n, d)| (n / d).ln())
            .collect();
        let mean = logs.iter().sum::<f64>() / logs.len() as f64;
        let sd = (logs.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / logs.len() as f64).sqrt();
        assert!(mean.abs() < 0.01 && (sd - 0.1).abs() < 0.01, "{mean} {sd}");
        assert!(noisy_teacher(&depth, -0.1, 3).is_err());
    }
}
