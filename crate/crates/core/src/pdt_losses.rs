//! Perspective-diversified semantic losses.
//!
//! Each of the three hypothesis tokens is trained with a focal term and a
//! Tversky term whose weights lean it toward a conservative, neutral or
//! aggressive reading of the same binary label. All losses take raw logits
//! and return the gradient with respect to those logits.

use serde::{Deserialize, Serialize};

use crate::dense_map::{DenseMap, UnitIntervalMap};
use crate::error::{Error, Result};

pub const NUM_HYPOTHESES: usize = 3;

/// Loss weights for one hypothesis token.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerspectiveConfig {
    pub gamma: f64,
    pub alpha_fp: f64,
    pub alpha_fn: f64,
    pub epsilon: f64,
}

impl PerspectiveConfig {
    pub const DEFAULT_EPSILON: f64 = 1e-6;

    pub fn new(gamma: f64, alpha_fp: f64, alpha_fn: f64, epsilon: f64) -> Result<Self> {
        let cfg = Self {
            gamma,
            alpha_fp,
            alpha_fn,
            epsilon,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.gamma.is_finite()
            && self.gamma >= 0.0
            && self.alpha_fp.is_finite()
            && self.alpha_fp > 0.0
            && self.alpha_fn.is_finite()
            && self.alpha_fn > 0.0
            && self.epsilon.is_finite()
            && self.epsilon > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!(
                "perspective config needs gamma >= 0 and positive alphas/epsilon, got {self:?}"
            )))
        }
    }

    pub fn conservative() -> Self {
        Self {
            gamma: 0.2,
            alpha_fp: 3.0,
            alpha_fn: 0.3,
            epsilon: Self::DEFAULT_EPSILON,
        }
    }

    pub fn neutral() -> Self {
        Self {
            gamma: 0.5,
            alpha_fp: 1.0,
            alpha_fn: 1.0,
            epsilon: Self::DEFAULT_EPSILON,
        }
    }

    pub fn aggressive() -> Self {
        Self {
            gamma: 0.8,
            alpha_fp: 0.3,
            alpha_fn: 3.0,
            epsilon: Self::DEFAULT_EPSILON,
        }
    }

    /// Conservative, neutral, aggressive.
    pub fn default_triple() -> [Self; NUM_HYPOTHESES] {
        [Self::conservative(), Self::neutral(), Self::aggressive()]
    }
}

/// Three logit maps in fixed order (conservative, neutral, aggressive) with
/// their loss configs.
#[derive(Clone, Debug, PartialEq)]
pub struct HypothesisSet {
    logits: [DenseMap; NUM_HYPOTHESES],
    configs: [PerspectiveConfig; NUM_HYPOTHESES],
}

impl HypothesisSet {
    pub fn new(
        logits: [DenseMap; NUM_HYPOTHESES],
        configs: [PerspectiveConfig; NUM_HYPOTHESES],
    ) -> Result<Self> {
        logits[0].ensure_same_dims(&logits[1])?;
        logits[0].ensure_same_dims(&logits[2])?;
        for c in &configs {
            c.validate()?;
        }
        Ok(Self { logits, configs })
    }

    pub fn logits(&self) -> &[DenseMap; NUM_HYPOTHESES] {
        &self.logits
    }

    pub fn configs(&self) -> &[PerspectiveConfig; NUM_HYPOTHESES] {
        &self.configs
    }

    pub fn dims(&self) -> (usize, usize) {
        self.logits[0].dims()
    }
}

/// A scalar loss and its gradient with respect to the input map.
#[derive(Clone, Debug, PartialEq)]
pub struct LossGrad {
    pub value: f64,
    pub grad: DenseMap,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PdtLoss {
    pub total: f64,
    /// `focal + tversky` per token, in hypothesis order.
    pub per_token: [f64; NUM_HYPOTHESES],
    pub grads: [DenseMap; NUM_HYPOTHESES],
}

#[inline]
pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
#[inline]
pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn check_inputs(logits: &DenseMap, labels: &UnitIntervalMap) -> Result<()> {
    logits.ensure_same_dims(labels)?;
    labels.ensure_binary()
}

/// Mean focal loss over pixels; writes `dL/dz` into `grad`.
pub(crate) fn focal_into(logits: &[f64], labels: &[f64], gamma: f64, grad: &mut [f64]) -> f64 {
    let n = logits.len() as f64;
    let mut total = 0.0;
    for ((&z, &y), g) in logits.iter().zip(labels).zip(grad.iter_mut()) {
        let p = sigmoid(z);
        let q = sigmoid(-z);
        // (modulating base, -ln p_t)
        let (loss, d) = if y >= 0.5 {
            let nll = softplus(-z);
            let w = q.powf(gamma);
            (w * nll, -gamma * p * w * nll - q * w)
        } else {
            let nll = softplus(z);
            let w = p.powf(gamma);
            (w * nll, p * w + gamma * q * w * nll)
        };
        total += loss;
        *g = d / n;
    }
    total / n
}

/// Tversky loss from soft counts.
pub fn tversky_from_counts(tp: f64, fp: f64, fn_: f64, config: &PerspectiveConfig) -> f64 {
    1.0 - (tp + config.epsilon)
        / (tp + config.alpha_fp * fp + config.alpha_fn * fn_ + config.epsilon)
}

/// Tversky loss on sigmoided logits; writes `dL/dz` into `grad`.
pub(crate) fn tversky_into(
    logits: &[f64],
    labels: &[f64],
    config: &PerspectiveConfig,
    grad: &mut [f64],
) -> f64 {
    let (mut tp, mut fp, mut fn_) = (0.0, 0.0, 0.0);
    for (&z, &y) in logits.iter().zip(labels) {
        let p = sigmoid(z);
        tp += p * y;
        fp += p * (1.0 - y);
        fn_ += (1.0 - p) * y;
    }
    let num = tp + config.epsilon;
    let den = tp + config.alpha_fp * fp + config.alpha_fn * fn_ + config.epsilon;
    let den2 = den * den;
    for ((&z, &y), g) in logits.iter().zip(labels).zip(grad.iter_mut()) {
        let p = sigmoid(z);
        let d_num = y;
        let d_den = y + config.alpha_fp * (1.0 - y) - config.alpha_fn * y;
        let d_loss_dp = -(d_num * den - num * d_den) / den2;
        *g = d_loss_dp * p * (1.0 - p);
    }
    1.0 - num / den
}

pub fn focal_loss(logits: &DenseMap, labels: &UnitIntervalMap, gamma: f64) -> Result<LossGrad> {
    check_inputs(logits, labels)?;
    if !(gamma.is_finite() && gamma >= 0.0) {
        return Err(Error::InvalidParameter(format!("focal gamma {gamma}")));
    }
    let mut grad = vec![0.0; logits.len()];
    let value = focal_into(logits.values(), labels.values(), gamma, &mut grad);
    Ok(LossGrad {
        value,
        grad: DenseMap::from_vec(logits.height(), logits.width(), grad)?,
    })
}

pub fn tversky_loss(
    logits: &DenseMap,
    labels: &UnitIntervalMap,
    config: &PerspectiveConfig,
) -> Result<LossGrad> {
    check_inputs(logits, labels)?;
    config.validate()?;
    let mut grad = vec![0.0; logits.len()];
    let value = tversky_into(logits.values(), labels.values(), config, &mut grad);
    Ok(LossGrad {
        value,
        grad: DenseMap::from_vec(logits.height(), logits.width(), grad)?,
    })
}

/// Per-token `focal + tversky` and its logit gradient, on raw slices.
pub(crate) fn token_loss_into(
    logits: &[f64],
    labels: &[f64],
    config: &PerspectiveConfig,
    grad: &mut [f64],
) -> f64 {
    let mut tv_grad = vec![0.0; logits.len()];
    let focal = focal_into(logits, labels, config.gamma, grad);
    let tversky = tversky_into(logits, labels, config, &mut tv_grad);
    for (g, t) in grad.iter_mut().zip(&tv_grad) {
        *g += t;
    }
    focal + tversky
}

/// Sum of the three per-token losses. Token `k`'s gradient depends only on
/// its own logits.
pub fn pdt_loss(hypotheses: &HypothesisSet, labels: &UnitIntervalMap) -> Result<PdtLoss> {
    check_inputs(&hypotheses.logits[0], labels)?;
    let (h, w) = hypotheses.dims();
    let mut per_token = [0.0; NUM_HYPOTHESES];
    let mut grads = Vec::with_capacity(NUM_HYPOTHESES);
    for (k, (logits, config)) in hypotheses
        .logits
        .iter()
        .zip(&hypotheses.configs)
        .enumerate()
    {
        let mut grad = vec![0.0; logits.len()];
        per_token[k] = token_loss_into(logits.values(), labels.values(), config, &mut grad);
        grads.push(DenseMap::from_vec(h, w, grad)?);
    }
    let grads: [DenseMap; NUM_HYPOTHESES] = grads.try_into().expect("three gradients");
    Ok(PdtLoss {
        total: per_token.iter().sum(),
        per_token,
        grads,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn labels(values: Vec<f64>, h: usize, w: usize) -> UnitIntervalMap {
        UnitIntervalMap::new(DenseMap::from_vec(h, w, values).unwrap()).unwrap()
    }

    /// Central finite differences of a scalar function of a map.
    fn fd_grad(map: &DenseMap, f: impl Fn(&DenseMap) -> f64) -> Vec<f64> {
        let step = 1e-5;
        (0..map.len())
            .map(|i| {
                let mut plus = map.values().to_vec();
                let mut minus = map.values().to_vec();
                plus[i] += step;
                minus[i] -= step;
                let fp = f(&DenseMap::from_vec(map.height(), map.width(), plus).unwrap());
                let fm = f(&DenseMap::from_vec(map.height(), map.width(), minus).unwrap());
                (fp - fm) / (2.0 * step)
            })
            .collect()
    }

    fn assert_grad_close(analytic: &[f64], numeric: &[f64]) {
        let scale = numeric
            .iter()
            .chain(analytic)
            .fold(0.0f64, |m, v| m.max(v.abs()))
            // below this the finite-difference round-off dominates
            .max(1e-7);
        for (a, n) in analytic.iter().zip(numeric) {
            assert!(
                (a - n).abs() / scale < 1e-4,
                "analytic {a} vs numeric {n} (scale {scale})"
            );
        }
    }

    #[test]
    fn focal_confident_correct_is_zero() {
        let logits = DenseMap::new_filled(3, 3, 20.0).unwrap();
        let y = UnitIntervalMap::new_filled(3, 3, 1.0).unwrap();
        let l = focal_loss(&logits, &y, 0.5).unwrap();
        assert!(l.value >= 0.0 && l.value < 1e-6);
    }

    #[test]
    fn focal_gamma_zero_is_bce() {
        let logits = DenseMap::new_filled(2, 2, 0.0).unwrap();
        let y = UnitIntervalMap::new_filled(2, 2, 1.0).unwrap();
        let l = focal_loss(&logits, &y, 0.0).unwrap();
        assert_relative_eq!(l.value, std::f64::consts::LN_2, epsilon = 1e-15);
    }

    #[test]
    fn focal_single_pixel_reference() {
        // reference values from an independent 40-digit evaluation
        let logits = DenseMap::new_filled(1, 1, 0.7).unwrap();
        let y = UnitIntervalMap::new_filled(1, 1, 1.0).unwrap();
        let l = focal_loss(&logits, &y, 0.5).unwrap();
        assert_relative_eq!(l.value, 0.232_247_843_114_328_2, epsilon = 1e-14);
        assert_relative_eq!(
            l.grad.values()[0],
            -0.268_726_862_141_864_7,
            epsilon = 1e-13
        );
    }

    #[test]
    fn focal_rejects_soft_labels_and_mismatch() {
        let logits = DenseMap::new_filled(2, 2, 0.0).unwrap();
        let soft = UnitIntervalMap::new_filled(2, 2, 0.5).unwrap();
        assert!(matches!(
            focal_loss(&logits, &soft, 0.5),
            Err(Error::NonBinaryLabel { .. })
        ));
        let small = UnitIntervalMap::new_filled(2, 3, 1.0).unwrap();
        assert!(matches!(
            focal_loss(&logits, &small, 0.5),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn tversky_count_identity() {
        let cfg = PerspectiveConfig::conservative();
        let v = tversky_from_counts(50.0, 10.0, 20.0, &cfg);
        assert_relative_eq!(v, 1.0 - 50.000001 / 86.000001, epsilon = 1e-15);
        assert!((v - 0.41860).abs() < 1e-4);
    }

    #[test]
    fn tversky_perfect_and_empty() {
        let y = labels(vec![1.0, 0.0, 1.0, 0.0], 2, 2);
        let logits = DenseMap::from_vec(2, 2, vec![40.0, -40.0, 40.0, -40.0]).unwrap();
        let l = tversky_loss(&logits, &y, &PerspectiveConfig::neutral()).unwrap();
        assert!(l.value.abs() < 1e-12);

        let empty = UnitIntervalMap::new_filled(2, 2, 0.0).unwrap();
        let off = DenseMap::new_filled(2, 2, -800.0).unwrap();
        let l = tversky_loss(&off, &empty, &PerspectiveConfig::neutral()).unwrap();
        assert_eq!(l.value, 0.0);
    }

    #[test]
    fn tversky_unit_weights_is_dice_style() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 25;
        let z: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let y: Vec<f64> = (0..n)
            .map(|_| (rng.random::<f64>() < 0.4) as u8 as f64)
            .collect();
        let cfg = PerspectiveConfig::new(0.0, 1.0, 1.0, 1e-6).unwrap();
        let l = tversky_loss(
            &DenseMap::from_vec(5, 5, z.clone()).unwrap(),
            &labels(y.clone(), 5, 5),
            &cfg,
        )
        .unwrap();
        let (mut tp, mut fp, mut fn_) = (0.0, 0.0, 0.0);
        for (z, y) in z.iter().zip(&y) {
            let p = 1.0 / (1.0 + (-z).exp());
            tp += p * y;
            fp += p * (1.0 - y);
            fn_ += (1.0 - p) * y;
        }
        assert!((l.value - (1.0 - tp / (tp + fp + fn_))).abs() < 1e-6);
    }

    #[test]
    fn tversky_monotone_in_asymmetry() {
        // one false positive pixel held fixed
        let y = labels(vec![1.0, 1.0, 0.0], 1, 3);
        let z = DenseMap::from_vec(1, 3, vec![2.0, 0.5, 1.0]).unwrap();
        let mut last = -1.0;
        for a in [0.3, 1.0, 3.0, 10.0] {
            let cfg = PerspectiveConfig::new(0.0, a, 1.0, 1e-6).unwrap();
            let v = tversky_loss(&z, &y, &cfg).unwrap().value;
            assert!(v > last);
            last = v;
        }
        let mut last = -1.0;
        for a in [0.3, 1.0, 3.0, 10.0] {
            let cfg = PerspectiveConfig::new(0.0, 1.0, a, 1e-6).unwrap();
            let v = tversky_loss(&z, &y, &cfg).unwrap().value;
            assert!(v > last);
            last = v;
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let (h, w) = (rng.random_range(1..5), rng.random_range(1..5));
            let n = h * w;
            let z = DenseMap::from_vec(h, w, (0..n).map(|_| rng.random_range(-4.0..4.0)).collect())
                .unwrap();
            let y = labels(
                (0..n)
                    .map(|_| (rng.random::<f64>() < 0.5) as u8 as f64)
                    .collect(),
                h,
                w,
            );
            let cfg = PerspectiveConfig::new(
                rng.random_range(0.0..2.0),
                rng.random_range(0.1..4.0),
                rng.random_range(0.1..4.0),
                1e-6,
            )
            .unwrap();
            let f = focal_loss(&z, &y, cfg.gamma).unwrap();
            let fd = fd_grad(&z, |m| focal_loss(m, &y, cfg.gamma).unwrap().value);
            assert_grad_close(f.grad.values(), &fd);

            let t = tversky_loss(&z, &y, &cfg).unwrap();
            let fd = fd_grad(&z, |m| tversky_loss(m, &y, &cfg).unwrap().value);
            assert_grad_close(t.grad.values(), &fd);
        }
    }

    fn random_set(rng: &mut ChaCha8Rng, h: usize, w: usize) -> HypothesisSet {
        let maps = std::array::from_fn(|_| {
            DenseMap::from_vec(
                h,
                w,
                (0..h * w).map(|_| rng.random_range(-3.0..3.0)).collect(),
            )
            .unwrap()
        });
        HypothesisSet::new(maps, PerspectiveConfig::default_triple()).unwrap()
    }

    #[test]
    fn pdt_total_is_sum_of_components() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let set = random_set(&mut rng, 4, 4);
        let y = labels(
            (0..16)
                .map(|_| (rng.random::<f64>() < 0.5) as u8 as f64)
                .collect(),
            4,
            4,
        );
        let pdt = pdt_loss(&set, &y).unwrap();
        let mut expected = 0.0;
        for (logits, cfg) in set.logits().iter().zip(set.configs()) {
            expected += focal_loss(logits, &y, cfg.gamma).unwrap().value
                + tversky_loss(logits, &y, cfg).unwrap().value;
        }
        assert_relative_eq!(pdt.total, expected, epsilon = 1e-14);
    }

    #[test]
    fn pdt_perfect_predictions() {
        let y = labels(vec![1.0, 0.0, 0.0, 1.0], 2, 2);
        let z = DenseMap::from_vec(2, 2, vec![50.0, -50.0, -50.0, 50.0]).unwrap();
        let set = HypothesisSet::new(
            [z.clone(), z.clone(), z],
            PerspectiveConfig::default_triple(),
        )
        .unwrap();
        assert!(pdt_loss(&set, &y).unwrap().total < 1e-9);
    }

    #[test]
    fn pdt_has_no_cross_token_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let set = random_set(&mut rng, 3, 3);
        let y = labels(
            (0..9)
                .map(|_| (rng.random::<f64>() < 0.5) as u8 as f64)
                .collect(),
            3,
            3,
        );
        let base = pdt_loss(&set, &y).unwrap();
        // perturbing token j changes only per_token[j]
        for j in 0..3 {
            let mut maps = set.logits().clone();
            maps[j] = maps[j].map(|v| v + 0.3).unwrap();
            let moved = pdt_loss(&HypothesisSet::new(maps, *set.configs()).unwrap(), &y).unwrap();
            for k in 0..3 {
                if k != j {
                    assert_eq!(moved.per_token[k], base.per_token[k]);
                    assert_eq!(moved.grads[k], base.grads[k]);
                }
            }
        }
    }

    #[test]
    fn pdt_is_permutation_covariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let set = random_set(&mut rng, 4, 3);
        let y = labels(
            (0..12)
                .map(|_| (rng.random::<f64>() < 0.5) as u8 as f64)
                .collect(),
            4,
            3,
        );
        let base = pdt_loss(&set, &y).unwrap();
        let perm = [2, 0, 1];
        let maps = perm.map(|i| set.logits()[i].clone());
        let cfgs = perm.map(|i| set.configs()[i]);
        let permuted = pdt_loss(&HypothesisSet::new(maps, cfgs).unwrap(), &y).unwrap();
        for (slot, &src) in perm.iter().enumerate() {
            assert_eq!(permuted.per_token[slot], base.per_token[src]);
        }
        assert_relative_eq!(permuted.total, base.total, epsilon = 1e-14);
    }
}
