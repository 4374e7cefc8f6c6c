//! Inter-hypothesis variance and the confidence weight derived from it.

use serde::{Deserialize, Serialize};

use crate::dense_map::{DenseMap, UnitIntervalMap};
use crate::error::{Error, Result};
use crate::pdt_losses::{sigmoid, HypothesisSet, NUM_HYPOTHESES};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UncertaintyParams {
    /// Suppression strength; confidence at the most uncertain pixel is `1 - alpha`.
    pub alpha: f64,
    pub epsilon: f64,
}

impl Default for UncertaintyParams {
    fn default() -> Self {
        Self {
            alpha: 0.7,
            epsilon: 1e-6,
        }
    }
}

impl UncertaintyParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) || !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "uncertainty needs 0 <= alpha <= 1 and epsilon > 0, got {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UncertaintyOutput {
    pub mean_p: UnitIntervalMap,
    pub variance: DenseMap,
    pub confidence: UnitIntervalMap,
    pub alpha: f64,
    pub epsilon: f64,
}

/// Mean and population variance (divisor 3) of the sigmoided hypotheses.
pub fn mean_and_variance(hypotheses: &HypothesisSet) -> Result<(UnitIntervalMap, DenseMap)> {
    let logits = hypotheses.logits();
    mean_and_variance_of_probs(&logits.each_ref().map(|m| m.map(sigmoid).expect("finite")))
}

/// As [`mean_and_variance`], on maps that are already probabilities.
pub fn mean_and_variance_of_probs(
    probs: &[DenseMap; NUM_HYPOTHESES],
) -> Result<(UnitIntervalMap, DenseMap)> {
    probs[0].ensure_same_dims(&probs[1])?;
    probs[0].ensure_same_dims(&probs[2])?;
    let (h, w) = probs[0].dims();
    let n = NUM_HYPOTHESES as f64;
    let mut mean = Vec::with_capacity(h * w);
    let mut var = Vec::with_capacity(h * w);
    for i in 0..h * w {
        let s = [
            probs[0].values()[i],
            probs[1].values()[i],
            probs[2].values()[i],
        ];
        let m = s.iter().sum::<f64>() / n;
        let v = s.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
        mean.push(m.clamp(0.0, 1.0));
        var.push(v);
    }
    Ok((
        UnitIntervalMap::new(DenseMap::from_vec(h, w, mean)?)?,
        DenseMap::from_vec(h, w, var)?,
    ))
}

/// `C = 1 - alpha * var / (max(var) + epsilon)`, normalised per image.
pub fn confidence_from_variance(
    variance: &DenseMap,
    alpha: f64,
    epsilon: f64,
) -> Result<UnitIntervalMap> {
    UncertaintyParams { alpha, epsilon }.validate()?;
    if let Some((index, &value)) = variance
        .values()
        .iter()
        .enumerate()
        .find(|(_, v)| **v < 0.0)
    {
        return Err(Error::InvalidParameter(format!(
            "negative variance {value} at index {index}"
        )));
    }
    let denom = variance.max() + epsilon;
    UnitIntervalMap::new(variance.map(|v| 1.0 - alpha * (v / denom))?)
}

pub fn estimate(
    hypotheses: &HypothesisSet,
    params: &UncertaintyParams,
) -> Result<UncertaintyOutput> {
    let (mean_p, variance) = mean_and_variance(hypotheses)?;
    let confidence = confidence_from_variance(&variance, params.alpha, params.epsilon)?;
    Ok(UncertaintyOutput {
        mean_p,
        variance,
        confidence,
        alpha: params.alpha,
        epsilon: params.epsilon,
    })
}
