//! Conservative score fusion and the total training objective.

use crate::dense_map::{DenseMap, UnitIntervalMap};
use crate::error::{Error, Result};

/// Everything the model produces for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct TraversabilityOutput {
    pub mean_p: UnitIntervalMap,
    pub confidence: UnitIntervalMap,
    pub slope_risk: UnitIntervalMap,
    pub elevation_risk: UnitIntervalMap,
    pub score: UnitIntervalMap,
    pub variance: DenseMap,
}

/// `T = C * P * (1 - (R_slope + R_elev) / 2)`.
pub fn fuse(
    confidence: &UnitIntervalMap,
    mean_p: &UnitIntervalMap,
    slope_risk: &UnitIntervalMap,
    elevation_risk: &UnitIntervalMap,
) -> Result<UnitIntervalMap> {
    confidence.ensure_same_dims(mean_p)?;
    confidence.ensure_same_dims(slope_risk)?;
    confidence.ensure_same_dims(elevation_risk)?;
    let values = confidence
        .values()
        .iter()
        .zip(mean_p.values())
        .zip(slope_risk.values())
        .zip(elevation_risk.values())
        .map(|(((c, p), rs), re)| c * p * (1.0 - (rs + re) / 2.0))
        .collect();
    UnitIntervalMap::new(DenseMap::from_vec(
        confidence.height(),
        confidence.width(),
        values,
    )?)
}

/// `L_sem + lambda_geo * (L_geo + L_distill)`.
pub fn total_loss(sem: f64, geo: f64, distill: f64, lambda_geo: f64) -> Result<f64> {
    for (name, v) in [
        ("sem", sem),
        ("geo", geo),
        ("distill", distill),
        ("lambda_geo", lambda_geo),
    ] {
        if !(v.is_finite() && v >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "loss component {name} = {v} must be finite and >= 0"
            )));
        }
    }
    Ok(sem + lambda_geo * (geo + distill))
}
