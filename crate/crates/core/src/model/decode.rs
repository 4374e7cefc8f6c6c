//! Token decoding and its reverse pass.
//!
//! Every head `j` turns its token (plus the mean prompt token) into a
//! per-pixel projection vector through a one-hidden-layer tanh MLP, then
//! takes the inner product with each pixel's features. Semantic heads emit
//! raw logits, geometric heads emit sigmoided risks, and the depth head is a
//! plain linear map of the features.

use serde::{Deserialize, Serialize};

use super::features::{FeatureMap, FEATURE_DIM};
use super::tokens::{TokenBank, HEAD_ELEVATION, HEAD_SLOPE, NUM_HEADS};
use crate::dense_map::{DenseMap, UnitIntervalMap};
use crate::error::{Error, Result};
use crate::geo_losses::{smooth_l1_into, ssi_into, GeoLossWeights};
use crate::pdt_losses::{sigmoid, token_loss_into, PerspectiveConfig, NUM_HYPOTHESES};

/// Loss configuration shared by training and gradient checks.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Objective {
    pub perspectives: [PerspectiveConfig; NUM_HYPOTHESES],
    pub geo: GeoLossWeights,
}

impl Default for Objective {
    fn default() -> Self {
        Self {
            perspectives: PerspectiveConfig::default_triple(),
            geo: GeoLossWeights::default(),
        }
    }
}

/// Projection vectors for all heads plus the intermediates the reverse pass needs.
pub(crate) struct Projections {
    pub inputs: Vec<Vec<f64>>,
    pub hidden: Vec<Vec<f64>>,
    pub weights: [[f64; FEATURE_DIM]; NUM_HEADS],
}

pub(crate) fn projections(bank: &TokenBank) -> Projections {
    let layout = &bank.layout;
    let d = layout.dims.token_dim;
    let hdn = layout.dims.hidden;
    let p = &bank.params;
    let np = layout.dims.num_prompts;
    let mut prompt_mean = vec![0.0; d];
    for i in 0..np {
        for (m, v) in prompt_mean.iter_mut().zip(&p[layout.prompt(i)]) {
            *m += v;
        }
    }
    prompt_mean.iter_mut().for_each(|m| *m /= np as f64);

    let mut inputs = Vec::with_capacity(NUM_HEADS);
    let mut hidden = Vec::with_capacity(NUM_HEADS);
    let mut weights = [[0.0; FEATURE_DIM]; NUM_HEADS];
    for (head, w_out) in weights.iter_mut().enumerate() {
        let x: Vec<f64> = p[layout.token(head)]
            .iter()
            .zip(&prompt_mean)
            .map(|(t, m)| t + m)
            .collect();
        let m = layout.mlp(head);
        let hid: Vec<f64> = (0..hdn)
            .map(|i| {
                let row = &p[m.w1 + i * d..m.w1 + (i + 1) * d];
                let a: f64 = row.iter().zip(&x).map(|(w, x)| w * x).sum::<f64>() + p[m.b1 + i];
                a.tanh()
            })
            .collect();
        for (k, w) in w_out.iter_mut().enumerate() {
            let row = &p[m.w2 + k * hdn..m.w2 + (k + 1) * hdn];
            *w = row.iter().zip(&hid).map(|(w, h)| w * h).sum::<f64>() + p[m.b2 + k];
        }
        inputs.push(x);
        hidden.push(hid);
    }
    Projections {
        inputs,
        hidden,
        weights,
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(a, b)| a * b).sum()
}

/// Raw per-head pre-activations and depth for every pixel.
pub(crate) struct RawOutputs {
    /// `z[head][pixel]`
    pub z: Vec<Vec<f64>>,
    pub depth: Vec<f64>,
}

pub(crate) fn raw_forward(
    bank: &TokenBank,
    proj: &Projections,
    features: &FeatureMap,
) -> RawOutputs {
    let n = features.num_pixels();
    let depth_w = &bank.params[bank.layout.depth..bank.layout.depth + FEATURE_DIM];
    let depth_b = bank.params[bank.layout.depth + FEATURE_DIM];
    let mut z: Vec<Vec<f64>> = (0..NUM_HEADS).map(|_| Vec::with_capacity(n)).collect();
    let mut depth = Vec::with_capacity(n);
    for f in features.pixels() {
        for (head, zs) in z.iter_mut().enumerate() {
            zs.push(dot(&proj.weights[head], f));
        }
        depth.push(dot(depth_w, f) + depth_b);
    }
    RawOutputs { z, depth }
}

/// Decoded maps for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct DecodeOutput {
    pub semantic_logits: [DenseMap; NUM_HYPOTHESES],
    pub slope_risk: UnitIntervalMap,
    pub elevation_risk: UnitIntervalMap,
    pub depth: DenseMap,
}

pub fn decode(bank: &TokenBank, features: &FeatureMap) -> Result<DecodeOutput> {
    let (h, w) = features.dims();
    let proj = projections(bank);
    let raw = raw_forward(bank, &proj, features);
    let map = |v: Vec<f64>| DenseMap::from_vec(h, w, v);
    let risk = |v: &[f64]| UnitIntervalMap::new(map(v.iter().map(|&z| sigmoid(z)).collect())?);
    let mut z = raw.z;
    let slope_risk = risk(&z[HEAD_SLOPE])?;
    let elevation_risk = risk(&z[HEAD_ELEVATION])?;
    z.truncate(NUM_HYPOTHESES);
    let semantic_logits: Vec<DenseMap> = z.into_iter().map(map).collect::<Result<_>>()?;
    Ok(DecodeOutput {
        semantic_logits: semantic_logits.try_into().expect("three semantic heads"),
        slope_risk,
        elevation_risk,
        depth: map(raw.depth)?,
    })
}

/// Supervision for one training image, all as row-major slices.
#[derive(Clone, Copy, Debug)]
pub struct SampleTargets<'a> {
    pub labels: &'a [f64],
    pub pseudo_slope: &'a [f64],
    pub pseudo_elevation: &'a [f64],
    pub teacher_depth: &'a [f64],
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub per_token: [f64; NUM_HYPOTHESES],
    pub sem: f64,
    pub geo: f64,
    pub distill: f64,
    pub total: f64,
}

impl LossComponents {
    pub fn is_finite(&self) -> bool {
        self.per_token.iter().all(|v| v.is_finite())
            && [self.sem, self.geo, self.distill, self.total]
                .iter()
                .all(|v| v.is_finite())
    }

    pub(crate) fn accumulate(&mut self, other: &LossComponents, weight: f64) {
        for k in 0..NUM_HYPOTHESES {
            self.per_token[k] += weight * other.per_token[k];
        }
        self.sem += weight * other.sem;
        self.geo += weight * other.geo;
        self.distill += weight * other.distill;
        self.total += weight * other.total;
    }
}

/// Per-image gradient with respect to the five projection vectors and the
/// depth head. The MLP backward pass is linear in these, so a batch can sum
/// them before a single [`backprop_projections`].
pub(crate) struct SampleGrad {
    pub proj: [[f64; FEATURE_DIM]; NUM_HEADS],
    pub depth: [f64; FEATURE_DIM + 1],
}

impl SampleGrad {
    pub fn zero() -> Self {
        Self {
            proj: [[0.0; FEATURE_DIM]; NUM_HEADS],
            depth: [0.0; FEATURE_DIM + 1],
        }
    }

    pub fn add_scaled(&mut self, other: &SampleGrad, k: f64) {
        for (a, b) in self
            .proj
            .iter_mut()
            .flatten()
            .zip(other.proj.iter().flatten())
        {
            *a += k * b;
        }
        for (a, b) in self.depth.iter_mut().zip(&other.depth) {
            *a += k * b;
        }
    }
}

fn check_targets(n: usize, targets: &SampleTargets<'_>) -> Result<()> {
    for len in [
        targets.labels.len(),
        targets.pseudo_slope.len(),
        targets.pseudo_elevation.len(),
        targets.teacher_depth.len(),
    ] {
        if len != n {
            return Err(Error::InvalidParameter(format!(
                "target has {len} pixels, features have {n}"
            )));
        }
    }
    Ok(())
}

pub(crate) fn sample_pass(
    bank: &TokenBank,
    proj: &Projections,
    features: &FeatureMap,
    targets: &SampleTargets<'_>,
    objective: &Objective,
) -> Result<(LossComponents, SampleGrad)> {
    let n = features.num_pixels();
    check_targets(n, targets)?;
    let lambda_geo = objective.geo.lambda_geo;
    let raw = raw_forward(bank, proj, features);

    // dL/dz per head and pixel
    let mut gz = vec![vec![0.0; n]; NUM_HEADS];
    let mut comps = LossComponents::default();
    for (k, (loss, g)) in comps.per_token.iter_mut().zip(gz.iter_mut()).enumerate() {
        *loss = token_loss_into(&raw.z[k], targets.labels, &objective.perspectives[k], g);
    }
    comps.sem = comps.per_token.iter().sum();

    for (head, target, lambda) in [
        (HEAD_SLOPE, targets.pseudo_slope, objective.geo.lambda_slope),
        (
            HEAD_ELEVATION,
            targets.pseudo_elevation,
            objective.geo.lambda_elev,
        ),
    ] {
        let risk: Vec<f64> = raw.z[head].iter().map(|&z| sigmoid(z)).collect();
        let mut g_risk = vec![0.0; n];
        comps.geo += lambda * smooth_l1_into(&risk, target, lambda, &mut g_risk);
        for ((g, gr), r) in gz[head].iter_mut().zip(&g_risk).zip(&risk) {
            *g = lambda_geo * gr * r * (1.0 - r);
        }
    }

    let mut g_depth = vec![0.0; n];
    let (distill, _) = ssi_into(&raw.depth, targets.teacher_depth, &mut g_depth);
    comps.distill = distill;
    comps.total = comps.sem + lambda_geo * (comps.geo + comps.distill);

    let mut grad = SampleGrad::zero();
    for (i, f) in features.pixels().enumerate() {
        for (head, acc) in grad.proj.iter_mut().enumerate() {
            let g = gz[head][i];
            if g != 0.0 {
                for (a, x) in acc.iter_mut().zip(f) {
                    *a += g * x;
                }
            }
        }
        let g = lambda_geo * g_depth[i];
        for (a, x) in grad.depth.iter_mut().zip(f) {
            *a += g * x;
        }
        grad.depth[FEATURE_DIM] += g;
    }
    Ok((comps, grad))
}

/// Pushes projection-vector gradients back through every MLP into its
/// token and the shared prompt tokens, writing the full parameter gradient.
pub(crate) fn backprop_projections(
    bank: &TokenBank,
    proj: &Projections,
    sample: &SampleGrad,
    grad: &mut [f64],
) {
    let layout = bank.layout;
    let d = layout.dims.token_dim;
    let hdn = layout.dims.hidden;
    let p = &bank.params;
    grad.iter_mut().for_each(|g| *g = 0.0);
    grad[layout.depth..].copy_from_slice(&sample.depth);

    let mut g_prompt_mean = vec![0.0; d];
    for head in 0..NUM_HEADS {
        let m = layout.mlp(head);
        let hid = &proj.hidden[head];
        let x = &proj.inputs[head];
        let gw = &sample.proj[head];
        let mut g_hid = vec![0.0; hdn];
        for k in 0..FEATURE_DIM {
            grad[m.b2 + k] = gw[k];
            for i in 0..hdn {
                grad[m.w2 + k * hdn + i] = gw[k] * hid[i];
                g_hid[i] += gw[k] * p[m.w2 + k * hdn + i];
            }
        }
        let mut g_x = vec![0.0; d];
        for i in 0..hdn {
            let ga = g_hid[i] * (1.0 - hid[i] * hid[i]);
            grad[m.b1 + i] = ga;
            for j in 0..d {
                grad[m.w1 + i * d + j] = ga * x[j];
                g_x[j] += ga * p[m.w1 + i * d + j];
            }
        }
        let token = layout.token(head).start;
        for (j, g) in g_x.iter().enumerate() {
            grad[token + j] = *g;
            g_prompt_mean[j] += g;
        }
    }
    let np = layout.dims.num_prompts;
    for i in 0..np {
        let start = layout.prompt(i).start;
        for (j, g) in g_prompt_mean.iter().enumerate() {
            grad[start + j] = g / np as f64;
        }
    }
}

/// Total loss of one image and its gradient with respect to every parameter.
pub fn loss_and_grad(
    bank: &TokenBank,
    features: &FeatureMap,
    targets: &SampleTargets<'_>,
    objective: &Objective,
) -> Result<(LossComponents, Vec<f64>)> {
    let proj = projections(bank);
    let (comps, sample) = sample_pass(bank, &proj, features, targets, objective)?;
    let mut grad = vec![0.0; bank.layout.total];
    backprop_projections(bank, &proj, &sample, &mut grad);
    Ok((comps, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::features::extract_features;
    use crate::model::tokens::ModelDims;
    use crate::raster::RgbImage;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> RgbImage {
        let mut plane = || DenseMap::from_fn(h, w, |_, _| rng.random::<f64>()).unwrap();
        RgbImage::new(plane(), plane(), plane()).unwrap()
    }

    #[test]
    fn zero_output_layer_gives_neutral_maps() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let f = extract_features(&random_image(&mut rng, 8, 8)).unwrap();
        let mut bank = TokenBank::init(ModelDims::default(), 3).unwrap();
        for head in 0..NUM_HEADS {
            bank.mlp_output_mut(head).iter_mut().for_each(|v| *v = 0.0);
        }
        let out = decode(&bank, &f).unwrap();
        for m in &out.semantic_logits {
            assert!(m.values().iter().all(|&v| v == 0.0));
        }
        assert!(out.slope_risk.values().iter().all(|&v| v == 0.5));
        assert!(out.elevation_risk.values().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn doubling_output_layer_doubles_only_that_head() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = extract_features(&random_image(&mut rng, 8, 9)).unwrap();
        let bank = TokenBank::init(ModelDims::default(), 4).unwrap();
        let base = decode(&bank, &f).unwrap();
        for k in 0..NUM_HYPOTHESES {
            let mut doubled = bank.clone();
            doubled.mlp_output_mut(k).iter_mut().for_each(|v| *v *= 2.0);
            let out = decode(&doubled, &f).unwrap();
            for j in 0..NUM_HYPOTHESES {
                for (a, b) in out.semantic_logits[j]
                    .values()
                    .iter()
                    .zip(base.semantic_logits[j].values())
                {
                    let expected = if j == k { 2.0 * b } else { *b };
                    assert!((a - expected).abs() <= 1e-12 * (1.0 + b.abs()));
                }
            }
            assert_eq!(out.slope_risk, base.slope_risk);
            assert_eq!(out.depth, base.depth);
        }
    }

    fn random_targets(rng: &mut ChaCha8Rng, n: usize) -> [Vec<f64>; 4] {
        [
            (0..n)
                .map(|_| f64::from(rng.random_bool(0.5) as u8))
                .collect(),
            (0..n).map(|_| rng.random::<f64>()).collect(),
            (0..n).map(|_| rng.random::<f64>()).collect(),
            (0..n).map(|_| 1.0 + 3.0 * rng.random::<f64>()).collect(),
        ]
    }

    #[test]
    #[allow(clippy::needless_range_loop)]
    fn full_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let f = extract_features(&random_image(&mut rng, 8, 8)).unwrap();
        let [labels, slope, elev, depth] = random_targets(&mut rng, 64);
        let targets = SampleTargets {
            labels: &labels,
            pseudo_slope: &slope,
            pseudo_elevation: &elev,
            teacher_depth: &depth,
        };
        let dims = ModelDims {
            num_prompts: 4,
            token_dim: 6,
            hidden: 5,
        };
        let bank = TokenBank::init(dims, 2).unwrap();
        let objective = Objective::default();
        let (_, grad) = loss_and_grad(&bank, &f, &targets, &objective).unwrap();
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        let mut scale: f64 = 0.0;
        for i in 0..bank.num_params() {
            let mut plus = bank.clone();
            plus.params_mut()[i] += h;
            let mut minus = bank.clone();
            minus.params_mut()[i] -= h;
            let lp = loss_and_grad(&plus, &f, &targets, &objective)
                .unwrap()
                .0
                .total;
            let lm = loss_and_grad(&minus, &f, &targets, &objective)
                .unwrap()
                .0
                .total;
            let fd = (lp - lm) / (2.0 * h);
            worst = worst.max((fd - grad[i]).abs());
            scale = scale.max(fd.abs());
        }
        assert!(
            worst / scale.max(1e-7) < 1e-4,
            "worst {worst}, scale {scale}"
        );
    }

    #[test]
    fn semantic_gradients_are_isolated_per_token() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = extract_features(&random_image(&mut rng, 8, 8)).unwrap();
        let [labels, slope, elev, depth] = random_targets(&mut rng, 64);
        let targets = SampleTargets {
            labels: &labels,
            pseudo_slope: &slope,
            pseudo_elevation: &elev,
            teacher_depth: &depth,
        };
        let bank = TokenBank::init(ModelDims::default(), 9).unwrap();
        let proj = projections(&bank);
        let mut objective = Objective::default();
        objective.geo.lambda_geo = 0.0;
        let (_, base) = sample_pass(&bank, &proj, &f, &targets, &objective).unwrap();
        // changing one perspective's weights leaves the other heads' gradients untouched
        objective.perspectives[0] = PerspectiveConfig::new(0.9, 7.0, 0.1, 1e-6).unwrap();
        let (_, changed) = sample_pass(&bank, &proj, &f, &targets, &objective).unwrap();
        assert_ne!(base.proj[0], changed.proj[0]);
        assert_eq!(base.proj[1], changed.proj[1]);
        assert_eq!(base.proj[2], changed.proj[2]);
        assert_eq!(changed.proj[HEAD_SLOPE], [0.0; FEATURE_DIM]);
    }
}
