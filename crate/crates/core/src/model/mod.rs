//! The trainable model: fixed features, a token bank decoded by per-token
//! MLPs, a deterministic AdamW trainer and the inference pipeline.

mod decode;
mod features;
mod tokens;

pub use decode::{decode, loss_and_grad, DecodeOutput, LossComponents, Objective, SampleTargets};
pub use features::{channel, extract_features, FeatureMap, FEATURE_DIM, MIN_IMAGE_SIZE};
pub use tokens::{
    ModelDims, TokenBank, CHECKPOINT_VERSION, HEAD_ELEVATION, HEAD_SLOPE, NUM_GEOMETRIC, NUM_HEADS,
};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dense_map::{DenseMap, UnitIntervalMap};
use crate::error::{Error, Result};
use crate::fusion::{self, TraversabilityOutput};
use crate::geometry;
use crate::pdt_losses::{sigmoid, NUM_HYPOTHESES};
use crate::raster::RgbImage;
use crate::uncertainty::{self, UncertaintyParams};
use decode::{backprop_projections, projections, sample_pass, SampleGrad};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Peak rate for tokens and their MLPs.
    pub lr_tokens: f64,
    /// Peak rate for the depth head.
    pub lr_depth: f64,
    pub batch_size: usize,
    /// Optimizer steps per epoch. `None` means one pass over the data.
    pub steps_per_epoch: Option<usize>,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    pub rng_seed: u64,
    pub model: ModelDims,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            lr_tokens: 1e-2,
            lr_depth: 1e-2,
            batch_size: 8,
            steps_per_epoch: None,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-8,
            rng_seed: 0,
            model: ModelDims::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        if self.epochs == 0 || self.batch_size == 0 || self.steps_per_epoch == Some(0) {
            return bad(format!(
                "epochs, batch_size and steps_per_epoch must be >= 1: {self:?}"
            ));
        }
        if !(self.lr_tokens > 0.0 && self.lr_tokens.is_finite())
            || !(self.lr_depth > 0.0 && self.lr_depth.is_finite())
        {
            return bad(format!(
                "learning rates must be positive and finite: {} / {}",
                self.lr_tokens, self.lr_depth
            ));
        }
        if !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
            || !(self.adam_epsilon > 0.0 && self.adam_epsilon.is_finite())
            || !(self.weight_decay >= 0.0 && self.weight_decay.is_finite())
        {
            return bad(format!("invalid optimizer constants: {self:?}"));
        }
        self.model.validate()
    }
}

/// One training image with all of its supervision precomputed.
#[derive(Clone, Debug)]
pub struct TrainingSample {
    pub features: FeatureMap,
    pub label: UnitIntervalMap,
    pub pseudo_slope: UnitIntervalMap,
    pub pseudo_elevation: UnitIntervalMap,
    pub teacher_depth: DenseMap,
}

impl TrainingSample {
    /// Features from `rgb`; risk pseudo labels from `depth` with the ground
    /// plane fitted on the traversable pixels of `label`.
    pub fn new(
        rgb: &RgbImage,
        depth: &DenseMap,
        label: &UnitIntervalMap,
        beta: f64,
    ) -> Result<Self> {
        label.ensure_binary()?;
        rgb.channels()[0].ensure_same_dims(depth)?;
        depth.ensure_same_dims(label)?;
        let features = extract_features(rgb)?;
        let (pseudo, _) = geometry::pseudo_labels(depth, label, beta)?;
        Ok(Self {
            features,
            label: label.clone(),
            pseudo_slope: pseudo.slope,
            pseudo_elevation: pseudo.elevation,
            teacher_depth: depth.clone(),
        })
    }

    pub fn targets(&self) -> SampleTargets<'_> {
        SampleTargets {
            labels: self.label.values(),
            pseudo_slope: self.pseudo_slope.values(),
            pseudo_elevation: self.pseudo_elevation.values(),
            teacher_depth: self.teacher_depth.values(),
        }
    }
}

/// Mean loss components over one epoch's batches.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub losses: LossComponents,
    pub lr_tokens: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub bank: TokenBank,
    pub log: Vec<EpochLog>,
}

/// Mean loss of `bank` over `samples` without updating anything.
pub fn dataset_loss(
    bank: &TokenBank,
    samples: &[TrainingSample],
    objective: &Objective,
) -> Result<LossComponents> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let proj = projections(bank);
    let per: Vec<LossComponents> = samples
        .par_iter()
        .map(|s| sample_pass(bank, &proj, &s.features, &s.targets(), objective).map(|r| r.0))
        .collect::<Result<_>>()?;
    let mut mean = LossComponents::default();
    let w = 1.0 / samples.len() as f64;
    per.iter().for_each(|c| mean.accumulate(c, w));
    Ok(mean)
}

struct AdamW {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl AdamW {
    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(
        &mut self,
        params: &mut [f64],
        grad: &[f64],
        lr_of: impl Fn(usize) -> f64,
        cfg: &TrainConfig,
    ) {
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t);
        let c2 = 1.0 - cfg.beta2.powi(self.t);
        for (i, p) in params.iter_mut().enumerate() {
            let g = grad[i];
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g;
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            let lr = lr_of(i);
            *p -= lr * (m_hat / (v_hat.sqrt() + cfg.adam_epsilon) + cfg.weight_decay * *p);
        }
    }
}

fn cosine_factor(step: usize, total: usize) -> f64 {
    0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos())
}

/// Trains a freshly initialised bank. Batches are reduced in scene-index
/// order, so results are bit-identical for a given seed regardless of the
/// number of threads.
pub fn train(
    samples: &[TrainingSample],
    config: &TrainConfig,
    objective: &Objective,
) -> Result<TrainOutcome> {
    config.validate()?;
    for p in &objective.perspectives {
        p.validate()?;
    }
    objective.geo.validate()?;
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let dims = samples[0].features.dims();
    if let Some(s) = samples.iter().find(|s| s.features.dims() != dims) {
        return Err(Error::DimensionMismatch {
            expected: dims,
            found: s.features.dims(),
        });
    }

    let mut bank = TokenBank::init(config.model, config.rng_seed)?;
    let layout = bank.layout;
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut cursor = order.len();
    let batch = config.batch_size.min(samples.len());
    let steps = config
        .steps_per_epoch
        .unwrap_or_else(|| samples.len().div_ceil(batch));
    let total_steps = steps * config.epochs;
    let mut opt = AdamW::new(layout.total);
    let mut grad = vec![0.0; layout.total];
    let mut log = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let mut epoch_loss = LossComponents::default();
        let mut lr_tokens = 0.0;
        for step in 0..steps {
            let mut idx = Vec::with_capacity(batch);
            while idx.len() < batch {
                if cursor == order.len() {
                    order.shuffle(&mut rng);
                    cursor = 0;
                }
                idx.push(order[cursor]);
                cursor += 1;
            }
            idx.sort_unstable();

            let proj = projections(&bank);
            let results: Vec<(LossComponents, SampleGrad)> = idx
                .par_iter()
                .map(|&i| {
                    let s = &samples[i];
                    sample_pass(&bank, &proj, &s.features, &s.targets(), objective)
                })
                .collect::<Result<_>>()?;
            let w = 1.0 / batch as f64;
            let mut batch_loss = LossComponents::default();
            let mut batch_grad = SampleGrad::zero();
            for (c, g) in &results {
                batch_loss.accumulate(c, w);
                batch_grad.add_scaled(g, w);
            }
            backprop_projections(&bank, &proj, &batch_grad, &mut grad);
            if !batch_loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: step,
                    sem: batch_loss.sem,
                    geo: batch_loss.geo,
                    distill: batch_loss.distill,
                });
            }
            epoch_loss.accumulate(&batch_loss, 1.0 / steps as f64);

            let factor = cosine_factor(epoch * steps + step, total_steps);
            lr_tokens = config.lr_tokens * factor;
            let lr_depth = config.lr_depth * factor;
            opt.step(
                &mut bank.params,
                &grad,
                |i| {
                    if layout.is_depth_param(i) {
                        lr_depth
                    } else {
                        lr_tokens
                    }
                },
                config,
            );
        }
        log.push(EpochLog {
            epoch,
            losses: epoch_loss,
            lr_tokens,
        });
    }
    Ok(TrainOutcome { bank, log })
}

/// Every map the model produces for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct Inference {
    pub output: TraversabilityOutput,
    /// Sigmoided semantic hypotheses (conservative, neutral, aggressive).
    pub hypotheses: [UnitIntervalMap; NUM_HYPOTHESES],
    pub depth: DenseMap,
}

pub fn infer_detailed(
    bank: &TokenBank,
    image: &RgbImage,
    params: &UncertaintyParams,
) -> Result<Inference> {
    let features = extract_features(image)?;
    let decoded = decode(bank, &features)?;
    let probs = decoded
        .semantic_logits
        .each_ref()
        .map(|m| m.map(sigmoid).expect("sigmoid of finite logits is finite"));
    let (mean_p, variance) = uncertainty::mean_and_variance_of_probs(&probs)?;
    let confidence =
        uncertainty::confidence_from_variance(&variance, params.alpha, params.epsilon)?;
    let score = fusion::fuse(
        &confidence,
        &mean_p,
        &decoded.slope_risk,
        &decoded.elevation_risk,
    )?;
    let hypotheses = probs
        .into_iter()
        .map(UnitIntervalMap::new)
        .collect::<Result<Vec<_>>>()?
        .try_into()
        .expect("three hypotheses");
    Ok(Inference {
        output: TraversabilityOutput {
            mean_p,
            confidence,
            slope_risk: decoded.slope_risk,
            elevation_risk: decoded.elevation_risk,
            score,
            variance,
        },
        hypotheses,
        depth: decoded.depth,
    })
}

pub fn infer(
    bank: &TokenBank,
    image: &RgbImage,
    params: &UncertaintyParams,
) -> Result<TraversabilityOutput> {
    infer_detailed(bank, image, params).map(|i| i.output)
}
