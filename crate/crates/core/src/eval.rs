//! Thresholded binary metrics, dataset aggregation and image corruptions.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dense_map::{DenseMap, UnitIntervalMap};
use crate::error::{Error, Result};
use crate::model::{infer_detailed, Inference, TokenBank};
use crate::raster::RgbImage;
use crate::scenes::Scene;
use crate::uncertainty::UncertaintyParams;

pub const DEFAULT_TAU: f64 = 0.5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl Counts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

impl std::ops::Add for Counts {
    type Output = Counts;

    fn add(self, o: Counts) -> Counts {
        Counts {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
            tn: self.tn + o.tn,
        }
    }
}

/// Set when a ratio's denominator was zero and the ratio was reported as 0.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricFlag {
    ZeroPrecisionDenominator,
    ZeroRecallDenominator,
    ZeroIouDenominator,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub iou: f64,
    pub precision: f64,
    pub recall: f64,
    pub counts: Counts,
    pub tau: f64,
    pub flags: Vec<MetricFlag>,
}

fn ratio(num: u64, den: u64, flag: MetricFlag, flags: &mut Vec<MetricFlag>) -> f64 {
    if den == 0 {
        flags.push(flag);
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl MetricReport {
    pub fn from_counts(counts: Counts, tau: f64) -> Self {
        let mut flags = Vec::new();
        let c = counts;
        let precision = ratio(
            c.tp,
            c.tp + c.fp,
            MetricFlag::ZeroPrecisionDenominator,
            &mut flags,
        );
        let recall = ratio(
            c.tp,
            c.tp + c.fn_,
            MetricFlag::ZeroRecallDenominator,
            &mut flags,
        );
        let iou = ratio(
            c.tp,
            c.tp + c.fp + c.fn_,
            MetricFlag::ZeroIouDenominator,
            &mut flags,
        );
        Self {
            iou,
            precision,
            recall,
            counts,
            tau,
            flags,
        }
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!(
            "tau must lie in (0, 1), got {tau}"
        )))
    }
}

/// Confusion counts with `score >= tau` as the positive prediction.
pub fn confusion_counts(score: &UnitIntervalMap, gt: &UnitIntervalMap, tau: f64) -> Result<Counts> {
    check_tau(tau)?;
    score.ensure_same_dims(gt)?;
    gt.ensure_binary()?;
    let mut c = Counts::default();
    for (&s, &g) in score.values().iter().zip(gt.values()) {
        match (s >= tau, g == 1.0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

pub fn binary_metrics(
    score: &UnitIntervalMap,
    gt: &UnitIntervalMap,
    tau: f64,
) -> Result<MetricReport> {
    Ok(MetricReport::from_counts(
        confusion_counts(score, gt, tau)?,
        tau,
    ))
}

/// Spearman rank correlation, with tied values sharing their average rank.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::InvalidParameter(format!(
            "spearman needs two equal-length samples of at least 2, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let ra = ranks(a);
    let rb = ranks(b);
    let n = a.len() as f64;
    let mean = (n + 1.0) / 2.0;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        sab += (x - mean) * (y - mean);
        saa += (x - mean) * (x - mean);
        sbb += (y - mean) * (y - mean);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::InvalidParameter(
            "spearman of a constant sample".into(),
        ));
    }
    Ok(sab / (saa * sbb).sqrt())
}

fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&i, &j| x[i].total_cmp(&x[j]));
    let mut out = vec![0.0; x.len()];
    let mut start = 0;
    while start < idx.len() {
        let mut end = start + 1;
        while end < idx.len() && x[idx[end]] == x[idx[start]] {
            end += 1;
        }
        let rank = (start + end + 1) as f64 / 2.0;
        for &i in &idx[start..end] {
            out[i] = rank;
        }
        start = end;
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    GaussianNoise,
    GaussianBlur,
    Brightness,
    Contrast,
    FogHaze,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 5] = [
        CorruptionKind::GaussianNoise,
        CorruptionKind::GaussianBlur,
        CorruptionKind::Brightness,
        CorruptionKind::Contrast,
        CorruptionKind::FogHaze,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CorruptionKind::GaussianNoise => "gaussian_noise",
            CorruptionKind::GaussianBlur => "gaussian_blur",
            CorruptionKind::Brightness => "brightness",
            CorruptionKind::Contrast => "contrast",
            CorruptionKind::FogHaze => "fog_haze",
        }
    }

    /// Strength per severity level 1..=5.
    ///
    /// | kind | parameter |
    /// |------|-----------|
    /// | gaussian_noise | noise sigma, fraction of range |
    /// | gaussian_blur | kernel sigma, pixels |
    /// | brightness | additive offset |
    /// | contrast | `1 - c` for contrast factor `c` |
    /// | fog_haze | blend weight toward the haze colour |
    pub fn severity_table(self) -> [f64; 5] {
        match self {
            CorruptionKind::GaussianNoise => [0.04, 0.08, 0.12, 0.18, 0.26],
            CorruptionKind::GaussianBlur => [0.5, 1.0, 1.5, 2.0, 3.0],
            CorruptionKind::Brightness => [0.1, 0.2, 0.3, 0.4, 0.5],
            CorruptionKind::Contrast => [0.25, 0.4, 0.55, 0.7, 0.85],
            CorruptionKind::FogHaze => [0.15, 0.3, 0.45, 0.6, 0.75],
        }
    }
}

impl FromStr for CorruptionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CorruptionKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown corruption kind '{s}'")))
    }
}

impl fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub severity: u8,
}

impl CorruptionSpec {
    pub fn new(kind: CorruptionKind, severity: u8) -> Result<Self> {
        if !(1..=5).contains(&severity) {
            return Err(Error::Config(format!(
                "corruption severity must be 1..=5, got {severity}"
            )));
        }
        Ok(Self { kind, severity })
    }

    pub fn strength(&self) -> f64 {
        self.kind.severity_table()[usize::from(self.severity) - 1]
    }
}

/// Parses `kind:severity`, e.g. `gaussian_noise:5`.
impl FromStr for CorruptionSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (kind, sev) = s
            .split_once(':')
            .ok_or_else(|| Error::Config(format!("corruption '{s}' is not kind:severity")))?;
        let severity = sev
            .parse::<u8>()
            .map_err(|_| Error::Config(format!("corruption severity '{sev}' is not an integer")))?;
        Self::new(kind.parse()?, severity)
    }
}

impl fmt::Display for CorruptionSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.kind, self.severity)
    }
}

const FOG_COLOUR: [f64; 3] = [0.82, 0.83, 0.86];

fn map_planes(image: &RgbImage, mut f: impl FnMut(usize, &DenseMap) -> Vec<f64>) -> RgbImage {
    let (h, w) = image.dims();
    let planes = image.channels();
    let make = |c: usize, f: &mut dyn FnMut(usize, &DenseMap) -> Vec<f64>| {
        let values = f(c, planes[c])
            .into_iter()
            .map(|v| v.clamp(0.0, 1.0))
            .collect();
        DenseMap::from_vec(h, w, values).expect("clamped values are finite")
    };
    let r = make(0, &mut f);
    let g = make(1, &mut f);
    let b = make(2, &mut f);
    RgbImage { r, g, b }
}

fn blur_plane(plane: &DenseMap, sigma: f64) -> Vec<f64> {
    let (h, w) = plane.dims();
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let clampi = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            tmp[r * w + c] = kernel
                .iter()
                .enumerate()
                .map(|(k, kv)| kv * plane.get(r, clampi(c as isize + k as isize - radius, w)))
                .sum::<f64>()
                / norm;
        }
    }
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            out[r * w + c] = kernel
                .iter()
                .enumerate()
                .map(|(k, kv)| kv * tmp[clampi(r as isize + k as isize - radius, h) * w + c])
                .sum::<f64>()
                / norm;
        }
    }
    out
}

/// Applies `kind` at an explicit strength (see [`CorruptionKind::severity_table`]).
/// Strength 0 is the identity for every kind.
pub fn corrupt_with_strength(
    image: &RgbImage,
    kind: CorruptionKind,
    strength: f64,
    seed: u64,
) -> Result<RgbImage> {
    if !(strength.is_finite() && strength >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "corruption strength must be finite and >= 0, got {strength}"
        )));
    }
    if strength == 0.0 {
        return Ok(image.clone());
    }
    Ok(match kind {
        CorruptionKind::GaussianNoise => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let normal = Normal::new(0.0, 1.0).expect("unit normal");
            map_planes(image, |_, p| {
                p.values()
                    .iter()
                    .map(|v| v + strength * normal.sample(&mut rng))
                    .collect()
            })
        }
        CorruptionKind::GaussianBlur => map_planes(image, |_, p| blur_plane(p, strength)),
        CorruptionKind::Brightness => map_planes(image, |_, p| {
            p.values().iter().map(|v| v + strength).collect()
        }),
        CorruptionKind::Contrast => {
            let factor = (1.0 - strength).max(0.0);
            map_planes(image, |_, p| {
                let m = p.mean();
                p.values().iter().map(|v| m + factor * (v - m)).collect()
            })
        }
        CorruptionKind::FogHaze => {
            let t = strength.min(1.0);
            map_planes(image, |c, p| {
                p.values()
                    .iter()
                    .map(|v| (1.0 - t) * v + t * FOG_COLOUR[c])
                    .collect()
            })
        }
    })
}

/// Deterministic per `(image, spec, seed)`; outputs are clamped to `[0, 1]`.
pub fn corrupt(image: &RgbImage, spec: &CorruptionSpec, seed: u64) -> Result<RgbImage> {
    CorruptionSpec::new(spec.kind, spec.severity)?;
    corrupt_with_strength(image, spec.kind, spec.strength(), seed)
}

/// Which map is thresholded.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreSource {
    #[default]
    Fused,
    MeanP,
    Conservative,
    Neutral,
    Aggressive,
}

impl ScoreSource {
    pub fn select<'a>(&self, inference: &'a Inference) -> &'a UnitIntervalMap {
        match self {
            ScoreSource::Fused => &inference.output.score,
            ScoreSource::MeanP => &inference.output.mean_p,
            ScoreSource::Conservative => &inference.hypotheses[0],
            ScoreSource::Neutral => &inference.hypotheses[1],
            ScoreSource::Aggressive => &inference.hypotheses[2],
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Pool confusion counts over scenes, then take ratios.
    #[default]
    Micro,
    /// Average per-scene ratios.
    Macro,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalOptions {
    pub tau: f64,
    pub aggregation: Aggregation,
    pub source: ScoreSource,
    pub corruption: Option<CorruptionSpec>,
    pub corruption_seed: u64,
    pub uncertainty: UncertaintyParams,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            tau: DEFAULT_TAU,
            aggregation: Aggregation::Micro,
            source: ScoreSource::Fused,
            corruption: None,
            corruption_seed: 0,
            uncertainty: UncertaintyParams::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetReport {
    pub overall: MetricReport,
    pub aggregation: Aggregation,
    pub source: ScoreSource,
    pub corruption: Option<CorruptionSpec>,
    pub per_scene: Vec<MetricReport>,
}

/// Combines per-scene reports in order.
pub fn aggregate(
    per_scene: &[MetricReport],
    tau: f64,
    aggregation: Aggregation,
) -> Result<MetricReport> {
    if per_scene.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let pooled = per_scene
        .iter()
        .fold(Counts::default(), |acc, r| acc + r.counts);
    let mut report = MetricReport::from_counts(pooled, tau);
    if aggregation == Aggregation::Macro {
        let n = per_scene.len() as f64;
        report.iou = per_scene.iter().map(|r| r.iou).sum::<f64>() / n;
        report.precision = per_scene.iter().map(|r| r.precision).sum::<f64>() / n;
        report.recall = per_scene.iter().map(|r| r.recall).sum::<f64>() / n;
        let mut flags: Vec<MetricFlag> = per_scene.iter().flat_map(|r| r.flags.clone()).collect();
        flags.sort();
        flags.dedup();
        report.flags = flags;
    }
    Ok(report)
}

/// Runs inference on each scene (after the optional corruption) and scores
/// the selected map against the scene label.
pub fn evaluate_dataset(
    bank: &TokenBank,
    scenes: &[Scene],
    options: &EvalOptions,
) -> Result<DatasetReport> {
    check_tau(options.tau)?;
    if scenes.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let per_scene: Vec<MetricReport> = scenes
        .par_iter()
        .enumerate()
        .map(|(i, scene)| {
            let image = match &options.corruption {
                Some(spec) => corrupt(
                    &scene.rgb,
                    spec,
                    crate::scenes::scene_seed(options.corruption_seed, i),
                )?,
                None => scene.rgb.clone(),
            };
            let inference = infer_detailed(bank, &image, &options.uncertainty)?;
            binary_metrics(options.source.select(&inference), &scene.label, options.tau)
        })
        .collect::<Result<_>>()?;
    Ok(DatasetReport {
        overall: aggregate(&per_scene, options.tau, options.aggregation)?,
        aggregation: options.aggregation,
        source: options.source,
        corruption: options.corruption,
        per_scene,
    })
}

/// Aligned plain-text rendering of a dataset report.
pub fn render_text(report: &DatasetReport) -> String {
    let mut out = String::new();
    let corruption = report
        .corruption
        .map_or_else(|| "none".to_string(), |c| c.to_string());
    let _ = writeln!(
        out,
        "source: {:?}  aggregation: {:?}  corruption: {}  tau: {}",
        report.source, report.aggregation, corruption, report.overall.tau
    );
    let _ = writeln!(
        out,
        "{:<10} {:>8} {:>10} {:>8} {:>8} {:>8} {:>8} {:>8}",
        "scene", "iou", "precision", "recall", "tp", "fp", "fn", "tn"
    );
    let row = |out: &mut String, name: &str, r: &MetricReport| {
        let c = r.counts;
        let _ = writeln!(
            out,
            "{:<10} {:>8.4} {:>10.4} {:>8.4} {:>8} {:>8} {:>8} {:>8}",
            name, r.iou, r.precision, r.recall, c.tp, c.fp, c.fn_, c.tn
        );
    };
    for (i, r) in report.per_scene.iter().enumerate() {
        row(&mut out, &format!("{i:04}"), r);
    }
    row(&mut out, "overall", &report.overall);
    if !report.overall.flags.is_empty() {
        let _ = writeln!(out, "flags: {:?}", report.overall.flags);
    }
    out
}
