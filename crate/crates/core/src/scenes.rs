//! Procedural terrain scenes with closed-form ground truth.
//!
//! A scene is a heightfield `h = terrain + obstacles` over the pixel grid.
//! Terrain is a seeded sum of cosines scaled by `amplitude`; obstacles are
//! compact bumps `H (1 - r^2/R^2)^2`. Both have analytic gradients, so the
//! slope oracle is exact. Depth is seen from a fixed oblique viewpoint:
//! `D = base + tilt (H - 1 - v) - h`, so elevated points are closer.
//!
//! Material is a trail (traversable ground) through vegetation. The
//! material boundary is a signed horizontal distance `d` to the trail edge,
//! and colour blends across an ambiguity band of `band_width` pixels around
//! `d = 0`. Annotators place the label boundary at `d + offset = 0` with a
//! smooth seeded `offset` bounded by half the band, so disagreement can only
//! occur inside the band.
//!
//! A pixel is labelled traversable when it is annotated as trail, its slope
//! magnitude is below `slope_threshold` and its obstacle height is below
//! `elevation_threshold`.
//!
//! Rendering is a stylised overhead-lit Lambertian model (`n_z^k` shading)
//! with exponential haze in depth and per-pixel texture noise, quantised to
//! 8 bits. Depth and oracle maps are rounded to `f32`, so a scene survives
//! a round trip through disk unchanged.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dense_map::{DenseMap, UnitIntervalMap};
use crate::error::{Error, Result};
use crate::raster::{self, RgbImage};

pub const MIN_SCENE_SIZE: usize = 16;

const GROUND_ALBEDO: [f64; 3] = [0.66, 0.50, 0.34];
const VEGETATION_ALBEDO: [f64; 3] = [0.24, 0.46, 0.20];
const HAZE_COLOUR: [f64; 3] = [0.78, 0.80, 0.84];
const TERRAIN_COMPONENTS: usize = 6;
const OFFSET_COMPONENTS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Easy,
    AmbiguousBoundary,
    SlopeHazard,
    ElevatedObstacle,
    Mixed,
}

impl Preset {
    pub const ALL: [Preset; 5] = [
        Preset::Easy,
        Preset::AmbiguousBoundary,
        Preset::SlopeHazard,
        Preset::ElevatedObstacle,
        Preset::Mixed,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Easy => "easy",
            Preset::AmbiguousBoundary => "ambiguous_boundary",
            Preset::SlopeHazard => "slope_hazard",
            Preset::ElevatedObstacle => "elevated_obstacle",
            Preset::Mixed => "mixed",
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown preset '{s}'")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneParams {
    pub rng_seed: u64,
    pub height: usize,
    pub width: usize,
    pub preset: Preset,
    /// Peak terrain height in depth units.
    pub amplitude: f64,
    /// Dominant terrain wavelength in pixels.
    pub smoothness: f64,
    /// Width of the ambiguity band in pixels.
    pub band_width: f64,
    pub obstacle_count: usize,
    pub obstacle_height: [f64; 2],
    pub obstacle_radius: [f64; 2],
    /// Standard deviation of per-pixel colour noise on ground; vegetation gets twice this.
    pub texture_noise: f64,
    pub slope_threshold: f64,
    pub elevation_threshold: f64,
    /// Exponent `k` of the `n_z^k` shading term.
    pub shading_exponent: f64,
    /// Haze density per depth unit.
    pub haze: f64,
}

impl SceneParams {
    /// Defaults for `preset` at the given size.
    pub fn preset(preset: Preset, rng_seed: u64, height: usize, width: usize) -> Self {
        let base = Self {
            rng_seed,
            height,
            width,
            preset,
            amplitude: 0.0,
            smoothness: 24.0,
            band_width: 0.0,
            obstacle_count: 0,
            obstacle_height: [0.6, 1.4],
            obstacle_radius: [4.0, 8.0],
            texture_noise: 0.01,
            slope_threshold: 0.5,
            elevation_threshold: 0.1,
            shading_exponent: 3.0,
            haze: 0.2,
        };
        match preset {
            Preset::Easy => base,
            Preset::AmbiguousBoundary => Self {
                amplitude: 0.3,
                band_width: 10.0,
                ..base
            },
            Preset::SlopeHazard => Self {
                amplitude: 3.0,
                band_width: 2.0,
                ..base
            },
            Preset::ElevatedObstacle => Self {
                obstacle_count: 4,
                band_width: 2.0,
                ..base
            },
            Preset::Mixed => Self {
                amplitude: 0.05,
                band_width: 2.0,
                obstacle_count: 5,
                ..base
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        if self.height < MIN_SCENE_SIZE || self.width < MIN_SCENE_SIZE {
            return bad(format!(
                "scene must be at least {MIN_SCENE_SIZE}x{MIN_SCENE_SIZE}, got {}x{}",
                self.height, self.width
            ));
        }
        let non_negative = [
            ("amplitude", self.amplitude),
            ("band_width", self.band_width),
            ("texture_noise", self.texture_noise),
            ("shading_exponent", self.shading_exponent),
            ("haze", self.haze),
            ("obstacle_height.min", self.obstacle_height[0]),
            ("slope_threshold", self.slope_threshold),
            ("elevation_threshold", self.elevation_threshold),
        ];
        for (name, v) in non_negative {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        if !(self.smoothness.is_finite() && self.smoothness > 0.0) {
            return bad(format!("smoothness must be > 0, got {}", self.smoothness));
        }
        if !(self.obstacle_height[1].is_finite()
            && self.obstacle_height[1] >= self.obstacle_height[0])
        {
            return bad(format!(
                "invalid obstacle_height range {:?}",
                self.obstacle_height
            ));
        }
        let [r0, r1] = self.obstacle_radius;
        if !(r0.is_finite() && r0 > 0.0 && r1.is_finite() && r1 >= r0) {
            return bad(format!(
                "invalid obstacle_radius range {:?}",
                self.obstacle_radius
            ));
        }
        Ok(())
    }
}

/// Analytic ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneOracle {
    pub heightfield: DenseMap,
    /// `|grad h|` of the full heightfield.
    pub slope: DenseMap,
    /// Obstacle height above the terrain surface.
    pub height_above_ground: DenseMap,
    pub band: UnitIntervalMap,
    /// Signed horizontal distance to the trail edge, positive on the trail.
    pub boundary_distance: DenseMap,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub params: SceneParams,
    pub rgb: RgbImage,
    pub depth: DenseMap,
    pub label: UnitIntervalMap,
    pub oracle: SceneOracle,
}

impl Scene {
    pub fn dims(&self) -> (usize, usize) {
        self.depth.dims()
    }
}

struct Wave {
    weight: f64,
    ku: f64,
    kv: f64,
    phase: f64,
}

impl Wave {
    fn value(&self, u: f64, v: f64) -> f64 {
        self.weight * (self.ku * u + self.kv * v + self.phase).cos()
    }

    fn gradient(&self, u: f64, v: f64) -> (f64, f64) {
        let s = -self.weight * (self.ku * u + self.kv * v + self.phase).sin();
        (s * self.ku, s * self.kv)
    }
}

/// Random plane waves with weights summing to 1, so `|sum| <= 1`.
fn random_waves(rng: &mut ChaCha8Rng, count: usize, wavelength: f64) -> Vec<Wave> {
    let mut waves: Vec<Wave> = (0..count)
        .map(|_| {
            let theta = rng.random_range(0.0..std::f64::consts::TAU);
            let k = std::f64::consts::TAU / (wavelength * rng.random_range(0.7..1.4));
            Wave {
                weight: rng.random_range(0.5..1.0),
                ku: k * theta.cos(),
                kv: k * theta.sin(),
                phase: rng.random_range(0.0..std::f64::consts::TAU),
            }
        })
        .collect();
    let total: f64 = waves.iter().map(|w| w.weight).sum();
    waves.iter_mut().for_each(|w| w.weight /= total);
    waves
}

struct Obstacle {
    u: f64,
    v: f64,
    radius: f64,
    height: f64,
}

impl Obstacle {
    fn value_and_gradient(&self, u: f64, v: f64) -> (f64, f64, f64) {
        let (du, dv) = (u - self.u, v - self.v);
        let q = 1.0 - (du * du + dv * dv) / (self.radius * self.radius);
        if q <= 0.0 {
            return (0.0, 0.0, 0.0);
        }
        let g = -4.0 * self.height * q / (self.radius * self.radius);
        (self.height * q * q, g * du, g * dv)
    }
}

/// Trail centre line and half width, both per row.
struct Trail {
    centre: f64,
    swing: f64,
    period: f64,
    phase: f64,
    half_width: f64,
}

impl Trail {
    fn centre_at(&self, v: f64) -> f64 {
        self.centre + self.swing * (std::f64::consts::TAU * v / self.period + self.phase).sin()
    }

    fn signed_distance(&self, u: f64, v: f64) -> f64 {
        self.half_width - (u - self.centre_at(v)).abs()
    }
}

fn smoothstep(x: f64) -> f64 {
    let x = x.clamp(0.0, 1.0);
    x * x * (3.0 - 2.0 * x)
}

/// Label rule shared by generation and relabelling.
fn annotated(distance: f64, offset: f64, band: f64) -> bool {
    if distance.abs() >= 0.5 * band {
        distance > 0.0
    } else {
        distance + offset > 0.0
    }
}

/// Smooth offset field in `[-band/2, band/2]`.
fn offset_field(rng: &mut ChaCha8Rng, params: &SceneParams) -> Vec<f64> {
    let (h, w) = (params.height, params.width);
    let waves = random_waves(rng, OFFSET_COMPONENTS, 0.5 * h.max(w) as f64);
    let mut out = Vec::with_capacity(h * w);
    for row in 0..h {
        for col in 0..w {
            let s: f64 = waves
                .iter()
                .map(|wv| wv.value(col as f64, row as f64))
                .sum();
            out.push(0.5 * params.band_width * s);
        }
    }
    out
}

fn geometry_ok(params: &SceneParams, slope: f64, obstacle: f64) -> bool {
    slope < params.slope_threshold && obstacle < params.elevation_threshold
}

pub fn generate_scene(params: &SceneParams) -> Result<Scene> {
    params.validate()?;
    let (h, w) = (params.height, params.width);
    let (hf, wf) = (h as f64, w as f64);
    let mut rng = ChaCha8Rng::seed_from_u64(params.rng_seed);

    let terrain = random_waves(&mut rng, TERRAIN_COMPONENTS, params.smoothness);
    let trail = Trail {
        centre: wf * rng.random_range(0.42..0.58),
        swing: wf * rng.random_range(0.04..0.12),
        period: hf * rng.random_range(0.8..1.6),
        phase: rng.random_range(0.0..std::f64::consts::TAU),
        half_width: wf * rng.random_range(0.2..0.28),
    };
    let obstacles: Vec<Obstacle> = (0..params.obstacle_count)
        .map(|_| {
            let v = rng.random_range(0.1 * hf..0.9 * hf);
            let u = trail.centre_at(v) + trail.half_width * rng.random_range(-0.8..0.8);
            Obstacle {
                u,
                v,
                radius: rng.random_range(params.obstacle_radius[0]..=params.obstacle_radius[1]),
                height: rng.random_range(params.obstacle_height[0]..=params.obstacle_height[1]),
            }
        })
        .collect();
    let offsets = offset_field(&mut rng, params);
    let tilt = rng.random_range(0.01..0.03);
    let noise = Normal::new(0.0, 1.0).expect("unit normal");

    let n = h * w;
    let mut height = Vec::with_capacity(n);
    let mut slope = Vec::with_capacity(n);
    let mut above = Vec::with_capacity(n);
    let mut distance = Vec::with_capacity(n);
    let mut band = Vec::with_capacity(n);
    let mut label = Vec::with_capacity(n);
    let mut nz = Vec::with_capacity(n);
    for row in 0..h {
        for col in 0..w {
            let (u, v) = (col as f64, row as f64);
            let mut z = 0.0;
            let (mut gu, mut gv) = (0.0, 0.0);
            for wave in &terrain {
                z += params.amplitude * wave.value(u, v);
                let (a, b) = wave.gradient(u, v);
                gu += params.amplitude * a;
                gv += params.amplitude * b;
            }
            let mut bump = 0.0;
            for o in &obstacles {
                let (b, a, c) = o.value_and_gradient(u, v);
                bump += b;
                gu += a;
                gv += c;
            }
            let g = (gu * gu + gv * gv).sqrt();
            let d = match params.preset {
                Preset::Easy => {
                    let margin = 0.1 * hf.min(wf);
                    u.min(v).min(wf - 1.0 - u).min(hf - 1.0 - v) + 0.5 - margin
                }
                _ => trail.signed_distance(u, v),
            };
            let i = row * w + col;
            height.push(z + bump);
            slope.push(g);
            above.push(bump);
            distance.push(d);
            band.push(d.abs() < 0.5 * params.band_width);
            label.push(annotated(d, offsets[i], params.band_width) && geometry_ok(params, g, bump));
            nz.push(1.0 / (1.0 + g * g).sqrt());
        }
    }

    let max_height = height.iter().cloned().fold(0.0, f64::max);
    let depth_base = 3.0 + max_height;
    let depth: Vec<f64> = height
        .iter()
        .enumerate()
        .map(|(i, z)| depth_base + tilt * (hf - 1.0 - (i / w) as f64) - z)
        .collect();

    let mut planes = [
        Vec::with_capacity(n),
        Vec::with_capacity(n),
        Vec::with_capacity(n),
    ];
    for i in 0..n {
        let m = if params.band_width > 0.0 {
            smoothstep(distance[i] / params.band_width + 0.5)
        } else if distance[i] > 0.0 {
            1.0
        } else {
            0.0
        };
        let shade = 0.15 + 0.85 * nz[i].powf(params.shading_exponent);
        let fog = 1.0 - (-params.haze * depth[i]).exp();
        let sigma = params.texture_noise * (2.0 - m);
        for (c, plane) in planes.iter_mut().enumerate() {
            let albedo = m * GROUND_ALBEDO[c] + (1.0 - m) * VEGETATION_ALBEDO[c];
            let lit = (1.0 - fog) * albedo * shade + fog * HAZE_COLOUR[c];
            plane.push(lit + sigma * noise.sample(&mut rng));
        }
    }
    let [r, g, b] =
        planes.map(|p| DenseMap::from_vec(h, w, p).map(|m| m.clamp_to_unit().into_map()));
    let rgb = RgbImage::new(r?, g?, b?)?.quantize();

    let map = |v: Vec<f64>| DenseMap::from_vec(h, w, v).map(|m| m.round_to_f32());
    Ok(Scene {
        params: *params,
        rgb,
        depth: map(depth)?,
        label: UnitIntervalMap::from_mask(h, w, &label)?,
        oracle: SceneOracle {
            heightfield: map(height)?,
            slope: map(slope)?,
            height_above_ground: map(above)?,
            band: UnitIntervalMap::from_mask(h, w, &band)?,
            boundary_distance: map(distance)?,
        },
    })
}

/// An alternative annotation: identical outside the ambiguity band, with the
/// boundary re-drawn from a fresh offset field inside it.
pub fn annotator_relabel(scene: &Scene, seed: u64) -> UnitIntervalMap {
    let params = &scene.params;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let offsets = offset_field(&mut rng, params);
    let o = &scene.oracle;
    let values = (0..scene.label.len())
        .map(|i| {
            if o.band.values()[i] == 0.0 {
                return scene.label.values()[i];
            }
            let keep = annotated(
                o.boundary_distance.values()[i],
                offsets[i],
                params.band_width,
            ) && geometry_ok(
                params,
                o.slope.values()[i],
                o.height_above_ground.values()[i],
            );
            if keep {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    let (h, w) = scene.dims();
    UnitIntervalMap::new(DenseMap::from_vec(h, w, values).expect("binary values"))
        .expect("binary values")
}

/// Seed of scene `index` in a dataset drawn from `base_seed`.
pub fn scene_seed(base_seed: u64, index: usize) -> u64 {
    base_seed ^ (index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// `count` scenes of one preset, generated in parallel.
pub fn generate_dataset(
    preset: Preset,
    base_seed: u64,
    count: usize,
    height: usize,
    width: usize,
) -> Result<Vec<Scene>> {
    let params: Vec<SceneParams> = (0..count)
        .map(|i| SceneParams::preset(preset, scene_seed(base_seed, i), height, width))
        .collect();
    generate_scenes(&params)
}

/// One scene per parameter set, generated in parallel, in input order.
pub fn generate_scenes(params: &[SceneParams]) -> Result<Vec<Scene>> {
    use rayon::prelude::*;
    params.par_iter().map(generate_scene).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub dir: String,
    pub params: SceneParams,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub scenes: Vec<ManifestEntry>,
}

const ORACLE_FILES: [&str; 5] = [
    "oracle_heightfield.dmap",
    "oracle_slope.dmap",
    "oracle_height_above_ground.dmap",
    "oracle_band.dmap",
    "oracle_boundary_distance.dmap",
];

fn scene_dir_name(index: usize) -> String {
    format!("scene_{index:04}")
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

pub fn save_scene(scene: &Scene, dir: &Path) -> Result<()> {
    create_dir(dir)?;
    raster::save_ppm(&scene.rgb, dir.join("rgb.ppm"))?;
    raster::save_dmap(&scene.depth, dir.join("depth.dmap"))?;
    raster::save_dmap(scene.label.as_map(), dir.join("label.dmap"))?;
    let o = &scene.oracle;
    let maps = [
        &o.heightfield,
        &o.slope,
        &o.height_above_ground,
        o.band.as_map(),
        &o.boundary_distance,
    ];
    for (name, map) in ORACLE_FILES.iter().zip(maps) {
        raster::save_dmap(map, dir.join(name))?;
    }
    Ok(())
}

pub fn load_scene(dir: &Path, params: SceneParams) -> Result<Scene> {
    let unit = |name: &str| UnitIntervalMap::new(raster::load_dmap(dir.join(name))?);
    let [heightfield, slope, height_above_ground, band, boundary_distance] =
        ORACLE_FILES.map(|name| raster::load_dmap(dir.join(name)));
    let label = unit("label.dmap")?;
    label.ensure_binary()?;
    let scene = Scene {
        params,
        rgb: raster::load_ppm(dir.join("rgb.ppm"))?,
        depth: raster::load_dmap(dir.join("depth.dmap"))?,
        label,
        oracle: SceneOracle {
            heightfield: heightfield?,
            slope: slope?,
            height_above_ground: height_above_ground?,
            band: UnitIntervalMap::new(band?)?,
            boundary_distance: boundary_distance?,
        },
    };
    let dims = scene.depth.dims();
    let maps = [
        scene.rgb.channels()[0],
        scene.label.as_map(),
        &scene.oracle.heightfield,
        &scene.oracle.slope,
        &scene.oracle.height_above_ground,
        scene.oracle.band.as_map(),
        &scene.oracle.boundary_distance,
    ];
    for m in maps {
        if m.dims() != dims {
            return Err(Error::DimensionMismatch {
                expected: dims,
                found: m.dims(),
            });
        }
    }
    if let Some((index, &value)) = scene
        .depth
        .values()
        .iter()
        .enumerate()
        .find(|(_, d)| **d <= 0.0)
    {
        return Err(Error::InvalidParameter(format!(
            "non-positive depth {value} at index {index} in {}",
            dir.display()
        )));
    }
    Ok(scene)
}

/// Writes `scene_NNNN/` directories and `manifest.json` under `dir`.
pub fn save_dataset(scenes: &[Scene], dir: &Path) -> Result<()> {
    create_dir(dir)?;
    let mut entries = Vec::with_capacity(scenes.len());
    for (i, scene) in scenes.iter().enumerate() {
        let name = scene_dir_name(i);
        save_scene(scene, &dir.join(&name))?;
        entries.push(ManifestEntry {
            dir: name,
            params: scene.params,
        });
    }
    let manifest = Manifest { scenes: entries };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serialises");
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

pub fn load_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::MalformedHeader(format!("{}: {e}", path.display())))
}

pub fn load_dataset(dir: &Path) -> Result<Vec<Scene>> {
    let manifest = load_manifest(dir)?;
    if manifest.scenes.is_empty() {
        return Err(Error::EmptyDataset);
    }
    manifest
        .scenes
        .iter()
        .map(|e| load_scene(&dir.join(PathBuf::from(&e.dir)), e.params))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scene(preset: Preset, seed: u64) -> Scene {
        generate_scene(&SceneParams::preset(preset, seed, 32, 40)).unwrap()
    }

    #[test]
    fn preset_names_round_trip() {
        for p in Preset::ALL {
            assert_eq!(p.name().parse::<Preset>().unwrap(), p);
            let json = serde_json::to_string(&p).unwrap();
            assert_eq!(json, format!("\"{}\"", p.name()));
        }
        let err = "rocky".parse::<Preset>().unwrap_err();
        assert!(err.to_string().contains("rocky"));
    }

    #[test]
    fn invalid_params_rejected() {
        let ok = SceneParams::preset(Preset::Mixed, 0, 32, 32);
        assert!(generate_scene(&SceneParams { height: 15, ..ok }).is_err());
        assert!(generate_scene(&SceneParams {
            band_width: -1.0,
            ..ok
        })
        .is_err());
        assert!(generate_scene(&SceneParams {
            smoothness: 0.0,
            ..ok
        })
        .is_err());
        assert!(generate_scene(&SceneParams {
            obstacle_radius: [3.0, 2.0],
            ..ok
        })
        .is_err());
    }

    #[test]
    fn same_seed_same_scene() {
        for p in Preset::ALL {
            assert_eq!(scene(p, 4), scene(p, 4));
        }
        assert_ne!(scene(Preset::Mixed, 4), scene(Preset::Mixed, 5));
    }

    #[test]
    fn easy_scene_is_flat_with_a_border() {
        let s = scene(Preset::Easy, 1);
        assert!(s.oracle.slope.values().iter().all(|&g| g == 0.0));
        assert!(s
            .oracle
            .height_above_ground
            .values()
            .iter()
            .all(|&g| g == 0.0));
        let (h, w) = s.dims();
        for row in 0..h {
            for col in 0..w {
                let border = row.min(col).min(h - 1 - row).min(w - 1 - col);
                let expected = if border >= 3 { 1.0 } else { 0.0 };
                assert_eq!(s.label.get(row, col), expected, "({row}, {col})");
            }
        }
    }

    #[test]
    fn invariants_hold_for_every_preset() {
        for p in Preset::ALL {
            for seed in 0..3 {
                let s = scene(p, seed);
                assert!(s.depth.values().iter().all(|&d| d > 0.0));
                s.label.ensure_binary().unwrap();
                s.oracle.band.ensure_binary().unwrap();
                assert_eq!(s.oracle.slope.dims(), s.rgb.dims());
                assert_eq!(s.oracle.heightfield.dims(), s.rgb.dims());
            }
        }
    }

    #[test]
    fn doubling_amplitude_doubles_slope() {
        let base = SceneParams::preset(Preset::SlopeHazard, 9, 32, 32);
        let a = generate_scene(&base).unwrap();
        let b = generate_scene(&SceneParams {
            amplitude: 2.0 * base.amplitude,
            ..base
        })
        .unwrap();
        for (x, y) in a.oracle.slope.values().iter().zip(b.oracle.slope.values()) {
            assert_eq!(2.0 * x, *y);
        }
    }

    #[test]
    fn relabel_only_changes_band_pixels() {
        let s = scene(Preset::AmbiguousBoundary, 3);
        let mut differs = false;
        for seed in 0..20 {
            let r = annotator_relabel(&s, seed);
            r.ensure_binary().unwrap();
            for i in 0..r.len() {
                if r.values()[i] != s.label.values()[i] {
                    assert_eq!(s.oracle.band.values()[i], 1.0);
                    differs = true;
                }
            }
        }
        assert!(differs);
    }

    #[test]
    fn zero_band_relabel_is_identity() {
        let p = SceneParams {
            band_width: 0.0,
            ..SceneParams::preset(Preset::AmbiguousBoundary, 2, 32, 32)
        };
        let s = generate_scene(&p).unwrap();
        assert!(s.oracle.band.values().iter().all(|&b| b == 0.0));
        for seed in 0..5 {
            assert_eq!(annotator_relabel(&s, seed), s.label);
        }
    }

    #[test]
    fn dataset_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let scenes = generate_dataset(Preset::Mixed, 7, 3, 24, 20).unwrap();
        save_dataset(&scenes, dir.path()).unwrap();
        assert_eq!(load_dataset(dir.path()).unwrap(), scenes);
        let manifest = load_manifest(dir.path()).unwrap();
        assert_eq!(manifest.scenes[2].dir, "scene_0002");
    }
}
