//! Geometric pseudo labels from a relative depth map.
//!
//! Pixels are lifted to pseudo-3D points `x = (u, v, D(u, v))` with `u` the
//! column index, `v` the row index and `D` relative depth; no camera
//! intrinsics are involved. A ground plane is fitted to the traversable
//! points by SVD, and two risks are read off it:
//!
//! - slope risk `(1 - |n . n_gnd|) * D / median(D)`, clamped to `[0, 1]`;
//! - elevation risk `1 - exp(-beta * max(0, x . n_gnd - b))`.
//!
//! Depth grows away from the camera, so "above the ground" means closer to
//! the camera than the plane. The fitted normal is oriented toward the
//! camera (negative depth component) so that heights are positive there.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::dense_map::{DenseMap, UnitIntervalMap};
use crate::error::{Error, Result};

/// Per-pixel unit normals in `(u, v, depth)` space.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalMap {
    pub nx: DenseMap,
    pub ny: DenseMap,
    pub nz: DenseMap,
}

impl NormalMap {
    pub fn at(&self, row: usize, col: usize) -> [f64; 3] {
        [
            self.nx.get(row, col),
            self.ny.get(row, col),
            self.nz.get(row, col),
        ]
    }

    pub fn dims(&self) -> (usize, usize) {
        self.nx.dims()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroundPlane {
    pub normal: [f64; 3],
    pub offset: f64,
}

impl GroundPlane {
    /// Signed distance of `(u, v, d)` from the plane; positive above ground.
    #[inline]
    pub fn signed_height(&self, u: f64, v: f64, d: f64) -> f64 {
        self.normal[0] * u + self.normal[1] * v + self.normal[2] * d - self.offset
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeometryParams {
    /// Elevation risk sensitivity.
    pub beta: f64,
}

impl Default for GeometryParams {
    fn default() -> Self {
        Self { beta: 3.0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PseudoRiskLabels {
    pub slope: UnitIntervalMap,
    pub elevation: UnitIntervalMap,
    pub beta: f64,
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn ensure_positive_depth(depth: &DenseMap) -> Result<()> {
    if let Some((index, &value)) = depth.values().iter().enumerate().find(|(_, v)| **v <= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "depth must be positive, found {value} at index {index}"
        )));
    }
    Ok(())
}

/// Normals from central differences; border pixels copy the nearest interior normal.
pub fn surface_normals(depth: &DenseMap) -> Result<NormalMap> {
    let (h, w) = depth.dims();
    if h < 3 || w < 3 {
        return Err(Error::InvalidDimensions {
            height: h,
            width: w,
        });
    }
    ensure_positive_depth(depth)?;
    let mut nx = Vec::with_capacity(h * w);
    let mut ny = Vec::with_capacity(h * w);
    let mut nz = Vec::with_capacity(h * w);
    for r in 0..h {
        let ri = r.clamp(1, h - 2);
        for c in 0..w {
            let ci = c.clamp(1, w - 2);
            let du = 0.5 * (depth.get(ri, ci + 1) - depth.get(ri, ci - 1));
            let dv = 0.5 * (depth.get(ri + 1, ci) - depth.get(ri - 1, ci));
            let norm = (du * du + dv * dv + 1.0).sqrt();
            nx.push(-du / norm);
            ny.push(-dv / norm);
            nz.push(1.0 / norm);
        }
    }
    Ok(NormalMap {
        nx: DenseMap::from_vec(h, w, nx)?,
        ny: DenseMap::from_vec(h, w, ny)?,
        nz: DenseMap::from_vec(h, w, nz)?,
    })
}

/// Relative tolerance below which the second singular value counts as zero.
const RANK_TOL: f64 = 1e-9;

/// Least-squares plane through the masked pseudo-3D points.
pub fn fit_ground_plane(depth: &DenseMap, mask: &UnitIntervalMap) -> Result<GroundPlane> {
    depth.ensure_same_dims(mask)?;
    mask.ensure_binary()?;
    let w = depth.width();
    let points: Vec<[f64; 3]> = mask
        .values()
        .iter()
        .enumerate()
        .filter(|(_, &m)| m == 1.0)
        .map(|(i, _)| [(i % w) as f64, (i / w) as f64, depth.values()[i]])
        .collect();
    fit_plane_to_points(&points)
}

/// SVD plane fit with the normal oriented toward the camera.
pub fn fit_plane_to_points(points: &[[f64; 3]]) -> Result<GroundPlane> {
    if points.len() < 3 {
        return Err(Error::TooFewPoints {
            found: points.len(),
        });
    }
    let n = points.len() as f64;
    let mut centroid = [0.0; 3];
    for p in points {
        for k in 0..3 {
            centroid[k] += p[k];
        }
    }
    centroid.iter_mut().for_each(|c| *c /= n);

    let centered = DMatrix::from_fn(points.len(), 3, |i, k| points[i][k] - centroid[k]);
    let svd = centered.svd(false, true);
    let v_t = svd.v_t.expect("requested V^T");
    let sv = [
        svd.singular_values[0],
        svd.singular_values[1],
        svd.singular_values[2],
    ];
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| sv[a].total_cmp(&sv[b]));
    let (smallest, middle, largest) = (order[0], order[1], order[2]);
    if sv[largest] == 0.0 || sv[middle] <= RANK_TOL * sv[largest] {
        return Err(Error::RankDeficient {
            singular_values: sv,
        });
    }
    let row = v_t.row(smallest);
    let mut normal = [row[0], row[1], row[2]];
    let len = dot(normal, normal).sqrt();
    normal.iter_mut().for_each(|c| *c /= len);
    // toward the camera; a plane containing the depth axis keeps +u, then +v
    let flip = if normal[2] != 0.0 {
        normal[2] > 0.0
    } else if normal[0] != 0.0 {
        normal[0] < 0.0
    } else {
        normal[1] < 0.0
    };
    if flip {
        normal.iter_mut().for_each(|c| *c = -*c);
    }
    Ok(GroundPlane {
        normal,
        offset: dot(centroid, normal),
    })
}

pub fn slope_risk(
    normals: &NormalMap,
    plane: &GroundPlane,
    depth: &DenseMap,
) -> Result<UnitIntervalMap> {
    depth.ensure_same_dims(&normals.nx)?;
    let median = depth.median();
    if median <= 0.0 {
        return Err(Error::InvalidParameter(format!(
            "median depth {median} must be positive"
        )));
    }
    let (h, w) = depth.dims();
    let values = (0..h * w)
        .map(|i| {
            let n = [
                normals.nx.values()[i],
                normals.ny.values()[i],
                normals.nz.values()[i],
            ];
            let misalignment = 1.0 - dot(n, plane.normal).abs();
            (misalignment * depth.values()[i] / median).clamp(0.0, 1.0)
        })
        .collect();
    UnitIntervalMap::new(DenseMap::from_vec(h, w, values)?)
}

/// Signed height of every pixel above the plane (no ReLU).
pub fn height_above_plane(depth: &DenseMap, plane: &GroundPlane) -> DenseMap {
    let w = depth.width();
    let values = depth
        .values()
        .iter()
        .enumerate()
        .map(|(i, &d)| plane.signed_height((i % w) as f64, (i / w) as f64, d))
        .collect();
    DenseMap::from_vec(depth.height(), w, values).expect("finite heights")
}

#[inline]
pub fn elevation_risk_from_height(height: f64, beta: f64) -> f64 {
    1.0 - (-beta * height.max(0.0)).exp()
}

pub fn elevation_risk(depth: &DenseMap, plane: &GroundPlane, beta: f64) -> Result<UnitIntervalMap> {
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "beta {beta} must be positive"
        )));
    }
    let heights = height_above_plane(depth, plane);
    UnitIntervalMap::new(heights.map(|h| elevation_risk_from_height(h, beta))?)
}

/// Normals, plane fit on the traversable mask, and both risk maps.
pub fn pseudo_labels(
    depth: &DenseMap,
    traversable: &UnitIntervalMap,
    beta: f64,
) -> Result<(PseudoRiskLabels, GroundPlane)> {
    let normals = surface_normals(depth)?;
    let plane = fit_ground_plane(depth, traversable)?;
    Ok((
        PseudoRiskLabels {
            slope: slope_risk(&normals, &plane, depth)?,
            elevation: elevation_risk(depth, &plane, beta)?,
            beta,
        },
        plane,
    ))
}
