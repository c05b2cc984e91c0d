//! Dip angle / dip direction conversion, the polar (equal-angle) projection
//! and hemisphere alignment of normal sets.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Orientation of a plane (from its normal) or a line (from its direction).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrientationPair {
    /// Dip angle in degrees, `[0, 90]`.
    pub dip: f64,
    /// Dip direction in degrees, `[0, 360)`.
    pub dip_direction: f64,
    pub dpx: f64,
    pub dpy: f64,
}

/// Converts a unit vector to dip angle / dip direction and projects it.
///
/// `DA = acos(z)`, `DD = atan2(x, y)`; a downward vector is replaced by its
/// antipode so the result always describes the upper-normal hemisphere.
pub fn orientation_of(n: &Vector3<f64>) -> Result<OrientationPair> {
    let norm = n.norm();
    if !(norm > 1e-12) || !norm.is_finite() {
        return Err(Error::arg("orientation of a zero-length or non-finite vector"));
    }
    let n = n / norm;
    let mut dip = n.z.clamp(-1.0, 1.0).acos().to_degrees();
    let mut dd = n.x.atan2(n.y).to_degrees();
    if dip > 90.0 {
        dip = 180.0 - dip;
        dd += 180.0;
    }
    let dd = wrap_degrees(dd);
    let (x, y) = project(dip, dd);
    Ok(OrientationPair {
        dip,
        dip_direction: dd,
        dpx: x,
        dpy: y,
    })
}

/// Batch form of [`orientation_of`].
pub fn orientation_transform(normals: &[Vector3<f64>]) -> Result<Vec<OrientationPair>> {
    normals.iter().map(orientation_of).collect()
}

/// `[0, 360)` representative of an angle in degrees.
pub fn wrap_degrees(a: f64) -> f64 {
    let w = a.rem_euclid(360.0);
    if w >= 360.0 {
        0.0
    } else {
        w
    }
}

/// Equal-angle projection: `R = sin DA / (1 + cos DA) = tan(DA/2)`,
/// `(x, y) = R·(sin DD, cos DD)`.
pub fn project(dip: f64, dip_direction: f64) -> (f64, f64) {
    let (da, dd) = (dip.to_radians(), dip_direction.to_radians());
    let r = da.sin() / (1.0 + da.cos());
    (r * dd.sin(), r * dd.cos())
}

/// Inverse of [`project`] for points in the unit disc.
pub fn unproject(x: f64, y: f64) -> (f64, f64) {
    let r = (x * x + y * y).sqrt();
    let dip = (2.0 * r.atan()).to_degrees();
    let dd = if r == 0.0 { 0.0 } else { wrap_degrees(x.atan2(y).to_degrees()) };
    (dip, dd)
}

/// Unit vector with the given dip angle and dip direction (upper hemisphere).
pub fn vector_from(dip: f64, dip_direction: f64) -> Vector3<f64> {
    let (da, dd) = (dip.to_radians(), dip_direction.to_radians());
    Vector3::new(da.sin() * dd.sin(), da.sin() * dd.cos(), da.cos())
}

/// Acute angle in degrees between two lines (sign of either vector ignored).
pub fn line_angle(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    let c = (a.dot(b) / (a.norm() * b.norm())).abs().min(1.0);
    c.acos().to_degrees()
}

/// Weighted mean direction of a set of axial vectors.
///
/// Each vector is flipped into the half-space of a reference before
/// averaging. The first reference is the coordinate axis with the largest
/// summed |component|; a second pass realigns against the first mean. Returns
/// the (non-normalized) weighted mean divided by the total weight, so its norm
/// measures coherence (1 for identical axes).
pub fn aligned_mean(vectors: &[Vector3<f64>], weights: Option<&[f64]>) -> Option<Vector3<f64>> {
    if vectors.is_empty() {
        return None;
    }
    let w = |i: usize| weights.map_or(1.0, |w| w[i]);
    let total: f64 = (0..vectors.len()).map(w).sum();
    if !(total > 0.0) {
        return None;
    }
    let mut abs_sum = Vector3::zeros();
    for (i, v) in vectors.iter().enumerate() {
        abs_sum += v.abs() * w(i);
    }
    let axis = abs_sum.imax();
    let mut reference = Vector3::zeros();
    reference[axis] = 1.0;
    let mut mean = Vector3::zeros();
    for _ in 0..2 {
        mean = Vector3::zeros();
        for (i, v) in vectors.iter().enumerate() {
            let s = if v.dot(&reference) < 0.0 { -1.0 } else { 1.0 };
            mean += v * (s * w(i));
        }
        mean /= total;
        if mean.norm() == 0.0 {
            return Some(mean);
        }
        reference = mean;
    }
    Some(mean)
}
