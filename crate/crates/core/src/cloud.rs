//! Point-cloud data model and the shared scale parameters.

use nalgebra::{Point3, Vector3};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::index::SpatialIndex;

/// Values of one per-point attribute channel.
#[derive(Debug, Clone, PartialEq)]
pub enum ChannelData {
    Scalar(Vec<f64>),
    Vector(Vec<Vector3<f64>>),
}

impl ChannelData {
    pub fn len(&self) -> usize {
        match self {
            ChannelData::Scalar(v) => v.len(),
            ChannelData::Vector(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn select(&self, indices: &[usize]) -> ChannelData {
        match self {
            ChannelData::Scalar(v) => ChannelData::Scalar(indices.iter().map(|&i| v[i]).collect()),
            ChannelData::Vector(v) => ChannelData::Vector(indices.iter().map(|&i| v[i]).collect()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Channel {
    pub name: String,
    pub data: ChannelData,
}

/// Ordered set of 3D points with optional named per-point channels.
///
/// Coordinates are always finite and every channel has one value per point;
/// constructors and mutators enforce both.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    points: Vec<Point3<f64>>,
    channels: Vec<Channel>,
}

impl PointCloud {
    pub fn new(points: Vec<Point3<f64>>) -> Result<Self> {
        if let Some(i) = points.iter().position(|p| !p.coords.iter().all(|c| c.is_finite())) {
            return Err(Error::Data(format!("point {i} has a non-finite coordinate")));
        }
        Ok(PointCloud {
            points,
            channels: Vec::new(),
        })
    }

    /// Builds a cloud from points already known to be finite (internal use).
    pub(crate) fn from_trusted(points: Vec<Point3<f64>>) -> Self {
        debug_assert!(points.iter().all(|p| p.coords.iter().all(|c| c.is_finite())));
        PointCloud {
            points,
            channels: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Point3<f64>] {
        &self.points
    }

    pub fn point(&self, i: usize) -> Point3<f64> {
        self.points[i]
    }

    pub fn channels(&self) -> &[Channel] {
        &self.channels
    }

    pub fn channel(&self, name: &str) -> Option<&ChannelData> {
        self.channels.iter().find(|c| c.name == name).map(|c| &c.data)
    }

    pub fn scalar(&self, name: &str) -> Option<&[f64]> {
        match self.channel(name) {
            Some(ChannelData::Scalar(v)) => Some(v),
            _ => None,
        }
    }

    /// Adds or replaces a channel.
    pub fn set_channel(&mut self, name: impl Into<String>, data: ChannelData) -> Result<()> {
        let name = name.into();
        if data.len() != self.points.len() {
            return Err(Error::Data(format!(
                "channel `{name}` has {} values for {} points",
                data.len(),
                self.points.len()
            )));
        }
        if let ChannelData::Scalar(v) = &data {
            if v.iter().any(|x| x.is_nan()) {
                return Err(Error::Data(format!("channel `{name}` contains NaN")));
            }
        }
        match self.channels.iter_mut().find(|c| c.name == name) {
            Some(c) => c.data = data,
            None => self.channels.push(Channel { name, data }),
        }
        Ok(())
    }

    pub fn remove_channel(&mut self, name: &str) -> Option<ChannelData> {
        let pos = self.channels.iter().position(|c| c.name == name)?;
        Some(self.channels.remove(pos).data)
    }

    /// New cloud holding the given points (in the given order) and the
    /// matching channel values.
    pub fn select(&self, indices: &[usize]) -> PointCloud {
        PointCloud {
            points: indices.iter().map(|&i| self.points[i]).collect(),
            channels: self
                .channels
                .iter()
                .map(|c| Channel {
                    name: c.name.clone(),
                    data: c.data.select(indices),
                })
                .collect(),
        }
    }

    pub fn centroid(&self) -> Option<Point3<f64>> {
        centroid_of(&self.points, None)
    }

    /// Axis-aligned bounds `(min, max)`, `None` when empty.
    pub fn bounds(&self) -> Option<(Point3<f64>, Point3<f64>)> {
        let first = *self.points.first()?;
        Some(self.points.iter().fold((first, first), |(lo, hi), p| {
            (lo.inf(p), hi.sup(p))
        }))
    }
}

/// Mean of `points`, or of `points[indices]` when given.
pub fn centroid_of(points: &[Point3<f64>], indices: Option<&[usize]>) -> Option<Point3<f64>> {
    let (sum, n) = match indices {
        Some(idx) => (
            idx.iter().fold(Vector3::zeros(), |a, &i| a + points[i].coords),
            idx.len(),
        ),
        None => (
            points.iter().fold(Vector3::zeros(), |a, p| a + p.coords),
            points.len(),
        ),
    };
    (n > 0).then(|| Point3::from(sum / n as f64))
}

/// Point spacing and the neighbourhood radius derived from it.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ScaleParams {
    pub point_spacing: f64,
    pub support_radius: f64,
}

impl ScaleParams {
    pub fn from_spacing(point_spacing: f64) -> Result<Self> {
        Ok(ScaleParams {
            point_spacing,
            support_radius: support_radius(point_spacing)?,
        })
    }
}

/// Neighbourhood radius for a given point spacing: `ps·(5 − 16·ps)`.
///
/// The quadratic peaks at 0.15625 m, so the formula is only accepted for
/// `0 < ps < 0.15`.
pub fn support_radius(ps: f64) -> Result<f64> {
    if !(ps > 0.0 && ps < 0.15) {
        return Err(Error::arg(format!(
            "point spacing {ps} outside the support-radius domain (0, 0.15) m"
        )));
    }
    Ok(ps * (5.0 - 16.0 * ps))
}

/// Mean nearest-neighbour distance over all points.
pub fn estimate_point_spacing(cloud: &PointCloud, index: &SpatialIndex) -> Result<f64> {
    let n = cloud.len();
    if n < 2 {
        return Err(Error::arg(format!("point spacing needs at least 2 points, got {n}")));
    }
    let total: f64 = cloud
        .points()
        .par_iter()
        .map(|p| index.knn(p, 2).get(1).map_or(0.0, |x| x.1))
        .sum();
    Ok(total / n as f64)
}
