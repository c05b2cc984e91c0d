//! Discontinuity sets (orientation clusters) and per-plane fitting.

use nalgebra::{Point3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cloud::{centroid_of, PointCloud};
use crate::cluster::{euclidean_components, hdbscan, HdbscanParams};
use crate::descriptors::{covariance, sorted_eigen, DescriptorSet};
use crate::error::{Error, Result};
use crate::orientation::{aligned_mean, orientation_of};

/// Reference scan size the default `min_cluster_size` was chosen for.
pub const REFERENCE_CLOUD_SIZE: usize = 700_000;
pub const REFERENCE_MIN_CLUSTER_SIZE: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StructureParams {
    pub planarity_threshold: f64,
    pub min_cluster_size: usize,
    pub min_samples: usize,
    /// Planes need strictly more members than this.
    pub min_plane_points: usize,
    /// Connectivity distance for splitting sets into planes; `None` uses the
    /// support radius.
    pub component_cell: Option<f64>,
    /// Replace `min_cluster_size` by the same fraction of the cloud size as
    /// 10000 is of 700k points.
    pub scale_min_cluster_size: bool,
}

impl Default for StructureParams {
    fn default() -> Self {
        StructureParams {
            planarity_threshold: 0.8,
            min_cluster_size: REFERENCE_MIN_CLUSTER_SIZE,
            min_samples: 100,
            min_plane_points: 100,
            component_cell: None,
            scale_min_cluster_size: false,
        }
    }
}

/// `ceil(n · 10000 / 700000)`, at least 2.
pub fn scaled_min_cluster_size(n: usize) -> usize {
    ((n * REFERENCE_MIN_CLUSTER_SIZE).div_ceil(REFERENCE_CLOUD_SIZE)).max(2)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscontinuitySet {
    pub set_id: usize,
    pub members: Vec<usize>,
    pub mean_normal: Vector3<f64>,
    pub dip: f64,
    pub dip_direction: f64,
    pub plane_ids: Vec<usize>,
}

/// Oriented rectangle bounding a plane's members: `centroid + s·u + t·v`
/// for `s ∈ [s_min, s_max]`, `t ∈ [t_min, t_max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlaneExtent {
    pub u: Vector3<f64>,
    pub v: Vector3<f64>,
    pub s_min: f64,
    pub s_max: f64,
    pub t_min: f64,
    pub t_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscontinuityPlane {
    pub plane_id: usize,
    pub set_id: usize,
    pub centroid: Point3<f64>,
    pub normal: Vector3<f64>,
    pub dip: f64,
    pub dip_direction: f64,
    pub members: Vec<usize>,
    pub extent: PlaneExtent,
    /// RMS distance of members to the fitted plane.
    pub rms: f64,
}

impl DiscontinuityPlane {
    /// Rectangle corners in counter-clockwise order seen from `+normal`.
    pub fn corners(&self) -> [Point3<f64>; 4] {
        let e = &self.extent;
        let at = |s: f64, t: f64| self.centroid + e.u * s + e.v * t;
        [at(e.s_min, e.t_min), at(e.s_max, e.t_min), at(e.s_max, e.t_max), at(e.s_min, e.t_max)]
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StructureResult {
    pub sets: Vec<DiscontinuitySet>,
    pub planes: Vec<DiscontinuityPlane>,
    /// The `min_cluster_size` actually used.
    pub min_cluster_size: usize,
    /// Planar points that HDBSCAN left unclustered.
    pub noise_points: usize,
}

/// Indices with planarity strictly above `threshold`.
pub fn filter_planar_points(desc: &DescriptorSet, threshold: f64) -> Result<Vec<usize>> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::arg(format!("planarity threshold must be in (0, 1), got {threshold}")));
    }
    Ok((0..desc.len())
        .filter(|&i| !desc.items[i].is_degenerate() && desc.items[i].planarity > threshold)
        .collect())
}

/// Fits a plane to `members`: centroid, hemisphere-aligned mean of member
/// normals, orientation and oriented in-plane extent.
pub fn fit_discontinuity_plane(
    members: &[usize],
    cloud: &PointCloud,
    desc: &DescriptorSet,
    plane_id: usize,
    set_id: usize,
) -> Result<DiscontinuityPlane> {
    if members.len() <= 100 {
        return Err(Error::arg(format!("plane fit needs more than 100 points, got {}", members.len())));
    }
    let pts = cloud.points();
    let centroid = centroid_of(pts, Some(members)).unwrap();
    let normals: Vec<Vector3<f64>> = members.iter().map(|&i| desc.items[i].normal).collect();
    let mean = aligned_mean(&normals, None).unwrap();
    if mean.norm() < 0.5 {
        return Err(Error::Degenerate(format!(
            "plane {plane_id}: member normals are incoherent (mean norm {:.3})",
            mean.norm()
        )));
    }
    let normal = mean.normalize();
    let o = orientation_of(&normal)?;

    let (_, cov) = covariance(pts, members);
    let (_, vecs) = sorted_eigen(&cov);
    let e1: Vector3<f64> = vecs.column(0).into_owned();
    let mut u = e1 - normal * e1.dot(&normal);
    if u.norm() < 1e-9 {
        u = normal.cross(&Vector3::x());
        if u.norm() < 1e-9 {
            u = normal.cross(&Vector3::y());
        }
    }
    let mut u = u.normalize();
    if u[u.iamax()] < 0.0 {
        u = -u;
    }
    let v = normal.cross(&u);
    let mut ext = PlaneExtent {
        u,
        v,
        s_min: f64::INFINITY,
        s_max: f64::NEG_INFINITY,
        t_min: f64::INFINITY,
        t_max: f64::NEG_INFINITY,
    };
    let mut ss = 0.0;
    for &i in members {
        let d = pts[i] - centroid;
        let (s, t) = (d.dot(&u), d.dot(&v));
        ext.s_min = ext.s_min.min(s);
        ext.s_max = ext.s_max.max(s);
        ext.t_min = ext.t_min.min(t);
        ext.t_max = ext.t_max.max(t);
        ss += d.dot(&normal).powi(2);
    }
    Ok(DiscontinuityPlane {
        plane_id,
        set_id,
        centroid,
        normal,
        dip: o.dip,
        dip_direction: o.dip_direction,
        members: members.to_vec(),
        extent: ext,
        rms: (ss / members.len() as f64).sqrt(),
    })
}

/// Clusters planar points by orientation, then splits every set into
/// spatially connected planes.
///
/// `planar_idx` indexes `cloud`/`desc`; `support_radius` is the default
/// connectivity distance.
pub fn characterize_sets(
    cloud: &PointCloud,
    desc: &DescriptorSet,
    planar_idx: &[usize],
    params: &StructureParams,
    support_radius: f64,
) -> Result<StructureResult> {
    if planar_idx.is_empty() {
        return Err(Error::arg("no planar points to characterize"));
    }
    let mcs = if params.scale_min_cluster_size {
        scaled_min_cluster_size(cloud.len())
    } else {
        params.min_cluster_size
    };
    let cell = params.component_cell.unwrap_or(support_radius);

    let mut samples = Vec::with_capacity(planar_idx.len() * 2);
    for &i in planar_idx {
        let o = orientation_of(&desc.items[i].normal)?;
        samples.push(o.dpx);
        samples.push(o.dpy);
    }
    let hp = HdbscanParams {
        min_cluster_size: mcs,
        min_samples: params.min_samples,
        allow_single_cluster: true,
    };
    let labels = hdbscan(&samples, 2, &hp)?;
    let groups: Vec<Vec<usize>> = labels
        .groups()
        .into_iter()
        .map(|g| g.into_iter().map(|k| planar_idx[k]).collect())
        .collect();

    // Plane splitting per set, in parallel; ids assigned afterwards in set order.
    let split: Vec<Result<Vec<Vec<usize>>>> = groups
        .par_iter()
        .map(|members| {
            let comps = euclidean_components(cloud, members, cell)?;
            Ok(comps
                .groups()
                .into_iter()
                .filter(|g| g.len() > params.min_plane_points)
                .map(|g| g.into_iter().map(|k| members[k]).collect())
                .collect())
        })
        .collect();

    let mut result = StructureResult {
        min_cluster_size: mcs,
        noise_points: labels.noise_count(),
        ..Default::default()
    };
    for (set_id, (members, planes)) in groups.into_iter().zip(split).enumerate() {
        let normals: Vec<Vector3<f64>> = members.iter().map(|&i| desc.items[i].normal).collect();
        let mean = aligned_mean(&normals, None).unwrap();
        let mean_normal = if mean.norm() > 0.0 { mean.normalize() } else { Vector3::z() };
        let o = orientation_of(&mean_normal)?;
        let mut plane_ids = Vec::new();
        for pm in planes? {
            let id = result.planes.len();
            match fit_discontinuity_plane(&pm, cloud, desc, id, set_id) {
                Ok(p) => {
                    plane_ids.push(id);
                    result.planes.push(p);
                }
                Err(e) => log::warn!("set {set_id}: plane skipped: {e}"),
            }
        }
        result.sets.push(DiscontinuitySet {
            set_id,
            members,
            mean_normal,
            dip: o.dip,
            dip_direction: o.dip_direction,
            plane_ids,
        });
    }
    Ok(result)
}
