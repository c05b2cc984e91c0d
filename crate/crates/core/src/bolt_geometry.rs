//! Per-bolt axis, exposed length and deviation from the local roof normal.

use nalgebra::{Point3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cloud::PointCloud;
use crate::cluster::euclidean_components;
use crate::descriptors::{covariance, local_surface, sorted_eigen, DescriptorSet};
use crate::error::{Error, Result};
use crate::index::SpatialIndex;
use crate::orientation::orientation_of;
use crate::structure::DiscontinuityPlane;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoltGeometryParams {
    /// Connectivity distance; `None` uses the support radius.
    pub cluster_cell: Option<f64>,
    pub min_points: usize,
    pub roof_radius: f64,
    pub roof_min_points: usize,
    pub weak_elongation: f64,
}

impl Default for BoltGeometryParams {
    fn default() -> Self {
        BoltGeometryParams {
            cluster_cell: None,
            min_points: 4,
            roof_radius: 0.3,
            roof_min_points: 10,
            weak_elongation: 1.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RoofSource {
    Local,
    Plane(usize),
    Vertical,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoofNormal {
    pub normal: Vector3<f64>,
    pub source: RoofSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoltVector {
    pub bolt_id: usize,
    pub members: Vec<usize>,
    pub centroid: Point3<f64>,
    pub axis: Vector3<f64>,
    pub eigenvalues: [f64; 3],
    pub exposed_length: f64,
    pub deviation: f64,
    pub dip: f64,
    pub dip_direction: f64,
    pub roof_normal: Vector3<f64>,
    pub roof_source: RoofSource,
    pub warnings: Vec<String>,
}

/// Connected components of the bolt-labelled points; one per bolt, each
/// sorted by cloud index.
pub fn extract_bolt_clusters(cloud: &PointCloud, bolt_points: &[usize], cell: f64) -> Result<Vec<Vec<usize>>> {
    let labels = euclidean_components(cloud, bolt_points, cell)?;
    Ok(labels
        .groups()
        .into_iter()
        .map(|g| {
            let mut m: Vec<usize> = g.into_iter().map(|k| bolt_points[k]).collect();
            m.sort_unstable();
            m
        })
        .collect())
}

/// Axis from the sample covariance (divided by N − 1), signed so that it
/// points along `roof_normal`. Returns centroid, eigenvalues, axis and an
/// optional weak-elongation warning.
pub fn estimate_bolt_vector(
    points: &[Point3<f64>],
    members: &[usize],
    roof_normal: &Vector3<f64>,
    weak_elongation: f64,
) -> Result<(Point3<f64>, [f64; 3], Vector3<f64>, Option<String>)> {
    if members.len() < 4 {
        return Err(Error::Degenerate(format!("bolt cluster has {} points, need 4", members.len())));
    }
    let (c, pop) = covariance(points, members);
    let n = members.len() as f64;
    let (mut vals, vecs) = sorted_eigen(&(pop * (n / (n - 1.0))));
    for v in vals.iter_mut() {
        *v = v.max(0.0);
    }
    if !(vals[0] > 0.0) {
        return Err(Error::Degenerate("bolt cluster has zero spread".into()));
    }
    let mut axis: Vector3<f64> = vecs.column(0).into_owned().normalize();
    if axis.dot(roof_normal) < 0.0 {
        axis = -axis;
    }
    let warn = (vals[0] < weak_elongation * vals[1])
        .then(|| format!("weak elongation: eta1/eta2 = {:.3}", vals[0] / vals[1]));
    Ok((c, vals, axis, warn))
}

/// Projection extent along the axis, and acute angle to the roof normal in degrees.
pub fn bolt_quality_metrics(
    points: &[Point3<f64>],
    members: &[usize],
    centroid: &Point3<f64>,
    axis: &Vector3<f64>,
    roof_normal: &Vector3<f64>,
) -> (f64, f64) {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &i in members {
        let s = (points[i] - centroid).dot(axis);
        lo = lo.min(s);
        hi = hi.max(s);
    }
    (hi - lo, deviation_angle(axis, roof_normal))
}

pub fn deviation_angle(axis: &Vector3<f64>, roof_normal: &Vector3<f64>) -> f64 {
    let c = axis.normalize().dot(&roof_normal.normalize()).abs().min(1.0);
    c.acos().to_degrees()
}

/// Roof normal at `location`: local estimate from non-excluded points, then
/// the nearest discontinuity plane whose extent contains the location, then
/// +z. The normal is oriented toward `location`.
#[allow(clippy::too_many_arguments)]
pub fn local_roof_normal(
    cloud: &PointCloud,
    desc: &DescriptorSet,
    index: &SpatialIndex,
    location: &Point3<f64>,
    radius: f64,
    min_points: usize,
    exclude: &[usize],
    planes: &[DiscontinuityPlane],
) -> RoofNormal {
    if let Some(s) = local_surface(cloud, desc, index, location, radius, min_points, |j| exclude.binary_search(&j).is_err()) {
        let n = if (location - s.centroid).dot(&s.normal) < 0.0 { -s.normal } else { s.normal };
        return RoofNormal { normal: n, source: RoofSource::Local };
    }
    let containing = planes
        .iter()
        .filter_map(|p| {
            let d = location - p.centroid;
            let (s, t) = (d.dot(&p.extent.u), d.dot(&p.extent.v));
            let e = &p.extent;
            let inside = s >= e.s_min && s <= e.s_max && t >= e.t_min && t <= e.t_max;
            let h = d.dot(&p.normal);
            (inside && h.abs() <= radius).then_some((h.abs(), p.plane_id, if h < 0.0 { -p.normal } else { p.normal }))
        })
        .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    if let Some((_, id, n)) = containing {
        log::warn!("roof normal at {location:?}: too few surface points, using plane {id}");
        return RoofNormal { normal: n, source: RoofSource::Plane(id) };
    }
    log::warn!("roof normal at {location:?}: no surface found, assuming +z");
    RoofNormal { normal: Vector3::z(), source: RoofSource::Vertical }
}

/// Clusters bolt-labelled points and computes a `BoltVector` for every
/// cluster with at least `min_points` points. Bolt ids follow cluster order.
#[allow(clippy::too_many_arguments)]
pub fn analyze_bolts(
    cloud: &PointCloud,
    desc: &DescriptorSet,
    index: &SpatialIndex,
    bolt_points: &[usize],
    planes: &[DiscontinuityPlane],
    params: &BoltGeometryParams,
    support_radius: f64,
) -> Result<Vec<BoltVector>> {
    let mut sorted = bolt_points.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let clusters = extract_bolt_clusters(cloud, &sorted, params.cluster_cell.unwrap_or(support_radius))?;
    let pts = cloud.points();
    let results: Vec<Option<BoltVector>> = clusters
        .into_par_iter()
        .map(|members| {
            if members.len() < params.min_points.max(4) {
                return None;
            }
            let mu = crate::cloud::centroid_of(pts, Some(&members))?;
            let roof = local_roof_normal(cloud, desc, index, &mu, params.roof_radius, params.roof_min_points, &sorted, planes);
            let (c, vals, axis, warn) = match estimate_bolt_vector(pts, &members, &roof.normal, params.weak_elongation) {
                Ok(v) => v,
                Err(e) => {
                    log::warn!("skipping bolt cluster: {e}");
                    return None;
                }
            };
            let (len, dev) = bolt_quality_metrics(pts, &members, &c, &axis, &roof.normal);
            let o = orientation_of(&axis).ok()?;
            let mut warnings: Vec<String> = warn.into_iter().collect();
            match roof.source {
                RoofSource::Local => {}
                RoofSource::Plane(id) => warnings.push(format!("roof normal from plane {id}")),
                RoofSource::Vertical => warnings.push("roof normal defaulted to +z".into()),
            }
            Some(BoltVector {
                bolt_id: 0,
                members,
                centroid: c,
                axis,
                eigenvalues: vals,
                exposed_length: len,
                deviation: dev,
                dip: o.dip,
                dip_direction: o.dip_direction,
                roof_normal: roof.normal,
                roof_source: roof.source,
                warnings,
            })
        })
        .collect();
    let mut out: Vec<BoltVector> = results.into_iter().flatten().collect();
    for (k, b) in out.iter_mut().enumerate() {
        b.bolt_id = k;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::descriptors::compute_descriptors;
    use nalgebra::{Rotation3, Unit};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn cyl(base: Point3<f64>, axis: Vector3<f64>, len: f64, r: f64, n: usize, sigma: f64, rng: &mut ChaCha8Rng) -> Vec<Point3<f64>> {
        let a = axis.normalize();
        let u = a.cross(&Vector3::new(0.3, 0.5, 0.7)).normalize();
        let v = a.cross(&u);
        let g = Normal::new(0.0, sigma.max(1e-300)).unwrap();
        // Jittered strata, 24 around the circumference.
        let rows = n.div_ceil(24);
        (0..rows * 24)
            .map(|k| {
                let s = ((k / 24) as f64 + rng.random_range(0.0..1.0)) * len / rows as f64;
                let t = ((k % 24) as f64 + rng.random_range(0.0..1.0)) * std::f64::consts::TAU / 24.0;
                let e = if sigma > 0.0 { Vector3::new(g.sample(rng), g.sample(rng), g.sample(rng)) } else { Vector3::zeros() };
                base + a * s + (u * t.cos() + v * t.sin()) * r + e
            })
            .collect()
    }

    fn grid(half: f64, pitch: f64) -> Vec<Point3<f64>> {
        let k = (half / pitch) as i64;
        (-k..=k).flat_map(|i| (-k..=k).map(move |j| Point3::new(i as f64 * pitch, j as f64 * pitch, 0.0))).collect()
    }

    #[test]
    fn sample_covariance_divides_by_n_minus_one() {
        let pts = vec![Point3::new(0.0, 0.0, 0.0), Point3::new(0.0, 0.0, 1.0), Point3::new(0.0, 0.0, 2.0), Point3::new(0.0, 0.0, 3.0)];
        let (_, vals, axis, warn) = estimate_bolt_vector(&pts, &[0, 1, 2, 3], &Vector3::z(), 1.5).unwrap();
        // Values 0,1,2,3: sum of squared deviations 5, over N-1 = 3.
        assert!((vals[0] - 5.0 / 3.0).abs() < 1e-12);
        assert_eq!((vals[1], vals[2]), (0.0, 0.0));
        assert!((axis - Vector3::z()).norm() < 1e-12);
        assert!(warn.is_none());
        let (_, _, flipped, _) = estimate_bolt_vector(&pts, &[0, 1, 2, 3], &-Vector3::z(), 1.5).unwrap();
        assert!((flipped + Vector3::z()).norm() < 1e-12);
        assert!(estimate_bolt_vector(&pts, &[0, 1, 2], &Vector3::z(), 1.5).is_err());
    }

    #[test]
    fn quality_metric_examples() {
        let pts = vec![Point3::new(1.0, 1.0, 1.0), Point3::new(1.0, 1.0, 1.12)];
        let (l, t) = bolt_quality_metrics(&pts, &[0, 1], &Point3::new(1.0, 1.0, 1.06), &Vector3::z(), &Vector3::z());
        assert!((l - 0.12).abs() < 1e-12 && t == 0.0);
        let a = Vector3::new(1.0, 0.0, 1.0).normalize();
        assert!((deviation_angle(&a, &Vector3::z()) - 45.0).abs() < 1e-9);
        assert_eq!(deviation_angle(&a, &Vector3::z()), deviation_angle(&-a, &Vector3::z()));
    }

    #[test]
    fn weak_elongation_warns() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pts: Vec<_> = (0..200).map(|_| Point3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))).collect();
        let idx: Vec<usize> = (0..200).collect();
        let (_, _, a, warn) = estimate_bolt_vector(&pts, &idx, &Vector3::z(), 1.5).unwrap();
        assert!(warn.is_some());
        assert!((a.norm() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn planted_tilted_cylinder_axis() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let planted = Rotation3::from_axis_angle(&Vector3::x_axis(), 20f64.to_radians()) * Vector3::z();
        let pts = cyl(Point3::origin(), planted, 0.15, 0.01, 1500, 0.001, &mut rng);
        let idx: Vec<usize> = (0..pts.len()).collect();
        let (c, _, a, _) = estimate_bolt_vector(&pts, &idx, &Vector3::z(), 1.5).unwrap();
        assert!(a.dot(&planted).acos().to_degrees() < 2.0);
        let (l, t) = bolt_quality_metrics(&pts, &idx, &c, &a, &Vector3::z());
        assert!((l - 0.15).abs() <= 2.0 * 0.01 + 3.0 * 0.001);
        assert!((t - 20.0).abs() < 2.0);
    }

    #[test]
    fn translation_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts = cyl(Point3::origin(), Vector3::new(0.2, 0.1, 1.0), 0.1, 0.01, 400, 0.001, &mut rng);
        let moved: Vec<_> = pts.iter().map(|p| p + Vector3::new(100.0, 100.0, 100.0)).collect();
        let idx: Vec<usize> = (0..pts.len()).collect();
        let a = estimate_bolt_vector(&pts, &idx, &Vector3::z(), 1.5).unwrap();
        let b = estimate_bolt_vector(&moved, &idx, &Vector3::z(), 1.5).unwrap();
        assert!((a.2 - b.2).norm() < 1e-9);
        for k in 0..3 {
            assert!((a.1[k] - b.1[k]).abs() <= 1e-9 * a.1[0]);
        }
    }

    #[test]
    fn bolt_cluster_extraction() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut pts = cyl(Point3::origin(), Vector3::z(), 0.1, 0.01, 300, 0.0, &mut rng);
        pts.extend(cyl(Point3::new(1.0, 0.0, 0.0), Vector3::z(), 0.1, 0.01, 300, 0.0, &mut rng));
        // A 2 mm gap along the second bolt stays connected at a 25 mm cell.
        pts.extend(cyl(Point3::new(1.0, 0.0, 0.102), Vector3::z(), 0.05, 0.01, 150, 0.0, &mut rng));
        let c = PointCloud::new(pts).unwrap();
        let all: Vec<usize> = (0..c.len()).collect();
        assert_eq!(extract_bolt_clusters(&c, &all, 0.025).unwrap().len(), 2);
    }

    #[test]
    fn roof_normal_on_flat_and_dipping_surfaces() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut pts = grid(0.5, 0.01);
        let n_roof = pts.len();
        pts.extend(cyl(Point3::origin(), -Vector3::z(), 0.12, 0.01, 400, 0.0, &mut rng));
        let c = PointCloud::new(pts.clone()).unwrap();
        let idx = SpatialIndex::new(&c);
        let d = compute_descriptors(&c, &idx, 0.03).unwrap();
        let bolt: Vec<usize> = (n_roof..c.len()).collect();
        let mu = crate::cloud::centroid_of(c.points(), Some(&bolt)).unwrap();
        let r = local_roof_normal(&c, &d, &idx, &mu, 0.3, 10, &bolt, &[]);
        assert_eq!(r.source, RoofSource::Local);
        assert!(r.normal.dot(&-Vector3::z()) > 1f64.to_radians().cos());

        let tilt = Rotation3::from_axis_angle(&Unit::new_normalize(Vector3::new(1.0, 1.0, 0.0)), 35f64.to_radians());
        let rotated: Vec<_> = pts.iter().map(|p| tilt * p).collect();
        let c = PointCloud::new(rotated).unwrap();
        let idx = SpatialIndex::new(&c);
        let d = compute_descriptors(&c, &idx, 0.03).unwrap();
        let r = local_roof_normal(&c, &d, &idx, &(tilt * mu), 0.3, 10, &bolt, &[]);
        assert!(r.normal.dot(&(tilt * -Vector3::z())) > 2f64.to_radians().cos());
    }

    #[test]
    fn roof_normal_fallbacks() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let pts = cyl(Point3::origin(), Vector3::z(), 0.12, 0.01, 300, 0.0, &mut rng);
        let c = PointCloud::new(pts).unwrap();
        let idx = SpatialIndex::new(&c);
        let d = compute_descriptors(&c, &idx, 0.03).unwrap();
        let all: Vec<usize> = (0..c.len()).collect();
        let r = local_roof_normal(&c, &d, &idx, &Point3::new(0.0, 0.0, 0.06), 0.3, 10, &all, &[]);
        assert_eq!(r.source, RoofSource::Vertical);
        assert_eq!(r.normal, Vector3::z());

        let plane = DiscontinuityPlane {
            plane_id: 7,
            set_id: 0,
            centroid: Point3::origin(),
            normal: Vector3::new(0.0, 0.0, -1.0),
            dip: 0.0,
            dip_direction: 0.0,
            members: vec![],
            extent: crate::structure::PlaneExtent { u: Vector3::x(), v: Vector3::y(), s_min: -1.0, s_max: 1.0, t_min: -1.0, t_max: 1.0 },
            rms: 0.0,
        };
        let r = local_roof_normal(&c, &d, &idx, &Point3::new(0.0, 0.0, 0.06), 0.3, 10, &all, &[plane]);
        assert_eq!(r.source, RoofSource::Plane(7));
        assert!((r.normal - Vector3::z()).norm() < 1e-12);
    }

    #[test]
    fn analyze_two_bolts_on_roof() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut pts = grid(1.0, 0.01);
        let n_roof = pts.len();
        let axes = [Vector3::new(0.0, 0.0, 1.0), Vector3::new(0.0, 0.2, 1.0).normalize()];
        pts.extend(cyl(Point3::new(-0.5, 0.0, 0.0), axes[0], 0.2, 0.01, 800, 0.0005, &mut rng));
        pts.extend(cyl(Point3::new(0.5, 0.0, 0.0), axes[1], 0.1, 0.01, 400, 0.0005, &mut rng));
        let c = PointCloud::new(pts).unwrap();
        let idx = SpatialIndex::new(&c);
        let d = compute_descriptors(&c, &idx, 0.03).unwrap();
        let bolt: Vec<usize> = (n_roof..c.len()).filter(|&i| c.point(i).z > 0.005).collect();
        let out = analyze_bolts(&c, &d, &idx, &bolt, &[], &BoltGeometryParams::default(), 0.025).unwrap();
        assert_eq!(out.len(), 2);
        for (b, (a, l)) in out.iter().zip(axes.iter().zip([0.2, 0.1])) {
            assert!(b.axis.dot(a) > 2f64.to_radians().cos());
            assert!((b.exposed_length - l).abs() < 0.02);
            assert!(b.eigenvalues[0] >= b.eigenvalues[1] && b.eigenvalues[1] >= b.eigenvalues[2] && b.eigenvalues[2] >= 0.0);
            assert!((b.axis.norm() - 1.0).abs() < 1e-9);
        }
        assert!(out[0].deviation < 2.0);
        assert!((out[1].deviation - 0.2f64.atan().to_degrees()).abs() < 2.0);
    }

    proptest! {
        #[test]
        fn rotation_equivariance(ax in -1.0f64..1.0, ay in -1.0f64..1.0, az in -1.0f64..1.0, angle in 0.0f64..3.1, seed in 0u64..1000) {
            prop_assume!(Vector3::new(ax, ay, az).norm() > 0.1);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pts = cyl(Point3::origin(), Vector3::new(0.1, -0.2, 1.0), 0.15, 0.01, 300, 0.001, &mut rng);
            let rot = Rotation3::from_axis_angle(&Unit::new_normalize(Vector3::new(ax, ay, az)), angle);
            let moved: Vec<_> = pts.iter().map(|p| rot * p).collect();
            let idx: Vec<usize> = (0..pts.len()).collect();
            let roof = Vector3::z();
            let a = estimate_bolt_vector(&pts, &idx, &roof, 1.5).unwrap();
            let b = estimate_bolt_vector(&moved, &idx, &(rot * roof), 1.5).unwrap();
            prop_assert!((rot * a.2 - b.2).norm() < 1e-6);
            for k in 0..3 {
                prop_assert!((a.1[k] - b.1[k]).abs() < 1e-6);
            }
            let qa = bolt_quality_metrics(&pts, &idx, &a.0, &a.2, &roof);
            let qb = bolt_quality_metrics(&moved, &idx, &b.0, &b.2, &(rot * roof));
            prop_assert!((qa.0 - qb.0).abs() < 1e-6 && (qa.1 - qb.1).abs() < 1e-6);
            let flipped = bolt_quality_metrics(&pts, &idx, &a.0, &-a.2, &roof);
            prop_assert!((flipped.0 - qa.0).abs() < 1e-12);
            prop_assert_eq!(flipped.1, qa.1);
            prop_assert!((0.0..=90.0).contains(&qa.1));
        }
    }
}
