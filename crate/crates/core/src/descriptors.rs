//! Per-point PCA eigen features: eigenvalues, normal, planarity, curvature.

use nalgebra::{Matrix3, Point3, SymmetricEigen, Vector3};
use rayon::prelude::*;

use crate::cloud::{ChannelData, PointCloud};
use crate::error::{Error, Result};
use crate::index::SpatialIndex;
use crate::orientation::aligned_mean;

/// Neighbourhoods with fewer points than this are marked degenerate.
pub const MIN_NEIGHBOURS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Descriptor {
    /// `λ1 ≥ λ2 ≥ λ3 ≥ 0`, population covariance of the neighbourhood.
    pub eigenvalues: [f64; 3],
    /// Unit eigenvector of `λ3`, sign as returned by the solver.
    pub normal: Vector3<f64>,
    pub planarity: f64,
    pub curvature: f64,
    pub neighbour_count: u32,
}

impl Descriptor {
    pub const DEGENERATE: Descriptor = Descriptor {
        eigenvalues: [0.0; 3],
        normal: Vector3::new(0.0, 0.0, 1.0),
        planarity: 0.0,
        curvature: 0.0,
        neighbour_count: 0,
    };

    pub fn is_degenerate(&self) -> bool {
        (self.neighbour_count as usize) < MIN_NEIGHBOURS
    }
}

#[derive(Debug, Clone)]
pub struct DescriptorSet {
    pub radius: f64,
    pub items: Vec<Descriptor>,
}

impl DescriptorSet {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn get(&self, i: usize) -> &Descriptor {
        &self.items[i]
    }

    pub fn select(&self, indices: &[usize]) -> DescriptorSet {
        DescriptorSet {
            radius: self.radius,
            items: indices.iter().map(|&i| self.items[i]).collect(),
        }
    }

    /// Writes the descriptors into `cloud` as channels, for debugging dumps.
    pub fn attach_to(&self, cloud: &mut PointCloud) -> Result<()> {
        let col = |f: fn(&Descriptor) -> f64| ChannelData::Scalar(self.items.iter().map(f).collect());
        cloud.set_channel("lambda1", col(|d| d.eigenvalues[0]))?;
        cloud.set_channel("lambda2", col(|d| d.eigenvalues[1]))?;
        cloud.set_channel("lambda3", col(|d| d.eigenvalues[2]))?;
        cloud.set_channel("planarity", col(|d| d.planarity))?;
        cloud.set_channel("curvature", col(|d| d.curvature))?;
        cloud.set_channel("neighbours", col(|d| d.neighbour_count as f64))?;
        cloud.set_channel(
            "normal",
            ChannelData::Vector(self.items.iter().map(|d| d.normal).collect()),
        )
    }

    /// Reads descriptors back from channels written by [`Self::attach_to`].
    pub fn from_channels(cloud: &PointCloud, radius: f64) -> Result<DescriptorSet> {
        let get = |name: &str| {
            cloud
                .scalar(name)
                .ok_or_else(|| Error::Data(format!("cloud lacks descriptor channel `{name}`")))
        };
        let (l1, l2, l3) = (get("lambda1")?, get("lambda2")?, get("lambda3")?);
        let (pl, cu, nb) = (get("planarity")?, get("curvature")?, get("neighbours")?);
        let (nx, ny, nz) = (get("normal_x")?, get("normal_y")?, get("normal_z")?);
        let items = (0..cloud.len())
            .map(|i| Descriptor {
                eigenvalues: [l1[i], l2[i], l3[i]],
                normal: Vector3::new(nx[i], ny[i], nz[i]),
                planarity: pl[i],
                curvature: cu[i],
                neighbour_count: nb[i] as u32,
            })
            .collect();
        Ok(DescriptorSet { radius, items })
    }
}

/// Population covariance of `points[indices]` about their mean.
pub fn covariance(points: &[Point3<f64>], indices: &[usize]) -> (Point3<f64>, Matrix3<f64>) {
    let n = indices.len() as f64;
    let mean = indices.iter().fold(Vector3::zeros(), |a, &i| a + points[i].coords) / n;
    let mut m = Matrix3::zeros();
    for &i in indices {
        let d = points[i].coords - mean;
        m += d * d.transpose();
    }
    (Point3::from(mean), m / n)
}

/// Eigen-decomposition sorted by descending eigenvalue; columns of the
/// returned matrix are the matching unit eigenvectors.
pub fn sorted_eigen(m: &Matrix3<f64>) -> ([f64; 3], Matrix3<f64>) {
    let e = SymmetricEigen::new(*m);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| e.eigenvalues[b].total_cmp(&e.eigenvalues[a]));
    let vals = order.map(|k| e.eigenvalues[k]);
    let vecs = Matrix3::from_columns(&order.map(|k| e.eigenvectors.column(k).normalize()));
    (vals, vecs)
}

/// Descriptor of one neighbourhood.
pub fn describe(points: &[Point3<f64>], neighbours: &[usize]) -> Descriptor {
    if neighbours.len() < MIN_NEIGHBOURS {
        return Descriptor {
            neighbour_count: neighbours.len() as u32,
            ..Descriptor::DEGENERATE
        };
    }
    let (_, cov) = covariance(points, neighbours);
    let (vals, vecs) = sorted_eigen(&cov);
    let l = vals.map(|v| v.max(0.0));
    let sum = l[0] + l[1] + l[2];
    Descriptor {
        eigenvalues: l,
        normal: vecs.column(2).into_owned(),
        planarity: if l[0] > 0.0 { (l[1] - l[2]) / l[0] } else { 0.0 },
        curvature: if sum > 0.0 { l[2] / sum } else { 0.0 },
        neighbour_count: neighbours.len() as u32,
    }
}

/// Computes descriptors for every point from its radius neighbourhood
/// (the point itself included).
pub fn compute_descriptors(cloud: &PointCloud, index: &SpatialIndex, radius: f64) -> Result<DescriptorSet> {
    if !(radius > 0.0 && radius.is_finite()) {
        return Err(Error::arg(format!("descriptor radius must be positive, got {radius}")));
    }
    let points = cloud.points();
    let items = points
        .par_iter()
        .map_init(Vec::new, |buf, p| {
            buf.clear();
            index.for_each_within(p, radius, |j, _| buf.push(j));
            buf.sort_unstable();
            describe(points, buf)
        })
        .collect();
    Ok(DescriptorSet { radius, items })
}

/// Local plane estimate around a location.
#[derive(Debug, Clone, Copy)]
pub struct LocalSurface {
    pub normal: Vector3<f64>,
    pub centroid: Point3<f64>,
    /// RMS distance of the contributing points to the plane.
    pub rms: f64,
    pub count: usize,
}

/// Planarity-weighted, hemisphere-aligned mean normal of the non-degenerate
/// points within `radius` of `center` that pass `keep`. `None` with fewer than
/// `min_points` contributors or an incoherent mean.
pub fn local_surface(
    cloud: &PointCloud,
    desc: &DescriptorSet,
    index: &SpatialIndex,
    center: &Point3<f64>,
    radius: f64,
    min_points: usize,
    keep: impl Fn(usize) -> bool,
) -> Option<LocalSurface> {
    let mut members = Vec::new();
    index.for_each_within(center, radius, |j, _| {
        if keep(j) && !desc.items[j].is_degenerate() {
            members.push(j);
        }
    });
    members.sort_unstable();
    if members.len() < min_points.max(1) {
        return None;
    }
    let normals: Vec<Vector3<f64>> = members.iter().map(|&j| desc.items[j].normal).collect();
    let weights: Vec<f64> = members.iter().map(|&j| desc.items[j].planarity).collect();
    let mean = aligned_mean(&normals, Some(&weights))?;
    if mean.norm() < 0.5 {
        return None;
    }
    let normal = mean.normalize();
    let pts = cloud.points();
    let c = crate::cloud::centroid_of(pts, Some(&members))?;
    let ms = members
        .iter()
        .map(|&j| (pts[j] - c).dot(&normal).powi(2))
        .sum::<f64>()
        / members.len() as f64;
    Some(LocalSurface {
        normal,
        centroid: c,
        rms: ms.sqrt(),
        count: members.len(),
    })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use nalgebra::Rotation3;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    /// Eigenvalues of a symmetric 3×3 matrix from the trigonometric solution of
    /// its characteristic polynomial, descending.
    pub(crate) fn analytic_eigenvalues(a: &Matrix3<f64>) -> [f64; 3] {
        let p1 = a[(0, 1)].powi(2) + a[(0, 2)].powi(2) + a[(1, 2)].powi(2);
        let q = a.trace() / 3.0;
        if p1 == 0.0 {
            let mut d = [a[(0, 0)], a[(1, 1)], a[(2, 2)]];
            d.sort_by(|x, y| y.total_cmp(x));
            return d;
        }
        let p2 = (a[(0, 0)] - q).powi(2) + (a[(1, 1)] - q).powi(2) + (a[(2, 2)] - q).powi(2) + 2.0 * p1;
        let p = (p2 / 6.0).sqrt();
        let b = (a - Matrix3::identity() * q) / p;
        let r = (b.determinant() / 2.0).clamp(-1.0, 1.0);
        let phi = r.acos() / 3.0;
        let e1 = q + 2.0 * p * phi.cos();
        let e3 = q + 2.0 * p * (phi + 2.0 * std::f64::consts::PI / 3.0).cos();
        [e1, 3.0 * q - e1 - e3, e3]
    }

    fn plane_cloud(n: usize, seed: u64) -> Vec<Point3<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| Point3::new(rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), 0.0))
            .collect()
    }

    fn ball_cloud(n: usize, seed: u64) -> Vec<Point3<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = Normal::new(0.0, 1.0).unwrap();
        (0..n)
            .map(|_| Point3::new(g.sample(&mut rng), g.sample(&mut rng), g.sample(&mut rng)))
            .collect()
    }

    fn run(points: Vec<Point3<f64>>, radius: f64) -> (PointCloud, DescriptorSet) {
        let c = PointCloud::new(points).unwrap();
        let d = compute_descriptors(&c, &SpatialIndex::new(&c), radius).unwrap();
        (c, d)
    }

    #[test]
    fn planar_limit() {
        // Interior points of a regular grid have rotationally symmetric
        // neighbourhoods, so λ1 = λ2 and λ3 = 0.
        let mut pts = Vec::new();
        for i in 0..60 {
            for j in 0..60 {
                pts.push(Point3::new(i as f64 * 0.01, j as f64 * 0.01, 0.0));
            }
        }
        let (c, d) = run(pts, 0.035);
        let interior = |p: &Point3<f64>| p.x > 0.04 && p.x < 0.55 && p.y > 0.04 && p.y < 0.55;
        for (p, x) in c.points().iter().zip(&d.items) {
            if interior(p) {
                assert!(x.neighbour_count >= 10);
                assert!(x.planarity >= 0.95 && x.curvature <= 0.01, "{x:?}");
                assert!(x.normal.z.abs() >= 2f64.to_radians().cos());
            }
        }
    }

    #[test]
    fn random_plane_converges_with_neighbourhood_size() {
        let median_planarity = |r: f64| {
            let (c, d) = run(plane_cloud(20_000, 1), r);
            let mut v: Vec<f64> = c
                .points()
                .iter()
                .zip(&d.items)
                .filter(|(p, _)| p.x > r && p.x < 1.0 - r && p.y > r && p.y < 1.0 - r)
                .map(|(_, x)| x.planarity)
                .collect();
            v.sort_by(f64::total_cmp);
            v[v.len() / 2]
        };
        let (small, large) = (median_planarity(0.02), median_planarity(0.08));
        assert!(large > small && large >= 0.9, "{small} {large}");
    }

    #[test]
    fn isotropic_limit() {
        let pts = ball_cloud(20_000, 2);
        let c = PointCloud::new(pts).unwrap();
        let idx = SpatialIndex::new(&c);
        let all: Vec<usize> = idx.radius(&Point3::origin(), 100.0);
        let d = describe(c.points(), &all);
        assert!((d.curvature - 1.0 / 3.0).abs() < 0.02);
        assert!(d.planarity < 0.05);
    }

    #[test]
    fn degenerate_marker() {
        let (_, d) = run(vec![Point3::origin(), Point3::new(5.0, 0.0, 0.0), Point3::new(0.0, 0.01, 0.0)], 0.1);
        assert!(d.items[1].is_degenerate());
        assert_eq!(d.items[1].normal, Vector3::z());
        assert_eq!((d.items[1].planarity, d.items[1].curvature), (0.0, 0.0));
    }

    #[test]
    fn eigenvalues_match_analytic_solver() {
        let mut pts = plane_cloud(1500, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for p in pts.iter_mut() {
            p.z = rng.random_range(-0.02..0.02) + 0.3 * p.x;
        }
        pts.extend(ball_cloud(500, 5).into_iter().map(|p| Point3::from(p.coords * 0.05)));
        let c = PointCloud::new(pts).unwrap();
        let idx = SpatialIndex::new(&c);
        for (i, p) in c.points().iter().enumerate() {
            let nb = {
                let mut v = idx.radius(p, 0.08);
                v.sort_unstable();
                v
            };
            if nb.len() < 3 {
                continue;
            }
            let (_, cov) = covariance(c.points(), &nb);
            let want = analytic_eigenvalues(&cov);
            let got = describe(c.points(), &nb).eigenvalues;
            let scale = cov.trace();
            for k in 0..3 {
                let tol = 1e-9 * want[k].abs().max(1e-6 * scale);
                assert!((got[k] - want[k].max(0.0)).abs() <= tol, "point {i} λ{k}: {} vs {}", got[k], want[k]);
            }
            assert!(((got[0] + got[1] + got[2]) - scale).abs() <= 1e-9 * scale);
        }
    }

    #[test]
    fn rigid_motion_invariance() {
        let mut pts = plane_cloud(2000, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for p in pts.iter_mut() {
            p.z = 0.2 * (p.x * 6.0).sin() + rng.random_range(-0.005..0.005);
        }
        let rot = Rotation3::from_euler_angles(0.3, -1.1, 2.0);
        let shift = Vector3::new(12.0, -40.0, 3.5);
        let moved: Vec<_> = pts.iter().map(|p| rot * p + shift).collect();
        let (_, a) = run(pts, 0.07);
        let (_, b) = run(moved, 0.07);
        for (x, y) in a.items.iter().zip(&b.items) {
            assert_eq!(x.neighbour_count, y.neighbour_count);
            if x.is_degenerate() {
                continue;
            }
            for k in 0..3 {
                assert!((x.eigenvalues[k] - y.eigenvalues[k]).abs() < 1e-6);
            }
            assert!((x.planarity - y.planarity).abs() < 1e-6);
            assert!((x.curvature - y.curvature).abs() < 1e-6);
            let rn = rot * x.normal;
            // Normals are only defined up to sign, and are ill-posed when λ2≈λ3.
            if x.eigenvalues[1] - x.eigenvalues[2] > 1e-3 * x.eigenvalues[0] {
                assert!(rn.dot(&y.normal).abs() > 1.0 - 1e-6);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn ranges_hold(raw in prop::collection::vec(prop::array::uniform3(-1.0f64..1.0), 3..60)) {
            let pts: Vec<_> = raw.into_iter().map(Point3::from).collect();
            let all: Vec<usize> = (0..pts.len()).collect();
            let d = describe(&pts, &all);
            prop_assert!(d.eigenvalues[0] >= d.eigenvalues[1] && d.eigenvalues[1] >= d.eigenvalues[2] && d.eigenvalues[2] >= 0.0);
            prop_assert!((d.normal.norm() - 1.0).abs() < 1e-9);
            prop_assert!((0.0..=1.0).contains(&d.planarity));
            prop_assert!((0.0..=1.0 / 3.0 + 1e-12).contains(&d.curvature));
        }
    }
}
