//! Noise removal, voxel downsampling and cloth-simulation floor removal.

use nalgebra::{Matrix2, Point3};
use rayon::prelude::*;

use crate::cloud::{ChannelData, PointCloud};
use crate::error::{Error, Result};
use crate::index::SpatialIndex;

/// A subset of an input cloud together with the input indices it came from.
#[derive(Debug, Clone)]
pub struct Filtered {
    pub cloud: PointCloud,
    pub kept: Vec<usize>,
}

/// Mean distance from each point to its `k` nearest other points.
pub fn mean_knn_distances(cloud: &PointCloud, index: &SpatialIndex, k: usize) -> Vec<f64> {
    cloud
        .points()
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let nn = index.knn(p, k + 1);
            // Drop the query point itself; with exact duplicates it may not be first.
            let mut sum = 0.0;
            let mut taken = 0;
            for &(j, d) in &nn {
                if j == i || taken == k {
                    continue;
                }
                sum += d;
                taken += 1;
            }
            sum / taken.max(1) as f64
        })
        .collect()
}

/// Statistical outlier removal: keeps points whose mean distance to their `k`
/// nearest neighbours is at most `mean + sigma·std` of that statistic over the
/// whole cloud (population standard deviation).
pub fn remove_statistical_outliers(cloud: &PointCloud, k: usize, sigma: f64) -> Result<Filtered> {
    if k == 0 {
        return Err(Error::arg("outlier removal needs k >= 1"));
    }
    if cloud.len() <= k {
        return Err(Error::arg(format!(
            "outlier removal with k = {k} needs more than {k} points, got {}",
            cloud.len()
        )));
    }
    let index = SpatialIndex::new(cloud);
    let stats = mean_knn_distances(cloud, &index, k);
    let threshold = sor_threshold(&stats, sigma);
    let kept: Vec<usize> = (0..cloud.len()).filter(|&i| stats[i] <= threshold).collect();
    Ok(Filtered {
        cloud: cloud.select(&kept),
        kept,
    })
}

/// `mean + sigma·std`, padded by a relative 1e-12 so that a cloud whose
/// statistics are all equal loses nothing to rounding in the mean.
pub fn sor_threshold(stats: &[f64], sigma: f64) -> f64 {
    let n = stats.len() as f64;
    let mean = stats.iter().sum::<f64>() / n;
    let var = stats.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / n;
    let t = mean + sigma * var.sqrt();
    t + 1e-12 * t.abs()
}

/// Output of [`voxel_downsample`].
#[derive(Debug, Clone)]
pub struct Downsampled {
    pub cloud: PointCloud,
    /// For each input point, the output point it was merged into.
    pub assignment: Vec<usize>,
}

pub fn voxel_key(p: &Point3<f64>, voxel: f64) -> [i64; 3] {
    [
        (p.x / voxel).floor() as i64,
        (p.y / voxel).floor() as i64,
        (p.z / voxel).floor() as i64,
    ]
}

/// Replaces the points of every occupied voxel by their centroid. Scalar
/// channels are averaged the same way; vector channels are dropped. Output
/// points are ordered by voxel key.
pub fn voxel_downsample(cloud: &PointCloud, voxel: f64) -> Result<Downsampled> {
    if !(voxel > 0.0 && voxel.is_finite()) {
        return Err(Error::arg(format!("voxel size must be positive, got {voxel}")));
    }
    let keys: Vec<[i64; 3]> = cloud.points().iter().map(|p| voxel_key(p, voxel)).collect();
    let mut order: Vec<usize> = (0..cloud.len()).collect();
    order.sort_unstable_by(|&a, &b| keys[a].cmp(&keys[b]).then(a.cmp(&b)));

    let mut assignment = vec![0usize; cloud.len()];
    let mut groups: Vec<(usize, usize)> = Vec::new();
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && keys[order[end]] == keys[order[start]] {
            end += 1;
        }
        for &i in &order[start..end] {
            assignment[i] = groups.len();
        }
        groups.push((start, end));
        start = end;
    }

    let mean = |vals: &dyn Fn(usize) -> f64, s: usize, e: usize| {
        order[s..e].iter().map(|&i| vals(i)).sum::<f64>() / (e - s) as f64
    };
    let points: Vec<Point3<f64>> = groups
        .iter()
        .map(|&(s, e)| {
            let pts = cloud.points();
            Point3::new(
                mean(&|i| pts[i].x, s, e),
                mean(&|i| pts[i].y, s, e),
                mean(&|i| pts[i].z, s, e),
            )
        })
        .collect();
    let mut out = PointCloud::from_trusted(points);
    for ch in cloud.channels() {
        if let ChannelData::Scalar(v) = &ch.data {
            let avg = groups.iter().map(|&(s, e)| mean(&|i| v[i], s, e)).collect();
            out.set_channel(ch.name.clone(), ChannelData::Scalar(avg))?;
        }
    }
    Ok(Downsampled {
        cloud: out,
        assignment,
    })
}

/// Cloth-simulation floor filter parameters.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CsfParams {
    /// Node pitch of the cloth grid (m).
    pub cloth_resolution: f64,
    pub iterations: usize,
    /// Vertical distance to the settled cloth below which a point is floor (m).
    pub class_threshold: f64,
    /// Weight pulling each node toward the mean of its 4-neighbours.
    pub rigidness: f64,
    /// Fraction of the remaining gap to its target a node closes per step.
    pub step: f64,
    /// Fraction of occupied cloth cells whose data must reach floor level
    /// before any floor is reported.
    pub min_floor_support: f64,
}

impl Default for CsfParams {
    fn default() -> Self {
        CsfParams {
            cloth_resolution: 1.0,
            iterations: 500,
            class_threshold: 0.5,
            rigidness: 0.3,
            step: 0.5,
            min_floor_support: 0.5,
        }
    }
}

impl CsfParams {
    /// Defaults with the cloth pitch set to 50 point spacings.
    pub fn for_spacing(ps: f64) -> Self {
        CsfParams {
            cloth_resolution: 50.0 * ps,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let pos = |v: f64| v > 0.0 && v.is_finite();
        if !pos(self.cloth_resolution) || !pos(self.class_threshold) || self.iterations == 0 {
            return Err(Error::arg("CSF resolution, threshold and iterations must be positive"));
        }
        if !(0.0..1.0).contains(&self.rigidness) || !(self.step > 0.0 && self.step <= 1.0) {
            return Err(Error::arg("CSF rigidness must be in [0, 1) and step in (0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.min_floor_support) {
            return Err(Error::arg("CSF min_floor_support must be in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct CsfResult {
    pub kept: Filtered,
    pub floor_indices: Vec<usize>,
    /// Set when the cloud could not be draped (vertical sheet, too small a
    /// footprint); everything is kept in that case.
    pub degenerate: bool,
    pub iterations_run: usize,
}

struct Cloth {
    x0: f64,
    y0: f64,
    res: f64,
    nx: usize,
    ny: usize,
    h: Vec<f64>,
}

impl Cloth {
    fn at(&self, i: usize, j: usize) -> f64 {
        self.h[j * self.nx + i]
    }

    /// Bilinear cloth height under (x, y).
    fn interpolate(&self, x: f64, y: f64) -> f64 {
        let fx = ((x - self.x0) / self.res).clamp(0.0, (self.nx - 1) as f64);
        let fy = ((y - self.y0) / self.res).clamp(0.0, (self.ny - 1) as f64);
        let i = (fx.floor() as usize).min(self.nx - 2);
        let j = (fy.floor() as usize).min(self.ny - 2);
        let (tx, ty) = (fx - i as f64, fy - j as f64);
        let a = self.at(i, j) * (1.0 - tx) + self.at(i + 1, j) * tx;
        let b = self.at(i, j + 1) * (1.0 - tx) + self.at(i + 1, j + 1) * tx;
        a * (1.0 - ty) + b * ty
    }

    fn nearest(&self, x: f64, y: f64) -> usize {
        let i = (((x - self.x0) / self.res).round().max(0.0) as usize).min(self.nx - 1);
        let j = (((y - self.y0) / self.res).round().max(0.0) as usize).min(self.ny - 1);
        j * self.nx + i
    }
}

/// Removes the floor by draping a cloth over the z-inverted cloud.
///
/// Each node's target is the highest inverted point whose nearest node it is.
/// Nodes start above the cloud and every Jacobi step moves them `step` of the
/// way to their target, blends in `rigidness` of the neighbour mean, and never
/// lets them sink below the target. Points within `class_threshold`
/// (vertically) of the settled cloth are floor, provided their cell's data
/// reaches the floor level and such cells make up at least
/// `min_floor_support` of the occupied cells.
pub fn remove_floor_csf(cloud: &PointCloud, params: &CsfParams) -> Result<CsfResult> {
    params.validate()?;
    if cloud.is_empty() {
        return Err(Error::arg("floor removal on an empty cloud"));
    }
    let all = || CsfResult {
        kept: Filtered {
            cloud: cloud.clone(),
            kept: (0..cloud.len()).collect(),
        },
        floor_indices: Vec::new(),
        degenerate: true,
        iterations_run: 0,
    };
    let (lo, hi) = cloud.bounds().unwrap();
    if xy_is_degenerate(cloud) {
        log::warn!("floor removal skipped: cloud footprint is degenerate in XY");
        return Ok(all());
    }
    let res = params.cloth_resolution;
    let nx = ((hi.x - lo.x) / res).ceil() as usize + 1;
    let ny = ((hi.y - lo.y) / res).ceil() as usize + 1;
    if nx < 2 || ny < 2 {
        log::warn!("floor removal skipped: cloth grid would be {nx}x{ny}");
        return Ok(all());
    }

    let inv: Vec<f64> = cloud.points().iter().map(|p| -p.z).collect();
    let max_h = inv.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut cloth = Cloth {
        x0: lo.x,
        y0: lo.y,
        res,
        nx,
        ny,
        h: vec![max_h + res; nx * ny],
    };
    let mut target = vec![f64::NEG_INFINITY; nx * ny];
    let node_of: Vec<usize> = cloud.points().iter().map(|p| cloth.nearest(p.x, p.y)).collect();
    for (i, &n) in node_of.iter().enumerate() {
        target[n] = target[n].max(inv[i]);
    }
    let has_target: Vec<bool> = target.iter().map(|t| t.is_finite()).collect();

    let (w, a) = (params.rigidness, params.step);
    let mut next = cloth.h.clone();
    let mut iterations_run = 0;
    for _ in 0..params.iterations {
        iterations_run += 1;
        let mut max_delta: f64 = 0.0;
        for j in 0..ny {
            for i in 0..nx {
                let k = j * nx + i;
                let z = cloth.h[k];
                let mut sum = 0.0;
                let mut cnt = 0.0;
                if i > 0 {
                    sum += cloth.h[k - 1];
                    cnt += 1.0;
                }
                if i + 1 < nx {
                    sum += cloth.h[k + 1];
                    cnt += 1.0;
                }
                if j > 0 {
                    sum += cloth.h[k - nx];
                    cnt += 1.0;
                }
                if j + 1 < ny {
                    sum += cloth.h[k + nx];
                    cnt += 1.0;
                }
                let m = sum / cnt;
                let z_new = if has_target[k] {
                    let pulled = z - a * (z - target[k]);
                    ((1.0 - w) * pulled + w * m).max(target[k])
                } else {
                    (1.0 - w) * z + w * m
                };
                max_delta = max_delta.max((z_new - z).abs());
                next[k] = z_new;
            }
        }
        std::mem::swap(&mut cloth.h, &mut next);
        if max_delta < 1e-4 {
            break;
        }
    }

    let mut occupied: Vec<f64> = target.iter().cloned().filter(|t| t.is_finite()).collect();
    occupied.sort_by(f64::total_cmp);
    let floor_level = occupied[((occupied.len() as f64 * 0.99).ceil() as usize).clamp(1, occupied.len()) - 1];
    let thr = params.class_threshold;
    let supported: Vec<bool> = target.iter().map(|&t| t >= floor_level - thr).collect();
    let support = supported.iter().filter(|&&s| s).count() as f64 / occupied.len() as f64;

    let mut floor = Vec::new();
    let mut kept = Vec::new();
    for (i, p) in cloud.points().iter().enumerate() {
        let is_floor = support >= params.min_floor_support
            && supported[node_of[i]]
            && (inv[i] - cloth.interpolate(p.x, p.y)).abs() <= thr;
        if is_floor {
            floor.push(i);
        } else {
            kept.push(i);
        }
    }
    if support < params.min_floor_support {
        log::info!("no floor found: {:.0}% of cloth cells reach floor level", support * 100.0);
    }
    Ok(CsfResult {
        kept: Filtered {
            cloud: cloud.select(&kept),
            kept,
        },
        floor_indices: floor,
        degenerate: false,
        iterations_run,
    })
}

/// True when the XY footprint is (close to) a line, e.g. a single vertical wall.
fn xy_is_degenerate(cloud: &PointCloud) -> bool {
    let n = cloud.len() as f64;
    let c = cloud.centroid().unwrap();
    let mut m = Matrix2::zeros();
    for p in cloud.points() {
        let d = nalgebra::Vector2::new(p.x - c.x, p.y - c.y);
        m += d * d.transpose();
    }
    m /= n;
    let e = m.symmetric_eigenvalues();
    let (lmin, lmax) = (e[0].min(e[1]), e[0].max(e[1]));
    lmax <= 0.0 || lmin <= 1e-8 * lmax
}
