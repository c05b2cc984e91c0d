use crate::cloud::PointCloud;
use crate::cluster::{ClusterLabels, DisjointSets};
use crate::error::{Error, Result};
use crate::index::SpatialIndex;

/// Connected components of the graph joining member points at distance
/// `<= cell`. Labels are parallel to `members` and numbered by first
/// appearance.
pub fn euclidean_components(cloud: &PointCloud, members: &[usize], cell: f64) -> Result<ClusterLabels> {
    if !(cell > 0.0 && cell.is_finite()) {
        return Err(Error::arg(format!("component cell must be positive, got {cell}")));
    }
    if members.is_empty() {
        return Ok(ClusterLabels::all_noise(0));
    }
    let pts: Vec<_> = members.iter().map(|&i| cloud.point(i)).collect();
    let index = SpatialIndex::from_points(&pts);
    let mut sets = DisjointSets::new(pts.len());
    for (a, p) in pts.iter().enumerate() {
        index.for_each_within(p, cell, |b, _| {
            if b > a {
                sets.union(a, b);
            }
        });
    }
    let raw: Vec<Option<usize>> = (0..pts.len()).map(|a| Some(sets.find(a))).collect();
    Ok(ClusterLabels::canonical(&raw))
}
