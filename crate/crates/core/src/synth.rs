//! Synthetic tunnels with planted discontinuity facets, rock bolts, cables
//! and a floor, plus the exact ground truth of every generated point.
//!
//! The tunnel runs along +y from 0 to `length`, with walls at
//! `x = ±width/2`, the floor at `z = 0` and the roof at `z = height`.
//! Facets of steep sets sit on the walls and facets of flat sets on the roof,
//! always at least 0.5 m above the floor.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Point3, Rotation3, Unit, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::cloud::PointCloud;
use crate::error::{Error, Location, Result};
use crate::orientation::{orientation_of, vector_from};

/// Dip / dip direction of the six sets of the reference mine.
pub const REFERENCE_SETS: [(f64, f64); 6] = [(68.0, 114.0), (75.0, 235.0), (70.0, 315.0), (62.0, 276.0), (35.0, 112.0), (66.0, 58.0)];

const FLOOR_CLEARANCE: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TunnelSpec {
    pub width: f64,
    pub height: f64,
    pub length: f64,
}

impl Default for TunnelSpec {
    fn default() -> Self {
        TunnelSpec { width: 6.0, height: 5.0, length: 12.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SetSpec {
    pub dip: f64,
    pub dip_direction: f64,
    pub facets: usize,
    /// Side of the square facet in metres.
    pub facet_size: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoltSpec {
    pub base: [f64; 3],
    /// Direction from the rock into the excavation.
    pub axis: [f64; 3],
    pub length: f64,
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AutoBoltSpec {
    pub count: usize,
    /// Indices into `sets` whose facets receive bolts.
    pub host_sets: Vec<usize>,
    pub length_min: f64,
    pub length_max: f64,
    pub radius: f64,
    /// Maximum angle in degrees between a bolt and its facet normal.
    pub max_tilt: f64,
    pub spacing: f64,
    pub edge_margin: f64,
}

impl Default for AutoBoltSpec {
    fn default() -> Self {
        AutoBoltSpec {
            count: 0,
            host_sets: Vec::new(),
            length_min: 0.05,
            length_max: 0.25,
            radius: 0.01,
            max_tilt: 10.0,
            spacing: 0.4,
            edge_margin: 0.1,
        }
    }
}

/// Straight cables hung along the tunnel at half height: long thin
/// high-curvature clutter that is not a bolt.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RidgeSpec {
    pub count: usize,
    pub radius: f64,
}

impl Default for RidgeSpec {
    fn default() -> Self {
        RidgeSpec { count: 0, radius: 0.015 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub seed: u64,
    pub tunnel: TunnelSpec,
    pub sets: Vec<SetSpec>,
    pub bolts: Vec<BoltSpec>,
    pub auto_bolts: AutoBoltSpec,
    pub ridges: RidgeSpec,
    /// Standard deviation of isotropic Gaussian noise, metres.
    pub noise_sigma: f64,
    /// Points per square metre on facets, bolts and cables.
    pub density: f64,
    pub floor: bool,
    /// Floor density; `None` uses `density`.
    pub floor_density: Option<f64>,
    /// Minimum clearance between facet bounding spheres, metres.
    pub facet_gap: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            seed: 0,
            tunnel: TunnelSpec::default(),
            sets: Vec::new(),
            bolts: Vec::new(),
            auto_bolts: AutoBoltSpec::default(),
            ridges: RidgeSpec::default(),
            noise_sigma: 0.001,
            density: 20_000.0,
            floor: true,
            floor_density: None,
            facet_gap: 0.3,
        }
    }
}

impl SceneSpec {
    pub fn from_toml(text: &str) -> Result<SceneSpec> {
        let spec: SceneSpec = toml::from_str(text).map_err(|e| Error::Spec(format!("scene spec: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<SceneSpec> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        SceneSpec::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scene spec serializes")
    }

    /// Six reference sets, `facets_per_set` 1 m facets each, no bolts.
    pub fn structure_benchmark(facets_per_set: usize, noise_sigma: f64, density: f64, seed: u64) -> SceneSpec {
        let total = 6 * facets_per_set;
        SceneSpec {
            seed,
            tunnel: TunnelSpec { width: 6.0, height: 5.0, length: (total as f64 * 0.75).max(8.0) },
            sets: REFERENCE_SETS
                .iter()
                .map(|&(dip, dd)| SetSpec { dip, dip_direction: dd, facets: facets_per_set, facet_size: 1.0 })
                .collect(),
            noise_sigma,
            density,
            floor: true,
            floor_density: Some(1_000.0),
            ..SceneSpec::default()
        }
    }

    /// Six reference sets with bolts on sets 1, 3, 4 and 6 (0-based 0, 2, 3,
    /// 5) and hanging cables.
    pub fn bolt_benchmark(bolts: usize, noise_sigma: f64, density: f64, seed: u64) -> SceneSpec {
        let facets = [4, 2, 4, 4, 2, 4];
        SceneSpec {
            seed,
            tunnel: TunnelSpec { width: 6.0, height: 5.0, length: 14.0 },
            sets: REFERENCE_SETS
                .iter()
                .zip(facets)
                .map(|(&(dip, dd), f)| SetSpec { dip, dip_direction: dd, facets: f, facet_size: 1.2 })
                .collect(),
            auto_bolts: AutoBoltSpec { count: bolts, host_sets: vec![0, 2, 3, 5], ..AutoBoltSpec::default() },
            ridges: RidgeSpec { count: 2, radius: 0.015 },
            noise_sigma,
            density,
            floor: true,
            floor_density: Some(1_000.0),
            ..SceneSpec::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Spec(m));
        let t = &self.tunnel;
        if !(t.width > 0.0 && t.height > FLOOR_CLEARANCE && t.length > 0.0) {
            return bad(format!("tunnel dimensions must be positive with height > {FLOOR_CLEARANCE} m"));
        }
        if !(self.density > 0.0) || self.floor_density.is_some_and(|d| !(d > 0.0)) {
            return bad("densities must be > 0".into());
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise_sigma must be >= 0".into());
        }
        if !(self.facet_gap >= 0.0) {
            return bad("facet_gap must be >= 0".into());
        }
        for (k, s) in self.sets.iter().enumerate() {
            if !(0.0..=90.0).contains(&s.dip) || !(0.0..360.0).contains(&s.dip_direction) {
                return bad(format!("set {k}: dip must be in [0, 90] and dip direction in [0, 360)"));
            }
            if !(s.facet_size > 0.0) {
                return bad(format!("set {k}: facet_size must be > 0"));
            }
        }
        for (k, b) in self.bolts.iter().enumerate() {
            if !(b.length > 0.0 && b.length <= 1.0) || !(b.radius > 0.0) {
                return bad(format!("bolt {k}: length must be in (0, 1] and radius > 0"));
            }
            if Vector3::from(b.axis).norm() < 1e-9 {
                return bad(format!("bolt {k}: zero axis"));
            }
        }
        let a = &self.auto_bolts;
        if a.count > 0 {
            if !(a.length_min > 0.0 && a.length_min <= a.length_max && a.length_max <= 1.0) {
                return bad("auto_bolts: need 0 < length_min <= length_max <= 1".into());
            }
            if !(a.radius > 0.0) || !(0.0..90.0).contains(&a.max_tilt) || !(a.spacing >= 0.0 && a.edge_margin >= 0.0) {
                return bad("auto_bolts: radius > 0, max_tilt in [0, 90), spacing and edge_margin >= 0".into());
            }
            if a.host_sets.is_empty() || a.host_sets.iter().any(|&h| h >= self.sets.len() || self.sets[h].facets == 0) {
                return bad("auto_bolts: host_sets must name sets that have facets".into());
            }
        }
        if !(self.ridges.radius > 0.0) && self.ridges.count > 0 {
            return bad("ridges: radius must be > 0".into());
        }
        for i in 0..self.bolts.len() {
            for j in i + 1..self.bolts.len() {
                let (p, q) = (&self.bolts[i], &self.bolts[j]);
                if segment_distance(p, q) < p.radius + q.radius {
                    return bad(format!("bolts {i} and {j} overlap"));
                }
            }
        }
        Ok(())
    }
}

fn segment_distance(a: &BoltSpec, b: &BoltSpec) -> f64 {
    let (p0, u) = (Point3::from(a.base), Vector3::from(a.axis).normalize() * a.length);
    let (q0, v) = (Point3::from(b.base), Vector3::from(b.axis).normalize() * b.length);
    // Dense sampling is exact enough for an overlap check at bolt scale.
    let mut best = f64::INFINITY;
    for i in 0..=64 {
        let p = p0 + u * (i as f64 / 64.0);
        let w = p - q0;
        let s = (w.dot(&v) / v.norm_squared()).clamp(0.0, 1.0);
        best = best.min((p - (q0 + v * s)).norm());
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum PointLabel {
    Floor,
    Facet { set_id: usize, plane_id: usize },
    Bolt { bolt_id: usize },
    Noise,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlaneTruth {
    pub plane_id: usize,
    pub set_id: usize,
    /// Unit normal pointing into the tunnel.
    pub normal: Vector3<f64>,
    pub dip: f64,
    pub dip_direction: f64,
    pub centroid: Point3<f64>,
    pub size: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoltTruth {
    pub bolt_id: usize,
    pub base: Point3<f64>,
    pub axis: Vector3<f64>,
    pub length: f64,
    pub radius: f64,
    pub host_plane: Option<usize>,
    /// Angle between axis and host facet normal, degrees.
    pub deviation: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub labels: Vec<PointLabel>,
    pub planes: Vec<PlaneTruth>,
    pub bolts: Vec<BoltTruth>,
    /// Planted (dip, dip direction) per set.
    pub sets: Vec<(f64, f64)>,
}

impl GroundTruth {
    fn groups(&self, n: usize, key: impl Fn(&PointLabel) -> Option<usize>) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); n];
        for (i, l) in self.labels.iter().enumerate() {
            if let Some(k) = key(l) {
                out[k].push(i);
            }
        }
        out
    }

    pub fn bolt_members(&self) -> Vec<Vec<usize>> {
        self.groups(self.bolts.len(), |l| match l {
            PointLabel::Bolt { bolt_id } => Some(*bolt_id),
            _ => None,
        })
    }

    pub fn plane_members(&self) -> Vec<Vec<usize>> {
        self.groups(self.planes.len(), |l| match l {
            PointLabel::Facet { plane_id, .. } => Some(*plane_id),
            _ => None,
        })
    }

    pub fn set_members(&self) -> Vec<Vec<usize>> {
        self.groups(self.sets.len(), |l| match l {
            PointLabel::Facet { set_id, .. } => Some(*set_id),
            _ => None,
        })
    }

    /// Keeps the labels of `indices` in order (for filtered clouds).
    pub fn select(&self, indices: &[usize]) -> GroundTruth {
        GroundTruth { labels: indices.iter().map(|&i| self.labels[i]).collect(), ..self.clone() }
    }

    /// Sidecar table: `index label set plane bolt`, `-` for empty fields.
    pub fn label_table(&self) -> String {
        let mut s = String::from("# index label set plane bolt\n");
        for (i, l) in self.labels.iter().enumerate() {
            let _ = match l {
                PointLabel::Floor => writeln!(s, "{i} floor - - -"),
                PointLabel::Noise => writeln!(s, "{i} noise - - -"),
                PointLabel::Facet { set_id, plane_id } => writeln!(s, "{i} facet {set_id} {plane_id} -"),
                PointLabel::Bolt { bolt_id } => writeln!(s, "{i} bolt - - {bolt_id}"),
            };
        }
        s
    }

    pub fn parse_label_table(text: &str) -> Result<Vec<PointLabel>> {
        let mut out = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |m: &str| Error::Parse { location: Location::Line(ln + 1), message: m.into() };
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 5 {
                return Err(err("expected 5 fields"));
            }
            let idx: usize = f[0].parse().map_err(|_| err("bad index"))?;
            if idx != out.len() {
                return Err(err("indices must be consecutive from 0"));
            }
            let num = |s: &str| s.parse::<usize>().map_err(|_| err("bad id"));
            out.push(match f[1] {
                "floor" => PointLabel::Floor,
                "noise" => PointLabel::Noise,
                "facet" => PointLabel::Facet { set_id: num(f[2])?, plane_id: num(f[3])? },
                "bolt" => PointLabel::Bolt { bolt_id: num(f[4])? },
                _ => return Err(err("unknown label")),
            });
        }
        Ok(out)
    }

    pub fn write_label_table(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.label_table()).map_err(|e| Error::io(path, e))
    }
}

struct Facet {
    plane_id: usize,
    set_id: usize,
    centre: Point3<f64>,
    normal: Vector3<f64>,
    u: Vector3<f64>,
    v: Vector3<f64>,
    half: f64,
}

/// Jittered grid over `[0, a) × [0, b)` at the given pitch.
fn jittered(a: f64, b: f64, pitch: f64, rng: &mut ChaCha8Rng) -> Vec<(f64, f64)> {
    let (na, nb) = ((a / pitch).round().max(1.0) as usize, (b / pitch).round().max(1.0) as usize);
    let (da, db) = (a / na as f64, b / nb as f64);
    let mut out = Vec::with_capacity(na * nb);
    for i in 0..na {
        for j in 0..nb {
            out.push(((i as f64 + rng.random::<f64>()) * da, (j as f64 + rng.random::<f64>()) * db));
        }
    }
    out
}

fn frame(n: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let h = Vector3::z().cross(n);
    let u = if h.norm() > 1e-6 { h.normalize() } else { Vector3::x() };
    (u, n.cross(&u))
}

/// Samples the scene. Deterministic for a given spec.
pub fn generate_scene(spec: &SceneSpec) -> Result<(PointCloud, GroundTruth)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let t = spec.tunnel;
    let pitch = 1.0 / spec.density.sqrt();

    let facets = place_facets(spec, &mut rng)?;
    let mut bolt_specs: Vec<(BoltSpec, Option<usize>)> = spec.bolts.iter().map(|b| (*b, host_of(b, &facets))).collect();
    place_auto_bolts(spec, &facets, &mut bolt_specs, &mut rng)?;

    let mut pts: Vec<Point3<f64>> = Vec::new();
    let mut labels: Vec<PointLabel> = Vec::new();

    if spec.floor {
        let fp = 1.0 / spec.floor_density.unwrap_or(spec.density).sqrt();
        for (x, y) in jittered(t.width, t.length, fp, &mut rng) {
            pts.push(Point3::new(x - t.width / 2.0, y, 0.0));
            labels.push(PointLabel::Floor);
        }
    }

    for f in &facets {
        let size = 2.0 * f.half;
        for (s, q) in jittered(size, size, pitch, &mut rng) {
            let p = f.centre + f.u * (s - f.half) + f.v * (q - f.half);
            // Rock under a bolt head is hidden by the bolt.
            let covered = bolt_specs.iter().any(|(b, h)| {
                *h == Some(f.plane_id) && {
                    let d = p - Point3::from(b.base);
                    (d - f.normal * d.dot(&f.normal)).norm() < b.radius
                }
            });
            if !covered {
                pts.push(p);
                labels.push(PointLabel::Facet { set_id: f.set_id, plane_id: f.plane_id });
            }
        }
    }

    for (k, (b, _)) in bolt_specs.iter().enumerate() {
        for p in sample_cylinder(Point3::from(b.base), Vector3::from(b.axis), b.length, b.radius, pitch, true, &mut rng) {
            pts.push(p);
            labels.push(PointLabel::Bolt { bolt_id: k });
        }
    }

    for k in 0..spec.ridges.count {
        let x = -t.width / 4.0 + (k as f64 + 0.5) * (t.width / 2.0) / spec.ridges.count as f64;
        let base = Point3::new(x, 0.0, t.height / 2.0);
        for p in sample_cylinder(base, Vector3::y(), t.length, spec.ridges.radius, pitch, false, &mut rng) {
            pts.push(p);
            labels.push(PointLabel::Noise);
        }
    }
    check_ridge_clearance(spec, &facets, &bolt_specs)?;

    if spec.noise_sigma > 0.0 {
        let g = Normal::new(0.0, spec.noise_sigma).unwrap();
        for p in pts.iter_mut() {
            *p += Vector3::new(g.sample(&mut rng), g.sample(&mut rng), g.sample(&mut rng));
        }
    }

    let planes = facets
        .iter()
        .map(|f| {
            let o = orientation_of(&f.normal).expect("unit normal");
            PlaneTruth {
                plane_id: f.plane_id,
                set_id: f.set_id,
                normal: f.normal,
                dip: o.dip,
                dip_direction: o.dip_direction,
                centroid: f.centre,
                size: 2.0 * f.half,
            }
        })
        .collect();
    let bolts = bolt_specs
        .iter()
        .enumerate()
        .map(|(k, (b, host))| {
            let axis = Vector3::from(b.axis).normalize();
            BoltTruth {
                bolt_id: k,
                base: Point3::from(b.base),
                axis,
                length: b.length,
                radius: b.radius,
                host_plane: *host,
                deviation: host.map(|h| axis.dot(&facets[h].normal).clamp(-1.0, 1.0).acos().to_degrees()),
            }
        })
        .collect();
    let truth = GroundTruth {
        labels,
        planes,
        bolts,
        sets: spec.sets.iter().map(|s| (s.dip, s.dip_direction)).collect(),
    };
    Ok((PointCloud::new(pts)?, truth))
}

fn host_of(b: &BoltSpec, facets: &[Facet]) -> Option<usize> {
    let base = Point3::from(b.base);
    facets
        .iter()
        .find(|f| {
            let d = base - f.centre;
            d.dot(&f.normal).abs() < 1e-3 && d.dot(&f.u).abs() <= f.half && d.dot(&f.v).abs() <= f.half
        })
        .map(|f| f.plane_id)
}

fn place_facets(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Result<Vec<Facet>> {
    let t = spec.tunnel;
    let mut out: Vec<Facet> = Vec::new();
    for (set_id, s) in spec.sets.iter().enumerate() {
        let n = vector_from(s.dip, s.dip_direction);
        let half = s.facet_size / 2.0;
        let reach = half * std::f64::consts::SQRT_2;
        let on_roof = n.z.abs() >= n.x.abs();
        for _ in 0..s.facets {
            let mut placed = None;
            for _ in 0..20_000 {
                let y = rng.random_range(0.0..1.0) * (t.length - 2.0 * reach) + reach;
                let (centre, inward) = if on_roof {
                    let span = t.width / 2.0 - reach;
                    if span < 0.0 {
                        break;
                    }
                    (Point3::new(rng.random_range(-1.0..=1.0) * span, y, t.height), -Vector3::z())
                } else {
                    let lo = FLOOR_CLEARANCE + reach;
                    let hi = t.height - reach;
                    if hi < lo {
                        break;
                    }
                    let left = rng.random::<bool>();
                    let x = if left { -t.width / 2.0 } else { t.width / 2.0 };
                    let inward = if left { Vector3::x() } else { -Vector3::x() };
                    (Point3::new(x, y, rng.random_range(lo..=hi)), inward)
                };
                if t.length < 2.0 * reach {
                    break;
                }
                let clear = out.iter().all(|f| {
                    (f.centre - centre).norm() >= f.half * std::f64::consts::SQRT_2 + reach + spec.facet_gap
                });
                if clear {
                    placed = Some((centre, inward));
                    break;
                }
            }
            let Some((centre, inward)) = placed else {
                return Err(Error::Spec(format!(
                    "cannot place facet {} of set {set_id} without overlap; enlarge the tunnel or reduce facets",
                    out.len()
                )));
            };
            let normal = if n.dot(&inward) < 0.0 { -n } else { n };
            let (u0, v0) = frame(&normal);
            let spin = Rotation3::from_axis_angle(&Unit::new_normalize(normal), rng.random_range(0.0..std::f64::consts::FRAC_PI_2));
            out.push(Facet { plane_id: out.len(), set_id, centre, normal, u: spin * u0, v: spin * v0, half });
        }
    }
    Ok(out)
}

fn place_auto_bolts(spec: &SceneSpec, facets: &[Facet], bolts: &mut Vec<(BoltSpec, Option<usize>)>, rng: &mut ChaCha8Rng) -> Result<()> {
    let a = &spec.auto_bolts;
    if a.count == 0 {
        return Ok(());
    }
    let hosts: Vec<&Facet> = facets.iter().filter(|f| a.host_sets.contains(&f.set_id)).collect();
    for k in 0..a.count {
        let mut done = false;
        for attempt in 0..20_000 {
            let f = hosts[(k + attempt) % hosts.len()];
            let span = f.half - a.edge_margin - a.radius;
            if span <= 0.0 {
                continue;
            }
            let base = f.centre + f.u * rng.random_range(-span..=span) + f.v * rng.random_range(-span..=span);
            if bolts.iter().any(|(b, _)| (Point3::from(b.base) - base).norm() < a.spacing) {
                continue;
            }
            let tilt = rng.random_range(0.0..=a.max_tilt).to_radians();
            let az = rng.random_range(0.0..std::f64::consts::TAU);
            let axis = f.normal * tilt.cos() + (f.u * az.cos() + f.v * az.sin()) * tilt.sin();
            let length = rng.random_range(a.length_min..=a.length_max);
            bolts.push((
                BoltSpec { base: base.coords.into(), axis: axis.into(), length, radius: a.radius },
                Some(f.plane_id),
            ));
            done = true;
            break;
        }
        if !done {
            return Err(Error::Spec(format!("cannot place auto bolt {k}: host facets are full")));
        }
    }
    Ok(())
}

fn check_ridge_clearance(spec: &SceneSpec, facets: &[Facet], bolts: &[(BoltSpec, Option<usize>)]) -> Result<()> {
    let t = spec.tunnel;
    for k in 0..spec.ridges.count {
        let x = -t.width / 4.0 + (k as f64 + 0.5) * (t.width / 2.0) / spec.ridges.count as f64;
        let line = |p: Point3<f64>| ((p.x - x).powi(2) + (p.z - t.height / 2.0).powi(2)).sqrt();
        for f in facets {
            if line(f.centre) < f.half * std::f64::consts::SQRT_2 + spec.ridges.radius {
                return Err(Error::Spec(format!("cable {k} intersects facet {}", f.plane_id)));
            }
        }
        for (j, (b, _)) in bolts.iter().enumerate() {
            let tip = Point3::from(b.base) + Vector3::from(b.axis).normalize() * b.length;
            if line(Point3::from(b.base)).min(line(tip)) < b.radius + spec.ridges.radius {
                return Err(Error::Spec(format!("cable {k} intersects bolt {j}")));
            }
        }
    }
    Ok(())
}

/// Jittered samples on the lateral surface of a cylinder, plus the far end
/// cap when `cap` is set.
pub fn sample_cylinder(
    base: Point3<f64>,
    axis: Vector3<f64>,
    length: f64,
    radius: f64,
    pitch: f64,
    cap: bool,
    rng: &mut ChaCha8Rng,
) -> Vec<Point3<f64>> {
    let a = axis.normalize();
    let (u, v) = frame(&a);
    let circ = std::f64::consts::TAU * radius;
    let mut out: Vec<Point3<f64>> = jittered(circ, length, pitch, rng)
        .into_iter()
        .map(|(c, s)| {
            let th = c / radius;
            base + a * s + (u * th.cos() + v * th.sin()) * radius
        })
        .collect();
    if cap {
        for (x, y) in jittered(2.0 * radius, 2.0 * radius, pitch, rng) {
            let (x, y) = (x - radius, y - radius);
            if x * x + y * y <= radius * radius {
                out.push(base + a * length + u * x + v * y);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::descriptors::{covariance, sorted_eigen};

    #[test]
    fn floor_only_scene() {
        let spec = SceneSpec { density: 400.0, ..SceneSpec::default() };
        let (c, t) = generate_scene(&spec).unwrap();
        assert!(c.len() > 0);
        assert!(t.labels.iter().all(|l| *l == PointLabel::Floor));
        assert_eq!(t.labels.len(), c.len());
    }

    #[test]
    fn deterministic_under_seed() {
        let spec = SceneSpec::bolt_benchmark(8, 0.001, 2_000.0, 11);
        let (a, ta) = generate_scene(&spec).unwrap();
        let (b, tb) = generate_scene(&spec).unwrap();
        assert_eq!(a.points(), b.points());
        assert_eq!(ta, tb);
        let other = generate_scene(&SceneSpec { seed: 12, ..spec }).unwrap().0;
        assert_ne!(a.points(), other.points());
    }

    fn facet_normal_errors(sigma: f64) -> f64 {
        let spec = SceneSpec::structure_benchmark(5, sigma, 2_500.0, 3);
        let (c, t) = generate_scene(&spec).unwrap();
        assert!(t.planes.len() >= 30);
        let mut worst: f64 = 0.0;
        for (p, members) in t.planes.iter().zip(t.plane_members()) {
            let (_, cov) = covariance(c.points(), &members);
            let (_, vecs) = sorted_eigen(&cov);
            let n: Vector3<f64> = vecs.column(2).into_owned();
            worst = worst.max(crate::orientation::line_angle(&n, &p.normal));
            let o = orientation_of(&p.normal).unwrap();
            let (dip, dd) = t.sets[p.set_id];
            assert!((o.dip - dip).abs() < 1e-9 && crate::orientation::line_angle(&p.normal, &vector_from(dip, dd)) < 1e-6);
        }
        worst
    }

    #[test]
    fn planted_facet_orientation_recoverable() {
        let e0 = facet_normal_errors(0.0);
        let e1 = facet_normal_errors(0.001);
        let e5 = facet_normal_errors(0.005);
        assert!(e0 < 1e-4, "{e0}");
        assert!(e1 < 2.0, "{e1}");
        assert!(e0 <= e1 && e1 <= e5, "{e0} {e1} {e5}");
    }

    #[test]
    fn bolts_planted_on_host_sets() {
        let spec = SceneSpec::bolt_benchmark(50, 0.001, 2_000.0, 5);
        let (c, t) = generate_scene(&spec).unwrap();
        assert_eq!(t.bolts.len(), 50);
        let members = t.bolt_members();
        for (b, m) in t.bolts.iter().zip(&members) {
            let host = &t.planes[b.host_plane.unwrap()];
            assert!([0, 2, 3, 5].contains(&host.set_id));
            assert!(b.deviation.unwrap() <= 10.0 + 1e-9);
            assert!((0.05..=0.25).contains(&b.length));
            assert!(!m.is_empty());
            for &i in m {
                let d = c.point(i) - b.base;
                let s = d.dot(&b.axis);
                assert!(s > -0.01 && s < b.length + 0.01);
            }
        }
        for i in 0..t.bolts.len() {
            for j in i + 1..t.bolts.len() {
                assert!((t.bolts[i].base - t.bolts[j].base).norm() >= 0.4);
            }
        }
        // Labels are exhaustive; every point is at least half a metre above
        // the floor unless it is floor.
        assert_eq!(t.labels.len(), c.len());
        for (p, l) in c.points().iter().zip(&t.labels) {
            if *l != PointLabel::Floor {
                assert!(p.z > FLOOR_CLEARANCE - 0.01);
            }
        }
    }

    #[test]
    fn spec_errors() {
        let overlapping = SceneSpec {
            bolts: vec![
                BoltSpec { base: [0.0, 1.0, 2.0], axis: [1.0, 0.0, 0.0], length: 0.2, radius: 0.01 },
                BoltSpec { base: [0.005, 1.0, 2.0], axis: [1.0, 0.0, 0.0], length: 0.2, radius: 0.01 },
            ],
            ..SceneSpec::default()
        };
        assert!(matches!(overlapping.validate(), Err(Error::Spec(_))));
        let long = SceneSpec {
            bolts: vec![BoltSpec { base: [0.0; 3], axis: [0.0, 0.0, 1.0], length: 1.5, radius: 0.01 }],
            ..SceneSpec::default()
        };
        assert!(matches!(long.validate(), Err(Error::Spec(_))));
        let crowded = SceneSpec {
            tunnel: TunnelSpec { width: 4.0, height: 3.0, length: 3.0 },
            sets: vec![SetSpec { dip: 80.0, dip_direction: 90.0, facets: 20, facet_size: 1.0 }],
            ..SceneSpec::default()
        };
        assert!(matches!(generate_scene(&crowded), Err(Error::Spec(_))));
        assert!(matches!(SceneSpec::from_toml("density = -1.0"), Err(Error::Spec(_))));
        assert!(matches!(SceneSpec::from_toml("bogus = 1"), Err(Error::Spec(_))));
    }

    #[test]
    fn toml_round_trip_and_label_table() {
        let spec = SceneSpec::bolt_benchmark(3, 0.001, 500.0, 9);
        assert_eq!(SceneSpec::from_toml(&spec.to_toml()).unwrap(), spec);
        let text = "seed = 4\ndensity = 300.0\nfloor = true\n[tunnel]\nlength = 6.0\n[[sets]]\ndip = 35.0\ndip_direction = 112.0\nfacets = 2\nfacet_size = 1.0\n";
        let (_, t) = generate_scene(&SceneSpec::from_toml(text).unwrap()).unwrap();
        let table = t.label_table();
        assert!(table.starts_with("# index label set plane bolt\n"));
        assert_eq!(GroundTruth::parse_label_table(&table).unwrap(), t.labels);
        assert!(GroundTruth::parse_label_table("0 facet x 1 -\n").is_err());
    }
}
