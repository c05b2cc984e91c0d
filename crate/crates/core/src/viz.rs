//! Stereonet projection, bolt/set coverage, SVG stereonets and 3D scene
//! export of planes and bolts.

use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use nalgebra::{Point3, Vector3};
use serde::{Deserialize, Serialize};

use crate::bolt_geometry::BoltVector;
use crate::error::{Error, Result};
use crate::orientation::{line_angle, project, vector_from, wrap_degrees};
use crate::structure::{DiscontinuityPlane, DiscontinuitySet};

pub const DEFAULT_CONE_RADIUS: f64 = 15.0;
/// Rendered bolt length and diameter in metres.
pub const BOLT_RENDER_LENGTH: f64 = 2.0;
pub const BOLT_RENDER_DIAMETER: f64 = 0.02;
const PRISM_SIDES: usize = 16;

/// Set colours, cycled by set id.
pub const PALETTE: [[u8; 3]; 12] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
    [227, 119, 194],
    [127, 127, 127],
    [188, 189, 34],
    [23, 190, 207],
    [57, 59, 121],
    [173, 73, 74],
];

pub fn set_colour(set_id: usize) -> [u8; 3] {
    PALETTE[set_id % PALETTE.len()]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PointKind {
    Pole,
    Bolt,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StereonetPoint {
    pub kind: PointKind,
    pub x: f64,
    pub y: f64,
    pub source_id: usize,
    pub set_id: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SetEnvelope {
    pub set_id: usize,
    pub dip: f64,
    pub dip_direction: f64,
    pub cone_radius: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub bolts_outside_all_sets: Vec<usize>,
    pub unsupported_sets: Vec<usize>,
    /// `(set_id, bolts inside its cone)`, in envelope order.
    pub per_set: Vec<(usize, usize)>,
}

/// Equal-angle map shared with clustering.
pub fn stereonet_project(dip: f64, dip_direction: f64) -> (f64, f64) {
    project(dip, dip_direction)
}

/// One pole per plane at azimuth DD, or DD + 180 with `flip`.
pub fn pole_points(planes: &[DiscontinuityPlane], flip: bool) -> Vec<StereonetPoint> {
    planes
        .iter()
        .map(|p| {
            let dd = if flip { wrap_degrees(p.dip_direction + 180.0) } else { p.dip_direction };
            let (x, y) = project(p.dip, dd);
            StereonetPoint { kind: PointKind::Pole, x, y, source_id: p.plane_id, set_id: Some(p.set_id) }
        })
        .collect()
}

pub fn bolt_points(bolts: &[BoltVector]) -> Vec<StereonetPoint> {
    bolts
        .iter()
        .map(|b| {
            let (x, y) = project(b.dip, b.dip_direction);
            StereonetPoint { kind: PointKind::Bolt, x, y, source_id: b.bolt_id, set_id: None }
        })
        .collect()
}

pub fn envelopes_from_sets(sets: &[DiscontinuitySet], cone_radius: f64) -> Result<Vec<SetEnvelope>> {
    if !(cone_radius > 0.0 && cone_radius < 90.0) {
        return Err(Error::arg(format!("cone radius must be in (0, 90), got {cone_radius}")));
    }
    Ok(sets
        .iter()
        .map(|s| SetEnvelope { set_id: s.set_id, dip: s.dip, dip_direction: s.dip_direction, cone_radius })
        .collect())
}

/// A bolt is inside a set when the line angle between its axis and the set's
/// mean pole is at most the cone radius.
pub fn coverage_analysis(bolts: &[BoltVector], envelopes: &[SetEnvelope]) -> CoverageReport {
    let poles: Vec<Vector3<f64>> = envelopes.iter().map(|e| vector_from(e.dip, e.dip_direction)).collect();
    let mut per_set: Vec<(usize, usize)> = envelopes.iter().map(|e| (e.set_id, 0)).collect();
    let mut outside = Vec::new();
    for b in bolts {
        let mut any = false;
        for (k, e) in envelopes.iter().enumerate() {
            if line_angle(&b.axis, &poles[k]) <= e.cone_radius {
                per_set[k].1 += 1;
                any = true;
            }
        }
        if !any {
            outside.push(b.bolt_id);
        }
    }
    CoverageReport {
        bolts_outside_all_sets: outside,
        unsupported_sets: per_set.iter().filter(|(_, n)| *n == 0).map(|(s, _)| *s).collect(),
        per_set,
    }
}

/// Formats with 6 significant digits, trailing zeros trimmed.
pub fn fmt6(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return "0".into();
    }
    let mag = x.abs().log10().floor() as i32;
    let decimals = (5 - mag).max(0) as usize;
    let v = if mag > 5 {
        let scale = 10f64.powi(mag - 5);
        (x / scale).round() * scale
    } else {
        x
    };
    let mut s = format!("{v:.decimals$}");
    if s.contains('.') {
        s = s.trim_end_matches('0').trim_end_matches('.').to_string();
    }
    if s == "-0" {
        s = "0".into();
    }
    s
}

const SIZE: f64 = 800.0;
const CENTRE: f64 = 400.0;
const RADIUS: f64 = 350.0;

fn to_canvas(x: f64, y: f64) -> (String, String) {
    (fmt6(CENTRE + RADIUS * x), fmt6(CENTRE - RADIUS * y))
}

fn hex(c: [u8; 3]) -> String {
    format!("#{:02x}{:02x}{:02x}", c[0], c[1], c[2])
}

/// Projected small circle of angular radius `rho` around the upper-hemisphere
/// direction `(dip, dd)`, clipped later by the primitive. Returns centre and
/// radius in unit-disc coordinates.
fn small_circle(dip: f64, dd: f64, rho: f64) -> (f64, f64, f64) {
    let r1 = ((dip - rho) / 2.0).to_radians().tan();
    let r2 = ((dip + rho) / 2.0).to_radians().tan();
    let (c, rad) = ((r1 + r2) / 2.0, (r2 - r1) / 2.0);
    let a = dd.to_radians();
    (c * a.sin(), c * a.cos(), rad)
}

/// Deterministic SVG stereonet: primitive, 10° polar graticule, poles by set
/// colour, bolts as black diamonds, cone envelopes (with their antipodal part
/// where a cone crosses the primitive) and a legend with plane counts.
pub fn stereonet_svg(poles: &[StereonetPoint], bolts: &[StereonetPoint], envelopes: &[SetEnvelope], flip_poles: bool) -> String {
    let mut s = String::new();
    let _ = writeln!(s, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{0}" height="{0}" viewBox="0 0 {0} {0}">"#,
        fmt6(SIZE)
    );
    let _ = writeln!(
        s,
        r#"<defs><clipPath id="primitive"><circle cx="{0}" cy="{0}" r="{1}"/></clipPath></defs>"#,
        fmt6(CENTRE),
        fmt6(RADIUS)
    );
    let _ = writeln!(s, r#"<rect width="{0}" height="{0}" fill="white"/>"#, fmt6(SIZE));
    let _ = writeln!(s, r##"<g id="graticule" fill="none" stroke="#cccccc" stroke-width="0.5">"##);
    for k in 1..9 {
        let r = (k as f64 * 5.0).to_radians().tan() * RADIUS;
        let _ = writeln!(s, r#"<circle cx="{0}" cy="{0}" r="{1}"/>"#, fmt6(CENTRE), fmt6(r));
    }
    for k in 0..36 {
        let a = (k as f64 * 10.0).to_radians();
        let (x, y) = to_canvas(a.sin(), a.cos());
        let _ = writeln!(s, r#"<line x1="{0}" y1="{0}" x2="{x}" y2="{y}"/>"#, fmt6(CENTRE));
    }
    let _ = writeln!(s, "</g>");
    let _ = writeln!(
        s,
        r#"<circle id="primitive-circle" cx="{0}" cy="{0}" r="{1}" fill="none" stroke="black" stroke-width="1.5"/>"#,
        fmt6(CENTRE),
        fmt6(RADIUS)
    );
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle" font-size="14">N</text>"#, fmt6(CENTRE), fmt6(CENTRE - RADIUS - 10.0));

    let _ = writeln!(s, r#"<g id="envelopes" fill="none" stroke-width="1.5" clip-path="url(#primitive)">"#);
    for e in envelopes {
        let dd = if flip_poles { wrap_degrees(e.dip_direction + 180.0) } else { e.dip_direction };
        let colour = hex(set_colour(e.set_id));
        let mut circles = vec![small_circle(e.dip, dd, e.cone_radius)];
        if e.dip + e.cone_radius > 90.0 {
            circles.push(small_circle(180.0 - e.dip, wrap_degrees(dd + 180.0), e.cone_radius));
        }
        for (cx, cy, r) in circles {
            let (x, y) = to_canvas(cx, cy);
            let _ = writeln!(s, r#"<circle cx="{x}" cy="{y}" r="{}" stroke="{colour}"/>"#, fmt6(r * RADIUS));
        }
    }
    let _ = writeln!(s, "</g>");

    let _ = writeln!(s, r#"<g id="poles">"#);
    for p in poles {
        let (x, y) = to_canvas(p.x, p.y);
        let colour = hex(set_colour(p.set_id.unwrap_or(0)));
        let _ = writeln!(s, r#"<circle cx="{x}" cy="{y}" r="3" fill="{colour}"/>"#);
    }
    let _ = writeln!(s, "</g>");
    let _ = writeln!(s, r#"<g id="bolts" fill="black">"#);
    for b in bolts {
        let (cx, cy) = (CENTRE + RADIUS * b.x, CENTRE - RADIUS * b.y);
        let _ = writeln!(
            s,
            r#"<path d="M {} {} L {} {} L {} {} L {} {} Z"/>"#,
            fmt6(cx),
            fmt6(cy - 5.0),
            fmt6(cx + 5.0),
            fmt6(cy),
            fmt6(cx),
            fmt6(cy + 5.0),
            fmt6(cx - 5.0),
            fmt6(cy)
        );
    }
    let _ = writeln!(s, "</g>");

    let _ = writeln!(s, r#"<g id="legend" font-size="12">"#);
    let mut row = 0.0;
    for e in envelopes {
        let count = poles.iter().filter(|p| p.set_id == Some(e.set_id)).count();
        let y = 20.0 + row * 16.0;
        let _ = writeln!(s, r#"<rect x="10" y="{}" width="10" height="10" fill="{}"/>"#, fmt6(y), hex(set_colour(e.set_id)));
        let _ = writeln!(
            s,
            r#"<text x="26" y="{}">Set {} ({} planes)</text>"#,
            fmt6(y + 9.0),
            e.set_id + 1,
            count
        );
        row += 1.0;
    }
    if !bolts.is_empty() {
        let y = 20.0 + row * 16.0;
        let _ = writeln!(s, r#"<text x="26" y="{}">Bolts ({})</text>"#, fmt6(y + 9.0), bolts.len());
    }
    let _ = writeln!(s, "</g>");
    s.push_str("</svg>\n");
    s
}

pub fn render_stereonet_svg(
    poles: &[StereonetPoint],
    bolts: &[StereonetPoint],
    envelopes: &[SetEnvelope],
    flip_poles: bool,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, stereonet_svg(poles, bolts, envelopes, flip_poles)).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SceneMetric {
    None,
    ExposedLength,
    Deviation,
}

impl std::str::FromStr for SceneMetric {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(SceneMetric::None),
            "exposed-length" | "exposed_length" | "length" => Ok(SceneMetric::ExposedLength),
            "deviation" => Ok(SceneMetric::Deviation),
            _ => Err(Error::arg(format!("unknown scene metric `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeshFormat {
    Ply,
    Obj,
}

impl std::str::FromStr for MeshFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ply" => Ok(MeshFormat::Ply),
            "obj" => Ok(MeshFormat::Obj),
            _ => Err(Error::arg(format!("unknown mesh format `{s}`"))),
        }
    }
}

/// Viridis anchors at t = 0, 0.25, 0.5, 0.75, 1; linear in between.
const VIRIDIS: [[f64; 3]; 5] = [
    [68.0, 1.0, 84.0],
    [59.0, 82.0, 139.0],
    [33.0, 145.0, 140.0],
    [94.0, 201.0, 98.0],
    [253.0, 231.0, 37.0],
];

pub fn viridis(t: f64) -> [u8; 3] {
    let t = if t.is_finite() { t.clamp(0.0, 1.0) } else { 0.0 };
    let f = t * 4.0;
    let k = (f.floor() as usize).min(3);
    let w = f - k as f64;
    let mut c = [0u8; 3];
    for j in 0..3 {
        c[j] = (VIRIDIS[k][j] * (1.0 - w) + VIRIDIS[k + 1][j] * w).round() as u8;
    }
    c
}

const BOLT_PLAIN: [u8; 3] = [40, 40, 40];

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SceneMesh {
    pub vertices: Vec<(Point3<f64>, [u8; 3])>,
    pub faces: Vec<Vec<u32>>,
}

/// Planes become their extent rectangles; bolts become 16-sided prisms of the
/// render diameter running 2 m from the exposed tip back along −u1.
pub fn build_scene(planes: &[DiscontinuityPlane], bolts: &[BoltVector], metric: SceneMetric) -> SceneMesh {
    let mut m = SceneMesh::default();
    for p in planes {
        let base = m.vertices.len() as u32;
        let c = set_colour(p.set_id);
        m.vertices.extend(p.corners().into_iter().map(|v| (v, c)));
        m.faces.push(vec![base, base + 1, base + 2, base + 3]);
    }
    let values: Vec<f64> = bolts
        .iter()
        .map(|b| match metric {
            SceneMetric::None => 0.0,
            SceneMetric::ExposedLength => b.exposed_length,
            SceneMetric::Deviation => b.deviation,
        })
        .collect();
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    for (b, v) in bolts.iter().zip(&values) {
        let colour = match metric {
            SceneMetric::None => BOLT_PLAIN,
            _ => viridis(if hi > lo { (v - lo) / (hi - lo) } else { 0.0 }),
        };
        let a = b.axis.normalize();
        let tip = b.centroid + a * (b.exposed_length / 2.0);
        let end = tip - a * BOLT_RENDER_LENGTH;
        let u = a.cross(&if a.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() }).normalize();
        let w = a.cross(&u);
        let r = BOLT_RENDER_DIAMETER / 2.0;
        let base = m.vertices.len() as u32;
        for centre in [tip, end] {
            for k in 0..PRISM_SIDES {
                let t = k as f64 * std::f64::consts::TAU / PRISM_SIDES as f64;
                m.vertices.push((centre + (u * t.cos() + w * t.sin()) * r, colour));
            }
        }
        let n = PRISM_SIDES as u32;
        for k in 0..n {
            let k1 = (k + 1) % n;
            m.faces.push(vec![base + k, base + k1, base + n + k1, base + n + k]);
        }
        m.faces.push((0..n).rev().map(|k| base + k).collect());
        m.faces.push((0..n).map(|k| base + n + k).collect());
    }
    m
}

pub fn write_mesh<W: Write>(mesh: &SceneMesh, w: &mut W, format: MeshFormat) -> std::io::Result<()> {
    match format {
        MeshFormat::Ply => {
            writeln!(w, "ply\nformat ascii 1.0\ncomment rockmass scene")?;
            writeln!(w, "element vertex {}", mesh.vertices.len())?;
            writeln!(w, "property double x\nproperty double y\nproperty double z")?;
            writeln!(w, "property uchar red\nproperty uchar green\nproperty uchar blue")?;
            writeln!(w, "element face {}", mesh.faces.len())?;
            writeln!(w, "property list uchar int vertex_indices\nend_header")?;
            for (p, c) in &mesh.vertices {
                writeln!(w, "{} {} {} {} {} {}", fmt6(p.x), fmt6(p.y), fmt6(p.z), c[0], c[1], c[2])?;
            }
            for f in &mesh.faces {
                write!(w, "{}", f.len())?;
                for i in f {
                    write!(w, " {i}")?;
                }
                writeln!(w)?;
            }
        }
        MeshFormat::Obj => {
            writeln!(w, "# rockmass scene")?;
            for (p, c) in &mesh.vertices {
                writeln!(
                    w,
                    "v {} {} {} {} {} {}",
                    fmt6(p.x),
                    fmt6(p.y),
                    fmt6(p.z),
                    fmt6(c[0] as f64 / 255.0),
                    fmt6(c[1] as f64 / 255.0),
                    fmt6(c[2] as f64 / 255.0)
                )?;
            }
            for f in &mesh.faces {
                write!(w, "f")?;
                for i in f {
                    write!(w, " {}", i + 1)?;
                }
                writeln!(w)?;
            }
        }
    }
    Ok(())
}

pub fn export_scene(
    planes: &[DiscontinuityPlane],
    bolts: &[BoltVector],
    metric: SceneMetric,
    path: impl AsRef<Path>,
    format: MeshFormat,
) -> Result<()> {
    let path = path.as_ref();
    let mesh = build_scene(planes, bolts, metric);
    let mut buf = Vec::new();
    write_mesh(&mesh, &mut buf, format).map_err(|e| Error::io(path, e))?;
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bolt_geometry::RoofSource;
    use crate::orientation::{orientation_of, unproject};
    use crate::structure::PlaneExtent;
    use proptest::prelude::*;

    fn plane(id: usize, set: usize, normal: Vector3<f64>) -> DiscontinuityPlane {
        let o = orientation_of(&normal).unwrap();
        let u = normal.cross(&Vector3::new(0.3, 0.4, 0.5)).normalize();
        DiscontinuityPlane {
            plane_id: id,
            set_id: set,
            centroid: Point3::origin(),
            normal: normal.normalize(),
            dip: o.dip,
            dip_direction: o.dip_direction,
            members: vec![],
            extent: PlaneExtent { u, v: normal.normalize().cross(&u), s_min: -1.0, s_max: 1.0, t_min: -0.5, t_max: 0.5 },
            rms: 0.0,
        }
    }

    fn bolt(id: usize, axis: Vector3<f64>, length: f64, deviation: f64) -> BoltVector {
        let o = orientation_of(&axis).unwrap();
        BoltVector {
            bolt_id: id,
            members: vec![],
            centroid: Point3::new(0.0, 0.0, 1.0),
            axis: axis.normalize(),
            eigenvalues: [1.0, 0.1, 0.1],
            exposed_length: length,
            deviation,
            dip: o.dip,
            dip_direction: o.dip_direction,
            roof_normal: Vector3::z(),
            roof_source: RoofSource::Local,
            warnings: vec![],
        }
    }

    #[test]
    fn projection_examples() {
        assert_eq!(stereonet_project(0.0, 123.0), (0.0, 0.0));
        let (x, y) = stereonet_project(90.0, 90.0);
        assert!((x - 1.0).abs() < 1e-12 && y.abs() < 1e-12);
        let (x, y) = stereonet_project(60.0, 0.0);
        assert!(x.abs() < 1e-12 && (y - 30f64.to_radians().tan()).abs() < 1e-12);
        assert!((y - 0.5774).abs() < 1e-4);
    }

    #[test]
    fn sig_digit_formatting() {
        assert_eq!(fmt6(400.0), "400");
        assert_eq!(fmt6(123.456789), "123.457");
        assert_eq!(fmt6(0.000123456789), "0.000123457");
        assert_eq!(fmt6(1234567.0), "1234570");
        assert_eq!(fmt6(-0.0000000001), "-0.0000000001");
        assert_eq!(fmt6(-1e-20 * 0.0), "0");
    }

    #[test]
    fn small_circle_matches_projected_boundary() {
        for &(dip, dd, rho) in &[(40.0, 30.0, 15.0), (10.0, 200.0, 15.0), (70.0, 300.0, 10.0)] {
            let (cx, cy, r) = small_circle(dip, dd, rho);
            let centre = vector_from(dip, dd);
            let a = centre.cross(&Vector3::new(0.1, 0.2, 0.9)).normalize();
            let b = centre.cross(&a);
            for k in 0..36 {
                let t = (k as f64 * 10.0).to_radians();
                let v = centre * rho.to_radians().cos() + (a * t.cos() + b * t.sin()) * rho.to_radians().sin();
                let o = orientation_of(&v).unwrap();
                let (x, y) = project(o.dip, o.dip_direction);
                assert!((((x - cx).powi(2) + (y - cy).powi(2)).sqrt() - r).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn coverage_rules() {
        let envs: Vec<SetEnvelope> = [(0usize, 0.0, 0.0), (1, 90.0, 90.0)]
            .iter()
            .map(|&(id, dip, dd)| SetEnvelope { set_id: id, dip, dip_direction: dd, cone_radius: 15.0 })
            .collect();
        let inside = bolt(0, Vector3::z(), 0.1, 0.0);
        let tilt = 20f64.to_radians();
        let outside = bolt(1, Vector3::new(tilt.sin(), 0.0, tilt.cos()), 0.1, 20.0);
        let r = coverage_analysis(&[inside.clone(), outside], &envs);
        assert_eq!(r.bolts_outside_all_sets, vec![1]);
        assert_eq!(r.unsupported_sets, vec![1]);
        assert_eq!(r.per_set, vec![(0, 1), (1, 0)]);
        let flipped = BoltVector { axis: -inside.axis, ..inside.clone() };
        assert_eq!(coverage_analysis(&[flipped], &envs), coverage_analysis(&[inside], &envs));
        assert!(envelopes_from_sets(&[], 90.0).is_err());
    }

    #[test]
    fn svg_contracts() {
        let empty = stereonet_svg(&[], &[], &[], false);
        assert!(empty.contains("graticule") && empty.starts_with("<?xml") && empty.trim_end().ends_with("</svg>"));
        let p = pole_points(&[plane(0, 0, Vector3::z())], false);
        let svg = stereonet_svg(&p, &[], &[], false);
        assert!(svg.contains(r#"<circle cx="400" cy="400" r="3""#));
        let planes = vec![plane(0, 0, Vector3::new(0.0, 0.5, 1.0)), plane(1, 1, Vector3::new(1.0, 0.0, 0.1))];
        let envs = vec![
            SetEnvelope { set_id: 0, dip: 26.6, dip_direction: 0.0, cone_radius: 15.0 },
            SetEnvelope { set_id: 1, dip: 84.3, dip_direction: 90.0, cone_radius: 15.0 },
        ];
        let b = bolt_points(&[bolt(0, Vector3::z(), 0.1, 0.0)]);
        let a = stereonet_svg(&pole_points(&planes, false), &b, &envs, false);
        assert_eq!(a, stereonet_svg(&pole_points(&planes, false), &b, &envs, false));
        assert!(a.contains("Set 2 (1 planes)"));
        // The steep set's cone wraps to the opposite side.
        assert_eq!(a.matches("stroke=\"#ff7f0e\"").count(), 2);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.svg");
        render_stereonet_svg(&pole_points(&planes, true), &b, &envs, true, &path).unwrap();
        assert!(std::fs::read_to_string(&path).unwrap().contains("</svg>"));
    }

    #[test]
    fn scene_mesh_arithmetic_and_round_trip() {
        let planes = vec![plane(0, 0, Vector3::z())];
        let bolts = vec![bolt(0, Vector3::z(), 0.1, 0.0)];
        let mesh = build_scene(&planes, &bolts, SceneMetric::None);
        assert_eq!(mesh.vertices.len(), 4 + 32);
        assert_eq!(mesh.faces.len(), 1 + 16 + 2);
        let top = mesh.vertices[4].0;
        let bottom = mesh.vertices[4 + 16].0;
        assert!(((top - bottom).norm() - BOLT_RENDER_LENGTH).abs() < 1e-9);
        assert!(((top - Point3::new(0.0, 0.0, 1.05)).norm() - 0.01).abs() < 1e-9);

        let dir = tempfile::tempdir().unwrap();
        let ply = dir.path().join("scene.ply");
        export_scene(&planes, &bolts, SceneMetric::None, &ply, MeshFormat::Ply).unwrap();
        let back = crate::io::load_cloud(&ply, crate::io::CloudFormat::PlyAscii).unwrap();
        assert_eq!(back.len(), 36);
        assert!(back.scalar("red").is_some());
        let obj = dir.path().join("scene.obj");
        export_scene(&planes, &bolts, SceneMetric::Deviation, &obj, MeshFormat::Obj).unwrap();
        let text = std::fs::read_to_string(&obj).unwrap();
        assert_eq!(text.lines().filter(|l| l.starts_with("v ")).count(), 36);
        assert_eq!(text.lines().filter(|l| l.starts_with("f ")).count(), 19);
        let again = dir.path().join("again.obj");
        export_scene(&planes, &bolts, SceneMetric::Deviation, &again, MeshFormat::Obj).unwrap();
        assert_eq!(std::fs::read(&obj).unwrap(), std::fs::read(&again).unwrap());
    }

    #[test]
    fn constant_metric_uses_low_end() {
        let bolts: Vec<_> = (0..3).map(|i| bolt(i, Vector3::new(0.0, 0.1 * i as f64, 1.0), 0.1, 0.0)).collect();
        let mesh = build_scene(&[], &bolts, SceneMetric::Deviation);
        assert!(mesh.vertices.iter().all(|(_, c)| *c == viridis(0.0)));
        assert_eq!(viridis(0.0), [68, 1, 84]);
        assert_eq!(viridis(1.0), [253, 231, 37]);
        let varied = vec![bolt(0, Vector3::z(), 0.05, 1.0), bolt(1, Vector3::z(), 0.25, 9.0)];
        let mesh = build_scene(&[], &varied, SceneMetric::ExposedLength);
        assert_eq!(mesh.vertices[0].1, viridis(0.0));
        assert_eq!(mesh.vertices[32].1, viridis(1.0));
    }

    proptest! {
        #[test]
        fn project_invert_round_trip(dip in 0.001f64..90.0, dd in 0.0f64..360.0) {
            let (x, y) = stereonet_project(dip, dd);
            prop_assert!(x * x + y * y <= 1.0 + 1e-9);
            let (d2, a2) = unproject(x, y);
            prop_assert!((d2 - dip).abs() < 1e-9);
            let da = (a2 - dd).abs();
            prop_assert!(da.min(360.0 - da) < 1e-9);
        }

        #[test]
        fn continuity_across_north(dip in 1.0f64..90.0) {
            let (x1, y1) = stereonet_project(dip, 359.9);
            let (x2, y2) = stereonet_project(dip, 0.1);
            prop_assert!(((x1 - x2).powi(2) + (y1 - y2).powi(2)).sqrt() < 0.004);
        }

        #[test]
        fn line_angle_symmetric_and_bounded(a in prop::array::uniform3(-1.0f64..1.0), b in prop::array::uniform3(-1.0f64..1.0)) {
            let (a, b) = (Vector3::from(a), Vector3::from(b));
            prop_assume!(a.norm() > 1e-3 && b.norm() > 1e-3);
            let t = line_angle(&a, &b);
            prop_assert!((0.0..=90.0).contains(&t));
            prop_assert_eq!(t, line_angle(&b, &a));
            prop_assert_eq!(t, line_angle(&-a, &b));
        }
    }
}
