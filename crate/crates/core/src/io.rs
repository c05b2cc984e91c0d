//! PLY (ascii and binary little-endian) and XYZ text readers and writers.
//!
//! Extra scalar vertex properties are preserved as attribute channels. Other
//! elements (faces, edges) are parsed and skipped, so mesh files produced by
//! [`crate::viz`] load as their vertex set.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::Point3;

use crate::cloud::{ChannelData, PointCloud};
use crate::error::{Error, Location, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CloudFormat {
    PlyAscii,
    PlyBinaryLe,
    Xyz,
}

impl CloudFormat {
    /// Guesses the format from a path: `.xyz`/`.txt` are XYZ, `.ply` is
    /// sniffed from its header.
    pub fn detect(path: &Path) -> Result<CloudFormat> {
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase());
        match ext.as_deref() {
            Some("xyz") | Some("txt") | Some("pts") => Ok(CloudFormat::Xyz),
            Some("ply") => {
                let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
                let head = String::from_utf8_lossy(&bytes[..bytes.len().min(512)]);
                if head.contains("format binary_little_endian") {
                    Ok(CloudFormat::PlyBinaryLe)
                } else {
                    Ok(CloudFormat::PlyAscii)
                }
            }
            _ => Err(Error::arg(format!(
                "cannot infer cloud format from `{}`",
                path.display()
            ))),
        }
    }
}

impl std::str::FromStr for CloudFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ply-ascii" | "ply" => Ok(CloudFormat::PlyAscii),
            "ply-binary-le" | "ply-binary" => Ok(CloudFormat::PlyBinaryLe),
            "xyz" | "xyz-text" => Ok(CloudFormat::Xyz),
            _ => Err(Error::arg(format!("unknown cloud format `{s}`"))),
        }
    }
}

pub fn load_cloud(path: impl AsRef<Path>, format: CloudFormat) -> Result<PointCloud> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    match format {
        CloudFormat::Xyz => parse_xyz(&bytes),
        CloudFormat::PlyAscii | CloudFormat::PlyBinaryLe => parse_ply(&bytes, Some(format)),
    }
}

/// Loads a cloud, inferring the format from the path and header.
pub fn load_cloud_auto(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    load_cloud(path, CloudFormat::detect(path)?)
}

pub fn save_cloud(cloud: &PointCloud, path: impl AsRef<Path>, format: CloudFormat) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_cloud(cloud, &mut w, format).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Serializes `cloud` to any writer. Vector channels are split into
/// `<name>_x`, `<name>_y`, `<name>_z` properties.
pub fn write_cloud<W: Write>(cloud: &PointCloud, w: &mut W, format: CloudFormat) -> std::io::Result<()> {
    let columns = flat_columns(cloud);
    match format {
        CloudFormat::Xyz => {
            for (i, p) in cloud.points().iter().enumerate() {
                write!(w, "{} {} {}", p.x, p.y, p.z)?;
                for (_, col) in &columns {
                    write!(w, " {}", col[i])?;
                }
                writeln!(w)?;
            }
        }
        CloudFormat::PlyAscii | CloudFormat::PlyBinaryLe => {
            writeln!(w, "ply")?;
            if format == CloudFormat::PlyAscii {
                writeln!(w, "format ascii 1.0")?;
            } else {
                writeln!(w, "format binary_little_endian 1.0")?;
            }
            writeln!(w, "element vertex {}", cloud.len())?;
            for axis in ["x", "y", "z"] {
                writeln!(w, "property double {axis}")?;
            }
            for (name, _) in &columns {
                writeln!(w, "property double {name}")?;
            }
            writeln!(w, "end_header")?;
            for (i, p) in cloud.points().iter().enumerate() {
                if format == CloudFormat::PlyAscii {
                    write!(w, "{} {} {}", p.x, p.y, p.z)?;
                    for (_, col) in &columns {
                        write!(w, " {}", col[i])?;
                    }
                    writeln!(w)?;
                } else {
                    for v in [p.x, p.y, p.z] {
                        w.write_all(&v.to_le_bytes())?;
                    }
                    for (_, col) in &columns {
                        w.write_all(&col[i].to_le_bytes())?;
                    }
                }
            }
        }
    }
    Ok(())
}

fn flat_columns(cloud: &PointCloud) -> Vec<(String, Vec<f64>)> {
    let mut out = Vec::new();
    for ch in cloud.channels() {
        match &ch.data {
            ChannelData::Scalar(v) => out.push((ch.name.clone(), v.clone())),
            ChannelData::Vector(v) => {
                for (k, axis) in ["x", "y", "z"].iter().enumerate() {
                    out.push((format!("{}_{axis}", ch.name), v.iter().map(|c| c[k]).collect()));
                }
            }
        }
    }
    out
}

fn parse_xyz(bytes: &[u8]) -> Result<PointCloud> {
    let text = std::str::from_utf8(bytes).map_err(|e| Error::Parse {
        location: Location::Byte(e.valid_up_to() as u64),
        message: "file is not valid UTF-8".into(),
    })?;
    let mut points = Vec::new();
    let mut extra: Vec<Vec<f64>> = Vec::new();
    let mut width: Option<usize> = None;
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with("//") {
            continue;
        }
        let vals = line
            .split(|c: char| c.is_whitespace() || c == ',')
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse::<f64>().map_err(|_| Error::Parse {
                    location: Location::Line(ln + 1),
                    message: format!("`{s}` is not a number"),
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        if vals.len() < 3 {
            return Err(Error::Parse {
                location: Location::Line(ln + 1),
                message: format!("expected at least 3 columns, found {}", vals.len()),
            });
        }
        match width {
            None => {
                width = Some(vals.len());
                extra = vec![Vec::new(); vals.len() - 3];
            }
            Some(w) if w != vals.len() => {
                return Err(Error::Parse {
                    location: Location::Line(ln + 1),
                    message: format!("expected {w} columns, found {}", vals.len()),
                })
            }
            _ => {}
        }
        check_finite(&vals[..3], Location::Line(ln + 1))?;
        points.push(Point3::new(vals[0], vals[1], vals[2]));
        for (k, v) in vals[3..].iter().enumerate() {
            extra[k].push(*v);
        }
    }
    let mut cloud = PointCloud::from_trusted(points);
    for (k, col) in extra.into_iter().enumerate() {
        cloud.set_channel(format!("col{}", k + 3), ChannelData::Scalar(col))?;
    }
    Ok(cloud)
}

fn check_finite(xyz: &[f64], at: Location) -> Result<()> {
    if xyz.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Data(format!("non-finite coordinate at {at}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Scalar {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl Scalar {
    fn parse(s: &str) -> Option<Scalar> {
        Some(match s {
            "char" | "int8" => Scalar::I8,
            "uchar" | "uint8" => Scalar::U8,
            "short" | "int16" => Scalar::I16,
            "ushort" | "uint16" => Scalar::U16,
            "int" | "int32" => Scalar::I32,
            "uint" | "uint32" => Scalar::U32,
            "float" | "float32" => Scalar::F32,
            "double" | "float64" => Scalar::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Scalar::I8 | Scalar::U8 => 1,
            Scalar::I16 | Scalar::U16 => 2,
            Scalar::I32 | Scalar::U32 | Scalar::F32 => 4,
            Scalar::F64 => 8,
        }
    }

    fn read_le(self, b: &[u8]) -> f64 {
        match self {
            Scalar::I8 => b[0] as i8 as f64,
            Scalar::U8 => b[0] as f64,
            Scalar::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::I32 => i32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::U32 => u32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::F32 => f32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }
}

#[derive(Debug, Clone)]
enum Property {
    Scalar(String, Scalar),
    List(Scalar, Scalar),
}

#[derive(Debug, Clone)]
struct Element {
    name: String,
    count: usize,
    props: Vec<Property>,
}

fn parse_ply(bytes: &[u8], expect: Option<CloudFormat>) -> Result<PointCloud> {
    let perr = |line: usize, msg: String| Error::Parse {
        location: Location::Line(line),
        message: msg,
    };
    // Header is ASCII up to and including the `end_header` line.
    let mut pos = 0usize;
    let mut line_no = 0usize;
    let mut format = None;
    let mut elements: Vec<Element> = Vec::new();
    loop {
        let rest = &bytes[pos..];
        let nl = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| perr(line_no + 1, "unterminated PLY header".into()))?;
        let line = String::from_utf8_lossy(&rest[..nl]).trim_end_matches('\r').to_string();
        pos += nl + 1;
        line_no += 1;
        let mut tok = line.split_whitespace();
        let key = tok.next().unwrap_or("");
        if line_no == 1 {
            if key != "ply" {
                return Err(perr(1, "missing `ply` magic".into()));
            }
            continue;
        }
        match key {
            "" | "comment" | "obj_info" => {}
            "format" => {
                format = Some(match tok.next() {
                    Some("ascii") => CloudFormat::PlyAscii,
                    Some("binary_little_endian") => CloudFormat::PlyBinaryLe,
                    Some(other) => return Err(perr(line_no, format!("unsupported PLY format `{other}`"))),
                    None => return Err(perr(line_no, "incomplete format line".into())),
                });
            }
            "element" => {
                let name = tok.next().ok_or_else(|| perr(line_no, "element without name".into()))?;
                let count = tok
                    .next()
                    .and_then(|c| c.parse::<usize>().ok())
                    .ok_or_else(|| perr(line_no, "element without valid count".into()))?;
                elements.push(Element {
                    name: name.to_string(),
                    count,
                    props: Vec::new(),
                });
            }
            "property" => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| perr(line_no, "property before any element".into()))?;
                let t = tok.next().unwrap_or("");
                if t == "list" {
                    let ct = tok.next().and_then(Scalar::parse);
                    let it = tok.next().and_then(Scalar::parse);
                    match (ct, it, tok.next()) {
                        (Some(c), Some(i), Some(_)) => el.props.push(Property::List(c, i)),
                        _ => return Err(perr(line_no, "malformed list property".into())),
                    }
                } else {
                    let st = Scalar::parse(t).ok_or_else(|| perr(line_no, format!("unknown property type `{t}`")))?;
                    let name = tok.next().ok_or_else(|| perr(line_no, "property without name".into()))?;
                    el.props.push(Property::Scalar(name.to_string(), st));
                }
            }
            "end_header" => break,
            other => return Err(perr(line_no, format!("unexpected header keyword `{other}`"))),
        }
    }
    let format = format.ok_or_else(|| perr(line_no, "missing format line".into()))?;
    if let Some(want) = expect {
        if want != format {
            return Err(perr(2, format!("file is {format:?}, expected {want:?}")));
        }
    }
    let vi = elements
        .iter()
        .position(|e| e.name == "vertex")
        .ok_or_else(|| perr(line_no, "no vertex element".into()))?;
    let vertex = &elements[vi];
    let find = |axis: &str| {
        vertex
            .props
            .iter()
            .position(|p| matches!(p, Property::Scalar(n, _) if n == axis))
            .ok_or_else(|| perr(line_no, format!("vertex element lacks `{axis}`")))
    };
    let (xi, yi, zi) = (find("x")?, find("y")?, find("z")?);
    let nprops = vertex.props.len();
    let mut values: Vec<Vec<f64>> = vec![Vec::with_capacity(vertex.count); nprops];

    match format {
        CloudFormat::PlyAscii => {
            let body = std::str::from_utf8(&bytes[pos..]).map_err(|e| Error::Parse {
                location: Location::Byte((pos + e.valid_up_to()) as u64),
                message: "ASCII body is not valid UTF-8".into(),
            })?;
            let mut lines = body.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
            for (ei, el) in elements.iter().enumerate() {
                for _ in 0..el.count {
                    let (k, line) = lines
                        .next()
                        .ok_or_else(|| perr(line_no + 1, format!("file ends inside element `{}`", el.name)))?;
                    let here = line_no + k + 1;
                    let toks: Vec<&str> = line.split_whitespace().collect();
                    let mut t = 0usize;
                    let next = |t: &mut usize| -> Result<f64> {
                        let s = toks.get(*t).ok_or_else(|| perr(here, "too few values in record".into()))?;
                        *t += 1;
                        s.parse::<f64>().map_err(|_| perr(here, format!("`{s}` is not a number")))
                    };
                    for (pi, prop) in el.props.iter().enumerate() {
                        match prop {
                            Property::Scalar(..) => {
                                let v = next(&mut t)?;
                                if ei == vi {
                                    values[pi].push(v);
                                }
                            }
                            Property::List(..) => {
                                let n = next(&mut t)?;
                                if n < 0.0 || n.fract() != 0.0 {
                                    return Err(perr(here, "invalid list length".into()));
                                }
                                for _ in 0..n as usize {
                                    next(&mut t)?;
                                }
                            }
                        }
                    }
                    if t != toks.len() {
                        return Err(perr(here, "too many values in record".into()));
                    }
                    if ei == vi {
                        let j = values[xi].len() - 1;
                        check_finite(&[values[xi][j], values[yi][j], values[zi][j]], Location::Line(here))?;
                    }
                }
            }
        }
        CloudFormat::PlyBinaryLe => {
            let berr = |at: usize, msg: &str| Error::Parse {
                location: Location::Byte(at as u64),
                message: msg.to_string(),
            };
            let mut at = pos;
            let take = |at: &mut usize, n: usize| -> Result<&[u8]> {
                let s = bytes.get(*at..*at + n).ok_or_else(|| berr(*at, "unexpected end of binary data"))?;
                *at += n;
                Ok(s)
            };
            for (ei, el) in elements.iter().enumerate() {
                for _ in 0..el.count {
                    let rec_start = at;
                    for (pi, prop) in el.props.iter().enumerate() {
                        match prop {
                            Property::Scalar(_, st) => {
                                let v = st.read_le(take(&mut at, st.size())?);
                                if ei == vi {
                                    values[pi].push(v);
                                }
                            }
                            Property::List(ct, it) => {
                                let n = ct.read_le(take(&mut at, ct.size())?);
                                if n < 0.0 {
                                    return Err(berr(at, "negative list length"));
                                }
                                take(&mut at, n as usize * it.size())?;
                            }
                        }
                    }
                    if ei == vi {
                        let j = values[xi].len() - 1;
                        check_finite(
                            &[values[xi][j], values[yi][j], values[zi][j]],
                            Location::Byte(rec_start as u64),
                        )?;
                    }
                }
            }
        }
        CloudFormat::Xyz => unreachable!(),
    }

    let points = (0..vertex.count)
        .map(|i| Point3::new(values[xi][i], values[yi][i], values[zi][i]))
        .collect();
    let mut cloud = PointCloud::from_trusted(points);
    for (pi, prop) in vertex.props.iter().enumerate() {
        if let Property::Scalar(name, _) = prop {
            if pi != xi && pi != yi && pi != zi {
                cloud.set_channel(name.clone(), ChannelData::Scalar(std::mem::take(&mut values[pi])))?;
            }
        }
    }
    Ok(cloud)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn tmp(name: &str) -> (tempfile::TempDir, std::path::PathBuf) {
        let d = tempfile::tempdir().unwrap();
        let p = d.path().join(name);
        (d, p)
    }

    #[test]
    fn xyz_three_points() {
        let (_d, p) = tmp("a.xyz");
        fs::write(&p, "0 0 0\n1 2 3\n# comment\n\n-1.5 2e-3 4\n").unwrap();
        let c = load_cloud(&p, CloudFormat::Xyz).unwrap();
        assert_eq!(c.len(), 3);
        assert_eq!(c.point(2), Point3::new(-1.5, 0.002, 4.0));
    }

    #[test]
    fn ply_with_intensity() {
        let (_d, p) = tmp("a.ply");
        let mut s = String::from(
            "ply\nformat ascii 1.0\ncomment test\nelement vertex 8\nproperty float x\nproperty float y\nproperty float z\nproperty float intensity\nend_header\n",
        );
        for i in 0..8 {
            s.push_str(&format!("{} {} {} {}\n", i & 1, (i >> 1) & 1, (i >> 2) & 1, i as f32 * 0.5));
        }
        fs::write(&p, s).unwrap();
        let c = load_cloud(&p, CloudFormat::PlyAscii).unwrap();
        assert_eq!(c.len(), 8);
        assert_eq!(c.channels().len(), 1);
        assert_eq!(c.scalar("intensity").unwrap()[3], 1.5);
    }

    #[test]
    fn round_trips() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let pts: Vec<_> = (0..10_000)
            .map(|_| Point3::new(rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0), rng.random::<f64>()))
            .collect();
        let mut cloud = PointCloud::new(pts).unwrap();
        cloud
            .set_channel("w", ChannelData::Scalar((0..10_000).map(|i| i as f64 / 7.0).collect()))
            .unwrap();
        for fmt in [CloudFormat::PlyAscii, CloudFormat::PlyBinaryLe, CloudFormat::Xyz] {
            let (_d, p) = tmp("r.ply");
            save_cloud(&cloud, &p, fmt).unwrap();
            let back = load_cloud(&p, fmt).unwrap();
            assert_eq!(back.len(), cloud.len());
            for (a, b) in back.points().iter().zip(cloud.points()) {
                if fmt == CloudFormat::PlyBinaryLe {
                    assert_eq!(a, b);
                } else {
                    assert!((a - b).norm() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn mesh_faces_are_skipped() {
        let (_d, p) = tmp("m.ply");
        fs::write(
            &p,
            "ply\nformat ascii 1.0\nelement vertex 3\nproperty float x\nproperty float y\nproperty float z\nproperty uchar red\nelement face 1\nproperty list uchar int vertex_indices\nend_header\n0 0 0 255\n1 0 0 0\n0 1 0 0\n3 0 1 2\n",
        )
        .unwrap();
        let c = load_cloud_auto(&p).unwrap();
        assert_eq!(c.len(), 3);
        assert!(c.scalar("red").is_some());
    }

    #[test]
    fn parse_errors_carry_location() {
        let (_d, p) = tmp("bad.xyz");
        fs::write(&p, "0 0 0\n1 x 3\n").unwrap();
        match load_cloud(&p, CloudFormat::Xyz) {
            Err(Error::Parse { location, .. }) => assert_eq!(location, Location::Line(2)),
            other => panic!("{other:?}"),
        }
        fs::write(&p, "0 0 nan\n").unwrap();
        assert!(matches!(load_cloud(&p, CloudFormat::Xyz), Err(Error::Data(_))));

        let (_d2, q) = tmp("bad.ply");
        let mut bytes = b"ply\nformat binary_little_endian 1.0\nelement vertex 2\nproperty double x\nproperty double y\nproperty double z\nend_header\n".to_vec();
        let header_len = bytes.len();
        bytes.extend_from_slice(&[0u8; 24 + 8]);
        fs::write(&q, &bytes).unwrap();
        match load_cloud(&q, CloudFormat::PlyBinaryLe) {
            Err(Error::Parse { location: Location::Byte(b), .. }) => assert_eq!(b as usize, header_len + 32),
            other => panic!("{other:?}"),
        }
        fs::write(&q, "ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nend_header\n0\n").unwrap();
        assert!(matches!(load_cloud(&q, CloudFormat::PlyAscii), Err(Error::Parse { .. })));
    }

    #[test]
    fn writer_is_deterministic() {
        let cloud = PointCloud::new(vec![Point3::new(0.1, 0.2, 0.3); 5]).unwrap();
        let mut a = Vec::new();
        let mut b = Vec::new();
        write_cloud(&cloud, &mut a, CloudFormat::PlyBinaryLe).unwrap();
        write_cloud(&cloud, &mut b, CloudFormat::PlyBinaryLe).unwrap();
        assert_eq!(a, b);
    }
}
