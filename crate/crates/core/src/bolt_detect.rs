//! Two-stage bolt identification: curvature filtering into candidate
//! clusters, then per-point scoring by a pluggable classifier backend.
//! Also object- and point-level detection metrics.

use std::collections::HashMap;
use std::path::PathBuf;
use std::process::Command;

use nalgebra::{Point3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cloud::{centroid_of, ChannelData, PointCloud};
use crate::cluster::euclidean_components;
use crate::descriptors::{covariance, local_surface, sorted_eigen, DescriptorSet, LocalSurface};
use crate::error::{Error, Result};
use crate::index::SpatialIndex;
use crate::io::{save_cloud, CloudFormat};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CandidateParams {
    pub percentile: f64,
    pub min_size: usize,
    pub passthrough_size: usize,
    pub roi_radius: f64,
    /// Connectivity distance; `None` uses the support radius.
    pub cell: Option<f64>,
}

impl Default for CandidateParams {
    fn default() -> Self {
        CandidateParams {
            percentile: 0.90,
            min_size: 100,
            passthrough_size: 400,
            roi_radius: 0.15,
            cell: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CandidateOrigin {
    DirectPassthrough,
    RoiExpanded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateCluster {
    /// Sorted cloud indices.
    pub members: Vec<usize>,
    /// The high-curvature component the candidate grew from (sorted).
    pub seed: Vec<usize>,
    pub centroid: Point3<f64>,
    pub origin: CandidateOrigin,
}

impl CandidateCluster {
    pub fn size(&self) -> usize {
        self.members.len()
    }
}

/// Nearest-rank empirical quantile of the curvature of non-degenerate points.
pub fn curvature_threshold(desc: &DescriptorSet, percentile: f64) -> Option<f64> {
    let mut v: Vec<f64> = desc
        .items
        .iter()
        .filter(|d| !d.is_degenerate())
        .map(|d| d.curvature)
        .collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let rank = ((percentile * v.len() as f64).ceil() as usize).clamp(1, v.len());
    Some(v[rank - 1])
}

/// Non-degenerate points with curvature strictly above the quantile.
pub fn high_curvature_points(desc: &DescriptorSet, percentile: f64) -> Result<Vec<usize>> {
    if !(percentile > 0.0 && percentile < 1.0) {
        return Err(Error::arg(format!("percentile must be in (0, 1), got {percentile}")));
    }
    let Some(t) = curvature_threshold(desc, percentile) else {
        return Ok(Vec::new());
    };
    Ok((0..desc.len())
        .filter(|&i| !desc.items[i].is_degenerate() && desc.items[i].curvature > t)
        .collect())
}

/// Stage one: curvature threshold, connected components, size rules and
/// region-of-interest recovery for mid-sized clusters.
pub fn filter_bolt_candidates(
    cloud: &PointCloud,
    desc: &DescriptorSet,
    index: &SpatialIndex,
    params: &CandidateParams,
    support_radius: f64,
) -> Result<Vec<CandidateCluster>> {
    let high = high_curvature_points(desc, params.percentile)?;
    let comps = euclidean_components(cloud, &high, params.cell.unwrap_or(support_radius))?;
    let mut out = Vec::new();
    for group in comps.groups() {
        if group.len() < params.min_size {
            continue;
        }
        let seed: Vec<usize> = group.into_iter().map(|k| high[k]).collect();
        let centroid = centroid_of(cloud.points(), Some(&seed)).unwrap();
        if seed.len() > params.passthrough_size {
            out.push(CandidateCluster {
                members: seed.clone(),
                seed,
                centroid,
                origin: CandidateOrigin::DirectPassthrough,
            });
        } else {
            let mut members = index.radius(&centroid, params.roi_radius);
            members.sort_unstable();
            out.push(CandidateCluster {
                members,
                seed,
                centroid,
                origin: CandidateOrigin::RoiExpanded,
            });
        }
    }
    Ok(out)
}

/// Read-only data a classifier may consult beyond the candidate itself.
pub struct ClassifierContext<'a> {
    pub cloud: &'a PointCloud,
    pub desc: &'a DescriptorSet,
    pub index: &'a SpatialIndex,
    pub planarity_threshold: f64,
}

/// A per-point bolt scorer. Implementations must be deterministic.
pub trait BoltClassifier: Send + Sync {
    fn name(&self) -> &str;
    /// One probability in `[0, 1]` per `candidate.members` entry.
    fn score(&self, candidate: &CandidateCluster, ctx: &ClassifierContext) -> Result<Vec<f64>>;
}

/// Scores every point with the same probability.
pub struct ConstantClassifier(pub f64);

impl BoltClassifier for ConstantClassifier {
    fn name(&self) -> &str {
        "constant"
    }

    fn score(&self, c: &CandidateCluster, _: &ClassifierContext) -> Result<Vec<f64>> {
        Ok(vec![self.0; c.members.len()])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineParams {
    pub min_elongation: f64,
    pub min_length: f64,
    pub max_length: f64,
    pub max_radius: f64,
    /// Logistic widths: elongation in natural-log units, lengths in metres.
    pub elongation_width: f64,
    pub length_width: f64,
    pub radius_width: f64,
    /// Points farther than this many radial RMS from the axis are down-weighted.
    pub outlier_factor: f64,
    /// Search radius for the host surface around the seed centroid.
    pub host_radius: f64,
    pub min_core_points: usize,
}

impl Default for BaselineParams {
    fn default() -> Self {
        BaselineParams {
            min_elongation: 5.0,
            min_length: 0.05,
            max_length: 0.25,
            max_radius: 0.03,
            elongation_width: 0.5,
            length_width: 0.02,
            radius_width: 0.005,
            outlier_factor: 3.0,
            host_radius: 0.3,
            min_core_points: 10,
        }
    }
}

/// 1 inside the accepted range, `2·σ(−excess/width)` outside it.
fn gate(excess: f64, width: f64) -> f64 {
    if excess <= 0.0 {
        1.0
    } else {
        2.0 / (1.0 + (excess / width).exp())
    }
}

/// Geometric stand-in for a learned segmenter: fits a principal axis to the
/// part of the candidate standing off its host surface and rates how much it
/// looks like a short thin cylinder.
pub struct BaselineClassifier {
    pub params: BaselineParams,
}

/// Fitted cylinder summary used by the baseline.
#[derive(Debug, Clone, Copy)]
pub struct AxisFit {
    pub centroid: Point3<f64>,
    pub axis: Vector3<f64>,
    pub elongation: f64,
    pub length: f64,
    pub radial_rms: f64,
    pub s_min: f64,
    pub s_max: f64,
}

/// PCA axis fit of `points[idx]`; `None` for degenerate covariance.
pub fn fit_axis(points: &[Point3<f64>], idx: &[usize]) -> Option<AxisFit> {
    if idx.len() < 2 {
        return None;
    }
    let (c, cov) = covariance(points, idx);
    let (vals, vecs) = sorted_eigen(&cov);
    if !(vals[0] > 1e-14) {
        return None;
    }
    let axis: Vector3<f64> = vecs.column(0).into_owned();
    let (mut lo, mut hi, mut rr) = (f64::INFINITY, f64::NEG_INFINITY, 0.0);
    for &i in idx {
        let d = points[i] - c;
        let s = d.dot(&axis);
        lo = lo.min(s);
        hi = hi.max(s);
        rr += (d - axis * s).norm_squared();
    }
    Some(AxisFit {
        centroid: c,
        axis,
        elongation: if vals[1] > 0.0 { vals[0] / vals[1] } else { f64::INFINITY },
        length: hi - lo,
        radial_rms: (rr / idx.len() as f64).sqrt(),
        s_min: lo,
        s_max: hi,
    })
}

impl BaselineClassifier {
    pub fn new(params: BaselineParams) -> Self {
        BaselineClassifier { params }
    }
}

impl BoltClassifier for BaselineClassifier {
    fn name(&self) -> &str {
        "baseline"
    }

    fn score(&self, cand: &CandidateCluster, ctx: &ClassifierContext) -> Result<Vec<f64>> {
        let p = &self.params;
        let pts = ctx.cloud.points();
        let seed_centroid = centroid_of(pts, Some(&cand.seed)).unwrap_or(cand.centroid);
        let host = local_surface(ctx.cloud, ctx.desc, ctx.index, &seed_centroid, p.host_radius, 10, |j| {
            ctx.desc.items[j].planarity > ctx.planarity_threshold && cand.seed.binary_search(&j).is_err()
        });

        // Orient the host normal toward the protrusion and measure heights.
        let (host, tau) = match host {
            Some(mut h) => {
                let mean_h = cand.seed.iter().map(|&i| (pts[i] - h.centroid).dot(&h.normal)).sum::<f64>();
                if mean_h < 0.0 {
                    h.normal = -h.normal;
                }
                let tau = (3.0 * h.rms).clamp(0.002, 0.01);
                (Some(h), tau)
            }
            None => (None, 0.0),
        };
        let height = |i: usize| host.map(|h| (pts[i] - h.centroid).dot(&h.normal));
        let core: Vec<usize> = match host {
            Some(_) => cand.seed.iter().copied().filter(|&i| height(i).unwrap() > tau).collect(),
            None => cand.seed.clone(),
        };
        if core.len() < p.min_core_points {
            return Ok(vec![0.0; cand.members.len()]);
        }
        let Some(mut fit) = fit_axis(pts, &core) else {
            return Ok(vec![0.0; cand.members.len()]);
        };

        // With a steep axis the base is cut perpendicular to the axis, at the
        // first section whose whole rim clears the host by tau. A cut parallel
        // to the host would trim one side of a tilted bolt and lean the axis.
        let orient = |fit: &mut AxisFit, n: &Vector3<f64>| {
            if fit.axis.dot(n) < 0.0 {
                fit.axis = -fit.axis;
                (fit.s_min, fit.s_max) = (-fit.s_max, -fit.s_min);
            }
        };
        let base_cut = |fit: &AxisFit, h: &LocalSurface| {
            let an = fit.axis.dot(&h.normal);
            (an >= 0.5).then(|| {
                let s0 = -(fit.centroid - h.centroid).dot(&h.normal) / an;
                let tan = (1.0 - an * an).max(0.0).sqrt() / an;
                (s0, s0 + tau / an + fit.radial_rms * tan)
            })
        };
        let mut cut = None;
        if let Some(h) = &host {
            orient(&mut fit, &h.normal);
            if let Some((_, c)) = base_cut(&fit, h) {
                let refined: Vec<usize> =
                    core.iter().copied().filter(|&i| (pts[i] - fit.centroid).dot(&fit.axis) > c).collect();
                if refined.len() >= p.min_core_points {
                    if let Some(mut f) = fit_axis(pts, &refined) {
                        orient(&mut f, &h.normal);
                        fit = f;
                    }
                }
            }
            cut = base_cut(&fit, h);
        }
        // Exposed length runs from the host plane to the far end of the core
        // when the axis crosses the plane at a reasonable angle.
        let length = match cut {
            Some((s0, _)) => fit.s_max - s0,
            None => fit.length,
        };
        let base = gate(p.min_elongation.ln() - fit.elongation.ln(), p.elongation_width)
            * gate(p.min_length - length, p.length_width)
            * gate(length - p.max_length, p.length_width)
            * gate(fit.radial_rms - p.max_radius, p.radius_width);

        let reach = p.outlier_factor * fit.radial_rms;
        Ok(cand
            .members
            .iter()
            .map(|&i| {
                let d = pts[i] - fit.centroid;
                let raw = d.dot(&fit.axis);
                let s = raw.clamp(fit.s_min, fit.s_max);
                let off_axis = (d - fit.axis * s).norm() > reach;
                let on_host = height(i).is_some_and(|h| h <= tau) || cut.is_some_and(|(_, c)| raw <= c);
                if off_axis || on_host {
                    base * 0.1
                } else {
                    base
                }
            })
            .collect())
    }
}

/// Runs an external program per candidate. The command is split on
/// whitespace; `{input}` and `{output}` are replaced by file paths. The input
/// is an ASCII PLY of the candidate points with `curvature`, `planarity` and
/// `normal_x/y/z` channels; the program must write one `index probability`
/// line per point to the output path.
pub struct ExternalClassifier {
    pub command: String,
    pub workdir: PathBuf,
}

impl BoltClassifier for ExternalClassifier {
    fn name(&self) -> &str {
        "external"
    }

    fn score(&self, cand: &CandidateCluster, ctx: &ClassifierContext) -> Result<Vec<f64>> {
        let tag = format!("{}_{}", std::process::id(), cand.members.first().copied().unwrap_or(0));
        let input = self.workdir.join(format!("candidate_{tag}.ply"));
        let output = self.workdir.join(format!("candidate_{tag}.prob"));
        let mut sub = ctx.cloud.select(&cand.members);
        let col = |f: &dyn Fn(usize) -> f64| ChannelData::Scalar(cand.members.iter().map(|&i| f(i)).collect());
        sub.set_channel("curvature", col(&|i| ctx.desc.items[i].curvature))?;
        sub.set_channel("planarity", col(&|i| ctx.desc.items[i].planarity))?;
        sub.set_channel(
            "normal",
            ChannelData::Vector(cand.members.iter().map(|&i| ctx.desc.items[i].normal).collect()),
        )?;
        save_cloud(&sub, &input, CloudFormat::PlyAscii)?;
        let result = self.run(&input, &output, cand.members.len());
        let _ = std::fs::remove_file(&input);
        let _ = std::fs::remove_file(&output);
        result
    }
}

impl ExternalClassifier {
    fn run(&self, input: &std::path::Path, output: &std::path::Path, n: usize) -> Result<Vec<f64>> {
        let parts: Vec<String> = self
            .command
            .split_whitespace()
            .map(|t| {
                t.replace("{input}", &input.display().to_string())
                    .replace("{output}", &output.display().to_string())
            })
            .collect();
        let (prog, args) = parts.split_first().ok_or_else(|| Error::arg("empty classifier command"))?;
        let status = Command::new(prog).args(args).status().map_err(|e| Error::io(prog, e))?;
        if !status.success() {
            return Err(Error::Data(format!("classifier command exited with {status}")));
        }
        let text = std::fs::read_to_string(output).map_err(|e| Error::io(output, e))?;
        read_probability_table(&text, n)
    }
}

/// Parses `index probability` lines covering indices `0..n` exactly once.
pub fn read_probability_table(text: &str, n: usize) -> Result<Vec<f64>> {
    let mut out = vec![f64::NAN; n];
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let perr = |m: &str| Error::Parse {
            location: crate::error::Location::Line(ln + 1),
            message: m.to_string(),
        };
        let mut it = line.split_whitespace();
        let i: usize = it.next().and_then(|s| s.parse().ok()).ok_or_else(|| perr("bad index"))?;
        let p: f64 = it.next().and_then(|s| s.parse().ok()).ok_or_else(|| perr("bad probability"))?;
        if i >= n || !out[i].is_nan() {
            return Err(perr("index out of range or repeated"));
        }
        if !(0.0..=1.0).contains(&p) {
            return Err(perr("probability outside [0, 1]"));
        }
        out[i] = p;
    }
    if out.iter().any(|p| p.is_nan()) {
        return Err(Error::Data("probability table does not cover every point".into()));
    }
    Ok(out)
}

/// Builds a backend from its registered name: `baseline`, `constant:<p>`
/// or `external:<command>`.
pub fn classifier_from_name(name: &str, baseline: BaselineParams, workdir: PathBuf) -> Result<Box<dyn BoltClassifier>> {
    if name == "baseline" {
        return Ok(Box::new(BaselineClassifier::new(baseline)));
    }
    if let Some(p) = name.strip_prefix("constant:") {
        let p: f64 = p.parse().map_err(|_| Error::Config(format!("bad constant probability in `{name}`")))?;
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Config(format!("constant probability {p} outside [0, 1]")));
        }
        return Ok(Box::new(ConstantClassifier(p)));
    }
    if let Some(cmd) = name.strip_prefix("external:") {
        return Ok(Box::new(ExternalClassifier {
            command: cmd.to_string(),
            workdir,
        }));
    }
    Err(Error::Config(format!("unknown classifier backend `{name}`")))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BoltSegmentation {
    /// Per candidate, parallel to its members.
    pub probabilities: Vec<Vec<f64>>,
    pub labels: Vec<Vec<bool>>,
    /// Backend failures, one line per failed candidate.
    pub diagnostics: Vec<String>,
}

impl BoltSegmentation {
    /// Sorted union of the points labelled bolt in any candidate.
    pub fn bolt_points(&self, candidates: &[CandidateCluster]) -> Vec<usize> {
        let mut out: Vec<usize> = candidates
            .iter()
            .zip(&self.labels)
            .flat_map(|(c, l)| c.members.iter().zip(l).filter(|(_, &b)| b).map(|(&i, _)| i))
            .collect();
        out.sort_unstable();
        out.dedup();
        out
    }
}

/// Stage two: scores every candidate with `backend` and labels points with
/// probability above 0.5. A failing candidate is labelled non-bolt.
pub fn classify_bolt_points(
    candidates: &[CandidateCluster],
    ctx: &ClassifierContext,
    backend: &dyn BoltClassifier,
) -> BoltSegmentation {
    let scored: Vec<(Vec<f64>, Option<String>)> = candidates
        .par_iter()
        .enumerate()
        .map(|(k, c)| match backend.score(c, ctx) {
            Ok(p) if p.len() == c.members.len() && p.iter().all(|x| (0.0..=1.0).contains(x)) => (p, None),
            Ok(p) => (
                vec![0.0; c.members.len()],
                Some(format!("candidate {k}: backend `{}` returned {} invalid scores", backend.name(), p.len())),
            ),
            Err(e) => (
                vec![0.0; c.members.len()],
                Some(format!("candidate {k}: backend `{}` failed: {e}", backend.name())),
            ),
        })
        .collect();
    let mut seg = BoltSegmentation::default();
    for (p, diag) in scored {
        seg.labels.push(p.iter().map(|&x| x > 0.5).collect());
        seg.probabilities.push(p);
        if let Some(d) = diag {
            log::warn!("{d}");
            seg.diagnostics.push(d);
        }
    }
    seg
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionMetrics {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub point_iou: f64,
    pub point_precision: f64,
}

/// Precision and recall from raw counts; an empty denominator gives 1.
pub fn precision_recall(tp: usize, fp: usize, fn_: usize) -> (f64, f64) {
    let ratio = |a: usize, b: usize| if a + b == 0 { 1.0 } else { a as f64 / (a + b) as f64 };
    (ratio(tp, fp), ratio(tp, fn_))
}

/// Greedy one-to-one matching of predicted to true clusters by point-set
/// IoU (highest first, ties by index), plus point-level scores over the union
/// of all cluster points.
pub fn evaluate_detection(predicted: &[Vec<usize>], truth: &[Vec<usize>], match_iou: f64) -> DetectionMetrics {
    let mut owner: HashMap<usize, Vec<usize>> = HashMap::new();
    for (t, pts) in truth.iter().enumerate() {
        for &i in pts {
            owner.entry(i).or_default().push(t);
        }
    }
    let tsize: Vec<usize> = truth.iter().map(|t| dedup_len(t)).collect();
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (p, pts) in predicted.iter().enumerate() {
        let mut uniq = pts.clone();
        uniq.sort_unstable();
        uniq.dedup();
        let mut inter: HashMap<usize, usize> = HashMap::new();
        for i in &uniq {
            if let Some(ts) = owner.get(i) {
                let mut ts = ts.clone();
                ts.dedup();
                for t in ts {
                    *inter.entry(t).or_default() += 1;
                }
            }
        }
        for (t, k) in inter {
            let iou = k as f64 / (uniq.len() + tsize[t] - k) as f64;
            if iou >= match_iou {
                pairs.push((iou, p, t));
            }
        }
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then((a.1, a.2).cmp(&(b.1, b.2))));
    let (mut pm, mut tm) = (vec![false; predicted.len()], vec![false; truth.len()]);
    let mut tp = 0;
    for (_, p, t) in pairs {
        if !pm[p] && !tm[t] {
            pm[p] = true;
            tm[t] = true;
            tp += 1;
        }
    }
    let (fp, fn_) = (predicted.len() - tp, truth.len() - tp);
    let (precision, recall) = precision_recall(tp, fp, fn_);

    let flat = |v: &[Vec<usize>]| {
        let mut f: Vec<usize> = v.iter().flatten().copied().collect();
        f.sort_unstable();
        f.dedup();
        f
    };
    let (pp, tt) = (flat(predicted), flat(truth));
    let inter = pp.iter().filter(|i| tt.binary_search(i).is_ok()).count();
    let union = pp.len() + tt.len() - inter;
    DetectionMetrics {
        tp,
        fp,
        fn_,
        precision,
        recall,
        point_iou: if union == 0 { 1.0 } else { inter as f64 / union as f64 },
        point_precision: if pp.is_empty() { 1.0 } else { inter as f64 / pp.len() as f64 },
    }
}

fn dedup_len(v: &[usize]) -> usize {
    let mut u = v.to_vec();
    u.sort_unstable();
    u.dedup();
    u.len()
}
