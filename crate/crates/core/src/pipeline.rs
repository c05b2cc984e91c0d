//! End-to-end orchestration: configuration, stage sequencing, provenance of
//! processed points, and the analysis report.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::Point3;
use serde::{Deserialize, Serialize};

use crate::bolt_detect::{
    classifier_from_name, classify_bolt_points, evaluate_detection, filter_bolt_candidates, BaselineParams,
    BoltSegmentation, CandidateCluster, CandidateOrigin, CandidateParams, ClassifierContext, DetectionMetrics,
};
use crate::bolt_geometry::{analyze_bolts, BoltGeometryParams, BoltVector};
use crate::cloud::{estimate_point_spacing, PointCloud, ScaleParams};
use crate::descriptors::{compute_descriptors, DescriptorSet};
use crate::error::{Error, Result};
use crate::index::SpatialIndex;
use crate::io::{save_cloud, CloudFormat};
use crate::preprocess::{remove_floor_csf, remove_statistical_outliers, voxel_downsample, CsfParams};
use crate::structure::{characterize_sets, filter_planar_points, StructureParams, StructureResult};
use crate::synth::{GroundTruth, PointLabel};
use crate::viz::{
    bolt_points, coverage_analysis, envelopes_from_sets, export_scene, pole_points, render_stereonet_svg, CoverageReport,
    MeshFormat, SceneMetric, DEFAULT_CONE_RADIUS,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    pub sor_k: usize,
    pub sor_sigma: f64,
    /// `None` skips downsampling.
    pub voxel_size: Option<f64>,
    pub remove_floor: bool,
    pub csf: CsfParams,
    /// When set, the cloth pitch is this many point spacings and
    /// `csf.cloth_resolution` is ignored.
    pub csf_resolution_spacings: Option<f64>,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            sor_k: 6,
            sor_sigma: 1.0,
            voxel_size: Some(0.02),
            remove_floor: true,
            csf: CsfParams::default(),
            csf_resolution_spacings: Some(50.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VizConfig {
    pub cone_radius: f64,
    pub flip_poles: bool,
    pub scene_metric: SceneMetric,
    /// `ply` or `obj`.
    pub scene_format: String,
}

impl Default for VizConfig {
    fn default() -> Self {
        VizConfig {
            cone_radius: DEFAULT_CONE_RADIUS,
            flip_poles: false,
            scene_metric: SceneMetric::None,
            scene_format: "ply".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub preprocess: PreprocessConfig,
    /// Fixed point spacing instead of estimating it.
    pub point_spacing: Option<f64>,
    pub structure: StructureParams,
    pub candidates: CandidateParams,
    /// Registered backend name, see [`classifier_from_name`].
    pub classifier: String,
    pub baseline: BaselineParams,
    pub geometry: BoltGeometryParams,
    pub viz: VizConfig,
    /// IoU needed to match a detected bolt to a true one.
    pub match_iou: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            preprocess: PreprocessConfig::default(),
            point_spacing: None,
            structure: StructureParams::default(),
            candidates: CandidateParams::default(),
            classifier: "baseline".into(),
            baseline: BaselineParams::default(),
            geometry: BoltGeometryParams::default(),
            viz: VizConfig::default(),
            match_iou: 0.5,
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<PipelineConfig> {
        let c: PipelineConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<PipelineConfig> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        PipelineConfig::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        let p = &self.preprocess;
        if p.sor_k == 0 || !(p.sor_sigma >= 0.0) {
            return bad("preprocess.sor_k must be >= 1 and sor_sigma >= 0");
        }
        if p.voxel_size.is_some_and(|v| !(v > 0.0)) || p.csf_resolution_spacings.is_some_and(|v| !(v > 0.0)) {
            return bad("preprocess.voxel_size and csf_resolution_spacings must be > 0");
        }
        p.csf.validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.point_spacing.is_some_and(|v| !(v > 0.0 && v < 0.15)) {
            return bad("point_spacing must be in (0, 0.15)");
        }
        let s = &self.structure;
        if !(s.planarity_threshold > 0.0 && s.planarity_threshold < 1.0) || s.min_cluster_size < 2 || s.min_samples == 0 {
            return bad("structure: planarity_threshold in (0, 1), min_cluster_size >= 2, min_samples >= 1");
        }
        let c = &self.candidates;
        if !(c.percentile > 0.0 && c.percentile < 1.0) || !(c.roi_radius > 0.0) {
            return bad("candidates: percentile in (0, 1) and roi_radius > 0");
        }
        if !(self.viz.cone_radius > 0.0 && self.viz.cone_radius < 90.0) {
            return bad("viz.cone_radius must be in (0, 90)");
        }
        self.viz.scene_format.parse::<MeshFormat>().map_err(|e| Error::Config(e.to_string()))?;
        if !(self.match_iou > 0.0 && self.match_iou <= 1.0) {
            return bad("match_iou must be in (0, 1]");
        }
        classifier_from_name(&self.classifier, self.baseline, std::env::temp_dir())?;
        Ok(())
    }
}

fn stage<T>(name: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::Stage { stage: name, source: Box::new(e) })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PointCounts {
    pub input: usize,
    pub after_outliers: usize,
    pub after_voxel: usize,
    pub after_floor: usize,
    pub floor_removed: usize,
    pub floor_degenerate: bool,
}

#[derive(Debug, Clone)]
pub struct PreprocessOutput {
    pub cloud: PointCloud,
    /// For each input point, the processed point it ended up in.
    pub assignment: Vec<Option<usize>>,
    pub counts: PointCounts,
    /// Spacing of the downsampled cloud, used for the cloth pitch.
    pub csf_spacing: Option<f64>,
}

/// Outlier removal, voxel downsampling and floor removal.
pub fn preprocess_cloud(cloud: &PointCloud, cfg: &PreprocessConfig, timings: &mut Vec<StageTiming>) -> Result<PreprocessOutput> {
    let mut counts = PointCounts { input: cloud.len(), ..Default::default() };
    let t = Instant::now();
    let sor = stage("outlier-removal", remove_statistical_outliers(cloud, cfg.sor_k, cfg.sor_sigma))?;
    timings.push(StageTiming::new("outlier-removal", t));
    counts.after_outliers = sor.cloud.len();
    let mut assignment: Vec<Option<usize>> = vec![None; cloud.len()];
    for (k, &i) in sor.kept.iter().enumerate() {
        assignment[i] = Some(k);
    }

    let t = Instant::now();
    let mut current = match cfg.voxel_size {
        Some(v) => {
            let d = stage("voxel-downsample", voxel_downsample(&sor.cloud, v))?;
            for a in assignment.iter_mut().flatten() {
                *a = d.assignment[*a];
            }
            d.cloud
        }
        None => sor.cloud,
    };
    timings.push(StageTiming::new("voxel-downsample", t));
    counts.after_voxel = current.len();

    let mut csf_spacing = None;
    if cfg.remove_floor {
        let t = Instant::now();
        let mut params = cfg.csf;
        if let Some(k) = cfg.csf_resolution_spacings {
            let index = SpatialIndex::new(&current);
            let ps = stage("floor-removal", estimate_point_spacing(&current, &index))?;
            params.cloth_resolution = k * ps;
            csf_spacing = Some(ps);
        }
        let r = stage("floor-removal", remove_floor_csf(&current, &params))?;
        if r.kept.cloud.is_empty() {
            return Err(Error::Stage {
                stage: "floor-removal",
                source: Box::new(Error::Data("no points left after floor removal".into())),
            });
        }
        counts.floor_removed = r.floor_indices.len();
        counts.floor_degenerate = r.degenerate;
        let mut remap = vec![None; current.len()];
        for (k, &i) in r.kept.kept.iter().enumerate() {
            remap[i] = Some(k);
        }
        for a in assignment.iter_mut() {
            *a = a.and_then(|i| remap[i]);
        }
        current = r.kept.cloud;
        timings.push(StageTiming::new("floor-removal", t));
    }
    counts.after_floor = current.len();
    Ok(PreprocessOutput { cloud: current, assignment, counts, csf_spacing })
}

/// Label of every processed point by majority over the input points merged
/// into it; ties go to the smallest label.
pub fn propagate_labels(assignment: &[Option<usize>], labels: &[PointLabel], n_out: usize) -> Vec<PointLabel> {
    let mut votes: Vec<HashMap<PointLabel, usize>> = vec![HashMap::new(); n_out];
    for (a, l) in assignment.iter().zip(labels) {
        if let Some(o) = a {
            *votes[*o].entry(*l).or_default() += 1;
        }
    }
    votes
        .into_iter()
        .map(|v| {
            v.into_iter()
                .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
                .map(|(l, _)| l)
                .unwrap_or(PointLabel::Noise)
        })
        .collect()
}

/// Non-empty point groups per planted bolt id, in id order.
pub fn truth_bolt_groups(labels: &[PointLabel]) -> Vec<Vec<usize>> {
    let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for (i, l) in labels.iter().enumerate() {
        if let PointLabel::Bolt { bolt_id } = l {
            groups.entry(*bolt_id).or_default().push(i);
        }
    }
    groups.into_values().collect()
}

/// Point spacing and support radius of a cloud, or from a fixed spacing.
pub fn scale_for(cloud: &PointCloud, index: &SpatialIndex, fixed: Option<f64>) -> Result<ScaleParams> {
    let ps = match fixed {
        Some(ps) => ps,
        None => estimate_point_spacing(cloud, index)?,
    };
    ScaleParams::from_spacing(ps)
}

/// Planar filtering and set characterization; an empty result when no point
/// passes the planarity filter.
pub fn map_structures(cloud: &PointCloud, desc: &DescriptorSet, params: &StructureParams, support_radius: f64) -> Result<StructureResult> {
    let planar = filter_planar_points(desc, params.planarity_threshold)?;
    if planar.is_empty() {
        log::warn!("no planar points; structure map is empty");
        return Ok(StructureResult::default());
    }
    characterize_sets(cloud, desc, &planar, params, support_radius)
}

#[derive(Debug, Clone, Default)]
pub struct BoltDetection {
    pub candidates: Vec<CandidateCluster>,
    pub segmentation: BoltSegmentation,
    pub bolt_points: Vec<usize>,
}

pub fn detect_bolts(
    cloud: &PointCloud,
    desc: &DescriptorSet,
    index: &SpatialIndex,
    config: &PipelineConfig,
    support_radius: f64,
) -> Result<BoltDetection> {
    let candidates = filter_bolt_candidates(cloud, desc, index, &config.candidates, support_radius)?;
    let backend = classifier_from_name(&config.classifier, config.baseline, std::env::temp_dir())?;
    let ctx = ClassifierContext { cloud, desc, index, planarity_threshold: config.structure.planarity_threshold };
    let segmentation = classify_bolt_points(&candidates, &ctx, backend.as_ref());
    let bolt_points = segmentation.bolt_points(&candidates);
    Ok(BoltDetection { candidates, segmentation, bolt_points })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
}

impl StageTiming {
    fn new(stage: &str, start: Instant) -> Self {
        StageTiming { stage: stage.into(), seconds: start.elapsed().as_secs_f64() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetSummary {
    pub set_id: usize,
    pub plane_count: usize,
    pub point_count: usize,
    pub dip: f64,
    pub dip_direction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlaneSummary {
    pub plane_id: usize,
    pub set_id: usize,
    pub dip: f64,
    pub dip_direction: f64,
    pub centroid: Point3<f64>,
    pub point_count: usize,
    pub rms: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CandidateSummary {
    pub total: usize,
    pub direct_passthrough: usize,
    pub roi_expanded: usize,
    pub classifier: String,
    pub bolt_points: usize,
    pub diagnostics: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub counts: PointCounts,
    pub scale: ScaleParams,
    pub min_cluster_size: usize,
    pub structure_noise_points: usize,
    pub sets: Vec<SetSummary>,
    pub planes: Vec<PlaneSummary>,
    pub candidates: CandidateSummary,
    pub bolts: Vec<BoltVector>,
    pub coverage: CoverageReport,
    pub detection: Option<DetectionMetrics>,
    pub timings: Vec<StageTiming>,
    /// Wall time of the whole run; the two parallel branches overlap in `timings`.
    pub total_seconds: f64,
}

impl AnalysisReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Checks the cross-section count invariants.
    pub fn check_consistency(&self) -> Result<()> {
        let per_set: usize = self.sets.iter().map(|s| s.plane_count).sum();
        if per_set != self.planes.len() {
            return Err(Error::Data(format!("{per_set} planes by set, {} listed", self.planes.len())));
        }
        if self.planes.iter().any(|p| p.set_id >= self.sets.len()) {
            return Err(Error::Data("plane refers to an unknown set".into()));
        }
        if self.coverage.per_set.len() != self.sets.len() {
            return Err(Error::Data("coverage does not list every set".into()));
        }
        if self.bolts.iter().enumerate().any(|(k, b)| b.bolt_id != k) {
            return Err(Error::Data("bolt ids are not consecutive".into()));
        }
        let c = &self.counts;
        if !(c.after_outliers <= c.input && c.after_voxel <= c.after_outliers && c.after_floor <= c.after_voxel) {
            return Err(Error::Data("point counts increase between stages".into()));
        }
        Ok(())
    }

    /// Human-readable summary for standard output.
    pub fn summary(&self) -> String {
        use std::fmt::Write as _;
        let mut s = String::new();
        let c = &self.counts;
        let _ = writeln!(
            s,
            "points: {} input, {} after outliers, {} after voxel, {} after floor removal",
            c.input, c.after_outliers, c.after_voxel, c.after_floor
        );
        let _ = writeln!(
            s,
            "point spacing {:.4} m, support radius {:.4} m",
            self.scale.point_spacing, self.scale.support_radius
        );
        let _ = writeln!(s, "{} sets, {} planes", self.sets.len(), self.planes.len());
        for set in &self.sets {
            let _ = writeln!(
                s,
                "  set {}: {:.1}/{:03.0}, {} planes",
                set.set_id + 1,
                set.dip,
                set.dip_direction,
                set.plane_count
            );
        }
        let _ = writeln!(s, "{} candidates, {} bolts", self.candidates.total, self.bolts.len());
        if !self.coverage.unsupported_sets.is_empty() {
            let ids: Vec<String> = self.coverage.unsupported_sets.iter().map(|i| (i + 1).to_string()).collect();
            let _ = writeln!(s, "sets without bolts: {}", ids.join(", "));
        }
        let _ = writeln!(s, "bolts outside all sets: {}", self.coverage.bolts_outside_all_sets.len());
        if let Some(d) = &self.detection {
            let _ = writeln!(
                s,
                "detection: tp {} fp {} fn {}, precision {:.4}, recall {:.4}",
                d.tp, d.fp, d.fn_, d.precision, d.recall
            );
        }
        for t in &self.timings {
            let _ = writeln!(s, "  {:<18} {:>8.2} s", t.stage, t.seconds);
        }
        let _ = writeln!(s, "total time {:.2} s", self.total_seconds);
        s
    }
}

pub struct PipelineOutput {
    pub report: AnalysisReport,
    pub preprocess: PreprocessOutput,
    pub descriptors: DescriptorSet,
    pub structure: StructureResult,
    pub detection: BoltDetection,
    pub bolts: Vec<BoltVector>,
    /// Truth labels of processed points, when truth was supplied.
    pub processed_labels: Option<Vec<PointLabel>>,
}

/// Runs every stage. Descriptors are computed once and shared by the
/// structure and bolt branches, which run concurrently.
pub fn run_pipeline(cloud: &PointCloud, config: &PipelineConfig, truth: Option<&GroundTruth>) -> Result<PipelineOutput> {
    config.validate()?;
    if let Some(t) = truth {
        if t.labels.len() != cloud.len() {
            return Err(Error::Data(format!("{} truth labels for {} points", t.labels.len(), cloud.len())));
        }
    }
    let start = Instant::now();
    let mut timings = Vec::new();
    let pre = preprocess_cloud(cloud, &config.preprocess, &mut timings)?;
    let work = &pre.cloud;

    let t = Instant::now();
    let index = SpatialIndex::new(work);
    let scale = stage("scale", scale_for(work, &index, config.point_spacing))?;
    timings.push(StageTiming::new("scale", t));

    let t = Instant::now();
    let desc = stage("descriptors", compute_descriptors(work, &index, scale.support_radius))?;
    timings.push(StageTiming::new("descriptors", t));

    let t = Instant::now();
    let (structure, detection) = rayon::join(
        || {
            let t = Instant::now();
            let r = stage("structure-map", map_structures(work, &desc, &config.structure, scale.support_radius));
            (r, t.elapsed().as_secs_f64())
        },
        || {
            let t = Instant::now();
            let r = stage("bolt-detect", detect_bolts(work, &desc, &index, config, scale.support_radius));
            (r, t.elapsed().as_secs_f64())
        },
    );
    let (structure, detection) = ((structure.0?, structure.1), (detection.0?, detection.1));
    timings.push(StageTiming { stage: "structure-map".into(), seconds: structure.1 });
    timings.push(StageTiming { stage: "bolt-detect".into(), seconds: detection.1 });
    timings.push(StageTiming::new("parallel-branches", t));
    let (structure, detection) = (structure.0, detection.0);

    let t = Instant::now();
    let bolts = stage(
        "bolt-geometry",
        analyze_bolts(work, &desc, &index, &detection.bolt_points, &structure.planes, &config.geometry, scale.support_radius),
    )?;
    timings.push(StageTiming::new("bolt-geometry", t));

    let t = Instant::now();
    let envelopes = stage("support-viz", envelopes_from_sets(&structure.sets, config.viz.cone_radius))?;
    let coverage = coverage_analysis(&bolts, &envelopes);
    timings.push(StageTiming::new("coverage", t));

    let processed_labels = truth.map(|t| propagate_labels(&pre.assignment, &t.labels, work.len()));
    let detection_metrics = processed_labels.as_ref().map(|labels| {
        let predicted: Vec<Vec<usize>> = bolts.iter().map(|b| b.members.clone()).collect();
        evaluate_detection(&predicted, &truth_bolt_groups(labels), config.match_iou)
    });

    let report = AnalysisReport {
        counts: pre.counts.clone(),
        scale,
        min_cluster_size: structure.min_cluster_size,
        structure_noise_points: structure.noise_points,
        sets: structure
            .sets
            .iter()
            .map(|s| SetSummary {
                set_id: s.set_id,
                plane_count: s.plane_ids.len(),
                point_count: s.members.len(),
                dip: s.dip,
                dip_direction: s.dip_direction,
            })
            .collect(),
        planes: structure
            .planes
            .iter()
            .map(|p| PlaneSummary {
                plane_id: p.plane_id,
                set_id: p.set_id,
                dip: p.dip,
                dip_direction: p.dip_direction,
                centroid: p.centroid,
                point_count: p.members.len(),
                rms: p.rms,
            })
            .collect(),
        candidates: CandidateSummary {
            total: detection.candidates.len(),
            direct_passthrough: detection.candidates.iter().filter(|c| c.origin == CandidateOrigin::DirectPassthrough).count(),
            roi_expanded: detection.candidates.iter().filter(|c| c.origin == CandidateOrigin::RoiExpanded).count(),
            classifier: config.classifier.clone(),
            bolt_points: detection.bolt_points.len(),
            diagnostics: detection.segmentation.diagnostics.clone(),
        },
        bolts: bolts.clone(),
        coverage,
        detection: detection_metrics,
        timings,
        total_seconds: start.elapsed().as_secs_f64(),
    };
    Ok(PipelineOutput {
        report,
        preprocess: pre,
        descriptors: desc,
        structure,
        detection,
        bolts,
        processed_labels,
    })
}

/// Writes the report, stereonet and scene (plus the processed cloud with
/// descriptor channels when `keep_intermediate`). Files already written are
/// removed if a later write fails.
pub fn write_outputs(out: &PipelineOutput, config: &PipelineConfig, dir: &Path, keep_intermediate: bool) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written: Vec<PathBuf> = Vec::new();
    let result = (|| -> Result<()> {
        let report = dir.join("report.json");
        std::fs::write(&report, out.report.to_json()).map_err(|e| Error::io(&report, e))?;
        written.push(report);

        let envelopes = envelopes_from_sets(&out.structure.sets, config.viz.cone_radius)?;
        let svg = dir.join("stereonet.svg");
        render_stereonet_svg(
            &pole_points(&out.structure.planes, config.viz.flip_poles),
            &bolt_points(&out.bolts),
            &envelopes,
            config.viz.flip_poles,
            &svg,
        )?;
        written.push(svg);

        let format: MeshFormat = config.viz.scene_format.parse()?;
        let scene = dir.join(match format {
            MeshFormat::Ply => "scene.ply",
            MeshFormat::Obj => "scene.obj",
        });
        export_scene(&out.structure.planes, &out.bolts, config.viz.scene_metric, &scene, format)?;
        written.push(scene);

        if keep_intermediate {
            let mut cloud = out.preprocess.cloud.clone();
            out.descriptors.attach_to(&mut cloud)?;
            let path = dir.join("processed.ply");
            save_cloud(&cloud, &path, CloudFormat::PlyBinaryLe)?;
            written.push(path);
        }
        Ok(())
    })();
    match result {
        Ok(()) => Ok(written),
        Err(e) => {
            for p in &written {
                let _ = std::fs::remove_file(p);
            }
            Err(e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_scene, SceneSpec};

    fn small_config() -> PipelineConfig {
        let mut c = PipelineConfig::default();
        c.preprocess.voxel_size = None;
        c.structure.scale_min_cluster_size = true;
        c
    }

    #[test]
    fn config_round_trip_and_validation() {
        let c = PipelineConfig::default();
        assert_eq!(PipelineConfig::from_toml(&c.to_toml()).unwrap(), c);
        assert_eq!(PipelineConfig::from_toml("").unwrap(), c);
        assert!(matches!(PipelineConfig::from_toml("classifier = \"nope\""), Err(Error::Config(_))));
        assert!(matches!(PipelineConfig::from_toml("[viz]\ncone_radius = 95.0"), Err(Error::Config(_))));
        assert!(matches!(PipelineConfig::from_toml("unknown = 1"), Err(Error::Config(_))));
        let c = PipelineConfig::from_toml("[structure]\nmin_cluster_size = 500\n").unwrap();
        assert_eq!(c.structure.min_cluster_size, 500);
        assert_eq!(c.structure.min_samples, 100);
    }

    #[test]
    fn majority_label_propagation() {
        let labels = [
            PointLabel::Floor,
            PointLabel::Bolt { bolt_id: 0 },
            PointLabel::Bolt { bolt_id: 0 },
            PointLabel::Noise,
            PointLabel::Floor,
        ];
        let a = [Some(0), Some(0), Some(0), None, Some(1)];
        assert_eq!(propagate_labels(&a, &labels, 2), vec![PointLabel::Bolt { bolt_id: 0 }, PointLabel::Floor]);
        // Ties go to the smaller label.
        let a = [Some(0), Some(0), None, None, None];
        assert_eq!(propagate_labels(&a, &labels, 1), vec![PointLabel::Floor]);
    }

    #[test]
    fn floor_only_scene_aborts_in_floor_stage() {
        let spec = SceneSpec { density: 2_000.0, ..SceneSpec::default() };
        let (cloud, _) = generate_scene(&spec).unwrap();
        let err = run_pipeline(&cloud, &small_config(), None).err().expect("must fail");
        assert!(matches!(err, Error::Stage { stage: "floor-removal", .. }), "{err}");
    }

    #[test]
    fn small_scene_end_to_end_and_determinism() {
        let mut spec = SceneSpec::bolt_benchmark(6, 0.001, 8_000.0, 21);
        for s in spec.sets.iter_mut() {
            s.facets = s.facets.min(2);
        }
        spec.auto_bolts.host_sets = vec![0, 2, 3, 5];
        let (cloud, truth) = generate_scene(&spec).unwrap();
        let cfg = small_config();
        let a = run_pipeline(&cloud, &cfg, Some(&truth)).unwrap();
        a.report.check_consistency().unwrap();
        assert_eq!(a.report.sets.len(), 6, "{}", a.report.summary());
        assert!(a.report.detection.is_some());
        let b = run_pipeline(&cloud, &cfg, Some(&truth)).unwrap();
        let strip = |r: &AnalysisReport| AnalysisReport { timings: vec![], total_seconds: 0.0, ..r.clone() }.to_json();
        assert_eq!(strip(&a.report), strip(&b.report));

        let dir = tempfile::tempdir().unwrap();
        let files = write_outputs(&a, &cfg, dir.path(), true).unwrap();
        assert_eq!(files.len(), 4);
        for f in &files {
            assert!(f.exists());
        }
        let parsed: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&files[0]).unwrap()).unwrap();
        assert_eq!(parsed["sets"].as_array().unwrap().len(), 6);
    }
}
