use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use rockmass_core::bolt_detect::{evaluate_detection, precision_recall, BoltSegmentation, CandidateCluster};
use rockmass_core::bolt_geometry::{analyze_bolts, BoltVector};
use rockmass_core::descriptors::{compute_descriptors, DescriptorSet};
use rockmass_core::io::{load_cloud_auto, save_cloud, CloudFormat};
use rockmass_core::pipeline::{
    detect_bolts, map_structures, preprocess_cloud, propagate_labels, run_pipeline, scale_for, truth_bolt_groups,
    write_outputs, PipelineConfig,
};
use rockmass_core::structure::StructureResult;
use rockmass_core::synth::{generate_scene, GroundTruth, SceneSpec};
use rockmass_core::viz::{
    bolt_points, coverage_analysis, envelopes_from_sets, export_scene, pole_points, render_stereonet_svg,
};
use rockmass_core::{Error, PointCloud, SpatialIndex};
use serde::{Deserialize, Serialize};

/// Rock-mass discontinuity mapping and rock-bolt analysis.
///
/// Thread count comes from ROCKMASS_THREADS (default: all cores).
#[derive(Parser)]
#[command(name = "rockmass", version)]
struct Cli {
    /// Pipeline configuration (TOML). Flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// More log output (repeatable).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Default)]
struct Overrides {
    /// Voxel size in metres; 0 disables downsampling.
    #[arg(long)]
    voxel_size: Option<f64>,
    /// Skip cloth-simulation floor removal.
    #[arg(long)]
    no_floor_removal: bool,
    /// Fixed point spacing instead of estimating it.
    #[arg(long)]
    point_spacing: Option<f64>,
    #[arg(long)]
    planarity_threshold: Option<f64>,
    #[arg(long)]
    min_cluster_size: Option<usize>,
    /// Scale min_cluster_size with the cloud size.
    #[arg(long)]
    scale_min_cluster_size: bool,
    #[arg(long)]
    curvature_percentile: Option<f64>,
    /// `baseline`, `constant:<p>` or `external:<command>`.
    #[arg(long)]
    classifier: Option<String>,
    /// Set envelope cone radius in degrees.
    #[arg(long)]
    cone_radius: Option<f64>,
    /// Plot poles at the opposite azimuth.
    #[arg(long)]
    flip_poles: bool,
    /// Bolt colouring in the scene: none, exposed-length, deviation.
    #[arg(long)]
    scene_metric: Option<String>,
    /// Scene mesh format: ply or obj.
    #[arg(long)]
    scene_format: Option<String>,
}

impl Overrides {
    fn apply(&self, c: &mut PipelineConfig) -> Result<(), Error> {
        if let Some(v) = self.voxel_size {
            c.preprocess.voxel_size = (v > 0.0).then_some(v);
        }
        if self.no_floor_removal {
            c.preprocess.remove_floor = false;
        }
        if self.point_spacing.is_some() {
            c.point_spacing = self.point_spacing;
        }
        if let Some(v) = self.planarity_threshold {
            c.structure.planarity_threshold = v;
        }
        if let Some(v) = self.min_cluster_size {
            c.structure.min_cluster_size = v;
            c.structure.scale_min_cluster_size = false;
        }
        if self.scale_min_cluster_size {
            c.structure.scale_min_cluster_size = true;
        }
        if let Some(v) = self.curvature_percentile {
            c.candidates.percentile = v;
        }
        if let Some(v) = &self.classifier {
            c.classifier = v.clone();
        }
        if let Some(v) = self.cone_radius {
            c.viz.cone_radius = v;
        }
        if self.flip_poles {
            c.viz.flip_poles = true;
        }
        if let Some(v) = &self.scene_metric {
            c.viz.scene_metric = v.parse().map_err(|e: Error| Error::Config(e.to_string()))?;
        }
        if let Some(v) = &self.scene_format {
            c.viz.scene_format = v.clone();
        }
        c.validate()
    }
}

#[derive(Subcommand)]
enum Command {
    /// Outlier removal, voxel downsampling and floor removal.
    Preprocess {
        input: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        /// Label table of the input points; propagated to the output.
        #[arg(long)]
        truth: Option<PathBuf>,
        /// Where to write the propagated label table.
        #[arg(long, requires = "truth")]
        labels_out: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Per-point eigen descriptors, written as cloud channels.
    Descriptors {
        input: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Discontinuity sets and planes from a cloud with descriptor channels.
    MapStructures {
        input: PathBuf,
        /// Structure JSON.
        #[arg(short, long)]
        output: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Candidate filtering and per-point bolt classification.
    DetectBolts {
        input: PathBuf,
        /// Detection JSON.
        #[arg(short, long)]
        output: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Bolt vectors and quality metrics from detected bolt points.
    AnalyzeBolts {
        input: PathBuf,
        /// Detection JSON from `detect-bolts`.
        #[arg(long)]
        detection: PathBuf,
        /// Structure JSON from `map-structures`, for roof-normal fallback.
        #[arg(long)]
        structure: Option<PathBuf>,
        /// Bolt JSON.
        #[arg(short, long)]
        output: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Stereonet SVG and 3D scene from structure and bolt JSON.
    Visualize {
        #[arg(long)]
        structure: PathBuf,
        #[arg(long)]
        bolts: Option<PathBuf>,
        /// Output directory.
        #[arg(short, long)]
        output: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Synthetic tunnel with planted sets and bolts.
    Synth {
        /// Scene spec (TOML).
        #[arg(long, conflicts_with = "benchmark")]
        spec: Option<PathBuf>,
        /// Built-in scene: `structure` or `bolts`.
        #[arg(long)]
        benchmark: Option<String>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Surface density in points per square metre (benchmarks only).
        #[arg(long)]
        density: Option<f64>,
        /// Output cloud; labels go next to it as `<stem>.labels`.
        #[arg(short, long)]
        output: PathBuf,
        /// Also write the planted truth as JSON.
        #[arg(long)]
        truth_json: Option<PathBuf>,
    },
    /// Every stage end to end.
    Pipeline {
        input: PathBuf,
        /// Output directory.
        #[arg(short, long)]
        output: PathBuf,
        /// Label table for detection metrics.
        #[arg(long)]
        truth: Option<PathBuf>,
        /// Also write the processed cloud with descriptor channels.
        #[arg(long)]
        keep_intermediate: bool,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Detection metrics, from bolt JSON and labels or from raw counts.
    Evaluate {
        /// Bolt JSON from `analyze-bolts`.
        #[arg(long, requires = "truth", conflicts_with_all = ["tp", "fp", "fn_count"])]
        bolts: Option<PathBuf>,
        /// Label table of the cloud the bolts index into.
        #[arg(long)]
        truth: Option<PathBuf>,
        #[arg(long, default_value_t = 0.5)]
        match_iou: f64,
        #[arg(long, requires_all = ["fp", "fn_count"])]
        tp: Option<usize>,
        #[arg(long)]
        fp: Option<usize>,
        #[arg(long = "fn")]
        fn_count: Option<usize>,
    },
}

#[derive(Serialize, Deserialize)]
struct DetectionFile {
    candidates: Vec<CandidateCluster>,
    segmentation: BoltSegmentation,
    bolt_points: Vec<usize>,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<Error>()) {
        Some(Error::Stage { source, .. }) => match source.root() {
            Error::Config(_) | Error::Spec(_) => 2,
            _ => 4,
        },
        Some(Error::Config(_) | Error::Spec(_) | Error::Argument(_)) => 2,
        Some(Error::Parse { .. } | Error::Data(_) | Error::Io { .. }) => 3,
        Some(Error::Degenerate(_)) => 4,
        None => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Ok(t) = std::env::var("ROCKMASS_THREADS") {
        match t.parse::<usize>() {
            Ok(n) if n > 0 => {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
            _ => {
                eprintln!("error: ROCKMASS_THREADS must be a positive integer, got `{t}`");
                return ExitCode::from(2);
            }
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn config(path: Option<&Path>, overrides: &Overrides) -> Result<PipelineConfig> {
    let mut c = match path {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    overrides.apply(&mut c)?;
    Ok(c)
}

fn load(path: &Path) -> Result<PointCloud> {
    Ok(load_cloud_auto(path).with_context(|| format!("reading {}", path.display()))?)
}

fn save(cloud: &PointCloud, path: &Path) -> Result<()> {
    let fmt = match path.extension().and_then(|e| e.to_str()) {
        Some("xyz" | "txt" | "pts") => CloudFormat::Xyz,
        _ => CloudFormat::PlyBinaryLe,
    };
    save_cloud(cloud, path, fmt)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io { path: path.display().to_string(), source: e })?;
    serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())).into())
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text).map_err(|e| Error::Io { path: path.display().to_string(), source: e })?;
    Ok(())
}

fn read_labels(path: &Path) -> Result<Vec<rockmass_core::synth::PointLabel>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io { path: path.display().to_string(), source: e })?;
    Ok(GroundTruth::parse_label_table(&text)?)
}

/// Cloud with descriptor channels; recomputes them if absent.
fn load_described(path: &Path, c: &PipelineConfig) -> Result<(PointCloud, SpatialIndex, DescriptorSet, f64)> {
    let cloud = load(path)?;
    let index = SpatialIndex::new(&cloud);
    let scale = scale_for(&cloud, &index, c.point_spacing)?;
    let desc = match DescriptorSet::from_channels(&cloud, scale.support_radius) {
        Ok(d) => d,
        Err(_) => {
            log::info!("no descriptor channels in {}; computing them", path.display());
            compute_descriptors(&cloud, &index, scale.support_radius)?
        }
    };
    Ok((cloud, index, desc, scale.support_radius))
}

fn run(cli: Cli) -> Result<()> {
    let cfg_path = cli.config.as_deref();
    match cli.command {
        Command::Preprocess { input, output, truth, labels_out, overrides } => {
            let c = config(cfg_path, &overrides)?;
            let cloud = load(&input)?;
            let labels = truth.as_deref().map(read_labels).transpose()?;
            if let Some(l) = &labels {
                if l.len() != cloud.len() {
                    return Err(Error::Data(format!("{} labels for {} points", l.len(), cloud.len())).into());
                }
            }
            let out = preprocess_cloud(&cloud, &c.preprocess, &mut Vec::new())?;
            save(&out.cloud, &output)?;
            if let (Some(l), Some(path)) = (labels, labels_out) {
                let labels = propagate_labels(&out.assignment, &l, out.cloud.len());
                GroundTruth { labels, ..Default::default() }.write_label_table(path)?;
            }
            let k = &out.counts;
            println!(
                "{} -> {} after outliers -> {} after voxel -> {} after floor removal",
                k.input, k.after_outliers, k.after_voxel, k.after_floor
            );
        }
        Command::Descriptors { input, output, overrides } => {
            let c = config(cfg_path, &overrides)?;
            let mut cloud = load(&input)?;
            let index = SpatialIndex::new(&cloud);
            let scale = scale_for(&cloud, &index, c.point_spacing)?;
            let desc = compute_descriptors(&cloud, &index, scale.support_radius)?;
            desc.attach_to(&mut cloud)?;
            save(&cloud, &output)?;
            println!(
                "point spacing {:.4} m, support radius {:.4} m, {} points",
                scale.point_spacing,
                scale.support_radius,
                cloud.len()
            );
        }
        Command::MapStructures { input, output, overrides } => {
            let c = config(cfg_path, &overrides)?;
            let (cloud, _, desc, radius) = load_described(&input, &c)?;
            let s = map_structures(&cloud, &desc, &c.structure, radius)?;
            write_json(&s, &output)?;
            println!("{} sets, {} planes", s.sets.len(), s.planes.len());
            for set in &s.sets {
                println!("  set {}: {:.1}/{:03.0}, {} planes", set.set_id + 1, set.dip, set.dip_direction, set.plane_ids.len());
            }
        }
        Command::DetectBolts { input, output, overrides } => {
            let c = config(cfg_path, &overrides)?;
            let (cloud, index, desc, radius) = load_described(&input, &c)?;
            let d = detect_bolts(&cloud, &desc, &index, &c, radius)?;
            for msg in &d.segmentation.diagnostics {
                log::warn!("{msg}");
            }
            println!("{} candidates, {} bolt points", d.candidates.len(), d.bolt_points.len());
            write_json(
                &DetectionFile { candidates: d.candidates, segmentation: d.segmentation, bolt_points: d.bolt_points },
                &output,
            )?;
        }
        Command::AnalyzeBolts { input, detection, structure, output, overrides } => {
            let c = config(cfg_path, &overrides)?;
            let (cloud, index, desc, radius) = load_described(&input, &c)?;
            let det: DetectionFile = read_json(&detection)?;
            if det.bolt_points.iter().any(|&i| i >= cloud.len()) {
                return Err(Error::Data("detection refers to points outside the cloud".into()).into());
            }
            let planes = match structure {
                Some(p) => read_json::<StructureResult>(&p)?.planes,
                None => Vec::new(),
            };
            let bolts = analyze_bolts(&cloud, &desc, &index, &det.bolt_points, &planes, &c.geometry, radius)?;
            write_json(&bolts, &output)?;
            println!("{} bolts", bolts.len());
            for b in &bolts {
                println!(
                    "  bolt {}: L {:.3} m, deviation {:.1} deg, trend/plunge {:.0}/{:.0}",
                    b.bolt_id, b.exposed_length, b.deviation, b.dip_direction, b.dip
                );
            }
        }
        Command::Visualize { structure, bolts, output, overrides } => {
            let c = config(cfg_path, &overrides)?;
            let s: StructureResult = read_json(&structure)?;
            let bolts: Vec<BoltVector> = match bolts {
                Some(p) => read_json(&p)?,
                None => Vec::new(),
            };
            std::fs::create_dir_all(&output).map_err(|e| Error::Io { path: output.display().to_string(), source: e })?;
            let envelopes = envelopes_from_sets(&s.sets, c.viz.cone_radius)?;
            render_stereonet_svg(
                &pole_points(&s.planes, c.viz.flip_poles),
                &bolt_points(&bolts),
                &envelopes,
                c.viz.flip_poles,
                output.join("stereonet.svg"),
            )?;
            let format = c.viz.scene_format.parse()?;
            let ext = if c.viz.scene_format == "obj" { "obj" } else { "ply" };
            export_scene(&s.planes, &bolts, c.viz.scene_metric, output.join(format!("scene.{ext}")), format)?;
            let coverage = coverage_analysis(&bolts, &envelopes);
            write_json(&coverage, &output.join("coverage.json"))?;
            println!(
                "{} bolts outside all sets, unsupported sets: {:?}",
                coverage.bolts_outside_all_sets.len(),
                coverage.unsupported_sets.iter().map(|i| i + 1).collect::<Vec<_>>()
            );
        }
        Command::Synth { spec, benchmark, seed, density, output, truth_json } => {
            let spec = match (spec, benchmark.as_deref()) {
                (Some(p), _) => SceneSpec::load(p)?,
                (None, Some("structure")) => SceneSpec::structure_benchmark(6, 0.002, density.unwrap_or(20_000.0), seed),
                (None, Some("bolts")) => SceneSpec::bolt_benchmark(50, 0.001, density.unwrap_or(20_000.0), seed),
                (None, Some(other)) => return Err(Error::Argument(format!("unknown benchmark `{other}`")).into()),
                (None, None) => return Err(Error::Argument("give --spec or --benchmark".into()).into()),
            };
            let (cloud, truth) = generate_scene(&spec)?;
            save(&cloud, &output)?;
            truth.write_label_table(output.with_extension("labels"))?;
            if let Some(p) = truth_json {
                write_json(&GroundTruth { labels: Vec::new(), ..truth.clone() }, &p)?;
            }
            println!(
                "{} points, {} planes in {} sets, {} bolts",
                cloud.len(),
                truth.planes.len(),
                truth.sets.len(),
                truth.bolts.len()
            );
        }
        Command::Pipeline { input, output, truth, keep_intermediate, overrides } => {
            let c = config(cfg_path, &overrides)?;
            let cloud = load(&input)?;
            let truth = truth
                .as_deref()
                .map(|p| read_labels(p).map(|labels| GroundTruth { labels, ..Default::default() }))
                .transpose()?;
            let out = run_pipeline(&cloud, &c, truth.as_ref())?;
            write_outputs(&out, &c, &output, keep_intermediate)?;
            if keep_intermediate {
                if let Some(labels) = &out.processed_labels {
                    GroundTruth { labels: labels.clone(), ..Default::default() }
                        .write_label_table(output.join("processed.labels"))?;
                }
            }
            print!("{}", out.report.summary());
        }
        Command::Evaluate { bolts, truth, match_iou, tp, fp, fn_count } => {
            let metrics = if let (Some(tp), Some(fp), Some(fn_)) = (tp, fp, fn_count) {
                let (precision, recall) = precision_recall(tp, fp, fn_);
                serde_json::json!({ "tp": tp, "fp": fp, "fn": fn_, "precision": precision, "recall": recall })
            } else if let (Some(b), Some(t)) = (bolts, truth) {
                let bolts: Vec<BoltVector> = read_json(&b)?;
                let labels = read_labels(&t)?;
                if bolts.iter().flat_map(|b| &b.members).any(|&i| i >= labels.len()) {
                    return Err(Error::Data("bolt members outside the labelled cloud".into()).into());
                }
                let predicted: Vec<Vec<usize>> = bolts.into_iter().map(|b| b.members).collect();
                serde_json::to_value(evaluate_detection(&predicted, &truth_bolt_groups(&labels), match_iou))?
            } else {
                return Err(Error::Argument("give --bolts with --truth, or --tp/--fp/--fn".into()).into());
            };
            println!("{}", serde_json::to_string_pretty(&metrics)?);
        }
    }
    Ok(())
}
