//! `partlearn` command-line entry point.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use log::info;
use rayon::prelude::*;

use partlearn::bundle::ModelBundle;
use partlearn::detect::{compare_stages, detect_objects, detect_parts, EvalRegion, ObjectDetectorConfig};
use partlearn::eval::{detections_from_csv, detections_to_csv, viewpoint_accuracy, EvalReport, GroundTruthSet, LabeledDetection};
use partlearn::fitting::fit_instances;
use partlearn::manifest::DatasetManifest;
use partlearn::pipeline::{stage_t0, stage_t1, stage_t2, stage_t3, train_all_stages, StageConfig};
use partlearn::raster::{write_atomic, Raster};
use partlearn::store::FsStore;
use partlearn::synth::{generate_benchmark, BenchmarkSpec};
use partlearn::viewpoint::predict_viewpoint;

mod config;

#[derive(Parser, Debug)]
#[command(name = "partlearn", version, about = "Incremental semantic part learning")]
struct Cli {
    /// Worker threads (default: available parallelism).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic benchmark: PPM images, manifest.json, gt.json and truth.json.
    Synth {
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Fit instance boxes on every PPM image of a directory.
    FitBoxes {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also dump each segmentation mask as PGM into this directory.
        #[arg(long)]
        masks: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Run one training stage.
    Train {
        #[arg(long, value_enum)]
        stage: StageArg,
        #[arg(long)]
        manifest: PathBuf,
        /// Image root (default: the manifest's directory).
        #[arg(long)]
        images: Option<PathBuf>,
        #[arg(long)]
        bundle_in: Option<PathBuf>,
        /// The bundle (t1-t3) or, for t0, the curated index as JSON.
        #[arg(long)]
        bundle_out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Detect parts in every image listed by a ground-truth file or found in a directory.
    Detect {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Search inside these object boxes instead of the best root detection.
        #[arg(long)]
        gt: Option<PathBuf>,
    },
    /// Score part detections against ground truth.
    Eval {
        #[arg(long)]
        detections: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, default_value_t = 0.4)]
        iou: f64,
        #[arg(long)]
        report: PathBuf,
        /// Add a viewpoint table using this bundle's classifier.
        #[arg(long, requires = "images")]
        bundle: Option<PathBuf>,
        #[arg(long)]
        images: Option<PathBuf>,
    },
    /// Train every stage and compare them on held-out ground truth.
    Report {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        images: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 0.4)]
        iou: f64,
        #[arg(long, value_enum, default_value_t = RegionArg::ObjectBoxes)]
        region: RegionArg,
        #[arg(long)]
        csv: PathBuf,
        /// Also write the ASCII table here (it is always printed).
        #[arg(long)]
        table: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum StageArg {
    T0,
    T1,
    T2,
    T3,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum RegionArg {
    ObjectBoxes,
    ImageWide,
}

/// Failure kinds, mapped to exit codes.
enum Failure {
    Usage(String),
    Data(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Data(e)
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Some(n) = cli.workers {
        if n == 0 {
            eprintln!("error: --workers must be positive");
            return ExitCode::from(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Data(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::Synth { spec, out, seed } => synth(spec.as_deref(), &out, seed)?,
        Command::FitBoxes { input, out, masks, config } => {
            let cfg = config::load(config.as_deref(), None)?;
            fit_boxes(&input, &out, masks.as_deref(), &cfg)?
        }
        Command::Train {
            stage,
            manifest,
            images,
            bundle_in,
            bundle_out,
            config,
            seed,
        } => {
            let needs_input = matches!(stage, StageArg::T2 | StageArg::T3);
            if needs_input && bundle_in.is_none() {
                return Err(Failure::Usage(format!("train --stage {stage:?} needs --bundle-in").to_lowercase()));
            }
            if !needs_input && bundle_in.is_some() {
                return Err(Failure::Usage("--bundle-in is only used by stages t2 and t3".into()));
            }
            let cfg = config::load(config.as_deref(), seed)?;
            train(stage, &manifest, images.as_deref(), bundle_in.as_deref(), &bundle_out, &cfg)?
        }
        Command::Detect { bundle, images, out, gt } => detect(&bundle, &images, &out, gt.as_deref())?,
        Command::Eval {
            detections,
            gt,
            iou,
            report,
            bundle,
            images,
        } => {
            if !(iou > 0.0 && iou <= 1.0) {
                return Err(Failure::Usage(format!("--iou {iou} outside (0, 1]")));
            }
            eval(&detections, &gt, iou, &report, bundle.as_deref().zip(images.as_deref()))?
        }
        Command::Report {
            manifest,
            gt,
            images,
            config,
            seed,
            iou,
            region,
            csv,
            table,
        } => {
            if !(iou > 0.0 && iou <= 1.0) {
                return Err(Failure::Usage(format!("--iou {iou} outside (0, 1]")));
            }
            let cfg = config::load(config.as_deref(), seed)?;
            let region = match region {
                RegionArg::ObjectBoxes => EvalRegion::ObjectBoxes,
                RegionArg::ImageWide => EvalRegion::ImageWide,
            };
            report(&manifest, &gt, images.as_deref(), &cfg, iou, region, &csv, table.as_deref())?
        }
    }
    Ok(())
}

fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    write_atomic(path, text.as_bytes())?;
    Ok(())
}

fn image_root(manifest: &Path, images: Option<&Path>) -> PathBuf {
    match images {
        Some(p) => p.to_path_buf(),
        None => manifest.parent().map(Path::to_path_buf).unwrap_or_default(),
    }
}

fn synth(spec: Option<&Path>, out: &Path, seed: u64) -> anyhow::Result<()> {
    let spec: BenchmarkSpec = match spec {
        Some(p) => serde_json::from_str(&std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)
            .with_context(|| format!("parsing benchmark spec {}", p.display()))?,
        None => BenchmarkSpec::default(),
    };
    let bench = generate_benchmark(&spec, seed)?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    bench.store.save_to_dir(out)?;
    bench.manifest.save(&out.join("manifest.json"))?;
    write_text(&out.join("gt.json"), &serde_json::to_string_pretty(&bench.evaluation)?)?;
    write_text(&out.join("truth.json"), &serde_json::to_string_pretty(&bench.truth)?)?;
    info!("wrote {} images to {}", bench.store.images.len(), out.display());
    Ok(())
}

fn ppm_files(dir: &Path) -> anyhow::Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).with_context(|| format!("listing {}", d.display()))? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
            } else if path.extension().is_some_and(|e| e == "ppm") {
                files.push(path);
            }
        }
    }
    files.sort();
    Ok(files)
}

fn image_id(root: &Path, path: &Path) -> String {
    let rel = path.strip_prefix(root).unwrap_or(path);
    rel.components()
        .map(|c| c.as_os_str().to_string_lossy())
        .collect::<Vec<_>>()
        .join("/")
}

fn fit_boxes(input: &Path, out: &Path, masks: Option<&Path>, cfg: &StageConfig) -> anyhow::Result<()> {
    let files = ppm_files(input)?;
    if files.is_empty() {
        bail!("no .ppm images under {}", input.display());
    }
    let fits: Vec<(String, Vec<partlearn::BBox>, Vec<u8>)> = files
        .par_iter()
        .map(|p| {
            let r = Raster::load(p)?;
            let fit = fit_instances(&r, &cfg.fit)?;
            Ok((image_id(input, p), fit.boxes, fit.grabcut.segmentation.to_pgm()))
        })
        .collect::<partlearn::Result<_>>()?;
    let mut csv = String::from("image_id,x_min,y_min,x_max,y_max\n");
    for (id, boxes, _) in &fits {
        for b in boxes {
            csv.push_str(&format!("{id},{},{},{},{}\n", b.x_min, b.y_min, b.x_max, b.y_max));
        }
    }
    write_text(out, &csv)?;
    if let Some(dir) = masks {
        for (id, _, pgm) in &fits {
            let path = dir.join(Path::new(id).with_extension("pgm"));
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent)?;
            }
            write_atomic(&path, pgm)?;
        }
    }
    Ok(())
}

fn train(
    stage: StageArg,
    manifest_path: &Path,
    images: Option<&Path>,
    bundle_in: Option<&Path>,
    bundle_out: &Path,
    cfg: &StageConfig,
) -> anyhow::Result<()> {
    let manifest = DatasetManifest::load(manifest_path)?;
    let store = FsStore::new(image_root(manifest_path, images));
    manifest.check_files(&store)?;
    // T0 is deterministic, so later stages recompute the curated crops.
    let curated = stage_t0(&manifest, &store, cfg)?;
    if stage == StageArg::T0 {
        return write_text(bundle_out, &serde_json::to_string_pretty(&curated.index())?);
    }
    let previous = bundle_in.map(ModelBundle::load).transpose()?;
    let bundle = match stage {
        StageArg::T1 => stage_t1(&curated, cfg)?,
        StageArg::T2 => stage_t2(previous.as_ref().expect("checked"), &curated, cfg)?,
        _ => stage_t3(previous.as_ref().expect("checked"), &curated, &manifest.hard_domain, &store, cfg)?,
    };
    if let Some(dir) = bundle_out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    bundle.save(bundle_out)?;
    info!("wrote {:?} bundle to {}", bundle.stage, bundle_out.display());
    Ok(())
}

fn detect(bundle_path: &Path, images: &Path, out: &Path, gt: Option<&Path>) -> anyhow::Result<()> {
    let bundle = ModelBundle::load(bundle_path)?;
    // (image id, object boxes to search; None = locate the object first)
    let work: Vec<(String, Option<Vec<partlearn::BBox>>)> = match gt {
        Some(p) => GroundTruthSet::load(p)?
            .images
            .into_iter()
            .map(|img| (img.image_id, Some(img.objects.into_iter().map(|o| o.bbox).collect())))
            .collect(),
        None => ppm_files(images)?.iter().map(|p| (image_id(images, p), None)).collect(),
    };
    let store = FsStore::new(images);
    let dets: Vec<Vec<LabeledDetection>> = work
        .par_iter()
        .map(|(id, boxes)| {
            let r = partlearn::store::ImageStore::load(&store, id)?;
            let regions = match boxes {
                Some(b) => b.clone(),
                None => match &bundle.root {
                    Some(root) => detect_objects(root, &bundle, &r, &ObjectDetectorConfig::root_only(bundle.part_count()))?
                        .first()
                        .map(|d| vec![d.bbox])
                        .unwrap_or_else(|| vec![r.full_box()]),
                    None => vec![r.full_box()],
                },
            };
            let mut out = Vec::new();
            for region in &regions {
                out.extend(detect_parts(&bundle, &r, region)?.into_iter().map(|d| LabeledDetection {
                    image_id: id.clone(),
                    part_id: d.part_id,
                    bbox: d.bbox,
                    score: d.score,
                }));
            }
            Ok(out)
        })
        .collect::<partlearn::Result<_>>()?;
    let all: Vec<LabeledDetection> = dets.into_iter().flatten().collect();
    write_text(out, &detections_to_csv(&all))
}

fn eval(detections: &Path, gt: &Path, iou: f64, report: &Path, viewpoints: Option<(&Path, &Path)>) -> anyhow::Result<()> {
    let text = std::fs::read_to_string(detections).with_context(|| format!("reading {}", detections.display()))?;
    let dets = detections_from_csv(&text)?;
    let gt = GroundTruthSet::load(gt)?;
    let ids = gt.part_ids();
    let mut rep = EvalReport::build(&dets, &gt, &ids, None, iou);
    if let Some((bundle, images)) = viewpoints {
        let bundle = ModelBundle::load(bundle)?;
        let Some(v) = bundle.viewpoint.as_ref() else {
            bail!("bundle {:?} has no viewpoint classifier", bundle.stage);
        };
        for p in &mut rep.parts {
            p.name = bundle.part_names.get(p.part_id).cloned();
        }
        let mut samples = Vec::new();
        for img in &gt.images {
            let r = Raster::load(images.join(&img.image_id))?;
            for o in img.objects.iter() {
                if let Some(truth) = o.viewpoint {
                    samples.push((truth, predict_viewpoint(v, &r, &o.bbox)?.1));
                }
            }
        }
        rep.viewpoint = Some(viewpoint_accuracy(&samples)?);
    }
    write_text(report, &serde_json::to_string_pretty(&rep)?)?;
    println!("mAP {:.4}", rep.map);
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn report(
    manifest_path: &Path,
    gt: &Path,
    images: Option<&Path>,
    cfg: &StageConfig,
    iou: f64,
    region: EvalRegion,
    csv: &Path,
    table: Option<&Path>,
) -> anyhow::Result<()> {
    let manifest = DatasetManifest::load(manifest_path)?;
    let store = FsStore::new(image_root(manifest_path, images));
    manifest.check_files(&store)?;
    let gt = GroundTruthSet::load(gt)?;
    let stages = train_all_stages(&manifest, &store, cfg)?;
    let cmp = compare_stages(&stages, &store, &gt, region, iou)?;
    write_text(csv, &cmp.to_csv())?;
    let ascii = cmp.to_table();
    if let Some(t) = table {
        write_text(t, &ascii)?;
    }
    print!("{ascii}");
    Ok(())
}
