//! `footprint`: encode, refine, evaluate and synthesize building polygons.
//!
//! Exit codes: 0 success, 1 domain failure (geometry, failed checks),
//! 2 usage or input errors.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use footprint_core::dataset::{
    read_coco, read_predictions, render_svg, simulate_predictions, synth_scenes, write_coco, write_predictions,
    DatasetError, NoiseConfig, PredictionRecord, ShapeKind, SynthConfig,
};
use footprint_core::encoding::{encode, EncodedPolygon, EncodingConfig, Scheme};
use footprint_core::geometry::Ring;
use footprint_core::metrics::{evaluate, CIouMode, EvalConfig, GtInstance, IouMode, PredInstance};
use footprint_core::refinement::{refine_stage, RefineConfig, RefineStage};
use footprint_core::selfcheck::{self, Fault, KernelCheckConfig};
use footprint_core::HyperParams;

#[derive(Parser)]
#[command(name = "footprint", version, about = "Building polygon encoding, refinement and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SchemeArg {
    Uniform,
    Zeropad,
}

impl From<SchemeArg> for Scheme {
    fn from(s: SchemeArg) -> Self {
        match s {
            SchemeArg::Uniform => Scheme::UniformSampling,
            SchemeArg::Zeropad => Scheme::ZeroPad,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    Raw,
    ScoreFilter,
    Full,
}

impl From<StageArg> for RefineStage {
    fn from(s: StageArg) -> Self {
        match s {
            StageArg::Raw => RefineStage::Raw,
            StageArg::ScoreFilter => RefineStage::ScoreFilter,
            StageArg::Full => RefineStage::Full,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum IouModeArg {
    PerImage,
    Pooled,
}

#[derive(Clone, Copy, ValueEnum)]
enum CIouModeArg {
    PerPairMean,
    Pooled,
}

#[derive(Clone, Copy, ValueEnum)]
enum ShapeArg {
    AxisRect,
    RotatedRect,
    LShape,
    RegularPolygon,
}

impl From<ShapeArg> for ShapeKind {
    fn from(s: ShapeArg) -> Self {
        match s {
            ShapeArg::AxisRect => ShapeKind::AxisRect,
            ShapeArg::RotatedRect => ShapeKind::RotatedRect,
            ShapeArg::LShape => ShapeKind::LShape,
            ShapeArg::RegularPolygon => ShapeKind::RegularPolygon,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Encode every annotation of a COCO file into fixed-length sequences.
    Encode {
        #[arg(long)]
        coco: PathBuf,
        #[arg(long, value_enum, default_value = "uniform")]
        scheme: SchemeArg,
        #[arg(long, default_value_t = 96, value_parser = clap::value_parser!(u64).range(4..))]
        m: u64,
        /// All-ones corner labels.
        #[arg(long)]
        phase1: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Turn scored vertex sequences into polygons.
    Refine {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long, default_value_t = 0.1)]
        threshold: f64,
        #[arg(long, default_value_t = 2, value_parser = clap::value_parser!(u64).range(1..))]
        nms_window: u64,
        #[arg(long, default_value_t = 3, value_parser = clap::value_parser!(u64).range(3..))]
        min_vertices: u64,
        #[arg(long, value_enum, default_value = "full")]
        stage: StageArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predicted polygons against COCO ground truth.
    Eval {
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long, value_enum, default_value = "per-image")]
        iou_mode: IouModeArg,
        #[arg(long, value_enum, default_value = "per-pair-mean")]
        c_iou_mode: CIouModeArg,
        /// Report AP/AR of images without ground truth as perfect when they
        /// also have no predictions.
        #[arg(long)]
        empty_as_perfect: bool,
        /// Report file; printed to stdout as well.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate synthetic scenes, optionally with simulated noisy predictions.
    Synth {
        #[arg(long, default_value_t = 100, value_parser = clap::value_parser!(u64).range(1..))]
        n: u64,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, value_delimiter = ',')]
        shapes: Vec<ShapeArg>,
        #[arg(long)]
        noisy_pred: Option<PathBuf>,
        #[arg(long, default_value_t = 0.0)]
        coord_noise: f64,
        #[arg(long, default_value_t = 0.0)]
        score_noise: f64,
        #[arg(long, default_value_t = 96, value_parser = clap::value_parser!(u64).range(4..))]
        m: u64,
    },
    /// Attention kernel invariants and loss gradient checks.
    KernelCheck {
        #[arg(long, default_value_t = 8, value_parser = clap::value_parser!(u64).range(1..))]
        heads: u64,
        #[arg(long, default_value_t = 4, value_parser = clap::value_parser!(u64).range(1..))]
        levels: u64,
        #[arg(long, default_value_t = 4, value_parser = clap::value_parser!(u64).range(1..))]
        points: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
    /// Print the default hyperparameters as TOML.
    Defaults,
    /// Draw one image's ground truth and predictions as SVG.
    Render {
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        pred: Option<PathBuf>,
        #[arg(long)]
        image_id: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug)]
enum CliError {
    /// Bad flags or unreadable input.
    Input(String),
    /// Valid input that failed to process.
    Domain(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Input(_) => 2,
            CliError::Domain(_) => 1,
        }
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        match e {
            DatasetError::Encoding(_) => CliError::Domain(e.to_string()),
            _ => CliError::Input(e.to_string()),
        }
    }
}

fn write_error(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Domain(format!("{}: {e}", path.display()))
}

fn histogram(counts: impl IntoIterator<Item = usize>) -> String {
    let mut h: BTreeMap<usize, usize> = BTreeMap::new();
    for c in counts {
        *h.entry(c).or_default() += 1;
    }
    h.iter().map(|(k, v)| format!("{k}:{v}")).collect::<Vec<_>>().join(" ")
}

fn cmd_encode(coco: &Path, scheme: Scheme, m: usize, phase1: bool, out: &Path) -> Result<(), CliError> {
    let data = read_coco(coco)?;
    let cfg = EncodingConfig { m, phase1_labels: phase1 };
    let mut records = Vec::new();
    let mut failures = Vec::new();
    let mut corners = 0usize;
    let mut simplified = 0usize;
    for scene in &data.scenes {
        for (k, ring) in scene.instances.iter().enumerate() {
            match encode(ring, scheme, &cfg) {
                Ok(e) => {
                    corners += ring.len();
                    simplified += (ring.len() > m) as usize;
                    records.push(PredictionRecord {
                        image_id: scene.image_id,
                        score: 1.0,
                        polygon: e.flat_coords(),
                        corner_scores: Some(e.corner_flags().to_vec()),
                        scheme: Some(scheme),
                    });
                }
                Err(e) => failures.push(format!("image {} instance {k}: {e}", scene.image_id)),
            }
        }
    }
    write_predictions(out, &records)?;
    let mean = if records.is_empty() { 0.0 } else { corners as f64 / records.len() as f64 };
    println!(
        "encoded={} skipped_annotations={} failed={} scheme={} m={m} mean_corners={mean:.2} simplified={simplified}",
        records.len(),
        data.skipped.len(),
        failures.len(),
        scheme.as_str()
    );
    for f in &failures {
        eprintln!("{f}");
    }
    if failures.is_empty() {
        Ok(())
    } else {
        Err(CliError::Domain(format!("{} instances failed to encode", failures.len())))
    }
}

fn cmd_refine(pred: &Path, cfg: &RefineConfig, stage: RefineStage, out: &Path) -> Result<(), CliError> {
    cfg.validate().map_err(|e| CliError::Input(e.to_string()))?;
    let records = read_predictions(pred)?;
    let mut refined = Vec::new();
    let mut before = Vec::new();
    let mut after = Vec::new();
    let mut no_scores = 0;
    let mut failures = Vec::new();
    for (i, r) in records.iter().enumerate() {
        let Some(scores) = &r.corner_scores else {
            no_scores += 1;
            continue;
        };
        let e = EncodedPolygon::new(r.points(), scores.clone(), r.scheme.unwrap_or(Scheme::UniformSampling));
        match refine_stage(&e, cfg, stage) {
            Ok(ring) => {
                before.push(e.len());
                after.push(ring.len());
                refined.push(PredictionRecord {
                    image_id: r.image_id,
                    score: r.score,
                    polygon: ring.to_flat(),
                    corner_scores: None,
                    scheme: None,
                });
            }
            Err(err) => failures.push(format!("record {i}: {err}")),
        }
    }
    write_predictions(out, &refined)?;
    println!(
        "refined={} skipped_without_scores={no_scores} failed={}",
        refined.len(),
        failures.len()
    );
    println!("vertices_before {}", histogram(before));
    println!("vertices_after {}", histogram(after));
    for f in &failures {
        eprintln!("{f}");
    }
    if failures.is_empty() {
        Ok(())
    } else {
        Err(CliError::Domain(format!("{} records failed to refine", failures.len())))
    }
}

fn load_eval_inputs(gt: &Path, pred: Option<&Path>) -> Result<(EvalConfig, Vec<GtInstance>, Vec<PredInstance>, usize), CliError> {
    let data = read_coco(gt)?;
    let mut cfg = EvalConfig::default();
    let mut gts = Vec::new();
    for s in &data.scenes {
        cfg.image_sizes.insert(s.image_id, (s.width, s.height));
        gts.extend(s.instances.iter().map(|r| GtInstance {
            image_id: s.image_id,
            ring: r.clone(),
        }));
    }
    let mut preds = Vec::new();
    let mut invalid = 0;
    if let Some(pred) = pred {
        for r in read_predictions(pred)? {
            match Ring::from_flat_lenient(&r.polygon) {
                Ok(ring) => preds.push(PredInstance {
                    image_id: r.image_id,
                    ring,
                    score: r.score,
                }),
                Err(_) => invalid += 1,
            }
        }
    }
    Ok((cfg, gts, preds, invalid))
}

fn cmd_eval(
    gt: &Path,
    pred: &Path,
    iou_mode: IouMode,
    c_iou_mode: CIouMode,
    empty_as_perfect: bool,
    out: Option<&Path>,
) -> Result<(), CliError> {
    let (mut cfg, gts, preds, invalid) = load_eval_inputs(gt, Some(pred))?;
    cfg.iou_mode = iou_mode;
    cfg.c_iou_mode = c_iou_mode;
    cfg.empty_as_perfect = empty_as_perfect;
    let report = evaluate(&gts, &preds, &cfg);
    let text = report.to_text();
    if invalid > 0 {
        eprintln!("skipped {invalid} predictions with invalid polygons");
    }
    print!("{text}");
    if let Some(out) = out {
        std::fs::write(out, &text).map_err(|e| write_error(out, e))?;
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_synth(
    n: usize,
    seed: u64,
    out: &Path,
    shapes: Vec<ShapeKind>,
    noisy_pred: Option<&Path>,
    coord_noise: f64,
    score_noise: f64,
    m: usize,
) -> Result<(), CliError> {
    if !(coord_noise >= 0.0 && score_noise >= 0.0) {
        return Err(CliError::Input("noise levels must be non-negative".into()));
    }
    let mut cfg = SynthConfig::default();
    if !shapes.is_empty() {
        cfg.shapes = shapes;
    }
    let scenes = synth_scenes(n, seed, &cfg);
    write_coco(out, &scenes).map_err(|e| write_error(out, e))?;
    let instances: usize = scenes.iter().map(|s| s.instances.len()).sum();
    println!("scenes={} instances={instances}", scenes.len());
    if let Some(path) = noisy_pred {
        let noise = NoiseConfig {
            m,
            coord_sigma: coord_noise,
            score_sigma: score_noise,
            seed,
        };
        let records = simulate_predictions(&scenes, &noise)?;
        write_predictions(path, &records).map_err(|e| write_error(path, e))?;
        println!("predictions={}", records.len());
    }
    Ok(())
}

fn cmd_kernel_check(cfg: &KernelCheckConfig) -> Result<(), CliError> {
    let results = selfcheck::run_all(cfg);
    let mut failed = 0;
    for r in &results {
        println!("{} {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
        failed += (!r.passed) as usize;
    }
    if failed == 0 {
        Ok(())
    } else {
        Err(CliError::Domain(format!("{failed} of {} properties failed", results.len())))
    }
}

fn cmd_render(gt: &Path, pred: Option<&Path>, image_id: u64, out: &Path) -> Result<(), CliError> {
    let data = read_coco(gt)?;
    let scene = data
        .scenes
        .iter()
        .find(|s| s.image_id == image_id)
        .ok_or_else(|| CliError::Input(format!("image {image_id} not in {}", gt.display())))?;
    let mut rings = Vec::new();
    if let Some(pred) = pred {
        for r in read_predictions(pred)? {
            if r.image_id == image_id {
                if let Ok(ring) = Ring::from_flat_lenient(&r.polygon) {
                    rings.push(ring);
                }
            }
        }
    }
    std::fs::write(out, render_svg(scene, &rings)).map_err(|e| write_error(out, e))
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Encode {
            coco,
            scheme,
            m,
            phase1,
            out,
        } => cmd_encode(&coco, scheme.into(), m as usize, phase1, &out),
        Command::Refine {
            pred,
            threshold,
            nms_window,
            min_vertices,
            stage,
            out,
        } => {
            let cfg = RefineConfig {
                score_threshold: threshold,
                nms_window: nms_window as usize,
                min_vertices: min_vertices as usize,
            };
            cmd_refine(&pred, &cfg, stage.into(), &out)
        }
        Command::Eval {
            gt,
            pred,
            iou_mode,
            c_iou_mode,
            empty_as_perfect,
            out,
        } => {
            let iou_mode = match iou_mode {
                IouModeArg::PerImage => IouMode::PerImage,
                IouModeArg::Pooled => IouMode::Pooled,
            };
            let c_iou_mode = match c_iou_mode {
                CIouModeArg::PerPairMean => CIouMode::PerPairMean,
                CIouModeArg::Pooled => CIouMode::Pooled,
            };
            cmd_eval(&gt, &pred, iou_mode, c_iou_mode, empty_as_perfect, out.as_deref())
        }
        Command::Synth {
            n,
            seed,
            out,
            shapes,
            noisy_pred,
            coord_noise,
            score_noise,
            m,
        } => cmd_synth(
            n as usize,
            seed,
            &out,
            shapes.into_iter().map(Into::into).collect(),
            noisy_pred.as_deref(),
            coord_noise,
            score_noise,
            m as usize,
        ),
        Command::KernelCheck {
            heads,
            levels,
            points,
            seed,
            inject_fault,
        } => cmd_kernel_check(&KernelCheckConfig {
            heads: heads as usize,
            levels: levels as usize,
            points: points as usize,
            seed,
            fault: inject_fault.then_some(Fault::UnnormalizedWeights),
            ..KernelCheckConfig::default()
        }),
        Command::Defaults => {
            print!("{}", HyperParams::default().to_toml());
            Ok(())
        }
        Command::Render {
            gt,
            pred,
            image_id,
            out,
        } => cmd_render(&gt, pred.as_deref(), image_id, &out),
    }
}

fn main() -> ExitCode {
    // clap exits with 2 on usage errors by itself.
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (CliError::Input(msg) | CliError::Domain(msg)) = &e;
            eprintln!("error: {msg}");
            ExitCode::from(e.code())
        }
    }
}
