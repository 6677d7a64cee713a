//! Command-line front end: dataset simulation, classic detectors, the
//! transformer forward pass, score-to-object conversion, assignment
//! debugging, noise injection, kernel self-checks, and report rendering.
//!
//! Exit codes: 0 success, 1 runtime error (one-line diagnostic on
//! stderr), 2 usage error.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::Deserialize;

use hyperspod::error::{Error, Result};
use hyperspod::{annotate, assign, eval, hsicube, htd, kernels, scenesynth, specmodel};

/// Documented fallback values; see `defaults.toml` at the crate root.
const DEFAULTS_TOML: &str = include_str!("../../defaults.toml");

#[derive(Debug, Deserialize)]
#[allow(dead_code)] // some sections exist for override documentation only
struct Defaults {
    assign: AssignDefaults,
    ccdn: CcdnDefaults,
    nms: NmsDefaults,
    forward: ForwardDefaults,
    eval: EvalDefaults,
    detect: DetectDefaults,
}

#[derive(Debug, Deserialize)]
struct AssignDefaults {
    tau_iou: f64,
    t_cap: usize,
}

#[derive(Debug, Deserialize)]
#[allow(dead_code)]
struct CcdnDefaults {
    tau1: f64,
    tau2: f64,
    n_pairs: usize,
}

#[derive(Debug, Deserialize)]
#[allow(dead_code)]
struct NmsDefaults {
    iou: f64,
}

#[derive(Debug, Deserialize)]
#[allow(dead_code)]
struct ForwardDefaults {
    q_match: usize,
    v_radiance: f64,
    v_airborne: f64,
    v_reflectance: f64,
    anchor_size: f64,
}

#[derive(Debug, Deserialize)]
struct EvalDefaults {
    max_dets: usize,
    enforce_max_dets: bool,
    inner: usize,
    outer: usize,
    extra_iou: f64,
}

#[derive(Debug, Deserialize)]
struct DetectDefaults {
    win_in: usize,
    win_out: usize,
}

impl Defaults {
    fn load(path: Option<&Path>) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p)
                .map_err(|e| Error::InvalidConfig(format!("defaults file {}: {e}", p.display())))?,
            None => DEFAULTS_TOML.to_string(),
        };
        toml::from_str(&text).map_err(|e| Error::InvalidConfig(format!("defaults: {e}")))
    }
}

#[derive(Parser)]
#[command(name = "hyperspod", version, about = "Hyperspectral point-object detection toolkit")]
struct Cli {
    /// Worker threads (default: logical cores); results never depend on it
    #[arg(long, global = true)]
    workers: Option<usize>,

    /// Alternate defaults file (see defaults.toml)
    #[arg(long, global = true)]
    defaults: Option<PathBuf>,

    /// Human-readable tables instead of machine-readable JSON
    #[arg(long, global = true)]
    pretty: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a dataset from a recipe file
    Simulate {
        /// Dataset recipe (TOML)
        #[arg(long)]
        config: PathBuf,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
        /// Override the recipe's seed
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run a classic detector over one cube or a dataset directory
    Detect {
        /// Detector: cem, smf, osp, asd, or tcimf
        #[arg(long)]
        method: htd::Method,
        /// Prior spectrum CSVs, one per class (class ids 0, 1, ...)
        #[arg(long, required = true, num_args = 1..)]
        priors: Vec<PathBuf>,
        /// Cube file, or a directory of img_*.hsc cubes
        #[arg(long)]
        cube: PathBuf,
        /// Inner window size (excluded region), odd
        #[arg(long)]
        win_in: Option<usize>,
        /// Outer window size (statistics region), odd
        #[arg(long)]
        win_out: Option<usize>,
        /// Output directory for score maps
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the transformer forward pass over one cube
    Forward {
        #[arg(long)]
        cube: PathBuf,
        /// Weights directory (weights.bin + weights.json)
        #[arg(long)]
        weights: PathBuf,
        /// Model config (TOML); with --seed, initializes missing weights
        #[arg(long)]
        config: Option<PathBuf>,
        /// Seed for fresh weight initialization
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Detections JSON output file (stdout when omitted)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Convert score maps to object detections
    ScoresToObjects {
        /// Directory of score_<image>_c<class>.hsc maps
        #[arg(long)]
        scores: PathBuf,
        /// Fixed threshold in [0,1], or "auto" for the best segmentation
        /// threshold against ground-truth masks
        #[arg(long)]
        threshold: String,
        /// Ground-truth mask directory (mask_<image>_c<class>.hsc),
        /// required for --threshold auto
        #[arg(long)]
        gt: Option<PathBuf>,
        /// Detections JSON output file (stdout when omitted)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate detections against ground truth
    Eval {
        /// Detections JSON
        #[arg(long)]
        dets: PathBuf,
        /// Ground-truth annotations JSON
        #[arg(long)]
        gts: PathBuf,
        /// Matching criterion: coco, iou25, or inner-outer
        #[arg(long, default_value = "coco")]
        criterion: String,
        /// Report format: json or markdown
        #[arg(long, default_value = "json")]
        report: String,
        /// Report output file (stdout when omitted)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the hybrid one-to-many assigner on a gt/prediction pair
    Assign {
        /// Ground-truth annotations JSON
        #[arg(long)]
        gts: PathBuf,
        /// Predictions JSON: {"preds": [{"bbox": [cx,cy,w,h], "scores": [..]}]}
        #[arg(long)]
        preds: PathBuf,
        /// Restrict ground truths to one image id
        #[arg(long)]
        image_id: Option<usize>,
        #[arg(long)]
        tau_iou: Option<f64>,
        #[arg(long)]
        t_cap: Option<usize>,
    },
    /// Add white Gaussian noise at a target SNR
    InjectNoise {
        #[arg(long)]
        cube: PathBuf,
        #[arg(long)]
        snr_db: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the kernels invariant suite
    KernelCheck,
    /// Render an evaluation report as markdown tables
    Report {
        /// Evaluation report JSON (from `eval --report json`)
        #[arg(long)]
        eval: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(workers) = cli.workers {
        if rayon::ThreadPoolBuilder::new().num_threads(workers).build_global().is_err() {
            eprintln!("error: global thread pool already initialized");
            return ExitCode::from(1);
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: &Cli) -> Result<()> {
    let defaults = Defaults::load(cli.defaults.as_deref())?;
    match &cli.command {
        Command::Simulate { config, out, seed } => simulate(config, out, *seed, cli.pretty),
        Command::Detect { method, priors, cube, win_in, win_out, out } => {
            detect(*method, priors, cube, *win_in, *win_out, out, &defaults, cli.pretty)
        }
        Command::Forward { cube, weights, config, seed, out } => {
            forward(cube, weights, config.as_deref(), *seed, out.as_deref(), cli.pretty)
        }
        Command::ScoresToObjects { scores, threshold, gt, out } => {
            scores_to_objects(scores, threshold, gt.as_deref(), out.as_deref(), cli.pretty)
        }
        Command::Eval { dets, gts, criterion, report, out } => {
            run_eval(dets, gts, criterion, report, out.as_deref(), &defaults, cli.pretty)
        }
        Command::Assign { gts, preds, image_id, tau_iou, t_cap } => {
            run_assign(gts, preds, *image_id, *tau_iou, *t_cap, &defaults)
        }
        Command::InjectNoise { cube, snr_db, seed, out } => inject_noise(cube, *snr_db, *seed, out),
        Command::KernelCheck => kernel_check(),
        Command::Report { eval } => report(eval),
    }
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(path) => std::fs::write(path, text).map_err(|e| Error::io(path, e)),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn simulate(config: &Path, out: &Path, seed: Option<u64>, pretty: bool) -> Result<()> {
    let mut recipe = scenesynth::DatasetConfig::from_toml_file(config)?;
    if let Some(s) = seed {
        recipe.seed = s;
    }
    let manifest = scenesynth::generate_dataset(&recipe, out)?;
    if pretty {
        println!(
            "dataset '{}': {} images, seed {}, written to {}",
            manifest.name,
            manifest.images.len(),
            manifest.seed,
            out.display()
        );
    } else {
        let summary = serde_json::json!({
            "name": manifest.name,
            "seed": manifest.seed,
            "images": manifest.images.len(),
            "out": out.display().to_string(),
            "manifest": out.join("manifest.json").display().to_string(),
        });
        println!("{}", serde_json::to_string_pretty(&summary).expect("summary serializes"));
    }
    Ok(())
}

fn cube_files(path: &Path) -> Result<Vec<PathBuf>> {
    if path.is_dir() {
        let mut files: Vec<PathBuf> = std::fs::read_dir(path)
            .map_err(|e| Error::io(path, e))?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| {
                p.file_name()
                    .and_then(|n| n.to_str())
                    .map(|n| n.starts_with("img_") && n.ends_with(".hsc"))
                    .unwrap_or(false)
            })
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "no img_*.hsc cubes in {}",
                path.display()
            )));
        }
        Ok(files)
    } else {
        Ok(vec![path.to_path_buf()])
    }
}

#[allow(clippy::too_many_arguments)]
fn detect(
    method: htd::Method,
    priors: &[PathBuf],
    cube: &Path,
    win_in: Option<usize>,
    win_out: Option<usize>,
    out: &Path,
    defaults: &Defaults,
    pretty: bool,
) -> Result<()> {
    let window = htd::DualWindow::new(
        win_in.unwrap_or(defaults.detect.win_in),
        win_out.unwrap_or(defaults.detect.win_out),
    )?;
    let prior_spectra: Vec<htd::PriorSpectra> = priors
        .iter()
        .enumerate()
        .map(|(class_id, path)| {
            Ok(htd::PriorSpectra {
                class_id,
                spectra: vec![specmodel::read_spectrum_csv(path)?],
            })
        })
        .collect::<Result<_>>()?;
    let windows = vec![window; prior_spectra.len()];
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut written = Vec::new();
    for file in cube_files(cube)? {
        let cube = hsicube::read_cube(&file)?;
        let maps = htd::detect_all(&cube, &prior_spectra, method, &windows)?;
        let stem = file
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::InvalidArgument(format!("bad cube name {}", file.display())))?
            .to_string();
        for map in maps {
            let name = format!("score_{stem}_c{}.hsc", map.class_id);
            hsicube::write_score_map(&map, out.join(&name))?;
            written.push(name);
        }
    }
    if pretty {
        println!("wrote {} score maps to {}", written.len(), out.display());
    } else {
        let summary = serde_json::json!({
            "out": out.display().to_string(),
            "score_maps": written,
        });
        println!("{}", serde_json::to_string_pretty(&summary).expect("summary serializes"));
    }
    Ok(())
}

fn forward(
    cube: &Path,
    weights: &Path,
    config: Option<&Path>,
    seed: u64,
    out: Option<&Path>,
    pretty: bool,
) -> Result<()> {
    let model = if weights.join("weights.json").exists() {
        kernels::ModelWeights::load(weights)?
    } else if let Some(config) = config {
        let config = kernels::ModelConfig::from_toml_file(config)?;
        let model = kernels::ModelWeights::seeded(&config, seed)?;
        model.save(weights)?;
        model
    } else {
        return Err(Error::InvalidArgument(format!(
            "no weights at {} and no --config to initialize them",
            weights.display()
        )));
    };
    let cube = hsicube::read_cube(cube)?;
    let dets = kernels::run_forward(&cube, &model)?;
    if pretty {
        println!("| class | cx | cy | w | h | confidence |");
        println!("|---|---|---|---|---|---|");
        for d in &dets {
            println!(
                "| {} | {:.2} | {:.2} | {:.2} | {:.2} | {:.4} |",
                d.class_id, d.box_.cx, d.box_.cy, d.box_.w, d.box_.h, d.confidence
            );
        }
        return Ok(());
    }
    let set = hsicube::DetectionSet {
        detections: dets
            .iter()
            .map(|d| hsicube::DetectionEntry {
                image_id: 0,
                category_id: d.class_id,
                bbox: [d.box_.cx, d.box_.cy, d.box_.w, d.box_.h],
                confidence: d.confidence,
            })
            .collect(),
    };
    emit(out, &serde_json::to_string_pretty(&set).expect("detections serialize"))
}

/// Parse `score_<stem>_c<class>.hsc`; the image id is the trailing decimal
/// run of the stem (e.g. `score_img_0003_c1.hsc` -> image 3, class 1).
fn parse_score_name(name: &str) -> Option<(usize, usize)> {
    let middle = name.strip_prefix("score_")?.strip_suffix(".hsc")?;
    let (stem, class) = middle.rsplit_once("_c")?;
    let class: usize = class.parse().ok()?;
    let digits: String =
        stem.chars().rev().take_while(|c| c.is_ascii_digit()).collect::<Vec<_>>().into_iter().rev().collect();
    let image: usize = digits.parse().ok()?;
    Some((image, class))
}

fn scores_to_objects(
    scores_dir: &Path,
    threshold: &str,
    gt: Option<&Path>,
    out: Option<&Path>,
    pretty: bool,
) -> Result<()> {
    let mut maps: BTreeMap<(usize, usize), hsicube::ScoreMap> = BTreeMap::new();
    for entry in std::fs::read_dir(scores_dir).map_err(|e| Error::io(scores_dir, e))? {
        let path = entry.map_err(|e| Error::io(scores_dir, e))?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else { continue };
        let Some((image_id, class_id)) = parse_score_name(name) else { continue };
        let mut map = hsicube::read_score_map(&path)?;
        map.class_id = class_id;
        maps.insert((image_id, class_id), map);
    }
    if maps.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no score_*_c*.hsc maps in {}",
            scores_dir.display()
        )));
    }
    // per-class threshold: fixed, or best pooled segmentation threshold
    let mut classes: Vec<usize> = maps.keys().map(|&(_, c)| c).collect();
    classes.sort_unstable();
    classes.dedup();
    let mut thresholds: BTreeMap<usize, f64> = BTreeMap::new();
    if threshold == "auto" {
        let gt = gt.ok_or_else(|| {
            Error::InvalidArgument("--threshold auto requires --gt <mask dir>".into())
        })?;
        for &class in &classes {
            let mut pairs_owned: Vec<(hsicube::ScoreMap, hsicube::BinaryMask)> = Vec::new();
            for (&(image_id, c), map) in &maps {
                if c != class {
                    continue;
                }
                let mask_path = gt.join(format!("mask_{image_id:04}_c{class}.hsc"));
                pairs_owned.push((map.clone(), hsicube::read_mask(&mask_path)?));
            }
            let pairs: Vec<(&hsicube::ScoreMap, &hsicube::BinaryMask)> =
                pairs_owned.iter().map(|(m, g)| (m, g)).collect();
            let (t, _) = annotate::best_seg_threshold_pooled(&pairs)?;
            thresholds.insert(class, t);
        }
    } else {
        let t: f64 = threshold
            .parse()
            .map_err(|_| Error::InvalidArgument(format!("bad threshold '{threshold}'")))?;
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::InvalidArgument(format!("threshold {t} outside [0, 1]")));
        }
        for &class in &classes {
            thresholds.insert(class, t);
        }
    }
    let mut set = hsicube::DetectionSet::default();
    for (&(image_id, class_id), map) in &maps {
        let result = annotate::scores_to_detections(map, thresholds[&class_id]);
        for d in result.detections {
            set.detections.push(hsicube::DetectionEntry {
                image_id,
                category_id: class_id,
                bbox: [d.box_.cx, d.box_.cy, d.box_.w, d.box_.h],
                confidence: d.confidence,
            });
        }
    }
    if pretty {
        println!(
            "{} detections across {} score maps; thresholds: {:?}",
            set.detections.len(),
            maps.len(),
            thresholds
        );
        if out.is_none() {
            return Ok(());
        }
    }
    emit(out, &serde_json::to_string_pretty(&set).expect("detections serialize"))
}

fn run_eval(
    dets: &Path,
    gts: &Path,
    criterion: &str,
    report_fmt: &str,
    out: Option<&Path>,
    defaults: &Defaults,
    pretty: bool,
) -> Result<()> {
    let dets = hsicube::read_detections(dets)?;
    let gts = hsicube::read_annotations(gts)?;
    let criterion = match criterion {
        "coco" => eval::Criterion::Coco,
        "iou25" => eval::Criterion::FixedIou(defaults.eval.extra_iou),
        "inner-outer" => eval::Criterion::InnerOuter {
            inner: defaults.eval.inner,
            outer: defaults.eval.outer,
        },
        other => {
            return Err(Error::InvalidArgument(format!(
                "unknown criterion '{other}' (expected coco, iou25, or inner-outer)"
            )))
        }
    };
    let config = eval::EvalConfig {
        criterion,
        extra_iou: vec![defaults.eval.extra_iou],
        max_dets_per_image: defaults.eval.enforce_max_dets.then_some(defaults.eval.max_dets),
        ..eval::EvalConfig::default()
    };
    let pairs: Vec<eval::ImagePair> = gts
        .images
        .iter()
        .map(|img| eval::ImagePair {
            dets: dets.detections_for(img.id),
            gts: gts.annotations_for(img.id),
        })
        .collect();
    let report = eval::evaluate(&pairs, &config)?;
    let text = if report_fmt == "markdown" || pretty {
        report.to_markdown()
    } else if report_fmt == "json" {
        report.to_json()
    } else {
        return Err(Error::InvalidArgument(format!(
            "unknown report format '{report_fmt}' (expected json or markdown)"
        )));
    };
    emit(out, &text)
}

#[derive(Debug, Deserialize)]
struct PredFile {
    preds: Vec<PredEntry>,
}

#[derive(Debug, Deserialize)]
struct PredEntry {
    bbox: [f64; 4],
    scores: Vec<f64>,
}

fn run_assign(
    gts: &Path,
    preds: &Path,
    image_id: Option<usize>,
    tau_iou: Option<f64>,
    t_cap: Option<usize>,
    defaults: &Defaults,
) -> Result<()> {
    let set = hsicube::read_annotations(gts)?;
    let gt_samples: Vec<assign::GtSample> = set
        .annotations
        .iter()
        .filter(|a| image_id.map_or(true, |id| a.image_id == id))
        .map(|a| assign::GtSample {
            box_: hsicube::BBox::new(a.bbox[0], a.bbox[1], a.bbox[2], a.bbox[3]),
            class_id: a.category_id,
        })
        .collect();
    let text = std::fs::read_to_string(preds).map_err(|e| Error::io(preds, e))?;
    let pred_file: PredFile = serde_json::from_str(&text).map_err(|e| Error::json(preds, e))?;
    let pred_samples: Vec<assign::PredSample> = pred_file
        .preds
        .iter()
        .map(|p| assign::PredSample {
            box_: hsicube::BBox::new(p.bbox[0], p.bbox[1], p.bbox[2], p.bbox[3]),
            scores: p.scores.clone(),
        })
        .collect();
    let result = assign::hybrid_assign(
        &gt_samples,
        &pred_samples,
        None,
        tau_iou.unwrap_or(defaults.assign.tau_iou),
        t_cap.unwrap_or(defaults.assign.t_cap),
    )?;
    let pairs: Vec<serde_json::Value> = result
        .pairs
        .iter()
        .map(|p| {
            serde_json::json!({
                "gt_index": p.gt_index,
                "pred_index": p.pred_index,
                "origin": match p.origin {
                    assign::PairOrigin::Forced => "forced",
                    assign::PairOrigin::Dynamic => "dynamic",
                },
            })
        })
        .collect();
    println!(
        "{}",
        serde_json::to_string_pretty(&serde_json::json!({ "pairs": pairs }))
            .expect("pairs serialize")
    );
    Ok(())
}

fn inject_noise(cube: &Path, snr_db: f64, seed: u64, out: &Path) -> Result<()> {
    let cube = hsicube::read_cube(cube)?;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let noisy = eval::inject_noise(&cube, snr_db, &mut rng)?;
    hsicube::write_cube(&noisy, out)
}

fn kernel_check() -> Result<()> {
    use rand::Rng;
    let mut failures = 0usize;
    let mut check = |name: &str, ok: bool| {
        println!("{} {name}", if ok { "PASS" } else { "FAIL" });
        if !ok {
            failures += 1;
        }
    };
    let mut rng = ChaCha12Rng::seed_from_u64(0x6b65726e);

    let mut ok = true;
    for _ in 0..10_000 {
        let (x, y) = (rng.gen_range(-8.0..8.0), rng.gen_range(-8.0..8.0));
        let ws = kernels::bilinear_weights(x, y);
        let sum: f64 = ws.iter().map(|(_, w)| w).sum();
        ok &= (sum - 1.0).abs() < 1e-9 && ws.iter().all(|(_, w)| *w >= 0.0);
    }
    check("bilinear coefficients non-negative, sum to one (10k samples)", ok);

    let g = [1.0];
    let mut ok = kernels::self_excited_value(&g, 0.0, 0.0)[0] == 1.0
        && kernels::self_excited_value(&g, 1.5, 0.0)[0] == 0.5
        && kernels::self_excited_value(&g, 2.0, 0.3)[0] == 0.0
        && kernels::self_excited_value(&g, 0.7, -0.7)[0] == 1.0;
    for _ in 0..1000 {
        let (x, y) = (rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0));
        let a = kernels::self_excited_weight(x, y);
        let b = kernels::self_excited_weight(x + 1e-7, y + 1e-7);
        ok &= (a - b).abs() < 1e-5;
    }
    check("self-excited operator geometry and continuity", ok);

    let mut ok = true;
    for _ in 0..1000 {
        let logits: Vec<f64> = (0..8 * 4 * 2).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let (p, gl) = kernels::attention_weights(&logits, 8, 4);
        for m in 0..8 {
            let sum: f64 = (0..4).map(|k| p[m * 4 + k] + gl[m * 4 + k]).sum();
            ok &= (sum - 1.0).abs() < 1e-9;
        }
    }
    check("attention weights normalized per head (1k queries)", ok);

    let mut ok = true;
    for _ in 0..1000 {
        let b = rng.gen_range(1e-6..1.0 - 1e-6);
        ok &= (kernels::sigmoid(kernels::inverse_sigmoid(b)) - b).abs() < 1e-9;
    }
    check("sigmoid / inverse sigmoid round trip", ok);

    let config = kernels::ModelConfig {
        bands: 4,
        dim: 16,
        heads: 4,
        points: 2,
        encoder_layers: 2,
        decoder_layers: 2,
        ffn_mult: 2,
        n_classes: 2,
        v: 3000.0,
        s: 1.0,
        q_match: 300,
    };
    let model = kernels::ModelWeights::seeded(&config, 1).map_err(|e| {
        Error::InvalidArgument(format!("kernel-check model init: {e}"))
    })?;
    let data: Vec<f32> = (0..6 * 6 * 4).map(|_| rng.gen_range(0.0..3000.0)).collect();
    let cube =
        hsicube::HyperCube::new(6, 6, 4, data, None, hsicube::Unit::Radiance).expect("cube");
    let a = kernels::run_forward(&cube, &model)?;
    let b = kernels::run_forward(&cube, &model)?;
    let ok = a.len() == b.len()
        && a.iter().zip(&b).all(|(x, y)| {
            x.box_.cx.to_bits() == y.box_.cx.to_bits()
                && x.confidence.to_bits() == y.confidence.to_bits()
        })
        && a.iter().all(|d| d.box_.cx > 0.0 && d.box_.cx < 6.0);
    check("forward pass deterministic, boxes inside the image", ok);

    if failures > 0 {
        return Err(Error::InvalidArgument(format!("{failures} kernel check(s) failed")));
    }
    Ok(())
}

fn report(eval_path: &Path) -> Result<()> {
    let text = std::fs::read_to_string(eval_path).map_err(|e| Error::io(eval_path, e))?;
    let report: eval::EvalReport =
        serde_json::from_str(&text).map_err(|e| Error::json(eval_path, e))?;
    println!("{}", report.to_markdown());
    Ok(())
}
