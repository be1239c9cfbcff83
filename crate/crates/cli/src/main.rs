//! `dke`: end-to-end driver for the kernel-expansion text detector —
//! generate synthetic scenes, train the offset regressor, run detection,
//! score predictions, compare losses, benchmark throughput, and render
//! scenes to SVG.
//!
//! Every subcommand resolves its settings the same way (flag beats config
//! file beats default), echoes the resolved configuration to
//! `<out-dir>/config.toml` so the run can be repeated from its own
//! artifacts, and records command and wall-clock time in `run_meta.json` —
//! the only artifact that is not byte-reproducible.

mod config;
mod svg;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use config::{FileConfig, Resolved};
use dke_core::{
    evaluate_scenes, load_checkpoint, read_dataset, run_ablation, save_checkpoint, train_segment,
    write_dataset, AblationConfig, AblationNets, AdamState, Checkpoint, DeformNet, InferConfig,
    Polygon, SynthScene, TrainConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "dke", version, about = "Kernel-expansion text detection pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene dataset (JSON lines).
    Gen(GenArgs),
    /// Train the contour offset regressor.
    Train(TrainArgs),
    /// Detect text contours in a dataset's probability maps.
    Infer(InferArgs),
    /// Score predictions against a dataset's ground truth.
    Eval(EvalArgs),
    /// Compare the fixed expansion and the three losses at 1 and 2 passes.
    Ablate(AblateArgs),
    /// Measure single-threaded inference throughput.
    Bench(BenchArgs),
    /// Render scenes, detections and vertex pairings to SVG.
    Viz(VizArgs),
}

/// Settings shared by every subcommand. Each maps to a key in the config
/// file; a flag given here overrides the file.
#[derive(Args, Clone, Default)]
struct Common {
    /// TOML config file; explicit flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master RNG seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Samples per contour ring.
    #[arg(long)]
    n_vertices: Option<usize>,
    /// Kernel shrink ratio in (0, 1].
    #[arg(long)]
    shrink_ratio: Option<f64>,
    /// Vertex pairing loss: dml, nnml or obgml.
    #[arg(long)]
    loss: Option<String>,
    /// Expansion passes at inference.
    #[arg(long)]
    iterations: Option<usize>,
    /// IoU a prediction needs to count as a detection.
    #[arg(long)]
    iou_threshold: Option<f64>,
    /// Directory for artifacts (created if missing).
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
}

impl Common {
    fn to_flags(&self) -> FileConfig {
        FileConfig {
            seed: self.seed,
            n_vertices: self.n_vertices,
            shrink_ratio: self.shrink_ratio,
            loss: self.loss.clone(),
            iterations: self.iterations,
            iou_threshold: self.iou_threshold,
            ..FileConfig::default()
        }
    }

    /// Load the config file (if any), merge the flags over it, resolve
    /// against defaults, and set up the output directory with the config
    /// echo and run sidecar.
    fn prepare(&self, extra: FileConfig, command: &str) -> Result<Resolved> {
        let file = match &self.config {
            Some(path) => config::load_file(path)?,
            None => FileConfig::default(),
        };
        let mut flags = self.to_flags();
        merge_extra(&mut flags, extra);
        let resolved = config::resolve(&file, &flags)?;
        std::fs::create_dir_all(&self.out_dir)
            .with_context(|| format!("creating {}", self.out_dir.display()))?;
        config::echo(&resolved, &self.out_dir)?;
        write_run_meta(&self.out_dir, command)?;
        Ok(resolved)
    }
}

/// Overlay the subcommand-specific flags onto the shared ones.
fn merge_extra(flags: &mut FileConfig, extra: FileConfig) {
    macro_rules! take {
        ($($field:ident),*) => {
            $(if extra.$field.is_some() { flags.$field = extra.$field; })*
        };
    }
    take!(
        scenes,
        instances_per_scene,
        canvas_width,
        canvas_height,
        noise,
        steps,
        batch_size,
        lr0,
        binarize_threshold,
        min_area,
        reps
    );
}

#[derive(Serialize)]
struct RunMeta<'a> {
    command: &'a str,
    created_unix_ms: u128,
    version: &'a str,
}

/// The run sidecar carries the timestamp so every other artifact can stay
/// byte-identical across reruns.
fn write_run_meta(out_dir: &Path, command: &str) -> Result<()> {
    let created_unix_ms = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0);
    let meta = RunMeta {
        command,
        created_unix_ms,
        version: env!("CARGO_PKG_VERSION"),
    };
    std::fs::write(
        out_dir.join("run_meta.json"),
        serde_json::to_string_pretty(&meta)?,
    )?;
    Ok(())
}

// ---------------------------------------------------------------------------
// gen

#[derive(Args)]
struct GenArgs {
    #[command(flatten)]
    common: Common,
    /// Number of scenes to generate.
    #[arg(long)]
    scenes: Option<usize>,
    /// Text instances per scene.
    #[arg(long)]
    instances: Option<usize>,
    /// Canvas width in pixels.
    #[arg(long)]
    canvas_width: Option<usize>,
    /// Canvas height in pixels.
    #[arg(long)]
    canvas_height: Option<usize>,
    /// Control-point jitter of the surrogate maps, in pixels.
    #[arg(long)]
    noise: Option<f64>,
}

fn cmd_gen(args: &GenArgs) -> Result<()> {
    let extra = FileConfig {
        scenes: args.scenes,
        instances_per_scene: args.instances,
        canvas_width: args.canvas_width,
        canvas_height: args.canvas_height,
        noise: args.noise,
        ..FileConfig::default()
    };
    let r = args.common.prepare(extra, "gen")?;
    if r.scenes == 0 {
        bail!("--scenes must be at least 1");
    }
    let params = dke_core::SceneParams {
        shrink_ratio: r.shrink_ratio,
        noise: r.noise,
        ..dke_core::SceneParams::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(r.seed);
    let mut scenes = Vec::with_capacity(r.scenes);
    while scenes.len() < r.scenes {
        let scene_seed: u64 = rng.gen();
        match dke_core::make_scene(
            r.instances_per_scene,
            r.canvas_width,
            r.canvas_height,
            scene_seed,
            &params,
        ) {
            Ok(scene) => scenes.push(scene),
            // A crowded canvas can reject a particular layout; the next
            // seed in the stream gets its own chance.
            Err(dke_core::Error::PlacementFailed { .. }) => continue,
            Err(e) => return Err(e.into()),
        }
    }
    let path = args.common.out_dir.join("dataset.jsonl");
    write_dataset(&path, &scenes)?;
    println!("wrote {} scenes to {}", scenes.len(), path.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// train

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Training dataset (JSON lines).
    #[arg(long)]
    dataset: PathBuf,
    /// Optimizer steps.
    #[arg(long)]
    steps: Option<usize>,
    /// Examples per optimizer step.
    #[arg(long)]
    batch_size: Option<usize>,
    /// Base learning rate of the polynomial decay schedule.
    #[arg(long)]
    lr0: Option<f64>,
    /// Also write a checkpoint every this many steps.
    #[arg(long, default_value_t = 0)]
    save_every: usize,
    /// Continue a checkpointed run (its stored configuration governs).
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Serialize, Deserialize)]
struct CurvePoint {
    step: usize,
    loss: f64,
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let extra = FileConfig {
        steps: args.steps,
        batch_size: args.batch_size,
        lr0: args.lr0,
        ..FileConfig::default()
    };
    let r = args.common.prepare(extra, "train")?;
    let dataset = read_dataset(&args.dataset)?;

    let (mut net, mut state, cfg, start) = match &args.resume {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            let net = ckpt.to_net()?;
            let state = ckpt.adam.clone();
            (net, state, ckpt.config, ckpt.step)
        }
        None => {
            let cfg = TrainConfig {
                lr0: r.lr0,
                batch_size: r.batch_size,
                max_steps: r.steps,
                shrink_ratio: r.shrink_ratio,
                n_vertices: r.n_vertices,
                dce_iterations: r.iterations,
                loss_kind: r.loss_kind()?,
                seed: r.seed,
                ..TrainConfig::default()
            };
            let net = DeformNet::new(cfg.seed);
            let params = net.param_count();
            (net, AdamState::new(params), cfg, 0)
        }
    };
    cfg.validate()?;

    let mut history = Vec::with_capacity(cfg.max_steps.saturating_sub(start));
    let mut step = start;
    while step < cfg.max_steps {
        let stop = if args.save_every > 0 {
            (step + args.save_every).min(cfg.max_steps)
        } else {
            cfg.max_steps
        };
        let report = train_segment(&mut net, &mut state, step, stop, &dataset, &cfg)?;
        history.extend(report.history);
        step = stop;
        if args.save_every > 0 && step < cfg.max_steps {
            let ckpt = Checkpoint::capture(&net, &state, step, &cfg);
            let path = args.common.out_dir.join(format!("checkpoint_step_{step:06}.json"));
            save_checkpoint(&path, &ckpt)?;
        }
    }

    let ckpt = Checkpoint::capture(&net, &state, step, &cfg);
    let ckpt_path = args.common.out_dir.join("checkpoint.json");
    save_checkpoint(&ckpt_path, &ckpt)?;

    let mut curve = String::new();
    for (i, &loss) in history.iter().enumerate() {
        let point = CurvePoint { step: start + i, loss };
        writeln!(curve, "{}", serde_json::to_string(&point)?)?;
    }
    std::fs::write(args.common.out_dir.join("loss_curve.jsonl"), curve)?;

    match history.last() {
        Some(loss) => println!(
            "trained steps {start}..{step} ({} loss {:.4}); checkpoint at {}",
            cfg.loss_kind,
            loss,
            ckpt_path.display()
        ),
        None => println!("no steps to run; wrote checkpoint at {}", ckpt_path.display()),
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// infer

#[derive(Args)]
struct InferArgs {
    #[command(flatten)]
    common: Common,
    /// Scene dataset to detect in (JSON lines).
    #[arg(long)]
    dataset: PathBuf,
    /// Trained regressor checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Probability threshold for kernel binarization.
    #[arg(long)]
    binarize_threshold: Option<f64>,
    /// Minimum kernel component area in pixels.
    #[arg(long)]
    min_area: Option<f64>,
}

/// One dataset line's detections: flat `[x0, y0, x1, y1, ...]` rings.
#[derive(Serialize, Deserialize)]
struct PredLine {
    polygons: Vec<Vec<f64>>,
}

fn infer_config(r: &Resolved) -> InferConfig {
    InferConfig {
        threshold: r.binarize_threshold,
        min_area: r.min_area,
        n_vertices: r.n_vertices,
        dce_iterations: r.iterations,
    }
}

fn scene_predictions(
    net: &DeformNet,
    scene: &SynthScene,
    cfg: &InferConfig,
) -> Result<Vec<Polygon>> {
    let mut preds = Vec::new();
    for inst in &scene.instances {
        preds.extend(dke_core::infer(net, &inst.prob, cfg)?);
    }
    Ok(preds)
}

fn flatten(poly: &Polygon) -> Vec<f64> {
    poly.vertices().iter().flat_map(|p| [p.x, p.y]).collect()
}

fn unflatten(flat: &[f64]) -> Result<Polygon> {
    if flat.len() % 2 != 0 {
        bail!("polygon needs an even number of coordinates, got {}", flat.len());
    }
    let points = flat
        .chunks_exact(2)
        .map(|c| dke_core::Point::new(c[0], c[1]))
        .collect();
    Ok(Polygon::new(points)?)
}

fn cmd_infer(args: &InferArgs) -> Result<()> {
    let extra = FileConfig {
        binarize_threshold: args.binarize_threshold,
        min_area: args.min_area,
        ..FileConfig::default()
    };
    let r = args.common.prepare(extra, "infer")?;
    let dataset = read_dataset(&args.dataset)?;
    let net = load_checkpoint(&args.checkpoint)?.to_net()?;
    let cfg = infer_config(&r);

    let mut out = String::new();
    let mut total = 0;
    for scene in &dataset {
        let preds = scene_predictions(&net, scene, &cfg)?;
        total += preds.len();
        let line = PredLine {
            polygons: preds.iter().map(flatten).collect(),
        };
        writeln!(out, "{}", serde_json::to_string(&line)?)?;
    }
    let path = args.common.out_dir.join("predictions.jsonl");
    std::fs::write(&path, out)?;
    println!(
        "detected {} contours in {} scenes; wrote {}",
        total,
        dataset.len(),
        path.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// eval

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    /// Scene dataset with ground truth (JSON lines).
    #[arg(long)]
    dataset: PathBuf,
    /// Predictions file, one line per dataset scene.
    #[arg(long)]
    predictions: PathBuf,
    /// Exit nonzero unless the F-measure reaches this percentage.
    #[arg(long)]
    min_f: Option<f64>,
    /// Exit nonzero unless precision reaches this percentage.
    #[arg(long)]
    min_precision: Option<f64>,
    /// Exit nonzero unless recall reaches this percentage.
    #[arg(long)]
    min_recall: Option<f64>,
}

fn read_predictions(path: &Path) -> Result<Vec<Vec<Polygon>>> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading predictions {}", path.display()))?;
    let mut scenes = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed: PredLine = serde_json::from_str(line)
            .with_context(|| format!("predictions line {}", idx + 1))?;
        let polys = parsed
            .polygons
            .iter()
            .map(|flat| unflatten(flat))
            .collect::<Result<Vec<_>>>()
            .with_context(|| format!("predictions line {}", idx + 1))?;
        scenes.push(polys);
    }
    Ok(scenes)
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let r = args.common.prepare(FileConfig::default(), "eval")?;
    let dataset = read_dataset(&args.dataset)?;
    let predictions = read_predictions(&args.predictions)?;
    if predictions.len() != dataset.len() {
        bail!(
            "predictions cover {} scenes but the dataset has {}",
            predictions.len(),
            dataset.len()
        );
    }
    let scenes: Vec<(Vec<Polygon>, Vec<Polygon>)> = predictions
        .into_iter()
        .zip(&dataset)
        .map(|(preds, scene)| {
            let gts = scene.instances.iter().map(|i| i.boundary.clone()).collect();
            (preds, gts)
        })
        .collect();
    let report = evaluate_scenes(&scenes, r.iou_threshold);

    std::fs::write(
        args.common.out_dir.join("report.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    let matched: usize = report.per_scene.iter().map(|c| c.matched).sum();
    let missed: usize = report.per_scene.iter().map(|c| c.missed).sum();
    let spurious: usize = report.per_scene.iter().map(|c| c.spurious).sum();
    let text = format!(
        "scenes            {:>8}\n\
         matched           {:>8}\n\
         missed            {:>8}\n\
         spurious          {:>8}\n\
         precision         {:>8.2}\n\
         recall            {:>8.2}\n\
         f-measure         {:>8.2}\n\
         mean IoU of match {:>8.3}\n",
        report.per_scene.len(),
        matched,
        missed,
        spurious,
        report.precision,
        report.recall,
        report.f_measure,
        report.mean_iou_of_matches,
    );
    std::fs::write(args.common.out_dir.join("report.txt"), &text)?;
    print!("{text}");

    let mut failures = Vec::new();
    let mut gate = |name: &str, value: f64, min: Option<f64>| {
        if let Some(min) = min {
            if value < min {
                failures.push(format!("{name} {value:.2} below required {min:.2}"));
            }
        }
    };
    gate("f-measure", report.f_measure, args.min_f);
    gate("precision", report.precision, args.min_precision);
    gate("recall", report.recall, args.min_recall);
    if !failures.is_empty() {
        for f in &failures {
            eprintln!("threshold not met: {f}");
        }
        std::process::exit(2);
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// ablate

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    common: Common,
    /// Scene dataset to compare on (JSON lines).
    #[arg(long)]
    dataset: PathBuf,
    /// Checkpoint trained with the plain distance loss.
    #[arg(long)]
    dml_checkpoint: PathBuf,
    /// Checkpoint trained with the nearest-neighbour loss.
    #[arg(long)]
    nnml_checkpoint: PathBuf,
    /// Checkpoint trained with the bijective matching loss.
    #[arg(long)]
    obgml_checkpoint: PathBuf,
    /// Probability threshold for kernel binarization.
    #[arg(long)]
    binarize_threshold: Option<f64>,
    /// Minimum kernel component area in pixels.
    #[arg(long)]
    min_area: Option<f64>,
}

fn cmd_ablate(args: &AblateArgs) -> Result<()> {
    let extra = FileConfig {
        binarize_threshold: args.binarize_threshold,
        min_area: args.min_area,
        ..FileConfig::default()
    };
    let r = args.common.prepare(extra, "ablate")?;
    let dataset = read_dataset(&args.dataset)?;
    let nets = AblationNets {
        dml: Some(load_checkpoint(&args.dml_checkpoint)?.to_net()?),
        nnml: Some(load_checkpoint(&args.nnml_checkpoint)?.to_net()?),
        obgml: Some(load_checkpoint(&args.obgml_checkpoint)?.to_net()?),
    };
    let cfg = AblationConfig {
        iou_threshold: r.iou_threshold,
        shrink_ratio: r.shrink_ratio,
        infer: infer_config(&r),
    };
    let table = run_ablation(&dataset, &nets, &cfg)?;
    std::fs::write(
        args.common.out_dir.join("ablation.json"),
        serde_json::to_string_pretty(&table)?,
    )?;
    let text = table.to_text();
    std::fs::write(args.common.out_dir.join("ablation.txt"), &text)?;
    print!("{text}");
    Ok(())
}

// ---------------------------------------------------------------------------
// bench

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    common: Common,
    /// Scene dataset to time on (JSON lines).
    #[arg(long)]
    dataset: PathBuf,
    /// Regressor checkpoint; an untrained seeded net is used when absent.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Timed passes over the dataset (median wins).
    #[arg(long)]
    reps: Option<usize>,
}

fn cmd_bench(args: &BenchArgs) -> Result<()> {
    let extra = FileConfig {
        reps: args.reps,
        ..FileConfig::default()
    };
    let r = args.common.prepare(extra, "bench")?;
    let dataset = read_dataset(&args.dataset)?;
    let net = match &args.checkpoint {
        Some(path) => load_checkpoint(path)?.to_net()?,
        None => DeformNet::new(r.seed),
    };
    let report = dke_core::benchmark(&net, &dataset, r.reps, &infer_config(&r))?;
    std::fs::write(
        args.common.out_dir.join("bench.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    let text = report.to_text();
    std::fs::write(args.common.out_dir.join("bench.txt"), &text)?;
    print!("{text}");
    Ok(())
}

// ---------------------------------------------------------------------------
// viz

#[derive(Args)]
struct VizArgs {
    #[command(flatten)]
    common: Common,
    /// Scene dataset to render (JSON lines).
    #[arg(long)]
    dataset: PathBuf,
    /// Regressor checkpoint; without one an all-zero net is used, so
    /// predictions coincide with the detected kernels.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Render at most this many scenes.
    #[arg(long)]
    limit: Option<usize>,
}

fn cmd_viz(args: &VizArgs) -> Result<()> {
    let r = args.common.prepare(FileConfig::default(), "viz")?;
    let dataset = read_dataset(&args.dataset)?;
    let net = match &args.checkpoint {
        Some(path) => load_checkpoint(path)?.to_net()?,
        None => {
            let mut net = DeformNet::new(r.seed);
            let zeros = vec![0.0; net.param_count()];
            net.set_params(&zeros)?;
            net
        }
    };
    let cfg = infer_config(&r);
    let loss = r.loss_kind()?;
    let limit = args.limit.unwrap_or(usize::MAX);
    let mut rendered = 0;
    for (idx, scene) in dataset.iter().take(limit).enumerate() {
        let preds = scene_predictions(&net, scene, &cfg)?;
        let image = svg::render_scene(scene, &preds, loss, r.n_vertices)?;
        let path = args.common.out_dir.join(format!("scene_{idx:03}.svg"));
        std::fs::write(&path, image)?;
        rendered += 1;
    }
    println!(
        "rendered {rendered} scenes to {}",
        args.common.out_dir.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------

fn main() {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Gen(args) => cmd_gen(args),
        Command::Train(args) => cmd_train(args),
        Command::Infer(args) => cmd_infer(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Ablate(args) => cmd_ablate(args),
        Command::Bench(args) => cmd_bench(args),
        Command::Viz(args) => cmd_viz(args),
    };
    if let Err(e) = result {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
