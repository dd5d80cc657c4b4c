//! The `patchsae` command line.
//!
//! Every subcommand resolves its settings as flags > `--config` file >
//! defaults, writes its outputs, and writes a run manifest beside them.
//! Failures print one line `error[<category>]: <message>` to stderr.
//!
//! Exit codes: 0 success, 2 usage or argument error, 3 invalid data
//! (validation, format, corruption, divergence), 4 I/O failure.

pub mod config;
pub mod manifest;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use patchsae_core::head::train_head_with;
use patchsae_core::intervene::{sweep_k, CurvePoint};
use patchsae_core::localize::{self, map_top_neurons, neuron_heatmap};
use patchsae_core::metrics::evaluate_head;
use patchsae_core::pipeline::{repro_synth, ReproConfig};
use patchsae_core::probe::{class_mean_latents, export_class_means, load_summary, save_summary};
use patchsae_core::render::{line_plot, Rgb};
use patchsae_core::store::{attach_boxes, load_dataset, read_box_csv, save_dataset};
use patchsae_core::synth::generate;
use patchsae_core::trainer::train_sae_with;
use patchsae_core::{Error, LinearHead, MaskMode, Result, SaeModel, SynthConfig, TrainConfig};
use serde::Serialize;

use crate::config::ConfigFile;
use crate::manifest::{sidecar_path, ManifestBuilder};

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_IO: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "patchsae", version, about = "Patch-level sparse autoencoder toolkit")]
struct Cli {
    /// Worker threads (default: MSAE_THREADS, then machine parallelism).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Plain-text key=value file supplying defaults for the flags below.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a planted-dictionary corpus.
    GenSynth(GenSynthArgs),
    /// Train a sparse autoencoder on patch features.
    TrainSae(TrainSaeArgs),
    /// Train the pooled linear head.
    TrainHead(TrainHeadArgs),
    /// Class-wise mean latents and neuron rankings.
    Probe(ProbeArgs),
    /// AUC-ROC under top-k activated / deactivated interventions.
    Intervene(InterveneArgs),
    /// AUC-ROC of the head on original and reconstructed features.
    Evaluate(EvaluateArgs),
    /// Per-neuron heatmap boxes and average precision.
    Localize(LocalizeArgs),
    /// Per-neuron class means as JSON plus a bar plot.
    ExportMeans(ExportMeansArgs),
    /// Run the whole synthetic pipeline into one directory.
    ReproSynth(ReproArgs),
}

#[derive(Debug, Args)]
struct GenSynthArgs {
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    images_per_class: Option<usize>,
    #[arg(long)]
    noise_std: Option<f64>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    oracle: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainSaeArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, alias = "expansion")]
    expansion_factor: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, alias = "batch")]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Rescale decoder columns to unit norm after every step.
    #[arg(long)]
    normalize_decoder: bool,
    /// Per-epoch loss log (JSON array).
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    quiet: bool,
}

#[derive(Debug, Args)]
struct TrainHeadArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct ProbeArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Ranking entries kept in the summary file.
    #[arg(long)]
    top: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum ModeArg {
    Activated,
    Deactivated,
    Both,
}

impl std::str::FromStr for ModeArg {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        <ModeArg as ValueEnum>::from_str(s, true)
    }
}

#[derive(Debug, Args)]
struct InterveneArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    head: PathBuf,
    #[arg(long)]
    summary: PathBuf,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Comma-separated k values; h is always added.
    #[arg(long)]
    ks: Option<String>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    plot: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    head: PathBuf,
    /// Also score the model's reconstructions.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct LocalizeArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    summary: PathBuf,
    /// Box CSV replacing the boxes stored in the corpus.
    #[arg(long)]
    boxes: Option<PathBuf>,
    #[arg(long)]
    top: Option<usize>,
    #[arg(long)]
    percentile: Option<f64>,
    #[arg(long)]
    iou: Option<f64>,
    #[arg(long)]
    out: PathBuf,
    /// Directory for PGM heatmaps of the top neurons.
    #[arg(long)]
    render: Option<PathBuf>,
    /// Class-1 images rendered per neuron.
    #[arg(long)]
    render_images: Option<usize>,
}

#[derive(Debug, Args)]
struct ExportMeansArgs {
    #[arg(long)]
    summary: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    plot: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ReproArgs {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    sae_epochs: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    images_per_class: Option<usize>,
    #[arg(long)]
    quiet: bool,
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Argument(_) => EXIT_USAGE,
        Error::Io(_) => EXIT_IO,
        _ => EXIT_DATA,
    }
}

/// Parses `argv` (program name first), runs the command, and returns the
/// process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { 0 };
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", e.category());
            exit_code(&e)
        }
    }
}

fn init_threads(cfg: &ConfigFile, flag: Option<usize>) -> Result<()> {
    let env = match std::env::var("MSAE_THREADS") {
        Ok(v) => Some(
            v.trim()
                .parse::<usize>()
                .map_err(|_| Error::Argument(format!("MSAE_THREADS must be a positive integer, got {v:?}")))?,
        ),
        Err(_) => None,
    };
    let threads = cfg.pick_opt(flag, "threads")?.or(env);
    if let Some(n) = threads {
        if n == 0 {
            return Err(Error::Argument("thread count must be positive".into()));
        }
        // a pool may already exist when run() is called repeatedly in-process
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    let cfg = match &cli.config {
        Some(p) => ConfigFile::load(p)?,
        None => ConfigFile::default(),
    };
    init_threads(&cfg, cli.threads)?;
    match cli.command {
        Command::GenSynth(a) => gen_synth(a, &cfg),
        Command::TrainSae(a) => train_sae(a, &cfg),
        Command::TrainHead(a) => train_head(a, &cfg),
        Command::Probe(a) => probe(a, &cfg),
        Command::Intervene(a) => intervene(a, &cfg),
        Command::Evaluate(a) => evaluate(a, &cfg),
        Command::Localize(a) => localize_cmd(a, &cfg),
        Command::ExportMeans(a) => export_means(a, &cfg),
        Command::ReproSynth(a) => repro(a, &cfg),
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes)?;
    Ok(())
}

fn gen_synth(a: GenSynthArgs, cfg: &ConfigFile) -> Result<()> {
    let mut m = ManifestBuilder::start("gen-synth");
    let preset: String = cfg.pick(a.preset, "preset", "desk".to_string())?;
    let seed = cfg.pick(a.seed, "seed", 0)?;
    let mut sc = SynthConfig::preset(&preset, seed)?;
    sc.n_images_per_class = cfg.pick(a.images_per_class, "images-per-class", sc.n_images_per_class)?;
    sc.noise_std = cfg.pick(a.noise_std, "noise-std", sc.noise_std)?;
    cfg.finish()?;

    let (ds, oracle) = generate(&sc)?;
    save_dataset(&ds, &a.out)?;
    let mut outputs = vec![a.out.clone()];
    if let Some(p) = &a.oracle {
        oracle.save(p)?;
        outputs.push(p.clone());
    }
    m.seed("seed", seed);
    m.finish(&sc, &outputs, &sidecar_path(&a.out))?;
    Ok(())
}

fn train_sae(a: TrainSaeArgs, cfg: &ConfigFile) -> Result<()> {
    let mut m = ManifestBuilder::start("train-sae");
    let d = TrainConfig::default();
    let tc = TrainConfig {
        expansion_factor: cfg.pick(a.expansion_factor, "expansion-factor", d.expansion_factor)?,
        lambda: cfg.pick(a.lambda, "lambda", d.lambda)?,
        learning_rate: cfg.pick(a.lr, "lr", d.learning_rate)?,
        batch_size: cfg.pick(a.batch_size, "batch-size", d.batch_size)?,
        epochs: cfg.pick(a.epochs, "epochs", d.epochs)?,
        seed: cfg.pick(a.seed, "seed", d.seed)?,
        normalize_decoder: cfg.pick(a.normalize_decoder.then_some(true), "normalize-decoder", d.normalize_decoder)?,
    };
    cfg.finish()?;
    tc.validate()?;

    let ds = load_dataset(&a.data)?;
    m.input(&a.data);
    let quiet = a.quiet;
    let (model, log) = train_sae_with(&ds, &tc, |r| {
        if !quiet {
            eprintln!("epoch {:>4}  loss {:.6}  recon {:.6}  l0 {:.2}", r.epoch, r.total, r.recon, r.l0);
        }
    })?;
    model.save(&a.out)?;
    let mut outputs = vec![a.out.clone()];
    if let Some(p) = &a.log {
        write_json(p, &log)?;
        outputs.push(p.clone());
    }
    m.seed("seed", tc.seed);
    m.finish(&tc, &outputs, &sidecar_path(&a.out))?;
    Ok(())
}

#[derive(Serialize)]
struct HeadConfig {
    epochs: usize,
    lr: f64,
    seed: u64,
}

fn train_head(a: TrainHeadArgs, cfg: &ConfigFile) -> Result<()> {
    let mut m = ManifestBuilder::start("train-head");
    let hc = HeadConfig {
        epochs: cfg.pick(a.epochs, "epochs", 500)?,
        lr: cfg.pick(a.lr, "lr", 0.1)?,
        seed: cfg.pick(a.seed, "seed", 0)?,
    };
    cfg.finish()?;
    let ds = load_dataset(&a.data)?;
    m.input(&a.data);
    let mut last = f64::NAN;
    let head = train_head_with(&ds, hc.epochs, hc.lr, hc.seed, |_, l| last = l)?;
    if hc.epochs > 0 {
        eprintln!("final training loss {last:.6}");
    }
    head.save(&a.out)?;
    m.seed("seed", hc.seed);
    m.finish(&hc, std::slice::from_ref(&a.out), &sidecar_path(&a.out))?;
    Ok(())
}

fn probe(a: ProbeArgs, cfg: &ConfigFile) -> Result<()> {
    let mut m = ManifestBuilder::start("probe");
    let top = cfg.pick(a.top, "top", 50)?;
    cfg.finish()?;
    let ds = load_dataset(&a.data)?;
    let model = SaeModel::load(&a.model)?;
    m.input(&a.data).input(&a.model);
    let summary = class_mean_latents(&model, &ds)?;
    save_summary(&summary, top.min(summary.h()), &a.out)?;
    m.finish(serde_json::json!({ "top": top }), std::slice::from_ref(&a.out), &sidecar_path(&a.out))?;
    Ok(())
}

fn parse_ks(raw: &str) -> Result<Vec<usize>> {
    raw.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| s.trim().parse().map_err(|_| Error::Argument(format!("bad k value {s:?}"))))
        .collect()
}

#[derive(Serialize)]
struct InterveneOutput {
    h: usize,
    auc_original: f64,
    auc_reconstructed: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    activated: Option<Vec<CurvePoint>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    deactivated: Option<Vec<CurvePoint>>,
}

fn intervene(a: InterveneArgs, cfg: &ConfigFile) -> Result<()> {
    let mut m = ManifestBuilder::start("intervene");
    let mode = cfg.pick(a.mode, "mode", ModeArg::Both)?;
    let ks_raw = cfg.pick(a.ks, "ks", "0,1,2,5,10,20,50,100".to_string())?;
    cfg.finish()?;
    let ds = load_dataset(&a.data)?;
    let model = SaeModel::load(&a.model)?;
    let head = LinearHead::load(&a.head)?;
    let summary = load_summary(&a.summary)?;
    m.input(&a.data).input(&a.model).input(&a.head).input(&a.summary);

    let h = model.h();
    let mut ks = parse_ks(&ks_raw)?;
    if let Some(&k) = ks.iter().find(|&&k| k > h) {
        return Err(Error::Argument(format!("k = {k} exceeds latent width {h}")));
    }
    ks.push(h);
    ks.sort_unstable();
    ks.dedup();
    let run_mode = |mm: MaskMode| sweep_k(&model, &ds, &head, &summary, &ks, mm);
    let out = InterveneOutput {
        h,
        auc_original: evaluate_head(&head, &ds)?,
        auc_reconstructed: evaluate_head(&head, &model.reconstruct_dataset(&ds)?)?,
        activated: if mode != ModeArg::Deactivated { Some(run_mode(MaskMode::Activated)?) } else { None },
        deactivated: if mode != ModeArg::Activated { Some(run_mode(MaskMode::Deactivated)?) } else { None },
    };
    write_json(&a.out, &out)?;
    let mut outputs = vec![a.out.clone()];
    if let Some(p) = &a.plot {
        let xy = |pts: &[CurvePoint]| pts.iter().map(|q| (q.k as f64, q.auc)).collect::<Vec<_>>();
        let mut series = vec![];
        if let Some(pts) = &out.activated {
            series.push((xy(pts), Rgb(40, 150, 60)));
        }
        if let Some(pts) = &out.deactivated {
            series.push((xy(pts), Rgb(200, 50, 50)));
        }
        line_plot(&series, 640, 400).write_ppm(p)?;
        outputs.push(p.clone());
    }
    m.finish(serde_json::json!({ "mode": mode, "ks": ks }), &outputs, &sidecar_path(&a.out))?;
    Ok(())
}

#[derive(Serialize)]
struct EvaluateOutput {
    images: usize,
    auc_original: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    auc_reconstructed: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    auc_drop: Option<f64>,
}

fn evaluate(a: EvaluateArgs, cfg: &ConfigFile) -> Result<()> {
    let mut m = ManifestBuilder::start("evaluate");
    cfg.finish()?;
    let ds = load_dataset(&a.data)?;
    let head = LinearHead::load(&a.head)?;
    m.input(&a.data).input(&a.head);
    let auc_original = evaluate_head(&head, &ds)?;
    let auc_reconstructed = match &a.model {
        Some(p) => {
            m.input(p);
            Some(evaluate_head(&head, &SaeModel::load(p)?.reconstruct_dataset(&ds)?)?)
        }
        None => None,
    };
    let out = EvaluateOutput {
        images: ds.len(),
        auc_original,
        auc_reconstructed,
        auc_drop: auc_reconstructed.map(|r| auc_original - r),
    };
    write_json(&a.out, &out)?;
    m.finish(serde_json::json!({}), std::slice::from_ref(&a.out), &sidecar_path(&a.out))?;
    Ok(())
}

#[derive(Serialize)]
struct LocalizeConfig {
    top: usize,
    percentile: f64,
    iou: f64,
    render_images: usize,
}

fn localize_cmd(a: LocalizeArgs, cfg: &ConfigFile) -> Result<()> {
    let mut m = ManifestBuilder::start("localize");
    let lc = LocalizeConfig {
        top: cfg.pick(a.top, "top", localize::DEFAULT_TOP_NEURONS)?,
        percentile: cfg.pick(a.percentile, "percentile", localize::DEFAULT_PERCENTILE)?,
        iou: cfg.pick(a.iou, "iou", localize::DEFAULT_IOU)?,
        render_images: cfg.pick(a.render_images, "render-images", 4)?,
    };
    cfg.finish()?;
    if !(0.0..=100.0).contains(&lc.percentile) {
        return Err(Error::Argument(format!("percentile must lie in [0, 100], got {}", lc.percentile)));
    }
    if !(lc.iou > 0.0 && lc.iou <= 1.0) {
        return Err(Error::Argument(format!("IoU threshold must lie in (0, 1], got {}", lc.iou)));
    }
    let mut ds = load_dataset(&a.data)?;
    let model = SaeModel::load(&a.model)?;
    let summary = load_summary(&a.summary)?;
    m.input(&a.data).input(&a.model).input(&a.summary);
    if let Some(p) = &a.boxes {
        attach_boxes(&mut ds, &read_box_csv(p)?)?;
        ds.validate()?;
        m.input(p);
    }
    let report = map_top_neurons(&model, &ds, &summary, lc.top, lc.percentile, lc.iou)?;
    write_json(&a.out, &report)?;
    let mut outputs = vec![a.out.clone()];
    if let Some(dir) = &a.render {
        fs::create_dir_all(dir)?;
        let positives: Vec<_> = ds.images.iter().filter(|g| g.label == 1).take(lc.render_images).collect();
        for n in &report.neurons {
            for g in &positives {
                let hm = neuron_heatmap(&model, g, ds.grid_h, ds.grid_w, n.neuron_id)?;
                let name = format!("rank{}_neuron{}_{}.pgm", n.rank, n.neuron_id, g.image_id);
                localize::render_heatmap(&hm, ds.image_w, ds.image_h, &g.gt_boxes, dir.join(name))?;
            }
        }
        outputs.push(dir.clone());
    }
    m.finish(&lc, &outputs, &sidecar_path(&a.out))?;
    Ok(())
}

fn export_means(a: ExportMeansArgs, cfg: &ConfigFile) -> Result<()> {
    let mut m = ManifestBuilder::start("export-means");
    cfg.finish()?;
    let summary = load_summary(&a.summary)?;
    m.input(&a.summary);
    export_class_means(&summary, &a.out, a.plot.as_deref())?;
    let mut outputs = vec![a.out.clone()];
    outputs.extend(a.plot.clone());
    m.finish(serde_json::json!({}), &outputs, &sidecar_path(&a.out))?;
    Ok(())
}

fn repro(a: ReproArgs, cfg: &ConfigFile) -> Result<()> {
    let mut m = ManifestBuilder::start("repro-synth");
    let seed = cfg.pick(a.seed, "seed", 1)?;
    let mut rc = ReproConfig::desk(seed);
    rc.sae.epochs = cfg.pick(a.sae_epochs, "sae-epochs", rc.sae.epochs)?;
    rc.sae.lambda = cfg.pick(a.lambda, "lambda", rc.sae.lambda)?;
    rc.synth.n_images_per_class = cfg.pick(a.images_per_class, "images-per-class", rc.synth.n_images_per_class)?;
    cfg.finish()?;

    let quiet = a.quiet;
    let outcome = repro_synth(&rc, &a.out, |line| {
        if !quiet {
            eprintln!("{line}");
        }
    })?;
    let r = &outcome.report;
    if !quiet {
        eprintln!(
            "auc original {:.4}  reconstructed {:.4}  activated@10 {}  deactivated@10 {}  best AP {:.3}",
            r.auc_original,
            r.auc_reconstructed,
            r.activated_at_10.map_or("-".into(), |v| format!("{v:.4}")),
            r.deactivated_at_10.map_or("-".into(), |v| format!("{v:.4}")),
            r.best_ap
        );
    }
    let outputs: Vec<PathBuf> = outcome.files.iter().map(|f| a.out.join(f)).collect();
    m.seed("seed", rc.seed).seed("synth", rc.synth.seed).seed("sae", rc.sae.seed);
    m.finish(&rc, &outputs, &a.out.join("manifest.json"))?;
    Ok(())
}
