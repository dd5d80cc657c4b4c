//! End-to-end run on a planted-dictionary corpus: generate, split, train the
//! head and the SAE, probe, evaluate, sweep interventions, localize, and
//! write every artifact into one directory.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Result};
use crate::head::{train_head, LinearHead};
use crate::intervene::{sweep_k, CurvePoint, MaskMode};
use crate::localize::{self, map_top_neurons, neuron_heatmap, LocalizationReport};
use crate::metrics::evaluate_head;
use crate::probe::{class_mean_latents, export_class_means, save_summary, LatentSummary};
use crate::render::{line_plot, Rgb};
use crate::sae::SaeModel;
use crate::store::{save_dataset, split_dataset, PatchFeatureSet};
use crate::synth::{generate, SynthConfig, SynthOracle};
use crate::trainer::{evaluate_loss, train_sae_with, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReproConfig {
    pub seed: u64,
    pub synth: SynthConfig,
    pub train_fraction: f64,
    pub head_epochs: usize,
    pub head_lr: f64,
    pub sae: TrainConfig,
    /// Values of k for both intervention sweeps. `h` is always appended.
    pub ks: Vec<usize>,
    pub top_neurons: usize,
    pub percentile: f64,
    pub iou_threshold: f64,
    /// Heatmaps are rendered for this many top class-1 neurons...
    pub heatmap_neurons: usize,
    /// ...on this many class-1 evaluation images.
    pub heatmap_images: usize,
    /// Entries of each ranking kept in summary.json.
    pub summary_top: usize,
}

impl ReproConfig {
    /// Desk-scale settings; every seed in the run derives from `seed`.
    pub fn desk(seed: u64) -> Self {
        ReproConfig {
            seed,
            synth: SynthConfig::desk(seed),
            train_fraction: 0.8,
            head_epochs: 500,
            head_lr: 0.1,
            sae: TrainConfig {
                expansion_factor: 8,
                lambda: 0.3,
                learning_rate: 1e-3,
                batch_size: 256,
                epochs: 30,
                seed: seed.wrapping_add(2),
                normalize_decoder: false,
            },
            ks: vec![0, 1, 2, 3, 5, 10, 20, 50, 100, 200],
            top_neurons: localize::DEFAULT_TOP_NEURONS,
            percentile: localize::DEFAULT_PERCENTILE,
            iou_threshold: localize::DEFAULT_IOU,
            heatmap_neurons: 3,
            heatmap_images: 4,
            summary_top: 50,
        }
    }

    fn split_seed(&self) -> u64 {
        self.seed.wrapping_add(1)
    }

    fn head_seed(&self) -> u64 {
        self.seed.wrapping_add(3)
    }
}

/// Both sweeps over the same k grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveFile {
    pub h: usize,
    pub auc_original: f64,
    pub auc_reconstructed: f64,
    pub activated: Vec<CurvePoint>,
    pub deactivated: Vec<CurvePoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuronDigest {
    pub rank: usize,
    pub neuron_id: usize,
    pub mean_c0: f64,
    pub mean_c1: f64,
    /// Largest |cosine| between the decoder column and any concept atom.
    pub concept_alignment: f64,
    pub ap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaeDigest {
    pub d: usize,
    pub h: usize,
    pub final_train_loss: f64,
    pub test_recon: f64,
    pub test_l0: f64,
}

/// Consolidated run report. Contains no timings, so it is reproducible
/// byte for byte.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReproReport {
    pub seed: u64,
    pub train_images: usize,
    pub test_images: usize,
    pub auc_original: f64,
    pub auc_reconstructed: f64,
    pub auc_drop: f64,
    pub sae: SaeDigest,
    pub activated_at_10: Option<f64>,
    pub deactivated_at_10: Option<f64>,
    pub top_class1_neurons: Vec<NeuronDigest>,
    pub best_ap: f64,
}

/// Everything a run produced, in memory.
#[derive(Debug, Clone)]
pub struct ReproOutcome {
    pub train: PatchFeatureSet,
    pub test: PatchFeatureSet,
    pub oracle: SynthOracle,
    pub head: LinearHead,
    pub model: SaeModel,
    pub summary: LatentSummary,
    pub curve: CurveFile,
    pub localization: LocalizationReport,
    pub report: ReproReport,
    /// Files written, relative to the output directory.
    pub files: Vec<PathBuf>,
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T, files: &mut Vec<PathBuf>) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(dir.join(name), bytes)?;
    files.push(PathBuf::from(name));
    Ok(())
}

fn concept_alignment(model: &SaeModel, oracle: &SynthOracle, t: usize) -> f64 {
    let col = model.w_dec.column(t);
    let norm = col.dot(&col).sqrt();
    if norm == 0.0 {
        return 0.0;
    }
    oracle
        .concept_atom_ids
        .iter()
        .map(|&a| (oracle.atom(a).dot(&col) / norm).abs())
        .fold(0.0, f64::max)
}

/// Runs the full pipeline, writing artifacts into `out_dir` (created if
/// missing). `progress` receives one short line per stage.
pub fn repro_synth(cfg: &ReproConfig, out_dir: &Path, mut progress: impl FnMut(&str)) -> Result<ReproOutcome> {
    if cfg.top_neurons == 0 {
        return arg_err("top_neurons must be positive");
    }
    fs::create_dir_all(out_dir)?;
    let mut files = Vec::new();

    progress("generating corpus");
    let (ds, oracle) = generate(&cfg.synth)?;
    save_dataset(&ds, out_dir.join("synth.msae"))?;
    files.push("synth.msae".into());
    oracle.save(out_dir.join("oracle.json"))?;
    files.push("oracle.json".into());
    let (train, test) = split_dataset(&ds, cfg.train_fraction, cfg.split_seed())?;

    progress("training head");
    let head = train_head(&train, cfg.head_epochs, cfg.head_lr, cfg.head_seed())?;
    head.save(out_dir.join("head.json"))?;
    files.push("head.json".into());

    progress("training sae");
    let (model, log) = train_sae_with(&train, &cfg.sae, |r| {
        progress(&format!("  epoch {:>3}  loss {:.5}  l0 {:.2}", r.epoch, r.total, r.l0))
    })?;
    model.save(out_dir.join("model.msaw"))?;
    files.push("model.msaw".into());
    let h = model.h();

    progress("probing");
    let summary = class_mean_latents(&model, &train)?;
    save_summary(&summary, cfg.summary_top.min(h), out_dir.join("summary.json"))?;
    files.push("summary.json".into());
    export_class_means(&summary, out_dir.join("class_means.json"), Some(&out_dir.join("class_means.ppm")))?;
    files.push("class_means.json".into());
    files.push("class_means.ppm".into());

    progress("evaluating");
    let auc_original = evaluate_head(&head, &test)?;
    let auc_reconstructed = evaluate_head(&head, &model.reconstruct_dataset(&test)?)?;
    let test_loss = evaluate_loss(&model, &test, cfg.sae.lambda)?;

    progress("sweeping interventions");
    let mut ks: Vec<usize> = cfg.ks.iter().copied().filter(|&k| k < h).collect();
    ks.push(h);
    ks.sort_unstable();
    ks.dedup();
    let curve = CurveFile {
        h,
        auc_original,
        auc_reconstructed,
        activated: sweep_k(&model, &test, &head, &summary, &ks, MaskMode::Activated)?,
        deactivated: sweep_k(&model, &test, &head, &summary, &ks, MaskMode::Deactivated)?,
    };
    write_json(out_dir, "curve.json", &curve, &mut files)?;
    let as_xy = |pts: &[CurvePoint]| pts.iter().map(|p| (p.k as f64, p.auc)).collect::<Vec<_>>();
    line_plot(
        &[(as_xy(&curve.activated), Rgb(40, 150, 60)), (as_xy(&curve.deactivated), Rgb(200, 50, 50))],
        640,
        400,
    )
    .write_ppm(out_dir.join("curve.ppm"))?;
    files.push("curve.ppm".into());

    progress("localizing");
    let n_top = cfg.top_neurons.min(h);
    let localization = map_top_neurons(&model, &test, &summary, n_top, cfg.percentile, cfg.iou_threshold)?;
    write_json(out_dir, "localization.json", &localization, &mut files)?;

    let heat_dir = out_dir.join("heatmaps");
    fs::create_dir_all(&heat_dir)?;
    let positives: Vec<_> = test.images.iter().filter(|g| g.label == 1).take(cfg.heatmap_images).collect();
    for (rank, &t) in summary.ranking_c1.iter().take(cfg.heatmap_neurons.min(h)).enumerate() {
        for g in &positives {
            let hm = neuron_heatmap(&model, g, test.grid_h, test.grid_w, t)?;
            let name = format!("rank{}_neuron{}_{}.pgm", rank + 1, t, g.image_id);
            localize::render_heatmap(&hm, test.image_w, test.image_h, &g.gt_boxes, heat_dir.join(&name))?;
            files.push(Path::new("heatmaps").join(name));
        }
    }

    let point_at = |pts: &[CurvePoint], k: usize| pts.iter().find(|p| p.k == k).map(|p| p.auc);
    let top_class1_neurons: Vec<NeuronDigest> = localization
        .neurons
        .iter()
        .map(|n| NeuronDigest {
            rank: n.rank,
            neuron_id: n.neuron_id,
            mean_c0: summary.mean_c0[n.neuron_id],
            mean_c1: summary.mean_c1[n.neuron_id],
            concept_alignment: concept_alignment(&model, &oracle, n.neuron_id),
            ap: n.ap,
        })
        .collect();
    let report = ReproReport {
        seed: cfg.seed,
        train_images: train.len(),
        test_images: test.len(),
        auc_original,
        auc_reconstructed,
        auc_drop: auc_original - auc_reconstructed,
        sae: SaeDigest {
            d: model.d(),
            h,
            final_train_loss: log.epochs.last().map_or(f64::NAN, |r| r.total),
            test_recon: test_loss.recon,
            test_l0: test_loss.l0,
        },
        activated_at_10: point_at(&curve.activated, 10),
        deactivated_at_10: point_at(&curve.deactivated, 10),
        best_ap: localization.ap_values().into_iter().fold(0.0, f64::max),
        top_class1_neurons,
    };
    write_json(out_dir, "report.json", &report, &mut files)?;

    Ok(ReproOutcome { train, test, oracle, head, model, summary, curve, localization, report, files })
}
