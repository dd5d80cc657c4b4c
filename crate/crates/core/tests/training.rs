use patchsae_core::probe::class_mean_latents;
use patchsae_core::store::split_dataset;
use patchsae_core::synth::generate;
use patchsae_core::trainer::{evaluate_loss, train_sae};
use patchsae_core::{PatchFeatureSet, SynthConfig, SynthOracle, TrainConfig};

fn corpus(per_class: usize) -> (PatchFeatureSet, SynthOracle) {
    let mut cfg = SynthConfig::desk(7);
    cfg.n_images_per_class = per_class;
    generate(&cfg).unwrap()
}

fn quick(lambda: f64, epochs: usize) -> TrainConfig {
    TrainConfig { expansion_factor: 4, lambda, learning_rate: 1e-3, batch_size: 256, epochs, seed: 5, normalize_decoder: false }
}

#[test]
fn stronger_sparsity_penalty_gives_sparser_codes() {
    let (ds, _) = corpus(15);
    let l0: Vec<f64> = [0.0, 0.1, 1.0]
        .iter()
        .map(|&lambda| {
            let (model, _) = train_sae(&ds, &quick(lambda, 8)).unwrap();
            evaluate_loss(&model, &ds, lambda).unwrap().l0
        })
        .collect();
    assert!(l0[0] > l0[1] && l0[1] > l0[2], "{l0:?}");
}

#[test]
fn training_reduces_loss_and_generalizes() {
    let (ds, _) = corpus(20);
    let (train, test) = split_dataset(&ds, 0.75, 1).unwrap();
    let cfg = quick(0.1, 10);
    let (model, log) = train_sae(&train, &cfg).unwrap();
    let first = log.epochs.first().unwrap().total;
    let last = log.epochs.last().unwrap().total;
    assert!(last < 0.5 * first, "{first} -> {last}");
    let held_out = evaluate_loss(&model, &test, cfg.lambda).unwrap().total;
    assert!(held_out < 2.0 * last, "train {last}, test {held_out}");
}

#[test]
fn result_does_not_depend_on_worker_count() {
    let (ds, _) = corpus(10);
    let cfg = quick(0.1, 3);
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| train_sae(&ds, &cfg).unwrap().0.to_bytes().unwrap())
    };
    assert_eq!(run(1), run(4));
}

#[test]
fn top_class1_neuron_recovers_the_anchor_concept_atom() {
    let (ds, oracle) = corpus(60);
    let mut cfg = quick(0.3, 15);
    cfg.expansion_factor = 2;
    let (model, _) = train_sae(&ds, &cfg).unwrap();
    let summary = class_mean_latents(&model, &ds).unwrap();
    let t = summary.ranking_c1[0];
    let col = model.w_dec.column(t);
    let cos = oracle.atom(oracle.concept_atom_ids[0]).dot(&col) / col.dot(&col).sqrt();
    assert!(cos > 0.9, "neuron {t} has cosine {cos} with the anchor atom");
    assert!(summary.mean_c1[t] > 5.0 * summary.mean_c0[t]);
}
