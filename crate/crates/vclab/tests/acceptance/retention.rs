//! Synthetic linguistic-retention experiment: shared stage 1, then stage 2
//! with and without the prior regularizer, scored on held-out latents under
//! the frozen stage-1 priors.

use vclab_core::dataset::{synthesize_heldout, synthesize_toy_corpus, ToySpec};
use vclab_core::eval::nearest_gaussian_accuracy;
use vclab_core::networks::NetConfig;
use vclab_core::phoneme_prior::{mean_mahalanobis, PriorSet};
use vclab_core::pipeline::{encode_corpus, estimate_latent_priors, run_stage, train_stage1, TrainConfig, TrainState};

pub struct SeedResult {
    pub seed: u64,
    pub acc_baseline: f64,
    pub acc_regularized: f64,
    pub maha_baseline: f64,
    pub maha_regularized: f64,
}

/// Feature height and crop width of the experiment.
pub const Q: usize = 12;
pub const CROP: usize = 64;
/// The default latent dimension.
pub const LATENT: usize = 8;

pub fn spec() -> ToySpec {
    ToySpec { n_speakers: 4, n_phonemes: 5, utts_per_speaker: 24, frames_per_utt: 256, q: Q }
}

pub fn config(seed: u64, iterations: u64) -> TrainConfig {
    TrainConfig {
        seed,
        iterations_stage1: iterations,
        iterations_stage2: iterations,
        crop_width: CROP,
        net: NetConfig::tiny(Q, 4, LATENT),
        ..TrainConfig::default()
    }
}

fn score(state: &TrainState, heldout: &vclab_core::dataset::Corpus, priors: &PriorSet) -> (f64, f64) {
    let (latents, labels) = encode_corpus(&state.model.g, heldout).unwrap();
    let refs: Vec<&[usize]> = labels.iter().map(|l| l.as_slice()).collect();
    let acc = nearest_gaussian_accuracy(&latents, &refs, priors).unwrap();
    let maha = mean_mahalanobis(&latents, &refs, priors).unwrap();
    (acc, maha)
}

pub fn run_seed(seed: u64, iterations: u64) -> SeedResult {
    let (corpus, _) = synthesize_toy_corpus(seed, &spec()).unwrap();
    let (heldout, _) = synthesize_heldout(seed, &spec()).unwrap();
    let cfg = config(seed, iterations);
    let mut stage1 = train_stage1(&corpus, &cfg, &mut |_, _| {}).unwrap();
    estimate_latent_priors(&mut stage1, &corpus, &cfg).unwrap();
    let priors = stage1.priors.clone().unwrap();

    let mut results = [(0.0, 0.0); 2];
    for (slot, beta) in [0.0, 0.01].into_iter().enumerate() {
        let mut c = cfg.clone();
        c.weights.beta = beta;
        let mut state = stage1.clone();
        run_stage(&mut state, &corpus, &c, 2, iterations, &mut |_, _| {}).unwrap();
        results[slot] = score(&state, &heldout, &priors);
    }
    SeedResult {
        seed,
        acc_baseline: results[0].0,
        acc_regularized: results[1].0,
        maha_baseline: results[0].1,
        maha_regularized: results[1].1,
    }
}
