//! Bit-exact reductions, determinism and resume on a small synthetic corpus.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vclab::checkpoint::{encode_state, load_state, save_state};
use vclab_core::dataset::{synthesize_toy_corpus, Corpus, ToySpec};
use vclab_core::losses::{cyc_loss, id_loss, IdentityConverter, LossReport, Reduction};
use vclab_core::networks::NetConfig;
use vclab_core::pipeline::{estimate_latent_priors, run_stage, train_stage1, TrainConfig, TrainState};
use vclab_core::tensor::Tensor;

pub const ITERATIONS: u64 = 6;

pub fn corpus() -> Corpus {
    let spec = ToySpec { n_speakers: 3, n_phonemes: 4, utts_per_speaker: 4, frames_per_utt: 64, q: 8 };
    synthesize_toy_corpus(11, &spec).unwrap().0
}

pub fn config() -> TrainConfig {
    TrainConfig {
        seed: 5,
        batch_size: 4,
        crop_width: 16,
        iterations_stage1: ITERATIONS,
        iterations_stage2: ITERATIONS,
        net: NetConfig::tiny(8, 3, 4),
        ..TrainConfig::default()
    }
}

fn same_training(a: &LossReport, b: &LossReport) -> bool {
    let (p, q) = (&a.parts, &b.parts);
    [p.adv_d, p.adv_g, p.cls_c, p.cls_g, p.cyc, p.id, a.i_g, a.i_d, a.i_c]
        .iter()
        .zip([q.adv_d, q.adv_g, q.cls_c, q.cls_g, q.cyc, q.id, b.i_g, b.i_d, b.i_c])
        .all(|(x, y)| x.to_bits() == y.to_bits())
}

/// Stage 2 at beta = 0 against stage 1 continued for the same number of
/// iterations from the same state. Returns a description of the first difference.
pub fn beta_zero_matches_stage1() -> Result<(), String> {
    let corpus = corpus();
    let cfg = config();
    let start = train_stage1(&corpus, &cfg, &mut |_, _| {}).map_err(|e| e.to_string())?;

    let mut cont = start.clone();
    let mut cont_log = Vec::new();
    run_stage(&mut cont, &corpus, &cfg, 1, 2 * ITERATIONS, &mut |_, r| cont_log.push(*r)).map_err(|e| e.to_string())?;

    let mut zero = start;
    let mut zero_cfg = cfg.clone();
    zero_cfg.weights.beta = 0.0;
    estimate_latent_priors(&mut zero, &corpus, &zero_cfg).map_err(|e| e.to_string())?;
    let mut zero_log = Vec::new();
    run_stage(&mut zero, &corpus, &zero_cfg, 2, ITERATIONS, &mut |_, r| zero_log.push(*r)).map_err(|e| e.to_string())?;

    if cont_log.len() != zero_log.len() {
        return Err(format!("{} vs {} logged iterations", cont_log.len(), zero_log.len()));
    }
    if let Some(i) = (0..cont_log.len()).find(|&i| !same_training(&cont_log[i], &zero_log[i])) {
        return Err(format!("losses differ at iteration {}", i + 1));
    }
    cont.stage = zero.stage;
    cont.iteration = zero.iteration;
    cont.priors = zero.priors.clone();
    if encode_state(&cont) != encode_state(&zero) {
        return Err("final parameters, optimizer or random stream differ".into());
    }
    Ok(())
}

/// Cycle and identity losses of the identity converter on random inputs.
/// Returns the number of trials and any nonzero value seen.
pub fn identity_converter_zero(trials: usize) -> (usize, Vec<String>) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut bad = Vec::new();
    for trial in 0..trials {
        let b = rng.random_range(1..=4);
        let q = rng.random_range(1..=12);
        let t = rng.random_range(1..=40);
        let n = rng.random_range(2..=6);
        let scale = 10f64.powi(rng.random_range(-3..=3));
        let data = (0..b * q * t).map(|_| scale * rng.random_range(-1.0..1.0)).collect();
        let o = Tensor::from_vec([b, 1, q, t], data).unwrap();
        let src: Vec<usize> = (0..b).map(|_| rng.random_range(0..n)).collect();
        let tgt: Vec<usize> = (0..b).map(|_| rng.random_range(0..n)).collect();
        let rho = [1.0, 1.5, 2.0][trial % 3];
        let red = if trial % 2 == 0 { Reduction::Mean } else { Reduction::Sum };
        let cyc = cyc_loss(&IdentityConverter, &o, &src, &tgt, rho, red).unwrap();
        let id = id_loss(&IdentityConverter, &o, &src, rho, red).unwrap();
        if cyc.to_bits() != 0 || id.to_bits() != 0 {
            bad.push(format!("trial {trial}: cyc {cyc:e}, id {id:e}"));
        }
    }
    (trials, bad)
}

fn full_run(corpus: &Corpus, cfg: &TrainConfig) -> TrainState {
    let mut s = train_stage1(corpus, cfg, &mut |_, _| {}).unwrap();
    estimate_latent_priors(&mut s, corpus, cfg).unwrap();
    run_stage(&mut s, corpus, cfg, 2, cfg.iterations_stage2, &mut |_, _| {}).unwrap();
    s
}

pub fn repeat_runs_identical() -> bool {
    let corpus = corpus();
    let cfg = config();
    encode_state(&full_run(&corpus, &cfg)) == encode_state(&full_run(&corpus, &cfg))
}

/// Saves and reloads the state halfway through each stage.
pub fn resume_matches_unbroken() -> Result<(), String> {
    let corpus = corpus();
    let cfg = config();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("mid.ckpt");
    let reload = |s: &TrainState| -> Result<TrainState, String> {
        save_state(&path, s).map_err(|e| e.to_string())?;
        load_state(&path).map_err(|e| e.to_string())
    };

    let mut s = TrainState::new(&corpus, &cfg).map_err(|e| e.to_string())?;
    run_stage(&mut s, &corpus, &cfg, 1, ITERATIONS / 2, &mut |_, _| {}).map_err(|e| e.to_string())?;
    let mut s = reload(&s)?;
    run_stage(&mut s, &corpus, &cfg, 1, ITERATIONS, &mut |_, _| {}).map_err(|e| e.to_string())?;
    estimate_latent_priors(&mut s, &corpus, &cfg).map_err(|e| e.to_string())?;
    run_stage(&mut s, &corpus, &cfg, 2, ITERATIONS / 2, &mut |_, _| {}).map_err(|e| e.to_string())?;
    let mut s = reload(&s)?;
    run_stage(&mut s, &corpus, &cfg, 2, ITERATIONS, &mut |_, _| {}).map_err(|e| e.to_string())?;

    if encode_state(&s) == encode_state(&full_run(&corpus, &cfg)) {
        Ok(())
    } else {
        Err("resumed state differs from the unbroken run".into())
    }
}
