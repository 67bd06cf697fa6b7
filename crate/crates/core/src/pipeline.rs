//! Two-stage training driver, latent prior estimation and utterance conversion.
//!
//! Stage 1 alternates D, C and G updates on the plain adversarial objective.
//! Priors are then estimated from evaluation-mode encoder latents, and stage 2
//! repeats the loop with the prior regularizer added to the generator
//! objective. All randomness comes from one ChaCha stream held in the state.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{convert_f0, AcousticFeatureSeq, Corpus, SpeakerDomain};
use crate::error::{Error, Result};
use crate::layers::{Mode, RunningStats};
use crate::losses::{
    adv_loss_d, adv_loss_d_grad, adv_loss_g, adv_loss_g_grad, cls_loss_c, cls_loss_g, cls_loss_grad,
    rho_norm_with_grad, total_objectives, AsrTerm, FeatureConverter, LossParts, LossReport, LossWeights,
    Reduction,
};
use crate::networks::{Generator, ModelParams, NetConfig};
use crate::optim::{Adam, AdamConfig};
use crate::params::Grads;
use crate::phoneme_prior::{
    estimate_priors, CovarianceKind, LatentSeq, PriorSet, UnseenPolicy, DEFAULT_COVARIANCE_FLOOR,
};
use crate::tensor::Tensor;

/// Every training hyperparameter. Defaults follow the published settings:
/// batch 8, 2000 iterations per stage, learning rate 0.001, Adam beta1 0.5.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub weights: LossWeights,
    pub batch_size: usize,
    pub iterations_stage1: u64,
    pub iterations_stage2: u64,
    pub learning_rate_g: f64,
    /// Shared by D and C.
    pub learning_rate_d: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub crop_width: usize,
    pub seed: u64,
    pub covariance_floor: f64,
    pub covariance_kind: CovarianceKind,
    pub unseen_policy: UnseenPolicy,
    /// Re-estimate priors every this many stage-2 iterations; 0 keeps them frozen.
    pub prior_reestimate_every: u64,
    /// Architecture; `q` and `n_domains` are taken from the corpus at training time.
    pub net: NetConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            weights: LossWeights::default(),
            batch_size: 8,
            iterations_stage1: 2000,
            iterations_stage2: 2000,
            learning_rate_g: 0.001,
            learning_rate_d: 0.001,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            crop_width: 128,
            seed: 0,
            covariance_floor: DEFAULT_COVARIANCE_FLOOR,
            covariance_kind: CovarianceKind::Full,
            unseen_policy: UnseenPolicy::Error,
            prior_reestimate_every: 0,
            net: NetConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.learning_rate_g > 0.0 && self.learning_rate_d > 0.0) {
            return bad("learning rates must be positive");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("Adam betas must be in [0, 1)");
        }
        if !(self.adam_eps >= 0.0) {
            return bad("adam_eps must be non-negative");
        }
        if !(self.covariance_floor > 0.0) {
            return bad("covariance_floor must be positive");
        }
        self.net.validate()?;
        if !self.net.admissible_width(self.crop_width) {
            return Err(Error::Config(format!(
                "crop_width {} is not a positive multiple of {}",
                self.crop_width,
                self.net.time_downsample()
            )));
        }
        Ok(())
    }

    /// Architecture with input height and domain count taken from `corpus`.
    pub fn net_for(&self, corpus: &Corpus) -> NetConfig {
        NetConfig { q: corpus.q(), n_domains: corpus.domains().len(), ..self.net.clone() }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { beta1: self.adam_beta1, beta2: self.adam_beta2, eps: self.adam_eps }
    }
}

/// Everything needed to resume training bit-exactly.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: ModelParams,
    pub opt_g: Adam,
    pub opt_d: Adam,
    pub opt_c: Adam,
    /// 1 or 2.
    pub stage: u8,
    /// Iterations completed in the current stage.
    pub iteration: u64,
    pub rng: ChaCha8Rng,
    pub priors: Option<PriorSet>,
}

impl TrainState {
    /// Fresh parameters drawn from `cfg.seed`; the minibatch stream is stream 1 of the same seed.
    pub fn new(corpus: &Corpus, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = ModelParams::init(&cfg.net_for(corpus), cfg.seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1);
        Ok(TrainState {
            opt_g: Adam::new(&model.g.params),
            opt_d: Adam::new(&model.d.params),
            opt_c: Adam::new(&model.c.params),
            model,
            stage: 1,
            iteration: 0,
            rng,
            priors: None,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage != 1 && self.stage != 2 {
            return Err(Error::Config(format!("unknown stage {}", self.stage)));
        }
        if self.stage == 2 && self.priors.is_none() {
            return Err(Error::Config("stage 2 state has no prior set".into()));
        }
        if !self.opt_g.matches(&self.model.g.params)
            || !self.opt_d.matches(&self.model.d.params)
            || !self.opt_c.matches(&self.model.c.params)
        {
            return Err(Error::Shape("optimizer moments do not match parameters".into()));
        }
        Ok(())
    }
}

/// One training minibatch: cropped real features, their domains, sampled targets,
/// and per-item frame labels.
#[derive(Debug, Clone)]
pub struct Minibatch {
    /// Shape (B, 1, Q, W).
    pub x: Tensor,
    pub src: Vec<usize>,
    pub tgt: Vec<usize>,
    pub labels: Vec<Vec<usize>>,
}

/// Copies frames `start..start + width` of a row-major Q×T matrix, repeating the
/// last frame past the end.
fn window_edge_padded(features: &[f64], q: usize, t: usize, start: usize, width: usize) -> Vec<f64> {
    let mut out = vec![0.0; q * width];
    for c in 0..q {
        for j in 0..width {
            out[c * width + j] = features[c * t + (start + j).min(t - 1)];
        }
    }
    out
}

fn labels_edge_padded(labels: &[usize], start: usize, width: usize) -> Vec<usize> {
    (0..width).map(|j| labels[(start + j).min(labels.len() - 1)]).collect()
}

/// Draws utterance, crop start and target code for each item, in that order.
pub fn sample_minibatch(rng: &mut ChaCha8Rng, corpus: &Corpus, batch: usize, width: usize) -> Result<Minibatch> {
    let utts = corpus.utterances();
    let n_dom = corpus.domains().len();
    let q = corpus.q();
    let mut items = Vec::with_capacity(batch);
    let mut src = Vec::with_capacity(batch);
    let mut tgt = Vec::with_capacity(batch);
    let mut labels = Vec::with_capacity(batch);
    for _ in 0..batch {
        let u = &utts[rng.random_range(0..utts.len())];
        let t = u.features.frames();
        let start = if t > width { rng.random_range(0..=t - width) } else { 0 };
        items.push(window_edge_padded(u.features.features(), q, t, start, width));
        labels.push(labels_edge_padded(u.alignment.labels(), start, width));
        src.push(u.domain);
        tgt.push(rng.random_range(0..n_dom));
    }
    let refs: Vec<&[f64]> = items.iter().map(|v| v.as_slice()).collect();
    Ok(Minibatch { x: Tensor::stack_matrices(q, width, &refs)?, src, tgt, labels })
}

/// Majority label over consecutive windows of `factor` frames; ties go to the
/// label that occurs first in the window. A trailing partial window is pooled too.
pub fn downsample_labels(labels: &[usize], factor: usize) -> Vec<usize> {
    if factor <= 1 {
        return labels.to_vec();
    }
    labels
        .chunks(factor)
        .map(|w| {
            let mut best = w[0];
            let mut best_count = 0;
            for (i, &l) in w.iter().enumerate() {
                if w[..i].contains(&l) {
                    continue;
                }
                let count = w.iter().filter(|&&m| m == l).count();
                if count > best_count {
                    best = l;
                    best_count = count;
                }
            }
            best
        })
        .collect()
}

/// Multipliers on each generator loss term. Training uses
/// `(1, lambda_cls, lambda_cyc, lambda_id, beta)`; gradient checks isolate terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeneratorCoefficients {
    pub adv: f64,
    pub cls: f64,
    pub cyc: f64,
    pub id: f64,
    /// Multiplies the per-frame prior loss.
    pub asr: f64,
    pub rho: f64,
    pub reduction: Reduction,
}

impl GeneratorCoefficients {
    pub fn from_weights(w: &LossWeights, stage: u8) -> Self {
        GeneratorCoefficients {
            adv: 1.0,
            cls: w.lambda_cls,
            cyc: w.lambda_cyc,
            id: w.lambda_id,
            asr: if stage == 2 { w.beta } else { 0.0 },
            rho: w.rho,
            reduction: w.rho_reduction,
        }
    }
}

/// Result of a generator forward/backward pass.
#[derive(Debug, Clone)]
pub struct GeneratorPass {
    pub adv: f64,
    pub cls: f64,
    pub cyc: f64,
    pub id: f64,
    pub asr: Option<AsrTerm>,
    /// Coefficient-weighted sum of the terms.
    pub total: f64,
    pub grads: Grads,
    /// d total / d x, when requested.
    pub dx: Option<Tensor>,
    /// Batch-norm statistics of every train-mode pass, in forward order.
    pub stats: Vec<(usize, RunningStats)>,
}

/// Which gradients a generator pass should produce.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Backward {
    /// Loss values only.
    None,
    Params,
    ParamsAndInput,
}

/// Prior inputs for the regularizer: priors, latent-rate labels per item, and policy.
#[derive(Debug, Clone, Copy)]
pub struct PriorInput<'a> {
    pub priors: &'a PriorSet,
    pub labels: &'a [Vec<usize>],
    pub policy: UnseenPolicy,
}

fn scale(v: &mut [f64], s: f64) {
    for x in v {
        *x *= s;
    }
}

fn scaled_nested(v: Vec<Vec<f64>>, s: f64) -> Vec<Vec<f64>> {
    v.into_iter().map(|mut r| {
        scale(&mut r, s);
        r
    }).collect()
}

/// Raw prior loss over a latent batch and its gradient scaled by `coeff / frames`.
/// Gradient is skipped entirely when `coeff` is zero.
pub fn latent_prior_loss(y: &Tensor, input: &PriorInput<'_>, coeff: f64) -> Result<(AsrTerm, Option<Tensor>)> {
    let [b, l, h, w] = y.shape();
    if h != 1 || input.labels.len() != b || input.priors.latent_dim() != l {
        return Err(Error::Shape(format!("latent batch {:?} does not match labels/priors", y.shape())));
    }
    let mut raw = 0.0;
    let mut frames = 0usize;
    let mut contributions: Vec<(usize, usize, Vec<f64>)> = Vec::new();
    for n in 0..b {
        let labels = &input.labels[n];
        if labels.len() != w {
            return Err(Error::LengthMismatch { utterance: format!("batch item {n}"), expected: w, found: labels.len() });
        }
        let seq = LatentSeq::from_channel_major(l, w, y.item(n))?;
        for (t, &p) in labels.iter().enumerate() {
            let prior = match input.priors.get(p) {
                Some(pr) => pr,
                None if input.policy == UnseenPolicy::SkipFrame => continue,
                None => return Err(Error::UnseenPhoneme { utterance: n, frame: t, phoneme: p }),
            };
            let yt = seq.frame(t);
            raw -= crate::phoneme_prior::prior_log_density(yt, prior)?;
            frames += 1;
            if coeff != 0.0 {
                contributions.push((n, t, prior.precision_times_residual(yt)));
            }
        }
    }
    let term = AsrTerm { raw, frames };
    if coeff == 0.0 {
        return Ok((term, None));
    }
    let s = coeff / frames.max(1) as f64;
    let mut dy = Tensor::zeros(y.shape());
    for (n, t, g) in contributions {
        let item = dy.item_mut(n);
        for (k, gk) in g.iter().enumerate() {
            item[k * w + t] = s * gk;
        }
    }
    Ok((term, Some(dy)))
}

fn add_into(acc: &mut Option<Tensor>, t: Tensor) {
    match acc {
        Some(a) => a.add_assign(&t),
        None => *acc = Some(t),
    }
}

fn ensure_finite(v: f64, iteration: u64, stage: u8, term: &'static str) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteLoss { iteration, stage, term })
    }
}

/// Discriminator objective and its gradient with respect to D's parameters.
/// Fake samples are generated in train mode without committing statistics.
pub fn discriminator_objective(model: &ModelParams, mb: &Minibatch) -> Result<(f64, Grads)> {
    let (fake, _, _) = model.g.generate(&mb.x, &mb.tgt, Mode::Train)?;
    let real = model.d.forward(&mb.x, &mb.src)?;
    let fake_out = model.d.forward(&fake, &mb.tgt)?;
    let loss = adv_loss_d(&real.probs, &fake_out.probs);
    let (dr, df) = adv_loss_d_grad(&real.probs, &fake_out.probs);
    let mut grads = model.d.params.zero_grads();
    model.d.backward(&real, &dr, Some(&mut grads));
    model.d.backward(&fake_out, &df, Some(&mut grads));
    Ok((loss, grads))
}

/// Classifier objective on real samples and its gradient with respect to C's parameters.
pub fn classifier_objective(model: &ModelParams, mb: &Minibatch) -> Result<(f64, Grads)> {
    let out = model.c.forward(&mb.x)?;
    let loss = cls_loss_c(&out.probs, &mb.src);
    let dp = cls_loss_grad(&out.probs, &mb.src);
    let mut grads = model.c.params.zero_grads();
    model.c.backward(&out, &dp, Some(&mut grads));
    Ok((loss, grads))
}

/// Generator objective: adversarial, classification, cycle, identity and
/// (optionally) prior terms, with gradients for G's parameters only.
///
/// The identity pass decodes the latents of the first encoder pass with the
/// source codes, and the prior term is applied to those same latents.
pub fn generator_objective(
    model: &ModelParams,
    mb: &Minibatch,
    k: &GeneratorCoefficients,
    prior: Option<PriorInput<'_>>,
    backward: Backward,
) -> Result<GeneratorPass> {
    let g = &model.g;
    let need_dx = backward == Backward::ParamsAndInput;
    let grad = |c: f64| backward != Backward::None && c != 0.0;
    let (y, ec) = g.encode(&mb.x, Mode::Train)?;
    let (fake, dc1) = g.decode(&y, &mb.tgt, Mode::Train)?;
    let mut grads = g.params.zero_grads();
    let mut dfake: Option<Tensor> = None;

    let d_out = model.d.forward(&fake, &mb.tgt)?;
    let adv = adv_loss_g(&d_out.probs);
    if grad(k.adv) {
        let dp = scaled_nested(adv_loss_g_grad(&d_out.probs), k.adv);
        add_into(&mut dfake, model.d.backward(&d_out, &dp, None));
    }

    let c_out = model.c.forward(&fake)?;
    let cls = cls_loss_g(&c_out.probs, &mb.tgt);
    if grad(k.cls) {
        let dp: Vec<Vec<Vec<f64>>> = cls_loss_grad(&c_out.probs, &mb.tgt)
            .into_iter()
            .map(|segs| scaled_nested(segs, k.cls))
            .collect();
        add_into(&mut dfake, model.c.backward(&c_out, &dp, None));
    }

    let (y2, ec2) = g.encode(&fake, Mode::Train)?;
    let (rec, dc2) = g.decode(&y2, &mb.src, Mode::Train)?;
    let (cyc, mut g_rec) = rho_norm_with_grad(rec.data(), mb.x.data(), k.rho, k.reduction);
    let mut dx_direct: Option<Tensor> = None;
    if grad(k.cyc) {
        scale(&mut g_rec, k.cyc);
        if need_dx {
            let neg: Vec<f64> = g_rec.iter().map(|v| -v).collect();
            add_into(&mut dx_direct, Tensor::from_vec(mb.x.shape(), neg)?);
        }
        let drec = Tensor::from_vec(rec.shape(), g_rec)?;
        let dy2 = g.backward_decode(&dc2, &drec, Some(&mut grads));
        let df = g.backward_encode(&ec2, &dy2, Some(&mut grads), true).expect("input gradient requested");
        add_into(&mut dfake, df);
    }

    let (same, dc3) = g.decode(&y, &mb.src, Mode::Train)?;
    let (id, mut g_id) = rho_norm_with_grad(same.data(), mb.x.data(), k.rho, k.reduction);
    let mut dy: Option<Tensor> = None;
    if grad(k.id) {
        scale(&mut g_id, k.id);
        if need_dx {
            let neg: Vec<f64> = g_id.iter().map(|v| -v).collect();
            add_into(&mut dx_direct, Tensor::from_vec(mb.x.shape(), neg)?);
        }
        let dsame = Tensor::from_vec(same.shape(), g_id)?;
        add_into(&mut dy, g.backward_decode(&dc3, &dsame, Some(&mut grads)));
    }

    let asr = match prior {
        Some(input) => {
            let (term, dlat) = latent_prior_loss(&y, &input, if grad(k.asr) { k.asr } else { 0.0 })?;
            if let Some(d) = dlat {
                add_into(&mut dy, d);
            }
            Some(term)
        }
        None => None,
    };

    if let Some(df) = dfake {
        add_into(&mut dy, g.backward_decode(&dc1, &df, Some(&mut grads)));
    }
    let mut dx = match dy {
        Some(d) => g.backward_encode(&ec, &d, Some(&mut grads), need_dx),
        None if need_dx => Some(Tensor::zeros(mb.x.shape())),
        None => None,
    };
    if let (Some(acc), Some(direct)) = (dx.as_mut(), dx_direct) {
        acc.add_assign(&direct);
    }

    let mut total = k.adv * adv + k.cls * cls + k.cyc * cyc + k.id * id;
    if let Some(a) = asr {
        total += k.asr * a.normalized();
    }
    let mut stats = g.encoder_batch_stats(&ec);
    stats.extend(g.decoder_batch_stats(&dc1));
    stats.extend(g.encoder_batch_stats(&ec2));
    stats.extend(g.decoder_batch_stats(&dc2));
    stats.extend(g.decoder_batch_stats(&dc3));
    Ok(GeneratorPass { adv, cls, cyc, id, asr, total, grads, dx, stats })
}

/// Runs one D, C, G iteration and returns its loss report.
pub fn train_iteration(state: &mut TrainState, corpus: &Corpus, cfg: &TrainConfig) -> Result<LossReport> {
    let stage = state.stage;
    let it = state.iteration + 1;
    let adam = cfg.adam();

    let mb = sample_minibatch(&mut state.rng, corpus, cfg.batch_size, cfg.crop_width)?;
    let (adv_d, gd) = discriminator_objective(&state.model, &mb)?;
    ensure_finite(adv_d, it, stage, "adv_d")?;
    state.opt_d.step(&mut state.model.d.params, &gd, cfg.learning_rate_d, &adam);

    let mb = sample_minibatch(&mut state.rng, corpus, cfg.batch_size, cfg.crop_width)?;
    let (cls_c, gc) = classifier_objective(&state.model, &mb)?;
    ensure_finite(cls_c, it, stage, "cls_c")?;
    state.opt_c.step(&mut state.model.c.params, &gc, cfg.learning_rate_d, &adam);

    let mb = sample_minibatch(&mut state.rng, corpus, cfg.batch_size, cfg.crop_width)?;
    let coeffs = GeneratorCoefficients::from_weights(&cfg.weights, stage);
    let f = state.model.config.time_downsample();
    let latent_labels: Vec<Vec<usize>> = mb.labels.iter().map(|l| downsample_labels(l, f)).collect();
    let prior = match (stage, &state.priors) {
        (2, Some(p)) => Some(PriorInput { priors: p, labels: &latent_labels, policy: cfg.unseen_policy }),
        (2, None) => return Err(Error::Config("stage 2 requires estimated priors".into())),
        _ => None,
    };
    let pass = generator_objective(&state.model, &mb, &coeffs, prior, Backward::Params)?;
    for (v, name) in [(pass.adv, "adv_g"), (pass.cls, "cls_g"), (pass.cyc, "cyc"), (pass.id, "id")] {
        ensure_finite(v, it, stage, name)?;
    }
    if let Some(a) = pass.asr {
        ensure_finite(a.raw, it, stage, "asr")?;
    }
    if !pass.grads.all_finite() {
        return Err(Error::NonFiniteLoss { iteration: it, stage, term: "generator gradient" });
    }
    state.opt_g.step(&mut state.model.g.params, &pass.grads, cfg.learning_rate_g, &adam);
    state.model.g.commit_stats(&pass.stats);

    let parts = LossParts { adv_d, adv_g: pass.adv, cls_c, cls_g: pass.cls, cyc: pass.cyc, id: pass.id, asr: pass.asr };
    let report = total_objectives(&parts, &cfg.weights, stage)?;
    state.iteration = it;
    Ok(report)
}

/// Trains in `stage` until `until` iterations of that stage have completed.
/// Switching stage resets the per-stage counter. `observer` sees every report.
pub fn run_stage(
    state: &mut TrainState,
    corpus: &Corpus,
    cfg: &TrainConfig,
    stage: u8,
    until: u64,
    observer: &mut dyn FnMut(u64, &LossReport),
) -> Result<()> {
    cfg.validate()?;
    if stage == 2 && state.priors.is_none() {
        return Err(Error::Config("stage 2 requires estimated priors".into()));
    }
    if stage != 1 && stage != 2 {
        return Err(Error::Config(format!("unknown stage {stage}")));
    }
    if state.model.config != cfg.net_for(corpus) {
        return Err(Error::Config("model architecture does not match config and corpus".into()));
    }
    if state.stage != stage {
        state.stage = stage;
        state.iteration = 0;
    }
    while state.iteration < until {
        let report = train_iteration(state, corpus, cfg)?;
        observer(state.iteration, &report);
        if stage == 2 && cfg.prior_reestimate_every > 0 && state.iteration % cfg.prior_reestimate_every == 0 {
            estimate_latent_priors(state, corpus, cfg)?;
        }
    }
    Ok(())
}

/// Initializes a state and runs stage 1 for `cfg.iterations_stage1` iterations.
pub fn train_stage1(corpus: &Corpus, cfg: &TrainConfig, observer: &mut dyn FnMut(u64, &LossReport)) -> Result<TrainState> {
    let mut state = TrainState::new(corpus, cfg)?;
    run_stage(&mut state, corpus, cfg, 1, cfg.iterations_stage1, observer)?;
    Ok(state)
}

/// Runs stage 2 for `cfg.iterations_stage2` iterations, estimating priors first if absent.
pub fn train_stage2(
    mut state: TrainState,
    corpus: &Corpus,
    cfg: &TrainConfig,
    observer: &mut dyn FnMut(u64, &LossReport),
) -> Result<TrainState> {
    if state.priors.is_none() {
        estimate_latent_priors(&mut state, corpus, cfg)?;
    }
    run_stage(&mut state, corpus, cfg, 2, cfg.iterations_stage2, observer)?;
    Ok(state)
}

/// Pads a feature sequence to a multiple of `multiple` frames by repeating the last frame.
pub fn pad_features(utt: &AcousticFeatureSeq, multiple: usize) -> (Vec<f64>, usize) {
    let t = utt.frames();
    let padded = t.div_ceil(multiple.max(1)) * multiple.max(1);
    (window_edge_padded(utt.features(), utt.q(), t, 0, padded), padded)
}

/// Evaluation-mode latents of one feature sequence, padded to an admissible width.
pub fn encode_features(g: &Generator, utt: &AcousticFeatureSeq) -> Result<LatentSeq> {
    let (data, width) = pad_features(utt, g.config().time_downsample());
    let x = Tensor::from_vec([1, 1, utt.q(), width], data)?;
    let (y, _) = g.encode(&x, Mode::Eval)?;
    LatentSeq::from_channel_major(y.channels(), y.width(), y.item(0))
}

/// Evaluation-mode latents and latent-rate labels of every utterance, in corpus order.
pub fn encode_corpus(g: &Generator, corpus: &Corpus) -> Result<(Vec<LatentSeq>, Vec<Vec<usize>>)> {
    let f = g.config().time_downsample();
    let mut latents = Vec::with_capacity(corpus.utterances().len());
    let mut labels = Vec::with_capacity(corpus.utterances().len());
    for u in corpus.utterances() {
        let seq = encode_features(g, &u.features)?;
        let t = u.alignment.len();
        let padded = labels_edge_padded(u.alignment.labels(), 0, t.div_ceil(f) * f);
        labels.push(downsample_labels(&padded, f));
        latents.push(seq);
    }
    Ok((latents, labels))
}

/// Encodes the corpus with the current encoder and stores fresh priors in the state.
/// Returns the zero-based phonemes that received no latent frames.
pub fn estimate_latent_priors(state: &mut TrainState, corpus: &Corpus, cfg: &TrainConfig) -> Result<Vec<usize>> {
    let (latents, labels) = encode_corpus(&state.model.g, corpus)?;
    let refs: Vec<&[usize]> = labels.iter().map(|l| l.as_slice()).collect();
    let priors = estimate_priors(&latents, &refs, corpus.inventory(), cfg.covariance_floor, cfg.covariance_kind)?;
    let missing = priors.missing();
    state.priors = Some(priors);
    Ok(missing)
}

impl FeatureConverter for Generator {
    fn convert(&self, x: &Tensor, codes: &[usize]) -> Result<Tensor> {
        let (y, _) = self.encode(x, Mode::Eval)?;
        Ok(self.decode(&y, codes, Mode::Eval)?.0)
    }

    fn width_multiple(&self) -> usize {
        self.config().time_downsample()
    }
}

/// Converts features with `conv` (pad, convert, trim), maps log-F0 between the
/// speakers' statistics, and copies voicing and aperiodicity unchanged.
pub fn convert_utterance(
    conv: &impl FeatureConverter,
    utt: &AcousticFeatureSeq,
    src: &SpeakerDomain,
    tgt: &SpeakerDomain,
) -> Result<AcousticFeatureSeq> {
    let (s_stats, t_stats) = match (&src.f0_stats, &tgt.f0_stats) {
        (Some(s), Some(t)) => (s, t),
        _ => return Err(Error::InsufficientData(format!("no F0 statistics for {} or {}", src.name, tgt.name))),
    };
    let (q, t) = (utt.q(), utt.frames());
    let (data, width) = pad_features(utt, conv.width_multiple());
    let x = Tensor::from_vec([1, 1, q, width], data)?;
    let out = conv.convert(&x, &[tgt.code])?;
    out.expect_shape([1, 1, q, width], "converted features")?;
    let mut features = vec![0.0; q * t];
    for c in 0..q {
        features[c * t..(c + 1) * t].copy_from_slice(&out.data()[c * width..c * width + t]);
    }
    let log_f0 = convert_f0(utt.log_f0(), utt.voiced(), s_stats, t_stats);
    utt.with_features(features)?.with_log_f0(log_f0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{synthesize_toy_corpus, ToySpec};
    use crate::losses::IdentityConverter;

    fn toy() -> Corpus {
        let spec = ToySpec { n_speakers: 2, n_phonemes: 3, utts_per_speaker: 3, frames_per_utt: 40, q: 6 };
        synthesize_toy_corpus(3, &spec).unwrap().0
    }

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            batch_size: 2,
            crop_width: 16,
            iterations_stage1: 3,
            iterations_stage2: 3,
            net: NetConfig::tiny(6, 2, 3),
            ..TrainConfig::default()
        }
    }

    #[test]
    fn majority_labels() {
        assert_eq!(downsample_labels(&[0, 0, 0, 1], 4), vec![0]);
        assert_eq!(downsample_labels(&[2, 1, 1, 2], 4), vec![2]);
        assert_eq!(downsample_labels(&[3, 1, 1, 0, 4, 4, 4, 4], 4), vec![1, 4]);
        assert_eq!(downsample_labels(&[5, 6, 7], 1), vec![5, 6, 7]);
        assert_eq!(downsample_labels(&[1, 1, 2, 2, 0], 2), vec![1, 2, 0]);
    }

    #[test]
    fn minibatch_is_cropped_and_deterministic() {
        let corpus = toy();
        let mut a = ChaCha8Rng::seed_from_u64(5);
        let mut b = ChaCha8Rng::seed_from_u64(5);
        let x = sample_minibatch(&mut a, &corpus, 3, 16).unwrap();
        let y = sample_minibatch(&mut b, &corpus, 3, 16).unwrap();
        assert_eq!(x.x, y.x);
        assert_eq!(x.x.shape(), [3, 1, 6, 16]);
        assert!(x.labels.iter().all(|l| l.len() == 16));
    }

    #[test]
    fn short_utterances_are_edge_padded() {
        let m = [1.0, 2.0, 3.0, 10.0, 20.0, 30.0];
        assert_eq!(window_edge_padded(&m, 2, 3, 1, 4), vec![2.0, 3.0, 3.0, 3.0, 20.0, 30.0, 30.0, 30.0]);
    }

    #[test]
    fn zero_iterations_leave_initialization() {
        let corpus = toy();
        let cfg = TrainConfig { iterations_stage1: 0, ..small_cfg() };
        let state = train_stage1(&corpus, &cfg, &mut |_, _| {}).unwrap();
        let init = ModelParams::init(&cfg.net_for(&corpus), cfg.seed).unwrap();
        assert_eq!(state.model.g.params, init.g.params);
        assert_eq!(state.model.d.params, init.d.params);
        assert_eq!(state.model.c.params, init.c.params);
    }

    #[test]
    fn training_is_deterministic_and_logs_every_iteration() {
        let corpus = toy();
        let cfg = small_cfg();
        let mut rows = Vec::new();
        let a = train_stage1(&corpus, &cfg, &mut |i, r| rows.push((i, r.i_g))).unwrap();
        let b = train_stage1(&corpus, &cfg, &mut |_, _| {}).unwrap();
        assert_eq!(rows.len(), 3);
        assert_eq!(rows.iter().map(|r| r.0).collect::<Vec<_>>(), vec![1, 2, 3]);
        assert_eq!(a.model.g.params, b.model.g.params);
        assert_eq!(a.model.g.norm, b.model.g.norm);
        assert_eq!(a.opt_d, b.opt_d);
        assert_ne!(a.model.g.params, ModelParams::init(&cfg.net_for(&corpus), cfg.seed).unwrap().g.params);
    }

    #[test]
    fn stage2_needs_priors() {
        let corpus = toy();
        let cfg = small_cfg();
        let mut state = TrainState::new(&corpus, &cfg).unwrap();
        assert!(matches!(run_stage(&mut state, &corpus, &cfg, 2, 1, &mut |_, _| {}), Err(Error::Config(_))));
        let missing = estimate_latent_priors(&mut state, &corpus, &cfg).unwrap();
        assert!(missing.is_empty());
        run_stage(&mut state, &corpus, &cfg, 2, 2, &mut |_, r| assert!(r.parts.asr.is_some())).unwrap();
        assert_eq!((state.stage, state.iteration), (2, 2));
    }

    #[test]
    fn identity_conversion_keeps_everything() {
        let corpus = toy();
        let u = &corpus.utterances()[0].features;
        let d = &corpus.domains()[0];
        let out = convert_utterance(&IdentityConverter, u, d, d).unwrap();
        assert_eq!(&out, u);
    }

    #[test]
    fn conversion_trims_padding() {
        struct PaddingChecker(usize);
        impl FeatureConverter for PaddingChecker {
            fn convert(&self, x: &Tensor, _: &[usize]) -> Result<Tensor> {
                assert_eq!(x.width() % self.0, 0);
                Ok(x.clone())
            }
            fn width_multiple(&self) -> usize {
                self.0
            }
        }
        let corpus = toy();
        let u = &corpus.utterances()[1];
        for t in 37..=40 {
            let seg = crate::dataset::crop_segment(&u.features, 0, t).unwrap();
            let d = &corpus.domains()[u.domain];
            let out = convert_utterance(&PaddingChecker(4), &seg, d, d).unwrap();
            assert_eq!(out, seg);
        }
    }
}
