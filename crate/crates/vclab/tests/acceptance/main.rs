//! Acceptance runner: one PASS/FAIL line per criterion, nonzero exit on any failure.

mod gradients;
mod oracle;
mod reductions;
mod retention;

use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use vclab::config::{config_to_toml, parse_config};
use vclab_core::dataset::{convert_f0, f0_statistics, synthesize_toy_corpus, Corpus, PhonemeInventory, ToySpec, Utterance};
use vclab_core::losses::{adv_loss_d, cls_loss_c, cls_loss_g, IdentityConverter};
use vclab_core::phoneme_prior::{asr_regularization_loss, CovarianceKind, GaussianPrior, LatentSeq, PriorSet, UnseenPolicy};
use vclab_core::pipeline::{convert_utterance, TrainConfig};

const GRADIENT_CONFIGS: usize = 20;
const GRADIENT_BUDGET: Duration = Duration::from_secs(120);
const ORACLE_CORPORA: usize = 50;
const ORACLE_TOL: f64 = 1e-10;
const IDENTITY_TRIALS: usize = 300;
const CLOSED_FORM_TOL: f64 = 1e-12;
const F0_TOL: f64 = 1e-10;
const RETENTION_SEEDS: u64 = 3;
const RETENTION_ITERATIONS: u64 = 500;
const RETENTION_MIN_GAIN: f64 = 0.05;
const GOLDEN_CONFIG: &str = include_str!("default_config.toml");

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn first_few(items: &[String]) -> String {
    let shown: Vec<&str> = items.iter().take(3).map(String::as_str).collect();
    format!("{} failure(s), e.g. {}", items.len(), shown.join("; "))
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let s = gradients::run(GRADIENT_CONFIGS);
    let took = start.elapsed();
    let detail = format!(
        "{} configs, {} checks, {} kink skips, worst rel err {:.2e} at {}, {:.1}s",
        s.configs,
        s.checks,
        s.kink_skips,
        s.worst,
        s.worst_at,
        took.as_secs_f64()
    );
    if !s.failures.is_empty() {
        return outcome(false, format!("{detail}; {}", first_few(&s.failures)));
    }
    outcome(took <= GRADIENT_BUDGET, detail)
}

fn prior_oracle() -> Outcome {
    let s = oracle::run(ORACLE_CORPORA, ORACLE_TOL);
    let detail = format!(
        "{} corpora, {} single-frame and {} absent phonemes, worst deviation {:.1e}",
        s.corpora, s.single_frame, s.absent, s.worst
    );
    if s.failures.is_empty() && s.single_frame > 0 && s.absent > 0 {
        outcome(true, detail)
    } else {
        outcome(false, format!("{detail}; {}", first_few(&s.failures)))
    }
}

fn reductions() -> Outcome {
    let beta = reductions::beta_zero_matches_stage1();
    let (trials, bad) = reductions::identity_converter_zero(IDENTITY_TRIALS);
    let mut notes = Vec::new();
    match &beta {
        Ok(()) => notes.push(format!("beta=0 stage 2 equals stage 1 over {} iterations", reductions::ITERATIONS)),
        Err(e) => notes.push(format!("beta=0: {e}")),
    }
    if bad.is_empty() {
        notes.push(format!("identity cyc = id = 0 on {trials} inputs"));
    } else {
        notes.push(format!("identity: {}", first_few(&bad)));
    }
    outcome(beta.is_ok() && bad.is_empty(), notes.join("; "))
}

fn closed_forms() -> Outcome {
    let half = vec![vec![0.5; 6]; 3];
    let adv = adv_loss_d(&half, &half);
    let uniform = vec![vec![vec![0.25; 4]; 5]; 3];
    let targets = [0, 3, 1];
    let cls_c = cls_loss_c(&uniform, &targets);
    let cls_g = cls_loss_g(&uniform, &targets);
    let mean = vec![0.7, -1.3];
    let prior = GaussianPrior::new(mean.clone(), vec![1.0, 0.0, 0.0, 1.0], 1).unwrap();
    let set = PriorSet::from_parts(vec![Some(prior)], PhonemeInventory::numbered(1).unwrap(), 2, 1e-3, CovarianceKind::Full)
        .unwrap();
    let y = LatentSeq::new(2, mean).unwrap();
    let (asr, frames) = asr_regularization_loss(&[y], &[&[0]], &set, UnseenPolicy::Error).unwrap();

    let checks = [
        ("adv_loss_d(0.5)", adv, 2.0 * 2f64.ln()),
        ("cls_loss_c(uniform 4)", cls_c, 4f64.ln()),
        ("cls_loss_g(uniform 4)", cls_g, 4f64.ln()),
        ("L_ASR at mean", asr, (2.0 * std::f64::consts::PI).ln()),
    ];
    let worst = checks.iter().map(|(_, v, e)| (v - e).abs()).fold(0.0, f64::max);
    let bad: Vec<String> = checks
        .iter()
        .filter(|(_, v, e)| (v - e).abs() > CLOSED_FORM_TOL)
        .map(|(n, v, e)| format!("{n} = {v:.15} expected {e:.15}"))
        .collect();
    let pass = bad.is_empty() && frames == 1;
    let detail = if pass { format!("4 values, worst deviation {worst:.1e}") } else { first_few(&bad) };
    outcome(pass, detail)
}

fn f0_conversion() -> Outcome {
    let spec = ToySpec { n_speakers: 4, n_phonemes: 5, utts_per_speaker: 24, frames_per_utt: 256, q: 12 };
    let (corpus, _) = synthesize_toy_corpus(0, &spec).unwrap();
    let domains = corpus.domains();
    let mut stats_err = 0.0f64;
    let mut trip_err = 0.0f64;
    let mut unvoiced_ok = true;
    for src in domains {
        for tgt in domains {
            if src.code == tgt.code {
                continue;
            }
            let mut converted = Vec::new();
            for (_, u) in corpus.utterances_of(src.code) {
                let out = convert_utterance(&IdentityConverter, &u.features, src, tgt).unwrap();
                let back = convert_f0(out.log_f0(), out.voiced(), tgt.f0_stats.as_ref().unwrap(), src.f0_stats.as_ref().unwrap());
                for ((a, b), &v) in back.iter().zip(u.features.log_f0()).zip(u.features.voiced()) {
                    if v {
                        trip_err = trip_err.max((a - b).abs());
                    } else {
                        unvoiced_ok &= a.to_bits() == b.to_bits();
                    }
                }
                converted.push(Utterance { id: u.id.clone(), features: out, alignment: u.alignment.clone(), domain: tgt.code });
            }
            let as_target = Corpus::new(converted, corpus.inventory().clone(), domains.to_vec()).unwrap();
            let got = f0_statistics(&as_target, tgt.code).unwrap();
            let want = tgt.f0_stats.unwrap();
            stats_err = stats_err.max((got.mean - want.mean).abs()).max((got.std - want.std).abs());
        }
    }
    let pass = stats_err <= F0_TOL && trip_err <= F0_TOL && unvoiced_ok;
    let detail = format!(
        "12 speaker pairs, statistics deviation {stats_err:.1e}, round-trip deviation {trip_err:.1e}, unvoiced frames {}",
        if unvoiced_ok { "untouched" } else { "modified" }
    );
    outcome(pass, detail)
}

fn retention_trend() -> Outcome {
    let start = Instant::now();
    let results: Vec<retention::SeedResult> =
        (0..RETENTION_SEEDS).map(|seed| retention::run_seed(seed, RETENTION_ITERATIONS)).collect();
    for r in &results {
        println!(
            "    seed {}: accuracy {:.4} -> {:.4}, mahalanobis {:.3} -> {:.3}",
            r.seed, r.acc_baseline, r.acc_regularized, r.maha_baseline, r.maha_regularized
        );
    }
    let n = results.len() as f64;
    let acc_base = results.iter().map(|r| r.acc_baseline).sum::<f64>() / n;
    let acc_reg = results.iter().map(|r| r.acc_regularized).sum::<f64>() / n;
    let gain = acc_reg - acc_base;
    let maha_lower = results.iter().all(|r| r.maha_regularized < r.maha_baseline);
    let detail = format!(
        "mean accuracy {acc_base:.4} -> {acc_reg:.4} (gain {:.2} pp, need {:.0}), mahalanobis lower on {}/{} seeds, {:.0}s",
        100.0 * gain,
        100.0 * RETENTION_MIN_GAIN,
        results.iter().filter(|r| r.maha_regularized < r.maha_baseline).count(),
        results.len(),
        start.elapsed().as_secs_f64()
    );
    outcome(gain >= RETENTION_MIN_GAIN && maha_lower, detail)
}

fn golden_config() -> Outcome {
    let d = TrainConfig::default();
    let text = config_to_toml(&d);
    let values_ok = d.weights.lambda_cls == 1.0
        && d.weights.lambda_cyc == 1.0
        && d.weights.lambda_id == 1.0
        && d.weights.beta == 0.01
        && d.batch_size == 8
        && d.learning_rate_g == 0.001
        && d.learning_rate_d == 0.001
        && d.adam_beta1 == 0.5
        && d.iterations_stage1 == 2000
        && d.iterations_stage2 == 2000;
    let text_ok = text == GOLDEN_CONFIG;
    let parses_back = parse_config(GOLDEN_CONFIG, Path::new("default_config.toml")).is_ok_and(|c| c == d);
    let detail = format!(
        "values {}, serialization {} golden file, golden file {} default",
        if values_ok { "match" } else { "differ" },
        if text_ok { "equals" } else { "differs from" },
        if parses_back { "parses to" } else { "does not parse to" }
    );
    outcome(values_ok && text_ok && parses_back, detail)
}

fn determinism() -> Outcome {
    let repeat = reductions::repeat_runs_identical();
    let resume = reductions::resume_matches_unbroken();
    let detail = format!(
        "two runs {}; resume halfway through each stage {}",
        if repeat { "byte-identical" } else { "differ" },
        match &resume {
            Ok(()) => "byte-identical".to_string(),
            Err(e) => e.clone(),
        }
    );
    outcome(repeat && resume.is_ok(), detail)
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("gradient suite", gradient_suite),
        ("prior estimator oracle", prior_oracle),
        ("definitional reductions", reductions),
        ("closed-form losses", closed_forms),
        ("F0 conversion", f0_conversion),
        ("linguistic retention trend", retention_trend),
        ("default hyperparameters", golden_config),
        ("determinism and resume", determinism),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let o = check();
        if !o.pass {
            failed += 1;
        }
        println!("criterion {} {name}: {} ({})", i + 1, if o.pass { "PASS" } else { "FAIL" }, o.detail);
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("failed criteria: {failed} of {}", criteria.len());
        ExitCode::FAILURE
    }
}
