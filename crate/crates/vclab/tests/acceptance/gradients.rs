//! Finite-difference check of every generator, discriminator and classifier
//! objective against the hand-written backward passes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use vclab_core::dataset::PhonemeInventory;
use vclab_core::layers::Mode;
use vclab_core::losses::Reduction;
use vclab_core::networks::{ModelParams, NetConfig, OutputHead};
use vclab_core::params::{Grads, ParamSet};
use vclab_core::phoneme_prior::{CovarianceKind, GaussianPrior, PriorSet, UnseenPolicy};
use vclab_core::pipeline::{
    classifier_objective, discriminator_objective, generator_objective, Backward, GeneratorCoefficients, Minibatch,
    PriorInput,
};
use vclab_core::tensor::Tensor;

pub const STEP: f64 = 1e-3;
pub const REL_TOL: f64 = 1e-4;
/// Sampled-gradient norms below this are compared absolutely (conv biases
/// feeding batch norm have an exactly zero gradient).
pub const ABS_FLOOR: f64 = 1e-8;
const COORDS_PER_TENSOR: usize = 3;
const Q: usize = 6;
const T: usize = 16;
const N: usize = 2;
const K: usize = 3;
const L: usize = 3;
const B: usize = 4;

pub struct Summary {
    pub configs: usize,
    pub checks: usize,
    pub kink_skips: usize,
    pub worst: f64,
    pub worst_at: String,
    pub failures: Vec<String>,
}

struct Case {
    model: ModelParams,
    mb: Minibatch,
    priors: PriorSet,
    latent_labels: Vec<Vec<usize>>,
    rho: f64,
    reduction: Reduction,
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn random_prior(rng: &mut ChaCha8Rng) -> GaussianPrior {
    let a: Vec<f64> = (0..L * L).map(|_| normal(rng) * 0.5).collect();
    let mut cov = vec![0.0; L * L];
    for i in 0..L {
        for j in 0..L {
            cov[i * L + j] = (0..L).map(|k| a[i * L + k] * a[j * L + k]).sum::<f64>() + if i == j { 0.3 } else { 0.0 };
        }
    }
    let mean = (0..L).map(|_| normal(rng) * 0.3).collect();
    GaussianPrior::new(mean, cov, 10).unwrap()
}

fn make_case(seed: u64) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
    let mut cfg = NetConfig::tiny(Q, N, L);
    if seed % 2 == 1 {
        cfg.head = OutputHead::Gated;
    }
    let model = ModelParams::init(&cfg, seed).unwrap();
    let x: Vec<f64> = (0..B * Q * T).map(|_| normal(&mut rng)).collect();
    let mb = Minibatch {
        x: Tensor::from_vec([B, 1, Q, T], x).unwrap(),
        src: (0..B).map(|_| rng.random_range(0..N)).collect(),
        tgt: (0..B).map(|_| rng.random_range(0..N)).collect(),
        labels: vec![vec![0; T]; B],
    };
    let w = T / cfg.time_downsample();
    let latent_labels = (0..B).map(|_| (0..w).map(|_| rng.random_range(0..K)).collect()).collect();
    let priors = PriorSet::from_parts(
        (0..K).map(|_| Some(random_prior(&mut rng))).collect(),
        PhonemeInventory::numbered(K).unwrap(),
        L,
        1e-3,
        CovarianceKind::Full,
    )
    .unwrap();
    let (rho, reduction) = match seed % 4 {
        0 => (1.0, Reduction::Mean),
        1 => (1.0, Reduction::Sum),
        2 => (2.0, Reduction::Mean),
        _ => (2.0, Reduction::Sum),
    };
    Case { model, mb, priors, latent_labels, rho, reduction }
}

/// Signs of the two |a - b| arguments inside the cycle and identity terms.
fn residual_signs(model: &ModelParams, mb: &Minibatch) -> Vec<bool> {
    let g = &model.g;
    let (y, _) = g.encode(&mb.x, Mode::Train).unwrap();
    let (fake, _) = g.decode(&y, &mb.tgt, Mode::Train).unwrap();
    let (y2, _) = g.encode(&fake, Mode::Train).unwrap();
    let (rec, _) = g.decode(&y2, &mb.src, Mode::Train).unwrap();
    let (same, _) = g.decode(&y, &mb.src, Mode::Train).unwrap();
    rec.data()
        .iter()
        .chain(same.data())
        .zip(mb.x.data().iter().chain(mb.x.data()))
        .map(|(a, b)| a > b)
        .collect()
}

fn rel_error(fd: &[f64], an: &[f64]) -> f64 {
    let diff: f64 = fd.iter().zip(an).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let scale = fd.iter().map(|v| v * v).sum::<f64>().sqrt().max(an.iter().map(|v| v * v).sum::<f64>().sqrt());
    if scale < ABS_FLOOR && diff < ABS_FLOOR {
        0.0
    } else {
        diff / scale
    }
}

#[derive(Clone, Copy)]
enum Net {
    G,
    D,
    C,
}

fn params_mut(model: &mut ModelParams, net: Net) -> &mut ParamSet {
    match net {
        Net::G => &mut model.g.params,
        Net::D => &mut model.d.params,
        Net::C => &mut model.c.params,
    }
}

/// Compares sampled coordinates of every tensor in `net` with central differences of `f`.
#[allow(clippy::too_many_arguments)]
fn check_params(
    case: &mut Case,
    net: Net,
    label: &str,
    analytic: &Grads,
    kink_sensitive: bool,
    rng: &mut ChaCha8Rng,
    f: &dyn Fn(&ModelParams, &Minibatch) -> f64,
    s: &mut Summary,
) {
    let base_signs = if kink_sensitive { Some(residual_signs(&case.model, &case.mb)) } else { None };
    let n_tensors = params_mut(&mut case.model, net).len();
    for ti in 0..n_tensors {
        let (name, len) = {
            let t = &params_mut(&mut case.model, net).tensors()[ti];
            (t.name.clone(), t.values.len())
        };
        let mut fd = Vec::new();
        let mut an = Vec::new();
        let mut attempts = 0;
        while fd.len() < COORDS_PER_TENSOR.min(len) && attempts < 20 {
            attempts += 1;
            let i = rng.random_range(0..len);
            let orig = params_mut(&mut case.model, net).tensors()[ti].values[i];
            params_mut(&mut case.model, net).tensors_mut()[ti].values[i] = orig + STEP;
            let plus = f(&case.model, &case.mb);
            let plus_signs = base_signs.as_ref().map(|_| residual_signs(&case.model, &case.mb));
            params_mut(&mut case.model, net).tensors_mut()[ti].values[i] = orig - STEP;
            let minus = f(&case.model, &case.mb);
            let minus_signs = base_signs.as_ref().map(|_| residual_signs(&case.model, &case.mb));
            params_mut(&mut case.model, net).tensors_mut()[ti].values[i] = orig;
            if let Some(b) = &base_signs {
                if plus_signs.as_ref() != Some(b) || minus_signs.as_ref() != Some(b) {
                    s.kink_skips += 1;
                    continue;
                }
            }
            fd.push((plus - minus) / (2.0 * STEP));
            an.push(analytic.tensors[ti][i]);
        }
        let e = rel_error(&fd, &an);
        s.checks += 1;
        if e > s.worst {
            s.worst = e;
            s.worst_at = format!("{label} {name}");
        }
        if e > REL_TOL {
            s.failures.push(format!("{label} {name} (rho {}): relative error {e:.3e}", case.rho));
        }
    }
}

fn check_input(
    case: &mut Case,
    label: &str,
    analytic: &Tensor,
    kink_sensitive: bool,
    rng: &mut ChaCha8Rng,
    f: &dyn Fn(&ModelParams, &Minibatch) -> f64,
    s: &mut Summary,
) {
    let base = if kink_sensitive { Some(residual_signs(&case.model, &case.mb)) } else { None };
    let mut fd = Vec::new();
    let mut an = Vec::new();
    let mut attempts = 0;
    while fd.len() < 8 && attempts < 40 {
        attempts += 1;
        let i = rng.random_range(0..case.mb.x.data().len());
        let orig = case.mb.x.data()[i];
        case.mb.x.data_mut()[i] = orig + STEP;
        let plus = f(&case.model, &case.mb);
        let ps = base.as_ref().map(|_| residual_signs(&case.model, &case.mb));
        case.mb.x.data_mut()[i] = orig - STEP;
        let minus = f(&case.model, &case.mb);
        let ms = base.as_ref().map(|_| residual_signs(&case.model, &case.mb));
        case.mb.x.data_mut()[i] = orig;
        if ps != base || ms != base {
            s.kink_skips += 1;
            continue;
        }
        fd.push((plus - minus) / (2.0 * STEP));
        an.push(analytic.data()[i]);
    }
    let e = rel_error(&fd, &an);
    s.checks += 1;
    if e > s.worst {
        s.worst = e;
        s.worst_at = format!("{label} input");
    }
    if e > REL_TOL {
        s.failures.push(format!("{label} input (rho {}): relative error {e:.3e}", case.rho));
    }
}

pub fn run(n_configs: usize) -> Summary {
    let mut s = Summary { configs: 0, checks: 0, kink_skips: 0, worst: 0.0, worst_at: String::new(), failures: Vec::new() };
    for seed in 0..n_configs as u64 {
        let mut case = make_case(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(77 + seed);
        let (rho, reduction) = (case.rho, case.reduction);
        let zero = GeneratorCoefficients { adv: 0.0, cls: 0.0, cyc: 0.0, id: 0.0, asr: 0.0, rho, reduction };
        let terms: [(&str, GeneratorCoefficients, bool); 6] = [
            ("adv_g", GeneratorCoefficients { adv: 1.0, ..zero }, false),
            ("cls_g", GeneratorCoefficients { cls: 1.0, ..zero }, false),
            ("cyc", GeneratorCoefficients { cyc: 1.0, ..zero }, true),
            ("id", GeneratorCoefficients { id: 1.0, ..zero }, true),
            ("asr", GeneratorCoefficients { asr: 1.0, ..zero }, false),
            (
                "total_g",
                GeneratorCoefficients { adv: 1.0, cls: 1.0, cyc: 1.0, id: 1.0, asr: 0.5, rho, reduction },
                true,
            ),
        ];
        for (label, k, kink) in terms {
            let priors = case.priors.clone();
            let labels = case.latent_labels.clone();
            let input = PriorInput { priors: &priors, labels: &labels, policy: UnseenPolicy::Error };
            let pass = generator_objective(&case.model, &case.mb, &k, Some(input), Backward::ParamsAndInput).unwrap();
            let f = |m: &ModelParams, mb: &Minibatch| generator_objective(m, mb, &k, Some(input), Backward::None).unwrap().total;
            let kink = kink && rho == 1.0;
            check_params(&mut case, Net::G, label, &pass.grads, kink, &mut rng, &f, &mut s);
            check_input(&mut case, label, pass.dx.as_ref().unwrap(), kink, &mut rng, &f, &mut s);
        }
        let (_, gd) = discriminator_objective(&case.model, &case.mb).unwrap();
        let f = |m: &ModelParams, mb: &Minibatch| discriminator_objective(m, mb).unwrap().0;
        check_params(&mut case, Net::D, "adv_d", &gd, false, &mut rng, &f, &mut s);
        let (_, gc) = classifier_objective(&case.model, &case.mb).unwrap();
        let f = |m: &ModelParams, mb: &Minibatch| classifier_objective(m, mb).unwrap().0;
        check_params(&mut case, Net::C, "cls_c", &gc, false, &mut rng, &f, &mut s);
        s.configs += 1;
    }
    s
}
