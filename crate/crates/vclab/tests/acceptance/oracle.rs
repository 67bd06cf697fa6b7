//! Prior estimator against a brute-force pooled-moment oracle.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use vclab_core::dataset::PhonemeInventory;
use vclab_core::phoneme_prior::{estimate_priors, CovarianceKind, LatentSeq};

pub struct Summary {
    pub corpora: usize,
    pub single_frame: usize,
    pub absent: usize,
    pub worst: f64,
    pub failures: Vec<String>,
}

struct Case {
    dim: usize,
    k: usize,
    kind: CovarianceKind,
    latents: Vec<LatentSeq>,
    labels: Vec<Vec<usize>>,
}

const FLOOR: f64 = 1e-3;

/// Phoneme roles per corpus: at least one absent, optionally one with a single
/// frame, the rest with 12-40 frames of well-spread data.
fn random_case(seed: u64) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = rng.random_range(1..=4);
    let k = rng.random_range(3..=7);
    let kind = if rng.random_bool(0.25) { CovarianceKind::Diagonal } else { CovarianceKind::Full };
    let mut roles: Vec<usize> = (0..k).collect();
    roles.shuffle(&mut rng);
    let absent = roles[0];
    let single = if seed % 5 != 4 { Some(roles[1]) } else { None };

    let mut frames: Vec<(usize, Vec<f64>)> = Vec::new();
    for p in 0..k {
        if p == absent {
            continue;
        }
        let count = if Some(p) == single { 1 } else { rng.random_range(12..=40) };
        let centre: Vec<f64> = (0..dim).map(|_| rng.random_range(-50.0..50.0)).collect();
        let scale: Vec<f64> = (0..dim).map(|_| rng.random_range(0.5..3.0)).collect();
        for _ in 0..count {
            let y = (0..dim)
                .map(|l| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    centre[l] + scale[l] * z
                })
                .collect();
            frames.push((p, y));
        }
    }
    frames.shuffle(&mut rng);

    let n_utts = rng.random_range(1..=6).min(frames.len());
    let mut cuts: Vec<usize> = (1..frames.len()).collect();
    cuts.shuffle(&mut rng);
    let mut cuts: Vec<usize> = cuts.into_iter().take(n_utts - 1).collect();
    cuts.push(0);
    cuts.push(frames.len());
    cuts.sort_unstable();

    let mut latents = Vec::new();
    let mut labels = Vec::new();
    for w in cuts.windows(2) {
        let chunk = &frames[w[0]..w[1]];
        let data: Vec<f64> = chunk.iter().flat_map(|(_, y)| y.iter().copied()).collect();
        latents.push(LatentSeq::new(dim, data).unwrap());
        labels.push(chunk.iter().map(|(p, _)| *p).collect());
    }
    Case { dim, k, kind, latents, labels }
}

struct Moments {
    count: usize,
    mean: Vec<f64>,
    cov: Vec<f64>,
}

fn oracle(case: &Case, phoneme: usize) -> Option<Moments> {
    let d = case.dim;
    let mut count = 0;
    let mut sum = vec![0.0; d];
    for u in 0..case.latents.len() {
        for t in 0..case.labels[u].len() {
            if case.labels[u][t] == phoneme {
                count += 1;
                for l in 0..d {
                    sum[l] += case.latents[u].data()[t * d + l];
                }
            }
        }
    }
    if count == 0 {
        return None;
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
    let mut cov = vec![0.0; d * d];
    for u in 0..case.latents.len() {
        for t in 0..case.labels[u].len() {
            if case.labels[u][t] == phoneme {
                let y = &case.latents[u].data()[t * d..(t + 1) * d];
                for i in 0..d {
                    for j in 0..d {
                        cov[i * d + j] += (y[i] - mean[i]) * (y[j] - mean[j]);
                    }
                }
            }
        }
    }
    for v in &mut cov {
        *v /= count as f64;
    }
    if count == 1 {
        cov = vec![0.0; d * d];
        for i in 0..d {
            cov[i * d + i] = FLOOR;
        }
    } else if case.kind == CovarianceKind::Diagonal {
        for i in 0..d {
            for j in 0..d {
                if i != j {
                    cov[i * d + j] = 0.0;
                }
            }
        }
    }
    Some(Moments { count, mean, cov })
}

/// True when `cov - FLOOR * I` is positive definite, so the floor leaves it untouched.
fn clear_of_floor(cov: &[f64], d: usize) -> bool {
    let mut a: Vec<f64> = cov.to_vec();
    for i in 0..d {
        a[i * d + i] -= FLOOR;
    }
    for j in 0..d {
        let mut diag = a[j * d + j];
        for k in 0..j {
            diag -= a[j * d + k] * a[j * d + k];
        }
        if diag <= 0.0 {
            return false;
        }
        let diag = diag.sqrt();
        a[j * d + j] = diag;
        for i in j + 1..d {
            let mut v = a[i * d + j];
            for k in 0..j {
                v -= a[i * d + k] * a[j * d + k];
            }
            a[i * d + j] = v / diag;
        }
    }
    true
}

pub fn run(n_corpora: usize, tol: f64) -> Summary {
    let mut s = Summary { corpora: n_corpora, single_frame: 0, absent: 0, worst: 0.0, failures: Vec::new() };
    for seed in 0..n_corpora as u64 {
        let case = random_case(seed);
        let refs: Vec<&[usize]> = case.labels.iter().map(|l| l.as_slice()).collect();
        let inventory = PhonemeInventory::numbered(case.k).unwrap();
        let priors = match estimate_priors(&case.latents, &refs, &inventory, FLOOR, case.kind) {
            Ok(p) => p,
            Err(e) => {
                s.failures.push(format!("corpus {seed}: {e}"));
                continue;
            }
        };
        for p in 0..case.k {
            match (oracle(&case, p), priors.get(p)) {
                (None, None) => s.absent += 1,
                (Some(m), Some(g)) => {
                    if m.count == 1 {
                        s.single_frame += 1;
                    } else if !clear_of_floor(&m.cov, case.dim) {
                        s.failures.push(format!("corpus {seed} phoneme {p}: test data hits the floor"));
                        continue;
                    }
                    if g.frame_count() != m.count {
                        s.failures.push(format!("corpus {seed} phoneme {p}: {} frames, oracle {}", g.frame_count(), m.count));
                    }
                    let err = g
                        .mean()
                        .iter()
                        .zip(&m.mean)
                        .chain(g.covariance().iter().zip(&m.cov))
                        .map(|(a, b)| (a - b).abs())
                        .fold(0.0, f64::max);
                    s.worst = s.worst.max(err);
                    if err > tol {
                        s.failures.push(format!("corpus {seed} phoneme {p}: max deviation {err:e}"));
                    }
                }
                (m, g) => s.failures.push(format!(
                    "corpus {seed} phoneme {p}: presence differs (oracle {}, estimator {})",
                    m.is_some(),
                    g.is_some()
                )),
            }
        }
    }
    s
}
