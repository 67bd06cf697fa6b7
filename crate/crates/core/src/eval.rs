//! Objective proxy metrics: latent phoneme separability, mel-cepstral
//! distortion and converted-speech domain accuracy.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::dataset::{AcousticFeatureSeq, Corpus};
use crate::error::{Error, Result};
use crate::networks::{Classifier, ModelParams};
use crate::phoneme_prior::{mean_mahalanobis, prior_log_density, LatentSeq, PriorSet};
use crate::pipeline::{convert_utterance, encode_corpus};
use crate::tensor::Tensor;

/// (10 / ln 10) · √2, the dB scale of the distortion formula.
const MCD_SCALE: f64 = 6.141_851_463_713_754;

fn check_pairs(latents: &[LatentSeq], alignments: &[&[usize]]) -> Result<()> {
    if latents.len() != alignments.len() {
        return Err(Error::Shape(format!("{} latent sequences for {} alignments", latents.len(), alignments.len())));
    }
    for (i, (y, a)) in latents.iter().zip(alignments).enumerate() {
        if y.frames() != a.len() {
            return Err(Error::LengthMismatch { utterance: format!("sequence {i}"), expected: a.len(), found: y.frames() });
        }
    }
    Ok(())
}

/// Phoneme with the highest prior density at `y`; ties go to the lowest index.
pub fn nearest_gaussian(y: &[f64], priors: &PriorSet) -> Result<Option<usize>> {
    let mut best: Option<(usize, f64)> = None;
    for (p, prior) in priors.priors().iter().enumerate() {
        let Some(prior) = prior else { continue };
        let v = prior_log_density(y, prior)?;
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((p, v));
        }
    }
    Ok(best.map(|(p, _)| p))
}

/// `counts[true][predicted]` over every evaluated frame.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub counts: Vec<Vec<usize>>,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    pub fn correct(&self) -> usize {
        (0..self.counts.len()).map(|i| self.counts[i][i]).sum()
    }

    pub fn accuracy(&self) -> f64 {
        match self.total() {
            0 => 0.0,
            n => self.correct() as f64 / n as f64,
        }
    }
}

pub fn phoneme_confusion(latents: &[LatentSeq], alignments: &[&[usize]], priors: &PriorSet) -> Result<Confusion> {
    check_pairs(latents, alignments)?;
    let k = priors.inventory().len();
    if priors.priors().iter().all(Option::is_none) {
        return Err(Error::Empty("prior set"));
    }
    let mut counts = vec![vec![0usize; k]; k];
    for (y, a) in latents.iter().zip(alignments) {
        for (frame, &label) in y.iter_frames().zip(a.iter()) {
            if label >= k {
                return Err(Error::Shape(format!("label {} outside inventory of {k}", label + 1)));
            }
            let pred = nearest_gaussian(frame, priors)?.expect("non-empty prior set");
            counts[label][pred] += 1;
        }
    }
    Ok(Confusion { counts })
}

/// Fraction of latent frames whose most likely phoneme Gaussian is their own label.
pub fn nearest_gaussian_accuracy(latents: &[LatentSeq], alignments: &[&[usize]], priors: &PriorSet) -> Result<f64> {
    Ok(phoneme_confusion(latents, alignments, priors)?.accuracy())
}

/// trace(within-class scatter) / trace(between-class scatter); `+∞` when the
/// between-class scatter vanishes.
pub fn scatter_ratio(latents: &[LatentSeq], alignments: &[&[usize]]) -> Result<f64> {
    check_pairs(latents, alignments)?;
    let dim = latents.first().map(|y| y.dim()).ok_or(Error::Empty("latent set"))?;
    let k = alignments.iter().flat_map(|a| a.iter()).max().map_or(0, |m| m + 1);
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (y, a) in latents.iter().zip(alignments) {
        for (frame, &label) in y.iter_frames().zip(a.iter()) {
            counts[label] += 1;
            for (s, v) in sums[label].iter_mut().zip(frame) {
                *s += v;
            }
        }
    }
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err(Error::Empty("latent frames"));
    }
    let means: Vec<Vec<f64>> = sums
        .iter()
        .zip(&counts)
        .map(|(s, &n)| s.iter().map(|v| if n > 0 { v / n as f64 } else { 0.0 }).collect())
        .collect();
    let global: Vec<f64> = (0..dim).map(|d| sums.iter().map(|s| s[d]).sum::<f64>() / total as f64).collect();
    let mut within = 0.0;
    for (y, a) in latents.iter().zip(alignments) {
        for (frame, &label) in y.iter_frames().zip(a.iter()) {
            within += frame.iter().zip(&means[label]).map(|(v, m)| (v - m) * (v - m)).sum::<f64>();
        }
    }
    let between: f64 = means
        .iter()
        .zip(&counts)
        .map(|(m, &n)| n as f64 * m.iter().zip(&global).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
        .sum();
    Ok(if between > 0.0 { within / between } else { f64::INFINITY })
}

/// Frame-averaged mel-cepstral distortion in dB between two row-major Q×T matrices.
/// Coefficients before `first_coeff` are ignored (1 skips the energy term).
pub fn mel_cepstral_distortion(a: &[f64], b: &[f64], q: usize, first_coeff: usize) -> Result<f64> {
    if a.len() != b.len() || q == 0 || a.len() % q != 0 || a.is_empty() {
        return Err(Error::Shape(format!("cannot compare {} and {} values as {q}-row matrices", a.len(), b.len())));
    }
    let t = a.len() / q;
    let mut acc = 0.0;
    for f in 0..t {
        let ss: f64 = (first_coeff..q).map(|c| {
            let d = a[c * t + f] - b[c * t + f];
            d * d
        }).sum();
        acc += MCD_SCALE * libm::sqrt(ss);
    }
    Ok(acc / t as f64)
}

/// Anything that produces per-segment class probabilities for a feature batch.
pub trait DomainClassifier {
    /// `probs[item][segment][class]`.
    fn segment_probs(&self, x: &Tensor) -> Result<Vec<Vec<Vec<f64>>>>;
}

impl DomainClassifier for Classifier {
    fn segment_probs(&self, x: &Tensor) -> Result<Vec<Vec<Vec<f64>>>> {
        Ok(self.forward(x)?.probs)
    }
}

/// Majority of per-segment argmax votes; ties go to the lowest class.
pub fn segment_vote(segments: &[Vec<f64>]) -> Option<usize> {
    let n = segments.first()?.len();
    let mut votes = vec![0usize; n];
    for s in segments {
        let mut best = 0;
        for (c, &p) in s.iter().enumerate() {
            if p > s[best] {
                best = c;
            }
        }
        votes[best] += 1;
    }
    let mut winner = 0;
    for (c, &v) in votes.iter().enumerate() {
        if v > votes[winner] {
            winner = c;
        }
    }
    Some(winner)
}

/// Fraction of utterances whose segment-majority class equals their target.
pub fn domain_accuracy(
    classifier: &impl DomainClassifier,
    utterances: &[&AcousticFeatureSeq],
    targets: &[usize],
) -> Result<f64> {
    if utterances.len() != targets.len() {
        return Err(Error::Shape("one target per utterance required".into()));
    }
    if utterances.is_empty() {
        return Err(Error::Empty("utterance list"));
    }
    let mut hits = 0;
    for (u, &t) in utterances.iter().zip(targets) {
        let x = Tensor::from_vec([1, 1, u.q(), u.frames()], u.features().to_vec())?;
        let probs = classifier.segment_probs(&x)?;
        if segment_vote(&probs[0]) == Some(t) {
            hits += 1;
        }
    }
    Ok(hits as f64 / utterances.len() as f64)
}

/// Summary of a checkpoint over a corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub utterances: usize,
    pub latent_frames: usize,
    pub nearest_gaussian_accuracy: f64,
    /// `None` stands for an infinite ratio (a single phoneme class).
    pub scatter_ratio: Option<f64>,
    /// Mean of (y - μ)ᵀ Σ⁻¹ (y - μ) to each frame's own phoneme.
    pub mean_mahalanobis: f64,
    /// Distortion between each utterance and its same-speaker reconstruction, in dB.
    pub mcd: f64,
    /// Classifier accuracy on utterances converted to the next speaker.
    pub domain_accuracy: f64,
    pub confusion: Confusion,
}

/// Latent metrics under `priors`, reconstruction distortion, and domain accuracy of
/// conversions from each speaker to the next one (cyclically).
pub fn evaluate(model: &ModelParams, priors: &PriorSet, corpus: &Corpus) -> Result<EvalReport> {
    let (latents, labels) = encode_corpus(&model.g, corpus)?;
    let refs: Vec<&[usize]> = labels.iter().map(|l| l.as_slice()).collect();
    let confusion = phoneme_confusion(&latents, &refs, priors)?;
    let ratio = scatter_ratio(&latents, &refs)?;
    let maha = mean_mahalanobis(&latents, &refs, priors).ok_or(Error::Empty("frames with a prior"))?;
    let n_dom = corpus.domains().len();
    let mut mcd = 0.0;
    let mut converted = Vec::with_capacity(corpus.utterances().len());
    let mut targets = Vec::with_capacity(corpus.utterances().len());
    for u in corpus.utterances() {
        let src = &corpus.domains()[u.domain];
        let same = convert_utterance(&model.g, &u.features, src, src)?;
        mcd += mel_cepstral_distortion(same.features(), u.features.features(), u.features.q(), 1)?;
        let tgt = &corpus.domains()[(u.domain + 1) % n_dom];
        converted.push(convert_utterance(&model.g, &u.features, src, tgt)?);
        targets.push(tgt.code);
    }
    let refs_c: Vec<&AcousticFeatureSeq> = converted.iter().collect();
    let domain_accuracy = domain_accuracy(&model.c, &refs_c, &targets)?;
    Ok(EvalReport {
        utterances: corpus.utterances().len(),
        latent_frames: confusion.total(),
        nearest_gaussian_accuracy: confusion.accuracy(),
        scatter_ratio: ratio.is_finite().then_some(ratio),
        mean_mahalanobis: maha,
        mcd: mcd / corpus.utterances().len() as f64,
        domain_accuracy,
        confusion,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::PhonemeInventory;
    use crate::phoneme_prior::{CovarianceKind, GaussianPrior};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::vec;

    fn prior_set(means: &[[f64; 2]]) -> PriorSet {
        let priors = means.iter().map(|m| Some(GaussianPrior::new(m.to_vec(), vec![1.0, 0.0, 0.0, 1.0], 1).unwrap())).collect();
        PriorSet::from_parts(priors, PhonemeInventory::numbered(means.len()).unwrap(), 2, 1e-3, CovarianceKind::Full).unwrap()
    }

    fn seq(frames: &[[f64; 2]]) -> LatentSeq {
        LatentSeq::new(2, frames.concat()).unwrap()
    }

    #[test]
    fn accuracy_at_means_and_with_identical_priors() {
        let ps = prior_set(&[[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]]);
        let y = seq(&[[0.0, 0.0], [10.0, 0.0], [0.0, 10.0], [10.0, 0.0]]);
        assert_eq!(nearest_gaussian_accuracy(&[y.clone()], &[&[0, 1, 2, 1]], &ps).unwrap(), 1.0);

        let same = prior_set(&[[1.0, 1.0], [1.0, 1.0], [1.0, 1.0]]);
        let labels = [0, 1, 2, 1];
        let acc = nearest_gaussian_accuracy(&[y], &[&labels], &same).unwrap();
        assert_eq!(acc, 0.25);
    }

    #[test]
    fn two_gaussians_match_per_frame_oracle() {
        let ps = prior_set(&[[-5.0, 0.0], [5.0, 0.0]]);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut frames = Vec::new();
        let mut labels = Vec::new();
        for label in 0..2 {
            for _ in 0..100 {
                let c = if label == 0 { -5.0 } else { 5.0 };
                let x: f64 = c + rng.sample::<f64, _>(rand_distr::StandardNormal) * 4.0;
                frames.push([x, rng.sample::<f64, _>(rand_distr::StandardNormal)]);
                labels.push(label);
            }
        }
        // Equal isotropic Gaussians: the closer mean wins, x = 0 ties to phoneme 0.
        let oracle = frames.iter().zip(&labels).filter(|(f, &l)| (if f[0] > 0.0 { 1 } else { 0 }) == l).count();
        let acc = nearest_gaussian_accuracy(&[seq(&frames)], &[&labels], &ps).unwrap();
        assert_eq!(acc, oracle as f64 / 200.0);
        let c = phoneme_confusion(&[seq(&frames)], &[&labels], &ps).unwrap();
        assert_eq!(c.total(), 200);
    }

    #[test]
    fn scatter_cases() {
        let y = seq(&[[0.0, 0.0], [0.0, 0.0], [2.0, 0.0]]);
        assert_eq!(scatter_ratio(&[y.clone()], &[&[0, 0, 1]]).unwrap(), 0.0);
        assert_eq!(scatter_ratio(&[y], &[&[0, 0, 0]]).unwrap(), f64::INFINITY);
    }

    #[test]
    fn scatter_matches_double_loop_and_ignores_translation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let frames: Vec<[f64; 2]> = (0..60).map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect();
        let labels: Vec<usize> = (0..60).map(|i| i % 3).collect();
        let mut within = 0.0;
        let mut between = 0.0;
        let gm = [
            frames.iter().map(|f| f[0]).sum::<f64>() / 60.0,
            frames.iter().map(|f| f[1]).sum::<f64>() / 60.0,
        ];
        for c in 0..3 {
            let members: Vec<&[f64; 2]> = frames.iter().zip(&labels).filter(|(_, &l)| l == c).map(|(f, _)| f).collect();
            let n = members.len() as f64;
            let m = [members.iter().map(|f| f[0]).sum::<f64>() / n, members.iter().map(|f| f[1]).sum::<f64>() / n];
            for f in &members {
                within += (f[0] - m[0]).powi(2) + (f[1] - m[1]).powi(2);
            }
            between += n * ((m[0] - gm[0]).powi(2) + (m[1] - gm[1]).powi(2));
        }
        let got = scatter_ratio(&[seq(&frames)], &[&labels]).unwrap();
        assert!((got - within / between).abs() < 1e-10);
        let moved: Vec<[f64; 2]> = frames.iter().map(|f| [f[0] + 3.0, f[1] - 7.0]).collect();
        assert!((scatter_ratio(&[seq(&moved)], &[&labels]).unwrap() - got).abs() < 1e-9);
    }

    #[test]
    fn mcd_cases() {
        let a = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(mel_cepstral_distortion(&a, &a, 2, 1).unwrap(), 0.0);
        // Q = 2, T = 1: coefficient 1 differs by 1.
        let v = mel_cepstral_distortion(&[0.0, 1.0], &[5.0, 0.0], 2, 1).unwrap();
        assert!((v - 10.0 / core::f64::consts::LN_10 * core::f64::consts::SQRT_2).abs() < 1e-12);
        assert!((v - 6.1419).abs() < 1e-4);
        // Permuting frames of both inputs together.
        let x = [1.0, 2.0, 3.0, 0.5, 0.0, 1.0];
        let y = [0.0, 2.5, 1.0, 0.5, 2.0, -1.0];
        let xp = [2.0, 1.0, 3.0, 0.0, 0.5, 1.0];
        let yp = [2.5, 0.0, 1.0, 2.0, 0.5, -1.0];
        let d = mel_cepstral_distortion(&x, &y, 2, 0).unwrap();
        assert!((d - mel_cepstral_distortion(&xp, &yp, 2, 0).unwrap()).abs() < 1e-12);
        assert_eq!(d, mel_cepstral_distortion(&y, &x, 2, 0).unwrap());
    }

    struct Fixed(usize, usize);
    impl DomainClassifier for Fixed {
        fn segment_probs(&self, _: &Tensor) -> Result<Vec<Vec<Vec<f64>>>> {
            let mut p = vec![0.0; self.1];
            p[self.0] = 1.0;
            Ok(vec![vec![p; 3]])
        }
    }

    #[test]
    fn domain_accuracy_with_doubles() {
        let u = AcousticFeatureSeq::new(1, 4, vec![0.0; 4], vec![f64::NAN; 4], vec![false; 4], vec![]).unwrap();
        let utts = [&u, &u];
        assert_eq!(domain_accuracy(&Fixed(1, 3), &utts, &[1, 1]).unwrap(), 1.0);
        assert_eq!(domain_accuracy(&Fixed(2, 3), &utts, &[1, 0]).unwrap(), 0.0);
        assert_eq!(segment_vote(&[vec![0.2, 0.8], vec![0.9, 0.1]]), Some(0));
    }
}
