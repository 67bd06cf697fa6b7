//! Multi-speaker feature corpora with frame-level phoneme labels.
//!
//! Internally phonemes and speaker domains are zero-based indices; files and
//! user-facing messages use one-based codes.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower bound applied to a speaker's log-F0 standard deviation.
pub const F0_STD_FLOOR: f64 = 1e-6;

/// Q×T features (row-major, one row per coefficient) with per-frame pitch.
#[derive(Debug, Clone, PartialEq)]
pub struct AcousticFeatureSeq {
    q: usize,
    t: usize,
    features: Vec<f64>,
    /// Natural-log Hz on voiced frames, NaN elsewhere.
    log_f0: Vec<f64>,
    voiced: Vec<bool>,
    /// Aperiodicity payload; carried verbatim, never interpreted.
    aperiodicity: Vec<u8>,
}

impl AcousticFeatureSeq {
    pub fn new(
        q: usize,
        t: usize,
        features: Vec<f64>,
        log_f0: Vec<f64>,
        voiced: Vec<bool>,
        aperiodicity: Vec<u8>,
    ) -> Result<Self> {
        Self::new_for("<unnamed>", q, t, features, log_f0, voiced, aperiodicity)
    }

    /// Like [`AcousticFeatureSeq::new`], naming utterance `id` in any error.
    pub fn new_for(
        id: &str,
        q: usize,
        t: usize,
        features: Vec<f64>,
        log_f0: Vec<f64>,
        voiced: Vec<bool>,
        aperiodicity: Vec<u8>,
    ) -> Result<Self> {
        let seq = AcousticFeatureSeq { q, t, features, log_f0, voiced, aperiodicity };
        seq.validate(id)?;
        Ok(seq)
    }

    /// Checks the sequence invariants, naming `id` in any error.
    pub fn validate(&self, id: &str) -> Result<()> {
        let utterance = id.to_string();
        if self.q == 0 || self.t == 0 {
            return Err(Error::Shape(format!("utterance {id}: Q and T must be positive")));
        }
        if self.features.len() != self.q * self.t {
            return Err(Error::Shape(format!(
                "utterance {id}: {} feature values for {}x{}",
                self.features.len(),
                self.q,
                self.t
            )));
        }
        if self.log_f0.len() != self.t || self.voiced.len() != self.t {
            return Err(Error::LengthMismatch {
                utterance,
                expected: self.t,
                found: self.log_f0.len().min(self.voiced.len()),
            });
        }
        if let Some(i) = self.features.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { utterance, what: "feature", index: i });
        }
        if let Some(i) = (0..self.t).find(|&i| self.log_f0[i].is_finite() != self.voiced[i]) {
            return Err(Error::NonFinite { utterance, what: "log-F0 (inconsistent with voicing)", index: i });
        }
        Ok(())
    }

    pub fn q(&self) -> usize {
        self.q
    }
    pub fn frames(&self) -> usize {
        self.t
    }
    pub fn features(&self) -> &[f64] {
        &self.features
    }
    pub fn log_f0(&self) -> &[f64] {
        &self.log_f0
    }
    pub fn voiced(&self) -> &[bool] {
        &self.voiced
    }
    pub fn aperiodicity(&self) -> &[u8] {
        &self.aperiodicity
    }

    #[inline]
    pub fn feature(&self, coeff: usize, frame: usize) -> f64 {
        self.features[coeff * self.t + frame]
    }

    /// Copy of this sequence with replaced features (same shape).
    pub fn with_features(&self, features: Vec<f64>) -> Result<Self> {
        let mut out = self.clone();
        out.features = features;
        out.validate("<converted>")?;
        Ok(out)
    }

    pub fn with_log_f0(&self, log_f0: Vec<f64>) -> Result<Self> {
        let mut out = self.clone();
        out.log_f0 = log_f0;
        out.validate("<converted>")?;
        Ok(out)
    }
}

/// Frames `start..start + width` of every per-frame field.
///
/// The aperiodicity payload is sliced frame-proportionally when its length is
/// a multiple of T and dropped otherwise.
pub fn crop_segment(utt: &AcousticFeatureSeq, start: usize, width: usize) -> Result<AcousticFeatureSeq> {
    if width == 0 || start.checked_add(width).is_none_or(|end| end > utt.t) {
        return Err(Error::OutOfBounds { start, width, len: utt.t });
    }
    let mut features = Vec::with_capacity(utt.q * width);
    for row in utt.features.chunks_exact(utt.t) {
        features.extend_from_slice(&row[start..start + width]);
    }
    let ap = &utt.aperiodicity;
    let aperiodicity = if !ap.is_empty() && ap.len() % utt.t == 0 {
        let per = ap.len() / utt.t;
        ap[start * per..(start + width) * per].to_vec()
    } else {
        Vec::new()
    };
    Ok(AcousticFeatureSeq {
        q: utt.q,
        t: width,
        features,
        log_f0: utt.log_f0[start..start + width].to_vec(),
        voiced: utt.voiced[start..start + width].to_vec(),
        aperiodicity,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhonemeInventory {
    names: Vec<String>,
}

impl PhonemeInventory {
    pub fn new(names: Vec<String>) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::Config("phoneme inventory is empty".into()));
        }
        for (i, n) in names.iter().enumerate() {
            if names[..i].contains(n) {
                return Err(Error::Config(format!("duplicate phoneme symbol {n:?}")));
            }
        }
        Ok(PhonemeInventory { names })
    }

    /// Inventory with symbols `p1..pK`.
    pub fn numbered(k: usize) -> Result<Self> {
        PhonemeInventory::new((1..=k).map(|i| format!("p{i}")).collect())
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }
    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
    pub fn names(&self) -> &[String] {
        &self.names
    }
}

/// Zero-based phoneme index per frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PhonemeAlignment {
    labels: Vec<usize>,
}

impl PhonemeAlignment {
    pub fn new(labels: Vec<usize>) -> Self {
        PhonemeAlignment { labels }
    }
    pub fn labels(&self) -> &[usize] {
        &self.labels
    }
    pub fn len(&self) -> usize {
        self.labels.len()
    }
    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
    pub fn crop(&self, start: usize, width: usize) -> Result<Self> {
        if width == 0 || start + width > self.labels.len() {
            return Err(Error::OutOfBounds { start, width, len: self.labels.len() });
        }
        Ok(PhonemeAlignment { labels: self.labels[start..start + width].to_vec() })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct F0Stats {
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerDomain {
    /// Zero-based domain index.
    pub code: usize,
    pub name: String,
    /// Log-F0 statistics over the domain's voiced training frames.
    pub f0_stats: Option<F0Stats>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub features: AcousticFeatureSeq,
    pub alignment: PhonemeAlignment,
    pub domain: usize,
}

/// A validated, immutable collection of labelled utterances.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    utterances: Vec<Utterance>,
    inventory: PhonemeInventory,
    domains: Vec<SpeakerDomain>,
}

impl Corpus {
    /// Validates every invariant and fills in per-domain F0 statistics where
    /// a domain has at least two voiced frames.
    pub fn new(utterances: Vec<Utterance>, inventory: PhonemeInventory, mut domains: Vec<SpeakerDomain>) -> Result<Self> {
        if utterances.is_empty() {
            return Err(Error::Empty("corpus has no utterances"));
        }
        if domains.is_empty() {
            return Err(Error::Empty("corpus has no speakers"));
        }
        for (i, d) in domains.iter().enumerate() {
            if d.code != i {
                return Err(Error::Config(format!(
                    "speaker codes must be contiguous 1..={}; {} has code {}",
                    domains.len(),
                    d.name,
                    d.code + 1
                )));
            }
            if domains[..i].iter().any(|o| o.name == d.name) {
                return Err(Error::Config(format!("duplicate speaker name {:?}", d.name)));
            }
        }
        let q = utterances[0].features.q();
        for u in &utterances {
            u.features.validate(&u.id)?;
            if u.features.q() != q {
                return Err(Error::Shape(format!(
                    "utterance {}: Q = {} differs from corpus Q = {q}",
                    u.id,
                    u.features.q()
                )));
            }
            if u.alignment.len() != u.features.frames() {
                return Err(Error::LengthMismatch {
                    utterance: u.id.clone(),
                    expected: u.features.frames(),
                    found: u.alignment.len(),
                });
            }
            if let Some((t, &p)) = u.alignment.labels().iter().enumerate().find(|(_, &p)| p >= inventory.len()) {
                return Err(Error::LabelOutOfRange { utterance: u.id.clone(), frame: t, label: p + 1, k: inventory.len() });
            }
            if u.domain >= domains.len() {
                return Err(Error::UnknownDomain { utterance: u.id.clone(), code: u.domain + 1 });
            }
        }
        let mut corpus = Corpus { utterances, inventory, domains: Vec::new() };
        for d in &mut domains {
            d.f0_stats = f0_statistics(&corpus, d.code).ok();
        }
        corpus.domains = domains;
        Ok(corpus)
    }

    pub fn utterances(&self) -> &[Utterance] {
        &self.utterances
    }
    pub fn inventory(&self) -> &PhonemeInventory {
        &self.inventory
    }
    pub fn domains(&self) -> &[SpeakerDomain] {
        &self.domains
    }
    pub fn q(&self) -> usize {
        self.utterances[0].features.q()
    }
    pub fn domain_by_name(&self, name: &str) -> Option<&SpeakerDomain> {
        self.domains.iter().find(|d| d.name == name)
    }
    pub fn utterances_of(&self, domain: usize) -> impl Iterator<Item = (usize, &Utterance)> {
        self.utterances.iter().enumerate().filter(move |(_, u)| u.domain == domain)
    }
    pub fn total_frames(&self) -> usize {
        self.utterances.iter().map(|u| u.features.frames()).sum()
    }
    /// Frame count per zero-based phoneme.
    pub fn phoneme_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.inventory.len()];
        for u in &self.utterances {
            for &p in u.alignment.labels() {
                h[p] += 1;
            }
        }
        h
    }
}

/// Mean and population standard deviation of log-F0 over the voiced frames
/// of `domain`, with the standard deviation floored at [`F0_STD_FLOOR`].
pub fn f0_statistics(corpus: &Corpus, domain: usize) -> Result<F0Stats> {
    // Welford accumulation.
    let mut n = 0usize;
    let mut mean = 0.0;
    let mut m2 = 0.0;
    for u in corpus.utterances.iter().filter(|u| u.domain == domain) {
        for (&v, &voiced) in u.features.log_f0.iter().zip(&u.features.voiced) {
            if !voiced {
                continue;
            }
            n += 1;
            let delta = v - mean;
            mean += delta / n as f64;
            m2 += delta * (v - mean);
        }
    }
    if n < 2 {
        return Err(Error::InsufficientData(format!(
            "speaker domain {} has {n} voiced frames, need at least 2",
            domain + 1
        )));
    }
    let std = libm::sqrt(m2 / n as f64).max(F0_STD_FLOOR);
    Ok(F0Stats { mean, std })
}

/// Log-Gaussian normalization of voiced frames from `src` to `tgt` statistics.
pub fn convert_f0(log_f0: &[f64], voiced: &[bool], src: &F0Stats, tgt: &F0Stats) -> Vec<f64> {
    let ratio = tgt.std / src.std;
    log_f0
        .iter()
        .zip(voiced)
        .map(|(&v, &on)| if on { tgt.mean + ratio * (v - src.mean) } else { v })
        .collect()
}

/// Shape of a synthetic corpus.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToySpec {
    pub n_speakers: usize,
    pub n_phonemes: usize,
    pub utts_per_speaker: usize,
    pub frames_per_utt: usize,
    pub q: usize,
}

/// Generating truth behind a synthetic corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyTruth {
    /// K templates of Q values.
    pub templates: Vec<Vec<f64>>,
    pub speaker_scale: Vec<f64>,
    /// N offsets of Q values.
    pub speaker_offset: Vec<Vec<f64>>,
    pub noise_std: f64,
}

impl ToyTruth {
    /// Noise-free feature vector for `phoneme` spoken by `speaker`.
    pub fn clean_frame(&self, speaker: usize, phoneme: usize) -> Vec<f64> {
        self.templates[phoneme]
            .iter()
            .zip(&self.speaker_offset[speaker])
            .map(|(t, o)| self.speaker_scale[speaker] * t + o)
            .collect()
    }
}

const TOY_TEMPLATE_STD: f64 = 1.0;
const TOY_OFFSET_STD: f64 = 0.6;
const TOY_NOISE_STD: f64 = 0.15;
const TOY_SEGMENT_FRAMES: (usize, usize) = (6, 20);

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn toy_truth(seed: u64, spec: &ToySpec) -> ToyTruth {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0);
    let templates = (0..spec.n_phonemes)
        .map(|_| (0..spec.q).map(|_| TOY_TEMPLATE_STD * normal(&mut rng)).collect())
        .collect();
    let speaker_scale = (0..spec.n_speakers).map(|_| rng.random_range(0.8..1.2)).collect();
    let speaker_offset = (0..spec.n_speakers)
        .map(|_| (0..spec.q).map(|_| TOY_OFFSET_STD * normal(&mut rng)).collect())
        .collect();
    ToyTruth { templates, speaker_scale, speaker_offset, noise_std: TOY_NOISE_STD }
}

/// Pitch register of a synthetic speaker: (mean log-F0, spread).
fn toy_pitch(seed: u64, speaker: usize) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_f0f0);
    rng.set_stream(1 + speaker as u64);
    (libm::log(rng.random_range(90.0..260.0)), rng.random_range(0.05..0.2))
}

fn toy_voiced(phoneme: usize) -> bool {
    phoneme % 4 != 3
}

fn synthesize(seed: u64, spec: &ToySpec, stream: u64, prefix: &str) -> Result<(Corpus, ToyTruth)> {
    if spec.n_speakers == 0 || spec.n_phonemes == 0 || spec.utts_per_speaker == 0 || spec.frames_per_utt == 0 || spec.q == 0 {
        return Err(Error::Config("synthetic corpus counts must all be at least 1".into()));
    }
    let truth = toy_truth(seed, spec);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let t = spec.frames_per_utt;
    let mut utterances = Vec::with_capacity(spec.n_speakers * spec.utts_per_speaker);
    for s in 0..spec.n_speakers {
        let (f0_mean, f0_spread) = toy_pitch(seed, s);
        for i in 0..spec.utts_per_speaker {
            let mut labels = Vec::with_capacity(t);
            while labels.len() < t {
                let p = rng.random_range(0..spec.n_phonemes);
                let len = rng.random_range(TOY_SEGMENT_FRAMES.0..=TOY_SEGMENT_FRAMES.1);
                labels.extend(core::iter::repeat_n(p, len.min(t - labels.len())));
            }
            let mut features = vec![0.0; spec.q * t];
            for (frame, &p) in labels.iter().enumerate() {
                let clean = truth.clean_frame(s, p);
                for (c, v) in clean.iter().enumerate() {
                    let x = v + truth.noise_std * normal(&mut rng);
                    features[c * t + frame] = x as f32 as f64;
                }
            }
            let mut log_f0 = vec![f64::NAN; t];
            let mut voiced = vec![false; t];
            let mut contour = 0.0;
            for (frame, &p) in labels.iter().enumerate() {
                contour = 0.9 * contour + 0.3 * normal(&mut rng);
                if toy_voiced(p) {
                    voiced[frame] = true;
                    log_f0[frame] = (f0_mean + f0_spread * contour) as f32 as f64;
                }
            }
            let aperiodicity = (0..t).map(|_| rng.random::<u8>()).collect();
            let features = AcousticFeatureSeq { q: spec.q, t, features, log_f0, voiced, aperiodicity };
            utterances.push(Utterance {
                id: format!("{prefix}spk{}_{:03}", s + 1, i + 1),
                features,
                alignment: PhonemeAlignment::new(labels),
                domain: s,
            });
        }
    }
    let domains = (0..spec.n_speakers)
        .map(|s| SpeakerDomain { code: s, name: format!("spk{}", s + 1), f0_stats: None })
        .collect();
    let corpus = Corpus::new(utterances, PhonemeInventory::numbered(spec.n_phonemes)?, domains)?;
    Ok((corpus, truth))
}

/// Deterministic synthetic corpus: each frame is a phoneme template, scaled
/// and shifted per speaker, plus Gaussian noise. Phonemes come in runs of
/// 6-20 frames. Returns the generating truth alongside the corpus.
pub fn synthesize_toy_corpus(seed: u64, spec: &ToySpec) -> Result<(Corpus, ToyTruth)> {
    synthesize(seed, spec, 1, "")
}

/// Utterances drawn from the same templates and speakers as
/// [`synthesize_toy_corpus`] with the same seed, but from an independent stream.
pub fn synthesize_heldout(seed: u64, spec: &ToySpec) -> Result<(Corpus, ToyTruth)> {
    synthesize(seed, spec, 2, "heldout_")
}
