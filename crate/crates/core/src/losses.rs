//! Scalar training objectives and their gradients with respect to network
//! outputs (probabilities or features).
//!
//! Expectations are minibatch means; probabilities are clamped to
//! [`PROB_CLAMP`](crate::layers::PROB_CLAMP) before every log.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::PROB_CLAMP;
use crate::tensor::Tensor;

#[inline]
fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

/// d/dp of -log(clamp(p)).
#[inline]
fn neg_log_grad(p: f64) -> f64 {
    if (PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&p) {
        -1.0 / p
    } else {
        0.0
    }
}

fn count(probs: &[Vec<f64>]) -> usize {
    probs.iter().map(Vec::len).sum()
}

/// Discriminator adversarial loss: mean of -log D(real) plus mean of -log(1 - D(fake)).
pub fn adv_loss_d(real: &[Vec<f64>], fake: &[Vec<f64>]) -> f64 {
    let nr = count(real).max(1) as f64;
    let nf = count(fake).max(1) as f64;
    let r: f64 = real.iter().flatten().map(|&p| -libm::log(clamp_prob(p))).sum();
    let f: f64 = fake.iter().flatten().map(|&p| -libm::log(clamp_prob(1.0 - p))).sum();
    r / nr + f / nf
}

/// Gradients of [`adv_loss_d`] with respect to the real and fake probabilities.
pub fn adv_loss_d_grad(real: &[Vec<f64>], fake: &[Vec<f64>]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let nr = count(real).max(1) as f64;
    let nf = count(fake).max(1) as f64;
    let dr = real.iter().map(|s| s.iter().map(|&p| neg_log_grad(p) / nr).collect()).collect();
    let df = fake
        .iter()
        .map(|s| s.iter().map(|&p| -neg_log_grad(1.0 - p) / nf).collect())
        .collect();
    (dr, df)
}

/// Generator adversarial loss: mean of -log D(G(o, c), c).
pub fn adv_loss_g(fake: &[Vec<f64>]) -> f64 {
    let n = count(fake).max(1) as f64;
    fake.iter().flatten().map(|&p| -libm::log(clamp_prob(p))).sum::<f64>() / n
}

pub fn adv_loss_g_grad(fake: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = count(fake).max(1) as f64;
    fake.iter().map(|s| s.iter().map(|&p| neg_log_grad(p) / n).collect()).collect()
}

/// Mean per-segment cross-entropy against one target class per batch item.
///
/// `probs[b][s][k]` is the probability of class `k` for segment `s` of item `b`.
/// Used for both the classifier loss on real inputs and the generator's
/// classification loss on converted inputs.
pub fn cls_loss(probs: &[Vec<Vec<f64>>], targets: &[usize]) -> f64 {
    let n: usize = probs.iter().map(Vec::len).sum();
    let total: f64 = probs
        .iter()
        .zip(targets)
        .flat_map(|(segs, &t)| segs.iter().map(move |p| -libm::log(clamp_prob(p[t]))))
        .sum();
    total / n.max(1) as f64
}

pub fn cls_loss_grad(probs: &[Vec<Vec<f64>>], targets: &[usize]) -> Vec<Vec<Vec<f64>>> {
    let n = probs.iter().map(Vec::len).sum::<usize>().max(1) as f64;
    probs
        .iter()
        .zip(targets)
        .map(|(segs, &t)| {
            segs.iter()
                .map(|p| {
                    let mut g = vec![0.0; p.len()];
                    g[t] = neg_log_grad(p[t]) / n;
                    g
                })
                .collect()
        })
        .collect()
}

/// Classifier loss on real samples of their own domain.
pub fn cls_loss_c(probs: &[Vec<Vec<f64>>], true_domains: &[usize]) -> f64 {
    cls_loss(probs, true_domains)
}

/// Generator classification loss on converted samples against the target domain.
pub fn cls_loss_g(probs: &[Vec<Vec<f64>>], target_domains: &[usize]) -> f64 {
    cls_loss(probs, target_domains)
}

/// How the elementwise distance in [`rho_norm`] is reduced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Reduction {
    /// (mean |a - b|^rho)^(1/rho); independent of the number of elements.
    #[default]
    Mean,
    /// (sum |a - b|^rho)^(1/rho).
    Sum,
}

/// Distance between two equally shaped arrays and its gradient with respect to `a`.
pub fn rho_norm_with_grad(a: &[f64], b: &[f64], rho: f64, reduction: Reduction) -> (f64, Vec<f64>) {
    debug_assert_eq!(a.len(), b.len());
    let m = match reduction {
        Reduction::Mean => a.len().max(1) as f64,
        Reduction::Sum => 1.0,
    };
    let unit = rho == 1.0;
    let s: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| {
            let d = libm::fabs(x - y);
            if unit { d } else { libm::pow(d, rho) }
        })
        .sum::<f64>()
        / m;
    let value = if unit { s } else { libm::pow(s, 1.0 / rho) };
    let grad = if s == 0.0 {
        vec![0.0; a.len()]
    } else {
        let outer = if unit { 1.0 } else { libm::pow(s, 1.0 / rho - 1.0) };
        a.iter()
            .zip(b)
            .map(|(x, y)| {
                let d = x - y;
                if d == 0.0 {
                    return 0.0;
                }
                let mag = if unit { 1.0 } else { libm::pow(libm::fabs(d), rho - 1.0) };
                outer * mag * d.signum() / m
            })
            .collect()
    };
    (value, grad)
}

/// Mean (or summed) elementwise distance with exponent `rho` followed by the `rho`-th root.
pub fn rho_norm(a: &[f64], b: &[f64], rho: f64, reduction: Reduction) -> f64 {
    rho_norm_with_grad(a, b, rho, reduction).0
}

/// Anything that maps a feature batch and per-item target codes to a feature batch.
pub trait FeatureConverter {
    fn convert(&self, x: &Tensor, codes: &[usize]) -> Result<Tensor>;

    /// Input widths must be a multiple of this; callers pad and trim.
    fn width_multiple(&self) -> usize {
        1
    }
}

/// Test double that returns its input.
pub struct IdentityConverter;

impl FeatureConverter for IdentityConverter {
    fn convert(&self, x: &Tensor, _codes: &[usize]) -> Result<Tensor> {
        Ok(x.clone())
    }
}

/// Test double that returns a fixed batch regardless of input.
pub struct ConstantConverter(pub Tensor);

impl FeatureConverter for ConstantConverter {
    fn convert(&self, x: &Tensor, _codes: &[usize]) -> Result<Tensor> {
        x.expect_shape(self.0.shape(), "constant converter input")?;
        Ok(self.0.clone())
    }
}

/// Cycle-consistency loss: distance between G(G(o, tgt), src) and o.
pub fn cyc_loss(
    g: &impl FeatureConverter,
    o: &Tensor,
    src: &[usize],
    tgt: &[usize],
    rho: f64,
    reduction: Reduction,
) -> Result<f64> {
    let fake = g.convert(o, tgt)?;
    let back = g.convert(&fake, src)?;
    Ok(rho_norm(back.data(), o.data(), rho, reduction))
}

/// Identity-mapping loss: distance between G(o, src) and o.
pub fn id_loss(g: &impl FeatureConverter, o: &Tensor, src: &[usize], rho: f64, reduction: Reduction) -> Result<f64> {
    let same = g.convert(o, src)?;
    Ok(rho_norm(same.data(), o.data(), rho, reduction))
}

/// Objective weights. Defaults are lambda_cls = lambda_cyc = lambda_id = 1,
/// beta = 0.01, rho = 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_cls: f64,
    pub lambda_cyc: f64,
    pub lambda_id: f64,
    pub beta: f64,
    pub rho: f64,
    pub rho_reduction: Reduction,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_cls: 1.0,
            lambda_cyc: 1.0,
            lambda_id: 1.0,
            beta: 0.01,
            rho: 1.0,
            rho_reduction: Reduction::Mean,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let nonneg = [self.lambda_cls, self.lambda_cyc, self.lambda_id, self.beta];
        if nonneg.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        if !(self.rho.is_finite() && self.rho > 0.0) {
            return Err(Error::Config("rho must be positive".into()));
        }
        Ok(())
    }
}

/// Phoneme-prior regularization term for one minibatch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AsrTerm {
    /// Negative log-likelihood summed over all latent frames.
    pub raw: f64,
    /// Latent frames the sum ran over.
    pub frames: usize,
}

impl AsrTerm {
    /// Per-frame value; this is what beta multiplies.
    pub fn normalized(&self) -> f64 {
        self.raw / self.frames.max(1) as f64
    }
}

/// Individual loss values of one iteration.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossParts {
    pub adv_d: f64,
    pub adv_g: f64,
    pub cls_c: f64,
    pub cls_g: f64,
    pub cyc: f64,
    pub id: f64,
    pub asr: Option<AsrTerm>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub stage: u8,
    pub parts: LossParts,
    pub weights: LossWeights,
    pub i_g: f64,
    pub i_d: f64,
    pub i_c: f64,
}

/// Weighted objectives of G, D and C. Stage 2 adds beta times the
/// per-frame regularization term to the generator objective.
pub fn total_objectives(parts: &LossParts, w: &LossWeights, stage: u8) -> Result<LossReport> {
    w.validate()?;
    let mut i_g = parts.adv_g + w.lambda_cls * parts.cls_g + w.lambda_cyc * parts.cyc + w.lambda_id * parts.id;
    match stage {
        1 => {}
        2 => {
            let asr = parts.asr.ok_or_else(|| {
                Error::Config("stage 2 objective requires a phoneme prior set".into())
            })?;
            i_g += w.beta * asr.normalized();
        }
        s => return Err(Error::Config(alloc::format!("unknown training stage {s}"))),
    }
    Ok(LossReport { stage, parts: *parts, weights: *w, i_g, i_d: parts.adv_d, i_c: parts.cls_c })
}

impl LossReport {
    pub fn all_finite(&self) -> bool {
        let p = &self.parts;
        [p.adv_d, p.adv_g, p.cls_c, p.cls_g, p.cyc, p.id, self.i_g, self.i_d, self.i_c]
            .iter()
            .all(|v| v.is_finite())
            && p.asr.is_none_or(|a| a.raw.is_finite())
    }

    /// Name of the first non-finite term.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        let p = &self.parts;
        let named = [
            ("adv_d", p.adv_d),
            ("adv_g", p.adv_g),
            ("cls_c", p.cls_c),
            ("cls_g", p.cls_g),
            ("cyc", p.cyc),
            ("id", p.id),
            ("asr", p.asr.map_or(0.0, |a| a.raw)),
            ("i_g", self.i_g),
        ];
        named.iter().find(|(_, v)| !v.is_finite()).map(|(n, _)| *n)
    }
}
