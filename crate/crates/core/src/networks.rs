//! Encoder-decoder generator, patch discriminator and domain classifier.
//!
//! Every network owns its [`ParamSet`] so optimizer state and checkpoint
//! sections stay per-network. Forward passes never mutate the network; in
//! train mode they report batch statistics in their cache and the caller
//! decides whether to fold them into the running averages.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{
    glu_backward, glu_forward, segment_softmax, sigmoid_probs, BatchNorm2d, BatchNormCache, Conv2d,
    ConvSpec, ConvTranspose2d, Mode, RunningStats,
};
use crate::params::{Grads, InitScheme, ParamId, ParamSet};
use crate::tensor::Tensor;

/// Output head of the generator's last layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OutputHead {
    /// Plain linear convolution to one channel.
    Linear,
    /// Linear convolution multiplied by a sigmoid gate (product pooling).
    Gated,
}

/// Architecture of all three networks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetConfig {
    /// Feature coefficients per frame (input height).
    pub q: usize,
    pub n_domains: usize,
    pub latent_dim: usize,
    /// Output channels (after GLU) of each encoder block.
    pub enc_channels: Vec<usize>,
    /// (height, width) kernel of each encoder block.
    pub enc_kernels: Vec<(usize, usize)>,
    /// (height, width) stride of each encoder block; the first must be (1, 1).
    pub enc_strides: Vec<(usize, usize)>,
    /// Kernel width of the full-height latent projection.
    pub latent_kernel_width: usize,
    pub disc_channels: Vec<usize>,
    pub cls_channels: Vec<usize>,
    pub head: OutputHead,
    pub bn_momentum: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            q: 36,
            n_domains: 4,
            latent_dim: 8,
            enc_channels: vec![16, 32, 32],
            enc_kernels: vec![(3, 9), (3, 8), (3, 8)],
            enc_strides: vec![(1, 1), (2, 2), (2, 2)],
            latent_kernel_width: 5,
            disc_channels: vec![16, 32, 32],
            cls_channels: vec![8, 16, 16],
            head: OutputHead::Linear,
            bn_momentum: 0.9,
        }
    }
}

/// Padding that keeps `len / stride` outputs for the kernels used here.
fn same_padding(k: usize, s: usize) -> usize {
    (k + 1).saturating_sub(s) / 2
}

impl NetConfig {
    /// A compact configuration for fast experiments and gradient checks.
    pub fn tiny(q: usize, n_domains: usize, latent_dim: usize) -> Self {
        NetConfig {
            q,
            n_domains,
            latent_dim,
            enc_channels: vec![4, 8, 8],
            disc_channels: vec![4, 8, 8],
            cls_channels: vec![4, 8, 8],
            ..NetConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.q == 0 || self.n_domains == 0 || self.latent_dim == 0 {
            return bad("q, n_domains and latent_dim must be positive".into());
        }
        let n = self.enc_channels.len();
        if n == 0 || self.enc_kernels.len() != n || self.enc_strides.len() != n {
            return bad("encoder channels, kernels and strides must have equal non-zero length".into());
        }
        if self.enc_strides[0] != (1, 1) {
            return bad("the first encoder block must have stride (1, 1)".into());
        }
        if self.enc_channels.iter().chain(&self.disc_channels).chain(&self.cls_channels).any(|&c| c == 0) {
            return bad("channel counts must be positive".into());
        }
        if self.disc_channels.is_empty() || self.cls_channels.is_empty() {
            return bad("discriminator and classifier need at least one block".into());
        }
        if self.latent_kernel_width % 2 == 0 {
            return bad("latent kernel width must be odd".into());
        }
        if !(0.0..1.0).contains(&self.bn_momentum) {
            return bad("bn_momentum must be in [0, 1)".into());
        }
        self.encoder_heights()?;
        Ok(())
    }

    /// Heights at the input of each encoder block plus the final block output.
    pub fn encoder_heights(&self) -> Result<Vec<usize>> {
        let mut hs = vec![self.q];
        for (&(kh, _), &(sh, _)) in self.enc_kernels.iter().zip(&self.enc_strides) {
            let h = *hs.last().unwrap();
            let out = crate::layers::conv_out_len(h, kh, sh, same_padding(kh, sh))
                .filter(|&o| o > 0)
                .ok_or_else(|| Error::Config(format!("feature height {h} too small for encoder")))?;
            hs.push(out);
        }
        Ok(hs)
    }

    /// Frames of input per latent frame.
    pub fn time_downsample(&self) -> usize {
        self.enc_strides.iter().map(|s| s.1).product()
    }

    /// Whether a sequence of `t` frames can pass through the generator unpadded.
    pub fn admissible_width(&self, t: usize) -> bool {
        let f = self.time_downsample();
        t >= f && t % f == 0
    }

    /// Segments produced by the discriminator/classifier for width `t`.
    pub fn segments(&self, t: usize, n_blocks: usize) -> Option<usize> {
        let mut w = t;
        for _ in 0..n_blocks {
            w = crate::layers::conv_out_len(w, 8, 2, same_padding(8, 2))?;
        }
        crate::layers::conv_out_len(w, 4, 2, 1).filter(|&s| s > 0)
    }
}

#[derive(Debug, Clone)]
enum ConvKind {
    Forward(Conv2d),
    Transposed(ConvTranspose2d),
}

/// conv -> (batch norm) -> GLU, with an optional one-hot code concatenated at the input.
#[derive(Debug, Clone)]
struct GluBlock {
    conv: ConvKind,
    bn: Option<(BatchNorm2d, usize)>,
    conditioned: bool,
}

#[derive(Debug, Clone)]
struct GluBlockCache {
    input: Tensor,
    bn: Option<BatchNormCache>,
    pre_glu: Tensor,
}

impl GluBlock {
    fn forward(
        &self,
        ps: &ParamSet,
        norm: &[RunningStats],
        x: &Tensor,
        codes: Option<(&[usize], usize)>,
        mode: Mode,
    ) -> Result<(Tensor, GluBlockCache)> {
        let input = match (self.conditioned, codes) {
            (true, Some((c, n))) => x.concat_code(c, n),
            (true, None) => return Err(Error::Shape("conditioned block needs domain codes".into())),
            (false, _) => x.clone(),
        };
        let z = match &self.conv {
            ConvKind::Forward(c) => c.forward(ps, &input)?,
            ConvKind::Transposed(c) => c.forward(ps, &input)?,
        };
        let (pre_glu, bn) = match &self.bn {
            Some((bn, idx)) => {
                let (y, cache) = bn.forward(ps, &z, mode, &norm[*idx])?;
                (y, Some(cache))
            }
            None => (z, None),
        };
        let y = glu_forward(&pre_glu)?;
        Ok((y, GluBlockCache { input, bn, pre_glu }))
    }

    fn backward(
        &self,
        ps: &ParamSet,
        cache: &GluBlockCache,
        dy: &Tensor,
        mut grads: Option<&mut Grads>,
        need_dx: bool,
        in_channels: usize,
    ) -> Option<Tensor> {
        let mut d = glu_backward(&cache.pre_glu, dy);
        if let (Some((bn, _)), Some(bc)) = (&self.bn, &cache.bn) {
            d = bn.backward(ps, bc, &d, grads.as_deref_mut());
        }
        let dx = match &self.conv {
            ConvKind::Forward(c) => c.backward(ps, &cache.input, &d, grads, need_dx),
            ConvKind::Transposed(c) => c.backward(ps, &cache.input, &d, grads, need_dx),
        }?;
        Some(if self.conditioned { dx.strip_code_grad(in_channels) } else { dx })
    }

    fn batch_stats(&self, cache: &GluBlockCache) -> Option<(usize, RunningStats)> {
        match (&self.bn, &cache.bn) {
            (Some((_, idx)), Some(c)) => c.batch_stats.clone().map(|s| (*idx, s)),
            _ => None,
        }
    }
}

struct Builder {
    params: ParamSet,
    norm: Vec<RunningStats>,
}

impl Builder {
    fn new() -> Self {
        Builder { params: ParamSet::new(), norm: Vec::new() }
    }

    fn conv(&mut self, name: &str, in_ch: usize, out_ch: usize, spec: ConvSpec) -> Conv2d {
        let fan_in = in_ch * spec.kernel.0 * spec.kernel.1;
        let weight = self.params.register(
            format!("{name}.weight"),
            vec![out_ch, in_ch, spec.kernel.0, spec.kernel.1],
            InitScheme::FanInUniform { fan_in },
        );
        let bias = self.params.register(format!("{name}.bias"), vec![out_ch], InitScheme::Zeros);
        Conv2d { weight, bias, in_ch, out_ch, spec }
    }

    fn deconv(
        &mut self,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        spec: ConvSpec,
        output_padding: (usize, usize),
    ) -> ConvTranspose2d {
        let fan_in = in_ch * spec.kernel.0 * spec.kernel.1;
        let weight = self.params.register(
            format!("{name}.weight"),
            vec![in_ch, out_ch, spec.kernel.0, spec.kernel.1],
            InitScheme::FanInUniform { fan_in },
        );
        let bias = self.params.register(format!("{name}.bias"), vec![out_ch], InitScheme::Zeros);
        ConvTranspose2d { weight, bias, in_ch, out_ch, spec, output_padding }
    }

    fn bn(&mut self, name: &str, channels: usize) -> (BatchNorm2d, usize) {
        let gamma = self.params.register(format!("{name}.gamma"), vec![channels], InitScheme::Ones);
        let beta = self.params.register(format!("{name}.beta"), vec![channels], InitScheme::Zeros);
        self.norm.push(RunningStats::new(channels));
        (BatchNorm2d { gamma, beta, channels }, self.norm.len() - 1)
    }
}

fn spec_for(kernel: (usize, usize), stride: (usize, usize)) -> ConvSpec {
    ConvSpec {
        kernel,
        stride,
        padding: (same_padding(kernel.0, stride.0), same_padding(kernel.1, stride.1)),
    }
}

/// Encoder (G_E) plus decoder (G_D).
#[derive(Debug, Clone)]
pub struct Generator {
    cfg: NetConfig,
    pub params: ParamSet,
    pub norm: Vec<RunningStats>,
    enc: Vec<GluBlock>,
    latent: GluBlock,
    dec_latent: GluBlock,
    dec: Vec<GluBlock>,
    out: Conv2d,
    gate: Option<Conv2d>,
}

#[derive(Debug, Clone)]
pub struct EncoderCache {
    blocks: Vec<GluBlockCache>,
    latent: GluBlockCache,
}

#[derive(Debug, Clone)]
pub struct DecoderCache {
    blocks: Vec<GluBlockCache>,
    out_input: Tensor,
    out_linear: Tensor,
    gate_logits: Option<Tensor>,
}

impl Generator {
    pub fn new(cfg: &NetConfig) -> Result<Self> {
        cfg.validate()?;
        let heights = cfg.encoder_heights()?;
        let nd = cfg.n_domains;
        let mut b = Builder::new();
        let mut enc = Vec::new();
        let mut in_ch = 1;
        for (i, ((&ch, &k), &s)) in
            cfg.enc_channels.iter().zip(&cfg.enc_kernels).zip(&cfg.enc_strides).enumerate()
        {
            let conv = b.conv(&format!("g.enc.{i}.conv"), in_ch, 2 * ch, spec_for(k, s));
            let bn = b.bn(&format!("g.enc.{i}.bn"), 2 * ch);
            enc.push(GluBlock { conv: ConvKind::Forward(conv), bn: Some(bn), conditioned: false });
            in_ch = ch;
        }
        let h_last = *heights.last().unwrap();
        let lk = (h_last, cfg.latent_kernel_width);
        let lspec = ConvSpec { kernel: lk, stride: (1, 1), padding: (0, cfg.latent_kernel_width / 2) };
        let conv = b.conv("g.enc.latent.conv", in_ch, 2 * cfg.latent_dim, lspec);
        let bn = b.bn("g.enc.latent.bn", 2 * cfg.latent_dim);
        let latent = GluBlock { conv: ConvKind::Forward(conv), bn: Some(bn), conditioned: false };

        let c_last = *cfg.enc_channels.last().unwrap();
        let deconv = b.deconv("g.dec.latent.deconv", cfg.latent_dim + nd, 2 * c_last, lspec, (0, 0));
        let bn = b.bn("g.dec.latent.bn", 2 * c_last);
        let dec_latent = GluBlock { conv: ConvKind::Transposed(deconv), bn: Some(bn), conditioned: true };

        // Mirror encoder blocks n-1..1 with transposed convolutions; block 0 is
        // mirrored by the output convolution.
        let mut dec = Vec::new();
        let mut in_ch = c_last;
        for i in (1..cfg.enc_channels.len()).rev() {
            let out_ch = cfg.enc_channels[i - 1];
            let spec = spec_for(cfg.enc_kernels[i], cfg.enc_strides[i]);
            let (h_small, h_big) = (heights[i + 1], heights[i]);
            let natural = (h_small - 1) * spec.stride.0 + spec.kernel.0 - 2 * spec.padding.0;
            let op_h = h_big.checked_sub(natural).filter(|&d| d < spec.stride.0.max(1)).ok_or_else(
                || Error::Config(format!("decoder block {i} cannot restore height {h_big}")),
            )?;
            let f = cfg.time_downsample();
            let w_small = 8 * f / cfg.enc_strides[..=i].iter().map(|s| s.1).product::<usize>();
            let w_big = w_small * spec.stride.1;
            let natural_w = (w_small - 1) * spec.stride.1 + spec.kernel.1 - 2 * spec.padding.1;
            let op_w = w_big.checked_sub(natural_w).filter(|&d| d < spec.stride.1.max(1)).ok_or_else(
                || Error::Config(format!("decoder block {i} cannot restore width")),
            )?;
            let deconv = b.deconv(&format!("g.dec.{i}.deconv"), in_ch + nd, 2 * out_ch, spec, (op_h, op_w));
            let bn = b.bn(&format!("g.dec.{i}.bn"), 2 * out_ch);
            dec.push(GluBlock { conv: ConvKind::Transposed(deconv), bn: Some(bn), conditioned: true });
            in_ch = out_ch;
        }
        let ospec = spec_for(cfg.enc_kernels[0], (1, 1));
        let out = b.conv("g.dec.out", in_ch + nd, 1, ospec);
        let gate = match cfg.head {
            OutputHead::Linear => None,
            OutputHead::Gated => Some(b.conv("g.dec.gate", in_ch + nd, 1, ospec)),
        };
        Ok(Generator {
            cfg: cfg.clone(),
            params: b.params,
            norm: b.norm,
            enc,
            latent,
            dec_latent,
            dec,
            out,
            gate,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.cfg
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let [_, c, h, w] = x.shape();
        if c != 1 || h != self.cfg.q {
            return Err(Error::Shape(format!(
                "generator expects (B, 1, {}, T) input, got {:?}",
                self.cfg.q,
                x.shape()
            )));
        }
        if !self.cfg.admissible_width(w) {
            return Err(Error::Shape(format!(
                "T = {w} is not a positive multiple of {}",
                self.cfg.time_downsample()
            )));
        }
        Ok(())
    }

    /// Latent sequence of shape (B, L, 1, T / downsample).
    pub fn encode(&self, x: &Tensor, mode: Mode) -> Result<(Tensor, EncoderCache)> {
        self.check_input(x)?;
        let mut h = x.clone();
        let mut blocks = Vec::with_capacity(self.enc.len());
        for blk in &self.enc {
            let (y, c) = blk.forward(&self.params, &self.norm, &h, None, mode)?;
            blocks.push(c);
            h = y;
        }
        let (y, latent) = self.latent.forward(&self.params, &self.norm, &h, None, mode)?;
        Ok((y, EncoderCache { blocks, latent }))
    }

    pub fn decode(&self, y: &Tensor, codes: &[usize], mode: Mode) -> Result<(Tensor, DecoderCache)> {
        let [b, l, h, _] = y.shape();
        if l != self.cfg.latent_dim || h != 1 || codes.len() != b {
            return Err(Error::Shape(format!(
                "decoder expects ({} codes, {}, 1, W) latents, got {:?}",
                codes.len(),
                self.cfg.latent_dim,
                y.shape()
            )));
        }
        if let Some(&bad) = codes.iter().find(|&&c| c >= self.cfg.n_domains) {
            return Err(Error::Config(format!("domain code {} out of range", bad + 1)));
        }
        let nd = self.cfg.n_domains;
        let c = Some((codes, nd));
        let (mut h, first) = self.dec_latent.forward(&self.params, &self.norm, y, c, mode)?;
        let mut blocks = vec![first];
        for blk in &self.dec {
            let (o, cache) = blk.forward(&self.params, &self.norm, &h, c, mode)?;
            blocks.push(cache);
            h = o;
        }
        let out_input = h.concat_code(codes, nd);
        let out_linear = self.out.forward(&self.params, &out_input)?;
        let (out, gate_logits) = match &self.gate {
            None => (out_linear.clone(), None),
            Some(g) => {
                let z = g.forward(&self.params, &out_input)?;
                let mut o = out_linear.clone();
                for (v, zg) in o.data_mut().iter_mut().zip(z.data()) {
                    *v *= crate::layers::sigmoid(*zg);
                }
                (o, Some(z))
            }
        };
        Ok((out, DecoderCache { blocks, out_input, out_linear, gate_logits }))
    }

    /// G(x, c) = decode(encode(x), c).
    pub fn generate(&self, x: &Tensor, codes: &[usize], mode: Mode) -> Result<(Tensor, EncoderCache, DecoderCache)> {
        let (y, ec) = self.encode(x, mode)?;
        let (o, dc) = self.decode(&y, codes, mode)?;
        Ok((o, ec, dc))
    }

    /// Returns dL/dlatent.
    pub fn backward_decode(&self, cache: &DecoderCache, dout: &Tensor, mut grads: Option<&mut Grads>) -> Tensor {
        let ps = &self.params;
        let mut dlin = dout.clone();
        let mut d_in = Tensor::zeros(cache.out_input.shape());
        if let (Some(g), Some(z)) = (&self.gate, &cache.gate_logits) {
            let mut dz = Tensor::zeros(z.shape());
            for (((dl, dzv), &zv), (&lin, &go)) in dlin
                .data_mut()
                .iter_mut()
                .zip(dz.data_mut())
                .zip(z.data())
                .zip(cache.out_linear.data().iter().zip(dout.data()))
            {
                let s = crate::layers::sigmoid(zv);
                *dl = go * s;
                *dzv = go * lin * s * (1.0 - s);
            }
            let dg = g.backward(ps, &cache.out_input, &dz, grads.as_deref_mut(), true).unwrap();
            d_in.add_assign(&dg);
        }
        let dx = self.out.backward(ps, &cache.out_input, &dlin, grads.as_deref_mut(), true).unwrap();
        d_in.add_assign(&dx);
        let channels = cache.out_input.channels() - self.cfg.n_domains;
        let mut d = d_in.strip_code_grad(channels);
        for (i, blk) in self.dec.iter().enumerate().rev() {
            let bc = &cache.blocks[i + 1];
            let in_ch = bc.input.channels() - self.cfg.n_domains;
            d = blk.backward(ps, bc, &d, grads.as_deref_mut(), true, in_ch).unwrap();
        }
        let bc = &cache.blocks[0];
        self.dec_latent
            .backward(ps, bc, &d, grads, true, self.cfg.latent_dim)
            .unwrap()
    }

    /// Back-propagates dL/dlatent through the encoder.
    pub fn backward_encode(
        &self,
        cache: &EncoderCache,
        dlatent: &Tensor,
        mut grads: Option<&mut Grads>,
        need_dx: bool,
    ) -> Option<Tensor> {
        let ps = &self.params;
        let last_in = cache.latent.input.channels();
        let mut d = self.latent.backward(ps, &cache.latent, dlatent, grads.as_deref_mut(), true, last_in)?;
        for (i, blk) in self.enc.iter().enumerate().rev() {
            let bc = &cache.blocks[i];
            let need = i > 0 || need_dx;
            match blk.backward(ps, bc, &d, grads.as_deref_mut(), need, bc.input.channels()) {
                Some(nd) => d = nd,
                None => return None,
            }
        }
        Some(d)
    }

    /// Batch statistics gathered by train-mode passes, in layer order.
    pub fn encoder_batch_stats(&self, cache: &EncoderCache) -> Vec<(usize, RunningStats)> {
        self.enc
            .iter()
            .zip(&cache.blocks)
            .chain(core::iter::once((&self.latent, &cache.latent)))
            .filter_map(|(b, c)| b.batch_stats(c))
            .collect()
    }

    pub fn decoder_batch_stats(&self, cache: &DecoderCache) -> Vec<(usize, RunningStats)> {
        core::iter::once(&self.dec_latent)
            .chain(&self.dec)
            .zip(&cache.blocks)
            .filter_map(|(b, c)| b.batch_stats(c))
            .collect()
    }

    pub fn commit_stats(&mut self, stats: &[(usize, RunningStats)]) {
        let m = self.cfg.bn_momentum;
        for (idx, s) in stats {
            self.norm[*idx].update(s, m);
        }
    }

    /// Parameter ids belonging to the encoder.
    pub fn encoder_param_ids(&self) -> Vec<ParamId> {
        self.params
            .tensors()
            .iter()
            .enumerate()
            .filter(|(_, t)| t.name.starts_with("g.enc."))
            .map(|(i, _)| ParamId(i))
            .collect()
    }
}

/// Strided conv/GLU stack with a one-channel-or-N-channel linear head.
#[derive(Debug, Clone)]
struct PatchNet {
    blocks: Vec<GluBlock>,
    head: Conv2d,
    n_domains: usize,
    conditioned: bool,
}

#[derive(Debug, Clone)]
struct PatchCache {
    blocks: Vec<GluBlockCache>,
    head_input: Tensor,
}

impl PatchNet {
    fn build(
        b: &mut Builder,
        prefix: &str,
        cfg: &NetConfig,
        channels: &[usize],
        out_ch: usize,
        conditioned: bool,
    ) -> Result<Self> {
        let nd = if conditioned { cfg.n_domains } else { 0 };
        let mut blocks = Vec::new();
        let mut in_ch = 1;
        let mut h = cfg.q;
        for (i, &ch) in channels.iter().enumerate() {
            let stride = if i == 0 { (1, 2) } else { (2, 2) };
            let spec = spec_for((3, 8), stride);
            let conv = b.conv(&format!("{prefix}.{i}.conv"), in_ch + nd, 2 * ch, spec);
            h = crate::layers::conv_out_len(h, 3, stride.0, spec.padding.0)
                .ok_or_else(|| Error::Config("feature height too small".into()))?;
            blocks.push(GluBlock { conv: ConvKind::Forward(conv), bn: None, conditioned });
            in_ch = ch;
        }
        let hspec = ConvSpec { kernel: (h, 4), stride: (1, 2), padding: (0, 1) };
        let head = b.conv(&format!("{prefix}.head"), in_ch + nd, out_ch, hspec);
        Ok(PatchNet { blocks, head, n_domains: cfg.n_domains, conditioned })
    }

    fn forward(&self, ps: &ParamSet, x: &Tensor, codes: Option<&[usize]>) -> Result<(Tensor, PatchCache)> {
        let c = codes.map(|c| (c, self.n_domains));
        let mut h = x.clone();
        let mut blocks = Vec::new();
        for blk in &self.blocks {
            let (y, cache) = blk.forward(ps, &[], &h, c, Mode::Train)?;
            blocks.push(cache);
            h = y;
        }
        let head_input = match (self.conditioned, codes) {
            (true, Some(c)) => h.concat_code(c, self.n_domains),
            _ => h,
        };
        let logits = self.head.forward(ps, &head_input)?;
        Ok((logits, PatchCache { blocks, head_input }))
    }

    fn backward(&self, ps: &ParamSet, cache: &PatchCache, dlogits: &Tensor, mut grads: Option<&mut Grads>) -> Tensor {
        let nd = if self.conditioned { self.n_domains } else { 0 };
        let d = self.head.backward(ps, &cache.head_input, dlogits, grads.as_deref_mut(), true).unwrap();
        let mut d = if self.conditioned { d.strip_code_grad(cache.head_input.channels() - nd) } else { d };
        for (blk, bc) in self.blocks.iter().zip(&cache.blocks).rev() {
            d = blk.backward(ps, bc, &d, grads.as_deref_mut(), true, bc.input.channels() - nd).unwrap();
        }
        d
    }
}

/// Real/fake patch discriminator D(o, c).
#[derive(Debug, Clone)]
pub struct Discriminator {
    pub params: ParamSet,
    net: PatchNet,
    q: usize,
}

#[derive(Debug, Clone)]
pub struct DiscriminatorOutput {
    /// Pre-sigmoid scores, shape (B, 1, 1, S).
    pub logits: Tensor,
    /// Clamped probabilities, `probs[b][s]`.
    pub probs: Vec<Vec<f64>>,
    cache: PatchCache,
}

impl Discriminator {
    pub fn new(cfg: &NetConfig) -> Result<Self> {
        cfg.validate()?;
        let mut b = Builder::new();
        let net = PatchNet::build(&mut b, "d", cfg, &cfg.disc_channels, 1, true)?;
        Ok(Discriminator { params: b.params, net, q: cfg.q })
    }

    pub fn forward(&self, x: &Tensor, codes: &[usize]) -> Result<DiscriminatorOutput> {
        check_patch_input(x, self.q, codes.len())?;
        if let Some(&bad) = codes.iter().find(|&&c| c >= self.net.n_domains) {
            return Err(Error::Config(format!("domain code {} out of range", bad + 1)));
        }
        let (logits, cache) = self.net.forward(&self.params, x, Some(codes))?;
        let s = logits.width();
        let flat = sigmoid_probs(logits.data());
        let probs = flat.chunks(s).map(|c| c.to_vec()).collect();
        Ok(DiscriminatorOutput { logits, probs, cache })
    }

    /// Takes dL/dprobs (same nested layout as `probs`) and returns dL/dx.
    pub fn backward(&self, out: &DiscriminatorOutput, dprobs: &[Vec<f64>], grads: Option<&mut Grads>) -> Tensor {
        let flat: Vec<f64> = dprobs.iter().flatten().copied().collect();
        let dz = crate::layers::sigmoid_probs_backward(out.logits.data(), &flat);
        let dz = Tensor::from_vec(out.logits.shape(), dz).unwrap();
        self.net.backward(&self.params, &out.cache, &dz, grads)
    }
}

/// Domain classifier C(o).
#[derive(Debug, Clone)]
pub struct Classifier {
    pub params: ParamSet,
    net: PatchNet,
    q: usize,
}

#[derive(Debug, Clone)]
pub struct ClassifierOutput {
    /// Logits, shape (B, N, 1, S).
    pub logits: Tensor,
    /// `probs[b][s][class]`.
    pub probs: Vec<Vec<Vec<f64>>>,
    cache: PatchCache,
}

impl Classifier {
    pub fn new(cfg: &NetConfig) -> Result<Self> {
        cfg.validate()?;
        let mut b = Builder::new();
        let net = PatchNet::build(&mut b, "c", cfg, &cfg.cls_channels, cfg.n_domains, false)?;
        Ok(Classifier { params: b.params, net, q: cfg.q })
    }

    pub fn forward(&self, x: &Tensor) -> Result<ClassifierOutput> {
        check_patch_input(x, self.q, x.batch())?;
        let (logits, cache) = self.net.forward(&self.params, x, None)?;
        let probs = segment_softmax(&logits);
        Ok(ClassifierOutput { logits, probs, cache })
    }

    pub fn backward(&self, out: &ClassifierOutput, dprobs: &[Vec<Vec<f64>>], grads: Option<&mut Grads>) -> Tensor {
        let dz = crate::layers::segment_softmax_backward(&out.probs, dprobs, out.logits.shape());
        self.net.backward(&self.params, &out.cache, &dz, grads)
    }
}

fn check_patch_input(x: &Tensor, q: usize, n_codes: usize) -> Result<()> {
    let [b, c, h, _] = x.shape();
    if c != 1 || h != q || b != n_codes {
        return Err(Error::Shape(format!(
            "expected ({n_codes}, 1, {q}, T) input, got {:?}",
            x.shape()
        )));
    }
    Ok(())
}

/// Parameters and normalization state of G, D and C.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub config: NetConfig,
    pub g: Generator,
    pub d: Discriminator,
    pub c: Classifier,
    /// Seed the parameters were drawn from.
    pub init_seed: u64,
}

impl ModelParams {
    /// Builds all three networks and draws G, then D, then C from one stream.
    pub fn init(cfg: &NetConfig, seed: u64) -> Result<Self> {
        use rand::SeedableRng;
        let mut g = Generator::new(cfg)?;
        let mut d = Discriminator::new(cfg)?;
        let mut c = Classifier::new(cfg)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        g.params.initialize(&mut rng);
        d.params.initialize(&mut rng);
        c.params.initialize(&mut rng);
        Ok(ModelParams { config: cfg.clone(), g, d, c, init_seed: seed })
    }
}

/// One-hot target (or source) domain.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DomainCode {
    index: usize,
    n: usize,
}

impl DomainCode {
    /// Zero-based `index` among `n` domains.
    pub fn new(index: usize, n: usize) -> Result<Self> {
        if index >= n {
            return Err(Error::Config(format!("domain {} out of 1..={n}", index + 1)));
        }
        Ok(DomainCode { index, n })
    }

    pub fn index(&self) -> usize {
        self.index
    }

    pub fn one_hot(&self) -> Vec<f64> {
        (0..self.n).map(|i| if i == self.index { 1.0 } else { 0.0 }).collect()
    }
}
