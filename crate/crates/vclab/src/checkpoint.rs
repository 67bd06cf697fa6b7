//! Versioned binary containers for prior sets and full training state.
//!
//! Every real number is stored as a little-endian f64, so loading a saved
//! state reproduces it bit for bit.

use std::path::Path;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vclab_core::dataset::PhonemeInventory;
use vclab_core::layers::RunningStats;
use vclab_core::networks::{Classifier, Discriminator, Generator, ModelParams, NetConfig};
use vclab_core::optim::Adam;
use vclab_core::params::ParamSet;
use vclab_core::phoneme_prior::{CovarianceKind, GaussianPrior, PriorSet};
use vclab_core::pipeline::TrainState;

use crate::codec::{read_file, write_file, Reader, Writer};
use crate::error::{Error, Result};

pub const PRIOR_MAGIC: &[u8; 4] = b"VCPR";
pub const PRIOR_VERSION: u32 = 1;
pub const STATE_MAGIC: &[u8; 4] = b"VCCK";
pub const STATE_VERSION: u32 = 1;

fn put_priors(w: &mut Writer, p: &PriorSet) {
    w.len(p.latent_dim());
    w.f64(p.floor());
    w.u8(match p.kind() {
        CovarianceKind::Full => 0,
        CovarianceKind::Diagonal => 1,
    });
    w.len(p.inventory().len());
    for name in p.inventory().names() {
        w.str(name);
    }
    for g in p.priors() {
        match g {
            None => w.u8(0),
            Some(g) => {
                w.u8(1);
                w.len(g.frame_count());
                w.f64s(g.mean());
                w.f64s(g.covariance());
            }
        }
    }
}

fn get_priors(r: &mut Reader) -> Result<PriorSet> {
    let dim = r.u64()? as usize;
    let floor = r.f64()?;
    let kind = match r.u8()? {
        0 => CovarianceKind::Full,
        1 => CovarianceKind::Diagonal,
        k => return Err(r.error(format!("unknown covariance kind {k}"))),
    };
    let k = r.len(8)?;
    let names = (0..k).map(|_| r.str()).collect::<Result<Vec<_>>>()?;
    let inventory = PhonemeInventory::new(names)?;
    let mut priors = Vec::with_capacity(k);
    for _ in 0..k {
        priors.push(match r.u8()? {
            0 => None,
            1 => {
                let count = r.u64()? as usize;
                let mean = r.f64s()?;
                let cov = r.f64s()?;
                Some(GaussianPrior::new(mean, cov, count)?)
            }
            b => return Err(r.error(format!("bad presence flag {b}"))),
        });
    }
    Ok(PriorSet::from_parts(priors, inventory, dim, floor, kind)?)
}

pub fn encode_priors(p: &PriorSet) -> Vec<u8> {
    let mut w = Writer::new();
    w.buf.extend_from_slice(PRIOR_MAGIC);
    w.u32(PRIOR_VERSION);
    put_priors(&mut w, p);
    w.buf
}

pub fn decode_priors(data: &[u8], path: &Path) -> Result<PriorSet> {
    let mut r = Reader::new(data, path);
    r.header(PRIOR_MAGIC, PRIOR_VERSION)?;
    let p = get_priors(&mut r)?;
    r.finish()?;
    Ok(p)
}

pub fn save_priors(path: &Path, p: &PriorSet) -> Result<()> {
    write_file(path, &encode_priors(p))
}

pub fn load_priors(path: &Path) -> Result<PriorSet> {
    decode_priors(&read_file(path)?, path)
}

fn put_params(w: &mut Writer, ps: &ParamSet) {
    w.len(ps.len());
    for t in ps.tensors() {
        w.str(&t.name);
        w.len(t.shape.len());
        for &d in &t.shape {
            w.len(d);
        }
        w.f64s(&t.values);
    }
}

/// Overwrites `ps` (freshly built from the stored architecture) with stored
/// values, insisting on identical names and shapes.
fn get_params(r: &mut Reader, ps: &mut ParamSet, net: &str) -> Result<()> {
    let n = r.len(8)?;
    if n != ps.len() {
        return Err(r.error(format!("{net}: {n} tensors stored, architecture has {}", ps.len())));
    }
    for t in ps.tensors_mut() {
        let name = r.str()?;
        let rank = r.len(8)?;
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let values = r.f64s()?;
        if name != t.name || shape != t.shape || values.len() != t.values.len() {
            return Err(r.error(format!("{net}: stored tensor {name} {shape:?} does not match {} {:?}", t.name, t.shape)));
        }
        t.values = values;
    }
    Ok(())
}

fn put_adam(w: &mut Writer, a: &Adam) {
    w.u64(a.t);
    w.len(a.m.len());
    for (m, v) in a.m.iter().zip(&a.v) {
        w.f64s(m);
        w.f64s(v);
    }
}

fn get_adam(r: &mut Reader, ps: &ParamSet, net: &str) -> Result<Adam> {
    let t = r.u64()?;
    let n = r.len(16)?;
    let mut m = Vec::with_capacity(n);
    let mut v = Vec::with_capacity(n);
    for _ in 0..n {
        m.push(r.f64s()?);
        v.push(r.f64s()?);
    }
    let adam = Adam { m, v, t };
    if !adam.matches(ps) {
        return Err(r.error(format!("{net}: optimizer moments do not match the parameters")));
    }
    Ok(adam)
}

pub fn encode_state(s: &TrainState) -> Vec<u8> {
    let mut w = Writer::new();
    w.buf.extend_from_slice(STATE_MAGIC);
    w.u32(STATE_VERSION);
    let config = serde_json::to_string(&s.model.config).expect("architecture config serializes");
    w.str(&config);
    w.u64(s.model.init_seed);
    put_params(&mut w, &s.model.g.params);
    put_params(&mut w, &s.model.d.params);
    put_params(&mut w, &s.model.c.params);
    w.len(s.model.g.norm.len());
    for n in &s.model.g.norm {
        w.f64s(&n.mean);
        w.f64s(&n.var);
    }
    put_adam(&mut w, &s.opt_g);
    put_adam(&mut w, &s.opt_d);
    put_adam(&mut w, &s.opt_c);
    w.u8(s.stage);
    w.u64(s.iteration);
    w.buf.extend_from_slice(&s.rng.get_seed());
    w.u64(s.rng.get_stream());
    w.u128(s.rng.get_word_pos());
    match &s.priors {
        None => w.u8(0),
        Some(p) => {
            w.u8(1);
            put_priors(&mut w, p);
        }
    }
    w.buf
}

pub fn decode_state(data: &[u8], path: &Path) -> Result<TrainState> {
    let mut r = Reader::new(data, path);
    r.header(STATE_MAGIC, STATE_VERSION)?;
    let config_text = r.str()?;
    let config: NetConfig =
        serde_json::from_str(&config_text).map_err(|source| Error::Json { path: path.to_path_buf(), source })?;
    let init_seed = r.u64()?;
    let mut g = Generator::new(&config)?;
    let mut d = Discriminator::new(&config)?;
    let mut c = Classifier::new(&config)?;
    get_params(&mut r, &mut g.params, "generator")?;
    get_params(&mut r, &mut d.params, "discriminator")?;
    get_params(&mut r, &mut c.params, "classifier")?;
    let n_norm = r.len(16)?;
    if n_norm != g.norm.len() {
        return Err(r.error(format!("{n_norm} normalization layers stored, architecture has {}", g.norm.len())));
    }
    for slot in g.norm.iter_mut() {
        let stats = RunningStats { mean: r.f64s()?, var: r.f64s()? };
        if stats.mean.len() != slot.mean.len() || stats.var.len() != slot.var.len() {
            return Err(r.error("normalization statistics have the wrong channel count"));
        }
        *slot = stats;
    }
    let opt_g = get_adam(&mut r, &g.params, "generator")?;
    let opt_d = get_adam(&mut r, &d.params, "discriminator")?;
    let opt_c = get_adam(&mut r, &c.params, "classifier")?;
    let stage = r.u8()?;
    let iteration = r.u64()?;
    let seed: [u8; 32] = r.take(32)?.try_into().unwrap();
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(r.u64()?);
    rng.set_word_pos(r.u128()?);
    let priors = match r.u8()? {
        0 => None,
        1 => Some(get_priors(&mut r)?),
        b => return Err(r.error(format!("bad prior presence flag {b}"))),
    };
    r.finish()?;
    let model = ModelParams { config, g, d, c, init_seed };
    let state = TrainState { model, opt_g, opt_d, opt_c, stage, iteration, rng, priors };
    state.validate()?;
    Ok(state)
}

pub fn save_state(path: &Path, s: &TrainState) -> Result<()> {
    write_file(path, &encode_state(s))
}

pub fn load_state(path: &Path) -> Result<TrainState> {
    decode_state(&read_file(path)?, path)
}
