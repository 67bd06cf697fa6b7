//! JSON corpus manifests.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use vclab_core::dataset::{Corpus, PhonemeInventory, SpeakerDomain, Utterance};

use crate::codec::write_file;
use crate::error::{Error, Result};
use crate::features::{read_alignment, read_features, write_alignment, write_features};

pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub inventory: InventoryEntry,
    pub speakers: Vec<SpeakerEntry>,
    pub utterances: Vec<UtteranceEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InventoryEntry {
    #[serde(rename = "K")]
    pub k: usize,
    pub names: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpeakerEntry {
    /// 1-based.
    pub code: usize,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UtteranceEntry {
    pub id: String,
    /// Relative to the manifest's directory unless absolute.
    pub feature_file: PathBuf,
    pub alignment_file: PathBuf,
    /// Speaker name.
    pub speaker: String,
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Json { path: path.to_path_buf(), source })
}

/// Loads and validates every utterance listed in the manifest.
pub fn load_corpus(manifest_path: &Path) -> Result<Corpus> {
    let m = read_manifest(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new(""));
    if m.inventory.k != m.inventory.names.len() {
        return Err(Error::format(
            manifest_path,
            format!("inventory declares K = {} but lists {} names", m.inventory.k, m.inventory.names.len()),
        ));
    }
    let inventory = PhonemeInventory::new(m.inventory.names.clone())?;
    let mut speakers = m.speakers.clone();
    speakers.sort_by_key(|s| s.code);
    let domains: Vec<SpeakerDomain> = speakers
        .iter()
        .map(|s| match s.code {
            0 => Err(Error::format(manifest_path, format!("speaker {}: codes are 1-based", s.name))),
            c => Ok(SpeakerDomain { code: c - 1, name: s.name.clone(), f0_stats: None }),
        })
        .collect::<Result<_>>()?;
    let mut utterances = Vec::with_capacity(m.utterances.len());
    for u in &m.utterances {
        let domain = domains.iter().find(|d| d.name == u.speaker).ok_or_else(|| {
            Error::format(manifest_path, format!("utterance {}: unknown speaker {:?}", u.id, u.speaker))
        })?;
        let features = read_features(&base.join(&u.feature_file), &u.id)?;
        let alignment = read_alignment(&base.join(&u.alignment_file))?;
        utterances.push(Utterance { id: u.id.clone(), features, alignment, domain: domain.code });
    }
    Ok(Corpus::new(utterances, inventory, domains)?)
}

fn check_id(id: &str) -> Result<()> {
    if id.is_empty() || id.contains(['/', '\\']) || id == "." || id == ".." {
        return Err(Error::Usage(format!("utterance id {id:?} cannot be used as a file name")));
    }
    Ok(())
}

/// Writes `manifest.json`, `features/<id>.vcf` and `alignments/<id>.lab` under `dir`.
pub fn save_corpus(corpus: &Corpus, dir: &Path) -> Result<PathBuf> {
    let mut entries = Vec::with_capacity(corpus.utterances().len());
    for u in corpus.utterances() {
        check_id(&u.id)?;
        let feature_file = PathBuf::from("features").join(format!("{}.vcf", u.id));
        let alignment_file = PathBuf::from("alignments").join(format!("{}.lab", u.id));
        write_features(&dir.join(&feature_file), &u.features)?;
        write_alignment(&dir.join(&alignment_file), &u.alignment)?;
        entries.push(UtteranceEntry {
            id: u.id.clone(),
            feature_file,
            alignment_file,
            speaker: corpus.domains()[u.domain].name.clone(),
        });
    }
    let manifest = Manifest {
        inventory: InventoryEntry { k: corpus.inventory().len(), names: corpus.inventory().names().to_vec() },
        speakers: corpus.domains().iter().map(|d| SpeakerEntry { code: d.code + 1, name: d.name.clone() }).collect(),
        utterances: entries,
    };
    let path = dir.join(MANIFEST_NAME);
    write_json(&path, &manifest)?;
    Ok(path)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|source| Error::Json { path: path.to_path_buf(), source })?;
    text.push('\n');
    write_file(path, text.as_bytes())
}
