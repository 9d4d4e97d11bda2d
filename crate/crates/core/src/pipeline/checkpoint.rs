//! Checkpoint directories: `manifest.json`, `vocab.json` and one f32 blob
//! per parameter.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Vocab;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, XtqaModel};
use crate::nn::checkpoint::{read_params, write_params, ParamEntry, DTYPE};

pub const FORMAT_VERSION: u32 = 1;

/// Seeds of the three random streams of a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub run: u64,
    pub init: u64,
    pub dropout: u64,
    pub shuffle: u64,
}

impl Seeds {
    pub fn derive(run: u64) -> Self {
        Self {
            run,
            init: splitmix64(run ^ 0x1),
            dropout: splitmix64(run ^ 0x2),
            shuffle: splitmix64(run ^ 0x3),
        }
    }
}

pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub dtype: String,
    pub epoch: usize,
    pub seeds: Seeds,
    pub model: ModelConfig,
    pub vocab_hash: String,
    pub params: Vec<ParamEntry>,
}

pub fn save_checkpoint(dir: &Path, model: &XtqaModel, vocab: &Vocab, epoch: usize, seeds: Seeds) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let params = write_params(dir, &model.store)?;
    let manifest = Manifest {
        version: FORMAT_VERSION,
        dtype: DTYPE.into(),
        epoch,
        seeds,
        model: model.config.clone(),
        vocab_hash: vocab.hash(),
        params,
    };
    let write = |name: &str, text: String| {
        let path = dir.join(name);
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    };
    write("vocab.json", vocab.to_json())?;
    write(
        "manifest.json",
        serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n",
    )?;
    Ok(manifest)
}

/// A loaded checkpoint.
pub struct Checkpoint {
    pub manifest: Manifest,
    pub model: XtqaModel,
    pub vocab: Vocab,
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let read = |name: &str| {
        let path = dir.join(name);
        fs::read_to_string(&path).map_err(|e| Error::io(&path, e))
    };
    let manifest: Manifest = serde_json::from_str(&read("manifest.json")?)
        .map_err(|e| Error::Checkpoint(format!("manifest.json: {e}")))?;
    if manifest.version != FORMAT_VERSION || manifest.dtype != DTYPE {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {} / dtype {}",
            manifest.version, manifest.dtype
        )));
    }
    let vocab = Vocab::from_json(&read("vocab.json")?)?;
    check_vocab(&manifest, &vocab)?;
    let mut model = XtqaModel::new(manifest.model.clone(), manifest.seeds.init)?;
    read_params(dir, &manifest.params, &mut model.store)?;
    Ok(Checkpoint {
        manifest,
        model,
        vocab,
    })
}

/// Fails unless `vocab` is the vocabulary the checkpoint was trained with.
pub fn check_vocab(manifest: &Manifest, vocab: &Vocab) -> Result<()> {
    let found = vocab.hash();
    if found != manifest.vocab_hash {
        return Err(Error::VocabMismatch {
            expected: manifest.vocab_hash.clone(),
            found,
        });
    }
    if vocab.len() != manifest.model.vocab_size {
        return Err(Error::Checkpoint(format!(
            "vocabulary has {} ids, model expects {}",
            vocab.len(),
            manifest.model.vocab_size
        )));
    }
    Ok(())
}
