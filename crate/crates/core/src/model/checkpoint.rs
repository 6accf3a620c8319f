use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Config, Model};
use crate::autodiff::Matrix;
use crate::corpus::{Ontology, Vocab};
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "constpath-checkpoint/1";

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    shape: [usize; 2],
    data: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointFile {
    format: String,
    config: Config,
    vocab: Vocab,
    ontology: Ontology,
    params: BTreeMap<String, TensorEntry>,
}

pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let params = model
        .store
        .iter()
        .map(|(_, p)| {
            (
                p.name.clone(),
                TensorEntry {
                    shape: [p.value.rows(), p.value.cols()],
                    data: p.value.data().to_vec(),
                },
            )
        })
        .collect();
    let file = CheckpointFile {
        format: CHECKPOINT_FORMAT.to_string(),
        config: model.config.clone(),
        vocab: model.vocab.clone(),
        ontology: model.ontology.clone(),
        params,
    };
    let mut out = BufWriter::new(fs::File::create(path)?);
    serde_json::to_writer(&mut out, &file)?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model> {
    let text = fs::read_to_string(path)?;
    let file: CheckpointFile =
        serde_json::from_str(&text).map_err(|e| Error::Checkpoint(e.to_string()))?;
    if file.format != CHECKPOINT_FORMAT {
        return Err(Error::Checkpoint(format!(
            "unsupported format `{}`",
            file.format
        )));
    }
    let mut model = Model::new(file.config, file.vocab, file.ontology)?;
    let mut params = file.params;
    let ids: Vec<_> = model.store.ids().collect();
    for id in ids {
        let name = model.store.name(id).to_string();
        let entry = params
            .remove(&name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))?;
        let expected = model.store.get(id).shape();
        if (entry.shape[0], entry.shape[1]) != expected {
            return Err(Error::Checkpoint(format!(
                "parameter `{name}` has shape {:?}, expected {expected:?}",
                entry.shape
            )));
        }
        *model.store.get_mut(id) = Matrix::from_vec(entry.shape[0], entry.shape[1], entry.data)
            .map_err(|e| Error::Checkpoint(format!("parameter `{name}`: {e}")))?;
    }
    if let Some(extra) = params.keys().next() {
        return Err(Error::Checkpoint(format!("unexpected parameter `{extra}`")));
    }
    Ok(model)
}
