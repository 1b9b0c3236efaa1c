//! JSON checkpoints: architecture plus flat row-major parameter arrays.
//!
//! ```text
//! {
//!   "format": "wjdot-checkpoint",
//!   "version": 1,
//!   "architecture": {"input_dim": 8, "hidden": [64, 64], "embed_dim": 32,
//!                    "n_classes": 3, "activation": "tanh"},
//!   "embedding": [{"rows": 64, "cols": 8, "weights": [...], "bias": [...]}, ...],
//!   "heads": [{"id": "global", "rows": 3, "cols": 32, "weights": [...], "bias": [...]}]
//! }
//! ```
//!
//! `rows x cols` is `outputs x inputs`. Floats are written in shortest
//! round-trip form, so save/load is exact.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::{Architecture, Dense, EmbedClassifier, Embedding, HeadId};
use crate::{Error, Result};

const FORMAT: &str = "wjdot-checkpoint";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct LayerRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    id: Option<String>,
    rows: usize,
    cols: usize,
    weights: Vec<f64>,
    bias: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointRecord {
    format: String,
    version: u32,
    architecture: Architecture,
    embedding: Vec<LayerRecord>,
    heads: Vec<LayerRecord>,
}

impl LayerRecord {
    fn from_dense(layer: &Dense, id: Option<String>) -> Self {
        Self {
            id,
            rows: layer.outputs(),
            cols: layer.inputs(),
            weights: layer.weights.iter().copied().collect(),
            bias: layer.bias.to_vec(),
        }
    }

    fn into_dense(self) -> Result<Dense> {
        if self.bias.len() != self.rows {
            return Err(Error::Input(format!(
                "checkpoint layer has {} bias entries for {} rows",
                self.bias.len(),
                self.rows
            )));
        }
        let weights = Array2::from_shape_vec((self.rows, self.cols), self.weights)
            .map_err(|e| Error::Input(format!("checkpoint layer shape: {e}")))?;
        Ok(Dense {
            weights,
            bias: Array1::from(self.bias),
        })
    }
}

pub fn write_checkpoint<W: Write>(model: &EmbedClassifier, writer: W) -> Result<()> {
    let record = CheckpointRecord {
        format: FORMAT.into(),
        version: VERSION,
        architecture: model.architecture().clone(),
        embedding: model
            .embedding()
            .layers()
            .iter()
            .map(|l| LayerRecord::from_dense(l, None))
            .collect(),
        heads: model
            .heads()
            .map(|(id, l)| LayerRecord::from_dense(l, Some(id.to_string())))
            .collect(),
    };
    serde_json::to_writer_pretty(writer, &record).map_err(|e| Error::Io(e.into()))
}

pub fn read_checkpoint<R: Read>(reader: R) -> Result<EmbedClassifier> {
    let record: CheckpointRecord = serde_json::from_reader(reader).map_err(|e| Error::Parse {
        line: e.line(),
        message: e.to_string(),
    })?;
    if record.format != FORMAT || record.version != VERSION {
        return Err(Error::Input(format!(
            "unsupported checkpoint '{}' version {}",
            record.format, record.version
        )));
    }
    let arch = record.architecture;
    let layers = record
        .embedding
        .into_iter()
        .map(LayerRecord::into_dense)
        .collect::<Result<Vec<_>>>()?;
    let expected = arch.hidden.len() + usize::from(arch.embed_dim.is_some());
    if layers.len() != expected {
        return Err(Error::Input(format!(
            "checkpoint has {} embedding layers, architecture needs {expected}",
            layers.len()
        )));
    }
    let mut width = arch.input_dim;
    for (l, target) in layers.iter().zip(arch.hidden.iter().chain(arch.embed_dim.iter())) {
        if l.inputs() != width || l.outputs() != *target {
            return Err(Error::Input(
                "checkpoint embedding layer shapes disagree with architecture".into(),
            ));
        }
        width = *target;
    }
    let embedding = Embedding::from_layers(layers, arch.hidden.len(), arch.activation);
    let mut heads = BTreeMap::new();
    for h in record.heads {
        let id: HeadId =
            h.id.as_deref()
                .ok_or_else(|| Error::Input("checkpoint head without id".into()))?
                .parse()?;
        heads.insert(id, h.into_dense()?);
    }
    EmbedClassifier::from_parts(arch, embedding, heads)
}

pub fn save_checkpoint(model: &EmbedClassifier, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(model, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<EmbedClassifier> {
    read_checkpoint(BufReader::new(File::open(path)?))
}
