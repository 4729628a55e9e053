//! Checkpoint directories: `checkpoint.json` (format tag, version, config),
//! one vocabulary file per component and one JSON tensor file per component.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::graph::Mat;
use super::params::ParamStore;
use super::{BundleMeta, ModelBundle, ModelConfig};
use crate::error::{Error, Result};
use crate::tokenizer::Vocab;

pub const CHECKPOINT_FORMAT: &str = "jointex-checkpoint/1";

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: String,
    config: ModelConfig,
    meta: BundleMeta,
    #[serde(default)]
    extra: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct Tensor {
    shape: [usize; 2],
    data: Vec<f64>,
}

fn write_tensors(path: &Path, store: &ParamStore) -> Result<()> {
    let map: std::collections::BTreeMap<&str, Tensor> = store
        .iter()
        .map(|(name, m)| {
            (
                name,
                Tensor {
                    shape: [m.nrows(), m.ncols()],
                    data: m.iter().copied().collect(),
                },
            )
        })
        .collect();
    let text = serde_json::to_string(&map)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_tensors(path: &Path) -> Result<HashMap<String, Mat>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let raw: HashMap<String, Tensor> = serde_json::from_str(&text)?;
    raw.into_iter()
        .map(|(name, t)| {
            let m = Mat::from_shape_vec((t.shape[0], t.shape[1]), t.data)
                .map_err(|e| Error::Checkpoint(format!("tensor {name}: {e}")))?;
            Ok((name, m))
        })
        .collect()
}

/// Writes `bundle` into `dir` (created if needed). `extra` is stored verbatim
/// in the header, e.g. the dev accuracy that selected this checkpoint.
pub fn save_checkpoint(bundle: &ModelBundle, dir: impl AsRef<Path>, extra: serde_json::Value) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let header = Header {
        format: CHECKPOINT_FORMAT.into(),
        version: crate::VERSION.into(),
        config: bundle.config.clone(),
        meta: bundle.meta.clone(),
        extra,
    };
    let path = dir.join("checkpoint.json");
    fs::write(&path, serde_json::to_string_pretty(&header)?).map_err(|e| Error::io(&path, e))?;
    bundle.classifier_vocab.save(dir.join("classifier.vocab"))?;
    bundle.generator_vocab.save(dir.join("generator.vocab"))?;
    write_tensors(&dir.join("classifier.params.json"), &bundle.classifier.params)?;
    write_tensors(&dir.join("generator.params.json"), &bundle.generator.params)
}

/// Loads a checkpoint; returns the bundle and the header's `extra` value.
pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<(ModelBundle, serde_json::Value)> {
    let dir = dir.as_ref();
    let path = dir.join("checkpoint.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let header: Header = serde_json::from_str(&text)?;
    if header.format != CHECKPOINT_FORMAT {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint format {:?}",
            header.format
        )));
    }
    let cls_vocab = Vocab::load(dir.join("classifier.vocab"))?;
    let gen_vocab = Vocab::load(dir.join("generator.vocab"))?;
    let mut bundle = ModelBundle::new(header.config, header.meta, cls_vocab, gen_vocab, 0)?;
    bundle
        .classifier
        .params
        .load_named(&read_tensors(&dir.join("classifier.params.json"))?)?;
    bundle
        .generator
        .params
        .load_named(&read_tensors(&dir.join("generator.params.json"))?)?;
    Ok((bundle, header.extra))
}
