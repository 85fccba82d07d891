//! Self-describing checkpoint directories.
//!
//! Layout: `config.json` (the full [`ModelConfig`]), `params.bin` (named
//! f64 tensors, little-endian), `vocab.txt` (vocabulary copy). Training
//! state (optimizer moments, step counter) is layered on top by the trainer
//! and lives in the same directory.

use std::io::{Read, Write};
use std::path::Path;

use crate::latex_norm::Vocabulary;

use super::{Model, ModelConfig, ModelError};

const PARAMS_MAGIC: &[u8; 4] = b"MRTP";
const PARAMS_VERSION: u32 = 1;

pub const CONFIG_FILE: &str = "config.json";
pub const PARAMS_FILE: &str = "params.bin";
pub const VOCAB_FILE: &str = "vocab.txt";

/// Writes `config.json`, `params.bin` and `vocab.txt` under `dir`.
pub fn save_model(dir: &Path, model: &Model, vocab: &Vocabulary) -> Result<(), ModelError> {
    std::fs::create_dir_all(dir)?;
    let mut cfg_json = serde_json::to_string_pretty(&model.config)?;
    cfg_json.push('\n');
    std::fs::write(dir.join(CONFIG_FILE), cfg_json)?;
    vocab
        .save(&dir.join(VOCAB_FILE))
        .map_err(|e| ModelError::CorruptCheckpoint(format!("vocabulary write failed: {e}")))?;
    write_params(&dir.join(PARAMS_FILE), model)?;
    Ok(())
}

/// Rebuilds the model and vocabulary from a checkpoint directory.
pub fn load_model(dir: &Path) -> Result<(Model, Vocabulary), ModelError> {
    let cfg_text = std::fs::read_to_string(dir.join(CONFIG_FILE))
        .map_err(|e| ModelError::CorruptCheckpoint(format!("missing {CONFIG_FILE}: {e}")))?;
    let config: ModelConfig = serde_json::from_str(&cfg_text)
        .map_err(|e| ModelError::CorruptCheckpoint(format!("bad {CONFIG_FILE}: {e}")))?;
    let vocab = Vocabulary::load(&dir.join(VOCAB_FILE))
        .map_err(|e| ModelError::CorruptCheckpoint(format!("bad {VOCAB_FILE}: {e}")))?;
    if vocab.size() as usize != config.vocab_size {
        return Err(ModelError::CorruptCheckpoint(format!(
            "vocabulary size {} does not match config vocab_size {}",
            vocab.size(),
            config.vocab_size
        )));
    }
    let mut model = Model::new(config, 0)?;
    read_params(&dir.join(PARAMS_FILE), &mut model)?;
    Ok((model, vocab))
}

fn write_params(path: &Path, model: &Model) -> Result<(), ModelError> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(PARAMS_MAGIC);
    buf.extend_from_slice(&PARAMS_VERSION.to_le_bytes());
    let params = model.param_values();
    buf.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for p in params {
        let name = p.name.as_bytes();
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name);
        buf.push(p.value.ndim() as u8);
        for &d in p.value.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in p.value.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

fn read_params(path: &Path, model: &mut Model) -> Result<(), ModelError> {
    let corrupt = |m: String| ModelError::CorruptCheckpoint(m);
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| corrupt(format!("missing {PARAMS_FILE}: {e}")))?
        .read_to_end(&mut bytes)?;
    let mut cursor = 0usize;
    let take = |cursor: &mut usize, n: usize| -> Result<&[u8], ModelError> {
        if *cursor + n > bytes.len() {
            return Err(ModelError::CorruptCheckpoint("truncated params".into()));
        }
        let s = &bytes[*cursor..*cursor + n];
        *cursor += n;
        Ok(s)
    };
    if take(&mut cursor, 4)? != PARAMS_MAGIC {
        return Err(corrupt("bad magic".into()));
    }
    let version = u32::from_le_bytes(take(&mut cursor, 4)?.try_into().unwrap());
    if version != PARAMS_VERSION {
        return Err(corrupt(format!("unsupported params version {version}")));
    }
    let count = u64::from_le_bytes(take(&mut cursor, 8)?.try_into().unwrap()) as usize;
    if count != model.param_values().len() {
        return Err(corrupt(format!(
            "parameter count {count} does not match model ({})",
            model.param_values().len()
        )));
    }
    for idx in 0..count {
        let name_len = u16::from_le_bytes(take(&mut cursor, 2)?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(take(&mut cursor, name_len)?)
            .map_err(|_| corrupt("non-utf8 parameter name".into()))?
            .to_string();
        let ndim = take(&mut cursor, 1)?[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(u64::from_le_bytes(take(&mut cursor, 8)?.try_into().unwrap()) as usize);
        }
        let expected = &model.param_values()[idx];
        if expected.name != name || expected.value.shape() != shape.as_slice() {
            return Err(corrupt(format!(
                "parameter {idx} is {name} {shape:?}, expected {} {:?}",
                expected.name,
                expected.value.shape()
            )));
        }
        let n: usize = shape.iter().product();
        let raw = take(&mut cursor, n * 8)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let arr = crate::tensor::Array::from_shape_vec(ndarray::IxDyn(&shape), data).unwrap();
        model.set_param(idx, arr);
    }
    if cursor != bytes.len() {
        return Err(corrupt("trailing bytes after parameters".into()));
    }
    Ok(())
}
