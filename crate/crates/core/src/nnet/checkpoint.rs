//! Binary checkpoints.
//!
//! Layout: the 8-byte magic `TSTBTCKP`, a little-endian `u32` version, a
//! `u64` header length, a JSON header, then every tensor as little-endian
//! `f64` values in header order, followed by the Adam moments when present.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Vocabulary;
use crate::error::{Error, Result};

use super::model::{ModelConfig, Seq2SeqModel};
use super::optim::{Adam, AdamConfig};
use super::params::Layout;

const MAGIC: &[u8; 8] = b"TSTBTCKP";
const VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Seq2SeqModel,
    pub vocab: Option<Vocabulary>,
    pub optimizer: Option<Adam>,
    pub step: u64,
    pub dev_perplexity: f64,
}

#[derive(Serialize, Deserialize)]
struct TensorHeader {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct AdamHeader {
    config: AdamConfig,
    step: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    vocab: Option<Vec<String>>,
    step: u64,
    dev_perplexity: f64,
    adam: Option<AdamHeader>,
    tensors: Vec<TensorHeader>,
}

fn fmt_err(path: &Path, what: &str) -> Error {
    Error::Format(format!("{}: {what}", path.display()))
}

fn write_f64s(out: &mut Vec<u8>, xs: &[f64]) {
    out.reserve(xs.len() * 8);
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let layout = self.model.layout();
        let header = Header {
            config: self.model.config.clone(),
            vocab: self.vocab.as_ref().map(|v| v.tokens().to_vec()),
            step: self.step,
            dev_perplexity: self.dev_perplexity,
            adam: self.optimizer.as_ref().map(|a| AdamHeader { config: a.config, step: a.step }),
            tensors: layout
                .specs
                .iter()
                .map(|s| TensorHeader { name: s.name.clone(), shape: s.shape.clone() })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
        buf.extend_from_slice(&json);
        for s in &layout.specs {
            write_f64s(&mut buf, &self.model.params[s.range()]);
        }
        if let Some(a) = &self.optimizer {
            write_f64s(&mut buf, &a.m);
            write_f64s(&mut buf, &a.v);
        }
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(fmt_err(path, "not a checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(fmt_err(path, &format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = bytes.get(20..20 + hlen).ok_or_else(|| fmt_err(path, "truncated header"))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| fmt_err(path, &e.to_string()))?;
        header.config.validate()?;

        let layout = Layout::new(&header.config);
        if layout.specs.len() != header.tensors.len()
            || layout.specs.iter().zip(&header.tensors).any(|(s, t)| s.name != t.name || s.shape != t.shape)
        {
            return Err(fmt_err(path, "tensor names or shapes do not match the configuration"));
        }
        let n = layout.total;
        let moments = if header.adam.is_some() { 2 * n } else { 0 };
        let data = &bytes[20 + hlen..];
        if data.len() != (n + moments) * 8 {
            return Err(fmt_err(path, "tensor data has the wrong length"));
        }
        let floats: Vec<f64> = data.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let params = floats[..n].to_vec();
        let optimizer = header.adam.map(|h| Adam {
            config: h.config,
            step: h.step,
            m: floats[n..2 * n].to_vec(),
            v: floats[2 * n..].to_vec(),
        });
        let vocab = header.vocab.map(Vocabulary::from_token_list).transpose()?;
        if let Some(v) = &vocab {
            if v.len() != header.config.vocab_size {
                return Err(Error::VocabMismatch(format!(
                    "checkpoint vocabulary has {} entries, model expects {}",
                    v.len(),
                    header.config.vocab_size
                )));
            }
        }
        Ok(Checkpoint {
            model: Seq2SeqModel::assemble(header.config, layout, params),
            vocab,
            optimizer,
            step: header.step,
            dev_perplexity: header.dev_perplexity,
        })
    }
}
