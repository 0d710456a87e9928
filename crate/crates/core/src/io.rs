//! File formats and corpus ingestion.
//!
//! Weight file (`bklv1`): one newline-terminated JSON header carrying
//! `format` and every `ModelConfig` field, followed by little-endian `f32`
//! data for each tensor in canonical order (embedding; per layer `wq, wk,
//! wv, wo, w_in, w_out, norm1, norm2`; final norm). All other artifacts are
//! pretty-printed JSON with a `format` field.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::config::{ModelConfig, BOS};
use crate::error::{Error, Result};
use crate::model::{tensor_shapes, LayerWeights, Model, Weights};
use crate::tensor::Matrix;

pub const WEIGHTS_FORMAT: &str = "bklv1";
pub const MANIFEST_FORMAT: &str = "bklv-manifest-1";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_sha256(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}

fn header_json(config: &ModelConfig) -> String {
    let mut map = Map::new();
    map.insert("format".into(), Value::from(WEIGHTS_FORMAT));
    if let Value::Object(fields) = serde_json::to_value(config).expect("config serializes") {
        map.extend(fields);
    }
    Value::Object(map).to_string()
}

pub fn encode_weights(model: &Model) -> Vec<u8> {
    let mut out = header_json(model.config()).into_bytes();
    out.push(b'\n');
    for t in model.weights().tensors() {
        for v in t {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// SHA-256 of the model's weight-file encoding.
pub fn model_checksum(model: &Model) -> String {
    sha256_hex(&encode_weights(model))
}

fn field<'a>(map: &'a Map<String, Value>, name: &str) -> Result<&'a Value> {
    map.get(name)
        .ok_or_else(|| Error::format(name, "missing from weight header"))
}

fn count_field(map: &Map<String, Value>, name: &str) -> Result<usize> {
    field(map, name)?
        .as_u64()
        .map(|v| v as usize)
        .ok_or_else(|| Error::format(name, "expected a non-negative integer"))
}

pub fn parse_weights_header(line: &str) -> Result<ModelConfig> {
    let value: Value = serde_json::from_str(line)
        .map_err(|e| Error::format("header", format!("not a JSON object: {e}")))?;
    let map = value
        .as_object()
        .ok_or_else(|| Error::format("header", "not a JSON object"))?;
    match field(map, "format")?.as_str() {
        Some(WEIGHTS_FORMAT) => {}
        other => {
            return Err(Error::format(
                "format",
                format!("expected \"{WEIGHTS_FORMAT}\", found {other:?}"),
            ))
        }
    }
    let config = ModelConfig {
        num_layers: count_field(map, "num_layers")?,
        num_q_heads: count_field(map, "num_q_heads")?,
        num_kv_heads: count_field(map, "num_kv_heads")?,
        head_dim: count_field(map, "head_dim")?,
        d_model: count_field(map, "d_model")?,
        d_ff: count_field(map, "d_ff")?,
        vocab_size: count_field(map, "vocab_size")?,
        max_context: count_field(map, "max_context")?,
        rope_theta: field(map, "rope_theta")?
            .as_f64()
            .ok_or_else(|| Error::format("rope_theta", "expected a number"))?,
        seed: field(map, "seed")?
            .as_u64()
            .ok_or_else(|| Error::format("seed", "expected a non-negative integer"))?,
    };
    config.validate()?;
    Ok(config)
}

pub fn decode_weights(bytes: &[u8]) -> Result<Model> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::format("header", "no newline-terminated header"))?;
    let header = std::str::from_utf8(&bytes[..nl])
        .map_err(|_| Error::format("header", "not UTF-8"))?;
    let config = parse_weights_header(header)?;
    let body = &bytes[nl + 1..];
    let shapes = tensor_shapes(&config);
    let expected: usize = shapes.iter().map(|(r, c)| r * c * 4).sum();
    if body.len() != expected {
        return Err(Error::format(
            "tensors",
            format!("{} data bytes, expected {expected}", body.len()),
        ));
    }
    let mut floats = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
    let mut tensors = shapes.iter().map(|&(r, c)| {
        let data: Vec<f32> = floats.by_ref().take(r * c).collect();
        Matrix::from_vec(r, c, data).expect("sized by shape table")
    });
    let mut next = || tensors.next().expect("shape table covers all tensors");
    let embedding = next();
    let layers = (0..config.num_layers)
        .map(|_| LayerWeights {
            wq: next(),
            wk: next(),
            wv: next(),
            wo: next(),
            w_in: next(),
            w_out: next(),
            norm1: next().as_slice().to_vec(),
            norm2: next().as_slice().to_vec(),
        })
        .collect();
    let final_norm = next().as_slice().to_vec();
    Model::from_weights(
        config,
        Weights {
            embedding,
            layers,
            final_norm,
        },
    )
}

/// Write via a sibling temporary file and rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::Input(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp-{}", name.to_string_lossy(), std::process::id()));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path).inspect_err(|_| {
        let _ = fs::remove_file(&tmp);
    })?;
    Ok(())
}

pub fn save_model(model: &Model, path: &Path) -> Result<()> {
    write_atomic(path, &encode_weights(model))
}

pub fn load_model(path: &Path) -> Result<Model> {
    decode_weights(&fs::read(path)?)
}

pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

pub fn save_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    write_atomic(path, to_json(value)?.as_bytes())
}

/// Reads a JSON artifact and checks its `format` field.
pub fn load_json<T: DeserializeOwned>(path: &Path, format: &str) -> Result<T> {
    let text = fs::read_to_string(path)?;
    let value: Value = serde_json::from_str(&text)?;
    match value.get("format").and_then(Value::as_str) {
        Some(f) if f == format => {}
        other => {
            return Err(Error::format(
                "format",
                format!("{}: expected \"{format}\", found {other:?}", path.display()),
            ))
        }
    }
    Ok(serde_json::from_value(value)?)
}

/// Byte-level tokens, each document BOS-prefixed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub sources: Vec<PathBuf>,
    pub token_ids: Vec<u32>,
    /// Start offset of each document in `token_ids`.
    pub boundaries: Vec<usize>,
}

pub fn encode_text(text: &[u8]) -> Vec<u32> {
    std::iter::once(BOS)
        .chain(text.iter().map(|&b| u32::from(b)))
        .collect()
}

/// Bytes back to text; BOS and other non-byte ids are skipped.
pub fn decode_tokens(tokens: &[u32]) -> String {
    let bytes: Vec<u8> = tokens
        .iter()
        .filter(|&&t| t < 256)
        .map(|&t| t as u8)
        .collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

impl Corpus {
    pub fn from_documents<'a>(docs: impl IntoIterator<Item = &'a [u8]>) -> Self {
        let mut token_ids = Vec::new();
        let mut boundaries = Vec::new();
        for d in docs {
            boundaries.push(token_ids.len());
            token_ids.extend(encode_text(d));
        }
        Self {
            sources: Vec::new(),
            token_ids,
            boundaries,
        }
    }

    /// One document per file.
    pub fn from_files<P: AsRef<Path>>(paths: &[P]) -> Result<Self> {
        if paths.is_empty() {
            return Err(Error::Input("no corpus files given".into()));
        }
        let docs = paths
            .iter()
            .map(|p| fs::read(p.as_ref()))
            .collect::<std::io::Result<Vec<_>>>()?;
        let mut c = Self::from_documents(docs.iter().map(Vec::as_slice));
        c.sources = paths.iter().map(|p| p.as_ref().to_path_buf()).collect();
        Ok(c)
    }

    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileRecord {
    pub path: PathBuf,
    pub sha256: String,
}

impl FileRecord {
    pub fn of(path: &Path) -> Result<Self> {
        Ok(Self {
            path: path.to_path_buf(),
            sha256: file_sha256(path)?,
        })
    }
}

/// Provenance of one command run: what went in and what came out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format: String,
    pub command: String,
    pub config_hash: Option<String>,
    pub model_checksum: Option<String>,
    pub inputs: Vec<FileRecord>,
    pub outputs: Vec<FileRecord>,
    pub started_unix: u64,
    pub finished_unix: u64,
}

pub fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

pub fn config_hash(config: &ModelConfig) -> String {
    sha256_hex(header_json(config).as_bytes())
}

impl RunManifest {
    pub fn path_for(output: &Path) -> PathBuf {
        let mut s = output.as_os_str().to_owned();
        s.push(".manifest.json");
        PathBuf::from(s)
    }

    /// True when every recorded file still hashes to its recorded checksum.
    pub fn verify(&self) -> Result<bool> {
        for r in self.inputs.iter().chain(&self.outputs) {
            if file_sha256(&r.path)? != r.sha256 {
                return Ok(false);
            }
        }
        Ok(true)
    }
}
