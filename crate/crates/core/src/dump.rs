//! Model dumps: input tokens with offsets, attention tensors and
//! per-tool attributions for one example.
//!
//! Layout inside a dump directory, for example id `ID`:
//!
//! * `ID.tokens.json` — `[{"text": "int", "span": [0, 3]}, {"text": "<s>", "span": null}, ...]`,
//!   spans are character offsets into the normalized code
//! * `ID.attention.bin` — `"ATTN"`, then `u32` layers, heads, n (little-endian),
//!   then `layers * heads * n * n` little-endian `f32` in layer, head, row, column order
//! * `ID.attention.<layer>.bin` — the same format with one layer per file,
//!   used when `ID.attention.bin` is absent
//! * `ID.attributions.json` — `{"Saliency": [..n floats], ...}`

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{s, Array2, Array4, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::align::InputToken;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"ATTN";
pub const HEADER_LEN: usize = 16;
/// Attention rows further than this from summing to one are reported.
pub const STOCHASTIC_TOLERANCE: f64 = 1e-3;

/// Attention weights, `layers x heads x n x n`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTensor {
    data: Array4<f32>,
}

impl AttentionTensor {
    pub fn new(data: Array4<f32>) -> Result<Self> {
        let (_, _, rows, cols) = data.dim();
        if rows != cols {
            return Err(Error::NotSquare { rows, cols });
        }
        Ok(AttentionTensor { data })
    }

    pub fn layers(&self) -> usize {
        self.data.dim().0
    }

    pub fn heads(&self) -> usize {
        self.data.dim().1
    }

    /// Sequence length n.
    pub fn len(&self) -> usize {
        self.data.dim().2
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn shape(&self) -> (usize, usize, usize, usize) {
        self.data.dim()
    }

    pub fn data(&self) -> &Array4<f32> {
        &self.data
    }

    pub fn head(&self, layer: usize, head: usize) -> ArrayView2<'_, f32> {
        self.data.slice(s![layer, head, .., ..])
    }

    pub fn head_f64(&self, layer: usize, head: usize) -> Array2<f64> {
        self.head(layer, head).mapv(f64::from)
    }

    /// Head-averaged attention of one layer.
    pub fn layer_mean(&self, layer: usize) -> Array2<f64> {
        let n = self.len();
        let mut acc = Array2::<f64>::zeros((n, n));
        for h in 0..self.heads() {
            acc.zip_mut_with(&self.head(layer, h), |a, b| *a += f64::from(*b));
        }
        acc / self.heads().max(1) as f64
    }

    /// Largest |row sum - 1| over all layers, heads and rows.
    pub fn max_row_deviation(&self) -> f64 {
        self.data
            .lanes(Axis(3))
            .into_iter()
            .map(|row| (row.iter().map(|v| f64::from(*v)).sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

fn corrupt(path: &Path, reason: impl Into<String>) -> Error {
    Error::CorruptTensor {
        path: path.to_owned(),
        reason: reason.into(),
    }
}

pub fn encode_attention(tensor: &AttentionTensor) -> Vec<u8> {
    let (l, h, n, _) = tensor.shape();
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * tensor.data.len());
    out.extend_from_slice(MAGIC);
    for dim in [l, h, n] {
        out.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    for v in tensor.data.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_attention(bytes: &[u8], path: &Path) -> Result<AttentionTensor> {
    if bytes.len() < HEADER_LEN {
        return Err(corrupt(path, format!("{} bytes is shorter than the header", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(corrupt(path, "bad magic"));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let (l, h, n) = (dim(0), dim(1), dim(2));
    let expected = [l, h, n, n]
        .iter()
        .try_fold(4usize, |acc, d| acc.checked_mul(*d))
        .and_then(|b| b.checked_add(HEADER_LEN))
        .ok_or_else(|| corrupt(path, "dimensions overflow"))?;
    if bytes.len() != expected {
        return Err(corrupt(
            path,
            format!("expected {expected} bytes for {l}x{h}x{n}x{n}, found {}", bytes.len()),
        ));
    }
    let values: Vec<f32> = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let data = Array4::from_shape_vec((l, h, n, n), values).expect("length checked above");
    AttentionTensor::new(data)
}

pub fn read_attention(path: &Path) -> Result<AttentionTensor> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_owned()));
    }
    decode_attention(&fs::read(path)?, path)
}

pub fn write_attention(path: &Path, tensor: &AttentionTensor) -> Result<()> {
    let mut file = fs::File::create(path)?;
    file.write_all(&encode_attention(tensor))?;
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TokenEntry {
    text: String,
    span: Option<[usize; 2]>,
}

pub fn tokens_path(dir: &Path, example_id: &str) -> PathBuf {
    dir.join(format!("{example_id}.tokens.json"))
}

pub fn attention_path(dir: &Path, example_id: &str) -> PathBuf {
    dir.join(format!("{example_id}.attention.bin"))
}

pub fn layer_attention_path(dir: &Path, example_id: &str, layer: usize) -> PathBuf {
    dir.join(format!("{example_id}.attention.{layer}.bin"))
}

pub fn attributions_path(dir: &Path, example_id: &str) -> PathBuf {
    dir.join(format!("{example_id}.attributions.json"))
}

pub fn read_input_tokens(path: &Path) -> Result<Vec<InputToken>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_owned()));
    }
    let entries: Vec<TokenEntry> = serde_json::from_str(&fs::read_to_string(path)?)?;
    entries
        .into_iter()
        .enumerate()
        .map(|(i, e)| match e.span {
            Some([s, end]) if s > end => Err(Error::InvalidDump {
                path: path.to_owned(),
                reason: format!("token {i} has span {s}..{end}"),
            }),
            span => Ok(InputToken::new(i, e.text, span.map(|[s, end]| s..end))),
        })
        .collect()
}

pub fn write_input_tokens(path: &Path, tokens: &[InputToken]) -> Result<()> {
    let entries: Vec<TokenEntry> = tokens
        .iter()
        .map(|t| TokenEntry {
            text: t.text.clone(),
            span: t.char_span.as_ref().map(|r| [r.start, r.end]),
        })
        .collect();
    fs::write(path, serde_json::to_string(&entries)?)?;
    Ok(())
}

/// Everything a model run produced for one example.
#[derive(Debug, Clone)]
pub struct ModelDump {
    pub example_id: String,
    pub tokens: Vec<InputToken>,
    pub attention: Option<AttentionTensor>,
    pub attributions: BTreeMap<String, Vec<f64>>,
    dir: PathBuf,
}

impl ModelDump {
    pub fn new(
        example_id: impl Into<String>,
        tokens: Vec<InputToken>,
        attention: Option<AttentionTensor>,
        attributions: BTreeMap<String, Vec<f64>>,
    ) -> Result<Self> {
        let dump = ModelDump {
            example_id: example_id.into(),
            tokens,
            attention,
            attributions,
            dir: PathBuf::new(),
        };
        dump.validate()?;
        Ok(dump)
    }

    fn validate(&self) -> Result<()> {
        let n = self.tokens.len();
        let invalid = |reason: String| Error::InvalidDump {
            path: tokens_path(&self.dir, &self.example_id),
            reason,
        };
        if let Some(att) = &self.attention {
            if att.len() != n {
                return Err(invalid(format!("attention is {0}x{0} but there are {n} tokens", att.len())));
            }
        }
        for (tool, scores) in &self.attributions {
            if scores.len() != n {
                return Err(invalid(format!(
                    "attribution {tool:?} has {} scores for {n} tokens",
                    scores.len()
                )));
            }
        }
        Ok(())
    }

    /// The attention tensor, or `MissingFile` naming where it was expected.
    pub fn attention(&self) -> Result<&AttentionTensor> {
        self.attention
            .as_ref()
            .ok_or_else(|| Error::MissingFile(attention_path(&self.dir, &self.example_id)))
    }
}

fn read_layers(dir: &Path, example_id: &str) -> Result<Option<AttentionTensor>> {
    let single = attention_path(dir, example_id);
    if single.exists() {
        return read_attention(&single).map(Some);
    }
    let mut layers = Vec::new();
    loop {
        let path = layer_attention_path(dir, example_id, layers.len());
        if !path.exists() {
            break;
        }
        let t = read_attention(&path)?;
        if t.layers() != 1 {
            return Err(corrupt(&path, format!("per-layer file holds {} layers", t.layers())));
        }
        if let Some(first) = layers.first() {
            let first: &AttentionTensor = first;
            if first.shape() != t.shape() {
                return Err(corrupt(&path, "layer shape differs from layer 0"));
            }
        }
        layers.push(t);
    }
    if layers.is_empty() {
        return Ok(None);
    }
    let views: Vec<_> = layers.iter().map(|t| t.data.view()).collect();
    let data = ndarray::concatenate(Axis(0), &views).expect("shapes checked above");
    Ok(Some(AttentionTensor { data }))
}

pub fn load_dump(dir: &Path, example_id: &str) -> Result<ModelDump> {
    let tokens = read_input_tokens(&tokens_path(dir, example_id))?;
    let attention = read_layers(dir, example_id)?;
    let attr_path = attributions_path(dir, example_id);
    let attributions = if attr_path.exists() {
        serde_json::from_str(&fs::read_to_string(&attr_path)?)?
    } else {
        BTreeMap::new()
    };
    let dump = ModelDump {
        example_id: example_id.to_owned(),
        tokens,
        attention,
        attributions,
        dir: dir.to_owned(),
    };
    dump.validate()?;
    if let Some(att) = &dump.attention {
        let dev = att.max_row_deviation();
        if dev > STOCHASTIC_TOLERANCE {
            log::warn!("{example_id}: attention rows deviate from 1 by up to {dev:.3e}");
        }
    }
    Ok(dump)
}

pub fn write_dump(dir: &Path, dump: &ModelDump, split_layers: bool) -> Result<()> {
    fs::create_dir_all(dir)?;
    let id = &dump.example_id;
    write_input_tokens(&tokens_path(dir, id), &dump.tokens)?;
    if let Some(att) = &dump.attention {
        if split_layers {
            for l in 0..att.layers() {
                let layer = att.data.slice(s![l..l + 1, .., .., ..]).to_owned();
                write_attention(&layer_attention_path(dir, id, l), &AttentionTensor { data: layer })?;
            }
        } else {
            write_attention(&attention_path(dir, id), att)?;
        }
    }
    if !dump.attributions.is_empty() {
        fs::write(attributions_path(dir, id), serde_json::to_string(&dump.attributions)?)?;
    }
    Ok(())
}
