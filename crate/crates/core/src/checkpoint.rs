//! On-disk container for models and adapter sets: a directory holding
//! `manifest.json` and one blob of concatenated tensor encodings.
//!
//! Dense tensors use the tensor encoding (rank, dims, `f32` data); 4-bit
//! tensors use packed codes followed by scales. Each manifest entry carries
//! the CRC-64 of its byte range. Saving is deterministic, so a load followed
//! by a save reproduces both files byte for byte.

use std::collections::BTreeMap;
use std::fs;
use std::io::Cursor;
use std::path::Path;
use std::sync::Arc;

use crc::{Crc, CRC_64_XZ};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{SiteId, SiteKind, TransformerConfig, TransformerModel, Weight};
use crate::peft::{
    AdapterLayer, BaseMode, LoraAdapter, Method, PeftAdapter, PeftSet, PrefixAdapter,
};
use crate::quantize::QuantizedMatrix;
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "tensors.bin";

const CRC64: Crc<u64> = Crc::<u64>::new(&CRC_64_XZ);

pub fn crc64(bytes: &[u8]) -> u64 {
    CRC64.checksum(bytes)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    Q4,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub block_size: Option<usize>,
    pub offset: u64,
    pub length: u64,
    pub crc64: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointKind {
    Model,
    Adapters,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterSite {
    pub site: SiteId,
    /// LoRA scale; absent for other methods.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale: Option<f32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterInfo {
    pub method: Method,
    pub base_mode: BaseMode,
    pub sites: Vec<AdapterSite>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub kind: CheckpointKind,
    /// Model architecture; for adapter sets, the base they were built for.
    pub config: TransformerConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adapters: Option<AdapterInfo>,
    pub tensors: Vec<TensorEntry>,
}

struct BlobWriter {
    blob: Vec<u8>,
    entries: Vec<TensorEntry>,
}

impl BlobWriter {
    fn new() -> Self {
        BlobWriter {
            blob: Vec::new(),
            entries: Vec::new(),
        }
    }

    fn push(
        &mut self,
        name: String,
        dtype: DType,
        shape: Vec<usize>,
        block_size: Option<usize>,
        bytes: &[u8],
    ) {
        self.entries.push(TensorEntry {
            name,
            dtype,
            shape,
            block_size,
            offset: self.blob.len() as u64,
            length: bytes.len() as u64,
            crc64: crc64(bytes),
        });
        self.blob.extend_from_slice(bytes);
    }

    fn push_weight(&mut self, name: &str, w: &Weight) {
        match w {
            Weight::F32(t) => self.push(
                name.to_string(),
                DType::F32,
                t.shape().to_vec(),
                None,
                &t.to_bytes(),
            ),
            Weight::Q4(q) => {
                let (r, c) = q.shape();
                self.push(
                    name.to_string(),
                    DType::Q4,
                    vec![r, c],
                    Some(q.block_size()),
                    &q.to_bytes(),
                )
            }
        }
    }
}

/// Manifest and blob bytes exactly as [`save_model`] writes them.
pub fn encode_model(model: &TransformerModel) -> (Vec<u8>, Vec<u8>) {
    let mut w = BlobWriter::new();
    for (name, weight) in model.params() {
        w.push_weight(name, weight);
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        kind: CheckpointKind::Model,
        config: model.config().clone(),
        adapters: None,
        tensors: w.entries,
    };
    (manifest_bytes(&manifest), w.blob)
}

/// Manifest and blob bytes exactly as [`save_adapters`] writes them. Tensor
/// names are `{site}.{part}`, e.g. `layers.0.q.lora_a`.
pub fn encode_adapters(peft: &PeftSet, base: &TransformerConfig) -> (Vec<u8>, Vec<u8>) {
    let mut w = BlobWriter::new();
    let mut sites = Vec::new();
    for (site, adapter) in peft.adapters() {
        for (part, t) in adapter.tensors() {
            w.push(
                format!("{site}.{part}"),
                DType::F32,
                t.shape().to_vec(),
                None,
                &t.to_bytes(),
            );
        }
        let scale = match adapter {
            PeftAdapter::Lora(l) => Some(l.scale),
            _ => None,
        };
        sites.push(AdapterSite { site: *site, scale });
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        kind: CheckpointKind::Adapters,
        config: base.clone(),
        adapters: Some(AdapterInfo {
            method: peft.method(),
            base_mode: peft.base_mode(),
            sites,
        }),
        tensors: w.entries,
    };
    (manifest_bytes(&manifest), w.blob)
}

fn manifest_bytes(m: &Manifest) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(m).expect("manifest serializes");
    out.push(b'\n');
    out
}

fn write_dir(dir: &Path, manifest: &[u8], blob: &[u8]) -> Result<()> {
    fs::create_dir_all(dir)?;
    // blob first, so a present manifest implies a complete blob
    for (file, bytes) in [(BLOB_FILE, blob), (MANIFEST_FILE, manifest)] {
        let tmp = dir.join(format!(".{file}.tmp"));
        fs::write(&tmp, bytes)?;
        fs::rename(&tmp, dir.join(file))?;
    }
    Ok(())
}

pub fn save_model(dir: &Path, model: &TransformerModel) -> Result<()> {
    let (m, b) = encode_model(model);
    write_dir(dir, &m, &b)
}

pub fn save_adapters(dir: &Path, peft: &PeftSet, base: &TransformerConfig) -> Result<()> {
    let (m, b) = encode_adapters(peft, base);
    write_dir(dir, &m, &b)
}

/// Parses a manifest and checks every entry against the blob.
pub fn decode_manifest(manifest: &[u8], blob: &[u8]) -> Result<Manifest> {
    let m: Manifest = serde_json::from_slice(manifest)
        .map_err(|e| Error::Checkpoint(format!("bad manifest: {e}")))?;
    if m.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {} (expected {FORMAT_VERSION})",
            m.format_version
        )));
    }
    m.config.validate()?;
    let mut expected_offset = 0u64;
    for e in &m.tensors {
        if e.offset != expected_offset {
            return Err(Error::Checkpoint(format!(
                "tensor {} is not contiguous in the blob",
                e.name
            )));
        }
        let end = e
            .offset
            .checked_add(e.length)
            .filter(|&end| end <= blob.len() as u64);
        let Some(end) = end else {
            return Err(Error::Checkpoint(format!(
                "tensor {} runs past the end of the blob",
                e.name
            )));
        };
        let bytes = &blob[e.offset as usize..end as usize];
        if crc64(bytes) != e.crc64 {
            return Err(Error::Checkpoint(format!(
                "checksum mismatch for tensor {}",
                e.name
            )));
        }
        expected_offset = end;
    }
    if expected_offset != blob.len() as u64 {
        return Err(Error::Checkpoint(
            "blob holds bytes no tensor claims".into(),
        ));
    }
    Ok(m)
}

fn slice<'a>(blob: &'a [u8], e: &TensorEntry) -> &'a [u8] {
    &blob[e.offset as usize..(e.offset + e.length) as usize]
}

fn decode_f32(blob: &[u8], e: &TensorEntry) -> Result<Tensor<f32>> {
    let bytes = slice(blob, e);
    let mut cur = Cursor::new(bytes);
    let t = Tensor::<f32>::read_from(&mut cur)
        .map_err(|err| Error::Checkpoint(format!("tensor {}: {err}", e.name)))?;
    if cur.position() as usize != bytes.len() || t.shape() != e.shape.as_slice() {
        return Err(Error::Checkpoint(format!(
            "tensor {} does not match its manifest entry",
            e.name
        )));
    }
    Ok(t)
}

fn decode_weight(blob: &[u8], e: &TensorEntry) -> Result<Weight> {
    match e.dtype {
        DType::F32 => Ok(Weight::F32(decode_f32(blob, e)?)),
        DType::Q4 => {
            let [rows, cols] = e.shape[..] else {
                return Err(Error::Checkpoint(format!(
                    "q4 tensor {} must be 2-D",
                    e.name
                )));
            };
            let bs = e.block_size.ok_or_else(|| {
                Error::Checkpoint(format!("q4 tensor {} lacks block_size", e.name))
            })?;
            Ok(Weight::Q4(Arc::new(QuantizedMatrix::from_bytes(
                rows,
                cols,
                bs,
                slice(blob, e),
            )?)))
        }
    }
}

fn read_dir(dir: &Path) -> Result<(Manifest, Vec<u8>)> {
    let manifest = fs::read(dir.join(MANIFEST_FILE))?;
    let blob = fs::read(dir.join(BLOB_FILE))?;
    let m = decode_manifest(&manifest, &blob)?;
    Ok((m, blob))
}

pub fn decode_model(manifest: &[u8], blob: &[u8]) -> Result<TransformerModel> {
    let m = decode_manifest(manifest, blob)?;
    model_from(m, blob)
}

fn model_from(m: Manifest, blob: &[u8]) -> Result<TransformerModel> {
    if m.kind != CheckpointKind::Model {
        return Err(Error::Checkpoint(
            "checkpoint holds adapters, not a model".into(),
        ));
    }
    let mut params = BTreeMap::new();
    for e in &m.tensors {
        if params
            .insert(e.name.clone(), decode_weight(blob, e)?)
            .is_some()
        {
            return Err(Error::Checkpoint(format!("duplicate tensor {}", e.name)));
        }
    }
    TransformerModel::from_params(m.config, params)
}

pub fn load_model(dir: &Path) -> Result<TransformerModel> {
    let (m, blob) = read_dir(dir)?;
    model_from(m, &blob)
}

/// Adapter set and the base config it was built for.
pub fn decode_adapters(manifest: &[u8], blob: &[u8]) -> Result<(PeftSet, TransformerConfig)> {
    let m = decode_manifest(manifest, blob)?;
    adapters_from(m, blob)
}

fn adapters_from(m: Manifest, blob: &[u8]) -> Result<(PeftSet, TransformerConfig)> {
    let info = match (m.kind, m.adapters) {
        (CheckpointKind::Adapters, Some(info)) => info,
        _ => {
            return Err(Error::Checkpoint(
                "checkpoint holds a model, not adapters".into(),
            ))
        }
    };
    let by_name: BTreeMap<&str, &TensorEntry> =
        m.tensors.iter().map(|e| (e.name.as_str(), e)).collect();
    if by_name.len() != m.tensors.len() || m.tensors.len() != 2 * info.sites.len() {
        return Err(Error::Checkpoint(
            "adapter tensors do not match the site list".into(),
        ));
    }
    let tensor = |site: &SiteId, part: &str| -> Result<Tensor<f32>> {
        let name = format!("{site}.{part}");
        let e = by_name
            .get(name.as_str())
            .ok_or_else(|| Error::Checkpoint(format!("missing adapter tensor {name}")))?;
        if e.dtype != DType::F32 {
            return Err(Error::Checkpoint(format!(
                "adapter tensor {name} must be f32"
            )));
        }
        decode_f32(blob, e)
    };
    let mut set = PeftSet::new(info.method, info.base_mode)?;
    for AdapterSite { site, scale } in &info.sites {
        let adapter = match (info.method, site.kind) {
            (Method::Lora, SiteKind::Linear(_)) => PeftAdapter::Lora(LoraAdapter {
                site: *site,
                a: tensor(site, "lora_a")?,
                b: tensor(site, "lora_b")?,
                scale: scale
                    .ok_or_else(|| Error::Checkpoint(format!("LoRA site {site} lacks a scale")))?,
            }),
            (Method::Adapter, SiteKind::AfterAttention | SiteKind::AfterFfn) => {
                PeftAdapter::Adapter(AdapterLayer {
                    site: *site,
                    down: tensor(site, "down")?,
                    up: tensor(site, "up")?,
                })
            }
            (Method::Prefix, SiteKind::Prefix) => PeftAdapter::Prefix(PrefixAdapter {
                layer: site.layer,
                pk: tensor(site, "pk")?,
                pv: tensor(site, "pv")?,
            }),
            _ => {
                return Err(Error::Checkpoint(format!(
                    "site {site} cannot hold a {} adapter",
                    info.method
                )))
            }
        };
        set.insert(adapter)?;
    }
    Ok((set, m.config))
}

pub fn load_adapters(dir: &Path) -> Result<(PeftSet, TransformerConfig)> {
    let (m, blob) = read_dir(dir)?;
    adapters_from(m, &blob)
}

/// Reads only the manifest, after verifying the blob.
pub fn load_manifest(dir: &Path) -> Result<Manifest> {
    Ok(read_dir(dir)?.0)
}
