//! Checkpoint container.
//!
//! Layout: 8-byte magic `SKCCKPT1`, little-endian u32 manifest length, the
//! JSON manifest, then one matrix container per tensor in manifest order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::linalg::io::{decode_matrices, encode_matrices};
use crate::linalg::{Matrix, RngStream};

use super::{BlockConfig, ConvMixerParams, ConvMixerSpec, ModelParams, ModelSpec, VitError};

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"SKCCKPT1";
const FORMAT_VERSION: u32 = 1;
const MAX_MANIFEST: usize = 16 << 20;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    /// `"vit"` or `"convmixer"`.
    pub kind: String,
    pub spec: serde_json::Value,
    /// Per-layer block configuration (ViT only).
    #[serde(default)]
    pub blocks: Vec<BlockConfig>,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub tensors: Vec<Matrix>,
}

impl Checkpoint {
    fn from_named(kind: &str, spec: serde_json::Value, blocks: Vec<BlockConfig>, named: Vec<(String, Matrix)>) -> Self {
        let tensors: Vec<TensorEntry> = named
            .iter()
            .map(|(name, m)| TensorEntry {
                name: name.clone(),
                rows: m.rows(),
                cols: m.cols(),
            })
            .collect();
        Self {
            manifest: CheckpointManifest {
                format_version: FORMAT_VERSION,
                kind: kind.into(),
                spec,
                blocks,
                tensors,
            },
            tensors: named.into_iter().map(|(_, m)| m).collect(),
        }
    }

    fn expect_kind(&self, kind: &str) -> Result<(), VitError> {
        if self.manifest.kind != kind {
            return Err(VitError::Checkpoint(format!(
                "expected a {kind} checkpoint, found {}",
                self.manifest.kind
            )));
        }
        Ok(())
    }

    /// Copies tensors into `slots`, checking names and shapes against `expected`.
    /// Rejects a spec whose parameters could not fit in the stored tensors,
    /// before anything is allocated for it.
    fn ensure_holds(&self, params: Option<usize>) -> Result<(), VitError> {
        let stored: usize = self.tensors.iter().map(Matrix::len).sum();
        match params {
            Some(n) if n <= stored => Ok(()),
            _ => Err(VitError::Checkpoint(format!(
                "spec needs {} parameters, checkpoint stores {stored}",
                params.map_or("too many".to_string(), |n| n.to_string())
            ))),
        }
    }

    fn fill(&self, expected: &[(String, (usize, usize))], slots: Vec<&mut Matrix>) -> Result<(), VitError> {
        if expected.len() != self.tensors.len() {
            return Err(VitError::Checkpoint(format!(
                "model has {} tensors, checkpoint has {}",
                expected.len(),
                self.tensors.len()
            )));
        }
        for (((name, shape), entry), (slot, value)) in expected
            .iter()
            .zip(&self.manifest.tensors)
            .zip(slots.into_iter().zip(&self.tensors))
        {
            if *name != entry.name || *shape != value.shape() {
                return Err(VitError::Checkpoint(format!(
                    "tensor {} ({}x{}) does not match model tensor {name} ({}x{})",
                    entry.name,
                    value.rows(),
                    value.cols(),
                    shape.0,
                    shape.1
                )));
            }
            *slot = value.clone();
        }
        Ok(())
    }
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Vec<u8> {
    let manifest = serde_json::to_vec(&ck.manifest).expect("manifest serializes");
    let mut out = Vec::with_capacity(12 + manifest.len());
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
    out.extend_from_slice(&manifest);
    out.extend_from_slice(&encode_matrices(&ck.tensors));
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint, VitError> {
    if bytes.len() < 12 || bytes[..8] != CHECKPOINT_MAGIC {
        return Err(VitError::Checkpoint("missing checkpoint magic".into()));
    }
    let len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    if len > MAX_MANIFEST || 12 + len > bytes.len() {
        return Err(VitError::Checkpoint(format!(
            "manifest length {len} exceeds the {} bytes available",
            bytes.len() - 12
        )));
    }
    let manifest: CheckpointManifest = serde_json::from_slice(&bytes[12..12 + len])
        .map_err(|e| VitError::Checkpoint(format!("manifest: {e}")))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(VitError::Checkpoint(format!(
            "unsupported format version {}",
            manifest.format_version
        )));
    }
    let payload = &bytes[12 + len..];
    let tensors = if payload.is_empty() {
        Vec::new()
    } else {
        decode_matrices(payload)?
    };
    if tensors.len() != manifest.tensors.len() {
        return Err(VitError::Checkpoint(format!(
            "manifest lists {} tensors, payload holds {}",
            manifest.tensors.len(),
            tensors.len()
        )));
    }
    for (entry, t) in manifest.tensors.iter().zip(&tensors) {
        if (entry.rows, entry.cols) != t.shape() {
            return Err(VitError::Checkpoint(format!(
                "tensor {} declared {}x{}, stored {}x{}",
                entry.name,
                entry.rows,
                entry.cols,
                t.rows(),
                t.cols()
            )));
        }
    }
    Ok(Checkpoint { manifest, tensors })
}

pub fn write_checkpoint(path: &Path, ck: &Checkpoint) -> Result<(), VitError> {
    std::fs::write(path, encode_checkpoint(ck))
        .map_err(|e| VitError::Checkpoint(format!("{}: {e}", path.display())))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint, VitError> {
    let bytes = std::fs::read(path).map_err(|e| VitError::Checkpoint(format!("{}: {e}", path.display())))?;
    decode_checkpoint(&bytes)
}

impl ModelParams {
    pub fn to_checkpoint(&self) -> Checkpoint {
        let named = self
            .params()
            .into_iter()
            .map(|p| (p.name, p.value.clone()))
            .collect();
        let spec = serde_json::to_value(&self.spec).expect("spec serializes");
        let blocks = self.layers.iter().map(|l| l.config).collect();
        Checkpoint::from_named("vit", spec, blocks, named)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, VitError> {
        ck.expect_kind("vit")?;
        let spec: ModelSpec = serde_json::from_value(ck.manifest.spec.clone())
            .map_err(|e| VitError::Checkpoint(format!("spec: {e}")))?;
        ck.ensure_holds(spec.param_count())?;
        let mut model = ModelParams::init(&spec, RngStream::new(0, 0))?;
        if !ck.manifest.blocks.is_empty() {
            if ck.manifest.blocks.len() != model.layers.len() {
                return Err(VitError::Checkpoint(format!(
                    "{} block configs for {} layers",
                    ck.manifest.blocks.len(),
                    model.layers.len()
                )));
            }
            for (l, cfg) in model.layers.iter_mut().zip(&ck.manifest.blocks) {
                l.config = *cfg;
            }
        }
        let expected: Vec<_> = model
            .params()
            .iter()
            .map(|p| (p.name.clone(), p.value.shape()))
            .collect();
        ck.fill(&expected, model.params_mut())?;
        Ok(model)
    }
}

impl ConvMixerParams {
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut named: Vec<(String, Matrix)> = self
            .params()
            .into_iter()
            .map(|(n, m, _)| (n, m.clone()))
            .collect();
        named.extend(self.buffers().into_iter().map(|(n, m)| (n, m.clone())));
        let spec = serde_json::to_value(&self.spec).expect("spec serializes");
        Checkpoint::from_named("convmixer", spec, Vec::new(), named)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, VitError> {
        ck.expect_kind("convmixer")?;
        let spec: ConvMixerSpec = serde_json::from_value(ck.manifest.spec.clone())
            .map_err(|e| VitError::Checkpoint(format!("spec: {e}")))?;
        ck.ensure_holds(spec.param_count())?;
        let mut model = ConvMixerParams::init(&spec, RngStream::new(0, 0))?;
        let mut expected: Vec<_> = model
            .params()
            .iter()
            .map(|(n, m, _)| (n.clone(), m.shape()))
            .collect();
        expected.extend(model.buffers().iter().map(|(n, m)| (n.clone(), m.shape())));
        let (mut slots, buffers) = model.slots_mut();
        slots.extend(buffers);
        ck.fill(&expected, slots)?;
        Ok(model)
    }
}
