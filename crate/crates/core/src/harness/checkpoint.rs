use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::container::{frame_header, read_header, CHECKPOINT_MAGIC};
use crate::error::{data_err, Result};
use crate::imaging::ChannelStats;
use crate::model::{Branch, CsDasa, ModelConfig};
use crate::numerics::Tensor;

const REFERENCE_BLOCK: &str = "attention.reference";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrained,
    Adapted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub stage: Stage,
    pub source_id: String,
    pub target_id: Option<String>,
    pub seed: u64,
    pub epochs_run: usize,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
    pub final_ce: f64,
    pub final_mmd: Option<f64>,
}

/// Trained model plus everything needed to run it on new data.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: CsDasa,
    /// Source-domain statistics used to standardise every input.
    pub stats: ChannelStats,
    /// Source-branch features of the last training batch `[m, c, w, h]`,
    /// the attention counterpart at inference. Absent without attention.
    pub reference: Option<Tensor>,
    pub meta: CheckpointMeta,
}

impl Checkpoint {
    /// Branch used for inference: the source branch before adaptation, the
    /// target branch after.
    pub fn eval_branch(&self) -> Branch {
        match self.meta.stage {
            Stage::Pretrained => Branch::Source,
            Stage::Adapted => Branch::Target,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Block {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    stats: ChannelStats,
    meta: CheckpointMeta,
    blocks: Vec<Block>,
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let mut blocks: Vec<Block> = ckpt
        .model
        .store
        .iter()
        .map(|(_, p)| Block { name: p.name.clone(), shape: p.value.shape().to_vec() })
        .collect();
    if let Some(r) = &ckpt.reference {
        blocks.push(Block { name: REFERENCE_BLOCK.to_string(), shape: r.shape().to_vec() });
    }
    let header = Header { config: ckpt.model.config.clone(), stats: ckpt.stats.clone(), meta: ckpt.meta.clone(), blocks };
    let mut out = frame_header(CHECKPOINT_MAGIC, &serde_json::to_vec(&header)?);
    let values = ckpt.model.store.iter().map(|(_, p)| &p.value).chain(ckpt.reference.as_ref());
    for t in values {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let (json, mut offset) = read_header(bytes, CHECKPOINT_MAGIC)?;
    let header: Header =
        serde_json::from_slice(json).map_err(|e| data_err!("checkpoint header at offset 16 is not valid: {e}"))?;
    let mut model = CsDasa::new(header.config, 0)?;
    let mut reference = None;
    let expected = model.store.len();
    let mut seen = 0;
    for block in &header.blocks {
        let numel: usize = block.shape.iter().product();
        let end = offset + numel * 8;
        if end > bytes.len() {
            return Err(data_err!("block {:?} at offset {offset} runs past end of file", block.name));
        }
        let data: Vec<f64> = bytes[offset..end]
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        let tensor = Tensor::new(block.shape.clone(), data)
            .map_err(|e| data_err!("block {:?} at offset {offset}: {e}", block.name))?;
        if block.name == REFERENCE_BLOCK {
            reference = Some(tensor);
        } else {
            let id = model
                .store
                .find(&block.name)
                .ok_or_else(|| data_err!("checkpoint block {:?} is not a model parameter", block.name))?;
            let p = model.store.get_mut(id);
            if p.value.shape() != tensor.shape() {
                return Err(data_err!(
                    "parameter {:?} has shape {:?} in file, model expects {:?}",
                    block.name,
                    tensor.shape(),
                    p.value.shape()
                ));
            }
            p.value = tensor;
            seen += 1;
        }
        offset = end;
    }
    if seen != expected {
        return Err(data_err!("checkpoint holds {seen} parameters, model has {expected}"));
    }
    if offset != bytes.len() {
        return Err(data_err!("{} trailing bytes after offset {offset}", bytes.len() - offset));
    }
    Ok(Checkpoint { model, stats: header.stats, reference, meta: header.meta })
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    fs::write(path, encode_checkpoint(ckpt)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&fs::read(path)?)
}
