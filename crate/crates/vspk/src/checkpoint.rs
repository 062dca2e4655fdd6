//! Versioned binary persistence for trained models.
//!
//! Layout: magic `VSPK` | u32 little-endian format version | u64
//! little-endian metadata length | UTF-8 JSON metadata | little-endian
//! 32-bit float blobs, concatenated in the order the metadata names them.
//! The metadata carries every shape, so a reader validates the whole blob
//! table before touching a single float, and a bad file never yields a
//! partial model.
//!
//! Training math runs at 64 bits; files store 32. The declared contract is
//! round-trip exactness at 32-bit precision.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::audio::Framing;
use crate::error::{Error, Result};
use crate::losses::CenterBank;
use crate::network::{ClassifierHead, EmbeddingNet, NetConfig, NetParams, CONV_KERNEL};
use crate::tensor::{RunningStats, Tensor};
use crate::trainer::{EpochRecord, TrainConfig};

pub const MAGIC: [u8; 4] = *b"VSPK";
pub const FORMAT_VERSION: u32 = 1;

/// Bytes before the metadata: magic, version, metadata length.
const HEADER_LEN: usize = 16;

/// A trained model with everything needed to resume evaluation: the
/// embedding network (parameters and batchnorm running statistics), the
/// classifier head, the center bank, and the run that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub net: EmbeddingNet,
    pub head: ClassifierHead,
    pub centers: CenterBank,
    pub train_config: TrainConfig,
    /// Audio shaping the model was trained with; enrollment and probes
    /// must reuse it for shapes to line up.
    pub framing: Framing,
    /// Clip length the model consumes, in seconds.
    pub clip_duration_s: f64,
    /// Epochs completed when this snapshot was taken.
    pub epoch: usize,
    /// Final history record, when at least one epoch ran.
    pub last_record: Option<EpochRecord>,
}

#[derive(Serialize, Deserialize)]
struct BlobInfo {
    name: String,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Metadata {
    net_config: NetConfig,
    train_config: TrainConfig,
    framing: Framing,
    clip_duration_s: f64,
    num_speakers: usize,
    center_update_rate: f64,
    epoch: usize,
    last_record: Option<EpochRecord>,
    blobs: Vec<BlobInfo>,
}

/// Blob table implied by a configuration: names, shapes, declared order.
fn expected_blobs(config: &NetConfig, num_speakers: usize) -> Vec<(String, Vec<usize>)> {
    let [kd, kh, kw] = CONV_KERNEL;
    let e = config.embedding_dim;
    let mut out = Vec::new();
    let mut cin = config.input[3];
    for (i, block) in config.blocks.iter().enumerate() {
        let co = block.channels;
        out.push((format!("block{i}.kernels"), vec![co, kd, kh, kw, cin]));
        out.push((format!("block{i}.bias"), vec![co]));
        out.push((format!("block{i}.gamma"), vec![co]));
        out.push((format!("block{i}.beta"), vec![co]));
        cin = co;
    }
    let last = config.blocks.last().expect("validated config").channels;
    out.push(("dense.weight".into(), vec![last, e]));
    out.push(("dense.bias".into(), vec![e]));
    out.push(("head.weight".into(), vec![num_speakers, e]));
    out.push(("head.bias".into(), vec![num_speakers]));
    out.push(("centers".into(), vec![num_speakers, e]));
    for (i, block) in config.blocks.iter().enumerate() {
        out.push((format!("block{i}.running_mean"), vec![block.channels]));
        out.push((format!("block{i}.running_var"), vec![block.channels]));
    }
    out
}

/// Flat f64 views of every blob, in the declared order.
fn blob_slices(checkpoint: &Checkpoint) -> Vec<(String, Vec<f64>)> {
    let mut out: Vec<(String, Vec<f64>)> = checkpoint
        .net
        .params
        .named()
        .into_iter()
        .map(|(name, t)| (name, t.data().to_vec()))
        .collect();
    out.push(("head.weight".into(), checkpoint.head.weight.data().to_vec()));
    out.push(("head.bias".into(), checkpoint.head.bias.data().to_vec()));
    out.push(("centers".into(), checkpoint.centers.centers().data().to_vec()));
    for (i, stats) in checkpoint.net.running.iter().enumerate() {
        out.push((format!("block{i}.running_mean"), stats.mean.clone()));
        out.push((format!("block{i}.running_var"), stats.var.clone()));
    }
    out
}

/// Serializes a checkpoint. Refuses non-finite values rather than writing
/// a file that cannot be loaded back.
pub fn to_bytes(checkpoint: &Checkpoint) -> Result<Vec<u8>> {
    checkpoint.net.config.trace_shapes()?;
    let blobs = blob_slices(checkpoint);
    for (name, data) in &blobs {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "checkpoint blob {name} holds a non-finite value"
            )));
        }
    }
    let metadata = Metadata {
        net_config: checkpoint.net.config.clone(),
        train_config: checkpoint.train_config.clone(),
        framing: checkpoint.framing,
        clip_duration_s: checkpoint.clip_duration_s,
        num_speakers: checkpoint.head.num_speakers(),
        center_update_rate: checkpoint.centers.update_rate(),
        epoch: checkpoint.epoch,
        last_record: checkpoint.last_record,
        blobs: blobs
            .iter()
            .map(|(name, data)| BlobInfo {
                name: name.clone(),
                len: data.len(),
            })
            .collect(),
    };
    let meta_bytes =
        serde_json::to_vec(&metadata).map_err(|e| Error::Format(format!("metadata: {e}")))?;
    let payload: usize = blobs.iter().map(|(_, d)| d.len() * 4).sum();
    let mut bytes = Vec::with_capacity(HEADER_LEN + meta_bytes.len() + payload);
    bytes.extend_from_slice(&MAGIC);
    bytes.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(meta_bytes.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&meta_bytes);
    for (_, data) in &blobs {
        for &v in data {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(bytes)
}

/// Parses a checkpoint, validating magic, version, the metadata, and the
/// complete blob table before constructing anything.
pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated(format!(
            "checkpoint header wants {HEADER_LEN} bytes, file has {}",
            bytes.len()
        )));
    }
    if bytes[..4] != MAGIC {
        return Err(Error::Format(format!(
            "bad checkpoint magic {:02x?}",
            &bytes[..4]
        )));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let meta_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let blobs_start = HEADER_LEN
        .checked_add(meta_len)
        .ok_or_else(|| Error::Format("metadata length overflows".into()))?;
    if bytes.len() < blobs_start {
        return Err(Error::Truncated(format!(
            "metadata wants {meta_len} bytes, only {} remain",
            bytes.len() - HEADER_LEN
        )));
    }
    let metadata: Metadata = serde_json::from_slice(&bytes[HEADER_LEN..blobs_start])
        .map_err(|e| Error::Format(format!("checkpoint metadata: {e}")))?;
    metadata.net_config.trace_shapes()?;
    if metadata.num_speakers == 0 {
        return Err(Error::Format("metadata declares zero speakers".into()));
    }

    let expected = expected_blobs(&metadata.net_config, metadata.num_speakers);
    if metadata.blobs.len() != expected.len() {
        return Err(Error::Format(format!(
            "blob table lists {} entries, configuration implies {}",
            metadata.blobs.len(),
            expected.len()
        )));
    }
    for (info, (name, shape)) in metadata.blobs.iter().zip(&expected) {
        let want: usize = shape.iter().product();
        if &info.name != name || info.len != want {
            return Err(Error::Format(format!(
                "blob table entry {}[{}] does not match expected {}[{}]",
                info.name, info.len, name, want
            )));
        }
    }

    let mut offset = blobs_start;
    let mut tensors = Vec::with_capacity(expected.len());
    for (name, shape) in &expected {
        let want: usize = shape.iter().product::<usize>() * 4;
        let end = offset
            .checked_add(want)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| {
                Error::Truncated(format!(
                    "blob {name} wants {want} bytes at offset {offset}, file ends at {}",
                    bytes.len()
                ))
            })?;
        let data: Vec<f64> = bytes[offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "checkpoint blob {name} holds a non-finite value"
            )));
        }
        tensors.push(Tensor::new(shape.clone(), data)?);
        offset = end;
    }
    if offset != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after the last blob",
            bytes.len() - offset
        )));
    }

    // Blob order: 4 per block, dense pair, head pair, centers, stats pairs.
    let mut it = tensors.into_iter();
    let n_blocks = metadata.net_config.blocks.len();
    let mut kernels = Vec::with_capacity(n_blocks);
    let mut conv_biases = Vec::with_capacity(n_blocks);
    let mut gammas = Vec::with_capacity(n_blocks);
    let mut betas = Vec::with_capacity(n_blocks);
    for _ in 0..n_blocks {
        kernels.push(it.next().expect("validated table"));
        conv_biases.push(it.next().expect("validated table"));
        gammas.push(it.next().expect("validated table"));
        betas.push(it.next().expect("validated table"));
    }
    let dense_w = it.next().expect("validated table");
    let dense_b = it.next().expect("validated table");
    let head = ClassifierHead {
        weight: it.next().expect("validated table"),
        bias: it.next().expect("validated table"),
    };
    let centers = CenterBank::from_centers(
        it.next().expect("validated table"),
        metadata.center_update_rate,
    )?;
    let mut running = Vec::with_capacity(n_blocks);
    for _ in 0..n_blocks {
        let mean = it.next().expect("validated table");
        let var = it.next().expect("validated table");
        running.push(RunningStats {
            mean: mean.data().to_vec(),
            var: var.data().to_vec(),
        });
    }

    Ok(Checkpoint {
        net: EmbeddingNet {
            config: metadata.net_config,
            params: NetParams {
                kernels,
                conv_biases,
                gammas,
                betas,
                dense_w,
                dense_b,
            },
            running,
        },
        head,
        centers,
        train_config: metadata.train_config,
        framing: metadata.framing,
        clip_duration_s: metadata.clip_duration_s,
        epoch: metadata.epoch,
        last_record: metadata.last_record,
    })
}

pub fn save_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<()> {
    std::fs::write(path, to_bytes(checkpoint)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}
