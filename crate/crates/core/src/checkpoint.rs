// SPDX-License-Identifier: MIT OR Apache-2.0

//! Binary model checkpoints.
//!
//! Layout: the 8-byte magic `CARLACKP`, a little-endian `u32` format version,
//! a little-endian `u64` header length, the JSON header, then every tensor's
//! values back to back as little-endian floats of the header's dtype.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::{Classifier, Encoder, EncoderConfig};
use crate::error::{CarlaError, Result};
use crate::nn::{Parameterized, Scalar};

const MAGIC: &[u8; 8] = b"CARLACKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretext,
    Selfsup,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub stage: Stage,
    pub seed: u64,
    pub epoch: usize,
    pub dtype: String,
    pub encoder: EncoderConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classes: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub majority_class: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_counts: Option<Vec<usize>>,
    pub tensors: Vec<TensorEntry>,
}

/// Training metadata stored alongside the weights.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub epoch: usize,
    pub majority_class: Option<usize>,
    pub class_counts: Option<Vec<usize>>,
}

fn collect_tensors<S: Scalar, M: Parameterized<S>>(model: &mut M) -> Vec<(TensorEntry, Vec<S>)> {
    let mut out = Vec::new();
    model.visit_params("", &mut |name, p| {
        out.push((
            TensorEntry {
                name: name.to_string(),
                shape: p.shape.clone(),
            },
            p.value.clone(),
        ))
    });
    model.visit_buffers("", &mut |name, b| {
        out.push((
            TensorEntry {
                name: name.to_string(),
                shape: vec![b.len()],
            },
            b.clone(),
        ))
    });
    out
}

fn encode<S: Scalar, M: Parameterized<S>>(
    model: &mut M,
    stage: Stage,
    encoder: EncoderConfig,
    classes: Option<usize>,
    meta: &CheckpointMeta,
) -> Result<Vec<u8>> {
    let tensors = collect_tensors(model);
    let header = CheckpointHeader {
        format_version: FORMAT_VERSION,
        stage,
        seed: meta.seed,
        epoch: meta.epoch,
        dtype: S::DTYPE.to_string(),
        encoder,
        classes,
        majority_class: meta.majority_class,
        class_counts: meta.class_counts.clone(),
        tensors: tensors.iter().map(|(e, _)| e.clone()).collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, values) in &tensors {
        out.extend(S::to_le_bytes_vec(values));
    }
    Ok(out)
}

fn decode_header(bytes: &[u8]) -> Result<(CheckpointHeader, &[u8])> {
    let bad = |msg: &str| CarlaError::Checkpoint(msg.to_string());
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(CarlaError::Checkpoint(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = &bytes[20..];
    if body.len() < len {
        return Err(bad("truncated header"));
    }
    let header: CheckpointHeader = serde_json::from_slice(&body[..len])
        .map_err(|e| CarlaError::Checkpoint(format!("bad header: {e}")))?;
    Ok((header, &body[len..]))
}

fn element_size(dtype: &str) -> Result<usize> {
    match dtype {
        "f32" => Ok(4),
        "f64" => Ok(8),
        other => Err(CarlaError::Checkpoint(format!("unknown dtype {other}"))),
    }
}

/// Decodes stored values into `S`, converting when the stored dtype differs.
fn decode_values<S: Scalar>(dtype: &str, bytes: &[u8]) -> Vec<S> {
    if dtype == S::DTYPE {
        return S::from_le_bytes_slice(bytes);
    }
    let wide: Vec<f64> = match dtype {
        "f32" => f32::from_le_bytes_slice(bytes).into_iter().map(f64::from).collect(),
        _ => f64::from_le_bytes_slice(bytes),
    };
    wide.into_iter().map(S::from_f64_lossy).collect()
}

fn restore<S: Scalar, M: Parameterized<S>>(model: &mut M, header: &CheckpointHeader, data: &[u8]) -> Result<()> {
    let size = element_size(&header.dtype)?;
    let mut offset = 0;
    let mut stored = std::collections::HashMap::new();
    for t in &header.tensors {
        let n: usize = t.shape.iter().product();
        let end = offset + n * size;
        if end > data.len() {
            return Err(CarlaError::Checkpoint(format!("tensor {} is truncated", t.name)));
        }
        stored.insert(t.name.clone(), (t.shape.clone(), &data[offset..end]));
        offset = end;
    }
    if offset != data.len() {
        return Err(CarlaError::Checkpoint("trailing bytes after tensors".into()));
    }
    let mut problem: Option<String> = None;
    let mut seen = 0;
    model.visit_params("", &mut |name, p| match stored.get(name) {
        Some((shape, raw)) if *shape == p.shape => {
            p.value = decode_values(&header.dtype, raw);
            seen += 1;
        }
        Some(_) => problem = Some(format!("shape mismatch for {name}")),
        None => problem = Some(format!("missing tensor {name}")),
    });
    model.visit_buffers("", &mut |name, b| match stored.get(name) {
        Some((shape, raw)) if *shape == vec![b.len()] => {
            *b = decode_values(&header.dtype, raw);
            seen += 1;
        }
        Some(_) => problem = Some(format!("shape mismatch for {name}")),
        None => problem = Some(format!("missing tensor {name}")),
    });
    if let Some(p) = problem {
        return Err(CarlaError::Checkpoint(p));
    }
    if seen != stored.len() {
        return Err(CarlaError::Checkpoint("checkpoint has unexpected tensors".into()));
    }
    Ok(())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| CarlaError::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| CarlaError::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| CarlaError::io(path, e))
}

pub fn encoder_to_bytes<S: Scalar>(encoder: &Encoder<S>, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    let config = encoder.config().clone();
    encode(&mut encoder.clone(), Stage::Pretext, config, None, meta)
}

pub fn classifier_to_bytes<S: Scalar>(classifier: &Classifier<S>, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    let config = classifier.encoder.config().clone();
    let classes = Some(classifier.classes());
    encode(&mut classifier.clone(), Stage::Selfsup, config, classes, meta)
}

pub fn read_header(path: &Path) -> Result<CheckpointHeader> {
    Ok(decode_header(&read_file(path)?)?.0)
}

pub fn encoder_from_bytes<S: Scalar>(bytes: &[u8]) -> Result<(Encoder<S>, CheckpointHeader)> {
    let (header, data) = decode_header(bytes)?;
    if header.stage != Stage::Pretext {
        return Err(CarlaError::Checkpoint(format!(
            "expected a pretext checkpoint, found {:?}",
            header.stage
        )));
    }
    let mut encoder = Encoder::new(header.encoder.clone(), 0)?;
    restore(&mut encoder, &header, data)?;
    Ok((encoder, header))
}

pub fn classifier_from_bytes<S: Scalar>(bytes: &[u8]) -> Result<(Classifier<S>, CheckpointHeader)> {
    let (header, data) = decode_header(bytes)?;
    let classes = match (header.stage, header.classes) {
        (Stage::Selfsup, Some(c)) => c,
        _ => {
            return Err(CarlaError::Checkpoint(
                "expected a self-supervised checkpoint with a class count".into(),
            ))
        }
    };
    let mut classifier = Classifier::new(Encoder::new(header.encoder.clone(), 0)?, classes, 0)?;
    restore(&mut classifier, &header, data)?;
    Ok((classifier, header))
}

pub fn save_encoder<S: Scalar>(path: &Path, encoder: &Encoder<S>, meta: &CheckpointMeta) -> Result<()> {
    write_file(path, &encoder_to_bytes(encoder, meta)?)
}

pub fn save_classifier<S: Scalar>(path: &Path, classifier: &Classifier<S>, meta: &CheckpointMeta) -> Result<()> {
    write_file(path, &classifier_to_bytes(classifier, meta)?)
}

pub fn load_encoder<S: Scalar>(path: &Path) -> Result<(Encoder<S>, CheckpointHeader)> {
    encoder_from_bytes(&read_file(path)?)
}

pub fn load_classifier<S: Scalar>(path: &Path) -> Result<(Classifier<S>, CheckpointHeader)> {
    classifier_from_bytes(&read_file(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> EncoderConfig {
        EncoderConfig {
            channels: vec![3, 4],
            rep_dim: 5,
            input_dims: 2,
            window_size: 12,
            ..Default::default()
        }
    }

    #[test]
    fn encoder_round_trip_is_bit_exact() {
        let mut enc = Encoder::<f32>::new(tiny(), 9).unwrap();
        // Touch the running statistics so buffers are not at their defaults.
        let x = crate::nn::Tensor3::from_vec(2, 2, 12, (0..48).map(|i| (i as f32).sin()).collect());
        enc.forward_train(&x).unwrap();
        let meta = CheckpointMeta {
            seed: 9,
            epoch: 3,
            ..Default::default()
        };
        let bytes = encoder_to_bytes(&enc, &meta).unwrap();
        let (back, header) = encoder_from_bytes::<f32>(&bytes).unwrap();
        assert_eq!(back, enc);
        assert_eq!(header.epoch, 3);
        assert_eq!(header.stage, Stage::Pretext);
        assert_eq!(encoder_to_bytes(&back, &meta).unwrap(), bytes);
    }

    #[test]
    fn classifier_round_trip_keeps_majority() {
        let clf = Classifier::new(Encoder::<f64>::new(tiny(), 1).unwrap(), 4, 2).unwrap();
        let meta = CheckpointMeta {
            seed: 1,
            epoch: 10,
            majority_class: Some(2),
            class_counts: Some(vec![1, 0, 7, 2]),
        };
        let bytes = classifier_to_bytes(&clf, &meta).unwrap();
        let (back, header) = classifier_from_bytes::<f64>(&bytes).unwrap();
        assert_eq!(back, clf);
        assert_eq!(header.majority_class, Some(2));
        assert_eq!(header.class_counts, Some(vec![1, 0, 7, 2]));
        assert!(encoder_from_bytes::<f64>(&bytes).is_err());
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let enc = Encoder::<f32>::new(tiny(), 0).unwrap();
        let bytes = encoder_to_bytes(&enc, &CheckpointMeta::default()).unwrap();
        assert!(encoder_from_bytes::<f32>(&bytes[..bytes.len() - 1]).is_err());
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(encoder_from_bytes::<f32>(&wrong).is_err());
    }
}
