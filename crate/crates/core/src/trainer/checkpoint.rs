//! Binary checkpoint files.
//!
//! Layout: magic, u32 version, u64 header length, JSON header, every
//! parameter and optimizer-moment tensor as little-endian f32 in a fixed
//! order, then a SHA-256 digest of all preceding bytes.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Adam, TrainConfig, TrainState};
use crate::error::{Error, Result};
use crate::model::Parameters;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"IVC1";
pub const CHECKPOINT_VERSION: u32 = 1;

const DIGEST_LEN: usize = 32;

#[derive(Serialize, Deserialize)]
struct Header {
    iteration: u64,
    config: TrainConfig,
    adam_steps: [u64; 3],
    tensor_lengths: Vec<usize>,
}

fn optimizers(state: &TrainState) -> [&Adam; 3] {
    [&state.opt_generator, &state.opt_d_target, &state.opt_d_source]
}

fn all_tensors(state: &TrainState) -> Vec<&[f32]> {
    let mut out = state.generator.tensors();
    out.extend(state.d_target.tensors());
    out.extend(state.d_source.tensors());
    for opt in optimizers(state) {
        out.extend(opt.m.iter().map(|t| t.as_slice()));
        out.extend(opt.v.iter().map(|t| t.as_slice()));
    }
    out
}

fn all_tensors_mut(state: &mut TrainState) -> Vec<&mut [f32]> {
    let mut out = state.generator.tensors_mut();
    out.extend(state.d_target.tensors_mut());
    out.extend(state.d_source.tensors_mut());
    for opt in [&mut state.opt_generator, &mut state.opt_d_target, &mut state.opt_d_source] {
        out.extend(opt.m.iter_mut().map(|t| t.as_mut_slice()));
        out.extend(opt.v.iter_mut().map(|t| t.as_mut_slice()));
    }
    out
}

pub fn encode_checkpoint(state: &TrainState) -> Vec<u8> {
    let tensors = all_tensors(state);
    let header = Header {
        iteration: state.iteration,
        config: state.config.clone(),
        adam_steps: optimizers(state).map(|o| o.step),
        tensor_lengths: tensors.iter().map(|t| t.len()).collect(),
    };
    let json = serde_json::to_vec(&header).expect("checkpoint header serializes");
    let floats: usize = header.tensor_lengths.iter().sum();
    let mut buf = Vec::with_capacity(16 + json.len() + 4 * floats + DIGEST_LEN);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for t in tensors {
        for v in t {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    buf
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<TrainState> {
    if bytes.len() < 16 + DIGEST_LEN || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic or too short)".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Checkpoint("checksum mismatch, file is corrupted".into()));
    }
    let json_len = u64::from_le_bytes(body[8..16].try_into().unwrap()) as usize;
    let json = body
        .get(16..16 + json_len)
        .ok_or_else(|| Error::Checkpoint("header length exceeds file size".into()))?;
    let header: Header = serde_json::from_slice(json)
        .map_err(|e| Error::Checkpoint(format!("unreadable header: {e}")))?;
    let mut state = TrainState::new(&header.config)?;
    state.iteration = header.iteration;
    state.opt_generator.step = header.adam_steps[0];
    state.opt_d_target.step = header.adam_steps[1];
    state.opt_d_source.step = header.adam_steps[2];

    let mut payload = &body[16 + json_len..];
    let mut targets = all_tensors_mut(&mut state);
    let lengths: Vec<usize> = targets.iter().map(|t| t.len()).collect();
    if lengths != header.tensor_lengths {
        return Err(Error::Checkpoint("tensor layout does not match the stored configuration".into()));
    }
    if payload.len() != 4 * lengths.iter().sum::<usize>() {
        return Err(Error::Checkpoint(format!(
            "payload holds {} bytes, layout needs {}",
            payload.len(),
            4 * lengths.iter().sum::<usize>()
        )));
    }
    for t in targets.iter_mut() {
        let (chunk, rest) = payload.split_at(4 * t.len());
        for (dst, src) in t.iter_mut().zip(chunk.chunks_exact(4)) {
            *dst = f32::from_le_bytes([src[0], src[1], src[2], src[3]]);
        }
        payload = rest;
    }
    Ok(state)
}

pub fn save_checkpoint(state: &TrainState, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_checkpoint(state)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<TrainState> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::super::tests::tiny_config;
    use super::*;

    fn perturbed_state() -> TrainState {
        let mut s = TrainState::new(&tiny_config(true)).unwrap();
        s.iteration = 17;
        s.opt_generator.step = 17;
        s.opt_generator.m[0][3] = 0.25;
        s.opt_d_source.v[1][0] = 1e-7;
        s.generator.encoder[0].bias[0] = -0.125;
        s
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let s = perturbed_state();
        let back = decode_checkpoint(&encode_checkpoint(&s)).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.generator_hash(), s.generator_hash());
    }

    #[test]
    fn wrong_version_rejected() {
        let mut bytes = encode_checkpoint(&perturbed_state());
        bytes[4] = 9;
        match decode_checkpoint(&bytes) {
            Err(Error::Checkpoint(msg)) => assert!(msg.contains("version 9"), "{msg}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn corruption_detected() {
        let mut bytes = encode_checkpoint(&perturbed_state());
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        assert!(matches!(decode_checkpoint(&bytes), Err(Error::Checkpoint(_))));
        assert!(matches!(decode_checkpoint(b"IVC1"), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ivc");
        let s = perturbed_state();
        save_checkpoint(&s, &path).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), s);
    }
}
