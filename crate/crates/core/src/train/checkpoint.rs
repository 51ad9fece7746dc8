//! Checkpoint files: `AIRCKPT1`, big-endian u32 header length, a JSON
//! header, then little-endian f32 parameters in manifest order followed by
//! the two Adam moment vectors of the same length.

use std::fs;
use std::path::Path;

use byteorder::{BigEndian, ByteOrder, LittleEndian, ReadBytesExt, WriteBytesExt};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{AirError, Result};

use super::{Adam, ArchConfig, ModelParams, TrainConfig, TrainState};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"AIRCKPT1";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: (usize, usize),
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    architecture: ArchConfig,
    train_config: TrainConfig,
    epoch: usize,
    adam_step: u64,
    rng: ChaCha8Rng,
    manifest: Vec<ManifestEntry>,
}

fn manifest(params: &ModelParams<f32>) -> Vec<ManifestEntry> {
    let mut offset = 0;
    params
        .manifest()
        .into_iter()
        .map(|(name, shape)| {
            let e = ManifestEntry { name, shape, offset };
            offset += shape.0 * shape.1;
            e
        })
        .collect()
}

pub fn encode_checkpoint(state: &TrainState) -> Result<Vec<u8>> {
    let header = Header {
        format_version: FORMAT_VERSION,
        architecture: state.params.arch().clone(),
        train_config: state.config.clone(),
        epoch: state.epoch,
        adam_step: state.optimizer.step,
        rng: state.rng.clone(),
        manifest: manifest(&state.params),
    };
    let json = serde_json::to_vec(&header)?;
    let n = state.params.param_count();
    let mut out = Vec::with_capacity(12 + json.len() + 12 * n);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.write_u32::<BigEndian>(json.len() as u32)?;
    out.extend_from_slice(&json);
    let flat = state.params.flatten();
    for v in flat
        .iter()
        .chain(&state.optimizer.first_moment)
        .chain(&state.optimizer.second_moment)
    {
        out.write_f32::<LittleEndian>(*v)?;
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<TrainState> {
    if bytes.len() < 12 {
        return Err(AirError::Truncated {
            expected: 12,
            found: bytes.len(),
        });
    }
    if &bytes[..8] != CHECKPOINT_MAGIC {
        let at = if bytes[..4] != CHECKPOINT_MAGIC[..4] { 0 } else { 4 };
        return Err(AirError::BadMagic {
            expected: BigEndian::read_u32(&CHECKPOINT_MAGIC[at..]),
            found: BigEndian::read_u32(&bytes[at..at + 4]),
        });
    }
    let header_len = BigEndian::read_u32(&bytes[8..12]) as usize;
    let body = &bytes[12..];
    if body.len() < header_len {
        return Err(AirError::Truncated {
            expected: header_len,
            found: body.len(),
        });
    }
    let header: Header = serde_json::from_slice(&body[..header_len])?;
    if header.format_version != FORMAT_VERSION {
        return Err(AirError::Format(format!(
            "unsupported checkpoint version {}",
            header.format_version
        )));
    }
    let mut params = ModelParams::<f32>::init(header.architecture, 0)?;
    let expected_manifest = manifest(&params);
    if expected_manifest.len() != header.manifest.len()
        || expected_manifest
            .iter()
            .zip(&header.manifest)
            .any(|(a, b)| a.name != b.name || a.shape != b.shape || a.offset != b.offset)
    {
        return Err(AirError::Format(
            "parameter manifest does not match architecture".into(),
        ));
    }
    let n = params.param_count();
    let mut rest = &body[header_len..];
    if rest.len() != 12 * n {
        return Err(AirError::Truncated {
            expected: 12 * n,
            found: rest.len(),
        });
    }
    let mut read = |len: usize| -> Result<Vec<f32>> {
        let mut v = vec![0.0; len];
        rest.read_f32_into::<LittleEndian>(&mut v)?;
        Ok(v)
    };
    let flat = read(n)?;
    let first_moment = read(n)?;
    let second_moment = read(n)?;
    params.assign_flat(&flat)?;
    Ok(TrainState {
        config: header.train_config,
        params,
        optimizer: Adam {
            step: header.adam_step,
            first_moment,
            second_moment,
        },
        epoch: header.epoch,
        rng: header.rng,
    })
}

pub fn save_checkpoint(path: impl AsRef<Path>, state: &TrainState) -> Result<()> {
    fs::write(path, encode_checkpoint(state)?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<TrainState> {
    decode_checkpoint(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::TransformerConfig;
    use crate::embed::PositionalEncoding;
    use rand::Rng;

    fn state() -> TrainState {
        let arch = ArchConfig {
            height: 8,
            width: 8,
            scales: vec![2, 4],
            transformer: TransformerConfig::new(8, 2, 1).unwrap(),
            positional: PositionalEncoding::Learned,
        };
        let mut s = TrainState::new(arch, TrainConfig::default()).unwrap();
        let mut flat = s.params.flatten();
        for (i, v) in flat.iter_mut().enumerate() {
            *v += i as f32 * 1e-3;
        }
        s.params.assign_flat(&flat).unwrap();
        s.optimizer.step = 7;
        s.optimizer.first_moment.iter_mut().for_each(|m| *m = 0.25);
        s.optimizer.second_moment.iter_mut().for_each(|m| *m = 1.5);
        s.epoch = 3;
        let _: u64 = s.rng.gen();
        s
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let s = state();
        let a = encode_checkpoint(&s).unwrap();
        let back = decode_checkpoint(&a).unwrap();
        assert_eq!(encode_checkpoint(&back).unwrap(), a);
        assert_eq!(back.params, s.params);
        assert_eq!(back.optimizer, s.optimizer);
        assert_eq!(back.epoch, 3);
        assert_eq!(back.rng, s.rng);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let a = encode_checkpoint(&state()).unwrap();
        let mut bad = a.clone();
        bad[0] = b'X';
        assert!(matches!(decode_checkpoint(&bad), Err(AirError::BadMagic { .. })));
        assert!(matches!(
            decode_checkpoint(&a[..a.len() - 4]),
            Err(AirError::Truncated { .. })
        ));
        assert!(decode_checkpoint(&a[..6]).is_err());
    }
}
