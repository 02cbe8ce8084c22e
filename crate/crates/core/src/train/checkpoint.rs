//! Versioned binary checkpoint of a trained model.
//!
//! ```text
//! "FSCK" | version u16 | input hidden embed classes shards epochs u32 |
//! steps u64 | config_len u32 | w1 b1 w2 b2 classifier f32 | config JSON | crc u32
//! ```
//!
//! Weights are stored as `f32` whatever the training scalar. Optimizer
//! momentum is not saved; a resumed run starts with zero velocity.

use std::fs;
use std::path::Path;

use super::embedder::Embedder;
use super::{TrainConfig, TrainState};
use crate::binfmt::{open, Writer};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 4] = b"FSCK";
pub const VERSION: u16 = 1;
const HEADER_LEN: u64 = 4 + 2 + 6 * 4 + 8 + 4;

fn dim(x: usize, what: &str) -> Result<u32> {
    u32::try_from(x).map_err(|_| Error::FormatLimit(format!("{what} {x}")))
}

pub fn encode_checkpoint<T: Scalar>(state: &TrainState<T>) -> Result<Vec<u8>> {
    let e = &state.embedder;
    let config = serde_json::to_vec(&state.config)?;
    let mut w = Writer::new(MAGIC, VERSION);
    w.u32(dim(e.input_dim(), "input dim")?);
    w.u32(dim(e.hidden_dim(), "hidden dim")?);
    w.u32(dim(e.embed_dim(), "embed dim")?);
    w.u32(dim(state.classifier.layout().classes(), "class count")?);
    w.u32(dim(state.classifier.layout().shards(), "shard count")?);
    w.u32(dim(state.epochs_done, "epoch count")?);
    w.u64(state.steps_done);
    w.u32(dim(config.len(), "config length")?);
    for t in e.tensors() {
        w.f32s(t);
    }
    w.f32s(state.classifier.to_full().as_slice());
    w.buf.extend_from_slice(&config);
    Ok(w.finish())
}

pub fn decode_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<TrainState<T>> {
    let mut r = open(bytes, MAGIC, VERSION)?;
    let mut dims = [0u64; 6];
    for v in dims.iter_mut() {
        *v = r.u32()? as u64;
    }
    let [input, hidden, embed, classes, shards, epochs] = dims;
    let steps = r.u64()?;
    let config_len = r.u32()? as u64;
    let scalars = [hidden * input, hidden, embed * hidden, embed, classes * embed]
        .iter()
        .sum::<u64>();
    r.verify_total(HEADER_LEN + 4 * scalars + config_len + 4)?;

    let (input, hidden, embed, classes) = (input as usize, hidden as usize, embed as usize, classes as usize);
    let w1 = Matrix::from_vec(hidden, input, r.f32s(hidden * input)?)?;
    let b1 = r.f32s(hidden)?;
    let w2 = Matrix::from_vec(embed, hidden, r.f32s(embed * hidden)?)?;
    let b2 = r.f32s(embed)?;
    let classifier = Matrix::from_vec(classes, embed, r.f32s(classes * embed)?)?;
    let config: TrainConfig = serde_json::from_slice(r.bytes(config_len as usize)?)?;
    if config.shards as u64 != shards || config.hidden_dim != hidden || config.embed_dim != embed {
        return Err(Error::InvalidConfig("config echo disagrees with stored dimensions".into()));
    }
    let mut state = TrainState::from_parts(config, Embedder { w1, b1, w2, b2 }, &classifier, epochs as usize)?;
    state.steps_done = steps;
    Ok(state)
}

pub fn save_checkpoint<T: Scalar>(state: &TrainState<T>, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_checkpoint(state)?)?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<TrainState<T>> {
    decode_checkpoint(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{SynthTask, SynthTaskSpec};
    use crate::train::{train, TrainData};

    fn trained() -> TrainState<f32> {
        let spec = SynthTaskSpec {
            n_ids: 6,
            samples_per_id: 8,
            input_dim: 12,
            seed: 3,
            ..Default::default()
        };
        let data = TrainData::from_task(&SynthTask::generate(&spec).unwrap());
        let cfg = TrainConfig {
            hidden_dim: 10,
            embed_dim: 4,
            global_batch: 16,
            total_epochs: 2,
            decay_epochs: vec![1],
            shards: 2,
            ..Default::default()
        };
        train(&data, &cfg).unwrap().0
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let s = trained();
        let bytes = encode_checkpoint(&s).unwrap();
        let back = decode_checkpoint::<f32>(&bytes).unwrap();
        assert_eq!(back.embedder, s.embedder);
        assert_eq!(back.classifier.to_full(), s.classifier.to_full());
        assert_eq!(back.config, s.config);
        assert_eq!((back.epochs_done, back.steps_done), (s.epochs_done, s.steps_done));
        assert_eq!(encode_checkpoint(&back).unwrap(), bytes);
    }

    #[test]
    fn rejects_corruption() {
        let bytes = encode_checkpoint(&trained()).unwrap();
        let mut bad = bytes.clone();
        bad[50] ^= 4;
        assert!(matches!(decode_checkpoint::<f32>(&bad), Err(Error::BadCrc { .. })));
        assert!(matches!(decode_checkpoint::<f32>(&bytes[..bytes.len() - 3]), Err(Error::Truncated { .. })));
        assert!(matches!(decode_checkpoint::<f32>(b"EMB1\x01\x00"), Err(Error::BadMagic(_))));
        let mut bad = bytes;
        bad[4] = 9;
        assert!(matches!(decode_checkpoint::<f32>(&bad), Err(Error::VersionUnsupported(9))));
    }
}
