//! Binary checkpoints.
//!
//! Layout, all integers and reals little-endian:
//!
//! | bytes | content |
//! |---|---|
//! | 4 | magic `NFFB` |
//! | 4 | u32 format version (1) |
//! | 4 | u32 length `c` of the config text |
//! | c | config echo, UTF-8 |
//! | 8 | u64 completed steps |
//! | 8 | u64 parameter count `n` |
//! | 4n | f32 parameters in flat order |
//! | 8 | u64 optimizer step `t` |
//! | 4n | f32 first moments |
//! | 4n | f32 second moments |

use std::fs;
use std::path::Path;

use crate::error::{NffbError, Result};
use crate::filter_bank::FilterBank;
use crate::io::config::{parse_config, RunConfig};
use crate::math::AdamState;
use crate::tasks::TrainState;

pub const MAGIC: &[u8; 4] = b"NFFB";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub params: Vec<f32>,
    pub state: TrainState,
}

impl Checkpoint {
    pub fn capture(config: &RunConfig, model: &FilterBank<f32>, state: &TrainState) -> Self {
        Self {
            config: config.clone(),
            params: model.params().as_slice().to_vec(),
            state: state.clone(),
        }
    }

    /// Rebuilds the model described by the config echo with the saved values.
    pub fn model(&self) -> Result<FilterBank<f32>> {
        let mut model = FilterBank::build(&self.config.model, self.config.variant)?;
        if model.param_count() != self.params.len() {
            return Err(NffbError::Format(format!(
                "checkpoint holds {} parameters but its config builds {}",
                self.params.len(),
                model.param_count()
            )));
        }
        model.set_param_values(&self.params)?;
        Ok(model)
    }
}

fn put_reals(out: &mut Vec<u8>, values: &[f32]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let n = ckpt.params.len();
    if ckpt.state.adam.m.len() != n || ckpt.state.adam.v.len() != n {
        return Err(NffbError::State("optimizer moments do not match the parameter count".into()));
    }
    let text = ckpt.config.to_text();
    let text_len = u32::try_from(text.len()).map_err(|_| NffbError::Format("config echo too long".into()))?;
    let mut out = Vec::with_capacity(40 + text.len() + 12 * n);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&text_len.to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    out.extend_from_slice(&ckpt.state.step.to_le_bytes());
    out.extend_from_slice(&(n as u64).to_le_bytes());
    put_reals(&mut out, &ckpt.params);
    out.extend_from_slice(&ckpt.state.adam.t.to_le_bytes());
    put_reals(&mut out, &ckpt.state.adam.m);
    put_reals(&mut out, &ckpt.state.adam.v);
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| NffbError::Format(format!("checkpoint truncated while reading {what}")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn reals(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let len = n.checked_mul(4).ok_or_else(|| NffbError::Format("parameter count overflows".into()))?;
        Ok(self
            .take(len, what)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }
}

/// Parses a whole checkpoint; nothing is returned unless every check passes.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic").ok() != Some(&MAGIC[..]) {
        return Err(NffbError::Format("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(NffbError::Format(format!(
            "unsupported checkpoint version {version} (expected {VERSION})"
        )));
    }
    let text_len = r.u32("config length")? as usize;
    let text = std::str::from_utf8(r.take(text_len, "config")?)
        .map_err(|_| NffbError::Format("config echo is not UTF-8".into()))?;
    let config = parse_config(text)?;
    let step = r.u64("step")?;
    let n = usize::try_from(r.u64("parameter count")?).map_err(|_| NffbError::Format("parameter count overflows".into()))?;
    let params = r.reals(n, "parameters")?;
    let t = r.u64("optimizer step")?;
    let m = r.reals(n, "first moments")?;
    let v = r.reals(n, "second moments")?;
    if r.pos != bytes.len() {
        return Err(NffbError::Format(format!("{} trailing bytes after checkpoint", bytes.len() - r.pos)));
    }
    let ckpt = Checkpoint {
        config,
        params,
        state: TrainState {
            adam: AdamState { m, v, t },
            step,
        },
    };
    ckpt.model()?;
    Ok(ckpt)
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    fs::write(path, encode_checkpoint(ckpt)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filter_bank::Variant;

    fn sample() -> Checkpoint {
        let mut config = RunConfig::default();
        config.model.levels = 2;
        config.model.width = 8;
        config.model.table_cap = 64;
        config.model.n_min = 4;
        let model = FilterBank::build(&config.model, Variant::Full).unwrap();
        let n = model.param_count();
        let mut state = TrainState::new(n);
        state.step = 17;
        state.adam.t = 17;
        state.adam.m = (0..n).map(|i| (i as f32).sin()).collect();
        state.adam.v = (0..n).map(|i| f32::from_bits(i as u32 + 1)).collect();
        Checkpoint::capture(&config, &model, &state)
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let ckpt = sample();
        let bytes = encode_checkpoint(&ckpt).unwrap();
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back.config, ckpt.config);
        let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back.params), bits(&ckpt.params));
        assert_eq!(bits(&back.state.adam.m), bits(&ckpt.state.adam.m));
        assert_eq!(bits(&back.state.adam.v), bits(&ckpt.state.adam.v));
        assert_eq!((back.state.step, back.state.adam.t), (17, 17));
        assert_eq!(encode_checkpoint(&back).unwrap(), bytes);
        assert_eq!(back.model().unwrap().params().as_slice(), &ckpt.params[..]);
    }

    #[test]
    fn corrupt_files_rejected() {
        let bytes = encode_checkpoint(&sample()).unwrap();
        let mut magic = bytes.clone();
        magic[0] = b'X';
        let mut version = bytes.clone();
        version[4] = 2;
        let mut extra = bytes.clone();
        extra.push(0);
        for bad in [magic, version, bytes[..bytes.len() - 1].to_vec(), extra, bytes[..10].to_vec()] {
            assert!(matches!(decode_checkpoint(&bad), Err(NffbError::Format(_))));
        }
    }

    #[test]
    fn parameter_count_must_match_config() {
        let mut ckpt = sample();
        ckpt.params.push(0.0);
        ckpt.state.adam.m.push(0.0);
        ckpt.state.adam.v.push(0.0);
        let bytes = encode_checkpoint(&ckpt).unwrap();
        assert!(matches!(decode_checkpoint(&bytes), Err(NffbError::Format(_))));
    }
}
