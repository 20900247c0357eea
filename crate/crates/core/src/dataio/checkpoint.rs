//! Single-file binary checkpoints (`.tdir`).
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "TDIRCKPT" | version u32 | body length u64 | body
//! body = header length u64 | JSON header | params | adam.m | adam.v
//! tensor section = count u64, then per tensor:
//!     name length u32 | name | rank u32 | dims u64* | values f64*
//! ```
//!
//! Values are stored as 64-bit floats so that a resumed run continues
//! bit-identically.

use std::io::Write;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::{Denoiser, DenoiserConfig, DenoiserParams};
use crate::error::{Error, Result};
use crate::schedule::ScheduleConfig;
use crate::tape::Tensor;
use crate::trainer::{AdamState, TrainConfig};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"TDIRCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Exact position of a ChaCha8 stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub denoiser: DenoiserConfig,
    pub train: TrainConfig,
    pub schedule: ScheduleConfig,
    pub params: DenoiserParams,
    pub adam: AdamState,
    pub rng: RngState,
    /// Completed training steps.
    pub step: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    denoiser: DenoiserConfig,
    train: TrainConfig,
    schedule: ScheduleConfig,
    step: u64,
    adam_step: u64,
    rng_seed: String,
    rng_stream: u64,
    rng_word_pos: String,
}

/// Writes `ckpt` to a temporary file next to `path` and renames it into
/// place.
pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(ckpt)?;
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let ctx = |what: &str| format!("{what} checkpoint {}", path.display());
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(ctx("create"), e))?;
    tmp.write_all(&bytes).map_err(|e| Error::io(ctx("write"), e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(ctx("sync"), e))?;
    tmp.persist(path).map_err(|e| Error::io(ctx("rename"), e.error))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(format!("read checkpoint {}", path.display()), e))?;
    decode(&bytes)
}

fn encode(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    if ckpt.adam.m.len() != ckpt.params.len() || ckpt.adam.v.len() != ckpt.params.len() {
        return Err(Error::Checkpoint("optimizer state does not match parameters".into()));
    }
    let header = Header {
        denoiser: ckpt.denoiser.clone(),
        train: ckpt.train.clone(),
        schedule: ckpt.schedule,
        step: ckpt.step,
        adam_step: ckpt.adam.step,
        rng_seed: ckpt.rng.seed.iter().map(|b| format!("{b:02x}")).collect(),
        rng_stream: ckpt.rng.stream,
        rng_word_pos: ckpt.rng.word_pos.to_string(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;

    let mut body = Vec::new();
    body.extend_from_slice(&(json.len() as u64).to_le_bytes());
    body.extend_from_slice(&json);
    let names: Vec<&str> = ckpt.params.entries().iter().map(|e| e.name.as_str()).collect();
    write_section(&mut body, names.iter().copied().zip(ckpt.params.entries().iter().map(|e| &e.tensor)));
    write_section(&mut body, names.iter().copied().zip(&ckpt.adam.m));
    write_section(&mut body, names.iter().copied().zip(&ckpt.adam.v));

    let mut out = Vec::with_capacity(body.len() + 20);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(body.len() as u64).to_le_bytes());
    out.extend_from_slice(&body);
    Ok(out)
}

fn write_section<'a>(out: &mut Vec<u8>, tensors: impl ExactSizeIterator<Item = (&'a str, &'a Tensor)>) {
    out.extend_from_slice(&(tensors.len() as u64).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for d in t.shape() {
            out.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Checkpoint("length overflow".into()))
    }

    fn section(&mut self) -> Result<Vec<(String, Tensor)>> {
        let count = self.len()?;
        let mut out = Vec::new();
        for _ in 0..count {
            let name_len = self.u32()? as usize;
            let name = std::str::from_utf8(self.take(name_len)?)
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = self.u32()? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(self.len()?);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .and_then(|n| n.checked_mul(8))
                .ok_or_else(|| Error::Checkpoint(format!("tensor {name} too large")))?;
            let raw = self.take(n)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            out.push((name, Tensor::new(shape, data)?));
        }
        Ok(out)
    }
}

fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8).ok() != Some(CHECKPOINT_MAGIC.as_slice()) {
        return Err(Error::Checkpoint("bad magic: not a checkpoint file".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    let body_len = r.len()?;
    if bytes.len() - r.pos != body_len {
        return Err(Error::Checkpoint(format!(
            "body length {} does not match header ({body_len}); file truncated or padded",
            bytes.len() - r.pos
        )));
    }

    let json_len = r.len()?;
    let header: Header =
        serde_json::from_slice(r.take(json_len)?).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
    let params_raw = r.section()?;
    let m_raw = r.section()?;
    let v_raw = r.section()?;
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after tensor data".into()));
    }

    let model = Denoiser::new(header.denoiser.clone())?;
    let mut params = model.init_params(0);
    params.replace_all(params_raw)?;
    params.set_freeze(header.train.freeze_encoder, &header.train.freeze_prefixes);
    let moments = |raw: Vec<(String, Tensor)>| -> Result<Vec<Tensor>> {
        let mut shadow = params.clone();
        shadow.replace_all(raw)?;
        Ok(shadow.entries().iter().map(|e| e.tensor.clone()).collect())
    };
    let adam = AdamState {
        m: moments(m_raw)?,
        v: moments(v_raw)?,
        step: header.adam_step,
    };

    Ok(Checkpoint {
        denoiser: header.denoiser,
        train: header.train,
        schedule: header.schedule,
        params,
        adam,
        rng: RngState {
            seed: parse_seed(&header.rng_seed)?,
            stream: header.rng_stream,
            word_pos: header
                .rng_word_pos
                .parse()
                .map_err(|_| Error::Checkpoint("bad RNG position".into()))?,
        },
        step: header.step,
    })
}

fn parse_seed(hex: &str) -> Result<[u8; 32]> {
    let bad = || Error::Checkpoint("bad RNG seed".into());
    if hex.len() != 64 || !hex.is_ascii() {
        return Err(bad());
    }
    let mut seed = [0u8; 32];
    for (i, b) in seed.iter_mut().enumerate() {
        *b = u8::from_str_radix(&hex[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
    }
    Ok(seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn sample() -> Checkpoint {
        let cfg = DenoiserConfig::tiny();
        let model = Denoiser::new(cfg.clone()).unwrap();
        let mut params = model.init_params(9);
        params.set_freeze(true, &[]);
        let mut adam = AdamState::new(&params);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for t in adam.m.iter_mut().chain(adam.v.iter_mut()) {
            t.data_mut().iter_mut().for_each(|x| *x = rng.random::<f64>());
        }
        adam.step = 7;
        rng.set_stream(3);
        let _: u64 = rng.random();
        Checkpoint {
            denoiser: cfg,
            train: TrainConfig::default(),
            schedule: ScheduleConfig::scaled_for(50),
            params,
            adam,
            rng: RngState::capture(&rng),
            step: 7,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.tdir");
        let ck = sample();
        save_checkpoint(&ck, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert!(back == ck, "checkpoint changed in round trip");
        for (a, b) in back.params.entries().iter().zip(ck.params.entries()) {
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.tensor), bits(&b.tensor));
        }
        assert_eq!(back.rng.restore().random::<u64>(), ck.rng.restore().random::<u64>());
    }

    #[test]
    fn corrupt_magic_rejected() {
        let mut bytes = encode(&sample()).unwrap();
        bytes[0] = b'X';
        assert!(matches!(decode(&bytes), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn version_mismatch_rejected() {
        let mut bytes = encode(&sample()).unwrap();
        bytes[8] = 99;
        let err = decode(&bytes).unwrap_err();
        assert!(err.to_string().contains("version"));
    }

    #[test]
    fn truncation_detected() {
        let bytes = encode(&sample()).unwrap();
        for cut in [bytes.len() - 1, bytes.len() / 2, 21] {
            assert!(decode(&bytes[..cut]).is_err());
        }
    }

    #[test]
    fn shape_mismatch_against_config() {
        let mut ck = sample();
        ck.denoiser.base_channels = 16;
        ck.denoiser.prompt_channels = vec![64, 32, 16];
        let bytes = encode(&ck).unwrap();
        assert!(decode(&bytes).is_err());
    }

    #[test]
    fn save_replaces_target_atomically() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.tdir");
        std::fs::write(&path, b"old").unwrap();
        save_checkpoint(&sample(), &path).unwrap();
        assert!(load_checkpoint(&path).is_ok());
        let leftovers = std::fs::read_dir(dir.path()).unwrap().count();
        assert_eq!(leftovers, 1);
    }
}
