//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "SSCSR001" | version u32 | step u64
//! config: len u32 | UTF-8 `key = value` lines
//! count u32 | count x { name_len u32 | name | ndim u32 | dims u32 x ndim | f32 payload }
//! rng: len u32 | seed [u8; 32] | stream u64 | word_pos u128
//! ```
//!
//! Records appear in a fixed order: `online/`, `target/`, `proj/`, then
//! `adam_m/online/`, `adam_m/proj/`, `adam_v/online/`, `adam_v/proj/`.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{init_state, TrainConfig, TrainState};
use crate::config::parse_entries;
use crate::error::{Error, Result};
use crate::models::{Module, ParamSet};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"SSCSR001";
pub const VERSION: u32 = 1;
const RNG_BLOB_LEN: usize = 32 + 8 + 16;

fn sections(state: &TrainState) -> [(&'static str, &ParamSet<f32>); 7] {
    [
        ("online/", state.online.params()),
        ("target/", state.target.params()),
        ("proj/", state.proj.params()),
        ("adam_m/online/", &state.online_moments.m),
        ("adam_m/proj/", &state.proj_moments.m),
        ("adam_v/online/", &state.online_moments.v),
        ("adam_v/proj/", &state.proj_moments.v),
    ]
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&u32::try_from(v).expect("checkpoint field exceeds u32").to_le_bytes());
}

fn config_text(config: &TrainConfig) -> String {
    config.entries().iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}

pub fn encode(state: &TrainState) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&state.step.to_le_bytes());
    let cfg = config_text(&state.config);
    put_u32(&mut out, cfg.len());
    out.extend_from_slice(cfg.as_bytes());

    let secs = sections(state);
    put_u32(&mut out, secs.iter().map(|(_, p)| p.len()).sum());
    for (prefix, params) in secs {
        for (name, t) in params.iter() {
            let full = format!("{prefix}{name}");
            put_u32(&mut out, full.len());
            out.extend_from_slice(full.as_bytes());
            put_u32(&mut out, t.ndim());
            for &d in t.shape() {
                put_u32(&mut out, d);
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }

    put_u32(&mut out, RNG_BLOB_LEN);
    out.extend_from_slice(&state.aug_rng.get_seed());
    out.extend_from_slice(&state.aug_rng.get_stream().to_le_bytes());
    out.extend_from_slice(&state.aug_rng.get_word_pos().to_le_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint(format!("truncated file while reading {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        Ok(self.take(N, what)?.try_into().expect("length checked"))
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.array(what)?) as usize)
    }
}

pub fn decode(bytes: &[u8]) -> Result<TrainState> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8, "magic")? != MAGIC {
        return Err(Error::Checkpoint("bad magic bytes".into()));
    }
    let version = u32::from_le_bytes(r.array("version")?);
    if version != VERSION {
        return Err(Error::Checkpoint(format!("version {version}, expected {VERSION}")));
    }
    let step = u64::from_le_bytes(r.array("step")?);

    let len = r.u32("config length")?;
    let text = std::str::from_utf8(r.take(len, "config")?)
        .map_err(|_| Error::Checkpoint("config block is not UTF-8".into()))?;
    let mut config = TrainConfig::default();
    for e in parse_entries(text)? {
        if !config.set(&e)? {
            return Err(Error::Checkpoint(format!("unknown config key {}", e.key)));
        }
    }
    let mut state = init_state(&config)?;
    state.step = step;

    let count = r.u32("record count")?;
    let expected: usize = sections(&state).iter().map(|(_, p)| p.len()).sum();
    if count != expected {
        return Err(Error::Checkpoint(format!("{count} records, config implies {expected}")));
    }
    let targets: [&mut ParamSet<f32>; 7] = [
        state.online.params_mut(),
        state.target.params_mut(),
        state.proj.params_mut(),
        &mut state.online_moments.m,
        &mut state.proj_moments.m,
        &mut state.online_moments.v,
        &mut state.proj_moments.v,
    ];
    let prefixes = ["online/", "target/", "proj/", "adam_m/online/", "adam_m/proj/", "adam_v/online/", "adam_v/proj/"];
    for (prefix, params) in prefixes.iter().zip(targets) {
        for (name, t) in params.iter_mut() {
            let want = format!("{prefix}{name}");
            let nlen = r.u32("record name length")?;
            let got = r.take(nlen, "record name")?;
            if got != want.as_bytes() {
                return Err(Error::Checkpoint(format!(
                    "record {:?} where {want} was expected",
                    String::from_utf8_lossy(got)
                )));
            }
            let ndim = r.u32("record rank")?;
            let dims = (0..ndim).map(|_| r.u32("record dims")).collect::<Result<Vec<_>>>()?;
            if dims != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "shape mismatch for {want}: file {dims:?}, config {:?}",
                    t.shape()
                )));
            }
            let payload = r.take(4 * t.numel(), "record payload")?;
            let values = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
                .collect();
            *t = Tensor::new(dims, values)?;
        }
    }

    if r.u32("rng length")? != RNG_BLOB_LEN {
        return Err(Error::Checkpoint("unexpected rng state size".into()));
    }
    let seed: [u8; 32] = r.array("rng seed")?;
    let stream = u64::from_le_bytes(r.array("rng stream")?);
    let word_pos = u128::from_le_bytes(r.array("rng position")?);
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(word_pos);
    state.aug_rng = rng;

    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(state)
}

/// Writes via a temporary file and rename, so a crash never leaves a partial checkpoint.
pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    let tmp = path.with_extension("partial");
    fs::write(&tmp, encode(state)).map_err(|e| Error::io(format!("writing {}", tmp.display()), e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(format!("renaming to {}", path.display()), e))
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::SrNetConfig;
    use crate::train::{ssc_step, Batch};
    use rand::Rng;

    fn trained_state() -> TrainState {
        let cfg = TrainConfig {
            model: SrNetConfig {
                scale: 2,
                channels: 4,
                num_blocks: 1,
            },
            proj_channels: 3,
            learning_rate: 1e-3,
            ..TrainConfig::default()
        };
        let mut s = init_state(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..2 {
            let lr = Tensor::from_fn(&[2, 3, 5, 5], |_| rng.random::<f32>());
            let hr = Tensor::from_fn(&[2, 3, 10, 10], |_| rng.random::<f32>());
            ssc_step(&mut s, &Batch::new(lr, hr, 2).unwrap()).unwrap();
        }
        s
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let s = trained_state();
        let back = decode(&encode(&s)).unwrap();
        assert!(back.bit_eq(&s));
        assert_eq!(back.step, 2);
        assert_eq!(encode(&back), encode(&s));
    }

    #[test]
    fn header_layout() {
        let bytes = encode(&trained_state());
        assert_eq!(&bytes[..8], b"SSCSR001");
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
        assert_eq!(u64::from_le_bytes(bytes[12..20].try_into().unwrap()), 2);
        let cfg_len = u32::from_le_bytes(bytes[20..24].try_into().unwrap()) as usize;
        let text = std::str::from_utf8(&bytes[24..24 + cfg_len]).unwrap();
        assert!(text.starts_with("learning_rate = 0.001\n"));
        let first = 24 + cfg_len + 4;
        let name_len = u32::from_le_bytes(bytes[first..first + 4].try_into().unwrap()) as usize;
        assert_eq!(&bytes[first + 4..first + 4 + name_len], b"online/head.weight");
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = encode(&trained_state());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(Error::Checkpoint(m)) if m.contains("magic")));
        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(matches!(decode(&bad), Err(Error::Checkpoint(m)) if m.contains("version")));
        for cut in [4, 30, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(decode(&bytes[..cut]), Err(Error::Checkpoint(m)) if m.contains("truncated")), "{cut}");
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode(&extra).is_err());
    }

    #[test]
    fn shape_mismatch_against_config() {
        let s = trained_state();
        let bytes = encode(&s);
        let text = config_text(&s.config);
        let edited = text.replace("channels = 4", "channels = 5");
        assert_eq!(edited.len(), text.len());
        let mut bad = bytes.clone();
        bad[24..24 + text.len()].copy_from_slice(edited.as_bytes());
        assert!(matches!(decode(&bad), Err(Error::Checkpoint(m)) if m.contains("shape mismatch")));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ckpt");
        let s = trained_state();
        save_checkpoint(&s, &p).unwrap();
        assert!(load_checkpoint(&p).unwrap().bit_eq(&s));
        assert!(!p.with_extension("partial").exists());
    }
}
