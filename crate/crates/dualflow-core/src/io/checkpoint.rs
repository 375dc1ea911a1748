//! Binary parameter checkpoints.
//!
//! Layout (all little-endian):
//!   magic "DFLW", version u32,
//!   seed u64, step_count u64,
//!   config echo: u32 byte length + UTF-8 "key=value\n" lines,
//!   record count u32, then per record:
//!     name (u32 len + UTF-8), dtype u8 (0 = f32), flags u8 (bit0 trainable),
//!     ndim u32, dims u32 * ndim, raw f32 data.
//!
//! Round trips are bit-exact; unknown versions and malformed records are
//! rejected with named errors.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{CoreError, Result};
use crate::tensor::{ParamStore, Tensor};

const MAGIC: &[u8; 4] = b"DFLW";
const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub step_count: u64,
    pub config: BTreeMap<String, String>,
}

fn render_meta(config: &BTreeMap<String, String>) -> Result<String> {
    let mut s = String::new();
    for (k, v) in config {
        if k.contains('\n') || k.contains('=') || v.contains('\n') {
            return Err(CoreError::Format(format!("config entry '{k}' not line-encodable")));
        }
        s.push_str(k);
        s.push('=');
        s.push_str(v);
        s.push('\n');
    }
    Ok(s)
}

fn parse_meta(s: &str) -> Result<BTreeMap<String, String>> {
    let mut m = BTreeMap::new();
    for line in s.lines() {
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CoreError::Format(format!("bad config echo line '{line}'")))?;
        m.insert(k.to_string(), v.to_string());
    }
    Ok(m)
}

pub fn checkpoint_to_bytes(store: &ParamStore, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&meta.seed.to_le_bytes());
    out.extend_from_slice(&meta.step_count.to_le_bytes());
    let echo = render_meta(&meta.config)?;
    out.extend_from_slice(&(echo.len() as u32).to_le_bytes());
    out.extend_from_slice(echo.as_bytes());

    let names: Vec<&str> = store.names().collect();
    out.extend_from_slice(&(names.len() as u32).to_le_bytes());
    for name in names {
        let t = store.get(name)?;
        let trainable = store.is_trainable(name)?;
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(DTYPE_F32);
        out.push(u8::from(trainable));
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(CoreError::Format(format!("truncated checkpoint while reading {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let len = self.u32(what)? as usize;
        let bytes = self.take(len, what)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| CoreError::Format(format!("non-UTF-8 {what}")))
    }
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<(ParamStore, CheckpointMeta)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(CoreError::Format(format!("bad magic {magic:?}")));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(CoreError::Format(format!("unsupported checkpoint version {version}")));
    }
    let seed = r.u64("seed")?;
    let step_count = r.u64("step count")?;
    let config = parse_meta(&r.string("config echo")?)?;

    let count = r.u32("record count")? as usize;
    let mut store = ParamStore::new();
    for i in 0..count {
        let name = r.string(&format!("record {i} name"))?;
        let dtype = r.u8("dtype")?;
        if dtype != DTYPE_F32 {
            return Err(CoreError::Format(format!("record '{name}': unknown dtype {dtype}")));
        }
        let flags = r.u8("flags")?;
        let ndim = r.u32("ndim")? as usize;
        if ndim > 8 {
            return Err(CoreError::Format(format!("record '{name}': implausible ndim {ndim}")));
        }
        let mut shape = Vec::with_capacity(ndim);
        let mut numel = 1usize;
        for _ in 0..ndim {
            let d = r.u32("dim")? as usize;
            numel = numel
                .checked_mul(d)
                .ok_or_else(|| CoreError::Format(format!("record '{name}': shape overflow")))?;
            shape.push(d);
        }
        let raw = r.take(numel * 4, &format!("record '{name}' data"))?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let t = Tensor::new(shape, data)
            .map_err(|e| CoreError::Format(format!("record '{name}': {e}")))?;
        store.insert(&name, t, flags & 1 == 1)?;
    }
    if r.pos != bytes.len() {
        return Err(CoreError::Format(format!(
            "{} trailing bytes after the last record",
            bytes.len() - r.pos
        )));
    }
    Ok((store, CheckpointMeta { seed, step_count, config }))
}

pub fn save_checkpoint(store: &ParamStore, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    let bytes = checkpoint_to_bytes(store, meta)?;
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ParamStore, CheckpointMeta)> {
    let bytes = std::fs::read(path)?;
    checkpoint_from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn sample_store(seed: u64) -> ParamStore {
        let mut rng = Rng::seed_from(seed);
        let mut s = ParamStore::new();
        s.insert("a.w", Tensor::new(vec![3, 2], rng.normal_vec(6, 1.0)).unwrap(), true).unwrap();
        s.insert("a.b", Tensor::new(vec![3], rng.normal_vec(3, 1.0)).unwrap(), false).unwrap();
        s.insert("z", Tensor::new(vec![1], vec![rng.normal_f32()]).unwrap(), true).unwrap();
        s
    }

    fn sample_meta() -> CheckpointMeta {
        let mut config = BTreeMap::new();
        config.insert("epsilon".into(), "0.0627451".into());
        config.insert("variant".into(), "co".into());
        CheckpointMeta { seed: 42, step_count: 1234, config }
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let store = sample_store(7);
        let meta = sample_meta();
        let bytes = checkpoint_to_bytes(&store, &meta).unwrap();
        let (loaded, lmeta) = checkpoint_from_bytes(&bytes).unwrap();
        assert_eq!(lmeta, meta);
        for name in store.names() {
            assert_eq!(store.get(name).unwrap(), loaded.get(name).unwrap());
            assert_eq!(
                store.is_trainable(name).unwrap(),
                loaded.is_trainable(name).unwrap()
            );
        }
        // save -> load -> save is byte-identical
        let again = checkpoint_to_bytes(&loaded, &lmeta).unwrap();
        assert_eq!(bytes, again);
    }

    #[test]
    fn many_random_stores_roundtrip() {
        for seed in 0..50u64 {
            let store = sample_store(seed);
            let meta = CheckpointMeta { seed, step_count: seed * 3, config: BTreeMap::new() };
            let bytes = checkpoint_to_bytes(&store, &meta).unwrap();
            let (loaded, _) = checkpoint_from_bytes(&bytes).unwrap();
            for name in store.names() {
                assert_eq!(store.get(name).unwrap(), loaded.get(name).unwrap());
            }
        }
    }

    #[test]
    fn corrupt_magic_rejected() {
        let bytes = checkpoint_to_bytes(&sample_store(1), &sample_meta()).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(checkpoint_from_bytes(&bad), Err(CoreError::Format(_))));
    }

    #[test]
    fn unknown_version_rejected() {
        let bytes = checkpoint_to_bytes(&sample_store(1), &sample_meta()).unwrap();
        let mut bad = bytes.clone();
        bad[4] = 99;
        assert!(matches!(checkpoint_from_bytes(&bad), Err(CoreError::Format(_))));
    }

    #[test]
    fn truncation_rejected() {
        let bytes = checkpoint_to_bytes(&sample_store(1), &sample_meta()).unwrap();
        for cut in [5usize, 20, bytes.len() / 2, bytes.len() - 1] {
            assert!(
                checkpoint_from_bytes(&bytes[..cut]).is_err(),
                "cut at {cut} accepted"
            );
        }
    }

    #[test]
    fn trailing_garbage_rejected() {
        let mut bytes = checkpoint_to_bytes(&sample_store(1), &sample_meta()).unwrap();
        bytes.push(0);
        assert!(checkpoint_from_bytes(&bytes).is_err());
    }

    #[test]
    fn file_roundtrip() {
        let dir = std::env::temp_dir().join(format!("dfck-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("test.ckpt");
        let store = sample_store(9);
        let meta = sample_meta();
        save_checkpoint(&store, &meta, &path).unwrap();
        let (loaded, lmeta) = load_checkpoint(&path).unwrap();
        assert_eq!(meta, lmeta);
        for name in store.names() {
            assert_eq!(store.get(name).unwrap(), loaded.get(name).unwrap());
        }
        std::fs::remove_dir_all(&dir).ok();
    }
}
