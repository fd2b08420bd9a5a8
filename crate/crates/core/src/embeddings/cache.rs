//! Content-addressed, write-through embedding cache.
//!
//! File layout (all integers little-endian):
//!
//! ```text
//! header   b"EMBC" | version: u8 (= 1)
//! record   payload_len: u32 | payload
//! payload  key: [u8; 32]                     sha256(provider \0 model \0 text)
//!          provider_len: u32 | provider: utf-8
//!          model_len: u32    | model: utf-8
//!          text_len: u32     | text: utf-8
//!          dim: u32          | values: dim x f64
//! ```
//!
//! Records are appended; a later record for the same key wins on load.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};

use sha2::{Digest, Sha256};

use super::{EmbedError, EmbeddingVector};

pub const CACHE_MAGIC: &[u8; 4] = b"EMBC";
pub const CACHE_VERSION: u8 = 1;

pub type CacheKey = [u8; 32];

pub fn cache_key(provider_id: &str, model_id: &str, text: &str) -> CacheKey {
    let mut h = Sha256::new();
    h.update(provider_id.as_bytes());
    h.update([0]);
    h.update(model_id.as_bytes());
    h.update([0]);
    h.update(text.as_bytes());
    h.finalize().into()
}

#[derive(Debug, Clone)]
struct Entry {
    text: String,
    vector: EmbeddingVector,
}

pub struct EmbeddingCache {
    path: Option<PathBuf>,
    entries: RwLock<HashMap<CacheKey, Entry>>,
    writer: Mutex<Option<BufWriter<File>>>,
}

impl EmbeddingCache {
    /// A cache that lives only for this process.
    pub fn in_memory() -> Self {
        EmbeddingCache {
            path: None,
            entries: RwLock::new(HashMap::new()),
            writer: Mutex::new(None),
        }
    }

    /// Opens (or creates) a cache file and loads every record.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, EmbedError> {
        let path = path.as_ref().to_path_buf();
        let io = |e: std::io::Error| EmbedError::Cache(format!("{}: {e}", path.display()));
        let mut entries = HashMap::new();
        if path.exists() {
            let mut raw = Vec::new();
            File::open(&path)
                .and_then(|mut f| f.read_to_end(&mut raw))
                .map_err(io)?;
            load_records(&raw, &mut entries).map_err(|m| EmbedError::Cache(format!("{}: {m}", path.display())))?;
        } else {
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(io)?;
            }
            let mut f = File::create(&path).map_err(io)?;
            f.write_all(CACHE_MAGIC).map_err(io)?;
            f.write_all(&[CACHE_VERSION]).map_err(io)?;
            f.sync_all().map_err(io)?;
        }
        let file = OpenOptions::new().append(true).open(&path).map_err(io)?;
        Ok(EmbeddingCache {
            path: Some(path),
            entries: RwLock::new(entries),
            writer: Mutex::new(Some(BufWriter::new(file))),
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Looks up a vector. A key hit whose stored text, provider or model
    /// differs from the request is reported as an integrity error.
    pub fn get(&self, provider_id: &str, model_id: &str, text: &str) -> Result<Option<EmbeddingVector>, EmbedError> {
        let key = cache_key(provider_id, model_id, text);
        let entries = self.entries.read().expect("cache lock");
        match entries.get(&key) {
            None => Ok(None),
            Some(e) if e.text == text && e.vector.provider_id == provider_id && e.vector.model_id == model_id => {
                Ok(Some(e.vector.clone()))
            }
            Some(_) => Err(EmbedError::Integrity(format!("cache key collision for text {text:?}"))),
        }
    }

    pub fn put(&self, text: &str, vector: EmbeddingVector) -> Result<(), EmbedError> {
        self.put_many(std::iter::once((text.to_string(), vector)))
    }

    /// Stores vectors and appends them to the backing file before returning.
    pub fn put_many(&self, items: impl IntoIterator<Item = (String, EmbeddingVector)>) -> Result<(), EmbedError> {
        let mut writer = self.writer.lock().expect("cache writer lock");
        let mut entries = self.entries.write().expect("cache lock");
        for (text, vector) in items {
            let key = cache_key(&vector.provider_id, &vector.model_id, &text);
            if let Some(w) = writer.as_mut() {
                let record = encode_record(&key, &text, &vector);
                w.write_all(&(record.len() as u32).to_le_bytes())
                    .and_then(|_| w.write_all(&record))
                    .map_err(|e| EmbedError::Cache(e.to_string()))?;
            }
            entries.insert(key, Entry { text, vector });
        }
        if let Some(w) = writer.as_mut() {
            w.flush().map_err(|e| EmbedError::Cache(e.to_string()))?;
        }
        Ok(())
    }
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

fn encode_record(key: &CacheKey, text: &str, v: &EmbeddingVector) -> Vec<u8> {
    let mut buf = Vec::with_capacity(64 + text.len() + 8 * v.values.len());
    buf.extend_from_slice(key);
    put_str(&mut buf, &v.provider_id);
    put_str(&mut buf, &v.model_id);
    put_str(&mut buf, text);
    buf.extend_from_slice(&(v.values.len() as u32).to_le_bytes());
    for x in &v.values {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    buf
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| format!("truncated record at byte {}", self.pos))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String, String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| e.to_string())
    }
}

fn load_records(raw: &[u8], entries: &mut HashMap<CacheKey, Entry>) -> Result<(), String> {
    let mut r = Reader { buf: raw, pos: 0 };
    if r.take(4)? != CACHE_MAGIC {
        return Err("not an embedding cache (bad magic)".into());
    }
    let version = r.take(1)?[0];
    if version != CACHE_VERSION {
        return Err(format!("unsupported cache version {version}"));
    }
    while r.pos < raw.len() {
        let len = r.u32()? as usize;
        let mut rec = Reader {
            buf: r.take(len)?,
            pos: 0,
        };
        let key: CacheKey = rec.take(32)?.try_into().unwrap();
        let provider_id = rec.string()?;
        let model_id = rec.string()?;
        let text = rec.string()?;
        let dim = rec.u32()? as usize;
        let values = (0..dim)
            .map(|_| rec.take(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())))
            .collect::<Result<Vec<_>, _>>()?;
        if key != cache_key(&provider_id, &model_id, &text) {
            return Err(format!("record key does not match its content for {text:?}"));
        }
        entries.insert(
            key,
            Entry {
                text,
                vector: EmbeddingVector {
                    values,
                    provider_id,
                    model_id,
                },
            },
        );
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec_of(values: Vec<f64>) -> EmbeddingVector {
        EmbeddingVector {
            values,
            provider_id: "local-test".into(),
            model_id: "m".into(),
        }
    }

    #[test]
    fn survives_reopen_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.cache");
        let values = vec![0.1, -0.0, f64::MIN_POSITIVE, 1.0 / 3.0, -7.25e-300];
        {
            let c = EmbeddingCache::open(&path).unwrap();
            c.put("EU rejects", vec_of(values.clone())).unwrap();
            c.put("other", vec_of(vec![1.0])).unwrap();
        }
        let c = EmbeddingCache::open(&path).unwrap();
        assert_eq!(c.len(), 2);
        let got = c.get("local-test", "m", "EU rejects").unwrap().unwrap();
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&got.values), bits(&values));
        assert!(c.get("local-test", "other-model", "EU rejects").unwrap().is_none());
    }

    #[test]
    fn rejects_foreign_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad");
        std::fs::write(&path, b"NOPE\x01").unwrap();
        assert!(matches!(EmbeddingCache::open(&path), Err(EmbedError::Cache(_))));
    }

    #[test]
    fn truncated_record_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.cache");
        EmbeddingCache::open(&path)
            .unwrap()
            .put("t", vec_of(vec![1.0, 2.0]))
            .unwrap();
        let raw = std::fs::read(&path).unwrap();
        std::fs::write(&path, &raw[..raw.len() - 3]).unwrap();
        assert!(EmbeddingCache::open(&path).is_err());
    }

    #[test]
    fn collision_is_detected() {
        let c = EmbeddingCache::in_memory();
        let key = cache_key("local-test", "m", "a");
        c.entries.write().unwrap().insert(
            key,
            Entry {
                text: "b".into(),
                vector: vec_of(vec![1.0]),
            },
        );
        assert!(matches!(c.get("local-test", "m", "a"), Err(EmbedError::Integrity(_))));
    }
}
