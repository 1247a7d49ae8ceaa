//! Binary embedding cache.
//!
//! Layout: magic `EMBC`, format version, header {d, count, dtype=f32},
//! a key-index table, then `count` contiguous row-major f32 vectors.
//! Keys are image ids or prompt-text hashes. Vectors are stored as f32
//! regardless of the in-memory scalar type.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

const MAGIC: &[u8; 4] = b"EMBC";
const FORMAT_VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

/// In-memory embedding cache with stable insertion order.
#[derive(Debug, Clone)]
pub struct EmbeddingCache {
    d: usize,
    keys: Vec<String>,
    index: HashMap<String, usize>,
    data: Vec<f32>,
}

impl EmbeddingCache {
    pub fn new(d: usize) -> Self {
        EmbeddingCache {
            d,
            keys: Vec::new(),
            index: HashMap::new(),
            data: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn contains(&self, key: &str) -> bool {
        self.index.contains_key(key)
    }

    /// Insert a vector under `key`. Returns false (and stores nothing) if
    /// the key is already cached.
    pub fn insert<T: Scalar>(&mut self, key: &str, values: &[T]) -> Result<bool> {
        if values.len() != self.d {
            return Err(Error::ShapeMismatch {
                context: format!("cache row for key {key}"),
                expected: format!("{}", self.d),
                actual: format!("{}", values.len()),
            });
        }
        if self.contains(key) {
            return Ok(false);
        }
        self.index.insert(key.to_string(), self.keys.len());
        self.keys.push(key.to_string());
        self.data.extend(values.iter().map(|v| v.as_f64() as f32));
        Ok(true)
    }

    pub fn get<T: Scalar>(&self, key: &str) -> Option<Vec<T>> {
        let row = *self.index.get(key)?;
        let start = row * self.d;
        Some(
            self.data[start..start + self.d]
                .iter()
                .map(|&v| T::from_f64(v as f64))
                .collect(),
        )
    }

    pub fn keys(&self) -> &[String] {
        &self.keys
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(MAGIC)?;
        f.write_all(&FORMAT_VERSION.to_le_bytes())?;
        f.write_all(&(self.d as u32).to_le_bytes())?;
        f.write_all(&(self.keys.len() as u32).to_le_bytes())?;
        f.write_all(&[DTYPE_F32])?;
        for (i, key) in self.keys.iter().enumerate() {
            f.write_all(&(key.len() as u32).to_le_bytes())?;
            f.write_all(key.as_bytes())?;
            f.write_all(&(i as u32).to_le_bytes())?;
        }
        for v in &self.data {
            f.write_all(&v.to_le_bytes())?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let corrupt = |reason: &str| Error::CacheCorrupt {
            path: path.display().to_string(),
            reason: reason.to_string(),
        };
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 4];
        f.read_exact(&mut magic).map_err(|_| corrupt("truncated magic"))?;
        if &magic != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let mut u32buf = [0u8; 4];
        f.read_exact(&mut u32buf).map_err(|_| corrupt("truncated version"))?;
        if u32::from_le_bytes(u32buf) != FORMAT_VERSION {
            return Err(corrupt("unsupported format version"));
        }
        f.read_exact(&mut u32buf).map_err(|_| corrupt("truncated dim"))?;
        let d = u32::from_le_bytes(u32buf) as usize;
        f.read_exact(&mut u32buf).map_err(|_| corrupt("truncated count"))?;
        let count = u32::from_le_bytes(u32buf) as usize;
        let mut dtype = [0u8; 1];
        f.read_exact(&mut dtype).map_err(|_| corrupt("truncated dtype"))?;
        if dtype[0] != DTYPE_F32 {
            return Err(corrupt("unsupported dtype"));
        }
        let mut cache = EmbeddingCache::new(d);
        let mut rows = vec![usize::MAX; count];
        for _ in 0..count {
            f.read_exact(&mut u32buf).map_err(|_| corrupt("truncated key table"))?;
            let key_len = u32::from_le_bytes(u32buf) as usize;
            let mut key_bytes = vec![0u8; key_len];
            f.read_exact(&mut key_bytes).map_err(|_| corrupt("truncated key"))?;
            let key = String::from_utf8(key_bytes).map_err(|_| corrupt("non-utf8 key"))?;
            f.read_exact(&mut u32buf).map_err(|_| corrupt("truncated row index"))?;
            let row = u32::from_le_bytes(u32buf) as usize;
            if row >= count || rows[row] != usize::MAX {
                return Err(corrupt("invalid row index"));
            }
            rows[row] = cache.keys.len();
            cache.index.insert(key.clone(), cache.keys.len());
            cache.keys.push(key);
        }
        let mut data = vec![0u8; count * d * 4];
        f.read_exact(&mut data).map_err(|_| corrupt("truncated data"))?;
        let mut trailing = [0u8; 1];
        if f.read(&mut trailing)? != 0 {
            return Err(corrupt("trailing bytes"));
        }
        cache.data = data
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        // Reorder rows to match the key table if they were permuted.
        if rows.iter().enumerate().any(|(i, &r)| i != r) {
            let mut reordered = vec![0f32; cache.data.len()];
            for (file_row, &key_pos) in rows.iter().enumerate() {
                let src = &cache.data[file_row * d..(file_row + 1) * d];
                reordered[key_pos * d..(key_pos + 1) * d].copy_from_slice(src);
            }
            cache.data = reordered;
        }
        Ok(cache)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_keys_and_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.bin");
        let mut cache = EmbeddingCache::new(3);
        assert!(cache.insert("a", &[1.0f64, 2.0, 3.0]).unwrap());
        assert!(cache.insert("b", &[4.0f64, 5.0, 6.0]).unwrap());
        assert!(!cache.insert("a", &[9.0f64, 9.0, 9.0]).unwrap());
        cache.save(&path).unwrap();
        let loaded = EmbeddingCache::load(&path).unwrap();
        assert_eq!(loaded.len(), 2);
        assert_eq!(loaded.keys(), cache.keys());
        assert_eq!(loaded.get::<f64>("a").unwrap(), vec![1.0, 2.0, 3.0]);
        assert_eq!(loaded.get::<f32>("b").unwrap(), vec![4.0f32, 5.0, 6.0]);
    }

    #[test]
    fn corrupt_header_instructs_rebuild() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.bin");
        std::fs::write(&path, b"NOPE....").unwrap();
        let err = EmbeddingCache::load(&path).unwrap_err();
        assert!(err.to_string().contains("rebuild"));
    }

    #[test]
    fn truncated_data_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.bin");
        let mut cache = EmbeddingCache::new(4);
        cache.insert("k", &[1.0f64, 2.0, 3.0, 4.0]).unwrap();
        cache.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(
            EmbeddingCache::load(&path),
            Err(Error::CacheCorrupt { .. })
        ));
    }

    #[test]
    fn wrong_dim_rejected() {
        let mut cache = EmbeddingCache::new(2);
        assert!(cache.insert("k", &[1.0f64]).is_err());
    }
}
