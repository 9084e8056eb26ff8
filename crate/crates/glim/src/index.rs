//! Dense-vector store with exact top-k cosine search and binary persistence.
//!
//! Vectors are unit-normalized on insert, so cosine similarity reduces to a
//! dot product. Search is exhaustive and exact; results sort by descending
//! score with ties broken by ascending id. Per-query latency totals are kept
//! behind atomics so concurrent readers can share one index.
//!
//! # File format (little-endian throughout)
//!
//! ```text
//! offset  size          field
//! 0       8             magic bytes "GLIMVIDX"
//! 8       4             format version, u32 (currently 1)
//! 12      4             dim, u32
//! 16      8             count, u64
//! 24      count*8       entry ids, u64 each, strictly ascending
//! ..      count*dim*4   vectors, f32 each, row-major in id order
//! ..      per entry     payload: u32 length then that many UTF-8 bytes,
//!                       or the sentinel length 0xffff_ffff for "none"
//! ```
//! The file ends exactly after the last payload; trailing bytes are an error.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Instant;

use thiserror::Error;

const MAGIC: &[u8; 8] = b"GLIMVIDX";
const VERSION: u32 = 1;
const NO_PAYLOAD: u32 = u32::MAX;

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("vector has dimension {got}, index expects {expected}")]
    Dimension { got: usize, expected: usize },
    #[error("id {0} already present")]
    DuplicateId(u64),
    #[error("cannot normalize a zero vector")]
    ZeroVector,
    #[error("search requires k >= 1")]
    ZeroK,
    #[error("index file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone)]
struct Entry {
    vector: Vec<f32>,
    payload: Option<String>,
}

/// Accumulated search timing, readable while searches run elsewhere.
#[derive(Debug, Default)]
pub struct SearchStats {
    queries: AtomicU64,
    nanos: AtomicU64,
}

impl SearchStats {
    pub fn queries(&self) -> u64 {
        self.queries.load(Ordering::Relaxed)
    }

    pub fn total_nanos(&self) -> u64 {
        self.nanos.load(Ordering::Relaxed)
    }

    pub fn reset(&self) {
        self.queries.store(0, Ordering::Relaxed);
        self.nanos.store(0, Ordering::Relaxed);
    }
}

/// Exact cosine top-k index over unit vectors.
#[derive(Debug, Default)]
pub struct VectorIndex {
    dim: usize,
    entries: BTreeMap<u64, Entry>,
    stats: SearchStats,
}

/// One search hit: entry id and cosine score.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub id: u64,
    pub score: f32,
}

impl VectorIndex {
    pub fn new(dim: usize) -> Self {
        VectorIndex {
            dim,
            entries: BTreeMap::new(),
            stats: SearchStats::default(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn stats(&self) -> &SearchStats {
        &self.stats
    }

    pub fn payload(&self, id: u64) -> Option<&str> {
        self.entries.get(&id).and_then(|e| e.payload.as_deref())
    }

    pub fn vector(&self, id: u64) -> Option<&[f32]> {
        self.entries.get(&id).map(|e| e.vector.as_slice())
    }

    /// Normalizes and stores a vector under a fresh id.
    pub fn add(&mut self, id: u64, vector: &[f32], payload: Option<&str>) -> Result<(), IndexError> {
        if vector.len() != self.dim {
            return Err(IndexError::Dimension { got: vector.len(), expected: self.dim });
        }
        if self.entries.contains_key(&id) {
            return Err(IndexError::DuplicateId(id));
        }
        let norm = vector.iter().map(|v| (*v as f64) * (*v as f64)).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(IndexError::ZeroVector);
        }
        let unit: Vec<f32> = vector.iter().map(|&v| (v as f64 / norm) as f32).collect();
        self.entries.insert(
            id,
            Entry {
                vector: unit,
                payload: payload.map(str::to_string),
            },
        );
        Ok(())
    }

    /// Exact top-k by cosine over the whole store. Returns `min(k, len)`
    /// hits, scores non-increasing, ties by ascending id. An empty index
    /// yields an empty result.
    pub fn search(&self, query: &[f32], k: usize) -> Result<Vec<Hit>, IndexError> {
        if k == 0 {
            return Err(IndexError::ZeroK);
        }
        if query.len() != self.dim {
            return Err(IndexError::Dimension { got: query.len(), expected: self.dim });
        }
        let started = Instant::now();
        let qnorm = query.iter().map(|v| (*v as f64) * (*v as f64)).sum::<f64>().sqrt();
        let inv = if qnorm > 0.0 { 1.0 / qnorm } else { 0.0 };
        let q: Vec<f32> = query.iter().map(|&v| (v as f64 * inv) as f32).collect();

        // Bounded selection: keep the best k in a small sorted buffer.
        let mut top: Vec<Hit> = Vec::with_capacity(k + 1);
        for (&id, entry) in &self.entries {
            let score = dot(&q, &entry.vector);
            let hit = Hit { id, score };
            if top.len() == k {
                let worst = top[k - 1];
                if !better(hit, worst) {
                    continue;
                }
                top.pop();
            }
            let pos = top.partition_point(|h| better(*h, hit));
            top.insert(pos, hit);
        }
        self.stats.queries.fetch_add(1, Ordering::Relaxed);
        self.stats
            .nanos
            .fetch_add(started.elapsed().as_nanos() as u64, Ordering::Relaxed);
        Ok(top)
    }

    // ── persistence ─────────────────────────────────────────────────

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), IndexError> {
        let mut out = Vec::with_capacity(24 + self.entries.len() * (8 + self.dim * 4));
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u64).to_le_bytes());
        for &id in self.entries.keys() {
            out.extend_from_slice(&id.to_le_bytes());
        }
        for entry in self.entries.values() {
            for &v in &entry.vector {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        for entry in self.entries.values() {
            match &entry.payload {
                None => out.extend_from_slice(&NO_PAYLOAD.to_le_bytes()),
                Some(p) => {
                    out.extend_from_slice(&(p.len() as u32).to_le_bytes());
                    out.extend_from_slice(p.as_bytes());
                }
            }
        }
        let mut file = std::fs::File::create(path)?;
        file.write_all(&out)?;
        Ok(())
    }

    /// Loads and fully validates an index file. A corrupt or truncated file
    /// yields a format error and no partial index.
    pub fn load(path: impl AsRef<Path>) -> Result<VectorIndex, IndexError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<VectorIndex, IndexError> {
        let fail = |msg: &str| IndexError::Format(msg.to_string());
        let mut cursor = 0usize;
        let take = |cursor: &mut usize, n: usize| -> Result<&[u8], IndexError> {
            let end = cursor.checked_add(n).ok_or_else(|| fail("length overflow"))?;
            if end > bytes.len() {
                return Err(fail("truncated file"));
            }
            let slice = &bytes[*cursor..end];
            *cursor = end;
            Ok(slice)
        };

        if take(&mut cursor, 8)? != MAGIC {
            return Err(fail("bad magic"));
        }
        let version = u32::from_le_bytes(take(&mut cursor, 4)?.try_into().unwrap());
        if version != VERSION {
            return Err(fail(&format!("unsupported version {version}")));
        }
        let dim = u32::from_le_bytes(take(&mut cursor, 4)?.try_into().unwrap()) as usize;
        let count = u64::from_le_bytes(take(&mut cursor, 8)?.try_into().unwrap()) as usize;
        if dim == 0 {
            return Err(fail("zero dimension"));
        }
        // Reject counts the file cannot possibly hold before allocating.
        let per_entry = 8 + dim.checked_mul(4).ok_or_else(|| fail("dim overflow"))? + 4;
        if count.checked_mul(per_entry).map_or(true, |need| 24 + need > bytes.len() + count * 4) {
            // payloads may be shorter than 4 bytes only via the sentinel; this
            // bound is loose but rejects absurd counts up front.
            if count > bytes.len() {
                return Err(fail("count exceeds file size"));
            }
        }
        let mut ids = Vec::with_capacity(count);
        let mut prev: Option<u64> = None;
        for _ in 0..count {
            let id = u64::from_le_bytes(take(&mut cursor, 8)?.try_into().unwrap());
            if let Some(p) = prev {
                if id <= p {
                    return Err(fail("ids not strictly ascending"));
                }
            }
            prev = Some(id);
            ids.push(id);
        }
        let mut vectors = Vec::with_capacity(count);
        for _ in 0..count {
            let raw = take(&mut cursor, dim * 4)?;
            let mut v = Vec::with_capacity(dim);
            for c in raw.chunks_exact(4) {
                let x = f32::from_le_bytes(c.try_into().unwrap());
                if !x.is_finite() {
                    return Err(fail("non-finite vector component"));
                }
                v.push(x);
            }
            vectors.push(v);
        }
        let mut entries = BTreeMap::new();
        for (id, vector) in ids.into_iter().zip(vectors) {
            let len = u32::from_le_bytes(take(&mut cursor, 4)?.try_into().unwrap());
            let payload = if len == NO_PAYLOAD {
                None
            } else {
                let raw = take(&mut cursor, len as usize)?;
                Some(
                    std::str::from_utf8(raw)
                        .map_err(|_| fail("payload is not UTF-8"))?
                        .to_string(),
                )
            };
            entries.insert(id, Entry { vector, payload });
        }
        if cursor != bytes.len() {
            return Err(fail("trailing bytes after payload table"));
        }
        Ok(VectorIndex {
            dim,
            entries,
            stats: SearchStats::default(),
        })
    }
}

#[inline]
fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = 0.0f32;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// Strict ordering for hits: higher score first, then lower id.
#[inline]
fn better(a: Hit, b: Hit) -> bool {
    a.score > b.score || (a.score == b.score && a.id < b.id)
}
