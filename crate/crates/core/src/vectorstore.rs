//! Exact (flat) cosine top-k retrieval over the embedded sample space.
//!
//! Index file layout, little-endian:
//!
//! ```text
//! b"VIDX" | version: u8 (= 1) | dim: u32
//! provider_len: u32 | provider | model_len: u32 | model
//! count: u64 | count x (id: u64 | dim x f64)
//! ```

use std::cmp::Ordering;
use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embeddings::EmbeddingVector;

pub const INDEX_MAGIC: &[u8; 4] = b"VIDX";
pub const INDEX_VERSION: u8 = 1;

#[derive(Debug, Error, PartialEq)]
pub enum IndexError {
    #[error("cannot build an empty index")]
    Empty,
    #[error("entry {id}: dimension {found}, index dimension {expected}")]
    Dimension { id: usize, expected: usize, found: usize },
    #[error("duplicate sentence id {0}")]
    DuplicateId(usize),
    #[error("entry {id}: embedded by {found:?}, index holds {expected:?}")]
    Fingerprint {
        id: usize,
        expected: Fingerprint,
        found: Fingerprint,
    },
    #[error("{0} has zero norm; cosine similarity is undefined")]
    Degenerate(String),
    #[error("k must be at least 1")]
    ZeroK,
    #[error("index file: {0}")]
    Format(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fingerprint {
    pub provider_id: String,
    pub model_id: String,
}

impl Fingerprint {
    pub fn of(v: &EmbeddingVector) -> Self {
        Fingerprint {
            provider_id: v.provider_id.clone(),
            model_id: v.model_id.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalHit {
    pub sentence_id: usize,
    pub score: f64,
    pub rank: usize,
}

/// Immutable flat index. Vectors are stored as given; norms are cached.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorIndex {
    dim: usize,
    fingerprint: Fingerprint,
    ids: Vec<usize>,
    data: Vec<f64>,
    norms: Vec<f64>,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Descending score, then ascending id.
fn hit_order(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1))
}

pub fn build_index(items: Vec<(usize, EmbeddingVector)>) -> Result<VectorIndex, IndexError> {
    let first = items.first().ok_or(IndexError::Empty)?;
    let dim = first.1.dim();
    let fingerprint = Fingerprint::of(&first.1);
    let mut seen = HashSet::with_capacity(items.len());
    let mut ids = Vec::with_capacity(items.len());
    let mut data = Vec::with_capacity(items.len() * dim);
    let mut norms = Vec::with_capacity(items.len());
    for (id, v) in items {
        if v.dim() != dim || dim == 0 {
            return Err(IndexError::Dimension {
                id,
                expected: dim,
                found: v.dim(),
            });
        }
        let fp = Fingerprint::of(&v);
        if fp != fingerprint {
            return Err(IndexError::Fingerprint {
                id,
                expected: fingerprint,
                found: fp,
            });
        }
        if !seen.insert(id) {
            return Err(IndexError::DuplicateId(id));
        }
        let n = norm(&v.values);
        if n == 0.0 || !n.is_finite() {
            return Err(IndexError::Degenerate(format!("stored vector {id}")));
        }
        ids.push(id);
        norms.push(n);
        data.extend_from_slice(&v.values);
    }
    Ok(VectorIndex {
        dim,
        fingerprint,
        ids,
        data,
        norms,
    })
}

impl VectorIndex {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn fingerprint(&self) -> &Fingerprint {
        &self.fingerprint
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn vector(&self, pos: usize) -> &[f64] {
        &self.data[pos * self.dim..(pos + 1) * self.dim]
    }

    /// Top `min(k, len)` entries by cosine similarity, ties by ascending id.
    pub fn query_top_k(&self, query: &[f64], k: usize) -> Result<Vec<RetrievalHit>, IndexError> {
        if k == 0 {
            return Err(IndexError::ZeroK);
        }
        if query.len() != self.dim {
            return Err(IndexError::Dimension {
                id: usize::MAX,
                expected: self.dim,
                found: query.len(),
            });
        }
        let qn = norm(query);
        if qn == 0.0 || !qn.is_finite() {
            return Err(IndexError::Degenerate("query vector".into()));
        }
        let mut scored: Vec<(f64, usize)> = (0..self.len())
            .map(|pos| {
                let cos = dot(query, self.vector(pos)) / (qn * self.norms[pos]);
                (cos, self.ids[pos])
            })
            .collect();
        let k = k.min(scored.len());
        if k < scored.len() {
            scored.select_nth_unstable_by(k - 1, hit_order);
            scored.truncate(k);
        }
        scored.sort_by(hit_order);
        Ok(scored
            .into_iter()
            .enumerate()
            .map(|(i, (score, sentence_id))| RetrievalHit {
                sentence_id,
                score,
                rank: i + 1,
            })
            .collect())
    }

    pub fn query(&self, query: &EmbeddingVector, k: usize) -> Result<Vec<RetrievalHit>, IndexError> {
        let fp = Fingerprint::of(query);
        if fp != self.fingerprint {
            return Err(IndexError::Fingerprint {
                id: usize::MAX,
                expected: self.fingerprint.clone(),
                found: fp,
            });
        }
        self.query_top_k(&query.values, k)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(32 + self.data.len() * 8 + self.ids.len() * 8);
        out.extend_from_slice(INDEX_MAGIC);
        out.push(INDEX_VERSION);
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for s in [&self.fingerprint.provider_id, &self.fingerprint.model_id] {
            out.extend_from_slice(&(s.len() as u32).to_le_bytes());
            out.extend_from_slice(s.as_bytes());
        }
        out.extend_from_slice(&(self.ids.len() as u64).to_le_bytes());
        for (pos, id) in self.ids.iter().enumerate() {
            out.extend_from_slice(&(*id as u64).to_le_bytes());
            for x in self.vector(pos) {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    /// Decodes an index file and checks it was built with `expected`.
    pub fn from_bytes(raw: &[u8], expected: &Fingerprint) -> Result<Self, IndexError> {
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8], IndexError> {
            let end = pos
                .checked_add(n)
                .filter(|&e| e <= raw.len())
                .ok_or_else(|| IndexError::Format(format!("truncated at byte {pos}")))?;
            let s = &raw[pos..end];
            pos = end;
            Ok(s)
        };
        if take(4)? != INDEX_MAGIC {
            return Err(IndexError::Format("bad magic".into()));
        }
        let version = take(1)?[0];
        if version != INDEX_VERSION {
            return Err(IndexError::Format(format!("unsupported version {version}")));
        }
        let dim = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let mut strings = Vec::new();
        for _ in 0..2 {
            let n = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
            let s = String::from_utf8(take(n)?.to_vec()).map_err(|e| IndexError::Format(e.to_string()))?;
            strings.push(s);
        }
        let fingerprint = Fingerprint {
            model_id: strings.pop().unwrap(),
            provider_id: strings.pop().unwrap(),
        };
        if &fingerprint != expected {
            return Err(IndexError::Fingerprint {
                id: usize::MAX,
                expected: expected.clone(),
                found: fingerprint,
            });
        }
        let count = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
        let mut items = Vec::with_capacity(count);
        for _ in 0..count {
            let id = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
            let values = take(dim * 8)?
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                .collect();
            items.push((
                id,
                EmbeddingVector {
                    values,
                    provider_id: fingerprint.provider_id.clone(),
                    model_id: fingerprint.model_id.clone(),
                },
            ));
        }
        if pos != raw.len() {
            return Err(IndexError::Format("trailing bytes".into()));
        }
        build_index(items)
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        crate::io::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path, expected: &Fingerprint) -> Result<Self, IndexError> {
        let raw = std::fs::read(path).map_err(|e| IndexError::Format(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&raw, expected)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;
    use proptest::prelude::*;

    fn ev(values: Vec<f64>) -> EmbeddingVector {
        EmbeddingVector {
            values,
            provider_id: "p".into(),
            model_id: "m".into(),
        }
    }

    fn random_vec(rng: &mut SeededRng, dim: usize) -> Vec<f64> {
        (0..dim)
            .map(|_| (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0)
            .collect()
    }

    /// Scores every entry independently and fully sorts.
    fn brute_force(items: &[(usize, Vec<f64>)], q: &[f64], k: usize) -> Vec<(usize, f64)> {
        let qn = q.iter().map(|x| x * x).sum::<f64>().sqrt();
        let mut all: Vec<(usize, f64)> = items
            .iter()
            .map(|(id, v)| {
                let d: f64 = v.iter().zip(q).map(|(a, b)| a * b).sum();
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                (*id, d / (n * qn))
            })
            .collect();
        all.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        all.truncate(k);
        all
    }

    #[test]
    fn builds_and_validates() {
        let items = (0..3).map(|i| (i, ev(vec![1.0, i as f64, 0.0, 0.5]))).collect();
        assert_eq!(build_index(items).unwrap().len(), 3);
        let dup = vec![(1, ev(vec![1.0; 4])), (1, ev(vec![2.0; 4]))];
        assert_eq!(build_index(dup), Err(IndexError::DuplicateId(1)));
        let mixed = vec![(0, ev(vec![1.0; 4])), (1, ev(vec![1.0; 8]))];
        assert!(matches!(build_index(mixed), Err(IndexError::Dimension { id: 1, .. })));
        assert_eq!(build_index(vec![]), Err(IndexError::Empty));
        assert!(matches!(
            build_index(vec![(0, ev(vec![0.0; 4]))]),
            Err(IndexError::Degenerate(_))
        ));
    }

    #[test]
    fn self_query_ranks_first() {
        let mut rng = SeededRng::new(5);
        let items: Vec<_> = (0..50).map(|i| (i * 3, ev(random_vec(&mut rng, 16)))).collect();
        let idx = build_index(items.clone()).unwrap();
        let hits = idx.query_top_k(&items[17].1.values, 5).unwrap();
        assert_eq!(hits[0].sentence_id, 51);
        assert!((hits[0].score - 1.0).abs() <= 1e-12);
        assert_eq!(hits.iter().map(|h| h.rank).collect::<Vec<_>>(), [1, 2, 3, 4, 5]);
    }

    #[test]
    fn k_clamps_to_index_size() {
        let idx = build_index(vec![(0, ev(vec![1.0, 0.0])), (1, ev(vec![0.0, 1.0]))]).unwrap();
        assert_eq!(idx.query_top_k(&[1.0, 1.0], 10).unwrap().len(), 2);
        assert_eq!(idx.query_top_k(&[1.0, 1.0], 0), Err(IndexError::ZeroK));
        assert!(matches!(
            idx.query_top_k(&[0.0, 0.0], 1),
            Err(IndexError::Degenerate(_))
        ));
        assert!(matches!(idx.query_top_k(&[1.0], 1), Err(IndexError::Dimension { .. })));
    }

    #[test]
    fn ties_break_by_ascending_id() {
        let items = vec![
            (9, ev(vec![1.0, 0.0])),
            (2, ev(vec![2.0, 0.0])),
            (5, ev(vec![0.0, 1.0])),
        ];
        let hits = build_index(items).unwrap().query_top_k(&[1.0, 0.0], 3).unwrap();
        assert_eq!(hits.iter().map(|h| h.sentence_id).collect::<Vec<_>>(), [2, 9, 5]);
    }

    #[test]
    fn matches_brute_force_oracle() {
        let mut rng = SeededRng::new(99);
        let items: Vec<(usize, Vec<f64>)> = (0..200).map(|i| (i, random_vec(&mut rng, 64))).collect();
        let idx = build_index(items.iter().map(|(i, v)| (*i, ev(v.clone()))).collect()).unwrap();
        for _ in 0..50 {
            let q = random_vec(&mut rng, 64);
            let got: Vec<(usize, f64)> = idx
                .query_top_k(&q, 10)
                .unwrap()
                .into_iter()
                .map(|h| (h.sentence_id, h.score))
                .collect();
            let want = brute_force(&items, &q, 10);
            assert_eq!(
                got.iter().map(|g| g.0).collect::<Vec<_>>(),
                want.iter().map(|w| w.0).collect::<Vec<_>>()
            );
            for (g, w) in got.iter().zip(&want) {
                assert!((g.1 - w.1).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn file_round_trip_checks_fingerprint() {
        let items = (0..4).map(|i| (i, ev(vec![i as f64 + 0.5, -1.0, 1e-300]))).collect();
        let idx = build_index(items).unwrap();
        let fp = idx.fingerprint().clone();
        let back = VectorIndex::from_bytes(&idx.to_bytes(), &fp).unwrap();
        assert_eq!(back, idx);
        let other = Fingerprint {
            provider_id: "p".into(),
            model_id: "other".into(),
        };
        assert!(matches!(
            VectorIndex::from_bytes(&idx.to_bytes(), &other),
            Err(IndexError::Fingerprint { .. })
        ));
        let bytes = idx.to_bytes();
        assert!(VectorIndex::from_bytes(&bytes[..bytes.len() - 1], &fp).is_err());
    }

    proptest! {
        #[test]
        fn positive_scaling_keeps_ranking(seed in any::<u64>(), scale in 0.001f64..1000.0, which in 0usize..30) {
            let mut rng = SeededRng::new(seed);
            let items: Vec<(usize, Vec<f64>)> = (0..30).map(|i| (i, random_vec(&mut rng, 8))).collect();
            let q = random_vec(&mut rng, 8);
            let idx = build_index(items.iter().map(|(i, v)| (*i, ev(v.clone()))).collect()).unwrap();
            let scaled = build_index(
                items
                    .iter()
                    .map(|(i, v)| {
                        let c = if *i == which { scale } else { 1.0 };
                        (*i, ev(v.iter().map(|x| x * c).collect()))
                    })
                    .collect(),
            )
            .unwrap();
            let a = idx.query_top_k(&q, 10).unwrap();
            let b = scaled.query_top_k(&q, 10).unwrap();
            prop_assert_eq!(
                a.iter().map(|h| h.sentence_id).collect::<Vec<_>>(),
                b.iter().map(|h| h.sentence_id).collect::<Vec<_>>()
            );
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x.score - y.score).abs() <= 1e-12);
            }
            prop_assert_eq!(a, idx.query_top_k(&q, 10).unwrap());
        }
    }
}
