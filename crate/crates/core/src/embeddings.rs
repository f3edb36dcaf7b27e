//! Embedding persistence, cosine similarity and exact nearest neighbours.
//!
//! On-disk layout of an `.aroe` payload (all integers little-endian):
//!
//! ```text
//! magic    4 bytes  "AROE"
//! version  u32      1
//! kind     u8       0 = image, 1 = text
//! dim      u32
//! count    u64
//! data     count × dim f32, row-major
//! ```
//!
//! Row ids live in a sidecar JSON Lines manifest (`<path>.ids.jsonl`), one
//! `{"index", "id", "kind"}` object per row.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"AROE";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 1 + 4 + 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingKind {
    Image,
    Text,
}

impl EmbeddingKind {
    fn code(self) -> u8 {
        match self {
            EmbeddingKind::Image => 0,
            EmbeddingKind::Text => 1,
        }
    }

    fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(EmbeddingKind::Image),
            1 => Ok(EmbeddingKind::Text),
            c => Err(Error::Format(format!("unknown embedding kind code {c}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ManifestRow {
    index: u64,
    id: String,
    kind: EmbeddingKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    kind: EmbeddingKind,
    dim: usize,
    ids: Vec<String>,
    data: Vec<f32>,
    index: HashMap<String, usize>,
}

impl EmbeddingSet {
    pub fn new(kind: EmbeddingKind, dim: usize, ids: Vec<String>, data: Vec<f32>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("embedding dimension must be positive"));
        }
        if data.len() != ids.len() * dim {
            return Err(Error::DimMismatch {
                expected: ids.len() * dim,
                found: data.len(),
            });
        }
        let mut index = HashMap::with_capacity(ids.len());
        for (i, id) in ids.iter().enumerate() {
            if index.insert(id.clone(), i).is_some() {
                return Err(Error::Format(format!("duplicate id {id:?}")));
            }
        }
        Ok(Self {
            kind,
            dim,
            ids,
            data,
            index,
        })
    }

    /// Builds a set from `(id, vector)` rows, rounding to 32-bit storage.
    pub fn from_rows<I, S>(kind: EmbeddingKind, dim: usize, rows: I) -> Result<Self>
    where
        I: IntoIterator<Item = (S, Vec<f64>)>,
        S: Into<String>,
    {
        let mut ids = Vec::new();
        let mut data = Vec::new();
        for (id, v) in rows {
            if v.len() != dim {
                return Err(Error::DimMismatch {
                    expected: dim,
                    found: v.len(),
                });
            }
            ids.push(id.into());
            data.extend(v.iter().map(|&x| x as f32));
        }
        Self::new(kind, dim, ids, data)
    }

    pub fn kind(&self) -> EmbeddingKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn get(&self, id: &str) -> Option<&[f32]> {
        self.position(id).map(|i| self.row(i))
    }

    pub fn row_f64(&self, i: usize) -> Vec<f64> {
        self.row(i).iter().map(|&x| f64::from(x)).collect()
    }

    /// Rescales every row to unit L2 norm (norm computed in 64-bit).
    pub fn normalize(&mut self) -> Result<()> {
        for i in 0..self.len() {
            let n = norm(self.row(i));
            if n == 0.0 || !n.is_finite() {
                return Err(Error::ZeroNorm {
                    row: i,
                    id: self.ids[i].clone(),
                });
            }
            let dim = self.dim;
            for x in &mut self.data[i * dim..(i + 1) * dim] {
                *x = (f64::from(*x) / n) as f32;
            }
        }
        Ok(())
    }

    pub fn normalized(mut self) -> Result<Self> {
        self.normalize()?;
        Ok(self)
    }

    /// Rows reordered by `order` (a list of positions).
    pub fn select(&self, order: &[usize]) -> Result<Self> {
        let ids = order.iter().map(|&i| self.ids[i].clone()).collect();
        let data = order.iter().flat_map(|&i| self.row(i).iter().copied()).collect();
        Self::new(self.kind, self.dim, ids, data)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.data.len() * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.kind.code());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.ids.len() as u64).to_le_bytes());
        for x in &self.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out
    }

    pub fn encode_manifest(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for (i, id) in self.ids.iter().enumerate() {
            let row = ManifestRow {
                index: i as u64,
                id: id.clone(),
                kind: self.kind,
            };
            serde_json::to_writer(&mut out, &row).expect("in-memory write");
            out.push(b'\n');
        }
        out
    }

    pub fn decode(payload: &[u8], manifest: &str) -> Result<Self> {
        if payload.len() < HEADER_LEN {
            return Err(Error::Format("truncated header".into()));
        }
        if &payload[..4] != MAGIC {
            return Err(Error::Format(format!("bad magic {:?}", &payload[..4])));
        }
        let u32_at = |o: usize| u32::from_le_bytes(payload[o..o + 4].try_into().expect("4 bytes"));
        let version = u32_at(4);
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let kind = EmbeddingKind::from_code(payload[8])?;
        let dim = u32_at(9) as usize;
        let count = u64::from_le_bytes(payload[13..21].try_into().expect("8 bytes"));
        let expected = usize::try_from(count)
            .ok()
            .and_then(|c| c.checked_mul(dim))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Format("row count overflows".into()))?;
        let body = &payload[HEADER_LEN..];
        if body.len() != expected {
            return Err(Error::Format(format!(
                "payload holds {} bytes, header promises {expected}",
                body.len()
            )));
        }
        let data = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();

        let rows: Vec<ManifestRow> = crate::io::read_jsonl(manifest.as_bytes())?;
        if rows.len() as u64 != count {
            return Err(Error::Format(format!(
                "manifest lists {} rows, payload holds {count}",
                rows.len()
            )));
        }
        let mut ids = Vec::with_capacity(rows.len());
        for (i, r) in rows.into_iter().enumerate() {
            if r.index != i as u64 {
                return Err(Error::Format(format!(
                    "manifest row {i} carries index {}",
                    r.index
                )));
            }
            if r.kind != kind {
                return Err(Error::Format(format!(
                    "manifest row {i} has kind {:?}, payload is {kind:?}",
                    r.kind
                )));
            }
            ids.push(r.id);
        }
        Self::new(kind, dim, ids, data)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.encode())?;
        write_file(&manifest_path(path), &self.encode_manifest())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let payload = fs::read(path).map_err(|e| Error::io(path, e))?;
        let mpath = manifest_path(path);
        let manifest = fs::read_to_string(&mpath).map_err(|e| Error::io(mpath, e))?;
        Self::decode(&payload, &manifest)
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

/// Sidecar id manifest for an `.aroe` payload.
pub fn manifest_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".ids.jsonl");
    PathBuf::from(s)
}

pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| f64::from(x) * f64::from(y))
        .sum()
}

pub fn norm(a: &[f32]) -> f64 {
    dot(a, a).sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    pub row_ids: Vec<String>,
    pub col_ids: Vec<String>,
    /// Row-major `row_ids.len() × col_ids.len()`.
    pub values: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn rows(&self) -> usize {
        self.row_ids.len()
    }

    pub fn cols(&self) -> usize {
        self.col_ids.len()
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols() + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.values[r * self.cols()..(r + 1) * self.cols()]
    }
}

fn row_norms(set: &EmbeddingSet) -> Result<Vec<f64>> {
    (0..set.len())
        .map(|i| {
            let n = norm(set.row(i));
            if n > 0.0 && n.is_finite() {
                Ok(n)
            } else {
                Err(Error::ZeroNorm {
                    row: i,
                    id: set.ids[i].clone(),
                })
            }
        })
        .collect()
}

/// Cosine similarity of every row of `a` against every row of `b`.
pub fn cosine_matrix(a: &EmbeddingSet, b: &EmbeddingSet) -> Result<SimilarityMatrix> {
    if a.dim != b.dim {
        return Err(Error::DimMismatch {
            expected: a.dim,
            found: b.dim,
        });
    }
    let (na, nb) = (row_norms(a)?, row_norms(b)?);
    let values: Vec<f64> = (0..a.len())
        .into_par_iter()
        .flat_map_iter(|j| {
            let (na, nb) = (&na, &nb);
            (0..b.len()).map(move |k| dot(a.row(j), b.row(k)) / (na[j] * nb[k]))
        })
        .collect();
    Ok(SimilarityMatrix {
        row_ids: a.ids.clone(),
        col_ids: b.ids.clone(),
        values,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub id: String,
    pub index: usize,
    pub similarity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighborTable {
    pub ids: Vec<String>,
    pub k: usize,
    pub neighbors: Vec<Vec<Neighbor>>,
}

impl NeighborTable {
    pub fn get(&self, id: &str) -> Option<&[Neighbor]> {
        self.ids
            .iter()
            .position(|x| x == id)
            .map(|i| self.neighbors[i].as_slice())
    }
}

/// Descending similarity, ascending id on ties.
pub fn rank_order(sim_a: f64, id_a: &str, sim_b: f64, id_b: &str) -> Ordering {
    sim_b
        .partial_cmp(&sim_a)
        .unwrap_or(Ordering::Equal)
        .then_with(|| id_a.cmp(id_b))
}

/// Exact cosine top-`k` for every row, excluding the row itself.
pub fn top_k_neighbors(set: &EmbeddingSet, k: usize) -> Result<NeighborTable> {
    if k < 1 {
        return Err(Error::invalid("k must be at least 1"));
    }
    if set.len() < 2 {
        return Err(Error::invalid("need at least two rows to mine neighbours"));
    }
    let norms = row_norms(set)?;
    let take = k.min(set.len() - 1);
    let neighbors = (0..set.len())
        .into_par_iter()
        .map(|i| {
            let mut cands: Vec<(usize, f64)> = (0..set.len())
                .filter(|&j| j != i)
                .map(|j| (j, dot(set.row(i), set.row(j)) / (norms[i] * norms[j])))
                .collect();
            let cmp = |a: &(usize, f64), b: &(usize, f64)| rank_order(a.1, &set.ids[a.0], b.1, &set.ids[b.0]);
            if take < cands.len() {
                cands.select_nth_unstable_by(take - 1, cmp);
                cands.truncate(take);
            }
            cands.sort_by(cmp);
            cands
                .into_iter()
                .map(|(j, similarity)| Neighbor {
                    id: set.ids[j].clone(),
                    index: j,
                    similarity,
                })
                .collect()
        })
        .collect();
    Ok(NeighborTable {
        ids: set.ids.clone(),
        k: take,
        neighbors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn random_set(kind: EmbeddingKind, n: usize, d: usize, seed: u64) -> EmbeddingSet {
        let mut rng = SplitMix64::new(seed);
        EmbeddingSet::from_rows(
            kind,
            d,
            (0..n).map(|i| (format!("r{i:04}"), (0..d).map(|_| rng.normal()).collect())),
        )
        .unwrap()
    }

    #[test]
    fn save_load_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.aroe");
        let set = random_set(EmbeddingKind::Text, 10, 8, 1);
        set.save(&path).unwrap();
        let back = EmbeddingSet::load(&path).unwrap();
        assert_eq!(back.encode(), set.encode());
        assert_eq!(back.ids(), set.ids());
        assert_eq!(fs::read(&path).unwrap(), set.encode());
    }

    #[test]
    fn header_layout() {
        let set = EmbeddingSet::new(EmbeddingKind::Image, 2, vec!["a".into()], vec![1.0, -2.0]).unwrap();
        let bytes = set.encode();
        assert_eq!(&bytes[..4], b"AROE");
        assert_eq!(&bytes[4..8], &[1, 0, 0, 0]);
        assert_eq!(bytes[8], 0);
        assert_eq!(&bytes[9..13], &[2, 0, 0, 0]);
        assert_eq!(&bytes[13..21], &[1, 0, 0, 0, 0, 0, 0, 0]);
        assert_eq!(&bytes[21..25], &1.0f32.to_le_bytes());
        assert_eq!(bytes.len(), 29);
    }

    #[test]
    fn decode_rejects_corruption() {
        let set = random_set(EmbeddingKind::Image, 3, 4, 2);
        let (payload, manifest) = (set.encode(), String::from_utf8(set.encode_manifest()).unwrap());

        let mut bad = payload.clone();
        bad[0] = b'X';
        assert!(EmbeddingSet::decode(&bad, &manifest).is_err());

        let mut bad = payload.clone();
        bad[4] = 2;
        assert!(EmbeddingSet::decode(&bad, &manifest).is_err());

        assert!(EmbeddingSet::decode(&payload[..payload.len() - 1], &manifest).is_err());
        assert!(EmbeddingSet::decode(&payload[..10], &manifest).is_err());

        let short: String = manifest.lines().take(2).map(|l| format!("{l}\n")).collect();
        assert!(EmbeddingSet::decode(&payload, &short).is_err());

        let dup = manifest.replace("\"r0001\"", "\"r0000\"");
        assert!(EmbeddingSet::decode(&payload, &dup).is_err());

        let wrong_kind = manifest.replace("\"image\"", "\"text\"");
        assert!(EmbeddingSet::decode(&payload, &wrong_kind).is_err());
    }

    #[test]
    fn normalize_gives_unit_rows() {
        let set = random_set(EmbeddingKind::Text, 20, 16, 3).normalized().unwrap();
        for i in 0..set.len() {
            assert!((norm(set.row(i)) - 1.0).abs() < 1e-6);
        }
        let mut zero = EmbeddingSet::new(EmbeddingKind::Text, 2, vec!["z".into()], vec![0.0, 0.0]).unwrap();
        assert!(matches!(zero.normalize(), Err(Error::ZeroNorm { .. })));
    }

    #[test]
    fn cosine_basics() {
        let a = EmbeddingSet::from_rows(EmbeddingKind::Image, 2, [("x", vec![1.0, 0.0]), ("y", vec![0.0, 3.0])]).unwrap();
        let b = EmbeddingSet::from_rows(EmbeddingKind::Text, 2, [("p", vec![2.0, 0.0])]).unwrap();
        let s = cosine_matrix(&a, &b).unwrap();
        assert_eq!(s.get(0, 0), 1.0);
        assert_eq!(s.get(1, 0), 0.0);

        let c = EmbeddingSet::from_rows(EmbeddingKind::Text, 3, [("q", vec![1.0, 0.0, 0.0])]).unwrap();
        assert!(matches!(cosine_matrix(&a, &c), Err(Error::DimMismatch { .. })));
        let z = EmbeddingSet::from_rows(EmbeddingKind::Text, 2, [("z", vec![0.0, 0.0])]).unwrap();
        assert!(matches!(cosine_matrix(&a, &z), Err(Error::ZeroNorm { .. })));
    }

    #[test]
    fn cosine_matches_triple_loop() {
        let a = random_set(EmbeddingKind::Image, 5, 3, 4);
        let b = random_set(EmbeddingKind::Text, 4, 3, 5);
        let s = cosine_matrix(&a, &b).unwrap();
        for j in 0..5 {
            for k in 0..4 {
                let (mut ab, mut aa, mut bb) = (0.0f64, 0.0f64, 0.0f64);
                for t in 0..3 {
                    let (x, y) = (f64::from(a.row(j)[t]), f64::from(b.row(k)[t]));
                    ab += x * y;
                    aa += x * x;
                    bb += y * y;
                }
                assert!((s.get(j, k) - ab / (aa.sqrt() * bb.sqrt())).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn self_similarity_diagonal_is_one() {
        let a = random_set(EmbeddingKind::Image, 30, 12, 6).normalized().unwrap();
        let s = cosine_matrix(&a, &a).unwrap();
        for i in 0..30 {
            assert!((s.get(i, i) - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn accumulation_matches_compensated_sum() {
        let a = random_set(EmbeddingKind::Image, 2, 4096, 7);
        let (x, y) = (a.row(0), a.row(1));
        // Neumaier summation over exact f64 products.
        let (mut sum, mut comp) = (0.0f64, 0.0f64);
        for (&p, &q) in x.iter().zip(y) {
            let term = f64::from(p) * f64::from(q);
            let t = sum + term;
            comp += if sum.abs() >= term.abs() { (sum - t) + term } else { (term - t) + sum };
            sum = t;
        }
        assert!((dot(x, y) - (sum + comp)).abs() < 1e-10);
    }

    #[test]
    fn neighbor_hand_example() {
        let set = EmbeddingSet::from_rows(
            EmbeddingKind::Image,
            2,
            [("e1", vec![1.0, 0.0]), ("e2", vec![0.8, 0.6]), ("e3", vec![0.0, 1.0])],
        )
        .unwrap();
        let t = top_k_neighbors(&set, 1).unwrap();
        assert_eq!(t.get("e1").unwrap()[0].id, "e2");
        assert!((t.get("e1").unwrap()[0].similarity - 0.8).abs() < 1e-7);

        let all = top_k_neighbors(&set, 2).unwrap();
        let ids: Vec<_> = all.neighbors[0].iter().map(|n| n.id.as_str()).collect();
        assert_eq!(ids, vec!["e2", "e3"]);
        assert!(all.neighbors.iter().all(|l| l.len() == 2));

        let capped = top_k_neighbors(&set, 10).unwrap();
        assert!(capped.neighbors.iter().all(|l| l.len() == 2));

        assert!(top_k_neighbors(&set, 0).is_err());
    }

    #[test]
    fn ties_break_by_id() {
        let set = EmbeddingSet::from_rows(
            EmbeddingKind::Image,
            2,
            [("q", vec![1.0, 0.0]), ("b", vec![0.0, 1.0]), ("a", vec![0.0, -1.0])],
        )
        .unwrap();
        let t = top_k_neighbors(&set, 1).unwrap();
        assert_eq!(t.get("q").unwrap()[0].id, "a");
    }
}
