//! Exact maximum-inner-product search over passage embeddings.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::encoder::{EncoderParams, Head};
use crate::error::{read_line, truncated, Result, RomError};
use crate::parallel;

pub const INDEX_MAGIC: &str = "ROMIDX v1";

/// Ranked `(block_id, score)` pairs for one query, best first.
pub type Hits = Vec<(u32, f64)>;

/// Passage embedding matrix with aligned block ids.
///
/// Entries are kept f32-representable so a saved snapshot reloads bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseIndex {
    embeddings: Array2<f64>,
    block_ids: Vec<u32>,
    snapshot_version: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    n_blocks: usize,
    d_proj: usize,
    snapshot_version: u64,
}

impl DenseIndex {
    /// Rows are rounded to f32 precision.
    pub fn new(mut embeddings: Array2<f64>, block_ids: Vec<u32>, snapshot_version: u64) -> Result<Self> {
        if embeddings.nrows() != block_ids.len() {
            return Err(RomError::ShapeMismatch(format!(
                "{} rows for {} block ids",
                embeddings.nrows(),
                block_ids.len()
            )));
        }
        if embeddings.iter().any(|x| !x.is_finite()) {
            return Err(RomError::IncompatibleIndex("non-finite embedding".into()));
        }
        let mut seen = HashSet::with_capacity(block_ids.len());
        if let Some(dup) = block_ids.iter().find(|id| !seen.insert(**id)) {
            return Err(RomError::IncompatibleIndex(format!("duplicate block id {dup}")));
        }
        embeddings.mapv_inplace(|x| x as f32 as f64);
        Ok(DenseIndex {
            embeddings,
            block_ids,
            snapshot_version,
        })
    }

    pub fn embeddings(&self) -> &Array2<f64> {
        &self.embeddings
    }

    pub fn block_ids(&self) -> &[u32] {
        &self.block_ids
    }

    pub fn snapshot_version(&self) -> u64 {
        self.snapshot_version
    }

    pub fn n_blocks(&self) -> usize {
        self.block_ids.len()
    }

    pub fn d_proj(&self) -> usize {
        self.embeddings.ncols()
    }

    /// Inner product of row `row` with `q`, summed left to right.
    pub fn score(&self, row: usize, q: ArrayView1<f64>) -> f64 {
        self.embeddings.row(row).iter().zip(q.iter()).fold(0.0, |acc, (a, b)| acc + a * b)
    }

    /// Exact top-`k` by inner product; ties go to the lower block id.
    pub fn top_k(&self, query: ArrayView1<f64>, k: usize) -> Result<Hits> {
        let n = self.n_blocks();
        if k == 0 || k > n {
            return Err(RomError::KOutOfRange { k, n });
        }
        if query.len() != self.d_proj() {
            return Err(RomError::ShapeMismatch(format!(
                "query dim {} vs index dim {}",
                query.len(),
                self.d_proj()
            )));
        }
        let mut hits: Hits = (0..n).map(|r| (self.block_ids[r], self.score(r, query))).collect();
        if k < n {
            hits.select_nth_unstable_by(k - 1, rank_order);
            hits.truncate(k);
        }
        hits.sort_unstable_by(rank_order);
        Ok(hits)
    }

    /// [`top_k`](Self::top_k) for each row of `queries`, in parallel.
    pub fn top_k_batch(&self, queries: &Array2<f64>, k: usize) -> Result<Vec<Hits>> {
        let rows: Vec<ArrayView1<f64>> = queries.rows().into_iter().collect();
        parallel::map(&rows, |_, q| self.top_k(*q, k)).into_iter().collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(INDEX_MAGIC.as_bytes())?;
        w.write_all(b"\n")?;
        let header = Header {
            n_blocks: self.n_blocks(),
            d_proj: self.d_proj(),
            snapshot_version: self.snapshot_version,
        };
        serde_json::to_writer(&mut *w, &header)?;
        w.write_all(b"\n")?;
        for &x in self.embeddings.iter() {
            w.write_f32::<LittleEndian>(x as f32)?;
        }
        for &id in &self.block_ids {
            w.write_u32::<LittleEndian>(id)?;
        }
        Ok(())
    }

    /// Loads a snapshot; `expected_d_proj` rejects an index built for another model.
    pub fn load(path: &Path, expected_d_proj: Option<usize>) -> Result<Self> {
        if !path.exists() {
            return Err(RomError::MissingPrerequisite(path.to_path_buf()));
        }
        let mut r = BufReader::new(File::open(path)?);
        Self::read_from(&mut r, expected_d_proj)
    }

    pub fn read_from<R: std::io::BufRead>(r: &mut R, expected_d_proj: Option<usize>) -> Result<Self> {
        let magic = read_line(r, 64)?;
        if magic != INDEX_MAGIC.as_bytes() {
            return Err(RomError::IncompatibleIndex(format!(
                "expected `{INDEX_MAGIC}`, found `{}`",
                String::from_utf8_lossy(&magic)
            )));
        }
        let header: Header = serde_json::from_slice(&read_line(r, 4096)?)?;
        if let Some(d) = expected_d_proj {
            if d != header.d_proj {
                return Err(RomError::IncompatibleIndex(format!(
                    "index d_proj {} but model d_proj {d}",
                    header.d_proj
                )));
            }
        }
        let len = header
            .n_blocks
            .checked_mul(header.d_proj)
            .ok_or_else(|| RomError::IncompatibleIndex("header size overflow".into()))?;
        let mut data = vec![0f32; len];
        r.read_f32_into::<LittleEndian>(&mut data).map_err(truncated)?;
        let mut ids = vec![0u32; header.n_blocks];
        r.read_u32_into::<LittleEndian>(&mut ids).map_err(truncated)?;
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(RomError::IncompatibleIndex("trailing bytes".into()));
        }
        let emb = Array2::from_shape_vec((header.n_blocks, header.d_proj), data.into_iter().map(f64::from).collect())
            .map_err(|e| RomError::ShapeMismatch(e.to_string()))?;
        DenseIndex::new(emb, ids, header.snapshot_version)
    }
}

fn rank_order(a: &(u32, f64), b: &(u32, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
}

/// Embeds every block of `corpus` through `head`.
///
/// Blocks are processed `batch_size` at a time; each is embedded
/// independently so the batch size never changes the result.
pub fn build_index(
    params: &EncoderParams,
    corpus: &Corpus,
    head: Head,
    batch_size: usize,
    snapshot_version: u64,
) -> Result<DenseIndex> {
    if corpus.blocks.is_empty() {
        return Err(RomError::EmptyCorpus);
    }
    let batch_size = batch_size.max(1);
    let d = params.config.d_proj;
    let mut emb = Array2::zeros((corpus.n_blocks(), d));
    for (c, chunk) in corpus.blocks.chunks(batch_size).enumerate() {
        let rows = parallel::map(chunk, |_, b| params.embed_passage(&b.title, &b.body, head));
        for (i, row) in rows.into_iter().enumerate() {
            emb.row_mut(c * batch_size + i).assign(&row?);
        }
    }
    let ids = corpus.blocks.iter().map(|b| b.block_id).collect();
    DenseIndex::new(emb, ids, snapshot_version)
}

/// Embeds raw query token sequences through `head`, one row per query.
pub fn embed_queries(params: &EncoderParams, queries: &[Vec<u32>], head: Head) -> Result<Array2<f64>> {
    let rows = parallel::map(queries, |_, q| params.embed_query(q, head));
    let mut out = Array2::zeros((queries.len(), params.config.d_proj));
    for (i, row) in rows.into_iter().enumerate() {
        out.row_mut(i).assign(&row?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn small() -> DenseIndex {
        DenseIndex::new(array![[0.0, 1.0], [2.0, 0.0], [1.0, 0.0], [2.0, 0.0]], vec![10, 11, 12, 9], 3).unwrap()
    }

    #[test]
    fn hand_inner_products() {
        let idx = DenseIndex::new(array![[0.0, 1.0], [2.0, 0.0]], vec![1, 2], 0).unwrap();
        let hits = idx.top_k(array![1.0, 0.0].view(), 1).unwrap();
        assert_eq!(hits, vec![(2, 2.0)]);
    }

    #[test]
    fn ties_go_to_lower_block_id() {
        let hits = small().top_k(array![1.0, 0.0].view(), 4).unwrap();
        assert_eq!(hits.iter().map(|h| h.0).collect::<Vec<_>>(), vec![9, 11, 12, 10]);
    }

    #[test]
    fn k_out_of_range() {
        let idx = small();
        assert!(matches!(idx.top_k(array![1.0, 0.0].view(), 0), Err(RomError::KOutOfRange { .. })));
        assert!(matches!(idx.top_k(array![1.0, 0.0].view(), 5), Err(RomError::KOutOfRange { k: 5, n: 4 })));
    }

    #[test]
    fn rejects_bad_construction() {
        assert!(DenseIndex::new(array![[0.0], [1.0]], vec![1, 1], 0).is_err());
        assert!(DenseIndex::new(array![[0.0], [1.0]], vec![1], 0).is_err());
        assert!(DenseIndex::new(array![[f64::NAN]], vec![1], 0).is_err());
    }

    #[test]
    fn byte_round_trip_and_rejections() {
        let idx = DenseIndex::new(array![[0.1, -1.5e-7], [3.0, 2.0]], vec![4, 2], 7).unwrap();
        let mut buf = Vec::new();
        idx.write_to(&mut buf).unwrap();
        let back = DenseIndex::read_from(&mut buf.as_slice(), Some(2)).unwrap();
        assert_eq!(back, idx);
        assert_eq!(back.snapshot_version(), 7);

        assert!(matches!(
            DenseIndex::read_from(&mut buf.as_slice(), Some(3)),
            Err(RomError::IncompatibleIndex(_))
        ));
        let mut v2 = buf.clone();
        v2[8] = b'2';
        assert!(matches!(DenseIndex::read_from(&mut v2.as_slice(), None), Err(RomError::IncompatibleIndex(_))));
        let short = &buf[..buf.len() - 3];
        assert!(matches!(DenseIndex::read_from(&mut &short[..], None), Err(RomError::Truncated(_))));
        let mut long = buf.clone();
        long.push(0);
        assert!(DenseIndex::read_from(&mut long.as_slice(), None).is_err());
    }
}
