//! Knowledge base of silent videos.
//!
//! Keys are frozen query-encoder embeddings of the titles and never change
//! after insertion. Values (title text embedding, pooled visual embedding)
//! are re-encoded whenever the trainable encoders move. Retrieval is an exact
//! maximum-inner-product scan.

use std::cmp::Ordering;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1};

use crate::data::{Dataset, VideoKind, VideoRecord};
use crate::encoders::{aggregate_video, Embedding, EncoderBundle, QuerySpec};
use crate::error::{Error, Result};
use crate::frames::{clip_frames, FrameStore};
use crate::losses::RetrievedSet;
use crate::persist::{read_file, read_header, write_atomic, BinReader, BinWriter, VERSION};

pub const BANK_MAGIC: &[u8; 8] = b"HCBANK\0\0";
pub const BANK_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryEntry {
    entry_id: String,
    key: Embedding,
    value_text: Embedding,
    value_visual: Embedding,
    generation: u64,
}

impl MemoryEntry {
    pub fn entry_id(&self) -> &str {
        &self.entry_id
    }
    pub fn key(&self) -> &Embedding {
        &self.key
    }
    pub fn value_text(&self) -> &Embedding {
        &self.value_text
    }
    pub fn value_visual(&self) -> &Embedding {
        &self.value_visual
    }
    /// Number of refreshes applied to the values.
    pub fn generation(&self) -> u64 {
        self.generation
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalHit {
    pub entry_id: String,
    pub score: f64,
    /// Position of the entry in the bank.
    pub index: usize,
}

/// Hits sorted by score, ties broken by ascending `entry_id`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RetrievalResult {
    pub hits: Vec<RetrievalHit>,
}

impl RetrievalResult {
    pub fn ids(&self) -> Vec<&str> {
        self.hits.iter().map(|h| h.entry_id.as_str()).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    dim: usize,
    query: QuerySpec,
    /// Sorted by `entry_id`.
    entries: Vec<MemoryEntry>,
}

/// Pooled visual embedding of a video from `n_frames` frames per clip.
pub fn encode_video(
    dataset: &Dataset,
    video: &VideoRecord,
    encoders: &EncoderBundle,
    store: &FrameStore,
    n_frames: usize,
) -> Result<Embedding> {
    let clips = dataset
        .clips_of(video)
        .into_iter()
        .map(|c| encoders.encode_clip(&clip_frames(store, c, n_frames)?))
        .collect::<Result<Vec<_>>>()?;
    aggregate_video(&clips)
}

impl MemoryBank {
    pub fn empty(dim: usize, query: QuerySpec) -> Self {
        Self {
            dim,
            query,
            entries: Vec::new(),
        }
    }

    /// One entry per silent video.
    pub fn build(
        dataset: &Dataset,
        silent_videos: &[&VideoRecord],
        encoders: &EncoderBundle,
        store: &FrameStore,
        n_frames: usize,
    ) -> Result<Self> {
        let mut bank = Self::empty(encoders.dim(), encoders.query().spec());
        for video in silent_videos {
            if video.kind != VideoKind::Silent {
                return Err(Error::NonSilentVideo(video.video_id.clone()));
            }
            bank.insert(
                &video.video_id,
                encoders.encode_query(&video.title)?,
                encoders.encode_text(&video.title)?,
                encode_video(dataset, video, encoders, store, n_frames)?,
            )?;
        }
        Ok(bank)
    }

    pub fn insert(
        &mut self,
        entry_id: &str,
        key: Embedding,
        value_text: Embedding,
        value_visual: Embedding,
    ) -> Result<()> {
        if key.dim() != self.query.dim {
            return Err(Error::DimensionMismatch {
                found: key.dim(),
                expected: self.query.dim,
            });
        }
        for v in [&value_text, &value_visual] {
            if v.dim() != self.dim {
                return Err(Error::DimensionMismatch {
                    found: v.dim(),
                    expected: self.dim,
                });
            }
        }
        let pos = match self
            .entries
            .binary_search_by(|e| e.entry_id.as_str().cmp(entry_id))
        {
            Ok(_) => return Err(Error::DuplicateEntry(entry_id.to_string())),
            Err(pos) => pos,
        };
        self.entries.insert(
            pos,
            MemoryEntry {
                entry_id: entry_id.to_string(),
                key,
                value_text,
                value_visual,
                generation: 0,
            },
        );
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn query_spec(&self) -> QuerySpec {
        self.query
    }

    pub fn entries(&self) -> &[MemoryEntry] {
        &self.entries
    }

    /// Exact top-`k` by inner product between `query` and the keys.
    pub fn retrieve(&self, query: ArrayView1<f64>, k: usize) -> Result<RetrievalResult> {
        if self.entries.is_empty() {
            return Err(Error::EmptyBank);
        }
        if k == 0 {
            return Err(Error::InvalidConfig("k must be >= 1".into()));
        }
        if query.len() != self.query.dim {
            return Err(Error::DimensionMismatch {
                found: query.len(),
                expected: self.query.dim,
            });
        }
        let mut scored: Vec<(f64, usize)> = self
            .entries
            .iter()
            .enumerate()
            .map(|(i, e)| (e.key.view().dot(&query), i))
            .collect();
        // entries are id-sorted, so ascending index is ascending id
        let order = |a: &(f64, usize), b: &(f64, usize)| -> Ordering {
            b.0.total_cmp(&a.0).then(a.1.cmp(&b.1))
        };
        let k = k.min(scored.len());
        if k < scored.len() {
            scored.select_nth_unstable_by(k - 1, order);
            scored.truncate(k);
        }
        scored.sort_unstable_by(order);
        Ok(RetrievalResult {
            hits: scored
                .into_iter()
                .map(|(score, index)| RetrievalHit {
                    entry_id: self.entries[index].entry_id.clone(),
                    score,
                    index,
                })
                .collect(),
        })
    }

    /// Stacked values of the given hits, ready for the silent loss.
    pub fn values_of(&self, result: &RetrievalResult) -> RetrievedSet {
        let rows = |f: fn(&MemoryEntry) -> &Embedding| {
            let mut m = Array2::zeros((result.hits.len(), self.dim));
            for (mut row, hit) in m.rows_mut().into_iter().zip(&result.hits) {
                row.assign(f(&self.entries[hit.index]).as_array());
            }
            m
        };
        RetrievedSet {
            visual: rows(MemoryEntry::value_visual),
            text: rows(MemoryEntry::value_text),
        }
    }

    /// Re-encodes every value with the current encoders. Keys are untouched.
    pub fn refresh_values(
        &mut self,
        dataset: &Dataset,
        encoders: &EncoderBundle,
        store: &FrameStore,
        n_frames: usize,
    ) -> Result<()> {
        if encoders.dim() != self.dim {
            return Err(Error::DimensionMismatch {
                found: encoders.dim(),
                expected: self.dim,
            });
        }
        for entry in &mut self.entries {
            let video = dataset.video(&entry.entry_id).ok_or_else(|| {
                Error::Integrity(format!("bank entry `{}` not in dataset", entry.entry_id))
            })?;
            entry.value_text = encoders.encode_text(&video.title)?;
            entry.value_visual = encode_video(dataset, video, encoders, store, n_frames)?;
            entry.generation += 1;
        }
        Ok(())
    }

    /// Copy whose values are reassigned: entry `i` receives the values of
    /// entry `perm[i]`. Keys, ids and generations stay in place.
    pub fn permute_values(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.entries.len() {
            return Err(Error::LengthMismatch(perm.len(), self.entries.len()));
        }
        let mut seen = vec![false; perm.len()];
        for &p in perm {
            if p >= perm.len() || std::mem::replace(&mut seen[p], true) {
                return Err(Error::InvalidConfig("not a permutation".into()));
            }
        }
        let mut out = self.clone();
        for (i, &p) in perm.iter().enumerate() {
            out.entries[i].value_text = self.entries[p].value_text.clone();
            out.entries[i].value_visual = self.entries[p].value_visual.clone();
        }
        Ok(out)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = BinWriter::default();
        w.bytes(BANK_MAGIC);
        w.u32(BANK_VERSION);
        w.str(VERSION);
        w.len(self.dim);
        w.len(self.query.dim);
        w.len(self.query.buckets);
        w.len(self.query.text_len);
        w.u64(self.query.seed);
        w.len(self.entries.len());
        for e in &self.entries {
            w.str(&e.entry_id);
            w.u64(e.generation);
            w.f64s(e.key.as_array().iter().copied());
            w.f64s(e.value_text.as_array().iter().copied());
            w.f64s(e.value_visual.as_array().iter().copied());
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = BinReader::new(bytes);
        read_header(&mut r, BANK_MAGIC, BANK_VERSION)?;
        let _writer_version = r.str()?;
        let dim = r.len()?;
        let query = QuerySpec {
            dim: r.len()?,
            buckets: r.len()?,
            text_len: r.len()?,
            seed: r.u64()?,
        };
        let n = r.len()?;
        let mut bank = Self::empty(dim, query);
        let unit = |v: Vec<f64>| {
            Embedding::from_unit(Array1::from(v))
                .map_err(|_| Error::Format("stored embedding is not unit-norm".into()))
        };
        for _ in 0..n {
            let entry_id = r.str()?;
            let generation = r.u64()?;
            let key = unit(r.f64s(query.dim)?)?;
            let value_text = unit(r.f64s(dim)?)?;
            let value_visual = unit(r.f64s(dim)?)?;
            if bank.entries.last().is_some_and(|e| e.entry_id >= entry_id) {
                return Err(Error::Format("entries are not sorted by id".into()));
            }
            bank.entries.push(MemoryEntry {
                entry_id,
                key,
                value_text,
                value_visual,
                generation,
            });
        }
        r.expect_end()?;
        Ok(bank)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &self.to_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&read_file(path.as_ref())?)
    }

    /// Loads a bank and checks its value dimension.
    pub fn load_expecting(path: impl AsRef<Path>, dim: usize) -> Result<Self> {
        let bank = Self::load(path)?;
        if bank.dim != dim {
            return Err(Error::DimensionMismatch {
                found: bank.dim,
                expected: dim,
            });
        }
        Ok(bank)
    }
}
