//! Per-edge vector cache of question/answer embeddings.
//!
//! Records are created in pairs: the question gets id `2k`, its answer `2k+1`,
//! and both carry `pair_id = k`. Queries return a [`CorrelationSet`] ordered
//! by ascending L2 distance, filtered with [`filter_best`]; usage feeds the
//! cache-value recurrence and the mean-threshold eviction.

mod ivf;

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use ivf::IvfIndex;

use crate::error::{Error, Result};
use crate::linalg::{check_dim, l2_distance};

/// Value stored in place of a non-negative initial cache value.
pub const MAX_CACHE_VALUE: f64 = -1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum RecordKind {
    Question,
    Answer,
}

impl RecordKind {
    /// Numeric code used in the correlation matrix: question = 1, answer = 2.
    pub fn code(self) -> u8 {
        match self {
            RecordKind::Question => 1,
            RecordKind::Answer => 2,
        }
    }
}

impl From<RecordKind> for u8 {
    fn from(k: RecordKind) -> u8 {
        k.code()
    }
}

impl TryFrom<u8> for RecordKind {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            1 => Ok(RecordKind::Question),
            2 => Ok(RecordKind::Answer),
            other => Err(format!("record kind must be 1 or 2, got {other}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VectorRecord {
    pub id: u64,
    pub vec: Vec<f64>,
    pub kind: RecordKind,
    /// Number of times the record has been used.
    pub freq: u64,
    /// Running quality score, always negative.
    pub cache_value: f64,
    pub inserted_at: u64,
    pub pair_id: u64,
}

impl VectorRecord {
    pub fn partner_id(&self) -> u64 {
        self.id ^ 1
    }
}

/// Similarity derived from an L2 distance: `1 / (1 + J)`, in `(0, 1]`.
pub fn similarity(distance: f64) -> f64 {
    1.0 / (1.0 + distance)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationEntry {
    pub record: u64,
    pub distance: f64,
    pub similarity: f64,
    pub kind: RecordKind,
    pub freq: u64,
}

/// Top-P query result, nearest first.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationSet {
    pub entries: Vec<CorrelationEntry>,
    pub width: usize,
}

impl CorrelationSet {
    pub fn empty(width: usize) -> Self {
        Self {
            entries: Vec::new(),
            width,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn best_distance(&self) -> Option<f64> {
        self.entries.first().map(|e| e.distance)
    }

    /// Row-major 3×P matrix: similarities, kind codes, frequencies. Missing
    /// entries (store smaller than P) are zero.
    pub fn matrix(&self) -> Vec<f64> {
        let p = self.width;
        let mut m = vec![0.0; 3 * p];
        for (i, e) in self.entries.iter().take(p).enumerate() {
            m[i] = e.similarity;
            m[p + i] = f64::from(e.kind.code());
            m[2 * p + i] = e.freq as f64;
        }
        m
    }
}

/// Index of the entry maximizing `phi1 * c_s + phi2 * c_f`; ties go to the
/// nearest entry.
pub fn filter_best(correlations: &CorrelationSet, phi1: f64, phi2: f64) -> Result<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, e) in correlations.entries.iter().enumerate() {
        let score = phi1 * e.similarity + phi2 * e.freq as f64;
        if best.is_none_or(|(_, s)| score > s) {
            best = Some((i, score));
        }
    }
    best.map(|(i, _)| i).ok_or(Error::NoCandidates)
}

/// Cache-value recurrence: `(previous + q - d) / 2`.
pub fn cache_value_recurrence(previous: f64, satisfaction: f64, delay: f64) -> f64 {
    (previous + satisfaction - delay) / 2.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StoreConfig {
    pub nlist: usize,
    /// Lists are probed until this many candidates are collected.
    pub min_candidates: usize,
    pub kmeans_iters: usize,
    /// Rebuild the index after this many record inserts.
    pub rebuild_every: usize,
    pub seed: u64,
}

impl Default for StoreConfig {
    fn default() -> Self {
        Self {
            nlist: 128,
            min_candidates: 10,
            kmeans_iters: 20,
            rebuild_every: 1000,
            seed: 0,
        }
    }
}

impl StoreConfig {
    pub fn validate(&self) -> Result<()> {
        if self.nlist == 0 || self.min_candidates == 0 || self.rebuild_every == 0 {
            return Err(Error::config(
                "store nlist, min_candidates and rebuild_every must be positive",
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct VectorStore {
    dim: usize,
    cfg: StoreConfig,
    records: BTreeMap<u64, VectorRecord>,
    index: IvfIndex,
    next_pair: u64,
    inserted: u64,
    evicted: u64,
    since_rebuild: usize,
    rebuilds: u64,
}

impl VectorStore {
    pub fn new(dim: usize, cfg: StoreConfig) -> Self {
        Self {
            dim,
            cfg,
            records: BTreeMap::new(),
            index: IvfIndex::flat(),
            next_pair: 0,
            inserted: 0,
            evicted: 0,
            since_rebuild: 0,
            rebuilds: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn config(&self) -> &StoreConfig {
        &self.cfg
    }

    /// Current number of records, k(t).
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn inserted_records(&self) -> u64 {
        self.inserted
    }

    pub fn evicted_records(&self) -> u64 {
        self.evicted
    }

    pub fn index(&self) -> &IvfIndex {
        &self.index
    }

    pub fn record(&self, id: u64) -> Option<&VectorRecord> {
        self.records.get(&id)
    }

    pub fn records(&self) -> impl Iterator<Item = &VectorRecord> {
        self.records.values()
    }

    /// The other half of a record's QA pair, if it has not been evicted.
    pub fn partner(&self, id: u64) -> Option<&VectorRecord> {
        self.records.get(&(id ^ 1))
    }

    /// Inserts a question record and its answer record. Non-negative initial
    /// values are clamped to [`MAX_CACHE_VALUE`].
    pub fn insert_qa(
        &mut self,
        question: &[f64],
        answer: &[f64],
        slot: u64,
        initial_cache_value: f64,
    ) -> Result<(u64, u64)> {
        check_dim(self.dim, question.len())?;
        check_dim(self.dim, answer.len())?;
        let value = if initial_cache_value < 0.0 {
            initial_cache_value
        } else {
            MAX_CACHE_VALUE
        };
        let pair_id = self.next_pair;
        self.next_pair += 1;
        let qid = 2 * pair_id;
        for (id, vec, kind) in [
            (qid, question, RecordKind::Question),
            (qid + 1, answer, RecordKind::Answer),
        ] {
            self.index.add(id, vec);
            self.records.insert(
                id,
                VectorRecord {
                    id,
                    vec: vec.to_vec(),
                    kind,
                    freq: 0,
                    cache_value: value,
                    inserted_at: slot,
                    pair_id,
                },
            );
        }
        self.inserted += 2;
        self.since_rebuild += 2;
        if self.since_rebuild >= self.cfg.rebuild_every {
            self.rebuild_index();
        }
        Ok((qid, qid + 1))
    }

    /// Up to `p` nearest records among the candidates surfaced by the index.
    pub fn query(&self, query: &[f64], p: usize) -> Result<CorrelationSet> {
        check_dim(self.dim, query.len())?;
        let ids = self.index.candidates(query, self.cfg.min_candidates.max(p));
        Ok(self.rank(query, ids, p))
    }

    /// Exhaustive scan; ground truth for [`query`](Self::query).
    pub fn exact_knn(&self, query: &[f64], p: usize) -> Result<CorrelationSet> {
        check_dim(self.dim, query.len())?;
        Ok(self.rank(query, self.records.keys().copied(), p))
    }

    fn rank(&self, query: &[f64], ids: impl IntoIterator<Item = u64>, p: usize) -> CorrelationSet {
        let mut scored: Vec<(f64, u64)> = ids
            .into_iter()
            .map(|id| (l2_distance(query, &self.records[&id].vec), id))
            .collect();
        scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        scored.truncate(p);
        let entries = scored
            .into_iter()
            .map(|(distance, id)| {
                let r = &self.records[&id];
                CorrelationEntry {
                    record: id,
                    distance,
                    similarity: similarity(distance),
                    kind: r.kind,
                    freq: r.freq,
                }
            })
            .collect();
        CorrelationSet { entries, width: p }
    }

    /// Applies the cache-value recurrence to a used record and bumps its
    /// frequency. Returns the new value.
    pub fn update_cache_value(&mut self, id: u64, satisfaction: f64, delay: f64) -> Result<f64> {
        let r = self.records.get_mut(&id).ok_or(Error::MissingRecord(id))?;
        r.cache_value = cache_value_recurrence(r.cache_value, satisfaction, delay);
        r.freq += 1;
        Ok(r.cache_value)
    }

    /// Drops every record whose cache value is strictly below the store mean,
    /// then rebuilds the index. Returns the number of records dropped.
    pub fn evict(&mut self) -> usize {
        if self.records.is_empty() {
            return 0;
        }
        let mean = self.mean_cache_value();
        let doomed: Vec<u64> = self
            .records
            .values()
            .filter(|r| r.cache_value < mean)
            .map(|r| r.id)
            .collect();
        for id in &doomed {
            self.records.remove(id);
        }
        self.evicted += doomed.len() as u64;
        self.rebuild_index();
        doomed.len()
    }

    pub fn mean_cache_value(&self) -> f64 {
        let sum: f64 = self.records.values().map(|r| r.cache_value).sum();
        sum / self.records.len() as f64
    }

    /// Re-clusters all stored vectors into `min(k, nlist)` lists.
    pub fn rebuild_index(&mut self) {
        self.since_rebuild = 0;
        if self.records.is_empty() {
            self.index = IvfIndex::flat();
            return;
        }
        let seed = self.cfg.seed ^ self.rebuilds.wrapping_mul(0x9E37_79B9_7F4A_7C15);
        self.rebuilds += 1;
        self.index = IvfIndex::build(
            self.records.values().map(|r| (r.id, r.vec.as_slice())),
            self.cfg.nlist,
            self.cfg.kmeans_iters,
            seed,
        );
    }

    /// Line-delimited snapshot, one record per line.
    pub fn write_snapshot(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        for r in self.records.values() {
            serde_json::to_writer(&mut out, &SnapshotRecord::from(r))?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_snapshot(path: impl AsRef<Path>, dim: usize, cfg: StoreConfig) -> Result<Self> {
        let mut store = Self::new(dim, cfg);
        let reader = BufReader::new(File::open(path)?);
        for (idx, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: SnapshotRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
                line: idx + 1,
                msg: e.to_string(),
            })?;
            check_dim(dim, rec.vec.len())?;
            let id = 2 * rec.pair_id + u64::from(rec.kind == RecordKind::Answer);
            store.next_pair = store.next_pair.max(rec.pair_id + 1);
            store.records.insert(
                id,
                VectorRecord {
                    id,
                    vec: rec.vec,
                    kind: rec.kind,
                    freq: rec.freq,
                    cache_value: rec.cache_value,
                    inserted_at: rec.inserted_at,
                    pair_id: rec.pair_id,
                },
            );
            store.inserted += 1;
        }
        store.rebuild_index();
        Ok(store)
    }
}

#[derive(Serialize, Deserialize)]
struct SnapshotRecord {
    vec: Vec<f64>,
    kind: RecordKind,
    freq: u64,
    cache_value: f64,
    inserted_at: u64,
    pair_id: u64,
}

impl From<&VectorRecord> for SnapshotRecord {
    fn from(r: &VectorRecord) -> Self {
        Self {
            vec: r.vec.clone(),
            kind: r.kind,
            freq: r.freq,
            cache_value: r.cache_value,
            inserted_at: r.inserted_at,
            pair_id: r.pair_id,
        }
    }
}
