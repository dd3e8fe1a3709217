//! Exact nearest-neighbour retrieval and recall@N.
//!
//! A query counts as localized at `N` when at least one of its first `N`
//! retrieved database items is a positive. What a positive is depends on the
//! benchmark:
//!
//! * [`GroundTruthMode::DistanceThreshold`]: database position within
//!   `radius_m` of the query (25 m in most benchmarks);
//! * [`GroundTruthMode::FrameThreshold`]: sequence benchmarks, database frame
//!   within `max_frames` of the query's frame;
//! * [`GroundTruthMode::ExactPair`]: one-to-one pair benchmarks.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};
use std::io::Write;

use ndarray::{Array2, ArrayView1, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::UtmPoint;
use crate::mining::PrincipalFrame;

pub const DEFAULT_RECALL_NS: [usize; 4] = [1, 5, 10, 20];
/// Default positive radius for [`GroundTruthMode::DistanceThreshold`], meters.
pub const DEFAULT_RADIUS_M: f64 = 25.0;
/// Default window for [`GroundTruthMode::FrameThreshold`].
pub const DEFAULT_MAX_FRAMES: u64 = 10;

const SET_NORM_TOL: f64 = 1e-6;
const QUERY_BLOCK: usize = 32;
const DB_BLOCK: usize = 1024;

/// Unit-norm descriptors keyed by image id, plus optional ground-truth metadata.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DescriptorSet {
    ids: Vec<String>,
    vectors: Array2<f32>,
    pub positions: HashMap<String, UtmPoint>,
    pub frame_index: HashMap<String, i64>,
    pub pair_of: HashMap<String, String>,
}

impl DescriptorSet {
    pub fn new(ids: Vec<String>, vectors: Array2<f32>) -> Result<Self> {
        if ids.len() != vectors.nrows() {
            return Err(Error::ShapeError(format!(
                "{} ids for {} vectors",
                ids.len(),
                vectors.nrows()
            )));
        }
        for (i, row) in vectors.axis_iter(Axis(0)).enumerate() {
            let norm = f32_norm(row);
            if !((norm - 1.0).abs() <= SET_NORM_TOL) {
                return Err(Error::NotNormalized {
                    what: "descriptor set",
                    row: i,
                    norm,
                });
            }
        }
        Ok(Self {
            ids,
            vectors,
            ..Default::default()
        })
    }

    /// Skips the norm check; file loading applies its own looser tolerance.
    pub(crate) fn new_unchecked(ids: Vec<String>, vectors: Array2<f32>) -> Self {
        Self {
            ids,
            vectors,
            ..Default::default()
        }
    }

    /// Normalizes `f64` rows and stores them in single precision.
    pub fn from_unnormalized(ids: Vec<String>, raw: &Array2<f64>) -> Result<Self> {
        let mut vectors = Array2::<f32>::zeros(raw.raw_dim());
        for (i, (src, mut dst)) in raw.axis_iter(Axis(0)).zip(vectors.axis_iter_mut(Axis(0))).enumerate() {
            let norm = src.iter().map(|x| x * x).sum::<f64>().sqrt();
            if !(norm.is_finite() && norm > 0.0) {
                return Err(Error::NotNormalized {
                    what: "descriptor set",
                    row: i,
                    norm,
                });
            }
            dst.zip_mut_with(&src, |d, &s| *d = (s / norm) as f32);
        }
        Self::new(ids, vectors)
    }

    pub fn with_positions(mut self, positions: HashMap<String, UtmPoint>) -> Self {
        self.positions = positions;
        self
    }

    pub fn with_frames(mut self, frames: HashMap<String, i64>) -> Self {
        self.frame_index = frames;
        self
    }

    pub fn with_pairs(mut self, pairs: HashMap<String, String>) -> Self {
        self.pair_of = pairs;
        self
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn vectors(&self) -> &Array2<f32> {
        &self.vectors
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn index_of(&self) -> HashMap<&str, usize> {
        self.ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect()
    }

    /// Keeps only the rows whose index is listed, in that order.
    pub fn select(&self, rows: &[usize]) -> Self {
        let ids: Vec<_> = rows.iter().map(|&r| self.ids[r].clone()).collect();
        let keep = |id: &String| ids.contains(id);
        Self {
            vectors: self.vectors.select(Axis(0), rows),
            positions: self.positions.iter().filter(|(k, _)| keep(k)).map(|(k, v)| (k.clone(), *v)).collect(),
            frame_index: self.frame_index.iter().filter(|(k, _)| keep(k)).map(|(k, v)| (k.clone(), *v)).collect(),
            pair_of: self.pair_of.iter().filter(|(k, _)| keep(k)).map(|(k, v)| (k.clone(), v.clone())).collect(),
            ids,
        }
    }
}

fn f32_norm(row: ArrayView1<f32>) -> f64 {
    row.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt()
}

/// Cosine similarity of two unit vectors, accumulated left to right in `f64`.
pub fn similarity(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .fold(0.0, |acc, (&x, &y)| acc + f64::from(x) * f64::from(y))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    /// Row in the database set.
    pub index: usize,
    pub similarity: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KnnResult {
    /// Per query, most similar first.
    pub neighbors: Vec<Vec<Neighbor>>,
    pub k: usize,
    /// Set when the requested `k` exceeded the database size.
    pub clamped: bool,
}

/// Exact top-`k` by cosine similarity. Ties go to the smaller database id.
pub fn knn(queries: &DescriptorSet, database: &DescriptorSet, k: usize) -> Result<KnnResult> {
    if k == 0 {
        return Err(Error::InvalidInput("k must be at least 1".into()));
    }
    if !queries.is_empty() && !database.is_empty() && queries.dim() != database.dim() {
        return Err(Error::ShapeError(format!(
            "query dim {} vs database dim {}",
            queries.dim(),
            database.dim()
        )));
    }
    let n = database.len();
    let clamped = k > n;
    let k = k.min(n);

    let mut by_id: Vec<usize> = (0..n).collect();
    by_id.sort_by(|&a, &b| database.ids[a].cmp(&database.ids[b]));
    let mut id_rank = vec![0usize; n];
    for (rank, &row) in by_id.iter().enumerate() {
        id_rank[row] = rank;
    }
    let rank = |a: &Neighbor, b: &Neighbor| -> Ordering {
        b.similarity
            .total_cmp(&a.similarity)
            .then_with(|| id_rank[a.index].cmp(&id_rank[b.index]))
    };

    let q_rows: Vec<&[f32]> = queries
        .vectors
        .rows()
        .into_iter()
        .map(|r| r.to_slice().expect("standard layout"))
        .collect();
    let db_rows: Vec<&[f32]> = database
        .vectors
        .rows()
        .into_iter()
        .map(|r| r.to_slice().expect("standard layout"))
        .collect();

    let neighbors: Vec<Vec<Neighbor>> = q_rows
        .par_chunks(QUERY_BLOCK)
        .flat_map_iter(|block| {
            let mut sims = vec![vec![0.0f64; n]; block.len()];
            for db_start in (0..n).step_by(DB_BLOCK) {
                let db_end = (db_start + DB_BLOCK).min(n);
                for (q, out) in block.iter().zip(sims.iter_mut()) {
                    for j in db_start..db_end {
                        out[j] = similarity(q, db_rows[j]);
                    }
                }
            }
            sims.into_iter().map(|row| {
                let mut cands: Vec<Neighbor> = row
                    .into_iter()
                    .enumerate()
                    .map(|(index, similarity)| Neighbor { index, similarity })
                    .collect();
                if k == 0 {
                    return Vec::new();
                }
                if k < cands.len() {
                    cands.select_nth_unstable_by(k - 1, rank);
                    cands.truncate(k);
                }
                cands.sort_by(rank);
                cands
            })
        })
        .collect();

    Ok(KnnResult {
        neighbors,
        k,
        clamped,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum GroundTruthMode {
    DistanceThreshold { radius_m: f64 },
    FrameThreshold { max_frames: u64 },
    ExactPair,
}

impl Default for GroundTruthMode {
    fn default() -> Self {
        GroundTruthMode::DistanceThreshold {
            radius_m: DEFAULT_RADIUS_M,
        }
    }
}

impl GroundTruthMode {
    pub fn validate(&self) -> Result<()> {
        match *self {
            GroundTruthMode::DistanceThreshold { radius_m } if !(radius_m > 0.0) => Err(
                Error::InvalidInput(format!("radius must be positive, got {radius_m}")),
            ),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub query_id: String,
    pub ids: Vec<String>,
    pub similarities: Vec<f64>,
    /// Euclidean descriptor distances, `sqrt(2 - 2·similarity)`.
    pub distances: Vec<f64>,
    /// Rank (0-based) of the first positive, if any was retrieved.
    pub first_positive: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallReport {
    pub mode: GroundTruthMode,
    pub num_queries: usize,
    pub num_database: usize,
    /// Recall in `[0, 1]` for each requested `N`.
    pub recalls: BTreeMap<usize, f64>,
    pub k_clamped: bool,
    pub predictions: Vec<Prediction>,
}

impl RecallReport {
    pub fn recall(&self, n: usize) -> Option<f64> {
        self.recalls.get(&n).copied()
    }
}

fn check_metadata(queries: &DescriptorSet, database: &DescriptorSet, mode: &GroundTruthMode) -> Result<()> {
    let mut missing = Vec::new();
    match mode {
        GroundTruthMode::DistanceThreshold { .. } => {
            for set in [queries, database] {
                missing.extend(set.ids.iter().filter(|id| !set.positions.contains_key(*id)).cloned());
            }
        }
        GroundTruthMode::FrameThreshold { .. } => {
            for set in [queries, database] {
                missing.extend(set.ids.iter().filter(|id| !set.frame_index.contains_key(*id)).cloned());
            }
        }
        GroundTruthMode::ExactPair => {
            missing.extend(queries.ids.iter().filter(|id| !queries.pair_of.contains_key(*id)).cloned());
        }
    }
    if missing.is_empty() {
        Ok(())
    } else {
        Err(Error::MissingGroundTruth(missing))
    }
}

fn is_positive(
    query_id: &str,
    db_id: &str,
    queries: &DescriptorSet,
    database: &DescriptorSet,
    mode: &GroundTruthMode,
) -> bool {
    match *mode {
        GroundTruthMode::DistanceThreshold { radius_m } => {
            queries.positions[query_id].distance(&database.positions[db_id]) <= radius_m
        }
        GroundTruthMode::FrameThreshold { max_frames } => {
            queries.frame_index[query_id].abs_diff(database.frame_index[db_id]) <= max_frames
        }
        GroundTruthMode::ExactPair => queries.pair_of[query_id] == db_id,
    }
}

pub fn recall_at_n(
    queries: &DescriptorSet,
    database: &DescriptorSet,
    mode: GroundTruthMode,
    ns: &[usize],
) -> Result<RecallReport> {
    mode.validate()?;
    if ns.is_empty() || ns.contains(&0) {
        return Err(Error::InvalidInput(format!("recall cut-offs must be ≥ 1, got {ns:?}")));
    }
    check_metadata(queries, database, &mode)?;
    let max_n = *ns.iter().max().expect("non-empty");

    let (neighbors, clamped) = if database.is_empty() {
        (vec![Vec::new(); queries.len()], true)
    } else {
        let r = knn(queries, database, max_n)?;
        (r.neighbors, r.clamped)
    };

    let predictions: Vec<Prediction> = queries
        .ids
        .iter()
        .zip(neighbors)
        .map(|(qid, list)| {
            let ids: Vec<String> = list.iter().map(|nb| database.ids[nb.index].clone()).collect();
            let first_positive = ids
                .iter()
                .position(|dbid| is_positive(qid, dbid, queries, database, &mode));
            Prediction {
                query_id: qid.clone(),
                similarities: list.iter().map(|nb| nb.similarity).collect(),
                distances: list
                    .iter()
                    .map(|nb| (2.0 - 2.0 * nb.similarity).max(0.0).sqrt())
                    .collect(),
                ids,
                first_positive,
            }
        })
        .collect();

    let mut recalls = BTreeMap::new();
    for &n in ns {
        let hits = predictions
            .iter()
            .filter(|p| p.first_positive.is_some_and(|r| r < n))
            .count();
        let recall = if predictions.is_empty() {
            0.0
        } else {
            hits as f64 / predictions.len() as f64
        };
        recalls.insert(n, recall);
    }

    Ok(RecallReport {
        mode,
        num_queries: queries.len(),
        num_database: database.len(),
        recalls,
        k_clamped: clamped,
        predictions,
    })
}

/// Pairwise cosine similarities of a set of images, ordered along a cell's
/// first principal axis.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    pub ids: Vec<String>,
    pub values: Array2<f64>,
}

impl SimilarityMatrix {
    pub fn mean_off_diagonal(&self) -> f64 {
        let n = self.ids.len();
        if n < 2 {
            return 0.0;
        }
        let total: f64 = self.values.sum() - self.values.diag().sum();
        total / (n * (n - 1)) as f64
    }

    /// Labelled CSV: a header row of ids, then one row per id.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec![String::new()];
        header.extend(self.ids.iter().cloned());
        w.write_record(&header)?;
        for (id, row) in self.ids.iter().zip(self.values.axis_iter(Axis(0))) {
            let mut record = vec![id.clone()];
            record.extend(row.iter().map(|v| v.to_string()));
            w.write_record(&record)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn similarity_matrix(
    cell_images: &[String],
    descriptors: &DescriptorSet,
    frame: &PrincipalFrame,
) -> Result<SimilarityMatrix> {
    let index = descriptors.index_of();
    let mut entries = Vec::with_capacity(cell_images.len());
    for id in cell_images {
        let row = *index.get(id.as_str()).ok_or_else(|| Error::MissingId(id.clone()))?;
        let pos = descriptors
            .positions
            .get(id)
            .ok_or_else(|| Error::MissingId(id.clone()))?;
        entries.push((frame.project_first(*pos), id.clone(), row));
    }
    entries.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(&b.1)));

    let rows: Vec<&[f32]> = entries
        .iter()
        .map(|(_, _, r)| descriptors.vectors.row(*r).to_slice().expect("standard layout"))
        .collect();
    let n = rows.len();
    let mut values = Array2::zeros((n, n));
    for i in 0..n {
        for j in i..n {
            let s = similarity(rows[i], rows[j]);
            values[[i, j]] = s;
            values[[j, i]] = s;
        }
    }
    Ok(SimilarityMatrix {
        ids: entries.into_iter().map(|(_, id, _)| id).collect(),
        values,
    })
}
