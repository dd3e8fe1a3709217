//! Square-cell partition of planar UTM space.
//!
//! Cells are half-open `[kM, (k+1)M)` intervals on both axes, counted from a
//! configurable origin. Cells are further assigned to one of `N²` groups by
//! taking their indices modulo `N`; two distinct cells of the same group are
//! always at least `N` cells apart, so for `N ≥ 2` a group never contains
//! neighbouring cells. Training visits one group per epoch.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Planar position in meters.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct UtmPoint {
    pub east: f64,
    pub north: f64,
}

impl UtmPoint {
    pub const fn new(east: f64, north: f64) -> Self {
        Self { east, north }
    }

    pub fn is_finite(&self) -> bool {
        self.east.is_finite() && self.north.is_finite()
    }

    pub fn distance(&self, other: &UtmPoint) -> f64 {
        (self.east - other.east).hypot(self.north - other.north)
    }
}

/// One geotagged image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: String,
    pub position: UtmPoint,
    /// Compass heading in degrees, clockwise from north, in `[0, 360)`.
    pub heading: Option<f64>,
}

impl ImageRecord {
    pub fn new(id: impl Into<String>, position: UtmPoint, heading: Option<f64>) -> Self {
        Self {
            id: id.into(),
            position,
            heading,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.id.is_empty() {
            return Err(Error::InvalidInput("empty image id".into()));
        }
        if !self.position.is_finite() {
            return Err(Error::InvalidInput(format!(
                "image `{}` has a non-finite position",
                self.id
            )));
        }
        if let Some(h) = self.heading {
            if !(0.0..360.0).contains(&h) {
                return Err(Error::InvalidInput(format!(
                    "image `{}` heading {h} outside [0, 360)",
                    self.id
                )));
            }
        }
        Ok(())
    }
}

/// Cell coordinates: `col` counts along east, `row` along north.
///
/// Ordered by `(row, col)`, which is the iteration order of bucket maps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CellIndex {
    pub col: i64,
    pub row: i64,
}

impl CellIndex {
    pub const fn new(col: i64, row: i64) -> Self {
        Self { col, row }
    }

    pub fn chebyshev(&self, other: &CellIndex) -> u64 {
        self.col
            .abs_diff(other.col)
            .max(self.row.abs_diff(other.row))
    }
}

impl std::fmt::Display for CellIndex {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "[{}, {}]", self.col, self.row)
    }
}

impl Ord for CellIndex {
    fn cmp(&self, other: &Self) -> Ordering {
        (self.row, self.col).cmp(&(other.row, other.col))
    }
}

impl PartialOrd for CellIndex {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GroupId {
    pub gcol: u32,
    pub grow: u32,
}

impl GroupId {
    pub const fn new(gcol: u32, grow: u32) -> Self {
        Self { gcol, grow }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    pub cell_side_m: f64,
    pub group_spacing_n: u32,
    pub origin: UtmPoint,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            cell_side_m: 15.0,
            group_spacing_n: 3,
            origin: UtmPoint::default(),
        }
    }
}

impl GridConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.cell_side_m.is_finite() && self.cell_side_m > 0.0) {
            return Err(Error::InvalidInput(format!(
                "cell side must be positive, got {}",
                self.cell_side_m
            )));
        }
        if self.group_spacing_n < 2 {
            return Err(Error::InvalidInput(format!(
                "group spacing must be at least 2, got {}",
                self.group_spacing_n
            )));
        }
        if !self.origin.is_finite() {
            return Err(Error::InvalidInput("grid origin must be finite".into()));
        }
        Ok(())
    }

    pub fn group_count(&self) -> u64 {
        let n = u64::from(self.group_spacing_n);
        n * n
    }
}

pub fn assign_cell(p: UtmPoint, cfg: &GridConfig) -> Result<CellIndex> {
    if !p.is_finite() {
        return Err(Error::InvalidInput(format!(
            "non-finite coordinate ({}, {})",
            p.east, p.north
        )));
    }
    let col = ((p.east - cfg.origin.east) / cfg.cell_side_m).floor();
    let row = ((p.north - cfg.origin.north) / cfg.cell_side_m).floor();
    Ok(CellIndex::new(col as i64, row as i64))
}

pub fn group_of(cell: CellIndex, cfg: &GridConfig) -> GroupId {
    let n = i64::from(cfg.group_spacing_n);
    GroupId::new(cell.col.rem_euclid(n) as u32, cell.row.rem_euclid(n) as u32)
}

/// Active group for a training epoch; walks all `N²` groups in row-major order.
pub fn group_for_epoch(epoch: u64, cfg: &GridConfig) -> GroupId {
    let n = u64::from(cfg.group_spacing_n);
    GroupId::new((epoch % n) as u32, ((epoch / n) % n) as u32)
}

/// Cell buckets, iterated in `(row, col)` order with members sorted by id.
pub type Buckets = BTreeMap<CellIndex, Vec<ImageRecord>>;

pub fn bucket_images(images: &[ImageRecord], cfg: &GridConfig) -> Result<Buckets> {
    let mut seen = HashSet::with_capacity(images.len());
    let mut buckets = Buckets::new();
    for image in images {
        if !seen.insert(image.id.as_str()) {
            return Err(Error::DuplicateId(image.id.clone()));
        }
        let cell = assign_cell(image.position, cfg)?;
        buckets.entry(cell).or_default().push(image.clone());
    }
    for members in buckets.values_mut() {
        members.sort_by(|a, b| a.id.cmp(&b.id));
    }
    Ok(buckets)
}
