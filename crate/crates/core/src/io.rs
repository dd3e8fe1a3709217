//! On-disk formats.
//!
//! * image manifest: JSON lines `{"id", "east", "north", "heading"}`;
//! * class manifest: JSON lines, one mined class per line;
//! * descriptor file: `EIGDESC1` magic, `u32` count, `u32` dim, `count × dim`
//!   little-endian `f32`, then `count` ids each prefixed by a `u16` length.
//! * flat JSON config file for the CLI.

use std::collections::HashSet;
use std::io::{BufRead, Read, Write};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::DescriptorSet;
use crate::geo::{CellIndex, GridConfig, ImageRecord, UtmPoint};
use crate::cosface::CosfaceParams;
use crate::mining::{MinedClass, MiningConfig, Role};
use crate::trainer::{AdamConfig, SyntheticConfig, TrainConfig};

pub const DESCRIPTOR_MAGIC: &[u8; 8] = b"EIGDESC1";

/// Row-norm tolerance applied when loading a descriptor file.
pub const DESCRIPTOR_LOAD_NORM_TOL: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub id: String,
    pub east: f64,
    pub north: f64,
    #[serde(default)]
    pub heading: Option<f64>,
}

impl From<&ImageRecord> for ManifestRecord {
    fn from(im: &ImageRecord) -> Self {
        Self {
            id: im.id.clone(),
            east: im.position.east,
            north: im.position.north,
            heading: im.heading,
        }
    }
}

impl From<ManifestRecord> for ImageRecord {
    fn from(r: ManifestRecord) -> Self {
        ImageRecord::new(r.id, UtmPoint::new(r.east, r.north), r.heading)
    }
}

/// Parses JSON lines, skipping blank lines. Errors carry 1-based line numbers.
fn read_json_lines<T, R>(reader: R) -> Result<Vec<(usize, T)>>
where
    T: for<'de> Deserialize<'de>,
    R: BufRead,
{
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push((i + 1, value));
    }
    Ok(out)
}

fn write_json_lines<T: Serialize, W: Write>(mut writer: W, records: impl IntoIterator<Item = T>) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut writer, &r)?;
        writer.write_all(b"\n")?;
    }
    writer.flush()?;
    Ok(())
}

/// Reads an image manifest; ids must be unique and headings in `[0, 360)`.
pub fn read_image_manifest<R: BufRead>(reader: R) -> Result<Vec<ImageRecord>> {
    let mut seen = HashSet::new();
    let mut images = Vec::new();
    for (line, record) in read_json_lines::<ManifestRecord, _>(reader)? {
        let image = ImageRecord::from(record);
        image.validate().map_err(|e| Error::Parse {
            line,
            message: e.to_string(),
        })?;
        if !seen.insert(image.id.clone()) {
            return Err(Error::DuplicateId(image.id));
        }
        images.push(image);
    }
    Ok(images)
}

pub fn write_image_manifest<W: Write>(writer: W, images: &[ImageRecord]) -> Result<()> {
    write_json_lines(writer, images.iter().map(ManifestRecord::from))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemberRecord {
    pub id: String,
    pub target_bearing: f64,
}

/// One line of a class manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassRecord {
    pub class_id: usize,
    pub role: Role,
    /// `[col, row]`
    pub cell: [i64; 2],
    /// `[east, north]`
    pub focal: [f64; 2],
    pub members: Vec<MemberRecord>,
}

impl ClassRecord {
    pub fn cell_index(&self) -> CellIndex {
        CellIndex::new(self.cell[0], self.cell[1])
    }
}

impl From<&MinedClass> for ClassRecord {
    fn from(c: &MinedClass) -> Self {
        Self {
            class_id: c.class_id,
            role: c.role,
            cell: [c.cell.col, c.cell.row],
            focal: [c.focal.position.east, c.focal.position.north],
            members: c
                .members
                .iter()
                .map(|m| MemberRecord {
                    id: m.image_id.clone(),
                    target_bearing: m.target_bearing,
                })
                .collect(),
        }
    }
}

/// Writes records sorted by `(role, class_id)`.
pub fn write_class_manifest<W: Write>(writer: W, classes: &[ClassRecord]) -> Result<()> {
    let mut sorted: Vec<&ClassRecord> = classes.iter().collect();
    sorted.sort_by_key(|c| (c.role, c.class_id));
    write_json_lines(writer, sorted)
}

pub fn read_class_manifest<R: BufRead>(reader: R) -> Result<Vec<ClassRecord>> {
    let records: Vec<ClassRecord> = read_json_lines(reader)?.into_iter().map(|(_, r)| r).collect();
    Ok(records)
}

pub fn write_descriptors<W: Write>(mut writer: W, set: &DescriptorSet) -> Result<()> {
    let count = u32::try_from(set.len()).map_err(|_| Error::Format("too many descriptors".into()))?;
    let dim = u32::try_from(set.dim()).map_err(|_| Error::Format("dimension too large".into()))?;
    writer.write_all(DESCRIPTOR_MAGIC)?;
    writer.write_all(&count.to_le_bytes())?;
    writer.write_all(&dim.to_le_bytes())?;
    let mut buf = Vec::with_capacity(set.len() * set.dim() * 4);
    for v in set.vectors().iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    writer.write_all(&buf)?;
    for id in set.ids() {
        let len = u16::try_from(id.len())
            .map_err(|_| Error::Format(format!("id longer than 65535 bytes: {}...", &id[..16])))?;
        writer.write_all(&len.to_le_bytes())?;
        writer.write_all(id.as_bytes())?;
    }
    writer.flush()?;
    Ok(())
}

fn take<'a>(bytes: &mut &'a [u8], n: usize, what: &str) -> Result<&'a [u8]> {
    if bytes.len() < n {
        return Err(Error::Format(format!("truncated while reading {what}")));
    }
    let (head, tail) = bytes.split_at(n);
    *bytes = tail;
    Ok(head)
}

pub fn read_descriptors<R: Read>(mut reader: R) -> Result<DescriptorSet> {
    let mut data = Vec::new();
    reader.read_to_end(&mut data)?;
    let mut bytes = data.as_slice();

    if take(&mut bytes, 8, "magic")? != DESCRIPTOR_MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let count = u32::from_le_bytes(take(&mut bytes, 4, "count")?.try_into().expect("4 bytes")) as usize;
    let dim = u32::from_le_bytes(take(&mut bytes, 4, "dim")?.try_into().expect("4 bytes")) as usize;
    let body = count
        .checked_mul(dim)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::Format("header overflows".into()))?;
    let raw = take(&mut bytes, body, "vectors")?;
    let values: Vec<f32> = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();

    let mut ids = Vec::with_capacity(count);
    for _ in 0..count {
        let len = u16::from_le_bytes(take(&mut bytes, 2, "id length")?.try_into().expect("2 bytes")) as usize;
        let id = std::str::from_utf8(take(&mut bytes, len, "id")?)
            .map_err(|e| Error::Format(format!("id is not UTF-8: {e}")))?;
        ids.push(id.to_owned());
    }
    if !bytes.is_empty() {
        return Err(Error::Format(format!("{} trailing bytes", bytes.len())));
    }

    let vectors = Array2::from_shape_vec((count, dim), values).map_err(|e| Error::Format(e.to_string()))?;
    for (i, row) in vectors.rows().into_iter().enumerate() {
        let norm = row.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt();
        if !((norm - 1.0).abs() <= DESCRIPTOR_LOAD_NORM_TOL) {
            return Err(Error::Format(format!("row {i} has norm {norm}, expected 1")));
        }
    }
    Ok(DescriptorSet::new_unchecked(ids, vectors))
}

/// Flat JSON configuration. Every key is optional; command-line flags win
/// over file values, which win over defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlatConfig {
    pub cell_side_m: Option<f64>,
    pub group_spacing_n: Option<u32>,
    pub origin_east: Option<f64>,
    pub origin_north: Option<f64>,
    pub focal_distance_d: Option<f64>,
    pub heading_tolerance: Option<f64>,
    pub min_images_per_class: Option<usize>,
    pub emit_lateral: Option<bool>,
    pub emit_frontal: Option<bool>,
    pub panorama_mode: Option<bool>,
    pub mirror_lateral: Option<bool>,
    pub scale_s: Option<f64>,
    pub margin_m: Option<f64>,
    pub iterations: Option<usize>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
    pub seed: Option<u64>,
    pub num_cells: Option<usize>,
    pub images_per_cell: Option<usize>,
    pub feature_dim: Option<usize>,
    pub descriptor_dim: Option<usize>,
    pub noise_sigma: Option<f64>,
    pub street_length_m: Option<f64>,
    pub radius_m: Option<f64>,
    pub max_frames: Option<u64>,
}

impl FlatConfig {
    pub fn from_reader<R: Read>(reader: R) -> Result<Self> {
        Ok(serde_json::from_reader(reader)?)
    }

    /// `self` takes precedence over `fallback` key by key.
    pub fn over(self, fallback: FlatConfig) -> FlatConfig {
        macro_rules! pick {
            ($($f:ident),*) => { FlatConfig { $($f: self.$f.or(fallback.$f)),* } };
        }
        pick!(
            cell_side_m, group_spacing_n, origin_east, origin_north, focal_distance_d,
            heading_tolerance, min_images_per_class, emit_lateral, emit_frontal, panorama_mode,
            mirror_lateral, scale_s, margin_m, iterations, batch_size, learning_rate, seed,
            num_cells, images_per_cell, feature_dim, descriptor_dim, noise_sigma,
            street_length_m, radius_m, max_frames
        )
    }

    pub fn grid(&self) -> Result<GridConfig> {
        let d = GridConfig::default();
        let cfg = GridConfig {
            cell_side_m: self.cell_side_m.unwrap_or(d.cell_side_m),
            group_spacing_n: self.group_spacing_n.unwrap_or(d.group_spacing_n),
            origin: UtmPoint::new(
                self.origin_east.unwrap_or(d.origin.east),
                self.origin_north.unwrap_or(d.origin.north),
            ),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn mining(&self) -> Result<MiningConfig> {
        let d = MiningConfig::default();
        let cfg = MiningConfig {
            focal_distance_d: self.focal_distance_d.unwrap_or(d.focal_distance_d),
            heading_tolerance: self.heading_tolerance.unwrap_or(d.heading_tolerance),
            min_images_per_class: self.min_images_per_class.unwrap_or(d.min_images_per_class),
            emit_lateral: self.emit_lateral.unwrap_or(d.emit_lateral),
            emit_frontal: self.emit_frontal.unwrap_or(d.emit_frontal),
            panorama_mode: self.panorama_mode.unwrap_or(d.panorama_mode),
            mirror_lateral: self.mirror_lateral.unwrap_or(d.mirror_lateral),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn synthetic(&self) -> Result<SyntheticConfig> {
        let d = SyntheticConfig::default();
        let cfg = SyntheticConfig {
            num_cells: self.num_cells.unwrap_or(d.num_cells),
            images_per_cell: self.images_per_cell.unwrap_or(d.images_per_cell),
            feature_dim: self.feature_dim.unwrap_or(d.feature_dim),
            descriptor_dim: self.descriptor_dim.unwrap_or(d.descriptor_dim),
            noise_sigma: self.noise_sigma.unwrap_or(d.noise_sigma),
            street_length_m: self.street_length_m.unwrap_or(d.street_length_m),
            seed: self.seed.unwrap_or(d.seed),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train(&self) -> Result<TrainConfig> {
        let d = TrainConfig::default();
        let cfg = TrainConfig {
            iterations: self.iterations.unwrap_or(d.iterations),
            batch_size: self.batch_size.unwrap_or(d.batch_size),
            adam: AdamConfig {
                learning_rate: self.learning_rate.unwrap_or(d.adam.learning_rate),
                ..d.adam
            },
            cosface: CosfaceParams::new(
                self.scale_s.unwrap_or(d.cosface.scale_s),
                self.margin_m.unwrap_or(d.cosface.margin_m),
            ),
            grid: self.grid()?,
            descriptor_dim: self.descriptor_dim.unwrap_or(d.descriptor_dim),
            seed: self.seed.unwrap_or(d.seed),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
