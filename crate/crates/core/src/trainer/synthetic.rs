//! A toy city of straight streets with a linear appearance model.
//!
//! Every cell holds one street segment. An image's feature vector is the
//! appearance prototype of the side of the street it looks at (front, back,
//! left or right facade), plus a viewpoint term shared by the whole city,
//! plus Gaussian noise. The viewpoint term has the form
//! `β (cos φ · u + sin φ · v)` with its own plane `(u, v)` for each kind of
//! view:
//!
//! * facade views use `φ = k·δ`, where `δ` is the obliqueness of the camera
//!   relative to the facade normal;
//! * road views use `φ = 2t`, where `t ∈ [-1, 1]` is the signed position
//!   along the street in the viewing direction.
//!
//! Prototypes of the four sides of one street share a common component, so
//! a facade view and a road view of the same place are correlated. The
//! viewpoint terms carry no place information. Lateral classes vary `δ` and
//! frontal classes vary `t`, so each loss teaches invariance to one of them.

use std::collections::HashMap;

use ndarray::Array1;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::{CellIndex, GridConfig, ImageRecord, UtmPoint};
use crate::mining::normalize_degrees;

/// Correlation between the prototypes of two sides of the same street.
pub const SIDE_SHARE: f64 = 0.7;
/// Magnitude of the obliqueness term on facade views.
pub const OBLIQUE_NUISANCE: f64 = 1.0;
/// Phase of the obliqueness term per radian of obliqueness.
pub const OBLIQUE_FREQUENCY: f64 = 3.0;
/// Magnitude of the along-street term on road views.
pub const ZOOM_NUISANCE: f64 = 1.0;
/// Cells used by the generator are this many cell sides apart.
pub const CELL_STRIDE: i64 = 4;
/// Lateral scatter of capture positions around the street axis, meters.
const LATERAL_JITTER_M: f64 = 0.5;
const ROAD_HEADING_JITTER: f64 = 5.0;
const SIDE_HEADING_JITTER: f64 = 40.0;

pub type FeatureMap = HashMap<String, Array1<f64>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub num_cells: usize,
    pub images_per_cell: usize,
    pub feature_dim: usize,
    pub descriptor_dim: usize,
    pub noise_sigma: f64,
    pub street_length_m: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            num_cells: 50,
            images_per_cell: 40,
            feature_dim: 64,
            descriptor_dim: 32,
            noise_sigma: 0.05,
            street_length_m: 12.0,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let grid = GridConfig::default();
        if self.num_cells == 0 || self.images_per_cell == 0 || self.feature_dim == 0 || self.descriptor_dim == 0 {
            return Err(Error::InvalidInput("synthetic sizes must be positive".into()));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(Error::InvalidInput(format!("noise sigma {}", self.noise_sigma)));
        }
        let max_len = grid.cell_side_m - 2.0 * LATERAL_JITTER_M;
        if !(self.street_length_m > 0.0 && self.street_length_m < max_len) {
            return Err(Error::InvalidInput(format!(
                "street length must be in (0, {max_len}) m, got {}",
                self.street_length_m
            )));
        }
        Ok(())
    }
}

/// Which part of the street a camera looks at, relative to the road direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ViewSide {
    Front,
    Right,
    Back,
    Left,
}

impl ViewSide {
    fn index(self) -> usize {
        self as usize
    }

    /// `relative` is the heading minus the road bearing, in degrees.
    pub fn from_relative_heading(relative: f64) -> Self {
        let r = normalize_degrees(relative + 45.0);
        match (r / 90.0) as usize {
            0 => ViewSide::Front,
            1 => ViewSide::Right,
            2 => ViewSide::Back,
            _ => ViewSide::Left,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Street {
    pub cell: CellIndex,
    pub center: UtmPoint,
    /// Compass bearing of the street axis, in `[0, 180)`.
    pub road_bearing: f64,
}

/// Kinds of capture the generator can place on a street.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Capture {
    /// Heading along the street, either direction.
    RoadAligned,
    /// Heading at one of the facades.
    SideFacing,
}

#[derive(Debug, Clone)]
pub struct SyntheticWorld {
    cfg: SyntheticConfig,
    streets: Vec<Street>,
    /// `[street][side]`
    prototypes: Vec<[Array1<f64>; 4]>,
    oblique_axes: [Array1<f64>; 2],
    zoom_axes: [Array1<f64>; 2],
}

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub images: Vec<ImageRecord>,
    pub features: FeatureMap,
    /// Street (index into [`SyntheticWorld::streets`]) of each image, by id.
    pub street_of: HashMap<String, usize>,
    pub side_of: HashMap<String, ViewSide>,
}

fn unit_gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Array1<f64> {
    let v: Array1<f64> = Array1::from_shape_fn(dim, |_| rng.sample(StandardNormal));
    let norm = v.dot(&v).sqrt();
    v / norm
}

impl SyntheticWorld {
    pub fn new(cfg: &SyntheticConfig) -> Result<Self> {
        cfg.validate()?;
        let grid = GridConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let width = (cfg.num_cells as f64).sqrt().ceil() as usize;
        let dim = cfg.feature_dim;

        let oblique_axes = [unit_gaussian(&mut rng, dim), unit_gaussian(&mut rng, dim)];
        let zoom_axes = [unit_gaussian(&mut rng, dim), unit_gaussian(&mut rng, dim)];

        let mut streets = Vec::with_capacity(cfg.num_cells);
        let mut prototypes = Vec::with_capacity(cfg.num_cells);
        let own = (1.0 - SIDE_SHARE * SIDE_SHARE).sqrt();
        for i in 0..cfg.num_cells {
            let cell = CellIndex::new(CELL_STRIDE * (i % width) as i64, CELL_STRIDE * (i / width) as i64);
            let center = UtmPoint::new(
                grid.origin.east + (cell.col as f64 + 0.5) * grid.cell_side_m,
                grid.origin.north + (cell.row as f64 + 0.5) * grid.cell_side_m,
            );
            let road_bearing = rng.random_range(0.0..180.0);
            streets.push(Street {
                cell,
                center,
                road_bearing,
            });
            let shared = unit_gaussian(&mut rng, dim);
            let sides = std::array::from_fn(|_| {
                let p = &shared * SIDE_SHARE + unit_gaussian(&mut rng, dim) * own;
                let norm = p.dot(&p).sqrt();
                p / norm
            });
            prototypes.push(sides);
        }
        Ok(Self {
            cfg: cfg.clone(),
            streets,
            prototypes,
            oblique_axes,
            zoom_axes,
        })
    }

    pub fn config(&self) -> &SyntheticConfig {
        &self.cfg
    }

    pub fn streets(&self) -> &[Street] {
        &self.streets
    }

    pub fn prototype(&self, street: usize, side: ViewSide) -> &Array1<f64> {
        &self.prototypes[street][side.index()]
    }

    /// Feature vector of a capture at signed street offset `t ∈ [-1, 1]`
    /// looking at compass `heading`.
    pub fn render(&self, street: usize, t: f64, heading: f64, rng: &mut ChaCha8Rng) -> (Array1<f64>, ViewSide) {
        let s = &self.streets[street];
        let relative = heading - s.road_bearing;
        let side = ViewSide::from_relative_heading(relative);
        // obliqueness: offset from the side's own direction, in (-45°, 45°]
        let oblique = (normalize_degrees(relative + 45.0) % 90.0 - 45.0).to_radians();
        let (beta, phase, axes) = match side {
            ViewSide::Front => (ZOOM_NUISANCE, 2.0 * t, &self.zoom_axes),
            ViewSide::Back => (ZOOM_NUISANCE, -2.0 * t, &self.zoom_axes),
            ViewSide::Left | ViewSide::Right => (OBLIQUE_NUISANCE, OBLIQUE_FREQUENCY * oblique, &self.oblique_axes),
        };
        let mut f = self.prototypes[street][side.index()].clone();
        f.scaled_add(beta * phase.cos(), &axes[0]);
        f.scaled_add(beta * phase.sin(), &axes[1]);
        if self.cfg.noise_sigma > 0.0 {
            let noise = Normal::new(0.0, self.cfg.noise_sigma).expect("validated sigma");
            f.mapv_inplace(|x| x + noise.sample(rng));
        }
        (f, side)
    }

    fn position(&self, street: usize, t: f64, lateral: f64) -> UtmPoint {
        let s = &self.streets[street];
        let b = s.road_bearing.to_radians();
        // compass bearing: east = sin, north = cos
        let (along_e, along_n) = (b.sin(), b.cos());
        let half = 0.5 * self.cfg.street_length_m;
        UtmPoint::new(
            s.center.east + t * half * along_e + lateral * along_n,
            s.center.north + t * half * along_n - lateral * along_e,
        )
    }

    /// Places `per_street` captures of the requested kind(s) on every street.
    ///
    /// Kinds alternate image by image; ids are `{prefix}{street}_{k}`.
    pub fn sample(&self, prefix: &str, per_street: usize, kinds: &[Capture], seed: u64) -> SyntheticDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut images = Vec::with_capacity(per_street * self.streets.len());
        let mut features = FeatureMap::new();
        let mut street_of = HashMap::new();
        let mut side_of = HashMap::new();
        for (si, street) in self.streets.iter().enumerate() {
            for k in 0..per_street {
                let t = rng.random_range(-1.0..=1.0);
                let lateral = rng.random_range(-LATERAL_JITTER_M..=LATERAL_JITTER_M);
                let flip = rng.random_bool(0.5);
                let heading = match kinds[k % kinds.len()] {
                    Capture::RoadAligned => {
                        let base = if flip { street.road_bearing + 180.0 } else { street.road_bearing };
                        base + rng.random_range(-ROAD_HEADING_JITTER..=ROAD_HEADING_JITTER)
                    }
                    Capture::SideFacing => {
                        let base = street.road_bearing + if flip { 270.0 } else { 90.0 };
                        base + rng.random_range(-SIDE_HEADING_JITTER..=SIDE_HEADING_JITTER)
                    }
                };
                let heading = normalize_degrees(heading);
                let (feature, side) = self.render(si, t, heading, &mut rng);
                let id = format!("{prefix}{si:03}_{k:03}");
                images.push(ImageRecord::new(id.clone(), self.position(si, t, lateral), Some(heading)));
                features.insert(id.clone(), feature);
                street_of.insert(id.clone(), si);
                side_of.insert(id, side);
            }
        }
        SyntheticDataset {
            images,
            features,
            street_of,
            side_of,
        }
    }
}

/// Training split: half road-aligned, half side-facing captures per street.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<(SyntheticWorld, SyntheticDataset)> {
    let world = SyntheticWorld::new(cfg)?;
    let data = world.sample(
        "train_",
        cfg.images_per_cell,
        &[Capture::RoadAligned, Capture::SideFacing],
        cfg.seed.wrapping_add(1),
    );
    Ok((world, data))
}

/// Held-out evaluation splits rendered from the same world with fresh noise.
#[derive(Debug, Clone)]
pub struct EvalSplits {
    /// Road-aligned captures.
    pub database: SyntheticDataset,
    /// Facade-facing queries.
    pub side_queries: SyntheticDataset,
    /// Road-aligned queries.
    pub frontal_queries: SyntheticDataset,
}

pub fn eval_splits(world: &SyntheticWorld, db_per_street: usize, queries_per_street: usize) -> EvalSplits {
    let seed = world.config().seed;
    EvalSplits {
        database: world.sample("db_", db_per_street, &[Capture::RoadAligned], seed.wrapping_add(2)),
        side_queries: world.sample("qside_", queries_per_street, &[Capture::SideFacing], seed.wrapping_add(3)),
        frontal_queries: world.sample("qfront_", queries_per_street, &[Capture::RoadAligned], seed.wrapping_add(4)),
    }
}
