//! Command-line overrides for the flat JSON config.

use std::fs::File;
use std::path::Path;

use anyhow::{Context, Result};
use clap::Args;
use eigenmine::io::FlatConfig;

#[derive(Args, Debug, Default)]
pub struct GridArgs {
    /// Cell side M in meters [default: 15].
    #[arg(long)]
    pub cell_side: Option<f64>,
    /// Group spacing N [default: 3].
    #[arg(long)]
    pub group_spacing: Option<u32>,
    #[arg(long, allow_negative_numbers = true)]
    pub origin_east: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    pub origin_north: Option<f64>,
}

#[derive(Args, Debug, Default)]
pub struct MiningArgs {
    /// Focal distance D in meters [default: 10].
    #[arg(long)]
    pub focal_distance: Option<f64>,
    /// Maximum heading error in degrees [default: 30].
    #[arg(long)]
    pub heading_tolerance: Option<f64>,
    /// Classes with fewer members are dropped [default: 2].
    #[arg(long)]
    pub min_images: Option<usize>,
    #[arg(long)]
    pub no_lateral: bool,
    #[arg(long)]
    pub no_frontal: bool,
    /// Treat every image as a panorama that can face any direction.
    #[arg(long)]
    pub panorama: bool,
    /// Put the lateral focal point on the other side of the street.
    #[arg(long)]
    pub mirror_lateral: bool,
}

#[derive(Args, Debug, Default)]
pub struct SyntheticArgs {
    #[arg(long)]
    pub num_cells: Option<usize>,
    #[arg(long)]
    pub images_per_cell: Option<usize>,
    #[arg(long)]
    pub feature_dim: Option<usize>,
    #[arg(long)]
    pub descriptor_dim: Option<usize>,
    #[arg(long)]
    pub noise_sigma: Option<f64>,
    #[arg(long)]
    pub street_length: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug, Default)]
pub struct TrainArgs {
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// CosFace scale s [default: 30].
    #[arg(long)]
    pub scale: Option<f64>,
    /// CosFace margin m [default: 0.4].
    #[arg(long)]
    pub margin: Option<f64>,
}

fn flag(set: bool, value: bool) -> Option<bool> {
    set.then_some(value)
}

impl GridArgs {
    pub fn apply(&self, c: &mut FlatConfig) {
        c.cell_side_m = self.cell_side;
        c.group_spacing_n = self.group_spacing;
        c.origin_east = self.origin_east;
        c.origin_north = self.origin_north;
    }
}

impl MiningArgs {
    pub fn apply(&self, c: &mut FlatConfig) {
        c.focal_distance_d = self.focal_distance;
        c.heading_tolerance = self.heading_tolerance;
        c.min_images_per_class = self.min_images;
        c.emit_lateral = flag(self.no_lateral, false);
        c.emit_frontal = flag(self.no_frontal, false);
        c.panorama_mode = flag(self.panorama, true);
        c.mirror_lateral = flag(self.mirror_lateral, true);
    }
}

impl SyntheticArgs {
    pub fn apply(&self, c: &mut FlatConfig) {
        c.num_cells = self.num_cells;
        c.images_per_cell = self.images_per_cell;
        c.feature_dim = self.feature_dim;
        c.descriptor_dim = self.descriptor_dim;
        c.noise_sigma = self.noise_sigma;
        c.street_length_m = self.street_length;
        c.seed = self.seed;
    }
}

impl TrainArgs {
    pub fn apply(&self, c: &mut FlatConfig) {
        c.iterations = self.iterations;
        c.batch_size = self.batch_size;
        c.learning_rate = self.learning_rate;
        c.scale_s = self.scale;
        c.margin_m = self.margin;
    }
}

/// Flags layered over the config file, if any.
pub fn resolve(file: Option<&Path>, flags: FlatConfig) -> Result<FlatConfig> {
    let Some(path) = file else {
        return Ok(flags);
    };
    let f = File::open(path).with_context(|| format!("opening config {}", path.display()))?;
    let from_file = FlatConfig::from_reader(f).with_context(|| format!("reading config {}", path.display()))?;
    Ok(flags.over(from_file))
}
