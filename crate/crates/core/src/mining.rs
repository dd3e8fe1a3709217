//! Viewpoint-aware class construction.
//!
//! For every cell the image positions are reduced to a principal frame: the
//! first axis follows the direction of maximum spread (usually the road the
//! capture vehicle drove along), the second is perpendicular to it (usually
//! pointing at facades). A focal point is placed `d` meters from the centroid
//! along one of the axes, and the images whose heading points at it form a
//! class: the same spot seen from different positions.
//!
//! * lateral classes put the focal point on the second axis;
//! * frontal classes put it on the first axis.

use std::collections::HashSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::{Buckets, CellIndex, ImageRecord, UtmPoint};

/// Eigenvalue ratio `λ2/λ1` above which a cell is flagged as isotropic
/// (crossroads, squares). Such cells are still mined.
pub const ISOTROPY_FLAG_RATIO: f64 = 0.95;

const CANON_EPS: f64 = 1e-12;

/// Principal axes of a cell's position cloud.
///
/// `pc_first` and `pc_second` are `[east, north]` unit vectors;
/// `pc_second` is `pc_first` rotated 90° counter-clockwise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrincipalFrame {
    pub mean: UtmPoint,
    pub pc_first: [f64; 2],
    pub pc_second: [f64; 2],
    /// `(λ1, λ2)` of the population covariance, `λ1 ≥ λ2 ≥ 0`, in m².
    pub eigenvalues: (f64, f64),
}

impl PrincipalFrame {
    /// Same frame with the second axis pointing to the other side.
    pub fn mirrored(&self) -> Self {
        Self {
            pc_second: [-self.pc_second[0], -self.pc_second[1]],
            ..*self
        }
    }

    pub fn is_isotropic(&self) -> bool {
        let (l1, l2) = self.eigenvalues;
        l1 > 0.0 && l2 / l1 > ISOTROPY_FLAG_RATIO
    }

    /// Signed coordinate of `p` along the first axis, relative to the centroid.
    pub fn project_first(&self, p: UtmPoint) -> f64 {
        (p.east - self.mean.east) * self.pc_first[0] + (p.north - self.mean.north) * self.pc_first[1]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Lateral,
    Frontal,
}

impl Role {
    pub fn as_str(&self) -> &'static str {
        match self {
            Role::Lateral => "lateral",
            Role::Frontal => "frontal",
        }
    }
}

impl std::fmt::Display for Role {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Role {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lateral" => Ok(Role::Lateral),
            "frontal" => Ok(Role::Frontal),
            other => Err(Error::InvalidInput(format!("unknown role `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FocalPoint {
    pub position: UtmPoint,
    pub role: Role,
    pub distance_d: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMember {
    pub image_id: String,
    /// Bearing from the image to the focal point, degrees clockwise from north.
    pub target_bearing: f64,
    /// Circular distance between the image heading and `target_bearing`.
    pub heading_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinedClass {
    pub cell: CellIndex,
    pub role: Role,
    pub focal: FocalPoint,
    pub members: Vec<ClassMember>,
    /// Dense id, numbered separately for each role in `(row, col)` order.
    pub class_id: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiningConfig {
    pub focal_distance_d: f64,
    /// Maximum heading error in degrees, in `(0, 180]`.
    pub heading_tolerance: f64,
    pub min_images_per_class: usize,
    pub emit_lateral: bool,
    pub emit_frontal: bool,
    /// Every image may be cropped to any heading (360° panoramas).
    pub panorama_mode: bool,
    /// Place the lateral focal point on the other side of the first axis.
    pub mirror_lateral: bool,
}

impl Default for MiningConfig {
    fn default() -> Self {
        Self {
            focal_distance_d: 10.0,
            heading_tolerance: 30.0,
            min_images_per_class: 2,
            emit_lateral: true,
            emit_frontal: true,
            panorama_mode: false,
            mirror_lateral: false,
        }
    }
}

impl MiningConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.focal_distance_d.is_finite() && self.focal_distance_d >= 0.0) {
            return Err(Error::InvalidInput(format!(
                "focal distance must be finite and non-negative, got {}",
                self.focal_distance_d
            )));
        }
        if !(self.heading_tolerance > 0.0 && self.heading_tolerance <= 180.0) {
            return Err(Error::InvalidInput(format!(
                "heading tolerance must be in (0, 180], got {}",
                self.heading_tolerance
            )));
        }
        if self.min_images_per_class == 0 {
            return Err(Error::InvalidInput(
                "min_images_per_class must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Closed-form principal frame of a 2D point cloud.
///
/// The covariance `[[a, b], [b, c]]` has eigenvalues `(a+c)/2 ± r` with
/// `r = hypot((a-c)/2, b)`, and the major axis sits at `½·atan2(2b, a-c)`.
pub fn principal_frame(points: &[UtmPoint]) -> Result<PrincipalFrame> {
    if points.len() < 2 {
        return Err(Error::TooFewPoints(points.len()));
    }
    if let Some(bad) = points.iter().find(|p| !p.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "non-finite point ({}, {})",
            bad.east, bad.north
        )));
    }
    let n = points.len() as f64;
    let mean_e = points.iter().map(|p| p.east).sum::<f64>() / n;
    let mean_n = points.iter().map(|p| p.north).sum::<f64>() / n;

    let (mut a, mut b, mut c) = (0.0, 0.0, 0.0);
    for p in points {
        let de = p.east - mean_e;
        let dn = p.north - mean_n;
        a += de * de;
        b += de * dn;
        c += dn * dn;
    }
    a /= n;
    b /= n;
    c /= n;
    if a + c <= 0.0 {
        return Err(Error::DegenerateCloud);
    }

    let half_trace = 0.5 * (a + c);
    let radius = (0.5 * (a - c)).hypot(b);
    let lambda1 = half_trace + radius;
    let lambda2 = (half_trace - radius).max(0.0);

    let theta = 0.5 * (2.0 * b).atan2(a - c);
    let mut first = [theta.cos(), theta.sin()];
    let flip = first[0] < -CANON_EPS || (first[0].abs() <= CANON_EPS && first[1] < 0.0);
    if flip {
        first = [-first[0], -first[1]];
    }
    let second = [-first[1], first[0]];

    Ok(PrincipalFrame {
        mean: UtmPoint::new(mean_e, mean_n),
        pc_first: first,
        pc_second: second,
        eigenvalues: (lambda1, lambda2),
    })
}

pub fn focal_point(frame: &PrincipalFrame, role: Role, d: f64) -> FocalPoint {
    let axis = match role {
        Role::Lateral => frame.pc_second,
        Role::Frontal => frame.pc_first,
    };
    FocalPoint {
        position: UtmPoint::new(
            frame.mean.east + d * axis[0],
            frame.mean.north + d * axis[1],
        ),
        role,
        distance_d: d,
    }
}

/// Bearing from `image_pos` to `focal`, degrees clockwise from north in `[0, 360)`.
pub fn bearing_to(image_pos: UtmPoint, focal: UtmPoint) -> Result<f64> {
    let de = focal.east - image_pos.east;
    let dn = focal.north - image_pos.north;
    if de == 0.0 && dn == 0.0 {
        return Err(Error::UndefinedBearing);
    }
    Ok(normalize_degrees(de.atan2(dn).to_degrees()))
}

/// Wraps an angle in degrees into `[0, 360)`.
pub fn normalize_degrees(deg: f64) -> f64 {
    let r = deg.rem_euclid(360.0);
    // rem_euclid rounds tiny negative inputs up to exactly 360
    if r >= 360.0 {
        0.0
    } else {
        r
    }
}

/// Shortest angular distance between two headings, in `[0, 180]`.
pub fn circular_distance(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(360.0);
    d.min(360.0 - d)
}

/// Why an image could not be considered for a class.
#[derive(Debug, Clone, PartialEq)]
enum Rejection {
    MissingHeading(String),
    Coincident(String),
}

fn select_members_partial(
    images: &[ImageRecord],
    focal: &FocalPoint,
    cfg: &MiningConfig,
) -> (Vec<ClassMember>, Vec<Rejection>) {
    let mut members = Vec::new();
    let mut rejected = Vec::new();
    for image in images {
        let heading = match (image.heading, cfg.panorama_mode) {
            (_, true) => None,
            (Some(h), false) => Some(h),
            (None, false) => {
                rejected.push(Rejection::MissingHeading(image.id.clone()));
                continue;
            }
        };
        let Ok(target) = bearing_to(image.position, focal.position) else {
            rejected.push(Rejection::Coincident(image.id.clone()));
            continue;
        };
        let heading_error = heading.map_or(0.0, |h| circular_distance(h, target));
        if heading_error <= cfg.heading_tolerance {
            members.push(ClassMember {
                image_id: image.id.clone(),
                target_bearing: target,
                heading_error,
            });
        }
    }
    members.sort_by(|a, b| a.image_id.cmp(&b.image_id));
    (members, rejected)
}

/// Images of one cell that face `focal` within the heading tolerance, sorted by id.
pub fn select_members(
    images: &[ImageRecord],
    focal: &FocalPoint,
    cfg: &MiningConfig,
) -> Result<Vec<ClassMember>> {
    let (members, rejected) = select_members_partial(images, focal, cfg);
    match rejected.into_iter().next() {
        None => Ok(members),
        Some(Rejection::MissingHeading(id)) => Err(Error::MissingHeading(id)),
        Some(Rejection::Coincident(_)) => Err(Error::UndefinedBearing),
    }
}

/// Per-run diagnostics. Nothing in here aborts mining.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MiningReport {
    pub cells_total: usize,
    pub cells_mined: usize,
    pub skipped_too_few_points: Vec<CellIndex>,
    pub skipped_degenerate: Vec<CellIndex>,
    /// Cells with `λ2/λ1 > 0.95`; their axes are close to arbitrary.
    pub isotropic_cells: Vec<CellIndex>,
    pub missing_heading: Vec<String>,
    /// Images sitting exactly on a focal point.
    pub undefined_bearing: Vec<String>,
    pub dropped_small_classes: usize,
    pub lateral_classes: usize,
    pub frontal_classes: usize,
    pub heading_tolerance: f64,
    pub focal_distance_d: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MiningOutput {
    /// Lateral classes first, then frontal, each by ascending `class_id`.
    pub classes: Vec<MinedClass>,
    pub report: MiningReport,
}

enum CellOutcome {
    TooFew,
    Degenerate,
    Mined {
        isotropic: bool,
        classes: Vec<(Role, FocalPoint, Vec<ClassMember>)>,
        dropped: usize,
        missing_heading: Vec<String>,
        undefined_bearing: Vec<String>,
    },
}

fn mine_cell(images: &[ImageRecord], cfg: &MiningConfig) -> CellOutcome {
    let points: Vec<_> = images.iter().map(|im| im.position).collect();
    let frame = match principal_frame(&points) {
        Ok(f) => f,
        Err(Error::TooFewPoints(_)) => return CellOutcome::TooFew,
        Err(_) => return CellOutcome::Degenerate,
    };
    let lateral_frame = if cfg.mirror_lateral {
        frame.mirrored()
    } else {
        frame
    };

    let mut roles = Vec::with_capacity(2);
    if cfg.emit_lateral {
        roles.push((Role::Lateral, lateral_frame));
    }
    if cfg.emit_frontal {
        roles.push((Role::Frontal, frame));
    }

    let mut classes = Vec::new();
    let mut dropped = 0;
    let mut missing = HashSet::new();
    let mut undefined = HashSet::new();
    for (role, f) in roles {
        let focal = focal_point(&f, role, cfg.focal_distance_d);
        let (members, rejected) = select_members_partial(images, &focal, cfg);
        for r in rejected {
            match r {
                Rejection::MissingHeading(id) => missing.insert(id),
                Rejection::Coincident(id) => undefined.insert(id),
            };
        }
        if members.len() >= cfg.min_images_per_class {
            classes.push((role, focal, members));
        } else {
            dropped += 1;
        }
    }
    let mut missing_heading: Vec<_> = missing.into_iter().collect();
    missing_heading.sort();
    let mut undefined_bearing: Vec<_> = undefined.into_iter().collect();
    undefined_bearing.sort();
    CellOutcome::Mined {
        isotropic: frame.is_isotropic(),
        classes,
        dropped,
        missing_heading,
        undefined_bearing,
    }
}

/// Builds lateral and frontal classes for every cell.
///
/// Cells are processed in parallel and merged in `(row, col)` order, so the
/// output does not depend on the thread count.
pub fn mine_classes(buckets: &Buckets, cfg: &MiningConfig) -> Result<MiningOutput> {
    cfg.validate()?;
    let cells: Vec<_> = buckets.iter().collect();
    let outcomes: Vec<_> = cells
        .par_iter()
        .map(|(cell, images)| (**cell, mine_cell(images, cfg)))
        .collect();

    let mut report = MiningReport {
        cells_total: buckets.len(),
        heading_tolerance: cfg.heading_tolerance,
        focal_distance_d: cfg.focal_distance_d,
        ..Default::default()
    };
    let mut lateral = Vec::new();
    let mut frontal = Vec::new();
    for (cell, outcome) in outcomes {
        match outcome {
            CellOutcome::TooFew => report.skipped_too_few_points.push(cell),
            CellOutcome::Degenerate => report.skipped_degenerate.push(cell),
            CellOutcome::Mined {
                isotropic,
                classes,
                dropped,
                missing_heading,
                undefined_bearing,
            } => {
                report.cells_mined += 1;
                if isotropic {
                    report.isotropic_cells.push(cell);
                }
                report.dropped_small_classes += dropped;
                report.missing_heading.extend(missing_heading);
                report.undefined_bearing.extend(undefined_bearing);
                for (role, focal, members) in classes {
                    let bucket = match role {
                        Role::Lateral => &mut lateral,
                        Role::Frontal => &mut frontal,
                    };
                    bucket.push(MinedClass {
                        cell,
                        role,
                        focal,
                        members,
                        class_id: bucket.len(),
                    });
                }
            }
        }
    }
    report.lateral_classes = lateral.len();
    report.frontal_classes = frontal.len();
    lateral.extend(frontal);
    Ok(MiningOutput {
        classes: lateral,
        report,
    })
}
