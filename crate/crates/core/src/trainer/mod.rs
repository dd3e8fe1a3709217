//! Desk-scale training of a linear descriptor on mined classes.
//!
//! Each iteration draws half a batch from the lateral classes and half from
//! the frontal classes of the active cell group, encodes the raw features
//! with a linear map followed by L2 normalization, and minimizes the sum of
//! the two CosFace losses with Adam. A head's softmax only runs over the
//! classes of the active group, so neighbouring cells never compete. Once
//! every class of the group has been drawn, the epoch ends and the next
//! group becomes active.

mod adam;
pub mod synthetic;

use std::collections::HashSet;

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use adam::{adam_update, AdamConfig, Moments};
pub use synthetic::{
    eval_splits, generate_synthetic, Capture, EvalSplits, FeatureMap, SyntheticConfig, SyntheticDataset, SyntheticWorld, ViewSide,
};

use crate::cosface::{cosface_loss_and_grad, CosfaceParams, DescriptorBatch, HeadWeights};
use crate::error::{Error, Result};
use crate::eval::DescriptorSet;
use crate::geo::{bucket_images, group_for_epoch, group_of, GridConfig, GroupId, ImageRecord};
use crate::mining::{mine_classes, MinedClass, MiningConfig, MiningReport, Role};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iterations: usize,
    /// Split evenly between the lateral and the frontal head.
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub cosface: CosfaceParams,
    pub grid: GridConfig,
    pub descriptor_dim: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 2_000,
            batch_size: 128,
            adam: AdamConfig::default(),
            cosface: CosfaceParams::default(),
            grid: GridConfig::default(),
            descriptor_dim: 32,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::InvalidInput("iterations must be positive".into()));
        }
        if self.batch_size == 0 || !self.batch_size.is_multiple_of(2) {
            return Err(Error::InvalidInput(format!(
                "batch size must be even and positive, got {}",
                self.batch_size
            )));
        }
        if self.descriptor_dim == 0 {
            return Err(Error::InvalidInput("descriptor dim must be positive".into()));
        }
        if !(self.adam.learning_rate > 0.0) {
            return Err(Error::InvalidInput("learning rate must be positive".into()));
        }
        self.cosface.validate()?;
        self.grid.validate()
    }
}

/// Trainable parameters and optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    /// `feature_dim × descriptor_dim`; descriptors are `normalize(xᵀ E)`.
    pub encoder: Array2<f64>,
    pub head_lat: HeadWeights,
    pub head_front: HeadWeights,
    pub encoder_moments: Moments,
    pub lat_moments: Moments,
    pub front_moments: Moments,
    pub step: u64,
}

impl TrainState {
    pub fn init(feature_dim: usize, descriptor_dim: usize, lat_classes: usize, front_classes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let enc_std = Normal::new(0.0, 1.0 / (feature_dim as f64).sqrt()).expect("positive std");
        let encoder = Array2::from_shape_fn((feature_dim, descriptor_dim), |_| enc_std.sample(&mut rng));
        let unit = Normal::new(0.0, 1.0).expect("positive std");
        let head_lat = Array2::from_shape_fn((lat_classes, descriptor_dim), |_| unit.sample(&mut rng));
        let head_front = Array2::from_shape_fn((front_classes, descriptor_dim), |_| unit.sample(&mut rng));
        Self {
            encoder_moments: Moments::zeros_like(&encoder),
            lat_moments: Moments::zeros_like(&head_lat),
            front_moments: Moments::zeros_like(&head_front),
            encoder,
            head_lat: HeadWeights::new(head_lat),
            head_front: HeadWeights::new(head_front),
            step: 0,
        }
    }

    /// Unnormalized descriptors for a stack of feature rows.
    pub fn project(&self, features: &Array2<f64>) -> Array2<f64> {
        features.dot(&self.encoder)
    }

    /// Encodes the listed images into a unit-norm descriptor set.
    pub fn encode(&self, ids: &[String], features: &FeatureMap) -> Result<DescriptorSet> {
        let x = stack_features(ids, features, self.encoder.nrows())?;
        DescriptorSet::from_unnormalized(ids.to_vec(), &self.project(&x))
    }
}

/// Gradients matching the parameter shapes of [`TrainState`].
#[derive(Debug, Clone, PartialEq)]
pub struct TrainGrads {
    pub encoder: Array2<f64>,
    pub head_lat: Array2<f64>,
    pub head_front: Array2<f64>,
}

impl TrainGrads {
    pub fn zeros_like(state: &TrainState) -> Self {
        Self {
            encoder: Array2::zeros(state.encoder.raw_dim()),
            head_lat: Array2::zeros(state.head_lat.matrix.raw_dim()),
            head_front: Array2::zeros(state.head_front.matrix.raw_dim()),
        }
    }
}

/// Applies one Adam step to every parameter and advances the step counter.
pub fn adam_step(state: &mut TrainState, grads: &TrainGrads, cfg: &TrainConfig) -> Result<()> {
    let step = state.step + 1;
    adam_update(&mut state.encoder, &grads.encoder, &mut state.encoder_moments, step, &cfg.adam)?;
    adam_update(&mut state.head_lat.matrix, &grads.head_lat, &mut state.lat_moments, step, &cfg.adam)?;
    adam_update(
        &mut state.head_front.matrix,
        &grads.head_front,
        &mut state.front_moments,
        step,
        &cfg.adam,
    )?;
    state.step = step;
    Ok(())
}

fn stack_features(ids: &[String], features: &FeatureMap, dim: usize) -> Result<Array2<f64>> {
    let mut x = Array2::zeros((ids.len(), dim));
    for (id, mut row) in ids.iter().zip(x.axis_iter_mut(Axis(0))) {
        let f = features.get(id).ok_or_else(|| Error::MissingId(id.clone()))?;
        if f.len() != dim {
            return Err(Error::ShapeError(format!(
                "feature `{id}` has dim {}, expected {dim}",
                f.len()
            )));
        }
        row.assign(f);
    }
    Ok(x)
}

/// A class as the trainer sees it: its group and member features.
#[derive(Debug, Clone)]
struct TrainClass {
    group: GroupId,
    members: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: TrainState,
    /// Total loss (lateral + frontal) per iteration.
    pub history: Vec<f64>,
    /// `(lateral, frontal)` samples in every batch.
    pub batch_composition: Vec<(usize, usize)>,
    /// Active group of every iteration.
    pub groups: Vec<GroupId>,
    pub epochs_completed: u64,
    pub classes: Vec<MinedClass>,
    pub mining_report: MiningReport,
}

/// Exponential moving average with smoothing `2 / (window + 1)`.
pub fn smoothed(history: &[f64], window: usize) -> Vec<f64> {
    let alpha = 2.0 / (window as f64 + 1.0);
    let mut out = Vec::with_capacity(history.len());
    let mut acc = None;
    for &x in history {
        let next = match acc {
            None => x,
            Some(prev) => alpha * x + (1.0 - alpha) * prev,
        };
        acc = Some(next);
        out.push(next);
    }
    out
}

struct HeadSampler<'a> {
    role: Role,
    classes: &'a [TrainClass],
    enabled: bool,
}

struct SubBatch {
    ids: Vec<String>,
    /// Row in the group-restricted head.
    labels: Vec<usize>,
    /// Global class id of each row of the group-restricted head.
    head_rows: Vec<usize>,
}

impl HeadSampler<'_> {
    fn in_group(&self, group: GroupId) -> Vec<usize> {
        if !self.enabled {
            return Vec::new();
        }
        (0..self.classes.len()).filter(|&c| self.classes[c].group == group).collect()
    }

    /// Draws `count` classes uniformly (with replacement) and one member of each.
    fn draw(&self, group: GroupId, count: usize, rng: &mut ChaCha8Rng, seen: &mut HashSet<(Role, usize)>) -> SubBatch {
        let head_rows = self.in_group(group);
        let mut ids = Vec::with_capacity(count);
        let mut labels = Vec::with_capacity(count);
        if !head_rows.is_empty() {
            for _ in 0..count {
                let local = rng.random_range(0..head_rows.len());
                let class = &self.classes[head_rows[local]];
                let member = &class.members[rng.random_range(0..class.members.len())];
                seen.insert((self.role, head_rows[local]));
                ids.push(member.clone());
                labels.push(local);
            }
        }
        SubBatch { ids, labels, head_rows }
    }
}

/// Loss and gradient contribution of one head; accumulates into `grad_encoder`
/// and `grad_head`.
fn head_pass(
    state: &TrainState,
    head: &HeadWeights,
    batch: &SubBatch,
    features: &FeatureMap,
    params: &CosfaceParams,
    grad_encoder: &mut Array2<f64>,
    grad_head: &mut Array2<f64>,
) -> Result<f64> {
    if batch.ids.is_empty() {
        return Ok(0.0);
    }
    let x = stack_features(&batch.ids, features, state.encoder.nrows())?;
    let y = state.project(&x);
    let descriptors = DescriptorBatch::from_raw(y.view(), batch.labels.clone())?;
    let sub_head = HeadWeights::new(head.matrix.select(Axis(0), &batch.head_rows));
    let (loss, grads) = cosface_loss_and_grad(&descriptors, &sub_head, params)?;
    *grad_encoder += &x.t().dot(&grads.grad_inputs);
    for (local, &global) in batch.head_rows.iter().enumerate() {
        let mut row = grad_head.row_mut(global);
        row += &grads.grad_head.row(local);
    }
    Ok(loss)
}

fn to_train_classes(classes: &[MinedClass], role: Role, grid: &GridConfig) -> Vec<TrainClass> {
    classes
        .iter()
        .filter(|c| c.role == role)
        .map(|c| TrainClass {
            group: group_of(c.cell, grid),
            members: c.members.iter().map(|m| m.image_id.clone()).collect(),
        })
        .collect()
}

/// Mines classes from `images` and trains encoder plus both heads.
pub fn train(
    images: &[ImageRecord],
    features: &FeatureMap,
    mining_cfg: &MiningConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let feature_dim = features
        .values()
        .next()
        .map(Array1::len)
        .ok_or_else(|| Error::InvalidInput("no features".into()))?;

    let buckets = bucket_images(images, &cfg.grid)?;
    let mined = mine_classes(&buckets, mining_cfg)?;
    let lateral = to_train_classes(&mined.classes, Role::Lateral, &cfg.grid);
    let frontal = to_train_classes(&mined.classes, Role::Frontal, &cfg.grid);

    let enough = |enabled: bool, n: usize| !enabled || n >= 2;
    if !(mining_cfg.emit_lateral || mining_cfg.emit_frontal)
        || !enough(mining_cfg.emit_lateral, lateral.len())
        || !enough(mining_cfg.emit_frontal, frontal.len())
    {
        return Err(Error::NotEnoughClasses {
            lateral: lateral.len(),
            frontal: frontal.len(),
        });
    }

    let mut state = TrainState::init(feature_dim, cfg.descriptor_dim, lateral.len(), frontal.len(), cfg.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5eed));
    let samplers = [
        HeadSampler {
            role: Role::Lateral,
            classes: &lateral,
            enabled: mining_cfg.emit_lateral,
        },
        HeadSampler {
            role: Role::Frontal,
            classes: &frontal,
            enabled: mining_cfg.emit_frontal,
        },
    ];
    let group_is_live =
        |g: GroupId| samplers.iter().any(|s| !s.in_group(g).is_empty());

    let mut epoch = 0u64;
    let advance = |epoch: &mut u64| {
        // at least one group has classes, so this terminates within N² steps
        loop {
            *epoch += 1;
            if group_is_live(group_for_epoch(*epoch, &cfg.grid)) {
                break;
            }
        }
    };
    if !group_is_live(group_for_epoch(epoch, &cfg.grid)) {
        advance(&mut epoch);
    }
    let mut epochs_completed = 0;

    let half = cfg.batch_size / 2;
    let mut history = Vec::with_capacity(cfg.iterations);
    let mut batch_composition = Vec::with_capacity(cfg.iterations);
    let mut groups = Vec::with_capacity(cfg.iterations);
    let mut seen = HashSet::new();

    for _ in 0..cfg.iterations {
        let group = group_for_epoch(epoch, &cfg.grid);
        let lat_batch = samplers[0].draw(group, half, &mut rng, &mut seen);
        let front_batch = samplers[1].draw(group, half, &mut rng, &mut seen);

        let mut grads = TrainGrads::zeros_like(&state);
        let loss_lat = head_pass(
            &state,
            &state.head_lat,
            &lat_batch,
            features,
            &cfg.cosface,
            &mut grads.encoder,
            &mut grads.head_lat,
        )?;
        let loss_front = head_pass(
            &state,
            &state.head_front,
            &front_batch,
            features,
            &cfg.cosface,
            &mut grads.encoder,
            &mut grads.head_front,
        )?;
        adam_step(&mut state, &grads, cfg)?;

        history.push(loss_lat + loss_front);
        batch_composition.push((lat_batch.ids.len(), front_batch.ids.len()));
        groups.push(group);

        let group_size = lat_batch.head_rows.len() + front_batch.head_rows.len();
        if seen.len() == group_size {
            seen.clear();
            epochs_completed += 1;
            advance(&mut epoch);
        }
    }

    Ok(TrainOutcome {
        state,
        history,
        batch_composition,
        groups,
        epochs_completed,
        classes: mined.classes,
        mining_report: mined.report,
    })
}
