//! Large-margin cosine loss (CosFace) in double precision.
//!
//! Inputs and class weights are both L2-normalized before the cosine
//! logits are formed; the true-class cosine is reduced by the margin `m` and
//! every logit is scaled by `s`:
//!
//! ```text
//! loss_i = -log( e^{s(cos_y - m)} / (e^{s(cos_y - m)} + Σ_{j≠y} e^{s cos_j}) )
//! ```
//!
//! Gradients are taken with respect to the *unnormalized* inputs and head
//! rows, i.e. they include the Jacobian `(I - ûûᵀ)/‖u‖` of each normalization.

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on row norms for inputs that claim to be normalized.
pub const UNIT_NORM_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CosfaceParams {
    pub scale_s: f64,
    pub margin_m: f64,
}

impl Default for CosfaceParams {
    fn default() -> Self {
        Self {
            scale_s: 30.0,
            margin_m: 0.4,
        }
    }
}

impl CosfaceParams {
    pub fn new(scale_s: f64, margin_m: f64) -> Self {
        Self { scale_s, margin_m }
    }

    /// Accepts `s = 0` (a constant loss), which is useful as a degenerate check.
    pub fn validate(&self) -> Result<()> {
        if !(self.scale_s.is_finite() && self.scale_s >= 0.0) {
            return Err(Error::InvalidInput(format!("scale s = {}", self.scale_s)));
        }
        if !(0.0..1.0).contains(&self.margin_m) {
            return Err(Error::InvalidInput(format!(
                "margin m = {} outside [0, 1)",
                self.margin_m
            )));
        }
        Ok(())
    }
}

fn row_norm(row: ArrayView1<f64>) -> f64 {
    row.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Normalizes every row; zero or non-finite rows are rejected.
fn normalize_rows(raw: ArrayView2<f64>, what: &'static str) -> Result<(Array2<f64>, Vec<f64>)> {
    let mut unit = raw.to_owned();
    let mut norms = Vec::with_capacity(raw.nrows());
    for (i, mut row) in unit.axis_iter_mut(Axis(0)).enumerate() {
        let norm = row_norm(row.view());
        if !(norm.is_finite() && norm > 0.0) {
            return Err(Error::NotNormalized { what, row: i, norm });
        }
        row.mapv_inplace(|x| x / norm);
        norms.push(norm);
    }
    Ok((unit, norms))
}

/// Unit-norm descriptors with their class labels.
///
/// The pre-normalization row norms are kept so gradients can be mapped back
/// onto the raw encoder outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorBatch {
    unit: Array2<f64>,
    norms: Vec<f64>,
    labels: Vec<usize>,
}

impl DescriptorBatch {
    /// Wraps rows that are already unit-norm (within `1e-9`).
    pub fn new(vectors: Array2<f64>, labels: Vec<usize>) -> Result<Self> {
        Self::check_labels_len(vectors.nrows(), &labels)?;
        let mut norms = Vec::with_capacity(vectors.nrows());
        for (i, row) in vectors.axis_iter(Axis(0)).enumerate() {
            let norm = row_norm(row);
            if !((norm - 1.0).abs() <= UNIT_NORM_TOL) {
                return Err(Error::NotNormalized {
                    what: "descriptor",
                    row: i,
                    norm,
                });
            }
            norms.push(norm);
        }
        Ok(Self {
            unit: vectors,
            norms,
            labels,
        })
    }

    /// Normalizes raw rows (e.g. encoder outputs).
    pub fn from_raw(raw: ArrayView2<f64>, labels: Vec<usize>) -> Result<Self> {
        Self::check_labels_len(raw.nrows(), &labels)?;
        let (unit, norms) = normalize_rows(raw, "descriptor")?;
        Ok(Self { unit, norms, labels })
    }

    pub fn empty(dim: usize) -> Self {
        Self {
            unit: Array2::zeros((0, dim)),
            norms: Vec::new(),
            labels: Vec::new(),
        }
    }

    fn check_labels_len(rows: usize, labels: &[usize]) -> Result<()> {
        if rows != labels.len() {
            return Err(Error::ShapeError(format!(
                "{} rows but {} labels",
                rows,
                labels.len()
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.unit.ncols()
    }

    pub fn vectors(&self) -> ArrayView2<'_, f64> {
        self.unit.view()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }
}

/// One classifier head: a `C × d` matrix of raw (unnormalized) class weights.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadWeights {
    pub matrix: Array2<f64>,
}

impl HeadWeights {
    pub fn new(matrix: Array2<f64>) -> Self {
        Self { matrix }
    }

    pub fn classes(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn dim(&self) -> usize {
        self.matrix.ncols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    /// Batch-mean loss.
    pub loss: f64,
    /// `B × C` softmax inputs `s·(cos_j - m·[j = y])`.
    pub logits: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    /// `B × d`, with respect to the raw input rows.
    pub grad_inputs: Array2<f64>,
    /// `C × d`, with respect to the raw head rows.
    pub grad_head: Array2<f64>,
}

struct Forward {
    loss: f64,
    logits: Array2<f64>,
    probs: Array2<f64>,
    head_unit: Array2<f64>,
    head_norms: Vec<f64>,
}

fn forward(batch: &DescriptorBatch, head: &HeadWeights, p: &CosfaceParams) -> Result<Forward> {
    p.validate()?;
    if batch.dim() != head.dim() {
        return Err(Error::ShapeError(format!(
            "descriptor dim {} vs head dim {}",
            batch.dim(),
            head.dim()
        )));
    }
    let classes = head.classes();
    if let Some(&label) = batch.labels.iter().find(|&&l| l >= classes) {
        return Err(Error::InvalidLabel { label, classes });
    }
    let (head_unit, head_norms) = normalize_rows(head.matrix.view(), "head")?;

    let cosines = batch.unit.dot(&head_unit.t());
    let mut logits = cosines * p.scale_s;
    let mut probs = Array2::zeros(logits.raw_dim());
    let mut total = 0.0;
    for (i, (&y, mut row)) in batch.labels.iter().zip(logits.axis_iter_mut(Axis(0))).enumerate() {
        row[y] -= p.scale_s * p.margin_m;
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for (j, &z) in row.iter().enumerate() {
            let e = (z - max).exp();
            probs[[i, j]] = e;
            denom += e;
        }
        probs.row_mut(i).mapv_inplace(|e| e / denom);
        // -log softmax_y = logsumexp - z_y, and it can't go negative
        total += (max + denom.ln() - row[y]).max(0.0);
    }
    let loss = if batch.is_empty() {
        0.0
    } else {
        total / batch.len() as f64
    };
    Ok(Forward {
        loss,
        logits,
        probs,
        head_unit,
        head_norms,
    })
}

pub fn cosface_loss(batch: &DescriptorBatch, head: &HeadWeights, p: &CosfaceParams) -> Result<LossOutput> {
    let f = forward(batch, head, p)?;
    Ok(LossOutput {
        loss: f.loss,
        logits: f.logits,
    })
}

/// Projects `g` onto the tangent space of the unit sphere at `unit` and
/// divides by the pre-normalization norm.
fn through_normalization(grad: &mut Array2<f64>, unit: &Array2<f64>, norms: &[f64]) {
    for ((mut g, u), &norm) in grad
        .axis_iter_mut(Axis(0))
        .zip(unit.axis_iter(Axis(0)))
        .zip(norms)
    {
        let radial = g.dot(&u);
        g.zip_mut_with(&u, |gi, &ui| *gi = (*gi - radial * ui) / norm);
    }
}

/// Loss and exact gradients in one pass.
pub fn cosface_loss_and_grad(
    batch: &DescriptorBatch,
    head: &HeadWeights,
    p: &CosfaceParams,
) -> Result<(f64, Gradients)> {
    let f = forward(batch, head, p)?;
    let b = batch.len();
    if b == 0 {
        return Ok((
            0.0,
            Gradients {
                grad_inputs: Array2::zeros((0, head.dim())),
                grad_head: Array2::zeros(head.matrix.raw_dim()),
            },
        ));
    }
    // dL/dcos_ij = s (p_ij - [j = y_i]) / B
    let mut dcos = f.probs;
    for (i, &y) in batch.labels.iter().enumerate() {
        dcos[[i, y]] -= 1.0;
    }
    dcos *= p.scale_s / b as f64;

    let mut grad_inputs = dcos.dot(&f.head_unit);
    let mut grad_head = dcos.t().dot(&batch.unit);
    through_normalization(&mut grad_inputs, &batch.unit, &batch.norms);
    through_normalization(&mut grad_head, &f.head_unit, &f.head_norms);
    Ok((
        f.loss,
        Gradients {
            grad_inputs,
            grad_head,
        },
    ))
}

pub fn cosface_grad(batch: &DescriptorBatch, head: &HeadWeights, p: &CosfaceParams) -> Result<Gradients> {
    cosface_loss_and_grad(batch, head, p).map(|(_, g)| g)
}

/// Sum of the lateral and frontal head losses; an empty batch contributes 0.
pub fn combined_loss(
    batch_lat: &DescriptorBatch,
    head_lat: &HeadWeights,
    batch_front: &DescriptorBatch,
    head_front: &HeadWeights,
    p: &CosfaceParams,
) -> Result<f64> {
    let lat = if batch_lat.is_empty() {
        0.0
    } else {
        cosface_loss(batch_lat, head_lat, p)?.loss
    };
    let front = if batch_front.is_empty() {
        0.0
    } else {
        cosface_loss(batch_front, head_front, p)?.loss
    };
    Ok(lat + front)
}
