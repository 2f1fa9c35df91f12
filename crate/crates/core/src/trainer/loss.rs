//! Softmax cross-entropy over temperature-scaled cosine logits, with its
//! exact gradient with respect to the unnormalized prototype parameters.

use crate::error::{Error, Result};
use crate::types::PrototypeSet;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainBatchItem {
    pub embedding: Vec<f64>,
    pub target_row: usize,
    pub is_negative: bool,
}

/// Free prototype parameters, `rows × dim`, normalized only when used.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeParams {
    pub rows: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl PrototypeParams {
    pub fn new(rows: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * dim || dim == 0 || rows == 0 {
            return Err(Error::DimensionMismatch {
                expected: rows * dim,
                actual: data.len(),
            });
        }
        Ok(Self { rows, dim, data })
    }

    pub fn from_set(protos: &PrototypeSet) -> Self {
        Self {
            rows: protos.num_rows(),
            dim: protos.dim(),
            data: protos.vectors().iter().map(|v| *v as f64).collect(),
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.dim..(r + 1) * self.dim]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.data.chunks_exact(self.dim).map(<[f64]>::to_vec).collect()
    }

    /// Unit-norm rows and the original norms.
    fn normalized(&self) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
        let mut units = Vec::with_capacity(self.rows);
        let mut norms = Vec::with_capacity(self.rows);
        for r in 0..self.rows {
            let row = self.row(r);
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(n > 0.0 && n.is_finite()) {
                return Err(Error::DegeneratePrototype(format!("row {r}")));
            }
            units.push(row.iter().map(|v| v / n).collect());
            norms.push(n);
        }
        Ok((units, norms))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    /// Mean cross-entropy over the batch.
    pub loss: f64,
    /// Per-item logits over all prototype rows.
    pub logits: Vec<Vec<f64>>,
}

fn unit_embedding(e: &[f64], index: usize, dim: usize) -> Result<Vec<f64>> {
    if e.len() != dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            actual: e.len(),
        });
    }
    if e.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(index));
    }
    let n = e.iter().map(|v| v * v).sum::<f64>().sqrt();
    Ok(if n > 0.0 {
        e.iter().map(|v| v / n).collect()
    } else {
        vec![0.0; dim]
    })
}

fn check_batch(batch: &[TrainBatchItem], params: &PrototypeParams, temperature: f64) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::Invalid("training batch is empty".into()));
    }
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::Config(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    if let Some(item) = batch.iter().find(|i| i.target_row >= params.rows) {
        return Err(Error::Invalid(format!(
            "target row {} out of range for {} prototypes",
            item.target_row, params.rows
        )));
    }
    Ok(())
}

struct Pass {
    loss: f64,
    logits: Vec<Vec<f64>>,
    units: Vec<Vec<f64>>,
    norms: Vec<f64>,
    embeddings: Vec<Vec<f64>>,
    cosines: Vec<Vec<f64>>,
}

fn run(batch: &[TrainBatchItem], params: &PrototypeParams, temperature: f64) -> Result<Pass> {
    check_batch(batch, params, temperature)?;
    let (units, norms) = params.normalized()?;
    let mut loss = 0.0;
    let mut logits = Vec::with_capacity(batch.len());
    let mut cosines = Vec::with_capacity(batch.len());
    let mut embeddings = Vec::with_capacity(batch.len());
    for (i, item) in batch.iter().enumerate() {
        let e = unit_embedding(&item.embedding, i, params.dim)?;
        let cos: Vec<f64> = units
            .iter()
            .map(|u| u.iter().zip(&e).map(|(a, b)| a * b).sum())
            .collect();
        let z: Vec<f64> = cos.iter().map(|c| c / temperature).collect();
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - z[item.target_row];
        logits.push(z);
        cosines.push(cos);
        embeddings.push(e);
    }
    Ok(Pass {
        loss: loss / batch.len() as f64,
        logits,
        units,
        norms,
        embeddings,
        cosines,
    })
}

pub fn forward_loss(batch: &[TrainBatchItem], params: &PrototypeParams, temperature: f64) -> Result<ForwardOutput> {
    let p = run(batch, params, temperature)?;
    Ok(ForwardOutput {
        loss: p.loss,
        logits: p.logits,
    })
}

/// Loss, logits and the gradient (`rows × dim`, row-major) in one pass.
///
/// With `c = ê·p/‖p‖` and `z = c/τ`, the chain through the normalization is
/// `∂c/∂p = (ê − c·p̂) / ‖p‖`.
pub fn loss_and_gradient(
    batch: &[TrainBatchItem],
    params: &PrototypeParams,
    temperature: f64,
) -> Result<(ForwardOutput, Vec<f64>)> {
    let p = run(batch, params, temperature)?;
    let dim = params.dim;
    let scale = 1.0 / (batch.len() as f64 * temperature);
    let mut grad = vec![0.0f64; params.rows * dim];
    for (i, item) in batch.iter().enumerate() {
        let z = &p.logits[i];
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        for r in 0..params.rows {
            let soft = exps[r] / total;
            let dz = soft - if r == item.target_row { 1.0 } else { 0.0 };
            let coef = dz * scale / p.norms[r];
            let c = p.cosines[i][r];
            let g = &mut grad[r * dim..(r + 1) * dim];
            for ((gd, e), u) in g.iter_mut().zip(&p.embeddings[i]).zip(&p.units[r]) {
                *gd += coef * (e - c * u);
            }
        }
    }
    Ok((
        ForwardOutput {
            loss: p.loss,
            logits: p.logits,
        },
        grad,
    ))
}

pub fn backward(batch: &[TrainBatchItem], params: &PrototypeParams, temperature: f64) -> Result<Vec<f64>> {
    Ok(loss_and_gradient(batch, params, temperature)?.1)
}

/// Background row (index within the background block) whose prototype is
/// most similar to `embedding`.
pub fn assign_negative_target(embedding: &[f64], params: &PrototypeParams, num_objects: usize) -> Result<usize> {
    if params.rows <= num_objects {
        return Err(Error::Config(
            "negative examples need at least one background prototype".into(),
        ));
    }
    let e = unit_embedding(embedding, 0, params.dim)?;
    let mut best = (0usize, f64::NEG_INFINITY);
    for r in num_objects..params.rows {
        let row = params.row(r);
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        let cos = if n > 0.0 {
            row.iter().zip(&e).map(|(a, b)| a * b).sum::<f64>() / n
        } else {
            f64::NEG_INFINITY
        };
        if cos > best.1 {
            best = (r - num_objects, cos);
        }
    }
    Ok(best.0)
}
