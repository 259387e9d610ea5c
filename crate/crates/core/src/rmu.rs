//! Representation Misdirection for Unlearning on the toy model.
//!
//! Minimizes `mean_p ‖h(x_f) − s·u‖² + α · mean_p ‖h(x_r) − h_frozen(x_r)‖²`
//! with `h` the residual after `target_layer`, by plain SGD over one forget
//! and one retain sequence per step (`forget[i % n_f]`, `retain[i % n_r]`).
//! Parameters past `target_layer` receive no gradient.

use std::fs;
use std::path::Path;

use ndarray::{Array1, ArrayView1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{check_layer, LanguageModel, ResidualLoss, TokenId, ToyModel};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RmuConfig {
    pub steering_scale: f64,
    pub retain_weight: f64,
    pub target_layer: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for RmuConfig {
    fn default() -> Self {
        Self {
            steering_scale: 400.0,
            retain_weight: 300.0,
            target_layer: 3,
            steps: 200,
            learning_rate: 2e-6,
            seed: 0,
        }
    }
}

impl RmuConfig {
    pub fn validate(&self, n_layers: usize) -> Result<()> {
        if !(self.steering_scale > 0.0 && self.steering_scale.is_finite()) {
            return Err(Error::Config("steering_scale must be positive".into()));
        }
        if !(self.retain_weight >= 0.0 && self.retain_weight.is_finite()) {
            return Err(Error::Config("retain_weight must be non-negative".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        check_layer(self.target_layer, n_layers)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RmuStep {
    pub step: usize,
    pub forget_loss: f64,
    pub retain_loss: f64,
    pub total_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RmuOutcome {
    pub model: ToyModel,
    /// Losses measured before each update.
    pub trace: Vec<RmuStep>,
    pub direction: Array1<f32>,
}

/// The fixed random unit direction `u` for a seed.
pub fn rmu_direction(seed: u64, d_model: usize) -> Array1<f32> {
    let mut r = rng::seeded(seed);
    Array1::from(rng::unit_vector(&mut r, d_model))
}

fn non_empty(corpus: &[Vec<TokenId>], name: &str) -> Result<Vec<usize>> {
    let docs: Vec<usize> = (0..corpus.len()).filter(|&i| !corpus[i].is_empty()).collect();
    if docs.is_empty() {
        return Err(Error::Argument(format!("{name} corpus has no tokens")));
    }
    Ok(docs)
}

pub fn rmu_train(
    model: &ToyModel,
    forget: &[Vec<TokenId>],
    retain: &[Vec<TokenId>],
    config: &RmuConfig,
) -> Result<RmuOutcome> {
    config.validate(model.config.n_layers)?;
    let forget_docs = non_empty(forget, "forget")?;
    let retain_docs = non_empty(retain, "retain")?;
    let direction = rmu_direction(config.seed, model.config.d_model);
    let target = &direction * config.steering_scale as f32;
    let layer = config.target_layer;

    let frozen = model;
    let mut trained = model.clone();
    let mut trace = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let f_doc = &forget[forget_docs[step % forget_docs.len()]];
        let r_doc = &retain[retain_docs[step % retain_docs.len()]];
        let reference = frozen.residual(r_doc, layer)?;
        let (forget_loss, mut grads) = trained.residual_loss_grad(
            f_doc,
            layer,
            ResidualLoss::ToVector {
                target: target.view(),
                weight: 1.0,
            },
        )?;
        let (retain_loss, retain_grads) = trained.residual_loss_grad(
            r_doc,
            layer,
            ResidualLoss::ToReference {
                reference: &reference,
                weight: config.retain_weight as f32,
            },
        )?;
        grads.add_assign(&retain_grads);
        let total_loss = forget_loss + retain_loss;
        if !total_loss.is_finite() {
            return Err(Error::Argument(format!(
                "RMU loss diverged at step {step}; lower the learning rate"
            )));
        }
        trace.push(RmuStep {
            step,
            forget_loss,
            retain_loss,
            total_loss,
        });
        trained.sgd_step(&grads, config.learning_rate as f32);
    }
    Ok(RmuOutcome {
        model: trained,
        trace,
        direction,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RmuProbe {
    /// Mean over positions of `‖h − s·u‖`.
    pub forget_distance: f64,
    /// Mean over positions of `‖h − h_frozen‖`.
    pub retain_drift: f64,
}

/// Distances of `model`'s activations on `corpus` to `s·u` and to `frozen`.
pub fn rmu_probe<M: LanguageModel + ?Sized, F: LanguageModel + ?Sized>(
    model: &M,
    frozen: &F,
    corpus: &[Vec<TokenId>],
    layer: usize,
    s: f64,
    u: ArrayView1<'_, f32>,
) -> Result<RmuProbe> {
    check_layer(layer, model.n_layers())?;
    if u.len() != model.d_model() {
        return Err(Error::shape("direction", &[model.d_model()], &[u.len()]));
    }
    let target = u.mapv(|v| v as f64 * s);
    let sums = corpus
        .par_iter()
        .filter(|d| !d.is_empty())
        .map(|doc| -> Result<(f64, f64, usize)> {
            let h = model.capture_activations(doc, layer)?.values;
            let h0 = frozen.capture_activations(doc, layer)?.values;
            let mut dist = 0.0;
            let mut drift = 0.0;
            for (row, row0) in h.rows().into_iter().zip(h0.rows()) {
                dist += row
                    .iter()
                    .zip(&target)
                    .map(|(&a, &t)| (a as f64 - t).powi(2))
                    .sum::<f64>()
                    .sqrt();
                drift += row
                    .iter()
                    .zip(row0)
                    .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
                    .sum::<f64>()
                    .sqrt();
            }
            Ok((dist, drift, h.nrows()))
        })
        .try_reduce(|| (0.0, 0.0, 0), |a, b| Ok((a.0 + b.0, a.1 + b.1, a.2 + b.2)))?;
    let n = sums.2.max(1) as f64;
    Ok(RmuProbe {
        forget_distance: sums.0 / n,
        retain_drift: sums.1 / n,
    })
}

pub fn write_trace_csv(path: impl AsRef<Path>, trace: &[RmuStep]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_writer(Vec::new());
    for s in trace {
        w.serialize(s).map_err(|e| Error::Data {
            line: None,
            message: e.to_string(),
        })?;
    }
    let mut bytes = w.into_inner().map_err(|e| Error::Data {
        line: None,
        message: e.to_string(),
    })?;
    if trace.is_empty() {
        bytes = b"step,forget_loss,retain_loss,total_loss\n".to_vec();
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn toy() -> ToyModel {
        ToyModel::new(ModelConfig::new(16, 2, 2, 20, 9)).unwrap()
    }

    #[test]
    fn zero_steps_is_identity() {
        let m = toy();
        let cfg = RmuConfig {
            steps: 0,
            target_layer: 1,
            ..Default::default()
        };
        let out = rmu_train(&m, &[vec![1, 2]], &[vec![3, 4]], &cfg).unwrap();
        assert_eq!(out.model, m);
        assert!(out.trace.is_empty());
    }

    #[test]
    fn probe_self_and_zero_scale() {
        let m = toy();
        let u = rmu_direction(1, 16);
        let corpus = vec![vec![1, 5, 7], vec![2]];
        let p = rmu_probe(&m, &m, &corpus, 1, 0.0, u.view()).unwrap();
        assert_eq!(p.retain_drift, 0.0);
        let mut norms = 0.0;
        let mut n = 0;
        for doc in &corpus {
            let h = m.residual(doc, 1).unwrap();
            for row in h.rows() {
                norms += row.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
                n += 1;
            }
        }
        assert!((p.forget_distance - norms / n as f64).abs() < 1e-12);
    }

    #[test]
    fn direction_is_unit() {
        let u = rmu_direction(3, 32);
        let n: f32 = u.iter().map(|v| v * v).sum();
        assert!((n - 1.0).abs() < 1e-5);
    }

    #[test]
    fn empty_corpus_rejected() {
        let cfg = RmuConfig {
            target_layer: 0,
            ..Default::default()
        };
        assert!(rmu_train(&toy(), &[], &[vec![1]], &cfg).is_err());
    }
}
