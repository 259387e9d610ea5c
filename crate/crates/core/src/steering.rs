//! Latent steering actions and the steered forward pass.
//!
//! At the SAE's layer the residual stream `x` is encoded to `f`, the rows of
//! a [`SteeringSpec`] rewrite a copy `f'` in file order, and the stream
//! continues from `x + decode(f') − decode(f)` plus any `add` deltas. Only
//! positions whose latents actually changed are touched, so a spec that
//! never fires leaves the forward pass bit-identical.

use std::fmt;
use std::str::FromStr;
use std::sync::{Arc, Mutex};

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ActivationBatch, HookPoint, LanguageModel, TokenId};
use crate::sae::{LatentBatch, SparseAutoencoder};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HookAction {
    Add,
    Clamp,
    ClampCond,
    ClampRefusal,
    Print,
    Debug,
}

impl HookAction {
    pub const ALL: [HookAction; 6] = [
        HookAction::Add,
        HookAction::Clamp,
        HookAction::ClampCond,
        HookAction::ClampRefusal,
        HookAction::Print,
        HookAction::Debug,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            HookAction::Add => "add",
            HookAction::Clamp => "clamp",
            HookAction::ClampCond => "clamp_cond",
            HookAction::ClampRefusal => "clamp_refusal",
            HookAction::Print => "print",
            HookAction::Debug => "debug",
        }
    }

    pub fn is_clamp_family(self) -> bool {
        matches!(self, HookAction::Clamp | HookAction::ClampCond | HookAction::ClampRefusal)
    }
}

impl fmt::Display for HookAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for HookAction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        HookAction::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::Spec(format!("unknown hook_action {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteeringRow {
    pub latent_idx: usize,
    pub hook_action: HookAction,
    pub steering_coefficient: f64,
    pub sae_id: String,
    pub sae_release: String,
    pub clamp_value: Option<f64>,
    pub refusal_id: Option<usize>,
    pub description: Option<String>,
    pub url: Option<String>,
}

impl SteeringRow {
    pub fn new(
        latent_idx: usize,
        hook_action: HookAction,
        steering_coefficient: f64,
        sae_release: impl Into<String>,
        sae_id: impl Into<String>,
    ) -> Self {
        Self {
            latent_idx,
            hook_action,
            steering_coefficient,
            sae_id: sae_id.into(),
            sae_release: sae_release.into(),
            clamp_value: None,
            refusal_id: None,
            description: None,
            url: None,
        }
    }

    pub fn with_clamp_value(mut self, v: f64) -> Self {
        self.clamp_value = Some(v);
        self
    }

    pub fn with_refusal_id(mut self, id: usize) -> Self {
        self.refusal_id = Some(id);
        self
    }

    pub fn with_description(mut self, d: impl Into<String>) -> Self {
        self.description = Some(d.into());
        self
    }

    /// Per-row invariants that do not depend on the SAE.
    pub fn validate(&self) -> Result<()> {
        match self.hook_action {
            HookAction::ClampCond | HookAction::ClampRefusal if self.clamp_value.is_none() => {
                Err(Error::Spec(format!(
                    "{} row for latent {} requires clamp_value",
                    self.hook_action, self.latent_idx
                )))
            }
            HookAction::ClampRefusal if self.refusal_id.is_none() => Err(Error::Spec(format!(
                "clamp_refusal row for latent {} requires refusal_id",
                self.latent_idx
            ))),
            _ => {
                if !self.steering_coefficient.is_finite()
                    || self.clamp_value.is_some_and(|v| !v.is_finite())
                {
                    return Err(Error::Spec(format!(
                        "row for latent {} has a non-finite number",
                        self.latent_idx
                    )));
                }
                Ok(())
            }
        }
    }
}

/// Ordered steering rows; rows apply in this order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SteeringSpec {
    pub rows: Vec<SteeringRow>,
}

impl SteeringSpec {
    pub fn new(rows: Vec<SteeringRow>) -> Self {
        Self { rows }
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Row invariants plus the single-SAE rule; with an SAE, also index ranges.
    pub fn validate(&self, sae: Option<&SparseAutoencoder>) -> Result<()> {
        for row in &self.rows {
            row.validate()?;
        }
        if let Some(first) = self.rows.first() {
            if let Some(other) = self
                .rows
                .iter()
                .find(|r| r.sae_release != first.sae_release || r.sae_id != first.sae_id)
            {
                return Err(Error::Spec(format!(
                    "rows reference different SAEs: ({}, {}) and ({}, {})",
                    first.sae_release, first.sae_id, other.sae_release, other.sae_id
                )));
            }
        }
        if let Some(sae) = sae {
            let d_sae = sae.d_sae();
            for row in &self.rows {
                let indices = std::iter::once(row.latent_idx).chain(row.refusal_id);
                for idx in indices {
                    if idx >= d_sae {
                        return Err(Error::Range {
                            what: "latent index",
                            index: idx,
                            limit: d_sae,
                        });
                    }
                }
            }
        }
        Ok(())
    }
}

/// How a refusal row's trigger is scoped.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefusalTrigger {
    /// Write the refusal latent at each position where a monitored latent fires.
    #[default]
    PerPosition,
    /// Write it at every position once any monitored latent fires anywhere.
    SequenceGlobal,
}

pub type DiagnosticSink = Arc<dyn Fn(&str) + Send + Sync>;
pub type Inspector = Arc<dyn Fn(&LatentBatch) -> std::result::Result<LatentBatch, String> + Send + Sync>;

/// Knobs for the steered forward pass and its side channels.
#[derive(Clone, Default)]
pub struct SteeringOptions {
    pub refusal_trigger: RefusalTrigger,
    /// Receives `print` output; defaults to the `log` crate at info level.
    pub diagnostics: Option<DiagnosticSink>,
    /// Handler for `debug` rows; may return edited latents.
    pub inspector: Option<Inspector>,
}

impl fmt::Debug for SteeringOptions {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SteeringOptions")
            .field("refusal_trigger", &self.refusal_trigger)
            .field("diagnostics", &self.diagnostics.is_some())
            .field("inspector", &self.inspector.is_some())
            .finish()
    }
}

fn expect_action(row: &SteeringRow, action: HookAction) -> Result<()> {
    if row.hook_action != action {
        return Err(Error::Spec(format!(
            "expected a {action} row, got {}",
            row.hook_action
        )));
    }
    Ok(())
}

fn check_latent(idx: usize, d_sae: usize) -> Result<()> {
    if idx >= d_sae {
        return Err(Error::Range {
            what: "latent index",
            index: idx,
            limit: d_sae,
        });
    }
    Ok(())
}

/// `x_p + coefficient · W_dec[:, latent_idx]` at every position.
pub fn apply_add(
    acts: &ActivationBatch,
    sae: &SparseAutoencoder,
    row: &SteeringRow,
) -> Result<ActivationBatch> {
    expect_action(row, HookAction::Add)?;
    let column = sae.decoder_column(row.latent_idx)?;
    if acts.width() != column.len() {
        return Err(Error::shape("activations", &[acts.n_positions(), column.len()], acts.values.shape()));
    }
    let delta = &column * row.steering_coefficient as f32;
    let mut out = acts.clone();
    for mut r in out.values.rows_mut() {
        r += &delta;
    }
    Ok(out)
}

fn clamp_above(latents: &LatentBatch, idx: usize, threshold: f32, value: f32) -> Result<LatentBatch> {
    check_latent(idx, latents.d_sae())?;
    let mut out = latents.clone();
    for v in out.values.column_mut(idx) {
        if *v > threshold {
            *v = value;
        }
    }
    Ok(out)
}

/// Writes the coefficient wherever the latent is strictly positive.
pub fn apply_clamp(latents: &LatentBatch, row: &SteeringRow) -> Result<LatentBatch> {
    expect_action(row, HookAction::Clamp)?;
    clamp_above(latents, row.latent_idx, 0.0, row.steering_coefficient as f32)
}

/// Writes the coefficient wherever the latent exceeds `clamp_value`.
pub fn apply_clamp_cond(latents: &LatentBatch, row: &SteeringRow) -> Result<LatentBatch> {
    expect_action(row, HookAction::ClampCond)?;
    let threshold = row
        .clamp_value
        .ok_or_else(|| Error::Spec(format!("clamp_cond row for latent {} lacks clamp_value", row.latent_idx)))?;
    clamp_above(latents, row.latent_idx, threshold as f32, row.steering_coefficient as f32)
}

/// Writes the coefficient into the shared refusal latent wherever any
/// monitored latent exceeds `clamp_value`. Monitored values are not edited.
pub fn apply_clamp_refusal(
    latents: &LatentBatch,
    rows: &[SteeringRow],
    trigger: RefusalTrigger,
) -> Result<LatentBatch> {
    let Some(first) = rows.first() else {
        return Ok(latents.clone());
    };
    for row in rows {
        expect_action(row, HookAction::ClampRefusal)?;
        row.validate()?;
        if row.refusal_id != first.refusal_id
            || row.clamp_value != first.clamp_value
            || row.steering_coefficient != first.steering_coefficient
        {
            return Err(Error::Spec(
                "clamp_refusal rows disagree on refusal_id, clamp_value or steering_coefficient".into(),
            ));
        }
        check_latent(row.latent_idx, latents.d_sae())?;
    }
    let refusal = first.refusal_id.expect("validated");
    check_latent(refusal, latents.d_sae())?;
    let threshold = first.clamp_value.expect("validated") as f32;
    let value = first.steering_coefficient as f32;

    let fired: Vec<bool> = latents
        .values
        .rows()
        .into_iter()
        .map(|r| rows.iter().any(|row| r[row.latent_idx] > threshold))
        .collect();
    let mut out = latents.clone();
    let any = fired.iter().any(|&f| f);
    for (p, &hit) in fired.iter().enumerate() {
        let write = match trigger {
            RefusalTrigger::PerPosition => hit,
            RefusalTrigger::SequenceGlobal => any,
        };
        if write {
            out.values[[p, refusal]] = value;
        }
    }
    Ok(out)
}

/// One-line shape and summary statistics of a latent batch.
pub fn describe_latents(latents: &LatentBatch) -> String {
    let (n, d) = latents.values.dim();
    let total = latents.values.len().max(1) as f64;
    let (min, max) = latents
        .values
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let mean = latents.values.iter().map(|&v| v as f64).sum::<f64>() / total;
    let nonzero = latents.values.iter().filter(|&&v| v != 0.0).count();
    if latents.values.is_empty() {
        format!("latents shape [{n}, {d}]: empty")
    } else {
        format!("latents shape [{n}, {d}]: min {min:.6} max {max:.6} mean {mean:.6} nonzero {nonzero}")
    }
}

/// `print` and `debug` rows. Never fails: a broken inspector is logged and
/// the batch passes through unchanged.
pub fn run_side_action(action: HookAction, latents: &LatentBatch, options: &SteeringOptions) -> LatentBatch {
    match action {
        HookAction::Print => {
            let line = describe_latents(latents);
            match &options.diagnostics {
                Some(sink) => sink(&line),
                None => log::info!("{line}"),
            }
            latents.clone()
        }
        HookAction::Debug => match &options.inspector {
            None => latents.clone(),
            Some(inspect) => match inspect(latents) {
                Ok(edited) if edited.values.dim() == latents.values.dim() => edited,
                Ok(edited) => {
                    log::warn!(
                        "debug inspector returned shape {:?}, expected {:?}; ignoring",
                        edited.values.dim(),
                        latents.values.dim()
                    );
                    latents.clone()
                }
                Err(e) => {
                    log::warn!("debug inspector failed: {e}");
                    latents.clone()
                }
            },
        },
        other => {
            log::warn!("run_side_action called with non-side action {other}");
            latents.clone()
        }
    }
}

/// Applies `spec` to residual activations at the SAE's layer.
pub fn steer_activations(
    acts: &ActivationBatch,
    sae: &SparseAutoencoder,
    spec: &SteeringSpec,
    options: &SteeringOptions,
) -> Result<ActivationBatch> {
    if spec.rows.is_empty() {
        return Ok(acts.clone());
    }
    let original = sae.encode(acts)?;
    let mut current = original.clone();
    let mut add_delta: Option<ActivationBatch> = None;
    for row in &spec.rows {
        match row.hook_action {
            HookAction::Add => {
                let base = add_delta.take().unwrap_or_else(|| ActivationBatch {
                    values: Array2::zeros(acts.values.raw_dim()),
                    layer: acts.layer,
                    token_ids: acts.token_ids.clone(),
                });
                add_delta = Some(apply_add(&base, sae, row)?);
            }
            HookAction::Clamp => current = apply_clamp(&current, row)?,
            HookAction::ClampCond => current = apply_clamp_cond(&current, row)?,
            HookAction::ClampRefusal => {
                current = apply_clamp_refusal(&current, std::slice::from_ref(row), options.refusal_trigger)?
            }
            HookAction::Print | HookAction::Debug => {
                current = run_side_action(row.hook_action, &current, options)
            }
        }
    }

    let mut out = acts.clone();
    let changed: Vec<usize> = (0..original.n_positions())
        .filter(|&p| original.values.row(p) != current.values.row(p))
        .collect();
    if !changed.is_empty() {
        let before = LatentBatch::new(original.values.select(Axis(0), &changed));
        let after = LatentBatch::new(current.values.select(Axis(0), &changed));
        let delta = sae.decode(&after)? - sae.decode(&before)?;
        for (k, &p) in changed.iter().enumerate() {
            let mut row = out.values.row_mut(p);
            row += &delta.row(k);
        }
    }
    if let Some(add) = add_delta {
        out.values += &add.values;
    }
    Ok(out)
}

/// A model whose forward pass is steered by `spec` at the SAE's layer.
pub struct SteeredModel<'a, M: LanguageModel + ?Sized> {
    model: &'a M,
    sae: &'a SparseAutoencoder,
    spec: &'a SteeringSpec,
    options: SteeringOptions,
}

impl<'a, M: LanguageModel + ?Sized> SteeredModel<'a, M> {
    pub fn new(model: &'a M, sae: &'a SparseAutoencoder, spec: &'a SteeringSpec) -> Result<Self> {
        Self::with_options(model, sae, spec, SteeringOptions::default())
    }

    pub fn with_options(
        model: &'a M,
        sae: &'a SparseAutoencoder,
        spec: &'a SteeringSpec,
        options: SteeringOptions,
    ) -> Result<Self> {
        crate::model::check_layer(sae.layer, model.n_layers())?;
        if sae.d_model() != model.d_model() {
            return Err(Error::shape("SAE d_model", &[model.d_model()], &[sae.d_model()]));
        }
        spec.validate(Some(sae))?;
        if let Some(row) = spec
            .rows
            .iter()
            .find(|r| r.sae_release != sae.release || r.sae_id != sae.sae_id)
        {
            log::warn!(
                "steering rows reference ({}, {}) but the loaded SAE is ({}, {})",
                row.sae_release,
                row.sae_id,
                sae.release,
                sae.sae_id
            );
        }
        Ok(Self {
            model,
            sae,
            spec,
            options,
        })
    }

    pub fn inner(&self) -> &M {
        self.model
    }
}

impl<M: LanguageModel + ?Sized> LanguageModel for SteeredModel<'_, M> {
    fn n_layers(&self) -> usize {
        self.model.n_layers()
    }

    fn d_model(&self) -> usize {
        self.model.d_model()
    }

    fn vocab_size(&self) -> usize {
        self.model.vocab_size()
    }

    fn forward_hooked(&self, tokens: &[TokenId], hooks: &[HookPoint<'_>]) -> Result<Array2<f32>> {
        if self.spec.is_empty() {
            return self.model.forward_hooked(tokens, hooks);
        }
        let failure: Mutex<Option<Error>> = Mutex::new(None);
        let mut all = Vec::with_capacity(hooks.len() + 1);
        all.push(HookPoint::new(self.sae.layer, |batch: &mut ActivationBatch| {
            match steer_activations(batch, self.sae, self.spec, &self.options) {
                Ok(out) => *batch = out,
                Err(e) => {
                    failure.lock().unwrap().get_or_insert(e);
                }
            }
        }));
        for h in hooks {
            all.push(HookPoint::new(h.layer, |batch: &mut ActivationBatch| (h.transform)(batch)));
        }
        let logits = self.model.forward_hooked(tokens, &all)?;
        drop(all);
        match failure.into_inner().unwrap() {
            Some(e) => Err(e),
            None => Ok(logits),
        }
    }
}

/// Steered logits for one token sequence.
pub fn steer_forward<M: LanguageModel + ?Sized>(
    model: &M,
    sae: &SparseAutoencoder,
    spec: &SteeringSpec,
    tokens: &[TokenId],
) -> Result<Array2<f32>> {
    SteeredModel::new(model, sae, spec)?.forward(tokens)
}
