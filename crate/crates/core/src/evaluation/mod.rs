//! Multiple-choice accuracy, retention and alignment metrics.

mod stats;
mod sweep;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{answer_loglikelihood, LanguageModel, TokenId, WordTokenizer};

pub use stats::{kruskal_wallis, KruskalWallis};
pub use sweep::{
    alignment_isolines, pareto_frontier, run_sweep, write_isolines_csv, write_points_csv, FailedCell, Grid,
    IsolinePoint, SweepOutcome, SweepPoint, DEFAULT_ISOLINE_LEVELS,
};

pub const CHANCE: f64 = 0.25;
pub const DEFAULT_EPSILON: f64 = 1e-9;
/// Question counts of the four retain subsets, in suite order.
pub const RETAIN_SUBSET_COUNTS: [usize; 4] = [204, 198, 223, 100];

/// `min(1, max(ε, acc_modified − chance) / max(ε, acc_original − chance))`.
pub fn retention(acc_modified: f64, acc_original: f64, epsilon: f64, chance: f64) -> f64 {
    let num = (acc_modified - chance).max(epsilon);
    let den = (acc_original - chance).max(epsilon);
    (num / den).min(1.0)
}

/// `r_good · (1 − r_bad)`.
pub fn alignment(r_good: f64, r_bad: f64) -> f64 {
    r_good * (1.0 - r_bad)
}

/// `Σ acc_i·n_i / Σ n_i`.
pub fn weighted_accuracy(per_subject: &[(f64, usize)]) -> Result<f64> {
    if per_subject.is_empty() {
        return Err(Error::Argument("no subjects to aggregate".into()));
    }
    if per_subject.iter().any(|&(_, n)| n == 0) {
        return Err(Error::Argument("subject question counts must be positive".into()));
    }
    let first = per_subject[0].0;
    if per_subject.iter().all(|&(a, _)| a == first) {
        return Ok(first);
    }
    let total: usize = per_subject.iter().map(|&(_, n)| n).sum();
    let sum: f64 = per_subject.iter().map(|&(a, n)| a * n as f64).sum();
    Ok(sum / total as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MCQuestion {
    #[serde(default)]
    pub id: Option<String>,
    pub stem: String,
    pub choices: Vec<String>,
    pub answer_index: usize,
    #[serde(default)]
    pub subject: String,
}

impl MCQuestion {
    pub fn validate(&self) -> Result<()> {
        if self.choices.len() != 4 {
            return Err(Error::Data {
                line: None,
                message: format!("question {:?} has {} choices, expected 4", self.stem, self.choices.len()),
            });
        }
        if self.answer_index > 3 {
            return Err(Error::Data {
                line: None,
                message: format!("question {:?} has answer_index {}", self.stem, self.answer_index),
            });
        }
        Ok(())
    }
}

/// Reads a JSON-lines question file; blank lines are skipped.
pub fn load_questions(path: impl AsRef<Path>) -> Result<Vec<MCQuestion>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_questions(&text)
}

pub fn parse_questions(text: &str) -> Result<Vec<MCQuestion>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let q: MCQuestion = serde_json::from_str(line).map_err(|e| Error::Data {
            line: Some(i + 1),
            message: e.to_string(),
        })?;
        q.validate().map_err(|e| match e {
            Error::Data { message, .. } => Error::Data {
                line: Some(i + 1),
                message,
            },
            other => other,
        })?;
        out.push(q);
    }
    Ok(out)
}

pub fn write_questions(path: impl AsRef<Path>, questions: &[MCQuestion]) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::new();
    for q in questions {
        text.push_str(&serde_json::to_string(q)?);
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Turns text into model tokens.
pub trait TextEncoder: Sync {
    fn encode_text(&self, text: &str) -> Vec<TokenId>;
}

impl TextEncoder for WordTokenizer {
    fn encode_text(&self, text: &str) -> Vec<TokenId> {
        self.encode(text)
    }
}

/// Prompt and continuation templates; `{stem}` and `{choice}` are
/// substituted. Choices are scored by raw summed log-likelihood.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub prompt: String,
    pub continuation: String,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self {
            prompt: "{stem} Answer:".into(),
            continuation: "{choice}".into(),
        }
    }
}

impl PromptTemplate {
    pub fn prompt(&self, q: &MCQuestion) -> String {
        self.prompt.replace("{stem}", &q.stem)
    }

    pub fn continuation(&self, choice: &str) -> String {
        self.continuation.replace("{choice}", choice)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionRecord {
    pub index: usize,
    pub subject: String,
    pub scores: [f64; 4],
    pub predicted: usize,
    pub correct: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McResult {
    pub accuracy: f64,
    pub records: Vec<QuestionRecord>,
}

impl McResult {
    /// Accuracy and question count per subject.
    pub fn per_subject(&self) -> BTreeMap<String, (f64, usize)> {
        let mut tally: BTreeMap<String, (usize, usize)> = BTreeMap::new();
        for r in &self.records {
            let e = tally.entry(r.subject.clone()).or_default();
            e.0 += r.correct as usize;
            e.1 += 1;
        }
        tally
            .into_iter()
            .map(|(s, (c, n))| (s, (c as f64 / n as f64, n)))
            .collect()
    }
}

/// Index of the largest score; ties go to the lowest index.
pub fn argmax_choice(scores: &[f64; 4]) -> usize {
    let mut best = 0;
    for i in 1..4 {
        if scores[i] > scores[best] {
            best = i;
        }
    }
    best
}

/// Scores every choice of every question and reports accuracy.
pub fn mc_accuracy<M: LanguageModel + ?Sized, E: TextEncoder + ?Sized>(
    model: &M,
    encoder: &E,
    questions: &[MCQuestion],
    template: &PromptTemplate,
) -> Result<McResult> {
    if questions.is_empty() {
        return Err(Error::Argument("no questions to evaluate".into()));
    }
    for q in questions {
        q.validate()?;
    }
    let records = questions
        .par_iter()
        .enumerate()
        .map(|(index, q)| -> Result<QuestionRecord> {
            let prompt = encoder.encode_text(&template.prompt(q));
            let mut scores = [0.0; 4];
            for (s, choice) in scores.iter_mut().zip(&q.choices) {
                let cont = encoder.encode_text(&template.continuation(choice));
                *s = answer_loglikelihood(model, &prompt, &cont)?;
            }
            let predicted = argmax_choice(&scores);
            Ok(QuestionRecord {
                index,
                subject: q.subject.clone(),
                scores,
                predicted,
                correct: predicted == q.answer_index,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let correct = records.iter().filter(|r| r.correct).count();
    Ok(McResult {
        accuracy: correct as f64 / records.len() as f64,
        records,
    })
}

/// Accuracies of the unmodified model, the reference for retention.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Baseline {
    pub acc_forget: f64,
    pub acc_retain: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_id: String,
    pub acc_forget: f64,
    pub acc_retain: f64,
    pub retention_forget: f64,
    pub retention_retain: f64,
    pub alignment: f64,
    pub per_subject: BTreeMap<String, (f64, usize)>,
}

impl EvalReport {
    /// Metrics from aggregate accuracies. Retention is computed on the
    /// aggregates, not averaged over subjects.
    pub fn from_accuracies(
        config_id: impl Into<String>,
        acc_forget: f64,
        acc_retain: f64,
        baseline: Baseline,
        epsilon: f64,
    ) -> Self {
        let retention_forget = retention(acc_forget, baseline.acc_forget, epsilon, CHANCE);
        let retention_retain = retention(acc_retain, baseline.acc_retain, epsilon, CHANCE);
        Self {
            config_id: config_id.into(),
            acc_forget,
            acc_retain,
            retention_forget,
            retention_retain,
            alignment: alignment(retention_retain, retention_forget),
            per_subject: BTreeMap::new(),
        }
    }

    pub fn from_results(
        config_id: impl Into<String>,
        forget: &McResult,
        retain: &McResult,
        baseline: Baseline,
        epsilon: f64,
    ) -> Result<Self> {
        let retain_subjects = retain.per_subject();
        let acc_retain = weighted_accuracy(&retain_subjects.values().copied().collect::<Vec<_>>())?;
        let mut report = Self::from_accuracies(config_id, forget.accuracy, acc_retain, baseline, epsilon);
        report.per_subject = forget.per_subject();
        report.per_subject.extend(retain_subjects);
        Ok(report)
    }
}

/// Forget and retain question sets with their scoring setup.
#[derive(Debug, Clone, Copy)]
pub struct EvalSuite<'a, E: TextEncoder + ?Sized> {
    pub encoder: &'a E,
    pub forget: &'a [MCQuestion],
    pub retain: &'a [MCQuestion],
    pub template: &'a PromptTemplate,
    pub epsilon: f64,
}

impl<E: TextEncoder + ?Sized> EvalSuite<'_, E> {
    pub fn baseline<M: LanguageModel + ?Sized>(&self, model: &M) -> Result<Baseline> {
        Ok(Baseline {
            acc_forget: mc_accuracy(model, self.encoder, self.forget, self.template)?.accuracy,
            acc_retain: mc_accuracy(model, self.encoder, self.retain, self.template)?.accuracy,
        })
    }

    pub fn evaluate<M: LanguageModel + ?Sized>(
        &self,
        model: &M,
        baseline: Baseline,
        config_id: &str,
    ) -> Result<EvalReport> {
        let forget = mc_accuracy(model, self.encoder, self.forget, self.template)?;
        let retain = mc_accuracy(model, self.encoder, self.retain, self.template)?;
        EvalReport::from_results(config_id, &forget, &retain, baseline, self.epsilon)
    }
}
