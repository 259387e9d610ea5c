use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use sae_unlearn::adversarial::{attack_report, concurrent_greedy_search, AttackResult, AttackTarget};
use sae_unlearn::evaluation::{
    alignment_isolines, kruskal_wallis, load_questions, pareto_frontier, run_sweep, write_isolines_csv,
    write_points_csv, Baseline, EvalReport, EvalSuite, Grid, KruskalWallis, MCQuestion, PromptTemplate, SweepOutcome,
    SweepPoint, DEFAULT_EPSILON, DEFAULT_ISOLINE_LEVELS,
};
use sae_unlearn::feature_selection::{
    activation_frequencies, select_features, zero_activation_stats, DescriptionCache, DescriptionClient,
    FeatureFrequencyTable, FixtureSource, HttpSource, SelectionConfig, neuronpedia_ids,
};
use sae_unlearn::fixtures::{unlearning_fixture, write_fixture_files};
use sae_unlearn::model::{greedy_decode, load_model, save_model, LanguageModel, TokenId, ToyModel, WordTokenizer};
use sae_unlearn::rmu::{rmu_probe, rmu_train, write_trace_csv};
use sae_unlearn::sae::{load_sae, SparseAutoencoder};
use sae_unlearn::steering::{HookAction, SteeredModel, SteeringOptions, SteeringRow, SteeringSpec};
use sae_unlearn::steering_csv::{parse_steering_csv, write_steering_csv, SteeringDocument};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::RunConfig;
use crate::error::CliError;

pub type CliResult<T> = Result<T, CliError>;

pub const FORGET_TABLE: &str = "forget_frequencies.json";
pub const RETAIN_TABLE: &str = "retain_frequencies.json";
pub const STEERING_CSV: &str = "steering.csv";
pub const SWEEP_JSON: &str = "sweep.json";

/// Resolved settings shared by every command.
pub struct Context {
    pub config: RunConfig,
    pub output_dir: PathBuf,
    pub offline: bool,
}

#[derive(Serialize)]
struct Manifest<'a> {
    toolkit: &'static str,
    version: &'static str,
    command: &'a str,
    config: &'a RunConfig,
    outputs: Vec<String>,
    summary: Value,
}

impl Context {
    fn out(&self, name: &str) -> CliResult<PathBuf> {
        fs::create_dir_all(&self.output_dir)
            .map_err(|e| CliError::Input(format!("cannot create {}: {e}", self.output_dir.display())))?;
        Ok(self.output_dir.join(name))
    }

    /// Writes `<command>_run.json` with the toolkit version and resolved config.
    fn manifest(&self, command: &str, outputs: &[&Path], summary: Value) -> CliResult<()> {
        let m = Manifest {
            toolkit: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            command,
            config: &self.config,
            outputs: outputs.iter().map(|p| p.display().to_string()).collect(),
            summary,
        };
        let path = self.out(&format!("{}_run.json", command.replace('-', "_")))?;
        write_text(&path, &to_json(&m)?)
    }

    fn model(&self) -> CliResult<ToyModel> {
        let m = &self.config.model;
        match (&m.path, &m.toy) {
            (Some(path), None) => Ok(load_model(path)?),
            (None, Some(toy)) => Ok(ToyModel::new(toy.clone())?),
            (Some(_), Some(_)) => Err(CliError::Input("[model] sets both `path` and `toy`; give exactly one".into())),
            (None, None) => Err(CliError::Input("[model] needs `path` or `toy`".into())),
        }
    }

    fn tokenizer(&self) -> CliResult<WordTokenizer> {
        let path = required(&self.config.model.vocab, "[model] vocab")?;
        Ok(WordTokenizer::load(path)?)
    }

    fn sae(&self) -> CliResult<SparseAutoencoder> {
        Ok(load_sae(required(&self.config.sae.path, "[sae] path")?)?)
    }

    fn corpora(&self, tok: &WordTokenizer) -> CliResult<(Vec<Vec<TokenId>>, Vec<Vec<TokenId>>)> {
        let c = &self.config.corpus;
        Ok((
            read_corpus(required(&c.forget, "[corpus] forget")?, tok)?,
            read_corpus(required(&c.retain, "[corpus] retain")?, tok)?,
        ))
    }

    fn questions(&self) -> CliResult<(Vec<MCQuestion>, Vec<MCQuestion>)> {
        let q = &self.config.questions;
        let forget = load_questions(required(&q.forget, "[questions] forget")?)?;
        if q.retain.is_empty() {
            return Err(CliError::Input("[questions] retain lists no files".into()));
        }
        let mut retain = Vec::new();
        for path in &q.retain {
            retain.extend(load_questions(path)?);
        }
        if forget.is_empty() || retain.is_empty() {
            return Err(CliError::Input("question files hold no questions".into()));
        }
        Ok((forget, retain))
    }

    fn options(&self) -> SteeringOptions {
        SteeringOptions {
            refusal_trigger: self.config.steering.refusal_trigger,
            ..Default::default()
        }
    }
}

fn required<'a>(p: &'a Option<PathBuf>, what: &str) -> CliResult<&'a PathBuf> {
    p.as_ref().ok_or_else(|| CliError::Input(format!("missing {what} in config or flags")))
}

fn to_json<T: Serialize>(v: &T) -> CliResult<String> {
    serde_json::to_string_pretty(v).map_err(|e| CliError::Internal(e.to_string()))
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| CliError::Input(format!("cannot write {}: {e}", path.display())))
}

/// One document per non-empty line.
pub fn read_corpus(path: &Path, tok: &WordTokenizer) -> CliResult<Vec<Vec<TokenId>>> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Input(format!("cannot read corpus {}: {e}", path.display())))?;
    Ok(text.lines().filter(|l| !l.trim().is_empty()).map(|l| tok.encode(l)).collect())
}

fn read_steering(path: &Path) -> CliResult<SteeringDocument> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Input(format!("cannot read steering file {}: {e}", path.display())))?;
    parse_steering_csv(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

/// Rows of one clamp-family action over `latents`.
pub fn build_rows(
    latents: &[usize],
    action: HookAction,
    coefficient: f64,
    clamp_value: Option<f64>,
    refusal_id: Option<usize>,
    sae: &SparseAutoencoder,
) -> CliResult<Vec<SteeringRow>> {
    let mut rows = Vec::with_capacity(latents.len());
    for &idx in latents {
        let mut row = SteeringRow::new(idx, action, coefficient, sae.release.clone(), sae.sae_id.clone());
        match action {
            HookAction::Clamp => {}
            HookAction::ClampCond => {
                row = row.with_clamp_value(clamp_value.ok_or_else(|| usage("clamp_cond needs --clamp-value"))?)
            }
            HookAction::ClampRefusal => {
                let id = refusal_id.ok_or_else(|| usage("clamp_refusal needs --refusal-id"))?;
                let t = clamp_value.ok_or_else(|| usage("clamp_refusal needs --clamp-value"))?;
                row = row.with_clamp_value(t).with_refusal_id(id);
            }
            other => return Err(usage(&format!("select supports clamp, clamp_cond and clamp_refusal, not {other}"))),
        }
        row.validate()?;
        rows.push(row);
    }
    Ok(rows)
}

fn usage(msg: &str) -> CliError {
    CliError::Input(format!("usage error: {msg}"))
}

pub fn cmd_frequencies(ctx: &Context) -> CliResult<()> {
    let model = ctx.model()?;
    let tok = ctx.tokenizer()?;
    let sae = ctx.sae()?;
    let (forget, retain) = ctx.corpora(&tok)?;
    let sel = &ctx.config.selection;
    let tf = activation_frequencies(&model, &sae, &forget, sel.activity_threshold, "forget", sel.mode)?;
    let tr = activation_frequencies(&model, &sae, &retain, sel.activity_threshold, "retain", sel.mode)?;
    let (pf, pr) = (ctx.out(FORGET_TABLE)?, ctx.out(RETAIN_TABLE)?);
    tf.save(&pf)?;
    tr.save(&pr)?;
    let all: Vec<Vec<TokenId>> = forget.iter().chain(&retain).cloned().collect();
    let zero = zero_activation_stats(&model, &sae, &all)?;
    println!(
        "forget: {} tokens, {} active latents; retain: {} tokens, {} active latents",
        tf.token_count,
        tf.freq.len(),
        tr.token_count,
        tr.freq.len()
    );
    println!(
        "{:.4} of latents were zero at least once; {} never fired",
        zero.fraction_zero_at_least_once, zero.never_active
    );
    ctx.manifest(
        "frequencies",
        &[&pf, &pr],
        json!({
            "token_count": zero.token_count,
            "fraction_zero_at_least_once": zero.fraction_zero_at_least_once,
            "zero_at_least_once": zero.zero_at_least_once,
            "never_active": zero.never_active,
        }),
    )
}

pub struct SelectArgs {
    pub forget_table: Option<PathBuf>,
    pub retain_table: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

pub fn cmd_select(ctx: &Context, args: &SelectArgs) -> CliResult<()> {
    let sae = ctx.sae()?;
    let forget_path = args.forget_table.clone().unwrap_or(ctx.output_dir.join(FORGET_TABLE));
    let retain_path = args.retain_table.clone().unwrap_or(ctx.output_dir.join(RETAIN_TABLE));
    let forget = FeatureFrequencyTable::load(&forget_path)?;
    let retain = FeatureFrequencyTable::load(&retain_path)?;
    let sel = &ctx.config.selection;
    let st = &ctx.config.steering;
    let cfg = SelectionConfig {
        retain_threshold: sel.retain_threshold,
        top_k: sel.top_k,
        activity_threshold: sel.activity_threshold,
    };
    let latents = select_features(&forget, &retain, &cfg)?;
    // Validate the action before the empty check so usage errors win.
    build_rows(&[0], st.action, st.coefficient, st.clamp_value, st.refusal_id, &sae)?;
    if latents.is_empty() {
        return Err(CliError::Empty(format!(
            "no latent fires on the forget corpus while staying under retain frequency {}",
            cfg.retain_threshold
        )));
    }
    let mut rows = build_rows(&latents, st.action, st.coefficient, st.clamp_value, st.refusal_id, &sae)?;
    let described = describe(ctx, &sae, &mut rows)?;

    let path = match &args.output {
        Some(p) => p.clone(),
        None => st.path.clone().unwrap_or(ctx.out(STEERING_CSV)?),
    };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| CliError::Input(format!("cannot create {}: {e}", parent.display())))?;
    }
    write_text(&path, &write_steering_csv(&SteeringDocument::from_rows(rows))?)?;
    println!("selected {} latents: {latents:?} ({described} described)", latents.len());
    println!("wrote {}", path.display());
    ctx.manifest("select", &[&path], json!({ "latents": latents, "described": described }))
}

/// Fills descriptions from the fixture directory, the cache or the remote
/// source. Unavailable labels are left empty.
fn describe(ctx: &Context, sae: &SparseAutoencoder, rows: &mut [SteeringRow]) -> CliResult<usize> {
    let st = &ctx.config.steering;
    let cache = match &st.description_cache {
        Some(p) => DescriptionCache::open(p)?,
        None if st.descriptions.is_none() && !ctx.offline => DescriptionCache::open(ctx.out("descriptions_cache.json")?)?,
        None => DescriptionCache::in_memory(),
    };
    let client = match (&st.descriptions, ctx.offline) {
        (Some(dir), _) => DescriptionClient::new(Box::new(FixtureSource::new(dir)), cache),
        (None, false) => DescriptionClient::new(Box::new(HttpSource::neuronpedia()), cache),
        (None, true) => DescriptionClient::offline(cache),
    };
    let mut described = 0;
    for row in rows.iter_mut() {
        match client.fetch_latent_descriptions(&sae.release, &sae.sae_id, &[row.latent_idx]) {
            Ok(d) => {
                row.description = Some(d[0].description.clone());
                if neuronpedia_ids(&sae.release, &sae.sae_id).is_some() {
                    row.url = Some(HttpSource::neuronpedia().url(&sae.release, &sae.sae_id, row.latent_idx));
                }
                described += 1;
            }
            Err(e) => log::warn!("no description for latent {}: {e}", row.latent_idx),
        }
    }
    Ok(described)
}

pub fn cmd_steer_generate(ctx: &Context, steering: Option<PathBuf>, prompt: &str, n_tokens: usize) -> CliResult<()> {
    let model = ctx.model()?;
    let tok = ctx.tokenizer()?;
    let sae = ctx.sae()?;
    let path = steering
        .or(ctx.config.steering.path.clone())
        .ok_or_else(|| CliError::Input("steer-generate needs a steering CSV".into()))?;
    let doc = read_steering(&path)?;
    let spec = doc.spec();
    let steered = SteeredModel::with_options(&model, &sae, &spec, ctx.options())?;
    let tokens = tok.encode(prompt);
    if tokens.is_empty() {
        return Err(CliError::Input("prompt is empty".into()));
    }
    let plain = tok.decode(&greedy_decode(&model, &tokens, n_tokens)?);
    let steered_text = tok.decode(&greedy_decode(&steered, &tokens, n_tokens)?);
    println!("prompt:   {prompt}");
    println!("baseline: {plain}");
    println!("steered:  {steered_text}");
    let out = ctx.out("generation.json")?;
    let record = json!({ "prompt": prompt, "baseline": plain, "steered": steered_text, "steering": path });
    write_text(&out, &to_json(&record)?)?;
    ctx.manifest("steer-generate", &[&out], record)
}

/// Externally measured accuracies for metric-only evaluation.
pub struct MetricInputs {
    pub acc_forget: f64,
    pub acc_retain: f64,
    pub orig_forget: f64,
    pub orig_retain: f64,
}

pub fn print_reports(reports: &[EvalReport]) {
    println!(
        "{:<24} {:>9} {:>9} {:>11} {:>11} {:>9}",
        "config", "acc_fgt", "acc_ret", "R_forget", "R_retain", "align"
    );
    for r in reports {
        println!(
            "{:<24} {:>9.4} {:>9.4} {:>11.4} {:>11.4} {:>9.4}",
            r.config_id, r.acc_forget, r.acc_retain, r.retention_forget, r.retention_retain, r.alignment
        );
    }
}

pub fn cmd_eval(ctx: &Context, steering: Option<PathBuf>, metrics: Option<MetricInputs>) -> CliResult<()> {
    let report = match metrics {
        Some(m) => {
            for (name, v) in [
                ("acc-forget", m.acc_forget),
                ("acc-retain", m.acc_retain),
                ("orig-forget", m.orig_forget),
                ("orig-retain", m.orig_retain),
            ] {
                if !(0.0..=1.0).contains(&v) {
                    return Err(CliError::Input(format!("--{name} must lie in [0, 1], got {v}")));
                }
            }
            let base = Baseline {
                acc_forget: m.orig_forget,
                acc_retain: m.orig_retain,
            };
            EvalReport::from_accuracies("metric-only", m.acc_forget, m.acc_retain, base, DEFAULT_EPSILON)
        }
        None => {
            let model = ctx.model()?;
            let tok = ctx.tokenizer()?;
            let (forget, retain) = ctx.questions()?;
            let template = PromptTemplate::default();
            let suite = EvalSuite {
                encoder: &tok,
                forget: &forget,
                retain: &retain,
                template: &template,
                epsilon: DEFAULT_EPSILON,
            };
            let baseline = suite.baseline(&model)?;
            match steering.or(ctx.config.steering.path.clone()) {
                None => suite.evaluate(&model, baseline, "unmodified")?,
                Some(path) => {
                    let doc = read_steering(&path)?;
                    let spec = doc.spec();
                    let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                    if spec.is_empty() {
                        suite.evaluate(&model, baseline, &id)?
                    } else {
                        let sae = ctx.sae()?;
                        let steered = SteeredModel::with_options(&model, &sae, &spec, ctx.options())?;
                        suite.evaluate(&steered, baseline, &id)?
                    }
                }
            }
        }
    };
    print_reports(std::slice::from_ref(&report));
    let out = ctx.out("eval_report.json")?;
    write_text(&out, &to_json(&report)?)?;
    ctx.manifest("eval", &[&out], serde_json::to_value(&report).map_err(|e| CliError::Internal(e.to_string()))?)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepFile {
    pub baseline: Baseline,
    pub action: HookAction,
    #[serde(flatten)]
    pub outcome: SweepOutcome,
}

pub fn cmd_sweep(ctx: &Context) -> CliResult<()> {
    let model = ctx.model()?;
    let tok = ctx.tokenizer()?;
    let sae = ctx.sae()?;
    let (forget_docs, retain_docs) = ctx.corpora(&tok)?;
    let (forget_q, retain_q) = ctx.questions()?;
    let sel = &ctx.config.selection;
    let st = &ctx.config.steering;
    let sw = &ctx.config.sweep;
    let tf = activation_frequencies(&model, &sae, &forget_docs, sel.activity_threshold, "forget", sel.mode)?;
    let tr = activation_frequencies(&model, &sae, &retain_docs, sel.activity_threshold, "retain", sel.mode)?;

    let or = |axis: &Vec<f64>, fallback: Option<f64>| -> Vec<f64> {
        if axis.is_empty() {
            fallback.into_iter().collect()
        } else {
            axis.clone()
        }
    };
    let mut grid = Grid::new()
        .axis("top_k", or(&sw.top_k, Some(sel.top_k as f64)))
        .axis("coefficient", or(&sw.coefficient, Some(st.coefficient)));
    if st.action != HookAction::Clamp {
        grid = grid.axis("clamp_value", or(&sw.clamp_value, st.clamp_value));
    }
    grid.validate()?;
    build_rows(&[0], st.action, st.coefficient, st.clamp_value.or(Some(0.0)), st.refusal_id, &sae)?;

    let template = PromptTemplate::default();
    let suite = EvalSuite {
        encoder: &tok,
        forget: &forget_q,
        retain: &retain_q,
        template: &template,
        epsilon: DEFAULT_EPSILON,
    };
    let baseline = suite.baseline(&model)?;
    let options = ctx.options();
    let outcome = run_sweep(&grid, |cell| {
        let k = cell["top_k"];
        if k < 1.0 || k.fract() != 0.0 {
            return Err(sae_unlearn::Error::Argument(format!("top_k must be a positive integer, got {k}")));
        }
        let cfg = SelectionConfig {
            retain_threshold: sel.retain_threshold,
            top_k: k as usize,
            activity_threshold: sel.activity_threshold,
        };
        let latents = select_features(&tf, &tr, &cfg)?;
        if latents.is_empty() {
            return Err(sae_unlearn::Error::Argument("no candidate latents".into()));
        }
        let rows = build_rows(&latents, st.action, cell["coefficient"], cell.get("clamp_value").copied(), st.refusal_id, &sae)
            .map_err(|e| sae_unlearn::Error::Argument(e.to_string()))?;
        let spec = SteeringSpec::new(rows);
        let steered = SteeredModel::with_options(&model, &sae, &spec, options.clone())?;
        let id = cell.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(",");
        suite.evaluate(&steered, baseline, &id)
    })?;
    if outcome.points.is_empty() {
        return Err(CliError::Internal(format!(
            "every sweep cell failed; first error: {}",
            outcome.failed.first().map(|f| f.error.as_str()).unwrap_or("none")
        )));
    }

    let (json_path, csv_path, iso_path) = (ctx.out(SWEEP_JSON)?, ctx.out("sweep_points.csv")?, ctx.out("isolines.csv")?);
    write_points_csv(&csv_path, &outcome.points)?;
    write_isolines_csv(&iso_path, &alignment_isolines(baseline, &DEFAULT_ISOLINE_LEVELS, 21))?;
    let file = SweepFile {
        baseline,
        action: st.action,
        outcome,
    };
    write_text(&json_path, &to_json(&file)?)?;
    let best = file
        .outcome
        .points
        .iter()
        .max_by(|a, b| a.report.alignment.total_cmp(&b.report.alignment))
        .expect("non-empty");
    println!(
        "{} cells evaluated, {} failed; best alignment {:.4} at {}",
        file.outcome.points.len(),
        file.outcome.failed.len(),
        best.report.alignment,
        best.report.config_id
    );
    ctx.manifest(
        "sweep",
        &[&json_path, &csv_path, &iso_path],
        json!({ "cells": file.outcome.points.len(), "failed": file.outcome.failed.len(), "best": best }),
    )
}

fn read_sweep(path: &Path) -> CliResult<SweepFile> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Input(format!("cannot read sweep file {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

fn label_for(path: &Path, taken: &BTreeMap<String, Vec<SweepPoint>>) -> String {
    let mut label = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    if label == "sweep" {
        if let Some(dir) = path.parent().and_then(|p| p.file_name()) {
            label = dir.to_string_lossy().into_owned();
        }
    }
    let mut unique = label.clone();
    let mut n = 2;
    while taken.contains_key(&unique) {
        unique = format!("{label}-{n}");
        n += 1;
    }
    unique
}

pub fn cmd_pareto(ctx: &Context, inputs: &[PathBuf]) -> CliResult<()> {
    let inputs = if inputs.is_empty() {
        vec![ctx.output_dir.join(SWEEP_JSON)]
    } else {
        inputs.to_vec()
    };
    let mut frontiers: BTreeMap<String, Vec<SweepPoint>> = BTreeMap::new();
    for path in &inputs {
        let sweep = read_sweep(path)?;
        let label = label_for(path, &frontiers);
        let front = pareto_frontier(&sweep.outcome.points);
        println!("{label}: {} of {} points on the frontier", front.len(), sweep.outcome.points.len());
        for p in &front {
            println!(
                "  retain {:.4}  forget {:.4}  alignment {:.4}  {}",
                p.report.acc_retain, p.report.acc_forget, p.report.alignment, p.report.config_id
            );
        }
        frontiers.insert(label, front);
    }
    if frontiers.values().all(|f| f.is_empty()) {
        return Err(CliError::Empty("no sweep points to build a frontier from".into()));
    }
    let out = ctx.out("pareto.json")?;
    write_text(&out, &to_json(&frontiers)?)?;
    ctx.manifest(
        "pareto",
        &[&out],
        json!(frontiers.iter().map(|(k, v)| (k.clone(), v.len())).collect::<BTreeMap<_, _>>()),
    )
}

pub struct AttackArgs {
    pub target: Option<PathBuf>,
    pub steering: Option<PathBuf>,
    pub rmu_model: Option<PathBuf>,
}

pub fn cmd_attack(ctx: &Context, args: &AttackArgs) -> CliResult<()> {
    let model = ctx.model()?;
    let tok = ctx.tokenizer()?;
    let target_path = args
        .target
        .clone()
        .or(ctx.config.attack.target.clone())
        .ok_or_else(|| CliError::Input("attack needs a target file ([attack] target or --target)".into()))?;
    let target = AttackTarget::load(&target_path)?;
    let prompt = tok.encode(&target.question);
    let answer = tok.encode(&target.answer);
    if prompt.is_empty() || answer.is_empty() {
        return Err(CliError::Input(format!("{}: question and answer must be non-empty", target_path.display())));
    }
    let cfg = ctx.config.attack.to_config(ctx.config.seed);
    let run = |m: &dyn LanguageModel, label: &str| -> CliResult<(AttackResult, PathBuf)> {
        let r = concurrent_greedy_search(m, &target.id, &prompt, &answer, &cfg)?;
        let path = ctx.out(&format!("attack_{label}.json"))?;
        r.save(&path)?;
        println!(
            "{label:<9} loss {:.4} -> {:.4}  success {}  continuation {:?}",
            r.initial_loss,
            r.final_loss,
            r.success,
            tok.decode(&r.continuation)
        );
        Ok((r, path))
    };

    let (base, base_path) = run(&model, "baseline")?;
    let mut outputs = vec![base_path];
    let mut results = BTreeMap::from([("baseline".to_string(), base.clone())]);
    if let Some(path) = args.steering.clone().or(ctx.config.steering.path.clone()) {
        let sae = ctx.sae()?;
        let spec = read_steering(&path)?.spec();
        let steered = SteeredModel::with_options(&model, &sae, &spec, ctx.options())?;
        let (r, p) = run(&steered, "steered")?;
        outputs.push(p);
        results.insert("steered".into(), r);
    }
    if let Some(dir) = &args.rmu_model {
        let rmu = load_model(dir)?;
        let (r, p) = run(&rmu, "rmu")?;
        outputs.push(p);
        results.insert("rmu".into(), r);
    }
    let mut summary = json!({ "evaluation_budget": cfg.evaluation_budget() });
    if let (Some(s), Some(r)) = (results.get("steered"), results.get("rmu")) {
        let cmp = attack_report(&base, s, r)?;
        let path = ctx.out("attack_comparison.json")?;
        write_text(&path, &to_json(&cmp)?)?;
        outputs.push(path);
        println!(
            "unlearning held under attack: steered {}, rmu {}",
            cmp.steered_unlearning_held, cmp.rmu_unlearning_held
        );
        summary["comparison"] = serde_json::to_value(&cmp).map_err(|e| CliError::Internal(e.to_string()))?;
    }
    summary["final_loss"] = json!(results.iter().map(|(k, v)| (k.clone(), v.final_loss)).collect::<BTreeMap<_, _>>());
    let refs: Vec<&Path> = outputs.iter().map(|p| p.as_path()).collect();
    ctx.manifest("attack", &refs, summary)
}

pub fn cmd_rmu_train(ctx: &Context) -> CliResult<()> {
    let model = ctx.model()?;
    let tok = ctx.tokenizer()?;
    let (forget, retain) = ctx.corpora(&tok)?;
    let cfg = ctx.config.rmu.to_config(ctx.config.seed);
    let out = rmu_train(&model, &forget, &retain, &cfg)?;
    let (dir, trace) = (ctx.out("rmu_model")?, ctx.out("rmu_trace.csv")?);
    save_model(&out.model, &dir)?;
    write_trace_csv(&trace, &out.trace)?;
    let u = out.direction.view();
    let before = rmu_probe(&model, &model, &forget, cfg.target_layer, cfg.steering_scale, u)?;
    let after = rmu_probe(&out.model, &model, &forget, cfg.target_layer, cfg.steering_scale, u)?;
    let drift = rmu_probe(&out.model, &model, &retain, cfg.target_layer, cfg.steering_scale, u)?;
    println!(
        "{} steps: forget distance {:.3} -> {:.3}, retain drift {:.4}",
        cfg.steps, before.forget_distance, after.forget_distance, drift.retain_drift
    );
    ctx.manifest(
        "rmu-train",
        &[&dir, &trace],
        json!({
            "forget_distance_before": before.forget_distance,
            "forget_distance_after": after.forget_distance,
            "retain_drift": drift.retain_drift,
            "final_loss": out.trace.last().map(|s| s.total_loss),
        }),
    )
}

pub struct ReportArgs {
    pub reports: Vec<PathBuf>,
    pub sweep: Option<PathBuf>,
    /// Splits sweep cells into `top_k <= split` and `top_k > split`;
    /// without it each distinct `top_k` is its own group.
    pub split_top_k: Option<f64>,
}

#[derive(Debug, Serialize)]
struct TopKTest {
    groups: Vec<(String, usize)>,
    test: KruskalWallis,
}

fn top_k_test(sweep: &SweepFile, split: Option<f64>) -> CliResult<Option<TopKTest>> {
    let mut groups: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for p in &sweep.outcome.points {
        let Some(&k) = p.hyperparameters.get("top_k") else {
            continue;
        };
        let key = match split {
            Some(s) if k <= s => format!("top_k <= {s}"),
            Some(s) => format!("top_k > {s}"),
            None => format!("top_k = {k}"),
        };
        groups.entry(key).or_default().push(p.report.alignment);
    }
    if groups.len() < 2 {
        return Ok(None);
    }
    let names: Vec<(String, usize)> = groups.iter().map(|(k, v)| (k.clone(), v.len())).collect();
    let samples: Vec<Vec<f64>> = groups.into_values().collect();
    Ok(Some(TopKTest {
        groups: names,
        test: kruskal_wallis(&samples)?,
    }))
}

pub fn cmd_report(ctx: &Context, args: &ReportArgs) -> CliResult<()> {
    let paths = if args.reports.is_empty() {
        vec![ctx.output_dir.join("eval_report.json")]
    } else {
        args.reports.clone()
    };
    let mut reports = Vec::new();
    for p in &paths {
        let text = fs::read_to_string(p).map_err(|e| CliError::Input(format!("cannot read report {}: {e}", p.display())))?;
        let r: EvalReport = serde_json::from_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", p.display())))?;
        reports.push(r);
    }
    print_reports(&reports);

    let mut md = String::from("| Configuration | Forget acc. | Retain acc. | Retention (forget) | Retention (retain) | Alignment |\n");
    md.push_str("|---|---|---|---|---|---|\n");
    for r in &reports {
        md.push_str(&format!(
            "| {} | {:.4} | {:.4} | {:.4} | {:.4} | {:.4} |\n",
            r.config_id, r.acc_forget, r.acc_retain, r.retention_forget, r.retention_retain, r.alignment
        ));
    }
    let sweep_path = args.sweep.clone().or_else(|| {
        let p = ctx.output_dir.join(SWEEP_JSON);
        p.exists().then_some(p)
    });
    let mut kw = None;
    if let Some(p) = sweep_path {
        kw = top_k_test(&read_sweep(&p)?, args.split_top_k)?;
        if let Some(t) = &kw {
            let groups: Vec<String> = t.groups.iter().map(|(g, n)| format!("{g} (n={n})")).collect();
            let line = format!(
                "Kruskal-Wallis on alignment across {}: H = {:.4}, p = {:.4}, df = {}",
                groups.join(", "),
                t.test.h,
                t.test.p,
                t.test.df
            );
            println!("{line}");
            md.push_str(&format!("\n{line}\n"));
        }
    }
    let out = ctx.out("report.md")?;
    write_text(&out, &md)?;
    ctx.manifest("report", &[&out], json!({ "reports": reports, "top_k_test": kw }))
}

/// Writes the toy fixtures, description payloads for the planted latents,
/// an attack target and a ready-to-run config.
pub fn cmd_toy_fixture(dir: &Path) -> CliResult<()> {
    write_fixture_files(dir)?;
    let fx = unlearning_fixture()?;
    let labels = [
        (fx.forget_latent, "virology topic"),
        (fx.retain_latent, "history topic"),
        (fx.refusal_latent, "refusal or apology"),
    ];
    let desc_dir = dir.join("descriptions");
    fs::create_dir_all(&desc_dir).map_err(|e| CliError::Input(format!("cannot create {}: {e}", desc_dir.display())))?;
    for (idx, label) in labels {
        let payload = json!({ "index": idx.to_string(), "explanations": [{ "description": label }] });
        write_text(&desc_dir.join(format!("{idx}.json")), &to_json(&payload)?)?;
    }

    let q = &fx.forget_questions[3];
    let target = AttackTarget {
        id: "toy-forget-3".into(),
        question: PromptTemplate::default().prompt(q),
        answer: q.choices[q.answer_index].clone(),
    };
    write_text(&dir.join("attack.json"), &to_json(&target)?)?;

    let config = format!(
        r#"seed = 0
output_dir = "out"

[model]
path = "model"
vocab = "vocab.txt"

[sae]
path = "sae"

[corpus]
forget = "forget_corpus.txt"
retain = "retain_corpus.txt"

[questions]
forget = "forget.jsonl"
retain = ["retain.jsonl"]

[selection]
retain_threshold = 0.0001
top_k = 5

[steering]
action = "clamp_cond"
coefficient = -300.0
clamp_value = 0.05
refusal_id = {refusal}
descriptions = "descriptions"

[sweep]
top_k = [1, 5, 10]
coefficient = [-300.0, -500.0]

[attack]
target = "attack.json"
tries_per_iteration = 16
candidates_per_index = 32
iterations = 10
suffix_length = 4

[rmu]
target_layer = 1
steps = 50
"#,
        refusal = fx.refusal_latent
    );
    write_text(&dir.join("unlearn.toml"), &config)?;
    let trigger = r#"seed = 0
output_dir = "out"

[model]
path = "model"
vocab = "vocab.txt"

[attack]
target = "attack.json"
tries_per_iteration = 32
candidates_per_index = 64
iterations = 10
suffix_length = 8
"#;
    write_text(&dir.join("trigger").join("unlearn.toml"), trigger)?;
    println!("wrote toy fixtures to {}", dir.display());
    Ok(())
}
