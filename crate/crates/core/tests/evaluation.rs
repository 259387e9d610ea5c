use std::collections::BTreeMap;

use proptest::prelude::*;
use sae_unlearn::evaluation::{
    alignment, alignment_isolines, kruskal_wallis, mc_accuracy, pareto_frontier, parse_questions, retention,
    run_sweep, Baseline, EvalReport, Grid, MCQuestion, PromptTemplate, SweepPoint, CHANCE, DEFAULT_EPSILON,
};
use sae_unlearn::model::{LanguageModel, ModelConfig, TokenId, ToyModel, WordTokenizer};
use sae_unlearn::Error;

const WORDS: [&str; 14] = [
    "what", "is", "the", "capital", "colour", "of", "sky", "Answer:", "red", "blue", "green", "paris", "rome", "oslo",
];

fn setup() -> (ToyModel, WordTokenizer) {
    let tok = WordTokenizer::new(WORDS).unwrap();
    let model = ToyModel::new(ModelConfig::new(16, 2, 2, tok.len(), 42)).unwrap();
    (model, tok)
}

fn question(stem: &str, choices: [&str; 4], answer: usize, subject: &str) -> MCQuestion {
    MCQuestion {
        id: None,
        stem: stem.into(),
        choices: choices.iter().map(|c| c.to_string()).collect(),
        answer_index: answer,
        subject: subject.into(),
    }
}

fn ten_questions() -> Vec<MCQuestion> {
    let stems = ["what is the capital", "what is the colour of sky", "the capital of the sky"];
    let choices = [["red", "blue", "green", "paris"], ["paris", "rome", "oslo", "red"], ["oslo", "sky", "blue", "rome"]];
    (0..10)
        .map(|i| question(stems[i % 3], choices[i % 3], i % 4, if i < 5 { "geo" } else { "art" }))
        .collect()
}

/// Sum of log-softmax scores by explicit loops over one full forward pass.
fn oracle_score(model: &ToyModel, prompt: &[TokenId], cont: &[TokenId]) -> f64 {
    let mut seq = prompt.to_vec();
    seq.extend_from_slice(cont);
    let logits = model.forward(&seq).unwrap();
    let mut total = 0.0;
    for (j, &t) in cont.iter().enumerate() {
        let row = logits.row(prompt.len() - 1 + j);
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
        let z: f64 = row.iter().map(|&v| (v as f64 - max).exp()).sum();
        total += row[t as usize] as f64 - max - z.ln();
    }
    total
}

#[test]
fn mc_accuracy_matches_hand_scoring() {
    let (model, tok) = setup();
    let qs = ten_questions();
    let template = PromptTemplate::default();
    let got = mc_accuracy(&model, &tok, &qs, &template).unwrap();
    let mut correct = 0;
    for (q, rec) in qs.iter().zip(&got.records) {
        let prompt = tok.encode(&format!("{} Answer:", q.stem));
        let scores: Vec<f64> = q.choices.iter().map(|c| oracle_score(&model, &prompt, &tok.encode(c))).collect();
        for (a, b) in scores.iter().zip(rec.scores) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
        let mut best = 0;
        for i in 1..4 {
            if scores[i] > scores[best] + 1e-9 {
                best = i;
            }
        }
        assert_eq!(rec.predicted, best);
        correct += (best == q.answer_index) as usize;
    }
    assert_eq!(got.accuracy, correct as f64 / 10.0);
    let subjects = got.per_subject();
    assert_eq!(subjects["geo"].1 + subjects["art"].1, 10);
}

#[test]
fn uniform_model_ties_pick_first_choice() {
    let tok = WordTokenizer::new(WORDS).unwrap();
    let model = ToyModel::zeros(ModelConfig::new(8, 1, 1, tok.len(), 0)).unwrap();
    let qs = ten_questions();
    let got = mc_accuracy(&model, &tok, &qs, &PromptTemplate::default()).unwrap();
    assert!(got.records.iter().all(|r| r.predicted == 0));
    let zeros = qs.iter().filter(|q| q.answer_index == 0).count();
    assert_eq!(got.accuracy, zeros as f64 / 10.0);
}

#[test]
fn malformed_question_file_reports_line() {
    let good = serde_json::to_string(&ten_questions()[0]).unwrap();
    let bad = r#"{"stem":"x","choices":["a","b","c"],"answer_index":0}"#;
    let text = format!("{good}\n\n{bad}\n");
    match parse_questions(&text) {
        Err(Error::Data { line, .. }) => assert_eq!(line, Some(3)),
        other => panic!("expected a data error, got {other:?}"),
    }
    assert!(mc_accuracy(&setup().0, &setup().1, &[], &PromptTemplate::default()).is_err());
}

#[test]
fn unmodified_row_of_the_results_table() {
    let r = EvalReport::from_accuracies("none", 0.5860, 0.5710, Baseline { acc_forget: 0.5860, acc_retain: 0.5710 }, DEFAULT_EPSILON);
    assert_eq!((r.retention_forget, r.retention_retain, r.alignment), (1.0, 1.0, 0.0));
}

#[test]
fn isolines_have_constant_alignment() {
    let base = Baseline { acc_forget: 0.586, acc_retain: 0.571 };
    let pts = alignment_isolines(base, &[0.5, 0.8], 11);
    assert_eq!(pts.len(), 22);
    for p in pts {
        let a = alignment(
            retention(p.acc_retain, base.acc_retain, DEFAULT_EPSILON, CHANCE),
            retention(p.acc_forget, base.acc_forget, DEFAULT_EPSILON, CHANCE),
        );
        // The epsilon floor at chance accuracy contributes about 3e-9.
        assert!((a - p.alignment).abs() < 1e-8, "{p:?} gives {a}");
    }
}

#[test]
fn parallel_sweep_matches_serial_loop() {
    let base = Baseline { acc_forget: 0.6, acc_retain: 0.6 };
    let pipeline = |h: &BTreeMap<String, f64>| -> sae_unlearn::Result<EvalReport> {
        let (k, c) = (h["top_k"], h["coefficient"]);
        if k > 15.0 && c < -400.0 {
            return Err(Error::Argument("planted failure".into()));
        }
        let forget = 0.6 - 0.01 * k * (-c / 500.0);
        let retain = 0.6 - 0.002 * k;
        Ok(EvalReport::from_accuracies("cell", forget, retain, base, DEFAULT_EPSILON))
    };
    let grid = Grid::new().axis("top_k", vec![10.0, 20.0]).axis("coefficient", vec![-300.0, -500.0]);
    let out = run_sweep(&grid, pipeline).unwrap();
    assert_eq!(out.points.len(), 3);
    assert_eq!(out.failed.len(), 1);
    assert_eq!(out.failed[0].hyperparameters["top_k"], 20.0);

    let mut serial = Vec::new();
    for k in [10.0, 20.0] {
        for c in [-300.0, -500.0] {
            let h = BTreeMap::from([("coefficient".to_string(), c), ("top_k".to_string(), k)]);
            if let Ok(report) = pipeline(&h) {
                serial.push(SweepPoint { hyperparameters: h, report });
            }
        }
    }
    assert_eq!(out.points, serial);
}

fn point(i: usize, forget: f64, retain: f64) -> SweepPoint {
    let base = Baseline { acc_forget: 0.6, acc_retain: 0.6 };
    SweepPoint {
        hyperparameters: BTreeMap::from([("i".to_string(), i as f64)]),
        report: EvalReport::from_accuracies(format!("p{i}"), forget, retain, base, DEFAULT_EPSILON),
    }
}

fn dominated(a: &EvalReport, b: &EvalReport) -> bool {
    b.acc_retain >= a.acc_retain && b.acc_forget <= a.acc_forget && (b.acc_retain > a.acc_retain || b.acc_forget < a.acc_forget)
}

proptest! {
    #[test]
    fn retention_bounded_and_monotone(orig in 0.26f64..1.0, a in 0.0f64..1.0, b in 0.0f64..1.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let r_lo = retention(lo, orig, DEFAULT_EPSILON, CHANCE);
        let r_hi = retention(hi, orig, DEFAULT_EPSILON, CHANCE);
        prop_assert!(r_lo > 0.0 && r_hi <= 1.0);
        prop_assert!(r_lo <= r_hi);
    }

    #[test]
    fn alignment_bounded_and_monotone(g in 0.0f64..=1.0, b in 0.0f64..=1.0, dg in 0.0f64..0.5, db in 0.0f64..0.5) {
        let a = alignment(g, b);
        prop_assert!((0.0..=1.0).contains(&a));
        prop_assert!(alignment((g + dg).min(1.0), b) >= a);
        prop_assert!(alignment(g, (b + db).min(1.0)) <= a);
    }

    #[test]
    fn pareto_frontier_is_sound_and_complete(coords in prop::collection::vec((0u8..8, 0u8..8), 1..30)) {
        let pts: Vec<SweepPoint> = coords
            .iter()
            .enumerate()
            .map(|(i, &(f, r))| point(i, 0.25 + f as f64 * 0.05, 0.25 + r as f64 * 0.05))
            .collect();
        let front = pareto_frontier(&pts);
        for f in &front {
            prop_assert!(!pts.iter().any(|p| dominated(&f.report, &p.report)));
        }
        for p in &pts {
            let on = front.iter().any(|f| f.report.acc_forget == p.report.acc_forget && f.report.acc_retain == p.report.acc_retain);
            prop_assert!(on || front.iter().any(|f| dominated(&p.report, &f.report)));
        }
        for w in front.windows(2) {
            prop_assert!(w[0].report.acc_retain > w[1].report.acc_retain);
            prop_assert!(w[0].report.acc_forget > w[1].report.acc_forget);
        }
    }

    #[test]
    fn kruskal_wallis_permutation_invariant(
        groups in prop::collection::vec(prop::collection::vec(0u8..10, 1..6), 2..5),
        rot in 0usize..5,
    ) {
        let g: Vec<Vec<f64>> = groups.iter().map(|v| v.iter().map(|&x| x as f64).collect()).collect();
        let base = kruskal_wallis(&g).unwrap();
        let mut shuffled: Vec<Vec<f64>> = g.iter().map(|v| v.iter().rev().copied().collect()).collect();
        let n = shuffled.len();
        shuffled.rotate_left(rot % n);
        let other = kruskal_wallis(&shuffled).unwrap();
        prop_assert!((base.h - other.h).abs() < 1e-9);
        prop_assert!((base.p - other.p).abs() < 1e-9);
        prop_assert!(base.h >= -1e-12 && (0.0..=1.0).contains(&base.p));
    }
}
