use proptest::prelude::*;
use sae_unlearn::sae::make_toy_sae;
use sae_unlearn::steering::{HookAction, SteeringRow};
use sae_unlearn::steering_csv::{
    parse_steering_csv, validate_against_sae, write_steering_csv, Finding, SteeringDocument,
};

const CLAMP_PRIME: &str = include_str!("data/clamp_prime.csv");
const REFUSAL_CLAMP: &str = include_str!("data/refusal_clamp.csv");
const SAE_ID: &str = "layer_7/width_16k/canonical";
const RELEASE: &str = "gemma-scope-2b-pt-res-canonical";

#[test]
fn clamp_prime_file_parses() {
    let doc = parse_steering_csv(CLAMP_PRIME).unwrap();
    let idx: Vec<usize> = doc.rows.iter().map(|r| r.latent_idx).collect();
    assert_eq!(idx, vec![11766, 9723, 4788, 1709, 9186]);
    for r in &doc.rows {
        assert_eq!(r.hook_action, HookAction::Clamp);
        assert_eq!(r.steering_coefficient, -300.0);
        assert_eq!(r.sae_id, SAE_ID);
        assert_eq!(r.sae_release, RELEASE);
        assert!(r.clamp_value.is_none() && r.refusal_id.is_none());
    }
    assert_eq!(
        doc.rows[0].description.as_deref(),
        Some("mentions of the coronavirus pandemic and related medical terms")
    );
}

#[test]
fn refusal_clamp_file_parses() {
    let doc = parse_steering_csv(REFUSAL_CLAMP).unwrap();
    assert_eq!(doc.rows.len(), 10);
    for r in &doc.rows {
        assert_eq!(r.hook_action, HookAction::ClampRefusal);
        assert_eq!(r.refusal_id, Some(15864));
        assert_eq!(r.clamp_value, Some(0.05));
        assert_eq!(r.steering_coefficient, -500.0);
    }
    assert_eq!(doc.rows[9].latent_idx, 16246);
    assert_eq!(
        doc.rows[7].description.as_deref(),
        Some("references to mental health, particularly during the COVID-19 pandemic")
    );
    assert!(doc.header.iter().any(|h| h == "refusal_id"));
}

#[test]
fn golden_files_round_trip() {
    for text in [CLAMP_PRIME, REFUSAL_CLAMP] {
        let doc = parse_steering_csv(text).unwrap();
        let written = write_steering_csv(&doc).unwrap();
        assert_eq!(parse_steering_csv(&written).unwrap(), doc);
    }
    // Apart from the refusal column spelling, writing reproduces the bytes.
    assert_eq!(write_steering_csv(&parse_steering_csv(CLAMP_PRIME).unwrap()).unwrap(), CLAMP_PRIME);
    let refusal = write_steering_csv(&parse_steering_csv(REFUSAL_CLAMP).unwrap()).unwrap();
    assert_eq!(refusal, REFUSAL_CLAMP.replacen("refuse_id", "refusal_id", 1));
}

#[test]
fn validation_against_width_16k() {
    let sae = make_toy_sae(0, 4, 16384, &[]).unwrap();
    let mut doc = parse_steering_csv(REFUSAL_CLAMP).unwrap();
    let report = validate_against_sae(&doc, &sae);
    assert!(report
        .findings
        .iter()
        .all(|f| matches!(f, Finding::Provenance { .. })));
    assert!(!report.findings.iter().any(|f| matches!(f, Finding::LatentOutOfRange { .. })));

    doc.rows[0].latent_idx = 99999;
    let report = validate_against_sae(&doc, &sae);
    assert!(report.findings.contains(&Finding::LatentOutOfRange {
        row: 1,
        latent_idx: 99999,
        d_sae: 16384
    }));
}

#[test]
fn matching_provenance_has_no_finding() {
    let sae = make_toy_sae(0, 4, 32, &[]).unwrap();
    let row = SteeringRow::new(3, HookAction::Clamp, -1.0, sae.release.clone(), sae.sae_id.clone());
    let doc = SteeringDocument::from_rows(vec![row.clone()]);
    assert!(validate_against_sae(&doc, &sae).is_clean());
    let mut other = row;
    other.sae_release = "elsewhere".into();
    let report = validate_against_sae(&SteeringDocument::from_rows(vec![other]), &sae);
    assert!(matches!(report.findings[..], [Finding::Provenance { row: 1, .. }]));
}

fn arb_row() -> impl Strategy<Value = SteeringRow> {
    let action = prop::sample::select(HookAction::ALL.to_vec());
    (
        0usize..20000,
        action,
        -1e4f64..1e4,
        prop::option::of(-10f64..10.0),
        prop::option::of(0usize..20000),
        prop::option::of("[a-z ,\"]{1,20}"),
    )
        .prop_map(|(idx, action, coef, clamp, refusal, desc)| {
            let mut row = SteeringRow::new(idx, action, coef, "rel", "layer/x");
            row.clamp_value = clamp;
            row.refusal_id = refusal;
            if matches!(action, HookAction::ClampCond | HookAction::ClampRefusal) {
                row.clamp_value.get_or_insert(0.05);
            }
            if action == HookAction::ClampRefusal {
                row.refusal_id.get_or_insert(7);
            }
            // Leading/trailing blanks would not survive as a meaningful cell.
            row.description = desc.map(|d| d.trim().to_string()).filter(|d| !d.is_empty());
            row
        })
}

proptest! {
    #[test]
    fn parse_inverts_write(rows in prop::collection::vec(arb_row(), 0..12)) {
        let doc = SteeringDocument::from_rows(rows);
        let text = write_steering_csv(&doc).unwrap();
        prop_assert_eq!(parse_steering_csv(&text).unwrap(), doc);
    }
}
