use sae_unlearn::model::{LanguageModel, ModelConfig, TokenId, ToyModel};
use sae_unlearn::rmu::{rmu_probe, rmu_train, write_trace_csv, RmuConfig};
use sae_unlearn::rng::{below, seeded};

fn corpus(seed: u64, lo: usize, hi: usize, n: usize) -> Vec<Vec<TokenId>> {
    let mut r = seeded(seed);
    (0..n)
        .map(|_| (0..6).map(|_| (lo + below(&mut r, hi - lo)) as TokenId).collect())
        .collect()
}

fn setup() -> (ToyModel, Vec<Vec<TokenId>>, Vec<Vec<TokenId>>, RmuConfig) {
    let model = ToyModel::new(ModelConfig::new(16, 2, 2, 32, 3)).unwrap();
    let cfg = RmuConfig {
        target_layer: 1,
        steps: 60,
        seed: 4,
        ..Default::default()
    };
    (model, corpus(1, 1, 16, 8), corpus(2, 16, 32, 8), cfg)
}

#[test]
fn training_is_deterministic() {
    let (m, f, r, cfg) = setup();
    let a = rmu_train(&m, &f, &r, &cfg).unwrap();
    let b = rmu_train(&m, &f, &r, &cfg).unwrap();
    assert_eq!(a.model, b.model);
    assert_eq!(a.trace, b.trace);
}

#[test]
fn forget_loss_falls_over_training() {
    let (m, f, r, cfg) = setup();
    let out = rmu_train(&m, &f, &r, &cfg).unwrap();
    let mean = |s: &[sae_unlearn::rmu::RmuStep]| s.iter().map(|t| t.forget_loss).sum::<f64>() / s.len() as f64;
    assert!(mean(&out.trace[50..]) < mean(&out.trace[..10]));
    assert!(out.trace.iter().all(|t| (t.total_loss - t.forget_loss - t.retain_loss).abs() < 1e-9 * t.total_loss.abs().max(1.0)));
    assert_eq!(out.trace[0].retain_loss, 0.0);
}

#[test]
fn retain_weight_limits_drift() {
    let (m, f, r, cfg) = setup();
    let held = corpus(9, 16, 32, 6);
    let drift = |alpha: f64| {
        let out = rmu_train(&m, &f, &r, &RmuConfig { retain_weight: alpha, ..cfg.clone() }).unwrap();
        rmu_probe(&out.model, &m, &held, 1, cfg.steering_scale, out.direction.view()).unwrap().retain_drift
    };
    let free = drift(0.0);
    let held_back = drift(3000.0);
    assert!(held_back < free, "{held_back} vs {free}");
}

#[test]
fn frozen_layers_past_target_are_untouched() {
    let (m, f, r, cfg) = setup();
    let cfg = RmuConfig { target_layer: 0, steps: 5, ..cfg };
    let out = rmu_train(&m, &f, &r, &cfg).unwrap();
    assert_eq!(out.model.blocks[1], m.blocks[1]);
    assert_eq!(out.model.unembed, m.unembed);
    assert_ne!(out.model.blocks[0], m.blocks[0]);
    assert_eq!(out.model.n_layers(), 2);
}

#[test]
fn invalid_settings_are_rejected() {
    let (m, f, r, cfg) = setup();
    assert!(rmu_train(&m, &f, &r, &RmuConfig { target_layer: 2, ..cfg.clone() }).is_err());
    assert!(rmu_train(&m, &f, &r, &RmuConfig { learning_rate: 0.0, ..cfg.clone() }).is_err());
    assert!(rmu_train(&m, &f, &r, &RmuConfig { learning_rate: 1.0, ..cfg }).is_err());
}

#[test]
fn trace_csv_has_one_row_per_step() {
    let (m, f, r, cfg) = setup();
    let out = rmu_train(&m, &f, &r, &RmuConfig { steps: 3, ..cfg }).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("trace.csv");
    write_trace_csv(&path, &out.trace).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "step,forget_loss,retain_loss,total_loss");
    assert_eq!(lines.len(), 4);
}
