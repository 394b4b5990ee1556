use std::time::Instant;

use exclusion_core::ensemble::OutputMode;
use exclusion_core::harness::{
    encode_request, run_experiment, serve_lines, Arm, Bundle, ExperimentConfig, Lab, SweepKind, REPORT_COLUMNS,
};
use exclusion_core::oracle::OracleKind;

const TINY: &str = r#"
name = "tiny"
seed = 3
arms = ["undefended", "ese"]
attacks = [{ kind = "threshold" }, { kind = "gap" }]

[data]
num_classes = 4
per_class = 100

[split]
member_fraction = 0.5
adversary_per_side = 30
eval_per_side = 60

[partition]
n = 4

[augment]
copies = 1

[learner]
epochs = 8
architecture = { kind = "mlp", hidden = [16] }
"#;

fn tiny() -> ExperimentConfig {
    ExperimentConfig::from_toml_str(TINY).unwrap()
}

#[test]
fn tiny_run_produces_the_cross_product_quickly() {
    let start = Instant::now();
    let report = run_experiment(&tiny()).unwrap();
    assert!(start.elapsed().as_secs() < 60, "took {:?}", start.elapsed());
    assert_eq!(report.rows.len(), 4);
    let mut keys: Vec<(String, String)> = report.rows.iter().map(|r| (r.eo_type.clone(), r.attack_type.clone())).collect();
    keys.sort();
    let expected = [("ESE", "GAP"), ("ESE", "Th"), ("Undefended", "GAP"), ("Undefended", "Th")];
    assert_eq!(keys, expected.map(|(a, b)| (a.to_string(), b.to_string())));
    for row in &report.rows {
        let m = &row.metrics;
        assert!((0.0..=1.0).contains(&m.attack_auc));
        assert!((0.0..=1.0).contains(&m.attack_advantage));
        assert_eq!(m.eo_accuracy.is_some(), row.eo_type != "Undefended");
    }
    let csv = report.to_csv_string().unwrap();
    assert_eq!(csv.lines().next().unwrap(), REPORT_COLUMNS.join(","));
    assert_eq!(csv.lines().count(), 5);
}

#[test]
fn reruns_are_byte_identical() {
    let a = run_experiment(&tiny()).unwrap();
    let b = run_experiment(&tiny()).unwrap();
    assert_eq!(a.to_csv_string().unwrap(), b.to_csv_string().unwrap());
    assert_eq!(a.to_json_string().unwrap(), b.to_json_string().unwrap());
}

#[test]
fn exact_lookup_excludes_every_training_member() {
    let lab = Lab::build(tiny()).unwrap();
    lab.prepared.audit().unwrap();
    let oracle = lab.oracle(OracleKind::Ese).unwrap();
    for (s, i) in lab.prepared.partition.members() {
        assert_eq!(oracle.decide(s, &lab.trained.models).unwrap().excluded, Some(i));
    }
    for s in lab.prepared.nonmembers.iter() {
        assert_eq!(oracle.decide(s, &lab.trained.models).unwrap().excluded, None);
    }
}

#[test]
fn bundle_round_trip_preserves_predictions() {
    let lab = Lab::build(tiny()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    lab.save_bundle(dir.path()).unwrap();
    let bundle = Bundle::load(dir.path()).unwrap();
    let arm = Arm::Defended(OracleKind::Ese);
    let loaded = bundle.target(arm, OutputMode::LabelAndProbs).unwrap();
    let original = lab.target(arm).unwrap();
    for (s, _) in lab.prepared.attack_data.eval().iter().take(40) {
        assert_eq!(loaded.respond(s).unwrap(), original.respond(s).unwrap());
    }
    let relab = bundle.into_lab().unwrap();
    assert_eq!(relab.subset_ids(), lab.subset_ids());
}

#[test]
fn label_only_serving_omits_probabilities() {
    let lab = Lab::build(tiny()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    lab.save_bundle(dir.path()).unwrap();
    let bundle = Bundle::load(dir.path()).unwrap();
    let samples: Vec<_> = lab.prepared.members.iter().take(3).collect();
    let mut input: String = samples.iter().map(|s| encode_request(s) + "\n").collect();
    input.push_str("not base64!\n");
    for (mode, has_probs) in [(OutputMode::LabelOnly, false), (OutputMode::LabelAndProbs, true)] {
        let target = bundle.target(Arm::Defended(OracleKind::Ese), mode).unwrap();
        let mut out = Vec::new();
        let served = serve_lines(target.as_ref(), bundle.shape, input.as_bytes(), &mut out).unwrap();
        assert_eq!(served, 4);
        let lines: Vec<serde_json::Value> = String::from_utf8(out)
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        for line in &lines[..3] {
            assert!(line.get("label").is_some());
            assert_eq!(line.get("probs").is_some(), has_probs, "{line}");
            assert!(line.get("excluded").unwrap().is_u64());
        }
        assert!(lines[3].get("error").is_some());
    }
}

#[test]
fn sweep_rows_carry_manipulation_labels() {
    let lab = Lab::build(tiny()).unwrap();
    let eval = lab.sweep(SweepKind::Translation, &[1.0, 2.0]).unwrap();
    let labels: Vec<&str> = eval.report.rows.iter().map(|r| r.manipulation.as_str()).collect();
    assert_eq!(labels, ["d=1", "d=2", "d=1", "d=2"]);
    assert!(eval.report.rows.iter().all(|r| r.attack_type == "TA"));
}

#[test]
fn bad_configs_name_the_failing_stage() {
    let cases = [
        ("partition.n=1", "partition"),
        ("split.member_fraction=1.5", "split"),
        ("split.eval_per_side=5000", "split"),
        ("learner.learning_rate=-1.0", "train"),
        ("augment.zoom=-0.5", "augment"),
        ("output_mode=\"label_only\"", "attack"),
    ];
    for (set, stage) in cases {
        let err = ExperimentConfig::with_overrides(TINY, &[set.to_string()])
            .and_then(|cfg| Lab::build(cfg).map(|_| ()))
            .unwrap_err()
            .to_string();
        assert!(err.contains(&format!("stage `{stage}`")), "{set}: {err}");
    }
}

#[test]
fn unknown_config_keys_are_rejected() {
    assert!(ExperimentConfig::from_toml_str("[data]\nclasses = 3\n").is_err());
    assert!(ExperimentConfig::from_toml_str("bogus = 1\n").is_err());
}
