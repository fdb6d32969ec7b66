use fixinfer::convnet::{load_weight_bundle, random_bundle_for, NetworkSpec};
use fixinfer::dataset::load_manifest;
use fixinfer::runner::{evaluate, write_eval_outputs, Model, Networks, RunConfig, WeightsSource};
use fixinfer::synthgen::{write_synthetic_dataset, SynthDatasetSpec};

#[test]
fn bundle_file_and_seeded_source_give_the_same_report() {
    let dir = tempfile::tempdir().unwrap();
    let spec = NetworkSpec::vgg16_features();
    let bundle = random_bundle_for(&spec, 12);
    let path = dir.path().join("w.nnwb");
    bundle.write(&path).unwrap();
    assert_eq!(load_weight_bundle(&path).unwrap().checksum(), bundle.checksum());

    let manifest = write_synthetic_dataset(
        &dir.path().join("ds"),
        &SynthDatasetSpec {
            trials: 3,
            subjects: 2,
            fixations: 2,
            ..Default::default()
        },
    )
    .unwrap();
    let ds = load_manifest(&manifest).unwrap();
    let run = |w: WeightsSource| {
        let cfg = RunConfig {
            weights: Some(w),
            manifest: manifest.clone(),
            models: vec![Model::Infernet, Model::Chance],
            t_values: vec![1, 2],
            ..Default::default()
        };
        let nets = Networks::load(&cfg).unwrap();
        evaluate(&ds, &nets, &cfg, true).unwrap()
    };
    let a = run(WeightsSource::File(path.clone()));
    let b = run(WeightsSource::Random(12));
    assert_eq!(a.report.rows, b.report.rows);
    assert_eq!(a.report.pvalues, b.report.pvalues);
    let strip = |c: &[(String, String)]| c.iter().filter(|(k, _)| k != "weights").cloned().collect::<Vec<_>>();
    assert_eq!(strip(&a.report.config), strip(&b.report.config));
    assert_eq!(a.report.rows.len(), 4);
    assert!(a.report.rows.iter().all(|r| r.n == 6));

    let out = dir.path().join("out");
    write_eval_outputs(&out, &a).unwrap();
    let maps: Vec<_> = std::fs::read_dir(out.join("maps")).unwrap().collect();
    assert_eq!(maps.len(), 12);
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(json["rows"].as_array().unwrap().len(), 4);
}
