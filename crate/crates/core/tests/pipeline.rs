use hitlseg::data::{generate_dataset, load_dataset, write_dataset, BiasProfile, Group};
use hitlseg::eval::{predict_dataset, stratified_report};
use hitlseg::model::{load_checkpoint, save_checkpoint, ModelParams};
use hitlseg::train::{train, TrainConfig};

fn small_profile() -> BiasProfile {
    let mut p = BiasProfile::default();
    p.image_size = (32, 32);
    for (name, q) in p.concept_quotas.iter_mut() {
        *q = match name.as_str() {
            "circle" => 8,
            "square" => 4,
            _ => 2,
        };
    }
    p
}

#[test]
fn write_load_preserves_every_sample() {
    let (train_set, test) = generate_dataset(&small_profile(), 11, 2).unwrap();
    let dir = tempfile::tempdir().unwrap();
    for ds in [&train_set, &test] {
        let sub = dir.path().join(ds.manifest.split.name());
        let path = write_dataset(ds, &sub).unwrap();
        assert_eq!(&load_dataset(&path).unwrap(), ds);
    }
    assert_eq!(train_set.len(), 14);
    assert_eq!(test.len(), 6);
}

#[test]
fn train_checkpoint_predict_report() {
    let (train_set, test) = generate_dataset(&small_profile(), 3, 2).unwrap();
    let cfg = TrainConfig { epochs: 2, seed: 8, ..Default::default() };
    let out = train::<f32>(&cfg, &train_set, None, None).unwrap();
    assert_eq!(out.log.epochs.len(), 2);
    assert!(out.log.steps.iter().all(|s| s.loss.is_finite()));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.bcvl");
    save_checkpoint(&out.params, &path).unwrap();
    let back: ModelParams<f32> = load_checkpoint(&path).unwrap();
    assert_eq!(back.fingerprint(), out.params.fingerprint());

    let a = predict_dataset(&out.params, &test, 1, 8).unwrap();
    let b = predict_dataset(&back, &test, 1, 8).unwrap();
    assert_eq!(a, b);
    // all quotas sit below the default tail threshold
    let groups = test.group_map(Default::default());
    assert!(groups.values().all(|&g| g == Group::Tail));
    let report = stratified_report(&a, &test, &groups).unwrap();
    assert_eq!(report.overall.n, 6);
    assert_eq!(report.by_group["tail"].n, 6);
}
