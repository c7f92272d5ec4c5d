mod common;

use floodforensics::data::{build_manifest, read_manifest, split_manifest, write_manifest, PreprocessConfig, Source, Split};
use floodforensics::dataset::{RecordSource, SampleSource};
use floodforensics::metrics::{evaluate, EvalOptions};
use floodforensics::models::{BackboneSpec, Model, ModelSpec};
use floodforensics::robustness::{AttackName, AttackSpec};

fn small_cfg() -> PreprocessConfig {
    PreprocessConfig {
        target_size: 32,
        ..PreprocessConfig::default()
    }
}

#[test]
fn manifest_split_and_sources() {
    let dir = tempfile::tempdir().unwrap();
    common::write_png_set(&dir.path().join("real"), 5, false, 40, 1);
    common::write_png_set(&dir.path().join("fake"), 5, true, 40, 2);
    let real = build_manifest(&dir.path().join("real/images"), 0, Some(&dir.path().join("real/masks")), Source::Rwfi).unwrap();
    let fake = build_manifest(&dir.path().join("fake/images"), 1, Some(&dir.path().join("fake/masks")), Source::StreetG).unwrap();
    assert!(real.skipped.skipped.is_empty());
    let mut records = real.records;
    records.extend(fake.records);
    assert!(records.iter().all(|r| r.mask_path.is_some() && r.split == Split::Test));

    let (train, val) = split_manifest(&records, 0.6, 4).unwrap();
    assert_eq!(train.len(), 6);
    assert_eq!(val.len(), 4);
    let path = dir.path().join("all.jsonl");
    let mut both = train.clone();
    both.extend(val.clone());
    write_manifest(&both, &path).unwrap();
    assert_eq!(read_manifest(&path).unwrap(), both);

    let src = RecordSource::new(train.clone(), small_cfg()).with_augmentation(9);
    let a = src.sample(0, 1).unwrap();
    assert_eq!(a.image.height(), 32);
    assert_eq!(a.mask.as_ref().unwrap().height(), 32);
    assert_eq!(src.sample(0, 1).unwrap().image, a.image);
    assert_ne!(src.sample(0, 2).unwrap().image, a.image);

    let plain = RecordSource::new(train.clone(), small_cfg());
    let noisy = RecordSource::new(train, small_cfg())
        .with_attack(Some(AttackSpec::new(AttackName::GaussianNoise).with_seed(3)));
    assert_ne!(plain.sample(0, 0).unwrap().image, noisy.sample(0, 0).unwrap().image);
    assert_eq!(noisy.sample(0, 0).unwrap().image, noisy.sample(0, 0).unwrap().image);
}

#[test]
fn evaluate_all_real_set_reports_tnr_and_localization_only() {
    let dir = tempfile::tempdir().unwrap();
    common::write_png_set(&dir.path().join("wsoc"), 4, false, 40, 5);
    let recs = build_manifest(&dir.path().join("wsoc/images"), 0, Some(&dir.path().join("wsoc/masks")), Source::Wsoc)
        .unwrap()
        .records;
    let model = Model::build(&ModelSpec::hybrid(BackboneSpec::residual_tiny(4, 8)), 1).unwrap();
    let opts = EvalOptions {
        preprocess: small_cfg(),
        ..EvalOptions::default()
    };
    let (report, scored) = evaluate(&model, &recs, None, None, &opts).unwrap();
    assert_eq!(report.dataset, "WSOC");
    assert_eq!(report.n_images, 4);
    assert!(report.tnr.is_some() && report.bpa.is_some() && report.iou.is_some());
    assert!(report.tpr.is_none() && report.auc.is_none());
    assert_eq!(scored.bpa.len(), 4);
    for v in [report.tnr, report.bpa, report.iou].into_iter().flatten() {
        assert!((0.0..=1.0).contains(&v));
    }

    let mut mixed = recs.clone();
    mixed[0].source = Source::StreetG;
    assert!(evaluate(&model, &mixed, None, None, &opts).is_err());
}
