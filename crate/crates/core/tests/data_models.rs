use banforge::data::{
    load_cifar_file, parse_char_corpus, stratified_subset, synthesize_cifar10, CifarVariant, Input, Split, SplitTag,
    CIFAR10_RECORD_LEN,
};
use banforge::models::{build, decode_checkpoint, load_checkpoint, save_checkpoint, ModelSpec, TeacherSnapshot};
use banforge::{Error, Tensor};

#[test]
fn truncated_cifar_file_reports_the_offset() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("batch.bin");
    let mut bytes = synthesize_cifar10(3, 1);
    bytes.truncate(2 * CIFAR10_RECORD_LEN + 100);
    std::fs::write(&path, &bytes).unwrap();
    match load_cifar_file(&path, CifarVariant::Cifar10, SplitTag::Train) {
        Err(Error::Format { offset, .. }) => assert_eq!(offset, 2 * CIFAR10_RECORD_LEN as u64),
        other => panic!("expected a format error, got {other:?}"),
    }
}

#[test]
fn cifar_subset_is_balanced_and_normalizable() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("batch.bin");
    std::fs::write(&path, synthesize_cifar10(200, 4)).unwrap();
    let ds = load_cifar_file(&path, CifarVariant::Cifar10, SplitTag::Train).unwrap();
    assert_eq!(ds.sample_shape(), &[3, 32, 32]);
    let sub = stratified_subset(&ds, 100, 2).unwrap();
    for c in 0..10 {
        assert_eq!(sub.labels.iter().filter(|&&y| y == c).count(), 10);
    }
    assert_eq!(sub, stratified_subset(&ds, 100, 2).unwrap());
    let mut norm = sub.clone();
    norm.normalize(&sub.channel_stats()).unwrap();
    let after = norm.channel_stats();
    assert!(after.mean.iter().all(|m| m.abs() < 1e-6));
    assert!(after.std.iter().all(|s| (s - 1.0).abs() < 1e-6));
}

#[test]
fn char_corpus_splits_are_ordered_and_disjoint() {
    let text = "hello world, born again\n".repeat(20);
    let c = parse_char_corpus(text.as_bytes(), [0.8, 0.1, 0.1]).unwrap();
    let [a, b] = c.boundaries;
    assert!(0 < a && a < b && b < c.ids.len());
    assert!(c.ids.iter().all(|&i| i < c.vocab_size()));
    let total: usize = [SplitTag::Train, SplitTag::Val, SplitTag::Test]
        .iter()
        .map(|&t| c.split_ids(t).len())
        .sum();
    assert_eq!(total, c.ids.len());

    let seqs = c.sequences(SplitTag::Train, 10).unwrap();
    let batch = seqs.batch::<f64>(&[0, 1]);
    match &batch.input {
        Input::Tokens { ids, batch: b, steps } => {
            assert_eq!((*b, *steps), (2, 10));
            // labels are step-major and shifted one token ahead
            assert_eq!(batch.labels[0], ids[1]);
            assert_eq!(batch.labels[1], ids[11]);
        }
        _ => panic!("expected token input"),
    }
    assert!(matches!(
        parse_char_corpus(&[0xff, 0xfe], [0.8, 0.1, 0.1]),
        Err(Error::Format { offset: 0, .. })
    ));
}

#[test]
fn snapshots_are_pure_and_checkpoints_detect_corruption() {
    let spec = ModelSpec::densenet([3, 8, 8], 2, 1, 3, 0.5, 4, 11);
    let model = build(&spec).unwrap();
    let snap = TeacherSnapshot::new(&model, 0);
    let x = Input::Dense(Tensor::from_fn(&[5, 3, 8, 8], |i| (i as f64 * 0.3).cos()));
    let before = snap.params.checksum();
    let (a, b) = (snap.logits(&x).unwrap(), snap.logits(&x).unwrap());
    assert_eq!(a, b);
    assert_eq!(snap.params.checksum(), before);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.banf");
    save_checkpoint(&path, &spec, &model.params, 0).unwrap();
    let restored = load_checkpoint(&path).unwrap().into_snapshot().unwrap();
    assert_eq!(restored.logits(&x).unwrap(), a);

    let mut bytes = std::fs::read(&path).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 1;
    assert!(matches!(decode_checkpoint(&bytes), Err(Error::Format { .. })));
}

#[test]
fn checkpoint_with_foreign_parameters_is_rejected() {
    let spec = ModelSpec::mlp(4, 1, 6, 3, 0);
    let other = build(&ModelSpec::mlp(4, 1, 7, 3, 0)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.banf");
    save_checkpoint(&path, &spec, &other.params, 0).unwrap();
    assert!(matches!(
        load_checkpoint(&path).unwrap().into_snapshot(),
        Err(Error::Spec { .. })
    ));
}

#[test]
fn invalid_specs_name_the_failing_stage() {
    let mut spec = ModelSpec::densenet([3, 2, 2], 3, 1, 2, 0.5, 4, 0);
    spec.input_pool = 0;
    match build(&spec) {
        Err(Error::Spec { stage, .. }) => assert!(stage.starts_with("stage"), "{stage}"),
        other => panic!("expected a spec error, got {:?}", other.map(|m| m.spec)),
    }
    let mut bad = ModelSpec::mlp(4, 1, 6, 3, 0);
    bad.width = 0;
    assert!(matches!(build(&bad), Err(Error::Spec { .. })));
}
