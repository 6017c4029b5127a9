use numkit::Tensor;
use proptest::prelude::*;
use resprune::data::{Task, TaskConfig};
use resprune::sandwich::{progressive_prune, PipelineConfig};
use resprune::store::{
    load_report, manifest_digest, manifest_from_checkpoint, manifest_to_checkpoint, save_report,
    teacher_from_checkpoint, teacher_to_checkpoint, Checkpoint, Report, RunConfig,
};
use resprune::toymodel::{build_teacher, ModelConfig};
use resprune::Error;

fn small() -> ModelConfig {
    ModelConfig {
        n_double: 1,
        n_single: 3,
        ..ModelConfig::default()
    }
}

fn quick_pipeline() -> PipelineConfig {
    let mut p = PipelineConfig::default();
    p.fit_samples = 64;
    p.train_samples = 64;
    p.train.steps = 10;
    p.ordering = resprune::sandwich::Ordering::End2start;
    p
}

#[test]
fn teacher_file_round_trip_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let t = build_teacher(&small()).unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    teacher_to_checkpoint(&t, "d").unwrap().save(&a).unwrap();
    let loaded = teacher_from_checkpoint(&Checkpoint::load(&a).unwrap()).unwrap();
    assert_eq!(loaded, t);
    teacher_to_checkpoint(&loaded, "d")
        .unwrap()
        .save(&b)
        .unwrap();
    let ((ja, ba), (jb, bb)) = (Checkpoint::paths(&a), Checkpoint::paths(&b));
    assert_eq!(std::fs::read(ja).unwrap(), std::fs::read(jb).unwrap());
    assert_eq!(std::fs::read(ba).unwrap(), std::fs::read(bb).unwrap());
}

#[test]
fn manifest_survives_disk_and_keeps_its_digest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small();
    let t = build_teacher(&cfg).unwrap();
    let task = Task::new(TaskConfig::default(), cfg.n_tokens, cfg.d_model).unwrap();
    let m = progressive_prune(&t, &task, None, 0.5, &quick_pipeline()).unwrap();
    let stem = dir.path().join("m.r0.50");
    manifest_to_checkpoint(&m).unwrap().save(&stem).unwrap();
    let back = manifest_from_checkpoint(&Checkpoint::load(&stem).unwrap()).unwrap();
    assert_eq!(
        manifest_digest(&back).unwrap(),
        manifest_digest(&m).unwrap()
    );
    let (a, b) = (
        resprune::manifest::assemble(&t, &m).unwrap(),
        resprune::manifest::assemble(&t, &back).unwrap(),
    );
    assert_eq!(a, b);
}

#[test]
fn truncated_blob_and_missing_files() {
    let dir = tempfile::tempdir().unwrap();
    let stem = dir.path().join("t");
    teacher_to_checkpoint(&build_teacher(&small()).unwrap(), "d")
        .unwrap()
        .save(&stem)
        .unwrap();
    let (jp, bp) = Checkpoint::paths(&stem);
    let blob = std::fs::read(&bp).unwrap();
    std::fs::write(&bp, &blob[..blob.len() - 4]).unwrap();
    assert!(matches!(Checkpoint::load(&stem), Err(Error::Size(_))));
    std::fs::remove_file(&jp).unwrap();
    assert!(matches!(
        Checkpoint::load(&stem),
        Err(Error::MissingArtifact(_))
    ));
}

#[test]
fn manifest_loaded_as_teacher_is_rejected() {
    let cfg = small();
    let t = build_teacher(&cfg).unwrap();
    let task = Task::new(TaskConfig::default(), cfg.n_tokens, cfg.d_model).unwrap();
    let m = progressive_prune(&t, &task, None, 0.25, &quick_pipeline()).unwrap();
    let ck = manifest_to_checkpoint(&m).unwrap();
    assert!(matches!(teacher_from_checkpoint(&ck), Err(Error::Parse(_))));
}

#[test]
fn report_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("reports").join("x.json");
    let r = Report::new("demo", "abc", vec![1.5f64, 2.0]);
    save_report(&path, &r).unwrap();
    let back: Report<Vec<f64>> = load_report(&path, Some("demo")).unwrap();
    assert_eq!(back, r);
    assert!(matches!(
        load_report::<Vec<f64>>(&dir.path().join("none.json"), None),
        Err(Error::MissingArtifact(_))
    ));
}

#[test]
fn config_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.toml");
    let mut cfg = RunConfig::default();
    cfg.prune.ratio = 0.2;
    cfg.pipeline.width = 5;
    std::fs::write(&path, cfg.to_toml()).unwrap();
    let back = RunConfig::load(&path).unwrap();
    assert_eq!(back, cfg);
    assert_eq!(back.digest(), cfg.digest());
}

fn tensor_strategy() -> impl Strategy<Value = Tensor> {
    prop::collection::vec(1usize..5, 0..3).prop_flat_map(|shape| {
        let n: usize = shape.iter().product();
        prop::collection::vec(-1e6f32..1e6, n)
            .prop_map(move |d| Tensor::new(shape.clone(), d).unwrap())
    })
}

proptest! {
    #[test]
    fn checkpoint_encode_decode_is_identity(
        tensors in prop::collection::vec(tensor_strategy(), 0..5),
        note in "[a-z ]{0,12}",
    ) {
        let ck = Checkpoint {
            kind: "prop".into(),
            config_digest: "x".into(),
            metadata: serde_json::json!({ "note": note }),
            tensors: tensors.into_iter().enumerate().map(|(i, t)| (format!("t{i}"), t)).collect(),
        };
        let (j, b) = ck.encode().unwrap();
        let back = Checkpoint::decode(&j, &b).unwrap();
        prop_assert_eq!(&back, &ck);
        prop_assert_eq!(back.encode().unwrap(), (j, b));
    }

    #[test]
    fn any_blob_flip_is_caught(pos in 0usize..64, bit in 0u8..8) {
        let ck = Checkpoint {
            kind: "prop".into(),
            config_digest: "x".into(),
            metadata: serde_json::Value::Null,
            tensors: vec![("w".into(), Tensor::full(&[4, 4], 0.5))],
        };
        let (j, mut b) = ck.encode().unwrap();
        b[pos] ^= 1 << bit;
        prop_assert!(matches!(Checkpoint::decode(&j, &b), Err(Error::Corrupt(_))));
    }
}
