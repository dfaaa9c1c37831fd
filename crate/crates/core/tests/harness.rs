use std::fs;
use std::path::Path;

use groundcount_core::counters::ModelKind;
use groundcount_core::data::vqa::{VqaAnnotation, VqaAnnotationFile, VqaAnswer, VqaQuestion, VqaQuestionFile};
use groundcount_core::data::{Dataset, Split};
use groundcount_core::harness::{
    cmd_eval_on, cmd_filter, cmd_sweep, cmd_synth, cmd_train_on, load_dataset, FilterInputs, ResolvedConfig, RunConfig,
};
use groundcount_core::Error;

fn small(kind: ModelKind, out: &Path) -> ResolvedConfig {
    RunConfig {
        model: kind,
        train_scenes: 60,
        dev_scenes: 20,
        test_scenes: 10,
        max_epochs: Some(2),
        seed: 4,
        out: out.to_path_buf(),
        ..RunConfig::default()
    }
    .resolve()
    .unwrap()
}

#[test]
fn guess1_writes_the_modal_count() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(ModelKind::Guess1, dir.path());
    let data = load_dataset(&cfg).unwrap();
    let r = cmd_train_on(&cfg, &data, &mut |_| {}).unwrap();
    assert_eq!(r.log.len(), 1);
    let mode = groundcount_core::harness::train::modal_count(&data.train).unwrap();
    let scene = data.scene(&data.dev[0].image_id).unwrap();
    let p = r.model.predict(scene, &[]).unwrap();
    assert_eq!(p.count, mode);
    for f in ["best.ckpt", "metrics.csv", "train_log.csv", "config.resolved.json", "manifest.json"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
}

#[test]
fn checkpoint_eval_reproduces_dev_metrics_and_dumps() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(ModelKind::Irlc, &dir.path().join("train"));
    let data = load_dataset(&cfg).unwrap();
    let trained = cmd_train_on(&cfg, &data, &mut |_| {}).unwrap();
    let best = trained.log.iter().find(|e| e.epoch == trained.best_epoch).unwrap();
    assert_eq!(best.dev_accuracy, trained.dev.accuracy);

    let mut eval_cfg = cfg.clone();
    eval_cfg.out = dir.path().join("eval");
    let r = cmd_eval_on(&eval_cfg, &data, &cfg.out.join("best.ckpt"), Split::Dev, None).unwrap();
    assert_eq!(r.report.accuracy.to_bits(), trained.dev.accuracy.to_bits());
    assert_eq!(r.report.rmse.to_bits(), trained.dev.rmse.to_bits());
    assert_eq!(r.report.bins, trained.dev.bins);

    let dump = fs::read_to_string(eval_cfg.out.join("predictions.jsonl")).unwrap();
    assert_eq!(dump.lines().count(), data.dev.len());
    for line in dump.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        let w: Vec<f64> = v["weights"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
        assert!(w.iter().all(|&x| x == 0.0 || x == 1.0));
        assert_eq!(w.iter().sum::<f64>(), v["prediction"].as_f64().unwrap());
        assert_eq!(v["boxes"].as_array().unwrap().len(), w.len());
    }
}

#[test]
fn checkpoint_must_match_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(ModelKind::SoftCount, dir.path());
    let data = load_dataset(&cfg).unwrap();
    cmd_train_on(&cfg, &data, &mut |_| {}).unwrap();
    let mut other = cfg.clone();
    other.model = ModelKind::Irlc;
    let ck = dir.path().join("best.ckpt");
    assert!(cmd_eval_on(&other, &data, &ck, Split::Dev, None).is_err());
    let mut narrow = cfg.clone();
    narrow.d_hid = 16;
    assert!(cmd_eval_on(&narrow, &data, &ck, Split::Dev, None).is_err());
}

#[test]
fn empty_split_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(ModelKind::Guess1, dir.path());
    let mut data = load_dataset(&cfg).unwrap();
    cmd_train_on(&cfg, &data, &mut |_| {}).unwrap();
    data.test.clear();
    match cmd_eval_on(&cfg, &data, &dir.path().join("best.ckpt"), Split::Test, None) {
        Err(Error::Empty(_)) => {}
        Err(e) => panic!("unexpected error {e}"),
        Ok(_) => panic!("empty split should be rejected"),
    }
}

#[test]
fn joint_loss_adds_weighted_grounding() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(ModelKind::SoftCount, dir.path());
    let data = load_dataset(&cfg).unwrap();
    let with = cmd_train_on(&cfg, &data, &mut |_| {}).unwrap();
    for e in &with.log {
        assert!(e.grounding_loss > 0.0);
        assert!((e.train_loss - (e.counting_loss + 0.1 * e.grounding_loss)).abs() < 1e-9);
    }
    let mut without = cfg.clone();
    without.grounding = false;
    let r = cmd_train_on(&without, &data, &mut |_| {}).unwrap();
    for e in &r.log {
        assert_eq!(e.grounding_loss, 0.0);
        assert!((e.train_loss - e.counting_loss).abs() < 1e-12);
    }
}

#[test]
fn diverging_training_reports_the_batch() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(ModelKind::Lstm, dir.path());
    cfg.learning_rate = 1e300;
    let data = load_dataset(&cfg).unwrap();
    match cmd_train_on(&cfg, &data, &mut |_| {}) {
        Err(Error::NonFinite(msg)) => assert!(msg.contains("batch"), "{msg}"),
        Err(e) => panic!("unexpected error {e}"),
        Ok(_) => panic!("training with a huge learning rate should diverge"),
    }
}

#[test]
fn one_cell_sweep_equals_train() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(ModelKind::Irlc, &dir.path().join("sweep"));
    let (cells, _) = cmd_sweep(&cfg, &[cfg.entropy_weight], &[cfg.interaction_weight], None).unwrap();
    let mut train_cfg = cfg.clone();
    train_cfg.out = dir.path().join("train");
    let data = load_dataset(&cfg).unwrap();
    let r = cmd_train_on(&train_cfg, &data, &mut |_| {}).unwrap();
    assert_eq!(cells.len(), 1);
    assert_eq!(cells[0].dev_accuracy, r.dev.accuracy);
    assert_eq!(cells[0].best_epoch, r.best_epoch);
    let a = fs::read_to_string(cfg.out.join("cell_0_0/metrics.csv")).unwrap();
    let b = fs::read_to_string(train_cfg.out.join("metrics.csv")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn sweep_grid_has_one_row_per_cell() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(ModelKind::Irlc, dir.path());
    cfg.train_scenes = 20;
    cfg.dev_scenes = 10;
    let (cells, _) = cmd_sweep(&cfg, &[0.0, 0.005], &[0.0, 0.05, 0.5], Some(1)).unwrap();
    assert_eq!(cells.len(), 6);
    let csv = fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 6);
    assert!(cmd_sweep(&cfg, &[], &[0.1], Some(1)).is_err());
}

#[test]
fn synth_round_trips_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(ModelKind::Irlc, dir.path());
    cmd_synth(&cfg).unwrap();
    let disk = Dataset::read_dir(dir.path()).unwrap();
    let memory = load_dataset(&cfg).unwrap();
    assert_eq!(disk, memory);
    assert_eq!(disk.scenes.len(), 60 + 20 + 10);
    assert_eq!(disk.train.len(), 60 * cfg.synth.questions_per_scene);
    let again = tempfile::tempdir().unwrap();
    let mut c2 = cfg.clone();
    c2.out = again.path().to_path_buf();
    cmd_synth(&c2).unwrap();
    assert_eq!(
        fs::read(dir.path().join("features.bin")).unwrap(),
        fs::read(again.path().join("features.bin")).unwrap()
    );
    let mut from_disk = cfg.clone();
    from_disk.data_dir = Some(dir.path().to_path_buf());
    assert_eq!(load_dataset(&from_disk).unwrap(), memory);
}

fn write_vqa_fixture(dir: &Path, name: &str, rows: &[(u64, u64, &str, &str)]) -> (std::path::PathBuf, std::path::PathBuf) {
    let questions = VqaQuestionFile {
        data_subtype: None,
        questions: rows
            .iter()
            .map(|&(qid, img, q, _)| VqaQuestion { image_id: img, question: q.into(), question_id: qid })
            .collect(),
    };
    let annotations = VqaAnnotationFile {
        annotations: rows
            .iter()
            .map(|&(qid, img, _, a)| VqaAnnotation {
                question_id: qid,
                image_id: img,
                answers: (0..10).map(|_| VqaAnswer { answer: a.into(), answer_confidence: None, answer_id: None }).collect(),
                multiple_choice_answer: a.into(),
                answer_type: None,
                question_type: None,
            })
            .collect(),
    };
    let q = dir.join(format!("{name}_questions.json"));
    let a = dir.join(format!("{name}_annotations.json"));
    fs::write(&q, serde_json::to_string(&questions).unwrap()).unwrap();
    fs::write(&a, serde_json::to_string(&annotations).unwrap()).unwrap();
    (q, a)
}

#[test]
fn filter_is_idempotent_and_histogram_covers_input() {
    let dir = tempfile::tempdir().unwrap();
    let train = [
        (1, 10, "How many dogs are there?", "2"),
        (2, 10, "What time is it?", "3:00"),
        (3, 11, "What is the number of the bus?", "42"),
        (4, 11, "How many cats?", "lots"),
        (5, 12, "How many windows?", "25"),
        (6, 12, "How many birds are flying?", "three"),
    ];
    let val = [
        (7, 20, "How many zebras?", "4"),
        (8, 21, "How many people?", "1"),
        (9, 22, "What color is the car?", "red"),
        (10, 23, "How many kites?", "0"),
    ];
    let (tq, ta) = write_vqa_fixture(dir.path(), "train", &train);
    let (vq, va) = write_vqa_fixture(dir.path(), "val", &val);
    let inputs = FilterInputs {
        train_questions: tq,
        train_annotations: ta,
        val_questions: Some(vq),
        val_annotations: Some(va),
        test_size: Some(1),
        seed: 3,
        ..FilterInputs::default()
    };
    let a = cmd_filter(&inputs, &dir.path().join("a")).unwrap();
    let b = cmd_filter(&inputs, &dir.path().join("b")).unwrap();
    assert_eq!(a.train, 2);
    assert_eq!((a.dev, a.test), (2, 1));
    assert_eq!(a.histogram.iter().map(|(_, n)| n).sum::<usize>(), train.len() + val.len());
    for f in ["train_manifest.txt", "dev_manifest.txt", "test_manifest.txt", "filter_histogram.csv"] {
        assert_eq!(fs::read(dir.path().join("a").join(f)).unwrap(), fs::read(dir.path().join("b").join(f)).unwrap(), "{f}");
    }
    assert_eq!(a.histogram, b.histogram);
}
