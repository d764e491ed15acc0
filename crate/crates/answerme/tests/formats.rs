mod common;

use answerme::formats::records::{self, Manifest};
use answerme::formats::{checkpoint, load_vocab, vocab_from_text, vocab_to_text, write_once};
use answerme::report::{median, PredictionDump, Scoring};
use answerme::{AppError, ErrorClass, Workbench};
use answerme_core::optim::{OptimizerConfig, OptimizerState};
use answerme_core::synth::FamilyKind;
use std::path::Path;

fn bench() -> Workbench {
    Workbench::new(&common::tiny()).unwrap()
}

#[test]
fn checkpoints_round_trip_with_and_without_optimizer() {
    let b = bench();
    let model = b.fresh_model(&b.config.model, 3).unwrap();
    let mut opt = OptimizerState::new(OptimizerConfig::adam(1e-3), model.params()).unwrap();
    opt.step_count = 7;
    opt.first_moment[0][0] = 0.25;
    opt.second_moment[1][0] = 0.5;
    let path = Path::new("mem.ckpt");
    let expect = Some((&b.config.model, b.vocab.fingerprint()));

    let bytes = checkpoint::encode(&model, Some(&opt), 11);
    let back = checkpoint::decode(path, &bytes, expect).unwrap();
    assert_eq!(back.step, 11);
    assert_eq!(back.model.params(), model.params());
    assert_eq!(back.model.config(), model.config());
    assert_eq!(back.optimizer.unwrap(), opt);
    assert_eq!(checkpoint::encode(&back.model, Some(&opt), 11), bytes);

    let bare = checkpoint::encode(&model, None, 0);
    let back = checkpoint::decode(path, &bare, None).unwrap();
    assert!(back.optimizer.is_none());
    assert_eq!(back.model.params(), model.params());
    assert_ne!(checkpoint::checkpoint_id(&bare), checkpoint::checkpoint_id(&bytes));
}

#[test]
fn checkpoint_mismatches_and_corruption_are_reported() {
    let b = bench();
    let model = b.fresh_model(&b.config.model, 0).unwrap();
    let bytes = checkpoint::encode(&model, None, 0);
    let path = Path::new("x.ckpt");

    let mut other = b.config.model.clone();
    other.ff_dim += 1;
    let err = checkpoint::decode(path, &bytes, Some((&other, b.vocab.fingerprint()))).unwrap_err();
    assert!(matches!(err, AppError::Mismatch { .. }), "{err}");
    let err = checkpoint::decode(path, &bytes, Some((&b.config.model, b.vocab.fingerprint() ^ 1))).unwrap_err();
    assert!(matches!(err, AppError::Mismatch { .. }), "{err}");

    for cut in [0, 5, 40, bytes.len() - 1] {
        let err = checkpoint::decode(path, &bytes[..cut], None).unwrap_err();
        assert!(matches!(err, AppError::Format { .. }), "cut {cut}: {err}");
        assert_eq!(err.class(), ErrorClass::Data);
        assert!(err.to_string().contains("x.ckpt"));
    }
    let mut long = bytes.clone();
    long.push(0);
    assert!(matches!(checkpoint::decode(path, &long, None), Err(AppError::Format { .. })));
    let mut bad = bytes;
    bad[0] = b'Z';
    assert!(matches!(checkpoint::decode(path, &bad, None), Err(AppError::Format { .. })));
}

#[test]
fn records_round_trip_and_check_their_manifest() {
    let b = bench();
    let splits = b.splits(&[FamilyKind::NlvrPair], &[], 0, 4).unwrap();
    let set = &splits.train[&FamilyKind::NlvrPair];
    let bytes = records::encode(&set.examples);
    assert_eq!(records::decode(Path::new("r.bin"), &bytes).unwrap(), set.examples);

    let dir = tempfile::tempdir().unwrap();
    let manifest = Manifest {
        family: "nlvr_pair".into(),
        split: "train".into(),
        seed: set.seed,
        count: set.len(),
        scene_ids: set.scene_ids.clone(),
        file: "nlvr_pair_train.bin".into(),
    };
    records::write_split(dir.path(), "nlvr_pair_train", &manifest, &set.examples).unwrap();
    let (m, examples) = records::read_split(dir.path(), "nlvr_pair_train").unwrap();
    assert_eq!((m, examples), (manifest.clone(), set.examples.clone()));

    let wrong = Manifest { count: manifest.count + 1, file: "bad.bin".into(), ..manifest };
    records::write_split(dir.path(), "bad", &wrong, &set.examples).unwrap();
    assert!(matches!(records::read_split(dir.path(), "bad"), Err(AppError::Format { .. })));
}

#[test]
fn write_once_is_idempotent_but_never_overwrites() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a/b.txt");
    write_once(&path, b"one").unwrap();
    write_once(&path, b"one").unwrap();
    let err = write_once(&path, b"two").unwrap_err();
    assert!(matches!(err, AppError::Overwrite { .. }));
    assert_eq!(err.class(), ErrorClass::Io);
    assert_eq!(std::fs::read(&path).unwrap(), b"one");
}

#[test]
fn vocab_text_round_trips() {
    let b = bench();
    let text = vocab_to_text(&b.vocab);
    assert_eq!(text.lines().count(), b.vocab.len());
    let back = vocab_from_text(Path::new("v.txt"), &text).unwrap();
    assert_eq!(back.tokens(), b.vocab.tokens());
    assert_eq!(back.fingerprint(), b.vocab.fingerprint());
    assert!(matches!(vocab_from_text(Path::new("v.txt"), "a\na\n"), Err(AppError::Format { .. })));
    let err = load_vocab(Path::new("/nonexistent/vocab.txt")).unwrap_err();
    assert_eq!(err.class(), ErrorClass::Io);
    assert!(err.to_string().contains("/nonexistent/vocab.txt"));
}

#[test]
fn prediction_dumps_round_trip() {
    let dump = PredictionDump {
        config: "mixture_8".into(),
        seed: 2,
        dataset: "detect_text".into(),
        scoring: Scoring::Detection,
        checkpoint: "0123abcd".into(),
        lines: vec![
            ("detect_text/0".into(), "circle star".into(), "circle".into()),
            ("detect_text/1".into(), "square".into(), "".into()),
        ],
    };
    let back = PredictionDump::from_tsv(Path::new("d.tsv"), &dump.to_tsv()).unwrap();
    assert_eq!(back, dump);
    let s = back.score().unwrap();
    // per-example mean: (1, 0.5, 2/3) and (0, 0, 0)
    assert_eq!(s.values(), vec![0.5, 0.25, 1.0 / 3.0]);
    assert!(PredictionDump::from_tsv(Path::new("d.tsv"), "# seed=1\nno tabs here\n").is_err());
}

#[test]
fn medians() {
    assert_eq!(median(vec![]), None);
    assert_eq!(median(vec![0.3]), Some(0.3));
    assert_eq!(median(vec![0.9, 0.1, 0.5]), Some(0.5));
    assert_eq!(median(vec![0.4, 0.1, 0.2, 0.9]), Some(0.30000000000000004));
}
