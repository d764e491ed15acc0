mod common;

use std::fs;
use std::path::Path;

use answerme::report::MetricReport;
use answerme::runlog::{read_loss_log, DirLock};
use common::{answerme, ok, stderr, tiny, write_config};

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn listing(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().into_string().unwrap(), fs::read(e.path()).unwrap())
        })
        .collect();
    v.sort();
    v
}

#[test]
fn gendata_is_byte_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &tiny());
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let msg = ok(&["gendata", "--config", s(&cfg), "--out", s(&a)]);
    assert!(msg.contains("3 train and 3 eval splits"), "{msg}");
    ok(&["gendata", "--config", s(&cfg), "--out", s(&b)]);
    assert_eq!(listing(&a), listing(&b));
    // rerunning into the same directory is a no-op
    ok(&["gendata", "--config", s(&cfg), "--out", s(&a)]);

    let m: serde_json::Value = serde_json::from_slice(&fs::read(a.join("count_eval.json")).unwrap()).unwrap();
    assert_eq!(m["count"], 12);
    let m: serde_json::Value = serde_json::from_slice(&fs::read(a.join("captions_train.json")).unwrap()).unwrap();
    assert_eq!(m["count"], 24);
    let audit: Vec<serde_json::Value> = serde_json::from_slice(&fs::read(a.join("audit.json")).unwrap()).unwrap();
    assert_eq!(audit.len(), 3 * 4);
    assert!(audit.iter().all(|x| x["overlap"] == 0));
    assert!(!a.join(DirLock::FILE).exists());
}

#[test]
fn missing_files_name_the_path() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nowhere");
    let out = answerme(&["train", "--data", s(&missing), "--out", s(&tmp.path().join("o"))]);
    assert_eq!(out.status.code(), Some(5));
    assert!(stderr(&out).contains(s(&missing.join("vocab.txt"))), "{}", stderr(&out));

    let out = answerme(&["gendata", "--config", s(&tmp.path().join("no.toml")), "--out", s(tmp.path())]);
    assert_eq!(out.status.code(), Some(5));
    assert!(stderr(&out).contains("no.toml"));
}

#[test]
fn usage_and_config_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let out = answerme(&["eval", "--protocol", "bogus", "--out", s(tmp.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("zero_shot"), "{}", stderr(&out));

    let bad = tmp.path().join("bad.toml");
    fs::write(&bad, "[model]\nd_modle = 8\n").unwrap();
    let out = answerme(&["gendata", "--config", s(&bad), "--out", s(&tmp.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("d_modle"), "{}", stderr(&out));

    let data = tmp.path().join("data");
    ok(&["gendata", "--config", s(&write_config(tmp.path(), &tiny())), "--out", s(&data)]);
    let out = answerme(&[
        "finetune", "--data", s(&data), "--init", s(&data), "--family", "juggling", "--out", s(&tmp.path().join("f")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("vqa_attr"));
}

#[test]
fn locked_directories_are_refused() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("run");
    fs::create_dir_all(&out_dir).unwrap();
    fs::write(out_dir.join(DirLock::FILE), "1\n").unwrap();
    let cfg = write_config(tmp.path(), &tiny());
    let out = answerme(&["gendata", "--config", s(&cfg), "--out", s(&out_dir)]);
    assert_eq!(out.status.code(), Some(5));
    assert!(stderr(&out).contains("locked"));
    assert_eq!(fs::read_dir(&out_dir).unwrap().count(), 1);
}

#[test]
fn resumed_training_matches_a_straight_run() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &tiny());
    let data = tmp.path().join("data");
    ok(&["gendata", "--config", s(&cfg), "--out", s(&data)]);

    let straight = tmp.path().join("straight");
    let msg = ok(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&straight)]);
    assert!(msg.contains("steps 1..=4"), "{msg}");
    for f in ["step-2.ckpt", "step-4.ckpt", "final.ckpt", "summary.json", "config.hash"] {
        assert!(straight.join(f).exists(), "{f}");
    }

    let resumed = tmp.path().join("resumed");
    let ckpt = straight.join("step-2.ckpt");
    let msg = ok(&["train", "--config", s(&cfg), "--data", s(&data), "--resume", s(&ckpt), "--out", s(&resumed)]);
    assert!(msg.contains("steps 3..=4"), "{msg}");
    assert_eq!(fs::read(resumed.join("final.ckpt")).unwrap(), fs::read(straight.join("final.ckpt")).unwrap());
    let full = read_loss_log(&straight.join("loss.jsonl")).unwrap();
    let tail = read_loss_log(&resumed.join("loss.jsonl")).unwrap();
    assert_eq!(full.len(), 4);
    assert_eq!(tail, full[2..]);
    assert!(resumed.join("summary-from-2.json").exists());

    // resuming requires optimizer state and a matching model
    let mut other = tiny();
    other.model.ff_dim = 48;
    let other = write_config(&tmp.path().join("other"), &other);
    let out = answerme(&["train", "--config", s(&other), "--data", s(&data), "--resume", s(&ckpt), "--out", s(&tmp.path().join("x"))]);
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));

    // checkpoint evaluation over every eval split
    let eval = tmp.path().join("eval");
    let ckpt = straight.join("final.ckpt");
    ok(&["eval", "--config", s(&cfg), "--data", s(&data), "--checkpoint", s(&ckpt), "--out", s(&eval)]);
    let report = MetricReport::from_json(Path::new("r"), &fs::read_to_string(eval.join("report.json")).unwrap()).unwrap();
    assert_eq!(report.experiment, "checkpoint_eval");
    assert_eq!(report.rows.len(), 3);
    report.check_bounds().unwrap();
    ok(&["score", "--run", s(&eval)]);

    let tuned = tmp.path().join("tuned");
    let msg = ok(&[
        "finetune", "--config", s(&cfg), "--data", s(&data), "--init", s(&ckpt), "--family", "count", "--steps", "2",
        "--out", s(&tuned),
    ]);
    assert!(msg.contains("steps 1..=2"), "{msg}");
}

#[test]
fn protocol_reports_are_reproducible_and_rescorable() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &tiny());
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&["eval", "--config", s(&cfg), "--out", s(&a)]);
    ok(&["eval", "--config", s(&cfg), "--out", s(&b)]);
    let report_a = fs::read(a.join("report.json")).unwrap();
    assert_eq!(report_a, fs::read(b.join("report.json")).unwrap());
    assert_eq!(listing(&a.join("predictions")), listing(&b.join("predictions")));
    assert!(a.join("timing.json").exists());

    let report = MetricReport::from_json(Path::new("r"), std::str::from_utf8(&report_a).unwrap()).unwrap();
    // mixture plus one single-task run per family, two seeds, two families
    assert_eq!(report.rows.len(), 2 * 2 * 2);
    assert_eq!(report.configs(), ["mixture", "single"]);
    assert!(report.audits.iter().all(|x| x.overlap == 0));
    assert_eq!(report.param_counts.keys().collect::<Vec<_>>(), ["mixture", "single"]);

    let msg = ok(&["score", "--run", s(&a)]);
    assert!(msg.contains("8 rows reproduced"), "{msg}");

    let dump = fs::read_dir(a.join("predictions")).unwrap().next().unwrap().unwrap().path();
    let text = fs::read_to_string(&dump).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    // flip one record between right and wrong
    let last = lines.last_mut().unwrap();
    let fields: Vec<&str> = last.split('\t').collect();
    let pred = if fields[2] == fields[1] { "zzz" } else { fields[1] };
    *last = format!("{}\t{}\t{pred}", fields[0], fields[1]);
    let tampered = lines.join("\n") + "\n";
    fs::write(&dump, tampered).unwrap();
    let out = answerme(&["score", "--run", s(&a)]);
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
    assert!(stderr(&out).contains("do not reproduce"));
}
