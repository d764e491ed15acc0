#![allow(dead_code)]

use std::path::Path;
use std::process::{Command, Output};

use answerme::config::ProtocolSpec;
use answerme::{ProtocolKind, RunConfig};
use answerme_core::synth::FamilyKind;

/// A configuration small enough for end-to-end runs inside tests.
pub fn tiny() -> RunConfig {
    let mut c = RunConfig::compact();
    c.model.d_model = 16;
    c.model.conv_channels = vec![4, 8, 8];
    c.model.ff_dim = 32;
    c.model.text_layers = 1;
    c.model.fusion_layers = 1;
    c.model.decoder_layers = 1;
    c.data.families = vec![FamilyKind::VqaAttr, FamilyKind::Count, FamilyKind::DetectText];
    c.data.train_per_family = 24;
    c.data.eval_per_family = 12;
    c.data.caption_pairs = 24;
    c.data.corpus_samples = 30;
    c.pretrain.batch_size = 4;
    c.pretrain.steps = 3;
    c.mixture.families = vec![FamilyKind::VqaAttr, FamilyKind::Count];
    c.mixture.batch_size = 4;
    c.mixture.steps = 4;
    c.mixture.checkpoint_every = 2;
    c.protocol = ProtocolSpec {
        kind: ProtocolKind::Mixture,
        train_families: vec![FamilyKind::VqaAttr, FamilyKind::Count],
        held_out: vec![],
        batch_size: 4,
        steps_per_family: 2,
        seeds: vec![0, 1],
        ..ProtocolSpec::default()
    };
    c
}

pub fn write_config(dir: &Path, cfg: &RunConfig) -> std::path::PathBuf {
    std::fs::create_dir_all(dir).unwrap();
    let path = dir.join("run.toml");
    std::fs::write(&path, cfg.to_toml()).unwrap();
    path
}

pub fn answerme(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_answerme")).args(args).output().unwrap()
}

pub fn ok(args: &[&str]) -> String {
    let out = answerme(args);
    assert!(
        out.status.success(),
        "answerme {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

pub fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}
