mod support;

use answerme_core::tasks::{
    make_cmp_at, make_ic, make_itm, make_mlm, make_pretrain_mixture, mlm_mask_count, CaptionPair, MlmTarget,
    PretrainTask, TaskTag, IC_PROMPT,
};
use answerme_core::{seeded_rng, Error};
use support::pretrain::{pair, random_caption};

#[test]
fn ic_uses_the_fixed_prompt() {
    let ex = make_ic(&pair("a red circle", 0));
    assert_eq!(ex.input_text, "caption the image");
    assert_eq!(ex.target_text, "a red circle");
    assert_eq!(make_ic(&pair("circle", 1)).target_text, "circle");
    let mut rng = seeded_rng(1);
    for i in 0..1000 {
        let ex = make_ic(&pair(&random_caption(&mut rng, 1, 15), i));
        assert_eq!(ex.input_text.as_bytes(), IC_PROMPT.as_bytes());
        assert_eq!(ex.tag, TaskTag::Pretrain(PretrainTask::Ic));
    }
}

#[test]
fn cmp_hand_cases() {
    let ten = pair("w0 w1 w2 w3 w4 w5 w6 w7 w8 w9", 0);
    let ex = make_cmp_at(&ten, 0.3);
    assert_eq!(ex.input_text, "w0 w1 w2");
    assert_eq!(ex.target_text, "w3 w4 w5 w6 w7 w8 w9");
    for f in [0.10, 0.25, 0.40] {
        let ex = make_cmp_at(&pair("red circle", 0), f);
        assert_eq!((ex.input_text.as_str(), ex.target_text.as_str()), ("red", "circle"));
    }
    let one = make_cmp_at(&pair("circle", 0), 0.3);
    assert_eq!(one.tag, TaskTag::Pretrain(PretrainTask::Ic));
    assert_eq!(one.target_text, "circle");
}

#[test]
fn cmp_fractions_cover_the_range() {
    support::pretrain::cmp_suite();
}

#[test]
fn mlm_hand_cases() {
    assert_eq!(mlm_mask_count(4), 1);
    assert_eq!(mlm_mask_count(1), 1);
    assert_eq!(mlm_mask_count(6), 2);
    assert_eq!(mlm_mask_count(10), 3);
    let mut rng = seeded_rng(3);
    let ex = make_mlm(&pair("circle", 0), MlmTarget::MissingWords, &mut rng);
    assert_eq!(ex.input_text, "<sent_0>");
    assert_eq!(ex.target_text, "<sent_0> circle");
    let full = make_mlm(&pair("a red circle now", 0), MlmTarget::FullCaption, &mut rng);
    assert_eq!(full.target_text, "a red circle now");
    assert_eq!(full.input_text.matches("<sent_").count(), 1);
}

#[test]
fn mlm_masks_a_quarter_and_reconstructs() {
    support::pretrain::mlm_suite();
}

#[test]
fn itm_rate_and_label_soundness() {
    support::pretrain::itm_suite();
}

#[test]
fn itm_needs_a_different_caption() {
    let mut rng = seeded_rng(6);
    let p = pair("a red circle", 0);
    let err = make_itm(&p, &["a red circle".to_string()], &mut rng).unwrap_err();
    assert_eq!(err, Error::PoolExhausted);
}

fn pairs(n: usize, seed: u64) -> Vec<CaptionPair> {
    let mut rng = seeded_rng(seed);
    (0..n).map(|i| pair(&random_caption(&mut rng, 1, 12), i as u64)).collect()
}

#[test]
fn uniform_task_draws() {
    let data = pairs(40_000, 7);
    let (examples, stats) = make_pretrain_mixture(&data, &PretrainTask::ALL, MlmTarget::MissingWords, &mut seeded_rng(8)).unwrap();
    assert_eq!(examples.len(), data.len());
    let sigma = (40_000.0f64 * 0.25 * 0.75).sqrt();
    for &count in &stats.drawn {
        assert!((count as f64 - 10_000.0).abs() <= 3.0 * sigma, "{count}");
    }
    assert_eq!(stats.drawn.iter().sum::<usize>(), data.len());
    // one-word captions under CMP fall back to the IC form
    let ic_tagged = examples.iter().filter(|e| e.tag == TaskTag::Pretrain(PretrainTask::Ic)).count();
    assert_eq!(ic_tagged, stats.drawn[PretrainTask::Ic as usize] + stats.degenerate_cmp);
}

#[test]
fn restricted_task_sets() {
    let data = pairs(2000, 9);
    let (only_itm, _) = make_pretrain_mixture(&data, &[PretrainTask::Itm], MlmTarget::MissingWords, &mut seeded_rng(1)).unwrap();
    assert!(only_itm.iter().all(|e| e.tag == TaskTag::Pretrain(PretrainTask::Itm)));

    let no_mlm = [PretrainTask::Ic, PretrainTask::Cmp, PretrainTask::Itm];
    let (examples, stats) = make_pretrain_mixture(&data, &no_mlm, MlmTarget::MissingWords, &mut seeded_rng(2)).unwrap();
    assert_eq!(stats.drawn[PretrainTask::Mlm as usize], 0);
    assert!(examples.iter().all(|e| !e.input_text.contains("<sent_") && !e.target_text.contains("<sent_")));

    assert_eq!(
        make_pretrain_mixture(&data, &[], MlmTarget::MissingWords, &mut seeded_rng(3)).unwrap_err(),
        Error::NoTasksEnabled
    );
}

#[test]
fn streams_are_pure_functions_of_the_seed() {
    let data = pairs(500, 10);
    let run = |seed| make_pretrain_mixture(&data, &PretrainTask::ALL, MlmTarget::MissingWords, &mut seeded_rng(seed)).unwrap();
    assert_eq!(run(11), run(11));
    assert_ne!(run(11).0, run(12).0);
}
