mod support;

use std::collections::BTreeSet;

use answerme_core::mixture::{compose_batch, finetune, train, BatchComposer, EncodedDataset, MixtureSpec, TrainEvent};
use answerme_core::model::{AnswerMe, ModelConfig};
use answerme_core::optim::{OptimizerConfig, OptimizerState};
use answerme_core::synth::{build_dataset, reference_corpus, FamilyKind, SceneSpec, SceneUniverse};
use answerme_core::text::{build_vocab, Vocab};
use answerme_core::Error;
use proptest::prelude::*;

#[test]
fn equal_share_over_a_thousand_batches() {
    support::share::equal_share(&[1, 2, 4, 8], 1000);
}

proptest! {
    #[test]
    fn share_is_exact_for_any_divisible_batch(
        sizes in prop::collection::vec(1usize..40, 1..6),
        mult in 1usize..5,
        seed in any::<u64>(),
    ) {
        let n = sizes.len();
        let mut c = BatchComposer::new(&sizes, n * mult, seed).unwrap();
        for _ in 0..50 {
            let batch = c.next_batch();
            for d in 0..n {
                prop_assert_eq!(batch.iter().filter(|(k, _)| *k == d).count(), mult);
            }
        }
        let max = c.counts().iter().max().unwrap();
        let min = c.counts().iter().min().unwrap();
        prop_assert!(max - min <= mult as u64);
    }

    #[test]
    fn indivisible_batches_are_rejected(n in 2usize..7, b in 1usize..50) {
        prop_assume!(b % n != 0);
        prop_assert_eq!(
            BatchComposer::new(&vec![4; n], b, 0).unwrap_err(),
            Error::IndivisibleBatch { batch: b, datasets: n }
        );
    }
}

fn spec() -> SceneSpec {
    SceneSpec { image_height: 16, image_width: 16, ..SceneSpec::default() }
}

fn setup() -> (Vocab, Vec<EncodedDataset>, AnswerMe) {
    let u = SceneUniverse::new(spec(), 4, 1 << 30).unwrap();
    let corpus = reference_corpus(&u, 20, 4).unwrap();
    let vocab = build_vocab(corpus.iter().map(String::as_str), 512).unwrap();
    let datasets: Vec<EncodedDataset> = [FamilyKind::Count, FamilyKind::MatchYesno]
        .into_iter()
        .map(|f| {
            let d = build_dataset(&u, f, 10, 1, &BTreeSet::new()).unwrap();
            EncodedDataset::encode(f.name(), &d.examples, &vocab)
        })
        .collect();
    let config = ModelConfig {
        d_model: 16,
        image_height: 16,
        image_width: 16,
        conv_channels: vec![4, 8, 8],
        text_heads: 2,
        fusion_heads: 2,
        decoder_heads: 2,
        text_layers: 1,
        fusion_layers: 1,
        decoder_layers: 1,
        ff_dim: 32,
        vocab_size: vocab.len(),
        ..ModelConfig::default()
    };
    let model = AnswerMe::new(config, vocab.fingerprint(), 1).unwrap();
    (vocab, datasets, model)
}

#[test]
fn training_emits_counts_losses_and_checkpoints() {
    let (_, datasets, mut model) = setup();
    let mut opt = OptimizerState::new(OptimizerConfig::adam(1e-3), model.params()).unwrap();
    let spec = MixtureSpec { batch_size: 4, steps: 6, seed: 2, checkpoint_every: 2 };
    let mut seen = Vec::new();
    let record = train(&mut model, &datasets, &spec, &mut opt, 0, &mut |e| {
        if let TrainEvent::Checkpoint { step, optimizer, .. } = e {
            seen.push((step, optimizer.step_count));
        }
        Ok(())
    })
    .unwrap();
    assert_eq!(record.losses.iter().map(|l| l.0).collect::<Vec<_>>(), [1, 2, 3, 4, 5, 6]);
    assert_eq!(record.checkpoints, [2, 4, 6]);
    assert_eq!(seen, [(2, 2), (4, 4), (6, 6)]);
    assert_eq!(record.per_task_counts, [("count".to_string(), 12), ("match_yesno".to_string(), 12)]);
}

#[test]
fn resume_reproduces_an_uninterrupted_run() {
    let (_, datasets, model) = setup();
    let spec = MixtureSpec { batch_size: 4, steps: 6, seed: 3, checkpoint_every: 3 };
    let fresh = |m: &AnswerMe| OptimizerState::new(OptimizerConfig::adam(1e-3), m.params()).unwrap();

    let mut straight = model.clone();
    let mut opt = fresh(&straight);
    let mut snapshot = None;
    let full = train(&mut straight, &datasets, &spec, &mut opt, 0, &mut |e| {
        if let TrainEvent::Checkpoint { step: 3, model, optimizer } = e {
            snapshot = Some((model.clone(), optimizer.clone()));
        }
        Ok(())
    })
    .unwrap();

    let (mut resumed, mut opt) = snapshot.unwrap();
    let tail = train(&mut resumed, &datasets, &spec, &mut opt, 3, &mut |_| Ok(())).unwrap();
    assert_eq!(resumed.params(), straight.params());
    assert_eq!(tail.losses, full.losses[3..]);
}

#[test]
fn mixture_preconditions() {
    let (_, mut datasets, mut model) = setup();
    let mut opt = OptimizerState::new(OptimizerConfig::adam(1e-3), model.params()).unwrap();
    let spec = MixtureSpec { batch_size: 3, steps: 1, seed: 0, checkpoint_every: 0 };
    assert!(matches!(
        train(&mut model, &datasets, &spec, &mut opt, 0, &mut |_| Ok(())),
        Err(Error::IndivisibleBatch { .. })
    ));
    let spec = MixtureSpec { batch_size: 4, ..spec };
    let mut dup = datasets.clone();
    dup[1].name = "count".into();
    assert_eq!(
        train(&mut model, &dup, &spec, &mut opt, 0, &mut |_| Ok(())).unwrap_err(),
        Error::DuplicateDataset("count".into())
    );
    datasets[0].vocab_fingerprint ^= 1;
    assert!(matches!(
        train(&mut model, &datasets, &spec, &mut opt, 0, &mut |_| Ok(())),
        Err(Error::VocabMismatch { .. })
    ));
}

#[test]
fn non_finite_loss_stops_training() {
    let (_, datasets, mut model) = setup();
    let id = model.params().id("decoder.out.b").unwrap();
    model.params_mut().get_mut(id).data_mut()[0] = f64::NAN;
    let mut opt = OptimizerState::new(OptimizerConfig::adam(1e-3), model.params()).unwrap();
    let spec = MixtureSpec { batch_size: 2, steps: 3, seed: 0, checkpoint_every: 0 };
    let err = train(&mut model, &datasets, &spec, &mut opt, 0, &mut |_| Ok(())).unwrap_err();
    assert!(matches!(err, Error::NonFiniteLoss { step: 1, .. }));
}

#[test]
fn finetuning_touches_only_what_it_trains() {
    let (_, datasets, model) = setup();
    let mut same = model.clone();
    finetune(&mut same, &datasets[0], 2, 0, 0, OptimizerConfig::adam(1e-3)).unwrap();
    assert_eq!(same.params(), model.params());

    let mut tuned = model.clone();
    let record = finetune(&mut tuned, &datasets[1], 2, 3, 0, OptimizerConfig::adam(1e-3)).unwrap();
    assert_eq!(record.per_task_counts, [("match_yesno".to_string(), 6)]);
    assert_ne!(tuned.params(), model.params());
}

#[test]
fn composed_batches_follow_the_composer() {
    let (_, datasets, _) = setup();
    let mut a = BatchComposer::for_datasets(&datasets, 4, 5).unwrap();
    let mut b = a.clone();
    let refs = compose_batch(&mut a, &datasets);
    let idx = b.next_batch();
    for (r, (d, i)) in refs.iter().zip(idx) {
        assert_eq!(**r, datasets[d].examples[i]);
    }
}
