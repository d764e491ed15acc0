//! Training sanity checks on the default model config.

use std::collections::BTreeSet;

use answerme_core::mixture::predict;
use answerme_core::model::{AnswerMe, FusionKind, ModelConfig};
use answerme_core::optim::{OptimizerConfig, OptimizerState};
use answerme_core::synth::{build_dataset, reference_corpus, FamilyKind, SceneSpec, SceneUniverse};
use answerme_core::tasks::EncodedExample;
use answerme_core::text::{build_vocab, Vocab};

pub fn vocab() -> Vocab {
    let u = SceneUniverse::new(SceneSpec::default(), 1, 1 << 30).unwrap();
    let corpus = reference_corpus(&u, 50, 1).unwrap();
    build_vocab(corpus.iter().map(String::as_str), 512).unwrap()
}

pub fn examples(family: FamilyKind, n: usize, v: &Vocab) -> Vec<EncodedExample> {
    let u = SceneUniverse::new(SceneSpec::default(), 2, 1 << 30).unwrap();
    let d = build_dataset(&u, family, n, 3, &BTreeSet::new()).unwrap();
    d.examples.iter().map(|e| e.encode(v)).collect()
}

pub fn model(fusion_kind: FusionKind, seed: u64) -> AnswerMe {
    let config = ModelConfig { fusion_kind, ..ModelConfig::default() };
    AnswerMe::new(config, 0, seed).unwrap()
}

/// Loss of fresh models against ln|V| for three seeds.
pub fn untrained_loss() -> String {
    let v = vocab();
    let batch = examples(FamilyKind::Caption, 8, &v);
    let mut losses = Vec::new();
    for seed in 0..3 {
        let loss = model(FusionKind::ConcatEncoder, seed).forward_loss(&batch).unwrap();
        assert!((loss - 512f64.ln()).abs() < 0.5, "seed {seed}: {loss}");
        losses.push(format!("{loss:.3}"));
    }
    format!("losses [{}] vs ln 512 = {:.3}", losses.join(", "), 512f64.ln())
}

fn overfit(seed: u64, steps: usize, batch: &[EncodedExample]) -> (AnswerMe, Vec<f64>) {
    let mut m = model(FusionKind::ConcatEncoder, seed);
    let mut opt = OptimizerState::new(OptimizerConfig::adam(1e-3), m.params()).unwrap();
    let mut losses = Vec::with_capacity(steps);
    for _ in 0..steps {
        let (mut g, loss) = m.loss_graph(batch).unwrap();
        losses.push(g.value(loss).item());
        if losses.last().unwrap() < &0.05 {
            break;
        }
        let grads = g.backward(loss).unwrap();
        opt.step(m.params_mut(), &grads).unwrap();
    }
    (m, losses)
}

/// Four examples memorized within 500 Adam steps.
pub fn overfit_one_batch() -> String {
    let v = vocab();
    let batch = examples(FamilyKind::Compositional, 4, &v);
    let (m, losses) = overfit(8, 500, &batch);
    let last = *losses.last().unwrap();
    assert!(last < 0.05, "loss {last} after {} steps", losses.len());

    // windowed means fall across the first 200 steps
    let windows: Vec<f64> = losses[..200.min(losses.len())]
        .chunks(20)
        .map(|w| w.iter().sum::<f64>() / w.len() as f64)
        .collect();
    assert!(windows.windows(2).all(|w| w[1] < w[0]), "{windows:?}");

    let golds: Vec<String> = batch.iter().map(|e| v.decode(&e.target_ids).unwrap()).collect();
    assert_eq!(predict(&m, &v, &batch, 4).unwrap(), golds);
    format!("loss {last:.4} after {} steps", losses.len())
}

pub fn deterministic_curves() -> String {
    let v = vocab();
    let batch = examples(FamilyKind::VqaAttr, 4, &v);
    let (_, a) = overfit(9, 15, &batch);
    let (_, b) = overfit(9, 15, &batch);
    let (_, c) = overfit(10, 15, &batch);
    let bits = |l: &[f64]| l.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
    assert_ne!(bits(&a), bits(&c));
    "identical bits for equal seeds".to_string()
}
