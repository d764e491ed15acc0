//! Equal-share multi-task training.
//!
//! A batch of size `B` over `N` datasets holds exactly `B / N` examples of
//! each. Every dataset walks its own shuffled epochs independently, so small
//! datasets simply cycle more often.

use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::model::{AnswerMe, Prompt};
use crate::optim::{OptimizerConfig, OptimizerState};
use crate::tasks::{EncodedExample, TaskExample};
use crate::text::Vocab;
use crate::{derive_seed, seeded_rng};

/// A named dataset tokenized under one vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedDataset {
    pub name: String,
    pub vocab_fingerprint: u64,
    pub examples: Vec<EncodedExample>,
}

impl EncodedDataset {
    pub fn encode(name: &str, examples: &[TaskExample], vocab: &Vocab) -> Self {
        Self {
            name: name.into(),
            vocab_fingerprint: vocab.fingerprint(),
            examples: examples.iter().map(|e| e.encode(vocab)).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct MixtureSpec {
    pub batch_size: usize,
    pub steps: u64,
    pub seed: u64,
    /// Emit a checkpoint event every this many steps; 0 disables.
    #[serde(default)]
    pub checkpoint_every: u64,
}

/// Draws equal-share batches as `(dataset, example)` index pairs.
#[derive(Debug, Clone)]
pub struct BatchComposer {
    sizes: Vec<usize>,
    share: usize,
    seed: u64,
    orders: Vec<Vec<usize>>,
    cursors: Vec<usize>,
    epochs: Vec<u64>,
    counts: Vec<u64>,
    batches: u64,
}

impl BatchComposer {
    pub fn new(sizes: &[usize], batch_size: usize, seed: u64) -> Result<Self> {
        let n = sizes.len();
        if n == 0 || batch_size == 0 || batch_size % n != 0 {
            return Err(Error::IndivisibleBatch {
                batch: batch_size,
                datasets: n,
            });
        }
        if let Some(i) = sizes.iter().position(|&s| s == 0) {
            return Err(Error::EmptyDataset(alloc::format!("#{i}")));
        }
        let mut c = Self {
            sizes: sizes.to_vec(),
            share: batch_size / n,
            seed,
            orders: sizes.iter().map(|&s| (0..s).collect()).collect(),
            cursors: alloc::vec![0; n],
            epochs: alloc::vec![0; n],
            counts: alloc::vec![0; n],
            batches: 0,
        };
        for d in 0..n {
            c.shuffle(d);
        }
        Ok(c)
    }

    /// Composer over named datasets; names must be unique.
    pub fn for_datasets(datasets: &[EncodedDataset], batch_size: usize, seed: u64) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for d in datasets {
            if !seen.insert(d.name.as_str()) {
                return Err(Error::DuplicateDataset(d.name.clone()));
            }
            if d.examples.is_empty() {
                return Err(Error::EmptyDataset(d.name.clone()));
            }
        }
        let sizes: Vec<usize> = datasets.iter().map(|d| d.examples.len()).collect();
        Self::new(&sizes, batch_size, seed)
    }

    fn shuffle(&mut self, d: usize) {
        let mut rng = seeded_rng(derive_seed(derive_seed(self.seed, d as u64), self.epochs[d]));
        self.orders[d].sort_unstable();
        self.orders[d].shuffle(&mut rng);
    }

    pub fn share(&self) -> usize {
        self.share
    }

    pub fn next_batch(&mut self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.share * self.sizes.len());
        for d in 0..self.sizes.len() {
            for _ in 0..self.share {
                if self.cursors[d] == self.sizes[d] {
                    self.epochs[d] += 1;
                    self.cursors[d] = 0;
                    self.shuffle(d);
                }
                out.push((d, self.orders[d][self.cursors[d]]));
                self.cursors[d] += 1;
            }
            self.counts[d] += self.share as u64;
        }
        self.batches += 1;
        out
    }

    /// Examples drawn so far per dataset.
    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn batches(&self) -> u64 {
        self.batches
    }

    /// Skips ahead so a resumed run sees the same batches it would have.
    pub fn fast_forward(&mut self, batches: u64) {
        for _ in 0..batches {
            self.next_batch();
        }
    }
}

pub fn compose_batch<'a>(composer: &mut BatchComposer, datasets: &'a [EncodedDataset]) -> Vec<&'a EncodedExample> {
    composer
        .next_batch()
        .into_iter()
        .map(|(d, i)| &datasets[d].examples[i])
        .collect()
}

#[derive(Debug)]
pub enum TrainEvent<'a> {
    Step {
        step: u64,
        loss: f64,
    },
    Checkpoint {
        step: u64,
        model: &'a AnswerMe,
        optimizer: &'a OptimizerState,
    },
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainRunRecord {
    /// `(step, loss)`, steps counted from 1.
    pub losses: Vec<(u64, f64)>,
    pub checkpoints: Vec<u64>,
    /// `(dataset name, examples drawn)` in mixture order.
    pub per_task_counts: Vec<(String, u64)>,
}

/// Runs `spec.steps` total steps, starting after `start_step` already
/// completed ones (a resume fast-forwards the batch stream).
pub fn train(
    model: &mut AnswerMe,
    datasets: &[EncodedDataset],
    spec: &MixtureSpec,
    optimizer: &mut OptimizerState,
    start_step: u64,
    on_event: &mut dyn FnMut(TrainEvent<'_>) -> Result<()>,
) -> Result<TrainRunRecord> {
    for d in datasets {
        if d.vocab_fingerprint != model.vocab_fingerprint() {
            return Err(Error::VocabMismatch {
                name: d.name.clone(),
                dataset: d.vocab_fingerprint,
                model: model.vocab_fingerprint(),
            });
        }
    }
    let mut composer = BatchComposer::for_datasets(datasets, spec.batch_size, spec.seed)?;
    composer.fast_forward(start_step);
    let mut record = TrainRunRecord::default();
    for step in start_step + 1..=spec.steps {
        let batch: Vec<EncodedExample> = compose_batch(&mut composer, datasets).into_iter().cloned().collect();
        let (mut g, loss_var) = model.loss_graph(&batch)?;
        let loss = g.value(loss_var).item();
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step, loss });
        }
        let grads = g.backward(loss_var)?;
        optimizer.step(model.params_mut(), &grads)?;
        record.losses.push((step, loss));
        on_event(TrainEvent::Step { step, loss })?;
        if spec.checkpoint_every > 0 && step % spec.checkpoint_every == 0 {
            record.checkpoints.push(step);
            on_event(TrainEvent::Checkpoint {
                step,
                model,
                optimizer,
            })?;
        }
    }
    record.per_task_counts = datasets
        .iter()
        .zip(composer.counts())
        .map(|(d, &c)| (d.name.clone(), c))
        .collect();
    Ok(record)
}

/// Continues training on a single dataset with a fresh optimizer.
pub fn finetune(
    model: &mut AnswerMe,
    dataset: &EncodedDataset,
    batch_size: usize,
    steps: u64,
    seed: u64,
    optimizer: OptimizerConfig,
) -> Result<TrainRunRecord> {
    let mut state = OptimizerState::new(optimizer, model.params())?;
    let spec = MixtureSpec {
        batch_size,
        steps,
        seed,
        checkpoint_every: 0,
    };
    train(
        model,
        core::slice::from_ref(dataset),
        &spec,
        &mut state,
        0,
        &mut |_| Ok(()),
    )
}

/// Greedy answers for every example, decoded to strings.
pub fn predict(model: &AnswerMe, vocab: &Vocab, examples: &[EncodedExample], batch: usize) -> Result<Vec<String>> {
    let max_len = model.config().max_decode_len;
    let mut out = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(batch.max(1)) {
        let prompts: Vec<Prompt<'_>> = chunk
            .iter()
            .map(|e| Prompt {
                images: &e.images,
                input_ids: &e.input_ids,
            })
            .collect();
        for ids in model.generate(&prompts, max_len)? {
            out.push(vocab.decode(&ids)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_indivisible_and_empty() {
        assert_eq!(
            BatchComposer::new(&[3, 3, 3], 16, 0).unwrap_err(),
            Error::IndivisibleBatch { batch: 16, datasets: 3 }
        );
        assert!(matches!(BatchComposer::new(&[3, 0], 4, 0), Err(Error::EmptyDataset(_))));
        assert!(BatchComposer::new(&[], 4, 0).is_err());
    }

    #[test]
    fn epochs_cover_each_dataset_once() {
        let mut c = BatchComposer::new(&[5, 3], 2, 9).unwrap();
        let mut first = Vec::new();
        let mut second = Vec::new();
        for _ in 0..15 {
            for (d, i) in c.next_batch() {
                if d == 0 { first.push(i) } else { second.push(i) }
            }
        }
        for epoch in first.chunks(5) {
            let mut e = epoch.to_vec();
            e.sort();
            assert_eq!(e, [0, 1, 2, 3, 4]);
        }
        for epoch in second.chunks(3) {
            let mut e = epoch.to_vec();
            e.sort();
            assert_eq!(e, [0, 1, 2]);
        }
    }

    #[test]
    fn fast_forward_matches_replay() {
        let mut a = BatchComposer::new(&[7, 4], 4, 3).unwrap();
        let mut b = a.clone();
        for _ in 0..10 {
            a.next_batch();
        }
        b.fast_forward(10);
        assert_eq!(a.next_batch(), b.next_batch());
    }
}
