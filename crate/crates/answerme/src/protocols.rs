//! Experiment protocols. Each one builds its own data per seed, trains the
//! configurations it compares and scores them with greedy generation over
//! the full vocabulary.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use answerme_core::mixture::{finetune, predict, train, EncodedDataset, MixtureSpec, TrainRunRecord};
use answerme_core::model::{AnswerMe, FusionKind, ModelConfig};
use answerme_core::optim::OptimizerState;
use answerme_core::synth::{build_caption_pairs, build_dataset, reference_corpus, Dataset, FamilyKind, SceneUniverse};
use answerme_core::tasks::{make_pretrain_mixture, CaptionPair, PretrainTask, TaskExample};
use answerme_core::text::{build_vocab, Vocab};
use answerme_core::{derive_seed, seeded_rng};

use crate::config::{ProtocolKind, ProtocolSpec, RunConfig};
use crate::error::{AppError, Result};
use crate::formats::checkpoint;
use crate::report::{Audit, MetricReport, PredictionDump, ProtocolOutput, Scoring};

// seed streams, so each use of a protocol seed draws independently
pub(crate) const EVAL_STREAM: u64 = 0xE7A1;
pub(crate) const TRAIN_STREAM: u64 = 0x7EA1;
pub(crate) const CAPTION_STREAM: u64 = 0xCA97;
pub(crate) const INIT_STREAM: u64 = 0x1417;
pub(crate) const BATCH_STREAM: u64 = 0xBA7C;
pub(crate) const PRETRAIN_STREAM: u64 = 0x94E7;

/// Resolved config plus the scene universe and vocabulary derived from it.
#[derive(Debug, Clone)]
pub struct Workbench {
    pub config: RunConfig,
    pub universe: SceneUniverse,
    pub vocab: Vocab,
    /// Print one line per training run and evaluation to stderr.
    pub verbose: bool,
}

/// Train and eval sets of one seed, with every training scene disjoint from
/// every eval scene.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: BTreeMap<FamilyKind, Dataset>,
    pub eval: BTreeMap<FamilyKind, Dataset>,
    pub captions: Vec<CaptionPair>,
    pub caption_ids: BTreeSet<u64>,
}

impl Splits {
    pub fn eval_ids(&self) -> BTreeSet<u64> {
        self.eval.values().flat_map(|d| d.scene_ids.iter().copied()).collect()
    }

    /// Recounts overlaps from the examples themselves (not the recorded id
    /// sets) and fails on any shared scene.
    pub fn audit(&self, seed: u64) -> Result<Vec<Audit>> {
        let mut train_sets: Vec<(String, BTreeSet<u64>)> = self
            .train
            .iter()
            .map(|(f, d)| (f.name().to_string(), example_ids(&d.examples)))
            .collect();
        if !self.captions.is_empty() {
            train_sets.push(("captions".into(), self.captions.iter().map(|p| p.image_id).collect()));
        }
        let mut audits = Vec::new();
        for (eval_name, eval) in &self.eval {
            let eval_ids = example_ids(&eval.examples);
            for (train_name, ids) in &train_sets {
                let overlap = ids.intersection(&eval_ids).count();
                if overlap > 0 {
                    return Err(AppError::Audit {
                        train: train_name.clone(),
                        eval: eval_name.name().into(),
                        overlap,
                    });
                }
                audits.push(Audit {
                    seed,
                    train: train_name.clone(),
                    eval: eval_name.name().into(),
                    overlap,
                });
            }
        }
        Ok(audits)
    }
}

fn example_ids(examples: &[TaskExample]) -> BTreeSet<u64> {
    examples.iter().flat_map(|e| e.image_ids.iter().copied()).collect()
}

impl Workbench {
    pub fn new(config: &RunConfig) -> Result<Self> {
        config.validate()?;
        let d = &config.data;
        let universe = SceneUniverse::new(d.scene, d.universe_seed, d.universe_size)?;
        let corpus = reference_corpus(&universe, d.corpus_samples, d.universe_seed)?;
        let vocab = build_vocab(corpus.iter().map(String::as_str), d.vocab_max_size)?;
        Self::with_vocab(config, vocab)
    }

    /// Uses a vocabulary loaded from disk instead of rebuilding it.
    pub fn with_vocab(config: &RunConfig, vocab: Vocab) -> Result<Self> {
        let d = &config.data;
        let universe = SceneUniverse::new(d.scene, d.universe_seed, d.universe_size)?;
        let config = config.clone().resolve(vocab.len())?;
        Ok(Self {
            config,
            universe,
            vocab,
            verbose: false,
        })
    }

    pub fn config_hash(&self) -> String {
        self.config.hash()
    }

    fn note(&self, msg: impl FnOnce() -> String) {
        if self.verbose {
            eprintln!("  {}", msg());
        }
    }

    /// Eval sets first, then training sets and caption pairs drawn from the
    /// remaining scenes.
    pub fn splits(&self, train: &[FamilyKind], eval: &[FamilyKind], captions: usize, seed: u64) -> Result<Splits> {
        let d = &self.config.data;
        let mut eval_sets = BTreeMap::new();
        for &f in eval {
            eval_sets.insert(
                f,
                build_dataset(&self.universe, f, d.eval_per_family, derive_seed(seed, EVAL_STREAM), &BTreeSet::new())?,
            );
        }
        let excluded: BTreeSet<u64> = eval_sets.values().flat_map(|s| s.scene_ids.iter().copied()).collect();
        let mut train_sets = BTreeMap::new();
        for &f in train {
            train_sets.insert(
                f,
                build_dataset(&self.universe, f, d.train_per_family, derive_seed(seed, TRAIN_STREAM), &excluded)?,
            );
        }
        let (captions, caption_ids) = if captions > 0 {
            build_caption_pairs(&self.universe, captions, derive_seed(seed, CAPTION_STREAM), &excluded)?
        } else {
            (Vec::new(), BTreeSet::new())
        };
        Ok(Splits {
            train: train_sets,
            eval: eval_sets,
            captions,
            caption_ids,
        })
    }

    pub fn fresh_model(&self, model: &ModelConfig, seed: u64) -> Result<AnswerMe> {
        Ok(AnswerMe::new(model.clone(), self.vocab.fingerprint(), derive_seed(seed, INIT_STREAM))?)
    }

    /// Trains `model` on an equal-share mixture of `sets` with a fresh
    /// optimizer.
    pub fn fit(
        &self,
        model: &mut AnswerMe,
        sets: &[(&str, &[TaskExample])],
        batch_size: usize,
        steps: u64,
        seed: u64,
    ) -> Result<TrainRunRecord> {
        let datasets: Vec<EncodedDataset> = sets
            .iter()
            .map(|(name, ex)| EncodedDataset::encode(name, ex, &self.vocab))
            .collect();
        let spec = MixtureSpec {
            batch_size,
            steps,
            seed: derive_seed(seed, BATCH_STREAM),
            checkpoint_every: 0,
        };
        let mut opt = OptimizerState::new(self.config.optimizer, model.params())?;
        let started = Instant::now();
        let record = train(model, &datasets, &spec, &mut opt, 0, &mut |_| Ok(()))?;
        self.note(|| {
            let names: Vec<&str> = sets.iter().map(|s| s.0).collect();
            format!(
                "trained [{}] {steps} steps, final loss {:.4} ({:.0}s)",
                names.join(","),
                record.losses.last().map_or(f64::NAN, |l| l.1),
                started.elapsed().as_secs_f64()
            )
        });
        Ok(record)
    }

    /// Pretrains on one task per caption pair, drawn from `tasks`.
    pub fn pretrain(
        &self,
        model: &mut AnswerMe,
        captions: &[CaptionPair],
        tasks: &[PretrainTask],
        steps: u64,
        seed: u64,
    ) -> Result<TrainRunRecord> {
        let mut rng = seeded_rng(derive_seed(seed, PRETRAIN_STREAM));
        let (examples, _) = make_pretrain_mixture(captions, tasks, self.config.pretrain.mlm_target, &mut rng)?;
        self.fit(model, &[("pretrain", &examples)], self.config.pretrain.batch_size, steps, seed)
    }

    /// Greedy predictions on an eval set, as a dump ready for scoring.
    pub fn evaluate(&self, model: &AnswerMe, config: &str, seed: u64, eval: &Dataset) -> Result<PredictionDump> {
        let encoded = EncodedDataset::encode(eval.family.name(), &eval.examples, &self.vocab);
        let preds = predict(model, &self.vocab, &encoded.examples, 64)?;
        let lines = eval
            .examples
            .iter()
            .zip(preds)
            .enumerate()
            .map(|(i, (ex, p))| {
                let ids: Vec<String> = ex.image_ids.iter().map(u64::to_string).collect();
                (format!("{i}:{}", ids.join("+")), ex.target_text.clone(), p)
            })
            .collect();
        let scoring = if eval.family == FamilyKind::DetectText {
            Scoring::Detection
        } else {
            Scoring::ExactMatch
        };
        let dump = PredictionDump {
            config: config.into(),
            seed,
            dataset: eval.family.name().into(),
            scoring,
            checkpoint: checkpoint::checkpoint_id(&checkpoint::encode(model, None, 0)),
            lines,
        };
        self.note(|| format!("{config} seed {seed} on {}: {:.3}", eval.family, dump.score().map_or(f64::NAN, |m| m.headline())));
        Ok(dump)
    }
}

/// Collects rows, baselines and dumps while a protocol runs.
pub(crate) struct Collector {
    report: MetricReport,
    dumps: Vec<PredictionDump>,
}

impl Collector {
    pub(crate) fn new(report: MetricReport) -> Self {
        Self {
            report,
            dumps: Vec::new(),
        }
    }

    pub(crate) fn eval(&mut self, bench: &Workbench, model: &AnswerMe, config: &str, seed: u64, sets: &[&Dataset]) -> Result<()> {
        for set in sets {
            let dump = bench.evaluate(model, config, seed, set)?;
            self.report.rows.push(dump.row()?);
            self.report
                .baselines
                .insert(format!("{}/{seed}", set.family.name()), dump.majority_baseline()?);
            self.dumps.push(dump);
        }
        self.report.param_counts.insert(config.to_string(), model.param_count() as u64);
        Ok(())
    }

    pub(crate) fn finish(self, started: Instant) -> Result<ProtocolOutput> {
        self.report.check_bounds()?;
        Ok(ProtocolOutput {
            report: self.report,
            dumps: self.dumps,
            wall_clock_secs: started.elapsed().as_secs_f64(),
        })
    }
}

fn members<'a>(splits: &'a Splits, families: &[FamilyKind]) -> Vec<(&'static str, &'a [TaskExample])> {
    families
        .iter()
        .map(|f| (f.name(), splits.train[f].examples.as_slice()))
        .collect()
}

fn union(a: &[FamilyKind], b: &[FamilyKind]) -> Vec<FamilyKind> {
    let mut out = a.to_vec();
    for f in b {
        if !out.contains(f) {
            out.push(*f);
        }
    }
    out
}

fn require(cond: bool, msg: &str) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(AppError::Config(msg.into()))
    }
}

pub fn run_protocol(bench: &Workbench, spec: &ProtocolSpec) -> Result<ProtocolOutput> {
    match spec.kind {
        ProtocolKind::ZeroShot => run_zero_shot(bench, spec),
        ProtocolKind::Mixture => run_mixture(bench, spec),
        ProtocolKind::Forgetting => run_forgetting(bench, spec),
        ProtocolKind::PretrainAblation => run_pretrain_ablation(bench, spec),
        ProtocolKind::FusionAblation => run_fusion_ablation(bench, spec),
        ProtocolKind::DetectEval => run_detect_eval(bench, spec),
    }
}

/// Held-out families scored after training on growing prefixes of the
/// family pool, next to the untrained (and, with pretraining, the
/// pretrained-only) reference.
pub fn run_zero_shot(bench: &Workbench, spec: &ProtocolSpec) -> Result<ProtocolOutput> {
    let started = Instant::now();
    require(!spec.held_out.is_empty(), "zero_shot needs a held-out family")?;
    require(
        spec.held_out.iter().all(|h| !spec.train_families.contains(h)),
        "held-out families must not be in the training pool",
    )?;
    require(
        spec.mixture_sizes.iter().all(|&k| k >= 1 && k <= spec.train_families.len()),
        "mixture sizes must lie between 1 and the pool size",
    )?;
    let mut out = Collector::new(MetricReport::new(Some(spec.kind), &bench.config_hash(), &spec.seeds));
    let captions = if spec.pretrain_steps > 0 { bench.config.data.caption_pairs } else { 0 };
    for &seed in &spec.seeds {
        let splits = bench.splits(&spec.train_families, &spec.held_out, captions, seed)?;
        out.report.audits.extend(splits.audit(seed)?);
        let held: Vec<&Dataset> = spec.held_out.iter().map(|f| &splits.eval[f]).collect();
        let mut base = bench.fresh_model(&bench.config.model, seed)?;
        out.eval(bench, &base, "untrained", seed, &held)?;
        if spec.pretrain_steps > 0 {
            bench.pretrain(&mut base, &splits.captions, &PretrainTask::ALL, spec.pretrain_steps, seed)?;
            out.eval(bench, &base, "pretrained", seed, &held)?;
        }
        for &k in &spec.mixture_sizes {
            let mut model = base.clone();
            let fams = &spec.train_families[..k];
            bench.fit(&mut model, &members(&splits, fams), spec.batch_size, spec.steps_per_family * k as u64, seed)?;
            out.eval(bench, &model, &format!("mixture_{k}"), seed, &held)?;
        }
    }
    out.finish(started)
}

/// One mixture over all families against a single-task run per family.
pub fn run_mixture(bench: &Workbench, spec: &ProtocolSpec) -> Result<ProtocolOutput> {
    let started = Instant::now();
    require(!spec.train_families.is_empty(), "mixture needs training families")?;
    let fams = &spec.train_families;
    let mut out = Collector::new(MetricReport::new(Some(spec.kind), &bench.config_hash(), &spec.seeds));
    for &seed in &spec.seeds {
        let splits = bench.splits(fams, fams, 0, seed)?;
        out.report.audits.extend(splits.audit(seed)?);
        let evals: Vec<&Dataset> = fams.iter().map(|f| &splits.eval[f]).collect();
        let base = bench.fresh_model(&bench.config.model, seed)?;
        let mut model = base.clone();
        bench.fit(&mut model, &members(&splits, fams), spec.batch_size, spec.steps_per_family * fams.len() as u64, seed)?;
        out.eval(bench, &model, "mixture", seed, &evals)?;
        for (f, set) in fams.iter().zip(&evals) {
            let mut single = base.clone();
            bench.fit(&mut single, &members(&splits, &[*f]), spec.batch_size, spec.steps_per_family, seed)?;
            out.eval(bench, &single, "single", seed, &[*set])?;
        }
    }
    out.finish(started)
}

/// The mixture checkpoint is fine-tuned on one family; every family is
/// scored before and after, and each family also gets a single-task run of
/// the same per-family budget.
pub fn run_forgetting(bench: &Workbench, spec: &ProtocolSpec) -> Result<ProtocolOutput> {
    let started = Instant::now();
    let target = spec
        .finetune_family
        .ok_or_else(|| AppError::Config("forgetting needs finetune_family".into()))?;
    require(!spec.train_families.is_empty(), "forgetting needs a training mixture")?;
    require(
        spec.held_out.iter().all(|h| spec.train_families.contains(h) && *h != target),
        "watched families must be mixture members other than the fine-tuning family",
    )?;
    let fams = union(&spec.train_families, &[target]);
    let mut out = Collector::new(MetricReport::new(Some(spec.kind), &bench.config_hash(), &spec.seeds));
    for &seed in &spec.seeds {
        let splits = bench.splits(&fams, &fams, 0, seed)?;
        out.report.audits.extend(splits.audit(seed)?);
        let evals: Vec<&Dataset> = fams.iter().map(|f| &splits.eval[f]).collect();
        let base = bench.fresh_model(&bench.config.model, seed)?;
        let mut mixed = base.clone();
        let n = spec.train_families.len() as u64;
        bench.fit(&mut mixed, &members(&splits, &spec.train_families), spec.batch_size, spec.steps_per_family * n, seed)?;
        out.eval(bench, &mixed, "mixture", seed, &evals)?;
        let mut tuned = mixed.clone();
        let target_set = EncodedDataset::encode(target.name(), &splits.train[&target].examples, &bench.vocab);
        finetune(
            &mut tuned,
            &target_set,
            spec.batch_size,
            spec.finetune_steps,
            derive_seed(seed, BATCH_STREAM ^ 0xF1),
            bench.config.optimizer,
        )?;
        bench.note(|| format!("fine-tuned on {target} for {} steps", spec.finetune_steps));
        out.eval(bench, &tuned, "finetuned", seed, &evals)?;
        for (f, set) in fams.iter().zip(&evals) {
            let mut single = base.clone();
            bench.fit(&mut single, &members(&splits, &[*f]), spec.batch_size, spec.steps_per_family, seed)?;
            out.eval(bench, &single, "single", seed, &[*set])?;
        }
    }
    out.finish(started)
}

/// Pretraining task sets compared by downstream accuracy; every row uses the
/// same initialization, caption pairs, downstream data and budgets.
pub const ABLATION_ROWS: [(&str, &[PretrainTask]); 5] = [
    ("pretrain_ic", &[PretrainTask::Ic]),
    ("pretrain_cmp", &[PretrainTask::Cmp]),
    ("pretrain_itm", &[PretrainTask::Itm]),
    ("pretrain_mlm", &[PretrainTask::Mlm]),
    ("pretrain_all", &PretrainTask::ALL),
];

pub fn run_pretrain_ablation(bench: &Workbench, spec: &ProtocolSpec) -> Result<ProtocolOutput> {
    let started = Instant::now();
    require(!spec.train_families.is_empty(), "pretrain_ablation needs downstream families")?;
    require(spec.pretrain_steps > 0, "pretrain_ablation needs pretrain_steps > 0")?;
    let fams = &spec.train_families;
    let mut out = Collector::new(MetricReport::new(Some(spec.kind), &bench.config_hash(), &spec.seeds));
    for &seed in &spec.seeds {
        let splits = bench.splits(fams, fams, bench.config.data.caption_pairs, seed)?;
        out.report.audits.extend(splits.audit(seed)?);
        let evals: Vec<&Dataset> = fams.iter().map(|f| &splits.eval[f]).collect();
        let base = bench.fresh_model(&bench.config.model, seed)?;
        for (label, tasks) in ABLATION_ROWS {
            let mut model = base.clone();
            bench.pretrain(&mut model, &splits.captions, tasks, spec.pretrain_steps, seed)?;
            bench.fit(&mut model, &members(&splits, fams), spec.batch_size, spec.steps_per_family * fams.len() as u64, seed)?;
            out.eval(bench, &model, label, seed, &evals)?;
        }
    }
    let configs = out.report.configs().len();
    if configs != ABLATION_ROWS.len() {
        return Err(AppError::Data(format!("pretrain ablation produced {configs} of 5 rows")));
    }
    out.finish(started)
}

/// The same mixture trained with each fusion kind.
pub fn run_fusion_ablation(bench: &Workbench, spec: &ProtocolSpec) -> Result<ProtocolOutput> {
    let started = Instant::now();
    require(!spec.train_families.is_empty(), "fusion_ablation needs training families")?;
    let fams = &spec.train_families;
    let mut out = Collector::new(MetricReport::new(Some(spec.kind), &bench.config_hash(), &spec.seeds));
    for &seed in &spec.seeds {
        let splits = bench.splits(fams, fams, 0, seed)?;
        out.report.audits.extend(splits.audit(seed)?);
        let evals: Vec<&Dataset> = fams.iter().map(|f| &splits.eval[f]).collect();
        for kind in [FusionKind::ConcatEncoder, FusionKind::EncoderDecoder] {
            let config = ModelConfig {
                fusion_kind: kind,
                ..bench.config.model.clone()
            };
            let mut model = bench.fresh_model(&config, seed)?;
            bench.fit(&mut model, &members(&splits, fams), spec.batch_size, spec.steps_per_family * fams.len() as u64, seed)?;
            out.eval(bench, &model, kind.name(), seed, &evals)?;
        }
    }
    out.finish(started)
}

/// Detection-as-text from scratch, after pretraining, mixed into the
/// question-answering mixture, and zero-shot from that mixture alone.
pub fn run_detect_eval(bench: &Workbench, spec: &ProtocolSpec) -> Result<ProtocolOutput> {
    let started = Instant::now();
    let detect = FamilyKind::DetectText;
    require(!spec.train_families.is_empty(), "detect_eval needs a question-answering mixture")?;
    require(
        !spec.train_families.contains(&detect),
        "the question-answering mixture must not contain detect_text",
    )?;
    require(spec.pretrain_steps > 0, "detect_eval needs pretrain_steps > 0")?;
    let qa = &spec.train_families;
    let with_detect = union(qa, &[detect]);
    let mut out = Collector::new(MetricReport::new(Some(spec.kind), &bench.config_hash(), &spec.seeds));
    for &seed in &spec.seeds {
        let splits = bench.splits(&with_detect, &[detect], bench.config.data.caption_pairs, seed)?;
        out.report.audits.extend(splits.audit(seed)?);
        let eval = [&splits.eval[&detect]];
        let base = bench.fresh_model(&bench.config.model, seed)?;
        let s = spec.steps_per_family;

        let mut scratch = base.clone();
        bench.fit(&mut scratch, &members(&splits, &[detect]), spec.batch_size, s, seed)?;
        out.eval(bench, &scratch, "scratch", seed, &eval)?;

        let mut pre = base.clone();
        bench.pretrain(&mut pre, &splits.captions, &PretrainTask::ALL, spec.pretrain_steps, seed)?;
        bench.fit(&mut pre, &members(&splits, &[detect]), spec.batch_size, s, seed)?;
        out.eval(bench, &pre, "from_pretrain", seed, &eval)?;

        let mut mixed = base.clone();
        bench.fit(&mut mixed, &members(&splits, &with_detect), spec.batch_size, s * with_detect.len() as u64, seed)?;
        out.eval(bench, &mixed, "mixture_detect", seed, &eval)?;

        let mut zero = base.clone();
        bench.fit(&mut zero, &members(&splits, qa), spec.batch_size, s * qa.len() as u64, seed)?;
        out.eval(bench, &zero, "zero_shot", seed, &eval)?;
    }
    out.finish(started)
}
