//! Subcommands. `main` only parses arguments and maps errors to exit codes.

use std::path::{Path, PathBuf};
use std::time::Instant;

use answerme_core::derive_seed;
use answerme_core::mixture::{train, EncodedDataset, MixtureSpec, TrainEvent};
use answerme_core::model::AnswerMe;
use answerme_core::optim::OptimizerState;
use answerme_core::synth::FamilyKind;
use answerme_core::tasks::{make_ic, make_pretrain_mixture, CaptionPair, TaskExample};
use answerme_core::text::Vocab;
use clap::{Args, Parser, Subcommand};

use crate::config::{ProtocolKind, ProtocolSpec, RunConfig};
use crate::error::{AppError, Result};
use crate::formats::records::{self, Manifest};
use crate::formats::{checkpoint, load_vocab, vocab_to_text, write_once};
use crate::protocols::{run_protocol, Collector, Workbench, BATCH_STREAM, INIT_STREAM, PRETRAIN_STREAM};
use crate::report::{rescore, MetricReport};
use crate::runlog::{write_resolved_config, DirLock, LossLog, RunSummary};

#[derive(Debug, Parser)]
#[command(name = "answerme", version, about = "Multi-task open-vocabulary VQA on synthetic scenes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Run configuration (TOML); built-in defaults when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the config's seed (for `eval`, the protocol seed list).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory; must not be in use by another run.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build the vocabulary and every train/eval split.
    Gendata {
        #[command(flatten)]
        common: Common,
    },
    /// Pretrain on the caption pairs of a data directory.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Train the configured equal-share mixture.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Start from these weights (e.g. a pretraining checkpoint).
        #[arg(long, conflicts_with = "resume")]
        init: Option<PathBuf>,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Continue training a checkpoint on a single family.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        init: PathBuf,
        #[arg(long)]
        family: String,
        /// Defaults to the mixture step count of the config.
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Run an evaluation protocol, or score a checkpoint on every eval split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        protocol: Option<ProtocolKind>,
        /// Run zero_shot, forgetting, pretrain_ablation, fusion_ablation and
        /// detect_eval, one report directory each.
        #[arg(long, conflicts_with_all = ["protocol", "checkpoint"])]
        suite: bool,
        #[arg(long, requires = "data")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Progress lines on stderr.
        #[arg(long)]
        verbose: bool,
    },
    /// Re-score the prediction dumps of a report directory.
    Score {
        /// Directory holding report.json and predictions/.
        #[arg(long)]
        run: PathBuf,
    },
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
        cfg.protocol.seeds = vec![seed];
    }
    Ok(cfg)
}

/// Config resolved against the vocabulary stored with the data.
fn data_context(cfg: RunConfig, data: &Path) -> Result<(RunConfig, Vocab)> {
    let vocab = load_vocab(&data.join("vocab.txt"))?;
    let cfg = cfg.resolve(vocab.len())?;
    Ok((cfg, vocab))
}

fn read_train(data: &Path, family: FamilyKind) -> Result<Vec<TaskExample>> {
    Ok(records::read_split(data, &format!("{}_train", family.name()))?.1)
}

pub fn run(cli: Cli) -> Result<String> {
    match cli.command {
        Command::Gendata { common } => gendata(&load_config(&common)?, &common.out),
        Command::Pretrain { common, data, resume } => pretrain(load_config(&common)?, &data, resume.as_deref(), &common.out),
        Command::Train {
            common,
            data,
            init,
            resume,
        } => train_mixture(load_config(&common)?, &data, init.as_deref(), resume.as_deref(), &common.out),
        Command::Finetune {
            common,
            data,
            init,
            family,
            steps,
        } => {
            let family = FamilyKind::parse(&family).ok_or_else(|| {
                let names: Vec<&str> = FamilyKind::ALL.iter().map(|f| f.name()).collect();
                AppError::Config(format!("unknown family `{family}`; valid: {}", names.join(", ")))
            })?;
            finetune(load_config(&common)?, &data, &init, family, steps, &common.out)
        }
        Command::Eval {
            common,
            protocol,
            suite,
            checkpoint,
            data,
            verbose,
        } => {
            let cfg = load_config(&common)?;
            match (checkpoint, data) {
                (Some(ckpt), Some(data)) => eval_checkpoint(cfg, &data, &ckpt, &common.out),
                _ if suite => eval_suite(cfg, &common.out, verbose),
                _ => eval_protocol(cfg, protocol, &common.out, verbose),
            }
        }
        Command::Score { run } => score(&run),
    }
}

pub fn gendata(cfg: &RunConfig, out: &Path) -> Result<String> {
    let _lock = DirLock::acquire(out)?;
    let bench = Workbench::new(cfg)?;
    let d = &bench.config.data;
    let splits = bench.splits(&d.families, &d.families, d.caption_pairs, bench.config.seed)?;
    let audits = splits.audit(bench.config.seed)?;
    write_resolved_config(out, &bench.config)?;
    write_once(&out.join("vocab.txt"), vocab_to_text(&bench.vocab).as_bytes())?;
    for (split, sets) in [("train", &splits.train), ("eval", &splits.eval)] {
        for (family, set) in sets {
            let stem = format!("{}_{split}", family.name());
            let manifest = Manifest {
                family: family.name().into(),
                split: split.into(),
                seed: set.seed,
                count: set.len(),
                scene_ids: set.scene_ids.clone(),
                file: format!("{stem}.bin"),
            };
            records::write_split(out, &stem, &manifest, &set.examples)?;
        }
    }
    if !splits.captions.is_empty() {
        let examples: Vec<TaskExample> = splits.captions.iter().map(make_ic).collect();
        let manifest = Manifest {
            family: "captions".into(),
            split: "train".into(),
            seed: bench.config.seed,
            count: examples.len(),
            scene_ids: splits.caption_ids.clone(),
            file: "captions_train.bin".into(),
        };
        records::write_split(out, "captions_train", &manifest, &examples)?;
    }
    let audit = serde_json::to_string_pretty(&audits).expect("audits serialize") + "\n";
    write_once(&out.join("audit.json"), audit.as_bytes())?;
    Ok(format!(
        "wrote {} train and {} eval splits, {} caption pairs, vocabulary of {} to {}",
        splits.train.len(),
        splits.eval.len(),
        splits.captions.len(),
        bench.vocab.len(),
        out.display()
    ))
}

struct TrainJob<'a> {
    command: &'a str,
    cfg: &'a RunConfig,
    model: AnswerMe,
    optimizer: OptimizerState,
    start_step: u64,
    datasets: Vec<EncodedDataset>,
    spec: MixtureSpec,
}

/// Trains and writes `loss.jsonl`, `step-N.ckpt`, `final.ckpt` and a
/// summary. A resumed run appends to the log of the run it continues.
fn run_job(job: TrainJob<'_>, out: &Path) -> Result<String> {
    let TrainJob {
        command,
        cfg,
        mut model,
        mut optimizer,
        start_step,
        datasets,
        spec,
    } = job;
    let _lock = DirLock::acquire(out)?;
    write_resolved_config(out, cfg)?;
    let mut log = LossLog::open(&out.join("loss.jsonl"))?;
    let started = Instant::now();
    // the callback can only return core errors; the real one is kept aside
    let mut failure: Option<AppError> = None;
    let result = train(&mut model, &datasets, &spec, &mut optimizer, start_step, &mut |event| {
        let written = match event {
            TrainEvent::Step { step, loss } => log.push(step, loss),
            TrainEvent::Checkpoint { step, model, optimizer } => {
                let bytes = checkpoint::encode(model, Some(optimizer), step);
                write_once(&out.join(format!("step-{step}.ckpt")), &bytes)
            }
        };
        written.map_err(|e| {
            let msg = e.to_string();
            failure = Some(e);
            answerme_core::Error::Config(msg)
        })
    });
    let record = match (result, failure) {
        (Ok(record), _) => record,
        (Err(_), Some(e)) => return Err(e),
        (Err(e), None) => return Err(AppError::from(e).context(format!("{command} into {}", out.display()))),
    };
    log.flush()?;
    write_once(
        &out.join("final.ckpt"),
        &checkpoint::encode(&model, Some(&optimizer), spec.steps.max(start_step)),
    )?;
    let summary = RunSummary::new(command, &cfg.hash(), start_step, &record, started.elapsed().as_secs_f64());
    let name = if start_step == 0 {
        "summary.json".to_string()
    } else {
        format!("summary-from-{start_step}.json")
    };
    write_once(
        &out.join(name),
        (serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n").as_bytes(),
    )?;
    Ok(format!(
        "{command}: steps {}..={}, final loss {}, checkpoint {}",
        start_step + 1,
        summary.steps,
        summary.final_loss.map_or("n/a".into(), |l| format!("{l:.4}")),
        out.join("final.ckpt").display()
    ))
}

fn resume_state(path: &Path, cfg: &RunConfig, vocab: &Vocab) -> Result<(AnswerMe, OptimizerState, u64)> {
    let ck = checkpoint::load(path, Some((&cfg.model, vocab.fingerprint())))?;
    let opt = ck.optimizer.ok_or_else(|| AppError::Mismatch {
        path: path.to_path_buf(),
        reason: "checkpoint has no optimizer state to resume from".into(),
    })?;
    Ok((ck.model, opt, ck.step))
}

pub fn pretrain(cfg: RunConfig, data: &Path, resume: Option<&Path>, out: &Path) -> Result<String> {
    let (cfg, vocab) = data_context(cfg, data)?;
    let (_, captions) = records::read_split(data, "captions_train")?;
    let pairs = captions
        .into_iter()
        .map(|ex| {
            let image = ex.images.into_iter().next().ok_or_else(|| AppError::Data("caption record without image".into()))?;
            Ok(CaptionPair::new(image, ex.image_ids[0], ex.target_text)?)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut rng = answerme_core::seeded_rng(derive_seed(cfg.seed, PRETRAIN_STREAM));
    let (examples, _) = make_pretrain_mixture(&pairs, &cfg.pretrain.tasks, cfg.pretrain.mlm_target, &mut rng)?;
    let (model, optimizer, start_step) = match resume {
        Some(p) => resume_state(p, &cfg, &vocab)?,
        None => {
            let model = AnswerMe::new(cfg.model.clone(), vocab.fingerprint(), derive_seed(cfg.seed, INIT_STREAM))?;
            let opt = OptimizerState::new(cfg.optimizer, model.params())?;
            (model, opt, 0)
        }
    };
    let spec = MixtureSpec {
        batch_size: cfg.pretrain.batch_size,
        steps: cfg.pretrain.steps,
        seed: derive_seed(cfg.seed, BATCH_STREAM),
        checkpoint_every: cfg.pretrain.checkpoint_every,
    };
    let datasets = vec![EncodedDataset::encode("pretrain", &examples, &vocab)];
    run_job(
        TrainJob {
            command: "pretrain",
            cfg: &cfg,
            model,
            optimizer,
            start_step,
            datasets,
            spec,
        },
        out,
    )
}

pub fn train_mixture(cfg: RunConfig, data: &Path, init: Option<&Path>, resume: Option<&Path>, out: &Path) -> Result<String> {
    let (cfg, vocab) = data_context(cfg, data)?;
    let mut datasets = Vec::new();
    for &f in &cfg.mixture.families {
        datasets.push(EncodedDataset::encode(f.name(), &read_train(data, f)?, &vocab));
    }
    let (model, optimizer, start_step) = match (resume, init) {
        (Some(p), _) => resume_state(p, &cfg, &vocab)?,
        (None, Some(p)) => {
            let model = checkpoint::load(p, Some((&cfg.model, vocab.fingerprint())))?.model;
            let opt = OptimizerState::new(cfg.optimizer, model.params())?;
            (model, opt, 0)
        }
        (None, None) => {
            let model = AnswerMe::new(cfg.model.clone(), vocab.fingerprint(), derive_seed(cfg.seed, INIT_STREAM))?;
            let opt = OptimizerState::new(cfg.optimizer, model.params())?;
            (model, opt, 0)
        }
    };
    let spec = MixtureSpec {
        batch_size: cfg.mixture.batch_size,
        steps: cfg.mixture.steps,
        seed: derive_seed(cfg.seed, BATCH_STREAM),
        checkpoint_every: cfg.mixture.checkpoint_every,
    };
    run_job(
        TrainJob {
            command: "train",
            cfg: &cfg,
            model,
            optimizer,
            start_step,
            datasets,
            spec,
        },
        out,
    )
}

pub fn finetune(cfg: RunConfig, data: &Path, init: &Path, family: FamilyKind, steps: Option<u64>, out: &Path) -> Result<String> {
    let (cfg, vocab) = data_context(cfg, data)?;
    let model = checkpoint::load(init, Some((&cfg.model, vocab.fingerprint())))?.model;
    let optimizer = OptimizerState::new(cfg.optimizer, model.params())?;
    let datasets = vec![EncodedDataset::encode(family.name(), &read_train(data, family)?, &vocab)];
    let spec = MixtureSpec {
        batch_size: cfg.mixture.batch_size,
        steps: steps.unwrap_or(cfg.mixture.steps),
        seed: derive_seed(cfg.seed, BATCH_STREAM),
        checkpoint_every: 0,
    };
    run_job(
        TrainJob {
            command: "finetune",
            cfg: &cfg,
            model,
            optimizer,
            start_step: 0,
            datasets,
            spec,
        },
        out,
    )
}

pub fn eval_checkpoint(cfg: RunConfig, data: &Path, ckpt: &Path, out: &Path) -> Result<String> {
    let (cfg, vocab) = data_context(cfg, data)?;
    let model = checkpoint::load(ckpt, Some((&cfg.model, vocab.fingerprint())))?.model;
    let _lock = DirLock::acquire(out)?;
    let bench = Workbench::with_vocab(&cfg, vocab)?;
    let started = Instant::now();
    let mut collect = Collector::new(MetricReport::new(None, &cfg.hash(), &[cfg.seed]));
    for &f in &cfg.data.families {
        let (manifest, examples) = records::read_split(data, &format!("{}_eval", f.name()))?;
        let set = answerme_core::synth::Dataset {
            family: f,
            seed: manifest.seed,
            examples,
            scene_ids: manifest.scene_ids,
        };
        collect.eval(&bench, &model, "checkpoint", cfg.seed, &[&set])?;
    }
    let output = collect.finish(started)?;
    write_resolved_config(out, &cfg)?;
    output.write(out)?;
    Ok(summarize(&output.report, out))
}

fn summarize(report: &MetricReport, out: &Path) -> String {
    let mut s = format!("{} -> {}\n", report.experiment, out.join("report.json").display());
    for r in &report.rows {
        s.push_str(&format!("  {:<16} seed {:<3} {:<14} {:.3}\n", r.config, r.seed, r.dataset, r.metric.headline()));
    }
    s
}

pub fn eval_protocol(mut cfg: RunConfig, protocol: Option<ProtocolKind>, out: &Path, verbose: bool) -> Result<String> {
    if let Some(kind) = protocol {
        if kind != cfg.protocol.kind {
            cfg.protocol = ProtocolSpec::preset(kind, &cfg.protocol);
        }
    }
    let _lock = DirLock::acquire(out)?;
    let mut bench = Workbench::new(&cfg)?;
    bench.verbose = verbose;
    let output = run_protocol(&bench, &bench.config.protocol)?;
    write_resolved_config(out, &bench.config)?;
    output.write(out)?;
    Ok(summarize(&output.report, out))
}

/// The five comparison protocols, each with its preset family layout.
pub const SUITE: [ProtocolKind; 5] = [
    ProtocolKind::ZeroShot,
    ProtocolKind::Forgetting,
    ProtocolKind::PretrainAblation,
    ProtocolKind::FusionAblation,
    ProtocolKind::DetectEval,
];

pub fn eval_suite(cfg: RunConfig, out: &Path, verbose: bool) -> Result<String> {
    let mut s = String::new();
    for kind in SUITE {
        let mut c = cfg.clone();
        c.protocol = ProtocolSpec::preset(kind, &cfg.protocol);
        s.push_str(&eval_protocol(c, None, &out.join(kind.name()), verbose)?);
    }
    Ok(s)
}

pub fn score(run: &Path) -> Result<String> {
    let path = run.join("report.json");
    let text = std::fs::read_to_string(&path).map_err(|e| AppError::io(&path, e))?;
    let report = MetricReport::from_json(&path, &text)?;
    let rescored = rescore(&report, run)?;
    if rescored != report {
        return Err(AppError::Mismatch {
            path,
            reason: "prediction dumps do not reproduce the report".into(),
        });
    }
    Ok(format!("{} rows reproduced from {}", report.rows.len(), run.join("predictions").display()))
}
