//! The universal example record and the four caption-derived pretraining
//! tasks: captioning (IC), caption completion (CMP), masked words (MLM) and
//! image-text matching (ITM).

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::math::round_half_up;
use crate::raster::Raster;
use crate::synth::FamilyKind;
use crate::text::{sentinel_token, tokenize, Vocab};

pub const IC_PROMPT: &str = "caption the image";
pub const CMP_MIN_FRACTION: f64 = 0.10;
pub const CMP_MAX_FRACTION: f64 = 0.40;
pub const MLM_RATE: f64 = 0.25;
pub const ITM_POSITIVE_RATE: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PretrainTask {
    Ic,
    Cmp,
    Mlm,
    Itm,
}

impl PretrainTask {
    pub const ALL: [PretrainTask; 4] = [PretrainTask::Ic, PretrainTask::Cmp, PretrainTask::Mlm, PretrainTask::Itm];

    pub fn name(self) -> &'static str {
        match self {
            PretrainTask::Ic => "ic",
            PretrainTask::Cmp => "cmp",
            PretrainTask::Mlm => "mlm",
            PretrainTask::Itm => "itm",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.name() == name)
    }
}

/// What produced an example. Metadata only; the loss never reads it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TaskTag {
    Pretrain(PretrainTask),
    Family(FamilyKind),
}

impl TaskTag {
    /// Stable byte used in the record format.
    pub fn code(self) -> u8 {
        match self {
            TaskTag::Pretrain(t) => t as u8,
            TaskTag::Family(f) => 16 + f as u8,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0..=3 => Some(TaskTag::Pretrain(PretrainTask::ALL[code as usize])),
            16..=24 => Some(TaskTag::Family(FamilyKind::ALL[(code - 16) as usize])),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TaskTag::Pretrain(t) => t.name(),
            TaskTag::Family(f) => f.name(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskExample {
    pub images: Vec<Raster>,
    /// Scene ids of `images`, for overlap audits.
    pub image_ids: Vec<u64>,
    pub input_text: String,
    pub target_text: String,
    pub tag: TaskTag,
}

impl TaskExample {
    pub fn encode(&self, vocab: &Vocab) -> EncodedExample {
        EncodedExample {
            images: self.images.clone(),
            input_ids: vocab.encode(&self.input_text, false).into_ids(),
            target_ids: vocab.encode(&self.target_text, true).into_ids(),
            tag: self.tag,
        }
    }
}

/// A [`TaskExample`] tokenized under a run's vocabulary. Targets end in EOS.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedExample {
    pub images: Vec<Raster>,
    pub input_ids: Vec<u32>,
    pub target_ids: Vec<u32>,
    pub tag: TaskTag,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CaptionPair {
    pub image: Raster,
    pub image_id: u64,
    pub caption: String,
}

impl CaptionPair {
    pub fn new(image: Raster, image_id: u64, caption: String) -> Result<Self> {
        if tokenize(&caption).is_empty() {
            return Err(Error::EmptyCaption);
        }
        Ok(Self {
            image,
            image_id,
            caption,
        })
    }

    fn words(&self) -> Vec<String> {
        tokenize(&self.caption)
    }

    fn example(&self, input_text: String, target_text: String, tag: PretrainTask) -> TaskExample {
        TaskExample {
            images: vec![self.image.clone()],
            image_ids: vec![self.image_id],
            input_text,
            target_text,
            tag: TaskTag::Pretrain(tag),
        }
    }
}

pub fn make_ic(pair: &CaptionPair) -> TaskExample {
    pair.example(IC_PROMPT.to_string(), pair.caption.clone(), PretrainTask::Ic)
}

/// Draws the CMP prefix fraction, uniform on [0.10, 0.40].
pub fn cmp_fraction<R: Rng>(rng: &mut R) -> f64 {
    rng.random_range(CMP_MIN_FRACTION..=CMP_MAX_FRACTION)
}

/// Caption completion at a given prefix fraction. A one-word caption cannot
/// be split and yields the IC form (tagged IC).
pub fn make_cmp_at(pair: &CaptionPair, fraction: f64) -> TaskExample {
    let words = pair.words();
    let n = words.len();
    if n < 2 {
        return make_ic(pair);
    }
    let k = (round_half_up(fraction * n as f64) as usize).clamp(1, n - 1);
    pair.example(words[..k].join(" "), words[k..].join(" "), PretrainTask::Cmp)
}

pub fn make_cmp<R: Rng>(pair: &CaptionPair, rng: &mut R) -> TaskExample {
    let f = cmp_fraction(rng);
    make_cmp_at(pair, f)
}

/// Number of masked words for a caption of `n` words.
pub fn mlm_mask_count(n: usize) -> usize {
    (round_half_up(MLM_RATE * n as f64) as usize).clamp(1, n.max(1))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MlmTarget {
    /// "<sent_0> w <sent_1> w ..."
    #[default]
    MissingWords,
    FullCaption,
}

pub fn make_mlm<R: Rng>(pair: &CaptionPair, target: MlmTarget, rng: &mut R) -> TaskExample {
    let mut words = pair.words();
    let n = words.len();
    let k = mlm_mask_count(n);
    let mut positions = rand::seq::index::sample(rng, n, k).into_vec();
    positions.sort_unstable();
    let mut target_parts = Vec::with_capacity(2 * k);
    for (i, &p) in positions.iter().enumerate() {
        let marker = sentinel_token(i);
        target_parts.push(marker.clone());
        target_parts.push(core::mem::replace(&mut words[p], marker));
    }
    let target_text = match target {
        MlmTarget::MissingWords => target_parts.join(" "),
        MlmTarget::FullCaption => pair.caption.clone(),
    };
    pair.example(words.join(" "), target_text, PretrainTask::Mlm)
}

/// Image-text matching: the true caption with probability 0.5, otherwise a
/// uniformly drawn different caption from `pool`.
pub fn make_itm<R: Rng>(pair: &CaptionPair, pool: &[String], rng: &mut R) -> Result<TaskExample> {
    if !pool.iter().any(|c| *c != pair.caption) {
        return Err(Error::PoolExhausted);
    }
    if rng.random_bool(ITM_POSITIVE_RATE) {
        return Ok(pair.example(pair.caption.clone(), "true".into(), PretrainTask::Itm));
    }
    loop {
        let other = &pool[rng.random_range(0..pool.len())];
        if *other != pair.caption {
            return Ok(pair.example(other.clone(), "false".into(), PretrainTask::Itm));
        }
    }
}

/// Per-task counts of a pretraining stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct PretrainStats {
    /// Indexed by `PretrainTask as usize`; counts the drawn task.
    pub drawn: [usize; 4],
    /// CMP draws on one-word captions that fell back to the IC form.
    pub degenerate_cmp: usize,
}

/// Emits one example per caption pair, its task drawn uniformly from the
/// enabled set.
#[derive(Debug, Clone)]
pub struct PretrainMixture {
    enabled: Vec<PretrainTask>,
    mlm_target: MlmTarget,
    pool: Vec<String>,
    pub stats: PretrainStats,
}

impl PretrainMixture {
    pub fn new(enabled: &[PretrainTask], mlm_target: MlmTarget, pool: Vec<String>) -> Result<Self> {
        let mut enabled = enabled.to_vec();
        enabled.sort_unstable();
        enabled.dedup();
        if enabled.is_empty() {
            return Err(Error::NoTasksEnabled);
        }
        if enabled.contains(&PretrainTask::Itm) && pool.len() < 2 {
            return Err(Error::PoolExhausted);
        }
        Ok(Self {
            enabled,
            mlm_target,
            pool,
            stats: PretrainStats::default(),
        })
    }

    pub fn emit<R: Rng>(&mut self, pair: &CaptionPair, rng: &mut R) -> Result<TaskExample> {
        let task = self.enabled[rng.random_range(0..self.enabled.len())];
        self.stats.drawn[task as usize] += 1;
        Ok(match task {
            PretrainTask::Ic => make_ic(pair),
            PretrainTask::Cmp => {
                let ex = make_cmp(pair, rng);
                if ex.tag == TaskTag::Pretrain(PretrainTask::Ic) {
                    self.stats.degenerate_cmp += 1;
                }
                ex
            }
            PretrainTask::Mlm => make_mlm(pair, self.mlm_target, rng),
            PretrainTask::Itm => make_itm(pair, &self.pool, rng)?,
        })
    }
}

/// Runs a whole pair list through a [`PretrainMixture`] whose ITM pool is
/// the pairs' own captions.
pub fn make_pretrain_mixture<R: Rng>(
    pairs: &[CaptionPair],
    enabled: &[PretrainTask],
    mlm_target: MlmTarget,
    rng: &mut R,
) -> Result<(Vec<TaskExample>, PretrainStats)> {
    let pool = pairs.iter().map(|p| p.caption.clone()).collect();
    let mut mix = PretrainMixture::new(enabled, mlm_target, pool)?;
    let examples = pairs.iter().map(|p| mix.emit(p, rng)).collect::<Result<Vec<_>>>()?;
    Ok((examples, mix.stats))
}
