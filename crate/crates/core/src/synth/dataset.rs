use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use super::families::{lexicon, render_task, FamilyKind};
use super::scene::{gen_scene, pretrain_caption, Scene, SceneSpec};
use crate::error::{Error, Result};
use crate::tasks::{CaptionPair, TaskExample, IC_PROMPT};
use crate::{derive_seed, seeded_rng};

/// An addressable space of scenes: scene `id` is always the same scene, so
/// datasets only need to record ids and exclusion is a set operation on them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct SceneUniverse {
    pub spec: SceneSpec,
    pub seed: u64,
    pub size: u64,
}

impl SceneUniverse {
    pub fn new(spec: SceneSpec, seed: u64, size: u64) -> Result<Self> {
        spec.validate()?;
        if size == 0 {
            return Err(Error::TooFewScenes { available: 0, needed: 1 });
        }
        Ok(Self { spec, seed, size })
    }

    pub fn scene(&self, id: u64) -> Result<Scene> {
        if id >= self.size {
            return Err(Error::Scene(alloc::format!("scene id {id} outside universe of {}", self.size)));
        }
        let mut s = gen_scene(&mut seeded_rng(derive_seed(self.seed, id)), &self.spec)?;
        s.id = id;
        Ok(s)
    }
}

/// Examples of one family plus the ids of every scene they show.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub family: FamilyKind,
    pub seed: u64,
    pub examples: Vec<TaskExample>,
    pub scene_ids: BTreeSet<u64>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn is_disjoint(&self, other: &BTreeSet<u64>) -> bool {
        self.scene_ids.is_disjoint(other)
    }
}

/// Draws fresh scene ids not in `exclusion` and never reused within one
/// builder; the draw budget bounds the time spent on unusable scenes.
struct FreshScenes<'a> {
    universe: &'a SceneUniverse,
    exclusion: &'a BTreeSet<u64>,
    used: BTreeSet<u64>,
    budget: usize,
}

impl<'a> FreshScenes<'a> {
    fn new(universe: &'a SceneUniverse, exclusion: &'a BTreeSet<u64>, needed: u64) -> Result<Self> {
        let excluded_inside = exclusion.range(..universe.size).count() as u64;
        let available = universe.size - excluded_inside;
        if available < needed {
            return Err(Error::TooFewScenes { available, needed });
        }
        Ok(Self {
            universe,
            exclusion,
            used: BTreeSet::new(),
            budget: 64 * needed as usize + 1024,
        })
    }

    fn draw<R: Rng>(&mut self, rng: &mut R) -> Result<Scene> {
        let taken = self.used.len() as u64 + self.exclusion.range(..self.universe.size).count() as u64;
        if taken >= self.universe.size {
            return Err(Error::TooFewScenes { available: 0, needed: 1 });
        }
        loop {
            if self.budget == 0 {
                return Err(Error::TooFewScenes {
                    available: self.universe.size - taken,
                    needed: 1,
                });
            }
            self.budget -= 1;
            let id = rng.random_range(0..self.universe.size);
            if self.exclusion.contains(&id) || self.used.contains(&id) {
                continue;
            }
            self.used.insert(id);
            return self.universe.scene(id);
        }
    }
}

/// Builds `n` examples of `family` on fresh scenes outside `exclusion`.
/// Scenes that cannot support the family are discarded and redrawn.
pub fn build_dataset(
    universe: &SceneUniverse,
    family: FamilyKind,
    n: usize,
    seed: u64,
    exclusion: &BTreeSet<u64>,
) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::EmptyDataset(family.name().into()));
    }
    let per = family.image_count() as u64;
    let mut fresh = FreshScenes::new(universe, exclusion, per * n as u64)?;
    let mut rng = seeded_rng(derive_seed(seed, family as u64));
    let mut examples = Vec::with_capacity(n);
    let mut scene_ids = BTreeSet::new();
    let mut failures = 0usize;
    while examples.len() < n {
        let scenes: Vec<Scene> = (0..per).map(|_| fresh.draw(&mut rng)).collect::<Result<_>>()?;
        let refs: Vec<&Scene> = scenes.iter().collect();
        match render_task(&refs, family, &mut rng) {
            Ok(ex) => {
                scene_ids.extend(scenes.iter().map(|s| s.id));
                examples.push(ex);
            }
            Err(Error::RetryBudget { .. }) if failures < 16 * n + 64 => failures += 1,
            Err(e) => return Err(e),
        }
    }
    Ok(Dataset {
        family,
        seed,
        examples,
        scene_ids,
    })
}

/// Builds `n` (image, caption) pairs on fresh scenes for pretraining.
pub fn build_caption_pairs(
    universe: &SceneUniverse,
    n: usize,
    seed: u64,
    exclusion: &BTreeSet<u64>,
) -> Result<(Vec<CaptionPair>, BTreeSet<u64>)> {
    let mut fresh = FreshScenes::new(universe, exclusion, n as u64)?;
    let mut rng = seeded_rng(derive_seed(seed, 0xCA9));
    let mut pairs = Vec::with_capacity(n);
    let mut ids = BTreeSet::new();
    for _ in 0..n {
        let scene = fresh.draw(&mut rng)?;
        let caption = pretrain_caption(&scene, &mut rng);
        ids.insert(scene.id);
        pairs.push(CaptionPair::new(scene.raster, scene.id, caption)?);
    }
    Ok((pairs, ids))
}

/// Most frequent target and its share; ties go to the smaller string.
pub fn majority_baseline(examples: &[TaskExample]) -> Result<(String, f64)> {
    let golds: Vec<&str> = examples.iter().map(|e| e.target_text.as_str()).collect();
    majority_answer(&golds)
}

/// Same as [`majority_baseline`] over bare gold strings.
pub fn majority_answer(golds: &[&str]) -> Result<(String, f64)> {
    if golds.is_empty() {
        return Err(Error::EmptyDataset("majority baseline".into()));
    }
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for g in golds {
        *counts.entry(g).or_default() += 1;
    }
    let (answer, count) = counts
        .iter()
        .fold(("", 0usize), |best, (a, c)| if *c > best.1 { (a, *c) } else { best });
    Ok((answer.to_string(), count as f64 / golds.len() as f64))
}

/// Text for vocabulary construction: the closed lexicon once, the
/// pretraining prompt, and a sample of rendered questions, answers and
/// captions so frequencies reflect actual usage.
pub fn reference_corpus(universe: &SceneUniverse, samples_per_family: usize, seed: u64) -> Result<Vec<String>> {
    let mut corpus = vec![lexicon().join(" "), IC_PROMPT.to_string()];
    let mut rng = seeded_rng(derive_seed(seed, 0xC0));
    for kind in FamilyKind::ALL {
        let mut made = 0;
        let mut tries = 0;
        while made < samples_per_family && tries < 64 * samples_per_family.max(1) {
            tries += 1;
            let scenes: Vec<Scene> = (0..kind.image_count())
                .map(|_| universe.scene(rng.random_range(0..universe.size)))
                .collect::<Result<_>>()?;
            let refs: Vec<&Scene> = scenes.iter().collect();
            if let Ok(ex) = render_task(&refs, kind, &mut rng) {
                corpus.push(ex.input_text);
                corpus.push(ex.target_text);
                made += 1;
            }
        }
    }
    for _ in 0..samples_per_family {
        let s = universe.scene(rng.random_range(0..universe.size))?;
        corpus.push(pretrain_caption(&s, &mut rng));
    }
    Ok(corpus)
}
