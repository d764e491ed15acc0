//! Deterministic synthetic scenes and the question families rendered over
//! them. Each family stands in for one dataset role: attribute and counting
//! questions, entailment, two-image reasoning, compositional questions,
//! captions, region descriptions, yes/no matching and detection-as-text.

mod dataset;
mod families;
mod scene;

pub use dataset::{build_caption_pairs, build_dataset, majority_answer, majority_baseline, reference_corpus, Dataset, SceneUniverse};
pub use families::{render_task, FamilyKind, Filter, Query, Relation, TaskFamily};
pub use scene::{
    gen_scene, number_word, pretrain_caption, render_scene, Color, Object, Scene, SceneSpec, Shape, Size,
};
