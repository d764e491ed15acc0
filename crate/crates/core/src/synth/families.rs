use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use super::scene::{number_word, parse_number, Color, Object, Scene, Shape, Size};
use crate::error::{Error, Result};
use crate::tasks::{TaskExample, TaskTag};
use crate::text::tokenize;

/// The synthetic task families, one per dataset role.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FamilyKind {
    VqaAttr,
    Count,
    Entail,
    NlvrPair,
    Compositional,
    Caption,
    RegionDesc,
    MatchYesno,
    DetectText,
}

impl FamilyKind {
    pub const ALL: [FamilyKind; 9] = [
        FamilyKind::VqaAttr,
        FamilyKind::Count,
        FamilyKind::Entail,
        FamilyKind::NlvrPair,
        FamilyKind::Compositional,
        FamilyKind::Caption,
        FamilyKind::RegionDesc,
        FamilyKind::MatchYesno,
        FamilyKind::DetectText,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FamilyKind::VqaAttr => "vqa_attr",
            FamilyKind::Count => "count",
            FamilyKind::Entail => "entail",
            FamilyKind::NlvrPair => "nlvr_pair",
            FamilyKind::Compositional => "compositional",
            FamilyKind::Caption => "caption",
            FamilyKind::RegionDesc => "region_desc",
            FamilyKind::MatchYesno => "match_yesno",
            FamilyKind::DetectText => "detect_text",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }

    pub fn image_count(self) -> usize {
        if self == FamilyKind::NlvrPair {
            2
        } else {
            1
        }
    }
}

impl core::fmt::Display for FamilyKind {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.name())
    }
}

/// Possible answers of a family.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnswerGrammar {
    Closed(&'static [&'static str]),
    /// Free-form descriptions built from attribute words.
    Descriptive,
}

/// A family together with its question templates and answer grammar.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TaskFamily {
    pub kind: FamilyKind,
    pub templates: &'static [&'static str],
    pub answers: AnswerGrammar,
}

const ATTRS: &[&str] = &[
    "red", "green", "blue", "yellow", "purple", "orange", "circle", "square", "triangle", "star", "small", "large",
];
const NUMBERS: &[&str] = &[
    "zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten", "eleven", "twelve",
    "thirteen", "fourteen", "fifteen", "sixteen",
];

impl TaskFamily {
    pub fn of(kind: FamilyKind) -> Self {
        let (templates, answers): (&'static [&'static str], AnswerGrammar) = match kind {
            FamilyKind::VqaAttr => (
                &[
                    "what color is the {shape}?",
                    "what shape is the {color} object?",
                    "what size is the {shape}?",
                ],
                AnswerGrammar::Closed(ATTRS),
            ),
            FamilyKind::Count => (&["how many {filter} are there?"], AnswerGrammar::Closed(NUMBERS)),
            FamilyKind::Entail => (
                &["there is a {color} {shape}"],
                AnswerGrammar::Closed(&["true", "false", "neutral"]),
            ),
            FamilyKind::NlvrPair => (
                &[
                    "the left image has more {shapes} than the right image",
                    "both images contain a {color} object",
                ],
                AnswerGrammar::Closed(&["true", "false"]),
            ),
            FamilyKind::Compositional => (
                &[
                    "what color is the object {left of|right of|above|below} the {color} {shape}?",
                    "what color is the {size} {shape}?",
                    "what shape is the {size} {color} object?",
                ],
                AnswerGrammar::Closed(&[
                    "red", "green", "blue", "yellow", "purple", "orange", "circle", "square", "triangle", "star",
                ]),
            ),
            FamilyKind::Caption => (&["describe the image"], AnswerGrammar::Descriptive),
            FamilyKind::RegionDesc => (&["describe the object in row {n} column {n}"], AnswerGrammar::Descriptive),
            FamilyKind::MatchYesno => (
                &["is there a {shape}?", "is there a {color} object?"],
                AnswerGrammar::Closed(&["yes", "no"]),
            ),
            FamilyKind::DetectText => (&["list all the objects"], AnswerGrammar::Descriptive),
        };
        Self {
            kind,
            templates,
            answers,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Filter {
    All,
    Color(Color),
    Shape(Shape),
    ColorShape(Color, Shape),
}

impl Filter {
    fn matches(self, o: &Object) -> bool {
        match self {
            Filter::All => true,
            Filter::Color(c) => o.color == c,
            Filter::Shape(s) => o.shape == s,
            Filter::ColorShape(c, s) => o.color == c && o.shape == s,
        }
    }

    fn text(self) -> String {
        match self {
            Filter::All => "objects".into(),
            Filter::Color(c) => format!("{} objects", c.name()),
            Filter::Shape(s) => s.plural().into(),
            Filter::ColorShape(c, s) => format!("{} {}", c.name(), s.plural()),
        }
    }

    fn parse(words: &[&str]) -> Option<Self> {
        match words {
            ["objects"] => Some(Filter::All),
            [c, "objects"] => Color::parse(c).map(Filter::Color),
            [p] => Shape::parse_plural(p).map(Filter::Shape),
            [c, p] => Some(Filter::ColorShape(Color::parse(c)?, Shape::parse_plural(p)?)),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Relation {
    LeftOf,
    RightOf,
    Above,
    Below,
}

impl Relation {
    const ALL: [Relation; 4] = [Relation::LeftOf, Relation::RightOf, Relation::Above, Relation::Below];

    fn text(self) -> &'static str {
        match self {
            Relation::LeftOf => "left of",
            Relation::RightOf => "right of",
            Relation::Above => "above",
            Relation::Below => "below",
        }
    }

    fn holds(self, candidate: &Object, reference: &Object) -> bool {
        match self {
            Relation::LeftOf => candidate.row == reference.row && candidate.col < reference.col,
            Relation::RightOf => candidate.row == reference.row && candidate.col > reference.col,
            Relation::Above => candidate.col == reference.col && candidate.row < reference.row,
            Relation::Below => candidate.col == reference.col && candidate.row > reference.row,
        }
    }
}

/// A structured question. Rendering and parsing are inverse, so the
/// answer can always be recomputed from the question text and the scenes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Query {
    ColorOf(Shape),
    ShapeOf(Color),
    SizeOf(Shape),
    Count(Filter),
    Statement(Color, Shape),
    MoreShapes(Shape),
    BothContain(Color),
    RelColor(Relation, Color, Shape),
    ColorOfSized(Size, Shape),
    ShapeOfSized(Size, Color),
    Describe,
    Region(usize, usize),
    ExistsShape(Shape),
    ExistsColor(Color),
    ListObjects,
}

fn unique<'a>(scene: &'a Scene, pred: impl Fn(&Object) -> bool) -> Option<&'a Object> {
    let mut it = scene.objects.iter().filter(|o| pred(o));
    let first = it.next()?;
    it.next().is_none().then_some(first)
}

fn yes_no(b: bool) -> String {
    if b { "yes" } else { "no" }.into()
}

fn true_false(b: bool) -> String {
    if b { "true" } else { "false" }.into()
}

impl Query {
    pub fn family(&self) -> FamilyKind {
        match self {
            Query::ColorOf(_) | Query::ShapeOf(_) | Query::SizeOf(_) => FamilyKind::VqaAttr,
            Query::Count(_) => FamilyKind::Count,
            Query::Statement(..) => FamilyKind::Entail,
            Query::MoreShapes(_) | Query::BothContain(_) => FamilyKind::NlvrPair,
            Query::RelColor(..) | Query::ColorOfSized(..) | Query::ShapeOfSized(..) => FamilyKind::Compositional,
            Query::Describe => FamilyKind::Caption,
            Query::Region(..) => FamilyKind::RegionDesc,
            Query::ExistsShape(_) | Query::ExistsColor(_) => FamilyKind::MatchYesno,
            Query::ListObjects => FamilyKind::DetectText,
        }
    }

    pub fn text(&self) -> String {
        match *self {
            Query::ColorOf(s) => format!("what color is the {}?", s.name()),
            Query::ShapeOf(c) => format!("what shape is the {} object?", c.name()),
            Query::SizeOf(s) => format!("what size is the {}?", s.name()),
            Query::Count(f) => format!("how many {} are there?", f.text()),
            Query::Statement(c, s) => format!("there is a {} {}", c.name(), s.name()),
            Query::MoreShapes(s) => format!("the left image has more {} than the right image", s.plural()),
            Query::BothContain(c) => format!("both images contain a {} object", c.name()),
            Query::RelColor(r, c, s) => {
                format!("what color is the object {} the {} {}?", r.text(), c.name(), s.name())
            }
            Query::ColorOfSized(z, s) => format!("what color is the {} {}?", z.name(), s.name()),
            Query::ShapeOfSized(z, c) => format!("what shape is the {} {} object?", z.name(), c.name()),
            Query::Describe => "describe the image".into(),
            Query::Region(r, c) => format!(
                "describe the object in row {} column {}",
                number_word(r + 1),
                number_word(c + 1)
            ),
            Query::ExistsShape(s) => format!("is there a {}?", s.name()),
            Query::ExistsColor(c) => format!("is there a {} object?", c.name()),
            Query::ListObjects => "list all the objects".into(),
        }
    }

    /// Recovers the structured query from (normalized) question text.
    pub fn parse(text: &str) -> Option<Self> {
        let toks = tokenize(text);
        let w: Vec<&str> = toks.iter().map(String::as_str).collect();
        let q = match w.as_slice() {
            ["what", "color", "is", "the", s] => Query::ColorOf(Shape::parse(s)?),
            ["what", "color", "is", "the", z, s] => Query::ColorOfSized(Size::parse(z)?, Shape::parse(s)?),
            ["what", "color", "is", "the", "object", "left", "of", "the", c, s] => {
                Query::RelColor(Relation::LeftOf, Color::parse(c)?, Shape::parse(s)?)
            }
            ["what", "color", "is", "the", "object", "right", "of", "the", c, s] => {
                Query::RelColor(Relation::RightOf, Color::parse(c)?, Shape::parse(s)?)
            }
            ["what", "color", "is", "the", "object", "above", "the", c, s] => {
                Query::RelColor(Relation::Above, Color::parse(c)?, Shape::parse(s)?)
            }
            ["what", "color", "is", "the", "object", "below", "the", c, s] => {
                Query::RelColor(Relation::Below, Color::parse(c)?, Shape::parse(s)?)
            }
            ["what", "shape", "is", "the", c, "object"] => Query::ShapeOf(Color::parse(c)?),
            ["what", "shape", "is", "the", z, c, "object"] => Query::ShapeOfSized(Size::parse(z)?, Color::parse(c)?),
            ["what", "size", "is", "the", s] => Query::SizeOf(Shape::parse(s)?),
            ["how", "many", rest @ .., "are", "there"] => Query::Count(Filter::parse(rest)?),
            ["there", "is", "a", c, s] => Query::Statement(Color::parse(c)?, Shape::parse(s)?),
            ["the", "left", "image", "has", "more", p, "than", "the", "right", "image"] => {
                Query::MoreShapes(Shape::parse_plural(p)?)
            }
            ["both", "images", "contain", "a", c, "object"] => Query::BothContain(Color::parse(c)?),
            ["describe", "the", "image"] => Query::Describe,
            ["describe", "the", "object", "in", "row", r, "column", c] => {
                Query::Region(parse_number(r)?.checked_sub(1)?, parse_number(c)?.checked_sub(1)?)
            }
            ["is", "there", "a", s] => Query::ExistsShape(Shape::parse(s)?),
            ["is", "there", "a", c, "object"] => Query::ExistsColor(Color::parse(c)?),
            ["list", "all", "the", "objects"] => Query::ListObjects,
            _ => return None,
        };
        Some(q)
    }

    /// The symbolic oracle. `None` when the question's presuppositions fail
    /// (non-unique referent, empty cell, wrong image count).
    pub fn answer(&self, scenes: &[&Scene]) -> Option<String> {
        let needed = self.family().image_count();
        if scenes.len() != needed {
            return None;
        }
        let s = scenes[0];
        let a = match *self {
            Query::ColorOf(shape) => unique(s, |o| o.shape == shape)?.color.name().into(),
            Query::ShapeOf(color) => unique(s, |o| o.color == color)?.shape.name().into(),
            Query::SizeOf(shape) => unique(s, |o| o.shape == shape)?.size.name().into(),
            Query::Count(f) => number_word(s.count(|o| f.matches(o))).into(),
            Query::Statement(color, shape) => {
                if s.count(|o| o.color == color && o.shape == shape) > 0 {
                    "true".into()
                } else if s.count(|o| o.color == color) > 0 && s.count(|o| o.shape == shape) > 0 {
                    "false".into()
                } else {
                    // the statement names an attribute value the scene never shows
                    "neutral".into()
                }
            }
            Query::MoreShapes(shape) => {
                true_false(s.count(|o| o.shape == shape) > scenes[1].count(|o| o.shape == shape))
            }
            Query::BothContain(color) => {
                true_false(s.count(|o| o.color == color) > 0 && scenes[1].count(|o| o.color == color) > 0)
            }
            Query::RelColor(rel, color, shape) => {
                let reference = unique(s, |o| o.color == color && o.shape == shape)?;
                unique(s, |o| rel.holds(o, reference))?.color.name().into()
            }
            Query::ColorOfSized(size, shape) => unique(s, |o| o.size == size && o.shape == shape)?.color.name().into(),
            Query::ShapeOfSized(size, color) => unique(s, |o| o.size == size && o.color == color)?.shape.name().into(),
            Query::Describe => {
                let parts: Vec<String> = s.objects.iter().map(Object::describe).collect();
                parts.join(" and ")
            }
            Query::Region(r, c) => s.object_at(r, c)?.describe(),
            Query::ExistsShape(shape) => yes_no(s.count(|o| o.shape == shape) > 0),
            Query::ExistsColor(color) => yes_no(s.count(|o| o.color == color) > 0),
            Query::ListObjects => s.detection_names().join(" "),
        };
        Some(a)
    }
}

fn pick<T: Copy, R: Rng>(rng: &mut R, items: &[T]) -> T {
    items[rng.random_range(0..items.len())]
}

fn any_object<R: Rng>(rng: &mut R, s: &Scene) -> Object {
    s.objects[rng.random_range(0..s.objects.len())]
}

/// One random question attempt; `wanted` steers label-balanced families.
fn sample_query<R: Rng>(kind: FamilyKind, scenes: &[&Scene], rng: &mut R, wanted: &str) -> Query {
    let s = scenes[0];
    match kind {
        FamilyKind::VqaAttr => {
            let o = any_object(rng, s);
            match rng.random_range(0..3) {
                0 => Query::ColorOf(o.shape),
                1 => Query::ShapeOf(o.color),
                _ => Query::SizeOf(o.shape),
            }
        }
        FamilyKind::Count => {
            let o = any_object(rng, s);
            let (color, shape) = if rng.random_bool(0.5) {
                (o.color, o.shape)
            } else {
                (pick(rng, &Color::ALL), pick(rng, &Shape::ALL))
            };
            Query::Count(match rng.random_range(0..4) {
                0 => Filter::All,
                1 => Filter::Color(color),
                2 => Filter::Shape(shape),
                _ => Filter::ColorShape(color, shape),
            })
        }
        FamilyKind::Entail => match wanted {
            "true" => {
                let o = any_object(rng, s);
                Query::Statement(o.color, o.shape)
            }
            "false" => Query::Statement(any_object(rng, s).color, any_object(rng, s).shape),
            _ => Query::Statement(pick(rng, &Color::ALL), pick(rng, &Shape::ALL)),
        },
        FamilyKind::NlvrPair => {
            if rng.random_bool(0.5) {
                Query::MoreShapes(pick(rng, &Shape::ALL))
            } else {
                Query::BothContain(pick(rng, &Color::ALL))
            }
        }
        FamilyKind::Compositional => {
            let o = any_object(rng, s);
            match rng.random_range(0..3) {
                0 => Query::RelColor(pick(rng, &Relation::ALL), o.color, o.shape),
                1 => Query::ColorOfSized(o.size, o.shape),
                _ => Query::ShapeOfSized(o.size, o.color),
            }
        }
        FamilyKind::Caption => Query::Describe,
        FamilyKind::RegionDesc => {
            let o = any_object(rng, s);
            Query::Region(o.row, o.col)
        }
        FamilyKind::MatchYesno => {
            let o = any_object(rng, s);
            let positive = wanted == "yes";
            match (rng.random_bool(0.5), positive) {
                (true, true) => Query::ExistsShape(o.shape),
                (false, true) => Query::ExistsColor(o.color),
                (true, false) => Query::ExistsShape(pick(rng, &Shape::ALL)),
                (false, false) => Query::ExistsColor(pick(rng, &Color::ALL)),
            }
        }
        FamilyKind::DetectText => Query::ListObjects,
    }
}

const RENDER_ATTEMPTS: usize = 64;

/// Renders one question/answer example over `scenes`.
///
/// Families with closed label sets (entail, nlvr_pair, match_yesno) draw the
/// label first so labels come out balanced. Fails with a retry-budget error
/// when the scenes cannot support the family; callers resample scenes.
pub fn render_task<R: Rng>(scenes: &[&Scene], family: FamilyKind, rng: &mut R) -> Result<TaskExample> {
    if scenes.len() != family.image_count() {
        return Err(Error::ImageCount(scenes.len()));
    }
    let wanted: &str = match family {
        FamilyKind::Entail => pick(rng, &["true", "false", "neutral"]),
        FamilyKind::NlvrPair => pick(rng, &["true", "false"]),
        FamilyKind::MatchYesno => pick(rng, &["yes", "no"]),
        _ => "",
    };
    for _ in 0..RENDER_ATTEMPTS {
        let q = sample_query(family, scenes, rng, wanted);
        let Some(answer) = q.answer(scenes) else {
            continue;
        };
        if !wanted.is_empty() && answer != wanted {
            continue;
        }
        return Ok(TaskExample {
            images: scenes.iter().map(|s| s.raster.clone()).collect(),
            image_ids: scenes.iter().map(|s| s.id).collect(),
            input_text: q.text(),
            target_text: answer,
            tag: TaskTag::Family(family),
        });
    }
    Err(Error::RetryBudget {
        family: family.name(),
        attempts: RENDER_ATTEMPTS,
    })
}

/// Every word any family, prompt or caption can produce.
pub(crate) fn lexicon() -> Vec<String> {
    let mut words: Vec<String> = vec![];
    for t in FamilyKind::ALL.iter().flat_map(|k| TaskFamily::of(*k).templates.iter()) {
        let mut literal = String::new();
        let mut depth = 0;
        for ch in t.chars() {
            match ch {
                '{' => depth += 1,
                '}' => depth -= 1,
                _ if depth == 0 => literal.push(ch),
                _ => {}
            }
        }
        words.extend(tokenize(&literal));
    }
    words.extend(ATTRS.iter().map(|s| s.to_string()));
    words.extend(NUMBERS.iter().map(|s| s.to_string()));
    words.extend(Shape::ALL.iter().map(|s| s.plural().to_string()));
    for w in [
        "true", "false", "neutral", "yes", "no", "and", "a", "left", "right", "of", "above", "below", "caption",
        "the", "image", "objects",
    ] {
        words.push(w.into());
    }
    words.sort();
    words.dedup();
    words
}
