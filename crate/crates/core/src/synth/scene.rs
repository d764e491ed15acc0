use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::raster::Raster;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Shape {
    Circle,
    Square,
    Triangle,
    Star,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    Purple,
    Orange,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Size {
    Small,
    Large,
}

impl Shape {
    pub const ALL: [Shape; 4] = [Shape::Circle, Shape::Square, Shape::Triangle, Shape::Star];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
            Shape::Star => "star",
        }
    }

    pub fn plural(self) -> &'static str {
        match self {
            Shape::Circle => "circles",
            Shape::Square => "squares",
            Shape::Triangle => "triangles",
            Shape::Star => "stars",
        }
    }

    pub fn parse(word: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|s| s.name() == word)
    }

    pub fn parse_plural(word: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|s| s.plural() == word)
    }
}

impl Color {
    pub const ALL: [Color; 6] = [
        Color::Red,
        Color::Green,
        Color::Blue,
        Color::Yellow,
        Color::Purple,
        Color::Orange,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
            Color::Purple => "purple",
            Color::Orange => "orange",
        }
    }

    pub fn rgb(self) -> [u8; 3] {
        match self {
            Color::Red => [230, 30, 30],
            Color::Green => [30, 200, 30],
            Color::Blue => [40, 60, 230],
            Color::Yellow => [230, 220, 40],
            Color::Purple => [150, 40, 200],
            Color::Orange => [240, 140, 20],
        }
    }

    pub fn parse(word: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == word)
    }
}

impl Size {
    pub const ALL: [Size; 2] = [Size::Small, Size::Large];

    pub fn name(self) -> &'static str {
        match self {
            Size::Small => "small",
            Size::Large => "large",
        }
    }

    pub fn parse(word: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|s| s.name() == word)
    }

    fn radius_fraction(self) -> f64 {
        match self {
            Size::Small => 0.25,
            Size::Large => 0.45,
        }
    }
}

const NUMBER_WORDS: [&str; 17] = [
    "zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten", "eleven", "twelve",
    "thirteen", "fourteen", "fifteen", "sixteen",
];

/// Spelled-out number; counts never exceed grid capacity.
pub fn number_word(n: usize) -> &'static str {
    NUMBER_WORDS[n.min(NUMBER_WORDS.len() - 1)]
}

pub(crate) fn parse_number(word: &str) -> Option<usize> {
    NUMBER_WORDS.iter().position(|w| *w == word)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Object {
    pub shape: Shape,
    pub color: Color,
    pub size: Size,
    pub row: usize,
    pub col: usize,
}

impl Object {
    /// "large red circle"
    pub fn describe(&self) -> String {
        format!("{} {} {}", self.size.name(), self.color.name(), self.shape.name())
    }
}

/// Layout and density of generated scenes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub rows: usize,
    pub cols: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub image_height: usize,
    pub image_width: usize,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            rows: 4,
            cols: 4,
            min_objects: 2,
            max_objects: 5,
            image_height: 32,
            image_width: 32,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.rows < 2 || self.cols < 2 {
            return Err(Error::Scene(format!("grid {}x{} is below 2x2", self.rows, self.cols)));
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return Err(Error::Scene(format!(
                "object range {}..={} is empty or starts at zero",
                self.min_objects, self.max_objects
            )));
        }
        if self.max_objects > self.rows * self.cols {
            return Err(Error::Scene(format!(
                "{} objects requested but the grid has {} cells",
                self.max_objects,
                self.rows * self.cols
            )));
        }
        if self.image_height < self.rows * 4 || self.image_width < self.cols * 4 {
            return Err(Error::Scene("cells must be at least 4 pixels".into()));
        }
        Ok(())
    }
}

/// A symbolic scene plus its rendering. Objects are kept in row-major cell
/// order and no cell holds more than one object.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Scene {
    pub id: u64,
    pub rows: usize,
    pub cols: usize,
    pub objects: Vec<Object>,
    pub raster: Raster,
}

impl Scene {
    pub fn object_at(&self, row: usize, col: usize) -> Option<&Object> {
        self.objects.iter().find(|o| o.row == row && o.col == col)
    }

    pub fn count(&self, pred: impl Fn(&Object) -> bool) -> usize {
        self.objects.iter().filter(|o| pred(o)).count()
    }

    /// Row-major shape names, one per object instance.
    pub fn detection_names(&self) -> Vec<&'static str> {
        self.objects.iter().map(|o| o.shape.name()).collect()
    }
}

/// Draws a scene. Object count is uniform over the spec range, cells are
/// distinct, attributes are uniform.
pub fn gen_scene<R: Rng>(rng: &mut R, spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let n = rng.random_range(spec.min_objects..=spec.max_objects);
    let mut cells: Vec<usize> = (0..spec.rows * spec.cols).collect();
    let (chosen, _) = cells.partial_shuffle(rng, n);
    let mut chosen = chosen.to_vec();
    chosen.sort_unstable();
    let objects: Vec<Object> = chosen
        .into_iter()
        .map(|cell| Object {
            shape: Shape::ALL[rng.random_range(0..Shape::ALL.len())],
            color: Color::ALL[rng.random_range(0..Color::ALL.len())],
            size: Size::ALL[rng.random_range(0..Size::ALL.len())],
            row: cell / spec.cols,
            col: cell % spec.cols,
        })
        .collect();
    let raster = render_scene(spec, &objects);
    Ok(Scene {
        id: 0,
        rows: spec.rows,
        cols: spec.cols,
        objects,
        raster,
    })
}

fn covers(shape: Shape, u: f64, v: f64) -> bool {
    match shape {
        Shape::Circle => u * u + v * v <= 1.0,
        Shape::Square => u.abs() <= 0.85 && v.abs() <= 0.85,
        // apex up
        Shape::Triangle => (-0.9..=0.9).contains(&v) && u.abs() <= (v + 0.9) / 1.8 * 0.95,
        // diagonal cross
        Shape::Star => u.abs() <= 1.0 && v.abs() <= 1.0 && (u.abs() - v.abs()).abs() <= 0.35,
    }
}

/// Rasterizes objects onto a black background; a pure function of the list.
pub fn render_scene(spec: &SceneSpec, objects: &[Object]) -> Raster {
    let mut img = Raster::blank(spec.image_height, spec.image_width);
    let ch = spec.image_height as f64 / spec.rows as f64;
    let cw = spec.image_width as f64 / spec.cols as f64;
    for o in objects {
        let cy = (o.row as f64 + 0.5) * ch;
        let cx = (o.col as f64 + 0.5) * cw;
        let r = o.size.radius_fraction() * ch.min(cw);
        let y0 = libm::floor(cy - ch / 2.0) as usize;
        let x0 = libm::floor(cx - cw / 2.0) as usize;
        let y1 = (libm::ceil(cy + ch / 2.0) as usize).min(spec.image_height);
        let x1 = (libm::ceil(cx + cw / 2.0) as usize).min(spec.image_width);
        for y in y0..y1 {
            for x in x0..x1 {
                let v = (y as f64 + 0.5 - cy) / r;
                let u = (x as f64 + 0.5 - cx) / r;
                if covers(o.shape, u, v) {
                    img.put(y, x, o.color.rgb());
                }
            }
        }
    }
    img
}

/// A noisy web-style caption: one to three of the scene's objects in
/// random order, e.g. "a large red circle and a small blue square".
pub fn pretrain_caption<R: Rng>(scene: &Scene, rng: &mut R) -> String {
    let max = scene.objects.len().min(3);
    let m = rng.random_range(1..=max);
    let mut idx: Vec<usize> = (0..scene.objects.len()).collect();
    let (picked, _) = idx.partial_shuffle(rng, m);
    let parts: Vec<String> = picked
        .iter()
        .map(|&i| format!("a {}", scene.objects[i].describe()))
        .collect();
    parts.join(" and ")
}
