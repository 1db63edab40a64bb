//! Synthetic before/after scene pairs rendered straight to feature grids.
//!
//! A scene is a `G×G` grid of optional objects. A pair applies exactly one
//! semantic change to the before scene, then renders the after scene through
//! the distractors (cyclic shift, gain, feature noise). Captions describe the
//! semantic change only.

mod io;
mod render;

use std::fmt;
use std::str::FromStr;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use io::{
    read_features, read_manifest, write_features, write_manifest, ManifestRecord, FEATURE_MAGIC,
};
pub use render::{Codebook, FeatureGrid};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Cube,
    Sphere,
    Cylinder,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    Gray,
    Brown,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Size {
    Small,
    Large,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Cube, Shape::Sphere, Shape::Cylinder];

    pub fn word(self) -> &'static str {
        match self {
            Shape::Cube => "cube",
            Shape::Sphere => "sphere",
            Shape::Cylinder => "cylinder",
        }
    }
}

impl Color {
    pub const ALL: [Color; 6] = [
        Color::Red,
        Color::Green,
        Color::Blue,
        Color::Yellow,
        Color::Gray,
        Color::Brown,
    ];

    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
            Color::Gray => "gray",
            Color::Brown => "brown",
        }
    }
}

impl Size {
    pub const ALL: [Size; 2] = [Size::Small, Size::Large];

    pub fn word(self) -> &'static str {
        match self {
            Size::Small => "small",
            Size::Large => "large",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Object {
    pub shape: Shape,
    pub color: Color,
    pub size: Size,
}

impl Object {
    pub fn new(shape: Shape, color: Color, size: Size) -> Self {
        Self { shape, color, size }
    }

    fn random(rng: &mut impl Rng) -> Self {
        Self {
            shape: *Shape::ALL.choose(rng).expect("nonempty"),
            color: *Color::ALL.choose(rng).expect("nonempty"),
            size: *Size::ALL.choose(rng).expect("nonempty"),
        }
    }
}

/// Grid coordinate, `row` major.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cell {
    pub row: usize,
    pub col: usize,
}

impl Cell {
    pub fn new(row: usize, col: usize) -> Self {
        Self { row, col }
    }

    /// Cyclic translation on a `grid`-sized torus.
    pub fn shifted(self, shift: (i32, i32), grid: usize) -> Self {
        let g = grid as i64;
        Self {
            row: (self.row as i64 + shift.0 as i64).rem_euclid(g) as usize,
            col: (self.col as i64 + shift.1 as i64).rem_euclid(g) as usize,
        }
    }

    /// Chebyshev distance on the torus.
    pub fn cyclic_distance(self, other: Cell, grid: usize) -> usize {
        let d = |a: usize, b: usize| {
            let d = a.abs_diff(b);
            d.min(grid - d)
        };
        d(self.row, other.row).max(d(self.col, other.col))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scene {
    grid_size: usize,
    cells: Vec<Option<Object>>,
}

impl Scene {
    pub fn empty(grid_size: usize) -> Self {
        Self {
            grid_size,
            cells: vec![None; grid_size * grid_size],
        }
    }

    pub fn grid_size(&self) -> usize {
        self.grid_size
    }

    pub fn get(&self, cell: Cell) -> Option<Object> {
        self.cells[cell.row * self.grid_size + cell.col]
    }

    pub fn set(&mut self, cell: Cell, object: Option<Object>) {
        self.cells[cell.row * self.grid_size + cell.col] = object;
    }

    pub fn object_count(&self) -> usize {
        self.cells.iter().filter(|c| c.is_some()).count()
    }

    pub fn occupied(&self) -> Vec<Cell> {
        self.all_cells()
            .filter(|&c| self.get(c).is_some())
            .collect()
    }

    pub fn vacant(&self) -> Vec<Cell> {
        self.all_cells()
            .filter(|&c| self.get(c).is_none())
            .collect()
    }

    fn all_cells(&self) -> impl Iterator<Item = Cell> + '_ {
        let g = self.grid_size;
        (0..g * g).map(move |i| Cell::new(i / g, i % g))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChangeType {
    Color,
    Add,
    Drop,
    Move,
    None,
}

impl ChangeType {
    pub const ALL: [ChangeType; 5] = [
        ChangeType::Add,
        ChangeType::Drop,
        ChangeType::Move,
        ChangeType::Color,
        ChangeType::None,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ChangeType::Color => "color",
            ChangeType::Add => "add",
            ChangeType::Drop => "drop",
            ChangeType::Move => "move",
            ChangeType::None => "none",
        }
    }
}

impl fmt::Display for ChangeType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ChangeType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ChangeType::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown change type {s:?}")))
    }
}

/// The semantic change between the two scenes, in scene coordinates.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChangeRecord {
    pub change_type: ChangeType,
    pub before_cell: Option<Cell>,
    pub after_cell: Option<Cell>,
    pub before_object: Option<Object>,
    pub after_object: Option<Object>,
}

impl ChangeRecord {
    pub fn none() -> Self {
        Self {
            change_type: ChangeType::None,
            before_cell: None,
            after_cell: None,
            before_object: None,
            after_object: None,
        }
    }
}

/// Non-semantic variation applied to the after scene.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistractorConfig {
    /// Cyclic translation `(rows, cols)`; content moves by `+shift`.
    pub shift: (i32, i32),
    pub gain: f64,
    pub noise_sigma: f64,
}

impl Default for DistractorConfig {
    fn default() -> Self {
        Self {
            shift: (0, 0),
            gain: 1.0,
            noise_sigma: 0.0,
        }
    }
}

impl DistractorConfig {
    pub fn validate(&self, grid_size: usize) -> Result<()> {
        let half = (grid_size / 2) as i32;
        if self.shift.0.abs() > half || self.shift.1.abs() > half {
            return Err(Error::Contract(format!(
                "shift {:?} exceeds half the grid ({half})",
                self.shift
            )));
        }
        if !(self.gain > 0.0 && self.gain.is_finite()) {
            return Err(Error::Contract(format!(
                "gain must be positive, got {}",
                self.gain
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Contract(format!(
                "noise sigma must be >= 0, got {}",
                self.noise_sigma
            )));
        }
        Ok(())
    }
}

/// Ranges from which per-pair distractors are drawn when building datasets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistractorRange {
    pub max_shift: i32,
    pub gain_min: f64,
    pub gain_max: f64,
    pub noise_sigma: f64,
}

impl DistractorRange {
    pub fn none() -> Self {
        Self {
            max_shift: 0,
            gain_min: 1.0,
            gain_max: 1.0,
            noise_sigma: 0.0,
        }
    }

    /// Shift up to `k` cells and gain in `[1 - k/5, 1 + k/4]`.
    ///
    /// Magnitude 1 is the moderate setting (gain in `[0.8, 1.25]`), magnitude 2
    /// the strong one (gain in `[0.6, 1.5]`).
    pub fn magnitude(k: u32, noise_sigma: f64) -> Self {
        let k = f64::from(k);
        Self {
            max_shift: k as i32,
            gain_min: (1.0 - 0.2 * k).max(0.1),
            gain_max: 1.0 + 0.25 * k,
            noise_sigma,
        }
    }

    pub fn sample(&self, rng: &mut impl Rng) -> DistractorConfig {
        let s = self.max_shift;
        let shift = if s == 0 {
            (0, 0)
        } else {
            (rng.random_range(-s..=s), rng.random_range(-s..=s))
        };
        let gain = if self.gain_max > self.gain_min {
            rng.random_range(self.gain_min..=self.gain_max)
        } else {
            self.gain_min
        };
        DistractorConfig {
            shift,
            gain,
            noise_sigma: self.noise_sigma,
        }
    }
}

/// Caption words between the begin/end sentinels.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Caption(pub Vec<String>);

impl Caption {
    pub fn words(&self) -> &[String] {
        &self.0
    }

    pub fn text(&self) -> String {
        self.0.join(" ")
    }

    pub fn parse(text: &str) -> Self {
        Caption(text.split_whitespace().map(str::to_owned).collect())
    }
}

impl fmt::Display for Caption {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.text())
    }
}

/// Templated description of a change.
pub fn caption_of(change: &ChangeRecord) -> Caption {
    let words: Vec<&str> = match (
        change.change_type,
        change.before_object,
        change.after_object,
    ) {
        (ChangeType::None, ..) => vec!["no", "change", "was", "made"],
        (ChangeType::Add, _, Some(o)) => vec![
            "the",
            o.size.word(),
            o.color.word(),
            o.shape.word(),
            "was",
            "added",
        ],
        (ChangeType::Drop, Some(o), _) => vec![
            "the",
            o.size.word(),
            o.color.word(),
            o.shape.word(),
            "disappeared",
        ],
        (ChangeType::Move, Some(o), _) => vec![
            "the",
            o.size.word(),
            o.color.word(),
            o.shape.word(),
            "moved",
        ],
        (ChangeType::Color, Some(b), Some(a)) => {
            vec![
                "the",
                b.size.word(),
                b.shape.word(),
                "changed",
                "to",
                a.color.word(),
            ]
        }
        _ => panic!("inconsistent change record {change:?}"),
    };
    Caption(words.into_iter().map(str::to_owned).collect())
}

/// Every caption the template grammar can produce.
pub fn template_corpus() -> Vec<Caption> {
    let mut out = vec![caption_of(&ChangeRecord::none())];
    for &shape in &Shape::ALL {
        for &color in &Color::ALL {
            for &size in &Size::ALL {
                let o = Object::new(shape, color, size);
                for t in [
                    ChangeType::Add,
                    ChangeType::Drop,
                    ChangeType::Move,
                    ChangeType::Color,
                ] {
                    let after = if t == ChangeType::Color {
                        Object::new(shape, Color::ALL[(color as usize + 1) % 6], size)
                    } else {
                        o
                    };
                    out.push(caption_of(&ChangeRecord {
                        change_type: t,
                        before_cell: None,
                        after_cell: None,
                        before_object: Some(o),
                        after_object: Some(after),
                    }));
                }
            }
        }
    }
    out
}

/// Applies one semantic change to `scene`.
pub fn apply_change<R: Rng>(
    scene: &Scene,
    change_type: ChangeType,
    rng: &mut R,
) -> Result<(Scene, ChangeRecord)> {
    let mut after = scene.clone();
    let occupied = scene.occupied();
    let vacant = scene.vacant();
    let pick = |cells: &[Cell], rng: &mut R, what: &str| -> Result<Cell> {
        cells
            .choose(rng)
            .copied()
            .ok_or_else(|| Error::Generation(format!("{change_type} needs {what}")))
    };
    let record = match change_type {
        ChangeType::None => ChangeRecord::none(),
        ChangeType::Add => {
            let cell = pick(&vacant, rng, "an empty cell but the grid is full")?;
            let obj = Object::random(rng);
            after.set(cell, Some(obj));
            ChangeRecord {
                change_type,
                before_cell: None,
                after_cell: Some(cell),
                before_object: None,
                after_object: Some(obj),
            }
        }
        ChangeType::Drop => {
            let cell = pick(&occupied, rng, "an object but the grid is empty")?;
            let obj = scene.get(cell);
            after.set(cell, None);
            ChangeRecord {
                change_type,
                before_cell: Some(cell),
                after_cell: None,
                before_object: obj,
                after_object: None,
            }
        }
        ChangeType::Move => {
            if vacant.is_empty() {
                return Err(Error::Generation(
                    "move needs an empty cell but the grid is full".into(),
                ));
            }
            let from = pick(&occupied, rng, "an object but the grid is empty")?;
            let g = scene.grid_size();
            // Destinations within one cell are indistinguishable from a
            // one-cell viewpoint shift, so prefer farther ones.
            let far: Vec<Cell> = vacant
                .iter()
                .copied()
                .filter(|c| c.cyclic_distance(from, g) >= 2)
                .collect();
            let to = if far.is_empty() {
                pick(&vacant, rng, "an empty cell")?
            } else {
                pick(&far, rng, "an empty cell")?
            };
            let obj = scene.get(from);
            after.set(from, None);
            after.set(to, obj);
            ChangeRecord {
                change_type,
                before_cell: Some(from),
                after_cell: Some(to),
                before_object: obj,
                after_object: obj,
            }
        }
        ChangeType::Color => {
            let cell = pick(&occupied, rng, "an object but the grid is empty")?;
            let before = scene.get(cell).expect("occupied");
            let choices: Vec<Color> = Color::ALL
                .into_iter()
                .filter(|&c| c != before.color)
                .collect();
            let color = *choices.choose(rng).expect("five other colors");
            let new = Object { color, ..before };
            after.set(cell, Some(new));
            ChangeRecord {
                change_type,
                before_cell: Some(cell),
                after_cell: Some(cell),
                before_object: Some(before),
                after_object: Some(new),
            }
        }
    };
    Ok((after, record))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub grid_size: usize,
    /// Feature channels per cell.
    pub channels: usize,
    /// Seed of the attribute→feature codebook shared by every scene.
    pub codebook_seed: u64,
    pub min_objects: usize,
    pub max_objects: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            grid_size: 6,
            channels: 32,
            codebook_seed: 0,
            min_objects: 3,
            max_objects: 6,
        }
    }
}

/// A before/after pair with its ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairSample {
    pub before: FeatureGrid,
    pub after: FeatureGrid,
    pub caption: Caption,
    pub change: ChangeRecord,
    pub distractor: DistractorConfig,
    pub seed: u64,
    pub before_scene: Scene,
    pub after_scene: Scene,
}

impl PairSample {
    /// Cells where the change is visible, in feature-grid coordinates: the
    /// before-side cell as is, the after-side cell moved by the shift.
    pub fn change_cells(&self) -> Vec<Cell> {
        change_cells(&self.change, &self.distractor, self.before.height)
    }
}

pub fn change_cells(
    change: &ChangeRecord,
    distractor: &DistractorConfig,
    grid_size: usize,
) -> Vec<Cell> {
    let mut cells = Vec::new();
    if let Some(c) = change.before_cell {
        cells.push(c);
    }
    if let Some(c) = change.after_cell {
        let c = c.shifted(distractor.shift, grid_size);
        if !cells.contains(&c) {
            cells.push(c);
        }
    }
    cells
}

#[derive(Debug, Clone)]
pub struct SceneGenerator {
    config: GeneratorConfig,
    codebook: Codebook,
}

impl SceneGenerator {
    pub fn new(config: GeneratorConfig) -> Result<Self> {
        if config.grid_size < 3 {
            return Err(Error::Contract(format!(
                "grid size must be >= 3, got {}",
                config.grid_size
            )));
        }
        if config.channels == 0 {
            return Err(Error::Contract("feature channels must be positive".into()));
        }
        let cells = config.grid_size * config.grid_size;
        if config.min_objects == 0
            || config.min_objects > config.max_objects
            || config.max_objects > cells
        {
            return Err(Error::Contract(format!(
                "object count range [{}, {}] invalid for {cells} cells",
                config.min_objects, config.max_objects
            )));
        }
        let codebook = Codebook::new(config.codebook_seed, config.channels);
        Ok(Self { config, codebook })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn codebook(&self) -> &Codebook {
        &self.codebook
    }

    pub fn random_scene(&self, rng: &mut impl Rng) -> Scene {
        let g = self.config.grid_size;
        let count = rng.random_range(self.config.min_objects..=self.config.max_objects);
        let mut scene = Scene::empty(g);
        let all: Vec<Cell> = (0..g * g).map(|i| Cell::new(i / g, i % g)).collect();
        for &cell in all.choose_multiple(rng, count) {
            scene.set(cell, Some(Object::random(rng)));
        }
        scene
    }

    /// Deterministic in `(seed, change_type, distractor)` and the generator
    /// config.
    pub fn generate_pair(
        &self,
        seed: u64,
        change_type: ChangeType,
        distractor: DistractorConfig,
    ) -> Result<PairSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let before_scene = self.random_scene(&mut rng);
        self.pair_from_scene(before_scene, seed, change_type, distractor, &mut rng)
    }

    /// Builds a pair from an explicit before scene.
    pub fn pair_from_scene(
        &self,
        before_scene: Scene,
        seed: u64,
        change_type: ChangeType,
        distractor: DistractorConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<PairSample> {
        if before_scene.grid_size() != self.config.grid_size {
            return Err(Error::Contract(format!(
                "scene grid {} does not match generator grid {}",
                before_scene.grid_size(),
                self.config.grid_size
            )));
        }
        distractor.validate(self.config.grid_size)?;
        let (after_scene, change) = apply_change(&before_scene, change_type, rng)?;
        let noise_seed = rng.random::<u64>();
        let before = self.render_features(&before_scene, &DistractorConfig::default(), 0);
        let after = self.render_features(&after_scene, &distractor, noise_seed);
        Ok(PairSample {
            before,
            after,
            caption: caption_of(&change),
            change,
            distractor,
            seed,
            before_scene,
            after_scene,
        })
    }

    pub fn render_features(
        &self,
        scene: &Scene,
        distractor: &DistractorConfig,
        noise_seed: u64,
    ) -> FeatureGrid {
        self.codebook.render(scene, distractor, noise_seed)
    }
}

/// Everything needed to regenerate a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub generator: GeneratorConfig,
    pub count: usize,
    pub seed: u64,
    pub change_mix: Vec<ChangeType>,
    pub distractor: DistractorRange,
}

impl DatasetSpec {
    /// Named dataset presets: `synthetic` (moderate distractors),
    /// `synthetic-hard` (strong distractors), `synthetic-clean` (none).
    pub fn preset(name: &str, count: usize, seed: u64) -> Result<Self> {
        let distractor = match name {
            "synthetic" => DistractorRange::magnitude(1, 0.05),
            "synthetic-hard" => DistractorRange::magnitude(2, 0.05),
            "synthetic-clean" => DistractorRange::none(),
            other => return Err(Error::Config(format!("unknown dataset preset {other:?}"))),
        };
        Ok(Self {
            generator: GeneratorConfig::default(),
            count,
            seed,
            change_mix: ChangeType::ALL.to_vec(),
            distractor,
        })
    }

    /// Seed of the `index`-th pair.
    pub fn pair_seed(&self, index: usize) -> u64 {
        splitmix64(self.seed ^ splitmix64(index as u64))
    }

    pub fn generate(&self) -> Result<Vec<PairSample>> {
        if self.change_mix.is_empty() {
            return Err(Error::Contract("change mix is empty".into()));
        }
        let generator = SceneGenerator::new(self.generator.clone())?;
        (0..self.count)
            .map(|i| {
                let seed = self.pair_seed(i);
                let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed));
                let distractor = self.distractor.sample(&mut rng);
                let change_type = self.change_mix[i % self.change_mix.len()];
                generator.generate_pair(seed, change_type, distractor)
            })
            .collect()
    }
}

pub(crate) fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
