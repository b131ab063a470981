//! Synthetic grounded-composition QA task.
//!
//! A world is a small attribute vocabulary (sizes, colors, shapes) plus a
//! blacklist of held-out (shape, color) pairs. Queries are one or two
//! descriptors; a descriptor constrains up to three attributes of a single
//! object. The answer is "yes" iff every descriptor is matched by at least
//! one scene object. Training queries never co-mention a blacklisted pair;
//! each blacklisted pair instead yields test triplets that exercise it at
//! three levels of compositional complexity.

mod gen;
mod io;

pub use gen::{collect_query_pairs, generate_datasets, generate_world, training_cooccurrences};
pub use io::{load_samples, load_vocabulary, save_samples, save_vocabulary};

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("blacklist of {requested} pairs infeasible: at most {max} (shape,color) pairs can be held out while every item stays trainable")]
    InfeasibleBlacklist { requested: usize, max: usize },
    #[error("generation budget exhausted while {building} (limit {budget} attempts)")]
    BudgetExhausted { building: &'static str, budget: usize },
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: unsupported schema_version {found} (expected {expected})")]
    SchemaVersion { line: usize, found: u32, expected: u32 },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("item id {id} out of range for vocabulary of {total} items")]
    UnknownItem { id: usize, total: usize },
}

pub type Result<T> = std::result::Result<T, SynthError>;

pub const SCHEMA_VERSION: u32 = 1;

/// Which attribute family an item id belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ItemKind {
    Size,
    Color,
    Shape,
}

/// Attribute vocabulary. Item ids are dense: sizes first, then colors, then
/// shapes.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Vocabulary {
    pub sizes: Vec<String>,
    pub colors: Vec<String>,
    pub shapes: Vec<String>,
}

impl Vocabulary {
    pub fn with_counts(n_sizes: usize, n_colors: usize, n_shapes: usize) -> Vocabulary {
        fn take(base: &[&str], n: usize, prefix: &str) -> Vec<String> {
            (0..n)
                .map(|i| {
                    base.get(i)
                        .map(|s| s.to_string())
                        .unwrap_or_else(|| format!("{prefix}{i}"))
                })
                .collect()
        }
        Vocabulary {
            sizes: take(&["small", "medium", "large", "huge"], n_sizes, "size"),
            colors: take(
                &["red", "blue", "green", "yellow", "purple", "orange", "brown", "pink"],
                n_colors,
                "color",
            ),
            shapes: take(
                &["ball", "cube", "cone", "pyramid", "cylinder", "ring", "star", "disk"],
                n_shapes,
                "shape",
            ),
        }
    }

    pub fn n_sizes(&self) -> usize {
        self.sizes.len()
    }

    pub fn n_colors(&self) -> usize {
        self.colors.len()
    }

    pub fn n_shapes(&self) -> usize {
        self.shapes.len()
    }

    pub fn total(&self) -> usize {
        self.sizes.len() + self.colors.len() + self.shapes.len()
    }

    pub fn color_offset(&self) -> usize {
        self.sizes.len()
    }

    pub fn shape_offset(&self) -> usize {
        self.sizes.len() + self.colors.len()
    }

    pub fn kind_of(&self, id: usize) -> Result<ItemKind> {
        if id < self.color_offset() {
            Ok(ItemKind::Size)
        } else if id < self.shape_offset() {
            Ok(ItemKind::Color)
        } else if id < self.total() {
            Ok(ItemKind::Shape)
        } else {
            Err(SynthError::UnknownItem { id, total: self.total() })
        }
    }

    pub fn size_id(&self, index: usize) -> usize {
        index
    }

    pub fn color_id(&self, index: usize) -> usize {
        self.color_offset() + index
    }

    pub fn shape_id(&self, index: usize) -> usize {
        self.shape_offset() + index
    }

    pub fn name_of(&self, id: usize) -> Result<&str> {
        match self.kind_of(id)? {
            ItemKind::Size => Ok(&self.sizes[id]),
            ItemKind::Color => Ok(&self.colors[id - self.color_offset()]),
            ItemKind::Shape => Ok(&self.shapes[id - self.shape_offset()]),
        }
    }
}

/// World generation parameters.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct WorldConfig {
    pub n_sizes: usize,
    pub n_colors: usize,
    pub n_shapes: usize,
    /// Number of held-out (shape, color) pairs.
    pub blacklist_size: usize,
    pub min_objects: usize,
    pub max_objects: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            n_sizes: 3,
            n_colors: 6,
            n_shapes: 6,
            blacklist_size: 8,
            min_objects: 2,
            max_objects: 6,
        }
    }
}

/// A generated world: the vocabulary plus the held-out pairs.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct World {
    pub config: WorldConfig,
    pub vocab: Vocabulary,
    /// Held-out pairs as (shape item id, color item id).
    pub blacklist: Vec<(usize, usize)>,
}

/// Dataset size request.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct GenCounts {
    pub train: usize,
    /// Held-out samples drawn from the training distribution.
    pub iid: usize,
    pub triplets: usize,
}

impl Default for GenCounts {
    fn default() -> Self {
        GenCounts { train: 20000, iid: 2000, triplets: 200 }
    }
}

/// One object in a scene.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SceneObject {
    pub size: usize,
    pub color: usize,
    pub shape: usize,
}

pub type Scene = Vec<SceneObject>;

/// A phrase: up to one item per attribute family, at least one present.
/// Surface length is the number of present items.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct Descriptor {
    pub size: Option<usize>,
    pub color: Option<usize>,
    pub shape: Option<usize>,
}

impl Descriptor {
    pub fn items(&self) -> impl Iterator<Item = usize> + '_ {
        [self.size, self.color, self.shape].into_iter().flatten()
    }

    pub fn len(&self) -> usize {
        self.items().count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Does `object` agree with every item present in this descriptor?
    pub fn matches(&self, object: &SceneObject) -> bool {
        self.size.map_or(true, |s| s == object.size)
            && self.color.map_or(true, |c| c == object.color)
            && self.shape.map_or(true, |s| s == object.shape)
    }
}

/// Complexity tier of a sample's novel composition, or `Train` for ordinary
/// training-distribution samples.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Train,
    Pp,
    Pw,
    Ww,
}

impl std::fmt::Display for Level {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Level::Train => write!(f, "train"),
            Level::Pp => write!(f, "pp"),
            Level::Pw => write!(f, "pw"),
            Level::Ww => write!(f, "ww"),
        }
    }
}

/// One question about one scene, with its ground-truth answer.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub level: Level,
    pub triplet_id: Option<String>,
    pub query: Vec<Descriptor>,
    pub phrase_lengths: Vec<usize>,
    pub scene: Scene,
    pub answer: bool,
    /// The held-out item pair this test sample exercises (ids sorted
    /// ascending); `None` for training-distribution samples.
    pub novel_composition: Option<(usize, usize)>,
    /// Unknown fields from external records, preserved on re-serialization.
    pub extra: serde_json::Map<String, serde_json::Value>,
}

/// The three samples derived from one held-out pair, with the phrases that
/// instantiate it. `w1` is the shape (head) of `p1`; `w2` is the color
/// (modifier) of `p2`.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Triplet {
    pub triplet_id: String,
    pub w1: usize,
    pub w2: usize,
    pub p1: Vec<usize>,
    pub p2: Vec<usize>,
    pub pp_id: String,
    pub pw_id: String,
    pub ww_id: String,
}

/// Everything one generation run produces.
#[derive(Clone, Debug)]
pub struct Datasets {
    pub train: Vec<Sample>,
    pub iid: Vec<Sample>,
    pub test: Vec<Sample>,
    pub triplets: Vec<Triplet>,
}

/// Ground truth: "yes" iff every descriptor is matched by at least one
/// object. Descriptors may match the same object.
pub fn oracle_answer(scene: &Scene, query: &[Descriptor]) -> bool {
    query
        .iter()
        .all(|d| scene.iter().any(|obj| d.matches(obj)))
}
