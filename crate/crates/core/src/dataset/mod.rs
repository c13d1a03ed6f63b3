//! Annotated image manifests and the synthetic desk-scale corpus.
//!
//! Manifests are line-delimited JSON, one sample per line:
//!
//! ```text
//! {"id":"train_overlay_0000","image_path":"train_overlay_0000.png","category":"overlay","split":"train"}
//! ```
//!
//! Relative `image_path`s resolve against the manifest's directory.

mod synth;

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use synth::{
    generate_synthetic_corpus, render_text_line, NaturalStyle, OverlayStyle, SyntheticSpec,
    GLYPH_SIZE,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Overlay,
    Natural,
    None,
}

impl Category {
    /// Enum order; also the order remainder samples are assigned in.
    pub const ALL: [Category; 3] = [Category::Overlay, Category::Natural, Category::None];

    pub fn as_str(self) -> &'static str {
        match self {
            Category::Overlay => "overlay",
            Category::Natural => "natural",
            Category::None => "none",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Category {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "overlay" => Ok(Category::Overlay),
            "natural" => Ok(Category::Natural),
            "none" => Ok(Category::None),
            other => Err(format!("unknown category {other:?} (expected overlay, natural or none)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Eval => "eval",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "eval" => Ok(Split::Eval),
            other => Err(format!("unknown split {other:?} (expected train or eval)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageSample {
    pub id: String,
    pub image_path: PathBuf,
    pub category: Category,
    pub split: Split,
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Schema { line: usize, message: String },
    #[error("line {line}: duplicate id {id:?}")]
    DuplicateId { line: usize, id: String },
    #[error("line {line}: image {path} is not a readable raster: {message}")]
    UnreadableImage {
        line: usize,
        path: PathBuf,
        message: String,
    },
    #[error("pool for category {category} has {available} samples, {needed} required")]
    Capacity {
        category: Category,
        needed: usize,
        available: usize,
    },
    #[error("sample id {0:?} appears in more than one pool")]
    DuplicateInPools(String),
    #[error("image encoding failed for {path}: {message}")]
    Encode { path: PathBuf, message: String },
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Per-category tallies in enum order.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryCounts {
    pub overlay: usize,
    pub natural: usize,
    pub none: usize,
}

impl CategoryCounts {
    pub fn get(&self, category: Category) -> usize {
        match category {
            Category::Overlay => self.overlay,
            Category::Natural => self.natural,
            Category::None => self.none,
        }
    }

    fn bump(&mut self, category: Category) {
        match category {
            Category::Overlay => self.overlay += 1,
            Category::Natural => self.natural += 1,
            Category::None => self.none += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.overlay + self.natural + self.none
    }

    /// Max minus min over the three categories.
    pub fn spread(&self) -> usize {
        let v = [self.overlay, self.natural, self.none];
        v.iter().max().unwrap() - v.iter().min().unwrap()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Manifest {
    samples: Vec<ImageSample>,
    train: CategoryCounts,
    eval: CategoryCounts,
}

impl Manifest {
    pub fn new(samples: Vec<ImageSample>) -> Self {
        let mut train = CategoryCounts::default();
        let mut eval = CategoryCounts::default();
        for s in &samples {
            match s.split {
                Split::Train => train.bump(s.category),
                Split::Eval => eval.bump(s.category),
            }
        }
        Manifest {
            samples,
            train,
            eval,
        }
    }

    pub fn samples(&self) -> &[ImageSample] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<ImageSample> {
        self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn counts(&self, split: Split) -> CategoryCounts {
        match split {
            Split::Train => self.train,
            Split::Eval => self.eval,
        }
    }

    /// Every split present has per-category counts within 1 of each other.
    pub fn is_balanced(&self) -> bool {
        self.train.spread() <= 1 && self.eval.spread() <= 1
    }

    /// The samples of one split, order preserved.
    pub fn split(&self, split: Split) -> Manifest {
        Manifest::new(
            self.samples
                .iter()
                .filter(|s| s.split == split)
                .cloned()
                .collect(),
        )
    }

    /// Canonical line-delimited text. Paths under `base` are written relative to it.
    pub fn to_jsonl(&self, base: Option<&Path>) -> String {
        let mut out = String::new();
        for s in &self.samples {
            let path = base
                .and_then(|b| s.image_path.strip_prefix(b).ok())
                .unwrap_or(&s.image_path);
            let line = serde_json::json!({
                "id": s.id,
                "image_path": path.to_string_lossy(),
                "category": s.category.as_str(),
                "split": s.split.as_str(),
            });
            out.push_str(&line.to_string());
            out.push('\n');
        }
        out
    }
}

#[derive(Deserialize)]
struct RawRecord {
    id: Option<String>,
    image_path: Option<String>,
    category: Option<String>,
    split: Option<String>,
}

/// Parses manifest text without touching the filesystem.
///
/// Relative image paths are joined onto `base`.
pub fn parse_manifest(text: &str, base: &Path) -> Result<(Manifest, Vec<usize>), DatasetError> {
    let mut samples = Vec::new();
    let mut lines = Vec::new();
    let mut seen = HashSet::new();
    for (idx, raw_line) in text.lines().enumerate() {
        let line = idx + 1;
        if raw_line.trim().is_empty() {
            continue;
        }
        let schema = |message: String| DatasetError::Schema { line, message };
        let raw: RawRecord =
            serde_json::from_str(raw_line).map_err(|e| schema(format!("malformed record: {e}")))?;
        let id = raw
            .id
            .filter(|s| !s.is_empty())
            .ok_or_else(|| schema("missing id".into()))?;
        let image_path = raw
            .image_path
            .ok_or_else(|| schema("missing image_path".into()))?;
        let category: Category = raw
            .category
            .ok_or_else(|| schema("missing category".into()))?
            .parse()
            .map_err(schema)?;
        let split: Split = raw
            .split
            .ok_or_else(|| schema("missing split".into()))?
            .parse()
            .map_err(schema)?;
        if !seen.insert(id.clone()) {
            return Err(DatasetError::DuplicateId { line, id });
        }
        let path = PathBuf::from(image_path);
        let image_path = if path.is_absolute() {
            path
        } else {
            base.join(path)
        };
        samples.push(ImageSample {
            id,
            image_path,
            category,
            split,
        });
        lines.push(line);
    }
    Ok((Manifest::new(samples), lines))
}

/// Loads a manifest file and checks every image decodes as a raster header.
pub fn load_manifest(path: &Path) -> Result<Manifest, DatasetError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let base = path.parent().unwrap_or(Path::new(""));
    let (manifest, lines) = parse_manifest(&text, base)?;
    for (sample, &line) in manifest.samples().iter().zip(&lines) {
        image::image_dimensions(&sample.image_path).map_err(|e| DatasetError::UnreadableImage {
            line,
            path: sample.image_path.clone(),
            message: e.to_string(),
        })?;
    }
    Ok(manifest)
}

pub fn write_manifest(manifest: &Manifest, path: &Path) -> Result<(), DatasetError> {
    let base = path.parent().filter(|p| !p.as_os_str().is_empty());
    fs::write(path, manifest.to_jsonl(base)).map_err(io_err(path))
}

/// Per-category target counts for `total`, remainder assigned in enum order.
pub fn balanced_counts(total: usize) -> CategoryCounts {
    let base = total / 3;
    let rem = total % 3;
    CategoryCounts {
        overlay: base + usize::from(rem > 0),
        natural: base + usize::from(rem > 1),
        none: base,
    }
}

/// Category-keyed sample pools for [`build_balanced_manifest`].
#[derive(Debug, Clone, Default)]
pub struct Pools {
    pub overlay: Vec<ImageSample>,
    pub natural: Vec<ImageSample>,
    pub none: Vec<ImageSample>,
}

impl Pools {
    pub fn get(&self, category: Category) -> &[ImageSample] {
        match category {
            Category::Overlay => &self.overlay,
            Category::Natural => &self.natural,
            Category::None => &self.none,
        }
    }

    /// Buckets samples by their category.
    pub fn from_samples(samples: impl IntoIterator<Item = ImageSample>) -> Self {
        let mut pools = Pools::default();
        for s in samples {
            match s.category {
                Category::Overlay => pools.overlay.push(s),
                Category::Natural => pools.natural.push(s),
                Category::None => pools.none.push(s),
            }
        }
        pools
    }
}

/// Draws a category-balanced manifest of `total` samples.
///
/// Each pool is shuffled with `seed` and its first `k` samples are kept.
/// Output is grouped in enum order; every selected sample is relabelled
/// with `split`.
pub fn build_balanced_manifest(
    pools: &Pools,
    total: usize,
    split: Split,
    seed: u64,
) -> Result<Manifest, DatasetError> {
    let targets = balanced_counts(total);
    let mut seen = HashSet::new();
    for category in Category::ALL {
        for s in pools.get(category) {
            if !seen.insert(s.id.as_str()) {
                return Err(DatasetError::DuplicateInPools(s.id.clone()));
            }
        }
    }
    let mut samples = Vec::with_capacity(total);
    for category in Category::ALL {
        let pool = pools.get(category);
        let needed = targets.get(category);
        if pool.len() < needed {
            return Err(DatasetError::Capacity {
                category,
                needed,
                available: pool.len(),
            });
        }
        let mut order: Vec<usize> = (0..pool.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (category.index() as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        order.shuffle(&mut rng);
        for &i in order.iter().take(needed) {
            let mut s = pool[i].clone();
            s.category = category;
            s.split = split;
            samples.push(s);
        }
    }
    Ok(Manifest::new(samples))
}

/// One ground-truth OCR token as stored in a `.tokens` sidecar.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SidecarToken {
    pub text: String,
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

/// `<dir>/<stem>.tokens` next to the image.
pub fn sidecar_path(image_path: &Path) -> PathBuf {
    image_path.with_extension("tokens")
}

pub fn write_sidecar(path: &Path, tokens: &[SidecarToken]) -> Result<(), DatasetError> {
    let mut out = String::new();
    for t in tokens {
        out.push_str(&serde_json::to_string(t).expect("token serializes"));
        out.push('\n');
    }
    fs::write(path, out).map_err(io_err(path))
}

pub fn read_sidecar(path: &Path) -> Result<Vec<SidecarToken>, DatasetError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| DatasetError::Schema {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}
