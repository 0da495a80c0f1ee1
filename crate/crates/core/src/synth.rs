//! Seed-deterministic generator of minimal-contrast pairs.
//!
//! A [`Scene`] has four slots (object, attribute, count, relation). A pair
//! changes exactly one slot, chosen by its [`ContrastType`]. Images are
//! per-slot one-hot codeword blocks plus Gaussian noise, with one reserved
//! style coordinate that is set to 1 on `img_l` when the shortcut is enabled.
//! Responses verbalize each scene with a fixed grammar:
//!
//! ```text
//! the <count> <attribute> <object> is <relation> the box
//! ```
//!
//! Pair `k` of a corpus draws from its own ChaCha stream `(seed, k)`, so pairs
//! can be generated independently and in any order.

use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const OBJECTS: [&str; 7] = ["cat", "dog", "cup", "ball", "car", "hat", "book"];
pub const ATTRIBUTES: [&str; 6] = ["red", "blue", "green", "yellow", "black", "white"];
pub const COUNTS: [&str; 4] = ["one", "two", "three", "four"];
pub const RELATIONS: [&str; 2] = ["left_of", "right_of"];

/// Grammar words, after `<bos>` at id 0.
const GRAMMAR: [&str; 15] = [
    "the", "is", "box", "what", "object", "near", "?", "color", "how", "many", "objects",
    "are", "there", "where", "a",
];

pub const IMAGE_DIM: usize = 24;
/// Start offset and width of each slot block in the image vector.
pub const OBJECT_BLOCK: (usize, usize) = (0, 7);
pub const ATTRIBUTE_BLOCK: (usize, usize) = (7, 6);
pub const COUNT_BLOCK: (usize, usize) = (13, 5);
pub const RELATION_BLOCK: (usize, usize) = (18, 5);
pub const STYLE_INDEX: usize = 23;
pub const NOISE_STD: f64 = 0.05;

/// Fixed word list; `id(word)` is the position in this list.
pub fn vocabulary() -> Vec<&'static str> {
    let mut v = vec!["<bos>"];
    v.extend(GRAMMAR);
    v.extend(OBJECTS);
    v.extend(ATTRIBUTES);
    v.extend(COUNTS);
    v.extend(RELATIONS);
    v
}

pub fn token_id(word: &str) -> Option<usize> {
    vocabulary().iter().position(|w| *w == word)
}

fn id(word: &str) -> usize {
    token_id(word).expect("word in vocabulary")
}

pub fn detokenize(tokens: &[usize]) -> String {
    let vocab = vocabulary();
    tokens
        .iter()
        .map(|&t| vocab.get(t).copied().unwrap_or("<unk>"))
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContrastType {
    Object,
    Attribute,
    Count,
    Position,
}

impl ContrastType {
    pub const ALL: [ContrastType; 4] = [
        ContrastType::Object,
        ContrastType::Attribute,
        ContrastType::Count,
        ContrastType::Position,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ContrastType::Object => "object",
            ContrastType::Attribute => "attribute",
            ContrastType::Count => "count",
            ContrastType::Position => "position",
        }
    }

    fn query(self) -> Vec<usize> {
        let words: &[&str] = match self {
            ContrastType::Object => &["what", "object", "is", "near", "the", "box", "?"],
            ContrastType::Attribute => &["what", "color", "is", "the", "object", "?"],
            ContrastType::Count => &["how", "many", "objects", "are", "there", "?"],
            ContrastType::Position => &["where", "is", "the", "object", "?"],
        };
        words.iter().map(|w| id(w)).collect()
    }
}

impl std::str::FromStr for ContrastType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ContrastType::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| format!("unknown contrast type `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    LeftOf,
    RightOf,
}

impl Relation {
    fn index(self) -> usize {
        match self {
            Relation::LeftOf => 0,
            Relation::RightOf => 1,
        }
    }

    fn from_index(i: usize) -> Self {
        if i == 0 {
            Relation::LeftOf
        } else {
            Relation::RightOf
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Scene {
    pub object_id: usize,
    pub attribute_id: usize,
    /// In `1..=4`.
    pub count: usize,
    pub relation: Relation,
}

impl Scene {
    pub fn is_valid(&self) -> bool {
        self.object_id < OBJECTS.len()
            && self.attribute_id < ATTRIBUTES.len()
            && (1..=COUNTS.len()).contains(&self.count)
    }

    fn random(rng: &mut impl Rng) -> Self {
        Self {
            object_id: rng.random_range(0..OBJECTS.len()),
            attribute_id: rng.random_range(0..ATTRIBUTES.len()),
            count: rng.random_range(1..=COUNTS.len()),
            relation: Relation::from_index(rng.random_range(0..2)),
        }
    }

    /// Token sequence of the fixed-grammar description.
    pub fn verbalize(&self) -> Vec<usize> {
        vec![
            id("the"),
            id(COUNTS[self.count - 1]),
            id(ATTRIBUTES[self.attribute_id]),
            id(OBJECTS[self.object_id]),
            id("is"),
            id(RELATIONS[self.relation.index()]),
            id("the"),
            id("box"),
        ]
    }

    /// Plain-text caption (relation tokens rendered as two words).
    pub fn caption(&self) -> String {
        detokenize(&self.verbalize()).replace('_', " ")
    }

    /// Slots on which two scenes differ.
    pub fn differing(&self, other: &Scene) -> Vec<ContrastType> {
        let mut out = Vec::new();
        if self.object_id != other.object_id {
            out.push(ContrastType::Object);
        }
        if self.attribute_id != other.attribute_id {
            out.push(ContrastType::Attribute);
        }
        if self.count != other.count {
            out.push(ContrastType::Count);
        }
        if self.relation != other.relation {
            out.push(ContrastType::Position);
        }
        out
    }

    /// Copy with the `slot` field replaced by a different random value.
    fn perturb(&self, slot: ContrastType, rng: &mut impl Rng) -> Self {
        let mut s = *self;
        let other = |cur: usize, n: usize, rng: &mut dyn rand::RngCore| {
            let k = rng.random_range(0..n - 1);
            if k >= cur {
                k + 1
            } else {
                k
            }
        };
        match slot {
            ContrastType::Object => s.object_id = other(s.object_id, OBJECTS.len(), rng),
            ContrastType::Attribute => s.attribute_id = other(s.attribute_id, ATTRIBUTES.len(), rng),
            ContrastType::Count => s.count = other(s.count - 1, COUNTS.len(), rng) + 1,
            ContrastType::Position => {
                s.relation = Relation::from_index(1 - s.relation.index());
            }
        }
        s
    }
}

/// One-hot codebook shared by every corpus.
pub struct Codebook;

impl Codebook {
    fn blocks() -> [((usize, usize), usize); 4] {
        [
            (OBJECT_BLOCK, OBJECTS.len()),
            (ATTRIBUTE_BLOCK, ATTRIBUTES.len()),
            (COUNT_BLOCK, COUNTS.len()),
            (RELATION_BLOCK, RELATIONS.len()),
        ]
    }

    fn values(scene: &Scene) -> [usize; 4] {
        [
            scene.object_id,
            scene.attribute_id,
            scene.count - 1,
            scene.relation.index(),
        ]
    }

    /// Noise-free image vector with a zero style coordinate.
    pub fn encode(scene: &Scene) -> Vec<f64> {
        let mut v = vec![0.0; IMAGE_DIM];
        for (((start, _), _), value) in Self::blocks().iter().zip(Self::values(scene)) {
            v[start + value] = 1.0;
        }
        v
    }

    /// Nearest-codeword decode, block by block.
    pub fn decode(img: &[f64]) -> Option<Scene> {
        if img.len() != IMAGE_DIM {
            return None;
        }
        let mut vals = [0usize; 4];
        for (k, ((start, width), n)) in Self::blocks().into_iter().enumerate() {
            let block = &img[start..start + width];
            // Squared distance to one-hot e_j is |x|² - 2x_j + 1.
            let mut best = 0;
            for j in 1..n {
                if block[j] > block[best] {
                    best = j;
                }
            }
            vals[k] = best;
        }
        Some(Scene {
            object_id: vals[0],
            attribute_id: vals[1],
            count: vals[2] + 1,
            relation: Relation::from_index(vals[3]),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenOptions {
    pub shortcut: bool,
    pub noise_std: f64,
}

impl Default for GenOptions {
    fn default() -> Self {
        Self {
            shortcut: false,
            noise_std: NOISE_STD,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastPair {
    pub query: Vec<usize>,
    pub img_w: Vec<f64>,
    pub img_l: Vec<f64>,
    pub y_w: Vec<usize>,
    pub y_l: Vec<usize>,
    pub contrast_type: ContrastType,
    pub shortcut_flag_on_il: bool,
}

impl ContrastPair {
    /// Both raw captions, `(caption_w, caption_l)`.
    pub fn captions(&self) -> (String, String) {
        (
            detokenize(&self.y_w).replace('_', " "),
            detokenize(&self.y_l).replace('_', " "),
        )
    }

    /// The pair with images and responses exchanged.
    pub fn exchanged(&self) -> Self {
        Self {
            img_w: self.img_l.clone(),
            img_l: self.img_w.clone(),
            y_w: self.y_l.clone(),
            y_l: self.y_w.clone(),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.y_w == self.y_l {
            return Err("y_w equals y_l".into());
        }
        if self.y_w.is_empty() || self.y_l.is_empty() {
            return Err("empty response".into());
        }
        if self.img_w.len() != self.img_l.len() || self.img_w.is_empty() {
            return Err("image vectors differ in length".into());
        }
        if self.img_w.iter().chain(&self.img_l).any(|v| !v.is_finite()) {
            return Err("non-finite image value".into());
        }
        Ok(())
    }
}

fn pair_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

fn render(scene: &Scene, style: bool, noise: &Normal<f64>, rng: &mut impl Rng) -> Vec<f64> {
    let mut v = Codebook::encode(scene);
    for x in v.iter_mut().take(STYLE_INDEX) {
        *x += noise.sample(rng);
    }
    v[STYLE_INDEX] = if style { 1.0 } else { 0.0 };
    v
}

pub fn gen_pair_with(rng: &mut impl Rng, contrast: ContrastType, opts: &GenOptions) -> ContrastPair {
    let noise = Normal::new(0.0, opts.noise_std).expect("finite noise std");
    let scene_w = Scene::random(rng);
    let scene_l = scene_w.perturb(contrast, rng);
    let img_w = render(&scene_w, false, &noise, rng);
    let img_l = render(&scene_l, opts.shortcut, &noise, rng);
    ContrastPair {
        query: contrast.query(),
        img_w,
        img_l,
        y_w: scene_w.verbalize(),
        y_l: scene_l.verbalize(),
        contrast_type: contrast,
        shortcut_flag_on_il: opts.shortcut,
    }
}

/// Pair `index` of stream `seed` with a forced contrast type.
pub fn gen_pair(seed: u64, index: u64, contrast: ContrastType, opts: &GenOptions) -> ContrastPair {
    gen_pair_with(&mut pair_rng(seed, index), contrast, opts)
}

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("corpus size must be positive")]
    EmptyCorpus,
    #[error("type mix must be non-negative and sum to 1, got {0:?}")]
    BadMix(TypeMix),
}

/// Contrast-type proportions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TypeMix {
    pub object: f64,
    pub attribute: f64,
    pub count: f64,
    pub position: f64,
}

impl TypeMix {
    /// Category shares of the filtered-and-augmented reference corpus
    /// (7189 replacement / 919 count / 3041 position of 11149), with the
    /// replacement share split evenly between object and attribute.
    pub fn mvc() -> Self {
        let total = 11149.0;
        let replace = 7189.0 / total / 2.0;
        Self {
            object: replace,
            attribute: replace,
            count: 919.0 / total,
            position: 3041.0 / total,
        }
    }

    pub fn uniform() -> Self {
        Self {
            object: 0.25,
            attribute: 0.25,
            count: 0.25,
            position: 0.25,
        }
    }

    fn weights(&self) -> [f64; 4] {
        [self.object, self.attribute, self.count, self.position]
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let w = self.weights();
        let sum: f64 = w.iter().sum();
        if w.iter().any(|x| !x.is_finite() || *x < 0.0) || (sum - 1.0).abs() > 1e-9 {
            return Err(SynthError::BadMix(*self));
        }
        Ok(())
    }

    fn sample(&self, rng: &mut impl Rng) -> ContrastType {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (t, w) in ContrastType::ALL.iter().zip(self.weights()) {
            acc += w;
            if u < acc {
                return *t;
            }
        }
        // u landed in the rounding gap above the cumulative sum
        *ContrastType::ALL
            .iter()
            .zip(self.weights())
            .rev()
            .find(|(_, w)| *w > 0.0)
            .map(|(t, _)| t)
            .expect("validated mix has positive mass")
    }
}

impl std::str::FromStr for TypeMix {
    type Err = String;

    /// `mvc`, `uniform`, or `object=..,attribute=..,count=..,position=..`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mvc" => return Ok(Self::mvc()),
            "uniform" => return Ok(Self::uniform()),
            _ => {}
        }
        let mut mix = TypeMix {
            object: 0.0,
            attribute: 0.0,
            count: 0.0,
            position: 0.0,
        };
        for part in s.split(',') {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| format!("bad mix entry `{part}`"))?;
            let v: f64 = v.trim().parse().map_err(|e| format!("bad mix value `{v}`: {e}"))?;
            match k.trim() {
                "object" => mix.object = v,
                "attribute" => mix.attribute = v,
                "count" => mix.count = v,
                "position" => mix.position = v,
                other => return Err(format!("unknown mix key `{other}`")),
            }
        }
        mix.validate().map_err(|e| e.to_string())?;
        Ok(mix)
    }
}

pub const CORPUS_FORMAT: &str = "svco-corpus";
pub const CORPUS_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize, PartialEq)]
struct CorpusHeader {
    format: String,
    version: u32,
    count: usize,
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("corpus I/O: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Corpus {
    pub pairs: Vec<ContrastPair>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Shortcut-removed copy: style coordinate zeroed on every image.
    pub fn without_style(&self) -> Self {
        let pairs = self
            .pairs
            .iter()
            .map(|p| {
                let mut p = p.clone();
                if let Some(x) = p.img_w.get_mut(STYLE_INDEX) {
                    *x = 0.0;
                }
                if let Some(x) = p.img_l.get_mut(STYLE_INDEX) {
                    *x = 0.0;
                }
                p.shortcut_flag_on_il = false;
                p
            })
            .collect();
        Self { pairs }
    }

    /// JSON Lines: a header object, then one pair per line.
    pub fn write_jsonl(&self, mut w: impl Write) -> std::io::Result<()> {
        let header = CorpusHeader {
            format: CORPUS_FORMAT.into(),
            version: CORPUS_VERSION,
            count: self.pairs.len(),
        };
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n")?;
        for p in &self.pairs {
            serde_json::to_writer(&mut w, p)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_jsonl_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_jsonl(&mut out).expect("in-memory write");
        out
    }

    pub fn read_jsonl(r: impl BufRead) -> Result<Self, CorpusError> {
        let mut lines = r.lines().enumerate();
        let (_, first) = lines.next().ok_or(CorpusError::Parse {
            line: 1,
            message: "missing header".into(),
        })?;
        let header: CorpusHeader =
            serde_json::from_str(&first?).map_err(|e| CorpusError::Parse {
                line: 1,
                message: format!("bad header: {e}"),
            })?;
        if header.format != CORPUS_FORMAT || header.version != CORPUS_VERSION {
            return Err(CorpusError::Parse {
                line: 1,
                message: format!(
                    "unsupported corpus format {} v{}",
                    header.format, header.version
                ),
            });
        }
        let mut pairs = Vec::with_capacity(header.count.min(1 << 16));
        for (i, line) in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let pair: ContrastPair =
                serde_json::from_str(&line).map_err(|e| CorpusError::Parse {
                    line: i + 1,
                    message: e.to_string(),
                })?;
            pair.validate().map_err(|message| CorpusError::Parse {
                line: i + 1,
                message,
            })?;
            pairs.push(pair);
        }
        if pairs.len() != header.count {
            return Err(CorpusError::Parse {
                line: 1,
                message: format!(
                    "header declares {} pairs, found {}",
                    header.count,
                    pairs.len()
                ),
            });
        }
        Ok(Self { pairs })
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self, CorpusError> {
        let f = std::fs::File::open(path)?;
        Self::read_jsonl(std::io::BufReader::new(f))
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<(), CorpusError> {
        std::fs::write(path, self.to_jsonl_bytes())?;
        Ok(())
    }
}

/// `n` pairs; pair `k` uses stream `(seed, k)` for both its type and content.
pub fn gen_corpus(seed: u64, n: usize, mix: &TypeMix, shortcut: bool) -> Result<Corpus, SynthError> {
    if n == 0 {
        return Err(SynthError::EmptyCorpus);
    }
    mix.validate()?;
    let opts = GenOptions {
        shortcut,
        ..GenOptions::default()
    };
    let pairs = (0..n as u64)
        .map(|k| {
            let mut rng = pair_rng(seed, k);
            let t = mix.sample(&mut rng);
            gen_pair_with(&mut rng, t, &opts)
        })
        .collect();
    Ok(Corpus { pairs })
}
