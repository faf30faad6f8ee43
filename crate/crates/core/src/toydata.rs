//! Procedural shapes corpus: scene grammar, rasterizer, closed-vocabulary
//! captions and on-disk dataset persistence.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, IoContext, Result};
use crate::rng;

/// Image side length in pixels.
pub const SIDE: usize = 32;
pub const CHANNELS: usize = 3;
pub const MAX_OBJECTS: usize = 3;

macro_rules! word_enum {
    ($name:ident { $($variant:ident => $word:literal),+ $(,)? }) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(rename_all = "lowercase")]
        pub enum $name { $($variant),+ }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn word(self) -> &'static str {
                match self { $($name::$variant => $word),+ }
            }

            pub fn from_word(w: &str) -> Option<Self> {
                match w { $($word => Some($name::$variant),)+ _ => None }
            }

            pub fn index(self) -> usize {
                Self::ALL.iter().position(|&v| v == self).unwrap()
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.word())
            }
        }
    };
}

word_enum!(ShapeKind { Circle => "circle", Square => "square", Triangle => "triangle" });
word_enum!(Color { Red => "red", Green => "green", Blue => "blue", Yellow => "yellow" });
word_enum!(Position { Left => "left", Right => "right", Top => "top", Bottom => "bottom", Center => "center" });
word_enum!(Background { White => "white", Gray => "gray", Black => "black" });

impl Color {
    fn rgb(self) -> [u8; 3] {
        match self {
            Color::Red => [255, 0, 0],
            Color::Green => [0, 255, 0],
            Color::Blue => [0, 0, 255],
            Color::Yellow => [255, 255, 0],
        }
    }
}

impl Background {
    fn rgb(self) -> [u8; 3] {
        match self {
            Background::White => [255, 255, 255],
            Background::Gray => [128, 128, 128],
            Background::Black => [0, 0, 0],
        }
    }
}

impl Position {
    /// Nominal object center in pixel coordinates (x, y).
    pub fn center(self) -> (i32, i32) {
        match self {
            Position::Left => (7, 16),
            Position::Right => (25, 16),
            Position::Top => (16, 7),
            Position::Bottom => (16, 25),
            Position::Center => (16, 16),
        }
    }
}

/// Per-pixel region class: the four object colors then the three backgrounds.
pub const N_REGION_CLASSES: usize = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub shape: ShapeKind,
    pub color: Color,
    pub position: Position,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub objects: Vec<ObjectSpec>,
    pub background: Background,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let n = self.objects.len();
        if n == 0 || n > MAX_OBJECTS {
            return Err(Error::validation("n_objects", format!("{n} not in 1..={MAX_OBJECTS}")));
        }
        for (i, a) in self.objects.iter().enumerate() {
            if self.objects[..i].iter().any(|b| b.position == a.position) {
                return Err(Error::validation(
                    "positions",
                    format!("position {} used more than once", a.position),
                ));
            }
        }
        Ok(())
    }

    /// Uniform draw from the scene grammar.
    pub fn sample(rng: &mut impl Rng) -> Self {
        let n = rng.gen_range(1..=MAX_OBJECTS);
        let order = rng::permutation(rng, Position::ALL.len());
        let objects = order[..n]
            .iter()
            .map(|&p| ObjectSpec {
                shape: ShapeKind::ALL[rng.gen_range(0..ShapeKind::ALL.len())],
                color: Color::ALL[rng.gen_range(0..Color::ALL.len())],
                position: Position::ALL[p],
            })
            .collect();
        let background = Background::ALL[rng.gen_range(0..Background::ALL.len())];
        Self { objects, background }
    }

    /// `"<color> <shape> at <position>"` per object, joined by `" and "`.
    pub fn caption(&self) -> String {
        self.objects
            .iter()
            .map(|o| format!("{} {} at {}", o.color, o.shape, o.position))
            .collect::<Vec<_>>()
            .join(" and ")
    }
}

/// Parse a caption back into its objects. `None` if it is not in the grammar.
pub fn parse_caption(text: &str) -> Option<Vec<ObjectSpec>> {
    let words: Vec<&str> = text.split_whitespace().collect();
    let mut out = Vec::new();
    let mut i = 0;
    loop {
        if i + 4 > words.len() || words[i + 2] != "at" {
            return None;
        }
        out.push(ObjectSpec {
            color: Color::from_word(words[i])?,
            shape: ShapeKind::from_word(words[i + 1])?,
            position: Position::from_word(words[i + 3])?,
        });
        i += 4;
        if i == words.len() {
            return Some(out);
        }
        if words[i] != "and" {
            return None;
        }
        i += 1;
    }
}

/// Ground-truth placement of one rendered object.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlacedObject {
    pub object: ObjectSpec,
    pub cx: i32,
    pub cy: i32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub background: Background,
    pub objects: Vec<PlacedObject>,
}

/// HWC float image with values in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    data: Vec<f32>,
}

impl Image {
    pub const LEN: usize = SIDE * SIDE * CHANNELS;

    pub fn new(data: Vec<f32>) -> Result<Self> {
        if data.len() != Self::LEN {
            return Err(Error::Shape(format!("image needs {} values, got {}", Self::LEN, data.len())));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite() || v.abs() > 1.0) {
            return Err(Error::validation("pixels", format!("value {v} outside [-1, 1]")));
        }
        Ok(Self { data })
    }

    /// Clamp into range instead of rejecting; non-finite values become 0.
    pub fn clamped(data: Vec<f32>) -> Result<Self> {
        Self::new(
            data.into_iter()
                .map(|v| if v.is_finite() { v.clamp(-1.0, 1.0) } else { 0.0 })
                .collect(),
        )
    }

    pub fn from_u8(bytes: &[u8]) -> Result<Self> {
        Self::new(bytes.iter().map(|&b| b as f32 / 127.5 - 1.0).collect())
    }

    pub fn to_u8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|&v| ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8)
            .collect()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * SIDE + x) * CHANNELS;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        image::save_buffer(path, &self.to_u8(), SIDE as u32, SIDE as u32, image::ExtendedColorType::Rgb8)?;
        Ok(())
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)?.to_rgb8();
        if img.width() as usize != SIDE || img.height() as usize != SIDE {
            return Err(Error::Shape(format!("{} is not {SIDE}x{SIDE}", path.display())));
        }
        Self::from_u8(img.as_raw())
    }

    pub fn mse(&self, other: &Image) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| f64::from(a - b).powi(2))
            .sum::<f64>()
            / Self::LEN as f64
    }
}

/// Stack images into a (B, H, W, C) tensor.
pub fn images_to_tensor(images: &[&Image], dtype: DType) -> Result<Tensor> {
    let mut data = Vec::with_capacity(images.len() * Image::LEN);
    for img in images {
        data.extend_from_slice(&img.data);
    }
    Ok(Tensor::from_vec(data, (images.len(), SIDE, SIDE, CHANNELS), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Split a (B, H, W, C) tensor into clamped images.
pub fn tensor_to_images(t: &Tensor) -> Result<Vec<Image>> {
    let (b, h, w, c) = t.dims4()?;
    if (h, w, c) != (SIDE, SIDE, CHANNELS) {
        return Err(Error::Shape(format!("expected (B, {SIDE}, {SIDE}, 3), got {:?}", t.dims())));
    }
    let flat: Vec<f32> = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
    flat.chunks(Image::LEN).take(b).map(|c| Image::clamped(c.to_vec())).collect()
}

// ---------------------------------------------------------------------------
// Vocabulary

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const UNK: u32 = 2;
pub const NULL: u32 = 3;
/// Fixed token sequence length, BOS included.
pub const SEQ_LEN: usize = 16;

const WORDS: &[&str] = &[
    "at", "and", "red", "green", "blue", "yellow", "circle", "square", "triangle", "left", "right", "top", "bottom",
    "center",
];
const FIRST_WORD: u32 = 4;
pub const VOCAB_SIZE: usize = FIRST_WORD as usize + WORDS.len();

pub fn word_id(word: &str) -> u32 {
    WORDS
        .iter()
        .position(|&w| w == word)
        .map_or(UNK, |i| FIRST_WORD + i as u32)
}

/// `[BOS, words..., PAD...]` of length [`SEQ_LEN`]; excess words are dropped.
pub fn tokenize(text: &str) -> Vec<u32> {
    let mut ids = Vec::with_capacity(SEQ_LEN);
    ids.push(BOS);
    ids.extend(text.split_whitespace().take(SEQ_LEN - 1).map(word_id));
    ids.resize(SEQ_LEN, PAD);
    ids
}

pub fn detokenize(ids: &[u32]) -> String {
    ids.iter()
        .filter_map(|&id| match id {
            PAD | BOS | NULL => None,
            UNK => Some("<unk>"),
            id => WORDS.get((id - FIRST_WORD) as usize).copied().or(Some("<unk>")),
        })
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    pub text: String,
    pub token_ids: Vec<u32>,
}

impl Prompt {
    pub fn new(text: &str) -> Self {
        Self {
            text: text.to_string(),
            token_ids: tokenize(text),
        }
    }

    /// Unconditional branch used for classifier-free guidance.
    pub fn null() -> Self {
        let mut token_ids = vec![PAD; SEQ_LEN];
        token_ids[0] = BOS;
        token_ids[1] = NULL;
        Self {
            text: String::new(),
            token_ids,
        }
    }

    pub fn is_null(&self) -> bool {
        self.token_ids.get(1) == Some(&NULL)
    }
}

// ---------------------------------------------------------------------------
// Rasterizer

fn covers(shape: ShapeKind, dx: f32, dy: f32) -> bool {
    match shape {
        ShapeKind::Circle => dx * dx + dy * dy <= 4.5 * 4.5,
        ShapeKind::Square => dx.abs() <= 4.0 && dy.abs() <= 4.0,
        // Apex up, base at dy = 4.
        ShapeKind::Triangle => (-4.5..=4.0).contains(&dy) && dx.abs() <= (dy + 4.5) / 8.5 * 4.5,
    }
}

/// One rendered scene.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub image: Image,
    pub prompt: Prompt,
    pub layout: Layout,
    /// Region class per pixel, row-major (see [`N_REGION_CLASSES`]).
    pub regions: Vec<u8>,
}

impl Scene {
    /// Majority region class of each `patch`×`patch` block, raster order.
    /// Ties resolve to the lowest class index.
    pub fn patch_classes(&self, patch: usize) -> Vec<u8> {
        let g = SIDE / patch;
        let mut out = Vec::with_capacity(g * g);
        for py in 0..g {
            for px in 0..g {
                let mut counts = [0usize; N_REGION_CLASSES];
                for y in py * patch..(py + 1) * patch {
                    for x in px * patch..(px + 1) * patch {
                        counts[self.regions[y * SIDE + x] as usize] += 1;
                    }
                }
                let best = (0..N_REGION_CLASSES).max_by_key(|&c| (counts[c], std::cmp::Reverse(c))).unwrap();
                out.push(best as u8);
            }
        }
        out
    }
}

/// Rasterize `spec`; `seed` drives a ±1 pixel jitter of each object.
pub fn generate_scene(seed: u64, spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let mut jitter = rng::rng(seed, "jitter", 0);
    let placed: Vec<PlacedObject> = spec
        .objects
        .iter()
        .map(|&object| {
            let (x, y) = object.position.center();
            PlacedObject {
                object,
                cx: x + jitter.gen_range(-1..=1),
                cy: y + jitter.gen_range(-1..=1),
            }
        })
        .collect();
    let bg_class = (Color::ALL.len() + spec.background.index()) as u8;
    let mut regions = vec![bg_class; SIDE * SIDE];
    let mut bytes = Vec::with_capacity(Image::LEN);
    for y in 0..SIDE {
        for x in 0..SIDE {
            let mut rgb = spec.background.rgb();
            for p in &placed {
                let dx = x as f32 + 0.5 - p.cx as f32;
                let dy = y as f32 + 0.5 - p.cy as f32;
                if covers(p.object.shape, dx, dy) {
                    rgb = p.object.color.rgb();
                    regions[y * SIDE + x] = p.object.color.index() as u8;
                }
            }
            bytes.extend_from_slice(&rgb);
        }
    }
    Ok(Scene {
        image: Image::from_u8(&bytes)?,
        prompt: Prompt::new(&spec.caption()),
        layout: Layout {
            background: spec.background,
            objects: placed,
        },
        regions,
    })
}

// ---------------------------------------------------------------------------
// Datasets

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn tag(self) -> &'static str {
        match self {
            Split::Train => "split-train",
            Split::Val => "split-val",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Item {
    pub id: usize,
    pub seed: u64,
    pub spec: SceneSpec,
    pub scene: Scene,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub split: Split,
    pub n_items: usize,
    pub seed: u64,
    pub content_hash: String,
    pub files: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct MetadataLine {
    id: usize,
    caption: String,
    layout: Layout,
    seed: u64,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub items: Vec<Item>,
}

impl Dataset {
    /// Generate in memory without touching disk.
    pub fn generate(n: usize, split: Split, seed: u64) -> Result<Self> {
        if n == 0 {
            return Err(Error::validation("n", "dataset needs at least one item"));
        }
        let items = (0..n)
            .map(|id| {
                let item_seed = rng::derive(seed, split.tag(), id as u64);
                let spec = SceneSpec::sample(&mut rng::rng(item_seed, "scene", 0));
                let scene = generate_scene(item_seed, &spec)?;
                Ok(Item {
                    id,
                    seed: item_seed,
                    spec,
                    scene,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let manifest = DatasetManifest {
            split,
            n_items: n,
            seed,
            content_hash: content_hash(&items)?,
            files: file_list(n),
        };
        Ok(Self { manifest, items })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn images(&self) -> Vec<&Image> {
        self.items.iter().map(|i| &i.scene.image).collect()
    }

    pub fn prompts(&self) -> Vec<&Prompt> {
        self.items.iter().map(|i| &i.scene.prompt).collect()
    }
}

fn metadata_line(item: &Item) -> Result<String> {
    Ok(serde_json::to_string(&MetadataLine {
        id: item.id,
        caption: item.scene.prompt.text.clone(),
        layout: item.scene.layout.clone(),
        seed: item.seed,
    })?)
}

fn image_file(id: usize) -> String {
    format!("images/{id:05}.png")
}

fn file_list(n: usize) -> Vec<String> {
    let mut files: Vec<String> = (0..n).map(image_file).collect();
    files.push("metadata.jsonl".to_string());
    files
}

/// SHA-256 over raw pixel bytes and metadata lines, item by item.
fn content_hash(items: &[Item]) -> Result<String> {
    let mut h = Sha256::new();
    for item in items {
        h.update(item.scene.image.to_u8());
        h.update(metadata_line(item)?.as_bytes());
    }
    Ok(hex::encode(h.finalize()))
}

/// Generate `n` items and persist them under `dir`.
pub fn build_dataset(dir: &Path, n: usize, split: Split, seed: u64) -> Result<DatasetManifest> {
    let ds = Dataset::generate(n, split, seed)?;
    let images = dir.join("images");
    fs::create_dir_all(&images).at(&images)?;
    let meta_path = dir.join("metadata.jsonl");
    let mut meta = fs::File::create(&meta_path).at(&meta_path)?;
    for item in &ds.items {
        let path: PathBuf = dir.join(image_file(item.id));
        item.scene.image.save_png(&path)?;
        writeln!(meta, "{}", metadata_line(item)?).at(&meta_path)?;
    }
    let manifest_path = dir.join("manifest.json");
    fs::write(&manifest_path, serde_json::to_string_pretty(&ds.manifest)?).at(&manifest_path)?;
    Ok(ds.manifest)
}

/// Load a persisted dataset and verify its content hash.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join("manifest.json");
    let manifest: DatasetManifest = serde_json::from_str(&fs::read_to_string(&manifest_path).at(&manifest_path)?)?;
    let meta_path = dir.join("metadata.jsonl");
    let text = fs::read_to_string(&meta_path).at(&meta_path)?;
    let mut items = Vec::with_capacity(manifest.n_items);
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let m: MetadataLine = serde_json::from_str(line)?;
        let spec = SceneSpec {
            objects: m.layout.objects.iter().map(|p| p.object).collect(),
            background: m.layout.background,
        };
        // Region maps are not stored; re-rasterize and check against the file.
        let scene = generate_scene(m.seed, &spec)?;
        let image = Image::load_png(&dir.join(image_file(m.id)))?;
        if image != scene.image || scene.prompt.text != m.caption {
            return Err(Error::State(format!("item {} does not match its metadata", m.id)));
        }
        items.push(Item {
            id: m.id,
            seed: m.seed,
            spec,
            scene,
        });
    }
    let found = content_hash(&items)?;
    if found != manifest.content_hash || items.len() != manifest.n_items {
        return Err(Error::HashMismatch {
            what: format!("dataset {}", dir.display()),
            expected: manifest.content_hash.clone(),
            found,
        });
    }
    Ok(Dataset { manifest, items })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(shape: ShapeKind, color: Color, position: Position, background: Background) -> SceneSpec {
        SceneSpec {
            objects: vec![ObjectSpec { shape, color, position }],
            background,
        }
    }

    #[test]
    fn scene_is_deterministic() {
        let spec = one(ShapeKind::Triangle, Color::Blue, Position::Left, Background::Gray);
        let a = generate_scene(7, &spec).unwrap();
        let b = generate_scene(7, &spec).unwrap();
        assert_eq!(a.image.to_u8(), b.image.to_u8());
        assert_eq!(a.prompt, b.prompt);
    }

    #[test]
    fn zero_objects_rejected() {
        let spec = SceneSpec {
            objects: vec![],
            background: Background::White,
        };
        match generate_scene(7, &spec) {
            Err(Error::Validation { field, .. }) => assert_eq!(field, "n_objects"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn duplicate_position_rejected() {
        let o = ObjectSpec {
            shape: ShapeKind::Circle,
            color: Color::Red,
            position: Position::Top,
        };
        let spec = SceneSpec {
            objects: vec![o, o],
            background: Background::White,
        };
        assert!(matches!(spec.validate(), Err(Error::Validation { field, .. }) if field == "positions"));
    }

    #[test]
    fn single_object_caption_words() {
        let spec = one(ShapeKind::Circle, Color::Red, Position::Center, Background::White);
        let scene = generate_scene(7, &spec).unwrap();
        let content: std::collections::BTreeSet<&str> =
            scene.prompt.text.split_whitespace().filter(|w| !matches!(*w, "at" | "and")).collect();
        assert_eq!(content, ["center", "circle", "red"].into_iter().collect());
        // center pixel carries the object color
        let [r, g, b] = scene.image.pixel(16, 16);
        assert_eq!((r, g, b), (1.0, -1.0, -1.0));
    }

    #[test]
    fn tokenizer_cases() {
        assert_eq!(detokenize(&tokenize("red circle")), "red circle");
        let ids = tokenize("red zebra");
        assert_eq!(ids[2], UNK);
        let empty = tokenize("");
        assert_eq!(empty[0], BOS);
        assert!(empty[1..].iter().all(|&t| t == PAD));
        assert_eq!(empty.len(), SEQ_LEN);
        assert!(VOCAB_SIZE <= 64);
    }

    #[test]
    fn dataset_hash_depends_on_seed() {
        let a = Dataset::generate(100, Split::Train, 1).unwrap();
        let b = Dataset::generate(100, Split::Train, 1).unwrap();
        let c = Dataset::generate(100, Split::Train, 2).unwrap();
        assert_eq!(a.manifest.content_hash, b.manifest.content_hash);
        assert_ne!(a.manifest.content_hash, c.manifest.content_hash);
        assert!(matches!(Dataset::generate(0, Split::Train, 1), Err(Error::Validation { .. })));
    }

    #[test]
    fn splits_use_disjoint_streams() {
        let t = Dataset::generate(50, Split::Train, 1).unwrap();
        let v = Dataset::generate(50, Split::Val, 1).unwrap();
        let ts: std::collections::HashSet<u64> = t.items.iter().map(|i| i.seed).collect();
        assert!(v.items.iter().all(|i| !ts.contains(&i.seed)));
    }

    #[test]
    fn build_and_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let m = build_dataset(dir.path(), 12, Split::Val, 3).unwrap();
        let ds = load_dataset(dir.path()).unwrap();
        assert_eq!(ds.manifest, m);
        assert_eq!(ds.items, Dataset::generate(12, Split::Val, 3).unwrap().items);
    }

    #[test]
    fn unwritable_dir_reports_path() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("occupied");
        fs::write(&file, b"x").unwrap();
        match build_dataset(&file.join("sub"), 2, Split::Train, 0) {
            Err(Error::Io { path, .. }) => assert!(path.starts_with(&file)),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn patch_classes_cover_grid() {
        let spec = one(ShapeKind::Square, Color::Green, Position::Center, Background::Black);
        let scene = generate_scene(0, &spec).unwrap();
        let classes = scene.patch_classes(4);
        assert_eq!(classes.len(), 64);
        assert_eq!(classes[0], (Color::ALL.len() + Background::Black.index()) as u8);
        // patch containing pixel (16,16) is green
        assert_eq!(classes[4 * 8 + 4], Color::Green.index() as u8);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn captions_parse_and_match_pixels(seed in any::<u64>()) {
                let spec = SceneSpec::sample(&mut rng::rng(seed, "scene", 0));
                let scene = generate_scene(seed, &spec).unwrap();
                prop_assert!(scene.prompt.token_ids.iter().all(|&t| t != UNK));
                let parsed = parse_caption(&scene.prompt.text).unwrap();
                prop_assert_eq!(&parsed, &spec.objects);
                for p in &scene.layout.objects {
                    let px = scene.image.pixel(p.cx as usize, p.cy as usize);
                    let rgb = p.object.color.rgb().map(|b| b as f32 / 127.5 - 1.0);
                    prop_assert_eq!(px, rgb);
                }
            }
        }
    }
}
