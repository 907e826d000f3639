//! A synthetic captioning world small enough to train on a laptop.
//!
//! Each image is a bundle of attributes: an object, a color, a scene and an
//! optional rare detail. Its vector is a one-hot block per attribute plus a
//! few noise dimensions. Reference captions always name the object and
//! usually the scene, but mention the color and the detail only some of the
//! time, so the consensus caption is generic and the informative words are
//! comparatively rare.

use std::collections::{BTreeMap, HashMap};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::{Caption, Corpus, ImageRecord, Split};
use crate::embedding::{precompute_nearest, CaptionEmbedder, EmbeddingStore, NearestNeighborTable};
use crate::error::{Error, Result};
use crate::policy::Vocabulary;
use crate::rng::stream;

pub const OBJECTS: [&str; 8] = ["dog", "cat", "horse", "bird", "car", "bus", "truck", "boat"];
pub const COLORS: [&str; 6] = ["red", "blue", "green", "white", "black", "yellow"];
pub const DETAILS: [&str; 10] = [
    "stripes", "spots", "ribbons", "flags", "bells", "stickers", "flowers", "lights", "scratches", "patches",
];
pub const SCENES: [&str; 4] = ["grass", "road", "beach", "street"];
pub const FUNCTION_WORDS: [&str; 5] = ["a", "there", "is", "with", "the"];
pub const VERBS: [&str; 3] = ["standing", "sitting", "waiting"];
/// `(weight, preposition)` introducing the scene.
pub const PREPOSITIONS: [(u32, &str); 3] = [(3, "on"), (1, "near"), (1, "by")];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyWorldConfig {
    pub seed: u64,
    pub train_images: usize,
    pub val_images: usize,
    pub test_images: usize,
    pub noise_dims: usize,
    pub noise_std: f64,
    /// Probability that an image is drawn with a detail before the rarity cap.
    pub detail_rate: f64,
    /// Upper bound on the fraction of images carrying any one detail.
    pub max_detail_fraction: f64,
    pub min_refs: usize,
    pub max_refs: usize,
    /// Probability that a reference opens with "there is".
    pub there_is_rate: f64,
    /// Probability that a reference names the color.
    pub color_mention_rate: f64,
    /// Probability that a reference names the detail, when there is one.
    pub detail_mention_rate: f64,
    /// Probability that a reference has a verb.
    pub verb_rate: f64,
    /// Probability that a reference names the scene.
    pub scene_mention_rate: f64,
    pub max_len: usize,
}

impl Default for ToyWorldConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            train_images: 400,
            val_images: 100,
            test_images: 200,
            noise_dims: 4,
            noise_std: 0.3,
            detail_rate: 0.5,
            max_detail_fraction: 0.1,
            min_refs: 2,
            max_refs: 5,
            there_is_rate: 0.25,
            color_mention_rate: 0.3,
            detail_mention_rate: 0.5,
            verb_rate: 0.5,
            scene_mention_rate: 0.8,
            max_len: 11,
        }
    }
}

impl ToyWorldConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_owned()));
        if self.train_images < 2 || self.val_images == 0 || self.test_images == 0 {
            return bad("every split needs images and train needs at least 2");
        }
        let rates = [
            self.detail_rate,
            self.max_detail_fraction,
            self.there_is_rate,
            self.color_mention_rate,
            self.detail_mention_rate,
            self.verb_rate,
            self.scene_mention_rate,
        ];
        if !rates.iter().all(|r| (0.0..=1.0).contains(r)) {
            return bad("rates must lie in [0, 1]");
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad("noise_std must be finite and non-negative");
        }
        if self.min_refs == 0 || self.min_refs > self.max_refs {
            return bad("need 1 <= min_refs <= max_refs");
        }
        if self.max_len < LONGEST_REFERENCE {
            return bad("max_len must fit the longest reference (11 tokens)");
        }
        Ok(())
    }

    pub fn total_images(&self) -> usize {
        self.train_images + self.val_images + self.test_images
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyImage {
    pub id: String,
    pub split: Split,
    pub object: usize,
    pub color: usize,
    pub scene: usize,
    pub detail: Option<usize>,
    pub vector: Vec<f64>,
}

impl ToyImage {
    /// The attribute words of the image.
    pub fn attribute_words(&self) -> Vec<&'static str> {
        let mut w = vec![OBJECTS[self.object], COLORS[self.color], SCENES[self.scene]];
        if let Some(d) = self.detail {
            w.push(DETAILS[d]);
        }
        w
    }

    /// A caption naming every attribute of the image.
    pub fn full_caption(&self) -> Caption {
        let text = match self.detail {
            Some(d) => format!(
                "a {} {} with {} on the {}",
                COLORS[self.color], OBJECTS[self.object], DETAILS[d], SCENES[self.scene]
            ),
            None => format!("a {} {} on the {}", COLORS[self.color], OBJECTS[self.object], SCENES[self.scene]),
        };
        Caption::new(&text).expect("generated captions are non-empty")
    }
}

/// Slot layout of image vectors: objects, colors, scenes, details, noise.
fn attribute_slots() -> Vec<&'static str> {
    OBJECTS
        .iter()
        .chain(COLORS.iter())
        .chain(SCENES.iter())
        .chain(DETAILS.iter())
        .copied()
        .collect()
}

/// Binary bag-of-attributes caption embedder: each attribute word lights its
/// slot; other words are ignored.
#[derive(Debug, Clone)]
pub struct AttributeEmbedder {
    dim: usize,
    slots: HashMap<String, usize>,
}

impl AttributeEmbedder {
    pub fn new(noise_dims: usize) -> Self {
        let names = attribute_slots();
        let slots = names.iter().enumerate().map(|(i, w)| (w.to_string(), i)).collect();
        Self {
            dim: names.len() + noise_dims,
            slots,
        }
    }
}

impl CaptionEmbedder for AttributeEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, tokens: &[String]) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        for t in tokens {
            if let Some(&i) = self.slots.get(t) {
                v[i] = 1.0;
            }
        }
        v
    }
}

#[derive(Debug, Clone)]
pub struct ToyWorld {
    config: ToyWorldConfig,
    images: Vec<ToyImage>,
    index: HashMap<String, usize>,
    corpus: Corpus,
    vocab: Vocabulary,
}

impl ToyWorld {
    /// Generates the world; a pure function of `config`.
    pub fn generate(config: &ToyWorldConfig) -> Result<Self> {
        config.validate()?;
        let total = config.total_images();
        let cap = (config.max_detail_fraction * total as f64).floor() as usize;
        let mut attr_rng = stream(config.seed, "toy-attributes", &[]);
        let mut noise_rng = stream(config.seed, "toy-noise", &[]);
        let mut ref_rng = stream(config.seed, "toy-references", &[]);
        let noise = Normal::new(0.0, config.noise_std).expect("validated noise_std");
        let slots = attribute_slots().len();
        let mut detail_counts = [0usize; DETAILS.len()];

        let mut images = Vec::with_capacity(total);
        let mut records = Vec::with_capacity(total);
        let splits = [
            (Split::Train, config.train_images),
            (Split::Val, config.val_images),
            (Split::Test, config.test_images),
        ];
        for (split, count) in splits {
            for _ in 0..count {
                let id = format!("img{:04}", images.len());
                let object = attr_rng.random_range(0..OBJECTS.len());
                let color = attr_rng.random_range(0..COLORS.len());
                let scene = attr_rng.random_range(0..SCENES.len());
                let mut detail = if attr_rng.random_bool(config.detail_rate) {
                    Some(attr_rng.random_range(0..DETAILS.len()))
                } else {
                    None
                };
                if let Some(d) = detail {
                    if detail_counts[d] >= cap {
                        detail = None;
                    } else {
                        detail_counts[d] += 1;
                    }
                }
                let mut vector = vec![0.0; slots + config.noise_dims];
                vector[object] = 1.0;
                vector[OBJECTS.len() + color] = 1.0;
                vector[OBJECTS.len() + COLORS.len() + scene] = 1.0;
                if let Some(d) = detail {
                    vector[OBJECTS.len() + COLORS.len() + SCENES.len() + d] = 1.0;
                }
                for x in &mut vector[slots..] {
                    *x = noise.sample(&mut noise_rng);
                }
                let image = ToyImage {
                    id: id.clone(),
                    split,
                    object,
                    color,
                    scene,
                    detail,
                    vector,
                };
                let n_refs = ref_rng.random_range(config.min_refs..=config.max_refs);
                let references = (0..n_refs).map(|_| reference(&image, config, &mut ref_rng)).collect();
                records.push(ImageRecord {
                    id,
                    split,
                    references,
                });
                images.push(image);
            }
        }
        let corpus = Corpus::new(records)?;
        let index = images.iter().enumerate().map(|(i, im)| (im.id.clone(), i)).collect();
        Ok(Self {
            config: config.clone(),
            images,
            index,
            corpus,
            vocab: toy_vocabulary(),
        })
    }

    pub fn config(&self) -> &ToyWorldConfig {
        &self.config
    }

    pub fn images(&self) -> &[ToyImage] {
        &self.images
    }

    pub fn image(&self, id: &str) -> Result<&ToyImage> {
        self.index
            .get(id)
            .map(|&i| &self.images[i])
            .ok_or_else(|| Error::UnknownImage(id.to_owned()))
    }

    pub fn split(&self, split: Split) -> Vec<&ToyImage> {
        self.images.iter().filter(|im| im.split == split).collect()
    }

    pub fn split_ids(&self, split: Split) -> Vec<String> {
        self.split(split).into_iter().map(|im| im.id.clone()).collect()
    }

    pub fn corpus(&self) -> &Corpus {
        &self.corpus
    }

    /// References of one image.
    pub fn references(&self, id: &str) -> Result<&[Caption]> {
        self.corpus
            .image(id)
            .map(|r| r.references.as_slice())
            .ok_or_else(|| Error::UnknownImage(id.to_owned()))
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    /// Dimension of image vectors and policy contexts.
    pub fn context_dim(&self) -> usize {
        attribute_slots().len() + self.config.noise_dims
    }

    pub fn context(&self, id: &str) -> Result<&[f64]> {
        Ok(&self.image(id)?.vector)
    }

    /// All image vectors paired with the bag-of-attributes embedder.
    pub fn store(&self) -> EmbeddingStore {
        let rows = self.images.iter().map(|im| (im.id.clone(), im.vector.clone())).collect();
        EmbeddingStore::with_images(Box::new(AttributeEmbedder::new(self.config.noise_dims)), rows)
            .expect("toy vectors match the embedder dimension")
    }

    /// Nearest other image within the training split.
    pub fn nearest_train(&self, store: &EmbeddingStore) -> Result<NearestNeighborTable> {
        precompute_nearest(store, &self.split_ids(Split::Train))
    }

    /// How many images carry each detail.
    pub fn detail_counts(&self) -> BTreeMap<&'static str, usize> {
        let mut counts: BTreeMap<&'static str, usize> = DETAILS.iter().map(|d| (*d, 0)).collect();
        for d in self.images.iter().filter_map(|im| im.detail) {
            *counts.get_mut(DETAILS[d]).unwrap() += 1;
        }
        counts
    }
}

/// "there is a red dog with stripes standing near the grass"
const LONGEST_REFERENCE: usize = 11;

/// Function words, verbs, prepositions, then objects, colors, details and
/// scenes.
pub fn toy_vocabulary() -> Vocabulary {
    Vocabulary::new(
        FUNCTION_WORDS
            .iter()
            .chain(VERBS.iter())
            .chain(PREPOSITIONS.iter().map(|(_, p)| p))
            .chain(OBJECTS.iter())
            .chain(COLORS.iter())
            .chain(DETAILS.iter())
            .chain(SCENES.iter())
            .copied(),
    )
}

/// `[there is] a [color] object [with detail] [verb] [preposition the scene]`,
/// each optional part drawn independently.
fn reference<R: Rng + ?Sized>(image: &ToyImage, cfg: &ToyWorldConfig, rng: &mut R) -> Caption {
    let mut words: Vec<&str> = Vec::with_capacity(LONGEST_REFERENCE);
    if rng.random_bool(cfg.there_is_rate) {
        words.extend(["there", "is"]);
    }
    words.push("a");
    if rng.random_bool(cfg.color_mention_rate) {
        words.push(COLORS[image.color]);
    }
    words.push(OBJECTS[image.object]);
    if let Some(d) = image.detail {
        if rng.random_bool(cfg.detail_mention_rate) {
            words.extend(["with", DETAILS[d]]);
        }
    }
    if rng.random_bool(cfg.verb_rate) {
        words.push(VERBS[rng.random_range(0..VERBS.len())]);
    }
    if rng.random_bool(cfg.scene_mention_rate) {
        let total: u32 = PREPOSITIONS.iter().map(|(w, _)| w).sum();
        let mut pick = rng.random_range(0..total);
        let mut prep = PREPOSITIONS[0].1;
        for (w, p) in PREPOSITIONS {
            if pick < w {
                prep = p;
                break;
            }
            pick -= w;
        }
        words.extend([prep, "the", SCENES[image.scene]]);
    }
    Caption::from_tokens(&words).expect("generated captions are non-empty")
}

/// `ids` in a seeded random order.
pub fn shuffled(ids: &[String], seed: u64, name: &str, path: &[u64]) -> Vec<String> {
    let mut out = ids.to_vec();
    out.shuffle(&mut stream(seed, name, path));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ToyWorldConfig {
        ToyWorldConfig {
            train_images: 60,
            val_images: 20,
            test_images: 20,
            ..ToyWorldConfig::default()
        }
    }

    #[test]
    fn generation_is_pure() {
        let a = ToyWorld::generate(&small()).unwrap();
        let b = ToyWorld::generate(&small()).unwrap();
        assert_eq!(a.images(), b.images());
        assert_eq!(a.corpus(), b.corpus());
        let c = ToyWorld::generate(&ToyWorldConfig { seed: 1, ..small() }).unwrap();
        assert_ne!(a.images(), c.images());
    }

    #[test]
    fn details_are_rare() {
        let cfg = ToyWorldConfig::default();
        let w = ToyWorld::generate(&cfg).unwrap();
        let limit = (0.1 * cfg.total_images() as f64).floor() as usize;
        assert!(w.detail_counts().values().all(|&n| n <= limit));
        assert!(w.detail_counts().values().any(|&n| n > 0));
    }

    #[test]
    fn references_fit_the_vocabulary() {
        let w = ToyWorld::generate(&small()).unwrap();
        for record in w.corpus().images() {
            assert!((2..=5).contains(&record.references.len()));
            for r in &record.references {
                assert!(w.vocab().encode(r).is_ok());
                assert!(r.len() <= w.config().max_len);
            }
        }
        for im in w.images() {
            assert!(w.vocab().encode(&im.full_caption()).is_ok());
        }
    }

    #[test]
    fn attribute_embedding_matches_hand_cosine() {
        let w = ToyWorld::generate(&ToyWorldConfig {
            noise_dims: 0,
            ..small()
        })
        .unwrap();
        let store = w.store();
        let im = &w.images()[0];
        let o = OBJECTS[im.object];
        let c = Caption::new(&format!("a {o} on the moon")).unwrap();
        let attrs = (3 + usize::from(im.detail.is_some())) as f64;
        let expected = 1.0 / attrs.sqrt();
        assert!((store.similarity(&im.id, &c).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn splits_have_requested_sizes() {
        let w = ToyWorld::generate(&small()).unwrap();
        assert_eq!(w.split(Split::Train).len(), 60);
        assert_eq!(w.split(Split::Val).len(), 20);
        assert_eq!(w.split(Split::Test).len(), 20);
        assert_eq!(w.nearest_train(&w.store()).unwrap().len(), 60);
    }
}
