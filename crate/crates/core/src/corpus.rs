//! Caption datasets: tokenization, per-image reference sets and n-gram counts.
//!
//! The dataset file format is
//! `{"images":[{"id":"<str>","split":"train|val|test","captions":["<str>",...]}]}`.
//! Image order in the file is preserved.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Characters removed by [`tokenize`]. Apostrophes and hyphens are kept.
pub const STRIPPED_PUNCTUATION: &[char] = &['.', ',', '!', '?', ';', ':', '"', '(', ')'];

/// Highest n-gram order used anywhere in the toolkit.
pub const MAX_ORDER: usize = 4;

/// Lowercase, strip `.,!?;:"()` and split on whitespace.
pub fn tokenize(raw: &str) -> Result<Vec<String>> {
    let cleaned: String = raw
        .chars()
        .filter(|c| !STRIPPED_PUNCTUATION.contains(c))
        .flat_map(char::to_lowercase)
        .collect();
    let tokens: Vec<String> = cleaned.split_whitespace().map(str::to_owned).collect();
    if tokens.is_empty() {
        return Err(Error::EmptyCaption { raw: raw.to_owned() });
    }
    Ok(tokens)
}

/// A tokenized caption together with the string it came from.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Caption {
    raw: String,
    tokens: Vec<String>,
}

impl Caption {
    pub fn new(raw: &str) -> Result<Self> {
        Ok(Self {
            raw: raw.to_owned(),
            tokens: tokenize(raw)?,
        })
    }

    /// Builds a caption from tokens that are already normalized.
    ///
    /// Each token is re-run through [`tokenize`] so the caption invariants
    /// hold even for hand-built token lists.
    pub fn from_tokens<S: AsRef<str>>(tokens: &[S]) -> Result<Self> {
        let raw = tokens.iter().map(AsRef::as_ref).collect::<Vec<_>>().join(" ");
        Self::new(&raw)
    }

    pub fn raw(&self) -> &str {
        &self.raw
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Tokens joined by single spaces.
    pub fn text(&self) -> String {
        self.tokens.join(" ")
    }

    /// The first `len` tokens as a caption of their own.
    pub fn prefix(&self, len: usize) -> Option<Caption> {
        if len == 0 || len > self.tokens.len() {
            return None;
        }
        let tokens = self.tokens[..len].to_vec();
        Some(Caption {
            raw: tokens.join(" "),
            tokens,
        })
    }
}

impl fmt::Display for Caption {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.text())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
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

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(other.to_owned()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageRecord {
    pub id: String,
    pub split: Split,
    pub references: Vec<Caption>,
}

/// An immutable set of images with tokenized references.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    images: Vec<ImageRecord>,
    vocab: BTreeMap<String, u32>,
}

impl Corpus {
    /// Validates records and builds the vocabulary. Token ids follow first
    /// appearance in image order.
    pub fn new(images: Vec<ImageRecord>) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let mut seen = HashSet::new();
        let mut vocab = BTreeMap::new();
        for image in &images {
            if !seen.insert(image.id.as_str()) {
                return Err(Error::DuplicateId(image.id.clone()));
            }
            if image.references.is_empty() {
                return Err(Error::EmptyReferences(image.id.clone()));
            }
            for token in image.references.iter().flat_map(Caption::tokens) {
                let next = vocab.len() as u32;
                vocab.entry(token.clone()).or_insert(next);
            }
        }
        Ok(Self { images, vocab })
    }

    pub fn images(&self) -> &[ImageRecord] {
        &self.images
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn vocab(&self) -> &BTreeMap<String, u32> {
        &self.vocab
    }

    pub fn image(&self, id: &str) -> Option<&ImageRecord> {
        self.images.iter().find(|image| image.id == id)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ImageRecord> {
        self.images.iter().filter(move |image| image.split == split)
    }

    /// The images of one split as a corpus of their own, or `None` if the
    /// split is empty.
    pub fn subset(&self, split: Split) -> Option<Corpus> {
        let images: Vec<_> = self.split(split).cloned().collect();
        Corpus::new(images).ok()
    }

    /// Serializes back to the dataset JSON format using the raw strings.
    pub fn to_json(&self) -> String {
        let file = DatasetFile {
            images: self
                .images
                .iter()
                .map(|image| DatasetImage {
                    id: image.id.clone(),
                    split: image.split.as_str().to_owned(),
                    captions: image.references.iter().map(|c| c.raw().to_owned()).collect(),
                })
                .collect(),
        };
        serde_json::to_string(&file).expect("dataset serialization is infallible")
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetFile {
    images: Vec<DatasetImage>,
}

#[derive(Serialize, Deserialize)]
struct DatasetImage {
    id: String,
    split: String,
    captions: Vec<String>,
}

/// Parses dataset JSON text.
pub fn parse_dataset(text: &str) -> Result<Corpus> {
    let file: DatasetFile = serde_json::from_str(text)?;
    let mut records = Vec::with_capacity(file.images.len());
    for image in file.images {
        let split = image.split.parse().map_err(|split| Error::InvalidSplit {
            id: image.id.clone(),
            split,
        })?;
        let references = image
            .captions
            .iter()
            .map(|raw| Caption::new(raw))
            .collect::<Result<Vec<_>>>()?;
        records.push(ImageRecord {
            id: image.id,
            split,
            references,
        });
    }
    Corpus::new(records)
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Corpus> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(&text)
}

/// A contiguous token window, stored with tokens joined by single spaces.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NGram(String);

impl NGram {
    pub fn from_tokens<S: AsRef<str>>(tokens: &[S]) -> Self {
        let parts: Vec<&str> = tokens.iter().map(AsRef::as_ref).collect();
        NGram(parts.join(" "))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn order(&self) -> usize {
        self.0.split(' ').count()
    }

    pub fn tokens(&self) -> impl Iterator<Item = &str> {
        self.0.split(' ')
    }
}

impl fmt::Display for NGram {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Multiset of order-`n` n-grams in a token sequence.
pub fn ngram_counts<S: AsRef<str>>(tokens: &[S], n: usize) -> BTreeMap<NGram, usize> {
    let mut counts = BTreeMap::new();
    if n == 0 {
        return counts;
    }
    for window in tokens.windows(n) {
        *counts.entry(NGram::from_tokens(window)).or_insert(0) += 1;
    }
    counts
}

/// All contiguous windows of length `n` (1 ≤ n ≤ 4) with multiplicities.
///
/// # Panics
/// If `n` is outside `1..=4`.
pub fn ngrams(caption: &Caption, n: usize) -> BTreeMap<NGram, usize> {
    assert!((1..=MAX_ORDER).contains(&n), "n-gram order {n} outside 1..=4");
    ngram_counts(caption.tokens(), n)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture() -> &'static str {
        r#"{"images":[
            {"id":"1","split":"train","captions":["A dog on the grass.","A brown dog."]},
            {"id":"2","split":"test","captions":["A zebra (striped)!"]}
        ]}"#
    }

    #[test]
    fn tokenize_lowercases_and_strips() {
        assert_eq!(tokenize("A red STOP sign.").unwrap(), ["a", "red", "stop", "sign"]);
        assert_eq!(tokenize("man's surfboard").unwrap(), ["man's", "surfboard"]);
        assert_eq!(tokenize("  (hello),  world!? ").unwrap(), ["hello", "world"]);
    }

    #[test]
    fn tokenize_rejects_blank() {
        assert!(matches!(tokenize("  "), Err(Error::EmptyCaption { .. })));
        assert!(matches!(tokenize(" ... "), Err(Error::EmptyCaption { .. })));
    }

    #[test]
    fn load_two_image_fixture() {
        let corpus = parse_dataset(fixture()).unwrap();
        assert_eq!(corpus.len(), 2);
        let words: Vec<&str> = corpus.vocab().keys().map(String::as_str).collect();
        assert_eq!(words, ["a", "brown", "dog", "grass", "on", "striped", "the", "zebra"]);
        assert_eq!(corpus.vocab()["a"], 0);
        assert_eq!(corpus.images()[1].split, Split::Test);
        assert_eq!(corpus.images()[0].references[1].tokens(), ["a", "brown", "dog"]);
    }

    #[test]
    fn duplicate_ids_rejected() {
        let text = r#"{"images":[{"id":"x","split":"train","captions":["a"]},
                                 {"id":"x","split":"val","captions":["b"]}]}"#;
        assert!(matches!(parse_dataset(text), Err(Error::DuplicateId(id)) if id == "x"));
    }

    #[test]
    fn empty_references_and_bad_split_rejected() {
        let empty = r#"{"images":[{"id":"x","split":"train","captions":[]}]}"#;
        assert!(matches!(parse_dataset(empty), Err(Error::EmptyReferences(_))));
        let split = r#"{"images":[{"id":"x","split":"dev","captions":["a"]}]}"#;
        assert!(matches!(parse_dataset(split), Err(Error::InvalidSplit { .. })));
        assert!(matches!(parse_dataset("{"), Err(Error::Json(_))));
        assert!(matches!(parse_dataset(r#"{"images":[]}"#), Err(Error::EmptyCorpus)));
    }

    #[test]
    fn ngram_windows() {
        let c = Caption::new("a red sign").unwrap();
        let bigrams: Vec<_> = ngrams(&c, 2).into_keys().map(|g| g.0).collect();
        assert_eq!(bigrams, ["a red", "red sign"]);
        assert!(ngrams(&Caption::new("a").unwrap(), 3).is_empty());
        let triple = ngrams(&Caption::new("a a a").unwrap(), 1);
        assert_eq!(triple.len(), 1);
        assert_eq!(triple[&NGram::from_tokens(&["a"])], 3);
    }

    #[test]
    fn json_round_trip_is_stable() {
        let corpus = parse_dataset(fixture()).unwrap();
        let again = parse_dataset(&corpus.to_json()).unwrap();
        assert_eq!(corpus, again);
    }
}
