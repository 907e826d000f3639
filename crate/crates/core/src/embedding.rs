//! Image-caption similarity, whole-set nearest images and minibatch hard
//! negatives.
//!
//! Similarity `s(I, c)` is the cosine between an image vector and the
//! embedded caption. Nearest neighbors use Euclidean distance between image
//! vectors.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use crate::corpus::Caption;
use crate::error::{Error, Result};

/// Maps a caption into the image vector space.
pub trait CaptionEmbedder: Send + Sync {
    fn dim(&self) -> usize;
    fn embed(&self, tokens: &[String]) -> Vec<f64>;
}

/// Mean of per-word vectors; unknown words are skipped, and a caption with
/// no known words embeds to the zero vector.
#[derive(Debug, Clone)]
pub struct MeanWordEmbedder {
    dim: usize,
    words: HashMap<String, Vec<f64>>,
}

impl MeanWordEmbedder {
    pub fn new(dim: usize, rows: Vec<(String, Vec<f64>)>) -> Result<Self> {
        let mut words = HashMap::with_capacity(rows.len());
        for (word, v) in rows {
            check_vector(&word, &v, dim)?;
            words.insert(word, v);
        }
        Ok(Self { dim, words })
    }
}

impl CaptionEmbedder for MeanWordEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, tokens: &[String]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        let mut known = 0;
        for v in tokens.iter().filter_map(|t| self.words.get(t)) {
            known += 1;
            for (o, x) in out.iter_mut().zip(v) {
                *o += x;
            }
        }
        if known > 0 {
            out.iter_mut().for_each(|o| *o /= known as f64);
        }
        out
    }
}

fn check_vector(id: &str, v: &[f64], dim: usize) -> Result<()> {
    if v.len() != dim {
        return Err(Error::DimensionMismatch {
            id: id.to_owned(),
            expected: dim,
            got: v.len(),
        });
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFiniteVector(id.to_owned()));
    }
    Ok(())
}

/// Cosine similarity; 0 when either vector is all zeros.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0)
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Image vectors of a fixed dimension plus the caption embedder that maps
/// into the same space.
pub struct EmbeddingStore {
    dim: usize,
    index: HashMap<String, usize>,
    ids: Vec<String>,
    vectors: Vec<Vec<f64>>,
    embedder: Box<dyn CaptionEmbedder>,
}

impl std::fmt::Debug for EmbeddingStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EmbeddingStore")
            .field("dim", &self.dim)
            .field("images", &self.ids.len())
            .finish()
    }
}

impl EmbeddingStore {
    pub fn new(embedder: Box<dyn CaptionEmbedder>) -> Self {
        Self {
            dim: embedder.dim(),
            index: HashMap::new(),
            ids: Vec::new(),
            vectors: Vec::new(),
            embedder,
        }
    }

    /// Builds a store from `(id, vector)` rows.
    pub fn with_images(embedder: Box<dyn CaptionEmbedder>, rows: Vec<(String, Vec<f64>)>) -> Result<Self> {
        let mut store = Self::new(embedder);
        for (id, v) in rows {
            store.insert(id, v)?;
        }
        Ok(store)
    }

    /// Adds or replaces an image vector.
    pub fn insert(&mut self, id: String, vector: Vec<f64>) -> Result<()> {
        check_vector(&id, &vector, self.dim)?;
        match self.index.get(&id) {
            Some(&i) => self.vectors[i] = vector,
            None => {
                self.index.insert(id.clone(), self.ids.len());
                self.ids.push(id);
                self.vectors.push(vector);
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn image_vector(&self, id: &str) -> Result<&[f64]> {
        self.index
            .get(id)
            .map(|&i| self.vectors[i].as_slice())
            .ok_or_else(|| Error::MissingEmbedding(id.to_owned()))
    }

    pub fn embed(&self, caption: &Caption) -> Vec<f64> {
        self.embedder.embed(caption.tokens())
    }

    /// `s(I, c)`.
    pub fn similarity(&self, image: &str, caption: &Caption) -> Result<f64> {
        Ok(cosine(self.image_vector(image)?, &self.embed(caption)))
    }

    /// `s(I, c)` for a caption that is already embedded.
    pub fn similarity_embedded(&self, image: &str, embedded: &[f64]) -> Result<f64> {
        Ok(cosine(self.image_vector(image)?, embedded))
    }
}

/// For every image, the most similar other image `I_g` and its distance.
#[derive(Debug, Clone, PartialEq)]
pub struct NearestNeighborTable {
    entries: BTreeMap<String, (String, f64)>,
}

impl NearestNeighborTable {
    pub fn nearest(&self, id: &str) -> Result<&str> {
        self.entries
            .get(id)
            .map(|(n, _)| n.as_str())
            .ok_or_else(|| Error::MissingNeighbor(id.to_owned()))
    }

    pub fn distance(&self, id: &str) -> Option<f64> {
        self.entries.get(id).map(|(_, d)| *d)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str, f64)> {
        self.entries.iter().map(|(id, (n, d))| (id.as_str(), n.as_str(), *d))
    }

    /// CSV `id,nearest_id,distance` sorted by id.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,nearest_id,distance\n");
        for (id, nearest, d) in self.iter() {
            writeln!(out, "{id},{nearest},{d:.12}").unwrap();
        }
        out
    }
}

/// Exhaustive Euclidean nearest-image search over `ids`. Ties go to the
/// lexicographically smallest id.
pub fn precompute_nearest(store: &EmbeddingStore, ids: &[String]) -> Result<NearestNeighborTable> {
    if ids.len() < 2 {
        return Err(Error::InsufficientImages(ids.len()));
    }
    let vectors = ids
        .iter()
        .map(|id| store.image_vector(id))
        .collect::<Result<Vec<_>>>()?;
    let mut entries = BTreeMap::new();
    for (i, id) in ids.iter().enumerate() {
        let mut best: Option<(f64, &String)> = None;
        for (j, other) in ids.iter().enumerate() {
            if i == j || other == id {
                continue;
            }
            let d = euclidean(vectors[i], vectors[j]);
            let better = match best {
                None => true,
                Some((bd, bid)) => d < bd || (d == bd && other < bid),
            };
            if better {
                best = Some((d, other));
            }
        }
        let (d, nearest) = best.ok_or(Error::InsufficientImages(1))?;
        entries.insert(id.clone(), (nearest.clone(), d));
    }
    Ok(NearestNeighborTable { entries })
}

/// Hardest in-batch negatives for one item.
#[derive(Debug, Clone, PartialEq)]
pub struct HardNegatives {
    /// Batch position of `I'`, the other image most similar to the item's caption.
    pub image_pos: usize,
    pub image_id: String,
    /// Batch position of `c'`, the other caption most similar to the item's image.
    pub caption_pos: usize,
    pub caption: Caption,
}

/// Items sharing the item's image id are never negatives, so repeated
/// samples of one image do not count against each other. Ties go to the
/// earliest batch position.
pub fn mine_hard_negatives(batch: &[(String, Caption)], store: &EmbeddingStore) -> Result<Vec<HardNegatives>> {
    if batch.len() < 2 {
        return Err(Error::InsufficientBatch(batch.len()));
    }
    let embedded: Vec<Vec<f64>> = batch.iter().map(|(_, c)| store.embed(c)).collect();
    let images = batch
        .iter()
        .map(|(id, _)| store.image_vector(id))
        .collect::<Result<Vec<_>>>()?;
    // sim[i][j] = s(I_i, c_j)
    let sim: Vec<Vec<f64>> = images
        .iter()
        .map(|img| embedded.iter().map(|e| cosine(img, e)).collect())
        .collect();
    let mut out = Vec::with_capacity(batch.len());
    for (i, (id, _)) in batch.iter().enumerate() {
        let others: Vec<usize> = (0..batch.len()).filter(|&j| batch[j].0 != *id).collect();
        if others.is_empty() {
            return Err(Error::InsufficientBatch(1));
        }
        let argmax = |score: &dyn Fn(usize) -> f64| {
            let mut best = others[0];
            for &j in &others[1..] {
                if score(j) > score(best) {
                    best = j;
                }
            }
            best
        };
        let image_pos = argmax(&|j| sim[j][i]);
        let caption_pos = argmax(&|j| sim[i][j]);
        out.push(HardNegatives {
            image_pos,
            image_id: batch[image_pos].0.clone(),
            caption_pos,
            caption: batch[caption_pos].1.clone(),
        });
    }
    Ok(out)
}

/// Parses `id,dim=<d>` followed by `id,v0,...,v{d-1}` rows.
pub fn parse_vectors_csv(text: &str, context: &str) -> Result<(usize, Vec<(String, Vec<f64>)>)> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or_else(|| Error::parse(context, 1, "missing header"))?;
    let dim = header
        .trim()
        .strip_prefix("id,dim=")
        .and_then(|d| d.parse::<usize>().ok())
        .ok_or_else(|| Error::parse(context, 1, format!("expected header `id,dim=<d>`, got {header:?}")))?;
    let mut rows = Vec::new();
    for (i, line) in lines {
        let mut fields = line.trim().split(',');
        let id = fields.next().unwrap_or_default().to_owned();
        let v = fields
            .map(|f| f.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::parse(context, i + 1, e.to_string()))?;
        if v.len() != dim {
            return Err(Error::parse(
                context,
                i + 1,
                format!("{id}: expected {dim} values, got {}", v.len()),
            ));
        }
        rows.push((id, v));
    }
    Ok((dim, rows))
}

pub fn vectors_to_csv<'a>(dim: usize, rows: impl IntoIterator<Item = (&'a str, &'a [f64])>) -> String {
    let mut out = format!("id,dim={dim}\n");
    for (id, v) in rows {
        out.push_str(id);
        for x in v {
            write!(out, ",{x}").unwrap();
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    /// One dimension per known word.
    struct OneHot(Vec<&'static str>);

    impl CaptionEmbedder for OneHot {
        fn dim(&self) -> usize {
            self.0.len()
        }

        fn embed(&self, tokens: &[String]) -> Vec<f64> {
            self.0
                .iter()
                .map(|w| tokens.iter().filter(|t| t == w).count() as f64)
                .collect()
        }
    }

    fn store(rows: Vec<(&str, Vec<f64>)>) -> EmbeddingStore {
        let dim = rows[0].1.len();
        let words = ["red", "blue", "dog", "cat"][..dim.min(4)].to_vec();
        EmbeddingStore::with_images(
            Box::new(OneHot(words)),
            rows.into_iter().map(|(id, v)| (id.to_owned(), v)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn cosine_identity_and_orthogonal() {
        let s = store(vec![("a", vec![1.0, 0.0, 1.0, 0.0]), ("b", vec![0.0, 1.0, 0.0, 1.0])]);
        let c = Caption::new("red dog").unwrap();
        assert!((s.similarity("a", &c).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(s.similarity("b", &c).unwrap(), 0.0);
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 2.0]), 0.0);
        assert!(matches!(s.similarity("z", &c), Err(Error::MissingEmbedding(_))));
    }

    #[test]
    fn collinear_neighbors() {
        let s = store(vec![("p0", vec![0.0]), ("p1", vec![1.0]), ("p3", vec![3.0])]);
        let ids: Vec<String> = s.ids().to_vec();
        let nn = precompute_nearest(&s, &ids).unwrap();
        assert_eq!(nn.nearest("p0").unwrap(), "p1");
        assert_eq!(nn.nearest("p1").unwrap(), "p0");
        assert_eq!(nn.nearest("p3").unwrap(), "p1");
        assert_eq!(nn.distance("p3"), Some(2.0));
    }

    #[test]
    fn nearest_tie_breaks_by_id() {
        let s = store(vec![("m", vec![0.0]), ("z", vec![1.0]), ("b", vec![-1.0])]);
        let ids: Vec<String> = s.ids().to_vec();
        assert_eq!(precompute_nearest(&s, &ids).unwrap().nearest("m").unwrap(), "b");
        assert!(matches!(
            precompute_nearest(&s, &ids[..1]),
            Err(Error::InsufficientImages(1))
        ));
    }

    #[test]
    fn two_item_batch_negatives_are_each_other() {
        let s = store(vec![("a", vec![1.0, 0.0, 1.0, 0.0]), ("b", vec![0.0, 1.0, 0.0, 1.0])]);
        let batch = vec![
            ("a".to_owned(), Caption::new("red dog").unwrap()),
            ("b".to_owned(), Caption::new("blue cat").unwrap()),
        ];
        let neg = mine_hard_negatives(&batch, &s).unwrap();
        assert_eq!((neg[0].image_pos, neg[0].caption_pos), (1, 1));
        assert_eq!((neg[1].image_pos, neg[1].caption_pos), (0, 0));
        assert!(matches!(mine_hard_negatives(&batch[..1], &s), Err(Error::InsufficientBatch(1))));
    }

    #[test]
    fn caption_matching_foreign_image_picks_that_image() {
        let s = store(vec![
            ("a", vec![1.0, 0.0, 1.0, 0.0]),
            ("b", vec![0.0, 1.0, 0.0, 1.0]),
            ("c", vec![0.0, 1.0, 1.0, 0.0]),
        ]);
        // Item 0's caption describes image c exactly.
        let batch = vec![
            ("a".to_owned(), Caption::new("blue dog").unwrap()),
            ("b".to_owned(), Caption::new("blue cat").unwrap()),
            ("c".to_owned(), Caption::new("red cat").unwrap()),
        ];
        let neg = mine_hard_negatives(&batch, &s).unwrap();
        assert_eq!(neg[0].image_id, "c");
    }

    #[test]
    fn vectors_csv_round_trip_and_errors() {
        let text = "id,dim=2\nx,1,2.5\ny,-1,0\n";
        let (dim, rows) = parse_vectors_csv(text, "t").unwrap();
        assert_eq!(dim, 2);
        assert_eq!(rows[1], ("y".to_owned(), vec![-1.0, 0.0]));
        let back = vectors_to_csv(dim, rows.iter().map(|(i, v)| (i.as_str(), v.as_slice())));
        assert_eq!(back, text);
        assert!(parse_vectors_csv("id,dim=2\nx,1\n", "t").is_err());
        assert!(parse_vectors_csv("id,v0\n", "t").is_err());
        let bad = EmbeddingStore::with_images(Box::new(OneHot(vec!["a"])), vec![("x".into(), vec![f64::NAN])]);
        assert!(matches!(bad, Err(Error::NonFiniteVector(_))));
    }
}
