//! Corpus document frequencies, TF-IDF n-gram weights and fine-grained word
//! selection.
//!
//! A "document" is an image: an n-gram's document count is the number of
//! images with at least one reference containing it. The weight of an
//! n-gram ω of order n in caption c is
//!
//! ```text
//! g_ω(c) = n_ω(c) / Σ_{ω' ∈ Ω_n} n_ω'(c) · log_b(|I| / max(1, df(ω)))
//! ```
//!
//! with the term-frequency denominator taken over the order-n n-grams of c.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::{ngram_counts, Caption, Corpus, NGram, MAX_ORDER};
use crate::error::{Error, Result};

/// Per-order document counts over a set of images.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NGramWeightTable {
    doc_counts: Vec<HashMap<NGram, usize>>,
    total_images: usize,
}

impl NGramWeightTable {
    /// Builds the table from one reference set per image.
    pub fn from_reference_sets<'a, I>(reference_sets: I) -> Self
    where
        I: IntoIterator<Item = &'a [Caption]>,
    {
        let mut doc_counts = vec![HashMap::new(); MAX_ORDER];
        let mut total_images = 0;
        for refs in reference_sets {
            total_images += 1;
            for (order, counts) in doc_counts.iter_mut().enumerate() {
                let present: HashSet<NGram> = refs
                    .iter()
                    .flat_map(|r| ngram_counts(r.tokens(), order + 1).into_keys())
                    .collect();
                for ngram in present {
                    *counts.entry(ngram).or_insert(0) += 1;
                }
            }
        }
        Self {
            doc_counts,
            total_images,
        }
    }

    pub fn total_images(&self) -> usize {
        self.total_images
    }

    /// Number of images whose references contain `ngram`; 0 if unseen.
    pub fn document_count(&self, ngram: &NGram) -> usize {
        let order = ngram.order();
        if !(1..=MAX_ORDER).contains(&order) {
            return 0;
        }
        self.doc_counts[order - 1].get(ngram).copied().unwrap_or(0)
    }

    /// `log_b(|I| / max(1, df))`. Unseen n-grams get the maximum `log_b |I|`.
    pub fn idf(&self, ngram: &NGram, log_base: f64) -> f64 {
        let df = self.document_count(ngram).max(1);
        log_in_base(self.total_images as f64 / df as f64, log_base)
    }

    /// Number of distinct n-grams stored for `order`.
    pub fn distinct(&self, order: usize) -> usize {
        self.doc_counts.get(order.wrapping_sub(1)).map_or(0, HashMap::len)
    }

    /// Stored `(ngram, document_count)` pairs of one order, sorted by n-gram.
    pub fn entries(&self, order: usize) -> Vec<(&NGram, usize)> {
        let mut entries: Vec<_> = self.doc_counts[order - 1].iter().map(|(g, &c)| (g, c)).collect();
        entries.sort_by(|a, b| a.0.cmp(b.0));
        entries
    }

    /// CSV `n,ngram,doc_count,idf` sorted by `(n, ngram)`.
    pub fn to_csv(&self, log_base: f64) -> String {
        let mut out = String::from("n,ngram,doc_count,idf\n");
        for order in 1..=MAX_ORDER {
            for (ngram, count) in self.entries(order) {
                let idf = self.idf(ngram, log_base);
                writeln!(out, "{order},{ngram},{count},{idf:.12}").unwrap();
            }
        }
        out
    }
}

pub fn build_weight_table(corpus: &Corpus) -> NGramWeightTable {
    NGramWeightTable::from_reference_sets(corpus.images().iter().map(|image| image.references.as_slice()))
}

pub(crate) fn log_in_base(x: f64, base: f64) -> f64 {
    if base == std::f64::consts::E {
        x.ln()
    } else {
        x.ln() / base.ln()
    }
}

/// Thresholds for fine-grained word selection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LdConfig {
    /// Phrase threshold, applied to n-grams of order 2..=4.
    pub lambda: f64,
    /// Word threshold, applied to the 1-gram weight.
    pub eta: f64,
    pub idf_log_base: f64,
    /// Sum the reference terms of the local reward instead of averaging them.
    #[serde(default)]
    pub sum_over_references: bool,
}

impl Default for LdConfig {
    fn default() -> Self {
        Self {
            lambda: 5.0,
            eta: 1.0,
            idf_log_base: std::f64::consts::E,
            sum_over_references: false,
        }
    }
}

impl LdConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda.is_nan() || self.lambda < 0.0 {
            return Err(Error::InvalidConfig(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if self.eta.is_nan() || self.eta < 0.0 {
            return Err(Error::InvalidConfig(format!("eta must be >= 0, got {}", self.eta)));
        }
        if !(self.idf_log_base > 1.0 && self.idf_log_base.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "idf log base must be finite and > 1, got {}",
                self.idf_log_base
            )));
        }
        Ok(())
    }
}

/// TF-IDF weights of one order for one caption.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct OrderWeights {
    pub weights: BTreeMap<NGram, f64>,
    /// Σ g², summed in key order.
    pub sq_norm: f64,
}

impl OrderWeights {
    pub fn get(&self, ngram: &NGram) -> f64 {
        self.weights.get(ngram).copied().unwrap_or(0.0)
    }

    pub fn norm(&self) -> f64 {
        self.sq_norm.sqrt()
    }
}

/// The per-order weight vectors g^(n)(c) of a caption.
#[derive(Debug, Clone, PartialEq)]
pub struct CaptionWeights {
    pub orders: Vec<OrderWeights>,
    pub len: usize,
}

impl CaptionWeights {
    pub fn order(&self, n: usize) -> &OrderWeights {
        &self.orders[n - 1]
    }

    pub fn weight(&self, ngram: &NGram) -> f64 {
        let n = ngram.order();
        if (1..=MAX_ORDER).contains(&n) {
            self.orders[n - 1].get(ngram)
        } else {
            0.0
        }
    }
}

pub fn caption_weights<S: AsRef<str>>(tokens: &[S], table: &NGramWeightTable, log_base: f64) -> CaptionWeights {
    let orders = (1..=MAX_ORDER)
        .map(|n| {
            let counts = ngram_counts(tokens, n);
            let total: usize = counts.values().sum();
            let mut sq_norm = 0.0;
            let weights: BTreeMap<NGram, f64> = counts
                .into_iter()
                .map(|(ngram, count)| {
                    let g = count as f64 / total as f64 * table.idf(&ngram, log_base);
                    sq_norm += g * g;
                    (ngram, g)
                })
                .collect();
            OrderWeights { weights, sq_norm }
        })
        .collect();
    CaptionWeights {
        orders,
        len: tokens.len(),
    }
}

/// Natural-log TF-IDF weight of `omega` in `caption`.
pub fn tfidf(caption: &Caption, omega: &NGram, table: &NGramWeightTable) -> f64 {
    tfidf_with_base(caption, omega, table, std::f64::consts::E)
}

pub fn tfidf_with_base(caption: &Caption, omega: &NGram, table: &NGramWeightTable, log_base: f64) -> f64 {
    let n = omega.order();
    let counts = ngram_counts(caption.tokens(), n);
    let total: usize = counts.values().sum();
    match counts.get(omega) {
        Some(&count) if total > 0 => count as f64 / total as f64 * table.idf(omega, log_base),
        _ => 0.0,
    }
}

/// Distinct n-grams of order 2..=4 covering position `t` whose weight
/// exceeds `lambda`, in (order, n-gram) order.
pub fn qualifying_phrases(tokens: &[String], weights: &CaptionWeights, t: usize, lambda: f64) -> Vec<NGram> {
    let len = tokens.len();
    let mut found = BTreeSet::new();
    for n in 2..=MAX_ORDER.min(len) {
        let first = t.saturating_sub(n - 1);
        let last = t.min(len - n);
        for start in first..=last {
            let ngram = NGram::from_tokens(&tokens[start..start + n]);
            if weights.order(n).get(&ngram) > lambda {
                found.insert((n, ngram));
            }
        }
    }
    found.into_iter().map(|(_, g)| g).collect()
}

/// Flags word `t` when it lies inside some order-2..4 n-gram weighted above
/// λ and its own 1-gram weight exceeds η.
pub fn select_fine_grained(caption: &Caption, table: &NGramWeightTable, cfg: &LdConfig) -> Vec<bool> {
    let weights = caption_weights(caption.tokens(), table, cfg.idf_log_base);
    flags_from_weights(caption.tokens(), &weights, cfg)
}

pub(crate) fn flags_from_weights(tokens: &[String], weights: &CaptionWeights, cfg: &LdConfig) -> Vec<bool> {
    (0..tokens.len())
        .map(|t| {
            let word = NGram::from_tokens(&tokens[t..=t]);
            weights.order(1).get(&word) > cfg.eta && !qualifying_phrases(tokens, weights, t, cfg.lambda).is_empty()
        })
        .collect()
}
