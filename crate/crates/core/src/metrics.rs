//! Caption quality metrics: CIDEr-D, BLEU-1..4, ROUGE-L, and the
//! fine-granularity statistics UniCap and AvgLen.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::{ngram_counts, Caption, Corpus, MAX_ORDER};
use crate::error::{Error, Result};
use crate::ngram_stats::{caption_weights, CaptionWeights, NGramWeightTable, OrderWeights};

/// Standard deviation of the CIDEr-D Gaussian length penalty.
pub const CIDER_SIGMA: f64 = 6.0;
/// Scale factor applied to CIDEr scores.
pub const CIDER_SCALE: f64 = 10.0;
/// ROUGE-L recall weight β.
pub const ROUGE_BETA: f64 = 1.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CiderVariant {
    /// Clipped weights and Gaussian length penalty.
    CiderD,
    /// Plain TF-IDF cosine; no clipping, no length penalty.
    Cider,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CiderConfig {
    pub variant: CiderVariant,
    pub sigma: f64,
    pub idf_log_base: f64,
}

impl Default for CiderConfig {
    fn default() -> Self {
        Self {
            variant: CiderVariant::CiderD,
            sigma: CIDER_SIGMA,
            idf_log_base: std::f64::consts::E,
        }
    }
}

/// Similarity of two order-n weight vectors. With `clip`, each candidate
/// weight is capped at the reference weight before the dot product.
/// Zero when either vector is zero.
pub(crate) fn order_similarity(cand: &OrderWeights, reference: &OrderWeights, clip: bool) -> f64 {
    let denom = (cand.sq_norm * reference.sq_norm).sqrt();
    if denom == 0.0 {
        return 0.0;
    }
    let mut dot = 0.0;
    for (ngram, &wc) in &cand.weights {
        let wr = reference.get(ngram);
        if wr != 0.0 {
            dot += if clip { wc.min(wr) * wr } else { wc * wr };
        }
    }
    dot / denom
}

/// CIDEr from precomputed weight vectors.
pub fn cider_from_weights(cand: &CaptionWeights, refs: &[CaptionWeights], cfg: &CiderConfig) -> f64 {
    if refs.is_empty() {
        return 0.0;
    }
    let clip = cfg.variant == CiderVariant::CiderD;
    let mut total = 0.0;
    for reference in refs {
        let penalty = match cfg.variant {
            CiderVariant::CiderD => {
                let delta = cand.len as f64 - reference.len as f64;
                (-(delta * delta) / (2.0 * cfg.sigma * cfg.sigma)).exp()
            }
            CiderVariant::Cider => 1.0,
        };
        for n in 1..=MAX_ORDER {
            total += order_similarity(cand.order(n), reference.order(n), clip) * penalty;
        }
    }
    total / (refs.len() * MAX_ORDER) as f64 * CIDER_SCALE
}

/// CIDEr-D of `caption` against `refs`, scaled ×10.
pub fn cider(caption: &Caption, refs: &[Caption], table: &NGramWeightTable) -> f64 {
    cider_with(caption, refs, table, &CiderConfig::default())
}

pub fn cider_with(caption: &Caption, refs: &[Caption], table: &NGramWeightTable, cfg: &CiderConfig) -> f64 {
    let cand = caption_weights(caption.tokens(), table, cfg.idf_log_base);
    let refs: Vec<_> = refs
        .iter()
        .map(|r| caption_weights(r.tokens(), table, cfg.idf_log_base))
        .collect();
    cider_from_weights(&cand, &refs, cfg)
}

/// Clipped n-gram matches and candidate n-gram totals for orders 1..=4.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct BleuStats {
    pub matches: [usize; 4],
    pub totals: [usize; 4],
    pub cand_len: usize,
    pub ref_len: usize,
}

impl BleuStats {
    pub fn compute(caption: &Caption, refs: &[Caption]) -> Self {
        let mut stats = BleuStats {
            cand_len: caption.len(),
            ref_len: closest_ref_len(caption.len(), refs),
            ..Default::default()
        };
        for n in 1..=MAX_ORDER {
            let cand = ngram_counts(caption.tokens(), n);
            let mut max_ref: BTreeMap<_, usize> = BTreeMap::new();
            for r in refs {
                for (g, c) in ngram_counts(r.tokens(), n) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(c);
                }
            }
            stats.totals[n - 1] = cand.values().sum();
            stats.matches[n - 1] = cand
                .iter()
                .map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0)))
                .sum();
        }
        stats
    }

    fn add(&mut self, other: &BleuStats) {
        for n in 0..MAX_ORDER {
            self.matches[n] += other.matches[n];
            self.totals[n] += other.totals[n];
        }
        self.cand_len += other.cand_len;
        self.ref_len += other.ref_len;
    }

    /// BLEU-1..4 with brevity penalty. An order with no matches makes that
    /// and every higher BLEU-n zero.
    pub fn scores(&self) -> [f64; 4] {
        let mut out = [0.0; 4];
        if self.cand_len == 0 {
            return out;
        }
        let bp = if self.cand_len >= self.ref_len {
            1.0
        } else {
            (1.0 - self.ref_len as f64 / self.cand_len as f64).exp()
        };
        let mut log_sum = 0.0;
        for n in 0..MAX_ORDER {
            if self.matches[n] == 0 {
                break;
            }
            log_sum += (self.matches[n] as f64 / self.totals[n] as f64).ln();
            out[n] = bp * (log_sum / (n + 1) as f64).exp();
        }
        out
    }
}

/// Reference length closest to `cand_len`; ties go to the shorter one.
fn closest_ref_len(cand_len: usize, refs: &[Caption]) -> usize {
    refs.iter()
        .map(Caption::len)
        .min_by_key(|&len| (len.abs_diff(cand_len), len))
        .unwrap_or(0)
}

/// Sentence-level BLEU-1..4.
pub fn bleu(caption: &Caption, refs: &[Caption]) -> [f64; 4] {
    BleuStats::compute(caption, refs).scores()
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut row = vec![0usize; b.len() + 1];
    for x in a {
        let mut diag = 0;
        for (j, y) in b.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = if x == y { diag + 1 } else { up.max(row[j]) };
            diag = up;
        }
    }
    row[b.len()]
}

/// ROUGE-L F-score with β = 1.2. Precision and recall are each maximized
/// over the references before combining:
/// `F = (1 + β²)·P·R / (R + β²·P)`.
pub fn rouge_l(caption: &Caption, refs: &[Caption]) -> f64 {
    let mut best_p: f64 = 0.0;
    let mut best_r: f64 = 0.0;
    for r in refs {
        let lcs = lcs_len(caption.tokens(), r.tokens()) as f64;
        best_p = best_p.max(lcs / caption.len() as f64);
        best_r = best_r.max(lcs / r.len() as f64);
    }
    if best_p == 0.0 || best_r == 0.0 {
        return 0.0;
    }
    let b2 = ROUGE_BETA * ROUGE_BETA;
    (1.0 + b2) * best_p * best_r / (best_r + b2 * best_p)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FineGranularity {
    /// Number of distinct token sequences.
    pub unicap: usize,
    /// Mean token count.
    pub avglen: f64,
}

pub fn fine_granularity(captions: &[Caption]) -> Result<FineGranularity> {
    if captions.is_empty() {
        return Err(Error::InvalidConfig("fine granularity of an empty caption list".into()));
    }
    let unique: HashSet<&[String]> = captions.iter().map(Caption::tokens).collect();
    let total: usize = captions.iter().map(Caption::len).sum();
    Ok(FineGranularity {
        unicap: unique.len(),
        avglen: total as f64 / captions.len() as f64,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    pub id: String,
    pub caption: String,
    pub cider: f64,
    pub bleu: [f64; 4],
    pub rouge_l: f64,
}

/// Corpus-level scores: mean CIDEr and ROUGE-L over images, corpus-level
/// BLEU from pooled counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub cider: f64,
    pub bleu: [f64; 4],
    pub rouge_l: f64,
    pub per_image: Vec<ImageScore>,
}

impl MetricReport {
    /// One row per image plus a final `summary` row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,cider,bleu1,bleu2,bleu3,bleu4,rouge_l\n");
        let mut row = |id: &str, cider: f64, bleu: &[f64; 4], rouge: f64| {
            writeln!(
                out,
                "{id},{cider:.6},{:.6},{:.6},{:.6},{:.6},{rouge:.6}",
                bleu[0], bleu[1], bleu[2], bleu[3]
            )
            .unwrap();
        };
        for s in &self.per_image {
            row(&s.id, s.cider, &s.bleu, s.rouge_l);
        }
        row("summary", self.cider, &self.bleu, self.rouge_l);
        out
    }
}

/// Scores `(image id, candidate)` pairs against the corpus references.
pub fn score_captions(
    candidates: &[(String, Caption)],
    corpus: &Corpus,
    table: &NGramWeightTable,
    cfg: &CiderConfig,
) -> Result<MetricReport> {
    if candidates.is_empty() {
        return Err(Error::InvalidConfig("no candidates to score".into()));
    }
    let mut per_image = Vec::with_capacity(candidates.len());
    let mut pooled = BleuStats::default();
    for (id, caption) in candidates {
        let image = corpus.image(id).ok_or_else(|| Error::UnknownImage(id.clone()))?;
        let refs = &image.references;
        let stats = BleuStats::compute(caption, refs);
        pooled.add(&stats);
        per_image.push(ImageScore {
            id: id.clone(),
            caption: caption.text(),
            cider: cider_with(caption, refs, table, cfg),
            bleu: stats.scores(),
            rouge_l: rouge_l(caption, refs),
        });
    }
    let n = per_image.len() as f64;
    Ok(MetricReport {
        cider: per_image.iter().map(|s| s.cider).sum::<f64>() / n,
        bleu: pooled.scores(),
        rouge_l: per_image.iter().map(|s| s.rouge_l).sum::<f64>() / n,
        per_image,
    })
}
