//! Word-level rewards.
//!
//! Every word of a sampled caption receives
//!
//! ```text
//! R(w_t) = R_C(c) + increment_t + R_GD(I, c)
//! ```
//!
//! where `R_C` is the caption's CIDEr-D score, `increment_t` is the local
//! TF-IDF bonus for fine-grained words (or the prefix-score difference in the
//! difference-based variant), and `R_GD = R_H + R_B` combines a ranking
//! penalty against the nearest image in the whole training set with one
//! against the hardest negatives of the current minibatch.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::Caption;
use crate::embedding::{mine_hard_negatives, EmbeddingStore, HardNegatives, NearestNeighborTable};
use crate::error::{Error, Result};
use crate::metrics::{cider_from_weights, CiderConfig};
use crate::ngram_stats::{caption_weights, flags_from_weights, qualifying_phrases, CaptionWeights, LdConfig, NGramWeightTable};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GdConfig {
    /// Ranking margin ε.
    pub epsilon: f64,
    /// Include `R_H`, the penalty against the nearest training image.
    pub use_hardest_global: bool,
    /// Include `R_B`, the penalty against in-batch hard negatives.
    pub use_minibatch: bool,
}

impl Default for GdConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.2,
            use_hardest_global: true,
            use_minibatch: true,
        }
    }
}

impl GdConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.epsilon.is_finite() || self.epsilon < 0.0 {
            return Err(Error::InvalidConfig(format!("epsilon must be finite and >= 0, got {}", self.epsilon)));
        }
        Ok(())
    }
}

/// `[x]_+`
pub fn ramp(x: f64) -> f64 {
    x.max(0.0)
}

/// `R_H = -[ε + s(I_g, c) - s(I, c)]_+`
pub fn reward_h(
    image: &str,
    caption: &Caption,
    store: &EmbeddingStore,
    nn: &NearestNeighborTable,
    cfg: &GdConfig,
) -> Result<f64> {
    let nearest = nn.nearest(image)?;
    let embedded = store.embed(caption);
    let pos = store.similarity_embedded(image, &embedded)?;
    let neg = store.similarity_embedded(nearest, &embedded)?;
    Ok(-ramp(cfg.epsilon + neg - pos))
}

/// `R_B = -[ε + s(I, c') - s(I, c)]_+ - [ε + s(I', c) - s(I, c)]_+`
pub fn reward_b(
    image: &str,
    caption: &Caption,
    negatives: &HardNegatives,
    store: &EmbeddingStore,
    cfg: &GdConfig,
) -> Result<f64> {
    let pos = store.similarity(image, caption)?;
    let neg_caption = store.similarity(image, &negatives.caption)?;
    let neg_image = store.similarity(&negatives.image_id, caption)?;
    Ok(-ramp(cfg.epsilon + neg_caption - pos) - ramp(cfg.epsilon + neg_image - pos))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct GdRewards {
    pub r_h: f64,
    pub r_b: f64,
}

impl GdRewards {
    pub fn total(&self) -> f64 {
        self.r_h + self.r_b
    }
}

/// `R_GD = R_H + R_B`, each term zero when disabled.
///
/// `nn` is required when `use_hardest_global` is set and `negatives` when
/// `use_minibatch` is set.
pub fn reward_gd(
    image: &str,
    caption: &Caption,
    store: &EmbeddingStore,
    nn: Option<&NearestNeighborTable>,
    negatives: Option<&HardNegatives>,
    cfg: &GdConfig,
) -> Result<GdRewards> {
    let r_h = if cfg.use_hardest_global {
        let nn = nn.ok_or_else(|| Error::MissingNeighbor(image.to_owned()))?;
        reward_h(image, caption, store, nn, cfg)?
    } else {
        0.0
    };
    let r_b = if cfg.use_minibatch {
        let negatives =
            negatives.ok_or_else(|| Error::InvalidConfig("minibatch reward requested without negatives".into()))?;
        reward_b(image, caption, negatives, store, cfg)?
    } else {
        0.0
    };
    Ok(GdRewards { r_h, r_b })
}

pub(crate) fn ld_increments_from_weights(
    tokens: &[String],
    cand: &CaptionWeights,
    refs: &[CaptionWeights],
    cfg: &LdConfig,
    clip: bool,
) -> Vec<f64> {
    let flags = flags_from_weights(tokens, cand, cfg);
    flags
        .iter()
        .enumerate()
        .map(|(t, &flagged)| {
            if !flagged || refs.is_empty() {
                return 0.0;
            }
            let mut increment = 0.0;
            for ngram in qualifying_phrases(tokens, cand, t, cfg.lambda) {
                let n = ngram.order();
                let gc = cand.order(n).get(&ngram);
                let mut sum = 0.0;
                for reference in refs {
                    let gr = reference.order(n).get(&ngram);
                    let denom = (cand.order(n).sq_norm * reference.order(n).sq_norm).sqrt();
                    if gr != 0.0 && denom != 0.0 {
                        let capped = if clip { gc.min(gr) } else { gc };
                        sum += capped * gr / denom;
                    }
                }
                increment += if cfg.sum_over_references {
                    sum
                } else {
                    sum / refs.len() as f64
                };
            }
            increment
        })
        .collect()
}

/// Per-word local bonus: for each flagged word, the sum over qualifying
/// phrases containing it of the clipped, norm-scaled reference match,
/// averaged over references. Unflagged words get 0.
pub fn ld_increments(caption: &Caption, refs: &[Caption], table: &NGramWeightTable, cfg: &LdConfig) -> Vec<f64> {
    let cand = caption_weights(caption.tokens(), table, cfg.idf_log_base);
    let refs: Vec<_> = refs
        .iter()
        .map(|r| caption_weights(r.tokens(), table, cfg.idf_log_base))
        .collect();
    ld_increments_from_weights(caption.tokens(), &cand, &refs, cfg, true)
}

/// [`ld_increments`] without the min-clipping against reference weights.
pub fn ld_increments_unclipped(
    caption: &Caption,
    refs: &[Caption],
    table: &NGramWeightTable,
    cfg: &LdConfig,
) -> Vec<f64> {
    let cand = caption_weights(caption.tokens(), table, cfg.idf_log_base);
    let refs: Vec<_> = refs
        .iter()
        .map(|r| caption_weights(r.tokens(), table, cfg.idf_log_base))
        .collect();
    ld_increments_from_weights(caption.tokens(), &cand, &refs, cfg, false)
}

/// `R_LD(w_t)`: the local bonus plus the caption score `R_C`.
pub fn reward_ld(
    caption: &Caption,
    refs: &[Caption],
    table: &NGramWeightTable,
    ld: &LdConfig,
    cider: &CiderConfig,
) -> Vec<f64> {
    let r_c = crate::metrics::cider_with(caption, refs, table, cider);
    ld_increments(caption, refs, table, ld)
        .into_iter()
        .map(|inc| inc + r_c)
        .collect()
}

pub(crate) fn ld_diff_from_weights(
    tokens: &[String],
    refs: &[CaptionWeights],
    table: &NGramWeightTable,
    cider: &CiderConfig,
) -> Vec<f64> {
    let mut previous = 0.0;
    (1..=tokens.len())
        .map(|t| {
            let prefix = caption_weights(&tokens[..t], table, cider.idf_log_base);
            let score = cider_from_weights(&prefix, refs, cider);
            let diff = score - previous;
            previous = score;
            diff
        })
        .collect()
}

/// `R_C(c_{1:t}) - R_C(c_{1:t-1})` for every prefix, with the empty prefix
/// scoring 0.
pub fn ld_diff_increments(caption: &Caption, refs: &[Caption], table: &NGramWeightTable, cider: &CiderConfig) -> Vec<f64> {
    let refs: Vec<_> = refs
        .iter()
        .map(|r| caption_weights(r.tokens(), table, cider.idf_log_base))
        .collect();
    ld_diff_from_weights(caption.tokens(), &refs, table, cider)
}

/// `R_LD2(w_t) = R_C(c_{1:t}) - R_C(c_{1:t-1}) + R_C(c)`.
pub fn reward_ld_diff(caption: &Caption, refs: &[Caption], table: &NGramWeightTable, cider: &CiderConfig) -> Vec<f64> {
    let r_c = crate::metrics::cider_with(caption, refs, table, cider);
    ld_diff_increments(caption, refs, table, cider)
        .into_iter()
        .map(|d| d + r_c)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardStep {
    pub word: String,
    pub r_c: f64,
    pub ld_increment: f64,
    pub r_gd: f64,
    pub total: f64,
}

/// Per-word rewards for one caption.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardTrace {
    pub steps: Vec<RewardStep>,
    pub r_c: f64,
    pub r_h: f64,
    pub r_b: f64,
}

impl RewardTrace {
    pub fn r_gd(&self) -> f64 {
        self.r_h + self.r_b
    }

    /// The caption-level part of every word's reward, `R_C + R_GD`.
    pub fn caption_reward(&self) -> f64 {
        self.r_c + self.r_gd()
    }

    pub fn totals(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.total).collect()
    }

    /// `Σ_t R(w_t)`.
    pub fn objective(&self) -> f64 {
        self.steps.iter().map(|s| s.total).sum()
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// CSV `t,word,r_c,ld_increment,r_gd,total`, `t` starting at 1.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,word,r_c,ld_increment,r_gd,total\n");
        for (t, s) in self.steps.iter().enumerate() {
            writeln!(
                out,
                "{},{},{:.9},{:.9},{:.9},{:.9}",
                t + 1,
                s.word,
                s.r_c,
                s.ld_increment,
                s.r_gd,
                s.total
            )
            .unwrap();
        }
        out
    }
}

/// Combines the reward components into a trace.
///
/// # Panics
/// If `increments` does not have one entry per word.
pub fn assemble(caption: &Caption, r_c: f64, increments: &[f64], gd: GdRewards) -> RewardTrace {
    assert_eq!(caption.len(), increments.len(), "one increment per word");
    let r_gd = gd.total();
    let steps = caption
        .tokens()
        .iter()
        .zip(increments)
        .map(|(word, &inc)| RewardStep {
            word: word.clone(),
            r_c,
            ld_increment: inc,
            r_gd,
            total: r_c + inc + r_gd,
        })
        .collect();
    RewardTrace {
        steps,
        r_c,
        r_h: gd.r_h,
        r_b: gd.r_b,
    }
}

/// Which per-word increment is added to the caption score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum WordReward {
    Uniform,
    Ld(LdConfig),
    LdDiff,
}

/// Global-ranking inputs for `R_GD`.
#[derive(Debug, Clone, Copy)]
pub struct GlobalReward<'a> {
    pub cfg: GdConfig,
    pub store: &'a EmbeddingStore,
    pub nn: &'a NearestNeighborTable,
}

/// Reference weights prepared once per image.
#[derive(Debug, Clone)]
pub struct PreparedRefs {
    cider: Vec<CaptionWeights>,
    ld: Option<Vec<CaptionWeights>>,
}

/// A complete reward configuration over a fixed weight table.
#[derive(Debug, Clone, Copy)]
pub struct RewardFunction<'a> {
    pub table: &'a NGramWeightTable,
    pub cider: CiderConfig,
    pub word: WordReward,
    pub global: Option<GlobalReward<'a>>,
}

impl<'a> RewardFunction<'a> {
    pub fn prepare(&self, refs: &[Caption]) -> PreparedRefs {
        let weigh = |base: f64| -> Vec<CaptionWeights> {
            refs.iter()
                .map(|r| caption_weights(r.tokens(), self.table, base))
                .collect()
        };
        let ld = match self.word {
            WordReward::Ld(cfg) if cfg.idf_log_base != self.cider.idf_log_base => Some(weigh(cfg.idf_log_base)),
            _ => None,
        };
        PreparedRefs {
            cider: weigh(self.cider.idf_log_base),
            ld,
        }
    }

    /// Trace for one caption; `negatives` is needed when the minibatch term
    /// is enabled.
    pub fn trace(
        &self,
        image: &str,
        caption: &Caption,
        refs: &PreparedRefs,
        negatives: Option<&HardNegatives>,
    ) -> Result<RewardTrace> {
        let tokens = caption.tokens();
        let cand = caption_weights(tokens, self.table, self.cider.idf_log_base);
        let r_c = cider_from_weights(&cand, &refs.cider, &self.cider);
        let increments = match self.word {
            WordReward::Uniform => vec![0.0; tokens.len()],
            WordReward::Ld(cfg) => match &refs.ld {
                Some(ld_refs) => {
                    let cand_ld = caption_weights(tokens, self.table, cfg.idf_log_base);
                    ld_increments_from_weights(tokens, &cand_ld, ld_refs, &cfg, true)
                }
                None => ld_increments_from_weights(tokens, &cand, &refs.cider, &cfg, true),
            },
            WordReward::LdDiff => ld_diff_from_weights(tokens, &refs.cider, self.table, &self.cider),
        };
        let gd = match &self.global {
            Some(g) => reward_gd(image, caption, g.store, Some(g.nn), negatives, &g.cfg)?,
            None => GdRewards::default(),
        };
        Ok(assemble(caption, r_c, &increments, gd))
    }

    pub fn needs_negatives(&self) -> bool {
        self.global.is_some_and(|g| g.cfg.use_minibatch)
    }

    /// Traces for a whole batch, mining in-batch negatives when needed.
    pub fn batch_traces(&self, batch: &[(String, Caption)], refs: &[&PreparedRefs]) -> Result<Vec<RewardTrace>> {
        let negatives = match (&self.global, self.needs_negatives()) {
            (Some(g), true) => Some(mine_hard_negatives(batch, g.store)?),
            _ => None,
        };
        batch
            .iter()
            .enumerate()
            .map(|(i, (image, caption))| {
                self.trace(image, caption, refs[i], negatives.as_ref().map(|n| &n[i]))
            })
            .collect()
    }
}
