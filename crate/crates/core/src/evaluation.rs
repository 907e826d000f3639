//! Self-retrieval, held-out scoring and objective comparisons.
//!
//! Self-retrieval uses each generated caption as a query and ranks its own
//! image among all pool images by `log p(c | I)`. Ties rank the true image
//! last.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Caption, Split};
use crate::error::{Error, Result};
use crate::metrics::{fine_granularity, score_captions, CiderConfig, MetricReport};
use crate::policy::{beam_decode, sequence_log_prob, SequencePolicy};
use crate::report::{svg_line_chart, Series};
use crate::toy_world::{ToyWorld, ToyWorldConfig};
use crate::train::{train, EpochLog, Objective, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub recall_at: BTreeMap<usize, f64>,
    /// 1-based rank of the true image for each query.
    pub ranks: Vec<usize>,
}

impl RetrievalResult {
    pub fn from_ranks(ranks: Vec<usize>, ks: &[usize]) -> Self {
        let n = ranks.len() as f64;
        let recall_at = ks
            .iter()
            .map(|&k| (k, ranks.iter().filter(|&&r| r <= k).count() as f64 / n))
            .collect();
        Self { recall_at, ranks }
    }

    pub fn recall(&self, k: usize) -> Option<f64> {
        self.recall_at.get(&k).copied()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("k,recall\n");
        for (k, r) in &self.recall_at {
            writeln!(out, "{k},{r:.6}").unwrap();
        }
        out
    }
}

/// Rank of the diagonal entry in each row of `scores[i][j] = log p(c_i | I_j)`,
/// counting every `j` whose score is at least the true one.
pub fn pessimistic_ranks(scores: &[Vec<f64>]) -> Vec<usize> {
    scores
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let own = row[i];
            row.iter().filter(|&&s| s >= own || s.is_nan()).count()
        })
        .collect()
}

/// `log p(c_i | I_j)` for every query `i` and image `j`.
pub fn log_prob_matrix<P: SequencePolicy + ?Sized>(
    policy: &P,
    contexts: &[&[f64]],
    captions: &[Caption],
) -> Result<Vec<Vec<f64>>> {
    let encoded: Vec<Vec<usize>> = captions
        .iter()
        .map(|c| policy.vocab().encode(c))
        .collect::<Result<_>>()?;
    Ok(encoded
        .par_iter()
        .map(|tokens| contexts.iter().map(|ctx| sequence_log_prob(policy, ctx, tokens)).collect())
        .collect())
}

/// Recall@K of each image's caption against the pool of `contexts`.
pub fn self_retrieval<P: SequencePolicy + ?Sized>(
    policy: &P,
    contexts: &[&[f64]],
    captions: &[Caption],
    ks: &[usize],
) -> Result<RetrievalResult> {
    if contexts.len() != captions.len() {
        return Err(Error::InvalidConfig(format!(
            "{} images but {} captions",
            contexts.len(),
            captions.len()
        )));
    }
    if contexts.is_empty() {
        return Err(Error::InsufficientImages(0));
    }
    let scores = log_prob_matrix(policy, contexts, captions)?;
    Ok(RetrievalResult::from_ranks(pessimistic_ranks(&scores), ks))
}

/// Test-split metrics for one trained policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub cider: f64,
    pub bleu4: f64,
    pub rouge_l: f64,
    pub unicap: usize,
    pub avglen: f64,
    pub retrieval: RetrievalResult,
    #[serde(skip)]
    pub report: Option<MetricReport>,
    pub captions: Vec<(String, String)>,
}

impl EvalSummary {
    pub fn granularity_csv(&self) -> String {
        format!("unicap,avglen\n{},{:.6}\n", self.unicap, self.avglen)
    }
}

/// Beam-decodes the test pool, scores it against the pool's own references
/// and runs self-retrieval over the pool.
pub fn evaluate_policy<P: SequencePolicy + ?Sized>(
    world: &ToyWorld,
    policy: &P,
    beam_size: usize,
    ks: &[usize],
) -> Result<EvalSummary> {
    let pool = world.split(Split::Test);
    let captions: Vec<Caption> = pool
        .par_iter()
        .map(|im| beam_decode(policy, &im.vector, beam_size).caption(policy.vocab()))
        .collect();
    let corpus = world
        .corpus()
        .subset(Split::Test)
        .ok_or(Error::InsufficientImages(0))?;
    let table = crate::ngram_stats::build_weight_table(&corpus);
    let candidates: Vec<(String, Caption)> = pool.iter().map(|im| im.id.clone()).zip(captions.iter().cloned()).collect();
    let report = score_captions(&candidates, &corpus, &table, &CiderConfig::default())?;
    let gran = fine_granularity(&captions)?;
    let contexts: Vec<&[f64]> = pool.iter().map(|im| im.vector.as_slice()).collect();
    let retrieval = self_retrieval(policy, &contexts, &captions, ks)?;
    Ok(EvalSummary {
        cider: report.cider,
        bleu4: report.bleu[3],
        rouge_l: report.rouge_l,
        unicap: gran.unicap,
        avglen: gran.avglen,
        retrieval,
        captions: candidates.iter().map(|(id, c)| (id.clone(), c.text())).collect(),
        report: Some(report),
    })
}

/// One trained and evaluated configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub label: String,
    pub objective: Objective,
    pub seed: u64,
    pub summary: EvalSummary,
    pub logs: Vec<EpochLog>,
}

/// Trains one paired run: the world and the optimizer share `seed`.
pub fn run_one(world_cfg: &ToyWorldConfig, cfg: &TrainConfig, label: &str, ks: &[usize]) -> Result<RunResult> {
    let wrap = |e: Error| Error::RunFailed {
        label: label.to_owned(),
        seed: cfg.seed,
        source: Box::new(e),
    };
    let world = ToyWorld::generate(&ToyWorldConfig {
        seed: cfg.seed,
        ..world_cfg.clone()
    })
    .map_err(wrap)?;
    let outcome = train(&world, cfg).map_err(wrap)?;
    let summary = evaluate_policy(&world, &outcome.policy, cfg.beam_size, ks).map_err(wrap)?;
    Ok(RunResult {
        label: label.to_owned(),
        objective: cfg.objective,
        seed: cfg.seed,
        summary,
        logs: outcome.logs,
    })
}

/// One row of a comparison grid: a label and its training configuration
/// (the seed is replaced per run).
#[derive(Debug, Clone, PartialEq)]
pub struct GridEntry {
    pub label: String,
    pub config: TrainConfig,
}

impl GridEntry {
    pub fn objective(objective: Objective, base: &TrainConfig) -> Self {
        Self {
            label: objective.as_str().to_owned(),
            config: TrainConfig {
                objective,
                ..base.clone()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub ks: Vec<usize>,
    pub seeds: Vec<u64>,
    /// Grid order, then seed order.
    pub runs: Vec<RunResult>,
    pub labels: Vec<String>,
}

/// Mean and sample standard deviation.
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl Comparison {
    pub fn runs_for(&self, label: &str) -> Vec<&RunResult> {
        self.runs.iter().filter(|r| r.label == label).collect()
    }

    fn metric_names(&self) -> Vec<String> {
        let mut names: Vec<String> = ["cider", "bleu4", "unicap", "avglen"].iter().map(|s| s.to_string()).collect();
        names.extend(self.ks.iter().map(|k| format!("r@{k}")));
        names
    }

    fn metrics(&self, run: &RunResult) -> Vec<f64> {
        let s = &run.summary;
        let mut v = vec![s.cider, s.bleu4, s.unicap as f64, s.avglen];
        v.extend(self.ks.iter().map(|k| s.retrieval.recall(*k).unwrap_or(f64::NAN)));
        v
    }

    /// One row per run.
    pub fn runs_csv(&self) -> String {
        let mut out = format!("label,objective,seed,{}\n", self.metric_names().join(","));
        for r in &self.runs {
            let vals: Vec<String> = self.metrics(r).iter().map(|v| format!("{v:.6}")).collect();
            writeln!(out, "{},{},{},{}", r.label, r.objective, r.seed, vals.join(",")).unwrap();
        }
        out
    }

    /// Mean and standard deviation per label over seeds.
    pub fn summary_csv(&self) -> String {
        let names = self.metric_names();
        let header: Vec<String> = names
            .iter()
            .flat_map(|n| [format!("{n}_mean"), format!("{n}_sd")])
            .collect();
        let mut out = format!("label,runs,{}\n", header.join(","));
        for label in &self.labels {
            let runs = self.runs_for(label);
            let rows: Vec<Vec<f64>> = runs.iter().map(|r| self.metrics(r)).collect();
            let mut cells = Vec::new();
            for m in 0..names.len() {
                let col: Vec<f64> = rows.iter().map(|r| r[m]).collect();
                let (mean, sd) = mean_sd(&col);
                cells.push(format!("{mean:.6}"));
                cells.push(format!("{sd:.6}"));
            }
            writeln!(out, "{label},{},{}", runs.len(), cells.join(",")).unwrap();
        }
        out
    }

    /// Held-out CIDEr per epoch, averaged over seeds, one line per label.
    pub fn curves_svg(&self) -> String {
        let series: Vec<Series> = self
            .labels
            .iter()
            .map(|label| {
                let runs = self.runs_for(label);
                let epochs = runs.iter().map(|r| r.logs.len()).min().unwrap_or(0);
                let points = (0..epochs)
                    .map(|e| {
                        let vals: Vec<f64> = runs.iter().map(|r| r.logs[e].heldout_cider).collect();
                        ((e + 1) as f64, mean_sd(&vals).0)
                    })
                    .collect();
                Series {
                    label: label.clone(),
                    points,
                }
            })
            .collect();
        svg_line_chart(
            "Held-out CIDEr-D by epoch",
            "epoch",
            "CIDEr-D",
            &series,
            Some(FULL_SCALE_FOOTNOTE),
        )
    }

    /// Seeds where `a` beats `b` on `metric` (strictly).
    pub fn wins(&self, a: &str, b: &str, metric: impl Fn(&EvalSummary) -> f64) -> usize {
        self.seeds
            .iter()
            .filter(|&&seed| {
                let find = |l: &str| self.runs.iter().find(|r| r.label == l && r.seed == seed);
                match (find(a), find(b)) {
                    (Some(x), Some(y)) => metric(&x.summary) > metric(&y.summary),
                    _ => false,
                }
            })
            .count()
    }
}

/// Published full-scale reference numbers, shown for orientation only.
pub const FULL_SCALE_FOOTNOTE: &str = "Full-scale reference (TDA+GLD, MS-COCO): CIDEr 121.1, R@1 76.24. Not computed here.";

/// Trains and evaluates every grid entry for every seed.
pub fn compare_objectives(
    world_cfg: &ToyWorldConfig,
    grid: &[GridEntry],
    seeds: &[u64],
    ks: &[usize],
) -> Result<Comparison> {
    if grid.len() < 2 {
        return Err(Error::InvalidConfig("comparison needs at least 2 configurations".into()));
    }
    if seeds.len() < 3 {
        return Err(Error::InvalidConfig("comparison needs at least 3 seeds".into()));
    }
    let jobs: Vec<(&GridEntry, u64)> = grid
        .iter()
        .flat_map(|g| seeds.iter().map(move |&s| (g, s)))
        .collect();
    let runs = jobs
        .par_iter()
        .map(|(g, seed)| {
            let cfg = TrainConfig {
                seed: *seed,
                ..g.config.clone()
            };
            run_one(world_cfg, &cfg, &g.label, ks)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Comparison {
        ks: ks.to_vec(),
        seeds: seeds.to_vec(),
        runs,
        labels: grid.iter().map(|g| g.label.clone()).collect(),
    })
}

/// The LD objective once per `λ`.
pub fn lambda_sweep(
    world_cfg: &ToyWorldConfig,
    base: &TrainConfig,
    lambdas: &[f64],
    seeds: &[u64],
    ks: &[usize],
) -> Result<Comparison> {
    let grid: Vec<GridEntry> = lambdas
        .iter()
        .map(|&lambda| {
            let mut config = TrainConfig {
                objective: Objective::Ld,
                ..base.clone()
            };
            config.ld.lambda = lambda;
            GridEntry {
                label: format!("ld_lambda_{lambda}"),
                config,
            }
        })
        .collect();
    compare_objectives(world_cfg, &grid, seeds, ks)
}

pub fn parse_ks(text: &str) -> Result<Vec<usize>> {
    let ks: Vec<usize> = text
        .split(',')
        .map(|k| {
            k.trim()
                .parse::<usize>()
                .ok()
                .filter(|&k| k > 0)
                .ok_or_else(|| Error::InvalidConfig(format!("bad K `{k}`")))
        })
        .collect::<Result<_>>()?;
    if ks.is_empty() {
        return Err(Error::InvalidConfig("no K values".into()));
    }
    Ok(ks)
}
