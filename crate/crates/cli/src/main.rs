//! `gld`: command-line front end for the caption reward toolkit.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use gld_core::corpus::{load_dataset, Caption};
use gld_core::embedding::{parse_vectors_csv, precompute_nearest, EmbeddingStore, MeanWordEmbedder};
use gld_core::evaluation::{compare_objectives, evaluate_policy, lambda_sweep, parse_ks, GridEntry};
use gld_core::metrics::{score_captions, CiderConfig, CiderVariant};
use gld_core::ngram_stats::{build_weight_table, LdConfig};
use gld_core::report::{svg_bar_chart, svg_line_chart, write_atomic, RunManifest, Series};
use gld_core::rewards::{GdConfig, GlobalReward, RewardFunction, WordReward};
use gld_core::toy_world::{ToyWorld, ToyWorldConfig};
use gld_core::train::{logs_to_csv, train, Checkpoint, Objective, TrainConfig};

#[derive(Parser)]
#[command(name = "gld", version, about = "Granularity-aware caption rewards and toy training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Variant {
    CiderD,
    Cider,
}

#[derive(Clone, Copy, ValueEnum)]
enum WordMode {
    Uniform,
    Ld,
    LdDiff,
}

#[derive(Subcommand)]
enum Command {
    /// Validate and normalize a dataset JSON file.
    Ingest {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the n-gram document-frequency table.
    Tfidf {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = std::f64::consts::E)]
        log_base: f64,
    },
    /// Score candidate captions (CSV `image_id,caption`) against the references.
    Score {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        candidates: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = Variant::CiderD)]
        variant: Variant,
    },
    /// Per-word reward trace of one caption.
    Reward {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        caption: String,
        #[arg(long)]
        image_id: String,
        #[arg(long, value_enum, default_value_t = WordMode::Ld)]
        objective: WordMode,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        eta: Option<f64>,
        /// Ranking margin; used only with both vector files.
        #[arg(long, default_value_t = 0.2)]
        epsilon: f64,
        #[arg(long, requires = "word_vectors")]
        image_vectors: Option<PathBuf>,
        #[arg(long, requires = "image_vectors")]
        word_vectors: Option<PathBuf>,
        /// Output CSV; printed to stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        svg: Option<PathBuf>,
    },
    /// Nearest neighbor of every image vector.
    Nn {
        #[arg(long)]
        vectors: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a policy on the synthetic world.
    TrainToy {
        #[arg(long, default_value = "gld")]
        objective: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        mle_epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        eta: Option<f64>,
        #[arg(long)]
        epsilon: Option<f64>,
        #[command(flatten)]
        world: WorldArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on its world's test split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "1,5,10")]
        ks: String,
        #[arg(long)]
        beam: Option<usize>,
        /// Training log; defaults to `log.csv` beside the checkpoint.
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate several objectives over paired seeds.
    Compare {
        #[arg(long, default_value = "cider,gd,gld")]
        objectives: String,
        #[arg(long, default_value = "0,1,2,3,4")]
        seeds: String,
        #[arg(long, default_value = "1,5,10")]
        ks: String,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        mle_epochs: Option<usize>,
        /// Sweep the LD threshold instead of comparing objectives.
        #[arg(long)]
        lambdas: Option<String>,
        #[command(flatten)]
        world: WorldArgs,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(clap::Args)]
struct WorldArgs {
    #[arg(long)]
    train_images: Option<usize>,
    #[arg(long)]
    val_images: Option<usize>,
    #[arg(long)]
    test_images: Option<usize>,
}

impl WorldArgs {
    fn config(&self, seed: u64) -> ToyWorldConfig {
        let d = ToyWorldConfig::default();
        ToyWorldConfig {
            seed,
            train_images: self.train_images.unwrap_or(d.train_images),
            val_images: self.val_images.unwrap_or(d.val_images),
            test_images: self.test_images.unwrap_or(d.test_images),
            ..d
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = init_threads() {
        return report_error(&e);
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => report_error(&e),
    }
}

fn report_error(e: &anyhow::Error) -> ExitCode {
    let mut kind = "cli";
    let mut parts = Vec::new();
    // Library errors already render their own source.
    for cause in e.chain() {
        parts.push(cause.to_string());
        if let Some(g) = cause.downcast_ref::<gld_core::Error>() {
            kind = g.kind();
            break;
        }
    }
    let line = json!({ "error": kind, "message": parts.join(": ") });
    eprintln!("{line}");
    ExitCode::FAILURE
}

fn init_threads() -> Result<()> {
    let Ok(raw) = std::env::var("GLD_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .with_context(|| format!("GLD_THREADS must be a positive integer, got `{raw}`"))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Ingest { dataset, out } => {
            let corpus = load_dataset(&dataset)?;
            let mut m = RunManifest::new("ingest", None, json!({}));
            m.add_input(&dataset)?;
            m.write_beside(&out)?;
            write_atomic(&out, corpus.to_json())?;
        }
        Command::Tfidf { dataset, out, log_base } => {
            check_log_base(log_base)?;
            let corpus = load_dataset(&dataset)?;
            let mut m = RunManifest::new("tfidf", None, json!({ "log_base": log_base }));
            m.add_input(&dataset)?;
            m.write_beside(&out)?;
            write_atomic(&out, build_weight_table(&corpus).to_csv(log_base))?;
        }
        Command::Score {
            dataset,
            candidates,
            out,
            variant,
        } => {
            let corpus = load_dataset(&dataset)?;
            let text = read(&candidates)?;
            let pairs = parse_candidates(&text)?;
            let cfg = CiderConfig {
                variant: match variant {
                    Variant::CiderD => CiderVariant::CiderD,
                    Variant::Cider => CiderVariant::Cider,
                },
                ..CiderConfig::default()
            };
            let report = score_captions(&pairs, &corpus, &build_weight_table(&corpus), &cfg)?;
            let mut m = RunManifest::new("score", None, json!({ "variant": variant_name(variant) }));
            m.add_input(&dataset)?;
            m.add_input(&candidates)?;
            m.write_beside(&out)?;
            write_atomic(&out, report.to_csv())?;
        }
        Command::Reward {
            dataset,
            caption,
            image_id,
            objective,
            lambda,
            eta,
            epsilon,
            image_vectors,
            word_vectors,
            out,
            svg,
        } => {
            let corpus = load_dataset(&dataset)?;
            let image = corpus
                .image(&image_id)
                .ok_or_else(|| gld_core::Error::UnknownImage(image_id.clone()))?;
            let caption = Caption::new(&caption)?;
            let mut ld = LdConfig::default();
            ld.lambda = lambda.unwrap_or(ld.lambda);
            ld.eta = eta.unwrap_or(ld.eta);
            let word = match objective {
                WordMode::Uniform => WordReward::Uniform,
                WordMode::Ld => WordReward::Ld(ld),
                WordMode::LdDiff => WordReward::LdDiff,
            };
            let table = build_weight_table(&corpus);
            let global_inputs = match (&image_vectors, &word_vectors) {
                (Some(iv), Some(wv)) => Some(load_store(iv, wv)?),
                _ => None,
            };
            let gd = GdConfig {
                epsilon,
                use_hardest_global: true,
                use_minibatch: false,
            };
            let reward = RewardFunction {
                table: &table,
                cider: CiderConfig::default(),
                word,
                global: global_inputs.as_ref().map(|(store, nn)| GlobalReward { cfg: gd, store, nn }),
            };
            let trace = reward.trace(&image.id, &caption, &reward.prepare(&image.references), None)?;
            let config = json!({
                "caption": caption.text(),
                "image_id": image_id,
                "objective": word_name(objective),
                "lambda": ld.lambda,
                "eta": ld.eta,
                "epsilon": global_inputs.as_ref().map(|_| epsilon),
            });
            let mut m = RunManifest::new("reward", None, config);
            for p in [Some(&dataset), image_vectors.as_ref(), word_vectors.as_ref()].into_iter().flatten() {
                m.add_input(p)?;
            }
            let csv = trace.to_csv();
            if let Some(out) = &out {
                m.write_beside(out)?;
            }
            if let Some(svg) = &svg {
                if out.is_none() {
                    m.write_beside(svg)?;
                }
                let labels: Vec<String> = trace.steps.iter().map(|s| s.word.clone()).collect();
                let title = format!("Per-word reward: {}", caption.text());
                write_atomic(svg, svg_bar_chart(&title, &labels, &trace.totals(), Some(trace.r_c)))?;
            }
            match &out {
                Some(out) => write_atomic(out, csv)?,
                None => print!("{csv}"),
            }
        }
        Command::Nn { vectors, out } => {
            let (dim, rows) = parse_vectors_csv(&read(&vectors)?, &vectors.display().to_string())?;
            let ids: Vec<String> = rows.iter().map(|(id, _)| id.clone()).collect();
            let store = EmbeddingStore::with_images(Box::new(MeanWordEmbedder::new(dim, Vec::new())?), rows)?;
            let nn = precompute_nearest(&store, &ids)?;
            let mut m = RunManifest::new("nn", None, json!({}));
            m.add_input(&vectors)?;
            m.write_beside(&out)?;
            write_atomic(&out, nn.to_csv())?;
        }
        Command::TrainToy {
            objective,
            seed,
            epochs,
            mle_epochs,
            batch_size,
            lambda,
            eta,
            epsilon,
            world,
            out,
        } => {
            let objective: Objective = objective.parse()?;
            let mut cfg = TrainConfig::toy(objective, seed);
            apply_schedule(&mut cfg, epochs, mle_epochs);
            cfg.batch_size = batch_size.unwrap_or(cfg.batch_size);
            cfg.ld.lambda = lambda.unwrap_or(cfg.ld.lambda);
            cfg.ld.eta = eta.unwrap_or(cfg.ld.eta);
            cfg.gd.epsilon = epsilon.unwrap_or(cfg.gd.epsilon);
            cfg.validate()?;
            let world_cfg = world.config(seed);
            let toy = ToyWorld::generate(&world_cfg)?;
            create_dir(&out)?;
            let m = RunManifest::new(
                "train-toy",
                Some(seed),
                json!({ "world": world_cfg, "train": cfg }),
            );
            m.write_to_dir(&out)?;
            let outcome = train(&toy, &cfg)?;
            write_atomic(out.join("log.csv"), logs_to_csv(&outcome.logs))?;
            let ckpt = Checkpoint::new(&world_cfg, &cfg, outcome.policy);
            write_atomic(out.join("checkpoint.txt"), ckpt.to_text())?;
        }
        Command::Eval {
            checkpoint,
            ks,
            beam,
            log,
            out,
        } => {
            let ks = parse_ks(&ks)?;
            let ckpt = Checkpoint::load(&checkpoint)?;
            let log = log.unwrap_or_else(|| checkpoint.with_file_name("log.csv"));
            let curve = parse_log_curve(&read(&log)?).with_context(|| format!("reading {}", log.display()))?;
            let beam = beam.unwrap_or(ckpt.meta.train.beam_size);
            if beam == 0 {
                bail!("--beam must be positive");
            }
            let toy = ToyWorld::generate(&ckpt.meta.world)?;
            create_dir(&out)?;
            let mut m = RunManifest::new(
                "eval",
                Some(ckpt.meta.train.seed),
                json!({ "ks": ks, "beam": beam }),
            );
            m.add_input(&checkpoint)?;
            m.add_input(&log)?;
            m.write_to_dir(&out)?;
            let summary = evaluate_policy(&toy, &ckpt.policy, beam, &ks)?;
            write_atomic(out.join("retrieval.csv"), summary.retrieval.to_csv())?;
            write_atomic(out.join("granularity.csv"), summary.granularity_csv())?;
            if let Some(report) = &summary.report {
                write_atomic(out.join("metrics.csv"), report.to_csv())?;
            }
            let series = [Series {
                label: ckpt.meta.train.objective.as_str().to_owned(),
                points: curve,
            }];
            let svg = svg_line_chart("Held-out CIDEr-D by epoch", "epoch", "CIDEr-D", &series, None);
            write_atomic(out.join("curves.svg"), svg)?;
        }
        Command::Compare {
            objectives,
            seeds,
            ks,
            epochs,
            mle_epochs,
            lambdas,
            world,
            out,
        } => {
            let ks = parse_ks(&ks)?;
            let seeds: Vec<u64> = parse_list(&seeds, "seed")?;
            let objectives: Vec<Objective> = objectives
                .split(',')
                .map(|o| o.trim().parse::<Objective>())
                .collect::<gld_core::Result<_>>()?;
            let world_cfg = world.config(0);
            let mut base = TrainConfig::toy(Objective::Ld, 0);
            apply_schedule(&mut base, epochs, mle_epochs);
            base.validate()?;
            let lambdas: Option<Vec<f64>> = lambdas.map(|l| parse_list(&l, "lambda")).transpose()?;
            create_dir(&out)?;
            let config = json!({
                "objectives": objectives,
                "lambdas": lambdas,
                "seeds": seeds,
                "ks": ks,
                "world": world_cfg,
                "train": base,
            });
            RunManifest::new("compare", None, config).write_to_dir(&out)?;
            let comparison = match &lambdas {
                Some(l) => lambda_sweep(&world_cfg, &base, l, &seeds, &ks)?,
                None => {
                    let grid: Vec<GridEntry> = objectives.iter().map(|&o| GridEntry::objective(o, &base)).collect();
                    compare_objectives(&world_cfg, &grid, &seeds, &ks)?
                }
            };
            write_atomic(out.join("runs.csv"), comparison.runs_csv())?;
            write_atomic(out.join("summary.csv"), comparison.summary_csv())?;
            write_atomic(out.join("curves.svg"), comparison.curves_svg())?;
        }
    }
    Ok(())
}

fn apply_schedule(cfg: &mut TrainConfig, epochs: Option<usize>, mle_epochs: Option<usize>) {
    if let Some(e) = epochs {
        cfg.epochs = e;
        cfg.mle_warmup_epochs = mle_epochs.unwrap_or(cfg.mle_warmup_epochs.min(e));
    } else if let Some(m) = mle_epochs {
        cfg.mle_warmup_epochs = m;
    }
}

fn check_log_base(base: f64) -> Result<()> {
    if !(base.is_finite() && base > 0.0 && base != 1.0) {
        return Err(gld_core::Error::InvalidConfig(format!("log base must be positive and not 1, got {base}")).into());
    }
    Ok(())
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| gld_core::Error::io(path, e).into())
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| gld_core::Error::io(dir, e).into())
}

fn parse_list<T: std::str::FromStr>(text: &str, what: &str) -> Result<Vec<T>> {
    text.split(',')
        .map(|s| {
            s.trim()
                .parse::<T>()
                .map_err(|_| gld_core::Error::InvalidConfig(format!("bad {what} `{s}`")).into())
        })
        .collect()
}

/// Rows of `image_id,caption` after a header line; the caption may contain commas.
fn parse_candidates(text: &str) -> Result<Vec<(String, Caption)>> {
    let mut lines = text.lines();
    match lines.next().map(str::trim) {
        Some("image_id,caption") => {}
        _ => return Err(parse_error("candidates", 1, "expected header `image_id,caption`")),
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (id, caption) = line
            .split_once(',')
            .ok_or_else(|| parse_error("candidates", i + 2, "expected `image_id,caption`"))?;
        out.push((id.trim().to_owned(), Caption::new(caption)?));
    }
    Ok(out)
}

/// `(epoch, heldout_cider)` points from a training log.
fn parse_log_curve(text: &str) -> Result<Vec<(f64, f64)>> {
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap_or_default().split(',').collect();
    let col = |name: &str| header.iter().position(|h| *h == name);
    let (Some(e), Some(c)) = (col("epoch"), col("heldout_cider")) else {
        return Err(parse_error("log", 1, "missing epoch or heldout_cider column"));
    };
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let cells: Vec<&str> = line.split(',').collect();
            let get = |j: usize| cells.get(j).and_then(|s| s.parse::<f64>().ok());
            match (get(e), get(c)) {
                (Some(x), Some(y)) => Ok((x, y)),
                _ => Err(parse_error("log", i + 2, "bad row")),
            }
        })
        .collect()
}

fn parse_error(context: &str, line: usize, message: &str) -> anyhow::Error {
    gld_core::Error::Parse {
        context: context.to_owned(),
        line,
        message: message.to_owned(),
    }
    .into()
}

fn load_store(
    image_vectors: &Path,
    word_vectors: &Path,
) -> Result<(EmbeddingStore, gld_core::embedding::NearestNeighborTable)> {
    let (dim, images) = parse_vectors_csv(&read(image_vectors)?, &image_vectors.display().to_string())?;
    let (word_dim, words) = parse_vectors_csv(&read(word_vectors)?, &word_vectors.display().to_string())?;
    if word_dim != dim {
        return Err(gld_core::Error::DimensionMismatch {
            id: word_vectors.display().to_string(),
            expected: dim,
            got: word_dim,
        }
        .into());
    }
    let ids: Vec<String> = images.iter().map(|(id, _)| id.clone()).collect();
    let store = EmbeddingStore::with_images(Box::new(MeanWordEmbedder::new(dim, words)?), images)?;
    let nn = precompute_nearest(&store, &ids)?;
    Ok((store, nn))
}

fn variant_name(v: Variant) -> &'static str {
    match v {
        Variant::CiderD => "cider-d",
        Variant::Cider => "cider",
    }
}

fn word_name(w: WordMode) -> &'static str {
    match w {
        WordMode::Uniform => "uniform",
        WordMode::Ld => "ld",
        WordMode::LdDiff => "ld-diff",
    }
}
