use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use gld_core::corpus::{load_dataset, parse_dataset};
use gld_core::ngram_stats::build_weight_table;
use tempfile::TempDir;

const DATASET: &str = r#"{"images":[
{"id":"a","split":"train","captions":["a man riding a bike on a snowy slope","a man on a bike"]},
{"id":"b","split":"train","captions":["a man riding a horse","a horse in a field"]},
{"id":"c","split":"train","captions":["a dog on a bike","a dog riding a bike"]},
{"id":"d","split":"test","captions":["a man in a field","a man standing"]}
]}"#;

const SMALL_WORLD: [&str; 6] = ["--train-images", "60", "--val-images", "20", "--test-images", "20"];

fn gld(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gld")).args(args).output().expect("binary runs")
}

fn gld_ok(args: &[&str]) -> Output {
    let out = gld(args);
    assert!(
        out.status.success(),
        "gld {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn setup() -> (TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data.json");
    fs::write(&data, DATASET).unwrap();
    (dir, data)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn rows(csv: &str) -> Vec<Vec<String>> {
    csv.lines().skip(1).map(|l| l.split(',').map(str::to_owned).collect()).collect()
}

fn error_line(out: &Output) -> serde_json::Value {
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr.lines().last().expect("an error line");
    serde_json::from_str(line).expect("error line is JSON")
}

#[test]
fn tfidf_delegates_to_the_library() {
    let (dir, data) = setup();
    let out = dir.path().join("tfidf.csv");
    gld_ok(&["tfidf", "--dataset", s(&data), "--out", s(&out)]);
    let expected = build_weight_table(&load_dataset(&data).unwrap()).to_csv(std::f64::consts::E);
    assert_eq!(fs::read_to_string(&out).unwrap(), expected);
    assert!(dir.path().join("tfidf.csv.manifest.json").exists());

    gld_ok(&["tfidf", "--dataset", s(&data), "--out", s(&out), "--log-base", "2"]);
    let base2 = fs::read_to_string(&out).unwrap();
    let bike = base2.lines().find(|l| l.starts_with("1,bike,")).unwrap();
    assert_eq!(bike, "1,bike,2,1.000000000000");
}

#[test]
fn ingest_round_trips() {
    let (dir, data) = setup();
    let out = dir.path().join("norm.json");
    gld_ok(&["ingest", "--dataset", s(&data), "--out", s(&out)]);
    let again = parse_dataset(&fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(again, load_dataset(&data).unwrap());
}

#[test]
fn reward_raises_flagged_rare_words_above_the_caption_score() {
    let (dir, data) = setup();
    let out = dir.path().join("trace.csv");
    let svg = dir.path().join("trace.svg");
    let caption = "a man riding a bike on a snowy slope";
    gld_ok(&[
        "reward", "--dataset", s(&data), "--image-id", "a", "--caption", caption, "--lambda", "0.1", "--eta", "0.1",
        "--out", s(&out), "--svg", s(&svg),
    ]);
    let csv = fs::read_to_string(&out).unwrap();
    assert!(csv.starts_with("t,word,r_c,ld_increment,r_gd,total\n"));
    let rows = rows(&csv);
    assert_eq!(rows.len(), 9);
    for row in &rows {
        let r_c: f64 = row[2].parse().unwrap();
        let total: f64 = row[5].parse().unwrap();
        if row[1] == "snowy" || row[1] == "slope" {
            assert!(total > r_c, "{row:?}");
        } else {
            assert_eq!(total, r_c, "{row:?}");
        }
    }
    assert!(fs::read_to_string(&svg).unwrap().starts_with("<svg"));
}

#[test]
fn reward_without_out_prints_the_trace() {
    let (_dir, data) = setup();
    let out = gld_ok(&["reward", "--dataset", s(&data), "--image-id", "b", "--caption", "a horse", "--objective", "uniform"]);
    let stdout = String::from_utf8(out.stdout).unwrap();
    let rows = rows(&stdout);
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0][2], rows[0][5]);
}

#[test]
fn reward_with_vectors_adds_the_ranking_term() {
    let (dir, data) = setup();
    let images = dir.path().join("images.csv");
    let words = dir.path().join("words.csv");
    fs::write(&images, "id,dim=2\na,1,0\nb,0.95,0.05\nc,0,1\nd,-1,0\n").unwrap();
    fs::write(&words, "id,dim=2\na,0,1\nhorse,0,1\nman,0,1\n").unwrap();
    let out = gld_ok(&[
        "reward", "--dataset", s(&data), "--image-id", "a", "--caption", "a man", "--objective", "uniform",
        "--image-vectors", s(&images), "--word-vectors", s(&words),
    ]);
    let rows = rows(&String::from_utf8(out.stdout).unwrap());
    for row in &rows {
        let v: Vec<f64> = row[2..].iter().map(|x| x.parse().unwrap()).collect();
        assert!(v[2] < 0.0, "caption drifts toward a neighbor: {row:?}");
        assert!((v[0] + v[1] + v[2] - v[3]).abs() < 1e-8);
    }
}

#[test]
fn score_reports_every_candidate() {
    let (dir, data) = setup();
    let cands = dir.path().join("cands.csv");
    let out = dir.path().join("scores.csv");
    fs::write(&cands, "image_id,caption\na,a man on a bike\nd,a man in a field\n").unwrap();
    for variant in ["cider-d", "cider"] {
        gld_ok(&["score", "--dataset", s(&data), "--candidates", s(&cands), "--out", s(&out), "--variant", variant]);
        let csv = fs::read_to_string(&out).unwrap();
        assert_eq!(csv.lines().count(), 4, "{csv}");
    }
}

#[test]
fn nn_lists_each_vector() {
    let (dir, _) = setup();
    let vectors = dir.path().join("v.csv");
    let out = dir.path().join("nn.csv");
    fs::write(&vectors, "id,dim=2\nx,0,0\ny,1,0\nz,3,0\n").unwrap();
    gld_ok(&["nn", "--vectors", s(&vectors), "--out", s(&out)]);
    let rows = rows(&fs::read_to_string(&out).unwrap());
    let pairs: Vec<(&str, &str)> = rows.iter().map(|r| (r[0].as_str(), r[1].as_str())).collect();
    assert_eq!(pairs, [("x", "y"), ("y", "x"), ("z", "y")]);
}

#[test]
fn reruns_are_byte_identical_and_inputs_untouched() {
    let (dir, data) = setup();
    let before = fs::read(&data).unwrap();
    let run = |tag: &str| -> Vec<Vec<u8>> {
        let d = dir.path().join(tag);
        fs::create_dir_all(&d).unwrap();
        let tfidf = d.join("t.csv");
        let trace = d.join("r.csv");
        gld_ok(&["tfidf", "--dataset", s(&data), "--out", s(&tfidf)]);
        gld_ok(&[
            "reward", "--dataset", s(&data), "--image-id", "c", "--caption", "a dog riding a bike", "--out", s(&trace),
        ]);
        let train = d.join("train");
        let mut args = vec!["train-toy", "--objective", "gld", "--seed", "3", "--epochs", "3", "--mle-epochs", "2"];
        args.extend(SMALL_WORLD);
        args.extend(["--out", s(&train)]);
        gld_ok(&args);
        let eval = d.join("eval");
        gld_ok(&["eval", "--checkpoint", s(&train.join("checkpoint.txt")), "--ks", "1,5", "--out", s(&eval)]);
        let mut files = vec![
            tfidf.clone(),
            trace.clone(),
            train.join("log.csv"),
            train.join("checkpoint.txt"),
            train.join("manifest.json"),
            eval.join("retrieval.csv"),
            eval.join("granularity.csv"),
            eval.join("metrics.csv"),
            eval.join("curves.svg"),
        ];
        files.push(PathBuf::from(format!("{}.manifest.json", tfidf.display())));
        files.iter().map(|f| fs::read(f).unwrap()).collect()
    };
    let first = run("one");
    let second = run("two");
    // Manifests hold input paths, which are shared here.
    assert_eq!(first, second);
    assert_eq!(fs::read(&data).unwrap(), before);
}

#[test]
fn compare_ignores_thread_count() {
    let dir = tempfile::tempdir().unwrap();
    let run = |tag: &str, threads: Option<&str>| -> Vec<String> {
        let out = dir.path().join(tag);
        let mut args = vec![
            "compare", "--objectives", "cider,gld", "--seeds", "0,1,2", "--epochs", "3", "--mle-epochs", "2", "--ks",
            "1,5",
        ];
        args.extend(SMALL_WORLD);
        args.extend(["--out", s(&out)]);
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_gld"));
        cmd.args(&args);
        if let Some(t) = threads {
            cmd.env("GLD_THREADS", t);
        }
        let o = cmd.output().unwrap();
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        ["runs.csv", "summary.csv", "curves.svg", "manifest.json"]
            .iter()
            .map(|f| fs::read_to_string(out.join(f)).unwrap())
            .collect()
    };
    let default = run("default", None);
    let single = run("single", Some("1"));
    assert_eq!(default, single);
    assert_eq!(default[0].lines().count(), 1 + 2 * 3);
}

#[test]
fn lambda_sweep_gives_one_row_per_threshold() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sweep");
    let mut args = vec!["compare", "--lambdas", "0.3,0.6", "--seeds", "0,1,2", "--epochs", "2", "--mle-epochs", "1"];
    args.extend(SMALL_WORLD);
    args.extend(["--out", s(&out)]);
    gld_ok(&args);
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    let labels: Vec<&str> = summary.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(labels, ["ld_lambda_0.3", "ld_lambda_0.6"]);
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(gld(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(gld(&["tfidf", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(gld(&[]).status.code(), Some(2));
    assert_eq!(gld(&["score", "--variant", "bleu"]).status.code(), Some(2));
}

#[test]
fn failures_print_a_machine_readable_line() {
    let (dir, data) = setup();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"images":[{"id":"a","split":"train","captions":["  "]}]}"#).unwrap();
    let out = gld(&["ingest", "--dataset", s(&bad), "--out", s(&dir.path().join("x.json"))]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_line(&out)["error"], "empty_caption");
    assert!(!dir.path().join("x.json").exists());

    let out = gld(&["reward", "--dataset", s(&data), "--image-id", "nope", "--caption", "a man"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_line(&out)["error"], "unknown_image");

    let out = gld(&["tfidf", "--dataset", s(&dir.path().join("missing.json")), "--out", "t.csv"]);
    assert_eq!(error_line(&out)["error"], "io");

    let out = gld(&["train-toy", "--objective", "best", "--out", s(dir.path())]);
    let err = error_line(&out);
    assert_eq!(err["error"], "invalid_config");
    assert!(err["message"].as_str().unwrap().contains("best"));

    let out = Command::new(env!("CARGO_BIN_EXE_gld"))
        .args(["tfidf", "--dataset", s(&data), "--out", s(&dir.path().join("t.csv"))])
        .env("GLD_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_line(&out)["error"], "cli");
}
