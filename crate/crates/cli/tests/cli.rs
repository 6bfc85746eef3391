use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn mtcb(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mtcb")).args(args).output().expect("spawn mtcb")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn ok(o: Output) -> String {
    assert_eq!(code(&o), 0, "stderr: {}", String::from_utf8_lossy(&o.stderr));
    stdout(&o)
}

const ENCODER: &str = r#"
[encoder]
num_layers = 1
hidden_dim = 16
num_heads = 2
ffn_dim = 32
vocab_size = 120
max_seq_len = 32
init_std = 0.1

[trainer]
alpha = 1e-3
optimizer = "adam"
outer_loops = 2
"#;

fn synthetic(id: &str, kind: &str, n_train: usize, n_test: usize, seed: u64, bs: usize) -> String {
    format!(
        "\n[[tasks]]\ntask_id = \"{id}\"\nhead_kind = \"{kind}\"\nbatch_size = {bs}\n\
         source = {{ synthetic = {{ n_train = {n_train}, n_test = {n_test}, seed = {seed}, vocab_size = 20 }} }}\n"
    )
}

fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p
}

fn three_tasks(dir: &Path) -> PathBuf {
    let body = format!(
        "{ENCODER}{}{}{}",
        synthetic("ner", "ner", 24, 10, 1, 8),
        synthetic("sts", "sts", 16, 12, 2, 8),
        synthetic("nli", "nli", 20, 12, 3, 8)
    );
    write_config(dir, "three.toml", &body)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn synth_writes_paper_sized_sts_files_deterministically() {
    let dir = TempDir::new().unwrap();
    let body = format!("{ENCODER}{}", synthetic("sts_n2c2_2019", "sts", 1641, 410, 7, 40));
    let cfg = write_config(dir.path(), "sts.toml", &body);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(mtcb(&["synth", "--config", s(&cfg), "--out", s(&a)]));
    ok(mtcb(&["synth", "--config", s(&cfg), "--out", s(&b)]));
    for split in ["train", "test"] {
        let name = format!("sts_n2c2_2019.{split}.tsv");
        let x = fs::read(a.join(&name)).unwrap();
        assert_eq!(x, fs::read(b.join(&name)).unwrap());
        let lines = String::from_utf8(x).unwrap().lines().count();
        assert_eq!(lines, if split == "train" { 1641 } else { 410 });
    }
}

#[test]
fn synth_files_feed_back_into_training() {
    let dir = TempDir::new().unwrap();
    let cfg = three_tasks(dir.path());
    let data = dir.path().join("data");
    ok(mtcb(&["synth", "--config", s(&cfg), "--out", s(&data), "--tasks", "ner,nli"]));
    let body = format!(
        "{ENCODER}
[[tasks]]
task_id = \"ner\"
head_kind = \"ner\"
label_names = [\"O\", \"B-PROB\", \"I-PROB\", \"B-TEST\", \"I-TEST\", \"B-TREAT\", \"I-TREAT\"]
batch_size = 8
source = {{ files = {{ train = \"data/ner.train.conll\", test = \"data/ner.test.conll\" }} }}

[[tasks]]
task_id = \"nli\"
head_kind = \"nli\"
label_names = [\"entailment\", \"neutral\", \"contradiction\"]
batch_size = 8
source = {{ files = {{ train = \"data/nli.train.tsv\", test = \"data/nli.test.tsv\" }} }}
"
    );
    let files = write_config(dir.path(), "files.toml", &body);
    let (l1, l2) = (dir.path().join("synth.log"), dir.path().join("files.log"));
    let c1 = dir.path().join("m1.ckpt");
    let c2 = dir.path().join("m2.ckpt");
    ok(mtcb(&["--log", s(&l1), "train", "--config", s(&cfg), "--tasks", "ner,nli", "--out", s(&c1)]));
    ok(mtcb(&["--log", s(&l2), "train", "--config", s(&files), "--out", s(&c2)]));
    assert_eq!(fs::read(l1).unwrap(), fs::read(l2).unwrap());
}

#[test]
fn zero_tasks_and_missing_files_are_config_errors() {
    let dir = TempDir::new().unwrap();
    let empty = write_config(dir.path(), "empty.toml", ENCODER);
    let out = dir.path().join("x");
    assert_eq!(code(&mtcb(&["synth", "--config", s(&empty), "--out", s(&out)])), 2);
    assert!(!out.exists());

    let body = format!(
        "{ENCODER}\n[[tasks]]\ntask_id = \"n\"\nhead_kind = \"ner\"\nlabel_names = [\"O\"]\nbatch_size = 2\n\
         source = {{ files = {{ train = \"missing.conll\", test = \"missing.conll\" }} }}\n"
    );
    let missing = write_config(dir.path(), "missing.toml", &body);
    let ckpt = dir.path().join("m.ckpt");
    assert_eq!(code(&mtcb(&["train", "--config", s(&missing), "--out", s(&ckpt)])), 2);
    assert!(!ckpt.exists());

    assert_eq!(code(&mtcb(&["train", "--config", s(&dir.path().join("nope.toml")), "--out", s(&ckpt)])), 2);
}

#[test]
fn single_task_round_robin_matches_single_task_schedule() {
    let dir = TempDir::new().unwrap();
    let cfg = three_tasks(dir.path());
    let mut logs = Vec::new();
    for sched in ["round_robin", "single_task", "proportional"] {
        let log = dir.path().join(format!("{sched}.log"));
        let ckpt = dir.path().join(format!("{sched}.ckpt"));
        ok(mtcb(&[
            "--log", s(&log), "train", "--config", s(&cfg), "--tasks", "sts", "--schedule", sched, "--out", s(&ckpt),
        ]));
        logs.push(fs::read_to_string(log).unwrap());
    }
    assert!(!logs[0].is_empty());
    assert_eq!(logs[0], logs[1]);
    // proportional with one task draws the same batches but counts
    // iterations per update
    assert_eq!(logs[0].lines().count(), logs[2].lines().count());

    let ckpt = dir.path().join("bad.ckpt");
    let o = mtcb(&["train", "--config", s(&cfg), "--schedule", "single_task", "--out", s(&ckpt)]);
    assert_eq!(code(&o), 2);
}

#[test]
fn seed_repeat_gives_identical_logs_and_checkpoints() {
    let dir = TempDir::new().unwrap();
    let cfg = three_tasks(dir.path());
    let mut seen = Vec::new();
    for (i, seed) in ["5", "5", "6"].iter().enumerate() {
        let log = dir.path().join(format!("{i}.log"));
        let ckpt = dir.path().join(format!("{i}.ckpt"));
        ok(mtcb(&["--log", s(&log), "train", "--config", s(&cfg), "--seed", seed, "--out", s(&ckpt)]));
        seen.push((fs::read(&log).unwrap(), fs::read(&ckpt).unwrap()));
    }
    assert_eq!(seen[0], seen[1]);
    assert_ne!(seen[0].0, seen[2].0);
}

fn oracle_f1(rows: &[Vec<String>]) -> f64 {
    let mut pred: BTreeSet<(String, String, String, String)> = BTreeSet::new();
    let mut gold = BTreeSet::new();
    for r in rows {
        let key = (r[0].clone(), r[2].clone(), r[3].clone(), r[4].clone());
        if r[1] == "pred" {
            pred.insert(key);
        } else {
            gold.insert(key);
        }
    }
    let tp = pred.intersection(&gold).count() as f64;
    if tp == 0.0 {
        return 0.0;
    }
    let (p, r) = (tp / pred.len() as f64, tp / gold.len() as f64);
    2.0 * p * r / (p + r)
}

fn oracle_pearson(rows: &[Vec<String>]) -> f64 {
    let x: Vec<f64> = rows.iter().map(|r| r[1].parse().unwrap()).collect();
    let y: Vec<f64> = rows.iter().map(|r| r[2].parse().unwrap()).collect();
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let cov: f64 = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

fn oracle_accuracy(rows: &[Vec<String>]) -> f64 {
    rows.iter().filter(|r| r[1] == r[2]).count() as f64 / rows.len() as f64
}

#[test]
fn eval_reports_are_stable_and_match_offline_rescoring() {
    let dir = TempDir::new().unwrap();
    let cfg = three_tasks(dir.path());
    let ckpt = dir.path().join("m.ckpt");
    ok(mtcb(&["train", "--config", s(&cfg), "--outer-loops", "4", "--out", s(&ckpt)]));
    assert!(dir.path().join("m.ckpt.vocab").is_file());
    let dump = dir.path().join("preds");
    let a = ok(mtcb(&["eval", "--checkpoint", s(&ckpt), "--dump", s(&dump)]));
    let b = ok(mtcb(&["eval", "--checkpoint", s(&ckpt), "--config", s(&cfg)]));
    assert_eq!(a, b);

    let lines: Vec<&str> = a.lines().collect();
    assert_eq!(lines[0], "task\tmetric\tvalue\tsupport");
    assert_eq!(lines.len(), 4);
    let reported: BTreeMap<&str, f64> = lines[1..]
        .iter()
        .map(|l| {
            let f: Vec<&str> = l.split('\t').collect();
            (f[0], f[2].parse().unwrap())
        })
        .collect();
    for (task, oracle) in [
        ("ner", oracle_f1 as fn(&[Vec<String>]) -> f64),
        ("sts", oracle_pearson),
        ("nli", oracle_accuracy),
    ] {
        let text = fs::read_to_string(dump.join(format!("{task}.pred.tsv"))).unwrap();
        let rows: Vec<Vec<String>> = text.lines().map(|l| l.split('\t').map(String::from).collect()).collect();
        let value = oracle(&rows);
        // the report prints 6 decimals
        assert!((value - reported[task]).abs() <= 5e-7, "{task}: {value} vs {}", reported[task]);
    }

    let sub = ok(mtcb(&["eval", "--checkpoint", s(&ckpt), "--tasks", "sts"]));
    assert_eq!(sub.lines().count(), 2);
}

#[test]
fn corrupt_checkpoints_exit_with_io_code() {
    let dir = TempDir::new().unwrap();
    let bad = dir.path().join("bad.ckpt");
    fs::write(&bad, b"NOPE0000").unwrap();
    fs::write(dir.path().join("bad.ckpt.vocab"), "[PAD]\n").unwrap();
    assert_eq!(code(&mtcb(&["eval", "--checkpoint", s(&bad)])), 5);
    assert_eq!(code(&mtcb(&["eval", "--checkpoint", s(&dir.path().join("none.ckpt"))])), 5);
}

fn bench_field(out: &str, key: &str) -> f64 {
    out.lines()
        .find_map(|l| l.strip_prefix(&format!("{key}\t")))
        .unwrap_or_else(|| panic!("no {key} in {out}"))
        .parse()
        .unwrap()
}

#[test]
fn bench_counts_forwards() {
    let dir = TempDir::new().unwrap();
    let cfg = three_tasks(dir.path());
    let ckpt = dir.path().join("m.ckpt");
    ok(mtcb(&["train", "--config", s(&cfg), "--outer-loops", "1", "--out", s(&ckpt)]));
    let out = ok(mtcb(&["bench", "--checkpoint", s(&ckpt), "--n-inputs", "3", "--seq-len", "16"]));
    assert_eq!(bench_field(&out, "shared_forwards"), 3.0);
    assert_eq!(bench_field(&out, "isolated_forwards"), 9.0);
    assert_eq!(bench_field(&out, "forward_ratio"), 3.0);

    let one = write_config(dir.path(), "one.toml", &format!("{ENCODER}{}", synthetic("sts", "sts", 4, 4, 1, 2)));
    let out = ok(mtcb(&["bench", "--config", s(&one), "--n-inputs", "2", "--seq-len", "8"]));
    assert_eq!(bench_field(&out, "forward_ratio"), 1.0);

    let o = mtcb(&["bench", "--checkpoint", s(&ckpt), "--n-inputs", "0"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn gradcheck_passes_and_reports_injected_faults() {
    let out = ok(mtcb(&["gradcheck"]));
    let rows: Vec<&str> = out.lines().skip(1).collect();
    assert!(rows.len() >= 18);
    assert!(rows.iter().all(|r| r.ends_with("\tpass")), "{out}");
    for name in ["matmul", "gelu", "layer_norm", "ner_loss", "sts_loss", "nli_loss"] {
        assert!(rows.iter().any(|r| r.starts_with(&format!("{name}\t"))), "{name}");
    }

    let o = mtcb(&["gradcheck", "--ops", "gelu,softmax", "--fault", "gelu"]);
    assert_eq!(code(&o), 4);
    let out = stdout(&o);
    assert!(out.lines().any(|l| l.starts_with("gelu\t") && l.ends_with("FAIL")), "{out}");
    assert!(out.lines().any(|l| l.starts_with("softmax\t") && l.ends_with("pass")), "{out}");
    assert!(String::from_utf8_lossy(&o.stderr).contains("gelu"));

    let dir = TempDir::new().unwrap();
    let body = format!("{ENCODER}{}\n[gradcheck]\nops = []\n", synthetic("sts", "sts", 4, 4, 1, 2));
    let cfg = write_config(dir.path(), "g.toml", &body);
    assert_eq!(code(&mtcb(&["gradcheck", "--config", s(&cfg)])), 2);
}
