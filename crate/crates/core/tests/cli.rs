use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use advent_lab::cli::{ENTROPY_FILE, PREDICTION_FILE, SEGMENTER_DIR, TRACE_FILE};
use advent_lab::config::KvMap;
use advent_lab::data::{load_tensor, Dataset, Domain};
use advent_lab::losses::PredictionMap;
use advent_lab::models::{Network, Segmenter, SegmenterConfig};
use advent_lab::train::{Trace, TRACE_HEADER};

const TINY: &str = "\
gen.height = 16
gen.width = 16
gen.num_classes = 4
gen.n_source_train = 6
gen.n_target_train = 6
gen.n_target_eval = 4
gen.n_source_eval = 4
train.max_iters = 3
";

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_advent-lab"))
}

fn run(args: &[&str]) -> Output {
    let out = bin().args(args).output().expect("binary runs");
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Relative path and bytes of every file under `root`, sorted.
fn snapshot(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_path_buf();
                files.push((rel, fs::read(&path).unwrap()));
            }
        }
    }
    files.sort();
    files
}

struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("tiny.cfg"), TINY).unwrap();
        let f = Fixture { dir };
        run(&["gen", "--config", s(&f.config()), "--out", s(&f.data())]);
        f
    }

    fn config(&self) -> PathBuf {
        self.dir.path().join("tiny.cfg")
    }

    fn data(&self) -> PathBuf {
        self.dir.path().join("data")
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn train(&self, method: &str, out: &str) -> PathBuf {
        let out = self.path(out);
        run(&[
            "train",
            "--config",
            s(&self.config()),
            "--data",
            s(&self.data()),
            "--method",
            method,
            "--out",
            s(&out),
        ]);
        out
    }
}

#[test]
fn gen_is_reproducible_and_seed_blocks_differ() {
    let f = Fixture::new();
    let again = f.path("again");
    run(&["gen", "--config", s(&f.config()), "--out", s(&again)]);
    assert_eq!(snapshot(&f.data()), snapshot(&again));

    let other = f.path("block1");
    run(&["gen", "--config", s(&f.config()), "--out", s(&other), "--seed", "1"]);
    assert_ne!(snapshot(&f.data()), snapshot(&other));
    let data = Dataset::load(&other).unwrap();
    assert_eq!(data.source_train.len(), 6);
    assert_eq!(data.target_eval.len(), 4);
}

#[test]
fn train_and_eval_are_bit_identical_across_runs() {
    let f = Fixture::new();
    let a = f.train("minent", "a");
    let b = f.train("minent", "b");
    assert_eq!(snapshot(&a), snapshot(&b));

    let eval = |ckpt: &Path| {
        run(&["eval", "--data", s(&f.data()), "--checkpoint", s(ckpt)]).stdout
    };
    let first = eval(&a);
    assert_eq!(first, eval(&a));
    assert_eq!(first, eval(&b));
    let text = String::from_utf8(first).unwrap();
    assert!(text.starts_with("# config_hash="));
    assert!(text.lines().last().unwrap().starts_with("miou,"));
}

#[test]
fn trace_columns_match_the_method() {
    let f = Fixture::new();
    let run_dir = f.train("advent", "adv");
    let text = fs::read_to_string(run_dir.join(TRACE_FILE)).unwrap();
    assert!(text.lines().any(|l| l == TRACE_HEADER));
    let trace = Trace::parse(&text).unwrap();
    assert_eq!(trace.records.len(), 3);
    assert!(trace.records.iter().all(|r| r.loss_d > 0.0 && r.loss_adv_f > 0.0));
    assert!(run_dir.join("discriminator").is_dir());

    let src = f.train("source_only", "src");
    let trace = Trace::parse(&fs::read_to_string(src.join(TRACE_FILE)).unwrap()).unwrap();
    assert!(trace.records.iter().all(|r| r.loss_d == 0.0 && r.lr_d == 0.0));
    assert!(!src.join("discriminator").exists());
}

#[test]
fn ensemble_and_subset_evaluation() {
    let f = Fixture::new();
    let a = f.train("minent", "a");
    let b = f.train("advent", "b");
    let out = run(&[
        "eval",
        "--data",
        s(&f.data()),
        "--checkpoint",
        s(&a),
        s(&b),
        "--subset",
        "1,2",
    ]);
    let text = String::from_utf8(out.stdout).unwrap();
    let ids: Vec<&str> = text
        .lines()
        .skip(2)
        .filter_map(|l| l.split(',').next())
        .filter(|k| *k != "miou")
        .collect();
    assert!(ids.iter().all(|k| *k == "1" || *k == "2"), "{text}");

    let bad = bin()
        .args(["eval", "--data", s(&f.data()), "--checkpoint", s(&a), "--subset", "9"])
        .output()
        .unwrap();
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn zero_iteration_training_returns_the_initialization() {
    let f = Fixture::new();
    let cfg = f.path("zero.cfg");
    fs::write(&cfg, format!("{TINY}train.max_iters = 0\ntrain.seed = 5\n")).unwrap();
    let out = f.path("zero");
    run(&["train", "--config", s(&cfg), "--data", s(&f.data()), "--out", s(&out)]);
    let loaded = Segmenter::load(&out.join(SEGMENTER_DIR)).unwrap();
    let init = Segmenter::init(SegmenterConfig::new(4), 5).unwrap();
    assert_eq!(loaded.fingerprint(), init.fingerprint());
    let trace = fs::read_to_string(out.join(TRACE_FILE)).unwrap();
    assert!(Trace::parse(&trace).unwrap().records.is_empty());
}

fn analyze(f: &Fixture, ckpt: &Path, out: &Path) -> String {
    let data = Dataset::load(&f.data()).unwrap();
    let seed = data.target_eval[0].seed.to_string();
    let o = run(&[
        "analyze",
        "--checkpoint",
        s(ckpt),
        "--data",
        s(&f.data()),
        "--scene",
        &seed,
        "--domain",
        "target",
        "--out",
        s(out),
    ]);
    String::from_utf8(o.stdout).unwrap()
}

#[test]
fn analyze_uniform_checkpoint_has_unit_entropy() {
    let f = Fixture::new();
    let ckpt = f.path("zero_ckpt");
    Segmenter::zeros(SegmenterConfig::new(4))
        .unwrap()
        .save(&ckpt, &KvMap::default())
        .unwrap();
    let out = f.path("analysis");
    analyze(&f, &ckpt, &out);
    let e = load_tensor(&out.join(ENTROPY_FILE)).unwrap();
    assert_eq!(e.shape(), &[16, 16]);
    assert!(e.data().iter().all(|v| (v - 1.0).abs() < 1e-12));
}

#[test]
fn analyze_confident_checkpoint_and_dump_consistency() {
    let f = Fixture::new();
    let mut net = Segmenter::zeros(SegmenterConfig::new(4)).unwrap();
    let last = net.layers_mut().last_mut().unwrap();
    last.bias.data_mut()[2] = 40.0;
    let ckpt = f.path("confident");
    net.save(&ckpt, &KvMap::default()).unwrap();
    let out = f.path("analysis");
    let stdout = analyze(&f, &ckpt, &out);
    let mean: f64 = stdout
        .split_whitespace()
        .find_map(|t| t.strip_prefix("mean_entropy="))
        .unwrap()
        .parse()
        .unwrap();
    assert!(mean < 0.05);

    let trained = f.train("source_only", "run");
    let out = f.path("analysis2");
    analyze(&f, &trained, &out);
    let p = PredictionMap::new(load_tensor(&out.join(PREDICTION_FILE)).unwrap()).unwrap();
    let dumped = load_tensor(&out.join(ENTROPY_FILE)).unwrap();
    assert!(dumped.bit_eq(p.entropy_map().unwrap().values()));

    let data = Dataset::load(&f.data()).unwrap();
    let scene = data
        .all_scenes()
        .find(|sc| sc.domain == Domain::Target && sc.seed == data.target_eval[0].seed)
        .unwrap();
    let model = Segmenter::load(&trained.join(SEGMENTER_DIR)).unwrap();
    assert!(model.predict(&scene.image).unwrap().probs().bit_eq(p.probs()));
}
