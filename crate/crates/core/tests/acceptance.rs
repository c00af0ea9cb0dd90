//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs with `harness = false` so the criteria execute in order and share
//! the expensive training runs. Exits non-zero when any criterion fails.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use advent_lab::cli::{cmd_eval, cmd_gen, cmd_train, gradcheck_suite, run_gradcheck, RunConfig};
use advent_lab::data::{load_tensor, save_tensor, Dataset, GenConfig};
use advent_lab::eval::{evaluate, mean_entropy};
use advent_lab::losses::{
    box_entropy_loss, entropy_loss, entropy_map, entropy_range_mask, PredictionMap,
};
use advent_lab::models::{Network, Segmenter};
use advent_lab::nn::{conv2d, softmax_channel, Conv2dParams};
use advent_lab::rng::SplitMix64;
use advent_lab::train::{
    held_out_accuracy, train, train_discriminator_frozen, Method, Objective, TrainConfig,
    TrainOutput, Trainer,
};
use advent_lab::{Graph, Tensor};

const GRAD_TOL: f64 = 1e-4;
const GRAD_SEEDS: u64 = 10;
const GRAD_BUDGET: Duration = Duration::from_secs(120);
const ENTROPY_MAPS: usize = 1000;
const ENTROPY_TOL: f64 = 1e-9;
const DEGENERATE_ITERS: usize = 200;
const CONV_CASES: usize = 50;
const ORACLE_TOL: f64 = 1e-12;
const RANGE_MAPS: usize = 100;
const GAP_ITERS: usize = 2000;
const GAP_MIN: f64 = 0.05;
const GAP_BUDGET: Duration = Duration::from_secs(300);
const ADAPT_SEEDS: [u64; 3] = [0, 1, 2];
const MEAN_GAIN_MIN: f64 = 0.01;
const ENSEMBLE_SLACK: f64 = 0.005;
const FROZEN_D_ITERS: usize = 500;
const FROZEN_D_MIN: f64 = 0.9;
const ALIGNMENT_DROP: f64 = 0.1;
const TNSR_CASES: usize = 100;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn report(n: usize, name: &str, o: &Outcome) -> bool {
    println!(
        "criterion {n} [{name}]: {} ({})",
        if o.pass { "PASS" } else { "FAIL" },
        o.detail
    );
    o.pass
}

// ---- 1 -------------------------------------------------------------------

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut checks = 0;
    for seed in 0..GRAD_SEEDS {
        let cases = match gradcheck_suite(seed) {
            Ok(c) => c,
            Err(e) => return outcome(false, format!("seed {seed}: {e}")),
        };
        checks += cases.len();
        let mut sink = Vec::new();
        match run_gradcheck(&cases, GRAD_TOL, &mut sink) {
            Ok(w) => worst = worst.max(w),
            Err(e) => return outcome(false, format!("seed {seed}: {e}")),
        }
    }
    let elapsed = start.elapsed();
    outcome(
        worst < GRAD_TOL && elapsed < GRAD_BUDGET,
        format!("{checks} checks, worst rel error {worst:.2e}, {:.1}s", elapsed.as_secs_f64()),
    )
}

// ---- 2 -------------------------------------------------------------------

fn distribution(c: usize, h: usize, w: usize, mut col: impl FnMut(usize) -> Vec<f64>) -> PredictionMap {
    let plane = h * w;
    let mut d = vec![0.0; c * plane];
    for j in 0..plane {
        for (k, v) in col(j).into_iter().enumerate() {
            d[k * plane + j] = v;
        }
    }
    PredictionMap::new(Tensor::new(vec![c, h, w], d).unwrap()).unwrap()
}

fn entropy_identities() -> Outcome {
    let mut rng = SplitMix64::new(0xE17);
    let mut worst_sum: f64 = 0.0;
    let mut worst_uniform: f64 = 0.0;
    let mut worst_onehot: f64 = 0.0;
    let mut out_of_range = 0;
    for _ in 0..ENTROPY_MAPS {
        let c = rng.range_inclusive(2, 8) as usize;
        let h = rng.range_inclusive(1, 6) as usize;
        let w = rng.range_inclusive(1, 6) as usize;
        let spread = rng.uniform(0.1, 30.0);
        let z = Tensor::from_fn(&[c, h, w], |_| rng.uniform(-spread, spread)).unwrap();
        let p = PredictionMap::new(softmax_channel(&z).unwrap()).unwrap();
        let e = p.entropy_map().unwrap();
        let i = p.self_info_map().unwrap();
        let plane = h * w;
        for j in 0..plane {
            let ej = e.values().data()[j];
            if !(0.0..=1.0).contains(&ej) {
                out_of_range += 1;
            }
            let s: f64 = (0..c).map(|k| i.values().data()[k * plane + j]).sum();
            worst_sum = worst_sum.max((s - (c as f64).ln() * ej).abs());
        }

        let uniform = distribution(c, h, w, |_| vec![1.0 / c as f64; c]);
        for &v in uniform.entropy_map().unwrap().values().data() {
            worst_uniform = worst_uniform.max((v - 1.0).abs());
        }
        let hot: Vec<usize> = (0..plane).map(|_| rng.below(c as u64) as usize).collect();
        let onehot = distribution(c, h, w, |j| (0..c).map(|k| if k == hot[j] { 1.0 } else { 0.0 }).collect());
        for &v in onehot.entropy_map().unwrap().values().data() {
            worst_onehot = worst_onehot.max(v.abs());
        }
    }
    outcome(
        out_of_range == 0
            && worst_sum <= ENTROPY_TOL
            && worst_uniform <= ENTROPY_TOL
            && worst_onehot <= ENTROPY_TOL,
        format!(
            "{ENTROPY_MAPS} maps, {out_of_range} out of range, sum err {worst_sum:.1e}, uniform err {worst_uniform:.1e}, one-hot err {worst_onehot:.1e}"
        ),
    )
}

// ---- 3 -------------------------------------------------------------------

fn degenerate_reductions(data: &Dataset) -> Outcome {
    let base = TrainConfig {
        max_iters: DEGENERATE_ITERS,
        ..TrainConfig::default()
    };
    let variants = [
        ("minent lambda_ent=0", Objective::MinEnt, TrainConfig { lambda_ent: 0.0, ..base.clone() }),
        ("advent lambda_adv=0", Objective::AdvEnt, TrainConfig { lambda_adv: 0.0, ..base.clone() }),
        ("selftrain threshold=1", Objective::SelfTrain, TrainConfig { pl_threshold: 1.0, ..base.clone() }),
    ];
    let mut reference = Trainer::new(Objective::SourceOnly, &base, data).unwrap();
    let mut others: Vec<_> = variants
        .iter()
        .map(|(name, obj, cfg)| (*name, Trainer::new(*obj, cfg, data).unwrap()))
        .collect();
    for it in 0..DEGENERATE_ITERS {
        let r = reference.step().unwrap();
        let fp = reference.segmenter().fingerprint();
        for (name, t) in others.iter_mut() {
            let o = t.step().unwrap();
            if t.segmenter().fingerprint() != fp || o.loss_seg.to_bits() != r.loss_seg.to_bits() {
                return outcome(false, format!("{name} departs at iteration {it}"));
            }
        }
    }
    outcome(
        true,
        format!("3 variants bit-identical to source-only for {DEGENERATE_ITERS} iterations"),
    )
}

// ---- 4 -------------------------------------------------------------------

fn nested_conv(x: &Tensor, p: &Conv2dParams) -> Vec<f64> {
    let (ci, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (co, k) = (p.out_channels(), p.kernel());
    let ho = (h + 2 * p.padding - k) / p.stride + 1;
    let wo = (w + 2 * p.padding - k) / p.stride + 1;
    let mut out = vec![0.0; co * ho * wo];
    for o in 0..co {
        for y in 0..ho {
            for xx in 0..wo {
                let mut acc = p.bias.data()[o];
                for c in 0..ci {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (y * p.stride + ky) as isize - p.padding as isize;
                            let ix = (xx * p.stride + kx) as isize - p.padding as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            let xi = x.data()[(c * h + iy as usize) * w + ix as usize];
                            let wi = p.weight.data()[((o * ci + c) * k + ky) * k + kx];
                            acc += xi * wi;
                        }
                    }
                }
                out[(o * ho + y) * wo + xx] = acc;
            }
        }
    }
    out
}

fn conv_oracle(rng: &mut SplitMix64) -> Result<f64, String> {
    let mut worst: f64 = 0.0;
    for case in 0..CONV_CASES {
        let stride = rng.range_inclusive(1, 2) as usize;
        let k = if stride == 1 {
            [1, 3, 5][rng.below(3) as usize]
        } else {
            rng.range_inclusive(1, 4) as usize
        };
        let padding = rng.below(k as u64 / 2 + 2) as usize;
        let ci = rng.range_inclusive(1, 4) as usize;
        let co = rng.range_inclusive(1, 4) as usize;
        let h = rng.range_inclusive(k as u64, 9) as usize;
        let w = rng.range_inclusive(k as u64, 9) as usize;
        let x = Tensor::from_fn(&[ci, h, w], |_| rng.uniform(-1.0, 1.0)).unwrap();
        let weight = Tensor::from_fn(&[co, ci, k, k], |_| rng.uniform(-1.0, 1.0)).unwrap();
        let bias = Tensor::from_fn(&[co], |_| rng.uniform(-1.0, 1.0)).unwrap();
        let p = Conv2dParams::new(weight, bias, stride, padding).map_err(|e| format!("case {case}: {e}"))?;
        let got = conv2d(&x, &p).map_err(|e| format!("case {case}: {e}"))?;
        let want = nested_conv(&x, &p);
        if got.numel() != want.len() {
            return Err(format!("case {case}: {} outputs, oracle has {}", got.numel(), want.len()));
        }
        for (a, b) in got.data().iter().zip(&want) {
            worst = worst.max((a - b).abs());
        }
    }
    Ok(worst)
}

fn random_pmap(rng: &mut SplitMix64, c: usize, h: usize, w: usize) -> PredictionMap {
    let z = Tensor::from_fn(&[c, h, w], |_| rng.uniform(-5.0, 5.0)).unwrap();
    PredictionMap::new(softmax_channel(&z).unwrap()).unwrap()
}

fn box_vs_pixel(rng: &mut SplitMix64) -> f64 {
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let c = rng.range_inclusive(2, 6) as usize;
        let h = rng.range_inclusive(1, 8) as usize;
        let w = rng.range_inclusive(1, 8) as usize;
        let p = random_pmap(rng, c, h, w);
        let plane = h * w;
        let mut boxes = vec![0.0; c * plane];
        for j in 0..plane {
            for k in 0..c {
                boxes[j * c + k] = p.at(k, j);
            }
        }
        let mut g = Graph::new();
        let pv = g.constant(p.probs().clone());
        let e = entropy_map(&mut g, pv).unwrap();
        let pixel = entropy_loss(&mut g, e, None).unwrap();
        let bv = g.constant(Tensor::new(vec![h, w, 1, c], boxes).unwrap());
        let boxed = box_entropy_loss(&mut g, &[bv]).unwrap();
        let diff = (g.value(pixel).item().unwrap() - g.value(boxed).item().unwrap()).abs();
        worst = worst.max(diff);
    }
    worst
}

/// Full descending sort with ties to the lower index; the kept count is
/// `ceil(k·N/20)` in integer arithmetic for fraction `k/20`.
fn range_mask_oracle(rng: &mut SplitMix64) -> usize {
    let mut mismatches = 0;
    for i in 0..RANGE_MAPS {
        let c = rng.range_inclusive(2, 6) as usize;
        let h = rng.range_inclusive(1, 12) as usize;
        let w = rng.range_inclusive(1, 12) as usize;
        let k = if i % 4 == 0 { 6 } else { rng.range_inclusive(1, 20) as usize };
        let p = random_pmap(rng, c, h, w);
        let e = p.entropy_map().unwrap();
        let vals = e.values().data().to_vec();
        let n = vals.len();
        let keep = (k * n).div_ceil(20).max(1);
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| vals[b].partial_cmp(&vals[a]).unwrap().then(a.cmp(&b)));
        let mut want = vec![false; n];
        for &j in &order[..keep] {
            want[j] = true;
        }
        let got = entropy_range_mask(&e, k as f64 / 20.0).unwrap();
        if got.selected() != want.as_slice() {
            mismatches += 1;
        }
    }
    mismatches
}

fn oracle_equivalences() -> Outcome {
    let mut rng = SplitMix64::new(0x0C0A);
    let conv = match conv_oracle(&mut rng) {
        Ok(v) => v,
        Err(e) => return outcome(false, e),
    };
    let boxes = box_vs_pixel(&mut rng);
    let mismatches = range_mask_oracle(&mut rng);
    outcome(
        conv < ORACLE_TOL && boxes < ORACLE_TOL && mismatches == 0,
        format!(
            "conv err {conv:.1e} over {CONV_CASES} cases, box err {boxes:.1e}, {mismatches}/{RANGE_MAPS} range masks differ"
        ),
    )
}

// ---- 5 - 7 ---------------------------------------------------------------

struct SeedRuns {
    seed: u64,
    source: TrainOutput,
    minent: TrainOutput,
    advent: TrainOutput,
}

fn run_method(method: Method, seed: u64, data: &Dataset) -> TrainOutput {
    let cfg = TrainConfig {
        seed,
        max_iters: GAP_ITERS,
        ..TrainConfig::default()
    };
    train(method, &method.configure(&cfg), data).unwrap_or_else(|e| panic!("{method} seed {seed}: {e}"))
}

fn domain_gap(data: &Dataset, source: &Segmenter, elapsed: Duration) -> Outcome {
    let t = mean_entropy(source, &data.target_eval).unwrap();
    let s = mean_entropy(source, &data.source_eval).unwrap();
    outcome(
        t - s >= GAP_MIN && elapsed < GAP_BUDGET,
        format!(
            "target entropy {t:.4}, source entropy {s:.4}, gap {:.4}, {:.1}s",
            t - s,
            elapsed.as_secs_f64()
        ),
    )
}

fn target_miou(models: &[&Segmenter], data: &Dataset) -> f64 {
    evaluate(models, &data.target_eval, None).unwrap().miou
}

fn adaptation_gains(data: &Dataset, runs: &[SeedRuns]) -> Outcome {
    let mut rows = Vec::new();
    let (mut gain_m, mut gain_a) = (0.0, 0.0);
    let (mut a_ok, mut b_ok, mut c_ok, mut d_ok) = (true, true, true, true);
    for r in runs {
        let so = target_miou(&[&r.source.segmenter], data);
        let me = target_miou(&[&r.minent.segmenter], data);
        let ad = target_miou(&[&r.advent.segmenter], data);
        let ens = target_miou(&[&r.minent.segmenter, &r.advent.segmenter], data);
        let ent_so = mean_entropy(&r.source.segmenter, &data.target_eval).unwrap();
        let ent_me = mean_entropy(&r.minent.segmenter, &data.target_eval).unwrap();
        a_ok &= me >= so;
        b_ok &= ad >= so;
        c_ok &= ent_me < ent_so;
        d_ok &= ens >= me.max(ad) - ENSEMBLE_SLACK;
        gain_m += (me - so) / runs.len() as f64;
        gain_a += (ad - so) / runs.len() as f64;
        rows.push(format!(
            "seed {}: src-only {so:.4} minent {me:.4} advent {ad:.4} ensemble {ens:.4}, entropy {ent_so:.4} -> {ent_me:.4}",
            r.seed
        ));
    }
    a_ok &= gain_m > MEAN_GAIN_MIN;
    b_ok &= gain_a > MEAN_GAIN_MIN;
    let mark = |b: bool| if b { "ok" } else { "fail" };
    outcome(
        a_ok && b_ok && c_ok && d_ok,
        format!(
            "a {} (mean gain {gain_m:+.4}), b {} (mean gain {gain_a:+.4}), c {}, d {}; {}",
            mark(a_ok),
            mark(b_ok),
            mark(c_ok),
            mark(d_ok),
            rows.join("; ")
        ),
    )
}

fn discriminator_separability(data: &Dataset, runs: &[SeedRuns]) -> Outcome {
    let r = &runs[0];
    let cfg = TrainConfig {
        seed: r.seed,
        ..TrainConfig::default()
    };
    let (d, _) = train_discriminator_frozen(&cfg, data, &r.source.segmenter, FROZEN_D_ITERS).unwrap();
    let ceiling = held_out_accuracy(&r.source.segmenter, &d, data).unwrap();
    let adv_d = r.advent.discriminator.as_ref().expect("advent trains a discriminator");
    let adapted = held_out_accuracy(&r.advent.segmenter, adv_d, data).unwrap();
    outcome(
        ceiling > FROZEN_D_MIN && adapted <= ceiling - ALIGNMENT_DROP,
        format!("frozen-F accuracy {ceiling:.4}, final AdvEnt accuracy {adapted:.4}"),
    )
}

// ---- 8 -------------------------------------------------------------------

fn snapshot(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                files.push((path.strip_prefix(root).unwrap().to_path_buf(), fs::read(&path).unwrap()));
            }
        }
    }
    files.sort();
    files
}

fn determinism_and_format() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let gen = GenConfig {
        height: 16,
        width: 16,
        n_source_train: 8,
        n_target_train: 8,
        n_target_eval: 4,
        n_source_eval: 4,
        ..GenConfig::default()
    };
    let mut failures = Vec::new();
    for name in ["gen_a", "gen_b"] {
        cmd_gen(&gen, &root.join(name)).unwrap();
    }
    if snapshot(&root.join("gen_a")) != snapshot(&root.join("gen_b")) {
        failures.push("gen".to_string());
    }
    let data = root.join("gen_a");
    for method in Method::ALL {
        let rc = RunConfig {
            method,
            train: TrainConfig {
                max_iters: 4,
                seed: 3,
                ..TrainConfig::default()
            },
            gen: gen.clone(),
            ..RunConfig::default()
        };
        let a = root.join(format!("{method}_a"));
        let b = root.join(format!("{method}_b"));
        cmd_train(&rc, &data, &a).unwrap();
        cmd_train(&rc, &data, &b).unwrap();
        if snapshot(&a) != snapshot(&b) {
            failures.push(format!("train {method}"));
        }
        let e1 = cmd_eval(std::slice::from_ref(&a), &data, None, "target").unwrap();
        let e2 = cmd_eval(std::slice::from_ref(&a), &data, None, "target").unwrap();
        if e1 != e2 {
            failures.push(format!("eval {method}"));
        }
    }

    let mut rng = SplitMix64::new(0x7E57);
    let mut tnsr_bad = 0;
    for i in 0..TNSR_CASES {
        let rank = if i % 10 == 0 { 0 } else { rng.range_inclusive(1, 4) as usize };
        let shape: Vec<usize> = (0..rank).map(|_| rng.range_inclusive(1, 5) as usize).collect();
        let t = Tensor::from_fn(&shape, |_| f64::from_bits(rng.next_u64())).unwrap();
        let path = root.join(format!("t{i}.tnsr"));
        save_tensor(&path, &t).unwrap();
        if !load_tensor(&path).map(|b| b.bit_eq(&t)).unwrap_or(false) {
            tnsr_bad += 1;
        }
    }
    outcome(
        failures.is_empty() && tnsr_bad == 0,
        format!(
            "{} commands differ {:?}, {tnsr_bad}/{TNSR_CASES} tensors differ after round trip",
            failures.len(),
            failures
        ),
    )
}

fn main() {
    // `cargo test -- --list` and filters are not meaningful for this target
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let mut all = true;
    all &= report(1, "gradient suite", &gradient_suite());
    all &= report(2, "entropy identities", &entropy_identities());

    let data = Dataset::generate(&GenConfig::default()).unwrap();
    all &= report(3, "degenerate reductions", &degenerate_reductions(&data));
    all &= report(4, "oracle equivalences", &oracle_equivalences());

    let mut runs = Vec::new();
    for &seed in &ADAPT_SEEDS {
        let start = Instant::now();
        let source = run_method(Method::SourceOnly, seed, &data);
        if seed == 0 {
            all &= report(5, "domain gap", &domain_gap(&data, &source.segmenter, start.elapsed()));
        }
        let minent = run_method(Method::MinEnt, seed, &data);
        let advent = run_method(Method::AdvEnt, seed, &data);
        runs.push(SeedRuns {
            seed,
            source,
            minent,
            advent,
        });
    }
    all &= report(6, "adaptation gains", &adaptation_gains(&data, &runs));
    all &= report(7, "discriminator separability", &discriminator_separability(&data, &runs));
    all &= report(8, "determinism and format", &determinism_and_format());

    if !all {
        println!("acceptance: some criteria failed");
        std::process::exit(1);
    }
    println!("acceptance: all criteria passed");
}
