//! Command-line front end: `gen`, `train`, `eval`, `analyze`, `gradcheck`.
//!
//! Every command is driven by a flat `key=value` run config; flags override
//! the matching keys. The config hash is written into every output file.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::config::{KvConfig, KvMap};
use crate::data::{save_tensor, Dataset, Domain, GenConfig, LabelMap, Scene};
use crate::error::{usage_err, Error, Result};
use crate::eval;
use crate::gradcheck::{finite_diff_check, GradCheckReport};
use crate::losses;
use crate::models::{Discriminator, DiscriminatorConfig, Network, Segmenter, SegmenterConfig, LEAKY_SLOPE};
use crate::nn;
use crate::rng::SplitMix64;
use crate::tensor::{Graph, Tensor, Var};
use crate::train::{self, Method, TrainConfig, TrainOutput};

/// Largest relative error accepted by `gradcheck`.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
pub const GRADCHECK_EPS: f64 = 1e-5;

#[derive(Debug, Parser)]
#[command(name = "advent-lab", version, about = "Entropy-based domain adaptation lab")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a seeded synthetic benchmark.
    Gen {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Select seed block N (shifts every split's seed base).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a segmenter with one of the registered methods.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        method: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Per-class IoU and mIoU; several checkpoints are ensembled.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long = "checkpoint", required = true, num_args = 1..)]
        checkpoints: Vec<PathBuf>,
        /// Comma-separated class ids.
        #[arg(long)]
        subset: Option<String>,
        /// `target` (default) or `source` evaluation split.
        #[arg(long, default_value = "target")]
        split: String,
        /// Report file; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Dump entropy and self-information maps for one scene.
    Analyze {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Scene seed.
        #[arg(long)]
        scene: u64,
        #[arg(long, default_value = "target")]
        domain: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every loss through both networks.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of consecutive seeds starting at `--seed`.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
    },
}

// ---- run configuration ---------------------------------------------------

/// Everything a command needs, serialized as one flat config.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub method: Method,
    pub train: TrainConfig,
    pub gen: GenConfig,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            method: Method::SourceOnly,
            train: TrainConfig::default(),
            gen: GenConfig::default(),
            data: None,
            out: None,
        }
    }
}

impl RunConfig {
    pub fn from_kv(kv: &KvMap) -> Result<Self> {
        let mut rc = RunConfig::default();
        for (k, v) in kv.iter() {
            match k {
                "method" => rc.method = v.parse()?,
                "data" => rc.data = Some(PathBuf::from(v)),
                "out" => rc.out = Some(PathBuf::from(v)),
                _ => {
                    if !rc.train.apply_kv(k, v)? && !rc.gen.apply_kv(k, v)? {
                        return Err(usage_err!("unknown config key '{k}'"));
                    }
                }
            }
        }
        Ok(rc)
    }

    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => RunConfig::from_kv(&KvMap::load(p)?),
            None => Ok(RunConfig::default()),
        }
    }

    /// Keys that determine a training run (paths excluded).
    pub fn train_kv(&self) -> KvMap {
        let mut kv = self.train.to_kv();
        kv.insert("method", self.method);
        kv
    }
}

fn required_path(flag: Option<PathBuf>, fallback: &Option<PathBuf>, name: &str) -> Result<PathBuf> {
    flag.or_else(|| fallback.clone())
        .ok_or_else(|| usage_err!("missing --{name} (or '{name}' key in the config)"))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

// ---- commands ------------------------------------------------------------

/// Shifts every split into seed block `n`.
pub fn seed_block(cfg: &GenConfig, n: u64) -> GenConfig {
    let shift = n * 10_000_000;
    GenConfig {
        source_seed_base: cfg.source_seed_base + shift,
        target_seed_base: cfg.target_seed_base + shift,
        eval_seed_base: cfg.eval_seed_base + shift,
        ..cfg.clone()
    }
}

pub fn cmd_gen(cfg: &GenConfig, out: &Path) -> Result<Dataset> {
    let data = Dataset::generate(cfg)?;
    data.save(out)?;
    Ok(data)
}

pub const RUN_FILE: &str = "run.cfg";
pub const TRACE_FILE: &str = "trace.csv";
pub const SEGMENTER_DIR: &str = "segmenter";
pub const DISCRIMINATOR_DIR: &str = "discriminator";

/// Trains `rc.method` on the dataset at `data_dir` and writes the run
/// directory: `run.cfg`, `trace.csv`, `segmenter/` and, for adversarial
/// methods, `discriminator/`.
pub fn cmd_train(rc: &RunConfig, data_dir: &Path, out: &Path) -> Result<TrainOutput> {
    let data = Dataset::load(data_dir)?;
    let manifest = data.manifest();
    let mut kv = rc.train_kv();
    kv.insert("data_hash", manifest.get("config_hash").unwrap_or(""));
    let hash = kv.hash();

    let result = train::train(rc.method, &rc.train, &data)?;

    create_dir(out)?;
    let mut run_kv = kv.clone();
    run_kv.insert("config_hash", &hash);
    write_file(&out.join(RUN_FILE), &run_kv.to_text())?;
    write_file(&out.join(TRACE_FILE), &result.trace.to_text(&hash))?;
    let mut meta = KvMap::default();
    meta.insert("config_hash", &hash);
    result.segmenter.save(&out.join(SEGMENTER_DIR), &meta)?;
    if let Some(d) = &result.discriminator {
        d.save(&out.join(DISCRIMINATOR_DIR), &meta)?;
    }
    Ok(result)
}

/// Accepts either a run directory or a segmenter checkpoint directory.
pub fn load_segmenter(path: &Path) -> Result<(Segmenter, String)> {
    let dir = if path.join(SEGMENTER_DIR).join(crate::models::MODEL_FILE).exists() {
        path.join(SEGMENTER_DIR)
    } else {
        path.to_path_buf()
    };
    let meta = KvMap::load(&dir.join(crate::models::MODEL_FILE))?;
    let hash = meta.get("config_hash").unwrap_or("none").to_string();
    Ok((Segmenter::load(&dir)?, hash))
}

pub fn parse_subset(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.parse()
                .map_err(|_| usage_err!("invalid class id '{t}' in --subset"))
        })
        .collect()
}

fn eval_split<'a>(data: &'a Dataset, split: &str) -> Result<&'a [Scene]> {
    match split {
        "target" => Ok(&data.target_eval),
        "source" => Ok(&data.source_eval),
        other => Err(usage_err!("unknown split '{other}' (expected target or source)")),
    }
}

/// Evaluation report text for one checkpoint or an ensemble.
pub fn cmd_eval(checkpoints: &[PathBuf], data_dir: &Path, subset: Option<&[usize]>, split: &str) -> Result<String> {
    if checkpoints.is_empty() {
        return Err(usage_err!("eval needs at least one checkpoint"));
    }
    let data = Dataset::load(data_dir)?;
    let scenes = eval_split(&data, split)?;
    let mut kv = KvMap::default();
    let mut models = Vec::new();
    for (i, p) in checkpoints.iter().enumerate() {
        let (m, h) = load_segmenter(p)?;
        kv.insert(format!("checkpoint.{i}"), h);
        models.push(m);
    }
    kv.insert("data_hash", data.manifest().get("config_hash").unwrap_or(""));
    kv.insert("split", split);
    if let Some(s) = subset {
        kv.insert(
            "subset",
            s.iter().map(usize::to_string).collect::<Vec<_>>().join(","),
        );
    }
    let refs: Vec<&Segmenter> = models.iter().collect();
    let report = eval::evaluate(&refs, scenes, subset)?;
    Ok(report.to_text(&kv.hash()))
}

pub const ENTROPY_FILE: &str = "entropy.tnsr";
pub const SELFINFO_FILE: &str = "selfinfo.tnsr";
pub const PREDICTION_FILE: &str = "prediction.tnsr";
pub const SUMMARY_FILE: &str = "summary.txt";

#[derive(Clone, Debug, PartialEq)]
pub struct AnalyzeSummary {
    pub mean_entropy: f64,
    pub max_entropy: f64,
}

pub fn cmd_analyze(checkpoint: &Path, data_dir: &Path, scene: u64, domain: Domain, out: &Path) -> Result<AnalyzeSummary> {
    let data = Dataset::load(data_dir)?;
    let s = data
        .all_scenes()
        .find(|s| s.seed == scene && s.domain == domain)
        .ok_or_else(|| usage_err!("no {domain} scene with seed {scene} in {}", data_dir.display()))?;
    let (f, hash) = load_segmenter(checkpoint)?;
    let p = f.predict(&s.image)?;
    let e = p.entropy_map()?;
    let i = p.self_info_map()?;
    create_dir(out)?;
    save_tensor(&out.join(ENTROPY_FILE), e.values())?;
    save_tensor(&out.join(SELFINFO_FILE), i.values())?;
    save_tensor(&out.join(PREDICTION_FILE), p.probs())?;
    let summary = AnalyzeSummary {
        mean_entropy: e.mean(),
        max_entropy: e.max(),
    };
    let mut kv = KvMap::default();
    kv.insert("config_hash", hash);
    kv.insert("scene", scene);
    kv.insert("domain", domain);
    kv.insert("mean_entropy", summary.mean_entropy);
    kv.insert("max_entropy", summary.max_entropy);
    write_file(&out.join(SUMMARY_FILE), &kv.to_text())?;
    Ok(summary)
}

// ---- gradient suite ------------------------------------------------------

/// One named gradient check.
pub struct GradCase {
    pub name: String,
    pub run: Box<dyn Fn() -> Result<GradCheckReport>>,
}

const CHECK_SIZE: usize = 16;
const CHECK_CLASSES: usize = 3;

fn check_nets(seed: u64) -> Result<(Segmenter, Discriminator)> {
    let f = Segmenter::init(
        SegmenterConfig {
            in_channels: 3,
            hidden: vec![3],
            num_classes: CHECK_CLASSES,
        },
        seed,
    )?;
    let d = Discriminator::init(
        DiscriminatorConfig {
            in_channels: CHECK_CLASSES,
            base_width: 2,
        },
        seed,
    )?;
    Ok((f, d))
}

/// Central differences are only valid away from leaky-ReLU and hinge kinks;
/// check inputs keep every such argument at least this far from zero.
const KINK_MARGIN: f64 = 1e-4;
const MAX_DRAWS: usize = 1000;

/// Smallest |pre-activation| over the leaky layers of a network on `x`.
fn kink_distance(net: &impl Network, x: &Tensor) -> Result<f64> {
    let layers = net.layers();
    let mut h = x.clone();
    let mut margin = f64::INFINITY;
    for layer in &layers[..layers.len() - 1] {
        let z = nn::conv2d(&h, layer)?;
        margin = z.data().iter().fold(margin, |m, v| m.min(v.abs()));
        h = nn::leaky_relu(&z, LEAKY_SLOPE)?;
    }
    Ok(margin)
}

/// Draws uniform [0,1) images until `accept` holds, giving up after `draws`.
fn check_input_within(
    rng: &mut SplitMix64,
    h: usize,
    w: usize,
    draws: usize,
    accept: impl Fn(&Tensor) -> Result<bool>,
) -> Result<Option<Tensor>> {
    for _ in 0..draws {
        let x = Tensor::from_fn(&[3, h, w], |_| rng.next_f64())?;
        if accept(&x)? {
            return Ok(Some(x));
        }
    }
    Ok(None)
}

fn check_input(
    rng: &mut SplitMix64,
    h: usize,
    w: usize,
    accept: impl Fn(&Tensor) -> Result<bool>,
) -> Result<Tensor> {
    check_input_within(rng, h, w, MAX_DRAWS, accept)?.ok_or_else(|| {
        Error::Verification(format!(
            "no {h}x{w} check input clear of activation kinks after {MAX_DRAWS} draws"
        ))
    })
}

fn seg_params(f: &Segmenter) -> Vec<Tensor> {
    f.params().into_iter().cloned().collect()
}

fn pairs(vars: &[Var]) -> Vec<(Var, Var)> {
    vars.chunks(2).map(|c| (c[0], c[1])).collect()
}

/// The checks run by `gradcheck` for one seed.
pub fn gradcheck_suite(seed: u64) -> Result<Vec<GradCase>> {
    let (f, d) = check_nets(seed)?;
    let d2 = Discriminator::init(
        DiscriminatorConfig {
            in_channels: 2 * CHECK_CLASSES,
            base_width: 2,
        },
        seed,
    )?;
    let prior = crate::data::ClassPrior::new(vec![0.6, 0.3, 0.1])?;
    let self_info = |x: &Tensor| -> Result<Tensor> { Ok(f.predict(x)?.self_info_map()?.into_tensor()) };
    let clear_through_d = |x: &Tensor| -> Result<bool> {
        Ok(kink_distance(&f, x)? >= KINK_MARGIN && kink_distance(&d, &self_info(x)?)? >= KINK_MARGIN)
    };

    let mut rng = SplitMix64::derived(seed, 0x47_434B);
    let xs = check_input(&mut rng, CHECK_SIZE, CHECK_SIZE, clear_through_d)?;
    let target_ok = |x: &Tensor| -> Result<bool> {
        let p = f.predict(x)?;
        let plane = (CHECK_SIZE * CHECK_SIZE) as f64;
        let hinge_clear = prior.probs().iter().enumerate().all(|(c, &pc)| {
            let mean = (0..CHECK_SIZE * CHECK_SIZE).map(|j| p.at(c, j)).sum::<f64>() / plane;
            (pc - mean).abs() >= KINK_MARGIN
        });
        Ok(hinge_clear && clear_through_d(x)?)
    };
    // parts of the stacked map see only the target input, so the pair is
    // redrawn together
    let mut pair = None;
    for _ in 0..MAX_DRAWS {
        let xt = check_input(&mut rng, CHECK_SIZE, CHECK_SIZE, target_ok)?;
        let i_t = self_info(&xt)?;
        let small = check_input_within(&mut rng, 8, 8, 32, |x| {
            let mut g = Graph::new();
            let a = g.constant(i_t.clone());
            let b = g.constant(self_info(x)?);
            let stacked = g.pad_concat(&[a, b])?;
            Ok(kink_distance(&f, x)? >= KINK_MARGIN && kink_distance(&d2, g.value(stacked))? >= KINK_MARGIN)
        })?;
        if let Some(x_small) = small {
            pair = Some((xt, x_small));
            break;
        }
    }
    let (xt, x_small) = pair.ok_or_else(|| {
        Error::Verification(format!("no multi-resolution check pair clear of kinks after {MAX_DRAWS} draws"))
    })?;
    let labels = LabelMap::new(
        CHECK_SIZE,
        CHECK_SIZE,
        (0..CHECK_SIZE * CHECK_SIZE)
            .map(|_| rng.below(CHECK_CLASSES as u64) as usize)
            .collect(),
    )?;

    // masks are fixed at the unperturbed parameters
    let p_t = f.predict(&xt)?;
    let er_mask = losses::entropy_range_mask(&p_t.entropy_map()?, 0.3)?;
    let conf: Vec<f64> = (0..CHECK_SIZE * CHECK_SIZE)
        .map(|j| (0..CHECK_CLASSES).map(|c| p_t.at(c, j)).fold(0.0, f64::max))
        .collect();
    let threshold = conf.iter().sum::<f64>() / conf.len() as f64;
    let (pl_mask, pl_labels) = losses::pseudo_label_mask(&p_t, threshold)?;

    let mut cases: Vec<GradCase> = Vec::new();
    let mut add = |name: &str, run: Box<dyn Fn() -> Result<GradCheckReport>>| {
        cases.push(GradCase {
            name: format!("{name}[seed={seed}]"),
            run,
        })
    };

    // every closure owns clones of what it needs
    macro_rules! seg_case {
        ($name:expr, |$g:ident, $p_src:ident, $p_tgt:ident| $body:expr) => {{
            let (f, xs, xt) = (f.clone(), xs.clone(), xt.clone());
            let params = seg_params(&f);
            let body = move |$g: &mut Graph, vars: &[Var]| -> Result<Var> {
                let bound = pairs(vars);
                let a = $g.constant(xs.clone());
                let b = $g.constant(xt.clone());
                let $p_src = f.forward($g, &bound, a)?;
                let $p_tgt = f.forward($g, &bound, b)?;
                $body
            };
            add($name, Box::new(move || finite_diff_check(&body, &params, GRADCHECK_EPS)));
        }};
    }

    {
        let labels = labels.clone();
        seg_case!("seg_cross_entropy", |g, ps, _pt| losses::seg_cross_entropy(g, ps, &labels, None));
    }
    seg_case!("entropy", |g, _ps, pt| {
        let e = losses::entropy_map(g, pt)?;
        losses::entropy_loss(g, e, None)
    });
    {
        let mask = er_mask.clone();
        seg_case!("entropy_range", |g, _ps, pt| {
            let e = losses::entropy_map(g, pt)?;
            losses::entropy_loss(g, e, Some(&mask))
        });
    }
    {
        let prior = prior.clone();
        seg_case!("class_prior", |g, _ps, pt| losses::class_prior_loss(g, pt, &prior, 1.0));
    }
    {
        let (mask, labels) = (pl_mask.clone(), pl_labels.clone());
        seg_case!("pseudo_label", |g, _ps, pt| losses::seg_cross_entropy(g, pt, &labels, Some(&mask)));
    }
    {
        let d = d.clone();
        seg_case!("adversarial_f", |g, _ps, pt| {
            let db = d.bind(g, false);
            let i = losses::self_info_map(g, pt)?;
            let out = d.forward(g, &db, i)?;
            losses::domain_bce(g, out, Domain::Source)
        });
    }
    {
        let x_small = x_small.clone();
        let f2 = f.clone();
        seg_case!("box_entropy", |g, ps, _pt| {
            let to_boxes = |g: &mut Graph, p: Var| -> Result<Var> {
                let s = g.value(p).shape().to_vec();
                let hwc = g.permute(p, &[1, 2, 0])?;
                g.reshape(hwc, &[s[1], s[2], 1, s[0]])
            };
            let fine = to_boxes(g, ps)?;
            // a second, coarser detection map from the same network
            let own = f2.bind(g, false);
            let small = g.constant(x_small.clone());
            let coarse_p = f2.forward(g, &own, small)?;
            let coarse = to_boxes(g, coarse_p)?;
            losses::box_entropy_loss(g, &[fine, coarse])
        });
    }
    {
        let (f, xs, xt) = (f.clone(), xs.clone(), xt.clone());
        let params: Vec<Tensor> = d.params().into_iter().cloned().collect();
        let i_s = f.predict(&xs)?.self_info_map()?.into_tensor();
        let i_t = f.predict(&xt)?.self_info_map()?.into_tensor();
        let d = d.clone();
        add(
            "discriminator",
            Box::new(move || {
                finite_diff_check(
                    |g, vars| {
                        let bound = pairs(vars);
                        let a = g.constant(i_s.clone());
                        let b = g.constant(i_t.clone());
                        let ds = d.forward(g, &bound, a)?;
                        let dt = d.forward(g, &bound, b)?;
                        let ls = losses::domain_bce(g, ds, Domain::Source)?;
                        let lt = losses::domain_bce(g, dt, Domain::Target)?;
                        g.add(ls, lt)
                    },
                    &params,
                    GRADCHECK_EPS,
                )
            }),
        );
    }
    {
        let (f, xt, x_small) = (f.clone(), xt.clone(), x_small.clone());
        let params = seg_params(&f);
        let d2 = d2.clone();
        add(
            "multires_adversarial",
            Box::new(move || {
                finite_diff_check(
                    |g, vars| {
                        let bound = pairs(vars);
                        let db = d2.bind(g, false);
                        let a = g.constant(xt.clone());
                        let b = g.constant(x_small.clone());
                        let pa = f.forward(g, &bound, a)?;
                        let pb = f.forward(g, &bound, b)?;
                        let ia = losses::self_info_map(g, pa)?;
                        let ib = losses::self_info_map(g, pb)?;
                        let stacked = losses::stack_selfinfo_multires(g, &[ia, ib])?;
                        let out = d2.forward(g, &db, stacked)?;
                        losses::domain_bce(g, out, Domain::Source)
                    },
                    &params,
                    GRADCHECK_EPS,
                )
            }),
        );
    }
    Ok(cases)
}

/// Runs `cases`, printing `name max_rel_error` lines; fails with a
/// verification error when any check exceeds `tolerance`.
pub fn run_gradcheck(cases: &[GradCase], tolerance: f64, out: &mut dyn Write) -> Result<f64> {
    let mut worst: f64 = 0.0;
    let mut failed = Vec::new();
    for c in cases {
        let r = (c.run)()?;
        let ok = r.max_rel_error <= tolerance;
        writeln!(
            out,
            "{} max_rel_error={:.3e} coords={} {}",
            c.name,
            r.max_rel_error,
            r.coordinates,
            if ok { "ok" } else { "FAIL" }
        )
        .map_err(|e| Error::io("<stdout>", e))?;
        if !ok {
            failed.push(c.name.clone());
        }
        worst = worst.max(r.max_rel_error);
    }
    if !failed.is_empty() {
        return Err(Error::Verification(format!(
            "gradient check failed for {}",
            failed.join(", ")
        )));
    }
    Ok(worst)
}

// ---- entry point ---------------------------------------------------------

fn dispatch(cli: Cli, stdout: &mut dyn Write) -> Result<()> {
    let io_err = |e| Error::io("<stdout>", e);
    match cli.command {
        Command::Gen { config, out, seed } => {
            let rc = RunConfig::load(config.as_deref())?;
            let out = required_path(out, &rc.out, "out")?;
            let gen = match seed {
                Some(n) => seed_block(&rc.gen, n),
                None => rc.gen,
            };
            let data = cmd_gen(&gen, &out)?;
            writeln!(
                stdout,
                "wrote {} scenes to {} (config_hash={})",
                data.all_scenes().count(),
                out.display(),
                data.manifest().get("config_hash").unwrap_or("")
            )
            .map_err(io_err)
        }
        Command::Train {
            config,
            data,
            out,
            method,
            seed,
        } => {
            let mut rc = RunConfig::load(config.as_deref())?;
            if let Some(m) = method {
                rc.method = m.parse()?;
            }
            if let Some(s) = seed {
                rc.train.seed = s;
            }
            let data = required_path(data, &rc.data, "data")?;
            let out = required_path(out, &rc.out, "out")?;
            let result = cmd_train(&rc, &data, &out)?;
            let last = result.trace.records.last().copied().unwrap_or_default();
            writeln!(
                stdout,
                "trained {} for {} iterations; final loss_seg={}",
                rc.method,
                result.trace.records.len(),
                last.loss_seg
            )
            .map_err(io_err)
        }
        Command::Eval {
            config,
            data,
            checkpoints,
            subset,
            split,
            out,
        } => {
            let rc = RunConfig::load(config.as_deref())?;
            let data = required_path(data, &rc.data, "data")?;
            let subset = subset.as_deref().map(parse_subset).transpose()?;
            let report = cmd_eval(&checkpoints, &data, subset.as_deref(), &split)?;
            match out {
                Some(p) => write_file(&p, &report),
                None => stdout.write_all(report.as_bytes()).map_err(io_err),
            }
        }
        Command::Analyze {
            checkpoint,
            data,
            scene,
            domain,
            out,
        } => {
            let s = cmd_analyze(&checkpoint, &data, scene, domain.parse()?, &out)?;
            writeln!(
                stdout,
                "mean_entropy={} max_entropy={}",
                s.mean_entropy, s.max_entropy
            )
            .map_err(io_err)
        }
        Command::Gradcheck { seed, seeds } => {
            if seeds == 0 {
                return Err(usage_err!("--seeds must be at least 1"));
            }
            let mut cases = Vec::new();
            for s in seed..seed + seeds {
                cases.extend(gradcheck_suite(s)?);
            }
            let worst = run_gradcheck(&cases, GRADCHECK_TOLERANCE, stdout)?;
            writeln!(stdout, "all {} checks passed; worst={worst:.3e}", cases.len()).map_err(io_err)
        }
    }
}

/// Parses `args` and runs the command; returns the process exit code
/// (0 ok, 1 usage, 2 runtime, 3 verification failure).
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = if code == 0 {
                write!(stdout, "{e}")
            } else {
                write!(stderr, "{e}")
            };
            return code;
        }
    };
    match dispatch(cli, stdout) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            e.exit_code()
        }
    }
}
