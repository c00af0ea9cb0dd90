//! Optimizers, the polynomial schedule and the training procedures:
//! source-only, MinEnt (with entropy-range and class-prior variants),
//! self-training and AdvEnt alternating optimization.

use std::fmt;
use std::str::FromStr;

use crate::config::{parse_value, KvConfig, KvMap};
use crate::data::{ClassPrior, Dataset, Domain, Scene};
use crate::error::{usage_err, Error, Result};
use crate::losses::{self, PredictionMap};
use crate::models::{Discriminator, DiscriminatorConfig, Network, Segmenter, SegmenterConfig};
use crate::rng::SplitMix64;
use crate::tensor::{Graph, Tensor, Var};

const SOURCE_STREAM: u64 = 0x5352_4353;
const TARGET_STREAM: u64 = 0x5447_5453;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lambda_ent: f64,
    pub lambda_adv: f64,
    pub lambda_pl: f64,
    pub mu: f64,
    /// Entropy-range selection; `None` uses every target pixel.
    pub top_fraction: Option<f64>,
    pub lr_f: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_d: f64,
    pub adam_betas: (f64, f64),
    pub poly_power: f64,
    pub max_iters: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Adds the class-ratio prior term, weighted by `lambda_ent`.
    pub class_prior: bool,
    /// Adds the MinEnt term to the AdvEnt segmenter objective.
    pub joint_entropy: bool,
    pub pl_threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda_ent: 0.001,
            lambda_adv: 0.001,
            lambda_pl: 1.0,
            mu: 0.5,
            top_fraction: None,
            // losses are pixel sums, so the segmenter step is scaled down
            lr_f: 3e-5,
            momentum: 0.9,
            weight_decay: 1e-4,
            lr_d: 1e-4,
            adam_betas: (0.9, 0.999),
            poly_power: 0.9,
            max_iters: 2000,
            batch_size: 1,
            seed: 0,
            class_prior: false,
            joint_entropy: false,
            pl_threshold: 0.9,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr_f", self.lr_f),
            ("lr_d", self.lr_d),
            ("poly_power", self.poly_power),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(usage_err!("{name} must be positive, got {v}"));
            }
        }
        let unit = [
            ("mu", self.mu),
            ("momentum", self.momentum),
            ("pl_threshold", self.pl_threshold),
            ("adam_beta1", self.adam_betas.0),
            ("adam_beta2", self.adam_betas.1),
        ];
        for (name, v) in unit {
            if !(0.0..=1.0).contains(&v) {
                return Err(usage_err!("{name} must lie in [0,1], got {v}"));
            }
        }
        for (name, v) in [
            ("lambda_ent", self.lambda_ent),
            ("lambda_adv", self.lambda_adv),
            ("lambda_pl", self.lambda_pl),
            ("weight_decay", self.weight_decay),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(usage_err!("{name} must be non-negative, got {v}"));
            }
        }
        if let Some(f) = self.top_fraction {
            if !(f > 0.0 && f <= 1.0) {
                return Err(usage_err!("top_fraction must lie in (0,1], got {f}"));
            }
        }
        if self.batch_size == 0 {
            return Err(usage_err!("batch_size must be at least 1"));
        }
        Ok(())
    }
}

impl KvConfig for TrainConfig {
    fn write_kv(&self, out: &mut KvMap) {
        out.insert("train.lambda_ent", self.lambda_ent);
        out.insert("train.lambda_adv", self.lambda_adv);
        out.insert("train.lambda_pl", self.lambda_pl);
        out.insert("train.mu", self.mu);
        match self.top_fraction {
            Some(f) => out.insert("train.top_fraction", f),
            None => out.insert("train.top_fraction", "none"),
        }
        out.insert("train.lr_f", self.lr_f);
        out.insert("train.momentum", self.momentum);
        out.insert("train.weight_decay", self.weight_decay);
        out.insert("train.lr_d", self.lr_d);
        out.insert("train.adam_beta1", self.adam_betas.0);
        out.insert("train.adam_beta2", self.adam_betas.1);
        out.insert("train.poly_power", self.poly_power);
        out.insert("train.max_iters", self.max_iters);
        out.insert("train.batch_size", self.batch_size);
        out.insert("train.seed", self.seed);
        out.insert("train.class_prior", self.class_prior);
        out.insert("train.joint_entropy", self.joint_entropy);
        out.insert("train.pl_threshold", self.pl_threshold);
    }

    fn apply_kv(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "train.lambda_ent" => self.lambda_ent = parse_value(key, value)?,
            "train.lambda_adv" => self.lambda_adv = parse_value(key, value)?,
            "train.lambda_pl" => self.lambda_pl = parse_value(key, value)?,
            "train.mu" => self.mu = parse_value(key, value)?,
            "train.top_fraction" => {
                self.top_fraction = match value {
                    "none" | "" => None,
                    v => Some(parse_value(key, v)?),
                }
            }
            "train.lr_f" => self.lr_f = parse_value(key, value)?,
            "train.momentum" => self.momentum = parse_value(key, value)?,
            "train.weight_decay" => self.weight_decay = parse_value(key, value)?,
            "train.lr_d" => self.lr_d = parse_value(key, value)?,
            "train.adam_beta1" => self.adam_betas.0 = parse_value(key, value)?,
            "train.adam_beta2" => self.adam_betas.1 = parse_value(key, value)?,
            "train.poly_power" => self.poly_power = parse_value(key, value)?,
            "train.max_iters" => self.max_iters = parse_value(key, value)?,
            "train.batch_size" => self.batch_size = parse_value(key, value)?,
            "train.seed" => self.seed = parse_value(key, value)?,
            "train.class_prior" => self.class_prior = parse_value(key, value)?,
            "train.joint_entropy" => self.joint_entropy = parse_value(key, value)?,
            "train.pl_threshold" => self.pl_threshold = parse_value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

// ---- optimizers ----------------------------------------------------------

/// `base · (1 − iter/max)^power`.
pub fn poly_lr(base_lr: f64, iter: usize, max_iters: usize, power: f64) -> f64 {
    if max_iters == 0 {
        return base_lr;
    }
    let frac = 1.0 - iter.min(max_iters) as f64 / max_iters as f64;
    base_lr * frac.powf(power)
}

fn check_grads(params: &[&mut Tensor], grads: &[Vec<f64>]) -> Result<()> {
    if params.len() != grads.len()
        || params.iter().zip(grads).any(|(p, g)| p.numel() != g.len())
    {
        return Err(usage_err!("gradients do not line up with parameters"));
    }
    Ok(())
}

/// SGD with heavy-ball momentum and L2 weight decay.
#[derive(Clone, Debug)]
pub struct SgdMomentum {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl SgdMomentum {
    pub fn new(params: &[&Tensor], momentum: f64, weight_decay: f64) -> Self {
        SgdMomentum {
            momentum,
            weight_decay,
            velocity: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
        }
    }

    pub fn velocity(&self) -> &[Vec<f64>] {
        &self.velocity
    }

    /// `g' = g + wd·w; v ← m·v + g'; w ← w − lr·v`.
    pub fn step(&mut self, mut params: Vec<&mut Tensor>, grads: &[Vec<f64>], lr: f64) -> Result<()> {
        check_grads(&params, grads)?;
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            for ((w, &gi), vi) in p.data_mut().iter_mut().zip(g).zip(v.iter_mut()) {
                let gd = gi + self.weight_decay * *w;
                *vi = self.momentum * *vi + gd;
                *w -= lr * *vi;
            }
        }
        Ok(())
    }
}

/// Bias-corrected Adam.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &[&Tensor], betas: (f64, f64)) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        Adam {
            beta1: betas.0,
            beta2: betas.1,
            eps: 1e-8,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps_taken(&self) -> i32 {
        self.t
    }

    pub fn step(&mut self, mut params: Vec<&mut Tensor>, grads: &[Vec<f64>], lr: f64) -> Result<()> {
        check_grads(&params, grads)?;
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *w -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

// ---- sampling and traces -------------------------------------------------

/// Draws indices epoch by epoch, reshuffling with its own stream.
#[derive(Clone, Debug)]
pub struct EpochSampler {
    rng: SplitMix64,
    order: Vec<usize>,
    pos: usize,
}

impl EpochSampler {
    pub fn new(len: usize, rng: SplitMix64) -> Self {
        EpochSampler {
            rng,
            order: (0..len).collect(),
            pos: len,
        }
    }

    pub fn next_index(&mut self) -> Result<usize> {
        if self.order.is_empty() {
            return Err(Error::Data("cannot sample from an empty split".into()));
        }
        if self.pos == self.order.len() {
            self.rng.shuffle(&mut self.order);
            self.pos = 0;
        }
        self.pos += 1;
        Ok(self.order[self.pos - 1])
    }

    pub fn next_batch(&mut self, n: usize) -> Result<Vec<usize>> {
        (0..n).map(|_| self.next_index()).collect()
    }
}

pub const TRACE_HEADER: &str = "iter,lr_F,lr_D,loss_seg,loss_ent,loss_adv_F,loss_D,loss_cp";

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct TraceRecord {
    pub iter: usize,
    pub lr_f: f64,
    pub lr_d: f64,
    pub loss_seg: f64,
    pub loss_ent: f64,
    pub loss_adv_f: f64,
    pub loss_d: f64,
    pub loss_cp: f64,
}

impl fmt::Display for TraceRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{},{},{},{},{},{},{},{}",
            self.iter,
            self.lr_f,
            self.lr_d,
            self.loss_seg,
            self.loss_ent,
            self.loss_adv_f,
            self.loss_d,
            self.loss_cp
        )
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trace {
    pub records: Vec<TraceRecord>,
}

impl Trace {
    pub fn to_text(&self, config_hash: &str) -> String {
        let mut s = format!("# config_hash={config_hash}\n{TRACE_HEADER}\n");
        for r in &self.records {
            s.push_str(&r.to_string());
            s.push('\n');
        }
        s
    }

    pub fn parse(text: &str) -> Result<Trace> {
        let mut lines = text.lines().filter(|l| !l.starts_with('#'));
        if lines.next() != Some(TRACE_HEADER) {
            return Err(Error::Format("trace header mismatch".into()));
        }
        let records = lines
            .map(|l| {
                let f: Vec<&str> = l.split(',').collect();
                if f.len() != 8 {
                    return Err(Error::Format(format!("malformed trace row '{l}'")));
                }
                let num = |i: usize| -> Result<f64> {
                    f[i].parse()
                        .map_err(|_| Error::Format(format!("bad number '{}'", f[i])))
                };
                Ok(TraceRecord {
                    iter: f[0]
                        .parse()
                        .map_err(|_| Error::Format(format!("bad iteration '{}'", f[0])))?,
                    lr_f: num(1)?,
                    lr_d: num(2)?,
                    loss_seg: num(3)?,
                    loss_ent: num(4)?,
                    loss_adv_f: num(5)?,
                    loss_d: num(6)?,
                    loss_cp: num(7)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Trace { records })
    }
}

// ---- procedures ----------------------------------------------------------

/// Base training objectives.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    SourceOnly,
    MinEnt,
    AdvEnt,
    SelfTrain,
}

/// Registered training variants, named after the usual method table.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    SourceOnly,
    MinEnt,
    MinEntEr,
    MinEntCp,
    AdvEnt,
    AdvEntCp,
    AdvEntMinEnt,
    SelfTrain,
}

impl Method {
    pub const ALL: [Method; 8] = [
        Method::SourceOnly,
        Method::MinEnt,
        Method::MinEntEr,
        Method::MinEntCp,
        Method::AdvEnt,
        Method::AdvEntCp,
        Method::AdvEntMinEnt,
        Method::SelfTrain,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::SourceOnly => "source_only",
            Method::MinEnt => "minent",
            Method::MinEntEr => "minent_er",
            Method::MinEntCp => "minent_cp",
            Method::AdvEnt => "advent",
            Method::AdvEntCp => "advent_cp",
            Method::AdvEntMinEnt => "advent_minent",
            Method::SelfTrain => "selftrain",
        }
    }

    pub fn objective(self) -> Objective {
        match self {
            Method::SourceOnly => Objective::SourceOnly,
            Method::MinEnt | Method::MinEntEr | Method::MinEntCp => Objective::MinEnt,
            Method::AdvEnt | Method::AdvEntCp | Method::AdvEntMinEnt => Objective::AdvEnt,
            Method::SelfTrain => Objective::SelfTrain,
        }
    }

    /// The configuration a variant actually runs with.
    pub fn configure(self, cfg: &TrainConfig) -> TrainConfig {
        let mut c = cfg.clone();
        match self {
            Method::MinEntEr => c.top_fraction = Some(c.top_fraction.unwrap_or(0.3)),
            Method::MinEntCp | Method::AdvEntCp => c.class_prior = true,
            Method::AdvEntMinEnt => c.joint_entropy = true,
            _ => {}
        }
        c
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Method::ALL.iter().map(|m| m.as_str()).collect();
                usage_err!("unknown method '{s}' (expected one of {})", names.join(", "))
            })
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub segmenter: Segmenter,
    pub discriminator: Option<Discriminator>,
    pub trace: Trace,
}

pub fn init_segmenter(cfg: &TrainConfig, num_classes: usize) -> Result<Segmenter> {
    Segmenter::init(SegmenterConfig::new(num_classes), cfg.seed)
}

pub fn init_discriminator(cfg: &TrainConfig, num_classes: usize) -> Result<Discriminator> {
    Discriminator::init(DiscriminatorConfig::new(num_classes), cfg.seed)
}

fn divergence(it: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite(m) => Error::Training(format!("diverged at iteration {it}: {m}")),
        e => e,
    }
}

fn batch_mean(g: &mut Graph, terms: &[Var]) -> Result<Var> {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = g.add(acc, t)?;
    }
    g.scale(acc, 1.0 / terms.len() as f64)
}

/// The segmenter forward of one iteration, kept alive until the F step.
struct Forward {
    g: Graph,
    bound: Vec<(Var, Var)>,
    source: Vec<Var>,
    target: Vec<Var>,
    source_idx: Vec<usize>,
}

/// Iteration-level driver shared by every procedure.
pub struct Trainer<'a> {
    objective: Objective,
    cfg: TrainConfig,
    data: &'a Dataset,
    segmenter: Segmenter,
    discriminator: Option<Discriminator>,
    sgd: SgdMomentum,
    adam: Option<Adam>,
    source_sampler: EpochSampler,
    target_sampler: EpochSampler,
    prior: Option<ClassPrior>,
    iter: usize,
    trace: Trace,
}

impl<'a> Trainer<'a> {
    pub fn new(objective: Objective, cfg: &TrainConfig, data: &'a Dataset) -> Result<Self> {
        cfg.validate()?;
        if data.source_train.is_empty() {
            return Err(Error::Data("training needs source scenes".into()));
        }
        let uses_target = objective != Objective::SourceOnly;
        if uses_target && data.target_train.is_empty() {
            return Err(Error::Data("adaptation needs target scenes".into()));
        }
        let c = data.num_classes();
        let segmenter = init_segmenter(cfg, c)?;
        let sgd = SgdMomentum::new(&segmenter.params(), cfg.momentum, cfg.weight_decay);
        let (discriminator, adam) = if objective == Objective::AdvEnt {
            let d = init_discriminator(cfg, c)?;
            let adam = Adam::new(&d.params(), cfg.adam_betas);
            (Some(d), Some(adam))
        } else {
            (None, None)
        };
        let prior = if cfg.class_prior && uses_target {
            Some(data.source_prior()?)
        } else {
            None
        };
        Ok(Trainer {
            objective,
            cfg: cfg.clone(),
            data,
            segmenter,
            discriminator,
            sgd,
            adam,
            source_sampler: EpochSampler::new(
                data.source_train.len(),
                SplitMix64::derived(cfg.seed, SOURCE_STREAM),
            ),
            target_sampler: EpochSampler::new(
                data.target_train.len(),
                SplitMix64::derived(cfg.seed, TARGET_STREAM),
            ),
            prior,
            iter: 0,
            trace: Trace::default(),
        })
    }

    pub fn segmenter(&self) -> &Segmenter {
        &self.segmenter
    }

    pub fn discriminator(&self) -> Option<&Discriminator> {
        self.discriminator.as_ref()
    }

    pub fn iteration(&self) -> usize {
        self.iter
    }

    pub fn trace(&self) -> &Trace {
        &self.trace
    }

    pub fn run(mut self) -> Result<TrainOutput> {
        while self.iter < self.cfg.max_iters {
            self.step()?;
        }
        Ok(self.finish())
    }

    pub fn finish(self) -> TrainOutput {
        TrainOutput {
            segmenter: self.segmenter,
            discriminator: self.discriminator,
            trace: self.trace,
        }
    }

    fn forward(&mut self) -> Result<Forward> {
        let b = self.cfg.batch_size;
        let source_idx = self.source_sampler.next_batch(b)?;
        let target_idx = if self.objective == Objective::SourceOnly {
            Vec::new()
        } else {
            self.target_sampler.next_batch(b)?
        };
        let mut g = Graph::new();
        let bound = self.segmenter.bind(&mut g, true);
        let run = |g: &mut Graph, scenes: &[Scene], idx: &[usize]| -> Result<Vec<Var>> {
            idx.iter()
                .map(|&i| {
                    let x = g.constant(scenes[i].image.clone());
                    self.segmenter.forward(g, &bound, x)
                })
                .collect()
        };
        let source = run(&mut g, &self.data.source_train, &source_idx)?;
        let target = run(&mut g, &self.data.target_train, &target_idx)?;
        Ok(Forward {
            g,
            bound,
            source,
            target,
            source_idx,
        })
    }

    /// One Adam step on θ_D from detached self-information maps.
    pub fn discriminator_step(&mut self, source: &[Tensor], target: &[Tensor], lr: f64) -> Result<f64> {
        let (d, adam) = match (&mut self.discriminator, &mut self.adam) {
            (Some(d), Some(a)) => (d, a),
            _ => return Err(usage_err!("this procedure has no discriminator")),
        };
        let (loss, grads) = discriminator_loss(d, source, target)?;
        adam.step(d.params_mut(), &grads, lr)?;
        Ok(loss)
    }

    /// Runs one full iteration and appends its trace record.
    pub fn step(&mut self) -> Result<TraceRecord> {
        let it = self.iter;
        let rec = self.step_inner(it).map_err(divergence(it))?;
        self.iter += 1;
        self.trace.records.push(rec);
        Ok(rec)
    }

    fn step_inner(&mut self, it: usize) -> Result<TraceRecord> {
        let cfg = self.cfg.clone();
        let lr_f = poly_lr(cfg.lr_f, it, cfg.max_iters, cfg.poly_power);
        let has_d = self.discriminator.is_some();
        let lr_d = if has_d {
            poly_lr(cfg.lr_d, it, cfg.max_iters, cfg.poly_power)
        } else {
            0.0
        };
        let mut rec = TraceRecord {
            iter: it,
            lr_f,
            lr_d,
            ..TraceRecord::default()
        };

        let Forward {
            mut g,
            bound,
            source,
            target,
            source_idx,
        } = self.forward()?;

        let seg_terms = source
            .iter()
            .zip(&source_idx)
            .map(|(&p, &i)| losses::seg_cross_entropy(&mut g, p, &self.data.source_train[i].labels, None))
            .collect::<Result<Vec<_>>>()?;
        let seg = batch_mean(&mut g, &seg_terms)?;
        rec.loss_seg = g.value(seg).item()?;
        let mut total = seg;

        let use_entropy = match self.objective {
            Objective::MinEnt => true,
            Objective::AdvEnt => cfg.joint_entropy,
            _ => false,
        };
        if use_entropy {
            let mut terms = Vec::with_capacity(target.len());
            for &p in &target {
                let e = losses::entropy_map(&mut g, p)?;
                let mask = match cfg.top_fraction {
                    Some(f) => {
                        let ev = losses::EntropyMap::new(g.value(e).detach())?;
                        Some(losses::entropy_range_mask(&ev, f)?)
                    }
                    None => None,
                };
                terms.push(losses::entropy_loss(&mut g, e, mask.as_ref())?);
            }
            let ent = batch_mean(&mut g, &terms)?;
            rec.loss_ent = g.value(ent).item()?;
            let weighted = g.scale(ent, cfg.lambda_ent)?;
            total = g.add(total, weighted)?;
        }

        if let Some(prior) = &self.prior {
            let terms = target
                .iter()
                .map(|&p| losses::class_prior_loss(&mut g, p, prior, cfg.mu))
                .collect::<Result<Vec<_>>>()?;
            let cp = batch_mean(&mut g, &terms)?;
            rec.loss_cp = g.value(cp).item()?;
            let weighted = g.scale(cp, cfg.lambda_ent)?;
            total = g.add(total, weighted)?;
        }

        if self.objective == Objective::SelfTrain {
            let mut terms = Vec::with_capacity(target.len());
            for &p in &target {
                let pm = PredictionMap::new(g.value(p).detach())?;
                let (mask, labels) = losses::pseudo_label_mask(&pm, cfg.pl_threshold)?;
                terms.push(losses::seg_cross_entropy(&mut g, p, &labels, Some(&mask))?);
            }
            let pl = batch_mean(&mut g, &terms)?;
            rec.loss_ent = g.value(pl).item()?;
            let weighted = g.scale(pl, cfg.lambda_pl)?;
            total = g.add(total, weighted)?;
        }

        if self.objective == Objective::AdvEnt {
            let mut i_src = Vec::with_capacity(source.len());
            let mut i_tgt = Vec::with_capacity(target.len());
            for &p in &source {
                i_src.push(losses::self_info_map(&mut g, p)?);
            }
            for &p in &target {
                i_tgt.push(losses::self_info_map(&mut g, p)?);
            }
            let src_vals: Vec<Tensor> = i_src.iter().map(|&v| g.value(v).detach()).collect();
            let tgt_vals: Vec<Tensor> = i_tgt.iter().map(|&v| g.value(v).detach()).collect();
            rec.loss_d = self.discriminator_step(&src_vals, &tgt_vals, lr_d)?;

            let d = self.discriminator.as_ref().expect("adversarial objective has D");
            let dbound = d.bind(&mut g, false);
            let terms = i_tgt
                .iter()
                .map(|&i| {
                    let out = d.forward(&mut g, &dbound, i)?;
                    losses::domain_bce(&mut g, out, Domain::Source)
                })
                .collect::<Result<Vec<_>>>()?;
            let adv = batch_mean(&mut g, &terms)?;
            rec.loss_adv_f = g.value(adv).item()?;
            let weighted = g.scale(adv, cfg.lambda_adv)?;
            total = g.add(total, weighted)?;
        }

        g.backward(total)?;
        let grads = self.segmenter.collect_grads(&g, &bound);
        self.sgd.step(self.segmenter.params_mut(), &grads, lr_f)?;
        Ok(rec)
    }
}

/// Discriminator objective on detached maps: source labelled 1, target 0,
/// each averaged over the batch. Returns the loss and θ_D gradients.
fn discriminator_loss(d: &Discriminator, source: &[Tensor], target: &[Tensor]) -> Result<(f64, Vec<Vec<f64>>)> {
    if source.is_empty() || target.is_empty() {
        return Err(usage_err!("discriminator step needs maps from both domains"));
    }
    let mut g = Graph::new();
    let bound = d.bind(&mut g, true);
    let side = |g: &mut Graph, maps: &[Tensor], domain: Domain| -> Result<Var> {
        let terms = maps
            .iter()
            .map(|m| {
                let x = g.constant(m.detach());
                let out = d.forward(g, &bound, x)?;
                losses::domain_bce(g, out, domain)
            })
            .collect::<Result<Vec<_>>>()?;
        batch_mean(g, &terms)
    };
    let ls = side(&mut g, source, Domain::Source)?;
    let lt = side(&mut g, target, Domain::Target)?;
    let loss = g.add(ls, lt)?;
    g.backward(loss)?;
    Ok((g.value(loss).item()?, d.collect_grads(&g, &bound)))
}

pub fn train(method: Method, cfg: &TrainConfig, data: &Dataset) -> Result<TrainOutput> {
    Trainer::new(method.objective(), &method.configure(cfg), data)?.run()
}

pub fn train_source_only(cfg: &TrainConfig, data: &Dataset) -> Result<TrainOutput> {
    Trainer::new(Objective::SourceOnly, cfg, data)?.run()
}

pub fn train_minent(cfg: &TrainConfig, data: &Dataset) -> Result<TrainOutput> {
    Trainer::new(Objective::MinEnt, cfg, data)?.run()
}

pub fn train_advent(cfg: &TrainConfig, data: &Dataset) -> Result<TrainOutput> {
    Trainer::new(Objective::AdvEnt, cfg, data)?.run()
}

pub fn train_selftrain(cfg: &TrainConfig, data: &Dataset, threshold: f64) -> Result<TrainOutput> {
    let cfg = TrainConfig {
        pl_threshold: threshold,
        ..cfg.clone()
    };
    Trainer::new(Objective::SelfTrain, &cfg, data)?.run()
}

// ---- discriminator diagnostics -------------------------------------------

/// Self-information maps of `f` on every scene.
pub fn self_info_maps(f: &Segmenter, scenes: &[Scene]) -> Result<Vec<Tensor>> {
    scenes
        .iter()
        .map(|s| Ok(f.predict(&s.image)?.self_info_map()?.into_tensor()))
        .collect()
}

/// Fraction of discriminator output cells on the correct side of 0.5
/// (source maps should score above, target maps below).
pub fn discriminator_accuracy(d: &Discriminator, source: &[Tensor], target: &[Tensor]) -> Result<f64> {
    let mut correct = 0usize;
    let mut total = 0usize;
    for (maps, is_source) in [(source, true), (target, false)] {
        for m in maps {
            let out = d.predict(m)?;
            correct += out
                .data()
                .iter()
                .filter(|&&p| (p > 0.5) == is_source)
                .count();
            total += out.numel();
        }
    }
    if total == 0 {
        return Err(usage_err!("no maps to score"));
    }
    Ok(correct as f64 / total as f64)
}

/// Held-out discriminator accuracy on the evaluation splits.
pub fn held_out_accuracy(f: &Segmenter, d: &Discriminator, data: &Dataset) -> Result<f64> {
    let s = self_info_maps(f, &data.source_eval)?;
    let t = self_info_maps(f, &data.target_eval)?;
    discriminator_accuracy(d, &s, &t)
}

/// Trains a fresh discriminator for `iters` steps against a frozen segmenter.
pub fn train_discriminator_frozen(
    cfg: &TrainConfig,
    data: &Dataset,
    f: &Segmenter,
    iters: usize,
) -> Result<(Discriminator, Vec<f64>)> {
    cfg.validate()?;
    let mut d = init_discriminator(cfg, data.num_classes())?;
    let mut adam = Adam::new(&d.params(), cfg.adam_betas);
    let mut src = EpochSampler::new(data.source_train.len(), SplitMix64::derived(cfg.seed, SOURCE_STREAM));
    let mut tgt = EpochSampler::new(data.target_train.len(), SplitMix64::derived(cfg.seed, TARGET_STREAM));
    let mut losses_out = Vec::with_capacity(iters);
    for it in 0..iters {
        let lr = poly_lr(cfg.lr_d, it, iters, cfg.poly_power);
        let maps = |idx: Vec<usize>, scenes: &[Scene]| -> Result<Vec<Tensor>> {
            idx.into_iter()
                .map(|i| Ok(f.predict(&scenes[i].image)?.self_info_map()?.into_tensor()))
                .collect()
        };
        let s = maps(src.next_batch(cfg.batch_size)?, &data.source_train)?;
        let t = maps(tgt.next_batch(cfg.batch_size)?, &data.target_train)?;
        let (loss, grads) = discriminator_loss(&d, &s, &t).map_err(divergence(it))?;
        adam.step(d.params_mut(), &grads, lr)?;
        losses_out.push(loss);
    }
    Ok((d, losses_out))
}
