//! Synthetic source/target segmentation scenes, label maps, class priors
//! and the `TNSR` tensor container.
//!
//! A scene's layout (regions and their classes) depends only on its seed.
//! The rendered appearance additionally depends on the domain: target
//! scenes go through a fixed color/gamma shift and heavier noise, so a
//! source and a target scene with the same seed share labels but not
//! pixels.

use std::fmt;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::config::{parse_value, KvConfig, KvMap};
use crate::error::{shape_err, usage_err, Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

pub const MIN_CLASSES: usize = 3;
pub const MAX_CLASSES: usize = 8;

/// Base RGB color of each class id; class 0 is the background.
pub const PALETTE: [[f64; 3]; MAX_CLASSES] = [
    [0.45, 0.45, 0.45],
    [0.85, 0.25, 0.20],
    [0.25, 0.70, 0.25],
    [0.20, 0.30, 0.85],
    [0.90, 0.85, 0.20],
    [0.80, 0.30, 0.80],
    [0.20, 0.80, 0.80],
    [0.95, 0.55, 0.15],
];

const LAYOUT_SALT: u64 = 0x4C41_594F_5554;
const SOURCE_SALT: u64 = 0x534F_5552_4345;
const TARGET_SALT: u64 = 0x5441_5247_4554;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    /// Domain-classification label: 1 for source, 0 for target.
    pub fn label(self) -> f64 {
        match self {
            Domain::Source => 1.0,
            Domain::Target => 0.0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "source" => Ok(Domain::Source),
            "target" => Ok(Domain::Target),
            other => Err(usage_err!("unknown domain '{other}'")),
        }
    }
}

/// Per-pixel class ids of an H×W scene.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    ids: Vec<usize>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, ids: Vec<usize>) -> Result<Self> {
        if ids.len() != height * width {
            return Err(shape_err!(
                "label map {height}x{width} needs {} ids, got {}",
                height * width,
                ids.len()
            ));
        }
        Ok(LabelMap { height, width, ids })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn max_id(&self) -> Option<usize> {
        self.ids.iter().copied().max()
    }

    /// [C,H,W] one-hot encoding.
    pub fn one_hot(&self, num_classes: usize) -> Result<Tensor> {
        let plane = self.height * self.width;
        let mut data = vec![0.0; num_classes * plane];
        for (i, &c) in self.ids.iter().enumerate() {
            if c >= num_classes {
                return Err(Error::Data(format!("label {c} out of range for {num_classes} classes")));
            }
            data[c * plane + i] = 1.0;
        }
        Tensor::new(vec![num_classes, self.height, self.width], data)
    }

    /// Labels stored as f64 ids with shape [H,W].
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            vec![self.height, self.width],
            self.ids.iter().map(|&c| c as f64).collect(),
        )
        .expect("label map dimensions are consistent")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        if t.rank() != 2 {
            return Err(Error::Format(format!("label tensor must be [H,W], got {:?}", t.shape())));
        }
        let ids = t
            .data()
            .iter()
            .map(|&v| {
                if v >= 0.0 && v.fract() == 0.0 && v < MAX_CLASSES as f64 {
                    Ok(v as usize)
                } else {
                    Err(Error::Format(format!("invalid class id {v}")))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        LabelMap::new(t.shape()[0], t.shape()[1], ids)
    }
}

/// ℓ1-normalized per-class pixel histogram.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassPrior {
    p: Vec<f64>,
}

impl ClassPrior {
    pub fn new(p: Vec<f64>) -> Result<Self> {
        let total: f64 = p.iter().sum();
        if p.iter().any(|&v| v < 0.0 || !v.is_finite()) || (total - 1.0).abs() > 1e-12 {
            return Err(Error::Data(format!("class prior {p:?} is not a distribution")));
        }
        Ok(ClassPrior { p })
    }

    pub fn probs(&self) -> &[f64] {
        &self.p
    }

    pub fn num_classes(&self) -> usize {
        self.p.len()
    }
}

/// Pixel frequency of every class over `labels`.
pub fn class_prior(labels: &[&LabelMap], num_classes: usize) -> Result<ClassPrior> {
    if labels.is_empty() {
        return Err(usage_err!("class prior needs at least one label map"));
    }
    let mut counts = vec![0u64; num_classes];
    let mut total = 0u64;
    for map in labels {
        for &c in map.ids() {
            if c >= num_classes {
                return Err(Error::Data(format!("label {c} out of range for {num_classes} classes")));
            }
            counts[c] += 1;
            total += 1;
        }
    }
    let p: Vec<f64> = counts.iter().map(|&n| n as f64 / total as f64).collect();
    // Renormalize so the sum is 1 to within rounding of a single value.
    let s: f64 = p.iter().sum();
    ClassPrior::new(p.iter().map(|v| v / s).collect())
}

/// Size and composition of a generated benchmark.
#[derive(Clone, Debug, PartialEq)]
pub struct GenConfig {
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub n_source_train: usize,
    pub n_target_train: usize,
    pub n_target_eval: usize,
    /// Held-out source scenes, used for domain diagnostics.
    pub n_source_eval: usize,
    pub source_seed_base: u64,
    pub target_seed_base: u64,
    pub eval_seed_base: u64,
    /// Scales the target appearance shift; 0 leaves only the noise change.
    pub domain_gap: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            height: 32,
            width: 32,
            num_classes: 5,
            n_source_train: 512,
            n_target_train: 512,
            n_target_eval: 128,
            n_source_eval: 128,
            source_seed_base: 0,
            target_seed_base: 1_000_000,
            eval_seed_base: 2_000_000,
            domain_gap: 1.0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height < 16 || self.width < 16 {
            return Err(usage_err!(
                "scenes must be at least 16x16, got {}x{}",
                self.height,
                self.width
            ));
        }
        if !(MIN_CLASSES..=MAX_CLASSES).contains(&self.num_classes) {
            return Err(usage_err!(
                "num_classes must be in [{MIN_CLASSES},{MAX_CLASSES}], got {}",
                self.num_classes
            ));
        }
        if !(self.domain_gap >= 0.0 && self.domain_gap.is_finite()) {
            return Err(usage_err!("domain_gap must be a non-negative number"));
        }
        let ranges = [
            (self.source_seed_base, self.n_source_train),
            (self.target_seed_base, self.n_target_train),
            (self.eval_seed_base, self.n_target_eval.max(self.n_source_eval)),
        ];
        for (i, a) in ranges.iter().enumerate() {
            for b in &ranges[i + 1..] {
                let overlap = a.0 < b.0 + b.1 as u64 && b.0 < a.0 + a.1 as u64;
                if overlap && a.1 > 0 && b.1 > 0 {
                    return Err(usage_err!("seed ranges of the dataset splits overlap"));
                }
            }
        }
        Ok(())
    }
}

impl KvConfig for GenConfig {
    fn write_kv(&self, out: &mut KvMap) {
        out.insert("gen.height", self.height);
        out.insert("gen.width", self.width);
        out.insert("gen.num_classes", self.num_classes);
        out.insert("gen.n_source_train", self.n_source_train);
        out.insert("gen.n_target_train", self.n_target_train);
        out.insert("gen.n_target_eval", self.n_target_eval);
        out.insert("gen.n_source_eval", self.n_source_eval);
        out.insert("gen.source_seed_base", self.source_seed_base);
        out.insert("gen.target_seed_base", self.target_seed_base);
        out.insert("gen.eval_seed_base", self.eval_seed_base);
        out.insert("gen.domain_gap", self.domain_gap);
    }

    fn apply_kv(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "gen.height" => self.height = parse_value(key, value)?,
            "gen.width" => self.width = parse_value(key, value)?,
            "gen.num_classes" => self.num_classes = parse_value(key, value)?,
            "gen.n_source_train" => self.n_source_train = parse_value(key, value)?,
            "gen.n_target_train" => self.n_target_train = parse_value(key, value)?,
            "gen.n_target_eval" => self.n_target_eval = parse_value(key, value)?,
            "gen.n_source_eval" => self.n_source_eval = parse_value(key, value)?,
            "gen.source_seed_base" => self.source_seed_base = parse_value(key, value)?,
            "gen.target_seed_base" => self.target_seed_base = parse_value(key, value)?,
            "gen.eval_seed_base" => self.eval_seed_base = parse_value(key, value)?,
            "gen.domain_gap" => self.domain_gap = parse_value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub image: Tensor,
    pub labels: LabelMap,
    pub domain: Domain,
    pub seed: u64,
}

struct Region {
    class: usize,
    ellipse: bool,
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    tint: [f64; 3],
}

impl Region {
    fn contains(&self, y: f64, x: f64) -> bool {
        let dy = (y - self.cy) / self.ry;
        let dx = (x - self.cx) / self.rx;
        if self.ellipse {
            dy * dy + dx * dx <= 1.0
        } else {
            dy.abs() <= 1.0 && dx.abs() <= 1.0
        }
    }
}

fn layout(seed: u64, cfg: &GenConfig) -> (Vec<usize>, Vec<[f64; 3]>) {
    let mut rng = SplitMix64::derived(seed, LAYOUT_SALT);
    let (h, w) = (cfg.height as f64, cfg.width as f64);
    let n_regions = rng.range_inclusive(2, 5) as usize;
    let regions: Vec<Region> = (0..n_regions)
        .map(|_| {
            let class = 1 + rng.below(cfg.num_classes as u64 - 1) as usize;
            let ellipse = rng.below(2) == 1;
            let cy = rng.uniform(0.0, h);
            let cx = rng.uniform(0.0, w);
            let ry = rng.uniform(0.1 * h, 0.3 * h);
            let rx = rng.uniform(0.1 * w, 0.3 * w);
            let tint = [(); 3].map(|_| rng.uniform(-0.05, 0.05));
            Region {
                class,
                ellipse,
                cy,
                cx,
                ry,
                rx,
                tint,
            }
        })
        .collect();
    let background_tint = [(); 3].map(|_| rng.uniform(-0.05, 0.05));

    let mut ids = vec![0usize; cfg.height * cfg.width];
    let mut colors = vec![[0.0; 3]; cfg.height * cfg.width];
    for y in 0..cfg.height {
        for x in 0..cfg.width {
            let i = y * cfg.width + x;
            let (fy, fx) = (y as f64 + 0.5, x as f64 + 0.5);
            let mut class = 0;
            let mut tint = background_tint;
            // later regions are painted over earlier ones
            for r in &regions {
                if r.contains(fy, fx) {
                    class = r.class;
                    tint = r.tint;
                }
            }
            ids[i] = class;
            let base = PALETTE[class];
            colors[i] = [0, 1, 2].map(|ch| base[ch] + tint[ch]);
        }
    }
    (ids, colors)
}

const MIX: [[f64; 3]; 3] = [
    [0.85, 0.1245, 0.0255],
    [0.0255, 0.85, 0.1245],
    [0.1245, 0.0255, 0.85],
];
const OFFSET: [f64; 3] = [0.06, -0.04, 0.05];
const GAMMA: f64 = 1.5;
/// Mixed colors are pulled toward this gray level by `CONTRAST`.
const PIVOT: f64 = 0.45;
const CONTRAST: f64 = 0.6;
const NOISE: f64 = 0.04;
/// Extra target noise amplitude at `domain_gap = 1`.
const TARGET_NOISE: f64 = 0.08;

/// Target appearance: channel mixing plus offset, contrast reduction and
/// gamma, all scaled toward the identity by `gap`.
fn target_shift(rgb: [f64; 3], gap: f64) -> [f64; 3] {
    let mut out = [0.0; 3];
    for (r, row) in MIX.iter().enumerate() {
        let mixed: f64 = row.iter().zip(rgb).map(|(m, v)| m * v).sum::<f64>() + OFFSET[r];
        let mixed = PIVOT + CONTRAST * (mixed - PIVOT);
        let v = ((1.0 - gap) * rgb[r] + gap * mixed).clamp(0.0, 1.0);
        out[r] = v.powf(1.0 + gap * (GAMMA - 1.0));
    }
    out
}

/// Renders the scene with layout `seed` in `domain`.
pub fn generate_scene(seed: u64, domain: Domain, cfg: &GenConfig) -> Result<Scene> {
    cfg.validate()?;
    let (ids, colors) = layout(seed, cfg);
    let salt = match domain {
        Domain::Source => SOURCE_SALT,
        Domain::Target => TARGET_SALT,
    };
    let mut noise = SplitMix64::derived(seed, salt);
    let plane = cfg.height * cfg.width;
    let mut image = vec![0.0; 3 * plane];
    let amp = match domain {
        Domain::Source => NOISE,
        Domain::Target => NOISE + TARGET_NOISE * cfg.domain_gap,
    };
    for (i, &rgb) in colors.iter().enumerate() {
        let shaded = match domain {
            Domain::Source => rgb,
            Domain::Target => target_shift(rgb, cfg.domain_gap),
        };
        for ch in 0..3 {
            let v = shaded[ch] + noise.uniform(-amp, amp);
            image[ch * plane + i] = v.clamp(0.0, 1.0);
        }
    }
    Ok(Scene {
        image: Tensor::new(vec![3, cfg.height, cfg.width], image)?,
        labels: LabelMap::new(cfg.height, cfg.width, ids)?,
        domain,
        seed,
    })
}

// ---- TNSR container ------------------------------------------------------

const MAGIC: &[u8; 4] = b"TNSR";
const VERSION: u32 = 1;

pub fn encode_tensor(t: &Tensor) -> Vec<u8> {
    let mut buf = Vec::with_capacity(12 + 8 * t.rank() + 8 * t.numel());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor> {
    let fmt_err = |m: &str| Error::Format(m.to_string());
    let mut r = bytes;
    let mut word = [0u8; 4];
    r.read_exact(&mut word).map_err(|_| fmt_err("truncated header"))?;
    if &word != MAGIC {
        return Err(fmt_err("bad magic"));
    }
    r.read_exact(&mut word).map_err(|_| fmt_err("truncated header"))?;
    let version = u32::from_le_bytes(word);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    r.read_exact(&mut word).map_err(|_| fmt_err("truncated header"))?;
    let rank = u32::from_le_bytes(word) as usize;
    if rank.checked_mul(8).is_none_or(|n| n > r.len()) {
        return Err(fmt_err("truncated extents"));
    }
    let mut shape = Vec::with_capacity(rank);
    let mut numel: usize = 1;
    for _ in 0..rank {
        let mut ext = [0u8; 8];
        r.read_exact(&mut ext).map_err(|_| fmt_err("truncated extents"))?;
        let d = usize::try_from(u64::from_le_bytes(ext)).map_err(|_| fmt_err("dimension overflow"))?;
        if d == 0 {
            return Err(fmt_err("zero extent"));
        }
        numel = numel.checked_mul(d).ok_or_else(|| fmt_err("dimension overflow"))?;
        shape.push(d);
    }
    let payload = numel.checked_mul(8).ok_or_else(|| fmt_err("dimension overflow"))?;
    if payload != r.len() {
        return Err(Error::Format(format!(
            "payload holds {} bytes, header implies {payload}",
            r.len()
        )));
    }
    let data = r
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    Tensor::new(shape, data).map_err(|e| Error::Format(e.to_string()))
}

pub fn save_tensor(path: &Path, t: &Tensor) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode_tensor(t)).map_err(|e| Error::io(path, e))
}

pub fn load_tensor(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensor(&bytes)
}

// ---- dataset -------------------------------------------------------------

/// All splits of a benchmark, in seed order.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub config: GenConfig,
    pub source_train: Vec<Scene>,
    pub target_train: Vec<Scene>,
    pub target_eval: Vec<Scene>,
    pub source_eval: Vec<Scene>,
}

pub const MANIFEST: &str = "manifest.txt";

fn split_seeds(base: u64, n: usize) -> impl Iterator<Item = u64> {
    (0..n as u64).map(move |i| base + i)
}

impl Dataset {
    pub fn generate(cfg: &GenConfig) -> Result<Self> {
        cfg.validate()?;
        let split = |base, n, domain| {
            split_seeds(base, n)
                .map(|s| generate_scene(s, domain, cfg))
                .collect::<Result<Vec<_>>>()
        };
        Ok(Dataset {
            config: cfg.clone(),
            source_train: split(cfg.source_seed_base, cfg.n_source_train, Domain::Source)?,
            target_train: split(cfg.target_seed_base, cfg.n_target_train, Domain::Target)?,
            target_eval: split(cfg.eval_seed_base, cfg.n_target_eval, Domain::Target)?,
            source_eval: split(cfg.eval_seed_base, cfg.n_source_eval, Domain::Source)?,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn source_prior(&self) -> Result<ClassPrior> {
        let labels: Vec<&LabelMap> = self.source_train.iter().map(|s| &s.labels).collect();
        class_prior(&labels, self.config.num_classes)
    }

    pub fn manifest(&self) -> KvMap {
        let mut m = self.config.to_kv();
        let hash = m.hash();
        m.insert("config_hash", hash);
        m
    }

    fn scene_path(dir: &Path, seed: u64, domain: Domain, kind: &str) -> PathBuf {
        dir.join(format!("scene_{seed}_{domain}.{kind}.tnsr"))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for scene in self.all_scenes() {
            save_tensor(&Self::scene_path(dir, scene.seed, scene.domain, "img"), &scene.image)?;
            save_tensor(
                &Self::scene_path(dir, scene.seed, scene.domain, "lbl"),
                &scene.labels.to_tensor(),
            )?;
        }
        let path = dir.join(MANIFEST);
        fs::write(&path, self.manifest().to_text()).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = KvMap::load(&dir.join(MANIFEST))?;
        let mut cfg = GenConfig::default();
        for (k, v) in manifest.iter() {
            if !cfg.apply_kv(k, v)? && k != "config_hash" {
                return Err(Error::Format(format!("unknown manifest key '{k}'")));
            }
        }
        cfg.validate()?;
        let load_split = |base, n, domain| {
            split_seeds(base, n)
                .map(|seed| {
                    let image = load_tensor(&Self::scene_path(dir, seed, domain, "img"))?;
                    let labels =
                        LabelMap::from_tensor(&load_tensor(&Self::scene_path(dir, seed, domain, "lbl"))?)?;
                    if image.shape() != [3, cfg.height, cfg.width]
                        || labels.height() != cfg.height
                        || labels.width() != cfg.width
                    {
                        return Err(Error::Format(format!("scene {seed} has unexpected size")));
                    }
                    if labels.max_id().is_some_and(|c| c >= cfg.num_classes) {
                        return Err(Error::Data(format!("scene {seed} has out-of-range labels")));
                    }
                    Ok(Scene {
                        image,
                        labels,
                        domain,
                        seed,
                    })
                })
                .collect::<Result<Vec<_>>>()
        };
        Ok(Dataset {
            source_train: load_split(cfg.source_seed_base, cfg.n_source_train, Domain::Source)?,
            target_train: load_split(cfg.target_seed_base, cfg.n_target_train, Domain::Target)?,
            target_eval: load_split(cfg.eval_seed_base, cfg.n_target_eval, Domain::Target)?,
            source_eval: load_split(cfg.eval_seed_base, cfg.n_source_eval, Domain::Source)?,
            config: cfg,
        })
    }

    pub fn all_scenes(&self) -> impl Iterator<Item = &Scene> {
        self.source_train
            .iter()
            .chain(&self.target_train)
            .chain(&self.target_eval)
            .chain(&self.source_eval)
    }
}
