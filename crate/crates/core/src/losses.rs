//! Training objectives as differentiable graph operations.
//!
//! Pixel-level losses are sums over the selected pixels; the domain
//! classification loss is a mean over discriminator output locations.
//! Every logarithm goes through the clamped log of the graph, which gives
//! `0 · log 0 = 0`.

use crate::data::{ClassPrior, Domain, LabelMap};
use crate::error::{shape_err, usage_err, Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Per-pixel class distributions, shape [C,H,W].
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionMap {
    probs: Tensor,
}

impl PredictionMap {
    pub fn new(probs: Tensor) -> Result<Self> {
        if probs.rank() != 3 {
            return Err(shape_err!("prediction map must be [C,H,W], got {:?}", probs.shape()));
        }
        let c = probs.shape()[0];
        let plane = probs.shape()[1] * probs.shape()[2];
        let d = probs.data();
        if d.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Data("prediction entries must lie in [0,1]".into()));
        }
        for j in 0..plane {
            let s: f64 = (0..c).map(|k| d[k * plane + j]).sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(Error::Data(format!("pixel {j} sums to {s}")));
            }
        }
        Ok(PredictionMap { probs })
    }

    pub fn probs(&self) -> &Tensor {
        &self.probs
    }

    pub fn num_classes(&self) -> usize {
        self.probs.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.probs.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.probs.shape()[2]
    }

    /// Probability of class `c` at flat pixel index `pixel`.
    pub fn at(&self, c: usize, pixel: usize) -> f64 {
        self.probs.data()[c * self.height() * self.width() + pixel]
    }

    /// Most likely class per pixel, ties resolved to the lowest id.
    pub fn argmax(&self) -> LabelMap {
        let (c, plane) = (self.num_classes(), self.height() * self.width());
        let ids = (0..plane)
            .map(|j| {
                let mut best = 0;
                for k in 1..c {
                    if self.at(k, j) > self.at(best, j) {
                        best = k;
                    }
                }
                best
            })
            .collect();
        LabelMap::new(self.height(), self.width(), ids).expect("dimensions match")
    }

    pub fn entropy_map(&self) -> Result<EntropyMap> {
        let mut g = Graph::new();
        let p = g.constant(self.probs.detach());
        let e = entropy_map(&mut g, p)?;
        EntropyMap::new(g.take_value(e))
    }

    pub fn self_info_map(&self) -> Result<SelfInfoMap> {
        let mut g = Graph::new();
        let p = g.constant(self.probs.detach());
        let i = self_info_map(&mut g, p)?;
        Ok(SelfInfoMap {
            values: g.take_value(i),
        })
    }
}

/// Normalized per-pixel entropies, shape [H,W], entries in [0,1].
#[derive(Clone, Debug, PartialEq)]
pub struct EntropyMap {
    values: Tensor,
}

impl EntropyMap {
    pub fn new(values: Tensor) -> Result<Self> {
        if values.rank() != 2 {
            return Err(shape_err!("entropy map must be [H,W], got {:?}", values.shape()));
        }
        Ok(EntropyMap { values })
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn mean(&self) -> f64 {
        self.values.data().iter().sum::<f64>() / self.values.numel() as f64
    }

    pub fn max(&self) -> f64 {
        self.values.data().iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Weighted self-information `-P·log P`, shape [C,H,W].
#[derive(Clone, Debug, PartialEq)]
pub struct SelfInfoMap {
    values: Tensor,
}

impl SelfInfoMap {
    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn into_tensor(self) -> Tensor {
        self.values
    }
}

/// Boolean pixel selection over an H×W grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PixelMask {
    height: usize,
    width: usize,
    selected: Vec<bool>,
}

impl PixelMask {
    pub fn new(height: usize, width: usize, selected: Vec<bool>) -> Result<Self> {
        if selected.len() != height * width {
            return Err(shape_err!("mask {height}x{width} needs {} entries", height * width));
        }
        Ok(PixelMask {
            height,
            width,
            selected,
        })
    }

    pub fn all(height: usize, width: usize) -> Self {
        PixelMask {
            height,
            width,
            selected: vec![true; height * width],
        }
    }

    pub fn selected(&self) -> &[bool] {
        &self.selected
    }

    pub fn count(&self) -> usize {
        self.selected.iter().filter(|&&s| s).count()
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    fn check(&self, h: usize, w: usize) -> Result<()> {
        if (self.height, self.width) != (h, w) {
            return Err(shape_err!(
                "mask is {}x{}, map is {h}x{w}",
                self.height,
                self.width
            ));
        }
        Ok(())
    }
}

fn chw(g: &Graph, p: Var) -> Result<(usize, usize, usize)> {
    let s = g.value(p).shape();
    if s.len() != 3 {
        return Err(shape_err!("expected a [C,H,W] map, got {s:?}"));
    }
    Ok((s[0], s[1], s[2]))
}

/// `-Σ_{(h,w) ∈ mask} log P(y(h,w), h, w)` over a [C,H,W] prediction.
pub fn seg_cross_entropy(
    g: &mut Graph,
    p: Var,
    labels: &LabelMap,
    mask: Option<&PixelMask>,
) -> Result<Var> {
    let (c, h, w) = chw(g, p)?;
    if (labels.height(), labels.width()) != (h, w) {
        return Err(shape_err!(
            "labels are {}x{}, prediction is {h}x{w}",
            labels.height(),
            labels.width()
        ));
    }
    if let Some(m) = mask {
        m.check(h, w)?;
    }
    let plane = h * w;
    let mut weights = vec![0.0; c * plane];
    for (j, &y) in labels.ids().iter().enumerate() {
        if y >= c {
            return Err(Error::Data(format!("label {y} out of range for {c} classes")));
        }
        if mask.is_none_or(|m| m.selected[j]) {
            weights[y * plane + j] = 1.0;
        }
    }
    let wv = g.constant(Tensor::new(vec![c, h, w], weights)?);
    let logp = g.log_clamped(p)?;
    let picked = g.mul(logp, wv)?;
    let s = g.sum_all(picked)?;
    g.neg(s)
}

/// Normalized entropy of every pixel column, shape [H,W].
pub fn entropy_map(g: &mut Graph, p: Var) -> Result<Var> {
    let (c, _, _) = chw(g, p)?;
    if c < 2 {
        return Err(usage_err!("entropy needs at least two classes, got {c}"));
    }
    let plogp = p_log_p(g, p)?;
    let s = g.sum(plogp, &[0])?;
    g.scale(s, -1.0 / (c as f64).ln())
}

fn p_log_p(g: &mut Graph, p: Var) -> Result<Var> {
    let logp = g.log_clamped(p)?;
    g.mul(p, logp)
}

/// Sum of the selected entries of an [H,W] entropy map.
pub fn entropy_loss(g: &mut Graph, e: Var, mask: Option<&PixelMask>) -> Result<Var> {
    let s = g.value(e).shape().to_vec();
    if s.len() != 2 {
        return Err(shape_err!("entropy map must be [H,W], got {s:?}"));
    }
    match mask {
        None => g.sum_all(e),
        Some(m) => {
            m.check(s[0], s[1])?;
            let mv = g.constant(Tensor::new(
                s.clone(),
                m.selected.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
            )?);
            let masked = g.mul(e, mv)?;
            g.sum_all(masked)
        }
    }
}

/// `-P·log P` channel by channel.
pub fn self_info_map(g: &mut Graph, p: Var) -> Result<Var> {
    chw(g, p)?;
    let plogp = p_log_p(g, p)?;
    g.neg(plogp)
}

/// Mean binary cross-entropy of discriminator probabilities `d` against
/// the domain label (1 = source, 0 = target).
pub fn domain_bce(g: &mut Graph, d: Var, label: Domain) -> Result<Var> {
    let target_prob = match label {
        Domain::Source => d,
        Domain::Target => {
            let neg = g.neg(d)?;
            g.add_scalar(neg, 1.0)?
        }
    };
    let logp = g.log_clamped(target_prob)?;
    let m = g.mean_all(logp)?;
    g.neg(m)
}

/// `Σ_c max(0, μ·p_s(c) − mean_{h,w} P(c,h,w))`.
pub fn class_prior_loss(g: &mut Graph, p: Var, prior: &ClassPrior, mu: f64) -> Result<Var> {
    let (c, _, _) = chw(g, p)?;
    if !(0.0..=1.0).contains(&mu) {
        return Err(usage_err!("mu must lie in [0,1], got {mu}"));
    }
    if prior.num_classes() != c {
        return Err(shape_err!(
            "prior has {} classes, prediction has {c}",
            prior.num_classes()
        ));
    }
    let expected = g.reduce(crate::tensor::ReduceOp::Mean, p, &[1, 2])?;
    let target = g.constant(Tensor::new(
        vec![c],
        prior.probs().iter().map(|v| mu * v).collect(),
    )?);
    let gap = g.sub(target, expected)?;
    let hinge = g.max0(gap)?;
    g.sum_all(hinge)
}

/// Confident-pixel selection and argmax pseudo-labels for self-training.
pub fn pseudo_label_mask(p: &PredictionMap, threshold: f64) -> Result<(PixelMask, LabelMap)> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(usage_err!("threshold must lie in [0,1], got {threshold}"));
    }
    let labels = p.argmax();
    let selected = labels
        .ids()
        .iter()
        .enumerate()
        .map(|(j, &c)| p.at(c, j) >= threshold)
        .collect();
    Ok((PixelMask::new(p.height(), p.width(), selected)?, labels))
}

/// Number of pixels kept by an entropy-range mask over `total` pixels.
///
/// `ceil(fraction · total)`, computed with a small tolerance so that
/// products such as `0.3 · 10` do not round up past the exact count.
pub fn entropy_range_count(fraction: f64, total: usize) -> usize {
    let n = (fraction * total as f64 - 1e-9).ceil();
    (n.max(1.0) as usize).min(total)
}

/// Keeps the `ceil(fraction·H·W)` highest-entropy pixels; ties go to the
/// lower row-major index.
pub fn entropy_range_mask(e: &EntropyMap, top_fraction: f64) -> Result<PixelMask> {
    if !(top_fraction > 0.0 && top_fraction <= 1.0) {
        return Err(usage_err!("top_fraction must lie in (0,1], got {top_fraction}"));
    }
    let (h, w) = (e.values.shape()[0], e.values.shape()[1]);
    let vals = e.values.data();
    let n = entropy_range_count(top_fraction, vals.len());
    let mut order: Vec<usize> = (0..vals.len()).collect();
    order.sort_by(|&a, &b| vals[b].total_cmp(&vals[a]).then(a.cmp(&b)));
    let mut selected = vec![false; vals.len()];
    for &i in &order[..n] {
        selected[i] = true;
    }
    PixelMask::new(h, w, selected)
}

/// Sum of normalized box entropies over soft-detection maps [H_m,W_m,K_m,C].
pub fn box_entropy_loss(g: &mut Graph, maps: &[Var]) -> Result<Var> {
    if maps.is_empty() {
        return Err(usage_err!("box entropy needs at least one detection map"));
    }
    let mut total: Option<Var> = None;
    for &m in maps {
        let s = g.value(m).shape().to_vec();
        if s.len() != 4 {
            return Err(shape_err!("detection map must be [H,W,K,C], got {s:?}"));
        }
        let c = s[3];
        if c < 2 {
            return Err(usage_err!("box entropy needs at least two classes"));
        }
        for (b, col) in g.value(m).data().chunks(c).enumerate() {
            let sum: f64 = col.iter().sum();
            if (sum - 1.0).abs() > 1e-6 || col.iter().any(|v| *v < 0.0) {
                return Err(Error::Data(format!("box {b} distribution sums to {sum}")));
            }
        }
        let plogp = p_log_p(g, m)?;
        let per_box = g.sum(plogp, &[3])?;
        let scaled = g.scale(per_box, -1.0 / (c as f64).ln())?;
        let s = g.sum_all(scaled)?;
        total = Some(match total {
            None => s,
            Some(t) => g.add(t, s)?,
        });
    }
    Ok(total.expect("at least one map"))
}

/// Zero-pads lower-resolution self-information maps to the largest and
/// stacks them on the channel axis.
pub fn stack_selfinfo_multires(g: &mut Graph, maps: &[Var]) -> Result<Var> {
    g.pad_concat(maps)
}
