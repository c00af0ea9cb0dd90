//! Confusion matrices, IoU/mIoU, entropy statistics and ensembling.

use std::collections::BTreeSet;

use crate::data::{LabelMap, Scene};
use crate::error::{shape_err, usage_err, Error, Result};
use crate::losses::PredictionMap;
use crate::models::Segmenter;
use crate::tensor::Tensor;

/// `counts[g][p]`: pixels with ground truth `g` predicted as `p`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        ConfusionMatrix {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn from_counts(counts: Vec<Vec<u64>>) -> Result<Self> {
        let c = counts.len();
        if counts.iter().any(|r| r.len() != c) {
            return Err(shape_err!("confusion matrix must be square"));
        }
        Ok(ConfusionMatrix {
            num_classes: c,
            counts: counts.into_iter().flatten().collect(),
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.num_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn add_pair(&mut self, truth: usize, pred: usize) -> Result<()> {
        let c = self.num_classes;
        if truth >= c || pred >= c {
            return Err(Error::Data(format!("class pair ({truth},{pred}) outside {c} classes")));
        }
        self.counts[truth * c + pred] += 1;
        Ok(())
    }

    /// Adds the argmax predictions of one scene (ties go to the lowest id).
    pub fn accumulate(&mut self, p: &PredictionMap, y: &LabelMap) -> Result<()> {
        if p.num_classes() != self.num_classes {
            return Err(shape_err!(
                "prediction has {} classes, matrix has {}",
                p.num_classes(),
                self.num_classes
            ));
        }
        if (p.height(), p.width()) != (y.height(), y.width()) {
            return Err(shape_err!("prediction and labels differ in size"));
        }
        let pred = p.argmax();
        for (&t, &q) in y.ids().iter().zip(pred.ids()) {
            self.add_pair(t, q)?;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(shape_err!("cannot merge matrices of different size"));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// IoU per class, `None` where the denominator is zero.
    pub fn iou(&self) -> Vec<Option<f64>> {
        let c = self.num_classes;
        (0..c)
            .map(|k| {
                let tp = self.get(k, k);
                let row: u64 = (0..c).map(|j| self.get(k, j)).sum();
                let col: u64 = (0..c).map(|i| self.get(i, k)).sum();
                let denom = row + col - tp;
                (denom > 0).then(|| tp as f64 / denom as f64)
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MiouReport {
    pub per_class: Vec<Option<f64>>,
    /// Classes that entered the mean.
    pub evaluated: Vec<usize>,
    pub miou: f64,
}

/// Per-class IoU and their mean over `subset ∩ {classes with a non-zero
/// denominator}`.
pub fn miou(cm: &ConfusionMatrix, subset: Option<&[usize]>) -> Result<MiouReport> {
    let per_class = cm.iou();
    let wanted: BTreeSet<usize> = match subset {
        Some(s) => {
            if let Some(&bad) = s.iter().find(|&&c| c >= cm.num_classes) {
                return Err(usage_err!("class {bad} is outside the {} classes", cm.num_classes));
            }
            s.iter().copied().collect()
        }
        None => (0..cm.num_classes).collect(),
    };
    let evaluated: Vec<usize> = wanted
        .into_iter()
        .filter(|&c| per_class[c].is_some())
        .collect();
    if evaluated.is_empty() {
        return Err(Error::Eval("no class with a defined IoU in the requested set".into()));
    }
    let miou = evaluated.iter().map(|&c| per_class[c].unwrap()).sum::<f64>() / evaluated.len() as f64;
    Ok(MiouReport {
        per_class,
        evaluated,
        miou,
    })
}

impl MiouReport {
    /// `class_id,iou` lines for the evaluated classes, then `miou,<value>`.
    pub fn to_text(&self, config_hash: &str) -> String {
        let mut s = format!("# config_hash={config_hash}\nclass_id,iou\n");
        for &c in &self.evaluated {
            s.push_str(&format!("{c},{}\n", self.per_class[c].unwrap()));
        }
        s.push_str(&format!("miou,{}\n", self.miou));
        s
    }
}

/// Mean of the probability maps of several segmenters.
pub fn ensemble_predict(models: &[&Segmenter], x: &Tensor) -> Result<PredictionMap> {
    let first = models
        .first()
        .ok_or_else(|| usage_err!("ensemble needs at least one model"))?;
    let c = first.num_classes();
    if let Some(m) = models.iter().find(|m| m.num_classes() != c) {
        return Err(usage_err!(
            "ensemble members disagree on classes ({} vs {c})",
            m.num_classes()
        ));
    }
    if models.len() == 1 {
        return first.predict(x);
    }
    let mut sum: Option<Vec<f64>> = None;
    let mut shape = Vec::new();
    for m in models {
        let p = m.predict(x)?;
        shape = p.probs().shape().to_vec();
        match &mut sum {
            None => sum = Some(p.probs().data().to_vec()),
            Some(acc) => acc.iter_mut().zip(p.probs().data()).for_each(|(a, b)| *a += b),
        }
    }
    let k = models.len() as f64;
    let avg = sum.expect("non-empty").into_iter().map(|v| v / k).collect();
    PredictionMap::new(Tensor::new(shape, avg)?)
}

/// Number of evaluation workers from `ADVENT_LAB_THREADS` (default 1).
pub fn eval_threads() -> usize {
    std::env::var("ADVENT_LAB_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

/// Applies `f` to every scene on up to `threads` workers, keeping order.
fn map_scenes<T: Send>(
    scenes: &[Scene],
    threads: usize,
    f: impl Fn(&Scene) -> Result<T> + Sync,
) -> Result<Vec<T>> {
    if threads <= 1 || scenes.len() < 2 {
        return scenes.iter().map(&f).collect();
    }
    let chunk = scenes.len().div_ceil(threads);
    let parts: Vec<Result<Vec<T>>> = std::thread::scope(|s| {
        let handles: Vec<_> = scenes
            .chunks(chunk)
            .map(|c| s.spawn(|| c.iter().map(&f).collect::<Result<Vec<T>>>()))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("evaluation worker panicked"))
            .collect()
    });
    let mut out = Vec::with_capacity(scenes.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Confusion matrix of an ensemble (or a single model) over `scenes`.
pub fn confusion(models: &[&Segmenter], scenes: &[Scene], threads: usize) -> Result<ConfusionMatrix> {
    let c = models
        .first()
        .ok_or_else(|| usage_err!("evaluation needs at least one model"))?
        .num_classes();
    let per_scene = map_scenes(scenes, threads, |s| {
        let p = ensemble_predict(models, &s.image)?;
        let mut cm = ConfusionMatrix::new(c);
        cm.accumulate(&p, &s.labels)?;
        Ok(cm)
    })?;
    let mut total = ConfusionMatrix::new(c);
    for cm in &per_scene {
        total.merge(cm)?;
    }
    Ok(total)
}

pub fn evaluate(models: &[&Segmenter], scenes: &[Scene], subset: Option<&[usize]>) -> Result<MiouReport> {
    miou(&confusion(models, scenes, eval_threads())?, subset)
}

/// Mean normalized entropy over all scenes and pixels.
pub fn mean_entropy(model: &Segmenter, scenes: &[Scene]) -> Result<f64> {
    if scenes.is_empty() {
        return Err(usage_err!("mean entropy over an empty scene list"));
    }
    let means = map_scenes(scenes, eval_threads(), |s| {
        Ok(model.predict(&s.image)?.entropy_map()?.mean())
    })?;
    Ok(means.iter().sum::<f64>() / means.len() as f64)
}
