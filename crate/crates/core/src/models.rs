//! The segmenter F and the domain discriminator D, plus parameter
//! initialization and checkpoints.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::config::{parse_value, KvMap};
use crate::data::{load_tensor, save_tensor};
use crate::error::{shape_err, usage_err, Error, Result};
use crate::losses::PredictionMap;
use crate::nn::Conv2dParams;
use crate::rng::SplitMix64;
use crate::tensor::{Graph, Tensor, Var};

/// Negative slope of every leaky-ReLU in both networks.
pub const LEAKY_SLOPE: f64 = 0.2;
pub const MIN_SEGMENTER_INPUT: usize = 8;
pub const MIN_DISCRIMINATOR_INPUT: usize = 16;

const SEGMENTER_SALT: u64 = 0x5345_474D;
const DISCRIMINATOR_SALT: u64 = 0x4449_5343;

/// Shared access to the parameter tensors of a network.
pub trait Network {
    fn layers(&self) -> &[Conv2dParams];
    fn layers_mut(&mut self) -> &mut [Conv2dParams];

    fn params(&self) -> Vec<&Tensor> {
        self.layers()
            .iter()
            .flat_map(|l| [&l.weight, &l.bias])
            .collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers_mut()
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    fn param_names(&self) -> Vec<String> {
        (0..self.layers().len())
            .flat_map(|i| [format!("layer{i}.weight"), format!("layer{i}.bias")])
            .collect()
    }

    fn num_params(&self) -> usize {
        self.params().iter().map(|t| t.numel()).sum()
    }

    /// Binds every weight/bias as a graph leaf.
    fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<(Var, Var)> {
        self.layers()
            .iter()
            .map(|l| {
                let (w, b) = (l.weight.detach(), l.bias.detach());
                if trainable {
                    (g.param(w), g.param(b))
                } else {
                    (g.constant(w), g.constant(b))
                }
            })
            .collect()
    }

    /// SHA-256 over the raw bits of all parameters.
    fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for p in self.params() {
            for v in p.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Gradient of every parameter after `g.backward`, in `params()` order.
    fn collect_grads(&self, g: &Graph, bound: &[(Var, Var)]) -> Vec<Vec<f64>> {
        bound
            .iter()
            .flat_map(|&(w, b)| [w, b])
            .zip(self.params())
            .map(|(v, p)| {
                g.grad(v)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; p.numel()])
            })
            .collect()
    }
}

fn xavier_layer(
    rng: &mut SplitMix64,
    c_out: usize,
    c_in: usize,
    k: usize,
    stride: usize,
    padding: usize,
) -> Result<Conv2dParams> {
    let fan_in = (c_in * k * k) as f64;
    let fan_out = (c_out * k * k) as f64;
    let a = (6.0 / (fan_in + fan_out)).sqrt();
    let weight = Tensor::from_fn(&[c_out, c_in, k, k], |_| rng.uniform(-a, a))?;
    Conv2dParams::new(weight, Tensor::zeros(&[c_out])?, stride, padding)
}

fn check_layer_shapes(layers: &[Conv2dParams], expected: &[(usize, usize, usize)]) -> Result<()> {
    if layers.len() != expected.len() {
        return Err(shape_err!("expected {} layers, got {}", expected.len(), layers.len()));
    }
    for (i, (l, &(o, c, k))) in layers.iter().zip(expected).enumerate() {
        if (l.out_channels(), l.in_channels(), l.kernel()) != (o, c, k) {
            return Err(shape_err!(
                "layer {i}: expected [{o},{c},{k},{k}], got {:?}",
                l.weight.shape()
            ));
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegmenterConfig {
    pub in_channels: usize,
    /// Widths of the 3×3 hidden layers; a 1×1 classifier follows.
    pub hidden: Vec<usize>,
    pub num_classes: usize,
}

impl SegmenterConfig {
    pub fn new(num_classes: usize) -> Self {
        SegmenterConfig {
            in_channels: 3,
            hidden: vec![16, 32, 32],
            num_classes,
        }
    }

    fn layer_shapes(&self) -> Vec<(usize, usize, usize)> {
        let mut shapes = Vec::new();
        let mut c = self.in_channels;
        for &h in &self.hidden {
            shapes.push((h, c, 3));
            c = h;
        }
        shapes.push((self.num_classes, c, 1));
        shapes
    }
}

/// Fully-convolutional segmenter: 3×3 same-padded conv + leaky-ReLU
/// layers, then a 1×1 conv to C logits and a channel softmax.
#[derive(Clone, Debug, PartialEq)]
pub struct Segmenter {
    config: SegmenterConfig,
    layers: Vec<Conv2dParams>,
}

impl Network for Segmenter {
    fn layers(&self) -> &[Conv2dParams] {
        &self.layers
    }
    fn layers_mut(&mut self) -> &mut [Conv2dParams] {
        &mut self.layers
    }
}

impl Segmenter {
    pub fn init(config: SegmenterConfig, seed: u64) -> Result<Self> {
        if config.num_classes < 2 {
            return Err(usage_err!("segmenter needs at least two classes"));
        }
        let mut rng = SplitMix64::derived(seed, SEGMENTER_SALT);
        let layers = config
            .layer_shapes()
            .into_iter()
            .map(|(o, c, k)| xavier_layer(&mut rng, o, c, k, 1, k / 2))
            .collect::<Result<Vec<_>>>()?;
        Ok(Segmenter { config, layers })
    }

    pub fn zeros(config: SegmenterConfig) -> Result<Self> {
        let layers = config
            .layer_shapes()
            .into_iter()
            .map(|(o, c, k)| Conv2dParams::zeros(o, c, k, 1, k / 2))
            .collect::<Result<Vec<_>>>()?;
        Ok(Segmenter { config, layers })
    }

    pub fn from_layers(config: SegmenterConfig, layers: Vec<Conv2dParams>) -> Result<Self> {
        check_layer_shapes(&layers, &config.layer_shapes())?;
        Ok(Segmenter { config, layers })
    }

    pub fn config(&self) -> &SegmenterConfig {
        &self.config
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    /// Logits-to-probabilities forward pass on bound parameters; returns
    /// the [C,H,W] softmax node.
    pub fn forward(&self, g: &mut Graph, bound: &[(Var, Var)], x: Var) -> Result<Var> {
        let s = g.value(x).shape().to_vec();
        if s.len() != 3 || s[0] != self.config.in_channels {
            return Err(shape_err!(
                "segmenter expects [{},H,W], got {s:?}",
                self.config.in_channels
            ));
        }
        if s[1] < MIN_SEGMENTER_INPUT || s[2] < MIN_SEGMENTER_INPUT {
            return Err(shape_err!(
                "segmenter input {}x{} is below the {MIN_SEGMENTER_INPUT}x{MIN_SEGMENTER_INPUT} minimum",
                s[1],
                s[2]
            ));
        }
        let last = self.layers.len() - 1;
        let mut h = x;
        for (i, (layer, &(w, b))) in self.layers.iter().zip(bound).enumerate() {
            h = crate::nn::conv2d_var(g, h, w, b, layer)?;
            if i < last {
                h = g.leaky_relu(h, LEAKY_SLOPE)?;
            }
        }
        g.softmax_channel(h)
    }

    /// Value-only prediction for one image.
    pub fn predict(&self, image: &Tensor) -> Result<PredictionMap> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let x = g.constant(image.detach());
        let p = self.forward(&mut g, &bound, x)?;
        PredictionMap::new(g.take_value(p))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DiscriminatorConfig {
    pub in_channels: usize,
    pub base_width: usize,
}

impl DiscriminatorConfig {
    pub fn new(in_channels: usize) -> Self {
        DiscriminatorConfig {
            in_channels,
            base_width: 16,
        }
    }

    fn layer_shapes(&self) -> Vec<(usize, usize, usize)> {
        let mut shapes = Vec::new();
        let mut c = self.in_channels;
        for i in 0..4 {
            let w = self.base_width << i;
            shapes.push((w, c, 4));
            c = w;
        }
        shapes.push((1, c, 1));
        shapes
    }
}

/// Patch discriminator: four stride-2 4×4 convs with leaky-ReLU, a 1×1
/// classifier and a sigmoid. An H×W input yields a ⌊H/16⌋×⌊W/16⌋ grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator {
    config: DiscriminatorConfig,
    layers: Vec<Conv2dParams>,
}

impl Network for Discriminator {
    fn layers(&self) -> &[Conv2dParams] {
        &self.layers
    }
    fn layers_mut(&mut self) -> &mut [Conv2dParams] {
        &mut self.layers
    }
}

impl Discriminator {
    fn layer_geometry(k: usize) -> (usize, usize) {
        if k == 4 {
            (2, 1)
        } else {
            (1, 0)
        }
    }

    pub fn init(config: DiscriminatorConfig, seed: u64) -> Result<Self> {
        let mut rng = SplitMix64::derived(seed, DISCRIMINATOR_SALT);
        let layers = config
            .layer_shapes()
            .into_iter()
            .map(|(o, c, k)| {
                let (s, p) = Self::layer_geometry(k);
                xavier_layer(&mut rng, o, c, k, s, p)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Discriminator { config, layers })
    }

    pub fn from_layers(config: DiscriminatorConfig, layers: Vec<Conv2dParams>) -> Result<Self> {
        check_layer_shapes(&layers, &config.layer_shapes())?;
        Ok(Discriminator { config, layers })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.config
    }

    /// Output grid size for an input of `h`×`w`.
    pub fn output_size(h: usize, w: usize) -> (usize, usize) {
        ((((h / 2) / 2) / 2) / 2, (((w / 2) / 2) / 2) / 2)
    }

    /// Returns the [1,H',W'] grid of source probabilities.
    pub fn forward(&self, g: &mut Graph, bound: &[(Var, Var)], input: Var) -> Result<Var> {
        let s = g.value(input).shape().to_vec();
        if s.len() != 3 || s[0] != self.config.in_channels {
            return Err(shape_err!(
                "discriminator expects [{},H,W], got {s:?}",
                self.config.in_channels
            ));
        }
        if s[1] < MIN_DISCRIMINATOR_INPUT || s[2] < MIN_DISCRIMINATOR_INPUT {
            return Err(shape_err!(
                "discriminator input {}x{} is below the {MIN_DISCRIMINATOR_INPUT}x{MIN_DISCRIMINATOR_INPUT} minimum",
                s[1],
                s[2]
            ));
        }
        let last = self.layers.len() - 1;
        let mut h = input;
        for (i, (layer, &(w, b))) in self.layers.iter().zip(bound).enumerate() {
            h = crate::nn::conv2d_var(g, h, w, b, layer)?;
            if i < last {
                h = g.leaky_relu(h, LEAKY_SLOPE)?;
            }
        }
        g.sigmoid(h)
    }

    pub fn predict(&self, input: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let x = g.constant(input.detach());
        let d = self.forward(&mut g, &bound, x)?;
        Ok(g.take_value(d))
    }
}

// ---- checkpoints ---------------------------------------------------------

pub const MODEL_FILE: &str = "model.txt";

fn save_layers(dir: &Path, meta: KvMap, net: &impl Network) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (name, p) in net.param_names().iter().zip(net.params()) {
        save_tensor(&dir.join(format!("{name}.tnsr")), p)?;
    }
    let path = dir.join(MODEL_FILE);
    fs::write(&path, meta.to_text()).map_err(|e| Error::io(&path, e))
}

fn load_layers(dir: &Path, shapes: &[(usize, usize, usize)], geometry: impl Fn(usize) -> (usize, usize)) -> Result<Vec<Conv2dParams>> {
    shapes
        .iter()
        .enumerate()
        .map(|(i, &(_, _, k))| {
            let w = load_tensor(&dir.join(format!("layer{i}.weight.tnsr")))?;
            let b = load_tensor(&dir.join(format!("layer{i}.bias.tnsr")))?;
            let (s, p) = geometry(k);
            Conv2dParams::new(w, b, s, p).map_err(|e| Error::Format(e.to_string()))
        })
        .collect()
}

fn parse_widths(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .filter(|t| !t.is_empty())
        .map(|t| parse_value("hidden", t.trim()))
        .collect()
}

fn model_meta(dir: &Path, kind: &str) -> Result<KvMap> {
    let meta = KvMap::load(&dir.join(MODEL_FILE))?;
    if meta.get("kind") != Some(kind) {
        return Err(Error::Format(format!(
            "{} does not hold a {kind} checkpoint",
            dir.display()
        )));
    }
    Ok(meta)
}

fn required<'a>(meta: &'a KvMap, key: &str) -> Result<&'a str> {
    meta.get(key)
        .ok_or_else(|| Error::Format(format!("checkpoint is missing '{key}'")))
}

impl Segmenter {
    /// Writes `model.txt` plus one TNSR file per named parameter. Extra
    /// `meta` entries (such as the config hash) are stored alongside.
    pub fn save(&self, dir: &Path, extra: &KvMap) -> Result<()> {
        let mut meta = extra.clone();
        meta.insert("kind", "segmenter");
        meta.insert("in_channels", self.config.in_channels);
        meta.insert(
            "hidden",
            self.config
                .hidden
                .iter()
                .map(usize::to_string)
                .collect::<Vec<_>>()
                .join(","),
        );
        meta.insert("num_classes", self.config.num_classes);
        save_layers(dir, meta, self)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta = model_meta(dir, "segmenter")?;
        let config = SegmenterConfig {
            in_channels: parse_value("in_channels", required(&meta, "in_channels")?)?,
            hidden: parse_widths(required(&meta, "hidden")?)?,
            num_classes: parse_value("num_classes", required(&meta, "num_classes")?)?,
        };
        let layers = load_layers(dir, &config.layer_shapes(), |k| (1, k / 2))?;
        Segmenter::from_layers(config, layers).map_err(|e| Error::Format(e.to_string()))
    }
}

impl Discriminator {
    pub fn save(&self, dir: &Path, extra: &KvMap) -> Result<()> {
        let mut meta = extra.clone();
        meta.insert("kind", "discriminator");
        meta.insert("in_channels", self.config.in_channels);
        meta.insert("base_width", self.config.base_width);
        save_layers(dir, meta, self)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta = model_meta(dir, "discriminator")?;
        let config = DiscriminatorConfig {
            in_channels: parse_value("in_channels", required(&meta, "in_channels")?)?,
            base_width: parse_value("base_width", required(&meta, "base_width")?)?,
        };
        let layers = load_layers(dir, &config.layer_shapes(), Self::layer_geometry)?;
        Discriminator::from_layers(config, layers).map_err(|e| Error::Format(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::finite_diff_check;
    use crate::losses;

    fn fixed_input(h: usize, w: usize) -> Tensor {
        Tensor::from_fn(&[3, h, w], |i| ((i * 37 % 101) as f64) / 101.0).unwrap()
    }

    #[test]
    fn zero_segmenter_is_uniform() {
        let f = Segmenter::zeros(SegmenterConfig::new(5)).unwrap();
        let p = f.predict(&fixed_input(8, 8)).unwrap();
        assert!(p.probs().data().iter().all(|&v| (v - 0.2).abs() < 1e-15));
    }

    #[test]
    fn segmenter_output_is_distribution() {
        let f = Segmenter::init(SegmenterConfig::new(5), 0).unwrap();
        let p = f.predict(&fixed_input(16, 16)).unwrap();
        assert_eq!(p.probs().shape(), &[5, 16, 16]);
        for j in 0..256 {
            let s: f64 = (0..5).map(|c| p.at(c, j)).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn segmenter_rejects_small_input() {
        let f = Segmenter::init(SegmenterConfig::new(3), 0).unwrap();
        assert!(matches!(f.predict(&fixed_input(7, 12)), Err(Error::Shape(_))));
    }

    #[test]
    fn init_is_deterministic_and_seeded() {
        let a = Segmenter::init(SegmenterConfig::new(5), 4).unwrap();
        let b = Segmenter::init(SegmenterConfig::new(5), 4).unwrap();
        let c = Segmenter::init(SegmenterConfig::new(5), 5).unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_ne!(a.fingerprint(), c.fingerprint());
        let bound = (6.0f64 / (27.0 + 144.0)).sqrt();
        assert!(a.layers[0].weight.data().iter().all(|v| v.abs() <= bound));
        assert!(a.layers.iter().all(|l| l.bias.data().iter().all(|&b| b == 0.0)));
        let d1 = Discriminator::init(DiscriminatorConfig::new(5), 4).unwrap();
        let d2 = Discriminator::init(DiscriminatorConfig::new(5), 4).unwrap();
        assert_eq!(d1.fingerprint(), d2.fingerprint());
    }

    #[test]
    fn seed_zero_regression_anchor() {
        let f = Segmenter::init(SegmenterConfig::new(5), 0).unwrap();
        let p = f.predict(&fixed_input(16, 16)).unwrap();
        let weighted: f64 = p
            .probs()
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v * ((i % 7) as f64 + 1.0))
            .sum();
        assert!((weighted - SEED0_ANCHOR).abs() < 1e-9, "{weighted}");
    }

    // pinned from the first verified run
    const SEED0_ANCHOR: f64 = 1022.9672819056475;

    #[test]
    fn discriminator_shapes_and_range() {
        let d = Discriminator::init(DiscriminatorConfig::new(3), 1).unwrap();
        let input = Tensor::from_fn(&[3, 32, 32], |i| (i % 13) as f64 / 13.0).unwrap();
        let out = d.predict(&input).unwrap();
        assert_eq!(out.shape(), &[1, 2, 2]);
        assert!(out.data().iter().all(|&v| v > 0.0 && v < 1.0));
        assert_eq!(Discriminator::output_size(32, 32), (2, 2));
        assert_eq!(Discriminator::output_size(16, 48), (1, 3));
        for h in 16..40 {
            let x = Tensor::zeros(&[3, h, 17]).unwrap();
            let out = d.predict(&x).unwrap();
            let (oh, ow) = Discriminator::output_size(h, 17);
            assert_eq!(out.shape(), &[1, oh, ow]);
        }
        assert!(matches!(
            d.predict(&Tensor::zeros(&[3, 15, 32]).unwrap()),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn zero_classifier_gives_half() {
        let mut d = Discriminator::init(DiscriminatorConfig::new(3), 1).unwrap();
        let last = d.layers.len() - 1;
        d.layers[last] = Conv2dParams::zeros(1, 128, 1, 1, 0).unwrap();
        let out = d.predict(&Tensor::full(&[3, 32, 32], 0.3).unwrap()).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn weight_perturbation_follows_gradient_sign() {
        let f = Segmenter::init(SegmenterConfig::new(3), 2).unwrap();
        let x = fixed_input(8, 8);
        let y = crate::data::LabelMap::new(8, 8, (0..64).map(|i| i % 3).collect()).unwrap();
        let loss_of = |net: &Segmenter| -> (f64, Vec<Vec<f64>>) {
            let mut g = Graph::new();
            let bound = net.bind(&mut g, true);
            let xv = g.constant(x.clone());
            let p = net.forward(&mut g, &bound, xv).unwrap();
            let l = losses::seg_cross_entropy(&mut g, p, &y, None).unwrap();
            g.backward(l).unwrap();
            (g.value(l).item().unwrap(), net.collect_grads(&g, &bound))
        };
        let (base, grads) = loss_of(&f);
        let grad = grads[0][0];
        let mut moved = f.clone();
        moved.params_mut()[0].data_mut()[0] -= 1e-4 * grad.signum();
        let (after, _) = loss_of(&moved);
        assert!(after < base);
    }

    #[test]
    fn end_to_end_gradient_through_self_information() {
        let f = Segmenter::init(
            SegmenterConfig {
                in_channels: 3,
                hidden: vec![3],
                num_classes: 3,
            },
            3,
        )
        .unwrap();
        let d = Discriminator::init(
            DiscriminatorConfig {
                in_channels: 3,
                base_width: 2,
            },
            3,
        )
        .unwrap();
        let x = fixed_input(16, 16);
        let params: Vec<Tensor> = f.params().into_iter().cloned().collect();
        let n_seg = params.len();
        let report = finite_diff_check(
            |g, vars| {
                let bound: Vec<(Var, Var)> = vars[..n_seg].chunks(2).map(|c| (c[0], c[1])).collect();
                let dbound = d.bind(g, false);
                let xv = g.constant(x.clone());
                let p = f.forward(g, &bound, xv)?;
                let i = losses::self_info_map(g, p)?;
                let out = d.forward(g, &dbound, i)?;
                losses::domain_bce(g, out, crate::data::Domain::Source)
            },
            &params,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let f = Segmenter::init(SegmenterConfig::new(4), 9).unwrap();
        f.save(&dir.path().join("seg"), &KvMap::default()).unwrap();
        let back = Segmenter::load(&dir.path().join("seg")).unwrap();
        assert_eq!(back, f);
        let d = Discriminator::init(DiscriminatorConfig::new(4), 9).unwrap();
        d.save(&dir.path().join("disc"), &KvMap::default()).unwrap();
        assert_eq!(Discriminator::load(&dir.path().join("disc")).unwrap(), d);
        assert!(matches!(
            Segmenter::load(&dir.path().join("disc")),
            Err(Error::Format(_))
        ));
    }
}
