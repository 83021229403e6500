//! Plain fully-convolutional per-pixel classifier.
//!
//! `conv → relu` for each hidden width, then a final `conv` to `C` logits.
//! All convolutions keep the spatial size. The same type serves as the
//! `K+1`-class teacher and the `K+2`-class student.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{self, AutodiffError, Graph, Tensor, Var};
use crate::losses::ProbMap;
use crate::rng;

pub const MAGIC: &[u8; 4] = b"USEG";
pub const FORMAT_VERSION: u32 = 1;

/// New output rows are drawn like any other layer, then scaled by this.
pub const NEW_ROW_SCALE: f64 = 0.1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("bad magic bytes {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported weight file version {0}")]
    Version(u32),
    #[error("weight file truncated: needed {needed} bytes, found {found}")]
    Truncated { needed: usize, found: usize },
    #[error("weight file inconsistent: {0}")]
    Inconsistent(String),
    #[error("model is frozen")]
    Frozen,
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegModelConfig {
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "default_kernel")]
    pub kernel: usize,
    pub classes: usize,
}

fn default_in_channels() -> usize {
    1
}

fn default_hidden() -> Vec<usize> {
    vec![8, 16]
}

fn default_kernel() -> usize {
    3
}

impl SegModelConfig {
    pub fn new(classes: usize) -> Self {
        SegModelConfig { in_channels: 1, hidden: default_hidden(), kernel: 3, classes }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.in_channels != 1 {
            return Err(ModelError::Config(format!("in_channels must be 1, got {}", self.in_channels)));
        }
        if self.classes < 2 {
            return Err(ModelError::Config(format!("need at least 2 classes, got {}", self.classes)));
        }
        if self.hidden.contains(&0) {
            return Err(ModelError::Config(format!("hidden widths must be positive: {:?}", self.hidden)));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(ModelError::Config(format!("kernel size {} must be odd", self.kernel)));
        }
        Ok(())
    }

    /// `(cin, cout)` of every layer, in order.
    pub fn layer_channels(&self) -> Vec<(usize, usize)> {
        let mut widths = vec![self.in_channels];
        widths.extend(&self.hidden);
        widths.push(self.classes);
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn param_count(&self) -> usize {
        let k2 = self.kernel * self.kernel;
        self.layer_channels().iter().map(|&(ci, co)| co * ci * k2 + co).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub kernel: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegModel {
    config: SegModelConfig,
    layers: Vec<ConvLayer>,
    frozen: bool,
}

/// Xavier-uniform kernel `[cout, cin, k, k]`.
fn xavier(cin: usize, cout: usize, k: usize, rng: &mut rng::Rng) -> Vec<f64> {
    let fan_in = (cin * k * k) as f64;
    let fan_out = (cout * k * k) as f64;
    let a = (6.0 / (fan_in + fan_out)).sqrt();
    (0..cout * cin * k * k).map(|_| rng.gen_range(-a..a)).collect()
}

impl SegModel {
    pub fn init_random(config: SegModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = rng::stream(seed, &[0x5E6_0001]);
        let k = config.kernel;
        let layers = config
            .layer_channels()
            .into_iter()
            .map(|(cin, cout)| ConvLayer {
                kernel: Tensor::from_parts(vec![cout, cin, k, k], xavier(cin, cout, k, &mut rng)),
                bias: Tensor::zeros(&[cout]),
            })
            .collect();
        Ok(SegModel { config, layers, frozen: false })
    }

    pub fn from_layers(config: SegModelConfig, layers: Vec<ConvLayer>) -> Result<Self, ModelError> {
        config.validate()?;
        let chans = config.layer_channels();
        if chans.len() != layers.len() {
            return Err(ModelError::Inconsistent(format!("{} layers for config {:?}", layers.len(), config)));
        }
        let k = config.kernel;
        for (i, ((cin, cout), l)) in chans.iter().zip(&layers).enumerate() {
            if l.kernel.shape() != [*cout, *cin, k, k] || l.bias.shape() != [*cout] {
                return Err(ModelError::Inconsistent(format!(
                    "layer {i}: kernel {:?} bias {:?}",
                    l.kernel.shape(),
                    l.bias.shape()
                )));
            }
        }
        Ok(SegModel { config, layers, frozen: false })
    }

    pub fn config(&self) -> &SegModelConfig {
        &self.config
    }

    pub fn classes(&self) -> usize {
        self.config.classes
    }

    pub fn layers(&self) -> &[ConvLayer] {
        &self.layers
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn param_count(&self) -> usize {
        self.config.param_count()
    }

    /// Parameters in storage order: kernel then bias, layer by layer.
    pub fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| [&l.kernel, &l.bias]).collect()
    }

    /// Mutable parameters; refuses on a frozen model.
    pub fn params_mut(&mut self) -> Result<Vec<&mut Tensor>, ModelError> {
        if self.frozen {
            return Err(ModelError::Frozen);
        }
        Ok(self.layers.iter_mut().flat_map(|l| [&mut l.kernel, &mut l.bias]).collect())
    }

    fn check_image(&self, image: &Tensor) -> Result<(usize, usize), ModelError> {
        let (c, h, w) = image.dims3("forward")?;
        if c != self.config.in_channels {
            return Err(ModelError::Autodiff(AutodiffError::shape(
                "forward",
                format!("model expects {} input channels, image has {c}", self.config.in_channels),
            )));
        }
        Ok((h, w))
    }

    /// Logits `[C, H, W]` without recording a graph.
    pub fn forward(&self, image: &Tensor) -> Result<Tensor, ModelError> {
        let (h, w) = self.check_image(image)?;
        let last = self.layers.len() - 1;
        let mut x = image.data().to_vec();
        let mut cin = self.config.in_channels;
        for (i, layer) in self.layers.iter().enumerate() {
            let cout = layer.bias.len();
            let dims = autodiff::kernels::ConvDims { cin, cout, h, w, k: self.config.kernel };
            x = autodiff::kernels::conv2d_forward(dims, &x, layer.kernel.data(), layer.bias.data());
            if i < last {
                x = autodiff::kernels::relu_forward(&x);
            }
            cin = cout;
        }
        let out = Tensor::new(vec![cin, h, w], x)?;
        Ok(out)
    }

    pub fn predict_probs(&self, image: &Tensor) -> Result<ProbMap, ModelError> {
        Ok(ProbMap::from_logits(&self.forward(image)?)?)
    }

    /// Per-pixel argmax class.
    pub fn predict_labels(&self, image: &Tensor) -> Result<Vec<usize>, ModelError> {
        Ok(self.predict_probs(image)?.argmax())
    }

    /// Insert parameters as trainable graph leaves, in [`SegModel::params`] order.
    pub fn register(&self, g: &mut Graph) -> Vec<Var> {
        self.params().into_iter().map(|t| g.param(t.clone())).collect()
    }

    /// Recorded forward pass using previously registered parameters.
    pub fn forward_graph(&self, g: &mut Graph, params: &[Var], image: Var) -> Result<Var, ModelError> {
        self.check_image(g.value(image))?;
        assert_eq!(params.len(), 2 * self.layers.len(), "parameter handles do not match model");
        let last = self.layers.len() - 1;
        let mut x = image;
        for (i, pair) in params.chunks(2).enumerate() {
            x = g.conv2d(x, pair[0], pair[1])?;
            if i < last {
                x = g.relu(x)?;
            }
        }
        Ok(x)
    }

    /// Student for `new_classes` extra outputs, warm-started from this model.
    ///
    /// Hidden layers and old output rows are copied. New output rows are
    /// Xavier-drawn and scaled by [`NEW_ROW_SCALE`], with zero bias. The
    /// result is never frozen.
    pub fn extend_for_increment(&self, new_classes: usize, seed: u64) -> Result<SegModel, ModelError> {
        let mut config = self.config.clone();
        config.classes += new_classes;
        let mut layers = self.layers.clone();
        if new_classes > 0 {
            let k = config.kernel;
            let last = layers.last_mut().expect("model has at least one layer");
            let cin = last.kernel.shape()[1];
            let mut rng = rng::stream(seed, &[0x5E6_0002]);
            let fresh: Vec<f64> = xavier(cin, config.classes, k, &mut rng)
                .into_iter()
                .take(new_classes * cin * k * k)
                .map(|v| v * NEW_ROW_SCALE)
                .collect();
            let mut kernel = last.kernel.data().to_vec();
            kernel.extend(fresh);
            let mut bias = last.bias.data().to_vec();
            bias.extend(std::iter::repeat_n(0.0, new_classes));
            last.kernel = Tensor::new(vec![config.classes, cin, k, k], kernel)?;
            last.bias = Tensor::new(vec![config.classes], bias)?;
        }
        SegModel::from_layers(config, layers)
    }

    /// Serialize to the `USEG` weight format.
    pub fn to_bytes(&self) -> Vec<u8> {
        let c = &self.config;
        let mut out = Vec::with_capacity(32 + 8 * self.param_count());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(c.hidden.len() as u32).to_le_bytes());
        for &w in &c.hidden {
            out.extend_from_slice(&(w as u32).to_le_bytes());
        }
        out.extend_from_slice(&(c.kernel as u32).to_le_bytes());
        out.extend_from_slice(&(c.classes as u32).to_le_bytes());
        for t in self.params() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4)?.try_into().unwrap();
        if &magic != MAGIC {
            return Err(ModelError::BadMagic(magic));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(ModelError::Version(version));
        }
        let n_hidden = r.u32()? as usize;
        if n_hidden > 64 {
            return Err(ModelError::Inconsistent(format!("{n_hidden} hidden layers")));
        }
        let hidden = (0..n_hidden).map(|_| r.u32().map(|v| v as usize)).collect::<Result<Vec<_>, _>>()?;
        let kernel = r.u32()? as usize;
        let classes = r.u32()? as usize;
        let config = SegModelConfig { in_channels: 1, hidden, kernel, classes };
        config.validate().map_err(|e| ModelError::Inconsistent(e.to_string()))?;
        let needed = r.pos + 8 * config.param_count();
        if bytes.len() < needed {
            return Err(ModelError::Truncated { needed, found: bytes.len() });
        }
        if bytes.len() > needed {
            return Err(ModelError::Inconsistent(format!("{} trailing bytes", bytes.len() - needed)));
        }
        let k = config.kernel;
        let mut layers = Vec::new();
        for (cin, cout) in config.layer_channels() {
            let kernel = r.tensor(vec![cout, cin, k, k])?;
            let bias = r.tensor(vec![cout])?;
            layers.push(ConvLayer { kernel, bias });
        }
        SegModel::from_layers(config, layers)
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let io = |source| ModelError::Io { path: path.display().to_string(), source };
        let mut f = fs::File::create(path).map_err(io)?;
        f.write_all(&self.to_bytes()).map_err(io)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let bytes = fs::read(path).map_err(|source| ModelError::Io { path: path.display().to_string(), source })?;
        SegModel::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], ModelError> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(ModelError::Truncated { needed: end, found: self.bytes.len() });
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn tensor(&mut self, shape: Vec<usize>) -> Result<Tensor, ModelError> {
        let n: usize = shape.iter().product();
        let data = self.take(8 * n)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        Ok(Tensor::new(shape, data)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(h: usize, w: usize, seed: u64) -> Tensor {
        let mut r = rng::stream(seed, &[]);
        Tensor::new(vec![1, h, w], (0..h * w).map(|_| r.gen_range(0.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn init_is_deterministic_with_zero_bias() {
        let a = SegModel::init_random(SegModelConfig::new(3), 11).unwrap();
        let b = SegModel::init_random(SegModelConfig::new(3), 11).unwrap();
        let c = SegModel::init_random(SegModelConfig::new(3), 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.layers().iter().all(|l| l.bias.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn zero_image_gives_uniform_softmax() {
        let m = SegModel::init_random(SegModelConfig::new(4), 3).unwrap();
        let p = m.predict_probs(&Tensor::zeros(&[1, 5, 7])).unwrap();
        assert!(p.tensor().data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn config_validation() {
        let mut c = SegModelConfig::new(1);
        assert!(c.validate().is_err());
        c.classes = 2;
        c.kernel = 4;
        assert!(c.validate().is_err());
        c.kernel = 3;
        c.hidden = vec![4, 0];
        assert!(c.validate().is_err());
    }

    #[test]
    fn single_layer_is_plain_conv() {
        let cfg = SegModelConfig { in_channels: 1, hidden: vec![], kernel: 3, classes: 2 };
        let m = SegModel::init_random(cfg, 5).unwrap();
        let img = image(6, 4, 1);
        let mut g = Graph::new();
        let x = g.leaf(img.clone());
        let l = &m.layers()[0];
        let k = g.leaf(l.kernel.clone());
        let b = g.leaf(l.bias.clone());
        let y = g.conv2d(x, k, b).unwrap();
        assert_eq!(g.value(y), &m.forward(&img).unwrap());
    }

    #[test]
    fn forward_shapes_and_determinism() {
        let m = SegModel::init_random(SegModelConfig::new(3), 9).unwrap();
        for (h, w) in [(1, 1), (1, 5), (4, 3), (9, 9)] {
            let img = image(h, w, 2);
            let a = m.forward(&img).unwrap();
            assert_eq!(a.shape(), &[3, h, w]);
            assert_eq!(a, m.forward(&img).unwrap());
        }
        assert!(m.forward(&Tensor::zeros(&[2, 3, 3])).is_err());
    }

    #[test]
    fn graph_forward_matches_inference() {
        let m = SegModel::init_random(SegModelConfig::new(3), 21).unwrap();
        let img = image(8, 8, 4);
        let mut g = Graph::new();
        let ps = m.register(&mut g);
        let x = g.leaf(img.clone());
        let y = m.forward_graph(&mut g, &ps, x).unwrap();
        assert_eq!(g.value(y), &m.forward(&img).unwrap());
    }

    #[test]
    fn extension_copies_and_grows() {
        let mut teacher = SegModel::init_random(SegModelConfig::new(3), 1).unwrap();
        teacher.freeze();
        let before = teacher.to_bytes();
        let same = teacher.extend_for_increment(0, 7).unwrap();
        let img = image(6, 6, 3);
        assert_eq!(same.forward(&img).unwrap(), teacher.forward(&img).unwrap());
        assert!(!same.is_frozen());

        let student = teacher.extend_for_increment(2, 7).unwrap();
        assert_eq!(student.classes(), 5);
        assert_eq!(student.param_count() - teacher.param_count(), (16 * 3 * 3 + 1) * 2);
        assert_eq!(teacher.to_bytes(), before);
        let (t, s) = (teacher.forward(&img).unwrap(), student.forward(&img).unwrap());
        // old logits are copied exactly
        assert_eq!(&s.data()[..t.len()], t.data());
    }

    #[test]
    fn frozen_params_are_locked() {
        let mut m = SegModel::init_random(SegModelConfig::new(2), 1).unwrap();
        assert!(m.params_mut().is_ok());
        m.freeze();
        assert!(matches!(m.params_mut(), Err(ModelError::Frozen)));
    }

    #[test]
    fn weight_file_round_trip_and_errors() {
        let m = SegModel::init_random(SegModelConfig::new(4), 8).unwrap();
        let bytes = m.to_bytes();
        let back = SegModel::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        let img = image(5, 5, 0);
        assert_eq!(back.forward(&img).unwrap(), m.forward(&img).unwrap());

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(SegModel::from_bytes(&bad), Err(ModelError::BadMagic(_))));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(SegModel::from_bytes(&bad), Err(ModelError::Version(9))));
        let cut = &bytes[..bytes.len() - 100];
        assert!(matches!(SegModel::from_bytes(cut), Err(ModelError::Truncated { .. })));
        assert!(matches!(SegModel::from_bytes(&bytes[..6]), Err(ModelError::Truncated { .. })));
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(SegModel::from_bytes(&long), Err(ModelError::Inconsistent(_))));
    }

    #[test]
    fn header_layout() {
        let m = SegModel::init_random(SegModelConfig::new(3), 0).unwrap();
        let b = m.to_bytes();
        assert_eq!(&b[..4], b"USEG");
        let words: Vec<u32> = b[4..28].chunks(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect();
        assert_eq!(words, vec![1, 2, 8, 16, 3, 3]);
        assert_eq!(b.len(), 28 + 8 * m.param_count());
        let first = f64::from_le_bytes(b[28..36].try_into().unwrap());
        assert_eq!(first, m.layers()[0].kernel.data()[0]);
    }
}
