//! Tiny stride-1 segmentation networks.
//!
//! Each block is `conv3x3 → relu`; a 1×1 head maps the last block to class
//! scores. Features are read at `feature_tap` (post-activation) and, when a
//! projection is attached, mapped to the teacher's channel count by a 1×1
//! convolution.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Parameter, Tape};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    pub in_channels: usize,
    pub widths: Vec<usize>,
    pub num_classes: usize,
    pub feature_tap: usize,
}

impl NetConfig {
    pub fn new(widths: Vec<usize>, num_classes: usize) -> Self {
        let feature_tap = widths.len().saturating_sub(1);
        NetConfig {
            in_channels: 3,
            widths,
            num_classes,
            feature_tap,
        }
    }

    pub fn teacher_default(num_classes: usize) -> Self {
        NetConfig::new(vec![32, 64, 64], num_classes)
    }

    pub fn student_default(num_classes: usize) -> Self {
        NetConfig::new(vec![16, 32], num_classes)
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() {
            return Err(Error::Config("widths must be non-empty".into()));
        }
        if self.feature_tap >= self.widths.len() {
            return Err(Error::Config(format!(
                "feature_tap {} out of range for {} blocks",
                self.feature_tap,
                self.widths.len()
            )));
        }
        if self.in_channels == 0 || self.num_classes == 0 || self.widths.contains(&0) {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        Ok(())
    }

    /// Channels of the tapped feature map before any projection.
    pub fn feature_channels(&self) -> usize {
        self.widths[self.feature_tap]
    }
}

/// Features and score maps of a forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct NetOutputs {
    /// `[B, K, H, W]`
    pub features: Tensor,
    /// `[B, C, H, W]`
    pub scores: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct RecordedOutputs {
    pub features: NodeId,
    pub scores: NodeId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegNetwork {
    config: NetConfig,
    params: Vec<Parameter>,
    projection: Option<usize>,
}

fn kaiming(shape: &[usize], fan_in: usize, gain: f64, rng: &mut impl rand::Rng) -> Result<Tensor> {
    let std = (gain / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
    let n: usize = shape.iter().product();
    Tensor::from_dims(shape, (0..n).map(|_| normal.sample(rng)).collect())
}

impl SegNetwork {
    /// Seeded Kaiming fan-in initialization with zero biases.
    pub fn new(config: NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream(seed, "net-init", 0);
        let mut params = Vec::new();
        let mut cin = config.in_channels;
        for (i, &cout) in config.widths.iter().enumerate() {
            let w = kaiming(&[cout, cin, 3, 3], cin * 9, 2.0, &mut rng)?;
            params.push(Parameter::new(format!("block{i}.weight"), w));
            params.push(Parameter::new(format!("block{i}.bias"), Tensor::zeros(Shape::new([cout])?)));
            cin = cout;
        }
        let c = config.num_classes;
        params.push(Parameter::new("head.weight", kaiming(&[c, cin], cin, 1.0, &mut rng)?));
        params.push(Parameter::new("head.bias", Tensor::zeros(Shape::new([c])?)));
        Ok(SegNetwork {
            config,
            params,
            projection: None,
        })
    }

    /// Rebuilds a network from stored parameters (checkpoint load).
    pub fn from_parameters(config: NetConfig, params: Vec<Parameter>) -> Result<Self> {
        let template = SegNetwork::new(config.clone(), 0)?;
        let base = template.params.len();
        let projection = match params.len() {
            n if n == base => None,
            n if n == base + 2 => Some(base),
            n => {
                return Err(Error::Config(format!(
                    "expected {base} or {} parameters, found {n}",
                    base + 2
                )))
            }
        };
        for (p, t) in params.iter().zip(&template.params) {
            if p.name != t.name || p.value().shape() != t.value().shape() {
                return Err(Error::Config(format!(
                    "parameter {} {:?} does not match expected {} {:?}",
                    p.name,
                    p.value().dims(),
                    t.name,
                    t.value().dims()
                )));
            }
        }
        if let Some(i) = projection {
            let (w, b) = (&params[i], &params[i + 1]);
            let k = config.feature_channels();
            let ok = w.name == "proj.weight"
                && b.name == "proj.bias"
                && w.value().dims().len() == 2
                && w.value().dims()[1] == k
                && b.value().dims() == [w.value().dims()[0]];
            if !ok {
                return Err(Error::Config("malformed projection parameters".into()));
            }
        }
        Ok(SegNetwork {
            config,
            params,
            projection,
        })
    }

    /// Attaches a 1×1 projection from the tapped features to `channels`,
    /// initialized from its own random stream so the backbone weights are
    /// unaffected.
    pub fn with_projection(mut self, channels: usize, seed: u64) -> Result<Self> {
        if self.projection.is_some() {
            return Err(Error::Config("projection already attached".into()));
        }
        let k = self.config.feature_channels();
        let mut rng = rng::stream(seed, "projection-init", 0);
        self.projection = Some(self.params.len());
        self.params
            .push(Parameter::new("proj.weight", kaiming(&[channels, k], k, 1.0, &mut rng)?));
        self.params
            .push(Parameter::new("proj.bias", Tensor::zeros(Shape::new([channels])?)));
        Ok(self)
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn has_projection(&self) -> bool {
        self.projection.is_some()
    }

    /// Channels of the returned features (after projection if present).
    pub fn output_feature_channels(&self) -> usize {
        match self.projection {
            Some(i) => self.params[i].value().dims()[0],
            None => self.config.feature_channels(),
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.zero_grad();
        }
    }

    fn check_input(&self, batch: &Tensor) -> Result<()> {
        let d = batch.dims();
        if d.len() != 4 || d[1] != self.config.in_channels {
            return Err(Error::ShapeMismatch {
                expected: vec![d.first().copied().unwrap_or(1), self.config.in_channels, 0, 0],
                actual: d.to_vec(),
            });
        }
        Ok(())
    }

    /// Records a forward pass on `tape`. With `trainable` false the weights
    /// enter as constants and receive no gradient.
    pub fn record(&self, tape: &mut Tape, batch: &Tensor, trainable: bool) -> Result<RecordedOutputs> {
        self.check_input(batch)?;
        let leaf = |tape: &mut Tape, i: usize| {
            if trainable {
                tape.param(&self.params, i)
            } else {
                tape.constant(self.params[i].value().clone())
            }
        };
        let mut x = tape.constant(batch.clone());
        let mut tapped = None;
        for i in 0..self.config.widths.len() {
            let w = leaf(tape, 2 * i);
            let b = leaf(tape, 2 * i + 1);
            let y = tape.conv2d_3x3(x, w, b)?;
            x = tape.relu(y)?;
            if i == self.config.feature_tap {
                tapped = Some(x);
            }
        }
        let head = 2 * self.config.widths.len();
        let hw = leaf(tape, head);
        let hb = leaf(tape, head + 1);
        let scores = tape.conv2d_1x1(x, hw, hb)?;
        let mut features = tapped.expect("feature_tap validated");
        if let Some(p) = self.projection {
            let pw = leaf(tape, p);
            let pb = leaf(tape, p + 1);
            features = tape.conv2d_1x1(features, pw, pb)?;
        }
        Ok(RecordedOutputs { features, scores })
    }

    /// Inference-only forward pass.
    pub fn forward(&self, batch: &Tensor) -> Result<NetOutputs> {
        let mut tape = Tape::new();
        let out = self.record(&mut tape, batch, false)?;
        Ok(NetOutputs {
            features: tape.value(out.features).clone(),
            scores: tape.value(out.scores).clone(),
        })
    }

    /// Per-pixel argmax of the score maps, one label map per image.
    pub fn predict(&self, batch: &Tensor) -> Result<Vec<crate::tensor::LabelMap>> {
        let scores = self.forward(batch)?.scores;
        crate::losses::argmax_labels(&scores)
    }
}
