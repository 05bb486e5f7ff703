use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{softmax_with_temperature, LabelVector, ProbabilityVector, PROB_FLOOR};
use crate::autodiff::{ConvShape, GradientBundle, Graph, NodeId, Op};
use crate::error::{Error, Result};

/// Named reference architectures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    /// Thirteen convolutional layers for full-length (9000-sample) records.
    Cnn13,
    /// Three convolutional layers sized for fast CPU training.
    Desk,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Cnn13 => "cnn13",
            ModelKind::Desk => "desk",
        }
    }

    pub fn layers(self, classes: usize) -> Vec<LayerDesc> {
        use LayerDesc::*;
        match self {
            ModelKind::Cnn13 => {
                let widths = [16, 16, 16, 16, 32, 32, 32, 32, 64, 64, 64, 64, 64];
                let mut layers = Vec::new();
                for (i, &w) in widths.iter().enumerate() {
                    layers.push(Conv {
                        out_channels: w,
                        kernel: 7,
                        stride: 1,
                        padding: 3,
                    });
                    layers.push(Relu);
                    if i % 2 == 1 {
                        layers.push(MaxPool { size: 2 });
                    }
                }
                layers.push(GlobalAvgPool);
                layers.push(Dense { outputs: classes });
                layers
            }
            ModelKind::Desk => vec![
                Conv {
                    out_channels: 8,
                    kernel: 7,
                    stride: 1,
                    padding: 3,
                },
                Relu,
                MaxPool { size: 4 },
                Conv {
                    out_channels: 16,
                    kernel: 5,
                    stride: 1,
                    padding: 2,
                },
                Relu,
                MaxPool { size: 4 },
                Conv {
                    out_channels: 16,
                    kernel: 3,
                    stride: 1,
                    padding: 1,
                },
                Relu,
                MaxPool { size: 2 },
                GlobalAvgPool,
                Dense { outputs: classes },
            ],
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cnn13" => Ok(ModelKind::Cnn13),
            "desk" => Ok(ModelKind::Desk),
            other => Err(Error::InvalidArgument(format!("unknown model spec '{other}' (expected cnn13 or desk)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerDesc {
    Conv {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Relu,
    MaxPool {
        size: usize,
    },
    GlobalAvgPool,
    Dense {
        outputs: usize,
    },
}

/// A layer stack with its parameters and the softmax temperature used in training.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierModel {
    pub(super) kind: ModelKind,
    pub(super) seed: u64,
    pub(super) input_len: usize,
    pub(super) classes: usize,
    pub(super) temperature: f64,
    pub(super) layers: Vec<LayerDesc>,
    pub(super) param_names: Vec<String>,
    pub(super) params: Vec<Vec<f64>>,
}

/// Shape bookkeeping while walking the layer list.
struct Walk {
    channels: usize,
    len: usize,
    flat: bool,
}

/// Parameter shapes implied by a layer list, with fan-in for initialization.
fn param_layout(layers: &[LayerDesc], input_len: usize) -> Result<Vec<(String, usize, usize)>> {
    let mut w = Walk {
        channels: 1,
        len: input_len,
        flat: false,
    };
    let mut out = Vec::new();
    for (i, layer) in layers.iter().enumerate() {
        match *layer {
            LayerDesc::Conv {
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                if w.flat {
                    return Err(Error::InvalidArgument(format!("layer {i}: convolution after flattening")));
                }
                let shape = ConvShape {
                    in_channels: w.channels,
                    out_channels,
                    kernel,
                    stride,
                    padding,
                };
                let len = shape
                    .output_len(w.len)
                    .ok_or_else(|| Error::InvalidArgument(format!("layer {i}: input length {} too short", w.len)))?;
                out.push((format!("conv{i}.weight"), shape.weight_len(), w.channels * kernel));
                out.push((format!("conv{i}.bias"), out_channels, 0));
                w.channels = out_channels;
                w.len = len;
            }
            LayerDesc::Relu => {}
            LayerDesc::MaxPool { size } => {
                if size == 0 || w.len < size {
                    return Err(Error::InvalidArgument(format!("layer {i}: cannot pool length {} by {size}", w.len)));
                }
                w.len /= size;
            }
            LayerDesc::GlobalAvgPool => {
                w.len = 1;
                w.flat = true;
            }
            LayerDesc::Dense { outputs } => {
                let inputs = w.channels * w.len;
                out.push((format!("dense{i}.weight"), outputs * inputs, inputs));
                out.push((format!("dense{i}.bias"), outputs, 0));
                w.channels = outputs;
                w.len = 1;
                w.flat = true;
            }
        }
    }
    Ok(out)
}

/// Builds a named architecture with deterministic He-uniform initialization.
pub fn build_model(spec: &str, input_len: usize, classes: usize, seed: u64) -> Result<ClassifierModel> {
    let kind: ModelKind = spec.parse()?;
    ClassifierModel::from_layers(kind, kind.layers(classes), input_len, classes, seed)
}

impl ClassifierModel {
    pub fn from_layers(
        kind: ModelKind,
        layers: Vec<LayerDesc>,
        input_len: usize,
        classes: usize,
        seed: u64,
    ) -> Result<Self> {
        if classes < 2 {
            return Err(Error::InvalidArgument(format!("need at least 2 classes, got {classes}")));
        }
        match layers.last() {
            Some(LayerDesc::Dense { outputs }) if *outputs == classes => {}
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "last layer must be dense with {classes} outputs"
                )))
            }
        }
        let layout = param_layout(&layers, input_len)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut names = Vec::with_capacity(layout.len());
        let mut params = Vec::with_capacity(layout.len());
        for (name, len, fan_in) in layout {
            let values = if fan_in == 0 {
                vec![0.0; len]
            } else {
                let bound = (6.0 / fan_in as f64).sqrt();
                (0..len).map(|_| rng.random_range(-bound..bound)).collect()
            };
            names.push(name);
            params.push(values);
        }
        Ok(Self {
            kind,
            seed,
            input_len,
            classes,
            temperature: 1.0,
            layers,
            param_names: names,
            params,
        })
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn input_len(&self) -> usize {
        self.input_len
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn layers(&self) -> &[LayerDesc] {
        &self.layers
    }

    /// Softmax temperature the model was (or is being) trained at.
    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn set_temperature(&mut self, t: f64) -> Result<()> {
        if !(t > 0.0) {
            return Err(Error::InvalidArgument(format!("temperature must be > 0, got {t}")));
        }
        self.temperature = t;
        Ok(())
    }

    pub fn param_names(&self) -> &[String] {
        &self.param_names
    }

    pub fn params(&self) -> &[Vec<f64>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.params
    }

    pub fn param_lens(&self) -> Vec<usize> {
        self.params.iter().map(Vec::len).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(Vec::len).sum()
    }

    pub fn conv_layer_count(&self) -> usize {
        self.layers.iter().filter(|l| matches!(l, LayerDesc::Conv { .. })).count()
    }

    /// An empty graph whose parameter slots match this model.
    pub fn graph(&self) -> Graph {
        Graph::new(self.param_lens())
    }

    /// Parameter leaf nodes, to be shared by every application of the model in `g`.
    pub fn param_nodes(&self, g: &mut Graph) -> Vec<NodeId> {
        (0..self.params.len()).map(|i| g.param(i)).collect()
    }

    /// Appends the layer stack applied to `x`; returns the logits node.
    pub fn add_logits(&self, g: &mut Graph, x: NodeId, params: &[NodeId]) -> Result<NodeId> {
        let mut cur = x;
        let mut channels = 1;
        let mut p = params.iter();
        let mut next = || {
            p.next()
                .copied()
                .ok_or_else(|| Error::Shape("graph has fewer parameter nodes than the model".into()))
        };
        for layer in &self.layers {
            cur = match *layer {
                LayerDesc::Conv {
                    out_channels,
                    kernel,
                    stride,
                    padding,
                } => {
                    let weight = next()?;
                    let bias = next()?;
                    let shape = ConvShape {
                        in_channels: channels,
                        out_channels,
                        kernel,
                        stride,
                        padding,
                    };
                    channels = out_channels;
                    g.op(Op::Conv1d {
                        x: cur,
                        weight,
                        bias: Some(bias),
                        shape,
                    })?
                }
                LayerDesc::Relu => g.op(Op::Relu(cur))?,
                LayerDesc::MaxPool { size } => g.op(Op::MaxPool { x: cur, channels, size })?,
                LayerDesc::GlobalAvgPool => g.op(Op::GlobalAvgPool { x: cur, channels })?,
                LayerDesc::Dense { outputs } => {
                    let weight = next()?;
                    let bias = next()?;
                    channels = outputs;
                    g.op(Op::Affine {
                        x: cur,
                        weight,
                        bias,
                        outputs,
                    })?
                }
            };
        }
        Ok(cur)
    }

    /// Appends the per-sample loss against `target` at temperature `t`:
    /// `-ln F_l` for hard labels, `-sum_i Y_i ln F_i` for soft labels.
    pub fn add_loss(&self, g: &mut Graph, logits: NodeId, target: &LabelVector, t: f64) -> Result<NodeId> {
        let f = g.op(Op::SoftmaxT { x: logits, temperature: t })?;
        let lf = g.op(Op::Log { x: f, floor: PROB_FLOOR })?;
        match target {
            LabelVector::Hard(l) => {
                if *l >= self.classes {
                    return Err(Error::InvalidArgument(format!("label {l} out of range")));
                }
                let pick = g.op(Op::Index { x: lf, index: *l })?;
                g.op(Op::Scale(pick, -1.0))
            }
            LabelVector::Soft(y) => {
                if y.len() != self.classes {
                    return Err(Error::Shape(format!("soft label width {} != {}", y.len(), self.classes)));
                }
                let w: Vec<f64> = y.iter().map(|v| -v).collect();
                g.op(Op::DotConst {
                    x: lf,
                    weights: Arc::new(w),
                })
            }
        }
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_len {
            return Err(Error::Shape(format!(
                "signal length {} does not match model input length {}",
                x.len(),
                self.input_len
            )));
        }
        Ok(())
    }

    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let mut g = self.graph();
        let xi = g.input("x", self.input_len);
        let pn = self.param_nodes(&mut g);
        let z = self.add_logits(&mut g, xi, &pn)?;
        let trace = g.forward(&self.params, &[x])?;
        Ok(trace.value(z).to_vec())
    }

    pub fn probabilities(&self, x: &[f64], t: f64) -> Result<ProbabilityVector> {
        softmax_with_temperature(&self.logits(x)?, t)
    }

    /// Class with the highest probability at `t_eval`; ties go to the lowest index.
    pub fn predict(&self, x: &[f64], t_eval: f64) -> Result<(usize, ProbabilityVector)> {
        let p = self.probabilities(x, t_eval)?;
        Ok((p.argmax(), p))
    }

    pub fn predict_batch<S: AsRef<[f64]> + Sync>(&self, xs: &[S], t_eval: f64) -> Result<Vec<(usize, ProbabilityVector)>> {
        xs.par_iter().map(|x| self.predict(x.as_ref(), t_eval)).collect()
    }

    pub fn predict_classes<S: AsRef<[f64]> + Sync>(&self, xs: &[S], t_eval: f64) -> Result<Vec<usize>> {
        xs.par_iter().map(|x| self.predict(x.as_ref(), t_eval).map(|p| p.0)).collect()
    }

    /// Per-sample loss graph with input slot `x`.
    pub fn loss_graph(&self, target: &LabelVector, t: f64) -> Result<Graph> {
        let mut g = self.graph();
        let xi = g.input("x", self.input_len);
        let pn = self.param_nodes(&mut g);
        let z = self.add_logits(&mut g, xi, &pn)?;
        self.add_loss(&mut g, z, target, t)?;
        Ok(g)
    }

    /// Loss with gradients for every parameter and the input.
    pub fn loss_gradients(&self, x: &[f64], target: &LabelVector, t: f64) -> Result<GradientBundle> {
        self.check_input(x)?;
        self.loss_graph(target, t)?.evaluate_with_gradients(&self.params, &[x])
    }

    /// Loss and its gradient with respect to the input signal only.
    pub fn input_gradient(&self, x: &[f64], target: &LabelVector, t: f64) -> Result<(f64, Vec<f64>)> {
        let b = self.loss_gradients(x, target, t)?;
        Ok((b.loss, b.inputs.into_iter().next().expect("one input slot")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::softmax_with_temperature;

    #[test]
    fn cnn13_has_thirteen_convolutions() {
        let m = build_model("cnn13", 9000, 4, 1).unwrap();
        assert_eq!(m.conv_layer_count(), 13);
        let x: Vec<f64> = (0..9000).map(|i| (i as f64 * 0.01).sin()).collect();
        assert_eq!(m.logits(&x).unwrap().len(), 4);
    }

    #[test]
    fn desk_parameter_count_matches_closed_form() {
        let m = build_model("desk", 512, 4, 3).unwrap();
        // Independent tally: conv weights out*in*k + out biases, dense in*out + out.
        let expected = (8 * 1 * 7 + 8) + (16 * 8 * 5 + 16) + (16 * 16 * 3 + 16) + (16 * 4 + 4);
        assert_eq!(m.parameter_count(), expected);
        assert_eq!(m.conv_layer_count(), 3);
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = build_model("desk", 256, 4, 42).unwrap();
        let b = build_model("desk", 256, 4, 42).unwrap();
        let c = build_model("desk", 256, 4, 43).unwrap();
        assert_eq!(a.params(), b.params());
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn unknown_spec_is_an_error() {
        assert!(build_model("resnet", 256, 4, 0).is_err());
    }

    #[test]
    fn bias_dominates_with_zero_weights() {
        let mut m = build_model("desk", 64, 4, 0).unwrap();
        for p in m.params_mut() {
            p.iter_mut().for_each(|v| *v = 0.0);
        }
        let last = m.params_mut().last_mut().unwrap();
        last.copy_from_slice(&[0.0, 9.0, 0.0, 0.0]);
        let (class, _) = m.predict(&vec![0.3; 64], 1.0).unwrap();
        assert_eq!(class, 1);
    }

    #[test]
    fn batch_prediction_matches_single() {
        let m = build_model("desk", 64, 4, 9).unwrap();
        let xs: Vec<Vec<f64>> = (0..5).map(|k| (0..64).map(|i| ((i * (k + 1)) as f64).cos()).collect()).collect();
        let batch = m.predict_batch(&xs, 1.0).unwrap();
        for (x, b) in xs.iter().zip(&batch) {
            assert_eq!(&m.predict(x, 1.0).unwrap(), b);
        }
    }

    #[test]
    fn length_mismatch_is_an_error() {
        let m = build_model("desk", 64, 4, 9).unwrap();
        assert!(m.predict(&[0.0; 63], 1.0).is_err());
    }

    #[test]
    fn loss_graph_matches_direct_loss() {
        let m = build_model("desk", 64, 4, 5).unwrap();
        let x: Vec<f64> = (0..64).map(|i| (i as f64 * 0.3).sin()).collect();
        let z = m.logits(&x).unwrap();
        let p = softmax_with_temperature(&z, 2.0).unwrap();
        let b = m.loss_gradients(&x, &LabelVector::Hard(2), 2.0).unwrap();
        assert!((b.loss + p[2].ln()).abs() < 1e-12);
    }
}
