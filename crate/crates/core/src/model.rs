//! Portable model description, loading/validation, and the head/tail split.
//!
//! A [`Model`] is an ordered list of [`LayerSpec`]s. Splitting it at layer
//! `s` gives a [`SplitView`]: the head maps an input `x` to features
//! `A = head(x)`, the tail maps features to outputs `y = tail(A)`. Baselines
//! are given in input space and pushed through the same head.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::Primitive;
use crate::tape::{forward_eval, Evaluation};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Linear,
    Conv2d,
    Relu,
    Sigmoid,
    Softmax,
    Maxpool2d,
    Avgpool2d,
    Flatten,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    /// `weight` is `[out, in]`, `bias` is `[out]`.
    Linear { weight: Tensor, bias: Tensor },
    /// `weight` is `[out_c, in_c, kh, kw]`, `bias` is `[out_c]`.
    Conv2d {
        weight: Tensor,
        bias: Tensor,
        stride: [usize; 2],
        padding: [usize; 2],
    },
    Relu,
    Sigmoid,
    Softmax,
    MaxPool2d { kernel: [usize; 2], stride: [usize; 2] },
    AvgPool2d { kernel: [usize; 2], stride: [usize; 2] },
    Flatten,
}

impl LayerSpec {
    pub fn kind(&self) -> LayerKind {
        match self {
            LayerSpec::Linear { .. } => LayerKind::Linear,
            LayerSpec::Conv2d { .. } => LayerKind::Conv2d,
            LayerSpec::Relu => LayerKind::Relu,
            LayerSpec::Sigmoid => LayerKind::Sigmoid,
            LayerSpec::Softmax => LayerKind::Softmax,
            LayerSpec::MaxPool2d { .. } => LayerKind::Maxpool2d,
            LayerSpec::AvgPool2d { .. } => LayerKind::Avgpool2d,
            LayerSpec::Flatten => LayerKind::Flatten,
        }
    }

    /// Softmax and sigmoid are the output normalizations dropped for logit
    /// targets.
    pub fn is_normalization(&self) -> bool {
        matches!(self, LayerSpec::Softmax | LayerSpec::Sigmoid)
    }

    pub fn linear(weight: Tensor, bias: Tensor) -> Self {
        LayerSpec::Linear { weight, bias }
    }

    pub fn conv2d(weight: Tensor, bias: Tensor, stride: [usize; 2], padding: [usize; 2]) -> Self {
        LayerSpec::Conv2d {
            weight,
            bias,
            stride,
            padding,
        }
    }

    fn push_primitives<'a>(&'a self, ops: &mut Vec<Primitive<'a>>) {
        match self {
            LayerSpec::Linear { weight, bias } => {
                ops.push(Primitive::Linear { weight });
                ops.push(Primitive::AddBias { bias });
            }
            LayerSpec::Conv2d {
                weight,
                bias,
                stride,
                padding,
            } => {
                ops.push(Primitive::Conv2d {
                    weight,
                    stride: *stride,
                    padding: *padding,
                });
                ops.push(Primitive::AddBias { bias });
            }
            LayerSpec::Relu => ops.push(Primitive::Relu),
            LayerSpec::Sigmoid => ops.push(Primitive::Sigmoid),
            LayerSpec::Softmax => ops.push(Primitive::Softmax),
            LayerSpec::MaxPool2d { kernel, stride } => ops.push(Primitive::MaxPool2d {
                kernel: *kernel,
                stride: *stride,
            }),
            LayerSpec::AvgPool2d { kernel, stride } => ops.push(Primitive::AvgPool2d {
                kernel: *kernel,
                stride: *stride,
            }),
            LayerSpec::Flatten => ops.push(Primitive::Flatten),
        }
    }

    pub fn primitives(&self) -> Vec<Primitive<'_>> {
        let mut ops = Vec::with_capacity(2);
        self.push_primitives(&mut ops);
        ops
    }

    /// Checks parameter shapes against each other, independent of the
    /// surrounding layers.
    fn validate(&self, index: usize) -> Result<()> {
        let invalid = |message: String| Err(Error::InvalidLayer { index, message });
        match self {
            LayerSpec::Linear { weight, bias } => {
                if weight.rank() != 2 || bias.shape() != [weight.shape()[0]] {
                    return invalid(format!(
                        "linear weight {:?} and bias {:?} disagree",
                        weight.shape(),
                        bias.shape()
                    ));
                }
            }
            LayerSpec::Conv2d {
                weight,
                bias,
                stride,
                ..
            } => {
                if weight.rank() != 4 || bias.shape() != [weight.shape()[0]] {
                    return invalid(format!(
                        "conv2d weight {:?} and bias {:?} disagree",
                        weight.shape(),
                        bias.shape()
                    ));
                }
                if stride.contains(&0) {
                    return invalid("conv2d stride must be positive".into());
                }
            }
            LayerSpec::MaxPool2d { kernel, stride } | LayerSpec::AvgPool2d { kernel, stride }
                if kernel.contains(&0) || stride.contains(&0) =>
            {
                return invalid("pool kernel and stride must be positive".into());
            }
            _ => {}
        }
        for t in self.parameters() {
            if !t.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("weights of layer {index} ({:?})", self.kind()),
                });
            }
        }
        Ok(())
    }

    fn parameters(&self) -> Vec<&Tensor> {
        match self {
            LayerSpec::Linear { weight, bias } | LayerSpec::Conv2d { weight, bias, .. } => {
                vec![weight, bias]
            }
            _ => Vec::new(),
        }
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        self.primitives()
            .iter()
            .try_fold(input.to_vec(), |shape, op| op.output_shape(&shape))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    name: String,
    input_shape: Vec<usize>,
    layers: Vec<LayerSpec>,
    /// `shapes[i]` is the input shape of layer `i`; the last entry is the
    /// output shape.
    shapes: Vec<Vec<usize>>,
}

impl Model {
    pub fn new(name: impl Into<String>, input_shape: Vec<usize>, layers: Vec<LayerSpec>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument("model has no layers".into()));
        }
        if input_shape.is_empty() || input_shape.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "input shape must have positive extents, got {input_shape:?}"
            )));
        }
        for (i, layer) in layers.iter().enumerate() {
            layer.validate(i)?;
        }
        let mut shapes = vec![input_shape.clone()];
        for (i, layer) in layers.iter().enumerate() {
            let current = shapes.last().expect("non-empty");
            let next = layer.output_shape(current).map_err(|e| Error::ShapeComposition {
                from: if i == 0 { "input".into() } else { (i - 1).to_string() },
                to: i,
                message: match i {
                    0 => format!("input shape {current:?} rejected by layer 0: {e}"),
                    _ => format!("layer {} produces {current:?}, rejected by layer {i}: {e}", i - 1),
                },
            })?;
            shapes.push(next);
        }
        Ok(Self {
            name: name.into(),
            input_shape,
            layers,
            shapes,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        self.shapes.last().expect("validated model has shapes")
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// Shape of the features entering layer `index` (`index == len()` gives
    /// the output shape).
    pub fn shape_at(&self, index: usize) -> Option<&[usize]> {
        self.shapes.get(index).map(Vec::as_slice)
    }

    fn primitives(&self, layers: std::ops::Range<usize>) -> Vec<Primitive<'_>> {
        let mut ops = Vec::new();
        for layer in &self.layers[layers] {
            layer.push_primitives(&mut ops);
        }
        ops
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        if x.shape() != self.input_shape.as_slice() {
            return Err(Error::shape("model input", &self.input_shape, x.shape()));
        }
        run_plain(&self.primitives(0..self.layers.len()), x)
    }

    pub fn split(&self, split_index: usize) -> Result<SplitView<'_>> {
        SplitView::new(self, split_index)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Parse { message, .. } => Error::Parse {
                path: path.to_path_buf(),
                message,
            },
            other => other,
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(text).map_err(|e| Error::Parse {
            path: "<model>".into(),
            message: e.to_string(),
        })?;
        if file.format_version != FORMAT_VERSION {
            return Err(Error::Parse {
                path: "<model>".into(),
                message: format!(
                    "field `format_version`: unsupported version {}, expected {FORMAT_VERSION}",
                    file.format_version
                ),
            });
        }
        let layers = file
            .layers
            .into_iter()
            .enumerate()
            .map(|(i, raw)| raw.into_spec(i))
            .collect::<Result<Vec<_>>>()?;
        Model::new(file.name, file.input_shape, layers)
    }

    pub fn to_json(&self) -> String {
        let file = ModelFile {
            format_version: FORMAT_VERSION,
            name: self.name.clone(),
            input_shape: self.input_shape.clone(),
            layers: self.layers.iter().map(RawLayer::from_spec).collect(),
        };
        serde_json::to_string_pretty(&file).expect("model serialization cannot fail")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }
}

fn run_plain(ops: &[Primitive<'_>], x: &Tensor) -> Result<Tensor> {
    let mut current = x.clone();
    for (i, op) in ops.iter().enumerate() {
        current = op.forward(&current)?;
        current.ensure_finite(format!("output of op #{} ({})", i + 1, op.name()))?;
    }
    Ok(current)
}

/// Which output is being explained, and whether through the final
/// normalization (`prob`) or with it removed (`logit`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Target {
    pub index: usize,
    pub space: TargetSpace,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TargetSpace {
    Logit,
    Prob,
}

impl Target {
    pub fn logit(index: usize) -> Self {
        Self {
            index,
            space: TargetSpace::Logit,
        }
    }

    pub fn prob(index: usize) -> Self {
        Self {
            index,
            space: TargetSpace::Prob,
        }
    }
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let space = match self.space {
            TargetSpace::Logit => "logit",
            TargetSpace::Prob => "prob",
        };
        write!(f, "{}:{space}", self.index)
    }
}

impl FromStr for Target {
    type Err = Error;

    /// `"<index>"` or `"<index>:logit"` / `"<index>:prob"`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("bad target `{s}`, expected INDEX[:logit|prob]"));
        let (idx, space) = s.split_once(':').unwrap_or((s, "logit"));
        let index = idx.trim().parse().map_err(|_| bad())?;
        let space = match space.trim() {
            "logit" => TargetSpace::Logit,
            "prob" => TargetSpace::Prob,
            _ => return Err(bad()),
        };
        Ok(Target { index, space })
    }
}

impl Serialize for Target {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Target {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// A model partitioned at `split_index` into head `[0, s)` and tail `[s, end)`.
pub struct SplitView<'m> {
    model: &'m Model,
    split_index: usize,
    head: Vec<Primitive<'m>>,
    tail: Vec<Primitive<'m>>,
    /// Number of trailing tail primitives that form the final normalization.
    tail_normalization: usize,
}

impl<'m> SplitView<'m> {
    fn new(model: &'m Model, split_index: usize) -> Result<Self> {
        let count = model.len();
        if split_index > count {
            return Err(Error::IndexOutOfRange {
                what: "split",
                index: split_index,
                len: count + 1,
            });
        }
        let ends_normalized = model.layers.last().is_some_and(LayerSpec::is_normalization);
        Ok(Self {
            model,
            split_index,
            head: model.primitives(0..split_index),
            tail: model.primitives(split_index..count),
            tail_normalization: usize::from(ends_normalized && split_index < count),
        })
    }

    pub fn model(&self) -> &'m Model {
        self.model
    }

    pub fn split_index(&self) -> usize {
        self.split_index
    }

    pub fn feature_shape(&self) -> &'m [usize] {
        self.model.shape_at(self.split_index).expect("split index validated")
    }

    pub fn forward_head(&self, x: &Tensor) -> Result<Tensor> {
        if x.shape() != self.model.input_shape() {
            return Err(Error::shape("head input", self.model.input_shape(), x.shape()));
        }
        run_plain(&self.head, x)
    }

    fn tail_ops(&self, space: TargetSpace) -> Result<&[Primitive<'m>]> {
        let ends_normalized = self.model.layers.last().is_some_and(LayerSpec::is_normalization);
        match space {
            TargetSpace::Prob if !ends_normalized => Err(Error::InvalidArgument(
                "prob target requires a model ending in softmax or sigmoid".into(),
            )),
            TargetSpace::Prob => Ok(&self.tail),
            TargetSpace::Logit if ends_normalized && self.tail_normalization == 0 => {
                Err(Error::InvalidArgument(format!(
                    "logit target unavailable: split {} lies after the final normalization",
                    self.split_index
                )))
            }
            TargetSpace::Logit => Ok(&self.tail[..self.tail.len() - self.tail_normalization]),
        }
    }

    fn check_features(&self, a: &Tensor) -> Result<()> {
        if a.shape() != self.feature_shape() {
            return Err(Error::shape("tail input", self.feature_shape(), a.shape()));
        }
        Ok(())
    }

    /// Full tail output in the target's space, without recording a tape.
    pub fn tail_output(&self, a: &Tensor, space: TargetSpace) -> Result<Tensor> {
        self.check_features(a)?;
        run_plain(self.tail_ops(space)?, a)
    }

    /// Selected scalar output, without recording a tape.
    pub fn tail_value(&self, a: &Tensor, target: Target) -> Result<f64> {
        let out = self.tail_output(a, target.space)?;
        select(&out, target.index)
    }

    /// Selected scalar output plus the tape needed to differentiate it with
    /// respect to the features.
    pub fn forward_tail(&self, a: &Tensor, target: Target) -> Result<TailEval<'m>> {
        self.check_features(a)?;
        let eval = forward_eval(self.tail_ops(target.space)?, a)?;
        let value = select(eval.output_value(), target.index)?;
        Ok(TailEval {
            value,
            index: target.index,
            eval,
        })
    }

    /// `dF/dA` at `a` for the selected output.
    pub fn tail_gradient(&self, a: &Tensor, target: Target) -> Result<Tensor> {
        self.forward_tail(a, target)?.gradient()
    }
}

fn select(out: &Tensor, index: usize) -> Result<f64> {
    out.data()
        .get(index)
        .copied()
        .ok_or(Error::IndexOutOfRange {
            what: "target",
            index,
            len: out.len(),
        })
}

pub struct TailEval<'m> {
    pub value: f64,
    index: usize,
    pub eval: Evaluation<'m>,
}

impl TailEval<'_> {
    pub fn gradient(&self) -> Result<Tensor> {
        self.eval.gradient(self.index)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    format_version: u32,
    name: String,
    input_shape: Vec<usize>,
    layers: Vec<RawLayer>,
}

fn unit_stride() -> [usize; 2] {
    [1, 1]
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
enum RawLayer {
    Linear {
        #[serde(rename = "in")]
        inputs: usize,
        out: usize,
        weights: Vec<Vec<f64>>,
        bias: Vec<f64>,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: [usize; 2],
        #[serde(default = "unit_stride")]
        stride: [usize; 2],
        #[serde(default)]
        padding: [usize; 2],
        weights: Vec<Vec<Vec<Vec<f64>>>>,
        bias: Vec<f64>,
    },
    Relu,
    Sigmoid,
    Softmax,
    Maxpool2d {
        kernel: [usize; 2],
        stride: Option<[usize; 2]>,
    },
    Avgpool2d {
        kernel: [usize; 2],
        stride: Option<[usize; 2]>,
    },
    Flatten,
}

impl RawLayer {
    fn into_spec(self, index: usize) -> Result<LayerSpec> {
        let invalid = |message: String| Error::InvalidLayer { index, message };
        Ok(match self {
            RawLayer::Linear {
                inputs,
                out,
                weights,
                bias,
            } => {
                if weights.len() != out || weights.iter().any(|row| row.len() != inputs) {
                    return Err(invalid(format!("linear weights must be {out}x{inputs}")));
                }
                if bias.len() != out {
                    return Err(invalid(format!("linear bias must have length {out}")));
                }
                let weight = Tensor::new(vec![out, inputs], weights.concat())
                    .map_err(|e| invalid(e.to_string()))?;
                let bias = Tensor::new(vec![out], bias).map_err(|e| invalid(e.to_string()))?;
                LayerSpec::Linear { weight, bias }
            }
            RawLayer::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
                weights,
                bias,
            } => {
                let [kh, kw] = kernel;
                let consistent = weights.len() == out_channels
                    && weights.iter().all(|o| {
                        o.len() == in_channels
                            && o.iter().all(|c| c.len() == kh && c.iter().all(|r| r.len() == kw))
                    });
                if !consistent {
                    return Err(invalid(format!(
                        "conv2d weights must be {out_channels}x{in_channels}x{kh}x{kw}"
                    )));
                }
                if bias.len() != out_channels {
                    return Err(invalid(format!("conv2d bias must have length {out_channels}")));
                }
                let flat: Vec<f64> = weights.into_iter().flatten().flatten().flatten().collect();
                let weight = Tensor::new(vec![out_channels, in_channels, kh, kw], flat)
                    .map_err(|e| invalid(e.to_string()))?;
                let bias = Tensor::new(vec![out_channels], bias).map_err(|e| invalid(e.to_string()))?;
                LayerSpec::Conv2d {
                    weight,
                    bias,
                    stride,
                    padding,
                }
            }
            RawLayer::Relu => LayerSpec::Relu,
            RawLayer::Sigmoid => LayerSpec::Sigmoid,
            RawLayer::Softmax => LayerSpec::Softmax,
            RawLayer::Maxpool2d { kernel, stride } => LayerSpec::MaxPool2d {
                kernel,
                stride: stride.unwrap_or(kernel),
            },
            RawLayer::Avgpool2d { kernel, stride } => LayerSpec::AvgPool2d {
                kernel,
                stride: stride.unwrap_or(kernel),
            },
            RawLayer::Flatten => LayerSpec::Flatten,
        })
    }

    fn from_spec(spec: &LayerSpec) -> Self {
        match spec {
            LayerSpec::Linear { weight, bias } => {
                let inputs = weight.shape()[1];
                RawLayer::Linear {
                    inputs,
                    out: weight.shape()[0],
                    weights: weight.data().chunks(inputs).map(<[f64]>::to_vec).collect(),
                    bias: bias.data().to_vec(),
                }
            }
            LayerSpec::Conv2d {
                weight,
                bias,
                stride,
                padding,
            } => {
                let s = weight.shape();
                let (kh, kw) = (s[2], s[3]);
                let weights = weight
                    .data()
                    .chunks(s[1] * kh * kw)
                    .map(|o| {
                        o.chunks(kh * kw)
                            .map(|c| c.chunks(kw).map(<[f64]>::to_vec).collect())
                            .collect()
                    })
                    .collect();
                RawLayer::Conv2d {
                    in_channels: s[1],
                    out_channels: s[0],
                    kernel: [kh, kw],
                    stride: *stride,
                    padding: *padding,
                    weights,
                    bias: bias.data().to_vec(),
                }
            }
            LayerSpec::Relu => RawLayer::Relu,
            LayerSpec::Sigmoid => RawLayer::Sigmoid,
            LayerSpec::Softmax => RawLayer::Softmax,
            LayerSpec::MaxPool2d { kernel, stride } => RawLayer::Maxpool2d {
                kernel: *kernel,
                stride: Some(*stride),
            },
            LayerSpec::AvgPool2d { kernel, stride } => RawLayer::Avgpool2d {
                kernel: *kernel,
                stride: Some(*stride),
            },
            LayerSpec::Flatten => RawLayer::Flatten,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "format_version": 1,
        "name": "lin",
        "input_shape": [2],
        "layers": [{"kind": "linear", "in": 2, "out": 1, "weights": [[2, -3]], "bias": [0]}]
    }"#;

    #[test]
    fn loads_minimal_model() {
        let m = Model::from_json(MINIMAL).unwrap();
        assert_eq!(m.len(), 1);
        assert_eq!(m.input_shape(), &[2]);
        let y = m.forward(&Tensor::from_vec(vec![1.0, 1.0])).unwrap();
        assert_eq!(y.data(), &[-1.0]);
    }

    #[test]
    fn composition_error_names_layer_pair() {
        let text = r#"{"format_version":1,"name":"bad","input_shape":[2],"layers":[
            {"kind":"linear","in":2,"out":3,"weights":[[1,1],[1,1],[1,1]],"bias":[0,0,0]},
            {"kind":"linear","in":4,"out":1,"weights":[[1,1,1,1]],"bias":[0]}]}"#;
        match Model::from_json(text) {
            Err(Error::ShapeComposition { from, to, .. }) => {
                assert_eq!(from, "0");
                assert_eq!(to, 1);
            }
            other => panic!("expected composition error, got {other:?}"),
        }
    }

    #[test]
    fn parse_errors_carry_context() {
        let err = Model::from_json(r#"{"format_version":1,"name":"x","input_shape":[2],
            "layers":[{"kind":"linear","in":2,"out":1,"weights":[[1,1]]}]}"#)
        .err()
        .unwrap();
        let msg = err.to_string();
        assert!(msg.contains("bias") && msg.contains("line"), "{msg}");

        let err = Model::from_json(r#"{"format_version":1,"name":"x","input_shape":[2],
            "layers":[{"kind":"attention"}]}"#)
        .err()
        .unwrap();
        assert!(err.to_string().contains("attention"), "{err}");

        let err = Model::from_json(&MINIMAL.replace("\"format_version\": 1", "\"format_version\": 2"))
            .err()
            .unwrap();
        assert!(err.to_string().contains("format_version"));
    }

    #[test]
    fn rejects_inconsistent_weights_and_empty_models() {
        let err = Model::from_json(&MINIMAL.replace("[[2, -3]]", "[[2, -3, 1]]")).err().unwrap();
        assert!(matches!(err, Error::InvalidLayer { index: 0, .. }));
        let err = Model::from_json(r#"{"format_version":1,"name":"e","input_shape":[2],"layers":[]}"#)
            .err()
            .unwrap();
        assert!(matches!(err, Error::InvalidArgument(_)));
    }

    #[test]
    fn rejects_non_finite_weights() {
        let w = Tensor::new(vec![1, 1], vec![f64::NAN]).unwrap();
        let err = Model::new("nan", vec![1], vec![LayerSpec::linear(w, Tensor::scalar(0.0))])
            .err()
            .unwrap();
        assert!(err.is_numerical());
    }

    #[test]
    fn degenerate_splits() {
        let m = Model::from_json(MINIMAL).unwrap();
        let x = Tensor::from_vec(vec![0.25, -4.0]);
        let head_only = m.split(0).unwrap();
        assert_eq!(head_only.feature_shape(), &[2]);
        assert_eq!(head_only.forward_head(&x).unwrap(), x);

        let tail_only = m.split(1).unwrap();
        assert_eq!(tail_only.feature_shape(), &[1]);
        let a = tail_only.forward_head(&x).unwrap();
        assert_eq!(tail_only.tail_value(&a, Target::logit(0)).unwrap(), a.data()[0]);
        assert!(m.split(2).is_err());
    }

    #[test]
    fn target_parsing() {
        assert_eq!("3:prob".parse::<Target>().unwrap(), Target::prob(3));
        assert_eq!("7".parse::<Target>().unwrap(), Target::logit(7));
        assert!("x:logit".parse::<Target>().is_err());
        assert!("1:softmax".parse::<Target>().is_err());
        assert_eq!(Target::prob(2).to_string(), "2:prob");
    }

    #[test]
    fn logit_and_prob_spaces() {
        let w = Tensor::new(vec![2, 1], vec![1.0, -1.0]).unwrap();
        let m = Model::new(
            "cls",
            vec![1],
            vec![LayerSpec::linear(w, Tensor::zeros(&[2])), LayerSpec::Softmax],
        )
        .unwrap();
        let view = m.split(0).unwrap();
        let x = Tensor::scalar(0.5);
        assert_eq!(view.tail_value(&x, Target::logit(0)).unwrap(), 0.5);
        let p = view.tail_value(&x, Target::prob(0)).unwrap();
        assert!((p - 1.0 / (1.0 + (-1.0f64).exp())).abs() < 1e-15);
        assert!(view.tail_value(&x, Target::logit(2)).is_err());

        // After the softmax there are no logits left to explain.
        let end = m.split(2).unwrap();
        assert!(end.tail_value(&Tensor::from_vec(vec![0.5, 0.5]), Target::logit(0)).is_err());
        assert!(end.tail_value(&Tensor::from_vec(vec![0.5, 0.5]), Target::prob(0)).is_ok());

        let lin = Model::from_json(MINIMAL).unwrap();
        assert!(lin.split(0).unwrap().tail_value(&Tensor::zeros(&[2]), Target::prob(0)).is_err());
    }
}
