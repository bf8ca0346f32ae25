//! A small trainable convolutional network with explicit forward/backward
//! passes, momentum SGD with a halving step schedule, and named feature taps.

mod features;
mod io;
mod layers;
mod net;
mod tensor;
mod train;

pub use features::{extract_batch, extract_features, image_to_input, FeatureVector, Preproc};
pub use io::{read_named_arrays, write_named_arrays, NamedArray};
pub use net::{sgd_step, ForwardCache, Grads, Net, SgdState};
pub use tensor::{Scalar, Tensor};
pub use train::{lr_schedule, train, train_images, write_curve_csv, CurvePoint, TrainConfig};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid net spec: {0}")]
    InvalidSpec(String),
    #[error("backward called without a cached forward pass with labels")]
    NoCachedForward,
    #[error("unknown layer `{0}`")]
    UnknownLayer(String),
    #[error("empty training set")]
    EmptyDataset,
    #[error("label `{0}` not in class map")]
    LabelUnknown(String),
    #[error("invalid train config: {0}")]
    InvalidConfig(String),
    #[error("weights file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Augment(#[from] crate::augment::AugmentError),
    #[error(transparent)]
    Render(#[from] crate::depth_render::RenderError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerKind {
    Conv {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    Relu,
    MaxPool {
        size: usize,
        stride: usize,
    },
    /// Cross-channel local response normalization.
    Lrn {
        local_size: usize,
        alpha: f64,
        beta: f64,
        k: f64,
    },
    Fc {
        out: usize,
    },
    SoftmaxLoss,
}

impl LayerKind {
    pub fn lrn() -> Self {
        LayerKind::Lrn {
            local_size: 5,
            alpha: 1e-4,
            beta: 0.75,
            k: 1.0,
        }
    }

    pub fn has_params(&self) -> bool {
        matches!(self, LayerKind::Conv { .. } | LayerKind::Fc { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerDef {
    pub name: String,
    #[serde(flatten)]
    pub kind: LayerKind,
}

/// Ordered layer graph with named output taps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetSpec {
    /// Per-sample input shape `[channels, height, width]`.
    pub input: [usize; 3],
    pub layers: Vec<LayerDef>,
    /// Names of layers whose outputs may be extracted as features.
    pub taps: Vec<String>,
}

fn layer(name: &str, kind: LayerKind) -> LayerDef {
    LayerDef {
        name: name.to_string(),
        kind,
    }
}

fn conv(out_channels: usize, kernel: usize, stride: usize, pad: usize) -> LayerKind {
    LayerKind::Conv {
        out_channels,
        kernel,
        stride,
        pad,
    }
}

const POOL2: LayerKind = LayerKind::MaxPool { size: 2, stride: 2 };

impl NetSpec {
    /// Three conv blocks (pool before normalization after the first) and two
    /// fully connected layers for a 1×64×64 input.
    pub fn mini_depth_net(classes: usize) -> Self {
        NetSpec {
            input: [1, 64, 64],
            layers: vec![
                layer("conv1", conv(16, 5, 1, 2)),
                layer("relu1", LayerKind::Relu),
                layer("pool1", POOL2),
                layer("norm1", LayerKind::lrn()),
                layer("conv2", conv(32, 5, 1, 2)),
                layer("relu2", LayerKind::Relu),
                layer("pool2", POOL2),
                layer("conv3", conv(64, 3, 1, 1)),
                layer("relu3", LayerKind::Relu),
                layer("pool_last", POOL2),
                layer("fc6", LayerKind::Fc { out: 256 }),
                layer("relu6", LayerKind::Relu),
                layer("fc7", LayerKind::Fc { out: classes }),
                layer("loss", LayerKind::SoftmaxLoss),
            ],
            taps: vec!["pool_last".into(), "fc6".into(), "fc7".into()],
        }
    }

    /// Named specs selectable from configuration files.
    pub fn by_name(name: &str, classes: usize) -> Option<Self> {
        match name {
            "mini_depth_net" | "MiniDepthNet" => Some(Self::mini_depth_net(classes)),
            _ => None,
        }
    }

    pub fn layer_index(&self, name: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.name == name)
    }

    /// Per-sample output shape of every layer, validating the graph.
    pub fn shapes(&self) -> Result<Vec<Vec<usize>>, NetError> {
        let mismatch = |m: String| Err(NetError::ShapeMismatch(m));
        if self.input.contains(&0) {
            return mismatch(format!("input shape {:?}", self.input));
        }
        let losses = self
            .layers
            .iter()
            .filter(|l| l.kind == LayerKind::SoftmaxLoss)
            .count();
        if losses != 1 || self.layers.last().map(|l| l.kind) != Some(LayerKind::SoftmaxLoss) {
            return Err(NetError::InvalidSpec(
                "exactly one softmax_loss layer, placed last".into(),
            ));
        }
        let mut names = std::collections::HashSet::new();
        for l in &self.layers {
            if !names.insert(l.name.as_str()) {
                return Err(NetError::InvalidSpec(format!("duplicate layer name {}", l.name)));
            }
        }
        let mut taps = std::collections::HashSet::new();
        for t in &self.taps {
            if !taps.insert(t.as_str()) {
                return Err(NetError::InvalidSpec(format!("duplicate tap {t}")));
            }
            match self.layer_index(t) {
                Some(i) if self.layers[i].kind != LayerKind::SoftmaxLoss => {}
                _ => return Err(NetError::InvalidSpec(format!("tap {t} names no layer output"))),
            }
        }
        let mut cur: Vec<usize> = self.input.to_vec();
        let mut out = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            cur = match l.kind {
                LayerKind::Conv {
                    out_channels,
                    kernel,
                    stride,
                    pad,
                } => {
                    if cur.len() != 3 {
                        return mismatch(format!("{}: conv needs a 3-d input, got {cur:?}", l.name));
                    }
                    if out_channels == 0 || kernel == 0 || stride == 0 {
                        return mismatch(format!("{}: zero-sized conv", l.name));
                    }
                    let (h, w) = (cur[1] + 2 * pad, cur[2] + 2 * pad);
                    if h < kernel || w < kernel {
                        return mismatch(format!("{}: kernel {kernel} larger than input", l.name));
                    }
                    vec![out_channels, (h - kernel) / stride + 1, (w - kernel) / stride + 1]
                }
                LayerKind::MaxPool { size, stride } => {
                    if cur.len() != 3 || size == 0 || stride == 0 || cur[1] < size || cur[2] < size {
                        return mismatch(format!("{}: pool {size} on {cur:?}", l.name));
                    }
                    vec![cur[0], (cur[1] - size) / stride + 1, (cur[2] - size) / stride + 1]
                }
                LayerKind::Lrn { local_size, .. } => {
                    if cur.len() != 3 || local_size == 0 {
                        return mismatch(format!("{}: lrn needs a 3-d input", l.name));
                    }
                    cur
                }
                LayerKind::Relu => cur,
                LayerKind::Fc { out } => {
                    if out == 0 {
                        return mismatch(format!("{}: zero-sized fc", l.name));
                    }
                    vec![out]
                }
                LayerKind::SoftmaxLoss => {
                    if cur.len() != 1 {
                        return mismatch(format!("{}: loss needs a flat input", l.name));
                    }
                    cur
                }
            };
            out.push(cur.clone());
        }
        Ok(out)
    }

    pub fn num_classes(&self) -> Result<usize, NetError> {
        Ok(self.shapes()?.last().map(|s| s[0]).unwrap_or(0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_spec_shapes() {
        let spec = NetSpec::mini_depth_net(5);
        let shapes = spec.shapes().unwrap();
        let pool = spec.layer_index("pool_last").unwrap();
        assert_eq!(shapes[pool], vec![64, 8, 8]);
        assert_eq!(shapes[spec.layer_index("fc6").unwrap()], vec![256]);
        assert_eq!(spec.num_classes().unwrap(), 5);
    }

    #[test]
    fn pool_precedes_normalization() {
        let spec = NetSpec::mini_depth_net(3);
        let pool = spec.layer_index("pool1").unwrap();
        assert!(matches!(spec.layers[pool + 1].kind, LayerKind::Lrn { .. }));
    }

    #[test]
    fn invalid_specs() {
        let mut s = NetSpec::mini_depth_net(3);
        s.input = [1, 4, 4];
        assert!(matches!(s.shapes(), Err(NetError::ShapeMismatch(_))));

        let mut s = NetSpec::mini_depth_net(3);
        s.layers.pop();
        assert!(matches!(s.shapes(), Err(NetError::InvalidSpec(_))));

        let mut s = NetSpec::mini_depth_net(3);
        s.taps.push("fc6".into());
        assert!(matches!(s.shapes(), Err(NetError::InvalidSpec(_))));

        // conv after fc
        let s = NetSpec {
            input: [1, 8, 8],
            layers: vec![
                layer("fc", LayerKind::Fc { out: 4 }),
                layer("conv", conv(2, 3, 1, 1)),
                layer("loss", LayerKind::SoftmaxLoss),
            ],
            taps: vec![],
        };
        assert!(matches!(s.shapes(), Err(NetError::ShapeMismatch(_))));
    }

    #[test]
    fn fc_on_image_input_flattens() {
        let s = NetSpec {
            input: [2, 4, 4],
            layers: vec![
                layer("fc", LayerKind::Fc { out: 3 }),
                layer("loss", LayerKind::SoftmaxLoss),
            ],
            taps: vec!["fc".into()],
        };
        assert_eq!(s.shapes().unwrap(), vec![vec![3], vec![3]]);
    }

    #[test]
    fn spec_serializes() {
        let s = NetSpec::mini_depth_net(4);
        let text = serde_json::to_string(&s).unwrap();
        assert_eq!(serde_json::from_str::<NetSpec>(&text).unwrap(), s);
    }
}
