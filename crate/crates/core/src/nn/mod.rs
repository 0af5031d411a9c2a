//! Convolutional classifiers ending in global average pooling and a single
//! dense layer, which is what makes class activation maps well defined.
//!
//! Input layout per family, as `(channels, rows, time)`:
//!
//! | family  | input            | kernel                 |
//! |---------|------------------|------------------------|
//! | CNN     | `(D, 1, n)`      | `(F, D, ℓ)`            |
//! | cCNN    | `(1, D, n)`      | `(F, 1, 1, ℓ)`         |
//! | dCNN    | `(D, D, n)` cube | `(F, D, 1, ℓ)`         |
//! | dResNet | `(D, D, n)` cube | residual blocks of the above |
//!
//! For the cube families the channel axis is the column of the rotation
//! cube and the row axis its row, so a kernel sees one full arrangement of
//! all dimensions while rows never mix.

mod io;
mod train;

pub use io::{load_model, save_model};
pub use train::{stratified_split, train, train_with_validation, write_training_log, Adam, TrainConfig, TrainReport};

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::series::{build_cube, MultivariateSeries, Permutation};
use crate::tensor::{Graph, NodeId, Tensor};

pub const BATCHNORM_EPS: f64 = 1e-5;
pub const BATCHNORM_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Family {
    #[serde(rename = "CNN")]
    Cnn,
    #[serde(rename = "cCNN")]
    CCnn,
    #[serde(rename = "dCNN")]
    DCnn,
    #[serde(rename = "dResNet")]
    DResNet,
}

impl Family {
    pub const ALL: [Family; 4] = [Family::Cnn, Family::CCnn, Family::DCnn, Family::DResNet];

    /// Consumes rotation cubes.
    pub fn uses_cube(self) -> bool {
        matches!(self, Family::DCnn | Family::DResNet)
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Family::Cnn => "CNN",
            Family::CCnn => "cCNN",
            Family::DCnn => "dCNN",
            Family::DResNet => "dResNet",
        })
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cnn" => Ok(Family::Cnn),
            "ccnn" => Ok(Family::CCnn),
            "dcnn" => Ok(Family::DCnn),
            "dresnet" => Ok(Family::DResNet),
            other => Err(Error::Config(format!(
                "unknown architecture {other:?} (expected cnn, ccnn, dcnn or dresnet)"
            ))),
        }
    }
}

/// Layer layout of a network.
///
/// For the plain families `conv_filters[i]` and `kernel_widths[i]` describe
/// layer `i`. For dResNet `conv_filters[b]` is the width of block `b` and
/// `kernel_widths` lists the kernel of each convolution inside every block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureSpec {
    pub family: Family,
    pub conv_filters: Vec<usize>,
    pub kernel_widths: Vec<usize>,
    pub use_batchnorm: bool,
    pub class_count: usize,
}

impl ArchitectureSpec {
    pub fn defaults(family: Family, class_count: usize) -> Self {
        let (conv_filters, kernel_widths) = match family {
            Family::DResNet => (vec![64, 64, 128], vec![8, 5, 3]),
            _ => (vec![64, 128, 256, 256, 256], vec![3; 5]),
        };
        ArchitectureSpec {
            family,
            conv_filters,
            kernel_widths,
            use_batchnorm: true,
            class_count,
        }
    }

    /// Plain family with `filters` and kernel width 3 throughout.
    pub fn with_filters(family: Family, filters: &[usize], class_count: usize) -> Self {
        let mut spec = Self::defaults(family, class_count);
        spec.conv_filters = filters.to_vec();
        if family != Family::DResNet {
            spec.kernel_widths = vec![3; filters.len()];
        }
        spec
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: String| {
            Err(Error::Family {
                family: self.family.to_string(),
                what,
            })
        };
        if self.class_count < 2 {
            return bad(format!("needs at least 2 classes, got {}", self.class_count));
        }
        if self.conv_filters.is_empty() || self.conv_filters.contains(&0) {
            return bad(format!("invalid filter counts {:?}", self.conv_filters));
        }
        if self.kernel_widths.is_empty() || self.kernel_widths.contains(&0) {
            return bad(format!("invalid kernel widths {:?}", self.kernel_widths));
        }
        if self.family != Family::DResNet && self.kernel_widths.len() != self.conv_filters.len() {
            return bad(format!(
                "{} filter counts but {} kernel widths",
                self.conv_filters.len(),
                self.kernel_widths.len()
            ));
        }
        Ok(())
    }

    /// Filters of the last convolution, i.e. the CAM channel count.
    pub fn feature_count(&self) -> usize {
        *self.conv_filters.last().expect("validated")
    }

    fn input_channels(&self, dims: usize) -> usize {
        match self.family {
            Family::CCnn => 1,
            _ => dims,
        }
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

/// A network together with its weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    spec: ArchitectureSpec,
    dims: usize,
    params: BTreeMap<String, Tensor<f32>>,
    class_labels: Vec<String>,
    pub training_log: Vec<EpochRecord>,
}

/// Logits `(B, K)` and last convolution activations `(B, F, H, W)`.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub logits: Tensor<f32>,
    pub features: Tensor<f32>,
}

pub(crate) struct Trace {
    pub logits: NodeId,
    pub features: NodeId,
    pub params: Vec<(String, NodeId)>,
    pub norms: Vec<(String, NodeId)>,
}

fn conv_shape(family: Family, cout: usize, cin: usize, width: usize) -> Vec<usize> {
    match family {
        Family::Cnn => vec![cout, cin, width],
        _ => vec![cout, cin, 1, width],
    }
}

fn he_uniform(rng: &mut ChaCha8Rng, shape: Vec<usize>, fan_in: usize) -> Tensor<f32> {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound) as f32).collect();
    Tensor::new(shape, data).expect("shape matches")
}

pub fn build_model(spec: &ArchitectureSpec, dims: usize, seed: u64) -> Result<Model> {
    spec.validate()?;
    if dims == 0 {
        return Err(Error::Config("series must have at least one dimension".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = BTreeMap::new();
    let add_conv = |params: &mut BTreeMap<String, Tensor<f32>>,
                    rng: &mut ChaCha8Rng,
                    prefix: &str,
                    cin: usize,
                    cout: usize,
                    width: usize| {
        params.insert(
            format!("{prefix}.weight"),
            he_uniform(rng, conv_shape(spec.family, cout, cin, width), cin * width),
        );
        params.insert(format!("{prefix}.bias"), Tensor::zeros([cout]));
    };
    let add_norm = |params: &mut BTreeMap<String, Tensor<f32>>, prefix: &str, c: usize| {
        params.insert(format!("{prefix}.gamma"), Tensor::ones([c]));
        params.insert(format!("{prefix}.beta"), Tensor::zeros([c]));
        params.insert(format!("{prefix}.running_mean"), Tensor::zeros([c]));
        params.insert(format!("{prefix}.running_var"), Tensor::ones([c]));
    };

    let mut cin = spec.input_channels(dims);
    match spec.family {
        Family::DResNet => {
            for (b, &width) in spec.conv_filters.iter().enumerate() {
                let block_in = cin;
                for (j, &k) in spec.kernel_widths.iter().enumerate() {
                    add_conv(&mut params, &mut rng, &format!("block{b}.conv{j}"), cin, width, k);
                    if spec.use_batchnorm {
                        add_norm(&mut params, &format!("block{b}.bn{j}"), width);
                    }
                    cin = width;
                }
                if block_in != width {
                    add_conv(&mut params, &mut rng, &format!("block{b}.shortcut"), block_in, width, 1);
                    if spec.use_batchnorm {
                        add_norm(&mut params, &format!("block{b}.shortcut_bn"), width);
                    }
                }
            }
        }
        _ => {
            for (i, (&cout, &k)) in spec.conv_filters.iter().zip(&spec.kernel_widths).enumerate() {
                add_conv(&mut params, &mut rng, &format!("conv{i}"), cin, cout, k);
                if spec.use_batchnorm {
                    add_norm(&mut params, &format!("bn{i}"), cout);
                }
                cin = cout;
            }
        }
    }
    let features = spec.feature_count();
    params.insert(
        "dense.weight".into(),
        he_uniform(&mut rng, vec![features, spec.class_count], features),
    );
    params.insert("dense.bias".into(), Tensor::zeros([spec.class_count]));

    Ok(Model {
        spec: spec.clone(),
        dims,
        params,
        class_labels: (0..spec.class_count).map(|c| c.to_string()).collect(),
        training_log: Vec::new(),
    })
}

/// Running statistics are state, not trainable weights.
pub fn is_trainable(name: &str) -> bool {
    !name.ends_with(".running_mean") && !name.ends_with(".running_var")
}

struct Builder<'a> {
    model: &'a Model,
    train: bool,
    params: Vec<(String, NodeId)>,
    norms: Vec<(String, NodeId)>,
}

impl Builder<'_> {
    fn param(&mut self, g: &mut Graph<f32>, name: &str) -> Result<NodeId> {
        let value = self
            .model
            .params
            .get(name)
            .ok_or_else(|| Error::Contract(format!("missing parameter {name}")))?
            .clone();
        if self.train && is_trainable(name) {
            let id = g.param(value);
            self.params.push((name.to_string(), id));
            Ok(id)
        } else {
            Ok(g.constant(value))
        }
    }

    fn conv(&mut self, g: &mut Graph<f32>, x: NodeId, prefix: &str) -> Result<NodeId> {
        let w = self.param(g, &format!("{prefix}.weight"))?;
        let b = self.param(g, &format!("{prefix}.bias"))?;
        g.conv2d_rowwise(x, w, b)
    }

    fn norm(&mut self, g: &mut Graph<f32>, x: NodeId, prefix: &str) -> Result<NodeId> {
        if !self.model.spec.use_batchnorm {
            return Ok(x);
        }
        let gamma = self.param(g, &format!("{prefix}.gamma"))?;
        let beta = self.param(g, &format!("{prefix}.beta"))?;
        if self.train {
            let id = g.batchnorm(x, gamma, beta, BATCHNORM_EPS)?;
            self.norms.push((prefix.to_string(), id));
            Ok(id)
        } else {
            let mean = self.param(g, &format!("{prefix}.running_mean"))?;
            let var = self.param(g, &format!("{prefix}.running_var"))?;
            g.batchnorm_frozen(x, gamma, beta, mean, var, BATCHNORM_EPS)
        }
    }
}

impl Model {
    pub fn spec(&self) -> &ArchitectureSpec {
        &self.spec
    }

    pub fn family(&self) -> Family {
        self.spec.family
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn class_count(&self) -> usize {
        self.spec.class_count
    }

    pub fn class_labels(&self) -> &[String] {
        &self.class_labels
    }

    pub fn set_class_labels(&mut self, labels: Vec<String>) -> Result<()> {
        if labels.len() != self.spec.class_count {
            return Err(Error::Config(format!(
                "{} labels for {} classes",
                labels.len(),
                self.spec.class_count
            )));
        }
        self.class_labels = labels;
        Ok(())
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor<f32>> {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<f32>> {
        self.params.get(name)
    }

    /// Replaces a parameter with a tensor of the same shape.
    pub fn set_param(&mut self, name: &str, value: Tensor<f32>) -> Result<()> {
        let slot = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("missing parameter {name}")))?;
        if slot.shape() != value.shape() {
            return Err(Error::shape(
                "set_param",
                format!("{name}: {:?} vs {:?}", slot.shape(), value.shape()),
            ));
        }
        *slot = value;
        Ok(())
    }

    pub(crate) fn params_mut(&mut self) -> &mut BTreeMap<String, Tensor<f32>> {
        &mut self.params
    }

    pub(crate) fn from_parts(
        spec: ArchitectureSpec,
        dims: usize,
        params: BTreeMap<String, Tensor<f32>>,
        class_labels: Vec<String>,
        training_log: Vec<EpochRecord>,
    ) -> Result<Self> {
        let reference = build_model(&spec, dims, 0)?;
        let expected: Vec<(&String, &[usize])> = reference.params.iter().map(|(k, v)| (k, v.shape())).collect();
        let found: Vec<(&String, &[usize])> = params.iter().map(|(k, v)| (k, v.shape())).collect();
        if expected != found {
            return Err(Error::Contract(
                "parameter names or shapes do not match the architecture".into(),
            ));
        }
        let mut model = Model {
            spec,
            dims,
            params,
            class_labels: Vec::new(),
            training_log,
        };
        model.set_class_labels(class_labels)?;
        Ok(model)
    }

    /// Dense head weights `(F, K)`.
    pub fn dense_weight(&self) -> &Tensor<f32> {
        &self.params["dense.weight"]
    }

    pub fn dense_bias(&self) -> &Tensor<f32> {
        &self.params["dense.bias"]
    }

    /// Network input `(C, H, n)` for one series. Cube families use `perm`
    /// (identity when `None`); the others ignore it.
    pub fn encode(&self, series: &MultivariateSeries, perm: Option<&Permutation>) -> Result<Tensor<f32>> {
        if series.dims() != self.dims {
            return Err(Error::shape(
                "encode",
                format!("model expects {} dimensions, series has {}", self.dims, series.dims()),
            ));
        }
        let (d, n) = (series.dims(), series.len());
        let as_f32 = |v: &[f64]| v.iter().map(|&x| x as f32).collect::<Vec<f32>>();
        match self.spec.family {
            Family::Cnn => Tensor::new([d, 1, n], as_f32(series.values())),
            Family::CCnn => Tensor::new([1, d, n], as_f32(series.values())),
            Family::DCnn | Family::DResNet => {
                let identity;
                let perm = match perm {
                    Some(p) => p,
                    None => {
                        identity = Permutation::identity(d);
                        &identity
                    }
                };
                let cube = build_cube(series, perm)?;
                let mut data = Vec::with_capacity(d * d * n);
                for col in 0..d {
                    for row in 0..d {
                        data.extend(cube.cell(row, col).iter().map(|&x| x as f32));
                    }
                }
                Tensor::new([d, d, n], data)
            }
        }
    }

    pub(crate) fn trace(&self, g: &mut Graph<f32>, input: Tensor<f32>, train: bool) -> Result<Trace> {
        let expected_c = self.spec.input_channels(self.dims);
        let ok = input.rank() == 4
            && input.shape()[1] == expected_c
            && input.shape()[2]
                == if self.spec.family == Family::CCnn || self.spec.family.uses_cube() {
                    self.dims
                } else {
                    1
                };
        if !ok {
            return Err(Error::shape(
                "forward",
                format!(
                    "{} with {} dimensions cannot take input {:?}",
                    self.spec.family,
                    self.dims,
                    input.shape()
                ),
            ));
        }
        let mut b = Builder {
            model: self,
            train,
            params: Vec::new(),
            norms: Vec::new(),
        };
        let mut x = g.constant(input);
        match self.spec.family {
            Family::DResNet => {
                let mut cin = self.dims;
                for (blk, &width) in self.spec.conv_filters.iter().enumerate() {
                    let skip_in = x;
                    let layers = self.spec.kernel_widths.len();
                    for j in 0..layers {
                        x = b.conv(g, x, &format!("block{blk}.conv{j}"))?;
                        x = b.norm(g, x, &format!("block{blk}.bn{j}"))?;
                        if j + 1 < layers {
                            x = g.relu(x)?;
                        }
                    }
                    let shortcut = if cin != width {
                        let s = b.conv(g, skip_in, &format!("block{blk}.shortcut"))?;
                        b.norm(g, s, &format!("block{blk}.shortcut_bn"))?
                    } else {
                        skip_in
                    };
                    x = g.add(x, shortcut)?;
                    x = g.relu(x)?;
                    cin = width;
                }
            }
            _ => {
                for i in 0..self.spec.conv_filters.len() {
                    x = b.conv(g, x, &format!("conv{i}"))?;
                    x = b.norm(g, x, &format!("bn{i}"))?;
                    x = g.relu(x)?;
                }
            }
        }
        let features = x;
        let pooled = g.global_avg_pool(features)?;
        let w = b.param(g, "dense.weight")?;
        let bias = b.param(g, "dense.bias")?;
        let z = g.matmul(pooled, w)?;
        let logits = g.add(z, bias)?;
        Ok(Trace {
            logits,
            features,
            params: b.params,
            norms: b.norms,
        })
    }

    /// Inference pass on `(C, H, n)` or `(B, C, H, n)` input.
    pub fn forward_logits(&self, input: &Tensor<f32>) -> Result<ForwardOutput> {
        let batched = match input.rank() {
            3 => input.reshape([&[1], input.shape()].concat())?,
            _ => input.clone(),
        };
        let mut g = Graph::new();
        let trace = self.trace(&mut g, batched, false)?;
        Ok(ForwardOutput {
            logits: g.value(trace.logits).clone(),
            features: g.value(trace.features).clone(),
        })
    }

    /// Predicted class of one series (cube families use the identity order).
    pub fn predict(&self, series: &MultivariateSeries) -> Result<usize> {
        let out = self.forward_logits(&self.encode(series, None)?)?;
        Ok(argmax(out.logits.data()))
    }
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}
