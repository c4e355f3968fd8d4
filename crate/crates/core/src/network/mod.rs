//! The slice regressor: a small conv feature stack, a 1×1 convolution with
//! ReLU, global average pooling and a fully connected scalar head.

pub(crate) mod checkpoint;

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, NodeId, Tensor};
use crate::error::{Result, UbrError};

pub use checkpoint::{load_params, read_checkpoint, save_params, write_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

/// One conv → ReLU → optional max-pool stage of the feature stack.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    pub out_channels: usize,
    pub kernel_size: usize,
    pub stride: usize,
    pub padding: usize,
    /// Square pooling window with stride equal to the window; absent for no pooling.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pool_window: Option<usize>,
}

impl StageSpec {
    pub fn new(out_channels: usize, kernel_size: usize, stride: usize, padding: usize, pool_window: Option<usize>) -> Self {
        StageSpec {
            out_channels,
            kernel_size,
            stride,
            padding,
            pool_window,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    /// Slice height and width.
    pub input_size: [usize; 2],
    pub stages: Vec<StageSpec>,
    pub conv6_channels: usize,
    pub seed: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            input_size: [32, 32],
            stages: [8, 16, 32]
                .into_iter()
                .map(|c| StageSpec::new(c, 3, 1, 1, Some(2)))
                .collect(),
            conv6_channels: 32,
            seed: 0,
        }
    }
}

impl NetworkConfig {
    /// Spatial extent of the activation maps entering Conv6.
    pub fn feature_extent(&self) -> Result<[usize; 2]> {
        let [mut h, mut w] = self.input_size;
        if h == 0 || w == 0 {
            return Err(UbrError::InvalidConfig("input size must be positive".into()));
        }
        for (i, stage) in self.stages.iter().enumerate() {
            let name = i + 1;
            if stage.out_channels == 0 || stage.kernel_size == 0 || stage.stride == 0 {
                return Err(UbrError::InvalidConfig(format!(
                    "stage {name}: channels, kernel size and stride must be positive"
                )));
            }
            if h + 2 * stage.padding < stage.kernel_size || w + 2 * stage.padding < stage.kernel_size {
                return Err(UbrError::InvalidConfig(format!(
                    "stage {name}: {h}×{w} input is smaller than its {k}×{k} kernel",
                    k = stage.kernel_size
                )));
            }
            h = (h + 2 * stage.padding - stage.kernel_size) / stage.stride + 1;
            w = (w + 2 * stage.padding - stage.kernel_size) / stage.stride + 1;
            if let Some(win) = stage.pool_window {
                if win == 0 || h < win || w < win {
                    return Err(UbrError::InvalidConfig(format!(
                        "stage {name}: pooling window {win} collapses the {h}×{w} map below 1"
                    )));
                }
                h = (h - win) / win + 1;
                w = (w - win) / win + 1;
            }
        }
        Ok([h, w])
    }

    pub fn validate(&self) -> Result<()> {
        if self.conv6_channels == 0 {
            return Err(UbrError::InvalidConfig("conv6_channels must be at least 1".into()));
        }
        self.feature_extent().map(|_| ())
    }

    /// Parameter names and shapes in forward order.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut shapes = Vec::new();
        let mut channels = 1;
        for (i, stage) in self.stages.iter().enumerate() {
            let k = stage.kernel_size;
            shapes.push((format!("stage{}.weight", i + 1), vec![stage.out_channels, channels, k, k]));
            shapes.push((format!("stage{}.bias", i + 1), vec![stage.out_channels]));
            channels = stage.out_channels;
        }
        shapes.push(("conv6.weight".into(), vec![self.conv6_channels, channels, 1, 1]));
        shapes.push(("conv6.bias".into(), vec![self.conv6_channels]));
        shapes.push(("fc7.weight".into(), vec![self.conv6_channels, 1]));
        shapes.push(("fc7.bias".into(), vec![1]));
        shapes
    }
}

/// Named parameter tensors plus the architecture they belong to.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    config: NetworkConfig,
    tensors: BTreeMap<String, Tensor>,
}

impl ModelParams {
    /// Validates that `tensors` holds exactly the parameters `config` implies.
    pub fn new(config: NetworkConfig, tensors: BTreeMap<String, Tensor>) -> Result<Self> {
        config.validate()?;
        let expected = config.parameter_shapes();
        if expected.len() != tensors.len() {
            return Err(UbrError::InvalidConfig(format!(
                "expected {} parameter tensors, got {}",
                expected.len(),
                tensors.len()
            )));
        }
        for (name, shape) in &expected {
            match tensors.get(name) {
                None => return Err(UbrError::InvalidConfig(format!("missing parameter `{name}`"))),
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(UbrError::InvalidShape {
                        shape: t.shape().to_vec(),
                        reason: format!("parameter `{name}` must have shape {shape:?}"),
                    })
                }
                Some(_) => {}
            }
        }
        Ok(ModelParams { config, tensors })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub(crate) fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    /// Parameters in forward order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.config
            .parameter_shapes()
            .into_iter()
            .map(move |(name, _)| {
                let (k, v) = self.tensors.get_key_value(&name).expect("validated");
                (k.as_str(), v)
            })
            .collect::<Vec<_>>()
            .into_iter()
    }

    pub fn num_weights(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }
}

/// He-style initialisation: kernels ~ N(0, 2/fan_in), biases zero.
pub fn init_network(config: &NetworkConfig) -> Result<ModelParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut tensors = BTreeMap::new();
    for (name, shape) in config.parameter_shapes() {
        let tensor = if name.ends_with(".bias") {
            Tensor::zeros(shape)?
        } else {
            let fan_in: usize = shape[1..].iter().product();
            let fan_in = if name == "fc7.weight" { shape[0] } else { fan_in };
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
            let len = shape.iter().product();
            Tensor::new(shape, (0..len).map(|_| normal.sample(&mut rng)).collect())?
        };
        tensors.insert(name, tensor);
    }
    ModelParams::new(config.clone(), tensors)
}

/// Node ids of a network wired into a graph.
#[derive(Debug, Clone)]
pub struct NetworkNodes {
    /// Parameter leaves in forward order.
    pub params: Vec<(String, NodeId)>,
    /// `[B, 1]` Fc7 outputs.
    pub scores: NodeId,
    /// `[B, conv6_channels]` pooled features.
    pub pooled: NodeId,
}

/// Rewrites the post-Conv6 activation maps before global average pooling.
pub type GapHook<'a> = &'a mut dyn FnMut(&mut Tensor);

fn check_batch(config: &NetworkConfig, batch: &Tensor) -> Result<()> {
    let s = batch.shape();
    if s.len() != 4 {
        return Err(UbrError::ShapeMismatch {
            op: "forward",
            axis: "rank",
            expected: 4,
            actual: s.len(),
        });
    }
    let axes = [("channels", 1, s[1]), ("height", config.input_size[0], s[2]), ("width", config.input_size[1], s[3])];
    for (axis, expected, actual) in axes {
        if expected != actual {
            return Err(UbrError::ShapeMismatch {
                op: "forward",
                axis,
                expected,
                actual,
            });
        }
    }
    Ok(())
}

/// Wires the network onto `input` using already-created parameter leaves.
pub fn wire(
    graph: &mut Graph,
    config: &NetworkConfig,
    params: &BTreeMap<String, NodeId>,
    input: NodeId,
    hook: Option<GapHook<'_>>,
) -> Result<(NodeId, NodeId)> {
    check_batch(config, graph.value(input))?;
    let param = |name: &str| {
        params
            .get(name)
            .copied()
            .ok_or_else(|| UbrError::InvalidConfig(format!("missing parameter `{name}`")))
    };
    let mut x = input;
    for (i, stage) in config.stages.iter().enumerate() {
        let n = i + 1;
        x = graph.conv2d(x, param(&format!("stage{n}.weight"))?, param(&format!("stage{n}.bias"))?, stage.stride, stage.padding)?;
        x = graph.relu(x);
        if let Some(win) = stage.pool_window {
            x = graph.maxpool2d(x, win, win)?;
        }
    }
    x = graph.conv2d(x, param("conv6.weight")?, param("conv6.bias")?, 1, 0)?;
    x = graph.relu(x);
    if let Some(hook) = hook {
        let mut maps = graph.value(x).clone();
        hook(&mut maps);
        x = graph.constant(maps);
    }
    let pooled = graph.global_avg_pool(x)?;
    let scores = graph.fully_connected(pooled, param("fc7.weight")?, param("fc7.bias")?)?;
    Ok((scores, pooled))
}

/// Adds `params` as trainable leaves and wires the network onto `input`.
pub fn build_graph(graph: &mut Graph, params: &ModelParams, input: NodeId) -> Result<NetworkNodes> {
    let mut leaves = Vec::new();
    let mut lookup = BTreeMap::new();
    for (name, tensor) in params.iter() {
        let id = graph.parameter(tensor.clone());
        leaves.push((name.to_string(), id));
        lookup.insert(name.to_string(), id);
    }
    let (scores, pooled) = wire(graph, params.config(), &lookup, input, None)?;
    Ok(NetworkNodes {
        params: leaves,
        scores,
        pooled,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkOutput {
    /// `[B]` slice scores.
    pub scores: Tensor,
    /// `[B, conv6_channels]` globally pooled Conv6 features.
    pub pooled: Tensor,
}

/// Largest batch evaluated in one graph during inference.
pub const INFERENCE_CHUNK: usize = 64;

fn forward_chunk(params: &ModelParams, batch: Tensor, hook: Option<GapHook<'_>>) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut graph = Graph::new();
    let lookup: BTreeMap<String, NodeId> = params
        .iter()
        .map(|(name, t)| (name.to_string(), graph.constant(t.clone())))
        .collect();
    let input = graph.constant(batch);
    let (scores, pooled) = wire(&mut graph, params.config(), &lookup, input, hook)?;
    Ok((graph.value(scores).data().to_vec(), graph.value(pooled).data().to_vec()))
}

/// Inference over `[B, 1, H, W]`. Slices are independent, so large batches are
/// split into chunks without changing any result.
pub fn forward(params: &ModelParams, batch: &Tensor) -> Result<NetworkOutput> {
    check_batch(params.config(), batch)?;
    let b = batch.shape()[0];
    let slice_len = batch.len() / b;
    let mut scores = Vec::with_capacity(b);
    let mut pooled = Vec::with_capacity(b * params.config().conv6_channels);
    for chunk in batch.data().chunks(INFERENCE_CHUNK * slice_len) {
        let n = chunk.len() / slice_len;
        let mut shape = batch.shape().to_vec();
        shape[0] = n;
        let (s, p) = forward_chunk(params, Tensor::new(shape, chunk.to_vec())?, None)?;
        scores.extend(s);
        pooled.extend(p);
    }
    Ok(NetworkOutput {
        scores: Tensor::new(vec![b], scores)?,
        pooled: Tensor::new(vec![b, params.config().conv6_channels], pooled)?,
    })
}

/// Inference with `hook` applied to the post-Conv6 maps of the whole batch.
pub fn forward_with_hook(params: &ModelParams, batch: &Tensor, hook: GapHook<'_>) -> Result<NetworkOutput> {
    check_batch(params.config(), batch)?;
    let b = batch.shape()[0];
    let (scores, pooled) = forward_chunk(params, batch.clone(), Some(hook))?;
    Ok(NetworkOutput {
        scores: Tensor::new(vec![b], scores)?,
        pooled: Tensor::new(vec![b, params.config().conv6_channels], pooled)?,
    })
}
