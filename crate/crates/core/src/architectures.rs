//! The four forecasting networks (Basic, Stacked, Bi and Conv LSTM), their
//! parameter counts, and the binary model file format.
//!
//! Tensor order, which is also the on-disk weight order:
//!
//! | architecture | tensors |
//! |---|---|
//! | Basic   | `W [4h,d]`, `U [4h,h]`, `b [4h]`, head `[1,h]`, head bias `[1]` |
//! | Stacked | per layer `W_l`, `U_l`, `b_l` (layer > 0 has input width `h`), head `[1,h]`, head bias |
//! | Bi      | forward `W,U,b`, backward `W,U,b`, head `[1,2h]`, head bias |
//! | Conv    | kernel `[4h_c, 1+h_c, k]`, bias `[4h_c]`, head `[1,h_c]`, head bias |
//!
//! Model file layout: 8 magic bytes `CCFMODEL`, `u32` format version,
//! `u64` header length, header as canonical JSON (descriptor + metadata),
//! the weights as little-endian `f64`, and a trailing `u32` CRC-32 of all
//! preceding bytes. Every integer is little-endian.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use chrono::{DateTime, Utc};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FeatureConfig, ScalerState};
use crate::neuralcore::{
    conv_lstm_step, lstm_step, ConvLstmCellParams, ConvLstmNodes, Graph, LstmCellParams, LstmNodes,
    NodeId, Tensor,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    Basic,
    Stacked,
    Bi,
    Conv,
}

impl Architecture {
    pub const ALL: [Architecture; 4] = [
        Architecture::Basic,
        Architecture::Stacked,
        Architecture::Bi,
        Architecture::Conv,
    ];
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Architecture::Basic => "BasicLSTM",
            Architecture::Stacked => "StackedLSTM",
            Architecture::Bi => "BiLSTM",
            Architecture::Conv => "ConvLSTM",
        })
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "basic" | "basiclstm" | "lstm" => Ok(Architecture::Basic),
            "stacked" | "stackedlstm" => Ok(Architecture::Stacked),
            "bi" | "bilstm" => Ok(Architecture::Bi),
            "conv" | "convlstm" => Ok(Architecture::Conv),
            other => Err(Error::UnknownName(format!("architecture `{other}`"))),
        }
    }
}

/// Input channels per feature position for the ConvLSTM.
pub const CONV_INPUT_CHANNELS: usize = 1;

/// Shape of a network, independent of data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub architecture: Architecture,
    /// Feature count `d` (the spatial length for Conv).
    pub input_dim: usize,
    /// Hidden units per layer, or hidden channels for Conv.
    pub hidden: usize,
    /// Layer count; at least 2 for Stacked, 1 otherwise.
    pub layers: usize,
    /// Odd convolution width (Conv only).
    pub kernel: usize,
}

impl NetworkSpec {
    pub fn new(architecture: Architecture, input_dim: usize, hidden: usize) -> Self {
        Self {
            architecture,
            input_dim,
            hidden,
            layers: if architecture == Architecture::Stacked { 2 } else { 1 },
            kernel: if architecture == Architecture::Conv { 3 } else { 0 },
        }
    }

    pub fn with_layers(mut self, layers: usize) -> Self {
        self.layers = layers;
        self
    }

    pub fn with_kernel(mut self, kernel: usize) -> Self {
        self.kernel = kernel;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.input_dim == 0 || self.hidden == 0 {
            return bad(format!("input_dim {} and hidden {} must be positive", self.input_dim, self.hidden));
        }
        match self.architecture {
            Architecture::Stacked if self.layers < 2 => {
                bad(format!("StackedLSTM needs at least 2 layers, got {}", self.layers))
            }
            Architecture::Basic | Architecture::Bi | Architecture::Conv if self.layers != 1 => {
                bad(format!("{} has exactly 1 layer, got {}", self.architecture, self.layers))
            }
            Architecture::Conv if self.kernel.is_multiple_of(2) => {
                bad(format!("ConvLSTM kernel must be odd, got {}", self.kernel))
            }
            _ => Ok(()),
        }
    }

    /// Tensor shapes in storage order.
    pub fn tensor_shapes(&self) -> Vec<Vec<usize>> {
        let (d, h) = (self.input_dim, self.hidden);
        let lstm = |input: usize| vec![vec![4 * h, input], vec![4 * h, h], vec![4 * h]];
        let mut shapes = Vec::new();
        match self.architecture {
            Architecture::Basic => {
                shapes.extend(lstm(d));
                shapes.extend([vec![1, h], vec![1]]);
            }
            Architecture::Stacked => {
                shapes.extend(lstm(d));
                for _ in 1..self.layers {
                    shapes.extend(lstm(h));
                }
                shapes.extend([vec![1, h], vec![1]]);
            }
            Architecture::Bi => {
                shapes.extend(lstm(d));
                shapes.extend(lstm(d));
                shapes.extend([vec![1, 2 * h], vec![1]]);
            }
            Architecture::Conv => {
                shapes.push(vec![4 * h, CONV_INPUT_CHANNELS + h, self.kernel]);
                shapes.push(vec![4 * h]);
                shapes.extend([vec![1, h], vec![1]]);
            }
        }
        shapes
    }
}

/// Closed-form trainable parameter count.
pub fn param_count(spec: &NetworkSpec) -> usize {
    let (d, h) = (spec.input_dim, spec.hidden);
    match spec.architecture {
        Architecture::Basic => 4 * h * (d + h + 1) + (h + 1),
        Architecture::Stacked => {
            4 * h * (d + h + 1) + (spec.layers - 1) * 4 * h * (2 * h + 1) + (h + 1)
        }
        Architecture::Bi => 8 * h * (d + h + 1) + (2 * h + 1),
        Architecture::Conv => {
            ConvLstmCellParams::param_count(CONV_INPUT_CHANNELS, h, spec.kernel) + (h + 1)
        }
    }
}

/// Weights of one network.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub spec: NetworkSpec,
    pub params: Vec<Tensor>,
}

impl Network {
    /// Seeded initialization. LSTM gates draw from uniform(-1/sqrt(h),
    /// 1/sqrt(h)) with forget-gate bias 1; the head draws from
    /// uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) with zero bias.
    pub fn build(spec: NetworkSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, h) = (spec.input_dim, spec.hidden);
        let mut params = Vec::new();
        let head_in = match spec.architecture {
            Architecture::Basic => {
                params.extend(LstmCellParams::init(d, h, &mut rng).into_tensors());
                h
            }
            Architecture::Stacked => {
                params.extend(LstmCellParams::init(d, h, &mut rng).into_tensors());
                for _ in 1..spec.layers {
                    params.extend(LstmCellParams::init(h, h, &mut rng).into_tensors());
                }
                h
            }
            Architecture::Bi => {
                params.extend(LstmCellParams::init(d, h, &mut rng).into_tensors());
                params.extend(LstmCellParams::init(d, h, &mut rng).into_tensors());
                2 * h
            }
            Architecture::Conv => {
                let p = ConvLstmCellParams::init(CONV_INPUT_CHANNELS, h, spec.kernel, &mut rng)?;
                params.push(p.weight);
                params.push(p.bias);
                h
            }
        };
        let bound = 1.0 / (head_in as f64).sqrt();
        params.push(Tensor::uniform(&[1, head_in], bound, &mut rng));
        params.push(Tensor::zeros(&[1]));
        Ok(Self { spec, params })
    }

    pub fn from_params(spec: NetworkSpec, params: Vec<Tensor>) -> Result<Self> {
        spec.validate()?;
        let shapes = spec.tensor_shapes();
        if shapes.len() != params.len() || shapes.iter().zip(&params).any(|(s, p)| s != p.shape()) {
            return Err(Error::Shape(format!(
                "parameters do not match {} layout",
                spec.architecture
            )));
        }
        Ok(Self { spec, params })
    }

    /// Total element count of the live parameter tensors.
    pub fn live_param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(Tensor::is_finite)
    }

    /// Records the forward pass for a batch of `W x d` row-major windows and
    /// returns the `[B, 1]` prediction node. `nodes` are the graph handles of
    /// `self.params`, in order.
    pub fn forward(&self, g: &mut Graph, nodes: &[NodeId], batch: &[&[f64]]) -> Result<NodeId> {
        let d = self.spec.input_dim;
        let h = self.spec.hidden;
        let bsz = batch.len();
        if bsz == 0 {
            return Err(Error::EmptyInput("forward on an empty batch".into()));
        }
        let len = batch[0].len();
        if len == 0 || !len.is_multiple_of(d) || batch.iter().any(|s| s.len() != len) {
            return Err(Error::Shape(format!(
                "windows must be W x {d} values and equal length, got {len}"
            )));
        }
        let steps = len / d;
        let mut xs = Vec::with_capacity(steps);
        for t in 0..steps {
            let mut data = Vec::with_capacity(bsz * d);
            for s in batch {
                data.extend_from_slice(&s[t * d..(t + 1) * d]);
            }
            xs.push(g.input(Tensor::new(vec![bsz, d], data)?));
        }
        let lstm_nodes = |i: usize| LstmNodes {
            w: nodes[3 * i],
            u: nodes[3 * i + 1],
            b: nodes[3 * i + 2],
            hidden: h,
        };
        let run = |g: &mut Graph, p: &LstmNodes, seq: &[NodeId]| -> Result<Vec<NodeId>> {
            let mut hs = g.input(Tensor::zeros(&[bsz, h]));
            let mut cs = g.input(Tensor::zeros(&[bsz, h]));
            let mut out = Vec::with_capacity(seq.len());
            for &x in seq {
                (hs, cs) = lstm_step(g, p, x, hs, cs)?;
                out.push(hs);
            }
            Ok(out)
        };
        let n = nodes.len();
        let features = match self.spec.architecture {
            Architecture::Basic => *run(g, &lstm_nodes(0), &xs)?.last().unwrap(),
            Architecture::Stacked => {
                let mut seq = xs;
                for layer in 0..self.spec.layers {
                    seq = run(g, &lstm_nodes(layer), &seq)?;
                }
                *seq.last().unwrap()
            }
            Architecture::Bi => {
                let fwd = *run(g, &lstm_nodes(0), &xs)?.last().unwrap();
                let rev: Vec<NodeId> = xs.iter().rev().copied().collect();
                let bwd = *run(g, &lstm_nodes(1), &rev)?.last().unwrap();
                g.concat_cols(&[fwd, bwd])?
            }
            Architecture::Conv => {
                let p = ConvLstmNodes {
                    weight: nodes[0],
                    bias: nodes[1],
                    in_channels: CONV_INPUT_CHANNELS,
                    hidden_channels: h,
                };
                let mut hs = g.input(Tensor::zeros(&[bsz, h * d]));
                let mut cs = g.input(Tensor::zeros(&[bsz, h * d]));
                for &x in &xs {
                    (hs, cs) = conv_lstm_step(g, &p, x, hs, cs, d)?;
                }
                g.channel_mean(hs, h, d)?
            }
        };
        let y = g.matmul_bt(features, nodes[n - 2])?;
        g.add_row_bias(y, nodes[n - 1])
    }

    /// Predictions for a batch of windows.
    pub fn predict(&self, batch: &[&[f64]]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let nodes: Vec<NodeId> = self.params.iter().map(|p| g.input(p.clone())).collect();
        let y = self.forward(&mut g, &nodes, batch)?;
        Ok(g.value(y).data().to_vec())
    }

    /// MSE loss over the batch and its gradient for every parameter tensor.
    pub fn loss_and_grads(&self, batch: &[&[f64]], targets: &[f64]) -> Result<(f64, Vec<Tensor>)> {
        if targets.len() != batch.len() {
            return Err(Error::Shape(format!("{} targets for {} windows", targets.len(), batch.len())));
        }
        let mut g = Graph::new();
        let nodes: Vec<NodeId> = self.params.iter().map(|p| g.param(p.clone())).collect();
        let y = self.forward(&mut g, &nodes, batch)?;
        let t = g.input(Tensor::new(vec![targets.len(), 1], targets.to_vec())?);
        let loss = g.mse(y, t)?;
        let mut grads = g.backward(loss)?;
        let value = g.value(loss).data()[0];
        Ok((value, nodes.iter().map(|n| grads.take(*n)).collect()))
    }
}

/// Everything needed to rebuild features and run a trained network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDescriptor {
    pub network: NetworkSpec,
    pub target: String,
    pub feature_config: FeatureConfig,
    pub feature_fingerprint: String,
    pub scaler: ScalerState,
}

impl ModelDescriptor {
    pub fn new(network: NetworkSpec, target: &str, feature_config: FeatureConfig, scaler: ScalerState) -> Result<Self> {
        let d = feature_config.feature_count(target);
        if d != network.input_dim {
            return Err(Error::Shape(format!(
                "network input_dim {} but feature config yields {d} columns",
                network.input_dim
            )));
        }
        Ok(Self {
            network,
            target: target.to_string(),
            feature_fingerprint: feature_config.fingerprint(target),
            feature_config,
            scaler,
        })
    }

    pub fn window(&self) -> usize {
        self.feature_config.window
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMetadata {
    pub seed: u64,
    pub deterministic: bool,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub data_span: Option<(DateTime<Utc>, DateTime<Utc>)>,
    #[serde(default)]
    pub dataset_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub descriptor: ModelDescriptor,
    pub network: Network,
    pub metadata: TrainingMetadata,
}

#[derive(Serialize, Deserialize)]
struct FileHeader {
    descriptor: ModelDescriptor,
    metadata: TrainingMetadata,
}

pub const MODEL_MAGIC: &[u8; 8] = b"CCFMODEL";
pub const MODEL_FORMAT_VERSION: u32 = 1;

impl TrainedModel {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if !self.network.is_finite() {
            return Err(Error::InvalidArgument("refusing to save non-finite weights".into()));
        }
        let header = serde_json::to_vec(&FileHeader {
            descriptor: self.descriptor.clone(),
            metadata: self.metadata.clone(),
        })?;
        let mut buf = Vec::with_capacity(24 + header.len() + 8 * self.network.live_param_count());
        buf.extend_from_slice(MODEL_MAGIC);
        buf.extend_from_slice(&MODEL_FORMAT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
        buf.extend_from_slice(&header);
        for t in &self.network.params {
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&buf);
        buf.extend_from_slice(&crc.to_le_bytes());
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        const PREFIX: usize = 8 + 4 + 8;
        if bytes.len() < PREFIX + 4 {
            return Err(Error::Corrupt(format!("file truncated at {} bytes", bytes.len())));
        }
        if &bytes[..8] != MODEL_MAGIC {
            return Err(Error::Corrupt("bad magic bytes".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != MODEL_FORMAT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: MODEL_FORMAT_VERSION,
            });
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().unwrap());
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(Error::Checksum { stored, computed });
        }
        let hlen = u64::from_le_bytes(body[12..20].try_into().unwrap()) as usize;
        let header_end = PREFIX
            .checked_add(hlen)
            .filter(|e| *e <= body.len())
            .ok_or_else(|| Error::Corrupt("header length exceeds file".into()))?;
        let header: FileHeader = serde_json::from_slice(&body[PREFIX..header_end])?;
        let spec = header.descriptor.network;
        spec.validate()?;
        let mut rest = &body[header_end..];
        if rest.len() != 8 * param_count(&spec) {
            return Err(Error::Corrupt(format!(
                "weight block has {} bytes, descriptor needs {}",
                rest.len(),
                8 * param_count(&spec)
            )));
        }
        let mut params = Vec::new();
        for shape in spec.tensor_shapes() {
            let n: usize = shape.iter().product();
            let data = rest[..8 * n]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            rest = &rest[8 * n..];
            params.push(Tensor::new(shape, data)?);
        }
        Ok(Self {
            descriptor: header.descriptor,
            network: Network::from_params(spec, params)?,
            metadata: header.metadata,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
