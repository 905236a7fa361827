//! Compact convolutional backbone: a temporal filter bank, a depthwise
//! spatial convolution over all channels, a separable convolution, and a
//! dense head. Instantiated twice during training — the teacher over the
//! full source channel set, the student over the common subset — with
//! identical hyperparameters everywhere except the spatial convolution's
//! channel extent.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Graph, NodeId, Padding, Real, Tensor};
use crate::util::mix_seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ArchConfig {
    /// Temporal filter count (F1).
    pub temporal_filters: usize,
    /// Depthwise multiplier of the spatial convolution (D).
    pub depth_multiplier: usize,
    /// Output filters of the separable convolution (F2).
    pub separable_filters: usize,
    /// Temporal kernel length; `for_sampling_rate` sets ⌈rate/2⌉.
    pub kernel_length: usize,
    /// Kernel length of the separable depthwise stage.
    pub separable_length: usize,
    pub pool1: usize,
    pub pool2: usize,
    pub dropout: f64,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            temporal_filters: 8,
            depth_multiplier: 2,
            separable_filters: 16,
            kernel_length: 64,
            separable_length: 16,
            pool1: 4,
            pool2: 8,
            dropout: 0.25,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
        }
    }
}

impl ArchConfig {
    /// Default architecture with the temporal kernel sized to half the
    /// sampling rate, rounded up.
    pub fn for_sampling_rate(rate: u32) -> Self {
        ArchConfig {
            kernel_length: (rate as usize).div_ceil(2),
            ..ArchConfig::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.temporal_filters == 0
            || self.depth_multiplier == 0
            || self.separable_filters == 0
            || self.kernel_length == 0
            || self.separable_length == 0
            || self.pool1 == 0
            || self.pool2 == 0
        {
            return Err(Error::InvalidArgument(
                "architecture sizes must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidArgument(format!(
                "dropout must be in [0,1), got {}",
                self.dropout
            )));
        }
        Ok(())
    }
}

/// Per-layer batch-norm running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct BnState<R> {
    pub mean: Vec<R>,
    pub var: Vec<R>,
}

/// Feature extractor plus classifier over the tensor engine.
#[derive(Clone, Debug)]
pub struct Network<R: Real> {
    arch: ArchConfig,
    channels: usize,
    samples: usize,
    classes: usize,
    feature_dim: usize,
    params: BTreeMap<String, Tensor<R>>,
    running: BTreeMap<String, BnState<R>>,
}

/// Node handles returned by [`Network::wire`].
pub struct Wired {
    pub input: NodeId,
    pub features: NodeId,
    pub logits: NodeId,
    /// Train-mode batch-norm nodes: (state key, node, reduce count).
    pub bn_nodes: Vec<(String, NodeId, usize)>,
}

/// Eager forward outputs.
pub struct ForwardOut<R> {
    pub features: Tensor<R>,
    pub logits: Tensor<R>,
    /// Batch statistics per batch-norm layer (train mode only).
    pub bn_stats: Vec<(String, Vec<R>, Vec<R>, usize)>,
}

/// Initialize a network with uniform fan-in weights, zero biases, and
/// identity batch-norm state. The same seed reproduces the parameters
/// bitwise.
pub fn build_network<R: Real>(
    channels: usize,
    samples: usize,
    classes: usize,
    arch: &ArchConfig,
    seed: u64,
) -> Result<Network<R>> {
    arch.validate()?;
    if channels == 0 {
        return Err(Error::InvalidArgument("channels must be positive".into()));
    }
    if classes < 2 {
        return Err(Error::InvalidArgument(format!(
            "classes must be at least 2, got {classes}"
        )));
    }
    let min_t = arch.pool1 * arch.pool2;
    if samples < min_t {
        return Err(Error::InvalidArgument(format!(
            "samples={samples} too short for the pooling pipeline; minimum is {min_t}"
        )));
    }
    let f1 = arch.temporal_filters;
    let d = arch.depth_multiplier;
    let f2 = arch.separable_filters;
    let t_pooled = (samples / arch.pool1) / arch.pool2;
    let feature_dim = f2 * t_pooled;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = BTreeMap::new();
    let mut add_uniform = |name: &str, shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng| {
        let limit = 1.0 / (fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let data: Vec<R> = (0..n)
            .map(|_| R::of_f64(rng.gen_range(-limit..limit)))
            .collect();
        params.insert(
            name.to_string(),
            Tensor::new(shape.to_vec(), data).expect("static shape"),
        );
    };
    add_uniform(
        "conv1.w",
        &[f1, 1, 1, arch.kernel_length],
        arch.kernel_length,
        &mut rng,
    );
    add_uniform("depthwise.w", &[f1, d, channels, 1], channels, &mut rng);
    add_uniform(
        "sep.depthwise.w",
        &[f1 * d, 1, 1, arch.separable_length],
        arch.separable_length,
        &mut rng,
    );
    add_uniform("sep.pointwise.w", &[f2, f1 * d, 1, 1], f1 * d, &mut rng);
    add_uniform("dense.w", &[feature_dim, classes], feature_dim, &mut rng);
    params.insert("dense.b".to_string(), Tensor::zeros(&[1, classes]));

    let mut running = BTreeMap::new();
    for (name, c) in [("bn1", f1), ("bn2", f1 * d), ("bn3", f2)] {
        params.insert(format!("{name}.gamma"), Tensor::filled(&[c], R::one()));
        params.insert(format!("{name}.beta"), Tensor::zeros(&[c]));
        running.insert(
            name.to_string(),
            BnState {
                mean: vec![R::zero(); c],
                var: vec![R::one(); c],
            },
        );
    }

    Ok(Network {
        arch: arch.clone(),
        channels,
        samples,
        classes,
        feature_dim,
        params,
        running,
    })
}

impl<R: Real> Network<R> {
    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor<R>> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut BTreeMap<String, Tensor<R>> {
        &mut self.params
    }

    pub fn running(&self) -> &BTreeMap<String, BnState<R>> {
        &self.running
    }

    pub fn parameter_count(&self) -> usize {
        self.params.values().map(|t| t.numel()).sum()
    }

    /// (name, shape) for every trainable parameter, in name order.
    pub fn parameter_manifest(&self) -> Vec<(String, Vec<usize>)> {
        self.params
            .iter()
            .map(|(k, v)| (k.clone(), v.shape().to_vec()))
            .collect()
    }

    /// Clone of the parameter map, in the form `Graph::forward` expects.
    pub fn bindings(&self) -> BTreeMap<String, Tensor<R>> {
        self.params.clone()
    }

    /// Append the network to a graph. `input` must be a `n×C×T` node;
    /// parameters enter as named leaves so gradients can flow into them.
    /// Dropout masks derive from `seed` (train mode only).
    pub fn wire(&self, g: &mut Graph<R>, input: NodeId, mode: Mode, seed: u64) -> Result<Wired> {
        let shape = g.shape(input).to_vec();
        let (n, c, t) = match shape.as_slice() {
            &[n, c, t] => (n, c, t),
            s => {
                return Err(Error::InvalidArgument(format!(
                    "network input must be 3-D trials x channels x samples, got {s:?}"
                )))
            }
        };
        if c != self.channels || t != self.samples {
            return Err(Error::InvalidArgument(format!(
                "network expects {}x{} trials, got {c}x{t}",
                self.channels, self.samples
            )));
        }
        let arch = &self.arch;
        let f1 = arch.temporal_filters;
        let d = arch.depth_multiplier;
        let f2 = arch.separable_filters;
        let mut bn_nodes = Vec::new();

        let x = g.reshape(input, &[n, 1, c, t])?;
        let conv1_w = g.leaf("conv1.w", &[f1, 1, 1, arch.kernel_length])?;
        let x = g.conv2d(x, conv1_w, Padding::Same)?;
        let x = self.bn(g, x, "bn1", mode, n * c * t, &mut bn_nodes)?;

        let dw = g.leaf("depthwise.w", &[f1, d, c, 1])?;
        let x = g.depthwise_conv2d(x, dw, Padding::Valid)?;
        let x = self.bn(g, x, "bn2", mode, n * t, &mut bn_nodes)?;
        let x = g.elu(x);
        let x = g.avg_pool(x, 1, arch.pool1)?;
        let x = self.drop(g, x, mode, seed, 1)?;

        let sd = g.leaf("sep.depthwise.w", &[f1 * d, 1, 1, arch.separable_length])?;
        let x = g.depthwise_conv2d(x, sd, Padding::Same)?;
        let sp = g.leaf("sep.pointwise.w", &[f2, f1 * d, 1, 1])?;
        let x = g.conv2d(x, sp, Padding::Valid)?;
        let t1 = t / arch.pool1;
        let x = self.bn(g, x, "bn3", mode, n * t1, &mut bn_nodes)?;
        let x = g.elu(x);
        let x = g.avg_pool(x, 1, arch.pool2)?;
        let x = self.drop(g, x, mode, seed, 2)?;

        let features = g.reshape(x, &[n, self.feature_dim])?;
        let w = g.leaf("dense.w", &[self.feature_dim, self.classes])?;
        let b = g.leaf("dense.b", &[1, self.classes])?;
        let prod = g.matmul(features, w)?;
        let logits = g.add(prod, b)?;

        Ok(Wired {
            input,
            features,
            logits,
            bn_nodes,
        })
    }

    fn bn(
        &self,
        g: &mut Graph<R>,
        x: NodeId,
        name: &str,
        mode: Mode,
        reduce_count: usize,
        bn_nodes: &mut Vec<(String, NodeId, usize)>,
    ) -> Result<NodeId> {
        let channels = g.shape(x)[1];
        let gamma = g.leaf(&format!("{name}.gamma"), &[channels])?;
        let beta = g.leaf(&format!("{name}.beta"), &[channels])?;
        match mode {
            Mode::Train => {
                let node = g.batch_norm_train(x, gamma, beta, self.arch.bn_eps)?;
                bn_nodes.push((name.to_string(), node, reduce_count));
                Ok(node)
            }
            Mode::Eval => {
                let state = &self.running[name];
                g.batch_norm_eval(x, gamma, beta, &state.mean, &state.var, self.arch.bn_eps)
            }
        }
    }

    fn drop(
        &self,
        g: &mut Graph<R>,
        x: NodeId,
        mode: Mode,
        seed: u64,
        layer: u64,
    ) -> Result<NodeId> {
        match mode {
            Mode::Train if self.arch.dropout > 0.0 => {
                g.dropout(x, self.arch.dropout, mix_seed(&[seed, layer]))
            }
            _ => Ok(x),
        }
    }

    /// Eager forward without gradients: features, logits, and (in train
    /// mode) the batch-norm statistics. Does not mutate the network.
    pub fn forward_full(&self, batch: &Tensor<R>, mode: Mode, seed: u64) -> Result<ForwardOut<R>> {
        let mut g = Graph::new();
        let input = g.constant(batch.clone());
        let wired = self.wire(&mut g, input, mode, seed)?;
        g.forward(wired.logits, &self.bindings())?;
        let features = g.value(wired.features).expect("forward ran").clone();
        let logits = g.value(wired.logits).expect("forward ran").clone();
        let bn_stats = wired
            .bn_nodes
            .iter()
            .map(|(name, node, count)| {
                let (mean, var) = g.bn_stats(*node).expect("train-mode bn node");
                (name.clone(), mean.to_vec(), var.to_vec(), *count)
            })
            .collect();
        Ok(ForwardOut {
            features,
            logits,
            bn_stats,
        })
    }

    pub fn forward_features(&self, batch: &Tensor<R>, mode: Mode, seed: u64) -> Result<Tensor<R>> {
        Ok(self.forward_full(batch, mode, seed)?.features)
    }

    pub fn forward_logits(&self, batch: &Tensor<R>, mode: Mode, seed: u64) -> Result<Tensor<R>> {
        Ok(self.forward_full(batch, mode, seed)?.logits)
    }

    /// Deterministic logits under batch statistics: train-mode batch norm
    /// with dropout disabled. Used for distillation targets, where eval-mode
    /// running statistics would lag badly during the first epochs.
    pub fn forward_logits_batchstats(&self, batch: &Tensor<R>) -> Result<Tensor<R>> {
        let mut surrogate = self.clone();
        surrogate.arch.dropout = 0.0;
        Ok(surrogate.forward_full(batch, Mode::Train, 0)?.logits)
    }

    /// Fold batch statistics into the running statistics with the
    /// configured momentum (unbiased variance, matching common batch-norm
    /// semantics).
    pub fn update_running_stats(&mut self, stats: &[(String, Vec<R>, Vec<R>, usize)]) {
        let m = R::of_f64(self.arch.bn_momentum);
        let keep = R::one() - m;
        for (name, mean, var, count) in stats {
            let state = self.running.get_mut(name).expect("known bn layer");
            let correction = if *count > 1 {
                R::of_f64(*count as f64 / (*count as f64 - 1.0))
            } else {
                R::one()
            };
            for (r, &b) in state.mean.iter_mut().zip(mean) {
                *r = keep * *r + m * b;
            }
            for (r, &b) in state.var.iter_mut().zip(var) {
                *r = keep * *r + m * (b * correction);
            }
        }
    }

    // -- checkpoint format ---------------------------------------------------

    /// Write the checkpoint: a plain-text manifest (`name shape` lines)
    /// followed by a `DATA` marker and the tensors as little-endian f32 in
    /// manifest order. Parameters are stored first, then running stats.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut head = String::new();
        head.push_str("SDDA-CKPT v1\n");
        head.push_str(&format!("channels {}\n", self.channels));
        head.push_str(&format!("samples {}\n", self.samples));
        head.push_str(&format!("classes {}\n", self.classes));
        let a = &self.arch;
        head.push_str(&format!(
            "arch temporal_filters={} depth_multiplier={} separable_filters={} \
             kernel_length={} separable_length={} pool1={} pool2={} dropout={} \
             bn_momentum={} bn_eps={}\n",
            a.temporal_filters,
            a.depth_multiplier,
            a.separable_filters,
            a.kernel_length,
            a.separable_length,
            a.pool1,
            a.pool2,
            a.dropout,
            a.bn_momentum,
            a.bn_eps
        ));
        let mut order: Vec<(String, Vec<usize>, Vec<R>)> = Vec::new();
        for (name, t) in &self.params {
            order.push((format!("param {name}"), t.shape().to_vec(), t.data().to_vec()));
        }
        for (name, state) in &self.running {
            order.push((
                format!("running {name}.mean"),
                vec![state.mean.len()],
                state.mean.clone(),
            ));
            order.push((
                format!("running {name}.var"),
                vec![state.var.len()],
                state.var.clone(),
            ));
        }
        head.push_str(&format!("tensors {}\n", order.len()));
        for (name, shape, _) in &order {
            let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
            head.push_str(&format!("{name} {}\n", dims.join("x")));
        }
        head.push_str("DATA\n");
        let mut f = fs::File::create(path)?;
        f.write_all(head.as_bytes())?;
        for (_, _, data) in &order {
            for v in data {
                f.write_all(&(v.as_f64() as f32).to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// Parse a checkpoint written by [`Network::save_checkpoint`].
    pub fn load_checkpoint(path: &Path) -> Result<Network<R>> {
        let bytes = fs::read(path)?;
        let marker = b"DATA\n";
        let data_at = bytes
            .windows(marker.len())
            .position(|w| w == marker)
            .ok_or_else(|| Error::Data("checkpoint has no DATA marker".into()))?;
        let head = std::str::from_utf8(&bytes[..data_at])
            .map_err(|_| Error::Data("checkpoint header is not UTF-8".into()))?;
        let mut lines = head.lines();
        let magic = lines.next().unwrap_or("");
        if magic != "SDDA-CKPT v1" {
            return Err(Error::Data(format!(
                "unsupported checkpoint header '{magic}'"
            )));
        }
        let mut channels = None;
        let mut samples = None;
        let mut classes = None;
        let mut arch = ArchConfig::default();
        let mut manifest: Vec<(String, String, Vec<usize>)> = Vec::new();
        let mut expected_tensors = None;
        for line in lines {
            let mut it = line.splitn(2, ' ');
            let key = it.next().unwrap_or("");
            let rest = it.next().unwrap_or("");
            match key {
                "channels" => channels = Some(parse_usize(rest, "channels")?),
                "samples" => samples = Some(parse_usize(rest, "samples")?),
                "classes" => classes = Some(parse_usize(rest, "classes")?),
                "arch" => arch = parse_arch(rest)?,
                "tensors" => expected_tensors = Some(parse_usize(rest, "tensors")?),
                "param" | "running" => {
                    let mut parts = rest.rsplitn(2, ' ');
                    let dims = parts.next().unwrap_or("");
                    let name = parts.next().unwrap_or("").to_string();
                    let shape = dims
                        .split('x')
                        .map(|d| parse_usize(d, "tensor shape"))
                        .collect::<Result<Vec<usize>>>()?;
                    manifest.push((key.to_string(), name, shape));
                }
                other => {
                    return Err(Error::Data(format!(
                        "unknown checkpoint header line '{other}'"
                    )))
                }
            }
        }
        let (channels, samples, classes) = match (channels, samples, classes) {
            (Some(c), Some(s), Some(k)) => (c, s, k),
            _ => {
                return Err(Error::Data(
                    "checkpoint header missing channels/samples/classes".into(),
                ))
            }
        };
        if expected_tensors != Some(manifest.len()) {
            return Err(Error::Data(format!(
                "checkpoint declares {expected_tensors:?} tensors but lists {}",
                manifest.len()
            )));
        }
        let mut cursor = data_at + marker.len();
        let mut network = build_network::<R>(channels, samples, classes, &arch, 0)?;
        for (kind, name, shape) in manifest {
            let count: usize = shape.iter().product();
            let need = count * 4;
            if cursor + need > bytes.len() {
                return Err(Error::Data(format!(
                    "checkpoint truncated reading '{name}' at byte offset {cursor}"
                )));
            }
            let data: Vec<R> = bytes[cursor..cursor + need]
                .chunks_exact(4)
                .map(|b| R::of_f64(f32::from_le_bytes(b.try_into().unwrap()) as f64))
                .collect();
            cursor += need;
            if kind == "param" {
                let slot = network.params.get_mut(&name).ok_or_else(|| {
                    Error::Data(format!("checkpoint has unknown parameter '{name}'"))
                })?;
                if slot.shape() != shape.as_slice() {
                    return Err(Error::Data(format!(
                        "checkpoint parameter '{name}' has shape {shape:?}, expected {:?}",
                        slot.shape()
                    )));
                }
                *slot = Tensor::new(shape, data)?;
            } else {
                let (layer, field) = name
                    .rsplit_once('.')
                    .ok_or_else(|| Error::Data(format!("bad running-stat name '{name}'")))?;
                let state = network.running.get_mut(layer).ok_or_else(|| {
                    Error::Data(format!("checkpoint has unknown bn layer '{layer}'"))
                })?;
                match field {
                    "mean" => state.mean = data,
                    "var" => state.var = data,
                    other => {
                        return Err(Error::Data(format!("bad running-stat field '{other}'")))
                    }
                }
            }
        }
        if cursor != bytes.len() {
            return Err(Error::Data(format!(
                "trailing bytes after checkpoint data at byte offset {cursor}"
            )));
        }
        Ok(network)
    }
}

fn parse_usize(s: &str, what: &str) -> Result<usize> {
    s.trim()
        .parse()
        .map_err(|_| Error::Data(format!("cannot parse {what} from '{s}'")))
}

fn parse_f64(s: &str, what: &str) -> Result<f64> {
    s.trim()
        .parse()
        .map_err(|_| Error::Data(format!("cannot parse {what} from '{s}'")))
}

fn parse_arch(rest: &str) -> Result<ArchConfig> {
    let mut arch = ArchConfig::default();
    for kv in rest.split_whitespace() {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Data(format!("bad arch field '{kv}'")))?;
        match k {
            "temporal_filters" => arch.temporal_filters = parse_usize(v, k)?,
            "depth_multiplier" => arch.depth_multiplier = parse_usize(v, k)?,
            "separable_filters" => arch.separable_filters = parse_usize(v, k)?,
            "kernel_length" => arch.kernel_length = parse_usize(v, k)?,
            "separable_length" => arch.separable_length = parse_usize(v, k)?,
            "pool1" => arch.pool1 = parse_usize(v, k)?,
            "pool2" => arch.pool2 = parse_usize(v, k)?,
            "dropout" => arch.dropout = parse_f64(v, k)?,
            "bn_momentum" => arch.bn_momentum = parse_f64(v, k)?,
            "bn_eps" => arch.bn_eps = parse_f64(v, k)?,
            other => return Err(Error::Data(format!("unknown arch field '{other}'"))),
        }
    }
    Ok(arch)
}
