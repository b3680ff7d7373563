//! Spatio-temporal graph backbone: gated dilated causal convolutions
//! interleaved with graph convolutions, with residual and skip paths.
//!
//! Input `[B, V, Cin, T]` → skip-sum features `[B, V, C, T]` → two-layer head
//! `[C·T → hidden → horizon]` per node. The head output passes through a
//! constant affine map so predictions come out in raw units.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{Activation, Scope, Tape, Var};
use crate::data::{fit_normalizer, DatasetSplits, NormalizationStats, WindowedDataset};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::topology::RoadTopology;
use crate::train::{collect_grads, fit, map_chunks, stack, ChunkGrad, TrainConfig, TrainingLog};

pub const CHECKPOINT_VERSION: u32 = 1;
const BACKBONE_FORMAT: &str = "telto-backbone";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AdjacencyMode {
    #[default]
    Static,
    /// Add a learned support `softmax(relu(E₁E₂))` to the fixed ones.
    StaticAdaptive,
}

impl std::str::FromStr for AdjacencyMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "static" => Ok(AdjacencyMode::Static),
            "static+adaptive" | "static_adaptive" => Ok(AdjacencyMode::StaticAdaptive),
            other => Err(format!("unknown adjacency mode `{other}` (expected static|static+adaptive)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub in_channels: usize,
    /// Hidden and feature width C.
    pub channels: usize,
    pub layers: usize,
    pub temporal_kernel: usize,
    /// One dilation per layer.
    pub dilations: Vec<usize>,
    pub dropout: f64,
    pub activation: Activation,
    pub adjacency_mode: AdjacencyMode,
    pub embedding_dim: usize,
    /// Input window length D.
    pub t_in: usize,
    pub head_hidden: usize,
    /// Forecast steps D′.
    pub horizon: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            channels: 32,
            layers: 4,
            temporal_kernel: 2,
            dilations: vec![1, 2, 1, 2],
            dropout: 0.0,
            activation: Activation::Relu,
            adjacency_mode: AdjacencyMode::Static,
            embedding_dim: 10,
            t_in: 8,
            head_hidden: 256,
            horizon: 4,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("backbone: {m}")));
        for (name, v) in [
            ("in_channels", self.in_channels),
            ("channels", self.channels),
            ("layers", self.layers),
            ("temporal_kernel", self.temporal_kernel),
            ("t_in", self.t_in),
            ("head_hidden", self.head_hidden),
            ("horizon", self.horizon),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.dilations.len() != self.layers {
            return bad(format!(
                "{} dilations given for {} layers",
                self.dilations.len(),
                self.layers
            ));
        }
        if self.dilations.contains(&0) {
            return bad("dilations must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)".into());
        }
        if self.adjacency_mode == AdjacencyMode::StaticAdaptive && self.embedding_dim == 0 {
            return bad("embedding_dim must be positive for adaptive adjacency".into());
        }
        Ok(())
    }

    /// Steps of history that can influence the last output step.
    pub fn receptive_field(&self) -> usize {
        1 + self.dilations.iter().map(|d| (self.temporal_kernel - 1) * d).sum::<usize>()
    }

    /// The learned support only exists when some layer has a graph convolution.
    pub fn uses_adaptive(&self) -> bool {
        self.adjacency_mode == AdjacencyMode::StaticAdaptive && self.layers > 1
    }

    /// Number of graph supports used by each graph convolution.
    pub fn support_count(&self, fixed: usize) -> usize {
        fixed + usize::from(self.adjacency_mode == AdjacencyMode::StaticAdaptive)
    }

    /// Total scalar parameters for a graph with `nodes` nodes and `fixed`
    /// supports. Every layer has a gated convolution and a skip projection;
    /// all but the last also have a graph convolution over S supports:
    ///
    /// ```text
    /// start    C·Cin + C
    /// gated    L·(2(K·C² + C) + C² + C)
    /// graph    (L-1)·((1 + S)·C² + C)
    /// adaptive 2·V·E   (only with L > 1)
    /// head     C·T·H + H + H·D′ + D′
    /// ```
    pub fn param_count(&self, nodes: usize, fixed: usize) -> usize {
        let (c, k, s, l) = (self.channels, self.temporal_kernel, self.support_count(fixed), self.layers);
        let start = c * self.in_channels + c;
        let gated = l * (2 * (k * c * c + c) + c * c + c);
        let graph = (l - 1) * ((1 + s) * c * c + c);
        let adaptive = if self.uses_adaptive() { 2 * nodes * self.embedding_dim } else { 0 };
        let h = self.head_hidden;
        let head = c * self.t_in * h + h + h * self.horizon + self.horizon;
        start + gated + graph + adaptive + head
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GraphKind {
    /// Segment graph, undirected with self-loops.
    Gct,
    /// Directed route graph.
    Routes,
}

/// Fixed row-normalised supports of one graph.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    pub kind: GraphKind,
    supports: Vec<Tensor>,
}

impl Graph {
    pub fn segments(topology: &RoadTopology) -> Self {
        Self {
            kind: GraphKind::Gct,
            supports: vec![topology.segment_adjacency().row_normalized()],
        }
    }

    /// Two supports: each route aggregates from the routes feeding it, then
    /// from the routes it feeds.
    pub fn routes(topology: &RoadTopology) -> Self {
        let a = topology.route_adjacency();
        Self {
            kind: GraphKind::Routes,
            supports: vec![a.transpose().row_normalized(), a.row_normalized()],
        }
    }

    pub fn from_supports(kind: GraphKind, supports: Vec<Tensor>) -> Self {
        Self { kind, supports }
    }

    pub fn nodes(&self) -> usize {
        self.supports.first().map_or(0, |s| s.shape()[0])
    }

    pub fn supports(&self) -> &[Tensor] {
        &self.supports
    }
}

/// Constant affine map `y·scale + shift` applied to head outputs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutputScale {
    pub scale: f64,
    pub shift: f64,
}

impl Default for OutputScale {
    fn default() -> Self {
        Self { scale: 1.0, shift: 0.0 }
    }
}

impl OutputScale {
    /// Mean and population deviation of the training targets.
    pub fn fit(targets: &Tensor) -> Result<Self> {
        let s = fit_normalizer(targets, false)?;
        Ok(Self {
            scale: s.std[0],
            shift: s.mean[0],
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneModel {
    pub config: BackboneConfig,
    pub trained_on: GraphKind,
    pub nodes: usize,
    pub fixed_supports: usize,
    pub params: ParamStore,
    pub input_norm: NormalizationStats,
    pub output: OutputScale,
    #[serde(default)]
    pub log: TrainingLog,
}

fn init_conv(p: &mut ParamStore, name: &str, k: usize, cout: usize, cin: usize, bias: bool, rng: &mut ChaCha8Rng) {
    p.insert(format!("{name}.w"), Tensor::glorot(&[k, cout, cin], k * cin, k * cout, rng));
    if bias {
        p.insert(format!("{name}.b"), Tensor::zeros(&[cout]));
    }
}

/// Parameters of a two-layer head `[input → hidden → out]` under `prefix`.
pub(crate) fn init_head(p: &mut ParamStore, prefix: &str, input: usize, hidden: usize, out: usize, rng: &mut ChaCha8Rng) {
    p.insert(format!("{prefix}.w1"), Tensor::glorot(&[input, hidden], input, hidden, rng));
    p.insert(format!("{prefix}.b1"), Tensor::zeros(&[hidden]));
    p.insert(format!("{prefix}.w2"), Tensor::glorot(&[hidden, out], hidden, out, rng));
    p.insert(format!("{prefix}.b2"), Tensor::zeros(&[out]));
}

/// `x: [B, V, ...]` flattened per node → `act` → dense → `act` → dense → affine → `[B, V, out]`.
pub(crate) fn apply_head(tape: &mut Tape, p: Scope, x: Var, act: Activation, output: OutputScale) -> Var {
    let shape = tape.shape(x).to_vec();
    let (b, v) = (shape[0], shape[1]);
    let width: usize = shape[2..].iter().product();
    let flat = tape.reshape(x, &[b * v, width]);
    let h = tape.activation(flat, act);
    let h = tape.dense(h, p.get("w1"), p.get("b1"));
    let h = tape.activation(h, act);
    let y = tape.dense(h, p.get("w2"), p.get("b2"));
    let out = tape.shape(y)[1];
    let y = tape.affine(y, output.scale, output.shift);
    tape.reshape(y, &[b, v, out])
}

/// Vars produced by one backbone pass.
pub struct BackboneOutput {
    /// Residual stream entering the last layer.
    pub residual: Var,
    pub features: Var,
    pub prediction: Var,
}

impl BackboneModel {
    pub fn new(config: BackboneConfig, graph: &Graph, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (c, k) = (config.channels, config.temporal_kernel);
        let nodes = graph.nodes();
        let supports = config.support_count(graph.supports().len());
        let mut p = ParamStore::new();
        init_conv(&mut p, "start", 1, c, config.in_channels, true, &mut rng);
        for l in 0..config.layers {
            init_conv(&mut p, &format!("layer{l}.filter"), k, c, c, true, &mut rng);
            init_conv(&mut p, &format!("layer{l}.gate"), k, c, c, true, &mut rng);
            init_conv(&mut p, &format!("layer{l}.skip"), 1, c, c, true, &mut rng);
            if l + 1 == config.layers {
                continue;
            }
            init_conv(&mut p, &format!("layer{l}.gconv.self"), 1, c, c, true, &mut rng);
            for s in 0..supports {
                init_conv(&mut p, &format!("layer{l}.gconv.s{s}"), 1, c, c, false, &mut rng);
            }
        }
        if config.uses_adaptive() {
            let e = config.embedding_dim;
            p.insert("adaptive.source", Tensor::randn(&[nodes, e], 1.0 / (e as f64).sqrt(), &mut rng));
            p.insert("adaptive.target", Tensor::randn(&[e, nodes], 1.0 / (e as f64).sqrt(), &mut rng));
        }
        init_head(&mut p, "head", c * config.t_in, config.head_hidden, config.horizon, &mut rng);
        let model = Self {
            trained_on: graph.kind,
            nodes,
            fixed_supports: graph.supports().len(),
            params: p,
            input_norm: NormalizationStats::identity(),
            output: OutputScale::default(),
            log: TrainingLog::default(),
            config,
        };
        debug_assert_eq!(model.params.numel(), model.config.param_count(nodes, model.fixed_supports));
        Ok(model)
    }

    pub fn is_frozen(&self) -> bool {
        self.params.is_frozen()
    }

    pub fn freeze(&mut self) {
        self.params.freeze();
    }

    pub(crate) fn check_graph(&self, graph: &Graph) -> Result<()> {
        if graph.nodes() != self.nodes || graph.supports().len() != self.fixed_supports || graph.kind != self.trained_on {
            return Err(Error::shape(
                "backbone graph",
                format!("{:?} graph with {} nodes and {} supports", self.trained_on, self.nodes, self.fixed_supports),
                format!("{:?} graph with {} nodes and {} supports", graph.kind, graph.nodes(), graph.supports().len()),
            ));
        }
        Ok(())
    }

    /// Record the backbone on `tape`. `x` is `[B, V, Cin, T]` (normalised);
    /// `supports` are the graph's fixed supports already placed on the tape.
    /// Dropout is active only when `dropout_rng` is given.
    pub fn build(
        &self,
        tape: &mut Tape,
        p: Scope,
        x: Var,
        supports: &[Var],
        stage: &'static str,
        mut dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<BackboneOutput> {
        let cfg = &self.config;
        let shape = tape.shape(x).to_vec();
        let expected = [cfg.in_channels, cfg.t_in];
        if shape.len() != 4 || shape[1] != self.nodes || shape[2..] != expected {
            return Err(Error::shape(
                stage,
                format!("[B, {}, {}, {}]", self.nodes, cfg.in_channels, cfg.t_in),
                format!("{shape:?}"),
            ));
        }
        let mut all_supports = supports.to_vec();
        if cfg.uses_adaptive() {
            let e = tape.matmul(p.get("adaptive.source"), p.get("adaptive.target"));
            let e = tape.relu(e);
            all_supports.push(tape.softmax_rows(e));
        }
        let mut h = tape.temporal_conv(x, p.get("start.w"), Some(p.get("start.b")), 1);
        let mut skip: Option<Var> = None;
        for (l, &d) in cfg.dilations.iter().enumerate() {
            let name = |s: &str| format!("layer{l}.{s}");
            let f = tape.temporal_conv(h, p.get(&name("filter.w")), Some(p.get(&name("filter.b"))), d);
            let f = tape.tanh(f);
            let g = tape.temporal_conv(h, p.get(&name("gate.w")), Some(p.get(&name("gate.b"))), d);
            let g = tape.sigmoid(g);
            let z = tape.mul(f, g);
            let s = tape.temporal_conv(z, p.get(&name("skip.w")), Some(p.get(&name("skip.b"))), 1);
            skip = Some(match skip {
                Some(acc) => tape.add(acc, s),
                None => s,
            });
            if l + 1 == cfg.layers {
                break;
            }
            let mut y = tape.temporal_conv(z, p.get(&name("gconv.self.w")), Some(p.get(&name("gconv.self.b"))), 1);
            for (si, &sup) in all_supports.iter().enumerate() {
                let mixed = tape.graph_mix(sup, z);
                let t = tape.temporal_conv(mixed, p.get(&name(&format!("gconv.s{si}.w"))), None, 1);
                y = tape.add(y, t);
            }
            if let Some(rng) = dropout_rng.as_deref_mut() {
                if cfg.dropout > 0.0 {
                    let keep = 1.0 - cfg.dropout;
                    let n = tape.value(y).len();
                    let mask = (0..n)
                        .map(|_| if rng.random_bool(keep) { 1.0 / keep } else { 0.0 })
                        .collect();
                    y = tape.mask(y, mask);
                }
            }
            h = tape.add(y, h);
        }
        let features = skip.expect("at least one layer");
        let prediction = apply_head(tape, p.sub("head"), features, cfg.activation, self.output);
        Ok(BackboneOutput {
            residual: h,
            features,
            prediction,
        })
    }

    fn run(&self, graph: &Graph, x: &Tensor) -> Result<(Tensor, Tensor)> {
        self.check_graph(graph)?;
        let mut tape = Tape::new();
        let bound = tape.bind(&self.params);
        let sup: Vec<Var> = graph.supports().iter().map(|s| tape.constant(s.clone())).collect();
        let xv = tape.constant(x.clone());
        let out = self.build(&mut tape, bound.scope(""), xv, &sup, "backbone", None)?;
        Ok((tape.value(out.features).clone(), tape.value(out.prediction).clone()))
    }

    /// Skip-sum features `[V, C, T]` for one normalised window `[V, T]`
    /// (single input channel) or `[V, Cin, T]`.
    pub fn forward_features(&self, x: &Tensor, graph: &Graph) -> Result<Tensor> {
        let x = self.as_batch(x)?;
        let (f, _) = self.run(graph, &x)?;
        let s = f.shape()[1..].to_vec();
        Ok(f.reshaped(&s))
    }

    /// Raw-unit forecasts `[V, D′]` for one normalised window.
    pub fn forward_predict(&self, x: &Tensor, graph: &Graph) -> Result<Tensor> {
        let x = self.as_batch(x)?;
        let (_, y) = self.run(graph, &x)?;
        let s = y.shape()[1..].to_vec();
        Ok(y.reshaped(&s))
    }

    /// Batched features `[S, V, C, T]` for normalised inputs `[S, V, T]` or `[S, V, Cin, T]`.
    pub fn features_batch(&self, inputs: &Tensor, graph: &Graph) -> Result<Tensor> {
        self.batched(inputs, graph, true)
    }

    /// Batched raw-unit forecasts `[S, V, D′]`.
    pub fn predict_batch(&self, inputs: &Tensor, graph: &Graph) -> Result<Tensor> {
        self.batched(inputs, graph, false)
    }

    fn batched(&self, inputs: &Tensor, graph: &Graph, features: bool) -> Result<Tensor> {
        let inputs = self.as_4d(inputs)?;
        self.check_graph(graph)?;
        let s = inputs.shape()[0];
        let data = map_chunks(s, |idx| {
            let (f, y) = self.run(graph, &stack(&inputs, idx))?;
            Ok(if features { f.into_data() } else { y.into_data() })
        })?;
        let shape = if features {
            vec![s, self.nodes, self.config.channels, self.config.t_in]
        } else {
            vec![s, self.nodes, self.config.horizon]
        };
        Ok(Tensor::new(&shape, data))
    }

    fn as_batch(&self, x: &Tensor) -> Result<Tensor> {
        let mut shape = vec![1];
        shape.extend_from_slice(x.shape());
        self.as_4d(&x.clone().reshaped(&shape))
    }

    /// Accept `[S, V, T]` when the backbone has one input channel.
    fn as_4d(&self, x: &Tensor) -> Result<Tensor> {
        match x.shape() {
            [s, v, t] if self.config.in_channels == 1 => Ok(x.clone().reshaped(&[*s, *v, 1, *t])),
            [_, _, _, _] => Ok(x.clone()),
            other => Err(Error::shape(
                "backbone input",
                format!("[S, {}, {}, {}]", self.nodes, self.config.in_channels, self.config.t_in),
                format!("{other:?}"),
            )),
        }
    }

    /// Fit on normalised `inputs` `[S, V, (Cin,) T]` against raw `targets`
    /// `[S, V, D′]`, keeping the epoch with the best validation MAE.
    pub fn train(
        &mut self,
        graph: &Graph,
        train: (&Tensor, &Tensor),
        valid: Option<(&Tensor, &Tensor)>,
        cfg: &TrainConfig,
    ) -> Result<TrainingLog> {
        self.check_graph(graph)?;
        if self.is_frozen() {
            return Err(Error::Config("cannot train a frozen backbone".into()));
        }
        let x = self.as_4d(train.0)?;
        let y = train.1;
        let valid = valid
            .filter(|(vx, _)| vx.shape()[0] > 0)
            .map(|(vx, vy)| self.as_4d(vx).map(|vx| (vx, vy.clone())))
            .transpose()?;
        let s = x.shape()[0];
        if y.shape() != [s, self.nodes, self.config.horizon] {
            return Err(Error::shape(
                "backbone targets",
                format!("[{s}, {}, {}]", self.nodes, self.config.horizon),
                format!("{:?}", y.shape()),
            ));
        }
        let me = self.clone();
        let mut params = self.params.clone();
        let grad = |p: &ParamStore, idx: &[usize], seed: u64| -> Result<ChunkGrad> {
            let mut tape = Tape::new();
            let bound = tape.bind(p);
            let sup: Vec<Var> = graph.supports().iter().map(|t| tape.constant(t.clone())).collect();
            let xv = tape.constant(stack(&x, idx));
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let out = me.build(&mut tape, bound.scope(""), xv, &sup, "backbone", Some(&mut rng))?;
            let loss = tape.mean_abs_error(out.prediction, stack(y, idx).into_data().into());
            let g = tape.backward(loss);
            Ok(ChunkGrad {
                loss: tape.value(loss).data()[0],
                grads: collect_grads(&bound, &g),
            })
        };
        let validate = |p: &ParamStore| -> Result<Option<f64>> {
            let Some((vx, vy)) = &valid else { return Ok(None) };
            let m = BackboneModel { params: p.clone(), ..me.clone() };
            let pred = m.predict_batch(vx, graph)?;
            Ok(Some(mae(&pred, vy)))
        };
        let log = fit(&mut params, s, cfg, grad, validate)?;
        self.params = params;
        self.log = log.clone();
        Ok(log)
    }

    /// SHA-256 over configuration, parameters and scaling.
    pub fn content_hash(&self) -> String {
        let body = serde_json::json!({
            "config": self.config,
            "trained_on": self.trained_on,
            "nodes": self.nodes,
            "fixed_supports": self.fixed_supports,
            "params": self.params,
            "input_norm": self.input_norm,
            "output": self.output,
        });
        hex::encode(Sha256::digest(body.to_string().as_bytes()))
    }

    pub fn save(&self, path: impl AsRef<Path>, topology_hash: &str) -> Result<()> {
        let ck = BackboneCheckpoint {
            format: BACKBONE_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            topology_hash: topology_hash.into(),
            model: self.clone(),
        };
        write_json(path.as_ref(), &ck)
    }

    /// Load a checkpoint, refusing one built for a different topology.
    pub fn load(path: impl AsRef<Path>, topology_hash: Option<&str>) -> Result<Self> {
        let ck: BackboneCheckpoint = read_json(path.as_ref())?;
        if ck.format != BACKBONE_FORMAT {
            return Err(Error::Checkpoint(format!("not a backbone checkpoint (format `{}`)", ck.format)));
        }
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {}", ck.version)));
        }
        if let Some(h) = topology_hash {
            if h != ck.topology_hash {
                return Err(Error::Checkpoint("checkpoint was trained on a different topology".into()));
            }
        }
        ck.model.config.validate()?;
        Ok(ck.model)
    }
}

#[derive(Serialize, Deserialize)]
struct BackboneCheckpoint {
    format: String,
    version: u32,
    topology_hash: String,
    model: BackboneModel,
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let text = serde_json::to_string(value)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub(crate) fn mae(pred: &Tensor, truth: &Tensor) -> f64 {
    let n = pred.len().max(1) as f64;
    pred.data().iter().zip(truth.data()).map(|(p, t)| (p - t).abs()).sum::<f64>() / n
}

/// Pre-train the segment-graph backbone on cellular windows (inputs and
/// targets both cellular flows). Inputs are z-scored with statistics from the
/// training split and the head is rescaled to raw units. The returned model
/// holds the best-validation parameters and is frozen.
pub fn pretrain_stage1(
    gct_windows: &DatasetSplits,
    topology: &RoadTopology,
    config: &BackboneConfig,
    train: &TrainConfig,
) -> Result<BackboneModel> {
    let graph = Graph::segments(topology);
    let mut config = config.clone();
    config.in_channels = 1;
    config.t_in = gct_windows.train.t_in;
    config.horizon = gct_windows.train.t_out;
    let n = topology.num_segments();
    for ds in [&gct_windows.train, &gct_windows.valid, &gct_windows.test] {
        if ds.input_entities() != n || ds.target_entities() != n {
            return Err(Error::shape(
                "stage1 pretraining",
                format!("{n} segments in inputs and targets"),
                format!("{} inputs, {} targets", ds.input_entities(), ds.target_entities()),
            ));
        }
    }
    let mut model = BackboneModel::new(config, &graph, train.seed)?;
    model.input_norm = fit_normalizer(&gct_windows.train.inputs, false)?;
    model.output = OutputScale::fit(&gct_windows.train.inputs)?;
    let norm = |ds: &WindowedDataset| model.input_norm.apply(&ds.inputs);
    let (tx, vx) = (norm(&gct_windows.train), norm(&gct_windows.valid));
    model.train(
        &graph,
        (&tx, &gct_windows.train.targets),
        Some((&vx, &gct_windows.valid.targets)),
        train,
    )?;
    model.freeze();
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Activation;
    use crate::data::{generate_synthetic, make_windows, GeneratorConfig, SplitRatios};
    use std::sync::Arc;

    fn tiny_config() -> BackboneConfig {
        BackboneConfig {
            channels: 2,
            layers: 1,
            dilations: vec![1],
            t_in: 4,
            head_hidden: 3,
            horizon: 2,
            ..BackboneConfig::default()
        }
    }

    fn triangle() -> Graph {
        let p = Tensor::new(&[3, 3], vec![0.5, 0.5, 0.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0, 0.0, 0.5, 0.5]);
        Graph::from_supports(GraphKind::Gct, vec![p])
    }

    fn randomize(model: &mut BackboneModel, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (_, t) in model.params.iter_mut() {
            for v in t.data_mut() {
                *v = rng.random_range(-0.8..0.8);
            }
        }
    }

    #[test]
    fn full_network_shapes() {
        let topo = RoadTopology::synthetic(34, 42, 1).unwrap();
        let g = Graph::segments(&topo);
        let m = BackboneModel::new(BackboneConfig::default(), &g, 0).unwrap();
        let x = Tensor::full(&[34, 8], 0.3);
        assert_eq!(m.forward_features(&x, &g).unwrap().shape(), &[34, 32, 8]);
        assert_eq!(m.forward_predict(&x, &g).unwrap().shape(), &[34, 4]);
        let z = m.forward_features(&Tensor::zeros(&[34, 8]), &g).unwrap();
        assert!(z.is_finite());
    }

    #[test]
    fn param_count_formula() {
        let topo = RoadTopology::synthetic(12, 16, 2).unwrap();
        for (graph, mode, cin) in [
            (Graph::segments(&topo), AdjacencyMode::Static, 1),
            (Graph::routes(&topo), AdjacencyMode::Static, 32),
            (Graph::routes(&topo), AdjacencyMode::StaticAdaptive, 5),
        ] {
            let cfg = BackboneConfig {
                adjacency_mode: mode,
                in_channels: cin,
                ..BackboneConfig::default()
            };
            let m = BackboneModel::new(cfg.clone(), &graph, 3).unwrap();
            assert_eq!(m.params.numel(), cfg.param_count(graph.nodes(), graph.supports().len()));
        }
        // C=32, Cin=1, K=2, one support, T=8, H=256, D′=4, four layers.
        assert_eq!(BackboneConfig::default().param_count(34, 1), 64 + 4 * 5216 + 3 * 2080 + 65536 + 256 + 1024 + 4);
    }

    /// Straight-line evaluation with plain loops (3 nodes, C=2, T=4, K=2,
    /// dilation 1, one support). Returns skip features, the residual stream
    /// entering the last layer and raw-unit predictions.
    fn hand_forward(m: &BackboneModel, x: &[f64], p: &Tensor) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let w = |n: &str| m.params.tensor(n).data().to_vec();
        let (v, c, t) = (3, 2, 4);
        let sig = |a: f64| 1.0 / (1.0 + (-a).exp());
        let at = |n: usize, o: usize, s: usize| (n * c + o) * t + s;
        let (sw, sb) = (w("start.w"), w("start.b"));
        let mut h = vec![0.0; v * c * t];
        for n in 0..v {
            for o in 0..c {
                for s in 0..t {
                    h[at(n, o, s)] = sw[o] * x[n * t + s] + sb[o];
                }
            }
        }
        // Two-tap causal conv: tap 0 reads s-1, tap 1 reads s.
        let conv2 = |wt: &[f64], b: &[f64], inp: &[f64], n: usize, o: usize, s: usize| {
            let mut acc = b[o];
            for i in 0..c {
                acc += wt[(c + o) * c + i] * inp[at(n, i, s)];
                if s >= 1 {
                    acc += wt[o * c + i] * inp[at(n, i, s - 1)];
                }
            }
            acc
        };
        let conv1 = |wt: &[f64], b: Option<&[f64]>, inp: &[f64], n: usize, o: usize, s: usize| {
            let mut acc = b.map_or(0.0, |b| b[o]);
            for i in 0..c {
                acc += wt[o * c + i] * inp[at(n, i, s)];
            }
            acc
        };
        let pd = p.data();
        let mut feats = vec![0.0; v * c * t];
        let layers = m.config.layers;
        for l in 0..layers {
            let lw = |n: &str| w(&format!("layer{l}.{n}"));
            let (fw, fb, gw, gb) = (lw("filter.w"), lw("filter.b"), lw("gate.w"), lw("gate.b"));
            let mut z = vec![0.0; v * c * t];
            for n in 0..v {
                for o in 0..c {
                    for s in 0..t {
                        z[at(n, o, s)] = conv2(&fw, &fb, &h, n, o, s).tanh() * sig(conv2(&gw, &gb, &h, n, o, s));
                    }
                }
            }
            let (kw, kb) = (lw("skip.w"), lw("skip.b"));
            for n in 0..v {
                for o in 0..c {
                    for s in 0..t {
                        feats[at(n, o, s)] += conv1(&kw, Some(&kb), &z, n, o, s);
                    }
                }
            }
            if l + 1 == layers {
                break;
            }
            let mut mixed = vec![0.0; v * c * t];
            for n in 0..v {
                for u in 0..v {
                    for j in 0..c * t {
                        mixed[n * c * t + j] += pd[n * v + u] * z[u * c * t + j];
                    }
                }
            }
            let (gs, gsb, g0) = (lw("gconv.self.w"), lw("gconv.self.b"), lw("gconv.s0.w"));
            let mut next = vec![0.0; v * c * t];
            for n in 0..v {
                for o in 0..c {
                    for s in 0..t {
                        next[at(n, o, s)] =
                            conv1(&gs, Some(&gsb), &z, n, o, s) + conv1(&g0, None, &mixed, n, o, s) + h[at(n, o, s)];
                    }
                }
            }
            h = next;
        }
        let (w1, b1, w2, b2) = (w("head.w1"), w("head.b1"), w("head.w2"), w("head.b2"));
        let mut pred = vec![0.0; v * 2];
        for n in 0..v {
            let f: Vec<f64> = feats[n * c * t..(n + 1) * c * t].iter().map(|a| a.max(0.0)).collect();
            let hid: Vec<f64> = (0..3)
                .map(|j| (b1[j] + (0..c * t).map(|i| f[i] * w1[i * 3 + j]).sum::<f64>()).max(0.0))
                .collect();
            for o in 0..2 {
                let y = b2[o] + (0..3).map(|j| hid[j] * w2[j * 2 + o]).sum::<f64>();
                pred[n * 2 + o] = y * m.output.scale + m.output.shift;
            }
        }
        (feats, h, pred)
    }

    #[test]
    fn matches_hand_evaluation() {
        let g = triangle();
        for layers in [1, 2, 3] {
            let cfg = BackboneConfig {
                layers,
                dilations: vec![1; layers],
                ..tiny_config()
            };
            let mut m = BackboneModel::new(cfg, &g, 5).unwrap();
            randomize(&mut m, 6);
            m.output = OutputScale { scale: 2.0, shift: 1.5 };
            let x: Vec<f64> = (0..12).map(|i| ((i * 7) % 5) as f64 * 0.3 - 0.5).collect();
            let xt = Tensor::new(&[3, 4], x.clone());
            let (feats, residual, pred) = hand_forward(&m, &x, &g.supports()[0]);
            let mut tape = Tape::new();
            let bound = tape.bind(&m.params);
            let sup = vec![tape.constant(g.supports()[0].clone())];
            let xv = tape.constant(xt.clone().reshaped(&[1, 3, 1, 4]));
            let out = m.build(&mut tape, bound.scope(""), xv, &sup, "t", None).unwrap();
            let close = |a: &[f64], b: &[f64]| a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12);
            assert!(close(tape.value(out.residual).data(), &residual), "layers={layers}");
            assert!(close(m.forward_features(&xt, &g).unwrap().data(), &feats), "layers={layers}");
            assert!(close(m.forward_predict(&xt, &g).unwrap().data(), &pred), "layers={layers}");
        }
    }

    /// Each extra layer widens the graph receptive field by one hop: with two
    /// layers node 0 sees node 1 but not node 2.
    #[test]
    fn graph_receptive_field_grows_by_layer() {
        let g = triangle();
        let features = |layers: usize, node: usize| {
            let cfg = BackboneConfig {
                layers,
                dilations: vec![1; layers],
                ..tiny_config()
            };
            let mut m = BackboneModel::new(cfg, &g, 1).unwrap();
            randomize(&mut m, 2);
            let x = Tensor::full(&[3, 4], 0.2);
            let mut x2 = x.clone();
            x2.set(&[node, 0], 1.0);
            let a = m.forward_features(&x, &g).unwrap();
            let b = m.forward_features(&x2, &g).unwrap();
            a.data()[..8] != b.data()[..8]
        };
        assert!(!features(1, 1));
        assert!(features(2, 1));
        assert!(!features(2, 2));
        assert!(features(3, 2));
    }

    #[test]
    fn causal_in_time() {
        let topo = RoadTopology::synthetic(6, 7, 3).unwrap();
        let g = Graph::segments(&topo);
        let cfg = BackboneConfig {
            channels: 4,
            adjacency_mode: AdjacencyMode::StaticAdaptive,
            ..BackboneConfig::default()
        };
        let mut m = BackboneModel::new(cfg, &g, 2).unwrap();
        randomize(&mut m, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn(&[6, 8], 1.0, &mut rng);
        let base = m.forward_features(&x, &g).unwrap();
        for t in 0..8 {
            let mut x2 = x.clone();
            for n in 0..6 {
                for s in t + 1..8 {
                    x2.set(&[n, s], 10.0 + n as f64);
                }
            }
            let f = m.forward_features(&x2, &g).unwrap();
            for n in 0..6 {
                for c in 0..4 {
                    for s in 0..=t {
                        assert_eq!(f.get(&[n, c, s]), base.get(&[n, c, s]), "t={t} s={s}");
                    }
                }
            }
        }
        assert_eq!(m.forward_features(&x, &g).unwrap(), base);
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let g = triangle();
        let cfg = BackboneConfig {
            layers: 2,
            dilations: vec![1, 2],
            activation: Activation::Tanh,
            adjacency_mode: AdjacencyMode::StaticAdaptive,
            embedding_dim: 2,
            ..tiny_config()
        };
        let mut m = BackboneModel::new(cfg, &g, 4).unwrap();
        randomize(&mut m, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::randn(&[2, 3, 1, 4], 1.0, &mut rng);
        // Targets one unit away from the initial predictions keep the absolute
        // value off its kink while the loss stays O(1).
        let pred0 = m.predict_batch(&x, &g).unwrap();
        let target: Arc<Vec<f64>> = Arc::new(
            pred0.data().iter().enumerate().map(|(i, p)| p + if i % 2 == 0 { 1.0 } else { -1.0 }).collect(),
        );
        let loss_of = |p: &ParamStore| {
            let mut tape = Tape::new();
            let bound = tape.bind(p);
            let sup = vec![tape.constant(g.supports()[0].clone())];
            let xv = tape.constant(x.clone());
            let out = m.build(&mut tape, bound.scope(""), xv, &sup, "t", None).unwrap();
            let loss = tape.mean_abs_error(out.prediction, target.clone());
            let grads = collect_grads(&bound, &tape.backward(loss));
            (tape.value(loss).data()[0], grads)
        };
        let (_, grads) = loss_of(&m.params);
        let h = 1e-5;
        for name in m.params.names().map(String::from).collect::<Vec<_>>() {
            let n = m.params.tensor(&name).len();
            for i in 0..n {
                let mut p = m.params.clone();
                p.get_mut(&name).unwrap().data_mut()[i] += h;
                let up = loss_of(&p).0;
                p.get_mut(&name).unwrap().data_mut()[i] -= 2.0 * h;
                let down = loss_of(&p).0;
                let num = (up - down) / (2.0 * h);
                let ana = grads[&name][i];
                let rel = (ana - num).abs() / ana.abs().max(num.abs()).max(1e-6);
                assert!(rel < 1e-4, "{name}[{i}]: analytic {ana} numeric {num}");
            }
        }
    }

    fn small_gct(days: u32, seed: u64) -> (RoadTopology, DatasetSplits) {
        let topo = RoadTopology::synthetic(6, 7, seed).unwrap();
        let cfg = GeneratorConfig {
            days,
            emit_records: false,
            ..GeneratorConfig::default()
        };
        let out = generate_synthetic(&topo, &cfg, seed).unwrap();
        let splits = make_windows(&out.gct, &out.gct, 8, 4, SplitRatios::default()).unwrap();
        (topo, splits)
    }

    #[test]
    fn zero_learning_rate_leaves_parameters() {
        let (topo, splits) = small_gct(1, 1);
        let cfg = BackboneConfig {
            channels: 4,
            layers: 2,
            dilations: vec![1, 2],
            head_hidden: 8,
            ..BackboneConfig::default()
        };
        let train = TrainConfig {
            epochs: 3,
            learning_rate: 0.0,
            ..TrainConfig::default()
        };
        let fresh = BackboneModel::new(
            BackboneConfig {
                horizon: 4,
                ..cfg.clone()
            },
            &Graph::segments(&topo),
            train.seed,
        )
        .unwrap();
        let m = pretrain_stage1(&splits, &topo, &cfg, &train).unwrap();
                assert!(m.params.iter().eq(fresh.params.iter()));
        assert!(m.is_frozen());
        assert_eq!(m.log.epochs.len(), 3);
    }

    #[test]
    fn training_loss_decreases_early() {
        // 50 training windows.
        let mut wins = 0;
        for seed in 0..5u64 {
            let (topo, splits) = small_gct(1, seed);
            let mut splits = splits;
            splits.train = splits.train.take(50);
            assert_eq!(splits.train.len(), 50);
            let cfg = BackboneConfig {
                channels: 8,
                layers: 2,
                dilations: vec![1, 2],
                head_hidden: 32,
                ..BackboneConfig::default()
            };
            let train = TrainConfig {
                epochs: 5,
                patience: None,
                seed,
                ..TrainConfig::default()
            };
            let m = pretrain_stage1(&splits, &topo, &cfg, &train).unwrap();
            let c = m.log.train_curve();
            if c.windows(2).all(|w| w[1] < w[0]) {
                wins += 1;
            }
        }
        assert!(wins >= 3, "strict decrease in {wins}/5 seeds");
    }

    #[test]
    fn overfits_constant_series() {
        let topo = RoadTopology::synthetic(4, 4, 0).unwrap();
        let g = Graph::segments(&topo);
        let cfg = BackboneConfig {
            channels: 4,
            layers: 2,
            dilations: vec![1, 2],
            head_hidden: 16,
            ..BackboneConfig::default()
        };
        let mut m = BackboneModel::new(cfg, &g, 0).unwrap();
        let x = Tensor::zeros(&[20, 4, 8]);
        let y = Tensor::full(&[20, 4, 4], 42.0);
        let train = TrainConfig {
            epochs: 600,
            learning_rate: 0.1,
            patience: None,
            ..TrainConfig::default()
        };
        m.train(&g, (&x, &y), None, &train).unwrap();
        let p = m.predict_batch(&x, &g).unwrap();
        assert!(p.data().iter().all(|v| (v - 42.0).abs() < 0.42), "{:?}", &p.data()[..4]);
    }

    #[test]
    fn checkpoint_round_trip_and_topology_guard() {
        let g = triangle();
        let m = BackboneModel::new(tiny_config(), &g, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("stage1.json");
        m.save(&path, "abc").unwrap();
        let back = BackboneModel::load(&path, Some("abc")).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.content_hash(), m.content_hash());
        assert!(matches!(BackboneModel::load(&path, Some("xyz")), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn input_shape_errors_name_stage() {
        let g = triangle();
        let m = BackboneModel::new(tiny_config(), &g, 1).unwrap();
        let err = m.forward_features(&Tensor::zeros(&[4, 4]), &g).unwrap_err();
        assert!(err.to_string().contains("backbone"), "{err}");
    }

    #[test]
    fn config_validation() {
        let bad = BackboneConfig {
            dilations: vec![1],
            ..BackboneConfig::default()
        };
        assert!(bad.validate().is_err());
        assert!(BackboneConfig {
            dropout: 1.0,
            ..BackboneConfig::default()
        }
        .validate()
        .is_err());
        assert_eq!(BackboneConfig::default().receptive_field(), 7);
    }
}
