//! Stage 2: segment features → route features → upstream attention →
//! route-graph backbone → forecasts, trained with the segment backbone frozen.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Activation, Bound, Neighborhoods, Tape, Var};
use crate::backbone::{
    apply_head, init_head, mae, read_json, write_json, BackboneConfig, BackboneModel, Graph, GraphKind, OutputScale,
    CHECKPOINT_VERSION,
};
use crate::data::DatasetSplits;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::topology::RoadTopology;
use crate::train::{collect_grads, fit, map_chunks, stack, ChunkGrad, TrainConfig, TrainingLog};

const FRAMEWORK_FORMAT: &str = "telto-framework";

/// Components removed in an ablated run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    /// Feed raw (normalised) cellular windows as one-channel features.
    pub no_stage1_features: bool,
    /// Use the start segment's features instead of the directional difference.
    pub no_transform: bool,
    /// Skip the upstream attention.
    pub no_enhance: bool,
    /// Apply the output head directly to the route features.
    pub no_stage2: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Setting {
    NoStage1,
    NoTransform,
    NoEnhance,
    NoStage2,
    Full,
}

impl Setting {
    /// Ablations first, full framework last.
    pub const ALL: [Setting; 5] = [
        Setting::NoStage1,
        Setting::NoTransform,
        Setting::NoEnhance,
        Setting::NoStage2,
        Setting::Full,
    ];

    pub fn ablation(self) -> Ablation {
        let mut a = Ablation::default();
        match self {
            Setting::NoStage1 => a.no_stage1_features = true,
            Setting::NoTransform => a.no_transform = true,
            Setting::NoEnhance => a.no_enhance = true,
            Setting::NoStage2 => a.no_stage2 = true,
            Setting::Full => {}
        }
        a
    }

    pub fn label(self) -> &'static str {
        match self {
            Setting::NoStage1 => "w/o STGNN-1st",
            Setting::NoTransform => "w/o Trans.",
            Setting::NoEnhance => "w/o Enhan.",
            Setting::NoStage2 => "w/o STGNN-2nd",
            Setting::Full => "Full Framework",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FrameworkConfig {
    /// σ in the transformation and the attention output.
    pub activation: Activation,
    pub leaky_slope: f64,
    /// Route-graph backbone. Its input channels, window and horizon are
    /// derived from the segment backbone and the data. `head_hidden` also sizes
    /// the head used when the route backbone is ablated.
    pub stage2: BackboneConfig,
    pub ablation: Ablation,
}

impl Default for FrameworkConfig {
    fn default() -> Self {
        Self {
            activation: Activation::Relu,
            leaky_slope: 0.2,
            stage2: BackboneConfig::default(),
            ablation: Ablation::default(),
        }
    }
}

/// Per-channel attention parameters: `w: [C, D, D]`, `a: [C, 2D]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MgatParams {
    pub w: Tensor,
    pub a: Tensor,
    pub slope: f64,
}

impl MgatParams {
    pub fn init(channels: usize, d: usize, slope: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            w: Tensor::glorot(&[channels, d, d], d, d, &mut rng),
            a: Tensor::glorot(&[channels, 2 * d], 2 * d, 1, &mut rng),
            slope,
        }
    }

    pub fn channels(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.w.shape()[1]
    }

    fn check(&self, c: usize, d: usize) -> Result<()> {
        if self.w.shape() != [c, d, d] || self.a.shape() != [c, 2 * d] {
            return Err(Error::shape(
                "mgat parameters",
                format!("w [{c}, {d}, {d}], a [{c}, {}]", 2 * d),
                format!("w {:?}, a {:?}", self.w.shape(), self.a.shape()),
            ));
        }
        Ok(())
    }
}

/// Index structures for the route side of a topology.
#[derive(Debug, Clone)]
pub struct RouteContext {
    pub starts: Arc<Vec<usize>>,
    pub ends: Arc<Vec<usize>>,
    pub hoods: Arc<Neighborhoods>,
    pub graph: Graph,
    pub segments: usize,
}

impl RouteContext {
    pub fn new(topology: &RoadTopology) -> Self {
        let hoods = (0..topology.num_routes())
            .map(|r| std::iter::once(r).chain(topology.upstream(r).iter().copied()).collect())
            .collect();
        Self {
            starts: Arc::new(topology.routes().iter().map(|r| r.start).collect()),
            ends: Arc::new(topology.routes().iter().map(|r| r.end).collect()),
            hoods: Arc::new(Neighborhoods::new(hoods)),
            graph: Graph::routes(topology),
            segments: topology.num_segments(),
        }
    }

    pub fn routes(&self) -> usize {
        self.starts.len()
    }
}

fn check_segment_tensor(stage: &'static str, h: &[usize], segments: usize) -> Result<()> {
    if h.len() != 4 || h[1] != segments {
        return Err(Error::shape(stage, format!("[B, {segments}, C, D]"), format!("{h:?}")));
    }
    Ok(())
}

/// Directional route features before σ: `H[end] − H[start]` per route.
pub fn transform_on_tape(tape: &mut Tape, h: Var, ctx: &RouteContext) -> Result<Var> {
    check_segment_tensor("transform", tape.shape(h), ctx.segments)?;
    let end = tape.gather(h, ctx.ends.clone());
    let start = tape.gather(h, ctx.starts.clone());
    Ok(tape.sub(end, start))
}

/// Attention over `{self} ∪ upstream` per route and channel; returns the
/// pre-σ aggregate.
pub fn mgat_on_tape(tape: &mut Tape, x: Var, w: Var, a: Var, ctx: &RouteContext, slope: f64) -> Var {
    let z = tape.channel_linear(x, w);
    tape.gat_aggregate(z, a, ctx.hoods.clone(), slope)
}

/// `H[j] − H[i]` for every route `(i, j)`, without σ. `h` is `[N, C, D]`.
pub fn transform_raw(h: &Tensor, topology: &RoadTopology) -> Result<Tensor> {
    let ctx = RouteContext::new(topology);
    let mut tape = Tape::new();
    let hv = tape.constant(batch_of_one(h)?);
    let raw = transform_on_tape(&mut tape, hv, &ctx)?;
    Ok(unbatch(tape.value(raw)))
}

/// Route representations `σ(H[j] − H[i])`, shape `[M, C, D]`.
pub fn transform(h: &Tensor, topology: &RoadTopology, act: Activation) -> Result<Tensor> {
    let raw = transform_raw(h, topology)?;
    let data = raw.data().iter().map(|&v| act.apply(v)).collect();
    Ok(Tensor::new(raw.shape(), data))
}

/// Attention weights of one enhancement pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Attention {
    hoods: Arc<Neighborhoods>,
    channels: usize,
    /// `[entry][channel]` over all neighbourhoods.
    alpha: Vec<f64>,
}

impl Attention {
    /// Routes attended by `route`, itself first.
    pub fn neighbourhood(&self, route: usize) -> &[usize] {
        self.hoods.set(route)
    }

    /// Weights of `route`'s neighbourhood in `channel`, aligned with [`Attention::neighbourhood`].
    pub fn weights(&self, route: usize, channel: usize) -> Vec<f64> {
        let off: usize = (0..route).map(|r| self.hoods.set(r).len()).sum();
        (0..self.hoods.set(route).len())
            .map(|q| self.alpha[(off + q) * self.channels + channel])
            .collect()
    }
}

/// Upstream attention enhancement of route features `[M, C, D]`.
pub fn mgat_enhance(
    routes: &Tensor,
    topology: &RoadTopology,
    params: &MgatParams,
    act: Activation,
) -> Result<(Tensor, Attention)> {
    let ctx = RouteContext::new(topology);
    let s = routes.shape();
    if s.len() != 3 || s[0] != ctx.routes() {
        return Err(Error::shape("mgat input", format!("[{}, C, D]", ctx.routes()), format!("{s:?}")));
    }
    params.check(s[1], s[2])?;
    let mut tape = Tape::new();
    let x = tape.constant(batch_of_one(routes)?);
    let w = tape.constant(params.w.clone());
    let a = tape.constant(params.a.clone());
    let agg = mgat_on_tape(&mut tape, x, w, a, &ctx, params.slope);
    let alpha = tape.attention_weights(agg).expect("attention node").to_vec();
    let out = tape.activation(agg, act);
    Ok((
        unbatch(tape.value(out)),
        Attention {
            hoods: ctx.hoods.clone(),
            channels: s[1],
            alpha,
        },
    ))
}

fn batch_of_one(t: &Tensor) -> Result<Tensor> {
    let mut shape = vec![1];
    shape.extend_from_slice(t.shape());
    Ok(t.clone().reshaped(&shape))
}

fn unbatch(t: &Tensor) -> Tensor {
    t.clone().reshaped(&t.shape()[1..])
}

/// Vars recorded by one framework pass.
pub struct FrameworkVars {
    /// Pre-σ directional differences (absent under `no_transform`).
    pub routes_raw: Option<Var>,
    pub routes: Var,
    pub enhanced: Var,
    /// The attention node, whose weights [`Tape::attention_weights`] exposes.
    pub attention: Option<Var>,
    pub output: Var,
}

/// Intermediate tensors of one forward pass over a single window.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    /// Segment features `[N, C, D]`.
    pub segment_features: Tensor,
    /// Route representations `[M, C, D]`.
    pub routes: Tensor,
    /// Enhanced route representations `[M, C, D]`.
    pub enhanced: Tensor,
    /// Forecasts `[M, D′]` in raw units.
    pub output: Tensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameworkModel {
    pub config: FrameworkConfig,
    /// Frozen segment backbone.
    pub stage1: BackboneModel,
    pub stage1_hash: String,
    pub topology_hash: String,
    /// Feature channels entering the route side (C, or 1 without segment features).
    pub channels: usize,
    pub t_in: usize,
    pub horizon: usize,
    pub routes: usize,
    pub mgat: Option<MgatParams>,
    pub stage2: Option<BackboneModel>,
    /// Output head used when the route backbone is ablated.
    pub head: Option<ParamStore>,
    pub output: OutputScale,
    #[serde(default)]
    pub log: TrainingLog,
}

impl FrameworkModel {
    /// Fresh Stage-2 parameters around a (frozen) segment backbone.
    pub fn new(
        stage1: &BackboneModel,
        topology: &RoadTopology,
        config: &FrameworkConfig,
        horizon: usize,
        seed: u64,
    ) -> Result<Self> {
        if stage1.trained_on != GraphKind::Gct || stage1.nodes != topology.num_segments() {
            return Err(Error::shape(
                "stage1",
                format!("segment backbone over {} segments", topology.num_segments()),
                format!("{:?} backbone over {} nodes", stage1.trained_on, stage1.nodes),
            ));
        }
        if config.leaky_slope.is_nan() || config.leaky_slope < 0.0 {
            return Err(Error::Config("leaky_slope must be non-negative".into()));
        }
        let mut stage1 = stage1.clone();
        stage1.freeze();
        let ab = config.ablation;
        let channels = if ab.no_stage1_features { 1 } else { stage1.config.channels };
        let t_in = stage1.config.t_in;
        let ctx = RouteContext::new(topology);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_f00d);
        let mgat = (!ab.no_enhance).then(|| MgatParams::init(channels, t_in, config.leaky_slope, rand::Rng::random(&mut rng)));
        let (stage2, head) = if ab.no_stage2 {
            let mut p = ParamStore::new();
            init_head(&mut p, "h", channels * t_in, config.stage2.head_hidden, horizon, &mut rng);
            (None, Some(p.sub_store("h")))
        } else {
            let cfg = BackboneConfig {
                in_channels: channels,
                t_in,
                horizon,
                ..config.stage2.clone()
            };
            (Some(BackboneModel::new(cfg, &ctx.graph, rand::Rng::random(&mut rng))?), None)
        };
        Ok(Self {
            config: config.clone(),
            stage1_hash: stage1.content_hash(),
            stage1,
            topology_hash: topology.content_hash(),
            channels,
            t_in,
            horizon,
            routes: ctx.routes(),
            mgat,
            stage2,
            head,
            output: OutputScale::default(),
            log: TrainingLog::default(),
        })
    }

    /// All trainable parameters under `mgat.`, `stage2.` and `head.` names.
    pub fn trainable(&self) -> ParamStore {
        let mut p = ParamStore::new();
        if let Some(m) = &self.mgat {
            p.insert("mgat.w", m.w.clone());
            p.insert("mgat.a", m.a.clone());
        }
        if let Some(s) = &self.stage2 {
            p.extend_prefixed("stage2", s.params.clone());
        }
        if let Some(h) = &self.head {
            p.extend_prefixed("head", h.clone());
        }
        p
    }

    pub fn set_trainable(&mut self, p: &ParamStore) {
        if let Some(m) = &mut self.mgat {
            m.w = p.tensor("mgat.w").clone();
            m.a = p.tensor("mgat.a").clone();
        }
        if let Some(s) = &mut self.stage2 {
            s.params = p.sub_store("stage2");
        }
        if let Some(h) = &mut self.head {
            *h = p.sub_store("head");
        }
    }

    pub fn set_output(&mut self, output: OutputScale) {
        self.output = output;
        if let Some(s) = &mut self.stage2 {
            s.output = output;
        }
    }

    /// Record Stage 2 on `tape` starting from segment features `h: [B, N, C, D]`.
    pub fn build(
        &self,
        tape: &mut Tape,
        p: &Bound,
        h: Var,
        ctx: &RouteContext,
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<FrameworkVars> {
        let s = tape.shape(h).to_vec();
        check_segment_tensor("stage2 input", &s, ctx.segments)?;
        if s[2] != self.channels || s[3] != self.t_in {
            return Err(Error::shape(
                "stage2 input",
                format!("[B, {}, {}, {}]", ctx.segments, self.channels, self.t_in),
                format!("{s:?}"),
            ));
        }
        let act = self.config.activation;
        let (routes_raw, routes) = if self.config.ablation.no_transform {
            (None, tape.gather(h, ctx.starts.clone()))
        } else {
            let raw = transform_on_tape(tape, h, ctx)?;
            (Some(raw), tape.activation(raw, act))
        };
        let (enhanced, attention) = match &self.mgat {
            Some(m) => {
                let agg = mgat_on_tape(tape, routes, p.get("mgat.w"), p.get("mgat.a"), ctx, m.slope);
                (tape.activation(agg, act), Some(agg))
            }
            None => (routes, None),
        };
        let output = match &self.stage2 {
            Some(s2) => {
                let sup: Vec<Var> = ctx.graph.supports().iter().map(|t| tape.constant(t.clone())).collect();
                s2.build(tape, p.scope("stage2"), enhanced, &sup, "stage2", dropout_rng)?.prediction
            }
            None => apply_head(tape, p.scope("head"), enhanced, act, self.output),
        };
        Ok(FrameworkVars {
            routes_raw,
            routes,
            enhanced,
            attention,
            output,
        })
    }

    /// Segment features fed to Stage 2 for normalised windows `[S, N, T]`:
    /// the frozen backbone's skip features, or the windows themselves as one
    /// channel when segment features are ablated.
    pub fn segment_features(&self, inputs: &Tensor, topology_graph: &Graph) -> Result<Tensor> {
        let s = inputs.shape();
        if s.len() != 3 || s[1] != self.stage1.nodes || s[2] != self.t_in {
            return Err(Error::shape(
                "stage1 input",
                format!("[S, {}, {}]", self.stage1.nodes, self.t_in),
                format!("{s:?}"),
            ));
        }
        if self.config.ablation.no_stage1_features {
            Ok(inputs.clone().reshaped(&[s[0], s[1], 1, s[2]]))
        } else {
            self.stage1.features_batch(inputs, topology_graph)
        }
    }

    fn check_topology(&self, topology: &RoadTopology) -> Result<()> {
        if topology.content_hash() != self.topology_hash {
            return Err(Error::Checkpoint("model was built for a different topology".into()));
        }
        Ok(())
    }

    /// Raw-unit forecasts `[S, M, D′]` from precomputed segment features.
    pub fn predict_from_features(&self, features: &Tensor, ctx: &RouteContext) -> Result<Tensor> {
        let params = self.trainable();
        let s = features.shape()[0];
        let data = map_chunks(s, |idx| {
            let mut tape = Tape::new();
            let bound = tape.bind(&params);
            let h = tape.constant(stack(features, idx));
            let out = self.build(&mut tape, &bound, h, ctx, None)?;
            Ok(tape.value(out.output).data().to_vec())
        })?;
        Ok(Tensor::new(&[s, ctx.routes(), self.horizon], data))
    }

    /// Raw-unit forecasts `[S, M, D′]` for normalised cellular windows `[S, N, T]`.
    pub fn predict(&self, inputs: &Tensor, topology: &RoadTopology) -> Result<Tensor> {
        self.check_topology(topology)?;
        let feats = self.segment_features(inputs, &Graph::segments(topology))?;
        self.predict_from_features(&feats, &RouteContext::new(topology))
    }

    /// Forecasts for raw (unnormalised) cellular windows `[S, N, T]`.
    pub fn predict_raw(&self, inputs: &Tensor, topology: &RoadTopology) -> Result<Tensor> {
        self.predict(&self.stage1.input_norm.apply(inputs), topology)
    }

    /// One normalised window `[N, T]` → `[M, D′]`.
    pub fn forward(&self, x: &Tensor, topology: &RoadTopology) -> Result<Tensor> {
        Ok(self.forward_trace(x, topology)?.output)
    }

    /// One normalised window `[N, T]` with every intermediate tensor.
    pub fn forward_trace(&self, x: &Tensor, topology: &RoadTopology) -> Result<ForwardTrace> {
        self.check_topology(topology)?;
        let ctx = RouteContext::new(topology);
        let feats = self.segment_features(&batch_of_one(x)?, &Graph::segments(topology))?;
        let mut tape = Tape::new();
        let bound = tape.bind(&self.trainable());
        let h = tape.constant(feats);
        let v = self.build(&mut tape, &bound, h, &ctx, None)?;
        Ok(ForwardTrace {
            segment_features: unbatch(tape.value(h)),
            routes: unbatch(tape.value(v.routes)),
            enhanced: unbatch(tape.value(v.enhanced)),
            output: unbatch(tape.value(v.output)),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>, stage1_path: Option<&Path>) -> Result<()> {
        let ck = FrameworkCheckpoint {
            format: FRAMEWORK_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            stage1_path: stage1_path.map(Path::to_path_buf),
            model: self.clone(),
        };
        write_json(path.as_ref(), &ck)
    }

    /// Load a checkpoint and check it against `topology`.
    pub fn load(path: impl AsRef<Path>, topology: &RoadTopology) -> Result<Self> {
        let ck: FrameworkCheckpoint = read_json(path.as_ref())?;
        if ck.format != FRAMEWORK_FORMAT {
            return Err(Error::Checkpoint(format!("not a framework checkpoint (format `{}`)", ck.format)));
        }
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {}", ck.version)));
        }
        let m = ck.model;
        m.check_topology(topology)?;
        if m.stage1.content_hash() != m.stage1_hash {
            return Err(Error::Checkpoint("embedded stage-1 parameters do not match their recorded hash".into()));
        }
        if let Some(p) = ck.stage1_path.filter(|p| p.exists()) {
            let external = BackboneModel::load(&p, Some(&m.topology_hash))?;
            if external.content_hash() != m.stage1_hash {
                return Err(Error::Checkpoint(format!(
                    "stage-1 checkpoint {} changed since this model was trained",
                    p.display()
                )));
            }
        }
        Ok(m)
    }
}

#[derive(Serialize, Deserialize)]
struct FrameworkCheckpoint {
    format: String,
    version: u32,
    stage1_path: Option<PathBuf>,
    model: FrameworkModel,
}

/// Train Stage 2 on windows of cellular inputs `[S, N, T]` and raw mobility
/// targets `[S, M, D′]`. Stage 1 is frozen; its features are computed once per
/// split. The loss is MAE in raw mobility units; the kept parameters are
/// those of the best validation epoch.
pub fn train_framework(
    stage1: &BackboneModel,
    data: &DatasetSplits,
    topology: &RoadTopology,
    config: &FrameworkConfig,
    train: &TrainConfig,
) -> Result<FrameworkModel> {
    let m = topology.num_routes();
    if data.train.target_entities() != m {
        return Err(Error::shape(
            "framework targets",
            format!("{m} routes"),
            format!("{} entities", data.train.target_entities()),
        ));
    }
    if stage1.config.t_in != data.train.t_in {
        return Err(Error::shape(
            "framework inputs",
            format!("windows of {} steps", stage1.config.t_in),
            format!("windows of {} steps", data.train.t_in),
        ));
    }
    let mut model = FrameworkModel::new(stage1, topology, config, data.train.t_out, train.seed)?;
    model.set_output(OutputScale::fit(&data.train.targets)?);
    let seg_graph = Graph::segments(topology);
    let ctx = RouteContext::new(topology);
    let norm = &model.stage1.input_norm;
    let train_feats = model.segment_features(&norm.apply(&data.train.inputs), &seg_graph)?;
    let valid_feats = if data.valid.is_empty() {
        None
    } else {
        Some(model.segment_features(&norm.apply(&data.valid.inputs), &seg_graph)?)
    };
    let targets = &data.train.targets;
    let shell = model.clone();
    let grad = |p: &ParamStore, idx: &[usize], seed: u64| -> Result<ChunkGrad> {
        let mut tape = Tape::new();
        let bound = tape.bind(p);
        let h = tape.constant(stack(&train_feats, idx));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let out = shell.build(&mut tape, &bound, h, &ctx, Some(&mut rng))?;
        let loss = tape.mean_abs_error(out.output, stack(targets, idx).into_data().into());
        let g = tape.backward(loss);
        Ok(ChunkGrad {
            loss: tape.value(loss).data()[0],
            grads: collect_grads(&bound, &g),
        })
    };
    let validate = |p: &ParamStore| -> Result<Option<f64>> {
        let Some(vf) = &valid_feats else { return Ok(None) };
        let mut m = shell.clone();
        m.set_trainable(p);
        Ok(Some(mae(&m.predict_from_features(vf, &ctx)?, &data.valid.targets)))
    };
    let mut params = model.trainable();
    let log = fit(&mut params, data.train.len(), train, grad, validate)?;
    model.set_trainable(&params);
    model.log = log;
    Ok(model)
}
