//! Forecast metrics, improvement ratios and the with/without and ablation
//! experiment runners.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{pretrain_stage1, BackboneConfig, BackboneModel, Graph, OutputScale};
use crate::data::{fit_normalizer, make_windows, DatasetSplits, FlowSeries, SplitRatios, WindowedDataset};
use crate::error::{Error, Result};
use crate::framework::{train_framework, FrameworkConfig, FrameworkModel, Setting};
use crate::tensor::Tensor;
use crate::topology::RoadTopology;
use crate::train::{TrainConfig, TrainingLog};

/// How the overall column is formed; stored in every report.
pub const OVERALL_DEFINITION: &str = "mean over every horizon step";

/// Horizons shown as table columns, in minutes.
pub const TABLE_MINUTES: [u64; 3] = [15, 30, 60];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mae: f64,
    pub rmse: f64,
    /// Percent; `None` when every truth value is zero.
    pub mape: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonMetrics {
    /// 1-based step ahead.
    pub step: usize,
    #[serde(flatten)]
    pub metrics: Metrics,
    /// Cells left out of MAPE because the truth is zero.
    pub masked: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub horizons: Vec<HorizonMetrics>,
    pub overall: Metrics,
    pub samples: usize,
    pub entities: usize,
    pub masked: usize,
}

fn mean(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (mut s, mut n) = (0.0, 0usize);
    for v in values {
        s += v;
        n += 1;
    }
    (n > 0).then(|| s / n as f64)
}

/// MAE, RMSE and zero-masked MAPE per horizon step for `[S, M, D′]` tensors.
pub fn compute_metrics(pred: &Tensor, truth: &Tensor) -> Result<MetricsReport> {
    if pred.shape() != truth.shape() || pred.shape().len() != 3 {
        return Err(Error::shape(
            "metrics",
            format!("matching [S, M, D′] tensors, truth {:?}", truth.shape()),
            format!("{:?}", pred.shape()),
        ));
    }
    if truth.data().iter().any(|t| !(t.is_finite() && *t >= 0.0)) {
        return Err(Error::InvalidInput("truth values must be finite and non-negative".into()));
    }
    let (s, m, d) = (pred.shape()[0], pred.shape()[1], pred.shape()[2]);
    if s * m * d == 0 {
        return Err(Error::InvalidInput("cannot score an empty forecast".into()));
    }
    let (p, t) = (pred.data(), truth.data());
    let horizons: Vec<HorizonMetrics> = (0..d)
        .map(|h| {
            let (mut abs, mut sq, mut pct, mut kept) = (0.0, 0.0, 0.0, 0usize);
            for i in (h..p.len()).step_by(d) {
                let e = p[i] - t[i];
                abs += e.abs();
                sq += e * e;
                if t[i] != 0.0 {
                    pct += e.abs() / t[i];
                    kept += 1;
                }
            }
            let n = (s * m) as f64;
            HorizonMetrics {
                step: h + 1,
                metrics: Metrics {
                    mae: abs / n,
                    rmse: (sq / n).sqrt(),
                    mape: (kept > 0).then(|| pct / kept as f64 * 100.0),
                },
                masked: s * m - kept,
            }
        })
        .collect();
    Ok(MetricsReport {
        overall: overall_of(&horizons),
        masked: horizons.iter().map(|h| h.masked).sum(),
        horizons,
        samples: s,
        entities: m,
    })
}

fn overall_of(horizons: &[HorizonMetrics]) -> Metrics {
    Metrics {
        mae: mean(horizons.iter().map(|h| h.metrics.mae)).unwrap_or(f64::NAN),
        rmse: mean(horizons.iter().map(|h| h.metrics.rmse)).unwrap_or(f64::NAN),
        mape: mean(horizons.iter().filter_map(|h| h.metrics.mape)),
    }
}

impl MetricsReport {
    /// Element-wise mean of reports over repeated runs.
    pub fn mean(reports: &[MetricsReport]) -> Option<MetricsReport> {
        let first = reports.first()?;
        let horizons = (0..first.horizons.len())
            .map(|h| {
                let col = || reports.iter().map(move |r| &r.horizons[h]);
                let mapes: Vec<f64> = col().filter_map(|x| x.metrics.mape).collect();
                HorizonMetrics {
                    step: h + 1,
                    metrics: Metrics {
                        mae: mean(col().map(|x| x.metrics.mae)).unwrap(),
                        rmse: mean(col().map(|x| x.metrics.rmse)).unwrap(),
                        mape: mean(mapes),
                    },
                    masked: col().map(|x| x.masked).sum::<usize>() / reports.len(),
                }
            })
            .collect::<Vec<_>>();
        Some(MetricsReport {
            overall: overall_of(&horizons),
            masked: horizons.iter().map(|h| h.masked).sum(),
            horizons,
            samples: first.samples,
            entities: first.entities,
        })
    }

    /// Step shown under each table column (`15 min` → 1 at 900 s, …), or
    /// `None` when the horizon does not reach it.
    pub fn table_steps(&self, interval: u64) -> Vec<(String, Option<usize>)> {
        table_steps(interval, self.horizons.len())
    }
}

/// Column labels with the horizon step they read from.
pub fn table_steps(interval: u64, horizon: usize) -> Vec<(String, Option<usize>)> {
    TABLE_MINUTES
        .iter()
        .map(|&min| {
            let secs = min * 60;
            let step = (interval > 0 && secs % interval == 0)
                .then(|| (secs / interval) as usize)
                .filter(|&s| s >= 1 && s <= horizon);
            (format!("{min} min"), step)
        })
        .collect()
}

/// `(without − with) / without × 100`; `None` when `without` is zero or
/// either score is missing or non-finite.
pub fn ir(without: Option<f64>, with: Option<f64>) -> Option<f64> {
    let (a, b) = (without?, with?);
    (a != 0.0 && a.is_finite() && b.is_finite()).then(|| (a - b) / a * 100.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImprovementRatio {
    pub mae: Option<f64>,
    pub rmse: Option<f64>,
    pub mape: Option<f64>,
}

impl ImprovementRatio {
    fn of(without: &Metrics, with: &Metrics) -> Self {
        Self {
            mae: ir(Some(without.mae), Some(with.mae)),
            rmse: ir(Some(without.rmse), Some(with.rmse)),
            mape: ir(without.mape, with.mape),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub without: MetricsReport,
    pub with: MetricsReport,
    /// Per horizon step.
    pub ir: Vec<ImprovementRatio>,
    pub overall_ir: ImprovementRatio,
}

/// Improvement of `with` over `without` for every metric and horizon.
pub fn improvement_ratio(without: &MetricsReport, with: &MetricsReport) -> Result<ComparisonReport> {
    if without.horizons.len() != with.horizons.len() {
        return Err(Error::shape(
            "improvement ratio",
            format!("{} horizons", without.horizons.len()),
            format!("{} horizons", with.horizons.len()),
        ));
    }
    Ok(ComparisonReport {
        ir: without
            .horizons
            .iter()
            .zip(&with.horizons)
            .map(|(a, b)| ImprovementRatio::of(&a.metrics, &b.metrics))
            .collect(),
        overall_ir: ImprovementRatio::of(&without.overall, &with.overall),
        without: without.clone(),
        with: with.clone(),
    })
}

/// Windows for both stages cut from the same cellular and mobility series.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentData {
    /// Cellular inputs and cellular targets (segment pre-training).
    pub gct: DatasetSplits,
    /// Cellular inputs and route mobility targets.
    pub mobility: DatasetSplits,
    pub interval: u64,
}

impl ExperimentData {
    pub fn from_series(gct: &FlowSeries, mobility: &FlowSeries, t_in: usize, t_out: usize, ratios: SplitRatios) -> Result<Self> {
        Ok(Self {
            gct: make_windows(gct, gct, t_in, t_out, ratios)?,
            mobility: make_windows(gct, mobility, t_in, t_out, ratios)?,
            interval: gct.interval,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Repetitions; run `r` uses seed `base_seed + r` in every arm.
    pub runs: usize,
    pub base_seed: u64,
    pub stage1: BackboneConfig,
    pub framework: FrameworkConfig,
    pub pretrain: TrainConfig,
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            runs: 5,
            base_seed: 0,
            stage1: BackboneConfig::default(),
            framework: FrameworkConfig::default(),
            pretrain: TrainConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.runs == 0 {
            return Err(Error::Config("runs must be at least 1".into()));
        }
        self.stage1.validate()?;
        self.framework.stage2.validate()?;
        self.pretrain.validate()?;
        self.train.validate()
    }

    pub fn seed(&self, run: usize) -> u64 {
        self.base_seed.wrapping_add(run as u64)
    }

    fn train_for(&self, run: usize) -> TrainConfig {
        TrainConfig {
            seed: self.seed(run),
            ..self.train.clone()
        }
    }
}

/// Outcome of one training job; failures are kept rather than propagated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOutcome {
    pub seed: u64,
    pub metrics: Option<MetricsReport>,
    pub error: Option<String>,
    pub best_epoch: Option<usize>,
    pub epochs: usize,
}

impl RunOutcome {
    fn from_result(seed: u64, r: Result<(MetricsReport, TrainingLog)>) -> Self {
        match r {
            Ok((m, log)) => Self {
                seed,
                metrics: Some(m),
                error: None,
                best_epoch: Some(log.best_epoch),
                epochs: log.epochs.len(),
            },
            Err(e) => Self {
                seed,
                metrics: None,
                error: Some(e.to_string()),
                best_epoch: None,
                epochs: 0,
            },
        }
    }
}

fn mean_of(runs: &[RunOutcome]) -> Option<MetricsReport> {
    let ok: Vec<MetricsReport> = runs.iter().filter_map(|r| r.metrics.clone()).collect();
    MetricsReport::mean(&ok)
}

/// Segment backbone for each run: supplied ones, or pre-trained with the run seed.
pub fn stage1_models(
    config: &ExperimentConfig,
    data: &ExperimentData,
    topology: &RoadTopology,
    supplied: Option<&[BackboneModel]>,
) -> Result<Vec<BackboneModel>> {
    match supplied {
        Some(s) if s.len() >= config.runs => Ok(s[..config.runs].to_vec()),
        Some(s) if s.len() == 1 => Ok(vec![s[0].clone(); config.runs]),
        Some(s) => Err(Error::Config(format!(
            "{} stage-1 models supplied for {} runs",
            s.len(),
            config.runs
        ))),
        None => (0..config.runs)
            .map(|r| {
                let train = TrainConfig {
                    seed: config.seed(r),
                    ..config.pretrain.clone()
                };
                pretrain_stage1(&data.gct, topology, &config.stage1, &train)
            })
            .collect(),
    }
}

/// Each route's start-segment window: `[S, N, T]` → `[S, M, T]`.
pub fn start_segment_inputs(inputs: &Tensor, topology: &RoadTopology) -> Tensor {
    let (s, t) = (inputs.shape()[0], inputs.shape()[2]);
    let mut data = Vec::with_capacity(s * topology.num_routes() * t);
    for i in 0..s {
        let w = inputs.outer(i);
        for r in topology.routes() {
            data.extend_from_slice(&w[r.start * t..(r.start + 1) * t]);
        }
    }
    Tensor::new(&[s, topology.num_routes(), t], data)
}

/// The backbone alone on the route graph, fed each route's start-segment
/// cellular series. Returns the model and its raw-unit test forecasts.
pub fn train_route_baseline(
    data: &DatasetSplits,
    topology: &RoadTopology,
    config: &BackboneConfig,
    train: &TrainConfig,
) -> Result<(BackboneModel, Tensor)> {
    let graph = Graph::routes(topology);
    let route_inputs = |ds: &WindowedDataset| start_segment_inputs(&ds.inputs, topology);
    let cfg = BackboneConfig {
        in_channels: 1,
        t_in: data.train.t_in,
        horizon: data.train.t_out,
        ..config.clone()
    };
    let mut model = BackboneModel::new(cfg, &graph, train.seed)?;
    let tx = route_inputs(&data.train);
    model.input_norm = fit_normalizer(&tx, false)?;
    model.output = OutputScale::fit(&data.train.targets)?;
    let norm = |t: &Tensor| model.input_norm.apply(t);
    let (tx, vx, sx) = (norm(&tx), norm(&route_inputs(&data.valid)), norm(&route_inputs(&data.test)));
    model.train(&graph, (&tx, &data.train.targets), Some((&vx, &data.valid.targets)), train)?;
    let pred = model.predict_batch(&sx, &graph)?;
    Ok((model, pred))
}

/// Test-split metrics of a trained framework.
pub fn evaluate_framework(model: &FrameworkModel, test: &WindowedDataset, topology: &RoadTopology) -> Result<MetricsReport> {
    compute_metrics(&model.predict_raw(&test.inputs, topology)?, &test.targets)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRun {
    pub seed: u64,
    pub without: RunOutcome,
    pub with: RunOutcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonOutcome {
    pub runs: Vec<ComparisonRun>,
    /// Improvement of the run-averaged metrics; absent if either arm failed in every run.
    pub report: Option<ComparisonReport>,
    pub interval: u64,
    pub overall_definition: String,
}

/// Train the route backbone without (start-segment inputs) and with the
/// framework for every run, matched by seed, and compare their mean test metrics.
pub fn run_comparison(
    config: &ExperimentConfig,
    data: &ExperimentData,
    topology: &RoadTopology,
    stage1: Option<&[BackboneModel]>,
) -> Result<ComparisonOutcome> {
    config.validate()?;
    let stage1 = stage1_models(config, data, topology, stage1)?;
    let test = &data.mobility.test;
    let runs: Vec<ComparisonRun> = (0..config.runs)
        .map(|r| {
            let train = config.train_for(r);
            let without = train_route_baseline(&data.mobility, topology, &config.framework.stage2, &train)
                .and_then(|(m, pred)| Ok((compute_metrics(&pred, &test.targets)?, m.log)));
            let fc = FrameworkConfig {
                ablation: Default::default(),
                ..config.framework.clone()
            };
            let with = train_framework(&stage1[r], &data.mobility, topology, &fc, &train)
                .and_then(|m| Ok((evaluate_framework(&m, test, topology)?, m.log)));
            ComparisonRun {
                seed: train.seed,
                without: RunOutcome::from_result(train.seed, without),
                with: RunOutcome::from_result(train.seed, with),
            }
        })
        .collect();
    let w_o: Vec<RunOutcome> = runs.iter().map(|r| r.without.clone()).collect();
    let w: Vec<RunOutcome> = runs.iter().map(|r| r.with.clone()).collect();
    let report = match (mean_of(&w_o), mean_of(&w)) {
        (Some(a), Some(b)) => Some(improvement_ratio(&a, &b)?),
        _ => None,
    };
    Ok(ComparisonOutcome {
        runs,
        report,
        interval: data.interval,
        overall_definition: OVERALL_DEFINITION.into(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub setting: Setting,
    pub label: String,
    /// True for the full framework, against which the others are read.
    pub baseline: bool,
    pub runs: Vec<RunOutcome>,
    pub mean: Option<MetricsReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    pub interval: u64,
    pub overall_definition: String,
}

impl AblationReport {
    pub fn row(&self, setting: Setting) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.setting == setting)
    }
}

/// Train all four ablations and the full framework for every run with shared
/// segment backbones and matched seeds.
pub fn run_ablations(
    config: &ExperimentConfig,
    data: &ExperimentData,
    topology: &RoadTopology,
    stage1: Option<&[BackboneModel]>,
) -> Result<AblationReport> {
    config.validate()?;
    let stage1 = stage1_models(config, data, topology, stage1)?;
    let test = &data.mobility.test;
    let rows = Setting::ALL
        .par_iter()
        .map(|&setting| {
            let fc = FrameworkConfig {
                ablation: setting.ablation(),
                ..config.framework.clone()
            };
            let runs: Vec<RunOutcome> = (0..config.runs)
                .map(|r| {
                    let train = config.train_for(r);
                    let out = train_framework(&stage1[r], &data.mobility, topology, &fc, &train)
                        .and_then(|m| Ok((evaluate_framework(&m, test, topology)?, m.log)));
                    RunOutcome::from_result(train.seed, out)
                })
                .collect();
            AblationRow {
                setting,
                label: setting.label().into(),
                baseline: setting == Setting::Full,
                mean: mean_of(&runs),
                runs,
            }
        })
        .collect();
    Ok(AblationReport {
        rows,
        interval: data.interval,
        overall_definition: OVERALL_DEFINITION.into(),
    })
}

fn fmt_opt(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(|| "n/a".into(), |x| format!("{x:.digits$}"))
}

/// Selected table columns of a report: three fixed horizons, then overall.
fn table_cells(report: &MetricsReport, interval: u64) -> Vec<(String, Option<Metrics>)> {
    let mut cols: Vec<(String, Option<Metrics>)> = report
        .table_steps(interval)
        .into_iter()
        .map(|(label, step)| (label, step.map(|s| report.horizons[s - 1].metrics)))
        .collect();
    cols.push(("Overall".into(), Some(report.overall)));
    cols
}

fn metric_cells(m: Option<Metrics>) -> [String; 3] {
    match m {
        Some(m) => [format!("{:.3}", m.mae), format!("{:.3}", m.rmse), fmt_opt(m.mape, 2)],
        None => ["n/a".into(), "n/a".into(), "n/a".into()],
    }
}

fn table_header(report: &MetricsReport, interval: u64, first: &str) -> String {
    let cols = table_cells(report, interval);
    let mut s = format!("| {first} |");
    for (label, _) in &cols {
        let _ = write!(s, " {label} MAE | {label} RMSE | {label} MAPE (%) |");
    }
    s.push('\n');
    s.push_str(&"|---".repeat(1 + 3 * cols.len()));
    s.push_str("|\n");
    s
}

fn table_row(name: &str, cells: &[[String; 3]]) -> String {
    let mut s = format!("| {name} |");
    for c in cells {
        let _ = write!(s, " {} | {} | {} |", c[0], c[1], c[2]);
    }
    s.push('\n');
    s
}

impl ComparisonReport {
    pub fn to_markdown(&self, interval: u64) -> String {
        let mut s = table_header(&self.without, interval, "");
        for (name, r) in [("w/o", &self.without), ("w", &self.with)] {
            let cells: Vec<[String; 3]> = table_cells(r, interval).into_iter().map(|(_, m)| metric_cells(m)).collect();
            s.push_str(&table_row(name, &cells));
        }
        let mut irs: Vec<[String; 3]> = self
            .without
            .table_steps(interval)
            .into_iter()
            .map(|(_, step)| match step {
                Some(st) => ir_cells(&self.ir[st - 1]),
                None => ["n/a".into(), "n/a".into(), "n/a".into()],
            })
            .collect();
        irs.push(ir_cells(&self.overall_ir));
        s.push_str(&table_row("IR (%)", &irs));
        s
    }

    /// Long-form rows: `arm,step,mae,rmse,mape` plus `ir` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("row,step,mae,rmse,mape\n");
        for (arm, r) in [("without", &self.without), ("with", &self.with)] {
            push_metric_rows(&mut s, arm, r);
        }
        for (h, ir) in self.ir.iter().enumerate() {
            push_ir_row(&mut s, &(h + 1).to_string(), ir);
        }
        push_ir_row(&mut s, "overall", &self.overall_ir);
        s
    }
}

fn ir_cells(ir: &ImprovementRatio) -> [String; 3] {
    [fmt_opt(ir.mae, 1), fmt_opt(ir.rmse, 1), fmt_opt(ir.mape, 1)]
}

fn csv_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

fn push_metric_rows(s: &mut String, name: &str, r: &MetricsReport) {
    for h in &r.horizons {
        let m = h.metrics;
        let _ = writeln!(s, "{name},{},{},{},{}", h.step, m.mae, m.rmse, csv_opt(m.mape));
    }
    let m = r.overall;
    let _ = writeln!(s, "{name},overall,{},{},{}", m.mae, m.rmse, csv_opt(m.mape));
}

fn push_ir_row(s: &mut String, step: &str, ir: &ImprovementRatio) {
    let _ = writeln!(s, "ir,{step},{},{},{}", csv_opt(ir.mae), csv_opt(ir.rmse), csv_opt(ir.mape));
}

impl AblationReport {
    pub fn to_markdown(&self) -> String {
        let Some(template) = self.rows.iter().find_map(|r| r.mean.as_ref()) else {
            return "every setting failed\n".into();
        };
        let mut s = table_header(template, self.interval, "Setting");
        for row in &self.rows {
            let cells: Vec<[String; 3]> = match &row.mean {
                Some(m) => table_cells(m, self.interval).into_iter().map(|(_, m)| metric_cells(m)).collect(),
                None => vec![["failed".into(), String::new(), String::new()]],
            };
            s.push_str(&table_row(&row.label, &cells));
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("row,step,mae,rmse,mape\n");
        for row in &self.rows {
            if let Some(m) = &row.mean {
                push_metric_rows(&mut s, &row.label, m);
            }
        }
        s
    }
}

impl ComparisonOutcome {
    pub fn to_markdown(&self) -> String {
        match &self.report {
            Some(r) => r.to_markdown(self.interval),
            None => "no comparison: an arm failed in every run\n".into(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], v: Vec<f64>) -> Tensor {
        Tensor::new(shape, v)
    }

    #[test]
    fn worked_example() {
        let r = compute_metrics(&t(&[1, 2, 1], vec![1.0, 6.0]), &t(&[1, 2, 1], vec![2.0, 4.0])).unwrap();
        let m = r.horizons[0].metrics;
        assert!((m.mae - 1.5).abs() < 1e-15);
        assert!((m.rmse - 2.5f64.sqrt()).abs() < 1e-15);
        assert!((m.mape.unwrap() - 50.0).abs() < 1e-12);
        assert_eq!(r.overall, m);
    }

    #[test]
    fn perfect_forecast_scores_zero() {
        let x = t(&[2, 2, 2], vec![1.0, 0.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        let r = compute_metrics(&x, &x).unwrap();
        assert_eq!(r.overall, Metrics { mae: 0.0, rmse: 0.0, mape: Some(0.0) });
        assert_eq!(r.masked, 1);
    }

    #[test]
    fn zero_truth_is_masked_not_an_error() {
        let r = compute_metrics(&t(&[1, 2, 1], vec![1.0, 2.0]), &t(&[1, 2, 1], vec![0.0, 0.0])).unwrap();
        assert_eq!(r.horizons[0].metrics.mape, None);
        assert_eq!(r.overall.mape, None);
        assert_eq!(r.masked, 2);
        assert!(compute_metrics(&t(&[1, 2, 1], vec![1.0, 2.0]), &t(&[1, 1, 2], vec![0.0, 0.0])).is_err());
        assert!(compute_metrics(&t(&[1, 1, 1], vec![1.0]), &t(&[1, 1, 1], vec![-1.0])).is_err());
    }

    /// Plain per-cell loops over `[S, M, D]`.
    pub(crate) fn oracle(p: &Tensor, y: &Tensor) -> Vec<(f64, f64, Option<f64>)> {
        let s = p.shape();
        (0..s[2])
            .map(|h| {
                let mut cells = vec![];
                for i in 0..s[0] {
                    for m in 0..s[1] {
                        cells.push((p.get(&[i, m, h]), y.get(&[i, m, h])));
                    }
                }
                let n = cells.len() as f64;
                let mae = cells.iter().map(|(a, b)| (a - b).abs()).sum::<f64>() / n;
                let rmse = (cells.iter().map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n).sqrt();
                let nz: Vec<_> = cells.iter().filter(|c| c.1 != 0.0).collect();
                let mape = (!nz.is_empty()).then(|| 100.0 * nz.iter().map(|(a, b)| ((a - b) / b).abs()).sum::<f64>() / nz.len() as f64);
                (mae, rmse, mape)
            })
            .collect()
    }

    #[test]
    fn matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let shape = [rng.random_range(1..6), rng.random_range(1..8), rng.random_range(1..5)];
            let n = shape.iter().product();
            let y: Vec<f64> = (0..n).map(|_| if rng.random_bool(0.2) { 0.0 } else { rng.random_range(0.0..50.0) }).collect();
            let p: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..60.0)).collect();
            let (p, y) = (t(&shape, p), t(&shape, y));
            let r = compute_metrics(&p, &y).unwrap();
            for (h, (mae, rmse, mape)) in oracle(&p, &y).into_iter().enumerate() {
                let got = r.horizons[h].metrics;
                assert!((got.mae - mae).abs() < 1e-9 && (got.rmse - rmse).abs() < 1e-9);
                match (got.mape, mape) {
                    (Some(a), Some(b)) => assert!((a - b).abs() < 1e-9),
                    (a, b) => assert_eq!(a, b),
                }
            }
        }
    }

    proptest! {
        #[test]
        fn mae_never_exceeds_rmse_and_samples_commute(
            vals in proptest::collection::vec((0.0f64..100.0, -10.0f64..110.0), 12),
            rot in 0usize..3,
        ) {
            let (y, p): (Vec<f64>, Vec<f64>) = vals.into_iter().unzip();
            let r = compute_metrics(&t(&[3, 2, 2], p.clone()), &t(&[3, 2, 2], y.clone())).unwrap();
            for h in &r.horizons {
                prop_assert!(h.metrics.mae <= h.metrics.rmse + 1e-12);
            }
            prop_assert!(r.overall.mae <= r.overall.rmse + 1e-12);
            let shift = |v: &[f64]| { let mut v = v.to_vec(); v.rotate_left(rot * 4); v };
            let r2 = compute_metrics(&t(&[3, 2, 2], shift(&p)), &t(&[3, 2, 2], shift(&y))).unwrap();
            prop_assert!((r.overall.mae - r2.overall.mae).abs() < 1e-12);
            prop_assert!((r.overall.rmse - r2.overall.rmse).abs() < 1e-12);
        }

        #[test]
        fn ir_sign_follows_the_difference(a in 0.1f64..100.0, b in 0.1f64..100.0) {
            prop_assert_eq!(ir(Some(a), Some(a)), Some(0.0));
            let fwd = ir(Some(a), Some(b)).unwrap();
            let back = ir(Some(b), Some(a)).unwrap();
            prop_assert!(fwd.signum() == -back.signum() || a == b);
            prop_assert!((fwd * a + back * b).abs() < 1e-9);
        }
    }

    #[test]
    fn ir_examples() {
        let v = ir(Some(3.99), Some(3.61)).unwrap();
        assert!((v - 9.5238).abs() < 1e-4);
        assert_eq!(format!("{v:.1}"), "9.5");
        assert_eq!(ir(Some(0.0), Some(1.0)), None);
        assert!(ir(Some(2.0), Some(3.0)).unwrap() < 0.0);
    }

    #[test]
    fn table_columns_are_steps_one_two_four() {
        let steps: Vec<Option<usize>> = table_steps(900, 4).into_iter().map(|c| c.1).collect();
        assert_eq!(steps, vec![Some(1), Some(2), Some(4)]);
        assert_eq!(table_steps(900, 2)[2].1, None);
        assert_eq!(table_steps(1800, 4)[0].1, None);
    }

    #[test]
    fn reports_render() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let rand_t = |rng: &mut ChaCha8Rng| t(&[3, 2, 4], (0..24).map(|_| rng.random_range(1.0..9.0)).collect());
        let y = rand_t(&mut rng);
        let a = compute_metrics(&rand_t(&mut rng), &y).unwrap();
        let b = compute_metrics(&rand_t(&mut rng), &y).unwrap();
        let c = improvement_ratio(&a, &b).unwrap();
        let md = c.to_markdown(900);
        assert!(md.contains("15 min MAE") && md.contains("| IR (%) |"));
        assert_eq!(c.to_csv().lines().count(), 1 + 2 * 5 + 5);
        let same = improvement_ratio(&a, &a).unwrap();
        assert_eq!(same.overall_ir.mae, Some(0.0));
        let mean = MetricsReport::mean(&[a.clone(), a.clone()]).unwrap();
        assert_eq!(mean, a);
    }

    fn micro_experiment() -> (RoadTopology, ExperimentData, ExperimentConfig) {
        use crate::data::{generate_synthetic, GeneratorConfig};
        let topo = RoadTopology::synthetic(5, 5, 3).unwrap();
        let gen = GeneratorConfig {
            days: 1,
            emit_records: false,
            ..GeneratorConfig::default()
        };
        let out = generate_synthetic(&topo, &gen, 3).unwrap();
        let data = ExperimentData::from_series(&out.gct, &out.mobility, 8, 4, SplitRatios::default()).unwrap();
        let small = BackboneConfig {
            channels: 3,
            layers: 2,
            dilations: vec![1, 2],
            head_hidden: 8,
            ..BackboneConfig::default()
        };
        let cfg = ExperimentConfig {
            runs: 1,
            stage1: small.clone(),
            framework: FrameworkConfig {
                stage2: small,
                ..FrameworkConfig::default()
            },
            pretrain: TrainConfig { epochs: 1, ..TrainConfig::default() },
            train: TrainConfig { epochs: 1, ..TrainConfig::default() },
            ..ExperimentConfig::default()
        };
        (topo, data, cfg)
    }

    #[test]
    fn comparison_smoke_and_repeatability() {
        let (topo, data, cfg) = micro_experiment();
        let a = run_comparison(&cfg, &data, &topo, None).unwrap();
        let report = a.report.as_ref().unwrap();
        assert_eq!(report.ir.len(), 4);
        assert!(report.overall_ir.mae.is_some());
        assert!(a.runs[0].with.error.is_none() && a.runs[0].without.error.is_none());
        assert_eq!(a.overall_definition, OVERALL_DEFINITION);
        let b = run_comparison(&cfg, &data, &topo, None).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }

    #[test]
    fn ablation_rows_in_order_with_full_as_baseline() {
        let (topo, data, cfg) = micro_experiment();
        let r = run_ablations(&cfg, &data, &topo, None).unwrap();
        assert_eq!(r.rows.len(), 5);
        let order: Vec<Setting> = r.rows.iter().map(|x| x.setting).collect();
        assert_eq!(order, Setting::ALL);
        assert!(r.rows.iter().filter(|x| x.baseline).all(|x| x.setting == Setting::Full));
        assert_eq!(r.rows.iter().filter(|x| x.baseline).count(), 1);
        assert!(r.rows.iter().all(|x| x.mean.is_some()));
        assert_eq!(r.to_markdown().lines().count(), 2 + 5);
    }

    #[test]
    fn failures_are_recorded_per_run() {
        let (topo, data, mut cfg) = micro_experiment();
        cfg.runs = 2;
        let good = stage1_models(&cfg, &data, &topo, None).unwrap().remove(0);
        let other = RoadTopology::synthetic(6, 6, 1).unwrap();
        let bad = BackboneModel::new(good.config.clone(), &Graph::segments(&other), 0).unwrap();
        let r = run_ablations(&cfg, &data, &topo, Some(&[good.clone(), bad.clone()])).unwrap();
        for row in &r.rows {
            assert!(row.runs[0].error.is_none(), "{:?}", row.runs[0].error);
            assert!(row.runs[1].error.as_deref().unwrap().contains("stage1"));
            assert_eq!(row.mean.as_ref(), row.runs[0].metrics.as_ref());
        }
        let all_bad = run_ablations(&cfg, &data, &topo, Some(&[bad.clone(), bad])).unwrap();
        assert_eq!(all_bad.rows.len(), 5);
        assert!(all_bad.rows.iter().all(|x| x.mean.is_none()));
        assert_eq!(all_bad.to_markdown(), "every setting failed\n");
    }
}
