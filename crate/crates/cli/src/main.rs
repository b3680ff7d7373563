//! `telto`: generate data, pre-train, train, evaluate, compare, ablate,
//! analyze and predict.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use telto_core::analysis::{describe, histogram, upstream_correlation, weekly_profile};
use telto_core::autograd::Activation;
use telto_core::data::{generate_synthetic, load_flows, save_flows, save_records, FlowKind, FlowSeries};
use telto_core::evaluation::{evaluate_framework, ExperimentData};
use telto_core::topology::{load_topology, save_topology};
use telto_core::{
    pretrain_stage1, run_ablations, run_comparison, train_framework, AdjacencyMode, BackboneModel, Error,
    FrameworkModel, Result, RoadTopology, Setting, Tensor,
};

use config::RunConfig;

#[derive(Parser)]
#[command(name = "telto", version, about = "Forecast directional route mobility from per-segment cellular traffic counts")]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON run configuration. Flags override its values.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Output directory (created if missing).
    #[arg(short, long, value_name = "DIR")]
    output: Option<PathBuf>,
    /// Seed for data generation and training [default: 0].
    #[arg(long)]
    seed: Option<u64>,
    /// Print the resolved configuration and exit.
    #[arg(long)]
    show_config: bool,
}

#[derive(Args, Clone)]
struct DataArg {
    /// Directory with topology.json, gct.csv and mobility.csv (as written by `generate`).
    #[arg(long, value_name = "DIR")]
    data: Option<PathBuf>,
}

#[derive(Args, Clone, Default)]
struct TrainArgs {
    /// Maximum training epochs [default: 180].
    #[arg(long)]
    epochs: Option<usize>,
    /// Early-stopping patience in epochs; 0 disables it [default: 20].
    #[arg(long)]
    patience: Option<usize>,
    /// Adam learning rate [default: 0.001].
    #[arg(long)]
    lr: Option<f64>,
    /// Mini-batch size [default: 64].
    #[arg(long)]
    batch_size: Option<usize>,
    /// Hidden channels of both backbones [default: 32].
    #[arg(long)]
    channels: Option<usize>,
    /// Backbone adjacency: static or static+adaptive [default: static].
    #[arg(long)]
    adjacency: Option<AdjacencyMode>,
    /// Nonlinearity of the route transformation and attention [default: relu].
    #[arg(long)]
    activation: Option<Activation>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SettingArg {
    Full,
    NoStage1,
    NoTransform,
    NoEnhance,
    NoStage2,
}

impl From<SettingArg> for Setting {
    fn from(s: SettingArg) -> Self {
        match s {
            SettingArg::Full => Setting::Full,
            SettingArg::NoStage1 => Setting::NoStage1,
            SettingArg::NoTransform => Setting::NoTransform,
            SettingArg::NoEnhance => Setting::NoEnhance,
            SettingArg::NoStage2 => Setting::NoStage2,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Gct,
    Mobility,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a road network with cellular and mobility flows.
    Generate {
        #[command(flatten)]
        common: Common,
        /// Days to simulate [default: 31].
        #[arg(long)]
        days: Option<u32>,
        /// Road segments [default: 34].
        #[arg(long)]
        segments: Option<usize>,
        /// Undirected links, two routes each [default: 42].
        #[arg(long)]
        links: Option<usize>,
        /// Also write the individual cellular records (large).
        #[arg(long)]
        records: bool,
    },
    /// Pre-train the segment backbone on cellular flows.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Train the route stage on top of a frozen pre-trained segment backbone.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        #[command(flatten)]
        train: TrainArgs,
        /// Segment backbone checkpoint written by `pretrain`.
        #[arg(long, value_name = "FILE")]
        stage1: PathBuf,
        /// Component to remove [default: full].
        #[arg(long, value_enum)]
        setting: Option<SettingArg>,
    },
    /// Score a trained model on the test split.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        /// Framework checkpoint written by `train`.
        #[arg(long, value_name = "FILE")]
        model: PathBuf,
    },
    /// Route backbone with and without the framework, over repeated seeds.
    Compare {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        #[command(flatten)]
        train: TrainArgs,
        /// Repetitions [default: 5].
        #[arg(long)]
        runs: Option<usize>,
        /// Reuse this segment backbone in every run instead of pre-training one per seed.
        #[arg(long, value_name = "FILE")]
        stage1: Option<PathBuf>,
    },
    /// Full framework against its four ablations, over repeated seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        #[command(flatten)]
        train: TrainArgs,
        /// Repetitions [default: 5].
        #[arg(long)]
        runs: Option<usize>,
        /// Reuse this segment backbone in every run instead of pre-training one per seed.
        #[arg(long, value_name = "FILE")]
        stage1: Option<PathBuf>,
    },
    /// Descriptive statistics, distributions, correlations and weekly profiles.
    Analyze {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        /// Summary statistics of both series.
        #[arg(long)]
        stats: bool,
        /// Histogram of entity means with this many bins.
        #[arg(long, value_name = "BINS")]
        hist: Option<usize>,
        /// Correlate this route with its upstream routes.
        #[arg(long, value_name = "ROUTE")]
        radar: Option<usize>,
        /// Day (from the series start) for --radar [default: 0].
        #[arg(long, default_value_t = 0)]
        day: usize,
        /// Upstream hops for --radar, 1 or 2 [default: 2].
        #[arg(long, default_value_t = 2)]
        hops: usize,
        /// Weekly profile of this entity.
        #[arg(long, value_name = "ENTITY")]
        weekly: Option<usize>,
        /// Series used by --hist and --weekly [default: mobility].
        #[arg(long, value_enum, default_value = "mobility")]
        kind: KindArg,
    },
    /// Forecast every window of a cellular flow file.
    Predict {
        #[command(flatten)]
        common: Common,
        /// Framework checkpoint written by `train`.
        #[arg(long, value_name = "FILE")]
        model: PathBuf,
        /// Topology the model was trained on.
        #[arg(long, value_name = "FILE")]
        topology: PathBuf,
        /// Cellular flows CSV.
        #[arg(long, value_name = "FILE")]
        gct: PathBuf,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Generate { common, .. }
            | Command::Pretrain { common, .. }
            | Command::Train { common, .. }
            | Command::Evaluate { common, .. }
            | Command::Compare { common, .. }
            | Command::Ablate { common, .. }
            | Command::Analyze { common, .. }
            | Command::Predict { common, .. } => common,
        }
    }

    fn data(&self) -> Option<&DataArg> {
        match self {
            Command::Pretrain { data, .. }
            | Command::Train { data, .. }
            | Command::Evaluate { data, .. }
            | Command::Compare { data, .. }
            | Command::Ablate { data, .. }
            | Command::Analyze { data, .. } => Some(data),
            _ => None,
        }
    }
}

fn apply_train(cfg: &mut RunConfig, t: &TrainArgs, pretrain: bool, train: bool) {
    let mut targets = Vec::new();
    if pretrain {
        targets.push(&mut cfg.pretrain);
    }
    if train {
        targets.push(&mut cfg.train);
    }
    for tc in targets {
        if let Some(v) = t.epochs {
            tc.epochs = v;
        }
        if let Some(v) = t.patience {
            tc.patience = (v > 0).then_some(v);
        }
        if let Some(v) = t.lr {
            tc.learning_rate = v;
        }
        if let Some(v) = t.batch_size {
            tc.batch_size = v;
        }
    }
    if let Some(c) = t.channels {
        cfg.stage1.channels = c;
        cfg.framework.stage2.channels = c;
    }
    if let Some(a) = t.adjacency {
        cfg.stage1.adjacency_mode = a;
        cfg.framework.stage2.adjacency_mode = a;
    }
    if let Some(a) = t.activation {
        cfg.framework.activation = a;
    }
}

/// File configuration, then command-line overrides.
fn resolve(cmd: &Command) -> Result<RunConfig> {
    let common = cmd.common();
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(o) = &common.output {
        cfg.output = Some(o.clone());
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(d) = cmd.data().and_then(|d| d.data.clone()) {
        cfg.data = Some(d);
    }
    match cmd {
        Command::Generate {
            days, segments, links, records, ..
        } => {
            if let Some(d) = days {
                cfg.generator.days = *d;
            }
            if let Some(s) = segments {
                cfg.network.segments = *s;
            }
            if let Some(l) = links {
                cfg.network.links = *l;
            }
            cfg.generator.emit_records = *records;
        }
        Command::Pretrain { train, .. } => apply_train(&mut cfg, train, true, false),
        Command::Train { train, setting, .. } => {
            apply_train(&mut cfg, train, false, true);
            if let Some(s) = setting {
                cfg.framework.ablation = Setting::from(*s).ablation();
            }
        }
        Command::Compare { train, runs, .. } | Command::Ablate { train, runs, .. } => {
            apply_train(&mut cfg, train, true, true);
            if let Some(r) = runs {
                cfg.runs = *r;
            }
        }
        _ => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(io_err(path))?;
    log::info!("wrote {}", path.display());
    Ok(())
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    write(path, &serde_json::to_string_pretty(value)?)
}

fn prepare_output(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = cfg.output_dir()?.to_path_buf();
    std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    cfg.snapshot(&dir)?;
    Ok(dir)
}

struct Dataset {
    topology: RoadTopology,
    gct: FlowSeries,
    mobility: FlowSeries,
}

fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let dir = cfg.data_dir()?;
    let topology = load_topology(dir.join("topology.json"))?;
    let gct = load_flows(dir.join("gct.csv"), FlowKind::Gct, &topology)?;
    let mobility = load_flows(dir.join("mobility.csv"), FlowKind::Mobility, &topology)?;
    Ok(Dataset {
        topology,
        gct,
        mobility,
    })
}

fn experiment_data(cfg: &RunConfig, ds: &Dataset) -> Result<ExperimentData> {
    ExperimentData::from_series(&ds.gct, &ds.mobility, cfg.window.t_in, cfg.window.t_out, cfg.split)
}

fn load_stage1(path: &Path, topology: &RoadTopology) -> Result<BackboneModel> {
    BackboneModel::load(path, Some(&topology.content_hash()))
}

fn run(cmd: Command, cfg: RunConfig) -> Result<()> {
    if cmd.common().show_config {
        println!("{}", serde_json::to_string_pretty(&cfg)?);
        return Ok(());
    }
    let out = prepare_output(&cfg)?;
    match cmd {
        Command::Generate { .. } => {
            let topology = RoadTopology::synthetic(cfg.network.segments, cfg.network.links, cfg.seed)?;
            let g = generate_synthetic(&topology, &cfg.generator, cfg.seed)?;
            save_topology(&topology, out.join("topology.json"))?;
            save_flows(&g.gct, &topology, out.join("gct.csv"))?;
            save_flows(&g.mobility, &topology, out.join("mobility.csv"))?;
            if cfg.generator.emit_records {
                save_records(&g.records, out.join("records.csv"))?;
            }
            write_json(
                &out.join("generator.json"),
                &serde_json::json!({
                    "route_kinds": g.route_kinds,
                    "route_levels": g.route_levels,
                    "background_levels": g.background_levels,
                }),
            )?;
            println!(
                "{} segments, {} routes, {} steps written to {}",
                topology.num_segments(),
                topology.num_routes(),
                g.gct.steps(),
                out.display()
            );
        }
        Command::Pretrain { .. } => {
            let ds = load_dataset(&cfg)?;
            let data = experiment_data(&cfg, &ds)?;
            let model = pretrain_stage1(&data.gct, &ds.topology, &cfg.stage1, &cfg.seeded(&cfg.pretrain))?;
            let path = out.join("stage1.json");
            model.save(&path, &ds.topology.content_hash())?;
            write_json(&out.join("pretrain_log.json"), &model.log)?;
            println!(
                "stage 1: best epoch {} (selection MAE {}), saved to {}",
                model.log.best_epoch,
                model.log.best_score.map_or("n/a".into(), |v| format!("{v:.4}")),
                path.display()
            );
        }
        Command::Train { stage1, .. } => {
            let ds = load_dataset(&cfg)?;
            let data = experiment_data(&cfg, &ds)?;
            let s1 = load_stage1(&stage1, &ds.topology)?;
            let model = train_framework(&s1, &data.mobility, &ds.topology, &cfg.framework, &cfg.seeded(&cfg.train))?;
            let path = out.join("framework.json");
            model.save(&path, Some(&stage1))?;
            write_json(&out.join("train_log.json"), &model.log)?;
            println!(
                "framework: best epoch {} (selection MAE {}), saved to {}",
                model.log.best_epoch,
                model.log.best_score.map_or("n/a".into(), |v| format!("{v:.4}")),
                path.display()
            );
        }
        Command::Evaluate { model, .. } => {
            let ds = load_dataset(&cfg)?;
            let fw = FrameworkModel::load(&model, &ds.topology)?;
            let cfg = RunConfig {
                window: config::WindowConfig {
                    t_in: fw.t_in,
                    t_out: fw.horizon,
                },
                ..cfg
            };
            let data = experiment_data(&cfg, &ds)?;
            let report = evaluate_framework(&fw, &data.mobility.test, &ds.topology)?;
            write_json(&out.join("metrics.json"), &report)?;
            let mut csv = String::from("step,mae,rmse,mape\n");
            for h in &report.horizons {
                let m = h.metrics;
                csv.push_str(&format!("{},{},{},{}\n", h.step, m.mae, m.rmse, m.mape.map_or(String::new(), |v| v.to_string())));
            }
            let o = report.overall;
            csv.push_str(&format!("overall,{},{},{}\n", o.mae, o.rmse, o.mape.map_or(String::new(), |v| v.to_string())));
            write(&out.join("metrics.csv"), &csv)?;
            println!(
                "test MAE {:.4}, RMSE {:.4}, MAPE {}",
                o.mae,
                o.rmse,
                o.mape.map_or("n/a".into(), |v| format!("{v:.2}%"))
            );
        }
        Command::Compare { stage1, .. } => {
            let ds = load_dataset(&cfg)?;
            let data = experiment_data(&cfg, &ds)?;
            let supplied = stage1.map(|p| load_stage1(&p, &ds.topology)).transpose()?;
            let outcome = run_comparison(&cfg.experiment(), &data, &ds.topology, supplied.as_ref().map(std::slice::from_ref))?;
            write_json(&out.join("comparison.json"), &outcome)?;
            if let Some(r) = &outcome.report {
                write(&out.join("comparison.csv"), &r.to_csv())?;
            }
            let md = outcome.to_markdown();
            write(&out.join("comparison.md"), &md)?;
            print!("{md}");
            report_failures(outcome.runs.iter().flat_map(|r| [("w/o", &r.without), ("w", &r.with)]));
        }
        Command::Ablate { stage1, .. } => {
            let ds = load_dataset(&cfg)?;
            let data = experiment_data(&cfg, &ds)?;
            let supplied = stage1.map(|p| load_stage1(&p, &ds.topology)).transpose()?;
            let report = run_ablations(&cfg.experiment(), &data, &ds.topology, supplied.as_ref().map(std::slice::from_ref))?;
            write_json(&out.join("ablation.json"), &report)?;
            write(&out.join("ablation.csv"), &report.to_csv())?;
            let md = report.to_markdown();
            write(&out.join("ablation.md"), &md)?;
            print!("{md}");
            report_failures(report.rows.iter().flat_map(|row| row.runs.iter().map(move |r| (row.label.as_str(), r))));
        }
        Command::Analyze {
            stats,
            hist,
            radar,
            day,
            hops,
            weekly,
            kind,
            ..
        } => {
            let ds = load_dataset(&cfg)?;
            if !stats && hist.is_none() && radar.is_none() && weekly.is_none() {
                return Err(Error::Config("nothing to analyze: pass --stats, --hist, --radar or --weekly".into()));
            }
            let (series, name) = match kind {
                KindArg::Gct => (&ds.gct, "gct"),
                KindArg::Mobility => (&ds.mobility, "mobility"),
            };
            if stats {
                let table = [describe(&ds.gct)?, describe(&ds.mobility)?];
                write_json(&out.join("stats.json"), &table)?;
                for s in &table {
                    println!(
                        "{:?}: {} samples, {} entities, mean {:.2}, std {:.2}, max entity mean {:.2} (entity {})",
                        s.kind, s.samples, s.entities, s.mean, s.std, s.max_entity_mean, s.max_entity
                    );
                }
            }
            if let Some(bins) = hist {
                let h = histogram(series, bins)?;
                write_json(&out.join(format!("histogram_{name}.json")), &h)?;
                let mut csv = String::from("lower,upper,count\n");
                for (i, c) in h.counts.iter().enumerate() {
                    csv.push_str(&format!("{},{},{c}\n", h.edges[i], h.edges[i + 1]));
                }
                write(&out.join(format!("histogram_{name}.csv")), &csv)?;
                println!("skewness of {name} entity means: {}", h.skewness.map_or("undefined".into(), |s| format!("{s:.3}")));
            }
            if let Some(route) = radar {
                let r = upstream_correlation(&ds.mobility, &ds.topology, route, day, hops)?;
                write_json(&out.join(format!("radar_route{route}_day{day}.json")), &r)?;
                let mut csv = String::from("route,label,hops,r\n");
                for n in &r.neighbors {
                    csv.push_str(&format!("{},{},{},{}\n", n.route, n.label, n.hops, n.r.map_or(String::new(), |v| v.to_string())));
                }
                write(&out.join(format!("radar_route{route}_day{day}.csv")), &csv)?;
                println!("route {} ({}): {} upstream routes within {hops} hops", route, r.focal_label, r.neighbors.len());
            }
            if let Some(entity) = weekly {
                let p = weekly_profile(series, entity)?;
                write_json(&out.join(format!("weekly_{name}_{entity}.json")), &p)?;
                let mut csv = String::from("weekday,slot,mean\n");
                for (wd, row) in p.means.iter().enumerate() {
                    for (slot, v) in row.iter().enumerate() {
                        csv.push_str(&format!("{wd},{slot},{v}\n"));
                    }
                }
                write(&out.join(format!("weekly_{name}_{entity}.csv")), &csv)?;
            }
        }
        Command::Predict { model, topology, gct, .. } => {
            let topo = load_topology(&topology)?;
            let fw = FrameworkModel::load(&model, &topo)?;
            let series = load_flows(&gct, FlowKind::Gct, &topo)?;
            let (n, t) = (topo.num_segments(), fw.t_in);
            if series.steps() < t {
                return Err(Error::InvalidInput(format!(
                    "{} steps of cellular flow cannot fill a {t}-step window",
                    series.steps()
                )));
            }
            let windows = series.steps() - t + 1;
            let mut data = Vec::with_capacity(windows * n * t);
            for s in 0..windows {
                for e in 0..n {
                    data.extend_from_slice(&series.entity(e)[s..s + t]);
                }
            }
            let pred = fw.predict_raw(&Tensor::new(&[windows, n, t], data), &topo)?;
            let mut csv = String::from("window,step,timestamp");
            for r in topo.routes() {
                csv.push(',');
                csv.push_str(&r.label());
            }
            csv.push('\n');
            let (m, d) = (topo.num_routes(), fw.horizon);
            for s in 0..windows {
                for k in 0..d {
                    csv.push_str(&format!("{s},{},{}", k + 1, series.timestamp(s + t + k)));
                    for r in 0..m {
                        csv.push_str(&format!(",{}", pred.get(&[s, r, k])));
                    }
                    csv.push('\n');
                }
            }
            let path = out.join("predictions.csv");
            write(&path, &csv)?;
            println!("{windows} windows × {d} steps × {m} routes written to {}", path.display());
        }
    }
    Ok(())
}

fn report_failures<'a>(runs: impl Iterator<Item = (&'a str, &'a telto_core::evaluation::RunOutcome)>) {
    for (label, r) in runs {
        if let Some(e) = &r.error {
            eprintln!("warning: {label} (seed {}) failed: {e}", r.seed);
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    // A configuration that does not resolve is a usage error, like a bad flag.
    let cfg = match resolve(&cli.command) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    match run(cli.command, cfg) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
