//! Agent-level synthetic data with known ground truth.
//!
//! Vehicles traverse routes and leave records on the start segment (one or
//! more) and exactly one on the end segment within the pairing window, so
//! each traversal yields exactly one pairing. Stationary users leave single
//! records and pedestrians leave two records on adjacent segments too far
//! apart in time to pair: both add cellular counts without mobility, which is
//! what makes cellular levels an order of magnitude above mobility levels.
//!
//! Route demand follows a weekly commute profile (morning- or evening-heavy
//! per direction) and, with weight `propagation`, the recent realised flow of
//! the route's upstream neighbours.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, LogNormal, Poisson};
use serde::{Deserialize, Serialize};

use super::flows::{FlowKind, FlowSeries};
use super::records::{GctRecord, UserHash};
use crate::error::{Error, Result};
use crate::topology::RoadTopology;

/// 2022-08-28 00:00:00 UTC, a Sunday.
pub const DEFAULT_START: i64 = 1_661_644_800;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub days: u32,
    pub interval: u64,
    pub start_timestamp: i64,
    /// Target grand mean of cellular counts per segment per interval.
    pub gct_level: f64,
    /// Target grand mean of pairings per route per interval.
    pub mobility_level: f64,
    /// Log-normal sigma of per-entity level multipliers (right skew).
    pub level_dispersion: f64,
    /// Height of commute peaks relative to the daytime base.
    pub commute_amplitude: f64,
    /// Weekend activity relative to weekdays.
    pub weekend_factor: f64,
    /// Over-dispersion of counts (gamma-mixed Poisson). Zero rounds expected values.
    pub noise: f64,
    /// Share of a route's demand inherited from its upstream routes' recent flow.
    pub propagation: f64,
    /// Lag in steps of the upstream inheritance (at least 1).
    pub propagation_delay: usize,
    pub pairing_window: i64,
    /// Longest traversal time; must not exceed the pairing window.
    pub max_travel_secs: i64,
    /// Up to this many additional start-segment records per traversal.
    pub max_extra_start_records: u32,
    /// Fraction of background users that walk to an adjacent segment.
    pub pedestrian_share: f64,
    pub flat_profile: bool,
    /// Disable to produce only stationary background activity.
    pub agents: bool,
    /// Keep individual records (large: ~16M for a month on the 34-segment network).
    pub emit_records: bool,
    pub level_overrides: Vec<LevelOverride>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelOverride {
    pub kind: FlowKind,
    pub entity: usize,
    pub level: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            days: 31,
            interval: 900,
            start_timestamp: DEFAULT_START,
            gct_level: 159.9,
            mobility_level: 12.9,
            level_dispersion: 0.7,
            commute_amplitude: 2.0,
            weekend_factor: 0.7,
            noise: 0.15,
            propagation: 0.5,
            propagation_delay: 1,
            pairing_window: 900,
            max_travel_secs: 600,
            max_extra_start_records: 2,
            pedestrian_share: 0.1,
            flat_profile: false,
            agents: true,
            emit_records: true,
            level_overrides: Vec::new(),
        }
    }
}

impl GeneratorConfig {
    pub fn steps(&self) -> usize {
        self.days as usize * self.steps_per_day()
    }

    pub fn steps_per_day(&self) -> usize {
        (86_400 / self.interval.max(1)) as usize
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("generator: {m}")));
        if self.days == 0 {
            return bad("days must be positive");
        }
        if self.interval == 0 || 86_400 % self.interval != 0 {
            return bad("interval must divide a day");
        }
        if !(self.gct_level >= 0.0 && self.mobility_level >= 0.0) {
            return bad("levels must be non-negative");
        }
        if !(self.level_dispersion >= 0.0 && self.commute_amplitude >= 0.0 && self.noise >= 0.0) {
            return bad("dispersion, amplitude and noise must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.weekend_factor) || self.weekend_factor == 0.0 {
            return bad("weekend_factor must lie in (0, 1]");
        }
        if !(0.0..1.0).contains(&self.propagation) {
            return bad("propagation must lie in [0, 1)");
        }
        if self.propagation_delay == 0 {
            return bad("propagation_delay must be at least one step");
        }
        if self.pairing_window <= 0 || self.max_travel_secs < 2 || self.max_travel_secs > self.pairing_window {
            return bad("need 2 <= max_travel_secs <= pairing_window");
        }
        if !(0.0..=1.0).contains(&self.pedestrian_share) {
            return bad("pedestrian_share must lie in [0, 1]");
        }
        for o in &self.level_overrides {
            if !(o.level >= 0.0) {
                return bad("override levels must be non-negative");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CommuteKind {
    Morning,
    Evening,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorOutput {
    /// Sorted by timestamp; empty unless `emit_records`.
    pub records: Vec<GctRecord>,
    pub gct: FlowSeries,
    pub mobility: FlowSeries,
    pub route_kinds: Vec<CommuteKind>,
    pub route_levels: Vec<f64>,
    pub background_levels: Vec<f64>,
}

fn gauss(h: f64, mu: f64, sd: f64) -> f64 {
    (-(h - mu).powi(2) / (2.0 * sd * sd)).exp()
}

fn daytime(h: f64) -> f64 {
    let s = |x: f64| 1.0 / (1.0 + (-x).exp());
    0.15 + 0.6 * s((h - 6.0) * 2.0) * s((22.0 - h) * 2.0)
}

/// Weekday index with Monday = 0.
pub fn weekday(timestamp: i64) -> usize {
    (timestamp.div_euclid(86_400) + 3).rem_euclid(7) as usize
}

#[derive(Clone, Copy)]
enum Shape {
    Route(CommuteKind),
    Segment,
}

fn profile(cfg: &GeneratorConfig, shape: Shape) -> Vec<f64> {
    let steps = cfg.steps();
    if cfg.flat_profile {
        return vec![1.0; steps];
    }
    let a = cfg.commute_amplitude;
    let mut p: Vec<f64> = (0..steps)
        .map(|t| {
            let ts = cfg.start_timestamp + (t as u64 * cfg.interval) as i64;
            let h = ts.rem_euclid(86_400) as f64 / 3600.0 + cfg.interval as f64 / 7200.0;
            let base = daytime(h);
            if weekday(ts) >= 5 {
                return cfg.weekend_factor * (base + 0.4 * a * gauss(h, 14.0, 3.0));
            }
            base + match shape {
                Shape::Route(CommuteKind::Morning) => a * (gauss(h, 8.0, 1.2) + 0.3 * gauss(h, 18.0, 1.5)),
                Shape::Route(CommuteKind::Evening) => a * (0.3 * gauss(h, 8.0, 1.2) + gauss(h, 18.0, 1.5)),
                Shape::Segment => a * 0.6 * (gauss(h, 8.0, 1.5) + gauss(h, 18.0, 1.5)) + 0.2 * gauss(h, 13.0, 2.0),
            }
        })
        .collect();
    let mean = p.iter().sum::<f64>() / steps as f64;
    p.iter_mut().for_each(|v| *v /= mean);
    p
}

/// Log-normal multipliers rescaled to mean exactly `level`.
fn skewed_levels(rng: &mut ChaCha8Rng, n: usize, level: f64, sigma: f64) -> Vec<f64> {
    if n == 0 {
        return Vec::new();
    }
    let dist = LogNormal::new(0.0, sigma.max(0.0)).expect("valid log-normal");
    let w: Vec<f64> = (0..n).map(|_| dist.sample(rng)).collect();
    let mean = w.iter().sum::<f64>() / n as f64;
    w.into_iter().map(|v| level * v / mean).collect()
}

struct Sampler {
    noise: f64,
    gamma: Option<Gamma<f64>>,
}

impl Sampler {
    fn new(noise: f64) -> Self {
        let gamma = (noise > 0.0).then(|| {
            let shape = 1.0 / (noise * noise);
            Gamma::new(shape, 1.0 / shape).expect("valid gamma")
        });
        Self { noise, gamma }
    }

    fn count(&self, rng: &mut ChaCha8Rng, rate: f64) -> u64 {
        if rate <= 0.0 {
            return 0;
        }
        if self.noise == 0.0 {
            return rate.round() as u64;
        }
        let mixed = rate * self.gamma.as_ref().expect("gamma for positive noise").sample(rng);
        if mixed <= 0.0 {
            return 0;
        }
        Poisson::new(mixed).map(|p| p.sample(rng) as u64).unwrap_or(0)
    }
}

/// splitmix64 finaliser: a bijection on u64, so distinct counters give distinct users.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

struct Emitter {
    keep: bool,
    records: Vec<GctRecord>,
    gct: FlowSeries,
    next_user: u64,
}

impl Emitter {
    fn user(&mut self) -> UserHash {
        self.next_user += 1;
        UserHash(mix(self.next_user))
    }

    fn record(&mut self, user: UserHash, timestamp: i64, segment: usize) {
        let start = self.gct.start_timestamp;
        if timestamp >= start && timestamp < self.gct.end_timestamp() {
            let step = ((timestamp - start) / self.gct.interval as i64) as usize;
            self.gct.add(segment, step, 1.0);
        }
        if self.keep {
            self.records.push(GctRecord {
                user,
                timestamp,
                segment,
            });
        }
    }
}

/// Simulate records and flows over `topology`. Identical seeds give identical output.
pub fn generate_synthetic(topology: &RoadTopology, config: &GeneratorConfig, seed: u64) -> Result<GeneratorOutput> {
    config.validate()?;
    let n = topology.num_segments();
    let m = topology.num_routes();
    for o in &config.level_overrides {
        if o.entity >= o.kind.entity_count(topology) {
            return Err(Error::Config(format!("level override for unknown {:?} entity {}", o.kind, o.entity)));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let steps = config.steps();
    let interval = config.interval as i64;

    // Opposite directions of a link commute at opposite times of day.
    let mut route_kinds = vec![CommuteKind::Morning; m];
    let mut assigned = vec![false; m];
    for r in topology.routes() {
        if assigned[r.id] {
            continue;
        }
        let kind = if rng.random_bool(0.5) {
            CommuteKind::Morning
        } else {
            CommuteKind::Evening
        };
        route_kinds[r.id] = kind;
        assigned[r.id] = true;
        if let Some(rev) = topology.route_between(r.end, r.start) {
            route_kinds[rev] = match kind {
                CommuteKind::Morning => CommuteKind::Evening,
                CommuteKind::Evening => CommuteKind::Morning,
            };
            assigned[rev] = true;
        }
    }

    let mut route_levels = if config.agents {
        skewed_levels(&mut rng, m, config.mobility_level, config.level_dispersion)
    } else {
        vec![0.0; m]
    };
    let mut override_map: BTreeMap<(bool, usize), f64> = BTreeMap::new();
    for o in &config.level_overrides {
        override_map.insert((o.kind == FlowKind::Gct, o.entity), o.level);
    }
    for (r, level) in route_levels.iter_mut().enumerate() {
        if let Some(&v) = override_map.get(&(false, r)) {
            *level = v;
        }
    }

    // Background is whatever cellular activity vehicles do not explain.
    let extra_mean = f64::from(config.max_extra_start_records) / 2.0;
    let mut vehicle_records = vec![0.0; n];
    for r in topology.routes() {
        vehicle_records[r.start] += route_levels[r.id] * (1.0 + extra_mean);
        vehicle_records[r.end] += route_levels[r.id];
    }
    let vehicle_mean = vehicle_records.iter().sum::<f64>() / n.max(1) as f64;
    let walkers = if config.agents { config.pedestrian_share } else { 0.0 };
    let background_mean = (config.gct_level - vehicle_mean) / (1.0 + walkers);
    if background_mean < 0.0 {
        return Err(Error::Config(format!(
            "gct_level {} is below the {vehicle_mean:.1} records per segment produced by vehicles",
            config.gct_level
        )));
    }
    let mut background_levels = skewed_levels(&mut rng, n, background_mean, config.level_dispersion);
    for (i, level) in background_levels.iter_mut().enumerate() {
        if let Some(&v) = override_map.get(&(true, i)) {
            *level = (v - vehicle_records[i]).max(0.0) / (1.0 + walkers);
        }
    }

    let route_profiles: Vec<Vec<f64>> = route_kinds.iter().map(|&k| profile(config, Shape::Route(k))).collect();
    let segment_profile = profile(config, Shape::Segment);
    let neighbours: Vec<Vec<usize>> = (0..n).map(|i| topology.routes_from(i).map(|r| r.end).collect()).collect();

    let sampler = Sampler::new(config.noise);
    let mut mobility = FlowSeries::zeros(FlowKind::Mobility, config.interval, config.start_timestamp, m, steps);
    let mut emitter = Emitter {
        keep: config.emit_records,
        records: Vec::new(),
        gct: FlowSeries::zeros(FlowKind::Gct, config.interval, config.start_timestamp, n, steps),
        next_user: seed.wrapping_mul(0x1000_0000_0000),
    };
    let travel_floor = (config.max_travel_secs / 5).max(2);
    let mut counts = vec![0u64; m];

    for t in 0..steps {
        let t0 = config.start_timestamp + t as i64 * interval;
        let lag = t.checked_sub(config.propagation_delay);
        for r in 0..m {
            let level = route_levels[r];
            let own = route_profiles[r][t];
            let up = topology.upstream(r);
            let rate = if config.propagation > 0.0 && !up.is_empty() {
                let inherited = up
                    .iter()
                    .map(|&q| match lag {
                        Some(l) if route_levels[q] > 0.0 => mobility.get(q, l) / route_levels[q],
                        _ => route_profiles[q][t],
                    })
                    .sum::<f64>()
                    / up.len() as f64;
                level * ((1.0 - config.propagation) * own + config.propagation * inherited)
            } else {
                level * own
            };
            counts[r] = sampler.count(&mut rng, rate);
        }
        for (r, &c) in counts.iter().enumerate() {
            let route = topology.routes()[r];
            for _ in 0..c {
                let user = emitter.user();
                let s = t0 + rng.random_range(0..interval);
                let travel = rng.random_range(travel_floor..=config.max_travel_secs);
                emitter.record(user, s, route.start);
                for _ in 0..rng.random_range(0..=config.max_extra_start_records) {
                    let extra = s + rng.random_range(1..travel);
                    emitter.record(user, extra, route.start);
                }
                emitter.record(user, s + travel, route.end);
            }
            mobility.add(r, t, c as f64);
        }
        for i in 0..n {
            let c = sampler.count(&mut rng, background_levels[i] * segment_profile[t]);
            for _ in 0..c {
                let user = emitter.user();
                let ts = t0 + rng.random_range(0..interval);
                emitter.record(user, ts, i);
                if walkers > 0.0 && !neighbours[i].is_empty() && rng.random_bool(walkers) {
                    let j = neighbours[i][rng.random_range(0..neighbours[i].len())];
                    let gap = rng.random_range(config.pairing_window + 1..=2 * config.pairing_window);
                    emitter.record(user, ts + gap, j);
                }
            }
        }
    }

    let mut records = emitter.records;
    records.sort_unstable_by_key(|r| (r.timestamp, r.user, r.segment));
    Ok(GeneratorOutput {
        records,
        gct: emitter.gct,
        mobility,
        route_kinds,
        route_levels,
        background_levels,
    })
}
