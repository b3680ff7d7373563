//! Exploratory statistics over flow series: summary table, distribution of
//! entity means, upstream correlation and weekly profiles.

use serde::{Deserialize, Serialize};

use crate::data::{synthetic::weekday, FlowKind, FlowSeries};
use crate::error::{Error, Result};
use crate::topology::RoadTopology;

const DAY_SECS: u64 = 86_400;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescriptiveStats {
    pub kind: FlowKind,
    /// Time steps.
    pub samples: usize,
    pub entities: usize,
    pub interval: u64,
    pub mean: f64,
    /// Population deviation over every value.
    pub std: f64,
    pub max_entity_mean: f64,
    pub max_entity: usize,
}

fn entity_means(series: &FlowSeries) -> Vec<f64> {
    (0..series.entities())
        .map(|e| series.entity(e).iter().sum::<f64>() / series.steps() as f64)
        .collect()
}

pub fn describe(series: &FlowSeries) -> Result<DescriptiveStats> {
    if series.entities() == 0 {
        return Err(Error::InvalidInput("cannot describe a series without entities".into()));
    }
    let v = series.values();
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let means = entity_means(series);
    let (max_entity, &max_entity_mean) = means
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
        .expect("at least one entity");
    Ok(DescriptiveStats {
        kind: series.kind,
        samples: series.steps(),
        entities: series.entities(),
        interval: series.interval,
        mean,
        std: var.sqrt(),
        // The largest of several means can round just below their average.
        max_entity_mean: max_entity_mean.max(mean),
        max_entity,
    })
}

/// Moment coefficient of skewness `m3 / m2^1.5`; `None` without spread.
pub fn skewness(values: &[f64]) -> Option<f64> {
    let n = values.len() as f64;
    if values.len() < 2 {
        return None;
    }
    let mean = values.iter().sum::<f64>() / n;
    let m2 = values.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let m3 = values.iter().map(|x| (x - mean).powi(3)).sum::<f64>() / n;
    (m2 > 0.0).then(|| m3 / m2.powf(1.5))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// `counts.len() + 1` bucket edges.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    pub entity_means: Vec<f64>,
    pub skewness: Option<f64>,
}

/// Equal-width histogram of per-entity means. Without spread the result is a
/// single bucket.
pub fn histogram(series: &FlowSeries, bins: usize) -> Result<Histogram> {
    if bins < 2 {
        return Err(Error::Config("a histogram needs at least 2 bins".into()));
    }
    let means = entity_means(series);
    let lo = means.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = means.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let skew = skewness(&means);
    if !(hi > lo) {
        return Ok(Histogram {
            edges: vec![lo, hi],
            counts: vec![means.len()],
            entity_means: means,
            skewness: skew,
        });
    }
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0; bins];
    for &m in &means {
        counts[(((m - lo) / width) as usize).min(bins - 1)] += 1;
    }
    Ok(Histogram {
        edges: (0..=bins).map(|i| if i == bins { hi } else { lo + width * i as f64 }).collect(),
        counts,
        entity_means: means,
        skewness: skew,
    })
}

/// Sample Pearson correlation; `None` when either series is constant.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    let cov = sxy / (n - 1.0);
    let (sx, sy) = ((sxx / (n - 1.0)).sqrt(), (syy / (n - 1.0)).sqrt());
    (sx > 0.0 && sy > 0.0).then(|| (cov / (sx * sy)).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighborCorrelation {
    pub route: usize,
    pub label: String,
    pub hops: usize,
    pub r: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationRadar {
    pub focal_route: usize,
    pub focal_label: String,
    pub day: usize,
    pub neighbors: Vec<NeighborCorrelation>,
}

impl CorrelationRadar {
    /// Mean defined `r` over neighbours at exactly `hops`.
    pub fn mean_r(&self, hops: usize) -> Option<f64> {
        let rs: Vec<f64> = self.neighbors.iter().filter(|n| n.hops == hops).filter_map(|n| n.r).collect();
        (!rs.is_empty()).then(|| rs.iter().sum::<f64>() / rs.len() as f64)
    }
}

fn steps_per_day(series: &FlowSeries) -> Result<usize> {
    if DAY_SECS % series.interval != 0 {
        return Err(Error::InvalidInput(format!(
            "interval {} s does not divide a day",
            series.interval
        )));
    }
    Ok((DAY_SECS / series.interval) as usize)
}

/// Pearson `r` between the focal route's profile on day `day` (counted from
/// the series start) and each upstream route within `hops` (1 or 2).
pub fn upstream_correlation(
    mobility: &FlowSeries,
    topology: &RoadTopology,
    focal_route: usize,
    day: usize,
    hops: usize,
) -> Result<CorrelationRadar> {
    mobility.check_against(topology)?;
    if mobility.kind != FlowKind::Mobility {
        return Err(Error::InvalidInput("upstream correlation needs a mobility series".into()));
    }
    if focal_route >= topology.num_routes() {
        return Err(Error::InvalidInput(format!(
            "route {focal_route} does not exist ({} routes)",
            topology.num_routes()
        )));
    }
    if !(1..=2).contains(&hops) {
        return Err(Error::Config("hops must be 1 or 2".into()));
    }
    let spd = steps_per_day(mobility)?;
    let range = day * spd..(day + 1) * spd;
    if range.end > mobility.steps() {
        return Err(Error::InvalidInput(format!(
            "day {day} is not fully covered by {} steps",
            mobility.steps()
        )));
    }
    let profile = |r: usize| &mobility.entity(r)[range.clone()];
    let focal = profile(focal_route);
    let label = |r: usize| topology.routes()[r].label();
    Ok(CorrelationRadar {
        focal_route,
        focal_label: label(focal_route),
        day,
        neighbors: topology
            .upstream_within(focal_route, hops)
            .into_iter()
            .map(|(route, h)| NeighborCorrelation {
                route,
                label: label(route),
                hops: h,
                r: pearson(focal, profile(route)),
            })
            .collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeeklyProfile {
    pub entity: usize,
    pub steps_per_day: usize,
    /// `[weekday][slot]` means, Monday first.
    pub means: Vec<Vec<f64>>,
    /// Days averaged per weekday.
    pub days: Vec<usize>,
}

impl WeeklyProfile {
    /// Mean over the slots whose start hour lies in `[from, to)`.
    pub fn window_mean(&self, weekday: usize, from: f64, to: f64) -> f64 {
        let per_hour = self.steps_per_day as f64 / 24.0;
        let slots: Vec<f64> = (0..self.steps_per_day)
            .filter(|&s| (from..to).contains(&(s as f64 / per_hour)))
            .map(|s| self.means[weekday][s])
            .collect();
        slots.iter().sum::<f64>() / slots.len().max(1) as f64
    }
}

/// Mean value per weekday and time-of-day slot. Days are counted from the
/// series start; at least a full week is required.
pub fn weekly_profile(series: &FlowSeries, entity: usize) -> Result<WeeklyProfile> {
    if entity >= series.entities() {
        return Err(Error::InvalidInput(format!(
            "entity {entity} does not exist ({} entities)",
            series.entities()
        )));
    }
    let spd = steps_per_day(series)?;
    let full_days = series.steps() / spd;
    if full_days < 7 {
        return Err(Error::InvalidInput(format!(
            "a weekly profile needs 7 full days, the series covers {full_days}"
        )));
    }
    let first = weekday(series.start_timestamp);
    let mut sums = vec![vec![0.0; spd]; 7];
    let mut days = vec![0; 7];
    let values = series.entity(entity);
    for d in 0..full_days {
        let wd = (first + d) % 7;
        days[wd] += 1;
        for (s, v) in values[d * spd..(d + 1) * spd].iter().enumerate() {
            sums[wd][s] += v;
        }
    }
    let means = sums
        .into_iter()
        .zip(&days)
        .map(|(row, &n)| row.into_iter().map(|v| v / n as f64).collect())
        .collect();
    Ok(WeeklyProfile {
        entity,
        steps_per_day: spd,
        means,
        days,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, CommuteKind, GeneratorConfig};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn series(kind: FlowKind, entities: usize, steps: usize, values: Vec<f64>) -> FlowSeries {
        FlowSeries::new(kind, 900, crate::data::synthetic::DEFAULT_START, entities, steps, values).unwrap()
    }

    #[test]
    fn constant_series() {
        let s = series(FlowKind::Gct, 3, 10, vec![4.5; 30]);
        let d = describe(&s).unwrap();
        assert_eq!((d.mean, d.std, d.max_entity_mean), (4.5, 0.0, 4.5));
        assert_eq!((d.samples, d.entities), (10, 3));
        let h = histogram(&s, 5).unwrap();
        assert_eq!(h.counts, vec![3]);
        assert_eq!(h.skewness, None);
    }

    #[test]
    fn describe_matches_two_pass_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v: Vec<f64> = (0..34 * 96).map(|_| rng.random_range(0.0..400.0)).collect();
        let s = series(FlowKind::Gct, 34, 96, v.clone());
        let d = describe(&s).unwrap();
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let std = (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / v.len() as f64).sqrt();
        assert!((d.mean - mean).abs() < 1e-9 && (d.std - std).abs() < 1e-9);
        let best = (0..34)
            .map(|e| v[e * 96..(e + 1) * 96].iter().sum::<f64>() / 96.0)
            .fold(f64::MIN, f64::max);
        assert!((d.max_entity_mean - best).abs() < 1e-9);
        assert!(d.max_entity_mean >= d.mean);
    }

    #[test]
    fn histogram_examples() {
        let s = series(FlowKind::Mobility, 2, 2, vec![1.0, 1.0, 100.0, 100.0]);
        let h = histogram(&s, 2).unwrap();
        assert_eq!(h.counts, vec![1, 1]);
        assert_eq!(h.edges.len(), 3);
        let one = series(FlowKind::Mobility, 1, 3, vec![1.0, 2.0, 3.0]);
        let h = histogram(&one, 4).unwrap();
        assert_eq!(h.counts, vec![1]);
        assert_eq!(h.skewness, None);
        assert!(histogram(&s, 1).is_err());
        // A long right tail.
        let tail = series(FlowKind::Mobility, 5, 1, vec![1.0, 1.0, 2.0, 2.0, 20.0]);
        let h = histogram(&tail, 4).unwrap();
        assert_eq!(h.counts.iter().sum::<usize>(), 5);
        assert!(h.skewness.unwrap() > 0.0);
    }

    #[test]
    fn pearson_extremes() {
        let x: Vec<f64> = (0..20).map(|i| ((i * 7) % 11) as f64).collect();
        assert!((pearson(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        let neg: Vec<f64> = x.iter().map(|v| 5.0 - v).collect();
        assert!((pearson(&x, &neg).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(pearson(&x, &[3.0; 20]), None);
    }

    proptest! {
        #[test]
        fn pearson_ignores_positive_affine_maps(
            pairs in proptest::collection::vec((-100.0f64..100.0, -100.0f64..100.0), 3..40),
            a in 0.01f64..50.0,
            b in -100.0f64..100.0,
        ) {
            let (x, y): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            if let Some(r) = pearson(&x, &y) {
                prop_assert!((-1.0..=1.0).contains(&r));
                let ax: Vec<f64> = x.iter().map(|v| a * v + b).collect();
                prop_assert!((pearson(&ax, &y).unwrap() - r).abs() < 1e-9);
            }
        }

        #[test]
        fn summary_ignores_time_order(
            vals in proptest::collection::vec(0.0f64..1000.0, 24),
            rot in 0usize..12,
        ) {
            let mut shuffled = Vec::new();
            for e in 0..2 {
                let mut row = vals[e * 12..(e + 1) * 12].to_vec();
                row.rotate_left(rot);
                shuffled.extend(row);
            }
            let a = describe(&series(FlowKind::Gct, 2, 12, vals)).unwrap();
            let b = describe(&series(FlowKind::Gct, 2, 12, shuffled)).unwrap();
            prop_assert!((a.mean - b.mean).abs() < 1e-9 && (a.std - b.std).abs() < 1e-9);
        }
    }

    #[test]
    fn weekly_profile_matches_group_by() {
        let spd = 96;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let steps = spd * 16 + 5;
        let v: Vec<f64> = (0..steps).map(|_| rng.random_range(0.0..10.0)).collect();
        let s = series(FlowKind::Mobility, 1, steps, v.clone());
        let p = weekly_profile(&s, 0).unwrap();
        let first = weekday(s.start_timestamp);
        for wd in 0..7 {
            for slot in [0, 37, 95] {
                let picks: Vec<f64> = (0..16)
                    .filter(|d| (first + d) % 7 == wd)
                    .map(|d| v[d * spd + slot])
                    .collect();
                let m = picks.iter().sum::<f64>() / picks.len() as f64;
                assert!((p.means[wd][slot] - m).abs() < 1e-9);
            }
        }
        assert_eq!(p.days.iter().sum::<usize>(), 16);

        let flat = weekly_profile(&series(FlowKind::Mobility, 1, spd * 7, vec![2.0; spd * 7]), 0).unwrap();
        assert!(flat.means.iter().flatten().all(|&x| x == 2.0));
        assert!(weekly_profile(&series(FlowKind::Mobility, 1, spd * 6, vec![2.0; spd * 6]), 0).is_err());

        // Reordering time changes the profile.
        let mut rev = v.clone();
        rev.reverse();
        let q = weekly_profile(&series(FlowKind::Mobility, 1, steps, rev), 0).unwrap();
        assert_ne!(p.means, q.means);
    }

    #[test]
    fn morning_commute_route_peaks_in_the_morning() {
        let topo = RoadTopology::synthetic(8, 10, 2).unwrap();
        let gen = GeneratorConfig {
            days: 14,
            emit_records: false,
            ..GeneratorConfig::default()
        };
        let out = generate_synthetic(&topo, &gen, 2).unwrap();
        let route = out.route_kinds.iter().position(|k| *k == CommuteKind::Morning).unwrap();
        let p = weekly_profile(&out.mobility, route).unwrap();
        for wd in 0..5 {
            assert!(p.window_mean(wd, 7.0, 9.0) > p.window_mean(wd, 17.0, 19.0), "weekday {wd}");
        }
    }

    #[test]
    fn direct_upstream_correlates_more_than_two_hops() {
        let gen = GeneratorConfig {
            days: 2,
            emit_records: false,
            propagation: 0.9,
            ..GeneratorConfig::default()
        };
        let mut wins = 0;
        for seed in 0..5 {
            let topo = RoadTopology::synthetic(12, 16, seed).unwrap();
            let out = generate_synthetic(&topo, &gen, seed).unwrap();
            let (mut one, mut two) = (0.0, 0.0);
            let mut focal = 0;
            for r in 0..topo.num_routes() {
                let radar = upstream_correlation(&out.mobility, &topo, r, 1, 2).unwrap();
                if let (Some(a), Some(b)) = (radar.mean_r(1), radar.mean_r(2)) {
                    one += a;
                    two += b;
                    focal += 1;
                }
            }
            assert!(focal > 0);
            if one > two {
                wins += 1;
            }
        }
        assert!(wins >= 3, "1-hop ahead in {wins} of 5 seeds");
    }

    #[test]
    fn correlation_argument_checks() {
        let topo = RoadTopology::synthetic(5, 5, 0).unwrap();
        let m = topo.num_routes();
        let s = series(FlowKind::Mobility, m, 96, vec![1.0; m * 96]);
        assert!(upstream_correlation(&s, &topo, m, 0, 1).is_err());
        assert!(upstream_correlation(&s, &topo, 0, 1, 1).is_err());
        assert!(upstream_correlation(&s, &topo, 0, 0, 3).is_err());
        let radar = upstream_correlation(&s, &topo, 0, 0, 2).unwrap();
        assert!(radar.neighbors.iter().all(|n| n.r.is_none()));
    }
}
