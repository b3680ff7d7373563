//! Road segments, directed routes and the graphs derived from them.
//!
//! Three structures are built once and shared by both model stages:
//! the undirected segment graph (with self-loops), the directed route
//! line-graph (with self-loops) and, per route, its sorted list of 1-hop
//! upstream routes.

use std::collections::{BTreeSet, HashSet};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub id: usize,
    pub label: String,
    pub lat: f64,
    pub lon: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Route {
    pub id: usize,
    pub start: usize,
    pub end: usize,
}

impl Route {
    /// Column name used in flow files.
    pub fn label(&self) -> String {
        format!("{}_{}", self.start, self.end)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopologyOptions {
    /// Drop the reverse of a route (`j -> i` for route `i -> j`) from its upstream set.
    #[serde(default = "default_true")]
    pub exclude_reverse: bool,
}

fn default_true() -> bool {
    true
}

impl Default for TopologyOptions {
    fn default() -> Self {
        Self { exclude_reverse: true }
    }
}

/// Dense square 0/1 matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Adjacency {
    n: usize,
    bits: Vec<bool>,
}

impl Adjacency {
    fn new(n: usize) -> Self {
        Self {
            n,
            bits: vec![false; n * n],
        }
    }

    fn set(&mut self, i: usize, j: usize) {
        self.bits[i * self.n + j] = true;
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.n + j]
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[self.n, self.n], self.bits.iter().map(|&b| f64::from(u8::from(b))).collect())
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::new(self.n);
        for i in 0..self.n {
            for j in 0..self.n {
                if self.get(i, j) {
                    t.set(j, i);
                }
            }
        }
        t
    }

    /// Row-stochastic version `D⁻¹A`; empty rows stay zero.
    pub fn row_normalized(&self) -> Tensor {
        let mut t = self.to_tensor();
        let n = self.n;
        for row in t.data_mut().chunks_mut(n.max(1)) {
            let s: f64 = row.iter().sum();
            if s > 0.0 {
                row.iter_mut().for_each(|v| *v /= s);
            }
        }
        t
    }
}

/// On-disk topology layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopologyFile {
    pub segments: Vec<Segment>,
    pub routes: Vec<Route>,
    #[serde(default)]
    pub options: TopologyOptions,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoadTopology {
    segments: Vec<Segment>,
    routes: Vec<Route>,
    options: TopologyOptions,
    segment_adjacency: Adjacency,
    route_adjacency: Adjacency,
    upstream: Vec<Vec<usize>>,
}

impl RoadTopology {
    pub fn new(segments: Vec<Segment>, routes: Vec<Route>, options: TopologyOptions) -> Result<Self> {
        build_topology(segments, routes, options)
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn routes(&self) -> &[Route] {
        &self.routes
    }

    pub fn options(&self) -> TopologyOptions {
        self.options
    }

    pub fn num_segments(&self) -> usize {
        self.segments.len()
    }

    pub fn num_routes(&self) -> usize {
        self.routes.len()
    }

    /// 𝒢_gct: symmetric, unit diagonal.
    pub fn segment_adjacency(&self) -> &Adjacency {
        &self.segment_adjacency
    }

    /// 𝒢_mob: `a -> b` iff `end(a) == start(b)`, unit diagonal.
    pub fn route_adjacency(&self) -> &Adjacency {
        &self.route_adjacency
    }

    /// 1-hop upstream routes of `route`, sorted by id.
    pub fn upstream(&self, route: usize) -> &[usize] {
        &self.upstream[route]
    }

    pub fn upstream_map(&self) -> &[Vec<usize>] {
        &self.upstream
    }

    pub fn route_between(&self, start: usize, end: usize) -> Option<usize> {
        self.routes.iter().find(|r| r.start == start && r.end == end).map(|r| r.id)
    }

    /// Upstream routes up to `hops` away, each with its smallest hop distance.
    /// The focal route itself is never included.
    pub fn upstream_within(&self, route: usize, hops: usize) -> Vec<(usize, usize)> {
        let mut seen: BTreeSet<usize> = BTreeSet::from([route]);
        let mut out = Vec::new();
        let mut frontier = vec![route];
        for hop in 1..=hops {
            let mut next = BTreeSet::new();
            for &r in &frontier {
                for &q in self.upstream(r) {
                    if seen.insert(q) {
                        next.insert(q);
                    }
                }
            }
            out.extend(next.iter().map(|&q| (q, hop)));
            frontier = next.into_iter().collect();
        }
        out
    }

    /// Routes whose start segment is `segment`.
    pub fn routes_from(&self, segment: usize) -> impl Iterator<Item = &Route> {
        self.routes.iter().filter(move |r| r.start == segment)
    }

    pub fn to_file(&self) -> TopologyFile {
        TopologyFile {
            segments: self.segments.clone(),
            routes: self.routes.clone(),
            options: self.options,
        }
    }

    pub fn from_file(file: TopologyFile) -> Result<Self> {
        build_topology(file.segments, file.routes, file.options)
    }

    /// Content hash used to tie checkpoints to the topology they were trained on.
    pub fn content_hash(&self) -> String {
        let json = serde_json::to_vec(&self.to_file()).expect("topology serialises");
        hex::encode(Sha256::digest(&json))
    }

    /// Jittered-grid road network with `links` undirected connections, each
    /// carrying one route per direction (so `2 * links` routes).
    ///
    /// A nearest-neighbour spanning tree guarantees connectivity; the
    /// remaining links are the shortest unused segment pairs.
    pub fn synthetic(num_segments: usize, links: usize, seed: u64) -> Result<Self> {
        if num_segments < 2 {
            return Err(Error::Config("synthetic topology needs at least 2 segments".into()));
        }
        let max_links = num_segments * (num_segments - 1) / 2;
        if links + 1 < num_segments || links > max_links {
            return Err(Error::Config(format!(
                "links must lie in [{}, {max_links}] for {num_segments} segments",
                num_segments - 1
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cols = (num_segments as f64).sqrt().ceil() as usize;
        // ~200 m grid spacing around the proof-of-concept area.
        let spacing = 0.0018;
        let segments: Vec<Segment> = (0..num_segments)
            .map(|i| {
                let (r, c) = (i / cols, i % cols);
                Segment {
                    id: i,
                    label: format!("seg{i}"),
                    lat: 24.78 + r as f64 * spacing + rng.random_range(-0.3..0.3) * spacing,
                    lon: 120.97 + c as f64 * spacing + rng.random_range(-0.3..0.3) * spacing,
                }
            })
            .collect();
        let dist = |a: usize, b: usize| {
            let (sa, sb) = (&segments[a], &segments[b]);
            (sa.lat - sb.lat).hypot(sa.lon - sb.lon)
        };
        let mut edges: BTreeSet<(usize, usize)> = BTreeSet::new();
        let mut in_tree = vec![false; num_segments];
        in_tree[0] = true;
        for _ in 1..num_segments {
            let mut best: Option<(f64, usize, usize)> = None;
            for a in (0..num_segments).filter(|&a| in_tree[a]) {
                for b in (0..num_segments).filter(|&b| !in_tree[b]) {
                    let d = dist(a, b);
                    if best.is_none_or(|(bd, _, _)| d < bd) {
                        best = Some((d, a, b));
                    }
                }
            }
            let (_, a, b) = best.expect("a remaining segment exists");
            in_tree[b] = true;
            edges.insert((a.min(b), a.max(b)));
        }
        let mut candidates: Vec<(f64, usize, usize)> = (0..num_segments)
            .flat_map(|a| ((a + 1)..num_segments).map(move |b| (a, b)))
            .filter(|e| !edges.contains(e))
            .map(|(a, b)| (dist(a, b), a, b))
            .collect();
        candidates.sort_by(|x, y| x.0.total_cmp(&y.0).then((x.1, x.2).cmp(&(y.1, y.2))));
        for (_, a, b) in candidates.into_iter().take(links - edges.len()) {
            edges.insert((a, b));
        }
        let routes = edges
            .iter()
            .flat_map(|&(a, b)| [(a, b), (b, a)])
            .enumerate()
            .map(|(id, (start, end))| Route { id, start, end })
            .collect();
        build_topology(segments, routes, TopologyOptions::default())
    }
}

/// Validate segments and routes and derive the adjacency and upstream structures.
pub fn build_topology(
    mut segments: Vec<Segment>,
    mut routes: Vec<Route>,
    options: TopologyOptions,
) -> Result<RoadTopology> {
    segments.sort_by_key(|s| s.id);
    for (i, s) in segments.iter().enumerate() {
        if s.id != i {
            return Err(Error::Topology(format!(
                "segment ids must be dense and unique in [0, {}); found id {}",
                segments.len(),
                s.id
            )));
        }
        if !(-90.0..=90.0).contains(&s.lat) || !(-180.0..=180.0).contains(&s.lon) {
            return Err(Error::Topology(format!(
                "segment {} has out-of-range coordinates ({}, {})",
                s.id, s.lat, s.lon
            )));
        }
    }
    routes.sort_by_key(|r| r.id);
    let n = segments.len();
    let mut pairs = HashSet::new();
    for (i, r) in routes.iter().enumerate() {
        if r.id != i {
            return Err(Error::Topology(format!(
                "route ids must be dense and unique in [0, {}); found id {}",
                routes.len(),
                r.id
            )));
        }
        if r.start >= n || r.end >= n {
            return Err(Error::Topology(format!(
                "route {} ({} -> {}) references a segment outside [0, {n})",
                r.id, r.start, r.end
            )));
        }
        if r.start == r.end {
            return Err(Error::Topology(format!("route {} starts and ends on segment {}", r.id, r.start)));
        }
        if !pairs.insert((r.start, r.end)) {
            return Err(Error::DuplicateRoute {
                route: r.id,
                start: r.start,
                end: r.end,
            });
        }
    }

    let mut segment_adjacency = Adjacency::new(n);
    for i in 0..n {
        segment_adjacency.set(i, i);
    }
    for r in &routes {
        segment_adjacency.set(r.start, r.end);
        segment_adjacency.set(r.end, r.start);
    }

    let m = routes.len();
    let mut route_adjacency = Adjacency::new(m);
    let mut upstream = vec![Vec::new(); m];
    for a in &routes {
        route_adjacency.set(a.id, a.id);
        for b in &routes {
            if a.end == b.start && a.id != b.id {
                route_adjacency.set(a.id, b.id);
                let is_reverse = a.start == b.end;
                if !(options.exclude_reverse && is_reverse) {
                    upstream[b.id].push(a.id);
                }
            }
        }
    }
    // Outer loop visits `a` in id order, so each list is already sorted.
    debug_assert!(upstream.iter().all(|u| u.windows(2).all(|w| w[0] < w[1])));

    Ok(RoadTopology {
        segments,
        routes,
        options,
        segment_adjacency,
        route_adjacency,
        upstream,
    })
}

pub fn load_topology(path: impl AsRef<Path>) -> Result<RoadTopology> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: TopologyFile = serde_json::from_str(&text)?;
    RoadTopology::from_file(file)
}

pub fn save_topology(topology: &RoadTopology, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(&topology.to_file())?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seg(id: usize) -> Segment {
        Segment {
            id,
            label: format!("s{id}"),
            lat: 24.8,
            lon: 120.98,
        }
    }

    fn topo(n: usize, pairs: &[(usize, usize)], exclude_reverse: bool) -> Result<RoadTopology> {
        let routes = pairs
            .iter()
            .enumerate()
            .map(|(id, &(start, end))| Route { id, start, end })
            .collect();
        build_topology((0..n).map(seg).collect(), routes, TopologyOptions { exclude_reverse })
    }

    #[test]
    fn figure_six_upstream_routes() {
        // Routes 8→5, 30→5, 5→4, 4→5: upstream of 5→4 are 8→5 and 30→5.
        let t = topo(31, &[(8, 5), (30, 5), (5, 4), (4, 5)], true).unwrap();
        assert_eq!(t.upstream(2), &[0, 1]);
        let with_reverse = topo(31, &[(8, 5), (30, 5), (5, 4), (4, 5)], false).unwrap();
        assert_eq!(with_reverse.upstream(2), &[0, 1, 3]);
    }

    #[test]
    fn lone_route_has_no_upstream() {
        let t = topo(2, &[(0, 1)], true).unwrap();
        assert!(t.upstream(0).is_empty());
    }

    #[test]
    fn dangling_reference_names_route() {
        let err = topo(10, &[(0, 1), (3, 99)], true).unwrap_err();
        assert!(err.to_string().contains("route 1"), "{err}");
    }

    #[test]
    fn duplicate_route_rejected() {
        let err = topo(3, &[(0, 1), (0, 1)], true).unwrap_err();
        assert!(matches!(err, Error::DuplicateRoute { route: 1, .. }));
    }

    #[test]
    fn self_loop_route_rejected() {
        assert!(topo(3, &[(1, 1)], true).is_err());
    }

    #[test]
    fn coordinates_validated() {
        let mut s = seg(0);
        s.lat = 91.0;
        assert!(build_topology(vec![s], vec![], TopologyOptions::default()).is_err());
    }

    #[test]
    fn adjacency_shapes_and_diagonals() {
        let t = topo(4, &[(0, 1), (1, 2), (2, 1), (2, 3)], true).unwrap();
        let sa = t.segment_adjacency();
        for i in 0..4 {
            assert!(sa.get(i, i));
            for j in 0..4 {
                assert_eq!(sa.get(i, j), sa.get(j, i));
            }
        }
        assert!(!sa.get(0, 3));
        let ra = t.route_adjacency();
        assert!(ra.get(0, 1)); // 0→1 feeds 1→2
        assert!(!ra.get(1, 0));
        assert!(ra.get(1, 2)); // 1→2 feeds 2→1 in the line graph
        assert!(ra.get(1, 3));
        // but 2→1 is the reverse of 1→2 and excluded from its upstream set
        assert_eq!(t.upstream(1), &[0]);
    }

    #[test]
    fn two_hop_upstream() {
        // 0→1, 1→2, 2→3, 5→1
        let t = topo(6, &[(0, 1), (1, 2), (2, 3), (5, 1)], true).unwrap();
        assert_eq!(t.upstream_within(2, 2), vec![(1, 1), (0, 2), (3, 2)]);
    }

    #[test]
    fn synthetic_full_network() {
        let t = RoadTopology::synthetic(34, 42, 1).unwrap();
        assert_eq!(t.num_segments(), 34);
        assert_eq!(t.num_routes(), 84);
        assert_eq!(t, RoadTopology::synthetic(34, 42, 1).unwrap());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("topo.json");
        let t = RoadTopology::synthetic(9, 12, 3).unwrap();
        save_topology(&t, &p).unwrap();
        let back = load_topology(&p).unwrap();
        assert_eq!(back, t);
        assert_eq!(back.content_hash(), t.content_hash());
    }

    #[test]
    fn empty_routes_file() {
        let json = r#"{"segments":[{"id":0,"label":"a","lat":1.0,"lon":2.0}],"routes":[]}"#;
        let t = RoadTopology::from_file(serde_json::from_str(json).unwrap()).unwrap();
        assert_eq!(t.num_routes(), 0);
        assert!(t.upstream_map().is_empty());
        assert!(t.options().exclude_reverse);
    }

    #[test]
    fn missing_key_is_an_error() {
        let json = r#"{"segments":[{"id":0,"label":"a","lat":1.0}],"routes":[]}"#;
        assert!(serde_json::from_str::<TopologyFile>(json).is_err());
    }
}
