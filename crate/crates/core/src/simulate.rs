//! Seeded simulators for the flow-level chain, the scaled packet-level open
//! network, and the closed network, plus empirical pmf utilities.
//!
//! Every simulator draws from a ChaCha8 generator keyed by the configured
//! seed, with the stream selected by `(replica, purpose)`.

use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeMap, BinaryHeap, HashMap};
use std::io::Write;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Geometric};
use rayon::prelude::*;
use thiserror::Error;

use crate::fairness::{solve_pf, FairnessError};
use crate::productform::{
    bn_table, doc_pmf_with_table, open_normalizer, spinning_allocation, table_entries,
    NormalizingTable, ProductFormError, DEFAULT_TABLE_CAP,
};
use crate::topology::{
    iter_states, state_space_size, PacketVector, SizeDist, Topology, TopologyError, TrafficProfile,
};

pub const DEFAULT_WARMUP: f64 = 0.2;
pub const DEFAULT_BOX: u64 = 50;
pub const DEFAULT_MAX_EVENTS: u64 = 2_000_000_000;
/// Batches used for closed-network throughput confidence intervals.
pub const CLOSED_BATCHES: usize = 32;
/// Normal quantile for the reported half-widths.
pub const CLT_Z: f64 = 1.96;
/// Fibres up to this size are sampled exactly; larger ones by a chain.
pub const EXACT_SAMPLING_LIMIT: u128 = 200_000;
/// Post-warmup fraction of time outside the box that triggers a drift warning.
const DRIFT_FRACTION: f64 = 0.1;

const STREAM_FLOW: u64 = 1;
const STREAM_SIZES: u64 = 2;
const STREAM_PACKET: u64 = 3;
const STREAM_CLOSED: u64 = 4;
const STREAM_CONDITIONAL: u64 = 5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    Config(String),
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error(transparent)]
    ProductForm(#[from] ProductFormError),
    #[error(transparent)]
    Fairness(#[from] FairnessError),
    #[error("event cap of {cap} reached")]
    EventCap { cap: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub horizon: f64,
    pub warmup_fraction: f64,
    pub seed: u64,
    pub replica: u32,
    /// Scale `c` of the packet-level network.
    pub scale_c: u32,
    /// Inclusive per-route upper bounds of the pmf box; `None` means
    /// `DEFAULT_BOX` on every route.
    pub truncation: Option<Vec<u64>>,
    pub initial: Option<Vec<u64>>,
    /// Keep every event time and state in the trajectory.
    pub record_path: bool,
    pub max_events: u64,
}

impl SimConfig {
    pub fn new(horizon: f64, seed: u64) -> Self {
        SimConfig {
            horizon,
            warmup_fraction: DEFAULT_WARMUP,
            seed,
            replica: 0,
            scale_c: 1,
            truncation: None,
            initial: None,
            record_path: false,
            max_events: DEFAULT_MAX_EVENTS,
        }
    }

    pub fn with_scale(mut self, c: u32) -> Self {
        self.scale_c = c;
        self
    }

    pub fn with_truncation(mut self, bounds: Vec<u64>) -> Self {
        self.truncation = Some(bounds);
        self
    }

    pub fn with_path(mut self) -> Self {
        self.record_path = true;
        self
    }

    pub fn warmup(&self) -> f64 {
        self.horizon * self.warmup_fraction
    }

    pub fn bounds(&self, routes: usize) -> Vec<u64> {
        self.truncation
            .clone()
            .unwrap_or_else(|| vec![DEFAULT_BOX; routes])
    }

    pub fn validate(&self, topo: &Topology) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::Config(m.to_string()));
        if !(self.horizon.is_finite() && self.horizon > 0.0) {
            return bad("horizon must be positive");
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return bad("warmup_fraction must lie in [0, 1)");
        }
        if self.scale_c == 0 {
            return bad("scale_c must be positive");
        }
        if let Some(b) = &self.truncation {
            topo.check_len(b.len())?;
        }
        if let Some(n0) = &self.initial {
            topo.check_len(n0.len())?;
        }
        Ok(())
    }

    fn rng(&self, purpose: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(((self.replica as u64) << 8) | purpose);
        rng
    }
}

/// Probability masses on the box `0 <= n <= bounds`, plus the mass outside.
#[derive(Debug, Clone, PartialEq)]
pub struct Pmf {
    bounds: Vec<u64>,
    mass: Vec<f64>,
    outside: f64,
}

impl Pmf {
    pub fn new(bounds: Vec<u64>) -> Self {
        let len = table_entries(&bounds) as usize;
        Pmf {
            bounds,
            mass: vec![0.0; len],
            outside: 0.0,
        }
    }

    pub fn from_fn(bounds: Vec<u64>, mut f: impl FnMut(&[u64]) -> f64) -> Self {
        let mut pmf = Pmf::new(bounds);
        let mut n = vec![0u64; pmf.bounds.len()];
        for idx in 0..pmf.mass.len() {
            pmf.mass[idx] = f(&n);
            advance(&mut n, &pmf.bounds);
        }
        let total: f64 = pmf.mass.iter().sum();
        pmf.outside = (1.0 - total).max(0.0);
        pmf
    }

    pub fn bounds(&self) -> &[u64] {
        &self.bounds
    }

    pub fn masses(&self) -> &[f64] {
        &self.mass
    }

    pub fn outside(&self) -> f64 {
        self.outside
    }

    fn index(&self, n: &[u64]) -> Option<usize> {
        let mut idx = 0usize;
        for (&k, &b) in n.iter().zip(&self.bounds) {
            if k > b {
                return None;
            }
            idx = idx * (b as usize + 1) + k as usize;
        }
        Some(idx)
    }

    pub fn get(&self, n: &[u64]) -> f64 {
        self.index(n).map_or(0.0, |i| self.mass[i])
    }

    pub fn add(&mut self, n: &[u64], w: f64) {
        match self.index(n) {
            Some(i) => self.mass[i] += w,
            None => self.outside += w,
        }
    }

    pub fn total(&self) -> f64 {
        self.mass.iter().sum::<f64>() + self.outside
    }

    pub fn normalize(&mut self) {
        let t = self.total();
        if t > 0.0 {
            self.mass.iter_mut().for_each(|m| *m /= t);
            self.outside /= t;
        }
    }

    /// Equal-weight mixture of pmfs on a common box.
    pub fn average(pmfs: &[Pmf]) -> Result<Pmf, SimError> {
        let first = pmfs
            .first()
            .ok_or_else(|| SimError::Config("no pmfs to average".into()))?;
        let mut out = Pmf::new(first.bounds.clone());
        for p in pmfs {
            if p.bounds != out.bounds {
                return Err(SimError::Config("pmf boxes differ".into()));
            }
            out.mass.iter_mut().zip(&p.mass).for_each(|(a, b)| *a += b);
            out.outside += p.outside;
        }
        let k = pmfs.len() as f64;
        out.mass.iter_mut().for_each(|m| *m /= k);
        out.outside /= k;
        Ok(out)
    }

    /// Marginal of one coordinate over the box.
    pub fn marginal(&self, route: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.bounds[route] as usize + 1];
        let mut n = vec![0u64; self.bounds.len()];
        for &m in &self.mass {
            out[n[route] as usize] += m;
            advance(&mut n, &self.bounds);
        }
        out
    }
}

fn advance(n: &mut [u64], bounds: &[u64]) {
    for d in (0..n.len()).rev() {
        if n[d] < bounds[d] {
            n[d] += 1;
            return;
        }
        n[d] = 0;
    }
}

/// Exact stationary document-count pmf on a box.
pub fn exact_doc_pmf(
    topo: &Topology,
    traffic: &TrafficProfile,
    bounds: &[u64],
) -> Result<Pmf, SimError> {
    topo.check_len(bounds.len())?;
    let b = open_normalizer::<f64>(topo, traffic)?;
    let table = bn_table::<f64>(topo, bounds)?;
    let mut err = None;
    let pmf = Pmf::from_fn(bounds.to_vec(), |n| {
        doc_pmf_with_table(&table, traffic, &b, n).unwrap_or_else(|e| {
            err = Some(e);
            0.0
        })
    });
    match err {
        Some(e) => Err(e.into()),
        None => Ok(pmf),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TvReport {
    /// Distance between the two pmfs with everything outside the box lumped
    /// into one extra cell: `inside + |outside_p - outside_q| / 2`.
    pub tv: f64,
    /// `1/2 sum_box |p - q|`.
    pub inside: f64,
    pub outside_p: f64,
    pub outside_q: f64,
}

pub fn empirical_tv_distance(p: &Pmf, q: &Pmf) -> Result<TvReport, SimError> {
    if p.bounds != q.bounds {
        return Err(SimError::Config("pmf boxes differ".into()));
    }
    let inside = 0.5
        * p.mass
            .iter()
            .zip(&q.mass)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>();
    Ok(TvReport {
        tv: (inside + 0.5 * (p.outside - q.outside).abs()).min(1.0),
        inside,
        outside_p: p.outside,
        outside_q: q.outside,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SimWarning {
    /// The state spent more than a tenth of the observed time outside the box.
    UnstableDrift,
}

/// Holding times and jump counts per visited state, post-warmup.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StateStats {
    pub holding: f64,
    pub visits: u64,
    pub up: Vec<u64>,
    pub down: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// Event times; empty unless the path was recorded.
    pub times: Vec<f64>,
    /// State after each event, starting with the initial state at time 0.
    pub states: Vec<Vec<u64>>,
    /// Time-weighted post-warmup document-count pmf.
    pub pmf: Pmf,
    pub mean_counts: Vec<f64>,
    pub arrivals: Vec<u64>,
    pub departures: Vec<u64>,
    pub events: u64,
    pub post_warmup_events: u64,
    /// Packet moves in the packet-level simulator.
    pub packet_events: u64,
    pub observed_time: f64,
    pub generator: Option<BTreeMap<Vec<u64>, StateStats>>,
    pub warnings: Vec<SimWarning>,
}

impl Trajectory {
    /// Mean sojourn per route by Little's law; NaN on routes without arrivals.
    pub fn mean_sojourn(&self, traffic: &TrafficProfile) -> Vec<f64> {
        self.mean_counts
            .iter()
            .zip(traffic.nu())
            .map(|(&l, &nu)| if nu > 0.0 { l / nu } else { f64::NAN })
            .collect()
    }

    /// CSV with columns `time, n0, n1, ...`; needs a recorded path.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), csv::Error> {
        let mut out = csv::Writer::from_writer(w);
        let routes = self.mean_counts.len();
        let mut header = vec!["time".to_string()];
        header.extend((0..routes).map(|i| format!("n{i}")));
        out.write_record(&header)?;
        let start = std::iter::once(0.0).chain(self.times.iter().cloned());
        for (t, s) in start.zip(&self.states) {
            let mut row = vec![crate::experiments::format_real(t)];
            row.extend(s.iter().map(|k| k.to_string()));
            out.write_record(&row)?;
        }
        out.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
enum Jump {
    Arrival(usize),
    Departure(usize),
}

struct Observer {
    warmup: f64,
    horizon: f64,
    pmf: Pmf,
    sums: Vec<f64>,
    observed: f64,
    record: bool,
    times: Vec<f64>,
    states: Vec<Vec<u64>>,
    events: u64,
    post: u64,
    arrivals: Vec<u64>,
    departures: Vec<u64>,
    generator: Option<BTreeMap<Vec<u64>, StateStats>>,
    max_events: u64,
}

impl Observer {
    fn new(cfg: &SimConfig, routes: usize, n0: &[u64], generator: bool) -> Self {
        Observer {
            warmup: cfg.warmup(),
            horizon: cfg.horizon,
            pmf: Pmf::new(cfg.bounds(routes)),
            sums: vec![0.0; routes],
            observed: 0.0,
            record: cfg.record_path,
            times: Vec::new(),
            states: if cfg.record_path {
                vec![n0.to_vec()]
            } else {
                Vec::new()
            },
            events: 0,
            post: 0,
            arrivals: vec![0; routes],
            departures: vec![0; routes],
            generator: generator.then(BTreeMap::new),
            max_events: cfg.max_events,
        }
    }

    fn hold(&mut self, n: &[u64], from: f64, to: f64) {
        let a = from.max(self.warmup);
        let b = to.min(self.horizon);
        if b <= a {
            return;
        }
        let w = b - a;
        self.pmf.add(n, w);
        self.observed += w;
        for (s, &k) in self.sums.iter_mut().zip(n) {
            *s += w * k as f64;
        }
        if let Some(g) = &mut self.generator {
            let routes = n.len();
            g.entry(n.to_vec())
                .or_insert_with(|| StateStats {
                    up: vec![0; routes],
                    down: vec![0; routes],
                    ..Default::default()
                })
                .holding += w;
        }
    }

    /// Records a jump out of `before` at time `t` into `after`.
    fn jump(&mut self, t: f64, before: &[u64], after: &[u64], j: Jump) -> Result<(), SimError> {
        self.events += 1;
        if self.events > self.max_events {
            return Err(SimError::EventCap {
                cap: self.max_events,
            });
        }
        if t >= self.warmup {
            self.post += 1;
            match j {
                Jump::Arrival(i) => self.arrivals[i] += 1,
                Jump::Departure(i) => self.departures[i] += 1,
            }
            if let Some(g) = &mut self.generator {
                if let Some(s) = g.get_mut(before) {
                    s.visits += 1;
                    match j {
                        Jump::Arrival(i) => s.up[i] += 1,
                        Jump::Departure(i) => s.down[i] += 1,
                    }
                }
            }
        }
        if self.record {
            self.times.push(t);
            self.states.push(after.to_vec());
        }
        Ok(())
    }

    fn finish(mut self, packet_events: u64) -> Trajectory {
        let observed = self.observed;
        let mut warnings = Vec::new();
        if observed > 0.0 && self.pmf.outside / observed > DRIFT_FRACTION {
            warnings.push(SimWarning::UnstableDrift);
        }
        self.pmf.normalize();
        Trajectory {
            times: self.times,
            states: self.states,
            pmf: self.pmf,
            mean_counts: self
                .sums
                .iter()
                .map(|s| if observed > 0.0 { s / observed } else { 0.0 })
                .collect(),
            arrivals: self.arrivals,
            departures: self.departures,
            events: self.events,
            post_warmup_events: self.post,
            packet_events,
            observed_time: observed,
            generator: self.generator,
            warnings,
        }
    }
}

/// How the flow-level simulators obtain `Lambda(n)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AllocationSource {
    Spinning,
    ProportionalFair,
}

struct Allocator<'a> {
    topo: &'a Topology,
    source: AllocationSource,
    table: Option<NormalizingTable<f64>>,
    memo: HashMap<Vec<u64>, Vec<f64>>,
}

impl<'a> Allocator<'a> {
    fn new(topo: &'a Topology, source: AllocationSource) -> Self {
        Allocator {
            topo,
            source,
            table: None,
            memo: HashMap::new(),
        }
    }

    fn rates(&mut self, n: &[u64]) -> Result<Vec<f64>, SimError> {
        match self.source {
            AllocationSource::Spinning => {
                if !self.table.as_ref().is_some_and(|t| t.covers(n)) {
                    let n_max: Vec<u64> = match &self.table {
                        Some(t) => t
                            .n_max()
                            .iter()
                            .zip(n)
                            .map(|(&a, &b)| (2 * a).max(b))
                            .collect(),
                        None => n.iter().map(|&b| b.max(8)).collect(),
                    };
                    if table_entries(&n_max) > DEFAULT_TABLE_CAP as u128 {
                        return Err(ProductFormError::TableTooLarge {
                            entries: table_entries(&n_max),
                            cap: DEFAULT_TABLE_CAP,
                        }
                        .into());
                    }
                    self.table = Some(bn_table::<f64>(self.topo, &n_max)?);
                }
                let table = self.table.as_ref().expect("table built above");
                Ok(spinning_allocation(self.topo, n, table)?.lambda)
            }
            AllocationSource::ProportionalFair => {
                if let Some(v) = self.memo.get(n) {
                    return Ok(v.clone());
                }
                let real: Vec<f64> = n.iter().map(|&k| k as f64).collect();
                let lam = solve_pf(self.topo, &real)?.allocation.lambda;
                self.memo.insert(n.to_vec(), lam.clone());
                Ok(lam)
            }
        }
    }
}

fn initial_state(topo: &Topology, cfg: &SimConfig) -> Vec<u64> {
    cfg.initial
        .clone()
        .unwrap_or_else(|| vec![0; topo.route_count()])
}

fn pick(rng: &mut ChaCha8Rng, weights: impl Iterator<Item = f64> + Clone, total: f64) -> usize {
    let mut u = rng.gen::<f64>() * total;
    let mut last = 0;
    for (k, w) in weights.enumerate() {
        if w <= 0.0 {
            continue;
        }
        last = k;
        if u < w {
            return k;
        }
        u -= w;
    }
    last
}

/// Exact-jump simulation of the flow-level chain: route `i` gains a document
/// at rate `nu_i` and loses one at rate `mu_i Lambda_i(n)`.
pub fn simulate_flow_level(
    topo: &Topology,
    traffic: &TrafficProfile,
    source: AllocationSource,
    cfg: &SimConfig,
) -> Result<Trajectory, SimError> {
    cfg.validate(topo)?;
    topo.check_len(traffic.route_count())?;
    let routes = topo.route_count();
    let mut rng = cfg.rng(STREAM_FLOW);
    let mut alloc = Allocator::new(topo, source);
    let mut n = initial_state(topo, cfg);
    let mut obs = Observer::new(cfg, routes, &n, true);
    let mut t = 0.0;
    let mut rates = vec![0.0; 2 * routes];
    loop {
        let lam = alloc.rates(&n)?;
        for i in 0..routes {
            rates[i] = traffic.nu()[i];
            rates[routes + i] = if n[i] > 0 {
                traffic.mu()[i] * lam[i]
            } else {
                0.0
            };
        }
        let total: f64 = rates.iter().sum();
        if total <= 0.0 {
            obs.hold(&n, t, cfg.horizon);
            break;
        }
        let dt = Exp::new(total).expect("positive rate").sample(&mut rng);
        if t + dt >= cfg.horizon {
            obs.hold(&n, t, cfg.horizon);
            break;
        }
        obs.hold(&n, t, t + dt);
        t += dt;
        let k = pick(&mut rng, rates.iter().cloned(), total);
        let before = n.clone();
        let j = if k < routes {
            n[k] += 1;
            Jump::Arrival(k)
        } else {
            n[k - routes] -= 1;
            Jump::Departure(k - routes)
        };
        obs.jump(t, &before, &n, j)?;
    }
    Ok(obs.finish(0))
}

fn sample_size(dist: SizeDist, mu: f64, rng: &mut ChaCha8Rng) -> f64 {
    let exp =
        |mean: f64, rng: &mut ChaCha8Rng| Exp::new(1.0 / mean).expect("positive mean").sample(rng);
    match dist {
        SizeDist::Exponential => exp(1.0 / mu, rng),
        SizeDist::Deterministic => 1.0 / mu,
        SizeDist::Hyperexponential { p } => {
            if rng.gen::<f64>() < p {
                exp(1.0 / (2.0 * p * mu), rng)
            } else {
                exp(1.0 / (2.0 * (1.0 - p) * mu), rng)
            }
        }
        SizeDist::Geometric { c } => {
            let c = c as f64;
            let failures = Geometric::new(mu / c).expect("mu <= c").sample(rng);
            (failures + 1) as f64 / c
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
struct Threshold(f64);

impl Eq for Threshold {}

impl Ord for Threshold {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0)
    }
}

/// Flow-level simulation with the route size distributions of `traffic`.
///
/// All route-`i` documents receive service at the common rate
/// `Lambda_i(n) / n_i`, so one attained-service clock per route suffices;
/// each document leaves when the clock passes its arrival reading plus size.
pub fn simulate_flow_level_general_sizes(
    topo: &Topology,
    traffic: &TrafficProfile,
    source: AllocationSource,
    cfg: &SimConfig,
) -> Result<Trajectory, SimError> {
    cfg.validate(topo)?;
    topo.check_len(traffic.route_count())?;
    let routes = topo.route_count();
    let mut rng = cfg.rng(STREAM_FLOW);
    let mut size_rng = cfg.rng(STREAM_SIZES);
    let mut alloc = Allocator::new(topo, source);
    let mut n = initial_state(topo, cfg);
    let mut clocks = vec![0.0; routes];
    let mut heaps: Vec<BinaryHeap<Reverse<Threshold>>> = vec![BinaryHeap::new(); routes];
    for i in 0..routes {
        for _ in 0..n[i] {
            let s = sample_size(traffic.size_dist()[i], traffic.mu()[i], &mut size_rng);
            heaps[i].push(Reverse(Threshold(s)));
        }
    }
    let nu_total: f64 = traffic.nu().iter().sum();
    let arrivals = (nu_total > 0.0).then(|| Exp::new(nu_total).expect("positive rate"));
    let mut obs = Observer::new(cfg, routes, &n, false);
    let mut t = 0.0;
    let mut speed = vec![0.0; routes];
    loop {
        let lam = alloc.rates(&n)?;
        let mut next_dep = f64::INFINITY;
        let mut dep_route = 0;
        for i in 0..routes {
            speed[i] = if n[i] > 0 { lam[i] / n[i] as f64 } else { 0.0 };
            if let Some(Reverse(Threshold(thr))) = heaps[i].peek() {
                if speed[i] > 0.0 {
                    let dt = (thr - clocks[i]).max(0.0) / speed[i];
                    if dt < next_dep {
                        next_dep = dt;
                        dep_route = i;
                    }
                }
            }
        }
        let next_arr = arrivals.map_or(f64::INFINITY, |e| e.sample(&mut rng));
        let dt = next_dep.min(next_arr);
        if !dt.is_finite() || t + dt >= cfg.horizon {
            obs.hold(&n, t, cfg.horizon);
            break;
        }
        obs.hold(&n, t, t + dt);
        t += dt;
        for i in 0..routes {
            clocks[i] += speed[i] * dt;
        }
        let before = n.clone();
        let jump = if next_arr <= next_dep {
            let i = pick(&mut rng, traffic.nu().iter().cloned(), nu_total);
            let s = sample_size(traffic.size_dist()[i], traffic.mu()[i], &mut size_rng);
            heaps[i].push(Reverse(Threshold(clocks[i] + s)));
            n[i] += 1;
            Jump::Arrival(i)
        } else {
            let Reverse(Threshold(thr)) = heaps[dep_route].pop().expect("nonempty heap");
            clocks[dep_route] = thr;
            n[dep_route] -= 1;
            Jump::Departure(dep_route)
        };
        obs.jump(t, &before, &n, jump)?;
    }
    Ok(obs.finish(0))
}

/// Per-incidence packet counts with the queue totals kept alongside.
struct PacketState<'a> {
    topo: &'a Topology,
    m: Vec<u64>,
    totals: Vec<u64>,
}

impl<'a> PacketState<'a> {
    fn new(topo: &'a Topology) -> Self {
        PacketState {
            topo,
            m: vec![0; topo.incidence_count()],
            totals: vec![0; topo.queue_count()],
        }
    }

    fn inc(&mut self, k: usize) {
        self.m[k] += 1;
        self.totals[self.topo.incidence(k).queue] += 1;
    }

    fn dec(&mut self, k: usize) {
        self.m[k] -= 1;
        self.totals[self.topo.incidence(k).queue] -= 1;
    }

    /// Incidence of a uniformly chosen packet at queue `j`.
    fn uniform_packet(&self, j: usize, rng: &mut ChaCha8Rng) -> usize {
        let ks = self.topo.queue_incidences(j);
        let mut u = rng.gen_range(0..self.totals[j]);
        for &k in ks {
            if u < self.m[k] {
                return k;
            }
            u -= self.m[k];
        }
        unreachable!("queue total matches incidence counts")
    }

    fn fire_rates(&self, c: f64, out: &mut [f64]) {
        for (j, r) in out.iter_mut().enumerate() {
            *r = if self.totals[j] > 0 {
                c * self.topo.capacity(j)
            } else {
                0.0
            };
        }
    }
}

/// The `c`-th scaled packet-level open network. Each queue serves at total
/// rate `c C_j` split equally over its packets; a packet leaving its route's
/// last queue ends the document with probability `mu_i / c` and otherwise
/// starts another pass. Returns the document-count trajectory.
pub fn simulate_open_packet(
    topo: &Topology,
    traffic: &TrafficProfile,
    cfg: &SimConfig,
) -> Result<Trajectory, SimError> {
    cfg.validate(topo)?;
    topo.check_len(traffic.route_count())?;
    let c = cfg.scale_c as f64;
    if traffic.mu().iter().any(|&mu| mu > c) {
        return Err(SimError::Config(format!(
            "scale_c = {} is below some mu",
            cfg.scale_c
        )));
    }
    let routes = topo.route_count();
    let queues = topo.queue_count();
    let mut rng = cfg.rng(STREAM_PACKET);
    let mut state = PacketState::new(topo);
    let mut n = initial_state(topo, cfg);
    for i in 0..routes {
        for _ in 0..n[i] {
            state.inc(topo.route_incidences(i)[0]);
        }
    }
    let nu_total: f64 = traffic.nu().iter().sum();
    let mut obs = Observer::new(cfg, routes, &n, false);
    let mut fire = vec![0.0; queues];
    let mut t = 0.0;
    let mut packet_events = 0u64;
    loop {
        state.fire_rates(c, &mut fire);
        let total = nu_total + fire.iter().sum::<f64>();
        if total <= 0.0 {
            obs.hold(&n, t, cfg.horizon);
            break;
        }
        let dt = Exp::new(total).expect("positive rate").sample(&mut rng);
        if t + dt >= cfg.horizon {
            obs.hold(&n, t, cfg.horizon);
            break;
        }
        obs.hold(&n, t, t + dt);
        t += dt;
        let mut u = rng.gen::<f64>() * total;
        if u < nu_total {
            let i = pick(&mut rng, traffic.nu().iter().cloned(), nu_total);
            state.inc(topo.route_incidences(i)[0]);
            let before = n.clone();
            n[i] += 1;
            obs.jump(t, &before, &n, Jump::Arrival(i))?;
            continue;
        }
        u -= nu_total;
        let mut j = queues - 1;
        for (q, &r) in fire.iter().enumerate() {
            if r > 0.0 {
                j = q;
                if u < r {
                    break;
                }
                u -= r;
            }
        }
        packet_events += 1;
        if packet_events > cfg.max_events {
            return Err(SimError::EventCap {
                cap: cfg.max_events,
            });
        }
        let k = state.uniform_packet(j, &mut rng);
        let i = topo.incidence(k).route;
        let ks = topo.route_incidences(i);
        let pos = ks
            .iter()
            .position(|&x| x == k)
            .expect("incidence on its route");
        state.dec(k);
        if pos + 1 < ks.len() {
            state.inc(ks[pos + 1]);
        } else if rng.gen::<f64>() < traffic.mu()[i] / c {
            let before = n.clone();
            n[i] -= 1;
            obs.jump(t, &before, &n, Jump::Departure(i))?;
        } else {
            state.inc(ks[0]);
        }
    }
    Ok(obs.finish(packet_events))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ThroughputEstimate {
    /// Long-run completion rate at each route's last queue.
    pub throughput: Vec<f64>,
    /// `CLT_Z` times the batch-means standard error.
    pub half_width: Vec<f64>,
    pub batches: usize,
    pub events: u64,
}

/// Closed network with `n_i` packets circulating on route `i`; throughputs by
/// batch means over the post-warmup window.
pub fn simulate_closed_network(
    topo: &Topology,
    n: &[u64],
    cfg: &SimConfig,
) -> Result<ThroughputEstimate, SimError> {
    cfg.validate(topo)?;
    topo.check_len(n.len())?;
    let routes = topo.route_count();
    let queues = topo.queue_count();
    let mut rng = cfg.rng(STREAM_CLOSED);
    let mut state = PacketState::new(topo);
    for i in 0..routes {
        // Spread packets round-robin over the route to shorten the transient.
        let ks = topo.route_incidences(i);
        for p in 0..n[i] as usize {
            state.inc(ks[p % ks.len()]);
        }
    }
    let warmup = cfg.warmup();
    let width = (cfg.horizon - warmup) / CLOSED_BATCHES as f64;
    let mut counts = vec![vec![0u64; routes]; CLOSED_BATCHES];
    let mut fire = vec![0.0; queues];
    let mut t = 0.0;
    let mut events = 0u64;
    loop {
        state.fire_rates(1.0, &mut fire);
        let total: f64 = fire.iter().sum();
        if total <= 0.0 {
            break;
        }
        t += Exp::new(total).expect("positive rate").sample(&mut rng);
        if t >= cfg.horizon {
            break;
        }
        events += 1;
        if events > cfg.max_events {
            return Err(SimError::EventCap {
                cap: cfg.max_events,
            });
        }
        let j = pick(&mut rng, fire.iter().cloned(), total);
        let k = state.uniform_packet(j, &mut rng);
        let i = topo.incidence(k).route;
        let ks = topo.route_incidences(i);
        let pos = ks
            .iter()
            .position(|&x| x == k)
            .expect("incidence on its route");
        state.dec(k);
        if pos + 1 < ks.len() {
            state.inc(ks[pos + 1]);
        } else {
            state.inc(ks[0]);
            if t >= warmup {
                let b = (((t - warmup) / width) as usize).min(CLOSED_BATCHES - 1);
                counts[b][i] += 1;
            }
        }
    }
    let b = CLOSED_BATCHES as f64;
    let mut throughput = vec![0.0; routes];
    let mut half_width = vec![0.0; routes];
    for i in 0..routes {
        let rates: Vec<f64> = counts.iter().map(|c| c[i] as f64 / width).collect();
        let mean = rates.iter().sum::<f64>() / b;
        let var = rates.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (b - 1.0);
        throughput[i] = mean;
        half_width[i] = CLT_Z * (var / b).sqrt();
    }
    Ok(ThroughputEstimate {
        throughput,
        half_width,
        batches: CLOSED_BATCHES,
        events,
    })
}

/// How [`sample_conditional`] drew its samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplingMode {
    /// Categorical draws over the enumerated fibre.
    Exact,
    /// Metropolis chain moving one packet within its route.
    Chain,
}

fn ln_weight(topo: &Topology, m: &[u64]) -> f64 {
    let mut lw = 0.0;
    for j in 0..topo.queue_count() {
        let ks = topo.queue_incidences(j);
        let mut total = 0u64;
        for &k in ks {
            for t in 1..=m[k] {
                lw += ((total + t) as f64 / t as f64).ln();
            }
            total += m[k];
        }
        lw -= total as f64 * topo.capacity(j).ln();
    }
    lw
}

/// Every packet placement of `S(n)` with its conditional probability given
/// `N = n`, in enumeration order.
pub fn conditional_distribution(
    topo: &Topology,
    n: &[u64],
) -> Result<Vec<(PacketVector<u64>, f64)>, SimError> {
    let states: Vec<PacketVector<u64>> =
        iter_states(topo, n, EXACT_SAMPLING_LIMIT as u64)?.collect();
    let lw: Vec<f64> = states
        .iter()
        .map(|m| ln_weight(topo, m.as_slice()))
        .collect();
    let top = lw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let total: f64 = lw.iter().map(|w| (w - top).exp()).sum();
    Ok(states
        .into_iter()
        .zip(lw)
        .map(|(m, w)| (m, (w - top).exp() / total))
        .collect())
}

/// Draws from the conditional packet distribution given `N = n`.
/// `mode = None` picks exact sampling when the fibre has at most
/// `EXACT_SAMPLING_LIMIT` states.
pub fn sample_conditional(
    topo: &Topology,
    n: &[u64],
    samples: usize,
    mode: Option<SamplingMode>,
    cfg: &SimConfig,
) -> Result<(Vec<PacketVector<u64>>, SamplingMode), SimError> {
    topo.check_len(n.len())?;
    let mut rng = cfg.rng(STREAM_CONDITIONAL);
    let size = state_space_size(topo, n);
    let mode = mode.unwrap_or(if size <= EXACT_SAMPLING_LIMIT {
        SamplingMode::Exact
    } else {
        SamplingMode::Chain
    });
    match mode {
        SamplingMode::Exact => {
            let dist = conditional_distribution(topo, n)?;
            let mut cdf = Vec::with_capacity(dist.len());
            let mut acc = 0.0;
            for (_, p) in &dist {
                acc += p;
                cdf.push(acc);
            }
            let out = (0..samples)
                .map(|_| {
                    let u = rng.gen::<f64>() * acc;
                    let idx = cdf.partition_point(|&c| c <= u).min(dist.len() - 1);
                    dist[idx].0.clone()
                })
                .collect();
            Ok((out, mode))
        }
        SamplingMode::Chain => Ok((metropolis(topo, n, samples, &mut rng), mode)),
    }
}

fn metropolis(
    topo: &Topology,
    n: &[u64],
    samples: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<PacketVector<u64>> {
    let mut state = PacketState::new(topo);
    for (i, &ni) in n.iter().enumerate() {
        let ks = topo.route_incidences(i);
        for p in 0..ni as usize {
            state.inc(ks[p % ks.len()]);
        }
    }
    let movable: Vec<usize> = (0..n.len())
        .filter(|&i| n[i] > 0 && topo.route(i).len() > 1)
        .collect();
    if movable.is_empty() {
        return vec![PacketVector(state.m); samples];
    }
    let packets: u64 = n.iter().sum();
    let thin = 4 * topo.incidence_count();
    let burn = 50 * packets as usize * topo.incidence_count() + 1000;
    let mut step = |state: &mut PacketState| {
        let i = movable[rng.gen_range(0..movable.len())];
        let ks = topo.route_incidences(i);
        let pa = rng.gen_range(0..ks.len());
        let mut pb = rng.gen_range(0..ks.len() - 1);
        if pb >= pa {
            pb += 1;
        }
        let (a, b) = (ks[pa], ks[pb]);
        if state.m[a] == 0 {
            return;
        }
        let ja = topo.incidence(a).queue;
        let jb = topo.incidence(b).queue;
        let ratio = state.m[a] as f64 / state.totals[ja] as f64
            * topo.capacity(ja)
            * (state.totals[jb] + 1) as f64
            / (state.m[b] + 1) as f64
            / topo.capacity(jb);
        if ratio >= 1.0 || rng.gen::<f64>() < ratio {
            state.dec(a);
            state.inc(b);
        }
    };
    for _ in 0..burn {
        step(&mut state);
    }
    (0..samples)
        .map(|_| {
            for _ in 0..thin {
                step(&mut state);
            }
            PacketVector(state.m.clone())
        })
        .collect()
}

/// Runs `f` for replicas `0..replicas` in parallel; results are in replica order.
pub fn run_replicas<T, F>(base: &SimConfig, replicas: u32, f: F) -> Result<Vec<T>, SimError>
where
    T: Send,
    F: Fn(&SimConfig) -> Result<T, SimError> + Sync,
{
    (0..replicas)
        .into_par_iter()
        .map(|r| {
            let mut cfg = base.clone();
            cfg.replica = r;
            f(&cfg)
        })
        .collect()
}
