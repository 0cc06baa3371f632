//! Network model: queues with capacities, ordered routes, the queue-route
//! incidence set, traffic parameters, packet vectors and the finite state
//! space `S(n)` of packet placements compatible with document counts `n`.

use std::fmt;

use num_traits::Zero;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default cap on `|S(n)|` for brute-force enumeration.
pub const DEFAULT_STATE_CAP: u64 = 10_000_000;

/// One structural problem found while validating a network description.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TopologyIssue {
    NoRoutes,
    NoQueues,
    EmptyRoute { route: usize },
    DuplicateQueueInRoute { route: usize, queue: usize },
    UnknownQueueIndex { route: usize, queue: usize },
    BadCapacity { queue: usize },
}

impl fmt::Display for TopologyIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TopologyIssue::NoRoutes => write!(f, "network has no routes"),
            TopologyIssue::NoQueues => write!(f, "network has no queues"),
            TopologyIssue::EmptyRoute { route } => write!(f, "route {route} is empty"),
            TopologyIssue::DuplicateQueueInRoute { route, queue } => {
                write!(f, "route {route} visits queue {queue} more than once")
            }
            TopologyIssue::UnknownQueueIndex { route, queue } => {
                write!(f, "route {route} refers to unknown queue {queue}")
            }
            TopologyIssue::BadCapacity { queue } => {
                write!(f, "queue {queue} must have a finite positive capacity")
            }
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TopologyError {
    #[error("invalid network: {}", join_issues(.0))]
    Invalid(Vec<TopologyIssue>),
    #[error("traffic profile: {0}")]
    Traffic(String),
    #[error("document count vector has length {got}, expected {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("state space has {size} states, above the cap of {cap}")]
    StateSpaceTooLarge { size: u128, cap: u64 },
}

fn join_issues(issues: &[TopologyIssue]) -> String {
    issues
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join("; ")
}

/// A queue-route incidence `(j, i)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Incidence {
    pub queue: usize,
    pub route: usize,
}

/// Structured network description with queues referenced by index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawTopology {
    pub capacities: Vec<f64>,
    pub routes: Vec<Vec<usize>>,
}

/// Validated network.
///
/// Incidences are numbered route by route, in route order, so the packet
/// coordinates of a route are contiguous.
#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    capacities: Vec<f64>,
    routes: Vec<Vec<usize>>,
    incidences: Vec<Incidence>,
    route_incidences: Vec<Vec<usize>>,
    queue_incidences: Vec<Vec<usize>>,
}

/// Check a raw description and build the topology, or return every issue found.
pub fn validate_topology(raw: &RawTopology) -> Result<Topology, TopologyError> {
    let mut issues = Vec::new();
    let j_count = raw.capacities.len();
    if j_count == 0 {
        issues.push(TopologyIssue::NoQueues);
    }
    if raw.routes.is_empty() {
        issues.push(TopologyIssue::NoRoutes);
    }
    for (j, &c) in raw.capacities.iter().enumerate() {
        if !(c.is_finite() && c > 0.0) {
            issues.push(TopologyIssue::BadCapacity { queue: j });
        }
    }
    for (i, route) in raw.routes.iter().enumerate() {
        if route.is_empty() {
            issues.push(TopologyIssue::EmptyRoute { route: i });
        }
        let mut seen = vec![false; j_count];
        for &q in route {
            if q >= j_count {
                issues.push(TopologyIssue::UnknownQueueIndex { route: i, queue: q });
                continue;
            }
            if seen[q] {
                issues.push(TopologyIssue::DuplicateQueueInRoute { route: i, queue: q });
            }
            seen[q] = true;
        }
    }
    if !issues.is_empty() {
        return Err(TopologyError::Invalid(issues));
    }

    let mut incidences = Vec::new();
    let mut route_incidences = Vec::with_capacity(raw.routes.len());
    let mut queue_incidences = vec![Vec::new(); j_count];
    for (i, route) in raw.routes.iter().enumerate() {
        let mut ks = Vec::with_capacity(route.len());
        for &j in route {
            let k = incidences.len();
            incidences.push(Incidence { queue: j, route: i });
            queue_incidences[j].push(k);
            ks.push(k);
        }
        route_incidences.push(ks);
    }
    Ok(Topology {
        capacities: raw.capacities.clone(),
        routes: raw.routes.clone(),
        incidences,
        route_incidences,
        queue_incidences,
    })
}

impl Topology {
    pub fn new(capacities: Vec<f64>, routes: Vec<Vec<usize>>) -> Result<Self, TopologyError> {
        validate_topology(&RawTopology { capacities, routes })
    }

    /// One queue of capacity `capacity` shared by `routes` single-hop routes.
    pub fn single_queue(capacity: f64, routes: usize) -> Self {
        Self::new(vec![capacity], vec![vec![0]; routes]).expect("valid single-queue network")
    }

    /// Two queues; route 0 crosses both, routes 1 and 2 use one each.
    pub fn linear(capacities: [f64; 2]) -> Self {
        Self::new(capacities.to_vec(), vec![vec![0, 1], vec![0], vec![1]])
            .expect("valid linear network")
    }

    pub fn queue_count(&self) -> usize {
        self.capacities.len()
    }

    pub fn route_count(&self) -> usize {
        self.routes.len()
    }

    pub fn incidence_count(&self) -> usize {
        self.incidences.len()
    }

    pub fn capacities(&self) -> &[f64] {
        &self.capacities
    }

    pub fn capacity(&self, queue: usize) -> f64 {
        self.capacities[queue]
    }

    /// Queues of route `i` in traversal order.
    pub fn route(&self, i: usize) -> &[usize] {
        &self.routes[i]
    }

    pub fn routes(&self) -> &[Vec<usize>] {
        &self.routes
    }

    pub fn incidences(&self) -> &[Incidence] {
        &self.incidences
    }

    pub fn incidence(&self, k: usize) -> Incidence {
        self.incidences[k]
    }

    /// Incidence indices of route `i`, in route order.
    pub fn route_incidences(&self, i: usize) -> &[usize] {
        &self.route_incidences[i]
    }

    /// Incidence indices at queue `j`, ordered by route.
    pub fn queue_incidences(&self, j: usize) -> &[usize] {
        &self.queue_incidences[j]
    }

    /// Routes through queue `j`, ascending.
    pub fn routes_through(&self, j: usize) -> impl Iterator<Item = usize> + '_ {
        self.queue_incidences[j]
            .iter()
            .map(move |&k| self.incidences[k].route)
    }

    /// Incidence index of `(queue, route)`, if the route visits the queue.
    pub fn incidence_index(&self, queue: usize, route: usize) -> Option<usize> {
        self.route_incidences[route]
            .iter()
            .copied()
            .find(|&k| self.incidences[k].queue == queue)
    }

    pub(crate) fn check_len(&self, len: usize) -> Result<(), TopologyError> {
        if len != self.route_count() {
            return Err(TopologyError::DimensionMismatch {
                expected: self.route_count(),
                got: len,
            });
        }
        Ok(())
    }
}

/// Document size distribution attached to a route.
///
/// All variants are parameterised so that the mean is `1/mu` for the route's
/// `mu`; only the shape is chosen here.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SizeDist {
    #[default]
    Exponential,
    /// `G / c` with `G` geometric on `{1, 2, ...}` with success probability `mu / c`.
    Geometric {
        c: u32,
    },
    Deterministic,
    /// Two-phase hyperexponential with balanced means: phase 1 is taken with
    /// probability `p` and each phase contributes half of the mean.
    Hyperexponential {
        p: f64,
    },
}

impl SizeDist {
    pub fn check(&self, mu: f64) -> Result<(), String> {
        match *self {
            SizeDist::Geometric { c } => {
                if c == 0 || mu > c as f64 {
                    return Err(format!("geometric sizes need c >= mu (c = {c}, mu = {mu})"));
                }
            }
            SizeDist::Hyperexponential { p } => {
                if !(p > 0.0 && p < 1.0) {
                    return Err(format!(
                        "hyperexponential phase probability {p} not in (0,1)"
                    ));
                }
            }
            _ => {}
        }
        Ok(())
    }
}

/// Per-route arrival rates and inverse mean document sizes.
#[derive(Debug, Clone, PartialEq)]
pub struct TrafficProfile {
    nu: Vec<f64>,
    mu: Vec<f64>,
    rho: Vec<f64>,
    size_dist: Vec<SizeDist>,
}

impl TrafficProfile {
    pub fn new(nu: Vec<f64>, mu: Vec<f64>) -> Result<Self, TopologyError> {
        let n = nu.len();
        Self::with_sizes(nu, mu, vec![SizeDist::Exponential; n])
    }

    pub fn with_sizes(
        nu: Vec<f64>,
        mu: Vec<f64>,
        size_dist: Vec<SizeDist>,
    ) -> Result<Self, TopologyError> {
        if nu.len() != mu.len() || nu.len() != size_dist.len() {
            return Err(TopologyError::Traffic(
                "nu, mu and size_dist lengths differ".into(),
            ));
        }
        for (i, (&a, &b)) in nu.iter().zip(&mu).enumerate() {
            if !(a.is_finite() && a >= 0.0) {
                return Err(TopologyError::Traffic(format!(
                    "route {i}: nu must be >= 0"
                )));
            }
            if !(b.is_finite() && b > 0.0) {
                return Err(TopologyError::Traffic(format!("route {i}: mu must be > 0")));
            }
            size_dist[i]
                .check(b)
                .map_err(|e| TopologyError::Traffic(format!("route {i}: {e}")))?;
        }
        let rho = nu.iter().zip(&mu).map(|(a, b)| a / b).collect();
        Ok(Self {
            nu,
            mu,
            rho,
            size_dist,
        })
    }

    /// Traffic with `mu = 1` and `nu = rho`.
    pub fn from_loads(rho: &[f64]) -> Result<Self, TopologyError> {
        Self::new(rho.to_vec(), vec![1.0; rho.len()])
    }

    pub fn nu(&self) -> &[f64] {
        &self.nu
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn rho(&self) -> &[f64] {
        &self.rho
    }

    pub fn size_dist(&self) -> &[SizeDist] {
        &self.size_dist
    }

    pub fn route_count(&self) -> usize {
        self.nu.len()
    }

    pub fn with_size_dist(&self, dist: SizeDist) -> Result<Self, TopologyError> {
        Self::with_sizes(self.nu.clone(), self.mu.clone(), vec![dist; self.nu.len()])
    }

    /// Same arrival rates, every `mu` multiplied by `factor`.
    pub fn with_mu_scaled(&self, factor: f64) -> Result<Self, TopologyError> {
        Self::with_sizes(
            self.nu.clone(),
            self.mu.iter().map(|m| m * factor).collect(),
            self.size_dist.clone(),
        )
    }

    /// Arrival rates scaled by `factor`, sizes unchanged.
    pub fn with_nu_scaled(&self, factor: f64) -> Result<Self, TopologyError> {
        Self::with_sizes(
            self.nu.iter().map(|v| v * factor).collect(),
            self.mu.clone(),
            self.size_dist.clone(),
        )
    }
}

/// Values indexed by incidence: packet counts (`u64`) or masses (`f64`).
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PacketVector<T>(pub Vec<T>);

impl<T> PacketVector<T> {
    pub fn as_slice(&self) -> &[T] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl<T> std::ops::Index<usize> for PacketVector<T> {
    type Output = T;
    fn index(&self, k: usize) -> &T {
        &self.0[k]
    }
}

impl<T: Clone + Zero> PacketVector<T> {
    pub fn zeros(topo: &Topology) -> Self {
        PacketVector(vec![T::zero(); topo.incidence_count()])
    }

    fn sum_over(&self, ks: &[usize]) -> T {
        ks.iter().fold(T::zero(), |acc, &k| acc + self.0[k].clone())
    }

    /// `m_j`, the total at each queue.
    pub fn queue_totals(&self, topo: &Topology) -> Vec<T> {
        (0..topo.queue_count())
            .map(|j| self.sum_over(topo.queue_incidences(j)))
            .collect()
    }

    /// `n_i = sum over j in i of m_ji`.
    pub fn doc_projection(&self, topo: &Topology) -> Vec<T> {
        (0..topo.route_count())
            .map(|i| self.sum_over(topo.route_incidences(i)))
            .collect()
    }

    pub fn get(&self, topo: &Topology, queue: usize, route: usize) -> Option<T> {
        topo.incidence_index(queue, route)
            .map(|k| self.0[k].clone())
    }
}

fn binomial_u128(n: u64, k: u64) -> u128 {
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for t in 1..=k as u128 {
        acc = acc.saturating_mul(n as u128 - k as u128 + t) / t;
    }
    acc
}

/// `|S(n)| = prod_i C(n_i + |i| - 1, |i| - 1)`, saturating.
pub fn state_space_size(topo: &Topology, n: &[u64]) -> u128 {
    (0..topo.route_count())
        .map(|i| {
            let parts = topo.route(i).len() as u64;
            binomial_u128(n[i] + parts - 1, parts - 1)
        })
        .fold(1u128, |a, b| a.saturating_mul(b))
}

/// Advance a weak composition to its lexicographic successor.
fn next_composition(c: &mut [u64]) -> bool {
    let p = c.len();
    let Some(z) = (1..p).rev().find(|&t| c[t] > 0) else {
        return false;
    };
    let t = z - 1;
    let rest: u64 = c[t + 1..].iter().sum();
    c[t] += 1;
    for x in &mut c[t + 1..] {
        *x = 0;
    }
    c[p - 1] = rest - 1;
    true
}

fn first_composition(c: &mut [u64], total: u64) {
    for x in c.iter_mut() {
        *x = 0;
    }
    if let Some(last) = c.last_mut() {
        *last = total;
    }
}

/// Lexicographic iterator over `S(n)`: route 0 is the most significant
/// digit and each route's composition runs in ascending lexicographic order.
pub struct StateIter<'a> {
    topo: &'a Topology,
    n: Vec<u64>,
    current: Vec<u64>,
    done: bool,
}

impl<'a> StateIter<'a> {
    pub fn new(topo: &'a Topology, n: &[u64]) -> Result<Self, TopologyError> {
        topo.check_len(n.len())?;
        let mut current = vec![0; topo.incidence_count()];
        for i in 0..topo.route_count() {
            let ks = topo.route_incidences(i);
            first_composition(&mut current[ks[0]..ks[0] + ks.len()], n[i]);
        }
        Ok(Self {
            topo,
            n: n.to_vec(),
            current,
            done: false,
        })
    }
}

impl Iterator for StateIter<'_> {
    type Item = PacketVector<u64>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        let out = PacketVector(self.current.clone());
        // odometer: last route is the fastest digit
        let mut advanced = false;
        for i in (0..self.topo.route_count()).rev() {
            let ks = self.topo.route_incidences(i);
            let slice = &mut self.current[ks[0]..ks[0] + ks.len()];
            if next_composition(slice) {
                advanced = true;
                break;
            }
            first_composition(slice, self.n[i]);
        }
        if !advanced {
            self.done = true;
        }
        Some(out)
    }
}

/// `S(n)` materialised, refusing spaces above `cap`.
pub fn enumerate_states_capped(
    topo: &Topology,
    n: &[u64],
    cap: u64,
) -> Result<Vec<PacketVector<u64>>, TopologyError> {
    topo.check_len(n.len())?;
    let size = state_space_size(topo, n);
    if size > cap as u128 {
        return Err(TopologyError::StateSpaceTooLarge { size, cap });
    }
    Ok(StateIter::new(topo, n)?.collect())
}

pub fn enumerate_states(
    topo: &Topology,
    n: &[u64],
) -> Result<Vec<PacketVector<u64>>, TopologyError> {
    enumerate_states_capped(topo, n, DEFAULT_STATE_CAP)
}

/// Iterator over `S(n)` after checking the cap, without materialising it.
pub fn iter_states<'a>(
    topo: &'a Topology,
    n: &[u64],
    cap: u64,
) -> Result<StateIter<'a>, TopologyError> {
    topo.check_len(n.len())?;
    let size = state_space_size(topo, n);
    if size > cap as u128 {
        return Err(TopologyError::StateSpaceTooLarge { size, cap });
    }
    StateIter::new(topo, n)
}

/// Per-queue offered load `sum_{i through j} rho_i` and the ergodicity verdict.
#[derive(Debug, Clone, PartialEq)]
pub struct StabilityReport {
    pub loads: Vec<f64>,
    pub stable: bool,
}

pub fn stability_check(topo: &Topology, traffic: &TrafficProfile) -> StabilityReport {
    let rho = traffic.rho();
    let loads: Vec<f64> = (0..topo.queue_count())
        .map(|j| topo.routes_through(j).map(|i| rho[i]).sum())
        .collect();
    let stable = loads
        .iter()
        .zip(topo.capacities())
        .all(|(load, c)| load < c);
    StabilityReport { loads, stable }
}
