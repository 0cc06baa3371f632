//! Exact product-form quantities of multi-class processor-sharing networks.
//!
//! The closed-network normalizing constant is
//!
//! ```text
//! B_n = sum_{m in S(n)} prod_j multinomial(m_j; m_ji) prod_{i through j} C_j^{-m_ji}
//! ```
//!
//! and the spinning allocation is `B_{n-e_i} / B_n`. Everything here is
//! generic over [`Scalar`]: use `f64` for speed, `BigRational` for exact
//! answers.
//!
//! [`bn_table`] computes every `B_n` in a box by convolution. Each queue
//! contributes the generating function `1 / (1 - sum_{i through j} x_i / C_j)`,
//! so after processing queues `1..=k` in order,
//!
//! ```text
//! G_k(n) = G_{k-1}(n) + sum_{i through k} G_k(n - e_i) / C_k
//! ```
//!
//! with `G_0` the indicator of `n = 0`. [`bn_bruteforce`] sums over `S(n)`
//! directly and is the oracle the table is checked against.

use thiserror::Error;

use crate::scalar::{multinomial, pow_count, Scalar};
use crate::topology::{
    iter_states, PacketVector, Topology, TopologyError, TrafficProfile, DEFAULT_STATE_CAP,
};

/// Default cap on the number of entries in a [`NormalizingTable`].
pub const DEFAULT_TABLE_CAP: u64 = 50_000_000;

/// Absolute tolerance on capacity slacks in [`check_feasibility`].
pub const FEASIBILITY_TOL: f64 = 1e-9;

/// Binary exponent bound outside which the table offset is rechosen.
const RESCALE_EXPONENT: i64 = 512;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProductFormError {
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error("normalizing table would hold {entries} entries, above the cap of {cap}")]
    TableTooLarge { entries: u128, cap: u64 },
    #[error("queue {queue} has load {load} >= capacity {capacity}")]
    UnstableNetwork {
        queue: usize,
        load: f64,
        capacity: f64,
    },
    #[error("packet vector is not in S(n)")]
    StateNotInSn,
    #[error("normalizing table does not cover {0:?}")]
    TableMiss(Vec<u64>),
    #[error("normalizing constants left the representable range")]
    NumericRange,
}

/// `B_n` for every `0 <= n <= n_max`.
///
/// Float-backed tables store `B_n * prod_i 2^{tilt_i n_i} / 2^offset`. The
/// per-route tilt is a power of two close to the route's bottleneck share,
/// which keeps entries polynomial rather than exponential in `n`; both the
/// tilt and the offset are exact in binary and cancel in every ratio.
#[derive(Debug, Clone)]
pub struct NormalizingTable<S> {
    n_max: Vec<u64>,
    strides: Vec<usize>,
    values: Vec<S>,
    tilt: Vec<i64>,
    offset: i64,
}

impl<S: Scalar> NormalizingTable<S> {
    pub fn n_max(&self) -> &[u64] {
        &self.n_max
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Shared exponent of the stored values.
    pub fn offset(&self) -> i64 {
        self.offset
    }

    /// Per-route binary tilt exponents.
    pub fn tilt(&self) -> &[i64] {
        &self.tilt
    }

    /// `e` such that `B_n = scaled(n) * 2^e`.
    pub fn exponent(&self, n: &[u64]) -> i64 {
        self.offset
            - n.iter()
                .zip(&self.tilt)
                .map(|(&a, &t)| a as i64 * t)
                .sum::<i64>()
    }

    pub fn covers(&self, n: &[u64]) -> bool {
        n.len() == self.n_max.len() && n.iter().zip(&self.n_max).all(|(a, b)| a <= b)
    }

    fn flat(&self, n: &[u64]) -> Option<usize> {
        if !self.covers(n) {
            return None;
        }
        Some(
            n.iter()
                .zip(&self.strides)
                .map(|(&a, &s)| a as usize * s)
                .sum(),
        )
    }

    /// Stored mantissa of `B_n`; see [`NormalizingTable::exponent`].
    pub fn scaled(&self, n: &[u64]) -> Option<&S> {
        self.flat(n).map(|k| &self.values[k])
    }

    /// `B_n` itself. For floats this may overflow where `scaled` does not.
    pub fn get(&self, n: &[u64]) -> Option<S> {
        self.scaled(n).map(|v| v.scale_pow2(self.exponent(n)))
    }

    /// `B_a / B_b` without forming either constant.
    pub fn ratio(&self, a: &[u64], b: &[u64]) -> Option<S> {
        let r = self.scaled(a)?.clone() / self.scaled(b)?.clone();
        Some(r.scale_pow2(self.exponent(a) - self.exponent(b)))
    }

    /// Natural log of `B_n` for float-backed tables.
    pub fn ln_value(&self, n: &[u64]) -> Option<f64> {
        self.scaled(n)
            .map(|v| v.to_real().ln() + self.exponent(n) as f64 * std::f64::consts::LN_2)
    }

    fn rescale(&mut self, by: i64) {
        for v in &mut self.values {
            *v = v.scale_pow2(by);
        }
        self.offset -= by;
    }
}

/// Weight of one packet placement in the closed network:
/// `prod_j multinomial(m_j; m_ji) prod_{i through j} C_j^{-m_ji}`.
pub fn state_weight<S: Scalar>(topo: &Topology, m: &PacketVector<u64>) -> S {
    weight_with(topo, m, |j, _| S::one() / S::from_real(topo.capacity(j)))
}

fn weight_with<S: Scalar>(
    topo: &Topology,
    m: &PacketVector<u64>,
    factor: impl Fn(usize, usize) -> S,
) -> S {
    let mut w = S::one();
    for j in 0..topo.queue_count() {
        let ks = topo.queue_incidences(j);
        w = w * multinomial::<S>(ks.iter().map(|&k| m[k]));
        for &k in ks {
            let route = topo.incidence(k).route;
            w = w * pow_count(&factor(j, route), m[k]);
        }
    }
    w
}

fn is_in_sn(topo: &Topology, n: &[u64], m: &PacketVector<u64>) -> bool {
    m.len() == topo.incidence_count() && m.doc_projection(topo) == n
}

/// `B_n` by summing over `S(n)`.
pub fn bn_bruteforce<S: Scalar>(topo: &Topology, n: &[u64]) -> Result<S, ProductFormError> {
    let mut total = S::zero();
    for m in iter_states(topo, n, DEFAULT_STATE_CAP)? {
        total = total + state_weight::<S>(topo, &m);
    }
    Ok(total)
}

pub fn bn_table<S: Scalar>(
    topo: &Topology,
    n_max: &[u64],
) -> Result<NormalizingTable<S>, ProductFormError> {
    bn_table_capped(topo, n_max, DEFAULT_TABLE_CAP)
}

/// Table entry count `prod_i (n_max_i + 1)`, saturating.
pub fn table_entries(n_max: &[u64]) -> u128 {
    n_max
        .iter()
        .fold(1u128, |a, &b| a.saturating_mul(b as u128 + 1))
}

pub fn bn_table_capped<S: Scalar>(
    topo: &Topology,
    n_max: &[u64],
    cap: u64,
) -> Result<NormalizingTable<S>, ProductFormError> {
    topo.check_len(n_max.len())?;
    let entries = table_entries(n_max);
    if entries > cap as u128 {
        return Err(ProductFormError::TableTooLarge { entries, cap });
    }
    let dims = n_max.len();
    let mut strides = vec![1usize; dims];
    for i in (0..dims.saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * (n_max[i + 1] as usize + 1);
    }
    let len = entries as usize;
    let mut values = vec![S::zero(); len];
    values[0] = S::one();
    let tilt = if S::one().binary_exponent().is_some() {
        route_tilts(topo)
    } else {
        vec![0; dims]
    };
    let mut table = NormalizingTable {
        n_max: n_max.to_vec(),
        strides,
        values,
        tilt,
        offset: 0,
    };

    let mut digits = vec![0u64; dims];
    for j in 0..topo.queue_count() {
        let inv_c = S::one() / S::from_real(topo.capacity(j));
        let routes: Vec<usize> = topo.routes_through(j).collect();
        let factors: Vec<S> = (0..dims).map(|i| inv_c.scale_pow2(table.tilt[i])).collect();
        digits.iter_mut().for_each(|d| *d = 0);
        for flat in 0..len {
            if flat > 0 {
                // lexicographic successor of `digits`, last route fastest
                for i in (0..dims).rev() {
                    if digits[i] < n_max[i] {
                        digits[i] += 1;
                        break;
                    }
                    digits[i] = 0;
                }
            }
            let mut inflow = S::zero();
            for &i in &routes {
                if digits[i] > 0 {
                    inflow =
                        inflow + table.values[flat - table.strides[i]].clone() * factors[i].clone();
                }
            }
            if inflow.is_zero() {
                continue;
            }
            let v = table.values[flat].clone() + inflow;
            let too_big = v.binary_exponent().is_some_and(|e| e > RESCALE_EXPONENT);
            table.values[flat] = v;
            if too_big {
                let e = table.values[flat].binary_exponent().unwrap_or(0);
                table.rescale(-e);
            }
        }
    }

    // keep the largest entry near 2^0 when it drifted out of range
    if let Some(e) = table
        .values
        .iter()
        .filter_map(|v| v.binary_exponent())
        .max()
    {
        if !(-RESCALE_EXPONENT..=RESCALE_EXPONENT).contains(&e) {
            table.rescale(-e);
        }
    }
    let float_backed = S::one().binary_exponent().is_some();
    let bad = |v: &S| !(*v > S::zero()) || (float_backed && !v.to_real().is_finite());
    if table.values.iter().any(bad) {
        return Err(ProductFormError::NumericRange);
    }
    Ok(table)
}

/// `floor(log2(min_{j in i} C_j / deg_j))` per route, `deg_j` the number of
/// routes through queue `j`.
fn route_tilts(topo: &Topology) -> Vec<i64> {
    (0..topo.route_count())
        .map(|i| {
            let share = topo
                .route(i)
                .iter()
                .map(|&j| topo.capacity(j) / topo.queue_incidences(j).len() as f64)
                .fold(f64::INFINITY, f64::min);
            share.log2().floor() as i64
        })
        .collect()
}

fn unstable_queue(topo: &Topology, traffic: &TrafficProfile) -> Option<ProductFormError> {
    let report = crate::topology::stability_check(topo, traffic);
    report
        .loads
        .iter()
        .enumerate()
        .find(|&(j, &load)| load >= topo.capacity(j))
        .map(|(j, &load)| ProductFormError::UnstableNetwork {
            queue: j,
            load,
            capacity: topo.capacity(j),
        })
}

/// `B = prod_j C_j / (C_j - sum_{i through j} rho_i)` for a stable network.
pub fn open_normalizer<S: Scalar>(
    topo: &Topology,
    traffic: &TrafficProfile,
) -> Result<S, ProductFormError> {
    topo.check_len(traffic.route_count())?;
    if let Some(e) = unstable_queue(topo, traffic) {
        return Err(e);
    }
    let rho = traffic.rho();
    let mut b = S::one();
    for j in 0..topo.queue_count() {
        let c = S::from_real(topo.capacity(j));
        let mut load = S::zero();
        for i in topo.routes_through(j) {
            load = load + S::from_real(rho[i]);
        }
        b = b * (c.clone() / (c - load));
    }
    Ok(b)
}

/// Stationary probability of packet vector `m` in the open network.
pub fn open_packet_pmf<S: Scalar>(
    topo: &Topology,
    traffic: &TrafficProfile,
    m: &PacketVector<u64>,
) -> Result<S, ProductFormError> {
    let b = open_normalizer::<S>(topo, traffic)?;
    if m.len() != topo.incidence_count() {
        return Err(ProductFormError::StateNotInSn);
    }
    let rho = traffic.rho();
    let w = weight_with(topo, m, |j, i| {
        S::from_real(rho[i]) / S::from_real(topo.capacity(j))
    });
    Ok(w / b)
}

/// `P(N = n) = (B_n / B) prod_i rho_i^{n_i}`, reading `B_n` from `table`.
pub fn doc_pmf_with_table<S: Scalar>(
    table: &NormalizingTable<S>,
    traffic: &TrafficProfile,
    open_b: &S,
    n: &[u64],
) -> Result<S, ProductFormError> {
    let scaled = table
        .scaled(n)
        .ok_or_else(|| ProductFormError::TableMiss(n.to_vec()))?;
    let mut v = scaled.clone();
    for (&k, &r) in n.iter().zip(traffic.rho()) {
        v = v * pow_count(&S::from_real(r), k);
    }
    Ok(v.scale_pow2(table.exponent(n)) / open_b.clone())
}

/// Stationary distribution of document counts.
pub fn doc_pmf<S: Scalar>(
    topo: &Topology,
    traffic: &TrafficProfile,
    n: &[u64],
) -> Result<S, ProductFormError> {
    let b = open_normalizer::<S>(topo, traffic)?;
    let table = bn_table::<S>(topo, n)?;
    doc_pmf_with_table(&table, traffic, &b, n)
}

/// Conditional distribution of packet placements given `N = n`.
pub fn closed_conditional_pmf<S: Scalar>(
    topo: &Topology,
    n: &[u64],
    m: &PacketVector<u64>,
) -> Result<S, ProductFormError> {
    topo.check_len(n.len())?;
    if !is_in_sn(topo, n, m) {
        return Err(ProductFormError::StateNotInSn);
    }
    let table = bn_table::<S>(topo, n)?;
    Ok(
        state_weight::<S>(topo, m).scale_pow2(-table.exponent(n))
            / table.scaled(n).unwrap().clone(),
    )
}

/// Per-route transfer rates `Lambda_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct Allocation<S> {
    pub lambda: Vec<S>,
}

impl<S: Scalar> Allocation<S> {
    pub fn zeros(routes: usize) -> Self {
        Allocation {
            lambda: vec![S::zero(); routes],
        }
    }

    /// `C_j - sum_{i through j} Lambda_i`.
    pub fn slacks(&self, topo: &Topology) -> Vec<S> {
        (0..topo.queue_count())
            .map(|j| {
                topo.routes_through(j)
                    .fold(S::from_real(topo.capacity(j)), |acc, i| {
                        acc - self.lambda[i].clone()
                    })
            })
            .collect()
    }

    pub fn to_f64(&self) -> Allocation<f64> {
        Allocation {
            lambda: self.lambda.iter().map(Scalar::to_real).collect(),
        }
    }
}

/// `Lambda_i = B_{n - e_i} / B_n` where `n_i > 0`, else 0.
pub fn spinning_allocation<S: Scalar>(
    topo: &Topology,
    n: &[u64],
    table: &NormalizingTable<S>,
) -> Result<Allocation<S>, ProductFormError> {
    topo.check_len(n.len())?;
    let miss = || ProductFormError::TableMiss(n.to_vec());
    let denom = table.scaled(n).ok_or_else(miss)?.clone();
    let mut lambda = Vec::with_capacity(n.len());
    let mut below = n.to_vec();
    for i in 0..n.len() {
        if n[i] == 0 {
            lambda.push(S::zero());
            continue;
        }
        below[i] -= 1;
        let num = table.scaled(&below).ok_or_else(miss)?.clone();
        below[i] += 1;
        lambda.push((num / denom.clone()).scale_pow2(table.tilt[i]));
    }
    Ok(Allocation { lambda })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeasibilityReport {
    pub slacks: Vec<f64>,
    pub feasible: bool,
}

/// Feasible iff every slack is at least `-FEASIBILITY_TOL`.
pub fn check_feasibility<S: Scalar>(topo: &Topology, alloc: &Allocation<S>) -> FeasibilityReport {
    let tol = S::zero() - S::from_real(FEASIBILITY_TOL);
    let slacks = alloc.slacks(topo);
    let feasible = alloc.lambda.len() == topo.route_count() && slacks.iter().all(|s| *s >= tol);
    FeasibilityReport {
        slacks: slacks.iter().map(Scalar::to_real).collect(),
        feasible,
    }
}

/// `E_n[M_ji]` under the closed-network distribution, by enumeration.
pub fn conditional_mean_packets<S: Scalar>(
    topo: &Topology,
    n: &[u64],
) -> Result<PacketVector<S>, ProductFormError> {
    let mut total = S::zero();
    let mut acc = vec![S::zero(); topo.incidence_count()];
    for m in iter_states(topo, n, DEFAULT_STATE_CAP)? {
        let w = state_weight::<S>(topo, &m);
        for (a, &c) in acc.iter_mut().zip(m.as_slice()) {
            if c > 0 {
                *a = a.clone() + w.clone() * S::from_count(c);
            }
        }
        total = total + w;
    }
    Ok(PacketVector(
        acc.into_iter().map(|a| a / total.clone()).collect(),
    ))
}

/// Little's-law residual per incidence:
/// `Lambda_i(n) E[(M_j + 1)/C_j | N = n - e_i] - E_n[M_ji]`.
///
/// `None` for incidences of routes with `n_i = 0`.
pub fn little_identity_residual<S: Scalar>(
    topo: &Topology,
    n: &[u64],
    table: &NormalizingTable<S>,
) -> Result<Vec<Option<S>>, ProductFormError> {
    let alloc = spinning_allocation(topo, n, table)?;
    let mean_n = conditional_mean_packets::<S>(topo, n)?;
    let mut out = vec![None; topo.incidence_count()];
    let mut below = n.to_vec();
    for i in 0..topo.route_count() {
        if n[i] == 0 {
            continue;
        }
        below[i] -= 1;
        let mean_below = conditional_mean_packets::<S>(topo, &below)?;
        below[i] += 1;
        for &k in topo.route_incidences(i) {
            let j = topo.incidence(k).queue;
            let m_j = topo
                .queue_incidences(j)
                .iter()
                .fold(S::zero(), |acc, &kk| acc + mean_below[kk].clone());
            let sojourn = (m_j + S::one()) / S::from_real(topo.capacity(j));
            out[k] = Some(alloc.lambda[i].clone() * sojourn - mean_n[k].clone());
        }
    }
    Ok(out)
}
