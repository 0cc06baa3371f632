//! Proportional fairness and the large-deviations rate functions of the
//! product-form stationary distribution.
//!
//! The proportionally fair allocation maximises `sum_i n_i log Lambda_i`
//! subject to `sum_{i through j} Lambda_i <= C_j`. We solve its dual over
//! queue prices `q >= 0`: for given prices each route takes
//! `Lambda_i(q) = n_i / sum_{j in i} q_j`, and the dual objective
//!
//! ```text
//! g(q) = sum_i [n_i log Lambda_i(q) - s_i(q) Lambda_i(q)] + sum_j q_j C_j
//! ```
//!
//! is convex with gradient `C_j - sum_{i through j} Lambda_i(q)`.
//!
//! The packet-state rate function is
//! `beta_rho(m) = sum_{(j,i): m_j > 0} m_ji log(m_ji C_j / (m_j rho_i))`, and
//! the document-count rate function `alpha_rho(n)` is its minimum over the
//! fibre `{m : route sums = n}`, equal by duality to
//! `sum_i n_i log(Lambda^PF_i(n) / rho_i)`.

use minilp::{ComparisonOp, OptimizationDirection, Problem};
use nalgebra::{DMatrix, DVector};
use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use thiserror::Error;

use crate::productform::Allocation;
use crate::topology::{PacketVector, Topology, TopologyError, TrafficProfile};

/// Target KKT residual for [`solve_pf`].
pub const PF_TOLERANCE: f64 = 1e-8;
/// Iteration cap for [`solve_pf`].
pub const PF_MAX_ITER: usize = 100_000;
/// Relative slack below which a queue counts as saturated.
pub const SATURATION_TOL: f64 = 1e-7;
/// Disagreement between the two primal routes reported as a solver fault.
pub const PRIMAL_CROSS_CHECK_TOL: f64 = 1e-5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FairnessError {
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error("solver stopped after {iterations} iterations with residual {residual:e}")]
    DidNotConverge { iterations: usize, residual: f64 },
    #[error("document counts must be finite and nonnegative")]
    BadCounts,
    #[error("saturated-queue system is singular (residual {residual:e})")]
    NumericallySingular { residual: f64 },
    #[error("primal routes disagree: constructed {constructed}, descent {descent}")]
    SolverFault { constructed: f64, descent: f64 },
    #[error("linear program failed: {0}")]
    Lp(String),
}

/// Which rate function a [`RateValue`] holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RateKind {
    Beta,
    AlphaPrimal,
    AlphaDual,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateValue<F> {
    pub value: F,
    pub kind: RateKind,
}

/// Conditions of the PF program, each as a nonnegative violation.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct KktResiduals {
    /// `max_i |n_i / Lambda_i - sum_{j in i} q_j|` over routes with `n_i > 0`.
    pub stationarity: f64,
    /// `max_j |q_j (C_j - sum Lambda_i)|`.
    pub complementary: f64,
    /// `max_j (sum Lambda_i - C_j)^+`.
    pub primal_infeasibility: f64,
    /// `max_j (-q_j)^+`.
    pub dual_negativity: f64,
    /// `max_i (-Lambda_i)^+`.
    pub allocation_negativity: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        self.stationarity
            .max(self.complementary)
            .max(self.primal_infeasibility)
            .max(self.dual_negativity)
            .max(self.allocation_negativity)
    }
}

pub fn kkt_residuals(topo: &Topology, n: &[f64], alloc: &[f64], q: &[f64]) -> KktResiduals {
    let mut r = KktResiduals::default();
    for i in 0..topo.route_count() {
        r.allocation_negativity = r.allocation_negativity.max(-alloc[i]);
        if n[i] > 0.0 {
            let price: f64 = topo.route(i).iter().map(|&j| q[j]).sum();
            let gap = if alloc[i] > 0.0 {
                (n[i] / alloc[i] - price).abs()
            } else {
                f64::INFINITY
            };
            r.stationarity = r.stationarity.max(gap);
        }
    }
    for j in 0..topo.queue_count() {
        let slack = topo.capacity(j) - topo.routes_through(j).map(|i| alloc[i]).sum::<f64>();
        r.complementary = r.complementary.max((q[j] * slack).abs());
        r.primal_infeasibility = r.primal_infeasibility.max(-slack);
        r.dual_negativity = r.dual_negativity.max(-q[j]);
    }
    r
}

#[derive(Debug, Clone, PartialEq)]
pub struct PfSolution {
    pub allocation: Allocation<f64>,
    /// Queue prices; interpretable as mean packet sojourn times.
    pub q: Vec<f64>,
    /// `sum_{i: n_i > 0} n_i log Lambda_i`.
    pub objective: f64,
    pub kkt: KktResiduals,
    pub iterations: usize,
}

impl PfSolution {
    pub fn lambda(&self) -> &[f64] {
        &self.allocation.lambda
    }

    /// Queues with `C_j - sum Lambda_i <= SATURATION_TOL * C_j`.
    pub fn saturated_queues(&self, topo: &Topology) -> Vec<usize> {
        self.allocation
            .slacks(topo)
            .iter()
            .enumerate()
            .filter(|&(j, &s)| s <= SATURATION_TOL * topo.capacity(j))
            .map(|(j, _)| j)
            .collect()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct PfOptions {
    pub tolerance: f64,
    pub max_iter: usize,
}

impl Default for PfOptions {
    fn default() -> Self {
        PfOptions {
            tolerance: PF_TOLERANCE,
            max_iter: PF_MAX_ITER,
        }
    }
}

fn check_counts(topo: &Topology, n: &[f64]) -> Result<(), FairnessError> {
    topo.check_len(n.len())?;
    if n.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
        return Err(FairnessError::BadCounts);
    }
    Ok(())
}

/// Dual of the PF program for normalised counts.
struct Dual<'a> {
    topo: &'a Topology,
    n: &'a [f64],
}

impl<'a> Dual<'a> {
    fn new(topo: &'a Topology, n: &'a [f64]) -> Self {
        Dual { topo, n }
    }

    fn price(&self, q: &[f64], i: usize) -> f64 {
        self.topo.route(i).iter().map(|&j| q[j]).sum()
    }

    /// `Lambda_i(q) = n_i / s_i(q)`; infinite for a free route.
    fn allocation(&self, q: &[f64]) -> Vec<f64> {
        (0..self.topo.route_count())
            .map(|i| {
                if self.n[i] == 0.0 {
                    return 0.0;
                }
                let s = self.price(q, i);
                if s > 0.0 {
                    self.n[i] / s
                } else {
                    f64::INFINITY
                }
            })
            .collect()
    }

    fn value(&self, q: &[f64]) -> f64 {
        let mut g: f64 = q
            .iter()
            .zip(self.topo.capacities())
            .map(|(a, c)| a * c)
            .sum();
        for i in 0..self.topo.route_count() {
            if self.n[i] > 0.0 {
                let s = self.price(q, i);
                if s <= 0.0 {
                    return f64::INFINITY;
                }
                g += self.n[i] * ((self.n[i] / s).ln() - 1.0);
            }
        }
        g
    }

    fn gradient(&self, lam: &[f64]) -> Vec<f64> {
        (0..self.topo.queue_count())
            .map(|j| {
                self.topo.capacity(j) - self.topo.routes_through(j).map(|i| lam[i]).sum::<f64>()
            })
            .collect()
    }

    fn residual(&self, q: &[f64]) -> f64 {
        kkt_residuals(self.topo, self.n, &self.allocation(q), q).max()
    }

    /// Newton iterations on `C_j = sum_{i through j} n_i / s_i(q)` over the
    /// queues with positive price.
    fn polish(&self, q: &[f64]) -> Option<Vec<f64>> {
        let active: Vec<usize> = (0..q.len()).filter(|&j| q[j] > 0.0).collect();
        if active.is_empty() {
            return None;
        }
        let routes: Vec<usize> = (0..self.topo.route_count())
            .filter(|&i| self.n[i] > 0.0)
            .collect();
        let mut q = q.to_vec();
        let eval = |q: &[f64]| -> Option<(Vec<f64>, DVector<f64>)> {
            let s: Vec<f64> = routes.iter().map(|&i| self.price(q, i)).collect();
            if s.iter().any(|&v| v <= 0.0) {
                return None;
            }
            let r = DVector::from_iterator(
                active.len(),
                active.iter().map(|&j| {
                    let used: f64 = routes
                        .iter()
                        .zip(&s)
                        .filter(|(&i, _)| self.topo.route(i).contains(&j))
                        .map(|(&i, &si)| self.n[i] / si)
                        .sum();
                    self.topo.capacity(j) - used
                }),
            );
            Some((s, r))
        };
        for _ in 0..60 {
            let (s, r) = eval(&q)?;
            if r.amax() < 1e-15 {
                break;
            }
            let a = active.len();
            let mut jac = DMatrix::<f64>::zeros(a, a);
            for (&i, &si) in routes.iter().zip(&s) {
                let w = self.n[i] / (si * si);
                let route = self.topo.route(i);
                for (x, &j) in active.iter().enumerate() {
                    if !route.contains(&j) {
                        continue;
                    }
                    for (y, &l) in active.iter().enumerate() {
                        if route.contains(&l) {
                            jac[(x, y)] += w;
                        }
                    }
                }
            }
            let step = jac.svd(true, true).solve(&(-&r), 1e-13).ok()?;
            let mut t = 1.0;
            let base = r.amax();
            let mut accepted = false;
            while t > 1e-12 {
                let trial: Vec<f64> = q.clone();
                let mut trial = trial;
                let mut positive = true;
                for (x, &j) in active.iter().enumerate() {
                    trial[j] += t * step[x];
                    positive &= trial[j] > 0.0;
                }
                if positive {
                    if let Some((_, rn)) = eval(&trial) {
                        if rn.amax() < base {
                            q = trial;
                            accepted = true;
                            break;
                        }
                    }
                }
                t *= 0.5;
            }
            if !accepted {
                break;
            }
        }
        Some(q)
    }
}

fn project(q: &mut [f64]) {
    for v in q.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Proportionally fair allocation for real document counts `n`.
pub fn solve_pf(topo: &Topology, n: &[f64]) -> Result<PfSolution, FairnessError> {
    solve_pf_with(topo, n, PfOptions::default())
}

pub fn solve_pf_with(
    topo: &Topology,
    n: &[f64],
    opts: PfOptions,
) -> Result<PfSolution, FairnessError> {
    check_counts(topo, n)?;
    let routes = topo.route_count();
    let queues = topo.queue_count();
    let scale = n.iter().cloned().fold(0.0, f64::max);
    if scale == 0.0 {
        return Ok(PfSolution {
            allocation: Allocation::zeros(routes),
            q: vec![0.0; queues],
            objective: 0.0,
            kkt: KktResiduals::default(),
            iterations: 0,
        });
    }
    // Lambda^PF is invariant under scaling n; prices scale with n.
    let unit: Vec<f64> = n.iter().map(|x| x / scale).collect();
    let dual = Dual::new(topo, &unit);

    let mut q: Vec<f64> = (0..queues)
        .map(|j| topo.routes_through(j).map(|i| unit[i]).sum::<f64>() / topo.capacity(j))
        .collect();
    let mut g_val = dual.value(&q);
    let mut grad = dual.gradient(&dual.allocation(&q));
    let mut history = vec![g_val; 10];
    let mut step = 1.0;
    let inner_tol = opts.tolerance / scale.max(1.0) * 0.1;
    let mut iterations = 0;
    let mut best = q.clone();
    let mut best_res = dual.residual(&q);

    while iterations < opts.max_iter {
        iterations += 1;
        let res = dual.residual(&q);
        if res < best_res {
            best_res = res;
            best = q.clone();
        }
        if res <= inner_tol {
            break;
        }
        if iterations % 25 == 0 || res < 1e-6 {
            if let Some(p) = dual.polish(&q) {
                let pr = dual.residual(&p);
                if pr < best_res {
                    best_res = pr;
                    best = p;
                }
                if pr <= inner_tol {
                    break;
                }
            }
        }

        let mut target: Vec<f64> = q.iter().zip(&grad).map(|(a, g)| a - step * g).collect();
        project(&mut target);
        let d: Vec<f64> = target.iter().zip(&q).map(|(a, b)| a - b).collect();
        let slope: f64 = d.iter().zip(&grad).map(|(a, b)| a * b).sum();
        if d.iter().all(|&v| v == 0.0) {
            break;
        }
        let reference = history.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut t = 1.0;
        let mut next;
        loop {
            next = q
                .iter()
                .zip(&d)
                .map(|(a, b)| (a + t * b).max(0.0))
                .collect::<Vec<_>>();
            let v = dual.value(&next);
            if v <= reference + 1e-4 * t * slope || t < 1e-20 {
                g_val = v;
                break;
            }
            t *= 0.5;
        }
        let next_grad = dual.gradient(&dual.allocation(&next));
        let s: Vec<f64> = next.iter().zip(&q).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = next_grad.iter().zip(&grad).map(|(a, b)| a - b).collect();
        let sy: f64 = s.iter().zip(&y).map(|(a, b)| a * b).sum();
        let ss: f64 = s.iter().map(|a| a * a).sum();
        step = if sy > 0.0 {
            (ss / sy).clamp(1e-12, 1e12)
        } else {
            1e3
        };
        history.remove(0);
        history.push(g_val);
        q = next;
        grad = next_grad;
    }
    if dual.residual(&q) < best_res {
        best = q;
    }

    let lambda = dual.allocation(&best);
    let prices: Vec<f64> = best.iter().map(|v| v * scale).collect();
    let kkt = kkt_residuals(topo, n, &lambda, &prices);
    if kkt.max() > opts.tolerance {
        return Err(FairnessError::DidNotConverge {
            iterations,
            residual: kkt.max(),
        });
    }
    let objective = (0..routes)
        .filter(|&i| n[i] > 0.0)
        .map(|i| n[i] * lambda[i].ln())
        .sum();
    Ok(PfSolution {
        allocation: Allocation { lambda },
        q: prices,
        objective,
        kkt,
        iterations,
    })
}

fn to_f<F: Float>(x: f64) -> F {
    F::from(x).expect("representable")
}

/// `x log(x / y)` with `0 log 0 = 0`.
fn xlogx_over<F: Float>(x: F, y: F) -> F {
    if x == F::zero() {
        F::zero()
    } else {
        x * (x / y).ln()
    }
}

/// `beta_rho(m)`; pass `rho_like = 1` for the unweighted rate function.
pub fn beta_rate<F: Float>(topo: &Topology, rho_like: &[F], m: &[F]) -> RateValue<F> {
    let mut total = F::zero();
    for j in 0..topo.queue_count() {
        let ks = topo.queue_incidences(j);
        let m_j = ks.iter().fold(F::zero(), |a, &k| a + m[k]);
        if m_j <= F::zero() {
            continue;
        }
        let c = to_f::<F>(topo.capacity(j));
        for &k in ks {
            let i = topo.incidence(k).route;
            if m[k] > F::zero() {
                total = total + m[k] * ((m[k] / m_j).ln() + (c / rho_like[i]).ln());
            }
        }
    }
    RateValue {
        value: total,
        kind: RateKind::Beta,
    }
}

/// Per-queue split of `beta_rho(m)` into `m_j D(p^j || q^j)` and
/// `m_j log(C_j / sum_{r through j} rho_r)`.
pub fn kl_decompose<F: Float>(topo: &Topology, rho: &[F], m: &[F]) -> Vec<(F, F)> {
    (0..topo.queue_count())
        .map(|j| {
            let ks = topo.queue_incidences(j);
            let m_j = ks.iter().fold(F::zero(), |a, &k| a + m[k]);
            if m_j <= F::zero() {
                return (F::zero(), F::zero());
            }
            let rho_sum = topo.routes_through(j).fold(F::zero(), |a, i| a + rho[i]);
            let mut kl = F::zero();
            for &k in ks {
                let i = topo.incidence(k).route;
                kl = kl + xlogx_over(m[k] / m_j, rho[i] / rho_sum);
            }
            let c = to_f::<F>(topo.capacity(j));
            (m_j * kl, m_j * (c / rho_sum).ln())
        })
        .collect()
}

/// Closed form of `max { sum theta_i m_i : sum rho_i e^{theta_i} = C }`,
/// namely `sum m_i log(m_i C / (m rho_i))`.
pub fn tilted_exponent_value<F: Float>(capacity: F, rho: &[F], m: &[F]) -> F {
    let total = m.iter().fold(F::zero(), |a, &b| a + b);
    m.iter().zip(rho).fold(F::zero(), |acc, (&mi, &r)| {
        acc + xlogx_over(mi, total * r / capacity)
    })
}

/// Closed form of `min_p { sum p_i log(p_i C / Lambda_i) }` over the simplex:
/// value `log(C / sum Lambda)` attained at `p_i = Lambda_i / sum Lambda`.
pub fn min_relative_entropy<F: Float>(capacity: F, lambda: &[F]) -> (F, Vec<F>) {
    let total = lambda.iter().fold(F::zero(), |a, &b| a + b);
    (
        (capacity / total).ln(),
        lambda.iter().map(|&l| l / total).collect(),
    )
}

/// `alpha_rho(n) = sum_{n_i > 0} n_i log(Lambda^PF_i(n) / rho_i)`.
pub fn alpha_dual(
    topo: &Topology,
    traffic: &TrafficProfile,
    n: &[f64],
) -> Result<RateValue<f64>, FairnessError> {
    let pf = solve_pf(topo, n)?;
    Ok(RateValue {
        value: alpha_from_pf(&pf, traffic, n),
        kind: RateKind::AlphaDual,
    })
}

fn alpha_from_pf(pf: &PfSolution, traffic: &TrafficProfile, n: &[f64]) -> f64 {
    n.iter()
        .enumerate()
        .filter(|(_, &x)| x > 0.0)
        .map(|(i, &x)| x * (pf.lambda()[i] / traffic.rho()[i]).ln())
        .sum()
}

/// Result of minimising `beta_rho` over the fibre of `n`.
#[derive(Debug, Clone, PartialEq)]
pub struct AlphaPrimal {
    pub rate: RateValue<f64>,
    /// Minimiser found by mirror descent.
    pub argmin: PacketVector<f64>,
    /// `beta_rho` at the manifold point built from the PF allocation.
    pub constructed: f64,
    /// Certified upper bound on `rate.value - alpha_rho(n)` from the descent.
    pub certified_gap: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct DescentOptions {
    pub max_iter: usize,
    pub gap_tol: f64,
}

impl Default for DescentOptions {
    fn default() -> Self {
        DescentOptions {
            max_iter: 200_000,
            gap_tol: 1e-10,
        }
    }
}

/// Lower bound on `alpha_rho(n)` from the fibre point `m`: the rates
/// `n_i / sum_{l in i} m_l / C_l`, scaled down to feasibility, are
/// dual-feasible.
fn dual_bound(topo: &Topology, rho: &[f64], n: &[f64], m: &[f64]) -> f64 {
    let totals = PacketVector(m.to_vec()).queue_totals(topo);
    let mut lam: Vec<f64> = (0..topo.route_count())
        .map(|i| {
            if n[i] == 0.0 {
                return 0.0;
            }
            let s: f64 = topo
                .route(i)
                .iter()
                .map(|&l| totals[l] / topo.capacity(l))
                .sum();
            n[i] / s
        })
        .collect();
    let worst = (0..topo.queue_count())
        .map(|j| topo.routes_through(j).map(|i| lam[i]).sum::<f64>() / topo.capacity(j))
        .fold(0.0, f64::max);
    if worst > 0.0 {
        lam.iter_mut().for_each(|l| *l /= worst);
    }
    (0..topo.route_count())
        .filter(|&i| n[i] > 0.0)
        .map(|i| n[i] * (lam[i] / rho[i]).ln())
        .sum()
}

/// Mirror descent on the product of scaled simplices. With unit step the
/// multiplicative update is `m_ji <- n_i (m_j / C_j) / sum_{l in i} m_l / C_l`,
/// an alternating minimisation of a jointly convex lift of `beta_rho`, so the
/// objective decreases monotonically.
pub fn minimise_beta_on_fibre(
    topo: &Topology,
    rho: &[f64],
    n: &[f64],
    opts: DescentOptions,
) -> (PacketVector<f64>, f64, f64, usize) {
    let mut m = vec![0.0; topo.incidence_count()];
    for i in 0..topo.route_count() {
        let ks = topo.route_incidences(i);
        for &k in ks {
            m[k] = n[i] / ks.len() as f64;
        }
    }
    let mut iterations = 0;
    let mut value = beta_rate(topo, rho, &m).value;
    let mut gap = value - dual_bound(topo, rho, n, &m);
    while iterations < opts.max_iter && gap > opts.gap_tol * value.abs().max(1.0) {
        iterations += 1;
        let totals = PacketVector(m.clone()).queue_totals(topo);
        for i in 0..topo.route_count() {
            if n[i] == 0.0 {
                continue;
            }
            let ks = topo.route_incidences(i);
            let s: f64 = ks
                .iter()
                .map(|&k| {
                    let j = topo.incidence(k).queue;
                    totals[j] / topo.capacity(j)
                })
                .sum();
            for &k in ks {
                let j = topo.incidence(k).queue;
                m[k] = n[i] * totals[j] / topo.capacity(j) / s;
            }
        }
        if iterations % 8 == 0 || iterations < 8 {
            value = beta_rate(topo, rho, &m).value;
            gap = value - dual_bound(topo, rho, n, &m);
        }
    }
    value = beta_rate(topo, rho, &m).value;
    gap = (value - dual_bound(topo, rho, n, &m)).max(0.0);
    (PacketVector(m), value, gap, iterations)
}

/// `alpha_rho(n)` as the minimum of `beta_rho` over the fibre of `n`,
/// cross-checked against the manifold-point construction.
pub fn alpha_primal(
    topo: &Topology,
    traffic: &TrafficProfile,
    n: &[f64],
) -> Result<AlphaPrimal, FairnessError> {
    check_counts(topo, n)?;
    let rho = traffic.rho();
    if n.iter().all(|&x| x == 0.0) {
        return Ok(AlphaPrimal {
            rate: RateValue {
                value: 0.0,
                kind: RateKind::AlphaPrimal,
            },
            argmin: PacketVector::zeros(topo),
            constructed: 0.0,
            certified_gap: 0.0,
            iterations: 0,
        });
    }
    let (argmin, value, gap, iterations) =
        minimise_beta_on_fibre(topo, rho, n, DescentOptions::default());
    let manifold = Manifold::new(topo, n)?;
    let constructed = beta_rate(topo, rho, manifold.point().m_star.as_slice()).value;
    if (constructed - value).abs() > PRIMAL_CROSS_CHECK_TOL * value.abs().max(1.0) {
        return Err(FairnessError::SolverFault {
            constructed,
            descent: value,
        });
    }
    Ok(AlphaPrimal {
        rate: RateValue {
            value,
            kind: RateKind::AlphaPrimal,
        },
        argmin,
        constructed,
        certified_gap: gap,
        iterations,
    })
}

/// A point of the invariant manifold `M(n)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifoldPoint {
    pub m_star: PacketVector<f64>,
    pub saturated_queues: Vec<usize>,
}

/// `M(n) = {m >= 0 : m_ji C_j = m_j Lambda^PF_i, route sums n}`, parametrised
/// by `x_j = m_j / C_j` on saturated queues: `m_ji = x_j Lambda^PF_i` and
/// `sum_{j in i, saturated} x_j = n_i / Lambda^PF_i`.
#[derive(Debug, Clone)]
pub struct Manifold {
    topo: Topology,
    lambda: Vec<f64>,
    saturated: Vec<usize>,
    /// Routes with `n_i > 0`, the rows of the linear system.
    rows: Vec<usize>,
    rhs: Vec<f64>,
    point: ManifoldPoint,
    x: Vec<f64>,
}

impl Manifold {
    pub fn new(topo: &Topology, n: &[f64]) -> Result<Self, FairnessError> {
        let pf = solve_pf(topo, n)?;
        Self::from_pf(topo, n, &pf)
    }

    pub fn from_pf(topo: &Topology, n: &[f64], pf: &PfSolution) -> Result<Self, FairnessError> {
        check_counts(topo, n)?;
        let lambda = pf.lambda().to_vec();
        let saturated = pf.saturated_queues(topo);
        let rows: Vec<usize> = (0..topo.route_count()).filter(|&i| n[i] > 0.0).collect();
        let rhs: Vec<f64> = rows.iter().map(|&i| n[i] / lambda[i]).collect();
        let a = DMatrix::from_fn(rows.len(), saturated.len(), |r, c| {
            if topo.route(rows[r]).contains(&saturated[c]) {
                1.0
            } else {
                0.0
            }
        });
        let b = DVector::from_vec(rhs.clone());
        let x = if rows.is_empty() {
            vec![0.0; saturated.len()]
        } else {
            min_norm_nonneg(&a, &b)?
        };
        let mut m = vec![0.0; topo.incidence_count()];
        for (c, &j) in saturated.iter().enumerate() {
            for &k in topo.queue_incidences(j) {
                m[k] = x[c] * lambda[topo.incidence(k).route];
            }
        }
        // Route sums of the constructed point are the consistent right-hand side.
        let rhs = rows
            .iter()
            .map(|&i| {
                topo.route(i)
                    .iter()
                    .filter_map(|j| saturated.iter().position(|s| s == j))
                    .map(|c| x[c])
                    .sum()
            })
            .collect();
        Ok(Manifold {
            topo: topo.clone(),
            lambda,
            point: ManifoldPoint {
                m_star: PacketVector(m),
                saturated_queues: saturated.clone(),
            },
            saturated,
            rows,
            rhs,
            x,
        })
    }

    pub fn point(&self) -> &ManifoldPoint {
        &self.point
    }

    pub fn lambda(&self) -> &[f64] {
        &self.lambda
    }

    /// `m_j / C_j` on the saturated queues at the returned point.
    pub fn sojourn_coordinates(&self) -> &[f64] {
        &self.x
    }

    /// `inf_{m' in M(n)} max_k |m_k - m'_k|`, by linear programming.
    pub fn distance(&self, m: &[f64]) -> Result<f64, FairnessError> {
        let topo = &self.topo;
        let mut lp = Problem::new(OptimizationDirection::Minimize);
        let t = lp.add_var(1.0, (0.0, f64::INFINITY));
        let xs: Vec<_> = self
            .saturated
            .iter()
            .map(|_| lp.add_var(0.0, (0.0, f64::INFINITY)))
            .collect();
        for k in 0..topo.incidence_count() {
            let inc = topo.incidence(k);
            let lam = self.lambda[inc.route];
            match self.saturated.iter().position(|&s| s == inc.queue) {
                Some(c) if lam > 0.0 => {
                    // |m_k - x_c lam| <= t
                    lp.add_constraint(&[(xs[c], lam), (t, -1.0)], ComparisonOp::Le, m[k]);
                    lp.add_constraint(&[(xs[c], -lam), (t, -1.0)], ComparisonOp::Le, -m[k]);
                }
                _ => lp.add_constraint(&[(t, 1.0)], ComparisonOp::Ge, m[k].abs()),
            }
        }
        for (&i, &b) in self.rows.iter().zip(&self.rhs) {
            let terms: Vec<_> = topo
                .route(i)
                .iter()
                .filter_map(|j| self.saturated.iter().position(|s| s == j))
                .map(|c| (xs[c], 1.0))
                .collect();
            lp.add_constraint(terms.as_slice(), ComparisonOp::Eq, b);
        }
        let sol = lp.solve().map_err(|e| FairnessError::Lp(e.to_string()))?;
        Ok(sol.objective().max(0.0))
    }
}

/// Point of `M(n)` with minimum-norm saturated-queue coordinates.
pub fn manifold_point(topo: &Topology, n: &[f64]) -> Result<ManifoldPoint, FairnessError> {
    if n.iter().all(|&x| x == 0.0) {
        check_counts(topo, n)?;
        return Ok(ManifoldPoint {
            m_star: PacketVector::zeros(topo),
            saturated_queues: vec![],
        });
    }
    Ok(Manifold::new(topo, n)?.point)
}

pub fn manifold_distance(topo: &Topology, n: &[f64], m: &[f64]) -> Result<f64, FairnessError> {
    Manifold::new(topo, n)?.distance(m)
}

/// `argmin ||x||` subject to `A x = b`, `x >= 0`, by semismooth Newton on the
/// dual `min_y 1/2 ||(A^T y)^+||^2 - b^T y`; the primal is `x = (A^T y)^+`.
fn min_norm_nonneg(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<Vec<f64>, FairnessError> {
    let primal = |y: &DVector<f64>| (a.transpose() * y).map(|v| v.max(0.0));
    let objective = |y: &DVector<f64>| {
        let x = primal(y);
        0.5 * x.norm_squared() - b.dot(y)
    };
    let scale = b.amax().max(1.0);
    let mut y = DVector::zeros(a.nrows());
    for _ in 0..200 {
        let x = primal(&y);
        let grad = a * &x - b;
        if grad.amax() <= 1e-13 * scale {
            break;
        }
        let ay = a.transpose() * &y;
        let active = DMatrix::from_diagonal(&ay.map(|v| if v >= 0.0 { 1.0 } else { 0.0 }));
        let hess = a * active * a.transpose();
        let dir = hess
            .svd(true, true)
            .solve(&(-&grad), 1e-14)
            .unwrap_or_else(|_| -grad.clone());
        let f0 = objective(&y);
        let slope = grad.dot(&dir);
        let (dir, slope) = if slope < 0.0 {
            (dir, slope)
        } else {
            (-grad.clone(), -grad.norm_squared())
        };
        let mut t = 1.0;
        while t > 1e-16 && objective(&(&y + t * &dir)) > f0 + 1e-4 * t * slope {
            t *= 0.5;
        }
        y += t * dir;
    }
    let x = primal(&y);
    let residual = (a * &x - b).amax();
    if residual > 1e-8 * scale {
        return Err(FairnessError::NumericallySingular { residual });
    }
    Ok(x.iter().cloned().collect())
}

#[derive(Debug, Clone, Copy)]
pub struct CollapseOptions {
    pub starts: usize,
    pub refinements: usize,
    pub seed: u64,
}

impl Default for CollapseOptions {
    fn default() -> Self {
        CollapseOptions {
            starts: 64,
            refinements: 40,
            seed: 0x5eed,
        }
    }
}

fn fibre_vertices(topo: &Topology, n: &[f64], limit: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let lens: Vec<usize> = (0..topo.route_count())
        .map(|i| if n[i] > 0.0 { topo.route(i).len() } else { 1 })
        .collect();
    let total = lens.iter().fold(1usize, |a, &b| a.saturating_mul(b));
    let build = |choice: &[usize]| {
        let mut m = vec![0.0; topo.incidence_count()];
        for i in 0..topo.route_count() {
            if n[i] > 0.0 {
                m[topo.route_incidences(i)[choice[i]]] = n[i];
            }
        }
        m
    };
    if total <= limit {
        let mut out = Vec::with_capacity(total);
        let mut choice = vec![0usize; lens.len()];
        'outer: loop {
            out.push(build(&choice));
            for d in (0..lens.len()).rev() {
                choice[d] += 1;
                if choice[d] < lens[d] {
                    continue 'outer;
                }
                choice[d] = 0;
            }
            break;
        }
        out
    } else {
        (0..limit)
            .map(|_| {
                let choice: Vec<usize> = lens.iter().map(|&l| rng.gen_range(0..l)).collect();
                build(&choice)
            })
            .collect()
    }
}

fn random_fibre_point(topo: &Topology, n: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64> {
    let gamma = Gamma::new(1.0, 1.0).expect("valid gamma");
    let mut m = vec![0.0; topo.incidence_count()];
    for i in 0..topo.route_count() {
        let ks = topo.route_incidences(i);
        let w: Vec<f64> = ks.iter().map(|_| gamma.sample(rng)).collect();
        let s: f64 = w.iter().sum();
        for (&k, wk) in ks.iter().zip(w) {
            m[k] = n[i] * wk / s;
        }
    }
    m
}

/// Estimate of `beta*_{eps,0} - alpha_rho(n)`: the extra rate paid by fibre
/// points at sup-norm distance at least `eps` from `M(n)`.
///
/// Along any segment from the manifold point, both the distance and
/// `beta_rho` are convex and vanish/minimise at the start, so the cheapest
/// feasible point on the segment is where the distance first reaches `eps`.
/// Segments towards fibre vertices and random fibre points are searched and
/// then locally perturbed. The result is an upper bound on the true margin
/// up to the local search (the feasible set is not convex). Returns
/// `f64::INFINITY` when no fibre point is `eps` away, which is decided
/// exactly by the vertices because the distance is convex.
pub fn collapse_margin(
    topo: &Topology,
    traffic: &TrafficProfile,
    n: &[f64],
    eps: f64,
    opts: CollapseOptions,
) -> Result<f64, FairnessError> {
    check_counts(topo, n)?;
    if eps <= 0.0 || n.iter().all(|&x| x == 0.0) {
        return Ok(0.0);
    }
    let rho = traffic.rho();
    let manifold = Manifold::new(topo, n)?;
    let centre = manifold.point().m_star.0.clone();
    let alpha = beta_rate(topo, rho, &centre).value;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);

    let vertices = fibre_vertices(topo, n, 4096, &mut rng);
    let mut far = Vec::new();
    let mut max_dist: f64 = 0.0;
    for v in vertices {
        let d = manifold.distance(&v)?;
        max_dist = max_dist.max(d);
        if d >= eps {
            far.push(v);
        }
    }
    if max_dist < eps {
        return Ok(f64::INFINITY);
    }
    for _ in 0..opts.starts {
        let p = random_fibre_point(topo, n, &mut rng);
        if manifold.distance(&p)? >= eps {
            far.push(p);
        }
    }

    let boundary_value = |target: &[f64]| -> Result<f64, FairnessError> {
        let at = |t: f64| -> Vec<f64> {
            centre
                .iter()
                .zip(target)
                .map(|(c, v)| c + t * (v - c))
                .collect()
        };
        let (mut lo, mut hi) = (0.0, 1.0);
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            if manifold.distance(&at(mid))? >= eps {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        Ok(beta_rate(topo, rho, &at(hi)).value)
    };

    let mut scored = Vec::with_capacity(far.len());
    for v in far {
        let val = boundary_value(&v)?;
        scored.push((val, v));
    }
    scored.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut best = scored[0].0;
    for (val, v) in scored.into_iter().take(4) {
        let mut current = (val, v);
        let mut mix = 0.5;
        for _ in 0..opts.refinements {
            let w = random_fibre_point(topo, n, &mut rng);
            let cand: Vec<f64> = current
                .1
                .iter()
                .zip(&w)
                .map(|(a, b)| (1.0 - mix) * a + mix * b)
                .collect();
            if manifold.distance(&cand)? >= eps {
                let cv = boundary_value(&cand)?;
                if cv < current.0 {
                    current = (cv, cand);
                    continue;
                }
            }
            mix *= 0.7;
        }
        best = best.min(current.0);
    }
    Ok((best - alpha).max(0.0))
}
