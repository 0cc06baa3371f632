#![allow(dead_code)]

use pfqn::topology::{Topology, TrafficProfile};
use rand::seq::SliceRandom;
use rand::Rng;

/// Random topology with up to `max_queues` queues and `max_routes` routes.
pub fn random_topology<R: Rng>(rng: &mut R, max_queues: usize, max_routes: usize) -> Topology {
    let queues = rng.gen_range(1..=max_queues);
    let routes = rng.gen_range(1..=max_routes);
    let caps: Vec<f64> = (0..queues).map(|_| rng.gen_range(0.5..3.0)).collect();
    let mut all: Vec<usize> = (0..queues).collect();
    let paths = (0..routes)
        .map(|_| {
            all.shuffle(rng);
            let len = rng.gen_range(1..=queues);
            all[..len].to_vec()
        })
        .collect();
    Topology::new(caps, paths).expect("valid random topology")
}

/// Loads with every queue at most `max_util` utilised.
pub fn stable_loads<R: Rng>(rng: &mut R, topo: &Topology, max_util: f64) -> TrafficProfile {
    let mut rho: Vec<f64> = (0..topo.route_count())
        .map(|_| rng.gen_range(0.1..1.0))
        .collect();
    let worst = (0..topo.queue_count())
        .map(|j| topo.routes_through(j).map(|i| rho[i]).sum::<f64>() / topo.capacity(j))
        .fold(0.0, f64::max);
    let factor = max_util * rng.gen_range(0.3..1.0) / worst;
    rho.iter_mut().for_each(|r| *r *= factor);
    TrafficProfile::from_loads(&rho).expect("positive loads")
}

pub fn linear() -> Topology {
    Topology::linear([1.0, 1.0])
}

/// `max sum theta_i m_i` over `sum rho_i e^theta_i = C`, by gradient ascent on
/// the unconstrained reparametrisation `theta - log(sum rho e^theta / C)`.
pub fn tilted_exponent_numeric(c: f64, rho: &[f64], m: &[f64]) -> f64 {
    let total: f64 = m.iter().sum();
    let mut theta = vec![0.0f64; m.len()];
    let shift =
        |theta: &[f64]| (theta.iter().zip(rho).map(|(t, r)| r * t.exp()).sum::<f64>() / c).ln();
    for _ in 0..20_000 {
        let z: f64 = theta.iter().zip(rho).map(|(t, r)| r * t.exp()).sum();
        for i in 0..m.len() {
            let soft = rho[i] * theta[i].exp() / z;
            theta[i] += (m[i] - total * soft) / total;
        }
    }
    let s = shift(&theta);
    theta.iter().zip(m).map(|(t, mi)| (t - s) * mi).sum()
}

/// `min sum p_i log(p_i C / Lambda_i)` over the simplex, by gradient descent
/// on softmax logits.
pub fn min_relative_entropy_numeric(c: f64, lambda: &[f64]) -> f64 {
    let mut z = vec![0.0f64; lambda.len()];
    let objective = |p: &[f64]| {
        p.iter()
            .zip(lambda)
            .map(|(pi, l)| pi * (pi * c / l).ln())
            .sum::<f64>()
    };
    let softmax = |z: &[f64]| {
        let top = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = z.iter().map(|v| (v - top).exp()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|v| v / s).collect::<Vec<_>>()
    };
    for _ in 0..20_000 {
        let p = softmax(&z);
        let g: Vec<f64> = p
            .iter()
            .zip(lambda)
            .map(|(pi, l)| (pi * c / l).ln() + 1.0)
            .collect();
        let mean: f64 = p.iter().zip(&g).map(|(pi, gi)| pi * gi).sum();
        for i in 0..z.len() {
            z[i] -= 0.5 * p[i] * (g[i] - mean);
        }
    }
    objective(&softmax(&z))
}
