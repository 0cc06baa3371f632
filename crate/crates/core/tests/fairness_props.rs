mod common;

use pfqn::fairness::{
    alpha_dual, alpha_primal, beta_rate, collapse_margin, manifold_point, min_relative_entropy,
    solve_pf, tilted_exponent_value, CollapseOptions, PF_TOLERANCE,
};
use pfqn::topology::{PacketVector, Topology, TrafficProfile};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_counts<R: Rng>(rng: &mut R, topo: &Topology) -> Vec<f64> {
    (0..topo.route_count())
        .map(|_| rng.gen_range(0.01..5.0))
        .collect()
}

#[test]
fn pf_and_duality_on_random_networks() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..300 {
        let topo = common::random_topology(&mut rng, 4, 5);
        let traffic = common::stable_loads(&mut rng, &topo, 0.95);
        let mut n = random_counts(&mut rng, &topo);
        if rng.gen_bool(0.2) {
            n[0] = 0.0;
        }
        let pf = solve_pf(&topo, &n).unwrap_or_else(|e| panic!("{e:?} {topo:?} {n:?}"));
        assert!(pf.kkt.max() <= PF_TOLERANCE);
        let d = alpha_dual(&topo, &traffic, &n).unwrap().value;
        let p = alpha_primal(&topo, &traffic, &n).unwrap();
        assert!(
            (p.rate.value - d).abs() <= 1e-6,
            "{topo:?} {n:?} {} {d}",
            p.rate.value
        );
    }
}

#[test]
fn primal_minimiser_lies_on_the_invariant_manifold() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..100 {
        let topo = common::random_topology(&mut rng, 4, 5);
        let traffic = common::stable_loads(&mut rng, &topo, 0.9);
        let n = random_counts(&mut rng, &topo);
        let lam = solve_pf(&topo, &n).unwrap().allocation.lambda;
        let p = alpha_primal(&topo, &traffic, &n).unwrap();
        let totals = p.argmin.queue_totals(&topo);
        for k in 0..topo.incidence_count() {
            let inc = topo.incidence(k);
            let r = p.argmin[k] * topo.capacity(inc.queue) - totals[inc.queue] * lam[inc.route];
            assert!(r.abs() <= 1e-6, "residual {r}");
        }
    }
}

#[test]
fn beta_is_convex() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut checked = 0;
    while checked < 10_000 {
        let topo = common::random_topology(&mut rng, 4, 5);
        let rho: Vec<f64> = (0..topo.route_count())
            .map(|_| rng.gen_range(0.05..2.0))
            .collect();
        let draw = |rng: &mut ChaCha8Rng| -> Vec<f64> {
            (0..topo.incidence_count())
                .map(|_| {
                    if rng.gen_bool(0.2) {
                        0.0
                    } else {
                        rng.gen_range(0.0..5.0)
                    }
                })
                .collect()
        };
        for _ in 0..50 {
            let a = draw(&mut rng);
            let b = draw(&mut rng);
            let t: f64 = rng.gen_range(0.0..1.0);
            let mid: Vec<f64> = a
                .iter()
                .zip(&b)
                .map(|(x, y)| t * x + (1.0 - t) * y)
                .collect();
            let lhs = beta_rate(&topo, &rho, &mid).value;
            let rhs =
                t * beta_rate(&topo, &rho, &a).value + (1.0 - t) * beta_rate(&topo, &rho, &b).value;
            assert!(lhs <= rhs + 1e-10, "{lhs} > {rhs}");
            checked += 1;
        }
    }
}

#[test]
fn closed_forms_match_numeric_optimisation() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for _ in 0..50 {
        let k = rng.gen_range(1..5);
        let c = rng.gen_range(0.5..3.0);
        let rho: Vec<f64> = (0..k).map(|_| rng.gen_range(0.1..2.0)).collect();
        let m: Vec<f64> = (0..k).map(|_| rng.gen_range(0.1..3.0)).collect();
        let closed = tilted_exponent_value(c, &rho, &m);
        assert!((closed - common::tilted_exponent_numeric(c, &rho, &m)).abs() <= 1e-8);
        let (v, _) = min_relative_entropy(c, &rho);
        assert!((v - common::min_relative_entropy_numeric(c, &rho)).abs() <= 1e-8);
    }
}

#[test]
fn beta_with_feasible_rates_is_nonnegative_and_unbounded_otherwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    for _ in 0..50 {
        let topo = common::random_topology(&mut rng, 3, 4);
        let feasible = common::stable_loads(&mut rng, &topo, 0.999);
        let lam = feasible.rho().to_vec();
        let mut best = f64::INFINITY;
        for _ in 0..2_000 {
            let m: Vec<f64> = (0..topo.incidence_count())
                .map(|_| rng.gen_range(0.0..10.0))
                .collect();
            best = best.min(beta_rate(&topo, &lam, &m).value);
        }
        assert!(best >= -1e-6);

        // push a used queue over capacity and load it along the violating direction
        let j = topo.incidence(0).queue;
        let load: f64 = topo.routes_through(j).map(|i| lam[i]).sum();
        let factor = 1.5 * topo.capacity(j) / load;
        let over: Vec<f64> = lam.iter().map(|l| l * factor).collect();
        let mut previous = f64::INFINITY;
        for scale in [1.0, 10.0, 100.0, 1000.0] {
            let mut m = vec![0.0; topo.incidence_count()];
            for &k in topo.queue_incidences(j) {
                m[k] = scale * over[topo.incidence(k).route];
            }
            let v = beta_rate(&topo, &over, &m).value;
            assert!(v < previous && v < 0.0);
            previous = v;
        }
        assert!(previous < -100.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pf_and_alpha_scale_with_counts(seed in any::<u64>(), h in 0.1f64..50.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let topo = common::random_topology(&mut rng, 4, 5);
        let traffic = common::stable_loads(&mut rng, &topo, 0.9);
        let n = random_counts(&mut rng, &topo);
        let hn: Vec<f64> = n.iter().map(|x| x * h).collect();
        let a = solve_pf(&topo, &n).unwrap();
        let b = solve_pf(&topo, &hn).unwrap();
        for (x, y) in a.lambda().iter().zip(b.lambda()) {
            prop_assert!((x - y).abs() <= 1e-8);
        }
        let alpha = alpha_dual(&topo, &traffic, &n).unwrap().value;
        let alpha_h = alpha_dual(&topo, &traffic, &hn).unwrap().value;
        prop_assert!((alpha_h - h * alpha).abs() <= 1e-8 * (1.0 + alpha_h.abs()));
    }

    #[test]
    fn rho_rescaling_shifts_alpha(seed in any::<u64>(), s in 0.1f64..0.99) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let topo = common::random_topology(&mut rng, 4, 5);
        let traffic = common::stable_loads(&mut rng, &topo, 0.9);
        let scaled = TrafficProfile::from_loads(&traffic.rho().iter().map(|r| r * s).collect::<Vec<_>>()).unwrap();
        let n = random_counts(&mut rng, &topo);
        let shift: f64 = n.iter().map(|x| x * s.ln()).sum();
        let a = alpha_dual(&topo, &traffic, &n).unwrap().value;
        let b = alpha_dual(&topo, &scaled, &n).unwrap().value;
        prop_assert!((a - shift - b).abs() <= 1e-9 * (1.0 + a.abs()));
        let m: Vec<f64> = (0..topo.incidence_count()).map(|_| rng.gen_range(0.0..3.0)).collect();
        let packets: f64 = m.iter().sum();
        let ba = beta_rate(&topo, traffic.rho(), &m).value;
        let bb = beta_rate(&topo, scaled.rho(), &m).value;
        prop_assert!((ba - packets * s.ln() - bb).abs() <= 1e-9 * (1.0 + ba.abs()));
    }

    #[test]
    fn beta_is_homogeneous(seed in any::<u64>(), h in 0.1f64..20.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let topo = common::random_topology(&mut rng, 4, 5);
        let rho: Vec<f64> = (0..topo.route_count()).map(|_| rng.gen_range(0.1..1.0)).collect();
        let m: Vec<f64> = (0..topo.incidence_count()).map(|_| rng.gen_range(0.0..3.0)).collect();
        let hm: Vec<f64> = m.iter().map(|x| x * h).collect();
        let a = beta_rate(&topo, &rho, &m).value;
        let b = beta_rate(&topo, &rho, &hm).value;
        prop_assert!((b - h * a).abs() <= 1e-9 * (1.0 + b.abs()));
    }

    #[test]
    fn manifold_point_has_fibre_sums(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let topo = common::random_topology(&mut rng, 4, 5);
        let n = random_counts(&mut rng, &topo);
        let mp = manifold_point(&topo, &n).unwrap();
        let proj = PacketVector(mp.m_star.0.clone()).doc_projection(&topo);
        for (a, b) in proj.iter().zip(&n) {
            prop_assert!((a - b).abs() <= 1e-8 * (1.0 + b));
        }
        prop_assert!(mp.m_star.as_slice().iter().all(|&x| x >= 0.0));
    }
}

#[test]
fn collapse_margin_matches_grid_on_linear_network() {
    let topo = common::linear();
    let traffic = TrafficProfile::from_loads(&[0.25; 3]).unwrap();
    let n = [1.0; 3];
    let alpha = alpha_dual(&topo, &traffic, &n).unwrap().value;
    for eps in [0.05, 0.25, 0.4] {
        // fibre: (t, 1 - t, 1, 1); distance to the manifold is |t - 1/2|
        let steps = 200_000;
        let grid = (0..=steps)
            .map(|s| s as f64 / steps as f64)
            .filter(|t| (t - 0.5).abs() >= eps)
            .map(|t| beta_rate(&topo, traffic.rho(), &[t, 1.0 - t, 1.0, 1.0]).value)
            .fold(f64::INFINITY, f64::min)
            - alpha;
        let est = collapse_margin(&topo, &traffic, &n, eps, CollapseOptions::default()).unwrap();
        assert!((est - grid).abs() <= 1e-6, "eps {eps}: {est} vs {grid}");
    }
    let far = collapse_margin(&topo, &traffic, &n, 0.6, CollapseOptions::default()).unwrap();
    assert!(far.is_infinite());
}
