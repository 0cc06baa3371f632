//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fail.

mod common;

use std::process::ExitCode;
use std::time::Instant;

use num_traits::ToPrimitive;
use pfqn::experiments::{self, Cell, ExperimentKind, ExperimentSpec, Params};
use pfqn::fairness::{
    alpha_dual, alpha_primal, beta_rate, manifold_point, min_relative_entropy, solve_pf,
    tilted_exponent_value,
};
use pfqn::productform::{
    bn_bruteforce, bn_table, check_feasibility, little_identity_residual, spinning_allocation,
};
use pfqn::scalar::rel_diff;
use pfqn::simulate::{
    empirical_tv_distance, exact_doc_pmf, simulate_closed_network, simulate_flow_level,
    simulate_flow_level_general_sizes, simulate_open_packet, AllocationSource, Pmf, SimConfig,
};
use pfqn::topology::{SizeDist, Topology, TrafficProfile};
use pfqn::BigRational;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const LINEAR: &str = include_str!("../../../networks/linear.json");

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn oracle_equivalence() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    let instances = 250;
    for _ in 0..instances {
        let topo = common::random_topology(&mut rng, 3, 3);
        let n: Vec<u64> = (0..topo.route_count())
            .map(|_| rng.gen_range(0..=5))
            .collect();
        let table = bn_table::<f64>(&topo, &n).map_err(|e| e.to_string())?;
        let exact = bn_bruteforce::<BigRational>(&topo, &n).map_err(|e| e.to_string())?;
        worst = worst.max(rel_diff(table.get(&n).unwrap(), exact.to_f64().unwrap()));
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        worst <= 1e-12 && secs < 10.0,
        format!("{instances} instances, worst rel err {worst:.2e}, {secs:.2}s"),
    )
}

fn hand_constants() -> Outcome {
    let topo = common::linear();
    let n = [1u64, 1, 1];
    let table = bn_table::<BigRational>(&topo, &n).map_err(|e| e.to_string())?;
    let b = table.get(&n).unwrap().to_f64().unwrap();
    let sn: Vec<f64> = spinning_allocation(&topo, &n, &table)
        .map_err(|e| e.to_string())?
        .lambda
        .iter()
        .map(|x| x.to_f64().unwrap())
        .collect();
    let little = little_identity_residual(&topo, &n, &table).map_err(|e| e.to_string())?;
    let k01 = topo.incidence_index(0, 1).unwrap();
    let little01 = little[k01].as_ref().unwrap().to_f64().unwrap();

    let nf = [1.0; 3];
    let pf = solve_pf(&topo, &nf).map_err(|e| e.to_string())?;
    let mp = manifold_point(&topo, &nf).map_err(|e| e.to_string())?;
    let at = |q: usize, r: usize| mp.m_star[topo.incidence_index(q, r).unwrap()];
    let manifold = [at(0, 0), at(0, 1), at(1, 0), at(1, 2)];

    let exact_ok = (b - 4.0).abs() <= 1e-10
        && sn
            .iter()
            .zip([0.25, 0.75, 0.75])
            .all(|(a, w)| (a - w).abs() <= 1e-10)
        && little01.abs() <= 1e-10;
    let solver_ok = pf
        .lambda()
        .iter()
        .zip([1.0 / 3.0, 2.0 / 3.0, 2.0 / 3.0])
        .all(|(a, w)| (a - w).abs() <= 1e-8)
        && pf.q.iter().all(|q| (q - 1.5).abs() <= 1e-8)
        && manifold
            .iter()
            .zip([0.5, 1.0, 0.5, 1.0])
            .all(|(a, w)| (a - w).abs() <= 1e-8);
    check(
        exact_ok && solver_ok,
        format!(
            "B = {b}, SN = {sn:?}, PF = {:?}, q = {:?}, manifold = {manifold:?}, little(q0,r1) = {little01}",
            pf.lambda(),
            pf.q
        ),
    )
}

fn strong_duality() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    let instances = 150;
    for _ in 0..instances {
        let topo = common::random_topology(&mut rng, 4, 5);
        let traffic = common::stable_loads(&mut rng, &topo, 0.95);
        let n: Vec<f64> = (0..topo.route_count())
            .map(|_| 5.0 - rng.gen_range(0.0..5.0))
            .collect();
        let dual = alpha_dual(&topo, &traffic, &n)
            .map_err(|e| e.to_string())?
            .value;
        let primal = alpha_primal(&topo, &traffic, &n)
            .map_err(|e| e.to_string())?
            .rate
            .value;
        worst = worst.max((primal - dual).abs());
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        worst <= 1e-6 && secs < 60.0,
        format!("{instances} instances, worst gap {worst:.2e}, {secs:.2}s"),
    )
}

fn spec(kind: ExperimentKind, params: Params) -> Result<ExperimentSpec, String> {
    ExperimentSpec::new(kind, LINEAR.to_string(), params).map_err(|e| e.to_string())
}

fn convergence_trend() -> Outcome {
    let start = Instant::now();
    let params = Params {
        n: Some(vec![1.0; 3]),
        h: Some(vec![1, 4, 64]),
        ..Params::default()
    };
    let t =
        experiments::run(&spec(ExperimentKind::Converge, params)?).map_err(|e| e.to_string())?;
    let e = t.real_column("error").unwrap();
    let secs = start.elapsed().as_secs_f64();
    check(
        (e[0] - 1.0 / 12.0).abs() <= 1e-10 && e[2] < e[1] && e[2] <= 0.05 && secs < 120.0,
        format!(
            "e(1) = {:.12}, e(4) = {:.6}, e(64) = {:.6}, {secs:.2}s",
            e[0], e[1], e[2]
        ),
    )
}

fn collapse_trend() -> Outcome {
    let params = Params {
        n: Some(vec![1.0; 3]),
        epsilon: Some(0.1),
        seed: 5,
        ..Params::default()
    };
    let t =
        experiments::run(&spec(ExperimentKind::Collapse, params)?).map_err(|e| e.to_string())?;
    let hs = t.real_column("h").unwrap();
    let p = t.real_column("p_exceed").unwrap();
    let dev = t.real_column("deviation_max").unwrap();
    let modes: Vec<String> = t
        .column("mode")
        .unwrap()
        .iter()
        .map(|c| match c {
            Cell::Str(s) => s.clone(),
            _ => String::new(),
        })
        .collect();
    let exact: Vec<usize> = (0..hs.len()).filter(|&r| modes[r] == "exact").collect();
    let sampled: Vec<usize> = (0..hs.len()).filter(|&r| modes[r] == "sampled").collect();
    let ex_last = *exact.last().unwrap();
    let sa_last = *sampled.last().unwrap();
    let ok = hs[ex_last] == 6.0
        && hs[sa_last] == 40.0
        && [ex_last, sa_last]
            .iter()
            .all(|&r| p[r] < p[0] && dev[r] < dev[0])
        && dev[sa_last] <= 0.1;
    check(
        ok,
        format!(
            "h=1: P = {:.4}, dev = {:.4}; exact h=6: P = {:.4}, dev = {:.4}; sampled h=40: P = {:.4}, dev = {:.4}",
            p[0], dev[0], p[ex_last], dev[ex_last], p[sa_last], dev[sa_last]
        ),
    )
}

fn product_form_simulation() -> Outcome {
    let topo = common::linear();
    let traffic = TrafficProfile::from_loads(&[0.25; 3]).unwrap();
    let traj = simulate_flow_level(
        &topo,
        &traffic,
        AllocationSource::Spinning,
        &SimConfig::new(1e5, 6),
    )
    .map_err(|e| e.to_string())?;
    let exact = exact_doc_pmf(&topo, &traffic, traj.pmf.bounds()).map_err(|e| e.to_string())?;
    let tv = empirical_tv_distance(&traj.pmf, &exact)
        .map_err(|e| e.to_string())?
        .tv;

    // single queue, C = 2, load 1: geometric with ratio 1/2
    let single = Topology::single_queue(2.0, 1);
    let load = TrafficProfile::from_loads(&[1.0]).unwrap();
    let one = simulate_flow_level(
        &single,
        &load,
        AllocationSource::Spinning,
        &SimConfig::new(1e5, 6),
    )
    .map_err(|e| e.to_string())?;
    let geometric = Pmf::from_fn(one.pmf.bounds().to_vec(), |n| {
        0.5 * 0.5f64.powi(n[0] as i32)
    });
    let tv_single = empirical_tv_distance(&one.pmf, &geometric)
        .map_err(|e| e.to_string())?
        .tv;
    check(
        traj.post_warmup_events >= 100_000 && tv <= 0.05 && tv_single <= 0.02,
        format!(
            "linear TV {tv:.4} over {} post-warmup events; single queue TV {tv_single:.4}",
            traj.post_warmup_events
        ),
    )
}

fn insensitivity() -> Outcome {
    let topo = common::linear();
    let traffic = TrafficProfile::from_loads(&[0.2; 3]).unwrap();
    let exact = exact_doc_pmf(&topo, &traffic, &[50; 3]).map_err(|e| e.to_string())?;
    let mut tvs = Vec::new();
    for (dist, mu_factor) in [
        (SizeDist::Deterministic, 1.0),
        (
            SizeDist::Hyperexponential {
                p: experiments::HYPEREXP_P,
            },
            1.0,
        ),
        (SizeDist::Exponential, 0.5),
    ] {
        let variant = traffic
            .with_size_dist(dist)
            .and_then(|t| t.with_mu_scaled(mu_factor))
            .map_err(|e| e.to_string())?;
        let traj = simulate_flow_level_general_sizes(
            &topo,
            &variant,
            AllocationSource::Spinning,
            &SimConfig::new(1e5, 7),
        )
        .map_err(|e| e.to_string())?;
        tvs.push(
            empirical_tv_distance(&traj.pmf, &exact)
                .map_err(|e| e.to_string())?
                .tv,
        );
    }
    check(
        tvs[0] <= 0.05 && tvs[1] <= 0.05 && tvs[2] > 0.1,
        format!(
            "deterministic TV {:.4}, hyperexponential TV {:.4}, halved-mu control TV {:.4}",
            tvs[0], tvs[1], tvs[2]
        ),
    )
}

fn scaling() -> Outcome {
    let topo = common::linear();
    let traffic = TrafficProfile::from_loads(&[0.25; 3]).unwrap();
    let mut tvs = Vec::new();
    for c in [1u32, 4, 16] {
        let cfg = SimConfig::new(1e5, 8).with_scale(c);
        let traj = simulate_open_packet(&topo, &traffic, &cfg).map_err(|e| e.to_string())?;
        let exact = exact_doc_pmf(&topo, &traffic, traj.pmf.bounds()).map_err(|e| e.to_string())?;
        tvs.push(
            empirical_tv_distance(&traj.pmf, &exact)
                .map_err(|e| e.to_string())?
                .tv,
        );
    }
    let est = simulate_closed_network(&topo, &[1, 1, 1], &SimConfig::new(1e5, 8))
        .map_err(|e| e.to_string())?;
    let within = est
        .throughput
        .iter()
        .zip(&est.half_width)
        .zip([0.25, 0.75, 0.75])
        .all(|((x, hw), w)| (x - w).abs() <= 3.0 * hw);
    check(
        tvs.iter().all(|&t| t <= 0.05) && within,
        format!(
            "TV at c = 1, 4, 16: {:.4}, {:.4}, {:.4}; closed throughput {:.4?} ± {:.4?}",
            tvs[0], tvs[1], tvs[2], est.throughput, est.half_width
        ),
    )
}

fn property_suites() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);

    let mut convexity: f64 = 0.0;
    let mut triples = 0;
    while triples < 10_000 {
        let topo = common::random_topology(&mut rng, 4, 5);
        let rho: Vec<f64> = (0..topo.route_count())
            .map(|_| rng.gen_range(0.05..2.0))
            .collect();
        for _ in 0..20 {
            let a: Vec<f64> = (0..topo.incidence_count())
                .map(|_| rng.gen_range(0.0..5.0))
                .collect();
            let b: Vec<f64> = (0..topo.incidence_count())
                .map(|_| rng.gen_range(0.0..5.0))
                .collect();
            let mid: Vec<f64> = a.iter().zip(&b).map(|(x, y)| 0.5 * (x + y)).collect();
            let gap = beta_rate(&topo, &rho, &mid).value
                - 0.5 * (beta_rate(&topo, &rho, &a).value + beta_rate(&topo, &rho, &b).value);
            convexity = convexity.max(gap);
            triples += 1;
        }
    }

    let mut closed: f64 = 0.0;
    for _ in 0..30 {
        let k = rng.gen_range(1..5);
        let c = rng.gen_range(0.5..3.0);
        let rho: Vec<f64> = (0..k).map(|_| rng.gen_range(0.1..2.0)).collect();
        let m: Vec<f64> = (0..k).map(|_| rng.gen_range(0.1..3.0)).collect();
        closed = closed.max(
            (tilted_exponent_value(c, &rho, &m) - common::tilted_exponent_numeric(c, &rho, &m))
                .abs(),
        );
        closed = closed.max(
            (min_relative_entropy(c, &rho).0 - common::min_relative_entropy_numeric(c, &rho)).abs(),
        );
    }

    let mut scale: f64 = 0.0;
    let mut slack = f64::INFINITY;
    for _ in 0..100 {
        let topo = common::random_topology(&mut rng, 3, 3);
        let n: Vec<f64> = (0..topo.route_count())
            .map(|_| rng.gen_range(0.1..5.0))
            .collect();
        let h = rng.gen_range(0.1..50.0);
        let hn: Vec<f64> = n.iter().map(|x| x * h).collect();
        let a = solve_pf(&topo, &n).map_err(|e| e.to_string())?;
        let b = solve_pf(&topo, &hn).map_err(|e| e.to_string())?;
        for (x, y) in a.lambda().iter().zip(b.lambda()) {
            scale = scale.max((x - y).abs());
        }
        let counts: Vec<u64> = (0..topo.route_count())
            .map(|_| rng.gen_range(0..=6))
            .collect();
        let table = bn_table::<f64>(&topo, &counts).map_err(|e| e.to_string())?;
        let alloc = spinning_allocation(&topo, &counts, &table).map_err(|e| e.to_string())?;
        slack = check_feasibility(&topo, &alloc)
            .slacks
            .iter()
            .cloned()
            .fold(slack, f64::min);
    }

    let deterministic = {
        let topo = common::linear();
        let traffic = TrafficProfile::from_loads(&[0.25; 3]).unwrap();
        let cfg = SimConfig::new(5_000.0, 10).with_path();
        let mut csvs = Vec::new();
        for _ in 0..2 {
            let traj = simulate_flow_level(&topo, &traffic, AllocationSource::Spinning, &cfg)
                .map_err(|e| e.to_string())?;
            let mut buf = Vec::new();
            traj.write_csv(&mut buf).map_err(|e| e.to_string())?;
            let t = experiments::run(&spec(
                ExperimentKind::Scaling,
                Params {
                    horizon: Some(2_000.0),
                    seed: 10,
                    ..Params::default()
                },
            )?)
            .map_err(|e| e.to_string())?;
            buf.extend(t.to_csv().map_err(|e| e.to_string())?);
            buf.extend(t.meta_json().into_bytes());
            csvs.push(buf);
        }
        csvs[0] == csvs[1]
    };

    check(
        convexity <= 1e-10 && closed <= 1e-8 && scale <= 1e-8 && slack >= -1e-9 && deterministic,
        format!(
            "convexity violation {convexity:.2e} over {triples} triples, closed-form error {closed:.2e}, \
             PF scale drift {scale:.2e}, min slack {slack:.2e}, deterministic {deterministic}"
        ),
    )
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("table vs brute-force oracle", oracle_equivalence),
        ("linear network constants", hand_constants),
        ("strong duality", strong_duality),
        ("spinning to PF convergence", convergence_trend),
        ("collapse onto the manifold", collapse_trend),
        ("flow-level product form", product_form_simulation),
        ("insensitivity", insensitivity),
        ("packet-level scaling", scaling),
        ("property suites", property_suites),
    ];
    let mut failed = 0;
    for (k, (name, run)) in criteria.iter().enumerate() {
        match run() {
            Ok(detail) => println!("PASS criterion {}: {name}: {detail}", k + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL criterion {}: {name}: {detail}", k + 1);
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
