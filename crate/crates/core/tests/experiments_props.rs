use pfqn::experiments::{self, Cell, ExperimentError, ExperimentKind, ExperimentSpec, Params};

const SINGLE: &str = include_str!("../../../networks/single_queue.json");
const LINEAR: &str = include_str!("../../../networks/linear.json");

fn spec(kind: ExperimentKind, src: &str, params: Params) -> ExperimentSpec {
    ExperimentSpec::new(kind, src.to_string(), params).unwrap()
}

fn long_value(t: &pfqn::ResultTable, quantity: &str, key: &str) -> f64 {
    t.rows()
        .iter()
        .find(
            |r| matches!((&r[0], &r[1]), (Cell::Str(q), Cell::Str(k)) if q == quantity && k == key),
        )
        .and_then(|r| r[2].as_real())
        .unwrap_or_else(|| panic!("no row {quantity}/{key}"))
}

#[test]
fn outputs_are_byte_identical_across_runs() {
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    let params = Params {
        horizon: Some(5_000.0),
        seed: 17,
        ..Params::default()
    };
    for dir in [&dir_a, &dir_b] {
        let table =
            experiments::run(&spec(ExperimentKind::Scaling, LINEAR, params.clone())).unwrap();
        experiments::write_outputs(&table, dir.path()).unwrap();
    }
    for file in ["scaling.csv", "meta.json"] {
        let a = std::fs::read(dir_a.path().join(file)).unwrap();
        let b = std::fs::read(dir_b.path().join(file)).unwrap();
        assert_eq!(a, b, "{file}");
    }
}

#[test]
fn single_queue_converge_is_exact_at_every_scale() {
    let params = Params {
        n: Some(vec![2.0, 3.0]),
        ..Params::default()
    };
    let t = experiments::run(&spec(ExperimentKind::Converge, SINGLE, params)).unwrap();
    let errors = t.real_column("error").unwrap();
    assert_eq!(errors.len(), experiments::DEFAULT_CONVERGE_H.len());
    assert!(errors.iter().all(|e| e.abs() <= 1e-12), "{errors:?}");
}

#[test]
fn single_queue_exact_allocation_is_proportional() {
    let params = Params {
        n: Some(vec![2.0, 5.0]),
        ..Params::default()
    };
    let t = experiments::run(&spec(ExperimentKind::Exact, SINGLE, params)).unwrap();
    assert!((long_value(&t, "lambda_sn", "a") - 2.0 * 2.0 / 7.0).abs() <= 1e-12);
    assert!((long_value(&t, "lambda_sn", "b") - 2.0 * 5.0 / 7.0).abs() <= 1e-12);
    assert!(long_value(&t, "slack", "q").abs() <= 1e-12);
}

#[test]
fn linear_pf_and_rates() {
    let params = Params {
        n: Some(vec![1.0, 1.0, 1.0]),
        ..Params::default()
    };
    let pf = experiments::run(&spec(ExperimentKind::Pf, LINEAR, params.clone())).unwrap();
    assert!((long_value(&pf, "lambda_pf", "r0") - 1.0 / 3.0).abs() <= 1e-8);
    assert!(long_value(&pf, "kkt", "max") <= 1e-8);
    let rates = experiments::run(&spec(ExperimentKind::Rates, LINEAR, params)).unwrap();
    assert!(long_value(&rates, "duality_gap", "") <= 1e-6);
}

#[test]
fn bad_configs_map_to_exit_codes() {
    let unknown = LINEAR.replacen("\"queues\"", "\"extra\": 1, \"queues\"", 1);
    let err =
        ExperimentSpec::new(ExperimentKind::Validate, unknown, Params::default()).unwrap_err();
    assert_eq!(err.exit_code(), 2);

    let bad_h = Params {
        h: Some(vec![4, 2]),
        ..Params::default()
    };
    let err = ExperimentSpec::new(ExperimentKind::Converge, LINEAR.into(), bad_h).unwrap_err();
    assert!(matches!(err, ExperimentError::Config(_)));

    let huge = Params {
        n: Some(vec![1.0, 1.0, 1.0]),
        h: Some(vec![1, 100_000]),
        ..Params::default()
    };
    let err = experiments::run(&spec(ExperimentKind::Converge, LINEAR, huge)).unwrap_err();
    assert_eq!(err.exit_code(), 4);
}

#[test]
fn config_hash_tracks_inputs() {
    let a = spec(ExperimentKind::Pf, LINEAR, Params::default());
    let b = spec(
        ExperimentKind::Pf,
        LINEAR,
        Params {
            seed: 1,
            ..Params::default()
        },
    );
    let c = spec(ExperimentKind::Rates, LINEAR, Params::default());
    assert_eq!(
        a.config_hash(),
        spec(ExperimentKind::Pf, LINEAR, Params::default()).config_hash()
    );
    assert_ne!(a.config_hash(), b.config_hash());
    assert_ne!(a.config_hash(), c.config_hash());
}
