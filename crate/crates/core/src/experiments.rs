//! Network configuration files, experiment drivers and CSV output.
//!
//! A network is described by a JSON document:
//!
//! ```json
//! {
//!   "queues": [{"name": "q0", "capacity": 1.0}, {"name": "q1", "capacity": 1.0}],
//!   "routes": [{"name": "r0", "queues": ["q0", "q1"]}, {"name": "r1", "queues": ["q0"]}],
//!   "traffic": [{"route": "r0", "nu": 0.25, "mu": 1.0},
//!               {"route": "r1", "nu": 0.25, "mu": 1.0, "size_dist": {"kind": "deterministic"}}]
//! }
//! ```
//!
//! Names resolve to indices in file order. `traffic` may be omitted for
//! experiments that do not need loads. Each driver returns a [`ResultTable`];
//! [`write_outputs`] emits it as CSV next to a `meta.json` sidecar.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::fairness::{
    alpha_dual, alpha_primal, beta_rate, kl_decompose, solve_pf, FairnessError, Manifold,
};
use crate::productform::{
    bn_table, check_feasibility, doc_pmf, little_identity_residual, spinning_allocation,
    table_entries, ProductFormError, DEFAULT_TABLE_CAP,
};
use crate::simulate::{
    conditional_distribution, empirical_tv_distance, exact_doc_pmf, run_replicas,
    sample_conditional, simulate_flow_level, simulate_flow_level_general_sizes,
    simulate_open_packet, AllocationSource, Pmf, SimConfig, SimError, Trajectory,
};
use crate::topology::{
    stability_check, validate_topology, PacketVector, RawTopology, SizeDist, Topology,
    TopologyError, TrafficProfile,
};

pub const BUILD_ID: &str = concat!("pfqn-", env!("CARGO_PKG_VERSION"));

/// Largest `h` for which `run_collapse` enumerates the fibre exactly.
pub const EXACT_COLLAPSE_MAX_H: u64 = 6;

/// Real formatted with 17 significant digits.
pub fn format_real(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.16e}")
    } else if x.is_nan() {
        "NaN".to_string()
    } else if x > 0.0 {
        "inf".to_string()
    } else {
        "-inf".to_string()
    }
}

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config error: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("resource cap: {0}")]
    ResourceCap(String),
}

impl ExperimentError {
    /// Process exit code: 2 config, 3 numeric, 4 resource cap.
    pub fn exit_code(&self) -> i32 {
        match self {
            ExperimentError::Config(_) | ExperimentError::Io(_) => 2,
            ExperimentError::Numeric(_) => 3,
            ExperimentError::ResourceCap(_) => 4,
        }
    }
}

impl From<TopologyError> for ExperimentError {
    fn from(e: TopologyError) -> Self {
        match e {
            TopologyError::StateSpaceTooLarge { .. } => ExperimentError::ResourceCap(e.to_string()),
            _ => ExperimentError::Config(e.to_string()),
        }
    }
}

impl From<ProductFormError> for ExperimentError {
    fn from(e: ProductFormError) -> Self {
        match e {
            ProductFormError::Topology(t) => t.into(),
            ProductFormError::TableTooLarge { .. } => ExperimentError::ResourceCap(e.to_string()),
            ProductFormError::UnstableNetwork { .. } => ExperimentError::Config(e.to_string()),
            _ => ExperimentError::Numeric(e.to_string()),
        }
    }
}

impl From<FairnessError> for ExperimentError {
    fn from(e: FairnessError) -> Self {
        match e {
            FairnessError::Topology(t) => t.into(),
            FairnessError::BadCounts => ExperimentError::Config(e.to_string()),
            _ => ExperimentError::Numeric(e.to_string()),
        }
    }
}

impl From<SimError> for ExperimentError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Config(m) => ExperimentError::Config(m),
            SimError::Topology(t) => t.into(),
            SimError::ProductForm(p) => p.into(),
            SimError::Fairness(f) => f.into(),
            SimError::EventCap { .. } => ExperimentError::ResourceCap(e.to_string()),
        }
    }
}

impl From<std::io::Error> for ExperimentError {
    fn from(e: std::io::Error) -> Self {
        ExperimentError::Io(e.to_string())
    }
}

impl From<csv::Error> for ExperimentError {
    fn from(e: csv::Error) -> Self {
        ExperimentError::Io(e.to_string())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueueSpec {
    pub name: String,
    pub capacity: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RouteSpec {
    pub name: String,
    pub queues: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrafficSpec {
    pub route: String,
    pub nu: f64,
    pub mu: f64,
    #[serde(default)]
    pub size_dist: SizeDist,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub queues: Vec<QueueSpec>,
    pub routes: Vec<RouteSpec>,
    #[serde(default)]
    pub traffic: Vec<TrafficSpec>,
}

/// A validated network with its names.
#[derive(Debug, Clone)]
pub struct Network {
    pub topology: Topology,
    pub traffic: Option<TrafficProfile>,
    pub queue_names: Vec<String>,
    pub route_names: Vec<String>,
}

impl Network {
    pub fn traffic(&self) -> Result<&TrafficProfile, ExperimentError> {
        self.traffic.as_ref().ok_or_else(|| {
            ExperimentError::Config("this experiment needs a traffic section".into())
        })
    }

    fn incidence_label(&self, k: usize) -> String {
        let inc = self.topology.incidence(k);
        format!(
            "{}:{}",
            self.queue_names[inc.queue], self.route_names[inc.route]
        )
    }
}

fn unique_names<'a>(
    what: &str,
    names: impl Iterator<Item = &'a String>,
) -> Result<BTreeMap<String, usize>, ExperimentError> {
    let mut map = BTreeMap::new();
    for (i, n) in names.enumerate() {
        if map.insert(n.clone(), i).is_some() {
            return Err(ExperimentError::Config(format!(
                "duplicate {what} name {n:?}"
            )));
        }
    }
    Ok(map)
}

impl NetworkConfig {
    pub fn resolve(&self) -> Result<Network, ExperimentError> {
        let queues = unique_names("queue", self.queues.iter().map(|q| &q.name))?;
        let routes = unique_names("route", self.routes.iter().map(|r| &r.name))?;
        let mut paths = Vec::with_capacity(self.routes.len());
        for r in &self.routes {
            let path = r
                .queues
                .iter()
                .map(|q| {
                    queues.get(q).copied().ok_or_else(|| {
                        ExperimentError::Config(format!(
                            "route {:?} names unknown queue {q:?}",
                            r.name
                        ))
                    })
                })
                .collect::<Result<Vec<_>, _>>()?;
            paths.push(path);
        }
        let raw = RawTopology {
            capacities: self.queues.iter().map(|q| q.capacity).collect(),
            routes: paths,
        };
        let topology = validate_topology(&raw)?;
        let traffic = if self.traffic.is_empty() {
            None
        } else {
            let mut slots: Vec<Option<&TrafficSpec>> = vec![None; self.routes.len()];
            for t in &self.traffic {
                let i = *routes.get(&t.route).ok_or_else(|| {
                    ExperimentError::Config(format!("traffic for unknown route {:?}", t.route))
                })?;
                if slots[i].replace(t).is_some() {
                    return Err(ExperimentError::Config(format!(
                        "route {:?} has two traffic entries",
                        t.route
                    )));
                }
            }
            let specs = slots
                .into_iter()
                .enumerate()
                .map(|(i, s)| {
                    s.ok_or_else(|| {
                        ExperimentError::Config(format!(
                            "route {:?} has no traffic entry",
                            self.routes[i].name
                        ))
                    })
                })
                .collect::<Result<Vec<_>, _>>()?;
            Some(TrafficProfile::with_sizes(
                specs.iter().map(|t| t.nu).collect(),
                specs.iter().map(|t| t.mu).collect(),
                specs.iter().map(|t| t.size_dist).collect(),
            )?)
        };
        Ok(Network {
            topology,
            traffic,
            queue_names: self.queues.iter().map(|q| q.name.clone()).collect(),
            route_names: self.routes.iter().map(|r| r.name.clone()).collect(),
        })
    }
}

pub fn parse_network(json: &str) -> Result<Network, ExperimentError> {
    let cfg: NetworkConfig = serde_json::from_str(json)
        .map_err(|e| ExperimentError::Config(format!("network file: {e}")))?;
    cfg.resolve()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExperimentKind {
    Validate,
    Exact,
    Pf,
    Rates,
    Converge,
    Collapse,
    Scaling,
    Insensitivity,
    Simulate,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::Validate => "validate",
            ExperimentKind::Exact => "exact",
            ExperimentKind::Pf => "pf",
            ExperimentKind::Rates => "rates",
            ExperimentKind::Converge => "converge",
            ExperimentKind::Collapse => "collapse",
            ExperimentKind::Scaling => "scaling",
            ExperimentKind::Insensitivity => "insensitivity",
            ExperimentKind::Simulate => "simulate",
        }
    }
}

/// Kind-specific parameters; unset fields take per-kind defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Params {
    pub n: Option<Vec<f64>>,
    pub h: Option<Vec<u64>>,
    pub c: Option<Vec<u32>>,
    pub epsilon: Option<f64>,
    pub seed: u64,
    pub horizon: Option<f64>,
    pub replicas: Option<u32>,
    pub samples: Option<usize>,
}

pub const DEFAULT_CONVERGE_H: [u64; 7] = [1, 2, 4, 8, 16, 32, 64];
pub const DEFAULT_COLLAPSE_H: [u64; 9] = [1, 2, 3, 4, 5, 6, 10, 20, 40];
pub const DEFAULT_C: [u32; 3] = [1, 4, 16];
pub const DEFAULT_EPSILON: f64 = 0.1;
pub const DEFAULT_HORIZON: f64 = 1e5;
pub const DEFAULT_SAMPLES: usize = 20_000;
pub const HYPEREXP_P: f64 = 0.2;

#[derive(Debug, Clone)]
pub struct ExperimentSpec {
    pub kind: ExperimentKind,
    pub network: Network,
    /// Raw network document, hashed into the provenance.
    pub network_source: String,
    pub params: Params,
}

fn strictly_increasing<T: PartialOrd + Copy + Default>(
    what: &str,
    v: &[T],
) -> Result<(), ExperimentError> {
    if v.is_empty() {
        return Err(ExperimentError::Config(format!("{what} list is empty")));
    }
    if v[0] <= T::default() || v.windows(2).any(|w| w[0] >= w[1]) {
        return Err(ExperimentError::Config(format!(
            "{what} list must be strictly increasing positive integers"
        )));
    }
    Ok(())
}

impl ExperimentSpec {
    pub fn new(
        kind: ExperimentKind,
        network_source: String,
        params: Params,
    ) -> Result<Self, ExperimentError> {
        let network = parse_network(&network_source)?;
        let spec = ExperimentSpec {
            kind,
            network,
            network_source,
            params,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn from_file(
        kind: ExperimentKind,
        path: &Path,
        params: Params,
    ) -> Result<Self, ExperimentError> {
        let src = fs::read_to_string(path)
            .map_err(|e| ExperimentError::Config(format!("{}: {e}", path.display())))?;
        Self::new(kind, src, params)
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let p = &self.params;
        if let Some(h) = &p.h {
            strictly_increasing("h", h)?;
        }
        if let Some(c) = &p.c {
            strictly_increasing("c", c)?;
        }
        if let Some(n) = &p.n {
            self.network.topology.check_len(n.len())?;
            if n.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
                return Err(ExperimentError::Config(
                    "n entries must be finite and nonnegative".into(),
                ));
            }
        }
        if let Some(e) = p.epsilon {
            if !(e.is_finite() && e > 0.0) {
                return Err(ExperimentError::Config("epsilon must be positive".into()));
            }
        }
        if let Some(h) = p.horizon {
            if !(h.is_finite() && h > 0.0) {
                return Err(ExperimentError::Config("horizon must be positive".into()));
            }
        }
        if p.replicas == Some(0) {
            return Err(ExperimentError::Config("replicas must be positive".into()));
        }
        Ok(())
    }

    fn n(&self) -> Result<Vec<f64>, ExperimentError> {
        self.params
            .n
            .clone()
            .ok_or_else(|| ExperimentError::Config(format!("{} needs --n", self.kind.name())))
    }

    fn n_integer(&self) -> Result<Vec<u64>, ExperimentError> {
        self.n()?
            .iter()
            .map(|&x| {
                if x.fract() == 0.0 {
                    Ok(x as u64)
                } else {
                    Err(ExperimentError::Config(format!(
                        "{} needs integer n",
                        self.kind.name()
                    )))
                }
            })
            .collect()
    }

    fn horizon(&self) -> f64 {
        self.params.horizon.unwrap_or(DEFAULT_HORIZON)
    }

    fn replicas(&self) -> u32 {
        self.params.replicas.unwrap_or(1)
    }

    /// SHA-256 of the network document and the parameters.
    pub fn config_hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.kind.name().as_bytes());
        hasher.update([0]);
        hasher.update(self.network_source.as_bytes());
        hasher.update([0]);
        hasher.update(serde_json::to_vec(&self.params).expect("params serialise"));
        hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Str(String),
    Real(f64),
    Int(i64),
}

impl Cell {
    fn render(&self) -> String {
        match self {
            Cell::Str(s) => s.clone(),
            Cell::Real(x) => format_real(*x),
            Cell::Int(k) => k.to_string(),
        }
    }

    pub fn as_real(&self) -> Option<f64> {
        match self {
            Cell::Real(x) => Some(*x),
            Cell::Int(k) => Some(*k as f64),
            Cell::Str(_) => None,
        }
    }
}

impl From<f64> for Cell {
    fn from(x: f64) -> Self {
        Cell::Real(x)
    }
}

impl From<u64> for Cell {
    fn from(k: u64) -> Self {
        Cell::Int(k as i64)
    }
}

impl From<&str> for Cell {
    fn from(s: &str) -> Self {
        Cell::Str(s.to_string())
    }
}

impl From<String> for Cell {
    fn from(s: String) -> Self {
        Cell::Str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Provenance {
    pub kind: String,
    pub seed: u64,
    pub build_id: String,
    pub config_hash: String,
    pub parameters: Params,
    /// Calibration choices that are not properties of the model.
    pub notes: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResultTable {
    columns: Vec<String>,
    rows: Vec<Vec<Cell>>,
    pub provenance: Provenance,
}

impl ResultTable {
    pub fn new(columns: Vec<String>, spec: &ExperimentSpec) -> Result<Self, ExperimentError> {
        let mut seen = std::collections::BTreeSet::new();
        if let Some(dup) = columns.iter().find(|c| !seen.insert(c.as_str())) {
            return Err(ExperimentError::Config(format!("duplicate column {dup:?}")));
        }
        Ok(ResultTable {
            columns,
            rows: Vec::new(),
            provenance: Provenance {
                kind: spec.kind.name().to_string(),
                seed: spec.params.seed,
                build_id: BUILD_ID.to_string(),
                config_hash: spec.config_hash(),
                parameters: spec.params.clone(),
                notes: BTreeMap::new(),
            },
        })
    }

    pub fn columns(&self) -> &[String] {
        &self.columns
    }

    pub fn rows(&self) -> &[Vec<Cell>] {
        &self.rows
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        assert_eq!(row.len(), self.columns.len(), "row width matches header");
        self.rows.push(row);
    }

    pub fn column(&self, name: &str) -> Option<Vec<&Cell>> {
        let idx = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| &r[idx]).collect())
    }

    pub fn real_column(&self, name: &str) -> Option<Vec<f64>> {
        self.column(name)?.into_iter().map(Cell::as_real).collect()
    }

    fn note(&mut self, key: &str, value: impl Into<String>) {
        self.provenance.notes.insert(key.to_string(), value.into());
    }

    pub fn to_csv(&self) -> Result<Vec<u8>, ExperimentError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.columns)?;
        for row in &self.rows {
            w.write_record(row.iter().map(Cell::render))?;
        }
        w.into_inner()
            .map_err(|e| ExperimentError::Io(e.to_string()))
    }

    pub fn meta_json(&self) -> String {
        serde_json::to_string_pretty(&self.provenance).expect("provenance serialises") + "\n"
    }
}

/// Writes `<kind>.csv` and `meta.json` into `dir`.
pub fn write_outputs(table: &ResultTable, dir: &Path) -> Result<Vec<PathBuf>, ExperimentError> {
    fs::create_dir_all(dir)?;
    let csv_path = dir.join(format!("{}.csv", table.provenance.kind));
    let meta_path = dir.join("meta.json");
    fs::write(&csv_path, table.to_csv()?)?;
    fs::write(&meta_path, table.meta_json())?;
    Ok(vec![csv_path, meta_path])
}

pub fn run(spec: &ExperimentSpec) -> Result<ResultTable, ExperimentError> {
    match spec.kind {
        ExperimentKind::Validate => run_validate(spec),
        ExperimentKind::Exact => run_exact(spec),
        ExperimentKind::Pf => run_pf(spec),
        ExperimentKind::Rates => run_rates(spec),
        ExperimentKind::Converge => run_converge(spec),
        ExperimentKind::Collapse => run_collapse(spec),
        ExperimentKind::Scaling => run_scaling(spec),
        ExperimentKind::Insensitivity => run_insensitivity(spec),
        ExperimentKind::Simulate => run_simulate(spec).map(|(t, _)| t),
    }
}

fn long_table(spec: &ExperimentSpec) -> Result<ResultTable, ExperimentError> {
    ResultTable::new(vec!["quantity".into(), "key".into(), "value".into()], spec)
}

fn long_row(t: &mut ResultTable, q: &str, key: impl Into<String>, v: impl Into<Cell>) {
    t.push(vec![q.into(), Cell::Str(key.into()), v.into()]);
}

/// Per-queue loads and stability.
pub fn run_validate(spec: &ExperimentSpec) -> Result<ResultTable, ExperimentError> {
    let net = &spec.network;
    let topo = &net.topology;
    let mut t = ResultTable::new(
        vec![
            "queue".into(),
            "capacity".into(),
            "load".into(),
            "stable".into(),
        ],
        spec,
    )?;
    let loads = match &net.traffic {
        Some(tr) => stability_check(topo, tr).loads,
        None => vec![f64::NAN; topo.queue_count()],
    };
    for j in 0..topo.queue_count() {
        let stable = if loads[j].is_nan() {
            "unknown"
        } else if loads[j] < topo.capacity(j) {
            "yes"
        } else {
            "no"
        };
        t.push(vec![
            net.queue_names[j].clone().into(),
            topo.capacity(j).into(),
            loads[j].into(),
            stable.into(),
        ]);
    }
    Ok(t)
}

/// `B_n`, the spinning allocation with its slacks, the document pmf when
/// traffic is given, and the Little-identity residuals.
pub fn run_exact(spec: &ExperimentSpec) -> Result<ResultTable, ExperimentError> {
    let net = &spec.network;
    let topo = &net.topology;
    let n = spec.n_integer()?;
    let table = bn_table::<f64>(topo, &n)?;
    let mut t = long_table(spec)?;
    long_row(&mut t, "B_n", "", table.get(&n).expect("table covers n"));
    let alloc = spinning_allocation(topo, &n, &table)?;
    for (i, l) in alloc.lambda.iter().enumerate() {
        long_row(&mut t, "lambda_sn", net.route_names[i].clone(), *l);
    }
    let feas = check_feasibility(topo, &alloc);
    for (j, s) in feas.slacks.iter().enumerate() {
        long_row(&mut t, "slack", net.queue_names[j].clone(), *s);
    }
    if let Some(tr) = &net.traffic {
        long_row(&mut t, "doc_pmf", "", doc_pmf::<f64>(topo, tr, &n)?);
    }
    for (k, r) in little_identity_residual(topo, &n, &table)?
        .iter()
        .enumerate()
    {
        let v = r.map_or(f64::NAN, |x| x);
        long_row(&mut t, "little_residual", net.incidence_label(k), v);
    }
    Ok(t)
}

pub fn run_pf(spec: &ExperimentSpec) -> Result<ResultTable, ExperimentError> {
    let net = &spec.network;
    let n = spec.n()?;
    let pf = solve_pf(&net.topology, &n)?;
    let mut t = long_table(spec)?;
    for (i, l) in pf.lambda().iter().enumerate() {
        long_row(&mut t, "lambda_pf", net.route_names[i].clone(), *l);
    }
    for (j, q) in pf.q.iter().enumerate() {
        long_row(&mut t, "q", net.queue_names[j].clone(), *q);
    }
    long_row(&mut t, "objective", "", pf.objective);
    long_row(&mut t, "kkt", "stationarity", pf.kkt.stationarity);
    long_row(&mut t, "kkt", "complementary", pf.kkt.complementary);
    long_row(
        &mut t,
        "kkt",
        "primal_infeasibility",
        pf.kkt.primal_infeasibility,
    );
    long_row(&mut t, "kkt", "dual_negativity", pf.kkt.dual_negativity);
    long_row(&mut t, "kkt", "max", pf.kkt.max());
    long_row(&mut t, "iterations", "", pf.iterations as u64);
    Ok(t)
}

/// Primal and dual values of `alpha_rho(n)`, their gap, and the per-queue
/// split of `beta_rho` at the primal minimiser.
pub fn run_rates(spec: &ExperimentSpec) -> Result<ResultTable, ExperimentError> {
    let net = &spec.network;
    let topo = &net.topology;
    let tr = net.traffic()?;
    let n = spec.n()?;
    let dual = alpha_dual(topo, tr, &n)?.value;
    let primal = alpha_primal(topo, tr, &n)?;
    let mut t = long_table(spec)?;
    long_row(&mut t, "alpha_primal", "", primal.rate.value);
    long_row(&mut t, "alpha_dual", "", dual);
    long_row(&mut t, "duality_gap", "", (primal.rate.value - dual).abs());
    long_row(&mut t, "certified_gap", "", primal.certified_gap);
    long_row(&mut t, "beta_manifold_point", "", primal.constructed);
    long_row(
        &mut t,
        "beta_argmin",
        "",
        beta_rate(topo, tr.rho(), primal.argmin.as_slice()).value,
    );
    for (k, m) in primal.argmin.as_slice().iter().enumerate() {
        long_row(&mut t, "argmin", net.incidence_label(k), *m);
    }
    for (j, (kl, off)) in kl_decompose(topo, tr.rho(), primal.argmin.as_slice())
        .iter()
        .enumerate()
    {
        long_row(&mut t, "kl", net.queue_names[j].clone(), *kl);
        long_row(&mut t, "offset", net.queue_names[j].clone(), *off);
    }
    Ok(t)
}

fn scaled_counts(n: &[f64], h: u64) -> Vec<u64> {
    n.iter().map(|&x| (x * h as f64).floor() as u64).collect()
}

/// `e(h) = max_i |Lambda^SN_i(floor(hn)) - Lambda^PF_i(n)|` over the h list.
pub fn run_converge(spec: &ExperimentSpec) -> Result<ResultTable, ExperimentError> {
    let net = &spec.network;
    let topo = &net.topology;
    let n = spec.n()?;
    let hs = spec
        .params
        .h
        .clone()
        .unwrap_or_else(|| DEFAULT_CONVERGE_H.to_vec());
    let h_max = *hs.last().expect("validated nonempty");
    let top = scaled_counts(&n, h_max);
    if table_entries(&top) > DEFAULT_TABLE_CAP as u128 {
        let feasible = hs
            .iter()
            .filter(|&&h| table_entries(&scaled_counts(&n, h)) <= DEFAULT_TABLE_CAP as u128)
            .last();
        return Err(ExperimentError::ResourceCap(format!(
            "normalizing table for h = {h_max} exceeds {DEFAULT_TABLE_CAP} entries; largest feasible h in the list is {}",
            feasible.map_or("none".to_string(), |h| h.to_string())
        )));
    }
    let table = bn_table::<f64>(topo, &top)?;
    let pf = solve_pf(topo, &n)?;
    let mut cols = vec!["h".to_string()];
    cols.extend(net.route_names.iter().map(|r| format!("lambda_sn_{r}")));
    cols.extend(net.route_names.iter().map(|r| format!("lambda_pf_{r}")));
    cols.push("error".into());
    let mut t = ResultTable::new(cols, spec)?;
    for &h in &hs {
        let counts = scaled_counts(&n, h);
        let sn = spinning_allocation(topo, &counts, &table)?.lambda;
        let err = sn
            .iter()
            .zip(pf.lambda())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        let mut row = vec![Cell::from(h)];
        row.extend(sn.iter().map(|&x| Cell::from(x)));
        row.extend(pf.lambda().iter().map(|&x| Cell::from(x)));
        row.push(err.into());
        t.push(row);
    }
    Ok(t)
}

/// Conditional concentration of `M / h` given `N = floor(hn)` on the
/// manifold: exceedance probability of distance `epsilon` and the mean
/// deviations `(1/h) E|M_ji C_j - M_j Lambda^PF_i|`.
pub fn run_collapse(spec: &ExperimentSpec) -> Result<ResultTable, ExperimentError> {
    let net = &spec.network;
    let topo = &net.topology;
    let n = spec.n()?;
    let hs = spec
        .params
        .h
        .clone()
        .unwrap_or_else(|| DEFAULT_COLLAPSE_H.to_vec());
    let eps = spec.params.epsilon.unwrap_or(DEFAULT_EPSILON);
    let samples = spec.params.samples.unwrap_or(DEFAULT_SAMPLES);
    let lambda = solve_pf(topo, &n)?.allocation.lambda;
    let mut cols = vec![
        "h".to_string(),
        "mode".into(),
        "support".into(),
        "p_exceed".into(),
        "deviation_max".into(),
    ];
    cols.extend(
        (0..topo.incidence_count()).map(|k| format!("deviation_{}", net.incidence_label(k))),
    );
    let mut t = ResultTable::new(cols, spec)?;
    t.note("exact_max_h", EXACT_COLLAPSE_MAX_H.to_string());
    t.note("samples", samples.to_string());
    for &h in &hs {
        let counts = scaled_counts(&n, h);
        let scaled: Vec<f64> = counts.iter().map(|&k| k as f64 / h as f64).collect();
        let manifold = if counts.iter().all(|&k| k == 0) {
            None
        } else {
            Some(Manifold::new(topo, &scaled)?)
        };
        let (weighted, mode): (Vec<(PacketVector<u64>, f64)>, &str) = if h <= EXACT_COLLAPSE_MAX_H {
            (conditional_distribution(topo, &counts)?, "exact")
        } else {
            let cfg = SimConfig::new(1.0, spec.params.seed ^ h);
            let (draws, _) = sample_conditional(topo, &counts, samples, None, &cfg)?;
            (draws.into_iter().map(|m| (m, 1.0)).collect(), "sampled")
        };
        let mut p_exceed = 0.0;
        let mut dev = vec![0.0; topo.incidence_count()];
        for (m, p) in &weighted {
            let x: Vec<f64> = m.as_slice().iter().map(|&k| k as f64 / h as f64).collect();
            let d = match &manifold {
                Some(mf) => mf.distance(&x)?,
                None => 0.0,
            };
            if d >= eps {
                p_exceed += p;
            }
            let totals = m.queue_totals(topo);
            for (k, v) in dev.iter_mut().enumerate() {
                let inc = topo.incidence(k);
                let gap = m[k] as f64 * topo.capacity(inc.queue)
                    - totals[inc.queue] as f64 * lambda[inc.route];
                *v += p * gap.abs() / h as f64;
            }
        }
        let mass: f64 = weighted.iter().map(|(_, p)| p).sum();
        p_exceed /= mass;
        dev.iter_mut().for_each(|v| *v /= mass);
        let mut row = vec![
            Cell::from(h),
            mode.into(),
            Cell::from(weighted.len() as u64),
            p_exceed.into(),
            dev.iter().cloned().fold(0.0, f64::max).into(),
        ];
        row.extend(dev.iter().map(|&v| Cell::from(v)));
        t.push(row);
    }
    Ok(t)
}

fn replica_pmfs(
    spec: &ExperimentSpec,
    bounds: &[u64],
    f: impl Fn(&SimConfig) -> Result<Trajectory, SimError> + Sync,
) -> Result<(Pmf, Vec<f64>, u64), ExperimentError> {
    let base = SimConfig::new(spec.horizon(), spec.params.seed).with_truncation(bounds.to_vec());
    let runs = run_replicas(&base, spec.replicas(), f)?;
    let pmfs: Vec<Pmf> = runs.iter().map(|r| r.pmf.clone()).collect();
    let routes = bounds.len();
    let mean: Vec<f64> = (0..routes)
        .map(|i| runs.iter().map(|r| r.mean_counts[i]).sum::<f64>() / runs.len() as f64)
        .collect();
    let events = runs.iter().map(|r| r.post_warmup_events).sum();
    Ok((Pmf::average(&pmfs)?, mean, events))
}

fn default_bounds(routes: usize) -> Vec<u64> {
    vec![crate::simulate::DEFAULT_BOX; routes]
}

/// Packet-level document-count pmf for each `c` against the exact pmf and
/// a flow-level run, with mean sojourns by Little's law.
pub fn run_scaling(spec: &ExperimentSpec) -> Result<ResultTable, ExperimentError> {
    let net = &spec.network;
    let topo = &net.topology;
    let tr = net.traffic()?;
    let cs = spec.params.c.clone().unwrap_or_else(|| DEFAULT_C.to_vec());
    let bounds = default_bounds(topo.route_count());
    let exact = exact_doc_pmf(topo, tr, &bounds)?;
    let (flow, flow_mean, _) = replica_pmfs(spec, &bounds, |cfg| {
        simulate_flow_level(topo, tr, AllocationSource::Spinning, cfg)
    })?;
    let nu = tr.nu();
    let mut cols = vec![
        "c".to_string(),
        "tv_exact".into(),
        "tv_flow".into(),
        "outside".into(),
        "events".into(),
    ];
    cols.extend(
        net.route_names
            .iter()
            .map(|r| format!("sojourn_packet_{r}")),
    );
    cols.extend(net.route_names.iter().map(|r| format!("sojourn_flow_{r}")));
    let mut t = ResultTable::new(cols, spec)?;
    t.note("truncation_box", format!("{bounds:?}"));
    t.note(
        "warmup_fraction",
        crate::simulate::DEFAULT_WARMUP.to_string(),
    );
    for &c in &cs {
        let (pmf, mean, events) = replica_pmfs(spec, &bounds, |cfg| {
            simulate_open_packet(topo, tr, &cfg.clone().with_scale(c))
        })?;
        let mut row = vec![
            Cell::from(c as u64),
            empirical_tv_distance(&pmf, &exact)?.tv.into(),
            empirical_tv_distance(&pmf, &flow)?.tv.into(),
            pmf.outside().into(),
            Cell::from(events),
        ];
        row.extend(mean.iter().zip(nu).map(|(l, v)| Cell::from(l / v)));
        row.extend(flow_mean.iter().zip(nu).map(|(l, v)| Cell::from(l / v)));
        t.push(row);
    }
    Ok(t)
}

/// Empirical pmf under exponential, deterministic and hyperexponential
/// sizes against the exact pmf; the last row halves every `mu` as a negative
/// control.
pub fn run_insensitivity(spec: &ExperimentSpec) -> Result<ResultTable, ExperimentError> {
    let net = &spec.network;
    let topo = &net.topology;
    let tr = net.traffic()?;
    let bounds = default_bounds(topo.route_count());
    let exact = exact_doc_pmf(topo, tr, &bounds)?;
    let mut t = ResultTable::new(
        vec![
            "size_dist".into(),
            "mean_scale".into(),
            "tv".into(),
            "outside".into(),
            "events".into(),
        ],
        spec,
    )?;
    t.note("hyperexponential_p", HYPEREXP_P.to_string());
    let cases: [(&str, SizeDist, f64); 4] = [
        ("exponential", SizeDist::Exponential, 1.0),
        ("deterministic", SizeDist::Deterministic, 1.0),
        (
            "hyperexponential",
            SizeDist::Hyperexponential { p: HYPEREXP_P },
            1.0,
        ),
        ("exponential_halved_mu", SizeDist::Exponential, 2.0),
    ];
    for (name, dist, scale) in cases {
        let variant = tr.with_size_dist(dist)?.with_mu_scaled(1.0 / scale)?;
        if !stability_check(topo, &variant).stable {
            t.note(name, "skipped: unstable");
            t.push(vec![
                name.into(),
                scale.into(),
                f64::NAN.into(),
                f64::NAN.into(),
                Cell::from(0u64),
            ]);
            continue;
        }
        let (pmf, _, events) = replica_pmfs(spec, &bounds, |cfg| {
            simulate_flow_level_general_sizes(topo, &variant, AllocationSource::Spinning, cfg)
        })?;
        t.push(vec![
            name.into(),
            scale.into(),
            empirical_tv_distance(&pmf, &exact)?.tv.into(),
            pmf.outside().into(),
            Cell::from(events),
        ]);
    }
    Ok(t)
}

/// Flow-level spinning run: per-route summary plus the replica-0 path.
pub fn run_simulate(spec: &ExperimentSpec) -> Result<(ResultTable, Trajectory), ExperimentError> {
    let net = &spec.network;
    let topo = &net.topology;
    let tr = net.traffic()?;
    let cfg = SimConfig::new(spec.horizon(), spec.params.seed).with_path();
    let traj = simulate_flow_level(topo, tr, AllocationSource::Spinning, &cfg)?;
    let mut t = ResultTable::new(
        vec![
            "route".into(),
            "mean_count".into(),
            "mean_sojourn".into(),
            "arrivals".into(),
            "departures".into(),
        ],
        spec,
    )?;
    let sojourn = traj.mean_sojourn(tr);
    for i in 0..topo.route_count() {
        t.push(vec![
            net.route_names[i].clone().into(),
            traj.mean_counts[i].into(),
            sojourn[i].into(),
            Cell::from(traj.arrivals[i]),
            Cell::from(traj.departures[i]),
        ]);
    }
    if stability_check(topo, tr).stable {
        let exact = exact_doc_pmf(topo, tr, traj.pmf.bounds())?;
        t.note(
            "tv_exact",
            format_real(empirical_tv_distance(&traj.pmf, &exact)?.tv),
        );
    }
    Ok((t, traj))
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const LINEAR: &str = r#"{
        "queues": [{"name": "q0", "capacity": 1}, {"name": "q1", "capacity": 1}],
        "routes": [{"name": "r0", "queues": ["q0", "q1"]},
                   {"name": "r1", "queues": ["q0"]},
                   {"name": "r2", "queues": ["q1"]}],
        "traffic": [{"route": "r0", "nu": 0.25, "mu": 1},
                    {"route": "r1", "nu": 0.25, "mu": 1},
                    {"route": "r2", "nu": 0.25, "mu": 1}]
    }"#;

    fn spec(kind: ExperimentKind, params: Params) -> ExperimentSpec {
        ExperimentSpec::new(kind, LINEAR.to_string(), params).unwrap()
    }

    fn with_n(n: &[f64]) -> Params {
        Params {
            n: Some(n.to_vec()),
            ..Default::default()
        }
    }

    #[test]
    fn parse_resolves_names() {
        let net = parse_network(LINEAR).unwrap();
        assert_eq!(net.topology.routes(), &[vec![0, 1], vec![0], vec![1]]);
        assert_eq!(net.traffic.unwrap().rho(), &[0.25; 3]);
    }

    #[test]
    fn parse_errors_are_config_errors() {
        let bad = LINEAR.replace(r#"["q0"]"#, r#"["q9"]"#);
        assert_eq!(parse_network(&bad).unwrap_err().exit_code(), 2);
        let dup = LINEAR.replace(r#"["q0", "q1"]"#, r#"["q0", "q0"]"#);
        assert_eq!(parse_network(&dup).unwrap_err().exit_code(), 2);
        assert_eq!(parse_network("{").unwrap_err().exit_code(), 2);
    }

    #[test]
    fn spec_validation() {
        let p = Params {
            h: Some(vec![1, 4, 2]),
            ..with_n(&[1.0; 3])
        };
        assert!(ExperimentSpec::new(ExperimentKind::Converge, LINEAR.into(), p).is_err());
        let p = with_n(&[1.0; 2]);
        assert!(ExperimentSpec::new(ExperimentKind::Pf, LINEAR.into(), p).is_err());
    }

    #[test]
    fn converge_first_error() {
        let p = Params {
            h: Some(vec![1, 2, 4]),
            ..with_n(&[1.0; 3])
        };
        let t = run_converge(&spec(ExperimentKind::Converge, p)).unwrap();
        let e = t.real_column("error").unwrap();
        assert!((e[0] - 1.0 / 12.0).abs() < 1e-10);
    }

    #[test]
    fn pf_zero_counts_give_zero_allocation() {
        let t = run_pf(&spec(ExperimentKind::Pf, with_n(&[0.0; 3]))).unwrap();
        let lam: Vec<f64> = t
            .rows()
            .iter()
            .filter(|r| r[0] == Cell::from("lambda_pf"))
            .map(|r| r[2].as_real().unwrap())
            .collect();
        assert_eq!(lam, vec![0.0; 3]);
    }

    #[test]
    fn rates_gap_small() {
        let t = run_rates(&spec(ExperimentKind::Rates, with_n(&[1.0; 3]))).unwrap();
        let gap = t
            .rows()
            .iter()
            .find(|r| r[0] == Cell::from("duality_gap"))
            .unwrap()[2]
            .as_real()
            .unwrap();
        assert!(gap <= 1e-6);
    }

    #[test]
    fn collapse_first_row() {
        let p = Params {
            h: Some(vec![1]),
            epsilon: Some(0.25),
            ..with_n(&[1.0; 3])
        };
        let t = run_collapse(&spec(ExperimentKind::Collapse, p)).unwrap();
        assert_eq!(t.real_column("p_exceed").unwrap(), vec![1.0]);
    }

    #[test]
    fn csv_format_and_hash_are_stable() {
        let s = spec(ExperimentKind::Exact, with_n(&[1.0; 3]));
        let a = run_exact(&s).unwrap();
        let b = run_exact(&s).unwrap();
        assert_eq!(a.to_csv().unwrap(), b.to_csv().unwrap());
        assert_eq!(a.meta_json(), b.meta_json());
        let csv = String::from_utf8(a.to_csv().unwrap()).unwrap();
        assert!(
            csv.starts_with("quantity,key,value\nB_n,,4.0000000000000000e0\n"),
            "{csv}"
        );
        assert_eq!(s.config_hash().len(), 64);
    }

    #[test]
    fn format_real_digits() {
        assert_eq!(format_real(0.25), "2.5000000000000000e-1");
        assert_eq!(format_real(1.0 / 3.0), "3.3333333333333331e-1");
        assert_eq!(format_real(f64::NAN), "NaN");
    }
}
