//! Experiment driver: baseline and greedy plans over an alpha sweep, measured-recall ef_s tuning and
//! fitting protocols for the latency and recall models.

use std::collections::{BTreeMap, HashMap};
use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use crate::engine::{Deployment, GroundTruth, IndexCache};
use crate::error::{Error, Result};
use crate::ids::PartitionId;
use crate::index::{Dataset, Distance, HnswParams};
use crate::partition::{greedy_split, PartitionPlan, SplitConfig};
use crate::perf::{solve_ef_s, CostModel, LatencyParams, LatencySample, ModelParams, RecallParams, RecallSample};
use crate::rbac::{user_selectivity, RbacPolicy};
use crate::scalar::Scalar;
use crate::workload::{
    gen_erbac, gen_queries, gen_tree, gen_uniform, gen_vectors, ErbacParams, QueryWorkload, TreeParams, UniformParams,
};

pub const CSV_HEADER: &str =
    "method,alpha_target,alpha_measured,k,seed,ef_s,mean_recall,mean_wall_us,mean_dist_evals,num_partitions";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    /// One partition over the whole corpus, filtered at query time.
    Rls,
    RolePartition,
    /// One partition per distinct role set held by some user.
    UserPartition,
    HoneyBee,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Rls, Method::RolePartition, Method::UserPartition, Method::HoneyBee];

    pub fn name(self) -> &'static str {
        match self {
            Method::Rls => "rls",
            Method::RolePartition => "role_partition",
            Method::UserPartition => "user_partition",
            Method::HoneyBee => "honeybee",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| Error::params(format!("unknown method {s}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GeneratorKind {
    TreeAlpha,
    TreeS,
    ErbacAlpha,
    ErbacBeta,
    ErbacS,
    UniformAlpha,
    UniformS,
}

impl GeneratorKind {
    const NAMES: [(GeneratorKind, &'static str); 7] = [
        (GeneratorKind::TreeAlpha, "tree_alpha"),
        (GeneratorKind::TreeS, "tree_s"),
        (GeneratorKind::ErbacAlpha, "erbac_alpha"),
        (GeneratorKind::ErbacBeta, "erbac_beta"),
        (GeneratorKind::ErbacS, "erbac_s"),
        (GeneratorKind::UniformAlpha, "uniform_alpha"),
        (GeneratorKind::UniformS, "uniform_s"),
    ];

    pub fn name(self) -> &'static str {
        Self::NAMES.iter().find(|(k, _)| *k == self).map(|(_, n)| *n).unwrap_or("?")
    }
}

impl FromStr for GeneratorKind {
    type Err = Error;

    /// Full names, or a bare family name (`tree`, `erbac`, `uniform`) for its alpha variant.
    fn from_str(s: &str) -> Result<Self> {
        let full = if s.contains('_') { s.to_string() } else { format!("{s}_alpha") };
        Self::NAMES
            .iter()
            .find(|(_, n)| *n == full)
            .map(|(k, _)| *k)
            .ok_or_else(|| Error::params(format!("unknown generator {s}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorSpec {
    pub kind: GeneratorKind,
    pub users: usize,
    /// Ignored by the ERBAC generators, which fix their own role counts.
    pub roles: usize,
    pub docs: usize,
    pub poisson_mean: f64,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        GeneratorSpec { kind: GeneratorKind::TreeAlpha, users: 1000, roles: 100, docs: 20_000, poisson_mean: 100.0 }
    }
}

impl GeneratorSpec {
    pub fn generate(&self, seed: u64) -> Result<RbacPolicy> {
        let (u, r, d) = (self.users, self.roles, self.docs);
        match self.kind {
            GeneratorKind::TreeAlpha => gen_tree(&TreeParams::alpha(u, r, d), seed),
            GeneratorKind::TreeS => gen_tree(&TreeParams::s(u, r, d, self.poisson_mean), seed),
            GeneratorKind::ErbacAlpha => gen_erbac(&ErbacParams::alpha(u, d), seed),
            GeneratorKind::ErbacBeta => gen_erbac(&ErbacParams::beta(u, d), seed),
            GeneratorKind::ErbacS => gen_erbac(&ErbacParams::s(u, d), seed),
            GeneratorKind::UniformAlpha => gen_uniform(&UniformParams::alpha(u, r, d), seed),
            GeneratorKind::UniformS => gen_uniform(&UniformParams::s(u, r, d), seed),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    /// Standard normal vectors; `seed` defaults to the experiment seed.
    Synthetic { n: Option<usize>, dim: usize, seed: Option<u64> },
    Fvecs(PathBuf),
}

impl DataSource {
    /// At least `min_rows` vectors; synthetic sets default to exactly that many.
    pub fn load(&self, min_rows: usize, seed: u64) -> Result<Dataset<f32>> {
        let data = match self {
            DataSource::Synthetic { n, dim, seed: s } => gen_vectors(n.unwrap_or(min_rows), *dim, s.unwrap_or(seed))?,
            DataSource::Fvecs(path) => Dataset::read_fvecs(path)?,
        };
        if data.len() < min_rows {
            return Err(Error::params(format!("{} vectors for {min_rows} documents", data.len())));
        }
        Ok(data)
    }
}

/// Experiment settings read from `key = value` lines.
///
/// Keys: `data` (`synthetic` or an fvecs path), `n`, `dim`, `data_seed`, `generator`, `users`, `roles`,
/// `docs`, `poisson_mean`, `methods`, `alphas`, `epsilon`, `k`, `plan_k`, `seeds`, `queries`, `repeats`, `m`,
/// `ef_construction`, `distance`, `a`, `b`, `beta`, `gamma`, `model` (a fitted-parameter file), `ef_cap`,
/// `output`. List values are comma separated.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub data: DataSource,
    pub generator: GeneratorSpec,
    pub methods: Vec<Method>,
    pub alphas: Vec<f64>,
    pub epsilon: f64,
    pub k_list: Vec<usize>,
    /// Representative k the greedy plans are optimized for.
    pub plan_k: usize,
    pub seeds: Vec<u64>,
    pub queries: usize,
    pub repeats: usize,
    pub hnsw: HnswParams,
    pub latency: LatencyParams<f64>,
    pub recall: RecallParams<f64>,
    pub model: Option<PathBuf>,
    pub ef_cap: usize,
    pub output: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let d = SplitConfig::with_defaults(1.0, 0.9);
        let CostModel::HnswPostFilter(latency) = d.model else { unreachable!() };
        ExperimentConfig {
            data: DataSource::Synthetic { n: None, dim: 64, seed: None },
            generator: GeneratorSpec::default(),
            methods: Method::ALL.to_vec(),
            alphas: vec![1.0, 1.2, 1.5, 2.0, 3.0],
            epsilon: 0.9,
            k_list: vec![10],
            plan_k: 10,
            seeds: vec![1],
            queries: 200,
            repeats: 2,
            hnsw: HnswParams::default(),
            latency,
            recall: d.recall,
            model: None,
            ef_cap: 1000,
            output: None,
        }
    }
}

fn parse_list<T: FromStr>(v: &str, key: &str, ln: usize) -> Result<Vec<T>> {
    v.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| t.parse().map_err(|_| Error::parse(ln, format!("{key}: bad value {t}"))))
        .collect()
}

fn parse_one<T: FromStr>(v: &str, key: &str, ln: usize) -> Result<T> {
    v.parse().map_err(|_| Error::parse(ln, format!("{key}: bad value {v}")))
}

fn join<I: fmt::Display>(xs: &[I]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        for (i, line) in text.lines().enumerate() {
            let ln = i + 1;
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, v) = line.split_once('=').ok_or_else(|| Error::parse(ln, "expected key = value"))?;
            cfg.set(key.trim(), v.trim(), ln)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets one key; `ln` is only used in error messages.
    pub fn set(&mut self, key: &str, v: &str, ln: usize) -> Result<()> {
        match key {
            "data" => {
                self.data = if v == "synthetic" {
                    match &self.data {
                        DataSource::Synthetic { .. } => self.data.clone(),
                        DataSource::Fvecs(_) => DataSource::Synthetic { n: None, dim: 64, seed: None },
                    }
                } else {
                    DataSource::Fvecs(PathBuf::from(v))
                }
            }
            "n" | "dim" | "data_seed" => {
                let DataSource::Synthetic { n, dim, seed } = &mut self.data else {
                    return Err(Error::parse(ln, format!("{key} needs data = synthetic")));
                };
                match key {
                    "n" => *n = Some(parse_one(v, key, ln)?),
                    "dim" => *dim = parse_one(v, key, ln)?,
                    _ => *seed = Some(parse_one(v, key, ln)?),
                }
            }
            "generator" => self.generator.kind = v.parse().map_err(|e: Error| Error::parse(ln, e.to_string()))?,
            "users" => self.generator.users = parse_one(v, key, ln)?,
            "roles" => self.generator.roles = parse_one(v, key, ln)?,
            "docs" => self.generator.docs = parse_one(v, key, ln)?,
            "poisson_mean" => self.generator.poisson_mean = parse_one(v, key, ln)?,
            "methods" => self.methods = parse_list(v, key, ln)?,
            "alphas" => self.alphas = parse_list(v, key, ln)?,
            "epsilon" => self.epsilon = parse_one(v, key, ln)?,
            "k" => self.k_list = parse_list(v, key, ln)?,
            "plan_k" => self.plan_k = parse_one(v, key, ln)?,
            "seeds" => self.seeds = parse_list(v, key, ln)?,
            "queries" => self.queries = parse_one(v, key, ln)?,
            "repeats" => self.repeats = parse_one(v, key, ln)?,
            "m" => self.hnsw.m = parse_one(v, key, ln)?,
            "ef_construction" => self.hnsw.ef_construction = parse_one(v, key, ln)?,
            "distance" => self.hnsw.distance = Distance::parse(v).ok_or_else(|| Error::parse(ln, format!("unknown distance {v}")))?,
            "a" => self.latency.a = parse_one(v, key, ln)?,
            "b" => self.latency.b = parse_one(v, key, ln)?,
            "beta" => self.recall.beta = parse_one(v, key, ln)?,
            "gamma" => self.recall.gamma = parse_one(v, key, ln)?,
            "model" => self.model = Some(PathBuf::from(v)),
            "ef_cap" => self.ef_cap = parse_one(v, key, ln)?,
            "output" => self.output = Some(PathBuf::from(v)),
            other => return Err(Error::parse(ln, format!("unknown key {other}"))),
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        match &self.data {
            DataSource::Synthetic { n, dim, seed } => {
                out.push_str("data = synthetic\n");
                if let Some(n) = n {
                    let _ = writeln!(out, "n = {n}");
                }
                let _ = writeln!(out, "dim = {dim}");
                if let Some(s) = seed {
                    let _ = writeln!(out, "data_seed = {s}");
                }
            }
            DataSource::Fvecs(p) => {
                let _ = writeln!(out, "data = {}", p.display());
            }
        }
        let g = &self.generator;
        let _ = writeln!(out, "generator = {}\nusers = {}\nroles = {}\ndocs = {}\npoisson_mean = {}", g.kind.name(), g.users, g.roles, g.docs, g.poisson_mean);
        let _ = writeln!(out, "methods = {}\nalphas = {}\nepsilon = {}", join(&self.methods), join(&self.alphas), self.epsilon);
        let _ = writeln!(out, "k = {}\nplan_k = {}\nseeds = {}\nqueries = {}\nrepeats = {}", join(&self.k_list), self.plan_k, join(&self.seeds), self.queries, self.repeats);
        let _ = writeln!(out, "m = {}\nef_construction = {}\ndistance = {}", self.hnsw.m, self.hnsw.ef_construction, self.hnsw.distance.name());
        let _ = writeln!(out, "a = {:e}\nb = {:e}\nbeta = {}\ngamma = {}\nef_cap = {}", self.latency.a, self.latency.b, self.recall.beta, self.recall.gamma, self.ef_cap);
        if let Some(m) = &self.model {
            let _ = writeln!(out, "model = {}", m.display());
        }
        if let Some(o) = &self.output {
            let _ = writeln!(out, "output = {}", o.display());
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(Error::params("no methods selected"));
        }
        if self.methods.contains(&Method::HoneyBee) && self.alphas.is_empty() {
            return Err(Error::params("alpha sweep is empty"));
        }
        if self.alphas.iter().any(|a| !(*a >= 1.0 && a.is_finite())) {
            return Err(Error::params("alphas must be >= 1"));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::params("epsilon must lie in (0, 1)"));
        }
        if self.k_list.is_empty() || self.k_list.contains(&0) || self.plan_k == 0 {
            return Err(Error::params("k list must be non-empty and positive"));
        }
        if self.seeds.is_empty() {
            return Err(Error::params("no seeds"));
        }
        if self.queries == 0 {
            return Err(Error::params("queries must be >= 1"));
        }
        if self.repeats < 2 {
            return Err(Error::params("repeats must be >= 2"));
        }
        if self.ef_cap == 0 {
            return Err(Error::params("ef_cap must be >= 1"));
        }
        self.hnsw.validate()?;
        LatencyParams::new(self.latency.a, self.latency.b)?;
        RecallParams::new(self.recall.beta, self.recall.gamma)?;
        Ok(())
    }

    /// Split configuration for one sweep point, with model parameters loaded from `model` if set.
    pub fn split_config(&self, alpha: f64, k: usize) -> Result<SplitConfig> {
        let (mut latency, mut recall) = (self.latency, self.recall);
        if let Some(path) = &self.model {
            let m = ModelParams::<f64>::from_text(&std::fs::read_to_string(path)?)?;
            latency = m.latency.unwrap_or(latency);
            recall = m.recall.unwrap_or(recall);
        }
        let mut cfg = SplitConfig::new(alpha, self.epsilon, CostModel::HnswPostFilter(latency), recall);
        cfg.k = k;
        cfg.ef_cap = self.ef_cap;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// One measured configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub method: Method,
    /// Sweep value for greedy plans; baselines have none.
    pub alpha_target: Option<f64>,
    pub alpha_measured: f64,
    pub k: usize,
    pub seed: u64,
    pub ef_s: usize,
    pub mean_recall: f64,
    pub mean_wall_us: f64,
    pub mean_dist_evals: f64,
    pub num_partitions: usize,
    pub warning: Option<String>,
}

impl BenchRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{:.6},{},{},{},{:.6},{:.3},{:.3},{}",
            self.method,
            self.alpha_target.map(|a| a.to_string()).unwrap_or_default(),
            self.alpha_measured,
            self.k,
            self.seed,
            self.ef_s,
            self.mean_recall,
            self.mean_wall_us,
            self.mean_dist_evals,
            self.num_partitions
        )
    }
}

/// Header, one line per row, then a `# warning:` comment line per flagged row.
pub fn to_csv(rows: &[BenchRow]) -> String {
    let mut out = format!("{CSV_HEADER}\n");
    for r in rows {
        out.push_str(&r.csv_line());
        out.push('\n');
    }
    for (i, r) in rows.iter().enumerate() {
        if let Some(w) = &r.warning {
            let _ = writeln!(out, "# warning: row {}: {w}", i + 1);
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TuneOptions {
    /// Relative half-width of the first search window around the model estimate.
    pub window: f64,
    /// Bisection stops once the bracket is narrower than this share of the model estimate.
    pub tolerance: f64,
    pub cap: usize,
}

impl Default for TuneOptions {
    fn default() -> Self {
        TuneOptions { window: 0.4, tolerance: 0.1, cap: 1000 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TuneResult {
    pub ef_s: usize,
    pub recall: f64,
    pub model_estimate: usize,
    /// Recall measurements, the estimate included.
    pub probes: usize,
    pub bisections: usize,
    /// Target not met even at the cap.
    pub capped: bool,
}

/// Mean over queries of the querying user's selectivity under the deployment's routing.
pub fn workload_selectivity<T: Scalar>(dep: &Deployment<T>, workload: &QueryWorkload) -> Result<f64> {
    if workload.is_empty() {
        return Err(Error::domain("empty workload"));
    }
    let mut cache: HashMap<_, f64> = HashMap::new();
    let mut total = 0.0;
    for q in &workload.queries {
        let s = match cache.get(&q.user) {
            Some(s) => *s,
            None => {
                let s = user_selectivity(dep.policy(), q.user, dep.plan(), dep.routing())?;
                cache.insert(q.user, s);
                s
            }
        };
        total += s;
    }
    Ok(total / workload.len() as f64)
}

/// Smallest ef_s (within the tolerance) whose measured mean recall reaches `epsilon`, starting from the
/// model estimate and searching its ±window first. Leaves the deployment at the returned width.
pub fn tune_ef_s<T: Scalar>(
    dep: &mut Deployment<T>,
    workload: &QueryWorkload,
    truth: &GroundTruth,
    epsilon: f64,
    model: &RecallParams<f64>,
    opts: &TuneOptions,
) -> Result<TuneResult> {
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(Error::params("epsilon must lie in (0, 1)"));
    }
    let k = workload.k;
    let cap = opts.cap.max(k);
    let sel = workload_selectivity(dep, workload)?;
    let est = solve_ef_s(model, epsilon, sel, k, cap)?.ef;
    let tol = ((opts.tolerance * est as f64).ceil() as usize).max(1);
    let mut probes = 0;
    let mut measure = |dep: &mut Deployment<T>, ef: usize| -> Result<f64> {
        probes += 1;
        dep.set_ef_s(ef);
        dep.measure_recall_with(workload, truth)
    };

    let r_est = measure(dep, est)?;
    let (mut lo, mut hi, mut r_hi);
    if r_est >= epsilon {
        (hi, r_hi) = (est, r_est);
        lo = ((est as f64 * (1.0 - opts.window)).floor() as usize).max(k);
        if lo < hi {
            let r_lo = measure(dep, lo)?;
            if r_lo >= epsilon {
                (hi, r_hi) = (lo, r_lo);
            }
        }
        if r_hi >= epsilon && hi == lo {
            dep.set_ef_s(hi);
            return Ok(TuneResult { ef_s: hi, recall: r_hi, model_estimate: est, probes, bisections: 0, capped: false });
        }
    } else {
        lo = est;
        hi = ((est as f64 * (1.0 + opts.window)).ceil() as usize).min(cap);
        loop {
            if hi <= lo {
                dep.set_ef_s(cap);
                return Ok(TuneResult { ef_s: cap, recall: r_est.max(0.0), model_estimate: est, probes, bisections: 0, capped: true });
            }
            let r = measure(dep, hi)?;
            if r >= epsilon {
                r_hi = r;
                break;
            }
            if hi == cap {
                return Ok(TuneResult { ef_s: cap, recall: r, model_estimate: est, probes, bisections: 0, capped: true });
            }
            lo = hi;
            hi = (hi * 2).min(cap);
        }
    }
    let mut bisections = 0;
    while hi - lo > tol {
        let mid = lo + (hi - lo) / 2;
        bisections += 1;
        let r = measure(dep, mid)?;
        if r >= epsilon {
            (hi, r_hi) = (mid, r);
        } else {
            lo = mid;
        }
    }
    dep.set_ef_s(hi);
    Ok(TuneResult { ef_s: hi, recall: r_hi, model_estimate: est, probes, bisections, capped: false })
}

/// Plans evaluated for one seed: baselines once, the greedy plan per sweep value, optimized for `plan_k`.
pub fn method_plans(policy: &RbacPolicy, cfg: &ExperimentConfig) -> Result<Vec<(Method, Option<f64>, PartitionPlan)>> {
    let mut out = Vec::new();
    for &m in &cfg.methods {
        match m {
            Method::Rls => out.push((m, None, PartitionPlan::single(policy))),
            Method::RolePartition => out.push((m, None, PartitionPlan::per_role(policy))),
            Method::UserPartition => out.push((m, None, PartitionPlan::per_role_combination(policy))),
            Method::HoneyBee => {
                for &a in &cfg.alphas {
                    out.push((m, Some(a), greedy_split(policy, &cfg.split_config(a, cfg.plan_k)?)?));
                }
            }
        }
    }
    Ok(out)
}

/// Every (method or sweep value, k, seed) cell: build, deploy, tune ef_s, measure.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<BenchRow>> {
    cfg.validate()?;
    let model = cfg.split_config(1.0, cfg.k_list[0])?.recall;
    let opts = TuneOptions { cap: cfg.ef_cap, ..TuneOptions::default() };
    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        let policy = cfg.generator.generate(seed)?;
        let dataset = Arc::new(cfg.data.load(policy.num_docs(), seed)?);
        let base = gen_queries(&policy, policy.num_docs(), cfg.queries, cfg.k_list[0], seed)?;
        let mut cache = IndexCache::new(cfg.hnsw, seed);
        let plans = method_plans(&policy, cfg)?;
        for &k in &cfg.k_list {
            let workload = base.with_k(k);
            let truth = GroundTruth::compute(&policy, &dataset, &workload, &cfg.hnsw)?;
            for (method, alpha_target, plan) in plans.iter().cloned() {
                let alpha_measured = plan.memory_ratio();
                let num_partitions = plan.len();
                let mut dep = Deployment::build_cached(policy.clone(), plan, Arc::clone(&dataset), k, &mut cache)?;
                let tune = tune_ef_s(&mut dep, &workload, &truth, cfg.epsilon, &model, &opts)?;
                let lat = dep.measure_latency(&workload, cfg.repeats)?;
                let warning = tune
                    .capped
                    .then(|| format!("{method} recall {:.4} below {} at ef_s cap {}", tune.recall, cfg.epsilon, tune.ef_s));
                rows.push(BenchRow {
                    method,
                    alpha_target,
                    alpha_measured,
                    k,
                    seed,
                    ef_s: tune.ef_s,
                    mean_recall: tune.recall,
                    mean_wall_us: lat.mean_wall_seconds * 1e6,
                    mean_dist_evals: lat.mean_distance_evals,
                    num_partitions,
                    warning,
                });
            }
        }
    }
    Ok(rows)
}

/// What a latency sample records as its time.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum LatencyMetric {
    #[default]
    WallSeconds,
    /// Distance evaluations, a machine-independent stand-in for time.
    DistanceEvals,
}

/// Latency fitting protocol: one partition per role, queries only from single-role users so every query
/// touches one partition, several ef_s values. One sample per (partition, ef_s) with the mean over that
/// partition's queries, first run of each query discarded. Pairs where the partition holds fewer than
/// `4 * ef_s` documents are dropped: there the search exhausts the partition and stops growing with ef_s.
pub fn latency_samples<T: Scalar>(
    policy: &RbacPolicy,
    dataset: Arc<Dataset<T>>,
    hnsw: HnswParams,
    ef_values: &[usize],
    n_queries: usize,
    k: usize,
    repeats: usize,
    metric: LatencyMetric,
    seed: u64,
) -> Result<Vec<LatencySample<f64>>> {
    if repeats < 2 {
        return Err(Error::params("repeats must be >= 2"));
    }
    let single: Vec<_> = policy.users().filter(|&u| policy.user_roles(u).is_ok_and(|r| r.len() == 1)).collect();
    if single.is_empty() {
        return Err(Error::domain("policy has no single-role user"));
    }
    let plan = PartitionPlan::per_role(policy);
    let mut dep = Deployment::build(policy.clone(), plan, dataset, hnsw, k, seed)?;
    let workload = gen_queries(policy, policy.num_docs(), n_queries * 4, k, seed)?;
    let queries: Vec<_> = workload.queries.iter().filter(|q| single.contains(&q.user)).take(n_queries).copied().collect();
    let mut acc: BTreeMap<(PartitionId, usize), (f64, usize)> = BTreeMap::new();
    for &ef in ef_values {
        dep.set_ef_s(ef);
        for q in &queries {
            let route = dep.routing().user(q.user)?.to_vec();
            let [p] = route[..] else { continue };
            let v = dep.dataset().row(q.vector).to_vec();
            dep.execute(q.user, &v, k)?;
            for _ in 1..repeats {
                let (_, s) = dep.execute(q.user, &v, k)?;
                let t = match metric {
                    LatencyMetric::WallSeconds => s.wall_seconds,
                    LatencyMetric::DistanceEvals => s.distance_evals as f64,
                };
                let e = acc.entry((p, ef)).or_insert((0.0, 0));
                e.0 += t;
                e.1 += 1;
            }
        }
    }
    Ok(acc
        .into_iter()
        .filter(|((p, ef), _)| dep.plan().partition(*p).len() >= (4 * ef).max(2))
        .map(|((p, ef), (t, n))| LatencySample { partition_size: dep.plan().partition(p).len(), ef_s: ef as f64, seconds: t / n as f64 })
        .collect())
}

/// One recall sample per ef_s: mean measured recall and mean selectivity of the workload on `dep`.
pub fn recall_samples<T: Scalar>(
    dep: &mut Deployment<T>,
    workload: &QueryWorkload,
    truth: &GroundTruth,
    ef_values: &[usize],
) -> Result<Vec<RecallSample<f64>>> {
    let sel = workload_selectivity(dep, workload)?;
    let before = dep.ef_s();
    let mut out = Vec::with_capacity(ef_values.len());
    for &ef in ef_values {
        dep.set_ef_s(ef);
        let recall = dep.measure_recall_with(workload, truth)?;
        out.push(RecallSample { ef_s: ef as f64, selectivity: sel, k: workload.k, recall });
    }
    dep.set_ef_s(before);
    Ok(out)
}

/// Recall fitting protocol: single-partition deployment where every user holds one role granting a
/// random `selectivity` share of the corpus.
pub fn recall_protocol<T: Scalar>(
    dataset: Arc<Dataset<T>>,
    hnsw: HnswParams,
    selectivity: f64,
    ef_values: &[usize],
    k: usize,
    n_queries: usize,
    seed: u64,
) -> Result<Vec<RecallSample<f64>>> {
    if !(selectivity > 0.0 && selectivity <= 1.0) {
        return Err(Error::params("selectivity must lie in (0, 1]"));
    }
    let n = dataset.len();
    let per_role = ((selectivity * n as f64).round() as usize).clamp(1, n);
    let params = UniformParams { max_roles_per_user: 1, max_docs_per_role: per_role, num_users: 100, num_roles: 20, num_docs: n, exact_counts: true };
    let policy = gen_uniform(&params, seed)?;
    let plan = PartitionPlan::single(&policy);
    let mut dep = Deployment::build(policy, plan, dataset, hnsw, k, seed)?;
    let workload = gen_queries(dep.policy(), n, n_queries, k, seed ^ 0x5eed)?;
    let truth = dep.ground_truth(&workload)?;
    recall_samples(&mut dep, &workload, &truth, ef_values)
}

/// Writes `to_csv(rows)` to `path`.
pub fn write_csv(path: impl AsRef<Path>, rows: &[BenchRow]) -> Result<()> {
    std::fs::write(path, to_csv(rows))?;
    Ok(())
}
