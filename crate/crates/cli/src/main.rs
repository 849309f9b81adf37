use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use honeybee_core::bench::{
    latency_samples, recall_protocol, run_experiment, to_csv, ExperimentConfig, GeneratorKind, GeneratorSpec,
    LatencyMetric,
};
use honeybee_core::engine::Deployment;
use honeybee_core::maintenance::{apply, parse_change_log, staleness_report};
use honeybee_core::partition::{build_routing, evaluate_plan, greedy_split_traced};
use honeybee_core::perf::{fit_latency, fit_recall, CostModel, ModelParams};
use honeybee_core::workload::{gen_queries, gen_tree, gen_vectors, QueryWorkload, TreeParams};
use honeybee_core::{Dataset, Distance, HnswParams, PartitionPlan, RbacPolicy, Result, SplitConfig, Vectors};

#[derive(Parser)]
#[command(name = "honeybee", version, about = "Role-aware partitioning for permission-filtered vector search")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a policy, and optionally vectors and a query workload.
    Gen(GenArgs),
    /// Measure latency and recall on synthetic data and fit the model parameters.
    Fit(FitArgs),
    /// Split a policy into overlapping partitions.
    Plan(PlanArgs),
    /// Build indexes for a plan and write a deployment directory.
    Deploy(DeployArgs),
    /// Run a workload against a deployment and print per-query CSV.
    Query(QueryArgs),
    /// Apply a change log to a deployment in place.
    Update(UpdateArgs),
    /// Run an experiment sweep and print the CSV report.
    Bench(BenchArgs),
}

#[derive(Args)]
struct GenArgs {
    /// tree, erbac or uniform, optionally suffixed `_alpha`, `_beta` (erbac) or `_s`.
    #[arg(long, alias = "generator", default_value = "tree_alpha")]
    kind: String,
    #[arg(long, default_value_t = 1000)]
    users: usize,
    #[arg(long, default_value_t = 100)]
    roles: usize,
    #[arg(long, default_value_t = 20_000)]
    docs: usize,
    #[arg(long, default_value_t = 100.0)]
    poisson_mean: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Policy output file.
    #[arg(long)]
    out: PathBuf,
    /// Also write standard normal vectors of this dimension.
    #[arg(long, requires = "vectors")]
    dim: Option<usize>,
    #[arg(long)]
    vectors: Option<PathBuf>,
    /// Also write a query workload of this many queries.
    #[arg(long, requires = "workload")]
    queries: Option<usize>,
    #[arg(long)]
    workload: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    k: usize,
}

#[derive(Args)]
struct FitArgs {
    #[arg(long, default_value_t = 20_000)]
    docs: usize,
    #[arg(long, default_value_t = 64)]
    dim: usize,
    #[arg(long, default_value_t = 1000)]
    queries: usize,
    #[arg(long, default_value_t = 10)]
    k: usize,
    #[arg(long, default_value_t = 0.1)]
    selectivity: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Fit latency on distance evaluations instead of wall time.
    #[arg(long)]
    dist_evals: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long, default_value_t = 0.9)]
    epsilon: f64,
    #[arg(long, default_value_t = 10)]
    k: usize,
    /// Fitted parameter file written by `fit`.
    #[arg(long)]
    model: Option<PathBuf>,
}

impl ModelArgs {
    fn config(&self, alpha: f64) -> Result<SplitConfig> {
        let mut cfg = SplitConfig::with_defaults(alpha, self.epsilon);
        cfg.k = self.k;
        if let Some(path) = &self.model {
            let m = ModelParams::<f64>::from_text(&fs::read_to_string(path)?)?;
            if let Some(l) = m.latency {
                cfg.model = CostModel::HnswPostFilter(l);
            }
            if let Some(r) = m.recall {
                cfg.recall = r;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct PlanArgs {
    #[arg(long)]
    policy: PathBuf,
    #[arg(long, default_value_t = 2.0)]
    alpha: f64,
    #[command(flatten)]
    model: ModelArgs,
    /// Plan output file.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    routing: Option<PathBuf>,
}

#[derive(Args)]
struct DeployArgs {
    #[arg(long)]
    policy: PathBuf,
    #[arg(long)]
    plan: PathBuf,
    /// fvecs file; synthetic vectors are generated when absent.
    #[arg(long)]
    vectors: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    dim: usize,
    #[arg(long, default_value_t = 100)]
    ef_s: usize,
    #[arg(long, default_value_t = 16)]
    m: usize,
    #[arg(long, default_value_t = 64)]
    ef_construction: usize,
    #[arg(long, default_value = "euclidean")]
    distance: String,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Deployment directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct QueryArgs {
    #[arg(long)]
    deployment: PathBuf,
    #[arg(long)]
    workload: PathBuf,
    /// Override the deployment's ef_s.
    #[arg(long)]
    ef_s: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct UpdateArgs {
    #[arg(long)]
    deployment: PathBuf,
    #[arg(long)]
    log: PathBuf,
    #[arg(long, default_value_t = 2.0)]
    alpha: f64,
    #[command(flatten)]
    model: ModelArgs,
    /// Also compare with a fresh split.
    #[arg(long)]
    staleness: bool,
}

#[derive(Args)]
struct BenchArgs {
    /// `key = value` experiment file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra `key=value` settings applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[arg(long)]
    generator: Option<String>,
    #[arg(long)]
    methods: Option<String>,
    #[arg(long)]
    alphas: Option<String>,
    #[arg(long)]
    epsilon: Option<String>,
    #[arg(long)]
    k: Option<String>,
    #[arg(long)]
    seeds: Option<String>,
    #[arg(long)]
    queries: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Outcome of a successful command: warnings turn the exit code into 2.
type Warnings = Vec<String>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let res = match cli.cmd {
        Cmd::Gen(a) => gen(a),
        Cmd::Fit(a) => fit(a),
        Cmd::Plan(a) => plan(a),
        Cmd::Deploy(a) => deploy(a),
        Cmd::Query(a) => query(a),
        Cmd::Update(a) => update(a),
        Cmd::Bench(a) => bench(a),
    };
    match res {
        Ok(w) if w.is_empty() => ExitCode::SUCCESS,
        Ok(w) => {
            for line in w {
                eprintln!("warning: {line}");
            }
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn read_policy(path: &Path) -> Result<RbacPolicy> {
    RbacPolicy::from_text(&fs::read_to_string(path)?)
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn gen(a: GenArgs) -> Result<Warnings> {
    let spec = GeneratorSpec {
        kind: a.kind.parse::<GeneratorKind>()?,
        users: a.users,
        roles: a.roles,
        docs: a.docs,
        poisson_mean: a.poisson_mean,
    };
    let policy = spec.generate(a.seed)?;
    fs::write(&a.out, policy.to_text())?;
    if let (Some(dim), Some(path)) = (a.dim, &a.vectors) {
        gen_vectors::<f32>(policy.num_docs(), dim, a.seed)?.write_fvecs(path)?;
    }
    if let (Some(n), Some(path)) = (a.queries, &a.workload) {
        fs::write(path, gen_queries(&policy, policy.num_docs(), n, a.k, a.seed)?.to_text())?;
    }
    println!(
        "users={} roles={} docs={} assigned_docs={}",
        policy.live_user_count(),
        policy.live_role_count(),
        policy.num_docs(),
        policy.assigned_docs().len()
    );
    Ok(Vec::new())
}

fn fit(a: FitArgs) -> Result<Warnings> {
    let mut warnings = Vec::new();
    let data = Arc::new(gen_vectors::<f32>(a.docs, a.dim, a.seed)?);
    let policy = gen_tree(&TreeParams::alpha(a.queries.max(100), 100, a.docs), a.seed)?;
    let metric = if a.dist_evals { LatencyMetric::DistanceEvals } else { LatencyMetric::WallSeconds };
    let efs = [10, 20, 40, 80, 120, 160];
    let lat = latency_samples(&policy, Arc::clone(&data), HnswParams::default(), &efs, a.queries, a.k, 6, metric, a.seed)?;
    let lfit = fit_latency(&lat)?;
    let recall_efs = [10, 15, 20, 30, 40, 60, 80, 120, 160, 240, 320, 480, 640, 1000];
    let rec = recall_protocol(data, HnswParams::default(), a.selectivity, &recall_efs, a.k, a.queries, a.seed)?;
    let rfit = fit_recall(&rec)?;
    println!("latency a={:e} b={:e} r2={:.4} samples={}", lfit.params.a, lfit.params.b, lfit.r_squared, lat.len());
    println!("recall beta={:.4} gamma={:.4} rmse={:.4} samples={}", rfit.params.beta, rfit.params.gamma, rfit.rmse, rec.len());
    if lfit.r_squared < 0.9 {
        warnings.push(format!("latency fit r2 {:.3} below 0.9", lfit.r_squared));
    }
    if rfit.rmse > 0.07 {
        warnings.push(format!("recall fit rmse {:.3} above 0.07", rfit.rmse));
    }
    let params = ModelParams { latency: Some(lfit.params), recall: Some(rfit.params) };
    fs::write(&a.out, params.to_text())?;
    Ok(warnings)
}

fn plan(a: PlanArgs) -> Result<Warnings> {
    let policy = read_policy(&a.policy)?;
    let cfg = a.model.config(a.alpha)?;
    let out = greedy_split_traced(&policy, &cfg)?;
    fs::write(&a.out, out.plan.to_text())?;
    if let Some(path) = &a.routing {
        fs::write(path, build_routing(&policy, &out.plan)?.to_text())?;
    }
    let e = &out.eval;
    println!(
        "partitions={} alpha_measured={:.4} mean_selectivity={:.4} ef_s={} modeled_recall={:.4} user_cost={:e} moves={}",
        out.plan.len(),
        out.plan.memory_ratio(),
        e.mean_selectivity,
        e.ef_s,
        e.modeled_recall,
        e.user_cost,
        out.moves
    );
    let mut w = Vec::new();
    if e.ef_capped {
        w.push(format!("recall target {} unreachable at ef_s cap {}", cfg.epsilon, cfg.ef_cap));
    }
    Ok(w)
}

fn deploy(a: DeployArgs) -> Result<Warnings> {
    let policy = read_policy(&a.policy)?;
    let plan = PartitionPlan::from_text(&fs::read_to_string(&a.plan)?, &policy)?;
    let data: Vectors = match &a.vectors {
        Some(p) => Dataset::read_fvecs(p)?,
        None => gen_vectors(policy.num_docs(), a.dim, a.seed)?,
    };
    let distance = Distance::parse(&a.distance)
        .ok_or_else(|| honeybee_core::Error::InvalidParams(format!("unknown distance {}", a.distance)))?;
    let hnsw = HnswParams { m: a.m, ef_construction: a.ef_construction, distance };
    hnsw.validate()?;
    let dep = Deployment::build(policy, plan, Arc::new(data), hnsw, a.ef_s, a.seed)?;
    dep.save(&a.out)?;
    println!("partitions={} indexed_docs={}", dep.num_partitions(), dep.plan().total_docs());
    Ok(Vec::new())
}

fn query(a: QueryArgs) -> Result<Warnings> {
    let mut dep = Deployment::<f32>::load(&a.deployment)?;
    if let Some(ef) = a.ef_s {
        dep.set_ef_s(ef);
    }
    let workload = QueryWorkload::from_text(&fs::read_to_string(&a.workload)?)?;
    let truth = dep.ground_truth(&workload)?;
    let stats = dep.run_workload(&workload, &truth)?;
    let mut out = String::from("qid,user,k,wall_us,dist_evals,recall\n");
    for (i, (q, s)) in workload.queries.iter().zip(&stats).enumerate() {
        let _ = writeln!(
            out,
            "{i},{},{},{:.3},{},{:.6}",
            q.user,
            workload.k,
            s.wall_seconds * 1e6,
            s.distance_evals,
            s.recall_at_k.unwrap_or(f64::NAN)
        );
    }
    emit(a.out.as_deref(), &out)?;
    Ok(Vec::new())
}

fn update(a: UpdateArgs) -> Result<Warnings> {
    let mut dep = Deployment::<f32>::load(&a.deployment)?;
    let ops = parse_change_log(&fs::read_to_string(&a.log)?)?;
    let cfg = a.model.config(a.alpha)?;
    for op in &ops {
        let r = apply(&mut dep, op, &cfg)?;
        println!(
            "{op}: touched={:?} rebuilt={:?} rerouted_users={}{}",
            r.touched_partitions,
            r.rebuilt_partitions,
            r.rerouted_users,
            r.placement.map(|p| format!(" placed={p}")).unwrap_or_default()
        );
    }
    dep.save(&a.deployment)?;
    let mut w = Vec::new();
    let eval = evaluate_plan(dep.policy(), dep.plan(), &cfg)?;
    if !eval.feasible(&cfg, dep.policy().num_docs()) {
        w.push(format!("plan now uses {:.3}x memory, budget {}x", dep.plan().memory_ratio(), cfg.alpha));
    }
    if a.staleness {
        let s = staleness_report(&dep, &cfg)?;
        println!(
            "memory_ratio={:.4} modeled_cost={:e} fresh_memory_ratio={:.4} fresh_cost={:e} matched_alpha={:.4} matched_cost={:e} cost_gap={:.4}",
            s.memory_ratio, s.modeled_cost, s.fresh_memory_ratio, s.fresh_cost, s.matched_alpha, s.matched_cost, s.cost_gap
        );
    }
    Ok(w)
}

fn bench(a: BenchArgs) -> Result<Warnings> {
    let mut cfg = match &a.config {
        Some(p) => ExperimentConfig::from_text(&fs::read_to_string(p)?)?,
        None => ExperimentConfig::default(),
    };
    let flags = [
        ("generator", &a.generator),
        ("methods", &a.methods),
        ("alphas", &a.alphas),
        ("epsilon", &a.epsilon),
        ("k", &a.k),
        ("seeds", &a.seeds),
        ("queries", &a.queries),
    ];
    for (key, v) in flags {
        if let Some(v) = v {
            cfg.set(key, v, 0)?;
        }
    }
    for s in &a.sets {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| honeybee_core::Error::InvalidParams(format!("expected key=value, got {s}")))?;
        cfg.set(k.trim(), v.trim(), 0)?;
    }
    if let Some(o) = a.out {
        cfg.output = Some(o);
    }
    cfg.validate()?;
    let rows = run_experiment(&cfg)?;
    emit(cfg.output.as_deref(), &to_csv(&rows))?;
    Ok(rows.iter().filter_map(|r| r.warning.clone()).collect())
}
