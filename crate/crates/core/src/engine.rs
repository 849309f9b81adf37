//! Online phase: route a user's query, search the routed partitions with post-filtering and merge.

use std::collections::HashMap;
use std::fs;
use std::hash::Hasher;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use fnv::FnvHasher;

use crate::error::{Error, Result};
use crate::ids::{DocId, PartitionId, UserId};
use crate::index::{brute_force_docs, Dataset, Distance, HnswIndex, HnswParams, SearchResult};
use crate::partition::{build_routing, PartitionPlan, RoutingTable};
use crate::rbac::{AuthSet, RbacPolicy};
use crate::scalar::Scalar;
use crate::sets;
use crate::workload::QueryWorkload;

/// Seed of the index over `docs`, so equal document sets always get equal graphs.
pub fn partition_seed(seed: u64, docs: &[DocId]) -> u64 {
    let mut h = FnvHasher::with_key(seed);
    for d in docs {
        h.write_u32(d.0);
    }
    h.finish()
}

/// Indexes shared across deployments built from the same vectors, parameters and seed.
pub struct IndexCache<T> {
    params: HnswParams,
    seed: u64,
    map: HashMap<Vec<DocId>, Arc<HnswIndex<T>>>,
}

impl<T: Scalar> IndexCache<T> {
    pub fn new(params: HnswParams, seed: u64) -> Self {
        IndexCache { params, seed, map: HashMap::new() }
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn get_or_build(&mut self, dataset: &Dataset<T>, docs: &[DocId]) -> Result<Arc<HnswIndex<T>>> {
        if let Some(idx) = self.map.get(docs) {
            return Ok(Arc::clone(idx));
        }
        let idx = Arc::new(HnswIndex::build_subset(dataset, docs, self.params, partition_seed(self.seed, docs))?);
        self.map.insert(docs.to_vec(), Arc::clone(&idx));
        Ok(idx)
    }
}

/// Per-query measurements.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct QueryStats {
    pub wall_seconds: f64,
    pub distance_evals: usize,
    pub partitions_touched: usize,
    pub recall_at_k: Option<f64>,
}

/// Mean cost over a workload, first run of every query discarded.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LatencyReport {
    pub mean_wall_seconds: f64,
    pub mean_distance_evals: f64,
    pub mean_partitions: f64,
}

/// Exact filtered top-k for every query of a workload.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub k: usize,
    pub topk: Vec<Vec<DocId>>,
    /// `min(k, |auth(u)|)` per query.
    pub expected: Vec<usize>,
}

impl GroundTruth {
    /// Scans the full corpus restricted to each user's authorized documents.
    pub fn compute<T: Scalar>(policy: &RbacPolicy, dataset: &Dataset<T>, workload: &QueryWorkload, params: &HnswParams) -> Result<Self> {
        let mut auth_cache: HashMap<UserId, AuthSet> = HashMap::new();
        let mut topk = Vec::with_capacity(workload.len());
        let mut expected = Vec::with_capacity(workload.len());
        for q in &workload.queries {
            if !auth_cache.contains_key(&q.user) {
                auth_cache.insert(q.user, policy.auth_user(q.user)?);
            }
            let auth = &auth_cache[&q.user];
            let v = query_vector(dataset, q.vector)?;
            topk.push(brute_force_docs(dataset, &auth.docs, v, workload.k, params.distance).docs());
            expected.push(workload.k.min(auth.len()));
        }
        Ok(GroundTruth { k: workload.k, topk, expected })
    }
}

fn query_vector<T: Scalar>(dataset: &Dataset<T>, i: usize) -> Result<&[T]> {
    if i >= dataset.len() {
        return Err(Error::params(format!("query vector {i} outside a dataset of {}", dataset.len())));
    }
    Ok(dataset.row(i))
}

/// `|hits ∩ truth| / min(k, |auth|)`; 1 when the user can see nothing.
pub fn recall_of(hits: &[DocId], truth: &[DocId], expected: usize) -> f64 {
    if expected == 0 {
        return 1.0;
    }
    let found = hits.iter().filter(|d| truth.contains(d)).count();
    found as f64 / expected as f64
}

/// A served plan: one index per partition, routing and the global queue width.
#[derive(Clone, Debug)]
pub struct Deployment<T: Scalar> {
    pub(crate) policy: RbacPolicy,
    pub(crate) plan: PartitionPlan,
    pub(crate) indexes: Vec<Arc<HnswIndex<T>>>,
    pub(crate) routing: RoutingTable,
    pub(crate) auth: Vec<Option<AuthSet>>,
    pub(crate) ef_s: usize,
    pub(crate) dataset: Arc<Dataset<T>>,
    pub(crate) hnsw: HnswParams,
    pub(crate) seed: u64,
}

impl<T: Scalar> Deployment<T> {
    pub fn build(policy: RbacPolicy, plan: PartitionPlan, dataset: Arc<Dataset<T>>, hnsw: HnswParams, ef_s: usize, seed: u64) -> Result<Self> {
        let mut cache = IndexCache::new(hnsw, seed);
        Self::build_cached(policy, plan, dataset, ef_s, &mut cache)
    }

    /// Reuses indexes of identical partitions from `cache`.
    pub fn build_cached(policy: RbacPolicy, plan: PartitionPlan, dataset: Arc<Dataset<T>>, ef_s: usize, cache: &mut IndexCache<T>) -> Result<Self> {
        if dataset.len() < policy.num_docs() {
            return Err(Error::params(format!("{} vectors for {} documents", dataset.len(), policy.num_docs())));
        }
        if ef_s == 0 {
            return Err(Error::params("ef_s must be >= 1"));
        }
        plan.validate(&policy)?;
        let routing = build_routing(&policy, &plan)?;
        let indexes = plan.partitions().iter().map(|p| cache.get_or_build(&dataset, p)).collect::<Result<Vec<_>>>()?;
        let auth = auth_table(&policy)?;
        Ok(Deployment { policy, plan, indexes, routing, auth, ef_s, dataset, hnsw: cache.params, seed: cache.seed })
    }

    pub fn policy(&self) -> &RbacPolicy {
        &self.policy
    }

    pub fn plan(&self) -> &PartitionPlan {
        &self.plan
    }

    pub fn routing(&self) -> &RoutingTable {
        &self.routing
    }

    pub fn index(&self, p: PartitionId) -> &HnswIndex<T> {
        &self.indexes[p]
    }

    pub fn num_partitions(&self) -> usize {
        self.indexes.len()
    }

    pub fn dataset(&self) -> &Dataset<T> {
        &self.dataset
    }

    pub fn hnsw_params(&self) -> &HnswParams {
        &self.hnsw
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn ef_s(&self) -> usize {
        self.ef_s
    }

    pub fn set_ef_s(&mut self, ef_s: usize) {
        self.ef_s = ef_s.max(1);
    }

    pub fn with_ef_s(&self, ef_s: usize) -> Self {
        let mut d = self.clone();
        d.set_ef_s(ef_s);
        d
    }

    pub fn auth(&self, u: UserId) -> Result<&AuthSet> {
        self.auth.get(u.index()).and_then(Option::as_ref).ok_or(Error::UnknownUser(u))
    }

    /// Searches every routed partition with the user's filter and merges to the global top-k.
    pub fn execute(&self, u: UserId, query: &[T], k: usize) -> Result<(SearchResult<T>, QueryStats)> {
        let route = self.routing.user(u)?;
        self.run(u, query, k, route)
    }

    /// Like [`Deployment::execute`] but visits `order`, which must be a permutation of the user's route.
    pub fn execute_on(&self, u: UserId, query: &[T], k: usize, order: &[PartitionId]) -> Result<(SearchResult<T>, QueryStats)> {
        let mut a = order.to_vec();
        a.sort_unstable();
        if a != self.routing.user(u)? {
            return Err(Error::params("visit order is not a permutation of the user's route"));
        }
        self.run(u, query, k, order)
    }

    fn run(&self, u: UserId, query: &[T], k: usize, route: &[PartitionId]) -> Result<(SearchResult<T>, QueryStats)> {
        let auth = self.auth(u)?;
        if query.len() != self.dataset.dim() {
            return Err(Error::DimensionMismatch { expected: self.dataset.dim(), got: query.len() });
        }
        let start = Instant::now();
        let parts = route.iter().map(|&p| self.indexes[p].search_filtered(query, self.ef_s, k, auth));
        let res = SearchResult::merge(parts, k);
        let stats = QueryStats {
            wall_seconds: start.elapsed().as_secs_f64(),
            distance_evals: res.visited,
            partitions_touched: route.len(),
            recall_at_k: None,
        };
        Ok((res, stats))
    }

    pub fn ground_truth(&self, workload: &QueryWorkload) -> Result<GroundTruth> {
        GroundTruth::compute(&self.policy, &self.dataset, workload, &self.hnsw)
    }

    /// Mean recall per query against a freshly computed exact oracle.
    pub fn measure_recall(&self, workload: &QueryWorkload) -> Result<f64> {
        let truth = self.ground_truth(workload)?;
        self.measure_recall_with(workload, &truth)
    }

    pub fn measure_recall_with(&self, workload: &QueryWorkload, truth: &GroundTruth) -> Result<f64> {
        if workload.is_empty() {
            return Err(Error::domain("empty workload"));
        }
        if truth.topk.len() != workload.len() || truth.k != workload.k {
            return Err(Error::params("ground truth does not match the workload"));
        }
        let mut total = 0.0;
        for (i, q) in workload.queries.iter().enumerate() {
            let (res, _) = self.execute(q.user, query_vector(&self.dataset, q.vector)?, workload.k)?;
            total += recall_of(&res.docs(), &truth.topk[i], truth.expected[i]);
        }
        Ok(total / workload.len() as f64)
    }

    /// Runs every query `repeats` times and averages all runs but the first.
    pub fn measure_latency(&self, workload: &QueryWorkload, repeats: usize) -> Result<LatencyReport> {
        if workload.is_empty() {
            return Err(Error::domain("empty workload"));
        }
        if repeats < 2 {
            return Err(Error::params("repeats must be >= 2"));
        }
        let (mut wall, mut evals, mut parts) = (0.0, 0.0, 0.0);
        for q in &workload.queries {
            let v = query_vector(&self.dataset, q.vector)?;
            self.execute(q.user, v, workload.k)?;
            for _ in 1..repeats {
                let (_, s) = self.execute(q.user, v, workload.k)?;
                wall += s.wall_seconds;
                evals += s.distance_evals as f64;
                parts += s.partitions_touched as f64;
            }
        }
        let n = (workload.len() * (repeats - 1)) as f64;
        Ok(LatencyReport { mean_wall_seconds: wall / n, mean_distance_evals: evals / n, mean_partitions: parts / n })
    }

    /// Per-query rows with recall against `truth`.
    pub fn run_workload(&self, workload: &QueryWorkload, truth: &GroundTruth) -> Result<Vec<QueryStats>> {
        let mut out = Vec::with_capacity(workload.len());
        for (i, q) in workload.queries.iter().enumerate() {
            let v = query_vector(&self.dataset, q.vector)?;
            self.execute(q.user, v, workload.k)?;
            let (res, mut s) = self.execute(q.user, v, workload.k)?;
            s.recall_at_k = Some(recall_of(&res.docs(), &truth.topk[i], truth.expected[i]));
            out.push(s);
        }
        Ok(out)
    }
}

const POLICY_FILE: &str = "policy.txt";
const PLAN_FILE: &str = "plan.txt";
const ROUTING_FILE: &str = "routing.txt";
const VECTORS_FILE: &str = "vectors.fvecs";
const PARAMS_FILE: &str = "params.txt";

impl<T: Scalar> Deployment<T> {
    /// Writes policy, plan, routing, vectors and serving parameters. Graphs are not stored; `load` rebuilds
    /// them from the seed.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        fs::write(dir.join(POLICY_FILE), self.policy.to_text())?;
        fs::write(dir.join(PLAN_FILE), self.plan.to_text())?;
        fs::write(dir.join(ROUTING_FILE), self.routing.to_text())?;
        self.dataset.write_fvecs(dir.join(VECTORS_FILE))?;
        let params = format!(
            "ef_s={}\nseed={}\nm={}\nef_construction={}\ndistance={}\n",
            self.ef_s,
            self.seed,
            self.hnsw.m,
            self.hnsw.ef_construction,
            self.hnsw.distance.name()
        );
        fs::write(dir.join(PARAMS_FILE), params)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let policy = RbacPolicy::from_text(&fs::read_to_string(dir.join(POLICY_FILE))?)?;
        let plan = PartitionPlan::from_text(&fs::read_to_string(dir.join(PLAN_FILE))?, &policy)?;
        let routing = RoutingTable::from_text(&fs::read_to_string(dir.join(ROUTING_FILE))?)?;
        let dataset = Arc::new(Dataset::read_fvecs(dir.join(VECTORS_FILE))?);
        let mut kv = HashMap::new();
        for (ln, line) in fs::read_to_string(dir.join(PARAMS_FILE))?.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::parse(ln + 1, "expected key=value"))?;
            kv.insert(k.trim().to_string(), (ln + 1, v.trim().to_string()));
        }
        let num = |key: &str| -> Result<u64> {
            let (ln, v) = kv.get(key).ok_or_else(|| Error::parse(0, format!("{PARAMS_FILE}: missing {key}")))?;
            v.parse().map_err(|_| Error::parse(*ln, format!("bad {key}")))
        };
        let distance = match kv.get("distance") {
            Some((ln, v)) => Distance::parse(v).ok_or_else(|| Error::parse(*ln, format!("unknown distance {v}")))?,
            None => Distance::default(),
        };
        let hnsw = HnswParams { m: num("m")? as usize, ef_construction: num("ef_construction")? as usize, distance };
        hnsw.validate()?;
        let mut dep = Self::build(policy, plan, dataset, hnsw, num("ef_s")? as usize, num("seed")?)?;
        for u in dep.policy.users() {
            let route = routing.user(u)?;
            if route.iter().any(|&p| p >= dep.plan.len()) {
                return Err(Error::InvalidPlan(format!("route of user {u} names a missing partition")));
            }
            let covered = sets::union_many(route.iter().map(|&p| dep.plan.partition(p)));
            if !sets::is_subset(&dep.auth(u)?.docs, &covered) {
                return Err(Error::InvalidPlan(format!("route of user {u} does not cover its documents")));
            }
        }
        dep.routing = routing;
        Ok(dep)
    }
}

pub(crate) fn auth_table(policy: &RbacPolicy) -> Result<Vec<Option<AuthSet>>> {
    let mut auth = vec![None; policy.num_users()];
    for u in policy.users() {
        auth[u.index()] = Some(policy.auth_user(u)?);
    }
    Ok(auth)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ids::RoleId;
    use crate::index::brute_force_docs;
    use crate::partition::SplitConfig;
    use crate::workload::{gen_queries, gen_tree, gen_vectors, TreeParams};

    fn d(a: u32, b: u32) -> Vec<DocId> {
        (a..b).map(DocId).collect()
    }

    fn small() -> (RbacPolicy, Arc<Dataset<f32>>) {
        let p = gen_tree(&TreeParams::alpha(60, 20, 1500), 3).unwrap();
        let data = Arc::new(gen_vectors::<f32>(1500, 8, 3).unwrap());
        (p, data)
    }

    #[test]
    fn single_partition_equals_filtered_search() {
        let (p, data) = small();
        let dep = Deployment::build(p.clone(), PartitionPlan::single(&p), data.clone(), HnswParams::default(), 64, 1).unwrap();
        let idx = HnswIndex::build_subset(&data, &d(0, 1500), HnswParams::default(), partition_seed(1, &d(0, 1500))).unwrap();
        for u in p.users().take(15) {
            let q = data.row(u.index() * 7);
            let auth = p.auth_user(u).unwrap();
            let (res, stats) = dep.execute(u, q, 10).unwrap();
            assert_eq!(res, idx.search_filtered(q, 64, 10, &auth));
            assert_eq!(stats.partitions_touched, 1);
        }
    }

    #[test]
    fn results_are_authorized_and_exact_at_full_width() {
        let (p, data) = small();
        let plan = crate::partition::greedy_split(&p, &SplitConfig::with_defaults(2.0, 0.9)).unwrap();
        let dep = Deployment::build(p.clone(), plan, data.clone(), HnswParams::default(), 1500, 2).unwrap();
        for u in p.users() {
            let q = data.row((u.index() * 13) % 1500);
            let (res, _) = dep.execute(u, q, 10).unwrap();
            let auth = p.auth_user(u).unwrap();
            assert!(res.hits.iter().all(|h| auth.contains(h.doc)));
            let truth = brute_force_docs(&data, &auth.docs, q, 10, Distance::Euclidean);
            assert_eq!(res.docs(), truth.docs());
        }
    }

    use crate::index::Distance;

    #[test]
    fn disjoint_partitions_interleave() {
        let p = RbacPolicy::new(400, vec![vec![RoleId(0), RoleId(1)]], vec![d(0, 200), d(200, 400)]).unwrap();
        let data = Arc::new(gen_vectors::<f32>(400, 4, 9).unwrap());
        let plan = PartitionPlan::per_role(&p);
        let dep = Deployment::build(p.clone(), plan, data.clone(), HnswParams::default(), 200, 3).unwrap();
        for i in 0..20 {
            let q = data.row(i * 17);
            let (res, stats) = dep.execute(UserId(0), q, 10).unwrap();
            assert_eq!(stats.partitions_touched, 2);
            assert_eq!(res.docs(), brute_force_docs(&data, &d(0, 400), q, 10, Distance::Euclidean).docs());
            let (rev, _) = dep.execute_on(UserId(0), q, 10, &[1, 0]).unwrap();
            assert_eq!(res, rev);
        }
        assert!(dep.execute_on(UserId(0), data.row(0), 10, &[1]).is_err());
    }

    #[test]
    fn k_beyond_auth_returns_everything() {
        let p = RbacPolicy::new(50, vec![vec![RoleId(0)], vec![RoleId(1)]], vec![d(0, 5), d(5, 50)]).unwrap();
        let data = Arc::new(gen_vectors::<f32>(50, 4, 1).unwrap());
        let dep = Deployment::build(p.clone(), PartitionPlan::single(&p), data.clone(), HnswParams::default(), 1000, 1).unwrap();
        let (res, _) = dep.execute(UserId(0), data.row(30), 20).unwrap();
        let mut got = res.docs();
        got.sort_unstable();
        assert_eq!(got, d(0, 5));
    }

    #[test]
    fn recall_and_latency_measurements() {
        let (p, data) = small();
        let w = gen_queries(&p, 1500, 200, 10, 5).unwrap();
        let full = Deployment::build(p.clone(), PartitionPlan::single(&p), data.clone(), HnswParams::default(), 1000, 1).unwrap();
        let truth = full.ground_truth(&w).unwrap();
        assert!(full.measure_recall_with(&w, &truth).unwrap() >= 0.99);
        let narrow = full.with_ef_s(10);
        let r_narrow = narrow.measure_recall_with(&w, &truth).unwrap();
        assert!(r_narrow < 0.5, "{r_narrow}");
        let lat = full.measure_latency(&w, 3).unwrap();
        assert!(lat.mean_distance_evals > 0.0 && lat.mean_partitions == 1.0);
        assert!(full.measure_latency(&w, 1).is_err());
        let empty = QueryWorkload { k: 10, queries: Vec::new() };
        assert!(full.measure_recall(&empty).is_err());
        assert!(full.measure_latency(&empty, 2).is_err());
    }

    #[test]
    fn distance_evals_repeat_exactly() {
        let (p, data) = small();
        let plan = PartitionPlan::per_role(&p);
        let dep = Deployment::build(p.clone(), plan, data.clone(), HnswParams::default(), 40, 1).unwrap();
        let w = gen_queries(&p, 1500, 30, 10, 2).unwrap();
        for q in &w.queries {
            let a = dep.execute(q.user, data.row(q.vector), 10).unwrap().1.distance_evals;
            let b = dep.execute(q.user, data.row(q.vector), 10).unwrap().1.distance_evals;
            assert_eq!(a, b);
        }
    }

    #[test]
    fn cache_shares_identical_partitions() {
        let (p, data) = small();
        let mut cache = IndexCache::new(HnswParams::default(), 4);
        let a = Deployment::build_cached(p.clone(), PartitionPlan::per_role(&p), data.clone(), 50, &mut cache).unwrap();
        let n = cache.len();
        let b = Deployment::build_cached(p.clone(), PartitionPlan::per_role(&p), data.clone(), 50, &mut cache).unwrap();
        assert_eq!(cache.len(), n);
        assert!(Arc::ptr_eq(&a.indexes[0], &b.indexes[0]));
    }

    #[test]
    fn unknown_user_rejected() {
        let (p, data) = small();
        let dep = Deployment::build(p.clone(), PartitionPlan::single(&p), data.clone(), HnswParams::default(), 50, 1).unwrap();
        assert!(dep.execute(UserId(9999), data.row(0), 10).is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let (p, data) = small();
        let plan = crate::partition::greedy_split(&p, &SplitConfig::with_defaults(1.5, 0.9)).unwrap();
        let dep = Deployment::build(p, plan, data, HnswParams::default(), 40, 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        dep.save(dir.path()).unwrap();
        let back = Deployment::<f32>::load(dir.path()).unwrap();
        assert_eq!(back.plan(), dep.plan());
        assert_eq!(back.routing(), dep.routing());
        assert_eq!(back.ef_s(), 40);
        let q = dep.dataset().row(3);
        for u in [UserId(0), UserId(7)] {
            assert_eq!(back.execute(u, q, 10).unwrap().0, dep.execute(u, q, 10).unwrap().0);
        }
        std::fs::write(dir.path().join(ROUTING_FILE), "").unwrap();
        assert!(Deployment::<f32>::load(dir.path()).is_err());
    }
}
