//! Seeded synthetic policies (uniform, role tree, enterprise two-level roles) and query workloads.
//!
//! Every generator draws from `ChaCha8Rng::seed_from_u64(seed)`, so output is a pure function of
//! the parameters and the seed on every platform.

use std::collections::VecDeque;
use std::fmt::Write as _;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};

use crate::error::{Error, Result};
use crate::ids::{DocId, RoleId, UserId};
use crate::index::Dataset;
use crate::rbac::RbacPolicy;
use crate::scalar::Scalar;
use crate::sets;

fn rng_for(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn sample_distinct<R: Rng>(rng: &mut R, universe: usize, count: usize) -> Vec<u32> {
    let mut v: Vec<u32> = index::sample(rng, universe, count.min(universe)).into_iter().map(|i| i as u32).collect();
    v.sort_unstable();
    v
}

#[derive(Clone, Debug, PartialEq)]
pub struct UniformParams {
    pub max_roles_per_user: usize,
    pub max_docs_per_role: usize,
    pub num_users: usize,
    pub num_roles: usize,
    pub num_docs: usize,
    /// Use the maxima as exact counts instead of drawing from `[1, max]`.
    pub exact_counts: bool,
}

impl UniformParams {
    pub fn alpha(num_users: usize, num_roles: usize, num_docs: usize) -> Self {
        UniformParams {
            max_roles_per_user: 2,
            max_docs_per_role: (num_docs / num_roles.max(1) * 5).clamp(1, num_docs.max(1)),
            num_users,
            num_roles,
            num_docs,
            exact_counts: false,
        }
    }

    pub fn s(num_users: usize, num_roles: usize, num_docs: usize) -> Self {
        UniformParams {
            max_roles_per_user: 1,
            max_docs_per_role: (num_docs / num_roles.max(1) * 9).clamp(1, num_docs.max(1)),
            ..Self::alpha(num_users, num_roles, num_docs)
        }
    }

    fn validate(&self) -> Result<()> {
        if self.max_roles_per_user < 1 {
            return Err(Error::params("max_roles_per_user must be >= 1"));
        }
        if self.max_docs_per_role < 1 || self.max_docs_per_role > self.num_docs {
            return Err(Error::params("max_docs_per_role must lie in [1, num_docs]"));
        }
        if self.num_roles < 1 {
            return Err(Error::params("num_roles must be >= 1"));
        }
        Ok(())
    }
}

pub fn gen_uniform(params: &UniformParams, seed: u64) -> Result<RbacPolicy> {
    params.validate()?;
    let mut rng = rng_for(seed);
    let role_docs = (0..params.num_roles)
        .map(|_| {
            let n = if params.exact_counts {
                params.max_docs_per_role
            } else {
                rng.random_range(1..=params.max_docs_per_role)
            };
            sample_distinct(&mut rng, params.num_docs, n).into_iter().map(DocId).collect()
        })
        .collect();
    let cap = params.max_roles_per_user.min(params.num_roles);
    let user_roles = (0..params.num_users)
        .map(|_| {
            let n = if params.exact_counts { cap } else { rng.random_range(1..=cap) };
            sample_distinct(&mut rng, params.num_roles, n).into_iter().map(RoleId).collect()
        })
        .collect();
    RbacPolicy::new(params.num_docs, user_roles, role_docs)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TreeParams {
    /// Maximum depth of the role tree in edges; the root sits at depth 0.
    pub height: usize,
    pub branch_lo: usize,
    pub branch_hi: usize,
    pub num_users: usize,
    pub num_roles: usize,
    pub num_docs: usize,
    /// Draw per-node subset sizes from a Poisson law instead of splitting round-robin.
    pub poisson_mean: Option<f64>,
}

impl TreeParams {
    pub fn alpha(num_users: usize, num_roles: usize, num_docs: usize) -> Self {
        TreeParams { height: 4, branch_lo: 3, branch_hi: 4, num_users, num_roles, num_docs, poisson_mean: None }
    }

    pub fn s(num_users: usize, num_roles: usize, num_docs: usize, poisson_mean: f64) -> Self {
        TreeParams { poisson_mean: Some(poisson_mean), ..Self::alpha(num_users, num_roles, num_docs) }
    }

    fn validate(&self) -> Result<()> {
        if self.height < 1 {
            return Err(Error::params("tree height must be >= 1"));
        }
        if self.branch_lo > self.branch_hi || self.branch_hi < 1 {
            return Err(Error::params("need branch_lo <= branch_hi and branch_hi >= 1"));
        }
        if self.num_roles < 2 {
            return Err(Error::params("a role tree needs a root and at least one assignable role"));
        }
        if let Some(m) = self.poisson_mean {
            if !(m > 0.0 && m.is_finite()) {
                return Err(Error::params("poisson_mean must be positive"));
            }
        }
        Ok(())
    }
}

/// Generated tree together with the structure the flat policy no longer shows.
#[derive(Clone, Debug)]
pub struct TreePolicy {
    pub policy: RbacPolicy,
    pub parent: Vec<Option<RoleId>>,
    pub depth: Vec<usize>,
    /// Documents attached directly to each node before inheritance.
    pub own_docs: Vec<Vec<DocId>>,
}

impl TreePolicy {
    pub fn ancestors(&self, r: RoleId) -> Vec<RoleId> {
        let mut out = Vec::new();
        let mut cur = self.parent[r.index()];
        while let Some(p) = cur {
            out.push(p);
            cur = self.parent[p.index()];
        }
        out
    }
}

pub fn gen_tree(params: &TreeParams, seed: u64) -> Result<RbacPolicy> {
    gen_tree_detailed(params, seed).map(|t| t.policy)
}

pub fn gen_tree_detailed(params: &TreeParams, seed: u64) -> Result<TreePolicy> {
    params.validate()?;
    let mut rng = rng_for(seed);
    let mut parent: Vec<Option<RoleId>> = vec![None];
    let mut depth = vec![0usize];
    let mut queue = VecDeque::from([0usize]);
    while let Some(node) = queue.pop_front() {
        if parent.len() >= params.num_roles {
            break;
        }
        if depth[node] >= params.height {
            continue;
        }
        let children = rng.random_range(params.branch_lo..=params.branch_hi);
        for _ in 0..children {
            if parent.len() >= params.num_roles {
                break;
            }
            queue.push_back(parent.len());
            parent.push(Some(RoleId::from_index(node)));
            depth.push(depth[node] + 1);
        }
    }
    let n = parent.len();
    if n < 2 {
        return Err(Error::params("parameters produce a tree with no assignable role"));
    }
    if params.num_docs < n {
        return Err(Error::params(format!("{} documents cannot fill {n} role subsets", params.num_docs)));
    }

    let mut own_docs: Vec<Vec<DocId>> = vec![Vec::new(); n];
    match params.poisson_mean {
        None => {
            for d in 0..params.num_docs {
                own_docs[d % n].push(DocId::from_index(d));
            }
        }
        Some(mean) => {
            let poisson = Poisson::new(mean).map_err(|e| Error::params(e.to_string()))?;
            let mut perm: Vec<u32> = (0..params.num_docs as u32).collect();
            perm.shuffle(&mut rng);
            let mut cursor = 0usize;
            for docs in own_docs.iter_mut() {
                let count = (poisson.sample(&mut rng) as usize).max(1).min(params.num_docs);
                for _ in 0..count {
                    docs.push(DocId(perm[cursor % perm.len()]));
                    cursor += 1;
                }
                sets::normalize(docs);
            }
        }
    }

    let mut role_docs: Vec<Vec<DocId>> = Vec::with_capacity(n);
    for r in 0..n {
        let docs = match parent[r] {
            None => own_docs[r].clone(),
            Some(p) => sets::union(&role_docs[p.index()], &own_docs[r]),
        };
        role_docs.push(docs);
    }
    let user_roles = (0..params.num_users).map(|u| vec![RoleId::from_index(1 + u % (n - 1))]).collect();
    let policy = RbacPolicy::new(params.num_docs, user_roles, role_docs)?;
    Ok(TreePolicy { policy, parent, depth, own_docs })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ErbacParams {
    pub n_fr: usize,
    pub n_br: usize,
    pub m_fr: usize,
    pub m_br: usize,
    /// Upper end of the raw per-functional-role document draw before the `m_p` cap.
    pub n_p: usize,
    pub m_p: usize,
    pub num_users: usize,
    pub num_docs: usize,
}

impl ErbacParams {
    pub fn alpha(num_users: usize, num_docs: usize) -> Self {
        ErbacParams {
            n_fr: 40,
            n_br: 100,
            m_fr: 3,
            m_br: 3,
            n_p: num_docs,
            m_p: (num_docs / 25).max(1),
            num_users,
            num_docs,
        }
    }

    pub fn beta(num_users: usize, num_docs: usize) -> Self {
        ErbacParams { m_br: 9, ..Self::alpha(num_users, num_docs) }
    }

    pub fn s(num_users: usize, num_docs: usize) -> Self {
        ErbacParams { m_br: 1, ..Self::alpha(num_users, num_docs) }
    }

    fn validate(&self) -> Result<()> {
        if [self.n_fr, self.n_br, self.m_fr, self.m_br, self.n_p, self.m_p, self.num_docs].contains(&0) {
            return Err(Error::params("ERBAC counts must be >= 1"));
        }
        if self.m_p > self.num_docs || self.n_p > self.num_docs {
            return Err(Error::params("m_p and n_p must not exceed num_docs"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct ErbacPolicy {
    /// Roles of this policy are the business roles.
    pub policy: RbacPolicy,
    pub functional_docs: Vec<Vec<DocId>>,
    pub business_functional: Vec<Vec<usize>>,
}

pub fn gen_erbac(params: &ErbacParams, seed: u64) -> Result<RbacPolicy> {
    gen_erbac_detailed(params, seed).map(|e| e.policy)
}

pub fn gen_erbac_detailed(params: &ErbacParams, seed: u64) -> Result<ErbacPolicy> {
    params.validate()?;
    let mut rng = rng_for(seed);
    let functional_docs: Vec<Vec<DocId>> = (0..params.n_fr)
        .map(|_| {
            let n = rng.random_range(1..=params.n_p).min(params.m_p);
            sample_distinct(&mut rng, params.num_docs, n).into_iter().map(DocId).collect()
        })
        .collect();
    let fr_cap = params.m_fr.min(params.n_fr);
    let business_functional: Vec<Vec<usize>> = (0..params.n_br)
        .map(|_| {
            let n = rng.random_range(1..=fr_cap);
            sample_distinct(&mut rng, params.n_fr, n).into_iter().map(|f| f as usize).collect()
        })
        .collect();
    let role_docs = business_functional
        .iter()
        .map(|frs| sets::union_many(frs.iter().map(|&f| functional_docs[f].as_slice())))
        .collect();
    let br_cap = params.m_br.min(params.n_br);
    let user_roles = (0..params.num_users)
        .map(|_| {
            let n = rng.random_range(1..=br_cap);
            sample_distinct(&mut rng, params.n_br, n).into_iter().map(RoleId).collect()
        })
        .collect();
    let policy = RbacPolicy::new(params.num_docs, user_roles, role_docs)?;
    Ok(ErbacPolicy { policy, functional_docs, business_functional })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Query {
    pub user: UserId,
    /// Row of the dataset used as the query vector.
    pub vector: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QueryWorkload {
    pub k: usize,
    pub queries: Vec<Query>,
}

impl QueryWorkload {
    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }

    pub fn with_k(&self, k: usize) -> Self {
        QueryWorkload { k, queries: self.queries.clone() }
    }

    /// `k=<k>` header then one `<user> <vector row>` line per query.
    pub fn to_text(&self) -> String {
        let mut out = format!("k={}\n", self.k);
        for q in &self.queries {
            let _ = writeln!(out, "{} {}", q.user, q.vector);
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines.next().ok_or_else(|| Error::parse(1, "missing k= header"))?;
        let k = header
            .trim()
            .strip_prefix("k=")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::parse(1, "expected k=<count>"))?;
        let mut queries = Vec::new();
        for (ln, line) in lines {
            let mut it = line.split_whitespace().map(str::parse::<usize>);
            match (it.next(), it.next(), it.next()) {
                (Some(Ok(u)), Some(Ok(v)), None) => queries.push(Query { user: UserId::from_index(u), vector: v }),
                _ => return Err(Error::parse(ln + 1, "expected `<user> <vector>`")),
            }
        }
        Ok(QueryWorkload { k, queries })
    }
}

pub fn gen_queries(policy: &RbacPolicy, dataset_size: usize, n_queries: usize, k: usize, seed: u64) -> Result<QueryWorkload> {
    if dataset_size == 0 {
        return Err(Error::params("dataset is empty"));
    }
    let users: Vec<UserId> = policy.users().filter(|u| policy.user_roles(*u).is_ok_and(|r| !r.is_empty())).collect();
    if users.is_empty() && n_queries > 0 {
        return Err(Error::params("policy has no user holding a role"));
    }
    let mut rng = rng_for(seed);
    let queries = (0..n_queries)
        .map(|_| Query {
            user: users[rng.random_range(0..users.len())],
            vector: rng.random_range(0..dataset_size),
        })
        .collect();
    Ok(QueryWorkload { k, queries })
}

/// I.i.d. standard normal vectors.
pub fn gen_vectors<T: Scalar>(n: usize, dim: usize, seed: u64) -> Result<Dataset<T>> {
    if n == 0 || dim == 0 {
        return Err(Error::params("n and dim must be >= 1"));
    }
    let mut rng = rng_for(seed);
    let data = (0..n * dim)
        .map(|_| {
            let x: f64 = StandardNormal.sample(&mut rng);
            T::from_f64_lossy(x)
        })
        .collect();
    Dataset::from_flat(dim, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::partition::PartitionPlan;
    use proptest::prelude::*;

    #[test]
    fn uniform_counts_and_determinism() {
        let p = UniformParams::alpha(200, 20, 2000);
        let a = gen_uniform(&p, 5).unwrap();
        assert_eq!(a.to_text(), gen_uniform(&p, 5).unwrap().to_text());
        assert_ne!(a.to_text(), gen_uniform(&p, 6).unwrap().to_text());
        for u in a.users() {
            let n = a.user_roles(u).unwrap().len();
            assert!((1..=2).contains(&n));
        }
        for r in a.roles() {
            assert!((1..=500).contains(&a.auth_role(r).unwrap().len()));
        }
    }

    #[test]
    fn uniform_disjoint_instance_has_unit_overhead() {
        let p = UniformParams {
            max_roles_per_user: 1,
            max_docs_per_role: 1,
            num_users: 30,
            num_roles: 30,
            num_docs: 1,
            exact_counts: false,
        };
        let policy = gen_uniform(&p, 1).unwrap();
        assert!(policy.roles().all(|r| policy.auth_role(r).unwrap() == [DocId(0)]));
        let disjoint = RbacPolicy::new(
            30,
            (0..30).map(|i| vec![RoleId(i)]).collect(),
            (0..30).map(|i| vec![DocId(i)]).collect(),
        )
        .unwrap();
        assert_eq!(PartitionPlan::per_role(&disjoint).memory_ratio(), 1.0);
    }

    #[test]
    fn invalid_params_rejected() {
        let mut u = UniformParams::alpha(10, 5, 100);
        u.max_docs_per_role = 101;
        assert!(gen_uniform(&u, 0).is_err());
        let mut t = TreeParams::alpha(10, 10, 100);
        t.height = 0;
        assert!(gen_tree(&t, 0).is_err());
        t.height = 2;
        t.branch_lo = 5;
        t.branch_hi = 4;
        assert!(gen_tree(&t, 0).is_err());
        let t = TreeParams { branch_lo: 0, branch_hi: 0, ..TreeParams::alpha(10, 10, 100) };
        assert!(gen_tree(&t, 0).is_err());
        assert!(gen_tree(&TreeParams::alpha(10, 1, 100), 0).is_err());
        let mut e = ErbacParams::alpha(10, 100);
        e.m_fr = 0;
        assert!(gen_erbac(&e, 0).is_err());
    }

    #[test]
    fn tree_inherits_along_ancestor_walk() {
        let t = gen_tree_detailed(&TreeParams::alpha(1000, 100, 20_000), 3).unwrap();
        assert_eq!(t.parent.len(), 100);
        assert!(t.depth.iter().all(|&d| d <= 4));
        for r in t.policy.roles() {
            let mut expect = t.own_docs[r.index()].clone();
            for a in t.ancestors(r) {
                expect.extend_from_slice(&t.own_docs[a.index()]);
            }
            sets::normalize(&mut expect);
            assert_eq!(t.policy.auth_role(r).unwrap(), expect.as_slice());
        }
        for u in t.policy.users() {
            let roles = t.policy.user_roles(u).unwrap();
            assert_eq!(roles.len(), 1);
            assert_ne!(roles[0], RoleId(0));
        }
    }

    #[test]
    fn tree_users_evenly_spread_with_low_ids_first() {
        let t = gen_tree_detailed(&TreeParams::alpha(10, 5, 100), 0).unwrap();
        let mut per_role = [0usize; 5];
        for u in t.policy.users() {
            per_role[t.policy.user_roles(u).unwrap()[0].index()] += 1;
        }
        assert_eq!(per_role, [0, 3, 3, 2, 2]);
    }

    #[test]
    fn tree_sibling_subtrees_share_only_ancestors() {
        let t = gen_tree_detailed(&TreeParams::alpha(100, 40, 4000), 9).unwrap();
        let roots: Vec<usize> = (0..t.parent.len()).filter(|&r| t.parent[r] == Some(RoleId(0))).collect();
        let subtree_of = |mut r: usize| loop {
            match t.parent[r] {
                Some(RoleId(0)) => return r,
                Some(p) => r = p.index(),
                None => return 0,
            }
        };
        for a in 1..t.parent.len() {
            for b in 1..t.parent.len() {
                if subtree_of(a) != subtree_of(b) {
                    assert!(sets::intersection_len(&t.own_docs[a], t.policy.auth_role(RoleId::from_index(b)).unwrap()) == 0);
                }
            }
        }
        assert!(roots.len() >= 3);
    }

    #[test]
    fn tree_poisson_variant_sizes() {
        let t = gen_tree_detailed(&TreeParams::s(100, 50, 10_000, 40.0), 2).unwrap();
        let mean = t.own_docs.iter().map(Vec::len).sum::<usize>() as f64 / 50.0;
        assert!((mean - 40.0).abs() < 6.0, "{mean}");
        assert!(t.own_docs.iter().all(|d| !d.is_empty()));
    }

    #[test]
    fn erbac_business_roles_are_functional_unions() {
        let e = gen_erbac_detailed(&ErbacParams::alpha(300, 5000), 11).unwrap();
        for (b, frs) in e.business_functional.iter().enumerate() {
            assert!((1..=3).contains(&frs.len()));
            let expect = sets::union_many(frs.iter().map(|&f| e.functional_docs[f].as_slice()));
            assert_eq!(e.policy.auth_role(RoleId::from_index(b)).unwrap(), expect.as_slice());
        }
        for d in &e.functional_docs {
            assert!(!d.is_empty() && d.len() <= 200);
        }
        for u in e.policy.users() {
            assert!((1..=3).contains(&e.policy.user_roles(u).unwrap().len()));
        }
    }

    #[test]
    fn erbac_single_mapping_mirrors_functional_roles() {
        let p = ErbacParams { m_fr: 1, m_br: 1, ..ErbacParams::alpha(50, 1000) };
        let e = gen_erbac_detailed(&p, 4).unwrap();
        for (b, frs) in e.business_functional.iter().enumerate() {
            assert_eq!(frs.len(), 1);
            assert_eq!(e.policy.auth_role(RoleId::from_index(b)).unwrap(), e.functional_docs[frs[0]].as_slice());
        }
    }

    #[test]
    fn queries_shape_and_replay() {
        let p = gen_tree(&TreeParams::alpha(50, 20, 500), 1).unwrap();
        let w = gen_queries(&p, 500, 1000, 10, 3).unwrap();
        assert_eq!(w.len(), 1000);
        assert_eq!(w.k, 10);
        assert_eq!(w, gen_queries(&p, 500, 1000, 10, 3).unwrap());
        assert!(w.queries.iter().all(|q| q.vector < 500 && p.has_user(q.user)));
        assert!(gen_queries(&p, 500, 0, 10, 3).unwrap().is_empty());
        assert!(gen_queries(&p, 0, 5, 10, 3).is_err());
        assert_eq!(QueryWorkload::from_text(&w.to_text()).unwrap(), w);
    }

    #[test]
    fn vectors_are_standard_normal() {
        let one: Dataset<f32> = gen_vectors(1, 4, 0).unwrap();
        assert_eq!(one.len(), 1);
        let d: Dataset<f64> = gen_vectors(100_000, 1, 8).unwrap();
        let n = d.len() as f64;
        let mean = d.as_flat().iter().sum::<f64>() / n;
        let var = d.as_flat().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        // 3 sigma bounds: sd(mean) = 1/sqrt(n), sd(var) ~ sqrt(2/n)
        assert!(mean.abs() < 3.0 / n.sqrt());
        assert!((var - 1.0).abs() < 3.0 * (2.0 / n).sqrt());
        let a: Dataset<f32> = gen_vectors(10, 3, 2).unwrap();
        assert_eq!(a, gen_vectors(10, 3, 2).unwrap());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn generators_are_pure(seed in any::<u64>()) {
            let u = UniformParams::alpha(40, 8, 300);
            prop_assert_eq!(gen_uniform(&u, seed).unwrap(), gen_uniform(&u, seed).unwrap());
            let t = TreeParams::alpha(40, 15, 300);
            prop_assert_eq!(gen_tree(&t, seed).unwrap(), gen_tree(&t, seed).unwrap());
            let e = ErbacParams { n_fr: 10, n_br: 12, ..ErbacParams::alpha(40, 300) };
            prop_assert_eq!(gen_erbac(&e, seed).unwrap(), gen_erbac(&e, seed).unwrap());
        }

        #[test]
        fn tree_descendants_contain_ancestor_subsets(seed in 0u64..64) {
            let t = gen_tree_detailed(&TreeParams::alpha(30, 25, 400), seed).unwrap();
            for r in t.policy.roles() {
                for a in t.ancestors(r) {
                    prop_assert!(sets::is_subset(&t.own_docs[a.index()], t.policy.auth_role(r).unwrap()));
                }
            }
        }
    }
}
