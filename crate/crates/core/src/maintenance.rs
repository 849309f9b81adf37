//! Incremental updates of a live deployment: users, document grants and roles.

use std::fmt;
use std::sync::Arc;

use crate::engine::Deployment;
use crate::error::{Error, Result};
use crate::ids::{DocId, PartitionId, RoleId, UserId};
use crate::index::HnswIndex;
use crate::partition::{build_routing, evaluate_plan, greedy_split_traced, PartitionPlan, SplitConfig};
use crate::scalar::Scalar;
use crate::sets;

/// Tombstone share above which a partition index is rebuilt.
pub const REBUILD_THRESHOLD: f64 = 0.2;

#[derive(Clone, Debug, PartialEq)]
pub enum ChangeOp {
    UserAdd { user: UserId, roles: Vec<RoleId> },
    UserDel { user: UserId },
    /// `vector` is needed when `doc` is a new document id.
    DocAddToRole { role: RoleId, doc: DocId, vector: Option<Vec<f64>> },
    DocDelFromRole { role: RoleId, doc: DocId },
    RoleAdd { role: RoleId, docs: Vec<DocId>, users: Vec<UserId> },
    RoleDel { role: RoleId },
}

fn join<I: fmt::Display>(xs: &[I], sep: &str) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(sep)
}

impl fmt::Display for ChangeOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ChangeOp::UserAdd { user, roles } => write!(f, "user_add {user} {}", join(roles, " ")),
            ChangeOp::UserDel { user } => write!(f, "user_del {user}"),
            ChangeOp::DocAddToRole { role, doc, vector: None } => write!(f, "doc_add_to_role {role} {doc}"),
            ChangeOp::DocAddToRole { role, doc, vector: Some(v) } => write!(f, "doc_add_to_role {role} {doc} {}", join(v, " ")),
            ChangeOp::DocDelFromRole { role, doc } => write!(f, "doc_del_from_role {role} {doc}"),
            ChangeOp::RoleAdd { role, docs, users } => write!(f, "role_add {role} docs={} users={}", join(docs, ","), join(users, ",")),
            ChangeOp::RoleDel { role } => write!(f, "role_del {role}"),
        }
    }
}

impl ChangeOp {
    /// Parses one change-log line (see the `Display` form).
    pub fn parse(line: &str) -> Result<Self> {
        Self::parse_at(line, 0)
    }

    fn parse_at(line: &str, ln: usize) -> Result<Self> {
        let mut it = line.split_whitespace();
        let kind = it.next().ok_or_else(|| Error::parse(ln, "empty change"))?;
        let num = |t: Option<&str>, what: &str| -> Result<u32> {
            t.ok_or_else(|| Error::parse(ln, format!("missing {what}")))?.parse().map_err(|_| Error::parse(ln, format!("bad {what}")))
        };
        let list = |s: &str| -> Result<Vec<u32>> {
            s.split(',').filter(|t| !t.is_empty()).map(|t| t.parse().map_err(|_| Error::parse(ln, format!("bad id {t}")))).collect()
        };
        let op = match kind {
            "user_add" => {
                let user = UserId(num(it.next(), "user")?);
                let roles = it.map(|t| t.parse().map(RoleId).map_err(|_| Error::parse(ln, format!("bad role {t}")))).collect::<Result<_>>()?;
                ChangeOp::UserAdd { user, roles }
            }
            "user_del" => ChangeOp::UserDel { user: UserId(num(it.next(), "user")?) },
            "doc_add_to_role" => {
                let role = RoleId(num(it.next(), "role")?);
                let doc = DocId(num(it.next(), "doc")?);
                let v: Vec<f64> = it.map(|t| t.parse().map_err(|_| Error::parse(ln, format!("bad component {t}")))).collect::<Result<_>>()?;
                ChangeOp::DocAddToRole { role, doc, vector: if v.is_empty() { None } else { Some(v) } }
            }
            "doc_del_from_role" => {
                let role = RoleId(num(it.next(), "role")?);
                ChangeOp::DocDelFromRole { role, doc: DocId(num(it.next(), "doc")?) }
            }
            "role_add" => {
                let role = RoleId(num(it.next(), "role")?);
                let (mut docs, mut users) = (Vec::new(), Vec::new());
                for t in it {
                    if let Some(v) = t.strip_prefix("docs=") {
                        docs = list(v)?.into_iter().map(DocId).collect();
                    } else if let Some(v) = t.strip_prefix("users=") {
                        users = list(v)?.into_iter().map(UserId).collect();
                    } else {
                        return Err(Error::parse(ln, format!("unexpected {t}")));
                    }
                }
                ChangeOp::RoleAdd { role, docs, users }
            }
            "role_del" => ChangeOp::RoleDel { role: RoleId(num(it.next(), "role")?) },
            other => return Err(Error::parse(ln, format!("unknown change {other}"))),
        };
        if matches!(op, ChangeOp::UserDel { .. } | ChangeOp::DocDelFromRole { .. } | ChangeOp::RoleDel { .. }) {
            // trailing tokens were not consumed above
            if line.split_whitespace().count() > if matches!(op, ChangeOp::DocDelFromRole { .. }) { 3 } else { 2 } {
                return Err(Error::parse(ln, "trailing tokens"));
            }
        }
        Ok(op)
    }
}

/// One change per line; blank lines and `#` comments skipped.
pub fn parse_change_log(text: &str) -> Result<Vec<ChangeOp>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
        .map(|(i, l)| ChangeOp::parse_at(l, i + 1))
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ApplyReport {
    pub touched_partitions: Vec<PartitionId>,
    pub rebuilt_partitions: Vec<PartitionId>,
    pub rerouted_users: usize,
    /// Partition that received an added role.
    pub placement: Option<PartitionId>,
}

/// Applies one change in place. Plan, indexes, routing and cached authorizations stay consistent.
pub fn apply<T: Scalar>(dep: &mut Deployment<T>, op: &ChangeOp, cfg: &SplitConfig) -> Result<ApplyReport> {
    match op {
        ChangeOp::UserAdd { user, roles } => user_add(dep, *user, roles),
        ChangeOp::UserDel { user } => user_del(dep, *user),
        ChangeOp::DocAddToRole { role, doc, vector } => doc_add(dep, *role, *doc, vector.as_deref()),
        ChangeOp::DocDelFromRole { role, doc } => doc_del(dep, *role, *doc),
        ChangeOp::RoleAdd { role, docs, users } => role_add(dep, *role, docs, users, cfg),
        ChangeOp::RoleDel { role } => role_del(dep, *role),
    }
}

fn set_auth<T: Scalar>(dep: &mut Deployment<T>, u: UserId) -> Result<()> {
    if u.index() >= dep.auth.len() {
        dep.auth.resize(u.index() + 1, None);
    }
    dep.auth[u.index()] = Some(dep.policy.auth_user(u)?);
    Ok(())
}

/// Recomputes cached authorizations and routes of `users` and routes of `roles`.
fn reroute<T: Scalar>(dep: &mut Deployment<T>, users: &[UserId], roles: &[RoleId]) -> Result<usize> {
    for &u in users {
        set_auth(dep, u)?;
    }
    let mut router = crate::partition::Router::new(&dep.plan);
    for &u in users {
        let auth = &dep.auth[u.index()].as_ref().ok_or(Error::UnknownUser(u))?.docs;
        let route = router.cover(auth)?.into_iter().map(|x| x.0).collect();
        dep.routing.set_user(u, route);
    }
    for &r in roles {
        let route = router.cover(dep.policy.auth_role(r)?)?.into_iter().map(|x| x.0).collect();
        dep.routing.set_role(r, route);
    }
    Ok(users.len())
}

/// Users and roles that must be rerouted: holders of `r` plus anyone routed through a shrunk partition.
fn affected<T: Scalar>(dep: &Deployment<T>, mut users: Vec<UserId>, r: RoleId, shrunk: &[PartitionId]) -> (Vec<UserId>, Vec<RoleId>) {
    let mut roles = vec![r];
    if !shrunk.is_empty() {
        let hits = |route: &[PartitionId]| route.iter().any(|p| shrunk.contains(p));
        users.extend(dep.routing.users().filter(|(_, route)| hits(route)).map(|(u, _)| u));
        roles.extend(dep.routing.roles().filter(|(_, route)| hits(route)).map(|(q, _)| q));
    }
    sets::normalize(&mut users);
    sets::normalize(&mut roles);
    users.retain(|&u| dep.policy.has_user(u));
    roles.retain(|&q| dep.policy.has_role(q));
    (users, roles)
}

fn reroute_all<T: Scalar>(dep: &mut Deployment<T>) -> Result<usize> {
    dep.routing = build_routing(&dep.policy, &dep.plan)?;
    dep.auth = crate::engine::auth_table(&dep.policy)?;
    Ok(dep.policy.live_user_count())
}

fn index_mut<T: Scalar>(dep: &mut Deployment<T>, p: PartitionId) -> &mut HnswIndex<T> {
    Arc::make_mut(&mut dep.indexes[p])
}

fn insert_doc<T: Scalar>(dep: &mut Deployment<T>, p: PartitionId, d: DocId) -> Result<()> {
    sets::insert(dep.plan.partition_mut(p), d);
    let v = dep.dataset.row(d.index()).to_vec();
    let idx = index_mut(dep, p);
    if !idx.restore(d) && !idx.contains(d) {
        idx.insert(d, &v)?;
    }
    Ok(())
}

/// Tombstones `d` in partition `p`; returns true if the index was rebuilt.
fn remove_doc<T: Scalar>(dep: &mut Deployment<T>, p: PartitionId, d: DocId) -> Result<bool> {
    sets::remove(dep.plan.partition_mut(p), &d);
    let idx = index_mut(dep, p);
    idx.mark_deleted(d);
    if idx.tombstone_ratio() > REBUILD_THRESHOLD {
        *idx = idx.rebuilt()?;
        return Ok(true);
    }
    Ok(false)
}

/// Whether partition `p` still has to hold `d` through one of its roles or as an unassigned document.
fn still_needed<T: Scalar>(dep: &Deployment<T>, p: PartitionId, d: DocId) -> Result<bool> {
    if p == 0 && sets::contains(dep.plan.unassigned(), &d) {
        return Ok(true);
    }
    for r in dep.plan.roles_of(p) {
        if sets::contains(dep.policy.auth_role(*r)?, &d) {
            return Ok(true);
        }
    }
    Ok(false)
}

fn partitions_with_role<T: Scalar>(dep: &Deployment<T>, r: RoleId) -> Vec<PartitionId> {
    (0..dep.plan.len()).filter(|&j| sets::contains(dep.plan.roles_of(j), &r)).collect()
}

fn user_add<T: Scalar>(dep: &mut Deployment<T>, u: UserId, roles: &[RoleId]) -> Result<ApplyReport> {
    if dep.policy.has_user(u) {
        return Err(Error::domain(format!("user {u} already exists")));
    }
    dep.policy.set_user(u, roles.to_vec())?;
    let n = reroute(dep, &[u], &[])?;
    Ok(ApplyReport { rerouted_users: n, ..ApplyReport::default() })
}

fn user_del<T: Scalar>(dep: &mut Deployment<T>, u: UserId) -> Result<ApplyReport> {
    dep.policy.remove_user(u)?;
    dep.routing.remove_user(u);
    if let Some(a) = dep.auth.get_mut(u.index()) {
        *a = None;
    }
    Ok(ApplyReport::default())
}

fn doc_add<T: Scalar>(dep: &mut Deployment<T>, r: RoleId, d: DocId, vector: Option<&[f64]>) -> Result<ApplyReport> {
    if !dep.policy.has_role(r) {
        return Err(Error::UnknownRole(r));
    }
    let num_docs = dep.policy.num_docs();
    if d.index() > num_docs {
        return Err(Error::domain(format!("new document ids must be dense; expected {num_docs}")));
    }
    if d.index() == num_docs {
        match vector {
            Some(v) if d.index() == dep.dataset.len() => {
                let v: Vec<T> = v.iter().map(|x| T::from_f64_lossy(*x)).collect();
                Arc::make_mut(&mut dep.dataset).push(&v)?;
            }
            Some(_) => return Err(Error::domain(format!("document {d} already has a vector"))),
            None if d.index() < dep.dataset.len() => {}
            None => return Err(Error::domain(format!("new document {d} needs a vector"))),
        }
        dep.policy.grow_docs(num_docs + 1);
        dep.plan.set_num_docs(num_docs + 1);
    } else if vector.is_some() {
        return Err(Error::domain(format!("document {d} already has a vector")));
    }
    if sets::contains(dep.policy.auth_role(r)?, &d) {
        return Err(Error::domain(format!("role {r} already grants {d}")));
    }
    dep.policy.grant_doc(r, d)?;
    let mut report = ApplyReport::default();
    if sets::remove(dep.plan.unassigned_mut(), &d) && !still_needed(dep, 0, d)? && !sets::contains(&partitions_with_role(dep, r), &0) {
        if remove_doc(dep, 0, d)? {
            report.rebuilt_partitions.push(0);
        }
        report.touched_partitions.push(0);
    }
    for p in partitions_with_role(dep, r) {
        if !sets::contains(dep.plan.partition(p), &d) {
            insert_doc(dep, p, d)?;
        }
        sets::insert(&mut report.touched_partitions, p);
    }
    let (users, roles) = affected(dep, dep.policy.users_of_role(r), r, &report.touched_partitions);
    report.rerouted_users = reroute(dep, &users, &roles)?;
    Ok(report)
}

fn doc_del<T: Scalar>(dep: &mut Deployment<T>, r: RoleId, d: DocId) -> Result<ApplyReport> {
    if !sets::contains(dep.policy.auth_role(r)?, &d) {
        return Err(Error::domain(format!("role {r} does not grant {d}")));
    }
    dep.policy.revoke_doc(r, d)?;
    let mut report = ApplyReport::default();
    for p in partitions_with_role(dep, r) {
        if !still_needed(dep, p, d)? {
            if remove_doc(dep, p, d)? {
                report.rebuilt_partitions.push(p);
            }
            report.touched_partitions.push(p);
        }
    }
    let (users, roles) = affected(dep, dep.policy.users_of_role(r), r, &report.touched_partitions);
    report.rerouted_users = reroute(dep, &users, &roles)?;
    Ok(report)
}

/// Candidate placements of a new role: into each existing partition or into a fresh one.
fn candidate_plan(plan: &PartitionPlan, docs: &[DocId], r: RoleId, target: Option<PartitionId>) -> PartitionPlan {
    let mut p = plan.clone();
    match target {
        Some(j) => {
            let merged = sets::union(p.partition(j), docs);
            *p.partition_mut(j) = merged;
            sets::insert(p.roles_mut(j), r);
        }
        None => {
            p.push_partition(docs.to_vec(), vec![r]);
        }
    }
    p
}

fn role_add<T: Scalar>(dep: &mut Deployment<T>, r: RoleId, docs: &[DocId], users: &[UserId], cfg: &SplitConfig) -> Result<ApplyReport> {
    cfg.validate()?;
    let mut docs = docs.to_vec();
    sets::normalize(&mut docs);
    for &u in users {
        if !dep.policy.has_user(u) {
            return Err(Error::UnknownUser(u));
        }
    }
    let mut policy = dep.policy.clone();
    policy.insert_role(r, docs.clone())?;
    for &u in users {
        let mut roles = policy.user_roles(u)?.to_vec();
        roles.push(r);
        policy.set_user(u, roles)?;
    }
    for &d in &docs {
        if d.index() >= dep.dataset.len() {
            return Err(Error::UnknownDoc(d));
        }
    }

    // Cheapest-memory candidate is the reference; others must buy cost reduction with memory.
    let targets: Vec<Option<PartitionId>> = (0..dep.plan.len()).map(Some).chain(std::iter::once(None)).collect();
    let mut evals = Vec::with_capacity(targets.len());
    for &t in &targets {
        let plan = candidate_plan(&dep.plan, &docs, r, t);
        let e = evaluate_plan(&policy, &plan, cfg)?;
        evals.push((t, e.user_cost, plan.total_docs() as f64));
    }
    let budget = cfg.budget(policy.num_docs()) as f64;
    let feasible: Vec<_> = evals.iter().copied().filter(|e| e.2 <= budget).collect();
    // over budget everywhere: least memory, no trading
    let pool = if feasible.is_empty() { evals.clone() } else { feasible.clone() };
    let base = *pool
        .iter()
        .min_by(|a, b| a.2.total_cmp(&b.2).then(a.1.total_cmp(&b.1)))
        .expect("at least the fresh partition");
    let mut pick = base;
    let mut best = 0.0;
    for &c in &feasible {
        let gain = base.1 - c.1;
        if gain <= 0.0 {
            continue;
        }
        let score = gain / (c.2 - base.2 + 1e-9);
        if score > best {
            best = score;
            pick = c;
        }
    }

    dep.policy = policy;
    let mut report = ApplyReport::default();
    let placed = match pick.0 {
        Some(j) => {
            sets::insert(dep.plan.roles_mut(j), r);
            for &d in &docs {
                if !sets::contains(dep.plan.partition(j), &d) {
                    insert_doc(dep, j, d)?;
                }
            }
            j
        }
        None => {
            let j = dep.plan.push_partition(docs.clone(), vec![r]);
            let idx = HnswIndex::build_subset(&dep.dataset, &docs, dep.hnsw, crate::engine::partition_seed(dep.seed, &docs))?;
            dep.indexes.push(Arc::new(idx));
            j
        }
    };
    for &d in &docs {
        if sets::remove(dep.plan.unassigned_mut(), &d) && placed != 0 && !still_needed(dep, 0, d)? {
            if remove_doc(dep, 0, d)? {
                report.rebuilt_partitions.push(0);
            }
            report.touched_partitions.push(0);
        }
    }
    report.placement = Some(placed);
    let shrunk: Vec<PartitionId> = report.touched_partitions.iter().copied().filter(|&p| p != placed).collect();
    report.touched_partitions.push(placed);
    let (users, roles) = affected(dep, users.to_vec(), r, &shrunk);
    report.rerouted_users = reroute(dep, &users, &roles)?;
    Ok(report)
}

fn role_del<T: Scalar>(dep: &mut Deployment<T>, r: RoleId) -> Result<ApplyReport> {
    let parts = partitions_with_role(dep, r);
    dep.policy.remove_role(r)?;
    dep.routing.remove_role(r);
    let mut report = ApplyReport::default();
    let mut emptied = Vec::new();
    for &p in &parts {
        sets::remove(dep.plan.roles_mut(p), &r);
        let mut keep: Vec<&[DocId]> = Vec::new();
        for q in dep.plan.roles_of(p) {
            keep.push(dep.policy.auth_role(*q)?);
        }
        if p == 0 {
            keep.push(dep.plan.unassigned());
        }
        let keep = sets::union_many(keep);
        if keep.is_empty() {
            emptied.push(p);
            continue;
        }
        let gone = sets::difference(dep.plan.partition(p), &keep);
        for d in gone {
            if remove_doc(dep, p, d)? && !report.rebuilt_partitions.contains(&p) {
                report.rebuilt_partitions.push(p);
            }
        }
        report.touched_partitions.push(p);
    }
    for &p in emptied.iter().rev() {
        dep.plan.remove_partition(p);
        dep.indexes.remove(p);
    }
    report.rerouted_users = reroute_all(dep)?;
    Ok(report)
}

/// How far an incrementally maintained deployment has drifted from a fresh greedy plan.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StalenessReport {
    pub memory_ratio: f64,
    pub modeled_cost: f64,
    /// Fresh split under the original configuration.
    pub fresh_memory_ratio: f64,
    pub fresh_cost: f64,
    /// Budget of the comparison split: the original `alpha`, raised to the current memory ratio.
    pub matched_alpha: f64,
    pub matched_cost: f64,
    /// `(modeled_cost - matched_cost) / matched_cost`.
    pub cost_gap: f64,
}

/// Compares the maintained plan with fresh splits, one under `cfg` and one with the same memory allowance.
pub fn staleness_report<T: Scalar>(dep: &Deployment<T>, cfg: &SplitConfig) -> Result<StalenessReport> {
    let current = evaluate_plan(&dep.policy, &dep.plan, cfg)?;
    let fresh = greedy_split_traced(&dep.policy, cfg)?;
    let memory_ratio = dep.plan.memory_ratio();
    let (matched_alpha, matched_cost) = if memory_ratio > cfg.alpha {
        let wider = SplitConfig { alpha: memory_ratio, ..cfg.clone() };
        let m = greedy_split_traced(&dep.policy, &wider)?;
        (memory_ratio, m.eval.user_cost)
    } else {
        (cfg.alpha, fresh.eval.user_cost)
    };
    let gap = (current.user_cost - matched_cost) / matched_cost;
    Ok(StalenessReport {
        memory_ratio,
        modeled_cost: current.user_cost,
        fresh_memory_ratio: fresh.plan.memory_ratio(),
        fresh_cost: fresh.eval.user_cost,
        matched_alpha,
        matched_cost,
        cost_gap: if gap.abs() < 1e-12 { 0.0 } else { gap },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::index::{brute_force_docs, HnswParams};
    use crate::partition::greedy_split;
    use crate::rbac::RbacPolicy;
    use crate::workload::{gen_queries, gen_tree, gen_vectors, TreeParams};
    use crate::Dataset;
    use proptest::prelude::*;

    fn d(a: u32, b: u32) -> Vec<DocId> {
        (a..b).map(DocId).collect()
    }

    fn cfg() -> SplitConfig {
        SplitConfig::with_defaults(2.0, 0.9)
    }

    fn check(dep: &Deployment<f32>) {
        dep.plan.validate(&dep.policy).unwrap();
        for (j, p) in dep.plan.partitions().iter().enumerate() {
            assert_eq!(&dep.indexes[j].docs(), p, "partition {j}");
        }
        for u in dep.policy.users() {
            let auth = dep.policy.auth_user(u).unwrap();
            assert_eq!(dep.auth(u).unwrap(), &auth);
            let routed = sets::union_many(dep.routing.user(u).unwrap().iter().map(|&p| dep.plan.partition(p)));
            assert!(sets::is_subset(&auth.docs, &routed), "user {u}");
        }
        for r in dep.policy.roles() {
            let routed = sets::union_many(dep.routing.role(r).unwrap().iter().map(|&p| dep.plan.partition(p)));
            assert!(sets::is_subset(dep.policy.auth_role(r).unwrap(), &routed), "role {r}");
        }
    }

    fn tree_dep(seed: u64) -> Deployment<f32> {
        let p = gen_tree(&TreeParams::alpha(80, 20, 1200), seed).unwrap();
        let data = Arc::new(gen_vectors::<f32>(1300, 8, seed).unwrap());
        let plan = greedy_split(&p, &cfg()).unwrap();
        Deployment::build(p, plan, data, HnswParams::default(), 200, seed).unwrap()
    }

    #[test]
    fn parse_round_trip() {
        let ops = vec![
            ChangeOp::UserAdd { user: UserId(4), roles: vec![RoleId(1), RoleId(2)] },
            ChangeOp::UserDel { user: UserId(4) },
            ChangeOp::DocAddToRole { role: RoleId(1), doc: DocId(9), vector: None },
            ChangeOp::DocAddToRole { role: RoleId(1), doc: DocId(10), vector: Some(vec![0.5, -1.0]) },
            ChangeOp::DocDelFromRole { role: RoleId(1), doc: DocId(9) },
            ChangeOp::RoleAdd { role: RoleId(7), docs: d(1, 4), users: vec![UserId(0), UserId(2)] },
            ChangeOp::RoleDel { role: RoleId(7) },
        ];
        let text: String = ops.iter().map(|o| format!("{o}\n")).collect();
        assert_eq!(parse_change_log(&format!("# log\n\n{text}")).unwrap(), ops);
        assert!(ChangeOp::parse("role_rename 1").is_err());
        assert!(ChangeOp::parse("user_del").is_err());
        assert!(ChangeOp::parse("user_del 1 2").is_err());
    }

    #[test]
    fn user_add_routes_to_role_partition() {
        let p = RbacPolicy::new(30, vec![vec![RoleId(0)]], vec![d(0, 10), d(10, 20), d(20, 30)]).unwrap();
        let data = Arc::new(gen_vectors::<f32>(30, 4, 1).unwrap());
        let plan = PartitionPlan::per_role(&p);
        let mut dep = Deployment::build(p, plan, data, HnswParams::default(), 50, 1).unwrap();
        apply(&mut dep, &ChangeOp::UserAdd { user: UserId(1), roles: vec![RoleId(2)] }, &cfg()).unwrap();
        assert_eq!(dep.routing.user(UserId(1)).unwrap(), &[2]);
        assert!(apply(&mut dep, &ChangeOp::UserAdd { user: UserId(1), roles: vec![RoleId(0)] }, &cfg()).is_err());
        check(&dep);
    }

    #[test]
    fn user_del_then_add_restores_route() {
        let mut dep = tree_dep(2);
        let u = UserId(5);
        let roles = dep.policy.user_roles(u).unwrap().to_vec();
        let route = dep.routing.user(u).unwrap().to_vec();
        apply(&mut dep, &ChangeOp::UserDel { user: u }, &cfg()).unwrap();
        assert!(dep.execute(u, &[0.0; 8], 10).is_err());
        apply(&mut dep, &ChangeOp::UserAdd { user: u, roles }, &cfg()).unwrap();
        assert_eq!(dep.routing.user(u).unwrap(), route);
        check(&dep);
    }

    #[test]
    fn shared_doc_retained_on_delete() {
        let p = RbacPolicy::new(20, vec![vec![RoleId(0)], vec![RoleId(1)]], vec![d(0, 12), d(8, 20)]).unwrap();
        let data = Arc::new(gen_vectors::<f32>(20, 4, 1).unwrap());
        let plan = PartitionPlan::single(&p);
        let mut dep = Deployment::build(p, plan, data, HnswParams::default(), 50, 1).unwrap();
        apply(&mut dep, &ChangeOp::DocDelFromRole { role: RoleId(0), doc: DocId(9) }, &cfg()).unwrap();
        assert!(dep.index(0).contains(DocId(9)));
        assert!(!dep.auth(UserId(0)).unwrap().contains(DocId(9)));
        check(&dep);
        apply(&mut dep, &ChangeOp::DocDelFromRole { role: RoleId(0), doc: DocId(2) }, &cfg()).unwrap();
        assert!(!dep.index(0).contains(DocId(2)));
        check(&dep);
    }

    #[test]
    fn doc_add_new_vector_is_searchable() {
        let mut dep = tree_dep(3);
        let r = RoleId(4);
        let n = dep.policy.num_docs() as u32;
        // the dataset has 100 spare rows past the policy's documents
        apply(&mut dep, &ChangeOp::DocAddToRole { role: r, doc: DocId(n), vector: None }, &cfg()).unwrap();
        check(&dep);
        let u = dep.policy.users_of_role(r)[0];
        let q = dep.dataset.row(n as usize).to_vec();
        let (res, _) = dep.execute(u, &q, 1).unwrap();
        assert_eq!(res.hits[0].doc, DocId(n));
        assert!(apply(&mut dep, &ChangeOp::DocAddToRole { role: r, doc: DocId(n + 5), vector: None }, &cfg()).is_err());
    }

    #[test]
    fn doc_add_with_explicit_vector() {
        let p = RbacPolicy::new(10, vec![vec![RoleId(0)]], vec![d(0, 10)]).unwrap();
        let data = Arc::new(Dataset::from_flat(2, (0..20).map(|x| x as f32).collect()).unwrap());
        let plan = PartitionPlan::single(&p);
        let mut dep = Deployment::build(p, plan, data, HnswParams::default(), 20, 1).unwrap();
        apply(&mut dep, &ChangeOp::DocAddToRole { role: RoleId(0), doc: DocId(10), vector: Some(vec![100.0, 100.0]) }, &cfg()).unwrap();
        let (res, _) = dep.execute(UserId(0), &[99.0, 99.0], 1).unwrap();
        assert_eq!(res.hits[0].doc, DocId(10));
        check(&dep);
    }

    #[test]
    fn tombstones_trigger_rebuild() {
        let p = RbacPolicy::new(50, vec![vec![RoleId(0)]], vec![d(0, 50)]).unwrap();
        let data = Arc::new(gen_vectors::<f32>(50, 4, 1).unwrap());
        let mut dep = Deployment::build(p.clone(), PartitionPlan::single(&p), data, HnswParams::default(), 50, 1).unwrap();
        let mut rebuilt = false;
        for i in 0..15 {
            let rep = apply(&mut dep, &ChangeOp::DocDelFromRole { role: RoleId(0), doc: DocId(i) }, &cfg()).unwrap();
            rebuilt |= !rep.rebuilt_partitions.is_empty();
            assert!(dep.index(0).tombstone_ratio() <= REBUILD_THRESHOLD);
        }
        assert!(rebuilt);
        check(&dep);
    }

    #[test]
    fn role_add_and_delete_keep_invariants() {
        let mut dep = tree_dep(4);
        let users: Vec<UserId> = dep.policy.users().take(6).collect();
        let op = ChangeOp::RoleAdd { role: RoleId(20), docs: d(0, 40), users: users.clone() };
        let rep = apply(&mut dep, &op, &cfg()).unwrap();
        assert!(rep.placement.is_some());
        check(&dep);
        assert!(apply(&mut dep, &op, &cfg()).is_err());
        for &u in &users {
            assert!(dep.auth(u).unwrap().contains(DocId(3)));
        }
        apply(&mut dep, &ChangeOp::RoleDel { role: RoleId(20) }, &cfg()).unwrap();
        check(&dep);
        apply(&mut dep, &ChangeOp::RoleDel { role: RoleId(3) }, &cfg()).unwrap();
        check(&dep);
    }

    #[test]
    fn role_delete_removes_emptied_partition() {
        let p = RbacPolicy::new(30, vec![vec![RoleId(0)], vec![RoleId(1)], vec![RoleId(2)]], vec![d(0, 10), d(10, 20), d(20, 30)]).unwrap();
        let data = Arc::new(gen_vectors::<f32>(30, 4, 1).unwrap());
        let mut dep = Deployment::build(p.clone(), PartitionPlan::per_role(&p), data, HnswParams::default(), 50, 1).unwrap();
        apply(&mut dep, &ChangeOp::RoleDel { role: RoleId(1) }, &cfg()).unwrap();
        assert_eq!(dep.plan.len(), 2);
        assert_eq!(dep.routing.user(UserId(2)).unwrap(), &[1]);
        assert!(dep.routing.user(UserId(1)).unwrap().is_empty());
        check(&dep);
    }

    #[test]
    fn staleness_zero_when_untouched() {
        let dep = tree_dep(5);
        let s = staleness_report(&dep, &cfg()).unwrap();
        assert_eq!(s.cost_gap, 0.0);
        assert_eq!(s.memory_ratio, s.fresh_memory_ratio);
    }

    #[test]
    fn staleness_after_insertions_and_deletions() {
        let mut dep = tree_dep(7);
        let mut del = dep.clone();
        for i in 0..6u32 {
            let docs = d(100 * i, 100 * i + 150);
            let users = (0..5).map(|j| UserId(i * 9 + j)).collect();
            apply(&mut dep, &ChangeOp::RoleAdd { role: RoleId(20 + i), docs, users }, &cfg()).unwrap();
        }
        let s = staleness_report(&dep, &cfg()).unwrap();
        assert!(s.cost_gap > 0.0, "{s:?}");
        for r in [RoleId(17), RoleId(12)] {
            apply(&mut del, &ChangeOp::RoleDel { role: r }, &cfg()).unwrap();
        }
        let s = staleness_report(&del, &cfg()).unwrap();
        assert!(s.cost_gap.abs() < 0.1, "{s:?}");
    }

    #[test]
    fn updates_keep_results_authorized() {
        let mut dep = tree_dep(6);
        let ops = vec![
            ChangeOp::RoleAdd { role: RoleId(20), docs: d(100, 160), users: vec![UserId(1), UserId(2)] },
            ChangeOp::DocDelFromRole { role: RoleId(20), doc: DocId(120) },
            ChangeOp::DocAddToRole { role: RoleId(20), doc: DocId(5), vector: None },
            ChangeOp::UserDel { user: UserId(3) },
            ChangeOp::RoleDel { role: RoleId(7) },
        ];
        for op in &ops {
            apply(&mut dep, op, &cfg()).unwrap();
            check(&dep);
        }
        let w = gen_queries(&dep.policy, 1200, 100, 10, 1).unwrap();
        for q in &w.queries {
            let (res, _) = dep.execute(q.user, dep.dataset.row(q.vector), 10).unwrap();
            let auth = dep.policy.auth_user(q.user).unwrap();
            assert!(res.hits.iter().all(|h| auth.contains(h.doc)));
            let truth = brute_force_docs(&dep.dataset, &auth.docs, dep.dataset.row(q.vector), 10, dep.hnsw.distance);
            assert!(!truth.hits.is_empty() || res.hits.is_empty());
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]
        #[test]
        fn random_op_sequences_keep_invariants(seed in 0u64..1000, picks in proptest::collection::vec((0u8..4, 0u32..1000), 1..8)) {
            let mut dep = tree_dep(seed);
            let mut next_role = 20u32;
            for (kind, x) in picks {
                let roles: Vec<RoleId> = dep.policy.roles().collect();
                let r = roles[x as usize % roles.len()];
                let op = match kind {
                    0 => {
                        let docs = dep.policy.auth_role(r).unwrap();
                        if docs.len() < 2 { continue; }
                        ChangeOp::DocDelFromRole { role: r, doc: docs[x as usize % docs.len()] }
                    }
                    1 => {
                        let doc = DocId(x % 1200);
                        if sets::contains(dep.policy.auth_role(r).unwrap(), &doc) { continue; }
                        ChangeOp::DocAddToRole { role: r, doc, vector: None }
                    }
                    2 => {
                        next_role += 1;
                        let lo = x % 1100;
                        ChangeOp::RoleAdd { role: RoleId(next_role), docs: d(lo, lo + 30), users: vec![UserId(x % 80)] }
                    }
                    _ => {
                        if roles.len() < 3 { continue; }
                        ChangeOp::RoleDel { role: r }
                    }
                };
                apply(&mut dep, &op, &cfg()).unwrap();
                check(&dep);
            }
        }
    }
}
