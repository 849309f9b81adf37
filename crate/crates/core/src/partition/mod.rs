//! Overlapping partition plans, routing, modeled plan cost and the greedy splitter.

mod eval;
mod exhaustive;
mod greedy;
mod routing;

use std::collections::BTreeMap;
use std::fmt::Write as _;

pub use eval::{evaluate_plan, role_cost, user_cost, user_weights, PlanEval};
pub use exhaustive::{exhaustive_optimum, OracleOutcome};
pub use greedy::{find_best_split, greedy_split, greedy_split_traced, SplitOutcome};
pub use routing::{build_routing, RoutingTable};
pub(crate) use routing::Router;

use crate::error::{Error, Result};
use crate::ids::{DocId, PartitionId, RoleId};
use crate::perf::{CostModel, LatencyParams, RecallParams};
use crate::rbac::RbacPolicy;
use crate::sets;

/// Partitions as sorted document sets plus the roles each one serves.
///
/// Documents granted by no role can be parked in partition 0 so the plan still covers the corpus.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PartitionPlan {
    num_docs: usize,
    partitions: Vec<Vec<DocId>>,
    roles: Vec<Vec<RoleId>>,
    unassigned: Vec<DocId>,
}

impl PartitionPlan {
    /// One partition per role group; unassigned documents go to the first group.
    pub fn from_groups(policy: &RbacPolicy, groups: Vec<Vec<RoleId>>) -> Result<Self> {
        Self::build(policy, groups, true)
    }

    fn build(policy: &RbacPolicy, groups: Vec<Vec<RoleId>>, keep_unassigned: bool) -> Result<Self> {
        let unassigned = if keep_unassigned { orphans(policy) } else { Vec::new() };
        let mut partitions = Vec::with_capacity(groups.len());
        let mut roles = Vec::with_capacity(groups.len());
        for (i, mut g) in groups.into_iter().enumerate() {
            sets::normalize(&mut g);
            let mut parts = Vec::with_capacity(g.len() + 1);
            for r in &g {
                parts.push(policy.auth_role(*r)?);
            }
            if i == 0 {
                parts.push(&unassigned);
            }
            let docs = sets::union_many(parts);
            if docs.is_empty() {
                return Err(Error::InvalidPlan(format!("partition {i} would be empty")));
            }
            partitions.push(docs);
            roles.push(g);
        }
        if partitions.is_empty() {
            return Err(Error::InvalidPlan("plan has no partitions".into()));
        }
        Ok(PartitionPlan { num_docs: policy.num_docs(), partitions, roles, unassigned })
    }

    /// Everything in one partition.
    pub fn single(policy: &RbacPolicy) -> Self {
        let all: Vec<RoleId> = policy.roles().collect();
        Self::build(policy, vec![all], true).unwrap_or_else(|_| PartitionPlan {
            num_docs: policy.num_docs(),
            partitions: vec![(0..policy.num_docs()).map(DocId::from_index).collect()],
            roles: vec![Vec::new()],
            unassigned: orphans(policy),
        })
    }

    /// One partition per role. Documents granted by no role are not indexed.
    pub fn per_role(policy: &RbacPolicy) -> Self {
        let groups = policy.roles().map(|r| vec![r]).collect();
        Self::build(policy, groups, false).expect("roles are never empty")
    }

    /// One partition per distinct user role set. Roles may repeat across partitions.
    pub fn per_role_combination(policy: &RbacPolicy) -> Self {
        let mut combos: BTreeMap<Vec<RoleId>, ()> = BTreeMap::new();
        for u in policy.users() {
            let rs = policy.user_roles(u).expect("live user");
            if !rs.is_empty() {
                combos.insert(rs.to_vec(), ());
            }
        }
        let groups: Vec<Vec<RoleId>> = combos.into_keys().collect();
        if groups.is_empty() {
            return Self::single(policy);
        }
        Self::build(policy, groups, false).expect("roles are never empty")
    }

    pub fn len(&self) -> usize {
        self.partitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.partitions.is_empty()
    }

    pub fn num_docs(&self) -> usize {
        self.num_docs
    }

    pub fn partition(&self, i: PartitionId) -> &[DocId] {
        &self.partitions[i]
    }

    pub fn partitions(&self) -> &[Vec<DocId>] {
        &self.partitions
    }

    pub fn roles_of(&self, i: PartitionId) -> &[RoleId] {
        &self.roles[i]
    }

    pub fn role_groups(&self) -> &[Vec<RoleId>] {
        &self.roles
    }

    /// Documents held by partition 0 that no role grants.
    pub fn unassigned(&self) -> &[DocId] {
        &self.unassigned
    }

    pub fn total_docs(&self) -> usize {
        self.partitions.iter().map(Vec::len).sum()
    }

    /// `Σ|π_i| / |D|`.
    pub fn memory_ratio(&self) -> f64 {
        self.total_docs() as f64 / self.num_docs.max(1) as f64
    }

    /// Partition owning `r`, if the role sits in exactly one partition.
    pub fn owner_of(&self, r: RoleId) -> Option<PartitionId> {
        let mut it = self.roles.iter().enumerate().filter(|(_, rs)| sets::contains(rs, &r)).map(|(i, _)| i);
        match (it.next(), it.next()) {
            (Some(i), None) => Some(i),
            _ => None,
        }
    }

    pub fn is_role_atomic(&self, policy: &RbacPolicy) -> bool {
        let mut seen = vec![0u32; policy.num_roles()];
        for rs in &self.roles {
            for r in rs {
                if r.index() >= seen.len() {
                    return false;
                }
                seen[r.index()] += 1;
            }
        }
        policy.roles().all(|r| seen[r.index()] == 1)
    }

    /// Structural checks: non-empty partitions, each partition equals the union of its roles' documents
    /// (plus the unassigned documents for partition 0), and every granted document is covered.
    pub fn validate(&self, policy: &RbacPolicy) -> Result<()> {
        for (i, (docs, roles)) in self.partitions.iter().zip(&self.roles).enumerate() {
            if docs.is_empty() {
                return Err(Error::InvalidPlan(format!("partition {i} is empty")));
            }
            let mut parts: Vec<&[DocId]> = Vec::new();
            for r in roles {
                parts.push(policy.auth_role(*r)?);
            }
            if i == 0 {
                parts.push(&self.unassigned);
            }
            if sets::union_many(parts) != *docs {
                return Err(Error::InvalidPlan(format!("partition {i} differs from the union of its roles")));
            }
        }
        let covered = sets::union_many(self.partitions.iter().map(Vec::as_slice));
        if !sets::is_subset(&policy.assigned_docs(), &covered) {
            return Err(Error::InvalidPlan("some granted document is in no partition".into()));
        }
        Ok(())
    }

    pub(crate) fn partition_mut(&mut self, i: PartitionId) -> &mut Vec<DocId> {
        &mut self.partitions[i]
    }

    pub(crate) fn roles_mut(&mut self, i: PartitionId) -> &mut Vec<RoleId> {
        &mut self.roles[i]
    }

    pub(crate) fn unassigned_mut(&mut self) -> &mut Vec<DocId> {
        &mut self.unassigned
    }

    pub(crate) fn push_partition(&mut self, docs: Vec<DocId>, roles: Vec<RoleId>) -> PartitionId {
        self.partitions.push(docs);
        self.roles.push(roles);
        self.partitions.len() - 1
    }

    pub(crate) fn remove_partition(&mut self, i: PartitionId) {
        self.partitions.remove(i);
        self.roles.remove(i);
        if i == 0 {
            self.unassigned.clear();
        }
    }

    pub(crate) fn set_num_docs(&mut self, n: usize) {
        self.num_docs = self.num_docs.max(n);
    }

    /// `partition <id>: roles=<r...>` lines, an `unassigned:` line and a document-count summary.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (i, rs) in self.roles.iter().enumerate() {
            let _ = write!(out, "partition {i}: roles=");
            let ids: Vec<String> = rs.iter().map(|r| r.to_string()).collect();
            out.push_str(&ids.join(" "));
            out.push('\n');
        }
        let un: Vec<String> = self.unassigned.iter().map(|d| d.to_string()).collect();
        let _ = writeln!(out, "unassigned: {}", un.join(" "));
        let counts: Vec<String> = self.partitions.iter().enumerate().map(|(i, p)| format!("{i}={}", p.len())).collect();
        let _ = writeln!(
            out,
            "docs: {} total={} corpus={} ratio={:.4}",
            counts.join(" "),
            self.total_docs(),
            self.num_docs,
            self.memory_ratio()
        );
        out
    }

    /// Rebuilds a plan from its text form; document sets are recomputed from the policy.
    pub fn from_text(text: &str, policy: &RbacPolicy) -> Result<Self> {
        let mut groups: Vec<Vec<RoleId>> = Vec::new();
        let mut unassigned = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if let Some(rest) = line.strip_prefix("partition ") {
                let (id, roles) = rest.split_once(':').ok_or_else(|| Error::parse(ln + 1, "missing ':'"))?;
                let id: usize = id.trim().parse().map_err(|_| Error::parse(ln + 1, "bad partition id"))?;
                if id != groups.len() {
                    return Err(Error::parse(ln + 1, "partition ids must be consecutive from 0"));
                }
                let roles = roles.trim().strip_prefix("roles=").ok_or_else(|| Error::parse(ln + 1, "expected roles="))?;
                groups.push(parse_ids(roles, ln + 1)?.into_iter().map(RoleId).collect());
            } else if let Some(rest) = line.strip_prefix("unassigned:") {
                unassigned = parse_ids(rest, ln + 1)?.into_iter().map(DocId).collect();
            }
        }
        if groups.is_empty() {
            return Err(Error::parse(0, "no partition lines"));
        }
        let mut partitions = Vec::with_capacity(groups.len());
        for (i, g) in groups.iter().enumerate() {
            let mut parts: Vec<&[DocId]> = Vec::new();
            for r in g {
                parts.push(policy.auth_role(*r)?);
            }
            if i == 0 {
                parts.push(&unassigned);
            }
            partitions.push(sets::union_many(parts));
        }
        let plan = PartitionPlan { num_docs: policy.num_docs(), partitions, roles: groups, unassigned };
        plan.validate(policy)?;
        Ok(plan)
    }
}

fn parse_ids(s: &str, line: usize) -> Result<Vec<u32>> {
    s.split_whitespace()
        .map(|t| t.parse().map_err(|_| Error::parse(line, format!("bad id {t}"))))
        .collect()
}

fn orphans(policy: &RbacPolicy) -> Vec<DocId> {
    policy
        .doc_role_counts()
        .iter()
        .enumerate()
        .filter(|(_, c)| **c == 0)
        .map(|(d, _)| DocId::from_index(d))
        .collect()
}

/// How users are weighted in the user-level objective.
#[derive(Clone, Debug, Default, PartialEq)]
pub enum Objective {
    #[default]
    UserAverage,
    /// Every role carries equal total weight, shared among its users.
    RoleAverage,
    /// Explicit per-user weights, indexed by user id.
    Workload(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitConfig {
    pub alpha: f64,
    pub epsilon: f64,
    pub eta: f64,
    pub k: usize,
    pub model: CostModel<f64>,
    pub recall: RecallParams<f64>,
    pub ef_cap: usize,
    pub objective: Objective,
}

impl SplitConfig {
    pub fn new(alpha: f64, epsilon: f64, model: CostModel<f64>, recall: RecallParams<f64>) -> Self {
        SplitConfig { alpha, epsilon, eta: 0.0, k: 10, model, recall, ef_cap: 1000, objective: Objective::UserAverage }
    }

    /// Post-filter HNSW model with placeholder constants; only cost ratios matter to the splitter.
    pub fn with_defaults(alpha: f64, epsilon: f64) -> Self {
        Self::new(
            alpha,
            epsilon,
            CostModel::HnswPostFilter(LatencyParams { a: 1.0e-7, b: 2.0e-6 }),
            RecallParams { beta: 0.5, gamma: 0.5 },
        )
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 1.0) || !self.alpha.is_finite() {
            return Err(Error::params("alpha must be >= 1"));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::params("epsilon must lie in (0, 1)"));
        }
        if self.k == 0 || self.ef_cap == 0 {
            return Err(Error::params("k and ef_cap must be >= 1"));
        }
        if !self.eta.is_finite() {
            return Err(Error::params("eta must be finite"));
        }
        RecallParams::new(self.recall.beta, self.recall.gamma)?;
        self.model.validate()
    }

    /// Largest admissible `Σ|π|`.
    pub fn budget(&self, num_docs: usize) -> u64 {
        (self.alpha * num_docs as f64 + 1e-9).floor() as u64
    }
}
