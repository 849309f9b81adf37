use std::collections::HashMap;

use super::routing::Router;
use super::{Objective, PartitionPlan, RoutingTable, SplitConfig};
use crate::error::{Error, Result};
use crate::ids::{DocId, PartitionId, RoleId, UserId};
use crate::perf::{recall_estimate, solve_ef_s, CostModel};
use crate::rbac::RbacPolicy;
use crate::sets;

/// Modeled quality of a plan under one global queue width.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlanEval {
    pub mean_selectivity: f64,
    pub ef_s: usize,
    pub ef_capped: bool,
    pub modeled_recall: f64,
    /// Weighted mean over users of the summed partition costs.
    pub user_cost: f64,
    /// Mean over roles of the summed partition costs.
    pub role_cost: f64,
    pub total_docs: usize,
}

impl PlanEval {
    pub fn memory_ratio(&self, num_docs: usize) -> f64 {
        self.total_docs as f64 / num_docs.max(1) as f64
    }

    /// Within the memory budget and able to reach the recall target under the model.
    pub fn feasible(&self, cfg: &SplitConfig, num_docs: usize) -> bool {
        self.total_docs as u64 <= cfg.budget(num_docs) && !self.ef_capped
    }
}

/// Per-user objective weights indexed by user id; vacant users weigh 0.
pub fn user_weights(policy: &RbacPolicy, objective: &Objective) -> Result<Vec<f64>> {
    let mut w = vec![0.0; policy.num_users()];
    match objective {
        Objective::UserAverage => {
            for u in policy.users() {
                w[u.index()] = 1.0;
            }
        }
        Objective::RoleAverage => {
            let mut holders = vec![0usize; policy.num_roles()];
            for u in policy.users() {
                for r in policy.user_roles(u)? {
                    holders[r.index()] += 1;
                }
            }
            for u in policy.users() {
                w[u.index()] = policy.user_roles(u)?.iter().map(|r| 1.0 / holders[r.index()] as f64).sum();
            }
        }
        Objective::Workload(given) => {
            for u in policy.users() {
                let v = given.get(u.index()).copied().unwrap_or(0.0);
                if !(v >= 0.0 && v.is_finite()) {
                    return Err(Error::params(format!("weight of user {u} must be finite and >= 0")));
                }
                w[u.index()] = v;
            }
        }
    }
    Ok(w)
}

fn route_cost(model: &CostModel<f64>, plan: &PartitionPlan, docs: &[DocId], route: &[PartitionId], ef: usize, k: usize) -> Result<f64> {
    let mut total = 0.0;
    for &j in route {
        let part = plan.partition(j);
        let sel = sets::intersection_len(docs, part) as f64 / part.len() as f64;
        total += model.partition_cost(part.len(), ef, sel, k)?;
    }
    Ok(total)
}

/// Sum of partition costs over the user's routed partitions.
pub fn user_cost(
    policy: &RbacPolicy,
    plan: &PartitionPlan,
    routing: &RoutingTable,
    model: &CostModel<f64>,
    u: UserId,
    ef_s: usize,
    k: usize,
) -> Result<f64> {
    let auth = policy.auth_user(u)?;
    route_cost(model, plan, &auth.docs, routing.user(u)?, ef_s, k)
}

/// Sum of partition costs over the role's routed partitions.
pub fn role_cost(
    policy: &RbacPolicy,
    plan: &PartitionPlan,
    routing: &RoutingTable,
    model: &CostModel<f64>,
    r: RoleId,
    ef_s: usize,
    k: usize,
) -> Result<f64> {
    route_cost(model, plan, policy.auth_role(r)?, routing.role(r)?, ef_s, k)
}

/// Routes every user and role, derives the queue width from the mean user selectivity and
/// returns the modeled costs. Users without roles are ignored.
pub fn evaluate_plan(policy: &RbacPolicy, plan: &PartitionPlan, cfg: &SplitConfig) -> Result<PlanEval> {
    let weights = user_weights(policy, &cfg.objective)?;
    let mut router = Router::new(plan);
    let mut memo: HashMap<&[RoleId], (f64, Vec<(PartitionId, usize)>)> = HashMap::new();
    let mut per_user = Vec::new();
    for u in policy.users() {
        let roles = policy.user_roles(u)?;
        if roles.is_empty() {
            continue;
        }
        if !memo.contains_key(roles) {
            let auth = policy.auth_user(u)?;
            let route = router.cover(&auth.docs)?;
            let sel = route.iter().map(|&(j, n)| n as f64 / plan.partition(j).len() as f64).sum::<f64>() / route.len() as f64;
            memo.insert(roles, (sel, route));
        }
        per_user.push((u, roles));
    }
    if per_user.is_empty() {
        return Err(Error::domain("policy has no user holding a role"));
    }
    let mean_selectivity = per_user.iter().map(|(_, r)| memo[r].0).sum::<f64>() / per_user.len() as f64;
    let sol = solve_ef_s(&cfg.recall, cfg.epsilon, mean_selectivity, cfg.k, cfg.ef_cap)?;
    let ef = sol.ef;

    let mut wsum = 0.0;
    let mut user_total = 0.0;
    for (u, roles) in &per_user {
        let w = weights[u.index()];
        let mut c = 0.0;
        for &(j, n) in &memo[roles].1 {
            let size = plan.partition(j).len();
            c += cfg.model.partition_cost(size, ef, n as f64 / size as f64, cfg.k)?;
        }
        user_total += w * c;
        wsum += w;
    }
    let user_cost = if wsum > 0.0 { user_total / wsum } else { 0.0 };

    let mut role_total = 0.0;
    let mut nroles = 0usize;
    for r in policy.roles() {
        let docs = policy.auth_role(r)?;
        for (j, n) in router.cover(docs)? {
            let size = plan.partition(j).len();
            role_total += cfg.model.partition_cost(size, ef, n as f64 / size as f64, cfg.k)?;
        }
        nroles += 1;
    }
    let role_cost = if nroles > 0 { role_total / nroles as f64 } else { 0.0 };

    Ok(PlanEval {
        mean_selectivity,
        ef_s: ef,
        ef_capped: sol.capped,
        modeled_recall: recall_estimate(&cfg.recall, ef as f64, mean_selectivity, cfg.k),
        user_cost,
        role_cost,
        total_docs: plan.total_docs(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::partition::build_routing;
    use crate::perf::LatencyParams;
    use crate::workload::{gen_tree, TreeParams};

    fn unit_model() -> CostModel<f64> {
        CostModel::HnswPostFilter(LatencyParams { a: 1.0, b: 0.0 })
    }

    #[test]
    fn single_partition_user_cost_is_partition_cost() {
        let p = gen_tree(&TreeParams::alpha(100, 30, 3000), 1).unwrap();
        let plan = PartitionPlan::single(&p);
        let t = build_routing(&p, &plan).unwrap();
        let m = unit_model();
        for u in p.users().take(10) {
            let sel = p.auth_user(u).unwrap().len() as f64 / 3000.0;
            let expect = m.partition_cost(3000, 40, sel, 10).unwrap();
            assert!((user_cost(&p, &plan, &t, &m, u, 40, 10).unwrap() - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn two_equal_partitions_double_cost() {
        let docs = |a: u32, b: u32| (a..b).map(DocId).collect::<Vec<_>>();
        let p = RbacPolicy::new(200, vec![vec![RoleId(0), RoleId(1)]], vec![docs(0, 100), docs(100, 200)]).unwrap();
        let plan = PartitionPlan::per_role(&p);
        let t = build_routing(&p, &plan).unwrap();
        let m = unit_model();
        let one = m.partition_cost(100, 20, 1.0, 10).unwrap();
        let c = user_cost(&p, &plan, &t, &m, UserId(0), 20, 10).unwrap();
        assert!((c - 2.0 * one).abs() < 1e-12);
        assert!((role_cost(&p, &plan, &t, &m, RoleId(1), 20, 10).unwrap() - one).abs() < 1e-12);
    }

    #[test]
    fn tree_role_plan_matches_manual_sum() {
        let p = gen_tree(&TreeParams::alpha(200, 40, 4000), 5).unwrap();
        let plan = PartitionPlan::per_role(&p);
        let t = build_routing(&p, &plan).unwrap();
        let m = unit_model();
        let cfg = SplitConfig { model: m, ..SplitConfig::with_defaults(5.0, 0.9) };
        let e = evaluate_plan(&p, &plan, &cfg).unwrap();
        let mut manual = 0.0;
        for u in p.users() {
            let role = p.user_roles(u).unwrap()[0];
            assert_eq!(t.user(u).unwrap(), &[plan.owner_of(role).unwrap()]);
            let size = p.auth_role(role).unwrap().len() as f64;
            manual += size.ln() * e.ef_s as f64;
        }
        manual /= p.live_user_count() as f64;
        assert!((e.user_cost - manual).abs() < 1e-9 * manual);
        assert!((e.mean_selectivity - 1.0).abs() < 1e-12);
    }

    #[test]
    fn role_average_weights_each_role_equally() {
        let docs = |a: u32, b: u32| (a..b).map(DocId).collect::<Vec<_>>();
        let p = RbacPolicy::new(
            20,
            vec![vec![RoleId(0)], vec![RoleId(0)], vec![RoleId(0)], vec![RoleId(1)]],
            vec![docs(0, 10), docs(10, 20)],
        )
        .unwrap();
        let w = user_weights(&p, &Objective::RoleAverage).unwrap();
        assert_eq!(w, vec![1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0, 1.0]);
        assert!(user_weights(&p, &Objective::Workload(vec![1.0, -1.0])).is_err());
    }
}
