//! Exact optimum over role groupings for tiny policies.

use super::eval::{evaluate_plan, PlanEval};
use super::{PartitionPlan, SplitConfig};
use crate::error::{Error, Result};
use crate::ids::RoleId;
use crate::rbac::RbacPolicy;

#[derive(Clone, Debug)]
pub struct OracleOutcome {
    /// Cheapest feasible plan by mean user cost, if any grouping is feasible.
    pub best: Option<(PartitionPlan, PlanEval)>,
    /// Number of groupings evaluated.
    pub evaluated: usize,
}

/// Enumerates every set partition of the live roles (restricted growth strings), builds each plan and
/// keeps the feasible one with the lowest mean user cost. Ties keep the first grouping found.
pub fn exhaustive_optimum(policy: &RbacPolicy, cfg: &SplitConfig, max_roles: usize) -> Result<OracleOutcome> {
    cfg.validate()?;
    let roles: Vec<RoleId> = policy.roles().collect();
    if roles.len() > max_roles {
        return Err(Error::domain(format!("{} roles exceed the enumeration limit {max_roles}", roles.len())));
    }
    if roles.is_empty() {
        return Err(Error::domain("policy has no roles"));
    }
    let n = roles.len();
    let mut rgs = vec![0usize; n];
    let mut best: Option<(PartitionPlan, PlanEval)> = None;
    let mut evaluated = 0;
    loop {
        let blocks = rgs.iter().max().map_or(0, |m| m + 1);
        let mut groups = vec![Vec::new(); blocks];
        for (i, &b) in rgs.iter().enumerate() {
            groups[b].push(roles[i]);
        }
        let plan = PartitionPlan::from_groups(policy, groups)?;
        let eval = evaluate_plan(policy, &plan, cfg)?;
        evaluated += 1;
        if eval.feasible(cfg, policy.num_docs()) && best.as_ref().is_none_or(|(_, b)| eval.user_cost < b.user_cost) {
            best = Some((plan, eval));
        }
        if !next_rgs(&mut rgs) {
            break;
        }
    }
    Ok(OracleOutcome { best, evaluated })
}

fn next_rgs(a: &mut [usize]) -> bool {
    for i in (1..a.len()).rev() {
        let prefix_max = a[..i].iter().copied().max().unwrap_or(0);
        if a[i] <= prefix_max {
            a[i] += 1;
            a[i + 1..].iter_mut().for_each(|x| *x = 0);
            return true;
        }
    }
    false
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ids::DocId;
    use crate::perf::{CostModel, LatencyParams, RecallParams};

    fn docs(a: u32, b: u32) -> Vec<DocId> {
        (a..b).map(DocId).collect()
    }

    #[test]
    fn bell_numbers() {
        for (n, bell) in [(1, 1), (2, 2), (3, 5), (4, 15), (5, 52), (6, 203)] {
            let mut a = vec![0usize; n];
            let mut count = 1;
            while next_rgs(&mut a) {
                count += 1;
            }
            assert_eq!(count, bell);
        }
    }

    #[test]
    fn one_role_single_plan() {
        let p = RbacPolicy::new(10, vec![vec![RoleId(0)]], vec![docs(0, 10)]).unwrap();
        let out = exhaustive_optimum(&p, &SplitConfig::with_defaults(1.0, 0.9), 6).unwrap();
        assert_eq!(out.evaluated, 1);
        assert_eq!(out.best.unwrap().0.len(), 1);
    }

    #[test]
    fn two_disjoint_roles_hand_evaluated() {
        let p = RbacPolicy::new(200, vec![vec![RoleId(0)], vec![RoleId(1)]], vec![docs(0, 100), docs(100, 200)]).unwrap();
        let c = SplitConfig::new(1.0, 0.9, CostModel::HnswPostFilter(LatencyParams { a: 1.0, b: 0.0 }), RecallParams { beta: 0.5, gamma: 0.5 });
        let single = evaluate_plan(&p, &PartitionPlan::single(&p), &c).unwrap();
        let split_plan = PartitionPlan::from_groups(&p, vec![vec![RoleId(0)], vec![RoleId(1)]]).unwrap();
        let split = evaluate_plan(&p, &split_plan, &c).unwrap();
        // selectivity 0.5 vs 1; both fit in α = 1
        let ef_single = crate::perf::solve_ef_s(&c.recall, 0.9, 0.5, 10, 1000).unwrap().ef as f64;
        assert!((single.user_cost - 200f64.ln() * ef_single).abs() < 1e-9);
        assert!((split.user_cost - 100f64.ln() * 10.0_f64.max(crate::perf::solve_ef_s(&c.recall, 0.9, 1.0, 10, 1000).unwrap().ef as f64)).abs() < 1e-9);
        let out = exhaustive_optimum(&p, &c, 6).unwrap();
        assert_eq!(out.evaluated, 2);
        let (plan, _) = out.best.unwrap();
        assert_eq!(plan, if split.user_cost < single.user_cost { split_plan } else { PartitionPlan::single(&p) });
    }

    #[test]
    fn too_many_roles_rejected() {
        let p = RbacPolicy::new(10, vec![], (0..7).map(|i| vec![DocId(i)]).collect()).unwrap();
        assert!(exhaustive_optimum(&p, &SplitConfig::with_defaults(2.0, 0.9), 6).is_err());
    }
}
