//! Greedy role splitting under a memory budget.
//!
//! Documents with the same set of granting roles are collapsed into weighted atoms and users with
//! the same role set into weighted groups, so a candidate move only touches the atoms of one role
//! and a full plan evaluation never walks individual documents.

use std::collections::HashMap;

use smallvec::SmallVec;

use super::eval::{user_weights, PlanEval};
use super::{PartitionPlan, SplitConfig};
use crate::error::{Error, Result};
use crate::ids::{PartitionId, RoleId};
use crate::perf::{recall_estimate, solve_ef_s};
use crate::rbac::RbacPolicy;

const DIV_GUARD: f64 = 1e-9;
const NONE: u32 = u32::MAX;

type Parts = SmallVec<[u32; 4]>;

struct Atoms {
    weight: Vec<u64>,
    roles: Vec<SmallVec<[u32; 4]>>,
    by_role: Vec<Vec<u32>>,
    orphan: Option<u32>,
}

impl Atoms {
    fn build(policy: &RbacPolicy) -> Result<Self> {
        let mut doc_roles: Vec<SmallVec<[u32; 4]>> = vec![SmallVec::new(); policy.num_docs()];
        for r in policy.roles() {
            for d in policy.auth_role(r)? {
                doc_roles[d.index()].push(r.0);
            }
        }
        let mut ids: HashMap<SmallVec<[u32; 4]>, u32> = HashMap::new();
        let mut atoms = Atoms { weight: Vec::new(), roles: Vec::new(), by_role: vec![Vec::new(); policy.num_roles()], orphan: None };
        for sig in doc_roles {
            let next = atoms.weight.len() as u32;
            let id = *ids.entry(sig.clone()).or_insert_with(|| {
                for &r in &sig {
                    atoms.by_role[r as usize].push(next);
                }
                if sig.is_empty() {
                    atoms.orphan = Some(next);
                }
                atoms.roles.push(sig);
                atoms.weight.push(0);
                next
            });
            atoms.weight[id as usize] += 1;
        }
        Ok(atoms)
    }

    fn len(&self) -> usize {
        self.weight.len()
    }
}

struct Groups {
    atoms: Vec<Vec<u32>>,
    docs: Vec<u64>,
    users: Vec<f64>,
    weight: Vec<f64>,
    of_atom_start: Vec<usize>,
    of_atom: Vec<u32>,
}

impl Groups {
    fn build(policy: &RbacPolicy, atoms: &Atoms, cfg: &SplitConfig) -> Result<Self> {
        let w = user_weights(policy, &cfg.objective)?;
        let mut index: HashMap<&[RoleId], usize> = HashMap::new();
        let mut g = Groups { atoms: Vec::new(), docs: Vec::new(), users: Vec::new(), weight: Vec::new(), of_atom_start: Vec::new(), of_atom: Vec::new() };
        for u in policy.users() {
            let roles = policy.user_roles(u)?;
            if roles.is_empty() {
                continue;
            }
            let gi = *index.entry(roles).or_insert_with(|| {
                let mut list: Vec<u32> = roles.iter().flat_map(|r| atoms.by_role[r.index()].iter().copied()).collect();
                list.sort_unstable();
                list.dedup();
                g.docs.push(list.iter().map(|&a| atoms.weight[a as usize]).sum());
                g.atoms.push(list);
                g.users.push(0.0);
                g.weight.push(0.0);
                g.atoms.len() - 1
            });
            g.users[gi] += 1.0;
            g.weight[gi] += w[u.index()];
        }
        if g.atoms.is_empty() {
            return Err(Error::domain("policy has no user holding a role"));
        }
        let mut count = vec![0usize; atoms.len() + 1];
        for list in &g.atoms {
            for &a in list {
                count[a as usize + 1] += 1;
            }
        }
        for i in 1..count.len() {
            count[i] += count[i - 1];
        }
        let mut fill = count.clone();
        g.of_atom = vec![0; count[atoms.len()]];
        for (gi, list) in g.atoms.iter().enumerate() {
            for &a in list {
                g.of_atom[fill[a as usize]] = gi as u32;
                fill[a as usize] += 1;
            }
        }
        g.of_atom_start = count;
        Ok(g)
    }

    fn of(&self, a: u32) -> &[u32] {
        &self.of_atom[self.of_atom_start[a as usize]..self.of_atom_start[a as usize + 1]]
    }
}

#[derive(Default)]
struct CoverScratch {
    inter: Vec<u64>,
    unc: Vec<u64>,
    touched: Vec<u32>,
    covered: Vec<bool>,
    route: Vec<(u32, u64)>,
}

/// Greedy cover over `(partition set, weight)` entries, leaving `(partition, intersection)` pairs
/// sorted by partition in `s.route`. Same rule as the document-level router.
fn cover(entries: &[(u32, u64)], psets: &[Parts], size: &[u64], docs: u64, s: &mut CoverScratch) {
    s.route.clear();
    for &(pid, w) in entries {
        for &p in &psets[pid as usize] {
            if s.inter[p as usize] == 0 {
                s.touched.push(p);
            }
            s.inter[p as usize] += w;
        }
    }
    for &p in &s.touched {
        s.unc[p as usize] = s.inter[p as usize];
    }
    s.covered.clear();
    s.covered.resize(entries.len(), false);
    let mut remaining = docs;
    while remaining > 0 {
        let mut best = NONE;
        for &p in &s.touched {
            let u = s.unc[p as usize];
            if u == 0 {
                continue;
            }
            if best == NONE {
                best = p;
                continue;
            }
            let b = best as usize;
            let better = u > s.unc[b] || (u == s.unc[b] && (size[p as usize] < size[b] || (size[p as usize] == size[b] && p < best)));
            if better {
                best = p;
            }
        }
        if best == NONE {
            break;
        }
        s.route.push((best, s.inter[best as usize]));
        remaining -= s.unc[best as usize];
        if remaining == 0 {
            break;
        }
        for (i, &(pid, w)) in entries.iter().enumerate() {
            let set = &psets[pid as usize];
            if s.covered[i] || !set.contains(&best) {
                continue;
            }
            s.covered[i] = true;
            for &q in set {
                s.unc[q as usize] -= w;
            }
        }
    }
    for &p in &s.touched {
        s.inter[p as usize] = 0;
        s.unc[p as usize] = 0;
    }
    s.touched.clear();
    s.route.sort_unstable();
}

fn agg_add(entries: &mut Vec<(u32, u64)>, pid: u32, w: u64) {
    match entries.binary_search_by_key(&pid, |e| e.0) {
        Ok(i) => entries[i].1 += w,
        Err(i) => entries.insert(i, (pid, w)),
    }
}

fn agg_sub(entries: &mut Vec<(u32, u64)>, pid: u32, w: u64) {
    if let Ok(i) = entries.binary_search_by_key(&pid, |e| e.0) {
        entries[i].1 -= w;
        if entries[i].1 == 0 {
            entries.remove(i);
        }
    }
}

struct SplitState<'a> {
    cfg: &'a SplitConfig,
    atoms: &'a Atoms,
    groups: &'a Groups,
    roles: Vec<u32>,
    role_docs: Vec<u64>,
    owner: Vec<u32>,
    members: Vec<Vec<u32>>,
    /// Interned partition set of every atom.
    apid: Vec<u32>,
    psets: Vec<Parts>,
    pset_ids: HashMap<Parts, u32>,
    /// Per group, document weight by partition set.
    agg: Vec<Vec<(u32, u64)>>,
    size: Vec<u64>,
    total: u64,
    scratch: CoverScratch,
    gsum: Vec<u64>,
    gtouched: Vec<u32>,
    evaluations: usize,
}

impl<'a> SplitState<'a> {
    fn from_plan(policy: &RbacPolicy, plan: &PartitionPlan, cfg: &'a SplitConfig, atoms: &'a Atoms, groups: &'a Groups) -> Result<Self> {
        if !plan.is_role_atomic(policy) {
            return Err(Error::InvalidPlan("splitting needs every role in exactly one partition".into()));
        }
        let roles: Vec<u32> = policy.roles().map(|r| r.0).collect();
        let mut owner = vec![NONE; policy.num_roles()];
        let mut members = vec![Vec::new(); plan.len()];
        for (j, rs) in plan.role_groups().iter().enumerate() {
            for r in rs {
                owner[r.index()] = j as u32;
                members[j].push(r.0);
            }
        }
        let role_docs = (0..policy.num_roles()).map(|r| atoms.by_role[r].iter().map(|&a| atoms.weight[a as usize]).sum()).collect();
        let mut st = SplitState {
            cfg,
            atoms,
            groups,
            roles,
            role_docs,
            owner,
            members,
            apid: vec![0; atoms.len()],
            psets: Vec::new(),
            pset_ids: HashMap::new(),
            agg: vec![Vec::new(); groups.atoms.len()],
            size: vec![0; plan.len()],
            total: 0,
            scratch: CoverScratch { inter: vec![0; plan.len()], unc: vec![0; plan.len()], ..CoverScratch::default() },
            gsum: vec![0; groups.atoms.len()],
            gtouched: Vec::new(),
            evaluations: 0,
        };
        let keep_orphans = !plan.unassigned().is_empty();
        for a in 0..atoms.len() {
            let p = st.parts_for(a as u32, keep_orphans);
            for &j in &p {
                st.size[j as usize] += atoms.weight[a];
                st.total += atoms.weight[a];
            }
            st.apid[a] = st.intern(p);
        }
        for g in 0..groups.atoms.len() {
            for &a in &groups.atoms[g] {
                agg_add(&mut st.agg[g], st.apid[a as usize], atoms.weight[a as usize]);
            }
        }
        Ok(st)
    }

    fn intern(&mut self, p: Parts) -> u32 {
        if let Some(&id) = self.pset_ids.get(&p) {
            return id;
        }
        let id = self.psets.len() as u32;
        self.psets.push(p.clone());
        self.pset_ids.insert(p, id);
        id
    }

    fn parts(&self, a: u32) -> &Parts {
        &self.psets[self.apid[a as usize] as usize]
    }

    fn parts_for(&self, a: u32, keep_orphans: bool) -> Parts {
        if Some(a) == self.atoms.orphan {
            return if keep_orphans { Parts::from_slice(&[0]) } else { Parts::new() };
        }
        let mut p: Parts = self.atoms.roles[a as usize].iter().map(|&r| self.owner[r as usize]).collect();
        p.sort_unstable();
        p.dedup();
        p
    }

    fn open_partition(&mut self) -> u32 {
        self.members.push(Vec::new());
        self.size.push(0);
        self.scratch.inter.push(0);
        self.scratch.unc.push(0);
        (self.members.len() - 1) as u32
    }

    fn close_last_partition(&mut self) {
        debug_assert!(self.members.last().is_some_and(Vec::is_empty));
        self.members.pop();
        self.size.pop();
        self.scratch.inter.pop();
        self.scratch.unc.pop();
    }

    fn move_role(&mut self, r: u32, to: u32) {
        let from = self.owner[r as usize];
        self.owner[r as usize] = to;
        let src = &mut self.members[from as usize];
        if let Ok(i) = src.binary_search(&r) {
            src.remove(i);
        }
        let dst = &mut self.members[to as usize];
        if let Err(i) = dst.binary_search(&r) {
            dst.insert(i, r);
        }
        let atoms = self.atoms;
        let mut moves: Vec<(u32, u32, u32)> = Vec::new();
        for &a in &atoms.by_role[r as usize] {
            let new = self.parts_for(a, false);
            let old_id = self.apid[a as usize];
            let old = &self.psets[old_id as usize];
            if *old == new {
                continue;
            }
            let w = atoms.weight[a as usize];
            for &p in old {
                if !new.contains(&p) {
                    self.size[p as usize] -= w;
                    self.total -= w;
                }
            }
            for &p in &new {
                if !old.contains(&p) {
                    self.size[p as usize] += w;
                    self.total += w;
                }
            }
            let new_id = self.intern(new);
            self.apid[a as usize] = new_id;
            moves.push((old_id, new_id, a));
        }
        moves.sort_unstable();
        let groups = self.groups;
        for chunk in moves.chunk_by(|x, y| (x.0, x.1) == (y.0, y.1)) {
            let (old_id, new_id) = (chunk[0].0, chunk[0].1);
            for &(_, _, a) in chunk {
                let w = atoms.weight[a as usize];
                for &g in groups.of(a) {
                    if self.gsum[g as usize] == 0 {
                        self.gtouched.push(g);
                    }
                    self.gsum[g as usize] += w;
                }
            }
            for &g in &self.gtouched {
                let w = std::mem::take(&mut self.gsum[g as usize]);
                let e = &mut self.agg[g as usize];
                agg_sub(e, old_id, w);
                agg_add(e, new_id, w);
            }
            self.gtouched.clear();
        }
    }

    fn evaluate(&mut self) -> Result<PlanEval> {
        self.evaluations += 1;
        let groups = self.groups;
        let mut flat: Vec<(u32, u64)> = Vec::new();
        let mut offsets = Vec::with_capacity(groups.atoms.len() + 1);
        offsets.push(0);
        let mut sel_sum = 0.0;
        let mut users = 0.0;
        for g in 0..groups.atoms.len() {
            cover(&self.agg[g], &self.psets, &self.size, groups.docs[g], &mut self.scratch);
            let route = &self.scratch.route;
            let s = route.iter().map(|&(p, n)| n as f64 / self.size[p as usize] as f64).sum::<f64>() / route.len() as f64;
            sel_sum += s * groups.users[g];
            users += groups.users[g];
            flat.extend_from_slice(route);
            offsets.push(flat.len());
        }
        let mean_selectivity = sel_sum / users;
        let cfg = self.cfg;
        let sol = solve_ef_s(&cfg.recall, cfg.epsilon, mean_selectivity, cfg.k, cfg.ef_cap)?;
        let ef = sol.ef;
        let cost = |size: u64, n: u64| cfg.model.cost_unchecked(size as usize, ef, n as f64 / size as f64, cfg.k);

        let mut user_total = 0.0;
        let mut wsum = 0.0;
        for g in 0..groups.atoms.len() {
            let c: f64 = flat[offsets[g]..offsets[g + 1]].iter().map(|&(p, n)| cost(self.size[p as usize], n)).sum();
            user_total += groups.weight[g] * c;
            wsum += groups.weight[g];
        }

        let mut role_total = 0.0;
        for &r in &self.roles {
            let list = &self.atoms.by_role[r as usize];
            let own = self.owner[r as usize];
            let mut best = own;
            if let Some(&a0) = list.first() {
                for &c in self.parts(a0) {
                    if c == own {
                        continue;
                    }
                    let (sc, sb) = (self.size[c as usize], self.size[best as usize]);
                    if sc > sb || (sc == sb && c > best) {
                        continue;
                    }
                    if list.iter().all(|&a| self.parts(a).contains(&c)) {
                        best = c;
                    }
                }
            }
            role_total += cost(self.size[best as usize], self.role_docs[r as usize]);
        }
        let role_cost = if self.roles.is_empty() { 0.0 } else { role_total / self.roles.len() as f64 };

        Ok(PlanEval {
            mean_selectivity,
            ef_s: ef,
            ef_capped: sol.capped,
            modeled_recall: recall_estimate(&cfg.recall, ef as f64, mean_selectivity, cfg.k),
            user_cost: if wsum > 0.0 { user_total / wsum } else { 0.0 },
            role_cost,
            total_docs: self.total as usize,
        })
    }

    /// Best admissible role to move from `src` to `dst`, with the plan evaluation after the move.
    fn best_move(&mut self, src: u32, dst: u32, base: &PlanEval, budget: u64) -> Result<Option<(u32, PlanEval)>> {
        if self.members[src as usize].len() < 2 {
            return Ok(None);
        }
        let before = self.total as f64;
        let mut best: Option<(bool, f64, u32, PlanEval)> = None;
        for r in self.members[src as usize].clone() {
            self.move_role(r, dst);
            let admissible = self.total <= budget;
            let after = if admissible { Some(self.evaluate()) } else { None };
            let delta_s = self.total as f64 - before;
            self.move_role(r, src);
            let Some(after) = after else { continue };
            let after = after?;
            let dq_r = after.role_cost - base.role_cost;
            let dq_u = after.user_cost - base.user_cost;
            if !(dq_r < 0.0 && dq_u < self.cfg.eta) {
                continue;
            }
            let gain = -(dq_r + dq_u);
            let shrinks = delta_s < 0.0;
            let score = if shrinks { gain } else { gain / (delta_s + DIV_GUARD) };
            let better = match &best {
                None => true,
                Some((bs, bscore, _, _)) => (shrinks && !bs) || (shrinks == *bs && score > *bscore),
            };
            if better {
                best = Some((shrinks, score, r, after));
            }
        }
        Ok(best.map(|(_, _, r, e)| (r, e)))
    }

    fn rank_key(&self, j: usize) -> (u64, usize) {
        (self.size[j], self.members[j].len())
    }

    fn largest(&self, splittable_only: bool, blocked: &[bool]) -> Option<u32> {
        let mut best: Option<usize> = None;
        for j in 0..self.members.len() {
            if splittable_only && (self.members[j].len() < 2 || blocked[j]) {
                continue;
            }
            if best.is_none_or(|b| self.rank_key(j) > self.rank_key(b)) {
                best = Some(j);
            }
        }
        best.map(|j| j as u32)
    }

    fn to_plan(&self, policy: &RbacPolicy) -> Result<PartitionPlan> {
        let groups = self
            .members
            .iter()
            .filter(|m| !m.is_empty())
            .map(|m| m.iter().map(|&r| RoleId(r)).collect())
            .collect();
        PartitionPlan::from_groups(policy, groups)
    }
}

/// Result of a greedy run.
#[derive(Clone, Debug)]
pub struct SplitOutcome {
    pub plan: PartitionPlan,
    pub eval: PlanEval,
    pub initial: PlanEval,
    pub moves: usize,
    pub evaluations: usize,
}

pub fn greedy_split(policy: &RbacPolicy, cfg: &SplitConfig) -> Result<PartitionPlan> {
    greedy_split_traced(policy, cfg).map(|o| o.plan)
}

/// Starts from one partition holding everything and keeps opening a partition next to the largest
/// splittable one, moving the best role into it while the move lowers both role and user cost
/// and the budget holds. Stops once no partition admits a beneficial move.
pub fn greedy_split_traced(policy: &RbacPolicy, cfg: &SplitConfig) -> Result<SplitOutcome> {
    cfg.validate()?;
    let atoms = Atoms::build(policy)?;
    let groups = Groups::build(policy, &atoms, cfg)?;
    let start = PartitionPlan::single(policy);
    let mut st = SplitState::from_plan(policy, &start, cfg, &atoms, &groups)?;
    let budget = cfg.budget(policy.num_docs());
    let initial = st.evaluate()?;
    let mut base = initial;
    let mut blocked = vec![false];
    let mut moves = 0;
    while let Some(src) = st.largest(true, &blocked) {
        let dst = st.open_partition();
        let mut moved = 0;
        while let Some((r, eval)) = st.best_move(src, dst, &base, budget)? {
            st.move_role(r, dst);
            base = eval;
            moved += 1;
            if st.members[src as usize].len() < 2 || st.largest(false, &blocked) != Some(src) {
                break;
            }
        }
        if moved == 0 {
            st.close_last_partition();
            blocked[src as usize] = true;
        } else {
            moves += moved;
            blocked.iter_mut().for_each(|b| *b = false);
            blocked.push(false);
        }
    }
    let plan = st.to_plan(policy)?;
    Ok(SplitOutcome { plan, eval: base, initial, moves, evaluations: st.evaluations })
}

/// Best role to move from partition `src` to partition `dst` of an existing role-atomic plan.
/// `dst == plan.len()` stands for a new, empty partition.
pub fn find_best_split(
    policy: &RbacPolicy,
    plan: &PartitionPlan,
    src: PartitionId,
    dst: PartitionId,
    cfg: &SplitConfig,
) -> Result<Option<RoleId>> {
    cfg.validate()?;
    if src >= plan.len() || dst > plan.len() || src == dst {
        return Err(Error::params("invalid source or destination partition"));
    }
    let atoms = Atoms::build(policy)?;
    let groups = Groups::build(policy, &atoms, cfg)?;
    let mut st = SplitState::from_plan(policy, plan, cfg, &atoms, &groups)?;
    if dst == plan.len() {
        st.open_partition();
    }
    let base = st.evaluate()?;
    let budget = cfg.budget(policy.num_docs());
    Ok(st.best_move(src as u32, dst as u32, &base, budget)?.map(|(r, _)| RoleId(r)))
}
