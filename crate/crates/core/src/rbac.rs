//! Users, roles and documents with the user→role and role→document maps.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::ids::{DocId, PartitionId, RoleId, UserId};
use crate::partition::{PartitionPlan, RoutingTable};
use crate::sets;

/// Flat RBAC policy. Deleted users and roles leave a vacant slot so ids stay stable.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RbacPolicy {
    num_docs: usize,
    user_roles: Vec<Option<Vec<RoleId>>>,
    role_docs: Vec<Option<Vec<DocId>>>,
}

/// Documents a user may read.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AuthSet {
    pub user: UserId,
    pub docs: Vec<DocId>,
}

impl AuthSet {
    pub fn contains(&self, d: DocId) -> bool {
        sets::contains(&self.docs, &d)
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }
}

impl RbacPolicy {
    pub fn new(num_docs: usize, user_roles: Vec<Vec<RoleId>>, role_docs: Vec<Vec<DocId>>) -> Result<Self> {
        Self::from_slots(
            num_docs,
            user_roles.into_iter().map(Some).collect(),
            role_docs.into_iter().map(Some).collect(),
        )
    }

    pub(crate) fn from_slots(
        num_docs: usize,
        mut user_roles: Vec<Option<Vec<RoleId>>>,
        mut role_docs: Vec<Option<Vec<DocId>>>,
    ) -> Result<Self> {
        for (r, docs) in role_docs.iter_mut().enumerate() {
            let Some(docs) = docs else { continue };
            sets::normalize(docs);
            if docs.is_empty() {
                return Err(Error::InvalidPolicy(format!("role {r} has no documents")));
            }
            if let Some(d) = docs.last().filter(|d| d.index() >= num_docs) {
                return Err(Error::InvalidPolicy(format!("role {r} references document {d} >= {num_docs}")));
            }
        }
        for (u, roles) in user_roles.iter_mut().enumerate() {
            let Some(roles) = roles else { continue };
            sets::normalize(roles);
            for r in roles.iter() {
                if !matches!(role_docs.get(r.index()), Some(Some(_))) {
                    return Err(Error::InvalidPolicy(format!("user {u} holds unknown role {r}")));
                }
            }
        }
        Ok(RbacPolicy { num_docs, user_roles, role_docs })
    }

    pub fn num_docs(&self) -> usize {
        self.num_docs
    }

    /// Size of the user id space, including vacant slots.
    pub fn num_users(&self) -> usize {
        self.user_roles.len()
    }

    /// Size of the role id space, including vacant slots.
    pub fn num_roles(&self) -> usize {
        self.role_docs.len()
    }

    pub fn users(&self) -> impl Iterator<Item = UserId> + '_ {
        self.user_roles
            .iter()
            .enumerate()
            .filter(|(_, r)| r.is_some())
            .map(|(u, _)| UserId::from_index(u))
    }

    pub fn roles(&self) -> impl Iterator<Item = RoleId> + '_ {
        self.role_docs
            .iter()
            .enumerate()
            .filter(|(_, d)| d.is_some())
            .map(|(r, _)| RoleId::from_index(r))
    }

    pub fn live_user_count(&self) -> usize {
        self.user_roles.iter().filter(|r| r.is_some()).count()
    }

    pub fn live_role_count(&self) -> usize {
        self.role_docs.iter().filter(|d| d.is_some()).count()
    }

    pub fn has_user(&self, u: UserId) -> bool {
        matches!(self.user_roles.get(u.index()), Some(Some(_)))
    }

    pub fn has_role(&self, r: RoleId) -> bool {
        matches!(self.role_docs.get(r.index()), Some(Some(_)))
    }

    pub fn user_roles(&self, u: UserId) -> Result<&[RoleId]> {
        match self.user_roles.get(u.index()) {
            Some(Some(r)) => Ok(r),
            _ => Err(Error::UnknownUser(u)),
        }
    }

    pub fn auth_role(&self, r: RoleId) -> Result<&[DocId]> {
        match self.role_docs.get(r.index()) {
            Some(Some(d)) => Ok(d),
            _ => Err(Error::UnknownRole(r)),
        }
    }

    pub fn auth_user(&self, u: UserId) -> Result<AuthSet> {
        let roles = self.user_roles(u)?;
        let docs = match roles {
            [] => Vec::new(),
            [r] => self.auth_role(*r)?.to_vec(),
            _ => {
                let mut parts = Vec::with_capacity(roles.len());
                for r in roles {
                    parts.push(self.auth_role(*r)?);
                }
                sets::union_many(parts)
            }
        };
        Ok(AuthSet { user: u, docs })
    }

    pub fn users_of_role(&self, r: RoleId) -> Vec<UserId> {
        self.users()
            .filter(|u| self.user_roles(*u).map(|rs| sets::contains(rs, &r)).unwrap_or(false))
            .collect()
    }

    /// Documents granted by at least one role.
    pub fn assigned_docs(&self) -> Vec<DocId> {
        sets::union_many(self.role_docs.iter().flatten().map(|d| d.as_slice()))
    }

    /// For each document, how many roles grant it.
    pub fn doc_role_counts(&self) -> Vec<u32> {
        let mut counts = vec![0u32; self.num_docs];
        for docs in self.role_docs.iter().flatten() {
            for d in docs {
                counts[d.index()] += 1;
            }
        }
        counts
    }

    pub(crate) fn set_user(&mut self, u: UserId, mut roles: Vec<RoleId>) -> Result<()> {
        sets::normalize(&mut roles);
        if let Some(r) = roles.iter().find(|r| !self.has_role(**r)) {
            return Err(Error::UnknownRole(*r));
        }
        if u.index() >= self.user_roles.len() {
            self.user_roles.resize(u.index() + 1, None);
        }
        self.user_roles[u.index()] = Some(roles);
        Ok(())
    }

    pub(crate) fn remove_user(&mut self, u: UserId) -> Result<Vec<RoleId>> {
        match self.user_roles.get_mut(u.index()).and_then(Option::take) {
            Some(r) => Ok(r),
            None => Err(Error::UnknownUser(u)),
        }
    }

    pub(crate) fn insert_role(&mut self, r: RoleId, mut docs: Vec<DocId>) -> Result<()> {
        sets::normalize(&mut docs);
        if docs.is_empty() {
            return Err(Error::InvalidPolicy(format!("role {r} has no documents")));
        }
        if let Some(d) = docs.iter().find(|d| d.index() >= self.num_docs) {
            return Err(Error::UnknownDoc(*d));
        }
        if self.has_role(r) {
            return Err(Error::domain(format!("role {r} already exists")));
        }
        if r.index() >= self.role_docs.len() {
            self.role_docs.resize(r.index() + 1, None);
        }
        self.role_docs[r.index()] = Some(docs);
        Ok(())
    }

    /// Removes the role and strips it from every user.
    pub(crate) fn remove_role(&mut self, r: RoleId) -> Result<Vec<DocId>> {
        let docs = match self.role_docs.get_mut(r.index()).and_then(Option::take) {
            Some(d) => d,
            None => return Err(Error::UnknownRole(r)),
        };
        for roles in self.user_roles.iter_mut().flatten() {
            sets::remove(roles, &r);
        }
        Ok(docs)
    }

    pub(crate) fn grant_doc(&mut self, r: RoleId, d: DocId) -> Result<bool> {
        if d.index() >= self.num_docs {
            return Err(Error::UnknownDoc(d));
        }
        match self.role_docs.get_mut(r.index()) {
            Some(Some(docs)) => Ok(sets::insert(docs, d)),
            _ => Err(Error::UnknownRole(r)),
        }
    }

    pub(crate) fn revoke_doc(&mut self, r: RoleId, d: DocId) -> Result<bool> {
        match self.role_docs.get_mut(r.index()) {
            Some(Some(docs)) => {
                if docs.len() == 1 && docs[0] == d {
                    return Err(Error::domain(format!("revoking {d} would leave role {r} empty")));
                }
                Ok(sets::remove(docs, &d))
            }
            _ => Err(Error::UnknownRole(r)),
        }
    }

    pub(crate) fn grow_docs(&mut self, num_docs: usize) {
        self.num_docs = self.num_docs.max(num_docs);
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "users={} roles={} docs={}", self.num_users(), self.num_roles(), self.num_docs);
        for (u, roles) in self.user_roles.iter().enumerate() {
            if let Some(roles) = roles {
                let _ = write!(out, "ur {u}");
                for r in roles {
                    let _ = write!(out, " {r}");
                }
                out.push('\n');
            }
        }
        for (r, docs) in self.role_docs.iter().enumerate() {
            if let Some(docs) = docs {
                let _ = write!(out, "rd {r}");
                for d in docs {
                    let _ = write!(out, " {d}");
                }
                out.push('\n');
            }
        }
        out
    }

    /// Parses the line format written by [`RbacPolicy::to_text`]. Ids without a line are vacant.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (hl, header) = lines.next().ok_or_else(|| Error::parse(1, "missing header"))?;
        let mut counts = [None; 3];
        for tok in header.split_whitespace() {
            let (key, val) = tok.split_once('=').ok_or_else(|| Error::parse(hl + 1, format!("bad token {tok}")))?;
            let slot = match key {
                "users" => 0,
                "roles" => 1,
                "docs" => 2,
                _ => return Err(Error::parse(hl + 1, format!("unknown key {key}"))),
            };
            counts[slot] = Some(parse_num(val, hl + 1)?);
        }
        let [Some(nu), Some(nr), Some(nd)] = counts else {
            return Err(Error::parse(hl + 1, "header needs users=, roles= and docs="));
        };
        let mut user_roles: Vec<Option<Vec<RoleId>>> = vec![None; nu];
        let mut role_docs: Vec<Option<Vec<DocId>>> = vec![None; nr];
        for (ln, line) in lines {
            let mut toks = line.split_whitespace();
            let kind = toks.next().unwrap_or_default();
            let id = parse_num(toks.next().ok_or_else(|| Error::parse(ln + 1, "missing id"))?, ln + 1)?;
            let rest = toks.map(|t| parse_num(t, ln + 1).map(|v| v as u32)).collect::<Result<Vec<_>>>()?;
            match kind {
                "ur" if id < nu => user_roles[id] = Some(rest.into_iter().map(RoleId).collect()),
                "rd" if id < nr => role_docs[id] = Some(rest.into_iter().map(DocId).collect()),
                "ur" | "rd" => return Err(Error::parse(ln + 1, format!("id {id} out of range"))),
                other => return Err(Error::parse(ln + 1, format!("unknown record {other}"))),
            }
        }
        Self::from_slots(nd, user_roles, role_docs)
    }
}

fn parse_num(s: &str, line: usize) -> Result<usize> {
    s.parse().map_err(|_| Error::parse(line, format!("expected integer, got {s}")))
}

/// Mean over the routed partitions of the fraction of each partition the user may read.
pub fn user_selectivity(policy: &RbacPolicy, u: UserId, plan: &PartitionPlan, routing: &RoutingTable) -> Result<f64> {
    let auth = policy.auth_user(u)?;
    selectivity_of(&auth.docs, plan, routing.user(u)?)
        .ok_or_else(|| Error::domain(format!("user {u} has an empty routing set")))
}

pub(crate) fn selectivity_of(docs: &[DocId], plan: &PartitionPlan, route: &[PartitionId]) -> Option<f64> {
    if route.is_empty() {
        return None;
    }
    let sum: f64 = route
        .iter()
        .map(|&j| {
            let part = plan.partition(j);
            sets::intersection_len(docs, part) as f64 / part.len() as f64
        })
        .sum();
    Some(sum / route.len() as f64)
}

/// Arithmetic mean of [`user_selectivity`] over all live users.
pub fn mean_selectivity(policy: &RbacPolicy, plan: &PartitionPlan, routing: &RoutingTable) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    for u in policy.users() {
        total += user_selectivity(policy, u, plan, routing)?;
        n += 1;
    }
    if n == 0 {
        return Err(Error::domain("policy has no users"));
    }
    Ok(total / n as f64)
}
