//! Hierarchical navigable small world graph.
//!
//! Levels are drawn from a geometric law with multiplier `1 / ln M`. Upper layers keep at most `M`
//! links per node and layer 0 keeps `2M`. Neighbor lists are pruned with the usual diversity
//! heuristic: a candidate is kept only if it is closer to the base node than to every neighbor
//! already kept. Deletions are tombstones; removed nodes still route but never appear in results.

use std::cmp::{Ordering, Reverse};
use std::collections::{BinaryHeap, HashMap};
use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{hit_order, AllowAll, Dataset, DocFilter, Distance, Hit, SearchResult};
use crate::error::{Error, Result};
use crate::ids::DocId;
use crate::scalar::Scalar;

const MAX_LEVEL: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HnswParams {
    pub m: usize,
    pub ef_construction: usize,
    pub distance: Distance,
}

impl Default for HnswParams {
    fn default() -> Self {
        HnswParams { m: 16, ef_construction: 64, distance: Distance::Euclidean }
    }
}

impl HnswParams {
    pub fn validate(&self) -> Result<()> {
        if self.m < 2 {
            return Err(Error::params("M must be >= 2"));
        }
        if self.ef_construction < self.m {
            return Err(Error::params("ef_construction must be >= M"));
        }
        Ok(())
    }

    fn max_links(&self, level: usize) -> usize {
        if level == 0 {
            2 * self.m
        } else {
            self.m
        }
    }
}

#[derive(Clone, Copy)]
struct Cand<T> {
    dist: T,
    doc: DocId,
    node: u32,
}

impl<T: Scalar> Cand<T> {
    fn hit(&self) -> Hit<T> {
        Hit { doc: self.doc, dist: self.dist }
    }
}

impl<T: Scalar> PartialEq for Cand<T> {
    fn eq(&self, o: &Self) -> bool {
        self.cmp(o) == Ordering::Equal
    }
}
impl<T: Scalar> Eq for Cand<T> {}
impl<T: Scalar> PartialOrd for Cand<T> {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}
impl<T: Scalar> Ord for Cand<T> {
    fn cmp(&self, o: &Self) -> Ordering {
        hit_order(&self.hit(), &o.hit())
    }
}

#[derive(Default)]
struct Visited {
    marks: Vec<u32>,
    epoch: u32,
}

impl Visited {
    fn reset(&mut self, n: usize) {
        self.epoch = self.epoch.wrapping_add(1);
        if self.epoch == 0 {
            self.marks.iter_mut().for_each(|m| *m = 0);
            self.epoch = 1;
        }
        if self.marks.len() < n {
            self.marks.resize(n, 0);
        }
    }

    /// Returns true the first time `i` is seen since the last reset.
    #[inline]
    fn insert(&mut self, i: u32) -> bool {
        let m = &mut self.marks[i as usize];
        if *m == self.epoch {
            false
        } else {
            *m = self.epoch;
            true
        }
    }
}

pub struct HnswIndex<T> {
    params: HnswParams,
    seed: u64,
    dim: usize,
    vectors: Vec<T>,
    doc_ids: Vec<DocId>,
    links: Vec<Vec<Vec<u32>>>,
    deleted: Vec<bool>,
    num_deleted: usize,
    node_of: HashMap<DocId, u32>,
    entry: Option<u32>,
    max_level: usize,
    level_mult: f64,
    rng: ChaCha8Rng,
    pool: Mutex<Vec<Visited>>,
}

impl<T: Scalar> Clone for HnswIndex<T> {
    fn clone(&self) -> Self {
        HnswIndex {
            params: self.params,
            seed: self.seed,
            dim: self.dim,
            vectors: self.vectors.clone(),
            doc_ids: self.doc_ids.clone(),
            links: self.links.clone(),
            deleted: self.deleted.clone(),
            num_deleted: self.num_deleted,
            node_of: self.node_of.clone(),
            entry: self.entry,
            max_level: self.max_level,
            level_mult: self.level_mult,
            rng: self.rng.clone(),
            pool: Mutex::new(Vec::new()),
        }
    }
}

impl<T: Scalar> std::fmt::Debug for HnswIndex<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HnswIndex")
            .field("nodes", &self.doc_ids.len())
            .field("deleted", &self.num_deleted)
            .field("max_level", &self.max_level)
            .field("params", &self.params)
            .finish()
    }
}

impl<T: Scalar> HnswIndex<T> {
    pub fn new(dim: usize, params: HnswParams, seed: u64) -> Result<Self> {
        params.validate()?;
        if dim == 0 {
            return Err(Error::params("dimension must be >= 1"));
        }
        Ok(HnswIndex {
            params,
            seed,
            dim,
            vectors: Vec::new(),
            doc_ids: Vec::new(),
            links: Vec::new(),
            deleted: Vec::new(),
            num_deleted: 0,
            node_of: HashMap::new(),
            entry: None,
            max_level: 0,
            level_mult: 1.0 / (params.m as f64).ln(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            pool: Mutex::new(Vec::new()),
        })
    }

    /// Builds over `vectors`, whose row `i` belongs to `doc_ids[i]`.
    pub fn build(vectors: &Dataset<T>, doc_ids: &[DocId], params: HnswParams, seed: u64) -> Result<Self> {
        if vectors.len() != doc_ids.len() {
            return Err(Error::params(format!("{} vectors for {} document ids", vectors.len(), doc_ids.len())));
        }
        if doc_ids.is_empty() {
            return Err(Error::params("cannot build an index over zero vectors"));
        }
        let mut idx = Self::new(vectors.dim(), params, seed)?;
        for (i, &d) in doc_ids.iter().enumerate() {
            idx.insert(d, vectors.row(i))?;
        }
        Ok(idx)
    }

    /// Builds over `docs`, reading document `d` from row `d` of `dataset`.
    pub fn build_subset(dataset: &Dataset<T>, docs: &[DocId], params: HnswParams, seed: u64) -> Result<Self> {
        if docs.is_empty() {
            return Err(Error::params("cannot build an index over zero vectors"));
        }
        let mut idx = Self::new(dataset.dim(), params, seed)?;
        idx.reserve(docs.len());
        for &d in docs {
            if d.index() >= dataset.len() {
                return Err(Error::UnknownDoc(d));
            }
            idx.insert(d, dataset.row(d.index()))?;
        }
        Ok(idx)
    }

    fn reserve(&mut self, n: usize) {
        self.vectors.reserve(n * self.dim);
        self.doc_ids.reserve(n);
        self.links.reserve(n);
        self.deleted.reserve(n);
        self.node_of.reserve(n);
    }

    pub fn params(&self) -> &HnswParams {
        &self.params
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Live (non-deleted) node count.
    pub fn len(&self) -> usize {
        self.doc_ids.len() - self.num_deleted
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_nodes(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn tombstone_ratio(&self) -> f64 {
        if self.doc_ids.is_empty() {
            0.0
        } else {
            self.num_deleted as f64 / self.doc_ids.len() as f64
        }
    }

    pub fn entry_point(&self) -> Option<DocId> {
        self.entry.map(|e| self.doc_ids[e as usize])
    }

    pub fn max_level(&self) -> usize {
        self.max_level
    }

    pub fn contains(&self, doc: DocId) -> bool {
        self.node_of.get(&doc).is_some_and(|&n| !self.deleted[n as usize])
    }

    /// Live documents, ascending.
    pub fn docs(&self) -> Vec<DocId> {
        let mut v: Vec<DocId> =
            self.doc_ids.iter().zip(&self.deleted).filter(|(_, del)| !**del).map(|(d, _)| *d).collect();
        v.sort_unstable();
        v
    }

    pub fn vector(&self, doc: DocId) -> Option<&[T]> {
        self.node_of.get(&doc).map(|&n| self.node_vec(n))
    }

    /// Neighbor documents of `doc` on `level`.
    pub fn neighbors(&self, doc: DocId, level: usize) -> Option<Vec<DocId>> {
        let n = *self.node_of.get(&doc)?;
        let lists = &self.links[n as usize];
        lists.get(level).map(|l| l.iter().map(|&x| self.doc_ids[x as usize]).collect())
    }

    pub fn node_level(&self, doc: DocId) -> Option<usize> {
        self.node_of.get(&doc).map(|&n| self.links[n as usize].len() - 1)
    }

    /// Checks edge endpoints, degree bounds and layer membership.
    pub fn check_invariants(&self) -> Result<()> {
        let n = self.doc_ids.len() as u32;
        for (node, lists) in self.links.iter().enumerate() {
            for (level, l) in lists.iter().enumerate() {
                if l.len() > self.params.max_links(level) {
                    return Err(Error::Internal(format!("node {node} exceeds degree on level {level}")));
                }
                for &x in l {
                    if x >= n || x as usize == node {
                        return Err(Error::Internal(format!("node {node} has bad edge to {x}")));
                    }
                    if self.links[x as usize].len() <= level {
                        return Err(Error::Internal(format!("edge {node}->{x} on level {level} above target's top")));
                    }
                }
            }
        }
        if let Some(e) = self.entry {
            if self.links[e as usize].len() != self.max_level + 1 {
                return Err(Error::Internal("entry point is not on the top level".into()));
            }
        }
        Ok(())
    }

    #[inline]
    fn node_vec(&self, node: u32) -> &[T] {
        let s = node as usize * self.dim;
        &self.vectors[s..s + self.dim]
    }

    #[inline]
    fn dist_to(&self, q: &[T], node: u32) -> T {
        self.params.distance.eval(q, self.node_vec(node))
    }

    fn cand(&self, q: &[T], node: u32) -> Cand<T> {
        Cand { dist: self.dist_to(q, node), doc: self.doc_ids[node as usize], node }
    }

    fn random_level(&mut self) -> usize {
        let u: f64 = self.rng.random();
        ((-(1.0 - u).ln() * self.level_mult).floor() as usize).min(MAX_LEVEL)
    }

    fn take_visited(&self) -> Visited {
        self.pool.lock().ok().and_then(|mut p| p.pop()).unwrap_or_default()
    }

    fn give_visited(&self, v: Visited) {
        if let Ok(mut p) = self.pool.lock() {
            p.push(v);
        }
    }

    fn greedy_descend(&self, q: &[T], mut ep: Cand<T>, level: usize, evals: &mut usize) -> Cand<T> {
        loop {
            let mut improved = false;
            for &nb in &self.links[ep.node as usize][level] {
                let c = self.cand(q, nb);
                *evals += 1;
                if c < ep {
                    ep = c;
                    improved = true;
                }
            }
            if !improved {
                return ep;
            }
        }
    }

    fn search_layer(
        &self,
        q: &[T],
        entry: &[Cand<T>],
        ef: usize,
        level: usize,
        skip_deleted: bool,
        visited: &mut Visited,
        evals: &mut usize,
    ) -> Vec<Cand<T>> {
        visited.reset(self.doc_ids.len());
        let mut frontier: BinaryHeap<Reverse<Cand<T>>> = BinaryHeap::new();
        let mut best: BinaryHeap<Cand<T>> = BinaryHeap::with_capacity(ef + 1);
        for &e in entry {
            if visited.insert(e.node) {
                frontier.push(Reverse(e));
                if !(skip_deleted && self.deleted[e.node as usize]) {
                    best.push(e);
                    if best.len() > ef {
                        best.pop();
                    }
                }
            }
        }
        while let Some(Reverse(c)) = frontier.pop() {
            if best.len() >= ef && best.peek().is_some_and(|w| c > *w) {
                break;
            }
            for &nb in &self.links[c.node as usize][level] {
                if !visited.insert(nb) {
                    continue;
                }
                let nc = self.cand(q, nb);
                *evals += 1;
                if best.len() < ef || best.peek().is_some_and(|w| nc < *w) {
                    frontier.push(Reverse(nc));
                    if !(skip_deleted && self.deleted[nb as usize]) {
                        best.push(nc);
                        if best.len() > ef {
                            best.pop();
                        }
                    }
                }
            }
        }
        best.into_sorted_vec()
    }

    /// Keeps candidates (ascending by distance to the base) that are closer to the base than to
    /// any already-kept neighbor.
    fn select_neighbors(&self, sorted: &[Cand<T>], m: usize) -> Vec<u32> {
        let mut kept: Vec<u32> = Vec::with_capacity(m);
        for c in sorted {
            if kept.len() >= m {
                break;
            }
            let cv = self.node_vec(c.node);
            let diverse = kept.iter().all(|&k| self.params.distance.eval(cv, self.node_vec(k)) >= c.dist);
            if diverse {
                kept.push(c.node);
            }
        }
        kept
    }

    fn shrink(&mut self, node: u32, level: usize) {
        let base = self.node_vec(node).to_vec();
        let mut cands: Vec<Cand<T>> = self.links[node as usize][level].iter().map(|&x| self.cand(&base, x)).collect();
        cands.sort();
        let kept = self.select_neighbors(&cands, self.params.max_links(level));
        self.links[node as usize][level] = kept;
    }

    /// Adds one vector using the construction routine.
    pub fn insert(&mut self, doc: DocId, v: &[T]) -> Result<()> {
        if v.len() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, got: v.len() });
        }
        if self.node_of.contains_key(&doc) {
            return Err(Error::domain(format!("document {doc} already indexed")));
        }
        let level = self.random_level();
        let node = u32::try_from(self.doc_ids.len()).map_err(|_| Error::params("index too large"))?;
        self.vectors.extend_from_slice(v);
        self.doc_ids.push(doc);
        self.deleted.push(false);
        self.links.push(vec![Vec::new(); level + 1]);
        self.node_of.insert(doc, node);

        let Some(entry) = self.entry else {
            self.entry = Some(node);
            self.max_level = level;
            return Ok(());
        };
        let q = v.to_vec();
        let mut evals = 0;
        let mut visited = self.take_visited();
        let mut ep = self.cand(&q, entry);
        for l in (level + 1..=self.max_level).rev() {
            ep = self.greedy_descend(&q, ep, l, &mut evals);
        }
        let mut eps = vec![ep];
        for l in (0..=level.min(self.max_level)).rev() {
            let found = self.search_layer(&q, &eps, self.params.ef_construction, l, false, &mut visited, &mut evals);
            let chosen = self.select_neighbors(&found, self.params.m);
            for &nb in &chosen {
                let list = &mut self.links[nb as usize][l];
                list.push(node);
                if list.len() > self.params.max_links(l) {
                    self.shrink(nb, l);
                }
            }
            self.links[node as usize][l] = chosen;
            eps = found;
        }
        self.give_visited(visited);
        if level > self.max_level {
            self.entry = Some(node);
            self.max_level = level;
        }
        Ok(())
    }

    /// Tombstones a document. Returns false if it was not live.
    pub fn mark_deleted(&mut self, doc: DocId) -> bool {
        match self.node_of.get(&doc) {
            Some(&n) if !self.deleted[n as usize] => {
                self.deleted[n as usize] = true;
                self.num_deleted += 1;
                true
            }
            _ => false,
        }
    }

    /// Revives a tombstoned document. Returns false if it was not tombstoned.
    pub fn restore(&mut self, doc: DocId) -> bool {
        match self.node_of.get(&doc) {
            Some(&n) if self.deleted[n as usize] => {
                self.deleted[n as usize] = false;
                self.num_deleted -= 1;
                true
            }
            _ => false,
        }
    }

    /// Fresh graph over the live documents, same parameters and seed.
    pub fn rebuilt(&self) -> Result<Self> {
        let mut idx = Self::new(self.dim, self.params, self.seed)?;
        let mut live: Vec<(DocId, u32)> =
            self.node_of.iter().filter(|(_, &n)| !self.deleted[n as usize]).map(|(d, n)| (*d, *n)).collect();
        live.sort_unstable();
        idx.reserve(live.len());
        for (d, n) in live {
            idx.insert(d, self.node_vec(n))?;
        }
        Ok(idx)
    }

    /// # Panics
    /// If the query dimension differs from the index dimension.
    pub fn search(&self, q: &[T], ef: usize, k: usize) -> SearchResult<T> {
        self.search_filtered(q, ef, k, &AllowAll)
    }

    /// Searches with queue width `max(ef, k)` and keeps the best `k` allowed hits.
    ///
    /// # Panics
    /// If the query dimension differs from the index dimension.
    pub fn search_filtered<F: DocFilter + ?Sized>(&self, q: &[T], ef: usize, k: usize, allowed: &F) -> SearchResult<T> {
        assert_eq!(q.len(), self.dim, "query dimension mismatch");
        let Some(entry) = self.entry else {
            return SearchResult::empty();
        };
        if self.is_empty() || k == 0 {
            return SearchResult::empty();
        }
        let ef = ef.max(k);
        let mut evals = 1;
        let mut ep = self.cand(q, entry);
        for l in (1..=self.max_level).rev() {
            ep = self.greedy_descend(q, ep, l, &mut evals);
        }
        let mut visited = self.take_visited();
        let found = self.search_layer(q, &[ep], ef, 0, true, &mut visited, &mut evals);
        self.give_visited(visited);
        let hits = found.iter().filter(|c| allowed.allows(c.doc)).take(k).map(Cand::hit).collect();
        SearchResult { hits, visited: evals }
    }
}
