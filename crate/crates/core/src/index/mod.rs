//! Per-partition vector search: HNSW graph, exact scan and memory accounting.

mod dataset;
mod hnsw;

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashSet};

pub use dataset::Dataset;
pub use hnsw::{HnswIndex, HnswParams};

use crate::ids::DocId;
use crate::partition::PartitionPlan;
use crate::rbac::AuthSet;
use crate::scalar::Scalar;
use crate::sets;

/// Euclidean distances are reported squared; ranking is unchanged.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Distance {
    #[default]
    Euclidean,
    Cosine,
}

impl Distance {
    #[inline]
    pub fn eval<T: Scalar>(self, a: &[T], b: &[T]) -> T {
        match self {
            Distance::Euclidean => squared_l2(a, b),
            Distance::Cosine => {
                let (dot, na, nb) = dot_norms(a, b);
                let denom = (na * nb).sqrt();
                if denom <= T::zero() {
                    T::one()
                } else {
                    (T::one() - dot / denom).max(T::zero())
                }
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Distance::Euclidean => "euclidean",
            Distance::Cosine => "cosine",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "euclidean" | "l2" => Some(Distance::Euclidean),
            "cosine" => Some(Distance::Cosine),
            _ => None,
        }
    }
}

#[inline]
fn squared_l2<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            let d = x[i] - y[i];
            acc[i] = acc[i] + d * d;
        }
    }
    let mut tail = T::zero();
    for (x, y) in ra.iter().zip(rb) {
        let d = *x - *y;
        tail = tail + d * d;
    }
    acc.iter().fold(tail, |s, v| s + *v)
}

fn dot_norms<T: Scalar>(a: &[T], b: &[T]) -> (T, T, T) {
    a.iter().zip(b).fold((T::zero(), T::zero(), T::zero()), |(d, na, nb), (x, y)| {
        (d + *x * *y, na + *x * *x, nb + *y * *y)
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit<T> {
    pub doc: DocId,
    pub dist: T,
}

/// Ascending distance, then ascending document id.
pub fn hit_order<T: Scalar>(a: &Hit<T>, b: &Hit<T>) -> Ordering {
    a.dist.partial_cmp(&b.dist).unwrap_or(Ordering::Equal).then(a.doc.cmp(&b.doc))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchResult<T> {
    pub hits: Vec<Hit<T>>,
    /// Distance evaluations spent.
    pub visited: usize,
}

impl<T: Scalar> SearchResult<T> {
    pub fn empty() -> Self {
        SearchResult { hits: Vec::new(), visited: 0 }
    }

    pub fn docs(&self) -> Vec<DocId> {
        self.hits.iter().map(|h| h.doc).collect()
    }

    /// Merges several results: one entry per document at its smallest distance, best `k` kept.
    pub fn merge(parts: impl IntoIterator<Item = SearchResult<T>>, k: usize) -> Self {
        let mut hits = Vec::new();
        let mut visited = 0;
        for p in parts {
            visited += p.visited;
            hits.extend(p.hits);
        }
        hits.sort_by(hit_order);
        let mut seen = HashSet::with_capacity(hits.len());
        hits.retain(|h| seen.insert(h.doc));
        hits.truncate(k);
        SearchResult { hits, visited }
    }
}

/// Post-filter predicate over document ids.
pub trait DocFilter {
    fn allows(&self, doc: DocId) -> bool;
}

#[derive(Clone, Copy, Debug, Default)]
pub struct AllowAll;

impl DocFilter for AllowAll {
    fn allows(&self, _: DocId) -> bool {
        true
    }
}

impl DocFilter for AuthSet {
    fn allows(&self, doc: DocId) -> bool {
        self.contains(doc)
    }
}

/// Must be sorted ascending.
impl DocFilter for [DocId] {
    fn allows(&self, doc: DocId) -> bool {
        sets::contains(self, &doc)
    }
}

impl DocFilter for HashSet<DocId> {
    fn allows(&self, doc: DocId) -> bool {
        self.contains(&doc)
    }
}

impl<F: DocFilter + ?Sized> DocFilter for &F {
    fn allows(&self, doc: DocId) -> bool {
        (**self).allows(doc)
    }
}

struct Ranked<T>(Hit<T>);

impl<T: Scalar> PartialEq for Ranked<T> {
    fn eq(&self, o: &Self) -> bool {
        hit_order(&self.0, &o.0) == Ordering::Equal
    }
}
impl<T: Scalar> Eq for Ranked<T> {}
impl<T: Scalar> PartialOrd for Ranked<T> {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}
impl<T: Scalar> Ord for Ranked<T> {
    fn cmp(&self, o: &Self) -> Ordering {
        hit_order(&self.0, &o.0)
    }
}

fn top_k<T: Scalar>(k: usize, scored: impl Iterator<Item = Hit<T>>) -> SearchResult<T> {
    let mut heap: BinaryHeap<Ranked<T>> = BinaryHeap::with_capacity(k + 1);
    let mut visited = 0;
    for h in scored {
        visited += 1;
        if heap.len() < k {
            heap.push(Ranked(h));
        } else if let Some(top) = heap.peek() {
            if hit_order(&h, &top.0) == Ordering::Less {
                heap.pop();
                heap.push(Ranked(h));
            }
        }
    }
    SearchResult { hits: heap.into_sorted_vec().into_iter().map(|r| r.0).collect(), visited }
}

/// Exact top-k by full scan. Row `i` of `vectors` belongs to `doc_ids[i]`.
pub fn brute_force_topk<T: Scalar>(
    vectors: &Dataset<T>,
    doc_ids: &[DocId],
    query: &[T],
    k: usize,
    allowed: Option<&dyn DocFilter>,
    distance: Distance,
) -> SearchResult<T> {
    top_k(
        k,
        doc_ids
            .iter()
            .enumerate()
            .filter(|(_, d)| allowed.is_none_or(|f| f.allows(**d)))
            .map(|(i, &doc)| Hit { doc, dist: distance.eval(query, vectors.row(i)) }),
    )
}

/// Exact top-k over `docs`, reading document `d` from row `d` of `dataset`.
pub fn brute_force_docs<T: Scalar>(dataset: &Dataset<T>, docs: &[DocId], query: &[T], k: usize, distance: Distance) -> SearchResult<T> {
    top_k(k, docs.iter().map(|&doc| Hit { doc, dist: distance.eval(query, dataset.row(doc.index())) }))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MemoryMode {
    /// Every partition stores its own copy of the vectors.
    Physical,
    /// Vectors stored once; partitions only add graph links.
    Logical,
}

/// Approximate bytes for vectors plus roughly 3M links per node.
pub fn index_memory_bytes(plan: &PartitionPlan, dim: usize, m: usize, bytes_per_scalar: usize, mode: MemoryMode) -> u64 {
    let total = plan.total_docs() as u64;
    let (d, links, bf) = (dim as u64, 3 * m as u64, bytes_per_scalar as u64);
    match mode {
        MemoryMode::Physical => bf * total * (d + links),
        MemoryMode::Logical => bf * (plan.num_docs() as u64 * d + links * total),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ids::RoleId;
    use crate::rbac::RbacPolicy;
    use proptest::prelude::*;

    fn line(points: &[f32]) -> Dataset<f32> {
        Dataset::from_rows(&points.iter().map(|p| vec![*p]).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn distances() {
        assert_eq!(Distance::Euclidean.eval(&[0.0f64, 0.0], &[3.0, 4.0]), 25.0);
        let c = Distance::Cosine.eval(&[1.0f64, 0.0], &[0.0, 2.0]);
        assert!((c - 1.0).abs() < 1e-12);
        assert!(Distance::Cosine.eval(&[1.0f64, 1.0], &[2.0, 2.0]).abs() < 1e-12);
        let a: Vec<f64> = (0..19).map(|i| i as f64 * 0.5).collect();
        let b: Vec<f64> = (0..19).map(|i| (i * i) as f64 * 0.1).collect();
        let naive: f64 = a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum();
        assert!((Distance::Euclidean.eval(&a, &b) - naive).abs() < 1e-9);
    }

    #[test]
    fn brute_force_basics() {
        let ds = line(&[1.0, 2.0, 3.0]);
        let ids = [DocId(0), DocId(1), DocId(2)];
        let r = brute_force_topk(&ds, &ids, &[0.0], 2, None, Distance::Euclidean);
        assert_eq!(r.docs(), vec![DocId(0), DocId(1)]);
        assert_eq!(r.visited, 3);
        let allowed = vec![DocId(1), DocId(2)];
        let r = brute_force_topk(&ds, &ids, &[0.0], 2, Some(&&allowed[..]), Distance::Euclidean);
        assert_eq!(r.docs(), vec![DocId(1), DocId(2)]);
    }

    #[test]
    fn brute_force_ties_by_doc_id() {
        let ds = line(&[1.0, -1.0, 1.0]);
        let r = brute_force_topk(&ds, &[DocId(5), DocId(3), DocId(4)], &[0.0], 2, None, Distance::Euclidean);
        assert_eq!(r.docs(), vec![DocId(3), DocId(4)]);
    }

    #[test]
    fn merge_dedups_at_min_distance() {
        let a = SearchResult { hits: vec![Hit { doc: DocId(1), dist: 1.0f32 }, Hit { doc: DocId(2), dist: 3.0 }], visited: 4 };
        let b = SearchResult { hits: vec![Hit { doc: DocId(2), dist: 3.0f32 }, Hit { doc: DocId(7), dist: 2.0 }], visited: 5 };
        let m = SearchResult::merge([a, b], 10);
        assert_eq!(m.docs(), vec![DocId(1), DocId(7), DocId(2)]);
        assert_eq!(m.visited, 9);
    }

    #[test]
    fn memory_formulas() {
        let p = RbacPolicy::new(
            10_000,
            vec![],
            vec![(0..10_000).map(DocId).collect(), (0..10_000).map(DocId).collect(), (0..10_000).map(DocId).collect()],
        )
        .unwrap();
        let single = PartitionPlan::single(&p);
        assert_eq!(
            index_memory_bytes(&single, 128, 16, 4, MemoryMode::Physical),
            index_memory_bytes(&single, 128, 16, 4, MemoryMode::Logical)
        );
        let triple = PartitionPlan::per_role(&p);
        assert_eq!(triple.total_docs(), 30_000);
        let ratio = index_memory_bytes(&triple, 128, 16, 4, MemoryMode::Logical) as f64
            / index_memory_bytes(&single, 128, 16, 4, MemoryMode::Logical) as f64;
        let expect = (128.0 + 3.0 * 48.0) / (128.0 + 48.0);
        assert!((ratio - expect).abs() < 1e-12);
        assert!((ratio - 1.545).abs() < 1e-3);
        let _ = RoleId(0);
    }

    proptest! {
        #[test]
        fn brute_force_permutation_invariant(vals in proptest::collection::vec(-50i32..50, 1..40), k in 1usize..8, rot in 0usize..40) {
            let pts: Vec<f32> = vals.iter().map(|v| *v as f32).collect();
            let ds = line(&pts);
            let ids: Vec<DocId> = (0..pts.len() as u32).map(DocId).collect();
            let base = brute_force_topk(&ds, &ids, &[0.5], k, None, Distance::Euclidean);
            let r = rot % pts.len();
            let mut rp = pts.clone();
            rp.rotate_left(r);
            let mut rids = ids.clone();
            rids.rotate_left(r);
            let rot_res = brute_force_topk(&line(&rp), &rids, &[0.5], k, None, Distance::Euclidean);
            prop_assert_eq!(&base.hits, &rot_res.hits);
            let mut full: Vec<Hit<f32>> = ids.iter().map(|&d| Hit { doc: d, dist: Distance::Euclidean.eval(&[0.5], ds.row(d.index())) }).collect();
            full.sort_by(hit_order);
            full.truncate(k);
            prop_assert_eq!(base.hits, full);
        }
    }
}
