//! Exemplar memory and the k-means selection that fills it.
//!
//! After stage one of each task, every new relation's training instances
//! are clustered in representation space and the instance nearest each
//! cluster center is stored. Raw instances are kept (not embeddings): the
//! encoder keeps moving during stage two, so memory is re-encoded on use.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::data::{Instance, RelationId};
use crate::error::{CoreError, Result};
use crate::rng::Rng;
use crate::tensor::l2_distance_sq;

pub const KMEANS_MAX_ITER: usize = 100;
pub const KMEANS_TOL: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct ClusterResult {
    pub centroids: Vec<Vec<f64>>,
    pub assignment: Vec<usize>,
    pub iterations: usize,
    pub converged: bool,
}

impl ClusterResult {
    /// Sum of squared distances from each point to its centroid.
    pub fn sse(&self, points: &[Vec<f64>]) -> f64 {
        points
            .iter()
            .zip(&self.assignment)
            .map(|(p, &c)| l2_distance_sq(p, &self.centroids[c]))
            .sum()
    }
}

fn nearest_centroid(point: &[f64], centroids: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (c, centroid) in centroids.iter().enumerate() {
        let d = l2_distance_sq(point, centroid);
        if d < best_d {
            best_d = d;
            best = c;
        }
    }
    best
}

fn kmeans_pp_init(points: &[Vec<f64>], k: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(k);
    centroids.push(points[rng.below(points.len())].clone());
    let mut dist: Vec<f64> = points
        .iter()
        .map(|p| l2_distance_sq(p, &centroids[0]))
        .collect();
    while centroids.len() < k {
        let total: f64 = dist.iter().sum();
        let chosen = if total > 0.0 {
            let mut threshold = rng.next_f64() * total;
            let mut pick = 0;
            for (i, &d) in dist.iter().enumerate() {
                threshold -= d;
                pick = i;
                if threshold <= 0.0 {
                    break;
                }
            }
            pick
        } else {
            // all remaining mass at distance zero: spread over duplicates
            rng.below(points.len())
        };
        centroids.push(points[chosen].clone());
        for (i, p) in points.iter().enumerate() {
            let d = l2_distance_sq(p, centroids.last().expect("just pushed"));
            if d < dist[i] {
                dist[i] = d;
            }
        }
    }
    centroids
}

/// Lloyd's algorithm with k-means++ initialization. At return (when
/// converged) every centroid is the mean of its assigned points and every
/// point sits with its nearest centroid, ties toward the lowest centroid
/// index. Clusters that empty out are re-seeded with the point farthest
/// from its current centroid so exactly `k` clusters come back.
pub fn kmeans(
    points: &[Vec<f64>],
    k: usize,
    seed: u64,
    max_iter: usize,
    tol: f64,
) -> Result<ClusterResult> {
    if points.is_empty() || k == 0 {
        return Err(CoreError::Size("kmeans needs points and k >= 1".into()));
    }
    if k > points.len() {
        return Err(CoreError::Size(format!(
            "kmeans k={k} exceeds {} points",
            points.len()
        )));
    }
    let mut rng = Rng::from_seed(seed);
    let mut centroids = kmeans_pp_init(points, k, &mut rng);
    let dim = points[0].len();
    let mut assignment: Vec<usize> = points
        .iter()
        .map(|p| nearest_centroid(p, &centroids))
        .collect();

    let mut iterations = 0;
    let mut converged = false;
    while iterations < max_iter {
        iterations += 1;
        // update step
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &c) in points.iter().zip(&assignment) {
            counts[c] += 1;
            for (s, &v) in sums[c].iter_mut().zip(p.iter()) {
                *s += v;
            }
        }
        // re-seed empty clusters with the worst-served point
        for c in 0..k {
            if counts[c] > 0 {
                continue;
            }
            let mut worst = (0usize, -1.0f64);
            for (i, p) in points.iter().enumerate() {
                let owner = assignment[i];
                if counts[owner] <= 1 {
                    continue;
                }
                let d = l2_distance_sq(p, &centroids[owner]);
                if d > worst.1 {
                    worst = (i, d);
                }
            }
            let (steal, _) = worst;
            let old = assignment[steal];
            counts[old] -= 1;
            for (s, &v) in sums[old].iter_mut().zip(points[steal].iter()) {
                *s -= v;
            }
            assignment[steal] = c;
            counts[c] = 1;
            sums[c] = points[steal].clone();
        }
        let mut shift: f64 = 0.0;
        for c in 0..k {
            let inv = 1.0 / counts[c] as f64;
            let mut moved = 0.0;
            for (j, s) in sums[c].iter().enumerate() {
                let nv = s * inv;
                let d = nv - centroids[c][j];
                moved += d * d;
                centroids[c][j] = nv;
            }
            shift = shift.max(moved);
        }
        // assignment step against the fresh centroids
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let c = nearest_centroid(p, &centroids);
            if c != assignment[i] {
                assignment[i] = c;
                changed = true;
            }
        }
        if !changed && shift < tol {
            converged = true;
            break;
        }
    }
    Ok(ClusterResult {
        centroids,
        assignment,
        iterations,
        converged,
    })
}

/// Pick up to `b` exemplars for one relation: cluster the encodings with
/// `k = min(b, n)` and keep the instance closest to each centroid, ties
/// toward the lowest input index. Returns `(instance index, instance)` in
/// cluster order.
pub fn select_exemplars(
    encodings: &[Vec<f64>],
    instances: &[Instance],
    b: usize,
    seed: u64,
) -> Result<Vec<Instance>> {
    if instances.is_empty() {
        return Err(CoreError::EmptyData("selection from an empty relation".into()));
    }
    if encodings.len() != instances.len() {
        return Err(CoreError::Size(format!(
            "{} encodings for {} instances",
            encodings.len(),
            instances.len()
        )));
    }
    let relation = instances[0].relation;
    if instances.iter().any(|i| i.relation != relation) {
        return Err(CoreError::Coverage(
            "selection input mixes relations".into(),
        ));
    }
    let k = b.min(instances.len()).max(1);
    let clusters = kmeans(encodings, k, seed, KMEANS_MAX_ITER, KMEANS_TOL)?;
    let mut picks: Vec<Option<(usize, f64)>> = vec![None; k];
    for (i, enc) in encodings.iter().enumerate() {
        let c = clusters.assignment[i];
        let d = l2_distance_sq(enc, &clusters.centroids[c]);
        match picks[c] {
            Some((_, best)) if best <= d => {}
            _ => picks[c] = Some((i, d)),
        }
    }
    Ok(picks
        .into_iter()
        .flatten()
        .map(|(i, _)| instances[i].clone())
        .collect())
}

/// Per-relation exemplar store with capacity `B` per relation.
#[derive(Clone, Debug, Default)]
pub struct MemoryStore {
    per_relation: BTreeMap<RelationId, Vec<Instance>>,
    capacity: usize,
}

impl MemoryStore {
    pub fn new(capacity: usize) -> Self {
        MemoryStore {
            per_relation: BTreeMap::new(),
            capacity,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn relations(&self) -> impl Iterator<Item = RelationId> + '_ {
        self.per_relation.keys().copied()
    }

    pub fn contains(&self, r: RelationId) -> bool {
        self.per_relation.contains_key(&r)
    }

    pub fn exemplars(&self, r: RelationId) -> &[Instance] {
        self.per_relation.get(&r).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn total_instances(&self) -> usize {
        self.per_relation.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.per_relation.is_empty()
    }

    /// All stored instances in relation-id order.
    pub fn all_instances(&self) -> Vec<&Instance> {
        self.per_relation.values().flatten().collect()
    }

    /// Union with freshly selected exemplars for previously unseen relations.
    pub fn merge(&mut self, new: BTreeMap<RelationId, Vec<Instance>>) -> Result<()> {
        for (r, exemplars) in new {
            if self.per_relation.contains_key(&r) {
                return Err(CoreError::DuplicateRelation(format!(
                    "relation id {} already in memory",
                    r.0
                )));
            }
            if exemplars.len() > self.capacity {
                return Err(CoreError::Size(format!(
                    "{} exemplars exceed capacity {}",
                    exemplars.len(),
                    self.capacity
                )));
            }
            self.per_relation.insert(r, exemplars);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Span;

    fn pts(xs: &[f64]) -> Vec<Vec<f64>> {
        xs.iter().map(|&x| vec![x]).collect()
    }

    /// Brute-force best SSE over every assignment of points to k labels.
    fn brute_force_sse(points: &[Vec<f64>], k: usize) -> f64 {
        let n = points.len();
        let dim = points[0].len();
        let mut best = f64::INFINITY;
        let total = k.pow(n as u32);
        'outer: for code in 0..total {
            let mut assign = vec![0usize; n];
            let mut c = code;
            for a in assign.iter_mut() {
                *a = c % k;
                c /= k;
            }
            let mut used = vec![false; k];
            for &a in &assign {
                used[a] = true;
            }
            if used.iter().any(|&u| !u) {
                continue 'outer;
            }
            let mut sums = vec![vec![0.0; dim]; k];
            let mut counts = vec![0usize; k];
            for (p, &a) in points.iter().zip(&assign) {
                counts[a] += 1;
                for (s, &v) in sums[a].iter_mut().zip(p) {
                    *s += v;
                }
            }
            let mut sse = 0.0;
            for (p, &a) in points.iter().zip(&assign) {
                for (j, &v) in p.iter().enumerate() {
                    let mean = sums[a][j] / counts[a] as f64;
                    sse += (v - mean) * (v - mean);
                }
            }
            best = best.min(sse);
        }
        best
    }

    #[test]
    fn kmeans_line_case_matches_brute_force() {
        let points = pts(&[0.0, 1.0, 10.0]);
        let result = kmeans(&points, 2, 0, KMEANS_MAX_ITER, KMEANS_TOL).unwrap();
        assert!(result.converged);
        let sse = result.sse(&points);
        let best = brute_force_sse(&points, 2);
        assert!((sse - best).abs() < 1e-9, "sse {sse} vs optimal {best}");
        // clusters {0,1} and {10}: centroids 0.5 and 10 in some order
        let mut cs: Vec<f64> = result.centroids.iter().map(|c| c[0]).collect();
        cs.sort_by(f64::total_cmp);
        assert!((cs[0] - 0.5).abs() < 1e-12);
        assert!((cs[1] - 10.0).abs() < 1e-12);
    }

    #[test]
    fn kmeans_k_equals_n_gives_zero_sse() {
        let points = pts(&[1.0, 4.0, -2.0, 7.5]);
        let result = kmeans(&points, 4, 3, KMEANS_MAX_ITER, KMEANS_TOL).unwrap();
        assert!(result.sse(&points) < 1e-24);
        let mut assigned = result.assignment.clone();
        assigned.sort_unstable();
        assigned.dedup();
        assert_eq!(assigned.len(), 4);
    }

    #[test]
    fn kmeans_k1_centroid_is_the_mean() {
        let points = pts(&[1.0, 2.0, 6.0]);
        let result = kmeans(&points, 1, 9, KMEANS_MAX_ITER, KMEANS_TOL).unwrap();
        assert!((result.centroids[0][0] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn kmeans_rejects_k_above_point_count() {
        let points = pts(&[0.0, 1.0]);
        assert!(matches!(
            kmeans(&points, 3, 0, KMEANS_MAX_ITER, KMEANS_TOL),
            Err(CoreError::Size(_))
        ));
    }

    #[test]
    fn kmeans_invariants_hold_at_convergence() {
        let mut rng = crate::rng::Rng::from_seed(5);
        for trial in 0..50 {
            let n = 3 + rng.below(8);
            let k = 1 + rng.below(3.min(n));
            let points: Vec<Vec<f64>> = (0..n)
                .map(|_| vec![rng.next_f64() * 10.0, rng.next_f64() * 10.0])
                .collect();
            let r = kmeans(&points, k, trial, KMEANS_MAX_ITER, KMEANS_TOL).unwrap();
            assert!(r.converged, "trial {trial} did not converge");
            // each point at its nearest centroid
            for (p, &a) in points.iter().zip(&r.assignment) {
                let nearest = nearest_centroid(p, &r.centroids);
                assert!(
                    (l2_distance_sq(p, &r.centroids[a]) - l2_distance_sq(p, &r.centroids[nearest]))
                        .abs()
                        < 1e-12
                );
            }
            // each centroid is the mean of its points
            for c in 0..k {
                let members: Vec<&Vec<f64>> = points
                    .iter()
                    .zip(&r.assignment)
                    .filter(|(_, &a)| a == c)
                    .map(|(p, _)| p)
                    .collect();
                assert!(!members.is_empty(), "cluster {c} empty");
                for j in 0..2 {
                    let mean: f64 =
                        members.iter().map(|p| p[j]).sum::<f64>() / members.len() as f64;
                    assert!((mean - r.centroids[c][j]).abs() < 1e-9);
                }
            }
        }
    }

    fn dummy_instance(relation: u32, tag: u32) -> Instance {
        Instance {
            tokens: vec![tag, 1, 2, 3, 4, 5],
            head: Span::new(1, 1),
            tail: Span::new(3, 3),
            relation: RelationId(relation),
        }
    }

    #[test]
    fn selection_keeps_everything_when_capacity_exceeds_count() {
        let encodings = pts(&[0.0, 5.0, 9.0]);
        let instances: Vec<Instance> = (0..3).map(|i| dummy_instance(0, i)).collect();
        let picked = select_exemplars(&encodings, &instances, 10, 0).unwrap();
        assert_eq!(picked.len(), 3);
        let mut tags: Vec<u32> = picked.iter().map(|i| i.tokens[0]).collect();
        tags.sort_unstable();
        assert_eq!(tags, vec![0, 1, 2]);
    }

    #[test]
    fn selection_breaks_ties_toward_lower_index() {
        // two points equidistant from their centroid
        let encodings = pts(&[1.0, 3.0]);
        let instances: Vec<Instance> = (0..2).map(|i| dummy_instance(0, i)).collect();
        let picked = select_exemplars(&encodings, &instances, 1, 0).unwrap();
        assert_eq!(picked.len(), 1);
        assert_eq!(picked[0].tokens[0], 0);
    }

    #[test]
    fn selection_takes_one_exemplar_per_separated_blob() {
        let mut rng = crate::rng::Rng::from_seed(17);
        let mut encodings = Vec::new();
        let mut instances = Vec::new();
        for blob in 0..10 {
            let center = blob as f64 * 100.0;
            for j in 0..6 {
                encodings.push(vec![center + rng.next_f64(), center - rng.next_f64()]);
                instances.push(dummy_instance(0, (blob * 6 + j) as u32));
            }
        }
        let picked = select_exemplars(&encodings, &instances, 10, 1).unwrap();
        assert_eq!(picked.len(), 10);
        let mut blobs: Vec<u32> = picked.iter().map(|i| i.tokens[0] / 6).collect();
        blobs.sort_unstable();
        blobs.dedup();
        assert_eq!(blobs.len(), 10, "one exemplar per blob");
    }

    #[test]
    fn selection_rejects_empty_and_mixed_input() {
        assert!(matches!(
            select_exemplars(&[], &[], 5, 0),
            Err(CoreError::EmptyData(_))
        ));
        let encodings = pts(&[0.0, 1.0]);
        let instances = vec![dummy_instance(0, 0), dummy_instance(1, 1)];
        assert!(select_exemplars(&encodings, &instances, 5, 0).is_err());
    }

    #[test]
    fn merge_unions_and_preserves_identity() {
        let mut store = MemoryStore::new(10);
        let mut new = BTreeMap::new();
        for r in 0..8u32 {
            new.insert(
                RelationId(r),
                (0..10).map(|i| dummy_instance(r, i)).collect::<Vec<_>>(),
            );
        }
        store.merge(new.clone()).unwrap();
        assert_eq!(store.total_instances(), 80);
        for r in 0..8u32 {
            assert_eq!(store.exemplars(RelationId(r)), &new[&RelationId(r)][..]);
        }
    }

    #[test]
    fn merge_rejects_relation_collision() {
        let mut store = MemoryStore::new(10);
        let mut new = BTreeMap::new();
        new.insert(RelationId(0), vec![dummy_instance(0, 0)]);
        store.merge(new.clone()).unwrap();
        assert!(matches!(
            store.merge(new),
            Err(CoreError::DuplicateRelation(_))
        ));
    }
}
