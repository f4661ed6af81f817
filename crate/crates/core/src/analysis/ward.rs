//! Ward minimum-variance agglomerative clustering.
//!
//! Merge heights follow the convention where two singletons merge at their
//! euclidean distance; cluster distances are updated with the Lance–Williams
//! recurrence on squared distances.

use std::collections::HashMap;

use crate::dataset::{consensus, Dataset, RatingVector};
use crate::error::{Error, Result};
use crate::scalar::{squared_euclidean, Scalar};

#[derive(Clone, Debug, PartialEq)]
pub struct Merge<T> {
    /// Smaller of the two merged cluster labels.
    pub a: usize,
    pub b: usize,
    pub height: T,
    /// Size of the new cluster.
    pub size: usize,
}

/// Leaves are labelled `0..n`; the cluster created by merge `i` is `n + i`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dendrogram<T> {
    n_leaves: usize,
    merges: Vec<Merge<T>>,
}

impl<T: Scalar> Dendrogram<T> {
    pub fn n_leaves(&self) -> usize {
        self.n_leaves
    }

    pub fn merges(&self) -> &[Merge<T>] {
        &self.merges
    }

    pub fn root(&self) -> usize {
        2 * self.n_leaves - 2
    }

    /// Children of an internal node, `None` for leaves.
    pub fn children(&self, node: usize) -> Option<(usize, usize)> {
        (node >= self.n_leaves).then(|| {
            let m = &self.merges[node - self.n_leaves];
            (m.a, m.b)
        })
    }

    pub fn height(&self, node: usize) -> T {
        if node < self.n_leaves {
            T::zero()
        } else {
            self.merges[node - self.n_leaves].height
        }
    }

    /// Leaf labels under `node` in ascending order.
    pub fn leaves(&self, node: usize) -> Vec<usize> {
        let mut out = Vec::new();
        let mut stack = vec![node];
        while let Some(c) = stack.pop() {
            match self.children(c) {
                Some((a, b)) => {
                    stack.push(a);
                    stack.push(b);
                }
                None => out.push(c),
            }
        }
        out.sort_unstable();
        out
    }
}

/// Clusters `points` bottom-up, always merging the pair with the smallest
/// Ward distance. Equal distances resolve to the lexicographically smallest
/// `(a, b)` label pair.
pub fn ward_cluster<T: Scalar, P: AsRef<[T]>>(points: &[P]) -> Result<Dendrogram<T>> {
    let n = points.len();
    if n < 2 {
        return Err(Error::Argument(format!("ward clustering needs at least 2 points, got {n}")));
    }
    let dim = points[0].as_ref().len();
    if points.iter().any(|p| p.as_ref().len() != dim) {
        return Err(Error::Shape("points of differing dimension".into()));
    }

    // Squared Ward distances between active slots, full symmetric matrix.
    let mut d2 = vec![T::zero(); n * n];
    for i in 0..n {
        for j in i + 1..n {
            let v = squared_euclidean(points[i].as_ref(), points[j].as_ref());
            d2[i * n + j] = v;
            d2[j * n + i] = v;
        }
    }
    let mut label: Vec<usize> = (0..n).collect();
    let mut size = vec![1usize; n];
    let mut active: Vec<usize> = (0..n).collect();
    let mut merges = Vec::with_capacity(n - 1);

    for step in 0..n - 1 {
        let mut best: Option<(T, usize, usize, (usize, usize))> = None;
        for (x, &i) in active.iter().enumerate() {
            for &j in &active[x + 1..] {
                let d = d2[i * n + j];
                let key = (label[i].min(label[j]), label[i].max(label[j]));
                let better = match &best {
                    None => true,
                    Some((bd, _, _, bkey)) => d < *bd || (d == *bd && key < *bkey),
                };
                if better {
                    best = Some((d, i, j, key));
                }
            }
        }
        let (dist2, i, j, (a, b)) = best.expect("at least two active clusters");
        let (si, sj) = (T::of_usize(size[i]), T::of_usize(size[j]));
        for &w in &active {
            if w == i || w == j {
                continue;
            }
            let sw = T::of_usize(size[w]);
            let v = ((sw + si) * d2[i * n + w] + (sw + sj) * d2[j * n + w] - sw * dist2) / (si + sj + sw);
            d2[i * n + w] = v;
            d2[w * n + i] = v;
        }
        size[i] += size[j];
        label[i] = n + step;
        active.retain(|&s| s != j);
        merges.push(Merge {
            a,
            b,
            height: dist2.max(T::zero()).sqrt(),
            size: size[i],
        });
    }
    Ok(Dendrogram { n_leaves: n, merges })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitSide {
    pub node: usize,
    pub nodule_ids: Vec<String>,
    /// Mean of the members' raw consensus ratings.
    pub mean_rating: RatingVector,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Split<T> {
    pub node: usize,
    pub height: T,
    /// Child `a` of the merge (smaller label).
    pub left: SplitSide,
    pub right: SplitSide,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitSummary<T> {
    pub splits: Vec<Split<T>>,
}

/// Walks the tree top-down: split the root, then repeatedly split the
/// highest remaining internal node, `depth` times in total.
///
/// `leaf_ids[i]` names the dataset record clustered as leaf `i`.
pub fn top_splits_summary<T: Scalar>(
    dendrogram: &Dendrogram<T>,
    leaf_ids: &[String],
    dataset: &Dataset,
    depth: usize,
) -> Result<SplitSummary<T>> {
    let n = dendrogram.n_leaves();
    if leaf_ids.len() != n {
        return Err(Error::Shape(format!("{} leaf ids for a {n}-leaf dendrogram", leaf_ids.len())));
    }
    if n < depth + 1 {
        return Err(Error::Argument(format!(
            "insufficient structure: {depth} splits need at least {} leaves, got {n}",
            depth + 1
        )));
    }
    let by_id: HashMap<&str, _> = dataset.records().iter().map(|r| (r.nodule_id.as_str(), r)).collect();
    let consensuses = leaf_ids
        .iter()
        .map(|id| by_id.get(id.as_str()).ok_or_else(|| Error::Lookup(id.clone()))?.consensus())
        .collect::<Result<Vec<_>>>()?;

    let side = |node: usize| -> Result<SplitSide> {
        let leaves = dendrogram.leaves(node);
        Ok(SplitSide {
            node,
            nodule_ids: leaves.iter().map(|&l| leaf_ids[l].clone()).collect(),
            mean_rating: consensus(leaves.iter().map(|&l| &consensuses[l]))?,
        })
    };

    let mut frontier = vec![dendrogram.root()];
    let mut splits = Vec::with_capacity(depth);
    for _ in 0..depth {
        let pick = frontier
            .iter()
            .enumerate()
            .filter(|(_, &c)| c >= n)
            .max_by(|(_, &x), (_, &y)| {
                dendrogram
                    .height(x)
                    .partial_cmp(&dendrogram.height(y))
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(x.cmp(&y))
            })
            .map(|(pos, &c)| (pos, c));
        let Some((pos, node)) = pick else { break };
        frontier.swap_remove(pos);
        let (a, b) = dendrogram.children(node).expect("internal node");
        splits.push(Split {
            node,
            height: dendrogram.height(node),
            left: side(a)?,
            right: side(b)?,
        });
        frontier.push(a);
        frontier.push(b);
    }
    Ok(SplitSummary { splits })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{FeatureVector, NoduleRecord, Provenance};
    use rand::Rng;

    #[test]
    fn three_point_line() {
        let d = ward_cluster(&[[0.0], [1.0], [10.0]]).unwrap();
        assert_eq!(d.merges()[0], Merge { a: 0, b: 1, height: 1.0, size: 2 });
        let m = &d.merges()[1];
        assert_eq!((m.a, m.b, m.size), (2, 3, 3));
        // ((1+1)*100 + (1+1)*81 - 1*1) / 3 = 361/3
        assert!((m.height - (361.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert!((m.height - 10.9697).abs() < 1e-4);
    }

    #[test]
    fn rejects_single_point() {
        assert!(matches!(ward_cluster(&[[1.0f64]]), Err(Error::Argument(_))));
    }

    #[test]
    fn ties_break_on_smallest_label_pair() {
        // unit square: four equal nearest pairs
        let d = ward_cluster(&[[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]).unwrap();
        assert_eq!((d.merges()[0].a, d.merges()[0].b), (0, 1));
        assert_eq!((d.merges()[1].a, d.merges()[1].b), (2, 3));
    }

    /// Recomputes every pairwise Ward cost from centroids at every step.
    fn naive_ward(points: &[Vec<f64>]) -> Vec<(usize, usize, f64)> {
        let n = points.len();
        let mut clusters: Vec<(usize, Vec<usize>)> = (0..n).map(|i| (i, vec![i])).collect();
        let centroid = |m: &[usize]| -> Vec<f64> {
            let mut c = vec![0.0; points[0].len()];
            for &i in m {
                for (acc, v) in c.iter_mut().zip(&points[i]) {
                    *acc += v;
                }
            }
            c.iter().map(|v| v / m.len() as f64).collect()
        };
        let mut out = Vec::new();
        for step in 0..n - 1 {
            let mut best: Option<(f64, (usize, usize), usize, usize)> = None;
            for x in 0..clusters.len() {
                for y in x + 1..clusters.len() {
                    let (la, ma) = &clusters[x];
                    let (lb, mb) = &clusters[y];
                    let (ca, cb) = (centroid(ma), centroid(mb));
                    let sq: f64 = ca.iter().zip(&cb).map(|(p, q)| (p - q).powi(2)).sum();
                    let (na, nb) = (ma.len() as f64, mb.len() as f64);
                    let cost = 2.0 * na * nb / (na + nb) * sq;
                    let key = ((*la).min(*lb), (*la).max(*lb));
                    if best.as_ref().is_none_or(|b| cost < b.0 || (cost == b.0 && key < b.1)) {
                        best = Some((cost, key, x, y));
                    }
                }
            }
            let (cost, key, x, y) = best.unwrap();
            let merged: Vec<usize> = clusters[x].1.iter().chain(&clusters[y].1).copied().collect();
            clusters.remove(y);
            clusters[x] = (n + step, merged);
            out.push((key.0, key.1, cost.sqrt()));
        }
        out
    }

    #[test]
    fn matches_naive_reference() {
        let mut rng = crate::seeded_rng(31);
        for trial in 0..8 {
            let n = 5 + trial * 4;
            let pts: Vec<Vec<f64>> = (0..n).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
            let d = ward_cluster(&pts).unwrap();
            for (m, (a, b, h)) in d.merges().iter().zip(naive_ward(&pts)) {
                assert_eq!((m.a, m.b), (a, b));
                assert!((m.height - h).abs() < 1e-9);
            }
            assert!(d.merges().windows(2).all(|w| w[0].height <= w[1].height));
            assert_eq!(d.merges().last().unwrap().size, n);
        }
    }

    #[test]
    fn merge_heights_permutation_invariant() {
        let mut rng = crate::seeded_rng(2);
        let pts: Vec<Vec<f64>> = (0..25).map(|_| (0..4).map(|_| rng.random_range(0.0..1.0)).collect()).collect();
        let mut rev = pts.clone();
        rev.reverse();
        let h = |p: &[Vec<f64>]| ward_cluster(p).unwrap().merges().iter().map(|m| m.height).collect::<Vec<_>>();
        for (x, y) in h(&pts).iter().zip(h(&rev)) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    fn blob_dataset(n_per: usize) -> (Vec<Vec<f64>>, Vec<String>, Dataset) {
        let mut rng = crate::seeded_rng(4);
        let mut pts = Vec::new();
        let mut records = Vec::new();
        for i in 0..2 * n_per {
            let blob = i % 2;
            let centre = if blob == 0 { 0.0 } else { 20.0 };
            pts.push((0..3).map(|_| centre + rng.random_range(-1.0..1.0)).collect());
            let m = if blob == 0 { 1.5 } else { 4.5 };
            records.push(NoduleRecord {
                nodule_id: format!("n{i:02}"),
                scan_id: format!("s{i}"),
                annotations: vec![RatingVector::raw([3.0, 3.0, 3.0, 3.0, m]).unwrap(); 3],
                feature: FeatureVector(vec![0.0]),
            });
        }
        let ids = records.iter().map(|r| r.nodule_id.clone()).collect();
        (pts, ids, Dataset::new(records, 1, Provenance::Synthetic).unwrap())
    }

    #[test]
    fn root_split_recovers_planted_blobs() {
        let (pts, ids, ds) = blob_dataset(10);
        let d = ward_cluster(&pts).unwrap();
        let summary = top_splits_summary(&d, &ids, &ds, 3).unwrap();
        assert_eq!(summary.splits.len(), 3);
        let root = &summary.splits[0];
        assert_eq!(root.node, d.root());
        let parity = |side: &SplitSide| {
            let p: Vec<_> = side.nodule_ids.iter().map(|id| id[1..].parse::<usize>().unwrap() % 2).collect();
            assert!(p.iter().all(|&x| x == p[0]));
            p[0]
        };
        assert_ne!(parity(&root.left), parity(&root.right));
        assert_eq!(root.left.nodule_ids.len() + root.right.nodule_ids.len(), 20);
        let mal = |s: &SplitSide| s.mean_rating.malignancy();
        assert!((mal(&root.left) - mal(&root.right)).abs() > 1.0);
        // later splits partition their parent and descend in height
        assert!(summary.splits.windows(2).all(|w| w[0].height >= w[1].height));
    }

    #[test]
    fn side_means_are_member_means() {
        let (pts, ids, ds) = blob_dataset(3);
        let d = ward_cluster(&pts).unwrap();
        let summary = top_splits_summary(&d, &ids, &ds, 3).unwrap();
        for split in &summary.splits {
            for side in [&split.left, &split.right] {
                let members: Vec<_> = side.nodule_ids.iter().map(|id| ds.get(id).unwrap().consensus().unwrap()).collect();
                let m = members.iter().map(|c| c.malignancy()).sum::<f64>() / members.len() as f64;
                assert!((side.mean_rating.malignancy() - m).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn too_few_leaves() {
        let (pts, ids, ds) = blob_dataset(3);
        let d = ward_cluster(&pts[..3]).unwrap();
        assert!(matches!(top_splits_summary(&d, &ids[..3], &ds, 3), Err(Error::Argument(_))));
    }
}
