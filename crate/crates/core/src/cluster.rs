//! Hierarchical 2-means clustering of positives and nested, tree-consistent
//! subsampling of the resulting clusters.

use std::collections::BTreeMap;

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const KMEANS_MAX_ITER: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterNode {
    pub members: Vec<usize>,
    pub depth: usize,
    pub children: Option<(usize, usize)>,
}

/// Binary hierarchy over example ids; node 0 is the root.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterTree {
    pub nodes: Vec<ClusterNode>,
    /// Requested depth; leaves that could not be split sit higher up.
    pub depth: usize,
}

impl ClusterTree {
    /// Nodes forming the `2^level`-cluster partition, left to right. A leaf
    /// that stopped early stands in for all deeper levels.
    pub fn partition_at(&self, level: usize) -> Vec<usize> {
        let mut out = Vec::new();
        let mut stack = vec![0];
        while let Some(n) = stack.pop() {
            let node = &self.nodes[n];
            match node.children {
                Some((a, b)) if node.depth < level => {
                    stack.push(b);
                    stack.push(a);
                }
                _ => out.push(n),
            }
        }
        out
    }

    /// Member sets of the finest partition.
    pub fn leaves(&self) -> Vec<Vec<usize>> {
        self.partition_at(self.depth)
            .into_iter()
            .map(|n| self.nodes[n].members.clone())
            .collect()
    }

    /// For each finest-level leaf, its ancestor index within `partition_at(level)`.
    fn leaf_groups(&self, level: usize) -> Vec<usize> {
        let coarse = self.partition_at(level);
        let mut owner = vec![usize::MAX; self.nodes.len()];
        for (g, &n) in coarse.iter().enumerate() {
            let mut stack = vec![n];
            while let Some(m) = stack.pop() {
                owner[m] = g;
                if let Some((a, b)) = self.nodes[m].children {
                    stack.push(a);
                    stack.push(b);
                }
            }
        }
        self.partition_at(self.depth).iter().map(|&n| owner[n]).collect()
    }

    /// Builds a tree whose finest partition is `groups` (in order), joined
    /// pairwise level by level up to a single root.
    pub fn from_groups(groups: Vec<Vec<usize>>) -> Result<Self> {
        if groups.is_empty() {
            return Err(Error::Validation("no groups to build a tree from".into()));
        }
        let depth = (groups.len() as f64).log2().ceil() as usize;
        let mut nodes: Vec<ClusterNode> = Vec::new();
        // build bottom-up, then renumber so that the root is node 0
        let mut level: Vec<usize> = groups
            .into_iter()
            .map(|members| {
                nodes.push(ClusterNode {
                    members,
                    depth: 0,
                    children: None,
                });
                nodes.len() - 1
            })
            .collect();
        while level.len() > 1 {
            let mut next = Vec::new();
            for pair in level.chunks(2) {
                if let [a, b] = *pair {
                    let mut members = nodes[a].members.clone();
                    members.extend(&nodes[b].members);
                    members.sort_unstable();
                    nodes.push(ClusterNode {
                        members,
                        depth: 0,
                        children: Some((a, b)),
                    });
                    next.push(nodes.len() - 1);
                } else {
                    next.push(pair[0]);
                }
            }
            level = next;
        }
        let root = level[0];
        let mut order = Vec::new();
        let mut stack = vec![(root, 0)];
        let mut remap = vec![0; nodes.len()];
        let mut depths = vec![0; nodes.len()];
        while let Some((n, d)) = stack.pop() {
            remap[n] = order.len();
            depths[n] = d;
            order.push(n);
            if let Some((a, b)) = nodes[n].children {
                stack.push((b, d + 1));
                stack.push((a, d + 1));
            }
        }
        let out = order
            .iter()
            .map(|&n| ClusterNode {
                members: nodes[n].members.clone(),
                depth: depths[n],
                children: nodes[n].children.map(|(a, b)| (remap[a], remap[b])),
            })
            .collect();
        Ok(Self { nodes: out, depth })
    }
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// 2-means with k-means++ seeding. Returns `None` when the members cannot be
/// split into two nonempty groups.
fn two_means(points: &[Vec<f64>], members: &[usize], rng: &mut ChaCha8Rng) -> Option<(Vec<usize>, Vec<usize>)> {
    if members.len() < 2 {
        return None;
    }
    let first = members[rng.gen_range(0..members.len())];
    let d2: Vec<f64> = members.iter().map(|&m| dist2(&points[m], &points[first])).collect();
    if d2.iter().all(|&d| d == 0.0) {
        return None;
    }
    let second = members[WeightedIndex::new(&d2).ok()?.sample(rng)];
    let mut centers = [points[first].clone(), points[second].clone()];
    let mut assign = vec![usize::MAX; members.len()];
    for _ in 0..KMEANS_MAX_ITER {
        let mut changed = false;
        for (k, &m) in members.iter().enumerate() {
            let a = usize::from(dist2(&points[m], &centers[1]) < dist2(&points[m], &centers[0]));
            if assign[k] != a {
                assign[k] = a;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        for (c, center) in centers.iter_mut().enumerate() {
            let group: Vec<usize> = members
                .iter()
                .zip(&assign)
                .filter(|(_, &a)| a == c)
                .map(|(&m, _)| m)
                .collect();
            if group.is_empty() {
                return None;
            }
            for (d, v) in center.iter_mut().enumerate() {
                *v = group.iter().map(|&m| points[m][d]).sum::<f64>() / group.len() as f64;
            }
        }
    }
    let left: Vec<usize> = members.iter().zip(&assign).filter(|(_, &a)| a == 0).map(|(&m, _)| m).collect();
    let right: Vec<usize> = members.iter().zip(&assign).filter(|(_, &a)| a == 1).map(|(&m, _)| m).collect();
    (!left.is_empty() && !right.is_empty()).then_some((left, right))
}

/// Recursively splits the examples with 2-means down to `depth` levels.
pub fn hierarchical_kmeans(descriptors: &[Vec<f64>], depth: usize, seed: u64) -> Result<ClusterTree> {
    if descriptors.len() < 1 << depth {
        return Err(Error::Size(format!(
            "{} descriptors cannot fill {} clusters",
            descriptors.len(),
            1usize << depth
        )));
    }
    let mut nodes = vec![ClusterNode {
        members: (0..descriptors.len()).collect(),
        depth: 0,
        children: None,
    }];
    let mut i = 0;
    while i < nodes.len() {
        if nodes[i].depth < depth {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (i as u64).wrapping_mul(0x2545_F491_4F6C_DD1D));
            match two_means(descriptors, &nodes[i].members, &mut rng) {
                Some((left, right)) => {
                    let d = nodes[i].depth + 1;
                    let a = nodes.len();
                    nodes.push(ClusterNode { members: left, depth: d, children: None });
                    nodes.push(ClusterNode { members: right, depth: d, children: None });
                    nodes[i].children = Some((a, a + 1));
                }
                None => log::debug!(
                    "cluster node {i} ({} members) could not be split; kept as a short leaf",
                    nodes[i].members.len()
                ),
            }
        }
        i += 1;
    }
    Ok(ClusterTree { nodes, depth })
}

/// One subsampled level: clusters `C_n^(i)` with `N_n` examples in total.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampledPartition {
    pub level_n: usize,
    #[serde(rename = "N")]
    pub n: usize,
    pub clusters: Vec<Vec<usize>>,
}

/// Nested subsampling of leaf clusters. `sizes[0]` must equal the total
/// number of examples and sizes must strictly decrease. Each draw picks
/// cluster `z` with probability proportional to its size at the previous
/// level and then takes one of that cluster's remaining examples uniformly.
pub fn partitioned_sample(leaves: &[Vec<usize>], sizes: &[usize], seed: u64) -> Result<Vec<SampledPartition>> {
    let total: usize = leaves.iter().map(Vec::len).sum();
    let Some(&n0) = sizes.first() else {
        return Err(Error::Validation("no sample sizes given".into()));
    };
    if n0 != total {
        return Err(Error::Validation(format!(
            "first size {n0} must equal the {total} clustered examples"
        )));
    }
    if let Some(w) = sizes.windows(2).find(|w| w[1] >= w[0]) {
        return Err(Error::Ordering(format!(
            "sample sizes must strictly decrease, got {} then {}",
            w[0], w[1]
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![SampledPartition {
        level_n: 0,
        n: n0,
        clusters: leaves
            .iter()
            .map(|c| {
                let mut c = c.clone();
                c.sort_unstable();
                c
            })
            .collect(),
    }];
    for (n, &size) in sizes.iter().enumerate().skip(1) {
        let prev = &out[n - 1].clusters;
        let mut pools: Vec<Vec<usize>> = prev.clone();
        let mut next: Vec<Vec<usize>> = vec![Vec::new(); prev.len()];
        let weights: Vec<f64> = prev.iter().map(|c| c.len() as f64).collect();
        for _ in 0..size {
            // clusters whose pool ran dry are excluded from the draw
            let live: Vec<f64> = weights
                .iter()
                .zip(&pools)
                .map(|(&w, p)| if p.is_empty() { 0.0 } else { w })
                .collect();
            let z = WeightedIndex::new(&live)
                .map_err(|e| Error::Validation(format!("sampling weights: {e}")))?
                .sample(&mut rng);
            let k = rng.gen_range(0..pools[z].len());
            next[z].push(pools[z].swap_remove(k));
        }
        for c in &mut next {
            c.sort_unstable();
        }
        out.push(SampledPartition {
            level_n: n,
            n: size,
            clusters: next,
        });
    }
    Ok(out)
}

/// Training sets indexed by `(K, N)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsistentSets {
    pub sets: BTreeMap<(usize, usize), Vec<Vec<usize>>>,
}

impl ConsistentSets {
    pub fn get(&self, k: usize, n: usize) -> Option<&Vec<Vec<usize>>> {
        self.sets.get(&(k, n))
    }
}

/// Groups sampled leaf sets up the tree: the `K = 2^l` clustering at size
/// `N_n` is the union of sampled leaves under each level-`l` node. Empty
/// groups are kept so that cluster indices stay aligned across `N`.
pub fn refine_consistency(tree: &ClusterTree, partitions: &[SampledPartition]) -> Result<ConsistentSets> {
    let leaves = tree.leaves();
    for p in partitions {
        if p.clusters.len() != leaves.len() {
            return Err(Error::Provenance(format!(
                "partition at N={} has {} clusters, tree has {} leaves",
                p.n,
                p.clusters.len(),
                leaves.len()
            )));
        }
        for (i, (c, leaf)) in p.clusters.iter().zip(&leaves).enumerate() {
            let mut sorted = leaf.clone();
            sorted.sort_unstable();
            if let Some(id) = c.iter().find(|id| sorted.binary_search(id).is_err()) {
                return Err(Error::Provenance(format!(
                    "example {id} in sampled cluster {i} is not in tree leaf {i}"
                )));
            }
        }
    }
    let mut sets = BTreeMap::new();
    for level in 0..=tree.depth {
        let groups = tree.leaf_groups(level);
        let k = 1usize << level;
        let n_groups = groups.iter().max().map_or(0, |g| g + 1);
        for p in partitions {
            let mut out = vec![Vec::new(); n_groups];
            for (leaf, c) in p.clusters.iter().enumerate() {
                out[groups[leaf]].extend_from_slice(c);
            }
            for c in &mut out {
                c.sort_unstable();
            }
            sets.insert((k, p.n), out);
        }
    }
    Ok(ConsistentSets { sets })
}

/// Replaces the leaves of `tree` with human-chosen groups of leaf indices.
pub fn merge_clusters(tree: &ClusterTree, merge_map: &[Vec<usize>]) -> Result<ClusterTree> {
    let leaves = tree.leaves();
    let mut seen = vec![false; leaves.len()];
    for g in merge_map {
        if g.is_empty() {
            return Err(Error::Validation("empty merge group".into()));
        }
        for &l in g {
            if l >= leaves.len() || std::mem::replace(&mut seen[l], true) {
                return Err(Error::Validation(format!(
                    "merge map is not a partition: leaf {l} out of range or repeated"
                )));
            }
        }
    }
    if let Some(l) = seen.iter().position(|s| !s) {
        return Err(Error::Validation(format!("merge map omits leaf {l}")));
    }
    let groups = merge_map
        .iter()
        .map(|g| {
            let mut m: Vec<usize> = g.iter().flat_map(|&l| leaves[l].iter().copied()).collect();
            m.sort_unstable();
            m
        })
        .collect();
    ClusterTree::from_groups(groups)
}

/// JSON form of one resampling run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionFile {
    pub seed: u64,
    pub sizes: Vec<usize>,
    pub levels: Vec<PartitionLevel>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionLevel {
    #[serde(rename = "N")]
    pub n: usize,
    pub clusters: Vec<Vec<usize>>,
}

impl PartitionFile {
    pub fn new(seed: u64, sizes: &[usize], partitions: &[SampledPartition]) -> Self {
        Self {
            seed,
            sizes: sizes.to_vec(),
            levels: partitions
                .iter()
                .map(|p| PartitionLevel {
                    n: p.n,
                    clusters: p.clusters.clone(),
                })
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::Normal;

    fn blobs(rng: &mut ChaCha8Rng, centers: &[[f64; 2]], per: usize, sd: f64) -> Vec<Vec<f64>> {
        let n = Normal::new(0.0, sd).unwrap();
        centers
            .iter()
            .flat_map(|c| (0..per).map(|_| vec![c[0] + n.sample(rng), c[1] + n.sample(rng)]).collect::<Vec<_>>())
            .collect()
    }

    #[test]
    fn depth_zero_is_root() {
        let pts = vec![vec![0.0], vec![1.0]];
        let t = hierarchical_kmeans(&pts, 0, 1).unwrap();
        assert_eq!(t.leaves(), vec![vec![0, 1]]);
        assert!(hierarchical_kmeans(&pts, 2, 1).is_err());
    }

    #[test]
    fn separated_blobs_split_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let centers = [[0.0, 0.0], [10.0, 10.0]];
        let pts = blobs(&mut rng, &centers, 30, 1.0);
        let t = hierarchical_kmeans(&pts, 1, 3).unwrap();
        let leaves = t.leaves();
        assert_eq!(leaves.len(), 2);
        for leaf in &leaves {
            // oracle: label each point by its nearest true centre
            let label = |i: usize| usize::from(dist2(&pts[i], &centers[1]) < dist2(&pts[i], &centers[0]));
            assert!(leaf.iter().all(|&i| label(i) == label(leaf[0])));
        }
    }

    #[test]
    fn depth_four_partitions_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pts: Vec<Vec<f64>> = (0..100).map(|_| vec![rng.gen(), rng.gen(), rng.gen()]).collect();
        let t = hierarchical_kmeans(&pts, 4, 5).unwrap();
        let mut all: Vec<usize> = t.leaves().into_iter().flatten().collect();
        assert!(t.leaves().len() <= 16);
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        for n in &t.nodes {
            if let Some((a, b)) = n.children {
                let mut u = t.nodes[a].members.clone();
                u.extend(&t.nodes[b].members);
                u.sort_unstable();
                let mut m = n.members.clone();
                m.sort_unstable();
                assert_eq!(u, m);
            }
        }
        assert_eq!(t, hierarchical_kmeans(&pts, 4, 5).unwrap());
    }

    #[test]
    fn identical_points_make_short_leaves() {
        let pts = vec![vec![1.0]; 8];
        let t = hierarchical_kmeans(&pts, 3, 0).unwrap();
        assert_eq!(t.leaves().len(), 1);
        assert_eq!(t.partition_at(3), vec![0]);
    }

    #[test]
    fn single_size_is_identity_and_order_is_checked() {
        let leaves = vec![vec![3, 1], vec![0, 2, 4]];
        let p = partitioned_sample(&leaves, &[5], 1).unwrap();
        assert_eq!(p[0].clusters, vec![vec![1, 3], vec![0, 2, 4]]);
        assert!(matches!(partitioned_sample(&leaves, &[5, 3, 4], 1), Err(Error::Ordering(_))));
        assert!(partitioned_sample(&leaves, &[4], 1).is_err());
    }

    #[test]
    fn proportional_cluster_sizes() {
        // oracle: direct Monte-Carlo of the pick-cluster / draw-member steps
        let leaves = vec![(0..80).collect::<Vec<_>>(), (80..100).collect()];
        let runs = 10_000;
        let mut sum = [0.0f64; 2];
        let mut oracle = [0.0f64; 2];
        let mut orng = ChaCha8Rng::seed_from_u64(999);
        for s in 0..runs {
            let p = partitioned_sample(&leaves, &[100, 50], s).unwrap();
            sum[0] += p[1].clusters[0].len() as f64;
            sum[1] += p[1].clusters[1].len() as f64;
            let mut left = [80usize, 20];
            let mut got = [0usize; 2];
            for _ in 0..50 {
                let w = [if left[0] > 0 { 80.0 } else { 0.0 }, if left[1] > 0 { 20.0 } else { 0.0 }];
                let z = usize::from(orng.gen::<f64>() * (w[0] + w[1]) >= w[0]);
                left[z] -= 1;
                got[z] += 1;
            }
            oracle[0] += got[0] as f64;
            oracle[1] += got[1] as f64;
        }
        let sigma = (50.0f64 * 0.2 * 0.8).sqrt() / (runs as f64).sqrt();
        for (i, target) in [40.0, 10.0].iter().enumerate() {
            assert!((sum[i] / runs as f64 - target).abs() < 3.0 * sigma);
            assert!((oracle[i] / runs as f64 - target).abs() < 3.0 * sigma);
        }
    }

    #[test]
    fn nesting_and_refinement() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts = blobs(&mut rng, &[[0.0, 0.0], [5.0, 0.0], [0.0, 5.0], [5.0, 5.0]], 25, 1.0);
        let tree = hierarchical_kmeans(&pts, 2, 7).unwrap();
        let sizes = [100, 60, 30, 10];
        for seed in 0..100 {
            let parts = partitioned_sample(&tree.leaves(), &sizes, seed).unwrap();
            for w in parts.windows(2) {
                for (small, big) in w[1].clusters.iter().zip(&w[0].clusters) {
                    assert!(small.iter().all(|id| big.contains(id)));
                }
            }
            let sets = refine_consistency(&tree, &parts).unwrap();
            for &n in &sizes {
                for k in [1, 2, 4] {
                    let groups = sets.get(k, n).unwrap();
                    assert_eq!(groups.iter().map(Vec::len).sum::<usize>(), n);
                    if k > 1 {
                        for g in groups {
                            let owners = sets
                                .get(k / 2, n)
                                .unwrap()
                                .iter()
                                .filter(|h| g.iter().all(|id| h.contains(id)))
                                .count();
                            assert!(owners >= 1);
                        }
                    }
                }
                let all = &sets.get(1, n).unwrap()[0];
                assert_eq!(all.len(), n);
            }
        }
    }

    #[test]
    fn foreign_partition_is_provenance_error() {
        let tree = ClusterTree::from_groups(vec![vec![0, 1], vec![2, 3]]).unwrap();
        let bad = vec![SampledPartition { level_n: 0, n: 2, clusters: vec![vec![2], vec![0]] }];
        assert!(matches!(refine_consistency(&tree, &bad), Err(Error::Provenance(_))));
    }

    #[test]
    fn merging() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pts: Vec<Vec<f64>> = (0..64).map(|_| vec![rng.gen(), rng.gen()]).collect();
        let tree = hierarchical_kmeans(&pts, 2, 1).unwrap();
        let n = tree.leaves().len();
        let same = merge_clusters(&tree, &(0..n).map(|i| vec![i]).collect::<Vec<_>>()).unwrap();
        for level in 0..=2 {
            let a: Vec<_> = tree.partition_at(level).iter().map(|&i| tree.nodes[i].members.iter().copied().collect::<std::collections::BTreeSet<_>>()).collect();
            let b: Vec<_> = same.partition_at(level).iter().map(|&i| same.nodes[i].members.iter().copied().collect::<std::collections::BTreeSet<_>>()).collect();
            assert_eq!(a, b);
        }
        let one = merge_clusters(&tree, &[(0..n).collect()]).unwrap();
        assert_eq!(one.leaves().len(), 1);
        let pairs = merge_clusters(&tree, &[vec![0, 1], vec![2, 3]]).unwrap();
        assert_eq!(pairs.leaves().len(), 2);
        assert_eq!(pairs.leaves().iter().map(Vec::len).sum::<usize>(), 64);
        assert!(merge_clusters(&tree, &[vec![0, 1], vec![1, 2, 3]]).is_err());
        assert!(merge_clusters(&tree, &[vec![0, 1]]).is_err());
    }

    #[test]
    fn partition_json_round_trip() {
        let parts = partitioned_sample(&[vec![0, 1, 2], vec![3]], &[4, 2], 9).unwrap();
        let f = PartitionFile::new(9, &[4, 2], &parts);
        let s = serde_json::to_string(&f).unwrap();
        assert!(s.contains("\"N\":4"));
        assert_eq!(serde_json::from_str::<PartitionFile>(&s).unwrap(), f);
    }
}
