//! Density-based hierarchical clustering: core distances, mutual
//! reachability, minimum spanning tree, single linkage, condensed tree and
//! excess-of-mass selection.

use serde::{Deserialize, Serialize};

use crate::tensor::Dense;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HdbscanParams {
    pub min_cluster_size: usize,
    pub min_samples: usize,
}

impl Default for HdbscanParams {
    fn default() -> Self {
        Self {
            min_cluster_size: 5,
            min_samples: 5,
        }
    }
}

/// Per-point cluster labels; `None` is noise. Labels are dense from 0 and
/// numbered by the smallest member index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Labels(pub Vec<Option<usize>>);

impl Labels {
    pub fn num_clusters(&self) -> usize {
        self.0.iter().flatten().max().map_or(0, |m| m + 1)
    }

    pub fn noise_count(&self) -> usize {
        self.0.iter().filter(|l| l.is_none()).count()
    }
}

pub fn euclidean(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = f64::from(*x) - f64::from(*y);
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

/// Distance to the `min_samples`-th nearest neighbour, the point itself
/// included (so `min_samples = 1` gives 0).
pub fn core_distances(points: &Dense, min_samples: usize) -> Vec<f64> {
    let n = points.rows();
    let k = min_samples.clamp(1, n.max(1));
    (0..n)
        .map(|i| {
            let mut d: Vec<f64> = (0..n).map(|j| euclidean(points.row(i), points.row(j))).collect();
            d.select_nth_unstable_by(k - 1, f64::total_cmp);
            d[k - 1]
        })
        .collect()
}

/// A merge of two nodes at `distance`. Leaves are `0..n`; merge `t` creates
/// node `n + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Merge {
    pub left: usize,
    pub right: usize,
    pub distance: f64,
    pub size: usize,
}

/// Prim's algorithm on the implicit complete mutual-reachability graph.
/// Returns `n - 1` edges `(a, b, weight)`.
pub fn mutual_reachability_mst(points: &Dense, core: &[f64]) -> Vec<(usize, usize, f64)> {
    let n = points.rows();
    if n < 2 {
        return Vec::new();
    }
    let mut in_tree = vec![false; n];
    let mut best = vec![f64::INFINITY; n];
    let mut parent = vec![0usize; n];
    let mut edges = Vec::with_capacity(n - 1);
    let mut cur = 0;
    in_tree[0] = true;
    for _ in 1..n {
        let mut next = usize::MAX;
        let mut next_w = f64::INFINITY;
        for j in 0..n {
            if in_tree[j] {
                continue;
            }
            let w = euclidean(points.row(cur), points.row(j)).max(core[cur]).max(core[j]);
            if w < best[j] {
                best[j] = w;
                parent[j] = cur;
            }
            if best[j] < next_w || next == usize::MAX {
                next_w = best[j];
                next = j;
            }
        }
        in_tree[next] = true;
        edges.push((parent[next], next, next_w));
        cur = next;
    }
    edges
}

struct UnionFind {
    parent: Vec<usize>,
    node: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
            node: (0..n).collect(),
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }
}

/// Single-linkage dendrogram from MST edges, merged in ascending weight.
pub fn single_linkage(n: usize, mut edges: Vec<(usize, usize, f64)>) -> Vec<Merge> {
    edges.sort_by(|a, b| {
        a.2.total_cmp(&b.2)
            .then((a.0.min(a.1), a.0.max(a.1)).cmp(&(b.0.min(b.1), b.0.max(b.1))))
    });
    let mut uf = UnionFind::new(n);
    let mut size = vec![1usize; n];
    let mut merges = Vec::with_capacity(n.saturating_sub(1));
    for (a, b, w) in edges {
        let (ra, rb) = (uf.find(a), uf.find(b));
        if ra == rb {
            continue;
        }
        let (na, nb) = (uf.node[ra], uf.node[rb]);
        let s = size[ra] + size[rb];
        uf.parent[rb] = ra;
        size[ra] = s;
        uf.node[ra] = n + merges.len();
        merges.push(Merge {
            left: na.min(nb),
            right: na.max(nb),
            distance: w,
            size: s,
        });
    }
    merges
}

/// One cluster of the condensed tree.
#[derive(Debug, Clone, PartialEq)]
pub struct CondensedCluster {
    pub parent: Option<usize>,
    pub lambda_birth: f64,
    /// Points that leave this cluster directly, with their exit λ.
    pub points: Vec<(usize, f64)>,
    pub children: Vec<usize>,
    /// λ at which the children split off (valid when `children` is non-empty).
    pub lambda_split: f64,
}

impl CondensedCluster {
    pub fn stability(&self, tree: &[CondensedCluster]) -> f64 {
        let own: f64 = self.points.iter().map(|(_, l)| l - self.lambda_birth).sum();
        let kids: f64 = self
            .children
            .iter()
            .map(|&c| (self.lambda_split - self.lambda_birth) * tree[c].size(tree) as f64)
            .sum();
        own + kids
    }

    pub fn size(&self, tree: &[CondensedCluster]) -> usize {
        self.points.len() + self.children.iter().map(|&c| tree[c].size(tree)).sum::<usize>()
    }
}

/// λ for a merge distance. Zero distances map to twice the largest finite λ
/// so duplicates stay finite and keep their relative order.
fn lambda_of(d: f64, zero_lambda: f64) -> f64 {
    if d > 0.0 {
        1.0 / d
    } else {
        zero_lambda
    }
}

/// Condenses the dendrogram: a split counts only when at least two of the
/// components below the merge distance have `min_cluster_size` points and
/// the distance is positive.
pub fn condense(n: usize, merges: &[Merge], min_cluster_size: usize) -> Vec<CondensedCluster> {
    if n == 0 {
        return Vec::new();
    }
    let max_finite = merges
        .iter()
        .filter(|m| m.distance > 0.0)
        .map(|m| 1.0 / m.distance)
        .fold(0.0f64, f64::max);
    let zero_lambda = if max_finite > 0.0 { 2.0 * max_finite } else { 1.0 };
    let size_of = |node: usize| if node < n { 1 } else { merges[node - n].size };

    let mut tree = vec![CondensedCluster {
        parent: None,
        lambda_birth: 0.0,
        points: Vec::new(),
        children: Vec::new(),
        lambda_split: 0.0,
    }];
    if n == 1 {
        tree[0].points.push((0, zero_lambda));
        return tree;
    }
    // (dendrogram node, owning condensed cluster)
    let mut stack = vec![(n + merges.len() - 1, 0usize)];
    while let Some((node, cluster)) = stack.pop() {
        if node < n {
            // A single point that is a cluster of its own never leaves it.
            let birth = tree[cluster].lambda_birth;
            tree[cluster].points.push((node, birth));
            continue;
        }
        let m = merges[node - n];
        let lambda = lambda_of(m.distance, zero_lambda);
        let parts = tie_parts(node, n, merges);
        let big = parts.iter().filter(|&&p| size_of(p) >= min_cluster_size).count();
        if big >= 2 && m.distance > 0.0 {
            tree[cluster].lambda_split = lambda;
            for &part in &parts {
                if size_of(part) < min_cluster_size {
                    for p in leaves(part, n, merges) {
                        tree[cluster].points.push((p, lambda));
                    }
                    continue;
                }
                let id = tree.len();
                tree.push(CondensedCluster {
                    parent: Some(cluster),
                    lambda_birth: lambda,
                    points: Vec::new(),
                    children: Vec::new(),
                    lambda_split: 0.0,
                });
                tree[cluster].children.push(id);
                stack.push((part, id));
            }
            continue;
        }
        for part in parts {
            if size_of(part) >= min_cluster_size {
                // Continuation of the same cluster.
                if part < n {
                    tree[cluster].points.push((part, lambda));
                } else {
                    stack.push((part, cluster));
                }
            } else {
                for p in leaves(part, n, merges) {
                    tree[cluster].points.push((p, lambda));
                }
            }
        }
    }
    tree
}

/// The components a merge node splits into once all merges at its exact
/// distance are applied together, so tied distances split simultaneously
/// and the result does not depend on the order ties were linked in.
fn tie_parts(node: usize, n: usize, merges: &[Merge]) -> Vec<usize> {
    let d = merges[node - n].distance;
    let mut out = Vec::new();
    let mut stack = vec![node];
    while let Some(x) = stack.pop() {
        if x >= n && merges[x - n].distance == d {
            stack.push(merges[x - n].right);
            stack.push(merges[x - n].left);
        } else {
            out.push(x);
        }
    }
    out
}

fn leaves(node: usize, n: usize, merges: &[Merge]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut stack = vec![node];
    while let Some(x) = stack.pop() {
        if x < n {
            out.push(x);
        } else {
            let m = merges[x - n];
            stack.push(m.left);
            stack.push(m.right);
        }
    }
    out
}

/// Excess-of-mass selection. The root is a candidate only when it never
/// splits and holds at least `min_cluster_size` points.
pub fn select_eom(tree: &[CondensedCluster], n: usize, min_cluster_size: usize) -> Vec<usize> {
    if tree.is_empty() {
        return Vec::new();
    }
    let stab: Vec<f64> = tree.iter().map(|c| c.stability(tree)).collect();
    let mut best = stab.clone();
    let mut selected = vec![false; tree.len()];
    // Children always have larger ids than their parent.
    for c in (1..tree.len()).rev() {
        let child_sum: f64 = tree[c].children.iter().map(|&k| best[k]).sum();
        if !tree[c].children.is_empty() && child_sum > stab[c] {
            best[c] = child_sum;
        } else {
            selected[c] = true;
            best[c] = stab[c];
        }
    }
    if tree[0].children.is_empty() && n >= min_cluster_size {
        selected[0] = true;
    }
    // Keep only the outermost selected clusters.
    let mut out = Vec::new();
    let mut stack = vec![0usize];
    while let Some(c) = stack.pop() {
        if selected[c] {
            out.push(c);
        } else {
            stack.extend(tree[c].children.iter().copied());
        }
    }
    out.sort_unstable();
    out
}

fn members(tree: &[CondensedCluster], c: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut stack = vec![c];
    while let Some(x) = stack.pop() {
        out.extend(tree[x].points.iter().map(|&(p, _)| p));
        stack.extend(tree[x].children.iter().copied());
    }
    out
}

/// Labels each point; points outside every selected cluster are noise.
/// `min_cluster_size` below 2 is treated as 2.
pub fn hdbscan(points: &Dense, params: HdbscanParams) -> Labels {
    let n = points.rows();
    let mcs = params.min_cluster_size.max(2);
    if n == 0 {
        return Labels(Vec::new());
    }
    if n < mcs {
        return Labels(vec![None; n]);
    }
    let core = core_distances(points, params.min_samples.max(1));
    let mst = mutual_reachability_mst(points, &core);
    let merges = single_linkage(n, mst);
    let tree = condense(n, &merges, mcs);
    labels_from_tree(&tree, &select_eom(&tree, n, mcs), n)
}

pub fn labels_from_tree(tree: &[CondensedCluster], selected: &[usize], n: usize) -> Labels {
    let mut groups: Vec<Vec<usize>> = selected.iter().map(|&c| members(tree, c)).collect();
    for g in &mut groups {
        g.sort_unstable();
    }
    groups.sort_by_key(|g| g.first().copied());
    let mut labels = vec![None; n];
    for (k, g) in groups.iter().enumerate() {
        for &p in g {
            labels[p] = Some(k);
        }
    }
    Labels(labels)
}
