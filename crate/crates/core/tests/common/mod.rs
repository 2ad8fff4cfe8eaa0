//! Slow, obviously-correct reference implementations shared by the
//! integration tests.

#![allow(dead_code)]

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Brute-force Hit/Recall/NDCG at `k`: positions are looked up per positive
/// rather than scanned per rank.
pub fn brute_metrics(ranking: &[String], positives: &[String], k: usize) -> (f64, f64, f64) {
    let pos: BTreeSet<&String> = positives.iter().collect();
    if pos.is_empty() {
        return (0.0, 0.0, 0.0);
    }
    let ranks: Vec<usize> = pos
        .iter()
        .filter_map(|p| ranking.iter().position(|x| x == *p))
        .map(|r| r + 1)
        .filter(|&r| r <= k)
        .collect();
    let hit = if ranks.is_empty() { 0.0 } else { 1.0 };
    let recall = ranks.len() as f64 / pos.len() as f64;
    let dcg: f64 = ranks.iter().map(|&r| 1.0 / (1.0 + r as f64).log2()).sum();
    let mut idcg = 0.0;
    for r in 1..=pos.len().min(k) {
        idcg += 1.0 / (1.0 + r as f64).log2();
    }
    (hit, recall, dcg / idcg)
}

/// Points as plain rows; the reference never touches the crate's tensors.
pub type Points = Vec<Vec<f32>>;

fn dist(a: &[f32], b: &[f32]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        let d = a[i] as f64 - b[i] as f64;
        s += d * d;
    }
    s.sqrt()
}

/// Full mutual-reachability matrix.
pub fn mutual_reachability(points: &Points, min_samples: usize) -> Vec<Vec<f64>> {
    let n = points.len();
    let d: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| dist(&points[i], &points[j])).collect()).collect();
    let core: Vec<f64> = d
        .iter()
        .map(|row| {
            let mut r = row.clone();
            r.sort_by(f64::total_cmp);
            r[min_samples.clamp(1, n) - 1]
        })
        .collect();
    (0..n)
        .map(|i| (0..n).map(|j| if i == j { 0.0 } else { d[i][j].max(core[i]).max(core[j]) }).collect())
        .collect()
}

/// Smallest threshold at which `set` is connected: the largest edge of its
/// minimum spanning tree (Prim over the dense matrix).
fn connect_threshold(mr: &[Vec<f64>], set: &[usize]) -> f64 {
    let m = set.len();
    let mut best = vec![f64::INFINITY; m];
    let mut done = vec![false; m];
    best[0] = 0.0;
    let mut worst: f64 = 0.0;
    for _ in 0..m {
        let mut pick = usize::MAX;
        for j in 0..m {
            if !done[j] && (pick == usize::MAX || best[j] < best[pick]) {
                pick = j;
            }
        }
        done[pick] = true;
        worst = worst.max(best[pick]);
        for j in 0..m {
            if !done[j] {
                best[j] = best[j].min(mr[set[pick]][set[j]]);
            }
        }
    }
    worst
}

/// Connected components of `set` using only edges strictly below `t`.
fn components_below(mr: &[Vec<f64>], set: &[usize], t: f64) -> Vec<Vec<usize>> {
    let mut seen = vec![false; set.len()];
    let mut out = Vec::new();
    for s in 0..set.len() {
        if seen[s] {
            continue;
        }
        seen[s] = true;
        let mut comp = vec![set[s]];
        let mut frontier = vec![s];
        while let Some(a) = frontier.pop() {
            for b in 0..set.len() {
                if !seen[b] && mr[set[a]][set[b]] < t {
                    seen[b] = true;
                    comp.push(set[b]);
                    frontier.push(b);
                }
            }
        }
        comp.sort_unstable();
        out.push(comp);
    }
    out
}

struct Node {
    members: Vec<usize>,
    stability: f64,
    children: Vec<usize>,
}

/// Grows the cluster born at `birth` with `set`, following it down through
/// shrinking thresholds until it splits or evaporates.
fn grow(mr: &[Vec<f64>], set: Vec<usize>, birth: f64, mcs: usize, nodes: &mut Vec<Node>) -> usize {
    let id = nodes.len();
    nodes.push(Node {
        members: set.clone(),
        stability: 0.0,
        children: Vec::new(),
    });
    let mut current = set;
    let mut stability = 0.0;
    loop {
        if current.len() < 2 {
            // Cannot happen with mcs >= 2, but keep the recursion total.
            break;
        }
        let t = connect_threshold(mr, &current);
        assert!(t > 0.0, "reference does not handle duplicate points");
        let lambda = 1.0 / t;
        let comps = components_below(mr, &current, t);
        let big: Vec<Vec<usize>> = comps.iter().filter(|c| c.len() >= mcs).cloned().collect();
        let small: usize = comps.iter().filter(|c| c.len() < mcs).map(Vec::len).sum();
        stability += small as f64 * (lambda - birth);
        match big.len() {
            0 => break,
            1 => current = big.into_iter().next().unwrap(),
            _ => {
                for c in big {
                    stability += c.len() as f64 * (lambda - birth);
                    let child = grow(mr, c, lambda, mcs, nodes);
                    nodes[id].children.push(child);
                }
                break;
            }
        }
    }
    nodes[id].stability = stability;
    id
}

/// Quadratic HDBSCAN: clusters are the level-set components of the
/// mutual-reachability graph, condensed by `mcs` and extracted by excess of
/// mass. Returns the clusters as sorted member lists.
pub fn brute_hdbscan(points: &Points, min_cluster_size: usize, min_samples: usize) -> Vec<Vec<usize>> {
    let n = points.len();
    let mcs = min_cluster_size.max(2);
    if n < mcs {
        return Vec::new();
    }
    let mr = mutual_reachability(points, min_samples.max(1));
    let mut nodes = Vec::new();
    let root = grow(&mr, (0..n).collect(), 0.0, mcs, &mut nodes);

    fn pick(nodes: &[Node], c: usize, out: &mut Vec<usize>) -> f64 {
        let kids: Vec<(f64, Vec<usize>)> = nodes[c]
            .children
            .iter()
            .map(|&k| {
                let mut sel = Vec::new();
                let s = pick(nodes, k, &mut sel);
                (s, sel)
            })
            .collect();
        let sum: f64 = kids.iter().map(|(s, _)| s).sum();
        if !kids.is_empty() && sum > nodes[c].stability {
            for (_, sel) in kids {
                out.extend(sel);
            }
            sum
        } else {
            out.push(c);
            nodes[c].stability
        }
    }

    let mut chosen = Vec::new();
    if nodes[root].children.is_empty() {
        chosen.push(root);
    } else {
        for &k in &nodes[root].children.clone() {
            pick(&nodes, k, &mut chosen);
        }
    }
    let mut out: Vec<Vec<usize>> = chosen.into_iter().map(|c| nodes[c].members.clone()).collect();
    out.sort();
    out
}

/// Clusters of a label vector as sorted member lists.
pub fn partition(labels: &[Option<usize>]) -> Vec<Vec<usize>> {
    let k = labels.iter().flatten().max().map_or(0, |m| m + 1);
    let mut out = vec![Vec::new(); k];
    for (i, l) in labels.iter().enumerate() {
        if let Some(l) = l {
            out[*l].push(i);
        }
    }
    out.sort();
    out
}

/// Isotropic Gaussian blobs around `centers`, `per` points each.
pub fn blobs(rng: &mut impl Rng, centers: &[Vec<f32>], per: usize, sd: f32) -> Points {
    let mut out = Vec::new();
    for c in centers {
        for _ in 0..per {
            out.push(c.iter().map(|&x| x + sd * gauss(rng)).collect());
        }
    }
    out
}

pub fn gauss(rng: &mut impl Rng) -> f32 {
    rng.sample(StandardNormal)
}

/// A random point set (n <= 100): a few blobs plus uniform background,
/// with random `(min_cluster_size, min_samples)`.
pub fn random_set(seed: u64) -> (Points, usize, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = rng.random_range(1..=4);
    let k = rng.random_range(1..=4);
    let centers: Vec<Vec<f32>> = (0..k)
        .map(|_| (0..dim).map(|_| rng.random_range(-10.0..10.0)).collect())
        .collect();
    let per = rng.random_range(3..=20);
    let sd = rng.random_range(0.2..1.5);
    let mut pts = blobs(&mut rng, &centers, per, sd);
    for _ in 0..rng.random_range(0..=20) {
        pts.push((0..dim).map(|_| rng.random_range(-12.0..12.0)).collect());
    }
    pts.truncate(100);
    let mcs = rng.random_range(2..=8);
    let ms = rng.random_range(1..=8);
    (pts, mcs, ms)
}

