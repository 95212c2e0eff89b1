//! Regression trees grown on presorted feature lists.
//!
//! One grower serves both ensembles: each row carries a weight `w` and a
//! target sum `b`, a node scores `B^2 / (W + lambda)` and a leaf predicts
//! `B / (W + lambda)`. With `b = w y` and `lambda = 0` this is the
//! variance-reduction tree of a random forest; with unit weights and
//! residual targets it is the second-order boosting tree.

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Node {
    /// Split feature, `None` for a leaf.
    pub feature: Option<usize>,
    /// Rows with `x[feature] <= threshold` go left.
    pub threshold: f64,
    pub left: usize,
    pub right: usize,
    pub value: f64,
    /// Training weight reaching the node.
    pub cover: f64,
}

impl Node {
    pub fn leaf(value: f64, cover: f64) -> Self {
        Node { feature: None, threshold: 0.0, left: 0, right: 0, value, cover }
    }

    pub fn split(feature: usize, threshold: f64, left: usize, right: usize, cover: f64) -> Self {
        Node { feature: Some(feature), threshold, left, right, value: 0.0, cover }
    }

    pub fn is_leaf(&self) -> bool {
        self.feature.is_none()
    }
}

/// Binary tree stored as a node array, root at index 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionTree {
    pub nodes: Vec<Node>,
}

impl DecisionTree {
    pub fn predict_with<F: Fn(usize) -> f64>(&self, x: F) -> f64 {
        let mut i = 0;
        loop {
            let n = &self.nodes[i];
            match n.feature {
                None => return n.value,
                Some(f) => i = if x(f) <= n.threshold { n.left } else { n.right },
            }
        }
    }

    pub fn predict_row(&self, x: &DMatrix<f64>, row: usize) -> f64 {
        self.predict_with(|f| x[(row, f)])
    }

    pub fn predict(&self, x: &DMatrix<f64>) -> Vec<f64> {
        (0..x.nrows()).map(|i| self.predict_row(x, i)).collect()
    }

    pub fn depth(&self) -> usize {
        fn go(t: &DecisionTree, i: usize) -> usize {
            let n = &t.nodes[i];
            if n.is_leaf() {
                0
            } else {
                1 + go(t, n.left).max(go(t, n.right))
            }
        }
        go(self, 0)
    }

    pub fn n_leaves(&self) -> usize {
        self.nodes.iter().filter(|n| n.is_leaf()).count()
    }

    /// Children exist, every node is reached exactly once from the root,
    /// and covers add up.
    pub fn validate(&self) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::validation("tree has no nodes"));
        }
        let mut seen = vec![false; self.nodes.len()];
        let mut stack = vec![0usize];
        while let Some(i) = stack.pop() {
            if std::mem::replace(&mut seen[i], true) {
                return Err(Error::validation(format!("node {i} reached twice")));
            }
            let n = &self.nodes[i];
            if n.is_leaf() {
                continue;
            }
            for c in [n.left, n.right] {
                if c >= self.nodes.len() {
                    return Err(Error::validation(format!("node {i}: child {c} out of range")));
                }
                stack.push(c);
            }
            let sum = self.nodes[n.left].cover + self.nodes[n.right].cover;
            if (sum - n.cover).abs() > 1e-9 * n.cover.abs().max(1.0) {
                return Err(Error::validation(format!("node {i}: cover {} != {sum}", n.cover)));
            }
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::validation(format!("node {i} unreachable")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TreeGrowth {
    pub max_depth: Option<usize>,
    /// Minimum weight in each child.
    pub min_leaf: f64,
    pub lambda: f64,
    pub gamma: f64,
    /// Features to evaluate per split (`None` = all). Constant features do
    /// not count towards the quota.
    pub mtry: Option<usize>,
}

/// Row indices sorted by each column (ties by row index).
pub(crate) fn presort(x: &DMatrix<f64>) -> Vec<Vec<u32>> {
    (0..x.ncols())
        .map(|j| {
            let col = x.column(j);
            let mut idx: Vec<u32> = (0..x.nrows() as u32).collect();
            idx.sort_by(|&a, &b| col[a as usize].total_cmp(&col[b as usize]).then(a.cmp(&b)));
            idx
        })
        .collect()
}

struct Grower<'a, R> {
    x: &'a DMatrix<f64>,
    w: &'a [f64],
    b: &'a [f64],
    /// `p` lists of `m` rows, flat; a node owns the same range in each list.
    lists: Vec<u32>,
    m: usize,
    growth: TreeGrowth,
    rng: &'a mut R,
    nodes: Vec<Node>,
    goes_left: Vec<bool>,
    scratch: Vec<u32>,
}

struct Split {
    feature: usize,
    threshold: f64,
    gain: f64,
}

impl<R: Rng> Grower<'_, R> {
    fn score(&self, wsum: f64, bsum: f64) -> f64 {
        bsum * bsum / (wsum + self.growth.lambda)
    }

    fn best_split(&mut self, start: usize, end: usize, wsum: f64, bsum: f64) -> Option<Split> {
        let p = self.x.ncols();
        let parent = self.score(wsum, bsum);
        let quota = self.growth.mtry.unwrap_or(p).min(p);
        let mut features: Vec<usize> = (0..p).collect();
        let mut evaluated = 0;
        let mut best: Option<Split> = None;
        for k in 0..p {
            if evaluated == quota {
                break;
            }
            if self.growth.mtry.is_some() {
                let pick = self.rng.random_range(k..p);
                features.swap(k, pick);
            }
            let f = features[k];
            let list = &self.lists[f * self.m + start..f * self.m + end];
            let col = self.x.column(f);
            let (first, last) = (col[list[0] as usize], col[list[list.len() - 1] as usize]);
            if first == last {
                continue;
            }
            evaluated += 1;
            let (mut wl, mut bl) = (0.0, 0.0);
            for i in 0..list.len() - 1 {
                let r = list[i] as usize;
                wl += self.w[r];
                bl += self.b[r];
                let (xa, xb) = (col[r], col[list[i + 1] as usize]);
                if xa == xb {
                    continue;
                }
                let wr = wsum - wl;
                if wl < self.growth.min_leaf || wr < self.growth.min_leaf {
                    continue;
                }
                let gain = 0.5 * (self.score(wl, bl) + self.score(wr, bsum - bl) - parent) - self.growth.gamma;
                if best.as_ref().is_none_or(|s| gain > s.gain) {
                    let mut threshold = 0.5 * (xa + xb);
                    if threshold >= xb {
                        threshold = xa;
                    }
                    best = Some(Split { feature: f, threshold, gain });
                }
            }
        }
        best.filter(|s| s.gain > 0.0 && s.gain > 1e-12 * parent.abs())
    }

    /// Grow the subtree over `[start, end)` and return its node index.
    fn grow(&mut self, start: usize, end: usize, depth: usize) -> usize {
        let (mut wsum, mut bsum) = (0.0, 0.0);
        for &r in &self.lists[start..end] {
            wsum += self.w[r as usize];
            bsum += self.b[r as usize];
        }
        let value = bsum / (wsum + self.growth.lambda);
        let id = self.nodes.len();
        self.nodes.push(Node::leaf(value, wsum));
        let can_split = end - start >= 2
            && self.growth.max_depth.is_none_or(|d| depth < d)
            && wsum >= 2.0 * self.growth.min_leaf;
        let Some(split) = can_split.then(|| self.best_split(start, end, wsum, bsum)).flatten() else {
            return id;
        };

        let col = self.x.column(split.feature);
        let f0 = split.feature * self.m;
        let mut n_left = 0;
        for &r in &self.lists[f0 + start..f0 + end] {
            let left = col[r as usize] <= split.threshold;
            self.goes_left[r as usize] = left;
            n_left += usize::from(left);
        }
        for f in 0..self.x.ncols() {
            let range = f * self.m + start..f * self.m + end;
            self.scratch.clear();
            let list = &mut self.lists[range];
            let mut li = 0;
            for k in 0..list.len() {
                let r = list[k];
                if self.goes_left[r as usize] {
                    list[li] = r;
                    li += 1;
                } else {
                    self.scratch.push(r);
                }
            }
            list[li..].copy_from_slice(&self.scratch);
        }
        let left = self.grow(start, start + n_left, depth + 1);
        let right = self.grow(start + n_left, end, depth + 1);
        self.nodes[id] = Node::split(split.feature, split.threshold, left, right, wsum);
        self.nodes[id].value = value;
        id
    }
}

/// Grow one tree over the rows with positive weight.
///
/// `sorted` holds every column's row order from [`presort`]; `w` and `b`
/// are per-row weights and target sums.
pub(crate) fn grow_tree<R: Rng>(
    x: &DMatrix<f64>,
    sorted: &[Vec<u32>],
    w: &[f64],
    b: &[f64],
    growth: TreeGrowth,
    rng: &mut R,
) -> DecisionTree {
    let m = w.iter().filter(|&&v| v > 0.0).count();
    let mut lists = Vec::with_capacity(m * x.ncols());
    for order in sorted {
        lists.extend(order.iter().filter(|&&r| w[r as usize] > 0.0));
    }
    let mut g = Grower {
        x,
        w,
        b,
        lists,
        m,
        growth,
        rng,
        nodes: Vec::new(),
        goes_left: vec![false; x.nrows()],
        scratch: Vec::with_capacity(m),
    };
    if m == 0 {
        return DecisionTree { nodes: vec![Node::leaf(0.0, 0.0)] };
    }
    g.grow(0, m, 0);
    DecisionTree { nodes: g.nodes }
}
