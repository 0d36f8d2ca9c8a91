//! Gradient-boosted regression trees on squared error, with level-wise or
//! leaf-wise (best-first) growth, and a weighted pair of two boosters.

use std::fs;
use std::path::Path;

use ndarray::{ArrayView1, ArrayView2};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ensembles::{apply_cutpoints, CutPoints};
use crate::error::{Error, Result};
use crate::metrics::{qwk, SCORE_CATEGORIES};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Growth {
    /// Split every splittable node of a level before descending.
    LevelWise,
    /// Always split the leaf with the largest gain next.
    LeafWise,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BoosterConfig {
    pub growth: Growth,
    pub rounds: usize,
    pub max_depth: usize,
    /// Leaf budget for leaf-wise growth; ignored by level-wise growth.
    pub max_leaves: usize,
    pub learning_rate: f64,
    /// Fraction of rows drawn (without replacement) to choose each tree's splits.
    pub subsample: f64,
    pub min_samples_leaf: usize,
    /// L2 penalty on leaf values.
    pub lambda: f64,
    pub seed: u64,
}

impl Default for BoosterConfig {
    fn default() -> Self {
        Self::level_wise()
    }
}

impl BoosterConfig {
    pub fn level_wise() -> Self {
        BoosterConfig {
            growth: Growth::LevelWise,
            rounds: 500,
            max_depth: 6,
            max_leaves: 64,
            learning_rate: 0.05,
            subsample: 0.8,
            min_samples_leaf: 1,
            lambda: 1.0,
            seed: 0,
        }
    }

    pub fn leaf_wise() -> Self {
        BoosterConfig {
            growth: Growth::LeafWise,
            max_depth: 16,
            max_leaves: 31,
            ..Self::level_wise()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.learning_rate) {
            return Err(Error::Precondition("learning_rate must lie in [0, 1]".into()));
        }
        if !(self.subsample > 0.0 && self.subsample <= 1.0) {
            return Err(Error::Precondition("subsample must lie in (0, 1]".into()));
        }
        if self.lambda < 0.0 || !self.lambda.is_finite() {
            return Err(Error::Precondition("lambda must be finite and >= 0".into()));
        }
        if self.max_leaves == 0 {
            return Err(Error::Precondition("max_leaves must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Node {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        value: f64,
    },
}

/// Rows with `x[feature] <= threshold` go left.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    fn leaf_of(&self, x: ArrayView1<f64>) -> usize {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                Node::Leaf { .. } => return i,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => i = if x[*feature] <= *threshold { *left } else { *right },
            }
        }
    }

    pub fn predict(&self, x: ArrayView1<f64>) -> f64 {
        match self.nodes[self.leaf_of(x)] {
            Node::Leaf { value } => value,
            Node::Split { .. } => unreachable!(),
        }
    }

    pub fn leaf_count(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, Node::Leaf { .. })).count()
    }

    pub fn depth(&self) -> usize {
        fn go(nodes: &[Node], i: usize) -> usize {
            match &nodes[i] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + go(nodes, *left).max(go(nodes, *right)),
            }
        }
        go(&self.nodes, 0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoosterModel {
    pub config: BoosterConfig,
    pub n_features: usize,
    pub base_score: f64,
    pub trees: Vec<Tree>,
    /// Training MSE after the base score and after each round.
    pub train_mse: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
struct SplitChoice {
    feature: usize,
    threshold: f64,
    gain: f64,
}

/// Best squared-error split of `rows` (a subset of sample rows), scanning each
/// feature in sorted order.
fn best_split(
    x: ArrayView2<f64>,
    residual: &[f64],
    rows: &[usize],
    min_leaf: usize,
) -> Option<SplitChoice> {
    let n = rows.len();
    if n < 2 * min_leaf.max(1) {
        return None;
    }
    let total: f64 = rows.iter().map(|&r| residual[r]).sum();
    let parent = total * total / n as f64;
    let mut best: Option<SplitChoice> = None;
    let mut sorted = rows.to_vec();
    for f in 0..x.ncols() {
        sorted.sort_by(|&a, &b| x[[a, f]].total_cmp(&x[[b, f]]).then(a.cmp(&b)));
        let mut left = 0.0;
        for k in 0..n - 1 {
            left += residual[sorted[k]];
            let (lo, hi) = (x[[sorted[k], f]], x[[sorted[k + 1], f]]);
            let nl = k + 1;
            if lo == hi || nl < min_leaf || n - nl < min_leaf {
                continue;
            }
            let right = total - left;
            let gain = left * left / nl as f64 + right * right / (n - nl) as f64 - parent;
            if gain > 1e-12 && best.map_or(true, |b| gain > b.gain) {
                let mut threshold = lo + (hi - lo) / 2.0;
                if threshold >= hi {
                    threshold = lo;
                }
                best = Some(SplitChoice {
                    feature: f,
                    threshold,
                    gain,
                });
            }
        }
    }
    best
}

struct Grower<'a> {
    x: ArrayView2<'a, f64>,
    residual: &'a [f64],
    cfg: &'a BoosterConfig,
    nodes: Vec<Node>,
}

impl<'a> Grower<'a> {
    fn partition(&self, rows: &[usize], s: SplitChoice) -> (Vec<usize>, Vec<usize>) {
        rows.iter().copied().partition(|&r| self.x[[r, s.feature]] <= s.threshold)
    }

    fn make_split(&mut self, at: usize, s: SplitChoice) -> (usize, usize) {
        let left = self.nodes.len();
        self.nodes.push(Node::Leaf { value: 0.0 });
        self.nodes.push(Node::Leaf { value: 0.0 });
        self.nodes[at] = Node::Split {
            feature: s.feature,
            threshold: s.threshold,
            left,
            right: left + 1,
        };
        (left, left + 1)
    }

    fn grow(mut self, rows: Vec<usize>) -> Tree {
        self.nodes.push(Node::Leaf { value: 0.0 });
        let min_leaf = self.cfg.min_samples_leaf;
        match self.cfg.growth {
            Growth::LevelWise => {
                let mut frontier = vec![(0usize, rows)];
                for _ in 0..self.cfg.max_depth {
                    let mut next = Vec::new();
                    for (node, rs) in frontier {
                        if let Some(s) = best_split(self.x, self.residual, &rs, min_leaf) {
                            let (l, r) = self.make_split(node, s);
                            let (lr, rr) = self.partition(&rs, s);
                            next.push((l, lr));
                            next.push((r, rr));
                        }
                    }
                    if next.is_empty() {
                        break;
                    }
                    frontier = next;
                }
            }
            Growth::LeafWise => {
                // (node, rows, depth, candidate split)
                let mut open: Vec<(usize, Vec<usize>, usize, Option<SplitChoice>)> = Vec::new();
                let root_split = if self.cfg.max_depth > 0 {
                    best_split(self.x, self.residual, &rows, min_leaf)
                } else {
                    None
                };
                open.push((0, rows, 0, root_split));
                let mut leaves = 1;
                while leaves < self.cfg.max_leaves {
                    let pick = open
                        .iter()
                        .enumerate()
                        .filter_map(|(i, o)| o.3.map(|s| (i, s.gain)))
                        .fold(None, |acc: Option<(usize, f64)>, (i, g)| match acc {
                            Some((_, bg)) if bg >= g => acc,
                            _ => Some((i, g)),
                        });
                    let Some((i, _)) = pick else { break };
                    let (node, rs, depth, split) = open.swap_remove(i);
                    let s = split.unwrap();
                    let (l, r) = self.make_split(node, s);
                    let (lr, rr) = self.partition(&rs, s);
                    for (child, crs) in [(l, lr), (r, rr)] {
                        let cand = if depth + 1 < self.cfg.max_depth {
                            best_split(self.x, self.residual, &crs, min_leaf)
                        } else {
                            None
                        };
                        open.push((child, crs, depth + 1, cand));
                    }
                    leaves += 1;
                }
            }
        }
        Tree { nodes: self.nodes }
    }
}

fn mse(pred: &[f64], y: &[f64]) -> f64 {
    pred.iter().zip(y).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / y.len() as f64
}

/// Fits `config.rounds` trees to squared-error residuals. Each tree's splits
/// are chosen on a row subsample; its leaf values are then set from all rows
/// reaching each leaf (mean residual shrunk by `lambda`, times the learning
/// rate), so no round can increase training MSE.
pub fn train_booster(x: ArrayView2<f64>, y: &[f64], config: &BoosterConfig) -> Result<BoosterModel> {
    config.validate()?;
    let n = x.nrows();
    if y.len() != n {
        return Err(Error::DimensionMismatch { expected: n, got: y.len() });
    }
    if n < 2 {
        return Err(Error::Precondition("boosting needs at least 2 rows".into()));
    }
    if x.iter().any(|v| !v.is_finite()) || y.iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation("non-finite value in training data".into()));
    }
    let base_score = y.iter().sum::<f64>() / n as f64;
    let mut pred = vec![base_score; n];
    let mut train_mse = vec![mse(&pred, y)];
    let mut trees = Vec::with_capacity(config.rounds);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let take = ((n as f64 * config.subsample).round() as usize).clamp(1, n);
    let mut residual = vec![0.0; n];

    for _ in 0..config.rounds {
        for i in 0..n {
            residual[i] = y[i] - pred[i];
        }
        let mut rows: Vec<usize> = if take == n {
            (0..n).collect()
        } else {
            sample(&mut rng, n, take).into_vec()
        };
        rows.sort_unstable();
        let mut tree = Grower {
            x,
            residual: &residual,
            cfg: config,
            nodes: Vec::new(),
        }
        .grow(rows);

        let mut sums = vec![0.0; tree.nodes.len()];
        let mut counts = vec![0usize; tree.nodes.len()];
        let leaf_of: Vec<usize> = (0..n).map(|i| tree.leaf_of(x.row(i))).collect();
        for i in 0..n {
            sums[leaf_of[i]] += residual[i];
            counts[leaf_of[i]] += 1;
        }
        for (j, node) in tree.nodes.iter_mut().enumerate() {
            if let Node::Leaf { value } = node {
                *value = if counts[j] == 0 {
                    0.0
                } else {
                    config.learning_rate * sums[j] / (counts[j] as f64 + config.lambda)
                };
            }
        }
        for i in 0..n {
            if let Node::Leaf { value } = tree.nodes[leaf_of[i]] {
                pred[i] += value;
            }
        }
        train_mse.push(mse(&pred, y));
        trees.push(tree);
    }
    Ok(BoosterModel {
        config: config.clone(),
        n_features: x.ncols(),
        base_score,
        trees,
        train_mse,
    })
}

impl BoosterModel {
    pub fn predict(&self, x: ArrayView2<f64>) -> Result<Vec<f64>> {
        if x.ncols() != self.n_features {
            return Err(Error::DimensionMismatch {
                expected: self.n_features,
                got: x.ncols(),
            });
        }
        Ok(x.rows()
            .into_iter()
            .map(|r| {
                self.trees
                    .iter()
                    .fold(self.base_score, |acc, t| acc + t.predict(r))
            })
            .collect())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, serde_json::to_vec(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let m: BoosterModel = serde_json::from_slice(&fs::read(path).map_err(|e| Error::io(path, e))?)?;
        for t in &m.trees {
            for node in &t.nodes {
                match node {
                    Node::Split { feature, left, right, .. }
                        if *feature >= m.n_features || *left >= t.nodes.len() || *right >= t.nodes.len() =>
                    {
                        return Err(Error::Integrity(format!("{}: malformed tree", path.display())));
                    }
                    Node::Leaf { value } if !value.is_finite() => {
                        return Err(Error::Integrity(format!("{}: non-finite leaf", path.display())));
                    }
                    _ => {}
                }
            }
        }
        Ok(m)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoosterPair {
    pub booster_a: BoosterModel,
    pub booster_b: BoosterModel,
    pub weight: f64,
}

/// `w * a + (1 - w) * b`, returning `a` or `b` unchanged at the endpoints.
pub fn blend(a: &[f64], b: &[f64], w: f64) -> Vec<f64> {
    if w == 1.0 {
        return a.to_vec();
    }
    if w == 0.0 {
        return b.to_vec();
    }
    a.iter().zip(b).map(|(p, q)| w * p + (1.0 - w) * q).collect()
}

pub fn predict_pair(pair: &BoosterPair, x: ArrayView2<f64>) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&pair.weight) {
        return Err(Error::Precondition(format!("pair weight {} outside [0, 1]", pair.weight)));
    }
    let a = pair.booster_a.predict(x)?;
    let b = pair.booster_b.predict(x)?;
    Ok(blend(&a, &b, pair.weight))
}

/// The weight grid `0, 0.05, ..., 1`.
pub fn weight_grid() -> Vec<f64> {
    (0..=20).map(|i| i as f64 / 20.0).collect()
}

/// Picks the grid weight whose blended predictions, cut by `cuts`, give the
/// highest QWK against `y`. Ties go to the smaller weight. Returns the weight
/// and the QWK at every grid point.
pub fn select_pair_weight(
    pred_a: &[f64],
    pred_b: &[f64],
    y: &[u8],
    cuts: &CutPoints,
) -> Result<(f64, Vec<(f64, f64)>)> {
    let mut table = Vec::new();
    let mut best = (0.0, f64::NEG_INFINITY);
    for w in weight_grid() {
        let scores = apply_cutpoints(&blend(pred_a, pred_b, w), cuts);
        let k = qwk(&scores, y, SCORE_CATEGORIES)?;
        table.push((w, k));
        if k > best.1 {
            best = (w, k);
        }
    }
    Ok((best.0, table))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn ramp(n: usize) -> (Array2<f64>, Vec<f64>) {
        let x = Array2::from_shape_fn((n, 2), |(i, j)| if j == 0 { i as f64 / n as f64 } else { ((i * 7) % 11) as f64 });
        let y = (0..n).map(|i| i as f64 / n as f64).collect();
        (x, y)
    }

    #[test]
    fn depth_zero_is_mean() {
        let (x, y) = ramp(50);
        let cfg = BoosterConfig {
            rounds: 1,
            max_depth: 0,
            ..BoosterConfig::level_wise()
        };
        let m = train_booster(x.view(), &y, &cfg).unwrap();
        let mean = y.iter().sum::<f64>() / 50.0;
        for p in m.predict(x.view()).unwrap() {
            assert!((p - mean).abs() < 1e-12);
        }
        let lw = BoosterConfig { max_depth: 0, ..BoosterConfig::leaf_wise() };
        assert_eq!(train_booster(x.view(), &y, &lw).unwrap().trees[0].leaf_count(), 1);
    }

    #[test]
    fn growth_limits() {
        let (x, y) = ramp(200);
        let a = BoosterConfig { rounds: 3, max_depth: 3, ..BoosterConfig::level_wise() };
        let m = train_booster(x.view(), &y, &a).unwrap();
        assert!(m.trees.iter().all(|t| t.depth() <= 3 && t.leaf_count() <= 8));
        let b = BoosterConfig { rounds: 3, max_leaves: 5, ..BoosterConfig::leaf_wise() };
        let m = train_booster(x.view(), &y, &b).unwrap();
        assert!(m.trees.iter().all(|t| t.leaf_count() == 5));
    }

    #[test]
    fn constant_features_give_single_leaves() {
        let x = Array2::from_elem((10, 3), 1.0);
        let y: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let m = train_booster(x.view(), &y, &BoosterConfig { rounds: 5, ..Default::default() }).unwrap();
        assert!(m.trees.iter().all(|t| t.nodes.len() == 1));
    }

    #[test]
    fn checkpoint_round_trip() {
        let (x, y) = ramp(40);
        let m = train_booster(x.view(), &y, &BoosterConfig { rounds: 4, ..Default::default() }).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.json");
        m.save(&p).unwrap();
        assert_eq!(BoosterModel::load(&p).unwrap(), m);
    }

    #[test]
    fn feature_mismatch() {
        let (x, y) = ramp(20);
        let m = train_booster(x.view(), &y, &BoosterConfig { rounds: 1, ..Default::default() }).unwrap();
        assert!(m.predict(Array2::zeros((2, 3)).view()).is_err());
    }
}
