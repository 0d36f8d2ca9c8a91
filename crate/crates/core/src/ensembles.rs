//! Stratified fold plans, the five-variant voting ensemble, and the
//! continuous-to-ordinal cut-point search.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::Standardizer;
use crate::metrics::{qwk, SCORE_CATEGORIES};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub seed: u64,
    /// Row indices of each fold, ascending.
    pub folds: Vec<Vec<usize>>,
}

impl FoldPlan {
    pub fn train_indices(&self, fold: usize) -> Vec<usize> {
        let mut out: Vec<usize> = self
            .folds
            .iter()
            .enumerate()
            .filter(|(f, _)| *f != fold)
            .flat_map(|(_, rows)| rows.iter().copied())
            .collect();
        out.sort_unstable();
        out
    }

    pub fn len(&self) -> usize {
        self.folds.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Fold index of every row.
    pub fn assignment(&self) -> Vec<usize> {
        let mut out = vec![0; self.len()];
        for (f, rows) in self.folds.iter().enumerate() {
            for &r in rows {
                out[r] = f;
            }
        }
        out
    }
}

/// Shuffles each class (ascending label order) and deals its rows round-robin
/// over the folds, continuing the rotation from class to class, so per-class
/// and total fold sizes differ by at most one.
pub fn make_fold_plan(labels: &[u8], k: usize, seed: u64) -> Result<FoldPlan> {
    if k < 2 {
        return Err(Error::Precondition("k must be >= 2".into()));
    }
    if k > labels.len() {
        return Err(Error::Precondition(format!(
            "k = {k} exceeds the {} available rows",
            labels.len()
        )));
    }
    let mut by_class: BTreeMap<u8, Vec<usize>> = BTreeMap::new();
    for (i, &y) in labels.iter().enumerate() {
        by_class.entry(y).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut folds = vec![Vec::new(); k];
    let mut next = 0;
    for rows in by_class.values_mut() {
        rows.shuffle(&mut rng);
        for &r in rows.iter() {
            folds[next].push(r);
            next = (next + 1) % k;
        }
    }
    folds.iter_mut().for_each(|f| f.sort_unstable());
    Ok(FoldPlan { k, seed, folds })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantKind {
    CopeAdversarial,
    Ordinal,
    OrdinalCleaned,
    PetPrompted,
    MultiscaleMse,
}

impl VariantKind {
    pub const ALL: [VariantKind; 5] = [
        VariantKind::CopeAdversarial,
        VariantKind::Ordinal,
        VariantKind::OrdinalCleaned,
        VariantKind::PetPrompted,
        VariantKind::MultiscaleMse,
    ];

    pub fn name(self) -> &'static str {
        match self {
            VariantKind::CopeAdversarial => "cope_adversarial",
            VariantKind::Ordinal => "ordinal",
            VariantKind::OrdinalCleaned => "ordinal_cleaned",
            VariantKind::PetPrompted => "pet_prompted",
            VariantKind::MultiscaleMse => "multiscale_mse",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant kind {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VariantConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub l2: f64,
    /// Perturbation bound for the adversarial variant, in standardized units.
    pub cope_epsilon: f64,
    pub seed: u64,
}

impl Default for VariantConfig {
    fn default() -> Self {
        VariantConfig {
            epochs: 40,
            learning_rate: 0.01,
            batch_size: 64,
            l2: 1e-4,
            cope_epsilon: 0.05,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Objective {
    /// Five sigmoid outputs for the events `y > s`, `s = 1..5`.
    Cumulative,
    /// One output regressed on the score.
    Squared,
}

/// Affine map `x W + b` with its training objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearHead {
    objective: Objective,
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl LinearHead {
    fn new(objective: Objective, dim: usize) -> Self {
        let outputs = match objective {
            Objective::Cumulative => SCORE_CATEGORIES - 1,
            Objective::Squared => 1,
        };
        LinearHead {
            objective,
            weights: Array2::zeros((dim, outputs)),
            bias: Array1::zeros(outputs),
        }
    }

    pub fn predict(&self, x: ArrayView2<f64>) -> Vec<f64> {
        let z = x.dot(&self.weights) + &self.bias;
        match self.objective {
            Objective::Cumulative => z
                .rows()
                .into_iter()
                .map(|r| 1.0 + r.iter().map(|&v| sigmoid(v)).sum::<f64>())
                .collect(),
            Objective::Squared => z.column(0).to_vec(),
        }
    }

    /// Returns (d loss / d W, d loss / d b, d loss / d x).
    fn gradients(&self, x: ArrayView2<f64>, y: &[u8], l2: f64) -> (Array2<f64>, Array1<f64>, Array2<f64>) {
        let n = x.nrows() as f64;
        let mut dz = x.dot(&self.weights) + &self.bias;
        match self.objective {
            Objective::Cumulative => {
                for (mut row, &t) in dz.rows_mut().into_iter().zip(y) {
                    for (s, v) in row.iter_mut().enumerate() {
                        let target = if t as usize > s + 1 { 1.0 } else { 0.0 };
                        *v = (sigmoid(*v) - target) / n;
                    }
                }
            }
            Objective::Squared => {
                for (v, &t) in dz.column_mut(0).iter_mut().zip(y) {
                    *v = 2.0 * (*v - t as f64) / n;
                }
            }
        }
        let gw = x.t().dot(&dz) + &(&self.weights * l2);
        let gb = dz.sum_axis(Axis(0));
        let gx = dz.dot(&self.weights.t());
        (gw, gb, gx)
    }
}

struct HeadAdam {
    lr: f64,
    step: i32,
    mw: Array2<f64>,
    vw: Array2<f64>,
    mb: Array1<f64>,
    vb: Array1<f64>,
}

impl HeadAdam {
    fn new(head: &LinearHead, lr: f64) -> Self {
        HeadAdam {
            lr,
            step: 0,
            mw: Array2::zeros(head.weights.raw_dim()),
            vw: Array2::zeros(head.weights.raw_dim()),
            mb: Array1::zeros(head.bias.raw_dim()),
            vb: Array1::zeros(head.bias.raw_dim()),
        }
    }

    fn update(&mut self, head: &mut LinearHead, gw: &Array2<f64>, gb: &Array1<f64>) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        self.step += 1;
        let lr = self.lr * (1.0 - B2.powi(self.step)).sqrt() / (1.0 - B1.powi(self.step));
        let apply = |p: &mut f64, m: &mut f64, v: &mut f64, g: f64| {
            *m = B1 * *m + (1.0 - B1) * g;
            *v = B2 * *v + (1.0 - B2) * g * g;
            *p -= lr * *m / (v.sqrt() + 1e-8);
        };
        Zip::from(&mut head.weights)
            .and(&mut self.mw)
            .and(&mut self.vw)
            .and(gw)
            .for_each(|p, m, v, &g| apply(p, m, v, g));
        Zip::from(&mut head.bias)
            .and(&mut self.mb)
            .and(&mut self.vb)
            .and(gb)
            .for_each(|p, m, v, &g| apply(p, m, v, g));
    }
}

/// Means of adjacent column pairs; an odd last column is kept as is.
pub fn pool_pairs(x: ArrayView2<f64>) -> Array2<f64> {
    let d = x.ncols();
    Array2::from_shape_fn((x.nrows(), d.div_ceil(2)), |(i, j)| {
        if 2 * j + 1 < d {
            (x[[i, 2 * j]] + x[[i, 2 * j + 1]]) / 2.0
        } else {
            x[[i, 2 * j]]
        }
    })
}

fn fit_head(
    objective: Objective,
    x: ArrayView2<f64>,
    y: &[u8],
    cfg: &VariantConfig,
    epsilon: f64,
    seed: u64,
) -> LinearHead {
    let mut head = LinearHead::new(objective, x.ncols());
    let mut opt = HeadAdam::new(&head, cfg.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..x.nrows()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size.max(1)) {
            let mut xb = x.select(Axis(0), batch);
            let yb: Vec<u8> = batch.iter().map(|&i| y[i]).collect();
            if epsilon > 0.0 {
                let (_, _, gx) = head.gradients(xb.view(), &yb, cfg.l2);
                Zip::from(&mut xb).and(&gx).for_each(|v, &g| {
                    if g != 0.0 {
                        *v += epsilon * g.signum();
                    }
                });
            }
            let (gw, gb, _) = head.gradients(xb.view(), &yb, cfg.l2);
            opt.update(&mut head, &gw, &gb);
        }
    }
    head
}

/// One fold's trained variant: feature scaling fitted on the fold's training
/// rows plus one or two linear heads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldCheckpoint {
    pub fold: usize,
    pub standardizer: Standardizer,
    pub heads: Vec<LinearHead>,
}

impl FoldCheckpoint {
    pub fn predict(&self, kind: VariantKind, x: ArrayView2<f64>) -> Result<Vec<f64>> {
        let z = self.standardizer.transform(x)?;
        Ok(match kind {
            VariantKind::MultiscaleMse => {
                let full = self.heads[0].predict(z.view());
                let pooled = self.heads[1].predict(pool_pairs(z.view()).view());
                full.iter().zip(&pooled).map(|(a, b)| (a + b) / 2.0).collect()
            }
            _ => self.heads[0].predict(z.view()),
        })
    }
}

/// A trained variant; predicts the mean of its fold checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantModel {
    pub kind: VariantKind,
    pub checkpoints: Vec<FoldCheckpoint>,
}

impl VariantModel {
    pub fn predict(&self, x: ArrayView2<f64>) -> Result<Vec<f64>> {
        let mut sum = vec![0.0; x.nrows()];
        for c in &self.checkpoints {
            for (s, p) in sum.iter_mut().zip(c.predict(self.kind, x)?) {
                *s += p;
            }
        }
        let k = self.checkpoints.len() as f64;
        Ok(sum.into_iter().map(|s| s / k).collect())
    }
}

#[derive(Debug, Clone)]
pub struct VariantOutcome {
    pub model: VariantModel,
    /// Out-of-fold prediction of every row.
    pub oof: Vec<f64>,
    /// Fold of every row.
    pub fold_of: Vec<usize>,
}

fn fit_fold(
    kind: VariantKind,
    x: ArrayView2<f64>,
    y: &[u8],
    rows: &[usize],
    fold: usize,
    cfg: &VariantConfig,
) -> FoldCheckpoint {
    let xt = x.select(Axis(0), rows);
    let yt: Vec<u8> = rows.iter().map(|&i| y[i]).collect();
    let standardizer = Standardizer::fit(xt.view());
    let z = standardizer.transform(xt.view()).expect("same width");
    let seed = cfg.seed ^ ((fold as u64 + 1) << 40);
    let heads = match kind {
        VariantKind::Ordinal | VariantKind::OrdinalCleaned | VariantKind::PetPrompted => {
            vec![fit_head(Objective::Cumulative, z.view(), &yt, cfg, 0.0, seed)]
        }
        VariantKind::CopeAdversarial => {
            vec![fit_head(Objective::Cumulative, z.view(), &yt, cfg, cfg.cope_epsilon, seed)]
        }
        VariantKind::MultiscaleMse => vec![
            fit_head(Objective::Squared, z.view(), &yt, cfg, 0.0, seed),
            fit_head(Objective::Squared, pool_pairs(z.view()).view(), &yt, cfg, 0.0, seed),
        ],
    };
    FoldCheckpoint {
        fold,
        standardizer,
        heads,
    }
}

/// Trains `kind` once per fold on the other folds' rows and predicts the
/// held-out rows.
pub fn train_variant(
    kind: VariantKind,
    x: ArrayView2<f64>,
    y: &[u8],
    plan: &FoldPlan,
    config: &VariantConfig,
) -> Result<VariantOutcome> {
    if y.len() != x.nrows() {
        return Err(Error::DimensionMismatch {
            expected: x.nrows(),
            got: y.len(),
        });
    }
    if plan.len() != x.nrows() {
        return Err(Error::DimensionMismatch {
            expected: x.nrows(),
            got: plan.len(),
        });
    }
    if let Some(&bad) = y.iter().find(|&&v| !(1..=SCORE_CATEGORIES as u8).contains(&v)) {
        return Err(Error::Precondition(format!("label {bad} outside 1..={SCORE_CATEGORIES}")));
    }
    if !(config.cope_epsilon >= 0.0 && config.cope_epsilon.is_finite()) {
        return Err(Error::Precondition("cope_epsilon must be finite and >= 0".into()));
    }
    let checkpoints: Vec<FoldCheckpoint> = (0..plan.k)
        .into_par_iter()
        .map(|f| fit_fold(kind, x, y, &plan.train_indices(f), f, config))
        .collect();
    let mut oof = vec![f64::NAN; x.nrows()];
    for (f, c) in checkpoints.iter().enumerate() {
        let rows = &plan.folds[f];
        let pred = c.predict(kind, x.select(Axis(0), rows).view())?;
        for (&r, p) in rows.iter().zip(pred) {
            oof[r] = p;
        }
    }
    Ok(VariantOutcome {
        model: VariantModel { kind, checkpoints },
        oof,
        fold_of: plan.assignment(),
    })
}

/// Strictly increasing thresholds `t1 < ... < t5`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CutPoints(pub [f64; SCORE_CATEGORIES - 1]);

impl Default for CutPoints {
    fn default() -> Self {
        CutPoints([1.5, 2.5, 3.5, 4.5, 5.5])
    }
}

impl CutPoints {
    pub fn new(t: [f64; SCORE_CATEGORIES - 1]) -> Result<Self> {
        if t.iter().any(|v| !v.is_finite()) || t.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Validation(format!("cut points {t:?} are not strictly increasing")));
        }
        Ok(CutPoints(t))
    }

    /// Sorts, then nudges ties apart so the result is strictly increasing.
    fn from_unsorted(mut t: [f64; SCORE_CATEGORIES - 1]) -> Self {
        t.sort_by(f64::total_cmp);
        for i in 1..t.len() {
            if t[i] <= t[i - 1] {
                t[i] = f64::from_bits(t[i - 1].to_bits() + 1).max(t[i - 1] + 1e-9);
            }
        }
        CutPoints(t)
    }
}

/// `1 + |{t : pred > t}|` for every prediction.
pub fn apply_cutpoints(preds: &[f64], cuts: &CutPoints) -> Vec<u8> {
    preds
        .iter()
        .map(|p| 1 + cuts.0.iter().filter(|&&t| *p > t).count() as u8)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CutPointSearch {
    pub cuts: CutPoints,
    pub qwk: f64,
    pub initial_qwk: f64,
    pub nelder_mead_iterations: usize,
}

const NM_ITERATIONS: usize = 200;
const NM_TOLERANCE: f64 = 1e-6;
const NM_INITIAL_STEP: f64 = 0.2;
const SCAN_STEP: f64 = 0.25;
const SCAN_HALVINGS: usize = 4;

/// Maximizes QWK of `apply_cutpoints(oof, t)` against `y`: Nelder-Mead from
/// the midpoints (reflection 1, expansion 2, contraction 0.5, shrink 0.5),
/// then a per-threshold scan with steps 0.25, 0.125, ... (four halvings)
/// accepting only strict improvements.
pub fn optimize_cutpoints(oof: &[f64], y: &[u8]) -> Result<CutPointSearch> {
    if oof.len() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: y.len(),
            got: oof.len(),
        });
    }
    if oof.iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation("non-finite prediction".into()));
    }
    // Validates labels and emptiness up front.
    qwk(y, y, SCORE_CATEGORIES)?;

    let score = |t: &[f64; 5]| -> f64 {
        let cuts = CutPoints::from_unsorted(*t);
        qwk(&apply_cutpoints(oof, &cuts), y, SCORE_CATEGORIES).unwrap_or(-1.0)
    };

    let start = CutPoints::default().0;
    let initial_qwk = score(&start);
    let dim = start.len();
    let mut simplex: Vec<([f64; 5], f64)> = vec![(start, initial_qwk)];
    for i in 0..dim {
        let mut v = start;
        v[i] += NM_INITIAL_STEP;
        simplex.push((v, score(&v)));
    }

    let lerp = |a: &[f64; 5], b: &[f64; 5], t: f64| -> [f64; 5] {
        let mut out = [0.0; 5];
        for i in 0..5 {
            out[i] = a[i] + t * (b[i] - a[i]);
        }
        out
    };

    let mut iterations = 0;
    while iterations < NM_ITERATIONS {
        // Best first; stable sort keeps earlier vertices ahead on ties.
        simplex.sort_by(|a, b| b.1.total_cmp(&a.1));
        if simplex[0].1 - simplex[dim].1 < NM_TOLERANCE {
            break;
        }
        iterations += 1;
        let mut centroid = [0.0; 5];
        for (v, _) in &simplex[..dim] {
            for i in 0..5 {
                centroid[i] += v[i] / dim as f64;
            }
        }
        let worst = simplex[dim];
        let reflected = lerp(&centroid, &worst.0, -1.0);
        let fr = score(&reflected);
        if fr > simplex[0].1 {
            let expanded = lerp(&centroid, &worst.0, -2.0);
            let fe = score(&expanded);
            simplex[dim] = if fe > fr { (expanded, fe) } else { (reflected, fr) };
        } else if fr > simplex[dim - 1].1 {
            simplex[dim] = (reflected, fr);
        } else {
            let (contracted, fc) = if fr > worst.1 {
                let c = lerp(&centroid, &reflected, 0.5);
                (c, score(&c))
            } else {
                let c = lerp(&centroid, &worst.0, 0.5);
                (c, score(&c))
            };
            if fc > fr.max(worst.1) {
                simplex[dim] = (contracted, fc);
            } else {
                let best = simplex[0].0;
                for v in simplex.iter_mut().skip(1) {
                    v.0 = lerp(&best, &v.0, 0.5);
                    v.1 = score(&v.0);
                }
            }
        }
    }
    simplex.sort_by(|a, b| b.1.total_cmp(&a.1));
    let (mut t, mut best) = simplex[0];
    if best < initial_qwk {
        t = start;
        best = initial_qwk;
    }
    t = CutPoints::from_unsorted(t).0;

    let mut step = SCAN_STEP;
    for _ in 0..=SCAN_HALVINGS {
        for i in 0..dim {
            for dir in [-1.0, 1.0] {
                loop {
                    let mut cand = t;
                    cand[i] += dir * step;
                    let f = score(&cand);
                    if f > best {
                        t = CutPoints::from_unsorted(cand).0;
                        best = f;
                    } else {
                        break;
                    }
                }
            }
        }
        step /= 2.0;
    }

    Ok(CutPointSearch {
        cuts: CutPoints::from_unsorted(t),
        qwk: best,
        initial_qwk,
        nelder_mead_iterations: iterations,
    })
}

/// Plurality vote over five scores. Ties go to the tied score nearest the
/// mean of all five votes, then to the lower score.
pub fn hard_vote(votes: &[u8]) -> Result<u8> {
    if votes.len() != VariantKind::ALL.len() {
        return Err(Error::Precondition(format!(
            "hard_vote takes exactly 5 votes, got {}",
            votes.len()
        )));
    }
    let mut counts = [0usize; SCORE_CATEGORIES + 1];
    for &v in votes {
        if !(1..=SCORE_CATEGORIES as u8).contains(&v) {
            return Err(Error::Precondition(format!("vote {v} outside 1..={SCORE_CATEGORIES}")));
        }
        counts[v as usize] += 1;
    }
    let top = *counts.iter().max().unwrap();
    let mean = votes.iter().map(|&v| v as f64).sum::<f64>() / votes.len() as f64;
    let winner = (1..=SCORE_CATEGORIES)
        .filter(|&c| counts[c] == top)
        .min_by(|&a, &b| {
            let (da, db) = ((a as f64 - mean).abs(), (b as f64 - mean).abs());
            da.total_cmp(&db).then(a.cmp(&b))
        })
        .unwrap();
    Ok(winner as u8)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoteRecord {
    pub essay_id: String,
    pub votes: Vec<u8>,
    #[serde(rename = "final")]
    pub final_score: u8,
}

/// Votes of each variant (outer index) for each essay, combined per essay.
pub fn vote_all(essay_ids: &[String], votes_by_variant: &[Vec<u8>]) -> Result<Vec<VoteRecord>> {
    for v in votes_by_variant {
        if v.len() != essay_ids.len() {
            return Err(Error::DimensionMismatch {
                expected: essay_ids.len(),
                got: v.len(),
            });
        }
    }
    essay_ids
        .iter()
        .enumerate()
        .map(|(i, id)| {
            let votes: Vec<u8> = votes_by_variant.iter().map(|v| v[i]).collect();
            Ok(VoteRecord {
                essay_id: id.clone(),
                final_score: hard_vote(&votes)?,
                votes,
            })
        })
        .collect()
}
