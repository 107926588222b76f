//! Shadow-model membership inference and the accuracy-over-privacy metric.
//!
//! Shadow classifiers are trained on disjoint member parts of the
//! validation set; their logits on members (label 1) and non-members
//! (label 0) form a per-class attack dataset. For every class three attack
//! families are fitted and the one with the best held-out AUC is kept. The
//! attack is then run on a target model with its real training split as
//! members and the test split as non-members.

use krlab_nn::{ops, par, Tensor};
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::clf_training::{train_classifier, ClfTrainConfig, RealSource, EVAL_BATCH};
use crate::datasets::{make_shadow_split, LabeledDataset, ShadowSplit};
use crate::error::{KrError, Result};
use crate::nets::{Classifier, ClassifierConfig};

// ----- metrics ----------------------------------------------------------------

/// ROC AUC by the rank statistic: `P(s⁺ > s⁻) + ½·P(s⁺ = s⁻)`.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(KrError::invalid("auc: scores and labels differ in length"));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(KrError::invalid("auc: NaN score"));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(KrError::invalid("auc needs both positive and negative labels"));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Sum of (average) ranks of the positives; every term is a multiple of ½
    // so the sum is exact.
    let mut rank_sum = 0.0f64;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i + 1;
        while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
            j += 1;
        }
        let avg = (i + 1 + j) as f64 / 2.0;
        let pos = idx[i..j].iter().filter(|&&t| labels[t]).count();
        rank_sum += avg * pos as f64;
        i = j;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Accuracy over privacy: `accuracy / (2·max(auc, ½))²`.
pub fn aop(accuracy: f64, auc_mia: f64) -> f64 {
    let d = 2.0 * auc_mia.max(0.5);
    accuracy / (d * d)
}

// ----- features ---------------------------------------------------------------

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackFeatures {
    /// Raw logits in class order.
    #[default]
    Logits,
    Softmax,
    /// Softmax sorted in decreasing order.
    SortedSoftmax,
}

fn feature_rows(logits: &Tensor, kind: AttackFeatures) -> Vec<Vec<f64>> {
    let k = logits.last_dim();
    let rows: Vec<Vec<f32>> = match kind {
        AttackFeatures::Logits => logits.data().chunks(k).map(|r| r.to_vec()).collect(),
        AttackFeatures::Softmax | AttackFeatures::SortedSoftmax => {
            let sm = ops::softmax_rows(logits.data(), k);
            sm.chunks(k)
                .map(|r| {
                    let mut r = r.to_vec();
                    if kind == AttackFeatures::SortedSoftmax {
                        r.sort_by(|a, b| b.total_cmp(a));
                    }
                    r
                })
                .collect()
        }
    };
    rows.into_iter().map(|r| r.into_iter().map(f64::from).collect()).collect()
}

/// One row of the attack dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackSample {
    pub features: Vec<f64>,
    pub member: bool,
    pub class_id: usize,
}

// ----- attack model families --------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackFamily {
    LogisticRegression,
    RbfSvc,
    RandomForest,
    /// Fallback for classes without both membership labels.
    Constant,
}

impl AttackFamily {
    pub const FITTED: [AttackFamily; 3] = [
        AttackFamily::LogisticRegression,
        AttackFamily::RbfSvc,
        AttackFamily::RandomForest,
    ];
}

/// Per-feature standardization fitted on training rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    mean: Vec<f64>,
    scale: Vec<f64>,
}

impl Standardizer {
    pub fn fit(x: &[Vec<f64>]) -> Self {
        let d = x[0].len();
        let n = x.len() as f64;
        let mut mean = vec![0.0; d];
        for r in x {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v / n;
            }
        }
        let mut var = vec![0.0; d];
        for r in x {
            for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
                *s += (v - m) * (v - m) / n;
            }
        }
        let scale = var.into_iter().map(|v| if v > 1e-12 { v.sqrt() } else { 1.0 }).collect();
        Self { mean, scale }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.mean).zip(&self.scale).map(|((v, m), s)| (v - m) / s).collect()
    }
}

/// L2-regularized logistic regression (C = 1) fitted by Newton's method.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogisticModel {
    std: Standardizer,
    w: Vec<f64>,
    b: f64,
}

impl LogisticModel {
    pub fn fit(x: &[Vec<f64>], y: &[bool]) -> Self {
        let std = Standardizer::fit(x);
        let xs: Vec<Vec<f64>> = x.iter().map(|r| std.apply(r)).collect();
        let d = xs[0].len();
        // parameters θ = [w; b]
        let mut theta = DVector::<f64>::zeros(d + 1);
        for _ in 0..50 {
            let mut grad = DVector::<f64>::zeros(d + 1);
            let mut hess = DMatrix::<f64>::zeros(d + 1, d + 1);
            for (r, &t) in xs.iter().zip(y) {
                let z = r.iter().zip(theta.iter()).map(|(a, b)| a * b).sum::<f64>() + theta[d];
                let p = 1.0 / (1.0 + (-z).exp());
                let e = p - if t { 1.0 } else { 0.0 };
                let wgt = (p * (1.0 - p)).max(1e-12);
                for i in 0..=d {
                    let xi = if i < d { r[i] } else { 1.0 };
                    grad[i] += e * xi;
                    for j in 0..=i {
                        let xj = if j < d { r[j] } else { 1.0 };
                        hess[(i, j)] += wgt * xi * xj;
                    }
                }
            }
            for i in 0..=d {
                for j in 0..i {
                    hess[(j, i)] = hess[(i, j)];
                }
            }
            for i in 0..d {
                grad[i] += theta[i];
                hess[(i, i)] += 1.0;
            }
            hess[(d, d)] += 1e-9;
            let Some(chol) = hess.cholesky() else { break };
            let step = chol.solve(&grad);
            theta -= &step;
            if step.amax() < 1e-8 {
                break;
            }
        }
        Self {
            std,
            w: theta.iter().take(d).copied().collect(),
            b: theta[d],
        }
    }

    /// Positive-class probability.
    pub fn score(&self, x: &[f64]) -> f64 {
        let r = self.std.apply(x);
        let z = r.iter().zip(&self.w).map(|(a, b)| a * b).sum::<f64>() + self.b;
        1.0 / (1.0 + (-z).exp())
    }
}

/// Support-vector classifier with an RBF kernel (C = 1, γ = 1/(d·Var X)),
/// trained by SMO with second-order working-set selection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SvcModel {
    std: Standardizer,
    gamma: f64,
    support: Vec<Vec<f64>>,
    /// `α_i · y_i` per support vector.
    coef: Vec<f64>,
    rho: f64,
}

/// Largest training set the SVC is fitted on; larger sets are subsampled.
pub const SVC_MAX_SAMPLES: usize = 2000;

fn rbf(a: &[f64], b: &[f64], gamma: f64) -> f64 {
    let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    (-gamma * d2).exp()
}

impl SvcModel {
    pub fn fit(x: &[Vec<f64>], y: &[bool], rng: &mut impl Rng) -> Self {
        let (x, y): (Vec<Vec<f64>>, Vec<bool>) = if x.len() > SVC_MAX_SAMPLES {
            let mut idx: Vec<usize> = (0..x.len()).collect();
            idx.shuffle(rng);
            idx.truncate(SVC_MAX_SAMPLES);
            idx.sort_unstable();
            (idx.iter().map(|&i| x[i].clone()).collect(), idx.iter().map(|&i| y[i]).collect())
        } else {
            (x.to_vec(), y.to_vec())
        };
        let std = Standardizer::fit(&x);
        let xs: Vec<Vec<f64>> = x.iter().map(|r| std.apply(r)).collect();
        let n = xs.len();
        let d = xs[0].len();
        let all: Vec<f64> = xs.iter().flatten().copied().collect();
        let mu = all.iter().sum::<f64>() / all.len() as f64;
        let var = all.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / all.len() as f64;
        let gamma = 1.0 / (d as f64 * if var > 1e-12 { var } else { 1.0 });
        let ys: Vec<f64> = y.iter().map(|&t| if t { 1.0 } else { -1.0 }).collect();
        let rows = par::map_range(n, |i| xs.iter().map(|b| rbf(&xs[i], b, gamma) as f32).collect::<Vec<f32>>());
        let k = |i: usize, j: usize| rows[i][j] as f64;
        let c = 1.0;
        let eps = 1e-3;
        let tau = 1e-12;
        let mut alpha = vec![0.0f64; n];
        let mut grad = vec![-1.0f64; n];
        let up = |a: f64, yy: f64| (yy > 0.0 && a < c) || (yy < 0.0 && a > 0.0);
        let low = |a: f64, yy: f64| (yy > 0.0 && a > 0.0) || (yy < 0.0 && a < c);
        for _ in 0..(100 * n).max(10_000) {
            // i: maximal violator in I_up
            let mut gmax = f64::NEG_INFINITY;
            let mut i = usize::MAX;
            for t in 0..n {
                if up(alpha[t], ys[t]) && -ys[t] * grad[t] >= gmax {
                    gmax = -ys[t] * grad[t];
                    i = t;
                }
            }
            if i == usize::MAX {
                break;
            }
            // j: second-order choice in I_low
            let mut gmin = f64::INFINITY;
            let mut best = f64::INFINITY;
            let mut j = usize::MAX;
            for t in 0..n {
                if !low(alpha[t], ys[t]) {
                    continue;
                }
                let v = -ys[t] * grad[t];
                gmin = gmin.min(v);
                let b = gmax - v;
                if b > 0.0 {
                    let a = (k(i, i) + k(t, t) - 2.0 * k(i, t)).max(tau);
                    let obj = -(b * b) / a;
                    if obj <= best {
                        best = obj;
                        j = t;
                    }
                }
            }
            if gmax - gmin < eps || j == usize::MAX {
                break;
            }
            let a = (k(i, i) + k(j, j) - 2.0 * k(i, j)).max(tau);
            let (old_i, old_j) = (alpha[i], alpha[j]);
            if ys[i] != ys[j] {
                let delta = (-grad[i] - grad[j]) / a;
                let diff = alpha[i] - alpha[j];
                alpha[i] += delta;
                alpha[j] += delta;
                if diff > 0.0 && alpha[j] < 0.0 {
                    alpha[j] = 0.0;
                    alpha[i] = diff;
                } else if diff <= 0.0 && alpha[i] < 0.0 {
                    alpha[i] = 0.0;
                    alpha[j] = -diff;
                }
                if diff > 0.0 && alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = c - diff;
                } else if diff <= 0.0 && alpha[j] > c {
                    alpha[j] = c;
                    alpha[i] = c + diff;
                }
            } else {
                let delta = (grad[i] - grad[j]) / a;
                let sum = alpha[i] + alpha[j];
                alpha[i] -= delta;
                alpha[j] += delta;
                if sum > c && alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = sum - c;
                } else if sum <= c && alpha[j] < 0.0 {
                    alpha[j] = 0.0;
                    alpha[i] = sum;
                }
                if sum > c && alpha[j] > c {
                    alpha[j] = c;
                    alpha[i] = sum - c;
                } else if sum <= c && alpha[i] < 0.0 {
                    alpha[i] = 0.0;
                    alpha[j] = sum;
                }
            }
            let (di, dj) = (alpha[i] - old_i, alpha[j] - old_j);
            for t in 0..n {
                grad[t] += ys[t] * (ys[i] * k(t, i) * di + ys[j] * k(t, j) * dj);
            }
        }
        // ρ from free vectors, else the midpoint of the feasible interval
        let (mut sum, mut nfree) = (0.0, 0usize);
        let (mut ub, mut lb) = (f64::INFINITY, f64::NEG_INFINITY);
        for t in 0..n {
            let yg = ys[t] * grad[t];
            if alpha[t] > 0.0 && alpha[t] < c {
                sum += yg;
                nfree += 1;
            } else if (alpha[t] >= c) != (ys[t] > 0.0) {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        }
        let rho = if nfree > 0 {
            sum / nfree as f64
        } else if ub.is_finite() && lb.is_finite() {
            (ub + lb) / 2.0
        } else {
            0.0
        };
        let mut support = Vec::new();
        let mut coef = Vec::new();
        for t in 0..n {
            if alpha[t] > 0.0 {
                support.push(xs[t].clone());
                coef.push(alpha[t] * ys[t]);
            }
        }
        Self {
            std,
            gamma,
            support,
            coef,
            rho,
        }
    }

    /// Signed decision value.
    pub fn score(&self, x: &[f64]) -> f64 {
        let r = self.std.apply(x);
        self.support
            .iter()
            .zip(&self.coef)
            .map(|(s, c)| c * rbf(s, &r, self.gamma))
            .sum::<f64>()
            - self.rho
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
enum Node {
    Leaf(f64),
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Tree {
    nodes: Vec<Node>,
}

impl Tree {
    fn predict(&self, x: &[f64]) -> f64 {
        let mut at = 0;
        loop {
            match &self.nodes[at] {
                Node::Leaf(p) => return *p,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => at = if x[*feature] <= *threshold { *left } else { *right },
            }
        }
    }
}

/// Random forest of Gini CART trees on bootstrap samples with √d features
/// tried per split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForestModel {
    trees: Vec<Tree>,
}

pub const FOREST_TREES: usize = 100;
const MAX_DEPTH: usize = 40;

fn grow(x: &[Vec<f64>], y: &[bool], idx: &mut [usize], mtry: usize, depth: usize, rng: &mut ChaCha8Rng, nodes: &mut Vec<Node>) -> usize {
    let n = idx.len();
    let pos = idx.iter().filter(|&&i| y[i]).count();
    let me = nodes.len();
    nodes.push(Node::Leaf(pos as f64 / n as f64));
    if pos == 0 || pos == n || depth >= MAX_DEPTH || n < 2 {
        return me;
    }
    let d = x[0].len();
    let mut feats: Vec<usize> = (0..d).collect();
    feats.shuffle(rng);
    let parent = {
        let p = pos as f64 / n as f64;
        n as f64 * 2.0 * p * (1.0 - p)
    };
    let mut best: Option<(f64, usize, f64)> = None;
    let mut order = idx.to_vec();
    for &f in feats.iter().take(mtry) {
        order.sort_by(|&a, &b| x[a][f].total_cmp(&x[b][f]));
        let mut lp = 0usize;
        for s in 1..n {
            if y[order[s - 1]] {
                lp += 1;
            }
            let (va, vb) = (x[order[s - 1]][f], x[order[s]][f]);
            if va == vb {
                continue;
            }
            let (nl, nr) = (s as f64, (n - s) as f64);
            let rp = pos - lp;
            let gl = 2.0 * lp as f64 * (nl - lp as f64) / nl;
            let gr = 2.0 * rp as f64 * (nr - rp as f64) / nr;
            let imp = gl + gr;
            if imp < parent - 1e-12 && best.is_none_or(|(b, _, _)| imp < b) {
                best = Some((imp, f, 0.5 * (va + vb)));
            }
        }
    }
    let Some((_, feature, threshold)) = best else {
        return me;
    };
    let mid = {
        let mut l = 0;
        for t in 0..n {
            if x[idx[t]][feature] <= threshold {
                idx.swap(l, t);
                l += 1;
            }
        }
        l
    };
    let (li, ri) = idx.split_at_mut(mid);
    let left = grow(x, y, li, mtry, depth + 1, rng, nodes);
    let right = grow(x, y, ri, mtry, depth + 1, rng, nodes);
    nodes[me] = Node::Split {
        feature,
        threshold,
        left,
        right,
    };
    me
}

impl ForestModel {
    pub fn fit(x: &[Vec<f64>], y: &[bool], trees: usize, seed: u64) -> Self {
        let n = x.len();
        let mtry = ((x[0].len() as f64).sqrt().round() as usize).max(1);
        let trees = par::map_range(trees, |t| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (t as u64 + 1).wrapping_mul(0xA24B_AED4_963E_E407));
            let mut idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            let mut nodes = Vec::new();
            grow(x, y, &mut idx, mtry, 0, &mut rng, &mut nodes);
            Tree { nodes }
        });
        Self { trees }
    }

    /// Mean positive-leaf fraction over trees.
    pub fn score(&self, x: &[f64]) -> f64 {
        self.trees.iter().map(|t| t.predict(x)).sum::<f64>() / self.trees.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum FittedAttack {
    Logistic(LogisticModel),
    Svc(SvcModel),
    Forest(ForestModel),
    Constant,
}

impl FittedAttack {
    pub fn family(&self) -> AttackFamily {
        match self {
            FittedAttack::Logistic(_) => AttackFamily::LogisticRegression,
            FittedAttack::Svc(_) => AttackFamily::RbfSvc,
            FittedAttack::Forest(_) => AttackFamily::RandomForest,
            FittedAttack::Constant => AttackFamily::Constant,
        }
    }

    pub fn score(&self, x: &[f64]) -> f64 {
        match self {
            FittedAttack::Logistic(m) => m.score(x),
            FittedAttack::Svc(m) => m.score(x),
            FittedAttack::Forest(m) => m.score(x),
            FittedAttack::Constant => 0.5,
        }
    }

    pub fn fit(family: AttackFamily, x: &[Vec<f64>], y: &[bool], seed: u64) -> Self {
        match family {
            AttackFamily::LogisticRegression => FittedAttack::Logistic(LogisticModel::fit(x, y)),
            AttackFamily::RbfSvc => FittedAttack::Svc(SvcModel::fit(x, y, &mut ChaCha8Rng::seed_from_u64(seed))),
            AttackFamily::RandomForest => FittedAttack::Forest(ForestModel::fit(x, y, FOREST_TREES, seed)),
            AttackFamily::Constant => FittedAttack::Constant,
        }
    }
}

/// The per-class attack models.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackModelSet {
    pub models: Vec<FittedAttack>,
    /// Held-out AUC of the chosen family per class.
    pub selection_auc: Vec<f64>,
    /// AUC of every fitted family per class (empty for fallbacks).
    pub candidate_auc: Vec<Vec<(AttackFamily, f64)>>,
    pub features: AttackFeatures,
    /// Total number of model fits performed.
    pub fits: usize,
}

impl AttackModelSet {
    pub fn families(&self) -> Vec<AttackFamily> {
        self.models.iter().map(FittedAttack::family).collect()
    }
}

/// Seeded split of one class's samples into fit / selection parts,
/// stratified by membership.
fn stratified_split(samples: &[&AttackSample], selection_fraction: f64, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let (mut fit, mut sel) = (Vec::new(), Vec::new());
    for label in [true, false] {
        let mut idx: Vec<usize> = (0..samples.len()).filter(|&i| samples[i].member == label).collect();
        idx.shuffle(rng);
        let n_sel = ((idx.len() as f64 * selection_fraction).round() as usize).min(idx.len().saturating_sub(1));
        sel.extend_from_slice(&idx[..n_sel]);
        fit.extend_from_slice(&idx[n_sel..]);
    }
    fit.sort_unstable();
    sel.sort_unstable();
    (fit, sel)
}

/// Fits the three families per class and keeps the best by selection AUC
/// (ties go to the earlier family: logistic, SVC, forest).
pub fn train_attack_models(
    samples: &[AttackSample],
    num_classes: usize,
    features: AttackFeatures,
    selection_fraction: f64,
    seed: u64,
) -> Result<AttackModelSet> {
    if !(0.0..1.0).contains(&selection_fraction) || selection_fraction == 0.0 {
        return Err(KrError::Config(format!("selection_fraction {selection_fraction} outside (0, 1)")));
    }
    let mut set = AttackModelSet {
        models: Vec::with_capacity(num_classes),
        selection_auc: Vec::with_capacity(num_classes),
        candidate_auc: Vec::with_capacity(num_classes),
        features,
        fits: 0,
    };
    for c in 0..num_classes {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (c as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let class: Vec<&AttackSample> = samples.iter().filter(|s| s.class_id == c).collect();
        let (fit, sel) = stratified_split(&class, selection_fraction, &mut rng);
        let has_both = |ix: &[usize]| ix.iter().any(|&i| class[i].member) && ix.iter().any(|&i| !class[i].member);
        if !has_both(&fit) || !has_both(&sel) {
            set.models.push(FittedAttack::Constant);
            set.selection_auc.push(0.5);
            set.candidate_auc.push(Vec::new());
            continue;
        }
        let fx: Vec<Vec<f64>> = fit.iter().map(|&i| class[i].features.clone()).collect();
        let fy: Vec<bool> = fit.iter().map(|&i| class[i].member).collect();
        let sy: Vec<bool> = sel.iter().map(|&i| class[i].member).collect();
        let mut best: Option<(f64, FittedAttack)> = None;
        let mut cands = Vec::new();
        for fam in AttackFamily::FITTED {
            let model = FittedAttack::fit(fam, &fx, &fy, rng.random());
            set.fits += 1;
            let scores: Vec<f64> = sel.iter().map(|&i| model.score(&class[i].features)).collect();
            let a = auc(&scores, &sy)?;
            cands.push((fam, a));
            if best.as_ref().is_none_or(|(b, _)| a > *b) {
                best = Some((a, model));
            }
        }
        let (a, m) = best.expect("three families fitted");
        set.models.push(m);
        set.selection_auc.push(a);
        set.candidate_auc.push(cands);
    }
    Ok(set)
}

// ----- shadows and attack -----------------------------------------------------

#[derive(Clone, Debug)]
pub struct ShadowModel {
    pub model: Classifier,
    pub split: ShadowSplit,
    pub holdout_acc: f64,
}

pub fn shadow_seed(seed: u64, i: usize) -> u64 {
    seed.wrapping_add(0x5DEE_CE66D).wrapping_mul(i as u64 + 1)
}

/// Trains `n` shadows, each on the member part of its own split of `val`
/// with the holdout part for best-epoch selection.
pub fn train_shadow_models(
    val: &LabeledDataset,
    n: usize,
    model_cfg: &ClassifierConfig,
    train_cfg: &ClfTrainConfig,
    seed: u64,
) -> Result<Vec<ShadowModel>> {
    (0..n)
        .map(|i| {
            let s = shadow_seed(seed, i);
            let split = make_shadow_split(val, s)?;
            let t = train_classifier(
                &mut RealSource::new(&split.member_part),
                model_cfg,
                train_cfg,
                &split.holdout_part,
                s,
                |_| true,
            )?;
            Ok(ShadowModel {
                model: t.model,
                split,
                holdout_acc: t.best_val_acc,
            })
        })
        .collect()
}

fn samples_for(model: &mut Classifier, ds: &LabeledDataset, member: bool, kind: AttackFeatures) -> Result<Vec<AttackSample>> {
    let logits = model.logits(&ds.images, EVAL_BATCH)?;
    Ok(feature_rows(&logits, kind)
        .into_iter()
        .zip(&ds.labels)
        .map(|(features, &class_id)| AttackSample {
            features,
            member,
            class_id,
        })
        .collect())
}

/// Members (1) and non-members (0) of every shadow, pooled.
pub fn build_attack_dataset(shadows: &mut [ShadowModel], kind: AttackFeatures) -> Result<Vec<AttackSample>> {
    let mut out = Vec::new();
    for s in shadows.iter_mut() {
        out.extend(samples_for(&mut s.model, &s.split.member_part, true, kind)?);
        out.extend(samples_for(&mut s.model, &s.split.nonmember_part, false, kind)?);
    }
    Ok(out)
}

/// Outcome of attacking one target.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiaReport {
    pub target: String,
    /// AUC of the pooled membership scores.
    pub auc: f64,
    /// Mean of the per-class AUCs that are defined.
    pub macro_auc: f64,
    pub per_class_auc: Vec<Option<f64>>,
    pub accuracy: f64,
    pub aop: f64,
    pub n_members: usize,
    pub n_nonmembers: usize,
    pub families: Vec<AttackFamily>,
    pub subsample_seed: u64,
}

/// Scores a target's members and non-members with the attack models after
/// balancing both sides by seeded subsampling.
pub fn attack(
    target: &mut Classifier,
    target_name: &str,
    accuracy: f64,
    members: &LabeledDataset,
    nonmembers: &LabeledDataset,
    set: &AttackModelSet,
    seed: u64,
) -> Result<MiaReport> {
    if members.is_empty() || nonmembers.is_empty() {
        return Err(KrError::invalid("attack needs non-empty member and non-member sets"));
    }
    let n = members.len().min(nonmembers.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pick = |ds: &LabeledDataset| {
        let mut idx: Vec<usize> = (0..ds.len()).collect();
        idx.shuffle(&mut rng);
        idx.truncate(n);
        idx.sort_unstable();
        ds.subset(&idx)
    };
    let (m, nm) = (pick(members), pick(nonmembers));
    let mut samples = samples_for(target, &m, true, set.features)?;
    samples.extend(samples_for(target, &nm, false, set.features)?);
    let scores: Vec<f64> = samples.iter().map(|s| set.models[s.class_id].score(&s.features)).collect();
    let labels: Vec<bool> = samples.iter().map(|s| s.member).collect();
    let pooled = auc(&scores, &labels)?;
    let k = set.models.len();
    let per_class: Vec<Option<f64>> = (0..k)
        .map(|c| {
            let ix: Vec<usize> = (0..samples.len()).filter(|&i| samples[i].class_id == c).collect();
            let sc: Vec<f64> = ix.iter().map(|&i| scores[i]).collect();
            let lb: Vec<bool> = ix.iter().map(|&i| labels[i]).collect();
            auc(&sc, &lb).ok()
        })
        .collect();
    let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
    let macro_auc = if defined.is_empty() {
        0.5
    } else {
        defined.iter().sum::<f64>() / defined.len() as f64
    };
    Ok(MiaReport {
        target: target_name.to_string(),
        auc: pooled,
        macro_auc,
        per_class_auc: per_class,
        accuracy,
        aop: aop(accuracy, pooled),
        n_members: n,
        n_nonmembers: n,
        families: set.families(),
        subsample_seed: seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.9, 0.1], &[true, false]).unwrap(), 1.0);
        assert_eq!(auc(&[0.5, 0.5], &[true, false]).unwrap(), 0.5);
        assert_eq!(auc(&[0.1, 0.9], &[true, false]).unwrap(), 0.0);
        assert!(auc(&[0.1, 0.9], &[true, true]).is_err());
    }

    #[test]
    fn aop_examples() {
        assert!((aop(0.9624, 0.5622) - 0.7613).abs() < 3e-4);
        assert!((aop(0.8670, 0.5) - 0.8670).abs() < 1e-12);
        assert_eq!(aop(0.3, 0.2), 0.3);
    }

    fn separable(n: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<bool>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y: Vec<bool> = (0..n).map(|i| i % 2 == 0).collect();
        let x = y
            .iter()
            .map(|&t| {
                let off = if t { 2.0 } else { -2.0 };
                vec![off + rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]
            })
            .collect();
        (x, y)
    }

    #[test]
    fn each_family_separates_separable_data() {
        let (x, y) = separable(200, 1);
        for fam in AttackFamily::FITTED {
            let m = FittedAttack::fit(fam, &x, &y, 2);
            let s: Vec<f64> = x.iter().map(|r| m.score(r)).collect();
            assert_eq!(auc(&s, &y).unwrap(), 1.0, "{fam:?}");
        }
    }

    #[test]
    fn svc_learns_a_ring() {
        // Not linearly separable: positives inside radius 1, negatives outside 2.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut x = Vec::new();
        let mut y = Vec::new();
        for i in 0..300 {
            let inside = i % 2 == 0;
            let r = if inside { rng.random_range(0.0..1.0) } else { rng.random_range(2.0..3.0) };
            let a = rng.random_range(0.0..std::f64::consts::TAU);
            x.push(vec![r * a.cos(), r * a.sin()]);
            y.push(inside);
        }
        let m = SvcModel::fit(&x, &y, &mut rng);
        let s: Vec<f64> = x.iter().map(|r| m.score(r)).collect();
        assert!(auc(&s, &y).unwrap() > 0.99);
        let lr = LogisticModel::fit(&x, &y);
        let s: Vec<f64> = x.iter().map(|r| lr.score(r)).collect();
        assert!(auc(&s, &y).unwrap() < 0.8);
    }
}
