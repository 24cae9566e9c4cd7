//! CART / Gini random forest, deterministic in (data, hyperparameters, seed).

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{FeatureVector, LabeledSet, Layout};
use crate::error::{Error, Result};
use crate::seeds::SeedTree;

pub const FOREST_FORMAT: &str = "zmitosis-forest";
pub const FOREST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForestHyper {
    pub n_trees: usize,
    pub max_depth: usize,
    pub min_leaf: usize,
    /// Features examined per split; `None` means `ceil(sqrt(P * M))`.
    pub features_per_split: Option<usize>,
    pub decision_threshold: f64,
}

impl Default for ForestHyper {
    fn default() -> Self {
        ForestHyper {
            n_trees: 100,
            max_depth: 12,
            min_leaf: 2,
            features_per_split: None,
            decision_threshold: 0.5,
        }
    }
}

impl ForestHyper {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.n_trees == 0 {
            bad.push("n_trees must be >= 1".to_string());
        }
        if self.min_leaf == 0 {
            bad.push("min_leaf must be >= 1".to_string());
        }
        if self.features_per_split == Some(0) {
            bad.push("features_per_split must be >= 1".to_string());
        }
        if !(self.decision_threshold > 0.0 && self.decision_threshold < 1.0) {
            bad.push(format!(
                "decision_threshold must be in (0, 1) (got {})",
                self.decision_threshold
            ));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Training(bad.join("; ")))
        }
    }

    fn resolved_features(&self, n_features: usize) -> usize {
        self.features_per_split
            .unwrap_or_else(|| (n_features as f64).sqrt().ceil() as usize)
            .clamp(1, n_features)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum RecalibrateMode {
    /// Retrain the whole forest on the calibration slide.
    #[default]
    Refit,
    /// Keep the trees, re-pick the decision threshold on the calibration slide.
    Threshold,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TreeNode {
    Split {
        feature: usize,
        threshold: f64,
        left: Box<TreeNode>,
        right: Box<TreeNode>,
    },
    Leaf {
        /// Positive-class fraction of the training rows in this leaf.
        p: f64,
        n: usize,
    },
}

impl TreeNode {
    fn predict(&self, x: &[f64]) -> f64 {
        let mut node = self;
        loop {
            match node {
                TreeNode::Leaf { p, .. } => return *p,
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    node = if x[*feature] <= *threshold { left } else { right };
                }
            }
        }
    }

    /// Path of left/right turns taken by `x`; equal paths mean the same leaf.
    pub fn leaf_path(&self, x: &[f64]) -> Vec<bool> {
        let mut path = Vec::new();
        let mut node = self;
        while let TreeNode::Split {
            feature,
            threshold,
            left,
            right,
        } = node
        {
            let go_left = x[*feature] <= *threshold;
            path.push(go_left);
            node = if go_left { left } else { right };
        }
        path
    }

    fn check(&self, n_features: usize) -> Result<()> {
        match self {
            TreeNode::Leaf { p, .. } if !(0.0..=1.0).contains(p) => {
                Err(Error::Contract(format!("leaf fraction {p} outside [0, 1]")))
            }
            TreeNode::Leaf { .. } => Ok(()),
            TreeNode::Split { feature, left, right, .. } => {
                if *feature >= n_features {
                    return Err(Error::Contract(format!(
                        "split on feature {feature}, layout has {n_features}"
                    )));
                }
                left.check(n_features)?;
                right.check(n_features)
            }
        }
    }

    pub fn depth(&self) -> usize {
        match self {
            TreeNode::Leaf { .. } => 0,
            TreeNode::Split { left, right, .. } => 1 + left.depth().max(right.depth()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestModel {
    pub format: String,
    pub version: u32,
    pub hyper: ForestHyper,
    pub seed: u64,
    pub layout: Layout,
    pub decision_threshold: f64,
    pub trees: Vec<TreeNode>,
}

impl ForestModel {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let m: ForestModel = serde_json::from_str(s)?;
        if m.format != FOREST_FORMAT || m.version != FOREST_VERSION {
            return Err(Error::Contract(format!(
                "unsupported model document {} v{}",
                m.format, m.version
            )));
        }
        if m.trees.is_empty() {
            return Err(Error::Contract("forest has no trees".into()));
        }
        for t in &m.trees {
            t.check(m.layout.len())?;
        }
        Ok(m)
    }

    pub fn classify(&self, fv: &FeatureVector) -> Result<bool> {
        Ok(predict_proba(self, fv)? >= self.decision_threshold)
    }

    fn proba_raw(&self, x: &[f64]) -> f64 {
        let s: f64 = self.trees.iter().map(|t| t.predict(x)).sum();
        (s / self.trees.len() as f64).clamp(0.0, 1.0)
    }
}

/// Mean positive fraction of the leaves reached in every tree.
pub fn predict_proba(model: &ForestModel, fv: &FeatureVector) -> Result<f64> {
    if *fv.layout != model.layout {
        return Err(Error::Contract(format!(
            "feature layout {:?} x {:?} does not match model layout {:?} x {:?}",
            fv.layout.plane_offsets_um,
            fv.layout.model_ids,
            model.layout.plane_offsets_um,
            model.layout.model_ids
        )));
    }
    if model.trees.is_empty() {
        return Err(Error::Contract("forest has no trees".into()));
    }
    Ok(model.proba_raw(&fv.values))
}

/// Predicts every row of a set (layout checked once).
pub fn predict_rows(model: &ForestModel, layout: &Arc<Layout>, rows: &[Vec<f64>]) -> Result<Vec<f64>> {
    if **layout != model.layout {
        return Err(Error::Contract("feature layout does not match model layout".into()));
    }
    Ok(crate::par::map(rows, |x| model.proba_raw(x)))
}

struct Grower<'a> {
    x: &'a [Vec<f64>],
    y: &'a [bool],
    hyper: &'a ForestHyper,
    n_features: usize,
    k_features: usize,
}

struct Split {
    feature: usize,
    threshold: f64,
}

impl Grower<'_> {
    fn leaf(&self, idx: &[usize]) -> TreeNode {
        let pos = idx.iter().filter(|&&i| self.y[i]).count();
        TreeNode::Leaf {
            p: pos as f64 / idx.len().max(1) as f64,
            n: idx.len(),
        }
    }

    fn grow(&self, idx: &mut [usize], depth: usize, rng: &mut impl Rng) -> TreeNode {
        let n = idx.len();
        let pos = idx.iter().filter(|&&i| self.y[i]).count();
        if depth >= self.hyper.max_depth || n < 2 * self.hyper.min_leaf || pos == 0 || pos == n {
            return self.leaf(idx);
        }
        let Some(split) = self.best_split(idx, pos, rng) else {
            return self.leaf(idx);
        };
        // stable partition keeps the row order of each side deterministic
        let (mut l, mut r): (Vec<usize>, Vec<usize>) = idx
            .iter()
            .partition(|&&i| self.x[i][split.feature] <= split.threshold);
        let left = self.grow(&mut l, depth + 1, rng);
        let right = self.grow(&mut r, depth + 1, rng);
        TreeNode::Split {
            feature: split.feature,
            threshold: split.threshold,
            left: Box::new(left),
            right: Box::new(right),
        }
    }

    fn draw_features(&self, rng: &mut impl Rng) -> Vec<usize> {
        let mut all: Vec<usize> = (0..self.n_features).collect();
        for i in 0..self.k_features {
            let j = rng.random_range(i..self.n_features);
            all.swap(i, j);
        }
        let mut chosen = all[..self.k_features].to_vec();
        chosen.sort_unstable();
        chosen
    }

    /// Best Gini split among drawn features. The weighted child impurity is
    /// `n - sum(c^2)/n_side` over both sides, so we maximise
    /// `sum(c^2)/n_left + sum(c^2)/n_right`. Ties keep the earlier
    /// (feature, threshold).
    fn best_split(&self, idx: &[usize], pos: usize, rng: &mut impl Rng) -> Option<Split> {
        let n = idx.len();
        let neg = n - pos;
        let parent = ((pos * pos + neg * neg) as f64) / n as f64;
        let min_leaf = self.hyper.min_leaf;
        let mut best: Option<(f64, Split)> = None;
        let mut col: Vec<(f64, bool)> = Vec::with_capacity(n);
        for f in self.draw_features(rng) {
            col.clear();
            col.extend(idx.iter().map(|&i| (self.x[i][f], self.y[i])));
            col.sort_by(|a, b| a.0.total_cmp(&b.0));
            let (mut lp, mut ln) = (0usize, 0usize);
            for k in 0..n - 1 {
                if col[k].1 {
                    lp += 1;
                } else {
                    ln += 1;
                }
                let nl = k + 1;
                if col[k].0 == col[k + 1].0 || nl < min_leaf || n - nl < min_leaf {
                    continue;
                }
                let (rp, rn) = (pos - lp, neg - ln);
                let score = ((lp * lp + ln * ln) as f64) / nl as f64
                    + ((rp * rp + rn * rn) as f64) / (n - nl) as f64;
                if score - parent <= 1e-12 {
                    continue;
                }
                if best.as_ref().is_none_or(|(b, _)| score > *b) {
                    let threshold = 0.5 * (col[k].0 + col[k + 1].0);
                    best = Some((score, Split { feature: f, threshold }));
                }
            }
        }
        best.map(|(_, s)| s)
    }
}

/// Trains a forest. Tree `t` draws its bootstrap rows and split features from
/// `SeedTree::new(seed) / "tree" / t`, so any tree can be rebuilt alone.
pub fn train_forest(data: &LabeledSet, hyper: &ForestHyper, seed: u64) -> Result<ForestModel> {
    hyper.validate()?;
    let n = data.len();
    if n == 0 {
        return Err(Error::Training("empty training set".into()));
    }
    if data.features.len() != n {
        return Err(Error::Training("features and labels differ in length".into()));
    }
    let pos = data.n_positive();
    if pos == 0 || pos == n {
        return Err(Error::Training(format!(
            "training data needs both classes ({pos} positive of {n})"
        )));
    }
    let n_features = data.layout.len();
    if let Some(bad) = data.features.iter().position(|r| r.len() != n_features) {
        return Err(Error::Training(format!(
            "row {bad} has the wrong width for the layout"
        )));
    }
    let grower = Grower {
        x: &data.features,
        y: &data.labels,
        hyper,
        n_features,
        k_features: hyper.resolved_features(n_features),
    };
    let root = SeedTree::new(seed).child("tree");
    let trees = crate::par::map_range(hyper.n_trees, |t| {
        let mut rng = root.index(t as u64).rng();
        let mut rows = bootstrap_rows(n, &mut rng);
        grower.grow(&mut rows, 0, &mut rng)
    });
    let mut resolved = hyper.clone();
    resolved.features_per_split = Some(grower.k_features);
    Ok(ForestModel {
        format: FOREST_FORMAT.into(),
        version: FOREST_VERSION,
        hyper: resolved,
        seed,
        layout: data.layout.clone(),
        decision_threshold: hyper.decision_threshold,
        trees,
    })
}

fn bootstrap_rows(n: usize, rng: &mut impl Rng) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..n)).collect()
}

/// Bootstrap rows of tree `t` for a given seed (exposed for reproducibility checks).
pub fn tree_bootstrap_rows(seed: u64, t: usize, n: usize) -> Vec<usize> {
    bootstrap_rows(n, &mut SeedTree::new(seed).child("tree").index(t as u64).rng())
}

/// Full refit on one calibration slide.
pub fn recalibrate(hyper: &ForestHyper, calib: &LabeledSet, seed: u64) -> Result<ForestModel> {
    train_forest(calib, hyper, seed)
}

/// Keeps the trees and picks the threshold maximising F1 on the calibration
/// rows (smallest such threshold).
pub fn recalibrate_threshold(model: &ForestModel, calib: &LabeledSet) -> Result<ForestModel> {
    if calib.layout != model.layout {
        return Err(Error::Contract("calibration layout does not match model layout".into()));
    }
    let pos = calib.n_positive();
    if pos == 0 || pos == calib.len() {
        return Err(Error::Training("calibration data needs both classes".into()));
    }
    let mut scored: Vec<(f64, bool)> = calib
        .features
        .iter()
        .zip(&calib.labels)
        .map(|(x, &y)| (model.proba_raw(x), y))
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut best = (f64::NEG_INFINITY, model.decision_threshold);
    let mut tp = 0usize;
    for (k, &(p, y)) in scored.iter().enumerate() {
        if y {
            tp += 1;
        }
        if k + 1 < scored.len() && scored[k + 1].0 == p {
            continue;
        }
        let predicted = k + 1;
        let f1 = 2.0 * tp as f64 / (predicted + pos) as f64;
        // thresholds descend, so on ties the later (smaller) one wins
        if f1 > best.0 + 1e-12 {
            best = (f1, p);
        } else if (f1 - best.0).abs() <= 1e-12 {
            best.1 = p;
        }
    }
    let mut out = model.clone();
    out.decision_threshold = best.1.clamp(f64::MIN_POSITIVE, 1.0);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn one_d(xs: &[(f64, bool)]) -> LabeledSet {
        let mut s = LabeledSet::new(Layout::new(vec![0.0], vec!["m".into()]).unwrap());
        for &(x, y) in xs {
            s.push(vec![x], y).unwrap();
        }
        s
    }

    fn fv(model: &ForestModel, v: Vec<f64>) -> FeatureVector {
        FeatureVector::new(v, Arc::new(model.layout.clone())).unwrap()
    }

    #[test]
    fn single_class_is_an_error() {
        let s = one_d(&[(0.1, true), (0.2, true)]);
        assert!(matches!(train_forest(&s, &ForestHyper::default(), 0), Err(Error::Training(_))));
    }

    /// Exhaustive split oracle: every midpoint, weighted Gini of both sides.
    fn best_gini_threshold(xs: &[(f64, bool)]) -> (f64, f64) {
        let mut vals: Vec<f64> = xs.iter().map(|p| p.0).collect();
        vals.sort_by(f64::total_cmp);
        vals.dedup();
        let gini = |v: &[&(f64, bool)]| {
            if v.is_empty() {
                return 0.0;
            }
            let p = v.iter().filter(|x| x.1).count() as f64 / v.len() as f64;
            v.len() as f64 * (1.0 - p * p - (1.0 - p) * (1.0 - p))
        };
        let mut best = (f64::INFINITY, f64::NAN);
        for w in vals.windows(2) {
            let t = 0.5 * (w[0] + w[1]);
            let l: Vec<_> = xs.iter().filter(|p| p.0 <= t).collect();
            let r: Vec<_> = xs.iter().filter(|p| p.0 > t).collect();
            let imp = gini(&l) + gini(&r);
            if imp < best.0 {
                best = (imp, t);
            }
        }
        best
    }

    #[test]
    fn depth_one_stump_matches_oracle() {
        let data = [(0.1, false), (0.2, false), (0.8, true), (0.9, true)];
        let hyper = ForestHyper {
            n_trees: 1,
            max_depth: 1,
            min_leaf: 1,
            ..Default::default()
        };
        // a bootstrap can drop a class; pick the first seed whose resample keeps both
        let seed = (0..100)
            .find(|&s| {
                let rows = tree_bootstrap_rows(s, 0, 4);
                rows.iter().any(|&i| i < 2) && rows.iter().any(|&i| i >= 2)
            })
            .unwrap();
        let m = train_forest(&one_d(&data), &hyper, seed).unwrap();
        let rows = tree_bootstrap_rows(seed, 0, 4);
        let resampled: Vec<(f64, bool)> = rows.iter().map(|&i| data[i]).collect();
        let (_, oracle_t) = best_gini_threshold(&resampled);
        match &m.trees[0] {
            TreeNode::Split { threshold, feature, .. } => {
                assert_eq!(*feature, 0);
                assert!(*threshold > 0.2 && *threshold < 0.8);
                assert_eq!(*threshold, oracle_t);
            }
            other => panic!("expected a split, got {other:?}"),
        }
        for &(x, y) in &data {
            assert_eq!(m.classify(&fv(&m, vec![x])).unwrap(), y);
        }
        assert!(predict_proba(&m, &fv(&m, vec![0.05])).unwrap() < 0.5);
        assert!(predict_proba(&m, &fv(&m, vec![0.95])).unwrap() > 0.5);
    }

    #[test]
    fn serialization_is_deterministic_and_round_trips() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let mut s = LabeledSet::new(Layout::new(vec![0.0, 0.6], vec!["a".into(), "b".into()]).unwrap());
        for _ in 0..120 {
            let y = rng.random_bool(0.4);
            let base = if y { 0.6 } else { 0.3 };
            s.push((0..4).map(|_| base + rng.random_range(-0.25..0.25)).collect(), y).unwrap();
        }
        let h = ForestHyper { n_trees: 15, ..Default::default() };
        let a = train_forest(&s, &h, 9).unwrap().to_json().unwrap();
        let b = train_forest(&s, &h, 9).unwrap().to_json().unwrap();
        assert_eq!(a, b);
        let c = train_forest(&s, &h, 10).unwrap().to_json().unwrap();
        assert_ne!(a, c);
        let back = ForestModel::from_json(&a).unwrap();
        assert_eq!(back.to_json().unwrap(), a);
        assert_eq!(back.hyper.features_per_split, Some(2));
    }

    #[test]
    fn layout_mismatch_is_a_contract_error() {
        let m = train_forest(&one_d(&[(0.1, false), (0.9, true), (0.2, false), (0.8, true)]), &ForestHyper::default(), 1).unwrap();
        let other = Arc::new(Layout::new(vec![0.0, 0.6], vec!["m".into()]).unwrap());
        let x = FeatureVector::new(vec![0.5, 0.5], other).unwrap();
        assert!(matches!(predict_proba(&m, &x), Err(Error::Contract(_))));
    }

    #[test]
    fn pure_positive_forest_predicts_one() {
        let m = ForestModel {
            format: FOREST_FORMAT.into(),
            version: FOREST_VERSION,
            hyper: ForestHyper::default(),
            seed: 0,
            layout: Layout::new(vec![0.0], vec!["m".into()]).unwrap(),
            decision_threshold: 0.5,
            trees: vec![TreeNode::Leaf { p: 1.0, n: 3 }; 3],
        };
        assert_eq!(predict_proba(&m, &fv(&m, vec![0.3])).unwrap(), 1.0);
        let empty = ForestModel { trees: vec![], ..m.clone() };
        assert!(ForestModel::from_json(&serde_json::to_string(&empty).unwrap()).is_err());
        assert!(predict_proba(&empty, &fv(&m, vec![0.3])).is_err());
        let bad = ForestModel {
            trees: vec![TreeNode::Split {
                feature: 3,
                threshold: 0.5,
                left: Box::new(TreeNode::Leaf { p: 0.0, n: 1 }),
                right: Box::new(TreeNode::Leaf { p: 1.0, n: 1 }),
            }],
            ..m
        };
        assert!(ForestModel::from_json(&serde_json::to_string(&bad).unwrap()).is_err());
    }

    #[test]
    fn bootstrap_rows_are_pure() {
        assert_eq!(tree_bootstrap_rows(4, 2, 50), tree_bootstrap_rows(4, 2, 50));
        assert_ne!(tree_bootstrap_rows(4, 2, 50), tree_bootstrap_rows(4, 3, 50));
    }

    #[test]
    fn threshold_recalibration_keeps_trees() {
        let s = one_d(&[(0.1, false), (0.2, false), (0.3, true), (0.8, true), (0.9, true), (0.15, false)]);
        let m = train_forest(&s, &ForestHyper { n_trees: 10, min_leaf: 1, ..Default::default() }, 2).unwrap();
        let r = recalibrate_threshold(&m, &s).unwrap();
        assert_eq!(r.trees, m.trees);
        assert!(r.decision_threshold > 0.0 && r.decision_threshold <= 1.0);
    }

    proptest! {
        #[test]
        fn proba_in_unit_interval(seed in any::<u64>(), q in proptest::collection::vec(-1.0f64..2.0, 3)) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut s = LabeledSet::new(Layout::new(vec![0.0], vec!["a".into(), "b".into(), "c".into()]).unwrap());
            for i in 0..30 {
                s.push((0..3).map(|_| rng.random::<f64>()).collect(), i % 3 == 0).unwrap();
            }
            let m = train_forest(&s, &ForestHyper { n_trees: 5, ..Default::default() }, seed).unwrap();
            let p = predict_proba(&m, &fv(&m, q)).unwrap();
            prop_assert!((0.0..=1.0).contains(&p));
            for t in &m.trees {
                prop_assert!(t.depth() <= 12);
            }
        }
    }
}
