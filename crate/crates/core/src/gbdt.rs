//! Gradient-boosted regression trees for binary classification under logistic
//! loss, trained with exact greedy second-order splits.
//!
//! Leaf values are stored before shrinkage; the ensemble's `shrinkage` is
//! applied at prediction time, so a serialized tree does not depend on it.

use serde::{Deserialize, Serialize};

use crate::preprocess::FeatureRow;
use crate::{ClientId, Error, Result};

/// Splits must improve the objective by more than this.
pub const MIN_SPLIT_GAIN: f64 = 1e-10;

/// Relative tolerance under which two split gains count as equal.
pub const GAIN_TIE_TOLERANCE: f64 = 1e-12;

/// Probability clamp used for the log-odds base score.
const PRIOR_CLAMP: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GbdtConfig {
    pub trees_per_client: usize,
    pub max_depth: usize,
    pub shrinkage: f64,
    pub min_samples_leaf: usize,
    pub lambda_l2: f64,
}

impl Default for GbdtConfig {
    fn default() -> Self {
        GbdtConfig {
            trees_per_client: 10,
            max_depth: 3,
            shrinkage: 0.3,
            min_samples_leaf: 1,
            lambda_l2: 1.0,
        }
    }
}

impl GbdtConfig {
    pub fn validate(&self) -> Result<()> {
        if self.trees_per_client == 0 {
            return Err(Error::config("trees_per_client", "must be >= 1"));
        }
        if self.max_depth == 0 {
            return Err(Error::config("max_depth", "must be >= 1"));
        }
        if !(self.shrinkage > 0.0 && self.shrinkage <= 1.0) {
            return Err(Error::config("shrinkage", "must lie in (0, 1]"));
        }
        if self.min_samples_leaf == 0 {
            return Err(Error::config("min_samples_leaf", "must be >= 1"));
        }
        if !(self.lambda_l2.is_finite() && self.lambda_l2 >= 0.0) {
            return Err(Error::config("lambda_l2", "must be finite and >= 0"));
        }
        Ok(())
    }
}

/// Wire form: `{"f":i,"t":x,"l":..,"r":..}` for splits and `{"v":x}` for leaves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TreeNode {
    Split {
        #[serde(rename = "f")]
        feature: usize,
        #[serde(rename = "t")]
        threshold: f64,
        #[serde(rename = "l")]
        left: Box<TreeNode>,
        #[serde(rename = "r")]
        right: Box<TreeNode>,
    },
    Leaf {
        #[serde(rename = "v")]
        value: f64,
    },
}

impl TreeNode {
    /// Values strictly below the threshold go left.
    pub fn route(&self, features: &[f64]) -> f64 {
        let mut node = self;
        loop {
            match node {
                TreeNode::Leaf { value } => return *value,
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    node = if features[*feature] < *threshold { left } else { right };
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        match self {
            TreeNode::Leaf { .. } => 0,
            TreeNode::Split { left, right, .. } => 1 + left.depth().max(right.depth()),
        }
    }

    fn max_feature(&self) -> Option<usize> {
        match self {
            TreeNode::Leaf { .. } => None,
            TreeNode::Split {
                feature, left, right, ..
            } => Some(
                (*feature)
                    .max(left.max_feature().unwrap_or(0))
                    .max(right.max_feature().unwrap_or(0)),
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub max_depth: usize,
    pub root: TreeNode,
}

impl Tree {
    /// Unscaled leaf value reached by `features`.
    pub fn leaf_value(&self, features: &[f64]) -> f64 {
        self.root.route(features)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalEnsemble {
    #[serde(rename = "cid")]
    pub client: ClientId,
    pub base_score: f64,
    pub shrinkage: f64,
    pub num_features: usize,
    pub trees: Vec<Tree>,
}

impl LocalEnsemble {
    fn check_features(&self, features: &[f64]) -> Result<()> {
        if features.len() != self.num_features {
            return Err(Error::Dimension {
                expected: self.num_features,
                actual: features.len(),
            });
        }
        Ok(())
    }

    pub fn predict_margin(&self, features: &[f64]) -> Result<f64> {
        self.check_features(features)?;
        let sum: f64 = self.trees.iter().map(|t| t.leaf_value(features)).sum();
        Ok(self.base_score + self.shrinkage * sum)
    }

    pub fn predict_proba(&self, features: &[f64]) -> Result<f64> {
        self.predict_margin(features).map(sigmoid)
    }

    /// Shrunk per-tree outputs written into `out` (length == number of trees).
    pub fn tree_outputs_into(&self, features: &[f64], out: &mut [f64]) -> Result<()> {
        self.check_features(features)?;
        if out.len() != self.trees.len() {
            return Err(Error::Dimension {
                expected: self.trees.len(),
                actual: out.len(),
            });
        }
        for (o, tree) in out.iter_mut().zip(&self.trees) {
            *o = self.shrinkage * tree.leaf_value(features);
        }
        Ok(())
    }

    /// Structural checks for ensembles received over the wire.
    pub fn validate(&self) -> Result<()> {
        if !(self.base_score.is_finite() && self.shrinkage > 0.0 && self.shrinkage <= 1.0) {
            return Err(Error::Domain(format!(
                "ensemble {} has invalid base_score/shrinkage",
                self.client
            )));
        }
        for tree in &self.trees {
            if tree.root.depth() > tree.max_depth {
                return Err(Error::Domain(format!("tree deeper than max_depth {}", tree.max_depth)));
            }
            if let Some(f) = tree.root.max_feature() {
                if f >= self.num_features {
                    return Err(Error::Dimension {
                        expected: self.num_features,
                        actual: f + 1,
                    });
                }
            }
        }
        Ok(())
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Mean logistic loss of margins against 0/1 targets.
pub fn logistic_loss(margins: &[f64], targets: &[f64]) -> f64 {
    let total: f64 = margins
        .iter()
        .zip(targets)
        .map(|(&m, &y)| softplus(m) - y * m)
        .sum();
    total / margins.len().max(1) as f64
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Second-order gain of splitting a node into (left, right).
pub fn split_gain(gl: f64, hl: f64, gr: f64, hr: f64, lambda: f64) -> f64 {
    let score = |g: f64, h: f64| g * g / (h + lambda);
    0.5 * (score(gl, hl) + score(gr, hr) - score(gl + gr, hl + hr))
}

/// Whether `candidate` beats `best` by more than the tie tolerance.
pub fn gain_improves(candidate: f64, best: f64) -> bool {
    candidate > best + GAIN_TIE_TOLERANCE * best.abs().max(1.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitChoice {
    pub feature: usize,
    pub threshold: f64,
    pub gain: f64,
}

struct Dataset<'a> {
    x: &'a [f64],
    width: usize,
}

impl Dataset<'_> {
    fn value(&self, row: usize, feature: usize) -> f64 {
        self.x[row * self.width + feature]
    }

    fn row(&self, row: usize) -> &[f64] {
        &self.x[row * self.width..(row + 1) * self.width]
    }
}

/// Exact greedy search over midpoints between consecutive distinct values.
/// Ties go to the lowest feature index, then the lowest threshold.
fn best_split(
    data: &Dataset<'_>,
    idx: &[usize],
    grad: &[f64],
    hess: &[f64],
    cfg: &GbdtConfig,
    scratch: &mut Vec<usize>,
) -> Option<SplitChoice> {
    let n = idx.len();
    let g_total: f64 = idx.iter().map(|&i| grad[i]).sum();
    let h_total: f64 = idx.iter().map(|&i| hess[i]).sum();
    let mut best: Option<SplitChoice> = None;
    for feature in 0..data.width {
        scratch.clear();
        scratch.extend_from_slice(idx);
        scratch.sort_by(|&a, &b| data.value(a, feature).total_cmp(&data.value(b, feature)).then(a.cmp(&b)));
        let (mut gl, mut hl) = (0.0, 0.0);
        for k in 0..n - 1 {
            let i = scratch[k];
            gl += grad[i];
            hl += hess[i];
            let left_n = k + 1;
            let v = data.value(i, feature);
            let next = data.value(scratch[k + 1], feature);
            if v == next || left_n < cfg.min_samples_leaf || n - left_n < cfg.min_samples_leaf {
                continue;
            }
            let gain = split_gain(gl, hl, g_total - gl, h_total - hl, cfg.lambda_l2);
            if gain <= MIN_SPLIT_GAIN {
                continue;
            }
            if best.is_none_or(|b| gain_improves(gain, b.gain)) {
                best = Some(SplitChoice {
                    feature,
                    threshold: v + (next - v) / 2.0,
                    gain,
                });
            }
        }
    }
    best
}

fn build_node(
    data: &Dataset<'_>,
    idx: &mut [usize],
    grad: &[f64],
    hess: &[f64],
    cfg: &GbdtConfig,
    depth: usize,
    scratch: &mut Vec<usize>,
) -> TreeNode {
    let leaf = |idx: &[usize]| {
        let g: f64 = idx.iter().map(|&i| grad[i]).sum();
        let h: f64 = idx.iter().map(|&i| hess[i]).sum();
        TreeNode::Leaf {
            value: -g / (h + cfg.lambda_l2),
        }
    };
    if depth >= cfg.max_depth || idx.len() < 2 * cfg.min_samples_leaf {
        return leaf(idx);
    }
    let Some(split) = best_split(data, idx, grad, hess, cfg, scratch) else {
        return leaf(idx);
    };
    idx.sort_by_key(|&i| data.value(i, split.feature) >= split.threshold);
    let cut = idx.partition_point(|&i| data.value(i, split.feature) < split.threshold);
    let (left_idx, right_idx) = idx.split_at_mut(cut);
    let left = build_node(data, left_idx, grad, hess, cfg, depth + 1, scratch);
    let right = build_node(data, right_idx, grad, hess, cfg, depth + 1, scratch);
    TreeNode::Split {
        feature: split.feature,
        threshold: split.threshold,
        left: Box::new(left),
        right: Box::new(right),
    }
}

/// Train a client's ensemble on its local rows.
///
/// Single-class input yields `trees_per_client` zero leaves on top of the
/// clamped log-odds prior instead of failing.
pub fn train(client: ClientId, rows: &[FeatureRow], config: &GbdtConfig) -> Result<LocalEnsemble> {
    config.validate()?;
    let first = rows
        .first()
        .ok_or_else(|| Error::Domain("cannot train on an empty row set".into()))?;
    let width = first.features.len();
    let mut x = Vec::with_capacity(rows.len() * width);
    for row in rows {
        if row.features.len() != width {
            return Err(Error::Dimension {
                expected: width,
                actual: row.features.len(),
            });
        }
        x.extend_from_slice(&row.features);
    }
    let y: Vec<f64> = rows.iter().map(|r| r.label.target()).collect();
    let positives: f64 = y.iter().sum();
    let prior = (positives / y.len() as f64).clamp(PRIOR_CLAMP, 1.0 - PRIOR_CLAMP);
    let base_score = (prior / (1.0 - prior)).ln();

    let zero_tree = || Tree {
        max_depth: config.max_depth,
        root: TreeNode::Leaf { value: 0.0 },
    };
    if positives == 0.0 || positives == y.len() as f64 {
        return Ok(LocalEnsemble {
            client,
            base_score,
            shrinkage: config.shrinkage,
            num_features: width,
            trees: (0..config.trees_per_client).map(|_| zero_tree()).collect(),
        });
    }

    let data = Dataset { x: &x, width };
    let n = rows.len();
    let mut margins = vec![base_score; n];
    let mut grad = vec![0.0; n];
    let mut hess = vec![0.0; n];
    let mut trees = Vec::with_capacity(config.trees_per_client);
    let mut idx: Vec<usize> = Vec::with_capacity(n);
    let mut scratch = Vec::with_capacity(n);
    for _ in 0..config.trees_per_client {
        for i in 0..n {
            let p = sigmoid(margins[i]);
            grad[i] = p - y[i];
            hess[i] = p * (1.0 - p);
        }
        idx.clear();
        idx.extend(0..n);
        let root = build_node(&data, &mut idx, &grad, &hess, config, 0, &mut scratch);
        let tree = Tree {
            max_depth: config.max_depth,
            root,
        };
        for (i, m) in margins.iter_mut().enumerate() {
            *m += config.shrinkage * tree.leaf_value(data.row(i));
        }
        trees.push(tree);
    }
    Ok(LocalEnsemble {
        client,
        base_score,
        shrinkage: config.shrinkage,
        num_features: width,
        trees,
    })
}

/// Number of trees shared by every ensemble, or a dimension error if ragged.
pub fn uniform_tree_count(ensembles: &[LocalEnsemble]) -> Result<usize> {
    let t = ensembles.first().map_or(0, |e| e.trees.len());
    for e in ensembles {
        if e.trees.len() != t {
            return Err(Error::Dimension {
                expected: t,
                actual: e.trees.len(),
            });
        }
    }
    Ok(t)
}

/// Concatenated shrunk tree outputs in (client id, tree) order; length K*T.
pub fn per_tree_outputs(ensembles: &[LocalEnsemble], features: &[f64]) -> Result<Vec<f64>> {
    let t = uniform_tree_count(ensembles)?;
    let mut sorted: Vec<&LocalEnsemble> = ensembles.iter().collect();
    sorted.sort_by_key(|e| e.client);
    let mut out = vec![0.0; sorted.len() * t];
    for (e, chunk) in sorted.iter().zip(out.chunks_mut(t.max(1))) {
        e.tree_outputs_into(features, &mut chunk[..t])?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::preprocess::Label;
    use crate::VehicleId;

    fn row(features: Vec<f64>, positive: bool) -> FeatureRow {
        FeatureRow {
            vehicle: VehicleId(1),
            t: 0,
            features,
            label: if positive { Label::Positive } else { Label::Negative },
            synthetic: false,
        }
    }

    #[test]
    fn separable_stump_splits_between_classes() {
        let rows: Vec<FeatureRow> = (0..10).map(|v| row(vec![v as f64], v >= 5)).collect();
        let cfg = GbdtConfig {
            trees_per_client: 1,
            max_depth: 1,
            ..Default::default()
        };
        let e = train(VehicleId(1), &rows, &cfg).unwrap();
        match &e.trees[0].root {
            TreeNode::Split { feature, threshold, .. } => {
                assert_eq!(*feature, 0);
                assert!((4.0..=5.0).contains(threshold), "threshold {threshold}");
            }
            leaf => panic!("expected a split, got {leaf:?}"),
        }
    }

    #[test]
    fn single_class_falls_back_to_prior() {
        let rows: Vec<FeatureRow> = (0..5).map(|v| row(vec![v as f64, 1.0], false)).collect();
        let e = train(VehicleId(3), &rows, &GbdtConfig::default()).unwrap();
        assert_eq!(e.trees.len(), 10);
        let expected = (PRIOR_CLAMP / (1.0 - PRIOR_CLAMP)).ln();
        for r in &rows {
            assert_eq!(e.predict_margin(&r.features).unwrap(), expected);
        }
    }

    #[test]
    fn zero_trees_is_a_config_error() {
        let rows = vec![row(vec![0.0], false), row(vec![1.0], true)];
        let cfg = GbdtConfig {
            trees_per_client: 0,
            ..Default::default()
        };
        assert!(matches!(
            train(VehicleId(1), &rows, &cfg),
            Err(Error::Config { field: "trees_per_client", .. })
        ));
    }

    #[test]
    fn manual_routing_applies_shrinkage() {
        let e = LocalEnsemble {
            client: VehicleId(1),
            base_score: 0.0,
            shrinkage: 0.3,
            num_features: 2,
            trees: vec![Tree {
                max_depth: 1,
                root: TreeNode::Split {
                    feature: 0,
                    threshold: 5.0,
                    left: Box::new(TreeNode::Leaf { value: -1.0 }),
                    right: Box::new(TreeNode::Leaf { value: 1.0 }),
                },
            }],
        };
        assert!((e.predict_margin(&[3.0, 9.0]).unwrap() + 0.3).abs() < 1e-15);
        assert!((e.predict_margin(&[7.0, 0.0]).unwrap() - 0.3).abs() < 1e-15);
        assert!(matches!(e.predict_margin(&[1.0]), Err(Error::Dimension { .. })));
        assert_eq!(per_tree_outputs(&[e.clone()], &[3.0, 0.0]).unwrap(), vec![-0.3]);
    }

    #[test]
    fn per_tree_outputs_orders_by_client() {
        let rows: Vec<FeatureRow> = (0..20).map(|v| row(vec![v as f64, (v % 3) as f64], v % 2 == 0)).collect();
        let cfg = GbdtConfig {
            trees_per_client: 3,
            ..Default::default()
        };
        let a = train(VehicleId(2), &rows[..10], &cfg).unwrap();
        let b = train(VehicleId(9), &rows[5..], &cfg).unwrap();
        let x = [4.0, 1.0];
        let ab = per_tree_outputs(&[a.clone(), b.clone()], &x).unwrap();
        let ba = per_tree_outputs(&[b.clone(), a.clone()], &x).unwrap();
        assert_eq!(ab.len(), 6);
        assert_eq!(ab, ba);
        let mut first = vec![0.0; 3];
        a.tree_outputs_into(&x, &mut first).unwrap();
        assert_eq!(&ab[..3], &first[..]);

        let mut ragged = b.clone();
        ragged.trees.pop();
        assert!(matches!(per_tree_outputs(&[a, ragged], &x), Err(Error::Dimension { .. })));
    }

    #[test]
    fn more_trees_lower_training_loss() {
        let rows: Vec<FeatureRow> = (0..60)
            .map(|i| {
                let v = ((i * 37) % 60) as f64;
                row(vec![v, ((i * 11) % 7) as f64], v > 25.0 || i % 9 == 0)
            })
            .collect();
        let targets: Vec<f64> = rows.iter().map(|r| r.label.target()).collect();
        let cfg = GbdtConfig::default();
        let e = train(VehicleId(1), &rows, &cfg).unwrap();
        // Oracle: recompute the loss after each boosting round from scratch.
        let mut prev = f64::INFINITY;
        for k in 0..=e.trees.len() {
            let margins: Vec<f64> = rows
                .iter()
                .map(|r| e.base_score + e.shrinkage * e.trees[..k].iter().map(|t| t.leaf_value(&r.features)).sum::<f64>())
                .collect();
            let loss = logistic_loss(&margins, &targets);
            assert!(loss < prev, "round {k}: {loss} !< {prev}");
            prev = loss;
        }
    }

    #[test]
    fn ensemble_json_roundtrip_is_exact() {
        let rows: Vec<FeatureRow> = (0..30).map(|v| row(vec![v as f64 / 7.0, (v * v) as f64 / 3.0], v % 4 == 0)).collect();
        let e = train(VehicleId(4), &rows, &GbdtConfig::default()).unwrap();
        let json = serde_json::to_string(&e).unwrap();
        assert!(json.contains("\"cid\":4"));
        assert!(json.contains("\"f\":"));
        let back: LocalEnsemble = serde_json::from_str(&json).unwrap();
        assert_eq!(back, e);
        back.validate().unwrap();
    }
}
