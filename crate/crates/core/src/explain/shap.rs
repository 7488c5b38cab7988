//! Exact Shapley attribution for tree ensembles, plus the brute-force
//! oracle it is verified against.
//!
//! Both use the interventional value function: the worth of a feature
//! subset S is the expected margin when features in S take the explained
//! window's values and the rest are drawn from a background window, averaged
//! over the background set. For a single tree and a single background row
//! this expectation is exact and cheap: walking the tree, every decision
//! either follows both rows down the same child (no feature commitment) or
//! splits the walk into an x-branch and a z-branch, committing that feature.
//! Each leaf is then reached through exactly one set of commitments, and its
//! value enters the Shapley sum with closed-form weight
//! `W(p, q) = p!·q!/(p+q+1)!` — the total weight of all orderings in which
//! the committed x-features precede enough of the committed z-features.

use crate::gbt::{GBTModel, RegressionTree, TreeNode};

use super::{Attribution, BackgroundSet, ExplainError, Space};

/// Largest active set `shapley_bruteforce` will enumerate (2¹² subsets).
pub const BRUTEFORCE_MAX_FEATURES: usize = 12;

#[derive(Clone, Copy, PartialEq, Eq)]
enum Side {
    Free,
    X,
    Z,
}

/// `p!·q!/(p+q+1)!` — exact in f64 for the tree depths in play.
fn ordering_weight(p: usize, q: usize) -> f64 {
    let factorial = |n: usize| (1..=n).map(|i| i as f64).product::<f64>();
    factorial(p) * factorial(q) / factorial(p + q + 1)
}

struct TreeWalk<'a> {
    nodes: &'a [TreeNode],
    x: &'a [f64],
    z: &'a [f64],
    assign: Vec<Side>,
    committed: Vec<usize>,
    phi: &'a mut [f64],
}

impl TreeWalk<'_> {
    fn walk(&mut self, idx: usize, n_x: usize, n_z: usize) {
        match &self.nodes[idx] {
            TreeNode::Leaf { weight, .. } => {
                if n_x > 0 {
                    let w = weight * ordering_weight(n_x - 1, n_z);
                    for &d in &self.committed {
                        if self.assign[d] == Side::X {
                            self.phi[d] += w;
                        }
                    }
                }
                if n_z > 0 {
                    let w = weight * ordering_weight(n_x, n_z - 1);
                    for &d in &self.committed {
                        if self.assign[d] == Side::Z {
                            self.phi[d] -= w;
                        }
                    }
                }
            }
            TreeNode::Internal {
                feature,
                threshold,
                left,
                right,
                ..
            } => {
                let (d, thr) = (*feature, *threshold);
                let (cl, cr) = (*left, *right);
                let cx = if self.x[d] < thr { cl } else { cr };
                let cz = if self.z[d] < thr { cl } else { cr };
                if cx == cz {
                    self.walk(cx, n_x, n_z);
                    return;
                }
                match self.assign[d] {
                    Side::X => self.walk(cx, n_x, n_z),
                    Side::Z => self.walk(cz, n_x, n_z),
                    Side::Free => {
                        self.committed.push(d);
                        self.assign[d] = Side::X;
                        self.walk(cx, n_x + 1, n_z);
                        self.assign[d] = Side::Z;
                        self.walk(cz, n_x, n_z + 1);
                        self.assign[d] = Side::Free;
                        self.committed.pop();
                    }
                }
            }
        }
    }
}

/// Shapley values of one tree's output between `x` and one background row
/// `z`, added into `phi`.
fn tree_phi(tree: &RegressionTree, x: &[f64], z: &[f64], phi: &mut [f64]) {
    TreeWalk {
        nodes: &tree.nodes,
        x,
        z,
        assign: vec![Side::Free; x.len()],
        committed: Vec::new(),
        phi,
    }
    .walk(0, 0, 0);
}

fn check_features(
    context: &'static str,
    features: &[f64],
    want: usize,
) -> Result<(), ExplainError> {
    if features.len() != want {
        return Err(ExplainError::WidthMismatch {
            context,
            got: features.len(),
            want,
        });
    }
    Ok(())
}

/// Exact interventional Shapley values of the ensemble margin. The base
/// value is the mean margin over the background set, and
/// `base_value + Σ per_minute` reproduces `margin(features)` to within
/// accumulated rounding (≤ 1e-9 in practice).
pub fn tree_shap(
    model: &GBTModel,
    features: &[f64],
    background: &BackgroundSet,
) -> Result<Attribution, ExplainError> {
    check_features("features", features, model.n_features)?;
    check_features("background", &background.windows()[0], model.n_features)?;

    // Same accumulation order as `GBTModel::margin`, so model_output is
    // bit-identical to what the predictor reports.
    let margin = |w: &[f64]| {
        let mut m = model.base_score;
        for tree in &model.trees {
            m += tree.output(w);
        }
        m
    };
    let width = model.n_features;
    let mut phi = vec![0.0; width];
    let mut base = 0.0;
    for z in background.windows() {
        for tree in &model.trees {
            tree_phi(tree, features, z, &mut phi);
        }
        base += margin(z);
    }
    let n = background.len() as f64;
    phi.iter_mut().for_each(|v| *v /= n);
    Ok(Attribution {
        per_minute: phi,
        base_value: base / n,
        model_output: margin(features),
        space: Space::LogOdds,
    })
}

/// Exact Shapley values by full subset enumeration, for any scoring
/// function. Features outside `active` stay fixed at the explained window's
/// values and receive zero attribution; features in `active` but absent
/// from a coalition are drawn from the background rows and averaged. Only
/// practical for small active sets — this is the testing oracle.
pub fn shapley_bruteforce<F>(
    f: F,
    features: &[f64],
    background: &BackgroundSet,
    active: &[usize],
    space: Space,
) -> Result<Attribution, ExplainError>
where
    F: Fn(&[f64]) -> f64,
{
    let width = features.len();
    check_features("background", &background.windows()[0], width)?;
    let k = active.len();
    if k > BRUTEFORCE_MAX_FEATURES {
        return Err(ExplainError::TooManyActiveFeatures {
            got: k,
            max: BRUTEFORCE_MAX_FEATURES,
        });
    }
    let mut seen = vec![false; width];
    for &d in active {
        if d >= width {
            return Err(ExplainError::InvalidActiveSet(format!(
                "feature {d} out of range for width {width}"
            )));
        }
        if seen[d] {
            return Err(ExplainError::InvalidActiveSet(format!(
                "feature {d} listed twice"
            )));
        }
        seen[d] = true;
    }

    // Worth of every coalition: bit j of the mask = active[j] takes x's value.
    let n_bg = background.len() as f64;
    let mut worth = vec![0.0; 1 << k];
    let mut probe = features.to_vec();
    for (mask, w) in worth.iter_mut().enumerate() {
        let mut total = 0.0;
        for z in background.windows() {
            for (j, &d) in active.iter().enumerate() {
                probe[d] = if mask & (1 << j) != 0 { features[d] } else { z[d] };
            }
            total += f(&probe);
        }
        *w = total / n_bg;
        for &d in active {
            probe[d] = features[d];
        }
    }

    let factorial = |n: usize| (1..=n).map(|i| i as f64).product::<f64>();
    let full = (1usize << k) - 1;
    let mut phi = vec![0.0; width];
    for (j, &d) in active.iter().enumerate() {
        let bit = 1usize << j;
        let mut total = 0.0;
        for mask in 0..=full {
            if mask & bit != 0 {
                continue;
            }
            let s = mask.count_ones() as usize;
            let weight = factorial(s) * factorial(k - s - 1) / factorial(k);
            total += weight * (worth[mask | bit] - worth[mask]);
        }
        phi[d] = total;
    }

    Ok(Attribution {
        per_minute: phi,
        base_value: worth[0],
        model_output: worth[full],
        space,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gbt::{train_gbt, GBTConfig};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn leaf(weight: f64) -> TreeNode {
        TreeNode::Leaf { weight, cover: 1.0 }
    }

    fn split(feature: usize, threshold: f64, left: usize, right: usize) -> TreeNode {
        TreeNode::Internal {
            feature,
            threshold,
            left,
            right,
            cover: 1.0,
        }
    }

    fn ensemble(n_features: usize, trees: Vec<RegressionTree>, base_score: f64) -> GBTModel {
        GBTModel {
            base_score,
            trees,
            config: GBTConfig::default(),
            n_features,
        }
    }

    fn background(rows: Vec<Vec<f64>>) -> BackgroundSet {
        BackgroundSet::new(rows).unwrap()
    }

    #[test]
    fn ordering_weights_match_small_cases() {
        assert_eq!(ordering_weight(0, 0), 1.0);
        assert_eq!(ordering_weight(1, 0), 0.5);
        assert_eq!(ordering_weight(0, 1), 0.5);
        assert_eq!(ordering_weight(1, 1), 1.0 / 6.0);
        assert_eq!(ordering_weight(2, 1), 1.0 / 12.0);
    }

    #[test]
    fn single_leaf_tree_attributes_nothing() {
        let model = ensemble(
            5,
            vec![RegressionTree { nodes: vec![leaf(0.7)] }],
            0.3,
        );
        let bg = background(vec![vec![0.0; 5], vec![1.0; 5]]);
        let att = tree_shap(&model, &[2.0, -1.0, 0.5, 0.0, 3.0], &bg).unwrap();
        assert_eq!(att.per_minute, vec![0.0; 5]);
        assert_eq!(att.base_value, 1.0);
        assert_eq!(att.model_output, 1.0);
        assert_eq!(att.space, Space::LogOdds);
    }

    #[test]
    fn depth_one_stump_isolates_its_feature() {
        let tree = RegressionTree {
            nodes: vec![split(2, 0.0, 1, 2), leaf(-1.0), leaf(2.0)],
        };
        let model = ensemble(4, vec![tree], 0.0);
        // x goes right; one background row goes left, one right.
        let x = [9.0, 9.0, 1.0, 9.0];
        let bg = background(vec![vec![0.0, 0.0, -1.0, 0.0], vec![0.0, 0.0, 3.0, 0.0]]);
        let att = tree_shap(&model, &x, &bg).unwrap();
        for (d, v) in att.per_minute.iter().enumerate() {
            if d == 2 {
                // f(x)=2; backgrounds give −1 and 2, so φ = mean gap = 1.5.
                assert!((v - 1.5).abs() < 1e-15, "phi[2] = {v}");
            } else {
                assert_eq!(*v, 0.0, "phi[{d}] should be untouched");
            }
        }
        assert!((att.base_value - 0.5).abs() < 1e-15);
        assert_eq!(att.model_output, 2.0);
        assert!(att.residual().abs() < 1e-12);
    }

    #[test]
    fn matches_bruteforce_on_trained_small_ensembles() {
        for seed in [1u64, 2, 3] {
            let width = 7;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let windows: Vec<Vec<f64>> = (0..120)
                .map(|_| (0..width).map(|_| rng.gen_range(-2.0..2.0)).collect())
                .collect();
            let labels: Vec<u8> = windows
                .iter()
                .map(|w| u8::from(w[1] + w[4] * w[6] > 0.3))
                .collect();
            let model = train_gbt(
                &windows,
                &labels,
                &GBTConfig {
                    n_trees: 25,
                    max_depth: 3,
                    ..GBTConfig::default()
                },
            )
            .unwrap();
            let bg = BackgroundSet::sample(&windows, 6, seed ^ 0xbeef).unwrap();
            let active: Vec<usize> = (0..width).collect();

            for case in 0..5 {
                let x: Vec<f64> =
                    (0..width).map(|_| rng.gen_range(-2.0..2.0)).collect();
                let exact = tree_shap(&model, &x, &bg).unwrap();
                let brute = shapley_bruteforce(
                    |w| model.margin(w).unwrap(),
                    &x,
                    &bg,
                    &active,
                    Space::LogOdds,
                )
                .unwrap();
                for d in 0..width {
                    let gap = (exact.per_minute[d] - brute.per_minute[d]).abs();
                    assert!(gap <= 1e-9, "seed {seed} case {case} feature {d}: {gap}");
                }
                assert!((exact.base_value - brute.base_value).abs() <= 1e-9);
                assert!((exact.model_output - brute.model_output).abs() <= 1e-12);
                assert!(exact.residual().abs() <= 1e-9, "{}", exact.residual());
            }
        }
    }

    #[test]
    fn local_accuracy_holds_on_every_example() {
        let width = 10;
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let windows: Vec<Vec<f64>> = (0..200)
            .map(|_| (0..width).map(|_| rng.gen_range(-2.0..2.0)).collect())
            .collect();
        let labels: Vec<u8> = windows.iter().map(|w| u8::from(w[9] < -0.5)).collect();
        let model = train_gbt(
            &windows,
            &labels,
            &GBTConfig {
                n_trees: 60,
                ..GBTConfig::default()
            },
        )
        .unwrap();
        let bg = BackgroundSet::sample(&windows, 16, 5).unwrap();
        for w in windows.iter().take(50) {
            let att = tree_shap(&model, w, &bg).unwrap();
            assert!(
                att.residual().abs() <= 1e-9,
                "residual {} for window {w:?}",
                att.residual()
            );
            assert!((att.model_output - model.margin(w).unwrap()).abs() == 0.0);
        }
    }

    #[test]
    fn symmetry_axiom_holds_for_both_methods() {
        // Two identical stumps on features 1 and 2, identical inputs and
        // backgrounds in those coordinates.
        let stump = |feature| RegressionTree {
            nodes: vec![split(feature, 0.5, 1, 2), leaf(-1.0), leaf(1.0)],
        };
        let model = ensemble(4, vec![stump(1), stump(2)], 0.0);
        let x = [0.0, 2.0, 2.0, 0.0];
        let bg = background(vec![vec![1.0, 0.0, 0.0, 1.0], vec![-1.0, 1.0, 1.0, -1.0]]);

        let exact = tree_shap(&model, &x, &bg).unwrap();
        assert!((exact.per_minute[1] - exact.per_minute[2]).abs() < 1e-12);

        let brute = shapley_bruteforce(
            |w| model.margin(w).unwrap(),
            &x,
            &bg,
            &[0, 1, 2, 3],
            Space::LogOdds,
        )
        .unwrap();
        assert!((brute.per_minute[1] - brute.per_minute[2]).abs() < 1e-12);
        assert!(brute.per_minute[1].abs() > 0.1, "symmetric pair should matter");
    }

    #[test]
    fn dummy_axiom_attributes_zero_to_ignored_features() {
        let f = |w: &[f64]| 2.0 * w[0] - w[2];
        let x = [1.5, -3.0, 0.25, 7.0];
        let bg = background(vec![vec![0.0, 5.0, 1.0, -2.0], vec![1.0, -5.0, 0.5, 4.0]]);
        let att = shapley_bruteforce(f, &x, &bg, &[0, 1, 2, 3], Space::LogOdds).unwrap();
        assert_eq!(att.per_minute[1], 0.0);
        assert_eq!(att.per_minute[3], 0.0);
        // Additive model: each feature gets exactly its own gap to the mean.
        let mean0 = 0.5;
        let mean2 = 0.75;
        assert!((att.per_minute[0] - 2.0 * (x[0] - mean0)).abs() < 1e-12);
        assert!((att.per_minute[2] - -(x[2] - mean2)).abs() < 1e-12);
        assert!(att.residual().abs() < 1e-12);
    }

    #[test]
    fn bruteforce_rejects_bad_active_sets() {
        let bg = background(vec![vec![0.0; 14]]);
        let x = vec![0.0; 14];
        let all: Vec<usize> = (0..13).collect();
        assert!(matches!(
            shapley_bruteforce(|_| 0.0, &x, &bg, &all, Space::LogOdds),
            Err(ExplainError::TooManyActiveFeatures { got: 13, max: 12 })
        ));
        assert!(matches!(
            shapley_bruteforce(|_| 0.0, &x, &bg, &[0, 0], Space::LogOdds),
            Err(ExplainError::InvalidActiveSet(_))
        ));
        assert!(matches!(
            shapley_bruteforce(|_| 0.0, &x, &bg, &[14], Space::LogOdds),
            Err(ExplainError::InvalidActiveSet(_))
        ));
    }

    #[test]
    fn tree_shap_rejects_width_mismatches() {
        let model = ensemble(3, vec![RegressionTree { nodes: vec![leaf(1.0)] }], 0.0);
        let bg = background(vec![vec![0.0; 3]]);
        assert!(matches!(
            tree_shap(&model, &[0.0; 4], &bg),
            Err(ExplainError::WidthMismatch { .. })
        ));
        let wide_bg = background(vec![vec![0.0; 5]]);
        assert!(matches!(
            tree_shap(&model, &[0.0; 3], &wide_bg),
            Err(ExplainError::WidthMismatch { .. })
        ));
    }
}
