//! Ensemble of extremely randomized regression trees.
//!
//! Each tree is grown on the full training set (no bootstrap). At every node
//! a fixed number of candidate splits is drawn — a random feature paired with
//! a uniformly random threshold inside that feature's range in the node — and
//! the candidate with the largest variance reduction wins. Leaves predict the
//! mean target of their samples; the ensemble predicts the mean over trees.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seeding::derive_rng;

#[derive(Debug, Error, PartialEq)]
pub enum TreesError {
    #[error("empty training set")]
    EmptyTrainingSet,
    #[error("expected {expected} features, got {got} (row {row})")]
    DimensionMismatch {
        expected: usize,
        got: usize,
        row: usize,
    },
    #[error("{inputs} input rows but {targets} targets")]
    LengthMismatch { inputs: usize, targets: usize },
    #[error("invalid tree parameters: {0}")]
    InvalidParams(String),
}

/// Hyperparameters of the ensemble.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TreeParams {
    /// Number of trees.
    pub n_trees: usize,
    /// Random split candidates per node; `None` uses the input dimensionality.
    pub k_splits: Option<usize>,
    /// Minimum node size eligible for splitting.
    pub n_min: usize,
    /// Seed for all per-tree random streams.
    pub seed: u64,
}

impl Default for TreeParams {
    fn default() -> Self {
        Self {
            n_trees: 50,
            k_splits: None,
            n_min: 2,
            seed: 0,
        }
    }
}

impl TreeParams {
    pub fn with_seed(self, seed: u64) -> Self {
        Self { seed, ..self }
    }

    fn validate(&self) -> Result<(), TreesError> {
        if self.n_trees < 1 {
            return Err(TreesError::InvalidParams("n_trees must be >= 1".into()));
        }
        if self.k_splits == Some(0) {
            return Err(TreesError::InvalidParams("k_splits must be >= 1".into()));
        }
        if self.n_min < 2 {
            return Err(TreesError::InvalidParams("n_min must be >= 2".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
enum Node {
    Split {
        feature: u32,
        threshold: f64,
        left: u32,
        right: u32,
    },
    Leaf {
        value: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Tree {
    nodes: Vec<Node>,
}

impl Tree {
    fn predict(&self, x: &[f64]) -> f64 {
        let mut node = 0usize;
        loop {
            match self.nodes[node] {
                Node::Leaf { value } => return value,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    node = if x[feature as usize] <= threshold {
                        left as usize
                    } else {
                        right as usize
                    };
                }
            }
        }
    }
}

/// A fitted forest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedEnsemble {
    trees: Vec<Tree>,
    n_features: usize,
}

impl TrainedEnsemble {
    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn n_trees(&self) -> usize {
        self.trees.len()
    }

    /// Mean of the per-tree leaf predictions.
    pub fn predict(&self, x: &[f64]) -> Result<f64, TreesError> {
        if x.len() != self.n_features {
            return Err(TreesError::DimensionMismatch {
                expected: self.n_features,
                got: x.len(),
                row: 0,
            });
        }
        let sum: f64 = self.trees.iter().map(|t| t.predict(x)).sum();
        Ok(sum / self.trees.len() as f64)
    }

    /// Partial evaluation: fix every feature except `free_feature` and return
    /// the ensemble as a step function of the free one. Evaluating the result
    /// agrees with [`predict`](Self::predict) up to floating-point
    /// re-association in the tree mean.
    pub fn project_1d(&self, fixed: &[f64], free_feature: usize) -> StepFunction {
        // Events: value jumps of any tree at a threshold on the free feature.
        let mut base = 0.0f64;
        let mut events: Vec<(f64, f64)> =
            Vec::with_capacity(self.trees.iter().map(|t| t.nodes.len() / 2 + 1).sum());
        let mut segments: Vec<(f64, f64)> = Vec::new(); // (upper break, value)
        for tree in &self.trees {
            segments.clear();
            collect_segments(tree, 0, fixed, free_feature, &mut segments);
            base += segments[0].1;
            for pair in segments.windows(2) {
                events.push((pair[0].0, pair[1].1 - pair[0].1));
            }
        }
        events.sort_unstable_by(|a, b| a.0.total_cmp(&b.0));
        let n = self.trees.len() as f64;
        let mut breaks = Vec::with_capacity(events.len());
        let mut values = Vec::with_capacity(events.len() + 1);
        let mut running = base;
        values.push(running / n);
        for (brk, delta) in events {
            running += delta;
            if breaks.last() == Some(&brk) {
                *values.last_mut().unwrap() = running / n;
            } else {
                breaks.push(brk);
                values.push(running / n);
            }
        }
        StepFunction { breaks, values }
    }
}

/// Walk one tree with all features fixed except `free`, collecting the value
/// per interval of the free feature. `segments` receives `(upper_break,
/// value)` pairs in increasing order; the last break is `f64::INFINITY`.
fn collect_segments(
    tree: &Tree,
    node: usize,
    fixed: &[f64],
    free: usize,
    segments: &mut Vec<(f64, f64)>,
) {
    match tree.nodes[node] {
        Node::Leaf { value } => segments.push((f64::INFINITY, value)),
        Node::Split {
            feature,
            threshold,
            left,
            right,
        } => {
            if feature as usize == free {
                let before = segments.len();
                collect_segments(tree, left as usize, fixed, free, segments);
                // The left subtree covers x <= threshold.
                if let Some(last) = segments[before..].last_mut() {
                    last.0 = threshold;
                }
                collect_segments(tree, right as usize, fixed, free, segments);
            } else if fixed[feature as usize] <= threshold {
                collect_segments(tree, left as usize, fixed, free, segments);
            } else {
                collect_segments(tree, right as usize, fixed, free, segments);
            }
        }
    }
}

/// Piecewise-constant function: `values[i]` on `(breaks[i-1], breaks[i]]`.
#[derive(Debug, Clone, PartialEq)]
pub struct StepFunction {
    breaks: Vec<f64>,
    values: Vec<f64>,
}

impl StepFunction {
    pub fn eval(&self, x: f64) -> f64 {
        let idx = self.breaks.partition_point(|b| *b < x);
        self.values[idx]
    }

    pub fn constant(value: f64) -> Self {
        Self {
            breaks: vec![],
            values: vec![value],
        }
    }

    /// Minimum over the function's plateaus (the minimum of the function).
    pub fn min_value(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

struct Builder<'a> {
    x: &'a [f64],
    y: &'a [f64],
    n_features: usize,
    k_splits: usize,
    n_min: usize,
    nodes: Vec<Node>,
    indices: Vec<u32>,
    feature_order: Vec<u32>,
    // Per-node scratch, reused across the whole build.
    feat_lo: Vec<f64>,
    feat_hi: Vec<f64>,
    cand_left_sum: Vec<f64>,
    cand_left_sq: Vec<f64>,
    cand_left_n: Vec<usize>,
}

impl Builder<'_> {
    fn row(&self, index: u32) -> &[f64] {
        let start = index as usize * self.n_features;
        &self.x[start..start + self.n_features]
    }

    fn build(&mut self, start: usize, end: usize, rng: &mut impl Rng) -> u32 {
        let n = end - start;
        let (sum, sum_sq) = self.indices[start..end]
            .iter()
            .map(|&i| self.y[i as usize])
            .fold((0.0, 0.0), |(s, q), v| (s + v, q + v * v));
        let mean = sum / n as f64;
        let parent_ss = sum_sq - sum * sum / n as f64;
        // Constant targets (up to rounding) or too few samples end the branch.
        if n < self.n_min || parent_ss <= 1e-12 * sum_sq.max(1.0) {
            self.nodes.push(Node::Leaf { value: mean });
            return self.nodes.len() as u32 - 1;
        }

        let candidates = self.draw_candidates(start, end, rng);
        let Some((feature, threshold)) =
            self.choose_candidate(start, end, sum, sum_sq, parent_ss, &candidates)
        else {
            self.nodes.push(Node::Leaf { value: mean });
            return self.nodes.len() as u32 - 1;
        };

        // Partition the node's indices in place: `<= threshold` to the left.
        let mut lo = start;
        let mut hi = end;
        while lo < hi {
            if self.row(self.indices[lo])[feature as usize] <= threshold {
                lo += 1;
            } else {
                hi -= 1;
                self.indices.swap(lo, hi);
            }
        }

        let id = self.nodes.len() as u32;
        self.nodes.push(Node::Leaf { value: mean }); // placeholder
        let left = self.build(start, lo, rng);
        let right = self.build(lo, end, rng);
        self.nodes[id as usize] = Node::Split {
            feature,
            threshold,
            left,
            right,
        };
        id
    }

    /// Up to `k_splits` (feature, threshold) candidates over features that
    /// vary within the node, features drawn without replacement.
    fn draw_candidates(&mut self, start: usize, end: usize, rng: &mut impl Rng) -> Vec<(u32, f64)> {
        // One pass over the node bounds every feature at once.
        self.feat_lo.clear();
        self.feat_lo.resize(self.n_features, f64::INFINITY);
        self.feat_hi.clear();
        self.feat_hi.resize(self.n_features, f64::NEG_INFINITY);
        for &i in &self.indices[start..end] {
            for (f, &v) in self.row(i).iter().enumerate() {
                self.feat_lo[f] = self.feat_lo[f].min(v);
                self.feat_hi[f] = self.feat_hi[f].max(v);
            }
        }

        let mut candidates = Vec::with_capacity(self.k_splits);
        let total = self.feature_order.len();
        let mut remaining = total;
        // Partial Fisher-Yates over the feature order buffer.
        while candidates.len() < self.k_splits && remaining > 0 {
            let pick = rng.random_range(0..remaining);
            self.feature_order
                .swap(total - remaining, total - remaining + pick);
            let feature = self.feature_order[total - remaining];
            remaining -= 1;

            let (min, max) = (
                self.feat_lo[feature as usize],
                self.feat_hi[feature as usize],
            );
            if max > min {
                let mut threshold = rng.random_range(min..max);
                if threshold <= min {
                    threshold = min + (max - min) / 2.0;
                }
                candidates.push((feature, threshold));
            }
        }
        candidates
    }

    /// The candidate with the largest variance reduction, all candidates
    /// scored in one pass over the node; first-drawn wins ties.
    fn choose_candidate(
        &mut self,
        start: usize,
        end: usize,
        sum: f64,
        sum_sq: f64,
        parent_ss: f64,
        candidates: &[(u32, f64)],
    ) -> Option<(u32, f64)> {
        let k = candidates.len();
        if k == 0 {
            return None;
        }
        let n = end - start;
        self.cand_left_sum.clear();
        self.cand_left_sum.resize(k, 0.0);
        self.cand_left_sq.clear();
        self.cand_left_sq.resize(k, 0.0);
        self.cand_left_n.clear();
        self.cand_left_n.resize(k, 0);
        for &i in &self.indices[start..end] {
            let row = self.row(i);
            let v = self.y[i as usize];
            for (ci, &(feature, threshold)) in candidates.iter().enumerate() {
                if row[feature as usize] <= threshold {
                    self.cand_left_sum[ci] += v;
                    self.cand_left_sq[ci] += v * v;
                    self.cand_left_n[ci] += 1;
                }
            }
        }
        let mut best: Option<(usize, f64)> = None;
        for ci in 0..k {
            let ln = self.cand_left_n[ci];
            let rn = n - ln;
            if ln == 0 || rn == 0 {
                continue;
            }
            let (ls, lq) = (self.cand_left_sum[ci], self.cand_left_sq[ci]);
            let (rs, rq) = (sum - ls, sum_sq - lq);
            let child_ss = (lq - ls * ls / ln as f64) + (rq - rs * rs / rn as f64);
            let score = parent_ss - child_ss;
            if best.map_or(true, |(_, b)| score > b) {
                best = Some((ci, score));
            }
        }
        best.map(|(ci, _)| candidates[ci])
    }
}

/// Fit an ensemble on `inputs`/`targets`. Trees build independently, each
/// from its own `(seed, tree index)` random stream.
pub fn fit(
    inputs: &[Vec<f64>],
    targets: &[f64],
    params: &TreeParams,
) -> Result<TrainedEnsemble, TreesError> {
    params.validate()?;
    if inputs.is_empty() {
        return Err(TreesError::EmptyTrainingSet);
    }
    if inputs.len() != targets.len() {
        return Err(TreesError::LengthMismatch {
            inputs: inputs.len(),
            targets: targets.len(),
        });
    }
    let n_features = inputs[0].len();
    if n_features == 0 {
        return Err(TreesError::DimensionMismatch {
            expected: 1,
            got: 0,
            row: 0,
        });
    }
    for (row, input) in inputs.iter().enumerate() {
        if input.len() != n_features {
            return Err(TreesError::DimensionMismatch {
                expected: n_features,
                got: input.len(),
                row,
            });
        }
    }
    let x: Vec<f64> = inputs.iter().flatten().copied().collect();
    let k_splits = params.k_splits.unwrap_or(n_features).max(1);

    let trees: Vec<Tree> = (0..params.n_trees)
        .into_par_iter()
        .map(|tree_index| {
            let mut rng = derive_rng(params.seed, 0x7265_6573, tree_index as u64);
            let mut builder = Builder {
                x: &x,
                y: targets,
                n_features,
                k_splits,
                n_min: params.n_min,
                nodes: Vec::with_capacity(2 * inputs.len()),
                indices: (0..inputs.len() as u32).collect(),
                feature_order: (0..n_features as u32).collect(),
                feat_lo: Vec::new(),
                feat_hi: Vec::new(),
                cand_left_sum: Vec::new(),
                cand_left_sq: Vec::new(),
                cand_left_n: Vec::new(),
            };
            let root = builder.build(0, inputs.len(), &mut rng);
            debug_assert_eq!(root, 0);
            Tree {
                nodes: builder.nodes,
            }
        })
        .collect();

    Ok(TrainedEnsemble { trees, n_features })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;

    fn step_data(n: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<f64>) {
        let mut rng = derive_rng(seed, 1, 1);
        let inputs: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.random_range(0.0..1.0)]).collect();
        let targets: Vec<f64> = inputs
            .iter()
            .map(|x| if x[0] > 0.5 { 1.0 } else { 0.0 })
            .collect();
        (inputs, targets)
    }

    #[test]
    fn constant_targets_predict_the_constant() {
        let inputs: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64]).collect();
        let targets = vec![3.25; 20];
        let model = fit(&inputs, &targets, &TreeParams::default()).unwrap();
        for x in [-5.0, 0.0, 7.5, 100.0] {
            assert_eq!(model.predict(&[x]).unwrap(), 3.25);
        }
    }

    #[test]
    fn single_sample_predicts_its_target() {
        let model = fit(&[vec![1.0, 2.0]], &[7.0], &TreeParams::default()).unwrap();
        assert_eq!(model.predict(&[0.0, 0.0]).unwrap(), 7.0);
        assert_eq!(model.predict(&[9.0, 9.0]).unwrap(), 7.0);
    }

    #[test]
    fn learns_a_step_function() {
        let (inputs, targets) = step_data(1000, 42);
        let params = TreeParams {
            n_trees: 50,
            ..TreeParams::default()
        };
        let model = fit(&inputs, &targets, &params).unwrap();
        // Test away from the step: |x - 0.5| > 0.05.
        let mse: f64 = (0..1000)
            .map(|i| {
                let x = i as f64 / 1000.0;
                if (x - 0.5).abs() <= 0.05 {
                    return 0.0;
                }
                let truth = if x > 0.5 { 1.0 } else { 0.0 };
                (model.predict(&[x]).unwrap() - truth).powi(2)
            })
            .sum::<f64>()
            / 900.0;
        assert!(mse < 0.01, "mse {mse}");
    }

    #[test]
    fn predictions_bounded_by_target_range() {
        let mut rng = derive_rng(3, 0, 0);
        let inputs: Vec<Vec<f64>> = (0..200)
            .map(|_| vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
            .collect();
        let targets: Vec<f64> = inputs
            .iter()
            .map(|x| (x[0] * 3.0).sin() + x[1])
            .collect();
        let (lo, hi) = targets
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| {
                (l.min(v), h.max(v))
            });
        let model = fit(&inputs, &targets, &TreeParams::default()).unwrap();
        for i in 0..100 {
            let x = [i as f64 / 25.0 - 2.0, (i as f64 / 7.0).sin() * 2.0];
            let p = model.predict(&x).unwrap();
            assert!(p >= lo - 1e-12 && p <= hi + 1e-12);
        }
    }

    #[test]
    fn deterministic_under_fixed_seed_and_distinct_across_seeds() {
        let mut rng = derive_rng(9, 2, 2);
        let inputs: Vec<Vec<f64>> = (0..300).map(|_| vec![rng.random_range(0.0..1.0)]).collect();
        let targets: Vec<f64> = inputs
            .iter()
            .map(|x| (x[0] * std::f64::consts::TAU).sin() + rng.random_range(-0.1..0.1))
            .collect();
        let p1 = TreeParams::default().with_seed(100);
        let a = fit(&inputs, &targets, &p1).unwrap();
        let b = fit(&inputs, &targets, &p1).unwrap();
        assert_eq!(a, b);
        let c = fit(&inputs, &targets, &TreeParams::default().with_seed(101)).unwrap();
        let probe: Vec<f64> = (0..50).map(|i| i as f64 / 50.0).collect();
        let bits = |m: &TrainedEnsemble| -> Vec<u64> {
            probe
                .iter()
                .map(|&x| m.predict(&[x]).unwrap().to_bits())
                .collect()
        };
        assert_eq!(bits(&a), bits(&b));
        assert_ne!(bits(&a), bits(&c));
    }

    #[test]
    fn more_trees_do_not_hurt_on_smooth_targets() {
        let mut total_rmse_1 = 0.0;
        let mut total_rmse_100 = 0.0;
        for seed in 0..5u64 {
            let mut rng = derive_rng(seed, 7, 7);
            let inputs: Vec<Vec<f64>> =
                (0..400).map(|_| vec![rng.random_range(0.0..1.0)]).collect();
            let targets: Vec<f64> = inputs
                .iter()
                .map(|x| (x[0] * std::f64::consts::TAU).sin())
                .collect();
            let rmse = |n_trees: usize| -> f64 {
                let params = TreeParams {
                    n_trees,
                    seed,
                    ..TreeParams::default()
                };
                let model = fit(&inputs, &targets, &params).unwrap();
                let sse: f64 = (0..500)
                    .map(|i| {
                        let x = (i as f64 + 0.5) / 500.0;
                        let truth = (x * std::f64::consts::TAU).sin();
                        (model.predict(&[x]).unwrap() - truth).powi(2)
                    })
                    .sum();
                (sse / 500.0).sqrt()
            };
            total_rmse_1 += rmse(1);
            total_rmse_100 += rmse(100);
        }
        assert!(
            total_rmse_100 < total_rmse_1,
            "100-tree rmse {total_rmse_100} vs 1-tree {total_rmse_1}"
        );
    }

    #[test]
    fn choose_candidate_maximizes_variance_reduction() {
        // One feature, targets step at 0.5: the candidate nearest the step
        // has the largest reduction.
        let inputs: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64 / 9.0]).collect();
        let targets: Vec<f64> = inputs
            .iter()
            .map(|x| if x[0] > 0.5 { 1.0 } else { 0.0 })
            .collect();
        let x: Vec<f64> = inputs.iter().flatten().copied().collect();
        let mut builder = Builder {
            x: &x,
            y: &targets,
            n_features: 1,
            k_splits: 3,
            n_min: 2,
            nodes: Vec::new(),
            indices: (0..10).collect(),
            feature_order: vec![0],
            feat_lo: Vec::new(),
            feat_hi: Vec::new(),
            cand_left_sum: Vec::new(),
            cand_left_sq: Vec::new(),
            cand_left_n: Vec::new(),
        };
        let (sum, sum_sq) = targets
            .iter()
            .fold((0.0, 0.0), |(s, q), v| (s + v, q + v * v));
        let parent_ss = sum_sq - sum * sum / 10.0;
        let candidates = vec![(0u32, 0.12), (0u32, 0.51), (0u32, 0.93)];
        let best = builder
            .choose_candidate(0, 10, sum, sum_sq, parent_ss, &candidates)
            .unwrap();
        assert_eq!(best, (0u32, 0.51));
        // A tie keeps the first-drawn candidate.
        let tied = vec![(0u32, 0.51), (0u32, 0.52)];
        assert_eq!(
            builder
                .choose_candidate(0, 10, sum, sum_sq, parent_ss, &tied)
                .unwrap(),
            (0u32, 0.51)
        );
    }

    #[test]
    fn rejects_malformed_training_data() {
        assert_eq!(
            fit(&[], &[], &TreeParams::default()).unwrap_err(),
            TreesError::EmptyTrainingSet
        );
        assert!(matches!(
            fit(&[vec![1.0], vec![1.0, 2.0]], &[0.0, 0.0], &TreeParams::default()).unwrap_err(),
            TreesError::DimensionMismatch { row: 1, .. }
        ));
        assert!(matches!(
            fit(&[vec![1.0]], &[0.0, 1.0], &TreeParams::default()).unwrap_err(),
            TreesError::LengthMismatch { .. }
        ));
        let model = fit(&[vec![1.0, 2.0]], &[0.0], &TreeParams::default()).unwrap();
        assert!(matches!(
            model.predict(&[1.0]).unwrap_err(),
            TreesError::DimensionMismatch { expected: 2, got: 1, .. }
        ));
    }

    #[test]
    fn projection_matches_pointwise_prediction() {
        let mut rng = derive_rng(17, 0, 0);
        let inputs: Vec<Vec<f64>> = (0..300)
            .map(|_| {
                vec![
                    rng.random_range(0.0..1.0),
                    rng.random_range(0.0..1.0),
                    rng.random_range(0.0..1.0),
                ]
            })
            .collect();
        let targets: Vec<f64> = inputs
            .iter()
            .map(|x| x[0] * 2.0 + if x[1] > 0.5 { 1.0 } else { 0.0 } - x[2])
            .collect();
        let model = fit(&inputs, &targets, &TreeParams::default()).unwrap();
        let fixed = [0.0, 0.7, 0.3];
        let projected = model.project_1d(&fixed, 0);
        for i in 0..400 {
            let s = i as f64 / 400.0 * 1.4 - 0.2;
            let direct = model.predict(&[s, 0.7, 0.3]).unwrap();
            assert_relative_eq!(projected.eval(s), direct, epsilon = 1e-9);
        }
    }

    #[test]
    fn step_function_boundary_convention() {
        let f = StepFunction {
            breaks: vec![1.0, 2.0],
            values: vec![10.0, 20.0, 30.0],
        };
        assert_eq!(f.eval(0.5), 10.0);
        assert_eq!(f.eval(1.0), 10.0); // x <= break goes left
        assert_eq!(f.eval(1.5), 20.0);
        assert_eq!(f.eval(2.0), 20.0);
        assert_eq!(f.eval(2.5), 30.0);
        assert_eq!(f.min_value(), 10.0);
    }
}
