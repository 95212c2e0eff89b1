use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::tree::{grow_tree, presort, DecisionTree, TreeGrowth};
use crate::error::{Error, Result};

/// Squared-error gradient-boosted trees: `base + eta * sum(tree(x))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientBoosting {
    pub base_score: f64,
    pub learning_rate: f64,
    pub trees: Vec<DecisionTree>,
}

impl GradientBoosting {
    pub fn predict(&self, x: &DMatrix<f64>) -> Vec<f64> {
        (0..x.nrows())
            .map(|i| {
                self.base_score
                    + self.learning_rate * self.trees.iter().map(|t| t.predict_row(x, i)).sum::<f64>()
            })
            .collect()
    }
}

/// Fit `n_rounds` trees with gradients `yhat - y` and unit hessians.
///
/// No row or column subsampling, so `seed` does not affect the result.
#[allow(clippy::too_many_arguments)]
pub fn gbt_fit(
    x: &DMatrix<f64>,
    y: &[f64],
    n_rounds: usize,
    learning_rate: f64,
    lambda: f64,
    gamma: f64,
    max_depth: usize,
    seed: u64,
) -> Result<GradientBoosting> {
    let n = x.nrows();
    if n == 0 || y.len() != n {
        return Err(Error::validation(format!("gbt_fit: {n} rows but {} targets", y.len())));
    }
    if !(learning_rate > 0.0) || lambda < 0.0 || gamma < 0.0 {
        return Err(Error::validation("gbt_fit: need eta > 0, lambda >= 0, gamma >= 0"));
    }
    let base_score = crate::stats::mean(y);
    let sorted = presort(x);
    let growth = TreeGrowth { max_depth: Some(max_depth), min_leaf: 1.0, lambda, gamma, mtry: None };
    let w = vec![1.0; n];
    let mut pred = vec![base_score; n];
    let mut trees = Vec::with_capacity(n_rounds);
    let mut rng = crate::rng::stream(seed, "gbt", 0);
    for _ in 0..n_rounds {
        let residual: Vec<f64> = y.iter().zip(&pred).map(|(yi, pi)| yi - pi).collect();
        let tree = grow_tree(x, &sorted, &w, &residual, growth, &mut rng);
        for (i, p) in pred.iter_mut().enumerate() {
            *p += learning_rate * tree.predict_row(x, i);
        }
        trees.push(tree);
    }
    Ok(GradientBoosting { base_score, learning_rate, trees })
}
