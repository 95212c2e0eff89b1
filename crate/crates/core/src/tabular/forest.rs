use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tree::{grow_tree, presort, DecisionTree, TreeGrowth};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomForest {
    pub trees: Vec<DecisionTree>,
}

impl RandomForest {
    /// Unweighted mean of the tree predictions.
    pub fn predict(&self, x: &DMatrix<f64>) -> Vec<f64> {
        (0..x.nrows())
            .map(|i| self.trees.iter().map(|t| t.predict_row(x, i)).sum::<f64>() / self.trees.len() as f64)
            .collect()
    }
}

/// Fit a random forest.
///
/// `mtry` is the number of features evaluated per split; `bootstrap = false`
/// grows every tree on the full sample. Each tree draws from its own stream
/// so the result does not depend on the thread count.
#[allow(clippy::too_many_arguments)]
pub fn rf_fit(
    x: &DMatrix<f64>,
    y: &[f64],
    n_trees: usize,
    mtry: usize,
    min_leaf: usize,
    max_depth: Option<usize>,
    bootstrap: bool,
    seed: u64,
) -> Result<RandomForest> {
    let n = x.nrows();
    if n < 2 || y.len() != n {
        return Err(Error::validation(format!("rf_fit needs n >= 2 rows with matching y, got {n} / {}", y.len())));
    }
    if n_trees == 0 || mtry == 0 || min_leaf == 0 {
        return Err(Error::validation("rf_fit: n_trees, mtry and min_leaf must be positive"));
    }
    let sorted = presort(x);
    let growth = TreeGrowth {
        max_depth,
        min_leaf: min_leaf as f64,
        lambda: 0.0,
        gamma: 0.0,
        mtry: Some(mtry.min(x.ncols())),
    };
    let trees = crate::par::map((0..n_trees).collect(), |t| {
        let mut rng = crate::rng::stream(seed, "rf-tree", t as u64);
        let mut w = vec![0.0; n];
        if bootstrap {
            for _ in 0..n {
                w[rng.random_range(0..n)] += 1.0;
            }
        } else {
            w.iter_mut().for_each(|v| *v = 1.0);
        }
        let b: Vec<f64> = w.iter().zip(y).map(|(wi, yi)| wi * yi).collect();
        grow_tree(x, &sorted, &w, &b, growth, &mut rng)
    });
    Ok(RandomForest { trees })
}
