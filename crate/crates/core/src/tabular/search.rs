use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{
    elasticnet_fit, fstat_select, gbt_fit, mean_imputer_fit, mean_imputer_transform, rf_fit, ColumnSource,
    ElasticNet, FeatureTable, GradientBoosting, RandomForest,
};
use crate::error::{Error, Result};
use crate::stats;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    ElasticNet,
    RandomForest,
    Gbt,
}

impl Algorithm {
    pub const ALL: [Algorithm; 3] = [Algorithm::ElasticNet, Algorithm::RandomForest, Algorithm::Gbt];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::ElasticNet => "elastic_net",
            Algorithm::RandomForest => "random_forest",
            Algorithm::Gbt => "gbt",
        }
    }

    pub fn is_tree_based(self) -> bool {
        self != Algorithm::ElasticNet
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::validation(format!("unknown algorithm `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "algorithm", rename_all = "snake_case")]
pub enum ModelParams {
    ElasticNet { alpha: f64, l1_ratio: f64, tol: f64, max_iter: usize },
    RandomForest { n_trees: usize, mtry_fraction: f64, min_leaf: usize, max_depth: Option<usize> },
    Gbt { n_rounds: usize, learning_rate: f64, lambda: f64, gamma: f64, max_depth: usize },
}

impl ModelParams {
    pub fn algorithm(&self) -> Algorithm {
        match self {
            ModelParams::ElasticNet { .. } => Algorithm::ElasticNet,
            ModelParams::RandomForest { .. } => Algorithm::RandomForest,
            ModelParams::Gbt { .. } => Algorithm::Gbt,
        }
    }

    pub fn fit(&self, x: &DMatrix<f64>, y: &[f64], seed: u64) -> Result<FittedModel> {
        Ok(match *self {
            ModelParams::ElasticNet { alpha, l1_ratio, tol, max_iter } => {
                FittedModel::ElasticNet(elasticnet_fit(x, y, alpha, l1_ratio, tol, max_iter)?)
            }
            ModelParams::RandomForest { n_trees, mtry_fraction, min_leaf, max_depth } => {
                let mtry = ((mtry_fraction * x.ncols() as f64).round() as usize).clamp(1, x.ncols().max(1));
                FittedModel::RandomForest(rf_fit(x, y, n_trees, mtry, min_leaf, max_depth, true, seed)?)
            }
            ModelParams::Gbt { n_rounds, learning_rate, lambda, gamma, max_depth } => {
                FittedModel::Gbt(gbt_fit(x, y, n_rounds, learning_rate, lambda, gamma, max_depth, seed)?)
            }
        })
    }
}

/// Sampling ranges for the randomized search. Pairs are inclusive
/// `[low, high]`; `alpha`, `learning_rate` and `lambda` are log-uniform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ParamSpace {
    pub en_alpha: [f64; 2],
    pub en_l1_ratio: [f64; 2],
    pub en_tol: f64,
    pub en_max_iter: usize,
    pub rf_n_trees: [usize; 2],
    pub rf_mtry_fraction: [f64; 2],
    pub rf_min_leaf: [usize; 2],
    /// Depth choices drawn uniformly; `null` means unlimited.
    pub rf_max_depth: Vec<Option<usize>>,
    pub gbt_n_rounds: [usize; 2],
    pub gbt_learning_rate: [f64; 2],
    pub gbt_lambda: [f64; 2],
    pub gbt_gamma: [f64; 2],
    pub gbt_max_depth: [usize; 2],
    /// Lower end of the log-uniform range for the selected feature count.
    pub select_k_min: usize,
}

impl Default for ParamSpace {
    fn default() -> Self {
        ParamSpace {
            en_alpha: [1e-4, 1e2],
            en_l1_ratio: [0.0, 1.0],
            en_tol: 1e-6,
            en_max_iter: 1000,
            rf_n_trees: [100, 500],
            rf_mtry_fraction: [0.1, 1.0],
            rf_min_leaf: [1, 10],
            rf_max_depth: vec![None],
            gbt_n_rounds: [50, 500],
            gbt_learning_rate: [0.01, 0.3],
            gbt_lambda: [1e-3, 10.0],
            gbt_gamma: [0.0, 0.0],
            gbt_max_depth: [2, 6],
            select_k_min: 10,
        }
    }
}

fn log_uniform<R: Rng>(rng: &mut R, [lo, hi]: [f64; 2]) -> f64 {
    if lo == hi {
        // still consume a draw so streams stay aligned
        let _: f64 = rng.random();
        return lo;
    }
    (lo.ln() + rng.random::<f64>() * (hi.ln() - lo.ln())).exp()
}

fn uniform<R: Rng>(rng: &mut R, [lo, hi]: [f64; 2]) -> f64 {
    lo + rng.random::<f64>() * (hi - lo)
}

fn int<R: Rng>(rng: &mut R, [lo, hi]: [usize; 2]) -> usize {
    rng.random_range(lo..=hi)
}

impl ParamSpace {
    /// Problems with the ranges, one message each.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        let mut real = |name: &str, [lo, hi]: [f64; 2], positive: bool| {
            if !(lo <= hi) || (positive && !(lo > 0.0)) || !lo.is_finite() || !hi.is_finite() {
                out.push(format!("{name}: invalid range [{lo}, {hi}]"));
            }
        };
        real("en_alpha", self.en_alpha, true);
        real("en_l1_ratio", self.en_l1_ratio, false);
        real("rf_mtry_fraction", self.rf_mtry_fraction, true);
        real("gbt_learning_rate", self.gbt_learning_rate, true);
        real("gbt_lambda", self.gbt_lambda, true);
        real("gbt_gamma", self.gbt_gamma, false);
        if self.en_l1_ratio[0] < 0.0 || self.en_l1_ratio[1] > 1.0 {
            out.push("en_l1_ratio must lie in [0, 1]".into());
        }
        if self.rf_mtry_fraction[1] > 1.0 {
            out.push("rf_mtry_fraction must not exceed 1".into());
        }
        if self.gbt_gamma[0] < 0.0 {
            out.push("gbt_gamma must be non-negative".into());
        }
        for (name, [lo, hi]) in [
            ("rf_n_trees", self.rf_n_trees),
            ("rf_min_leaf", self.rf_min_leaf),
            ("gbt_n_rounds", self.gbt_n_rounds),
            ("gbt_max_depth", self.gbt_max_depth),
        ] {
            if lo > hi || (lo == 0 && name != "gbt_n_rounds") {
                out.push(format!("{name}: invalid range [{lo}, {hi}]"));
            }
        }
        if self.rf_max_depth.is_empty() || self.rf_max_depth.contains(&Some(0)) {
            out.push("rf_max_depth: need at least one choice, each null or positive".into());
        }
        if !(self.en_tol > 0.0) || self.en_max_iter == 0 {
            out.push("en_tol and en_max_iter must be positive".into());
        }
        if self.select_k_min == 0 {
            out.push("select_k_min must be positive".into());
        }
        out
    }

    pub fn sample<R: Rng>(&self, algorithm: Algorithm, rng: &mut R) -> ModelParams {
        match algorithm {
            Algorithm::ElasticNet => ModelParams::ElasticNet {
                alpha: log_uniform(rng, self.en_alpha),
                l1_ratio: uniform(rng, self.en_l1_ratio),
                tol: self.en_tol,
                max_iter: self.en_max_iter,
            },
            Algorithm::RandomForest => ModelParams::RandomForest {
                n_trees: int(rng, self.rf_n_trees),
                mtry_fraction: uniform(rng, self.rf_mtry_fraction),
                min_leaf: int(rng, self.rf_min_leaf),
                max_depth: *self.rf_max_depth.choose(rng).expect("validated non-empty"),
            },
            Algorithm::Gbt => ModelParams::Gbt {
                n_rounds: int(rng, self.gbt_n_rounds),
                learning_rate: log_uniform(rng, self.gbt_learning_rate),
                lambda: log_uniform(rng, self.gbt_lambda),
                gamma: uniform(rng, self.gbt_gamma),
                max_depth: int(rng, self.gbt_max_depth),
            },
        }
    }

    /// Selected feature count, log-uniform over `[min(k_min, p), p]`.
    pub fn sample_k<R: Rng>(&self, p: usize, rng: &mut R) -> usize {
        let lo = self.select_k_min.min(p) as f64;
        (log_uniform(rng, [lo, p as f64]).round() as usize).clamp(1, p)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchOptions {
    pub n_iter: usize,
    pub k_folds: usize,
    /// Insert F-statistic feature selection between imputation and model.
    pub select_features: bool,
}

impl Default for SearchOptions {
    fn default() -> Self {
        SearchOptions { n_iter: 50, k_folds: 10, select_features: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FittedModel {
    ElasticNet(ElasticNet),
    RandomForest(RandomForest),
    Gbt(GradientBoosting),
}

impl FittedModel {
    pub fn predict(&self, x: &DMatrix<f64>) -> Vec<f64> {
        match self {
            FittedModel::ElasticNet(m) => m.predict(x),
            FittedModel::RandomForest(m) => m.predict(x),
            FittedModel::Gbt(m) => m.predict(x),
        }
    }
}

/// Impute, optionally select, then predict. Immutable once fitted.
#[derive(Debug, Clone, PartialEq)]
pub struct FittedPipeline {
    pub params: ModelParams,
    pub means: Vec<f64>,
    pub selected: Option<Vec<usize>>,
    pub columns: Vec<ColumnSource>,
    pub model: FittedModel,
    pub seed: u64,
    pub cv_rmse: f64,
    /// Mean held-out RMSE of every sampled configuration.
    pub cv_scores: Vec<f64>,
}

impl FittedPipeline {
    pub fn algorithm(&self) -> Algorithm {
        self.params.algorithm()
    }

    /// Imputed (and selected) model input.
    pub fn transform(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let filled = mean_imputer_transform(x, &self.means)?;
        Ok(match &self.selected {
            Some(cols) => filled.select_columns(cols),
            None => filled,
        })
    }

    pub fn predict(&self, x: &DMatrix<f64>) -> Result<Vec<f64>> {
        Ok(self.model.predict(&self.transform(x)?))
    }

    /// Provenance of each model input column.
    pub fn input_columns(&self) -> Vec<ColumnSource> {
        match &self.selected {
            Some(cols) => cols.iter().map(|&j| self.columns[j]).collect(),
            None => self.columns.clone(),
        }
    }
}

struct Fitted {
    means: Vec<f64>,
    selected: Option<Vec<usize>>,
    model: FittedModel,
}

fn fit_once(x: &DMatrix<f64>, y: &[f64], params: &ModelParams, k: Option<usize>, seed: u64) -> Result<Fitted> {
    let means = mean_imputer_fit(x)?;
    let filled = mean_imputer_transform(x, &means)?;
    let (input, selected) = match k {
        Some(k) => {
            let cols = fstat_select(&filled, y, k.min(filled.ncols()))?;
            (filled.select_columns(&cols), Some(cols))
        }
        None => (filled, None),
    };
    let model = params.fit(&input, y, seed)?;
    Ok(Fitted { means, selected, model })
}

fn predict_fitted(f: &Fitted, x: &DMatrix<f64>) -> Result<Vec<f64>> {
    let filled = mean_imputer_transform(x, &f.means)?;
    let input = match &f.selected {
        Some(cols) => filled.select_columns(cols),
        None => filled,
    };
    Ok(f.model.predict(&input))
}

/// Contiguous blocks of a seeded permutation; the first `n % k` folds get
/// one extra row.
pub fn cv_folds(n: usize, k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 || n < k {
        return Err(Error::validation(format!("{k}-fold cross-validation needs k >= 2 and at least k rows, got {n}")));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut crate::rng::stream(seed, "cv-folds", 0));
    let (base, extra) = (n / k, n % k);
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let len = base + usize::from(f < extra);
        folds.push(perm[start..start + len].to_vec());
        start += len;
    }
    Ok(folds)
}

/// Sample `n_iter` configurations, score each by mean held-out RMSE over
/// the same folds, refit the best (earliest on ties) on the whole table.
pub fn randomized_search_cv(
    table: &FeatureTable,
    algorithm: Algorithm,
    space: &ParamSpace,
    options: &SearchOptions,
    seed: u64,
) -> Result<FittedPipeline> {
    if options.n_iter == 0 {
        return Err(Error::validation("randomized search needs n_iter >= 1"));
    }
    let problems = space.problems();
    if !problems.is_empty() {
        return Err(Error::Config(problems));
    }
    let configs: Vec<(ModelParams, Option<usize>)> = (0..options.n_iter)
        .map(|i| {
            let mut rng = crate::rng::stream(seed, "search-config", i as u64);
            let params = space.sample(algorithm, &mut rng);
            let k = options.select_features.then(|| space.sample_k(table.n_cols(), &mut rng));
            (params, k)
        })
        .collect();
    search_cv(table, configs, options.k_folds, seed)
}

/// Cross-validate the given configurations (parameters plus optional
/// selected-feature count) and refit the best one. Configuration `i` fits
/// with model seed `derive_seed(seed, "search-model", i)`.
pub fn search_cv(
    table: &FeatureTable,
    configs: Vec<(ModelParams, Option<usize>)>,
    k_folds: usize,
    seed: u64,
) -> Result<FittedPipeline> {
    if configs.is_empty() {
        return Err(Error::validation("no configurations to search"));
    }
    let folds = cv_folds(table.n_rows(), k_folds, seed)?;
    let configs: Vec<(ModelParams, Option<usize>, u64)> = configs
        .into_iter()
        .enumerate()
        .map(|(i, (p, k))| (p, k, crate::rng::derive_seed(seed, "search-model", i as u64)))
        .collect();

    let jobs: Vec<(usize, usize)> =
        (0..configs.len()).flat_map(|c| (0..folds.len()).map(move |f| (c, f))).collect();
    let scores = crate::par::map(jobs, |(c, f)| -> Result<f64> {
        let held = &folds[f];
        let train: Vec<usize> = folds.iter().enumerate().filter(|(g, _)| *g != f).flat_map(|(_, v)| v.iter().copied()).collect();
        let tr = table.subset(&train);
        let te = table.subset(held);
        let (params, k, model_seed) = &configs[c];
        let fitted = fit_once(&tr.x, &tr.y, params, *k, *model_seed)?;
        Ok(stats::rmse(&predict_fitted(&fitted, &te.x)?, &te.y))
    });
    let mut cv_scores = vec![0.0; configs.len()];
    for (job, score) in scores.into_iter().enumerate() {
        cv_scores[job / folds.len()] += score? / folds.len() as f64;
    }
    let mut best = 0;
    for (i, s) in cv_scores.iter().enumerate() {
        if *s < cv_scores[best] || cv_scores[best].is_nan() {
            best = i;
        }
    }
    let (params, k, model_seed) = configs[best].clone();
    log::info!("{}: best of {} configurations has CV RMSE {:.5}", params.algorithm(), configs.len(), cv_scores[best]);
    let fitted = fit_once(&table.x, &table.y, &params, k, model_seed)?;
    Ok(FittedPipeline {
        params,
        means: fitted.means,
        selected: fitted.selected,
        columns: table.columns.clone(),
        model: fitted.model,
        seed: model_seed,
        cv_rmse: cv_scores[best],
        cv_scores,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub rmse: f64,
    /// `None` when predictions or outcomes have zero variance.
    pub pearson: Option<f64>,
    pub spearman: Option<f64>,
    pub ids: Vec<String>,
    pub observed: Vec<f64>,
    pub predicted: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub measure: String,
    pub predictor_set: String,
    pub algorithm: Algorithm,
    pub rmse: f64,
    pub pearson: Option<f64>,
    pub spearman: Option<f64>,
    pub n_test: usize,
}

pub fn evaluate(model: &FittedPipeline, test: &FeatureTable) -> Result<Evaluation> {
    if test.columns != model.columns {
        return Err(Error::Shape("test table columns differ from the training table".into()));
    }
    let predicted = model.predict(&test.x)?;
    Ok(Evaluation {
        rmse: stats::rmse(&predicted, &test.y),
        pearson: stats::pearson(&test.y, &predicted),
        spearman: stats::spearman(&test.y, &predicted),
        ids: test.ids.clone(),
        observed: test.y.clone(),
        predicted,
    })
}

/// `id,observed,predicted`
pub fn write_predictions_csv(path: &Path, eval: &Evaluation) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["id", "observed", "predicted"])?;
    for ((id, o), p) in eval.ids.iter().zip(&eval.observed).zip(&eval.predicted) {
        w.write_record([id.clone(), o.to_string(), p.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
