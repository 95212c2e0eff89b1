//! Exact SHAP values for tree ensembles under the cover-weighted
//! (path-conditional) expectation, plus image-level aggregation and
//! importance ranking.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{ImageGroup, ImageType, SepMeasure};
use crate::error::{Error, Result};
use crate::stats;
use crate::tabular::{ColumnSource, DecisionTree, FeatureTable, FittedModel, FittedPipeline, PredictorSet};

/// `base + sum_t weight_t * tree_t(x)`: a forest has weights `1/T`, a
/// boosted model its learning rate and base score.
#[derive(Debug, Clone)]
pub struct TreeSum<'a> {
    pub base: f64,
    pub trees: Vec<(&'a DecisionTree, f64)>,
}

impl<'a> TreeSum<'a> {
    pub fn single(tree: &'a DecisionTree) -> Self {
        TreeSum { base: 0.0, trees: vec![(tree, 1.0)] }
    }

    pub fn from_model(model: &'a FittedModel) -> Result<Self> {
        match model {
            FittedModel::RandomForest(rf) => {
                let w = 1.0 / rf.trees.len() as f64;
                Ok(TreeSum { base: 0.0, trees: rf.trees.iter().map(|t| (t, w)).collect() })
            }
            FittedModel::Gbt(g) => Ok(TreeSum {
                base: g.base_score,
                trees: g.trees.iter().map(|t| (t, g.learning_rate)).collect(),
            }),
            FittedModel::ElasticNet(_) => {
                Err(Error::Unsupported("SHAP attribution is only available for tree ensembles".into()))
            }
        }
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        self.base + self.trees.iter().map(|(t, w)| w * t.predict_with(|f| x[f])).sum::<f64>()
    }
}

/// Cover-weighted expectation of the subtree at `node`.
pub fn tree_expectation(tree: &DecisionTree, node: usize) -> f64 {
    let n = &tree.nodes[node];
    if n.is_leaf() {
        return n.value;
    }
    let (l, r) = (&tree.nodes[n.left], &tree.nodes[n.right]);
    (l.cover * tree_expectation(tree, n.left) + r.cover * tree_expectation(tree, n.right)) / n.cover
}

fn check_tree(tree: &DecisionTree, n_features: usize) -> Result<()> {
    tree.validate()?;
    for (i, n) in tree.nodes.iter().enumerate() {
        if let Some(f) = n.feature {
            if f >= n_features {
                return Err(Error::validation(format!("node {i} splits on feature {f} of {n_features}")));
            }
            if !(tree.nodes[n.left].cover > 0.0 && tree.nodes[n.right].cover > 0.0) {
                return Err(Error::validation(format!("node {i} has a child with no cover")));
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, Default)]
struct PathElement {
    feature: usize,
    zero_fraction: f64,
    one_fraction: f64,
    weight: f64,
}

fn extend(path: &mut Vec<PathElement>, zero_fraction: f64, one_fraction: f64, feature: usize) {
    let depth = path.len();
    path.push(PathElement { feature, zero_fraction, one_fraction, weight: if depth == 0 { 1.0 } else { 0.0 } });
    let d1 = (depth + 1) as f64;
    for i in (0..depth).rev() {
        path[i + 1].weight += one_fraction * path[i].weight * (i + 1) as f64 / d1;
        path[i].weight = zero_fraction * path[i].weight * (depth - i) as f64 / d1;
    }
}

fn unwind(path: &mut Vec<PathElement>, index: usize) {
    let depth = path.len() - 1;
    let PathElement { one_fraction, zero_fraction, .. } = path[index];
    let d1 = (depth + 1) as f64;
    let mut next = path[depth].weight;
    for i in (0..depth).rev() {
        if one_fraction != 0.0 {
            let tmp = path[i].weight;
            path[i].weight = next * d1 / ((i + 1) as f64 * one_fraction);
            next = tmp - path[i].weight * zero_fraction * (depth - i) as f64 / d1;
        } else {
            path[i].weight = path[i].weight * d1 / (zero_fraction * (depth - i) as f64);
        }
    }
    for i in index..depth {
        path[i].feature = path[i + 1].feature;
        path[i].zero_fraction = path[i + 1].zero_fraction;
        path[i].one_fraction = path[i + 1].one_fraction;
    }
    path.pop();
}

/// Total weight of the path with element `index` removed.
fn unwound_sum(path: &[PathElement], index: usize) -> f64 {
    let depth = path.len() - 1;
    let PathElement { one_fraction, zero_fraction, .. } = path[index];
    let d1 = (depth + 1) as f64;
    let mut total = 0.0;
    if one_fraction != 0.0 {
        let mut next = path[depth].weight;
        for i in (0..depth).rev() {
            let tmp = next / ((i + 1) as f64 * one_fraction);
            total += tmp;
            next = path[i].weight - tmp * zero_fraction * (depth - i) as f64;
        }
    } else {
        for i in (0..depth).rev() {
            total += path[i].weight / (zero_fraction * (depth - i) as f64);
        }
    }
    total * d1
}

#[allow(clippy::too_many_arguments)]
fn recurse(
    tree: &DecisionTree,
    x: &[f64],
    phi: &mut [f64],
    node: usize,
    mut path: Vec<PathElement>,
    zero_fraction: f64,
    one_fraction: f64,
    feature: usize,
    scale: f64,
) {
    extend(&mut path, zero_fraction, one_fraction, feature);
    let n = &tree.nodes[node];
    let Some(split) = n.feature else {
        for i in 1..path.len() {
            let w = unwound_sum(&path, i);
            let e = path[i];
            phi[e.feature] += scale * w * (e.one_fraction - e.zero_fraction) * n.value;
        }
        return;
    };
    let (hot, cold) = if x[split] <= n.threshold { (n.left, n.right) } else { (n.right, n.left) };
    let (mut incoming_zero, mut incoming_one) = (1.0, 1.0);
    if let Some(k) = (1..path.len()).find(|&k| path[k].feature == split) {
        incoming_zero = path[k].zero_fraction;
        incoming_one = path[k].one_fraction;
        unwind(&mut path, k);
    }
    let hot_zero = tree.nodes[hot].cover / n.cover;
    let cold_zero = tree.nodes[cold].cover / n.cover;
    recurse(tree, x, phi, hot, path.clone(), hot_zero * incoming_zero, incoming_one, split, scale);
    recurse(tree, x, phi, cold, path, cold_zero * incoming_zero, 0.0, split, scale);
}

fn accumulate_tree(tree: &DecisionTree, x: &[f64], phi: &mut [f64], scale: f64) {
    recurse(tree, x, phi, 0, Vec::new(), 1.0, 1.0, usize::MAX, scale);
}

/// Per-feature SHAP values of one tree and its expected value.
pub fn treeshap_tree(tree: &DecisionTree, x: &[f64]) -> Result<(f64, Vec<f64>)> {
    check_tree(tree, x.len())?;
    let mut phi = vec![0.0; x.len()];
    accumulate_tree(tree, x, &mut phi, 1.0);
    Ok((tree_expectation(tree, 0), phi))
}

/// Base value and attributions of a weighted tree sum.
pub fn treeshap_sum(model: &TreeSum, x: &[f64]) -> Result<(f64, Vec<f64>)> {
    let mut phi = vec![0.0; x.len()];
    let mut base = model.base;
    for (tree, w) in &model.trees {
        check_tree(tree, x.len())?;
        accumulate_tree(tree, x, &mut phi, *w);
        base += w * tree_expectation(tree, 0);
    }
    Ok((base, phi))
}

/// Cover-weighted expectation of the tree given the features in `known`.
fn conditional_expectation(tree: &DecisionTree, node: usize, x: &[f64], known: u32) -> f64 {
    let n = &tree.nodes[node];
    match n.feature {
        None => n.value,
        Some(f) if known & (1 << f) != 0 => {
            conditional_expectation(tree, if x[f] <= n.threshold { n.left } else { n.right }, x, known)
        }
        Some(_) => {
            let (l, r) = (&tree.nodes[n.left], &tree.nodes[n.right]);
            (l.cover * conditional_expectation(tree, n.left, x, known)
                + r.cover * conditional_expectation(tree, n.right, x, known))
                / n.cover
        }
    }
}

pub const BRUTE_FORCE_MAX_FEATURES: usize = 15;

/// Shapley values by enumerating every coalition. Returns `(v(empty), phi)`.
pub fn brute_force_shap(model: &TreeSum, x: &[f64]) -> Result<(f64, Vec<f64>)> {
    let m = x.len();
    if m > BRUTE_FORCE_MAX_FEATURES {
        return Err(Error::validation(format!(
            "brute-force Shapley values refuse {m} features (limit {BRUTE_FORCE_MAX_FEATURES})"
        )));
    }
    let value = |s: u32| {
        model.base + model.trees.iter().map(|(t, w)| w * conditional_expectation(t, 0, x, s)).sum::<f64>()
    };
    let values: Vec<f64> = (0..1u32 << m).map(value).collect();
    let fact: Vec<f64> = (0..=m).scan(1.0, |acc, k| {
        if k > 0 {
            *acc *= k as f64;
        }
        Some(*acc)
    }).collect();
    let mut phi = vec![0.0; m];
    for (j, p) in phi.iter_mut().enumerate() {
        for s in 0..1u32 << m {
            if s & (1 << j) != 0 {
                continue;
            }
            let k = s.count_ones() as usize;
            let w = fact[k] * fact[m - k - 1] / fact[m];
            *p += w * (values[(s | (1 << j)) as usize] - values[s as usize]);
        }
    }
    Ok((values[0], phi))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapVector {
    pub household_id: String,
    pub base_value: f64,
    pub phi: Vec<f64>,
    pub model: String,
}

/// SHAP values of a fitted ensemble for one imputed (and selected) row.
pub fn treeshap_ensemble(model: &FittedModel, x: &[f64], household_id: &str) -> Result<ShapVector> {
    let sum = TreeSum::from_model(model)?;
    let (base_value, phi) = treeshap_sum(&sum, x)?;
    let name = match model {
        FittedModel::RandomForest(_) => "random_forest",
        FittedModel::Gbt(_) => "gbt",
        FittedModel::ElasticNet(_) => "elastic_net",
    };
    Ok(ShapVector { household_id: household_id.to_string(), base_value, phi, model: name.to_string() })
}

/// SHAP vectors for every row of `table` together with the predictions.
pub fn shap_for_table(pipeline: &FittedPipeline, table: &FeatureTable) -> Result<Vec<(ShapVector, f64)>> {
    let input = pipeline.transform(&table.x)?;
    let predictions = pipeline.model.predict(&input);
    let rows: Vec<usize> = (0..table.n_rows()).collect();
    let out = crate::par::map(rows, |i| {
        let row: Vec<f64> = input.row(i).iter().copied().collect();
        treeshap_ensemble(&pipeline.model, &row, &table.ids[i]).map(|s| (s, predictions[i]))
    });
    out.into_iter().collect()
}

/// Sum attributions per image type. Every type in `types` gets an entry.
pub fn group_by_image(
    shap: &ShapVector,
    columns: &[ColumnSource],
    types: &[ImageType],
) -> Result<BTreeMap<ImageType, f64>> {
    if columns.len() != shap.phi.len() {
        return Err(Error::validation(format!(
            "{} attributions but provenance for {} columns",
            shap.phi.len(),
            columns.len()
        )));
    }
    let mut out: BTreeMap<ImageType, f64> = types.iter().map(|&t| (t, 0.0)).collect();
    for (c, v) in columns.iter().zip(&shap.phi) {
        *out.get_mut(&c.image_type).ok_or_else(|| {
            Error::validation(format!("column {} lies outside the predictor set", c.name()))
        })? += v;
    }
    Ok(out)
}

/// Grouped attributions of one household under one measure's model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupedShap {
    pub household_id: String,
    pub split: String,
    pub measure: SepMeasure,
    pub base_value: f64,
    pub prediction: f64,
    pub groups: BTreeMap<ImageType, f64>,
}

/// Image types by descending median absolute grouped value; ties keep the
/// enumeration order.
pub fn rank_image_types<'a, I>(groups: I) -> Vec<(ImageType, f64)>
where
    I: IntoIterator<Item = &'a BTreeMap<ImageType, f64>>,
{
    let mut by_type: BTreeMap<ImageType, Vec<f64>> = BTreeMap::new();
    for g in groups {
        for (&t, &v) in g {
            by_type.entry(t).or_default().push(v.abs());
        }
    }
    let mut ranking: Vec<(ImageType, f64)> = by_type.into_iter().map(|(t, v)| (t, stats::median(&v))).collect();
    ranking.sort_by(|a, b| b.1.total_cmp(&a.1));
    ranking
}

/// REDUCED(t) for the highest-ranked indoor type `t`.
pub fn reduced_predictor_set(ranking: &[(ImageType, f64)]) -> Result<PredictorSet> {
    let indoor = ranking
        .iter()
        .find(|(t, _)| t.group() == ImageGroup::Indoor)
        .ok_or_else(|| Error::validation("ranking contains no indoor image type"))?;
    PredictorSet::reduced(indoor.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopBottomEntry {
    pub image_type: ImageType,
    /// `top` or `bottom`.
    pub rank_direction: String,
    pub id: String,
    pub image_path: Option<String>,
    pub average_rank: f64,
    /// Grouped value under the assets, expenditure and income models.
    pub grouped_phi: [f64; 3],
}

/// For every image type, the `n` households with the highest and lowest
/// average (over the three measures) rank of their grouped value. Only
/// households present under all three measures are ranked.
pub fn top_bottom_images(
    per_measure: &[BTreeMap<String, BTreeMap<ImageType, f64>>; 3],
    n: usize,
) -> Vec<TopBottomEntry> {
    let ids: Vec<&String> = per_measure[0]
        .keys()
        .filter(|id| per_measure[1].contains_key(*id) && per_measure[2].contains_key(*id))
        .collect();
    let types: Vec<ImageType> = ImageType::ALL
        .into_iter()
        .filter(|t| ids.iter().all(|id| per_measure.iter().all(|m| m[*id].contains_key(t))))
        .collect();
    let mut out = Vec::new();
    for t in types {
        let phis: Vec<[f64; 3]> = ids.iter().map(|id| [0, 1, 2].map(|k| per_measure[k][*id][&t])).collect();
        let mut avg = vec![0.0; ids.len()];
        for k in 0..3 {
            let col: Vec<f64> = phis.iter().map(|p| p[k]).collect();
            for (a, r) in avg.iter_mut().zip(stats::average_ranks(&col)) {
                *a += r / 3.0;
            }
        }
        let mut order: Vec<usize> = (0..ids.len()).collect();
        order.sort_by(|&a, &b| avg[b].total_cmp(&avg[a]).then(a.cmp(&b)));
        let entry = |i: usize, dir: &str| TopBottomEntry {
            image_type: t,
            rank_direction: dir.to_string(),
            id: ids[i].clone(),
            image_path: None,
            average_rank: avg[i],
            grouped_phi: phis[i],
        };
        out.extend(order.iter().take(n).map(|&i| entry(i, "top")));
        let mut bottom: Vec<usize> = order.clone();
        bottom.sort_by(|&a, &b| avg[a].total_cmp(&avg[b]).then(a.cmp(&b)));
        out.extend(bottom.iter().take(n).map(|&i| entry(i, "bottom")));
    }
    out
}

/// `id,split,image_type,grouped_phi,measure`
pub fn write_shap_csv(path: &Path, rows: &[GroupedShap]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["id", "split", "image_type", "grouped_phi", "measure"])?;
    for r in rows {
        for (t, v) in &r.groups {
            w.write_record([r.household_id.as_str(), &r.split, t.name(), &v.to_string(), r.measure.name()])?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests;
