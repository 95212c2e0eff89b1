//! Feature tables and the regression stage: mean imputation, F-statistic
//! feature selection, elastic net, random forest, gradient-boosted trees,
//! randomized cross-validated search and evaluation.
//!
//! Feature matrices are column-major `DMatrix<f64>` with `NaN` marking a
//! missing cell.

mod artifact;
mod boost;
mod forest;
mod linear;
mod search;
mod tree;

pub use artifact::{load_pipeline, read_trees, save_pipeline, write_trees};
pub use boost::{gbt_fit, GradientBoosting};
pub use forest::{rf_fit, RandomForest};
pub use linear::{elasticnet_fit, kkt_residual, ElasticNet};
pub use search::{
    cv_folds, evaluate, randomized_search_cv, search_cv, write_predictions_csv, Algorithm, Evaluation, EvaluationReport,
    FittedModel, FittedPipeline, ModelParams, ParamSpace, SearchOptions,
};
pub use tree::{DecisionTree, Node, TreeGrowth};

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::dataset::{ImageGroup, ImageType};
use crate::error::{Error, Result};
use crate::extractor::FeatureVector;

/// Image types feeding one regression model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum PredictorSet {
    Satellite,
    Outdoor,
    Complete,
    Reduced(ImageType),
}

impl PredictorSet {
    pub const FIXED: [PredictorSet; 3] = [PredictorSet::Satellite, PredictorSet::Outdoor, PredictorSet::Complete];

    pub fn reduced(indoor: ImageType) -> Result<Self> {
        if indoor.group() != ImageGroup::Indoor {
            return Err(Error::validation(format!("reduced set needs an indoor image type, got `{indoor}`")));
        }
        Ok(PredictorSet::Reduced(indoor))
    }

    pub fn image_types(self) -> Vec<ImageType> {
        let outdoor = |t: &ImageType| t.group() != ImageGroup::Indoor;
        match self {
            PredictorSet::Satellite => ImageType::ALL.into_iter().filter(|t| t.is_satellite()).collect(),
            PredictorSet::Outdoor => ImageType::ALL.into_iter().filter(outdoor).collect(),
            PredictorSet::Complete => ImageType::ALL.to_vec(),
            PredictorSet::Reduced(extra) => {
                ImageType::ALL.into_iter().filter(|t| outdoor(t) || *t == extra).collect()
            }
        }
    }

    pub fn name(self) -> String {
        match self {
            PredictorSet::Satellite => "satellite".into(),
            PredictorSet::Outdoor => "outdoor".into(),
            PredictorSet::Complete => "complete".into(),
            PredictorSet::Reduced(t) => format!("reduced+{t}"),
        }
    }
}

impl fmt::Display for PredictorSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl FromStr for PredictorSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "satellite" => Ok(PredictorSet::Satellite),
            "outdoor" => Ok(PredictorSet::Outdoor),
            "complete" => Ok(PredictorSet::Complete),
            _ => match s.strip_prefix("reduced+") {
                Some(t) => PredictorSet::reduced(t.parse()?),
                None => Err(Error::validation(format!("unknown predictor set `{s}`"))),
            },
        }
    }
}

impl Serialize for PredictorSet {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.name())
    }
}

impl<'de> Deserialize<'de> for PredictorSet {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Column provenance: image type and index within that type's vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnSource {
    pub image_type: ImageType,
    pub index: usize,
}

impl ColumnSource {
    pub fn name(&self) -> String {
        format!("{}_{}", self.image_type, self.index)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable {
    pub ids: Vec<String>,
    /// n x p, `NaN` = missing.
    pub x: DMatrix<f64>,
    pub columns: Vec<ColumnSource>,
    pub y: Vec<f64>,
}

/// Per-household feature vectors keyed by household id then image type.
pub type FeatureStore = BTreeMap<String, BTreeMap<ImageType, FeatureVector>>;

impl FeatureTable {
    pub fn n_rows(&self) -> usize {
        self.ids.len()
    }

    pub fn n_cols(&self) -> usize {
        self.columns.len()
    }

    pub fn missing_count(&self) -> usize {
        self.x.iter().filter(|v| v.is_nan()).count()
    }

    /// Rows at `idx`, in that order.
    pub fn subset(&self, idx: &[usize]) -> FeatureTable {
        FeatureTable {
            ids: idx.iter().map(|&i| self.ids[i].clone()).collect(),
            x: self.x.select_rows(idx),
            columns: self.columns.clone(),
            y: idx.iter().map(|&i| self.y[i]).collect(),
        }
    }

    /// Column index range for one image type.
    pub fn columns_of(&self, t: ImageType) -> std::ops::Range<usize> {
        let start = self.columns.iter().position(|c| c.image_type == t).unwrap_or(self.columns.len());
        let len = self.columns[start..].iter().take_while(|c| c.image_type == t).count();
        start..start + len
    }
}

/// Build the table for `set` over `ids` (in that order) with `outcome[id]` as y.
pub fn assemble_feature_table(
    features: &FeatureStore,
    ids: &[String],
    set: PredictorSet,
    outcome: &BTreeMap<String, f64>,
) -> Result<FeatureTable> {
    let types = set.image_types();
    let mut widths = Vec::with_capacity(types.len());
    for &t in &types {
        let width = features
            .values()
            .filter_map(|m| m.get(&t))
            .find(|v| !v.missing)
            .map(|v| v.values.len())
            .ok_or_else(|| Error::validation(format!("no household has features for `{t}`")))?;
        widths.push(width);
    }
    let columns: Vec<ColumnSource> = types
        .iter()
        .zip(&widths)
        .flat_map(|(&image_type, &w)| (0..w).map(move |index| ColumnSource { image_type, index }))
        .collect();
    let mut x = DMatrix::from_element(ids.len(), columns.len(), f64::NAN);
    let mut y = Vec::with_capacity(ids.len());
    for (i, id) in ids.iter().enumerate() {
        let by_type = features
            .get(id)
            .ok_or_else(|| Error::validation(format!("household `{id}` has no feature vectors")))?;
        let mut col = 0;
        for (&t, &w) in types.iter().zip(&widths) {
            let v = by_type.get(&t).ok_or_else(|| {
                Error::validation(format!("household `{id}` lacks an entry for image type `{t}`"))
            })?;
            if !v.missing {
                if v.values.len() != w {
                    return Err(Error::Shape(format!(
                        "household `{id}`, `{t}`: {} features, expected {w}",
                        v.values.len()
                    )));
                }
                for (k, &val) in v.values.iter().enumerate() {
                    x[(i, col + k)] = val;
                }
            }
            col += w;
        }
        y.push(
            *outcome
                .get(id)
                .ok_or_else(|| Error::validation(format!("no outcome for household `{id}`")))?,
        );
    }
    Ok(FeatureTable { ids: ids.to_vec(), x, columns, y })
}

/// Column means over observed cells.
pub fn mean_imputer_fit(x: &DMatrix<f64>) -> Result<Vec<f64>> {
    (0..x.ncols())
        .map(|j| {
            let (sum, n) = x.column(j).iter().filter(|v| !v.is_nan()).fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
            if n == 0 {
                Err(Error::validation(format!("column {j} has no observed training values")))
            } else {
                Ok(sum / n as f64)
            }
        })
        .collect()
}

pub fn mean_imputer_transform(x: &DMatrix<f64>, means: &[f64]) -> Result<DMatrix<f64>> {
    if x.ncols() != means.len() {
        return Err(Error::Shape(format!("{} columns but {} means", x.ncols(), means.len())));
    }
    let mut out = x.clone();
    for (j, mut col) in out.column_iter_mut().enumerate() {
        col.iter_mut().filter(|v| v.is_nan()).for_each(|v| *v = means[j]);
    }
    Ok(out)
}

/// Cap for the F statistic of a perfectly correlated column.
pub const F_CAP: f64 = 1e12;

/// Univariate regression F statistics `r^2 (n - 2) / (1 - r^2)`.
pub fn f_statistics(x: &DMatrix<f64>, y: &[f64]) -> Vec<f64> {
    let n = y.len() as f64;
    (0..x.ncols())
        .map(|j| {
            let col: Vec<f64> = x.column(j).iter().copied().collect();
            match crate::stats::pearson(&col, y) {
                None => 0.0,
                Some(r) => {
                    let r2 = r * r;
                    if r2 >= 1.0 {
                        F_CAP
                    } else {
                        (r2 * (n - 2.0) / (1.0 - r2)).min(F_CAP)
                    }
                }
            }
        })
        .collect()
}

/// Indices of the `k` largest F statistics, returned in ascending column
/// order. Ties go to the lower index.
pub fn fstat_select(x: &DMatrix<f64>, y: &[f64], k: usize) -> Result<Vec<usize>> {
    let p = x.ncols();
    if k == 0 || k > p {
        return Err(Error::validation(format!("fstat_select: k = {k} outside 1..={p}")));
    }
    let f = f_statistics(x, y);
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| f[b].total_cmp(&f[a]).then(a.cmp(&b)));
    let mut chosen = order[..k].to_vec();
    chosen.sort_unstable();
    Ok(chosen)
}

/// `id,<type>_<k>...` with empty cells for missing values.
pub fn write_feature_table_csv(path: &Path, table: &FeatureTable) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["id".to_string()];
    header.extend(table.columns.iter().map(ColumnSource::name));
    w.write_record(&header)?;
    for (i, id) in table.ids.iter().enumerate() {
        let mut row = vec![id.clone()];
        row.extend(table.x.row(i).iter().map(|v| if v.is_nan() { String::new() } else { v.to_string() }));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// `id,value` outcome file.
pub fn write_outcome_csv(path: &Path, ids: &[String], y: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["id", "value"])?;
    for (id, v) in ids.iter().zip(y) {
        w.write_record([id.clone(), v.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_outcome_csv(path: &Path) -> Result<BTreeMap<String, f64>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = BTreeMap::new();
    for rec in r.records() {
        let rec = rec?;
        let value: f64 = rec[1]
            .parse()
            .map_err(|_| Error::validation(format!("{}: bad outcome value `{}`", path.display(), &rec[1])))?;
        out.insert(rec[0].to_string(), value);
    }
    Ok(out)
}

/// Read a feature table CSV; `y` is filled from `outcome` when given, else NaN.
pub fn read_feature_table_csv(path: &Path, outcome: Option<&BTreeMap<String, f64>>) -> Result<FeatureTable> {
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.clone();
    let columns = header
        .iter()
        .skip(1)
        .map(|name| {
            let (t, k) = name
                .rsplit_once('_')
                .ok_or_else(|| Error::validation(format!("bad feature column `{name}`")))?;
            Ok(ColumnSource {
                image_type: t.parse()?,
                index: k.parse().map_err(|_| Error::validation(format!("bad feature column `{name}`")))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut ids = Vec::new();
    let mut values = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        ids.push(rec[0].to_string());
        for cell in rec.iter().skip(1) {
            values.push(if cell.is_empty() {
                f64::NAN
            } else {
                cell.parse().map_err(|_| Error::validation(format!("bad feature value `{cell}`")))?
            });
        }
    }
    let x = DMatrix::from_row_slice(ids.len(), columns.len(), &values);
    let y = ids
        .iter()
        .map(|id| match outcome {
            Some(o) => o.get(id).copied().ok_or_else(|| Error::validation(format!("no outcome for `{id}`"))),
            None => Ok(f64::NAN),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FeatureTable { ids, x, columns, y })
}
