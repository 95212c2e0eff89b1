use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dataset::{ImageType, SepMeasure, SepMeasures};
use crate::extractor::EpochLog;
use crate::stats;
use crate::tabular::{Algorithm, EvaluationReport, ModelParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// `bins + 1` equally spaced edges from min to max.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasureSummary {
    pub mean: f64,
    pub sd: f64,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub iqr: f64,
    pub min: f64,
    pub max: f64,
    pub histogram: Histogram,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExploratoryReport {
    pub n_households: usize,
    pub summaries: BTreeMap<SepMeasure, MeasureSummary>,
    /// Rows and columns in assets, expenditure, income order.
    pub pearson: [[Option<f64>; 3]; 3],
    pub spearman: [[Option<f64>; 3]; 3],
}

/// Bin counts over `[min, max]`; the last bin is closed.
pub fn histogram(xs: &[f64], bins: usize) -> Histogram {
    let (lo, hi) = xs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    let width = (hi - lo) / bins as f64;
    let edges = (0..=bins).map(|i| if i == bins { hi } else { lo + i as f64 * width }).collect();
    let mut counts = vec![0; bins];
    for &x in xs {
        let b = if width > 0.0 { (((x - lo) / width) as usize).min(bins - 1) } else { 0 };
        counts[b] += 1;
    }
    Histogram { edges, counts }
}

/// Descriptive statistics and pairwise correlations of the three measures.
pub fn exploratory_report(sep: &BTreeMap<String, SepMeasures>, bins: usize) -> ExploratoryReport {
    let columns: Vec<Vec<f64>> =
        SepMeasure::ALL.iter().map(|&m| sep.values().map(|s| s.get(m)).collect()).collect();
    let summaries = SepMeasure::ALL
        .iter()
        .zip(&columns)
        .map(|(&m, xs)| {
            let (q1, q3) = (stats::quantile(xs, 0.25), stats::quantile(xs, 0.75));
            let summary = MeasureSummary {
                mean: stats::mean(xs),
                sd: stats::std_dev(xs),
                median: stats::median(xs),
                q1,
                q3,
                iqr: q3 - q1,
                min: xs.iter().copied().fold(f64::INFINITY, f64::min),
                max: xs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                histogram: histogram(xs, bins),
            };
            (m, summary)
        })
        .collect();
    let pair = |f: fn(&[f64], &[f64]) -> Option<f64>| {
        let mut out = [[None; 3]; 3];
        for (i, row) in out.iter_mut().enumerate() {
            for (j, cell) in row.iter_mut().enumerate() {
                *cell = f(&columns[i], &columns[j]);
            }
        }
        out
    };
    ExploratoryReport { n_households: sep.len(), summaries, pearson: pair(stats::pearson), spearman: pair(stats::spearman) }
}

/// One evaluated model of the `fit` or `reduce` stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRecord {
    pub report: EvaluationReport,
    pub cv_rmse: f64,
    pub params: ModelParams,
    pub selected_features: Option<usize>,
    /// Model JSON, relative to the output directory.
    pub model_path: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub models: Vec<ModelRecord>,
    pub offtheshelf: Vec<ModelRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankEntry {
    pub image_type: ImageType,
    pub median_abs_shap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasureRanking {
    pub algorithm: Algorithm,
    pub predictor_set: String,
    pub n_train: usize,
    pub n_test: usize,
    pub groups_per_household: usize,
    pub train: Vec<RankEntry>,
    pub test: Vec<RankEntry>,
    pub reduced_set: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReducedRecord {
    pub measure: SepMeasure,
    pub indoor_type: ImageType,
    pub reduced: ModelRecord,
    /// Same algorithm on the outdoor and complete sets, from the `fit` stage.
    pub outdoor: Option<EvaluationReport>,
    pub complete: Option<EvaluationReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructuralConstants {
    pub n_image_types: usize,
    pub complete_width: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub n_fitted_models: usize,
    pub k_folds: usize,
    pub grouped_shap_per_household: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractorSummary {
    pub n_train_images: usize,
    pub final_epoch: EpochLog,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub tool_version: String,
    pub config_hash: String,
    pub seed: u64,
    pub constants: StructuralConstants,
    pub exploratory: ExploratoryReport,
    pub extractor: BTreeMap<ImageType, ExtractorSummary>,
    pub evaluations: Vec<EvaluationReport>,
    pub offtheshelf: Vec<EvaluationReport>,
    pub shap: BTreeMap<SepMeasure, MeasureRanking>,
    pub reduced: Vec<ReducedRecord>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn histogram_counts_everything() {
        let xs: Vec<f64> = (0..100).map(|i| i as f64).collect();
        let h = histogram(&xs, 10);
        assert_eq!(h.counts, vec![10; 10]);
        assert_eq!(h.edges.len(), 11);
        assert_eq!(h.edges[10], 99.0);
        let c = histogram(&[2.0; 5], 4);
        assert_eq!(c.counts, vec![5, 0, 0, 0]);
    }

    #[test]
    fn correlation_diagonal_is_one() {
        let sep: BTreeMap<String, SepMeasures> = (0..30)
            .map(|i| {
                let x = i as f64;
                (format!("h{i:02}"), SepMeasures { assets: x.sin(), expenditure: x * x, income: (x * 0.7).cos() + x })
            })
            .collect();
        let r = exploratory_report(&sep, 5);
        for k in 0..3 {
            assert!((r.pearson[k][k].unwrap() - 1.0).abs() < 1e-12);
            assert!((r.spearman[k][k].unwrap() - 1.0).abs() < 1e-12);
        }
        assert_eq!(r.summaries[&SepMeasure::Expenditure].histogram.counts.iter().sum::<usize>(), 30);
        let exp: Vec<f64> = sep.values().map(|s| s.expenditure).collect();
        let inc: Vec<f64> = sep.values().map(|s| s.income).collect();
        assert_eq!(r.pearson[1][2], stats::pearson(&exp, &inc));
    }
}
