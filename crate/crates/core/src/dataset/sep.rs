use std::collections::{BTreeMap, BTreeSet};

use super::{BinaryLabels, HouseholdRecord, SepMeasures};
use crate::error::{Error, Result};
use crate::mca::{first_dimension_scores, fit_mca, indicator_matrix, CategoricalTable, McaModel};
use crate::stats;

fn sum_sources(id: &str, kind: &str, sources: &BTreeMap<String, f64>) -> Result<f64> {
    let mut total = 0.0;
    for (name, &v) in sources {
        if !v.is_finite() || v < 0.0 {
            return Err(Error::validation(format!(
                "household {id}: {kind} source `{name}` has invalid amount {v}"
            )));
        }
        total += v;
    }
    Ok(total)
}

/// Total monthly income over all sources.
pub fn compute_income_sep(record: &HouseholdRecord) -> Result<f64> {
    sum_sources(&record.id, "income", &record.income_sources)
}

/// Total monthly expenditure over all sources.
pub fn compute_expenditure_sep(record: &HouseholdRecord) -> Result<f64> {
    sum_sources(&record.id, "expenditure", &record.expenditure_sources)
}

/// Most frequent category; ties go to the lexicographically smallest label.
pub fn modal_category<'a, I>(values: I) -> Option<String>
where
    I: IntoIterator<Item = &'a str>,
{
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for v in values {
        *counts.entry(v).or_default() += 1;
    }
    // BTreeMap iterates in label order, so a strict `>` keeps the smallest tie.
    let mut best: Option<(&str, usize)> = None;
    for (label, n) in counts {
        if best.is_none_or(|(_, m)| n > m) {
            best = Some((label, n));
        }
    }
    best.map(|(l, _)| l.to_string())
}

/// Fill unanswered asset variables with the cohort's modal category.
///
/// A variable absent from a record's map counts as missing for that record.
pub fn impute_assets(cohort: &[HouseholdRecord]) -> Result<Vec<HouseholdRecord>> {
    let variables: BTreeSet<&String> = cohort.iter().flat_map(|r| r.assets.keys()).collect();
    let mut modes = BTreeMap::new();
    for var in variables {
        let observed = cohort
            .iter()
            .filter_map(|r| r.assets.get(var).and_then(|v| v.as_deref()));
        let mode = modal_category(observed).ok_or_else(|| {
            Error::validation(format!("asset variable `{var}` has no observed values"))
        })?;
        modes.insert(var.clone(), mode);
    }
    Ok(cohort
        .iter()
        .map(|r| {
            let mut r = r.clone();
            for (var, mode) in &modes {
                let cell = r.assets.entry(var.clone()).or_insert(None);
                if cell.is_none() {
                    *cell = Some(mode.clone());
                }
            }
            r
        })
        .collect())
}

/// All three measures per household. Assets are the anchor-oriented
/// first-dimension MCA scores of the mode-imputed asset table.
pub fn compute_sep_measures(
    cohort: &[HouseholdRecord],
    anchor: (&str, &str),
) -> Result<(BTreeMap<String, SepMeasures>, McaModel)> {
    let imputed = impute_assets(cohort)?;
    let table = CategoricalTable::from_records(&imputed)?;
    let model = fit_mca(&indicator_matrix(&table)?)?;
    let scores = first_dimension_scores(&model, anchor)?;
    let mut out = BTreeMap::new();
    for (record, (id, assets)) in cohort.iter().zip(scores) {
        let m = SepMeasures {
            assets,
            expenditure: compute_expenditure_sep(record)?,
            income: compute_income_sep(record)?,
        };
        if out.insert(id.clone(), m).is_some() {
            return Err(Error::validation(format!("duplicate household id `{id}`")));
        }
    }
    Ok((out, model))
}

/// Above-median flags for every household, medians taken over `train_ids`.
pub fn binarize_labels(
    sep: &BTreeMap<String, SepMeasures>,
    train_ids: &[String],
) -> Result<BinaryLabels> {
    if train_ids.is_empty() {
        return Err(Error::validation("binarize_labels: empty training set"));
    }
    let mut thresholds = [0.0; 3];
    for (k, threshold) in thresholds.iter_mut().enumerate() {
        let values = train_ids
            .iter()
            .map(|id| {
                sep.get(id)
                    .map(|m| m.as_array()[k])
                    .ok_or_else(|| Error::validation(format!("no SEP measures for `{id}`")))
            })
            .collect::<Result<Vec<f64>>>()?;
        *threshold = stats::median(&values);
    }
    let labels = sep
        .iter()
        .map(|(id, m)| {
            let v = m.as_array();
            (id.clone(), [v[0] > thresholds[0], v[1] > thresholds[1], v[2] > thresholds[2]])
        })
        .collect();
    Ok(BinaryLabels { thresholds, labels })
}
