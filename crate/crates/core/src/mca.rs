//! Multiple correspondence analysis of the asset indicator matrix.
//!
//! The asset index is the first-dimension row principal coordinate of the
//! correspondence analysis of the disjunctive (one-hot) coding of the asset
//! variables.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::dataset::HouseholdRecord;
use crate::error::{Error, Result};

/// Households x variables table of category labels, fully imputed.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoricalTable {
    pub ids: Vec<String>,
    pub variables: Vec<String>,
    /// `rows[i][q]` is the category of household `i` on variable `q`.
    pub rows: Vec<Vec<String>>,
}

impl CategoricalTable {
    /// Collect asset answers. Every record must answer every variable.
    pub fn from_records(records: &[HouseholdRecord]) -> Result<Self> {
        let variables: Vec<String> = records
            .iter()
            .flat_map(|r| r.assets.keys().cloned())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let mut rows = Vec::with_capacity(records.len());
        for r in records {
            let row = variables
                .iter()
                .map(|v| {
                    r.assets.get(v).cloned().flatten().ok_or_else(|| {
                        Error::validation(format!(
                            "household {}: asset `{v}` is missing (impute first)",
                            r.id
                        ))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            rows.push(row);
        }
        Ok(CategoricalTable { ids: records.iter().map(|r| r.id.clone()).collect(), variables, rows })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndicatorMatrix {
    pub ids: Vec<String>,
    /// n x J matrix of 0/1 entries.
    pub z: DMatrix<f64>,
    /// (variable, category) per column.
    pub columns: Vec<(String, String)>,
    /// Number of variables kept.
    pub n_variables: usize,
    /// Variables dropped for having a single observed category.
    pub dropped: Vec<String>,
}

/// Disjunctive coding: one column per observed (variable, category), in
/// variable order then category order.
pub fn indicator_matrix(table: &CategoricalTable) -> Result<IndicatorMatrix> {
    let n = table.rows.len();
    let mut columns = Vec::new();
    let mut blocks = Vec::new();
    let mut dropped = Vec::new();
    for (q, var) in table.variables.iter().enumerate() {
        let cats: BTreeSet<&str> = table.rows.iter().map(|r| r[q].as_str()).collect();
        if cats.len() < 2 {
            log::warn!("asset variable `{var}` has a single observed category; dropped");
            dropped.push(var.clone());
            continue;
        }
        let offset = columns.len();
        let index: BTreeMap<&str, usize> =
            cats.iter().enumerate().map(|(k, c)| (*c, offset + k)).collect();
        columns.extend(cats.iter().map(|c| (var.clone(), c.to_string())));
        blocks.push((q, index));
    }
    let mut z = DMatrix::zeros(n, columns.len());
    for (i, row) in table.rows.iter().enumerate() {
        for (q, index) in &blocks {
            z[(i, index[row[*q].as_str()])] = 1.0;
        }
    }
    Ok(IndicatorMatrix {
        ids: table.ids.clone(),
        z,
        columns,
        n_variables: blocks.len(),
        dropped,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InertiaConvention {
    #[default]
    Raw,
    Benzecri,
    Greenacre,
}

#[derive(Debug, Clone)]
pub struct McaModel {
    pub ids: Vec<String>,
    pub columns: Vec<(String, String)>,
    pub n_variables: usize,
    /// Non-trivial singular values of the standardized residual matrix, descending.
    pub singular_values: Vec<f64>,
    pub row_masses: Vec<f64>,
    pub column_masses: Vec<f64>,
    /// Left and right singular vectors (n x K, J x K).
    pub u: DMatrix<f64>,
    pub v: DMatrix<f64>,
    pub row_standard: DMatrix<f64>,
    pub row_principal: DMatrix<f64>,
    pub column_principal: DMatrix<f64>,
    /// Raw shares `sigma_k^2 / sum sigma^2`.
    pub inertia_shares: Vec<f64>,
}

/// Standardized residuals `D_r^-1/2 (P - r c^T) D_c^-1/2` with the masses.
pub fn standardized_residuals(z: &DMatrix<f64>) -> (DMatrix<f64>, Vec<f64>, Vec<f64>) {
    let total: f64 = z.iter().sum();
    let p = z / total;
    let r: Vec<f64> = (0..p.nrows()).map(|i| p.row(i).sum()).collect();
    let c: Vec<f64> = (0..p.ncols()).map(|j| p.column(j).sum()).collect();
    let s = DMatrix::from_fn(p.nrows(), p.ncols(), |i, j| {
        (p[(i, j)] - r[i] * c[j]) / (r[i] * c[j]).sqrt()
    });
    (s, r, c)
}

/// One-sided Jacobi SVD `a = U diag(sigma) V^T` (thin, unordered).
fn jacobi_svd(a: &DMatrix<f64>) -> Result<(DMatrix<f64>, Vec<f64>, DMatrix<f64>)> {
    let j = a.ncols();
    let mut u = a.clone();
    let mut v = DMatrix::<f64>::identity(j, j);
    let floor = a.norm_squared() * f64::EPSILON * f64::EPSILON;
    let mut converged = false;
    for _ in 0..100 {
        let mut rotated = false;
        for p in 0..j {
            for q in p + 1..j {
                let alpha = u.column(p).norm_squared();
                let beta = u.column(q).norm_squared();
                let gamma = u.column(p).dot(&u.column(q));
                if alpha.min(beta) <= floor || gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for m in [&mut u, &mut v] {
                    for i in 0..m.nrows() {
                        let (x, y) = (m[(i, p)], m[(i, q)]);
                        m[(i, p)] = c * x - s * y;
                        m[(i, q)] = s * x + c * y;
                    }
                }
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::Numerical("MCA: Jacobi SVD did not converge".into()));
    }
    let sigma: Vec<f64> = (0..j).map(|k| u.column(k).norm()).collect();
    for (k, &s) in sigma.iter().enumerate() {
        if s > 0.0 {
            u.column_mut(k).unscale_mut(s);
        }
    }
    Ok((u, sigma, v))
}

pub fn fit_mca(indicator: &IndicatorMatrix) -> Result<McaModel> {
    let (n, j) = indicator.z.shape();
    if n < 2 || j < 2 {
        return Err(Error::validation(format!("MCA needs n >= 2 and J >= 2, got {n} x {j}")));
    }
    let (s, r, c) = standardized_residuals(&indicator.z);
    let (u_all, singular_values, v_all) = jacobi_svd(&s)?;
    let sigma_max = singular_values.iter().cloned().fold(0.0, f64::max);
    if !(sigma_max > 1e-12) {
        return Err(Error::Numerical("MCA: no variance (all response patterns identical)".into()));
    }
    let mut order: Vec<usize> =
        (0..singular_values.len()).filter(|&k| singular_values[k] > 1e-12 * sigma_max).collect();
    order.sort_by(|&a, &b| singular_values[b].total_cmp(&singular_values[a]));
    let k = order.len();
    let sv: Vec<f64> = order.iter().map(|&i| singular_values[i]).collect();
    let u = DMatrix::from_fn(n, k, |i, d| u_all[(i, order[d])]);
    let v = DMatrix::from_fn(j, k, |col, d| v_all[(col, order[d])]);

    let row_standard = DMatrix::from_fn(n, k, |i, d| u[(i, d)] / r[i].sqrt());
    let row_principal = DMatrix::from_fn(n, k, |i, d| row_standard[(i, d)] * sv[d]);
    let column_principal = DMatrix::from_fn(j, k, |col, d| v[(col, d)] * sv[d] / c[col].sqrt());
    let total: f64 = sv.iter().map(|x| x * x).sum();
    let inertia_shares = sv.iter().map(|x| x * x / total).collect();

    Ok(McaModel {
        ids: indicator.ids.clone(),
        columns: indicator.columns.clone(),
        n_variables: indicator.n_variables,
        singular_values: sv,
        row_masses: r,
        column_masses: c,
        u,
        v,
        row_standard,
        row_principal,
        column_principal,
        inertia_shares,
    })
}

impl McaModel {
    pub fn total_inertia(&self) -> f64 {
        self.singular_values.iter().map(|x| x * x).sum()
    }

    /// Per-dimension inertia shares under the chosen convention.
    ///
    /// Benzecri and Greenacre both correct the principal inertias `l` above
    /// `1/Q` to `(Q/(Q-1))^2 (l - 1/Q)^2`; Benzecri divides by the sum of the
    /// corrected values, Greenacre by the adjusted total inertia
    /// `Q/(Q-1) (sum l^2 - (J-Q)/Q^2)`.
    pub fn inertia_shares_with(&self, convention: InertiaConvention) -> Vec<f64> {
        let q = self.n_variables as f64;
        let adjusted: Vec<f64> = self
            .singular_values
            .iter()
            .map(|s| {
                let l = s * s;
                if q > 1.0 && l > 1.0 / q {
                    (q / (q - 1.0)).powi(2) * (l - 1.0 / q).powi(2)
                } else {
                    0.0
                }
            })
            .collect();
        match convention {
            InertiaConvention::Raw => self.inertia_shares.clone(),
            InertiaConvention::Benzecri => {
                let total: f64 = adjusted.iter().sum();
                adjusted.iter().map(|a| if total > 0.0 { a / total } else { 0.0 }).collect()
            }
            InertiaConvention::Greenacre => {
                let j = self.columns.len() as f64;
                let sum_sq: f64 = self.singular_values.iter().map(|s| s.powi(4)).sum();
                let total = q / (q - 1.0) * (sum_sq - (j - q) / (q * q));
                adjusted.iter().map(|a| if total > 0.0 { a / total } else { 0.0 }).collect()
            }
        }
    }

    pub fn column_index(&self, variable: &str, category: &str) -> Option<usize> {
        self.columns.iter().position(|(v, c)| v == variable && c == category)
    }

    /// +1 or -1 so that the anchor category's first-dimension column
    /// coordinate is positive.
    pub fn orientation_sign(&self, anchor: (&str, &str)) -> Result<f64> {
        let col = self.column_index(anchor.0, anchor.1).ok_or_else(|| {
            Error::validation(format!(
                "anchor category {}={} is not among the coded columns",
                anchor.0, anchor.1
            ))
        })?;
        Ok(if self.column_principal[(col, 0)] < 0.0 { -1.0 } else { 1.0 })
    }
}

/// Oriented first-dimension row scores, in household order.
pub fn first_dimension_scores(model: &McaModel, anchor: (&str, &str)) -> Result<Vec<(String, f64)>> {
    let sign = model.orientation_sign(anchor)?;
    Ok(model
        .ids
        .iter()
        .enumerate()
        .map(|(i, id)| (id.clone(), sign * model.row_principal[(i, 0)]))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnCoordinate {
    pub variable: String,
    pub category: String,
    pub mass: f64,
    pub coordinates: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnReport {
    pub columns: Vec<ColumnCoordinate>,
    pub inertia_shares: Vec<f64>,
    pub benzecri_shares: Vec<f64>,
    pub greenacre_shares: Vec<f64>,
    pub orientation_sign: f64,
}

/// Column principal coordinates (oriented by `anchor` on every dimension's
/// first axis only) with the inertia shares.
pub fn column_principal_coordinates(model: &McaModel, anchor: Option<(&str, &str)>) -> Result<ColumnReport> {
    let sign = match anchor {
        Some(a) => model.orientation_sign(a)?,
        None => 1.0,
    };
    let columns = model
        .columns
        .iter()
        .enumerate()
        .map(|(j, (var, cat))| ColumnCoordinate {
            variable: var.clone(),
            category: cat.clone(),
            mass: model.column_masses[j],
            coordinates: (0..model.singular_values.len())
                .map(|d| if d == 0 { sign } else { 1.0 } * model.column_principal[(j, d)])
                .collect(),
        })
        .collect();
    Ok(ColumnReport {
        columns,
        inertia_shares: model.inertia_shares.clone(),
        benzecri_shares: model.inertia_shares_with(InertiaConvention::Benzecri),
        greenacre_shares: model.inertia_shares_with(InertiaConvention::Greenacre),
        orientation_sign: sign,
    })
}

impl ColumnReport {
    /// CSV of coordinates on the first `dims` dimensions.
    pub fn write_csv(&self, path: &Path, dims: usize) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["variable".to_string(), "category".into(), "mass".into()];
        let dims = dims.min(self.inertia_shares.len());
        header.extend((1..=dims).map(|d| format!("dim{d}")));
        w.write_record(&header)?;
        for c in &self.columns {
            let mut row = vec![c.variable.clone(), c.category.clone(), c.mass.to_string()];
            row.extend(c.coordinates.iter().take(dims).map(|v| v.to_string()));
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}
