use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Linear model with coefficients on the original feature scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElasticNet {
    pub intercept: f64,
    pub coef: Vec<f64>,
    pub alpha: f64,
    pub l1_ratio: f64,
    pub n_iter: usize,
    pub converged: bool,
}

impl ElasticNet {
    pub fn predict(&self, x: &DMatrix<f64>) -> Vec<f64> {
        (0..x.nrows())
            .map(|i| self.intercept + self.coef.iter().enumerate().map(|(j, b)| b * x[(i, j)]).sum::<f64>())
            .collect()
    }
}

fn soft_threshold(z: f64, t: f64) -> f64 {
    if z > t {
        z - t
    } else if z < -t {
        z + t
    } else {
        0.0
    }
}

/// Columns centered and scaled to unit (population) variance. Constant
/// columns get scale 0 and are left out of the fit.
struct Standardized {
    z: Vec<f64>,
    mean: Vec<f64>,
    scale: Vec<f64>,
    n: usize,
}

impl Standardized {
    fn new(x: &DMatrix<f64>) -> Self {
        let n = x.nrows();
        let mut z = Vec::with_capacity(n * x.ncols());
        let mut mean = Vec::new();
        let mut scale = Vec::new();
        for col in x.column_iter() {
            let m = col.sum() / n as f64;
            let var = col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n as f64;
            let s = var.sqrt();
            let s = if s > 1e-12 * m.abs().max(1.0) { s } else { 0.0 };
            z.extend(col.iter().map(|v| if s > 0.0 { (v - m) / s } else { 0.0 }));
            mean.push(m);
            scale.push(s);
        }
        Standardized { z, mean, scale, n }
    }

    fn col(&self, j: usize) -> &[f64] {
        &self.z[j * self.n..(j + 1) * self.n]
    }
}

/// Minimize `1/(2n) |y - b0 - X b|^2 + alpha l1 |b|_1 + alpha/2 (1 - l1) |b|^2`
/// by cyclic coordinate descent, with the penalty applied to the
/// standardized coefficients. Stops when the largest coefficient update is
/// below `tol`.
pub fn elasticnet_fit(
    x: &DMatrix<f64>,
    y: &[f64],
    alpha: f64,
    l1_ratio: f64,
    tol: f64,
    max_iter: usize,
) -> Result<ElasticNet> {
    let (n, p) = x.shape();
    if n == 0 || y.len() != n {
        return Err(Error::validation(format!("elasticnet_fit: {n} rows but {} targets", y.len())));
    }
    if !(alpha >= 0.0) || !(0.0..=1.0).contains(&l1_ratio) {
        return Err(Error::validation(format!("elasticnet_fit: alpha {alpha}, l1_ratio {l1_ratio}")));
    }
    let s = Standardized::new(x);
    let y_mean = crate::stats::mean(y);
    let mut r: Vec<f64> = y.iter().map(|v| v - y_mean).collect();
    let mut beta = vec![0.0; p];
    let l1 = alpha * l1_ratio;
    let denom = 1.0 + alpha * (1.0 - l1_ratio);
    let nf = n as f64;
    let mut n_iter = 0;
    let mut converged = false;
    while n_iter < max_iter {
        n_iter += 1;
        let mut max_change: f64 = 0.0;
        for j in 0..p {
            if s.scale[j] == 0.0 {
                continue;
            }
            let zj = s.col(j);
            let rho = zj.iter().zip(&r).map(|(a, b)| a * b).sum::<f64>() / nf + beta[j];
            let new = soft_threshold(rho, l1) / denom;
            let delta = new - beta[j];
            if delta != 0.0 {
                r.iter_mut().zip(zj).for_each(|(ri, zi)| *ri -= delta * zi);
                beta[j] = new;
                max_change = max_change.max(delta.abs());
            }
        }
        if max_change < tol {
            converged = true;
            break;
        }
    }
    if !converged {
        log::warn!(
            "elastic net did not converge in {max_iter} sweeps (alpha {alpha}, l1_ratio {l1_ratio}); KKT residual {:.3e}",
            kkt_violation(&s, &r, &beta, alpha, l1_ratio)
        );
    }
    let coef: Vec<f64> = beta.iter().zip(&s.scale).map(|(b, sc)| if *sc > 0.0 { b / sc } else { 0.0 }).collect();
    let intercept = y_mean - coef.iter().zip(&s.mean).map(|(c, m)| c * m).sum::<f64>();
    Ok(ElasticNet { intercept, coef, alpha, l1_ratio, n_iter, converged })
}

fn kkt_violation(s: &Standardized, r: &[f64], beta: &[f64], alpha: f64, l1_ratio: f64) -> f64 {
    let l1 = alpha * l1_ratio;
    let mut worst: f64 = 0.0;
    for j in 0..beta.len() {
        if s.scale[j] == 0.0 {
            continue;
        }
        let g = s.col(j).iter().zip(r).map(|(a, b)| a * b).sum::<f64>() / s.n as f64 - alpha * (1.0 - l1_ratio) * beta[j];
        let v = if beta[j] != 0.0 { (g - l1 * beta[j].signum()).abs() } else { (g.abs() - l1).max(0.0) };
        worst = worst.max(v);
    }
    worst
}

/// Largest violation of the optimality conditions, measured on the
/// standardized problem the solver works on.
pub fn kkt_residual(x: &DMatrix<f64>, y: &[f64], model: &ElasticNet) -> f64 {
    let s = Standardized::new(x);
    let beta: Vec<f64> = model.coef.iter().zip(&s.scale).map(|(c, sc)| c * sc).collect();
    let y_mean = crate::stats::mean(y);
    let r: Vec<f64> = (0..s.n)
        .map(|i| y[i] - y_mean - (0..beta.len()).map(|j| beta[j] * s.col(j)[i]).sum::<f64>())
        .collect();
    kkt_violation(&s, &r, &beta, model.alpha, model.l1_ratio)
}
