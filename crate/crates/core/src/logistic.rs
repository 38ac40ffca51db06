//! L2-regularized logistic regression without intercept, solved by damped
//! Newton iterations.
//!
//! Objective: `(1/m) Σ_j [softplus(z_j) - t_j z_j] + (λ/2) |β|²` with
//! `z_j = β · x_j` and soft targets `t_j ∈ [0, 1]`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalarization::logistic;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub l2: f64,
    pub max_iterations: usize,
    pub gradient_tolerance: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            l2: 1e-3,
            max_iterations: 100,
            gradient_tolerance: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticFit {
    pub coef: Vec<f64>,
    pub iterations: usize,
    pub loss: f64,
    pub grad_norm: f64,
}

pub fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Objective value and gradient at `coef`.
pub fn objective(coef: &[f64], x: &[Vec<f64>], t: &[f64], l2: f64) -> (f64, Vec<f64>) {
    let m = x.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; coef.len()];
    for (xi, &ti) in x.iter().zip(t) {
        let z = dot(coef, xi);
        loss += softplus(z) - ti * z;
        let r = logistic(z) - ti;
        for (g, v) in grad.iter_mut().zip(xi) {
            *g += r * v;
        }
    }
    loss /= m;
    for (g, c) in grad.iter_mut().zip(coef) {
        *g = *g / m + l2 * c;
    }
    loss += 0.5 * l2 * dot(coef, coef);
    (loss, grad)
}

fn hessian(coef: &[f64], x: &[Vec<f64>], l2: f64) -> DMatrix<f64> {
    let d = coef.len();
    let m = x.len() as f64;
    let mut h = DMatrix::zeros(d, d);
    for xi in x {
        let p = logistic(dot(coef, xi));
        let w = p * (1.0 - p) / m;
        for a in 0..d {
            let wa = w * xi[a];
            for b in a..d {
                h[(a, b)] += wa * xi[b];
            }
        }
    }
    for a in 0..d {
        h[(a, a)] += l2;
        for b in 0..a {
            h[(a, b)] = h[(b, a)];
        }
    }
    h
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

pub fn fit_logistic(x: &[Vec<f64>], t: &[f64], config: &SolverConfig) -> Result<LogisticFit> {
    if x.is_empty() {
        return Err(Error::Empty("logistic regression data"));
    }
    let d = x[0].len();
    if d == 0 || x.iter().any(|r| r.len() != d) || t.len() != x.len() {
        return Err(Error::Degenerate("ragged design matrix".into()));
    }
    let mut coef = vec![0.0; d];
    let (mut loss, mut grad) = objective(&coef, x, t, config.l2);
    for iter in 0..config.max_iterations {
        let gn = norm(&grad);
        if gn < config.gradient_tolerance {
            return Ok(LogisticFit {
                coef,
                iterations: iter,
                loss,
                grad_norm: gn,
            });
        }
        let h = hessian(&coef, x, config.l2);
        let step = match h.cholesky() {
            Some(ch) => ch.solve(&DVector::from_column_slice(&grad)),
            None => {
                return Err(Error::Degenerate(
                    "singular Hessian (collinear features without regularization)".into(),
                ))
            }
        };
        // backtracking line search on the Newton direction
        let slope: f64 = grad.iter().zip(step.iter()).map(|(g, s)| g * s).sum();
        let mut alpha = 1.0;
        loop {
            let trial: Vec<f64> = coef.iter().zip(step.iter()).map(|(c, s)| c - alpha * s).collect();
            let (tl, tg) = objective(&trial, x, t, config.l2);
            if tl <= loss - 1e-4 * alpha * slope || alpha < 1e-10 {
                coef = trial;
                loss = tl;
                grad = tg;
                break;
            }
            alpha *= 0.5;
        }
    }
    let gn = norm(&grad);
    if gn < config.gradient_tolerance {
        Ok(LogisticFit {
            coef,
            iterations: config.max_iterations,
            loss,
            grad_norm: gn,
        })
    } else {
        Err(Error::NonConvergence {
            iterations: config.max_iterations,
            grad_norm: gn,
        })
    }
}
