//! Weighted binary and multinomial logistic regression by damped Newton.
//!
//! Rows carry fractional success/failure weights so the same solvers serve the
//! M-step (expected counts) and the plain-data fitters. No accepted step
//! decreases the weighted log-likelihood by more than rounding noise; that is
//! what keeps the EM iterates monotone when a sub-model stops short of its
//! optimum.

use nalgebra::{DMatrix, DVector};

use crate::model::{clamp_eta, dot, log_logistic, logistic};

#[derive(Clone, Copy, Debug)]
pub struct NewtonOptions {
    pub max_iters: usize,
    /// Ridge added to the Hessian when it is not positive definite.
    pub ridge: f64,
    /// Stop after a step whose Newton decrement `g'H⁻¹g` is below `tol * (1 + |ll|)`.
    pub tol: f64,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        Self { max_iters: 50, ridge: 1e-8, tol: 1e-12 }
    }
}

#[derive(Clone, Debug)]
pub struct NewtonFit {
    pub coef: Vec<f64>,
    pub loglik: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Binary-response design with per-row offsets and weights.
#[derive(Clone, Debug, Default)]
pub struct BinomialRows {
    dim: usize,
    x: Vec<f64>,
    offset: Vec<f64>,
    w1: Vec<f64>,
    w0: Vec<f64>,
}

impl BinomialRows {
    pub fn new(dim: usize) -> Self {
        Self { dim, ..Default::default() }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.w1.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w1.is_empty()
    }

    /// Adds a row with `w1` weight on response 1 and `w0` on response 0.
    /// Rows with no weight are dropped.
    pub fn push(&mut self, features: &[f64], offset: f64, w1: f64, w0: f64) {
        debug_assert_eq!(features.len(), self.dim);
        if w1 + w0 <= 0.0 {
            return;
        }
        self.x.extend_from_slice(features);
        self.offset.push(offset);
        self.w1.push(w1);
        self.w0.push(w0);
    }

    pub fn total_weight(&self) -> f64 {
        self.w1.iter().chain(&self.w0).sum()
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.dim..(i + 1) * self.dim]
    }

    pub fn loglik(&self, coef: &[f64]) -> f64 {
        (0..self.len())
            .map(|i| {
                let eta = dot(coef, self.row(i)) + self.offset[i];
                self.w1[i] * log_logistic(eta) + self.w0[i] * log_logistic(-eta)
            })
            .sum()
    }

    /// Gradient and Hessian of the log-likelihood (Hessian sign flipped, so
    /// it is positive semi-definite).
    fn derivatives(&self, coef: &[f64]) -> (DVector<f64>, DMatrix<f64>) {
        let p = self.dim;
        let mut g = DVector::zeros(p);
        let mut h = DMatrix::zeros(p, p);
        for i in 0..self.len() {
            let x = self.row(i);
            let eta = clamp_eta(dot(coef, x) + self.offset[i]);
            let mu = logistic(eta);
            let n = self.w1[i] + self.w0[i];
            let resid = self.w1[i] - n * mu;
            let v = n * mu * logistic(-eta);
            for a in 0..p {
                g[a] += resid * x[a];
                let va = v * x[a];
                for b in 0..=a {
                    h[(a, b)] += va * x[b];
                }
            }
        }
        symmetrize(&mut h);
        (g, h)
    }

    /// Inverse of the observed information at `coef`, if it is invertible.
    pub fn covariance(&self, coef: &[f64]) -> Option<DMatrix<f64>> {
        let (_, h) = self.derivatives(coef);
        h.cholesky().map(|c| c.inverse())
    }
}

fn symmetrize(h: &mut DMatrix<f64>) {
    let p = h.nrows();
    for a in 0..p {
        for b in 0..a {
            h[(b, a)] = h[(a, b)];
        }
    }
}

/// Solves `h · step = g`, adding ridge when `h` is not positive definite.
fn newton_direction(mut h: DMatrix<f64>, g: &DVector<f64>, ridge: f64) -> DVector<f64> {
    if let Some(c) = h.clone().cholesky() {
        let s = c.solve(g);
        if s.iter().all(|v| v.is_finite()) {
            return s;
        }
    }
    let scale = (0..h.nrows()).map(|i| h[(i, i)].abs()).fold(1.0, f64::max);
    let mut lambda = ridge.max(f64::EPSILON) * scale;
    for _ in 0..40 {
        for i in 0..h.nrows() {
            h[(i, i)] += lambda;
        }
        if let Some(c) = h.clone().cholesky() {
            let s = c.solve(g);
            if s.iter().all(|v| v.is_finite()) {
                return s;
            }
        }
        lambda *= 10.0;
    }
    // gradient ascent fallback
    g / scale
}

fn damped_newton<F, D>(start: &[f64], opts: NewtonOptions, loglik: F, derivatives: D) -> NewtonFit
where
    F: Fn(&[f64]) -> f64,
    D: Fn(&[f64]) -> (DVector<f64>, DMatrix<f64>),
{
    let mut coef = start.to_vec();
    let mut ll = loglik(&coef);
    let mut converged = false;
    let mut iterations = 0;
    while iterations < opts.max_iters {
        iterations += 1;
        let (g, h) = derivatives(&coef);
        if g.amax() < 1e-12 {
            converged = true;
            break;
        }
        let step = newton_direction(h, &g, opts.ridge);
        let decrement = g.dot(&step);
        // Near the optimum the gain is below the rounding noise of the
        // log-likelihood; allow that much slack so the Newton step still lands.
        let slack = if decrement < 1e-6 * (1.0 + ll.abs()) { 1e-13 * (1.0 + ll.abs()) } else { 0.0 };
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let trial: Vec<f64> = coef.iter().zip(step.iter()).map(|(c, s)| c + t * s).collect();
            let trial_ll = loglik(&trial);
            if trial_ll >= ll - slack {
                accepted = Some((trial, trial_ll));
                break;
            }
            t *= 0.5;
        }
        let Some((trial, trial_ll)) = accepted else {
            converged = true;
            break;
        };
        let max_step = step.amax() * t;
        coef = trial;
        ll = trial_ll;
        if decrement <= opts.tol * (1.0 + ll.abs()) || max_step < 1e-10 {
            converged = true;
            break;
        }
    }
    NewtonFit { coef, loglik: ll, iterations, converged }
}

/// Maximizes the weighted binomial log-likelihood starting from `start`.
pub fn fit_binomial(rows: &BinomialRows, start: &[f64], opts: NewtonOptions) -> NewtonFit {
    assert_eq!(start.len(), rows.dim());
    if rows.is_empty() {
        return NewtonFit { coef: start.to_vec(), loglik: 0.0, iterations: 0, converged: true };
    }
    damped_newton(start, opts, |c| rows.loglik(c), |c| rows.derivatives(c))
}

/// Categorical-response design: per row, features and a weight per category.
/// Category 0 is the reference.
#[derive(Clone, Debug)]
pub struct MultinomialRows {
    dim: usize,
    categories: usize,
    x: Vec<f64>,
    counts: Vec<f64>,
}

impl MultinomialRows {
    pub fn new(dim: usize, categories: usize) -> Self {
        assert!(categories >= 2);
        Self { dim, categories, x: Vec::new(), counts: Vec::new() }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn categories(&self) -> usize {
        self.categories
    }

    pub fn len(&self) -> usize {
        self.counts.len() / self.categories
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn push(&mut self, features: &[f64], counts: &[f64]) {
        debug_assert_eq!(features.len(), self.dim);
        debug_assert_eq!(counts.len(), self.categories);
        if counts.iter().sum::<f64>() <= 0.0 {
            return;
        }
        self.x.extend_from_slice(features);
        self.counts.extend_from_slice(counts);
    }

    fn row(&self, i: usize) -> (&[f64], &[f64]) {
        (&self.x[i * self.dim..(i + 1) * self.dim], &self.counts[i * self.categories..(i + 1) * self.categories])
    }

    /// Category probabilities for features `x` under stacked coefficients
    /// (`categories − 1` blocks of length `dim`).
    pub fn probabilities(&self, coef: &[f64], x: &[f64]) -> Vec<f64> {
        softmax_ref(coef, x, self.categories)
    }

    pub fn loglik(&self, coef: &[f64]) -> f64 {
        let mut ll = 0.0;
        for i in 0..self.len() {
            let (x, n) = self.row(i);
            let eta = linear_predictors(coef, x, self.categories);
            let m = eta.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let log_s = m + eta.iter().map(|e| (e - m).exp()).sum::<f64>().ln();
            for (nk, ek) in n.iter().zip(&eta) {
                if *nk > 0.0 {
                    ll += nk * (ek - log_s);
                }
            }
        }
        ll
    }

    fn derivatives(&self, coef: &[f64]) -> (DVector<f64>, DMatrix<f64>) {
        let p = self.dim;
        let k1 = self.categories - 1;
        let np = p * k1;
        let mut g = DVector::zeros(np);
        let mut h = DMatrix::zeros(np, np);
        for i in 0..self.len() {
            let (x, n) = self.row(i);
            let pr = softmax_ref(coef, x, self.categories);
            let total: f64 = n.iter().sum();
            for k in 0..k1 {
                let resid = n[k + 1] - total * pr[k + 1];
                for a in 0..p {
                    g[k * p + a] += resid * x[a];
                }
                for l in 0..=k {
                    let w = total * pr[k + 1] * (if k == l { 1.0 } else { 0.0 } - pr[l + 1]);
                    for a in 0..p {
                        let wa = w * x[a];
                        for b in 0..p {
                            h[(k * p + a, l * p + b)] += wa * x[b];
                        }
                    }
                }
            }
        }
        for r in 0..np {
            for c in (r + 1)..np {
                h[(r, c)] = h[(c, r)];
            }
        }
        (g, h)
    }

    pub fn covariance(&self, coef: &[f64]) -> Option<DMatrix<f64>> {
        let (_, h) = self.derivatives(coef);
        h.cholesky().map(|c| c.inverse())
    }
}

/// Linear predictors with the reference category's fixed at zero.
fn linear_predictors(coef: &[f64], x: &[f64], categories: usize) -> Vec<f64> {
    let p = x.len();
    let mut eta = Vec::with_capacity(categories);
    eta.push(0.0);
    for k in 0..categories - 1 {
        eta.push(dot(&coef[k * p..(k + 1) * p], x));
    }
    eta
}

fn softmax_ref(coef: &[f64], x: &[f64], categories: usize) -> Vec<f64> {
    let mut eta = linear_predictors(coef, x, categories);
    let m = eta.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for e in &mut eta {
        *e = (*e - m).exp();
        s += *e;
    }
    eta.iter_mut().for_each(|e| *e /= s);
    eta
}

/// Maximizes the weighted multinomial log-likelihood starting from `start`.
pub fn fit_multinomial(rows: &MultinomialRows, start: &[f64], opts: NewtonOptions) -> NewtonFit {
    assert_eq!(start.len(), rows.dim() * (rows.categories() - 1));
    if rows.is_empty() {
        return NewtonFit { coef: start.to_vec(), loglik: 0.0, iterations: 0, converged: true };
    }
    damped_newton(start, opts, |c| rows.loglik(c), |c| rows.derivatives(c))
}
