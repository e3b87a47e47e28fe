//! Closed-form evidence lower bound.
//!
//! `L = E_q[log p(Y, Theta)] - E_q[log q(Theta)]`, with every expectation
//! written in terms of Gaussian means/variances and Gamma shape/scale:
//!
//! - `E[log N(x; mu, s2)] = -1/2 log(2 pi s2) - E[(x - mu)^2] / (2 s2)`
//! - `E[log Gamma(l; a, b)] = (a - 1) E[ln l] - E[l] / b - lnGamma(a) - a ln b`,
//!   with `E[ln l] = digamma(k) + ln theta` under `q = Gamma(k, theta)`
//! - Gaussian entropy `1/2 ln det(2 pi e Sigma)`
//! - Gamma entropy `k + ln theta + lnGamma(k) + (1 - k) digamma(k)`.

use std::f64::consts::{E, PI};

use statrs::function::gamma::{digamma, ln_gamma};

use super::stats::core_stats;
use crate::state::{second_moment, GammaQ, ModelState};
use crate::tensor::{Mask3, Tensor3};

/// The bound split by factor, for diagnostics and tests.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ElboTerms {
    pub likelihood: f64,
    pub latent_prior: f64,
    pub proj_prior: f64,
    pub proj_precision_prior: f64,
    pub core_prior: f64,
    pub core_precision_prior: f64,
    pub entropy: f64,
}

impl ElboTerms {
    pub fn total(&self) -> f64 {
        self.likelihood
            + self.latent_prior
            + self.proj_prior
            + self.proj_precision_prior
            + self.core_prior
            + self.core_precision_prior
            + self.entropy
    }
}

pub fn compute_elbo(state: &ModelState, y: &Tensor3, mask: &Mask3) -> f64 {
    elbo_terms(state, y, mask, false).total()
}

fn gamma_log_prior(g: &GammaQ, idx: usize, alpha: f64, beta: f64) -> f64 {
    (alpha - 1.0) * g.mean_log(idx) - g.mean(idx) / beta - ln_gamma(alpha) - alpha * beta.ln()
}

fn gamma_entropy(g: &GammaQ, idx: usize) -> f64 {
    let (k, theta) = (g.shape[idx], g.scale[idx]);
    k + theta.ln() + ln_gamma(k) + (1.0 - k) * digamma(k)
}

fn gaussian_entropy(var: f64) -> f64 {
    0.5 * (2.0 * PI * E * var).ln()
}

pub fn elbo_terms(state: &ModelState, y: &Tensor3, mask: &Mask3, parallel: bool) -> ElboTerms {
    let mut t = ElboTerms::default();
    let hyper = &state.hyper;
    let ln2pi = (2.0 * PI).ln();

    // Likelihood over observed cells.
    let stats = core_stats(state, y, mask, parallel);
    let free = &state.core.free;
    let nf = free.len();
    let cm = state.core.mean.as_slice();
    let cv = state.core.var.as_slice();
    let mut cross = 0.0;
    let mut quad = 0.0;
    for x in 0..nf {
        cross += cm[free[x]] * stats.rhs[x];
        for z in 0..nf {
            quad += cm[free[x]] * cm[free[z]] * stats.gram[x * nf + z];
        }
        quad += cv[free[x]] * stats.gram[x * nf + x];
    }
    let s2 = hyper.sigma2_y;
    t.likelihood = -0.5 * stats.n_obs as f64 * (ln2pi + s2.ln())
        - (stats.yy - 2.0 * cross + quad) / (2.0 * s2);

    for (m, ms) in state.modes.iter().enumerate() {
        let mh = &hyper.modes[m];
        let x = &ms.design;
        let offset = ms.offset;

        // Latent matrix given projection: N(h; x a, s2_m).
        for (l, col) in ms.proj.iter().enumerate() {
            let xm = x * &col.mean;
            let xs = x * &col.cov;
            for i in 0..ms.n_examples() {
                let quad_form = xs.row(i).dot(&x.row(i));
                let mu = ms.latent.mean[(i, l + offset)];
                let v = ms.latent.var[(i, l + offset)];
                let e2 = (mu - xm[i]).powi(2) + v + quad_form;
                t.latent_prior += -0.5 * (ln2pi + mh.sigma2.ln()) - e2 / (2.0 * mh.sigma2);
                t.entropy += gaussian_entropy(v);
            }
            // Projection entries given precisions.
            for p in 0..ms.n_design() {
                let idx = ms.lambda_idx(p, l);
                let e2 = second_moment(col.mean[p], col.cov[(p, p)]);
                t.proj_prior +=
                    -0.5 * ln2pi + 0.5 * ms.lambda.mean_log(idx) - 0.5 * ms.lambda.mean(idx) * e2;
            }
            let chol = col.cov.clone().cholesky().expect("projection covariance is PD");
            let log_det: f64 = chol.l_dirty().diagonal().iter().map(|d| 2.0 * d.ln()).sum();
            t.entropy += 0.5 * (ms.n_design() as f64 * (2.0 * PI * E).ln() + log_det);
        }
        for idx in 0..ms.lambda.shape.len() {
            t.proj_precision_prior += gamma_log_prior(&ms.lambda, idx, mh.alpha, mh.beta);
            t.entropy += gamma_entropy(&ms.lambda, idx);
        }
    }

    let learned = hyper.core_prior;
    for &f in free {
        let (e_lambda, e_log) = state.core.precision_moments(learned, f);
        let e2 = second_moment(cm[f], cv[f]);
        t.core_prior += -0.5 * ln2pi + 0.5 * e_log - 0.5 * e_lambda * e2;
        t.entropy += gaussian_entropy(cv[f]);
        if learned {
            t.core_precision_prior +=
                gamma_log_prior(&state.core.lambda, f, hyper.core_alpha, hyper.core_beta);
            t.entropy += gamma_entropy(&state.core.lambda, f);
        }
    }
    t
}
