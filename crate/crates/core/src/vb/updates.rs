//! Closed-form coordinate updates, one function per update family.
//!
//! Each function replaces one family of q-factors by its optimum given the
//! current expectations of everything else, so the bound never decreases.
//! Latent rows and projection columns are independent of each other within
//! their family and may be computed in parallel; entries within one latent
//! row, and cells of the core, are coupled and are swept in order.

use nalgebra::{DMatrix, DVector};

use super::stats::{core_stats, ViewInputs, ViewPlan};
use crate::error::{Error, Result};
use crate::exec::map_indexed;
use crate::state::{second_moment, ModelState, VARIANCE_FLOOR};
use crate::tensor::{Mask3, Tensor3};

/// Gamma update for the projection precisions of `mode`.
///
/// Entrywise: `shape = alpha + 1/2`, `scale = (E[a]^2/2 + Var(a)/2 + 1/beta)^-1`.
/// Shared across a row: `shape = alpha + L/2` with the row sum of `E[a^2]`.
pub fn update_lambda_a(state: &mut ModelState, mode: usize) {
    let mh = state.hyper.modes[mode].clone();
    let ms = &mut state.modes[mode];
    let n_cols = ms.proj.len();
    let p = ms.n_design();
    let g = &mut ms.lambda;
    if state.hyper.row_shared_precision {
        for row in 0..p {
            let sum: f64 = ms
                .proj
                .iter()
                .map(|c| second_moment(c.mean[row], c.cov[(row, row)]))
                .sum();
            g.shape[row] = mh.alpha + 0.5 * n_cols as f64;
            g.scale[row] = (0.5 * sum + 1.0 / mh.beta).recip().max(VARIANCE_FLOOR);
        }
    } else {
        for row in 0..p {
            for (l, c) in ms.proj.iter().enumerate() {
                let idx = g.idx(row, l);
                let e2 = second_moment(c.mean[row], c.cov[(row, row)]);
                g.shape[idx] = mh.alpha + 0.5;
                g.scale[idx] = (0.5 * e2 + 1.0 / mh.beta).recip().max(VARIANCE_FLOOR);
            }
        }
    }
}

/// Gaussian update for every projection column of `mode`:
/// `Sigma = (X^T X / s2 + diag E[lambda])^-1`, `mu = Sigma X^T E[h] / s2`.
pub fn update_a(state: &mut ModelState, mode: usize, parallel: bool) -> Result<()> {
    let s2 = state.hyper.modes[mode].sigma2;
    let ms = &state.modes[mode];
    let p = ms.n_design();
    let offset = ms.offset;
    let results = map_indexed(ms.proj.len(), parallel, |l| {
        let mut precision = &ms.gram / s2;
        for row in 0..p {
            precision[(row, row)] += ms.lambda.mean(ms.lambda_idx(row, l));
        }
        let chol = precision.cholesky()?;
        let cov = chol.inverse();
        let h = ms.latent.mean.column(l + offset);
        let rhs: DVector<f64> = ms.design.transpose() * h / s2;
        let mean = &cov * rhs;
        Some((mean, symmetrize(cov)))
    });
    let ms = &mut state.modes[mode];
    for (l, r) in results.into_iter().enumerate() {
        let (mean, cov) = r.ok_or(Error::Solver { mode, column: l })?;
        debug_assert!(cov.clone().cholesky().is_some(), "covariance lost definiteness");
        ms.proj[l].mean = mean;
        ms.proj[l].cov = cov;
    }
    Ok(())
}

fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    let t = m.transpose();
    (m + t) * 0.5
}

/// Per-entry Gaussian update of the latent matrix of `mode`.
///
/// For row `a`, with `Q = sum delta E[v v^T]` and `beta = sum delta y E[v]`
/// where `v_r = sum c_{r..} h h`, each learned column is set in turn to
/// `Var = (Q_rr / s2 + 1 / s2_m)^-1` and
/// `mean = Var ((beta_r - sum_{r' != r} Q_rr' E[h_r']) / s2 + x_a E[a_r] / s2_m)`.
/// The ones column is never touched.
pub fn update_h(state: &mut ModelState, y: &Tensor3, mask: &Mask3, mode: usize, parallel: bool) {
    let ranks = state.ranks();
    let plan = ViewPlan::new(mode, ranks, &state.core.free);
    let nf = plan.free_coords.len();
    let cm = state.core.mean.as_slice();
    let cv = state.core.var.as_slice();
    let free = &state.core.free;
    let mut s_pairs = vec![0.0; nf * nf];
    for x in 0..nf {
        for z in 0..nf {
            s_pairs[x * nf + z] = cm[free[x]] * cm[free[z]];
        }
        s_pairs[x * nf + x] += cv[free[x]];
    }

    let sigma2 = state.hyper.sigma2_y;
    let s2m = state.hyper.modes[mode].sigma2;
    let ms = &state.modes[mode];
    let offset = ms.offset;
    let r = ranks[mode];
    let r2 = ranks[plan.o2];
    let prior_mean = &ms.design * ms.proj_mean();
    let inputs = ViewInputs::new(&plan, state, y, mask);
    let latent = &ms.latent;

    let rows = map_indexed(latent.mean.nrows(), parallel, |a| {
        let s = inputs.slice(a);
        let mut q = vec![0.0; r * r];
        for (&(qi, x, z), &sp) in plan.fpairs.iter().zip(&s_pairs) {
            q[x as usize * r + z as usize] += sp * s.w[qi as usize];
        }
        let mut beta = vec![0.0; r];
        for (x, c) in plan.free_coords.iter().enumerate() {
            beta[c[0]] += cm[free[x]] * s.z[c[1] * r2 + c[2]];
        }
        let mut mean: Vec<f64> = (0..r).map(|t| latent.mean[(a, t)]).collect();
        let mut var: Vec<f64> = (0..r).map(|t| latent.var[(a, t)]).collect();
        for t in offset..r {
            let precision = q[t * r + t] / sigma2 + 1.0 / s2m;
            let cross: f64 = (0..r)
                .filter(|&u| u != t)
                .map(|u| q[t * r + u] * mean[u])
                .sum();
            let v = precision.recip().max(VARIANCE_FLOOR);
            mean[t] = v * ((beta[t] - cross) / sigma2 + prior_mean[(a, t - offset)] / s2m);
            var[t] = v;
        }
        (mean, var)
    });

    let latent = &mut state.modes[mode].latent;
    for (a, (mean, var)) in rows.into_iter().enumerate() {
        for t in offset..r {
            latent.mean[(a, t)] = mean[t];
            latent.var[(a, t)] = var[t];
        }
    }
}

/// Gamma update for the core precisions; pinned cells and a pinned prior are
/// left alone.
pub fn update_lambda_core(state: &mut ModelState) {
    if !state.hyper.core_prior {
        return;
    }
    let (alpha, beta) = (state.hyper.core_alpha, state.hyper.core_beta);
    let core = &mut state.core;
    for &f in &core.free {
        let e2 = second_moment(core.mean.as_slice()[f], core.var.as_slice()[f]);
        core.lambda.shape[f] = alpha + 0.5;
        core.lambda.scale[f] = (0.5 * e2 + 1.0 / beta).recip().max(VARIANCE_FLOOR);
    }
}

/// Gaussian update of every free core cell, swept in storage order:
/// `Var = (G_ff / s2 + E[lambda_f])^-1`,
/// `mean = Var (b_f - sum_{f' != f} G_ff' E[c_f']) / s2`.
pub fn update_core(state: &mut ModelState, y: &Tensor3, mask: &Mask3, parallel: bool) {
    let stats = core_stats(state, y, mask, parallel);
    let sigma2 = state.hyper.sigma2_y;
    let learned = state.hyper.core_prior;
    let nf = state.core.free.len();
    let free = state.core.free.clone();
    let mut means: Vec<f64> = free.iter().map(|&f| state.core.mean.as_slice()[f]).collect();
    for x in 0..nf {
        let (e_lambda, _) = state.core.precision_moments(learned, free[x]);
        let row = &stats.gram[x * nf..(x + 1) * nf];
        let cross: f64 = row
            .iter()
            .zip(&means)
            .enumerate()
            .filter(|&(z, _)| z != x)
            .map(|(_, (g, m))| g * m)
            .sum();
        let precision = row[x] / sigma2 + e_lambda;
        let v = precision.recip().max(VARIANCE_FLOOR);
        means[x] = v * (stats.rhs[x] - cross) / sigma2;
        state.core.var.as_mut_slice()[free[x]] = v;
        state.core.mean.as_mut_slice()[free[x]] = means[x];
    }
}
