//! Masked sufficient statistics shared by the latent, core and bound
//! computations.
//!
//! Everything the likelihood needs reduces to sums over observed cells of
//! products of per-example second-moment matrices `M_i = E[h_i h_i^T]`. For a
//! chosen "own" mode `m` with the other two modes `o1 < o2`, and a fixed own
//! index `a`, we accumulate
//!
//! - `T[b][p] = sum_c delta(a,b,c) M_c[p]` over unordered latent pairs `p`
//!   of mode `o2`,
//! - `W[q]    = sum_b M_b[t(q)] T[b][p(q)]` for each needed `(o1 pair, o2 pair)`,
//! - `Z[s][u] = sum_b sum_c delta y E[h_b,s] E[h_c,u]`.
//!
//! Only pairs that actually occur between free core cells are formed, so a CP
//! core touches just its superdiagonal combinations.

use std::collections::HashMap;

use crate::exec::map_indexed;
use crate::state::ModelState;
use crate::tensor::{unravel_index, Mask3, Matrix, Tensor3};

/// `E[h h^T]` for every row, flattened `n x R x R`.
pub(crate) fn pair_moments(mean: &Matrix, var: &Matrix) -> Vec<f64> {
    let (n, r) = (mean.nrows(), mean.ncols());
    let mut out = vec![0.0; n * r * r];
    for i in 0..n {
        let block = &mut out[i * r * r..(i + 1) * r * r];
        for s in 0..r {
            for t in 0..r {
                block[s * r + t] = mean[(i, s)] * mean[(i, t)];
            }
            block[s * r + s] += var[(i, s)];
        }
    }
    out
}

/// Index plan for contracting the likelihood from the point of view of one mode.
pub(crate) struct ViewPlan {
    pub own: usize,
    pub o1: usize,
    pub o2: usize,
    pub ranks: [usize; 3],
    /// Unordered latent pairs of mode `o2`.
    pub pairs2: Vec<(usize, usize)>,
    /// `(ordered o1 pair s*R+t, index into pairs2)` for each needed quad.
    pub quads: Vec<(usize, usize)>,
    /// For each ordered pair of free cells (row-major over the free list):
    /// quad index, own-mode index of the first cell, of the second.
    pub fpairs: Vec<(u32, u32, u32)>,
    /// Free-cell coordinates `(own, o1, o2)`.
    pub free_coords: Vec<[usize; 3]>,
}

impl ViewPlan {
    pub fn new(own: usize, ranks: [usize; 3], free: &[usize]) -> Self {
        let (o1, o2) = match own {
            0 => (1, 2),
            1 => (0, 2),
            _ => (0, 1),
        };
        let coords: Vec<[usize; 3]> = free
            .iter()
            .map(|&f| {
                let (a, b, c) = unravel_index(ranks, f);
                let full = [a, b, c];
                [full[own], full[o1], full[o2]]
            })
            .collect();
        let r2 = ranks[o2];
        let mut pair2_of = vec![usize::MAX; r2 * r2];
        let mut pairs2 = Vec::new();
        let mut quad_of: HashMap<(usize, usize), usize> = HashMap::new();
        let mut quads = Vec::new();
        let mut fpairs = Vec::with_capacity(coords.len() * coords.len());
        let r1 = ranks[o1];
        for x in &coords {
            for y in &coords {
                let (lo, hi) = if x[2] <= y[2] { (x[2], y[2]) } else { (y[2], x[2]) };
                let p_slot = lo * r2 + hi;
                if pair2_of[p_slot] == usize::MAX {
                    pair2_of[p_slot] = pairs2.len();
                    pairs2.push((lo, hi));
                }
                let key = (x[1] * r1 + y[1], pair2_of[p_slot]);
                let q = *quad_of.entry(key).or_insert_with(|| {
                    quads.push(key);
                    quads.len() - 1
                });
                fpairs.push((q as u32, x[0] as u32, y[0] as u32));
            }
        }
        Self {
            own,
            o1,
            o2,
            ranks,
            pairs2,
            quads,
            fpairs,
            free_coords: coords,
        }
    }
}

/// Per-own-index accumulators.
pub(crate) struct SliceStats {
    /// One entry per quad.
    pub w: Vec<f64>,
    /// `R_o1 x R_o2`, row-major.
    pub z: Vec<f64>,
    pub yy: f64,
    pub n_obs: usize,
}

/// Shared inputs for one view: latent moments of the two other modes.
pub(crate) struct ViewInputs<'a> {
    pub plan: &'a ViewPlan,
    pub y: &'a Tensor3,
    pub mask: &'a Mask3,
    pub mean_o1: &'a Matrix,
    pub pm_o1: Vec<f64>,
    pub mean_o2: &'a Matrix,
    /// Moments of mode `o2` restricted to `plan.pairs2`, `n_o2 x n_pairs2`.
    pub pm_o2: Vec<f64>,
}

impl<'a> ViewInputs<'a> {
    pub fn new(plan: &'a ViewPlan, state: &'a ModelState, y: &'a Tensor3, mask: &'a Mask3) -> Self {
        let l1 = &state.modes[plan.o1].latent;
        let l2 = &state.modes[plan.o2].latent;
        let pm_o1 = pair_moments(&l1.mean, &l1.var);
        let r2 = plan.ranks[plan.o2];
        let full2 = pair_moments(&l2.mean, &l2.var);
        let n2 = l2.mean.nrows();
        let np = plan.pairs2.len();
        let mut pm_o2 = vec![0.0; n2 * np];
        for c in 0..n2 {
            for (p, &(s, t)) in plan.pairs2.iter().enumerate() {
                pm_o2[c * np + p] = full2[c * r2 * r2 + s * r2 + t];
            }
        }
        Self {
            plan,
            y,
            mask,
            mean_o1: &l1.mean,
            pm_o1,
            mean_o2: &l2.mean,
            pm_o2,
        }
    }

    /// Accumulates the statistics for own index `a`.
    pub fn slice(&self, a: usize) -> SliceStats {
        let plan = self.plan;
        let dims = self.y.dims();
        let strides = [1, dims[0], dims[0] * dims[1]];
        let (so, s1, s2) = (strides[plan.own], strides[plan.o1], strides[plan.o2]);
        let (n1, n2) = (dims[plan.o1], dims[plan.o2]);
        let (r1, r2) = (plan.ranks[plan.o1], plan.ranks[plan.o2]);
        let np = plan.pairs2.len();
        let yv = self.y.as_slice();
        let mv = self.mask.as_slice();

        let mut t = vec![0.0; n1 * np];
        let mut yt = vec![0.0; n1 * r2];
        let mut yy = 0.0;
        let mut n_obs = 0;
        for b in 0..n1 {
            let trow = &mut t[b * np..(b + 1) * np];
            let ytrow = &mut yt[b * r2..(b + 1) * r2];
            for c in 0..n2 {
                let flat = a * so + b * s1 + c * s2;
                if !mv[flat] {
                    continue;
                }
                let yval = yv[flat];
                yy += yval * yval;
                n_obs += 1;
                let mrow = &self.pm_o2[c * np..(c + 1) * np];
                for (acc, &m) in trow.iter_mut().zip(mrow) {
                    *acc += m;
                }
                for (u, acc) in ytrow.iter_mut().enumerate() {
                    *acc += yval * self.mean_o2[(c, u)];
                }
            }
        }

        let mut w = vec![0.0; plan.quads.len()];
        let mut z = vec![0.0; r1 * r2];
        for b in 0..n1 {
            let trow = &t[b * np..(b + 1) * np];
            let mrow = &self.pm_o1[b * r1 * r1..(b + 1) * r1 * r1];
            for (acc, &(t1, p2)) in w.iter_mut().zip(&plan.quads) {
                *acc += mrow[t1] * trow[p2];
            }
            let ytrow = &yt[b * r2..(b + 1) * r2];
            for s in 0..r1 {
                let hb = self.mean_o1[(b, s)];
                if hb == 0.0 {
                    continue;
                }
                for (u, &v) in ytrow.iter().enumerate() {
                    z[s * r2 + u] += hb * v;
                }
            }
        }
        SliceStats { w, z, yy, n_obs }
    }
}

/// Sufficient statistics of the expected log-likelihood with respect to the
/// free core cells.
pub(crate) struct CoreStats {
    /// `G[f, f'] = sum delta E[phi_f phi_f']`, row-major over free cells.
    pub gram: Vec<f64>,
    /// `b[f] = sum delta y E[phi_f]`.
    pub rhs: Vec<f64>,
    pub yy: f64,
    pub n_obs: usize,
}

pub(crate) fn core_stats(state: &ModelState, y: &Tensor3, mask: &Mask3, parallel: bool) -> CoreStats {
    let ranks = state.ranks();
    let plan = ViewPlan::new(0, ranks, &state.core.free);
    let inputs = ViewInputs::new(&plan, state, y, mask);
    let own = &state.modes[0].latent;
    let pm_own = pair_moments(&own.mean, &own.var);
    let r0 = ranks[0];
    let nf = plan.free_coords.len();
    let r2 = ranks[plan.o2];

    let parts = map_indexed(own.mean.nrows(), parallel, |a| {
        let s = inputs.slice(a);
        let m = &pm_own[a * r0 * r0..(a + 1) * r0 * r0];
        let mut gram = vec![0.0; nf * nf];
        for (g, &(q, x, x2)) in gram.iter_mut().zip(&plan.fpairs) {
            *g = m[x as usize * r0 + x2 as usize] * s.w[q as usize];
        }
        let rhs: Vec<f64> = plan
            .free_coords
            .iter()
            .map(|c| own.mean[(a, c[0])] * s.z[c[1] * r2 + c[2]])
            .collect();
        (gram, rhs, s.yy, s.n_obs)
    });

    let mut out = CoreStats {
        gram: vec![0.0; nf * nf],
        rhs: vec![0.0; nf],
        yy: 0.0,
        n_obs: 0,
    };
    for (g, r, yy, n) in parts {
        out.gram.iter_mut().zip(&g).for_each(|(o, v)| *o += v);
        out.rhs.iter_mut().zip(&r).for_each(|(o, v)| *o += v);
        out.yy += yy;
        out.n_obs += n;
    }
    out
}
