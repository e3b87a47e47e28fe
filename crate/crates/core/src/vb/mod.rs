//! Variational training: coordinate updates, the bound and the sweep loop.

mod elbo;
pub(crate) mod stats;
mod updates;

use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use elbo::{compute_elbo, elbo_terms, ElboTerms};
pub use updates::{update_a, update_core, update_h, update_lambda_a, update_lambda_core};

use crate::error::{Error, Result};
use crate::state::ModelState;
use crate::tensor::{Mask3, Tensor3};

/// One family of q-factors; families are updated as units.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    LambdaA,
    A,
    H,
    LambdaCore,
    Core,
}

impl Family {
    pub const ALL: [Family; 5] = [
        Family::LambdaA,
        Family::A,
        Family::H,
        Family::LambdaCore,
        Family::Core,
    ];

    /// Default sweep order: the core first, then latents, then projections.
    pub const DEFAULT_ORDER: [Family; 5] = [
        Family::LambdaCore,
        Family::Core,
        Family::H,
        Family::LambdaA,
        Family::A,
    ];

    pub fn parse(s: &str) -> Option<Family> {
        Family::ALL.into_iter().find(|f| f.name() == s)
    }

    pub fn name(self) -> &'static str {
        match self {
            Family::LambdaA => "lambda_a",
            Family::A => "a",
            Family::H => "h",
            Family::LambdaCore => "lambda_core",
            Family::Core => "core",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub n_sweeps: usize,
    pub update_order: Vec<Family>,
    /// Compute the bound every this many sweeps; 0 never.
    pub elbo_every: usize,
    /// Stop when the relative change of the bound drops below this; 0 disables.
    pub convergence_tol: f64,
    /// Use the rayon pool for independent coordinates (needs the `parallel` feature).
    pub parallel: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            n_sweeps: 100,
            update_order: Family::DEFAULT_ORDER.to_vec(),
            elbo_every: 1,
            convergence_tol: 0.0,
            parallel: true,
        }
    }
}

impl TrainConfig {
    pub fn with_sweeps(n_sweeps: usize) -> Self {
        Self {
            n_sweeps,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = Vec::new();
        for f in &self.update_order {
            if seen.contains(f) {
                return Err(Error::Config(format!(
                    "update_order lists {} twice",
                    f.name()
                )));
            }
            seen.push(*f);
        }
        if seen.len() != Family::ALL.len() {
            let missing: Vec<_> = Family::ALL
                .iter()
                .filter(|f| !seen.contains(f))
                .map(|f| f.name())
                .collect();
            return Err(Error::Config(format!(
                "update_order is missing {}",
                missing.join(", ")
            )));
        }
        if !(self.convergence_tol >= 0.0) {
            return Err(Error::Config("convergence_tol must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRecord {
    /// 1-based count of sweeps completed in this call.
    pub sweep: usize,
    pub elbo: Option<f64>,
    /// RMSE of the posterior-mean reconstruction over observed cells.
    pub train_rmse: f64,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainTrace {
    pub records: Vec<SweepRecord>,
}

impl TrainTrace {
    /// Equality ignoring wall-clock timings.
    pub fn same_values(&self, other: &TrainTrace) -> bool {
        self.records.len() == other.records.len()
            && self.records.iter().zip(&other.records).all(|(a, b)| {
                a.sweep == b.sweep
                    && a.elbo.map(f64::to_bits) == b.elbo.map(f64::to_bits)
                    && a.train_rmse.to_bits() == b.train_rmse.to_bits()
            })
    }

    pub fn elbos(&self) -> Vec<f64> {
        self.records.iter().filter_map(|r| r.elbo).collect()
    }
}

pub(crate) fn check_inputs(state: &ModelState, y: &Tensor3, mask: &Mask3) -> Result<()> {
    mask.check_pairs(y)?;
    if y.dims() != state.n_examples() {
        return Err(Error::Shape(format!(
            "responses are {:?} but the model has {:?} examples per mode",
            y.dims(),
            state.n_examples()
        )));
    }
    Ok(())
}

/// Applies one family to every mode it covers.
pub fn apply_family(
    state: &mut ModelState,
    family: Family,
    y: &Tensor3,
    mask: &Mask3,
    parallel: bool,
) -> Result<()> {
    match family {
        Family::LambdaA => (0..3).for_each(|m| update_lambda_a(state, m)),
        Family::A => {
            for m in 0..3 {
                update_a(state, m, parallel)?;
            }
        }
        Family::H => (0..3).for_each(|m| update_h(state, y, mask, m, parallel)),
        Family::LambdaCore => update_lambda_core(state),
        Family::Core => update_core(state, y, mask, parallel),
    }
    Ok(())
}

/// RMSE of `E[C] x E[H1] x E[H2] x E[H3]` against `y` on observed cells.
pub fn train_rmse(state: &ModelState, y: &Tensor3, mask: &Mask3) -> f64 {
    let pred = crate::predict::predict_warm(state);
    let mut ss = 0.0;
    let mut n = 0usize;
    for ((p, t), &obs) in pred.as_slice().iter().zip(y.as_slice()).zip(mask.as_slice()) {
        if obs {
            ss += (p - t) * (p - t);
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        (ss / n as f64).sqrt()
    }
}

/// Runs `cfg.n_sweeps` sweeps of coordinate updates in `cfg.update_order`.
pub fn train(state: &mut ModelState, y: &Tensor3, mask: &Mask3, cfg: &TrainConfig) -> Result<TrainTrace> {
    cfg.validate()?;
    check_inputs(state, y, mask)?;
    let mut trace = TrainTrace::default();
    let mut last_elbo: Option<f64> = None;
    for sweep in 1..=cfg.n_sweeps {
        let start = Instant::now();
        for &family in &cfg.update_order {
            apply_family(state, family, y, mask, cfg.parallel)?;
            if let Some(bad) = state.find_non_finite() {
                return Err(Error::NonFinite { sweep, family: bad });
            }
        }
        let elbo = (cfg.elbo_every > 0 && sweep % cfg.elbo_every == 0)
            .then(|| elbo_terms(state, y, mask, cfg.parallel).total());
        trace.records.push(SweepRecord {
            sweep,
            elbo,
            train_rmse: train_rmse(state, y, mask),
            wall_ms: start.elapsed().as_millis() as u64,
        });
        if let (Some(now), Some(prev)) = (elbo, last_elbo) {
            if cfg.convergence_tol > 0.0 && ((now - prev) / now.abs()).abs() < cfg.convergence_tol {
                break;
            }
        }
        if elbo.is_some() {
            last_elbo = elbo;
        }
    }
    Ok(trace)
}
