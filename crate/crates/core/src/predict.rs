//! Point predictions from a trained state.
//!
//! Warm-start predictions compose the posterior-mean latent matrices through
//! the posterior-mean core. Cold-start predictions replace the latent matrix
//! of each new mode by its features projected through `E[A]`.

use crate::error::{Error, Result};
use crate::state::{design_matrix, ModelState};
use crate::tensor::{append_ones_column, tucker_compose, FeatureMatrix, Matrix, Tensor3};

/// How one mode is supplied in a query.
#[derive(Debug, Clone)]
pub enum ModeQuery {
    /// Use the training examples (their fitted latent rows).
    Known,
    /// Held-out examples described by their features.
    New(FeatureMatrix),
}

#[derive(Debug, Clone)]
pub struct ColdQuery {
    pub modes: [ModeQuery; 3],
}

impl ColdQuery {
    pub fn all_known() -> Self {
        Self {
            modes: [ModeQuery::Known, ModeQuery::Known, ModeQuery::Known],
        }
    }

    /// Code such as `"m1"`, `"m1&3"`, `"m1,2&3"` or `"warm"`.
    pub fn label(&self) -> String {
        let new: Vec<String> = (0..3)
            .filter(|&m| matches!(self.modes[m], ModeQuery::New(_)))
            .map(|m| (m + 1).to_string())
            .collect();
        match new.len() {
            0 => "warm".into(),
            1 => format!("m{}", new[0]),
            2 => format!("m{}&{}", new[0], new[1]),
            _ => "m1,2&3".into(),
        }
    }
}

pub fn predict_warm(state: &ModelState) -> Tensor3 {
    let h = &state.modes;
    tucker_compose(
        &state.core.mean,
        [&h[0].latent.mean, &h[1].latent.mean, &h[2].latent.mean],
    )
    .expect("state shapes are consistent")
}

/// Latent rows for new examples of `mode`: `[1 | x E[A]]`, with the training
/// standardization and bias column applied to `x` first.
pub fn project_new(state: &ModelState, mode: usize, x_new: &FeatureMatrix) -> Result<Matrix> {
    if mode > 2 {
        return Err(Error::Shape(format!("unknown mode {}", mode + 1)));
    }
    let ms = &state.modes[mode];
    let trained = &ms.features.col_ids;
    if x_new.ncols() != trained.len() {
        return Err(Error::Shape(format!(
            "mode {} was trained on {} features, query has {}",
            mode + 1,
            trained.len(),
            x_new.ncols()
        )));
    }
    let design = design_matrix(&ms.scaler, &x_new.values, state.hyper.modes[mode].bias_column);
    let projected = design * ms.proj_mean();
    Ok(if ms.offset == 1 {
        append_ones_column(&projected)
    } else {
        projected
    })
}

/// Composes the core with known latent rows or projected new ones per mode.
pub fn predict_cold(state: &ModelState, query: &ColdQuery) -> Result<Tensor3> {
    let mut owned: Vec<Option<Matrix>> = Vec::with_capacity(3);
    for (m, q) in query.modes.iter().enumerate() {
        owned.push(match q {
            ModeQuery::Known => None,
            ModeQuery::New(x) => Some(project_new(state, m, x)?),
        });
    }
    let pick = |m: usize| owned[m].as_ref().unwrap_or(&state.modes[m].latent.mean);
    tucker_compose(&state.core.mean, [pick(0), pick(1), pick(2)])
}
