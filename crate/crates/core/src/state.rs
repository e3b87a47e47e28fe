//! Variational state: the parameters of every q-distribution plus the fixed
//! hyperparameters they were trained under.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{flat_index, FeatureMatrix, Matrix, Tensor3};

/// Smallest variance (and Gamma scale) the updates will store.
pub const VARIANCE_FLOOR: f64 = 1e-300;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decomposition {
    Tucker,
    Cp,
}

/// Per-mode settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeHyper {
    /// Variance of each latent entry around its projection `x_i a_r`.
    pub sigma2: f64,
    /// Gamma shape of the projection precisions.
    pub alpha: f64,
    /// Gamma scale of the projection precisions.
    pub beta: f64,
    /// Number of learned latent columns (the ones column is extra).
    pub latent_dim: usize,
    /// Prepend a constant column to the latent matrix.
    pub ones_column: bool,
    /// Append a constant bias feature to the design matrix.
    pub bias_column: bool,
}

impl ModeHyper {
    pub fn new(latent_dim: usize, alpha: f64, beta: f64) -> Self {
        Self {
            sigma2: 1.0,
            alpha,
            beta,
            latent_dim,
            ones_column: true,
            bias_column: false,
        }
    }

    /// Width of the latent matrix including the ones column.
    pub fn rank(&self) -> usize {
        self.latent_dim + usize::from(self.ones_column)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    /// Response noise variance.
    pub sigma2_y: f64,
    pub modes: [ModeHyper; 3],
    pub core_alpha: f64,
    pub core_beta: f64,
    /// When false the core precisions are pinned at 1 and never learned.
    pub core_prior: bool,
    pub decomposition: Decomposition,
    /// Share one precision per feature row across all latent columns.
    pub row_shared_precision: bool,
    /// Centre and scale features with training statistics.
    pub standardize_features: bool,
    pub seed: u64,
}

impl Hyperparams {
    /// Tucker model with a ones column on every mode and the same Gamma prior
    /// on projections and core.
    pub fn tucker(latent_dims: [usize; 3], alpha: f64, beta: f64) -> Self {
        Self {
            sigma2_y: 1.0,
            modes: latent_dims.map(|l| ModeHyper::new(l, alpha, beta)),
            core_alpha: alpha,
            core_beta: beta,
            core_prior: true,
            decomposition: Decomposition::Tucker,
            row_shared_precision: false,
            standardize_features: true,
            seed: 0,
        }
    }

    /// CP model of the given rank: no ones columns and no learned core prior.
    pub fn cp(rank: usize, alpha: f64, beta: f64) -> Self {
        let mut mode = ModeHyper::new(rank, alpha, beta);
        mode.ones_column = false;
        Self {
            sigma2_y: 1.0,
            modes: [mode.clone(), mode.clone(), mode],
            core_alpha: 1.0,
            core_beta: 1.0,
            core_prior: false,
            decomposition: Decomposition::Cp,
            row_shared_precision: false,
            standardize_features: true,
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn ranks(&self) -> [usize; 3] {
        [self.modes[0].rank(), self.modes[1].rank(), self.modes[2].rank()]
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be positive and finite, got {v}")))
            }
        };
        positive("sigma2_y", self.sigma2_y)?;
        positive("core_alpha", self.core_alpha)?;
        positive("core_beta", self.core_beta)?;
        for (m, h) in self.modes.iter().enumerate() {
            positive(&format!("mode {} sigma2", m + 1), h.sigma2)?;
            positive(&format!("mode {} alpha", m + 1), h.alpha)?;
            positive(&format!("mode {} beta", m + 1), h.beta)?;
            if h.rank() == 0 {
                return Err(Error::Config(format!("mode {} has an empty latent space", m + 1)));
            }
        }
        if self.decomposition == Decomposition::Cp {
            let r = self.ranks();
            if r[0] != r[1] || r[1] != r[2] {
                return Err(Error::Config(format!(
                    "CP needs equal latent ranks, got {}x{}x{}",
                    r[0], r[1], r[2]
                )));
            }
        }
        Ok(())
    }
}

/// Gamma factors in shape/scale form, stored row-major over `rows x cols`.
#[derive(Debug, Clone, PartialEq)]
pub struct GammaQ {
    pub rows: usize,
    pub cols: usize,
    pub shape: Vec<f64>,
    pub scale: Vec<f64>,
}

impl GammaQ {
    pub fn at_prior(rows: usize, cols: usize, alpha: f64, beta: f64) -> Self {
        Self {
            rows,
            cols,
            shape: vec![alpha; rows * cols],
            scale: vec![beta; rows * cols],
        }
    }

    #[inline]
    pub fn idx(&self, row: usize, col: usize) -> usize {
        row * self.cols + col
    }

    #[inline]
    pub fn mean(&self, idx: usize) -> f64 {
        self.shape[idx] * self.scale[idx]
    }

    /// `E[ln lambda] = digamma(shape) + ln(scale)`.
    pub fn mean_log(&self, idx: usize) -> f64 {
        statrs::function::gamma::digamma(self.shape[idx]) + self.scale[idx].ln()
    }
}

/// Full-covariance Gaussian over one column of a projection matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianColumnQ {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

/// Independent Gaussians, one per matrix entry.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianEntryQ {
    pub mean: Matrix,
    pub var: Matrix,
}

impl GaussianEntryQ {
    pub fn second_moment(&self) -> Matrix {
        self.mean.zip_map(&self.var, |m, v| m * m + v)
    }
}

/// Per-column centring and scaling learnt from training features.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
}

impl Standardizer {
    pub fn identity(cols: usize) -> Self {
        Self {
            mean: vec![0.0; cols],
            sd: vec![1.0; cols],
        }
    }

    /// Sample mean and sd per column; near-constant columns keep sd 1.
    pub fn fit(x: &Matrix) -> Self {
        let n = x.nrows();
        let mut mean = Vec::with_capacity(x.ncols());
        let mut sd = Vec::with_capacity(x.ncols());
        for col in x.column_iter() {
            let mu = col.sum() / n.max(1) as f64;
            let ss: f64 = col.iter().map(|v| (v - mu) * (v - mu)).sum();
            let s = if n > 1 { (ss / (n - 1) as f64).sqrt() } else { 0.0 };
            mean.push(mu);
            sd.push(if s > 1e-12 { s } else { 1.0 });
        }
        Self { mean, sd }
    }

    pub fn apply(&self, x: &Matrix) -> Matrix {
        Matrix::from_fn(x.nrows(), x.ncols(), |i, p| (x[(i, p)] - self.mean[p]) / self.sd[p])
    }
}

/// Builds the matrix the model sees: standardized features plus an optional
/// trailing bias column.
pub fn design_matrix(scaler: &Standardizer, x: &Matrix, bias: bool) -> Matrix {
    let z = scaler.apply(x);
    if !bias {
        return z;
    }
    let mut out = Matrix::from_element(z.nrows(), z.ncols() + 1, 1.0);
    out.view_mut((0, 0), (z.nrows(), z.ncols())).copy_from(&z);
    out
}

/// Everything belonging to one mode.
#[derive(Debug, Clone, PartialEq)]
pub struct ModeState {
    /// Training features as supplied.
    pub features: FeatureMatrix,
    pub scaler: Standardizer,
    /// Standardized features with optional bias column.
    pub design: Matrix,
    /// `design^T design`, cached.
    pub gram: Matrix,
    /// Projection precisions: `P x L`, or `P x 1` when shared across rows.
    pub lambda: GammaQ,
    /// One q-factor per learned latent column.
    pub proj: Vec<GaussianColumnQ>,
    /// Latent matrix, `n x R` with the ones column (if any) at index 0.
    pub latent: GaussianEntryQ,
    /// 1 when column 0 of `latent` is the pinned ones column, else 0.
    pub offset: usize,
}

impl ModeState {
    pub fn n_examples(&self) -> usize {
        self.design.nrows()
    }

    pub fn n_design(&self) -> usize {
        self.design.ncols()
    }

    pub fn rank(&self) -> usize {
        self.latent.mean.ncols()
    }

    /// `E[A]` as a `P x L` matrix (design features by learned columns).
    pub fn proj_mean(&self) -> Matrix {
        let p = self.n_design();
        Matrix::from_fn(p, self.proj.len(), |row, l| self.proj[l].mean[row])
    }

    /// `Var(a_pl)`, the diagonal of each column covariance.
    pub fn proj_var(&self) -> Matrix {
        let p = self.n_design();
        Matrix::from_fn(p, self.proj.len(), |row, l| self.proj[l].cov[(row, row)])
    }

    /// Index into `lambda` for projection entry `(row, l)`.
    #[inline]
    pub fn lambda_idx(&self, row: usize, l: usize) -> usize {
        if self.lambda.cols == 1 {
            row
        } else {
            self.lambda.idx(row, l)
        }
    }
}

/// Gaussian factors over the core plus its precision factors.
#[derive(Debug, Clone, PartialEq)]
pub struct CoreState {
    pub mean: Tensor3,
    pub var: Tensor3,
    pub lambda: GammaQ,
    /// Flat indices of the cells that are random variables; every other cell
    /// is pinned at mean 0, variance 0.
    pub free: Vec<usize>,
}

impl CoreState {
    /// `(E[lambda], E[ln lambda])` for core cell `f`, honouring a pinned prior.
    pub fn precision_moments(&self, learned: bool, f: usize) -> (f64, f64) {
        if learned {
            (self.lambda.mean(f), self.lambda.mean_log(f))
        } else {
            (1.0, 0.0)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub hyper: Hyperparams,
    pub modes: [ModeState; 3],
    pub core: CoreState,
}

/// Expectations the updates consume.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub proj_mean: [Matrix; 3],
    /// `E[a^2]` entrywise, the diagonal of `E[a a^T]` per column.
    pub proj_second: [Matrix; 3],
    pub latent_mean: [Matrix; 3],
    pub latent_second: [Matrix; 3],
    pub core_mean: Tensor3,
    pub core_second: Tensor3,
    /// `E[lambda]` for the projections, same layout as each [`GammaQ`].
    pub lambda_mean: [Vec<f64>; 3],
    pub core_lambda_mean: Vec<f64>,
}

/// `E[x^2]` from a mean and a variance.
#[inline]
pub fn second_moment(mean: f64, var: f64) -> f64 {
    mean * mean + var
}

/// Cells of a core that carry free parameters.
pub fn free_cells(decomposition: Decomposition, ranks: [usize; 3]) -> Vec<usize> {
    match decomposition {
        Decomposition::Tucker => (0..ranks.iter().product()).collect(),
        Decomposition::Cp => (0..ranks[0]).map(|r| flat_index(ranks, r, r, r)).collect(),
    }
}

impl ModelState {
    /// Random initialization, deterministic in `hyper.seed`.
    ///
    /// Precisions start at their prior, projection means are drawn from
    /// `N(0, 0.01)` with covariance `0.01 I`, latent means are the projected
    /// features plus `N(0, sigma2_mode)` jitter, and free core means are drawn
    /// from `N(0, 1 / (R1 R2 R3))` with unit variance.
    pub fn init_random(hyper: Hyperparams, features: [FeatureMatrix; 3]) -> Result<Self> {
        hyper.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
        let std_normal = Normal::new(0.0, 1.0).expect("unit normal");

        let mut modes = Vec::with_capacity(3);
        for (m, x) in features.into_iter().enumerate() {
            let mh = &hyper.modes[m];
            if x.nrows() == 0 {
                return Err(Error::Shape(format!("mode {} has no examples", m + 1)));
            }
            let scaler = if hyper.standardize_features {
                Standardizer::fit(&x.values)
            } else {
                Standardizer::identity(x.ncols())
            };
            let design = design_matrix(&scaler, &x.values, mh.bias_column);
            let gram = design.transpose() * &design;
            let (n, p) = (design.nrows(), design.ncols());
            let lambda_cols = if hyper.row_shared_precision { 1 } else { mh.latent_dim };
            let lambda = GammaQ::at_prior(p, lambda_cols, mh.alpha, mh.beta);

            let proj: Vec<GaussianColumnQ> = (0..mh.latent_dim)
                .map(|_| GaussianColumnQ {
                    mean: DVector::from_fn(p, |_, _| 0.1 * std_normal.sample(&mut rng)),
                    cov: DMatrix::identity(p, p) * 0.01,
                })
                .collect();

            let offset = usize::from(mh.ones_column);
            let rank = mh.rank();
            let mut mean = Matrix::zeros(n, rank);
            let mut var = Matrix::zeros(n, rank);
            let jitter = mh.sigma2.sqrt();
            for l in 0..mh.latent_dim {
                let projected = &design * &proj[l].mean;
                for i in 0..n {
                    mean[(i, l + offset)] = projected[i] + jitter * std_normal.sample(&mut rng);
                    var[(i, l + offset)] = mh.sigma2;
                }
            }
            if offset == 1 {
                mean.column_mut(0).fill(1.0);
            }
            modes.push(ModeState {
                features: x,
                scaler,
                design,
                gram,
                lambda,
                proj,
                latent: GaussianEntryQ { mean, var },
                offset,
            });
        }
        let modes: [ModeState; 3] = modes.try_into().expect("three modes");

        let ranks = hyper.ranks();
        let cells: usize = ranks.iter().product();
        let free = free_cells(hyper.decomposition, ranks);
        let sd = (1.0 / cells as f64).sqrt();
        let mut core_mean = Tensor3::zeros(ranks);
        let mut core_var = Tensor3::zeros(ranks);
        for &f in &free {
            core_mean.as_mut_slice()[f] = sd * std_normal.sample(&mut rng);
            core_var.as_mut_slice()[f] = 1.0;
        }
        let core_lambda = if hyper.core_prior {
            GammaQ::at_prior(cells, 1, hyper.core_alpha, hyper.core_beta)
        } else {
            GammaQ::at_prior(cells, 1, 1.0, 1.0)
        };

        Ok(Self {
            hyper,
            modes,
            core: CoreState {
                mean: core_mean,
                var: core_var,
                lambda: core_lambda,
                free,
            },
        })
    }

    /// `[I, J, K]`.
    pub fn n_examples(&self) -> [usize; 3] {
        [0, 1, 2].map(|m| self.modes[m].n_examples())
    }

    pub fn ranks(&self) -> [usize; 3] {
        [0, 1, 2].map(|m| self.modes[m].rank())
    }

    pub fn moments(&self) -> Moments {
        let lambda_mean = [0, 1, 2].map(|m| {
            let g = &self.modes[m].lambda;
            (0..g.shape.len()).map(|i| g.mean(i)).collect::<Vec<_>>()
        });
        let learned = self.hyper.core_prior;
        let core_lambda_mean = (0..self.core.lambda.shape.len())
            .map(|f| self.core.precision_moments(learned, f).0)
            .collect();
        let core_second = Tensor3::from_vec(
            self.core.mean.dims(),
            self.core
                .mean
                .as_slice()
                .iter()
                .zip(self.core.var.as_slice())
                .map(|(&m, &v)| second_moment(m, v))
                .collect(),
        )
        .expect("core dims");
        Moments {
            proj_mean: [0, 1, 2].map(|m| self.modes[m].proj_mean()),
            proj_second: [0, 1, 2].map(|m| {
                let mean = self.modes[m].proj_mean();
                let var = self.modes[m].proj_var();
                mean.zip_map(&var, second_moment)
            }),
            latent_mean: [0, 1, 2].map(|m| self.modes[m].latent.mean.clone()),
            latent_second: [0, 1, 2].map(|m| self.modes[m].latent.second_moment()),
            core_mean: self.core.mean.clone(),
            core_second,
            lambda_mean,
            core_lambda_mean,
        }
    }

    /// Every stored parameter is finite; returns the offending family otherwise.
    pub fn find_non_finite(&self) -> Option<String> {
        for (m, mode) in self.modes.iter().enumerate() {
            let g = &mode.lambda;
            if g.shape.iter().chain(&g.scale).any(|v| !v.is_finite()) {
                return Some(format!("lambda_A (mode {})", m + 1));
            }
            if mode
                .proj
                .iter()
                .any(|c| c.mean.iter().chain(c.cov.iter()).any(|v| !v.is_finite()))
            {
                return Some(format!("A (mode {})", m + 1));
            }
            if mode
                .latent
                .mean
                .iter()
                .chain(mode.latent.var.iter())
                .any(|v| !v.is_finite())
            {
                return Some(format!("H (mode {})", m + 1));
            }
        }
        let g = &self.core.lambda;
        if g.shape.iter().chain(&g.scale).any(|v| !v.is_finite()) {
            return Some("lambda_core".into());
        }
        if self
            .core
            .mean
            .as_slice()
            .iter()
            .chain(self.core.var.as_slice())
            .any(|v| !v.is_finite())
        {
            return Some("core".into());
        }
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::tiny_features;

    #[test]
    fn init_is_deterministic() {
        let hyper = Hyperparams::tucker([2, 2, 2], 1.0, 1.0).with_seed(7);
        let a = ModelState::init_random(hyper.clone(), tiny_features(1, [3, 4, 5], [4, 3, 2])).unwrap();
        let b = ModelState::init_random(hyper, tiny_features(1, [3, 4, 5], [4, 3, 2])).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn lambda_starts_at_prior_mean() {
        let hyper = Hyperparams::tucker([2, 2, 2], 2.0, 5.0);
        let s = ModelState::init_random(hyper, tiny_features(2, [3, 3, 3], [4, 4, 4])).unwrap();
        let mom = s.moments();
        assert!(mom.lambda_mean[0].iter().all(|&v| v == 10.0));
        assert!(mom.core_lambda_mean.iter().all(|&v| v == 10.0));
    }

    #[test]
    fn ones_column_is_pinned_at_init() {
        let hyper = Hyperparams::tucker([2, 2, 2], 1.0, 1.0);
        let s = ModelState::init_random(hyper, tiny_features(3, [3, 3, 3], [4, 4, 4])).unwrap();
        for mode in &s.modes {
            assert!(mode.latent.mean.column(0).iter().all(|&v| v == 1.0));
            assert!(mode.latent.var.column(0).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn moment_arithmetic() {
        assert_eq!(second_moment(2.0, 3.0), 7.0);
        let g = GammaQ::at_prior(1, 1, 2.0, 5.0);
        assert_eq!(g.mean(0), 10.0);
    }

    #[test]
    fn sampled_second_moment_matches() {
        let (mean, var) = (0.7, 1.3);
        let normal = Normal::new(mean, f64::sqrt(var)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 1_000_000;
        let (mut s, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            let x: f64 = normal.sample(&mut rng);
            s += x * x;
            s2 += x * x * x * x;
        }
        let m = s / n as f64;
        let se = ((s2 / n as f64 - m * m) / n as f64).sqrt();
        assert!((m - second_moment(mean, var)).abs() < 3.0 * se);
    }

    #[test]
    fn validation_rejects_bad_hyper() {
        let mut h = Hyperparams::tucker([2, 2, 2], 1.0, 1.0);
        h.modes[1].beta = 0.0;
        assert!(h.validate().is_err());
        let mut cp = Hyperparams::cp(3, 1.0, 1.0);
        cp.modes[2].latent_dim = 2;
        assert!(cp.validate().is_err());
        let feats = tiny_features(1, [3, 3, 3], [2, 2, 2]);
        assert!(ModelState::init_random(h, feats).is_err());
    }

    #[test]
    fn cp_pins_off_diagonal_cells() {
        let hyper = Hyperparams::cp(3, 1.0, 1.0);
        let s = ModelState::init_random(hyper, tiny_features(4, [3, 3, 3], [2, 2, 2])).unwrap();
        assert_eq!(s.core.free, vec![0, 13, 26]);
        for f in 0..27 {
            if !s.core.free.contains(&f) {
                assert_eq!(s.core.mean.as_slice()[f], 0.0);
                assert_eq!(s.core.var.as_slice()[f], 0.0);
            }
        }
    }
}
