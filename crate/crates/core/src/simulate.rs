//! Synthetic three-mode datasets drawn from the model's own generative
//! structure, and random train/test splits.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{
    append_ones_column, flat_index, tucker_compose, unravel_index, FeatureMatrix, Mask3, Matrix,
    Tensor3,
};

/// Which core cells may be non-zero. Latent index 0 is the ones column.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CoreKind {
    /// Cells with at least two zero indices: single-mode effects only.
    Edges1D,
    /// Cells with at least one zero index: up to two-mode interactions.
    Faces2D,
    /// Any cell, each kept with probability `1 - sparsity`.
    Full3D,
}

impl CoreKind {
    pub fn name(self) -> &'static str {
        match self {
            CoreKind::Edges1D => "edges1d",
            CoreKind::Faces2D => "faces2d",
            CoreKind::Full3D => "full3d",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "edges1d" => Some(CoreKind::Edges1D),
            "faces2d" => Some(CoreKind::Faces2D),
            "full3d" => Some(CoreKind::Full3D),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub n_examples: [usize; 3],
    pub n_features: [usize; 3],
    pub n_causal: [usize; 3],
    pub latent_dim: [usize; 3],
    pub core_kind: CoreKind,
    /// Fraction of zero cells for [`CoreKind::Full3D`].
    pub sparsity: f64,
    /// Zero exactly `round(sparsity * cells)` cells instead of i.i.d. draws.
    pub exact_sparsity: bool,
    /// Noise sd as a fraction of the clean response sd.
    pub noise_ratio: f64,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n_examples: [30; 3],
            n_features: [100; 3],
            n_causal: [10; 3],
            latent_dim: [4; 3],
            core_kind: CoreKind::Faces2D,
            sparsity: 0.5,
            exact_sparsity: false,
            noise_ratio: 0.1,
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn with_kind(core_kind: CoreKind, seed: u64) -> Self {
        Self {
            core_kind,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for m in 0..3 {
            if self.n_causal[m] > self.n_features[m] {
                return Err(Error::Config(format!(
                    "mode {}: n_causal {} exceeds n_features {}",
                    m + 1,
                    self.n_causal[m],
                    self.n_features[m]
                )));
            }
            if self.latent_dim[m] == 0 || self.n_examples[m] == 0 {
                return Err(Error::Config(format!(
                    "mode {}: latent_dim and n_examples must be >= 1",
                    m + 1
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.sparsity) {
            return Err(Error::Config(format!("sparsity {} not in [0, 1]", self.sparsity)));
        }
        if !(self.noise_ratio >= 0.0 && self.noise_ratio.is_finite()) {
            return Err(Error::Config(format!("noise_ratio {} must be >= 0", self.noise_ratio)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimDataset {
    pub config: SimConfig,
    pub features: [FeatureMatrix; 3],
    /// `P x L`; only causal rows are non-zero.
    pub true_proj: [Matrix; 3],
    /// `n x (L + 1)` with the ones column first.
    pub true_latent: [Matrix; 3],
    pub true_core: Tensor3,
    pub clean: Tensor3,
    pub noisy: Tensor3,
    /// Sorted causal feature indices per mode.
    pub causal: [Vec<usize>; 3],
}

fn sample_sd(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// Draws a dataset: standard-normal features, standard-normal causal rows of
/// the projections, `H = [1 | X A]`, a patterned standard-normal core and
/// Gaussian noise scaled to the clean response sd.
pub fn generate(cfg: &SimConfig) -> Result<SimDataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");

    let mut features = Vec::with_capacity(3);
    let mut projs = Vec::with_capacity(3);
    let mut latents = Vec::with_capacity(3);
    let mut causal = Vec::with_capacity(3);
    for m in 0..3 {
        let (n, p, l) = (cfg.n_examples[m], cfg.n_features[m], cfg.latent_dim[m]);
        let x = Matrix::from_fn(n, p, |_, _| normal.sample(&mut rng));
        let mut idx = sample(&mut rng, p, cfg.n_causal[m]).into_vec();
        idx.sort_unstable();
        let mut a = Matrix::zeros(p, l);
        for &row in &idx {
            for c in 0..l {
                a[(row, c)] = normal.sample(&mut rng);
            }
        }
        let h = append_ones_column(&(&x * &a));
        let labels = ["c", "d", "s"][m];
        let rows = (0..n).map(|i| format!("{labels}{i}")).collect();
        let cols = (0..p).map(|q| format!("{labels}_f{q}")).collect();
        features.push(FeatureMatrix::new(x, rows, cols)?);
        projs.push(a);
        latents.push(h);
        causal.push(idx);
    }

    let ranks = [0, 1, 2].map(|m| cfg.latent_dim[m] + 1);
    let cells: usize = ranks.iter().product();
    let values: Vec<f64> = (0..cells).map(|_| normal.sample(&mut rng)).collect();
    let keep: Vec<bool> = match cfg.core_kind {
        CoreKind::Edges1D | CoreKind::Faces2D => {
            let need = if cfg.core_kind == CoreKind::Edges1D { 2 } else { 1 };
            (0..cells)
                .map(|f| {
                    let (a, b, c) = unravel_index(ranks, f);
                    [a, b, c].iter().filter(|&&v| v == 0).count() >= need
                })
                .collect()
        }
        CoreKind::Full3D if cfg.exact_sparsity => {
            let n_zero = (cfg.sparsity * cells as f64).round() as usize;
            let zeros = sample(&mut rng, cells, n_zero);
            let mut keep = vec![true; cells];
            for z in zeros {
                keep[z] = false;
            }
            keep
        }
        CoreKind::Full3D => (0..cells)
            .map(|_| rng.random::<f64>() >= cfg.sparsity)
            .collect(),
    };
    let core = Tensor3::from_vec(
        ranks,
        values
            .iter()
            .zip(&keep)
            .map(|(&v, &k)| if k { v } else { 0.0 })
            .collect(),
    )?;

    let clean = tucker_compose(&core, [&latents[0], &latents[1], &latents[2]])?;
    let noisy = if cfg.noise_ratio == 0.0 {
        clean.clone()
    } else {
        let sd = cfg.noise_ratio * sample_sd(clean.as_slice());
        let mut noisy = clean.clone();
        for v in noisy.as_mut_slice() {
            *v += sd * normal.sample(&mut rng);
        }
        noisy
    };

    Ok(SimDataset {
        config: cfg.clone(),
        features: features.try_into().expect("three modes"),
        true_proj: projs.try_into().expect("three modes"),
        true_latent: latents.try_into().expect("three modes"),
        true_core: core,
        clean,
        noisy,
        causal: causal.try_into().expect("three modes"),
    })
}

fn check_warm_frac(warm_frac: f64) -> Result<()> {
    if (0.0..=1.0).contains(&warm_frac) {
        Ok(())
    } else {
        Err(Error::Config(format!("warm_frac {warm_frac} not in [0, 1]")))
    }
}

/// Held-out examples per mode and the warm-start cells of the training block.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainTestSplit {
    pub train: [Vec<usize>; 3],
    pub test: [Vec<usize>; 3],
    /// Over the `train x train x train` block; `true` marks a cell withheld
    /// for warm-start testing.
    pub warm: Mask3,
}

impl TrainTestSplit {
    /// Uniform random holdouts per mode and `ceil(warm_frac * cells)` random
    /// warm cells inside the training block.
    pub fn random(n: [usize; 3], holdout: [usize; 3], warm_frac: f64, seed: u64) -> Result<Self> {
        check_warm_frac(warm_frac)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut test = Vec::with_capacity(3);
        for m in 0..3 {
            if holdout[m] >= n[m] {
                return Err(Error::Config(format!(
                    "mode {}: holdout {} leaves no training examples out of {}",
                    m + 1,
                    holdout[m],
                    n[m]
                )));
            }
            let mut held = sample(&mut rng, n[m], holdout[m]).into_vec();
            held.sort_unstable();
            test.push(held);
        }
        let test: [Vec<usize>; 3] = test.try_into().expect("three modes");
        Self::with_random_warm(n, test, warm_frac, &mut rng)
    }

    /// Given holdouts (for example one fold of a plan), draws the warm cells
    /// of the remaining training block.
    pub fn from_holdout(n: [usize; 3], test: [Vec<usize>; 3], warm_frac: f64, seed: u64) -> Result<Self> {
        check_warm_frac(warm_frac)?;
        for m in 0..3 {
            if let Some(&bad) = test[m].iter().find(|&&i| i >= n[m]) {
                return Err(Error::Shape(format!("mode {}: holdout index {bad} out of {}", m + 1, n[m])));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::with_random_warm(n, test, warm_frac, &mut rng)
    }

    fn with_random_warm(n: [usize; 3], test: [Vec<usize>; 3], warm_frac: f64, rng: &mut ChaCha8Rng) -> Result<Self> {
        let train: [Vec<usize>; 3] = [0, 1, 2].map(|m| (0..n[m]).filter(|i| !test[m].contains(i)).collect());
        let dims = [train[0].len(), train[1].len(), train[2].len()];
        if dims.contains(&0) {
            return Err(Error::Config("a mode has no training examples".into()));
        }
        let cells: usize = dims.iter().product();
        let n_warm = ((warm_frac * cells as f64) - 1e-9).ceil().max(0.0) as usize;
        let mut warm = Mask3::empty(dims);
        for f in sample(rng, cells, n_warm.min(cells)) {
            let (i, j, k) = unravel_index(dims, f);
            warm.set(i, j, k, true);
        }
        Ok(Self { train, test, warm })
    }

    pub fn train_dims(&self) -> [usize; 3] {
        self.warm.dims()
    }

    /// Observation mask for the training block: everything but warm cells.
    pub fn training_mask(&self) -> Mask3 {
        let dims = self.warm.dims();
        let flags = self.warm.as_slice().iter().map(|&w| !w).collect();
        Mask3::from_flags(dims, flags).expect("same dims")
    }

    /// Warm cells as training-block coordinates, in layout order.
    pub fn warm_cells(&self) -> Vec<(usize, usize, usize)> {
        let dims = self.warm.dims();
        self.warm
            .as_slice()
            .iter()
            .enumerate()
            .filter(|(_, &w)| w)
            .map(|(f, _)| unravel_index(dims, f))
            .collect()
    }

    /// Rebuilds a split from explicit index lists and warm cells.
    pub fn from_parts(
        train: [Vec<usize>; 3],
        test: [Vec<usize>; 3],
        warm_cells: &[(usize, usize, usize)],
    ) -> Result<Self> {
        let dims = [train[0].len(), train[1].len(), train[2].len()];
        let mut warm = Mask3::empty(dims);
        for &(i, j, k) in warm_cells {
            if i >= dims[0] || j >= dims[1] || k >= dims[2] {
                return Err(Error::Shape(format!(
                    "warm cell ({i}, {j}, {k}) outside training block {dims:?}"
                )));
            }
            warm.set(i, j, k, true);
        }
        Ok(Self { train, test, warm })
    }
}

impl SimDataset {
    pub fn split(&self, holdout: usize, warm_frac: f64, seed: u64) -> Result<TrainTestSplit> {
        TrainTestSplit::random(self.config.n_examples, [holdout; 3], warm_frac, seed)
    }
}

/// Checks that the flat layout agrees with `(i, j, k)` coordinates; used by
/// callers that export long-format tables.
pub fn cell_coords(dims: [usize; 3]) -> impl Iterator<Item = (usize, usize, usize)> {
    (0..dims.iter().product::<usize>()).map(move |f| {
        let c = unravel_index(dims, f);
        debug_assert_eq!(flat_index(dims, c.0, c.1, c.2), f);
        c
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_shapes() {
        let ds = generate(&SimConfig::default()).unwrap();
        for m in 0..3 {
            assert_eq!((ds.features[m].nrows(), ds.features[m].ncols()), (30, 100));
            assert_eq!(ds.causal[m].len(), 10);
        }
        assert_eq!(ds.true_core.dims(), [5, 5, 5]);
        assert_eq!(ds.noisy.dims(), [30, 30, 30]);
    }

    #[test]
    fn non_causal_rows_are_zero() {
        let ds = generate(&SimConfig::with_kind(CoreKind::Full3D, 3)).unwrap();
        for m in 0..3 {
            for p in 0..100 {
                let zero = ds.true_proj[m].row(p).iter().all(|&v| v == 0.0);
                assert_eq!(zero, !ds.causal[m].contains(&p));
            }
        }
    }

    #[test]
    fn edge_and_face_patterns() {
        let edges = generate(&SimConfig::with_kind(CoreKind::Edges1D, 5)).unwrap();
        let faces = generate(&SimConfig::with_kind(CoreKind::Faces2D, 5)).unwrap();
        for f in 0..125 {
            let (a, b, c) = unravel_index([5, 5, 5], f);
            let nonzero_idx = [a, b, c].iter().filter(|&&v| v != 0).count();
            let e = edges.true_core.as_slice()[f];
            let s = faces.true_core.as_slice()[f];
            if nonzero_idx >= 2 {
                assert_eq!(e, 0.0);
            } else {
                assert_ne!(e, 0.0);
                assert_eq!(e, s, "faces contain edges");
            }
            if nonzero_idx == 3 {
                assert_eq!(s, 0.0);
            }
        }
    }

    #[test]
    fn full3d_density() {
        let mut cfg = SimConfig::with_kind(CoreKind::Full3D, 8);
        cfg.exact_sparsity = true;
        let ds = generate(&cfg).unwrap();
        let nz = ds.true_core.as_slice().iter().filter(|&&v| v != 0.0).count();
        assert_eq!(nz, 125 - 63);
    }

    #[test]
    fn zero_noise_is_exact_and_noise_ratio_holds() {
        let mut cfg = SimConfig::with_kind(CoreKind::Faces2D, 9);
        cfg.noise_ratio = 0.0;
        let ds = generate(&cfg).unwrap();
        assert_eq!(ds.noisy, ds.clean);

        let ds = generate(&SimConfig::with_kind(CoreKind::Faces2D, 9)).unwrap();
        let noise: Vec<f64> = ds
            .noisy
            .as_slice()
            .iter()
            .zip(ds.clean.as_slice())
            .map(|(a, b)| a - b)
            .collect();
        let ratio = sample_sd(&noise) / sample_sd(ds.clean.as_slice());
        assert!((0.09..=0.11).contains(&ratio), "{ratio}");
    }

    #[test]
    fn regenerate_is_identical() {
        let cfg = SimConfig::with_kind(CoreKind::Full3D, 21);
        assert_eq!(generate(&cfg).unwrap(), generate(&cfg).unwrap());
    }

    #[test]
    fn bad_config_is_rejected() {
        let mut cfg = SimConfig::default();
        cfg.n_causal[1] = 101;
        assert!(generate(&cfg).is_err());
    }

    #[test]
    fn default_split() {
        let s = TrainTestSplit::random([30; 3], [2; 3], 0.01, 4).unwrap();
        for m in 0..3 {
            assert_eq!(s.train[m].len(), 28);
            assert_eq!(s.test[m].len(), 2);
            let mut all: Vec<usize> = s.train[m].iter().chain(&s.test[m]).copied().collect();
            all.sort_unstable();
            assert_eq!(all, (0..30).collect::<Vec<_>>());
        }
        let hidden = s.warm.count();
        assert!(hidden == 219 || hidden == 220, "{hidden}");
        assert_eq!(s.training_mask().count(), 28 * 28 * 28 - hidden);
    }

    #[test]
    fn no_warm_cells() {
        let s = TrainTestSplit::random([5; 3], [1; 3], 0.0, 4).unwrap();
        assert_eq!(s.warm.count(), 0);
        assert!(TrainTestSplit::random([5; 3], [5, 1, 1], 0.0, 4).is_err());
    }
}
