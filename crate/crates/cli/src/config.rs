//! TOML run configuration. Every key has a default matching the simulated
//! benchmark settings; unknown keys are rejected.

use std::path::{Path, PathBuf};

use batfled::eval::SIMULATION_LATENT_VARIANCE;
use batfled::{CoreKind, Decomposition, Family, Hyperparams, SimConfig, TrainConfig};
use serde::Deserialize;

use crate::CliError;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: Option<PathBuf>,
    pub threads: Option<usize>,
    pub simulate: SimulateSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub data: DataSection,
    pub predict: PredictSection,
    pub evaluate: EvaluateSection,
    pub benchmark: BenchmarkSection,
    /// Directory relative paths in the file are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: None,
            threads: None,
            simulate: SimulateSection::default(),
            model: ModelSection::default(),
            train: TrainSection::default(),
            data: DataSection::default(),
            predict: PredictSection::default(),
            evaluate: EvaluateSection::default(),
            benchmark: BenchmarkSection::default(),
            base_dir: PathBuf::from("."),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateSection {
    pub core_kind: String,
    pub n_examples: [usize; 3],
    pub n_features: [usize; 3],
    pub n_causal: [usize; 3],
    pub latent_dim: [usize; 3],
    pub sparsity: f64,
    pub exact_sparsity: bool,
    pub noise_ratio: f64,
    /// Examples held out per mode for cold-start testing.
    pub holdout: usize,
    pub warm_frac: f64,
}

impl Default for SimulateSection {
    fn default() -> Self {
        let d = SimConfig::default();
        Self {
            core_kind: d.core_kind.name().into(),
            n_examples: d.n_examples,
            n_features: d.n_features,
            n_causal: d.n_causal,
            latent_dim: d.latent_dim,
            sparsity: d.sparsity,
            exact_sparsity: d.exact_sparsity,
            noise_ratio: d.noise_ratio,
            holdout: 2,
            warm_frac: 0.01,
        }
    }
}

pub fn parse_core_kind(field: &str, s: &str) -> Result<CoreKind, CliError> {
    CoreKind::parse(s).ok_or_else(|| {
        CliError::Validation(format!(
            "{field}: unknown core kind '{s}' (expected edges1d, faces2d or full3d)"
        ))
    })
}

impl SimulateSection {
    pub fn sim_config(&self, kind: CoreKind, seed: u64) -> Result<SimConfig, CliError> {
        let cfg = SimConfig {
            n_examples: self.n_examples,
            n_features: self.n_features,
            n_causal: self.n_causal,
            latent_dim: self.latent_dim,
            core_kind: kind,
            sparsity: self.sparsity,
            exact_sparsity: self.exact_sparsity,
            noise_ratio: self.noise_ratio,
            seed,
        };
        cfg.validate().map_err(|e| CliError::Validation(format!("simulate: {e}")))?;
        if self.n_examples.iter().any(|&n| self.holdout >= n) {
            return Err(CliError::Validation(format!(
                "simulate.holdout: {} leaves no training examples",
                self.holdout
            )));
        }
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub decomposition: String,
    /// Learned latent columns per mode for Tucker (a ones column is added).
    pub latent_dim: [usize; 3],
    /// CP rank.
    pub rank: usize,
    pub alpha: f64,
    pub beta: f64,
    /// Tucker core prior; defaults to `alpha` and `beta`.
    pub core_alpha: Option<f64>,
    pub core_beta: Option<f64>,
    pub core_prior: Option<bool>,
    pub latent_variance: f64,
    pub response_variance: f64,
    pub ones_column: Option<bool>,
    pub bias_column: bool,
    pub row_shared_precision: bool,
    pub standardize_features: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            decomposition: "tucker".into(),
            latent_dim: [4; 3],
            rank: 64,
            alpha: 1e-5,
            beta: 1e5,
            core_alpha: None,
            core_beta: None,
            core_prior: None,
            latent_variance: SIMULATION_LATENT_VARIANCE,
            response_variance: 1.0,
            ones_column: None,
            bias_column: false,
            row_shared_precision: true,
            standardize_features: true,
        }
    }
}

pub fn parse_decomposition(field: &str, s: &str) -> Result<Decomposition, CliError> {
    match s.to_ascii_lowercase().as_str() {
        "tucker" => Ok(Decomposition::Tucker),
        "cp" => Ok(Decomposition::Cp),
        _ => Err(CliError::Validation(format!(
            "{field}: unknown decomposition '{s}' (expected tucker or cp)"
        ))),
    }
}

impl ModelSection {
    pub fn decomposition(&self) -> Result<Decomposition, CliError> {
        parse_decomposition("model.decomposition", &self.decomposition)
    }

    pub fn hyper(&self, decomposition: Decomposition, seed: u64) -> Result<Hyperparams, CliError> {
        let mut h = match decomposition {
            Decomposition::Tucker => Hyperparams::tucker(self.latent_dim, self.alpha, self.beta),
            Decomposition::Cp => Hyperparams::cp(self.rank, self.alpha, self.beta),
        };
        if let Some(a) = self.core_alpha {
            h.core_alpha = a;
        }
        if let Some(b) = self.core_beta {
            h.core_beta = b;
        }
        if let Some(p) = self.core_prior {
            h.core_prior = p;
        }
        h.sigma2_y = self.response_variance;
        h.row_shared_precision = self.row_shared_precision;
        h.standardize_features = self.standardize_features;
        h.seed = seed;
        for m in &mut h.modes {
            m.sigma2 = self.latent_variance;
            m.bias_column = self.bias_column;
            if let Some(o) = self.ones_column {
                m.ones_column = o;
            }
        }
        h.validate().map_err(|e| CliError::Validation(format!("model: {e}")))?;
        Ok(h)
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub sweeps: usize,
    pub elbo_every: usize,
    pub convergence_tol: f64,
    pub update_order: Option<Vec<String>>,
    pub parallel: bool,
    /// Train on z-scored responses and write the scale next to the checkpoint.
    pub standardize_responses: bool,
    /// Continue from this checkpoint instead of a fresh initialization.
    pub resume_from: Option<PathBuf>,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        Self {
            sweeps: d.n_sweeps,
            elbo_every: d.elbo_every,
            convergence_tol: d.convergence_tol,
            update_order: None,
            parallel: d.parallel,
            standardize_responses: true,
            resume_from: None,
        }
    }
}

impl TrainSection {
    pub fn train_config(&self) -> Result<TrainConfig, CliError> {
        let mut cfg = TrainConfig {
            n_sweeps: self.sweeps,
            elbo_every: self.elbo_every,
            convergence_tol: self.convergence_tol,
            parallel: self.parallel,
            ..TrainConfig::default()
        };
        if let Some(order) = &self.update_order {
            cfg.update_order = order
                .iter()
                .map(|name| {
                    Family::parse(name).ok_or_else(|| {
                        CliError::Validation(format!(
                            "train.update_order: unknown family '{name}' (expected lambda_a, a, h, lambda_core, core)"
                        ))
                    })
                })
                .collect::<Result<_, _>>()?;
        }
        cfg.validate().map_err(|e| CliError::Validation(format!("train: {e}")))?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// One feature table per mode.
    pub features: Option<[PathBuf; 3]>,
    pub responses: Option<PathBuf>,
    pub split: Option<PathBuf>,
    /// Causal feature labels, used for AUROC.
    pub truth: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredictSection {
    pub checkpoint: Option<PathBuf>,
    /// Feature tables of new examples; modes left out use the training examples.
    pub mode1: Option<PathBuf>,
    pub mode2: Option<PathBuf>,
    pub mode3: Option<PathBuf>,
    /// Map predictions back with the scale written by `train`.
    pub response_scale: Option<PathBuf>,
}

impl PredictSection {
    pub fn new_modes(&self) -> [Option<&PathBuf>; 3] {
        [self.mode1.as_ref(), self.mode2.as_ref(), self.mode3.as_ref()]
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluateSection {
    /// `model` trains the configured model; `mean` scores the baseline only.
    pub method: String,
    pub folds: usize,
    pub holdout: [usize; 3],
    pub warm_frac: f64,
}

impl Default for EvaluateSection {
    fn default() -> Self {
        Self {
            method: "model".into(),
            folds: 1,
            holdout: [2; 3],
            warm_frac: 0.01,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchmarkSection {
    pub replicates: usize,
    pub core_kinds: Vec<String>,
    /// Any of `tucker`, `cp` and `mean`.
    pub methods: Vec<String>,
}

impl Default for BenchmarkSection {
    fn default() -> Self {
        Self {
            replicates: 10,
            core_kinds: vec!["edges1d".into(), "faces2d".into(), "full3d".into()],
            methods: vec!["tucker".into(), "cp".into(), "mean".into()],
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Io(format!("reading config {}: {e}", path.display())))?;
        let mut cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| CliError::Validation(format!("config {}: {e}", path.display())))?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn require(&self, field: &str, p: Option<&PathBuf>) -> Result<PathBuf, CliError> {
        p.map(|p| self.resolve(p))
            .ok_or_else(|| CliError::Validation(format!("{field} is required for this command")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_simulated_settings() {
        let cfg = RunConfig::default();
        let h = cfg.model.hyper(Decomposition::Tucker, 0).unwrap();
        assert_eq!(h, batfled::eval::simulation_hyper(Decomposition::Tucker, 1e-5, 1e5));
        assert_eq!(h.ranks(), [5, 5, 5]);
        let cp = cfg.model.hyper(Decomposition::Cp, 0).unwrap();
        assert_eq!(cp, batfled::eval::simulation_hyper(Decomposition::Cp, 1e-5, 1e5));
        assert_eq!(cfg.train.train_config().unwrap().n_sweeps, 100);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = toml::from_str::<RunConfig>("[model]\nalpah = 1.0\n").unwrap_err();
        assert!(err.to_string().contains("alpah"), "{err}");
        assert!(toml::from_str::<RunConfig>("colour = 1\n").is_err());
    }

    #[test]
    fn bad_names_point_at_the_field() {
        let err = parse_core_kind("simulate.core_kind", "cube").unwrap_err();
        assert!(err.to_string().contains("simulate.core_kind"));
        let t = TrainSection {
            update_order: Some(vec!["a".into(), "h".into()]),
            ..TrainSection::default()
        };
        assert!(t.train_config().is_err());
    }
}
