//! Experiment plans: objectives, the hyperparameter grid, and the
//! key/value config-file format that describes a grid search.

use super::TrainError;
use serde::{Deserialize, Serialize};

/// SoftTriple hyperparameters plus the composite mixing weight.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SoftTripleHyper {
    pub k: usize,
    pub gamma: f64,
    pub lambda: f64,
    pub delta: f64,
    pub beta: f64,
}

impl std::fmt::Display for SoftTripleHyper {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "k={}, gamma={}, lambda={}, delta={}, beta={}",
            self.k, self.gamma, self.lambda, self.delta, self.beta
        )
    }
}

/// The training objective of one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "loss", rename_all = "snake_case")]
pub enum Objective {
    /// Multinomial cross-entropy on pooled sentence logits.
    Ce,
    /// `beta * CE + (1 - beta) * SoftTriple` over all non-pad tokens.
    TripleEntropy(SoftTripleHyper),
    /// Pure token-level SoftTriple (the `beta` field is ignored).
    SoftTriple(SoftTripleHyper),
    /// In-batch pair loss on pooled embeddings.
    Contrastive { margin: f64 },
    /// In-batch triplet loss on pooled embeddings.
    Triplet { alpha: f64 },
    /// ProxyNCA on pooled embeddings, one proxy per class.
    ProxyNca,
}

impl std::fmt::Display for Objective {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Objective::Ce => write!(f, "ce"),
            Objective::TripleEntropy(h) => write!(f, "tripleentropy({h})"),
            Objective::SoftTriple(h) => write!(f, "softtriple({h})"),
            Objective::Contrastive { margin } => write!(f, "contrastive(margin={margin})"),
            Objective::Triplet { alpha } => write!(f, "triplet(alpha={alpha})"),
            Objective::ProxyNca => write!(f, "proxynca"),
        }
    }
}

impl Objective {
    /// Whether the objective trains proxy weights.
    pub fn uses_proxies(&self) -> bool {
        matches!(
            self,
            Objective::TripleEntropy(_) | Objective::SoftTriple(_) | Objective::ProxyNca
        )
    }
}

/// The value lists of the grid search, enumerated in nested order
/// (`k` outermost, `beta` innermost).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperGrid {
    pub k_values: Vec<usize>,
    pub gammas: Vec<f64>,
    pub lambdas: Vec<f64>,
    pub deltas: Vec<f64>,
    pub betas: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GridPreset {
    /// The full published grid: 3 * 5 * 7 * 7 * 5 = 3675 configurations.
    PaperFull,
    /// A small grid that a laptop can finish: beta sweeps, the rest fixed.
    DeskSmall,
}

impl std::str::FromStr for GridPreset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "paper-full" => Ok(GridPreset::PaperFull),
            "desk-small" => Ok(GridPreset::DeskSmall),
            other => Err(format!(
                "unknown grid preset {other:?} (expected paper-full or desk-small)"
            )),
        }
    }
}

impl HyperGrid {
    pub fn preset(preset: GridPreset) -> Self {
        match preset {
            GridPreset::PaperFull => HyperGrid {
                k_values: vec![10, 100, 1000],
                gammas: vec![0.01, 0.03, 0.05, 0.07, 0.1],
                lambdas: vec![1.0, 3.0, 3.3, 4.0, 6.0, 8.0, 10.0],
                deltas: vec![0.01, 0.1, 0.3, 0.5, 0.7, 0.9, 1.0],
                betas: vec![0.1, 0.3, 0.5, 0.7, 0.9],
            },
            GridPreset::DeskSmall => HyperGrid {
                k_values: vec![2],
                gammas: vec![0.1],
                lambdas: vec![3.0],
                deltas: vec![0.1],
                betas: vec![0.1, 0.3, 0.5, 0.7, 0.9],
            },
        }
    }

    pub fn len(&self) -> usize {
        self.k_values.len()
            * self.gammas.len()
            * self.lambdas.len()
            * self.deltas.len()
            * self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Every configuration, `k` varying slowest and `beta` fastest, so the
    /// enumeration index is also the lexicographic order of
    /// `(k, gamma, lambda, delta, beta)`.
    pub fn configs(&self) -> Vec<SoftTripleHyper> {
        let mut out = Vec::with_capacity(self.len());
        for &k in &self.k_values {
            for &gamma in &self.gammas {
                for &lambda in &self.lambdas {
                    for &delta in &self.deltas {
                        for &beta in &self.betas {
                            out.push(SoftTripleHyper {
                                k,
                                gamma,
                                lambda,
                                delta,
                                beta,
                            });
                        }
                    }
                }
            }
        }
        out
    }
}

/// Knobs shared by every run in a plan.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    /// Peak learning rate of the warmup/decay schedule.
    pub lr: f64,
    pub weight_decay: f64,
    /// Embedding dimension of the encoder.
    pub dim: usize,
    /// Stop after this many validation evaluations without improvement.
    pub early_stop_patience: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            lr: 1e-5,
            weight_decay: 0.01,
            dim: 64,
            early_stop_patience: 3,
        }
    }
}

/// Everything one training run needs besides its seed and fold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub objective: Objective,
    pub settings: TrainSettings,
    pub batch_size: usize,
    pub epochs: usize,
}

/// The full protocol: every objective trained for every seed and fold.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentPlan {
    pub seeds: Vec<u64>,
    pub fold_count: usize,
    pub grid: Vec<Objective>,
    pub batch_size: usize,
    pub epochs: usize,
    pub settings: TrainSettings,
}

impl ExperimentPlan {
    pub const DEFAULT_SEEDS: [u64; 4] = [2, 16, 128, 2048];

    pub fn new(grid: Vec<Objective>) -> Self {
        ExperimentPlan {
            seeds: Self::DEFAULT_SEEDS.to_vec(),
            fold_count: 5,
            grid,
            batch_size: 64,
            epochs: 10,
            settings: TrainSettings::default(),
        }
    }

    /// A plan sweeping TripleEntropy over a hyperparameter grid.
    pub fn from_grid(grid: &HyperGrid) -> Self {
        Self::new(grid.configs().into_iter().map(Objective::TripleEntropy).collect())
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.seeds.is_empty() {
            return Err(TrainError::InvalidPlan("no seeds".to_string()));
        }
        if self.fold_count < 2 {
            return Err(TrainError::InvalidPlan(format!(
                "fold count must be >= 2, got {}",
                self.fold_count
            )));
        }
        if self.grid.is_empty() {
            return Err(TrainError::InvalidPlan("empty configuration grid".to_string()));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(TrainError::InvalidPlan(
                "batch size and epochs must be positive".to_string(),
            ));
        }
        Ok(())
    }

    /// Runs per configuration (seeds x folds).
    pub fn runs_per_config(&self) -> usize {
        self.seeds.len() * self.fold_count
    }

    pub fn run_config(&self, objective: &Objective) -> RunConfig {
        RunConfig {
            objective: objective.clone(),
            settings: self.settings,
            batch_size: self.batch_size,
            epochs: self.epochs,
        }
    }
}

/// Key/value config file for a grid search. Lines are `key = value`;
/// `#` starts a comment. List values are comma-separated.
///
/// Recognized keys: `dataset`, `format`, `preset`, `k`, `gamma`, `lambda`,
/// `delta`, `beta`, `seeds`, `folds`, `epochs`, `batch_size`, `lr`,
/// `weight_decay`, `dim`, `jobs`, `out`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GridConfigFile {
    pub dataset: Option<String>,
    pub format: Option<String>,
    pub preset: Option<String>,
    pub k: Option<Vec<usize>>,
    pub gamma: Option<Vec<f64>>,
    pub lambda: Option<Vec<f64>>,
    pub delta: Option<Vec<f64>>,
    pub beta: Option<Vec<f64>>,
    pub seeds: Option<Vec<u64>>,
    pub folds: Option<usize>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub weight_decay: Option<f64>,
    pub dim: Option<usize>,
    pub jobs: Option<usize>,
    pub out: Option<String>,
}

impl GridConfigFile {
    pub fn parse(text: &str) -> Result<Self, TrainError> {
        let mut cfg = GridConfigFile::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                TrainError::InvalidPlan(format!("config line {}: expected key = value", i + 1))
            })?;
            let key = key.trim();
            let value = value.trim();
            let bad = |what: &str| {
                TrainError::InvalidPlan(format!(
                    "config line {}: cannot parse {value:?} as {what}",
                    i + 1
                ))
            };
            fn list<T: std::str::FromStr>(value: &str) -> Option<Vec<T>> {
                value
                    .split(',')
                    .map(|v| v.trim().parse::<T>().ok())
                    .collect()
            }
            match key {
                "dataset" => cfg.dataset = Some(value.to_string()),
                "format" => cfg.format = Some(value.to_string()),
                "preset" => cfg.preset = Some(value.to_string()),
                "k" => cfg.k = Some(list(value).ok_or_else(|| bad("a list of integers"))?),
                "gamma" => cfg.gamma = Some(list(value).ok_or_else(|| bad("a list of numbers"))?),
                "lambda" => cfg.lambda = Some(list(value).ok_or_else(|| bad("a list of numbers"))?),
                "delta" => cfg.delta = Some(list(value).ok_or_else(|| bad("a list of numbers"))?),
                "beta" => cfg.beta = Some(list(value).ok_or_else(|| bad("a list of numbers"))?),
                "seeds" => cfg.seeds = Some(list(value).ok_or_else(|| bad("a list of integers"))?),
                "folds" => cfg.folds = Some(value.parse().map_err(|_| bad("an integer"))?),
                "epochs" => cfg.epochs = Some(value.parse().map_err(|_| bad("an integer"))?),
                "batch_size" => cfg.batch_size = Some(value.parse().map_err(|_| bad("an integer"))?),
                "lr" => cfg.lr = Some(value.parse().map_err(|_| bad("a number"))?),
                "weight_decay" => cfg.weight_decay = Some(value.parse().map_err(|_| bad("a number"))?),
                "dim" => cfg.dim = Some(value.parse().map_err(|_| bad("an integer"))?),
                "jobs" => cfg.jobs = Some(value.parse().map_err(|_| bad("an integer"))?),
                "out" => cfg.out = Some(value.to_string()),
                other => {
                    return Err(TrainError::InvalidPlan(format!(
                        "config line {}: unknown key {other:?}",
                        i + 1
                    )))
                }
            }
        }
        Ok(cfg)
    }

    /// The grid described by this file: explicit lists override the preset
    /// list-by-list, starting from `desk-small` when no preset is named.
    pub fn grid(&self) -> Result<HyperGrid, TrainError> {
        let preset = match self.preset.as_deref() {
            Some(name) => name
                .parse::<GridPreset>()
                .map_err(TrainError::InvalidPlan)?,
            None => GridPreset::DeskSmall,
        };
        let mut grid = HyperGrid::preset(preset);
        if let Some(k) = &self.k {
            grid.k_values = k.clone();
        }
        if let Some(g) = &self.gamma {
            grid.gammas = g.clone();
        }
        if let Some(l) = &self.lambda {
            grid.lambdas = l.clone();
        }
        if let Some(d) = &self.delta {
            grid.deltas = d.clone();
        }
        if let Some(b) = &self.beta {
            grid.betas = b.clone();
        }
        if grid.is_empty() {
            return Err(TrainError::InvalidPlan("empty grid".to_string()));
        }
        Ok(grid)
    }
}
