//! Run configuration with framework-level key names preserved in JSON
//! (`beta`, `k`, `N`, `M`, `gamma`, `tau`, ...). A config file may be
//! partial; missing keys take the defaults below, and CLI flags override
//! file values.

use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{Error, Result};
use crate::federation::FederationConfig;
use crate::mdpo::MdpoConfig;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,

    // preference-loss training
    pub beta: f64,
    pub lambda_cm: f64,
    pub lambda_ra: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Anchor percentile q of Prc_q.
    pub q: f64,

    // retrieval + routing
    pub k: usize,
    pub tau: f64,
    pub epsilon: f64,
    pub entropy_threshold: f64,
    pub max_active: usize,

    // federation
    #[serde(rename = "N")]
    pub n_sites: usize,
    #[serde(rename = "M")]
    pub quorum: usize,
    pub gamma: f64,
    pub t_max: usize,

    // meta-cognitive estimator
    pub alpha: f64,
    pub epsilon_interp: f64,
    pub u_low: f64,
    pub u_high: f64,
    pub hidden_dim: usize,
    pub estimator_lr: f64,
    pub estimator_steps: usize,

    // dependency graph
    pub edge_threshold: f64,
    pub significance_level: f64,
    pub restarts: usize,

    // aggregation
    pub cluster_radius: f64,
    pub min_points: usize,
    pub supermajority_fraction: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            beta: 1.0,
            lambda_cm: 1.0,
            lambda_ra: 1.0,
            learning_rate: 0.1,
            epochs: 50,
            batch_size: 16,
            q: 50.0,
            k: crate::knowledge::DEFAULT_TOP_K,
            tau: crate::routing::DEFAULT_TEMPERATURE,
            epsilon: crate::routing::DEFAULT_EPSILON,
            entropy_threshold: crate::routing::DEFAULT_ENTROPY_THRESHOLD,
            max_active: crate::routing::DEFAULT_MAX_ACTIVE,
            n_sites: crate::federation::DEFAULT_N_SITES,
            quorum: crate::federation::DEFAULT_QUORUM,
            gamma: crate::federation::DEFAULT_GAMMA,
            t_max: crate::federation::DEFAULT_T_MAX,
            alpha: crate::metacog::DEFAULT_ALPHA,
            epsilon_interp: crate::metacog::DEFAULT_EPSILON_INTERP,
            u_low: crate::metacog::DEFAULT_U_LOW,
            u_high: crate::metacog::DEFAULT_U_HIGH,
            hidden_dim: crate::metacog::DEFAULT_HIDDEN_DIM,
            estimator_lr: 1.0,
            estimator_steps: 400,
            edge_threshold: 0.05,
            significance_level: crate::metacog::DEFAULT_SIGNIFICANCE,
            restarts: crate::metacog::DEFAULT_RESTARTS,
            cluster_radius: crate::aggregation::DEFAULT_CLUSTER_RADIUS,
            min_points: crate::aggregation::DEFAULT_MIN_POINTS,
            supermajority_fraction: crate::aggregation::DEFAULT_SUPERMAJORITY_FRACTION,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact {
                stage: "config".into(),
                path: path.to_path_buf(),
            });
        }
        let config: RunConfig = serde_json::from_reader(std::fs::File::open(path)?)?;
        config.validate()?;
        Ok(config)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(file, self)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.mdpo().validate()?;
        self.federation().validate()?;
        if self.k == 0 {
            return Err(Error::config("k must be >= 1"));
        }
        if self.tau <= 0.0 {
            return Err(Error::config("tau must be > 0"));
        }
        if self.epsilon <= 0.0 {
            return Err(Error::config("epsilon must be > 0"));
        }
        Ok(())
    }

    pub fn mdpo(&self) -> MdpoConfig {
        MdpoConfig {
            beta: self.beta,
            lambda_cm: self.lambda_cm,
            lambda_ra: self.lambda_ra,
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            batch_size: self.batch_size,
            anchor_percentile: self.q,
            seed: self.seed,
        }
    }

    pub fn federation(&self) -> FederationConfig {
        FederationConfig {
            n_sites: self.n_sites,
            quorum: self.quorum,
            gamma: self.gamma,
            t_max: self.t_max,
        }
    }
}
