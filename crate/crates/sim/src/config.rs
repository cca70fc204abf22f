//! Run configuration: CLI flags layered over an optional JSON config file.
//!
//! Flags override file fields; anything still unset falls back to the
//! defaults (`N=256, d=64, heads=4, W=4, T=4, lambda=0.99, seed=2024,
//! mode=lockstep, layers=1`, one batch per group). Every run is fully
//! determined by the resolved config, seed included.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::runtime::SchedulingMode;
use crate::SimError;

/// Paths to LASPT1 tensors to use instead of generated fixtures.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixturePaths {
    pub q: PathBuf,
    pub k: PathBuf,
    pub v: PathBuf,
    pub dout: Option<PathBuf>,
}

/// One layer of configuration; `None` means "not specified here".
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartialConfig {
    pub n: Option<usize>,
    pub d: Option<usize>,
    pub heads: Option<usize>,
    pub batch: Option<usize>,
    pub world: Option<usize>,
    pub sp_size: Option<usize>,
    pub lambda: Option<f64>,
    pub seed: Option<u64>,
    pub mode: Option<String>,
    pub layers: Option<usize>,
    pub out: Option<PathBuf>,
    pub fixtures: Option<FixturePaths>,
}

impl PartialConfig {
    pub fn from_file(path: &Path) -> Result<Self, SimError> {
        let text = std::fs::read_to_string(path).map_err(|e| SimError::Config {
            detail: format!("cannot read config {}: {e}", path.display()),
        })?;
        serde_json::from_str(&text).map_err(|e| SimError::Config {
            detail: format!("cannot parse config {}: {e}", path.display()),
        })
    }

    /// `self` wins over `base` field by field.
    pub fn merged_over(self, base: PartialConfig) -> PartialConfig {
        PartialConfig {
            n: self.n.or(base.n),
            d: self.d.or(base.d),
            heads: self.heads.or(base.heads),
            batch: self.batch.or(base.batch),
            world: self.world.or(base.world),
            sp_size: self.sp_size.or(base.sp_size),
            lambda: self.lambda.or(base.lambda),
            seed: self.seed.or(base.seed),
            mode: self.mode.or(base.mode),
            layers: self.layers.or(base.layers),
            out: self.out.or(base.out),
            fixtures: self.fixtures.or(base.fixtures),
        }
    }
}

/// A fully resolved, validated run configuration.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub n: usize,
    pub d: usize,
    pub heads: usize,
    pub batch: usize,
    pub world: usize,
    pub sp_size: usize,
    pub lambda: f64,
    pub seed: u64,
    pub mode: SchedulingMode,
    pub layers: usize,
    pub out: Option<PathBuf>,
    pub fixtures: Option<FixturePaths>,
}

impl RunConfig {
    pub fn resolve(p: PartialConfig) -> Result<Self, SimError> {
        let world = p.world.unwrap_or(4);
        let sp_size = p.sp_size.unwrap_or(4.min(world.max(1)));
        if world == 0 || sp_size == 0 {
            return Err(SimError::Config {
                detail: "world size and sp size must be positive".into(),
            });
        }
        if !world.is_multiple_of(sp_size) {
            return Err(SimError::Config {
                detail: format!(
                    "sequence-parallel size {sp_size} does not divide world size {world}"
                ),
            });
        }
        let groups = world / sp_size;
        let cfg = RunConfig {
            n: p.n.unwrap_or(256),
            d: p.d.unwrap_or(64),
            heads: p.heads.unwrap_or(4),
            batch: p.batch.unwrap_or(groups),
            world,
            sp_size,
            lambda: p.lambda.unwrap_or(0.99),
            seed: p.seed.unwrap_or(2024),
            mode: SchedulingMode::parse(p.mode.as_deref().unwrap_or("lockstep"))?,
            layers: p.layers.unwrap_or(1),
            out: p.out,
            fixtures: p.fixtures,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<(), SimError> {
        if self.n == 0 || !self.n.is_multiple_of(self.sp_size) {
            return Err(SimError::Config {
                detail: format!(
                    "sequence-parallel size {} does not divide sequence length {}",
                    self.sp_size, self.n
                ),
            });
        }
        if self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return Err(SimError::Config {
                detail: format!(
                    "head count {} does not divide model dim {}",
                    self.heads, self.d
                ),
            });
        }
        let groups = self.world / self.sp_size;
        if self.batch < groups {
            return Err(SimError::Config {
                detail: format!(
                    "batch count {} is below the group count {groups}",
                    self.batch
                ),
            });
        }
        if !(self.lambda.is_finite() && self.lambda > 0.0 && self.lambda <= 1.0) {
            return Err(SimError::Config {
                detail: format!("decay rate must be in (0, 1], got {}", self.lambda),
            });
        }
        if self.layers == 0 {
            return Err(SimError::Config {
                detail: "at least one layer is required".into(),
            });
        }
        if let Some(f) = &self.fixtures {
            if self.batch != 1 || self.layers != 1 {
                return Err(SimError::Config {
                    detail: "fixture tensors require batch=1 and layers=1".into(),
                });
            }
            let _ = f;
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    pub fn group_count(&self) -> usize {
        self.world / self.sp_size
    }

    /// Config echo for report files.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "n": self.n,
            "d": self.d,
            "heads": self.heads,
            "batch": self.batch,
            "world": self.world,
            "sp_size": self.sp_size,
            "lambda": self.lambda,
            "seed": self.seed,
            "mode": self.mode.as_str(),
            "layers": self.layers,
        })
    }
}
