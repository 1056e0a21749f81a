//! Run configuration: file format, defaults and command-line overrides.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use delay_mimo::io::config_hash;
use delay_mimo::{
    CalibrationMode, CalibrationOptions, ChainParams64, CsitModel, PhyConfig64, RrRule, RviOptions, SolverMode,
    StreamProfile,
};
use serde::{Deserialize, Serialize};

use crate::ConfigError;

pub const CACHE_DIR_ENV: &str = "DELAY_MIMO_CACHE_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhySection {
    pub n_tx: usize,
    pub n_rx: usize,
    pub target_ser: f64,
    pub kappa1: f64,
    pub sigma_e2: f64,
    pub csit_model: CsitModel,
}

impl Default for PhySection {
    fn default() -> Self {
        Self {
            n_tx: 2,
            n_rx: 2,
            target_ser: 0.01,
            kappa1: 4.0,
            sigma_e2: 0.0,
            csit_model: CsitModel::Scaled,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CacheSpec {
    pub rows: usize,
    pub seed: u64,
}

impl Default for CacheSpec {
    fn default() -> Self {
        Self {
            rows: 100_000,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationSection {
    pub mode: CalibrationMode,
    pub gamma_min: f64,
    pub gamma_max: f64,
    pub points: usize,
    pub rel_tol: f64,
}

impl Default for CalibrationSection {
    fn default() -> Self {
        let d = CalibrationOptions::default();
        Self {
            mode: CalibrationMode::RootFind,
            gamma_min: d.gamma_min,
            gamma_max: d.gamma_max,
            points: d.points,
            rel_tol: d.rel_tol,
        }
    }
}

/// Everything one run needs. The defaults are the two-stream 2×2 scenario
/// with N = 4, 200-bit packets, λτ = 0.02 and β = (1, 10).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub scenario: String,
    pub phy: PhySection,
    pub streams: Vec<StreamProfile<f64>>,
    pub buffer: usize,
    /// Channel uses per slot.
    pub tau: f64,
    pub gamma: Option<f64>,
    /// Average power budget in dB relative to unit noise power.
    pub p0_db: Option<f64>,
    pub solver: SolverMode,
    pub cache: CacheSpec,
    pub calibration: CalibrationSection,
    pub rr_rule: RrRule,
    pub state_cap: usize,
    pub slots: u64,
    pub seeds: Vec<u64>,
    pub out: PathBuf,
}

pub const DEFAULT_P0_DB: f64 = 20.0;

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            scenario: "two-stream-2x2".into(),
            phy: PhySection::default(),
            streams: vec![StreamProfile::new(1.0, 0.02, 200.0), StreamProfile::new(10.0, 0.02, 200.0)],
            buffer: 4,
            tau: 1.0,
            gamma: None,
            p0_db: None,
            solver: SolverMode::Decomposed,
            cache: CacheSpec::default(),
            calibration: CalibrationSection::default(),
            rr_rule: RrRule::StrongestMode,
            state_cap: RviOptions::default().state_cap,
            slots: 1_000_000,
            seeds: vec![1, 2, 3, 4, 5],
            out: PathBuf::from("out"),
        }
    }
}

/// Command-line values that replace configuration fields.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub gamma: Option<f64>,
    pub p0_db: Option<f64>,
    pub mode: Option<SolverMode>,
    pub slots: Option<u64>,
    pub seeds: Option<Vec<u64>>,
    pub sigma_e2: Option<f64>,
    pub out: Option<PathBuf>,
}

/// What the run is driven by: a fixed price or a power budget.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Target {
    Gamma(f64),
    Power(f64),
}

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

impl RunConfig {
    /// Reads TOML or JSON, chosen by extension (anything but `.json` is TOML).
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))
            .map_err(|e| ConfigError(format!("{e:#}")))?;
        let parsed = if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json")) {
            serde_json::from_str(&text).map_err(|e| ConfigError(format!("{}: {e}", path.display())))?
        } else {
            toml::from_str(&text).map_err(|e| ConfigError(format!("{}: {e}", path.display())))?
        };
        Ok(parsed)
    }

    pub fn resolve(path: Option<&Path>, ov: &Overrides) -> anyhow::Result<Self> {
        let mut cfg = match path {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        if ov.gamma.is_some() && ov.p0_db.is_some() {
            bail!(ConfigError("give either --gamma or --p0, not both".into()));
        }
        if let Some(g) = ov.gamma {
            cfg.gamma = Some(g);
            cfg.p0_db = None;
        }
        if let Some(p) = ov.p0_db {
            cfg.p0_db = Some(p);
            cfg.gamma = None;
        }
        if cfg.gamma.is_none() && cfg.p0_db.is_none() {
            cfg.p0_db = Some(DEFAULT_P0_DB);
        }
        if let Some(m) = ov.mode {
            cfg.solver = m;
        }
        if let Some(s) = ov.slots {
            cfg.slots = s;
        }
        if let Some(s) = &ov.seeds {
            cfg.seeds = s.clone();
        }
        if let Some(s) = ov.sigma_e2 {
            cfg.phy.sigma_e2 = s;
        }
        if let Some(o) = &ov.out {
            cfg.out = o.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        let err = |m: String| Err(ConfigError(m).into());
        match (self.gamma, self.p0_db) {
            (Some(_), Some(_)) => return err("configuration sets both gamma and p0_db; exactly one is allowed".into()),
            (None, None) => return err("configuration sets neither gamma nor p0_db".into()),
            (Some(g), None) if !(g > 0.0 && g.is_finite()) => return err(format!("gamma {g} must be positive")),
            (None, Some(p)) if !p.is_finite() => return err(format!("p0_db {p} must be finite")),
            _ => {}
        }
        if self.seeds.is_empty() {
            return err("at least one seed is required".into());
        }
        if self.cache.rows == 0 {
            return err("cache.rows must be positive".into());
        }
        self.phy_config().validate().map_err(|e| ConfigError(e.to_string()))?;
        self.chain_params(1.0).map_err(|e| ConfigError(e.to_string()))?;
        Ok(())
    }

    pub fn target(&self) -> Target {
        match (self.gamma, self.p0_db) {
            (Some(g), _) => Target::Gamma(g),
            (None, Some(db)) => Target::Power(db_to_linear(db)),
            (None, None) => Target::Power(db_to_linear(DEFAULT_P0_DB)),
        }
    }

    pub fn phy_config(&self) -> PhyConfig64 {
        PhyConfig64 {
            n_tx: self.phy.n_tx,
            n_rx: self.phy.n_rx,
            n_streams: self.streams.len(),
            target_ser: self.phy.target_ser,
            kappa1: self.phy.kappa1,
            sigma_e2: self.phy.sigma_e2,
            csit_model: self.phy.csit_model,
            rng_seed: self.cache.seed,
        }
    }

    pub fn chain_params(&self, gamma: f64) -> delay_mimo::Result<ChainParams64> {
        let alpha = delay_mimo::alpha(self.phy.target_ser, self.phy.kappa1)?;
        ChainParams64::new(self.streams.clone(), self.buffer, self.tau, gamma, alpha)
    }

    pub fn rvi_options(&self) -> RviOptions {
        RviOptions {
            state_cap: self.state_cap,
            ..RviOptions::default()
        }
    }

    pub fn calibration_options(&self) -> CalibrationOptions {
        CalibrationOptions {
            gamma_min: self.calibration.gamma_min,
            gamma_max: self.calibration.gamma_max,
            points: self.calibration.points,
            rel_tol: self.calibration.rel_tol,
            rvi: self.rvi_options(),
            ..CalibrationOptions::default()
        }
    }

    /// Hash of everything that determines the numbers; the output
    /// directory is left out.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out = PathBuf::new();
        config_hash(&c).expect("configuration serializes")
    }

    /// `#` line stamped on every emitted CSV.
    pub fn provenance(&self) -> String {
        format!(
            "delay-mimo {} config_hash={} cache_seed={} cache_rows={} scenario={}",
            version(),
            self.hash(),
            self.cache.seed,
            self.cache.rows,
            self.scenario
        )
    }
}

/// Package version with the `git describe` of the build.
pub const VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), "+", env!("DELAY_MIMO_GIT_DESCRIBE"));

pub fn version() -> &'static str {
    VERSION
}
