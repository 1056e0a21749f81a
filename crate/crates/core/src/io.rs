//! File formats: versioned solution files, calibration and steady-state CSV.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::mdp_decomposed::DecomposedSolution;
use crate::mdp_full::FullSolution;
use crate::model::ChainParams;
use crate::scalar::Real;
use crate::steady::{CalibrationResult, SteadyState};

pub const SOLUTION_FORMAT: &str = "delay-mimo-solution";
pub const SOLUTION_VERSION: u32 = 1;

/// Hex SHA-256 of the JSON encoding of any configuration value.
pub fn config_hash<S: Serialize>(cfg: &S) -> Result<String> {
    let bytes = serde_json::to_vec(cfg)?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum SolutionBody<T> {
    Full(FullSolution<T>),
    Decomposed(DecomposedSolution<T>),
}

/// Solver output with its provenance. Tables are in lexicographic state
/// order, first stream most significant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolutionFile<T> {
    pub format: String,
    pub version: u32,
    pub config_hash: String,
    pub gamma: T,
    pub theta: T,
    pub body: SolutionBody<T>,
}

impl<T: Real> SolutionFile<T> {
    pub fn full(sol: FullSolution<T>, config_hash: String) -> Self {
        Self {
            format: SOLUTION_FORMAT.into(),
            version: SOLUTION_VERSION,
            config_hash,
            gamma: sol.gamma,
            theta: sol.theta,
            body: SolutionBody::Full(sol),
        }
    }

    pub fn decomposed(sol: DecomposedSolution<T>, config_hash: String) -> Self {
        Self {
            format: SOLUTION_FORMAT.into(),
            version: SOLUTION_VERSION,
            config_hash,
            gamma: sol.gamma,
            theta: sol.theta_total(),
            body: SolutionBody::Decomposed(sol),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: Self = serde_json::from_str(text)?;
        if file.format != SOLUTION_FORMAT {
            return Err(Error::Parse(format!("not a solution file (format {:?})", file.format)));
        }
        if file.version != SOLUTION_VERSION {
            return Err(Error::Parse(format!(
                "solution file version {} not supported (expected {SOLUTION_VERSION})",
                file.version
            )));
        }
        Ok(file)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

fn stream_columns(prefix: &str, l: usize) -> String {
    (0..l).map(|i| format!("{prefix}{i}")).collect::<Vec<_>>().join(",")
}

fn join<T: Real>(xs: &[T]) -> String {
    xs.iter().map(|x| format!("{:?}", x.as_f64())).collect::<Vec<_>>().join(",")
}

/// `gamma,P0,theta,T_0..,drop_0..`, one row per evaluated γ in ascending
/// order, after a `#` provenance line.
pub fn write_calibration_csv<T: Real, W: Write>(res: &CalibrationResult<T>, provenance: &str, mut w: W) -> Result<()> {
    let l = res.table.first().map_or(0, |p| p.avg_queue.len());
    writeln!(
        w,
        "# {provenance},solver={:?},mode={:?},gamma={:?},target={:?},achieved={:?},monotone={}",
        res.solver,
        res.mode,
        res.gamma.as_f64(),
        res.target_power.as_f64(),
        res.achieved_power.as_f64(),
        res.monotone
    )?;
    writeln!(w, "gamma,P0,theta,{},{}", stream_columns("T_", l), stream_columns("drop_", l))?;
    let mut rows: Vec<_> = res.table.iter().collect();
    rows.sort_by(|a, b| a.gamma.partial_cmp(&b.gamma).unwrap_or(std::cmp::Ordering::Equal));
    for p in rows {
        writeln!(
            w,
            "{:?},{:?},{:?},{},{}",
            p.gamma.as_f64(),
            p.power.as_f64(),
            p.theta.as_f64(),
            join(&p.avg_queue),
            join(&p.drop_rate)
        )?;
    }
    Ok(())
}

/// Per-stream stationary metrics. `delay_channel_uses` is the mean queue
/// divided by the admitted arrival rate, a derived quantity.
pub fn write_steady_csv<T: Real, W: Write>(
    steady: &SteadyState<T>,
    params: &ChainParams<T>,
    provenance: &str,
    mut w: W,
) -> Result<()> {
    writeln!(
        w,
        "# {provenance},gamma={:?},avg_power={:?},balance_residual={:?}",
        params.gamma.as_f64(),
        steady.avg_power.as_f64(),
        steady.balance_residual.as_f64()
    )?;
    writeln!(w, "stream,beta,avg_queue,delay_channel_uses,drop_rate")?;
    let delay = steady.delay_channel_uses(params);
    for (i, s) in params.streams.iter().enumerate() {
        writeln!(
            w,
            "{i},{:?},{:?},{:?},{:?}",
            s.beta.as_f64(),
            steady.avg_queue[i].as_f64(),
            delay[i].as_f64(),
            steady.drop_rate[i].as_f64()
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cache::EigenSampleCache;
    use crate::mdp_decomposed::solve_decomposed;
    use crate::phy::PhyConfig;

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = ChainParams::two_stream_default([1.0f64, 10.0], 0.05, 0.28);
        let b = a.with_gamma(0.06);
        assert_eq!(config_hash(&a).unwrap(), config_hash(&a.clone()).unwrap());
        assert_ne!(config_hash(&a).unwrap(), config_hash(&b).unwrap());
        assert_eq!(config_hash(&a).unwrap().len(), 64);
    }

    #[test]
    fn solution_round_trip_and_version_check() {
        let cache = EigenSampleCache::generate(&PhyConfig::two_by_two(), 500, 1).unwrap();
        let params = ChainParams::two_stream_default([1.0f64, 10.0], 0.05, 0.2831);
        let sol = solve_decomposed(&params, &cache, 1e-9).unwrap();
        let file = SolutionFile::decomposed(sol, "abc".into());
        let text = file.to_json().unwrap();
        assert!(text.contains("\"mode\": \"decomposed\""));
        assert_eq!(SolutionFile::<f64>::from_json(&text).unwrap(), file);
        let bumped = text.replace("\"version\": 1", "\"version\": 99");
        assert!(matches!(SolutionFile::<f64>::from_json(&bumped), Err(Error::Parse(_))));
    }
}
