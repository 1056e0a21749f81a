//! Frozen eigenvalue samples used for every expectation over the channel.
//!
//! Each row holds the `L` largest eigenvalues of one channel draw, sorted in
//! descending order. The per-column statistics turn a water-filling
//! expectation over all rows into two binary searches.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::phy::{sample_eigvals, CsitModel, PhyConfig};
use crate::scalar::Real;

pub const DEFAULT_CACHE_ROWS: usize = 100_000;

/// Sorted copy of one eigenvalue column with suffix sums of `log₂ ξ` and `1/ξ`.
#[derive(Debug, Clone, PartialEq)]
pub struct ColumnStats<T> {
    ascending: Vec<T>,
    suffix_log2: Vec<T>,
    suffix_inv: Vec<T>,
}

impl<T: Real> ColumnStats<T> {
    pub fn new(values: &[T]) -> Self {
        let mut ascending = values.to_vec();
        ascending.sort_by(|a, b| a.partial_cmp(b).expect("finite eigenvalues"));
        let m = ascending.len();
        let mut suffix_log2 = vec![T::zero(); m + 1];
        let mut suffix_inv = vec![T::zero(); m + 1];
        for k in (0..m).rev() {
            let x = ascending[k];
            let (lg, inv) = if x > T::zero() {
                (x.log2(), x.recip())
            } else {
                (T::zero(), T::zero())
            };
            suffix_log2[k] = suffix_log2[k + 1] + lg;
            suffix_inv[k] = suffix_inv[k + 1] + inv;
        }
        Self {
            ascending,
            suffix_log2,
            suffix_inv,
        }
    }

    pub fn len(&self) -> usize {
        self.ascending.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ascending.is_empty()
    }

    pub fn mean(&self) -> T {
        let s = self.ascending.iter().fold(T::zero(), |a, &b| a + b);
        s / T::from_usize(self.len()).unwrap()
    }

    /// Expected power and expected `log₂(1 + α p ξ)` under
    /// `p = (w - 1/(α ξ))⁺` with water level `w`.
    pub fn waterfill_moments(&self, water_level: T, alpha: T) -> (T, T) {
        if !(water_level > T::zero()) || self.is_empty() {
            return (T::zero(), T::zero());
        }
        let floor = (alpha * water_level).recip();
        let first = self.ascending.partition_point(|&x| x <= floor);
        let active = self.len() - first;
        if active == 0 {
            return (T::zero(), T::zero());
        }
        let m = T::from_usize(self.len()).unwrap();
        let count = T::from_usize(active).unwrap();
        let power = (count * water_level - self.suffix_inv[first] / alpha) / m;
        let rate = (count * (alpha * water_level).log2() + self.suffix_log2[first]) / m;
        (power.max(T::zero()), rate.max(T::zero()))
    }
}

/// Matrix of descending eigenvalue rows plus the model it was drawn under.
#[derive(Debug, Clone)]
pub struct EigenSampleCache<T: Real> {
    samples: Vec<T>,
    rows: usize,
    streams: usize,
    pub seed: u64,
    pub sigma_e2: T,
    pub n_tx: usize,
    pub n_rx: usize,
    pub csit_model: CsitModel,
    columns: Vec<ColumnStats<T>>,
}

impl<T: Real> PartialEq for EigenSampleCache<T> {
    fn eq(&self, other: &Self) -> bool {
        self.samples == other.samples
            && self.rows == other.rows
            && self.streams == other.streams
            && self.seed == other.seed
            && self.sigma_e2 == other.sigma_e2
            && self.n_tx == other.n_tx
            && self.n_rx == other.n_rx
            && self.csit_model == other.csit_model
    }
}

impl<T: Real> EigenSampleCache<T> {
    /// Draws `rows` channels with a generator seeded from `seed`.
    pub fn generate(cfg: &PhyConfig<T>, rows: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if rows == 0 {
            return Err(Error::Config("cache needs at least one row".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut samples = Vec::with_capacity(rows * cfg.n_streams);
        for _ in 0..rows {
            samples.extend(sample_eigvals(cfg, &mut rng));
        }
        Ok(Self::assemble(
            samples,
            rows,
            cfg.n_streams,
            seed,
            cfg.sigma_e2,
            cfg.n_tx,
            cfg.n_rx,
            cfg.csit_model,
        ))
    }

    /// Builds a cache from explicit rows; each must be descending and non-negative.
    pub fn from_rows(rows: &[Vec<T>], seed: u64, sigma_e2: T) -> Result<Self> {
        let streams = rows.first().map(Vec::len).unwrap_or(0);
        if rows.is_empty() || streams == 0 {
            return Err(Error::Config("cache needs at least one non-empty row".into()));
        }
        let mut samples = Vec::with_capacity(rows.len() * streams);
        for (k, row) in rows.iter().enumerate() {
            if row.len() != streams {
                return Err(Error::Parse(format!("row {k} has {} entries, expected {streams}", row.len())));
            }
            if row.iter().any(|&x| !(x >= T::zero()) || !x.is_finite()) {
                return Err(Error::Parse(format!("row {k} has a negative or non-finite eigenvalue")));
            }
            if row.windows(2).any(|w| w[0] < w[1]) {
                return Err(Error::Parse(format!("row {k} is not sorted descending")));
            }
            samples.extend_from_slice(row);
        }
        Ok(Self::assemble(
            samples,
            rows.len(),
            streams,
            seed,
            sigma_e2,
            streams,
            streams,
            CsitModel::Scaled,
        ))
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        samples: Vec<T>,
        rows: usize,
        streams: usize,
        seed: u64,
        sigma_e2: T,
        n_tx: usize,
        n_rx: usize,
        csit_model: CsitModel,
    ) -> Self {
        let columns = (0..streams)
            .map(|k| {
                let col: Vec<T> = (0..rows).map(|r| samples[r * streams + k]).collect();
                ColumnStats::new(&col)
            })
            .collect();
        Self {
            samples,
            rows,
            streams,
            seed,
            sigma_e2,
            n_tx,
            n_rx,
            csit_model,
            columns,
        }
    }

    pub fn n_rows(&self) -> usize {
        self.rows
    }

    pub fn n_streams(&self) -> usize {
        self.streams
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.samples[r * self.streams..(r + 1) * self.streams]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[T]> {
        self.samples.chunks_exact(self.streams)
    }

    /// Statistics of the eigenvalues with descending rank `rank` (0 = largest).
    pub fn column(&self, rank: usize) -> &ColumnStats<T> {
        &self.columns[rank]
    }

    /// Single-column cache holding rank `rank` of every row.
    pub fn column_cache(&self, rank: usize) -> Self {
        let samples: Vec<T> = self.rows().map(|r| r[rank]).collect();
        Self::assemble(
            samples,
            self.rows,
            1,
            self.seed,
            self.sigma_e2,
            self.n_tx,
            self.n_rx,
            self.csit_model,
        )
    }

    /// First `rows` rows as a new cache.
    pub fn truncated(&self, rows: usize) -> Self {
        let rows = rows.clamp(1, self.rows);
        Self::assemble(
            self.samples[..rows * self.streams].to_vec(),
            rows,
            self.streams,
            self.seed,
            self.sigma_e2,
            self.n_tx,
            self.n_rx,
            self.csit_model,
        )
    }

    /// CSV form: one `#` header line with the generation metadata, then one
    /// row of eigenvalues per line. Floats are written in shortest
    /// round-trip form, so reading back is bit-exact.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(
            w,
            "# seed={},sigma_e2={:?},m_samples={},l={},n_tx={},n_rx={},csit_model={}",
            self.seed,
            self.sigma_e2.as_f64(),
            self.rows,
            self.streams,
            self.n_tx,
            self.n_rx,
            match self.csit_model {
                CsitModel::Scaled => "scaled",
                CsitModel::Unscaled => "unscaled",
            }
        )?;
        let mut line = String::new();
        for row in self.rows() {
            line.clear();
            for (k, x) in row.iter().enumerate() {
                if k > 0 {
                    line.push(',');
                }
                write!(line, "{x:?}").expect("write to string");
            }
            writeln!(w, "{line}")?;
        }
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut lines = BufReader::new(r).lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Parse("empty cache file".into()))??;
        let header = header
            .strip_prefix("# ")
            .ok_or_else(|| Error::Parse("missing cache header".into()))?;
        let mut seed = None;
        let mut sigma = None;
        let mut rows_declared = None;
        let mut streams = None;
        let mut n_tx = None;
        let mut n_rx = None;
        let mut model = CsitModel::Scaled;
        for field in header.split(',') {
            let (k, v) = field
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("bad header field {field:?}")))?;
            let bad = |_| Error::Parse(format!("bad value for {k}: {v:?}"));
            match k.trim() {
                "seed" => seed = Some(v.parse::<u64>().map_err(|e| bad(e.to_string()))?),
                "sigma_e2" => sigma = Some(v.parse::<f64>().map_err(|e| bad(e.to_string()))?),
                "m_samples" => rows_declared = Some(v.parse::<usize>().map_err(|e| bad(e.to_string()))?),
                "l" => streams = Some(v.parse::<usize>().map_err(|e| bad(e.to_string()))?),
                "n_tx" => n_tx = Some(v.parse::<usize>().map_err(|e| bad(e.to_string()))?),
                "n_rx" => n_rx = Some(v.parse::<usize>().map_err(|e| bad(e.to_string()))?),
                "csit_model" => {
                    model = match v {
                        "scaled" => CsitModel::Scaled,
                        "unscaled" => CsitModel::Unscaled,
                        other => return Err(Error::Parse(format!("unknown csit model {other:?}"))),
                    }
                }
                _ => {}
            }
        }
        let missing = |name: &str| Error::Parse(format!("header lacks {name}"));
        let seed = seed.ok_or_else(|| missing("seed"))?;
        let sigma = T::lit(sigma.ok_or_else(|| missing("sigma_e2"))?);
        let rows_declared = rows_declared.ok_or_else(|| missing("m_samples"))?;
        let streams = streams.ok_or_else(|| missing("l"))?;
        let mut rows = Vec::with_capacity(rows_declared);
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let row = line
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse::<f64>()
                        .map(T::lit)
                        .map_err(|e| Error::Parse(format!("bad eigenvalue {s:?}: {e}")))
                })
                .collect::<Result<Vec<T>>>()?;
            rows.push(row);
        }
        if rows.len() != rows_declared {
            return Err(Error::Parse(format!(
                "header declares {rows_declared} rows, file has {}",
                rows.len()
            )));
        }
        let mut cache = Self::from_rows(&rows, seed, sigma)?;
        if cache.streams != streams {
            return Err(Error::Parse(format!("header declares l={streams}, rows have {}", cache.streams)));
        }
        cache.n_tx = n_tx.unwrap_or(streams);
        cache.n_rx = n_rx.unwrap_or(streams);
        cache.csit_model = model;
        Ok(cache)
    }
}
