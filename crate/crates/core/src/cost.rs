//! Execution-time models `tau(len, dp)` used to plan worker allocation.

use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CostError {
    #[error("profile: {0}")]
    Csv(#[from] csv::Error),
    #[error("profile: {0}")]
    Invalid(String),
}

/// Estimated time for a group with representative length `len` on `dp` workers.
pub trait CostModel {
    fn tau(&self, len: f64, dp: usize) -> f64;
}

impl<F: Fn(f64, usize) -> f64> CostModel for F {
    fn tau(&self, len: f64, dp: usize) -> f64 {
        self(len, dp)
    }
}

/// `tau = len * (a + b * ceil(batch / dp)) / (1 + accepted_per_pass) + c`.
///
/// `batch` is the number of rollouts of the group in flight at once;
/// `accepted_per_pass` is the mean number of draft tokens accepted per
/// verification pass, zero without speculation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalyticCost {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub batch: usize,
    #[serde(default)]
    pub accepted_per_pass: f64,
}

impl CostModel for AnalyticCost {
    fn tau(&self, len: f64, dp: usize) -> f64 {
        let per_worker = self.batch.div_ceil(dp.max(1)) as f64;
        len * (self.a + self.b * per_worker) / (1.0 + self.accepted_per_pass) + self.c
    }
}

/// Profiled `tau` on a `(len, dp)` grid, bilinearly interpolated and clamped
/// to the grid outside its range.
#[derive(Debug, Clone, PartialEq)]
pub struct ProfileCost {
    lens: Vec<f64>,
    dps: Vec<f64>,
    /// Row-major by length: `seconds[i * dps.len() + j]`.
    seconds: Vec<f64>,
}

#[derive(Deserialize)]
struct ProfileRow {
    len: f64,
    dp: f64,
    seconds: f64,
}

impl ProfileCost {
    /// Parse a CSV with header `len,dp,seconds` covering a full grid.
    pub fn from_csv<R: Read>(r: R) -> Result<Self, CostError> {
        let mut rows = Vec::new();
        for row in csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r).deserialize() {
            let row: ProfileRow = row?;
            if !(row.len.is_finite() && row.dp.is_finite() && row.seconds.is_finite()) {
                return Err(CostError::Invalid("non-finite value".into()));
            }
            rows.push(row);
        }
        if rows.is_empty() {
            return Err(CostError::Invalid("no rows".into()));
        }
        let axis = |f: fn(&ProfileRow) -> f64| {
            let mut v: Vec<f64> = rows.iter().map(f).collect();
            v.sort_by(f64::total_cmp);
            v.dedup();
            v
        };
        let lens = axis(|r| r.len);
        let dps = axis(|r| r.dp);
        let mut seconds = vec![f64::NAN; lens.len() * dps.len()];
        for r in &rows {
            let i = lens.binary_search_by(|x| x.total_cmp(&r.len)).expect("axis value");
            let j = dps.binary_search_by(|x| x.total_cmp(&r.dp)).expect("axis value");
            let slot = &mut seconds[i * dps.len() + j];
            if !slot.is_nan() {
                return Err(CostError::Invalid(format!("duplicate point len={} dp={}", r.len, r.dp)));
            }
            *slot = r.seconds;
        }
        if let Some(k) = seconds.iter().position(|s| s.is_nan()) {
            return Err(CostError::Invalid(format!(
                "grid point len={} dp={} missing",
                lens[k / dps.len()],
                dps[k % dps.len()]
            )));
        }
        Ok(Self { lens, dps, seconds })
    }

    pub fn from_path(path: &Path) -> Result<Self, CostError> {
        let f = std::fs::File::open(path).map_err(|e| CostError::Csv(e.into()))?;
        Self::from_csv(f)
    }

    fn at(&self, i: usize, j: usize) -> f64 {
        self.seconds[i * self.dps.len() + j]
    }
}

/// Bracketing indices and interpolation weight of `x` on a sorted axis.
fn locate(axis: &[f64], x: f64) -> (usize, usize, f64) {
    let last = axis.len() - 1;
    if x <= axis[0] {
        return (0, 0, 0.0);
    }
    if x >= axis[last] {
        return (last, last, 0.0);
    }
    let hi = axis.partition_point(|&v| v <= x);
    let lo = hi - 1;
    (lo, hi, (x - axis[lo]) / (axis[hi] - axis[lo]))
}

impl CostModel for ProfileCost {
    fn tau(&self, len: f64, dp: usize) -> f64 {
        let (i0, i1, u) = locate(&self.lens, len);
        let (j0, j1, v) = locate(&self.dps, dp as f64);
        let lo = self.at(i0, j0) * (1.0 - v) + self.at(i0, j1) * v;
        let hi = self.at(i1, j0) * (1.0 - v) + self.at(i1, j1) * v;
        lo * (1.0 - u) + hi * u
    }
}
