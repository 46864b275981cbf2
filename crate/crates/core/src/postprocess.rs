//! Thresholding and quantile mapping of emulator outputs.

use serde::{Deserialize, Serialize};

use crate::domain::exp_values;
use crate::error::{ensure_len, Error, Result};

pub const DEFAULT_QUANTILES: usize = 101;

/// Zeroes values below `tau`.
pub fn threshold(values: &[f64], tau: f64) -> Result<Vec<f64>> {
    if !(tau >= 0.0 && tau.is_finite()) {
        return Err(Error::invalid(format!("threshold tau must be finite and >= 0, got {tau}")));
    }
    Ok(values.iter().map(|&v| if v < tau { 0.0 } else { v }).collect())
}

/// Nearest-rank quantile of sorted data: the order statistic at
/// `round(level·(n-1))`.
pub fn order_quantile(sorted: &[f64], level: f64) -> f64 {
    let k = (level * (sorted.len() - 1) as f64).round() as usize;
    sorted[k.min(sorted.len() - 1)]
}

fn sorted_finite(values: &[f64], what: &str) -> Result<Vec<f64>> {
    if values.is_empty() {
        return Err(Error::invalid(format!("quantile map {what} pool is empty")));
    }
    if let Some(index) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { index });
    }
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    Ok(s)
}

/// Piecewise-linear map from prediction quantiles to truth quantiles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileMap {
    pub levels: Vec<f64>,
    pub source: Vec<f64>,
    pub target: Vec<f64>,
}

impl QuantileMap {
    /// Fits `n_q` evenly spaced levels on `[0, 1]`.
    pub fn fit(pred: &[f64], truth: &[f64], n_q: usize) -> Result<Self> {
        if n_q < 2 {
            return Err(Error::invalid(format!("quantile map needs n_q >= 2, got {n_q}")));
        }
        let p = sorted_finite(pred, "prediction")?;
        let t = sorted_finite(truth, "truth")?;
        let levels: Vec<f64> = (0..n_q).map(|k| k as f64 / (n_q - 1) as f64).collect();
        let source = levels.iter().map(|&l| order_quantile(&p, l)).collect();
        let target = levels.iter().map(|&l| order_quantile(&t, l)).collect();
        Ok(QuantileMap { levels, source, target })
    }

    pub fn identity() -> Self {
        QuantileMap {
            levels: vec![0.0, 1.0],
            source: vec![0.0, 1.0],
            target: vec![0.0, 1.0],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.levels.len();
        if n < 2 {
            return Err(Error::invalid("quantile map needs at least two knots"));
        }
        ensure_len("quantile map source knots", n, self.source.len())?;
        ensure_len("quantile map target knots", n, self.target.len())?;
        for knots in [&self.levels, &self.source, &self.target] {
            if knots.iter().any(|v| !v.is_finite()) || knots.windows(2).any(|w| w[1] < w[0]) {
                return Err(Error::invalid("quantile map knots must be finite and non-decreasing"));
            }
        }
        Ok(())
    }

    fn segment_slope(&self, k: usize) -> f64 {
        let ds = self.source[k + 1] - self.source[k];
        if ds > 0.0 {
            (self.target[k + 1] - self.target[k]) / ds
        } else {
            0.0
        }
    }

    pub fn apply_one(&self, x: f64) -> f64 {
        let n = self.source.len();
        let (s, t) = (&self.source, &self.target);
        if x <= s[0] {
            return t[0] + self.segment_slope(0) * (x - s[0]);
        }
        if x >= s[n - 1] {
            return t[n - 1] + self.segment_slope(n - 2) * (x - s[n - 1]);
        }
        // first knot strictly above x; s[k-1] <= x < s[k]
        let k = s.partition_point(|&v| v <= x);
        let (s0, s1, t0, t1) = (s[k - 1], s[k], t[k - 1], t[k]);
        if x == s0 {
            return t0;
        }
        t0 + (t1 - t0) * ((x - s0) / (s1 - s0))
    }

    pub fn apply(&self, values: &[f64]) -> Vec<f64> {
        values.iter().map(|&x| self.apply_one(x)).collect()
    }
}

/// Per-model settings that turn log-space network output into a linear
/// field: quantile map, inverse log transform, threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PostprocessState {
    pub eps_log: f64,
    pub tau: f64,
    pub quantile_map: Option<QuantileMap>,
}

impl PostprocessState {
    pub fn apply(&self, log_pred: &[f64]) -> Result<Vec<f64>> {
        let mapped = match &self.quantile_map {
            Some(q) => q.apply(log_pred),
            None => log_pred.to_vec(),
        };
        threshold(&exp_values(&mapped, self.eps_log)?, self.tau)
    }
}

/// Default threshold: 5th percentile of the nonzero linear training truth.
pub fn default_tau(nonzero_truth: &[f64]) -> Result<f64> {
    let positive: Vec<f64> = nonzero_truth.iter().copied().filter(|&v| v > 0.0).collect();
    if positive.is_empty() {
        return Err(Error::invalid("no nonzero training truth to set the threshold from"));
    }
    Ok(order_quantile(&sorted_finite(&positive, "threshold")?, 0.05))
}
