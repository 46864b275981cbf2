//! Evaluation metrics and aggregation products: metric reports, wind roses,
//! CV series, spatial maps, scatter-to-grid maps and rank correlation.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::domain::{GridSpec, Release};
use crate::error::{ensure_len, Error, Result};
use crate::synthmet::MetField;

/// Denominator floor for NMAE.
const NMAE_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub nmae: f64,
    pub mse: f64,
    pub accuracy: f64,
    pub iou: f64,
    /// NaN when the truth is constant and the prediction differs from it.
    pub r2: f64,
}

/// Running sums so that metrics can be pooled over many fields without
/// holding them all in memory.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct MetricAccumulator {
    n: usize,
    abs_err: f64,
    abs_truth: f64,
    sq_err: f64,
    sum_truth: f64,
    sum_truth_sq: f64,
    agree: usize,
    intersection: usize,
    union: usize,
}

impl MetricAccumulator {
    pub fn add(&mut self, pred: &[f64], truth: &[f64], active_tau: f64) -> Result<()> {
        ensure_len("metric fields", truth.len(), pred.len())?;
        for (&p, &t) in pred.iter().zip(truth) {
            let d = p - t;
            self.abs_err += d.abs();
            self.abs_truth += t.abs();
            self.sq_err += d * d;
            self.sum_truth += t;
            self.sum_truth_sq += t * t;
            let (a, b) = (p >= active_tau, t >= active_tau);
            self.agree += usize::from(a == b);
            self.intersection += usize::from(a && b);
            self.union += usize::from(a || b);
        }
        self.n += pred.len();
        Ok(())
    }

    pub fn report(&self) -> MetricReport {
        let n = self.n.max(1) as f64;
        let mean = self.sum_truth / n;
        let ss_tot = (self.sum_truth_sq - n * mean * mean).max(0.0);
        let r2 = if ss_tot > 0.0 {
            1.0 - self.sq_err / ss_tot
        } else if self.sq_err == 0.0 {
            1.0
        } else {
            f64::NAN
        };
        MetricReport {
            nmae: self.abs_err / self.abs_truth.max(NMAE_FLOOR),
            mse: self.sq_err / n,
            accuracy: self.agree as f64 / n,
            iou: if self.union == 0 {
                1.0
            } else {
                self.intersection as f64 / self.union as f64
            },
            r2,
        }
    }
}

/// NMAE, MSE, binarized accuracy and IoU at `active_tau`, and R² around the
/// truth mean.
pub fn metrics(pred: &[f64], truth: &[f64], active_tau: f64) -> Result<MetricReport> {
    if active_tau.is_nan() {
        return Err(Error::invalid("active_tau must not be NaN"));
    }
    let mut acc = MetricAccumulator::default();
    acc.add(pred, truth, active_tau)?;
    // the two-pass form keeps R² exact for small fields
    let mut report = acc.report();
    let n = truth.len().max(1) as f64;
    let mean = truth.iter().sum::<f64>() / n;
    let ss_tot: f64 = truth.iter().map(|t| (t - mean).powi(2)).sum();
    let ss_res: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t).powi(2)).sum();
    report.r2 = if ss_tot > 0.0 {
        1.0 - ss_res / ss_tot
    } else if ss_res == 0.0 {
        1.0
    } else {
        f64::NAN
    };
    Ok(report)
}

pub const SECTORS: usize = 16;
pub const SECTOR_WIDTH: f64 = 360.0 / SECTORS as f64;

/// Sector whose center is nearest to `direction` (degrees, clockwise from
/// north); sector 0 is centered on north.
pub fn sector_of(direction: f64) -> usize {
    let shifted = (direction + SECTOR_WIDTH / 2.0).rem_euclid(360.0);
    ((shifted / SECTOR_WIDTH) as usize).min(SECTORS - 1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindRose {
    pub counts: [usize; SECTORS],
    /// Mean attached statistic per sector; NaN for empty sectors or when
    /// nothing is attached.
    pub mean_stat: [f64; SECTORS],
    pub calm: usize,
}

impl WindRose {
    pub fn sector_center(k: usize) -> f64 {
        k as f64 * SECTOR_WIDTH
    }
}

/// Bins the surface wind at each release into 16 direction sectors,
/// optionally averaging a per-release statistic per sector.
pub fn wind_rose(releases: &[Release], met: &MetField, attach: Option<&[f64]>) -> Result<WindRose> {
    if releases.is_empty() {
        return Err(Error::invalid("wind rose needs at least one release"));
    }
    if let Some(stat) = attach {
        ensure_len("wind rose statistic", releases.len(), stat.len())?;
    }
    let mut counts = [0usize; SECTORS];
    let mut sums = [0.0f64; SECTORS];
    let mut calm = 0;
    for (k, release) in releases.iter().enumerate() {
        let wind = met.surface_wind(release)?;
        if wind.calm {
            calm += 1;
            continue;
        }
        let s = sector_of(wind.direction);
        counts[s] += 1;
        if let Some(stat) = attach {
            sums[s] += stat[k];
        }
    }
    let mut mean_stat = [f64::NAN; SECTORS];
    if attach.is_some() {
        for s in 0..SECTORS {
            if counts[s] > 0 {
                mean_stat[s] = sums[s] / counts[s] as f64;
            }
        }
    }
    Ok(WindRose { counts, mean_stat, calm })
}

/// One point of a per-release time series.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeriesPoint {
    pub time: f64,
    pub release_id: u64,
    pub value: f64,
}

/// Per-release coefficient of variation over member values, ordered by
/// release time (then id).
pub fn temporal_cv_series(records: &[(f64, u64, Vec<f64>)], eps: f64) -> Result<Vec<SeriesPoint>> {
    let mut out = Vec::with_capacity(records.len());
    for (time, id, members) in records {
        let stats = crate::ensemble::scalar_stats(members, eps)?;
        out.push(SeriesPoint {
            time: *time,
            release_id: *id,
            value: stats.cv,
        });
    }
    out.sort_by(|a, b| a.time.total_cmp(&b.time).then(a.release_id.cmp(&b.release_id)));
    Ok(out)
}

/// Per-release statistic fields on a common grid, with the cells each one
/// covers.
#[derive(Debug, Clone, PartialEq)]
pub struct ReleaseFields {
    pub truth: Vec<f64>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub cv: Vec<f64>,
    pub error: Vec<f64>,
    pub covered: Vec<bool>,
}

/// Per-cell means over releases. Cells no release covers hold NaN and a
/// zero count.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialAggregate {
    pub grid: GridSpec,
    pub truth: Vec<f64>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub cv: Vec<f64>,
    pub error: Vec<f64>,
    pub count: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct SpatialAccumulator {
    grid: GridSpec,
    sums: [Vec<f64>; 5],
    count: Vec<usize>,
}

impl SpatialAccumulator {
    pub fn new(grid: GridSpec) -> Self {
        let n = grid.len();
        SpatialAccumulator {
            grid,
            sums: std::array::from_fn(|_| vec![0.0; n]),
            count: vec![0; n],
        }
    }

    pub fn add(&mut self, fields: &ReleaseFields) -> Result<()> {
        let n = self.grid.len();
        for (name, v) in [
            ("truth", &fields.truth),
            ("mean", &fields.mean),
            ("std", &fields.std),
            ("cv", &fields.cv),
            ("error", &fields.error),
        ] {
            ensure_len(name, n, v.len())?;
        }
        ensure_len("coverage", n, fields.covered.len())?;
        let sources = [&fields.truth, &fields.mean, &fields.std, &fields.cv, &fields.error];
        for cell in 0..n {
            if !fields.covered[cell] {
                continue;
            }
            self.count[cell] += 1;
            for (sum, src) in self.sums.iter_mut().zip(sources) {
                sum[cell] += src[cell];
            }
        }
        Ok(())
    }

    pub fn finish(self) -> SpatialAggregate {
        let count = self.count;
        let [truth, mean, std, cv, error] = self.sums.map(|sum| {
            sum.iter()
                .zip(&count)
                .map(|(&s, &c)| if c == 0 { f64::NAN } else { s / c as f64 })
                .collect::<Vec<f64>>()
        });
        SpatialAggregate {
            grid: self.grid,
            truth,
            mean,
            std,
            cv,
            error,
            count,
        }
    }
}

pub fn spatial_aggregate(fields: &[ReleaseFields], grid: GridSpec) -> Result<SpatialAggregate> {
    let mut acc = SpatialAccumulator::new(grid);
    for f in fields {
        acc.add(f)?;
    }
    Ok(acc.finish())
}

/// Per-cell mean of located values on a coarse grid; empty cells hold NaN.
pub fn scatter_to_grid(points: &[(f64, f64, f64)], grid: &GridSpec) -> Result<(Vec<f64>, Vec<usize>)> {
    grid.validate()?;
    let mut sum = vec![0.0; grid.len()];
    let mut count = vec![0usize; grid.len()];
    for &(lat, lon, value) in points {
        let (i, j) = grid.cell_of(lat, lon).ok_or(Error::OutsideDomain { lat, lon })?;
        let k = grid.index(i, j);
        sum[k] += value;
        count[k] += 1;
    }
    let mean = sum
        .iter()
        .zip(&count)
        .map(|(&s, &c)| if c == 0 { f64::NAN } else { s / c as f64 })
        .collect();
    Ok((mean, count))
}

/// Ranks starting at 1, ties sharing their average rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && x[order[end]] == x[order[start]] {
            end += 1;
        }
        let rank = (start + end + 1) as f64 / 2.0;
        for &k in &order[start..end] {
            ranks[k] = rank;
        }
        start = end;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    if saa == 0.0 || sbb == 0.0 {
        return f64::NAN;
    }
    (sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub rho: f64,
    pub n: usize,
}

/// Spearman rank correlation over the pairs where both values are finite.
pub fn spread_error_correlation(spread: &[f64], error: &[f64]) -> Result<Correlation> {
    ensure_len("spread and error", spread.len(), error.len())?;
    let (a, b): (Vec<f64>, Vec<f64>) = spread
        .iter()
        .zip(error)
        .filter(|(s, e)| s.is_finite() && e.is_finite())
        .map(|(&s, &e)| (s, e))
        .unzip();
    if a.len() < 10 {
        return Err(Error::invalid(format!("spread-error correlation needs >= 10 valid points, got {}", a.len())));
    }
    Ok(Correlation {
        rho: pearson(&average_ranks(&a), &average_ranks(&b)),
        n: a.len(),
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// `lat,lon,value,count` rows for every grid cell, row-major.
pub fn write_map_csv(path: &Path, grid: &GridSpec, values: &[f64], count: &[usize]) -> Result<()> {
    ensure_len("map values", grid.len(), values.len())?;
    ensure_len("map counts", grid.len(), count.len())?;
    let mut out = String::from("lat,lon,value,count\n");
    for i in 0..grid.n_lat {
        for j in 0..grid.n_lon {
            let k = grid.index(i, j);
            let _ = writeln!(out, "{},{},{},{}", grid.lat_of(i), grid.lon_of(j), values[k], count[k]);
        }
    }
    write_text(path, &out)
}

/// `sector_deg,count,mean_stat`, one row per sector plus a `calm` row.
pub fn write_rose_csv(path: &Path, rose: &WindRose) -> Result<()> {
    let mut out = String::from("sector_deg,count,mean_stat\n");
    for k in 0..SECTORS {
        let _ = writeln!(out, "{},{},{}", WindRose::sector_center(k), rose.counts[k], rose.mean_stat[k]);
    }
    let _ = writeln!(out, "calm,{},NaN", rose.calm);
    write_text(path, &out)
}

pub fn write_series_csv(path: &Path, series: &[SeriesPoint]) -> Result<()> {
    let mut out = String::from("time,release_id,value\n");
    for p in series {
        let _ = writeln!(out, "{},{},{}", p.time, p.release_id, p.value);
    }
    write_text(path, &out)
}
