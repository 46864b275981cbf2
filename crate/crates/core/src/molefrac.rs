//! Mole fractions from footprint–flux convolution, and the two synthetic
//! flux regimes.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};

use crate::domain::{crop_patch, embed_patch, DatasetManifest, FluxField, Footprint, GridSpec, Space, Split};
use crate::ensemble::{scalar_stats, ScalarStats};
use crate::error::{Error, Result};
use crate::formats::read_fpg;

pub fn mole_fraction_values(fp: &[f64], flux: &FluxField) -> Result<f64> {
    crate::error::ensure_len("footprint vs flux cells", flux.values.len(), fp.len())?;
    Ok(fp.iter().zip(&flux.values).map(|(a, b)| a * b).sum())
}

/// `Σ fp·flux` over the shared grid.
pub fn mole_fraction(fp: &Footprint, flux: &FluxField) -> Result<f64> {
    if fp.grid != flux.grid {
        return Err(Error::invalid(format!(
            "footprint grid {:?} differs from flux grid {:?}",
            fp.grid, flux.grid
        )));
    }
    if fp.space != Space::Linear {
        return Err(Error::invalid("mole fractions need a linear-space footprint"));
    }
    mole_fraction_values(&fp.values, flux)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FluxConfig {
    pub seed: u64,
    pub n_hotspots: usize,
    pub background: f64,
    /// Median hotspot peak above background.
    pub amplitude_median: f64,
    /// Log-space spread of hotspot peaks.
    pub amplitude_sigma: f64,
    /// Hotspot widths are drawn uniformly from this range, in cells.
    pub width_min: f64,
    pub width_max: f64,
}

impl Default for FluxConfig {
    fn default() -> Self {
        FluxConfig {
            seed: 21,
            n_hotspots: 12,
            background: 1.0,
            amplitude_median: 10.0,
            amplitude_sigma: 1.0,
            width_min: 1.5,
            width_max: 5.0,
        }
    }
}

impl FluxConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.background >= 0.0 && self.background.is_finite()) {
            return Err(Error::invalid("flux background must be finite and >= 0"));
        }
        if !(self.amplitude_median > 0.0 && self.amplitude_sigma >= 0.0) {
            return Err(Error::invalid("hotspot amplitude median must be > 0 and sigma >= 0"));
        }
        if !(self.width_min > 0.0 && self.width_max >= self.width_min) {
            return Err(Error::invalid("hotspot width range is invalid"));
        }
        Ok(())
    }
}

/// Background plus seeded Gaussian hotspots with lognormal peaks.
pub fn synth_bottomup_flux(cfg: &FluxConfig, grid: &GridSpec) -> Result<FluxField> {
    cfg.validate()?;
    grid.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let amplitude = LogNormal::new(cfg.amplitude_median.ln(), cfg.amplitude_sigma)
        .map_err(|e| Error::invalid(format!("hotspot amplitude distribution: {e}")))?;
    let mut values = vec![cfg.background; grid.len()];
    for _ in 0..cfg.n_hotspots {
        let ci = rng.random_range(0.0..grid.n_lat as f64);
        let cj = rng.random_range(0.0..grid.n_lon as f64);
        let width = if cfg.width_max > cfg.width_min {
            rng.random_range(cfg.width_min..cfg.width_max)
        } else {
            cfg.width_min
        };
        let peak = amplitude.sample(&mut rng);
        for i in 0..grid.n_lat {
            for j in 0..grid.n_lon {
                let d2 = (i as f64 - ci).powi(2) + (j as f64 - cj).powi(2);
                values[grid.index(i, j)] += peak * (-0.5 * d2 / (width * width)).exp();
            }
        }
    }
    FluxField::new(*grid, values)
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Constant field at the median of the reference's positive cells.
pub fn uniform_flux(reference: &FluxField) -> Result<FluxField> {
    let mut positive: Vec<f64> = reference.values.iter().copied().filter(|&v| v > 0.0).collect();
    if positive.is_empty() {
        return Err(Error::invalid("uniform flux needs a reference with at least one positive cell"));
    }
    positive.sort_by(f64::total_cmp);
    FluxField::new(reference.grid, vec![median(&positive); reference.values.len()])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MoleFractionRecord {
    pub release_id: u64,
    pub time: f64,
    pub flux_id: String,
    pub truth: f64,
    pub members: Vec<f64>,
    pub stats: ScalarStats,
}

/// Truth and member footprints of one release, on the full grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ReleaseFootprints {
    pub release_id: u64,
    pub time: f64,
    pub truth: Vec<f64>,
    pub members: Vec<Vec<f64>>,
}

/// One record per release and flux, ordered by release time, then release
/// id, then flux order.
pub fn molefrac_records(releases: &[ReleaseFootprints], fluxes: &[(String, FluxField)], cv_eps: f64) -> Result<Vec<MoleFractionRecord>> {
    let mut order: Vec<&ReleaseFootprints> = releases.iter().collect();
    order.sort_by(|a, b| a.time.total_cmp(&b.time).then(a.release_id.cmp(&b.release_id)));
    let mut out = Vec::with_capacity(releases.len() * fluxes.len());
    for r in order {
        for (id, flux) in fluxes {
            let truth = mole_fraction_values(&r.truth, flux)?;
            let members = r
                .members
                .iter()
                .map(|m| mole_fraction_values(m, flux))
                .collect::<Result<Vec<f64>>>()?;
            let stats = scalar_stats(&members, cv_eps)?;
            out.push(MoleFractionRecord {
                release_id: r.release_id,
                time: r.time,
                flux_id: id.clone(),
                truth,
                members,
                stats,
            });
        }
    }
    Ok(out)
}

/// LPDM footprint restricted to the emulator's patch window, on the full grid.
pub fn patch_truth(fp: &Footprint, side: usize) -> Result<Vec<f64>> {
    embed_patch(&crop_patch(&fp.values, &fp.grid, &fp.release, side)?, &fp.grid)
}

/// Gathers test-split truth from the dataset and member footprints from
/// an ensemble output directory, then builds the records.
pub fn molefrac_dataset(
    manifest_path: &Path,
    ensemble_dir: &Path,
    n_members: usize,
    fluxes: &[(String, FluxField)],
    cv_eps: f64,
) -> Result<Vec<MoleFractionRecord>> {
    let manifest = DatasetManifest::load(manifest_path)?;
    let data_dir = manifest_path.parent().unwrap_or(Path::new("."));
    let mut releases = Vec::new();
    for entry in manifest.split(Split::Test) {
        let id = entry.release.id;
        let fp = read_fpg(&data_dir.join(&entry.footprint))?;
        let members = (0..n_members)
            .map(|k| {
                let path = crate::ensemble::stat_file(ensemble_dir, &format!("member_{k}"), id);
                if !path.exists() {
                    return Err(Error::invalid(format!("missing member {k} footprint for release {id}: {}", path.display())));
                }
                Ok(read_fpg(&path)?.values)
            })
            .collect::<Result<Vec<_>>>()?;
        releases.push(ReleaseFootprints {
            release_id: id,
            time: entry.release.time,
            truth: patch_truth(&fp, manifest.patch_side)?,
            members,
        });
    }
    molefrac_records(&releases, fluxes, cv_eps)
}

pub fn records_csv(records: &[MoleFractionRecord]) -> String {
    let n = records.first().map_or(0, |r| r.members.len());
    let mut out = String::from("release_id,time,flux_id,truth");
    for k in 0..n {
        let _ = write!(out, ",member_{k}");
    }
    out.push_str(",mean,std,cv\n");
    for r in records {
        let _ = write!(out, "{},{},{},{}", r.release_id, r.time, r.flux_id, r.truth);
        for m in &r.members {
            let _ = write!(out, ",{m}");
        }
        let _ = writeln!(out, ",{},{},{}", r.stats.mean, r.stats.std, r.stats.cv);
    }
    out
}
