//! Backward-in-time Lagrangian particle dispersion.
//!
//! Particles start at the release point and are advected against the wind
//! with Gaussian horizontal diffusion and a vertical random walk between a
//! reflecting ground and lid. Time spent below the surface-contact depth is
//! accumulated per grid cell, giving the surface sensitivity (seconds).

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::{DatasetManifest, Footprint, GridSpec, ManifestEntry, Release, Space};
use crate::error::{Error, Result};
use crate::features::{extract_features, FeatureSpec};
use crate::formats::{write_fpg, write_ftr};
use crate::synthmet::MetField;

pub const METERS_PER_DEG_LAT: f64 = 111_320.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub n_particles: usize,
    /// Step length, seconds.
    pub dt: f64,
    /// Backward integration length, hours.
    pub t_back_hours: f64,
    /// Horizontal diffusivity, m²/s.
    pub k_h: f64,
    /// Vertical random-walk scale; the step std is `sigma_w * sqrt(dt)` meters.
    pub sigma_w: f64,
    pub h_surf: f64,
    pub h_top: f64,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            n_particles: 2000,
            dt: 600.0,
            t_back_hours: 72.0,
            k_h: 20_000.0,
            sigma_w: 2.0,
            h_surf: 100.0,
            h_top: 2000.0,
            seed: 17,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_particles == 0 {
            return Err(Error::invalid("n_particles must be >= 1"));
        }
        if !(self.dt > 0.0) || !(self.t_back_hours >= 0.0) {
            return Err(Error::invalid("dt must be > 0 and t_back_hours >= 0"));
        }
        if !(self.h_surf > 0.0 && self.h_surf < self.h_top) {
            return Err(Error::invalid("require 0 < h_surf < h_top"));
        }
        if !(self.k_h >= 0.0 && self.sigma_w >= 0.0) {
            return Err(Error::invalid("k_h and sigma_w must be >= 0"));
        }
        Ok(())
    }

    pub fn n_steps(&self) -> usize {
        (self.t_back_hours * 3600.0 / self.dt).round() as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParticleState {
    pub lat: f64,
    pub lon: f64,
    pub z: f64,
    pub alive: bool,
}

impl ParticleState {
    pub fn at(release: &Release) -> Self {
        ParticleState {
            lat: release.lat,
            lon: release.lon,
            z: release.altitude,
            alive: true,
        }
    }
}

/// Folds a height back into `[0, top]` by mirror reflection.
pub fn reflect(z: f64, top: f64) -> f64 {
    let period = 2.0 * top;
    let m = z.rem_euclid(period);
    if m > top {
        period - m
    } else {
        m
    }
}

/// Advances one particle one step backward in time from `t_hours`.
pub fn step_particle<R: Rng + ?Sized>(
    p: ParticleState,
    met: &MetField,
    t_hours: f64,
    cfg: &SimConfig,
    rng: &mut R,
) -> ParticleState {
    if !p.alive {
        return p;
    }
    let grid = &met.grid;
    let (u, v) = met.sample(grid.row_coord(p.lat), grid.col_coord(p.lon), p.z, t_hours);
    let horiz = (2.0 * cfg.k_h * cfg.dt).sqrt();
    let nx: f64 = rng.sample(StandardNormal);
    let ny: f64 = rng.sample(StandardNormal);
    let nz: f64 = rng.sample(StandardNormal);
    let dx = -u * cfg.dt + horiz * nx;
    let dy = -v * cfg.dt + horiz * ny;
    let lat = p.lat + dy / METERS_PER_DEG_LAT;
    let lon = p.lon + dx / (METERS_PER_DEG_LAT * p.lat.to_radians().cos());
    let z = reflect(p.z + cfg.sigma_w * cfg.dt.sqrt() * nz, cfg.h_top);
    ParticleState {
        lat,
        lon,
        z,
        alive: grid.contains(lat, lon),
    }
}

/// Seed for one release, independent of which other releases are run.
pub fn release_seed(seed: u64, release_id: u64) -> u64 {
    splitmix64(splitmix64(seed) ^ release_id.wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn simulate_footprint(release: &Release, met: &MetField, cfg: &SimConfig) -> Result<Footprint> {
    cfg.validate()?;
    let grid = met.grid;
    release.validate(&grid)?;
    let n_steps = cfg.n_steps();
    let weight = cfg.dt / cfg.n_particles as f64;
    let seed = release_seed(cfg.seed, release.id);
    let mut values = vec![0.0; grid.len()];
    for particle in 0..cfg.n_particles {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(particle as u64);
        let mut p = ParticleState::at(release);
        for k in 0..n_steps {
            if !p.alive {
                break;
            }
            if p.z < cfg.h_surf {
                let (i, j) = grid.cell_of(p.lat, p.lon).expect("alive particle inside grid");
                values[grid.index(i, j)] += weight;
            }
            let t = release.time - k as f64 * cfg.dt / 3600.0;
            p = step_particle(p, met, t, cfg, &mut rng);
        }
    }
    Footprint::new(grid, *release, values, Space::Linear)
}

/// Where the sounding releases fall in space and time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReleaseConfig {
    pub seed: u64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    /// Soundings sharing one overpass time.
    pub per_overpass: usize,
    pub interval_hours: f64,
    pub altitude_min: f64,
    pub altitude_max: f64,
}

impl Default for ReleaseConfig {
    fn default() -> Self {
        ReleaseConfig {
            seed: 5,
            n_train: 600,
            n_val: 150,
            n_test: 250,
            per_overpass: 5,
            interval_hours: 3.0,
            altitude_min: 10.0,
            altitude_max: 90.0,
        }
    }
}

impl ReleaseConfig {
    pub fn total(&self) -> usize {
        self.n_train + self.n_val + self.n_test
    }
}

/// Time-ordered releases uniformly placed on cell centers. The first
/// overpass happens at `start_time`.
pub fn generate_releases(cfg: &ReleaseConfig, grid: &GridSpec, start_time: f64) -> Result<Vec<Release>> {
    if cfg.per_overpass == 0 || !(cfg.interval_hours > 0.0) {
        return Err(Error::invalid("per_overpass and interval_hours must be positive"));
    }
    if !(cfg.altitude_min >= 0.0 && cfg.altitude_max >= cfg.altitude_min) {
        return Err(Error::invalid("release altitude range is invalid"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    Ok((0..cfg.total())
        .map(|k| {
            let i = rng.random_range(0..grid.n_lat);
            let j = rng.random_range(0..grid.n_lon);
            let altitude = if cfg.altitude_max > cfg.altitude_min {
                rng.random_range(cfg.altitude_min..cfg.altitude_max)
            } else {
                cfg.altitude_min
            };
            Release {
                id: k as u64,
                lat: grid.lat_of(i),
                lon: grid.lon_of(j),
                altitude,
                time: start_time + (k / cfg.per_overpass) as f64 * cfg.interval_hours,
            }
        })
        .collect())
}

/// Split sizes and file layout for [`generate_dataset`].
#[derive(Debug, Clone)]
pub struct DatasetLayout {
    pub n_train: usize,
    pub n_val: usize,
    pub features: FeatureSpec,
    pub config_hash: u64,
}

pub fn footprint_file(id: u64) -> String {
    format!("footprints/fp_{id:06}.fpg")
}

pub fn feature_file(id: u64) -> String {
    format!("features/ft_{id:06}.ftr")
}

/// Simulates and writes one footprint and feature file per release, then
/// the manifest. Releases must be sorted by time; the first `n_train` form
/// the training split, the next `n_val` validation and the rest test.
pub fn generate_dataset(
    releases: &[Release],
    met: &MetField,
    cfg: &SimConfig,
    layout: &DatasetLayout,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    cfg.validate()?;
    if releases.windows(2).any(|w| w[1].time < w[0].time) {
        return Err(Error::invalid("releases must be ordered by time"));
    }
    if layout.n_train + layout.n_val > releases.len() {
        return Err(Error::invalid("split sizes exceed the number of releases"));
    }
    for r in releases {
        r.validate(&met.grid)?;
    }
    let boundary = |k: usize| -> Result<f64> {
        match (k.checked_sub(1).and_then(|p| releases.get(p)), releases.get(k)) {
            (Some(a), Some(b)) if a.time == b.time => Err(Error::invalid(format!(
                "split boundary at release {k} falls inside one overpass (time {})",
                a.time
            ))),
            (Some(a), Some(b)) => Ok(0.5 * (a.time + b.time)),
            (Some(a), None) => Ok(a.time + 1.0),
            (None, Some(b)) => Ok(b.time),
            (None, None) => Ok(0.0),
        }
    };
    let train_end = boundary(layout.n_train)?;
    let val_end = boundary(layout.n_train + layout.n_val)?.max(train_end);

    let entries: Vec<ManifestEntry> = releases
        .par_iter()
        .map(|r| -> Result<ManifestEntry> {
            let fp = simulate_footprint(r, met, cfg)?;
            let ft = extract_features(r, met, &layout.features)?;
            let entry = ManifestEntry {
                release: *r,
                footprint: footprint_file(r.id),
                features: feature_file(r.id),
            };
            write_fpg(&out_dir.join(&entry.footprint), &fp, layout.config_hash)?;
            write_ftr(&out_dir.join(&entry.features), &ft, layout.config_hash)?;
            Ok(entry)
        })
        .collect::<Result<_>>()?;

    let mut entries = entries.into_iter();
    let manifest = DatasetManifest {
        grid: met.grid,
        patch_side: layout.features.side,
        config_hash: format!("{:016x}", layout.config_hash),
        train_end,
        val_end,
        train: entries.by_ref().take(layout.n_train).collect(),
        validation: entries.by_ref().take(layout.n_val).collect(),
        test: entries.collect(),
    };
    manifest.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    manifest.save(&out_dir.join("manifest.json"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> GridSpec {
        GridSpec::new(20, 30, 0.0, 0.0, 0.3, 0.3).unwrap()
    }

    fn still(grid: GridSpec) -> MetField {
        MetField::uniform(grid, vec![100.0, 1000.0], vec![-200.0, 200.0], 0.0, 0.0).unwrap()
    }

    fn quiet() -> SimConfig {
        SimConfig {
            n_particles: 10,
            k_h: 0.0,
            sigma_w: 0.0,
            t_back_hours: 24.0,
            ..SimConfig::default()
        }
    }

    #[test]
    fn no_forcing_leaves_particle_in_place() {
        let met = still(grid());
        let p = ParticleState {
            lat: 3.0,
            lon: 4.0,
            z: 50.0,
            alive: true,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = step_particle(p, &met, 0.0, &quiet(), &mut rng);
        assert_eq!(p, q);
    }

    #[test]
    fn eastward_wind_moves_particle_west_six_km() {
        let g = grid();
        let met = MetField::uniform(g, vec![100.0], vec![-10.0, 10.0], 10.0, 0.0).unwrap();
        let p = ParticleState {
            lat: 0.0,
            lon: 4.5,
            z: 50.0,
            alive: true,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = step_particle(p, &met, 0.0, &quiet(), &mut rng);
        let moved_m = (q.lon - p.lon) * METERS_PER_DEG_LAT;
        assert!((moved_m + 6000.0).abs() < 1e-6, "{moved_m}");
        assert_eq!(q.lat, p.lat);
    }

    #[test]
    fn reflection_at_boundaries() {
        assert_eq!(reflect(-1.0, 2000.0), 1.0);
        assert_eq!(reflect(2001.0, 2000.0), 1999.0);
        assert_eq!(reflect(500.0, 2000.0), 500.0);
        assert_eq!(reflect(-4001.0, 2000.0), 1.0);
    }

    #[test]
    fn dead_particles_pass_through() {
        let met = still(grid());
        let p = ParticleState {
            lat: 100.0,
            lon: 100.0,
            z: 5.0,
            alive: false,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(step_particle(p, &met, 0.0, &SimConfig::default(), &mut rng), p);
    }

    #[test]
    fn stationary_release_concentrates_all_mass() {
        let g = grid();
        let met = still(g);
        let cfg = quiet();
        let r = Release {
            id: 3,
            lat: g.lat_of(7),
            lon: g.lon_of(11),
            altitude: 50.0,
            time: 0.0,
        };
        let fp = simulate_footprint(&r, &met, &cfg).unwrap();
        let k = g.index(7, 11);
        assert!((fp.values[k] - 24.0 * 3600.0).abs() < 1e-6);
        assert!(fp.values.iter().enumerate().all(|(i, &v)| i == k || v == 0.0));
    }

    #[test]
    fn release_above_contact_layer_without_mixing_leaves_no_trace() {
        let g = grid();
        let r = Release {
            id: 3,
            lat: g.lat_of(7),
            lon: g.lon_of(11),
            altitude: 500.0,
            time: 0.0,
        };
        let fp = simulate_footprint(&r, &still(g), &quiet()).unwrap();
        assert_eq!(fp.total(), 0.0);
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let g = grid();
        let met = MetField::uniform(g, vec![100.0], vec![-100.0, 10.0], 3.0, -1.0).unwrap();
        let cfg = SimConfig {
            n_particles: 50,
            t_back_hours: 12.0,
            ..SimConfig::default()
        };
        let r = Release {
            id: 1,
            lat: g.lat_of(10),
            lon: g.lon_of(15),
            altitude: 20.0,
            time: 0.0,
        };
        let a = simulate_footprint(&r, &met, &cfg).unwrap();
        let b = simulate_footprint(&r, &met, &cfg).unwrap();
        assert_eq!(a, b);
        let c = simulate_footprint(&r, &met, &SimConfig { seed: 99, ..cfg }).unwrap();
        assert_ne!(a.values, c.values);
    }

    #[test]
    fn outside_release_rejected() {
        let g = grid();
        let r = Release {
            id: 1,
            lat: -10.0,
            lon: 0.0,
            altitude: 20.0,
            time: 0.0,
        };
        assert!(matches!(
            simulate_footprint(&r, &still(g), &quiet()),
            Err(Error::OutsideDomain { .. })
        ));
    }

    #[test]
    fn releases_are_time_ordered_and_inside() {
        let g = GridSpec::default();
        let rs = generate_releases(&ReleaseConfig::default(), &g, 72.0).unwrap();
        assert_eq!(rs.len(), 1000);
        assert!(rs.windows(2).all(|w| w[0].time <= w[1].time));
        assert!(rs.iter().all(|r| r.validate(&g).is_ok()));
        assert_eq!(rs[0].time, 72.0);
    }
}
