//! Seeded analytic meteorology.
//!
//! Winds are a height-sheared mean zonal flow plus a sum of travelling
//! harmonic modes derived from a streamfunction, so the perturbation part is
//! divergence-free in (lon, lat) degree coordinates. Everything is a pure
//! function of the config, grid and time range.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{GridSpec, Release};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetConfig {
    pub seed: u64,
    /// Mean zonal wind at the reference height, m/s. Negative is easterly.
    pub base_zonal: f64,
    /// Upper bound on the summed perturbation speed at the reference height, m/s.
    pub perturbation_amplitude: f64,
    pub n_modes: usize,
    /// Central period of the travelling modes, hours.
    pub period_hours: f64,
    pub shear_exponent: f64,
    pub reference_height: f64,
    pub n_levels: usize,
    pub level_bottom: f64,
    pub level_top: f64,
    pub time_step_hours: f64,
    /// Hard bound applied to each wind component.
    pub max_wind: f64,
}

impl Default for MetConfig {
    fn default() -> Self {
        MetConfig {
            seed: 2016,
            base_zonal: -6.0,
            perturbation_amplitude: 7.0,
            n_modes: 4,
            period_hours: 96.0,
            shear_exponent: 0.2,
            reference_height: 1000.0,
            n_levels: 7,
            level_bottom: 100.0,
            level_top: 18_000.0,
            time_step_hours: 6.0,
            max_wind: 60.0,
        }
    }
}

impl MetConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.perturbation_amplitude >= 0.0) {
            return Err(Error::invalid("perturbation_amplitude must be >= 0"));
        }
        if !(self.period_hours > 0.0) || !(self.time_step_hours > 0.0) {
            return Err(Error::invalid("period_hours and time_step_hours must be > 0"));
        }
        if self.n_levels == 0 || !(self.level_bottom > 0.0) || self.level_top < self.level_bottom {
            return Err(Error::invalid("levels must be positive and increasing"));
        }
        if self.n_levels > 1 && self.level_top == self.level_bottom {
            return Err(Error::invalid("levels must be strictly increasing"));
        }
        if !(self.reference_height > 0.0) || !(self.max_wind > 0.0) {
            return Err(Error::invalid("reference_height and max_wind must be > 0"));
        }
        Ok(())
    }

    /// Log-spaced level heights from `level_bottom` to `level_top`.
    pub fn levels(&self) -> Vec<f64> {
        if self.n_levels == 1 {
            return vec![self.level_bottom];
        }
        let (a, b) = (self.level_bottom.ln(), self.level_top.ln());
        (0..self.n_levels)
            .map(|k| {
                if k == 0 {
                    self.level_bottom
                } else if k + 1 == self.n_levels {
                    self.level_top
                } else {
                    (a + (b - a) * k as f64 / (self.n_levels - 1) as f64).exp()
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Mode {
    kx: f64,
    ky: f64,
    amplitude: f64,
    omega: f64,
    phase: f64,
    vertical_phase: f64,
}

/// Gridded winds on (time, level, lat, lon) with surface statics.
#[derive(Debug, Clone, PartialEq)]
pub struct MetField {
    pub grid: GridSpec,
    pub levels: Vec<f64>,
    pub times: Vec<f64>,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    /// Terrain height, m.
    pub terrain: Vec<f64>,
    /// 1 over land, 0 over sea.
    pub land_mask: Vec<f64>,
    ln_levels: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfaceWind {
    pub speed: f64,
    /// Direction the wind blows from, degrees clockwise from north.
    pub direction: f64,
    pub calm: bool,
}

impl MetField {
    pub fn from_parts(
        grid: GridSpec,
        levels: Vec<f64>,
        times: Vec<f64>,
        u: Vec<f64>,
        v: Vec<f64>,
        terrain: Vec<f64>,
        land_mask: Vec<f64>,
    ) -> Result<Self> {
        grid.validate()?;
        if levels.is_empty() || times.is_empty() {
            return Err(Error::invalid("met field needs at least one level and one time"));
        }
        if levels.windows(2).any(|w| w[1] <= w[0]) || levels[0] <= 0.0 {
            return Err(Error::invalid("levels must be positive and strictly increasing"));
        }
        if times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::invalid("times must be strictly increasing"));
        }
        let n = times.len() * levels.len() * grid.len();
        crate::error::ensure_len("met u", n, u.len())?;
        crate::error::ensure_len("met v", n, v.len())?;
        crate::error::ensure_len("met terrain", grid.len(), terrain.len())?;
        crate::error::ensure_len("met land mask", grid.len(), land_mask.len())?;
        if let Some(index) = u.iter().chain(&v).position(|x| !x.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        let ln_levels = levels.iter().map(|z| z.ln()).collect();
        Ok(MetField {
            grid,
            levels,
            times,
            u,
            v,
            terrain,
            land_mask,
            ln_levels,
        })
    }

    /// A field with the same wind vector everywhere.
    pub fn uniform(grid: GridSpec, levels: Vec<f64>, times: Vec<f64>, u: f64, v: f64) -> Result<Self> {
        let n = times.len() * levels.len() * grid.len();
        MetField::from_parts(
            grid,
            levels,
            times,
            vec![u; n],
            vec![v; n],
            vec![0.0; grid.len()],
            vec![1.0; grid.len()],
        )
    }

    pub fn offset(&self, t: usize, l: usize, i: usize, j: usize) -> usize {
        ((t * self.levels.len() + l) * self.grid.n_lat + i) * self.grid.n_lon + j
    }

    pub fn time_range(&self) -> (f64, f64) {
        (self.times[0], *self.times.last().unwrap())
    }

    /// Interpolated wind at a position; errors when outside the grid.
    pub fn wind_at(&self, lat: f64, lon: f64, height: f64, time: f64) -> Result<(f64, f64)> {
        if !self.grid.contains(lat, lon) || !height.is_finite() || !time.is_finite() {
            return Err(Error::OutsideDomain { lat, lon });
        }
        Ok(self.sample(self.grid.row_coord(lat), self.grid.col_coord(lon), height, time))
    }

    /// Interpolation at fractional grid coordinates. Horizontal coordinates,
    /// height and time are clamped to the stored ranges.
    pub(crate) fn sample(&self, row: f64, col: f64, height: f64, time: f64) -> (f64, f64) {
        let (i0, i1, fi) = bracket_index(row, self.grid.n_lat);
        let (j0, j1, fj) = bracket_index(col, self.grid.n_lon);
        let (l0, l1, fl) = bracket_sorted(&self.ln_levels, height.max(self.levels[0]).ln());
        let (t0, t1, ft) = bracket_sorted(&self.times, time);

        let mut u = 0.0;
        let mut v = 0.0;
        for (t, wt) in [(t0, 1.0 - ft), (t1, ft)] {
            if wt == 0.0 {
                continue;
            }
            for (l, wl) in [(l0, 1.0 - fl), (l1, fl)] {
                if wl == 0.0 {
                    continue;
                }
                let w = wt * wl;
                let a = self.offset(t, l, i0, j0);
                let b = self.offset(t, l, i0, j1);
                let c = self.offset(t, l, i1, j0);
                let d = self.offset(t, l, i1, j1);
                let bl = |f: &[f64]| {
                    let lo = f[a] + fj * (f[b] - f[a]);
                    let hi = f[c] + fj * (f[d] - f[c]);
                    lo + fi * (hi - lo)
                };
                u += w * bl(&self.u);
                v += w * bl(&self.v);
            }
        }
        (u, v)
    }

    pub fn surface_wind(&self, release: &Release) -> Result<SurfaceWind> {
        let (u, v) = self.wind_at(release.lat, release.lon, self.levels[0], release.time)?;
        Ok(wind_direction(u, v))
    }

    pub fn static_at(&self, field: &[f64], row: f64, col: f64) -> f64 {
        let (i0, i1, fi) = bracket_index(row, self.grid.n_lat);
        let (j0, j1, fj) = bracket_index(col, self.grid.n_lon);
        let g = &self.grid;
        let lo = field[g.index(i0, j0)] + fj * (field[g.index(i0, j1)] - field[g.index(i0, j0)]);
        let hi = field[g.index(i1, j0)] + fj * (field[g.index(i1, j1)] - field[g.index(i1, j0)]);
        lo + fi * (hi - lo)
    }
}

/// Meteorological speed/direction from wind components.
pub fn wind_direction(u: f64, v: f64) -> SurfaceWind {
    let speed = u.hypot(v);
    if speed == 0.0 {
        return SurfaceWind {
            speed,
            direction: 0.0,
            calm: true,
        };
    }
    let mut direction = (-u).atan2(-v).to_degrees();
    if direction < 0.0 {
        direction += 360.0;
    }
    if direction >= 360.0 {
        direction -= 360.0;
    }
    SurfaceWind {
        speed,
        direction,
        calm: false,
    }
}

fn bracket_index(x: f64, n: usize) -> (usize, usize, f64) {
    if n == 1 {
        return (0, 0, 0.0);
    }
    let x = x.clamp(0.0, (n - 1) as f64);
    let lo = (x.floor() as usize).min(n - 2);
    (lo, lo + 1, x - lo as f64)
}

fn bracket_sorted(knots: &[f64], x: f64) -> (usize, usize, f64) {
    let n = knots.len();
    if n == 1 || x <= knots[0] {
        return (0, 0, 0.0);
    }
    if x >= knots[n - 1] {
        return (n - 1, n - 1, 0.0);
    }
    let hi = knots.partition_point(|&k| k <= x).min(n - 1);
    let lo = hi - 1;
    (lo, hi, (x - knots[lo]) / (knots[hi] - knots[lo]))
}

fn draw_modes(config: &MetConfig, grid: &GridSpec) -> Vec<Mode> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let extent = (grid.n_lat as f64 * grid.d_lat).max(grid.n_lon as f64 * grid.d_lon);
    let mut modes: Vec<Mode> = (0..config.n_modes)
        .map(|_| {
            let wavelength = extent * rng.random_range(0.5..1.5);
            let theta = rng.random_range(0.0..std::f64::consts::TAU);
            let k = std::f64::consts::TAU / wavelength;
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            Mode {
                kx: k * theta.cos(),
                ky: k * theta.sin(),
                amplitude: rng.random_range(0.5..1.0),
                omega: sign * std::f64::consts::TAU / config.period_hours * rng.random_range(0.5..1.5),
                phase: rng.random_range(0.0..std::f64::consts::TAU),
                vertical_phase: rng.random_range(-0.5..0.5),
            }
        })
        .collect();
    let total: f64 = modes.iter().map(|m| m.amplitude).sum();
    for m in &mut modes {
        m.amplitude *= config.perturbation_amplitude / total;
    }
    modes
}

/// Perturbation wind of the modes at a point, before height scaling.
fn perturbation(modes: &[Mode], x: f64, y: f64, t: f64, ln_z: f64) -> (f64, f64) {
    let mut u = 0.0;
    let mut v = 0.0;
    for m in modes {
        let k = m.kx.hypot(m.ky);
        let c = (m.kx * x + m.ky * y - m.omega * t + m.phase + m.vertical_phase * ln_z).cos();
        // psi = (a / k) sin(.), u = -d(psi)/dy, v = d(psi)/dx
        u -= m.amplitude * m.ky / k * c;
        v += m.amplitude * m.kx / k * c;
    }
    (u, v)
}

pub fn generate_met(config: &MetConfig, grid: &GridSpec, time_range: (f64, f64)) -> Result<MetField> {
    config.validate()?;
    grid.validate()?;
    let (start, end) = time_range;
    if !(start.is_finite() && end.is_finite()) || end < start {
        return Err(Error::invalid(format!("empty time range [{start}, {end}]")));
    }
    let mut times = vec![start];
    while *times.last().unwrap() < end {
        let next = start + times.len() as f64 * config.time_step_hours;
        times.push(next);
    }
    let levels = config.levels();
    let modes = draw_modes(config, grid);
    let lat_c = grid.lat_of(0) + 0.5 * (grid.n_lat - 1) as f64 * grid.d_lat;
    let lon_c = grid.lon_of(0) + 0.5 * (grid.n_lon - 1) as f64 * grid.d_lon;

    let n = times.len() * levels.len() * grid.len();
    let mut u = Vec::with_capacity(n);
    let mut v = Vec::with_capacity(n);
    for &t in &times {
        for &z in &levels {
            let scale = (z / config.reference_height).powf(config.shear_exponent);
            let ln_z = (z / config.reference_height).ln();
            for i in 0..grid.n_lat {
                let y = grid.lat_of(i) - lat_c;
                for j in 0..grid.n_lon {
                    let x = grid.lon_of(j) - lon_c;
                    let (pu, pv) = perturbation(&modes, x, y, t, ln_z);
                    u.push(((config.base_zonal + pu) * scale).clamp(-config.max_wind, config.max_wind));
                    v.push((pv * scale).clamp(-config.max_wind, config.max_wind));
                }
            }
        }
    }

    let (terrain, land_mask) = generate_statics(config.seed, grid);
    MetField::from_parts(*grid, levels, times, u, v, terrain, land_mask)
}

/// Terrain with a western ridge and scattered hills; sea along the eastern edge.
fn generate_statics(seed: u64, grid: &GridSpec) -> (Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5a7a_11c5);
    let coast_phase = rng.random_range(0.0..std::f64::consts::TAU);
    let ridge_col = grid.n_lon as f64 * rng.random_range(0.1..0.2);
    let hills: Vec<(f64, f64, f64, f64)> = (0..6)
        .map(|_| {
            (
                rng.random_range(0.0..grid.n_lat as f64),
                rng.random_range(0.0..grid.n_lon as f64),
                rng.random_range(2.0..6.0),
                rng.random_range(200.0..900.0),
            )
        })
        .collect();
    let mut terrain = vec![0.0; grid.len()];
    let mut land = vec![0.0; grid.len()];
    for i in 0..grid.n_lat {
        let coast = grid.n_lon as f64 * (0.8 + 0.06 * (std::f64::consts::TAU * i as f64 / grid.n_lat as f64 + coast_phase).sin());
        for j in 0..grid.n_lon {
            let k = grid.index(i, j);
            if (j as f64) >= coast {
                continue;
            }
            land[k] = 1.0;
            let ridge = 3500.0 * (-((j as f64 - ridge_col) / 3.0).powi(2)).exp();
            let bumps: f64 = hills
                .iter()
                .map(|&(hi, hj, w, h)| h * (-((i as f64 - hi).powi(2) + (j as f64 - hj).powi(2)) / (2.0 * w * w)).exp())
                .sum();
            terrain[k] = ridge + bumps;
        }
    }
    (terrain, land)
}
