//! Grid geometry and the field types shared by every pipeline stage.
//!
//! Grids are regular latitude/longitude lattices addressed by cell
//! centers. Row 0 is the southernmost row and values are stored row-major.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Offset added before taking the logarithm of a sensitivity.
pub const DEFAULT_EPS_LOG: f64 = 1e-9;

/// Side length of the square window the emulator operates on.
pub const DEFAULT_PATCH_SIDE: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSpec {
    pub n_lat: usize,
    pub n_lon: usize,
    /// Latitude of the center of row 0.
    pub lat0: f64,
    /// Longitude of the center of column 0.
    pub lon0: f64,
    pub d_lat: f64,
    pub d_lon: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            n_lat: 64,
            n_lon: 64,
            lat0: -20.0,
            lon0: -70.0,
            d_lat: 0.3,
            d_lon: 0.3,
        }
    }
}

impl GridSpec {
    pub fn new(n_lat: usize, n_lon: usize, lat0: f64, lon0: f64, d_lat: f64, d_lon: f64) -> Result<Self> {
        let grid = GridSpec {
            n_lat,
            n_lon,
            lat0,
            lon0,
            d_lat,
            d_lon,
        };
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_lat == 0 || self.n_lon == 0 {
            return Err(Error::invalid("grid must have at least one cell in each direction"));
        }
        if !(self.d_lat > 0.0 && self.d_lon > 0.0) {
            return Err(Error::invalid("grid spacing must be positive"));
        }
        if !(self.lat0.is_finite() && self.lon0.is_finite()) {
            return Err(Error::invalid("grid origin must be finite"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.n_lat * self.n_lon
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, i: usize, j: usize) -> usize {
        i * self.n_lon + j
    }

    pub fn lat_of(&self, i: usize) -> f64 {
        self.lat0 + i as f64 * self.d_lat
    }

    pub fn lon_of(&self, j: usize) -> f64 {
        self.lon0 + j as f64 * self.d_lon
    }

    /// Fractional row coordinate of a latitude (0.0 at the center of row 0).
    pub fn row_coord(&self, lat: f64) -> f64 {
        (lat - self.lat0) / self.d_lat
    }

    pub fn col_coord(&self, lon: f64) -> f64 {
        (lon - self.lon0) / self.d_lon
    }

    /// Cell containing a position; cells extend half a spacing either side
    /// of their center.
    pub fn cell_of(&self, lat: f64, lon: f64) -> Option<(usize, usize)> {
        let r = (self.row_coord(lat) + 0.5).floor();
        let c = (self.col_coord(lon) + 0.5).floor();
        if r >= 0.0 && c >= 0.0 && (r as usize) < self.n_lat && (c as usize) < self.n_lon {
            Some((r as usize, c as usize))
        } else {
            None
        }
    }

    pub fn contains(&self, lat: f64, lon: f64) -> bool {
        self.cell_of(lat, lon).is_some()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Release {
    pub id: u64,
    pub lat: f64,
    pub lon: f64,
    /// Meters above the surface.
    pub altitude: f64,
    /// Hours since the start of the run.
    pub time: f64,
}

impl Release {
    pub fn validate(&self, grid: &GridSpec) -> Result<(usize, usize)> {
        if !(self.altitude >= 0.0 && self.altitude.is_finite()) {
            return Err(Error::invalid(format!("release {} has invalid altitude {}", self.id, self.altitude)));
        }
        if !self.time.is_finite() {
            return Err(Error::invalid(format!("release {} has non-finite time", self.id)));
        }
        grid.cell_of(self.lat, self.lon).ok_or(Error::OutsideDomain {
            lat: self.lat,
            lon: self.lon,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Space {
    Linear,
    Log,
    /// Linear units, sign allowed (differences such as prediction errors).
    Signed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Footprint {
    pub grid: GridSpec,
    pub release: Release,
    pub values: Vec<f64>,
    pub space: Space,
}

impl Footprint {
    pub fn new(grid: GridSpec, release: Release, values: Vec<f64>, space: Space) -> Result<Self> {
        crate::error::ensure_len("footprint values", grid.len(), values.len())?;
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        if space == Space::Linear {
            if let Some(index) = values.iter().position(|&v| v < 0.0) {
                return Err(Error::Negative {
                    index,
                    value: values[index],
                });
            }
        }
        Ok(Footprint {
            grid,
            release,
            values,
            space,
        })
    }

    pub fn zeros(grid: GridSpec, release: Release) -> Self {
        Footprint {
            grid,
            release,
            values: vec![0.0; grid.len()],
            space: Space::Linear,
        }
    }

    pub fn total(&self) -> f64 {
        self.values.iter().sum()
    }

    /// `ln(s + eps_log)` per cell.
    pub fn log_transform(&self, eps_log: f64) -> Result<Footprint> {
        if self.space != Space::Linear {
            return Err(Error::invalid("log_transform expects a linear-space footprint"));
        }
        Ok(Footprint {
            values: log_values(&self.values, eps_log)?,
            space: Space::Log,
            ..self.clone()
        })
    }

    /// `max(exp(t) - eps_log, 0)` per cell.
    pub fn inverse_log_transform(&self, eps_log: f64) -> Result<Footprint> {
        if self.space != Space::Log {
            return Err(Error::invalid("inverse_log_transform expects a log-space footprint"));
        }
        Ok(Footprint {
            values: exp_values(&self.values, eps_log)?,
            space: Space::Linear,
            ..self.clone()
        })
    }

    pub fn crop_patch(&self, side: usize) -> Result<Patch> {
        crop_patch(&self.values, &self.grid, &self.release, side)
    }
}

pub fn log_values(values: &[f64], eps_log: f64) -> Result<Vec<f64>> {
    if !(eps_log > 0.0) {
        return Err(Error::invalid("eps_log must be positive"));
    }
    values
        .iter()
        .enumerate()
        .map(|(index, &s)| {
            if !s.is_finite() {
                Err(Error::NonFinite { index })
            } else if s < 0.0 {
                Err(Error::Negative { index, value: s })
            } else {
                Ok((s + eps_log).ln())
            }
        })
        .collect()
}

const ZERO_SNAP: f64 = 8.0 * f64::EPSILON;

pub fn exp_values(values: &[f64], eps_log: f64) -> Result<Vec<f64>> {
    if !(eps_log > 0.0) {
        return Err(Error::invalid("eps_log must be positive"));
    }
    values
        .iter()
        .enumerate()
        .map(|(index, &t)| {
            if t.is_finite() {
                let s = t.exp() - eps_log;
                // rounding residue of exp(ln(eps_log)) counts as zero
                Ok(if s <= eps_log * ZERO_SNAP { 0.0 } else { s })
            } else {
                Err(Error::NonFinite { index })
            }
        })
        .collect()
}

/// A square window of a parent grid centered on a release cell.
///
/// The release cell sits at patch index `(side / 2, side / 2)`, so for even
/// sides the extra row and column fall on the low-index side.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub side: usize,
    /// Parent-grid (row, col) of patch cell (0, 0); may be negative.
    pub origin: (isize, isize),
    pub values: Vec<f64>,
    /// `true` where the patch cell lies inside the parent grid.
    pub in_domain: Vec<bool>,
}

impl Patch {
    pub fn window(grid: &GridSpec, release: &Release, side: usize) -> Result<(isize, isize)> {
        if side == 0 {
            return Err(Error::invalid("patch side must be at least 1"));
        }
        let (ri, rj) = release.validate(grid)?;
        let half = (side / 2) as isize;
        Ok((ri as isize - half, rj as isize - half))
    }

    /// Parent (row, col) of a patch cell, if it lies inside the grid.
    pub fn parent_cell(&self, grid: &GridSpec, pr: usize, pc: usize) -> Option<(usize, usize)> {
        parent_cell(grid, self.origin, pr, pc)
    }

    pub fn zero_filled(&self) -> usize {
        self.in_domain.iter().filter(|&&m| !m).count()
    }
}

fn parent_cell(grid: &GridSpec, origin: (isize, isize), pr: usize, pc: usize) -> Option<(usize, usize)> {
    let i = origin.0 + pr as isize;
    let j = origin.1 + pc as isize;
    if i >= 0 && j >= 0 && (i as usize) < grid.n_lat && (j as usize) < grid.n_lon {
        Some((i as usize, j as usize))
    } else {
        None
    }
}

pub fn crop_patch(values: &[f64], grid: &GridSpec, release: &Release, side: usize) -> Result<Patch> {
    crate::error::ensure_len("crop_patch parent field", grid.len(), values.len())?;
    let origin = Patch::window(grid, release, side)?;
    let mut out = vec![0.0; side * side];
    let mut in_domain = vec![false; side * side];
    for pr in 0..side {
        for pc in 0..side {
            if let Some((i, j)) = parent_cell(grid, origin, pr, pc) {
                out[pr * side + pc] = values[grid.index(i, j)];
                in_domain[pr * side + pc] = true;
            }
        }
    }
    Ok(Patch {
        side,
        origin,
        values: out,
        in_domain,
    })
}

/// Writes the in-domain patch cells back onto a zeroed parent grid.
pub fn embed_patch(patch: &Patch, grid: &GridSpec) -> Result<Vec<f64>> {
    let n = patch.side * patch.side;
    crate::error::ensure_len("patch values", n, patch.values.len())?;
    crate::error::ensure_len("patch mask", n, patch.in_domain.len())?;
    let mut out = vec![0.0; grid.len()];
    let mut overlap = 0usize;
    for pr in 0..patch.side {
        for pc in 0..patch.side {
            let k = pr * patch.side + pc;
            match patch.parent_cell(grid, pr, pc) {
                Some((i, j)) => {
                    if !patch.in_domain[k] {
                        return Err(Error::invalid(format!(
                            "patch mask disagrees with offset {:?} at patch cell ({pr}, {pc})",
                            patch.origin
                        )));
                    }
                    out[grid.index(i, j)] = patch.values[k];
                    overlap += 1;
                }
                None => {
                    if patch.in_domain[k] {
                        return Err(Error::invalid(format!(
                            "patch offset {:?} places in-domain cell ({pr}, {pc}) outside the grid",
                            patch.origin
                        )));
                    }
                }
            }
        }
    }
    if overlap == 0 {
        return Err(Error::invalid(format!("patch offset {:?} does not overlap the grid", patch.origin)));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FluxField {
    pub grid: GridSpec,
    pub values: Vec<f64>,
}

impl FluxField {
    pub fn new(grid: GridSpec, values: Vec<f64>) -> Result<Self> {
        crate::error::ensure_len("flux values", grid.len(), values.len())?;
        for (index, &v) in values.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFinite { index });
            }
            if v < 0.0 {
                return Err(Error::Negative { index, value: v });
            }
        }
        Ok(FluxField { grid, values })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub release: Release,
    /// Footprint file, relative to the manifest directory.
    pub footprint: String,
    /// Feature file, relative to the manifest directory.
    pub features: String,
}

/// Time-ordered train/validation/test listing of generated samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub grid: GridSpec,
    pub patch_side: usize,
    pub config_hash: String,
    /// Releases strictly before this time belong to the training split.
    pub train_end: f64,
    /// Releases strictly before this time (and not in training) belong to validation.
    pub val_end: f64,
    pub train: Vec<ManifestEntry>,
    pub validation: Vec<ManifestEntry>,
    pub test: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl DatasetManifest {
    pub fn split(&self, split: Split) -> &[ManifestEntry] {
        match split {
            Split::Train => &self.train,
            Split::Validation => &self.validation,
            Split::Test => &self.test,
        }
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.validation.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Checks that the splits are disjoint and ordered in time.
    pub fn validate(&self) -> Result<()> {
        let max = |s: &[ManifestEntry]| s.iter().map(|e| e.release.time).fold(f64::NEG_INFINITY, f64::max);
        let min = |s: &[ManifestEntry]| s.iter().map(|e| e.release.time).fold(f64::INFINITY, f64::min);
        if max(&self.train) >= self.train_end || min(&self.validation) < self.train_end {
            return Err(Error::invalid("training split overlaps validation in time"));
        }
        if max(&self.validation) >= self.val_end || min(&self.test) < self.val_end {
            return Err(Error::invalid("validation split overlaps test in time"));
        }
        if max(&self.train) >= min(&self.validation) && !self.validation.is_empty() && !self.train.is_empty() {
            return Err(Error::invalid("train times must precede validation times"));
        }
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })?;
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn release_at(grid: &GridSpec, i: usize, j: usize) -> Release {
        Release {
            id: 1,
            lat: grid.lat_of(i),
            lon: grid.lon_of(j),
            altitude: 50.0,
            time: 0.0,
        }
    }

    #[test]
    fn log_of_zero_matches_offset() {
        let v = log_values(&[0.0], 1e-9).unwrap();
        assert!((v[0] - (-20.723265836946414)).abs() < 1e-12);
    }

    #[test]
    fn inverse_log_examples() {
        let s = exp_values(&[1e-9f64.ln(), 0.0, -40.0], 1e-9).unwrap();
        assert_eq!(s[0], 0.0);
        assert!((s[1] - (1.0 - 1e-9)).abs() < 1e-15);
        assert_eq!(s[2], 0.0);
    }

    #[test]
    fn log_transform_rejects_negative_with_index() {
        match log_values(&[1.0, -0.5], 1e-9) {
            Err(Error::Negative { index, .. }) => assert_eq!(index, 1),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(log_values(&[f64::NAN], 1e-9), Err(Error::NonFinite { index: 0 })));
        assert!(exp_values(&[f64::INFINITY], 1e-9).is_err());
    }

    #[test]
    fn footprint_space_flag_round_trips() {
        let grid = GridSpec::new(2, 2, 0.0, 0.0, 1.0, 1.0).unwrap();
        let fp = Footprint::new(grid, release_at(&grid, 0, 0), vec![0.0, 1.0, 2.5, 1e-3], Space::Linear).unwrap();
        let log = fp.log_transform(DEFAULT_EPS_LOG).unwrap();
        assert_eq!(log.space, Space::Log);
        assert!(log.log_transform(DEFAULT_EPS_LOG).is_err());
        let back = log.inverse_log_transform(DEFAULT_EPS_LOG).unwrap();
        for (a, b) in fp.values.iter().zip(&back.values) {
            assert!((a - b).abs() <= 1e-12 * a.abs().max(1e-9));
        }
    }

    #[test]
    fn grid_index_round_trip() {
        let grid = GridSpec::default();
        for i in 0..grid.n_lat {
            for j in 0..grid.n_lon {
                assert_eq!(grid.cell_of(grid.lat_of(i), grid.lon_of(j)), Some((i, j)));
            }
        }
        assert_eq!(grid.cell_of(grid.lat0 - 0.2, grid.lon0), None);
    }

    #[test]
    fn interior_patch_has_no_fill() {
        let grid = GridSpec::default();
        let values: Vec<f64> = (0..grid.len()).map(|k| k as f64).collect();
        let p = crop_patch(&values, &grid, &release_at(&grid, 32, 32), 50).unwrap();
        assert_eq!(p.zero_filled(), 0);
        assert!(p.in_domain.iter().all(|&m| m));
        assert_eq!(p.origin, (7, 7));
        // release cell at (side/2, side/2)
        assert_eq!(p.values[25 * 50 + 25], grid.index(32, 32) as f64);
    }

    #[test]
    fn corner_patch_counts() {
        let grid = GridSpec::default();
        let values = vec![1.0; grid.len()];
        let p = crop_patch(&values, &grid, &release_at(&grid, 0, 0), 50).unwrap();
        // brute-force count of out-of-grid cells
        let mut expected = 0;
        for pr in 0..50isize {
            for pc in 0..50isize {
                let (i, j) = (pr - 25, pc - 25);
                if i < 0 || j < 0 || i >= 64 || j >= 64 {
                    expected += 1;
                }
            }
        }
        assert_eq!(expected, 1875);
        assert_eq!(p.zero_filled(), 1875);
        assert_eq!(p.values.iter().sum::<f64>(), 625.0);
        let embedded = embed_patch(&p, &grid).unwrap();
        let placed = embedded.iter().filter(|&&v| v != 0.0).count();
        assert_eq!(placed, 625);
        for i in 0..25 {
            for j in 0..25 {
                assert_eq!(embedded[grid.index(i, j)], 1.0);
            }
        }
    }

    #[test]
    fn crop_preserves_window_mass_and_embed_inverts() {
        let grid = GridSpec::new(30, 40, 0.0, 0.0, 0.5, 0.5).unwrap();
        let values: Vec<f64> = (0..grid.len()).map(|k| ((k * 37) % 11) as f64 * 0.25).collect();
        let rel = release_at(&grid, 3, 36);
        let p = crop_patch(&values, &grid, &rel, 16).unwrap();
        let mut window_mass = 0.0;
        for pr in 0..16 {
            for pc in 0..16 {
                if let Some((i, j)) = p.parent_cell(&grid, pr, pc) {
                    window_mass += values[grid.index(i, j)];
                }
            }
        }
        assert_eq!(p.values.iter().sum::<f64>(), window_mass);
        let back = embed_patch(&p, &grid).unwrap();
        for pr in 0..16 {
            for pc in 0..16 {
                if let Some((i, j)) = p.parent_cell(&grid, pr, pc) {
                    assert_eq!(back[grid.index(i, j)], values[grid.index(i, j)]);
                }
            }
        }
    }

    #[test]
    fn zero_patch_embeds_to_zero_grid() {
        let grid = GridSpec::default();
        let p = crop_patch(&vec![0.0; grid.len()], &grid, &release_at(&grid, 10, 50), 50).unwrap();
        assert!(embed_patch(&p, &grid).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn crop_rejects_outside_release() {
        let grid = GridSpec::default();
        let mut rel = release_at(&grid, 0, 0);
        rel.lat -= 5.0;
        assert!(matches!(
            crop_patch(&vec![0.0; grid.len()], &grid, &rel, 50),
            Err(Error::OutsideDomain { .. })
        ));
    }

    #[test]
    fn embed_rejects_inconsistent_offset() {
        let grid = GridSpec::default();
        let mut p = crop_patch(&vec![1.0; grid.len()], &grid, &release_at(&grid, 0, 0), 50).unwrap();
        p.origin = (-100, -100);
        assert!(embed_patch(&p, &grid).is_err());
    }
}
