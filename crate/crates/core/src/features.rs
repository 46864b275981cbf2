//! Per-cell input channels for the emulator.
//!
//! Channel order is variables-major, then level, then lag, followed by the
//! static channels in the order listed in [`FeatureSpec::statics`].

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::domain::{GridSpec, Patch, Release, DEFAULT_PATCH_SIDE};
use crate::error::{Error, Result};
use crate::synthmet::{MetConfig, MetField};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variable {
    U,
    V,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StaticChannel {
    Terrain,
    LandMask,
    BearingSin,
    BearingCos,
    Distance,
    ReleaseCell,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureSpec {
    pub side: usize,
    /// Heights (m) at which winds are sampled.
    pub levels: Vec<f64>,
    /// Hours relative to the release time.
    pub lags: Vec<f64>,
    pub variables: Vec<Variable>,
    pub statics: Vec<StaticChannel>,
}

impl Default for FeatureSpec {
    fn default() -> Self {
        FeatureSpec {
            side: DEFAULT_PATCH_SIDE,
            levels: MetConfig::default().levels(),
            lags: vec![0.0, -6.0, -12.0],
            variables: vec![Variable::U, Variable::V],
            statics: vec![
                StaticChannel::Terrain,
                StaticChannel::BearingSin,
                StaticChannel::BearingCos,
                StaticChannel::Distance,
                StaticChannel::ReleaseCell,
            ],
        }
    }
}

impl FeatureSpec {
    pub fn channels(&self) -> usize {
        self.variables.len() * self.levels.len() * self.lags.len() + self.statics.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.side == 0 {
            return Err(Error::invalid("feature patch side must be >= 1"));
        }
        if self.channels() == 0 {
            return Err(Error::invalid("feature spec has no channels"));
        }
        Ok(())
    }

    pub fn channel_names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(self.channels());
        for var in &self.variables {
            for z in &self.levels {
                for lag in &self.lags {
                    names.push(format!("{var:?}@{z:.1}m@{lag:+.1}h"));
                }
            }
        }
        names.extend(self.statics.iter().map(|s| format!("{s:?}")));
        names
    }

    /// Hash of the ordered channel names; checkpoints and feature files
    /// carry it so mismatched layouts are detected.
    pub fn channel_hash(&self) -> u64 {
        let mut h = Sha256::new();
        h.update(self.side.to_le_bytes());
        for n in self.channel_names() {
            h.update(n.as_bytes());
            h.update([0u8]);
        }
        let d = h.finalize();
        u64::from_le_bytes(d[..8].try_into().unwrap())
    }
}

/// `side × side` cells with `channels` contiguous values per cell.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTensor {
    pub side: usize,
    pub channels: usize,
    pub channel_hash: u64,
    pub release_id: u64,
    pub data: Vec<f32>,
}

impl FeatureTensor {
    pub fn cells(&self) -> usize {
        self.side * self.side
    }

    pub fn channel(&self, c: usize) -> impl Iterator<Item = f32> + '_ {
        self.data.iter().skip(c).step_by(self.channels).copied()
    }
}

pub fn extract_features(release: &Release, met: &MetField, spec: &FeatureSpec) -> Result<FeatureTensor> {
    spec.validate()?;
    let grid: &GridSpec = &met.grid;
    let origin = Patch::window(grid, release, spec.side)?;
    let half = (spec.side / 2) as isize;
    let channels = spec.channels();
    let mut data = Vec::with_capacity(spec.side * spec.side * channels);
    let mut winds = vec![(0.0f64, 0.0f64); spec.levels.len() * spec.lags.len()];

    for pr in 0..spec.side {
        for pc in 0..spec.side {
            let i = origin.0 + pr as isize;
            let j = origin.1 + pc as isize;
            let inside = i >= 0 && j >= 0 && (i as usize) < grid.n_lat && (j as usize) < grid.n_lon;
            if inside {
                for (l, &z) in spec.levels.iter().enumerate() {
                    for (k, &lag) in spec.lags.iter().enumerate() {
                        winds[l * spec.lags.len() + k] = met.sample(i as f64, j as f64, z, release.time + lag);
                    }
                }
            }
            for var in &spec.variables {
                for w in &winds {
                    let x = match (inside, var) {
                        (false, _) => 0.0,
                        (true, Variable::U) => w.0,
                        (true, Variable::V) => w.1,
                    };
                    data.push(x as f32);
                }
            }
            let dy = (pr as isize - half) as f64;
            let dx = (pc as isize - half) as f64;
            let dist = dx.hypot(dy);
            let (bs, bc) = if dist == 0.0 {
                (0.0, 0.0)
            } else {
                let b = dx.atan2(dy);
                (b.sin(), b.cos())
            };
            for s in &spec.statics {
                let x = match s {
                    StaticChannel::Terrain if inside => met.terrain[grid.index(i as usize, j as usize)],
                    StaticChannel::LandMask if inside => met.land_mask[grid.index(i as usize, j as usize)],
                    StaticChannel::Terrain | StaticChannel::LandMask => 0.0,
                    StaticChannel::BearingSin => bs,
                    StaticChannel::BearingCos => bc,
                    StaticChannel::Distance => dist / spec.side as f64,
                    StaticChannel::ReleaseCell => {
                        if dist == 0.0 {
                            1.0
                        } else {
                            0.0
                        }
                    }
                };
                data.push(x as f32);
            }
        }
    }
    Ok(FeatureTensor {
        side: spec.side,
        channels,
        channel_hash: spec.channel_hash(),
        release_id: release.id,
        data,
    })
}

/// Per-channel standardization fitted on the training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Channels whose spread is below 1e-12; these pass through unscaled.
    pub degenerate: Vec<bool>,
}

const MIN_STD: f64 = 1e-12;

impl Normalizer {
    pub fn identity(channels: usize) -> Self {
        Normalizer {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
            degenerate: vec![false; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    pub fn fit<'a>(tensors: impl IntoIterator<Item = &'a FeatureTensor>) -> Result<Self> {
        let tensors: Vec<&FeatureTensor> = tensors.into_iter().collect();
        let first = tensors.first().ok_or_else(|| Error::invalid("cannot fit a normalizer on no tensors"))?;
        let channels = first.channels;
        for t in &tensors {
            crate::error::ensure_len("normalizer channels", channels, t.channels)?;
        }
        let count: usize = tensors.iter().map(|t| t.cells()).sum();
        let mut mean = vec![0.0f64; channels];
        for t in &tensors {
            for cell in t.data.chunks_exact(channels) {
                for (m, &x) in mean.iter_mut().zip(cell) {
                    *m += x as f64;
                }
            }
        }
        for m in &mut mean {
            *m /= count as f64;
        }
        let mut var = vec![0.0f64; channels];
        for t in &tensors {
            for cell in t.data.chunks_exact(channels) {
                for ((v, &x), m) in var.iter_mut().zip(cell).zip(&mean) {
                    let d = x as f64 - m;
                    *v += d * d;
                }
            }
        }
        let mut std = Vec::with_capacity(channels);
        let mut degenerate = Vec::with_capacity(channels);
        for (c, v) in var.iter().enumerate() {
            let s = (v / count as f64).sqrt();
            if s < MIN_STD {
                degenerate.push(true);
                std.push(1.0);
                mean[c] = 0.0;
            } else {
                degenerate.push(false);
                std.push(s);
            }
        }
        Ok(Normalizer { mean, std, degenerate })
    }

    pub fn apply(&self, tensor: &FeatureTensor) -> Result<FeatureTensor> {
        crate::error::ensure_len("normalizer channels", self.channels(), tensor.channels)?;
        let mut out = tensor.clone();
        for cell in out.data.chunks_exact_mut(tensor.channels) {
            for (c, x) in cell.iter_mut().enumerate() {
                if !self.degenerate[c] {
                    *x = ((*x as f64 - self.mean[c]) / self.std[c]) as f32;
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthmet::generate_met;

    fn release(grid: &GridSpec, i: usize, j: usize) -> Release {
        Release {
            id: 9,
            lat: grid.lat_of(i),
            lon: grid.lon_of(j),
            altitude: 10.0,
            time: 30.0,
        }
    }

    #[test]
    fn default_channel_count() {
        let spec = FeatureSpec::default();
        assert_eq!(spec.channels(), 2 * 7 * 3 + 5);
        assert_eq!(spec.channels(), 47);
        assert_eq!(spec.channel_names().len(), 47);
    }

    #[test]
    fn constant_wind_gives_constant_wind_channels() {
        let grid = GridSpec::default();
        let met = MetField::uniform(grid, MetConfig::default().levels(), vec![0.0, 100.0], -4.0, 2.0).unwrap();
        let spec = FeatureSpec::default();
        let t = extract_features(&release(&grid, 32, 32), &met, &spec).unwrap();
        for c in 0..42 {
            let expected = if c < 21 { -4.0 } else { 2.0 };
            assert!(t.channel(c).all(|x| x == expected));
        }
    }

    #[test]
    fn release_indicator_is_one_hot() {
        let grid = GridSpec::default();
        let met = generate_met(&MetConfig::default(), &grid, (0.0, 48.0)).unwrap();
        let spec = FeatureSpec::default();
        let t = extract_features(&release(&grid, 3, 60), &met, &spec).unwrap();
        let ind: Vec<f32> = t.channel(46).collect();
        assert_eq!(ind.iter().filter(|&&x| x == 1.0).count(), 1);
        assert_eq!(ind.iter().filter(|&&x| x == 0.0).count(), 2499);
        assert_eq!(ind[25 * 50 + 25], 1.0);
        assert!(t.data.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn outside_release_rejected() {
        let grid = GridSpec::default();
        let met = MetField::uniform(grid, vec![100.0], vec![0.0], 1.0, 1.0).unwrap();
        let mut r = release(&grid, 0, 0);
        r.lon = 100.0;
        assert!(extract_features(&r, &met, &FeatureSpec::default()).is_err());
    }

    fn tensor(data: Vec<f32>, channels: usize) -> FeatureTensor {
        let side = ((data.len() / channels) as f64).sqrt() as usize;
        FeatureTensor {
            side,
            channels,
            channel_hash: 0,
            release_id: 0,
            data,
        }
    }

    #[test]
    fn normalizer_standardizes_training_set() {
        let a = tensor(vec![1.0, 5.0, 2.0, 5.0, 3.0, 5.0, 4.0, 5.0], 2);
        let b = tensor(vec![10.0, 5.0, -2.0, 5.0, 0.5, 5.0, 7.0, 5.0], 2);
        let n = Normalizer::fit([&a, &b]).unwrap();
        assert!(n.degenerate[1] && !n.degenerate[0]);
        let na = n.apply(&a).unwrap();
        let nb = n.apply(&b).unwrap();
        let xs: Vec<f64> = na.channel(0).chain(nb.channel(0)).map(|x| x as f64).collect();
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let std = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64).sqrt();
        assert!(mean.abs() < 1e-6);
        assert!((std - 1.0).abs() < 1e-6);
        // degenerate channel passes through
        assert!(na.channel(1).all(|x| x == 5.0));
        // ordering does not matter
        assert_eq!(Normalizer::fit([&b, &a]).unwrap().std[0], n.std[0]);
    }

    #[test]
    fn normalizer_identity_cases() {
        let n = Normalizer {
            mean: vec![0.0, 3.0],
            std: vec![1.0, 2.0],
            degenerate: vec![false, false],
        };
        let t = tensor(vec![0.7, 3.0, -1.5, 5.0], 2);
        let out = n.apply(&t).unwrap();
        assert_eq!(out.data, vec![0.7, 0.0, -1.5, 1.0]);
        assert!(n.apply(&tensor(vec![1.0; 9], 9)).is_err());
        assert!(Normalizer::fit(std::iter::empty()).is_err());
    }
}
