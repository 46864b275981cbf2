//! Ensemble statistics and multi-member prediction.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_postprocess, Checkpoint};
use crate::domain::{embed_patch, log_values, GridSpec, Patch, Release};
use crate::error::{ensure_len, Error, Result};
use crate::features::FeatureTensor;
use crate::gnn::{forward, GraphContext};
use crate::postprocess::PostprocessState;

pub const DEFAULT_CV_EPS: f64 = 1e-9;

/// Per-cell mean, population standard deviation and coefficient of
/// variation `std / (mean + eps)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub cv: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalarStats {
    pub mean: f64,
    pub std: f64,
    pub cv: f64,
}

fn check_eps(eps: f64) -> Result<()> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::invalid(format!("CV epsilon must be positive, got {eps}")));
    }
    Ok(())
}

pub fn scalar_stats(values: &[f64], eps: f64) -> Result<ScalarStats> {
    check_eps(eps)?;
    if values.len() < 2 {
        return Err(Error::invalid(format!("ensemble needs at least 2 members, got {}", values.len())));
    }
    if let Some(index) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { index });
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    Ok(ScalarStats {
        mean,
        std,
        cv: std / (mean + eps),
    })
}

pub fn ensemble_stats<V: AsRef<[f64]>>(members: &[V], eps: f64) -> Result<EnsembleStats> {
    check_eps(eps)?;
    if members.len() < 2 {
        return Err(Error::invalid(format!("ensemble needs at least 2 members, got {}", members.len())));
    }
    let cells = members[0].as_ref().len();
    for (k, m) in members.iter().enumerate() {
        ensure_len(&format!("ensemble member {k}"), cells, m.as_ref().len())?;
        if let Some(index) = m.as_ref().iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
    }
    let n = members.len() as f64;
    let mut mean = vec![0.0; cells];
    for m in members {
        for (acc, &v) in mean.iter_mut().zip(m.as_ref()) {
            *acc += v;
        }
    }
    mean.iter_mut().for_each(|v| *v /= n);
    let mut var = vec![0.0; cells];
    for m in members {
        for ((acc, &v), &mu) in var.iter_mut().zip(m.as_ref()).zip(&mean) {
            *acc += (v - mu) * (v - mu);
        }
    }
    let std: Vec<f64> = var.iter().map(|v| (v / n).sqrt()).collect();
    let cv = std.iter().zip(&mean).map(|(s, m)| s / (m + eps)).collect();
    Ok(EnsembleStats { mean, std, cv })
}

/// Space in which footprint CV maps are computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CvSpace {
    #[default]
    Linear,
    /// `std / (|mean| + eps)` over `ln(member + eps_log)`.
    Log,
}

/// Per-cell CV of linear members in the requested space.
pub fn cv_in_space<V: AsRef<[f64]>>(members: &[V], space: CvSpace, eps_log: f64, eps: f64) -> Result<Vec<f64>> {
    match space {
        CvSpace::Linear => Ok(ensemble_stats(members, eps)?.cv),
        CvSpace::Log => {
            let logs = members
                .iter()
                .map(|m| log_values(m.as_ref(), eps_log))
                .collect::<Result<Vec<_>>>()?;
            let st = ensemble_stats(&logs, eps)?;
            Ok(st.std.iter().zip(&st.mean).map(|(s, m)| s / (m.abs() + eps)).collect())
        }
    }
}

/// `mean - truth`, cell by cell.
pub fn mean_error(mean: &[f64], truth: &[f64]) -> Result<Vec<f64>> {
    ensure_len("ensemble mean vs truth", truth.len(), mean.len())?;
    Ok(mean.iter().zip(truth).map(|(m, t)| m - t).collect())
}

/// One trained member with its post-processing.
#[derive(Debug, Clone)]
pub struct Member {
    pub checkpoint: Checkpoint,
    pub post: PostprocessState,
    pub path: PathBuf,
}

/// Members that share architecture, inputs and mesh.
#[derive(Debug, Clone)]
pub struct Ensemble {
    pub members: Vec<Member>,
    pub ctx: GraphContext,
}

impl Ensemble {
    pub fn new(members: Vec<Member>) -> Result<Self> {
        if members.len() < 2 {
            return Err(Error::invalid(format!("ensemble needs at least 2 members, got {}", members.len())));
        }
        let hashes: Vec<String> = members.iter().map(|m| m.checkpoint.compatibility_hash()).collect();
        if hashes.iter().any(|h| *h != hashes[0]) {
            let listing: Vec<String> = members
                .iter()
                .zip(&hashes)
                .map(|(m, h)| format!("{} = {h}", m.path.display()))
                .collect();
            return Err(Error::Incompatible(listing.join(", ")));
        }
        let first = &members[0].checkpoint;
        let ctx = GraphContext::build(first.mesh_side, first.mesh_spacing)?;
        Ok(Ensemble { members, ctx })
    }

    pub fn load(paths: &[PathBuf]) -> Result<Self> {
        let members = paths
            .iter()
            .map(|p| {
                Ok(Member {
                    checkpoint: Checkpoint::load(p)?,
                    post: load_postprocess(p)?,
                    path: p.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(members)
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// Log-space network output of one member on raw (unnormalized) features.
    pub fn member_log(&self, k: usize, raw: &FeatureTensor) -> Result<Vec<f64>> {
        let m = &self.members[k];
        if raw.channel_hash != m.checkpoint.feature_hash {
            return Err(Error::Incompatible(format!(
                "feature channel hash {:016x} does not match checkpoint {} ({:016x})",
                raw.channel_hash,
                m.path.display(),
                m.checkpoint.feature_hash
            )));
        }
        let x = m.checkpoint.normalizer.apply(raw)?;
        let (y, _) = forward(&m.checkpoint.params, &x, &self.ctx)?;
        Ok(y.into_iter().map(f64::from).collect())
    }

    /// Post-processed linear patch field of every member.
    pub fn predict_patches(&self, raw: &FeatureTensor) -> Result<Vec<Vec<f64>>> {
        (0..self.len())
            .map(|k| self.members[k].post.apply(&self.member_log(k, raw)?))
            .collect()
    }
}

/// Member fields and statistics on the full grid.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsemblePrediction {
    pub members: Vec<Vec<f64>>,
    pub stats: EnsembleStats,
}

/// Predicts every member for one release and embeds the patches into the
/// parent grid (cells outside the patch are zero).
pub fn ensemble_predict(
    ensemble: &Ensemble,
    raw: &FeatureTensor,
    release: &Release,
    grid: &GridSpec,
    cv_eps: f64,
) -> Result<EnsemblePrediction> {
    let side = ensemble.ctx.side;
    let patches = ensemble.predict_patches(raw)?;
    let template = crate::domain::crop_patch(&vec![0.0; grid.len()], grid, release, side)?;
    let members = patches
        .into_iter()
        .map(|values| {
            embed_patch(
                &Patch {
                    values,
                    ..template.clone()
                },
                grid,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let stats = ensemble_stats(&members, cv_eps)?;
    Ok(EnsemblePrediction { members, stats })
}

/// Output file names for one release under an ensemble output directory.
pub fn stat_file(dir: &Path, stat: &str, release_id: u64) -> PathBuf {
    dir.join(stat).join(format!("{stat}_{release_id:06}.fpg"))
}
