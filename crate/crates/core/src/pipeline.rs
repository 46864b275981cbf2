//! Pipeline stages over a run directory, as driven by the command line.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{
    scatter_to_grid, spatial_aggregate, spread_error_correlation, temporal_cv_series, wind_rose, write_map_csv, write_rose_csv,
    write_series_csv, Correlation, MetricAccumulator, MetricReport, ReleaseFields,
};
use crate::checkpoint::{save_postprocess, Checkpoint};
use crate::config::{PipelineConfig, PostprocessConfig};
use crate::domain::{crop_patch, log_values, DatasetManifest, FluxField, Footprint, GridSpec, Release, Space, Split};
use crate::ensemble::{cv_in_space, ensemble_predict, mean_error, stat_file, CvSpace, Ensemble};
use crate::error::{Error, Result};
use crate::features::extract_features;
use crate::formats::{read_fpg, read_ftr, read_met, write_file, write_fpg, write_met};
use crate::gnn::{forward, GraphContext};
use crate::lpdm::{generate_dataset, generate_releases, simulate_footprint, DatasetLayout};
use crate::molefrac::{molefrac_dataset, patch_truth, records_csv, synth_bottomup_flux, uniform_flux, MoleFractionRecord};
use crate::postprocess::PostprocessState;
use crate::synthmet::{generate_met, MetField};
use crate::train::{epoch_log_csv, fit_quantile_map, train_model, EpochLog, TrainingData};

/// Environment variable capping the worker count.
pub const THREADS_ENV: &str = "FOOTPRINT_UQ_THREADS";

/// Names of the statistic files written per test release.
pub const STATS: [&str; 4] = ["mean", "std", "cv", "error"];

/// Where every artifact of a run lives.
#[derive(Debug, Clone)]
pub struct RunLayout {
    pub root: PathBuf,
    pub cfg: PipelineConfig,
}

impl RunLayout {
    pub fn new(root: &Path, cfg: PipelineConfig) -> Self {
        RunLayout {
            root: root.to_path_buf(),
            cfg,
        }
    }

    fn sub(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn met_file(&self) -> PathBuf {
        self.sub(&self.cfg.paths.met).join("met.met1")
    }

    pub fn manifest(&self) -> PathBuf {
        self.sub(&self.cfg.paths.data).join("manifest.json")
    }

    pub fn checkpoint(&self, seed: u64) -> PathBuf {
        self.sub(&self.cfg.paths.models).join(format!("member_seed{seed}.ckpt"))
    }

    pub fn checkpoints(&self) -> Vec<PathBuf> {
        self.cfg.ensemble.seeds.iter().map(|&s| self.checkpoint(s)).collect()
    }

    pub fn ensemble_dir(&self) -> PathBuf {
        self.sub(&self.cfg.paths.ensemble)
    }

    pub fn molefrac_dir(&self) -> PathBuf {
        self.sub(&self.cfg.paths.molefrac)
    }

    pub fn analysis_dir(&self) -> PathBuf {
        self.sub(&self.cfg.paths.analysis)
    }

    pub fn report_dir(&self) -> PathBuf {
        self.sub(&self.cfg.paths.report)
    }
}

/// Path of the per-epoch CSV written next to a checkpoint.
pub fn epoch_log_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("epochs.csv")
}

/// Time span the meteorology must cover for the configured releases.
pub fn met_time_range(cfg: &PipelineConfig) -> Result<(f64, f64, Vec<Release>)> {
    let start = cfg.sim.t_back_hours;
    let releases = generate_releases(&cfg.releases, &cfg.grid, start)?;
    let last = releases.last().map_or(start, |r| r.time);
    Ok((0.0, last + cfg.met.time_step_hours, releases))
}

pub fn gen_met(cfg: &PipelineConfig, out: &Path) -> Result<MetField> {
    cfg.validate()?;
    let (t0, t1, _) = met_time_range(cfg)?;
    let met = generate_met(&cfg.met, &cfg.grid, (t0, t1))?;
    write_met(out, &met, cfg.hash())?;
    Ok(met)
}

pub fn gen_data(cfg: &PipelineConfig, met: &MetField, out_dir: &Path) -> Result<DatasetManifest> {
    cfg.validate()?;
    let (_, _, releases) = met_time_range(cfg)?;
    let layout = DatasetLayout {
        n_train: cfg.releases.n_train,
        n_val: cfg.releases.n_val,
        features: cfg.features.clone(),
        config_hash: cfg.hash(),
    };
    generate_dataset(&releases, met, &cfg.sim, &layout, out_dir)
}

pub fn load_training_data(cfg: &PipelineConfig, manifest: &Path) -> Result<TrainingData> {
    TrainingData::load(manifest, cfg.postprocess.eps_log, cfg.postprocess.tau)
}

/// Trains one member and writes its checkpoint, post-processing JSON and
/// epoch CSV.
pub fn train_member(cfg: &PipelineConfig, data: &TrainingData, seed: u64, out: &Path) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    let ctx = GraphContext::build(cfg.features.side, cfg.mesh.spacing)?;
    let outcome = train_model(data, seed, &cfg.train, cfg.model, &ctx, |_| {})?;
    let quantile_map = if cfg.postprocess.quantile_map {
        Some(fit_quantile_map(&outcome.params, &data.validation, &ctx, cfg.postprocess.n_q)?)
    } else {
        None
    };
    let ckpt = Checkpoint {
        params: outcome.params,
        feature_hash: data.feature_hash,
        mesh_side: cfg.features.side,
        mesh_spacing: cfg.mesh.spacing,
        config_hash: cfg.hash(),
        normalizer: data.normalizer.clone(),
    };
    ckpt.save(out)?;
    save_postprocess(
        out,
        &PostprocessState {
            eps_log: data.eps_log,
            tau: data.tau,
            quantile_map,
        },
    )?;
    write_file(&epoch_log_path(out), epoch_log_csv(&outcome.logs).as_bytes())?;
    Ok(outcome.logs)
}

/// Trains every configured seed; `jobs > 1` trains members concurrently.
pub fn train_all(cfg: &PipelineConfig, layout: &RunLayout, jobs: usize) -> Result<()> {
    let data = load_training_data(cfg, &layout.manifest())?;
    let run = |&seed: &u64| train_member(cfg, &data, seed, &layout.checkpoint(seed)).map(|_| ());
    if jobs > 1 {
        cfg.ensemble.seeds.par_iter().with_max_len(1).map(run).collect::<Result<Vec<()>>>()?;
    } else {
        cfg.ensemble.seeds.iter().map(run).collect::<Result<Vec<()>>>()?;
    }
    Ok(())
}

/// Predicts every test release with the ensemble and writes member,
/// mean, std, CV and error grids.
pub fn run_ensemble(ckpts: &[PathBuf], manifest_path: &Path, out_dir: &Path, post: &PostprocessConfig, config_hash: u64) -> Result<usize> {
    let ensemble = Ensemble::load(ckpts)?;
    let manifest = DatasetManifest::load(manifest_path)?;
    let data_dir = manifest_path.parent().unwrap_or(Path::new("."));
    if manifest.patch_side != ensemble.ctx.side {
        return Err(Error::Incompatible(format!(
            "dataset patch side {} differs from the checkpoints' mesh side {}",
            manifest.patch_side, ensemble.ctx.side
        )));
    }
    let test = manifest.split(Split::Test);
    test.par_iter()
        .map(|entry| {
            let r = entry.release;
            let raw = read_ftr(&data_dir.join(&entry.features))?;
            let truth_fp = read_fpg(&data_dir.join(&entry.footprint))?;
            let truth = patch_truth(&truth_fp, manifest.patch_side)?;
            let pred = ensemble_predict(&ensemble, &raw, &r, &manifest.grid, post.cv_eps)?;
            let cv = match post.cv_space {
                CvSpace::Linear => pred.stats.cv.clone(),
                space => cv_in_space(&pred.members, space, post.eps_log, post.cv_eps)?,
            };
            let error = mean_error(&pred.stats.mean, &truth)?;
            let write = |name: &str, values: &[f64]| {
                let space = if name == "error" { Space::Signed } else { Space::Linear };
                let fp = Footprint::new(manifest.grid, r, values.to_vec(), space)?;
                write_fpg(&stat_file(out_dir, name, r.id), &fp, config_hash)
            };
            write("mean", &pred.stats.mean)?;
            write("std", &pred.stats.std)?;
            write("cv", &cv)?;
            write("error", &error)?;
            for (k, m) in pred.members.iter().enumerate() {
                write(&format!("member_{k}"), m)?;
            }
            Ok(())
        })
        .collect::<Result<Vec<()>>>()?;
    Ok(test.len())
}

pub fn flux_fields(cfg: &PipelineConfig) -> Result<Vec<(String, FluxField)>> {
    let bottomup = synth_bottomup_flux(&cfg.flux, &cfg.grid)?;
    let uniform = uniform_flux(&bottomup)?;
    Ok(vec![("bottomup".to_string(), bottomup), ("uniform".to_string(), uniform)])
}

pub fn flux_file(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("flux_{id}.fpg"))
}

pub fn run_molefrac(cfg: &PipelineConfig, manifest: &Path, ensemble_dir: &Path, out_dir: &Path) -> Result<Vec<MoleFractionRecord>> {
    let fluxes = flux_fields(cfg)?;
    let origin = Release {
        id: 0,
        lat: cfg.grid.lat_of(0),
        lon: cfg.grid.lon_of(0),
        altitude: 0.0,
        time: 0.0,
    };
    for (id, f) in &fluxes {
        let fp = Footprint::new(f.grid, origin, f.values.clone(), Space::Linear)?;
        write_fpg(&flux_file(out_dir, id), &fp, cfg.hash())?;
    }
    let records = molefrac_dataset(manifest, ensemble_dir, cfg.ensemble.seeds.len(), &fluxes, cfg.postprocess.cv_eps)?;
    write_file(&out_dir.join("records.csv"), records_csv(&records).as_bytes())?;
    Ok(records)
}

/// Reads `records.csv` back.
pub fn read_records(path: &Path) -> Result<Vec<MoleFractionRecord>> {
    let csv_err = |e: csv::Error| Error::format(path, e.to_string());
    let mut reader = csv::Reader::from_path(path).map_err(csv_err)?;
    let n_members = reader.headers().map_err(csv_err)?.len().saturating_sub(7);
    let mut out = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let f = record.map_err(csv_err)?;
        let bad = |what: &str| Error::format(path, format!("row {}: bad {what}", row + 2));
        let num = |k: usize| -> Result<f64> { f[k].parse().map_err(|_| bad(&format!("number {:?}", &f[k]))) };
        let members = (4..4 + n_members).map(num).collect::<Result<Vec<_>>>()?;
        out.push(MoleFractionRecord {
            release_id: f[0].parse().map_err(|_| bad("release id"))?,
            time: num(1)?,
            flux_id: f[2].to_string(),
            truth: num(3)?,
            members,
            stats: crate::ensemble::ScalarStats {
                mean: num(4 + n_members)?,
                std: num(5 + n_members)?,
                cv: num(6 + n_members)?,
            },
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MoleFractionSummary {
    pub flux_id: String,
    pub records: usize,
    /// Rank correlation of member spread with |mean − truth| over records.
    pub spread_error: Correlation,
    pub mean_abs_error: f64,
    pub mean_truth: f64,
    pub mean_cv: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisSummary {
    pub config_hash: String,
    pub n_test: usize,
    pub n_members: usize,
    pub tau: f64,
    pub eps_log: f64,
    /// Ensemble mean vs truth, both `ln(x + eps_log)`, binarized at
    /// `ln(tau + eps_log)`; over in-domain patch cells of the test split.
    pub ensemble_log: MetricReport,
    /// The same comparison on linear values binarized at `tau`.
    pub ensemble_linear: MetricReport,
    pub members_log: Vec<MetricReport>,
    /// A constant prediction at the pooled truth mean, in log space.
    pub baseline_log: MetricReport,
    /// Rank correlation of the aggregated std map with the absolute
    /// aggregated mean-error map.
    pub spread_error_map: Correlation,
    pub molefrac: Vec<MoleFractionSummary>,
    pub calm_releases: usize,
}

/// One test release's patch window as full-grid fields.
struct TestRelease {
    release: Release,
    fields: ReleaseFields,
    members: Vec<Vec<f64>>,
}

fn load_test_release(layout: &RunLayout, manifest: &DatasetManifest, entry: &crate::domain::ManifestEntry, n_members: usize) -> Result<TestRelease> {
    let r = entry.release;
    let ens = layout.ensemble_dir();
    let data_dir = layout.manifest().parent().map(Path::to_path_buf).unwrap_or_default();
    let truth = patch_truth(&read_fpg(&data_dir.join(&entry.footprint))?, manifest.patch_side)?;
    let get = |name: &str| -> Result<Vec<f64>> { Ok(read_fpg(&stat_file(&ens, name, r.id))?.values) };
    let (mean, std, cv, error) = (get("mean")?, get("std")?, get("cv")?, get("error")?);
    let members = (0..n_members).map(|k| get(&format!("member_{k}"))).collect::<Result<Vec<_>>>()?;
    let covered = crop_patch(&vec![0.0; manifest.grid.len()], &manifest.grid, &r, manifest.patch_side)?;
    let mut mask = vec![false; manifest.grid.len()];
    for pr in 0..covered.side {
        for pc in 0..covered.side {
            if let Some((i, j)) = covered.parent_cell(&manifest.grid, pr, pc) {
                mask[manifest.grid.index(i, j)] = true;
            }
        }
    }
    Ok(TestRelease {
        release: r,
        fields: ReleaseFields {
            truth,
            mean,
            std,
            cv,
            error,
            covered: mask,
        },
        members,
    })
}

fn masked(values: &[f64], mask: &[bool]) -> Vec<f64> {
    values.iter().zip(mask).filter(|(_, &m)| m).map(|(&v, _)| v).collect()
}

/// Coarse grid whose cells each cover `factor × factor` parent cells.
pub fn coarse_grid(grid: &GridSpec, factor: usize) -> Result<GridSpec> {
    let shift = (factor as f64 - 1.0) / 2.0;
    GridSpec::new(
        grid.n_lat.div_ceil(factor),
        grid.n_lon.div_ceil(factor),
        grid.lat0 + shift * grid.d_lat,
        grid.lon0 + shift * grid.d_lon,
        grid.d_lat * factor as f64,
        grid.d_lon * factor as f64,
    )
}

/// Metrics, maps, roses, series and the summary JSON.
pub fn run_analysis(layout: &RunLayout) -> Result<AnalysisSummary> {
    let cfg = &layout.cfg;
    let manifest = DatasetManifest::load(&layout.manifest())?;
    let n_members = cfg.ensemble.seeds.len();
    let post = crate::checkpoint::load_postprocess(&layout.checkpoint(cfg.ensemble.seeds[0]))?;
    let (tau, eps) = (post.tau, post.eps_log);
    let active_log = (tau + eps).ln();
    let out = layout.analysis_dir();

    let test: Vec<TestRelease> = manifest
        .split(Split::Test)
        .par_iter()
        .map(|e| load_test_release(layout, &manifest, e, n_members))
        .collect::<Result<_>>()?;
    if test.is_empty() {
        return Err(Error::invalid("the test split is empty"));
    }

    let mut ens_log = MetricAccumulator::default();
    let mut ens_lin = MetricAccumulator::default();
    let mut mem_log = vec![MetricAccumulator::default(); n_members];
    let mut truth_log_all = Vec::new();
    for t in &test {
        let m = &t.fields.covered;
        let truth = masked(&t.fields.truth, m);
        let mean = masked(&t.fields.mean, m);
        let tl = log_values(&truth, eps)?;
        ens_log.add(&log_values(&mean, eps)?, &tl, active_log)?;
        ens_lin.add(&mean, &truth, tau)?;
        for (acc, member) in mem_log.iter_mut().zip(&t.members) {
            acc.add(&log_values(&masked(member, m), eps)?, &tl, active_log)?;
        }
        truth_log_all.extend(tl);
    }
    let pooled_mean = truth_log_all.iter().sum::<f64>() / truth_log_all.len() as f64;
    let baseline_log = crate::analysis::metrics(&vec![pooled_mean; truth_log_all.len()], &truth_log_all, active_log)?;

    let fields: Vec<ReleaseFields> = test.iter().map(|t| t.fields.clone()).collect();
    let agg = spatial_aggregate(&fields, manifest.grid)?;
    for (name, values) in [
        ("truth", &agg.truth),
        ("mean", &agg.mean),
        ("std", &agg.std),
        ("cv", &agg.cv),
        ("error", &agg.error),
    ] {
        write_map_csv(&out.join(format!("map_{name}.csv")), &agg.grid, values, &agg.count)?;
    }
    let abs_error: Vec<f64> = agg.error.iter().map(|e| e.abs()).collect();
    let spread_error_map = spread_error_correlation(&agg.std, &abs_error)?;

    let met = read_met(&layout.met_file())?;
    let releases: Vec<Release> = test.iter().map(|t| t.release).collect();
    let rose = wind_rose(&releases, &met, None)?;
    write_rose_csv(&out.join("rose_count.csv"), &rose)?;
    // per-release mean CV over cells where the ensemble mean is active
    let fp_cv: Vec<f64> = test
        .iter()
        .map(|t| {
            let (s, n) = t
                .fields
                .mean
                .iter()
                .zip(&t.fields.cv)
                .filter(|(&m, _)| m >= tau)
                .fold((0.0, 0usize), |(s, n), (_, &c)| (s + c, n + 1));
            if n == 0 {
                0.0
            } else {
                s / n as f64
            }
        })
        .collect();
    write_rose_csv(&out.join("rose_cv_footprint.csv"), &wind_rose(&releases, &met, Some(&fp_cv))?)?;

    let records = crate::pipeline::read_records(&layout.molefrac_dir().join("records.csv"))?;
    let coarse = coarse_grid(&manifest.grid, cfg.analysis.coarse_factor)?;
    let by_id: std::collections::HashMap<u64, Release> = releases.iter().map(|r| (r.id, *r)).collect();
    let mut molefrac = Vec::new();
    for (flux_id, _) in flux_fields(cfg)? {
        let recs: Vec<&MoleFractionRecord> = records.iter().filter(|r| r.flux_id == flux_id).collect();
        let spread: Vec<f64> = recs.iter().map(|r| r.stats.std).collect();
        let abs_err: Vec<f64> = recs.iter().map(|r| (r.stats.mean - r.truth).abs()).collect();
        let corr = spread_error_correlation(&spread, &abs_err)?;
        let series_in: Vec<(f64, u64, Vec<f64>)> = recs.iter().map(|r| (r.time, r.release_id, r.members.clone())).collect();
        write_series_csv(&out.join(format!("series_cv_{flux_id}.csv")), &temporal_cv_series(&series_in, cfg.postprocess.cv_eps)?)?;
        let cvs: Vec<f64> = recs.iter().map(|r| r.stats.cv).collect();
        let rels: Vec<Release> = recs.iter().map(|r| by_id[&r.release_id]).collect();
        write_rose_csv(&out.join(format!("rose_cv_{flux_id}.csv")), &wind_rose(&rels, &met, Some(&cvs))?)?;
        for (stat, pick) in [
            ("truth", (|r: &MoleFractionRecord| r.truth) as fn(&MoleFractionRecord) -> f64),
            ("mean", |r| r.stats.mean),
            ("std", |r| r.stats.std),
            ("cv", |r| r.stats.cv),
            ("abs_error", |r| (r.stats.mean - r.truth).abs()),
        ] {
            let pts: Vec<(f64, f64, f64)> = recs
                .iter()
                .map(|r| {
                    let rel = by_id[&r.release_id];
                    (rel.lat, rel.lon, pick(r))
                })
                .collect();
            let (values, count) = scatter_to_grid(&pts, &coarse)?;
            write_map_csv(&out.join(format!("molefrac_{flux_id}_{stat}.csv")), &coarse, &values, &count)?;
        }
        let n = recs.len().max(1) as f64;
        molefrac.push(MoleFractionSummary {
            flux_id,
            records: recs.len(),
            spread_error: corr,
            mean_abs_error: abs_err.iter().sum::<f64>() / n,
            mean_truth: recs.iter().map(|r| r.truth).sum::<f64>() / n,
            mean_cv: cvs.iter().sum::<f64>() / n,
        });
    }

    let mut curves = String::from("seed,epoch,train_loss,val_loss,nmae,mse,acc,iou,r2\n");
    for &seed in &cfg.ensemble.seeds {
        let text = std::fs::read_to_string(epoch_log_path(&layout.checkpoint(seed))).map_err(|e| Error::io(layout.checkpoint(seed), e))?;
        for line in text.lines().skip(1) {
            let _ = writeln!(curves, "{seed},{line}");
        }
    }
    write_file(&out.join("training_curves.csv"), curves.as_bytes())?;

    let summary = AnalysisSummary {
        config_hash: cfg.hash_hex(),
        n_test: test.len(),
        n_members,
        tau,
        eps_log: eps,
        ensemble_log: ens_log.report(),
        ensemble_linear: ens_lin.report(),
        members_log: mem_log.iter().map(MetricAccumulator::report).collect(),
        baseline_log,
        spread_error_map,
        molefrac,
        calm_releases: rose.calm,
    };
    let text = serde_json::to_string_pretty(&summary).map_err(|source| Error::Json {
        path: out.join("summary.json"),
        source,
    })?;
    write_file(&out.join("summary.json"), text.as_bytes())?;
    Ok(summary)
}

pub fn load_summary(path: &Path) -> Result<AnalysisSummary> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

fn metric_row(out: &mut String, name: &str, m: &MetricReport) {
    let _ = writeln!(
        out,
        "| {name} | {:.4} | {:.4} | {:.4} | {:.4} | {:.4} |",
        m.nmae, m.mse, m.accuracy, m.iou, m.r2
    );
}

/// Markdown report built from the analysis summary.
pub fn render_report(s: &AnalysisSummary) -> String {
    let mut out = String::from("# Run report\n\n");
    let _ = writeln!(out, "config hash `{}`\n", s.config_hash);
    let _ = writeln!(
        out,
        "{} test releases, {} members, tau = {}, eps_log = {}\n",
        s.n_test, s.n_members, s.tau, s.eps_log
    );
    out.push_str("## Test metrics\n\n| prediction | NMAE | MSE | accuracy | IoU | R² |\n|---|---|---|---|---|---|\n");
    metric_row(&mut out, "ensemble mean (log)", &s.ensemble_log);
    metric_row(&mut out, "ensemble mean (linear)", &s.ensemble_linear);
    for (k, m) in s.members_log.iter().enumerate() {
        metric_row(&mut out, &format!("member {k} (log)"), m);
    }
    metric_row(&mut out, "constant mean (log)", &s.baseline_log);
    out.push_str("\n## Spread and error\n\n");
    let _ = writeln!(
        out,
        "- aggregated std map vs |mean error| map: Spearman rho = {:.4} over {} cells",
        s.spread_error_map.rho, s.spread_error_map.n
    );
    for m in &s.molefrac {
        let _ = writeln!(
            out,
            "- mole fractions, {} flux: rho = {:.4} over {} records; mean |error| {:.4e}, mean truth {:.4e}, mean CV {:.4}",
            m.flux_id, m.spread_error.rho, m.spread_error.n, m.mean_abs_error, m.mean_truth, m.mean_cv
        );
    }
    let _ = writeln!(out, "- calm releases excluded from roses: {}", s.calm_releases);
    out
}

pub fn run_report(layout: &RunLayout) -> Result<()> {
    let s = load_summary(&layout.analysis_dir().join("summary.json"))?;
    write_file(&layout.report_dir().join("report.md"), render_report(&s).as_bytes())
}

/// Every stage in order; writes the effective config first.
pub fn reproduce(cfg: &PipelineConfig, out: &Path, jobs: usize, mut progress: impl FnMut(&str)) -> Result<AnalysisSummary> {
    cfg.validate()?;
    let layout = RunLayout::new(out, cfg.clone());
    write_file(&out.join("config.json"), cfg.to_json().as_bytes())?;
    progress("gen-met");
    let met = gen_met(cfg, &layout.met_file())?;
    progress("gen-data");
    gen_data(cfg, &met, layout.manifest().parent().expect("manifest dir"))?;
    drop(met);
    progress("train");
    train_all(cfg, &layout, jobs)?;
    progress("ensemble");
    run_ensemble(&layout.checkpoints(), &layout.manifest(), &layout.ensemble_dir(), &cfg.postprocess, cfg.hash())?;
    progress("molefrac");
    run_molefrac(cfg, &layout.manifest(), &layout.ensemble_dir(), &layout.molefrac_dir())?;
    progress("analyze");
    let summary = run_analysis(&layout)?;
    progress("report");
    run_report(&layout)?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub runs: usize,
    pub oracle_median_s: f64,
    pub emulator_median_s: f64,
    pub ratio: f64,
    pub reference_scale: String,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Median per-footprint wall time of the particle oracle and of one
/// member's emulation (feature extraction, forward pass, post-processing)
/// over the first `n` test releases.
pub fn bench(cfg: &PipelineConfig, manifest_path: &Path, met_path: &Path, ckpt_path: &Path, n: usize) -> Result<BenchReport> {
    if n < 10 {
        return Err(Error::invalid(format!("bench needs at least 10 runs, got {n}")));
    }
    let manifest = DatasetManifest::load(manifest_path)?;
    let met = read_met(met_path)?;
    let ckpt = Checkpoint::load(ckpt_path)?;
    let post = crate::checkpoint::load_postprocess(ckpt_path)?;
    let ctx = GraphContext::build(ckpt.mesh_side, ckpt.mesh_spacing)?;
    let releases: Vec<Release> = manifest.split(Split::Test).iter().chain(manifest.split(Split::Validation)).map(|e| e.release).take(n).collect();
    if releases.len() < n {
        return Err(Error::invalid(format!("only {} releases available for {n} bench runs", releases.len())));
    }
    let mut oracle = Vec::with_capacity(n);
    let mut emulator = Vec::with_capacity(n);
    for r in &releases {
        let t = Instant::now();
        let fp = simulate_footprint(r, &met, &cfg.sim)?;
        oracle.push(t.elapsed().as_secs_f64());
        std::hint::black_box(fp);

        let t = Instant::now();
        let raw = extract_features(r, &met, &cfg.features)?;
        let x = ckpt.normalizer.apply(&raw)?;
        let (y, _) = forward(&ckpt.params, &x, &ctx)?;
        let y: Vec<f64> = y.into_iter().map(f64::from).collect();
        let field = post.apply(&y)?;
        emulator.push(t.elapsed().as_secs_f64());
        std::hint::black_box(field);
    }
    let (o, e) = (median(oracle), median(emulator));
    Ok(BenchReport {
        runs: n,
        oracle_median_s: o,
        emulator_median_s: e,
        ratio: o / e,
        reference_scale: "reference scale: ~20 min per footprint for a full particle model vs ~0.75 s for the emulator".into(),
    })
}
