//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
//! failure.
//!
//! The end-to-end criteria run `reproduce` twice with the default config
//! (about 25 minutes each on one core) and then evaluate the first run.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::Instant;

use footprint_uq::checkpoint::{load_postprocess, Checkpoint};
use footprint_uq::config::PipelineConfig;
use footprint_uq::domain::{FluxField, Footprint, GridSpec, Release, Space};
use footprint_uq::ensemble::{ensemble_stats, scalar_stats};
use footprint_uq::features::{extract_features, FeatureSpec, Normalizer};
use footprint_uq::gnn::{gradient_check, init_params, Activation, GraphContext, Hyperparams};
use footprint_uq::lpdm::{simulate_footprint, SimConfig, METERS_PER_DEG_LAT};
use footprint_uq::mesh::{build_maps, build_mesh};
use footprint_uq::molefrac::{mole_fraction, mole_fraction_values};
use footprint_uq::pipeline::{epoch_log_path, AnalysisSummary, BenchReport, RunLayout};
use footprint_uq::synthmet::{generate_met, MetConfig, MetField};
use footprint_uq::train::{predict_log, TrainingData};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const BIN: &str = env!("CARGO_BIN_EXE_footprint-uq");
const RUNTIME_BUDGET_S: f64 = 1800.0;

type Outcome = Result<String, String>;

struct Suite {
    failed: usize,
    total: usize,
}

impl Suite {
    fn check(&mut self, name: &str, f: impl FnOnce() -> Outcome) {
        self.total += 1;
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS  {name:<34} {detail} [{secs:.1}s]"),
            Err(detail) => {
                self.failed += 1;
                println!("FAIL  {name:<34} {detail} [{secs:.1}s]");
            }
        }
    }
}

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------- gradient

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let grid = GridSpec::default();
    let met = generate_met(&MetConfig::default(), &grid, (0.0, 24.0)).map_err(|e| e.to_string())?;
    let spec = FeatureSpec {
        side: 10,
        ..FeatureSpec::default()
    };
    let release = Release {
        id: 1,
        lat: grid.lat_of(30),
        lon: grid.lon_of(34),
        altitude: 40.0,
        time: 20.0,
    };
    let raw = extract_features(&release, &met, &spec).map_err(|e| e.to_string())?;
    let x = Normalizer::fit([&raw]).and_then(|n| n.apply(&raw)).map_err(|e| e.to_string())?;
    let hyper = Hyperparams {
        input_channels: spec.channels(),
        latent: 8,
        rounds: 2,
        mlp_layers: 2,
        activation: Activation::Relu,
    };
    let params = init_params::<f64>(2, hyper).map_err(|e| e.to_string())?;
    let ctx = GraphContext::build(10, 3).map_err(|e| e.to_string())?;
    let truth: Vec<f64> = (0..100).map(|k| -2.0 + (k as f64 * 0.29).sin()).collect();
    let err = gradient_check(&params, &x, &truth, &ctx, 1e-6, 3).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    ensure(err < 1e-4 && secs < 30.0, format!("max rel error {err:.2e} (< 1e-4), {secs:.1}s (< 30s)"))
}

// ----------------------------------------------------------------- physics

fn physics_grid() -> GridSpec {
    GridSpec::new(40, 60, 10.0, 20.0, 0.25, 0.25).unwrap()
}

fn uniform_met(u: f64, v: f64) -> MetField {
    MetField::uniform(physics_grid(), vec![10.0, 100.0, 1000.0, 3000.0], vec![-400.0, 400.0], u, v).unwrap()
}

fn quiet(hours: f64) -> SimConfig {
    SimConfig {
        n_particles: 5,
        k_h: 0.0,
        sigma_w: 0.0,
        t_back_hours: hours,
        ..SimConfig::default()
    }
}

fn release_at(row: usize, col: usize, altitude: f64) -> Release {
    let g = physics_grid();
    Release {
        id: 2,
        lat: g.lat_of(row),
        lon: g.lon_of(col),
        altitude,
        time: 0.0,
    }
}

fn physics_stationary() -> Outcome {
    let g = physics_grid();
    let fp = simulate_footprint(&release_at(12, 17, 50.0), &uniform_met(0.0, 0.0), &quiet(72.0)).map_err(|e| e.to_string())?;
    let k = g.index(12, 17);
    let elsewhere = fp.values.iter().enumerate().filter(|&(i, &v)| i != k && v != 0.0).count();
    let err = (fp.values[k] - 72.0 * 3600.0).abs();
    ensure(err < 1e-6 && elsewhere == 0, format!("release cell {:.3} s, {elsewhere} other nonzero cells", fp.values[k]))
}

fn physics_trajectory() -> Outcome {
    let g = physics_grid();
    let mut worst = 0.0f64;
    let mut cells = 0;
    for &(u, col, hours) in &[(10.0, 50, 24.0), (4.0, 40, 48.0), (22.0, 58, 72.0)] {
        let r = release_at(20, col, 30.0);
        let cfg = quiet(hours);
        let fp = simulate_footprint(&r, &uniform_met(u, 0.0), &cfg).map_err(|e| e.to_string())?;
        let mut oracle = vec![0.0; g.len()];
        let step = u * cfg.dt / (METERS_PER_DEG_LAT * r.lat.to_radians().cos());
        for k in 0..cfg.n_steps() {
            let c = ((r.lon - k as f64 * step - g.lon0) / g.d_lon + 0.5).floor();
            if c < 0.0 {
                break;
            }
            oracle[g.index(20, c as usize)] += cfg.dt;
        }
        cells += oracle.iter().filter(|&&v| v > 0.0).count();
        for (a, b) in fp.values.iter().zip(&oracle) {
            worst = worst.max((a - b).abs() / b.max(1.0));
        }
    }
    ensure(worst <= 1e-9, format!("{cells} trajectory cells, max rel deviation {worst:.1e}"))
}

fn physics_mass_bound() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let cfg = SimConfig {
            n_particles: rng.random_range(1..40),
            dt: rng.random_range(120.0..1800.0),
            t_back_hours: rng.random_range(0.0..48.0),
            k_h: rng.random_range(0.0..60_000.0),
            sigma_w: rng.random_range(0.0..5.0),
            seed: rng.random(),
            ..SimConfig::default()
        };
        let met = uniform_met(rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0));
        let r = release_at(rng.random_range(0..40), rng.random_range(0..60), rng.random_range(0.0..1500.0));
        let fp = simulate_footprint(&r, &met, &cfg).map_err(|e| e.to_string())?;
        if fp.values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err("negative or non-finite cell".into());
        }
        let bound = cfg.n_steps() as f64 * cfg.dt;
        if bound > 0.0 {
            worst = worst.max(fp.total() / bound);
        } else if fp.total() != 0.0 {
            return Err("mass deposited with zero steps".into());
        }
    }
    ensure(worst <= 1.0 + 1e-12, format!("100 configs, max total/bound {worst:.6}"))
}

// ------------------------------------------------------------- statistics

fn cv_unit_cases() -> Outcome {
    let eps = 1e-9;
    let same = scalar_stats(&[2.5; 4], eps).map_err(|e| e.to_string())?;
    let alt = ensemble_stats(&[vec![0.0], vec![2.0], vec![0.0], vec![2.0]], eps).map_err(|e| e.to_string())?;
    let zero = ensemble_stats(&[vec![0.0; 3], vec![0.0; 3], vec![0.0; 3], vec![0.0; 3]], eps).map_err(|e| e.to_string())?;
    let dev = (alt.cv[0] - 1.0 / (1.0 + eps)).abs();
    ensure(
        same.cv == 0.0 && dev < 1e-9 && zero.cv.iter().all(|c| c.is_finite()),
        format!("identical cv {}, (0,2,0,2) |cv - 1/(1+eps)| {dev:.1e}, all-zero cv {:?}", same.cv, zero.cv),
    )
}

fn molefrac_algebra() -> Outcome {
    let g2 = GridSpec::new(2, 2, 0.0, 0.0, 1.0, 1.0).unwrap();
    let r = Release {
        id: 1,
        lat: 0.0,
        lon: 0.0,
        altitude: 10.0,
        time: 0.0,
    };
    let fp = Footprint::new(g2, r, vec![1.0, 2.0, 3.0, 4.0], Space::Linear).unwrap();
    let dot = mole_fraction(&fp, &FluxField::new(g2, vec![4.0, 3.0, 2.0, 1.0]).unwrap()).map_err(|e| e.to_string())?;

    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let mut worst = 0.0f64;
    let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(f64::MIN_POSITIVE);
    for _ in 0..100 {
        let n = rng.random_range(1..4000);
        let g = GridSpec::new(1, n, 0.0, 0.0, 1.0, 1.0).unwrap();
        let field = |rng: &mut ChaCha8Rng| -> Vec<f64> {
            (0..n).map(|_| if rng.random::<f64>() < 0.5 { 0.0 } else { rng.random::<f64>().powi(3) * 1e3 }).collect()
        };
        let members: Vec<Vec<f64>> = (0..4).map(|_| field(&mut rng)).collect();
        let q1 = FluxField::new(g, field(&mut rng)).unwrap();
        let q2 = FluxField::new(g, field(&mut rng)).unwrap();
        let (a, b) = (rng.random_range(0.0..5.0), rng.random_range(0.0..5.0));
        let mf = |fp: &[f64], q: &FluxField| mole_fraction_values(fp, q).unwrap();

        let combo: Vec<f64> = members[0].iter().zip(&members[1]).map(|(x, y)| a * x + b * y).collect();
        worst = worst.max(rel(mf(&combo, &q1), a * mf(&members[0], &q1) + b * mf(&members[1], &q1)));
        let qc = FluxField::new(g, q1.values.iter().zip(&q2.values).map(|(x, y)| a * x + b * y).collect()).unwrap();
        worst = worst.max(rel(mf(&members[0], &qc), a * mf(&members[0], &q1) + b * mf(&members[0], &q2)));
        let mean = ensemble_stats(&members, 1e-9).unwrap().mean;
        let mean_of: f64 = members.iter().map(|m| mf(m, &q1)).sum::<f64>() / 4.0;
        worst = worst.max(rel(mf(&mean, &q1), mean_of));
    }
    ensure(dot == 20.0 && worst <= 1e-10, format!("2x2 example {dot}, 100 pairs max rel deviation {worst:.1e}"))
}

// -------------------------------------------------------------------- mesh

fn mesh_structure() -> Outcome {
    let (side, r) = (50usize, 4usize);
    let mesh = build_mesh(side, r).map_err(|e| e.to_string())?;
    let h = r as f64 * 3f64.sqrt() / 2.0;
    let hi = (side - 1) as f64 + 1e-6;
    let inside = |x: f64, y: f64| x >= -1e-6 && y >= -1e-6 && x <= hi && y <= hi;
    let mut lattice = 0;
    for k in -200i64..=200 {
        for m in -200i64..=200 {
            let x = m as f64 * r as f64 + if k.rem_euclid(2) == 1 { r as f64 / 2.0 } else { 0.0 };
            if inside(x, k as f64 * h) {
                lattice += 1;
            }
        }
    }
    let rf = r as f64;
    let mut interior = 0;
    let mut bad_degree = 0;
    for (k, &(x, y)) in mesh.nodes.iter().enumerate() {
        let nbrs = [(rf, 0.0), (-rf, 0.0), (rf / 2.0, h), (-rf / 2.0, h), (rf / 2.0, -h), (-rf / 2.0, -h)];
        if nbrs.iter().all(|&(dx, dy)| inside(x + dx, y + dy)) {
            interior += 1;
            if mesh.degree(k) != 6 {
                bad_degree += 1;
            }
        }
    }
    let maps = build_maps(&mesh, side);
    let mut seen = vec![0u32; side * side];
    for cells in &maps.node_cells {
        for &c in cells {
            seen[c] += 1;
        }
    }
    let partition = seen.iter().all(|&n| n == 1);
    ensure(
        mesh.len() == lattice && bad_degree == 0 && interior > 0 && partition,
        format!(
            "{} nodes vs {lattice} enumerated, {interior} interior nodes with {bad_degree} not of degree 6, partition {partition}",
            mesh.len()
        ),
    )
}

// -------------------------------------------------------------- end to end

fn reproduce(out: &Path) -> Result<f64, String> {
    let start = Instant::now();
    let status = Command::new(BIN)
        .args(["reproduce", "--out"])
        .arg(out)
        .status()
        .map_err(|e| format!("cannot run {BIN}: {e}"))?;
    if !status.success() {
        return Err(format!("reproduce exited with {status}"));
    }
    Ok(start.elapsed().as_secs_f64())
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

fn determinism(a: &Path, b: &Path, times: &[f64]) -> Outcome {
    let (ta, tb) = (tree(a), tree(b));
    let mut differing: Vec<String> = ta
        .iter()
        .filter(|(p, bytes)| tb.get(*p) != Some(*bytes))
        .map(|(p, _)| p.display().to_string())
        .collect();
    differing.extend(tb.keys().filter(|p| !ta.contains_key(*p)).map(|p| p.display().to_string()));
    let kinds = |ext: &str| ta.keys().filter(|p| p.extension().is_some_and(|e| e == ext)).count();
    let slowest = times.iter().copied().fold(0.0, f64::max);
    ensure(
        differing.is_empty() && slowest < RUNTIME_BUDGET_S,
        format!(
            "{} files ({} ckpt, {} fpg, {} csv), {} differ {:?}; runtimes {:.0}s / {:.0}s (< {RUNTIME_BUDGET_S:.0}s)",
            ta.len(),
            kinds("ckpt"),
            kinds("fpg"),
            kinds("csv"),
            differing.len(),
            differing.iter().take(3).collect::<Vec<_>>(),
            times[0],
            times[1]
        ),
    )
}

fn load_summary(run: &Path) -> Result<AnalysisSummary, String> {
    let layout = RunLayout::new(run, PipelineConfig::default());
    let text = std::fs::read_to_string(layout.analysis_dir().join("summary.json")).map_err(|e| e.to_string())?;
    serde_json::from_str(&text).map_err(|e| e.to_string())
}

fn learning_signal(s: &AnalysisSummary) -> Outcome {
    let e = &s.ensemble_log;
    ensure(
        e.r2 > 0.5 && e.iou > 0.5 && s.n_members == 4,
        format!(
            "{}-member mean on {} test releases: R2 {:.3} (> 0.5), IoU {:.3} (> 0.5); constant baseline R2 {:.3}",
            s.n_members, s.n_test, e.r2, e.iou, s.baseline_log.r2
        ),
    )
}

fn spread_error(s: &AnalysisSummary) -> Outcome {
    let map = &s.spread_error_map;
    let mut ok = map.rho >= 0.2;
    let mut detail = format!("map rho {:.3} over {} cells (>= 0.2)", map.rho, map.n);
    for m in &s.molefrac {
        ok &= m.spread_error.rho > 0.0;
        detail.push_str(&format!("; {} rho {:.3} over {} records (> 0)", m.flux_id, m.spread_error.rho, m.spread_error.n));
    }
    ensure(ok && s.molefrac.len() == 2, detail)
}

fn quantile_map_contract(run: &Path) -> Outcome {
    let cfg = PipelineConfig::default();
    let layout = RunLayout::new(run, cfg.clone());
    let data = TrainingData::load(&layout.manifest(), cfg.postprocess.eps_log, cfg.postprocess.tau).map_err(|e| e.to_string())?;
    let ctx = GraphContext::build(cfg.features.side, cfg.mesh.spacing).map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    let mut violations = 0;
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for ckpt in layout.checkpoints() {
        let params = Checkpoint::load(&ckpt).map_err(|e| e.to_string())?.params;
        let map = load_postprocess(&ckpt)
            .map_err(|e| e.to_string())?
            .quantile_map
            .ok_or("checkpoint has no quantile map")?;
        let preds = predict_log(&params, &data.validation, &ctx).map_err(|e| e.to_string())?;
        let mut mapped = Vec::new();
        let mut truth = Vec::new();
        for (s, p) in data.validation.iter().zip(&preds) {
            for ((&a, &b), &m) in p.iter().zip(&s.target).zip(&s.in_domain) {
                if m {
                    mapped.push(map.apply_one(a));
                    truth.push(b);
                }
            }
        }
        mapped.sort_by(f64::total_cmp);
        truth.sort_by(f64::total_cmp);
        let q = |v: &[f64], l: f64| v[(l * (v.len() - 1) as f64).round() as usize];
        let n = map.levels.len();
        for &l in &map.levels[1..n - 1] {
            worst = worst.max((q(&mapped, l) - q(&truth, l)).abs());
        }
        let (lo, hi) = (truth[0] - 10.0, truth[truth.len() - 1] + 10.0);
        for _ in 0..1000 {
            let a: f64 = rng.random_range(lo..hi);
            let b: f64 = rng.random_range(lo..hi);
            let (x1, x2) = if a <= b { (a, b) } else { (b, a) };
            if map.apply_one(x1) > map.apply_one(x2) {
                violations += 1;
            }
        }
    }
    ensure(
        worst < 1e-6 && violations == 0,
        format!("max interior-knot deviation {worst:.1e} log units (< 1e-6); {violations} monotonicity violations in 4x1000 pairs"),
    )
}

fn speedup(run: &Path, scratch: &Path) -> Outcome {
    let layout = RunLayout::new(run, PipelineConfig::default());
    let out = scratch.join("bench.json");
    let status = Command::new(BIN)
        .arg("bench")
        .arg("--manifest")
        .arg(layout.manifest())
        .arg("--ckpt")
        .arg(layout.checkpoint(1))
        .arg("--met")
        .arg(layout.met_file())
        .args(["--n", "10", "--out"])
        .arg(&out)
        .status()
        .map_err(|e| e.to_string())?;
    if !status.success() {
        return Err(format!("bench exited with {status}"));
    }
    let report: BenchReport = serde_json::from_str(&std::fs::read_to_string(&out).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    ensure(
        report.ratio >= 10.0,
        format!(
            "oracle {:.3}s / emulator {:.4}s = {:.1}x (>= 10) over {} runs",
            report.oracle_median_s, report.emulator_median_s, report.ratio, report.runs
        ),
    )
}

fn training_regression(run: &Path) -> Outcome {
    let layout = RunLayout::new(run, PipelineConfig::default());
    let mut detail = Vec::new();
    let mut ok = true;
    for seed in PipelineConfig::default().ensemble.seeds {
        let path = epoch_log_path(&layout.checkpoint(seed));
        let text = std::fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
        let val: Vec<f64> = text.lines().skip(1).map(|l| l.split(',').nth(2).unwrap().parse().unwrap()).collect();
        let (first, last) = (val[0], val[val.len() - 1]);
        ok &= last <= first;
        detail.push(format!("seed {seed}: {first:.2} -> {last:.2}"));
    }
    ensure(ok, format!("validation loss first -> last epoch: {}", detail.join(", ")))
}

fn cli_contract(scratch: &Path) -> Outcome {
    let code = |args: &[&str]| Command::new(BIN).args(args).output().map(|o| o.status.code()).map_err(|e| e.to_string());
    let missing = scratch.join("absent.json");
    let unknown_flag = code(&["reproduce", "--bogus", "--out", "x"])?;
    let missing_config = code(&["gen-met", "--config", missing.to_str().unwrap(), "--out", "x"])?;
    let missing_input = code(&["gen-data", "--met", scratch.join("absent.met1").to_str().unwrap(), "--out", "x"])?;
    let help = code(&["--help"])?;
    ensure(
        unknown_flag == Some(1) && missing_config == Some(1) && missing_input == Some(2) && help == Some(0),
        format!("unknown flag {unknown_flag:?}, missing config {missing_config:?}, unreadable input {missing_input:?}, help {help:?}"),
    )
}

fn main() -> ExitCode {
    if std::env::args().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    let mut suite = Suite { failed: 0, total: 0 };
    println!("acceptance suite (default config)");
    suite.check("gradient correctness", gradient_correctness);
    suite.check("oracle physics (a) stationary", physics_stationary);
    suite.check("oracle physics (b) trajectory", physics_trajectory);
    suite.check("oracle physics (c) mass bound", physics_mass_bound);
    suite.check("cv unit cases", cv_unit_cases);
    suite.check("mole-fraction algebra", molefrac_algebra);
    suite.check("mesh structure", mesh_structure);

    let scratch = tempfile::tempdir().expect("temp dir");
    suite.check("cli exit codes", || cli_contract(scratch.path()));
    let (a, b) = (scratch.path().join("run_a"), scratch.path().join("run_b"));
    let runs = reproduce(&a).and_then(|ta| reproduce(&b).map(|tb| [ta, tb]));
    match runs {
        Err(e) => {
            for name in [
                "end-to-end determinism",
                "learning signal",
                "spread-error correspondence",
                "quantile-map contract",
                "training regression",
                "desk-scale speed-up",
            ] {
                suite.check(name, || Err(format!("reproduce failed: {e}")));
            }
        }
        Ok(times) => {
            suite.check("end-to-end determinism", || determinism(&a, &b, &times));
            let summary = load_summary(&a);
            suite.check("learning signal", || learning_signal(summary.as_ref().map_err(Clone::clone)?));
            suite.check("spread-error correspondence", || spread_error(summary.as_ref().map_err(Clone::clone)?));
            suite.check("quantile-map contract", || quantile_map_contract(&a));
            suite.check("training regression", || training_regression(&a));
            suite.check("desk-scale speed-up", || speedup(&a, scratch.path()));
        }
    }

    println!("{} of {} criteria passed", suite.total - suite.failed, suite.total);
    if suite.failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
