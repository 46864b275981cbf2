use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use footprint_uq::config::PipelineConfig;
use footprint_uq::pipeline::{self, RunLayout};

fn tiny_config() -> PipelineConfig {
    PipelineConfig::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/tiny.json")).unwrap()
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

#[test]
fn reproduce_is_deterministic_across_worker_counts() {
    let cfg = tiny_config();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let sa = pipeline::reproduce(&cfg, a.path(), 1, |_| {}).unwrap();
    let sb = pipeline::reproduce(&cfg, b.path(), 3, |_| {}).unwrap();
    assert_eq!(serde_json::to_string(&sa).unwrap(), serde_json::to_string(&sb).unwrap());
    let (ta, tb) = (tree(a.path()), tree(b.path()));
    assert_eq!(ta.keys().collect::<Vec<_>>(), tb.keys().collect::<Vec<_>>());
    for (path, bytes) in &ta {
        assert!(bytes == &tb[path], "{} differs", path.display());
    }

    let layout = RunLayout::new(a.path(), cfg.clone());
    let analysis = layout.analysis_dir();
    for name in [
        "summary.json",
        "map_truth.csv",
        "map_mean.csv",
        "map_std.csv",
        "map_cv.csv",
        "map_error.csv",
        "rose_count.csv",
        "rose_cv_footprint.csv",
        "training_curves.csv",
    ] {
        assert!(analysis.join(name).is_file(), "missing {name}");
    }
    for flux in ["bottomup", "uniform"] {
        assert!(analysis.join(format!("series_cv_{flux}.csv")).is_file());
        assert!(analysis.join(format!("rose_cv_{flux}.csv")).is_file());
    }
    assert!(layout.report_dir().join("report.md").is_file());
    assert_eq!(layout.checkpoints().len(), cfg.ensemble.seeds.len());

    let curves = std::fs::read_to_string(analysis.join("training_curves.csv")).unwrap();
    assert_eq!(curves.lines().count(), 1 + cfg.ensemble.seeds.len() * cfg.train.epochs);
    let records = pipeline::read_records(&layout.molefrac_dir().join("records.csv")).unwrap();
    assert_eq!(records.len(), 2 * cfg.releases.n_test);
}

#[test]
fn analysis_can_be_rerun_from_disk() {
    let cfg = tiny_config();
    let dir = tempfile::tempdir().unwrap();
    let first = pipeline::reproduce(&cfg, dir.path(), 1, |_| {}).unwrap();
    let summary_path = RunLayout::new(dir.path(), cfg.clone()).analysis_dir().join("summary.json");
    let bytes = std::fs::read(&summary_path).unwrap();
    let again = pipeline::run_analysis(&RunLayout::new(dir.path(), cfg)).unwrap();
    assert_eq!(serde_json::to_string(&first).unwrap(), serde_json::to_string(&again).unwrap());
    assert_eq!(bytes, std::fs::read(&summary_path).unwrap());
}
