#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::Path;

use kmspc::benchmark::{write_benchmark, BenchmarkConfig};
use kmspc::config::RunConfig;

/// A small labelled benchmark and a fast configuration writing into `dir/out`.
pub fn small_run(dir: &Path) -> RunConfig {
    let bc = BenchmarkConfig {
        n_healthy: 60,
        n_monitor: 40,
        fault_start: 20,
        n_calibration_per_class: 15,
        ..Default::default()
    };
    write_benchmark(dir, &bc).unwrap();
    let mut cfg = RunConfig::from_file(&dir.join("run.conf")).unwrap();
    cfg.set("draws", "30", dir).unwrap();
    cfg.set("max_iters", "30", dir).unwrap();
    cfg
}

/// Every file in a directory with its bytes.
pub fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap())
        .filter(|e| e.file_type().unwrap().is_file())
        .map(|e| (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap()))
        .collect()
}
