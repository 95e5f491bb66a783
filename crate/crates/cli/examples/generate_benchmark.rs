//! Writes the synthetic nonlinear benchmark to a directory.
//!
//! ```text
//! cargo run -p kmspc-cli --example generate_benchmark -- data/benchmark
//! kmspc run --config data/benchmark/run.conf
//! ```

use std::path::PathBuf;

use kmspc::benchmark::{write_benchmark, BenchmarkConfig};

fn main() {
    let dir = std::env::args().nth(1).map_or_else(|| PathBuf::from("data/benchmark"), PathBuf::from);
    match write_benchmark(&dir, &BenchmarkConfig::default()) {
        Ok(b) => println!(
            "wrote {} healthy, {} monitored, {} calibration samples to {}",
            b.healthy.n(),
            b.monitor.n(),
            b.calibration.n(),
            dir.display()
        ),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(1);
        }
    }
}
