//! Benchmark fixtures shared by the criterion benches.

use specrep::train::{parse_configs, TrainConfig};

/// A single parsed config from `key = value` text.
pub fn config(text: &str) -> TrainConfig {
    parse_configs(text).expect("bench config parses").remove(0)
}
