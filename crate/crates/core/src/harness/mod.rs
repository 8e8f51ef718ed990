//! Experiment configs, report records, and the commands behind the CLI.

mod commands;
mod config;
mod report;

pub use commands::{
    build_backbone, cmd_ablate_k, cmd_bench_mem, cmd_eval, cmd_gen_data, cmd_print_config, cmd_train, load_data,
    train_from, TrainOutcome, CHECKPOINT_FILE, REPORT_FILE,
};
pub use config::{AblationConfig, BackboneConfig, BackboneInit, BenchConfig, ExperimentConfig};
pub use report::{read_records, write_records, Record};
