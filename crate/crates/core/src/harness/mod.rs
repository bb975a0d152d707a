//! Configuration, checkpoints, metric logs, plots and the run steps that tie
//! the other modules into reproducible experiments.

mod checkpoint;
mod config;
mod metrics;
mod plots;
mod runs;

pub use checkpoint::{
    load_checkpoint, read_manifest, save_checkpoint, BlobEntry, Checkpoint, CheckpointManifest, NamedBlob, BLOB_FILE,
    MANIFEST_FILE, SCHEMA_VERSION,
};
pub use config::{parse_config, parse_override, Preset, RunConfig};
pub use metrics::{read_metrics, MetricRecord, MetricsLog, METRICS_FILE, TIMING_FILE};
pub use plots::{emit_intervention_plot, emit_probe_plots, render_bar_chart, render_line_plot, Bar, LinePlot, Series};
pub use runs::{
    check_split, generate_data, load_model, load_policy, model_from_checkpoint, params_digest, policy_checkpoint,
    policy_demos, policy_from_checkpoint, prepare_output, pretrain_checkpoint, pretrainer_from_checkpoint, read_data,
    read_json, run_eval, run_intervene, run_pretrain, run_probe, run_train_policy, write_data, write_eval, write_json,
    CHECKPOINT_DIR, CONFIG_FILE, DATASET_DIR, SPLIT_FILE,
};
