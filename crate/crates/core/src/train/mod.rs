//! Optimization: AdamW, cosine schedule, pretraining and fine-tuning loops,
//! evaluation, checkpoints and the metrics stream.

mod checkpoint;
mod metrics;
mod optim;
mod schedule;
mod source;
mod trainer;

pub use checkpoint::{
    load_checkpoint, save_checkpoint, stored_dtype, Checkpoint, RngState, TrainState, FORMAT_VERSION, MAGIC,
};
pub use metrics::{read_metrics, Event, MetricRecord, MetricsSink};
pub use optim::{adamw_step, decays, AdamW, Moments};
pub use schedule::cosine_lr;
pub use source::{augment, load_splits, Splits};
pub use trainer::{
    check_compatible, checkpoint_path, evaluate, finetune, make_shards, pretrain, resize_for_eval,
    sharded_gradients, top_k, EvalReport, Shard,
};

/// Environment variable capping worker threads.
pub const THREADS_ENV: &str = "SRMAE_THREADS";

/// Sizes the global worker pool from `SRMAE_THREADS` when set. Returns the
/// pool size in effect. Safe to call more than once; only the first call
/// configures the pool.
pub fn init_thread_pool() -> usize {
    if let Some(n) = std::env::var(THREADS_ENV).ok().and_then(|v| v.parse::<usize>().ok()) {
        if n > 0 {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
    rayon::current_num_threads()
}
