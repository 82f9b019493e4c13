//! Sharded storage and training-window sampling.

mod queue;
mod sampler;
mod shard;

pub use queue::{QueueStats, ShardQueue};
pub use sampler::{
    sample_window, sample_window_from, MemoryCorpus, MixtureSampler, RawWindow, ShardStream, WindowSample,
    WindowSource,
};
pub use shard::{
    build_shards, import_csv, read_all, read_shard, record_bytes, write_csv, ShardData, ShardEntry, ShardManifest,
    ShardSeries, SplitSeries, DEFAULT_SHARD_BYTES, MANIFEST_FILE, MIN_SHARD_BYTES, RECORD_HEADER_BYTES,
};

/// Environment variable naming the default data root.
pub const DATA_DIR_ENV: &str = "SF_DATA_DIR";
