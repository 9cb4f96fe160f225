//! Embedding parameter server: LRU-managed shards, lazy initialization,
//! optimizer application and flat checkpoints.

pub mod checkpoint;
pub mod lru;
pub mod node;
pub mod shard;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use lru::{EmbeddingEntry, LruStore};
pub use shard::{ps_apply_gradients, ps_lookup, EmbeddingOptimizer, PsShard, ShardSet, ShardSpec};
