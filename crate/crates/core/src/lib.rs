//! Role-aware overlapping partitioning for permission-filtered vector search.
//!
//! Documents are grouped into overlapping partitions, each with its own HNSW index, so that a user's
//! query only visits partitions dense in documents the user may read.

pub mod bench;
pub mod engine;
pub mod error;
pub mod ids;
pub mod index;
pub mod maintenance;
pub mod partition;
pub mod perf;
pub mod rbac;
pub mod scalar;
pub mod sets;
pub mod workload;

pub use error::{Error, Result};
pub use ids::{DocId, PartitionId, RoleId, UserId};
pub use index::{brute_force_topk, Dataset, Distance, HnswIndex, HnswParams, Hit, SearchResult};
pub use partition::{build_routing, greedy_split, PartitionPlan, RoutingTable, SplitConfig};
pub use perf::{CostModel, LatencyParams, RecallParams};
pub use rbac::{AuthSet, RbacPolicy};
pub use scalar::Scalar;

pub type Index = HnswIndex<f32>;
pub type Vectors = Dataset<f32>;
pub type Hits = SearchResult<f32>;
pub type Latency = LatencyParams<f64>;
pub type Recall = RecallParams<f64>;
pub type Cost = CostModel<f64>;
